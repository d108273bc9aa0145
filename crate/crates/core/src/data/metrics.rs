use serde::{Deserialize, Serialize};

use crate::error::{contract_err, shape_err, Error, Result};

/// `K×K` pixel counts, rows ground truth, columns prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
    ignore_index: Option<usize>,
}

/// Percentages. Classes without support are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macc: f64,
    pub miou: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
            ignore_index: None,
        }
    }

    /// Ground-truth pixels equal to `idx` are skipped.
    pub fn with_ignore_index(mut self, idx: usize) -> Self {
        self.ignore_index = Some(idx);
        self
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return shape_err(format!("{} predictions for {} labels", pred.len(), gt.len()));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == self.ignore_index {
                continue;
            }
            if p >= self.k || g >= self.k {
                return Err(Error::Data(format!(
                    "label pair ({g}, {p}) outside 0..{}",
                    self.k
                )));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return shape_err("merging confusion matrices of different sizes");
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn metrics(&self) -> Result<Metrics> {
        if self.total() == 0 {
            return contract_err("metrics of an empty confusion matrix");
        }
        let k = self.k;
        let row = |i: usize| (0..k).map(|j| self.get(i, j)).sum::<u64>();
        let col = |j: usize| (0..k).map(|i| self.get(i, j)).sum::<u64>();
        let mut acc = Vec::with_capacity(k);
        let mut iou = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.get(c, c);
            let r = row(c);
            let union = r + col(c) - tp;
            acc.push((r > 0).then(|| 100.0 * tp as f64 / r as f64));
            iou.push((union > 0).then(|| 100.0 * tp as f64 / union as f64));
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            present.iter().sum::<f64>() / present.len() as f64
        };
        Ok(Metrics {
            macc: mean(&acc),
            miou: mean(&iou),
            per_class_acc: acc,
            per_class_iou: iou,
        })
    }
}
