use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{batch_gradients, batch_loss};
use super::optim::AdamW;
use super::parallel::par_map;
use super::TrainConfig;
use crate::adapter::{argmax_labels, LandMoeModel, ParamGroup};
use crate::checkpoint::{model_records, save_records, Record};
use crate::data::{ConfusionMatrix, Experiment, Scene};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};
use crate::router::Mode;
use crate::tensor::Tensor;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    /// Mean training objective over the epoch's batches; for epoch 0 the
    /// objective of the initial model in eval mode.
    pub loss: f64,
    pub macc: f64,
    pub miou: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub trainable_params: usize,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub best_model: LandMoeModel,
    pub files: Vec<PathBuf>,
}

/// Confusion matrix of eval-mode predictions over `scenes`.
pub fn evaluate(model: &LandMoeModel, scenes: &[Scene], threads: usize) -> Result<ConfusionMatrix> {
    let parts = par_map(scenes.len(), threads, |i| -> Result<ConfusionMatrix> {
        let logits = model.predict(&scenes[i].image, Mode::Eval, 0)?;
        let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
        cm.accumulate(&argmax_labels(&logits), &scenes[i].labels)?;
        Ok(cm)
    });
    let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

fn batches(n: usize, size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(seed, &[0x5348_5546, epoch as u64]));
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("checked");
        out.last_mut().expect("checked").extend(tail);
    }
    out
}

fn backbone_snapshot(model: &LandMoeModel) -> Vec<Vec<f64>> {
    model
        .store
        .iter()
        .filter(|(_, name, _)| ParamGroup::of(name) == Some(ParamGroup::Backbone))
        .map(|(_, _, t)| t.data().to_vec())
        .collect()
}

fn record(
    model: &LandMoeModel,
    epoch: usize,
    loss: f64,
    targets: &[Scene],
    threads: usize,
) -> Result<EpochRecord> {
    let m = evaluate(model, targets, threads)?.metrics()?;
    Ok(EpochRecord {
        epoch,
        split: "target".into(),
        loss,
        macc: m.macc,
        miou: m.miou,
        per_class_acc: m.per_class_acc,
        trainable_params: model.count_trainable_params().total(),
    })
}

fn write_outputs(dir: &Path, cfg: &TrainConfig, report: &RunReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();

    let path = dir.join("config.txt");
    fs::write(&path, cfg.to_kv())?;
    files.push(path);

    let path = dir.join("metrics.jsonl");
    let mut f = fs::File::create(&path)?;
    for r in &report.history {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    files.push(path);

    let path = dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let k = cfg.model.num_classes;
    let mut header = vec!["epoch".to_string(), "loss".into(), "macc".into(), "miou".into()];
    header.extend((1..=k).map(|c| format!("C{c}")));
    w.write_record(&header)?;
    for r in &report.history {
        let mut row = vec![r.epoch.to_string(), r.loss.to_string(), r.macc.to_string(), r.miou.to_string()];
        row.extend(r.per_class_acc.iter().map(|a| a.map_or_else(|| "--".into(), |v| v.to_string())));
        w.write_record(&row)?;
    }
    w.flush()?;
    files.push(path);

    let path = dir.join("best.lmoe");
    let mut records = model_records(&report.best_model);
    records.push(Record::bytes("meta.train", cfg.to_kv().into_bytes()));
    save_records(&path, &records)?;
    files.push(path);
    Ok(files)
}

/// Trains the adapters and head on the source domain, evaluating on every
/// target domain after each epoch. Epoch 0 is the untrained model. Results
/// do not depend on `threads`.
pub fn train_run(cfg: &TrainConfig, out: Option<&Path>, threads: usize) -> Result<RunReport> {
    cfg.validate()?;
    let exp = Experiment::new(cfg.profile, cfg.seed, cfg.model.num_classes, cfg.model.channels);
    let sizes = cfg.sizes();
    let train = exp.source_scenes(&sizes)?;
    let targets = exp.target_scenes(&sizes)?;
    let mut model = LandMoeModel::new(cfg.model.clone(), cfg.seed)?;
    let frozen = backbone_snapshot(&model);
    let mut opt = AdamW::default();

    let images: Vec<&Tensor> = train.iter().map(|s| &s.image).collect();
    let labels: Vec<&[usize]> = train.iter().map(|s| s.labels.as_slice()).collect();

    let initial = batches(train.len(), cfg.batch_size, cfg.seed, 0)
        .iter()
        .map(|b| {
            let im: Vec<&Tensor> = b.iter().map(|&i| images[i]).collect();
            let lb: Vec<&[usize]> = b.iter().map(|&i| labels[i]).collect();
            batch_loss(&model, &im, &lb, cfg.lambda, Mode::Eval, 0, threads)
        })
        .collect::<Result<Vec<f64>>>()?;
    let mut history = vec![record(&model, 0, mean(&initial), &targets, threads)?];
    let mut best = (0, history[0].miou, model.clone());

    for epoch in 1..=cfg.epochs {
        let mut losses = Vec::new();
        for (step, b) in batches(train.len(), cfg.batch_size, cfg.seed, epoch).iter().enumerate() {
            let im: Vec<&Tensor> = b.iter().map(|&i| images[i]).collect();
            let lb: Vec<&[usize]> = b.iter().map(|&i| labels[i]).collect();
            let seed = derive_seed(cfg.seed, &[epoch as u64, step as u64]);
            let g = batch_gradients(&model, &im, &lb, cfg.lambda, Mode::Train, seed, threads, None)?;
            g.store_into(&mut model);
            opt.step(&mut model.store, cfg.learning_rate, cfg.weight_decay)?;
            losses.push(g.loss);
        }
        let r = record(&model, epoch, mean(&losses), &targets, threads)?;
        if r.miou > best.1 {
            best = (epoch, r.miou, model.clone());
        }
        history.push(r);
    }

    if backbone_snapshot(&model) != frozen {
        return Err(Error::Contract("a backbone parameter changed during training".into()));
    }
    let mut report = RunReport {
        history,
        best_epoch: best.0,
        best_miou: best.1,
        best_model: best.2,
        files: Vec::new(),
    };
    if let Some(dir) = out {
        report.files = write_outputs(dir, cfg, &report)?;
    }
    Ok(report)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_every_scene_once() {
        for n in [8, 9, 17] {
            let b = batches(n, 4, 3, 1);
            let mut all: Vec<usize> = b.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!(b.iter().all(|x| x.len() >= 2));
        }
        assert_ne!(batches(16, 4, 3, 1), batches(16, 4, 3, 2));
    }
}
