//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable operation appends a node holding its output value and
//! enough saved state to run its vector-Jacobian product. `backward` walks the
//! nodes in reverse order once. Nodes whose inputs never touch a trainable
//! parameter are marked as not needing a gradient and are skipped, so frozen
//! prefixes of a network cost nothing on the way back.

use std::collections::HashMap;

use super::kernels;
use super::{DType, Tensor};
use crate::error::{contract_err, shape_err, Error, Result};
use crate::spectral;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter registry. Insertion order is stable and defines the
/// checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        id
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> + '_ {
        self.ids()
            .map(move |id| (id, self.names[id.0].as_str(), &self.tensors[id.0]))
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Number of scalars with `requires_grad` set.
    pub fn trainable_scalars(&self) -> usize {
        self.tensors
            .iter()
            .filter(|t| t.requires_grad())
            .map(Tensor::numel)
            .sum()
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Softmax(Var),
    TopkMask(Var),
    Softplus(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    GatherCols(Var, Vec<usize>),
    SumRows(Var),
    ConcatRows(Vec<Var>),
    SumAll(Var),
    CvSquared(Var),
    Rfft2 { z: Var, h: usize, w: usize },
    Irfft2 { f: Var, h: usize, w: usize },
    MulSpectrum(Var, Var),
    PixelCe {
        logits: Var,
        hist: Vec<f64>,
        counts: Vec<f64>,
        probs: Vec<f64>,
        pixels: f64,
    },
    Reshape(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow(..) => "add_row",
            Op::MulRows(..) => "mul_rows",
            Op::Softmax(..) => "softmax",
            Op::TopkMask(..) => "topk_mask",
            Op::Softplus(..) => "softplus",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::SumRows(..) => "sum_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::SumAll(..) => "sum_all",
            Op::CvSquared(..) => "cv_squared",
            Op::Rfft2 { .. } => "rfft2",
            Op::Irfft2 { .. } => "irfft2",
            Op::MulSpectrum(..) => "mul_spectrum",
            Op::PixelCe { .. } => "pixel_cross_entropy",
            Op::Reshape(..) => "reshape",
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Deliberately wrong backward rules, for exercising gradient checks.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Softmax backward returns `g ⊙ y`, dropping the `-y·(g·y)` term.
    SoftmaxNoCorrection,
}

/// Ordered record of executed operations.
pub struct Tape {
    nodes: Vec<Node>,
    dtype: DType,
    param_vars: HashMap<ParamId, Var>,
    poisoned: Option<String>,
    fault: Option<BackwardFault>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new(DType::F64)
    }
}

/// Gradients of one scalar with respect to every tape node that needed one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: impl IntoIterator<Item = f64>, len: usize) {
    match slot {
        Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
        None => {
            let v: Vec<f64> = g.into_iter().collect();
            debug_assert_eq!(v.len(), len);
            *slot = Some(v);
        }
    }
}

impl Tape {
    pub fn new(dtype: DType) -> Self {
        Tape {
            nodes: Vec::new(),
            dtype,
            param_vars: HashMap::new(),
            poisoned: None,
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    /// Leaf handle of a parameter already registered on this tape.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Parameter leaves must be re-registered.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.param_vars.clear();
        self.poisoned = None;
    }

    fn push(&mut self, shape: Vec<usize>, mut value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        if self.dtype == DType::F32 {
            value.iter_mut().for_each(|v| *v = DType::F32.round(*v));
        }
        if self.poisoned.is_none()
            && !matches!(op, Op::TopkMask(_))
            && value.iter().any(|v| !v.is_finite())
        {
            self.poisoned = Some(format!(
                "non-finite value produced by `{}` (node {})",
                op.name(),
                self.nodes.len()
            ));
        }
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(n.shape.clone(), n.value.clone(), self.dtype)
    }

    pub fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => shape_err(format!("expected a matrix, got {s:?}")),
        }
    }

    /// Fails if any recorded operation produced NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match &self.poisoned {
            Some(msg) => Err(Error::Numerical(msg.clone())),
            None => Ok(()),
        }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// A leaf that participates in differentiation regardless of any store.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Registers a stored parameter, reusing the leaf if already on the tape.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        );
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return shape_err(format!("matmul {m}x{k} · {k2}x{n}"));
        }
        let out = kernels::gemm(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return shape_err(format!("matmul_nt {m}x{k} · ({n}x{k2})ᵀ"));
        }
        let out = kernels::gemm_nt(self.value(a), self.value(b), m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(self.shape(a).to_vec(), out, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|v| v * c).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), ng)
    }

    /// `a[r×c] + bias` where `bias` holds `c` values, added to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if self.value(bias).len() != c {
            return shape_err(format!("add_row: {r}x{c} + {:?}", self.shape(bias)));
        }
        let bv = self.value(bias);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(vec![r, c], out, Op::AddRow(a, bias), ng))
    }

    /// Scales row `i` of `a[r×c]` by `s[i]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if self.value(s).len() != r {
            return shape_err(format!("mul_rows: {r}x{c} by {:?}", self.shape(s)));
        }
        let sv = self.value(s);
        let mut out = self.value(a).to_vec();
        for (row, &k) in out.chunks_mut(c).zip(sv) {
            row.iter_mut().for_each(|o| *o *= k);
        }
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(vec![r, c], out, Op::MulRows(a, s), ng))
    }

    /// Softmax over the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(a).chunks(c) {
            out.extend(kernels::softmax_lane(row)?);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![r, c], out, Op::Softmax(a), ng))
    }

    /// Keeps the `k` largest entries of each row and sets the rest to `-inf`.
    /// Ties resolve toward the lower column index. The selection itself is
    /// treated as a constant by backward.
    pub fn topk_mask(&mut self, a: Var, k: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if k == 0 || k > c {
            return Err(Error::Config(format!("top-k width {k} outside 1..={c}")));
        }
        let mut out = vec![f64::NEG_INFINITY; r * c];
        let mut order: Vec<usize> = Vec::with_capacity(c);
        for (i, row) in self.value(a).chunks(c).enumerate() {
            order.clear();
            order.extend(0..c);
            order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            for &j in &order[..k] {
                out[i * c + j] = row[j];
            }
        }
        let ng = self.ng(a);
        Ok(self.push(vec![r, c], out, Op::TopkMask(a), ng))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&z| kernels::softplus(z)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Softplus(a), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&z| kernels::gelu(z)).collect();
        let ng = self.ng(a);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), ng)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims2(x)?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return shape_err(format!("layer_norm affine params must hold {c} values"));
        }
        let (out, xhat, inv_std) = kernels::layer_norm(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            r,
            c,
            eps,
        );
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            vec![r, c],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    /// Rows `idx` of `a`, in the given order.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return shape_err(format!("gather_rows index {bad} out of {r} rows"));
        }
        if idx.is_empty() {
            return shape_err("gather_rows with no indices");
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            vec![idx.len(), c],
            out,
            Op::GatherRows(a, idx.to_vec()),
            ng,
        ))
    }

    /// Places row `i` of `a` at row `idx[i]` of a zero `rows × c` matrix.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if idx.len() != r {
            return shape_err(format!("scatter_rows: {} indices for {r} rows", idx.len()));
        }
        let mut seen = vec![false; rows];
        for &i in idx {
            if i >= rows || seen[i] {
                return contract_err(format!("scatter_rows index {i} invalid or repeated"));
            }
            seen[i] = true;
        }
        let av = self.value(a);
        let mut out = vec![0.0; rows * c];
        for (src, &dst) in idx.iter().enumerate() {
            out[dst * c..(dst + 1) * c].copy_from_slice(&av[src * c..(src + 1) * c]);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![rows, c], out, Op::ScatterRows(a, idx.to_vec()), ng))
    }

    /// `out[i] = a[i, idx[i]]`, shaped `r × 1`.
    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims2(a)?;
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return shape_err("gather_cols index list does not match the matrix");
        }
        let av = self.value(a);
        let out = idx.iter().enumerate().map(|(i, &j)| av[i * c + j]).collect();
        let ng = self.ng(a);
        Ok(self.push(vec![r, 1], out, Op::GatherCols(a, idx.to_vec()), ng))
    }

    /// Column sums, shaped `1 × c`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (_, c) = self.dims2(a)?;
        let mut out = vec![0.0; c];
        for row in self.value(a).chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![1, c], out, Op::SumRows(a), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_rows of nothing");
        };
        let (_, c) = self.dims2(first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c2) = self.dims2(p)?;
            if c2 != c {
                return shape_err(format!("concat_rows width {c2} != {c}"));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let ng = self.ng(a);
        self.push(vec![1], vec![s], Op::SumAll(a), ng)
    }

    /// Sum over columns of the squared coefficient of variation of each
    /// column of `a[b×e]` (population variance over rows divided by the squared
    /// row mean). A column with zero mean contributes 0.
    pub fn cv_squared(&mut self, a: Var) -> Result<Var> {
        let (b, e) = self.dims2(a)?;
        let av = self.value(a);
        let mut total = 0.0;
        for j in 0..e {
            let mean = (0..b).map(|i| av[i * e + j]).sum::<f64>() / b as f64;
            if mean == 0.0 {
                continue;
            }
            // Shifted by the first entry so that equal masses give exactly 0.
            let first = av[j];
            let shift = (0..b).map(|i| av[i * e + j] - first).sum::<f64>() / b as f64;
            let var = (0..b)
                .map(|i| (av[i * e + j] - first - shift).powi(2))
                .sum::<f64>()
                / b as f64;
            total += var / (mean * mean);
        }
        let ng = self.ng(a);
        Ok(self.push(vec![1], vec![total], Op::CvSquared(a), ng))
    }

    /// Half-spectrum 2-D DFT of tokens `z[(h·w)×d]` laid out row-major on an
    /// `h × w` grid. Output is `[2, h, ⌊w/2⌋+1, d]`: real plane, then imaginary.
    pub fn rfft2(&mut self, z: Var, h: usize, w: usize) -> Result<Var> {
        let (n, d) = self.dims2(z)?;
        if n != h * w {
            return shape_err(format!("{n} tokens do not fill a {h}x{w} grid"));
        }
        let out = spectral::rfft2_raw(self.value(z), h, w, d);
        let ng = self.ng(z);
        Ok(self.push(
            vec![2, h, w / 2 + 1, d],
            out,
            Op::Rfft2 { z, h, w },
            ng,
        ))
    }

    /// Inverse of [`Tape::rfft2`]; output is `(h·w) × d`.
    pub fn irfft2(&mut self, f: Var, w: usize) -> Result<Var> {
        let s = self.shape(f).to_vec();
        let [2, h, wf, d] = s[..] else {
            return shape_err(format!("irfft2 expects [2,h,wf,d], got {s:?}"));
        };
        if wf != w / 2 + 1 {
            return shape_err(format!("{wf} frequency bins do not match width {w}"));
        }
        let out = spectral::irfft2_raw(self.value(f), h, w, d);
        let ng = self.ng(f);
        Ok(self.push(vec![h * w, d], out, Op::Irfft2 { f, h, w }, ng))
    }

    /// Scales the real and imaginary parts of every bin by the same real weight.
    pub fn mul_spectrum(&mut self, f: Var, weight: Var) -> Result<Var> {
        let half = self.value(f).len() / 2;
        if self.shape(f).first() != Some(&2) || self.shape(weight) != &self.shape(f)[1..] {
            return shape_err(format!(
                "filter {:?} does not match spectrum {:?}",
                self.shape(weight),
                self.shape(f)
            ));
        }
        let fv = self.value(f);
        let wv = self.value(weight);
        let out = fv
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[i % half])
            .collect();
        let ng = self.ng(f) || self.ng(weight);
        Ok(self.push(self.shape(f).to_vec(), out, Op::MulSpectrum(f, weight), ng))
    }

    /// Mean per-pixel cross-entropy of patch logits `[(gh·gw) × K]` upsampled
    /// by nearest neighbour (factor `patch`) against a `(gh·patch) × (gw·patch)`
    /// label map.
    pub fn pixel_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        grid: (usize, usize),
        patch: usize,
    ) -> Result<Var> {
        let (n, k) = self.dims2(logits)?;
        let (gh, gw) = grid;
        if n != gh * gw {
            return shape_err(format!("{n} logit rows for a {gh}x{gw} grid"));
        }
        let width = gw * patch;
        let pixels = gh * patch * width;
        if labels.len() != pixels {
            return shape_err(format!("{} labels for {pixels} pixels", labels.len()));
        }
        let mut hist = vec![0.0; n * k];
        for (p, &y) in labels.iter().enumerate() {
            if y >= k {
                return Err(Error::Data(format!("label {y} outside 0..{k}")));
            }
            let tok = (p / width / patch) * gw + (p % width) / patch;
            hist[tok * k + y] += 1.0;
        }
        let counts: Vec<f64> = hist.chunks(k).map(|h| h.iter().sum()).collect();
        let lv = self.value(logits);
        let mut probs = Vec::with_capacity(n * k);
        let mut loss = 0.0;
        for t in 0..n {
            let row = &lv[t * k..(t + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for j in 0..k {
                loss += hist[t * k + j] * (lse - row[j]);
                probs.push((row[j] - lse).exp());
            }
        }
        let pixels = pixels as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            vec![1],
            vec![loss / pixels],
            Op::PixelCe {
                logits,
                hist,
                counts,
                probs,
                pixels,
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return shape_err(format!("reshape {:?} -> {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        let ng = self.ng(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), ng))
    }

    /// Reverse sweep from a scalar. Returns the gradient of every node that
    /// depends on a trainable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes[loss.0].value.len() != 1 {
            return contract_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            ));
        }
        self.backward_seeded(&[(loss, vec![1.0])])
    }

    /// Reverse sweep from several nodes at once, each with its own upstream
    /// gradient. Equivalent to differentiating `Σ ⟨seed_i, node_i⟩`.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)]) -> Result<Gradients> {
        self.check_finite()?;
        let top = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(top + 1);
        grads.resize_with(top + 1, || None);
        for (v, g) in seeds {
            let len = self.nodes[v.0].value.len();
            if g.len() != len {
                return contract_err(format!("seed of length {} for a node of {len} values", g.len()));
            }
            add_into(&mut grads[v.0], g.iter().copied(), len);
        }
        for idx in (0..=top).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.param_vars {
            if let Some(g) = grads.get(v) {
                if store.get(id).requires_grad() {
                    store.get_mut(id).accumulate_grad(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.as_slice();
        let len = |v: Var| self.nodes[v.0].value.len();
        let dims = |v: Var| {
            let s = &self.nodes[v.0].shape;
            (s[0], s[1])
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(*a);
                let n = node.shape[1];
                if self.ng(*a) {
                    let ga = kernels::gemm_nt(g, val(*b), m, n, k);
                    add_into(&mut grads[a.0], ga, m * k);
                }
                if self.ng(*b) {
                    let gb = kernels::gemm_tn(val(*a), g, m, k, n);
                    add_into(&mut grads[b.0], gb, k * n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = dims(*a);
                let n = node.shape[1];
                if self.ng(*a) {
                    let ga = kernels::gemm(g, val(*b), m, n, k);
                    add_into(&mut grads[a.0], ga, m * k);
                }
                if self.ng(*b) {
                    let gb = kernels::gemm_tn(g, val(*a), m, n, k);
                    add_into(&mut grads[b.0], gb, n * k);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g.iter().copied(), g.len());
                }
                if self.ng(*b) {
                    add_into(&mut grads[b.0], g.iter().copied(), g.len());
                }
            }
            Op::Sub(a, b) => {
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g.iter().copied(), g.len());
                }
                if self.ng(*b) {
                    add_into(&mut grads[b.0], g.iter().map(|v| -v), g.len());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    let gb = g.iter().zip(val(*b)).map(|(x, y)| x * y);
                    add_into(&mut grads[a.0], gb, g.len());
                }
                if self.ng(*b) {
                    let ga = g.iter().zip(val(*a)).map(|(x, y)| x * y);
                    add_into(&mut grads[b.0], ga, g.len());
                }
            }
            Op::Scale(a, c) => {
                add_into(&mut grads[a.0], g.iter().map(|v| v * c), g.len());
            }
            Op::AddRow(a, bias) => {
                let c = node.shape[1];
                if self.ng(*a) {
                    add_into(&mut grads[a.0], g.iter().copied(), g.len());
                }
                if self.ng(*bias) {
                    let mut gb = vec![0.0; c];
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    add_into(&mut grads[bias.0], gb, c);
                }
            }
            Op::MulRows(a, s) => {
                let c = node.shape[1];
                if self.ng(*a) {
                    let sv = val(*s);
                    let ga = g.iter().enumerate().map(|(i, v)| v * sv[i / c]);
                    add_into(&mut grads[a.0], ga, g.len());
                }
                if self.ng(*s) {
                    let gs: Vec<f64> = g
                        .chunks(c)
                        .zip(val(*a).chunks(c))
                        .map(|(gr, ar)| gr.iter().zip(ar).map(|(x, y)| x * y).sum())
                        .collect();
                    let n = gs.len();
                    add_into(&mut grads[s.0], gs, n);
                }
            }
            Op::Softmax(a) => {
                let c = node.shape[1];
                let mut ga = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(node.value.chunks(c)) {
                    let dot: f64 = match self.fault {
                        Some(BackwardFault::SoftmaxNoCorrection) => 0.0,
                        None => gr.iter().zip(yr).map(|(x, y)| x * y).sum(),
                    };
                    ga.extend(gr.iter().zip(yr).map(|(x, y)| y * (x - dot)));
                }
                add_into(&mut grads[a.0], ga, g.len());
            }
            Op::TopkMask(a) => {
                let ga = g
                    .iter()
                    .zip(&node.value)
                    .map(|(x, y)| if y.is_finite() { *x } else { 0.0 });
                add_into(&mut grads[a.0], ga, g.len());
            }
            Op::Softplus(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(x, z)| x * kernels::sigmoid(*z));
                add_into(&mut grads[a.0], ga, g.len());
            }
            Op::Gelu(a) => {
                let ga = g
                    .iter()
                    .zip(val(*a))
                    .map(|(x, z)| x * kernels::gelu_grad(*z));
                add_into(&mut grads[a.0], ga, g.len());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.shape[1];
                let gam = val(*gamma);
                if self.ng(*x) {
                    let mut gx = Vec::with_capacity(g.len());
                    for (r, (gr, hr)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let dh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / c as f64;
                        gx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| k * (c as f64 * d - sum_dh - h * sum_dh_h)),
                        );
                    }
                    add_into(&mut grads[x.0], gx, g.len());
                }
                if self.ng(*gamma) {
                    let mut gg = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                    add_into(&mut grads[gamma.0], gg, c);
                }
                if self.ng(*beta) {
                    let mut gb = vec![0.0; c];
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(o, v)| *o += v);
                    }
                    add_into(&mut grads[beta.0], gb, c);
                }
            }
            Op::GatherRows(a, idx) => {
                let c = node.shape[1];
                let mut ga = vec![0.0; len(*a)];
                for (src, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        ga[i * c + j] += g[src * c + j];
                    }
                }
                let n = ga.len();
                add_into(&mut grads[a.0], ga, n);
            }
            Op::ScatterRows(a, idx) => {
                let c = node.shape[1];
                let mut ga = Vec::with_capacity(idx.len() * c);
                for &dst in idx {
                    ga.extend_from_slice(&g[dst * c..(dst + 1) * c]);
                }
                let n = ga.len();
                add_into(&mut grads[a.0], ga, n);
            }
            Op::GatherCols(a, idx) => {
                let (_, c) = dims(*a);
                let mut ga = vec![0.0; len(*a)];
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] = g[i];
                }
                let n = ga.len();
                add_into(&mut grads[a.0], ga, n);
            }
            Op::SumRows(a) => {
                let c = node.shape[1];
                let n = len(*a);
                add_into(&mut grads[a.0], (0..n).map(|i| g[i % c]), n);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = len(*p);
                    if self.ng(*p) {
                        add_into(&mut grads[p.0], g[off..off + n].iter().copied(), n);
                    }
                    off += n;
                }
            }
            Op::SumAll(a) => {
                let n = len(*a);
                add_into(&mut grads[a.0], std::iter::repeat_n(g[0], n), n);
            }
            Op::CvSquared(a) => {
                let (b, e) = dims(*a);
                let av = val(*a);
                let mut ga = vec![0.0; b * e];
                let bf = b as f64;
                for j in 0..e {
                    let mean = (0..b).map(|i| av[i * e + j]).sum::<f64>() / bf;
                    if mean == 0.0 {
                        continue;
                    }
                    let var = (0..b)
                        .map(|i| (av[i * e + j] - mean).powi(2))
                        .sum::<f64>()
                        / bf;
                    let m2 = mean * mean;
                    for i in 0..b {
                        let dvar = 2.0 * (av[i * e + j] - mean) / bf;
                        let dmean = 1.0 / bf;
                        ga[i * e + j] = g[0] * (dvar / m2 - 2.0 * var / (m2 * mean) * dmean);
                    }
                }
                add_into(&mut grads[a.0], ga, b * e);
            }
            Op::Rfft2 { z, h, w } => {
                let d = node.shape[3];
                let gz = spectral::rfft2_adjoint_raw(g, *h, *w, d);
                let n = gz.len();
                add_into(&mut grads[z.0], gz, n);
            }
            Op::Irfft2 { f, h, w } => {
                let d = node.shape[1];
                let gf = spectral::irfft2_adjoint_raw(g, *h, *w, d);
                let n = gf.len();
                add_into(&mut grads[f.0], gf, n);
            }
            Op::MulSpectrum(f, weight) => {
                let half = node.value.len() / 2;
                if self.ng(*f) {
                    let wv = val(*weight);
                    let gf = g.iter().enumerate().map(|(i, v)| v * wv[i % half]);
                    add_into(&mut grads[f.0], gf, g.len());
                }
                if self.ng(*weight) {
                    let fv = val(*f);
                    let gw = (0..half).map(|i| g[i] * fv[i] + g[i + half] * fv[i + half]);
                    add_into(&mut grads[weight.0], gw, half);
                }
            }
            Op::PixelCe {
                logits,
                hist,
                counts,
                probs,
                pixels,
            } => {
                let k = hist.len() / counts.len();
                let scale = g[0] / pixels;
                let gl = probs
                    .iter()
                    .zip(hist)
                    .enumerate()
                    .map(|(i, (p, h))| scale * (counts[i / k] * p - h));
                add_into(&mut grads[logits.0], gl, hist.len());
            }
            Op::Reshape(a) => {
                add_into(&mut grads[a.0], g.iter().copied(), g.len());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::default();
        let w = tape.input(&t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum_all(w);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::default();
        let w = tape.input(&t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(w, w).unwrap();
        let s = tape.sum_all(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn identity_left_factor_passes_upstream() {
        let mut tape = Tape::default();
        let a = tape.constant(&Tensor::eye(2));
        let b = tape.input(&Tensor::zeros(&[2, 2]));
        let p = tape.matmul(a, b).unwrap();
        let s = tape.sum_all(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert!(g.get(a).is_none());
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::default();
        let w = tape.input(&Tensor::ones(&[2]));
        assert!(matches!(tape.backward(w), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_poison_the_tape() {
        let mut tape = Tape::default();
        let w = tape.input(&t(&[1], &[1e308]));
        let big = tape.scale(w, 10.0);
        let s = tape.sum_all(big);
        assert!(matches!(tape.backward(s), Err(Error::Numerical(_))));
    }

    #[test]
    fn param_leaves_are_reused_and_accumulate() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0]).with_requires_grad(true));
        let frozen = store.add("f", t(&[2], &[3.0, 4.0]));
        let mut tape = Tape::default();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let f = tape.param(&store, frozen);
        let p = tape.mul(a, f).unwrap();
        let s = tape.sum_all(p);
        tape.backward_into(s, &mut store).unwrap();
        tape.backward_into(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad().unwrap(), &[6.0, 8.0]);
        assert!(store.get(frozen).grad().is_none());
    }

    #[test]
    fn topk_mask_keeps_largest_and_breaks_ties_low() {
        let mut tape = Tape::default();
        let h = tape.constant(&t(&[2, 3], &[2.0, 1.0, 0.5, 1.0, 1.0, 1.0]));
        let m = tape.topk_mask(h, 2).unwrap();
        let v = tape.value(m);
        assert_eq!(&v[..2], &[2.0, 1.0]);
        assert_eq!(v[2], f64::NEG_INFINITY);
        assert_eq!(&v[3..5], &[1.0, 1.0]);
        assert_eq!(v[5], f64::NEG_INFINITY);
        assert!(tape.topk_mask(h, 0).is_err());
        assert!(tape.topk_mask(h, 4).is_err());
    }

    /// Builds a random composite graph touching every op and compares the
    /// tape gradient with central differences.
    fn composite(tape: &mut Tape, w: &Tensor, rng_seed: u64) -> (Var, Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let x = tape.constant(&Tensor::randn(&[6, 4], 1.0, &mut rng));
        let wv = tape.input(w);
        let gamma = tape.constant(&Tensor::randn(&[4], 1.0, &mut rng));
        let beta = tape.constant(&Tensor::randn(&[4], 1.0, &mut rng));
        let bias = tape.constant(&Tensor::randn(&[4], 1.0, &mut rng));
        let filt = tape.constant(&Tensor::randn(&[2, 2, 4], 1.0, &mut rng));
        let xw = tape.matmul(x, wv).unwrap();
        let xb = tape.add_row(xw, bias).unwrap();
        let ln = tape.layer_norm(xb, gamma, beta, 1e-5).unwrap();
        let ge = tape.gelu(ln);
        let sp = tape.softplus(ge);
        let att = tape.matmul_nt(sp, xw).unwrap();
        let att = tape.scale(att, 0.5);
        let masked = tape.topk_mask(att, 3).unwrap();
        let sm = tape.softmax_rows(masked).unwrap();
        let mixed = tape.matmul(sm, ge).unwrap();
        let pick = tape.gather_rows(mixed, &[4, 0, 2]).unwrap();
        let back = tape.scatter_rows(pick, &[1, 5, 3], 6).unwrap();
        let sum = tape.add(back, mixed).unwrap();
        let gate = tape.gather_cols(sm, &[0, 1, 2, 3, 4, 5]).unwrap();
        let scaled = tape.mul_rows(sum, gate).unwrap();
        let spec = tape.rfft2(scaled, 2, 3).unwrap();
        let filtered = tape.mul_spectrum(spec, filt).unwrap();
        let spatial = tape.irfft2(filtered, 3).unwrap();
        let sq = tape.mul(spatial, spatial).unwrap();
        let cs = tape.sum_rows(sq).unwrap();
        let cs2 = tape.sum_rows(sm).unwrap();
        let cs2b = tape.scale(cs2, 2.0);
        let stacked = tape.concat_rows(&[cs2, cs2b, cs2]).unwrap();
        let cv = tape.cv_squared(stacked).unwrap();
        let logits = tape.reshape(spatial, &[6, 4]).unwrap();
        let labels: Vec<usize> = (0..24).map(|i| (i * 7) % 4).collect();
        let ce = tape.pixel_cross_entropy(logits, &labels, (2, 3), 2).unwrap();
        let a = tape.sum_all(cs);
        let a = tape.scale(a, 0.01);
        let l1 = tape.add(a, cv).unwrap();
        let l2 = tape.add(l1, ce).unwrap();
        let d = tape.sub(l2, cv).unwrap();
        let loss = tape.add(d, cv).unwrap();
        (loss, wv)
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::randn(&[4, 4], 0.7, &mut rng);
        let mut tape = Tape::default();
        let (loss, wv) = composite(&mut tape, &w, 5);
        let grads = tape.backward(loss).unwrap();
        let analytic = grads.get(wv).unwrap().to_vec();
        let numeric = finite_diff_grad(
            |theta| {
                let mut tape = Tape::default();
                let (loss, _) = composite(&mut tape, theta, 5);
                Ok(tape.value(loss)[0])
            },
            &w,
            1e-5,
        )
        .unwrap();
        for (a, n) in analytic.iter().zip(numeric.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < 1e-4, "analytic {a} numeric {n}");
        }
    }
}
