//! Reverse-mode automatic differentiation over [`Tensor2`] values.
//!
//! A [`Tape`] records primitive ops as they execute; [`Tape::backward`]
//! replays them in exact reverse order, accumulating gradients additively.
//! Every op validates shapes and rejects non-finite outputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{Tensor2, Trans};
use super::NnError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Running batch-norm statistics, one slot per normalized column.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BnStats {
    pub fn new(dim: usize) -> Self {
        BnStats {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

struct BnCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
    train: bool,
}

enum Op {
    Input,
    MatMul { a: usize, b: usize },
    // a * b^T
    MatMulNT { a: usize, b: usize },
    AddBias { x: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    // `add` shifts the forward value only; the backward pass needs just `mul`
    Affine { x: usize, mul: f64 },
    PowScalar { x: usize, exponent: f64 },
    Log { x: usize },
    Exp { x: usize },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: f64 },
    Sigmoid { x: usize },
    SoftmaxRows { x: usize },
    ConcatCols { xs: Vec<usize> },
    SliceCols { x: usize, start: usize },
    GatherRows { table: usize, indices: Vec<usize> },
    ReduceSum { x: usize },
    ReduceMean { x: usize },
    L2NormalizeRows { x: usize, inv_norms: Vec<f64> },
    BatchNorm { x: usize, gamma: usize, beta: usize, cache: BnCache },
    Dropout { x: usize, mask: Vec<f64> },
    StBinarize { x: usize },
    ArcFaceMargin { cos: usize, labels: Vec<usize>, scale: f64, margin: f64 },
    SupCon { h: usize, grad_h: Tensor2 },
    SoftmaxXent { logits: usize, labels: Vec<usize>, probs: Tensor2 },
    KlToSoftmax { logits: usize, q: Tensor2, temp: f64, probs: Tensor2 },
    MaskedBce { x: usize, target: Tensor2, weights: Tensor2 },
}

/// Gradients produced by a backward pass, indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor2>>,
    shapes: Vec<(usize, usize)>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`; zero tensor if the var does not
    /// influence the loss.
    pub fn take(&mut self, v: Var) -> Tensor2 {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| Tensor2::zeros(r, c))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor2> {
        self.grads[v.0].as_ref()
    }
}

pub struct Tape {
    ops: Vec<Op>,
    vals: Vec<Tensor2>,
}

const BCE_EPS: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            vals: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor2 {
        &self.vals[v.0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, op: Op, val: Tensor2, name: &'static str) -> Result<Var, NnError> {
        if !val.all_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        self.ops.push(op);
        self.vals.push(val);
        Ok(Var(self.vals.len() - 1))
    }

    /// Register a leaf value (parameter, input batch, or constant).
    pub fn input(&mut self, t: Tensor2) -> Var {
        self.ops.push(Op::Input);
        self.vals.push(t);
        Var(self.vals.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ar, ac) = self.vals[a.0].shape();
        let (br, bc) = self.vals[b.0].shape();
        if ac != br {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", ar, ac, br, bc),
            });
        }
        let out = super::tensor::matmul(&self.vals[a.0], Trans::No, &self.vals[b.0], Trans::No);
        self.push(Op::MatMul { a: a.0, b: b.0 }, out, "matmul")
    }

    /// a * b^T where a is m x k and b is n x k.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (ar, ac) = self.vals[a.0].shape();
        let (br, bc) = self.vals[b.0].shape();
        if ac != bc {
            return Err(NnError::ShapeMismatch {
                op: "matmul_nt",
                detail: format!("{}x{} * ({}x{})^T", ar, ac, br, bc),
            });
        }
        let out = super::tensor::matmul(&self.vals[a.0], Trans::No, &self.vals[b.0], Trans::Yes);
        self.push(Op::MatMulNT { a: a.0, b: b.0 }, out, "matmul_nt")
    }

    /// Broadcast-add a 1 x cols bias row to every row of x.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NnError> {
        let (_, xc) = self.vals[x.0].shape();
        let (br, bc) = self.vals[b.0].shape();
        if br != 1 || bc != xc {
            return Err(NnError::ShapeMismatch {
                op: "add_bias",
                detail: format!("bias {}x{} for {} columns", br, bc, xc),
            });
        }
        let xs = &self.vals[x.0];
        let bias = self.vals[b.0].as_slice().to_vec();
        let mut out = xs.clone();
        for i in 0..out.rows() {
            for (v, bv) in out.row_mut(i).iter_mut().zip(bias.iter()) {
                *v += bv;
            }
        }
        self.push(Op::AddBias { x: x.0, b: b.0 }, out, "add_bias")
    }

    fn binary_elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        if !self.vals[a.0].same_shape(&self.vals[b.0]) {
            return Err(NnError::ShapeMismatch {
                op: name,
                detail: format!(
                    "{:?} vs {:?}",
                    self.vals[a.0].shape(),
                    self.vals[b.0].shape()
                ),
            });
        }
        let out = {
            let (x, y) = (&self.vals[a.0], &self.vals[b.0]);
            let mut o = x.clone();
            for (ov, yv) in o.as_mut_slice().iter_mut().zip(y.as_slice()) {
                *ov = f(*ov, *yv);
            }
            o
        };
        self.push(op, out, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_elementwise(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.binary_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Elementwise mul * x + add.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var, NnError> {
        let out = self.vals[x.0].map(|v| mul * v + add);
        self.push(Op::Affine { x: x.0, mul }, out, "affine")
    }

    pub fn pow_scalar(&mut self, x: Var, exponent: f64) -> Result<Var, NnError> {
        let out = self.vals[x.0].map(|v| v.powf(exponent));
        self.push(Op::PowScalar { x: x.0, exponent }, out, "pow")
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.vals[x.0].map(f64::ln);
        self.push(Op::Log { x: x.0 }, out, "log")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.vals[x.0].map(f64::exp);
        self.push(Op::Exp { x: x.0 }, out, "exp")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.vals[x.0].map(|v| v.max(0.0));
        self.push(Op::Relu { x: x.0 }, out, "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, NnError> {
        let out = self.vals[x.0].map(|v| if v >= 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { x: x.0, slope }, out, "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        let out = self.vals[x.0].map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(Op::Sigmoid { x: x.0 }, out, "sigmoid")
    }

    /// Row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let out = softmax_of(&self.vals[x.0], 1.0);
        self.push(Op::SoftmaxRows { x: x.0 }, out, "softmax")
    }

    /// Concatenate along columns; all inputs must share a row count.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var, NnError> {
        if xs.is_empty() {
            return Err(NnError::ShapeMismatch {
                op: "concat_cols",
                detail: "no inputs".into(),
            });
        }
        let rows = self.vals[xs[0].0].rows();
        let mut total = 0;
        for v in xs {
            if self.vals[v.0].rows() != rows {
                return Err(NnError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("row counts {} vs {}", rows, self.vals[v.0].rows()),
                });
            }
            total += self.vals[v.0].cols();
        }
        let mut out = Tensor2::zeros(rows, total);
        for i in 0..rows {
            let dst = out.row_mut(i);
            let mut off = 0;
            for v in xs {
                let src = self.vals[v.0].row(i);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ids = xs.iter().map(|v| v.0).collect();
        self.push(Op::ConcatCols { xs: ids }, out, "concat_cols")
    }

    /// Columns [start, end) of x.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NnError> {
        let (rows, cols) = self.vals[x.0].shape();
        if start >= end || end > cols {
            return Err(NnError::ShapeMismatch {
                op: "slice_cols",
                detail: format!("[{}, {}) of {} columns", start, end, cols),
            });
        }
        let mut out = Tensor2::zeros(rows, end - start);
        for i in 0..rows {
            out.row_mut(i)
                .copy_from_slice(&self.vals[x.0].row(i)[start..end]);
        }
        self.push(Op::SliceCols { x: x.0, start }, out, "slice_cols")
    }

    /// Row i of the output is row indices[i] of the table (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var, NnError> {
        let (trows, tcols) = self.vals[table.0].shape();
        if let Some(&bad) = indices.iter().find(|&&i| i >= trows) {
            return Err(NnError::ShapeMismatch {
                op: "gather_rows",
                detail: format!("index {} out of {} rows", bad, trows),
            });
        }
        let mut out = Tensor2::zeros(indices.len(), tcols);
        for (i, &idx) in indices.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.vals[table.0].row(idx));
        }
        self.push(
            Op::GatherRows {
                table: table.0,
                indices: indices.to_vec(),
            },
            out,
            "gather_rows",
        )
    }

    pub fn reduce_sum(&mut self, x: Var) -> Result<Var, NnError> {
        let s: f64 = self.vals[x.0].as_slice().iter().sum();
        self.push(Op::ReduceSum { x: x.0 }, Tensor2::scalar(s), "reduce_sum")
    }

    pub fn reduce_mean(&mut self, x: Var) -> Result<Var, NnError> {
        let n = self.vals[x.0].len() as f64;
        let s: f64 = self.vals[x.0].as_slice().iter().sum();
        self.push(Op::ReduceMean { x: x.0 }, Tensor2::scalar(s / n), "reduce_mean")
    }

    /// Scale each row to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var, NnError> {
        let xs = &self.vals[x.0];
        let mut out = xs.clone();
        let mut inv_norms = Vec::with_capacity(xs.rows());
        for i in 0..out.rows() {
            let norm = out.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(NnError::NonFinite { op: "l2_normalize" });
            }
            let inv = 1.0 / norm;
            for v in out.row_mut(i) {
                *v *= inv;
            }
            inv_norms.push(inv);
        }
        self.push(
            Op::L2NormalizeRows { x: x.0, inv_norms },
            out,
            "l2_normalize",
        )
    }

    /// Batch normalization over columns with affine parameters.
    ///
    /// Train mode normalizes with batch statistics and folds them into the
    /// running stats (momentum `momentum`); eval mode normalizes with the
    /// running stats and leaves them untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<Var, NnError> {
        let (rows, cols) = self.vals[x.0].shape();
        for (v, name) in [(gamma, "gamma"), (beta, "beta")] {
            let s = self.vals[v.0].shape();
            if s != (1, cols) {
                return Err(NnError::ShapeMismatch {
                    op: "batchnorm",
                    detail: format!("{} is {:?}, expected 1x{}", name, s, cols),
                });
            }
        }
        if stats.mean.len() != cols {
            return Err(NnError::ShapeMismatch {
                op: "batchnorm",
                detail: format!("running stats dim {} vs {} columns", stats.mean.len(), cols),
            });
        }
        let train = mode == Mode::Train;
        if train && rows < 2 {
            return Err(NnError::ShapeMismatch {
                op: "batchnorm",
                detail: "train mode needs at least 2 rows".into(),
            });
        }

        let (mean, var): (Vec<f64>, Vec<f64>) = if train {
            let mut mean = vec![0.0; cols];
            let mut var = vec![0.0; cols];
            for i in 0..rows {
                for (j, v) in self.vals[x.0].row(i).iter().enumerate() {
                    mean[j] += v;
                }
            }
            for m in &mut mean {
                *m /= rows as f64;
            }
            for i in 0..rows {
                for (j, v) in self.vals[x.0].row(i).iter().enumerate() {
                    let d = v - mean[j];
                    var[j] += d * d;
                }
            }
            // biased variance for normalization
            for v in &mut var {
                *v /= rows as f64;
            }
            // unbiased variance feeds the running estimate
            let unbias = rows as f64 / (rows as f64 - 1.0);
            for j in 0..cols {
                stats.mean[j] = (1.0 - momentum) * stats.mean[j] + momentum * mean[j];
                stats.var[j] = (1.0 - momentum) * stats.var[j] + momentum * var[j] * unbias;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Tensor2::zeros(rows, cols);
        for i in 0..rows {
            let src = self.vals[x.0].row(i);
            let dst = xhat.row_mut(i);
            for j in 0..cols {
                dst[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.vals[gamma.0].as_slice().to_vec();
        let b = self.vals[beta.0].as_slice().to_vec();
        let mut out = Tensor2::zeros(rows, cols);
        for i in 0..rows {
            let src = xhat.row(i);
            let dst = out.row_mut(i);
            for j in 0..cols {
                dst[j] = g[j] * src[j] + b[j];
            }
        }
        self.push(
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                cache: BnCache { xhat, inv_std, train },
            },
            out,
            "batchnorm",
        )
    }

    /// Inverted dropout. Train mode zeroes each element with probability
    /// `rate` and scales survivors by 1/(1-rate); eval mode is the identity
    /// and consumes no randomness.
    pub fn dropout(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var, NnError> {
        if mode == Mode::Eval || rate == 0.0 {
            let out = self.vals[x.0].clone();
            let mask = vec![1.0; out.len()];
            return self.push(Op::Dropout { x: x.0, mask }, out, "dropout");
        }
        let rng = rng.ok_or(NnError::ShapeMismatch {
            op: "dropout",
            detail: "train mode requires an RNG".into(),
        })?;
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f64> = (0..self.vals[x.0].len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let mut out = self.vals[x.0].clone();
        for (v, m) in out.as_mut_slice().iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        self.push(Op::Dropout { x: x.0, mask }, out, "dropout")
    }

    /// Straight-through binarization: forward thresholds at `threshold`
    /// (ties round up to 1), backward is the identity.
    pub fn straight_through_binarize(&mut self, x: Var, threshold: f64) -> Result<Var, NnError> {
        let out = self.vals[x.0].map(|v| if v >= threshold { 1.0 } else { 0.0 });
        self.push(Op::StBinarize { x: x.0 }, out, "st_binarize")
    }

    /// ArcFace logits from a cosine-similarity matrix: scale * cos(theta + m)
    /// on each row's labelled entry, scale * cos(theta) elsewhere.
    pub fn arcface_margin(
        &mut self,
        cos: Var,
        labels: &[usize],
        scale: f64,
        margin: f64,
    ) -> Result<Var, NnError> {
        let (rows, cols) = self.vals[cos.0].shape();
        if labels.len() != rows {
            return Err(NnError::ShapeMismatch {
                op: "arcface_margin",
                detail: format!("{} labels for {} rows", labels.len(), rows),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= cols) {
            return Err(NnError::ShapeMismatch {
                op: "arcface_margin",
                detail: format!("label {} out of {} classes", bad, cols),
            });
        }
        let mut out = self.vals[cos.0].map(|v| scale * v);
        for (i, &c) in labels.iter().enumerate() {
            let u = clamp_cos(self.vals[cos.0].at(i, c));
            let theta = u.acos();
            out.set(i, c, scale * (theta + margin).cos());
        }
        self.push(
            Op::ArcFaceMargin {
                cos: cos.0,
                labels: labels.to_vec(),
                scale,
                margin,
            },
            out,
            "arcface_margin",
        )
    }

    /// Supervised contrastive loss over unit-norm embeddings at temperature
    /// `tau`. Anchors without a same-label positive contribute zero.
    pub fn supcon_loss(&mut self, h: Var, labels: &[usize], tau: f64) -> Result<Var, NnError> {
        let hv = &self.vals[h.0];
        let n = hv.rows();
        if labels.len() != n {
            return Err(NnError::ShapeMismatch {
                op: "supcon",
                detail: format!("{} labels for {} rows", labels.len(), n),
            });
        }
        // sims[i][j] = h_i . h_j / tau
        let sims = super::tensor::matmul(hv, Trans::No, hv, Trans::Yes).map(|v| v / tau);
        let mut g = Tensor2::zeros(n, n); // dL/dsims
        let mut loss = 0.0;
        let mut anchors = 0usize;
        for i in 0..n {
            let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            anchors += 1;
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let max = others
                .iter()
                .map(|&j| sims.at(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = others.iter().map(|&j| (sims.at(i, j) - max).exp()).sum();
            let lse = max + denom.ln();
            let inv_p = 1.0 / pos.len() as f64;
            for &p in &pos {
                loss += -(inv_p) * (sims.at(i, p) - lse);
            }
            // dL_i/dsims[i][j] = p_ij - inv_p * [j in pos]
            for &j in &others {
                let p_ij = (sims.at(i, j) - lse).exp();
                let mut grad = p_ij;
                if labels[j] == labels[i] {
                    grad -= inv_p;
                }
                g.set(i, j, grad);
            }
        }
        if anchors == 0 {
            let zero = Tensor2::zeros(n, hv.cols());
            return self.push(
                Op::SupCon { h: h.0, grad_h: zero },
                Tensor2::scalar(0.0),
                "supcon",
            );
        }
        let scale = 1.0 / anchors as f64;
        loss *= scale;
        // dL/dH = (G + G^T) H / tau, scaled by 1/anchors
        let mut gsym = g.clone();
        for i in 0..n {
            for j in 0..n {
                gsym.set(i, j, (g.at(i, j) + g.at(j, i)) * scale / tau);
            }
        }
        let grad_h = super::tensor::matmul(&gsym, Trans::No, hv, Trans::No);
        self.push(Op::SupCon { h: h.0, grad_h }, Tensor2::scalar(loss), "supcon")
    }

    /// Mean softmax cross-entropy of logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NnError> {
        let (rows, cols) = self.vals[logits.0].shape();
        if labels.len() != rows {
            return Err(NnError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for {} rows", labels.len(), rows),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= cols) {
            return Err(NnError::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("label {} out of {} classes", bad, cols),
            });
        }
        let probs = softmax_of(&self.vals[logits.0], 1.0);
        let mut loss = 0.0;
        for (i, &c) in labels.iter().enumerate() {
            loss -= probs.at(i, c).max(1e-300).ln();
        }
        loss /= rows as f64;
        self.push(
            Op::SoftmaxXent {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            Tensor2::scalar(loss),
            "softmax_cross_entropy",
        )
    }

    /// Mean KL(q || softmax(logits / temp)) over rows; `q` is a constant
    /// target distribution matrix.
    pub fn kl_to_softmax(&mut self, logits: Var, q: &Tensor2, temp: f64) -> Result<Var, NnError> {
        if !self.vals[logits.0].same_shape(q) {
            return Err(NnError::ShapeMismatch {
                op: "kl_to_softmax",
                detail: format!("{:?} vs {:?}", self.vals[logits.0].shape(), q.shape()),
            });
        }
        let probs = softmax_of(&self.vals[logits.0], temp);
        let rows = q.rows();
        let mut loss = 0.0;
        for i in 0..rows {
            for (qv, pv) in q.row(i).iter().zip(probs.row(i)) {
                if *qv > 0.0 {
                    loss += qv * (qv.ln() - pv.max(1e-300).ln());
                }
            }
        }
        loss /= rows as f64;
        self.push(
            Op::KlToSoftmax {
                logits: logits.0,
                q: q.clone(),
                temp,
                probs,
            },
            Tensor2::scalar(loss),
            "kl_to_softmax",
        )
    }

    /// Weighted binary cross-entropy sum: sum_ij w_ij * BCE(x_ij, t_ij).
    ///
    /// Entries with zero weight are skipped entirely, so masked positions
    /// never produce non-finite intermediates.
    pub fn masked_bce(&mut self, x: Var, target: &Tensor2, weights: &Tensor2) -> Result<Var, NnError> {
        let xv = &self.vals[x.0];
        if !xv.same_shape(target) || !xv.same_shape(weights) {
            return Err(NnError::ShapeMismatch {
                op: "masked_bce",
                detail: format!(
                    "x {:?}, target {:?}, weights {:?}",
                    xv.shape(),
                    target.shape(),
                    weights.shape()
                ),
            });
        }
        let mut loss = 0.0;
        for ((&p, &t), &w) in xv
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .zip(weights.as_slice())
        {
            if w == 0.0 {
                continue;
            }
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            loss += w * (-(t * p.ln() + (1.0 - t) * (1.0 - p).ln()));
        }
        self.push(
            Op::MaskedBce {
                x: x.0,
                target: target.clone(),
                weights: weights.clone(),
            },
            Tensor2::scalar(loss),
            "masked_bce",
        )
    }

    /// Reverse pass from a scalar loss. Consumes nothing; the tape can be
    /// inspected afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Grads, NnError> {
        if self.vals[loss.0].len() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "backward",
                detail: format!("loss must be 1x1, got {:?}", self.vals[loss.0].shape()),
            });
        }
        let n = self.ops.len();
        let mut grads: Vec<Option<Tensor2>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor2::scalar(1.0));

        for idx in (0..n).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.ops[idx] {
                Op::Input => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul { a, b } => {
                    // dA = G * B^T, dB = A^T * G
                    let (a, b) = (*a, *b);
                    let da = super::tensor::matmul(&g, Trans::No, &self.vals[b], Trans::Yes);
                    let db = super::tensor::matmul(&self.vals[a], Trans::Yes, &g, Trans::No);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::MatMulNT { a, b } => {
                    // C = A B^T: dA = G * B, dB = G^T * A
                    let (a, b) = (*a, *b);
                    let da = super::tensor::matmul(&g, Trans::No, &self.vals[b], Trans::No);
                    let db = super::tensor::matmul(&g, Trans::Yes, &self.vals[a], Trans::No);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::AddBias { x, b } => {
                    let (x, b) = (*x, *b);
                    let mut db = Tensor2::zeros(1, g.cols());
                    for i in 0..g.rows() {
                        for (j, v) in g.row(i).iter().enumerate() {
                            db.as_mut_slice()[j] += v;
                        }
                    }
                    accumulate(&mut grads, x, g);
                    accumulate(&mut grads, b, db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    accumulate(&mut grads, b, g.map(|v| -v));
                    accumulate(&mut grads, a, g);
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = hadamard(&g, &self.vals[b]);
                    let db = hadamard(&g, &self.vals[a]);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::Affine { x, mul } => {
                    let (x, mul) = (*x, *mul);
                    accumulate(&mut grads, x, g.map(|v| v * mul));
                }
                Op::PowScalar { x, exponent } => {
                    let (x, p) = (*x, *exponent);
                    let mut dx = self.vals[x].map(|v| p * v.powf(p - 1.0));
                    for (d, gv) in dx.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *d *= gv;
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Log { x } => {
                    let x = *x;
                    let dx = {
                        let mut d = self.vals[x].map(|v| 1.0 / v);
                        for (dv, gv) in d.as_mut_slice().iter_mut().zip(g.as_slice()) {
                            *dv *= gv;
                        }
                        d
                    };
                    accumulate(&mut grads, x, dx);
                }
                Op::Exp { x } => {
                    let x = *x;
                    let dx = hadamard(&g, &self.vals[idx]);
                    accumulate(&mut grads, x, dx);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let mut dx = g.clone();
                    for (dv, xv) in dx.as_mut_slice().iter_mut().zip(self.vals[x].as_slice()) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let (x, slope) = (*x, *slope);
                    let mut dx = g.clone();
                    for (dv, xv) in dx.as_mut_slice().iter_mut().zip(self.vals[x].as_slice()) {
                        if *xv < 0.0 {
                            *dv *= slope;
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    let mut dx = self.vals[idx].map(|s| s * (1.0 - s));
                    for (dv, gv) in dx.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *dv *= gv;
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let s = &self.vals[idx];
                    let mut dx = s.zeros_like();
                    for i in 0..s.rows() {
                        let dot: f64 = g.row(i).iter().zip(s.row(i)).map(|(gv, sv)| gv * sv).sum();
                        for (j, d) in dx.row_mut(i).iter_mut().enumerate() {
                            *d = s.at(i, j) * (g.at(i, j) - dot);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::ConcatCols { xs } => {
                    let xs = xs.clone();
                    let mut off = 0;
                    for xid in xs {
                        let cols = self.vals[xid].cols();
                        let mut dx = Tensor2::zeros(g.rows(), cols);
                        for i in 0..g.rows() {
                            dx.row_mut(i).copy_from_slice(&g.row(i)[off..off + cols]);
                        }
                        off += cols;
                        accumulate(&mut grads, xid, dx);
                    }
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let mut dx = self.vals[x].zeros_like();
                    for i in 0..g.rows() {
                        dx.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::GatherRows { table, indices } => {
                    let (table, indices) = (*table, indices.clone());
                    let mut dt = self.vals[table].zeros_like();
                    for (i, idx2) in indices.iter().enumerate() {
                        let row = g.row(i).to_vec();
                        for (j, v) in row.iter().enumerate() {
                            let cur = dt.at(*idx2, j);
                            dt.set(*idx2, j, cur + v);
                        }
                    }
                    accumulate(&mut grads, table, dt);
                }
                Op::ReduceSum { x } => {
                    let x = *x;
                    let gv = g.item();
                    let dx = self.vals[x].map(|_| gv);
                    accumulate(&mut grads, x, dx);
                }
                Op::ReduceMean { x } => {
                    let x = *x;
                    let gv = g.item() / self.vals[x].len() as f64;
                    let dx = self.vals[x].map(|_| gv);
                    accumulate(&mut grads, x, dx);
                }
                Op::L2NormalizeRows { x, inv_norms } => {
                    let (x, inv_norms) = (*x, inv_norms.clone());
                    let y = &self.vals[idx];
                    let mut dx = y.zeros_like();
                    for i in 0..y.rows() {
                        let dot: f64 = g.row(i).iter().zip(y.row(i)).map(|(gv, yv)| gv * yv).sum();
                        for j in 0..y.cols() {
                            let v = inv_norms[i] * (g.at(i, j) - y.at(i, j) * dot);
                            dx.set(i, j, v);
                        }
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (x, gamma, beta) = (*x, *gamma, *beta);
                    let rows = g.rows();
                    let cols = g.cols();
                    let gam = self.vals[gamma].as_slice().to_vec();
                    let mut dgamma = Tensor2::zeros(1, cols);
                    let mut dbeta = Tensor2::zeros(1, cols);
                    for i in 0..rows {
                        for j in 0..cols {
                            dgamma.as_mut_slice()[j] += g.at(i, j) * cache.xhat.at(i, j);
                            dbeta.as_mut_slice()[j] += g.at(i, j);
                        }
                    }
                    let mut dx = Tensor2::zeros(rows, cols);
                    if cache.train {
                        // dxhat = g * gamma; dx via batch-stat corrections
                        let nb = rows as f64;
                        for j in 0..cols {
                            let mut sum_d = 0.0;
                            let mut sum_dx = 0.0;
                            for i in 0..rows {
                                let d = g.at(i, j) * gam[j];
                                sum_d += d;
                                sum_dx += d * cache.xhat.at(i, j);
                            }
                            for i in 0..rows {
                                let d = g.at(i, j) * gam[j];
                                let v = cache.inv_std[j]
                                    * (d - sum_d / nb - cache.xhat.at(i, j) * sum_dx / nb);
                                dx.set(i, j, v);
                            }
                        }
                    } else {
                        // running stats are constants
                        for i in 0..rows {
                            for j in 0..cols {
                                dx.set(i, j, g.at(i, j) * gam[j] * cache.inv_std[j]);
                            }
                        }
                    }
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dgamma);
                    accumulate(&mut grads, beta, dbeta);
                }
                Op::Dropout { x, mask } => {
                    let (x, mask) = (*x, mask.clone());
                    let mut dx = g.clone();
                    for (dv, m) in dx.as_mut_slice().iter_mut().zip(mask.iter()) {
                        *dv *= m;
                    }
                    accumulate(&mut grads, x, dx);
                }
                Op::StBinarize { x } => {
                    // straight-through: gradient passes unchanged
                    let x = *x;
                    accumulate(&mut grads, x, g);
                }
                Op::ArcFaceMargin { cos, labels, scale, margin } => {
                    let (cos, labels, scale, margin) = (*cos, labels.clone(), *scale, *margin);
                    let mut dx = g.map(|v| v * scale);
                    for (i, &c) in labels.iter().enumerate() {
                        let u = clamp_cos(self.vals[cos].at(i, c));
                        // d/du [s * cos(acos(u) + m)] = s * (cos m + u sin m / sqrt(1-u^2))
                        let deriv = scale * (margin.cos() + u * margin.sin() / (1.0 - u * u).sqrt());
                        dx.set(i, c, g.at(i, c) * deriv);
                    }
                    accumulate(&mut grads, cos, dx);
                }
                Op::SupCon { h, grad_h } => {
                    let h = *h;
                    let gh = grad_h.map(|v| v * g.item());
                    accumulate(&mut grads, h, gh);
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let (logits, labels) = (*logits, labels.clone());
                    let inv_b = g.item() / probs.rows() as f64;
                    let mut dx = probs.map(|v| v * inv_b);
                    for (i, &c) in labels.iter().enumerate() {
                        let cur = dx.at(i, c);
                        dx.set(i, c, cur - inv_b);
                    }
                    accumulate(&mut grads, logits, dx);
                }
                Op::KlToSoftmax { logits, q, temp, probs } => {
                    let (logits, temp) = (*logits, *temp);
                    let inv = g.item() / (temp * probs.rows() as f64);
                    let mut dx = probs.clone();
                    for (dv, qv) in dx.as_mut_slice().iter_mut().zip(q.as_slice()) {
                        *dv = (*dv - qv) * inv;
                    }
                    accumulate(&mut grads, logits, dx);
                }
                Op::MaskedBce { x, target, weights } => {
                    let x = *x;
                    let gv = g.item();
                    let mut dx = self.vals[x].zeros_like();
                    for (i, ((&p, &t), &w)) in self.vals[x]
                        .as_slice()
                        .iter()
                        .zip(target.as_slice())
                        .zip(weights.as_slice())
                        .enumerate()
                    {
                        if w == 0.0 {
                            continue;
                        }
                        let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                        dx.as_mut_slice()[i] = gv * w * (p - t) / (p * (1.0 - p));
                    }
                    accumulate(&mut grads, x, dx);
                }
            }
        }

        let shapes = self.vals.iter().map(|v| v.shape()).collect();
        Ok(Grads { grads, shapes })
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<Tensor2>], idx: usize, g: Tensor2) {
    match &mut grads[idx] {
        Some(existing) => existing.axpy(1.0, &g),
        slot @ None => *slot = Some(g),
    }
}

fn hadamard(a: &Tensor2, b: &Tensor2) -> Tensor2 {
    let mut out = a.clone();
    for (v, bv) in out.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *v *= bv;
    }
    out
}

fn clamp_cos(v: f64) -> f64 {
    v.clamp(-1.0 + 1e-7, 1.0 - 1e-7)
}

/// Row-wise softmax of x / temp with max subtraction.
pub(crate) fn softmax_of(x: &Tensor2, temp: f64) -> Tensor2 {
    let mut out = x.map(|v| v / temp);
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
