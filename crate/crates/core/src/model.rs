//! The adaptable network `f = h ∘ g`: a two-layer ReLU encoder `g` and a
//! linear classifier `h`, with reverse-mode gradients written out by hand and
//! a momentum SGD optimizer.
//!
//! Once the classifier is frozen it never receives a gradient and the
//! optimizer never touches it; only the encoder moves during adaptation.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::{softmax, soft_cross_entropy, Matrix, Rng};

pub const CHECKPOINT_MAGIC: &str = "UFDMODEL v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_feat: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptModel {
    pub dims: ModelDims,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub wc: Matrix,
    pub bc: Vec<f64>,
    pub classifier_frozen: bool,
}

/// Everything computed on the way from an input to its class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub input: Vec<f64>,
    pub pre_activation: Vec<f64>,
    pub hidden: Vec<f64>,
    /// Encoder output `g(x)`; the embedding all clustering works on.
    pub feature: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Upstream gradient of a per-sample loss with respect to the two outputs the
/// losses touch.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrad {
    pub logits: Vec<f64>,
    pub feature: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            logits: vec![0.0; dims.num_classes],
            feature: vec![0.0; dims.d_feat],
        }
    }
}

/// Parameter-shaped buffer, used for both gradients and optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub wc: Matrix,
    pub bc: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            w1: Matrix::zeros(dims.d_in, dims.d_hidden),
            b1: vec![0.0; dims.d_hidden],
            w2: Matrix::zeros(dims.d_hidden, dims.d_feat),
            b2: vec![0.0; dims.d_feat],
            wc: Matrix::zeros(dims.d_feat, dims.num_classes),
            bc: vec![0.0; dims.num_classes],
        }
    }

    fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice(),
            &self.b1,
            self.w2.as_slice(),
            &self.b2,
            self.wc.as_slice(),
            &self.bc,
        ]
    }

    /// All entries flattened in checkpoint order (w1, b1, w2, b2, wc, bc).
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0))
    }
}

impl AdaptModel {
    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    pub fn new(dims: ModelDims, rng: &mut Rng) -> Result<Self> {
        if dims.d_in == 0 || dims.d_hidden == 0 || dims.d_feat == 0 || dims.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "invalid model dims {dims:?} (need positive widths and at least 2 classes)"
            )));
        }
        let mut layer = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut w = Matrix::zeros(fan_in, fan_out);
            for v in w.as_mut_slice() {
                *v = rng.uniform_range(-bound, bound);
            }
            let b: Vec<f64> = (0..fan_out)
                .map(|_| rng.uniform_range(-bound, bound))
                .collect();
            (w, b)
        };
        let (w1, b1) = layer(dims.d_in, dims.d_hidden);
        let (w2, b2) = layer(dims.d_hidden, dims.d_feat);
        let (wc, bc) = layer(dims.d_feat, dims.num_classes);
        Ok(Self {
            dims,
            w1,
            b1,
            w2,
            b2,
            wc,
            bc,
            classifier_frozen: false,
        })
    }

    pub fn zeroed(dims: ModelDims) -> Self {
        let g = Gradients::zeros(&dims);
        Self {
            dims,
            w1: g.w1,
            b1: g.b1,
            w2: g.w2,
            b2: g.b2,
            wc: g.wc,
            bc: g.bc,
            classifier_frozen: false,
        }
    }

    pub fn freeze_classifier(&mut self) {
        self.classifier_frozen = true;
    }

    pub fn parameter_count(&self) -> usize {
        let d = &self.dims;
        d.d_in * d.d_hidden + d.d_hidden + d.d_hidden * d.d_feat + d.d_feat + d.d_feat * d.num_classes + d.num_classes
    }

    fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_mut_slice(),
            &mut self.b1,
            self.w2.as_mut_slice(),
            &mut self.b2,
            self.wc.as_mut_slice(),
            &mut self.bc,
        ]
    }

    /// Mutable access to one parameter by flat index, in checkpoint order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for t in self.tensors_mut() {
            if index < t.len() {
                return &mut t[index];
            }
            index -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardRecord> {
        let d = &self.dims;
        if x.len() != d.d_in {
            return Err(Error::DimensionMismatch {
                expected: d.d_in,
                got: x.len(),
            });
        }
        let pre_activation = affine(x, &self.w1, &self.b1);
        let hidden: Vec<f64> = pre_activation.iter().map(|&z| z.max(0.0)).collect();
        let feature = affine(&hidden, &self.w2, &self.b2);
        let logits = affine(&feature, &self.wc, &self.bc);
        let probs = softmax(&logits);
        Ok(ForwardRecord {
            input: x.to_vec(),
            pre_activation,
            hidden,
            feature,
            logits,
            probs,
        })
    }

    /// Forward pass over every row, results in row order.
    pub fn forward_rows(&self, xs: &Matrix) -> Result<Vec<ForwardRecord>> {
        (0..xs.rows())
            .into_par_iter()
            .map(|i| self.forward(xs.row(i)))
            .collect()
    }

    pub fn forward_indices(&self, xs: &Matrix, indices: &[usize]) -> Result<Vec<ForwardRecord>> {
        indices
            .par_iter()
            .map(|&i| self.forward(xs.row(i)))
            .collect()
    }

    /// Batch-averaged parameter gradients given each sample's upstream
    /// gradient. Classifier gradients stay zero while it is frozen.
    pub fn backward(&self, records: &[ForwardRecord], upstream: &[OutputGrad]) -> Result<Gradients> {
        if records.is_empty() {
            return Err(Error::MissingCache("no forward records for the batch".into()));
        }
        if records.len() != upstream.len() {
            return Err(Error::MissingCache(format!(
                "{} forward records for {} upstream gradients",
                records.len(),
                upstream.len()
            )));
        }
        let d = self.dims;
        let mut g = Gradients::zeros(&d);
        for (rec, up) in records.iter().zip(upstream) {
            if rec.feature.len() != d.d_feat
                || rec.hidden.len() != d.d_hidden
                || up.logits.len() != d.num_classes
                || up.feature.len() != d.d_feat
            {
                return Err(Error::MissingCache("record shape does not match the model".into()));
            }
            if !self.classifier_frozen {
                outer_add(&mut g.wc, &rec.feature, &up.logits);
                add_into(&mut g.bc, &up.logits);
            }
            // dL/dfeature = Wc · dlogits + direct feature gradient
            let mut dfeat = up.feature.clone();
            for (i, df) in dfeat.iter_mut().enumerate() {
                *df += crate::numerics::dot(self.wc.row(i), &up.logits);
            }
            outer_add(&mut g.w2, &rec.hidden, &dfeat);
            add_into(&mut g.b2, &dfeat);
            let dpre: Vec<f64> = (0..d.d_hidden)
                .map(|j| {
                    if rec.pre_activation[j] > 0.0 {
                        crate::numerics::dot(self.w2.row(j), &dfeat)
                    } else {
                        0.0
                    }
                })
                .collect();
            outer_add(&mut g.w1, &rec.input, &dpre);
            add_into(&mut g.b1, &dpre);
        }
        let scale = 1.0 / records.len() as f64;
        g.w1.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        g.b1.iter_mut().for_each(|v| *v *= scale);
        g.w2.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        g.b2.iter_mut().for_each(|v| *v *= scale);
        g.wc.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
        g.bc.iter_mut().for_each(|v| *v *= scale);
        Ok(g)
    }

    pub fn to_checkpoint_string(&self) -> String {
        let d = &self.dims;
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(s, "{} {} {} {}", d.d_in, d.d_hidden, d.d_feat, d.num_classes).unwrap();
        writeln!(s, "frozen {}", u8::from(self.classifier_frozen)).unwrap();
        let blocks: [(&str, usize, usize, &[f64]); 6] = [
            ("w1", d.d_in, d.d_hidden, self.w1.as_slice()),
            ("b1", 1, d.d_hidden, &self.b1),
            ("w2", d.d_hidden, d.d_feat, self.w2.as_slice()),
            ("b2", 1, d.d_feat, &self.b2),
            ("wc", d.d_feat, d.num_classes, self.wc.as_slice()),
            ("bc", 1, d.num_classes, &self.bc),
        ];
        for (name, rows, cols, data) in blocks {
            writeln!(s, "{name} {rows} {cols}").unwrap();
            for r in 0..rows {
                let line: Vec<String> = data[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| format!("{v:?}"))
                    .collect();
                writeln!(s, "{}", line.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("unexpected end of checkpoint, expected {what}"),
            })
        };
        let (ln, magic) = next("header")?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                line: ln,
                msg: format!("expected `{CHECKPOINT_MAGIC}`"),
            });
        }
        let (ln, dims_line) = next("dims")?;
        let dims_v = parse_usizes(dims_line, ln)?;
        if dims_v.len() != 4 {
            return Err(Error::Parse {
                line: ln,
                msg: "expected `d_in d_hidden d_feat num_classes`".into(),
            });
        }
        let dims = ModelDims {
            d_in: dims_v[0],
            d_hidden: dims_v[1],
            d_feat: dims_v[2],
            num_classes: dims_v[3],
        };
        let (ln, frozen_line) = next("frozen flag")?;
        let classifier_frozen = match frozen_line.trim() {
            "frozen 1" => true,
            "frozen 0" => false,
            _ => {
                return Err(Error::Parse {
                    line: ln,
                    msg: "expected `frozen 0|1`".into(),
                })
            }
        };
        let mut model = AdaptModel::zeroed(dims);
        model.classifier_frozen = classifier_frozen;
        let shapes = [
            ("w1", dims.d_in, dims.d_hidden),
            ("b1", 1, dims.d_hidden),
            ("w2", dims.d_hidden, dims.d_feat),
            ("b2", 1, dims.d_feat),
            ("wc", dims.d_feat, dims.num_classes),
            ("bc", 1, dims.num_classes),
        ];
        let mut tensors: Vec<Vec<f64>> = Vec::with_capacity(6);
        for (name, rows, cols) in shapes {
            let (ln, head) = next("block header")?;
            if head.trim() != format!("{name} {rows} {cols}") {
                return Err(Error::Parse {
                    line: ln,
                    msg: format!("expected block header `{name} {rows} {cols}`"),
                });
            }
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows {
                let (ln, row) = next("tensor row")?;
                let vals = parse_f64s(row, ln)?;
                if vals.len() != cols {
                    return Err(Error::Parse {
                        line: ln,
                        msg: format!("expected {cols} values, found {}", vals.len()),
                    });
                }
                data.extend(vals);
            }
            tensors.push(data);
        }
        for (dst, src) in model.tensors_mut().into_iter().zip(tensors) {
            dst.copy_from_slice(&src);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&std::fs::read_to_string(path)?)
    }
}

fn parse_usizes(line: &str, ln: usize) -> Result<Vec<usize>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<usize>().map_err(|e| Error::Parse {
                line: ln,
                msg: format!("`{t}`: {e}"),
            })
        })
        .collect()
}

pub(crate) fn parse_f64s(line: &str, ln: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: ln,
                    msg: format!("`{t}` is not a finite number"),
                })
        })
        .collect()
}

/// `x · W + b` for a row vector `x`.
fn affine(x: &[f64], w: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &wij) in out.iter_mut().zip(w.row(i)) {
            *o += xi * wij;
        }
    }
    out
}

fn outer_add(m: &mut Matrix, left: &[f64], right: &[f64]) {
    for (i, &l) in left.iter().enumerate() {
        if l == 0.0 {
            continue;
        }
        for (v, &r) in m.row_mut(i).iter_mut().zip(right) {
            *v += l * r;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Label-smoothed cross-entropy of one source prediction:
/// `q_c = (1 - alpha) [c = label] + alpha / C`.
pub fn loss_source(probs: &[f64], label: usize, alpha: f64) -> Result<f64> {
    Ok(soft_cross_entropy(probs, &smoothed_target(probs.len(), label, alpha)?))
}

pub fn smoothed_target(num_classes: usize, label: usize, alpha: f64) -> Result<Vec<f64>> {
    if label >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {num_classes} classes"
        )));
    }
    if !(0.0..1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("smoothing {alpha} not in [0, 1)")));
    }
    let base = alpha / num_classes as f64;
    let mut q = vec![base; num_classes];
    q[label] += 1.0 - alpha;
    Ok(q)
}

/// Momentum SGD: `v <- momentum * v + g; w <- w - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Gradients,
}

impl Optimizer {
    pub fn new(dims: &ModelDims, lr: f64, momentum: f64) -> Result<Self> {
        if lr.is_nan() || lr <= 0.0 || !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "need lr > 0 and momentum in [0, 1), got lr={lr} momentum={momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: Gradients::zeros(dims),
        })
    }

    pub fn step(&mut self, model: &mut AdaptModel, grads: &Gradients) {
        let (lr, mu) = (self.lr, self.momentum);
        let update = |w: &mut [f64], v: &mut [f64], g: &[f64]| {
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        };
        update(model.w1.as_mut_slice(), self.velocity.w1.as_mut_slice(), grads.w1.as_slice());
        update(&mut model.b1, &mut self.velocity.b1, &grads.b1);
        update(model.w2.as_mut_slice(), self.velocity.w2.as_mut_slice(), grads.w2.as_slice());
        update(&mut model.b2, &mut self.velocity.b2, &grads.b2);
        if !model.classifier_frozen {
            update(model.wc.as_mut_slice(), self.velocity.wc.as_mut_slice(), grads.wc.as_slice());
            update(&mut model.bc, &mut self.velocity.bc, &grads.bc);
        }
    }
}
