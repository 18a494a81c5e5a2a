//! Source pretraining and the target adaptation loop.
//!
//! Adaptation objective per mini-batch:
//!
//! ```text
//! GLC:    eta * L_glb + L_loc
//! GLC++:  eta * L_glb + L_loc + w * L_con      (w = contrastive_weight)
//! ```
//!
//! The target class count is estimated once up front. Prototypes and pseudo
//! labels are rebuilt from a fresh forward pass at the start of every
//! `label_refresh_epochs` epochs; memory-bank rows of a batch are refreshed
//! right after its optimizer step.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::clustering::estimate_ct;
use crate::consensus::{local_targets, loss_local, MemoryBank};
use crate::contrastive::{loss_contrastive, mine_pairs};
use crate::error::{Error, Result};
use crate::model::{smoothed_target, AdaptModel, ModelDims, Optimizer, OutputGrad};
use crate::numerics::{l2_normalize_rows, soft_cross_entropy, soft_cross_entropy_grad, Matrix, Rng};
use crate::pseudolabel::{assign_pseudo_labels, build_all_prototypes, loss_global, topk_count, PseudoLabelMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Glc,
    GlcPlusPlus,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Glc => "glc",
            Variant::GlcPlusPlus => "glcpp",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "glc" => Ok(Variant::Glc),
            "glcpp" | "glc++" => Ok(Variant::GlcPlusPlus),
            other => Err(Error::InvalidArgument(format!("unknown variant `{other}` (glc|glcpp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub eta: f64,
    pub rho: f64,
    pub k_neighbors: usize,
    pub n_pairs: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub variant: Variant,
    pub omega: f64,
    pub alpha: f64,
    pub contrastive_weight: f64,
    pub d_hidden: usize,
    pub d_feat: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    pub label_refresh_epochs: usize,
    /// Refresh bank rows after every step; otherwise the whole bank is
    /// rebuilt at each epoch start.
    pub bank_step_refresh: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            eta: 0.3,
            rho: 0.75,
            k_neighbors: 4,
            n_pairs: 4,
            batch_size: 64,
            epochs: 20,
            lr: 0.001,
            momentum: 0.9,
            seed: 2021,
            variant: Variant::GlcPlusPlus,
            omega: 0.55,
            alpha: 0.1,
            contrastive_weight: 1.0,
            d_hidden: 64,
            d_feat: 32,
            pretrain_epochs: 30,
            pretrain_lr: 0.01,
            label_refresh_epochs: 1,
            bank_step_refresh: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::InvalidArgument(msg)) };
        check(self.eta > 0.0, format!("eta must be > 0, got {}", self.eta))?;
        check(self.rho > 0.0 && self.rho <= 1.0, format!("rho must be in (0, 1], got {}", self.rho))?;
        check(self.omega > 0.0 && self.omega < 1.0, format!("omega must be in (0, 1), got {}", self.omega))?;
        check((0.0..1.0).contains(&self.alpha), format!("alpha must be in [0, 1), got {}", self.alpha))?;
        check(self.k_neighbors >= 1, "k must be at least 1".into())?;
        check(self.n_pairs >= 1, "n_pairs must be at least 1".into())?;
        check(self.batch_size >= 1, "batch_size must be at least 1".into())?;
        check(self.lr > 0.0 && self.pretrain_lr > 0.0, "learning rates must be > 0".into())?;
        check((0.0..1.0).contains(&self.momentum), format!("momentum must be in [0, 1), got {}", self.momentum))?;
        check(self.contrastive_weight >= 0.0, "contrastive_weight must be >= 0".into())?;
        check(self.d_hidden >= 1 && self.d_feat >= 1, "encoder widths must be positive".into())?;
        check(self.label_refresh_epochs >= 1, "label_refresh_epochs must be at least 1".into())?;
        Ok(())
    }

    /// Weight actually applied to the contrastive term.
    pub fn effective_contrastive_weight(&self) -> f64 {
        match self.variant {
            Variant::Glc => 0.0,
            Variant::GlcPlusPlus => self.contrastive_weight,
        }
    }
}

/// Trains a fresh model on labeled source data with label-smoothed
/// cross-entropy, then freezes its classifier.
pub fn pretrain_source(source: &Matrix, labels: &[usize], dims: ModelDims, config: &AdaptConfig) -> Result<AdaptModel> {
    pretrain_source_logged(source, labels, dims, config).map(|(m, _)| m)
}

/// [`pretrain_source`] that also returns the mean training loss per epoch.
pub fn pretrain_source_logged(
    source: &Matrix,
    labels: &[usize],
    dims: ModelDims,
    config: &AdaptConfig,
) -> Result<(AdaptModel, Vec<f64>)> {
    config.validate()?;
    if source.rows() == 0 {
        return Err(Error::Empty("source set".into()));
    }
    if labels.len() != source.rows() {
        return Err(Error::DimensionMismatch {
            expected: source.rows(),
            got: labels.len(),
        });
    }
    if source.cols() != dims.d_in {
        return Err(Error::DimensionMismatch {
            expected: dims.d_in,
            got: source.cols(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= dims.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "source label {bad} out of range for {} classes",
            dims.num_classes
        )));
    }
    let mut rng = Rng::new(config.seed);
    let mut model = AdaptModel::new(dims, &mut rng.split())?;
    let mut opt = Optimizer::new(&dims, config.pretrain_lr, config.momentum)?;
    let targets: Vec<Vec<f64>> = labels
        .iter()
        .map(|&l| smoothed_target(dims.num_classes, l, config.alpha))
        .collect::<Result<_>>()?;
    let mut epoch_losses = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        let order = rng.permutation(source.rows());
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let records = model.forward_indices(source, batch)?;
            let upstream: Vec<OutputGrad> = records
                .iter()
                .zip(batch)
                .map(|(r, &i)| {
                    loss_sum += soft_cross_entropy(&r.probs, &targets[i]);
                    OutputGrad {
                        logits: soft_cross_entropy_grad(&r.probs, &targets[i]),
                        feature: vec![0.0; dims.d_feat],
                    }
                })
                .collect();
            let grads = model.backward(&records, &upstream)?;
            opt.step(&mut model, &grads);
        }
        let mean = loss_sum / source.rows() as f64;
        log::debug!("pretrain epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    model.freeze_classifier();
    Ok((model, epoch_losses))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchLosses {
    pub size: usize,
    pub total: f64,
    pub global: f64,
    pub local: f64,
    /// Already multiplied by the contrastive weight.
    pub contrastive: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted means over the epoch's batches.
    pub total: f64,
    pub global: f64,
    pub local: f64,
    pub contrastive: f64,
    pub ct: usize,
    pub seconds: f64,
    pub batches: Vec<BatchLosses>,
    /// Uniform (rejected) pseudo labels in this epoch's label matrix.
    pub uniform_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdaptTrace {
    pub epochs: Vec<EpochRecord>,
}

impl AdaptTrace {
    /// One tab-separated line per epoch: `epoch total glb loc con ct seconds`.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for e in &self.epochs {
            writeln!(
                s,
                "{}\t{:?}\t{:?}\t{:?}\t{:?}\t{}\t{:.3}",
                e.epoch, e.total, e.global, e.local, e.contrastive, e.ct, e.seconds
            )
            .unwrap();
        }
        s
    }

    /// Equality ignoring wall-clock time.
    pub fn same_losses(&self, other: &AdaptTrace) -> bool {
        self.epochs.len() == other.epochs.len()
            && self.epochs.iter().zip(&other.epochs).all(|(a, b)| {
                a.epoch == b.epoch
                    && a.ct == b.ct
                    && a.batches == b.batches
                    && a.total.to_bits() == b.total.to_bits()
                    && a.global.to_bits() == b.global.to_bits()
                    && a.local.to_bits() == b.local.to_bits()
                    && a.contrastive.to_bits() == b.contrastive.to_bits()
                    && a.uniform_labels == b.uniform_labels
            })
    }
}

/// Pseudo labels for the current model: fresh forward pass, prototypes,
/// one-vs-all assignment.
pub fn pseudo_labels_for(model: &AdaptModel, target: &Matrix, ct: usize, rho: f64, rng: &mut Rng) -> Result<PseudoLabelMatrix> {
    let records = model.forward_rows(target)?;
    let feats: Vec<&[f64]> = records.iter().map(|r| r.feature.as_slice()).collect();
    let probs: Vec<&[f64]> = records.iter().map(|r| r.probs.as_slice()).collect();
    let feats = l2_normalize_rows(&Matrix::from_rows(&feats)?)?;
    let probs = Matrix::from_rows(&probs)?;
    let k = topk_count(target.rows(), ct);
    let protos = build_all_prototypes(&feats, &probs, k, ct, rho, rng)?;
    Ok(assign_pseudo_labels(&feats, &protos))
}

/// Adapts the encoder of a pretrained model to the unlabeled `target` rows.
pub fn adapt(model: &AdaptModel, target: &Matrix, config: &AdaptConfig) -> Result<(AdaptModel, AdaptTrace)> {
    config.validate()?;
    if target.rows() == 0 {
        return Err(Error::Empty("target set".into()));
    }
    if target.cols() != model.dims.d_in {
        return Err(Error::DimensionMismatch {
            expected: model.dims.d_in,
            got: target.cols(),
        });
    }
    if !model.classifier_frozen {
        return Err(Error::InvalidArgument("adaptation needs a pretrained model with a frozen classifier".into()));
    }
    let n = target.rows();
    if config.k_neighbors >= n {
        return Err(Error::InvalidArgument(format!(
            "k = {} neighbors needs more than {n} target samples",
            config.k_neighbors
        )));
    }
    let mut model = model.clone();
    let mut trace = AdaptTrace::default();
    if config.epochs == 0 {
        return Ok((model, trace));
    }
    let dims = model.dims;
    let eta = config.eta;
    let weight = config.effective_contrastive_weight();
    let mut rng = Rng::new(config.seed);

    let initial = model.forward_rows(target)?;
    let init_feats: Vec<&[f64]> = initial.iter().map(|r| r.feature.as_slice()).collect();
    let ct = estimate_ct(&Matrix::from_rows(&init_feats)?, dims.num_classes, &mut rng.split())?.chosen;
    log::info!("estimated target class count: {ct}");
    let mut bank = MemoryBank::from_records(&initial)?;
    let mut opt = Optimizer::new(&dims, config.lr, config.momentum)?;
    let mut labels = None;

    for epoch in 0..config.epochs {
        let started = Instant::now();
        let mut label_rng = rng.split();
        if epoch % config.label_refresh_epochs == 0 {
            labels = Some(pseudo_labels_for(&model, target, ct, config.rho, &mut label_rng)?);
        }
        let labels = labels.as_ref().expect("labels built in epoch 0");
        if !config.bank_step_refresh {
            let version = bank.version;
            bank = MemoryBank::from_records(&model.forward_rows(target)?)?;
            bank.version = version + 1;
        }
        let order = rng.permutation(n);
        let mut batches = Vec::with_capacity(n.div_ceil(config.batch_size));
        for batch in order.chunks(config.batch_size) {
            let records = model.forward_indices(target, batch)?;
            let probs: Vec<&[f64]> = records.iter().map(|r| r.probs.as_slice()).collect();
            let feats: Vec<&[f64]> = records.iter().map(|r| r.feature.as_slice()).collect();

            let pseudo: Vec<Vec<f64>> = batch.iter().map(|&i| labels.row(i)).collect();
            let (glb, g_glb) = loss_global(&probs, &pseudo);
            let local = local_targets(&bank, &feats, config.k_neighbors, batch)?;
            let (loc, g_loc) = loss_local(&probs, &local.targets);

            let mut upstream: Vec<OutputGrad> = g_glb
                .iter()
                .zip(&g_loc)
                .map(|(gg, gl)| OutputGrad {
                    logits: gg.iter().zip(gl).map(|(a, b)| eta * a + b).collect(),
                    feature: vec![0.0; dims.d_feat],
                })
                .collect();
            let mut con = 0.0;
            if weight > 0.0 && batch.len() > config.n_pairs {
                let pairs = mine_pairs(&bank, &feats, batch, config.n_pairs, ct)?;
                let (value, g_con) = loss_contrastive(&feats, &pairs, &bank, &feats)?;
                con = weight * value;
                for (up, g) in upstream.iter_mut().zip(g_con) {
                    up.feature = g.into_iter().map(|v| weight * v).collect();
                }
            }
            let total = eta * glb + loc + con;
            let grads = model.backward(&records, &upstream)?;
            opt.step(&mut model, &grads);
            if config.bank_step_refresh {
                bank.update(batch, &model.forward_indices(target, batch)?)?;
            }
            batches.push(BatchLosses {
                size: batch.len(),
                total,
                global: glb,
                local: loc,
                contrastive: con,
            });
        }
        let mean = |f: fn(&BatchLosses) -> f64| batches.iter().map(|b| f(b) * b.size as f64).sum::<f64>() / n as f64;
        let record = EpochRecord {
            epoch,
            total: mean(|b| b.total),
            global: mean(|b| b.global),
            local: mean(|b| b.local),
            contrastive: mean(|b| b.contrastive),
            ct,
            seconds: started.elapsed().as_secs_f64(),
            uniform_labels: labels
                .labels()
                .iter()
                .filter(|l| matches!(l, crate::pseudolabel::PseudoLabel::Uniform))
                .count(),
            batches,
        };
        log::info!(
            "epoch {epoch}: total {:.5} glb {:.5} loc {:.5} con {:.5} uniform {}",
            record.total,
            record.global,
            record.local,
            record.contrastive,
            record.uniform_labels
        );
        trace.epochs.push(record);
    }
    Ok((model, trace))
}
