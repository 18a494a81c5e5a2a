//! The `ufd` command line: `gen`, `pretrain`, `adapt`, `eval`, `report`.
//!
//! Every command resolves a [`RunConfig`] (preset defaults, then the
//! `--config` file, then flags) and writes it as `config.resolved` next to
//! its outputs. Human-readable tables go to stdout, machine output to files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::adaptation::{adapt, pretrain_source_logged, Variant};
use crate::config::RunConfig;
use crate::datagen::{generate, FeatureSet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, parse_tsv, EvalMode, REPORT_KEYS};
use crate::model::{AdaptModel, ModelDims};
use crate::numerics::Rng;

pub const RESOLVED_CONFIG: &str = "config.resolved";
pub const SOURCE_FILE: &str = "source.ufd";
pub const TARGET_FILE: &str = "target.ufd";
pub const PRETRAINED_MODEL: &str = "model.ufdm";
pub const PRETRAIN_LOG: &str = "pretrain.log";
pub const ADAPTED_MODEL: &str = "adapted.ufdm";
pub const TRACE_FILE: &str = "trace.tsv";
pub const REPORT_FILE: &str = "report.tsv";

#[derive(Debug, Parser)]
#[command(name = "ufd", version, about = "Source-free universal domain adaptation on feature vectors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic source/target pair.
    Gen {
        /// Scenario preset (opda-toy, osda-toy, pda-toy, clda-toy).
        #[arg(long)]
        preset: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a source model on a labeled feature file and freeze its classifier.
    Pretrain {
        #[arg(long)]
        source: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Adapt a pretrained model to an unlabeled target feature file.
    Adapt {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a model on a labeled target feature file.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        /// Score novel-category discovery with this many true private classes.
        #[arg(long)]
        ncd: Option<usize>,
        /// Report closed accuracy only (no H-score requirement).
        #[arg(long)]
        closed: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Aggregate eval reports into a mean ± std table.
    Report {
        /// `report.tsv` files or directories containing one.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Write the aggregate as `metric<TAB>mean<TAB>std<TAB>n` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args, Default)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub omega: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Adaptation epochs (`pretrain`: source training epochs).
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self, pretrain: bool, preset: Option<&str>) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(p) = preset {
            cfg.set("preset", p)?;
        }
        if let Some(s) = self.seed {
            cfg.set("seed", &s.to_string())?;
        }
        if let Some(v) = &self.variant {
            cfg.adapt.variant = v.parse::<Variant>()?;
        }
        if let Some(v) = self.omega {
            cfg.adapt.omega = v;
        }
        if let Some(v) = self.eta {
            cfg.adapt.eta = v;
        }
        if let Some(v) = self.rho {
            cfg.adapt.rho = v;
        }
        if let Some(v) = self.k {
            cfg.adapt.k_neighbors = v;
        }
        if let Some(v) = self.epochs {
            if pretrain {
                cfg.adapt.pretrain_epochs = v;
            } else {
                cfg.adapt.epochs = v;
            }
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

/// Exit status for an error: 2 for regime-rule violations, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Regime(_) => 2,
        _ => 1,
    }
}

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RESOLVED_CONFIG), cfg.to_text())?;
    Ok(cfg.out.clone())
}

fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::InvalidArgument(format!("missing --{what} (or `{what} = ...` in the config)")))
}

fn load_features(path: &Path) -> Result<FeatureSet> {
    FeatureSet::load(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("{}: {io}", path.display())),
        other => other,
    })
}

fn load_model(path: &Path) -> Result<AdaptModel> {
    AdaptModel::load(path).map_err(|e| match e {
        Error::Io(io) => Error::InvalidArgument(format!("{}: {io}", path.display())),
        other => other,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { preset, common } => {
            let cfg = common.resolve(false, preset.as_deref())?;
            let (source, target) = generate(&cfg.scenario)?;
            let out = prepare_out(&cfg)?;
            source.save(&out.join(SOURCE_FILE))?;
            target.save(&out.join(TARGET_FILE))?;
            println!(
                "{}: {} source / {} target samples, d = {}",
                cfg.preset,
                source.len(),
                target.len(),
                source.dim()
            );
        }
        Command::Pretrain { source, common } => {
            let mut cfg = common.resolve(true, None)?;
            if source.is_some() {
                cfg.source = source;
            }
            let path = required(&cfg.source, "source")?;
            let data = load_features(&path)?;
            let num_classes = data.labels.iter().copied().max().map_or(0, |m| m + 1);
            let dims = ModelDims {
                d_in: data.dim(),
                d_hidden: cfg.adapt.d_hidden,
                d_feat: cfg.adapt.d_feat,
                num_classes,
            };
            let (model, losses) = pretrain_source_logged(&data.features, &data.labels, dims, &cfg.adapt)?;
            let out = prepare_out(&cfg)?;
            model.save(&out.join(PRETRAINED_MODEL))?;
            let mut log = String::new();
            for (e, l) in losses.iter().enumerate() {
                writeln!(log, "{e}\t{l:?}").unwrap();
            }
            fs::write(out.join(PRETRAIN_LOG), log)?;
            println!(
                "pretrained {} classes for {} epochs; final loss {}",
                num_classes,
                losses.len(),
                losses.last().map_or_else(|| "n/a".into(), |l| format!("{l:.6}"))
            );
        }
        Command::Adapt { model, target, common } => {
            let mut cfg = common.resolve(false, None)?;
            if model.is_some() {
                cfg.model = model;
            }
            if target.is_some() {
                cfg.target = target;
            }
            let model = load_model(&required(&cfg.model, "model")?)?;
            let data = load_features(&required(&cfg.target, "target")?)?;
            if data.dim() != model.dims.d_in {
                return Err(Error::DimensionMismatch {
                    expected: model.dims.d_in,
                    got: data.dim(),
                });
            }
            let (adapted, trace) = adapt(&model, &data.features, &cfg.adapt)?;
            let out = prepare_out(&cfg)?;
            adapted.save(&out.join(ADAPTED_MODEL))?;
            fs::write(out.join(TRACE_FILE), trace.to_tsv())?;
            println!("{:>5} {:>12} {:>12} {:>12} {:>12} {:>4}", "epoch", "total", "glb", "loc", "con", "ct");
            for e in &trace.epochs {
                println!(
                    "{:>5} {:>12.6} {:>12.6} {:>12.6} {:>12.6} {:>4}",
                    e.epoch, e.total, e.global, e.local, e.contrastive, e.ct
                );
            }
        }
        Command::Eval {
            model,
            target,
            ncd,
            closed,
            common,
        } => {
            let mut cfg = common.resolve(false, None)?;
            if model.is_some() {
                cfg.model = model;
            }
            if target.is_some() {
                cfg.target = target;
            }
            if ncd.is_some() {
                cfg.ncd = ncd;
            }
            let model = load_model(&required(&cfg.model, "model")?)?;
            let data = load_features(&required(&cfg.target, "target")?)?;
            if data.dim() != model.dims.d_in {
                return Err(Error::DimensionMismatch {
                    expected: model.dims.d_in,
                    got: data.dim(),
                });
            }
            let mode = if closed { EvalMode::Closed } else { EvalMode::Open };
            let mut rng = Rng::new(cfg.adapt.seed);
            let report = evaluate(&model, &data.features, &data.labels, cfg.adapt.omega, mode, cfg.ncd, &mut rng)?;
            let out = prepare_out(&cfg)?;
            fs::write(out.join(REPORT_FILE), report.to_tsv())?;
            print!("{}", report.to_table());
        }
        Command::Report { inputs, out } => {
            let table = aggregate_reports(&inputs)?;
            print!("{}", table.to_table());
            if let Some(path) = out {
                if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                    fs::create_dir_all(parent)?;
                }
                fs::write(path, table.to_tsv())?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub metric: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub rows: Vec<AggregateRow>,
    pub runs: usize,
}

impl Aggregate {
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let f = |v: Option<f64>| v.map_or_else(|| "na".to_string(), |x| format!("{x:.6}"));
        for r in &self.rows {
            writeln!(s, "{}\t{}\t{}\t{}", r.metric, f(r.mean), f(r.std), r.count).unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{} runs", self.runs).unwrap();
        writeln!(s, "{:<22} {:>24}", "metric", "mean ± std").unwrap();
        writeln!(s, "{}", "-".repeat(47)).unwrap();
        for r in &self.rows {
            let v = match (r.mean, r.std) {
                (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4}"),
                _ => "na".to_string(),
            };
            writeln!(s, "{:<22} {:>24}", r.metric, v).unwrap();
        }
        s
    }
}

/// Mean and sample standard deviation (n - 1; 0 for a single run) of every
/// report metric across runs. Runs reporting `na` for a metric are skipped
/// for that metric.
pub fn aggregate_reports(inputs: &[PathBuf]) -> Result<Aggregate> {
    let mut parsed = Vec::with_capacity(inputs.len());
    for p in inputs {
        let file = if p.is_dir() { p.join(REPORT_FILE) } else { p.clone() };
        let text = fs::read_to_string(&file).map_err(|e| Error::InvalidArgument(format!("{}: {e}", file.display())))?;
        parsed.push(parse_tsv(&text)?);
    }
    let rows = REPORT_KEYS
        .iter()
        .map(|&key| {
            let vals: Vec<f64> = parsed
                .iter()
                .filter_map(|r| r.iter().find(|(k, _)| k == key).and_then(|(_, v)| *v))
                .collect();
            let n = vals.len();
            let mean = (n > 0).then(|| vals.iter().sum::<f64>() / n as f64);
            let std = mean.map(|m| {
                if n < 2 {
                    0.0
                } else {
                    (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64).sqrt()
                }
            });
            AggregateRow {
                metric: key.to_string(),
                mean,
                std,
                count: n,
            }
        })
        .collect();
    Ok(Aggregate {
        rows,
        runs: inputs.len(),
    })
}
