//! Line-oriented `key = value` run configuration.
//!
//! One file carries every scenario and adaptation setting plus file paths.
//! `#` starts a comment, blank lines are ignored, unknown keys are rejected.
//! A `preset` key, wherever it appears, is applied before all other keys.

use std::path::PathBuf;

use crate::adaptation::{AdaptConfig, Variant};
use crate::datagen::{Regime, ScenarioSpec};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub scenario: ScenarioSpec,
    pub adapt: AdaptConfig,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub ncd: Option<usize>,
}

pub const DEFAULT_PRESET: &str = "opda-toy";

pub const KEYS: &[&str] = &[
    "preset",
    "regime",
    "n_shared",
    "n_source_private",
    "n_target_private",
    "d_in",
    "source_per_class",
    "target_per_class",
    "separation",
    "shift_translation",
    "shift_angle",
    "noise_sigma",
    "seed",
    "eta",
    "rho",
    "k",
    "n_pairs",
    "batch_size",
    "epochs",
    "lr",
    "momentum",
    "variant",
    "omega",
    "alpha",
    "contrastive_weight",
    "d_hidden",
    "d_feat",
    "pretrain_epochs",
    "pretrain_lr",
    "label_refresh_epochs",
    "bank_step_refresh",
    "source",
    "target",
    "model",
    "out",
    "ncd",
];

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_preset(DEFAULT_PRESET).expect("default preset exists")
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::InvalidArgument(format!("`{key} = {value}`: {e}")))
}

impl RunConfig {
    pub fn from_preset(name: &str) -> Result<Self> {
        let scenario = ScenarioSpec::preset(name)?;
        let adapt = AdaptConfig {
            seed: scenario.seed,
            ..AdaptConfig::default()
        };
        Ok(Self {
            preset: name.to_string(),
            scenario,
            adapt,
            source: None,
            target: None,
            model: None,
            out: PathBuf::from("."),
            ncd: None,
        })
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: "expected `key = value`".into(),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("unknown key `{k}`"),
                });
            }
            pairs.push((i + 1, k.to_string(), v.to_string()));
        }
        let preset = pairs
            .iter()
            .rev()
            .find(|(_, k, _)| k == "preset")
            .map_or(DEFAULT_PRESET, |(_, _, v)| v.as_str());
        let mut cfg = Self::from_preset(preset)?;
        for (line, k, v) in &pairs {
            if k != "preset" {
                cfg.set(k, v).map_err(|e| Error::Parse {
                    line: *line,
                    msg: e.to_string(),
                })?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse_str(&std::fs::read_to_string(path)?)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.scenario;
        let a = &mut self.adapt;
        match key {
            "preset" => {
                let keep = (self.source.clone(), self.target.clone(), self.model.clone(), self.out.clone(), self.ncd);
                *self = Self::from_preset(value)?;
                (self.source, self.target, self.model, self.out, self.ncd) = keep;
            }
            "regime" => s.regime = value.parse::<Regime>()?,
            "n_shared" => s.n_shared = parse(key, value)?,
            "n_source_private" => s.n_source_private = parse(key, value)?,
            "n_target_private" => s.n_target_private = parse(key, value)?,
            "d_in" => s.d_in = parse(key, value)?,
            "source_per_class" => s.source_per_class = parse(key, value)?,
            "target_per_class" => s.target_per_class = parse(key, value)?,
            "separation" => s.separation = parse(key, value)?,
            "shift_translation" => s.shift_translation = parse(key, value)?,
            "shift_angle" => s.shift_angle = parse(key, value)?,
            "noise_sigma" => s.noise_sigma = parse(key, value)?,
            "seed" => {
                s.seed = parse(key, value)?;
                a.seed = s.seed;
            }
            "eta" => a.eta = parse(key, value)?,
            "rho" => a.rho = parse(key, value)?,
            "k" => a.k_neighbors = parse(key, value)?,
            "n_pairs" => a.n_pairs = parse(key, value)?,
            "batch_size" => a.batch_size = parse(key, value)?,
            "epochs" => a.epochs = parse(key, value)?,
            "lr" => a.lr = parse(key, value)?,
            "momentum" => a.momentum = parse(key, value)?,
            "variant" => a.variant = value.parse::<Variant>()?,
            "omega" => a.omega = parse(key, value)?,
            "alpha" => a.alpha = parse(key, value)?,
            "contrastive_weight" => a.contrastive_weight = parse(key, value)?,
            "d_hidden" => a.d_hidden = parse(key, value)?,
            "d_feat" => a.d_feat = parse(key, value)?,
            "pretrain_epochs" => a.pretrain_epochs = parse(key, value)?,
            "pretrain_lr" => a.pretrain_lr = parse(key, value)?,
            "label_refresh_epochs" => a.label_refresh_epochs = parse(key, value)?,
            "bank_step_refresh" => a.bank_step_refresh = parse(key, value)?,
            "source" => self.source = Some(PathBuf::from(value)),
            "target" => self.target = Some(PathBuf::from(value)),
            "model" => self.model = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "ncd" => self.ncd = Some(parse(key, value)?),
            other => return Err(Error::InvalidArgument(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in [`KEYS`] order.
    /// Unset paths are omitted.
    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let a = &self.adapt;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let entries: Vec<(&str, Option<String>)> = vec![
            ("preset", Some(self.preset.clone())),
            ("regime", Some(s.regime.to_string())),
            ("n_shared", Some(s.n_shared.to_string())),
            ("n_source_private", Some(s.n_source_private.to_string())),
            ("n_target_private", Some(s.n_target_private.to_string())),
            ("d_in", Some(s.d_in.to_string())),
            ("source_per_class", Some(s.source_per_class.to_string())),
            ("target_per_class", Some(s.target_per_class.to_string())),
            ("separation", Some(format!("{:?}", s.separation))),
            ("shift_translation", Some(format!("{:?}", s.shift_translation))),
            ("shift_angle", Some(format!("{:?}", s.shift_angle))),
            ("noise_sigma", Some(format!("{:?}", s.noise_sigma))),
            ("seed", Some(s.seed.to_string())),
            ("eta", Some(format!("{:?}", a.eta))),
            ("rho", Some(format!("{:?}", a.rho))),
            ("k", Some(a.k_neighbors.to_string())),
            ("n_pairs", Some(a.n_pairs.to_string())),
            ("batch_size", Some(a.batch_size.to_string())),
            ("epochs", Some(a.epochs.to_string())),
            ("lr", Some(format!("{:?}", a.lr))),
            ("momentum", Some(format!("{:?}", a.momentum))),
            ("variant", Some(a.variant.to_string())),
            ("omega", Some(format!("{:?}", a.omega))),
            ("alpha", Some(format!("{:?}", a.alpha))),
            ("contrastive_weight", Some(format!("{:?}", a.contrastive_weight))),
            ("d_hidden", Some(a.d_hidden.to_string())),
            ("d_feat", Some(a.d_feat.to_string())),
            ("pretrain_epochs", Some(a.pretrain_epochs.to_string())),
            ("pretrain_lr", Some(format!("{:?}", a.pretrain_lr))),
            ("label_refresh_epochs", Some(a.label_refresh_epochs.to_string())),
            ("bank_step_refresh", Some(a.bank_step_refresh.to_string())),
            ("source", path(&self.source)),
            ("target", path(&self.target)),
            ("model", path(&self.model)),
            ("out", Some(self.out.display().to_string())),
            ("ncd", self.ncd.map(|n| n.to_string())),
        ];
        let mut out = String::new();
        for (k, v) in entries {
            if let Some(v) = v {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
