//! Synthetic universal-DA benchmarks and feature-file I/O.
//!
//! Each class is an isotropic Gaussian around a mean placed on a random
//! orthonormal frame, scaled by `separation`. The target domain sees the
//! same means moved by a rotation (Givens rotations in random coordinate
//! planes) and a translation. Global class ids are laid out as
//! `[shared | source-private | target-private]`, so source labels are exactly
//! `0..C_s` and any target label `>= C_s` is target-private.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::parse_f64s;
use crate::numerics::{dot, norm, Matrix, Rng};

pub const FEATURE_MAGIC: &str = "UFD v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Opda,
    Osda,
    Pda,
    Clda,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Opda => "opda",
            Regime::Osda => "osda",
            Regime::Pda => "pda",
            Regime::Clda => "clda",
        })
    }
}

impl FromStr for Regime {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "opda" => Ok(Regime::Opda),
            "osda" => Ok(Regime::Osda),
            "pda" => Ok(Regime::Pda),
            "clda" => Ok(Regime::Clda),
            other => Err(Error::InvalidArgument(format!("unknown regime `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Source,
    Target,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Source => "source",
            Role::Target => "target",
        })
    }
}

impl FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Role::Source),
            "target" => Ok(Role::Target),
            other => Err(Error::InvalidArgument(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub regime: Regime,
    pub n_shared: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
    pub d_in: usize,
    pub source_per_class: usize,
    pub target_per_class: usize,
    pub separation: f64,
    /// Length of the target-side translation.
    pub shift_translation: f64,
    /// Givens rotation angle in radians, applied in `d_in / 2` planes.
    pub shift_angle: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

pub const PRESETS: [&str; 4] = ["opda-toy", "osda-toy", "pda-toy", "clda-toy"];

impl ScenarioSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let (regime, shared, sp, tp) = match name {
            "opda-toy" => (Regime::Opda, 3, 3, 3),
            "osda-toy" => (Regime::Osda, 4, 0, 4),
            "pda-toy" => (Regime::Pda, 4, 4, 0),
            "clda-toy" => (Regime::Clda, 6, 0, 0),
            other => return Err(Error::InvalidArgument(format!("unknown preset `{other}`"))),
        };
        Ok(Self {
            regime,
            n_shared: shared,
            n_source_private: sp,
            n_target_private: tp,
            d_in: 16,
            source_per_class: 100,
            target_per_class: 100,
            separation: 3.0,
            shift_translation: 1.5,
            shift_angle: 0.5,
            noise_sigma: 1.0,
            seed: 2021,
        })
    }

    pub fn num_source_classes(&self) -> usize {
        self.n_shared + self.n_source_private
    }

    pub fn num_classes_total(&self) -> usize {
        self.n_shared + self.n_source_private + self.n_target_private
    }

    pub fn validate(&self) -> Result<()> {
        let rule = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Regime(msg.into())) };
        rule(self.n_shared >= 1, "every regime needs at least one shared class")?;
        match self.regime {
            Regime::Opda => rule(
                self.n_source_private > 0 && self.n_target_private > 0,
                "OPDA needs both source-private and target-private classes",
            )?,
            Regime::Osda => rule(
                self.n_source_private == 0 && self.n_target_private > 0,
                "OSDA needs no source-private and some target-private classes",
            )?,
            Regime::Pda => rule(
                self.n_target_private == 0 && self.n_source_private > 0,
                "PDA needs no target-private and some source-private classes",
            )?,
            Regime::Clda => rule(
                self.n_source_private == 0 && self.n_target_private == 0,
                "CLDA needs identical label sets",
            )?,
        }
        if self.num_source_classes() < 2 {
            return Err(Error::Regime("the source side needs at least 2 classes".into()));
        }
        if self.d_in == 0 || self.source_per_class == 0 || self.target_per_class == 0 {
            return Err(Error::InvalidArgument("d_in and per-class counts must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.separation.is_finite() && self.shift_angle.is_finite() && self.shift_translation.is_finite()) {
            return Err(Error::InvalidArgument("scenario scalars must be finite, noise non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Matrix,
    /// Global class ids; on the target side only evaluation reads them.
    pub labels: Vec<usize>,
    pub role: Role,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn label_set(&self) -> Vec<usize> {
        let mut l = self.labels.clone();
        l.sort_unstable();
        l.dedup();
        l
    }

    pub fn to_text(&self) -> String {
        let mut s = String::with_capacity(self.len() * self.dim() * 20);
        s.push_str(FEATURE_MAGIC);
        s.push('\n');
        s.push_str(&format!("n={} d={} role={}\n", self.len(), self.dim(), self.role));
        for (i, &label) in self.labels.iter().enumerate() {
            s.push_str(&label.to_string());
            for v in self.features.row(i) {
                s.push(' ');
                s.push_str(&format!("{v:?}"));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let perr = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        match lines.next() {
            None => return Err(perr(1, "empty file")),
            Some(l) if l.trim() != FEATURE_MAGIC => return Err(perr(1, "expected `UFD v1`")),
            _ => {}
        }
        let header = lines.next().ok_or_else(|| perr(2, "missing `n= d= role=` header"))?;
        let (mut n, mut d, mut role) = (None, None, None);
        for tok in header.split_whitespace() {
            match tok.split_once('=') {
                Some(("n", v)) => n = v.parse::<usize>().ok(),
                Some(("d", v)) => d = v.parse::<usize>().ok(),
                Some(("role", v)) => role = v.parse::<Role>().ok(),
                _ => return Err(perr(2, &format!("unexpected header token `{tok}`"))),
            }
        }
        let (Some(n), Some(d), Some(role)) = (n, d, role) else {
            return Err(perr(2, "header needs n=<N> d=<D> role=<source|target>"));
        };
        let mut labels = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        let mut body = 0;
        for (i, line) in lines.enumerate() {
            let ln = i + 3;
            if line.trim().is_empty() {
                continue;
            }
            body += 1;
            if body > n {
                return Err(perr(ln, &format!("more rows than the declared n={n}")));
            }
            let (label, rest) = line.trim().split_once(' ').unwrap_or((line.trim(), ""));
            let label: usize = label
                .parse()
                .map_err(|_| perr(ln, &format!("label `{label}` is not a non-negative integer")))?;
            let vals = parse_f64s(rest, ln)?;
            if vals.len() != d {
                return Err(perr(ln, &format!("expected {d} features, found {}", vals.len())));
            }
            labels.push(label);
            data.extend(vals);
        }
        if body != n {
            return Err(perr(body + 3, &format!("declared n={n} rows, found {body}")));
        }
        Ok(Self {
            features: Matrix::from_vec(n, d, data)?,
            labels,
            role,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Random orthonormal rows (Gram-Schmidt on Gaussian draws). When more
/// directions than dimensions are asked for, the extra ones are only unit
/// length.
fn random_frame(count: usize, dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(count);
    while frame.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if frame.len() < dim {
            for u in &frame {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, ui)| *x -= p * ui);
            }
        }
        let n = norm(&v);
        if n > 1e-8 {
            frame.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    frame
}

struct Shift {
    planes: Vec<(usize, usize)>,
    cos: f64,
    sin: f64,
    translation: Vec<f64>,
}

impl Shift {
    fn new(spec: &ScenarioSpec, rng: &mut Rng) -> Self {
        let axes = rng.permutation(spec.d_in);
        let planes = axes.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let dir = random_frame(1, spec.d_in, rng).remove(0);
        Self {
            planes,
            cos: spec.shift_angle.cos(),
            sin: spec.shift_angle.sin(),
            translation: dir.iter().map(|x| x * spec.shift_translation).collect(),
        }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for &(i, j) in &self.planes {
            let (a, b) = (out[i], out[j]);
            out[i] = self.cos * a - self.sin * b;
            out[j] = self.sin * a + self.cos * b;
        }
        out.iter_mut().zip(&self.translation).for_each(|(o, t)| *o += t);
        out
    }
}

/// Source and target sets for `spec`, deterministic per seed. Sample order
/// is shuffled within each set.
pub fn generate(spec: &ScenarioSpec) -> Result<(FeatureSet, FeatureSet)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let c_s = spec.num_source_classes();
    let total = spec.num_classes_total();
    let means: Vec<Vec<f64>> = random_frame(total, spec.d_in, &mut rng)
        .into_iter()
        .map(|u| u.into_iter().map(|x| x * spec.separation).collect())
        .collect();
    let shift = Shift::new(spec, &mut rng);

    let mut sample = |classes: &[usize], per_class: usize, shifted: bool, role: Role| {
        let mut rows = Vec::with_capacity(classes.len() * per_class);
        for &c in classes {
            let center = if shifted { shift.apply(&means[c]) } else { means[c].clone() };
            for _ in 0..per_class {
                let x: Vec<f64> = center.iter().map(|m| m + spec.noise_sigma * rng.normal()).collect();
                rows.push((c, x));
            }
        }
        rng.shuffle(&mut rows);
        let labels = rows.iter().map(|(c, _)| *c).collect();
        let feats: Vec<Vec<f64>> = rows.into_iter().map(|(_, x)| x).collect();
        Ok::<_, Error>(FeatureSet {
            features: Matrix::from_rows(&feats)?,
            labels,
            role,
        })
    };
    let source_classes: Vec<usize> = (0..c_s).collect();
    let target_classes: Vec<usize> = (0..spec.n_shared).chain(c_s..total).collect();
    let source = sample(&source_classes, spec.source_per_class, false, Role::Source)?;
    let target = sample(&target_classes, spec.target_per_class, true, Role::Target)?;
    Ok((source, target))
}
