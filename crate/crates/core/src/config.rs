//! Run configuration, validation and canonical hashing.

use crate::bloch::{Backend, Mode, PeriodicModel};
use crate::error::{invalid, Result};
use crate::geometry::{FieldMode, MagneticFieldSpec};
use crate::supercell::TorusFlux;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Sorts object keys recursively so the hash ignores key order.
fn canonical(v: serde_json::Value) -> serde_json::Value {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<_> = map.into_iter().collect();
            keys.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(keys.into_iter().map(|(k, v)| (k, canonical(v))).collect())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(canonical).collect()),
        other => other,
    }
}

/// SHA-256 of the key-sorted compact JSON form.
pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).unwrap_or(serde_json::Value::Null);
    let text = serde_json::to_string(&canonical(v)).unwrap_or_default();
    format!("{:x}", Sha256::digest(text.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelBlock {
    #[serde(default)]
    pub potential: Vec<Mode>,
    #[serde(default)]
    pub background_field: Vec<Mode>,
    pub backend: Backend,
    /// Brillouin grid size, also the supercell side in cells
    pub m: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyBlock {
    pub k0: usize,
    #[serde(default)]
    pub n: usize,
    /// defaults to d0/8
    #[serde(default)]
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameBlock {
    /// defaults to the family size; extra vectors are seeded random trials
    #[serde(default)]
    pub n_b: Option<usize>,
    #[serde(default)]
    pub trials_seed: u64,
    /// Wannier window radius; the full period cell when absent
    #[serde(default)]
    pub l: Option<usize>,
    /// hopping radius; chosen at the 1e-10 tail when absent
    #[serde(default)]
    pub radius: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldBlock {
    #[serde(default)]
    pub epsilons: Vec<f64>,
    pub b: f64,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub modes: Vec<FieldMode>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ButterflyModel {
    /// hopping sequence of the configured band family
    Bands,
    /// unit nearest-neighbour hopping
    Harper,
}

fn default_times() -> Vec<f64> {
    vec![0.0, 0.5, 1.0, 2.0, 5.0, 10.0]
}

fn default_flux_points() -> usize {
    32
}

fn default_butterfly_l() -> usize {
    16
}

fn default_grid() -> usize {
    64
}

fn default_butterfly_model() -> ButterflyModel {
    ButterflyModel::Bands
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunBlock {
    #[serde(default)]
    pub commands: Vec<String>,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub cache_dir: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_times")]
    pub times: Vec<f64>,
    #[serde(default = "default_flux_points")]
    pub flux_points: usize,
    #[serde(default = "default_butterfly_l")]
    pub butterfly_l: usize,
    #[serde(default = "default_butterfly_model")]
    pub butterfly_model: ButterflyModel,
    /// grid points for the resolvent scan over the window
    #[serde(default = "default_grid")]
    pub invertibility_grid: usize,
}

impl Default for RunBlock {
    fn default() -> Self {
        RunBlock {
            commands: Vec::new(),
            out_dir: None,
            workers: None,
            cache_dir: None,
            seed: 0,
            times: default_times(),
            flux_points: default_flux_points(),
            butterfly_l: default_butterfly_l(),
            butterfly_model: default_butterfly_model(),
            invertibility_grid: default_grid(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelBlock,
    pub family: FamilyBlock,
    #[serde(default = "default_frame")]
    pub frame: FrameBlock,
    pub field: FieldBlock,
    #[serde(default)]
    pub run: RunBlock,
}

fn default_frame() -> FrameBlock {
    FrameBlock {
        n_b: None,
        trials_seed: 0,
        l: None,
        radius: None,
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// The periodic model before the energy normalization.
    pub fn periodic_model(&self) -> PeriodicModel {
        PeriodicModel {
            potential: self.model.potential.clone(),
            background_field: self.model.background_field.clone(),
            backend: self.model.backend.clone(),
            energy_shift: 0.0,
        }
    }

    pub fn field_spec(&self, epsilon: f64) -> MagneticFieldSpec {
        MagneticFieldSpec {
            epsilon,
            constant_b: self.field.b,
            fluctuation_c: self.field.c,
            modes: self.field.modes.clone(),
        }
    }

    pub fn n_bands(&self) -> usize {
        self.family.k0 + self.family.n + 1
    }

    pub fn is_grid(&self) -> bool {
        matches!(self.model.backend, Backend::Grid { .. })
    }

    /// Every cross-module precondition that can be checked without computing.
    pub fn validate(&self) -> Result<()> {
        let model = self.periodic_model();
        model.validate()?;
        let m = self.model.m;
        if m < 2 || m % 2 != 0 {
            return invalid(format!("model.m = {m} must be even and ≥ 2"));
        }
        if self.family.k0 == 0 {
            return invalid("family.k0 is 1-based and must be ≥ 1");
        }
        if self.n_bands() > model.fiber_dim() {
            return invalid(format!(
                "family k0={} N={} needs {} bands but the fiber has dimension {}",
                self.family.k0,
                self.family.n,
                self.n_bands(),
                model.fiber_dim()
            ));
        }
        if let Some(d) = self.family.delta {
            if !(d > 0.0 && d.is_finite()) {
                return invalid(format!("family.delta = {d} must be positive"));
            }
        }
        if let Some(nb) = self.frame.n_b {
            if nb < self.family.n + 1 {
                return invalid(format!("frame.n_b = {nb} is below the family size {}", self.family.n + 1));
            }
        }
        if let Some(l) = self.frame.l {
            if 2 * l + 1 > m {
                return invalid(format!("frame.l = {l} does not fit {m} cells"));
            }
        }
        if let Some(r) = self.frame.radius {
            if 2 * r + 1 > m {
                return invalid(format!("frame.radius = {r} does not fit {m} cells"));
            }
        }
        for &eps in &self.field.epsilons {
            let spec = self.field_spec(eps);
            spec.validate()?;
            TorusFlux::new(eps * self.field.b, m)
                .map_err(|e| crate::Error::InvalidInput(format!("field at ε = {eps}: {e}")))?;
        }
        for md in &self.field.modes {
            for k in md.k {
                let km = k * m as f64;
                if (km - km.round()).abs() > 1e-9 {
                    return invalid(format!("fluctuation mode {:?} is not periodic on {m} cells", md.k));
                }
            }
        }
        if let Some(w) = self.run.workers {
            if w == 0 {
                return invalid("run.workers must be ≥ 1");
            }
        }
        if self.run.times.iter().any(|t| !t.is_finite()) {
            return invalid("run.times must be finite");
        }
        if self.run.flux_points == 0 {
            return invalid("run.flux_points must be ≥ 1");
        }
        if self.run.invertibility_grid < 2 {
            return invalid("run.invertibility_grid must be ≥ 2");
        }
        Ok(())
    }

    /// Hash of everything that determines the numbers (not output location,
    /// worker count, cache location or command list).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.commands.clear();
        c.run.out_dir = None;
        c.run.workers = None;
        c.run.cache_dir = None;
        canonical_hash(&c)
    }
}
