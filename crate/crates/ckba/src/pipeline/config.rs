//! Experiment configuration.
//!
//! Configs are strict JSON (unknown keys are rejected) and hashed by
//! re-serializing the parsed struct with sorted keys, so the hash is stable
//! under key reordering and whitespace changes in the input file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ba::BaVariant;
use crate::darcy::{BvpSpec, EdgeCondition, GridGeometry};
use crate::error::{Error, Result};
use crate::gp::{KernelFamily, KernelSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeBc {
    pub condition: EdgeCondition,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BvpConfig {
    pub left: EdgeBc,
    pub right: EdgeBc,
    pub bottom: EdgeBc,
    pub top: EdgeBc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub family: KernelFamily,
    #[serde(default = "default_variance")]
    pub variance: f64,
    /// Defaults to 0.2 x domain diagonal when omitted.
    #[serde(default)]
    pub lengthscale: Option<f64>,
    /// Constant prior mean of the log-transmissivity field.
    #[serde(default)]
    pub mean: f64,
}

fn default_variance() -> f64 {
    1.0
}

/// The three surrogate models of the experiment tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VariantSpec {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2x1d")]
    TwoX1d,
    #[serde(rename = "2d")]
    TwoD,
}

impl VariantSpec {
    pub fn label(&self) -> &'static str {
        match self {
            VariantSpec::OneD => "1d",
            VariantSpec::TwoX1d => "2x1d",
            VariantSpec::TwoD => "2d",
        }
    }

    /// Latent dimension and regression kind.
    pub fn shape(&self) -> (usize, BaVariant) {
        match self {
            VariantSpec::OneD => (1, BaVariant::Kx1d),
            VariantSpec::TwoX1d => (2, BaVariant::Kx1d),
            VariantSpec::TwoD => (2, BaVariant::Kd),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaConfig {
    pub variants: Vec<VariantSpec>,
    /// Total PCE degree p.
    pub degree: usize,
    /// Smolyak level L.
    pub level: usize,
    /// BPDN tolerance factor.
    pub tau: f64,
    #[serde(default = "default_true")]
    pub penalize_bias: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UqConfig {
    /// Number of diagnostic wells (k-center subset of the well layout).
    pub diagnostic_wells: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    pub gamma_conditional: f64,
    pub gamma_unconditional: f64,
    /// Misfit weights; these are believed noise scales and may differ from
    /// the synthetic measurement noise.
    pub sigma_u: f64,
    pub sigma_y: f64,
    /// Surrogate variants to invert with (BA-MAP).
    pub variants: Vec<VariantSpec>,
    pub grad_tol: f64,
    pub max_iters: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub grid: GridConfig,
    pub bvp: BvpConfig,
    pub kernel: KernelConfig,
    /// KLE/CKLE truncation.
    pub n_xi: usize,
    /// Direct-observation counts, one conditional basis per entry.
    pub n_y_list: Vec<usize>,
    /// Head observation wells.
    pub n_u: usize,
    pub q_train: usize,
    pub q_test: usize,
    /// Noise std of direct field measurements (also the Kriging noise).
    pub sigma_y: f64,
    /// Noise std of head measurements.
    pub sigma_u: f64,
    /// Larger N_y site sets contain the smaller ones.
    #[serde(default = "default_true")]
    pub nested_observations: bool,
    pub ba: BaConfig,
    pub uq: UqConfig,
    pub inversion: InversionConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        config.validate()?;
        Ok(config)
    }

    /// Collects every validation failure instead of stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let n_cells = self.grid.nx * self.grid.ny;
        if self.grid.nx < 2 || self.grid.ny < 2 {
            problems.push(format!("grid must be at least 2x2, got {}x{}", self.grid.nx, self.grid.ny));
        }
        if !(self.grid.lx > 0.0) || !(self.grid.ly > 0.0) {
            problems.push("domain lengths must be positive".into());
        }
        let conditions = [
            self.bvp.left.condition,
            self.bvp.right.condition,
            self.bvp.bottom.condition,
            self.bvp.top.condition,
        ];
        if !conditions.contains(&EdgeCondition::Dirichlet) {
            problems.push("at least one boundary edge must be dirichlet".into());
        }
        if !(self.kernel.variance > 0.0) {
            problems.push("kernel variance must be positive".into());
        }
        if let Some(l) = self.kernel.lengthscale {
            if !(l > 0.0) {
                problems.push("kernel lengthscale must be positive".into());
            }
        }
        if self.n_xi == 0 || self.n_xi > n_cells {
            problems.push(format!("n_xi must be in [1, {n_cells}], got {}", self.n_xi));
        }
        if self.n_y_list.is_empty() {
            problems.push("n_y_list must not be empty".into());
        }
        for &n_y in &self.n_y_list {
            if n_y == 0 || n_y > n_cells {
                problems.push(format!("n_y {n_y} outside [1, {n_cells}]"));
            }
        }
        if self.n_u == 0 || self.n_u > n_cells {
            problems.push(format!("n_u must be in [1, {n_cells}], got {}", self.n_u));
        }
        if self.q_train < 2 || self.q_test < 2 {
            problems.push("q_train and q_test must be at least 2".into());
        }
        if self.sigma_y < 0.0 || self.sigma_u < 0.0 {
            problems.push("noise levels must be nonnegative".into());
        }
        if self.ba.variants.is_empty() {
            problems.push("ba.variants must not be empty".into());
        }
        if self.ba.degree == 0 {
            problems.push("ba.degree must be at least 1".into());
        }
        if self.ba.level == 0 {
            problems.push("ba.level must be at least 1".into());
        }
        if !(self.ba.tau >= 0.0 && self.ba.tau < 1.0) {
            problems.push(format!("ba.tau must lie in [0, 1), got {}", self.ba.tau));
        }
        if self.uq.diagnostic_wells == 0 || self.uq.diagnostic_wells > self.n_u {
            problems.push(format!(
                "uq.diagnostic_wells must be in [1, {}], got {}",
                self.n_u, self.uq.diagnostic_wells
            ));
        }
        if self.inversion.gamma_conditional < 0.0 || self.inversion.gamma_unconditional < 0.0 {
            problems.push("inversion gammas must be nonnegative".into());
        }
        if !(self.inversion.sigma_u > 0.0) || !(self.inversion.sigma_y > 0.0) {
            problems.push("inversion misfit weights sigma_u/sigma_y must be positive".into());
        }
        for v in &self.inversion.variants {
            if !self.ba.variants.contains(v) {
                problems.push(format!(
                    "inversion variant {} is not trained (missing from ba.variants)",
                    v.label()
                ));
            }
        }
        if !(self.inversion.grad_tol > 0.0) {
            problems.push("inversion.grad_tol must be positive".into());
        }
        if self.inversion.max_iters == 0 {
            problems.push("inversion.max_iters must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(problems.join("; ")))
        }
    }

    /// SHA-256 of the canonical (sorted-key) JSON serialization.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex_digest(canonical.as_bytes())
    }

    /// Hash of the grid subobject, stamped into basis artifacts.
    pub fn grid_hash(&self) -> String {
        let value = serde_json::to_value(&self.grid).expect("grid serializes");
        hex_digest(serde_json::to_string(&value).unwrap().as_bytes())
    }

    pub fn grid_geometry(&self) -> Result<GridGeometry> {
        GridGeometry::new(
            self.grid.nx,
            self.grid.ny,
            self.grid.lx,
            self.grid.ly,
            [
                self.bvp.left.condition,
                self.bvp.right.condition,
                self.bvp.bottom.condition,
                self.bvp.top.condition,
            ],
        )
    }

    pub fn bvp_spec(&self) -> Result<BvpSpec> {
        BvpSpec::new([
            self.bvp.left.value,
            self.bvp.right.value,
            self.bvp.bottom.value,
            self.bvp.top.value,
        ])
    }

    pub fn kernel_spec(&self) -> Result<KernelSpec> {
        let diagonal = (self.grid.lx * self.grid.lx + self.grid.ly * self.grid.ly).sqrt();
        let lengthscale = self.kernel.lengthscale.unwrap_or(0.2 * diagonal);
        KernelSpec::new(self.kernel.family, self.kernel.variance, lengthscale)
    }

    /// Desk-scale defaults: 32x32 unit square, left-to-right flow, Matern-5/2
    /// field, N_xi = 128, q = 1000.
    pub fn desk_default(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            grid: GridConfig {
                nx: 32,
                ny: 32,
                lx: 1.0,
                ly: 1.0,
            },
            bvp: BvpConfig {
                left: EdgeBc {
                    condition: EdgeCondition::Dirichlet,
                    value: 1.0,
                },
                right: EdgeBc {
                    condition: EdgeCondition::Dirichlet,
                    value: 0.0,
                },
                bottom: EdgeBc {
                    condition: EdgeCondition::Neumann,
                    value: 0.0,
                },
                top: EdgeBc {
                    condition: EdgeCondition::Neumann,
                    value: 0.0,
                },
            },
            kernel: KernelConfig {
                family: KernelFamily::Matern52,
                variance: 1.0,
                lengthscale: None,
                mean: 0.0,
            },
            n_xi: 128,
            n_y_list: vec![25, 50, 100, 200],
            n_u: 20,
            q_train: 1000,
            q_test: 1000,
            sigma_y: 1e-4,
            sigma_u: 1e-4,
            nested_observations: true,
            ba: BaConfig {
                variants: vec![VariantSpec::OneD, VariantSpec::TwoX1d, VariantSpec::TwoD],
                degree: 3,
                level: 5,
                tau: 0.01,
                penalize_bias: true,
            },
            uq: UqConfig {
                diagnostic_wells: 5,
            },
            inversion: InversionConfig {
                gamma_conditional: 1e-6,
                gamma_unconditional: 1e-1,
                sigma_u: 1e-3,
                sigma_y: 1e-3,
                variants: vec![VariantSpec::OneD, VariantSpec::TwoX1d],
                grad_tol: 1e-8,
                max_iters: 50_000,
            },
        }
    }
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Convenience for tagging conditional bases.
pub fn basis_tag(n_y: Option<usize>) -> String {
    match n_y {
        None => "uncond".to_string(),
        Some(n) => format!("cond-ny{n}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_under_key_reordering() {
        let config = ExperimentConfig::desk_default(7);
        let json = serde_json::to_string_pretty(&config).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        // rebuild the JSON with keys in a different textual order
        let mut scrambled = String::from("{");
        let obj = value.as_object().unwrap();
        let mut keys: Vec<&String> = obj.keys().collect();
        keys.reverse();
        for (i, k) in keys.iter().enumerate() {
            if i > 0 {
                scrambled.push(',');
            }
            scrambled.push_str(&format!(
                "{}:{}",
                serde_json::to_string(k).unwrap(),
                serde_json::to_string(&obj[*k]).unwrap()
            ));
        }
        scrambled.push('}');
        let reparsed: ExperimentConfig = serde_json::from_str(&scrambled).unwrap();
        assert_eq!(config.hash(), reparsed.hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut value = serde_json::to_value(ExperimentConfig::desk_default(1)).unwrap();
        value
            .as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        let text = serde_json::to_string(&value).unwrap();
        assert!(serde_json::from_str::<ExperimentConfig>(&text).is_err());
    }

    #[test]
    fn validation_lists_all_failures() {
        let mut config = ExperimentConfig::desk_default(1);
        config.n_xi = 0;
        config.n_u = 0;
        config.ba.tau = 2.0;
        let err = config.validate().unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_xi"), "{msg}");
        assert!(msg.contains("n_u"), "{msg}");
        assert!(msg.contains("tau"), "{msg}");
    }

    #[test]
    fn desk_default_is_valid() {
        assert!(ExperimentConfig::desk_default(0).validate().is_ok());
        let c = ExperimentConfig::desk_default(0);
        // spec'd lengthscale default: 0.2 x domain diagonal
        let k = c.kernel_spec().unwrap();
        approx::assert_relative_eq!(k.lengthscale, 0.2 * 2.0f64.sqrt(), epsilon = 1e-15);
    }
}
