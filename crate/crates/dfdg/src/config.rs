//! Experiment configuration: a versioned, nested key-value text file (TOML).
//! Unknown keys anywhere in the file are errors, so typos fail loudly
//! instead of silently running a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetName;
use crate::error::{DfdgError, Result};
use crate::losses::{BetaWeights, GateVariant, KlOrder};
use crate::models::{MergeOp, ModelFamily, ModelSpec};
use crate::seeds::RNG_FAMILY;
use crate::server::{AdamBiasMode, Mode, ServerRunConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetName,
    /// Directory holding on-disk datasets; unused by the procedural set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Truncate the training split to its first n examples.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    pub num_clients: usize,
    /// Dirichlet concentration for the label-skew partition.
    pub omega: f64,
    /// Exponent cap in the width-budget schedule.
    #[serde(default)]
    pub sigma: u32,
    /// Decay rate in the width-budget schedule; zero keeps every client full
    /// width.
    #[serde(default)]
    pub rho: u32,
    pub mode: Mode,
    pub seeds: Vec<u64>,
    pub rng_family: String,
    pub model: ModelSection,
    pub client: ClientSection,
    pub server: ServerSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// cnn4_bn, resnet18, resnet20, resnet34, or mlp2.
    pub family: String,
    /// First-block width for cnn4_bn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_width: Option<usize>,
    /// Hidden width for mlp2.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden: Option<usize>,
}

impl ModelSection {
    pub fn family(&self) -> Result<ModelFamily> {
        Ok(match self.family.as_str() {
            "cnn4_bn" => ModelFamily::Cnn4Bn { base_width: self.base_width.unwrap_or(64) },
            "resnet18" => ModelFamily::Resnet18,
            "resnet20" => ModelFamily::Resnet20,
            "resnet34" => ModelFamily::Resnet34,
            "mlp2" => ModelFamily::Mlp2 { hidden: self.hidden.unwrap_or(64) },
            other => return Err(DfdgError::Config(format!("unknown model family `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub outer_iters: usize,
    pub gen_inner_iters: usize,
    pub distill_inner_iters: usize,
    pub eta_g: f64,
    pub adam_b1: f64,
    pub adam_b2: f64,
    pub eta_d: f64,
    pub batch_size: usize,
    pub beta_tran: f64,
    pub beta_div: f64,
    pub beta_cd: f64,
    pub variant: GateVariant,
    pub eval_every: usize,
    pub adam_bias_mode: AdamBiasMode,
    pub resample_per_inner_step: bool,
    pub kl_order: KlOrder,
    pub noise_dim: usize,
    pub merge: MergeOp,
    pub gen_base_width: usize,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(DfdgError::Config(m));
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return cfg(format!(
                "schema_version {} unsupported (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.rng_family != RNG_FAMILY {
            return cfg(format!("rng_family `{}` unsupported (expected `{RNG_FAMILY}`)", self.rng_family));
        }
        if self.num_clients == 0 || self.num_clients > 10_000 {
            return cfg(format!("num_clients {} out of range", self.num_clients));
        }
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return cfg(format!("omega {} must be positive", self.omega));
        }
        if self.seeds.is_empty() {
            return cfg("at least one seed is required".into());
        }
        if self.client.batch_size == 0 || self.server.batch_size == 0 {
            return cfg("batch sizes must be positive".into());
        }
        if self.server.eval_every == 0 {
            return cfg("eval_every must be positive".into());
        }
        if self.server.noise_dim == 0 {
            return cfg("noise_dim must be positive".into());
        }
        for (name, v) in [
            ("client.learning_rate", self.client.learning_rate),
            ("server.eta_g", self.server.eta_g),
            ("server.eta_d", self.server.eta_d),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return cfg(format!("{name} {v} must be positive"));
            }
        }
        for (name, v) in [("server.adam_b1", self.server.adam_b1), ("server.adam_b2", self.server.adam_b2)] {
            if !(0.0..1.0).contains(&v) {
                return cfg(format!("{name} {v} outside [0, 1)"));
            }
        }
        self.model_spec()?.validate()?;
        Ok(())
    }

    /// The full-width global model implied by dataset and model section.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        Ok(ModelSpec::new(
            self.model.family()?,
            self.dataset.num_classes(),
            self.dataset.image_shape(),
        ))
    }

    pub fn client_config(&self) -> crate::client::ClientConfig {
        crate::client::ClientConfig {
            local_epochs: self.client.local_epochs,
            learning_rate: self.client.learning_rate,
            batch_size: self.client.batch_size,
        }
    }

    /// Server loop configuration for a given mode (the configured one by
    /// default; comparisons swap modes while keeping everything else fixed).
    pub fn server_config(&self, mode: Mode) -> ServerRunConfig {
        let s = &self.server;
        ServerRunConfig {
            mode,
            outer_iters: s.outer_iters,
            gen_inner_iters: s.gen_inner_iters,
            distill_inner_iters: s.distill_inner_iters,
            eta_g: s.eta_g,
            adam_b1: s.adam_b1,
            adam_b2: s.adam_b2,
            eta_d: s.eta_d,
            batch_size: s.batch_size,
            betas: BetaWeights { tran: s.beta_tran, div: s.beta_div, cd: s.beta_cd },
            gate: s.variant,
            eval_every: s.eval_every,
            adam_bias_mode: s.adam_bias_mode,
            resample_per_inner_step: s.resample_per_inner_step,
            kl_order: s.kl_order,
            noise_dim: s.noise_dim,
            merge: s.merge,
            gen_base_width: s.gen_base_width,
        }
    }
}

/// Per-dataset defaults: batch sizes, inner iterations, the noise dimension,
/// and the model family scale with the dataset, everything else matches the
/// standard recipe. The procedural set gets a deliberately small profile.
pub fn defaults_for(dataset: DatasetName) -> ExperimentConfig {
    use DatasetName::*;
    let (outer_iters, local_epochs, noise_dim) = match dataset {
        SynthToy => (100, 20, 32),
        Fmnist => (500, 50, 100),
        Cifar10 | Svhn | Cinic10 => (800, 100, 200),
        Cifar100 => (800, 200, 200),
        TinyImagenet | Food101 => (800, 400, 400),
    };
    let model = match dataset {
        SynthToy => ModelSection { family: "cnn4_bn".into(), base_width: Some(4), hidden: None },
        Fmnist => ModelSection { family: "cnn4_bn".into(), base_width: Some(64), hidden: None },
        Cifar10 | Svhn | Cinic10 => ModelSection { family: "resnet18".into(), base_width: None, hidden: None },
        Cifar100 => ModelSection { family: "resnet20".into(), base_width: None, hidden: None },
        TinyImagenet | Food101 => ModelSection { family: "resnet34".into(), base_width: None, hidden: None },
    };
    let (client_batch, server_batch, gen_base_width, client_lr) = match dataset {
        SynthToy => (32, 32, 16, 0.05),
        _ => (64, 64, 64, 0.01),
    };
    ExperimentConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        dataset,
        data_root: None,
        output_dir: PathBuf::from("runs"),
        train_subset: None,
        test_subset: None,
        num_clients: 10,
        omega: 0.5,
        sigma: 0,
        rho: 0,
        mode: Mode::Dfdg,
        seeds: vec![0, 1, 2],
        rng_family: RNG_FAMILY.into(),
        model,
        client: ClientSection { local_epochs, learning_rate: client_lr, batch_size: client_batch },
        server: ServerSection {
            outer_iters,
            gen_inner_iters: 20,
            distill_inner_iters: 2,
            eta_g: 2e-4,
            adam_b1: 0.5,
            adam_b2: 0.999,
            eta_d: 0.01,
            batch_size: server_batch,
            beta_tran: 1.0,
            beta_div: 1.0,
            beta_cd: 1.0,
            variant: GateVariant::Diamond,
            eval_every: 5,
            adam_bias_mode: AdamBiasMode::Literal,
            resample_per_inner_step: false,
            kl_order: KlOrder::AsWritten,
            noise_dim,
            merge: MergeOp::Mul,
            gen_base_width,
        },
    }
}

/// Parse and validate a configuration document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| DfdgError::Config(format!("config parse: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn format_config(cfg: &ExperimentConfig) -> String {
    toml::to_string_pretty(cfg).expect("config serializes")
}

pub fn read_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| DfdgError::io(path, e))?;
    parse_config(&text)
}

pub fn write_config(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    std::fs::write(path, format_config(cfg)).map_err(|e| DfdgError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        for dataset in [DatasetName::SynthToy, DatasetName::Fmnist, DatasetName::Cifar100] {
            let cfg = defaults_for(dataset);
            cfg.validate().unwrap();
            let text = format_config(&cfg);
            let back = parse_config(&text).unwrap();
            assert_eq!(cfg, back);
            assert_eq!(format_config(&back), text);
        }
    }

    #[test]
    fn unknown_keys_are_rejected_everywhere() {
        let base = format_config(&defaults_for(DatasetName::SynthToy));
        let top = format!("typo_key = 3\n{base}");
        assert!(parse_config(&top).is_err());
        let nested = base.replace("[server]", "[server]\nmystery = true");
        assert!(parse_config(&nested).is_err());
    }

    #[test]
    fn version_and_rng_family_are_enforced()  {
        let base = format_config(&defaults_for(DatasetName::SynthToy));
        let wrong_version = base.replace("schema_version = 1", "schema_version = 99");
        assert!(parse_config(&wrong_version).is_err());
        let wrong_rng = base.replace("rng_family = \"chacha12\"", "rng_family = \"mt19937\"");
        assert!(parse_config(&wrong_rng).is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let cfg = defaults_for(DatasetName::SynthToy);
        let mut zero_clients = cfg.clone();
        zero_clients.num_clients = 0;
        assert!(zero_clients.validate().is_err());
        let mut bad_omega = cfg.clone();
        bad_omega.omega = -1.0;
        assert!(bad_omega.validate().is_err());
        let mut no_seeds = cfg.clone();
        no_seeds.seeds.clear();
        assert!(no_seeds.validate().is_err());
        let mut bad_b1 = cfg;
        bad_b1.server.adam_b1 = 1.5;
        assert!(bad_b1.validate().is_err());
    }

    #[test]
    fn model_section_resolves_families() {
        let cfg = defaults_for(DatasetName::SynthToy);
        assert_eq!(cfg.model.family().unwrap(), ModelFamily::Cnn4Bn { base_width: 4 });
        let spec = cfg.model_spec().unwrap();
        assert_eq!(spec.num_classes, 10);
        assert_eq!(spec.input_shape, (1, 16, 16));
        let bad = ModelSection { family: "vgg".into(), base_width: None, hidden: None };
        assert!(bad.family().is_err());
    }

    #[test]
    fn server_config_carries_the_requested_mode() {
        let cfg = defaults_for(DatasetName::SynthToy);
        let sc = cfg.server_config(Mode::Dfad);
        assert_eq!(sc.mode, Mode::Dfad);
        assert_eq!(sc.betas, BetaWeights { tran: 1.0, div: 1.0, cd: 1.0 });
        assert_eq!(sc.gate, GateVariant::Diamond);
    }
}
