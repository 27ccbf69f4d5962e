//! Declarative run configuration (TOML).
//!
//! Parsing is strict: any unknown key anywhere in the document is
//! rejected before any side effects.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use remapsr::datasets::{load_dir, synth_corpus, ImageRecord};
use remapsr::degradation::{default_sigma, DegradationSpec, Step};
use remapsr::error::Error;
use remapsr::models::{ModelConfig, Variant};
use remapsr::pipeline::{make_corpus, unknown_spec, Branch, Corpus, ExperimentConfig};
use remapsr::rng::mix_seed;
use remapsr::trainer::TrainConfig;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusToml,
    #[serde(default)]
    pub degradations: BTreeMap<String, DegradationToml>,
    #[serde(default)]
    pub models: BTreeMap<String, ModelToml>,
    #[serde(default)]
    pub training: TrainingToml,
    #[serde(default)]
    pub experiment: Option<ExperimentToml>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusToml {
    /// Directory of ground-truth PNGs...
    pub dir: Option<PathBuf>,
    /// ...or parameters for the procedural synthetic corpus.
    pub synth: Option<SynthToml>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.75
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthToml {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DegradationToml {
    pub steps: Vec<StepToml>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum StepToml {
    BicubicDown { scale: u32 },
    BicubicUp { scale: u32 },
    Blur { size: u32, sigma: Option<f64> },
    Noise { psnr_db: f64, seed: Option<u64> },
}

impl DegradationToml {
    pub fn to_spec(&self) -> Result<DegradationSpec> {
        let steps = self
            .steps
            .iter()
            .map(|s| match *s {
                StepToml::BicubicDown { scale } => Step::BicubicDown(scale),
                StepToml::BicubicUp { scale } => Step::BicubicUp(scale),
                StepToml::Blur { size, sigma } => Step::Blur {
                    size,
                    sigma: sigma.unwrap_or_else(|| default_sigma(size as usize)),
                },
                StepToml::Noise { psnr_db, seed } => Step::Noise {
                    target_psnr_db: psnr_db,
                    seed: seed.unwrap_or(0),
                },
            })
            .collect();
        DegradationSpec::new(steps)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelToml {
    #[serde(default = "default_variant")]
    pub variant: String,
    #[serde(default = "default_groups")]
    pub n_groups: usize,
    #[serde(default = "default_blocks")]
    pub n_blocks_per_group: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    pub scale: usize,
    #[serde(default)]
    pub residual_scale: Option<f64>,
}

fn default_variant() -> String {
    "rcan".into()
}
fn default_groups() -> usize {
    2
}
fn default_blocks() -> usize {
    2
}
fn default_channels() -> usize {
    16
}
fn default_reduction() -> usize {
    4
}

impl ModelToml {
    pub fn to_config(&self) -> Result<ModelConfig> {
        let variant = match self.variant.as_str() {
            "rcan" => Variant::Rcan,
            "edsr" => Variant::Edsr,
            other => {
                return Err(Error::Config(format!(
                    "unknown model variant '{other}' (expected rcan or edsr)"
                )))
            }
        };
        let cfg = ModelConfig {
            variant,
            n_groups: self.n_groups,
            n_blocks_per_group: self.n_blocks_per_group,
            channels: self.channels,
            reduction: self.reduction,
            scale: self.scale,
            in_channels: 3,
            kernel_size: 3,
            residual_scale: self.residual_scale,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingToml {
    pub batch_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub lr0: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub epsilon: Option<f64>,
    pub halve_every: Option<u64>,
    pub total_iters: Option<u64>,
    pub seed: Option<u64>,
    pub log_every: Option<u64>,
    pub augment_flips: Option<bool>,
}

impl TrainingToml {
    /// Desk defaults overridden by whatever the document sets.
    pub fn to_config(&self) -> Result<TrainConfig> {
        let total = self.total_iters.unwrap_or(600);
        let mut cfg = TrainConfig::desk(total);
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.patch_size {
            cfg.patch_size = v;
        }
        if let Some(v) = self.lr0 {
            cfg.lr0 = v;
        }
        if let Some(v) = self.beta1 {
            cfg.beta1 = v;
        }
        if let Some(v) = self.beta2 {
            cfg.beta2 = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.halve_every {
            cfg.halve_every = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.log_every {
            cfg.log_every = v;
        }
        if let Some(v) = self.augment_flips {
            cfg.augment_flips = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentToml {
    pub branches: Vec<String>,
    #[serde(default)]
    pub seed: u64,
    /// Named degradation to use as the hidden unknown; when absent, a
    /// seed-derived spec is generated.
    pub unknown: Option<String>,
    /// Named model config for every stage (desk default when absent).
    pub model: Option<String>,
    #[serde(default = "default_blur_to")]
    pub restore_blur_to: u32,
    #[serde(default = "default_noise_db")]
    pub restore_noise_db: f64,
    /// Optional second synthetic corpus with a different hidden spec;
    /// SR branches are re-evaluated on it (cross-domain rows).
    pub cross_corpus: Option<SynthToml>,
    pub out_dir: Option<PathBuf>,
}

fn default_blur_to() -> u32 {
    9
}
fn default_noise_db() -> f64 {
    40.0
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Resolve a named degradation; "identity" is always available.
    pub fn spec(&self, name: &str) -> Result<DegradationSpec> {
        if name == "identity" {
            return Ok(DegradationSpec::identity());
        }
        match self.degradations.get(name) {
            Some(d) => d.to_spec(),
            None => {
                let mut names: Vec<&str> = self.degradations.keys().map(|s| s.as_str()).collect();
                names.insert(0, "identity");
                Err(Error::Config(format!(
                    "no degradation named '{name}'; available: {}",
                    names.join(", ")
                )))
            }
        }
    }

    pub fn model(&self, name: &str) -> Result<ModelConfig> {
        match self.models.get(name) {
            Some(m) => m.to_config(),
            None => {
                let names: Vec<&str> = self.models.keys().map(|s| s.as_str()).collect();
                Err(Error::Config(format!(
                    "no model named '{name}'; available: {}",
                    names.join(", ")
                )))
            }
        }
    }

    /// Ground-truth records from the configured source.
    pub fn corpus_records(&self) -> Result<Vec<ImageRecord>> {
        match (&self.corpus.dir, &self.corpus.synth) {
            (Some(dir), None) => Ok(load_dir(dir, None)?.records),
            (None, Some(s)) => synth_corpus(s.n, s.size, s.seed),
            (Some(_), Some(_)) => Err(Error::Config(
                "corpus: set either dir or synth, not both".into(),
            )),
            (None, None) => Err(Error::Config("corpus: set dir or synth".into())),
        }
    }

    /// Assemble the experiment: corpus split, hidden spec, branch list.
    pub fn experiment(
        &self,
        seed_override: Option<u64>,
    ) -> Result<(ExperimentConfig, Corpus, Option<Corpus>)> {
        let exp = self
            .experiment
            .as_ref()
            .ok_or_else(|| Error::Config("config has no [experiment] section".into()))?;
        let seed = seed_override.unwrap_or(exp.seed);
        let branches = exp
            .branches
            .iter()
            .map(|s| Branch::parse(s))
            .collect::<Result<Vec<_>>>()?;
        if branches.is_empty() {
            return Err(Error::Config("experiment.branches is empty".into()));
        }
        let unknown = match &exp.unknown {
            Some(name) => self.spec(name)?,
            None => unknown_spec(4, seed),
        };
        let model = match &exp.model {
            Some(name) => self.model(name)?,
            None => ModelConfig::desk(1),
        };
        let corpus = make_corpus(
            "corpus-a",
            self.corpus_records()?,
            self.corpus.train_fraction,
            unknown,
        )?;
        let cross = match exp.cross_corpus {
            Some(s) => Some(make_corpus(
                "corpus-b",
                synth_corpus(s.n, s.size, s.seed)?,
                self.corpus.train_fraction,
                unknown_spec(4, mix_seed(s.seed, 0xC0FFEE)),
            )?),
            None => None,
        };
        let config = ExperimentConfig {
            branches,
            model,
            train: self.training.to_config()?.with_seed(seed),
            seed,
            restore_noise_db: exp.restore_noise_db,
            restore_blur_to: exp.restore_blur_to,
        };
        Ok((config, corpus, cross))
    }
}

/// Built-in experiment presets, sized for a single-core CPU.
pub fn preset(name: &str) -> Result<RunConfig> {
    let text = match name {
        "fig3-desk" => PRESET_FIG3_DESK,
        "table3-desk" => PRESET_TABLE3_DESK,
        other => {
            return Err(Error::Config(format!(
                "unknown preset '{other}'; available: fig3-desk, table3-desk"
            )))
        }
    };
    RunConfig::parse(text)
}

/// All six SR branches of the mapping diagram on a synthetic corpus.
pub const PRESET_FIG3_DESK: &str = r#"
[corpus]
synth = { n = 32, size = 64, seed = 11 }
train_fraction = 0.75

[training]
total_iters = 1400
halve_every = 500
patch_size = 16

[experiment]
seed = 22
branches = [
    "direct4",
    "mapping_same_offshelf2x2",
    "mapping_same_offshelf4",
    "mapping_same_specialized4",
    "mapping2x_offshelf2",
    "mapping2x_specialized2",
]
"#;

/// The four restoration conditions of the blur-mapping study.
pub const PRESET_TABLE3_DESK: &str = r#"
[corpus]
synth = { n = 32, size = 64, seed = 11 }
train_fraction = 0.75

[training]
total_iters = 800
patch_size = 24

[experiment]
seed = 21
branches = [
    "restore_mapped:7:9",
    "restore_direct:7",
    "restore_mapped_specialized:7:9",
    "restore_direct:9",
]
"#;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_resolve() {
        for name in ["fig3-desk", "table3-desk"] {
            let cfg = preset(name).unwrap();
            let (exp, corpus, cross) = cfg.experiment(None).unwrap();
            assert!(!exp.branches.is_empty());
            assert!(!corpus.train.is_empty() && !corpus.test.is_empty());
            assert!(cross.is_none());
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = r#"
[corpus]
synth = { n = 4, size = 64, seed = 1 }
surprise = true
"#;
        assert!(RunConfig::parse(text).is_err());

        let nested = r#"
[corpus]
synth = { n = 4, size = 64, seed = 1 }

[training]
learning_rate = 0.1
"#;
        assert!(RunConfig::parse(nested).is_err());
    }

    #[test]
    fn degradation_steps_resolve_with_defaults() {
        let text = r#"
[corpus]
synth = { n = 4, size = 64, seed = 1 }

[degradations.blurry]
steps = [
    { type = "blur", size = 9 },
    { type = "noise", psnr_db = 40.0, seed = 3 },
]

[degradations.lowres]
steps = [{ type = "bicubic_down", scale = 4 }]
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let spec = cfg.spec("blurry").unwrap();
        assert_eq!(spec.label(), "blur9+noise40");
        assert_eq!(cfg.spec("lowres").unwrap().net_scale(), (1, 4));
        assert_eq!(cfg.spec("identity").unwrap().label(), "identity");
        let err = cfg.spec("missing").unwrap_err().to_string();
        assert!(err.contains("blurry") && err.contains("lowres") && err.contains("identity"));
    }

    #[test]
    fn model_config_defaults_to_desk() {
        let text = r#"
[corpus]
synth = { n = 4, size = 64, seed = 1 }

[models.sr4]
scale = 4

[models.big]
variant = "edsr"
n_groups = 1
n_blocks_per_group = 8
channels = 64
reduction = 16
scale = 4
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let desk = cfg.model("sr4").unwrap();
        assert_eq!((desk.n_groups, desk.channels, desk.scale), (2, 16, 4));
        let big = cfg.model("big").unwrap();
        assert_eq!(big.variant, Variant::Edsr);
        assert_eq!(big.total_blocks(), 8);
    }

    #[test]
    fn training_overrides_apply() {
        let text = r#"
[corpus]
synth = { n = 4, size = 64, seed = 1 }

[training]
total_iters = 100
batch_size = 2
lr0 = 1e-4
"#;
        let cfg = RunConfig::parse(text).unwrap();
        let t = cfg.training.to_config().unwrap();
        assert_eq!((t.total_iters, t.batch_size, t.lr0), (100, 2, 1e-4));
    }
}
