//! TOML experiment configuration.
//!
//! ```toml
//! seed = 7
//! out = "runs/gmnet"
//! loss = "ae"
//! setting = "u+app"
//!
//! [data]
//! dir = "data/synth"
//!
//! [gen]
//! classes = 3
//! dim = 10
//!
//! [quantifier]
//! kind = "gmnet"
//! gaussians = 20
//!
//! [trainer]
//! max_epochs = 300
//! ```

use std::path::{Path, PathBuf};
use std::str::FromStr;

use quantnet::classic::{ClassicConfig, ClassicMethod};
use quantnet::deep::{Architecture, ModelConfig, TrainerConfig};
use quantnet::metrics::LossKind;
use quantnet::protocols::SamplingConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Training setting: natural bags only, or natural plus APP-generated bags.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Setting {
    #[default]
    #[serde(rename = "u", alias = "U")]
    U,
    #[serde(rename = "u+app", alias = "U+APP")]
    UApp,
}

/// Either a deep architecture or a classical method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum QuantifierKind {
    Deep(Architecture),
    Classic(ClassicMethod),
}

impl QuantifierKind {
    pub fn name(self) -> &'static str {
        match self {
            QuantifierKind::Deep(a) => a.name(),
            QuantifierKind::Classic(m) => m.name(),
        }
    }
}

impl FromStr for QuantifierKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(a) = s.parse::<Architecture>() {
            return Ok(QuantifierKind::Deep(a));
        }
        s.parse::<ClassicMethod>()
            .map(QuantifierKind::Classic)
            .map_err(|_| CliError::Config(format!("unknown quantifier {:?}", s)))
    }
}

impl TryFrom<String> for QuantifierKind {
    type Error = CliError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<QuantifierKind> for String {
    fn from(k: QuantifierKind) -> String {
        k.name().to_string()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory (manifest, examples, bags).
    pub dir: Option<PathBuf>,
}

/// Synthetic dataset: Gaussian clusters, one per class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub classes: usize,
    pub dim: usize,
    /// Distance between any two class centers, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub examples: usize,
    pub bags: usize,
    pub bag_size: usize,
    /// Held-out bags written to `test_bags/`.
    pub test_bags: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { classes: 3, dim: 10, separation: 2.0, sigma: 1.0, examples: 5000, bags: 200, bag_size: 100, test_bags: 200 }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.classes < 2 {
            return bad(format!("gen.classes must be >= 2, got {}", self.classes));
        }
        if self.examples < self.classes {
            return bad(format!("gen.examples ({}) must be >= gen.classes ({})", self.examples, self.classes));
        }
        if self.dim < self.classes {
            return bad(format!("gen.dim ({}) must be >= gen.classes ({})", self.dim, self.classes));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("gen.separation must be >= 0 and gen.sigma > 0".into());
        }
        if (self.bags > 0 || self.test_bags > 0) && self.bag_size == 0 {
            return bad("gen.bag_size must be >= 1".into());
        }
        Ok(())
    }
}

/// Quantifier choice plus optional overrides of the architecture defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantifierConfig {
    pub kind: QuantifierKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fem_hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fem_output: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qm_hidden: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spaces: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gaussians: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cka_lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize_likelihoods: Option<bool>,
    #[serde(default)]
    pub classic: ClassicConfig,
}

impl Default for QuantifierConfig {
    fn default() -> Self {
        QuantifierConfig {
            kind: QuantifierKind::Deep(Architecture::Gmnet),
            fem_hidden: None,
            fem_output: None,
            qm_hidden: None,
            dropout: None,
            spaces: None,
            gaussians: None,
            latent_dim: None,
            cka_lambda: None,
            normalize_likelihoods: None,
            classic: ClassicConfig::default(),
        }
    }
}

impl QuantifierConfig {
    /// Architecture defaults with this config's overrides applied.
    pub fn model_config(&self, arch: Architecture, input_dim: usize, classes: usize) -> ModelConfig {
        let mut c = ModelConfig::new(arch, input_dim, classes);
        if let Some(h) = &self.fem_hidden {
            c.fem.hidden = h.clone();
        }
        if let Some(h) = &self.qm_hidden {
            c.qm.hidden = h.clone();
        }
        if let Some(r) = self.dropout {
            c.fem.dropout = r;
            c.qm.dropout = r;
        }
        if let Some(v) = self.spaces {
            c.gmnet.spaces = v;
        }
        if let Some(v) = self.gaussians {
            c.gmnet.gaussians = v;
        }
        if let Some(v) = self.latent_dim {
            c.gmnet.latent_dim = v;
            if arch == Architecture::Gmnet {
                c.fem.output = v;
            }
        }
        if let Some(v) = self.cka_lambda {
            c.gmnet.cka_lambda = v;
        }
        if let Some(v) = self.normalize_likelihoods {
            c.gmnet.normalize_likelihoods = v;
        }
        if let Some(v) = self.fem_output {
            c.fem.output = v;
        }
        c
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Mandatory, either here or via `--seed`.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub loss: LossKind,
    pub setting: Setting,
    pub data: DataConfig,
    pub gen: GenConfig,
    pub quantifier: QuantifierConfig,
    pub sampling: SamplingConfig,
    pub trainer: TrainerConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {}", path.display(), e)))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|source| CliError::Toml { path: origin.to_string(), source })
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| CliError::Config("a seed is required (config `seed` or --seed)".into()))
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().ok_or_else(|| CliError::Config("an output directory is required (config `out` or --out)".into()))
    }

    pub fn data_dir(&self) -> Result<&Path> {
        let dir = self.data.dir.as_deref().ok_or_else(|| CliError::Config("data.dir is required".into()))?;
        if !dir.is_dir() {
            return Err(CliError::Config(format!("data.dir {} does not exist", dir.display())));
        }
        Ok(dir)
    }

    /// Sampling settings with the experiment seed and setting applied.
    pub fn sampling(&self) -> Result<SamplingConfig> {
        let mut s = self.sampling.clone();
        s.seed = self.seed()?;
        s.app_enabled = self.setting == Setting::UApp;
        Ok(s)
    }

    pub fn trainer(&self) -> Result<TrainerConfig> {
        let mut t = self.trainer.clone();
        t.seed = self.seed()?;
        t.loss = self.loss;
        Ok(t)
    }
}
