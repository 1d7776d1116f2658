//! Run configuration: one TOML tree with `${VAR}` interpolation and dotted
//! `key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{Activation, AlignmentConfig};
use crate::cdm::{BceMode, HeadKind};
use crate::dataset::synthetic::SyntheticConfig;
use crate::dataset::NoiseMode;
use crate::diffusion::{DiffusionSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::semantics::HttpConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Framework {
    /// Graph propagation, fusion, alignment and diffusion regularisers.
    #[default]
    Dllm,
    /// A free embedding table fed straight into the head.
    Plain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub framework: Framework,
    pub head: HeadKind,
    /// Embedding width; defaults to 32 for IRT/MIRT and Z otherwise.
    pub dim: Option<usize>,
    /// LightGCN layers.
    pub layers: usize,
    /// Interaction-net widths of NCDM and CDMFKC.
    pub hidden: [usize; 2],
    pub fusion_activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            framework: Framework::Dllm,
            head: HeadKind::Ncdm,
            dim: None,
            layers: 3,
            hidden: [512, 256],
            fusion_activation: Activation::Linear,
        }
    }
}

impl ModelConfig {
    pub fn dim_for(&self, num_concepts: usize) -> usize {
        self.dim
            .unwrap_or_else(|| self.head.default_dim(num_concepts))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerSchedule {
    /// Computed once per epoch and attached to the first batch.
    #[default]
    PerEpoch,
    /// Recomputed for every batch.
    PerBatch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub max_epochs: usize,
    /// Epochs without a validation-AUC improvement before stopping.
    pub patience: usize,
    pub bce: BceMode,
    pub regularizers: RegularizerSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            lr: 0.04,
            max_epochs: 200,
            patience: 10,
            bce: BceMode::Mean,
            regularizers: RegularizerSchedule::PerEpoch,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda: f64,
    /// Candidates for validation-based selection of `lambda`.
    pub lambda_grid: Vec<f64>,
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 1e-3,
            lambda_grid: vec![2e-3, 1e-3, 5e-4],
            rho: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Noising depth of the refinement.
    pub t_star: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        DiffusionConfig {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            t_star: 5,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        DiffusionSchedule::new(&ScheduleConfig {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        })
    }
}

/// Component switches; all on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    /// Relation augmentation; off aligns against the original subgraphs.
    pub raa: bool,
    /// Unconditional refinement stage and its loss.
    pub ddm_u: bool,
    /// Conditional refinement stage and its loss.
    pub ddm_c: bool,
    /// Semantic alignment.
    pub semantic: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            raa: true,
            ddm_u: true,
            ddm_c: true,
            semantic: true,
        }
    }
}

impl Ablation {
    pub const FLAGS: [&'static str; 4] = ["raa", "ddm_u", "ddm_c", "semantic"];

    pub fn all_off() -> Self {
        Ablation {
            raa: false,
            ddm_u: false,
            ddm_c: false,
            semantic: false,
        }
    }

    pub fn set(&mut self, flag: &str, on: bool) -> Result<()> {
        match flag.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "raa" => self.raa = on,
            "ddm_u" => self.ddm_u = on,
            "ddm_c" => self.ddm_c = on,
            "semantic" => self.semantic = on,
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation flag `{other}` (expected one of {})",
                    Self::FLAGS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// The eight on/off combinations of raa, ddm_u and ddm_c with the
    /// semantic switch left as given.
    pub fn grid(semantic: bool) -> Vec<Ablation> {
        (0..8u8)
            .map(|m| Ablation {
                raa: m & 4 != 0,
                ddm_u: m & 2 != 0,
                ddm_c: m & 1 != 0,
                semantic,
            })
            .rev()
            .collect()
    }

    pub fn label(&self) -> String {
        let off: Vec<&str> = Self::FLAGS
            .iter()
            .zip([self.raa, self.ddm_u, self.ddm_c, self.semantic])
            .filter(|(_, on)| !on)
            .map(|(f, _)| *f)
            .collect();
        if off.is_empty() {
            "full".into()
        } else {
            format!("wo_{}", off.join("+"))
        }
    }
}

/// Return `config` with every listed flag switched off.
pub fn ablate(config: &RunConfig, flags: &[&str]) -> Result<RunConfig> {
    let mut out = config.clone();
    for f in flags {
        out.ablation.set(f, false)?;
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Response log file (`student,exercise,correct`).
    pub logs: Option<PathBuf>,
    /// Q-matrix file (`exercise,concept`).
    pub q_matrix: Option<PathBuf>,
    /// Optional `concept,name` file used in prompts.
    pub concept_names: Option<PathBuf>,
    /// Generate data instead of reading files.
    pub synthetic: Option<SyntheticConfig>,
    pub split_seed: u64,
    pub stratified: bool,
    pub noise_level: f64,
    pub noise_mode: NoiseMode,
    pub min_responses: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingProvider {
    /// Deterministic hashed-token embeddings of the prompts.
    #[default]
    Mock,
    /// An OpenAI-style HTTP endpoint.
    Http,
    /// Precomputed `id<TAB>v1,...` files.
    Files,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemanticsConfig {
    pub provider: EmbeddingProvider,
    pub mock_dim: usize,
    pub student_file: Option<PathBuf>,
    pub exercise_file: Option<PathBuf>,
    pub http: Option<HttpConfig>,
}

impl Default for SemanticsConfig {
    fn default() -> Self {
        SemanticsConfig {
            provider: EmbeddingProvider::Mock,
            mock_dim: 256,
            student_file: None,
            exercise_file: None,
            http: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Seeds of multi-seed harnesses.
    pub seeds: Vec<u64>,
    /// Single-threaded, fixed-order execution.
    pub deterministic: bool,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub alignment: AlignmentConfig,
    pub diffusion: DiffusionConfig,
    pub ablation: Ablation,
    pub data: DataConfig,
    pub semantics: SemanticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            seeds: vec![0, 1, 2, 3, 4],
            deterministic: true,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            alignment: AlignmentConfig {
                norm_floor: 1e-8,
                ..AlignmentConfig::default()
            },
            diffusion: DiffusionConfig::default(),
            ablation: Ablation::default(),
            data: DataConfig::default(),
            semantics: SemanticsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.alignment.validate()?;
        let schedule = self.diffusion.schedule()?;
        if self.diffusion.t_star > schedule.steps() {
            return Err(Error::Config(format!(
                "t_star {} exceeds the {} diffusion steps",
                self.diffusion.t_star,
                schedule.steps()
            )));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(Error::Config(
                "batch_size and max_epochs must be positive".into(),
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", t.lr)));
        }
        let l = &self.loss;
        if !(l.lambda >= 0.0 && l.rho >= 0.0 && l.lambda.is_finite() && l.rho.is_finite()) {
            return Err(Error::Config(format!(
                "lambda and rho must be non-negative, got {} and {}",
                l.lambda, l.rho
            )));
        }
        if l.lambda_grid.iter().any(|x| !(*x >= 0.0)) {
            return Err(Error::Config(
                "lambda_grid entries must be non-negative".into(),
            ));
        }
        if self.model.dim == Some(0) || self.model.hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.data.noise_level) {
            return Err(Error::Config(format!(
                "noise_level must lie in [0, 0.5], got {}",
                self.data.noise_level
            )));
        }
        Ok(())
    }

    /// Parse TOML text after `${VAR}` substitution.
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parse TOML, apply `key=value` overrides, then validate.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let text = interpolate_env(text)?;
        let mut table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_with(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serialising config: {e}")))
    }

    /// Hex SHA-256 prefix of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        c
    }
}

/// Replace `${NAME}` with the environment variable's value.
pub fn interpolate_env(text: &str) -> Result<String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| Error::Config("unterminated `${` in config".into()))?;
        let name = &after[..end];
        let value = std::env::var(name)
            .map_err(|_| Error::Config(format!("environment variable `{name}` is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Set a dotted path such as `train.lr=0.01`. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {}", raw.trim()))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
