//! Declarative run configuration: one TOML file with sections mirroring the
//! module configs.
//!
//! Override precedence is flag > environment > file > built-in default. The
//! recognized environment variables are `FRAUDFORMER_SEED`,
//! `FRAUDFORMER_OUT`, and `FRAUDFORMER_PRESET`. All randomness flows from
//! the single root `seed`: the corpus generator and every training run
//! namespace their draws with derived labels, so no section carries a seed
//! of its own.

use std::env;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::CorpusSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tokenizer::FitOptions;
use crate::training::{SweepGrid, TrainConfig};

pub const ENV_SEED: &str = "FRAUDFORMER_SEED";
pub const ENV_OUT: &str = "FRAUDFORMER_OUT";
pub const ENV_PRESET: &str = "FRAUDFORMER_PRESET";

/// Model-size preset; `desk` trains on a laptop CPU, `paper` matches the
/// full-scale architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::config("preset", format!("expected 'desk' or 'paper', got '{other}'"))),
        }
    }
}

/// Architecture overrides on top of the preset; unset fields keep the
/// preset's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub l_max: Option<usize>,
    pub tie_lm_head: Option<bool>,
}

/// Time-encoder knobs shared by every variant; the variant itself chooses
/// family, scheme, and the positional/LayerNorm toggles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub lambda: f64,
    pub f_base: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        EncoderSection { lambda: 0.01, f_base: 1e7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Variant names as in the results tables; "srp/wol" and "srp_wol" both
    /// parse.
    pub variants: Vec<String>,
    pub n_seeds: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            variants: crate::model::Variant::ALL.iter().map(|v| v.to_string()).collect(),
            n_seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed for the corpus generator and all training runs.
    pub seed: u64,
    /// Output directory; every artifact lands under it.
    pub out: PathBuf,
    pub preset: Preset,
    pub corpus: CorpusSpec,
    pub tokenizer: FitOptions,
    pub model: ModelSection,
    pub encoder: EncoderSection,
    pub train: TrainConfig,
    pub sweep: SweepGrid,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            out: PathBuf::from("runs/default"),
            preset: Preset::Desk,
            corpus: CorpusSpec::default(),
            tokenizer: FitOptions::default(),
            model: ModelSection::default(),
            encoder: EncoderSection::default(),
            train: TrainConfig::default(),
            sweep: SweepGrid::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl RunConfig {
    /// Reads a TOML file onto the defaults. Returns the raw file bytes
    /// alongside so the manifest can record their hash.
    pub fn from_file(path: &Path) -> Result<(RunConfig, Vec<u8>)> {
        let bytes = fs::read(path)
            .map_err(|e| Error::config("config", format!("cannot read {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes.clone())
            .map_err(|_| Error::config("config", format!("{} is not UTF-8", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Ok((config, bytes))
    }

    /// Applies environment overrides (the middle precedence tier).
    pub fn apply_env(&mut self) -> Result<()> {
        if let Some(seed) = read_env(ENV_SEED)? {
            self.seed = seed
                .parse()
                .map_err(|_| Error::config(ENV_SEED, format!("not an unsigned integer: '{seed}'")))?;
        }
        if let Some(out) = read_env(ENV_OUT)? {
            self.out = PathBuf::from(out);
        }
        if let Some(preset) = read_env(ENV_PRESET)? {
            self.preset = preset.parse()?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus_spec().validate()?;
        self.train_config().validate()?;
        if self.encoder.f_base <= 0.0 {
            return Err(Error::config("encoder.f_base", "must be positive"));
        }
        if self.ablate.n_seeds == 0 {
            return Err(Error::config("ablate.n_seeds", "must be at least 1"));
        }
        for name in &self.ablate.variants {
            crate::model::Variant::from_str(name)?;
        }
        Ok(())
    }

    /// Corpus spec seeded by the root seed; generator draws are namespaced
    /// per account, so the same root can also seed training.
    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec { seed: self.seed, ..self.corpus.clone() }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    /// Preset architecture with file overrides applied; vocabulary size and
    /// column count come from the fitted tokenizer.
    pub fn model_config(&self, vocab_size: usize, n_columns: usize) -> ModelConfig {
        let mut config = match self.preset {
            Preset::Desk => ModelConfig::desk(vocab_size, n_columns),
            Preset::Paper => ModelConfig::paper(vocab_size, n_columns),
        };
        if let Some(d) = self.model.d_model {
            config.d_model = d;
        }
        if let Some(l) = self.model.n_layers {
            config.n_layers = l;
        }
        if let Some(h) = self.model.n_heads {
            config.n_heads = h;
        }
        if let Some(l) = self.model.l_max {
            config.l_max = l;
        }
        if let Some(tie) = self.model.tie_lm_head {
            config.tie_lm_head = tie;
        }
        config.encoder.lambda = self.encoder.lambda;
        config.encoder.f_base = self.encoder.f_base;
        config
    }

    pub fn l_max(&self) -> usize {
        self.model.l_max.unwrap_or(match self.preset {
            Preset::Desk => 128,
            Preset::Paper => 1024,
        })
    }

    pub fn ablate_variants(&self) -> Result<Vec<crate::model::Variant>> {
        self.ablate.variants.iter().map(|s| crate::model::Variant::from_str(s)).collect()
    }

    /// Canonical serialization of the resolved config; hashed into the
    /// manifest so re-runs can prove they used identical inputs.
    pub fn canonical_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config("config", format!("serialize: {e}")))
    }
}

fn read_env(name: &str) -> Result<Option<String>> {
    match env::var(name) {
        Ok(v) => Ok(Some(v)),
        Err(env::VarError::NotPresent) => Ok(None),
        Err(env::VarError::NotUnicode(_)) => {
            Err(Error::config(name, "environment value is not valid unicode"))
        }
    }
}
