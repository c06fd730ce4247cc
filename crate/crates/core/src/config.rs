//! Run configuration and its flat `key = value` file grammar.
//!
//! ```text
//! # comment
//! mode = selective          # vanilla | naive | selective
//! lambda = 1.1
//! layers = 2..8             # half-open ranges, comma separated, or "none"
//! shift = shifted           # identity | shifted | shifted:<offset>
//! steps = 30
//! cfg_scale = 3.5
//! seed = 0
//! targets = 2
//! out = run
//! ref_cache = path/to/cache # optional
//! embeddings = emb.satn     # optional, analyze only
//! model_layers = 8
//! heads = 4
//! model_dim = 64
//! text_len = 4
//! grid = 8x8
//! latent_channels = 4
//! model_seed = 0
//! ```
//!
//! Values are applied in order: defaults, then the file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ditsim::{ModelConfig, SamplerConfig};
use crate::error::{Error, Result};
use crate::position::ShiftMode;
use crate::sharing::{LayerSet, SharingConfig, SharingMode, DEFAULT_LAMBDA};

/// Reference position shift as written in configs; `Beside` resolves to the
/// grid width once the grid is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ShiftSpec {
    Identity,
    Beside,
    Offset(u32),
}

impl ShiftSpec {
    pub fn resolve(self, grid: (usize, usize)) -> ShiftMode {
        match self {
            ShiftSpec::Identity => ShiftMode::Identity,
            ShiftSpec::Beside => ShiftMode::beside(grid),
            ShiftSpec::Offset(0) => ShiftMode::Identity,
            ShiftSpec::Offset(offset) => ShiftMode::Shifted { offset },
        }
    }
}

impl FromStr for ShiftSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "shifted" => Ok(Self::Beside),
            other => other
                .strip_prefix("shifted:")
                .and_then(|o| o.parse().ok())
                .map(Self::Offset)
                .ok_or_else(|| {
                    Error::config(format!(
                        "bad shift {other:?} (identity | shifted | shifted:<offset>)"
                    ))
                }),
        }
    }
}

impl From<ShiftSpec> for String {
    fn from(s: ShiftSpec) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for ShiftSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for ShiftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Identity => f.write_str("identity"),
            Self::Beside => f.write_str("shifted"),
            Self::Offset(o) => write!(f, "shifted:{o}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
    pub mode: SharingMode,
    pub lambda: f32,
    /// `None` means the default: layer groups 2 and 3.
    pub layers: Option<LayerSet>,
    pub shift: ShiftSpec,
    pub seed: u64,
    pub targets: usize,
    /// Where results go; not echoed into manifests so runs are relocatable.
    #[serde(skip_serializing, default)]
    pub out: PathBuf,
    pub ref_cache: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            sampler: SamplerConfig::default(),
            mode: SharingMode::Selective,
            lambda: DEFAULT_LAMBDA,
            layers: None,
            shift: ShiftSpec::Beside,
            seed: 0,
            targets: 2,
            out: PathBuf::from("run"),
            ref_cache: None,
            embeddings: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

pub fn parse_grid(value: &str) -> Result<(usize, usize)> {
    let (h, w) = value
        .split_once('x')
        .ok_or_else(|| Error::config(format!("grid {value:?} should look like 8x8")))?;
    Ok((parse("grid", h.trim())?, parse("grid", w.trim())?))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "mode" => self.mode = value.parse()?,
            "lambda" => self.lambda = parse(key, value)?,
            "layers" => self.layers = Some(value.parse()?),
            "shift" => self.shift = value.parse()?,
            "steps" => self.sampler.steps = parse(key, value)?,
            "cfg_scale" => self.sampler.cfg_scale = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "targets" => self.targets = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "ref_cache" => self.ref_cache = Some(PathBuf::from(value)),
            "embeddings" => self.embeddings = Some(PathBuf::from(value)),
            "model_layers" => self.model.layers = parse(key, value)?,
            "heads" => self.model.heads = parse(key, value)?,
            "model_dim" => self.model.model_dim = parse(key, value)?,
            "text_len" => self.model.text_len = parse(key, value)?,
            "grid" => self.model.grid = parse_grid(value)?,
            "latent_channels" => self.model.latent_channels = parse(key, value)?,
            "model_seed" => self.model.seed = parse(key, value)?,
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::validation(format!("config file {}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    pub fn resolved_layers(&self) -> LayerSet {
        self.layers.clone().unwrap_or_else(|| {
            let g = self.model.layer_groups();
            LayerSet::range(g[1].0, g[2].1)
        })
    }

    pub fn sharing(&self) -> SharingConfig {
        SharingConfig {
            mode: self.mode,
            lambda: self.lambda,
            layers: self.resolved_layers(),
            shift: self.shift.resolve(self.model.grid),
        }
    }

    /// Copy with the default layer set spelled out, for manifests.
    pub fn effective(&self) -> RunConfig {
        RunConfig {
            layers: Some(self.resolved_layers()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.sharing().validate(self.model.layers)?;
        if self.targets == 0 {
            return Err(Error::validation("targets must be at least 1"));
        }
        for (what, path) in [("ref_cache", &self.ref_cache), ("embeddings", &self.embeddings)] {
            if let Some(p) = path {
                if !p.exists() {
                    return Err(Error::validation(format!("{what} path {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }
}
