//! Command-line surface: argument types, command dispatch and the shared
//! helpers for writing output directories atomically.
//!
//! Exit codes: 0 success, 2 invalid input, 3 runtime failure. Diagnostics
//! go to stderr; results go to files only.

mod ablate;
mod analyze;
mod cache;
mod generate;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub use ablate::{run_ablation, AblationCell, AblationGrid, AblationReport};
pub use analyze::analyze_run;
pub use cache::cache_from_file;
pub use generate::{generate_run, RunManifest};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "SHARED_ATTN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "shared-attn", version, about = "Style-consistent attention sharing on a toy MM-DiT")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a reference and target streams with shared attention.
    Generate(RunArgs),
    /// Extract per-step reference features from an external latent.
    CacheRef(CacheArgs),
    /// Run the lambda x layer-group ablation grid.
    Ablate(AblateArgs),
    /// Collision experiment and locality profiles for a run directory.
    Analyze(AnalyzeArgs),
    /// Run the built-in invariant checks.
    Selftest,
}

/// Options shared by every command that builds a run configuration. Each
/// overrides the matching key from `--config`.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// vanilla | naive | selective
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    /// Half-open layer ranges, e.g. `19..57` or `2..5,6`.
    #[arg(long)]
    pub layers: Option<String>,
    /// identity | shifted | shifted:<offset>
    #[arg(long)]
    pub shift: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long = "cfg-scale")]
    pub cfg_scale: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub targets: Option<String>,
    #[arg(long = "ref-cache")]
    pub ref_cache: Option<String>,
    #[arg(long = "model-layers")]
    pub model_layers: Option<String>,
    #[arg(long)]
    pub heads: Option<String>,
    #[arg(long = "model-dim")]
    pub model_dim: Option<String>,
    #[arg(long = "text-len")]
    pub text_len: Option<String>,
    /// Latent grid as `HxW`.
    #[arg(long)]
    pub grid: Option<String>,
    #[arg(long = "latent-channels")]
    pub latent_channels: Option<String>,
    #[arg(long = "model-seed")]
    pub model_seed: Option<String>,
}

impl RunArgs {
    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        let flags = [
            ("mode", &self.mode),
            ("lambda", &self.lambda),
            ("layers", &self.layers),
            ("shift", &self.shift),
            ("steps", &self.steps),
            ("cfg_scale", &self.cfg_scale),
            ("seed", &self.seed),
            ("out", &self.out),
            ("targets", &self.targets),
            ("ref_cache", &self.ref_cache),
            ("model_layers", &self.model_layers),
            ("heads", &self.heads),
            ("model_dim", &self.model_dim),
            ("text_len", &self.text_len),
            ("grid", &self.grid),
            ("latent_channels", &self.latent_channels),
            ("model_seed", &self.model_seed),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)
                    .map_err(|e| Error::config(format!("--{}: {e}", key.replace('_', "-"))))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    /// `N x C` latent tensor file.
    #[arg(long)]
    pub latent: PathBuf,
    /// Prompt used while extracting: `empty` or `seed:<n>`.
    #[arg(long, default_value = "empty")]
    pub prompt: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma separated lambda values.
    #[arg(long, default_value = "0.9,0.95,1.0,1.05,1.1,1.15")]
    pub lambdas: String,
    /// Comma separated layer-group masks, one digit per group.
    #[arg(long, default_value = "100,010,001")]
    pub masks: String,
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// Run directory written by `generate`.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tensor file whose rows are embeddings for pairwise cosine.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory; defaults to `<run>/analysis`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Caps rayon's global pool from [`THREADS_ENV`] when set.
pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(format!("{THREADS_ENV}={raw:?} is not a positive integer")))?;
    // A pool may already exist when called twice in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.resolve()?;
            let out = cfg.out.clone();
            generate_run(&cfg, &out)?;
            eprintln!("wrote run to {}", out.display());
        }
        Command::CacheRef(args) => {
            let cfg = args.run.resolve()?;
            let out = cfg.out.clone();
            cache_from_file(&cfg, &args.latent, &args.prompt, &out)?;
            eprintln!("wrote reference cache to {}", out.display());
        }
        Command::Ablate(args) => {
            let cfg = args.run.resolve()?;
            let grid = AblationGrid::parse(&args.lambdas, &args.masks)?;
            let out = cfg.out.clone();
            let report = run_ablation(&cfg, &grid)?;
            ablate::write_report(&report, &out)?;
            eprintln!("wrote {} ablation cells to {}", report.cells.len(), out.display());
        }
        Command::Analyze(args) => {
            let out = args.out.clone().unwrap_or_else(|| args.run.join("analysis"));
            analyze_run(&args.run, args.trials, args.seed, args.embeddings.as_deref(), &out)?;
            eprintln!("wrote analysis to {}", out.display());
        }
        Command::Selftest => {
            let results = crate::selftest::run_all();
            let mut failed = 0;
            for r in &results {
                eprintln!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Error::Validation(format!("{failed} selftest check(s) failed")));
            }
        }
    }
    Ok(())
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Collects files written into an output directory along with their hashes.
#[derive(Default)]
pub(crate) struct OutputFiles {
    pub hashes: BTreeMap<String, String>,
}

impl OutputFiles {
    pub fn write(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.hashes.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

/// Builds an output directory in a sibling `.partial` directory and moves it
/// into place only if `fill` succeeds. An existing `out` is replaced only
/// when it holds `marker` (i.e. it is a previous output of the same kind).
pub(crate) fn write_atomically(out: &Path, marker: &str, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::validation(format!("bad output path {}", out.display())))?;
    let mut staged_name = name.to_os_string();
    staged_name.push(".partial");
    let staging = out.with_file_name(staged_name);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    if let Err(e) = fill(&staging) {
        let _ = fs::remove_dir_all(&staging);
        return Err(e);
    }
    if out.exists() {
        let is_ours = out.join(marker).exists();
        let is_empty = fs::read_dir(out).map(|mut d| d.next().is_none()).unwrap_or(false);
        if !(is_ours || is_empty) {
            let _ = fs::remove_dir_all(&staging);
            return Err(Error::validation(format!(
                "{} exists and is not a previous output; refusing to overwrite",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(&staging, out).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "lambda = 0.9\nsteps = 4\nmode = naive\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            lambda: Some("1.05".into()),
            ..RunArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.lambda, 1.05);
        assert_eq!(cfg.sampler.steps, 4);
    }

    #[test]
    fn paper_preset_accepted_with_deep_model() {
        let args = RunArgs {
            lambda: Some("1.1".into()),
            layers: Some("19..57".into()),
            model_layers: Some("57".into()),
            ..RunArgs::default()
        };
        let cfg = args.resolve().unwrap();
        assert_eq!(cfg.resolved_layers().len(), 38);
        let zero = RunArgs {
            lambda: Some("0".into()),
            ..RunArgs::default()
        };
        assert_eq!(exit_code(&zero.resolve().unwrap_err()), EXIT_VALIDATION);
    }

    #[test]
    fn atomic_write_cleans_up_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let err = write_atomically(&out, "manifest.json", |d| {
            fs::write(d.join("half.bin"), b"x").unwrap();
            Err(Error::validation("boom"))
        });
        assert!(err.is_err());
        assert!(!out.exists());
        assert!(!dir.path().join("out.partial").exists());

        fs::create_dir(&out).unwrap();
        fs::write(out.join("precious.txt"), b"keep").unwrap();
        assert!(write_atomically(&out, "manifest.json", |_| Ok(())).is_err());
        assert!(out.join("precious.txt").exists());
    }
}
