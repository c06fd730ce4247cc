use std::path::Path;

use super::write_atomically;
use crate::config::RunConfig;
use crate::ditsim::init_model;
use crate::error::{Error, Result};
use crate::refcache::{cache_reference_features, CacheManifest, CachePrompt, MANIFEST};
use crate::tensor::{read_file, Matrix};

fn parse_prompt(s: &str) -> Result<CachePrompt> {
    match s {
        "empty" => Ok(CachePrompt::Empty),
        other => other
            .strip_prefix("seed:")
            .and_then(|v| v.parse().ok())
            .map(CachePrompt::Seeded)
            .ok_or_else(|| Error::config(format!("bad prompt {other:?} (empty | seed:<n>)"))),
    }
}

/// Reads an `N x C` latent and writes its feature cache to `out`, covering
/// `cfg.sampler.steps` steps and the configured layer set.
pub fn cache_from_file(cfg: &RunConfig, latent_path: &Path, prompt: &str, out: &Path) -> Result<CacheManifest> {
    cfg.validate()?;
    let prompt = parse_prompt(prompt)?;
    if !latent_path.exists() {
        return Err(Error::validation(format!(
            "latent file {} does not exist",
            latent_path.display()
        )));
    }
    let (dims, values) = read_file(latent_path)?.into_f32()?;
    if dims.len() != 2 {
        return Err(Error::validation(format!(
            "latent {} has dims {dims:?}, expected N x C",
            latent_path.display()
        )));
    }
    let latent = Matrix::new(dims[0], dims[1], values)?;
    let model = init_model(&cfg.model)?;
    let cache = cache_reference_features(
        &latent,
        &model,
        cfg.sampler.steps,
        &cfg.resolved_layers(),
        cfg.seed,
        prompt,
    )?;
    let mut manifest = None;
    write_atomically(out, MANIFEST, |dir| {
        manifest = Some(cache.save(dir, &cfg.model)?);
        Ok(())
    })?;
    Ok(manifest.expect("set on success"))
}
