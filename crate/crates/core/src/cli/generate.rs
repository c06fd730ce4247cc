use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{write_atomically, write_json, OutputFiles};
use crate::config::RunConfig;
use crate::ditsim::{generate, init_model, GenerateSpec, Generation, ReferenceInput};
use crate::error::{Error, Result};
use crate::refcache::RefFeatureCache;
use crate::tensor::{encode, TensorData};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub kind: String,
    pub config: RunConfig,
    /// Checksum of the reference cache contents when one was used.
    pub ref_cache_checksum: Option<String>,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::validation(format!(
                "{} is not a run directory (no {MANIFEST})",
                run_dir.display()
            )));
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn trajectory_name(stream: usize) -> String {
    if stream == 0 {
        "reference_trajectory.satn".into()
    } else {
        format!("target_{stream:02}_trajectory.satn")
    }
}

pub fn latent_name(stream: usize) -> String {
    if stream == 0 {
        "reference_latent.satn".into()
    } else {
        format!("target_{stream:02}_latent.satn")
    }
}

pub(crate) fn run_generation(cfg: &RunConfig, cache: Option<&RefFeatureCache>) -> Result<Generation> {
    let model = init_model(&cfg.model)?;
    let reference = match cache {
        Some(c) => ReferenceInput::Cached(c),
        None => ReferenceInput::Live,
    };
    generate(
        &model,
        &cfg.sampler,
        &cfg.sharing(),
        reference,
        &GenerateSpec {
            targets: cfg.targets,
            seed: cfg.seed,
            capture_step: None,
        },
    )
}

pub(crate) fn load_cache(cfg: &RunConfig) -> Result<Option<RefFeatureCache>> {
    let Some(dir) = &cfg.ref_cache else {
        return Ok(None);
    };
    let (cache, manifest) = RefFeatureCache::load(dir)?;
    if manifest.model != cfg.model {
        return Err(Error::config(format!(
            "reference cache {} was built for a different model config",
            dir.display()
        )));
    }
    Ok(Some(cache))
}

/// Runs `generate` and writes trajectories, final latents and a manifest
/// with content hashes into `out`.
pub fn generate_run(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    let cache = load_cache(cfg)?;
    let gen = run_generation(cfg, cache.as_ref())?;
    let mut manifest = None;
    write_atomically(out, MANIFEST, |dir| {
        let mut files = OutputFiles::default();
        let streams = gen
            .reference
            .iter()
            .map(|t| (0, t))
            .chain(gen.targets.iter().enumerate().map(|(k, t)| (k + 1, t)));
        for (stream, traj) in streams {
            files.write(dir, &trajectory_name(stream), &encode(&traj.to_tensor())?)?;
            let last = traj.last();
            let latent = TensorData::F32 {
                dims: vec![last.rows(), last.cols()],
                values: last.data().to_vec(),
            };
            files.write(dir, &latent_name(stream), &encode(&latent)?)?;
        }
        let m = RunManifest {
            kind: "generate".into(),
            config: cfg.effective(),
            ref_cache_checksum: cache.as_ref().map(RefFeatureCache::checksum),
            files: files.hashes,
        };
        write_json(&dir.join(MANIFEST), &m)?;
        manifest = Some(m);
        Ok(())
    })?;
    Ok(manifest.expect("set on success"))
}
