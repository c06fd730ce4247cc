//! Reference features from an external latent.
//!
//! One noise draw is blended with the clean latent at every step index
//! `t = T, T-1, .., 0` as `(t/T) noise + (1 - t/T) latent`, the blend is
//! pushed through the model with vanilla attention at time `t/T`, and the
//! q/k/v of every selected layer is kept. Sampler step `k` reads index
//! `T - k`.
//!
//! Pixel-to-latent encoding is not done here; callers hand in latents.
//!
//! On disk a cache is a directory with one `t{t}_l{layer}.satn` bundle
//! tensor per entry (see [`QkvBundle::to_tensor`]) and a `manifest.json`
//! written last.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ditsim::{ModelConfig, ToyDit, Wiring};
use crate::error::{Error, Result};
use crate::position::{ShiftMode, StreamPositions};
use crate::sharing::{LayerSet, QkvBundle, SharingConfig};
use crate::tensor::{derive_seed, read_file, write_file, Matrix, Pcg32};

pub const MANIFEST: &str = "manifest.json";

/// `(t/T) noise + (1 - t/T) latent`.
pub fn interpolate_noisy_latent(latent: &Matrix, noise: &Matrix, t: usize, steps: usize) -> Result<Matrix> {
    if latent.shape() != noise.shape() {
        return Err(Error::shape(format!(
            "latent {:?} vs noise {:?}",
            latent.shape(),
            noise.shape()
        )));
    }
    if steps == 0 || t > steps {
        return Err(Error::validation(format!("timestep {t} outside 0..={steps}")));
    }
    // Endpoints are returned untouched so they match bit for bit.
    if t == steps {
        return Ok(noise.clone());
    }
    if t == 0 {
        return Ok(latent.clone());
    }
    let a = t as f64 / steps as f64;
    let data = noise
        .data()
        .iter()
        .zip(latent.data())
        .map(|(&n, &l)| (a * n as f64 + (1.0 - a) * l as f64) as f32)
        .collect();
    Matrix::new(latent.rows(), latent.cols(), data)
}

/// Prompt fed to the model while extracting features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CachePrompt {
    #[default]
    Empty,
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefFeatureCache {
    steps: usize,
    layers: LayerSet,
    seed: u64,
    prompt: CachePrompt,
    /// Indexed by `t`, then layer.
    entries: Vec<BTreeMap<usize, QkvBundle>>,
}

/// Serialized cache description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub steps: usize,
    pub layers: String,
    pub seed: u64,
    pub prompt: CachePrompt,
    pub text_len: usize,
    pub image_len: usize,
    pub width: usize,
    pub model: ModelConfig,
    /// File name to SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

pub fn cache_reference_features(
    latent: &Matrix,
    model: &ToyDit,
    steps: usize,
    layers: &LayerSet,
    seed: u64,
    prompt: CachePrompt,
) -> Result<RefFeatureCache> {
    let cfg = model.config();
    let mut rng = Pcg32::new(derive_seed(seed, "cache-noise", 0));
    let noise = Matrix::random_normal(cfg.image_len(), cfg.latent_channels, 1.0, &mut rng);
    cache_with_noise(latent, model, steps, layers, seed, prompt, |_| noise.clone())
}

/// Like [`cache_reference_features`] but with caller-chosen noise per step
/// index. The standard algorithm uses the same draw for every `t`.
pub fn cache_with_noise(
    latent: &Matrix,
    model: &ToyDit,
    steps: usize,
    layers: &LayerSet,
    seed: u64,
    prompt: CachePrompt,
    mut noise_for: impl FnMut(usize) -> Matrix,
) -> Result<RefFeatureCache> {
    let cfg = model.config();
    if steps == 0 {
        return Err(Error::validation("cache needs at least one step"));
    }
    if latent.shape() != (cfg.image_len(), cfg.latent_channels) {
        return Err(Error::validation(format!(
            "latent is {:?}, model grid needs {:?}",
            latent.shape(),
            (cfg.image_len(), cfg.latent_channels)
        )));
    }
    layers.validate(cfg.layers)?;
    let text = match prompt {
        CachePrompt::Empty => model.empty_prompt(),
        CachePrompt::Seeded(s) => model.prompt_tokens(s),
    };
    let positions = StreamPositions::new(cfg.grid, cfg.text_len, ShiftMode::Identity)?;
    let vanilla = SharingConfig::vanilla();
    let wiring = Wiring {
        sharing: &vanilla,
        positions: &positions,
        reference: None,
        capture_attention: false,
    };
    let mut entries = vec![BTreeMap::new(); steps + 1];
    for t in (0..=steps).rev() {
        let x = interpolate_noisy_latent(latent, &noise_for(t), t, steps)?;
        let out = model.forward(&x, &text, t as f32 / steps as f32, &wiring)?;
        for (l, b) in out.bundles.into_iter().enumerate() {
            if !layers.contains(l) {
                continue;
            }
            if !b.is_finite() {
                return Err(Error::validation(format!("non-finite features at t={t}, layer {l}")));
            }
            entries[t].insert(l, b);
        }
    }
    Ok(RefFeatureCache {
        steps,
        layers: layers.clone(),
        seed,
        prompt,
        entries,
    })
}

fn entry_name(t: usize, layer: usize) -> String {
    format!("t{t:04}_l{layer:03}.satn")
}

impl RefFeatureCache {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn layers(&self) -> &LayerSet {
        &self.layers
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.iter().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, t: usize, layer: usize) -> Option<&QkvBundle> {
        self.entries.get(t)?.get(&layer)
    }

    /// All layer bundles at step index `t`.
    pub fn at(&self, t: usize) -> Result<&BTreeMap<usize, QkvBundle>> {
        self.entries
            .get(t)
            .ok_or_else(|| Error::config(format!("cache has no step index {t}")))
    }

    /// SHA-256 over every bundle in `(t, layer)` order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (t, layers) in self.entries.iter().enumerate() {
            for (l, b) in layers {
                h.update((t as u64).to_le_bytes());
                h.update((*l as u64).to_le_bytes());
                h.update(b.to_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes bundle files, then the manifest.
    pub fn save(&self, dir: &Path, model: &ModelConfig) -> Result<CacheManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        let mut dims = (0, 0, 0);
        for (t, layers) in self.entries.iter().enumerate() {
            for (l, b) in layers {
                let name = entry_name(t, *l);
                let path = dir.join(&name);
                write_file(&path, &b.to_tensor())?;
                files.insert(name, hex::encode(Sha256::digest(b.to_bytes())));
                dims = (b.text_len(), b.image_len(), b.width());
            }
        }
        let manifest = CacheManifest {
            steps: self.steps,
            layers: self.layers.to_string(),
            seed: self.seed,
            prompt: self.prompt,
            text_len: dims.0,
            image_len: dims.1,
            width: dims.2,
            model: model.clone(),
            files,
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<(Self, CacheManifest)> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CacheManifest = serde_json::from_str(&text)?;
        let layers: LayerSet = manifest.layers.parse()?;
        let mut entries = vec![BTreeMap::new(); manifest.steps + 1];
        for (t, slot) in entries.iter_mut().enumerate() {
            for l in layers.iter() {
                let name = entry_name(t, l);
                let bundle = QkvBundle::from_tensor(read_file(&dir.join(&name))?, manifest.text_len)?;
                let digest = hex::encode(Sha256::digest(bundle.to_bytes()));
                if manifest.files.get(&name) != Some(&digest) {
                    return Err(Error::Format(format!("{name} does not match its manifest checksum")));
                }
                if bundle.image_len() != manifest.image_len || bundle.width() != manifest.width {
                    return Err(Error::Format(format!("{name} does not match manifest shapes")));
                }
                slot.insert(l, bundle);
            }
        }
        let cache = Self {
            steps: manifest.steps,
            layers,
            seed: manifest.seed,
            prompt: manifest.prompt,
            entries,
        };
        Ok((cache, manifest))
    }
}
