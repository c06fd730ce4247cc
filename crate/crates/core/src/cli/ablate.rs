use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::{write_atomically, write_json, OutputFiles};
use crate::analysis::{pairwise_cosine, reference_profile, style_embedding};
use crate::config::RunConfig;
use crate::ditsim::{generate, init_model, GenerateSpec, Generation, ReferenceInput};
use crate::error::{Error, Result};
use crate::sharing::{LayerRole, LayerSet, SharingConfig, SharingMode};
use crate::tensor::Matrix;

use super::generate::load_cache;

pub const SUMMARY: &str = "summary.json";

/// λ values crossed with layer-group masks. A mask is one `0`/`1` digit per
/// layer group, e.g. `010` shares only the middle third.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationGrid {
    pub lambdas: Vec<f32>,
    pub masks: Vec<[bool; 3]>,
}

fn mask_string(mask: &[bool; 3]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

impl AblationGrid {
    pub fn parse(lambdas: &str, masks: &str) -> Result<Self> {
        let lambdas = lambdas
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f32>()
                    .ok()
                    .filter(|l| l.is_finite() && *l > 0.0)
                    .ok_or_else(|| Error::config(format!("lambda {s:?} must be a positive number")))
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = masks
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| {
                let bits: Vec<char> = s.chars().collect();
                if bits.len() != 3 || bits.iter().any(|c| *c != '0' && *c != '1') {
                    return Err(Error::config(format!("mask {s:?} must be three 0/1 digits")));
                }
                if !bits.contains(&'1') {
                    return Err(Error::config(format!("mask {s:?} selects no layers")));
                }
                Ok([bits[0] == '1', bits[1] == '1', bits[2] == '1'])
            })
            .collect::<Result<Vec<_>>>()?;
        let grid = Self { lambdas, masks };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambdas.is_empty() || self.masks.is_empty() {
            return Err(Error::validation("ablation grid is empty"));
        }
        Ok(())
    }

    pub fn layers_for(&self, mask: &[bool; 3], groups: [(usize, usize); 3]) -> LayerSet {
        groups
            .iter()
            .zip(mask)
            .filter(|(_, on)| **on)
            .fold(LayerSet::empty(), |acc, ((a, b), _)| acc.union(&LayerSet::range(*a, *b)))
    }
}

impl Default for AblationGrid {
    fn default() -> Self {
        Self::parse("0.9,0.95,1.0,1.05,1.1,1.15", "100,010,001").unwrap()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub lambda: f32,
    pub mask: String,
    pub layers: String,
    /// Mean attention mass image queries put on reference image keys.
    pub ref_mass: f64,
    /// Mean share of that mass sitting at the query's own coordinates.
    pub dist0_fraction: f64,
    /// Mean pairwise cosine of style embeddings across all final latents.
    pub style_consistency: f64,
    /// Mean cosine of each target's final latent to its unshared baseline.
    pub content_fidelity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub config: RunConfig,
    pub grid: AblationGrid,
    pub capture_step: usize,
    pub baseline_style_consistency: f64,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "lambda,mask,layers,ref_mass,dist0_fraction,style_consistency,content_fidelity\n",
        );
        for c in &self.cells {
            writeln!(
                out,
                "{},{},\"{}\",{:.9},{:.9},{:.9},{:.9}",
                c.lambda, c.mask, c.layers, c.ref_mass, c.dist0_fraction, c.style_consistency, c.content_fidelity
            )
            .unwrap();
        }
        out
    }
}

fn final_latents(gen: &Generation) -> Vec<&Matrix> {
    gen.reference.iter().chain(&gen.targets).map(|t| t.last()).collect()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let report = pairwise_cosine(&[a, b]).expect("two equal-length vectors");
    report.mean
}

fn style_consistency(gen: &Generation) -> Result<f64> {
    let emb = final_latents(gen)
        .into_iter()
        .map(style_embedding)
        .collect::<Result<Vec<_>>>()?;
    if emb.len() < 2 {
        return Ok(1.0);
    }
    Ok(pairwise_cosine(&emb)?.mean)
}

/// Runs an unshared baseline, then every (λ, mask) cell with the sharing
/// mode and shift from `cfg`. Attention statistics come from target 1's
/// conditional pass at the middle sampling step.
pub fn run_ablation(cfg: &RunConfig, grid: &AblationGrid) -> Result<AblationReport> {
    cfg.validate()?;
    grid.validate()?;
    if cfg.mode == SharingMode::Vanilla {
        return Err(Error::config("ablation needs a sharing mode other than vanilla"));
    }
    let model = init_model(&cfg.model)?;
    let cache = load_cache(cfg)?;
    let reference = || match &cache {
        Some(c) => ReferenceInput::Cached(c),
        None => ReferenceInput::Live,
    };
    let capture_step = cfg.sampler.steps / 2;
    let spec = GenerateSpec {
        targets: cfg.targets,
        seed: cfg.seed,
        capture_step: Some(capture_step),
    };
    let base = generate(&model, &cfg.sampler, &SharingConfig::vanilla(), reference(), &spec)?;

    let m = cfg.model.text_len;
    let n = cfg.model.image_len();
    let (h, w) = cfg.model.grid;
    let groups = cfg.model.layer_groups();
    let jobs: Vec<(&[bool; 3], f32)> = grid
        .masks
        .iter()
        .flat_map(|m| grid.lambdas.iter().map(move |&l| (m, l)))
        .collect();
    let cells = jobs
        .into_par_iter()
        .map(|(mask, lambda)| {
            let layers = grid.layers_for(mask, groups);
            let sharing = SharingConfig {
                mode: cfg.mode,
                lambda,
                layers: layers.clone(),
                shift: cfg.shift.resolve(cfg.model.grid),
            };
            let gen = generate(&model, &cfg.sampler, &sharing, reference(), &spec)?;
            let cap = gen.captured.as_ref().expect("capture step within range");

            let (mut mass, mut frac, mut count) = (0.0, 0.0, 0usize);
            for (weights, role) in cap.layers.iter().zip(&cap.roles) {
                if *role != LayerRole::Shared {
                    continue;
                }
                for q in 0..n {
                    let p = reference_profile(weights, cfg.mode, m, (h, w), (q / w, q % w))?;
                    let total = p.total();
                    mass += total;
                    if total > 0.0 {
                        frac += p.mass[0] / total;
                    }
                    count += 1;
                }
            }
            let count = count.max(1) as f64;
            let fidelity = gen
                .targets
                .iter()
                .zip(&base.targets)
                .map(|(a, b)| cosine(a.last().data(), b.last().data()))
                .sum::<f64>()
                / gen.targets.len() as f64;
            Ok(AblationCell {
                lambda,
                mask: mask_string(mask),
                layers: layers.to_string(),
                ref_mass: mass / count,
                dist0_fraction: frac / count,
                style_consistency: style_consistency(&gen)?,
                content_fidelity: fidelity,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        config: cfg.effective(),
        grid: grid.clone(),
        capture_step,
        baseline_style_consistency: style_consistency(&base)?,
        cells,
    })
}

pub fn write_report(report: &AblationReport, out: &Path) -> Result<()> {
    write_atomically(out, SUMMARY, |dir| {
        let mut files = OutputFiles::default();
        files.write(dir, "ablation.csv", report.to_csv().as_bytes())?;
        write_json(&dir.join(SUMMARY), report)
    })
}
