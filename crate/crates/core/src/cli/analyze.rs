use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use super::generate::{load_cache, RunManifest};
use super::{write_atomically, write_json, OutputFiles};
use crate::analysis::{collision_experiment, pairwise_cosine, reference_profile, LocalityProfile};
use crate::config::{RunConfig, ShiftSpec};
use crate::ditsim::{generate, init_model, GenerateSpec, ReferenceInput};
use crate::error::{Error, Result};
use crate::sharing::{LayerRole, SharingMode};
use crate::tensor::read_file;

pub const SUMMARY: &str = "summary.json";

#[derive(Debug, Serialize)]
struct ModeMeans {
    dist0: f64,
    dist0_fraction: f64,
    reference_mass: f64,
}

#[derive(Debug, Serialize)]
struct CollisionReport {
    trials: usize,
    seed: u64,
    shift_offset: u32,
    identity: ModeMeans,
    shifted: ModeMeans,
    identity_wins: usize,
    ties: usize,
    sign_test_p: f64,
    shifted_spread_all: bool,
}

#[derive(Debug, Serialize)]
struct RunProfiles {
    step: usize,
    layer: usize,
    query: (usize, usize),
    identity_total: f64,
    shifted_total: f64,
}

#[derive(Debug, Serialize)]
struct AnalysisSummary {
    config: RunConfig,
    collision: CollisionReport,
    run_profiles: Option<RunProfiles>,
    pairs_mean_cosine: Option<f64>,
}

fn profile_csv(mass: &[f64]) -> String {
    let mut out = String::from("distance,mass\n");
    for (d, m) in mass.iter().enumerate() {
        writeln!(out, "{d},{m:.9}").unwrap();
    }
    out
}

/// Profiles of target 1's centre image query at the middle step in the
/// first shared layer, once with colliding and once with shifted reference
/// positions. `None` for unshared runs.
fn run_profiles(cfg: &RunConfig) -> Result<Option<(RunProfiles, LocalityProfile, LocalityProfile)>> {
    if cfg.mode == SharingMode::Vanilla {
        return Ok(None);
    }
    let Some(layer) = cfg.resolved_layers().iter().next() else {
        return Ok(None);
    };
    let model = init_model(&cfg.model)?;
    let cache = load_cache(cfg)?;
    let step = cfg.sampler.steps / 2;
    let (h, w) = cfg.model.grid;
    let query = (h / 2, w / 2);
    let mut profiles = Vec::new();
    for shift in [ShiftSpec::Identity, ShiftSpec::Beside] {
        let mut sharing = cfg.sharing();
        sharing.shift = shift.resolve(cfg.model.grid);
        let reference = match &cache {
            Some(c) => ReferenceInput::Cached(c),
            None => ReferenceInput::Live,
        };
        let gen = generate(
            &model,
            &cfg.sampler,
            &sharing,
            reference,
            &GenerateSpec {
                targets: 1,
                seed: cfg.seed,
                capture_step: Some(step),
            },
        )?;
        let cap = gen.captured.expect("capture step within range");
        debug_assert_eq!(cap.roles[layer], LayerRole::Shared);
        profiles.push(reference_profile(
            &cap.layers[layer],
            cfg.mode,
            cfg.model.text_len,
            cfg.model.grid,
            query,
        )?);
    }
    let shifted = profiles.pop().unwrap();
    let identity = profiles.pop().unwrap();
    let meta = RunProfiles {
        step,
        layer,
        query,
        identity_total: identity.total(),
        shifted_total: shifted.total(),
    };
    Ok(Some((meta, identity, shifted)))
}

fn embedding_rows(path: &Path) -> Result<Vec<Vec<f32>>> {
    if !path.exists() {
        return Err(Error::validation(format!("embeddings file {} does not exist", path.display())));
    }
    let (dims, values) = read_file(path)?.into_f32()?;
    if dims.len() != 2 || dims[0] < 2 {
        return Err(Error::validation(format!(
            "embeddings {} have dims {dims:?}, expected at least 2 rows",
            path.display()
        )));
    }
    Ok(values.chunks(dims[1]).map(<[f32]>::to_vec).collect())
}

/// Collision experiment on the run's model config, run-level locality
/// profiles, and optional pairwise cosine of externally supplied embeddings.
pub fn analyze_run(run: &Path, trials: usize, seed: u64, embeddings: Option<&Path>, out: &Path) -> Result<()> {
    if !run.is_dir() {
        return Err(Error::validation(format!("run directory {} does not exist", run.display())));
    }
    if trials == 0 {
        return Err(Error::validation("trials must be at least 1"));
    }
    let mut cfg = RunManifest::load(run)?.config;
    if cfg.ref_cache.as_ref().is_some_and(|p| !p.exists()) {
        return Err(Error::validation("the run's reference cache has moved; cannot recompute profiles"));
    }
    let embeddings = embeddings.map(Path::to_path_buf).or(cfg.embeddings.take());
    let pairs = embeddings.as_deref().map(embedding_rows).transpose()?;

    let summary = collision_experiment(&cfg.model, trials, seed)?;
    let profiles = run_profiles(&cfg)?;
    let pairs = pairs.map(|rows| pairwise_cosine(&rows)).transpose()?;

    write_atomically(out, SUMMARY, |dir| {
        let mut files = OutputFiles::default();
        files.write(dir, "collision_identity.csv", profile_csv(&summary.mean_profile_identity).as_bytes())?;
        files.write(dir, "collision_shifted.csv", profile_csv(&summary.mean_profile_shifted).as_bytes())?;
        if let Some((_, id, sh)) = &profiles {
            files.write(dir, "profile_identity.csv", id.to_csv().as_bytes())?;
            files.write(dir, "profile_shifted.csv", sh.to_csv().as_bytes())?;
        }
        if let Some(p) = &pairs {
            files.write(dir, "pairs.csv", p.to_csv().as_bytes())?;
        }
        let report = AnalysisSummary {
            config: cfg.effective(),
            collision: CollisionReport {
                trials: summary.trials,
                seed: summary.seed,
                shift_offset: summary.shift_offset,
                identity: ModeMeans {
                    dist0: summary.mean_dist0_identity,
                    dist0_fraction: summary.mean_dist0_fraction_identity,
                    reference_mass: summary.mean_reference_mass_identity,
                },
                shifted: ModeMeans {
                    dist0: summary.mean_dist0_shifted,
                    dist0_fraction: summary.mean_dist0_fraction_shifted,
                    reference_mass: summary.mean_reference_mass_shifted,
                },
                identity_wins: summary.identity_wins,
                ties: summary.ties,
                sign_test_p: summary.sign_test_p,
                shifted_spread_all: summary.shifted_spread_all,
            },
            run_profiles: profiles.map(|(meta, _, _)| meta),
            pairs_mean_cosine: pairs.as_ref().map(|p| p.mean),
        };
        write_json(&dir.join(SUMMARY), &report)
    })
}
