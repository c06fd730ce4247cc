//! Diagnostics: attention locality profiles, the positional-collision
//! experiment, and pairwise-cosine consistency metrics.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ditsim::ModelConfig;
use crate::error::{Error, Result};
use crate::position::{ShiftMode, StreamPositions};
use crate::sharing::{
    reference_image_keys, shared_attention, AttentionLayout, LayerSet, QkvBundle, SharingConfig,
    SharingMode,
};
use crate::tensor::{channel_stats, derive_seed, Matrix, Pcg32};

/// Attention mass on reference image keys bucketed by L1 grid distance
/// from the query's own coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalityProfile {
    pub query: (usize, usize),
    /// `mass[b]` is the summed weight of keys at distance `b`, for
    /// `b = 0 ..= (h-1)+(w-1)`.
    pub mass: Vec<f64>,
}

impl LocalityProfile {
    pub fn distances(&self) -> std::ops::Range<usize> {
        0..self.mass.len()
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }

    /// Buckets divided by their total (all zeros if the total is zero).
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total > 0.0 {
            self.mass.iter().map(|m| m / total).collect()
        } else {
            vec![0.0; self.mass.len()]
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("distance,mass\n");
        for (d, m) in self.mass.iter().enumerate() {
            writeln!(out, "{d},{m:.9}").unwrap();
        }
        out
    }
}

pub fn locality_profile(
    attn_row: &[f32],
    query: (usize, usize),
    grid: (usize, usize),
) -> Result<LocalityProfile> {
    let (h, w) = grid;
    if attn_row.len() != h * w {
        return Err(Error::shape(format!(
            "{} weights for a {h}x{w} grid",
            attn_row.len()
        )));
    }
    if query.0 >= h || query.1 >= w {
        return Err(Error::validation(format!("query {query:?} outside {h}x{w} grid")));
    }
    if let Some(bad) = attn_row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::validation(format!("attention weight {bad} is not a non-negative number")));
    }
    let mut mass = vec![0.0f64; h + w - 1];
    for (idx, &wgt) in attn_row.iter().enumerate() {
        let (i, j) = (idx / w, idx % w);
        mass[i.abs_diff(query.0) + j.abs_diff(query.1)] += wgt as f64;
    }
    Ok(LocalityProfile { query, mass })
}

/// Profile of one query row of a shared attention weight matrix.
pub fn reference_profile(
    weights: &Matrix,
    mode: SharingMode,
    text_len: usize,
    grid: (usize, usize),
    query: (usize, usize),
) -> Result<LocalityProfile> {
    let n = grid.0 * grid.1;
    let keys = reference_image_keys(mode, text_len, n)
        .ok_or_else(|| Error::config("vanilla attention has no reference keys"))?;
    if weights.cols() != keys.end || weights.rows() != text_len + n {
        return Err(Error::shape(format!(
            "weights {:?} do not match {mode} sharing with M={text_len}, N={n}",
            weights.shape()
        )));
    }
    let row = text_len + query.0 * grid.1 + query.1;
    locality_profile(&weights.row(row)[keys], query, grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionTrial {
    pub query: (usize, usize),
    pub identity: LocalityProfile,
    pub shifted: LocalityProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionSummary {
    pub trials: usize,
    pub seed: u64,
    pub shift_offset: u32,
    /// Mean weight on the reference key at the query's own coordinates.
    pub mean_dist0_identity: f64,
    pub mean_dist0_shifted: f64,
    /// Same, as a fraction of the query's total reference-key mass.
    pub mean_dist0_fraction_identity: f64,
    pub mean_dist0_fraction_shifted: f64,
    /// Mean total weight on reference image keys.
    pub mean_reference_mass_identity: f64,
    pub mean_reference_mass_shifted: f64,
    pub mean_profile_identity: Vec<f64>,
    pub mean_profile_shifted: Vec<f64>,
    /// Trials where identity distance-0 mass exceeds shifted.
    pub identity_wins: usize,
    pub ties: usize,
    /// One-sided sign test p-value for identity > shifted.
    pub sign_test_p: f64,
    /// Every shifted profile has positive mass at some distance >= 1.
    pub shifted_spread_all: bool,
    pub per_trial: Vec<CollisionTrial>,
}

/// Reference and target with identical content, attended once with
/// colliding positions and once with the reference shifted beside the
/// target. Tokens use `k = q` so each query matches its own key best; any
/// extra pull toward the reference token at the same coordinates then
/// comes from positions alone.
pub fn collision_experiment(cfg: &ModelConfig, trials: usize, seed: u64) -> Result<CollisionSummary> {
    cfg.validate()?;
    if trials == 0 {
        return Err(Error::validation("collision experiment needs at least one trial"));
    }
    let (m, n, dk) = (cfg.text_len, cfg.image_len(), cfg.head_dim());
    let grid = cfg.grid;
    let layout = AttentionLayout::new(1, dk)?;
    let shifted = ShiftMode::beside(grid);
    let pos_id = StreamPositions::new(grid, m, ShiftMode::Identity)?;
    let pos_sh = StreamPositions::new(grid, m, shifted)?;
    let sharing = |shift| SharingConfig {
        mode: SharingMode::Selective,
        lambda: 1.0,
        layers: LayerSet::range(0, 1),
        shift,
    };
    let (cfg_id, cfg_sh) = (sharing(ShiftMode::Identity), sharing(shifted));

    let per_trial: Vec<CollisionTrial> = (0..trials)
        .into_par_iter()
        .map(|trial| -> Result<CollisionTrial> {
            let mut rng = Pcg32::new(derive_seed(seed, "collision", trial as u64));
            let q_txt = Matrix::random_normal(m, dk, 1.0, &mut rng);
            let q_img = Matrix::random_normal(n, dk, 1.0, &mut rng);
            let v_txt = Matrix::random_normal(m, dk, 1.0, &mut rng);
            let v_img = Matrix::random_normal(n, dk, 1.0, &mut rng);
            let idx = rng.next_below(n as u32) as usize;
            let query = (idx / grid.1, idx % grid.1);
            let tar = QkvBundle::new(q_txt.clone(), q_txt, v_txt, q_img.clone(), q_img, v_img)?;
            let profile = |cfg: &SharingConfig, pos: &StreamPositions| -> Result<LocalityProfile> {
                let out = shared_attention(&tar, Some(&tar), cfg, pos, &layout)?;
                reference_profile(&out.weights[0], cfg.mode, m, grid, query)
            };
            Ok(CollisionTrial {
                query,
                identity: profile(&cfg_id, &pos_id)?,
                shifted: profile(&cfg_sh, &pos_sh)?,
            })
        })
        .collect::<Result<_>>()?;

    let mean = |f: &dyn Fn(&CollisionTrial) -> f64| per_trial.iter().map(f).sum::<f64>() / trials as f64;
    let mean_profile = |f: &dyn Fn(&CollisionTrial) -> &LocalityProfile| {
        let len = f(&per_trial[0]).mass.len();
        (0..len)
            .map(|d| per_trial.iter().map(|t| f(t).mass[d]).sum::<f64>() / trials as f64)
            .collect::<Vec<_>>()
    };
    let wins = per_trial
        .iter()
        .filter(|t| t.identity.mass[0] > t.shifted.mass[0])
        .count();
    let ties = per_trial
        .iter()
        .filter(|t| t.identity.mass[0] == t.shifted.mass[0])
        .count();
    Ok(CollisionSummary {
        trials,
        seed,
        shift_offset: grid.1 as u32,
        mean_dist0_identity: mean(&|t| t.identity.mass[0]),
        mean_dist0_shifted: mean(&|t| t.shifted.mass[0]),
        mean_dist0_fraction_identity: mean(&|t| t.identity.normalized()[0]),
        mean_dist0_fraction_shifted: mean(&|t| t.shifted.normalized()[0]),
        mean_reference_mass_identity: mean(&|t| t.identity.total()),
        mean_reference_mass_shifted: mean(&|t| t.shifted.total()),
        mean_profile_identity: mean_profile(&|t| &t.identity),
        mean_profile_shifted: mean_profile(&|t| &t.shifted),
        identity_wins: wins,
        ties,
        sign_test_p: sign_test_p(wins, trials - ties),
        shifted_spread_all: per_trial
            .iter()
            .all(|t| t.shifted.mass[1..].iter().any(|&v| v > 0.0)),
        per_trial,
    })
}

/// `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    if wins > n {
        return 0.0;
    }
    let ln_half_n = n as f64 * 0.5f64.ln();
    // ln C(n, k) built up incrementally from ln C(n, 0) = 0.
    let mut ln_c = 0.0f64;
    let mut p = 0.0f64;
    for k in 0..=n {
        if k >= wins {
            p += (ln_c + ln_half_n).exp();
        }
        if k < n {
            ln_c += ((n - k) as f64).ln() - ((k + 1) as f64).ln();
        }
    }
    p.min(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `(i, j, cosine)` for every `i < j`.
    pub pairs: Vec<(usize, usize, f64)>,
    pub mean: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,cosine\n");
        for (i, j, c) in &self.pairs {
            writeln!(out, "{i},{j},{c:.9}").unwrap();
        }
        out
    }
}

pub fn pairwise_cosine<V: AsRef<[f32]>>(embeddings: &[V]) -> Result<MetricReport> {
    if embeddings.len() < 2 {
        return Err(Error::validation("pairwise cosine needs at least two vectors"));
    }
    let dim = embeddings[0].as_ref().len();
    let mut norms = Vec::with_capacity(embeddings.len());
    for (i, e) in embeddings.iter().enumerate() {
        let e = e.as_ref();
        if e.len() != dim {
            return Err(Error::shape(format!("embedding {i} has dim {}, expected {dim}", e.len())));
        }
        let norm = e.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::validation(format!("embedding {i} has zero or non-finite norm")));
        }
        norms.push(norm);
    }
    let mut pairs = Vec::new();
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            let dot: f64 = embeddings[i]
                .as_ref()
                .iter()
                .zip(embeddings[j].as_ref())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum();
            pairs.push((i, j, (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)));
        }
    }
    let count = pairs.len();
    let mean = pairs.iter().map(|p| p.2).sum::<f64>() / count as f64;
    Ok(MetricReport { pairs, mean, count })
}

/// Per-channel mean and standard deviation of a latent, concatenated: a
/// desk-scale style descriptor.
pub fn style_embedding(latent: &Matrix) -> Result<Vec<f32>> {
    let s = channel_stats(latent)?;
    Ok(s.mean.into_iter().chain(s.std).collect())
}
