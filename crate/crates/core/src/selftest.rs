//! Fast built-in invariant checks, run by `shared-attn selftest`.

use crate::ditsim::{init_model, rf_sample, ModelConfig, SamplerConfig};
use crate::error::Result;
use crate::position::{build_positions, rotate_rows, ShiftMode};
use crate::refcache::{cache_reference_features, interpolate_noisy_latent, CachePrompt};
use crate::sharing::{adain, naive_share, selective_share, AttentionLayout, LayerSet, QkvBundle};
use crate::tensor::{channel_stats, decode, encode, matmul_transposed, row_softmax, Matrix, Pcg32, TensorData};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn() -> Result<(bool, String)>;

const CHECKS: &[(&str, Check)] = &[
    ("sharing shapes", sharing_shapes),
    ("adain statistics", adain_statistics),
    ("softmax rows", softmax_rows),
    ("rope relative", rope_relative),
    ("shift disjoint", shift_disjoint),
    ("text isolation", text_isolation),
    ("key scaling", key_scaling),
    ("cache endpoints", cache_endpoints),
    ("sampler line", sampler_line),
    ("format roundtrip", format_roundtrip),
];

pub fn run_all() -> Vec<CheckResult> {
    CHECKS
        .iter()
        .map(|(name, check)| {
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            CheckResult { name, passed, detail }
        })
        .collect()
}

fn bundle(m: usize, n: usize, w: usize, rng: &mut Pcg32) -> Result<QkvBundle> {
    let mut g = |r| Matrix::random_normal(r, w, 1.0, rng);
    QkvBundle::new(g(m), g(m), g(m), g(n), g(n), g(n))
}

fn sharing_shapes() -> Result<(bool, String)> {
    let mut rng = Pcg32::new(1);
    for _ in 0..20 {
        let m = 1 + rng.next_below(6) as usize;
        let n = 2 + rng.next_below(10) as usize;
        let w = 2 * (1 + rng.next_below(8) as usize);
        let (t, r) = (bundle(m, n, w, &mut rng)?, bundle(m, n, w, &mut rng)?);
        let naive = naive_share(&t, &r)?;
        let sel = selective_share(&t, &r, 1.1)?;
        if naive.k.rows() != 2 * (m + n) || naive.v.rows() != 2 * (m + n) || sel.k.rows() != m + 2 * n {
            return Ok((false, format!("bad rows at M={m} N={n}")));
        }
    }
    Ok((true, "20 random shapes".into()))
}

fn adain_statistics() -> Result<(bool, String)> {
    let mut rng = Pcg32::new(2);
    let x = Matrix::random_normal(16, 6, 1.0, &mut rng);
    let y = Matrix::random_normal(16, 6, 3.0, &mut rng).map(|v| v + 2.0);
    let (out, sy) = (channel_stats(&adain(&x, &y)?)?, channel_stats(&y)?);
    let err = out
        .mean
        .iter()
        .zip(&sy.mean)
        .chain(out.std.iter().zip(&sy.std))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    let self_err = adain(&x, &x)?.max_abs_diff(&x);
    Ok((err < 1e-5 && self_err < 1e-5, format!("stat err {err:.2e}, self err {self_err:.2e}")))
}

fn softmax_rows() -> Result<(bool, String)> {
    let mut rng = Pcg32::new(3);
    let a = Matrix::random_normal(8, 13, 10.0, &mut rng);
    let p = row_softmax(&a, 1.0)?;
    let worst = (0..8)
        .map(|r| (p.row(r).iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    Ok((worst < 1e-5, format!("max |sum-1| {worst:.2e}")))
}

fn rope_relative() -> Result<(bool, String)> {
    let layout = AttentionLayout::new(1, 8)?;
    let mut rng = Pcg32::new(4);
    let q = Matrix::random_normal(1, 8, 1.0, &mut rng);
    let k = Matrix::random_normal(1, 8, 1.0, &mut rng);
    let logit = |pq: (u32, u32), pk: (u32, u32)| -> Result<f32> {
        let a = rotate_rows(&q, &[pq], &layout.rope)?;
        let b = rotate_rows(&k, &[pk], &layout.rope)?;
        Ok(matmul_transposed(&a, &b)?.get(0, 0))
    };
    let base = logit((1, 2), (3, 5))?;
    let moved = logit((4, 9), (6, 12))?;
    let err = (base - moved).abs();
    Ok((err < 1e-4, format!("translation err {err:.2e}")))
}

fn shift_disjoint() -> Result<(bool, String)> {
    for h in 1..=8 {
        for w in 1..=8 {
            let tar = build_positions((h, w), 1, ShiftMode::Identity)?;
            let r = build_positions((h, w), 1, ShiftMode::beside((h, w)))?;
            let set: std::collections::HashSet<_> = tar.image_entries().iter().collect();
            if r.image_entries().iter().any(|p| set.contains(p)) {
                return Ok((false, format!("overlap at {h}x{w}")));
            }
        }
    }
    Ok((true, "all grids up to 8x8".into()))
}

fn text_isolation() -> Result<(bool, String)> {
    let mut rng = Pcg32::new(5);
    let t = bundle(3, 6, 4, &mut rng)?;
    let mut r = bundle(3, 6, 4, &mut rng)?;
    r.k_txt = r.k_txt.map(|_| f32::NAN);
    r.v_txt = r.v_txt.map(|_| f32::NAN);
    let sel = selective_share(&t, &r, 1.1)?;
    let naive = naive_share(&t, &r)?;
    let ok = sel.k.is_finite() && sel.v.is_finite() && !naive.k.is_finite() && !naive.v.is_finite();
    Ok((ok, "reference text NaN sentinels".into()))
}

fn key_scaling() -> Result<(bool, String)> {
    let mut rng = Pcg32::new(6);
    let t = bundle(2, 4, 4, &mut rng)?;
    let r = bundle(2, 4, 4, &mut rng)?;
    let keys = |l| -> Result<Matrix> {
        let s = selective_share(&t, &r, l)?;
        let logits = matmul_transposed(&s.q, &s.k)?;
        logits.slice_cols(6, 10)
    };
    let one = keys(1.0)?;
    let mut worst = 0.0f32;
    for l in [0.9, 0.95, 1.0, 1.05, 1.1, 1.15] {
        let diff = keys(l)?.max_abs_diff(&one.scale(l));
        worst = worst.max(diff);
    }
    Ok((worst < 1e-5, format!("max deviation {worst:.2e}")))
}

fn cache_endpoints() -> Result<(bool, String)> {
    let cfg = ModelConfig {
        layers: 3,
        heads: 2,
        model_dim: 16,
        grid: (3, 3),
        ..ModelConfig::default()
    };
    let mut rng = Pcg32::new(7);
    let latent = Matrix::random_normal(9, cfg.latent_channels, 1.0, &mut rng);
    let noise = Matrix::random_normal(9, cfg.latent_channels, 1.0, &mut rng);
    let exact = interpolate_noisy_latent(&latent, &noise, 3, 3)? == noise
        && interpolate_noisy_latent(&latent, &noise, 0, 3)? == latent;
    let model = init_model(&cfg)?;
    let layers = LayerSet::range(1, 3);
    let cache = cache_reference_features(&latent, &model, 3, &layers, 0, CachePrompt::Empty)?;
    Ok((exact && cache.len() == 8, format!("{} entries", cache.len())))
}

fn sampler_line() -> Result<(bool, String)> {
    let x1 = Matrix::from_fn(3, 2, |r, c| (r * 2 + c) as f32 - 2.5);
    let x0 = Matrix::from_fn(3, 2, |r, c| (r as f32) * 0.5 - c as f32);
    let v = x1.sub(&x0)?;
    let mut worst = 0.0f32;
    for steps in [1, 5, 30] {
        let traj = rf_sample(
            &mut |_: &Matrix, _: f32, _: usize| Ok(v.clone()),
            x1.clone(),
            &SamplerConfig { steps, cfg_scale: 1.0 },
        )?;
        worst = worst.max(traj.last().max_abs_diff(&x0));
    }
    Ok((worst < 1e-4, format!("endpoint err {worst:.2e}")))
}

fn format_roundtrip() -> Result<(bool, String)> {
    let values = vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, f32::MAX, f32::INFINITY];
    let t = TensorData::F32 { dims: vec![2, 3], values };
    let back = decode(&encode(&t)?)?;
    let same = match (&t, &back) {
        (TensorData::F32 { dims: a, values: x }, TensorData::F32 { dims: b, values: y }) => {
            a == b && x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits())
        }
        _ => false,
    };
    Ok((same, "bitwise".into()))
}
