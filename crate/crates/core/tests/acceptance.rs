//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use shared_attn::analysis::collision_experiment;
use shared_attn::cli::{generate_run, run_ablation, AblationGrid};
use shared_attn::config::RunConfig;
use shared_attn::ditsim::{init_model, rf_sample, ModelConfig, SamplerConfig};
use shared_attn::position::{build_positions, rotate_rows, Pos, ShiftMode, StreamPositions};
use shared_attn::refcache::{cache_reference_features, interpolate_noisy_latent, CachePrompt};
use shared_attn::sharing::{
    adain, attend, naive_share, reference_image_keys, selective_share, shared_attention,
    shared_key_positions, shared_mm_attention, AttentionLayout, LayerSet, QkvBundle, SharingConfig,
    SharingMode,
};
use shared_attn::tensor::{decode, encode, matmul_transposed, Matrix, Pcg32, TensorData};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))
}

fn rand_bundle(m: usize, n: usize, w: usize, rng: &mut Pcg32) -> QkvBundle {
    let mut g = |r| Matrix::random_normal(r, w, 1.0, rng);
    QkvBundle::new(g(m), g(m), g(m), g(n), g(n), g(n)).unwrap()
}

fn range(rng: &mut Pcg32, lo: usize, hi: usize) -> usize {
    lo + rng.next_below((hi - lo + 1) as u32) as usize
}

// Scalar reference implementations, all in f64.

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> Rows {
    (0..m.rows())
        .map(|r| m.row(r).iter().map(|&v| v as f64).collect())
        .collect()
}

fn o_stats(x: &Rows) -> (Vec<f64>, Vec<f64>) {
    let n = x.len() as f64;
    let c = x[0].len();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for j in 0..c {
        mean[j] = x.iter().map(|r| r[j]).sum::<f64>() / n;
        let var = x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
        std[j] = var.sqrt().max(1e-6);
    }
    (mean, std)
}

fn o_adain(x: &Rows, y: &Rows) -> Rows {
    let (mx, sx) = o_stats(x);
    let (my, sy) = o_stats(y);
    x.iter()
        .map(|r| {
            r.iter()
                .enumerate()
                .map(|(j, v)| (v - mx[j]) / sx[j] * sy[j] + my[j])
                .collect()
        })
        .collect()
}

fn o_rope(v: &[f64], pos: Pos, dk: usize) -> Vec<f64> {
    let row_ch = dk / 4 * 2;
    let mut out = v.to_vec();
    for head in out.chunks_mut(dk) {
        for (start, width, p) in [(0, row_ch, pos.0), (row_ch, dk - row_ch, pos.1)] {
            for k in 0..width / 2 {
                let theta = p as f64 * 10000f64.powf(-(2.0 * k as f64) / width as f64);
                let (a, b) = (head[start + 2 * k], head[start + 2 * k + 1]);
                head[start + 2 * k] = a * theta.cos() - b * theta.sin();
                head[start + 2 * k + 1] = a * theta.sin() + b * theta.cos();
            }
        }
    }
    out
}

fn o_attention(q: &Rows, k: &Rows, v: &Rows, qp: &[Pos], kp: &[Pos], heads: usize, dk: usize) -> Rows {
    let qr: Rows = q.iter().zip(qp).map(|(r, &p)| o_rope(r, p, dk)).collect();
    let kr: Rows = k.iter().zip(kp).map(|(r, &p)| o_rope(r, p, dk)).collect();
    let mut out = vec![vec![0.0; heads * dk]; q.len()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..q.len() {
            let logits: Vec<f64> = kr
                .iter()
                .map(|kj| cols.clone().map(|c| qr[i][c] * kj[c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, ej) in e.iter().enumerate() {
                for c in cols.clone() {
                    out[i][c] += ej / z * v[j][c];
                }
            }
        }
    }
    out
}

fn o_positions(m: usize, grid: (usize, usize), offset: u32) -> Vec<Pos> {
    let (h, w) = grid;
    let mut p = vec![(0, 0); m];
    for i in 0..h {
        for j in 0..w {
            p.push((i as u32, j as u32 + offset));
        }
    }
    p
}

fn cat(parts: &[&Rows]) -> Rows {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

#[allow(clippy::too_many_arguments)]
fn o_shared(
    tar: &QkvBundle,
    rf: &QkvBundle,
    mode: SharingMode,
    lambda: f64,
    grid: (usize, usize),
    offset: u32,
    heads: usize,
    dk: usize,
) -> Rows {
    let m = tar.text_len();
    let tp = o_positions(m, grid, 0);
    let rp = o_positions(m, grid, offset);
    let (tq, tk, tv) = (rows(&tar.q()), rows(&tar.k()), rows(&tar.v()));
    match mode {
        SharingMode::Vanilla => o_attention(&tq, &tk, &tv, &tp, &tp, heads, dk),
        SharingMode::Naive => {
            let (rq, rk, rv) = (rows(&rf.q()), rows(&rf.k()), rows(&rf.v()));
            let q = o_adain(&tq, &rq);
            let k = cat(&[&o_adain(&tk, &rk), &rk]);
            let v = cat(&[&tv, &rv]);
            let kp: Vec<Pos> = tp.iter().chain(&rp).copied().collect();
            o_attention(&q, &k, &v, &tp, &kp, heads, dk)
        }
        SharingMode::Selective => {
            let rki: Rows = rows(&rf.k_img)
                .into_iter()
                .map(|r| r.into_iter().map(|x| x * lambda).collect())
                .collect();
            let q = cat(&[&rows(&tar.q_txt), &o_adain(&rows(&tar.q_img), &rows(&rf.q_img))]);
            let k = cat(&[
                &rows(&tar.k_txt),
                &o_adain(&rows(&tar.k_img), &rows(&rf.k_img)),
                &rki,
            ]);
            let v = cat(&[&rows(&tar.v_txt), &rows(&tar.v_img), &rows(&rf.v_img)]);
            let kp: Vec<Pos> = tp.iter().chain(&rp[m..]).copied().collect();
            o_attention(&q, &k, &v, &tp, &kp, heads, dk)
        }
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        layers: 3,
        heads: 2,
        model_dim: 16,
        text_len: 2,
        grid: (3, 3),
        latent_channels: 2,
        seed: 5,
    }
}

// Criteria.

fn c1_shapes() -> Outcome {
    let start = Instant::now();
    let mut rng = Pcg32::new(101);
    for _ in 0..50 {
        let (m, n, dk) = (range(&mut rng, 1, 16), range(&mut rng, 1, 64), range(&mut rng, 1, 32));
        let (t, r) = (rand_bundle(m, n, dk, &mut rng), rand_bundle(m, n, dk, &mut rng));
        let nv = naive_share(&t, &r).map_err(|e| e.to_string())?;
        let sl = selective_share(&t, &r, 1.1).map_err(|e| e.to_string())?;
        let expect = [
            (nv.q.shape(), (m + n, dk)),
            (nv.k.shape(), (2 * (m + n), dk)),
            (nv.v.shape(), (2 * (m + n), dk)),
            (sl.q.shape(), (m + n, dk)),
            (sl.k.shape(), (m + 2 * n, dk)),
            (sl.v.shape(), (m + 2 * n, dk)),
        ];
        for (got, want) in expect {
            ensure(got == want, || format!("M={m} N={n} d_k={dk}: {got:?} != {want:?}"))?;
        }
    }
    within(start, Duration::from_secs(1))?;
    Ok("50 (M, N, d_k) triples".into())
}

fn c2_adain() -> Outcome {
    let mut rng = Pcg32::new(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (r1, r2, c) = (range(&mut rng, 2, 48), range(&mut rng, 2, 48), range(&mut rng, 1, 16));
        let sx = 0.2 + 2.0 * rng.next_f32();
        let sy = 0.2 + 3.0 * rng.next_f32();
        let shift = 4.0 * rng.next_f32() - 2.0;
        let x = Matrix::random_normal(r1, c, sx, &mut rng);
        let y = Matrix::random_normal(r2, c, sy, &mut rng).map(|v| v + shift);
        let out = adain(&x, &y).map_err(|e| e.to_string())?;
        let (mo, so) = o_stats(&rows(&out));
        let (my, sy) = o_stats(&rows(&y));
        for j in 0..c {
            worst = worst.max((mo[j] - my[j]).abs()).max((so[j] - sy[j]).abs());
        }
        let same = adain(&x, &x).map_err(|e| e.to_string())?;
        worst = worst.max(same.max_abs_diff(&x) as f64);
    }
    ensure(worst <= 1e-5, || format!("max deviation {worst:.3e}"))?;
    Ok(format!("100 pairs, max deviation {worst:.2e}"))
}

fn c3_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = Pcg32::new(303);
    let (mut cases, mut worst) = (0, 0.0f64);
    for mode in [SharingMode::Vanilla, SharingMode::Naive, SharingMode::Selective] {
        for shifted in [false, true] {
            for _ in 0..20 {
                let n = range(&mut rng, 1, 5);
                let m = range(&mut rng, 1, 12 - 2 * n);
                let divisors: Vec<usize> = (1..=n).filter(|d| n % d == 0).collect();
                let h = divisors[range(&mut rng, 0, divisors.len() - 1)];
                let grid = (h, n / h);
                let heads = range(&mut rng, 1, 2);
                let dk = 2 * range(&mut rng, 1, 4);
                let lambda = 0.8 + 0.4 * rng.next_f32();
                let shift = if shifted { ShiftMode::beside(grid) } else { ShiftMode::Identity };
                let tar = rand_bundle(m, n, heads * dk, &mut rng);
                let rf = rand_bundle(m, n, heads * dk, &mut rng);
                let cfg = SharingConfig {
                    mode,
                    lambda,
                    layers: LayerSet::empty(),
                    shift,
                };
                let positions = StreamPositions::new(grid, m, shift).map_err(|e| e.to_string())?;
                let layout = AttentionLayout::new(heads, dk).map_err(|e| e.to_string())?;
                let got = shared_mm_attention(&tar, Some(&rf), &cfg, &positions, &layout)
                    .map_err(|e| e.to_string())?;
                let offset = if shifted { grid.1 as u32 } else { 0 };
                let want = o_shared(&tar, &rf, mode, lambda as f64, grid, offset, heads, dk);
                for (i, row) in want.iter().enumerate() {
                    for (j, &v) in row.iter().enumerate() {
                        let d = (got.get(i, j) as f64 - v).abs();
                        worst = worst.max(d);
                        ensure(d <= 1e-5, || {
                            format!("{mode} shifted={shifted} M={m} grid={grid:?} heads={heads} d_k={dk}: diff {d:.3e}")
                        })?;
                    }
                }
                cases += 1;
            }
        }
    }
    within(start, Duration::from_secs(5))?;
    Ok(format!("{cases} cases over 3 modes x 2 shifts, max diff {worst:.2e}"))
}

fn c4_disjoint() -> Outcome {
    let mut grids = 0;
    for h in 1..=8 {
        for w in 1..=8 {
            let tar = build_positions((h, w), 1, ShiftMode::Identity).map_err(|e| e.to_string())?;
            let rf = build_positions((h, w), 1, ShiftMode::beside((h, w))).map_err(|e| e.to_string())?;
            let a: HashSet<Pos> = tar.image_entries().iter().copied().collect();
            let b: HashSet<Pos> = rf.image_entries().iter().copied().collect();
            ensure(a.len() == h * w && b.len() == h * w, || format!("{h}x{w}: duplicate ids"))?;
            ensure(a.is_disjoint(&b), || format!("{h}x{w}: coordinate sets overlap"))?;
            let same = build_positions((h, w), 1, ShiftMode::Identity).map_err(|e| e.to_string())?;
            ensure(same.image_entries() == tar.image_entries(), || "identity mode should collide".into())?;
            grids += 1;
        }
    }
    Ok(format!("{grids} grids"))
}

fn binomial_tail(wins: usize, n: usize) -> f64 {
    // P[X >= wins] for X ~ Bin(n, 1/2), summed in log space.
    let ln_fact = |k: usize| (1..=k).map(|i| (i as f64).ln()).sum::<f64>();
    (wins..=n)
        .map(|k| (ln_fact(n) - ln_fact(k) - ln_fact(n - k) - n as f64 * 2f64.ln()).exp())
        .sum()
}

fn c5_collision() -> Outcome {
    let start = Instant::now();
    let s = collision_experiment(&ModelConfig::default(), 200, 0).map_err(|e| e.to_string())?;
    ensure(s.per_trial.len() == 200, || "trial count".into())?;
    let id: Vec<f64> = s.per_trial.iter().map(|t| t.identity.mass[0]).collect();
    let sh: Vec<f64> = s.per_trial.iter().map(|t| t.shifted.mass[0]).collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (mi, ms) = (mean(&id), mean(&sh));
    ensure((mi - s.mean_dist0_identity).abs() < 1e-12, || "identity mean mismatch".into())?;
    ensure(mi > ms, || format!("identity mean {mi:.4} <= shifted {ms:.4}"))?;
    let wins = id.iter().zip(&sh).filter(|(a, b)| a > b).count();
    let ties = id.iter().zip(&sh).filter(|(a, b)| a == b).count();
    let p = binomial_tail(wins, 200 - ties);
    ensure((p - s.sign_test_p).abs() <= 1e-9 * p.max(1e-300) + 1e-300, || {
        format!("p-value {} vs oracle {p}", s.sign_test_p)
    })?;
    ensure(p < 0.01, || format!("sign test p = {p:.3e}"))?;
    let spread = s
        .per_trial
        .iter()
        .all(|t| t.shifted.mass[1..].iter().any(|&m| m > 0.0));
    ensure(spread, || "a shifted profile has no mass beyond distance 0".into())?;
    within(start, Duration::from_secs(30))?;
    Ok(format!(
        "dist-0 mass identity {mi:.4} > shifted {ms:.4}, {wins}/200 wins, p = {p:.2e}"
    ))
}

fn c6_key_scaling() -> Outcome {
    let lambdas = [0.9, 0.95, 1.0, 1.05, 1.1, 1.15];
    let mut rng = Pcg32::new(606);
    let (m, grid, heads, dk) = (3, (2, 3), 2, 4);
    let n = grid.0 * grid.1;
    let tar = rand_bundle(m, n, heads * dk, &mut rng);
    let rf = rand_bundle(m, n, heads * dk, &mut rng);
    let positions = StreamPositions::new(grid, m, ShiftMode::beside(grid)).map_err(|e| e.to_string())?;
    let layout = AttentionLayout::new(heads, dk).map_err(|e| e.to_string())?;
    let kpos = shared_key_positions(SharingMode::Selective, &positions);
    let keys = reference_image_keys(SharingMode::Selective, m, n).unwrap();
    let ref_logits = |lambda: f32| -> Matrix {
        let s = selective_share(&tar, &rf, lambda).unwrap();
        let q = rotate_rows(&s.q, positions.target.entries(), &layout.rope).unwrap();
        let k = rotate_rows(&s.k, &kpos, &layout.rope).unwrap();
        matmul_transposed(&q, &k).unwrap().slice_cols(keys.start, keys.end).unwrap()
    };
    let base = ref_logits(1.0);
    let mut worst = 0.0f32;
    for &l in &lambdas {
        let got = ref_logits(l);
        for (a, b) in got.data().iter().zip(base.data()) {
            let err = (a - l * b).abs() / (1.0 + b.abs());
            worst = worst.max(err);
        }
    }
    ensure(worst < 1e-5, || format!("relative deviation {worst:.3e}"))?;

    // All logits positive: positions at the origin, positive q and k.
    let (rows_q, width) = (4, 4);
    let pos = vec![(0u32, 0u32); 12];
    let pos_layout = AttentionLayout::new(1, width).unwrap();
    let positive = |r, rng: &mut Pcg32| Matrix::from_fn(r, width, |_, _| 0.1 + rng.next_f32());
    let q = positive(rows_q, &mut rng);
    let k_own = positive(8, &mut rng);
    let k_ref = positive(4, &mut rng);
    let v = Matrix::random_normal(12, width, 1.0, &mut rng);
    let mut masses = Vec::new();
    for &l in &lambdas {
        let k = Matrix::vstack(&[&k_own, &k_ref.scale(l)]).unwrap();
        let out = attend(&q, &k, &v, &pos[..rows_q], &pos, &pos_layout).map_err(|e| e.to_string())?;
        let w = &out.weights[0];
        let mass: f64 = (0..rows_q).map(|r| w.row(r)[8..].iter().map(|&x| x as f64).sum::<f64>()).sum();
        masses.push(mass / rows_q as f64);
    }
    ensure(masses.windows(2).all(|p| p[1] > p[0]), || format!("masses not increasing: {masses:?}"))?;
    Ok(format!(
        "linear to {worst:.1e}, mass {:.4} -> {:.4}",
        masses[0],
        masses[masses.len() - 1]
    ))
}

fn c7_text_isolation() -> Outcome {
    let mut rng = Pcg32::new(707);
    let (m, grid, heads, dk) = (3, (2, 2), 2, 4);
    let tar = rand_bundle(m, 4, heads * dk, &mut rng);
    let mut rf = rand_bundle(m, 4, heads * dk, &mut rng);
    rf.k_txt = rf.k_txt.map(|_| f32::NAN);
    rf.v_txt = rf.v_txt.map(|_| f32::NAN);
    let positions = StreamPositions::new(grid, m, ShiftMode::beside(grid)).unwrap();
    let layout = AttentionLayout::new(heads, dk).unwrap();
    let sel = selective_share(&tar, &rf, 1.1).map_err(|e| e.to_string())?;
    ensure(sel.q.is_finite() && sel.k.is_finite() && sel.v.is_finite(), || "selective Q/K/V contaminated".into())?;
    let cfg = SharingConfig::aligned(grid, LayerSet::empty());
    let out = shared_attention(&tar, Some(&rf), &cfg, &positions, &layout).map_err(|e| e.to_string())?;
    ensure(out.output.is_finite(), || "selective attention output contaminated".into())?;

    let nv = naive_share(&tar, &rf).map_err(|e| e.to_string())?;
    ensure(!nv.k.is_finite() && !nv.v.is_finite(), || "naive K/V should carry NaN".into())?;
    let naive_cfg = SharingConfig {
        mode: SharingMode::Naive,
        ..cfg
    };
    let out = shared_attention(&tar, Some(&rf), &naive_cfg, &positions, &layout);
    let propagated = match out {
        Ok(o) => !o.output.is_finite(),
        Err(_) => true,
    };
    ensure(propagated, || "naive attention output stayed finite".into())?;
    Ok("selective finite, naive contaminated".into())
}

fn c8_cache() -> Outcome {
    let cfg = small_model();
    let model = init_model(&cfg).unwrap();
    let mut rng = Pcg32::new(808);
    let latent = Matrix::random_normal(cfg.image_len(), cfg.latent_channels, 1.0, &mut rng);
    let noise = Matrix::random_normal(cfg.image_len(), cfg.latent_channels, 1.0, &mut rng);
    for steps in [1, 3, 7] {
        let at_t = interpolate_noisy_latent(&latent, &noise, steps, steps).unwrap();
        let at_0 = interpolate_noisy_latent(&latent, &noise, 0, steps).unwrap();
        let bits = |m: &Matrix| m.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        ensure(bits(&at_t) == bits(&noise), || format!("T={steps}: t=T is not the noise"))?;
        ensure(bits(&at_0) == bits(&latent), || format!("T={steps}: t=0 is not the latent"))?;
    }
    let mut checked = Vec::new();
    for (steps, layers) in [(3, LayerSet::range(1, 3)), (2, LayerSet::range(0, 3)), (4, LayerSet::range(2, 3))] {
        let cache = cache_reference_features(&latent, &model, steps, &layers, 9, CachePrompt::Empty)
            .map_err(|e| e.to_string())?;
        let want = (steps + 1) * layers.len();
        ensure(cache.len() == want, || format!("T={steps}: {} entries, want {want}", cache.len()))?;
        checked.push(format!("T={steps}:{want}"));
    }
    Ok(format!("endpoints exact, cardinality {}", checked.join(" ")))
}

fn c9_sampler() -> Outcome {
    let mut rng = Pcg32::new(909);
    let x0 = Matrix::random_normal(6, 3, 1.0, &mut rng);
    let x1 = Matrix::random_normal(6, 3, 1.0, &mut rng);
    let mut worst = 0.0f32;
    for steps in [1usize, 5, 30] {
        // Velocity field whose flow lines are straight segments into x0.
        let mut field = |x: &Matrix, t: f32, _: usize| x.sub(&x0).map(|d| d.scale(1.0 / t));
        let sampler = SamplerConfig { steps, cfg_scale: 1.0 };
        let traj = rf_sample(&mut field, x1.clone(), &sampler).map_err(|e| e.to_string())?;
        for (k, state) in traj.states.iter().enumerate() {
            let t = 1.0 - k as f64 / steps as f64;
            let want = Matrix::from_fn(6, 3, |r, c| {
                (t * x1.get(r, c) as f64 + (1.0 - t) * x0.get(r, c) as f64) as f32
            });
            worst = worst.max(state.max_abs_diff(&want));
        }
    }
    ensure(worst <= 1e-4, || format!("max error {worst:.3e}"))?;
    Ok(format!("T in {{1, 5, 30}}, max error {worst:.2e}"))
}

fn dir_bytes(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn c10_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig {
        model: small_model(),
        seed: 7,
        ..RunConfig::default()
    };
    cfg.sampler.steps = 5;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    generate_run(&cfg, &a).map_err(|e| e.to_string())?;
    generate_run(&cfg, &b).map_err(|e| e.to_string())?;
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    ensure(fa.len() >= 5, || format!("only {} files written", fa.len()))?;
    ensure(fa == fb, || "runs differ".into())?;

    let mut rng = Pcg32::new(1010);
    for _ in 0..50 {
        let dims: Vec<usize> = (0..range(&mut rng, 0, 4)).map(|_| range(&mut rng, 1, 5)).collect();
        let len = dims.iter().product();
        let values: Vec<f32> = (0..len).map(|_| f32::from_bits(rng.next_u32())).collect();
        let t = TensorData::F32 { dims: dims.clone(), values: values.clone() };
        let bytes = encode(&t).map_err(|e| e.to_string())?;
        let (d, v) = decode(&bytes).unwrap().into_f32().unwrap();
        ensure(d == dims, || "dims changed".into())?;
        ensure(v.iter().map(|x| x.to_bits()).eq(values.iter().map(|x| x.to_bits())), || "bits changed".into())?;
        ensure(encode(&decode(&bytes).unwrap()).unwrap() == bytes, || "re-encode differs".into())?;
    }
    Ok(format!("{} identical files; 50 random tensors round-trip", fa.len()))
}

fn c11_ablation() -> Outcome {
    let mut cfg = RunConfig {
        model: ModelConfig {
            layers: 6,
            ..small_model()
        },
        targets: 2,
        ..RunConfig::default()
    };
    cfg.sampler.steps = 4;
    let grid = AblationGrid::default();
    let report = run_ablation(&cfg, &grid).map_err(|e| e.to_string())?;
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    ensure(lines.len() == 19, || format!("{} csv lines", lines.len()))?;
    let header: Vec<&str> = lines[0].split(',').collect();
    let mut cells = HashSet::new();
    for line in &lines[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        ensure(fields.len() == header.len(), || format!("ragged row {line}"))?;
        for f in &fields[3..] {
            let v: f64 = f.parse().map_err(|_| format!("bad number {f}"))?;
            ensure(v.is_finite(), || format!("non-finite metric in {line}"))?;
        }
        cells.insert((fields[0].to_string(), fields[1].to_string()));
    }
    let lambdas: HashSet<_> = cells.iter().map(|c| c.0.clone()).collect();
    let masks: HashSet<_> = cells.iter().map(|c| c.1.clone()).collect();
    ensure(cells.len() == 18 && lambdas.len() == 6 && masks.len() == 3, || "grid incomplete".into())?;
    ensure(
        masks == ["100", "010", "001"].iter().map(|s| s.to_string()).collect(),
        || format!("masks {masks:?}"),
    )?;
    let empty = AblationGrid::parse("", "100").unwrap_err();
    ensure(empty.is_validation(), || "empty grid accepted".into())?;
    Ok(format!("6 lambdas x 3 masks, {} columns", header.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("shape contracts", c1_shapes),
        ("adain correctness", c2_adain),
        ("attention oracle equivalence", c3_oracle),
        ("shifted position disjointness", c4_disjoint),
        ("collision experiment", c5_collision),
        ("key-scaling linearity", c6_key_scaling),
        ("text isolation", c7_text_isolation),
        ("cache endpoints", c8_cache),
        ("sampler sanity", c9_sampler),
        ("determinism", c10_determinism),
        ("ablation harness", c11_ablation),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(msg)
        });
        let took = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail} ({took:.2}s)", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {detail} ({took:.2}s)", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
