use proptest::prelude::*;
use shared_attn::position::{
    build_positions, rope_rotate, rotate_rows, PositionTable, RopeParams, ShiftMode, StreamPositions,
};
use shared_attn::tensor::{Matrix, Pcg32};

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[test]
fn shifted_grid_sits_beside_target() {
    let t = build_positions((2, 2), 1, ShiftMode::Shifted { offset: 2 }).unwrap();
    assert_eq!(t.image_entries(), &[(0, 2), (0, 3), (1, 2), (1, 3)]);
    let s = StreamPositions::new((3, 4), 2, ShiftMode::beside((3, 4))).unwrap();
    assert_eq!(s.target.text_entries(), s.reference.text_entries());
    assert_eq!(s.reference.image_entries()[0], (0, 4));
}

#[test]
fn table_tensor_roundtrip() {
    let t = build_positions((3, 2), 2, ShiftMode::beside((3, 2))).unwrap();
    let back = PositionTable::from_tensor(t.to_tensor(), (3, 2), 2).unwrap();
    assert_eq!(back.entries(), t.entries());
    assert!(PositionTable::from_tensor(t.to_tensor(), (2, 2), 2).is_err());
}

#[test]
fn origin_is_identity() {
    let p = RopeParams::new(8).unwrap();
    let v = Matrix::random_normal(3, 16, 1.0, &mut Pcg32::new(1));
    assert_eq!(rotate_rows(&v, &[(0, 0); 3], &p).unwrap(), v);
}

#[test]
fn rotation_depends_on_offset() {
    let p = RopeParams::new(8).unwrap();
    let mut rng = Pcg32::new(2);
    let q = Matrix::random_normal(1, 8, 1.0, &mut rng);
    let k = Matrix::random_normal(1, 8, 1.0, &mut rng);
    let logit = |a, b| {
        let qr = rotate_rows(&q, &[a], &p).unwrap();
        let kr = rotate_rows(&k, &[b], &p).unwrap();
        dot(qr.row(0), kr.row(0))
    };
    // Column offsets and row offsets both change the logit.
    assert!((logit((0, 0), (0, 3)) - logit((0, 0), (0, 0))).abs() > 1e-3);
    assert!((logit((0, 0), (3, 0)) - logit((0, 0), (0, 0))).abs() > 1e-3);
}

#[test]
fn odd_half_width_splits_unevenly() {
    let p = RopeParams::new(6).unwrap();
    assert_eq!((p.row_channels, p.col_channels()), (2, 4));
    assert!(RopeParams::new(5).is_err());
}

#[test]
fn rope_table_matches_rows() {
    let p = RopeParams::new(4).unwrap();
    let t = build_positions((2, 2), 1, ShiftMode::Identity).unwrap();
    let v = Matrix::random_normal(5, 4, 1.0, &mut Pcg32::new(3));
    assert_eq!(rope_rotate(&v, &t, &p).unwrap(), rotate_rows(&v, t.entries(), &p).unwrap());
    assert!(rope_rotate(&Matrix::zeros(4, 4), &t, &p).is_err());
}

proptest! {
    #[test]
    fn disjoint_for_any_grid(h in 1usize..=16, w in 1usize..=16) {
        let a = build_positions((h, w), 1, ShiftMode::Identity).unwrap();
        let b = build_positions((h, w), 1, ShiftMode::beside((h, w))).unwrap();
        for p in b.image_entries() {
            prop_assert!(!a.image_entries().contains(p));
        }
    }

    #[test]
    fn norm_preserved(pi in 0u32..64, pj in 0u32..64, seed: u64, half in 1usize..8) {
        let d = 2 * half;
        let p = RopeParams::new(d).unwrap();
        let v = Matrix::random_normal(1, 2 * d, 1.0, &mut Pcg32::new(seed));
        let r = rotate_rows(&v, &[(pi, pj)], &p).unwrap();
        prop_assert!((dot(r.row(0), r.row(0)).sqrt() - dot(v.row(0), v.row(0)).sqrt()).abs() < 1e-5);
    }

    #[test]
    fn shared_position_preserves_dot(pi in 0u32..64, pj in 0u32..64, seed: u64) {
        let p = RopeParams::new(8).unwrap();
        let mut rng = Pcg32::new(seed);
        let q = Matrix::random_normal(1, 8, 1.0, &mut rng);
        let k = Matrix::random_normal(1, 8, 1.0, &mut rng);
        let qr = rotate_rows(&q, &[(pi, pj)], &p).unwrap();
        let kr = rotate_rows(&k, &[(pi, pj)], &p).unwrap();
        prop_assert!((dot(qr.row(0), kr.row(0)) - dot(q.row(0), k.row(0))).abs() < 1e-5);
    }

    #[test]
    fn logits_depend_only_on_offset(
        a in (0u32..20, 0u32..20),
        b in (0u32..20, 0u32..20),
        shift in (0u32..20, 0u32..20),
        seed: u64,
    ) {
        let p = RopeParams::new(8).unwrap();
        let mut rng = Pcg32::new(seed);
        let q = Matrix::random_normal(1, 8, 1.0, &mut rng);
        let k = Matrix::random_normal(1, 8, 1.0, &mut rng);
        let logit = |x: (u32, u32), y: (u32, u32)| {
            let qr = rotate_rows(&q, &[x], &p).unwrap();
            let kr = rotate_rows(&k, &[y], &p).unwrap();
            dot(qr.row(0), kr.row(0))
        };
        let moved = logit((a.0 + shift.0, a.1 + shift.1), (b.0 + shift.0, b.1 + shift.1));
        prop_assert!((logit(a, b) - moved).abs() < 1e-4);
    }
}
