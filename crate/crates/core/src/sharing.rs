//! Attention sharing between a reference stream and target streams.
//!
//! Three modes are supported:
//!
//! * `vanilla`: the target attends only to its own text and image tokens.
//! * `naive`: target queries and keys are AdaIN-aligned to the reference
//!   over the whole text+image sequence, and the full reference key/value
//!   sequence (text included) is appended. Keys/values have `2(M+N)` rows.
//! * `selective`: only image segments are aligned, and only reference
//!   *image* keys/values are appended, the keys scaled by `lambda`.
//!   Keys/values have `M+2N` rows and reference text never enters.
//!
//! Rotary positions are applied after the shared rows are assembled, so
//! AdaIN statistics are position-free. Reference image keys carry the
//! reference position table (shifted or not); everything else uses the
//! target table.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::position::{rotate_rows, Pos, RopeParams, ShiftMode, StreamPositions};
use crate::tensor::{
    channel_stats_f64, decode, encode, matmul, matmul_transposed, row_softmax, Matrix, TensorData,
};

/// Query/key/value projections of one stream at one layer, split into text
/// and image segments.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvBundle {
    pub q_txt: Matrix,
    pub k_txt: Matrix,
    pub v_txt: Matrix,
    pub q_img: Matrix,
    pub k_img: Matrix,
    pub v_img: Matrix,
}

impl QkvBundle {
    pub fn new(
        q_txt: Matrix,
        k_txt: Matrix,
        v_txt: Matrix,
        q_img: Matrix,
        k_img: Matrix,
        v_img: Matrix,
    ) -> Result<Self> {
        let b = Self {
            q_txt,
            k_txt,
            v_txt,
            q_img,
            k_img,
            v_img,
        };
        b.check_shapes()?;
        Ok(b)
    }

    /// Builds a bundle from full `(M+N)`-row q/k/v matrices, text rows first.
    pub fn from_sequences(q: &Matrix, k: &Matrix, v: &Matrix, text_len: usize) -> Result<Self> {
        let split = |m: &Matrix| -> Result<(Matrix, Matrix)> {
            Ok((m.slice_rows(0, text_len)?, m.slice_rows(text_len, m.rows())?))
        };
        let (q_txt, q_img) = split(q)?;
        let (k_txt, k_img) = split(k)?;
        let (v_txt, v_img) = split(v)?;
        Self::new(q_txt, k_txt, v_txt, q_img, k_img, v_img)
    }

    fn check_shapes(&self) -> Result<()> {
        let (m, w) = self.q_txt.shape();
        let n = self.q_img.rows();
        for (name, mat, rows) in [
            ("k_txt", &self.k_txt, m),
            ("v_txt", &self.v_txt, m),
            ("q_img", &self.q_img, n),
            ("k_img", &self.k_img, n),
            ("v_img", &self.v_img, n),
        ] {
            if mat.shape() != (rows, w) {
                return Err(Error::shape(format!(
                    "{name} is {:?}, expected {:?}",
                    mat.shape(),
                    (rows, w)
                )));
            }
        }
        if w == 0 || n == 0 {
            return Err(Error::shape("bundle needs image tokens and non-zero width"));
        }
        Ok(())
    }

    pub fn text_len(&self) -> usize {
        self.q_txt.rows()
    }

    pub fn image_len(&self) -> usize {
        self.q_img.rows()
    }

    pub fn width(&self) -> usize {
        self.q_txt.cols()
    }

    pub fn q(&self) -> Matrix {
        Matrix::vstack(&[&self.q_txt, &self.q_img]).expect("bundle shapes checked")
    }

    pub fn k(&self) -> Matrix {
        Matrix::vstack(&[&self.k_txt, &self.k_img]).expect("bundle shapes checked")
    }

    pub fn v(&self) -> Matrix {
        Matrix::vstack(&[&self.v_txt, &self.v_img]).expect("bundle shapes checked")
    }

    pub fn is_finite(&self) -> bool {
        [
            &self.q_txt,
            &self.k_txt,
            &self.v_txt,
            &self.q_img,
            &self.k_img,
            &self.v_img,
        ]
        .iter()
        .all(|m| m.is_finite())
    }

    fn same_dims(&self, other: &QkvBundle) -> Result<()> {
        let a = (self.text_len(), self.image_len(), self.width());
        let b = (other.text_len(), other.image_len(), other.width());
        if a != b {
            return Err(Error::shape(format!(
                "target (M, N, width) = {a:?} but reference = {b:?}"
            )));
        }
        Ok(())
    }

    /// `[3, M+N, width]` tensor holding q, k, v in that order, text rows first.
    pub fn to_tensor(&self) -> TensorData {
        let rows = self.text_len() + self.image_len();
        let mut values = Vec::with_capacity(3 * rows * self.width());
        for m in [self.q(), self.k(), self.v()] {
            values.extend_from_slice(m.data());
        }
        TensorData::F32 {
            dims: vec![3, rows, self.width()],
            values,
        }
    }

    pub fn from_tensor(tensor: TensorData, text_len: usize) -> Result<Self> {
        let (dims, values) = tensor.into_f32()?;
        if dims.len() != 3 || dims[0] != 3 || dims[1] <= text_len {
            return Err(Error::Format(format!(
                "bundle tensor dims {dims:?} invalid for {text_len} text tokens"
            )));
        }
        let (rows, width) = (dims[1], dims[2]);
        let mats: Vec<Matrix> = values
            .chunks_exact(rows * width)
            .map(|c| Matrix::new(rows, width, c.to_vec()))
            .collect::<Result<_>>()?;
        Self::from_sequences(&mats[0], &mats[1], &mats[2], text_len)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        encode(&self.to_tensor()).expect("bundle dims are consistent")
    }

    pub fn from_bytes(bytes: &[u8], text_len: usize) -> Result<Self> {
        Self::from_tensor(decode(bytes)?, text_len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingMode {
    Vanilla,
    Naive,
    Selective,
}

impl FromStr for SharingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "naive" => Ok(Self::Naive),
            "selective" => Ok(Self::Selective),
            other => Err(Error::config(format!(
                "unknown sharing mode {other:?} (vanilla|naive|selective)"
            ))),
        }
    }
}

impl fmt::Display for SharingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vanilla => "vanilla",
            Self::Naive => "naive",
            Self::Selective => "selective",
        })
    }
}

/// Set of layer indices where sharing is active.
///
/// Text form is a comma separated list of half-open ranges `a..b` or single
/// indices, e.g. `19..57` or `0..2,5`. `none` is the empty set.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct LayerSet(BTreeSet<usize>);

impl From<LayerSet> for String {
    fn from(set: LayerSet) -> String {
        set.to_string()
    }
}

impl TryFrom<String> for LayerSet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl LayerSet {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Half-open range `[start, end)`.
    pub fn range(start: usize, end: usize) -> Self {
        Self((start..end).collect())
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.0.contains(&layer)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn union(&self, other: &LayerSet) -> LayerSet {
        Self(self.0.union(&other.0).copied().collect())
    }

    pub fn validate(&self, layers: usize) -> Result<()> {
        match self.0.iter().next_back() {
            Some(&max) if max >= layers => Err(Error::validation(format!(
                "layer {max} outside model depth {layers}"
            ))),
            _ => Ok(()),
        }
    }
}

impl FromIterator<usize> for LayerSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl FromStr for LayerSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "none" {
            return Ok(Self::empty());
        }
        let bad = |part: &str| Error::config(format!("bad layer spec {part:?} in {s:?}"));
        let mut set = BTreeSet::new();
        for part in s.split(',').map(str::trim) {
            if let Some((a, b)) = part.split_once("..") {
                let a: usize = a.trim().parse().map_err(|_| bad(part))?;
                let b: usize = b.trim().parse().map_err(|_| bad(part))?;
                if a >= b {
                    return Err(bad(part));
                }
                set.extend(a..b);
            } else {
                set.insert(part.parse().map_err(|_| bad(part))?);
            }
        }
        Ok(Self(set))
    }
}

impl fmt::Display for LayerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &l in &self.0 {
            match runs.last_mut() {
                Some((_, end)) if *end == l => *end = l + 1,
                _ => runs.push((l, l + 1)),
            }
        }
        let parts: Vec<String> = runs.iter().map(|(a, b)| format!("{a}..{b}")).collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharingConfig {
    pub mode: SharingMode,
    pub lambda: f32,
    pub layers: LayerSet,
    pub shift: ShiftMode,
}

/// Reference key scale used when none is given.
pub const DEFAULT_LAMBDA: f32 = 1.1;

impl SharingConfig {
    pub fn vanilla() -> Self {
        Self {
            mode: SharingMode::Vanilla,
            lambda: 1.0,
            layers: LayerSet::empty(),
            shift: ShiftMode::Identity,
        }
    }

    /// Selective sharing with shifted reference positions.
    pub fn aligned(grid: (usize, usize), layers: LayerSet) -> Self {
        Self {
            mode: SharingMode::Selective,
            lambda: DEFAULT_LAMBDA,
            layers,
            shift: ShiftMode::beside(grid),
        }
    }

    pub fn validate(&self, model_layers: usize) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::validation(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        self.layers.validate(model_layers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerRole {
    Vanilla,
    Shared,
}

pub fn layer_policy(layer: usize, cfg: &SharingConfig) -> LayerRole {
    if cfg.mode != SharingMode::Vanilla && cfg.layers.contains(layer) {
        LayerRole::Shared
    } else {
        LayerRole::Vanilla
    }
}

/// `sigma(y) * (x - mu(x)) / sigma(x) + mu(y)`, per channel over rows.
///
/// Statistics are per column, so with several heads side by side each head
/// is normalised independently.
pub fn adain(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    if x.cols() != y.cols() {
        return Err(Error::shape(format!(
            "adain channel mismatch: {} vs {}",
            x.cols(),
            y.cols()
        )));
    }
    let (mx, sx) = channel_stats_f64(x)?;
    let (my, sy) = channel_stats_f64(y)?;
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (c, v) in out.row_mut(r).iter_mut().enumerate() {
            let z = (*v as f64 - mx[c]) / sx[c];
            *v = (sy[c] * z + my[c]) as f32;
        }
    }
    Ok(out)
}

/// Final query/key/value rows handed to attention.
#[derive(Clone, Debug, PartialEq)]
pub struct SharedQkv {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Full-sequence sharing: `Qf = AdaIN(Q_tar, Q_ref)`,
/// `Kf = [AdaIN(K_tar, K_ref); K_ref]`, `Vf = [V_tar; V_ref]`.
pub fn naive_share(tar: &QkvBundle, reference: &QkvBundle) -> Result<SharedQkv> {
    tar.same_dims(reference)?;
    let k_ref = reference.k();
    let q = adain(&tar.q(), &reference.q())?;
    let k_hat = adain(&tar.k(), &k_ref)?;
    let k = Matrix::vstack(&[&k_hat, &k_ref])?;
    let v = Matrix::vstack(&[&tar.v(), &reference.v()])?;
    Ok(SharedQkv { q, k, v })
}

/// Image-only sharing with scaled reference keys:
/// `Qf = [Q_txt; AdaIN(Q_img, Q_ref_img)]`,
/// `Kf = [K_txt; AdaIN(K_img, K_ref_img); lambda * K_ref_img]`,
/// `Vf = [V_txt; V_img; V_ref_img]`.
pub fn selective_share(tar: &QkvBundle, reference: &QkvBundle, lambda: f32) -> Result<SharedQkv> {
    tar.same_dims(reference)?;
    let k_ref = scale_ref_keys(&reference.k_img, lambda)?;
    let q_hat = adain(&tar.q_img, &reference.q_img)?;
    let k_hat = adain(&tar.k_img, &reference.k_img)?;
    Ok(SharedQkv {
        q: Matrix::vstack(&[&tar.q_txt, &q_hat])?,
        k: Matrix::vstack(&[&tar.k_txt, &k_hat, &k_ref])?,
        v: Matrix::vstack(&[&tar.v_txt, &tar.v_img, &reference.v_img])?,
    })
}

pub fn scale_ref_keys(k_ref_img: &Matrix, lambda: f32) -> Result<Matrix> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::validation(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    Ok(k_ref_img.scale(lambda))
}

/// Head count and rotary parameters shared by every attention call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionLayout {
    pub heads: usize,
    pub rope: RopeParams,
}

impl AttentionLayout {
    pub fn new(heads: usize, head_dim: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::validation("attention needs at least one head"));
        }
        Ok(Self {
            heads,
            rope: RopeParams::new(head_dim)?,
        })
    }

    pub fn width(&self) -> usize {
        self.heads * self.rope.head_dim
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// `queries x width`, heads side by side.
    pub output: Matrix,
    /// Softmax weights per head, `queries x keys`.
    pub weights: Vec<Matrix>,
}

impl AttentionOutput {
    /// Weights averaged over heads.
    pub fn mean_weights(&self) -> Matrix {
        let n = self.weights.len() as f32;
        let mut acc = self.weights[0].clone();
        for w in &self.weights[1..] {
            acc = acc.add(w).expect("heads share a shape");
        }
        acc.scale(1.0 / n)
    }
}

/// Multi-head rotary attention: per head, rotate q and k by their positions
/// and take `softmax(q kᵀ / sqrt(d_k)) v`.
pub fn attend(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    q_pos: &[Pos],
    k_pos: &[Pos],
    layout: &AttentionLayout,
) -> Result<AttentionOutput> {
    let width = layout.width();
    if q.cols() != width || k.cols() != width || v.cols() != width {
        return Err(Error::shape(format!(
            "q/k/v widths {}/{}/{} do not match {} heads x {}",
            q.cols(),
            k.cols(),
            v.cols(),
            layout.heads,
            layout.rope.head_dim
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::shape(format!(
            "{} keys but {} values",
            k.rows(),
            v.rows()
        )));
    }
    let q = rotate_rows(q, q_pos, &layout.rope)?;
    let k = rotate_rows(k, k_pos, &layout.rope)?;
    let d = layout.rope.head_dim;
    let scale = (d as f32).sqrt();
    let mut heads = Vec::with_capacity(layout.heads);
    let mut weights = Vec::with_capacity(layout.heads);
    for h in 0..layout.heads {
        let (a, b) = (h * d, (h + 1) * d);
        let logits = matmul_transposed(&q.slice_cols(a, b)?, &k.slice_cols(a, b)?)?;
        let w = row_softmax(&logits, scale)?;
        heads.push(matmul(&w, &v.slice_cols(a, b)?)?);
        weights.push(w);
    }
    let refs: Vec<&Matrix> = heads.iter().collect();
    Ok(AttentionOutput {
        output: Matrix::hstack(&refs)?,
        weights,
    })
}

/// Plain MM-attention of one stream over its own text+image tokens.
pub fn mm_attention(
    bundle: &QkvBundle,
    positions: &StreamPositions,
    layout: &AttentionLayout,
) -> Result<AttentionOutput> {
    check_positions(bundle, positions)?;
    let pos = positions.target.entries();
    attend(&bundle.q(), &bundle.k(), &bundle.v(), pos, pos, layout)
}

fn check_positions(bundle: &QkvBundle, positions: &StreamPositions) -> Result<()> {
    let expect = (bundle.text_len(), bundle.image_len());
    for (name, t) in [("target", &positions.target), ("reference", &positions.reference)] {
        let got = (t.text_len(), t.image_entries().len());
        if got != expect {
            return Err(Error::shape(format!(
                "{name} positions cover (M, N) = {got:?}, bundle has {expect:?}"
            )));
        }
    }
    Ok(())
}

/// Positions of the key rows produced by [`naive_share`] or
/// [`selective_share`].
pub fn shared_key_positions(mode: SharingMode, positions: &StreamPositions) -> Vec<Pos> {
    let tar = positions.target.entries();
    let mut out = tar.to_vec();
    match mode {
        SharingMode::Vanilla => {}
        SharingMode::Naive => out.extend_from_slice(positions.reference.entries()),
        SharingMode::Selective => out.extend_from_slice(positions.reference.image_entries()),
    }
    out
}

/// Column range of reference image keys in the shared key sequence.
pub fn reference_image_keys(mode: SharingMode, text_len: usize, image_len: usize) -> Option<std::ops::Range<usize>> {
    let (m, n) = (text_len, image_len);
    match mode {
        SharingMode::Vanilla => None,
        SharingMode::Naive => Some(2 * m + n..2 * (m + n)),
        SharingMode::Selective => Some(m + n..m + 2 * n),
    }
}

/// Shared attention for one target stream, returning weights as well.
///
/// `reference` may be `None` only in vanilla mode.
pub fn shared_attention(
    tar: &QkvBundle,
    reference: Option<&QkvBundle>,
    cfg: &SharingConfig,
    positions: &StreamPositions,
    layout: &AttentionLayout,
) -> Result<AttentionOutput> {
    check_positions(tar, positions)?;
    let shared = match (cfg.mode, reference) {
        (SharingMode::Vanilla, _) => return mm_attention(tar, positions, layout),
        (_, None) => {
            return Err(Error::config(format!(
                "{} sharing requires reference features",
                cfg.mode
            )))
        }
        (SharingMode::Naive, Some(r)) => naive_share(tar, r)?,
        (SharingMode::Selective, Some(r)) => selective_share(tar, r, cfg.lambda)?,
    };
    let k_pos = shared_key_positions(cfg.mode, positions);
    attend(
        &shared.q,
        &shared.k,
        &shared.v,
        positions.target.entries(),
        &k_pos,
        layout,
    )
}

/// Output rows `(M+N) x width` of shared MM-attention.
pub fn shared_mm_attention(
    tar: &QkvBundle,
    reference: Option<&QkvBundle>,
    cfg: &SharingConfig,
    positions: &StreamPositions,
    layout: &AttentionLayout,
) -> Result<Matrix> {
    shared_attention(tar, reference, cfg, positions, layout).map(|o| o.output)
}
