//! Token position tables and 2D rotary embeddings.
//!
//! Image tokens sit on an `h x w` latent grid and carry `(row, col)` ids.
//! Text tokens all carry `(0, 0)`. Under [`ShiftMode::Shifted`] every image
//! column id is offset, which places a reference image beside the target
//! grid instead of on top of it: with an offset of `w` the two coordinate
//! sets are disjoint, so no reference token shares a rotary phase with its
//! spatial counterpart in the target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, TensorData};

/// Token coordinate `(row, col)`.
pub type Pos = (u32, u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    Identity,
    /// Column ids are offset by `offset`.
    Shifted { offset: u32 },
}

impl ShiftMode {
    /// The standard shift: one grid width to the right.
    pub fn beside(grid: (usize, usize)) -> Self {
        ShiftMode::Shifted {
            offset: grid.1 as u32,
        }
    }

    fn offset(self) -> u32 {
        match self {
            ShiftMode::Identity => 0,
            ShiftMode::Shifted { offset } => offset,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionTable {
    entries: Vec<Pos>,
    grid: (usize, usize),
    text_len: usize,
    shift: ShiftMode,
}

/// Builds text-then-image positions for one stream.
pub fn build_positions(
    grid: (usize, usize),
    text_len: usize,
    shift: ShiftMode,
) -> Result<PositionTable> {
    let (h, w) = grid;
    if h == 0 || w == 0 {
        return Err(Error::validation(format!("grid must be non-empty, got {h}x{w}")));
    }
    if text_len == 0 {
        return Err(Error::validation("text length must be at least 1"));
    }
    let offset = shift.offset();
    let mut entries = vec![(0, 0); text_len];
    entries.reserve(h * w);
    for i in 0..h as u32 {
        for j in 0..w as u32 {
            entries.push((i, j + offset));
        }
    }
    Ok(PositionTable {
        entries,
        grid,
        text_len,
        shift,
    })
}

impl PositionTable {
    pub fn entries(&self) -> &[Pos] {
        &self.entries
    }

    pub fn text_entries(&self) -> &[Pos] {
        &self.entries[..self.text_len]
    }

    pub fn image_entries(&self) -> &[Pos] {
        &self.entries[self.text_len..]
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn shift(&self) -> ShiftMode {
        self.shift
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `E x 2` u32 tensor, one `(row, col)` per token.
    pub fn to_tensor(&self) -> TensorData {
        TensorData::U32 {
            dims: vec![self.entries.len(), 2],
            values: self.entries.iter().flat_map(|&(i, j)| [i, j]).collect(),
        }
    }

    /// Positions as read back from a tensor file. Grid and text length are
    /// not stored in the file, so they are supplied and checked here.
    pub fn from_tensor(tensor: TensorData, grid: (usize, usize), text_len: usize) -> Result<Self> {
        let (dims, values) = tensor.into_u32()?;
        if dims.len() != 2 || dims[1] != 2 || dims[0] != text_len + grid.0 * grid.1 {
            return Err(Error::Format(format!(
                "position table dims {dims:?} do not match grid {grid:?} with {text_len} text tokens"
            )));
        }
        let entries: Vec<Pos> = values.chunks_exact(2).map(|c| (c[0], c[1])).collect();
        let offset = entries[text_len].1;
        let table = build_positions(
            grid,
            text_len,
            if offset == 0 {
                ShiftMode::Identity
            } else {
                ShiftMode::Shifted { offset }
            },
        )?;
        if table.entries != entries {
            return Err(Error::Format("position entries are not a shifted grid".into()));
        }
        Ok(table)
    }
}

/// Target and reference position tables for one sharing setup.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamPositions {
    pub target: PositionTable,
    pub reference: PositionTable,
}

impl StreamPositions {
    pub fn new(grid: (usize, usize), text_len: usize, reference_shift: ShiftMode) -> Result<Self> {
        Ok(Self {
            target: build_positions(grid, text_len, ShiftMode::Identity)?,
            reference: build_positions(grid, text_len, reference_shift)?,
        })
    }
}

/// Rotary embedding parameters for one attention head.
///
/// The first `row_channels` channels rotate with the row id and the
/// remaining channels with the column id. Channels pair up as `(2k, 2k+1)`
/// within each axis block, with frequency `base^(-2k / axis_channels)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub head_dim: usize,
    pub base: f64,
    pub row_channels: usize,
}

impl RopeParams {
    /// Base 10000 with the channels split evenly between the axes (the row
    /// axis takes the smaller half when `head_dim / 2` is odd).
    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_split(head_dim, 10_000.0, head_dim / 4 * 2)
    }

    pub fn with_split(head_dim: usize, base: f64, row_channels: usize) -> Result<Self> {
        let p = Self {
            head_dim,
            base,
            row_channels,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(Error::validation(format!(
                "rotary head dim must be even and positive, got {}",
                self.head_dim
            )));
        }
        if self.row_channels % 2 != 0 || self.row_channels > self.head_dim {
            return Err(Error::validation(format!(
                "row axis needs an even channel count within {}, got {}",
                self.head_dim, self.row_channels
            )));
        }
        if !(self.base > 1.0) {
            return Err(Error::validation(format!(
                "rotary base must exceed 1, got {}",
                self.base
            )));
        }
        Ok(())
    }

    pub fn col_channels(&self) -> usize {
        self.head_dim - self.row_channels
    }

    /// `(channel of the pair's first element, angle per unit position, axis)`
    /// for every rotated pair; axis 0 is rows, 1 is columns.
    fn pairs(&self) -> Vec<(usize, f64, usize)> {
        let mut out = Vec::with_capacity(self.head_dim / 2);
        for (axis, start, width) in [
            (0, 0, self.row_channels),
            (1, self.row_channels, self.col_channels()),
        ] {
            for k in 0..width / 2 {
                let freq = self.base.powf(-((2 * k) as f64) / width as f64);
                out.push((start + 2 * k, freq, axis));
            }
        }
        out
    }
}

/// Rotates each row of `vectors` by its table position.
pub fn rope_rotate(vectors: &Matrix, table: &PositionTable, params: &RopeParams) -> Result<Matrix> {
    rotate_rows(vectors, table.entries(), params)
}

/// Rotates each row by the matching position. `vectors` may hold several
/// heads side by side; every `head_dim`-wide block gets the same rotation.
pub fn rotate_rows(vectors: &Matrix, positions: &[Pos], params: &RopeParams) -> Result<Matrix> {
    params.validate()?;
    if vectors.rows() != positions.len() {
        return Err(Error::shape(format!(
            "{} rows but {} positions",
            vectors.rows(),
            positions.len()
        )));
    }
    if vectors.cols() % params.head_dim != 0 {
        return Err(Error::shape(format!(
            "width {} is not a multiple of head dim {}",
            vectors.cols(),
            params.head_dim
        )));
    }
    let pairs = params.pairs();
    let mut out = vectors.clone();
    for (r, &(pi, pj)) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for head in row.chunks_exact_mut(params.head_dim) {
            for &(c, freq, axis) in &pairs {
                let pos = if axis == 0 { pi } else { pj } as f64;
                let (sin, cos) = (pos * freq).sin_cos();
                let (x0, x1) = (head[c] as f64, head[c + 1] as f64);
                head[c] = (x0 * cos - x1 * sin) as f32;
                head[c + 1] = (x0 * sin + x1 * cos) as f32;
            }
        }
    }
    Ok(out)
}
