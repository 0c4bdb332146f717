//! Pixel masks <-> patch-token grid.
//!
//! A `patch_size x patch_size` pixel block maps to one token. Token grids are
//! `h = H / patch_size` rows by `w = W / patch_size` columns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

/// Token position in the `h x w` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GridIndex {
    pub row: usize,
    pub col: usize,
}

impl GridIndex {
    pub fn new(row: usize, col: usize) -> Self {
        GridIndex { row, col }
    }

    /// Row-major flat index in a grid `grid_w` tokens wide.
    #[inline]
    pub fn flat(self, grid_w: usize) -> usize {
        self.row * grid_w + self.col
    }

    #[inline]
    pub fn from_flat(flat: usize, grid_w: usize) -> Self {
        GridIndex {
            row: flat / grid_w,
            col: flat % grid_w,
        }
    }

    /// Pixel-space center of the token's patch (continuous coordinates).
    pub fn patch_center(self, patch_size: usize) -> (f64, f64) {
        let p = patch_size as f64;
        ((self.col as f64 + 0.5) * p, (self.row as f64 + 0.5) * p)
    }
}

/// Deduplicated, row-major sorted set of tokens in one view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSet {
    pub view: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    indices: Vec<GridIndex>,
}

impl TokenSet {
    pub fn new(
        view: usize,
        grid_h: usize,
        grid_w: usize,
        patch_size: usize,
        mut indices: Vec<GridIndex>,
    ) -> Result<Self> {
        if let Some(bad) = indices.iter().find(|g| g.row >= grid_h || g.col >= grid_w) {
            return Err(Error::InvalidArgument(format!(
                "token ({}, {}) outside {grid_h}x{grid_w} grid",
                bad.row, bad.col
            )));
        }
        indices.sort();
        indices.dedup();
        Ok(TokenSet {
            view,
            grid_h,
            grid_w,
            patch_size,
            indices,
        })
    }

    pub fn empty(view: usize, grid_h: usize, grid_w: usize, patch_size: usize) -> Self {
        TokenSet {
            view,
            grid_h,
            grid_w,
            patch_size,
            indices: Vec::new(),
        }
    }

    pub fn indices(&self) -> &[GridIndex] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, g: GridIndex) -> bool {
        self.indices.binary_search(&g).is_ok()
    }

    /// Caps the set at `max` tokens by uniform stride over the sorted order.
    pub fn capped(&self, max: usize) -> TokenSet {
        if max == 0 || self.indices.len() <= max {
            return self.clone();
        }
        let n = self.indices.len();
        let indices = (0..max).map(|k| self.indices[k * n / max]).collect();
        TokenSet {
            indices,
            ..self.clone()
        }
    }

    pub fn image_dims(&self) -> (usize, usize) {
        (self.grid_w * self.patch_size, self.grid_h * self.patch_size)
    }
}

/// Per-token count of set pixels.
pub fn patch_counts(mask: &Mask, patch_size: usize) -> Result<Grid<usize>> {
    let (w, h) = mask.dims();
    if patch_size == 0 || w % patch_size != 0 || h % patch_size != 0 {
        return Err(Error::ShapeMismatch {
            what: "mask".into(),
            expected: format!("dims divisible by patch size {patch_size}"),
            actual: format!("{w}x{h}"),
        });
    }
    let gw = w / patch_size;
    let mut counts = Grid::filled(gw, h / patch_size, 0usize);
    for (x, y) in mask.pixels() {
        *counts.get_mut(x / patch_size, y / patch_size) += 1;
    }
    Ok(counts)
}

/// Tokens whose patch is covered by at least `occupancy_frac` of its pixels.
/// No fallback: may be empty for a non-empty mask.
pub fn occupied_tokens(view: usize, mask: &Mask, patch_size: usize, occupancy_frac: f64) -> Result<TokenSet> {
    select_tokens(view, mask, patch_size, occupancy_frac, false)
}

/// Query tokens of a mask: tokens whose patch is covered at least
/// `occupancy_frac`. Falls back to any-pixel coverage when that rule selects
/// nothing for a non-empty mask.
pub fn tokens_for_mask(view: usize, mask: &Mask, patch_size: usize, occupancy_frac: f64) -> Result<TokenSet> {
    select_tokens(view, mask, patch_size, occupancy_frac, true)
}

fn select_tokens(
    view: usize,
    mask: &Mask,
    patch_size: usize,
    occupancy_frac: f64,
    fallback: bool,
) -> Result<TokenSet> {
    if !(occupancy_frac > 0.0 && occupancy_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "occupancy_frac must be in (0, 1], got {occupancy_frac}"
        )));
    }
    let counts = patch_counts(mask, patch_size)?;
    let area = (patch_size * patch_size) as f64;
    let select = |min_frac: Option<f64>| -> Vec<GridIndex> {
        let mut out = Vec::new();
        for r in 0..counts.height() {
            for c in 0..counts.width() {
                let n = *counts.get(c, r);
                let keep = match min_frac {
                    Some(f) => n > 0 && n as f64 / area >= f,
                    None => n > 0,
                };
                if keep {
                    out.push(GridIndex::new(r, c));
                }
            }
        }
        out
    };
    let mut indices = select(Some(occupancy_frac));
    if indices.is_empty() && fallback {
        indices = select(None);
    }
    TokenSet::new(view, counts.height(), counts.width(), patch_size, indices)
}

/// Union of the tokens' patch rectangles.
pub fn mask_for_tokens(tokens: &TokenSet) -> Mask {
    let (w, h) = tokens.image_dims();
    let p = tokens.patch_size;
    let mut m = Mask::filled(w, h, false);
    for g in tokens.indices() {
        for y in g.row * p..(g.row + 1) * p {
            for x in g.col * p..(g.col + 1) * p {
                m.set(x, y, true);
            }
        }
    }
    m
}
