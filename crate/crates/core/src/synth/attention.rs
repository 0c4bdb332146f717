//! Attention rows constructed from ground-truth correspondences.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::attention_match::AttentionSource;
use crate::error::{Error, Result};
use crate::scene_io::tensor::{encode_f32, write_file};
use crate::scene_io::{manifest, AttentionEntry, AttentionStack, TensorRef, TokenIds};
use crate::tokenizer::GridIndex;

/// Blob width in tokens around the correspondence.
const PEAK_SIGMA: f64 = 0.5;
const FLOOR: f64 = 1e-3;

/// Noise-free shape of one attention row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowTarget {
    /// Gaussian blob centered on a reference token.
    Peak(GridIndex),
    /// Flat row: no co-visible correspondence.
    Uniform,
}

/// Attention for every ordered view pair, generated on demand.
#[derive(Debug, Clone)]
pub struct SynthAttention {
    pub seed: u64,
    pub noise: f64,
    pub num_layers: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(query, reference)` to one target per query token, row-major.
    pub targets: BTreeMap<(usize, usize), Vec<RowTarget>>,
}

fn row_seed(seed: u64, i: usize, j: usize, token: usize) -> u64 {
    let mut h = seed ^ 0x51_7C_C1_B7_27_22_0A_95;
    for v in [i as u64, j as u64, token as u64] {
        h = (h ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        h ^= h >> 29;
    }
    h
}

impl SynthAttention {
    pub fn cells(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// `[L, h, w]` rows for query token `token` of pair `(i, j)`.
    pub fn token_rows(&self, i: usize, j: usize, token: GridIndex) -> Result<Vec<f32>> {
        let targets = self.targets.get(&(i, j)).ok_or(Error::AttentionUnavailable {
            query_view: i,
            reference_view: j,
            reason: "no synthetic pair".into(),
        })?;
        let k = self.cells();
        let flat = token.flat(self.grid_w);
        let target = targets.get(flat).copied().ok_or_else(|| Error::AttentionUnavailable {
            query_view: i,
            reference_view: j,
            reason: format!("token ({}, {}) outside grid", token.row, token.col),
        })?;
        let base: Vec<f64> = match target {
            RowTarget::Uniform => vec![1.0; k],
            RowTarget::Peak(g) => (0..k)
                .map(|c| {
                    let t = GridIndex::from_flat(c, self.grid_w);
                    let dr = t.row as f64 - g.row as f64;
                    let dc = t.col as f64 - g.col as f64;
                    (-(dr * dr + dc * dc) / (2.0 * PEAK_SIGMA * PEAK_SIGMA)).exp() + FLOOR
                })
                .collect(),
        };
        let mut rng = (self.noise > 0.0).then(|| ChaCha8Rng::seed_from_u64(row_seed(self.seed, i, j, flat)));
        let mut out = Vec::with_capacity(self.num_layers * k);
        for _ in 0..self.num_layers {
            let mut row = base.clone();
            if let Some(rng) = rng.as_mut() {
                for v in row.iter_mut() {
                    let n: f64 = StandardNormal.sample(rng);
                    *v += self.noise * n.abs();
                }
            }
            let sum: f64 = row.iter().sum();
            out.extend(row.iter().map(|v| (v / sum) as f32));
        }
        Ok(out)
    }

    /// Writes one whole-grid dump per ordered pair and returns the manifest
    /// entries.
    pub fn write_dumps(&self, dir: &Path) -> Result<Vec<AttentionEntry>> {
        let pairs: Vec<(usize, usize)> = self.targets.keys().copied().collect();
        let k = self.cells();
        pairs
            .par_iter()
            .map(|&(i, j)| {
                let mut data = Vec::with_capacity(k * self.num_layers * k);
                for flat in 0..k {
                    data.extend(self.token_rows(i, j, GridIndex::from_flat(flat, self.grid_w))?);
                }
                let file = manifest::attention_file(i, j, None);
                write_file(&dir.join(&file), &encode_f32(&data))?;
                Ok(AttentionEntry {
                    query_view: i,
                    reference_view: j,
                    mask_id: None,
                    tensor: TensorRef::float32(file, vec![k, self.num_layers, self.grid_h, self.grid_w]),
                    token_ids: TokenIds::All(manifest::AllTokens::All),
                })
            })
            .collect()
    }

    /// Writes a per-mask dump holding only `tokens`' rows.
    pub fn write_mask_dump(&self, dir: &Path, i: usize, j: usize, mask_id: u32, tokens: &[GridIndex]) -> Result<AttentionEntry> {
        let mut data = Vec::new();
        for &t in tokens {
            data.extend(self.token_rows(i, j, t)?);
        }
        let file = manifest::attention_file(i, j, Some(mask_id));
        write_file(&dir.join(&file), &encode_f32(&data))?;
        Ok(AttentionEntry {
            query_view: i,
            reference_view: j,
            mask_id: Some(mask_id),
            tensor: TensorRef::float32(file, vec![tokens.len(), self.num_layers, self.grid_h, self.grid_w]),
            token_ids: TokenIds::List(tokens.iter().map(|g| [g.row, g.col]).collect()),
        })
    }
}

impl AttentionSource for SynthAttention {
    fn stack(&self, query: usize, reference: usize, tokens: &[GridIndex], _prefer_mask: Option<u32>) -> Result<AttentionStack> {
        if query == reference {
            return Err(Error::SelfPair(query));
        }
        let mut data = Vec::with_capacity(tokens.len() * self.num_layers * self.cells());
        for &t in tokens {
            data.extend(self.token_rows(query, reference, t)?);
        }
        AttentionStack::new(query, reference, tokens.to_vec(), self.num_layers, self.grid_h, self.grid_w, data)
    }
}
