//! CLS-attention grid and budgeted patch selection.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch::{grid_to_index, index_to_grid};
use crate::tensor::Tensor;
use crate::vit::AttentionStack;

/// Head-averaged attention of the CLS query over the `P` patches, laid out
/// on the `(rows, cols)` patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsAttentionGrid {
    scores: Tensor,
}

impl ClsAttentionGrid {
    pub fn new(scores: Tensor) -> Result<Self> {
        scores.dims2()?;
        if !scores.data().iter().all(|v| v.is_finite()) {
            return Err(Error::arg("attention scores must be finite"));
        }
        Ok(Self { scores })
    }

    pub fn scores(&self) -> &Tensor {
        &self.scores
    }

    pub fn rows(&self) -> usize {
        self.scores.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.scores.shape()[1]
    }

    pub fn num_patches(&self) -> usize {
        self.scores.len()
    }

    /// Scores in 1-D patch-index order.
    pub fn flat(&self) -> &[f64] {
        self.scores.data()
    }
}

/// Row 0 of every head with the CLS self-score dropped, reshaped to
/// `(rows, cols)` and averaged over heads.
pub fn extract_cls_attention(
    attn: &AttentionStack,
    rows: usize,
    cols: usize,
) -> Result<ClsAttentionGrid> {
    let p = attn.tokens() - 1;
    if rows * cols != p {
        return Err(Error::shape(format!(
            "{p} patch scores cannot fill a {rows}x{cols} grid"
        )));
    }
    let heads = attn.heads();
    let mut sum = vec![0.0; p];
    for h in 0..heads {
        for (acc, &s) in sum.iter_mut().zip(&attn.row(h, 0)[1..]) {
            *acc += s;
        }
    }
    let avg = sum.into_iter().map(|s| s / heads as f64).collect();
    ClsAttentionGrid::new(Tensor::new(&[rows, cols], avg)?)
}

/// Binary patch-selection mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    rows: usize,
    cols: usize,
    flat: Vec<bool>,
    n_selected: usize,
}

impl SelectionMask {
    pub fn from_flat(rows: usize, cols: usize, flat: Vec<bool>) -> Result<Self> {
        if flat.len() != rows * cols {
            return Err(Error::shape(format!(
                "mask of {} entries for a {rows}x{cols} grid",
                flat.len()
            )));
        }
        let n_selected = flat.iter().filter(|&&b| b).count();
        Ok(Self {
            rows,
            cols,
            flat,
            n_selected,
        })
    }

    pub fn from_indices(rows: usize, cols: usize, indices: &[usize]) -> Result<Self> {
        let mut flat = vec![false; rows * cols];
        for &i in indices {
            let (r, c) = index_to_grid(i, rows, cols)?;
            flat[grid_to_index(r, c, rows, cols)?] = true;
        }
        Self::from_flat(rows, cols, flat)
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::from_flat(rows, cols, vec![true; rows * cols]).expect("consistent length")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn num_patches(&self) -> usize {
        self.flat.len()
    }

    pub fn flat(&self) -> &[bool] {
        &self.flat
    }

    pub fn n_selected(&self) -> usize {
        self.n_selected
    }

    pub fn at(&self, row: usize, col: usize) -> Result<bool> {
        Ok(self.flat[grid_to_index(row, col, self.rows, self.cols)?])
    }

    /// Selected 1-D indices, ascending.
    pub fn selected(&self) -> Vec<usize> {
        (0..self.flat.len()).filter(|&i| self.flat[i]).collect()
    }

    /// `(rows, cols)` 0/1 grid.
    pub fn grid(&self) -> Tensor {
        let data = self
            .flat
            .iter()
            .map(|&b| if b { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[self.rows, self.cols], data).expect("consistent length")
    }

    /// `ceil(P / 8)` bytes, bit `i % 8` of byte `i / 8` set for patch `i`.
    pub fn to_bitmap(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.flat.len().div_ceil(8)];
        for (i, _) in self.flat.iter().enumerate().filter(|(_, &b)| b) {
            out[i / 8] |= 1 << (i % 8);
        }
        out
    }

    /// Inverse of [`SelectionMask::to_bitmap`]. Padding bits past `P` must
    /// be clear.
    pub fn from_bitmap(rows: usize, cols: usize, bitmap: &[u8]) -> Result<Self> {
        let p = rows * cols;
        if bitmap.len() != p.div_ceil(8) {
            return Err(Error::CorruptPacket(format!(
                "bitmap of {} bytes for {p} patches",
                bitmap.len()
            )));
        }
        let bit = |i: usize| bitmap[i / 8] >> (i % 8) & 1 == 1;
        if (p..bitmap.len() * 8).any(bit) {
            return Err(Error::CorruptPacket("bitmap padding bits are set".into()));
        }
        Self::from_flat(rows, cols, (0..p).map(bit).collect())
    }
}

/// Mask together with the threshold stage's outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSelection {
    pub mask: SelectionMask,
    /// Indices admitted by score, in admission order.
    pub threshold_indices: Vec<usize>,
    /// Score of the last admitted patch; `None` if the threshold stage
    /// admitted nothing.
    pub lambda: Option<f64>,
}

/// Patch indices ordered by descending score, ties by ascending index.
pub fn rank_patches(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Admits the `floor(alpha * n_budget)` highest-scoring patches, then fills
/// the rest of the budget uniformly from the remaining patches using `seed`.
pub fn build_mask(
    grid: &ClsAttentionGrid,
    n_budget: usize,
    alpha: f64,
    seed: u64,
) -> Result<MaskSelection> {
    let p = grid.num_patches();
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::arg(format!("alpha {alpha} outside [0, 1]")));
    }
    if n_budget > p {
        return Err(Error::arg(format!("budget {n_budget} exceeds {p} patches")));
    }
    let n_top = ((alpha * n_budget as f64).floor() as usize).min(n_budget);
    let threshold_indices: Vec<usize> = rank_patches(grid.flat())[..n_top].to_vec();
    let lambda = threshold_indices.last().map(|&i| grid.flat()[i]);

    let mut flat = vec![false; p];
    for &i in &threshold_indices {
        flat[i] = true;
    }
    let remainder: Vec<usize> = (0..p).filter(|&i| !flat[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in sample(&mut rng, remainder.len(), n_budget - n_top) {
        flat[remainder[k]] = true;
    }
    Ok(MaskSelection {
        mask: SelectionMask::from_flat(grid.rows(), grid.cols(), flat)?,
        threshold_indices,
        lambda,
    })
}

/// Pixel mask `M (x) 1_{p x p}`, shape `(rows * p, cols * p)`.
pub fn expand_mask(mask: &SelectionMask, p: usize) -> Tensor {
    let (h, w) = (mask.rows * p, mask.cols * p);
    let mut out = vec![0.0; h * w];
    for i in mask.selected() {
        let (r, c) = (i / mask.cols, i % mask.cols);
        for y in r * p..(r + 1) * p {
            out[y * w + c * p..y * w + (c + 1) * p].fill(1.0);
        }
    }
    Tensor::new(&[h, w], out).expect("consistent extents")
}
