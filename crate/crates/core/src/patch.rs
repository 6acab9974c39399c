//! Patch segmentation and linear token projection.
//!
//! Patches are numbered row-major over the `(h/p, w/p)` grid. Inside a patch
//! pixels are flattened channel-major, then row-major.

use rand::Rng;

use crate::data::CHANNELS;
use crate::error::{Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Std of the normal initialization used for every projection and token.
pub const INIT_STD: f64 = 0.02;

/// Patch-grid geometry of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl GridShape {
    pub fn for_image(height: usize, width: usize, patch: usize) -> Result<Self> {
        if patch == 0
            || height == 0
            || width == 0
            || !height.is_multiple_of(patch)
            || !width.is_multiple_of(patch)
        {
            return Err(Error::arg(format!(
                "image {height}x{width} cannot be tiled by {patch}x{patch} patches"
            )));
        }
        Ok(Self {
            rows: height / patch,
            cols: width / patch,
            patch,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    pub fn height(&self) -> usize {
        self.rows * self.patch
    }

    pub fn width(&self) -> usize {
        self.cols * self.patch
    }

    /// Length of a flattened patch, `3 p^2`.
    pub fn patch_len(&self) -> usize {
        CHANNELS * self.patch * self.patch
    }
}

/// `(row, col)` of the patch with 1-D index `i`.
pub fn index_to_grid(i: usize, rows: usize, cols: usize) -> Result<(usize, usize)> {
    if cols == 0 || i >= rows * cols {
        return Err(Error::arg(format!(
            "patch index {i} outside a {rows}x{cols} grid"
        )));
    }
    Ok((i / cols, i % cols))
}

/// 1-D index of the patch at `(row, col)`.
pub fn grid_to_index(row: usize, col: usize, rows: usize, cols: usize) -> Result<usize> {
    if row >= rows || col >= cols {
        return Err(Error::arg(format!(
            "cell ({row}, {col}) outside a {rows}x{cols} grid"
        )));
    }
    Ok(row * cols + col)
}

/// An image cut into `P` patches of shape `(3, p, p)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    shape: GridShape,
    /// `(P, 3, p, p)`
    patches: Tensor,
}

impl PatchGrid {
    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn patches(&self) -> &Tensor {
        &self.patches
    }

    /// Patch `i` as a `(3, p, p)` tensor.
    pub fn patch(&self, i: usize) -> Result<Tensor> {
        let len = self.shape.patch_len();
        if i >= self.shape.num_patches() {
            return Err(Error::arg(format!("patch {i} out of range")));
        }
        let p = self.shape.patch;
        Tensor::new(
            &[CHANNELS, p, p],
            self.patches.data()[i * len..(i + 1) * len].to_vec(),
        )
    }

    /// `(3 p^2, P)` matrix whose column `i` is the flattened patch `i`.
    pub fn flattened_columns(&self) -> Tensor {
        let len = self.shape.patch_len();
        let n = self.shape.num_patches();
        let src = self.patches.data();
        let mut out = vec![0.0; len * n];
        for i in 0..n {
            for k in 0..len {
                out[k * n + i] = src[i * len + k];
            }
        }
        Tensor::new(&[len, n], out).expect("consistent extents")
    }

    /// Inverse of [`patchify`].
    pub fn reassemble(&self) -> Tensor {
        let GridShape {
            rows,
            cols,
            patch: p,
        } = self.shape;
        let (h, w) = (rows * p, cols * p);
        let mut img = vec![0.0; CHANNELS * h * w];
        let src = self.patches.data();
        for i in 0..rows * cols {
            let (r, c) = (i / cols, i % cols);
            for ch in 0..CHANNELS {
                for y in 0..p {
                    let s = ((i * CHANNELS + ch) * p + y) * p;
                    let d = (ch * h + r * p + y) * w + c * p;
                    img[d..d + p].copy_from_slice(&src[s..s + p]);
                }
            }
        }
        Tensor::new(&[CHANNELS, h, w], img).expect("consistent extents")
    }
}

/// Splits a `(3, h, w)` image into row-major `p x p` patches.
pub fn patchify(image: &Tensor, patch: usize) -> Result<PatchGrid> {
    let (c, h, w) = image.dims3()?;
    if c != CHANNELS {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let shape = GridShape::for_image(h, w, patch)?;
    let p = patch;
    let src = image.data();
    let mut out = vec![0.0; shape.num_patches() * shape.patch_len()];
    for i in 0..shape.num_patches() {
        let (r, col) = (i / shape.cols, i % shape.cols);
        for ch in 0..CHANNELS {
            for y in 0..p {
                let s = (ch * h + r * p + y) * w + col * p;
                let d = ((i * CHANNELS + ch) * p + y) * p;
                out[d..d + p].copy_from_slice(&src[s..s + p]);
            }
        }
    }
    let patches = Tensor::new(&[shape.num_patches(), CHANNELS, p, p], out)?;
    Ok(PatchGrid { shape, patches })
}

/// Token matrix `(D, P + 1)`; column 0 is the CLS slot, column `i + 1`
/// belongs to patch `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix(Tensor);

impl TokenMatrix {
    pub fn new(tokens: Tensor) -> Result<Self> {
        let (_, n) = tokens.dims2()?;
        if n < 2 {
            return Err(Error::shape(
                "token matrix needs a CLS column and at least one patch",
            ));
        }
        Ok(Self(tokens))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn embed_dim(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn num_patches(&self) -> usize {
        self.0.shape()[1] - 1
    }

    pub fn cls(&self) -> Tensor {
        self.0.column(0).expect("cls column exists")
    }

    /// The `(D, P)` patch tokens, CLS column dropped.
    pub fn patch_tokens(&self) -> Tensor {
        let order: Vec<usize> = (1..=self.num_patches()).collect();
        self.0.select_columns(&order).expect("columns exist")
    }
}

/// Parameters of the projector: `W_proj (D, 3p^2)`, bias `(D)`, CLS token
/// `(D)` and a learned positional table `(D, P + 1)`.
#[derive(Clone, Debug)]
pub struct PatchProjector {
    grid: GridShape,
    embed_dim: usize,
    pub w_proj: ParamId,
    pub bias: ParamId,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
}

impl PatchProjector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        grid: GridShape,
        embed_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = grid.num_patches();
        Ok(Self {
            grid,
            embed_dim,
            w_proj: store.add(
                format!("{prefix}.w_proj"),
                Tensor::randn(&[embed_dim, grid.patch_len()], INIT_STD, rng),
            )?,
            bias: store.add(format!("{prefix}.bias"), Tensor::zeros(&[embed_dim]))?,
            cls_token: store.add(
                format!("{prefix}.cls_token"),
                Tensor::randn(&[embed_dim], INIT_STD, rng),
            )?,
            pos_embed: store.add(
                format!("{prefix}.pos_embed"),
                Tensor::randn(&[embed_dim, n + 1], INIT_STD, rng),
            )?,
        })
    }

    pub fn grid(&self) -> GridShape {
        self.grid
    }

    /// `X~ = [cls, W_proj x_1 + b, ..., W_proj x_P + b] + pos_embed`.
    pub fn project(&self, tape: &mut Tape, params: &Bound, grid: &PatchGrid) -> Result<Var> {
        if grid.shape() != self.grid {
            return Err(Error::shape(format!(
                "patch grid {:?} does not match projector {:?}",
                grid.shape(),
                self.grid
            )));
        }
        let cols = tape.leaf(grid.flattened_columns());
        let proj = tape.matmul(params[self.w_proj], cols)?;
        let proj = tape.add_row_bias(proj, params[self.bias])?;
        let cls = tape.reshape(params[self.cls_token], &[self.embed_dim, 1])?;
        let tokens = tape.concat_cols(&[cls, proj])?;
        tape.add(tokens, params[self.pos_embed])
    }
}
