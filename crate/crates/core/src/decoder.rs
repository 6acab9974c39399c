//! Transposed-convolution decoder and the masked reconstruction loss.
//!
//! `(D, P)` tokens are read as a `(D, rows, cols)` feature map and upsampled
//! by 2 per stage (kernel 4, stride 2, padding 1, ReLU) until one cell spans
//! a full patch, then a 1x1 convolution and a sigmoid give the `(3, h, w)`
//! image.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::channel::{full_patch_tokens, unpack, ChannelModel, Packet};
use crate::data::{Dataset, CHANNELS};
use crate::error::{Error, Result};
use crate::masker::{expand_mask, extract_cls_attention, ClsAttentionGrid, SelectionMask};
use crate::patch::TokenMatrix;
use crate::seed::{derive_seed, stream};
use crate::tensor::{AdamState, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::train::{ordered_mean, shuffled_batches, TrainConfig};
use crate::vit::VitEncoder;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
/// Widths of the first upsampling stages; later stages keep halving.
const WIDTHS: [usize; 3] = [64, 32, 16];
const MIN_WIDTH: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub embed_dim: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("decoder extents must be positive".into()));
        }
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return Err(Error::Config(format!(
                "patch size {} is not a power of two >= 2",
                self.patch
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.rows * self.cols
    }

    /// Output channels of each upsampling stage.
    pub fn stage_widths(&self) -> Vec<usize> {
        let stages = self.patch.trailing_zeros() as usize;
        (0..stages)
            .map(|s| match WIDTHS.get(s) {
                Some(&w) => w,
                None => (WIDTHS[WIDTHS.len() - 1] >> (s + 1 - WIDTHS.len())).max(MIN_WIDTH),
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Stage {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: DecoderConfig,
    store: ParamStore,
    stages: Vec<Stage>,
    out_w: ParamId,
    out_b: ParamId,
}

impl Decoder {
    /// He-initialized decoder.
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::DECODER_INIT]));
        let mut store = ParamStore::new();
        let mut stages = Vec::new();
        let mut cin = config.embed_dim;
        for (s, cout) in config.stage_widths().into_iter().enumerate() {
            // each output pixel of a k4 s2 layer sees 2x2 taps per input channel
            let fan_in = cin * (KERNEL / STRIDE) * (KERNEL / STRIDE);
            let std = (2.0 / fan_in as f64).sqrt();
            stages.push(Stage {
                w: store.add(
                    format!("up{s}.w"),
                    Tensor::randn(&[cin, cout, KERNEL, KERNEL], std, &mut rng),
                )?,
                b: store.add(format!("up{s}.b"), Tensor::zeros(&[cout]))?,
            });
            cin = cout;
        }
        let out_w = store.add(
            "out.w",
            Tensor::randn(&[CHANNELS, cin, 1, 1], (1.0 / cin as f64).sqrt(), &mut rng),
        )?;
        let out_b = store.add("out.b", Tensor::zeros(&[CHANNELS]))?;
        Ok(Self {
            config,
            store,
            stages,
            out_w,
            out_b,
        })
    }

    pub fn load(config: DecoderConfig, path: &Path) -> Result<Self> {
        let mut dec = Self::new(config, 0)?;
        dec.store.copy_from(&ParamStore::load(path)?)?;
        Ok(dec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Records decoding of a `(D, P)` token matrix.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, z_hat: Var) -> Result<Var> {
        let c = self.config;
        if tape.value(z_hat).shape() != [c.embed_dim, c.num_patches()] {
            return Err(Error::arg(format!(
                "decoder expects ({}, {}) tokens, got {:?}",
                c.embed_dim,
                c.num_patches(),
                tape.value(z_hat).shape()
            )));
        }
        let mut x = tape.reshape(z_hat, &[c.embed_dim, c.rows, c.cols])?;
        for stage in &self.stages {
            x = tape.conv_transpose2d(x, params[stage.w], params[stage.b], STRIDE, PAD)?;
            x = tape.relu(x);
        }
        let x = tape.conv2d(x, params[self.out_w], params[self.out_b], 1, 0)?;
        Ok(tape.sigmoid(x))
    }

    /// `(3, h, w)` reconstruction of `z_hat`.
    pub fn decode(&self, z_hat: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let z = tape.leaf(z_hat.clone());
        let out = self.forward(&mut tape, &params, z)?;
        Ok(tape.value(out).clone())
    }
}

/// Channel-broadcast pixel mask, `(3, h, w)`.
fn pixel_weight(mask: &SelectionMask, p: usize) -> Tensor {
    let plane = expand_mask(mask, p);
    let mut data = Vec::with_capacity(CHANNELS * plane.len());
    for _ in 0..CHANNELS {
        data.extend_from_slice(plane.data());
    }
    let [h, w] = [plane.shape()[0], plane.shape()[1]];
    Tensor::new(&[CHANNELS, h, w], data).expect("consistent extents")
}

fn masked_norm(mask: &SelectionMask, p: usize) -> f64 {
    (mask.n_selected() * p * p * CHANNELS) as f64
}

/// Squared error over the pixels of selected patches divided by
/// `n_selected * p^2 * 3`; zero for an empty mask.
pub fn masked_mse_var(
    tape: &mut Tape,
    pred: Var,
    target: &Tensor,
    mask: &SelectionMask,
    p: usize,
) -> Result<Var> {
    let weight = pixel_weight(mask, p);
    tape.masked_sq_error(pred, target, &weight, masked_norm(mask, p))
}

/// Per-patch mean squared errors, `(rows, cols)`, over every patch.
pub fn patch_errors(
    x: &Tensor,
    x_hat: &Tensor,
    rows: usize,
    cols: usize,
    p: usize,
) -> Result<Tensor> {
    let expected = [CHANNELS, rows * p, cols * p];
    if x.shape() != expected || x_hat.shape() != expected {
        return Err(Error::shape(format!(
            "images {:?} / {:?} vs grid {expected:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let (h, w) = (rows * p, cols * p);
    let mut out = vec![0.0; rows * cols];
    for c in 0..CHANNELS {
        for y in 0..h {
            for xx in 0..w {
                let o = (c * h + y) * w + xx;
                let d = x.data()[o] - x_hat.data()[o];
                out[(y / p) * cols + xx / p] += d * d;
            }
        }
    }
    let denom = (p * p * CHANNELS) as f64;
    Tensor::new(&[rows, cols], out.into_iter().map(|s| s / denom).collect())
}

/// Masked MSE of `x_hat` against `x`, see [`masked_mse_var`].
pub fn masked_mse(x: &Tensor, x_hat: &Tensor, mask: &SelectionMask, p: usize) -> Result<f64> {
    Ok(ReconstructionReport::new(x, x_hat.clone(), mask, p)?.masked_mse)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionReport {
    pub x_hat: Tensor,
    /// Mean of `per_patch` over the selected patches.
    pub masked_mse: f64,
    pub per_patch: Tensor,
}

impl ReconstructionReport {
    pub fn new(x: &Tensor, x_hat: Tensor, mask: &SelectionMask, p: usize) -> Result<Self> {
        let per_patch = patch_errors(x, &x_hat, mask.rows(), mask.cols(), p)?;
        let masked_mse = if mask.n_selected() == 0 {
            0.0
        } else {
            mask.selected()
                .iter()
                .map(|&i| per_patch.data()[i])
                .sum::<f64>()
                / mask.n_selected() as f64
        };
        Ok(Self {
            x_hat,
            masked_mse,
            per_patch,
        })
    }
}

/// How training images reach the decoder.
#[derive(Clone, Debug, PartialEq)]
pub enum Transport {
    /// Budget, mask, pack, serialize, parse, unpack.
    Channel { channel: ChannelModel, alpha: f64 },
    /// All patch tokens handed over directly, loss over the full image.
    Bypass,
}

/// What the frozen encoder produced for one image.
#[derive(Clone, Debug)]
pub struct EncodedImage {
    pub z: TokenMatrix,
    pub grid: ClsAttentionGrid,
}

/// Runs the frozen encoder over every image, in parallel.
pub fn encode_dataset(encoder: &VitEncoder, dataset: &Dataset) -> Result<Vec<EncodedImage>> {
    let g = encoder.config().grid();
    dataset
        .images()
        .par_iter()
        .map(|img| {
            let out = encoder.encode(&img.pixels)?;
            Ok(EncodedImage {
                grid: extract_cls_attention(&out.attn, g.rows, g.cols)?,
                z: out.z,
            })
        })
        .collect()
}

/// Receiver-side view of one image: `(D, P)` tokens and the mask.
pub fn receive(
    transport: &Transport,
    step: usize,
    encoded: &EncodedImage,
    image_id: u32,
    fill_seed: u64,
) -> Result<(Tensor, SelectionMask)> {
    match transport {
        Transport::Bypass => Ok((
            full_patch_tokens(&encoded.z),
            SelectionMask::full(encoded.grid.rows(), encoded.grid.cols()),
        )),
        Transport::Channel { channel, alpha } => {
            let (packet, _) =
                channel.transmit(step, &encoded.z, &encoded.grid, *alpha, fill_seed, image_id)?;
            let wire = Packet::from_bytes(&packet.to_bytes())?;
            unpack(&wire, encoded.grid.rows(), encoded.grid.cols())
        }
    }
}

/// Random-fill seed of image `id` in `epoch`.
pub fn fill_seed(seed: u64, epoch: usize, id: u32) -> u64 {
    derive_seed(seed, &[stream::MASK_FILL, epoch as u64, id as u64])
}

pub fn decoder_config_for(encoder: &VitEncoder) -> DecoderConfig {
    let g = encoder.config().grid();
    DecoderConfig {
        embed_dim: encoder.config().embed_dim,
        rows: g.rows,
        cols: g.cols,
        patch: g.patch,
    }
}

/// Per-epoch mean of the minibatch masked-MSE losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecoderEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Trains a decoder on the masked MSE of what survives `transport`. The
/// encoder is only read.
pub fn train_decoder(
    dataset: &Dataset,
    encoder: &VitEncoder,
    transport: &Transport,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Decoder, Vec<DecoderEpoch>)> {
    if !encoder.is_trained() {
        return Err(Error::Precondition(
            "decoder training needs a trained, frozen encoder".into(),
        ));
    }
    train.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    let encoded = encode_dataset(encoder, dataset)?;
    let mut dec = Decoder::new(decoder_config_for(encoder), seed)?;
    let p = dec.config.patch;
    let mut adam = AdamState::new(&dec.store, train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::DECODER_SHUFFLE]));
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        let mut losses = Vec::new();
        for batch in shuffled_batches(dataset.len(), train.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let params = dec.store.bind(&mut tape);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let img = &dataset.images()[i];
                let (z_hat, mask) = receive(
                    transport,
                    i,
                    &encoded[i],
                    img.id,
                    fill_seed(seed, epoch, img.id),
                )?;
                let z = tape.leaf(z_hat);
                let x_hat = dec.forward(&mut tape, &params, z)?;
                terms.push(masked_mse_var(&mut tape, x_hat, &img.pixels, &mask, p)?);
            }
            let stacked = tape.concat_rows(&terms)?;
            let loss = tape.mean(stacked);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "decoder loss {value} at epoch {epoch}"
                )));
            }
            losses.push(value);
            let grads = params.collect(&tape.backward(loss)?, &dec.store);
            adam.step(&mut dec.store, &grads)?;
        }
        log.push(DecoderEpoch {
            epoch,
            loss: ordered_mean(&losses),
        });
    }
    Ok((dec, log))
}

/// Mean masked MSE of the decoder over `dataset` with masks drawn under
/// `seed` (epoch slot 0).
pub fn evaluate_decoder(
    dataset: &Dataset,
    encoder: &VitEncoder,
    decoder: &Decoder,
    transport: &Transport,
    seed: u64,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::arg("cannot evaluate on an empty dataset"));
    }
    let encoded = encode_dataset(encoder, dataset)?;
    let p = decoder.config.patch;
    let errs = dataset
        .images()
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let (z_hat, mask) = receive(
                transport,
                i,
                &encoded[i],
                img.id,
                fill_seed(seed, 0, img.id),
            )?;
            masked_mse(&img.pixels, &decoder.decode(&z_hat)?, &mask, p)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(ordered_mean(&errs))
}
