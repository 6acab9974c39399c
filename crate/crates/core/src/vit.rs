//! Pre-norm vision transformer encoder with a CLS prediction head.
//!
//! Tokens are columns: a layer maps `(D, P + 1)` to `(D, P + 1)`. Heads
//! own contiguous blocks of `D / H` rows.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, CHANNELS};
use crate::error::{Error, Result};
use crate::patch::{patchify, GridShape, PatchProjector, TokenMatrix, INIT_STD};
use crate::seed::{derive_seed, stream};
use crate::tensor::{argmax, AdamState, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::train::{ordered_mean, shuffled_batches, EpochRecord, TrainConfig};

/// Divisor applied to query-key products before the softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionScale {
    /// `sqrt(D)` over the full embedding width.
    #[default]
    Embed,
    /// `sqrt(D / H)`, the per-head width.
    Head,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VitConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub num_classes: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub attention_scale: AttentionScale,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            heads: 4,
            layers: 2,
            mlp_hidden: 64,
            num_classes: 4,
            patch: 8,
            height: 32,
            width: 32,
            attention_scale: AttentionScale::Embed,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("layers", self.layers),
            ("mlp_hidden", self.mlp_hidden),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        GridShape::for_image(self.height, self.width, self.patch)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> GridShape {
        GridShape::for_image(self.height, self.width, self.patch).expect("validated config")
    }

    pub fn num_patches(&self) -> usize {
        self.grid().num_patches()
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn scale(&self) -> f64 {
        match self.attention_scale {
            AttentionScale::Embed => (self.embed_dim as f64).sqrt(),
            AttentionScale::Head => (self.head_dim() as f64).sqrt(),
        }
    }
}

/// Final-layer attention, `(H, P + 1, P + 1)`; rows index queries.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack(Tensor);

impl AttentionStack {
    pub fn new(scores: Tensor) -> Result<Self> {
        match scores.shape() {
            [_, n, m] if n == m && *n >= 2 => Ok(Self(scores)),
            s => Err(Error::shape(format!(
                "attention stack must be (H, n, n), got {s:?}"
            ))),
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn heads(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tokens(&self) -> usize {
        self.0.shape()[1]
    }

    /// Row `row` of head `head`.
    pub fn row(&self, head: usize, row: usize) -> &[f64] {
        let n = self.tokens();
        let start = (head * n + row) * n;
        &self.0.data()[start..start + n]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub z: TokenMatrix,
    pub attn: AttentionStack,
    pub logits: Tensor,
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub tokens: Var,
    /// One `(P + 1, P + 1)` matrix per head of the last layer.
    pub attn: Vec<Var>,
    pub logits: Var,
}

/// Query, key and value projections of one head, each `(D/H, D/H)`.
#[derive(Clone, Debug)]
pub struct HeadParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
    pub b_o: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w_1: ParamId,
    pub b_1: ParamId,
    pub w_2: ParamId,
    pub b_2: ParamId,
}

/// One attention head on a `(D/H, n)` slice: returns the head output
/// `V A^T` of shape `(D/H, n)` and the row-stochastic score matrix `A`.
pub fn attention_head(
    tape: &mut Tape,
    x: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    scale: f64,
) -> Result<(Var, Var)> {
    let q = tape.matmul(w_q, x)?;
    let k = tape.matmul(w_k, x)?;
    let v = tape.matmul(w_v, x)?;
    let qt = tape.transpose(q)?;
    let scores = tape.matmul(qt, k)?;
    let scores = tape.scale(scores, 1.0 / scale);
    let a = tape.softmax(scores, 1)?;
    let at = tape.transpose(a)?;
    let out = tape.matmul(v, at)?;
    Ok((out, a))
}

fn add_normal<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: String,
    shape: &[usize],
    rng: &mut R,
) -> Result<ParamId> {
    store.add(name, Tensor::randn(shape, INIT_STD, rng))
}

impl LayerParams {
    fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &VitConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let (d, hd, m) = (cfg.embed_dim, cfg.head_dim(), cfg.mlp_hidden);
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            heads.push(HeadParams {
                w_q: add_normal(store, format!("{prefix}.head{h}.w_q"), &[hd, hd], rng)?,
                w_k: add_normal(store, format!("{prefix}.head{h}.w_k"), &[hd, hd], rng)?,
                w_v: add_normal(store, format!("{prefix}.head{h}.w_v"), &[hd, hd], rng)?,
            });
        }
        Ok(Self {
            ln1_gamma: store.add(format!("{prefix}.ln1.gamma"), Tensor::full(&[d], 1.0))?,
            ln1_beta: store.add(format!("{prefix}.ln1.beta"), Tensor::zeros(&[d]))?,
            heads,
            w_o: add_normal(store, format!("{prefix}.attn.w_o"), &[d, d], rng)?,
            b_o: store.add(format!("{prefix}.attn.b_o"), Tensor::zeros(&[d]))?,
            ln2_gamma: store.add(format!("{prefix}.ln2.gamma"), Tensor::full(&[d], 1.0))?,
            ln2_beta: store.add(format!("{prefix}.ln2.beta"), Tensor::zeros(&[d]))?,
            w_1: add_normal(store, format!("{prefix}.mlp.w_1"), &[m, d], rng)?,
            b_1: store.add(format!("{prefix}.mlp.b_1"), Tensor::zeros(&[m]))?,
            w_2: add_normal(store, format!("{prefix}.mlp.w_2"), &[d, m], rng)?,
            b_2: store.add(format!("{prefix}.mlp.b_2"), Tensor::zeros(&[d]))?,
        })
    }

    /// `X' = X + MHA(LN(X))`, `out = X' + MLP(LN(X'))`. Also returns the
    /// per-head score matrices.
    pub fn apply(
        &self,
        tape: &mut Tape,
        params: &Bound,
        x: Var,
        scale: f64,
    ) -> Result<(Var, Vec<Var>)> {
        let hd = tape.value(x).shape()[0] / self.heads.len().max(1);
        let normed = tape.layer_norm_cols(x, params[self.ln1_gamma], params[self.ln1_beta])?;
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut scores = Vec::with_capacity(self.heads.len());
        for (h, head) in self.heads.iter().enumerate() {
            let slice = tape.slice_rows(normed, h * hd, hd)?;
            let (o, a) = attention_head(
                tape,
                slice,
                params[head.w_q],
                params[head.w_k],
                params[head.w_v],
                scale,
            )?;
            outs.push(o);
            scores.push(a);
        }
        let cat = tape.concat_rows(&outs)?;
        let mixed = tape.matmul(params[self.w_o], cat)?;
        let mixed = tape.add_row_bias(mixed, params[self.b_o])?;
        let x = tape.add(x, mixed)?;

        let normed = tape.layer_norm_cols(x, params[self.ln2_gamma], params[self.ln2_beta])?;
        let hidden = tape.matmul(params[self.w_1], normed)?;
        let hidden = tape.add_row_bias(hidden, params[self.b_1])?;
        let hidden = tape.gelu(hidden);
        let out = tape.matmul(params[self.w_2], hidden)?;
        let out = tape.add_row_bias(out, params[self.b_2])?;
        Ok((tape.add(x, out)?, scores))
    }
}

/// Projector, transformer layers, final layer norm and the affine CLS head.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    config: VitConfig,
    store: ParamStore,
    projector: PatchProjector,
    layers: Vec<LayerParams>,
    norm_gamma: ParamId,
    norm_beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    trained: bool,
}

impl VitEncoder {
    /// Fresh, untrained encoder with weights drawn from `seed`.
    pub fn new(config: VitConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::ENCODER_INIT]));
        let mut store = ParamStore::new();
        let d = config.embed_dim;
        let projector = PatchProjector::new(&mut store, "proj", config.grid(), d, &mut rng)?;
        let layers = (0..config.layers)
            .map(|k| LayerParams::new(&mut store, &format!("layer{k}"), &config, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let norm_gamma = store.add("norm.gamma", Tensor::full(&[d], 1.0))?;
        let norm_beta = store.add("norm.beta", Tensor::zeros(&[d]))?;
        let head_w = add_normal(
            &mut store,
            "head.w".into(),
            &[config.num_classes, d],
            &mut rng,
        )?;
        let head_b = store.add("head.b", Tensor::zeros(&[config.num_classes]))?;
        Ok(Self {
            config,
            store,
            projector,
            layers,
            norm_gamma,
            norm_beta,
            head_w,
            head_b,
            trained: false,
        })
    }

    /// Loads a checkpoint written by [`VitEncoder::save`]. The result counts
    /// as trained.
    pub fn load(config: VitConfig, path: &Path) -> Result<Self> {
        let mut enc = Self::new(config, 0)?;
        enc.store.copy_from(&ParamStore::load(path)?)?;
        enc.trained = true;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn projector(&self) -> &PatchProjector {
        &self.projector
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn mark_trained(&mut self) {
        self.trained = true;
    }

    /// Records the forward pass of one `(3, h, w)` image on `tape`.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: &Tensor) -> Result<ForwardVars> {
        let expected = [CHANNELS, self.config.height, self.config.width];
        if image.shape() != expected {
            return Err(Error::shape(format!(
                "image {:?} does not match encoder input {:?}",
                image.shape(),
                expected
            )));
        }
        let grid = patchify(image, self.config.patch)?;
        let mut x = self.projector.project(tape, params, &grid)?;
        let scale = self.config.scale();
        let mut attn = Vec::new();
        for layer in &self.layers {
            let (next, scores) = layer.apply(tape, params, x, scale)?;
            x = next;
            attn = scores;
        }
        let tokens = tape.layer_norm_cols(x, params[self.norm_gamma], params[self.norm_beta])?;
        let cls = tape.column(tokens, 0)?;
        let d = self.config.embed_dim;
        let cls = tape.reshape(cls, &[d, 1])?;
        let logits = tape.matmul(params[self.head_w], cls)?;
        let logits = tape.reshape(logits, &[self.config.num_classes])?;
        let logits = tape.add(logits, params[self.head_b])?;
        Ok(ForwardVars {
            tokens,
            attn,
            logits,
        })
    }

    /// Inference pass. `z` is rounded to `f32`, the precision it is sent at.
    pub fn encode(&self, image: &Tensor) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let fwd = self.forward(&mut tape, &params, image)?;
        let mut z = tape.value(fwd.tokens).clone();
        z.round_to_f32();
        let mut scores = Vec::new();
        for &a in &fwd.attn {
            scores.extend_from_slice(tape.value(a).data());
        }
        let n = self.config.num_patches() + 1;
        Ok(EncoderOutput {
            z: TokenMatrix::new(z)?,
            attn: AttentionStack::new(Tensor::new(&[fwd.attn.len(), n, n], scores)?)?,
            logits: tape.value(fwd.logits).clone(),
        })
    }

    /// Mean cross-entropy and accuracy of the prediction head on `dataset`.
    pub fn evaluate(&self, dataset: &Dataset) -> Result<(f64, f64)> {
        if dataset.is_empty() {
            return Err(Error::arg("cannot evaluate on an empty dataset"));
        }
        let per_image = dataset
            .images()
            .par_iter()
            .map(|img| {
                let mut tape = Tape::new();
                let params = self.store.bind(&mut tape);
                let fwd = self.forward(&mut tape, &params, &img.pixels)?;
                let loss = tape.cross_entropy(fwd.logits, img.label)?;
                let hit = argmax(tape.value(fwd.logits).data()) == img.label;
                Ok((tape.value(loss).item(), if hit { 1.0 } else { 0.0 }))
            })
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let losses: Vec<f64> = per_image.iter().map(|p| p.0).collect();
        let hits: Vec<f64> = per_image.iter().map(|p| p.1).collect();
        Ok((ordered_mean(&losses), ordered_mean(&hits)))
    }
}

fn check_dataset(dataset: &Dataset, config: &VitConfig) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::arg("training set is empty"));
    }
    if dataset.num_classes() > config.num_classes {
        return Err(Error::arg(format!(
            "dataset has {} classes, encoder predicts {}",
            dataset.num_classes(),
            config.num_classes
        )));
    }
    if (dataset.height(), dataset.width()) != (config.height, config.width) {
        return Err(Error::shape(format!(
            "dataset images are {}x{}, encoder expects {}x{}",
            dataset.height(),
            dataset.width(),
            config.height,
            config.width
        )));
    }
    Ok(())
}

/// Trains projector, transformer and head jointly on mean minibatch
/// cross-entropy. Each record holds the epoch's mean training loss and the
/// training-set accuracy measured after the epoch.
pub fn train_encoder(
    dataset: &Dataset,
    config: VitConfig,
    train: &TrainConfig,
    seed: u64,
) -> Result<(VitEncoder, Vec<EpochRecord>)> {
    config.validate()?;
    train.validate()?;
    check_dataset(dataset, &config)?;
    let mut enc = VitEncoder::new(config, seed)?;
    let mut adam = AdamState::new(&enc.store, train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::ENCODER_SHUFFLE]));
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        let mut losses = Vec::new();
        for batch in shuffled_batches(dataset.len(), train.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let params = enc.store.bind(&mut tape);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let img = &dataset.images()[i];
                let fwd = enc.forward(&mut tape, &params, &img.pixels)?;
                terms.push(tape.cross_entropy(fwd.logits, img.label)?);
            }
            let stacked = tape.concat_rows(&terms)?;
            let loss = tape.mean(stacked);
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!(
                    "encoder loss {value} at epoch {epoch}"
                )));
            }
            losses.push(value);
            let grads = params.collect(&tape.backward(loss)?, &enc.store);
            adam.step(&mut enc.store, &grads)?;
        }
        let (_, accuracy) = enc.evaluate(dataset)?;
        log.push(EpochRecord {
            epoch,
            split: dataset.split().to_string(),
            loss: ordered_mean(&losses),
            accuracy,
        });
    }
    enc.trained = true;
    Ok((enc, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> VitConfig {
        VitConfig {
            embed_dim: 8,
            heads: 2,
            layers: 1,
            mlp_hidden: 8,
            num_classes: 3,
            patch: 2,
            height: 4,
            width: 4,
            attention_scale: AttentionScale::Embed,
        }
    }

    #[test]
    fn config_validation() {
        assert!(VitConfig::default().validate().is_ok());
        let bad = VitConfig {
            layers: 0,
            ..VitConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = VitConfig {
            heads: 3,
            ..VitConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn scale_switch() {
        let mut c = VitConfig::default();
        assert_eq!(c.scale(), 32f64.sqrt());
        c.attention_scale = AttentionScale::Head;
        assert_eq!(c.scale(), 8f64.sqrt());
    }

    #[test]
    fn encode_shapes() {
        let enc = VitEncoder::new(micro(), 1).unwrap();
        let out = enc.encode(&Tensor::full(&[3, 4, 4], 0.5)).unwrap();
        assert_eq!(out.z.tensor().shape(), &[8, 5]);
        assert_eq!(out.attn.tensor().shape(), &[2, 5, 5]);
        assert_eq!(out.logits.shape(), &[3]);
        assert!(enc.encode(&Tensor::zeros(&[3, 4, 6])).is_err());
    }

    #[test]
    fn parameter_names_unique() {
        let enc = VitEncoder::new(VitConfig::default(), 0).unwrap();
        let mut names: Vec<&str> = enc.params().iter().map(|p| p.name()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
