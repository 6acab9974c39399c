//! Receiver-side CNN classifier and mixed-loss fine-tuning on
//! reconstructions.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{Dataset, LabeledImage, CHANNELS};
use crate::decoder::{encode_dataset, receive, Decoder, EncodedImage, Transport};
use crate::error::{Error, Result};
use crate::masker::SelectionMask;
use crate::seed::{derive_seed, stream};
use crate::tensor::{argmax, AdamState, Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::train::{ordered_mean, shuffled_batches, EpochRecord, TrainConfig};
use crate::vit::VitEncoder;

/// Output channels of the three stride-2 blocks.
pub const BLOCK_WIDTHS: [usize; 3] = [16, 32, 64];
const KERNEL: usize = 3;

#[derive(Clone, Debug)]
struct Block {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    num_classes: usize,
    store: ParamStore,
    blocks: Vec<Block>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Classifier {
    pub fn new(num_classes: usize, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("classifier needs at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::CLASSIFIER_INIT]));
        let mut store = ParamStore::new();
        let mut blocks = Vec::new();
        let mut cin = CHANNELS;
        for (i, &cout) in BLOCK_WIDTHS.iter().enumerate() {
            let std = (2.0 / (cin * KERNEL * KERNEL) as f64).sqrt();
            blocks.push(Block {
                w: store.add(
                    format!("conv{i}.w"),
                    Tensor::randn(&[cout, cin, KERNEL, KERNEL], std, &mut rng),
                )?,
                b: store.add(format!("conv{i}.b"), Tensor::zeros(&[cout]))?,
            });
            cin = cout;
        }
        let head_w = store.add(
            "head.w",
            Tensor::randn(&[num_classes, cin], (1.0 / cin as f64).sqrt(), &mut rng),
        )?;
        let head_b = store.add("head.b", Tensor::zeros(&[num_classes]))?;
        Ok(Self {
            num_classes,
            store,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn load(num_classes: usize, path: &Path) -> Result<Self> {
        let mut c = Self::new(num_classes, 0)?;
        c.store.copy_from(&ParamStore::load(path)?)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Logits `(C)` for a `(3, h, w)` image.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, image: &Tensor) -> Result<Var> {
        if image.rank() != 3 || image.shape()[0] != CHANNELS {
            return Err(Error::shape(format!(
                "expected a (3, h, w) image, got {:?}",
                image.shape()
            )));
        }
        let mut x = tape.leaf(image.clone());
        for block in &self.blocks {
            x = tape.conv2d(x, params[block.w], params[block.b], 2, 1)?;
            x = tape.relu(x);
        }
        let s = tape.value(x).shape().to_vec();
        let flat = tape.reshape(x, &[s[0], s[1] * s[2]])?;
        let pooled = tape.mean_cols(flat)?;
        let pooled = tape.reshape(pooled, &[s[0], 1])?;
        let logits = tape.matmul(params[self.head_w], pooled)?;
        let logits = tape.reshape(logits, &[self.num_classes])?;
        tape.add(logits, params[self.head_b])
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &params, image)?;
        Ok(tape.value(out).clone())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(self.logits(image)?.data()))
    }

    /// Fraction of images whose argmax logit is the label.
    pub fn evaluate(&self, images: &[LabeledImage]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::arg("cannot evaluate on an empty image set"));
        }
        let hits = images
            .par_iter()
            .map(|img| {
                Ok(if self.predict(&img.pixels)? == img.label {
                    1.0
                } else {
                    0.0
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(ordered_mean(&hits))
    }

    fn check_labels(&self, dataset: &Dataset) -> Result<()> {
        if dataset.is_empty() {
            return Err(Error::arg("training set is empty"));
        }
        if dataset.num_classes() > self.num_classes {
            return Err(Error::arg(format!(
                "dataset has {} classes, classifier predicts {}",
                dataset.num_classes(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Cross-entropy training on the original images. Records hold the
/// epoch's mean loss and the post-epoch training accuracy.
pub fn pretrain_classifier(
    dataset: &Dataset,
    num_classes: usize,
    train: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, Vec<EpochRecord>)> {
    train.validate()?;
    let mut clf = Classifier::new(num_classes, seed)?;
    clf.check_labels(dataset)?;
    let mut adam = AdamState::new(&clf.store, train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[stream::CLASSIFIER_SHUFFLE]));
    let mut log = Vec::with_capacity(train.epochs);
    for epoch in 1..=train.epochs {
        let mut losses = Vec::new();
        for batch in shuffled_batches(dataset.len(), train.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let params = clf.store.bind(&mut tape);
            let mut terms = Vec::with_capacity(batch.len());
            for &i in &batch {
                let img = &dataset.images()[i];
                let logits = clf.forward(&mut tape, &params, &img.pixels)?;
                terms.push(tape.cross_entropy(logits, img.label)?);
            }
            let stacked = tape.concat_rows(&terms)?;
            let loss = tape.mean(stacked);
            losses.push(finite(tape.value(loss).item(), epoch)?);
            let grads = params.collect(&tape.backward(loss)?, &clf.store);
            adam.step(&mut clf.store, &grads)?;
        }
        log.push(EpochRecord {
            epoch,
            split: dataset.split().to_string(),
            loss: ordered_mean(&losses),
            accuracy: clf.evaluate(dataset.images())?,
        });
    }
    Ok((clf, log))
}

fn finite(v: f64, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "classifier loss {v} at epoch {epoch}"
        )))
    }
}

/// Frozen sender and receiver networks between the original image and the
/// classifier.
#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a> {
    pub encoder: &'a VitEncoder,
    pub decoder: &'a Decoder,
}

/// Reconstructions of `dataset` after `transport`, masks filled with
/// `fill_seed(id)`. Pixels are rounded to `f32`.
pub fn reconstruct_encoded(
    dataset: &Dataset,
    encoded: &[EncodedImage],
    decoder: &Decoder,
    transport: &Transport,
    fill_seed: impl Fn(u32) -> u64 + Sync,
) -> Result<(Dataset, Vec<SelectionMask>)> {
    if encoded.len() != dataset.len() {
        return Err(Error::arg("encoded cache does not match the dataset"));
    }
    let pairs = dataset
        .images()
        .par_iter()
        .enumerate()
        .map(|(i, img)| {
            let (z_hat, mask) = receive(transport, i, &encoded[i], img.id, fill_seed(img.id))?;
            let mut pixels = decoder.decode(&z_hat)?;
            pixels.round_to_f32();
            Ok((
                LabeledImage {
                    id: img.id,
                    label: img.label,
                    pixels,
                },
                mask,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (images, masks) = pairs.into_iter().unzip();
    let out = Dataset::new(
        images,
        dataset.num_classes(),
        dataset.height(),
        dataset.width(),
        dataset.split(),
    )?;
    Ok((out, masks))
}

/// Reconstructions of `dataset` through `pipeline`, masks filled from
/// `seed`.
pub fn reconstruct_dataset(
    dataset: &Dataset,
    pipeline: Pipeline<'_>,
    transport: &Transport,
    seed: u64,
) -> Result<(Dataset, Vec<SelectionMask>)> {
    let encoded = encode_dataset(pipeline.encoder, dataset)?;
    reconstruct_encoded(dataset, &encoded, pipeline.decoder, transport, |id| {
        crate::decoder::fill_seed(seed, 0, id)
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FineTuneConfig {
    /// Weight of the original-image term.
    pub beta: f64,
    pub rate: f64,
    pub alpha: f64,
    pub train: TrainConfig,
    pub seed: u64,
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::arg(format!("beta {} outside [0, 1]", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::arg(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        crate::channel::budget_for_rate(self.rate, 1)?;
        self.train.validate()
    }
}

/// Per-epoch means of the mixed loss and its two cross-entropy terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineTuneEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub original_loss: f64,
    pub compressed_loss: f64,
}

/// `beta * CE(y(x), c) + (1 - beta) * CE(y(x_hat), c)` with its terms.
pub fn mixed_loss(
    tape: &mut Tape,
    params: &Bound,
    clf: &Classifier,
    original: &Tensor,
    reconstruction: &Tensor,
    label: usize,
    beta: f64,
) -> Result<(Var, Var, Var)> {
    let lo = clf.forward(tape, params, original)?;
    let l1 = tape.cross_entropy(lo, label)?;
    let lr = clf.forward(tape, params, reconstruction)?;
    let l2 = tape.cross_entropy(lr, label)?;
    let a = tape.scale(l1, beta);
    let b = tape.scale(l2, 1.0 - beta);
    Ok((tape.add(a, b)?, l1, l2))
}

/// Fine-tunes a copy of `clf` on the mixed loss. Reconstructions are
/// regenerated every epoch with fresh random-fill seeds; the pipeline is
/// only read.
pub fn finetune(
    clf: &Classifier,
    dataset: &Dataset,
    pipeline: Pipeline<'_>,
    cfg: &FineTuneConfig,
) -> Result<(Classifier, Vec<FineTuneEpoch>)> {
    cfg.validate()?;
    clf.check_labels(dataset)?;
    let mut clf = clf.clone();
    let encoded = encode_dataset(pipeline.encoder, dataset)?;
    let transport = Transport::Channel {
        channel: crate::channel::ChannelModel::fixed(cfg.rate)?,
        alpha: cfg.alpha,
    };
    let mut adam = AdamState::new(&clf.store, cfg.train.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stream::FINETUNE_SHUFFLE]));
    let mut log = Vec::with_capacity(cfg.train.epochs);
    for epoch in 1..=cfg.train.epochs {
        let (recon, _) =
            reconstruct_encoded(dataset, &encoded, pipeline.decoder, &transport, |id| {
                derive_seed(cfg.seed, &[stream::FINETUNE_MASK, epoch as u64, id as u64])
            })?;
        let (mut total, mut first, mut second) = (Vec::new(), Vec::new(), Vec::new());
        for batch in shuffled_batches(dataset.len(), cfg.train.batch_size, &mut rng) {
            let mut tape = Tape::new();
            let params = clf.store.bind(&mut tape);
            let (mut terms, mut t1, mut t2) = (Vec::new(), Vec::new(), Vec::new());
            for &i in &batch {
                let img = &dataset.images()[i];
                let (l, l1, l2) = mixed_loss(
                    &mut tape,
                    &params,
                    &clf,
                    &img.pixels,
                    &recon.images()[i].pixels,
                    img.label,
                    cfg.beta,
                )?;
                terms.push(l);
                t1.push(tape.value(l1).item());
                t2.push(tape.value(l2).item());
            }
            let stacked = tape.concat_rows(&terms)?;
            let loss = tape.mean(stacked);
            total.push(finite(tape.value(loss).item(), epoch)?);
            first.push(ordered_mean(&t1));
            second.push(ordered_mean(&t2));
            let grads = params.collect(&tape.backward(loss)?, &clf.store);
            adam.step(&mut clf.store, &grads)?;
        }
        log.push(FineTuneEpoch {
            epoch,
            loss: ordered_mean(&total),
            original_loss: ordered_mean(&first),
            compressed_loss: ordered_mean(&second),
        });
    }
    Ok((clf, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logits_shape() {
        let c = Classifier::new(4, 0).unwrap();
        assert_eq!(
            c.logits(&Tensor::full(&[3, 32, 32], 0.5)).unwrap().shape(),
            &[4]
        );
        assert!(c.logits(&Tensor::zeros(&[1, 32, 32])).is_err());
    }

    #[test]
    fn empty_evaluation_is_an_error() {
        assert!(Classifier::new(4, 0).unwrap().evaluate(&[]).is_err());
    }

    #[test]
    fn mixed_loss_is_convex_combination() {
        let c = Classifier::new(3, 1).unwrap();
        let a = Tensor::full(&[3, 16, 16], 0.2);
        let b = Tensor::full(&[3, 16, 16], 0.7);
        let mut tape = Tape::new();
        let params = c.params().bind(&mut tape);
        let (l, l1, l2) = mixed_loss(&mut tape, &params, &c, &a, &b, 2, 0.3).unwrap();
        let want = 0.3 * tape.value(l1).item() + 0.7 * tape.value(l2).item();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }
}
