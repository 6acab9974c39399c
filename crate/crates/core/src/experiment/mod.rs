//! Staged training runs over the rate/alpha grid, with metrics, manifest
//! and checkpoints under one output directory.
//!
//! Layout of `out_dir`:
//!
//! ```text
//! data/{train,test}.semd
//! seed-<s>/encoder.semc
//! seed-<s>/decoder-r<rate>-a<alpha>.semc   (and decoder-bypass.semc)
//! seed-<s>/classifier.semc
//! seed-<s>/classifier-r<rate>-a<alpha>.semc
//! metrics.csv  summary.csv  manifest.txt
//! ```

mod config;
mod metrics;

pub use config::{ExperimentConfig, StageConfig};
pub use metrics::{
    append_rows, compare_rates, parse_csv, render_csv, MetricsRow, RateSummary, DECODER_LOSS,
    METRICS_HEADER,
};

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::channel::ChannelModel;
use crate::classifier::{
    finetune, pretrain_classifier, reconstruct_dataset, Classifier, FineTuneConfig, Pipeline,
};
use crate::data::{generate_synthetic, load_dataset, save_dataset, Dataset, Split};
use crate::decoder::{evaluate_decoder, train_decoder, Decoder, Transport};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::tensor::write_atomic;
use crate::vit::{train_encoder, VitEncoder};

/// Seed of the held-out masks used for every evaluation.
const EVAL_STREAM: u64 = 0xE7A1;

pub fn experiment_id(cfg: &ExperimentConfig, seed: u64) -> String {
    format!("{}-s{seed}", cfg.experiment)
}

pub fn seed_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join(format!("seed-{seed}"))
}

pub fn data_paths(cfg: &ExperimentConfig) -> (PathBuf, PathBuf) {
    let d = cfg.out_dir.join("data");
    (d.join("train.semd"), d.join("test.semd"))
}

pub fn encoder_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("encoder.semc")
}

pub fn decoder_path(cfg: &ExperimentConfig, seed: u64, rate: f64, alpha: f64) -> PathBuf {
    seed_dir(cfg, seed).join(format!("decoder-r{rate}-a{alpha}.semc"))
}

pub fn bypass_decoder_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("decoder-bypass.semc")
}

pub fn classifier_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    seed_dir(cfg, seed).join("classifier.semc")
}

pub fn finetuned_path(cfg: &ExperimentConfig, seed: u64, rate: f64, alpha: f64) -> PathBuf {
    seed_dir(cfg, seed).join(format!("classifier-r{rate}-a{alpha}.semc"))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn transport(rate: f64, alpha: f64) -> Result<Transport> {
    Ok(Transport::Channel {
        channel: ChannelModel::fixed(rate)?,
        alpha,
    })
}

/// Generates the train and test sets and writes them under `data/`.
pub fn generate_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    cfg.validate()?;
    let train = generate_synthetic(&cfg.train_data(), Split::Train)?;
    let test = generate_synthetic(&cfg.test_data(), Split::Test)?;
    let (tp, sp) = data_paths(cfg);
    ensure_parent(&tp)?;
    save_dataset(&train, &tp)?;
    save_dataset(&test, &sp)?;
    Ok((train, test))
}

/// Loads `data/` if both files exist, otherwise generates them.
pub fn load_or_generate_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (tp, sp) = data_paths(cfg);
    if tp.exists() && sp.exists() {
        let train = load_dataset(&tp, cfg.patch, Split::Train)?;
        let test = load_dataset(&sp, cfg.patch, Split::Test)?;
        for d in [&train, &test] {
            if (d.height(), d.width()) != (cfg.height, cfg.width)
                || d.num_classes() > cfg.num_classes
            {
                return Err(Error::Config(format!(
                    "stored dataset ({}x{}, {} classes) does not match the config",
                    d.height(),
                    d.width(),
                    d.num_classes()
                )));
            }
        }
        return Ok((train, test));
    }
    generate_data(cfg)
}

/// Stage 1: trains and saves the encoder.
pub fn stage_encoder(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<(VitEncoder, Vec<MetricsRow>)> {
    let exp = experiment_id(cfg, seed);
    let (enc, log) = train_encoder(train, cfg.vit(), &cfg.encoder.train(), seed)?;
    let mut rows = Vec::new();
    for r in &log {
        rows.push(MetricsRow::new(
            &exp,
            "encoder",
            None,
            r.epoch,
            "train_loss",
            r.loss,
        ));
        rows.push(MetricsRow::new(
            &exp,
            "encoder",
            None,
            r.epoch,
            "train_accuracy",
            r.accuracy,
        ));
    }
    let (test_loss, test_acc) = enc.evaluate(test)?;
    let last = cfg.encoder.epochs;
    rows.push(MetricsRow::new(
        &exp,
        "encoder",
        None,
        last,
        "test_loss",
        test_loss,
    ));
    rows.push(MetricsRow::new(
        &exp,
        "encoder",
        None,
        last,
        "test_accuracy",
        test_acc,
    ));
    let path = encoder_path(cfg, seed);
    ensure_parent(&path)?;
    enc.save(&path)?;
    Ok((enc, rows))
}

/// Stage 2, one `(rate, alpha)` cell: trains and saves a decoder.
pub fn stage_decoder(
    cfg: &ExperimentConfig,
    seed: u64,
    encoder: &VitEncoder,
    train: &Dataset,
    test: &Dataset,
    rate: f64,
    alpha: f64,
) -> Result<(Decoder, Vec<MetricsRow>)> {
    let tr = transport(rate, alpha)?;
    let cell_seed = derive_seed(seed, &[rate.to_bits(), alpha.to_bits()]);
    let (dec, log) = train_decoder(train, encoder, &tr, &cfg.decoder.train(), cell_seed)?;
    let exp = experiment_id(cfg, seed);
    let cell = Some((rate, alpha));
    let mut rows: Vec<MetricsRow> = log
        .iter()
        .map(|r| MetricsRow::new(&exp, "decoder", cell, r.epoch, DECODER_LOSS, r.loss))
        .collect();
    let test_mse = evaluate_decoder(test, encoder, &dec, &tr, derive_seed(seed, &[EVAL_STREAM]))?;
    rows.push(MetricsRow::new(
        &exp,
        "decoder",
        cell,
        cfg.decoder.epochs,
        "test_masked_mse",
        test_mse,
    ));
    let path = decoder_path(cfg, seed, rate, alpha);
    ensure_parent(&path)?;
    dec.save(&path)?;
    Ok((dec, rows))
}

/// Decoder trained on all patch tokens with no channel in between. Uses
/// the same seed as the `(1, 1)` cell so the two can be compared.
pub fn stage_bypass(
    cfg: &ExperimentConfig,
    seed: u64,
    encoder: &VitEncoder,
    train: &Dataset,
) -> Result<(Decoder, Vec<MetricsRow>)> {
    let cell_seed = derive_seed(seed, &[1f64.to_bits(), 1f64.to_bits()]);
    let (dec, log) = train_decoder(
        train,
        encoder,
        &Transport::Bypass,
        &cfg.decoder.train(),
        cell_seed,
    )?;
    let exp = experiment_id(cfg, seed);
    let rows = log
        .iter()
        .map(|r| MetricsRow::new(&exp, "decoder-bypass", None, r.epoch, DECODER_LOSS, r.loss))
        .collect();
    let path = bypass_decoder_path(cfg, seed);
    ensure_parent(&path)?;
    dec.save(&path)?;
    Ok((dec, rows))
}

/// Stage 3a: pretrains the receiver classifier on originals.
pub fn stage_classifier(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
) -> Result<(Classifier, Vec<MetricsRow>)> {
    let (clf, log) = pretrain_classifier(train, cfg.num_classes, &cfg.classifier.train(), seed)?;
    let exp = experiment_id(cfg, seed);
    let mut rows = Vec::new();
    for r in &log {
        rows.push(MetricsRow::new(
            &exp,
            "classifier",
            None,
            r.epoch,
            "train_loss",
            r.loss,
        ));
        rows.push(MetricsRow::new(
            &exp,
            "classifier",
            None,
            r.epoch,
            "train_accuracy",
            r.accuracy,
        ));
    }
    let acc = clf.evaluate(test.images())?;
    rows.push(MetricsRow::new(
        &exp,
        "classifier",
        None,
        cfg.classifier.epochs,
        "test_accuracy_original",
        acc,
    ));
    let path = classifier_path(cfg, seed);
    ensure_parent(&path)?;
    clf.save(&path)?;
    Ok((clf, rows))
}

/// Test-set accuracy on originals and on reconstructions at `(rate, alpha)`.
pub fn evaluate_classifier(
    clf: &Classifier,
    pipeline: Pipeline<'_>,
    test: &Dataset,
    rate: f64,
    alpha: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let (recon, _) = reconstruct_dataset(
        test,
        pipeline,
        &transport(rate, alpha)?,
        derive_seed(seed, &[EVAL_STREAM]),
    )?;
    Ok((clf.evaluate(test.images())?, clf.evaluate(recon.images())?))
}

/// Stage 3b, one cell: fine-tunes a copy of `clf` with the mixed loss.
/// Epoch 0 rows describe the classifier before fine-tuning.
#[allow(clippy::too_many_arguments)]
pub fn stage_finetune(
    cfg: &ExperimentConfig,
    seed: u64,
    pipeline: Pipeline<'_>,
    clf: &Classifier,
    train: &Dataset,
    test: &Dataset,
    rate: f64,
    alpha: f64,
) -> Result<(Classifier, Vec<MetricsRow>)> {
    let exp = experiment_id(cfg, seed);
    let cell = Some((rate, alpha));
    let mut rows = Vec::new();
    let (orig, comp) = evaluate_classifier(clf, pipeline, test, rate, alpha, seed)?;
    rows.push(MetricsRow::new(
        &exp,
        "finetune",
        cell,
        0,
        "test_accuracy_original",
        orig,
    ));
    rows.push(MetricsRow::new(
        &exp,
        "finetune",
        cell,
        0,
        "test_accuracy_compressed",
        comp,
    ));
    let ft_cfg = FineTuneConfig {
        beta: cfg.beta,
        rate,
        alpha,
        train: cfg.finetune.train(),
        seed: derive_seed(seed, &[rate.to_bits(), alpha.to_bits()]),
    };
    let (tuned, log) = finetune(clf, train, pipeline, &ft_cfg)?;
    for r in &log {
        rows.push(MetricsRow::new(
            &exp,
            "finetune",
            cell,
            r.epoch,
            "train_loss",
            r.loss,
        ));
        rows.push(MetricsRow::new(
            &exp,
            "finetune",
            cell,
            r.epoch,
            "train_loss_original",
            r.original_loss,
        ));
        rows.push(MetricsRow::new(
            &exp,
            "finetune",
            cell,
            r.epoch,
            "train_loss_compressed",
            r.compressed_loss,
        ));
    }
    let (orig, comp) = evaluate_classifier(&tuned, pipeline, test, rate, alpha, seed)?;
    let last = cfg.finetune.epochs;
    rows.push(MetricsRow::new(
        &exp,
        "finetune",
        cell,
        last,
        "test_accuracy_original",
        orig,
    ));
    rows.push(MetricsRow::new(
        &exp,
        "finetune",
        cell,
        last,
        "test_accuracy_compressed",
        comp,
    ));
    let path = finetuned_path(cfg, seed, rate, alpha);
    ensure_parent(&path)?;
    tuned.save(&path)?;
    Ok((tuned, rows))
}

/// Every `(rate, alpha)` pair, rates outermost.
pub fn cells(cfg: &ExperimentConfig) -> Vec<(f64, f64)> {
    cfg.rates
        .iter()
        .flat_map(|&r| cfg.alphas.iter().map(move |&a| (r, a)))
        .collect()
}

/// Output of [`run_pipeline`].
#[derive(Clone, Debug)]
pub struct RunReport {
    pub rows: Vec<MetricsRow>,
    pub summary: Option<Vec<RateSummary>>,
    pub manifest: String,
}

/// Runs every stage for every seed and writes `metrics.csv`,
/// `summary.csv` and `manifest.txt`. Stage-2 and stage-3b cells run in
/// parallel; rows are emitted in a fixed order.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let (train, test) = generate_data(cfg)?;
    let grid = cells(cfg);
    let mut rows = Vec::new();
    let mut manifest = format!(
        "version = {}\nexperiment = {}\ncfg_sha256 = {}\nseeds = {}\n",
        env!("CARGO_PKG_VERSION"),
        cfg.experiment,
        cfg.hash(),
        cfg.seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join(", "),
    );
    for &seed in &cfg.seeds {
        let (enc, r) = stage_encoder(cfg, seed, &train, &test)?;
        rows.extend(r);
        let before = enc.params().checksum();

        let decoders = grid
            .par_iter()
            .map(|&(rate, alpha)| stage_decoder(cfg, seed, &enc, &train, &test, rate, alpha))
            .collect::<Result<Vec<_>>>()?;
        for (_, r) in &decoders {
            rows.extend(r.iter().cloned());
        }
        if cfg.bypass_baseline {
            rows.extend(stage_bypass(cfg, seed, &enc, &train)?.1);
        }
        let after = enc.params().checksum();
        if before != after {
            return Err(Error::Precondition(
                "encoder changed during decoder training".into(),
            ));
        }
        manifest.push_str(&format!(
            "seed.{seed}.experiment_id = {}\nseed.{seed}.encoder_sha256 = {after}\n",
            experiment_id(cfg, seed)
        ));

        if cfg.run_classifier {
            let (clf, r) = stage_classifier(cfg, seed, &train, &test)?;
            rows.extend(r);
            let tuned = grid
                .par_iter()
                .zip(&decoders)
                .map(|(&(rate, alpha), (dec, _))| {
                    let pipe = Pipeline {
                        encoder: &enc,
                        decoder: dec,
                    };
                    stage_finetune(cfg, seed, pipe, &clf, &train, &test, rate, alpha)
                })
                .collect::<Result<Vec<_>>>()?;
            for (_, r) in tuned {
                rows.extend(r);
            }
        }
    }
    let summary = compare_rates(&rows).ok();
    write_atomic(
        &cfg.out_dir.join("metrics.csv"),
        render_csv(&rows).as_bytes(),
    )?;
    if let Some(s) = &summary {
        let mut text = String::from(RateSummary::CSV_HEADER);
        text.push('\n');
        for line in s {
            text.push_str(&format!("{line}\n"));
        }
        write_atomic(&cfg.out_dir.join("summary.csv"), text.as_bytes())?;
    }
    write_atomic(&cfg.out_dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(RunReport {
        rows,
        summary,
        manifest,
    })
}

/// Writes, for each of the first `count` images, the original and its
/// reconstruction as one-image `SEMD` files and the mask bitmap. Returns
/// the paths in write order.
pub fn dump_examples(
    pipeline: Pipeline<'_>,
    images: &Dataset,
    rate: f64,
    alpha: f64,
    seed: u64,
    count: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let picked: Vec<_> = images.images().iter().take(count).cloned().collect();
    let subset = Dataset::new(
        picked,
        images.num_classes(),
        images.height(),
        images.width(),
        images.split(),
    )?;
    let (recon, masks) = reconstruct_dataset(&subset, pipeline, &transport(rate, alpha)?, seed)?;
    let mut written = Vec::new();
    for ((orig, rec), mask) in subset.images().iter().zip(recon.images()).zip(&masks) {
        let one = |img: &crate::data::LabeledImage| {
            Dataset::new(
                vec![img.clone()],
                images.num_classes(),
                images.height(),
                images.width(),
                images.split(),
            )
        };
        let base = format!("example-{}", orig.id);
        let op = out_dir.join(format!("{base}-original.semd"));
        let rp = out_dir.join(format!("{base}-reconstruction.semd"));
        let mp = out_dir.join(format!("{base}-mask.bin"));
        save_dataset(&one(orig)?, &op)?;
        save_dataset(&one(rec)?, &rp)?;
        write_atomic(&mp, &mask.to_bitmap())?;
        written.extend([op, rp, mp]);
    }
    Ok(written)
}
