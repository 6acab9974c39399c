use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use semcom::classifier::{Classifier, Pipeline};
use semcom::decoder::{evaluate_decoder, Decoder, Transport};
use semcom::experiment::{self as exp, append_rows, ExperimentConfig, MetricsRow};
use semcom::vit::VitEncoder;
use semcom::{Error, Result};

#[derive(Parser)]
#[command(
    name = "semcom",
    version,
    about = "Attention-driven semantic image transmission at toy scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; defaults are used for missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Compression rate in (0, 1].
    #[arg(long, global = true)]
    rate: Option<f64>,
    /// Fraction of the patch budget chosen by attention score.
    #[arg(long, global = true)]
    alpha: Option<f64>,
    /// Weight of the original-image term when fine-tuning.
    #[arg(long, global = true)]
    beta: Option<f64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test sets.
    GenData,
    /// Stage 1: train the encoder.
    TrainEncoder,
    /// Stage 2: train a decoder for one (rate, alpha) cell.
    TrainDecoder,
    /// Pretrain the receiver classifier on original images.
    TrainClassifier,
    /// Fine-tune the classifier on reconstructions of one cell.
    FinetuneClassifier,
    /// Report test masked MSE and accuracies for one cell.
    Eval,
    /// Run every stage over the configured grid.
    RunAll,
    /// Write original/reconstruction pairs and masks for a few test images.
    DumpExamples {
        #[arg(long, default_value_t = 3)]
        count: usize,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    seed: u64,
    rate: f64,
    alpha: f64,
}

impl Ctx {
    fn new(c: &Common) -> Result<Self> {
        let mut cfg = match &c.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = c.seed {
            cfg.seeds = vec![s];
        }
        if let Some(b) = c.beta {
            cfg.beta = b;
        }
        if let Some(o) = &c.out {
            cfg.out_dir = o.clone();
        }
        cfg.validate()?;
        let rate = c.rate.unwrap_or(cfg.rates[0]);
        let alpha = c.alpha.unwrap_or(cfg.alphas[0]);
        semcom::channel::budget_for_rate(rate, 1)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Argument(format!("alpha {alpha} outside [0, 1]")));
        }
        Ok(Self {
            seed: cfg.seeds[0],
            cfg,
            rate,
            alpha,
        })
    }

    fn record(&self, rows: &[MetricsRow]) -> Result<()> {
        std::fs::create_dir_all(&self.cfg.out_dir)?;
        append_rows(&self.cfg.out_dir.join("metrics.csv"), rows)
    }

    fn require(&self, path: PathBuf, what: &str) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::Precondition(format!(
                "{} not found; {what} first",
                path.display()
            )))
        }
    }

    fn encoder(&self) -> Result<VitEncoder> {
        let p = self.require(exp::encoder_path(&self.cfg, self.seed), "run train-encoder")?;
        VitEncoder::load(self.cfg.vit(), &p)
    }

    fn decoder(&self) -> Result<Decoder> {
        let p = self.require(
            exp::decoder_path(&self.cfg, self.seed, self.rate, self.alpha),
            "run train-decoder with this --rate/--alpha",
        )?;
        Decoder::load(self.cfg.decoder_config(), &p)
    }

    fn classifier(&self) -> Result<Classifier> {
        let p = self.require(
            exp::classifier_path(&self.cfg, self.seed),
            "run train-classifier",
        )?;
        Classifier::load(self.cfg.num_classes, &p)
    }
}

fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli.common)?;
    let cfg = &ctx.cfg;
    match cli.command {
        Command::GenData => {
            let (train, test) = exp::generate_data(cfg)?;
            let (tp, sp) = exp::data_paths(cfg);
            println!("{} train images -> {}", train.len(), tp.display());
            println!("{} test images -> {}", test.len(), sp.display());
        }
        Command::TrainEncoder => {
            let (train, test) = exp::load_or_generate_data(cfg)?;
            let (_, rows) = exp::stage_encoder(cfg, ctx.seed, &train, &test)?;
            ctx.record(&rows)?;
            print_last(&rows);
        }
        Command::TrainDecoder => {
            let (train, test) = exp::load_or_generate_data(cfg)?;
            let enc = ctx.encoder()?;
            let (_, rows) =
                exp::stage_decoder(cfg, ctx.seed, &enc, &train, &test, ctx.rate, ctx.alpha)?;
            ctx.record(&rows)?;
            print_last(&rows);
        }
        Command::TrainClassifier => {
            let (train, test) = exp::load_or_generate_data(cfg)?;
            let (_, rows) = exp::stage_classifier(cfg, ctx.seed, &train, &test)?;
            ctx.record(&rows)?;
            print_last(&rows);
        }
        Command::FinetuneClassifier => {
            let (train, test) = exp::load_or_generate_data(cfg)?;
            let (enc, dec, clf) = (ctx.encoder()?, ctx.decoder()?, ctx.classifier()?);
            let pipe = Pipeline {
                encoder: &enc,
                decoder: &dec,
            };
            let (_, rows) = exp::stage_finetune(
                cfg, ctx.seed, pipe, &clf, &train, &test, ctx.rate, ctx.alpha,
            )?;
            ctx.record(&rows)?;
            print_last(&rows);
        }
        Command::Eval => {
            let (_, test) = exp::load_or_generate_data(cfg)?;
            let (enc, dec) = (ctx.encoder()?, ctx.decoder()?);
            let tr = Transport::Channel {
                channel: semcom::channel::ChannelModel::fixed(ctx.rate)?,
                alpha: ctx.alpha,
            };
            let mse = evaluate_decoder(&test, &enc, &dec, &tr, ctx.seed)?;
            let (_, enc_acc) = enc.evaluate(&test)?;
            println!("rate {} alpha {}", ctx.rate, ctx.alpha);
            println!("encoder test accuracy: {enc_acc}");
            println!("test masked mse: {mse}");
            let pipe = Pipeline {
                encoder: &enc,
                decoder: &dec,
            };
            if let Ok(clf) = ctx.classifier() {
                let (o, c) =
                    exp::evaluate_classifier(&clf, pipe, &test, ctx.rate, ctx.alpha, ctx.seed)?;
                println!("classifier accuracy: original {o}, compressed {c}");
            }
            let tuned = exp::finetuned_path(cfg, ctx.seed, ctx.rate, ctx.alpha);
            if tuned.exists() {
                let clf = Classifier::load(cfg.num_classes, &tuned)?;
                let (o, c) =
                    exp::evaluate_classifier(&clf, pipe, &test, ctx.rate, ctx.alpha, ctx.seed)?;
                println!("fine-tuned accuracy: original {o}, compressed {c}");
            }
        }
        Command::RunAll => {
            let report = exp::run_pipeline(cfg)?;
            println!(
                "{} metrics rows -> {}",
                report.rows.len(),
                cfg.out_dir.join("metrics.csv").display()
            );
            if let Some(summary) = report.summary {
                println!("{}", exp::RateSummary::CSV_HEADER);
                for s in summary {
                    println!("{s}");
                }
            }
        }
        Command::DumpExamples { count } => {
            let (_, test) = exp::load_or_generate_data(cfg)?;
            let (enc, dec) = (ctx.encoder()?, ctx.decoder()?);
            let dir = cfg
                .out_dir
                .join(format!("examples-r{}-a{}", ctx.rate, ctx.alpha));
            let pipe = Pipeline {
                encoder: &enc,
                decoder: &dec,
            };
            let files =
                exp::dump_examples(pipe, &test, ctx.rate, ctx.alpha, ctx.seed, count, &dir)?;
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn print_last(rows: &[MetricsRow]) {
    let last_epoch = rows.iter().map(|r| r.epoch).max().unwrap_or(0);
    for r in rows.iter().filter(|r| r.epoch == last_epoch) {
        println!("{r}");
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) => 2,
        Error::Config(_) => 3,
        Error::Format(_) => 4,
        Error::Io(_) => 5,
        Error::Precondition(_) => 6,
        Error::CorruptPacket(_) => 7,
        Error::Numerical(_) => 8,
        Error::Shape(_) => 9,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
