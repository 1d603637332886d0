use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use perceptra::backbones::{resolve_model, save_weights, BackboneGraph};
use perceptra::classical::{l1_distance, psnr, quality_scores, ssim, SsimConfig};
use perceptra::corpus::{self, CorpusSpec};
use perceptra::eval::{self, BenchmarkSpec, ImageCache};
use perceptra::imaging::{load_dir, Image};
use perceptra::metric::{distance_auto, ChannelWeights, LayerAggregation, MetricOptions};
use perceptra::pretrain::{Objective, PretrainConfig, Pretrainer};
use perceptra::study::{self, Study, StudyMode};
use perceptra::synthesis::{self, GeneratorConfig, PairedCorpus, SynthSchedule};
use perceptra::{Error, Result, Rng};

#[derive(Parser)]
#[command(name = "perceptra", version, about = "Perceptual similarity from self-supervised features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Perceptual distance between two images (JSON report on stdout).
    Distance(DistanceArgs),
    /// Score a metric against a 2AFC trial manifest.
    Eval(EvalArgs),
    /// Generate a synthetic 2AFC benchmark from a corpus directory.
    BenchGen(BenchGenArgs),
    /// Write a procedural image corpus.
    CorpusGen(CorpusGenArgs),
    /// Self-supervised pre-training of a backbone.
    Pretrain(PretrainArgs),
    /// Train the toy translator with a given pixel/perceptual balance.
    Synth(SynthArgs),
    /// Human perceptual study service.
    #[command(subcommand)]
    Study(StudyCommand),
}

#[derive(Args)]
struct ModelArgs {
    /// Weight file or builtin:<kind>:<scale>:<seed>.
    #[arg(long, default_value = "builtin:mini_vgg:tiny:0")]
    model: String,
    /// Channel weights JSON (`{"per_layer": [[...], ...]}`); all ones when omitted.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value = "sum")]
    agg: String,
}

impl ModelArgs {
    fn load(&self) -> Result<(BackboneGraph, ChannelWeights, MetricOptions)> {
        let model = resolve_model(&self.model)?;
        let weights = match &self.weights {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
                let w: ChannelWeights = serde_json::from_str(&text)?;
                w.check(&model.tap_channels())?;
                w
            }
            None => ChannelWeights::ones(&model),
        };
        let aggregation: LayerAggregation = self.agg.parse()?;
        Ok((model, weights, MetricOptions { aggregation, normalize: true }))
    }
}

#[derive(Args)]
struct DistanceArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    /// Require a transformer backbone.
    #[arg(long)]
    vit: bool,
    /// Also report PSNR, SSIM and ℓ1.
    #[arg(long)]
    scores: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    trials: PathBuf,
    /// coper, l1, psnr or ssim.
    #[arg(long, default_value = "coper")]
    metric: String,
    /// Also write a per-category CSV table here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct BenchGenArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 500)]
    n: usize,
}

#[derive(Args)]
struct CorpusGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    count: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    objective: String,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Starting backbone.
    #[arg(long, default_value = "builtin:mini_vgg:tiny:0")]
    model: String,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    lambda1: f64,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Backbone for the perceptual loss.
    #[arg(long, default_value = "builtin:mini_vgg:tiny:0")]
    loss_model: String,
    /// Side length images are resized to.
    #[arg(long, default_value_t = 32)]
    size: usize,
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Serve a trial manifest to raters over HTTP.
    Serve {
        #[arg(long)]
        trials: PathBuf,
        #[arg(long, default_value = "afc")]
        mode: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "judgments.jsonl")]
        db: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Copy the judgment log to a JSON-lines file.
    Export {
        #[arg(long, default_value = "judgments.jsonl")]
        db: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn db_path(flag: &Path) -> PathBuf {
    std::env::var_os(study::DB_ENV).map(PathBuf::from).unwrap_or_else(|| flag.to_path_buf())
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parent_dir(p: &Path) -> &Path {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Distance(args) => {
            let (model, weights, options) = args.model.load()?;
            if args.vit && model.vit_config().is_none() {
                return Err(Error::invalid(format!("--vit given but {} is not a transformer", model.name)));
            }
            let a = Image::load(&args.a)?;
            let b = Image::load(&args.b)?;
            let mut report = distance_auto(&model, &weights, &a.to_tensor(), &b.to_tensor(), options)?;
            if args.scores {
                report.scores = Some(quality_scores(&a.to_tensor(), &b.to_tensor(), &SsimConfig::default())?);
            }
            print_json(&report)
        }
        Command::Eval(args) => {
            let trials = eval::read_manifest(&args.trials)?;
            let cache = ImageCache::new(parent_dir(&args.trials));
            let load = |r: &str| cache.get(r);
            let report = match args.metric.as_str() {
                "coper" => {
                    let (model, weights, options) = args.model.load()?;
                    eval::evaluate_metric(
                        |x, y| Ok(distance_auto(&model, &weights, &x.to_tensor(), &y.to_tensor(), options)?.total),
                        &trials,
                        &load,
                    )?
                }
                "l1" => eval::evaluate_metric(|x, y| l1_distance(&x.to_tensor(), &y.to_tensor()), &trials, &load)?,
                // similarity scores are turned into distances
                "psnr" => eval::evaluate_metric(
                    |x, y| Ok(1.0 / (1.0 + psnr(&x.to_tensor(), &y.to_tensor(), 1.0)?.max(0.0))),
                    &trials,
                    &load,
                )?,
                "ssim" => eval::evaluate_metric(
                    |x, y| Ok(1.0 - ssim(&x.to_tensor(), &y.to_tensor(), &SsimConfig::default())?),
                    &trials,
                    &load,
                )?,
                other => return Err(Error::invalid(format!("unknown metric {other:?}"))),
            };
            if let Some(path) = &args.csv {
                std::fs::write(path, report.to_csv()?).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            }
            print_json(&report)
        }
        Command::BenchGen(args) => {
            let images = load_dir(&args.corpus)?;
            let spec = BenchmarkSpec { trials: args.n, ..BenchmarkSpec::default() };
            let trials = eval::generate_synthetic_benchmark(&images, &spec, &Rng::new(args.seed))?;
            let entries = eval::write_benchmark(&args.out, &trials)?;
            eprintln!("wrote {} trials to {}", entries.len(), args.out.display());
            Ok(())
        }
        Command::CorpusGen(args) => {
            let spec = CorpusSpec { count: args.count, size: args.size, seed: args.seed };
            let images = corpus::generate(&spec);
            corpus::write_dir(&images, &args.out)?;
            println!("{}", corpus::corpus_hash(&images));
            Ok(())
        }
        Command::Pretrain(args) => {
            let objective: Objective = args.objective.parse()?;
            let images = load_dir(&args.corpus)?;
            let model = resolve_model(&args.model)?;
            let mut config = PretrainConfig::toy(objective, args.steps, args.seed);
            if let Some(bs) = args.batch_size {
                config.schedule.batch_size = bs;
            }
            let mut trainer = Pretrainer::new(model, images, config)?;
            for _ in 0..args.steps {
                let r = trainer.step()?;
                println!("{}", serde_json::to_string(&r)?);
            }
            let model = trainer.finish();
            std::fs::write(&args.out, save_weights(&model)).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
            Ok(())
        }
        Command::Synth(args) => {
            let latents: Vec<Image> =
                load_dir(&args.corpus)?.into_iter().map(|im| im.to_gray().resize(args.size, args.size)).collect();
            let corpus = PairedCorpus::from_latents(&latents, 0.2, args.seed)?;
            let loss_net = resolve_model(&args.loss_model)?;
            std::fs::create_dir_all(&args.out).map_err(|e| Error::Io { path: args.out.clone(), source: e })?;
            let history_path = args.out.join("history.jsonl");
            let mut log = std::fs::File::create(&history_path).map_err(|e| Error::Io { path: history_path.clone(), source: e })?;
            let schedule = SynthSchedule { steps: args.steps, ..SynthSchedule::default() };
            let run = synthesis::train_translator_with(
                &corpus,
                &GeneratorConfig::default(),
                &loss_net,
                args.lambda1,
                &schedule,
                args.seed,
                |h| {
                    use std::io::Write;
                    let mut line = serde_json::to_vec(h)?;
                    line.push(b'\n');
                    log.write_all(&line).map_err(|e| Error::Io { path: history_path.clone(), source: e })
                },
            )?;
            let gen_path = args.out.join("generator.bin");
            std::fs::write(&gen_path, run.generator.to_weight_file().to_bytes())
                .map_err(|e| Error::Io { path: gen_path, source: e })?;
            print_json(&run.final_val())
        }
        Command::Study(StudyCommand::Serve { trials, mode, port, db, host }) => {
            let mode: StudyMode = mode.parse()?;
            let manifest = study::read_study_manifest(&trials)?;
            let db = db_path(&db);
            let study = Study::open(manifest, parent_dir(&trials), mode, &db)?;
            let addr: SocketAddr =
                format!("{host}:{port}").parse().map_err(|e| Error::invalid(format!("bad address {host}:{port}: {e}")))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Io { path: db.clone(), source: e })?;
            rt.block_on(study::serve(study, addr)).map_err(|e| Error::invalid(format!("server: {e}")))
        }
        Command::Study(StudyCommand::Export { db, out }) => {
            let n = study::export(db_path(&db), &out)?;
            eprintln!("exported {n} judgments");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
