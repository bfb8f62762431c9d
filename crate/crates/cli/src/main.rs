mod config;

use clap::{Args, Parser, Subcommand};
use config::{FileConfig, List, Pair};
use dnp_core::checkpoint::{self, Checkpoint};
use dnp_core::pnm;
use dnp_core::prototype::ProtoLossKind;
use dnp_core::recon::{LossBreakdown, ModelState, ReconObjective, VariantMode};
use dnp_core::scoring::{
    evaluate, image_score, score_image, MetricReport, ScoreMode, ScoringConfig,
};
use dnp_core::synth::{self, Dataset, DatasetSpec};
use dnp_core::trainer::{
    collapse_experiment, train, EvalPoint, TrainConfig, TrainData, TrainObserver,
};
use dnp_core::vit::ImageSample;
use dnp_core::{Error, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "dnp",
    version,
    about = "Prototype-guided feature reconstruction for anomaly detection"
)]
struct Cli {
    /// Plain-text `key = value` file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as PGM files plus a manifest.
    Gen(GenArgs),
    /// Train a model and write its checkpoint and loss log.
    Train(TrainCmd),
    /// Score a test split and report AUC, F1, ACC, SEN and SPE.
    Eval(EvalArgs),
    /// Write anomaly maps and heatmaps for individual images.
    Infer(InferArgs),
    /// Compare prototype usage under the coherence and DAA losses.
    Collapse(CollapseCmd),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    seed: Option<u64>,
    /// Number of normal training images.
    #[arg(long)]
    train: Option<usize>,
    /// Test split sizes as `normal,anomalous`.
    #[arg(long)]
    test: Option<Pair<usize>>,
    /// Image side length in pixels.
    #[arg(long)]
    size: Option<usize>,
    /// Blob intensity shift range `lo,hi`.
    #[arg(long)]
    delta: Option<Pair<f64>>,
    /// Anomaly semi-axis range in pixels, `lo,hi`.
    #[arg(long)]
    radius: Option<Pair<f64>>,
    /// Probability that an anomaly is a texture swap rather than a blob.
    #[arg(long)]
    swap_prob: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

const GEN_KEYS: &[&str] = &[
    "seed",
    "train",
    "test",
    "size",
    "delta",
    "radius",
    "swap-prob",
    "out",
];

#[derive(Args, Clone)]
struct DataArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Inline synthetic dataset, e.g. `seed=7,train=200,test=50:50`.
    #[arg(long)]
    synth: Option<String>,
}

#[derive(Args, Clone)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Number of prototypes.
    #[arg(long)]
    protos: Option<usize>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    lr_encoder: Option<f64>,
    /// `daa` or `coherence`.
    #[arg(long)]
    proto_loss: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    log_interval: Option<usize>,
    /// Steps between test-split evaluations; 0 disables.
    #[arg(long)]
    eval_interval: Option<usize>,
    /// Steps between intermediate checkpoints; 0 disables.
    #[arg(long)]
    checkpoint_interval: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Disable soft-mining token weights.
    #[arg(long)]
    no_mining: bool,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    w_max: Option<f64>,
    /// Reconstruction objective: `token` or `global`.
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    decoder_depth: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
}

const TRAIN_KEYS: &[&str] = &[
    "data",
    "synth",
    "mode",
    "iters",
    "batch",
    "lambda",
    "beta",
    "protos",
    "lr-head",
    "lr-encoder",
    "proto-loss",
    "seed",
    "log-interval",
    "eval-interval",
    "checkpoint-interval",
    "warmup",
    "no-mining",
    "gamma",
    "w-max",
    "objective",
    "decoder-depth",
    "dropout",
];

#[derive(Args)]
struct TrainCmd {
    #[command(flatten)]
    train: TrainArgs,
    /// Output directory for the checkpoint and logs.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Gaussian smoothing of the pixel map, in pixels.
    #[arg(long)]
    sigma: Option<f64>,
    /// Image score: `top1`, `max` or `mean`.
    #[arg(long)]
    score: Option<String>,
}

const SCORE_KEYS: &[&str] = &["sigma", "score", "checkpoint", "seed", "out"];

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    scoring: ScoreArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the metric report as CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    scoring: ScoreArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for maps and heatmaps.
    #[arg(long)]
    out: Option<PathBuf>,
    /// PGM images to score.
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct CollapseCmd {
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    seeds: Option<List<u64>>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } | Error::Checkpoint(_) => 3,
        Error::Divergence { .. } | Error::Numeric { .. } => 4,
        Error::Metric(_) => 5,
        Error::Dimension { .. } | Error::Config(_) | Error::Argument(_) | Error::State(_) => 2,
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn key_list<'a>(groups: &[&[&'a str]]) -> Vec<&'a str> {
    groups.iter().flat_map(|g| g.iter().copied()).collect()
}

fn gen_spec(a: &GenArgs, f: &FileConfig) -> Result<DatasetSpec> {
    let d = DatasetSpec::default();
    let test = f.pick(a.test, "test", Pair(d.test_normal, d.test_anomalous))?;
    let delta = f.pick(a.delta, "delta", Pair(d.anomaly.delta.0, d.anomaly.delta.1))?;
    let radius = f.pick(
        a.radius,
        "radius",
        Pair(d.anomaly.radius.0, d.anomaly.radius.1),
    )?;
    let spec = DatasetSpec {
        seed: f.pick(a.seed, "seed", d.seed)?,
        size: f.pick(a.size, "size", d.size)?,
        train: f.pick(a.train, "train", d.train)?,
        test_normal: test.0,
        test_anomalous: test.1,
        anomaly: synth::AnomalyParams {
            delta: (delta.0, delta.1),
            radius: (radius.0, radius.1),
            swap_prob: f.pick(a.swap_prob, "swap-prob", d.anomaly.swap_prob)?,
            ..d.anomaly
        },
        ..d
    };
    spec.validate()?;
    Ok(spec)
}

fn cmd_gen(a: &GenArgs, f: &FileConfig) -> Result<()> {
    f.check_keys(GEN_KEYS)?;
    let spec = gen_spec(a, f)?;
    let out = f.pick(a.out.clone(), "out", PathBuf::from("data"))?;
    let ds = synth::generate(&spec)?;
    synth::export(&ds, &out)?;
    println!(
        "wrote {} train and {} test images to {}",
        ds.train.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

/// Parses `key=value` pairs separated by commas; `test` takes `normal:anomalous`.
fn inline_spec(s: &str) -> Result<DatasetSpec> {
    let mut spec = DatasetSpec::default();
    for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let bad = || Error::Config(format!("bad synthetic dataset entry {item:?}"));
        let (k, v) = item.split_once('=').ok_or_else(bad)?;
        let num = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
        match k.trim() {
            "seed" => spec.seed = v.trim().parse().map_err(|_| bad())?,
            "train" => spec.train = num(v)?,
            "size" => spec.size = num(v)?,
            "test" => {
                let (n, an) = v.split_once(':').ok_or_else(bad)?;
                spec.test_normal = num(n)?;
                spec.test_anomalous = num(an)?;
            }
            _ => return Err(bad()),
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn load_data(a: &DataArgs, f: &FileConfig) -> Result<Dataset> {
    let dir = f.pick_opt(a.data.clone(), "data")?;
    let inline = f.pick_opt(a.synth.clone(), "synth")?;
    match (dir, inline) {
        (Some(_), Some(_)) => Err(Error::Config(
            "give either --data or --synth, not both".into(),
        )),
        (Some(d), None) => synth::import(&d),
        (None, Some(s)) => synth::generate(&inline_spec(&s)?),
        (None, None) => Err(Error::Config(
            "a dataset is required: --data DIR or --synth SPEC".into(),
        )),
    }
}

fn train_config(a: &TrainArgs, f: &FileConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let mode_s = f.pick(a.mode.clone(), "mode", d.mode.as_str().to_string())?;
    let mode = VariantMode::parse(&mode_s).ok_or_else(|| {
        Error::Config(format!("unknown mode {mode_s:?}; use m0, m1, m2 or m2plus"))
    })?;
    let kind_s = f.pick(
        a.proto_loss.clone(),
        "proto-loss",
        d.proto_kind.as_str().to_string(),
    )?;
    let proto_kind = ProtoLossKind::parse(&kind_s)
        .ok_or_else(|| Error::Config(format!("unknown prototype loss {kind_s:?}")))?;
    let objective = match f
        .pick(a.objective.clone(), "objective", "token".to_string())?
        .as_str()
    {
        "token" => ReconObjective::PerToken,
        "global" => ReconObjective::Global,
        other => return Err(Error::Config(format!("unknown objective {other:?}"))),
    };
    let mut model = d.model.clone();
    model.prototypes.count = f.pick(a.protos, "protos", model.prototypes.count)?;
    model.decoder_depth = f.pick(a.decoder_depth, "decoder-depth", model.decoder_depth)?;
    model.bottleneck_dropout = f.pick(a.dropout, "dropout", model.bottleneck_dropout)?;
    let mut mining = d.mining;
    mining.enabled = !f.flag(a.no_mining, "no-mining")?;
    mining.gamma = f.pick(a.gamma, "gamma", mining.gamma)?;
    mining.w_max = f.pick(a.w_max, "w-max", mining.w_max)?;
    let cfg = TrainConfig {
        mode,
        iterations: f.pick(a.iters, "iters", d.iterations)?,
        batch: f.pick(a.batch, "batch", d.batch)?,
        lambda: f.pick(a.lambda, "lambda", d.lambda)?,
        beta: f.pick(a.beta, "beta", d.beta)?,
        model,
        lr_head: f.pick(a.lr_head, "lr-head", d.lr_head)?,
        lr_encoder: f.pick(a.lr_encoder, "lr-encoder", d.lr_encoder)?,
        proto_kind,
        seed: f.pick(a.seed, "seed", d.seed)?,
        log_interval: f.pick(a.log_interval, "log-interval", d.log_interval)?,
        eval_interval: f.pick(a.eval_interval, "eval-interval", d.eval_interval)?,
        checkpoint_interval: f.pick(a.checkpoint_interval, "checkpoint-interval", 0)?,
        mining,
        objective,
        warmup: f.pick(a.warmup, "warmup", d.warmup)?,
        ..d
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Mean image score of up to 32 training images; scales the heatmaps.
fn calibration<T: dnp_core::tensor::Real>(
    state: &ModelState<T>,
    train: &[ImageSample],
    cfg: &ScoringConfig,
) -> Result<f64> {
    let n = train.len().min(32);
    let mut total = 0.0;
    for img in &train[..n] {
        total += score_image(state, img, cfg)?.score;
    }
    Ok(total / n.max(1) as f64)
}

struct RunFiles {
    dir: PathBuf,
    log: String,
    evals: String,
}

impl TrainObserver<f32> for RunFiles {
    fn on_warmup_done(&mut self, state: &ModelState<f32>) -> Result<()> {
        checkpoint::save(&self.dir.join("warmup.ckpt"), state, &BTreeMap::new())
    }
    fn on_log(&mut self, entry: &LossBreakdown) -> Result<()> {
        self.log.push_str(&entry.csv_row());
        self.log.push('\n');
        log::info!(
            "step {} recon {:.5} proto {:.5} total {:.5} entropy {:.3}",
            entry.step,
            entry.recon,
            entry.proto,
            entry.total,
            entry.entropy
        );
        Ok(())
    }
    fn on_eval(&mut self, point: &EvalPoint) -> Result<()> {
        let _ = writeln!(self.evals, "{},{}", point.step, point.report.csv_row());
        log::info!("step {} {}", point.step, point.report.summary());
        Ok(())
    }
    fn on_checkpoint(&mut self, state: &ModelState<f32>) -> Result<()> {
        checkpoint::save(&self.dir.join("latest.ckpt"), state, &BTreeMap::new())
    }
    fn on_divergence(&mut self, last_good: &ModelState<f32>) -> Result<()> {
        let path = self.dir.join("last_good.ckpt");
        eprintln!(
            "training diverged; last good state saved to {}",
            path.display()
        );
        checkpoint::save(&path, last_good, &BTreeMap::new())
    }
}

fn cmd_train(a: &TrainCmd, f: &FileConfig) -> Result<()> {
    f.check_keys(&key_list(&[TRAIN_KEYS, &["out"]]))?;
    let cfg = train_config(&a.train, f)?;
    let ds = load_data(&a.train.data, f)?;
    let dir = f.pick(a.out.clone(), "out", PathBuf::from("run"))?;
    create_dir(&dir)?;
    let mut files = RunFiles {
        dir: dir.clone(),
        log: format!("{}\n", LossBreakdown::CSV_HEADER),
        evals: format!("step,{}\n", MetricReport::CSV_HEADER),
    };
    let data = TrainData {
        train: &ds.train,
        eval: (!ds.test.is_empty()).then_some(ds.test.as_slice()),
    };
    let result = train::<f32>(&cfg, &data, &mut files);
    write_file(&dir.join("train_log.csv"), &files.log)?;
    if cfg.eval_interval > 0 {
        write_file(&dir.join("evals.csv"), &files.evals)?;
    }
    let out = result?;
    let mut extra = BTreeMap::new();
    let cal = calibration(&out.state, &ds.train, &cfg.scoring)?;
    extra.insert("calibration".to_string(), cal.to_string());
    checkpoint::save(&dir.join("model.ckpt"), &out.state, &extra)?;
    if let Some(last) = out.log.last() {
        println!("{}", LossBreakdown::CSV_HEADER);
        println!("{}", last.csv_row());
    }
    println!("checkpoint written to {}", dir.join("model.ckpt").display());
    Ok(())
}

fn scoring_config(a: &ScoreArgs, f: &FileConfig) -> Result<ScoringConfig> {
    let d = ScoringConfig::default();
    let mode = match f.pick_opt(a.score.clone(), "score")? {
        None => d.mode,
        Some(s) => ScoreMode::parse(&s)
            .ok_or_else(|| Error::Config(format!("unknown score mode {s:?}")))?,
    };
    let sigma = f.pick(a.sigma, "sigma", d.sigma)?;
    if !(sigma >= 0.0) {
        return Err(Error::Config(format!("sigma {sigma} must be non-negative")));
    }
    Ok(ScoringConfig { sigma, mode })
}

fn load_checkpoint(flag: &Option<PathBuf>, f: &FileConfig) -> Result<Checkpoint> {
    let path = f
        .pick_opt(flag.clone(), "checkpoint")?
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    checkpoint::load(&path)
}

fn cmd_eval(a: &EvalArgs, f: &FileConfig) -> Result<()> {
    f.check_keys(&key_list(&[SCORE_KEYS, &["data", "synth"]]))?;
    let _seed: u64 = f.pick(a.seed, "seed", 0)?;
    let ck = load_checkpoint(&a.checkpoint, f)?;
    let scoring = scoring_config(&a.scoring, f)?;
    let ds = load_data(&a.data, f)?;
    let (_, report) = evaluate(&ck.state, &ds.test, &scoring)?;
    println!("{}", report.summary());
    if let Some(path) = f.pick_opt(a.out.clone(), "out")? {
        write_file(
            &path,
            &format!("{}\n{}\n", MetricReport::CSV_HEADER, report.csv_row()),
        )?;
    }
    Ok(())
}

fn infer_one(
    path: &Path,
    state: &ModelState<f32>,
    scoring: &ScoringConfig,
    scale: Option<f64>,
    out: &Path,
) -> Result<f64> {
    let img = synth::load_image(path)?;
    let res = score_image(state, &img, scoring)?;
    let map = &res.pixel_map;
    let hi = scale.unwrap_or_else(|| map.max());
    let gray = pnm::encode_pgm(map.width, map.height, &map.to_gray(hi))?;
    pnm::write_bytes(&out.join(format!("{}_map.pgm", res.id)), &gray)?;
    let heat = pnm::encode_ppm(map.width, map.height, &map.to_heatmap(hi))?;
    pnm::write_bytes(&out.join(format!("{}_heat.ppm", res.id)), &heat)?;
    debug_assert_eq!(image_score(map, scoring.mode)?, res.score);
    Ok(res.score)
}

fn cmd_infer(a: &InferArgs, f: &FileConfig) -> Result<()> {
    f.check_keys(SCORE_KEYS)?;
    let _seed: u64 = f.pick(a.seed, "seed", 0)?;
    let ck = load_checkpoint(&a.checkpoint, f)?;
    let scoring = scoring_config(&a.scoring, f)?;
    let out = f.pick(a.out.clone(), "out", PathBuf::from("maps"))?;
    create_dir(&out)?;
    // calibrated scale maps a typical normal score to mid-range
    let scale = ck
        .extra
        .get("calibration")
        .and_then(|v| v.parse::<f64>().ok())
        .filter(|c| *c > 0.0)
        .map(|c| 2.0 * c);
    let mut first_error: Option<Error> = None;
    for path in &a.images {
        match infer_one(path, &ck.state, &scoring, scale, &out) {
            Ok(score) => println!("{} {score}", path.display()),
            Err(e) => {
                eprintln!("{}: {e}", path.display());
                first_error.get_or_insert(e);
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn cmd_collapse(a: &CollapseCmd, f: &FileConfig) -> Result<()> {
    f.check_keys(&key_list(&[TRAIN_KEYS, &["seeds", "out"]]))?;
    let cfg = train_config(&a.train, f)?;
    let seeds = f.pick(a.seeds.clone(), "seeds", List(vec![1, 2, 3]))?.0;
    let ds = load_data(&a.train.data, f)?;
    let data = TrainData {
        train: &ds.train,
        eval: None,
    };
    let report = collapse_experiment::<f32>(&cfg, &data, &seeds)?;
    let m = cfg.model.prototypes.count;
    let mut csv = String::from("seed,loss,entropy,max_share,tail_slope");
    for j in 0..m {
        let _ = write!(csv, ",h{j}");
    }
    csv.push('\n');
    for r in &report.runs {
        let _ = write!(
            csv,
            "{},{},{},{},{}",
            r.seed,
            r.kind.as_str(),
            r.summary.entropy,
            r.summary.max_share,
            r.tail_slope
        );
        for c in &r.summary.histogram {
            let _ = write!(csv, ",{c}");
        }
        csv.push('\n');
    }
    let out = f.pick(a.out.clone(), "out", PathBuf::from("collapse.csv"))?;
    write_file(&out, &csv)?;
    println!(
        "mean entropy: daa {:.4}, coherence {:.4} (ln M = {:.4})",
        report.entropy_daa,
        report.entropy_coh,
        (m as f64).ln()
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let f = FileConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Gen(a) => cmd_gen(a, &f),
        Command::Train(a) => cmd_train(a, &f),
        Command::Eval(a) => cmd_eval(a, &f),
        Command::Infer(a) => cmd_infer(a, &f),
        Command::Collapse(a) => cmd_collapse(a, &f),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
