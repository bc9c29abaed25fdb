//! `anomem` command-line front end.

use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anomem::checkpoint::{load_dataset, save_dataset};
use anomem::data::{parse_cifar_file, ProtocolSplit};
use anomem::eval::{run_protocol, score_set};
use anomem::{
    auroc, gen_synthetic, make_one_vs_all_split, sweep, Checkpoint, EpochRecord, Error, EvalReport,
    ExperimentConfig, LabeledImageSet, Mode, SweepAxis,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "anomem", version, about = "Multi-scale Hopfield memory anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON experiment config; defaults apply to omitted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Writes a dataset file: synthetic by default, or converted CIFAR batches.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// CIFAR binary batch files (3073-byte records) to convert instead.
        #[arg(long)]
        cifar: Vec<PathBuf>,
    },
    /// Trains the encoder and memories on the protocol's training split.
    TrainStage1 {
        #[command(flatten)]
        common: Common,
        /// Dataset file; a synthetic set is generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Trains the SSAD scoring heads on top of a stage-1 checkpoint.
    TrainStage2 {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emits one JSON score record per image.
    Score {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Output file for the JSON lines; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// AUROC of a score file against dataset labels, or of the full
    /// protocol over the config seeds when no score file is given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, requires = "labels")]
        scores: Option<PathBuf>,
        #[arg(long, requires = "scores")]
        labels: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Runs the protocol over a grid of one hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AxisArg,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Prints memory size, β, minimum prototype distance and prototype norms.
    InspectMemory {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    OneClass,
    Ssad,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::OneClass => Mode::OneClass,
            ModeArg::Ssad => Mode::Ssad,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    MemorySize,
    SamplingRatio,
    Gamma,
}

impl From<AxisArg> for SweepAxis {
    fn from(a: AxisArg) -> Self {
        match a {
            AxisArg::MemorySize => SweepAxis::MemorySize,
            AxisArg::SamplingRatio => SweepAxis::SamplingRatio,
            AxisArg::Gamma => SweepAxis::Gamma,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    if e.is_validation() || matches!(e, Error::Format { .. }) {
        1
    } else {
        2
    }
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("ANOMEM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("ANOMEM_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(msg.into())
}

fn load_config(common: &Common) -> anomem::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// The dataset file given on the command line or in the config, otherwise a
/// synthetic set drawn with the config seed.
fn load_data(cfg: &ExperimentConfig, path: Option<&Path>) -> anomem::Result<LabeledImageSet> {
    let path = path.map(Path::to_path_buf).or_else(|| cfg.paths.data.as_ref().map(PathBuf::from));
    let mut set = match path {
        Some(p) => load_dataset(p)?,
        None => gen_synthetic(&cfg.data, cfg.seed)?,
    };
    set.relabel(cfg.protocol.normal_class);
    Ok(set)
}

fn split(cfg: &ExperimentConfig, data: &LabeledImageSet) -> anomem::Result<ProtocolSplit> {
    let p = &cfg.protocol;
    make_one_vs_all_split(data, p.normal_class, p.gamma, cfg.seed, p.train_normals, p.test_per_class)
}

fn out_path(given: Option<PathBuf>, cfg: &ExperimentConfig) -> anomem::Result<PathBuf> {
    given
        .or_else(|| cfg.paths.checkpoint.as_ref().map(PathBuf::from))
        .ok_or_else(|| invalid("no output path: pass --out or set paths.checkpoint"))
}

struct Telemetry(Option<BufWriter<fs::File>>);

impl Telemetry {
    fn open(cfg: &ExperimentConfig) -> anomem::Result<Self> {
        Ok(Self(match &cfg.paths.telemetry {
            Some(p) => Some(BufWriter::new(fs::File::create(p)?)),
            None => None,
        }))
    }

    fn record(&mut self, r: &EpochRecord) {
        if let Some(w) = &mut self.0 {
            if let Err(e) = serde_json::to_writer(&mut *w, r).map_err(io::Error::from).and_then(|()| writeln!(w)) {
                log::warn!("telemetry write failed: {e}");
            }
        }
    }
}

fn write_output(path: Option<&Path>, text: &str) -> anomem::Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run(cmd: Command) -> anomem::Result<()> {
    match cmd {
        Command::GenData { common, out, cifar } => {
            let cfg = load_config(&common)?;
            let mut set = if cifar.is_empty() {
                gen_synthetic(&cfg.data, cfg.seed)?
            } else {
                let mut bytes = Vec::new();
                for p in &cifar {
                    bytes.extend(fs::read(p)?);
                }
                parse_cifar_file(&bytes)?
            };
            set.relabel(cfg.protocol.normal_class);
            save_dataset(&set, &out)?;
            log::info!("wrote {} images to {}", set.len(), out.display());
        }
        Command::TrainStage1 { common, data, out } => {
            let cfg = load_config(&common)?;
            let out = out_path(out, &cfg)?;
            let data = load_data(&cfg, data.as_deref())?;
            let train = split(&cfg, &data)?.train_set(&data);
            let mut tel = Telemetry::open(&cfg)?;
            let s1 = anomem::train_stage1(&cfg, &train, &mut |r| tel.record(r))?;
            let n = cfg.num_scales();
            Checkpoint {
                config: cfg,
                encoder: s1.encoder,
                memories: s1.memories,
                heads: vec![None; n],
                velocity: s1.velocity,
            }
            .save(&out)?;
        }
        Command::TrainStage2 { common, ckpt, data, out } => {
            let given = load_config(&common)?;
            let (stage1, _) = Checkpoint::load_checked(&ckpt, &given)?;
            let mut cfg = stage1.config.clone();
            cfg.mode = Mode::Ssad;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let out = out_path(out, &cfg)?;
            let data = load_data(&cfg, data.as_deref())?;
            let train = split(&cfg, &data)?.train_set(&data);
            let mut tel = Telemetry::open(&cfg)?;
            let s2 = anomem::train_stage2(&cfg, &train, &stage1.encoder, &stage1.memories, &mut |r| tel.record(r))?;
            if let (Some(a), Some(b)) = (s2.initial_loss, s2.final_loss) {
                log::info!("L_SUP {a:.5} -> {b:.5}");
            }
            Checkpoint {
                config: cfg,
                heads: s2.heads,
                ..stage1
            }
            .save(&out)?;
        }
        Command::Score { ckpt, input, mode, out } => {
            let ck = Checkpoint::load(&ckpt)?;
            let set = load_dataset(&input)?;
            let mode = mode.map_or(ck.config.mode, Mode::from);
            let scores = score_set(&ck, &set.images, mode)?;
            let mut text = String::new();
            for (id, s) in scores.iter().enumerate() {
                let rec = json!({ "id": id, "per_scale": s.per_scale, "fused": s.fused, "mode": s.mode });
                text.push_str(&rec.to_string());
                text.push('\n');
            }
            write_output(out.as_deref(), &text)?;
        }
        Command::Eval { common, scores, labels, data, out } => {
            let report = match (scores, labels) {
                (Some(s), Some(l)) => {
                    let set = load_dataset(&l)?;
                    let fused = read_scores(&s, set.len())?;
                    let is_anomaly: Vec<u8> = set.labels.iter().map(|&y| 1 - y).collect();
                    json!({ "auroc": auroc(&fused, &is_anomaly)?, "n": fused.len() })
                }
                _ => {
                    let cfg = load_config(&common)?;
                    let data = load_data(&cfg, data.as_deref())?;
                    let aurocs = seed_aurocs(&cfg, &data)?;
                    serde_json::to_value(EvalReport::from_aurocs(None, None, cfg.protocol.seeds.clone(), aurocs))?
                }
            };
            write_output(out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&report)?))?;
        }
        Command::Sweep { common, axis, values, data, out } => {
            let cfg = load_config(&common)?;
            let data = load_data(&cfg, data.as_deref())?;
            let reports = sweep(&cfg, &data, axis.into(), &values)?;
            write_output(out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&reports)?))?;
        }
        Command::InspectMemory { ckpt } => {
            let ck = Checkpoint::load(&ckpt)?;
            let mut text = String::new();
            for (s, m) in ck.memories.iter().enumerate() {
                let Some(m) = m else {
                    text.push_str(&format!("scale {}: no memory\n", s + 1));
                    continue;
                };
                let fmt = |d: Option<f64>| d.map_or_else(|| "n/a".to_string(), |v| format!("{v:.6}"));
                let norms: Vec<String> = m.prototype_norms().iter().map(|n| format!("{n:.4}")).collect();
                text.push_str(&format!(
                    "scale {}: N_Mem={} d={} beta={} min_pairwise_distance={} max_pairwise_distance={}\n  norms: [{}]\n",
                    s + 1,
                    m.size(),
                    m.dim(),
                    m.beta,
                    fmt(m.min_pairwise_distance()),
                    fmt(m.max_pairwise_distance()),
                    norms.join(", ")
                ));
            }
            write_output(None, &text)?;
        }
    }
    Ok(())
}

fn seed_aurocs(cfg: &ExperimentConfig, data: &LabeledImageSet) -> anomem::Result<Vec<f64>> {
    use rayon::prelude::*;
    cfg.protocol
        .seeds
        .par_iter()
        .map(|&s| run_protocol(cfg, data, s).map(|o| o.auroc))
        .collect()
}

/// Fused scores ordered by record id; accepts JSON lines or one JSON array.
fn read_scores(path: &Path, expected: usize) -> anomem::Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let records: Vec<serde_json::Value> = if text.trim_start().starts_with('[') {
        serde_json::from_str(&text)?
    } else {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?
    };
    if records.len() != expected {
        return Err(invalid(format!("{} score records for {expected} labeled images", records.len())));
    }
    let mut fused = vec![f64::NAN; expected];
    for r in &records {
        let id = r["id"].as_u64().map(|v| v as usize).filter(|&i| i < expected);
        let f = r["fused"].as_f64();
        match (id, f) {
            (Some(i), Some(f)) if fused[i].is_nan() => fused[i] = f,
            _ => return Err(invalid(format!("bad or duplicate score record {r}"))),
        }
    }
    Ok(fused)
}
