//! `skimsep` command-line surface: dataset simulation, training,
//! offline/streaming separation, evaluation, cost profiling, RTF
//! benchmarking and the Mem-LSTM ablation sweep.
//!
//! Configuration precedence is flags > `--config` file > built-in
//! defaults; `--set a.b.c=value` patches individual keys. The effective
//! config is echoed into the output directory for provenance. Exit codes:
//! 0 success, 1 runtime fault, 2 configuration error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use skimsep::dprnn::{DprnnConfig, DprnnModel};
use skimsep::graphpit::{sdr_improvement, sdri50, TsdrParams, WindowedSdri};
use skimsep::meetsim::{read_manifest, read_wav, write_dataset, write_wav, SimConfig};
use skimsep::numerics::Tensor;
use skimsep::profile::{bench_rtf, count_macs, count_params, BenchMode, ModelSpec};
use skimsep::skim::stream::InferModel;
use skimsep::skim::{MemMode, SkimConfig, SkimModel};
use skimsep::train::{train, TrainConfig};

enum CliError {
    /// Bad flags/config file/overrides -> exit 2.
    Config(String),
    /// Valid request that failed while running -> exit 1.
    Runtime(String),
}

type Result<T> = std::result::Result<T, CliError>;

fn config_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Config(msg.to_string())
}

fn runtime_err(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(msg.to_string())
}

#[derive(Parser)]
#[command(name = "skimsep", about = "Continuous speech separation engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file (full schema; missing keys fall back to defaults).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path config override, e.g. --set train.lr0=5e-4 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Top-level seed overriding every config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Machine-readable JSON on stdout; logs stay on stderr.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic meeting dataset.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Number of sessions (overrides the config value).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a separator on a simulated dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root produced by `simulate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `latest.ckpt` in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Separate a mixture WAV into per-channel WAVs.
    Separate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frame-by-frame streaming path (causal checkpoints only).
        #[arg(long)]
        stream: bool,
    },
    /// SDRi / SDRi50 over a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Analytic parameter and MACs report.
    Profile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        sample_rate: Option<usize>,
    },
    /// Single-threaded RTF/latency benchmark.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Benchmark a trained checkpoint instead of a fresh config init.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = 30.0)]
        seconds: f64,
        #[arg(long, default_value = "streaming")]
        mode: String,
        /// Fail (exit 1) if the measured RTF exceeds this budget.
        #[arg(long)]
        budget_rtf: Option<f64>,
    },
    /// Train and compare all five Mem-LSTM modes on one dataset.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Sessions held out from the end of the dataset for SDRi.
        #[arg(long, default_value_t = 4)]
        eval_sessions: usize,
    },
}

fn deep_merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| config_err(format!("--set expects KEY=VALUE, got `{spec}`")))?;
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut slot = root;
    for key in path.split('.') {
        if !slot.is_object() {
            return Err(config_err(format!("--set {path}: `{key}` is not an object")));
        }
        slot = slot
            .as_object_mut()
            .unwrap()
            .entry(key.to_string())
            .or_insert(serde_json::Value::Null);
    }
    *slot = value;
    Ok(())
}

/// defaults <- config file <- --set overrides, then strict deserialization
/// (unknown keys rejected by the config schemas).
fn load_config<T: Serialize + DeserializeOwned>(defaults: &T, common: &Common) -> Result<T> {
    let mut value = serde_json::to_value(defaults).map_err(config_err)?;
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let patch: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        deep_merge(&mut value, patch);
    }
    for spec in &common.sets {
        apply_set(&mut value, spec)?;
    }
    serde_json::from_value(value).map_err(config_err)
}

fn echo_config<T: Serialize>(cfg: &T, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(runtime_err)?;
    let text = serde_json::to_string_pretty(cfg).map_err(runtime_err)?;
    std::fs::write(out.join("effective_config.json"), text).map_err(runtime_err)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Arch {
    Skim,
    Dprnn,
}

/// Model section shared by train/profile/bench/ablate configs.
#[derive(Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    arch: Arch,
    #[serde(default = "default_skim")]
    skim: SkimConfig,
    #[serde(default = "default_dprnn")]
    dprnn: DprnnConfig,
}

fn default_skim() -> SkimConfig {
    SkimConfig::tiny(true)
}

fn default_dprnn() -> DprnnConfig {
    DprnnConfig::tiny(true)
}

impl Default for ModelSection {
    fn default() -> ModelSection {
        ModelSection {
            arch: Arch::Skim,
            skim: default_skim(),
            dprnn: default_dprnn(),
        }
    }
}

impl ModelSection {
    fn spec(&self) -> ModelSpec {
        match self.arch {
            Arch::Skim => ModelSpec::Skim(self.skim),
            Arch::Dprnn => ModelSpec::Dprnn(self.dprnn),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SimulateCfg {
    sim: SimConfig,
    count: usize,
}

impl Default for SimulateCfg {
    fn default() -> SimulateCfg {
        SimulateCfg {
            sim: SimConfig::default(),
            count: 20,
        }
    }
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainCfg {
    model: ModelSection,
    train: TrainConfig,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ProfileCfg {
    model: ModelSection,
    sample_rate: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblateCfg {
    /// Base SkiM config; the sweep overrides only `mem_mode`.
    skim: SkimConfig,
    train: TrainConfig,
}

impl Default for AblateCfg {
    fn default() -> AblateCfg {
        AblateCfg {
            skim: default_skim(),
            train: TrainConfig::default(),
        }
    }
}

fn load_dataset(root: &Path) -> Result<Vec<skimsep::meetsim::MeetingSession>> {
    let sessions_dir = root.join("sessions");
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(&sessions_dir)
        .map_err(|e| config_err(format!("{}: {e}", sessions_dir.display())))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.join("manifest.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(config_err(format!(
            "no sessions under {}",
            sessions_dir.display()
        )));
    }
    dirs.iter()
        .map(|d| read_manifest(&d.join("manifest.json")).map_err(runtime_err))
        .collect()
}

enum AnyModel {
    Skim(SkimModel),
    Dprnn(DprnnModel),
}

impl AnyModel {
    fn load(path: &Path) -> Result<AnyModel> {
        if let Ok(m) = SkimModel::load(path) {
            return Ok(AnyModel::Skim(m));
        }
        DprnnModel::load(path)
            .map(AnyModel::Dprnn)
            .map_err(|e| runtime_err(format!("{}: {e}", path.display())))
    }

    fn separate(&self, mixture: &Tensor) -> Result<Vec<Vec<f64>>> {
        let outs = match self {
            AnyModel::Skim(m) => m.separate(mixture).map_err(runtime_err)?,
            AnyModel::Dprnn(m) => m.separate(mixture).map_err(runtime_err)?,
        };
        outs.iter().map(|t| Ok(t.to_vec())).collect()
    }
}

fn run_simulate(common: &Common, out: &Path, count: Option<usize>) -> Result<()> {
    let mut cfg: SimulateCfg = load_config(&SimulateCfg::default(), common)?;
    if let Some(c) = count {
        cfg.count = c;
    }
    if let Some(seed) = common.seed {
        cfg.sim.seed = seed;
    }
    echo_config(&cfg, out)?;
    let dirs = write_dataset(out, &cfg.sim, cfg.count).map_err(runtime_err)?;
    eprintln!("wrote {} sessions under {}", dirs.len(), out.display());
    if common.json {
        println!(
            "{}",
            serde_json::json!({ "sessions": dirs.len(), "root": out })
        );
    }
    Ok(())
}

fn run_train(common: &Common, data: &Path, out: &Path, resume: bool) -> Result<()> {
    let mut cfg: TrainCfg = load_config(&TrainCfg::default(), common)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    echo_config(&cfg, out)?;
    let dataset = load_dataset(data)?;
    let tsdr = TsdrParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let report = match cfg.model.arch {
        Arch::Skim => {
            let model = SkimModel::init(cfg.model.skim, &mut rng).map_err(config_err)?;
            let r = train(&model, &dataset, &cfg.train, &tsdr, out, resume)
                .map_err(runtime_err)?;
            model.save(&out.join("model.ckpt")).map_err(runtime_err)?;
            r
        }
        Arch::Dprnn => {
            let model = DprnnModel::init(cfg.model.dprnn, &mut rng).map_err(config_err)?;
            let r = train(&model, &dataset, &cfg.train, &tsdr, out, resume)
                .map_err(runtime_err)?;
            model.save(&out.join("model.ckpt")).map_err(runtime_err)?;
            r
        }
    };
    eprintln!(
        "trained {} steps, best loss {:.3}, final loss {:.3}",
        report.steps, report.best_loss, report.final_loss
    );
    if common.json {
        println!(
            "{}",
            serde_json::json!({
                "steps": report.steps,
                "best_loss": report.best_loss,
                "final_loss": report.final_loss,
            })
        );
    }
    Ok(())
}

fn run_separate(
    common: &Common,
    model_path: &Path,
    input: &Path,
    out: &Path,
    stream: bool,
) -> Result<()> {
    let (samples, sample_rate) =
        read_wav(input).map_err(|e| config_err(format!("{}: {e}", input.display())))?;
    std::fs::create_dir_all(out).map_err(runtime_err)?;
    let channels: Vec<Vec<f64>> = if stream {
        let model = match AnyModel::load(model_path)? {
            AnyModel::Skim(m) => m,
            AnyModel::Dprnn(_) => {
                return Err(config_err("--stream requires a SkiM checkpoint"))
            }
        };
        let infer: InferModel<f32> = InferModel::from_model(&model).map_err(config_err)?;
        let mut stream = infer.stream();
        let mut outs: Vec<Vec<f64>> = vec![Vec::new(); model.cfg.output_channels];
        let feed: Vec<f32> = samples.iter().map(|&v| v as f32).collect();
        for chunk in feed.chunks(4096) {
            let emitted = stream.push(chunk).map_err(runtime_err)?;
            for (q, e) in emitted.iter().enumerate() {
                outs[q].extend(e.iter().map(|&v| v as f64));
            }
        }
        for (q, e) in stream.finalize().map_err(runtime_err)?.iter().enumerate() {
            outs[q].extend(e.iter().map(|&v| v as f64));
        }
        outs
    } else {
        let model = AnyModel::load(model_path)?;
        let mixture = Tensor::from_vec(&[samples.len()], samples.clone()).map_err(runtime_err)?;
        model.separate(&mixture)?
    };
    let mut written = Vec::new();
    for (q, ch) in channels.iter().enumerate() {
        let path = out.join(format!("channel_{q}.wav"));
        write_wav(&path, ch, sample_rate).map_err(runtime_err)?;
        written.push(path);
    }
    eprintln!("wrote {} channels to {}", written.len(), out.display());
    if common.json {
        println!("{}", serde_json::json!({ "channels": written }));
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    sessions: usize,
    mean_sdri_db: f64,
    median_sdri_db: f64,
    mean_sdri50_db: Option<f64>,
    sdri50_sessions: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    values[values.len() / 2]
}

fn eval_model(model: &AnyModel, dataset: &[skimsep::meetsim::MeetingSession]) -> Result<EvalSummary> {
    let tsdr = TsdrParams::default();
    let mut sdris = Vec::new();
    let mut sdri50s = Vec::new();
    for session in dataset {
        let mixture =
            Tensor::from_vec(&[session.mixture.len()], session.mixture.clone()).map_err(runtime_err)?;
        let estimates = model.separate(&mixture)?;
        let sdri = sdr_improvement(&estimates, &session.utterances, &session.mixture, &tsdr)
            .map_err(runtime_err)?;
        sdris.push(sdri);
        match sdri50(
            &estimates,
            &session.utterances,
            &session.mixture,
            session.sample_rate,
            2.0,
            0.5,
            &tsdr,
        )
        .map_err(runtime_err)?
        {
            WindowedSdri::Db(v) => sdri50s.push(v),
            WindowedSdri::NoOverlapWindows => {}
        }
    }
    Ok(EvalSummary {
        sessions: sdris.len(),
        mean_sdri_db: sdris.iter().sum::<f64>() / sdris.len() as f64,
        median_sdri_db: median(&mut sdris.clone()),
        mean_sdri50_db: if sdri50s.is_empty() {
            None
        } else {
            Some(sdri50s.iter().sum::<f64>() / sdri50s.len() as f64)
        },
        sdri50_sessions: sdri50s.len(),
    })
}

fn run_eval(common: &Common, model_path: &Path, data: &Path) -> Result<()> {
    let dataset = load_dataset(data)?;
    let model = AnyModel::load(model_path)?;
    let summary = eval_model(&model, &dataset)?;
    eprintln!(
        "{} sessions: SDRi mean {:.2} dB, median {:.2} dB",
        summary.sessions, summary.mean_sdri_db, summary.median_sdri_db
    );
    // Eval output is machine-readable by contract.
    println!("{}", serde_json::to_string_pretty(&summary).map_err(runtime_err)?);
    let _ = common;
    Ok(())
}

fn run_profile(common: &Common, sample_rate: Option<usize>) -> Result<()> {
    let mut cfg: ProfileCfg = load_config(
        &ProfileCfg {
            sample_rate: 16000,
            ..ProfileCfg::default()
        },
        common,
    )?;
    if let Some(fs) = sample_rate {
        cfg.sample_rate = fs;
    }
    let spec = cfg.model.spec();
    let report = count_macs(&spec, cfg.sample_rate).map_err(config_err)?;
    debug_assert_eq!(report.params, count_params(&spec).map_err(config_err)?.params);
    if common.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(runtime_err)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

fn run_bench(
    common: &Common,
    model_path: Option<&Path>,
    seconds: f64,
    mode: &str,
    budget_rtf: Option<f64>,
) -> Result<()> {
    let mode = match mode {
        "streaming" => BenchMode::Streaming,
        "offline" => BenchMode::Offline,
        other => return Err(config_err(format!("unknown bench mode `{other}`"))),
    };
    let cfg: ProfileCfg = load_config(
        &ProfileCfg {
            sample_rate: 16000,
            ..ProfileCfg::default()
        },
        common,
    )?;
    let model = match model_path {
        Some(p) => match AnyModel::load(p)? {
            AnyModel::Skim(m) => m,
            AnyModel::Dprnn(_) => return Err(config_err("bench requires a SkiM model")),
        },
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
            SkimModel::init(cfg.model.skim, &mut rng).map_err(config_err)?
        }
    };
    let report = bench_rtf(&model, seconds, cfg.sample_rate, mode).map_err(runtime_err)?;
    if common.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(runtime_err)?);
    } else {
        print!("{}", report.to_table());
    }
    if let Some(budget) = budget_rtf {
        if report.rtf > budget {
            return Err(runtime_err(format!(
                "rtf {:.3} exceeds budget {budget:.3}",
                report.rtf
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AblateRow {
    mem_mode: &'static str,
    params: usize,
    best_loss: f64,
    final_loss: f64,
    median_sdri_db: f64,
}

fn run_ablate(common: &Common, data: &Path, out: &Path, eval_sessions: usize) -> Result<()> {
    let mut cfg: AblateCfg = load_config(&AblateCfg::default(), common)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    echo_config(&cfg, out)?;
    let dataset = load_dataset(data)?;
    if dataset.len() <= eval_sessions {
        return Err(config_err(format!(
            "need more than {eval_sessions} sessions, got {}",
            dataset.len()
        )));
    }
    let (train_set, eval_set) = dataset.split_at(dataset.len() - eval_sessions);
    let tsdr = TsdrParams::default();
    let mut rows = Vec::new();
    for mode in MemMode::ALL {
        let model_cfg = SkimConfig {
            mem_mode: mode,
            ..cfg.skim
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let model = SkimModel::init(model_cfg, &mut rng).map_err(config_err)?;
        let mode_dir = out.join(mode.label());
        let report = train(&model, train_set, &cfg.train, &tsdr, &mode_dir, false)
            .map_err(runtime_err)?;
        if !report.losses.iter().all(|l| l.is_finite()) {
            return Err(runtime_err(format!(
                "mem_mode {} produced non-finite losses",
                mode.label()
            )));
        }
        model.save(&mode_dir.join("model.ckpt")).map_err(runtime_err)?;
        let mut sdris = Vec::new();
        let wrapped = AnyModel::Skim(model);
        for session in eval_set {
            let mixture = Tensor::from_vec(&[session.mixture.len()], session.mixture.clone())
                .map_err(runtime_err)?;
            let estimates = wrapped.separate(&mixture)?;
            sdris.push(
                sdr_improvement(&estimates, &session.utterances, &session.mixture, &tsdr)
                    .map_err(runtime_err)?,
            );
        }
        let params = count_params(&ModelSpec::Skim(model_cfg))
            .map_err(runtime_err)?
            .params;
        eprintln!(
            "mem_mode {:>4}: best loss {:.3}, median SDRi {:.2} dB",
            mode.label(),
            report.best_loss,
            median(&mut sdris.clone())
        );
        rows.push(AblateRow {
            mem_mode: mode.label(),
            params,
            best_loss: report.best_loss,
            final_loss: report.final_loss,
            median_sdri_db: median(&mut sdris),
        });
    }
    let table = {
        let mut t = format!(
            "{:<6}{:>10}{:>12}{:>12}{:>14}\n",
            "mode", "params", "best_loss", "final_loss", "median_sdri"
        );
        for r in &rows {
            t.push_str(&format!(
                "{:<6}{:>10}{:>12.3}{:>12.3}{:>14.2}\n",
                r.mem_mode, r.params, r.best_loss, r.final_loss, r.median_sdri_db
            ));
        }
        t
    };
    std::fs::write(out.join("ablation.txt"), &table).map_err(runtime_err)?;
    if common.json {
        println!("{}", serde_json::to_string_pretty(&rows).map_err(runtime_err)?);
    } else {
        print!("{table}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Simulate { common, out, count } => run_simulate(common, out, *count),
        Command::Train {
            common,
            data,
            out,
            resume,
        } => run_train(common, data, out, *resume),
        Command::Separate {
            common,
            model,
            input,
            out,
            stream,
        } => run_separate(common, model, input, out, *stream),
        Command::Eval {
            common,
            model,
            data,
        } => run_eval(common, model, data),
        Command::Profile {
            common,
            sample_rate,
        } => run_profile(common, *sample_rate),
        Command::Bench {
            common,
            model,
            seconds,
            mode,
            budget_rtf,
        } => run_bench(common, model.as_deref(), *seconds, mode, *budget_rtf),
        Command::Ablate {
            common,
            data,
            out,
            eval_sessions,
        } => run_ablate(common, data, out, *eval_sessions),
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(CliError::Config(msg)) => {
            eprintln!("config error: {msg}");
            std::process::exit(2);
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            std::process::exit(1);
        }
    }
}
