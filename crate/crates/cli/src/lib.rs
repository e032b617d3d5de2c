//! `uwloc` command-line frontend.

pub mod config;
pub mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use uwloc_core::features::{featurize_all, read_cache, write_cache};
use uwloc_core::learn::{self, FoldScheme};
use uwloc_core::net::{build_model, input_shape_of, read_checkpoint, write_checkpoint, NetParams};
use uwloc_core::signal_io::{attach_labels, load_multichannel_audio, segment_clip, write_raw};
use uwloc_core::synthgen::synth_towpath;
use uwloc_core::{Error, FeaturePair, LabelTable, MetricsReport, Result, Scenario};

pub use config::RunConfig;
pub use report::emit_report;

#[derive(Debug, Parser)]
#[command(name = "uwloc", version, about = "Underwater source range estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// TOML run configuration overlaid on the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed for scenario, initialization and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Serialized reductions for bit-reproducible output. Computation is
    /// always single-threaded, so this only documents intent.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Doppler,
    Interferer,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multichannel tow recording with labels.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        minutes: Option<u32>,
        #[arg(long, value_enum, default_value = "default")]
        preset: Preset,
    },
    /// Segment a recording and write the log-mel / GCC-PHAT feature cache.
    Featurize {
        #[command(flatten)]
        common: Common,
        /// Audio file (.wav, or .f32 with a .meta sidecar).
        #[arg(long)]
        audio: PathBuf,
        /// Label CSV; defaults to labels.csv next to the audio.
        #[arg(long)]
        labels: Option<PathBuf>,
        /// Keep segments starting at or after this minute.
        #[arg(long)]
        start_min: Option<f64>,
        /// Keep segments starting before this minute.
        #[arg(long)]
        end_min: Option<f64>,
    },
    /// Train on folds of a feature cache and score the test fold.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
    },
    /// Score a checkpoint on a feature cache.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        /// Score only the configured test folds instead of every segment.
        #[arg(long)]
        test_folds: bool,
    },
    /// Adapt a checkpoint to a target-domain cache using a fraction of it.
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Pretrained model; omit together with --scratch.
        #[arg(long, required_unless_present = "scratch")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        fraction: f64,
        /// Allow fractions other than 0, 0.15 and 0.30.
        #[arg(long)]
        any_fraction: bool,
        /// Train a fresh model on the sampled fraction instead.
        #[arg(long, conflicts_with = "checkpoint")]
        scratch: bool,
    },
    /// Run the four component ablations under one seed and budget.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        features: PathBuf,
    },
    /// Re-emit predictions.csv and plot.csv from a metrics.json.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        metrics: PathBuf,
    },
}

/// Failure with its process exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) | Failure::Core(Error::Config(_)) => 2,
            Failure::Core(Error::NonFinite(_)) => 4,
            Failure::Core(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            4 => "numeric",
            _ => "data",
        }
    }

    /// One stderr line: `error: kind=<kind> code=<n> message=<json string>`.
    pub fn line(&self) -> String {
        let msg = match self {
            Failure::Usage(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        };
        let msg = serde_json::to_string(msg.trim()).unwrap_or_default();
        format!("error: kind={} code={} message={msg}", self.kind(), self.exit_code())
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error");
            let f = Failure::Usage(first.trim_start_matches("error: ").to_string());
            eprintln!("{}", f.line());
            return f.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{}", f.line());
            f.exit_code()
        }
    }
}

fn prepare(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut cfg = RunConfig::resolve(base, common.config.as_deref(), &common.sets)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(cfg)
}

fn save_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let path = dir.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Synth { common, minutes, preset } => {
            let scenario = match preset {
                Preset::Default => Scenario::default(),
                Preset::Doppler => Scenario::doppler_preset(),
                Preset::Interferer => Scenario::interferer_preset(),
            };
            let mut cfg = prepare(
                &common,
                RunConfig {
                    scenario,
                    ..RunConfig::default()
                },
            )?;
            if let Some(m) = minutes {
                cfg.scenario.duration_min = m;
                cfg.scenario.validate()?;
            }
            synth(&cfg, &common.out)?;
        }
        Command::Featurize {
            common,
            audio,
            labels,
            start_min,
            end_min,
        } => {
            let cfg = prepare(&common, RunConfig::default())?;
            let labels = labels.unwrap_or_else(|| audio.with_file_name("labels.csv"));
            featurize(&cfg, &audio, &labels, start_min, end_min, &common.out)?;
        }
        Command::Train { common, features } => {
            let cfg = prepare(&common, RunConfig::default())?;
            let data = load_features(&features)?;
            train(&cfg, &data, &common.out)?;
        }
        Command::Eval {
            common,
            checkpoint,
            features,
            test_folds,
        } => {
            let cfg = prepare(&common, RunConfig::default())?;
            let p = read_checkpoint(&checkpoint)?;
            let data = load_features(&features)?;
            let set: Vec<&FeaturePair> = if test_folds {
                let s = learn::split(data.len(), &cfg.split)?;
                s.test.iter().map(|&i| &data[i]).collect()
            } else {
                data.iter().collect()
            };
            let report = learn::evaluate(&p, &set, cfg.agc().as_ref())?;
            finish(&cfg, &report, &common.out)?;
        }
        Command::Finetune {
            common,
            checkpoint,
            features,
            fraction,
            any_fraction,
            scratch,
        } => {
            let cfg = prepare(&common, RunConfig::default())?;
            let data = load_features(&features)?;
            let target: Vec<&FeaturePair> = data.iter().collect();
            let agc = cfg.agc();
            let out = if scratch {
                let init = fresh_model(&cfg, &data)?;
                learn::scratch_on_fraction(&init, &target, fraction, any_fraction, &cfg.train, agc.as_ref())?
            } else {
                let p = read_checkpoint(checkpoint.as_deref().expect("clap enforces checkpoint"))?;
                learn::finetune(&p, &target, fraction, any_fraction, &cfg.train, agc.as_ref())?
            };
            let eval: Vec<&FeaturePair> = out.eval.iter().map(|&i| target[i]).collect();
            let report = learn::evaluate(&out.params, &eval, agc.as_ref())?;
            write_checkpoint(&out.params, &common.out.join("checkpoint.acan"))?;
            learn::write_history(&out.history, &common.out.join("history.csv"))?;
            let sampled: String = std::iter::once("index".to_string())
                .chain(out.sampled.iter().map(|&i| target[i].index.to_string()))
                .map(|l| l + "\n")
                .collect();
            let path = common.out.join("sampled.csv");
            std::fs::write(&path, sampled).map_err(|e| Error::io(&path, e))?;
            finish(&cfg, &report, &common.out)?;
        }
        Command::Ablate { common, features } => {
            let cfg = prepare(&common, RunConfig::default())?;
            let data = load_features(&features)?;
            ablate(&cfg, &data, &common.out)?;
        }
        Command::Report { common, metrics } => {
            let cfg = prepare(&common, RunConfig::default())?;
            let report = report::read_report(&metrics)?;
            finish(&cfg, &report, &common.out)?;
        }
    }
    Ok(())
}

fn finish(cfg: &RunConfig, report: &MetricsReport, dir: &Path) -> Result<()> {
    emit_report(report, dir)?;
    save_config(cfg, dir)?;
    say(&format!(
        "mae_km={} mse_km2={} pcl5_percent={} n={}",
        report.mae_km,
        report.mse_km2,
        report.pcl5_percent,
        report.predictions.len()
    ));
    Ok(())
}

pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (clip, labels) = synth_towpath(&cfg.scenario)?;
    write_raw(&clip, &dir.join("clip.f32"))?;
    labels.write_csv(&dir.join("labels.csv"))?;
    save_config(cfg, dir)?;
    say(&format!(
        "channels={} seconds={} rate_hz={}",
        clip.channels(),
        clip.duration_s(),
        clip.sample_rate_hz()
    ));
    Ok(())
}

pub fn featurize(
    cfg: &RunConfig,
    audio: &Path,
    labels: &Path,
    start_min: Option<f64>,
    end_min: Option<f64>,
    dir: &Path,
) -> Result<Vec<FeaturePair>> {
    let clip = load_multichannel_audio(audio, None)?;
    let table = LabelTable::read_csv(labels)?;
    let lo = start_min.unwrap_or(f64::NEG_INFINITY) * 60.0;
    let hi = end_min.unwrap_or(f64::INFINITY) * 60.0;
    let segments: Vec<_> = segment_clip(&clip)?
        .into_iter()
        .filter(|s| (s.index as f64) >= lo && (s.index as f64) < hi)
        .collect();
    if segments.is_empty() {
        return Err(Error::InvalidInput("no segments in the selected time range".into()));
    }
    let labeled = attach_labels(segments, &table)?;
    let pairs = featurize_all(&labeled, &cfg.features())?;
    write_cache(&dir.join("cache.acaf"), &pairs)?;
    save_config(cfg, dir)?;
    say(&format!("segments={}", pairs.len()));
    Ok(pairs)
}

fn load_features(path: &Path) -> Result<Vec<FeaturePair>> {
    let data = read_cache(path)?;
    let first = data
        .first()
        .ok_or_else(|| Error::InvalidInput(format!("{} holds no segments", path.display())))?;
    if let Some(bad) = data.iter().find(|p| !p.same_shape(first)) {
        return Err(Error::Shape(format!("segment {} has a different shape", bad.index)));
    }
    Ok(data)
}

fn fresh_model(cfg: &RunConfig, data: &[FeaturePair]) -> Result<NetParams> {
    build_model(&cfg.net.clone().with_input(input_shape_of(&data[0])))
}

/// Outcome of one fold-protocol training run.
pub struct TrainRun {
    pub params: NetParams,
    pub report: MetricsReport,
    pub baseline: MetricsReport,
}

/// Trains on the configured folds, writes the run artifacts to `dir` and
/// returns the test-fold report.
pub fn train(cfg: &RunConfig, data: &[FeaturePair], dir: &Path) -> Result<TrainRun> {
    let run = fold_protocol(cfg, data, &cfg.split)?;
    write_checkpoint(&run.0.best, &dir.join("checkpoint.acan"))?;
    learn::write_history(&run.0.history, &dir.join("history.csv"))?;
    let baseline = serde_json::to_string_pretty(&run.2).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join("baseline.json");
    std::fs::write(&path, baseline + "\n").map_err(|e| Error::io(&path, e))?;
    finish(cfg, &run.1, dir)?;
    Ok(TrainRun {
        params: run.0.best,
        report: run.1,
        baseline: run.2,
    })
}

fn fold_protocol(
    cfg: &RunConfig,
    data: &[FeaturePair],
    scheme: &FoldScheme,
) -> Result<(learn::TrainOutcome, MetricsReport, MetricsReport)> {
    let s = learn::split(data.len(), scheme)?;
    let pick = |ix: &[usize]| -> Vec<&FeaturePair> { ix.iter().map(|&i| &data[i]).collect() };
    let (tr, va, te) = (pick(&s.train), pick(&s.val), pick(&s.test));
    let agc = cfg.agc();
    let out = learn::train(fresh_model(cfg, data)?, &tr, &va, &cfg.train, agc.as_ref())?;
    let report = learn::evaluate(&out.best, &te, agc.as_ref())?;
    let baseline = learn::mean_baseline(&tr, &te)?;
    Ok((out, report, baseline))
}

/// One row of the component ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub gcc: bool,
    pub conformer: bool,
    pub agc: bool,
    pub mae_km: f64,
    pub pcl5_percent: f64,
}

/// The four variants, in table order: without GCC, without Conformer,
/// without AGC, full model.
pub fn ablation_configs(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut no_gcc = base.clone();
    no_gcc.net.use_gcc = false;
    let mut no_conformer = base.clone();
    no_conformer.net.conformer_blocks = 0;
    let mut no_agc = base.clone();
    no_agc.agc.enabled = false;
    vec![
        ("no_gcc", no_gcc),
        ("no_conformer", no_conformer),
        ("no_agc", no_agc),
        ("full", base.clone()),
    ]
}

pub fn ablate(cfg: &RunConfig, data: &[FeaturePair], dir: &Path) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, variant) in ablation_configs(cfg) {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let run = train(&variant, data, &sub)?;
        rows.push(AblationRow {
            variant: name,
            gcc: variant.net.use_gcc,
            conformer: variant.net.conformer_blocks > 0,
            agc: variant.agc.enabled,
            mae_km: run.report.mae_km,
            pcl5_percent: run.report.pcl5_percent,
        });
    }
    let flag = |b: bool| if b { "1" } else { "0" };
    let mut text = String::from("variant,mel_spectrogram,resnet,gcc_phat,conformer,agc,mae_km,pcl5_percent\n");
    for r in &rows {
        text.push_str(&format!(
            "{},1,1,{},{},{},{},{}\n",
            r.variant,
            flag(r.gcc),
            flag(r.conformer),
            flag(r.agc),
            r.mae_km,
            r.pcl5_percent
        ));
    }
    let path = dir.join("ablation.csv");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    save_config(cfg, dir)?;
    Ok(rows)
}
