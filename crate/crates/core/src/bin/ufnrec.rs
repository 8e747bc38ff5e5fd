use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ufnrec::dataio::{InputFormat, LoadOptions};
use ufnrec::experiments::{run_arm, run_preset, Arm, DataSource, ExperimentPreset, Scale, PRESET_NAMES};
use ufnrec::negatives::{CountMode, FnAction, MiningStrategy};
use ufnrec::optim::OptimizerKind;
use ufnrec::dataio::EvalNegMode;
use ufnrec::synth::{generate, SynthConfig};
use ufnrec::trainer::TrainConfig;
use ufnrec::{Error, Result};

#[derive(Parser)]
#[command(name = "ufnrec", version, about = "Sequential recommendation with false-negative mining")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and report test metrics.
    Train(TrainArgs),
    /// Run or list experiment presets.
    Preset {
        #[command(subcommand)]
        action: PresetAction,
    },
    /// Write a synthetic corpus (dataset.txt, planted.tsv).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with synthetic corpus settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    Run {
        /// Preset name (see `preset list`).
        name: String,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Model scale; defaults to desk for synth data, full otherwise.
        #[arg(long, value_enum)]
        scale: Option<ScaleArg>,
        /// Comma-separated seeds replacing the preset's.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Epoch cap for every arm.
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    List,
}

#[derive(Args)]
struct DataArgs {
    /// `synth` or a path to an interaction file.
    #[arg(long, default_value = "synth")]
    data: String,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// The file has a header row naming `user,item,timestamp` columns.
    #[arg(long)]
    header: bool,
    #[arg(long, default_value_t = 3)]
    min_seq_len: usize,
    #[arg(long, default_value_t = 0)]
    k_core: usize,
    /// Keep this fraction of users (real datasets).
    #[arg(long)]
    subsample_users: Option<f64>,
    /// TOML file with synthetic corpus settings.
    #[arg(long)]
    synth_config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; unset fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    /// Directory for config, epoch reports, checkpoint and ledger.
    #[arg(long, default_value = "ufnrec-run")]
    out: PathBuf,
    /// Count threshold that moves an item to the false-negative set.
    #[arg(long)]
    m: Option<u32>,
    /// Consistency loss weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// EMA decay.
    #[arg(long)]
    d: Option<f64>,
    #[arg(long, value_enum)]
    mining: Option<MiningArg>,
    /// Track recorded items (instead of every draw) in the variance miner.
    #[arg(long)]
    variance_use_rec: bool,
    #[arg(long, value_enum)]
    fn_action: Option<FnActionArg>,
    #[arg(long, value_enum)]
    count_mode: Option<CountModeArg>,
    /// Negatives drawn per training context.
    #[arg(long)]
    n_negatives: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long, value_enum)]
    eval_neg_mode: Option<EvalNegArg>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Users per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epoch cap.
    #[arg(long)]
    max_epochs: Option<usize>,
    /// Training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Plain backbone: no mining, no teacher.
    #[arg(long)]
    backbone_only: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Csv,
    Tsv,
    AmazonRatings,
    Canonical,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
enum MiningArg {
    Ufnrec,
    Variance,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum FnActionArg {
    Reverse,
    Remove,
    Keep,
}

#[derive(Clone, Copy, ValueEnum)]
enum CountModeArg {
    Cumulative,
    Consecutive,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum EvalNegArg {
    ExcludeHistory,
    ExcludePositiveOnly,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    match path {
        Some(p) => toml::from_str(&read_text(p)?).map_err(|e| Error::Config(e.to_string())),
        None => Ok(SynthConfig::default()),
    }
}

impl DataArgs {
    fn source(&self) -> Result<DataSource> {
        if self.data == "synth" {
            if self.subsample_users.is_some() {
                return Err(Error::Config("--subsample-users applies to dataset files".into()));
            }
            return Ok(DataSource::Synth(synth_config(self.synth_config.as_deref())?));
        }
        let path = PathBuf::from(&self.data);
        let format = match self.format {
            FormatArg::Canonical => {
                return Ok(DataSource::Canonical {
                    path,
                    subsample_users: self.subsample_users,
                })
            }
            FormatArg::Csv => InputFormat::Csv,
            FormatArg::Tsv => InputFormat::Tsv,
            FormatArg::AmazonRatings => InputFormat::AmazonRatings,
        };
        let options = if self.header {
            LoadOptions::named(format, "user", "item", "timestamp")
        } else {
            LoadOptions::positional(format)
        };
        Ok(DataSource::File {
            path,
            options,
            min_seq_len: self.min_seq_len,
            k_core: self.k_core,
            subsample_users: self.subsample_users,
        })
    }
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
            None => TrainConfig::default(),
        };
        if let Some(kind) = self.mining {
            cfg.mining = match kind {
                MiningArg::Ufnrec => MiningStrategy::UfnrecThreshold { m: self.m.unwrap_or(3) },
                MiningArg::Variance => MiningStrategy::variance_default(self.variance_use_rec),
                MiningArg::None => MiningStrategy::None,
            };
        } else if let Some(m) = self.m {
            cfg.mining = MiningStrategy::UfnrecThreshold { m };
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(d) = self.d {
            cfg.decay = d;
        }
        if let Some(a) = self.fn_action {
            cfg.fn_action = match a {
                FnActionArg::Reverse => FnAction::Reverse,
                FnActionArg::Remove => FnAction::Remove,
                FnActionArg::Keep => FnAction::Keep,
            };
        }
        if let Some(c) = self.count_mode {
            cfg.count_mode = match c {
                CountModeArg::Cumulative => CountMode::Cumulative,
                CountModeArg::Consecutive => CountMode::Consecutive,
            };
        }
        if let Some(n) = self.n_negatives {
            cfg.n_negatives = n;
        }
        if let Some(o) = self.optimizer {
            cfg.optimizer = match o {
                OptimizerArg::Adam => OptimizerKind::Adam,
                OptimizerArg::Sgd => OptimizerKind::Sgd,
            };
        }
        if let Some(e) = self.eval_neg_mode {
            cfg.eval_neg_mode = match e {
                EvalNegArg::ExcludeHistory => EvalNegMode::ExcludeHistory,
                EvalNegArg::ExcludePositiveOnly => EvalNegMode::ExcludePositiveOnly,
            };
        }
        if let Some(lr) = self.lr {
            cfg.learning_rate = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        if let Some(e) = self.max_epochs {
            cfg.max_epochs = e;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.backbone_only |= self.backbone_only;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config()?;
    let source = args.data.source()?;
    let data = source.prepare()?;
    let arm = Arm::new("train", Vec::new());
    let rec = run_arm(&cfg, &arm, cfg.seed, &data, Some(&args.out))?;
    if let Some(m) = &rec.mining {
        let p = args.out.join("mining.json");
        fs::write(&p, serde_json::to_string_pretty(m)?)?;
    }
    println!("best epoch {} (warmup {} epochs, {} run)", rec.best_epoch, rec.warmup_epochs, rec.epochs_run);
    for (k, v) in &rec.test {
        println!("test {k}\t{v:.4}");
    }
    if let Some(m) = &rec.mining {
        println!(
            "mining: {} mined, precision {:?}, random {:.4}, recall {:.4}",
            m.mined, m.precision, m.random_precision, m.recall
        );
    }
    println!("artifacts in {}", args.out.display());
    Ok(())
}

fn preset(action: &PresetAction) -> Result<()> {
    match action {
        PresetAction::List => {
            for name in PRESET_NAMES {
                let p = ExperimentPreset::named(name, Scale::Desk)?;
                let arms: Vec<&str> = p.arms.iter().map(|a| a.name.as_str()).collect();
                println!("{name}: {} arms × {} seeds: {}", arms.len(), p.seeds.len(), arms.join(", "));
            }
            Ok(())
        }
        PresetAction::Run {
            name,
            data,
            out,
            scale,
            seeds,
            max_epochs,
        } => {
            let source = data.source()?;
            let scale = match scale {
                Some(ScaleArg::Desk) => Scale::Desk,
                Some(ScaleArg::Full) => Scale::Full,
                None if matches!(source, DataSource::Synth(_)) => Scale::Desk,
                None => Scale::Full,
            };
            let mut preset = ExperimentPreset::named(name, scale)?;
            if let Some(s) = seeds {
                preset.seeds = s.clone();
            }
            if let Some(e) = max_epochs {
                let no_early_stop = preset.base.early_stop_patience == preset.base.max_epochs;
                preset.base.max_epochs = *e;
                if no_early_stop {
                    preset.base.early_stop_patience = *e;
                }
            }
            if preset.long_running {
                log::warn!("preset {name} at full scale is long running");
            }
            let results = run_preset(&preset, &source, out)?;
            print!("{}", results.to_markdown());
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => train(&args),
        Command::Preset { action } => preset(&action),
        Command::Synth { out, config, seed } => {
            let mut cfg = synth_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let corpus = generate(&cfg)?;
            corpus.export(&out)?;
            println!(
                "{} users, {} items, {} planted false negatives written to {}",
                corpus.dataset.user_count,
                corpus.dataset.item_count,
                corpus.planted_total(),
                out.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
