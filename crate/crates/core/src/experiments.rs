//! Preset experiment arms, drivers and result tables.
//!
//! A preset is a base [`TrainConfig`] plus named arms, each a list of
//! [`Delta`]s applied to the base, repeated over several seeds. Running a
//! preset writes per-run artifacts under `runs/`, a `results.csv` with one
//! row per run, an aggregated `results.md`, line plots and `manifest.json`.
//! The CSV and manifest are rewritten after every run so a failure keeps
//! everything finished before it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::dataio::{
    build_dataset, load_interactions, split_leave_one_out, InteractionDataset, LoadOptions, SplitDataset,
};
use crate::encoder::{EncoderConfig, EncoderKind};
use crate::error::{Error, Result};
use crate::eval::{paired_rank_test, SignTest, DEFAULT_KS};
use crate::negatives::{CountMode, FnAction, MiningStrategy};
use crate::plot::{line_chart, Series};
use crate::synth::{generate, score_mining, MiningScore, SynthConfig, SynthCorpus};
use crate::trainer::{fit, RunData, RunFiles, TrainConfig};
use crate::Rng;

pub const MANIFEST_VERSION: u32 = 1;

/// One change to the base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "set", content = "value", rename_all = "snake_case")]
pub enum Delta {
    BackboneOnly,
    Mining(MiningStrategy),
    FnAction(FnAction),
    CountMode(CountMode),
    Alpha(f64),
    Decay(f64),
    BatchSize(usize),
    MaxEpochs(usize),
    /// Patience equal to `max_epochs`, so runs go the full length.
    NoEarlyStop,
}

impl Delta {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        match self {
            Delta::BackboneOnly => cfg.backbone_only = true,
            Delta::Mining(m) => cfg.mining = m.clone(),
            Delta::FnAction(a) => cfg.fn_action = *a,
            Delta::CountMode(c) => cfg.count_mode = *c,
            Delta::Alpha(a) => cfg.alpha = *a,
            Delta::Decay(d) => cfg.decay = *d,
            Delta::BatchSize(b) => cfg.batch_size = *b,
            Delta::MaxEpochs(e) => cfg.max_epochs = *e,
            Delta::NoEarlyStop => cfg.early_stop_patience = cfg.max_epochs,
        }
    }
}

/// Position of an arm on a sweep plot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub param: String,
    pub value: f64,
    pub series: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub deltas: Vec<Delta>,
    pub sweep: Option<SweepPoint>,
}

impl Arm {
    pub fn new(name: &str, deltas: Vec<Delta>) -> Self {
        Arm {
            name: name.to_string(),
            deltas,
            sweep: None,
        }
    }

    fn swept(mut self, param: &str, value: f64, series: &str) -> Self {
        self.sweep = Some(SweepPoint {
            param: param.to_string(),
            value,
            series: series.to_string(),
        });
        self
    }

    /// Base config with this arm's deltas applied, seeded.
    pub fn config(&self, base: &TrainConfig, seed: u64) -> TrainConfig {
        let mut cfg = base.clone();
        for d in &self.deltas {
            d.apply(&mut cfg);
        }
        cfg.seed = seed;
        cfg
    }

    fn slug(&self) -> String {
        let s: String = self
            .name
            .chars()
            .map(|c| match c {
                'a'..='z' | 'A'..='Z' | '0'..='9' | '-' | '_' | '.' => c,
                '+' => 'p',
                _ => '_',
            })
            .collect();
        s.trim_matches('_').to_string()
    }
}

/// Model and optimisation scale a preset's base config targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Small attention model sized for the synthetic corpus.
    Desk,
    /// Default two-layer model for real datasets.
    Full,
}

impl Scale {
    pub fn base(self) -> TrainConfig {
        match self {
            Scale::Desk => TrainConfig {
                encoder: EncoderConfig {
                    d_model: 32,
                    n_layers: 1,
                    n_heads: 2,
                    max_len: 25,
                    dropout_rate: 0.2,
                    encoder_kind: EncoderKind::SelfAttention,
                    shared_embeddings: true,
                },
                learning_rate: 0.002,
                decay: 0.99,
                max_epochs: 120,
                ..TrainConfig::default()
            },
            Scale::Full => TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPreset {
    pub name: String,
    pub base: TrainConfig,
    pub arms: Vec<Arm>,
    pub seeds: Vec<u64>,
    /// Marks presets that take hours on real datasets.
    pub long_running: bool,
}

pub const PRESET_NAMES: &[&str] = &[
    "table3_ablation",
    "table4_removal_vs_util",
    "fig4_sweeps",
    "fig5_curves",
    "synth_acceptance",
];

pub const ALPHA_GRID: [f64; 7] = [0.01, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5];
pub const M_GRID: [u32; 7] = [1, 2, 3, 4, 6, 8, 10];
pub const DECAY_GRID: [f64; 4] = [0.9, 0.99, 0.995, 0.999];
pub const BATCH_GRID: [usize; 5] = [32, 64, 128, 256, 512];

fn backbone() -> Arm {
    Arm::new("backbone", vec![Delta::BackboneOnly])
}

fn ablation_arms() -> Vec<Arm> {
    vec![
        backbone(),
        Arm::new("+FMR", vec![Delta::Alpha(0.0)]),
        Arm::new("+FCR", vec![Delta::FnAction(FnAction::Keep)]),
        Arm::new("+UFN", vec![]),
    ]
}

fn removal_arm() -> Arm {
    Arm::new("SASRec^R", vec![Delta::FnAction(FnAction::Remove), Delta::Alpha(0.0)])
}

fn table4_arms() -> Vec<Arm> {
    let variance = |rec: bool| Delta::Mining(MiningStrategy::variance_default(rec));
    let remove = || [Delta::FnAction(FnAction::Remove), Delta::Alpha(0.0)];
    vec![
        Arm::new("SASRec", vec![Delta::BackboneOnly]),
        removal_arm(),
        Arm::new("+SRNS^R", [vec![variance(false)], remove().to_vec()].concat()),
        Arm::new("+SRNS", vec![variance(false)]),
        Arm::new("+UFN_srns^R", [vec![variance(true)], remove().to_vec()].concat()),
        Arm::new("+UFN_srns", vec![variance(true)]),
        Arm::new("+UFN", vec![]),
    ]
}

fn sweep_arms() -> Vec<Arm> {
    let mut arms = vec![backbone()];
    for a in ALPHA_GRID {
        arms.push(Arm::new(&format!("alpha={a}"), vec![Delta::Alpha(a)]).swept("alpha", a, "+UFN"));
    }
    for m in M_GRID {
        let d = Delta::Mining(MiningStrategy::UfnrecThreshold { m });
        arms.push(Arm::new(&format!("m={m}"), vec![d]).swept("m", m as f64, "+UFN"));
    }
    for d in DECAY_GRID {
        arms.push(Arm::new(&format!("d={d}"), vec![Delta::Decay(d)]).swept("d", d, "+UFN"));
    }
    for b in BATCH_GRID {
        arms.push(
            Arm::new(&format!("backbone b={b}"), vec![Delta::BackboneOnly, Delta::BatchSize(b)])
                .swept("batch_size", b as f64, "backbone"),
        );
        arms.push(Arm::new(&format!("+UFN b={b}"), vec![Delta::BatchSize(b)]).swept("batch_size", b as f64, "+UFN"));
    }
    arms
}

impl ExperimentPreset {
    pub fn named(name: &str, scale: Scale) -> Result<Self> {
        let (arms, seeds, base) = match name {
            "table3_ablation" => (ablation_arms(), vec![1, 2, 3], scale.base()),
            "table4_removal_vs_util" => (table4_arms(), vec![1, 2, 3], scale.base()),
            "fig4_sweeps" => (sweep_arms(), vec![1], scale.base()),
            "fig5_curves" => {
                let mut base = scale.base();
                Delta::NoEarlyStop.apply(&mut base);
                (vec![backbone(), Arm::new("+UFN", vec![])], vec![1], base)
            }
            "synth_acceptance" => {
                let mut arms = ablation_arms();
                arms.push(removal_arm());
                (arms, vec![1, 2, 3], Scale::Desk.base())
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown preset {name}; expected one of {}",
                    PRESET_NAMES.join(", ")
                )))
            }
        };
        let preset = ExperimentPreset {
            name: name.to_string(),
            base,
            arms,
            seeds,
            long_running: scale == Scale::Full,
        };
        preset.validate()?;
        Ok(preset)
    }

    pub fn arm(&self, name: &str) -> Option<&Arm> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if self.arms.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config(format!("preset {} has no arms or no seeds", self.name)));
        }
        let names: BTreeSet<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        let slugs: BTreeSet<String> = self.arms.iter().map(Arm::slug).collect();
        if names.len() != self.arms.len() || slugs.len() != self.arms.len() {
            return Err(Error::Config(format!("preset {} has duplicate arm names", self.name)));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(Error::Config(format!("preset {} repeats a seed", self.name)));
        }
        for arm in &self.arms {
            arm.config(&self.base, self.seeds[0])
                .validate()
                .map_err(|e| Error::Config(format!("arm {}: {e}", arm.name)))?;
        }
        Ok(())
    }
}

/// Where a preset's interactions come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synth(SynthConfig),
    File {
        path: PathBuf,
        options: LoadOptions,
        min_seq_len: usize,
        k_core: usize,
        /// Keep this fraction of users, chosen with a fixed seed.
        subsample_users: Option<f64>,
    },
    /// A dataset in the canonical dump format.
    Canonical {
        path: PathBuf,
        subsample_users: Option<f64>,
    },
}

/// Loaded and split data shared by every run of a preset.
pub struct PreparedData {
    pub dataset: InteractionDataset,
    pub split: SplitDataset,
    pub corpus: Option<SynthCorpus>,
    /// Items kept out of each user's evaluation negatives.
    pub eval_exclude: Option<Vec<Vec<usize>>>,
}

const SUBSAMPLE_SEED: u64 = 0x5355_4253;

/// Keeps `round(fraction · users)` users (at least one), picked uniformly
/// with a fixed seed. Item ids are not re-indexed.
pub fn subsample_users(ds: &InteractionDataset, fraction: f64) -> Result<InteractionDataset> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("subsample fraction {fraction} outside (0, 1]")));
    }
    let keep = ((fraction * ds.user_count as f64).round() as usize).max(1);
    let mut users: Vec<usize> = (0..ds.user_count).collect();
    users.shuffle(&mut Rng::seed_from_u64(SUBSAMPLE_SEED));
    users.truncate(keep);
    users.sort_unstable();
    Ok(InteractionDataset {
        user_count: keep,
        item_count: ds.item_count,
        sequences: users.iter().map(|&u| ds.sequences[u].clone()).collect(),
        user_keys: users.iter().filter_map(|&u| ds.user_keys.get(u).cloned()).collect(),
        item_keys: ds.item_keys.clone(),
    })
}

fn prepared(mut dataset: InteractionDataset, fraction: Option<f64>) -> Result<PreparedData> {
    if let Some(f) = fraction {
        dataset = subsample_users(&dataset, f)?;
    }
    if let Some(u) = dataset.sequences.iter().position(|s| s.len() < 3) {
        return Err(Error::Config(format!("user {u} has fewer than 3 interactions")));
    }
    let split = split_leave_one_out(&dataset);
    Ok(PreparedData {
        dataset,
        split,
        corpus: None,
        eval_exclude: None,
    })
}

impl DataSource {
    pub fn prepare(&self) -> Result<PreparedData> {
        match self {
            DataSource::Synth(cfg) => {
                let corpus = generate(cfg)?;
                let split = split_leave_one_out(&corpus.dataset);
                let exclude = corpus.planted.iter().map(|s| s.iter().copied().collect()).collect();
                Ok(PreparedData {
                    dataset: corpus.dataset.clone(),
                    split,
                    corpus: Some(corpus),
                    eval_exclude: Some(exclude),
                })
            }
            DataSource::File {
                path,
                options,
                min_seq_len,
                k_core,
                subsample_users: fraction,
            } => {
                let loaded = load_interactions(path, options)?;
                if loaded.malformed_rows > 0 {
                    log::warn!("{}: skipped {} malformed rows", path.display(), loaded.malformed_rows);
                }
                prepared(build_dataset(&loaded.interactions, *min_seq_len, *k_core)?, *fraction)
            }
            DataSource::Canonical {
                path,
                subsample_users: fraction,
            } => {
                let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
                prepared(InteractionDataset::read_canonical(f)?, *fraction)
            }
        }
    }
}

/// Outcome of one arm at one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub best_epoch: usize,
    pub warmup_epochs: usize,
    pub epochs_run: usize,
    /// Test metrics at the best checkpoint, keyed `hr@k` / `ndcg@k`.
    pub test: BTreeMap<String, f64>,
    pub best_valid_ndcg10: f64,
    pub valid_ndcg10_curve: Vec<f64>,
    pub valid_hr10_curve: Vec<f64>,
    pub n_false: usize,
    pub mining: Option<MiningScore>,
    pub candidate_fingerprint: u64,
    pub wall_time: f64,
    /// Per-user test ranks, user order.
    pub test_ranks: Vec<usize>,
}

impl RunRecord {
    pub fn metric(&self, key: &str) -> f64 {
        self.test.get(key).copied().unwrap_or(f64::NAN)
    }

    /// Variance of the last `k` validation NDCG@10 values (population).
    pub fn tail_variance(&self, k: usize) -> f64 {
        let c = &self.valid_ndcg10_curve;
        let tail = &c[c.len().saturating_sub(k)..];
        let (_, var) = mean_var(tail);
        var
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (mean, xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

pub fn metric_keys() -> Vec<String> {
    let mut keys: Vec<String> = DEFAULT_KS.iter().map(|k| format!("hr@{k}")).collect();
    keys.extend(DEFAULT_KS.iter().map(|k| format!("ndcg@{k}")));
    keys
}

/// Trains one arm at one seed. `dir` receives the run's own artifacts.
pub fn run_arm(base: &TrainConfig, arm: &Arm, seed: u64, data: &PreparedData, dir: Option<&Path>) -> Result<RunRecord> {
    let cfg = arm.config(base, seed);
    cfg.validate()?;
    let files = dir.map(RunFiles::create).transpose()?;
    let start = Instant::now();
    let out = fit(
        &cfg,
        RunData {
            dataset: &data.dataset,
            split: &data.split,
            eval_exclude: data.eval_exclude.as_deref(),
        },
        files.as_ref(),
    )?;
    let mined = out.ledger.as_ref().map(|l| l.all_false()).unwrap_or_default();
    let mining = match (&data.corpus, &out.ledger) {
        (Some(corpus), Some(_)) if !cfg.backbone_only => Some(score_mining(corpus, &mined)),
        _ => None,
    };
    let mut test = BTreeMap::new();
    for &k in &DEFAULT_KS {
        test.insert(format!("hr@{k}"), out.best_test.hr_at(k));
        test.insert(format!("ndcg@{k}"), out.best_test.ndcg_at(k));
    }
    Ok(RunRecord {
        arm: arm.name.clone(),
        seed,
        best_epoch: out.best_epoch,
        warmup_epochs: out.warmup_epochs,
        epochs_run: out.history.len(),
        test,
        best_valid_ndcg10: out.best_valid_ndcg10(),
        valid_ndcg10_curve: out.valid_ndcg10(),
        valid_hr10_curve: out.history.iter().map(|r| r.valid_hr10).collect(),
        n_false: mined.len(),
        mining,
        candidate_fingerprint: out.candidate_fingerprint,
        wall_time: start.elapsed().as_secs_f64(),
        test_ranks: out.best_test.per_user_rank.values().copied().collect(),
        config: cfg,
    })
}

/// Paired comparison of two runs: sign test over per-user test ranks
/// (wins mean `a` ranks the positive better) and `a − b` metric deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub sign: SignTest,
    pub metric_delta: BTreeMap<String, f64>,
}

pub fn compare_runs(a: &RunRecord, b: &RunRecord) -> Result<Comparison> {
    compare_arms(std::slice::from_ref(a), std::slice::from_ref(b))
}

/// Pools per-user pairs over seeds matched by seed; metric deltas are the
/// difference of seed means.
pub fn compare_arms(a: &[RunRecord], b: &[RunRecord]) -> Result<Comparison> {
    let mut ra = Vec::new();
    let mut rb = Vec::new();
    let mut matched = 0;
    for x in a {
        let Some(y) = b.iter().find(|y| y.seed == x.seed) else {
            continue;
        };
        if x.candidate_fingerprint != y.candidate_fingerprint || x.test_ranks.len() != y.test_ranks.len() {
            return Err(Error::Logic(format!(
                "runs {} and {} (seed {}) were ranked on different candidate sets",
                x.arm, y.arm, x.seed
            )));
        }
        ra.extend_from_slice(&x.test_ranks);
        rb.extend_from_slice(&y.test_ranks);
        matched += 1;
    }
    if matched == 0 {
        return Err(Error::Logic("no runs with matching seeds to compare".into()));
    }
    let sign = paired_rank_test(&ra, &rb)?;
    let mean = |runs: &[RunRecord], key: &str| mean_var(&runs.iter().map(|r| r.metric(key)).collect::<Vec<_>>()).0;
    let metric_delta = metric_keys()
        .into_iter()
        .map(|k| {
            let d = mean(a, &k) - mean(b, &k);
            (k, d)
        })
        .collect();
    Ok(Comparison { sign, metric_delta })
}

/// Mean and standard error over seeds for one arm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub runs: usize,
    pub mean: BTreeMap<String, f64>,
    pub stderr: BTreeMap<String, f64>,
}

pub fn summarize(arm: &str, runs: &[RunRecord]) -> ArmSummary {
    let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.arm == arm).collect();
    let mut mean = BTreeMap::new();
    let mut stderr = BTreeMap::new();
    let mut keys = metric_keys();
    keys.push("valid_ndcg@10".into());
    for key in keys {
        let xs: Vec<f64> = mine
            .iter()
            .map(|r| if key == "valid_ndcg@10" { r.best_valid_ndcg10 } else { r.metric(&key) })
            .collect();
        let (m, v) = mean_var(&xs);
        let n = xs.len() as f64;
        let se = if xs.len() > 1 { (v * n / (n - 1.0)).sqrt() / n.sqrt() } else { 0.0 };
        mean.insert(key.clone(), m);
        stderr.insert(key, se);
    }
    ArmSummary {
        arm: arm.to_string(),
        runs: mine.len(),
        mean,
        stderr,
    }
}

/// Everything a preset run produced, in the order runs finished.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetResults {
    pub preset: ExperimentPreset,
    pub data: DataSource,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<ArmFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmFailure {
    pub arm: String,
    pub seed: u64,
    pub reason: String,
}

impl PresetResults {
    pub fn runs_of(&self, arm: &str) -> Vec<RunRecord> {
        self.runs.iter().filter(|r| r.arm == arm).cloned().collect()
    }

    pub fn summary(&self, arm: &str) -> ArmSummary {
        summarize(arm, &self.runs)
    }

    pub fn compare(&self, a: &str, b: &str) -> Result<Comparison> {
        compare_arms(&self.runs_of(a), &self.runs_of(b))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["arm".to_string(), "seed".into(), "status".into()];
        header.extend(metric_keys());
        header.extend(
            [
                "valid_ndcg@10",
                "best_epoch",
                "warmup_epochs",
                "epochs_run",
                "n_false",
                "mining_precision",
                "mining_recall",
                "mining_lift",
                "wall_time",
                "error",
            ]
            .map(String::from),
        );
        w.write_record(&header).map_err(csv_err)?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| format!("{v:.6}"));
        for r in &self.runs {
            let mut row = vec![r.arm.clone(), r.seed.to_string(), "ok".into()];
            row.extend(metric_keys().iter().map(|k| format!("{:.6}", r.metric(k))));
            row.extend([
                format!("{:.6}", r.best_valid_ndcg10),
                r.best_epoch.to_string(),
                r.warmup_epochs.to_string(),
                r.epochs_run.to_string(),
                r.n_false.to_string(),
                opt(r.mining.as_ref().and_then(|m| m.precision)),
                opt(r.mining.as_ref().map(|m| m.recall)),
                opt(r.mining.as_ref().and_then(|m| m.lift())),
                format!("{:.1}", r.wall_time),
                String::new(),
            ]);
            w.write_record(&row).map_err(csv_err)?;
        }
        for f in &self.failures {
            let mut row = vec![f.arm.clone(), f.seed.to_string(), "failed".into()];
            row.extend(std::iter::repeat(String::new()).take(header.len() - 4));
            row.push(f.reason.clone());
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}\n", self.preset.name);
        let _ = writeln!(
            s,
            "Test metrics at the best validation checkpoint, mean ± standard error over seeds {:?}.\n",
            self.preset.seeds
        );
        let keys = metric_keys();
        let head: Vec<String> = keys.iter().map(|k| k.replace("hr", "HR").replace("ndcg", "NDCG")).collect();
        let _ = writeln!(s, "| arm | runs | {} |", head.join(" | "));
        let _ = writeln!(s, "|---|---|{}", "---|".repeat(keys.len()));
        for arm in &self.preset.arms {
            let sm = self.summary(&arm.name);
            if sm.runs == 0 {
                continue;
            }
            let cells: Vec<String> = keys
                .iter()
                .map(|k| format!("{:.4} ± {:.4}", sm.mean[k], sm.stderr[k]))
                .collect();
            let _ = writeln!(s, "| {} | {} | {} |", arm.name, sm.runs, cells.join(" | "));
        }

        let reference = &self.preset.arms[0].name;
        let others: Vec<&Arm> = self.preset.arms[1..].iter().collect();
        if !others.is_empty() && !self.runs_of(reference).is_empty() {
            let _ = writeln!(
                s,
                "\n## Paired sign test against {reference}\n\nPer-user test ranks pooled over seeds; a win means the arm ranks the held-out item strictly better.\n"
            );
            let _ = writeln!(s, "| arm | wins | losses | ties | p | ΔHR@10 | ΔNDCG@10 |");
            let _ = writeln!(s, "|---|---|---|---|---|---|---|");
            for arm in others {
                match self.compare(&arm.name, reference) {
                    Ok(c) => {
                        let _ = writeln!(
                            s,
                            "| {} | {} | {} | {} | {:.3e} | {:+.4} | {:+.4} |",
                            arm.name,
                            c.sign.wins,
                            c.sign.losses,
                            c.sign.ties,
                            c.sign.p_value,
                            c.metric_delta["hr@10"],
                            c.metric_delta["ndcg@10"]
                        );
                    }
                    Err(e) => log::debug!("no comparison for {}: {e}", arm.name),
                }
            }
        }

        let mined: Vec<&RunRecord> = self.runs.iter().filter(|r| r.mining.is_some()).collect();
        if !mined.is_empty() {
            let _ = writeln!(
                s,
                "\n## Mining against planted false negatives\n\n| arm | seed | mined | hits | precision | random | lift | recall |"
            );
            let _ = writeln!(s, "|---|---|---|---|---|---|---|---|");
            for r in mined {
                let m = r.mining.as_ref().expect("filtered");
                let f = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {:.4} | {} | {:.4} |",
                    r.arm,
                    r.seed,
                    m.mined,
                    m.hits,
                    f(m.precision),
                    m.random_precision,
                    f(m.lift()),
                    m.recall
                );
            }
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "\n## Failed runs\n");
            for f in &self.failures {
                let _ = writeln!(s, "- {} seed {}: {}", f.arm, f.seed, f.reason);
            }
        }
        s
    }

    /// Validation curves per arm (mean over seeds) and, for swept arms,
    /// test HR@10 and NDCG@10 against the swept value.
    pub fn write_plots(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let mut written = Vec::new();
        for (key, label) in [("ndcg", "valid NDCG@10"), ("hr", "valid HR@10")] {
            let series: Vec<Series> = self
                .preset
                .arms
                .iter()
                .filter(|a| a.sweep.is_none())
                .filter_map(|a| {
                    let curves: Vec<&Vec<f64>> = self
                        .runs
                        .iter()
                        .filter(|r| r.arm == a.name)
                        .map(|r| if key == "ndcg" { &r.valid_ndcg10_curve } else { &r.valid_hr10_curve })
                        .collect();
                    let len = curves.iter().map(|c| c.len()).max()?;
                    let points = (0..len)
                        .filter_map(|e| {
                            let vals: Vec<f64> = curves.iter().filter_map(|c| c.get(e).copied()).collect();
                            (!vals.is_empty()).then(|| ((e + 1) as f64, mean_var(&vals).0))
                        })
                        .collect();
                    Some(Series {
                        label: a.name.clone(),
                        points,
                    })
                })
                .collect();
            if series.is_empty() {
                continue;
            }
            let p = dir.join(format!("curves_{key}10.png"));
            line_chart(&p, &format!("{}: {label}", self.preset.name), "epoch", label, &series)?;
            written.push(p);
        }

        let params: BTreeSet<&str> = self
            .preset
            .arms
            .iter()
            .filter_map(|a| a.sweep.as_ref().map(|s| s.param.as_str()))
            .collect();
        for param in params {
            for (metric, label) in [("hr@10", "test HR@10"), ("ndcg@10", "test NDCG@10")] {
                let mut by_series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
                for a in &self.preset.arms {
                    let Some(sw) = a.sweep.as_ref().filter(|s| s.param == param) else {
                        continue;
                    };
                    let sm = self.summary(&a.name);
                    if sm.runs > 0 {
                        by_series.entry(&sw.series).or_default().push((sw.value, sm.mean[metric]));
                    }
                }
                if by_series.is_empty() {
                    continue;
                }
                let (lo, hi) = by_series
                    .values()
                    .flatten()
                    .fold((f64::MAX, f64::MIN), |(l, h), p| (l.min(p.0), h.max(p.0)));
                let mut series: Vec<Series> = by_series
                    .into_iter()
                    .map(|(name, mut pts)| {
                        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
                        Series {
                            label: name.to_string(),
                            points: pts,
                        }
                    })
                    .collect();
                let has_backbone = series.iter().any(|s| s.label == "backbone");
                let reference = self.summary("backbone");
                if !has_backbone && reference.runs > 0 {
                    let y = reference.mean[metric];
                    series.push(Series {
                        label: "backbone".into(),
                        points: vec![(lo, y), (hi, y)],
                    });
                }
                let tag = metric.replace('@', "");
                let p = dir.join(format!("sweep_{param}_{tag}.png"));
                line_chart(&p, &format!("{label} vs {param}"), param, label, &series)?;
                written.push(p);
            }
        }
        Ok(written)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[derive(Serialize)]
struct Manifest<'a> {
    manifest_version: u32,
    code_version: &'a str,
    preset: &'a ExperimentPreset,
    data: &'a DataSource,
    complete: bool,
    runs: Vec<ManifestRun<'a>>,
    failures: &'a [ArmFailure],
}

#[derive(Serialize)]
struct ManifestRun<'a> {
    arm: &'a str,
    seed: u64,
    deltas: &'a [Delta],
    config: &'a TrainConfig,
    candidate_fingerprint: String,
    run_dir: String,
    best_epoch: usize,
    test: &'a BTreeMap<String, f64>,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_dir(arm: &Arm, seed: u64) -> String {
    format!("runs/{}/seed{seed}", arm.slug())
}

fn write_outputs(results: &PresetResults, out: &Path, complete: bool) -> Result<()> {
    write_file(&out.join("results.csv"), &results.to_csv()?)?;
    let runs = results
        .runs
        .iter()
        .map(|r| {
            let arm = results.preset.arm(&r.arm).expect("run of a preset arm");
            ManifestRun {
                arm: &r.arm,
                seed: r.seed,
                deltas: &arm.deltas,
                config: &r.config,
                candidate_fingerprint: format!("{:016x}", r.candidate_fingerprint),
                run_dir: run_dir(arm, r.seed),
                best_epoch: r.best_epoch,
                test: &r.test,
            }
        })
        .collect();
    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        code_version: env!("CARGO_PKG_VERSION"),
        preset: &results.preset,
        data: &results.data,
        complete,
        runs,
        failures: &results.failures,
    };
    write_file(&out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    write_file(&out.join("runs.json"), &serde_json::to_string(&results.runs)?)
}

/// Runs every arm at every seed, writing outputs to `out` as it goes. The
/// first failing run stops the preset with [`Error::ArmFailed`]; results of
/// runs finished before it stay on disk.
pub fn run_preset(preset: &ExperimentPreset, source: &DataSource, out: &Path) -> Result<PresetResults> {
    preset.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = source.prepare()?;
    if let Some(corpus) = &data.corpus {
        corpus.export(&out.join("data"))?;
    }
    let mut results = PresetResults {
        preset: preset.clone(),
        data: source.clone(),
        runs: Vec::new(),
        failures: Vec::new(),
    };
    for arm in &preset.arms {
        for &seed in &preset.seeds {
            log::info!("preset {}: arm {} seed {seed}", preset.name, arm.name);
            let dir = out.join(run_dir(arm, seed));
            match run_arm(&preset.base, arm, seed, &data, Some(&dir)) {
                Ok(rec) => {
                    log::info!(
                        "arm {} seed {seed}: test HR@10 {:.4} NDCG@10 {:.4} ({:.0}s)",
                        arm.name,
                        rec.metric("hr@10"),
                        rec.metric("ndcg@10"),
                        rec.wall_time
                    );
                    results.runs.push(rec);
                    write_outputs(&results, out, false)?;
                }
                Err(e) => {
                    results.failures.push(ArmFailure {
                        arm: arm.name.clone(),
                        seed,
                        reason: e.to_string(),
                    });
                    write_outputs(&results, out, false)?;
                    write_file(&out.join("results.md"), &results.to_markdown())?;
                    return Err(Error::ArmFailed {
                        arm: format!("{} (seed {seed})", arm.name),
                        reason: e.to_string(),
                    });
                }
            }
        }
    }
    write_outputs(&results, out, true)?;
    write_file(&out.join("results.md"), &results.to_markdown())?;
    results.write_plots(out)?;
    Ok(results)
}
