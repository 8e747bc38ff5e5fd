//! Warmup, the mining / reversal / consistency epoch loop, early stopping and
//! per-epoch reporting.

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::dataio::{EvalNegMode, InteractionDataset, SplitDataset, Stage};
use crate::distill::{consistency_loss, final_loss, LossBreakdown, TeacherParams};
use crate::encoder::{encode, forward_on_tape, sigmoid, EncoderConfig, ModelParams, SeqBatch};
use crate::error::{Error, Result};
use crate::eval::{EvalSuite, RankingReport};
use crate::negatives::{
    draw_negatives, expand_terms, fill_uniform, mine_variance_based, removal_filter, CountMode,
    FnAction, LedgerKey, MiningStrategy, Observation, RecordLedger, ScoreHistory, TermKind,
    TrainingInstance,
};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{dot, Matrix};
use crate::Rng;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WarmupPolicy {
    FixedEpochs {
        epochs: usize,
    },
    /// Ends once the epoch-mean basic loss improved by less than `threshold`
    /// (relative) over the last `patience` epochs, or after `cap` epochs.
    RelImprovementBelow {
        threshold: f64,
        patience: usize,
        cap: usize,
    },
}

impl Default for WarmupPolicy {
    fn default() -> Self {
        WarmupPolicy::RelImprovementBelow {
            threshold: 0.01,
            patience: 2,
            cap: 50,
        }
    }
}

impl WarmupPolicy {
    /// Whether warmup is over given the basic losses of the epochs so far.
    pub fn done(&self, losses: &[f64]) -> bool {
        match *self {
            WarmupPolicy::FixedEpochs { epochs } => losses.len() >= epochs,
            WarmupPolicy::RelImprovementBelow {
                threshold,
                patience,
                cap,
            } => {
                let n = losses.len();
                if n >= cap {
                    return true;
                }
                if n <= patience {
                    return false;
                }
                let then = losses[n - 1 - patience];
                let now = losses[n - 1];
                (then - now) / then.abs().max(f64::MIN_POSITIVE) < threshold
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub max_grad_norm: Option<f64>,
    pub warmup: WarmupPolicy,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Seeds the fixed evaluation candidate sets; shared across training
    /// seeds so runs stay comparable.
    pub eval_seed: u64,
    pub eval_neg_mode: EvalNegMode,
    pub n_negatives: usize,
    pub mining: MiningStrategy,
    pub count_mode: CountMode,
    pub fn_action: FnAction,
    pub alpha: f64,
    pub decay: f64,
    /// Train with plain uniform negatives throughout (no ledger, no teacher).
    pub backbone_only: bool,
    pub eval_with_teacher: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder: EncoderConfig::default(),
            learning_rate: 0.001,
            batch_size: 128,
            optimizer: OptimizerKind::Adam,
            max_grad_norm: None,
            warmup: WarmupPolicy::default(),
            max_epochs: 200,
            early_stop_patience: 10,
            seed: 42,
            eval_seed: 2024,
            eval_neg_mode: EvalNegMode::ExcludeHistory,
            n_negatives: 1,
            mining: MiningStrategy::UfnrecThreshold { m: 3 },
            count_mode: CountMode::Cumulative,
            fn_action: FnAction::Reverse,
            alpha: 0.2,
            decay: 0.999,
            backbone_only: false,
            eval_with_teacher: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 || self.n_negatives == 0 || self.max_epochs == 0 {
            return bad("batch_size, n_negatives and max_epochs must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return bad("decay must lie in [0, 1]");
        }
        match self.mining {
            MiningStrategy::UfnrecThreshold { m } if m == 0 => bad("m must be positive"),
            MiningStrategy::VarianceBased { window, .. } if window < 2 => {
                bad("variance window must be at least 2")
            }
            _ if self.fn_action == FnAction::Keep && self.mining.is_none() => {
                bad("fn_action keep needs a mining strategy")
            }
            _ => Ok(()),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    fn ledger(&self) -> Option<RecordLedger> {
        match self.mining {
            MiningStrategy::UfnrecThreshold { m } => Some(RecordLedger::new(m, self.count_mode)),
            MiningStrategy::VarianceBased { .. } => Some(RecordLedger::new(u32::MAX, self.count_mode)),
            MiningStrategy::None => None,
        }
    }

    fn uses_teacher(&self) -> bool {
        !self.backbone_only && self.fn_action != FnAction::Remove && !self.mining.is_none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Main,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub schema_version: u32,
    pub epoch: usize,
    pub phase: Phase,
    pub loss_basic: f64,
    pub loss_con: f64,
    pub loss_final: f64,
    pub n_rec: usize,
    pub n_false: usize,
    pub valid_hr10: f64,
    pub valid_ndcg10: f64,
    /// Loss terms of each kind emitted this epoch.
    pub reversed_terms: usize,
    pub kept_false_terms: usize,
    pub consistency_terms: usize,
    pub wall_time: f64,
}

/// One row of the representation matrix scored against one item.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlannedTerm {
    pub row: usize,
    pub item: usize,
    pub label: f64,
}

/// Everything needed to evaluate one batch's loss.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub batch: SeqBatch,
    pub basic: Vec<PlannedTerm>,
    pub consistency: Vec<PlannedTerm>,
    /// Loss sums are divided by this (one per training context).
    pub instances: usize,
}

pub struct BatchOutcome {
    pub loss: LossBreakdown,
    pub grads: Vec<Matrix>,
    /// Logits of the basic terms, in plan order.
    pub basic_logits: Vec<f64>,
}

/// Loss and exact gradients of a batch plan; dropout iff `dropout` is given.
pub fn loss_and_grad(
    params: &ModelParams,
    cfg: &EncoderConfig,
    plan: &BatchPlan,
    alpha: f64,
    dropout: Option<&mut Rng>,
) -> Result<BatchOutcome> {
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let reps = forward_on_tape(&mut tape, &vars, params, cfg, &plan.batch, dropout)?;
    let out_emb = vars.output_embeddings(params);
    let scale = 1.0 / plan.instances.max(1) as f64;

    let logits_for = |terms: &[PlannedTerm], tape: &mut Tape| {
        let r = tape.gather(reps, terms.iter().map(|t| t.row).collect());
        let e = tape.gather(out_emb, terms.iter().map(|t| t.item).collect());
        tape.row_dot(r, e)
    };
    let basic_logits = logits_for(&plan.basic, &mut tape);
    let basic = tape.bce(
        basic_logits,
        plan.basic.iter().map(|t| t.label).collect(),
        vec![scale; plan.basic.len()],
    );
    let mut total = basic;
    let mut con_value = 0.0;
    if !plan.consistency.is_empty() {
        let con_logits = logits_for(&plan.consistency, &mut tape);
        let labels: Vec<f64> = plan.consistency.iter().map(|t| t.label).collect();
        con_value = consistency_loss(tape.value(con_logits).data(), &labels) * scale;
        let con = tape.bce(con_logits, labels, vec![alpha * scale; plan.consistency.len()]);
        total = tape.add(basic, con);
    }
    let basic_value = tape.value(basic).get(0, 0);
    let loss = final_loss(basic_value, con_value, alpha);
    if !basic_value.is_finite() || !con_value.is_finite() {
        return Err(Error::NonFinite(format!(
            "batch loss (basic {basic_value}, consistency {con_value})"
        )));
    }
    let mut g = tape.backward(total);
    let grads = vars
        .0
        .iter()
        .zip(params.params())
        .map(|(&v, p)| g.take(v).unwrap_or_else(|| Matrix::zeros_like(&p.value)))
        .collect();
    Ok(BatchOutcome {
        loss,
        grads,
        basic_logits: tape.value(basic_logits).data().to_vec(),
    })
}

/// Training contexts of one user: inputs are `train[..T-1]`, the target of
/// step `t` is `train[t]`.
#[derive(Clone, Debug)]
struct UserRows {
    input: Vec<usize>,
    /// `(t, column in the padded window of length `window`)`.
    steps: Vec<(usize, usize)>,
}

fn user_rows(train: &[usize], window: usize) -> UserRows {
    let n = train.len();
    if n < 2 {
        return UserRows {
            input: Vec::new(),
            steps: Vec::new(),
        };
    }
    let input = train[..n - 1].to_vec();
    let kept = input.len().min(window);
    let offset = window - kept;
    let first_t = n - kept;
    let steps = (first_t..n).map(|t| (t, offset + t - first_t)).collect();
    UserRows { input, steps }
}

fn stream(seed: u64, id: u64) -> Rng {
    let mut r = Rng::seed_from_u64(seed);
    r.set_stream(id);
    r
}

/// Data a run trains and evaluates on.
pub struct RunData<'a> {
    pub dataset: &'a InteractionDataset,
    pub split: &'a SplitDataset,
    /// Extra items per user kept out of evaluation negatives.
    pub eval_exclude: Option<&'a [Vec<usize>]>,
}

pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    data: RunData<'a>,
    pub student: ModelParams,
    pub teacher: Option<TeacherParams>,
    pub ledger: Option<RecordLedger>,
    history_scores: Option<ScoreHistory>,
    optimizer: Optimizer,
    shuffle_rng: Rng,
    neg_rng: Rng,
    dropout_rng: Rng,
    exclusions: Vec<HashSet<usize>>,
    pub epoch: usize,
    pub phase: Phase,
    warmup_losses: Vec<f64>,
}

#[derive(Default)]
struct EpochTotals {
    basic: f64,
    con: f64,
    instances: usize,
    reversed: usize,
    kept: usize,
    consistency: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: RunData<'a>) -> Result<Self> {
        cfg.validate()?;
        let mut init_rng = stream(cfg.seed, 0);
        let student = ModelParams::init(&cfg.encoder, data.dataset.item_count, &mut init_rng)?;
        let exclusions = data
            .split
            .train
            .iter()
            .map(|s| s.iter().copied().collect())
            .collect();
        let optimizer = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.max_grad_norm);
        let phase = if !cfg.backbone_only && cfg.warmup.done(&[]) {
            Phase::Main
        } else {
            Phase::Warmup
        };
        let mut t = Trainer {
            shuffle_rng: stream(cfg.seed, 1),
            neg_rng: stream(cfg.seed, 2),
            dropout_rng: stream(cfg.seed, 3),
            cfg,
            data,
            student,
            teacher: None,
            ledger: None,
            history_scores: None,
            optimizer,
            exclusions,
            epoch: 0,
            phase,
            warmup_losses: Vec::new(),
        };
        if t.phase == Phase::Main {
            t.begin_main()?;
        }
        Ok(t)
    }

    fn begin_main(&mut self) -> Result<()> {
        self.phase = Phase::Main;
        if self.cfg.backbone_only {
            return Ok(());
        }
        self.ledger = self.cfg.ledger();
        if self.cfg.uses_teacher() {
            self.teacher = Some(TeacherParams::from_student(&self.student, self.cfg.decay)?);
        }
        if let MiningStrategy::VarianceBased { window, memory, use_rec, .. } = self.cfg.mining {
            let cap = if use_rec { usize::MAX } else { memory };
            self.history_scores = Some(ScoreHistory::new(window, cap));
        }
        Ok(())
    }

    /// Whether the warmup phase is over.
    pub fn warmup_finished(&self) -> bool {
        self.phase == Phase::Main || self.cfg.warmup.done(&self.warmup_losses)
    }

    fn mining_active(&self) -> bool {
        self.phase == Phase::Main && !self.cfg.backbone_only && self.ledger.is_some()
    }

    /// Runs one epoch over all training contexts and returns its report
    /// (validation fields filled by the caller).
    pub fn train_epoch(&mut self) -> Result<EpochReport> {
        let start = Instant::now();
        self.epoch += 1;
        let phase = self.phase;
        let mining = self.mining_active();
        let n_users = self.data.split.user_count();
        let mut order: Vec<usize> = (0..n_users).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut totals = EpochTotals::default();
        let mut observations = Vec::new();
        for users in order.chunks(self.cfg.batch_size) {
            self.train_batch(users, mining, &mut totals, &mut observations)?;
        }
        let (loss_basic, loss_con) = if totals.instances == 0 {
            (0.0, 0.0)
        } else {
            let n = totals.instances as f64;
            (totals.basic / n, totals.con / n)
        };
        if mining {
            self.end_of_epoch(observations)?;
        }
        if phase == Phase::Warmup {
            self.warmup_losses.push(loss_basic);
            if self.cfg.warmup.done(&self.warmup_losses) {
                self.begin_main()?;
            }
        }
        let fl = final_loss(loss_basic, loss_con, self.cfg.alpha);
        Ok(EpochReport {
            schema_version: REPORT_SCHEMA_VERSION,
            epoch: self.epoch,
            phase,
            loss_basic: fl.basic,
            loss_con: fl.consistency,
            loss_final: fl.total,
            n_rec: self.ledger.as_ref().map_or(0, |l| l.rec_len()),
            n_false: self.ledger.as_ref().map_or(0, |l| l.false_len()),
            valid_hr10: f64::NAN,
            valid_ndcg10: f64::NAN,
            reversed_terms: totals.reversed,
            kept_false_terms: totals.kept,
            consistency_terms: totals.consistency,
            wall_time: start.elapsed().as_secs_f64(),
        })
    }

    fn train_batch(
        &mut self,
        users: &[usize],
        mining: bool,
        totals: &mut EpochTotals,
        observations: &mut Vec<Observation>,
    ) -> Result<()> {
        let split = self.data.split;
        let vocab = self.data.dataset.item_count;
        let max_len = self.cfg.encoder.max_len;
        let window = users
            .iter()
            .map(|&u| split.train[u].len().saturating_sub(1))
            .max()
            .unwrap_or(0)
            .clamp(1, max_len);
        let rows: Vec<UserRows> = users.iter().map(|&u| user_rows(&split.train[u], window)).collect();
        let inputs: Vec<&[usize]> = rows.iter().map(|r| r.input.as_slice()).collect();
        let batch = SeqBatch::from_sequences(&inputs, window);
        let n_neg = self.cfg.n_negatives;

        let mut basic = Vec::new();
        let mut consistency = Vec::new();
        // (basic index of the positive, basic index of a negative, key)
        let mut scored: Vec<(usize, usize, LedgerKey, usize)> = Vec::new();
        let mut instances = 0;
        let con_enabled = mining && self.teacher.is_some();
        for (b, (&u, r)) in users.iter().zip(&rows).enumerate() {
            let excl = &self.exclusions[u];
            for &(t, col) in &r.steps {
                let row = batch.row(b, col);
                let positive = split.train[u][t];
                instances += 1;
                let negatives = match (&self.ledger, mining) {
                    (Some(ledger), true) => {
                        draw_negatives(ledger, u, t, n_neg, vocab, excl, &mut self.neg_rng)?
                    }
                    _ => {
                        let mut out = Vec::with_capacity(n_neg);
                        if vocab < n_neg + excl.len() {
                            return Err(Error::Config(format!(
                                "cannot draw {n_neg} negatives for user {u}"
                            )));
                        }
                        fill_uniform(&mut out, n_neg, vocab, |i| excl.contains(&i), &mut self.neg_rng);
                        out
                    }
                };
                let inst = TrainingInstance {
                    user: u,
                    t,
                    positive,
                    negatives,
                };
                let Some(ledger) = self.ledger.as_ref().filter(|_| mining) else {
                    basic.push(PlannedTerm { row, item: positive, label: 1.0 });
                    basic.extend(inst.negatives.iter().map(|&item| PlannedTerm { row, item, label: 0.0 }));
                    continue;
                };
                let mined: HashSet<usize> = ledger.false_negatives(u, t).collect();
                let inst = removal_filter(&inst, &mined, vocab, excl, &mut self.neg_rng);
                let pos_index = basic.len();
                for term in expand_terms(ledger, &inst, self.cfg.fn_action) {
                    let idx = basic.len();
                    basic.push(PlannedTerm { row, item: term.item, label: term.label });
                    match term.kind {
                        TermKind::Negative => scored.push((pos_index, idx, (u, t, term.item), positive)),
                        TermKind::Reversed => totals.reversed += 1,
                        TermKind::KeptFalse => totals.kept += 1,
                        TermKind::Positive => {}
                    }
                    if con_enabled && matches!(term.kind, TermKind::Reversed | TermKind::KeptFalse) {
                        consistency.push(PlannedTerm { row, item: term.item, label: f64::NAN });
                    }
                }
            }
        }
        if instances == 0 {
            return Ok(());
        }
        if !consistency.is_empty() {
            let teacher = self.teacher.as_ref().expect("teacher present");
            let reps = encode(&teacher.shadow, &self.cfg.encoder, &batch)?;
            let table = teacher.shadow.output_embeddings();
            for term in &mut consistency {
                term.label = sigmoid(dot(reps.values.row(term.row), table.row(term.item)));
            }
            totals.consistency += consistency.len();
        }
        let plan = BatchPlan {
            batch,
            basic,
            consistency,
            instances,
        };
        let out = loss_and_grad(
            &self.student,
            &self.cfg.encoder,
            &plan,
            self.cfg.alpha,
            Some(&mut self.dropout_rng),
        )?;
        for (pos, neg, (user, t, item), positive) in scored {
            observations.push(Observation {
                user,
                t,
                item,
                positive,
                neg_score: sigmoid(out.basic_logits[neg]),
                pos_score: sigmoid(out.basic_logits[pos]),
            });
        }
        totals.basic += out.loss.basic * instances as f64;
        totals.con += out.loss.consistency * instances as f64;
        totals.instances += instances;
        let mut grads = out.grads;
        self.optimizer.step(&mut self.student, &mut grads)?;
        if let Some(teacher) = self.teacher.as_mut() {
            teacher.ema_update(&self.student)?;
        }
        Ok(())
    }

    fn end_of_epoch(&mut self, observations: Vec<Observation>) -> Result<()> {
        let ledger = self.ledger.as_mut().expect("mining needs a ledger");
        match self.cfg.mining {
            MiningStrategy::UfnrecThreshold { .. } => {
                ledger.record_epoch(observations)?;
            }
            MiningStrategy::VarianceBased {
                window,
                mean_quantile,
                var_quantile,
                use_rec,
                ..
            } => {
                let history = self.history_scores.as_mut().expect("score history");
                if use_rec {
                    ledger.record_epoch(observations)?;
                    for (u, t, i) in ledger.recorded_keys() {
                        if !ledger.is_false(u, t, i) {
                            history.track(u, t, i);
                        }
                    }
                } else {
                    for o in &observations {
                        history.track(o.user, o.t, o.item);
                    }
                }
                score_tracked(&self.student, &self.cfg.encoder, self.data.split, history)?;
                let mined = mine_variance_based(&history.snapshot(), window, mean_quantile, var_quantile);
                for (u, t, i) in mined {
                    ledger.admit_false(u, t, i, self.data.split.train[u][t])?;
                    history.untrack(u, t, i);
                }
            }
            MiningStrategy::None => {}
        }
        if cfg!(debug_assertions) {
            ledger.check_invariants()?;
        }
        Ok(())
    }

    /// Parameters used for evaluation.
    pub fn eval_params(&self) -> &ModelParams {
        match (&self.teacher, self.cfg.eval_with_teacher) {
            (Some(t), true) => &t.shadow,
            _ => &self.student,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                encoder: self.cfg.encoder.clone(),
                item_count: self.data.dataset.item_count,
                epoch: self.epoch,
            },
            student: self.student.clone(),
            teacher: self.teacher.as_ref().map(|t| t.shadow.clone()),
        }
    }
}

/// Appends the current student probability of every tracked key.
fn score_tracked(
    params: &ModelParams,
    cfg: &EncoderConfig,
    split: &SplitDataset,
    history: &mut ScoreHistory,
) -> Result<()> {
    let users: Vec<usize> = (0..split.user_count())
        .filter(|&u| split.train[u].len() >= 2)
        .collect();
    for chunk in users.chunks(256) {
        let window = chunk
            .iter()
            .map(|&u| split.train[u].len() - 1)
            .max()
            .unwrap_or(1)
            .min(cfg.max_len);
        let rows: Vec<UserRows> = chunk.iter().map(|&u| user_rows(&split.train[u], window)).collect();
        let inputs: Vec<&[usize]> = rows.iter().map(|r| r.input.as_slice()).collect();
        let batch = SeqBatch::from_sequences(&inputs, window);
        let reps = encode(params, cfg, &batch)?;
        let table = params.output_embeddings();
        for (b, (&u, r)) in chunk.iter().zip(&rows).enumerate() {
            for &(t, col) in &r.steps {
                let items: Vec<usize> = history.tracked(u, t).collect();
                for i in items {
                    let s = sigmoid(dot(reps.values.row(batch.row(b, col)), table.row(i)));
                    history.push((u, t, i), s);
                }
            }
        }
    }
    Ok(())
}

/// Result of [`fit`].
pub struct FitOutcome {
    pub history: Vec<EpochReport>,
    pub best_epoch: usize,
    pub best_valid: RankingReport,
    pub best_test: RankingReport,
    pub best: Checkpoint,
    pub ledger: Option<RecordLedger>,
    pub warmup_epochs: usize,
    /// Fingerprint of the test candidate sets.
    pub candidate_fingerprint: u64,
}

impl FitOutcome {
    pub fn valid_ndcg10(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.valid_ndcg10).collect()
    }

    pub fn best_valid_ndcg10(&self) -> f64 {
        self.best_valid.ndcg_at(10)
    }
}

/// Files a run writes when given an output directory.
pub struct RunFiles {
    pub dir: PathBuf,
}

impl RunFiles {
    pub fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(RunFiles { dir: dir.to_path_buf() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    }
}

/// Warmup, then mining epochs until `max_epochs` or early stopping on
/// validation NDCG@10. Early stopping is only considered once warmup is
/// over. Returns the best-by-validation checkpoint and its test report.
pub fn fit(cfg: &TrainConfig, data: RunData<'_>, out: Option<&RunFiles>) -> Result<FitOutcome> {
    let exclude = data.eval_exclude;
    let extra = |u: usize| exclude.map_or_else(Vec::new, |e| e[u].clone());
    let valid = EvalSuite::build(data.dataset, data.split, Stage::Valid, cfg.eval_seed, cfg.eval_neg_mode, &extra)?;
    let test = EvalSuite::build(data.dataset, data.split, Stage::Test, cfg.eval_seed, cfg.eval_neg_mode, &extra)?;
    let mut trainer = Trainer::new(cfg.clone(), data)?;
    let mut stream = match out {
        Some(files) => {
            files.write("config.toml", &cfg.to_toml()?)?;
            let p = files.path("epochs.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };
    let mut history = Vec::new();
    let mut best: Option<(usize, RankingReport, Checkpoint)> = None;
    let mut since_best = 0;
    let mut warmup_epochs = 0;
    while trainer.epoch < cfg.max_epochs {
        let mut report = trainer.train_epoch()?;
        if report.phase == Phase::Warmup {
            warmup_epochs = report.epoch;
        }
        let params = trainer.eval_params();
        if !params.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameter {} at epoch {}",
                params.first_non_finite().unwrap_or("?"),
                report.epoch
            )));
        }
        let v = valid.evaluate(params, &cfg.encoder)?;
        report.valid_hr10 = v.hr_at(10);
        report.valid_ndcg10 = v.ndcg_at(10);
        log::info!(
            "epoch {} {:?} basic {:.4} con {:.4} rec {} false {} valid ndcg@10 {:.4}",
            report.epoch,
            report.phase,
            report.loss_basic,
            report.loss_con,
            report.n_rec,
            report.n_false,
            report.valid_ndcg10
        );
        if let Some((f, p)) = stream.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&report)?).map_err(|e| Error::io(p.as_path(), e))?;
        }
        let improved = best
            .as_ref()
            .map_or(true, |(_, b, _)| v.ndcg_at(10) > b.ndcg_at(10));
        if improved {
            let mut ck = trainer.checkpoint();
            if cfg.eval_with_teacher {
                ck.student = params.clone();
            }
            best = Some((report.epoch, v, ck));
            since_best = 0;
        } else {
            since_best += 1;
        }
        history.push(report);
        if trainer.warmup_finished() && since_best >= cfg.early_stop_patience {
            break;
        }
    }
    let (best_epoch, best_valid, best_ck) = best.expect("at least one epoch");
    let best_test = test.evaluate(&best_ck.student, &cfg.encoder)?;
    if let Some(files) = out {
        best_ck.save(&files.path("best.ckpt"))?;
        files.write("test_report.txt", &best_test.to_text())?;
        if let Some(ledger) = &trainer.ledger {
            files.write("ledger.tsv", &ledger.dump())?;
        }
    }
    Ok(FitOutcome {
        history,
        best_epoch,
        best_valid,
        best_test,
        best: best_ck,
        ledger: trainer.ledger,
        warmup_epochs,
        candidate_fingerprint: test.fingerprint(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_warmup_rule() {
        let p = WarmupPolicy::RelImprovementBelow {
            threshold: 0.01,
            patience: 2,
            cap: 50,
        };
        let flat = [1.0; 10];
        let first = (1..=10).find(|&n| p.done(&flat[..n])).unwrap();
        assert_eq!(first, 3);
        let falling: Vec<f64> = (0..60).map(|e| 0.9f64.powi(e)).collect();
        assert_eq!((1..=60).find(|&n| p.done(&falling[..n])), Some(50));
        assert!(WarmupPolicy::FixedEpochs { epochs: 0 }.done(&[]));
    }

    #[test]
    fn rows_follow_truncated_window() {
        let r = user_rows(&[5, 6, 7, 8], 10);
        assert_eq!(r.input, vec![5, 6, 7]);
        assert_eq!(r.steps, vec![(1, 7), (2, 8), (3, 9)]);
        let r = user_rows(&[5, 6, 7, 8], 2);
        assert_eq!(r.steps, vec![(2, 0), (3, 1)]);
        assert!(user_rows(&[5], 4).steps.is_empty());
    }

    #[test]
    fn config_round_trips_through_toml() {
        let mut cfg = TrainConfig::default();
        cfg.mining = MiningStrategy::variance_default(true);
        cfg.max_grad_norm = Some(5.0);
        let back = TrainConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(TrainConfig::from_toml("alpha = -1.0").is_err());
    }
}
