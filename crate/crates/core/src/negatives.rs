//! Training negatives and the false-negative record ledger.
//!
//! Each training context is a `(user, t)` pair: the prefix of the user's
//! training sequence before step `t` and the positive item at `t`. Negatives
//! that outscore their positive are recorded per context; recorded items are
//! re-drawn first in the next epoch, and an item whose hit count reaches `m`
//! becomes a false negative for that context for the rest of training.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

/// `(user, t)`.
pub type Context = (usize, usize);
/// `(user, t, item)`.
pub type LedgerKey = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingInstance {
    pub user: usize,
    pub t: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CountMode {
    #[default]
    Cumulative,
    Consecutive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MiningStrategy {
    UfnrecThreshold {
        m: u32,
    },
    VarianceBased {
        window: usize,
        mean_quantile: f64,
        var_quantile: f64,
        /// Draw candidates from recorded negatives only.
        use_rec: bool,
        /// Tracked items per context when `use_rec` is off.
        memory: usize,
    },
    None,
}

impl MiningStrategy {
    pub fn variance_default(use_rec: bool) -> Self {
        MiningStrategy::VarianceBased {
            window: 5,
            mean_quantile: 0.9,
            var_quantile: 0.1,
            use_rec,
            memory: 10,
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, MiningStrategy::None)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntryState {
    /// Counted at least once but currently back in the random pool.
    Idle,
    Rec,
    False,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Entry {
    pub count: u32,
    pub state: EntryState,
    /// Classified by an external miner rather than by the count threshold.
    pub external: bool,
}

/// One negative scored during an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Observation {
    pub user: usize,
    pub t: usize,
    pub item: usize,
    pub positive: usize,
    pub neg_score: f64,
    pub pos_score: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct ContextSets {
    rec: BTreeSet<usize>,
    false_set: BTreeSet<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordLedger {
    m: u32,
    count_mode: CountMode,
    entries: HashMap<LedgerKey, Entry>,
    contexts: HashMap<Context, ContextSets>,
    positives: HashMap<Context, usize>,
}

/// Transitions applied by one [`RecordLedger::record_epoch`] call.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EpochTransitions {
    pub recorded: usize,
    pub dropped: usize,
    pub newly_false: Vec<LedgerKey>,
}

impl RecordLedger {
    /// `m = u32::MAX` never classifies anything.
    pub fn new(m: u32, count_mode: CountMode) -> Self {
        assert!(m >= 1, "threshold m must be positive");
        RecordLedger {
            m,
            count_mode,
            entries: HashMap::new(),
            contexts: HashMap::new(),
            positives: HashMap::new(),
        }
    }

    pub fn m(&self) -> u32 {
        self.m
    }

    pub fn entry(&self, user: usize, t: usize, item: usize) -> Option<Entry> {
        self.entries.get(&(user, t, item)).copied()
    }

    pub fn count(&self, user: usize, t: usize, item: usize) -> u32 {
        self.entry(user, t, item).map_or(0, |e| e.count)
    }

    pub fn rec(&self, user: usize, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.contexts
            .get(&(user, t))
            .into_iter()
            .flat_map(|c| c.rec.iter().copied())
    }

    pub fn false_negatives(&self, user: usize, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.contexts
            .get(&(user, t))
            .into_iter()
            .flat_map(|c| c.false_set.iter().copied())
    }

    pub fn is_false(&self, user: usize, t: usize, item: usize) -> bool {
        self.contexts
            .get(&(user, t))
            .is_some_and(|c| c.false_set.contains(&item))
    }

    pub fn rec_len(&self) -> usize {
        self.contexts.values().map(|c| c.rec.len()).sum()
    }

    pub fn false_len(&self) -> usize {
        self.contexts.values().map(|c| c.false_set.len()).sum()
    }

    /// Every false negative, sorted by key.
    pub fn all_false(&self) -> Vec<LedgerKey> {
        let mut out: Vec<LedgerKey> = self
            .contexts
            .iter()
            .flat_map(|(&(u, t), c)| c.false_set.iter().map(move |&i| (u, t, i)))
            .collect();
        out.sort_unstable();
        out
    }

    /// Every key ever recorded at least once, sorted.
    pub fn recorded_keys(&self) -> Vec<LedgerKey> {
        let mut keys: Vec<LedgerKey> = self
            .entries
            .iter()
            .filter(|(_, e)| e.count > 0 || e.state != EntryState::Idle)
            .map(|(&k, _)| k)
            .collect();
        keys.sort_unstable();
        keys
    }

    /// Up to `n` members of N_rec for a context: highest count first, ties
    /// by item index.
    pub fn rec_for_draw(&self, user: usize, t: usize, n: usize) -> Vec<usize> {
        let mut rec: Vec<(u32, usize)> = self
            .rec(user, t)
            .map(|i| (self.count(user, t, i), i))
            .collect();
        rec.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
        rec.into_iter().take(n).map(|(_, i)| i).collect()
    }

    /// Applies one epoch of observations at the epoch boundary. Observations
    /// are processed in key order so the result does not depend on how they
    /// were gathered.
    pub fn record_epoch(&mut self, mut observations: Vec<Observation>) -> Result<EpochTransitions> {
        observations.sort_by_key(|o| (o.user, o.t, o.item));
        if let Some(w) = observations
            .windows(2)
            .find(|w| (w[0].user, w[0].t, w[0].item) == (w[1].user, w[1].t, w[1].item))
        {
            return Err(Error::Logic(format!(
                "negative ({}, {}, {}) observed twice in one epoch",
                w[0].user, w[0].t, w[0].item
            )));
        }
        let mut tr = EpochTransitions::default();
        for o in observations {
            if o.item == o.positive {
                return Err(Error::Logic(format!(
                    "negative {} equals the positive at ({}, {})",
                    o.item, o.user, o.t
                )));
            }
            match self.positives.get(&(o.user, o.t)) {
                Some(&p) if p != o.positive => {
                    return Err(Error::Logic(format!(
                        "context ({}, {}) changed positive from {p} to {}",
                        o.user, o.t, o.positive
                    )));
                }
                Some(_) => {}
                None => {
                    self.positives.insert((o.user, o.t), o.positive);
                }
            }
            let key = (o.user, o.t, o.item);
            let entry = self.entries.entry(key).or_insert(Entry {
                count: 0,
                state: EntryState::Idle,
                external: false,
            });
            if entry.state == EntryState::False {
                continue;
            }
            let ctx = self.contexts.entry((o.user, o.t)).or_default();
            if o.neg_score > o.pos_score {
                entry.count = entry.count.saturating_add(1);
                tr.recorded += 1;
                if entry.count >= self.m {
                    entry.state = EntryState::False;
                    ctx.rec.remove(&o.item);
                    ctx.false_set.insert(o.item);
                    tr.newly_false.push(key);
                } else {
                    entry.state = EntryState::Rec;
                    ctx.rec.insert(o.item);
                }
            } else {
                if entry.state == EntryState::Rec {
                    tr.dropped += 1;
                }
                entry.state = EntryState::Idle;
                ctx.rec.remove(&o.item);
                if self.count_mode == CountMode::Consecutive {
                    entry.count = 0;
                }
            }
        }
        Ok(tr)
    }

    /// Classifies `(user, t, item)` as a false negative on behalf of an
    /// external miner. `positive` is the context's true positive.
    pub fn admit_false(&mut self, user: usize, t: usize, item: usize, positive: usize) -> Result<bool> {
        if item == positive || item == 0 {
            return Err(Error::Logic(format!(
                "cannot classify {item} as false negative at ({user}, {t})"
            )));
        }
        let entry = self.entries.entry((user, t, item)).or_insert(Entry {
            count: 0,
            state: EntryState::Idle,
            external: true,
        });
        if entry.state == EntryState::False {
            return Ok(false);
        }
        entry.state = EntryState::False;
        entry.external = true;
        self.positives.entry((user, t)).or_insert(positive);
        let ctx = self.contexts.entry((user, t)).or_default();
        ctx.rec.remove(&item);
        ctx.false_set.insert(item);
        Ok(true)
    }

    /// Checks the ledger's structural invariants.
    pub fn check_invariants(&self) -> Result<()> {
        for (&(u, t), ctx) in &self.contexts {
            if let Some(i) = ctx.rec.intersection(&ctx.false_set).next() {
                return Err(Error::Logic(format!("item {i} both recorded and false at ({u}, {t})")));
            }
            let positive = self.positives.get(&(u, t));
            for &i in &ctx.false_set {
                let e = self.entries[&(u, t, i)];
                if e.state != EntryState::False || (!e.external && e.count < self.m) {
                    return Err(Error::Logic(format!("false entry ({u}, {t}, {i}) inconsistent")));
                }
                if positive == Some(&i) {
                    return Err(Error::Logic(format!("positive {i} marked false at ({u}, {t})")));
                }
            }
            for &i in &ctx.rec {
                if self.entries[&(u, t, i)].state != EntryState::Rec {
                    return Err(Error::Logic(format!("rec entry ({u}, {t}, {i}) inconsistent")));
                }
            }
        }
        Ok(())
    }

    /// `user<TAB>t<TAB>item<TAB>count<TAB>state` for every entry currently in
    /// N_rec or N_false, sorted by key.
    pub fn dump(&self) -> String {
        let mut rows: Vec<(LedgerKey, Entry)> = self
            .entries
            .iter()
            .filter(|(_, e)| e.state != EntryState::Idle)
            .map(|(&k, &e)| (k, e))
            .collect();
        rows.sort_unstable_by_key(|(k, _)| *k);
        let mut out = String::new();
        for ((u, t, i), e) in rows {
            let state = if e.state == EntryState::False { "FALSE" } else { "REC" };
            let _ = writeln!(out, "{u}\t{t}\t{i}\t{}\t{state}", e.count);
        }
        out
    }
}

/// Uniform draws from `1..=vocab` skipping `excluded` and anything already in
/// `out`, appended to `out` until it holds `target` items.
pub fn fill_uniform(
    out: &mut Vec<usize>,
    target: usize,
    vocab: usize,
    excluded: impl Fn(usize) -> bool,
    rng: &mut Rng,
) {
    while out.len() < target {
        let i = rng.gen_range(1..=vocab);
        if !excluded(i) && !out.contains(&i) {
            out.push(i);
        }
    }
}

/// `n` negatives for one context: current N_rec members first (at most `n`),
/// then uniform fill. Never returns padding, an excluded item, a false
/// negative of this context, or a duplicate.
pub fn draw_negatives(
    ledger: &RecordLedger,
    user: usize,
    t: usize,
    n: usize,
    vocab: usize,
    exclusions: &HashSet<usize>,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let false_extra = ledger
        .false_negatives(user, t)
        .filter(|i| !exclusions.contains(i))
        .count();
    let excluded_in_vocab = exclusions.iter().filter(|&&i| (1..=vocab).contains(&i)).count();
    if vocab < n + excluded_in_vocab + false_extra {
        return Err(Error::Config(format!(
            "cannot draw {n} negatives from {vocab} items with {} excluded",
            excluded_in_vocab + false_extra
        )));
    }
    let mut out: Vec<usize> = ledger
        .rec_for_draw(user, t, n)
        .into_iter()
        .filter(|i| !exclusions.contains(i))
        .collect();
    fill_uniform(
        &mut out,
        n,
        vocab,
        |i| exclusions.contains(&i) || ledger.is_false(user, t, i),
        rng,
    );
    Ok(out)
}

/// What happens to an item once it is classified as a false negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FnAction {
    /// Train it as a positive (plus consistency, if enabled).
    #[default]
    Reverse,
    /// Drop it from the negative pool only.
    Remove,
    /// Keep training it as a negative (consistency-only ablation).
    Keep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TermKind {
    Positive,
    Negative,
    /// A false negative trained with label 1.
    Reversed,
    /// A false negative still trained with label 0.
    KeptFalse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledTerm {
    pub user: usize,
    pub t: usize,
    pub item: usize,
    pub label: f64,
    pub kind: TermKind,
}

/// Expands an instance into its labelled loss terms: the positive, each
/// negative, and one extra positive term per false negative of the context.
pub fn reverse_labels(ledger: &RecordLedger, inst: &TrainingInstance) -> Vec<LabeledTerm> {
    expand_terms(ledger, inst, FnAction::Reverse)
}

/// Labelled terms for an instance under a given false-negative action.
pub fn expand_terms(ledger: &RecordLedger, inst: &TrainingInstance, action: FnAction) -> Vec<LabeledTerm> {
    let term = |item, label, kind| LabeledTerm {
        user: inst.user,
        t: inst.t,
        item,
        label,
        kind,
    };
    let mut terms = Vec::with_capacity(1 + inst.negatives.len());
    terms.push(term(inst.positive, 1.0, TermKind::Positive));
    terms.extend(inst.negatives.iter().map(|&i| term(i, 0.0, TermKind::Negative)));
    let fns = ledger
        .false_negatives(inst.user, inst.t)
        .filter(|&i| i != inst.positive);
    match action {
        FnAction::Reverse => terms.extend(fns.map(|i| term(i, 1.0, TermKind::Reversed))),
        FnAction::Keep => terms.extend(fns.map(|i| term(i, 0.0, TermKind::KeptFalse))),
        FnAction::Remove => {}
    }
    terms
}

/// Replaces every negative found in `mined` with a fresh uniform draw that
/// avoids `mined`, the positive and `exclusions`. Mined items are never
/// turned into positives.
pub fn removal_filter(
    inst: &TrainingInstance,
    mined: &HashSet<usize>,
    vocab: usize,
    exclusions: &HashSet<usize>,
    rng: &mut Rng,
) -> TrainingInstance {
    if mined.is_empty() || !inst.negatives.iter().any(|i| mined.contains(i)) {
        return inst.clone();
    }
    let target = inst.negatives.len();
    let mut out: Vec<usize> = inst
        .negatives
        .iter()
        .copied()
        .filter(|i| !mined.contains(i))
        .collect();
    fill_uniform(
        &mut out,
        target,
        vocab,
        |i| mined.contains(&i) || i == inst.positive || exclusions.contains(&i),
        rng,
    );
    TrainingInstance {
        negatives: out,
        ..inst.clone()
    }
}

/// Linear-interpolation quantile of an unsorted sample.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn mean_and_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// High-score, low-variance false-negative heuristic (a simplified stand-in
/// for variance-based samplers). A candidate with at least `window` scores is
/// classified when its mean is strictly above the `mean_quantile` of
/// candidate means and its variance strictly below the `var_quantile` of
/// candidate variances. Only the last `window` scores count.
pub fn mine_variance_based(
    history: &BTreeMap<LedgerKey, Vec<f64>>,
    window: usize,
    mean_quantile: f64,
    var_quantile: f64,
) -> BTreeSet<LedgerKey> {
    let stats: Vec<(LedgerKey, f64, f64)> = history
        .iter()
        .filter(|(_, s)| window >= 2 && s.len() >= window)
        .map(|(&k, s)| {
            let (m, v) = mean_and_variance(&s[s.len() - window..]);
            (k, m, v)
        })
        .collect();
    if stats.is_empty() {
        log::warn!("variance miner: no candidate has {window} epochs of history");
        return BTreeSet::new();
    }
    let means: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let vars: Vec<f64> = stats.iter().map(|s| s.2).collect();
    let mean_cut = quantile(&means, mean_quantile);
    let var_cut = quantile(&vars, var_quantile);
    stats
        .into_iter()
        .filter(|&(_, m, v)| m > mean_cut && v < var_cut)
        .map(|(k, _, _)| k)
        .collect()
}

/// Rolling per-key score windows for the variance miner.
#[derive(Clone, Debug, Default)]
pub struct ScoreHistory {
    window: usize,
    memory: usize,
    scores: BTreeMap<LedgerKey, VecDeque<f64>>,
    tracked: HashMap<Context, VecDeque<usize>>,
}

impl ScoreHistory {
    /// `memory` bounds the tracked items per context (oldest evicted first).
    pub fn new(window: usize, memory: usize) -> Self {
        ScoreHistory {
            window,
            memory: memory.max(1),
            ..Default::default()
        }
    }

    pub fn track(&mut self, user: usize, t: usize, item: usize) {
        let slots = self.tracked.entry((user, t)).or_default();
        if slots.contains(&item) {
            return;
        }
        slots.push_back(item);
        if slots.len() > self.memory {
            let evicted = slots.pop_front().expect("non-empty");
            self.scores.remove(&(user, t, evicted));
        }
    }

    pub fn untrack(&mut self, user: usize, t: usize, item: usize) {
        if let Some(slots) = self.tracked.get_mut(&(user, t)) {
            slots.retain(|&i| i != item);
        }
        self.scores.remove(&(user, t, item));
    }

    pub fn tracked(&self, user: usize, t: usize) -> impl Iterator<Item = usize> + '_ {
        self.tracked
            .get(&(user, t))
            .into_iter()
            .flat_map(|s| s.iter().copied())
    }

    pub fn push(&mut self, key: LedgerKey, score: f64) {
        let s = self.scores.entry(key).or_default();
        s.push_back(score);
        while s.len() > self.window {
            s.pop_front();
        }
    }

    pub fn snapshot(&self) -> BTreeMap<LedgerKey, Vec<f64>> {
        self.scores
            .iter()
            .map(|(&k, v)| (k, v.iter().copied().collect()))
            .collect()
    }
}
