//! Leave-one-out ranking evaluation over sampled candidate sets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataio::{
    sample_eval_candidates_with, EvalCandidateSet, EvalNegMode, InteractionDataset, SplitDataset,
    Stage,
};
use crate::encoder::{encode_last, EncoderConfig, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::dot;

pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// 1-based rank of the positive; negatives tied with it rank above it.
pub fn rank_of_positive(pos_score: f64, neg_scores: &[f64]) -> usize {
    1 + neg_scores.iter().filter(|&&s| s >= pos_score).count()
}

/// Scores `cands` after `prefix` and returns the positive's rank.
pub fn rank_candidates(
    params: &ModelParams,
    cfg: &EncoderConfig,
    prefix: &[usize],
    cands: &EvalCandidateSet,
) -> Result<usize> {
    let rep = encode_last(params, cfg, &[prefix])?;
    let pos = params.score(rep.row(0), cands.positive)?;
    let negs = cands
        .negatives
        .iter()
        .map(|&i| params.score(rep.row(0), i))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_of_positive(pos, &negs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub per_user_rank: BTreeMap<usize, usize>,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
}

impl RankingReport {
    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    /// Overall table followed by the per-user rank dump.
    pub fn to_text(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        for (k, v) in &self.hr {
            let _ = writeln!(out, "HR@{k}\t{v:.6}");
        }
        for (k, v) in &self.ndcg {
            let _ = writeln!(out, "NDCG@{k}\t{v:.6}");
        }
        out.push_str("\nuser\trank\n");
        for (u, r) in &self.per_user_rank {
            let _ = writeln!(out, "{u}\t{r}");
        }
        out
    }
}

/// Per-user NDCG@k term with one relevant item.
pub fn ndcg_term(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn compute_metrics(per_user_rank: BTreeMap<usize, usize>, ks: &[usize]) -> Result<RankingReport> {
    if per_user_rank.is_empty() {
        return Err(Error::Logic("no ranks to aggregate".into()));
    }
    let n = per_user_rank.len() as f64;
    let mut hr = BTreeMap::new();
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        let hits = per_user_rank.values().filter(|&&r| r <= k).count();
        hr.insert(k, hits as f64 / n);
        ndcg.insert(k, per_user_rank.values().map(|&r| ndcg_term(r, k)).sum::<f64>() / n);
    }
    Ok(RankingReport {
        per_user_rank,
        hr,
        ndcg,
    })
}

/// Fixed candidate sets for one stage, drawn once per run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSuite {
    pub stage: Stage,
    pub prefixes: Vec<Vec<usize>>,
    pub candidates: Vec<EvalCandidateSet>,
}

impl EvalSuite {
    /// `extra_excluded(user)` lists items kept out of that user's negatives
    /// on top of `mode`'s exclusions.
    pub fn build(
        ds: &InteractionDataset,
        split: &SplitDataset,
        stage: Stage,
        seed: u64,
        mode: EvalNegMode,
        extra_excluded: &dyn Fn(usize) -> Vec<usize>,
    ) -> Result<Self> {
        let mut prefixes = Vec::with_capacity(ds.user_count);
        let mut candidates = Vec::with_capacity(ds.user_count);
        for u in 0..ds.user_count {
            prefixes.push(split.prefix(u, stage));
            candidates.push(sample_eval_candidates_with(
                ds,
                split,
                u,
                stage,
                seed,
                mode,
                &extra_excluded(u),
            )?);
        }
        Ok(EvalSuite {
            stage,
            prefixes,
            candidates,
        })
    }

    /// FNV-1a hash of every candidate set, for checking that two runs were
    /// ranked against the same negatives.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: usize| {
            for b in (x as u64).to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for c in &self.candidates {
            feed(c.user);
            feed(c.positive);
            feed(c.negatives.len());
            c.negatives.iter().for_each(|&i| feed(i));
        }
        h
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn ranks(&self, params: &ModelParams, cfg: &EncoderConfig) -> Result<BTreeMap<usize, usize>> {
        const CHUNK: usize = 256;
        let mut ranks = BTreeMap::new();
        for (chunk_idx, prefixes) in self.prefixes.chunks(CHUNK).enumerate() {
            let reps = encode_last(params, cfg, prefixes)?;
            let table = params.output_embeddings();
            for (b, c) in self.candidates[chunk_idx * CHUNK..][..prefixes.len()].iter().enumerate() {
                let rep = reps.row(b);
                let pos = dot(rep, table.row(c.positive));
                let negs: Vec<f64> = c.negatives.iter().map(|&i| dot(rep, table.row(i))).collect();
                ranks.insert(c.user, rank_of_positive(pos, &negs));
            }
        }
        Ok(ranks)
    }

    pub fn evaluate(&self, params: &ModelParams, cfg: &EncoderConfig) -> Result<RankingReport> {
        compute_metrics(self.ranks(params, cfg)?, &DEFAULT_KS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    /// Pairs where the first run ranks the positive strictly better.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    pub p_value: f64,
}

fn ln_choose(n: usize, k: usize) -> f64 {
    let lg = |x: usize| (1..=x).map(|i| (i as f64).ln()).sum::<f64>();
    lg(n) - lg(k) - lg(n - k)
}

/// Exact two-sided sign test; ties are dropped.
pub fn sign_test(wins: usize, losses: usize, ties: usize) -> SignTest {
    let n = wins + losses;
    let k = wins.min(losses);
    let p_value = if n == 0 {
        1.0
    } else {
        let tail: f64 = (0..=k)
            .map(|i| (ln_choose(n, i) - n as f64 * std::f64::consts::LN_2).exp())
            .sum();
        (2.0 * tail).min(1.0)
    };
    SignTest {
        wins,
        losses,
        ties,
        p_value,
    }
}

/// Paired comparison of two rank lists over the same candidate sets.
/// Lower rank wins.
pub fn paired_rank_test(a: &[usize], b: &[usize]) -> Result<SignTest> {
    if a.len() != b.len() {
        return Err(Error::Logic("paired comparison over different user sets".into()));
    }
    let (mut w, mut l, mut t) = (0, 0, 0);
    for (&x, &y) in a.iter().zip(b) {
        match x.cmp(&y) {
            std::cmp::Ordering::Less => w += 1,
            std::cmp::Ordering::Greater => l += 1,
            std::cmp::Ordering::Equal => t += 1,
        }
    }
    Ok(sign_test(w, l, t))
}
