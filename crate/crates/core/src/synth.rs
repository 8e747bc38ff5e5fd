//! Synthetic corpora with known latent preferences and planted false
//! negatives.
//!
//! Each user samples a set of items without replacement from a
//! temperature-scaled softmax over latent affinities (Gumbel top-k). The
//! highest-affinity `plant_rate` share of that set is withheld from the log;
//! those items are the ground-truth false negatives.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::InteractionDataset;
use crate::error::{Error, Result};
use crate::negatives::LedgerKey;
use crate::tensor::{dot, Matrix};
use crate::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub latent_dim: usize,
    /// Inclusive range of interactions per user before withholding.
    pub seq_len_range: (usize, usize),
    pub plant_rate: f64,
    pub noise_temp: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2000,
            n_items: 1000,
            latent_dim: 16,
            seq_len_range: (10, 25),
            plant_rate: 0.2,
            noise_temp: 0.25,
            seed: 7,
        }
    }
}

impl SynthConfig {
    fn planted_count(&self, total: usize) -> usize {
        (self.plant_rate * total as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.seq_len_range;
        if lo < 3 || hi < lo {
            return Err(Error::Config(format!("seq_len_range ({lo}, {hi}) infeasible")));
        }
        if !(0.0..=1.0).contains(&self.plant_rate) {
            return Err(Error::Config("plant_rate must lie in [0, 1]".into()));
        }
        if lo - self.planted_count(lo) < 3 {
            return Err(Error::Config(format!(
                "plant_rate {} leaves fewer than 3 visible items at length {lo}",
                self.plant_rate
            )));
        }
        if self.n_items < 200 {
            return Err(Error::Config(format!("n_items {} below 200", self.n_items)));
        }
        if hi > self.n_items {
            return Err(Error::Config("sequences longer than the vocabulary".into()));
        }
        if self.noise_temp <= 0.0 || self.latent_dim == 0 || self.n_users == 0 {
            return Err(Error::Config("noise_temp, latent_dim and n_users must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub dataset: InteractionDataset,
    pub planted: Vec<BTreeSet<usize>>,
    pub user_factors: Matrix,
    /// Row `i - 1` holds item `i`.
    pub item_factors: Matrix,
}

impl SynthCorpus {
    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        dot(self.user_factors.row(user), self.item_factors.row(item - 1))
            / (self.user_factors.cols() as f64).sqrt()
    }

    pub fn planted_total(&self) -> usize {
        self.planted.iter().map(BTreeSet::len).sum()
    }

    /// `user<TAB>item`, one line per planted pair.
    pub fn planted_tsv(&self) -> String {
        let mut out = String::new();
        for (u, items) in self.planted.iter().enumerate() {
            for i in items {
                let _ = writeln!(out, "{u}\t{i}");
            }
        }
        out
    }

    /// Writes `dataset.txt` (canonical format) and `planted.tsv` into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ds = dir.join("dataset.txt");
        fs::write(&ds, self.dataset.to_canonical()).map_err(|e| Error::io(&ds, e))?;
        let pl = dir.join("planted.tsv");
        fs::write(&pl, self.planted_tsv()).map_err(|e| Error::io(&pl, e))
    }

    /// Checks that planted items are disjoint from the visible log and at
    /// least as attractive as the user's median interacted item.
    pub fn audit(&self) -> Result<()> {
        for (u, planted) in self.planted.iter().enumerate() {
            let seq = &self.dataset.sequences[u];
            if let Some(i) = seq.iter().find(|i| planted.contains(i)) {
                return Err(Error::Logic(format!("planted item {i} visible for user {u}")));
            }
            if planted.is_empty() {
                continue;
            }
            let mut aff: Vec<f64> = seq
                .iter()
                .chain(planted.iter())
                .map(|&i| self.affinity(u, i))
                .collect();
            aff.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let n = aff.len();
            let median = if n % 2 == 1 {
                aff[n / 2]
            } else {
                0.5 * (aff[n / 2 - 1] + aff[n / 2])
            };
            if let Some(&i) = planted.iter().find(|&&i| self.affinity(u, i) < median) {
                return Err(Error::Logic(format!("planted item {i} of user {u} below median affinity")));
            }
        }
        Ok(())
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let user_factors = normal_matrix(cfg.n_users, cfg.latent_dim, &mut rng);
    let item_factors = normal_matrix(cfg.n_items, cfg.latent_dim, &mut rng);
    let scale = (cfg.latent_dim as f64).sqrt();
    let mut sequences = Vec::with_capacity(cfg.n_users);
    let mut planted = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let total = rng.gen_range(cfg.seq_len_range.0..=cfg.seq_len_range.1);
        let urow = user_factors.row(u);
        let mut keyed: Vec<(f64, f64, usize)> = (1..=cfg.n_items)
            .map(|i| {
                let a = dot(urow, item_factors.row(i - 1)) / scale;
                let g: f64 = -(-rng.gen::<f64>().max(f64::MIN_POSITIVE).ln()).ln();
                (a / cfg.noise_temp + g, a, i)
            })
            .collect();
        keyed.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite keys").then(x.2.cmp(&y.2)));
        let mut chosen: Vec<(f64, usize)> = keyed[..total].iter().map(|&(_, a, i)| (a, i)).collect();
        chosen.sort_by(|x, y| y.0.partial_cmp(&x.0).expect("finite").then(x.1.cmp(&y.1)));
        let n_plant = cfg.planted_count(total);
        planted.push(chosen[..n_plant].iter().map(|&(_, i)| i).collect::<BTreeSet<_>>());
        let mut visible: Vec<(f64, usize)> = chosen[n_plant..]
            .iter()
            .map(|&(_, i)| (rng.gen::<f64>(), i))
            .collect();
        visible.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite"));
        sequences.push(visible.into_iter().map(|(_, i)| i).collect());
    }
    Ok(SynthCorpus {
        dataset: InteractionDataset::from_sequences(cfg.n_items, sequences)?,
        planted,
        user_factors,
        item_factors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningScore {
    /// Distinct mined `(user, item)` pairs.
    pub mined: usize,
    pub hits: usize,
    pub precision: Option<f64>,
    pub recall: f64,
    /// Expected precision of mining the same number of items per user
    /// uniformly from the vocabulary.
    pub random_precision: f64,
}

impl MiningScore {
    pub fn lift(&self) -> Option<f64> {
        self.precision
            .filter(|_| self.random_precision > 0.0)
            .map(|p| p / self.random_precision)
    }
}

/// Scores mined `(user, t, item)` triples against the planted sets. Items
/// mined at several steps of one user count once.
pub fn score_mining(corpus: &SynthCorpus, mined: &[LedgerKey]) -> MiningScore {
    let pairs: BTreeSet<(usize, usize)> = mined.iter().map(|&(u, _, i)| (u, i)).collect();
    let vocab = corpus.dataset.item_count as f64;
    let hits = pairs
        .iter()
        .filter(|(u, i)| corpus.planted[*u].contains(i))
        .count();
    let random_precision = if pairs.is_empty() {
        corpus.planted_total() as f64 / (corpus.planted.len() as f64 * vocab)
    } else {
        pairs
            .iter()
            .map(|&(u, _)| corpus.planted[u].len() as f64 / vocab)
            .sum::<f64>()
            / pairs.len() as f64
    };
    let total = corpus.planted_total();
    MiningScore {
        mined: pairs.len(),
        hits,
        precision: (!pairs.is_empty()).then(|| hits as f64 / pairs.len() as f64),
        recall: if total == 0 { 0.0 } else { hits as f64 / total as f64 },
        random_precision,
    }
}
