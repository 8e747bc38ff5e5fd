//! Interaction ingestion, dense id mapping, leave-one-out splits and
//! evaluation candidate sampling.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

/// Number of sampled negatives per evaluation candidate set.
pub const EVAL_NEGATIVES: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputFormat {
    Csv,
    Tsv,
    AmazonRatings,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Column {
    Index(usize),
    Name(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub format: InputFormat,
    pub has_header: bool,
    pub user: Column,
    pub item: Column,
    pub timestamp: Column,
}

impl LoadOptions {
    /// Headerless `user,item,timestamp` (or tab-separated) rows.
    pub fn positional(format: InputFormat) -> Self {
        let time_col = if format == InputFormat::AmazonRatings { 3 } else { 2 };
        LoadOptions {
            format,
            has_header: false,
            user: Column::Index(0),
            item: Column::Index(1),
            timestamp: Column::Index(time_col),
        }
    }

    /// Rows with a header line, columns picked by name.
    pub fn named(format: InputFormat, user: &str, item: &str, timestamp: &str) -> Self {
        LoadOptions {
            format,
            has_header: true,
            user: Column::Name(user.into()),
            item: Column::Name(item.into()),
            timestamp: Column::Name(timestamp.into()),
        }
    }

    fn delimiter(&self) -> u8 {
        match self.format {
            InputFormat::Tsv => b'\t',
            InputFormat::Csv | InputFormat::AmazonRatings => b',',
        }
    }
}

#[derive(Clone, Debug)]
pub struct Loaded {
    pub interactions: Vec<Interaction>,
    pub malformed_rows: usize,
}

pub fn load_interactions(path: &Path, opts: &LoadOptions) -> Result<Loaded> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_interactions(file, opts, &path.display().to_string())
}

pub fn read_interactions<R: Read>(reader: R, opts: &LoadOptions, origin: &str) -> Result<Loaded> {
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter())
        .has_headers(opts.has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let resolve = |col: &Column, headers: Option<&csv::StringRecord>| -> Result<usize> {
        match col {
            Column::Index(i) => Ok(*i),
            Column::Name(name) => headers
                .and_then(|h| h.iter().position(|f| f == name))
                .ok_or_else(|| Error::Config(format!("column {name:?} not found in header"))),
        }
    };
    let headers = if opts.has_header {
        Some(
            rdr.headers()
                .map_err(|e| Error::Format(format!("{origin}: {e}")))?
                .clone(),
        )
    } else {
        None
    };
    let cols = (
        resolve(&opts.user, headers.as_ref())?,
        resolve(&opts.item, headers.as_ref())?,
        resolve(&opts.timestamp, headers.as_ref())?,
    );

    let mut interactions = Vec::new();
    let mut malformed = 0usize;
    for record in rdr.records() {
        let parsed = record.ok().and_then(|r| {
            let user = r.get(cols.0).filter(|s| !s.is_empty())?;
            let item = r.get(cols.1).filter(|s| !s.is_empty())?;
            let ts = parse_timestamp(r.get(cols.2)?)?;
            Some(Interaction {
                user_id: user.to_string(),
                item_id: item.to_string(),
                timestamp: ts,
            })
        });
        match parsed {
            Some(i) => interactions.push(i),
            None => malformed += 1,
        }
    }
    let total = interactions.len() + malformed;
    if interactions.is_empty() {
        return Err(Error::NoInteractions(origin.to_string()));
    }
    if malformed * 100 > total {
        return Err(Error::TooManyMalformed { malformed, total });
    }
    if malformed > 0 {
        log::warn!("{origin}: skipped {malformed} malformed rows of {total}");
    }
    Ok(Loaded {
        interactions,
        malformed_rows: malformed,
    })
}

fn parse_timestamp(s: &str) -> Option<i64> {
    s.parse::<i64>().ok().or_else(|| {
        let f = s.parse::<f64>().ok()?;
        f.is_finite().then_some(f as i64)
    })
}

/// Per-user item sequences over dense ids. Users are indexed `0..user_count`,
/// items `1..=item_count` with `0` reserved for padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionDataset {
    pub user_count: usize,
    pub item_count: usize,
    pub sequences: Vec<Vec<usize>>,
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
}

impl InteractionDataset {
    /// Builds a dataset directly from dense sequences (keys are the indices).
    pub fn from_sequences(item_count: usize, sequences: Vec<Vec<usize>>) -> Result<Self> {
        for s in &sequences {
            if let Some(&bad) = s.iter().find(|&&i| i == 0 || i > item_count) {
                return Err(Error::OutOfVocabulary {
                    index: bad,
                    item_count,
                });
            }
        }
        Ok(InteractionDataset {
            user_count: sequences.len(),
            item_count,
            user_keys: (0..sequences.len()).map(|u| u.to_string()).collect(),
            item_keys: (1..=item_count).map(|i| i.to_string()).collect(),
            sequences,
        })
    }

    pub fn action_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Canonical line format: `#version 1`, `#users N`, `#items M`, then one
    /// `user<TAB>items` line per user.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        out.push_str("#version 1\n");
        let _ = writeln!(out, "#users {}", self.user_count);
        let _ = writeln!(out, "#items {}", self.item_count);
        for (u, seq) in self.sequences.iter().enumerate() {
            let _ = write!(out, "{u}\t");
            for (k, item) in seq.iter().enumerate() {
                if k > 0 {
                    out.push(' ');
                }
                let _ = write!(out, "{item}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_canonical<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(self.to_canonical().as_bytes())?;
        Ok(())
    }

    pub fn read_canonical<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::Format(format!("missing {key} header")))??;
            line.strip_prefix(key)
                .map(|s| s.trim().to_string())
                .ok_or_else(|| Error::Format(format!("expected {key}, found {line:?}")))
        };
        let version = header("#version")?;
        if version != "1" {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let parse = |s: String, what: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad {what} count {s:?}")))
        };
        let user_count = parse(header("#users")?, "user")?;
        let item_count = parse(header("#items")?, "item")?;
        let mut sequences = Vec::with_capacity(user_count);
        for (expected, line) in lines.enumerate() {
            let line = line?;
            let (user, items) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("line without tab: {line:?}")))?;
            if user.parse::<usize>().ok() != Some(expected) {
                return Err(Error::Format(format!("expected user {expected}, found {user:?}")));
            }
            let seq = items
                .split(' ')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Format(format!("bad item {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            sequences.push(seq);
        }
        if sequences.len() != user_count {
            return Err(Error::Format(format!(
                "header declares {user_count} users, found {}",
                sequences.len()
            )));
        }
        InteractionDataset::from_sequences(item_count, sequences)
    }
}

/// Groups interactions per user (stable by timestamp), filters short users
/// and, if `k_core > 0`, iterates user/item filtering to a fixed point.
/// Dense ids follow sorted external keys.
pub fn build_dataset(
    interactions: &[Interaction],
    min_seq_len: usize,
    k_core: usize,
) -> Result<InteractionDataset> {
    if min_seq_len < 3 {
        return Err(Error::Config("min_seq_len must be at least 3".into()));
    }
    let mut by_user: BTreeMap<&str, Vec<(i64, &str)>> = BTreeMap::new();
    for it in interactions {
        by_user
            .entry(it.user_id.as_str())
            .or_default()
            .push((it.timestamp, it.item_id.as_str()));
    }
    for seq in by_user.values_mut() {
        seq.sort_by_key(|&(ts, _)| ts);
    }

    let user_min = min_seq_len.max(k_core);
    loop {
        let before: usize = by_user.values().map(Vec::len).sum();
        by_user.retain(|_, s| s.len() >= user_min);
        if k_core > 0 {
            let mut item_counts: HashMap<&str, usize> = HashMap::new();
            for s in by_user.values() {
                for &(_, item) in s {
                    *item_counts.entry(item).or_default() += 1;
                }
            }
            for s in by_user.values_mut() {
                s.retain(|&(_, item)| item_counts[item] >= k_core);
            }
            by_user.retain(|_, s| s.len() >= user_min);
        }
        let after: usize = by_user.values().map(Vec::len).sum();
        if after == before || k_core == 0 {
            break;
        }
    }
    if by_user.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let item_keys: Vec<String> = by_user
        .values()
        .flat_map(|s| s.iter().map(|&(_, i)| i))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(str::to_string)
        .collect();
    let item_index: HashMap<&str, usize> = item_keys
        .iter()
        .enumerate()
        .map(|(k, key)| (key.as_str(), k + 1))
        .collect();
    let user_keys: Vec<String> = by_user.keys().map(|k| k.to_string()).collect();
    let sequences = by_user
        .values()
        .map(|s| s.iter().map(|&(_, i)| item_index[i]).collect())
        .collect();
    Ok(InteractionDataset {
        user_count: user_keys.len(),
        item_count: item_keys.len(),
        sequences,
        user_keys,
        item_keys,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitDataset {
    pub train: Vec<Vec<usize>>,
    pub valid_target: Vec<usize>,
    pub test_target: Vec<usize>,
}

impl SplitDataset {
    pub fn user_count(&self) -> usize {
        self.train.len()
    }

    /// Input sequence preceding the target of `stage`.
    pub fn prefix(&self, user: usize, stage: Stage) -> Vec<usize> {
        match stage {
            Stage::Valid => self.train[user].clone(),
            Stage::Test => {
                let mut s = self.train[user].clone();
                s.push(self.valid_target[user]);
                s
            }
        }
    }

    pub fn target(&self, user: usize, stage: Stage) -> usize {
        match stage {
            Stage::Valid => self.valid_target[user],
            Stage::Test => self.test_target[user],
        }
    }
}

/// Last item to test, second to last to validation, the rest to training.
pub fn split_leave_one_out(ds: &InteractionDataset) -> SplitDataset {
    let mut split = SplitDataset {
        train: Vec::with_capacity(ds.user_count),
        valid_target: Vec::with_capacity(ds.user_count),
        test_target: Vec::with_capacity(ds.user_count),
    };
    for seq in &ds.sequences {
        assert!(seq.len() >= 3, "sequences shorter than 3 must be filtered upstream");
        let n = seq.len();
        split.train.push(seq[..n - 2].to_vec());
        split.valid_target.push(seq[n - 2]);
        split.test_target.push(seq[n - 1]);
    }
    split
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Valid,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EvalNegMode {
    #[default]
    ExcludeHistory,
    ExcludePositiveOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalCandidateSet {
    pub user: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

fn candidate_seed(seed: u64, user: usize, stage: Stage) -> u64 {
    let stage_tag = match stage {
        Stage::Valid => 0x5641_4c49_44u64,
        Stage::Test => 0x5445_5354u64,
    };
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (user as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ stage_tag
}

/// Draws `EVAL_NEGATIVES` distinct items uniformly from `1..=item_count`
/// minus `excluded` (which must contain the positive).
pub fn sample_excluding(
    item_count: usize,
    excluded: &HashSet<usize>,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let available = (1..=item_count).filter(|i| !excluded.contains(i)).count();
    if available < EVAL_NEGATIVES {
        return Err(Error::Config(format!(
            "only {available} items available for {EVAL_NEGATIVES} evaluation negatives"
        )));
    }
    let mut chosen = Vec::with_capacity(EVAL_NEGATIVES);
    let mut seen = HashSet::with_capacity(EVAL_NEGATIVES);
    while chosen.len() < EVAL_NEGATIVES {
        let i = rng.gen_range(1..=item_count);
        if !excluded.contains(&i) && seen.insert(i) {
            chosen.push(i);
        }
    }
    Ok(chosen)
}

/// Candidate set for one user at one stage. Deterministic in `rng_seed`.
pub fn sample_eval_candidates(
    ds: &InteractionDataset,
    split: &SplitDataset,
    user: usize,
    stage: Stage,
    rng_seed: u64,
    mode: EvalNegMode,
) -> Result<EvalCandidateSet> {
    sample_eval_candidates_with(ds, split, user, stage, rng_seed, mode, &[])
}

/// As [`sample_eval_candidates`], additionally keeping `extra_excluded`
/// items out of the negatives.
pub fn sample_eval_candidates_with(
    ds: &InteractionDataset,
    split: &SplitDataset,
    user: usize,
    stage: Stage,
    rng_seed: u64,
    mode: EvalNegMode,
    extra_excluded: &[usize],
) -> Result<EvalCandidateSet> {
    if ds.item_count < EVAL_NEGATIVES + 1 {
        return Err(Error::Config(format!(
            "evaluation needs at least {} items, dataset has {}",
            EVAL_NEGATIVES + 1,
            ds.item_count
        )));
    }
    let positive = split.target(user, stage);
    let mut excluded: HashSet<usize> = match mode {
        EvalNegMode::ExcludeHistory => ds.sequences[user].iter().copied().collect(),
        EvalNegMode::ExcludePositiveOnly => HashSet::new(),
    };
    excluded.insert(positive);
    excluded.extend(extra_excluded.iter().copied());
    let mut rng = Rng::seed_from_u64(candidate_seed(rng_seed, user, stage));
    let negatives = sample_excluding(ds.item_count, &excluded, &mut rng)?;
    Ok(EvalCandidateSet {
        user,
        positive,
        negatives,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Rng;
    use proptest::prelude::*;

    fn inter(u: &str, i: &str, t: i64) -> Interaction {
        Interaction {
            user_id: u.into(),
            item_id: i.into(),
            timestamp: t,
        }
    }

    #[test]
    fn parses_three_row_csv() {
        let data = "u1,i1,10\nu1,i2,20\nu2,i1,5\n";
        let loaded =
            read_interactions(data.as_bytes(), &LoadOptions::positional(InputFormat::Csv), "mem")
                .unwrap();
        assert_eq!(loaded.interactions.len(), 3);
        assert_eq!(loaded.interactions[2], inter("u2", "i1", 5));
        assert_eq!(loaded.malformed_rows, 0);
    }

    #[test]
    fn empty_input_is_an_error() {
        let err = read_interactions("".as_bytes(), &LoadOptions::positional(InputFormat::Csv), "x")
            .unwrap_err();
        assert!(err.to_string().contains("no interactions"));
    }

    #[test]
    fn malformed_rows_counted_and_limited() {
        let mut data = String::new();
        for k in 0..200 {
            let _ = writeln!(data, "u{k},i{k},{k}");
        }
        data.push_str("broken,row\n");
        let ok = read_interactions(data.as_bytes(), &LoadOptions::positional(InputFormat::Csv), "x")
            .unwrap();
        assert_eq!(ok.malformed_rows, 1);
        data.push_str("u,i,notatime\nu,i,\n");
        let err = read_interactions(data.as_bytes(), &LoadOptions::positional(InputFormat::Csv), "x")
            .unwrap_err();
        assert!(matches!(err, Error::TooManyMalformed { malformed: 3, total: 203 }));
    }

    #[test]
    fn amazon_ratings_and_named_columns() {
        let data = "A1,B9,5.0,1388534400\nA1,B3,4.0,1388534401\n";
        let loaded = read_interactions(
            data.as_bytes(),
            &LoadOptions::positional(InputFormat::AmazonRatings),
            "x",
        )
        .unwrap();
        assert_eq!(loaded.interactions[1], inter("A1", "B3", 1388534401));

        let tsv = "ts\tuid\tiid\n3\tu\ta\n1\tu\tb\n";
        let loaded = read_interactions(
            tsv.as_bytes(),
            &LoadOptions::named(InputFormat::Tsv, "uid", "iid", "ts"),
            "x",
        )
        .unwrap();
        assert_eq!(loaded.interactions[0], inter("u", "a", 3));
    }

    #[test]
    fn build_filters_and_orders() {
        let err = build_dataset(&[inter("u", "a", 1), inter("u", "b", 2)], 3, 0).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));

        let mut rows = Vec::new();
        for (u, base) in [("u2", 0), ("u1", 5)] {
            for k in 0..5 {
                rows.push(inter(u, &format!("i{}", base + k), 10 - k as i64));
            }
        }
        let ds = build_dataset(&rows, 3, 0).unwrap();
        assert_eq!(ds.user_count, 2);
        assert!(ds.item_count <= 10);
        assert_eq!(ds.user_keys, vec!["u1", "u2"]);
        // timestamps descend in input order, so each sequence is reversed
        assert_eq!(ds.item_keys[ds.sequences[1][0] - 1], "i4");
    }

    #[test]
    fn timestamp_ties_keep_file_order() {
        let rows = vec![inter("u", "z", 1), inter("u", "a", 1), inter("u", "m", 0)];
        let ds = build_dataset(&rows, 3, 0).unwrap();
        let keys: Vec<&str> = ds.sequences[0]
            .iter()
            .map(|&i| ds.item_keys[i - 1].as_str())
            .collect();
        assert_eq!(keys, vec!["m", "z", "a"]);
    }

    #[test]
    fn k_core_reaches_fixed_point() {
        // long-tail corpus: item popularity ~ 1/rank, user lengths vary
        let mut rng = Rng::seed_from_u64(11);
        let mut rows = Vec::new();
        for u in 0..300 {
            let len = rng.gen_range(3..25);
            for t in 0..len {
                let r: f64 = rng.gen();
                let item = ((1.0 / (r + 0.004)) as usize).min(400);
                rows.push(inter(&format!("u{u}"), &format!("i{item}"), t));
            }
        }
        let ds = build_dataset(&rows, 3, 5).unwrap();
        let mut item_counts = vec![0usize; ds.item_count + 1];
        for s in &ds.sequences {
            assert!(s.len() >= 5);
            for &i in s {
                item_counts[i] += 1;
            }
        }
        assert!(item_counts[1..].iter().all(|&c| c >= 5));
    }

    #[test]
    fn leave_one_out_examples() {
        let ds = InteractionDataset::from_sequences(9, vec![vec![1, 2, 3, 4, 5], vec![7, 9, 7]])
            .unwrap();
        let split = split_leave_one_out(&ds);
        assert_eq!(split.train[0], vec![1, 2, 3]);
        assert_eq!((split.valid_target[0], split.test_target[0]), (4, 5));
        assert_eq!(split.train[1], vec![7]);
        assert_eq!((split.valid_target[1], split.test_target[1]), (9, 7));
        assert_eq!(split.prefix(0, Stage::Test), vec![1, 2, 3, 4]);
    }

    #[test]
    fn forced_candidate_set() {
        let ds = InteractionDataset::from_sequences(101, vec![vec![5, 5, 5]]).unwrap();
        let split = split_leave_one_out(&ds);
        let c = sample_eval_candidates(&ds, &split, 0, Stage::Test, 3, EvalNegMode::ExcludeHistory)
            .unwrap();
        let mut negs = c.negatives.clone();
        negs.sort_unstable();
        let expect: Vec<usize> = (1..=101).filter(|&i| i != 5).collect();
        assert_eq!(negs, expect);

        let again =
            sample_eval_candidates(&ds, &split, 0, Stage::Test, 3, EvalNegMode::ExcludeHistory)
                .unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn small_vocabulary_rejected() {
        let ds = InteractionDataset::from_sequences(100, vec![vec![1, 2, 3]]).unwrap();
        let split = split_leave_one_out(&ds);
        let err = sample_eval_candidates(&ds, &split, 0, Stage::Valid, 1, EvalNegMode::default())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn candidate_inclusion_is_uniform() {
        let ds = InteractionDataset::from_sequences(1000, vec![vec![10, 20, 30, 40, 50]]).unwrap();
        let split = split_leave_one_out(&ds);
        let draws = 10_000;
        let mut counts = vec![0usize; 1001];
        for seed in 0..draws {
            let c = sample_eval_candidates(&ds, &split, 0, Stage::Test, seed, EvalNegMode::default())
                .unwrap();
            assert!(!c.negatives.contains(&c.positive));
            let unique: HashSet<_> = c.negatives.iter().collect();
            assert_eq!(unique.len(), EVAL_NEGATIVES);
            for i in c.negatives {
                counts[i] += 1;
            }
        }
        let eligible: Vec<usize> = (1..=1000).filter(|i| i % 10 != 0 || *i > 50).collect();
        assert_eq!(eligible.len(), 995);
        for i in [10, 20, 30, 40, 50] {
            assert_eq!(counts[i], 0);
        }
        let p = EVAL_NEGATIVES as f64 / 995.0;
        let expected = draws as f64 * p;
        let var = expected * (1.0 - p);
        let chi2: f64 = eligible
            .iter()
            .map(|&i| (counts[i] as f64 - expected).powi(2) / var)
            .sum();
        let dof = (eligible.len() - 1) as f64;
        assert!(chi2 < dof + 3.0 * (2.0 * dof).sqrt(), "chi2 {chi2}");
    }

    fn arb_dataset() -> impl Strategy<Value = InteractionDataset> {
        (1usize..40).prop_flat_map(|items| {
            prop::collection::vec(prop::collection::vec(1..=items, 3..12), 1..15)
                .prop_map(move |seqs| InteractionDataset::from_sequences(items, seqs).unwrap())
        })
    }

    proptest! {
        #[test]
        fn canonical_round_trip(ds in arb_dataset()) {
            let text = ds.to_canonical();
            let back = InteractionDataset::read_canonical(text.as_bytes()).unwrap();
            prop_assert_eq!(&back, &ds);
            prop_assert_eq!(back.to_canonical(), text);
        }

        #[test]
        fn split_reassembles(ds in arb_dataset()) {
            let split = split_leave_one_out(&ds);
            for (u, seq) in ds.sequences.iter().enumerate() {
                let mut joined = split.train[u].clone();
                joined.push(split.valid_target[u]);
                joined.push(split.test_target[u]);
                prop_assert_eq!(&joined, seq);
                prop_assert_eq!(split.test_target[u], *seq.last().unwrap());
            }
        }

        #[test]
        fn dense_ids_are_a_bijection(rows in prop::collection::vec((0u8..6, 0u8..20, 0i64..50), 3..80)) {
            let inters: Vec<Interaction> = rows
                .iter()
                .map(|&(u, i, t)| inter(&format!("u{u}"), &format!("i{i}"), t))
                .collect();
            if let Ok(ds) = build_dataset(&inters, 3, 0) {
                let used: BTreeSet<usize> = ds.sequences.iter().flatten().copied().collect();
                prop_assert_eq!(used, (1..=ds.item_count).collect::<BTreeSet<_>>());
                let mut sorted = ds.item_keys.clone();
                sorted.sort();
                sorted.dedup();
                prop_assert_eq!(sorted, ds.item_keys.clone());
            }
        }
    }
}
