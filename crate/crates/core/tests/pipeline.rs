mod common;

use std::collections::HashSet;

use common::{fast_config, param_bits, small_synth, split};
use ufnrec::checkpoint::{Checkpoint, TEACHER_PREFIX};
use ufnrec::encoder::EncoderConfig;
use ufnrec::negatives::{FnAction, MiningStrategy};
use ufnrec::trainer::{fit, EpochReport, Phase, RunData, RunFiles, TrainConfig, Trainer, WarmupPolicy};

fn data<'a>(corpus: &'a ufnrec::synth::SynthCorpus, s: &'a ufnrec::dataio::SplitDataset) -> RunData<'a> {
    RunData {
        dataset: &corpus.dataset,
        split: s,
        eval_exclude: None,
    }
}

fn strip_time(mut r: EpochReport) -> EpochReport {
    r.wall_time = 0.0;
    r
}

#[test]
fn gradients_match_finite_differences_mean_pool() {
    let enc = EncoderConfig::mean_pool(6, 5);
    let (worst, n) = common::gradient_check(&enc, 20, 8, 11, 1e-4, 1e-4);
    assert!(n > 100);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn gradients_match_finite_differences_attention() {
    let enc = EncoderConfig {
        d_model: 4,
        n_layers: 1,
        n_heads: 2,
        max_len: 4,
        dropout_rate: 0.0,
        shared_embeddings: false,
        ..EncoderConfig::default()
    };
    // softmax curvature makes the O(h²) truncation error visible at h = 1e-4
    let (worst, _) = common::gradient_check(&enc, 12, 5, 3, 1e-5, 1e-4);
    assert!(worst <= 1e-4, "worst relative error {worst}");
}

#[test]
fn same_seed_same_run() {
    let corpus = small_synth(5);
    let s = split(&corpus);
    let cfg = TrainConfig { max_epochs: 5, ..fast_config() };
    let a = fit(&cfg, data(&corpus, &s), None).unwrap();
    let b = fit(&cfg, data(&corpus, &s), None).unwrap();
    let ha: Vec<_> = a.history.into_iter().map(strip_time).collect();
    let hb: Vec<_> = b.history.into_iter().map(strip_time).collect();
    assert_eq!(ha, hb);
    assert_eq!(param_bits(&a.best.student), param_bits(&b.best.student));
    assert_eq!(a.ledger.unwrap().dump(), b.ledger.unwrap().dump());
    let c = fit(&TrainConfig { seed: 43, ..cfg }, data(&corpus, &s), None).unwrap();
    assert_ne!(param_bits(&c.best.student), param_bits(&a.best.student));
}

#[test]
fn mining_none_alpha_zero_reduces_to_backbone() {
    let corpus = small_synth(6);
    let s = split(&corpus);
    let base = TrainConfig {
        warmup: WarmupPolicy::FixedEpochs { epochs: 0 },
        ..fast_config()
    };
    let plain = TrainConfig { backbone_only: true, ..base.clone() };
    let reduced = TrainConfig {
        mining: MiningStrategy::None,
        alpha: 0.0,
        ..base
    };
    let mut a = Trainer::new(plain, data(&corpus, &s)).unwrap();
    let mut b = Trainer::new(reduced, data(&corpus, &s)).unwrap();
    assert_eq!(b.phase, Phase::Main);
    for _ in 0..5 {
        let ra = a.train_epoch().unwrap();
        let rb = b.train_epoch().unwrap();
        assert_eq!(ra.loss_basic.to_bits(), rb.loss_basic.to_bits());
        assert_eq!(ra.loss_final.to_bits(), rb.loss_final.to_bits());
        assert_eq!((rb.loss_con, rb.n_rec, rb.n_false, rb.reversed_terms), (0.0, 0, 0, 0));
        assert_eq!(param_bits(&a.student), param_bits(&b.student));
    }
}

#[test]
fn false_negatives_appear_soon_after_warmup() {
    let corpus = small_synth(7);
    let s = split(&corpus);
    let cfg = TrainConfig {
        max_epochs: 6,
        early_stop_patience: 100,
        ..fast_config()
    };
    let out = fit(&cfg, data(&corpus, &s), None).unwrap();
    assert_eq!(out.warmup_epochs, 2);
    let last = out.history.last().unwrap();
    assert_eq!(last.epoch, 6);
    assert!(last.n_false > 0, "no false negatives by epoch 6");
    assert!(last.reversed_terms > 0);
    assert!(out.history.windows(2).all(|w| w[1].n_false >= w[0].n_false));
    let ledger = out.ledger.unwrap();
    ledger.check_invariants().unwrap();
    for (u, t, item) in ledger.all_false() {
        assert_ne!(item, s.train[u][t], "true positive mined");
    }
}

#[test]
fn keep_action_never_reverses() {
    let corpus = small_synth(8);
    let s = split(&corpus);
    let cfg = TrainConfig {
        fn_action: FnAction::Keep,
        max_epochs: 6,
        early_stop_patience: 100,
        ..fast_config()
    };
    let out = fit(&cfg, data(&corpus, &s), None).unwrap();
    assert!(out.history.iter().all(|r| r.reversed_terms == 0));
    assert!(out.history.iter().any(|r| r.kept_false_terms > 0 && r.consistency_terms > 0));
    assert!(out.history.iter().any(|r| r.loss_con > 0.0));
}

#[test]
fn remove_action_has_no_consistency_or_reversal() {
    let corpus = small_synth(9);
    let s = split(&corpus);
    let cfg = TrainConfig {
        fn_action: FnAction::Remove,
        max_epochs: 6,
        early_stop_patience: 100,
        ..fast_config()
    };
    let mut t = Trainer::new(cfg, data(&corpus, &s)).unwrap();
    let mut saw_false = false;
    for _ in 0..6 {
        let r = t.train_epoch().unwrap();
        assert_eq!(r.loss_con, 0.0);
        assert_eq!(r.loss_final, r.loss_basic);
        assert_eq!((r.reversed_terms, r.consistency_terms, r.kept_false_terms), (0, 0, 0));
        saw_false |= r.n_false > 0;
    }
    assert!(saw_false);
    assert!(t.teacher.is_none());
}

#[test]
fn variance_miner_runs_both_ways() {
    let corpus = small_synth(10);
    let s = split(&corpus);
    for use_rec in [false, true] {
        let cfg = TrainConfig {
            mining: MiningStrategy::variance_default(use_rec),
            max_epochs: 20,
            early_stop_patience: 100,
            ..fast_config()
        };
        let out = fit(&cfg, data(&corpus, &s), None).unwrap();
        let ledger = out.ledger.unwrap();
        ledger.check_invariants().unwrap();
        assert!(ledger.false_len() > 0, "variance miner (use_rec {use_rec}) mined nothing");
    }
}

#[test]
fn run_files_are_written_and_checkpoint_reloads() {
    let corpus = small_synth(11);
    let s = split(&corpus);
    let dir = tempfile::tempdir().unwrap();
    let files = RunFiles::create(dir.path()).unwrap();
    let cfg = TrainConfig { max_epochs: 4, ..fast_config() };
    let out = fit(&cfg, data(&corpus, &s), Some(&files)).unwrap();

    let text = std::fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert_eq!(TrainConfig::from_toml(&text).unwrap(), cfg);

    let lines: Vec<String> = std::fs::read_to_string(dir.path().join("epochs.jsonl"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert_eq!(lines.len(), out.history.len());
    let first: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(first["schema_version"], 1);
    for key in ["loss_basic", "loss_con", "loss_final", "n_rec", "n_false", "valid_ndcg10", "wall_time"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let ck = Checkpoint::load(&dir.path().join("best.ckpt")).unwrap();
    assert_eq!(param_bits(&ck.student), param_bits(&out.best.student));
    assert_eq!(ck.meta.epoch, out.best_epoch);
    if out.best_epoch > 2 {
        assert!(ck.teacher.is_some());
    }
    let raw = std::fs::read(dir.path().join("best.ckpt")).unwrap();
    let has_prefix = raw.windows(TEACHER_PREFIX.len()).any(|w| w == TEACHER_PREFIX.as_bytes());
    assert_eq!(has_prefix, ck.teacher.is_some());

    let ledger = std::fs::read_to_string(dir.path().join("ledger.tsv")).unwrap();
    let mut seen = HashSet::new();
    for line in ledger.lines() {
        let f: Vec<&str> = line.split('\t').collect();
        assert_eq!(f.len(), 5, "{line}");
        assert!(f[4] == "REC" || f[4] == "FALSE");
        assert!(seen.insert((f[0].to_string(), f[1].to_string(), f[2].to_string())));
    }
    assert!(std::fs::read_to_string(dir.path().join("test_report.txt"))
        .unwrap()
        .contains("NDCG@10\t"));
}
