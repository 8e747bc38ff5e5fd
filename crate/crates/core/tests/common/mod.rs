#![allow(dead_code)]

use rand::{Rng as _, SeedableRng};

use ufnrec::dataio::{split_leave_one_out, SplitDataset};
use ufnrec::encoder::{EncoderConfig, ModelParams, SeqBatch};
use ufnrec::synth::{generate, SynthConfig, SynthCorpus};
use ufnrec::trainer::{loss_and_grad, BatchPlan, PlannedTerm, TrainConfig, WarmupPolicy};
use ufnrec::Rng;

/// Largest coordinate-wise relative error between analytic gradients and
/// central differences with step `h`. Errors are taken relative to
/// `max(|analytic|, |numeric|, floor)`.
pub fn gradient_check(enc: &EncoderConfig, items: usize, users: usize, seed: u64, h: f64, floor: f64) -> (f64, usize) {
    let mut rng = Rng::seed_from_u64(seed);
    let seqs: Vec<Vec<usize>> = (0..users)
        .map(|_| {
            let n = rng.gen_range(2..=enc.max_len);
            (0..n).map(|_| rng.gen_range(1..=items)).collect()
        })
        .collect();
    let batch = SeqBatch::from_sequences(&seqs, enc.max_len);
    let mut basic = Vec::new();
    let mut consistency = Vec::new();
    let mut contexts = 0;
    for (b, s) in seqs.iter().enumerate() {
        for col in enc.max_len - s.len()..enc.max_len {
            let row = batch.row(b, col);
            contexts += 1;
            basic.push(PlannedTerm { row, item: rng.gen_range(1..=items), label: 1.0 });
            basic.push(PlannedTerm { row, item: rng.gen_range(1..=items), label: 0.0 });
            if rng.gen_bool(0.5) {
                let item = rng.gen_range(1..=items);
                basic.push(PlannedTerm { row, item, label: 1.0 });
                consistency.push(PlannedTerm { row, item, label: rng.gen_range(0.05..0.95) });
            }
        }
    }
    let plan = BatchPlan { batch, basic, consistency, instances: contexts };
    let alpha = 0.3;
    let mut params = ModelParams::init(enc, items, &mut Rng::seed_from_u64(seed + 1)).unwrap();
    // larger weights than the initializer's so every term matters
    for p in params.params_mut() {
        for x in p.value.data_mut() {
            *x *= 3.0;
        }
    }
    for p in params.params_mut() {
        if p.name.contains("item_emb") {
            p.value.row_mut(0).iter_mut().for_each(|x| *x = 0.0);
        }
    }
    let analytic = loss_and_grad(&params, enc, &plan, alpha, None).unwrap().grads;
    let loss = |p: &ModelParams| loss_and_grad(p, enc, &plan, alpha, None).unwrap().loss.total;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for k in 0..params.len() {
        for idx in 0..params.params()[k].value.data().len() {
            let orig = params.params()[k].value.data()[idx];
            params.params_mut()[k].value.data_mut()[idx] = orig + h;
            let up = loss(&params);
            params.params_mut()[k].value.data_mut()[idx] = orig - h;
            let down = loss(&params);
            params.params_mut()[k].value.data_mut()[idx] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (worst, checked)
}

pub fn small_synth(seed: u64) -> SynthCorpus {
    generate(&SynthConfig {
        n_users: 150,
        n_items: 200,
        latent_dim: 8,
        seq_len_range: (8, 14),
        plant_rate: 0.2,
        noise_temp: 0.25,
        seed,
    })
    .unwrap()
}

pub fn split(corpus: &SynthCorpus) -> SplitDataset {
    split_leave_one_out(&corpus.dataset)
}

/// Small, fast config: mean-pool encoder, short fixed warmup.
pub fn fast_config() -> TrainConfig {
    TrainConfig {
        encoder: EncoderConfig::mean_pool(16, 12),
        learning_rate: 0.01,
        batch_size: 32,
        warmup: WarmupPolicy::FixedEpochs { epochs: 2 },
        max_epochs: 8,
        decay: 0.9,
        ..TrainConfig::default()
    }
}

pub fn param_bits(p: &ModelParams) -> Vec<u64> {
    p.params()
        .iter()
        .flat_map(|q| q.value.data().iter().map(|x| x.to_bits()))
        .collect()
}
