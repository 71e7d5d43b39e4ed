// Scratch harness for tuning the recall-learning configuration.
use memlm::model::{Model, ModelConfig};
use memlm::tasks::{gen_recall, Sample, TaskKind, Vocab};
use memlm::training::{
    data_seed, eval_seed, evaluate_exact_model, train_step, LossMode, OptimState, TaskSpec,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let lr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(16);
    let steps: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(800);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(42);
    // flags: p = pairs curriculum, f = filler curriculum, t = tie, l = lm loss,
    // q = bigger qk init, w = no warmup
    let flags = args.get(5).cloned().unwrap_or_default();

    let vocab = Vocab::synthetic();
    let mut cfg = ModelConfig::toy(vocab.len());
    cfg.dim = 64;
    cfg.n_blocks = 4;
    cfg.k_memory_blocks = 4;
    cfg.n_slots = 64;
    cfg.n_heads = 8;
    cfg.n_kv_heads = 2;
    cfg.d_ff = 256;
    cfg.segment_len = 64;
    cfg.seed = seed;
    cfg.tie_embeddings = flags.contains('t');

    let tc = TrainConfig {
        steps: args.get(9).and_then(|s| s.parse().ok()).unwrap_or(steps),
        batch_size: batch,
        lr,
        warmup_steps: if flags.contains('w') { 0 } else { 100 },
        loss_mode: if flags.contains('l') { LossMode::Lm } else { LossMode::Answer },
        weight_decay: if flags.contains('d') { 0.0 } else { 0.01 },
        ..TrainConfig::default()
    };

    let mut model = Model::<f32>::new(cfg).unwrap();
    if flags.contains('q') {
        for b in 0..model.blocks.len() {
            let ids = [model.blocks[b].w_q, model.blocks[b].w_k];
            for id in ids {
                for v in model.params.tensor_mut(id).data_mut() {
                    *v *= 4.0;
                }
            }
        }
    }
    println!("params: {} flags={flags}", model.params.total_elements());
    let mut optim = OptimState::new(&model, tc);
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed(seed));

    let eval_task = TaskSpec::fixed(TaskKind::Recall, 4, 128);
    let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed(seed));
    let quick_eval = eval_task.generate_many(&mut eval_rng, &vocab, 100).unwrap();

    let pairs_curriculum = flags.contains('p');
    let filler_curriculum = flags.contains('f');
    let gen_batch = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|_| {
                let n_pairs = if pairs_curriculum { rng.gen_range(1..=4) } else { 4 };
                let filler = if filler_curriculum { rng.gen_range(0..=128) } else { 128 };
                gen_recall(rng, &vocab, n_pairs, filler, None).unwrap()
            })
            .collect()
    };

    let t0 = Instant::now();
    let mut tokens = 0;
    let run_steps = steps;
    for step in 1..=run_steps {
        let batch_samples = gen_batch(&mut rng, batch);
        let rec = train_step(&mut model, &batch_samples, &mut optim, tokens).unwrap();
        tokens = rec.tokens;
        if step % 50 == 0 {
            let em = evaluate_exact_model(&model, &quick_eval).unwrap();
            println!(
                "step={} loss={:.4} ppl={:.2} em100={:.2} elapsed={:.1}s",
                rec.step,
                rec.loss,
                rec.ppl,
                em,
                t0.elapsed().as_secs_f64(),
            );
            if em >= 0.99 {
                break;
            }
        }
    }
    println!("total train: {:.1}s", t0.elapsed().as_secs_f64());

    let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed(seed) ^ 7);
    let eval_set = eval_task.generate_many(&mut eval_rng, &vocab, 1000).unwrap();
    let em = evaluate_exact_model(&model, &eval_set).unwrap();
    println!(
        "final em(1000) = {:.4}, wall total {:.1}s",
        em,
        t0.elapsed().as_secs_f64()
    );
    // diagnostic: EM by filler length and by pair count
    for filler in [0usize, 16, 32, 64, 96, 128] {
        let spec = TaskSpec::fixed(TaskKind::Recall, 4, filler);
        let mut r = ChaCha8Rng::seed_from_u64(eval_seed(seed) ^ filler as u64);
        let set = spec.generate_many(&mut r, &vocab, 200).unwrap();
        let em = evaluate_exact_model(&model, &set).unwrap();
        println!("  em by filler {filler:>3}: {em:.3}");
    }
    for pairs in [1usize, 2, 3, 4] {
        let spec = TaskSpec::fixed(TaskKind::Recall, pairs, 128);
        let mut r = ChaCha8Rng::seed_from_u64(eval_seed(seed) ^ (900 + pairs as u64));
        let set = spec.generate_many(&mut r, &vocab, 200).unwrap();
        let em = evaluate_exact_model(&model, &set).unwrap();
        println!("  em by pairs {pairs}: {em:.3}");
    }
}
