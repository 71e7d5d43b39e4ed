//! Command-line entry point: train / sweep / eval / generate / inspect over
//! a flat key = value config file.
//!
//! Every run materializes its defaults, echoes the resolved config into a
//! timestamped output directory, and writes all artifacts (metrics,
//! checkpoints, reports) inside that directory only. Re-running with the
//! echoed config reproduces the metrics byte for byte.

use crate::error::{Error, Result};
use crate::inspect;
use crate::memory::WriteAggregation;
use crate::model::{BankMode, DecodeMode, Model, ModelConfig};
use crate::numerics::Real;
use crate::tasks::{TaskKind, Vocab};
use crate::training::{
    self, data_seed, eval_seed, evaluate_exact_model, evaluate_ppl, load_checkpoint,
    optim_from_moments, run_experiment, LossMode, MetricsRecord, OptimState, TaskSpec,
    TrainConfig,
};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const OUT_ROOT_ENV: &str = "MEMLM_OUT";

/// Flat run configuration; unknown keys are rejected with the key named.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    /// 0 derives the size from the synthetic task vocabulary.
    pub vocab_size: usize,
    pub dim: usize,
    pub n_blocks: usize,
    pub k_memory_blocks: usize,
    pub n_slots: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    /// 0 disables top-k memory attention.
    pub top_k: usize,
    pub segment_len: usize,
    pub bank_mode: BankMode,
    pub write_aggregation: WriteAggregation,
    pub gate_bias_init: f64,
    pub tie_embeddings: bool,
    pub memory_enabled: bool,
    pub precision: u32,
    pub seed: u64,

    // task
    pub task_kind: String,
    pub n_pairs: usize,
    pub filler_len: usize,
    /// Training filler-curriculum floor; absent means fixed at filler_len.
    pub filler_min: Option<usize>,
    /// Training pairs-curriculum floor; absent means fixed at n_pairs.
    pub n_pairs_min: Option<usize>,
    pub eval_samples: usize,

    // training
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub loss_mode: LossMode,
    pub lr_min_ratio: f64,
    /// Periodic exact-match evaluation during train (0 = only at the end).
    pub eval_every: usize,

    // sweep
    /// Empty means {1, n_blocks}.
    pub sweep_k: Vec<usize>,

    // generate / inspect
    pub max_new: usize,
    pub temperature: f64,
    pub inspect_block: usize,
    /// Decode steps between the before/after captures.
    pub adapt_steps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            vocab_size: 0,
            dim: 64,
            n_blocks: 4,
            k_memory_blocks: 4,
            n_slots: 64,
            n_heads: 8,
            n_kv_heads: 2,
            d_ff: 256,
            rope_base: 10000.0,
            top_k: 0,
            segment_len: 64,
            bank_mode: BankMode::SharedThreaded,
            write_aggregation: WriteAggregation::Attention,
            gate_bias_init: -4.0,
            tie_embeddings: false,
            memory_enabled: true,
            precision: 32,
            seed: 42,
            task_kind: "recall".into(),
            n_pairs: 4,
            filler_len: 128,
            filler_min: None,
            n_pairs_min: None,
            eval_samples: 1000,
            steps: 10000,
            batch_size: 16,
            lr: 1e-3,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            grad_clip: 1.0,
            loss_mode: LossMode::Answer,
            lr_min_ratio: 0.1,
            eval_every: 200,
            sweep_k: vec![],
            max_new: 1,
            temperature: 0.0,
            inspect_block: 0,
            adapt_steps: 8,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::ConfigParse(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        TaskKind::from_str(&self.task_kind)?;
        let vocab = Vocab::synthetic();
        if self.vocab_size != 0 && self.vocab_size < vocab.len() {
            return Err(Error::Config(format!(
                "vocab_size: {} is smaller than the task vocabulary ({})",
                self.vocab_size,
                vocab.len()
            )));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        let vocab_size = if self.vocab_size == 0 {
            Vocab::synthetic().len()
        } else {
            self.vocab_size
        };
        ModelConfig {
            vocab_size,
            dim: self.dim,
            n_blocks: self.n_blocks,
            k_memory_blocks: self.k_memory_blocks,
            n_slots: self.n_slots,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            d_ff: self.d_ff,
            rope_base: self.rope_base,
            top_k: if self.top_k == 0 { None } else { Some(self.top_k) },
            segment_len: self.segment_len,
            bank_mode: self.bank_mode,
            write_aggregation: self.write_aggregation,
            gate_bias_init: self.gate_bias_init,
            tie_embeddings: self.tie_embeddings,
            memory_enabled: self.memory_enabled,
            precision: self.precision,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            loss_mode: self.loss_mode,
            lr_min_ratio: self.lr_min_ratio,
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        let spec = TaskSpec::fixed(
            TaskKind::from_str(&self.task_kind).expect("validated task kind"),
            self.n_pairs,
            self.filler_len,
        );
        let spec = match self.filler_min {
            Some(m) => spec.with_filler_curriculum(m),
            None => spec,
        };
        match self.n_pairs_min {
            Some(m) => spec.with_pairs_curriculum(m),
            None => spec,
        }
    }

    /// Resolved config as diff-friendly key = value text.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

#[derive(Parser)]
#[command(name = "memlm", version, about = "memory-augmented decoder: train, evaluate, inspect")]
struct Cli {
    /// Path to the run configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; a timestamped run directory is created inside.
    /// Defaults to $MEMLM_OUT, then ./runs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Resume from a checkpoint file.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Override the config's float precision (32 or 64).
    #[arg(long, global = true)]
    precision: Option<u32>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single variant and checkpoint it.
    Train,
    /// Memory-integration sweep: each k in sweep_k plus a vanilla baseline.
    Sweep,
    /// Perplexity and exact-match on a fresh seeded eval set.
    Eval,
    /// Decode a prompt.
    Generate {
        /// Whitespace-separated prompt tokens.
        #[arg(long)]
        prompt: String,
    },
    /// Memory inspection reports.
    Inspect {
        #[command(subcommand)]
        what: InspectWhat,
    },
}

#[derive(Subcommand)]
enum InspectWhat {
    /// Before/after cross-attention heatmaps around adapt_steps decode steps.
    Heatmap,
    /// Slot relevance ranking over a probe set.
    Slots,
    /// Per-slot bank L1 deltas across adapt_steps decode steps.
    Delta,
}

/// Parse argv, run the requested subcommand, and map errors to a one-line
/// machine-parseable stderr message plus a nonzero exit status.
pub fn dispatch(argv: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own help/version output
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => return Err(Error::Config("--config <path> is required".into())),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(p) = cli.precision {
        cfg.precision = p;
    }
    cfg.validate()?;

    let sub = match &cli.command {
        Command::Train => "train",
        Command::Sweep => "sweep",
        Command::Eval => "eval",
        Command::Generate { .. } => "generate",
        Command::Inspect { .. } => "inspect",
    };
    let run_dir = make_run_dir(cli.out.as_deref(), sub)?;
    std::fs::write(run_dir.join("config.toml"), cfg.echo())?;

    match cfg.precision {
        32 => run_typed::<f32>(&cli, cfg, &run_dir),
        64 => run_typed::<f64>(&cli, cfg, &run_dir),
        other => Err(Error::Config(format!("precision must be 32 or 64, got {other}"))),
    }
}

fn run_typed<F: Real>(cli: &Cli, cfg: RunConfig, run_dir: &Path) -> Result<()> {
    match &cli.command {
        Command::Train => cmd_train::<F>(&cfg, cli.resume.as_deref(), run_dir),
        Command::Sweep => cmd_sweep::<F>(&cfg, run_dir),
        Command::Eval => cmd_eval::<F>(&cfg, cli.resume.as_deref(), run_dir),
        Command::Generate { prompt } => {
            cmd_generate::<F>(&cfg, cli.resume.as_deref(), prompt, run_dir)
        }
        Command::Inspect { what } => cmd_inspect::<F>(&cfg, cli.resume.as_deref(), what, run_dir),
    }
}

fn make_run_dir(out: Option<&Path>, sub: &str) -> Result<PathBuf> {
    let root = match out {
        Some(p) => p.to_path_buf(),
        None => std::env::var_os(OUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    };
    let stamp = chrono::Utc::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{stamp}-{sub}"));
    let mut dir = base.clone();
    let mut counter = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{counter}", base.display()));
        counter += 1;
    }
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Model + optimizer + data stream, either fresh from the config or restored
/// from a checkpoint.
fn load_or_init<F: Real>(
    cfg: &RunConfig,
    resume: Option<&Path>,
) -> Result<(Model<F>, OptimState<F>, rand_chacha::ChaCha8Rng, Vec<MetricsRecord>)> {
    match resume {
        Some(path) => {
            let ckpt = load_checkpoint::<F>(path)?;
            let optim = match ckpt.optim_moments {
                Some(m) => optim_from_moments(m, cfg.train_config()),
                None => OptimState::new(&ckpt.model, cfg.train_config()),
            };
            Ok((ckpt.model, optim, ckpt.data_rng, ckpt.history))
        }
        None => {
            let model = Model::<F>::new(cfg.model_config())?;
            let optim = OptimState::new(&model, cfg.train_config());
            let rng = rand_chacha::ChaCha8Rng::seed_from_u64(data_seed(cfg.seed));
            Ok((model, optim, rng, Vec::new()))
        }
    }
}

use rand::SeedableRng;

fn cmd_train<F: Real>(cfg: &RunConfig, resume: Option<&Path>, run_dir: &Path) -> Result<()> {
    let vocab = Vocab::synthetic();
    let task = cfg.task_spec();
    let (mut model, mut optim, mut data_rng, mut history) = load_or_init::<F>(cfg, resume)?;

    let metrics_path = run_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::File::create(&metrics_path)?;
    let print_every = (cfg.steps / 10).max(1);
    let series = training::train_loop(
        &mut model,
        &mut optim,
        &task,
        &vocab,
        &mut data_rng,
        &mut |_, rec| {
            let line = serde_json::to_string(rec).expect("metric serializes");
            writeln!(metrics_file, "{line}").expect("metrics file writable");
            if rec.step % print_every as u64 == 0 || rec.step == cfg.steps as u64 {
                println!(
                    "step={} tokens={} loss={:.4} ppl={:.3} grad_norm={:.3}",
                    rec.step, rec.tokens, rec.loss, rec.ppl, rec.grad_norm
                );
            }
            true
        },
    )?;
    drop(metrics_file);
    history.extend(series);

    let ckpt_path = run_dir.join("checkpoint.bin");
    training::save_checkpoint(&ckpt_path, &model, Some(&optim), &data_rng, optim.step, &history)?;

    let mut eval_rng = rand_chacha::ChaCha8Rng::seed_from_u64(eval_seed(cfg.seed));
    let eval_set = task.eval_spec().generate_many(&mut eval_rng, &vocab, cfg.eval_samples)?;
    let ppl = evaluate_ppl(&model, &eval_set, cfg.loss_mode)?;
    let em = evaluate_exact_model(&model, &eval_set)?;
    let report = serde_json::json!({
        "steps": optim.step,
        "eval_samples": eval_set.len(),
        "eval_ppl": ppl,
        "exact_match": em,
    });
    std::fs::write(run_dir.join("eval.json"), format!("{report:#}\n"))?;
    println!(
        "ok train steps={} eval_ppl={:.4} exact_match={:.4} out={}",
        optim.step,
        ppl,
        em,
        run_dir.display()
    );
    Ok(())
}

fn cmd_sweep<F: Real>(cfg: &RunConfig, run_dir: &Path) -> Result<()> {
    let vocab = Vocab::synthetic();
    let task = cfg.task_spec();
    let k_values: Vec<usize> = if cfg.sweep_k.is_empty() {
        let mut v = vec![1, cfg.n_blocks];
        v.dedup();
        v
    } else {
        cfg.sweep_k.clone()
    };
    let results = run_experiment::<F>(
        &cfg.model_config(),
        &k_values,
        true,
        &task,
        &cfg.train_config(),
        &vocab,
        cfg.eval_samples,
        Some(&mut |label: &str, series: &[MetricsRecord]| {
            let path = run_dir.join(format!("variant-{label}.jsonl"));
            training::write_metrics(&path, series).expect("variant metrics writable");
        }),
    )?;

    let table_path = run_dir.join("sweep_summary.tsv");
    let mut table = String::from("variant\tk_memory_blocks\tmemory_enabled\tfinal_train_ppl\tfinal_eval_ppl\n");
    for r in &results {
        let final_train = r.series.last().map(|m| m.ppl).unwrap_or(f64::NAN);
        table.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\n",
            r.label, r.k_memory_blocks, r.memory_enabled, final_train, r.final_eval_ppl
        ));
        println!(
            "variant={} k={} memory={} final_eval_ppl={:.4}",
            r.label, r.k_memory_blocks, r.memory_enabled, r.final_eval_ppl
        );
    }
    std::fs::write(&table_path, table)?;
    println!("ok sweep variants={} out={}", results.len(), run_dir.display());
    Ok(())
}

fn cmd_eval<F: Real>(cfg: &RunConfig, resume: Option<&Path>, run_dir: &Path) -> Result<()> {
    let path = resume.ok_or_else(|| {
        Error::Config("eval requires --resume <checkpoint>".into())
    })?;
    let ckpt = load_checkpoint::<F>(path)?;
    let vocab = Vocab::synthetic();
    let task = cfg.task_spec();
    let mut eval_rng = rand_chacha::ChaCha8Rng::seed_from_u64(eval_seed(cfg.seed));
    let eval_set = task.eval_spec().generate_many(&mut eval_rng, &vocab, cfg.eval_samples)?;
    let ppl = evaluate_ppl(&ckpt.model, &eval_set, cfg.loss_mode)?;
    let em = evaluate_exact_model(&ckpt.model, &eval_set)?;
    let report = serde_json::json!({
        "checkpoint_step": ckpt.step,
        "eval_samples": eval_set.len(),
        "eval_ppl": ppl,
        "exact_match": em,
    });
    std::fs::write(run_dir.join("eval.json"), format!("{report:#}\n"))?;
    println!("ok eval ppl={ppl:.4} exact_match={em:.4} out={}", run_dir.display());
    Ok(())
}

fn cmd_generate<F: Real>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    prompt: &str,
    run_dir: &Path,
) -> Result<()> {
    let vocab = Vocab::synthetic();
    let model = match resume {
        Some(p) => load_checkpoint::<F>(p)?.model,
        None => Model::<F>::new(cfg.model_config())?,
    };
    let prompt_ids = vocab.encode(prompt)?;
    let mode = if cfg.temperature > 0.0 {
        DecodeMode::Temperature(cfg.temperature)
    } else {
        DecodeMode::Greedy
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = model.new_state();
    let out_ids = model.generate(&mut state, &prompt_ids, cfg.max_new, mode, &mut rng)?;
    let text = vocab.decode(&out_ids)?;
    std::fs::write(run_dir.join("generation.txt"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn cmd_inspect<F: Real>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    what: &InspectWhat,
    run_dir: &Path,
) -> Result<()> {
    let vocab = Vocab::synthetic();
    let model = match resume {
        Some(p) => load_checkpoint::<F>(p)?.model,
        None => Model::<F>::new(cfg.model_config())?,
    };
    let task = cfg.task_spec();
    let mut probe_rng = rand_chacha::ChaCha8Rng::seed_from_u64(eval_seed(cfg.seed) ^ 0x9e37);
    let mut decode_rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);

    match what {
        InspectWhat::Heatmap => {
            let sample = task.generate(&mut probe_rng, &vocab)?;
            let probe = sample.prompt();
            let mut state = model.new_state();
            let before = inspect::export_heatmap(
                &model, &state, &probe, cfg.inspect_block,
                &run_dir.join("heatmap_before.tsv"), &vocab,
            )?;
            model.generate(&mut state, &probe, cfg.adapt_steps, DecodeMode::Greedy, &mut decode_rng)?;
            let after = inspect::export_heatmap(
                &model, &state, &probe, cfg.inspect_block,
                &run_dir.join("heatmap_after.tsv"), &vocab,
            )?;
            println!(
                "ok inspect-heatmap block={} adapt_steps={} l1_delta={:.6} out={}",
                cfg.inspect_block,
                cfg.adapt_steps,
                before.l1_distance(&after),
                run_dir.display()
            );
        }
        InspectWhat::Slots => {
            let probe = task.generate_many(&mut probe_rng, &vocab, 8)?;
            let top_m = 5.min(model.cfg.n_slots);
            let (top, bottom) = inspect::rank_slots(&model, &probe, top_m, &vocab)?;
            inspect::write_slot_reports(&top, &bottom, &run_dir.join("slots.tsv"))?;
            println!(
                "ok inspect-slots top_slot={} relevance={:.6e} out={}",
                top[0].slot,
                top[0].relevance,
                run_dir.display()
            );
        }
        InspectWhat::Delta => {
            let sample = task.generate(&mut probe_rng, &vocab)?;
            let probe = sample.prompt();
            let mut state = model.new_state();
            for chunk in probe.chunks(model.cfg.segment_len) {
                model.forward_segment(&mut state, chunk)?;
            }
            let before = state.clone();
            let last = *probe.last().unwrap();
            model.generate(&mut state, &[last], cfg.adapt_steps, DecodeMode::Greedy, &mut decode_rng)?;
            let delta = inspect::memory_delta(&before, &state)?;
            inspect::write_memory_delta(&delta, &run_dir.join("delta.tsv"))?;
            let (bank, slot, l1) = delta.top_changed[0];
            println!(
                "ok inspect-delta total_l1={:.6} top_changed=bank{}/slot{} ({:.6}) out={}",
                delta.total(),
                bank,
                slot,
                l1,
                run_dir.display()
            );
        }
    }
    Ok(())
}
