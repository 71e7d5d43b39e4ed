//! Optimizer, training loop over synthetic corpora, evaluation, and
//! checkpoint persistence.
//!
//! Determinism contract: identical config + seed produce byte-identical
//! metric streams and checkpoints. Batch gradients are computed per sample
//! (in parallel) and reduced in sample order; every random draw comes from a
//! seeded counter-based generator.

use crate::error::{Error, Result};
use crate::model::{DecodeMode, LiveState, Model, ModelConfig};
use crate::numerics::{ParamSet, Real, Tape, Tensor};
use crate::tasks::{gen_qa, gen_recall, solve_sample, Sample, TaskKind, Vocab};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const ADAM_EPS: f64 = 1e-8;
/// Salt so the data stream is shared by every variant of a sweep regardless
/// of their model seeds.
const DATA_SEED_SALT: u64 = 0x5eed_da7a;
const EVAL_SEED_SALT: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Cross entropy on answer tokens only.
    Answer,
    /// Cross entropy on every next-token position.
    Lm,
}

/// Training hyperparameters; the defaults are conventional for small
/// decoder LMs and everything is configurable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub loss_mode: LossMode,
    /// Cosine decay floor as a fraction of peak lr.
    pub lr_min_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 16,
            lr: 3e-4,
            warmup_steps: 100,
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.01,
            grad_clip: 1.0,
            loss_mode: LossMode::Answer,
            lr_min_ratio: 0.1,
        }
    }
}

/// What to train on: a task family plus its knobs. When `filler_min` is
/// below `filler_len` (or `n_pairs_min` below `n_pairs`), each generated
/// sample draws that knob uniformly from the range — a curriculum that
/// speeds up retrieval-circuit formation. Evaluation sets use `eval_spec()`,
/// which pins both knobs at their full target values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub n_pairs: usize,
    pub filler_len: usize,
    pub filler_min: usize,
    pub n_pairs_min: usize,
}

impl TaskSpec {
    pub fn fixed(kind: TaskKind, n_pairs: usize, filler_len: usize) -> Self {
        TaskSpec {
            kind,
            n_pairs,
            filler_len,
            filler_min: filler_len,
            n_pairs_min: n_pairs,
        }
    }

    pub fn with_filler_curriculum(mut self, filler_min: usize) -> Self {
        self.filler_min = filler_min;
        self
    }

    pub fn with_pairs_curriculum(mut self, n_pairs_min: usize) -> Self {
        self.n_pairs_min = n_pairs_min;
        self
    }

    /// The held-out distribution: every knob pinned at its target value.
    pub fn eval_spec(&self) -> TaskSpec {
        TaskSpec {
            filler_min: self.filler_len,
            n_pairs_min: self.n_pairs,
            ..self.clone()
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
        use rand::Rng;
        if lo < hi {
            rng.gen_range(lo..=hi)
        } else {
            hi
        }
    }

    pub fn generate(&self, rng: &mut ChaCha8Rng, vocab: &Vocab) -> Result<Sample> {
        let filler = self.draw(rng, self.filler_min, self.filler_len);
        match self.kind {
            TaskKind::Recall => {
                let pairs = self.draw(rng, self.n_pairs_min.max(1), self.n_pairs);
                gen_recall(rng, vocab, pairs, filler, None)
            }
            kind => gen_qa(rng, vocab, kind, filler),
        }
    }

    pub fn generate_many(
        &self,
        rng: &mut ChaCha8Rng,
        vocab: &Vocab,
        n: usize,
    ) -> Result<Vec<Sample>> {
        (0..n).map(|_| self.generate(rng, vocab)).collect()
    }
}

/// Adaptive-moment state with decoupled weight decay and a warmup + cosine
/// learning-rate schedule.
pub struct OptimState<F: Real> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub cfg: TrainConfig,
}

impl<F: Real> OptimState<F> {
    pub fn new(model: &Model<F>, cfg: TrainConfig) -> Self {
        let m = model
            .params
            .entries()
            .map(|(_, e)| Tensor::zeros(e.tensor.shape().to_vec()))
            .collect::<Vec<_>>();
        let v = m.clone();
        OptimState { m, v, step: 0, cfg }
    }

    /// Learning rate at 1-based step t: linear warmup then cosine decay to
    /// lr · lr_min_ratio over the configured horizon.
    pub fn lr_at(&self, t: u64) -> f64 {
        let lr = self.cfg.lr;
        let warmup = self.cfg.warmup_steps as f64;
        let total = self.cfg.steps as f64;
        let t = t as f64;
        if warmup > 0.0 && t <= warmup {
            return lr * t / warmup;
        }
        if total <= warmup {
            return lr;
        }
        let progress = ((t - warmup) / (total - warmup)).clamp(0.0, 1.0);
        let floor = lr * self.cfg.lr_min_ratio;
        floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    /// One decoupled-weight-decay adaptive-moment update. Parameters whose
    /// gradient is None are left untouched.
    pub fn apply(&mut self, params: &mut ParamSet<F>, grads: &[Option<Tensor<F>>]) {
        self.step += 1;
        let t = self.step;
        let lr = self.lr_at(t);
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bias1 = 1.0 - b1.powi(t as i32);
        let bias2 = 1.0 - b2.powi(t as i32);
        for (id, entry) in params.entries_mut() {
            let Some(grad) = grads[id.index()].as_ref() else {
                continue;
            };
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let theta = entry.tensor.data_mut();
            let decay = if entry.decay { self.cfg.weight_decay } else { 0.0 };
            for i in 0..theta.len() {
                let g = grad.data()[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = F::from_f64(mi);
                v[i] = F::from_f64(vi);
                let update = (mi / bias1) / ((vi / bias2).sqrt() + ADAM_EPS);
                let th = theta[i].as_f64();
                theta[i] = F::from_f64(th - lr * update - lr * decay * th);
            }
        }
    }
}

/// Scale gradients so the global L2 norm is at most `threshold`.
/// Returns the pre-clip norm.
pub fn clip_gradients<F: Real>(grads: &mut [Option<Tensor<F>>], threshold: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter().flatten() {
        for v in g.data() {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > threshold && norm > 0.0 {
        let scale = F::from_f64(threshold / norm);
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

/// Append-only metric record, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub tokens: u64,
    pub loss: f64,
    pub ppl: f64,
    pub grad_norm: f64,
}

fn sample_loss_spec(sample: &Sample, mode: LossMode) -> (Vec<u32>, Vec<usize>, Vec<u32>) {
    match mode {
        LossMode::Answer => sample.training_sequence(),
        LossMode::Lm => {
            let (seq, _, _) = sample.training_sequence();
            let positions: Vec<usize> = (0..seq.len() - 1).collect();
            let targets: Vec<u32> = seq[1..].to_vec();
            (seq, positions, targets)
        }
    }
}

struct SampleGrad<F: Real> {
    loss: f64,
    n_positions: usize,
    n_tokens: usize,
    grads: Vec<Option<Tensor<F>>>,
}

fn sample_gradients<F: Real>(
    model: &Model<F>,
    sample: &Sample,
    mode: LossMode,
) -> Result<SampleGrad<F>> {
    let (seq, positions, targets) = sample_loss_spec(sample, mode);
    let mut tape = Tape::new();
    let state = model.new_state();
    let mut live = LiveState::attach(&mut tape, &state);
    let loss =
        model.sequence_loss_live(&mut tape, &model.params, &mut live, &seq, &positions, &targets)?;
    let loss_value = tape.value(loss).data()[0].as_f64();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            context: "training loss",
            op: tape.first_non_finite_op(),
        });
    }
    tape.backward(loss)?;
    let grads = model
        .params
        .ids()
        .map(|id| {
            let v = tape.param_var(&model.params, id);
            tape.grad_tensor(v)
        })
        .collect();
    Ok(SampleGrad {
        loss: loss_value,
        n_positions: positions.len(),
        n_tokens: seq.len(),
        grads,
    })
}

/// One optimizer step over a batch: per-sample gradients (parallel, reduced
/// in sample order), position-weighted mean loss, global-norm clipping, then
/// the adaptive-moment update.
pub fn train_step<F: Real>(
    model: &mut Model<F>,
    batch: &[Sample],
    optim: &mut OptimState<F>,
    tokens_before: u64,
) -> Result<MetricsRecord> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mode = optim.cfg.loss_mode;
    let per_sample: Vec<Result<SampleGrad<F>>> = batch
        .par_iter()
        .map(|s| sample_gradients(model, s, mode))
        .collect();

    let mut total_positions = 0usize;
    let mut total_tokens = 0u64;
    let mut loss_sum = 0.0f64;
    let mut acc: Vec<Option<Tensor<F>>> = vec![None; model.params.len()];
    let mut results = Vec::with_capacity(per_sample.len());
    for r in per_sample {
        results.push(r?);
    }
    for sg in &results {
        total_positions += sg.n_positions;
        total_tokens += sg.n_tokens as u64;
        loss_sum += sg.loss * sg.n_positions as f64;
    }
    // each sample's grads are d(mean over its positions); reweight so the
    // total is d(mean over all batch positions)
    for sg in &results {
        let w = F::from_f64(sg.n_positions as f64 / total_positions as f64);
        for (slot, g) in acc.iter_mut().zip(&sg.grads) {
            if let Some(g) = g {
                match slot {
                    Some(a) => {
                        for (ai, gi) in a.data_mut().iter_mut().zip(g.data()) {
                            *ai += *gi * w;
                        }
                    }
                    None => {
                        let mut t = g.clone();
                        for v in t.data_mut() {
                            *v *= w;
                        }
                        *slot = Some(t);
                    }
                }
            }
        }
    }

    let grad_norm = clip_gradients(&mut acc, optim.cfg.grad_clip);
    optim.apply(&mut model.params, &acc);

    let loss = loss_sum / total_positions as f64;
    Ok(MetricsRecord {
        step: optim.step,
        tokens: tokens_before + total_tokens,
        loss,
        ppl: loss.exp(),
        grad_norm,
    })
}

/// Deterministic seeded training loop over freshly generated batches.
/// `on_step` sees the model and every record, and may stop the loop early by
/// returning false (e.g. when a target metric is reached). Returns the
/// metric series.
pub fn train_loop<F: Real>(
    model: &mut Model<F>,
    optim: &mut OptimState<F>,
    task: &TaskSpec,
    vocab: &Vocab,
    data_rng: &mut ChaCha8Rng,
    on_step: &mut dyn FnMut(&Model<F>, &MetricsRecord) -> bool,
) -> Result<Vec<MetricsRecord>> {
    let mut series = Vec::new();
    let mut tokens = 0u64;
    for _ in optim.step as usize..optim.cfg.steps {
        let batch = task.generate_many(data_rng, vocab, optim.cfg.batch_size)?;
        let rec = train_step(model, &batch, optim, tokens)?;
        tokens = rec.tokens;
        let keep_going = on_step(model, &rec);
        series.push(rec);
        if !keep_going {
            break;
        }
    }
    Ok(series)
}

/// Seed for the shared training data stream of a run.
pub fn data_seed(seed: u64) -> u64 {
    seed ^ DATA_SEED_SALT
}

/// Seed for held-out evaluation sets (a different stream from training).
pub fn eval_seed(seed: u64) -> u64 {
    seed ^ EVAL_SEED_SALT
}

// ── evaluation ─────────────────────────────────────────────────────────

/// Anything that can produce an answer-token sequence for a sample.
pub trait Answerer {
    fn answer(&mut self, sample: &Sample) -> Result<Vec<u32>>;
}

/// Greedy decoding through the model, a fresh sequence state per sample.
pub struct ModelAnswerer<'a, F: Real> {
    pub model: &'a Model<F>,
}

impl<F: Real> Answerer for ModelAnswerer<'_, F> {
    fn answer(&mut self, sample: &Sample) -> Result<Vec<u32>> {
        let mut state = self.model.new_state();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.model.generate(
            &mut state,
            &sample.prompt(),
            sample.answer.len(),
            DecodeMode::Greedy,
            &mut rng,
        )
    }
}

/// Cheating baseline: the rule-based template solver.
pub struct OracleAnswerer<'a> {
    pub vocab: &'a Vocab,
}

impl Answerer for OracleAnswerer<'_> {
    fn answer(&mut self, sample: &Sample) -> Result<Vec<u32>> {
        match solve_sample(sample, self.vocab)? {
            Some(text) => self.vocab.encode(&text),
            None => Ok(vec![]),
        }
    }
}

/// Always answers the same single token.
pub struct ConstantAnswerer(pub u32);

impl Answerer for ConstantAnswerer {
    fn answer(&mut self, _sample: &Sample) -> Result<Vec<u32>> {
        Ok(vec![self.0])
    }
}

/// Fraction of samples whose produced answer equals the reference exactly.
pub fn evaluate_exact(answerer: &mut dyn Answerer, eval_set: &[Sample]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Config("empty eval set".into()));
    }
    let mut correct = 0usize;
    for s in eval_set {
        if answerer.answer(s)? == s.answer {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_set.len() as f64)
}

/// Greedy exact match, decoding samples in parallel.
pub fn evaluate_exact_model<F: Real>(model: &Model<F>, eval_set: &[Sample]) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Config("empty eval set".into()));
    }
    let outcomes: Vec<Result<bool>> = eval_set
        .par_iter()
        .map(|s| {
            let mut a = ModelAnswerer { model };
            Ok(a.answer(s)? == s.answer)
        })
        .collect();
    let mut correct = 0usize;
    for o in outcomes {
        if o? {
            correct += 1;
        }
    }
    Ok(correct as f64 / eval_set.len() as f64)
}

/// exp(mean cross entropy) over the positions selected by `mode`.
pub fn evaluate_ppl<F: Real>(
    model: &Model<F>,
    eval_set: &[Sample],
    mode: LossMode,
) -> Result<f64> {
    if eval_set.is_empty() {
        return Err(Error::Config("empty eval set".into()));
    }
    let per_sample: Vec<Result<(f64, usize)>> = eval_set
        .par_iter()
        .map(|s| {
            let (seq, positions, targets) = sample_loss_spec(s, mode);
            let mut tape = Tape::new();
            let state = model.new_state();
            let mut live = LiveState::attach(&mut tape, &state);
            let loss = model.sequence_loss_live(
                &mut tape,
                &model.params,
                &mut live,
                &seq,
                &positions,
                &targets,
            )?;
            Ok((tape.value(loss).data()[0].as_f64(), positions.len()))
        })
        .collect();
    let mut ce = 0.0;
    let mut n = 0usize;
    for r in per_sample {
        let (l, k) = r?;
        ce += l * k as f64;
        n += k;
    }
    Ok((ce / n as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Ppl,
    ExactMatch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub ppl: Option<f64>,
    pub exact_match: Option<f64>,
}

pub fn evaluate<F: Real>(
    model: &Model<F>,
    eval_set: &[Sample],
    mode: EvalMode,
    loss_mode: LossMode,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        n_samples: eval_set.len(),
        ppl: None,
        exact_match: None,
    };
    match mode {
        EvalMode::Ppl => report.ppl = Some(evaluate_ppl(model, eval_set, loss_mode)?),
        EvalMode::ExactMatch => {
            report.exact_match = Some(evaluate_exact_model(model, eval_set)?)
        }
    }
    Ok(report)
}

// ── checkpoints ────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"MLMK";
const CKPT_VERSION: u32 = 1;

pub struct Checkpoint<F: Real> {
    pub model: Model<F>,
    pub optim_moments: Option<(Vec<Tensor<F>>, Vec<Tensor<F>>, u64)>,
    pub data_rng: ChaCha8Rng,
    pub step: u64,
    pub history: Vec<MetricsRecord>,
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CheckpointTruncated(format!(
                "wanted {n} bytes for {what} at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn u128(&mut self, what: &str) -> Result<u128> {
        let b = self.take(16, what)?;
        Ok(u128::from_le_bytes(b.try_into().unwrap()))
    }
}

fn push_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

fn config_digest(config_json: &[u8]) -> [u8; 8] {
    use sha2::{Digest, Sha256};
    let hash = Sha256::digest(config_json);
    let mut out = [0u8; 8];
    out.copy_from_slice(&hash[..8]);
    out
}

fn write_tensor<F: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) {
    push_bytes(out, name.as_bytes());
    out.push(F::DTYPE_TAG);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        v.write_le(out);
    }
}

fn read_tensor<F: Real>(r: &mut ByteReader) -> Result<(String, Tensor<F>)> {
    let name_len = r.u32("tensor name length")? as usize;
    let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec())
        .map_err(|_| Error::CheckpointFormat("tensor name is not utf-8".into()))?;
    let dtype = r.u8("dtype tag")?;
    if dtype != F::DTYPE_TAG {
        return Err(Error::CheckpointFormat(format!(
            "tensor `{name}` has dtype tag {dtype}, expected {}",
            F::DTYPE_TAG
        )));
    }
    let ndim = r.u8("ndim")? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.u32("extent")? as usize);
    }
    let numel: usize = shape.iter().product();
    let raw = r.take(numel * F::byte_len(), "tensor data")?;
    let data = raw
        .chunks_exact(F::byte_len())
        .map(F::read_le)
        .collect::<Vec<F>>();
    Ok((name, Tensor::new(shape, data)?))
}

/// Single-file checkpoint: versioned header (magic, version, config digest),
/// config JSON, rng state, step, metric history, then length-prefixed named
/// tensors (parameters, then optional optimizer moments) in little-endian
/// byte order. save → load → save is byte-identical.
pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &Model<F>,
    optim: Option<&OptimState<F>>,
    data_rng: &ChaCha8Rng,
    step: u64,
    history: &[MetricsRecord],
) -> Result<()> {
    let config_json =
        serde_json::to_vec(&model.cfg).map_err(|e| Error::ConfigParse(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&config_digest(&config_json));
    push_bytes(&mut out, &config_json);
    out.extend_from_slice(&data_rng.get_seed());
    out.extend_from_slice(&data_rng.get_word_pos().to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    let history_json =
        serde_json::to_vec(history).map_err(|e| Error::ConfigParse(e.to_string()))?;
    push_bytes(&mut out, &history_json);

    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, e) in model.params.entries() {
        write_tensor(&mut out, &e.name, &e.tensor);
    }
    match optim {
        Some(o) => {
            out.push(1);
            out.extend_from_slice(&o.step.to_le_bytes());
            for ((_, e), m) in model.params.entries().zip(&o.m) {
                write_tensor(&mut out, &format!("optim.m.{}", e.name), m);
            }
            for ((_, e), v) in model.params.entries().zip(&o.v) {
                write_tensor(&mut out, &format!("optim.v.{}", e.name), v);
            }
        }
        None => out.push(0),
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load against the config stored in the file.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    load_checkpoint_with_config(path, None)
}

/// Load, optionally forcing a caller-supplied config; tensor shapes from the
/// file are validated against the constructed model and mismatches name the
/// offending tensor.
pub fn load_checkpoint_with_config<F: Real>(
    path: &Path,
    expect: Option<&ModelConfig>,
) -> Result<Checkpoint<F>> {
    let buf = std::fs::read(path)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CKPT_MAGIC {
        return Err(Error::CheckpointFormat(format!(
            "bad magic {magic:?}, not a checkpoint file"
        )));
    }
    let version = r.u32("version")?;
    if version != CKPT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let digest: [u8; 8] = r.take(8, "config digest")?.try_into().unwrap();
    let config_len = r.u32("config length")? as usize;
    let config_json = r.take(config_len, "config json")?;
    if config_digest(config_json) != digest {
        return Err(Error::CheckpointFormat(
            "config digest mismatch: header does not match stored config".into(),
        ));
    }
    let file_cfg: ModelConfig =
        serde_json::from_slice(config_json).map_err(|e| Error::CheckpointFormat(e.to_string()))?;
    let cfg = expect.cloned().unwrap_or(file_cfg);

    let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().unwrap();
    let word_pos = r.u128("rng word pos")?;
    let mut data_rng = ChaCha8Rng::from_seed(seed);
    data_rng.set_word_pos(word_pos);
    let step = r.u64("step")?;
    let history_len = r.u32("history length")? as usize;
    let history_json = r.take(history_len, "history")?;
    let history: Vec<MetricsRecord> =
        serde_json::from_slice(history_json).map_err(|e| Error::CheckpointFormat(e.to_string()))?;

    let mut model = Model::<F>::new(cfg)?;
    let n_tensors = r.u32("tensor count")? as usize;
    if n_tensors != model.params.len() {
        return Err(Error::CheckpointFormat(format!(
            "file has {n_tensors} tensors, model expects {}",
            model.params.len()
        )));
    }
    for id in model.params.ids().collect::<Vec<_>>() {
        let (name, tensor) = read_tensor::<F>(&mut r)?;
        if name != model.params.name(id) {
            return Err(Error::CheckpointFormat(format!(
                "tensor order mismatch: file has `{name}`, model expects `{}`",
                model.params.name(id)
            )));
        }
        if tensor.shape() != model.params.tensor(id).shape() {
            return Err(Error::CheckpointShape {
                name,
                file: tensor.shape().to_vec(),
                model: model.params.tensor(id).shape().to_vec(),
            });
        }
        *model.params.tensor_mut(id) = tensor;
    }

    let has_optim = r.u8("optimizer flag")? == 1;
    let optim_moments = if has_optim {
        let ostep = r.u64("optimizer step")?;
        let mut m = Vec::with_capacity(model.params.len());
        for id in model.params.ids().collect::<Vec<_>>() {
            let (name, tensor) = read_tensor::<F>(&mut r)?;
            let want = format!("optim.m.{}", model.params.name(id));
            if name != want {
                return Err(Error::CheckpointFormat(format!(
                    "moment order mismatch: file has `{name}`, expected `{want}`"
                )));
            }
            m.push(tensor);
        }
        let mut v = Vec::with_capacity(model.params.len());
        for id in model.params.ids().collect::<Vec<_>>() {
            let (name, tensor) = read_tensor::<F>(&mut r)?;
            let want = format!("optim.v.{}", model.params.name(id));
            if name != want {
                return Err(Error::CheckpointFormat(format!(
                    "moment order mismatch: file has `{name}`, expected `{want}`"
                )));
            }
            v.push(tensor);
        }
        Some((m, v, ostep))
    } else {
        None
    };

    Ok(Checkpoint {
        model,
        optim_moments,
        data_rng,
        step,
        history,
    })
}

/// Rebuild an OptimState from checkpointed moments.
pub fn optim_from_moments<F: Real>(
    moments: (Vec<Tensor<F>>, Vec<Tensor<F>>, u64),
    cfg: TrainConfig,
) -> OptimState<F> {
    OptimState {
        m: moments.0,
        v: moments.1,
        step: moments.2,
        cfg,
    }
}

pub fn write_metrics(path: &Path, series: &[MetricsRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for rec in series {
        let line = serde_json::to_string(rec).map_err(|e| Error::ConfigParse(e.to_string()))?;
        writeln!(f, "{line}")?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::ConfigParse(e.to_string())))
        .collect()
}

// ── the k-blocks sweep ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub label: String,
    pub k_memory_blocks: usize,
    pub memory_enabled: bool,
    pub series: Vec<MetricsRecord>,
    pub final_eval_ppl: f64,
}

/// Memory-integration sweep: trains one variant per requested k plus a
/// memory-disabled vanilla baseline, under identical seeds and an identical
/// data-stream order, and reports each variant's per-step series plus its
/// held-out perplexity.
pub fn run_experiment<F: Real>(
    base: &ModelConfig,
    k_values: &[usize],
    include_vanilla: bool,
    task: &TaskSpec,
    train: &TrainConfig,
    vocab: &Vocab,
    eval_samples: usize,
    mut per_variant: Option<&mut dyn FnMut(&str, &[MetricsRecord])>,
) -> Result<Vec<VariantResult>> {
    let mut variants: Vec<(String, ModelConfig)> = Vec::new();
    for &k in k_values {
        let mut cfg = base.clone();
        cfg.k_memory_blocks = k;
        cfg.memory_enabled = true;
        variants.push((format!("k{k}"), cfg));
    }
    if include_vanilla {
        let mut cfg = base.clone();
        cfg.memory_enabled = false;
        variants.push(("vanilla".into(), cfg));
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(eval_seed(base.seed));
    let eval_set = task.eval_spec().generate_many(&mut eval_rng, vocab, eval_samples)?;

    let mut results = Vec::new();
    for (label, cfg) in variants {
        let mut model = Model::<F>::new(cfg.clone())?;
        let mut optim = OptimState::new(&model, train.clone());
        let mut data_rng = ChaCha8Rng::seed_from_u64(data_seed(base.seed));
        let series = train_loop(
            &mut model,
            &mut optim,
            task,
            vocab,
            &mut data_rng,
            &mut |_, _| true,
        )?;
        let final_eval_ppl = evaluate_ppl(&model, &eval_set, train.loss_mode)?;
        if let Some(cb) = per_variant.as_deref_mut() {
            cb(&label, &series);
        }
        results.push(VariantResult {
            label,
            k_memory_blocks: cfg.k_memory_blocks,
            memory_enabled: cfg.memory_enabled,
            series,
            final_eval_ppl,
        });
    }
    Ok(results)
}
