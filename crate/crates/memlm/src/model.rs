//! Full decoder stack: embeddings, L blocks (memory in the first k), LM
//! head, and the segment-wise memory lifecycle.
//!
//! Segment protocol: within one segment every memory block reads the bank
//! state as of segment start, each block's write is collected, and all
//! writes are applied after the last block — sequentially onto one bank in
//! `shared_threaded` mode, or each onto its own bank in `per_block` mode.
//! Reads therefore only ever see previously written memory, which keeps
//! the whole stack causal under teacher-forced training. At segment_len 1
//! this coincides with per-token test-time adaptation.

use crate::decoder::{block_forward, BlockParams, RMS_NORM_EPS};
use crate::error::{Error, Result};
use crate::memory::{
    apply_update, init_bank, BankState, MemoryBank, MemoryParams, MemoryReadResult,
    WriteAggregation,
};
use crate::numerics::{ParamId, ParamSet, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMode {
    /// One bank per sequence; per-segment writes from blocks 1..k chain onto
    /// it in block order (default).
    SharedThreaded,
    /// Every memory block owns a private bank.
    PerBlock,
}

/// Every architectural hyperparameter, serializable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Model dimension d (also the slot width).
    pub dim: usize,
    /// Decoder block count L.
    pub n_blocks: usize,
    /// Memory modules sit in the first k blocks.
    pub k_memory_blocks: usize,
    /// Slot count N.
    pub n_slots: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub rope_base: f64,
    /// Optional top-k restriction on the memory read attention.
    pub top_k: Option<usize>,
    /// Maximum tokens per forward segment S.
    pub segment_len: usize,
    pub bank_mode: BankMode,
    pub write_aggregation: WriteAggregation,
    /// Initial b_out; −4 starts the memory path nearly closed.
    pub gate_bias_init: f64,
    pub tie_embeddings: bool,
    /// Master switch: false gives the paired vanilla stack.
    pub memory_enabled: bool,
    /// 32 or 64.
    pub precision: u32,
    pub seed: u64,
}

impl ModelConfig {
    /// Small sensible defaults; callers override what they need.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            dim: 32,
            n_blocks: 2,
            k_memory_blocks: 2,
            n_slots: 16,
            n_heads: 4,
            n_kv_heads: 1,
            d_ff: 128,
            rope_base: 10000.0,
            top_k: None,
            segment_len: 64,
            bank_mode: BankMode::SharedThreaded,
            write_aggregation: WriteAggregation::Attention,
            gate_bias_init: -4.0,
            tie_embeddings: false,
            memory_enabled: true,
            precision: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab_size < 2 {
            return fail(format!("vocab_size must be ≥ 2, got {}", self.vocab_size));
        }
        if self.n_blocks == 0 {
            return fail("n_blocks must be ≥ 1".into());
        }
        if self.k_memory_blocks == 0 || self.k_memory_blocks > self.n_blocks {
            return fail(format!(
                "k_memory_blocks must be in 1..={}, got {}",
                self.n_blocks, self.k_memory_blocks
            ));
        }
        if self.segment_len == 0 {
            return fail("segment_len must be ≥ 1".into());
        }
        if self.n_slots == 0 {
            return fail("n_slots must be ≥ 1".into());
        }
        if self.n_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_heads {} must be a positive multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.dim % self.n_heads != 0 {
            return fail(format!(
                "dim {} not divisible by n_heads {}",
                self.dim, self.n_heads
            ));
        }
        if (self.dim / self.n_heads) % 2 != 0 {
            return fail(format!(
                "head dimension {} must be even (rotary positions)",
                self.dim / self.n_heads
            ));
        }
        if let Some(k) = self.top_k {
            if k == 0 || k > self.n_slots {
                return fail(format!("top_k must be in 1..={}, got {k}", self.n_slots));
            }
        }
        if self.precision != 32 && self.precision != 64 {
            return fail(format!("precision must be 32 or 64, got {}", self.precision));
        }
        Ok(())
    }

    /// Closed-form trainable element count; asserted against the registry.
    pub fn analytic_param_count(&self) -> usize {
        let embed = self.vocab_size * self.dim;
        let head = if self.tie_embeddings {
            0
        } else {
            self.dim * self.vocab_size
        };
        let per_block =
            BlockParams::element_count(self.dim, self.n_heads, self.n_kv_heads, self.d_ff);
        let memory = MemoryParams::element_count(self.dim);
        embed + self.n_blocks * per_block + self.k_memory_blocks * memory + head + self.dim
    }

    fn bank_count(&self) -> usize {
        match self.bank_mode {
            BankMode::SharedThreaded => 1,
            BankMode::PerBlock => self.k_memory_blocks,
        }
    }
}

/// Per-sequence mutable state: bank(s), kv caches, position cursor.
#[derive(Debug, Clone)]
pub struct SequenceState<F: Real> {
    pub banks: Vec<BankState<F>>,
    pub kv: Vec<Option<(Tensor<F>, Tensor<F>)>>,
    pub cursor: usize,
}

/// On-tape mirror of a SequenceState, used while a (possibly multi-segment)
/// differentiable forward is running. Keeping the bank and kv entries as tape
/// vars lets gradients flow across segment boundaries within one sample.
pub struct LiveState {
    banks: Vec<MemoryBank>,
    kv: Vec<Option<(Var, Var)>>,
    cursor: usize,
}

impl LiveState {
    pub fn attach<F: Real>(tape: &mut Tape<F>, state: &SequenceState<F>) -> LiveState {
        LiveState {
            banks: state
                .banks
                .iter()
                .map(|b| MemoryBank::attach(tape, b))
                .collect(),
            kv: state
                .kv
                .iter()
                .map(|entry| {
                    entry.as_ref().map(|(k, v)| {
                        (tape.constant(k.clone()), tape.constant(v.clone()))
                    })
                })
                .collect(),
            cursor: state.cursor,
        }
    }

    pub fn snapshot<F: Real>(&self, tape: &Tape<F>) -> SequenceState<F> {
        SequenceState {
            banks: self.banks.iter().map(|b| b.snapshot(tape)).collect(),
            kv: self
                .kv
                .iter()
                .map(|entry| {
                    entry.map(|(k, v)| (tape.value(k).clone(), tape.value(v).clone()))
                })
                .collect(),
            cursor: self.cursor,
        }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn bank(&self, index: usize) -> &MemoryBank {
        &self.banks[index]
    }
}

/// What one segment forward produces on the tape.
pub struct SegmentOutput {
    pub logits: Var,
    /// Memory read result per block (None for memoryless blocks).
    pub reads: Vec<Option<MemoryReadResult>>,
}

pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub params: ParamSet<F>,
    pub embed: ParamId,
    /// None when embeddings are tied to the head.
    pub head: Option<ParamId>,
    pub final_gain: ParamId,
    pub blocks: Vec<BlockParams>,
}

impl<F: Real> Model<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamSet::new();
        let embed = ps.register(
            "embed",
            Tensor::randn(vec![cfg.vocab_size, cfg.dim], INIT_STD, &mut rng),
            true,
        );
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            blocks.push(BlockParams::init(
                &mut ps,
                &format!("block{b}"),
                cfg.dim,
                cfg.n_heads,
                cfg.n_kv_heads,
                cfg.d_ff,
                cfg.rope_base,
                b < cfg.k_memory_blocks,
                INIT_STD,
                cfg.gate_bias_init,
                &mut rng,
            )?);
        }
        let final_gain = ps.register("final_gain", Tensor::full(vec![cfg.dim], F::one()), false);
        let head = if cfg.tie_embeddings {
            None
        } else {
            Some(ps.register(
                "head",
                Tensor::randn(vec![cfg.dim, cfg.vocab_size], INIT_STD, &mut rng),
                true,
            ))
        };
        Ok(Model { cfg, params: ps, embed, head, final_gain, blocks })
    }

    /// Fresh per-sequence state: identity bank(s), empty caches, cursor 0.
    pub fn new_state(&self) -> SequenceState<F> {
        let banks = if self.cfg.memory_enabled {
            (0..self.cfg.bank_count())
                .map(|_| init_bank(self.cfg.n_slots, self.cfg.dim))
                .collect()
        } else {
            Vec::new()
        };
        SequenceState {
            banks,
            kv: vec![None; self.cfg.n_blocks],
            cursor: 0,
        }
    }

    fn bank_index(&self, block: usize) -> usize {
        match self.cfg.bank_mode {
            BankMode::SharedThreaded => 0,
            BankMode::PerBlock => block,
        }
    }

    /// One segment on an existing tape/live state. Blocks 1..k read the bank
    /// as of segment start; their writes are applied afterwards in block
    /// order. Returns LM-head logits for every position in the segment.
    pub fn forward_segment_live(
        &self,
        tape: &mut Tape<F>,
        ps: &ParamSet<F>,
        live: &mut LiveState,
        tokens: &[u32],
    ) -> Result<SegmentOutput> {
        if tokens.is_empty() {
            return Err(Error::Config("empty token segment".into()));
        }
        if tokens.len() > self.cfg.segment_len {
            return Err(Error::Config(format!(
                "segment of {} tokens exceeds segment_len {}",
                tokens.len(),
                self.cfg.segment_len
            )));
        }
        let embed = tape.param_var(ps, self.embed);
        let mut e = tape.embed_lookup(embed, tokens)?;

        let memory_on = self.cfg.memory_enabled;
        // segment-start bank handles; all reads go against these
        let read_banks: Vec<MemoryBank> = live.banks.clone();
        let mut reads = Vec::with_capacity(self.cfg.n_blocks);
        let mut pending = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let bank_ref = if memory_on && b < self.cfg.k_memory_blocks {
                Some(&read_banks[self.bank_index(b)])
            } else {
                None
            };
            let out = block_forward(
                tape,
                ps,
                block,
                e,
                bank_ref,
                memory_on,
                live.cursor,
                &mut live.kv[b],
                self.cfg.top_k,
                self.cfg.write_aggregation,
            )?;
            e = out.e_next;
            reads.push(out.read);
            if let Some(prop) = out.proposed_update {
                pending.push((b, prop));
            }
        }

        let gain = tape.param_var(ps, self.final_gain);
        let h = tape.rms_norm(e, gain, F::from_f64(RMS_NORM_EPS))?;
        let logits = match self.head {
            Some(head) => {
                let w = tape.param_var(ps, head);
                tape.matmul(h, w)?
            }
            None => {
                let w = tape.param_var(ps, self.embed);
                tape.matmul_tb(h, w)?
            }
        };

        // deferred writes, applied in block order
        for (b, prop) in pending {
            let idx = self.bank_index(b);
            live.banks[idx] = apply_update(tape, &live.banks[idx], &prop)?;
        }
        live.cursor += tokens.len();

        Ok(SegmentOutput { logits, reads })
    }

    /// Convenience wrapper: run one segment against a raw state, advancing it.
    /// Returns the logits and each memory block's read attention (T×N).
    pub fn forward_segment(
        &self,
        state: &mut SequenceState<F>,
        tokens: &[u32],
    ) -> Result<(Tensor<F>, Vec<Option<Tensor<F>>>)> {
        let mut tape = Tape::new();
        let mut live = LiveState::attach(&mut tape, state);
        let out = self.forward_segment_live(&mut tape, &self.params, &mut live, tokens)?;
        let logits = tape.value(out.logits).clone();
        let attn = out
            .reads
            .iter()
            .map(|r| r.as_ref().map(|r| tape.value(r.attn).clone()))
            .collect();
        *state = live.snapshot(&tape);
        Ok((logits, attn))
    }

    /// Multi-segment differentiable loss over one token sequence.
    /// `positions` index into `tokens`; `targets[i]` is the reference id for
    /// the logits at `positions[i]`. Returns the mean cross entropy over all
    /// positions as a scalar var.
    pub fn sequence_loss_live(
        &self,
        tape: &mut Tape<F>,
        ps: &ParamSet<F>,
        live: &mut LiveState,
        tokens: &[u32],
        positions: &[usize],
        targets: &[u32],
    ) -> Result<Var> {
        if positions.len() != targets.len() || positions.is_empty() {
            return Err(Error::Config(
                "loss positions and targets must be nonempty and aligned".into(),
            ));
        }
        let s = self.cfg.segment_len;
        let total = positions.len();
        let mut seg_losses: Vec<(Var, usize)> = Vec::new();
        let mut start = 0;
        while start < tokens.len() {
            let end = (start + s).min(tokens.len());
            let out = self.forward_segment_live(tape, ps, live, &tokens[start..end])?;
            let mut local_pos = Vec::new();
            let mut local_tgt = Vec::new();
            for (p, t) in positions.iter().zip(targets) {
                if *p >= start && *p < end {
                    local_pos.push(*p - start);
                    local_tgt.push(*t);
                }
            }
            if !local_pos.is_empty() {
                let n = local_pos.len();
                let ce = tape.cross_entropy_mean(out.logits, local_pos, local_tgt)?;
                seg_losses.push((ce, n));
            }
            start = end;
        }
        // combine per-segment means into the overall mean
        let mut acc: Option<Var> = None;
        for (ce, n) in seg_losses {
            let scaled = tape.scale(ce, F::from_f64(n as f64 / total as f64));
            acc = Some(match acc {
                Some(a) => tape.add(a, scaled)?,
                None => scaled,
            });
        }
        acc.ok_or_else(|| Error::Config("no loss position fell inside the sequence".into()))
    }

    /// Mean next-token cross entropy over every row of a logits matrix.
    pub fn lm_loss(tape: &mut Tape<F>, logits: Var, targets: &[u32]) -> Result<Var> {
        let rows = tape.value(logits).shape()[0];
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "lm_loss",
                lhs: vec![rows],
                rhs: vec![targets.len()],
            });
        }
        tape.cross_entropy_mean(logits, (0..rows).collect(), targets.to_vec())
    }

    /// Autoregressive decoding. The prompt is consumed in segments of up to
    /// segment_len, then each new token runs as its own single-token segment,
    /// so the bank updates after every decode step.
    pub fn generate(
        &self,
        state: &mut SequenceState<F>,
        prompt: &[u32],
        max_new: usize,
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Config("prompt must be nonempty".into()));
        }
        if max_new == 0 {
            return Err(Error::Config("max_new must be ≥ 1".into()));
        }
        let mut last_row: Option<Vec<F>> = None;
        for chunk in prompt.chunks(self.cfg.segment_len) {
            let (logits, _) = self.forward_segment(state, chunk)?;
            last_row = Some(logits.row(logits.rows() - 1).to_vec());
        }
        let mut out = Vec::with_capacity(max_new);
        for _ in 0..max_new {
            let row = last_row.as_ref().expect("prompt produced logits");
            let token = sample_token(row, mode, rng);
            out.push(token);
            let (logits, _) = self.forward_segment(state, &[token])?;
            last_row = Some(logits.row(0).to_vec());
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodeMode {
    Greedy,
    /// Softmax sampling at the given temperature; τ = 0 degenerates to greedy.
    Temperature(f64),
}

fn sample_token<F: Real>(logits: &[F], mode: DecodeMode, rng: &mut ChaCha8Rng) -> u32 {
    match mode {
        DecodeMode::Greedy => argmax(logits),
        DecodeMode::Temperature(tau) if tau <= 0.0 => argmax(logits),
        DecodeMode::Temperature(tau) => {
            let max = logits
                .iter()
                .map(|v| v.as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = logits
                .iter()
                .map(|v| ((v.as_f64() - max) / tau).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut dart = rng.gen_range(0.0..1.0) * total;
            for (i, w) in weights.iter().enumerate() {
                dart -= w;
                if dart <= 0.0 {
                    return i as u32;
                }
            }
            (weights.len() - 1) as u32
        }
    }
}

/// Lowest index wins ties, so decoding is deterministic.
fn argmax<F: Real>(xs: &[F]) -> u32 {
    let mut best = 0usize;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best as u32
}
