//! Explicit memory bank: slot storage, the cross-attention read path, the
//! input/forget/output gates, and the slot update recurrence.
//!
//! Shapes, with T tokens, N slots, model dim d:
//!   read:   Q = E·W_Q (T×d), K = M·W_K, V = M·W_V (N×d)
//!           A = softmax(Q·Kᵀ/√d) (T×N), E_mem = A·V (T×d)
//!           g_out = σ(E_mem·W_out + b_out), E_gated = g_out ⊙ E_mem
//!   write:  g_in = σ(E·W_in), g_forget = σ(E_mem·W_forget)   (both T×d)
//!           Ŵ[r,t] = A[t,r] / max(Σ_t A[t,r], ε)              (N×T)
//!           candidate = Ŵ·(g_in ⊙ tanh(E_mem)), G_f = Ŵ·g_forget
//!           M' = candidate + G_f ⊙ M
//!
//! Ŵ maps token-space gate outputs into slot space by reusing the read
//! alignment; at T = 1 it degenerates to Ŵ ≡ 1 and the update becomes the
//! plain per-slot recurrence M' = g_in ⊙ tanh(E_mem) + g_forget ⊙ M.
//! Slots that receive no attention mass (possible under top-k) get
//! candidate = 0 and G_f = 0, i.e. they are cleared; this is documented
//! behavior of the ε guard, not an error.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamSet, Real, SoftmaxDiag, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const WRITE_WEIGHT_EPS: f64 = 1e-8;

/// How token-space write values are aggregated into slot space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WriteAggregation {
    /// Column-normalized transpose of the read attention (default).
    Attention,
    /// Uniform 1/T pooling over tokens, kept for ablation.
    MeanPool,
}

/// Raw (off-tape) snapshot of a bank: the slot matrix plus a version counter
/// that increments on every applied update.
#[derive(Debug, Clone, PartialEq)]
pub struct BankState<F: Real> {
    pub m: Tensor<F>,
    pub version: u64,
}

/// Slot matrix with N == d starts as the identity; otherwise row r is the
/// one-hot e_{r mod d}, cycling the identity rows.
pub fn init_bank<F: Real>(num_slots: usize, dim: usize) -> BankState<F> {
    BankState {
        m: Tensor::identity_rows(num_slots, dim),
        version: 0,
    }
}

/// On-tape handle to a bank's current slot matrix.
#[derive(Debug, Clone, Copy)]
pub struct MemoryBank {
    pub m: Var,
    pub num_slots: usize,
    pub dim: usize,
    pub version: u64,
}

impl MemoryBank {
    /// Put a raw bank state on the tape as a non-trainable leaf.
    pub fn attach<F: Real>(tape: &mut Tape<F>, state: &BankState<F>) -> MemoryBank {
        let num_slots = state.m.rows();
        let dim = state.m.cols();
        MemoryBank {
            m: tape.constant(state.m.clone()),
            num_slots,
            dim,
            version: state.version,
        }
    }

    /// Read the current slot matrix back off the tape.
    pub fn snapshot<F: Real>(&self, tape: &Tape<F>) -> BankState<F> {
        BankState {
            m: tape.value(self.m).clone(),
            version: self.version,
        }
    }
}

/// Per-block memory parameters: four read-path tensors and two write gates.
#[derive(Debug, Clone)]
pub struct MemoryParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub w_in: ParamId,
    pub w_forget: ParamId,
}

impl MemoryParams {
    /// Registers all seven tensors under `prefix`. `gate_bias_init` fills
    /// b_out; −4 starts the output gate nearly closed (σ(−4) ≈ 0.018) so the
    /// model begins near-vanilla, 0 recovers the bias-free form.
    pub fn init<F: Real, R: Rng>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        dim: usize,
        init_std: f64,
        gate_bias_init: f64,
        rng: &mut R,
    ) -> Self {
        let mat = |ps: &mut ParamSet<F>, name: &str, rng: &mut R| {
            ps.register(
                &format!("{prefix}.{name}"),
                Tensor::randn(vec![dim, dim], init_std, rng),
                true,
            )
        };
        let w_q = mat(ps, "w_q", rng);
        let w_k = mat(ps, "w_k", rng);
        let w_v = mat(ps, "w_v", rng);
        let w_out = mat(ps, "w_out", rng);
        let b_out = ps.register(
            &format!("{prefix}.b_out"),
            Tensor::full(vec![dim], F::from_f64(gate_bias_init)),
            false,
        );
        let w_in = mat(ps, "w_in", rng);
        let w_forget = mat(ps, "w_forget", rng);
        MemoryParams { w_q, w_k, w_v, w_out, b_out, w_in, w_forget }
    }

    pub fn param_ids(&self) -> [ParamId; 7] {
        [self.w_q, self.w_k, self.w_v, self.w_out, self.b_out, self.w_in, self.w_forget]
    }

    /// Trainable element count: 6d² + d.
    pub fn element_count(dim: usize) -> usize {
        6 * dim * dim + dim
    }
}

/// Everything memory_read produces, kept for the write phase and inspection.
#[derive(Debug, Clone)]
pub struct MemoryReadResult {
    /// A·V, the retrieved content (T×d).
    pub e_mem: Var,
    /// Cross-attention alignment between tokens and slots (T×N).
    pub attn: Var,
    /// g_out ⊙ E_mem, what the skip connection adds (T×d).
    pub e_gated: Var,
    /// Output gate activations (T×d), entries in (0,1).
    pub g_out: Var,
    pub bank_version: u64,
    pub diag: SoftmaxDiag,
}

/// Cross-attention read over the bank, plus the gated output.
pub fn memory_read<F: Real>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    mp: &MemoryParams,
    e: Var,
    bank: &MemoryBank,
    top_k: Option<usize>,
) -> Result<MemoryReadResult> {
    let width = tape.value(e).shape().get(1).copied().unwrap_or(0);
    if tape.value(e).shape().len() != 2 || width != bank.dim {
        return Err(Error::ShapeMismatch {
            op: "memory_read",
            lhs: tape.value(e).shape().to_vec(),
            rhs: vec![bank.num_slots, bank.dim],
        });
    }
    let w_q = tape.param_var(ps, mp.w_q);
    let w_k = tape.param_var(ps, mp.w_k);
    let w_v = tape.param_var(ps, mp.w_v);
    let q = tape.matmul(e, w_q)?;
    let k = tape.matmul(bank.m, w_k)?;
    let v = tape.matmul(bank.m, w_v)?;
    let scores = tape.matmul_tb(q, k)?;
    let scaled = tape.scale(scores, F::from_f64(1.0 / (bank.dim as f64).sqrt()));
    let (attn, diag) = tape.softmax_rows(scaled, None, top_k)?;
    let e_mem = tape.matmul(attn, v)?;

    let w_out = tape.param_var(ps, mp.w_out);
    let b_out = tape.param_var(ps, mp.b_out);
    let pre = tape.matmul(e_mem, w_out)?;
    let pre = tape.add_bias(pre, b_out)?;
    let g_out = tape.sigmoid(pre);
    let e_gated = tape.mul(g_out, e_mem)?;

    Ok(MemoryReadResult {
        e_mem,
        attn,
        e_gated,
        g_out,
        bank_version: bank.version,
        diag,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    /// σ(x·W_in); filters what gets written. Applied to the block input E.
    Input,
    /// σ(x·W_forget); scales slot retention. Applied to E_mem.
    Forget,
    /// σ(x·W_out + b_out); scales retrieved content. Applied to E_mem.
    Output,
}

/// Sigmoid of the affine map selected by `kind`; all outputs in (0,1).
pub fn gate<F: Real>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    mp: &MemoryParams,
    kind: GateKind,
    x: Var,
) -> Result<Var> {
    let pre = match kind {
        GateKind::Input => {
            let w = tape.param_var(ps, mp.w_in);
            tape.matmul(x, w)?
        }
        GateKind::Forget => {
            let w = tape.param_var(ps, mp.w_forget);
            tape.matmul(x, w)?
        }
        GateKind::Output => {
            let w = tape.param_var(ps, mp.w_out);
            let b = tape.param_var(ps, mp.b_out);
            let p = tape.matmul(x, w)?;
            tape.add_bias(p, b)?
        }
    };
    Ok(tape.sigmoid(pre))
}

/// Slot-space update computed from a read, not yet applied to any bank.
#[derive(Debug, Clone, Copy)]
pub struct ProposedUpdate {
    /// Ŵ·(g_in ⊙ tanh(E_mem)) (N×d), every entry in (−1,1).
    pub candidate: Var,
    /// Ŵ·g_forget (N×d), the per-slot retention factor, entries in (0,1).
    pub retention: Var,
    /// Version of the bank the source read was taken against.
    pub read_version: u64,
}

/// Compute the write-phase quantities from a read. The proposal can be held
/// and applied later (the segment protocol defers all writes to segment end).
pub fn propose_update<F: Real>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    mp: &MemoryParams,
    e_t: Var,
    read: &MemoryReadResult,
    agg: WriteAggregation,
) -> Result<ProposedUpdate> {
    let g_in = gate(tape, ps, mp, GateKind::Input, e_t)?;
    let g_forget = gate(tape, ps, mp, GateKind::Forget, read.e_mem)?;
    let bounded = tape.tanh(read.e_mem);
    let write_vals = tape.mul(g_in, bounded)?;

    let (t_len, _) = {
        let s = tape.value(e_t).shape();
        (s[0], s[1])
    };
    let w_hat = match agg {
        WriteAggregation::Attention => {
            let at = tape.transpose(read.attn)?;
            tape.normalize_rows(at, F::from_f64(WRITE_WEIGHT_EPS))?
        }
        WriteAggregation::MeanPool => {
            let n = tape.value(read.attn).shape()[1];
            let uniform = Tensor::full(vec![n, t_len], F::from_f64(1.0 / t_len as f64));
            tape.constant(uniform)
        }
    };
    let candidate = tape.matmul(w_hat, write_vals)?;
    let retention = tape.matmul(w_hat, g_forget)?;
    Ok(ProposedUpdate {
        candidate,
        retention,
        read_version: read.bank_version,
    })
}

/// M' = candidate + retention ⊙ M against the bank's *current* matrix.
/// No staleness check: the segment protocol intentionally chains proposals
/// from several blocks onto one bank. Use `memory_update` for the strict
/// read-then-write path.
pub fn apply_update<F: Real>(
    tape: &mut Tape<F>,
    bank: &MemoryBank,
    prop: &ProposedUpdate,
) -> Result<MemoryBank> {
    let kept = tape.mul(prop.retention, bank.m)?;
    let m_next = tape.add(prop.candidate, kept)?;
    Ok(MemoryBank {
        m: m_next,
        num_slots: bank.num_slots,
        dim: bank.dim,
        version: bank.version + 1,
    })
}

/// Strict read-modify-write: the read must have been produced against this
/// bank's current state.
pub fn memory_update<F: Real>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    mp: &MemoryParams,
    bank: &MemoryBank,
    e_t: Var,
    read: &MemoryReadResult,
    agg: WriteAggregation,
) -> Result<MemoryBank> {
    if read.bank_version != bank.version {
        return Err(Error::MemoryState(format!(
            "stale read: produced against bank version {}, bank is at {}",
            read.bank_version, bank.version
        )));
    }
    let prop = propose_update(tape, ps, mp, e_t, read, agg)?;
    apply_update(tape, bank, &prop)
}
