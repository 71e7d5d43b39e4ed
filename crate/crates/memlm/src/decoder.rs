//! One memory-augmented decoder block: pre-normalized causal self-attention
//! (multi-head, grouped KV), the memory read/gate/skip path, and a gated
//! feed-forward network.
//!
//! The memory read consumes the block's *input* embeddings; its gated output
//! joins the residual stream after attention:
//!
//!   E_attn = E + attention(norm(E))
//!   E_skip = E_attn + E_gated        (memory enabled)
//!   E_next = E_skip + ffn(norm(E_skip))
//!
//! Bank writes are computed here but applied by the model between segments,
//! so reads only ever see previously written state.

use crate::error::{Error, Result};
use crate::memory::{
    memory_read, propose_update, MemoryBank, MemoryParams, MemoryReadResult, ProposedUpdate,
    WriteAggregation,
};
use crate::numerics::{ParamId, ParamSet, Real, Tape, Var};
use rand::Rng;

pub const RMS_NORM_EPS: f64 = 1e-5;

/// All learnable tensors of one block, as ids into the model's ParamSet.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub attn_gain: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ffn_gain: ParamId,
    pub w_ffn_gate: ParamId,
    pub w_ffn_up: ParamId,
    pub w_ffn_down: ParamId,
    /// Present on the first k blocks.
    pub memory: Option<MemoryParams>,

    pub dim: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub d_ff: usize,
    pub rope_base: f64,
}

impl BlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Real, R: Rng>(
        ps: &mut ParamSet<F>,
        prefix: &str,
        dim: usize,
        n_heads: usize,
        n_kv_heads: usize,
        d_ff: usize,
        rope_base: f64,
        with_memory: bool,
        init_std: f64,
        gate_bias_init: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if n_heads == 0 || n_heads % n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {n_heads} must be a positive multiple of n_kv_heads {n_kv_heads}"
            )));
        }
        if dim % n_heads != 0 {
            return Err(Error::Config(format!(
                "model dim {dim} not divisible by {n_heads} heads"
            )));
        }
        let head_dim = dim / n_heads;
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {head_dim} must be even for rotary positions"
            )));
        }
        let kv_width = n_kv_heads * head_dim;
        use crate::numerics::Tensor;
        let mat = |ps: &mut ParamSet<F>, name: &str, r: usize, c: usize, rng: &mut R| {
            ps.register(
                &format!("{prefix}.{name}"),
                Tensor::randn(vec![r, c], init_std, rng),
                true,
            )
        };
        let attn_gain = ps.register(
            &format!("{prefix}.attn_gain"),
            Tensor::full(vec![dim], F::one()),
            false,
        );
        let w_q = mat(ps, "attn.w_q", dim, dim, rng);
        let w_k = mat(ps, "attn.w_k", dim, kv_width, rng);
        let w_v = mat(ps, "attn.w_v", dim, kv_width, rng);
        let w_o = mat(ps, "attn.w_o", dim, dim, rng);
        let ffn_gain = ps.register(
            &format!("{prefix}.ffn_gain"),
            Tensor::full(vec![dim], F::one()),
            false,
        );
        let w_ffn_gate = mat(ps, "ffn.w_gate", dim, d_ff, rng);
        let w_ffn_up = mat(ps, "ffn.w_up", dim, d_ff, rng);
        let w_ffn_down = mat(ps, "ffn.w_down", d_ff, dim, rng);
        let memory = if with_memory {
            Some(MemoryParams::init(
                ps,
                &format!("{prefix}.mem"),
                dim,
                init_std,
                gate_bias_init,
                rng,
            ))
        } else {
            None
        };
        Ok(BlockParams {
            attn_gain,
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_gain,
            w_ffn_gate,
            w_ffn_up,
            w_ffn_down,
            memory,
            dim,
            n_heads,
            n_kv_heads,
            head_dim,
            d_ff,
            rope_base,
        })
    }

    /// Trainable elements excluding the memory module.
    pub fn element_count(dim: usize, n_heads: usize, n_kv_heads: usize, d_ff: usize) -> usize {
        let kv_width = n_kv_heads * (dim / n_heads);
        dim * dim * 2 + 2 * dim * kv_width + 3 * dim * d_ff + 2 * dim
    }
}

/// Pre-normalized rotary multi-head attention with grouped key/value heads
/// and causal masking; the residual is added inside. With a cache, past
/// keys/values are reused and the cache is extended in place.
pub fn causal_self_attention<F: Real>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    block: &BlockParams,
    e: Var,
    pos_offset: usize,
    kv_cache: &mut Option<(Var, Var)>,
) -> Result<Var> {
    let t_len = tape.value(e).shape()[0];
    let kv_width = block.n_kv_heads * block.head_dim;

    let gain = tape.param_var(ps, block.attn_gain);
    let x = tape.rms_norm(e, gain, F::from_f64(RMS_NORM_EPS))?;

    let w_q = tape.param_var(ps, block.w_q);
    let w_k = tape.param_var(ps, block.w_k);
    let w_v = tape.param_var(ps, block.w_v);
    let q = tape.matmul(x, w_q)?;
    let k_new = tape.matmul(x, w_k)?;
    let v_new = tape.matmul(x, w_v)?;
    let q = tape.rope(q, block.n_heads, pos_offset, block.rope_base)?;
    let k_new = tape.rope(k_new, block.n_kv_heads, pos_offset, block.rope_base)?;

    let (k_all, v_all, past) = match kv_cache.take() {
        Some((ck, cv)) => {
            let cached_shape = tape.value(ck).shape().to_vec();
            if cached_shape.len() != 2 || cached_shape[1] != kv_width {
                return Err(Error::ShapeMismatch {
                    op: "kv_cache",
                    lhs: cached_shape,
                    rhs: vec![pos_offset, kv_width],
                });
            }
            let past = cached_shape[0];
            if past != pos_offset {
                return Err(Error::Config(format!(
                    "kv cache holds {past} positions but pos_offset is {pos_offset}"
                )));
            }
            let k_all = tape.concat_rows(&[ck, k_new])?;
            let v_all = tape.concat_rows(&[cv, v_new])?;
            (k_all, v_all, past)
        }
        None => {
            if pos_offset != 0 {
                return Err(Error::Config(format!(
                    "pos_offset {pos_offset} requires a kv cache"
                )));
            }
            (k_new, v_new, 0)
        }
    };
    *kv_cache = Some((k_all, v_all));
    let total = past + t_len;

    // causal mask over absolute key positions: row t sees keys ≤ past + t
    let mut mask = vec![false; t_len * total];
    for t in 0..t_len {
        for j in 0..=(past + t) {
            mask[t * total + j] = true;
        }
    }

    let group = block.n_heads / block.n_kv_heads;
    let scale = F::from_f64(1.0 / (block.head_dim as f64).sqrt());
    let mut head_outputs = Vec::with_capacity(block.n_heads);
    for h in 0..block.n_heads {
        let q_h = tape.slice_cols(q, h * block.head_dim, block.head_dim)?;
        let kv_h = h / group;
        let k_h = tape.slice_cols(k_all, kv_h * block.head_dim, block.head_dim)?;
        let v_h = tape.slice_cols(v_all, kv_h * block.head_dim, block.head_dim)?;
        let scores = tape.matmul_tb(q_h, k_h)?;
        let scaled = tape.scale(scores, scale);
        let (probs, _) = tape.softmax_rows(scaled, Some(&mask), None)?;
        head_outputs.push(tape.matmul(probs, v_h)?);
    }
    let ctx = tape.concat_cols(&head_outputs)?;
    let w_o = tape.param_var(ps, block.w_o);
    let proj = tape.matmul(ctx, w_o)?;
    tape.add(e, proj)
}

/// Pre-normalized gated FFN with residual: y = x + (silu(x·W_g) ⊙ x·W_u)·W_d.
pub fn swiglu_ffn<F: Real>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    block: &BlockParams,
    e: Var,
) -> Result<Var> {
    let gain = tape.param_var(ps, block.ffn_gain);
    let x = tape.rms_norm(e, gain, F::from_f64(RMS_NORM_EPS))?;
    let w_gate = tape.param_var(ps, block.w_ffn_gate);
    let w_up = tape.param_var(ps, block.w_ffn_up);
    let w_down = tape.param_var(ps, block.w_ffn_down);
    let gated = tape.matmul(x, w_gate)?;
    let gated = tape.silu(gated);
    let up = tape.matmul(x, w_up)?;
    let h = tape.mul(gated, up)?;
    let down = tape.matmul(h, w_down)?;
    tape.add(e, down)
}

#[derive(Debug)]
pub struct BlockOutput {
    pub e_next: Var,
    pub read: Option<MemoryReadResult>,
    /// Deferred bank write; the model applies it after the segment.
    pub proposed_update: Option<ProposedUpdate>,
}

/// Full block: attention, optional memory read + skip, FFN. The bank is only
/// read here; `proposed_update` carries the write for the model to apply.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<F: Real>(
    tape: &mut Tape<F>,
    ps: &ParamSet<F>,
    block: &BlockParams,
    e: Var,
    bank: Option<&MemoryBank>,
    memory_enabled: bool,
    pos_offset: usize,
    kv_cache: &mut Option<(Var, Var)>,
    top_k: Option<usize>,
    agg: WriteAggregation,
) -> Result<BlockOutput> {
    let e_attn = causal_self_attention(tape, ps, block, e, pos_offset, kv_cache)?;
    let (e_skip, read, proposed) = match (&block.memory, bank, memory_enabled) {
        (Some(mp), Some(bank), true) => {
            let read = memory_read(tape, ps, mp, e, bank, top_k)?;
            let skip = tape.add(e_attn, read.e_gated)?;
            let prop = propose_update(tape, ps, mp, e, &read, agg)?;
            (skip, Some(read), Some(prop))
        }
        _ => (e_attn, None, None),
    };
    let e_next = swiglu_ffn(tape, ps, block, e_skip)?;
    Ok(BlockOutput { e_next, read, proposed_update: proposed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{init_bank, BankState, MemoryBank};
    use crate::numerics::{kernels, ParamSet, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_block<F: Real>(
        ps: &mut ParamSet<F>,
        dim: usize,
        with_memory: bool,
        gate_bias: f64,
        seed: u64,
    ) -> BlockParams {
        BlockParams::init(
            ps,
            "blk",
            dim,
            2,
            1,
            dim * 2,
            10000.0,
            with_memory,
            0.15,
            gate_bias,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    fn rand_t<F: Real>(t: usize, d: usize, seed: u64) -> Tensor<F> {
        Tensor::randn(vec![t, d], 0.8, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn single_token_attends_only_to_itself() {
        // T=1, empty cache: softmax over one key puts weight exactly 1 on
        // self, so the context is exactly the value projection.
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, false, 0.0, 1);
        let mut tape = Tape::new();
        let e = tape.leaf(rand_t(1, d, 2), false);
        let mut cache = None;
        let out = causal_self_attention(&mut tape, &ps, &block, e, 0, &mut cache).unwrap();

        // straight-line expected path: ctx == rope'd V == V (position 0)
        let (x, _) = kernels::rms_norm(
            tape.value(e).data(),
            ps.tensor(block.attn_gain).data(),
            1,
            d,
            RMS_NORM_EPS,
        );
        let v = kernels::matmul(&x, ps.tensor(block.w_v).data(), 1, d, block.n_kv_heads * block.head_dim);
        // grouped heads share the single kv head
        let mut ctx = vec![0.0f64; d];
        for h in 0..block.n_heads {
            let kv_h = h / (block.n_heads / block.n_kv_heads);
            ctx[h * block.head_dim..(h + 1) * block.head_dim]
                .copy_from_slice(&v[kv_h * block.head_dim..kv_h * block.head_dim + block.head_dim]);
        }
        let proj = kernels::matmul(&ctx, ps.tensor(block.w_o).data(), 1, d, d);
        for c in 0..d {
            let expect = tape.value(e).at2(0, c) + proj[c];
            assert_eq!(tape.value(out).at2(0, c), expect, "col {c}");
        }
    }

    #[test]
    fn incremental_cache_matches_full_forward() {
        let d = 8;
        let t_total = 8;
        let mut ps = ParamSet::<f32>::new();
        let block = test_block(&mut ps, d, false, 0.0, 3);
        let input = rand_t::<f32>(t_total, d, 4);

        // full pass
        let mut tape = Tape::new();
        let e = tape.leaf(input.clone(), false);
        let mut cache = None;
        let full = causal_self_attention(&mut tape, &ps, &block, e, 0, &mut cache).unwrap();
        let full_out = tape.value(full).clone();

        // token-by-token with cache
        let mut tape2 = Tape::<f32>::new();
        let mut cache2: Option<(Var, Var)> = None;
        let mut rows = Vec::new();
        for t in 0..t_total {
            let row =
                Tensor::new(vec![1, d], input.row(t).to_vec()).unwrap();
            let ev = tape2.leaf(row, false);
            let out =
                causal_self_attention(&mut tape2, &ps, &block, ev, t, &mut cache2).unwrap();
            rows.extend_from_slice(tape2.value(out).data());
        }
        let inc_out = Tensor::new(vec![t_total, d], rows).unwrap();
        assert!(
            full_out.max_abs_diff(&inc_out) < 1e-4,
            "cache equivalence diff {}",
            full_out.max_abs_diff(&inc_out)
        );
    }

    #[test]
    fn causal_mask_is_exact() {
        // perturbing token j leaves every output row i < j bitwise unchanged
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, false, 0.0, 5);
        let base = rand_t::<f64>(6, d, 6);
        let mut perturbed = base.clone();
        let j = 4;
        for c in 0..d {
            let v = perturbed.at2(j, c);
            perturbed.set2(j, c, v + 3.0);
        }

        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let e = tape.leaf(input, false);
            let mut cache = None;
            let out = causal_self_attention(&mut tape, &ps, &block, e, 0, &mut cache).unwrap();
            tape.value(out).clone()
        };
        let a = run(base);
        let b = run(perturbed);
        for i in 0..j {
            assert_eq!(a.row(i), b.row(i), "row {i} changed by future token");
        }
        assert_ne!(a.row(j), b.row(j));
    }

    #[test]
    fn zero_ffn_weights_pass_input_through() {
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, false, 0.0, 7);
        *ps.tensor_mut(block.w_ffn_gate) = Tensor::zeros(vec![d, block.d_ff]);
        *ps.tensor_mut(block.w_ffn_up) = Tensor::zeros(vec![d, block.d_ff]);
        *ps.tensor_mut(block.w_ffn_down) = Tensor::zeros(vec![block.d_ff, d]);
        let mut tape = Tape::new();
        let input = rand_t::<f64>(3, d, 8);
        let e = tape.leaf(input.clone(), false);
        let out = swiglu_ffn(&mut tape, &ps, &block, e).unwrap();
        assert_eq!(tape.value(out), &input);
    }

    #[test]
    fn ffn_shape_is_preserved() {
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, false, 0.0, 9);
        for t in [1, 3, 7] {
            let mut tape = Tape::new();
            let e = tape.leaf(rand_t::<f64>(t, d, 10 + t as u64), false);
            let out = swiglu_ffn(&mut tape, &ps, &block, e).unwrap();
            assert_eq!(tape.value(out).shape(), &[t, d]);
        }
    }

    #[test]
    fn ffn_passes_finite_differences() {
        use crate::numerics::grad_check::grad_check;
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, false, 0.0, 11);
        let input = rand_t::<f64>(2, d, 12);

        let ids: Vec<_> = ps.ids().collect();
        let run = |p: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let e = tape.leaf(input.clone(), false);
            let out = swiglu_ffn(&mut tape, p, &block, e).unwrap();
            let sq = tape.mul(out, out).unwrap();
            let loss = tape.sum_all(sq);
            let value = tape.value(loss).data()[0];
            tape.backward(loss).unwrap();
            let grads: Vec<_> = ids
                .iter()
                .map(|&id| {
                    let v = tape.param_var(p, id);
                    tape.grad_tensor(v)
                })
                .collect();
            (value, grads)
        };
        let (_, grads) = run(&ps);
        let mut loss_fn = |p: &ParamSet<f64>| Ok(run(p).0);
        let report = grad_check(&mut ps, &mut loss_fn, &grads, 1e-5, 1e-4, 13).unwrap();
        assert!(report.pass(), "{}", report.summary());
    }

    #[test]
    fn memory_disabled_equals_vanilla_composition() {
        // with the flag off, the block is bitwise the attention+FFN pipeline,
        // even though memory parameters exist
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, true, 0.0, 14);
        let input = rand_t::<f64>(4, d, 15);
        let bank_state = init_bank::<f64>(4, d);

        let mut tape = Tape::new();
        let bank = MemoryBank::attach(&mut tape, &bank_state);
        let e = tape.leaf(input.clone(), false);
        let mut cache = None;
        let out = block_forward(
            &mut tape, &ps, &block, e, Some(&bank), false, 0, &mut cache, None,
            WriteAggregation::Attention,
        )
        .unwrap();
        assert!(out.read.is_none() && out.proposed_update.is_none());

        let mut tape2 = Tape::new();
        let e2 = tape2.leaf(input, false);
        let mut cache2 = None;
        let attn = causal_self_attention(&mut tape2, &ps, &block, e2, 0, &mut cache2).unwrap();
        let vanilla = swiglu_ffn(&mut tape2, &ps, &block, attn).unwrap();

        assert_eq!(tape.value(out.e_next), tape2.value(vanilla));
    }

    #[test]
    fn closed_gate_block_matches_vanilla_within_f32_resolution() {
        let d = 8;
        let mut ps = ParamSet::<f32>::new();
        let block = test_block(&mut ps, d, true, -40.0, 16);
        let input = rand_t::<f32>(4, d, 17);
        let bank_state = init_bank::<f32>(6, d);

        let run = |enabled: bool| {
            let mut tape = Tape::<f32>::new();
            let bank = MemoryBank::attach(&mut tape, &bank_state);
            let e = tape.leaf(input.clone(), false);
            let mut cache = None;
            let out = block_forward(
                &mut tape, &ps, &block, e, Some(&bank), enabled, 0, &mut cache, None,
                WriteAggregation::Attention,
            )
            .unwrap();
            tape.value(out.e_next).clone()
        };
        let with_mem = run(true);
        let without = run(false);
        assert!(
            with_mem.max_abs_diff(&without) < 1e-5,
            "closed gate diff {}",
            with_mem.max_abs_diff(&without)
        );
    }

    #[test]
    fn block_output_shape_matches_input() {
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, true, -4.0, 18);
        for t in [1, 2, 5] {
            let mut tape = Tape::new();
            let bank = MemoryBank::attach(&mut tape, &init_bank::<f64>(3, d));
            let e = tape.leaf(rand_t::<f64>(t, d, 19 + t as u64), false);
            let mut cache = None;
            let out = block_forward(
                &mut tape, &ps, &block, e, Some(&bank), true, 0, &mut cache, None,
                WriteAggregation::Attention,
            )
            .unwrap();
            assert_eq!(tape.value(out.e_next).shape(), &[t, d]);
        }
    }

    #[test]
    fn whole_block_passes_finite_differences() {
        use crate::numerics::grad_check::grad_check;
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, true, -1.0, 20);
        let input = rand_t::<f64>(3, d, 21);
        let bank_state = BankState {
            m: Tensor::randn(vec![4, d], 0.6, &mut ChaCha8Rng::seed_from_u64(22)),
            version: 0,
        };

        let ids: Vec<_> = ps.ids().collect();
        let run = |p: &ParamSet<f64>| {
            let mut tape = Tape::new();
            let bank = MemoryBank::attach(&mut tape, &bank_state);
            let e = tape.leaf(input.clone(), false);
            let mut cache = None;
            let out = block_forward(
                &mut tape, p, &block, e, Some(&bank), true, 0, &mut cache, None,
                WriteAggregation::Attention,
            )
            .unwrap();
            // touch both the block output and the proposed bank write
            let sq = tape.mul(out.e_next, out.e_next).unwrap();
            let a = tape.sum_all(sq);
            let prop = out.proposed_update.unwrap();
            let cq = tape.mul(prop.candidate, prop.retention).unwrap();
            let b = tape.sum_all(cq);
            let loss = tape.add(a, b).unwrap();
            let value = tape.value(loss).data()[0];
            tape.backward(loss).unwrap();
            let grads: Vec<_> = ids
                .iter()
                .map(|&id| {
                    let v = tape.param_var(p, id);
                    tape.grad_tensor(v)
                })
                .collect();
            (value, grads)
        };
        let (_, grads) = run(&ps);
        let mut loss_fn = |p: &ParamSet<f64>| Ok(run(p).0);
        let report = grad_check(&mut ps, &mut loss_fn, &grads, 1e-5, 1e-3, 23).unwrap();
        assert!(report.pass(), "{}", report.summary());
    }

    #[test]
    fn mismatched_cache_width_is_rejected() {
        let d = 8;
        let mut ps = ParamSet::<f64>::new();
        let block = test_block(&mut ps, d, false, 0.0, 24);
        let mut tape = Tape::new();
        let e = tape.leaf(rand_t::<f64>(2, d, 25), false);
        let bad_k = tape.leaf(Tensor::zeros(vec![3, d * 2]), false);
        let bad_v = tape.leaf(Tensor::zeros(vec![3, d * 2]), false);
        let mut cache = Some((bad_k, bad_v));
        let err =
            causal_self_attention(&mut tape, &ps, &block, e, 3, &mut cache).unwrap_err();
        assert!(err.to_string().contains("kv_cache") || err.to_string().contains("cache"));
    }
}
