//! Inspection tooling for memory behavior: cross-attention heatmap export,
//! slot relevance ranking, and test-time memory-delta tracking.
//!
//! Everything here is observation-only: captures run against a clone of the
//! sequence state, so exporting never perturbs subsequent computation.

use crate::error::{Error, Result};
use crate::model::{Model, SequenceState};
use crate::numerics::{kernels, Real};
use crate::tasks::{Sample, Vocab};
use std::io::Write;
use std::path::Path;

/// Cross-attention grid for one block over a probe token sequence.
#[derive(Debug, Clone)]
pub struct HeatmapExport {
    pub block: usize,
    /// Decode steps the state had consumed when the capture ran.
    pub step_index: usize,
    pub row_labels: Vec<String>,
    /// Slot indices, ascending.
    pub col_labels: Vec<usize>,
    /// T×N attention values, row-major, f64.
    pub matrix: Vec<f64>,
    pub normalization: &'static str,
}

impl HeatmapExport {
    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.matrix[r * self.cols() + c]
    }

    /// Sum of |a − b| over all cells.
    pub fn l1_distance(&self, other: &HeatmapExport) -> f64 {
        assert_eq!(self.matrix.len(), other.matrix.len());
        self.matrix
            .iter()
            .zip(&other.matrix)
            .map(|(a, b)| (a - b).abs())
            .sum()
    }
}

/// Run the probe tokens through a clone of `state` and capture the requested
/// block's read attention, stacked across segments.
pub fn capture_heatmap<F: Real>(
    model: &Model<F>,
    state: &SequenceState<F>,
    tokens: &[u32],
    block: usize,
    vocab: &Vocab,
) -> Result<HeatmapExport> {
    if !model.cfg.memory_enabled || block >= model.cfg.k_memory_blocks {
        return Err(Error::Config(format!(
            "block {block} has no memory module (k = {}, memory_enabled = {})",
            model.cfg.k_memory_blocks, model.cfg.memory_enabled
        )));
    }
    let step_index = state.cursor;
    let mut scratch = state.clone();
    let mut matrix: Vec<f64> = Vec::with_capacity(tokens.len() * model.cfg.n_slots);
    for chunk in tokens.chunks(model.cfg.segment_len) {
        let (_, attn) = model.forward_segment(&mut scratch, chunk)?;
        let a = attn[block]
            .as_ref()
            .expect("memory block produces attention");
        matrix.extend(a.data().iter().map(|v| v.as_f64()));
    }
    let row_labels = tokens
        .iter()
        .map(|&t| vocab.token(t).map(|s| s.to_string()))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatmapExport {
        block,
        step_index,
        row_labels,
        col_labels: (0..model.cfg.n_slots).collect(),
        matrix,
        normalization: "softmax_rows",
    })
}

/// Plain-text grid: first line the column labels, then one line per token:
/// token string, tab, N decimal values.
pub fn write_heatmap(export: &HeatmapExport, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let header: Vec<String> = export.col_labels.iter().map(|c| format!("slot{c}")).collect();
    writeln!(f, "{}", header.join("\t"))?;
    for (r, label) in export.row_labels.iter().enumerate() {
        let row: Vec<String> = (0..export.cols())
            .map(|c| format!("{:.6}", export.at(r, c)))
            .collect();
        writeln!(f, "{label}\t{}", row.join("\t"))?;
    }
    Ok(())
}

/// Capture and write in one call.
pub fn export_heatmap<F: Real>(
    model: &Model<F>,
    state: &SequenceState<F>,
    tokens: &[u32],
    block: usize,
    path: &Path,
    vocab: &Vocab,
) -> Result<HeatmapExport> {
    let export = capture_heatmap(model, state, tokens, block, vocab)?;
    write_heatmap(&export, path)?;
    Ok(export)
}

/// Relevance summary for one slot over a probe set.
#[derive(Debug, Clone)]
pub struct SlotReport {
    pub slot: usize,
    /// Mean over probe tokens (and memory blocks) of A[t,r]·‖V[r]‖₂.
    pub relevance: f64,
    /// Strongest-attending probe tokens, (token, weight), best first.
    pub top_tokens: Vec<(String, f64)>,
    /// Fraction of negative entries in the slot's final bank row.
    pub negative_fraction: f64,
}

/// Rank slots by mean attention-weighted read contribution over a probe set.
/// Returns (top_m by relevance, bottom_m by relevance); ties break toward the
/// lower slot index.
pub fn rank_slots<F: Real>(
    model: &Model<F>,
    probe: &[Sample],
    top_m: usize,
    vocab: &Vocab,
) -> Result<(Vec<SlotReport>, Vec<SlotReport>)> {
    if probe.is_empty() {
        return Err(Error::Config("empty probe set".into()));
    }
    if !model.cfg.memory_enabled {
        return Err(Error::Config("model has no memory enabled".into()));
    }
    let n = model.cfg.n_slots;
    if top_m > n {
        return Err(Error::Config(format!("top_m {top_m} exceeds {n} slots")));
    }

    let mut relevance_sum = vec![0.0f64; n];
    let mut weight_count = 0usize;
    let mut best_token: Vec<Vec<(String, f64)>> = vec![Vec::new(); n];
    let mut neg_sum = vec![0.0f64; n];
    let mut neg_count = 0usize;

    for sample in probe {
        let tokens = sample.prompt();
        let mut state = model.new_state();
        let mut consumed = 0usize;
        while consumed < tokens.len() {
            let end = (consumed + model.cfg.segment_len).min(tokens.len());
            let chunk = &tokens[consumed..end];
            // per-block value norms against the segment-start bank
            let mut v_norms: Vec<Vec<f64>> = Vec::with_capacity(model.cfg.k_memory_blocks);
            for b in 0..model.cfg.k_memory_blocks {
                let bank_idx = match model.cfg.bank_mode {
                    crate::model::BankMode::SharedThreaded => 0,
                    crate::model::BankMode::PerBlock => b,
                };
                let m = &state.banks[bank_idx].m;
                let w_v = model
                    .params
                    .tensor(model.blocks[b].memory.as_ref().unwrap().w_v);
                let v = kernels::matmul(
                    m.data(),
                    w_v.data(),
                    n,
                    model.cfg.dim,
                    model.cfg.dim,
                );
                v_norms.push(
                    (0..n)
                        .map(|r| {
                            let row = &v[r * model.cfg.dim..(r + 1) * model.cfg.dim];
                            row.iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
                        })
                        .collect(),
                );
            }
            let (_, attn) = model.forward_segment(&mut state, chunk)?;
            for b in 0..model.cfg.k_memory_blocks {
                let a = attn[b].as_ref().expect("memory block attention");
                for (t, &tok) in chunk.iter().enumerate() {
                    for r in 0..n {
                        let w = a.at2(t, r).as_f64();
                        relevance_sum[r] += w * v_norms[b][r];
                        let name = vocab.token(tok)?;
                        keep_top_token(&mut best_token[r], name, w);
                    }
                }
                weight_count += chunk.len();
            }
            consumed = end;
        }
        // sign profile from the final bank state
        for bank in &state.banks {
            for r in 0..n {
                let row = bank.m.row(r);
                let neg = row.iter().filter(|v| v.as_f64() < 0.0).count();
                neg_sum[r] += neg as f64 / row.len() as f64;
            }
            neg_count += 1;
        }
    }

    let reports: Vec<SlotReport> = (0..n)
        .map(|r| SlotReport {
            slot: r,
            relevance: relevance_sum[r] / weight_count.max(1) as f64,
            top_tokens: best_token[r].clone(),
            negative_fraction: neg_sum[r] / neg_count.max(1) as f64,
        })
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        reports[b]
            .relevance
            .partial_cmp(&reports[a].relevance)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let top: Vec<SlotReport> = order[..top_m].iter().map(|&r| reports[r].clone()).collect();
    let bottom: Vec<SlotReport> = order[n - top_m..]
        .iter()
        .rev()
        .map(|&r| reports[r].clone())
        .collect();
    Ok((top, bottom))
}

const TOP_TOKENS_PER_SLOT: usize = 5;

fn keep_top_token(best: &mut Vec<(String, f64)>, token: &str, weight: f64) {
    if let Some(entry) = best.iter_mut().find(|(t, _)| t == token) {
        if weight > entry.1 {
            entry.1 = weight;
        }
    } else {
        best.push((token.to_string(), weight));
    }
    best.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    best.truncate(TOP_TOKENS_PER_SLOT);
}

/// Line-delimited slot records.
pub fn write_slot_reports(top: &[SlotReport], bottom: &[SlotReport], path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (group, reports) in [("top", top), ("bottom", bottom)] {
        for r in reports {
            let tokens: Vec<String> = r
                .top_tokens
                .iter()
                .map(|(t, w)| format!("{t}:{w:.4}"))
                .collect();
            writeln!(
                f,
                "{group}\tslot={}\trelevance={:.6e}\tneg_frac={:.4}\ttokens={}",
                r.slot,
                r.relevance,
                r.negative_fraction,
                tokens.join(",")
            )?;
        }
    }
    Ok(())
}

/// Per-slot L1 distances between two states' banks.
#[derive(Debug, Clone)]
pub struct MemoryDelta {
    /// (bank index, slot index, L1 distance), in bank/slot order.
    pub per_slot: Vec<(usize, usize, f64)>,
    /// Same triples sorted by distance, largest first.
    pub top_changed: Vec<(usize, usize, f64)>,
}

impl MemoryDelta {
    pub fn total(&self) -> f64 {
        self.per_slot.iter().map(|(_, _, d)| d).sum()
    }
}

pub fn memory_delta<F: Real>(
    before: &SequenceState<F>,
    after: &SequenceState<F>,
) -> Result<MemoryDelta> {
    if before.banks.len() != after.banks.len() {
        return Err(Error::ShapeMismatch {
            op: "memory_delta",
            lhs: vec![before.banks.len()],
            rhs: vec![after.banks.len()],
        });
    }
    let mut per_slot = Vec::new();
    for (bi, (a, b)) in before.banks.iter().zip(&after.banks).enumerate() {
        if a.m.shape() != b.m.shape() {
            return Err(Error::ShapeMismatch {
                op: "memory_delta",
                lhs: a.m.shape().to_vec(),
                rhs: b.m.shape().to_vec(),
            });
        }
        for r in 0..a.m.rows() {
            let l1: f64 = a
                .m
                .row(r)
                .iter()
                .zip(b.m.row(r))
                .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
                .sum();
            per_slot.push((bi, r, l1));
        }
    }
    let mut top_changed = per_slot.clone();
    top_changed.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal));
    Ok(MemoryDelta { per_slot, top_changed })
}

pub fn write_memory_delta(delta: &MemoryDelta, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for (bank, slot, l1) in &delta.per_slot {
        writeln!(f, "bank={bank}\tslot={slot}\tl1={l1:.6e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{
        gate, memory_read, memory_update, BankState, GateKind, MemoryBank, MemoryParams,
        WriteAggregation,
    };
    use crate::model::ModelConfig;
    use crate::numerics::{ParamSet, Tape, Tensor};
    use crate::tasks::{gen_recall, TaskKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn probe_model(n_slots: usize, seed: u64) -> Model<f64> {
        let vocab = Vocab::synthetic();
        let mut cfg = ModelConfig::toy(vocab.len());
        cfg.dim = 8;
        cfg.n_blocks = 2;
        cfg.k_memory_blocks = 1;
        cfg.n_slots = n_slots;
        cfg.n_heads = 2;
        cfg.n_kv_heads = 1;
        cfg.d_ff = 16;
        cfg.gate_bias_init = 0.0;
        cfg.precision = 64;
        cfg.seed = seed;
        Model::new(cfg).unwrap()
    }

    fn probe_samples(n: usize) -> Vec<Sample> {
        let vocab = Vocab::synthetic();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..n)
            .map(|_| gen_recall(&mut rng, &vocab, 2, 6, None).unwrap())
            .collect()
    }

    #[test]
    fn exported_rows_sum_to_one() {
        let vocab = Vocab::synthetic();
        let model = probe_model(6, 1);
        let state = model.new_state();
        let tokens = probe_samples(1)[0].prompt();
        let export = capture_heatmap(&model, &state, &tokens, 0, &vocab).unwrap();
        assert_eq!(export.rows(), tokens.len());
        assert_eq!(export.cols(), 6);
        for r in 0..export.rows() {
            let s: f64 = (0..export.cols()).map(|c| export.at(r, c)).sum();
            assert!((s - 1.0).abs() < 1e-5, "row {r} sums to {s}");
        }
    }

    #[test]
    fn single_slot_heatmap_is_all_ones_column() {
        let vocab = Vocab::synthetic();
        let model = probe_model(1, 2);
        let state = model.new_state();
        let export = capture_heatmap(&model, &state, &[1, 20, 30], 0, &vocab).unwrap();
        assert_eq!(export.cols(), 1);
        for r in 0..export.rows() {
            assert_eq!(export.at(r, 0), 1.0);
        }
    }

    #[test]
    fn memoryless_block_is_a_configuration_error() {
        let vocab = Vocab::synthetic();
        let model = probe_model(4, 3);
        let state = model.new_state();
        let err = capture_heatmap(&model, &state, &[1, 2], 1, &vocab).unwrap_err();
        assert!(err.to_string().contains("no memory module"), "{err}");
    }

    #[test]
    fn capture_is_observation_only() {
        let vocab = Vocab::synthetic();
        let model = probe_model(5, 4);
        let tokens = probe_samples(1)[0].prompt();

        // logits with no capture at all
        let mut clean = model.new_state();
        let (logits_clean, _) = model.forward_segment(&mut clean, &tokens).unwrap();

        // capture first, then the same forward
        let mut observed = model.new_state();
        let snapshot = observed.clone();
        capture_heatmap(&model, &observed, &tokens, 0, &vocab).unwrap();
        assert_eq!(observed.cursor, snapshot.cursor);
        assert_eq!(observed.banks[0].m, snapshot.banks[0].m);
        let (logits_after, _) = model.forward_segment(&mut observed, &tokens).unwrap();
        assert_eq!(logits_clean, logits_after);
    }

    #[test]
    fn adaptation_moves_the_heatmap() {
        let vocab = Vocab::synthetic();
        let mut model = probe_model(6, 5);
        // fresh-init projections are ~0.02 scale and read nearly uniformly;
        // scale them up to trained-like magnitudes so attention is informative
        let mp = model.blocks[0].memory.clone().unwrap();
        for id in [mp.w_q, mp.w_k, mp.w_v] {
            for v in model.params.tensor_mut(id).data_mut() {
                *v *= 30.0;
            }
        }
        let sample = &probe_samples(1)[0];
        let probe = sample.prompt();

        let mut state = model.new_state();
        let before = capture_heatmap(&model, &state, &probe, 0, &vocab).unwrap();
        // eight decode steps adapt the bank
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        model
            .generate(&mut state, &probe, 8, crate::model::DecodeMode::Greedy, &mut rng)
            .unwrap();
        let after = capture_heatmap(&model, &state, &probe, 0, &vocab).unwrap();
        let l1 = before.l1_distance(&after);
        assert!(l1 > 0.01, "memory did not adapt: L1 {l1}");
        assert!(after.step_index > before.step_index);
    }

    #[test]
    fn heatmap_file_format_is_the_documented_grid() {
        let vocab = Vocab::synthetic();
        let model = probe_model(3, 6);
        let state = model.new_state();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heatmap.tsv");
        let export = export_heatmap(&model, &state, &[1, 20], 0, &path, &vocab).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + export.rows());
        assert_eq!(lines[0], "slot0\tslot1\tslot2");
        let first: Vec<&str> = lines[1].split('\t').collect();
        assert_eq!(first.len(), 1 + 3);
        assert_eq!(first[0], vocab.token(1).unwrap());
    }

    #[test]
    fn zero_projections_tie_every_slot_and_rank_by_index() {
        let vocab = Vocab::synthetic();
        let mut model = probe_model(4, 7);
        let mp = model.blocks[0].memory.clone().unwrap();
        for id in [mp.w_q, mp.w_k, mp.w_v] {
            let shape = model.params.tensor(id).shape().to_vec();
            *model.params.tensor_mut(id) = Tensor::zeros(shape);
        }
        let probe = probe_samples(2);
        let (top, bottom) = rank_slots(&model, &probe, 4, &vocab).unwrap();
        for w in top.windows(2) {
            assert!((w[0].relevance - w[1].relevance).abs() < 1e-6);
        }
        // tie-break: ascending slot index
        let order: Vec<usize> = top.iter().map(|r| r.slot).collect();
        assert_eq!(order, vec![0, 1, 2, 3]);
        assert_eq!(bottom.len(), 4);
    }

    #[test]
    fn relevance_is_invariant_to_probe_order() {
        let vocab = Vocab::synthetic();
        let model = probe_model(5, 8);
        let probe = probe_samples(4);
        let mut reversed = probe.clone();
        reversed.reverse();
        let (top_a, _) = rank_slots(&model, &probe, 5, &vocab).unwrap();
        let (top_b, _) = rank_slots(&model, &reversed, 5, &vocab).unwrap();
        for (a, b) in top_a.iter().zip(&top_b) {
            assert_eq!(a.slot, b.slot);
            assert!((a.relevance - b.relevance).abs() < 1e-9);
        }
    }

    #[test]
    fn relevance_is_permutation_equivariant() {
        // permuting the initial bank rows permutes the scores
        let vocab = Vocab::synthetic();
        let model = probe_model(8, 9); // n_slots == dim → identity bank, distinct rows
        let probe = probe_samples(2);

        let scores = |model: &Model<f64>, perm: Option<&[usize]>| -> Vec<f64> {
            let n = model.cfg.n_slots;
            let mut rel = vec![0.0; n];
            let mut count = 0usize;
            for sample in &probe {
                let tokens = sample.prompt();
                let mut state = model.new_state();
                if let Some(p) = perm {
                    let orig = state.banks[0].m.clone();
                    for (dst, &src) in p.iter().enumerate() {
                        for c in 0..model.cfg.dim {
                            state.banks[0].m.set2(dst, c, orig.at2(src, c));
                        }
                    }
                }
                let mut consumed = 0;
                while consumed < tokens.len() {
                    let end = (consumed + model.cfg.segment_len).min(tokens.len());
                    let m = state.banks[0].m.clone();
                    let w_v = model
                        .params
                        .tensor(model.blocks[0].memory.as_ref().unwrap().w_v);
                    let v = kernels::matmul(m.data(), w_v.data(), n, 8, 8);
                    let (_, attn) = model.forward_segment(&mut state, &tokens[consumed..end]).unwrap();
                    let a = attn[0].as_ref().unwrap();
                    for t in 0..end - consumed {
                        for r in 0..n {
                            let norm: f64 = v[r * 8..(r + 1) * 8]
                                .iter()
                                .map(|x| x * x)
                                .sum::<f64>()
                                .sqrt();
                            rel[r] += a.at2(t, r) * norm;
                        }
                    }
                    count += end - consumed;
                    consumed = end;
                }
            }
            rel.iter().map(|r| r / count as f64).collect()
        };

        let base = scores(&model, None);
        let perm = [5usize, 2, 7, 0, 3, 6, 1, 4];
        let permuted = scores(&model, Some(&perm));
        for (dst, &src) in perm.iter().enumerate() {
            assert!(
                (permuted[dst] - base[src]).abs() < 1e-9,
                "slot {dst} (from {src}): {} vs {}",
                permuted[dst],
                base[src]
            );
        }
    }

    #[test]
    fn identical_states_have_zero_delta_and_delta_is_symmetric() {
        let model = probe_model(4, 10);
        let a = model.new_state();
        let delta = memory_delta(&a, &a.clone()).unwrap();
        assert!(delta.per_slot.iter().all(|(_, _, d)| *d == 0.0));

        let mut b = model.new_state();
        model.forward_segment(&mut b, &[1, 20, 21]).unwrap();
        let ab = memory_delta(&a, &b).unwrap();
        let ba = memory_delta(&b, &a).unwrap();
        for (x, y) in ab.per_slot.iter().zip(&ba.per_slot) {
            assert_eq!(x.2, y.2);
        }
        assert!(ab.total() > 0.0);
    }

    #[test]
    fn forced_write_changes_exactly_the_attended_slots() {
        // one informative slot in an otherwise-zero bank, identity read
        // projections, open input gate, top-1 read: only the attended slot
        // receives content, every zero-mass slot stays exactly zero
        let d = 4;
        let n = 5;
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mp = MemoryParams::init(&mut ps, "mem", d, 0.3, 0.0, &mut rng);
        *ps.tensor_mut(mp.w_in) = Tensor::full(vec![d, d], 50.0); // g_in → 1
        for id in [mp.w_q, mp.w_k, mp.w_v] {
            *ps.tensor_mut(id) = Tensor::identity_rows(d, d);
        }

        let mut tape = Tape::new();
        // slot 0 holds content, so it scores positive against an all-ones
        // query and wins the top-1 selection with a nonzero E_mem
        let mut m0 = Tensor::zeros(vec![n, d]);
        for c in 0..d {
            m0.set2(0, c, 0.5);
        }
        let bank0 = BankState { m: m0, version: 0 };
        let bank = MemoryBank::attach(&mut tape, &bank0);
        let e = tape.leaf(Tensor::full(vec![1, d], 1.0), false);
        let read = memory_read(&mut tape, &ps, &mp, e, &bank, Some(1)).unwrap();
        let next = memory_update(
            &mut tape, &ps, &mp, &bank, e, &read, WriteAggregation::Attention,
        )
        .unwrap();

        let attended: Vec<usize> = (0..n)
            .filter(|&r| tape.value(read.attn).at2(0, r) > 0.0)
            .collect();
        assert_eq!(attended.len(), 1, "top-1 read should attend one slot");

        let m_next = tape.value(next.m);
        for r in 0..n {
            let changed = m_next.row(r) != bank0.m.row(r);
            assert_eq!(
                changed,
                attended.contains(&r),
                "slot {r}: changed={changed}, attended={:?}",
                attended
            );
        }
        // sanity: the update used a genuinely open input gate
        let mut t2 = Tape::new();
        let ev = t2.leaf(Tensor::full(vec![1, d], 1.0), false);
        let g = gate(&mut t2, &ps, &mp, GateKind::Input, ev).unwrap();
        assert!(t2.value(g).data().iter().all(|&v| v > 0.999));
    }

    #[test]
    fn trained_free_top_slot_attends_content_words() {
        // with concentrated attention (trained models), the top slot's token
        // list includes the key or value — here emulate by probing an
        // untrained model and just checking report structure
        let vocab = Vocab::synthetic();
        let model = probe_model(4, 12);
        let probe = probe_samples(3);
        let (top, bottom) = rank_slots(&model, &probe, 2, &vocab).unwrap();
        assert_eq!(top.len(), 2);
        assert_eq!(bottom.len(), 2);
        for r in top.iter().chain(&bottom) {
            assert!(r.relevance >= 0.0);
            assert!(!r.top_tokens.is_empty());
            assert!((0.0..=1.0).contains(&r.negative_fraction));
        }
        let kinds: Vec<TaskKind> = probe.iter().map(|s| s.kind).collect();
        assert!(kinds.iter().all(|k| *k == TaskKind::Recall));
    }
}
