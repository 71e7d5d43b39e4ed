//! Raw numeric kernels on flat row-major slices.
//!
//! Everything here is scalar CPU code written so the inner loops run over
//! contiguous rows (the ikj matmul order) and auto-vectorize in release
//! builds. No fusion, no blocking: desk-scale dimensions do not need it.

use super::tensor::Real;

/// out += a @ b, a: m×k, b: k×n, out: m×n.
pub fn matmul_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

pub fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// out += a @ bᵀ, a: m×k, b: n×k, out: m×n. Row-row dot products.
pub fn matmul_tb_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for t in 0..k {
                acc += a_row[t] * b_row[t];
            }
            out_row[j] += acc;
        }
    }
}

pub fn matmul_tb<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    matmul_tb_acc(a, b, &mut out, m, k, n);
    out
}

/// out += aᵀ @ b, a: k×m, b: k×n, out: m×n. Used by matmul backward.
pub fn matmul_ta_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aik = a_row[i];
            let out_row = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

pub fn transpose<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// Overflow-free logistic function.
pub fn sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub fn silu_scalar<F: Real>(x: F) -> F {
    x * sigmoid_scalar(x)
}

/// Row-wise RMS normalization with learned gain:
/// y[r] = gain ⊙ x[r] / sqrt(mean(x[r]²) + eps). Returns (y, inv_rms per row).
pub fn rms_norm<F: Real>(x: &[F], gain: &[F], rows: usize, cols: usize, eps: F) -> (Vec<F>, Vec<F>) {
    let mut out = vec![F::zero(); rows * cols];
    let mut inv_rms = vec![F::zero(); rows];
    let nf = F::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut ms = F::zero();
        for &v in row {
            ms += v * v;
        }
        ms = ms / nf;
        let ir = F::one() / (ms + eps).sqrt();
        inv_rms[r] = ir;
        let out_row = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out_row[c] = row[c] * ir * gain[c];
        }
    }
    (out, inv_rms)
}

/// Row-stabilized softmax over the entries where `active` is true.
/// Inactive entries get exactly zero. A row with no active entries becomes
/// all-zeros and its index is appended to `fully_masked`.
pub fn softmax_rows_masked<F: Real>(
    x: &[F],
    active: &[bool],
    rows: usize,
    cols: usize,
    fully_masked: &mut Vec<usize>,
) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let act = &active[r * cols..(r + 1) * cols];
        let mut max = F::neg_infinity();
        for c in 0..cols {
            if act[c] && row[c] > max {
                max = row[c];
            }
        }
        if max == F::neg_infinity() {
            fully_masked.push(r);
            continue;
        }
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut sum = F::zero();
        for c in 0..cols {
            if act[c] {
                let e = (row[c] - max).exp();
                out_row[c] = e;
                sum += e;
            }
        }
        for c in 0..cols {
            out_row[c] /= sum;
        }
    }
    out
}

/// Marks the k largest entries per row among already-active ones.
/// Ties break toward the lower column index so selection is deterministic.
pub fn top_k_select<F: Real>(x: &[F], active: &mut [bool], rows: usize, cols: usize, k: usize) {
    let mut idx: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let act = &mut active[r * cols..(r + 1) * cols];
        idx.clear();
        idx.extend((0..cols).filter(|&c| act[c]));
        if idx.len() <= k {
            continue;
        }
        idx.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &c in &idx[k..] {
            act[c] = false;
        }
    }
}

/// Rotary rotation applied in place to a T×(heads·head_dim) matrix.
/// Pairs are (2i, 2i+1) within each head; `dir` = -1 applies the inverse
/// rotation (used by the backward pass).
pub fn rope_in_place<F: Real>(
    x: &mut [F],
    seq_len: usize,
    heads: usize,
    head_dim: usize,
    pos_offset: usize,
    base: f64,
    dir: f64,
) {
    debug_assert_eq!(head_dim % 2, 0);
    let width = heads * head_dim;
    debug_assert_eq!(x.len(), seq_len * width);
    let half = head_dim / 2;
    for t in 0..seq_len {
        let pos = (pos_offset + t) as f64;
        for h in 0..heads {
            let off = t * width + h * head_dim;
            for i in 0..half {
                let theta = dir * pos / base.powf(2.0 * i as f64 / head_dim as f64);
                let (sin, cos) = (F::from_f64(theta.sin()), F::from_f64(theta.cos()));
                let a = x[off + 2 * i];
                let b = x[off + 2 * i + 1];
                x[off + 2 * i] = a * cos - b * sin;
                x[off + 2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Per-row log-sum-exp cross entropy at the given row indices.
/// Returns (mean ce over positions, per-row softmax probabilities for those
/// rows, packed in position order).
pub fn cross_entropy_rows<F: Real>(
    logits: &[F],
    vocab: usize,
    positions: &[usize],
    targets: &[u32],
) -> (F, Vec<F>) {
    debug_assert_eq!(positions.len(), targets.len());
    let mut probs = vec![F::zero(); positions.len() * vocab];
    let mut total = F::zero();
    for (pi, (&row, &target)) in positions.iter().zip(targets).enumerate() {
        let lr = &logits[row * vocab..(row + 1) * vocab];
        let mut max = F::neg_infinity();
        for &v in lr {
            if v > max {
                max = v;
            }
        }
        let mut sum = F::zero();
        let pr = &mut probs[pi * vocab..(pi + 1) * vocab];
        for c in 0..vocab {
            let e = (lr[c] - max).exp();
            pr[c] = e;
            sum += e;
        }
        for p in pr.iter_mut() {
            *p /= sum;
        }
        let lse = max + sum.ln();
        total += lse - lr[target as usize];
    }
    let mean = total / F::from_f64(positions.len() as f64);
    (mean, probs)
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let mut acc = F::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_exact() {
        // I·X == X exactly in 64-bit.
        let x = vec![3.0f64, 4.0, 5.0, 6.0];
        let i = vec![1.0f64, 0.0, 0.0, 1.0];
        assert_eq!(matmul(&i, &x, 2, 2, 2), x);
    }

    #[test]
    fn matmul_hand_checked() {
        // [[1,2]]·[[3],[4]] = [[11]]
        let out = matmul(&[1.0f64, 2.0], &[3.0, 4.0], 1, 2, 1);
        assert_eq!(out, vec![11.0]);
    }

    #[test]
    fn matmul_tb_matches_explicit_transpose() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2×3
        let b = vec![0.5f64, -1.0, 2.0, 1.5, 0.0, -2.0]; // 2×3
        let bt = transpose(&b, 2, 3); // 3×2
        assert_eq!(matmul_tb(&a, &b, 2, 3, 2), matmul(&a, &bt, 2, 3, 2));
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid_scalar(40.0f32), 1.0);
        assert!(sigmoid_scalar(-40.0f32) > 0.0);
        assert!(sigmoid_scalar(-40.0f32) < 1e-15);
        assert!(sigmoid_scalar(1e9f32).is_finite());
        assert!(sigmoid_scalar(-1e9f32).is_finite());
    }

    #[test]
    fn softmax_uniform_and_extreme() {
        let mut fm = Vec::new();
        let out = softmax_rows_masked(&[0.0f64, 0.0, 0.0], &[true; 3], 1, 3, &mut fm);
        for v in &out {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let out = softmax_rows_masked(&[1e9f64, 0.0, 0.0], &[true; 3], 1, 3, &mut fm);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!(out[1] < 1e-12 && out[2] < 1e-12);
        assert!(fm.is_empty());
    }

    #[test]
    fn softmax_fully_masked_row_is_zero_with_diagnostic() {
        let mut fm = Vec::new();
        let out = softmax_rows_masked(&[1.0f64, 2.0], &[false, false], 1, 2, &mut fm);
        assert_eq!(out, vec![0.0, 0.0]);
        assert_eq!(fm, vec![0]);
    }

    #[test]
    fn top_k_keeps_largest_with_deterministic_ties() {
        let x = vec![3.0f64, 1.0, 2.0];
        let mut act = vec![true; 3];
        top_k_select(&x, &mut act, 1, 3, 2);
        assert_eq!(act, vec![true, false, true]);

        // tie: both 5.0 — lower index wins
        let x = vec![5.0f64, 5.0, 4.0];
        let mut act = vec![true; 3];
        top_k_select(&x, &mut act, 1, 3, 1);
        assert_eq!(act, vec![true, false, false]);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let orig: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let mut x = orig.clone();
        rope_in_place(&mut x, 1, 2, 4, 0, 10000.0, 1.0);
        assert_eq!(x, orig);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let orig: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let mut x = orig.clone();
        rope_in_place(&mut x, 2, 2, 4, 7, 10000.0, 1.0);
        for t in 0..2 {
            for h in 0..2 {
                for i in 0..2 {
                    let off = t * 8 + h * 4 + 2 * i;
                    let n0 = (orig[off].powi(2) + orig[off + 1].powi(2)).sqrt();
                    let n1 = (x[off].powi(2) + x[off + 1].powi(2)).sqrt();
                    assert!((n0 - n1).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn rope_dot_depends_only_on_relative_position() {
        // dot(q_i, k_j) after rotation is a function of i−j.
        let mut rng = 0x12345u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        };
        let q: Vec<f64> = (0..8).map(|_| next()).collect();
        let k: Vec<f64> = (0..8).map(|_| next()).collect();

        let dot_at = |qi: usize, kj: usize| {
            let mut qbuf = vec![0.0f64; (qi + 1) * 8];
            let mut kbuf = vec![0.0f64; (kj + 1) * 8];
            qbuf[qi * 8..].copy_from_slice(&q);
            kbuf[kj * 8..].copy_from_slice(&k);
            rope_in_place(&mut qbuf, qi + 1, 1, 8, 0, 10000.0, 1.0);
            rope_in_place(&mut kbuf, kj + 1, 1, 8, 0, 10000.0, 1.0);
            dot(&qbuf[qi * 8..], &kbuf[kj * 8..])
        };

        assert!((dot_at(2, 1) - dot_at(5, 4)).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_matches_direct_evaluation() {
        let logits = vec![0.2f64, -0.3, 1.1, 0.5, 2.0, -1.0, 0.0, 0.7];
        let (ce, _) = cross_entropy_rows(&logits, 4, &[0, 1], &[2, 0]);
        // independent straight-line recomputation
        let mut expect = 0.0;
        for (row, tgt) in [(0usize, 2usize), (1, 0)] {
            let lr = &logits[row * 4..(row + 1) * 4];
            let z: f64 = lr.iter().map(|v| v.exp()).sum();
            expect += z.ln() - lr[tgt];
        }
        expect /= 2.0;
        assert!((ce - expect).abs() < 1e-12);
    }
}
