//! Raw numeric kernels shared by the forward and backward passes.
//!
//! All buffers are row-major `f64`. Nothing here touches the graph; the
//! kernels are plain functions so the backward implementations can reuse
//! them directly.

/// C[m,n] += A[m,k] @ B[k,n] when `accumulate`, otherwise overwrite.
pub fn matmul_2d(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_2d_into(a, b, m, k, n, &mut c);
    c
}

pub fn matmul_2d_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    // i-k-j order keeps the inner loop contiguous over B and C rows.
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_ij, b_pj) in c_row.iter_mut().zip(b_row) {
                *c_ij += a_ip * b_pj;
            }
        }
    }
}

/// C[m,n] += A[m,k] @ B[n,k]^T
pub fn matmul_2d_bt_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (a_ip, b_jp) in a_row.iter().zip(b_row) {
                s += a_ip * b_jp;
            }
            c[i * n + j] += s;
        }
    }
}

/// C[k,n] += A[m,k]^T @ B[m,n]
pub fn matmul_2d_at_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, c: &mut [f64]) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (c_pj, b_ij) in c_row.iter_mut().zip(b_row) {
                *c_pj += a_ip * b_ij;
            }
        }
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast-compatible output shape (numpy semantics, right-aligned).
/// Returns `None` when the shapes are incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = if i < ndim - a.len() { 1 } else { a[i - (ndim - a.len())] };
        let db = if i < ndim - b.len() { 1 } else { b[i - (ndim - b.len())] };
        if da != db && da != 1 && db != 1 {
            return None;
        }
        out[i] = da.max(db);
    }
    Some(out)
}

/// Precomputed index map from a broadcast output onto one operand.
///
/// `map[flat_out] = flat_operand`; materializing it once keeps the per-element
/// cost of broadcast ops at a single lookup.
pub fn broadcast_index_map(out_shape: &[usize], operand_shape: &[usize]) -> Vec<usize> {
    let ndim = out_shape.len();
    let mut padded = vec![1usize; ndim];
    let off = ndim - operand_shape.len();
    padded[off..].copy_from_slice(operand_shape);
    let op_strides = strides(&padded);
    let numel: usize = out_shape.iter().product();
    let mut map = vec![0usize; numel];
    let mut coords = vec![0usize; ndim];
    for (flat, entry) in map.iter_mut().enumerate() {
        let mut f = 0;
        for d in 0..ndim {
            let c = if padded[d] == 1 { 0 } else { coords[d] };
            f += c * op_strides[d];
        }
        *entry = f;
        // increment odometer
        let _ = flat;
        for d in (0..ndim).rev() {
            coords[d] += 1;
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    map
}

/// Reduce a gradient over a broadcast output back onto the operand shape.
pub fn reduce_grad_to_shape(grad: &[f64], out_shape: &[usize], operand_shape: &[usize]) -> Vec<f64> {
    let operand_numel: usize = operand_shape.iter().product();
    if grad.len() == operand_numel && out_shape.len() == operand_shape.len() {
        if out_shape == operand_shape {
            return grad.to_vec();
        }
    }
    let map = broadcast_index_map(out_shape, operand_shape);
    let mut out = vec![0.0; operand_numel];
    for (g, &idx) in grad.iter().zip(&map) {
        out[idx] += g;
    }
    out
}

/// In-place numerically stabilized softmax over contiguous rows of width `w`.
pub fn softmax_rows(data: &mut [f64], w: usize) {
    for row in data.chunks_mut(w) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// GELU, tanh approximation. Matches the smooth variant used by BERT-family
/// reference code, so gradients are defined everywhere.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = vec![2.0, -1.0, 0.5, 3.0, 4.0, -2.0, 0.0, 1.0, 7.0];
        assert_eq!(matmul_2d(&eye, &a, 3, 3, 3), a);
    }

    #[test]
    fn broadcast_shapes_align_right() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn broadcast_reduce_roundtrip() {
        // out [2,2] from operand [2]: reducing ones gives row counts.
        let grad = vec![1.0, 2.0, 3.0, 4.0];
        let r = reduce_grad_to_shape(&grad, &[2, 2], &[2]);
        assert_eq!(r, vec![4.0, 6.0]);
    }

    #[test]
    fn softmax_symmetry() {
        let mut d = vec![0.0, 0.0];
        softmax_rows(&mut d, 2);
        assert_eq!(d, vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut d = vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0];
        softmax_rows(&mut d, 3);
        for row in d.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
