//! Plain-slice numeric kernels.
//!
//! Both the tape ops and the no-gradient network forwards call these, so the
//! two paths produce bit-identical values (same operations in the same order).

/// `out[i,j] = sum_k x[i,k] * w[k,j] (+ b[j])` for row-major inputs.
pub fn matmul_bias(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    batch: usize,
    d_in: usize,
    d_out: usize,
) -> Vec<f64> {
    let mut out = match b {
        Some(bias) => {
            let mut o = Vec::with_capacity(batch * d_out);
            for _ in 0..batch {
                o.extend_from_slice(bias);
            }
            o
        }
        None => vec![0.0; batch * d_out],
    };
    for i in 0..batch {
        let xi = &x[i * d_in..(i + 1) * d_in];
        let oi = &mut out[i * d_out..(i + 1) * d_out];
        for (k, &xik) in xi.iter().enumerate() {
            if xik == 0.0 {
                continue; // one-hot / relu inputs are sparse
            }
            let wk = &w[k * d_out..(k + 1) * d_out];
            for j in 0..d_out {
                oi[j] += xik * wk[j];
            }
        }
    }
    out
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn tanh(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| v.tanh()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Euclidean norm of each row of a `[rows, cols]` matrix.
pub fn row_norms(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| l2_norm(&x[i * cols..(i + 1) * cols]))
        .collect()
}

/// Norm of column `j` of a row-major `[rows, cols]` matrix.
pub fn column_norm(m: &[f64], rows: usize, cols: usize, j: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..rows {
        let v = m[i * cols + j];
        acc += v * v;
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_example() {
        // x=[[1,2]], W=[[1,3],[2,4]], b=[1,1] -> [[6,12]]
        let out = matmul_bias(
            &[1.0, 2.0],
            &[1.0, 3.0, 2.0, 4.0],
            Some(&[1.0, 1.0]),
            1,
            2,
            2,
        );
        assert_eq!(out, vec![6.0, 12.0]);
    }

    #[test]
    fn relu_clamps_negatives() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
    }

    #[test]
    fn column_norm_picks_column() {
        // [[3, 1], [4, 1]] -> col 0 norm 5
        let m = [3.0, 1.0, 4.0, 1.0];
        assert_eq!(column_norm(&m, 2, 2, 0), 5.0);
    }
}
