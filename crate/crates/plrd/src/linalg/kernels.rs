//! Matrix-product kernels.
//!
//! Each product has a sequential kernel and (behind the `parallel` feature) a
//! rayon kernel that splits the *output rows* across threads. A given output
//! element is always accumulated by one thread in ascending inner-index
//! order, so both kernels produce bitwise identical results.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// out[i][j] += sum_k a[i][k] * b[k][j], k ascending.
#[inline]
fn mul_row(a_row: &[f64], b: &[f64], b_cols: usize, out_row: &mut [f64]) {
    for (k, &aik) in a_row.iter().enumerate() {
        let b_row = &b[k * b_cols..(k + 1) * b_cols];
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aik * bkj;
        }
    }
}

/// out[i][j] += sum_k a[i][k] * b[j][k], k ascending (b used transposed).
#[inline]
fn mul_row_tb(a_row: &[f64], b: &[f64], b_rows: usize, k_dim: usize, out_row: &mut [f64]) {
    for j in 0..b_rows {
        let b_row = &b[j * k_dim..(j + 1) * k_dim];
        let mut acc = 0.0;
        for (&aik, &bjk) in a_row.iter().zip(b_row) {
            acc += aik * bjk;
        }
        out_row[j] += acc;
    }
}

/// out[i][j] += sum_k a[k][i] * b[k][j], k ascending (a used transposed).
#[inline]
fn mul_row_ta(i: usize, a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_cols: usize, out_row: &mut [f64]) {
    for k in 0..a_rows {
        let aki = a[k * a_cols + i];
        let b_row = &b[k * b_cols..(k + 1) * b_cols];
        for (o, &bkj) in out_row.iter_mut().zip(b_row) {
            *o += aki * bkj;
        }
    }
}

pub fn matmul_seq(a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_cols: usize, out: &mut [f64]) {
    for (i, out_row) in out.chunks_mut(b_cols).enumerate() {
        mul_row(&a[i * a_cols..(i + 1) * a_cols], b, b_cols, out_row);
    }
    let _ = a_rows;
}

#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_cols: usize, out: &mut [f64]) {
    out.par_chunks_mut(b_cols).enumerate().for_each(|(i, out_row)| {
        mul_row(&a[i * a_cols..(i + 1) * a_cols], b, b_cols, out_row);
    });
    let _ = a_rows;
}

pub fn matmul_tb_seq(a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_rows: usize, out: &mut [f64]) {
    for (i, out_row) in out.chunks_mut(b_rows).enumerate() {
        mul_row_tb(&a[i * a_cols..(i + 1) * a_cols], b, b_rows, a_cols, out_row);
    }
    let _ = a_rows;
}

#[cfg(feature = "parallel")]
pub fn matmul_tb_par(a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_rows: usize, out: &mut [f64]) {
    out.par_chunks_mut(b_rows).enumerate().for_each(|(i, out_row)| {
        mul_row_tb(&a[i * a_cols..(i + 1) * a_cols], b, b_rows, a_cols, out_row);
    });
    let _ = a_rows;
}

pub fn matmul_ta_seq(a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_cols: usize, out: &mut [f64]) {
    for (i, out_row) in out.chunks_mut(b_cols).enumerate() {
        mul_row_ta(i, a, b, a_rows, a_cols, b_cols, out_row);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_ta_par(a: &[f64], b: &[f64], a_rows: usize, a_cols: usize, b_cols: usize, out: &mut [f64]) {
    out.par_chunks_mut(b_cols).enumerate().for_each(|(i, out_row)| {
        mul_row_ta(i, a, b, a_rows, a_cols, b_cols, out_row);
    });
}

/// Order-preserving map, parallel when the feature is enabled.
pub(crate) fn map_ordered<I, O, F>(items: Vec<I>, f: F) -> Vec<O>
where
    I: Send,
    O: Send,
    F: Fn(I) -> O + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

#[cfg(all(test, feature = "parallel"))]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn par_kernels_bitwise_match_seq() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(m, k, n) in &[(1usize, 1usize, 1usize), (3, 5, 2), (17, 9, 33), (64, 64, 64)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let bt: Vec<f64> = (0..n * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();

            let mut s = vec![0.0; m * n];
            let mut p = vec![0.0; m * n];
            matmul_seq(&a, &b, m, k, n, &mut s);
            matmul_par(&a, &b, m, k, n, &mut p);
            assert_eq!(s, p, "matmul {m}x{k}x{n}");

            let mut s = vec![0.0; m * n];
            let mut p = vec![0.0; m * n];
            matmul_tb_seq(&a, &bt, m, k, n, &mut s);
            matmul_tb_par(&a, &bt, m, k, n, &mut p);
            assert_eq!(s, p, "matmul_tb {m}x{k}x{n}");

            let mut s = vec![0.0; k * n];
            let mut p = vec![0.0; k * n];
            matmul_ta_seq(&a, &c, m, k, n, &mut s);
            matmul_ta_par(&a, &c, m, k, n, &mut p);
            assert_eq!(s, p, "matmul_ta {m}x{k}x{n}");
        }
    }
}
