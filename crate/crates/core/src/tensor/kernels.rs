//! Row-major f64 kernels shared by the tape and the inference path.
//!
//! Every output row of a product depends only on the matching input row, so
//! results do not change with how a batch is chunked.

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: the asserts above bound every index the strided access can touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = a[m×k] · b[k×n]`
pub(crate) fn matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, 0.0, c);
}

/// `c += a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_a_bt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, k as isize, 1, b, 1, k as isize, 1.0, c);
}

/// `c += a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_at_b_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, 1, m as isize, b, n as isize, 1, 1.0, c);
}

pub(crate) fn add_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn relu(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v <= 0.0 {
            *v = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
            }
        }
        c
    }

    fn filled(len: usize, salt: f64) -> Vec<f64> {
        (0..len).map(|i| (i as f64 * 0.37 + salt).sin()).collect()
    }

    #[test]
    fn products_agree_with_naive_loops() {
        let (m, k, n) = (5, 7, 3);
        let a = filled(m * k, 0.1);
        let b = filled(k * n, 0.9);
        let mut c = vec![0.0; m * n];
        matmul(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(naive(m, k, n, &a, &b)) {
            assert!((x - y).abs() < 1e-12);
        }

        // a · bᵀ with b stored n×k
        let bt: Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![0.0; m * n];
        matmul_a_bt_acc(m, k, n, &a, &bt, &mut c2);
        for (x, y) in c2.iter().zip(&c) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ · b with a stored k×m
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c3 = vec![1.0; m * n];
        matmul_at_b_acc(m, k, n, &at, &b, &mut c3);
        for (x, y) in c3.iter().zip(&c) {
            assert!((x - (y + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn rows_are_independent_of_batch_size() {
        let (m, k, n) = (13, 301, 37);
        let a = filled(m * k, 0.3);
        let b = filled(k * n, 0.7);
        let mut full = vec![0.0; m * n];
        matmul(m, k, n, &a, &b, &mut full);
        for i in 0..m {
            let mut one = vec![0.0; n];
            matmul(1, k, n, &a[i * k..(i + 1) * k], &b, &mut one);
            let same = one
                .iter()
                .zip(&full[i * n..(i + 1) * n])
                .all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "row {i} differs when computed alone");
        }
    }
}
