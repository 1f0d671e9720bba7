//! Dense row-major f64 matrices and the handful of kernels the rest of the
//! crate is built on. Everything downstream (tape, model, training) works in
//! 64-bit; checkpoints convert to f32 at the file boundary.

use rand::Rng;

/// Row-major 2-D tensor. Vectors are represented as `1 x n` or `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "shape/data mismatch");
        Tensor { rows, cols, data }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(std * normal_sample(rng));
        }
        Tensor { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// self += other, elementwise.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert!(self.same_shape(other), "shape mismatch in add_assign");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// self += scale * other, elementwise.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert!(self.same_shape(other), "shape mismatch in add_scaled");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// C = A (m x k) * B (k x n).
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dim mismatch");
    let mut c = Tensor::zeros(a.rows, b.cols);
    matmul_acc(a, b, &mut c, 1.0);
    c
}

/// C += scale * A * B. The k loop is unrolled four wide so each pass over a
/// C row amortizes four B rows; the loop body is memory-bound, not flop-bound.
pub fn matmul_acc(a: &Tensor, b: &Tensor, c: &mut Tensor, scale: f64) {
    assert_eq!(a.cols, b.rows);
    assert_eq!(c.rows, a.rows);
    assert_eq!(c.cols, b.cols);
    let n = b.cols;
    let k_dim = a.cols;
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        let mut k = 0;
        while k + 4 <= k_dim {
            let s0 = scale * a_row[k];
            let s1 = scale * a_row[k + 1];
            let s2 = scale * a_row[k + 2];
            let s3 = scale * a_row[k + 3];
            if s0 == 0.0 && s1 == 0.0 && s2 == 0.0 && s3 == 0.0 {
                k += 4;
                continue;
            }
            let (b0, rest) = b.data[k * n..].split_at(n);
            let (b1, rest) = rest.split_at(n);
            let (b2, rest) = rest.split_at(n);
            let b3 = &rest[..n];
            for (j, cv) in c_row.iter_mut().enumerate() {
                *cv += s0 * b0[j] + s1 * b1[j] + s2 * b2[j] + s3 * b3[j];
            }
            k += 4;
        }
        for (kk, &aik) in a_row.iter().enumerate().skip(k) {
            if aik == 0.0 {
                continue;
            }
            let s = scale * aik;
            let b_row = &b.data[kk * n..(kk + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += s * bv;
            }
        }
    }
}

/// Dot product with eight independent accumulators; the fixed lane order
/// keeps results deterministic while letting the loop vectorize.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let off = c * 8;
        for l in 0..8 {
            acc[l] += a[off + l] * b[off + l];
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// C = A (m x k) * B^T where B is (n x k).
pub fn matmul_trans_b(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_trans_b inner dim mismatch");
    let mut c = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        for j in 0..b.rows {
            c.data[i * b.rows + j] = dot(a_row, b.row(j));
        }
    }
    c
}

/// C = A^T * B with A stored (k x m) and B (k x n).
/// Four A rows are folded per pass over each C row.
pub fn matmul_trans_a(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_trans_a inner dim mismatch");
    let m = a.cols;
    let n = b.cols;
    let mut c = Tensor::zeros(m, n);
    let mut k = 0;
    while k + 4 <= a.rows {
        let (a0, arest) = a.data[k * m..].split_at(m);
        let (a1, arest) = arest.split_at(m);
        let (a2, arest) = arest.split_at(m);
        let a3 = &arest[..m];
        let (b0, brest) = b.data[k * n..].split_at(n);
        let (b1, brest) = brest.split_at(n);
        let (b2, brest) = brest.split_at(n);
        let b3 = &brest[..n];
        for i in 0..m {
            let (s0, s1, s2, s3) = (a0[i], a1[i], a2[i], a3[i]);
            if s0 == 0.0 && s1 == 0.0 && s2 == 0.0 && s3 == 0.0 {
                continue;
            }
            let c_row = c.row_mut(i);
            for (j, cv) in c_row.iter_mut().enumerate() {
                *cv += s0 * b0[j] + s1 * b1[j] + s2 * b2[j] + s3 * b3[j];
            }
        }
        k += 4;
    }
    for kk in k..a.rows {
        let a_row = a.row(kk);
        let b_row = b.row(kk);
        for (i, &aki) in a_row.iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            let c_row = c.row_mut(i);
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
    c
}

/// Numerically stable logistic function; saturates cleanly at +/- infinity.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// In-place softmax over a slice.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax per row.
pub fn row_softmax(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Forward KL D(p || q) in nats with both distributions floored before logs.
pub fn kl_divergence(p: &[f64], q: &[f64], floor: f64) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut kl = 0.0;
    for (&pv, &qv) in p.iter().zip(q) {
        if pv > 0.0 {
            kl += pv * (pv.max(floor).ln() - qv.max(floor).ln());
        }
    }
    kl
}

/// Box-Muller standard normal draw.
pub fn normal_sample(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draw an index from an unnormalized weight vector.
pub fn sample_categorical(probs: &[f64], rng: &mut impl Rng) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = matmul(&a, &b);
        assert_eq!(c.data, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_trans_variants_agree() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        use rand::SeedableRng;
        let a = Tensor::randn(4, 5, 1.0, &mut rng);
        let b = Tensor::randn(6, 5, 1.0, &mut rng);
        // A * B^T via explicit transpose
        let mut bt = Tensor::zeros(5, 6);
        for i in 0..6 {
            for j in 0..5 {
                bt.set(j, i, b.at(i, j));
            }
        }
        let c1 = matmul(&a, &bt);
        let c2 = matmul_trans_b(&a, &b);
        assert!(c1.max_abs_diff(&c2) < 1e-12);

        let x = Tensor::randn(5, 4, 1.0, &mut rng);
        let y = Tensor::randn(5, 3, 1.0, &mut rng);
        let mut xt = Tensor::zeros(4, 5);
        for i in 0..5 {
            for j in 0..4 {
                xt.set(j, i, x.at(i, j));
            }
        }
        let c3 = matmul(&xt, &y);
        let c4 = matmul_trans_a(&x, &y);
        assert!(c3.max_abs_diff(&c4) < 1e-12);
    }

    #[test]
    fn softmax_rows_normalize() {
        let t = Tensor::from_vec(2, 3, vec![0.0, 1.0, 2.0, -5.0, 0.0, 5.0]);
        let s = row_softmax(&t);
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_saturates() {
        assert_eq!(sigmoid(f64::INFINITY), 1.0);
        assert_eq!(sigmoid(f64::NEG_INFINITY), 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_hand_case() {
        // p = [1, 0], q = [0.5, 0.5] -> ln 2
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5], 1e-12);
        assert!((kl - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
