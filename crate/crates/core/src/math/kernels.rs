//! Value-level kernels shared by the tape and by the public tensor API.

use super::{Real, Tensor, RMS_EPS};
use crate::error::{Error, Result};

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, T> {
    pub data: &'a [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn dense(data: &'a [T], cols: usize) -> Self {
        View {
            data,
            off: 0,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a dense row-major `rows x cols` matrix.
    pub fn dense_t(data: &'a [T], cols: usize) -> Self {
        View {
            data,
            off: 0,
            rs: 1,
            cs: cols,
        }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows > 0 && cols > 0 {
            let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// Strided mutable output matrix.
pub(crate) struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> ViewMut<'a, T> {
    pub fn dense(data: &'a mut [T], cols: usize) -> Self {
        ViewMut {
            data,
            off: 0,
            rs: cols,
            cs: 1,
        }
    }
}

/// `c <- alpha * a(m x k) b(k x n) + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: ViewMut<'_, T>,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c.off + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "output view out of bounds");
    // SAFETY: every view was bounds-checked above; `c` is uniquely borrowed.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

fn as_matrix<T: Real>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension(format!(
            "{what} must be 2-D, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// Standard matrix product `a(m x k) * b(k x n)`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (k2, n) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        View::dense(a.data(), k),
        View::dense(b.data(), n),
        T::zero(),
        ViewMut::dense(&mut out, n),
    );
    Tensor::new(vec![m, n], out)
}

/// `a(m x k) * b(n x k)^T`, the layout of a linear layer with `(out, in)` weights.
pub fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = as_matrix(a, "matmul lhs")?;
    let (n, k2) = as_matrix(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_nt inner extents differ: {:?} x {:?}^T",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        m,
        k,
        n,
        T::one(),
        View::dense(a.data(), k),
        View::dense_t(b.data(), k),
        T::zero(),
        ViewMut::dense(&mut out, n),
    );
    Tensor::new(vec![m, n], out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    let inv = T::one() / total;
    for v in row.iter_mut() {
        *v = *v * inv;
    }
}

pub(crate) fn log_softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    let log_z = max + total.ln();
    for v in row.iter_mut() {
        *v = *v - log_z;
    }
}

/// Softmax over the last axis, with max subtraction.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols() == 0 {
        return Err(Error::Dimension("softmax over an empty axis".into()));
    }
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub fn log_softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.cols() == 0 {
        return Err(Error::Dimension("log-softmax over an empty axis".into()));
    }
    let mut out = x.clone();
    let c = out.cols();
    for row in out.data_mut().chunks_mut(c) {
        log_softmax_in_place(row);
    }
    Ok(out)
}

/// Returns `(y, inv_rms)` where `y = x * inv_rms * gain` row-wise.
pub(crate) fn rms_norm_forward<T: Real>(x: &[T], gain: &[T], cols: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::c(RMS_EPS);
    let n = T::c(cols as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut inv = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, yr) in x.chunks(cols).zip(y.chunks_mut(cols)) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / n;
        let r = T::one() / (ms + eps).sqrt();
        for ((o, &xv), &g) in yr.iter_mut().zip(xr).zip(gain) {
            *o = xv * r * g;
        }
        inv.push(r);
    }
    (y, inv)
}

/// RMS normalisation over the last axis followed by an elementwise gain.
pub fn rms_norm<T: Real>(x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
    if gain.len() != x.cols() {
        return Err(Error::Dimension(format!(
            "rms_norm gain has {} entries, last axis is {}",
            gain.len(),
            x.cols()
        )));
    }
    let (y, _) = rms_norm_forward(x.data(), gain.data(), x.cols());
    Tensor::new(x.shape().to_vec(), y)
}

/// Mean negative log-likelihood of `targets` over the positions where `mask` is true.
pub fn cross_entropy_loss<T: Real>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: &[bool],
) -> Result<T> {
    let rows = logits.rows();
    let vocab = logits.cols();
    if targets.len() != rows || mask.len() != rows {
        return Err(Error::Dimension(format!(
            "{rows} logit rows but {} targets / {} mask flags",
            targets.len(),
            mask.len()
        )));
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        if t >= vocab {
            return Err(Error::Index(format!("target {t} outside vocabulary of {vocab}")));
        }
        let mut row = logits.row(i).to_vec();
        log_softmax_in_place(&mut row);
        total -= row[t].f64();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Argument("cross entropy over zero positions".into()));
    }
    let loss = T::c(total / count as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite { op: "cross_entropy_loss" });
    }
    Ok(loss)
}

/// Rotary embedding over `(rows, heads * head_dim)` activations; pairs are
/// adjacent coordinates `(2p, 2p + 1)` within each head. `sign = -1` applies
/// the inverse rotation.
pub(crate) fn rope_rotate<T: Real>(
    x: &mut [T],
    positions: &[usize],
    heads: usize,
    head_dim: usize,
    base: f64,
    sign: f64,
) {
    let width = heads * head_dim;
    let half = head_dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|p| base.powf(-2.0 * p as f64 / head_dim as f64))
        .collect();
    for (row, &pos) in x.chunks_mut(width).zip(positions) {
        if pos == 0 {
            continue;
        }
        for (p, &f) in freqs.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = (sign * angle).sin_cos();
            let (s, c) = (T::c(s), T::c(c));
            for h in 0..heads {
                let i = h * head_dim + 2 * p;
                let (a, b) = (row[i], row[i + 1]);
                row[i] = a * c - b * s;
                row[i + 1] = a * s + b * c;
            }
        }
    }
}

/// Geometry of one grouped-query causal attention call.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct AttnShape {
    pub heads_q: usize,
    pub heads_kv: usize,
    pub head_dim: usize,
    pub q_rows: usize,
    pub k_rows: usize,
    /// Absolute position of query row 0. Key row `j` sits at position `j`.
    pub offset: usize,
}

impl AttnShape {
    fn visible(&self, i: usize) -> usize {
        (self.offset + i + 1).min(self.k_rows)
    }

    fn group(&self) -> usize {
        self.heads_q / self.heads_kv
    }
}

/// Returns `(out, probs)`; `probs` is `heads_q x q_rows x k_rows` with zeros
/// on masked entries.
pub(crate) fn attention_forward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>) {
    let qw = s.heads_q * s.head_dim;
    let kw = s.heads_kv * s.head_dim;
    let scale = T::c(1.0 / (s.head_dim as f64).sqrt());
    let plane = s.q_rows * s.k_rows;
    let mut probs = vec![T::zero(); s.heads_q * plane];
    let mut out = vec![T::zero(); s.q_rows * qw];
    for h in 0..s.heads_q {
        let g = h / s.group();
        let p = &mut probs[h * plane..(h + 1) * plane];
        gemm(
            s.q_rows,
            s.head_dim,
            s.k_rows,
            scale,
            View { data: q, off: h * s.head_dim, rs: qw, cs: 1 },
            View { data: k, off: g * s.head_dim, rs: 1, cs: kw },
            T::zero(),
            ViewMut::dense(p, s.k_rows),
        );
        for (i, row) in p.chunks_mut(s.k_rows).enumerate() {
            let vis = s.visible(i);
            softmax_in_place(&mut row[..vis]);
            row[vis..].iter_mut().for_each(|x| *x = T::zero());
        }
        gemm(
            s.q_rows,
            s.k_rows,
            s.head_dim,
            T::one(),
            View::dense(p, s.k_rows),
            View { data: v, off: g * s.head_dim, rs: kw, cs: 1 },
            T::zero(),
            ViewMut { data: &mut out, off: h * s.head_dim, rs: qw, cs: 1 },
        );
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` of attention given the saved probabilities.
pub(crate) fn attention_backward<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let qw = s.heads_q * s.head_dim;
    let kw = s.heads_kv * s.head_dim;
    let scale = T::c(1.0 / (s.head_dim as f64).sqrt());
    let plane = s.q_rows * s.k_rows;
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut ds = vec![T::zero(); plane];
    for h in 0..s.heads_q {
        let g = h / s.group();
        let p = &probs[h * plane..(h + 1) * plane];
        // dP = dO_h V_g^T
        gemm(
            s.q_rows,
            s.head_dim,
            s.k_rows,
            T::one(),
            View { data: dout, off: h * s.head_dim, rs: qw, cs: 1 },
            View { data: v, off: g * s.head_dim, rs: 1, cs: kw },
            T::zero(),
            ViewMut::dense(&mut ds, s.k_rows),
        );
        // dV_g += P^T dO_h
        gemm(
            s.k_rows,
            s.q_rows,
            s.head_dim,
            T::one(),
            View::dense_t(p, s.k_rows),
            View { data: dout, off: h * s.head_dim, rs: qw, cs: 1 },
            T::one(),
            ViewMut { data: &mut dv, off: g * s.head_dim, rs: kw, cs: 1 },
        );
        for (i, (dsr, pr)) in ds.chunks_mut(s.k_rows).zip(p.chunks(s.k_rows)).enumerate() {
            let vis = s.visible(i);
            let dot: T = dsr[..vis].iter().zip(&pr[..vis]).map(|(&a, &b)| a * b).sum();
            for (d, &pp) in dsr[..vis].iter_mut().zip(&pr[..vis]) {
                *d = pp * (*d - dot);
            }
            dsr[vis..].iter_mut().for_each(|x| *x = T::zero());
        }
        // dQ_h = scale * dS K_g
        gemm(
            s.q_rows,
            s.k_rows,
            s.head_dim,
            scale,
            View::dense(&ds, s.k_rows),
            View { data: k, off: g * s.head_dim, rs: kw, cs: 1 },
            T::zero(),
            ViewMut { data: &mut dq, off: h * s.head_dim, rs: qw, cs: 1 },
        );
        // dK_g += scale * dS^T Q_h
        gemm(
            s.k_rows,
            s.q_rows,
            s.head_dim,
            scale,
            View::dense_t(&ds, s.k_rows),
            View { data: q, off: h * s.head_dim, rs: qw, cs: 1 },
            T::one(),
            ViewMut { data: &mut dk, off: g * s.head_dim, rs: kw, cs: 1 },
        );
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let eye = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::<f64>::from_rows(&[vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap().data(), b.data());

        let row = Tensor::<f64>::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let col = Tensor::<f64>::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let out = matmul(&row, &col).unwrap();
        assert_eq!(out.shape(), &[1, 1]);
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, &[4, 5]);
        let b = random(&mut rng, &[5, 3]);
        let out = matmul(&a, &b).unwrap();
        for (x, y) in out.data().iter().zip(naive_matmul(&a, &b)) {
            assert!((x - y).abs() < 1e-6);
        }
        let bt = {
            let mut d = vec![0.0; 15];
            for i in 0..5 {
                for j in 0..3 {
                    d[j * 5 + i] = b.data()[i * 3 + j];
                }
            }
            Tensor::new(vec![3, 5], d).unwrap()
        };
        assert_eq!(matmul_nt(&a, &bt).unwrap().data(), out.data());
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_cases() {
        let x = Tensor::<f64>::from_rows(&[vec![0.0, 0.0, 0.0], vec![1000.0, 0.0, -5.0]]).unwrap();
        let y = softmax_rows(&x).unwrap();
        for v in y.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((y.row(1)[0] - 1.0).abs() < 1e-12);
        assert!(y.row(1)[1] >= 0.0 && y.row(1)[1] < 1e-300);
        assert!(y.is_finite());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, &[1, 9]).map(|v| v * 4.0);
        let y = softmax_rows(&x.cast::<f32>()).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((*a as f64 - b.exp() / z).abs() < 1e-6);
        }
    }

    #[test]
    fn rms_norm_cases() {
        let ones = Tensor::<f64>::filled(&[3], 1.0);
        let x = Tensor::<f64>::from_f64(&[3], &[2.0, 2.0, 2.0]).unwrap();
        for v in rms_norm(&x, &ones).unwrap().data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let zero = Tensor::<f64>::zeros(&[2]);
        let out = rms_norm(&zero, &Tensor::filled(&[2], 1.0)).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[7]);
        let g = random(&mut rng, &[7]);
        let out = rms_norm(&x.cast::<f32>(), &g.cast::<f32>()).unwrap();
        let ms: f64 = x.data().iter().map(|v| v * v).sum::<f64>() / 7.0;
        for i in 0..7 {
            let want = x.data()[i] / (ms + 1e-6).sqrt() * g.data()[i];
            assert!((out.data()[i] as f64 - want).abs() < 1e-6);
        }
        assert!(rms_norm(&x, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        // one-hot with huge margin -> ~0 loss
        let mut logits = Tensor::<f64>::zeros(&[2, 4]);
        logits.row_mut(0)[1] = 100.0;
        logits.row_mut(1)[3] = 100.0;
        let loss = cross_entropy_loss(&logits, &[1, 3], &[true, true]).unwrap();
        assert!(loss.abs() < 1e-12);

        let uniform = Tensor::<f64>::zeros(&[3, 5]);
        let loss = cross_entropy_loss(&uniform, &[0, 2, 4], &[true, false, true]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[3, 6]);
        let targets = [2, 0, 5];
        let loss = cross_entropy_loss(&x, &targets, &[true, true, true]).unwrap();
        let mut want = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let z: f64 = x.row(i).iter().map(|v| v.exp()).sum();
            want -= (x.row(i)[t].exp() / z).ln();
        }
        assert!((loss - want / 3.0).abs() < 1e-6);

        assert!(matches!(
            cross_entropy_loss(&x, &[2, 0, 6], &[true, true, true]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn rope_d2_matches_trig() {
        let base: f64 = 10000.0;
        let mut x = vec![0.3f64, -0.7];
        rope_rotate(&mut x, &[5], 1, 2, base, 1.0);
        let (s, c) = (5.0f64).sin_cos();
        assert!((x[0] - (0.3 * c + 0.7 * s)).abs() < 1e-12);
        assert!((x[1] - (0.3 * s - 0.7 * c)).abs() < 1e-12);
    }

    fn naive_attention(q: &[f64], k: &[f64], v: &[f64], s: AttnShape) -> Vec<f64> {
        let d = s.head_dim;
        let mut out = vec![0.0; s.q_rows * s.heads_q * d];
        for h in 0..s.heads_q {
            let g = h / (s.heads_q / s.heads_kv);
            for i in 0..s.q_rows {
                let vis = (s.offset + i + 1).min(s.k_rows);
                let scores: Vec<f64> = (0..vis)
                    .map(|j| {
                        (0..d)
                            .map(|t| q[i * s.heads_q * d + h * d + t] * k[j * s.heads_kv * d + g * d + t])
                            .sum::<f64>()
                            / (d as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|x| (x - m).exp()).sum();
                for j in 0..vis {
                    let p = (scores[j] - m).exp() / z;
                    for t in 0..d {
                        out[i * s.heads_q * d + h * d + t] += p * v[j * s.heads_kv * d + g * d + t];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_naive_with_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = AttnShape {
            heads_q: 4,
            heads_kv: 2,
            head_dim: 4,
            q_rows: 3,
            k_rows: 7,
            offset: 4,
        };
        let q: Vec<f64> = (0..3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k: Vec<f64> = (0..7 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..7 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (out, _) = attention_forward(&q, &k, &v, s);
        for (a, b) in out.iter().zip(naive_attention(&q, &k, &v, s)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
