use rand::Rng;

use crate::error::{Error, Result};

use super::{gemm, MatRef, Real, Tensor};

/// Which positions of an `(h, w, c)` map attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionAxis {
    /// Each row of `w` positions is its own sequence; projections are shared.
    Width,
    /// All `h * w` positions form one sequence.
    Full,
}

/// Single-head scaled dot-product self-attention with a residual add:
/// `y = x + softmax(q k^T / sqrt(c)) v`, `q = x wq`, `k = x wk`, `v = x wv`.
#[derive(Debug, Clone)]
pub struct SelfAttention<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub grad_wq: Tensor<T>,
    pub grad_wk: Tensor<T>,
    pub grad_wv: Tensor<T>,
    pub axis: AttentionAxis,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    x: Tensor<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    attn: Vec<T>,
    seq_len: usize,
}

impl<T: Real> SelfAttention<T> {
    pub fn new(channels: usize, axis: AttentionAxis) -> Self {
        let z = || Tensor::zeros(&[channels, channels]);
        Self {
            wq: z(),
            wk: z(),
            wv: z(),
            grad_wq: z(),
            grad_wk: z(),
            grad_wv: z(),
            axis,
            cache: None,
        }
    }

    pub fn init_uniform<R: Rng>(&mut self, gain: f64, rng: &mut R) {
        let limit = (gain / self.channels() as f64).sqrt();
        for w in [&mut self.wq, &mut self.wk, &mut self.wv] {
            for v in w.data_mut() {
                *v = T::from_f64_lossy(rng.gen_range(-limit..limit));
            }
        }
    }

    pub fn channels(&self) -> usize {
        self.wq.shape()[0]
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        if s.len() != 3 || s[2] != self.channels() || s[2] == 0 {
            return Err(Error::Shape(format!(
                "self-attention over {} channels got input {s:?}",
                self.channels()
            )));
        }
        Ok(s.to_vec())
    }

    fn seq_len(&self, s: &[usize]) -> usize {
        match self.axis {
            AttentionAxis::Width => s[2],
            AttentionAxis::Full => s[1] * s[2],
        }
    }

    /// Row-stochastic attention weights from the last training forward,
    /// `(n_sequences, len, len)` flattened.
    pub fn last_weights(&self) -> Option<&[T]> {
        self.cache.as_ref().map(|c| c.attn.as_slice())
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "self-attention expects (b, h, w, c), got {s:?}"
            )));
        }
        self.output_shape(&s[1..])?;
        let c = s[3];
        let rows = x.len() / c;
        let len = self.seq_len(s);
        let n_seq = rows / len;
        let scale = T::one() / T::from_usize(c).unwrap().sqrt();

        let xm = MatRef::new(x.data(), rows, c);
        let mut q = vec![T::zero(); rows * c];
        let mut k = vec![T::zero(); rows * c];
        let mut v = vec![T::zero(); rows * c];
        gemm(
            T::one(),
            xm,
            MatRef::new(self.wq.data(), c, c),
            T::zero(),
            &mut q,
        );
        gemm(
            T::one(),
            xm,
            MatRef::new(self.wk.data(), c, c),
            T::zero(),
            &mut k,
        );
        gemm(
            T::one(),
            xm,
            MatRef::new(self.wv.data(), c, c),
            T::zero(),
            &mut v,
        );

        let mut attn = vec![T::zero(); n_seq * len * len];
        let mut out = x.clone();
        for si in 0..n_seq {
            let span = si * len * c..(si + 1) * len * c;
            let a = &mut attn[si * len * len..(si + 1) * len * len];
            gemm(
                scale,
                MatRef::new(&q[span.clone()], len, c),
                MatRef::new(&k[span.clone()], len, c).t(),
                T::zero(),
                a,
            );
            for row in a.chunks_exact_mut(len) {
                let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut z = T::zero();
                for e in row.iter_mut() {
                    *e = (*e - m).exp();
                    z += *e;
                }
                for e in row.iter_mut() {
                    *e /= z;
                }
            }
            gemm(
                T::one(),
                MatRef::new(a, len, len),
                MatRef::new(&v[span.clone()], len, c),
                T::one(),
                &mut out.data_mut()[span],
            );
        }
        self.cache = Some(Cache {
            x: x.clone(),
            q,
            k,
            v,
            attn,
            seq_len: len,
        });
        Ok(out)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache {
            x,
            q,
            k,
            v,
            attn,
            seq_len: len,
        } = self.cache.take().ok_or_else(|| {
            Error::State("self-attention backward called without a forward cache".into())
        })?;
        if g.shape() != x.shape() {
            return Err(Error::Shape(
                "self-attention gradient does not match the forward output".into(),
            ));
        }
        let c = self.channels();
        let rows = x.len() / c;
        let n_seq = rows / len;
        let scale = T::one() / T::from_usize(c).unwrap().sqrt();

        let mut dq = vec![T::zero(); rows * c];
        let mut dk = vec![T::zero(); rows * c];
        let mut dv = vec![T::zero(); rows * c];
        let mut da = vec![T::zero(); len * len];
        for si in 0..n_seq {
            let span = si * len * c..(si + 1) * len * c;
            let a = &attn[si * len * len..(si + 1) * len * len];
            let gs = MatRef::new(&g.data()[span.clone()], len, c);
            // dA = G V^T, dV = A^T G
            gemm(
                T::one(),
                gs,
                MatRef::new(&v[span.clone()], len, c).t(),
                T::zero(),
                &mut da,
            );
            gemm(
                T::one(),
                MatRef::new(a, len, len).t(),
                gs,
                T::zero(),
                &mut dv[span.clone()],
            );
            // softmax backward, in place: dS = A * (dA - rowsum(dA * A))
            for (dr, ar) in da.chunks_exact_mut(len).zip(a.chunks_exact(len)) {
                let dot: T = dr.iter().zip(ar).map(|(&d, &p)| d * p).sum();
                for (d, &p) in dr.iter_mut().zip(ar) {
                    *d = p * (*d - dot);
                }
            }
            let ds = MatRef::new(&da, len, len);
            gemm(
                scale,
                ds,
                MatRef::new(&k[span.clone()], len, c),
                T::zero(),
                &mut dq[span.clone()],
            );
            gemm(
                scale,
                ds.t(),
                MatRef::new(&q[span.clone()], len, c),
                T::zero(),
                &mut dk[span],
            );
        }
        let xm = MatRef::new(x.data(), rows, c);
        gemm(
            T::one(),
            xm.t(),
            MatRef::new(&dq, rows, c),
            T::zero(),
            self.grad_wq.data_mut(),
        );
        gemm(
            T::one(),
            xm.t(),
            MatRef::new(&dk, rows, c),
            T::zero(),
            self.grad_wk.data_mut(),
        );
        gemm(
            T::one(),
            xm.t(),
            MatRef::new(&dv, rows, c),
            T::zero(),
            self.grad_wv.data_mut(),
        );

        let mut dx = g.clone();
        for (d, w) in [(&dq, &self.wq), (&dk, &self.wk), (&dv, &self.wv)] {
            gemm(
                T::one(),
                MatRef::new(d, rows, c),
                MatRef::new(w.data(), c, c).t(),
                T::one(),
                dx.data_mut(),
            );
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = stream_rng(seed, "attn", 0);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_value_projection_is_identity() {
        for axis in [AttentionAxis::Width, AttentionAxis::Full] {
            let mut att = SelfAttention::<f64>::new(3, axis);
            att.init_uniform(3.0, &mut stream_rng(1, "w", 0));
            att.wv.fill(0.0);
            let x = random(&[2, 3, 4, 3], 2);
            assert_eq!(att.forward(&x).unwrap(), x);
        }
    }

    #[test]
    fn weights_are_row_stochastic() {
        let mut att = SelfAttention::<f64>::new(2, AttentionAxis::Width);
        att.init_uniform(3.0, &mut stream_rng(1, "w", 1));
        att.forward(&random(&[1, 3, 4, 2], 3)).unwrap();
        let w = att.last_weights().unwrap();
        assert_eq!(w.len(), 3 * 4 * 4);
        for row in w.chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matches_per_sequence_reference() {
        let mut att = SelfAttention::<f64>::new(2, AttentionAxis::Full);
        att.init_uniform(3.0, &mut stream_rng(4, "w", 2));
        let x = random(&[1, 2, 3, 2], 5);
        let y = att.forward(&x).unwrap();
        let c = 2;
        let positions = 6;
        let proj = |w: &Tensor<f64>, p: usize, j: usize| {
            (0..c)
                .map(|i| x.data()[p * c + i] * w.data()[i * c + j])
                .sum::<f64>()
        };
        for p in 0..positions {
            let scores: Vec<f64> = (0..positions)
                .map(|r| {
                    (0..c)
                        .map(|j| proj(&att.wq, p, j) * proj(&att.wk, r, j))
                        .sum::<f64>()
                        / (c as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..c {
                let o: f64 = (0..positions).map(|r| e[r] / z * proj(&att.wv, r, j)).sum();
                assert!((y.data()[p * c + j] - x.data()[p * c + j] - o).abs() < 1e-12);
            }
        }
    }
}
