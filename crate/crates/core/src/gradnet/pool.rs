use crate::error::{Error, Result};

use super::conv::Window;
use super::{Padding, Real, Tensor};

/// Max pooling over `(batch, h, w, c)`; gradient is routed to the first
/// maximum in scan order. Padded cells never win.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    window: Window,
    cache: Option<(Vec<usize>, Vec<u32>)>,
}

impl MaxPool2d {
    pub fn new(pool: (usize, usize), stride: (usize, usize), padding: Padding) -> Self {
        assert!(
            pool.0 > 0 && pool.1 > 0 && stride.0 > 0 && stride.1 > 0,
            "degenerate pooling window"
        );
        Self {
            window: Window {
                kh: pool.0,
                kw: pool.1,
                sh: stride.0,
                sw: stride.1,
                padding,
            },
            cache: None,
        }
    }

    /// Pools the leading (time) axis by `factor`.
    pub fn temporal(factor: usize) -> Self {
        Self::new((factor, 1), (factor, 1), Padding::Valid)
    }

    pub fn pool(&self) -> (usize, usize) {
        (self.window.kh, self.window.kw)
    }

    pub fn stride(&self) -> (usize, usize) {
        (self.window.sh, self.window.sw)
    }

    pub fn padding(&self) -> Padding {
        self.window.padding
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        if s.len() != 3 {
            return Err(Error::Shape(format!(
                "maxpool expects (h, w, c), got {s:?}"
            )));
        }
        if s[0] < self.window.kh || s[1] < self.window.kw {
            return Err(Error::Shape(format!(
                "pool window {}x{} larger than input {}x{}",
                self.window.kh, self.window.kw, s[0], s[1]
            )));
        }
        let r = self.window.resolve(s[0], s[1])?;
        Ok(vec![r.oh, r.ow, s[2]])
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "maxpool expects (b, h, w, c), got {s:?}"
            )));
        }
        let out_s = self.output_shape(&s[1..])?;
        let r = self.window.resolve(s[1], s[2])?;
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let Window { kh, kw, sh, sw, .. } = self.window;
        let mut out = Tensor::zeros(&[b, out_s[0], out_s[1], c]);
        let mut arg = vec![0u32; out.len()];
        let xs = x.data();
        let per_in = h * w * c;
        let per_out = r.oh * r.ow * c;
        // separable: max over each row window, then over the column of row
        // maxima. Scanning rows in order with strict comparisons keeps the
        // first maximum in row-major window order.
        let row_len = r.ow * c;
        let mut hv = vec![T::zero(); h * row_len];
        let mut hi = vec![0u32; h * row_len];
        let cols: Vec<(usize, usize)> = (0..r.ow)
            .map(|ox| {
                let lo = (ox * sw) as isize - r.pl as isize;
                (lo.max(0) as usize, ((lo + kw as isize) as usize).min(w))
            })
            .collect();
        for bi in 0..b {
            let xb = &xs[bi * per_in..][..per_in];
            for iy in 0..h {
                for (ox, &(c0, c1)) in cols.iter().enumerate() {
                    let at = iy * row_len + ox * c;
                    let (bv, bidx) = (&mut hv[at..at + c], &mut hi[at..at + c]);
                    let first = (iy * w + c0) * c;
                    bv.copy_from_slice(&xb[first..first + c]);
                    for (ch, a) in bidx.iter_mut().enumerate() {
                        *a = (first + ch) as u32;
                    }
                    for ix in c0 + 1..c1 {
                        let t = (iy * w + ix) * c;
                        for (ch, (v, a)) in bv.iter_mut().zip(bidx.iter_mut()).enumerate() {
                            if xb[t + ch] > *v {
                                *v = xb[t + ch];
                                *a = (t + ch) as u32;
                            }
                        }
                    }
                }
            }
            let ob = &mut out.data_mut()[bi * per_out..][..per_out];
            let ab = &mut arg[bi * per_out..][..per_out];
            for oy in 0..r.oh {
                let lo = (oy * sh) as isize - r.pt as isize;
                let (r0, r1) = (lo.max(0) as usize, ((lo + kh as isize) as usize).min(h));
                let (bv, bidx) = (
                    &mut ob[oy * row_len..][..row_len],
                    &mut ab[oy * row_len..][..row_len],
                );
                bv.copy_from_slice(&hv[r0 * row_len..][..row_len]);
                bidx.copy_from_slice(&hi[r0 * row_len..][..row_len]);
                for iy in r0 + 1..r1 {
                    let (rv, ri) = (
                        &hv[iy * row_len..][..row_len],
                        &hi[iy * row_len..][..row_len],
                    );
                    for k in 0..row_len {
                        if rv[k] > bv[k] {
                            bv[k] = rv[k];
                            bidx[k] = ri[k];
                        }
                    }
                }
            }
        }
        self.cache = Some((s.to_vec(), arg));
        Ok(out)
    }

    pub fn backward<T: Real>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let (shape, arg) = self.cache.take().ok_or_else(|| {
            Error::State("maxpool backward called without a forward cache".into())
        })?;
        if g.len() != arg.len() {
            return Err(Error::Shape(
                "maxpool gradient does not match the forward output".into(),
            ));
        }
        let mut dx = Tensor::zeros(&shape);
        let b = shape[0];
        let per_in = dx.sample_len();
        let per_out = g.len() / b.max(1);
        for bi in 0..b {
            for o in 0..per_out {
                let k = bi * per_out + o;
                dx.data_mut()[bi * per_in + arg[k] as usize] += g.data()[k];
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
