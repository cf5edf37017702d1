use rand::Rng;

use crate::error::{Error, Result};

use super::{gemm, MatRef, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output size `ceil(input / stride)`, zero padding split with the extra cell after.
    Same,
    /// No padding; output `(input - kernel) / stride + 1`.
    Valid,
}

impl Padding {
    /// `(output, pad_before)` for one spatial axis.
    pub fn resolve(self, input: usize, kernel: usize, stride: usize) -> Result<(usize, usize)> {
        match self {
            Padding::Valid => {
                if input < kernel {
                    return Err(Error::Shape(format!(
                        "kernel {kernel} does not fit input {input} without padding"
                    )));
                }
                Ok(((input - kernel) / stride + 1, 0))
            }
            Padding::Same => {
                let out = input.div_ceil(stride);
                let total = ((out - 1) * stride + kernel).saturating_sub(input);
                Ok((out, total / 2))
            }
        }
    }
}

/// Geometry shared by convolution and pooling windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub padding: Padding,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Resolved {
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub pt: usize,
    pub pl: usize,
}

impl Window {
    pub fn resolve(&self, h: usize, w: usize) -> Result<Resolved> {
        if h == 0 || w == 0 {
            return Err(Error::Shape("empty spatial input".into()));
        }
        let (oh, pt) = self.padding.resolve(h, self.kh, self.sh)?;
        let (ow, pl) = self.padding.resolve(w, self.kw, self.sw)?;
        Ok(Resolved {
            h,
            w,
            oh,
            ow,
            pt,
            pl,
        })
    }
}

/// 2D cross-correlation over `(batch, h, w, c_in)` with `(kh, kw, c_in, c_out)` weights.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    window: Window,
    cache: Option<Tensor<T>>,
    force_gemm: bool,
}

impl<T: Real> Conv2d<T> {
    pub fn new(
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        stride: (usize, usize),
        padding: Padding,
    ) -> Self {
        assert!(
            kh > 0 && kw > 0 && stride.0 > 0 && stride.1 > 0,
            "degenerate convolution window"
        );
        Self {
            weight: Tensor::zeros(&[kh, kw, c_in, c_out]),
            bias: Tensor::zeros(&[c_out]),
            grad_weight: Tensor::zeros(&[kh, kw, c_in, c_out]),
            grad_bias: Tensor::zeros(&[c_out]),
            window: Window {
                kh,
                kw,
                sh: stride.0,
                sw: stride.1,
                padding,
            },
            cache: None,
            force_gemm: false,
        }
    }

    /// Uniform weights in `+-sqrt(gain / fan_in)`, zero bias.
    pub fn init_uniform<R: Rng>(&mut self, gain: f64, rng: &mut R) {
        let limit = (gain / self.fan_in() as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = T::from_f64_lossy(rng.gen_range(-limit..limit));
        }
        self.bias.fill(T::zero());
    }

    pub fn fan_in(&self) -> usize {
        self.window.kh * self.window.kw * self.c_in()
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn kernel(&self) -> (usize, usize) {
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
            return Err(Error::Shape(format!("conv2d expects (h, w, c), got {s:?}")));
        }
        if s[2] != self.c_in() {
            return Err(Error::Shape(format!(
                "conv2d expects {} input channels, got {}",
                self.c_in(),
                s[2]
            )));
        }
        let r = self.window.resolve(s[0], s[1])?;
        Ok(vec![r.oh, r.ow, self.c_out()])
    }

    fn is_pointwise(&self, r: &Resolved) -> bool {
        self.window.kh == 1
            && self.window.kw == 1
            && self.window.sh == 1
            && self.window.sw == 1
            && r.oh == r.h
    }

    /// Fills `cols` (`oh*ow x kh*kw*c_in`) from one sample.
    fn im2col(&self, x: &[T], r: &Resolved, cols: &mut [T]) {
        let c = self.c_in();
        let Window { kh, kw, sh, sw, .. } = self.window;
        let k = kh * kw * c;
        for oy in 0..r.oh {
            for ox in 0..r.ow {
                let row = &mut cols[(oy * r.ow + ox) * k..][..k];
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - r.pt as isize;
                    for kx in 0..kw {
                        let dst = &mut row[(ky * kw + kx) * c..][..c];
                        let ix = (ox * sw + kx) as isize - r.pl as isize;
                        if iy < 0 || ix < 0 || iy as usize >= r.h || ix as usize >= r.w {
                            dst.fill(T::zero());
                        } else {
                            let src = (iy as usize * r.w + ix as usize) * c;
                            dst.copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[T], r: &Resolved, dx: &mut [T]) {
        let c = self.c_in();
        let Window { kh, kw, sh, sw, .. } = self.window;
        let k = kh * kw * c;
        for oy in 0..r.oh {
            for ox in 0..r.ow {
                let row = &cols[(oy * r.ow + ox) * k..][..k];
                for ky in 0..kh {
                    let iy = (oy * sh + ky) as isize - r.pt as isize;
                    if iy < 0 || iy as usize >= r.h {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * sw + kx) as isize - r.pl as isize;
                        if ix < 0 || ix as usize >= r.w {
                            continue;
                        }
                        let dst = (iy as usize * r.w + ix as usize) * c;
                        for (d, &s) in dx[dst..dst + c]
                            .iter_mut()
                            .zip(&row[(ky * kw + kx) * c..][..c])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }

    /// Valid output-column range `[lo, hi)` for kernel column `kx`.
    fn columns(&self, r: &Resolved, kx: usize) -> (usize, usize) {
        let sw = self.window.sw;
        // ix = ox * sw + kx - pl must lie in [0, w)
        let lo = r.pl.saturating_sub(kx).div_ceil(sw);
        let hi = (r.w + r.pl).saturating_sub(kx).div_ceil(sw).min(r.ow);
        (lo, hi.max(lo))
    }

    /// Tap-by-tap accumulation without an im2col buffer; faster when
    /// `c_out` is too small for a matrix product to pay off.
    fn direct_forward<const CO: usize>(&self, x: &[T], r: &Resolved, out: &mut [T]) {
        let c = self.c_in();
        let Window { kh, kw, sh, sw, .. } = self.window;
        let w = self.weight.data();
        let ranges: Vec<(usize, usize)> = (0..kw).map(|kx| self.columns(r, kx)).collect();
        for oy in 0..r.oh {
            let rows: Vec<(usize, usize)> = (0..kh)
                .filter_map(|ky| {
                    let iy = (oy * sh + ky) as isize - r.pt as isize;
                    (iy >= 0 && (iy as usize) < r.h).then_some((ky, iy as usize))
                })
                .collect();
            for ox in 0..r.ow {
                let o = &mut out[(oy * r.ow + ox) * CO..][..CO];
                let mut acc = [T::zero(); CO];
                acc.copy_from_slice(o);
                for &(ky, iy) in &rows {
                    for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                        if ox < lo || ox >= hi {
                            continue;
                        }
                        let xs = &x[(iy * r.w + ox * sw + kx - r.pl) * c..][..c];
                        let tap = &w[(ky * kw + kx) * c * CO..][..c * CO];
                        for (&xv, wr) in xs.iter().zip(tap.chunks_exact(CO)) {
                            for k in 0..CO {
                                acc[k] += xv * wr[k];
                            }
                        }
                    }
                }
                o.copy_from_slice(&acc);
            }
        }
    }

    /// Input gradient only; the weight gradient still goes through im2col.
    fn direct_input_grad<const CO: usize>(&self, g: &[T], r: &Resolved, dx: &mut [T]) {
        let c = self.c_in();
        let Window { kh, kw, sh, sw, .. } = self.window;
        let ranges: Vec<(usize, usize)> = (0..kw).map(|kx| self.columns(r, kx)).collect();
        let w = self.weight.data();
        for oy in 0..r.oh {
            for ky in 0..kh {
                let iy = (oy * sh + ky) as isize - r.pt as isize;
                if iy < 0 || iy as usize >= r.h {
                    continue;
                }
                let base = iy as usize * r.w * c;
                for (kx, &(lo, hi)) in ranges.iter().enumerate() {
                    let tap = &w[(ky * kw + kx) * c * CO..][..c * CO];
                    for ox in lo..hi {
                        let at = base + (ox * sw + kx - r.pl) * c;
                        let gp: [T; CO] = g[(oy * r.ow + ox) * CO..][..CO].try_into().unwrap();
                        for (d, wr) in dx[at..at + c].iter_mut().zip(tap.chunks_exact(CO)) {
                            let mut acc = T::zero();
                            for k in 0..CO {
                                acc += wr[k] * gp[k];
                            }
                            *d += acc;
                        }
                    }
                }
            }
        }
    }

    fn use_direct(&self) -> bool {
        !self.force_gemm && matches!(self.c_out(), 1 | 2 | 4)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects (b, h, w, c), got {s:?}"
            )));
        }
        let out_s = self.output_shape(&s[1..])?;
        let r = self.window.resolve(s[1], s[2])?;
        let (b, p, k, co) = (s[0], r.oh * r.ow, self.fan_in(), self.c_out());
        let mut out = Tensor::zeros(&[b, out_s[0], out_s[1], co]);
        let pointwise = self.is_pointwise(&r);
        let direct = !pointwise && self.use_direct();
        let mut cols = if pointwise || direct {
            Vec::new()
        } else {
            vec![T::zero(); p * k]
        };
        let w = MatRef::new(self.weight.data(), k, co);
        for bi in 0..b {
            let dst = out.sample_mut(bi);
            for row in dst.chunks_exact_mut(co) {
                row.copy_from_slice(self.bias.data());
            }
            if direct {
                match co {
                    1 => self.direct_forward::<1>(x.sample(bi), &r, dst),
                    2 => self.direct_forward::<2>(x.sample(bi), &r, dst),
                    _ => self.direct_forward::<4>(x.sample(bi), &r, dst),
                }
                continue;
            }
            let src = if pointwise {
                x.sample(bi)
            } else {
                self.im2col(x.sample(bi), &r, &mut cols);
                &cols
            };
            gemm(T::one(), MatRef::new(src, p, k), w, T::one(), dst);
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    /// Sets `grad_weight`/`grad_bias` (summed over the batch) and returns the input gradient.
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self
            .backward_impl(g, true)?
            .expect("input gradient requested"))
    }

    /// Like [`Conv2d::backward`] without computing the input gradient.
    pub fn backward_params(&mut self, g: &Tensor<T>) -> Result<()> {
        self.backward_impl(g, false).map(drop)
    }

    fn backward_impl(&mut self, g: &Tensor<T>, want_dx: bool) -> Result<Option<Tensor<T>>> {
        let x = self
            .cache
            .take()
            .ok_or_else(|| Error::State("conv2d backward called without a forward cache".into()))?;
        let s = x.shape().to_vec();
        let r = self.window.resolve(s[1], s[2])?;
        let (b, p, k, co) = (s[0], r.oh * r.ow, self.fan_in(), self.c_out());
        if g.shape() != [b, r.oh, r.ow, co] {
            return Err(Error::Shape(format!(
                "conv2d gradient has shape {:?}, expected {:?}",
                g.shape(),
                [b, r.oh, r.ow, co]
            )));
        }
        self.grad_weight.fill(T::zero());
        self.grad_bias.fill(T::zero());
        let mut dx = Tensor::zeros(if want_dx { &s[..] } else { &[0] });
        let pointwise = self.is_pointwise(&r);
        let direct = !pointwise && self.use_direct();
        let mut cols = vec![T::zero(); if pointwise { 0 } else { p * k }];
        let mut dcols = vec![
            T::zero();
            if pointwise || direct || !want_dx {
                0
            } else {
                p * k
            }
        ];
        for bi in 0..b {
            let gb = g.sample(bi);
            for row in gb.chunks_exact(co) {
                for (acc, &v) in self.grad_bias.data_mut().iter_mut().zip(row) {
                    *acc += v;
                }
            }
            let gm = MatRef::new(gb, p, co);
            if direct || !want_dx {
                let src = if pointwise {
                    x.sample(bi)
                } else {
                    self.im2col(x.sample(bi), &r, &mut cols);
                    &cols
                };
                gemm(
                    T::one(),
                    MatRef::new(src, p, k).t(),
                    gm,
                    T::one(),
                    self.grad_weight.data_mut(),
                );
                if !want_dx {
                    continue;
                }
                let ds = dx.sample_mut(bi);
                match co {
                    1 => self.direct_input_grad::<1>(gb, &r, ds),
                    2 => self.direct_input_grad::<2>(gb, &r, ds),
                    _ => self.direct_input_grad::<4>(gb, &r, ds),
                }
                continue;
            }
            let wt = MatRef::new(self.weight.data(), k, co).t();
            if pointwise {
                let xs = x.sample(bi);
                gemm(
                    T::one(),
                    MatRef::new(xs, p, k).t(),
                    gm,
                    T::one(),
                    self.grad_weight.data_mut(),
                );
                gemm(T::one(), gm, wt, T::zero(), dx.sample_mut(bi));
            } else {
                self.im2col(x.sample(bi), &r, &mut cols);
                gemm(
                    T::one(),
                    MatRef::new(&cols, p, k).t(),
                    gm,
                    T::one(),
                    self.grad_weight.data_mut(),
                );
                gemm(T::one(), gm, wt, T::zero(), &mut dcols);
                self.col2im_add(&dcols, &r, dx.sample_mut(bi));
            }
        }
        Ok(want_dx.then_some(dx))
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
