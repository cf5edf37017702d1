use crate::error::{Error, Result};

use super::{Mode, Real, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Per-channel batch normalization over every axis but the last.
///
/// Training mode normalizes with biased batch statistics and folds them into
/// the moving averages; inference mode uses the moving averages only.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub grad_gamma: Tensor<T>,
    pub grad_beta: Tensor<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    cache: Option<Cache<T>>,
}

#[derive(Debug, Clone)]
struct Cache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            grad_gamma: Tensor::zeros(&[channels]),
            grad_beta: Tensor::zeros(&[channels]),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::full(&[channels], T::one()),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match s.last() {
            Some(&c) if c == self.channels() => Ok(s.to_vec()),
            _ => Err(Error::Shape(format!(
                "batchnorm over {} channels got input {s:?}",
                self.channels()
            ))),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let c = self.channels();
        if x.shape().len() < 2 || *x.shape().last().unwrap() != c {
            return Err(Error::Shape(format!(
                "batchnorm over {c} channels got input {:?}",
                x.shape()
            )));
        }
        let n = x.len() / c;
        let eps = T::from_f64_lossy(BN_EPSILON);
        let (mean, inv_std) = match mode {
            Mode::Train => {
                if n == 0 {
                    return Err(Error::State(
                        "batchnorm cannot train on an empty batch".into(),
                    ));
                }
                let nf = T::from_usize(n).unwrap();
                let mut mean = vec![T::zero(); c];
                for row in x.data().chunks_exact(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= nf);
                let mut var = vec![T::zero(); c];
                for row in x.data().chunks_exact(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = v - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nf);
                let mom = T::from_f64_lossy(BN_MOMENTUM);
                let rest = T::one() - mom;
                for i in 0..c {
                    let mm = &mut self.moving_mean.data_mut()[i];
                    *mm = mom * *mm + rest * mean[i];
                    let mv = &mut self.moving_var.data_mut()[i];
                    *mv = mom * *mv + rest * var[i];
                }
                let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                (mean, inv)
            }
            Mode::Infer => {
                let inv = self
                    .moving_var
                    .data()
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                (self.moving_mean.data().to_vec(), inv)
            }
        };
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for ((xr, hr), yr) in x
            .data()
            .chunks_exact(c)
            .zip(x_hat.data_mut().chunks_exact_mut(c))
            .zip(y.data_mut().chunks_exact_mut(c))
        {
            for i in 0..c {
                let h = (xr[i] - mean[i]) * inv_std[i];
                hr[i] = h;
                yr[i] = self.gamma.data()[i] * h + self.beta.data()[i];
            }
        }
        self.cache = Some(Cache {
            x_hat,
            inv_std,
            mode,
        });
        Ok(y)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let Cache {
            x_hat,
            inv_std,
            mode,
        } = self.cache.take().ok_or_else(|| {
            Error::State("batchnorm backward called without a forward cache".into())
        })?;
        if g.shape() != x_hat.shape() {
            return Err(Error::Shape(
                "batchnorm gradient does not match the forward output".into(),
            ));
        }
        let c = self.channels();
        let n = x_hat.len() / c;
        let mut sum_g = vec![T::zero(); c];
        let mut sum_gh = vec![T::zero(); c];
        for (gr, hr) in g.data().chunks_exact(c).zip(x_hat.data().chunks_exact(c)) {
            for i in 0..c {
                sum_g[i] += gr[i];
                sum_gh[i] += gr[i] * hr[i];
            }
        }
        self.grad_gamma.data_mut().copy_from_slice(&sum_gh);
        self.grad_beta.data_mut().copy_from_slice(&sum_g);
        let mut dx = Tensor::zeros(g.shape());
        let nf = T::from_usize(n).unwrap();
        for ((gr, hr), dr) in g
            .data()
            .chunks_exact(c)
            .zip(x_hat.data().chunks_exact(c))
            .zip(dx.data_mut().chunks_exact_mut(c))
        {
            for i in 0..c {
                let scale = self.gamma.data()[i] * inv_std[i];
                dr[i] = match mode {
                    Mode::Train => scale * (gr[i] - sum_g[i] / nf - hr[i] * sum_gh[i] / nf),
                    Mode::Infer => scale * gr[i],
                };
            }
        }
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}
