//! Regression losses over `(batch, 4)` coordinate tensors, reduced by the
//! mean over all elements.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gradnet::{Real, Tensor};

pub const DEFAULT_HUBER_DELTA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum LossKind {
    #[default]
    Mse,
    Mae,
    Huber {
        delta: f64,
    },
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Mae => "mae",
            LossKind::Huber { .. } => "huber",
        }
    }

    /// Loss and its gradient with respect to `pred`.
    pub fn eval<T: Real>(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        match *self {
            LossKind::Mse => mse(pred, target),
            LossKind::Mae => mae(pred, target),
            LossKind::Huber { delta } => huber(pred, target, delta),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossKind::Mse),
            "mae" => Ok(LossKind::Mae),
            "huber" => Ok(LossKind::Huber {
                delta: DEFAULT_HUBER_DELTA,
            }),
            _ => Err(Error::Config(format!(
                "unknown loss `{s}`; expected mse|mae|huber"
            ))),
        }
    }
}

fn check<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "prediction {:?} and target {:?} differ in shape",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Validation("loss over an empty batch".into()));
    }
    Ok(pred.len() as f64)
}

/// Applies `f(residual) -> (value, d value / d pred)` element-wise, where
/// the residual is `pred - target`.
fn reduce<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    f: impl Fn(f64) -> (f64, f64),
) -> Result<(f64, Tensor<T>)> {
    let n = check(pred, target)?;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let (v, g) = f(p.as_f64() - t.as_f64());
        total += v;
        grad.push(T::from_f64_lossy(g / n));
    }
    Ok((total / n, Tensor::from_vec(pred.shape(), grad)?))
}

pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    reduce(pred, target, |r| (r * r, 2.0 * r))
}

/// Subgradient is 0 where prediction equals target.
pub fn mae<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    reduce(pred, target, |r| {
        let s = if r > 0.0 {
            1.0
        } else if r < 0.0 {
            -1.0
        } else {
            0.0
        };
        (r.abs(), s)
    })
}

pub fn huber<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    delta: f64,
) -> Result<(f64, Tensor<T>)> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    reduce(pred, target, |r| huber_element(r, delta))
}

/// Value and derivative of the Huber function at residual `r`.
pub fn huber_element(r: f64, delta: f64) -> (f64, f64) {
    if r.abs() <= delta {
        (0.5 * r * r, r)
    } else {
        (delta * (r.abs() - 0.5 * delta), delta * r.signum())
    }
}

/// MSE, MAE and Huber of one prediction set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSummary {
    pub mse: f64,
    pub mae: f64,
    pub huber: f64,
}

impl LossSummary {
    pub fn compute<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, delta: f64) -> Result<Self> {
        Ok(Self {
            mse: mse(pred, target)?.0,
            mae: mae(pred, target)?.0,
            huber: huber(pred, target, delta)?.0,
        })
    }
}
