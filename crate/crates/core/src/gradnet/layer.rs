use crate::error::{Error, Result};

use super::{
    Add, BatchNorm, Concat, Conv2d, Dense, Dropout, Flatten, MaxPool2d, Mode, Real, Relu, Reshape,
    SelfAttention, Tensor,
};

/// Stable tag written to checkpoints for each layer type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum LayerKind {
    Conv2d = 1,
    MaxPool2d = 2,
    BatchNorm = 4,
    Relu = 5,
    Dense = 6,
    Dropout = 7,
    Concat = 8,
    Flatten = 9,
    Reshape = 10,
    SelfAttention = 11,
    Add = 12,
}

impl LayerKind {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        use LayerKind::*;
        [
            Conv2d,
            MaxPool2d,
            BatchNorm,
            Relu,
            Dense,
            Dropout,
            Concat,
            Flatten,
            Reshape,
            SelfAttention,
            Add,
        ]
        .into_iter()
        .find(|k| k.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv2d => "conv2d",
            LayerKind::MaxPool2d => "maxpool",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Dense => "dense",
            LayerKind::Dropout => "dropout",
            LayerKind::Concat => "concat",
            LayerKind::Flatten => "flatten",
            LayerKind::Reshape => "reshape",
            LayerKind::SelfAttention => "attention",
            LayerKind::Add => "add",
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Conv2d(Conv2d<T>),
    MaxPool2d(MaxPool2d),
    BatchNorm(BatchNorm<T>),
    Relu(Relu),
    Dense(Dense<T>),
    Dropout(Dropout),
    Concat(Concat),
    Flatten(Flatten),
    Reshape(Reshape),
    SelfAttention(SelfAttention<T>),
    Add(Add),
}

fn single<'a, T: ?Sized>(kind: LayerKind, xs: &[&'a T]) -> Result<&'a T> {
    match xs {
        [x] => Ok(x),
        _ => Err(Error::Shape(format!(
            "{} takes one input, got {}",
            kind.name(),
            xs.len()
        ))),
    }
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::MaxPool2d(_) => LayerKind::MaxPool2d,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu(_) => LayerKind::Relu,
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::Concat(_) => LayerKind::Concat,
            Layer::Flatten(_) => LayerKind::Flatten,
            Layer::Reshape(_) => LayerKind::Reshape,
            Layer::SelfAttention(_) => LayerKind::SelfAttention,
            Layer::Add(_) => LayerKind::Add,
        }
    }

    /// Per-sample output shape for per-sample input shapes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let kind = self.kind();
        match self {
            Layer::Concat(l) => l.output_shape(inputs),
            Layer::Add(l) => l.output_shape(inputs),
            _ => {
                let s = single(kind, inputs)?;
                match self {
                    Layer::Conv2d(l) => l.output_shape(s),
                    Layer::MaxPool2d(l) => l.output_shape(s),
                    Layer::BatchNorm(l) => l.output_shape(s),
                    Layer::Dense(l) => l.output_shape(s),
                    Layer::Flatten(l) => Ok(l.output_shape(s)),
                    Layer::Reshape(l) => l.output_shape(s),
                    Layer::SelfAttention(l) => l.output_shape(s),
                    Layer::Relu(_) | Layer::Dropout(_) => Ok(s.to_vec()),
                    Layer::Concat(_) | Layer::Add(_) => unreachable!(),
                }
            }
        }
    }

    pub fn forward(&mut self, xs: &[&Tensor<T>], mode: Mode) -> Result<Tensor<T>> {
        let kind = self.kind();
        match self {
            Layer::Concat(l) => l.forward(xs),
            Layer::Add(l) => l.forward(xs),
            _ => {
                let x = single(kind, xs)?;
                match self {
                    Layer::Conv2d(l) => l.forward(x),
                    Layer::MaxPool2d(l) => l.forward(x),
                    Layer::BatchNorm(l) => l.forward(x, mode),
                    Layer::Relu(l) => Ok(l.forward(x)),
                    Layer::Dense(l) => l.forward(x),
                    Layer::Dropout(l) => Ok(l.forward(x, mode)),
                    Layer::Flatten(l) => l.forward(x),
                    Layer::Reshape(l) => l.forward(x),
                    Layer::SelfAttention(l) => l.forward(x),
                    Layer::Concat(_) | Layer::Add(_) => unreachable!(),
                }
            }
        }
    }

    /// Gradients with respect to each input, in input order. Parameter
    /// gradients are overwritten, not accumulated.
    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(match self {
            Layer::Concat(l) => return l.backward(g),
            Layer::Add(l) => return l.backward(g),
            Layer::Conv2d(l) => vec![l.backward(g)?],
            Layer::MaxPool2d(l) => vec![l.backward(g)?],
            Layer::BatchNorm(l) => vec![l.backward(g)?],
            Layer::Relu(l) => vec![l.backward(g)?],
            Layer::Dense(l) => vec![l.backward(g)?],
            Layer::Dropout(l) => vec![l.backward(g)?],
            Layer::Flatten(l) => vec![l.backward(g)?],
            Layer::Reshape(l) => vec![l.backward(g)?],
            Layer::SelfAttention(l) => vec![l.backward(g)?],
        })
    }

    /// Backward pass when no input gradient is needed: only parameter
    /// gradients are updated.
    pub fn backward_params(&mut self, g: &Tensor<T>) -> Result<()> {
        match self {
            Layer::Conv2d(l) => l.backward_params(g),
            Layer::BatchNorm(_) | Layer::Dense(_) | Layer::SelfAttention(_) => {
                self.backward(g).map(drop)
            }
            _ => {
                self.clear_cache();
                Ok(())
            }
        }
    }

    /// Trainable parameters.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.gamma, &l.beta],
            Layer::Dense(l) => vec![&l.weight, &l.bias],
            Layer::SelfAttention(l) => vec![&l.wq, &l.wk, &l.wv],
            _ => Vec::new(),
        }
    }

    pub fn grads(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&l.grad_weight, &l.grad_bias],
            Layer::BatchNorm(l) => vec![&l.grad_gamma, &l.grad_beta],
            Layer::Dense(l) => vec![&l.grad_weight, &l.grad_bias],
            Layer::SelfAttention(l) => vec![&l.grad_wq, &l.grad_wk, &l.grad_wv],
            _ => Vec::new(),
        }
    }

    pub fn params_and_grads_mut(&mut self) -> Vec<(&mut Tensor<T>, &Tensor<T>)> {
        match self {
            Layer::Conv2d(l) => vec![(&mut l.weight, &l.grad_weight), (&mut l.bias, &l.grad_bias)],
            Layer::BatchNorm(l) => vec![(&mut l.gamma, &l.grad_gamma), (&mut l.beta, &l.grad_beta)],
            Layer::Dense(l) => vec![(&mut l.weight, &l.grad_weight), (&mut l.bias, &l.grad_bias)],
            Layer::SelfAttention(l) => vec![
                (&mut l.wq, &l.grad_wq),
                (&mut l.wk, &l.grad_wk),
                (&mut l.wv, &l.grad_wv),
            ],
            _ => Vec::new(),
        }
    }

    /// Non-trainable state (batchnorm moving statistics).
    pub fn state(&self) -> Vec<&Tensor<T>> {
        match self {
            Layer::BatchNorm(l) => vec![&l.moving_mean, &l.moving_var],
            _ => Vec::new(),
        }
    }

    /// Every persisted buffer, parameters first, then state.
    pub fn buffers(&self) -> Vec<&Tensor<T>> {
        let mut b = self.params();
        b.extend(self.state());
        b
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor<T>> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![
                &mut l.gamma,
                &mut l.beta,
                &mut l.moving_mean,
                &mut l.moving_var,
            ],
            Layer::Dense(l) => vec![&mut l.weight, &mut l.bias],
            Layer::SelfAttention(l) => vec![&mut l.wq, &mut l.wk, &mut l.wv],
            _ => Vec::new(),
        }
    }

    pub fn clear_cache(&mut self) {
        match self {
            Layer::Conv2d(l) => l.clear_cache(),
            Layer::MaxPool2d(l) => l.clear_cache(),
            Layer::BatchNorm(l) => l.clear_cache(),
            Layer::Dense(l) => l.clear_cache(),
            Layer::SelfAttention(l) => l.clear_cache(),
            Layer::Relu(l) => *l = Relu::new(),
            Layer::Concat(l) => *l = Concat::new(),
            Layer::Flatten(l) => *l = Flatten::new(),
            Layer::Add(l) => *l = Add::new(),
            Layer::Reshape(l) => *l = Reshape::new(&l.target.clone()),
            Layer::Dropout(_) => {}
        }
    }
}

macro_rules! from_layer {
    ($($v:ident),*) => {
        $(impl<T: Real> From<$v<T>> for Layer<T> {
            fn from(l: $v<T>) -> Self {
                Layer::$v(l)
            }
        })*
    };
}

macro_rules! from_plain_layer {
    ($($v:ident),*) => {
        $(impl<T: Real> From<$v> for Layer<T> {
            fn from(l: $v) -> Self {
                Layer::$v(l)
            }
        })*
    };
}

from_layer!(Conv2d, BatchNorm, Dense, SelfAttention);
from_plain_layer!(MaxPool2d, Relu, Dropout, Concat, Flatten, Reshape, Add);
