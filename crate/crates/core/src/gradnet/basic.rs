use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{gemm, MatRef, Mode, Real, Tensor};

fn missing(layer: &str) -> Error {
    Error::State(format!("{layer} backward called without a forward cache"))
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let mut y = x.clone();
        let mut mask = Vec::with_capacity(x.len());
        for v in y.data_mut() {
            let keep = *v > T::zero();
            if !keep {
                *v = T::zero();
            }
            mask.push(keep);
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward<T: Real>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(|| missing("relu"))?;
        if mask.len() != g.len() {
            return Err(Error::Shape(
                "relu gradient does not match the forward output".into(),
            ));
        }
        let mut dx = g.clone();
        for (d, &m) in dx.data_mut().iter_mut().zip(&mask) {
            if !m {
                *d = T::zero();
            }
        }
        Ok(dx)
    }
}

/// Fully connected layer on `(batch, in)` inputs with `(in, out)` weights.
#[derive(Debug, Clone)]
pub struct Dense<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub grad_weight: Tensor<T>,
    pub grad_bias: Tensor<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Dense<T> {
    pub fn new(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
            grad_weight: Tensor::zeros(&[inputs, outputs]),
            grad_bias: Tensor::zeros(&[outputs]),
            cache: None,
        }
    }

    pub fn init_uniform<R: Rng>(&mut self, gain: f64, rng: &mut R) {
        let limit = (gain / self.inputs() as f64).sqrt();
        for w in self.weight.data_mut() {
            *w = T::from_f64_lossy(rng.gen_range(-limit..limit));
        }
        self.bias.fill(T::zero());
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        if s != [self.inputs()] {
            return Err(Error::Shape(format!(
                "dense layer expects ({},), got {s:?}",
                self.inputs()
            )));
        }
        Ok(vec![self.outputs()])
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "dense expects (b, n), got {:?}",
                x.shape()
            )));
        }
        self.output_shape(&x.shape()[1..])?;
        let (b, n, o) = (x.batch(), self.inputs(), self.outputs());
        let mut y = Tensor::zeros(&[b, o]);
        for row in y.data_mut().chunks_exact_mut(o) {
            row.copy_from_slice(self.bias.data());
        }
        gemm(
            T::one(),
            MatRef::new(x.data(), b, n),
            MatRef::new(self.weight.data(), n, o),
            T::one(),
            y.data_mut(),
        );
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or_else(|| missing("dense"))?;
        let (b, n, o) = (x.batch(), self.inputs(), self.outputs());
        if g.shape() != [b, o] {
            return Err(Error::Shape(
                "dense gradient does not match the forward output".into(),
            ));
        }
        let gm = MatRef::new(g.data(), b, o);
        gemm(
            T::one(),
            MatRef::new(x.data(), b, n).t(),
            gm,
            T::zero(),
            self.grad_weight.data_mut(),
        );
        self.grad_bias.fill(T::zero());
        for row in g.data().chunks_exact(o) {
            for (acc, &v) in self.grad_bias.data_mut().iter_mut().zip(row) {
                *acc += v;
            }
        }
        let mut dx = Tensor::zeros(&[b, n]);
        gemm(
            T::one(),
            gm,
            MatRef::new(self.weight.data(), n, o).t(),
            T::zero(),
            dx.data_mut(),
        );
        Ok(dx)
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` in training,
/// identity in inference.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
    mask: Option<Vec<f64>>,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        assert!(
            (0.0..1.0).contains(&rate),
            "dropout rate must lie in [0, 1)"
        );
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
            mask: None,
        }
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Infer || self.rate == 0.0 {
            self.mask = Some(vec![1.0; x.len()]);
            return x.clone();
        }
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let mut y = x.clone();
        for (v, &m) in y.data_mut().iter_mut().zip(&mask) {
            *v *= T::from_f64_lossy(m);
        }
        self.mask = Some(mask);
        y
    }

    pub fn backward<T: Real>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.mask.take().ok_or_else(|| missing("dropout"))?;
        if mask.len() != g.len() {
            return Err(Error::Shape(
                "dropout gradient does not match the forward output".into(),
            ));
        }
        let mut dx = g.clone();
        for (v, &m) in dx.data_mut().iter_mut().zip(&mask) {
            *v *= T::from_f64_lossy(m);
        }
        Ok(dx)
    }
}

/// Concatenation along the last (channel) axis.
#[derive(Debug, Clone, Default)]
pub struct Concat {
    widths: Option<Vec<usize>>,
}

impl Concat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(&self, shapes: &[&[usize]]) -> Result<Vec<usize>> {
        let first = shapes
            .first()
            .ok_or_else(|| Error::Shape("concat needs at least one input".into()))?;
        if first.is_empty() {
            return Err(Error::Shape("concat inputs need a channel axis".into()));
        }
        let lead = &first[..first.len() - 1];
        let mut total = 0;
        for s in shapes {
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat inputs disagree outside the channel axis: {first:?} vs {s:?}"
                )));
            }
            total += s[s.len() - 1];
        }
        let mut out = lead.to_vec();
        out.push(total);
        Ok(out)
    }

    pub fn forward<T: Real>(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = xs.iter().map(|t| t.shape()).collect();
        let out_shape = self.output_shape(&shapes)?;
        let widths: Vec<usize> = shapes.iter().map(|s| s[s.len() - 1]).collect();
        let total = *out_shape.last().unwrap();
        let rows = xs[0].len() / widths[0].max(1);
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&x.data()[r * w..(r + 1) * w]);
            }
        }
        self.widths = Some(widths);
        Tensor::from_vec(&out_shape, data)
    }

    pub fn backward<T: Real>(&mut self, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let widths = self.widths.take().ok_or_else(|| missing("concat"))?;
        let total: usize = widths.iter().sum();
        let rows = g.len() / total.max(1);
        let lead = &g.shape()[..g.shape().len() - 1];
        let mut outs: Vec<Vec<T>> = widths
            .iter()
            .map(|&w| Vec::with_capacity(rows * w))
            .collect();
        for row in g.data().chunks_exact(total) {
            let mut off = 0;
            for (o, &w) in outs.iter_mut().zip(&widths) {
                o.extend_from_slice(&row[off..off + w]);
                off += w;
            }
        }
        outs.into_iter()
            .zip(&widths)
            .map(|(d, &w)| {
                let mut s = lead.to_vec();
                s.push(w);
                Tensor::from_vec(&s, d)
            })
            .collect()
    }
}

/// Element-wise sum of equally shaped inputs.
#[derive(Debug, Clone, Default)]
pub struct Add {
    arity: Option<usize>,
}

impl Add {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(&self, shapes: &[&[usize]]) -> Result<Vec<usize>> {
        let first = shapes
            .first()
            .ok_or_else(|| Error::Shape("add needs at least one input".into()))?;
        if shapes.iter().any(|s| s != first) {
            return Err(Error::Shape("add inputs differ in shape".into()));
        }
        Ok(first.to_vec())
    }

    pub fn forward<T: Real>(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let shapes: Vec<&[usize]> = xs.iter().map(|t| t.shape()).collect();
        self.output_shape(&shapes)?;
        let mut y = xs[0].clone();
        for x in &xs[1..] {
            y.add_assign(x)?;
        }
        self.arity = Some(xs.len());
        Ok(y)
    }

    pub fn backward<T: Real>(&mut self, g: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let n = self.arity.take().ok_or_else(|| missing("add"))?;
        Ok(vec![g.clone(); n])
    }
}

#[derive(Debug, Clone, Default)]
pub struct Flatten {
    input: Option<Vec<usize>>,
}

impl Flatten {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn output_shape(&self, s: &[usize]) -> Vec<usize> {
        vec![s.iter().product()]
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input = Some(x.shape().to_vec());
        x.clone().reshape(&[x.batch(), x.sample_len()])
    }

    pub fn backward<T: Real>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.input.take().ok_or_else(|| missing("flatten"))?;
        g.clone().reshape(&s)
    }
}

/// Reinterprets each sample with a new shape; the data order is unchanged.
#[derive(Debug, Clone)]
pub struct Reshape {
    pub target: Vec<usize>,
    input: Option<Vec<usize>>,
}

impl Reshape {
    pub fn new(target: &[usize]) -> Self {
        Self {
            target: target.to_vec(),
            input: None,
        }
    }

    pub fn output_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        if s.iter().product::<usize>() != self.target.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "cannot reshape {s:?} into {:?}",
                self.target
            )));
        }
        Ok(self.target.clone())
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.output_shape(x.sample_shape())?;
        self.input = Some(x.shape().to_vec());
        let mut s = vec![x.batch()];
        s.extend_from_slice(&self.target);
        x.clone().reshape(&s)
    }

    pub fn backward<T: Real>(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.input.take().ok_or_else(|| missing("reshape"))?;
        g.clone().reshape(&s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_rate_dropout_is_identity() {
        let x = Tensor::<f32>::from_fn(&[3, 5], |i| i as f32 - 4.0);
        let mut d = Dropout::new(0.0, 1);
        assert_eq!(d.forward(&x, Mode::Train), x);
        assert_eq!(d.forward(&x, Mode::Infer), x);
    }

    #[test]
    fn dropout_scales_kept_units() {
        let x = Tensor::<f64>::full(&[1, 1000], 1.0);
        let mut d = Dropout::new(0.3, 7);
        let y = d.forward(&x, Mode::Train);
        let kept = y.data().iter().filter(|&&v| v != 0.0).count();
        assert!(y
            .data()
            .iter()
            .all(|&v| v == 0.0 || (v - 1.0 / 0.7).abs() < 1e-12));
        assert!((kept as f64 / 1000.0 - 0.7).abs() < 0.06);
        assert_eq!(d.forward(&x, Mode::Infer), x);
        let mut a = Dropout::new(0.5, 3);
        let mut b = Dropout::new(0.5, 3);
        assert_eq!(a.forward(&x, Mode::Train), b.forward(&x, Mode::Train));
    }

    #[test]
    fn concat_shapes_and_split() {
        let a = Tensor::<f64>::from_fn(&[1, 4, 4, 8], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[1, 4, 4, 16], |i| -(i as f64));
        let mut c = Concat::new();
        let y = c.forward(&[&a, &b]).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4, 24]);
        assert_eq!(&y.data()[..8], &a.data()[..8]);
        assert_eq!(&y.data()[8..24], &b.data()[..16]);
        let parts = c.backward(&y).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = Tensor::<f64>::zeros(&[1, 3, 4, 2]);
        assert!(c.forward(&[&a, &bad]).is_err());
    }

    #[test]
    fn reshape_keeps_order() {
        let x = Tensor::<f32>::from_fn(&[2, 1, 5, 128], |i| i as f32);
        let mut r = Reshape::new(&[5, 128, 1]);
        let y = r.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 5, 128, 1]);
        assert_eq!(y.data(), x.data());
        assert_eq!(r.backward(&y).unwrap(), x);
        assert!(Reshape::new(&[7]).output_shape(&[2, 3]).is_err());
    }

    #[test]
    fn dense_forward_matches_definition() {
        let mut d = Dense::<f64>::new(3, 2);
        d.weight = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        d.bias = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(
            d.forward(&x).unwrap().data(),
            &[1.0 - 5.0 + 0.5, 2.0 - 6.0 - 0.5]
        );
        assert!(d.forward(&Tensor::zeros(&[1, 4])).is_err());
    }
}
