//! Parameterised building blocks: linear, channel layer norm, depth-wise
//! convolution and stacked perceptrons. Each `backward` accumulates into the
//! owned parameter gradients and returns the input gradient.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::ops::{self, Activation, LayerNormCache};
use crate::tensor::{Element, Module, Parameter, Tensor};

/// Standard deviation of the truncated-normal projection init.
pub const INIT_STD: f64 = 0.02;

/// Normal samples with `|z| ≤ 2`, scaled by `std`.
pub fn trunc_normal<T: Element, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let len = shape.iter().product();
    let mut data = Vec::with_capacity(len);
    while data.len() < len {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(T::lit(z * std));
        }
    }
    Tensor::from_vec(shape, data).expect("shape")
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
}

impl Init {
    fn make<T: Element, R: Rng>(self, rng: &mut R, shape: &[usize]) -> Tensor<T> {
        match self {
            Init::TruncNormal(std) => trunc_normal(rng, shape, std),
            Init::Zeros => Tensor::zeros(shape),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Parameter<T>,
    pub bias: Option<Parameter<T>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Element> Linear<T> {
    pub fn new<R: Rng>(
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let weight = Parameter::new(format!("{name}.weight"), init.make(rng, &[d_out, d_in]), true);
        let bias = bias.then(|| Parameter::new(format!("{name}.bias"), Tensor::zeros(&[d_out]), false));
        Linear {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> Vec<T> {
        ops::linear_forward(
            x,
            rows,
            self.d_in,
            self.weight.data(),
            self.bias.as_ref().map(|b| b.data()),
            self.d_out,
        )
    }

    pub fn backward(&mut self, x: &[T], rows: usize, dy: &[T]) -> Vec<T> {
        let g = ops::linear_backward(x, rows, self.d_in, self.weight.data(), dy, self.d_out);
        self.weight.accumulate(&g.dw);
        if let Some(b) = self.bias.as_mut() {
            b.accumulate(&g.db);
        }
        g.dx
    }
}

impl<T: Element> Module<T> for Linear<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        if let Some(b) = &mut self.bias {
            f(b);
        }
    }
}

/// Per-pixel normalization over channels with learnable scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub dim: usize,
}

impl<T: Element> LayerNorm<T> {
    pub fn new(name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[dim], T::one()), false),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[dim]), false),
            dim,
        }
    }

    pub fn forward(&self, x: &[T]) -> (Vec<T>, LayerNormCache<T>) {
        ops::layer_norm_forward(x, self.dim, self.gamma.data(), self.beta.data())
    }

    pub fn backward(&mut self, cache: &LayerNormCache<T>, dy: &[T]) -> Vec<T> {
        let (dx, dg, db) = ops::layer_norm_backward(cache, self.gamma.data(), dy, self.dim);
        self.gamma.accumulate(&dg);
        self.beta.accumulate(&db);
        dx
    }
}

impl<T: Element> Module<T> for LayerNorm<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Depth-wise convolution over batches of `[h×w×c]` maps.
#[derive(Clone, Debug)]
pub struct DwConv<T> {
    pub kernel: Parameter<T>,
    pub k: usize,
    pub channels: usize,
}

impl<T: Element> DwConv<T> {
    pub fn new<R: Rng>(name: &str, k: usize, channels: usize, init: Init, rng: &mut R) -> Result<Self> {
        if k.is_multiple_of(2) {
            return Err(Error::config("kernel_size", format!("must be odd, got {k}")));
        }
        Ok(DwConv {
            kernel: Parameter::new(format!("{name}.kernel"), init.make(rng, &[k, k, channels]), true),
            k,
            channels,
        })
    }

    pub fn forward(&self, x: &[T], batch: usize, h: usize, w: usize) -> Vec<T> {
        ops::dwconv_forward(x, batch, h, w, self.channels, self.kernel.data(), self.k)
    }

    pub fn backward(&mut self, x: &[T], batch: usize, h: usize, w: usize, dy: &[T]) -> Vec<T> {
        let (dx, dk) =
            ops::dwconv_backward(x, batch, h, w, self.channels, self.kernel.data(), self.k, dy);
        self.kernel.accumulate(&dk);
        dx
    }
}

impl<T: Element> Module<T> for DwConv<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.kernel);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.kernel);
    }
}

/// Stack of linear layers with an activation between consecutive layers.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
    pub act: Activation,
}

pub struct MlpCache<T> {
    /// Input of every layer.
    inputs: Vec<Vec<T>>,
    /// Pre-activation output of every layer except the last.
    pre: Vec<Vec<T>>,
    rows: usize,
}

impl<T: Element> Mlp<T> {
    /// `widths = [in, hidden.., out]`; the last layer uses `last_init`.
    pub fn new<R: Rng>(name: &str, widths: &[usize], act: Activation, last_init: Init, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an mlp needs at least one layer");
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let init = if i + 1 == n {
                    last_init
                } else {
                    Init::TruncNormal(INIT_STD)
                };
                Linear::new(&format!("{name}.fc{}", i + 1), widths[i], widths[i + 1], true, init, rng)
            })
            .collect();
        Mlp { layers, act }
    }

    /// The two-layer perceptron `linear → act → linear`.
    pub fn two_layer<R: Rng>(name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Self::new(name, &[d_in, hidden, d_out], Activation::Gelu, Init::TruncNormal(INIT_STD), rng)
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].d_in
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().expect("non-empty").d_out
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let y = layer.forward(&h, rows);
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = ops::activate(self.act, &y);
                pre.push(y);
            } else {
                h = y;
            }
        }
        (h, MlpCache { inputs, pre, rows })
    }

    pub fn backward(&mut self, cache: &MlpCache<T>, dy: &[T]) -> Vec<T> {
        let mut g = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                g = ops::activate_backward(self.act, &cache.pre[i], &g);
            }
            g = self.layers[i].backward(&cache.inputs[i], cache.rows, &g);
        }
        g
    }

    /// Tensor-level evaluation of `x[n×in]`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() != 2 || x.shape()[1] != self.d_in() {
            return Err(Error::Dimension(format!(
                "mlp expects [n×{}], got {:?}",
                self.d_in(),
                x.shape()
            )));
        }
        let rows = x.shape()[0];
        let (y, _) = self.forward(x.data(), rows);
        Tensor::from_vec(&[rows, self.d_out()], y)
    }
}

impl<T: Element> Module<T> for Mlp<T> {
    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.layers.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.layers.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set_all<T: Element>(m: &mut impl Module<T>, v: T) {
        m.visit_mut(&mut |p| p.value.data_mut().iter_mut().for_each(|x| *x = v));
    }

    #[test]
    fn mlp2_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::two_layer("m", 3, 5, 2, &mut rng);
        set_all(&mut mlp, 0.0);
        let x = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.0, 4.0, 5.0, -6.0]).unwrap();
        assert!(mlp.apply(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp2_identity_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::new("m", &[2, 2, 2], Activation::Identity, Init::Zeros, &mut rng);
        set_all(&mut mlp, 0.0);
        for layer in &mut mlp.layers {
            layer.weight.value.set(&[0, 0], 1.0);
            layer.weight.value.set(&[1, 1], 1.0);
        }
        let x = Tensor::from_vec(&[2, 2], vec![0.5, -1.5, 2.0, 3.0]).unwrap();
        assert_eq!(mlp.apply(&x).unwrap(), x);
    }

    #[test]
    fn mlp2_scalar_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::<f64>::two_layer("m", 1, 1, 1, &mut rng);
        set_all(&mut mlp, 0.0);
        mlp.layers[0].weight.value.data_mut()[0] = 1.0;
        mlp.layers[1].weight.value.data_mut()[0] = 1.0;
        let y = mlp.apply(&Tensor::scalar(2.0).reshape(&[1, 1]).unwrap()).unwrap();
        assert!((y.data()[0] - 1.9545).abs() < 1e-4);
    }

    #[test]
    fn trunc_normal_is_bounded_and_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let x: Tensor<f32> = trunc_normal(&mut a, &[1000], 0.02);
        let y: Tensor<f32> = trunc_normal(&mut b, &[1000], 0.02);
        assert!(x.bit_eq(&y));
        assert!(x.data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn even_kernel_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(DwConv::<f32>::new("dw", 4, 3, Init::Zeros, &mut rng).is_err());
    }
}
