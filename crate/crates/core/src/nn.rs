//! Layer building blocks shared by the translation and segmentation nets.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Whether convolutions mix along the slice axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dims {
    /// `1×k×k` kernels; slices are processed independently.
    #[serde(rename = "2d")]
    Two,
    /// `3×k×k` kernels; downsampling stays in-plane so thin stacks survive.
    #[serde(rename = "3d")]
    Three,
}

impl Dims {
    pub fn kernel(self, k: usize) -> [usize; 3] {
        match self {
            Dims::Two => [1, k, k],
            Dims::Three => [if k > 1 { 3 } else { 1 }, k, k],
        }
    }

    pub fn pad(self, p: usize) -> [usize; 3] {
        match self {
            Dims::Two => [0, p, p],
            Dims::Three => [if p > 0 { 1 } else { 0 }, p, p],
        }
    }
}

pub fn kaiming_normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], slope: f64) -> Tensor<T> {
    let fan_in: usize = shape[1..].iter().product();
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    let std = gain / (fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::from_f64c(normal.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub bias: bool,
    /// Negative slope of the activation that follows, for the init gain.
    pub slope: f64,
}

impl ConvSpec {
    pub fn new(dims: Dims, in_ch: usize, out_ch: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel: dims.kernel(k),
            stride: [1, stride, stride],
            pad: dims.pad(k / 2),
            bias: true,
            slope: 0.0,
        }
    }

    pub fn slope(mut self, slope: f64) -> Self {
        self.slope = slope;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

impl Conv {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, rng: &mut R, name: &str, spec: ConvSpec) -> Self {
        let shape = [
            spec.out_ch,
            spec.in_ch,
            spec.kernel[0],
            spec.kernel[1],
            spec.kernel[2],
        ];
        let weight = store.add(format!("{name}.weight"), kaiming_normal(rng, &shape, spec.slope));
        let bias = spec
            .bias
            .then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[spec.out_ch])));
        Conv {
            weight,
            bias,
            stride: spec.stride,
            pad: spec.pad,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// `x + conv(act(norm(conv(act(norm(x))))))`-style residual block. With
/// `norm = false` the instance norms are skipped.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub norm: bool,
    pub slope: f64,
}

impl ResBlock {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dims: Dims,
        ch: usize,
        norm: bool,
        slope: f64,
    ) -> Self {
        let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), ConvSpec::new(dims, ch, ch, 3, 1).slope(slope));
        let conv2 = Conv::new(store, rng, &format!("{name}.conv2"), ConvSpec::new(dims, ch, ch, 3, 1).slope(slope));
        ResBlock {
            conv1,
            conv2,
            norm,
            slope,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let slope = T::from_f64c(self.slope);
        let mut h = self.conv1.forward(g, x)?;
        if self.norm {
            h = g.instance_norm(h, T::from_f64c(1e-5));
        }
        h = g.leaky_relu(h, slope);
        h = self.conv2.forward(g, h)?;
        if self.norm {
            h = g.instance_norm(h, T::from_f64c(1e-5));
        }
        g.add(x, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.conv1.params();
        p.extend(self.conv2.params());
        p
    }
}
