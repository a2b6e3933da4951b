//! A small reverse-mode autodiff tape.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with the forward values. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for parameters and for inputs created with
//! [`Graph::input_grad`]. Parameters live in a [`ParamStore`]; the graph only
//! borrows it, so one store can be read by many graphs (inference) while a
//! single optimizer owns the mutation.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Target of the fused segmentation loss: per-item labels (with
/// [`IGNORE_LABEL`] marking excluded voxels) and per-item weights.
#[derive(Clone, Debug)]
pub struct SegTarget {
    pub labels: Vec<u8>,
    pub weights: Vec<f64>,
    pub include_background: bool,
    pub smooth: f64,
}

pub const IGNORE_LABEL: u8 = u8::MAX;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Upsample {
        x: Var,
        factor: [usize; 3],
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    LeakyRelu(Var, T),
    Softplus(Var),
    Abs(Var),
    Square(Var),
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    ConcatChannels(Var, Var),
    SpatialMean(Var),
    ExpandSpatial(Var),
    MeanAll(Var),
    SegLoss {
        logits: Var,
        /// ∂loss/∂logits, computed with the forward pass.
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'s, T: Scalar> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    frozen: Vec<bool>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads<T> {
    params: HashMap<ParamId, Tensor<T>>,
    vars: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn var(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(&v)
    }

    pub fn params(&self) -> &HashMap<ParamId, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> HashMap<ParamId, Tensor<T>> {
        self.params
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            frozen: vec![false; store.len()],
        }
    }

    /// Treat the given parameters as constants in this graph.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            self.frozen[id.0] = true;
        }
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input whose gradient is reported by `backward`.
    pub fn input_grad(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Copy of a value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.get(id).clone();
        let needs = !self.frozen[id.0];
        let v = self.push(value, Op::Param(id), needs);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
            return Err(Error::shape("conv input", &[0, ws[1], 0, 0, 0], &xs));
        }
        let geom = ConvGeom {
            in_ch: ws[1],
            out_ch: ws[0],
            input: [xs[2], xs[3], xs[4]],
            kernel: [ws[2], ws[3], ws[4]],
            stride,
            pad,
        };
        if !geom.valid() {
            return Err(Error::InvalidArgument(format!(
                "convolution kernel {:?} does not fit input {:?}",
                geom.kernel, geom.input
            )));
        }
        let out = {
            let bias = b.map(|b| &self.nodes[b.0].value);
            kernels::conv_forward(&self.nodes[x.0].value, &self.nodes[w.0].value, bias, &geom)
        };
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, geom }, needs))
    }

    pub fn upsample(&mut self, x: Var, factor: [usize; 3]) -> Var {
        let out = kernels::upsample_forward(self.value(x), factor);
        let needs = self.ng(x);
        self.push(out, Op::Upsample { x, factor }, needs)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("elementwise op", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x + y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x - y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, |x, y| x * y)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v * c);
        let needs = self.ng(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|v| v + c);
        let needs = self.ng(a);
        self.push(out, Op::AddScalar(a), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let out = self.value(a).map(|v| if v > T::zero() { v } else { v * slope });
        let needs = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, T::zero())
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let needs = self.ng(a);
        self.push(out, Op::Softplus(a), needs)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.abs());
        let needs = self.ng(a);
        self.push(out, Op::Abs(a), needs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        let needs = self.ng(a);
        self.push(out, Op::Square(a), needs)
    }

    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (out, inv_std) = kernels::instance_norm_forward(self.value(x), eps);
        let needs = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.dims5(), tb.dims5());
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", ta.shape(), tb.shape()));
        }
        let m = sa[2] * sa[3] * sa[4];
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&ta.data()[n * sa[1] * m..(n + 1) * sa[1] * m]);
            data.extend_from_slice(&tb.data()[n * sb[1] * m..(n + 1) * sb[1] * m]);
        }
        let out = Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]], data)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::ConcatChannels(a, b), needs))
    }

    /// Mean over the spatial axes: `[N,C,D,H,W] -> [N,C,1,1,1]`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let [n, c, d, h, w] = t.dims5();
        let m = d * h * w;
        let mf = T::from_usize(m).unwrap();
        let data = t.data().chunks(m).map(|ch| ch.iter().copied().sum::<T>() / mf).collect();
        let out = Tensor::new(vec![n, c, 1, 1, 1], data).expect("shape");
        let needs = self.ng(x);
        self.push(out, Op::SpatialMean(x), needs)
    }

    /// Broadcast a `[N,C,1,1,1]` tensor over a spatial extent.
    pub fn expand_spatial(&mut self, x: Var, extent: [usize; 3]) -> Result<Var> {
        let t = self.value(x);
        let [n, c, d, h, w] = t.dims5();
        if (d, h, w) != (1, 1, 1) {
            return Err(Error::shape("expand_spatial", &[n, c, 1, 1, 1], t.shape()));
        }
        let m: usize = extent.iter().product();
        let mut data = Vec::with_capacity(n * c * m);
        for &v in t.data() {
            data.extend(std::iter::repeat_n(v, m));
        }
        let out = Tensor::new(vec![n, c, extent[0], extent[1], extent[2]], data)?;
        let needs = self.ng(x);
        Ok(self.push(out, Op::ExpandSpatial(x), needs))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let mean = t.sum() / T::from_usize(t.len().max(1)).unwrap();
        let needs = self.ng(x);
        self.push(Tensor::scalar(mean), Op::MeanAll(x), needs)
    }

    /// Weighted sum over batch items of soft-Dice + cross-entropy.
    /// Returns the scalar var and the per-item loss values.
    pub fn seg_loss(&mut self, logits: Var, target: &SegTarget) -> Result<(Var, Vec<f64>)> {
        let z = self.value(logits);
        let [n, k, d, h, w] = z.dims5();
        let m = d * h * w;
        if target.labels.len() != n * m || target.weights.len() != n {
            return Err(Error::shape(
                "seg_loss labels",
                &[n * m, n],
                &[target.labels.len(), target.weights.len()],
            ));
        }
        if let Some(&bad) = target
            .labels
            .iter()
            .find(|&&l| l != IGNORE_LABEL && l as usize >= k)
        {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {k})"
            )));
        }
        let probs = kernels::softmax_channels(z);
        let mut grad = Tensor::zeros(z.shape());
        let mut total = T::zero();
        let mut per_item = Vec::with_capacity(n);
        for s in 0..n {
            let p = &probs.data()[s * k * m..(s + 1) * k * m];
            let y = &target.labels[s * m..(s + 1) * m];
            let (loss, g) = seg_loss_item(p, y, k, m, target.include_background, target.smooth);
            per_item.push(loss.as_f64());
            let wgt = T::from_f64c(target.weights[s]);
            total = total + wgt * loss;
            for (dst, &gv) in grad.data_mut()[s * k * m..(s + 1) * k * m].iter_mut().zip(&g) {
                *dst = wgt * gv;
            }
        }
        let needs = self.ng(logits);
        Ok((
            self.push(Tensor::scalar(total), Op::SegLoss { logits, grad }, needs),
            per_item,
        ))
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward root", &[1], self.shape(out)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::full(self.shape(out), T::one()));
        let mut result = Grads {
            params: HashMap::new(),
            vars: HashMap::new(),
        };
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    result.vars.insert(Var(i), g);
                }
                Op::Param(id) => {
                    result.params.insert(*id, g);
                }
                op => self.propagate(op, &node.value, g, &mut grads),
            }
        }
        Ok(result)
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, g: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Conv { x, w, b, geom } => {
                let cg = kernels::conv_backward(
                    self.value(*x),
                    self.value(*w),
                    &g,
                    geom,
                    self.ng(*x),
                    self.ng(*w),
                );
                if let Some(dx) = cg.dx {
                    self.accum(grads, *x, dx);
                }
                self.accum(grads, *w, cg.dw);
                if let Some(b) = b {
                    self.accum(grads, *b, cg.db);
                }
            }
            Op::Upsample { x, factor } => {
                let dx = kernels::upsample_backward(&g, self.shape(*x), *factor);
                self.accum(grads, *x, dx);
            }
            Op::Add(a, b) => {
                if self.ng(*b) {
                    self.accum(grads, *b, g.clone());
                }
                self.accum(grads, *a, g);
            }
            Op::Sub(a, b) => {
                if self.ng(*b) {
                    self.accum(grads, *b, g.map(|v| -v));
                }
                self.accum(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let da = zip_map(&g, tb, |gv, bv| gv * bv);
                    self.accum(grads, *a, da);
                }
                if self.ng(*b) {
                    let db = zip_map(&g, ta, |gv, av| gv * av);
                    self.accum(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accum(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.accum(grads, *a, g),
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                let d = zip_map(&g, self.value(*a), |gv, x| if x > T::zero() { gv } else { gv * slope });
                self.accum(grads, *a, d);
            }
            Op::Softplus(a) => {
                let d = zip_map(&g, self.value(*a), |gv, x| gv * sigmoid(x));
                self.accum(grads, *a, d);
            }
            Op::Abs(a) => {
                let d = zip_map(&g, self.value(*a), |gv, x| {
                    if x == T::zero() {
                        T::zero()
                    } else {
                        gv * x.signum()
                    }
                });
                self.accum(grads, *a, d);
            }
            Op::Square(a) => {
                let two = T::one() + T::one();
                let d = zip_map(&g, self.value(*a), |gv, x| gv * two * x);
                self.accum(grads, *a, d);
            }
            Op::InstanceNorm { x, inv_std } => {
                let dx = kernels::instance_norm_backward(y, inv_std, &g);
                self.accum(grads, *x, dx);
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.value(*a).dims5();
                let sb = self.value(*b).dims5();
                let m = sa[2] * sa[3] * sa[4];
                let mut da = Vec::with_capacity(sa[0] * sa[1] * m);
                let mut db = Vec::with_capacity(sb[0] * sb[1] * m);
                let per = (sa[1] + sb[1]) * m;
                for n in 0..sa[0] {
                    let chunk = &g.data()[n * per..(n + 1) * per];
                    da.extend_from_slice(&chunk[..sa[1] * m]);
                    db.extend_from_slice(&chunk[sa[1] * m..]);
                }
                self.accum(grads, *a, Tensor::new(sa.to_vec(), da).expect("shape"));
                self.accum(grads, *b, Tensor::new(sb.to_vec(), db).expect("shape"));
            }
            Op::SpatialMean(x) => {
                let xs = self.shape(*x).to_vec();
                let m = xs[2] * xs[3] * xs[4];
                let mf = T::from_usize(m).unwrap();
                let mut data = Vec::with_capacity(xs.iter().product());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv / mf, m));
                }
                self.accum(grads, *x, Tensor::new(xs, data).expect("shape"));
            }
            Op::ExpandSpatial(x) => {
                let xs = self.shape(*x).to_vec();
                let [_, _, d, h, w] = g.dims5();
                let data = g.data().chunks(d * h * w).map(|c| c.iter().copied().sum()).collect();
                self.accum(grads, *x, Tensor::new(xs, data).expect("shape"));
            }
            Op::MeanAll(x) => {
                let xs = self.shape(*x);
                let n = T::from_usize(xs.iter().product::<usize>().max(1)).unwrap();
                let v = g.item() / n;
                self.accum(grads, *x, Tensor::full(xs, v));
            }
            Op::SegLoss { logits, grad } => {
                let s = g.item();
                self.accum(grads, *logits, grad.map(|v| v * s));
            }
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("matching shapes")
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + e^{-|x|})
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Soft-Dice + cross-entropy for one item given channel probabilities
/// `p[k*m + v]`. Returns the loss and ∂loss/∂logits.
fn seg_loss_item<T: Scalar>(
    p: &[T],
    y: &[u8],
    k: usize,
    m: usize,
    include_background: bool,
    smooth: f64,
) -> (T, Vec<T>) {
    let mut grad = vec![T::zero(); k * m];
    let valid = y.iter().filter(|&&l| l != IGNORE_LABEL).count();
    if valid == 0 {
        return (T::zero(), grad);
    }
    let nv = T::from_usize(valid).unwrap();
    let eps = T::from_f64c(smooth);
    let two = T::one() + T::one();

    // cross-entropy
    let mut ce = T::zero();
    for v in 0..m {
        let l = y[v];
        if l == IGNORE_LABEL {
            continue;
        }
        let pl = p[l as usize * m + v];
        ce = ce - pl.max(T::min_positive_value()).ln();
        for c in 0..k {
            let ind = if c == l as usize { T::one() } else { T::zero() };
            grad[c * m + v] = (p[c * m + v] - ind) / nv;
        }
    }
    ce = ce / nv;

    // soft Dice over the selected classes
    let first = if include_background { 0 } else { 1 };
    let classes: Vec<usize> = (first..k).collect();
    if classes.is_empty() {
        return (ce, grad);
    }
    let nc = T::from_usize(classes.len()).unwrap();
    let mut dice_sum = T::zero();
    // dL/dp for the Dice part, then pushed through the softmax Jacobian.
    let mut dp = vec![T::zero(); k * m];
    for &c in &classes {
        let mut inter = T::zero();
        let mut psum = T::zero();
        let mut gsum = T::zero();
        for v in 0..m {
            let l = y[v];
            if l == IGNORE_LABEL {
                continue;
            }
            let pv = p[c * m + v];
            psum = psum + pv;
            if l as usize == c {
                inter = inter + pv;
                gsum = gsum + T::one();
            }
        }
        let num = two * inter + eps;
        let den = psum + gsum + eps;
        dice_sum = dice_sum + num / den;
        for v in 0..m {
            let l = y[v];
            if l == IGNORE_LABEL {
                continue;
            }
            let ind = if l as usize == c { T::one() } else { T::zero() };
            dp[c * m + v] = -(two * ind * den - num) / (den * den) / nc;
        }
    }
    let dice_loss = T::one() - dice_sum / nc;
    for v in 0..m {
        if y[v] == IGNORE_LABEL {
            continue;
        }
        let dot: T = (0..k).map(|c| p[c * m + v] * dp[c * m + v]).sum();
        for c in 0..k {
            let pc = p[c * m + v];
            grad[c * m + v] = grad[c * m + v] + pc * (dp[c * m + v] - dot);
        }
    }
    (dice_loss + ce, grad)
}
