//! Parameter storage and the layer vocabulary used by the models: plain 2-D
//! convolutions (zero or reflection padded), transposed convolutions,
//! instance normalization, and dense layers.
//!
//! Parameters live in a [`ParamStore`] owned by the model. Each training
//! step binds the store onto a tape ([`ParamStore::bind`]), producing one
//! leaf per parameter; binding with `trainable = false` yields constants,
//! which is how a frozen network is run inside the other network's update.

use crate::ops::conv::ConvGeom;
use crate::scalar::Scalar;
use crate::tape::{Grads, Tape, Var};
use crate::Data;
use ndarray::IxDyn;
use rand::Rng;
use std::rc::Rc;
use std::sync::Arc;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named parameter arrays with stable ordering.
pub struct ParamStore<T: Scalar> {
    entries: Vec<(String, Data<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Data<T>) -> ParamId {
        self.entries.push((name.into(), value));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn get(&self, id: ParamId) -> &Data<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Data<T> {
        &mut self.entries[id.0].1
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Data<T>)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.len()).sum()
    }

    /// Total scalar parameters across a subset of ids.
    pub fn subset_len(&self, ids: &[ParamId]) -> usize {
        ids.iter().map(|id| self.entries[id.0].1.len()).sum()
    }

    /// Copies every parameter onto the tape as a leaf. `trainable` decides
    /// whether the leaves participate in differentiation.
    pub fn bind(&self, tape: &Tape<T>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, v)| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// Gradient values for every parameter, aligned with store order.
    pub fn grad_values(&self, tape: &Tape<T>, bound: &Bound, grads: &Grads) -> Vec<Option<Rc<Data<T>>>> {
        bound.vars.iter().map(|&v| grads.var(v).map(|gv| tape.value(gv))).collect()
    }
}

/// Per-step binding of a parameter store onto a tape.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean gaussian with the given standard deviation.
    Normal(f64),
    /// He initialization: gaussian with std `sqrt(2 / fan_in)`.
    Kaiming,
    Zeros,
}

/// How a convolution pads its input.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadKind {
    Zero(usize),
    Reflect(usize),
}

/// 2-D convolution with bias, fixed to a static input extent.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    geom: Arc<ConvGeom>,
    reflect_pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: PadKind,
        input_hw: (usize, usize),
        init: Init,
    ) -> Self {
        let (reflect_pad, zero_pad, h, w) = match pad {
            PadKind::Zero(p) => (0, p, input_hw.0, input_hw.1),
            PadKind::Reflect(p) => (p, 0, input_hw.0 + 2 * p, input_hw.1 + 2 * p),
        };
        let geom = Arc::new(ConvGeom::new(in_ch, out_ch, kernel, stride, zero_pad, h, w));
        let fan_in = in_ch * kernel * kernel;
        let w_id = store.add(format!("{name}.w"), init_array(rng, &[out_ch, in_ch, kernel, kernel], init, fan_in));
        let b_id = store.add(format!("{name}.b"), Data::zeros(IxDyn(&[1, out_ch, 1, 1])));
        Conv2d { w: w_id, b: b_id, geom, reflect_pad }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.geom.oh, self.geom.ow)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Var {
        let x = if self.reflect_pad > 0 { tape.pad_reflect(x, self.reflect_pad) } else { x };
        let y = tape.conv(x, bound.var(self.w), &self.geom);
        let shape = tape.shape(y);
        let b = tape.broadcast(bound.var(self.b), &shape);
        tape.add(y, b)
    }
}

/// Transposed 2-D convolution with bias (stride-2 upsampling in practice).
/// Implemented as the input-gradient of the matching forward convolution.
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    geom: Arc<ConvGeom>,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        input_hw: (usize, usize),
        init: Init,
    ) -> Self {
        let out_h = (input_hw.0 - 1) * stride + kernel - 2 * pad;
        let out_w = (input_hw.1 - 1) * stride + kernel - 2 * pad;
        // The underlying conv maps the transposed output back to its input.
        let geom = Arc::new(ConvGeom::new(out_ch, in_ch, kernel, stride, pad, out_h, out_w));
        assert_eq!((geom.oh, geom.ow), input_hw, "transposed conv geometry must invert exactly");
        let fan_in = in_ch * kernel * kernel;
        let w_id = store.add(format!("{name}.w"), init_array(rng, &[in_ch, out_ch, kernel, kernel], init, fan_in));
        let b_id = store.add(format!("{name}.b"), Data::zeros(IxDyn(&[1, out_ch, 1, 1])));
        ConvTranspose2d { w: w_id, b: b_id, geom }
    }

    pub fn out_hw(&self) -> (usize, usize) {
        (self.geom.h, self.geom.w)
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Var {
        let y = tape.conv_igrad(x, bound.var(self.w), &self.geom);
        let shape = tape.shape(y);
        let b = tape.broadcast(bound.var(self.b), &shape);
        tape.add(y, b)
    }
}

/// Instance normalization with learned affine parameters. A zero input maps
/// to the zero output (epsilon-stabilized denominator).
pub struct InstanceNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    eps: f64,
}

impl InstanceNorm2d {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Data::from_elem(IxDyn(&[1, channels, 1, 1]), T::one()));
        let beta = store.add(format!("{name}.beta"), Data::zeros(IxDyn(&[1, channels, 1, 1])));
        InstanceNorm2d { gamma, beta, eps: 1e-5 }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Var {
        let shape = tape.shape(x);
        let (h, w) = (shape[2], shape[3]);
        let inv_n = T::from_f64(1.0 / (h * w) as f64);
        let mu = tape.scale(tape.sum_axes(x, &[2, 3]), inv_n);
        let centered = tape.sub(x, tape.broadcast(mu, &shape));
        let var = tape.scale(tape.sum_axes(tape.mul(centered, centered), &[2, 3]), inv_n);
        let inv_std = tape.pow_const(tape.add_scalar(var, T::from_f64(self.eps)), T::from_f64(-0.5));
        let normed = tape.mul(centered, tape.broadcast(inv_std, &shape));
        let scaled = tape.mul(normed, tape.broadcast(bound.var(self.gamma), &shape));
        tape.add(scaled, tape.broadcast(bound.var(self.beta), &shape))
    }
}

/// Dense layer `y = x W^T + b` on `(B, in)` inputs.
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
    ) -> Self {
        let w = store.add(format!("{name}.w"), init_array(rng, &[out_dim, in_dim], init, in_dim));
        let b = store.add(format!("{name}.b"), Data::zeros(IxDyn(&[1, out_dim])));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &Tape<T>, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.w), false, true);
        let shape = tape.shape(y);
        let b = tape.broadcast(bound.var(self.b), &shape);
        tape.add(y, b)
    }
}

fn init_array<T: Scalar, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], init: Init, fan_in: usize) -> Data<T> {
    let std = match init {
        Init::Normal(s) => s,
        Init::Kaiming => (2.0 / fan_in as f64).sqrt(),
        Init::Zeros => 0.0,
    };
    if std == 0.0 {
        return Data::zeros(IxDyn(shape));
    }
    let n: usize = shape.iter().product();
    let vals: Vec<T> = (0..n)
        .map(|_| {
            let z: T = T::sample_standard_normal(rng);
            z * T::from_f64(std)
        })
        .collect();
    Data::from_shape_vec(IxDyn(shape), vals).unwrap()
}
