//! Layer toolkit on top of the tape: parameter registry with deterministic
//! initialization order, convolution/batch-norm/linear layers, Adam, and
//! global-norm gradient clipping.

use crate::tensor::conv::conv2d;
use crate::tensor::ops::batch_norm;
use crate::tensor::{ArrayD, Parameter, Tape, Var};
use ndarray::{Array1, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;

/// Non-trainable named state (batch-norm running statistics).
pub struct Buffer {
    name: String,
    value: RefCell<ArrayD>,
}

impl Buffer {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> ArrayD {
        self.value.borrow().clone()
    }

    pub fn set_value(&self, v: ArrayD) {
        *self.value.borrow_mut() = v;
    }
}

/// Creates parameters/buffers in a fixed order from one seeded stream, so a
/// given seed always produces identical initial weights.
pub struct ParamRegistry {
    params: RefCell<Vec<Rc<Parameter>>>,
    buffers: RefCell<Vec<Rc<Buffer>>>,
    names: RefCell<HashSet<String>>,
    rng: RefCell<ChaCha8Rng>,
}

impl ParamRegistry {
    pub fn new(seed: u64) -> ParamRegistry {
        ParamRegistry {
            params: RefCell::new(Vec::new()),
            buffers: RefCell::new(Vec::new()),
            names: RefCell::new(HashSet::new()),
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn claim(&self, name: &str) {
        assert!(
            self.names.borrow_mut().insert(name.to_string()),
            "duplicate parameter name {name}"
        );
    }

    pub fn register(&self, name: &str, value: ArrayD) -> Rc<Parameter> {
        self.claim(name);
        let p = Parameter::new(name, value);
        self.params.borrow_mut().push(Rc::clone(&p));
        p
    }

    pub fn register_buffer(&self, name: &str, value: ArrayD) -> Rc<Buffer> {
        self.claim(name);
        let b = Rc::new(Buffer {
            name: name.to_string(),
            value: RefCell::new(value),
        });
        self.buffers.borrow_mut().push(Rc::clone(&b));
        b
    }

    pub fn uniform(&self, name: &str, shape: &[usize], bound: f64) -> Rc<Parameter> {
        let mut rng = self.rng.borrow_mut();
        let value = ArrayD::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>() * 2.0 * bound - bound);
        drop(rng);
        self.register(name, value)
    }

    pub fn zeros(&self, name: &str, shape: &[usize]) -> Rc<Parameter> {
        self.register(name, ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&self, name: &str, shape: &[usize]) -> Rc<Parameter> {
        self.register(name, ArrayD::ones(IxDyn(shape)))
    }

    pub fn params(&self) -> Vec<Rc<Parameter>> {
        self.params.borrow().clone()
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer>> {
        self.buffers.borrow().clone()
    }
}

/// 2-d convolution layer (optionally with bias).
pub struct Conv2d {
    pub weight: Rc<Parameter>,
    pub bias: Option<Rc<Parameter>>,
    out_channels: usize,
    stride: usize,
    pad: (usize, usize),
    dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: (usize, usize),
        dilation: usize,
        bias: bool,
    ) -> Conv2d {
        let fan_in = (cin * kernel.0 * kernel.1) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let weight = reg.uniform(
            &format!("{name}.weight"),
            &[cout, cin, kernel.0, kernel.1],
            bound,
        );
        let bias = bias.then(|| reg.uniform(&format!("{name}.bias"), &[cout], bound));
        Conv2d {
            weight,
            bias,
            out_channels: cout,
            stride,
            pad,
            dilation,
        }
    }

    pub fn forward<'t>(&self, t: &'t Tape, x: Var<'t>) -> Var<'t> {
        let w = t.param(&self.weight);
        let y = conv2d(x, w, self.stride, self.pad, self.dilation);
        match &self.bias {
            Some(b) => y.add(t.param(b).reshape(&[1, self.out_channels, 1, 1])),
            None => y,
        }
    }
}

/// Batch normalization over (B,·,H,W) maps or (B,·) vectors.
pub struct BatchNorm {
    pub gamma: Rc<Parameter>,
    pub beta: Rc<Parameter>,
    running_mean: Rc<Buffer>,
    running_var: Rc<Buffer>,
    momentum: f64,
    eps: f64,
    channels: usize,
}

impl BatchNorm {
    pub fn new(reg: &ParamRegistry, name: &str, channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: reg.ones(&format!("{name}.gamma"), &[channels]),
            beta: reg.zeros(&format!("{name}.beta"), &[channels]),
            running_mean: reg.register_buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: reg.register_buffer(&format!("{name}.running_var"), ArrayD::ones(IxDyn(&[channels]))),
            momentum: 0.1,
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward<'t>(&self, t: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        if train {
            let g = t.param(&self.gamma);
            let b = t.param(&self.beta);
            let (y, mean, var) = batch_norm(x, g, b, self.eps);
            let m = (x.value().len() / self.channels) as f64;
            let unbias = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            let mut rm = self.running_mean.value();
            let mut rv = self.running_var.value();
            for c in 0..self.channels {
                rm[c] = (1.0 - self.momentum) * rm[c] + self.momentum * mean[c];
                rv[c] = (1.0 - self.momentum) * rv[c] + self.momentum * var[c] * unbias;
            }
            self.running_mean.set_value(rm);
            self.running_var.set_value(rv);
            y
        } else {
            let rm = self.running_mean.value();
            let rv = self.running_var.value();
            let gv = self.gamma.value();
            let bv = self.beta.value();
            let mut scale = Array1::<f64>::zeros(self.channels);
            let mut shift = Array1::<f64>::zeros(self.channels);
            for c in 0..self.channels {
                let s = gv[IxDyn(&[c])] / (rv[IxDyn(&[c])] + self.eps).sqrt();
                scale[c] = s;
                shift[c] = bv[IxDyn(&[c])] - rm[IxDyn(&[c])] * s;
            }
            let ndim = x.shape().len();
            let mut chan_shape = vec![1usize; ndim];
            chan_shape[1] = self.channels;
            let scale = t.constant(
                scale
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&chan_shape))
                    .unwrap(),
            );
            let shift = t.constant(
                shift
                    .into_dyn()
                    .into_shape_with_order(IxDyn(&chan_shape))
                    .unwrap(),
            );
            x.mul(scale).add(shift)
        }
    }
}

/// Conv → BN → (optional ReLU), the standard block used throughout.
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    relu: bool,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        reg: &ParamRegistry,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: (usize, usize),
        dilation: usize,
        relu: bool,
    ) -> ConvBn {
        ConvBn {
            conv: Conv2d::new(reg, &format!("{name}.conv"), cin, cout, kernel, stride, pad, dilation, false),
            bn: BatchNorm::new(reg, &format!("{name}.bn"), cout),
            relu,
        }
    }

    pub fn forward<'t>(&self, t: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        let y = self.bn.forward(t, self.conv.forward(t, x), train);
        if self.relu {
            y.relu()
        } else {
            y
        }
    }
}

/// Fully connected layer; weight shaped (out, in).
pub struct Linear {
    pub weight: Rc<Parameter>,
    pub bias: Option<Rc<Parameter>>,
}

impl Linear {
    pub fn new(reg: &ParamRegistry, name: &str, cin: usize, cout: usize, bias: bool) -> Linear {
        let bound = (1.0 / cin as f64).sqrt();
        Linear {
            weight: reg.uniform(&format!("{name}.weight"), &[cout, cin], bound),
            bias: bias.then(|| reg.uniform(&format!("{name}.bias"), &[cout], bound)),
        }
    }

    pub fn forward<'t>(&self, t: &'t Tape, x: Var<'t>) -> Var<'t> {
        let w = t.param(&self.weight);
        let y = x.matmul2(w, true);
        match &self.bias {
            Some(b) => {
                let cout = b.shape()[0];
                y.add(t.param(b).reshape(&[1, cout]))
            }
            None => y,
        }
    }
}

/// Scales all parameter gradients so their global L2 norm is at most
/// `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(params: &[Rc<Parameter>], max_norm: f64) -> f64 {
    let mut total_sq = 0.0;
    for p in params {
        if let Some(g) = p.grad() {
            total_sq += g.iter().map(|v| v * v).sum::<f64>();
        }
    }
    let total = total_sq.sqrt();
    if total > max_norm && total > 0.0 {
        let scale = max_norm / total;
        for p in params {
            if let Some(mut g) = p.grad() {
                g *= scale;
                p.set_grad(g);
            }
        }
    }
    total
}

/// Adam with decoupled-from-nothing L2 weight decay folded into the gradient
/// (classic formulation).
pub struct Adam {
    params: Vec<Rc<Parameter>>,
    m: Vec<ArrayD>,
    v: Vec<ArrayD>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(params: Vec<Rc<Parameter>>, weight_decay: f64) -> Adam {
        let m = params
            .iter()
            .map(|p| ArrayD::zeros(IxDyn(&p.shape())))
            .collect();
        let v = params
            .iter()
            .map(|p| ArrayD::zeros(IxDyn(&p.shape())))
            .collect();
        Adam {
            params,
            m,
            v,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn zero_grad(&self) {
        for p in &self.params {
            p.zero_grad();
        }
    }

    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for (i, p) in self.params.iter().enumerate() {
            let Some(grad) = p.grad() else { continue };
            let mut w = p.value().to_owned();
            let mut g = grad;
            if wd != 0.0 {
                g.zip_mut_with(&w, |gv, &wv| *gv += wd * wv);
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |mv, &gv| *mv = b1 * *mv + (1.0 - b1) * gv);
            v.zip_mut_with(&g, |vv, &gv| *vv = b2 * *vv + (1.0 - b2) * gv * gv);
            ndarray::Zip::from(&mut w)
                .and(&*m)
                .and(&*v)
                .for_each(|wv, &mv, &vv| {
                    let mhat = mv / bc1;
                    let vhat = vv / bc2;
                    *wv -= lr * mhat / (vhat.sqrt() + eps);
                });
            p.set_value(w);
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// (t, m, v) snapshots in parameter order, for checkpointing.
    pub fn state(&self) -> (u64, &[ArrayD], &[ArrayD]) {
        (self.t, &self.m, &self.v)
    }

    pub fn load_state(&mut self, t: u64, m: Vec<ArrayD>, v: Vec<ArrayD>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        for (slot, arr) in self.m.iter_mut().zip(&m) {
            assert_eq!(slot.shape(), arr.shape(), "optimizer state shape");
        }
        self.t = t;
        self.m = m;
        self.v = v;
    }
}
