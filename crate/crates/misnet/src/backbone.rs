//! Feature extraction backbones and the receptive field block.
//!
//! A backbone is described by a [`BackboneDescriptor`] naming its per-level
//! channel counts, strides and input normalization constants. Two descriptors
//! are built in: `res2net`, a reduced-depth multi-scale residual network with
//! the channel widths downstream modules are tuned for, and `toy`, a narrow
//! variant of the same topology for fast tests. Weights initialize from the
//! registry's seeded RNG; a checkpoint loader may overwrite them afterwards
//! (see `checkpoint::load_pretrained_backbone`).

use crate::error::{Error, Result};
use crate::nn::{ConvBn, ParamRegistry};
use crate::tensor::{avg_pool2d, concat, Tape, Var};
use crate::types::ImageBatch;
use ndarray::ArrayD;

/// Static description of a backbone family.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneDescriptor {
    pub id: String,
    /// Channels of the five feature levels, shallowest first.
    pub channels: [usize; 5],
    /// Downsampling factor of each level relative to the input.
    pub strides: [usize; 5],
    /// Per-channel RGB normalization applied to inputs in [0,1].
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl BackboneDescriptor {
    pub fn lookup(id: &str) -> Result<BackboneDescriptor> {
        match id {
            "res2net" => Ok(BackboneDescriptor {
                id: id.to_string(),
                channels: [64, 256, 512, 1024, 2048],
                strides: [2, 4, 8, 16, 32],
                norm_mean: [0.485, 0.456, 0.406],
                norm_std: [0.229, 0.224, 0.225],
            }),
            "toy" => Ok(BackboneDescriptor {
                id: id.to_string(),
                channels: [8, 16, 32, 64, 128],
                strides: [2, 4, 8, 16, 32],
                norm_mean: [0.5, 0.5, 0.5],
                norm_std: [0.5, 0.5, 0.5],
            }),
            other => Err(Error::config(format!("unknown backbone id {other:?}"))),
        }
    }

    /// Channel-wise (x - mean) / std on a raw [0,1] RGB batch.
    pub fn normalize(&self, batch: &ImageBatch) -> ArrayD<f64> {
        let mut out = batch.data().clone();
        for c in 0..3 {
            let (m, s) = (self.norm_mean[c], self.norm_std[c]);
            out.index_axis_mut(ndarray::Axis(1), c).mapv_inplace(|v| (v - m) / s);
        }
        out.into_dyn()
    }
}

/// Multi-scale grouped residual block. The squeezed channels split into
/// groups; the first group is average-pooled and the rest pass through
/// strided 3x3 convs before the widths are merged back and residual-added.
struct Bottleneck {
    reduce: ConvBn,
    scales: Vec<ConvBn>,
    merge: ConvBn,
    skip: ConvBn,
    groups: usize,
    width: usize,
    stride: usize,
}

impl Bottleneck {
    fn new(reg: &ParamRegistry, name: &str, cin: usize, cout: usize, stride: usize) -> Bottleneck {
        let mid = (cout / 4).max(4);
        let groups = [4usize, 2, 1].into_iter().find(|g| mid % g == 0).unwrap();
        let width = mid / groups;
        let n_convs = if groups > 1 { groups - 1 } else { 1 };
        let scales = (0..n_convs)
            .map(|i| {
                ConvBn::new(reg, &format!("{name}.scale{i}"), width, width, (3, 3), stride, (1, 1), 1, true)
            })
            .collect();
        Bottleneck {
            reduce: ConvBn::new(reg, &format!("{name}.reduce"), cin, mid, (1, 1), 1, (0, 0), 1, true),
            scales,
            merge: ConvBn::new(reg, &format!("{name}.merge"), mid, cout, (1, 1), 1, (0, 0), 1, false),
            skip: ConvBn::new(reg, &format!("{name}.skip"), cin, cout, (1, 1), stride, (0, 0), 1, false),
            groups,
            width,
            stride,
        }
    }

    fn forward<'t>(&self, t: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        let r = self.reduce.forward(t, x, train);
        let mut parts = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let xg = r.narrow(1, g * self.width, self.width);
            if g == 0 && self.groups > 1 {
                parts.push(avg_pool2d(xg, 3, self.stride, 1, true));
            } else {
                let idx = if self.groups > 1 { g - 1 } else { 0 };
                parts.push(self.scales[idx].forward(t, xg, train));
            }
        }
        let y = self.merge.forward(t, concat(1, &parts), train);
        y.add(self.skip.forward(t, x, train)).relu()
    }
}

/// Five-level feature extractor: a strided 7x7 stem then four strided
/// bottleneck stages, producing maps at strides 2, 4, 8, 16, 32.
pub struct Backbone {
    descriptor: BackboneDescriptor,
    stem: ConvBn,
    stages: Vec<Bottleneck>,
}

impl Backbone {
    pub fn new(reg: &ParamRegistry, descriptor: BackboneDescriptor) -> Backbone {
        let ch = descriptor.channels;
        let stem = ConvBn::new(reg, "backbone.stem", 3, ch[0], (7, 7), 2, (3, 3), 1, true);
        let stages = (0..4)
            .map(|i| Bottleneck::new(reg, &format!("backbone.stage{}", i + 1), ch[i], ch[i + 1], 2))
            .collect();
        Backbone { descriptor, stem, stages }
    }

    pub fn descriptor(&self) -> &BackboneDescriptor {
        &self.descriptor
    }

    /// Runs the stem and stages, returning all five levels shallowest first.
    pub fn extract_features<'t>(&self, t: &'t Tape, x: Var<'t>, train: bool) -> [Var<'t>; 5] {
        let shape = x.shape();
        assert!(
            shape.len() == 4 && shape[2] % 32 == 0 && shape[3] % 32 == 0,
            "backbone input must be (B,3,H,W) with H,W divisible by 32, got {shape:?}"
        );
        let f1 = self.stem.forward(t, x, train);
        let f2 = self.stages[0].forward(t, f1, train);
        let f3 = self.stages[1].forward(t, f2, train);
        let f4 = self.stages[2].forward(t, f3, train);
        let f5 = self.stages[3].forward(t, f4, train);
        [f1, f2, f3, f4, f5]
    }
}

/// Receptive field block: parallel branches at dilations 1, 3, 5 and 7
/// (each dilated branch squeezes with a 1x1 then factored 1xk / kx1 convs),
/// concatenated, projected back with a 1x1 and residual-added via a 1x1
/// shortcut before the final ReLU.
pub struct Rfb {
    branches: Vec<Vec<ConvBn>>,
    project: ConvBn,
    shortcut: ConvBn,
}

impl Rfb {
    pub fn new(reg: &ParamRegistry, name: &str, cin: usize, cout: usize) -> Rfb {
        let mut branches = Vec::with_capacity(4);
        branches.push(vec![ConvBn::new(reg, &format!("{name}.b0.conv0"), cin, cout, (1, 1), 1, (0, 0), 1, false)]);
        for d in [3usize, 5, 7] {
            let p = (d - 1) / 2;
            branches.push(vec![
                ConvBn::new(reg, &format!("{name}.b{d}.conv0"), cin, cout, (1, 1), 1, (0, 0), 1, false),
                ConvBn::new(reg, &format!("{name}.b{d}.conv1"), cout, cout, (1, d), 1, (0, p), 1, false),
                ConvBn::new(reg, &format!("{name}.b{d}.conv2"), cout, cout, (d, 1), 1, (p, 0), 1, false),
                ConvBn::new(reg, &format!("{name}.b{d}.conv3"), cout, cout, (3, 3), 1, (d, d), d, false),
            ]);
        }
        Rfb {
            branches,
            project: ConvBn::new(reg, &format!("{name}.project"), 4 * cout, cout, (1, 1), 1, (0, 0), 1, false),
            shortcut: ConvBn::new(reg, &format!("{name}.shortcut"), cin, cout, (1, 1), 1, (0, 0), 1, false),
        }
    }

    pub fn forward<'t>(&self, t: &'t Tape, x: Var<'t>, train: bool) -> Var<'t> {
        let outs: Vec<Var<'t>> = self
            .branches
            .iter()
            .map(|convs| convs.iter().fold(x, |acc, c| c.forward(t, acc, train)))
            .collect();
        let cat = concat(1, &outs);
        let y = self.project.forward(t, cat, train);
        y.add(self.shortcut.forward(t, x, train)).relu()
    }
}
