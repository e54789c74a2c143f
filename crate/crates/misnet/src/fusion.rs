//! Feature fusion: shallow-level fusion, deep-level cascaded aggregation,
//! and the selective fusion module that mixes the two streams per channel.

use crate::nn::{Conv2d, ConvBn, Linear, ParamRegistry};
use crate::tensor::{avg_pool2d, concat, resize_bilinear, Tape, Var};
use crate::backbone::Rfb;
use ndarray::ArrayD;
use std::rc::Rc;

/// Fuses backbone levels 1 and 2 into one map at the working resolution
/// (stride 8). Each level passes an RFB and a 1x1 adjust; the deeper map is
/// upsampled to the shallower resolution; both take a 3x3 conv, then the
/// concatenation is refined by two 3x3 convs and average-pool downsampled.
pub struct Lfm {
    rfb1: Rfb,
    rfb2: Rfb,
    adjust1: ConvBn,
    adjust2: ConvBn,
    conv1: ConvBn,
    conv2: ConvBn,
    cat1: ConvBn,
    cat2: ConvBn,
}

impl Lfm {
    pub fn new(reg: &ParamRegistry, name: &str, c1: usize, c2: usize, c: usize) -> Lfm {
        Lfm {
            rfb1: Rfb::new(reg, &format!("{name}.rfb1"), c1, c),
            rfb2: Rfb::new(reg, &format!("{name}.rfb2"), c2, c),
            adjust1: ConvBn::new(reg, &format!("{name}.adjust1"), c, c, (1, 1), 1, (0, 0), 1, false),
            adjust2: ConvBn::new(reg, &format!("{name}.adjust2"), c, c, (1, 1), 1, (0, 0), 1, false),
            conv1: ConvBn::new(reg, &format!("{name}.conv1"), c, c, (3, 3), 1, (1, 1), 1, true),
            conv2: ConvBn::new(reg, &format!("{name}.conv2"), c, c, (3, 3), 1, (1, 1), 1, true),
            cat1: ConvBn::new(reg, &format!("{name}.cat1"), 2 * c, c, (3, 3), 1, (1, 1), 1, true),
            cat2: ConvBn::new(reg, &format!("{name}.cat2"), c, c, (3, 3), 1, (1, 1), 1, true),
        }
    }

    /// f1 at stride 2, f2 at stride 4; output at stride 8.
    pub fn forward<'t>(&self, t: &'t Tape, f1: Var<'t>, f2: Var<'t>, train: bool) -> Var<'t> {
        let a = self.adjust1.forward(t, self.rfb1.forward(t, f1, train), train);
        let b = self.adjust2.forward(t, self.rfb2.forward(t, f2, train), train);
        let (h, w) = (a.shape()[2], a.shape()[3]);
        let b = resize_bilinear(b, h, w);
        let a = self.conv1.forward(t, a, train);
        let b = self.conv2.forward(t, b, train);
        let y = self.cat1.forward(t, concat(1, &[a, b]), train);
        let y = self.cat2.forward(t, y, train);
        avg_pool2d(y, 4, 4, 0, true)
    }
}

/// Cascaded partial decoder over backbone levels 3-5. Deeper maps gate
/// shallower ones multiplicatively, then cascade through concatenations.
/// Also hands back the three RFB-processed level features, which the
/// attention and decoding stages reuse.
pub struct Hfm {
    rfb3: Rfb,
    rfb4: Rfb,
    rfb5: Rfb,
    up1: ConvBn,
    up2: ConvBn,
    up3: ConvBn,
    up4: ConvBn,
    up5: ConvBn,
    cat2: ConvBn,
    cat3: ConvBn,
    out: ConvBn,
}

impl Hfm {
    pub fn new(reg: &ParamRegistry, name: &str, c3: usize, c4: usize, c5: usize, c: usize) -> Hfm {
        let cb = |n: &str, cin: usize, cout: usize, k: usize| {
            ConvBn::new(reg, &format!("{name}.{n}"), cin, cout, (k, k), 1, ((k - 1) / 2, (k - 1) / 2), 1, false)
        };
        Hfm {
            rfb3: Rfb::new(reg, &format!("{name}.rfb3"), c3, c),
            rfb4: Rfb::new(reg, &format!("{name}.rfb4"), c4, c),
            rfb5: Rfb::new(reg, &format!("{name}.rfb5"), c5, c),
            up1: cb("up1", c, c, 3),
            up2: cb("up2", c, c, 3),
            up3: cb("up3", c, c, 3),
            up4: cb("up4", c, c, 3),
            up5: cb("up5", 2 * c, 2 * c, 3),
            cat2: cb("cat2", 2 * c, 2 * c, 3),
            cat3: cb("cat3", 3 * c, 3 * c, 3),
            out: cb("out", 3 * c, c, 3),
        }
    }

    /// Levels 3-5 from the backbone; returns the stride-8 fused map and the
    /// RFB-processed per-level features (shallowest first).
    pub fn forward<'t>(
        &self,
        t: &'t Tape,
        f3: Var<'t>,
        f4: Var<'t>,
        f5: Var<'t>,
        train: bool,
    ) -> (Var<'t>, [Var<'t>; 3]) {
        let x3 = self.rfb3.forward(t, f3, train);
        let x4 = self.rfb4.forward(t, f4, train);
        let x5 = self.rfb5.forward(t, f5, train);
        let hw = |v: Var<'t>| (v.shape()[2], v.shape()[3]);
        let (h4, w4) = hw(x4);
        let (h3, w3) = hw(x3);

        let up = |v: Var<'t>, h: usize, w: usize| resize_bilinear(v, h, w);
        let x4_1 = self.up1.forward(t, up(x5, h4, w4), train).mul(x4);
        let x3_1 = self
            .up2
            .forward(t, up(x5, h3, w3), train)
            .mul(self.up3.forward(t, up(x4, h3, w3), train))
            .mul(x3);
        let x4_2 = self.cat2.forward(
            t,
            concat(1, &[x4_1, self.up4.forward(t, up(x5, h4, w4), train)]),
            train,
        );
        let x3_2 = self.cat3.forward(
            t,
            concat(1, &[x3_1, self.up5.forward(t, up(x4_2, h3, w3), train)]),
            train,
        );
        (self.out.forward(t, x3_2, train), [x3, x4, x5])
    }
}

/// Per-channel selection weights produced by the fusion module, averaged
/// over the batch for inspection dumps.
#[derive(Debug, Clone)]
pub struct SelectionWeights {
    pub g: Vec<f64>,
    pub h: Vec<f64>,
}

impl SelectionWeights {
    /// CSV rows (channel, g, h) for offline inspection.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("channel,g,h\n");
        for (i, (g, h)) in self.g.iter().zip(&self.h).enumerate() {
            s.push_str(&format!("{i},{g},{h}\n"));
        }
        s
    }
}

/// Output of the selective fusion stage: the mixed guidance feature, its
/// 1-channel logit head, and the selection weights when the selective path
/// ran.
pub struct FusionOutput<'t> {
    pub feature: Var<'t>,
    pub logits: Var<'t>,
    pub weights: Option<SelectionWeights>,
}

/// Selectively mixes the low-level and high-level fused streams. Two rounds
/// of cross-fusion (3x3 and 5x5 convs over swapped concatenations) summarize
/// both, a squeezed descriptor gates a two-way per-channel softmax, and each
/// channel of the output is the convex blend of the two streams. Ablation
/// flags swap this for plain addition or a single-branch 3x3 conv.
pub struct Ssfm {
    squeeze_lf: Option<Conv2d>,
    squeeze_hf: Option<Conv2d>,
    cross: Option<[ConvBn; 4]>,
    fc: Option<Linear>,
    fc_bn: Option<crate::nn::BatchNorm>,
    g_mat: Option<Rc<crate::tensor::Parameter>>,
    h_mat: Option<Rc<crate::tensor::Parameter>>,
    solo: Option<ConvBn>,
    head: Conv2d,
    use_lfm: bool,
    use_hfm: bool,
    use_select: bool,
}

/// Per-channel convex blend of two equally-shaped streams: broadcastable
/// (B,C) gates scale each stream's channels, so with g + h = 1 every output
/// value lies between the two input values.
pub fn selective_mix<'t>(g: Var<'t>, h: Var<'t>, s_lf: Var<'t>, s_hf: Var<'t>) -> Var<'t> {
    let bsz = s_lf.shape()[0];
    let c = s_lf.shape()[1];
    let g4 = g.reshape(&[bsz, c, 1, 1]);
    let h4 = h.reshape(&[bsz, c, 1, 1]);
    g4.mul(s_lf).add(h4.mul(s_hf))
}

impl Ssfm {
    /// `c` is the stream channel count, `d` the reduced descriptor length.
    pub fn new(
        reg: &ParamRegistry,
        name: &str,
        c: usize,
        d: usize,
        use_lfm: bool,
        use_hfm: bool,
        use_select: bool,
    ) -> Ssfm {
        let both = use_lfm && use_hfm;
        let selective = both && use_select;
        let bound = 1.0 / (d as f64).sqrt();
        Ssfm {
            squeeze_lf: selective
                .then(|| Conv2d::new(reg, &format!("{name}.squeeze_lf"), c, c, (1, 1), 1, (0, 0), 1, true)),
            squeeze_hf: selective
                .then(|| Conv2d::new(reg, &format!("{name}.squeeze_hf"), c, c, (1, 1), 1, (0, 0), 1, true)),
            cross: selective.then(|| {
                let cf = |n: &str, k: usize| {
                    ConvBn::new(reg, &format!("{name}.{n}"), 2 * c, c, (k, k), 1, ((k - 1) / 2, (k - 1) / 2), 1, true)
                };
                [cf("cross3_r1", 3), cf("cross5_r1", 5), cf("cross3_r2", 3), cf("cross5_r2", 5)]
            }),
            fc: selective.then(|| Linear::new(reg, &format!("{name}.fc"), c, d, false)),
            fc_bn: selective.then(|| crate::nn::BatchNorm::new(reg, &format!("{name}.fc_bn"), d)),
            g_mat: selective.then(|| reg.uniform(&format!("{name}.g"), &[c, d], bound)),
            h_mat: selective.then(|| reg.uniform(&format!("{name}.h"), &[c, d], bound)),
            solo: (!both)
                .then(|| ConvBn::new(reg, &format!("{name}.solo"), c, c, (3, 3), 1, (1, 1), 1, true)),
            head: Conv2d::new(reg, &format!("{name}.head"), c, 1, (1, 1), 1, (0, 0), 1, true),
            use_lfm,
            use_hfm,
            use_select,
        }
    }

    /// Both rounds of cross-fusion.
    fn cross_fuse<'t>(&self, t: &'t Tape, s_lf: Var<'t>, s_hf: Var<'t>, train: bool) -> (Var<'t>, Var<'t>) {
        let cross = self.cross.as_ref().expect("cross-fusion requires the selective path");
        let s1 = cross[0].forward(t, concat(1, &[s_lf, s_hf]), train);
        let s2 = cross[1].forward(t, concat(1, &[s_hf, s_lf]), train);
        let s3 = cross[2].forward(t, concat(1, &[s1, s2]), train);
        let s4 = cross[3].forward(t, concat(1, &[s2, s1]), train);
        (s3, s4)
    }

    pub fn forward<'t>(
        &self,
        t: &'t Tape,
        lf: Option<Var<'t>>,
        hf: Option<Var<'t>>,
        train: bool,
    ) -> FusionOutput<'t> {
        let feature = match (lf, hf) {
            (Some(lf), Some(hf)) if self.use_select => {
                let s_lf = self.squeeze_lf.as_ref().unwrap().forward(t, lf);
                let s_hf = self.squeeze_hf.as_ref().unwrap().forward(t, hf);
                let (s3, s4) = self.cross_fuse(t, s_lf, s_hf, train);
                let s_lhf = s3.add(s4);
                // per-channel descriptor -> reduced gate vector
                let k = s_lhf.mean_axes(&[2, 3], false);
                let q = self
                    .fc_bn
                    .as_ref()
                    .unwrap()
                    .forward(t, self.fc.as_ref().unwrap().forward(t, k), train)
                    .sigmoid();
                let gm = t.param(self.g_mat.as_ref().unwrap());
                let hm = t.param(self.h_mat.as_ref().unwrap());
                let a = q.matmul2(gm, true);
                let b = q.matmul2(hm, true);
                // stabilized two-way softmax over the pair of logits
                let m = a.maximum(b);
                let ea = a.sub(m).exp();
                let eb = b.sub(m).exp();
                let denom = ea.add(eb);
                let g = ea.div(denom);
                let h = eb.div(denom);
                let c = s_lf.shape()[1];
                let d = selective_mix(g, h, s_lf, s_hf);
                let head = self.head.forward(t, d);
                let mean_rows = |v: &ArrayD<f64>| -> Vec<f64> {
                    (0..c)
                        .map(|ci| v.index_axis(ndarray::Axis(1), ci).mean().unwrap())
                        .collect()
                };
                return FusionOutput {
                    feature: d,
                    logits: head,
                    weights: Some(SelectionWeights {
                        g: mean_rows(&g.value().to_owned()),
                        h: mean_rows(&h.value().to_owned()),
                    }),
                };
            }
            (Some(lf), Some(hf)) => lf.add(hf),
            (Some(lf), None) => self.solo.as_ref().unwrap().forward(t, lf, train),
            (None, Some(hf)) => self.solo.as_ref().unwrap().forward(t, hf, train),
            (None, None) => panic!("fusion requires at least one stream"),
        };
        let logits = self.head.forward(t, feature);
        FusionOutput { feature, logits, weights: None }
    }

    pub fn expects_lf(&self) -> bool {
        self.use_lfm
    }

    pub fn expects_hf(&self) -> bool {
        self.use_hfm
    }
}
