//! Decoding: attention-filtered low-level features, per-level balanced
//! fusion with side-output heads, and the full network assembly.

use crate::attention::Pam;
use crate::backbone::{Backbone, BackboneDescriptor, Rfb};
use crate::config::{reduced_dim, validate_config, ModelConfig};
use crate::error::Result;
use crate::fusion::{Hfm, Lfm, SelectionWeights, Ssfm};
use crate::nn::{Conv2d, ConvBn, Linear, ParamRegistry};
use crate::tensor::{concat, resize_bilinear, Tape, Var};
use crate::types::{ImageBatch, ProbMap};
use ndarray::Ix4;

/// Channel attention (shared two-layer MLP over average- and max-pooled
/// descriptors) followed by spatial attention (7x7 conv over channel-pooled
/// maps), each applied as a sigmoid gate.
pub struct Cbam {
    fc1: Linear,
    fc2: Linear,
    spatial: Conv2d,
}

impl Cbam {
    pub fn new(reg: &ParamRegistry, name: &str, c: usize) -> Cbam {
        let hidden = (c / 16).max(1);
        Cbam {
            fc1: Linear::new(reg, &format!("{name}.fc1"), c, hidden, false),
            fc2: Linear::new(reg, &format!("{name}.fc2"), hidden, c, true),
            spatial: Conv2d::new(reg, &format!("{name}.spatial"), 2, 1, (7, 7), 1, (3, 3), 1, true),
        }
    }

    pub fn forward<'t>(&self, t: &'t Tape, x: Var<'t>) -> Var<'t> {
        let shape = x.shape();
        let (b, c) = (shape[0], shape[1]);
        let avg = x.mean_axes(&[2, 3], false);
        let mx = x.max_axis(3).max_axis(2).reshape(&[b, c]);
        let mlp = |v: Var<'t>| self.fc2.forward(t, self.fc1.forward(t, v).relu());
        let ca = mlp(avg).add(mlp(mx)).sigmoid().reshape(&[b, c, 1, 1]);
        let x = x.mul(ca);
        let pooled = concat(1, &[x.mean_axes(&[1], true), x.max_axis(1)]);
        let sa = self.spatial.forward(t, pooled).sigmoid();
        x.mul(sa)
    }
}

/// One decoding level: gathers the filtered low-level feature, the attention
/// feature and the level feature at a common working resolution, compresses
/// them, re-weights by the raw global-average gate, and emits 1-channel
/// logits that are residually chained onto the deeper prediction at the
/// level's native resolution.
pub struct Bwm {
    fuse: Option<ConvBn>,
    head: Conv2d,
    takes_lf: bool,
}

impl Bwm {
    /// `use_lf` includes the filtered low-level stream in the concatenation;
    /// `use_gate_fusion` selects gated conv fusion over plain addition.
    pub fn new(reg: &ParamRegistry, name: &str, c: usize, use_lf: bool, use_gate_fusion: bool) -> Bwm {
        let cin = if use_lf { 3 * c } else { 2 * c };
        Bwm {
            fuse: use_gate_fusion
                .then(|| ConvBn::new(reg, &format!("{name}.fuse"), cin, c, (3, 3), 1, (1, 1), 1, true)),
            head: Conv2d::new(reg, &format!("{name}.head"), c, 1, (1, 1), 1, (0, 0), 1, true),
            takes_lf: use_lf,
        }
    }

    /// `f_clf` must be present exactly when the module was built with the
    /// low-level stream. Returns the refined feature and the level logits.
    pub fn forward<'t>(
        &self,
        t: &'t Tape,
        f_clf: Option<Var<'t>>,
        f_rb: Var<'t>,
        f_i: Var<'t>,
        m_next: Var<'t>,
        work_hw: (usize, usize),
        train: bool,
    ) -> (Var<'t>, Var<'t>) {
        assert_eq!(f_clf.is_some(), self.takes_lf, "low-level stream presence must match construction");
        let (wh, ww) = work_hw;
        let rb = resize_bilinear(f_rb, wh, ww);
        let fi = resize_bilinear(f_i, wh, ww);
        let mut parts = Vec::with_capacity(3);
        if let Some(clf) = f_clf {
            assert_eq!(
                (clf.shape()[2], clf.shape()[3]),
                work_hw,
                "filtered low-level feature must already be at the working resolution"
            );
            parts.push(clf);
        }
        parts.push(rb);
        parts.push(fi);
        let feature = match &self.fuse {
            Some(conv) => {
                let z = conv.forward(t, concat(1, &parts), train);
                let gate = z.mean_axes(&[2, 3], true);
                z.mul(gate)
            }
            None => parts[1..].iter().fold(parts[0], |acc, p| acc.add(*p)),
        };
        let logits = self.head.forward(t, feature);
        let native = (f_i.shape()[2], f_i.shape()[3]);
        let m_i = resize_bilinear(logits, native.0, native.1)
            .add(resize_bilinear(m_next, native.0, native.1));
        (feature, m_i)
    }
}

/// The four supervised logit maps plus the final probability map.
pub struct SideOutputs<'t> {
    pub m_fuse: Var<'t>,
    pub m5: Var<'t>,
    pub m4: Var<'t>,
    pub m3: Var<'t>,
    pub final_prob: Var<'t>,
    pub selection: Option<SelectionWeights>,
}

impl<'t> SideOutputs<'t> {
    /// Supervised maps, deepest first, as (name, logits).
    pub fn supervised(&self) -> [(&'static str, Var<'t>); 4] {
        [("m_fuse", self.m_fuse), ("m5", self.m5), ("m4", self.m4), ("m3", self.m3)]
    }
}

/// The full segmentation network.
pub struct MisNet {
    cfg: ModelConfig,
    registry: ParamRegistry,
    backbone: Backbone,
    lfm: Option<Lfm>,
    hfm: Option<Hfm>,
    solo_rfbs: Option<[Rfb; 3]>,
    ssfm: Ssfm,
    cbam: Option<Cbam>,
    pams: Option<[Pam; 3]>,
    bwms: [Bwm; 3],
}

impl MisNet {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<MisNet> {
        let cfg = validate_config(cfg.clone())?;
        let desc = BackboneDescriptor::lookup(&cfg.backbone_id)?;
        let reg = ParamRegistry::new(seed);
        let c = cfg.squeeze_channels;
        let d = reduced_dim(c, cfg.reduction_ratio, cfg.min_reduced_dim);
        let ch = desc.channels;

        let backbone = Backbone::new(&reg, desc);
        let lfm = (cfg.use_lfm_ssfm || cfg.use_lfm_bwm)
            .then(|| Lfm::new(&reg, "lfm", ch[0], ch[1], c));
        let hfm = cfg.use_hfm.then(|| Hfm::new(&reg, "hfm", ch[2], ch[3], ch[4], c));
        let solo_rfbs = (!cfg.use_hfm).then(|| {
            [
                Rfb::new(&reg, "rfb3", ch[2], c),
                Rfb::new(&reg, "rfb4", ch[3], c),
                Rfb::new(&reg, "rfb5", ch[4], c),
            ]
        });
        let ssfm = Ssfm::new(&reg, "ssfm", c, d, cfg.use_lfm_ssfm, cfg.use_hfm, cfg.use_ssfm);
        let cbam = cfg.use_lfm_bwm.then(|| Cbam::new(&reg, "cbam", c));
        let pams = cfg.use_pam.then(|| {
            let mk = |lvl: usize| Pam::new(&reg, &format!("pam{lvl}"), c, cfg.use_pa_ra, cfg.use_pa_ba);
            [mk(5), mk(4), mk(3)]
        });
        let bwms = {
            let mk = |lvl: usize| Bwm::new(&reg, &format!("bwm{lvl}"), c, cfg.use_lfm_bwm, cfg.use_bwm);
            [mk(5), mk(4), mk(3)]
        };
        Ok(MisNet {
            cfg,
            registry: reg,
            backbone,
            lfm,
            hfm,
            solo_rfbs,
            ssfm,
            cbam,
            pams,
            bwms,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn registry(&self) -> &ParamRegistry {
        &self.registry
    }

    pub fn descriptor(&self) -> &BackboneDescriptor {
        self.backbone.descriptor()
    }

    /// Full forward pass over a normalized input tensor (B,3,H,W).
    pub fn forward<'t>(&self, t: &'t Tape, x: Var<'t>, train: bool) -> SideOutputs<'t> {
        let (in_h, in_w) = (x.shape()[2], x.shape()[3]);
        let f = self.backbone.extract_features(t, x, train);

        let lf = self.lfm.as_ref().map(|m| m.forward(t, f[0], f[1], train));
        let (hf, levels) = match (&self.hfm, &self.solo_rfbs) {
            (Some(hfm), _) => {
                let (s_hf, rfbs) = hfm.forward(t, f[2], f[3], f[4], train);
                (Some(s_hf), rfbs)
            }
            (None, Some(rfbs)) => (
                None,
                [
                    rfbs[0].forward(t, f[2], train),
                    rfbs[1].forward(t, f[3], train),
                    rfbs[2].forward(t, f[4], train),
                ],
            ),
            (None, None) => unreachable!("config validation requires a deep or shallow stream"),
        };

        let lf_for_ssfm = if self.cfg.use_lfm_ssfm { lf } else { None };
        let fused = self.ssfm.forward(t, lf_for_ssfm, hf, train);
        let work_hw = (fused.feature.shape()[2], fused.feature.shape()[3]);
        let f_clf = self.cbam.as_ref().map(|cb| {
            cb.forward(t, lf.expect("cbam requires the low-level stream"))
        });

        // decode deepest to shallowest, chaining priors
        let mut m_next = fused.logits;
        let mut side = Vec::with_capacity(3);
        for (slot, level_idx) in [2usize, 1, 0].into_iter().enumerate() {
            let f_i = levels[level_idx];
            let f_rb = match &self.pams {
                Some(pams) => pams[slot].forward(t, f_i, m_next, train).f_rb,
                None => f_i,
            };
            let (_, m_i) = self.bwms[slot].forward(t, f_clf, f_rb, f_i, m_next, work_hw, train);
            side.push(m_i);
            m_next = m_i;
        }

        let final_prob = resize_bilinear(side[2], in_h, in_w).sigmoid();
        SideOutputs {
            m_fuse: fused.logits,
            m5: side[0],
            m4: side[1],
            m3: side[2],
            final_prob,
            selection: fused.weights,
        }
    }

    /// Eval-mode inference returning one probability map per batch item.
    pub fn predict(&self, batch: &ImageBatch) -> Result<Vec<ProbMap>> {
        let t = Tape::eval();
        let x = t.constant(self.descriptor().normalize(batch));
        let out = self.forward(&t, x, false);
        let probs = out.final_prob.value();
        let p4 = probs.view().into_dimensionality::<Ix4>().expect("final map is 4-d");
        (0..batch.batch_size())
            .map(|b| {
                let plane = p4
                    .index_axis(ndarray::Axis(0), b)
                    .index_axis(ndarray::Axis(0), 0)
                    .to_owned();
                // clamp away float fuzz from resize before range validation
                ProbMap::new(plane.mapv(|v| v.clamp(0.0, 1.0)))
            })
            .collect()
    }
}
