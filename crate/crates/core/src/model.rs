//! The full semantic change detection network.

use serde::{Deserialize, Serialize};

use crate::btam::{Btam, DiffHead};
use crate::data::LabelMap;
use crate::encoder::{BranchSpec, Encoder, LocalBranch, PriorBranch, PRIOR_PREFIX};
use crate::error::{Result, ScdError};
use crate::fusion::{FusedFeatures, Fusion, GateParams, Gspm};
use crate::graph::{Graph, Var};
use crate::heads::{BoundaryDecoder, ChangeDecoder, Predictions, SemanticDecoder, TaskInteraction};
use crate::params::{Init, ParamKind, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub classes: usize,
    pub channels_shallow: usize,
    pub channels_deep: usize,
    pub channels_msa: usize,
    pub depths: [usize; 4],
    pub decoder_width: usize,
    /// Fixed shallow gate.
    pub alpha: f64,
    pub use_sam_branch: bool,
    pub use_gspm: bool,
    pub use_btam: bool,
    pub canonical_order: bool,
    pub prior_seed: u64,
    pub init_seed: u64,
    /// Change probability at or above which a pixel counts as changed.
    pub change_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            channels_shallow: 64,
            channels_deep: 256,
            channels_msa: 256,
            depths: [2, 2, 2, 2],
            decoder_width: 64,
            alpha: 0.5,
            use_sam_branch: true,
            use_gspm: true,
            use_btam: true,
            canonical_order: true,
            prior_seed: 1234,
            init_seed: 42,
            change_threshold: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ScdError::Config(m));
        if !(3..=255).contains(&self.classes) {
            return bad(format!("classes must lie in 3..=255, got {}", self.classes));
        }
        if [self.channels_shallow, self.channels_deep, self.channels_msa, self.decoder_width].contains(&0) {
            return bad("channel widths must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.change_threshold) {
            return bad(format!("change_threshold must lie in [0, 1], got {}", self.change_threshold));
        }
        if self.use_gspm && !self.use_sam_branch {
            return bad("use_gspm requires use_sam_branch".into());
        }
        Ok(())
    }

    /// Ablation flags as `(sam, gspm, btam)`.
    pub fn flags(&self) -> (bool, bool, bool) {
        (self.use_sam_branch, self.use_gspm, self.use_btam)
    }
}

/// Change feature extractor: the temporal module or its plain difference
/// replacement.
#[derive(Clone, Debug)]
pub enum ChangeBranch {
    Btam(Btam),
    Diff(DiffHead),
}

#[derive(Clone, Debug)]
pub struct ScdNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub change_branch: ChangeBranch,
    pub semantic: SemanticDecoder,
    pub change: ChangeDecoder,
    pub boundary: BoundaryDecoder,
    pub interaction: TaskInteraction,
}

impl ScdNet {
    /// Build the network and its freshly initialized parameters.
    pub fn new<T: Scalar>(config: ModelConfig) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = Self::build(&mut store, config)?;
        Ok((net, store))
    }

    fn build<T: Scalar>(store: &mut ParamStore<T>, config: ModelConfig) -> Result<Self> {
        let c = &config;
        let mut init = Init::new(c.init_seed);
        let local = LocalBranch::new(store, &mut init, c.channels_shallow, c.channels_deep, c.depths);
        let prior = c.use_sam_branch.then(|| {
            let spec = BranchSpec { frozen: true, channels_shallow: c.channels_shallow, channels_deep: c.channels_deep, seed: c.prior_seed };
            PriorBranch::new(store, &spec)
        });
        let gates = if c.use_sam_branch { Some(GateParams::new(store, "fusion.dfg", c.alpha)?) } else { None };
        let gspm = if c.use_gspm { Some(Gspm::new(store, &mut init, "fusion.gspm", c.channels_shallow)?) } else { None };
        let change_branch = if c.use_btam {
            ChangeBranch::Btam(Btam::new(store, &mut init, "btam", c.channels_deep, c.channels_msa, c.canonical_order))
        } else {
            ChangeBranch::Diff(DiffHead::new(store, &mut init, "diff", c.channels_deep, c.channels_msa))
        };
        Ok(Self {
            encoder: Encoder { local, prior },
            fusion: Fusion { gates, gspm },
            change_branch,
            semantic: SemanticDecoder::new(store, &mut init, "head.sem", c.channels_shallow, c.channels_deep, c.decoder_width, c.classes),
            change: ChangeDecoder::new(store, &mut init, "head.cd", c.channels_msa, c.decoder_width),
            boundary: BoundaryDecoder::new(store, &mut init, "head.bd", 2 * c.channels_shallow),
            interaction: TaskInteraction::new(store, &mut init, "head.ti", c.decoder_width),
            config,
        })
    }

    /// Fused features of both timestamps.
    pub fn fused<T: Scalar>(&self, g: &Graph<T>, image_t1: Var, image_t2: Var) -> Result<(FusedFeatures, FusedFeatures)> {
        let (e1, e2) = self.encoder.siamese_encode(g, image_t1, image_t2)?;
        Ok((self.fusion.forward(g, &e1)?, self.fusion.forward(g, &e2)?))
    }

    pub fn forward<T: Scalar>(&self, g: &Graph<T>, image_t1: Var, image_t2: Var) -> Result<Predictions> {
        let (_, _, h, w) = g.dims4(image_t1);
        let (f1, f2) = self.fused(g, image_t1, image_t2)?;
        let s1 = self.semantic.forward(g, f1.shallow, f1.deep, (h, w))?;
        let s2 = self.semantic.forward(g, f2.shallow, f2.deep, (h, w))?;
        let change_feat = match &self.change_branch {
            ChangeBranch::Btam(b) => b.forward(g, f1.deep, f2.deep)?,
            ChangeBranch::Diff(d) => d.forward(g, f1.deep, f2.deep)?,
        };
        let raw_change = self.change.forward(g, change_feat, (h, w));
        let change_logits = self.interaction.forward(g, s1.features, s2.features, raw_change)?;
        let shallow_pair = g.concat_channels(&[f1.shallow, f2.shallow]);
        let boundary_logits = self.boundary.forward(g, shallow_pair, (h, w))?;
        Ok(Predictions {
            sem1_logits: s1.logits,
            sem2_logits: s2.logits,
            change_logits,
            boundary_logits,
            sem1_features: s1.features,
            sem2_features: s2.features,
        })
    }

    /// Scalar count of optimizer-visible parameters.
    pub fn trainable_count<T: Scalar>(store: &ParamStore<T>) -> usize {
        store.count(ParamKind::Trainable)
    }

    /// Scalar count of learnable-or-frozen parameters (buffers excluded).
    pub fn total_count<T: Scalar>(store: &ParamStore<T>) -> usize {
        store.count(ParamKind::Trainable) + store.count(ParamKind::Frozen)
    }

    pub fn prior_count<T: Scalar>(store: &ParamStore<T>) -> usize {
        store.entries().iter().filter(|e| e.name.starts_with(PRIOR_PREFIX)).map(|e| e.value.len()).sum()
    }

    pub fn prior_checksum<T: Scalar>(store: &ParamStore<T>) -> String {
        store.checksum(PRIOR_PREFIX)
    }
}

/// Per-sample maps decoded from predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedMaps {
    pub sem1: LabelMap,
    pub sem2: LabelMap,
    /// Sigmoid of the change logits.
    pub change_prob: Vec<f32>,
    pub boundary_prob: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Semantic argmax over classes `1..C`, zeroed wherever the change
/// probability falls below `threshold`.
pub fn decode_predictions<T: Scalar>(g: &Graph<T>, preds: &Predictions, threshold: f64) -> Vec<DecodedMaps> {
    let s1 = g.value(preds.sem1_logits);
    let s2 = g.value(preds.sem2_logits);
    let ch = g.value(preds.change_logits);
    let bd = g.value(preds.boundary_logits);
    let (b, c, h, w) = s1.dims4();
    let hw = h * w;
    let argmax = |t: &Tensor<T>, bi: usize, p: usize| -> u8 {
        let mut best = 1;
        let mut best_v = t.data()[(bi * c + 1) * hw + p];
        for k in 2..c {
            let v = t.data()[(bi * c + k) * hw + p];
            if v > best_v {
                best = k;
                best_v = v;
            }
        }
        best as u8
    };
    (0..b)
        .map(|bi| {
            let change_prob: Vec<f32> = (0..hw).map(|p| sigmoid(ch.data()[bi * hw + p].as_f64()) as f32).collect();
            let boundary_prob = (0..hw).map(|p| sigmoid(bd.data()[bi * hw + p].as_f64()) as f32).collect();
            let changed = |p: usize| change_prob[p] as f64 >= threshold;
            let sem = |t: &Tensor<T>| {
                let data = (0..hw).map(|p| if changed(p) { argmax(t, bi, p) } else { 0 }).collect();
                LabelMap::new(h, w, data).expect("sized buffer")
            };
            DecodedMaps { sem1: sem(&s1), sem2: sem(&s2), change_prob, boundary_prob, height: h, width: w }
        })
        .collect()
}
