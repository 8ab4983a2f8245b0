//! The detector together with whichever alignment modules a run enables, and
//! the per-step objective.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::config::{Modes, TrainConfig};
use crate::alignment::{
    adversarial_wrap, build_pairs, correlation_loss, instance_agnostic_loss, instance_category_aware_loss,
    CorrelationHead, ImageDomainClassifierBank, InstanceDomainClassifier, InstancePair,
};
use crate::detector::{
    Bbox, Detector, DetectorConfig, Domain, FeaturePyramid, GroundTruth, RoiSample,
};
use crate::error::Result;
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Model {
    pub det: Detector,
    pub bank: Option<ImageDomainClassifierBank>,
    pub ins: Option<InstanceDomainClassifier>,
    pub corr: Option<CorrelationHead>,
}

fn detector_config(cfg: &TrainConfig) -> DetectorConfig {
    DetectorConfig {
        num_classes: cfg.num_classes,
        ..DetectorConfig::default()
    }
}

impl Model {
    /// Registers the detector and the modules enabled in `cfg`. Each module
    /// draws its initial values from its own stream, so enabling one never
    /// changes another's.
    pub fn init(store: &mut ParamStore, cfg: &TrainConfig) -> Result<Self> {
        let dc = detector_config(cfg);
        let det = Detector::init(store, dc.clone(), cfg.seed)?;
        let roi_dim = dc.channels[3] * dc.roi_grid * dc.roi_grid;
        let bank = match cfg.img {
            true => Some(ImageDomainClassifierBank::init(
                store,
                dc.channels,
                cfg.image_disc_width,
                cfg.seed,
            )?),
            false => None,
        };
        let ins = match (cfg.ins, cfg.cat) {
            (false, false) => None,
            (_, cat) => {
                let outputs = if cat { cfg.num_classes } else { 1 };
                Some(InstanceDomainClassifier::init(
                    store,
                    roi_dim,
                    cfg.instance_disc_width,
                    outputs,
                    cfg.seed,
                )?)
            }
        };
        let corr = match cfg.corr {
            true => Some(CorrelationHead::init(
                store,
                dc.channels,
                cfg.fused_dim,
                cfg.embed_dim,
                dc.roi_grid,
                cfg.seed,
            )?),
            false => None,
        };
        Ok(Self { det, bank, ins, corr })
    }

    pub fn detector_from_store(store: &ParamStore) -> Result<Detector> {
        let cfg = Detector::config_from_store(store)?;
        Detector::from_store(store, cfg)
    }
}

/// Everything random or discrete about one step, fixed before the
/// differentiable objective is built: ROI samples, instance boxes,
/// posteriors used as weights, and correlation pairs.
#[derive(Clone, Debug, Default)]
pub struct StepPlan {
    pub active: Modes,
    pub source_rois: Vec<RoiSample>,
    /// Proposal boxes and posteriors for the instance losses, per domain.
    pub instances: Option<[InstancePlan; 2]>,
    pub corr: Option<CorrPlan>,
}

#[derive(Clone, Debug, Default)]
pub struct InstancePlan {
    pub boxes: Vec<Bbox>,
    pub posteriors: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct CorrPlan {
    pub source_boxes: Vec<Bbox>,
    pub target_boxes: Vec<Bbox>,
    pub pairs: Vec<InstancePair>,
}

/// Scalar loss terms of one step (0 for inactive terms).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub det: f64,
    pub levels: [f64; 4],
    pub ins: f64,
    pub cat: f64,
    pub corr: f64,
    pub total: f64,
    pub ins_skipped: bool,
}

/// Graph handles produced by [`Model::forward_features`].
#[derive(Clone, Copy, Debug)]
pub struct Features {
    pub source: FeaturePyramid,
    pub target: Option<FeaturePyramid>,
}

/// Recorded objective: total plus per-term handles.
pub struct Objective {
    pub total: Var,
    /// Sum of the alignment terms alone (0 when none is active).
    pub alignment: Var,
    pub breakdown: LossBreakdown,
}

impl Model {
    /// Backbone passes for the step's images. The target image is only
    /// touched when some alignment term is active.
    pub fn forward_features(
        &self,
        g: &mut Graph,
        p: &Bound,
        source: &Tensor,
        target: Option<&Tensor>,
        active: Modes,
    ) -> Result<Features> {
        let xs = g.constant(source.clone());
        let fs = self.det.backbone_forward(g, p, xs)?;
        let ft = match (active.any(), target) {
            (true, Some(t)) => {
                let xt = g.constant(t.clone());
                Some(self.det.backbone_forward(g, p, xt)?)
            }
            _ => None,
        };
        Ok(Features { source: fs, target: ft })
    }

    /// Draws the discrete parts of a step from the current feature values.
    #[allow(clippy::too_many_arguments)]
    pub fn plan(
        &self,
        store: &ParamStore,
        g: &Graph,
        feats: &Features,
        gt: &GroundTruth,
        image_size: (usize, usize),
        active: Modes,
        cfg: &TrainConfig,
        roi_rng: &mut ChaCha8Rng,
        pair_rng: &mut ChaCha8Rng,
    ) -> Result<StepPlan> {
        let src_phi4 = g.value(feats.source.levels[3]);
        let src = self.det.infer_from_features(store, src_phi4, image_size, Domain::Source)?;
        let source_rois = self.det.sample_rois(&src.proposals, gt, roi_rng);
        let mut plan = StepPlan {
            active,
            source_rois,
            ..StepPlan::default()
        };
        let Some(ft) = feats.target else {
            return Ok(plan);
        };
        if !(active.ins || active.cat || active.corr) {
            return Ok(plan);
        }
        let tgt = self
            .det
            .infer_from_features(store, g.value(ft.levels[3]), image_size, Domain::Target)?;
        if active.ins || active.cat {
            let side = |inf: &crate::detector::Inference| InstancePlan {
                boxes: inf.proposals.iter().map(|p| p.bbox).collect(),
                posteriors: inf.posteriors.clone(),
            };
            plan.instances = Some([side(&src), side(&tgt)]);
        }
        if active.corr {
            let pick = |inf: &crate::detector::Inference| {
                inf.detections
                    .iter()
                    .filter(|d| d.score > cfg.corr_score)
                    .take(cfg.corr_max_per_image)
                    .map(|d| (d.bbox, (d.domain, d.label())))
                    .collect::<Vec<_>>()
            };
            let (s, t) = (pick(&src), pick(&tgt));
            let tags: Vec<(Domain, usize)> = s.iter().chain(&t).map(|x| x.1).collect();
            plan.corr = Some(CorrPlan {
                source_boxes: s.iter().map(|x| x.0).collect(),
                target_boxes: t.iter().map(|x| x.0).collect(),
                pairs: build_pairs(&tags, cfg.pair_cap, pair_rng),
            });
        }
        Ok(plan)
    }

    /// Builds the step objective on `g` from recorded features and a plan.
    pub fn objective(
        &self,
        g: &mut Graph,
        p: &Bound,
        feats: &Features,
        gt: &GroundTruth,
        plan: &StepPlan,
        cfg: &TrainConfig,
    ) -> Result<Objective> {
        self.objective_with_reversal(g, p, feats, gt, plan, cfg, Some(cfg.lambda_adv))
    }

    /// [`Model::objective`] with an explicit reversal weight between the
    /// detector features and the discriminators; `None` connects them
    /// directly, giving the plain gradient of the alignment terms.
    #[allow(clippy::too_many_arguments)]
    pub fn objective_with_reversal(
        &self,
        g: &mut Graph,
        p: &Bound,
        feats: &Features,
        gt: &GroundTruth,
        plan: &StepPlan,
        cfg: &TrainConfig,
        reversal: Option<f64>,
    ) -> Result<Objective> {
        let mut b = LossBreakdown::default();
        let rpn = self.det.rpn_forward(g, p, feats.source.levels[3])?;
        let det = self
            .det
            .detection_loss(g, p, &feats.source, &rpn, &plan.source_rois, gt)?;
        b.det = g.value(det.total).item()?;
        let mut total = det.total;
        let mut alignment = g.constant(Tensor::scalar(0.0));
        let active = plan.active;
        let Some(ft) = feats.target else {
            b.total = g.value(total).item()?;
            return Ok(Objective {
                total,
                alignment,
                breakdown: b,
            });
        };
        let (ws, wt) = match reversal {
            Some(lambda) => (adversarial_wrap(g, &feats.source, lambda)?, adversarial_wrap(g, &ft, lambda)?),
            None => (feats.source, ft),
        };

        if let (true, Some(bank)) = (active.img, &self.bank) {
            let img = bank.image_level_loss(g, p, &ws, &wt, cfg.level_weights)?;
            for l in 0..4 {
                b.levels[l] = g.value(img.levels[l]).item()?;
            }
            total = g.add(total, img.total)?;
            alignment = g.add(alignment, img.total)?;
        }

        if let (Some(inst), Some(disc)) = (&plan.instances, &self.ins) {
            let mut outs = Vec::new();
            for (side, phi4) in inst.iter().zip([ws.levels[3], wt.levels[3]]) {
                outs.push(match self.det.roi_features(g, phi4, &side.boxes)? {
                    Some((f, kept)) => {
                        let post: Vec<Vec<f64>> = kept.iter().map(|&i| side.posteriors[i].clone()).collect();
                        Some((disc.forward(g, p, f)?, post))
                    }
                    None => None,
                });
            }
            let (s, t) = (&outs[0], &outs[1]);
            if active.cat {
                let l = instance_category_aware_loss(
                    g,
                    s.as_ref().map(|(d, post)| (*d, post.as_slice())),
                    t.as_ref().map(|(d, post)| (*d, post.as_slice())),
                )?;
                b.cat = g.value(l.value).item()?;
                b.ins_skipped = l.skipped;
                total = g.add(total, l.value)?;
                alignment = g.add(alignment, l.value)?;
            } else {
                let l = instance_agnostic_loss(g, s.as_ref().map(|x| x.0), t.as_ref().map(|x| x.0))?;
                b.ins = g.value(l.value).item()?;
                b.ins_skipped = l.skipped;
                total = g.add(total, l.value)?;
                alignment = g.add(alignment, l.value)?;
            }
        }

        if let (Some(cp), Some(head)) = (&plan.corr, &self.corr) {
            if !cp.pairs.is_empty() {
                let fs = head.refine_instance_features(g, p, &ws, &cp.source_boxes)?;
                let ft = head.refine_instance_features(g, p, &wt, &cp.target_boxes)?;
                let parts: Vec<Var> = [fs, ft].into_iter().flatten().map(|x| x.0).collect();
                let fused = g.concat_rows(&parts)?;
                let emb = head.embed(g, p, fused)?;
                let l = correlation_loss(g, emb, &cp.pairs, cfg.margin)?;
                b.corr = g.value(l).item()?;
                total = g.add(total, l)?;
                alignment = g.add(alignment, l)?;
            }
        }
        b.total = g.value(total).item()?;
        Ok(Objective {
            total,
            alignment,
            breakdown: b,
        })
    }
}

/// Picks `n` of `len` indices uniformly, in ascending order.
pub(crate) fn sorted_sample(rng: &mut ChaCha8Rng, len: usize, n: usize) -> Vec<usize> {
    let mut v = sample(rng, len, n.min(len)).into_vec();
    v.sort_unstable();
    v
}
