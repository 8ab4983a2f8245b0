//! Toy two-stage detector: four-stage convolutional backbone, a single-level
//! region proposal head on the last stage, ROI-Align feature extraction and
//! fully-connected classification / box-regression heads.

mod boxes;

pub use boxes::{nms, Bbox, BoxCoder};

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::layers::Layer;
use crate::rng::{he_normal, normal_tensor, stream, Stream};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

/// Spatial stride of each pyramid level relative to the input image.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 16];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub boxes: Vec<Bbox>,
    pub labels: Vec<usize>,
}

impl GroundTruth {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            return Err(Error::Format(format!(
                "{} boxes but {} labels",
                self.boxes.len(),
                self.labels.len()
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Format(format!("label {l} outside [0, {num_classes})")));
        }
        if let Some(b) = self.boxes.iter().find(|b| !(b.x1 < b.x2 && b.y1 < b.y2)) {
            return Err(Error::Format(format!("invalid box {b:?}")));
        }
        Ok(())
    }
}

/// A final prediction. `class_posterior` has `C + 1` entries with the
/// background probability last.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Bbox,
    pub class_posterior: Vec<f64>,
    pub domain: Domain,
    pub score: f64,
}

impl Detection {
    /// Most likely foreground class.
    pub fn label(&self) -> usize {
        argmax(&self.class_posterior[..self.class_posterior.len() - 1])
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: Bbox,
    pub objectness: f64,
}

/// Backbone maps Φ₁..Φ₄ recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

impl FeaturePyramid {
    pub fn map(&self, mut f: impl FnMut(Var) -> Result<Var>) -> Result<Self> {
        let [a, b, c, d] = self.levels;
        Ok(Self {
            levels: [f(a)?, f(b)?, f(c)?, f(d)?],
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub num_classes: usize,
    pub channels: [usize; 4],
    pub anchor_sizes: [f64; 3],
    pub roi_grid: usize,
    pub head_width: usize,
    pub proposals_k: usize,
    pub rpn_nms: f64,
    pub det_nms: f64,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub max_positive_rois: usize,
    pub negatives_per_positive: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            channels: [16, 32, 64, 64],
            anchor_sizes: [12.0, 20.0, 32.0],
            roi_grid: 7,
            head_width: 256,
            proposals_k: 64,
            rpn_nms: 0.7,
            det_nms: 0.5,
            score_threshold: 0.05,
            max_detections: 100,
            pos_iou: 0.5,
            neg_iou: 0.3,
            max_positive_rois: 16,
            negatives_per_positive: 3,
        }
    }
}

/// Region proposal head outputs on Φ₄.
#[derive(Clone, Copy, Debug)]
pub struct RpnOutput {
    /// `[1, A, H, W]` objectness logits.
    pub logits: Var,
    /// `[1, 4A, H, W]` anchor deltas.
    pub deltas: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// `[R, C + 1]` class logits, background last.
    pub logits: Var,
    /// `[R, 4C]` class-specific box deltas.
    pub deltas: Var,
}

/// Per-term detection losses of one image.
#[derive(Clone, Copy, Debug)]
pub struct DetectionLoss {
    pub total: Var,
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub head_cls: Var,
    pub head_reg: Var,
    pub positives: usize,
}

/// A training ROI and, for positives, the matched class and box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub bbox: Bbox,
    pub matched: Option<(usize, Bbox)>,
}

/// Inference products on one image.
#[derive(Clone, Debug, Default)]
pub struct Inference {
    pub proposals: Vec<Proposal>,
    /// Class posterior of every proposal (`C + 1` entries, background last).
    pub posteriors: Vec<Vec<f64>>,
    pub detections: Vec<Detection>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    cfg: DetectorConfig,
    backbone: [Layer; 4],
    rpn_cls: Layer,
    rpn_reg: Layer,
    fc1: Layer,
    fc2: Layer,
    cls: Layer,
    reg: Layer,
}

impl Detector {
    fn shapes(cfg: &DetectorConfig) -> Vec<(&'static str, Vec<usize>)> {
        let ch = cfg.channels;
        let a = cfg.anchor_sizes.len();
        let roi = ch[3] * cfg.roi_grid * cfg.roi_grid;
        let hw = cfg.head_width;
        vec![
            ("backbone.conv1", vec![ch[0], 3, 3, 3]),
            ("backbone.conv2", vec![ch[1], ch[0], 3, 3]),
            ("backbone.conv3", vec![ch[2], ch[1], 3, 3]),
            ("backbone.conv4", vec![ch[3], ch[2], 3, 3]),
            ("rpn.cls", vec![a, ch[3], 1, 1]),
            ("rpn.reg", vec![4 * a, ch[3], 1, 1]),
            ("head.fc1", vec![hw, roi]),
            ("head.fc2", vec![hw, hw]),
            ("head.cls", vec![cfg.num_classes + 1, hw]),
            ("head.reg", vec![4 * cfg.num_classes, hw]),
        ]
    }

    fn from_layers(cfg: DetectorConfig, l: Vec<Layer>) -> Self {
        Self {
            cfg,
            backbone: [l[0], l[1], l[2], l[3]],
            rpn_cls: l[4],
            rpn_reg: l[5],
            fc1: l[6],
            fc2: l[7],
            cls: l[8],
            reg: l[9],
        }
    }

    /// Registers freshly initialized detector parameters in `store`.
    pub fn init(store: &mut ParamStore, cfg: DetectorConfig, seed: u64) -> Result<Self> {
        let mut layers = Vec::new();
        for (name, shape) in Self::shapes(&cfg) {
            let which = match name.split('.').next() {
                Some("backbone") => Stream::InitBackbone,
                Some("rpn") => Stream::InitRpn,
                _ => Stream::InitHeads,
            };
            // one stream per layer keeps initial values independent of layer count
            let mut rng = stream(seed ^ fnv(name), which);
            let fan_in: usize = shape[1..].iter().product();
            let w = match name {
                "rpn.cls" | "head.cls" => normal_tensor(&mut rng, &shape, 0.01),
                "rpn.reg" | "head.reg" => normal_tensor(&mut rng, &shape, 0.001),
                _ => he_normal(&mut rng, &shape, fan_in),
            };
            layers.push(Layer::init(store, name, w)?);
        }
        Ok(Self::from_layers(cfg, layers))
    }

    /// Locates detector parameters in a loaded checkpoint; any other
    /// parameters in the store (alignment modules) are ignored.
    pub fn from_store(store: &ParamStore, cfg: DetectorConfig) -> Result<Self> {
        let layers = Self::shapes(&cfg)
            .into_iter()
            .map(|(name, shape)| Layer::lookup(store, name, &shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(cfg, layers))
    }

    /// Reconstructs the configuration from checkpoint shapes.
    pub fn config_from_store(store: &ParamStore) -> Result<DetectorConfig> {
        let get = |n: &str| {
            store
                .id(n)
                .map(|id| store.get(id).shape().to_vec())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {n}")))
        };
        let cls = get("head.cls.weight")?;
        let fc1 = get("head.fc1.weight")?;
        let mut cfg = DetectorConfig {
            num_classes: cls[0] - 1,
            head_width: fc1[0],
            ..DetectorConfig::default()
        };
        for (i, c) in cfg.channels.iter_mut().enumerate() {
            *c = get(&format!("backbone.conv{}.weight", i + 1))?[0];
        }
        let grid_sq = fc1[1] / cfg.channels[3];
        cfg.roi_grid = (grid_sq as f64).sqrt().round() as usize;
        Ok(cfg)
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn is_detector_param(name: &str) -> bool {
        ["backbone.", "rpn.", "head."].iter().any(|p| name.starts_with(p))
    }

    /// Backbone pass on `image [1,3,H,W]`; H and W must be multiples of 16.
    pub fn backbone_forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let [n, c, h, w] = g.value(image).dims4()?;
        if n != 1 || c != 3 {
            return Err(shape_err!("backbone expects [1,3,H,W], got {:?}", g.shape(image)));
        }
        if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
            return Err(config_err!("input size {h}x{w} is not a positive multiple of 16"));
        }
        // stage 1 pools twice so that Φ₁ sits at stride 4
        let s1 = self.backbone[0].conv(g, p, image, 1, 1)?;
        let s1 = g.relu(s1)?;
        let s1 = g.max_pool2d(s1)?;
        let phi1 = g.max_pool2d(s1)?;
        let s2 = self.backbone[1].conv(g, p, phi1, 1, 1)?;
        let s2 = g.relu(s2)?;
        let phi2 = g.max_pool2d(s2)?;
        let s3 = self.backbone[2].conv(g, p, phi2, 1, 1)?;
        let s3 = g.relu(s3)?;
        let phi3 = g.max_pool2d(s3)?;
        let s4 = self.backbone[3].conv(g, p, phi3, 1, 1)?;
        let phi4 = g.relu(s4)?;
        Ok(FeaturePyramid {
            levels: [phi1, phi2, phi3, phi4],
        })
    }

    pub fn rpn_forward(&self, g: &mut Graph, p: &Bound, phi4: Var) -> Result<RpnOutput> {
        Ok(RpnOutput {
            logits: self.rpn_cls.conv(g, p, phi4, 1, 0)?,
            deltas: self.rpn_reg.conv(g, p, phi4, 1, 0)?,
        })
    }

    /// One anchor per Φ₄ cell and scale, indexed `scale·H·W + y·W + x`.
    pub fn anchors(&self, fh: usize, fw: usize) -> Vec<Bbox> {
        let s = PYRAMID_STRIDES[3] as f64;
        let mut out = Vec::with_capacity(self.cfg.anchor_sizes.len() * fh * fw);
        for &size in &self.cfg.anchor_sizes {
            for y in 0..fh {
                for x in 0..fw {
                    out.push(Bbox::from_center((x as f64 + 0.5) * s, (y as f64 + 0.5) * s, size, size));
                }
            }
        }
        out
    }

    /// Decodes every anchor, clips, drops degenerate boxes, applies NMS and
    /// keeps the `k` best by objectness (descending).
    pub fn proposals(
        &self,
        logits: &Tensor,
        deltas: &Tensor,
        image_size: (usize, usize),
        k: usize,
    ) -> Result<Vec<Proposal>> {
        let candidates = self.candidate_boxes(logits, deltas, image_size)?;
        let boxes: Vec<Bbox> = candidates.iter().map(|p| p.bbox).collect();
        let scores: Vec<f64> = candidates.iter().map(|p| p.objectness).collect();
        Ok(nms(&boxes, &scores, self.cfg.rpn_nms)
            .into_iter()
            .take(k)
            .map(|i| candidates[i])
            .collect())
    }

    /// All decoded, clipped, non-degenerate anchor boxes before NMS.
    pub fn candidate_boxes(
        &self,
        logits: &Tensor,
        deltas: &Tensor,
        (height, width): (usize, usize),
    ) -> Result<Vec<Proposal>> {
        let [_, a, fh, fw] = logits.dims4()?;
        if a != self.cfg.anchor_sizes.len() || deltas.shape() != [1, 4 * a, fh, fw] {
            return Err(shape_err!("rpn outputs {:?}/{:?} do not match anchors", logits.shape(), deltas.shape()));
        }
        let hw = fh * fw;
        let anchors = self.anchors(fh, fw);
        let mut out = Vec::with_capacity(anchors.len());
        for (i, anchor) in anchors.iter().enumerate() {
            let (ai, pos) = (i / hw, i % hw);
            let d: Vec<f64> = (0..4).map(|j| deltas.data()[(ai * 4 + j) * hw + pos]).collect();
            let b = BoxCoder::RPN.decode(anchor, &d).clip(width as f64, height as f64);
            if b.is_degenerate() {
                continue;
            }
            let logit = logits.data()[i];
            out.push(Proposal {
                bbox: b,
                objectness: 1.0 / (1.0 + (-logit).exp()),
            });
        }
        Ok(out)
    }

    /// Bilinear ROI features of `feature` (at `stride`) for each
    /// non-degenerate box. Returns the `[R, C, grid, grid]` tensor and the
    /// indices of the boxes that were kept, or `None` when every box was skipped.
    pub fn roi_extract(
        g: &mut Graph,
        feature: Var,
        boxes: &[Bbox],
        stride: usize,
        grid: usize,
    ) -> Result<Option<(Var, Vec<usize>)>> {
        let kept: Vec<usize> = (0..boxes.len()).filter(|&i| !boxes[i].is_degenerate()).collect();
        if kept.is_empty() {
            return Ok(None);
        }
        let arr: Vec<[f64; 4]> = kept.iter().map(|&i| boxes[i].to_array()).collect();
        let v = g.roi_align(feature, &arr, stride as f64, grid)?;
        Ok(Some((v, kept)))
    }

    /// Φ₄ ROI features flattened to `[R, C·grid²]`.
    pub fn roi_features(&self, g: &mut Graph, phi4: Var, boxes: &[Bbox]) -> Result<Option<(Var, Vec<usize>)>> {
        let grid = self.cfg.roi_grid;
        let Some((v, kept)) = Self::roi_extract(g, phi4, boxes, PYRAMID_STRIDES[3], grid)? else {
            return Ok(None);
        };
        let c = g.shape(v)[1];
        let flat = g.reshape(v, &[kept.len(), c * grid * grid])?;
        Ok(Some((flat, kept)))
    }

    pub fn heads(&self, g: &mut Graph, p: &Bound, roi_feat: Var) -> Result<HeadOutput> {
        let h = self.fc1.linear(g, p, roi_feat)?;
        let h = g.relu(h)?;
        let h = self.fc2.linear(g, p, h)?;
        let h = g.relu(h)?;
        Ok(HeadOutput {
            logits: self.cls.linear(g, p, h)?,
            deltas: self.reg.linear(g, p, h)?,
        })
    }

    /// Objectness and box targets for every anchor: positives have IoU ≥
    /// `pos_iou` with some ground truth or are the best anchor of one,
    /// negatives have IoU < `neg_iou`, the rest are ignored.
    fn rpn_targets(&self, anchors: &[Bbox], gt: &GroundTruth, hw: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = anchors.len();
        let mut labels = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let mut reg_t = vec![0.0; 4 * n];
        let mut reg_w = vec![0.0; 4 * n];
        let mut best_gt = vec![(0.0f64, usize::MAX); n];
        for (i, a) in anchors.iter().enumerate() {
            for (j, b) in gt.boxes.iter().enumerate() {
                let iou = a.iou(b);
                if iou > best_gt[i].0 {
                    best_gt[i] = (iou, j);
                }
            }
        }
        let mut positive = vec![false; n];
        for (i, &(iou, _)) in best_gt.iter().enumerate() {
            if iou >= self.cfg.pos_iou {
                positive[i] = true;
            }
        }
        for b in &gt.boxes {
            let mut best = (0.0, usize::MAX);
            for (i, a) in anchors.iter().enumerate() {
                let iou = a.iou(b);
                if iou > best.0 {
                    best = (iou, i);
                }
            }
            if best.1 != usize::MAX {
                positive[best.1] = true;
            }
        }
        for i in 0..n {
            let (iou, j) = best_gt[i];
            if positive[i] {
                labels[i] = 1.0;
                weights[i] = 1.0;
                // a best-anchor positive may have no gt at IoU≥pos; it still has a best gt
                let gj = if j == usize::MAX { 0 } else { j };
                let t = BoxCoder::RPN.encode(&anchors[i], &gt.boxes[gj]);
                let (ai, pos) = (i / hw, i % hw);
                for (d, tv) in t.iter().enumerate() {
                    reg_t[(ai * 4 + d) * hw + pos] = *tv;
                    reg_w[(ai * 4 + d) * hw + pos] = 1.0;
                }
            } else if iou < self.cfg.neg_iou {
                weights[i] = 1.0;
            }
        }
        (labels, weights, reg_t, reg_w)
    }

    /// Faster R-CNN style detection loss of one annotated image: proposal
    /// objectness + proposal regression + ROI classification + ROI regression
    /// over the given ROI sample (see [`Detector::sample_rois`]).
    pub fn detection_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        pyramid: &FeaturePyramid,
        rpn: &RpnOutput,
        sample: &[RoiSample],
        gt: &GroundTruth,
    ) -> Result<DetectionLoss> {
        gt.validate(self.cfg.num_classes)?;
        let [_, _, fh, fw] = g.value(rpn.logits).dims4()?;
        let anchors = self.anchors(fh, fw);
        let (labels, weights, reg_t, reg_w) = self.rpn_targets(&anchors, gt, fh * fw);
        let labeled = weights.iter().filter(|&&w| w > 0.0).count().max(1) as f64;
        let rpn_pos = labels.iter().filter(|&&l| l > 0.0).count().max(1) as f64;
        let rpn_cls = g.bce_with_logits(rpn.logits, &labels, &weights, labeled)?;
        let rpn_reg = g.smooth_l1(rpn.deltas, &reg_t, &reg_w, 1.0 / 9.0, rpn_pos)?;

        let boxes: Vec<Bbox> = sample.iter().map(|s| s.bbox).collect();
        let (head_cls, head_reg) = match self.roi_features(g, pyramid.levels[3], &boxes)? {
            None => {
                let zero = g.constant(Tensor::scalar(0.0));
                (zero, zero)
            }
            Some((feat, kept)) => {
                let out = self.heads(g, p, feat)?;
                let c = self.cfg.num_classes;
                let targets: Vec<usize> = kept.iter().map(|&i| sample[i].matched.map_or(c, |(l, _)| l)).collect();
                let cls = g.cross_entropy(out.logits, &targets)?;
                let mut t = vec![0.0; kept.len() * 4 * c];
                let mut w = vec![0.0; kept.len() * 4 * c];
                for (r, &i) in kept.iter().enumerate() {
                    if let Some((label, gt_box)) = sample[i].matched {
                        let d = BoxCoder::HEAD.encode(&boxes[i], &gt_box);
                        for j in 0..4 {
                            t[r * 4 * c + 4 * label + j] = d[j];
                            w[r * 4 * c + 4 * label + j] = 1.0;
                        }
                    }
                }
                let reg = g.smooth_l1(out.deltas, &t, &w, 1.0, kept.len() as f64)?;
                (cls, reg)
            }
        };
        let positives = sample.iter().filter(|s| s.matched.is_some()).count();
        let a = g.add(rpn_cls, rpn_reg)?;
        let b = g.add(head_cls, head_reg)?;
        let total = g.add(a, b)?;
        Ok(DetectionLoss {
            total,
            rpn_cls,
            rpn_reg,
            head_cls,
            head_reg,
            positives,
        })
    }

    /// Samples training ROIs from proposals ∪ ground truth. Every ground-truth
    /// box contributes exactly one positive, drawn uniformly from the
    /// candidates whose best match it is at IoU ≥ `pos_iou` (the box itself is
    /// always such a candidate). Negatives (IoU < `neg_iou`) are drawn at
    /// `negatives_per_positive` per positive, or that many when there are no
    /// positives.
    pub fn sample_rois(
        &self,
        proposals: &[Proposal],
        gt: &GroundTruth,
        rng: &mut ChaCha8Rng,
    ) -> Vec<RoiSample> {
        let mut candidates: Vec<Bbox> = proposals.iter().map(|p| p.bbox).collect();
        candidates.extend(gt.boxes.iter().copied());
        let mut matches: Vec<Vec<Bbox>> = vec![Vec::new(); gt.boxes.len()];
        let mut neg = Vec::new();
        for b in &candidates {
            let mut best = (0.0, 0usize);
            for (j, t) in gt.boxes.iter().enumerate() {
                let iou = b.iou(t);
                if iou > best.0 {
                    best = (iou, j);
                }
            }
            if best.0 >= self.cfg.pos_iou {
                matches[best.1].push(*b);
            } else if best.0 < self.cfg.neg_iou {
                neg.push(RoiSample { bbox: *b, matched: None });
            }
        }
        let mut pos = Vec::new();
        for (j, m) in matches.iter().enumerate() {
            if !m.is_empty() {
                let b = m[rng.random_range(0..m.len())];
                pos.push(RoiSample {
                    bbox: b,
                    matched: Some((gt.labels[j], gt.boxes[j])),
                });
            }
        }
        let pos = pick(pos, self.cfg.max_positive_rois, rng);
        let n_neg = self.cfg.negatives_per_positive * pos.len().max(1);
        let neg = pick(neg, n_neg, rng);
        pos.into_iter().chain(neg).collect()
    }

    /// Softmax posteriors and decoded boxes for the given proposals, using
    /// a scratch graph over a fixed Φ₄ value.
    pub fn infer_from_features(
        &self,
        store: &ParamStore,
        phi4: &Tensor,
        image_size: (usize, usize),
        domain: Domain,
    ) -> Result<Inference> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let f = g.constant(phi4.clone());
        let rpn = self.rpn_forward(&mut g, &p, f)?;
        let proposals = self.proposals(g.value(rpn.logits), g.value(rpn.deltas), image_size, self.cfg.proposals_k)?;
        let boxes: Vec<Bbox> = proposals.iter().map(|p| p.bbox).collect();
        let Some((feat, kept)) = self.roi_features(&mut g, f, &boxes)? else {
            return Ok(Inference::default());
        };
        let proposals: Vec<Proposal> = kept.iter().map(|&i| proposals[i]).collect();
        let out = self.heads(&mut g, &p, feat)?;
        let probs = g.softmax(out.logits)?;
        let c = self.cfg.num_classes;
        let posteriors: Vec<Vec<f64>> = g.value(probs).data().chunks(c + 1).map(<[f64]>::to_vec).collect();
        let deltas = g.value(out.deltas).data();
        let (h, w) = image_size;
        let mut cands = Vec::new();
        for (i, (prop, post)) in proposals.iter().zip(&posteriors).enumerate() {
            let label = argmax(&post[..c]);
            let d = &deltas[i * 4 * c + 4 * label..i * 4 * c + 4 * label + 4];
            let b = BoxCoder::HEAD.decode(&prop.bbox, d).clip(w as f64, h as f64);
            if b.is_degenerate() {
                continue;
            }
            cands.push(Detection {
                bbox: b,
                class_posterior: post.clone(),
                domain,
                score: post[label],
            });
        }
        let detections = self.suppress(cands);
        Ok(Inference {
            proposals,
            posteriors,
            detections,
        })
    }

    /// Class-wise NMS, score filter, descending score order, capped.
    fn suppress(&self, cands: Vec<Detection>) -> Vec<Detection> {
        let mut kept = Vec::new();
        for c in 0..self.cfg.num_classes {
            let idx: Vec<usize> = (0..cands.len()).filter(|&i| cands[i].label() == c).collect();
            let boxes: Vec<Bbox> = idx.iter().map(|&i| cands[i].bbox).collect();
            let scores: Vec<f64> = idx.iter().map(|&i| cands[i].score).collect();
            for k in nms(&boxes, &scores, self.cfg.det_nms) {
                if cands[idx[k]].score > self.cfg.score_threshold {
                    kept.push(idx[k]);
                }
            }
        }
        kept.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(a.cmp(&b)));
        kept.truncate(self.cfg.max_detections);
        kept.into_iter().map(|i| cands[i].clone()).collect()
    }

    /// Full inference path: backbone → proposals → heads → decode → NMS →
    /// score filter. Alignment parameters play no part.
    pub fn detect(&self, store: &ParamStore, image: &Tensor, domain: Domain) -> Result<Vec<Detection>> {
        let [_, _, h, w] = image.dims4()?;
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let pyr = self.backbone_forward(&mut g, &p, x)?;
        let phi4 = g.value(pyr.levels[3]).clone();
        Ok(self.infer_from_features(store, &phi4, (h, w), domain)?.detections)
    }
}

fn pick<T: Clone>(items: Vec<T>, n: usize, rng: &mut impl Rng) -> Vec<T> {
    if items.len() <= n {
        return items;
    }
    let mut idx = sample(rng, items.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| items[i].clone()).collect()
}

pub(crate) fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
