//! Adversarial alignment losses and their discriminators.
//!
//! Every discriminator sees detector features through a gradient reversal
//! layer (see [`adversarial_wrap`]), so minimizing the sum of detection and
//! alignment losses trains discriminators to separate the domains while the
//! detector learns to confuse them.
//!
//! Domain labels follow the least-squares convention: source → 0, target → 1.

mod pairs;
#[cfg(test)]
mod tests;

pub use pairs::{all_pairs, build_pairs, classify_pair, InstancePair, PairGroup};

use crate::detector::{Bbox, Detector, Domain, FeaturePyramid, PYRAMID_STRIDES};
use crate::error::{shape_err, Result};
use crate::layers::Layer;
use crate::rng::{stream, Stream};
use crate::tensor::{Bound, Graph, ParamStore, Tensor, Var};

/// Foreground mass below which an instance is left out of the
/// category-aware loss.
pub const MIN_FOREGROUND_MASS: f64 = 1e-6;

/// Initial weight scale of the correlation embedding layer.
const EMBED_INIT_STD: f64 = 1e-3;

/// Routes every pyramid level through a gradient reversal layer.
pub fn adversarial_wrap(g: &mut Graph, pyramid: &FeaturePyramid, lambda_adv: f64) -> Result<FeaturePyramid> {
    pyramid.map(|v| g.grl(v, lambda_adv))
}

/// Least-squares domain loss on discriminator outputs: `mean(D²)` over the
/// source outputs plus `mean((1 − D)²)` over the target outputs. A missing
/// side contributes 0.
pub fn least_squares_loss(g: &mut Graph, source: Option<Var>, target: Option<Var>) -> Result<Var> {
    let s = match source {
        Some(d) => {
            let sq = g.square(d)?;
            g.mean(sq)?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };
    let t = match target {
        Some(d) => {
            let r = g.rsub_scalar(1.0, d)?;
            let sq = g.square(r)?;
            g.mean(sq)?
        }
        None => g.constant(Tensor::scalar(0.0)),
    };
    g.add(s, t)
}

/// Per-level image discriminators: three 1×1 convolutions
/// `C_l → width → width → 1` with ReLU between and a sigmoid output.
#[derive(Clone, Debug)]
pub struct ImageDomainClassifierBank {
    levels: [[Layer; 3]; 4],
}

/// Image-level loss with its per-level terms (unweighted).
#[derive(Clone, Copy, Debug)]
pub struct ImageLoss {
    pub total: Var,
    pub levels: [Var; 4],
}

impl ImageDomainClassifierBank {
    pub const PREFIX: &'static str = "disc_img.";

    fn shapes(channels: [usize; 4], width: usize) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, &c) in channels.iter().enumerate() {
            let dims = [(width, c), (width, width), (1, width)];
            for (k, (o, i)) in dims.into_iter().enumerate() {
                out.push((format!("disc_img.l{}.conv{}", l + 1, k + 1), vec![o, i, 1, 1]));
            }
        }
        out
    }

    fn assemble(layers: Vec<Layer>) -> Self {
        let l = |i: usize| [layers[3 * i], layers[3 * i + 1], layers[3 * i + 2]];
        Self {
            levels: [l(0), l(1), l(2), l(3)],
        }
    }

    pub fn init(store: &mut ParamStore, channels: [usize; 4], width: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::InitImageDisc);
        let layers = Self::shapes(channels, width)
            .into_iter()
            .map(|(name, shape)| Layer::random(store, &name, &shape, &mut rng, None))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(layers))
    }

    pub fn from_store(store: &ParamStore, channels: [usize; 4], width: usize) -> Result<Self> {
        let layers = Self::shapes(channels, width)
            .into_iter()
            .map(|(name, shape)| Layer::lookup(store, &name, &shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(layers))
    }

    /// Per-position domain probability `[1, 1, H_l, W_l]` of one level.
    pub fn forward(&self, g: &mut Graph, p: &Bound, level: usize, feature: Var) -> Result<Var> {
        let [c1, c2, c3] = &self.levels[level];
        let h = c1.conv(g, p, feature, 1, 0)?;
        let h = g.relu(h)?;
        let h = c2.conv(g, p, h, 1, 0)?;
        let h = g.relu(h)?;
        let h = c3.conv(g, p, h, 1, 0)?;
        g.sigmoid(h)
    }

    /// `Σ_l λ_l · L_{D_l}` over one source and one target pyramid. Callers
    /// pass pyramids already routed through [`adversarial_wrap`].
    pub fn image_level_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        source: &FeaturePyramid,
        target: &FeaturePyramid,
        level_weights: [f64; 4],
    ) -> Result<ImageLoss> {
        let mut levels = Vec::with_capacity(4);
        let mut total = g.constant(Tensor::scalar(0.0));
        for l in 0..4 {
            let ds = self.forward(g, p, l, source.levels[l])?;
            let dt = self.forward(g, p, l, target.levels[l])?;
            let term = least_squares_loss(g, Some(ds), Some(dt))?;
            let weighted = g.scale(term, level_weights[l])?;
            total = g.add(total, weighted)?;
            levels.push(term);
        }
        Ok(ImageLoss {
            total,
            levels: [levels[0], levels[1], levels[2], levels[3]],
        })
    }
}

/// Instance-level discriminator on flattened ROI features: two hidden
/// fully-connected layers and a sigmoid output with one unit (agnostic) or
/// one unit per foreground class (category-aware).
#[derive(Clone, Debug)]
pub struct InstanceDomainClassifier {
    fc1: Layer,
    fc2: Layer,
    out: Layer,
    outputs: usize,
}

impl InstanceDomainClassifier {
    pub const PREFIX: &'static str = "disc_ins.";

    fn shapes(in_dim: usize, width: usize, outputs: usize) -> [(&'static str, Vec<usize>); 3] {
        [
            ("disc_ins.fc1", vec![width, in_dim]),
            ("disc_ins.fc2", vec![width, width]),
            ("disc_ins.out", vec![outputs, width]),
        ]
    }

    pub fn init(store: &mut ParamStore, in_dim: usize, width: usize, outputs: usize, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, Stream::InitInstanceDisc);
        let mut l = Vec::new();
        for (name, shape) in Self::shapes(in_dim, width, outputs) {
            l.push(Layer::random(store, name, &shape, &mut rng, None)?);
        }
        Ok(Self {
            fc1: l[0],
            fc2: l[1],
            out: l[2],
            outputs,
        })
    }

    pub fn from_store(store: &ParamStore, in_dim: usize, width: usize, outputs: usize) -> Result<Self> {
        let mut l = Vec::new();
        for (name, shape) in Self::shapes(in_dim, width, outputs) {
            l.push(Layer::lookup(store, name, &shape)?);
        }
        Ok(Self {
            fc1: l[0],
            fc2: l[1],
            out: l[2],
            outputs,
        })
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    /// `[R, outputs]` domain probabilities.
    pub fn forward(&self, g: &mut Graph, p: &Bound, roi_feat: Var) -> Result<Var> {
        let h = self.fc1.linear(g, p, roi_feat)?;
        let h = g.relu(h)?;
        let h = self.fc2.linear(g, p, h)?;
        let h = g.relu(h)?;
        let h = self.out.linear(g, p, h)?;
        g.sigmoid(h)
    }
}

/// Outcome of an instance-level loss: the scalar and whether a side had no
/// usable instances.
#[derive(Clone, Copy, Debug)]
pub struct InstanceLoss {
    pub value: Var,
    pub skipped: bool,
}

/// Category-agnostic instance loss from discriminator outputs `[R_s, 1]` and
/// `[R_t, 1]` (either side may be absent).
pub fn instance_agnostic_loss(g: &mut Graph, source: Option<Var>, target: Option<Var>) -> Result<InstanceLoss> {
    let skipped = source.is_none() || target.is_none();
    Ok(InstanceLoss {
        value: least_squares_loss(g, source, target)?,
        skipped,
    })
}

/// Category-aware penalty of one image: `mean_i Σ_c ŷ_{i,c} · e_{i,c}` with
/// `e = D²` on source and `(1 − D)²` on target. `disc` is `[R, C]`;
/// `posteriors` hold `C + 1` entries per instance with background last. The
/// foreground weights are used as-is (no renormalization) and instances with
/// foreground mass below [`MIN_FOREGROUND_MASS`] are dropped. Returns `None`
/// when no instance remains.
pub fn category_aware_term(
    g: &mut Graph,
    disc: Var,
    posteriors: &[Vec<f64>],
    domain: Domain,
) -> Result<Option<Var>> {
    let [r, c] = g.value(disc).dims2()?;
    if posteriors.len() != r {
        return Err(shape_err!("{} posteriors for {r} instances", posteriors.len()));
    }
    if let Some(bad) = posteriors.iter().find(|p| p.len() != c + 1) {
        return Err(shape_err!("posterior of length {} for {c} classes", bad.len()));
    }
    let keep: Vec<usize> = (0..r)
        .filter(|&i| posteriors[i][..c].iter().sum::<f64>() >= MIN_FOREGROUND_MASS)
        .collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let d = if keep.len() == r { disc } else { g.gather_rows(disc, &keep)? };
    let e = match domain {
        Domain::Source => g.square(d)?,
        Domain::Target => {
            let r = g.rsub_scalar(1.0, d)?;
            g.square(r)?
        }
    };
    let w: Vec<f64> = keep.iter().flat_map(|&i| posteriors[i][..c].iter().copied()).collect();
    let w = Tensor::new(vec![keep.len(), c], w)?;
    let weighted = g.mul_const(e, &w)?;
    let s = g.sum(weighted)?;
    Ok(Some(g.scale(s, 1.0 / keep.len() as f64)?))
}

/// Category-aware instance loss over one source and one target image.
pub fn instance_category_aware_loss(
    g: &mut Graph,
    source: Option<(Var, &[Vec<f64>])>,
    target: Option<(Var, &[Vec<f64>])>,
) -> Result<InstanceLoss> {
    let mut skipped = false;
    let mut total = g.constant(Tensor::scalar(0.0));
    for (side, domain) in [(source, Domain::Source), (target, Domain::Target)] {
        let term = match side {
            Some((d, post)) => category_aware_term(g, d, post, domain)?,
            None => None,
        };
        match term {
            Some(t) => total = g.add(total, t)?,
            None => skipped = true,
        }
    }
    Ok(InstanceLoss { value: total, skipped })
}

/// Category-correlation metric head: per-level 1×1 projections to a common
/// width, summed across levels, then a linear embedding layer.
#[derive(Clone, Debug)]
pub struct CorrelationHead {
    levels: [Layer; 4],
    embed: Layer,
    channels: [usize; 4],
    width: usize,
    grid: usize,
}

impl CorrelationHead {
    pub const PREFIX: &'static str = "corr.";

    fn shapes(channels: [usize; 4], width: usize, embed_dim: usize) -> Vec<(String, Vec<usize>)> {
        let mut out: Vec<(String, Vec<usize>)> = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| (format!("corr.level{}", l + 1), vec![width, c, 1, 1]))
            .collect();
        out.push(("corr.embed".to_string(), vec![embed_dim, width]));
        out
    }

    fn assemble(l: Vec<Layer>, channels: [usize; 4], width: usize, grid: usize) -> Self {
        Self {
            levels: [l[0], l[1], l[2], l[3]],
            embed: l[4],
            channels,
            width,
            grid,
        }
    }

    pub fn init(
        store: &mut ParamStore,
        channels: [usize; 4],
        width: usize,
        embed_dim: usize,
        grid: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = stream(seed, Stream::InitCorrelation);
        let layers = Self::shapes(channels, width, embed_dim)
            .into_iter()
            .map(|(name, shape)| {
                // small embeddings start inside the margin so both pair terms carry gradient
                let std = (name == "corr.embed").then_some(EMBED_INIT_STD);
                Layer::random(store, &name, &shape, &mut rng, std)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(layers, channels, width, grid))
    }

    pub fn from_store(
        store: &ParamStore,
        channels: [usize; 4],
        width: usize,
        embed_dim: usize,
        grid: usize,
    ) -> Result<Self> {
        let layers = Self::shapes(channels, width, embed_dim)
            .into_iter()
            .map(|(name, shape)| Layer::lookup(store, &name, &shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::assemble(layers, channels, width, grid))
    }

    /// Fused `[R, width]` features of `boxes`: ROI-Align on every level, a
    /// 1×1 projection per level, element-wise sum and spatial average.
    /// Degenerate boxes are skipped; the indices of the kept boxes are
    /// returned alongside.
    ///
    /// The spatial average is taken before the projection, which is the same
    /// map since both are linear.
    pub fn refine_instance_features(
        &self,
        g: &mut Graph,
        p: &Bound,
        pyramid: &FeaturePyramid,
        boxes: &[Bbox],
    ) -> Result<Option<(Var, Vec<usize>)>> {
        let mut fused = None;
        let mut kept_all = Vec::new();
        for l in 0..4 {
            let Some((roi, kept)) = Detector::roi_extract(g, pyramid.levels[l], boxes, PYRAMID_STRIDES[l], self.grid)?
            else {
                return Ok(None);
            };
            let pooled = g.mean_spatial(roi)?;
            let w = g.reshape(p[self.levels[l].w], &[self.width, self.channels[l]])?;
            let proj = g.linear(pooled, w, Some(p[self.levels[l].b]))?;
            fused = Some(match fused {
                None => proj,
                Some(f) => g.add(f, proj)?,
            });
            kept_all = kept;
        }
        Ok(fused.map(|f| (f, kept_all)))
    }

    /// `[R, embed_dim]` embedding of fused features.
    pub fn embed(&self, g: &mut Graph, p: &Bound, fused: Var) -> Result<Var> {
        self.embed.linear(g, p, fused)
    }
}

/// Contrastive correlation loss over rows of `embeddings`: the mean squared
/// distance of same-domain/different-category pairs plus the mean squared
/// hinge `max(0, m − d)²` of different-domain/same-category pairs. Empty
/// groups contribute 0; other groups are ignored.
pub fn correlation_loss(g: &mut Graph, embeddings: Var, pairs: &[InstancePair], margin: f64) -> Result<Var> {
    let mut total = g.constant(Tensor::scalar(0.0));
    for group in [PairGroup::Sddc, PairGroup::Ddsc] {
        let sel: Vec<&InstancePair> = pairs.iter().filter(|p| p.group == group).collect();
        if sel.is_empty() {
            continue;
        }
        let a: Vec<usize> = sel.iter().map(|p| p.a).collect();
        let b: Vec<usize> = sel.iter().map(|p| p.b).collect();
        let ea = g.gather_rows(embeddings, &a)?;
        let eb = g.gather_rows(embeddings, &b)?;
        let diff = g.sub(ea, eb)?;
        let sq = g.square(diff)?;
        let d2 = g.sum_last(sq)?;
        let term = match group {
            PairGroup::Sddc => g.mean(d2)?,
            _ => {
                let d = g.sqrt(d2)?;
                let gap = g.rsub_scalar(margin, d)?;
                let hinge = g.relu(gap)?;
                let h2 = g.square(hinge)?;
                g.mean(h2)?
            }
        };
        total = g.add(total, term)?;
    }
    Ok(total)
}
