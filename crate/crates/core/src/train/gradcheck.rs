//! Central-difference check of the analytic gradient of the full step
//! objective.

use std::fmt::Write as _;

use serde::Serialize;

use super::config::TrainConfig;
use super::model::{LossBreakdown, Model, StepPlan};
use super::model::sorted_sample;
use crate::detector::{Detector, GroundTruth};
use crate::error::Result;
use crate::rng::{stream, Stream};
use crate::tensor::{Graph, ParamStore, Tensor};

pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;
/// Central-difference half steps, tried in order. A ReLU or max-pool
/// boundary inside the step breaks the difference quotient, so a failing
/// entry is retried with smaller steps.
const STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-6;

/// Parameter groups sampled separately.
pub const MODULES: [&str; 6] = ["backbone.", "rpn.", "head.", "disc_img.", "disc_ins.", "corr."];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub module: String,
    /// `name[flat index]`.
    pub path: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// Half step of the reported difference quotient.
    pub step: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub offending: Vec<String>,
}

impl GradCheckReport {
    pub fn summary(&self) -> String {
        let mut s = String::new();
        let mut modules: Vec<&str> = self.entries.iter().map(|e| e.module.as_str()).collect();
        modules.dedup();
        for m in modules {
            let es: Vec<&GradCheckEntry> = self.entries.iter().filter(|e| e.module == m).collect();
            let worst = es.iter().map(|e| e.rel_err).fold(0.0, f64::max);
            let _ = writeln!(s, "{m:<10} {:>3} params  max rel err {worst:.3e}", es.len());
        }
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(
            s,
            "{verdict}: max rel err {:.3e} (tolerance {:.0e})",
            self.max_rel_err, self.tolerance
        );
        for p in &self.offending {
            let _ = writeln!(s, "  offending: {p}");
        }
        s
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

struct Probe<'a> {
    model: &'a Model,
    cfg: &'a TrainConfig,
    source: &'a Tensor,
    target: &'a Tensor,
    gt: &'a GroundTruth,
}

impl Probe<'_> {
    fn values(&self, store: &ParamStore, plan: &StepPlan) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let feats = self
            .model
            .forward_features(&mut g, &p, self.source, Some(self.target), plan.active)?;
        Ok(self.model.objective(&mut g, &p, &feats, self.gt, plan, self.cfg)?.breakdown)
    }
}

/// Compares analytic and central-difference gradients of the step
/// objective with every configured module active, on one source/target
/// pair, for `per_module` sampled entries of each module present.
///
/// The discrete parts of the step (ROI sample, instance boxes, posteriors,
/// pairs) are drawn once and held fixed. Detector parameters see the
/// alignment terms through the gradient reversal, so their numeric
/// reference is `d(L_det) − λ·d(L_align)`. The detection score threshold
/// for correlation instances is lifted so that an untrained detector still
/// yields pairs.
pub fn grad_check(
    cfg: &TrainConfig,
    source: &Tensor,
    gt: &GroundTruth,
    target: &Tensor,
    per_module: usize,
) -> Result<GradCheckReport> {
    cfg.validate()?;
    let cfg = &TrainConfig {
        corr_score: 0.0,
        ..cfg.clone()
    };
    let mut store = ParamStore::new();
    let model = Model::init(&mut store, cfg)?;
    let active = cfg.modes();
    let [_, _, h, w] = source.dims4()?;
    let probe = Probe {
        model: &model,
        cfg,
        source,
        target,
        gt,
    };

    let (plan, grads) = {
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let feats = model.forward_features(&mut g, &p, source, Some(target), active)?;
        let plan = model.plan(
            &store,
            &g,
            &feats,
            gt,
            (h, w),
            active,
            cfg,
            &mut stream(cfg.seed, Stream::RoiSampling),
            &mut stream(cfg.seed, Stream::PairSampling),
        )?;
        let obj = model.objective(&mut g, &p, &feats, gt, &plan, cfg)?;
        g.backward(obj.total)?;
        (plan, p.take_grads(&mut g))
    };

    let mut rng = stream(cfg.seed, Stream::GradCheck);
    let mut entries = Vec::new();
    for module in MODULES {
        // flat (param, index) space of the module
        let params: Vec<_> = store
            .iter()
            .filter(|(_, name, _)| name.starts_with(module))
            .map(|(id, name, t)| (id, name.to_string(), t.len()))
            .collect();
        let total: usize = params.iter().map(|x| x.2).sum();
        if total == 0 {
            continue;
        }
        for flat in sorted_sample(&mut rng, total, per_module) {
            let mut rest = flat;
            let (id, name, _) = params
                .iter()
                .find(|(_, _, n)| {
                    if rest < *n {
                        true
                    } else {
                        rest -= n;
                        false
                    }
                })
                .expect("index within module");
            let k = rest;
            let analytic = grads[id.index()].as_ref().map_or(0.0, |g| g[k]);
            let sign = if Detector::is_detector_param(name) {
                -cfg.lambda_adv
            } else {
                1.0
            };
            let mut best: Option<(f64, f64, f64)> = None;
            for h in STEPS {
                let orig = store.get(*id).data()[k];
                store.get_mut(*id).data_mut()[k] = orig + h;
                let up = probe.values(&store, &plan)?;
                store.get_mut(*id).data_mut()[k] = orig - h;
                let down = probe.values(&store, &plan)?;
                store.get_mut(*id).data_mut()[k] = orig;
                let d_det = (up.det - down.det) / (2.0 * h);
                let d_align = ((up.total - up.det) - (down.total - down.det)) / (2.0 * h);
                let numeric = d_det + sign * d_align;
                let err = rel_err(analytic, numeric);
                if best.is_none_or(|b| err < b.1) {
                    best = Some((numeric, err, h));
                }
                if err < GRAD_CHECK_TOLERANCE {
                    break;
                }
            }
            let (numeric, rel_err, step) = best.expect("at least one step");
            entries.push(GradCheckEntry {
                module: module.trim_end_matches('.').to_string(),
                path: format!("{name}[{k}]"),
                analytic,
                numeric,
                rel_err,
                step,
            });
        }
    }
    let max_rel_err = entries.iter().map(|e| e.rel_err).fold(0.0, f64::max);
    let offending: Vec<String> = entries
        .iter()
        .filter(|e| !(e.rel_err < GRAD_CHECK_TOLERANCE))
        .map(|e| e.path.clone())
        .collect();
    Ok(GradCheckReport {
        passed: offending.is_empty(),
        entries,
        max_rel_err,
        tolerance: GRAD_CHECK_TOLERANCE,
        offending,
    })
}
