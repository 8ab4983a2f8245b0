//! Training loop, optimizer, evaluation, gradient check and ablation harness.

mod ablation;
mod config;
mod eval;
mod gradcheck;
mod model;

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use ablation::{ablation_modes, median, AblationRow, AblationTable};
pub use config::{Modes, Schedule, TrainConfig};
pub use eval::{average_precision, evaluate, evaluate_detections, match_detections, EvalResult, IOU_THRESHOLD};
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport, GRAD_CHECK_TOLERANCE};
pub use model::{CorrPlan, Features, InstancePlan, LossBreakdown, Model, Objective, StepPlan};

use crate::detector::GroundTruth;
use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::synthdata::Sample;
use crate::tensor::{Graph, ParamStore, Tensor};

pub const METRICS_HEADER: &str = "step,L_det,L_D1,L_D2,L_D3,L_D4,L_ins,L_cat,L_corr,active_flags";

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub det: f64,
    pub levels: [f64; 4],
    pub ins: f64,
    pub cat: f64,
    pub corr: f64,
    pub total: f64,
    pub lr: f64,
    /// Modes in effect, e.g. `img+cat`; `:skip` marks an instance loss that
    /// had no usable instance on one side.
    pub active_flags: String,
}

impl StepRecord {
    fn new(step: usize, lr: f64, active: Modes, b: &LossBreakdown) -> Self {
        let mut flags = active.label();
        if b.ins_skipped {
            flags.push_str(":skip");
        }
        Self {
            step,
            det: b.det,
            levels: b.levels,
            ins: b.ins,
            cat: b.cat,
            corr: b.corr,
            total: b.total,
            lr,
            active_flags: flags,
        }
    }

    pub fn csv_row(&self) -> String {
        let mut s = format!("{},{}", self.step, self.det);
        for l in self.levels {
            let _ = write!(s, ",{l}");
        }
        let _ = write!(s, ",{},{},{},{}", self.ins, self.cat, self.corr, self.active_flags);
        s
    }
}

/// Plain SGD with momentum: `v ← μv + g`, `w ← w − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        let velocity = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self { momentum, velocity }
    }

    /// Applies one update. A parameter without a gradient is treated as
    /// having a zero gradient (its momentum still decays and moves it).
    pub fn step(&mut self, store: &mut ParamStore, grads: Vec<Option<Vec<f64>>>, lr: f64) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        if grads.len() != ids.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                ids.len()
            )));
        }
        for ((id, g), v) in ids.into_iter().zip(grads).zip(&mut self.velocity) {
            match g {
                Some(g) => {
                    for (vi, gi) in v.iter_mut().zip(&g) {
                        *vi = self.momentum * *vi + gi;
                    }
                }
                None => {
                    if v.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    for vi in v.iter_mut() {
                        *vi *= self.momentum;
                    }
                }
            }
            let w = store.get_mut(id).data_mut();
            for (wi, vi) in w.iter_mut().zip(v.iter()) {
                *wi -= lr * vi;
            }
        }
        Ok(())
    }
}

/// Mutable state of a training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub model: Model,
    pub step: usize,
    opt: Sgd,
    source_order: ChaCha8Rng,
    target_order: ChaCha8Rng,
    roi_rng: ChaCha8Rng,
    pair_rng: ChaCha8Rng,
    pub last: Option<StepRecord>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let model = Model::init(&mut store, &cfg)?;
        let opt = Sgd::new(&store, cfg.momentum);
        let s = cfg.seed;
        Ok(Self {
            store,
            model,
            step: 0,
            opt,
            source_order: stream(s, Stream::SourceOrder),
            target_order: stream(s, Stream::TargetOrder),
            roi_rng: stream(s, Stream::RoiSampling),
            pair_rng: stream(s, Stream::PairSampling),
            last: None,
            cfg,
        })
    }

    /// One optimization step on a source image with annotations and an
    /// unannotated target image (unused when no alignment term is active).
    pub fn train_step(&mut self, source: &Tensor, gt: &GroundTruth, target: Option<&Tensor>) -> Result<StepRecord> {
        let schedule = self.cfg.schedule();
        let active = schedule.active(self.cfg.modes(), self.step);
        let lr = schedule.lr_at(self.step);
        let [_, _, h, w] = source.dims4()?;
        let mut g = Graph::new();
        let p = self.store.bind(&mut g);
        let feats = self.model.forward_features(&mut g, &p, source, target, active)?;
        let plan = self.model.plan(
            &self.store,
            &g,
            &feats,
            gt,
            (h, w),
            active,
            &self.cfg,
            &mut self.roi_rng,
            &mut self.pair_rng,
        )?;
        let obj = self.model.objective(&mut g, &p, &feats, gt, &plan, &self.cfg)?;
        let record = StepRecord::new(self.step, lr, active, &obj.breakdown);
        if !record.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", self.step)));
        }
        g.backward(obj.total)?;
        let grads = p.take_grads(&mut g);
        drop(g);
        self.opt.step(&mut self.store, grads, lr)?;
        self.step += 1;
        self.last = Some(record.clone());
        Ok(record)
    }

    /// Draws the next source index and, when the run has any alignment
    /// module configured, the next target index.
    pub fn next_indices(&mut self, n_source: usize, n_target: usize) -> (usize, Option<usize>) {
        let s = self.source_order.random_range(0..n_source);
        let t = match self.cfg.modes().any() && n_target > 0 {
            true => Some(self.target_order.random_range(0..n_target)),
            false => None,
        };
        (s, t)
    }

    /// Runs the remaining steps up to `total_steps`, calling `on_step`
    /// after each one. Target annotations are never read.
    pub fn run(
        &mut self,
        source: &[Sample],
        target: &[Tensor],
        on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        self.run_until(self.cfg.total_steps, source, target, on_step)
    }

    /// Like [`Trainer::run`] but stops once `step` reaches `until` (capped
    /// at `total_steps`); a later call resumes where this one stopped.
    pub fn run_until(
        &mut self,
        until: usize,
        source: &[Sample],
        target: &[Tensor],
        mut on_step: impl FnMut(&StepRecord) -> Result<()>,
    ) -> Result<()> {
        if source.is_empty() {
            return Err(Error::Config("empty source set".into()));
        }
        while self.step < until.min(self.cfg.total_steps) {
            let (si, ti) = self.next_indices(source.len(), target.len());
            let s = &source[si];
            let rec = self.train_step(&s.image, &s.gt, ti.map(|i| &target[i]))?;
            on_step(&rec)?;
        }
        Ok(())
    }
}

/// Last known state of a run that hit a non-finite value.
#[derive(Debug, Serialize)]
pub struct Diagnostic {
    pub failed_step: usize,
    pub error: String,
    pub last_completed: Option<StepRecord>,
}

/// Trains with `cfg` and writes `metrics.csv` and `checkpoint.bin` under
/// `out`. On a non-finite value the run aborts, `diagnostic.json` records
/// the failing step and the last loss breakdown, and the error is returned.
pub fn train_to_dir(
    cfg: &TrainConfig,
    source: &[Sample],
    target: &[Tensor],
    out: &Path,
    mut progress: impl FnMut(&StepRecord),
) -> Result<Trainer> {
    std::fs::create_dir_all(out)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut csv = std::io::BufWriter::new(std::fs::File::create(out.join("metrics.csv"))?);
    writeln!(csv, "{METRICS_HEADER}")?;
    let res = trainer.run(source, target, |r| {
        writeln!(csv, "{}", r.csv_row())?;
        progress(r);
        Ok(())
    });
    csv.flush()?;
    if let Err(e) = res {
        if matches!(e, Error::NonFinite(_)) {
            let d = Diagnostic {
                failed_step: trainer.step,
                error: e.to_string(),
                last_completed: trainer.last.clone(),
            };
            std::fs::write(out.join("diagnostic.json"), serde_json::to_string_pretty(&d)?)?;
        }
        return Err(e);
    }
    trainer.store.save(out.join("checkpoint.bin"))?;
    Ok(trainer)
}

#[cfg(test)]
mod tests;
