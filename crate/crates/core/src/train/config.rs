//! Training configuration and schedule.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// Which alignment modules a run uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Modes {
    pub img: bool,
    pub ins: bool,
    pub cat: bool,
    pub corr: bool,
}

impl Modes {
    pub const SOURCE_ONLY: Modes = Modes {
        img: false,
        ins: false,
        cat: false,
        corr: false,
    };
    pub const FULL: Modes = Modes {
        img: true,
        ins: false,
        cat: true,
        corr: true,
    };

    pub fn any(&self) -> bool {
        self.img || self.ins || self.cat || self.corr
    }

    /// `img+cat+corr` style label; `none` when nothing is on.
    pub fn label(&self) -> String {
        let names: Vec<&str> = [("img", self.img), ("ins", self.ins), ("cat", self.cat), ("corr", self.corr)]
            .into_iter()
            .filter(|x| x.1)
            .map(|x| x.0)
            .collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}

/// Step thresholds and learning rates. Steps are counted from 0; a module
/// launched at step `s` contributes from step `s` on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub total_steps: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    pub lr_decay_step: usize,
    pub launch_instance: usize,
    pub launch_corr: usize,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.lr_decay_step {
            self.lr
        } else {
            self.lr_decayed
        }
    }

    pub fn instance_active(&self, step: usize) -> bool {
        step >= self.launch_instance
    }

    pub fn corr_active(&self, step: usize) -> bool {
        step >= self.launch_corr
    }

    /// Modes in effect at `step` given the configured ones.
    pub fn active(&self, modes: Modes, step: usize) -> Modes {
        Modes {
            img: modes.img,
            ins: modes.ins && self.instance_active(step),
            cat: modes.cat && self.instance_active(step),
            corr: modes.corr && self.corr_active(step),
        }
    }
}

/// Every knob of a training run. Unknown keys are rejected and missing keys
/// take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: usize,
    pub lr: f64,
    pub lr_decayed: f64,
    pub lr_decay_step: usize,
    pub momentum: f64,
    pub launch_instance: usize,
    pub launch_corr: usize,
    pub lambda_adv: f64,
    pub level_weights: [f64; 4],
    pub margin: f64,
    pub img: bool,
    pub ins: bool,
    pub cat: bool,
    pub corr: bool,
    pub image_disc_width: usize,
    pub instance_disc_width: usize,
    pub fused_dim: usize,
    pub embed_dim: usize,
    pub pair_cap: usize,
    /// Minimum detection score for an instance to enter the correlation loss.
    pub corr_score: f64,
    pub corr_max_per_image: usize,
    pub num_classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            total_steps: 7000,
            lr: 1e-3,
            lr_decayed: 1e-4,
            lr_decay_step: 5000,
            momentum: 0.9,
            launch_instance: 3000,
            launch_corr: 5000,
            lambda_adv: 0.1,
            level_weights: [1.0; 4],
            margin: 1.0,
            img: true,
            ins: false,
            cat: true,
            corr: true,
            image_disc_width: 64,
            instance_disc_width: 128,
            fused_dim: 256,
            embed_dim: 256,
            pair_cap: 128,
            corr_score: 0.5,
            corr_max_per_image: 16,
            num_classes: 3,
        }
    }
}

fn check(ok: bool, field: &str, why: &str) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(config_err!("field `{field}`: {why}"))
    }
}

impl TrainConfig {
    pub fn modes(&self) -> Modes {
        Modes {
            img: self.img,
            ins: self.ins,
            cat: self.cat,
            corr: self.corr,
        }
    }

    pub fn set_modes(&mut self, m: Modes) {
        self.img = m.img;
        self.ins = m.ins;
        self.cat = m.cat;
        self.corr = m.corr;
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            total_steps: self.total_steps,
            lr: self.lr,
            lr_decayed: self.lr_decayed,
            lr_decay_step: self.lr_decay_step,
            launch_instance: self.launch_instance,
            launch_corr: self.launch_corr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check(self.total_steps > 0, "total_steps", "must be positive")?;
        check(
            0 < self.launch_instance && self.launch_instance <= self.launch_corr && self.launch_corr <= self.total_steps,
            "launch_instance",
            "need 0 < launch_instance <= launch_corr <= total_steps",
        )?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(self.lr_decayed > 0.0 && self.lr_decayed.is_finite(), "lr_decayed", "must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum", "must lie in [0, 1)")?;
        check(
            self.lambda_adv >= 0.0 && self.lambda_adv.is_finite(),
            "lambda_adv",
            "must be non-negative",
        )?;
        check(
            self.level_weights.iter().all(|w| *w >= 0.0 && w.is_finite()),
            "level_weights",
            "must be non-negative",
        )?;
        check(self.margin > 0.0 && self.margin.is_finite(), "margin", "must be positive")?;
        check(!(self.ins && self.cat), "ins", "`ins` and `cat` are alternatives; enable at most one")?;
        for (name, v) in [
            ("image_disc_width", self.image_disc_width),
            ("instance_disc_width", self.instance_disc_width),
            ("fused_dim", self.fused_dim),
            ("embed_dim", self.embed_dim),
            ("num_classes", self.num_classes),
            ("corr_max_per_image", self.corr_max_per_image),
        ] {
            check(v > 0, name, "must be positive")?;
        }
        check((0.0..=1.0).contains(&self.corr_score), "corr_score", "must lie in [0, 1]")?;
        Ok(())
    }

    /// Parses and validates a JSON config. Syntax errors carry line and
    /// column; semantic errors name the field.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| {
            Error::Config(format!("line {} column {}: {e}", e.line(), e.column()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }
}
