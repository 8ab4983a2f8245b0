//! Ablation table over alignment configurations.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::config::Modes;

/// The six configurations, in table order: none, img, img+ins, img+cat,
/// img+corr, img+cat+corr.
pub fn ablation_modes() -> [Modes; 6] {
    let m = |img, ins, cat, corr| Modes { img, ins, cat, corr };
    [
        m(false, false, false, false),
        m(true, false, false, false),
        m(true, true, false, false),
        m(true, false, true, false),
        m(true, false, false, true),
        m(true, false, true, true),
    ]
}

/// Median of `values` (mean of the middle two for even counts).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub modes: Modes,
    /// `(seed, target mAP)` per run.
    pub runs: Vec<(u64, f64)>,
}

impl AblationRow {
    pub fn median(&self) -> f64 {
        let v: Vec<f64> = self.runs.iter().map(|r| r.1).collect();
        median(&v).unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn mark(b: bool) -> &'static str {
    if b {
        "x"
    } else {
        ""
    }
}

impl AblationTable {
    /// Records one run, creating its row in table order if needed.
    pub fn record(&mut self, modes: Modes, seed: u64, map: f64) {
        match self.rows.iter_mut().find(|r| r.modes == modes) {
            Some(r) => r.runs.push((seed, map)),
            None => self.rows.push(AblationRow {
                modes,
                runs: vec![(seed, map)],
            }),
        }
        let order = ablation_modes();
        let rank = |m: &Modes| order.iter().position(|o| o == m).unwrap_or(order.len());
        self.rows.sort_by_key(|r| rank(&r.modes));
    }

    pub fn row(&self, modes: Modes) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.modes == modes)
    }

    /// One line per run: `img,ins,cat,corr,seed,map`.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from("img,ins,cat,corr,seed,map\n");
        for r in &self.rows {
            let m = r.modes;
            for (seed, map) in &r.runs {
                let _ = writeln!(s, "{},{},{},{},{seed},{map}", m.img as u8, m.ins as u8, m.cat as u8, m.corr as u8);
            }
        }
        s
    }

    /// One line per configuration with the median over seeds.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("img,ins,cat,corr,runs,median_map\n");
        for r in &self.rows {
            let m = r.modes;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                m.img as u8,
                m.ins as u8,
                m.cat as u8,
                m.corr as u8,
                r.runs.len(),
                r.median()
            );
        }
        s
    }

    pub fn markdown(&self) -> String {
        let mut s = String::from("| img | ins | cat | corr | mAP@0.5 (median) | per seed |\n|---|---|---|---|---|---|\n");
        for r in &self.rows {
            let m = r.modes;
            let per: Vec<String> = r.runs.iter().map(|(seed, v)| format!("{seed}: {:.1}", 100.0 * v)).collect();
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} | {:.1} | {} |",
                mark(m.img),
                mark(m.ins),
                mark(m.cat),
                mark(m.corr),
                100.0 * r.median(),
                per.join(", ")
            );
        }
        s
    }
}
