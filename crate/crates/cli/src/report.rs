//! Loss curves and the ablation table as SVG + CSV.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use ifan_core::train::{AblationTable, METRICS_HEADER};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;
const COLORS: [&str; 7] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"];

/// Loss columns plotted per run: L_det, the summed image-level terms,
/// L_ins, L_cat, L_corr.
const SERIES: [&str; 5] = ["L_det", "L_img", "L_ins", "L_cat", "L_corr"];

struct Curves {
    steps: Vec<f64>,
    series: Vec<Vec<f64>>,
}

fn read_metrics(path: &Path) -> Result<Curves> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        bail!("{}: unexpected header", path.display());
    }
    let mut steps = Vec::new();
    let mut series = vec![Vec::new(); SERIES.len()];
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            bail!("{}:{}: expected 10 fields", path.display(), i + 2);
        }
        let num = |k: usize| -> Result<f64> {
            f[k].parse()
                .with_context(|| format!("{}:{}: field {}", path.display(), i + 2, k + 1))
        };
        steps.push(num(0)?);
        series[0].push(num(1)?);
        series[1].push(num(2)? + num(3)? + num(4)? + num(5)?);
        series[2].push(num(6)?);
        series[3].push(num(7)?);
        series[4].push(num(8)?);
    }
    Ok(Curves { steps, series })
}

/// Trailing moving average over `window` points.
fn smooth(v: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut sum = 0.0;
    for i in 0..v.len() {
        sum += v[i];
        if i >= window {
            sum -= v[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

fn svg_header(s: &mut String, title: &str) {
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, WIDTH / 2.0);
}

fn axes(s: &mut String, x_max: f64, y_max: f64, x_label: &str) {
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let y = y0 - f * (y0 - y1);
        let x = x0 + f * (x1 - x0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y + 4.0, f * y_max);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{:.0}</text>"#, y0 + 14.0, f * x_max);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x_label}</text>"#, WIDTH / 2.0, HEIGHT - 8.0);
}

fn loss_svg(name: &str, c: &Curves, smoothed: &[Vec<f64>]) -> String {
    let mut s = String::new();
    svg_header(&mut s, &format!("training losses: {name}"));
    let x_max = c.steps.last().copied().unwrap_or(1.0).max(1.0);
    let y_max = smoothed.iter().flatten().copied().fold(1e-9, f64::max);
    axes(&mut s, x_max, y_max, "step");
    for (k, v) in smoothed.iter().enumerate() {
        if v.iter().all(|&x| x == 0.0) {
            continue;
        }
        let mut pts = String::new();
        for (x, y) in c.steps.iter().zip(v) {
            let px = MARGIN + x / x_max * (WIDTH - 2.0 * MARGIN);
            let py = HEIGHT - MARGIN - y / y_max * (HEIGHT - 2.0 * MARGIN);
            let _ = write!(pts, "{px:.1},{py:.1} ");
        }
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{}" stroke-width="1.2" points="{}"/>"#, COLORS[k], pts.trim_end());
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{}">{}</text>"#,
            WIDTH - MARGIN - 60.0,
            MARGIN + 14.0 * k as f64,
            COLORS[k],
            SERIES[k]
        );
    }
    s.push_str("</svg>\n");
    s
}

fn ablation_svg(t: &AblationTable) -> String {
    let mut s = String::new();
    svg_header(&mut s, "target mAP@0.5 by configuration (median over seeds)");
    let n = t.rows.len().max(1) as f64;
    let y_max = t.rows.iter().map(|r| r.median()).fold(0.05, f64::max) * 1.15;
    let (x0, y0) = (MARGIN, HEIGHT - MARGIN);
    let slot = (WIDTH - 2.0 * MARGIN) / n;
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}" stroke="black"/>"#, WIDTH - MARGIN);
    for (i, r) in t.rows.iter().enumerate() {
        let m = r.median();
        let h = m / y_max * (HEIGHT - 2.0 * MARGIN);
        let x = x0 + slot * i as f64 + slot * 0.15;
        let _ = writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="{:.1}" height="{h:.1}" fill="{}"/>"#,
            y0 - h,
            slot * 0.7,
            COLORS[i % COLORS.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{:.1}</text>"#, y0 - h - 4.0, 100.0 * m);
        for (seed, v) in &r.runs {
            let py = y0 - v / y_max * (HEIGHT - 2.0 * MARGIN);
            let _ = writeln!(s, r#"<circle cx="{cx:.1}" cy="{py:.1}" r="2.5" fill="black"><title>seed {seed}</title></circle>"#);
        }
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, y0 + 14.0, r.modes.label());
    }
    s.push_str("</svg>\n");
    s
}

pub(crate) fn run(runs: &[std::path::PathBuf], ablation: Option<&Path>, out: &Path) -> Result<()> {
    if runs.is_empty() && ablation.is_none() {
        bail!("nothing to report: pass --run and/or --ablation");
    }
    std::fs::create_dir_all(out)?;
    for (i, dir) in runs.iter().enumerate() {
        let c = read_metrics(&dir.join("metrics.csv"))?;
        let window = (c.steps.len() / 100).max(1);
        let smoothed: Vec<Vec<f64>> = c.series.iter().map(|v| smooth(v, window)).collect();
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| format!("run{i}"));
        std::fs::write(out.join(format!("loss_{name}.svg")), loss_svg(&name, &c, &smoothed))?;
        let mut csv = format!("step,{}\n", SERIES.join(","));
        for (k, step) in c.steps.iter().enumerate() {
            let _ = write!(csv, "{step}");
            for v in &smoothed {
                let _ = write!(csv, ",{}", v[k]);
            }
            csv.push('\n');
        }
        std::fs::write(out.join(format!("loss_{name}.csv")), csv)?;
    }
    if let Some(dir) = ablation {
        let path = dir.join("ablation.json");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let t: AblationTable = serde_json::from_str(&text)?;
        std::fs::write(out.join("ablation.svg"), ablation_svg(&t))?;
        std::fs::write(out.join("ablation.csv"), t.summary_csv())?;
        std::fs::write(out.join("ablation.md"), t.markdown())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_by_hand() {
        assert_eq!(smooth(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        assert_eq!(smooth(&[1.0], 5), vec![1.0]);
    }
}
