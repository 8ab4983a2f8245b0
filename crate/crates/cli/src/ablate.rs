use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use ifan_core::train::{ablation_modes, AblationTable, Modes};
use serde::Deserialize;

use crate::{load_train_config, write_json, write_run, AblateArgs};

struct Job {
    modes: Modes,
    seed: u64,
    dir: PathBuf,
}

#[derive(Deserialize)]
struct EvalFile {
    map: f64,
}

fn spawn(job: &Job, a: &AblateArgs) -> Result<Child> {
    let exe = std::env::current_exe().context("locating the ifan binary")?;
    let mut cmd = Command::new(exe);
    cmd.arg("train")
        .arg("--modes")
        .arg(job.modes.label())
        .arg("--seed")
        .arg(job.seed.to_string())
        .arg("--source")
        .arg(&a.source)
        .arg("--target")
        .arg(&a.target)
        .arg("--eval")
        .arg(&a.eval)
        .arg("--out")
        .arg(&job.dir)
        .arg("--log-every")
        .arg("0");
    if let Some(c) = &a.common.config {
        cmd.arg("--config").arg(c);
    }
    if let Some(n) = a.steps {
        cmd.arg("--steps").arg(n.to_string());
    }
    let log = std::fs::File::create(job.dir.with_extension("log"))?;
    cmd.stdout(Stdio::null()).stderr(log);
    cmd.spawn().context("spawning a training run")
}

fn read_map(dir: &Path) -> Result<f64> {
    let text = std::fs::read_to_string(dir.join("eval.json")).with_context(|| format!("{}: no eval.json", dir.display()))?;
    let e: EvalFile = serde_json::from_str(&text)?;
    Ok(e.map)
}

/// Trains and evaluates every configuration × seed as child processes, at
/// most `jobs` at a time, then writes the table.
pub(crate) fn run(a: AblateArgs) -> Result<()> {
    // validate once up front so a bad config fails before any child starts
    let base = load_train_config(&a.common, None, a.steps)?;
    let out = &a.common.out;
    write_run(out, "ablate", &base, &[&a.source, &a.target, &a.eval])?;
    let runs_dir = out.join("runs");
    std::fs::create_dir_all(&runs_dir)?;
    let mut pending: Vec<Job> = Vec::new();
    for seed in &a.seeds {
        for m in ablation_modes() {
            pending.push(Job {
                modes: m,
                seed: *seed,
                dir: runs_dir.join(format!("{}_s{seed}", m.label())),
            });
        }
    }
    pending.reverse();
    let jobs = a.jobs.max(1);
    let mut running: Vec<(Job, Child)> = Vec::new();
    let mut table = AblationTable::default();
    let mut failed = Vec::new();
    while !pending.is_empty() || !running.is_empty() {
        while running.len() < jobs {
            let Some(job) = pending.pop() else { break };
            eprintln!("start {} seed {}", job.modes.label(), job.seed);
            let child = spawn(&job, &a)?;
            running.push((job, child));
        }
        let mut i = 0;
        let mut progressed = false;
        while i < running.len() {
            if let Some(status) = running[i].1.try_wait()? {
                let (job, _) = running.swap_remove(i);
                progressed = true;
                if status.success() {
                    let map = read_map(&job.dir)?;
                    eprintln!("done  {} seed {}: mAP {:.4}", job.modes.label(), job.seed, map);
                    table.record(job.modes, job.seed, map);
                } else {
                    eprintln!("FAILED {} seed {} ({status}); see {}", job.modes.label(), job.seed, job.dir.with_extension("log").display());
                    failed.push(job.dir.display().to_string());
                }
            } else {
                i += 1;
            }
        }
        if !progressed {
            std::thread::sleep(Duration::from_millis(200));
        }
    }
    write_json(&out.join("ablation.json"), &table)?;
    std::fs::write(out.join("ablation_runs.csv"), table.runs_csv())?;
    std::fs::write(out.join("ablation.csv"), table.summary_csv())?;
    std::fs::write(out.join("ablation.md"), table.markdown())?;
    print!("{}", table.markdown());
    if !failed.is_empty() {
        bail!("{} run(s) failed: {}", failed.len(), failed.join(", "));
    }
    Ok(())
}
