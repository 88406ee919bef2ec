//! Command execution and artifact writing.

use std::path::Path;

use obsdrive::covariates::generate_path;
use obsdrive::engine::{
    backward_measures, calibrate_thresholds, couple_replicas, invariance_check, regeneration_times, simulate,
    stationary_sampler, w_stats, wasserstein1,
};
use obsdrive::io::{csv_string, fmt_float};
use obsdrive::verify::full_report;
use serde::Serialize;
use serde_json::json;

use crate::manifest::{Command, Manifest};
use crate::CliError;

/// Result of a command: exit status and the line printed to standard output.
pub struct Outcome {
    pub exit_code: i32,
    pub summary: String,
}

fn sorted_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable output");
    serde_json::to_string_pretty(&v).expect("json value") + "\n"
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::write(dir.join(name), contents).map_err(|e| CliError::Io(format!("{}: {e}", dir.join(name).display())))
}

fn lambda_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Runs a resolved manifest, writing artifacts into `dir`. Returns the
/// manifest with any parameters fixed during the run.
pub fn run(mut manifest: Manifest, dir: &Path) -> Result<(Manifest, Outcome), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let model = manifest.model.clone();
    let seed = manifest.seed;
    let p = &mut manifest.params;
    let outcome = match manifest.command {
        Command::Simulate => {
            let t0 = p.t_start.expect("resolved");
            let t1 = t0 + p.horizon.expect("resolved") as i64 - 1;
            let traj = simulate(&model, p.s0.as_ref().expect("resolved"), t0, t1, seed)?;
            write(dir, "trajectory.csv", &traj.to_csv())?;
            Outcome {
                exit_code: 0,
                summary: format!(
                    "simulate: {} steps on [{t0}, {t1}], mean lambda {:.6}",
                    traj.len(),
                    lambda_mean(&traj.lambda)
                ),
            }
        }
        Command::Couple => {
            let t0 = p.t_start.expect("resolved");
            let t1 = t0 + p.horizon.expect("resolved") as i64 - 1;
            let path = generate_path(&model.covariates, t0, t1, seed)?;
            let (traces, summary) = couple_replicas(
                &model,
                p.s0.as_ref().expect("resolved"),
                p.s0_prime.as_ref().expect("resolved"),
                &path,
                p.replicas.expect("resolved"),
                seed,
            )?;
            write(dir, "trace.csv", &traces[0].to_csv(&path))?;
            let rows = traces.iter().enumerate().map(|(j, tr)| {
                vec![
                    j.to_string(),
                    tr.meet_time.map_or(String::new(), |t| t.to_string()),
                    if tr.censored { "1".into() } else { "0".into() },
                    fmt_float(tr.lambda_gap_sum),
                ]
            });
            write(
                dir,
                "replicas.csv",
                &csv_string(&["replica", "meet_time", "censored", "lambda_gap_sum"], rows),
            )?;
            write(dir, "summary.json", &sorted_json(&summary))?;
            Outcome {
                exit_code: 0,
                summary: format!(
                    "couple: {} of {} replicas met before the horizon, {} censored",
                    summary.met_before_horizon, summary.replicas, summary.censored
                ),
            }
        }
        Command::Backward => {
            let schedule = p.n_schedule.clone().expect("resolved");
            let starts = p.starts.clone().expect("resolved");
            let replicas = p.replicas.expect("resolved");
            let max_n = *schedule.iter().max().expect("nonempty schedule");
            let path = generate_path(&model.covariates, -(max_n as i64), -1, seed)?;
            let mut rows = Vec::new();
            let mut last = 0.0f64;
            for &n in &schedule {
                let measures = backward_measures(&model, &starts, n, &path, replicas, seed)?;
                for (i, m) in measures.iter().enumerate() {
                    write(dir, &format!("measure_n{n}_start{i}.csv"), &m.to_csv())?;
                }
                last = 0.0;
                for i in 0..measures.len() {
                    for j in i + 1..measures.len() {
                        let w = wasserstein1(&measures[i], &measures[j])?;
                        last = last.max(w.value);
                        rows.push(vec![
                            n.to_string(),
                            i.to_string(),
                            j.to_string(),
                            fmt_float(w.value),
                            w.monotone_upper.map_or(String::new(), fmt_float),
                        ]);
                    }
                }
            }
            write(
                dir,
                "w1.csv",
                &csv_string(&["n", "start_i", "start_j", "w1", "monotone_upper"], rows),
            )?;
            Outcome {
                exit_code: 0,
                summary: format!("backward: largest pairwise W1 at n = {max_n} is {last:.6e}"),
            }
        }
        Command::Stationary => {
            let tol = p.tol.expect("resolved");
            let out = stationary_sampler(&model, tol, p.max_n.expect("resolved"), p.replicas.expect("resolved"), seed)?;
            if let Some(m) = &out.measure {
                write(dir, "measure.csv", &m.to_csv())?;
            }
            let invariance = match (&out.measure, out.converged) {
                (Some(m), true) => {
                    let r = invariance_check(&model, m, tol)?;
                    Some(json!({"distance": r.distance, "threshold": r.threshold, "passed": r.passed}))
                }
                _ => None,
            };
            let report = json!({
                "n": out.n,
                "achieved_gap": out.achieved_gap,
                "converged": out.converged,
                "reason": out.reason,
                "history": out.history,
                "tol": out.tol,
                "diagnostic": out.diagnostic,
                "invariance": invariance,
            });
            write(dir, "stationary.json", &sorted_json(&report))?;
            let gap = out.achieved_gap.map_or("n/a".to_string(), |g| format!("{g:.6e}"));
            Outcome {
                exit_code: if out.converged { 0 } else { 2 },
                summary: if out.converged {
                    format!("stationary: converged at n = {}, gap {gap}", out.n)
                } else {
                    format!("stationary: NotConverged ({:?}) at n = {}, gap {gap}", out.reason, out.n)
                },
            }
        }
        Command::Verify => {
            let config = p.verify.clone().expect("resolved");
            let report = full_report(&model, &config, seed)?;
            write(dir, "report.json", &report.to_json())?;
            write(dir, "report.txt", &report.to_text())?;
            Outcome {
                exit_code: report.overall.exit_code(),
                summary: format!(
                    "verify: overall {:?} (A1 {:?}, A2 {:?}, A3 {:?})",
                    report.overall, report.a1.verdict, report.a2.verdict, report.a3.verdict
                ),
            }
        }
        Command::Diagnose => {
            let t0 = p.t_start.expect("resolved");
            let t1 = t0 + p.horizon.expect("resolved") as i64 - 1;
            let path = generate_path(&model.covariates, t0, t1, seed)?;
            // Always calibrated so a replay with h and C pinned writes the same report.
            let calibration = calibrate_thresholds(&model, &path)?;
            let h = *p.h.get_or_insert(calibration.as_ref().map_or(1, |c| c.h));
            let c = *p.c.get_or_insert(calibration.as_ref().map_or(1024.0, |c| c.c));
            let stats = w_stats(&model, &path, h, p.truncation)?;
            p.truncation = Some(stats.horizon);
            let regen = regeneration_times(&stats, c, h)?;
            let rows = (0..stats.len()).map(|i| {
                let t = stats.t_min + i as i64;
                vec![
                    t.to_string(),
                    fmt_float(stats.w1[i]),
                    fmt_float(stats.w2[i]),
                    fmt_float(stats.w3[i]),
                    fmt_float(stats.w4[i]),
                    if regen.times.binary_search(&t).is_ok() { "1".into() } else { "0".into() },
                    regen.counts[i].to_string(),
                ]
            });
            write(
                dir,
                "w_stats.csv",
                &csv_string(&["t", "w1", "w2", "w3", "w4", "regeneration", "m_n"], rows),
            )?;
            let report = json!({
                "h": h,
                "c": c,
                "truncation": stats.horizon,
                "tail": stats.tail,
                "calibration": calibration,
                "regeneration_count": regen.times.len(),
                "interior_times": stats.len(),
                "frequency": regen.times.len() as f64 / stats.len().max(1) as f64,
                "smallest_admitting_c": regen.smallest_admitting_c,
            });
            write(dir, "regeneration.json", &sorted_json(&report))?;
            Outcome {
                exit_code: 0,
                summary: format!(
                    "diagnose: {} regeneration times over {} interior times (h = {h}, C = {c})",
                    regen.times.len(),
                    stats.len()
                ),
            }
        }
    };
    manifest.output_dir = None;
    write(dir, "replay.json", &sorted_json(&manifest))?;
    Ok((manifest, outcome))
}
