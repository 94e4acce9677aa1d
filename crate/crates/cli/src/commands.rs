use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use levelline_core::dgff::{
    build_operator, covariance_check, level_line_study, sample_field, trace_level_line, LatticeSpec,
};
use levelline_core::formula::{
    dirichlet_limit_numeric, dirichlet_limit_probability, hit_free_arc_probability, probability_factors,
};
use levelline_core::loewner::{record_driving_path, simplicity_check, trace_curve_refined};
use levelline_core::montecarlo::{
    formula_agreement, girsanov_check, green_check, loewner_check, martingale_study, quadratic_variation_study,
    run_ensemble, summarize, write_outcomes_csv,
};
use levelline_core::sde::Integrator;
use levelline_core::{CheckReport, DrivingPath};
use serde::Deserialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

/// Points kept from a recorded driving path before tracing the curve.
pub const TRACE_STEPS: usize = 4000;
/// Points placed along each local slit when tracing.
pub const TRACE_SUBSTEPS: usize = 4;
/// Minimum lattice resolution between consecutive marked points.
pub const MIN_CELLS_PER_GAP: f64 = 16.0;
const FREQUENCY_TOLERANCE: f64 = 0.05;
const DIRICHLET_FAR: f64 = 1e8;

/// Result of a command: the JSON payload and whether its checks passed.
pub struct Report {
    pub payload: Value,
    pub passed: bool,
}

fn output_dir(cfg: &RunConfig) -> Option<&Path> {
    cfg.output.dir.as_deref()
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn write_json(dir: Option<&Path>, name: &str, payload: &Value) -> Result<()> {
    if let Some(dir) = dir {
        let mut out = create(dir, name)?;
        serde_json::to_writer_pretty(&mut out, payload)?;
        writeln!(out)?;
        out.flush()?;
    }
    Ok(())
}

pub fn prob(cfg: &RunConfig, dirichlet_limit: bool) -> Result<(String, Report)> {
    let b = &cfg.boundary;
    let g = hit_free_arc_probability(b);
    let factors = probability_factors(b);
    let mut text = format!("p_free = {g:.12}\n");
    for f in &factors {
        let kind = if f.same_parity { "same parity" } else { "opposite parity" };
        text.push_str(&format!("  b_{} ({kind}): ratio {:.6}, factor {:.12}\n", f.index, f.ratio, f.value));
    }
    let mut payload = json!({ "config": cfg, "p_free": g, "factors": factors });
    if dirichlet_limit {
        let exact = dirichlet_limit_probability(b.b(), b.k())?;
        let numeric = dirichlet_limit_numeric(b.b(), b.k(), DIRICHLET_FAR)?;
        text.push_str(&format!("dirichlet_limit = {exact:.12} (a = -1e8: {numeric:.12})\n"));
        payload["dirichlet_limit"] = json!({ "closed_form": exact, "numeric": numeric, "far": DIRICHLET_FAR });
    }
    write_json(output_dir(cfg), "prob.json", &payload)?;
    Ok((text, Report { payload, passed: true }))
}

pub fn simulate(cfg: &RunConfig) -> Result<Report> {
    let mc = &cfg.mc;
    let records = run_ensemble(&cfg.boundary, &cfg.step, mc.n_traj, mc.seed_base, mc.workers)?;
    let summary = summarize(&records, cfg.boundary.n(), mc.seed_base);
    let check = formula_agreement(&cfg.boundary, &summary);
    if let Some(dir) = output_dir(cfg) {
        let mut out = create(dir, "outcomes.csv")?;
        write_outcomes_csv(&records, mc.seed_base, &mut out)?;
        out.flush()?;
    }
    let payload = json!({
        "config": cfg,
        "p_free": hit_free_arc_probability(&cfg.boundary),
        "summary": summary,
        "check": check,
    });
    write_json(output_dir(cfg), "simulate.json", &payload)?;
    Ok(Report { passed: check.passed, payload })
}

pub const CHECKS: [&str; 6] = ["martingale", "girsanov", "quadratic_variation", "green", "loewner", "all"];

pub fn verify(cfg: &RunConfig, which: &str) -> Result<Report> {
    if !CHECKS.contains(&which) {
        bail!("unknown check {which:?}; expected one of {}", CHECKS.join(", "));
    }
    let (b, step, mc) = (&cfg.boundary, &cfg.step, &cfg.mc);
    let selected = |name: &str| which == "all" || which == name;
    let mut reports: Vec<CheckReport> = Vec::new();
    let mut extra = serde_json::Map::new();
    if selected("martingale") {
        let study = martingale_study(b, step, mc.n_traj, &mc.checkpoints, mc.n_guard, mc.seed_base, mc.workers)?;
        reports.push(study.report());
        extra.insert("martingale".into(), serde_json::to_value(&study)?);
    }
    if selected("girsanov") {
        reports.push(girsanov_check(b, step, mc.n_traj, mc.t_check, mc.n_guard, mc.seed_base, mc.workers)?);
    }
    if selected("quadratic_variation") {
        let study =
            quadratic_variation_study(b, &step.refined(10.0), mc.n_traj, mc.t_check, mc.n_guard, mc.seed_base, mc.workers)?;
        reports.push(study.report());
        extra.insert("quadratic_variation".into(), serde_json::to_value(&study)?);
    }
    if selected("green") {
        reports.push(green_check(1000, mc.seed_base));
    }
    if selected("loewner") {
        reports.push(loewner_check()?);
    }
    for r in &reports {
        eprintln!("{}", r.line());
    }
    let passed = reports.iter().all(|r| r.passed);
    let payload = json!({ "config": cfg, "check": which, "reports": reports, "studies": extra });
    write_json(output_dir(cfg), "verify.json", &payload)?;
    Ok(Report { payload, passed })
}

#[derive(Debug, Deserialize)]
struct PathRow {
    t: f64,
    w: f64,
}

/// Reads a driving path from a CSV file with columns `t,w`.
pub fn read_driving_path(path: &Path) -> Result<DrivingPath> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let (mut times, mut values) = (Vec::new(), Vec::new());
    for row in reader.deserialize() {
        let row: PathRow = row.with_context(|| format!("malformed row in {}", path.display()))?;
        times.push(row.t);
        values.push(row.w);
    }
    Ok(DrivingPath::new(times, values)?)
}

fn write_driving_path(dir: &Path, path: &DrivingPath) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(dir, "driving.csv")?);
    out.write_record(["t", "w"])?;
    for (t, w) in path.times().iter().zip(path.values()) {
        out.write_record([t.to_string(), w.to_string()])?;
    }
    out.flush()?;
    Ok(())
}

pub fn trace(cfg: &RunConfig, driving: Option<&PathBuf>) -> Result<Report> {
    let dir = output_dir(cfg).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;
    let (outcome, path) = match driving {
        Some(file) => (None, read_driving_path(file)?),
        None => {
            let integ = Integrator::new(&cfg.boundary, &cfg.step)?;
            let (record, path) = record_driving_path(&integ, cfg.mc.seed_base);
            (Some(record), path.thinned_balanced(TRACE_STEPS))
        }
    };
    let curve = trace_curve_refined(&path, TRACE_SUBSTEPS)?;
    let scale = curve.points.iter().map(|p| p.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let simple = simplicity_check(&curve, 1e-9 * scale);
    let mut out = create(dir, "curve.csv")?;
    curve.write_csv(&mut out)?;
    out.flush()?;
    write_driving_path(dir, &path)?;
    let tip = curve.tip();
    let payload = json!({
        "config": cfg,
        "outcome": outcome.as_ref().map(|r| r.outcome),
        "t_end": outcome.as_ref().map(|r| r.t_end),
        "steps_recorded": outcome.as_ref().map(|r| r.steps),
        "steps_traced": path.steps(),
        "tip": [tip.re, tip.im],
        "simple": simple,
        "curve_csv": dir.join("curve.csv"),
    });
    write_json(Some(dir), "trace.json", &payload)?;
    Ok(Report { payload, passed: true })
}

pub fn dgff(cfg: &RunConfig) -> Result<Report> {
    let Some(d) = &cfg.dgff else {
        bail!("the configuration has no dgff section");
    };
    let b = &cfg.boundary;
    let spec = LatticeSpec::unfolded(b, d.cells, d.extent, d.far_boundary)?;
    let resolution = spec.cells_per_gap();
    if resolution < MIN_CELLS_PER_GAP {
        bail!(
            "grid too coarse: {resolution:.1} cells between consecutive marked points, at least {MIN_CELLS_PER_GAP} required"
        );
    }
    let mc = &cfg.mc;
    let mut reports = Vec::new();
    let mut payload = json!({ "config": cfg, "cells_per_gap": resolution });
    if d.frequency {
        let op = build_operator(&spec)?;
        let study = level_line_study(&op, d.n_samples, mc.seed_base, mc.workers)?;
        let g = hit_free_arc_probability(b);
        let report = CheckReport::new(
            "dgff_frequency",
            (study.p_free - g).abs() / FREQUENCY_TOLERANCE,
            1.0,
            format!("free-arc frequency {:.4} vs {g:.4}, {} of {} lines left the box", study.p_free, study.n_far, study.n_samples),
        );
        if let Some(dir) = output_dir(cfg) {
            let sample = sample_field(&op, mc.seed_base);
            let mut out = create(dir, "field.csv")?;
            sample.write_csv(&spec, &mut out)?;
            out.flush()?;
            if let Ok(line) = trace_level_line(&sample, &spec, b.k()) {
                let mut out = create(dir, "level_line.csv")?;
                line.write_csv(&mut out)?;
                out.flush()?;
            }
        }
        payload["frequency"] = serde_json::to_value(&study)?;
        reports.push(report);
    }
    if let Some(c) = &d.covariance {
        let spec = LatticeSpec::unfolded(b, c.cells, d.extent, d.far_boundary)?;
        let op = build_operator(&spec)?;
        let check = covariance_check(&op, &c.block_a, &c.block_b, c.n_samples, mc.seed_base, mc.workers)?;
        reports.push(check.report());
        payload["covariance"] = serde_json::to_value(&check)?;
    }
    for r in &reports {
        eprintln!("{}", r.line());
    }
    let passed = reports.iter().all(|r| r.passed);
    payload["reports"] = serde_json::to_value(&reports)?;
    write_json(output_dir(cfg), "dgff.json", &payload)?;
    Ok(Report { payload, passed })
}
