use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anneal_bound::bounds::{self, BoundReport, RunSpectra};
use anneal_bound::evolve::{self, DensityState, Trajectory};
use anneal_bound::generator::{self, ControlPoint};
use anneal_bound::spectral;
use anyhow::{Context, Result};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Check, InitialStanza, RunConfig, RunPoint};

pub const C_DYNAMICS_TOL: f64 = 1e-5;
pub const DB_RELATION_TOL: f64 = 1e-8;
pub const GAP_SHIFT_TOL: f64 = 1e-10;
pub const CSL_REL_TOL: f64 = 1e-6;

pub const REPORT_HEADER: [&str; 13] = [
    "run_id", "system", "M", "tau", "steps", "D0", "Dtau", "gap_min", "tau_max", "tau_min", "main_ok", "decay_ok",
    "margin",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub check: Check,
    pub passed: bool,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub id: String,
    pub system: &'static str,
    pub m: usize,
    pub steps: usize,
    pub report: BoundReport,
    pub checks: Vec<CheckOutcome>,
    pub trajectory: Trajectory,
}

impl RunOutcome {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub runs: Vec<RunOutcome>,
    pub out_dir: PathBuf,
}

impl Summary {
    /// 0 when every requested check passes, 2 otherwise.
    pub fn exit_code(&self) -> u8 {
        if self.runs.iter().all(RunOutcome::all_passed) {
            0
        } else {
            2
        }
    }
}

fn initial_density(cfg: &RunConfig, point: &RunPoint) -> Result<DensityState> {
    let m = cfg.system.num_states();
    Ok(match &cfg.initial {
        InitialStanza::StationaryAtStart => {
            let proto = point.protocol.build()?;
            let g = generator::build(&cfg.system, proto.at(0.0)?)?;
            DensityState::new(0.0, g.pi().clone())?
        }
        InitialStanza::Explicit { rho } => DensityState::new(0.0, rho.clone().into())?,
        InitialStanza::PointMass { index } => DensityState::point_mass(m, *index)?,
    })
}

fn gap_shift(cfg: &RunConfig, spectra: &RunSpectra) -> Result<f64> {
    let mut worst = 0.0f64;
    for (control, spectrum) in spectra.controls() {
        if control.u == 0.0 {
            continue;
        }
        let reference = spectral::gap(&generator::build(&cfg.system, ControlPoint::new(control.gamma, 0.0))?)?;
        worst = worst.min(spectrum.gap() - reference);
    }
    Ok(worst)
}

fn db_relation(cfg: &RunConfig, spectra: &RunSpectra) -> Result<f64> {
    let mut worst = spectral::check_db_relation(spectra.final_db(), spectra.final_pi());
    for (control, spectrum) in spectra.controls() {
        if control.u != 0.0 {
            continue;
        }
        let g = generator::build(&cfg.system, *control)?;
        worst = worst.max(spectral::check_db_relation(spectrum, g.pi()));
    }
    Ok(worst)
}

pub fn run_point(cfg: &RunConfig, point: &RunPoint) -> Result<RunOutcome> {
    let protocol = point.protocol.build()?;
    let rho0 = initial_density(cfg, point)?;
    let trajectory = evolve::propagate(&cfg.system, &protocol, &rho0, cfg.outputs.record_every)?;
    let spectra = RunSpectra::compute(&cfg.system, &protocol)?;
    let report = bounds::report(&trajectory, &spectra)?;

    let mut checks = Vec::new();
    for &check in &cfg.checks {
        let (passed, value) = match check {
            Check::MainBound => (report.main_bound_satisfied, report.margins.main),
            Check::DecayBound => (report.decay_bound_satisfied, report.margins.decay),
            Check::CDynamics => {
                let r = bounds::verify_c_dynamics(&trajectory, &spectra)?;
                (r <= C_DYNAMICS_TOL, r)
            }
            Check::Csl => {
                let tau_min = report
                    .tau_min
                    .context("csl check needs a constant detailed-balance protocol")?;
                let margin = report.tau - tau_min * (1.0 - CSL_REL_TOL);
                (margin >= 0.0, margin)
            }
            Check::DbRelation => {
                let r = db_relation(cfg, &spectra)?;
                (r <= DB_RELATION_TOL, r)
            }
            Check::GapSweep => {
                let shift = gap_shift(cfg, &spectra)?;
                (shift >= -GAP_SHIFT_TOL, shift)
            }
        };
        checks.push(CheckOutcome { check, passed, value });
    }

    Ok(RunOutcome {
        id: point.id.clone(),
        system: cfg.system.kind_name(),
        m: cfg.system.num_states(),
        steps: protocol.steps(),
        report,
        checks,
        trajectory,
    })
}

/// Run every sweep point on a pool of `jobs` threads and write reports into
/// `out_dir`. Rows keep sweep order whatever the completion order.
pub fn execute(cfg: &RunConfig, out_dir: Option<&Path>, jobs: Option<usize>) -> Result<Summary> {
    let points = cfg.expand();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = jobs {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().context("building worker pool")?;
    let runs: Vec<RunOutcome> = pool.install(|| {
        points
            .par_iter()
            .map(|p| run_point(cfg, p).with_context(|| format!("run {}", p.id)))
            .collect::<Result<Vec<_>>>()
    })?;

    let out_dir = out_dir
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.outputs.dir.clone());
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let summary = Summary { runs, out_dir };
    write_outputs(cfg, &summary)?;
    Ok(summary)
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

pub fn write_report_csv<W: Write>(runs: &[RunOutcome], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(REPORT_HEADER)?;
    for r in runs {
        let rep = &r.report;
        csv.write_record([
            r.id.clone(),
            r.system.to_string(),
            r.m.to_string(),
            fmt_f64(rep.tau),
            r.steps.to_string(),
            fmt_f64(rep.d0),
            fmt_f64(rep.dtau),
            fmt_f64(rep.gap_min),
            rep.tau_max.to_string(),
            rep.tau_min.map(fmt_f64).unwrap_or_default(),
            rep.main_bound_satisfied.to_string(),
            rep.decay_bound_satisfied.to_string(),
            fmt_f64(rep.margins.main),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn write_checks_csv<W: Write>(runs: &[RunOutcome], w: W) -> Result<()> {
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["run_id", "check", "passed", "value"])?;
    for r in runs {
        for c in &r.checks {
            csv.write_record([
                r.id.clone(),
                c.check.to_string(),
                c.passed.to_string(),
                fmt_f64(c.value),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

fn write_outputs(cfg: &RunConfig, summary: &Summary) -> Result<()> {
    let dir = &summary.out_dir;
    write_report_csv(&summary.runs, create(&dir.join("report.csv"))?)?;
    write_checks_csv(&summary.runs, create(&dir.join("checks.csv"))?)?;

    let reports: Vec<&BoundReport> = summary.runs.iter().map(|r| &r.report).collect();
    let mut json = create(&dir.join("report.json"))?;
    serde_json::to_writer_pretty(&mut json, &reports)?;
    writeln!(json)?;
    json.flush()?;

    if let Some(name) = &cfg.outputs.trajectory {
        let single = summary.runs.len() == 1;
        for r in &summary.runs {
            let file = if single {
                name.clone()
            } else {
                format!("{}_{name}", r.id)
            };
            let path = dir.join(&file);
            let stem = Path::new(&file)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or(file.clone());
            if r.trajectory.densities_exportable() {
                let mut w = create(&path)?;
                r.trajectory.write_densities(&mut w)?;
                w.flush()?;
            } else {
                log::warn!("{}: trajectory too large to export, writing diagnostics only", r.id);
            }
            let mut w = create(&dir.join(format!("{stem}.diagnostics.csv")))?;
            r.trajectory.write_diagnostics(&mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

/// One line per run and check, in sweep order.
pub fn print_summary<W: Write>(summary: &Summary, mut w: W) -> io::Result<()> {
    for r in &summary.runs {
        for c in &r.checks {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            writeln!(w, "{} {:<12} {verdict} {:.6e}", r.id, c.check.to_string(), c.value)?;
        }
    }
    let failed = summary.runs.iter().filter(|r| !r.all_passed()).count();
    writeln!(
        w,
        "{} run(s), {} with failing checks; reports in {}",
        summary.runs.len(),
        failed,
        summary.out_dir.display()
    )
}
