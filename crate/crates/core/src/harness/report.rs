//! Curve aggregation and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{fmt_float, read_json, Manifest, TrajectoryFile};
use crate::clue::Term;
use crate::{Error, Result};

/// Step-indexed mean and population standard deviation over repeats.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurveCell {
    pub term: Term,
    pub tau: f64,
    pub clue_lr: f64,
    /// Repeats that contributed.
    pub repeats: usize,
    /// `None` when no repeat had a complete set of trajectories.
    pub curve: Option<Curve>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregatedCurves {
    pub steps: usize,
    pub taus: Vec<f64>,
    pub clue_lrs: Vec<f64>,
    /// Ordered by term, then tau, then learning rate.
    pub cells: Vec<CurveCell>,
}

impl AggregatedCurves {
    pub fn get(&self, term: Term, tau: f64, clue_lr: f64) -> Option<&CurveCell> {
        self.cells
            .iter()
            .find(|c| c.term == term && c.tau == tau && c.clue_lr == clue_lr)
    }
}

/// Maps a curve onto [0, 1]; a constant curve maps to zeros.
pub fn normalize_min_max(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - lo) / span).collect()
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryFile> {
    read_json(path)
}

/// Mean over molecules of one term, per step. `None` if a trajectory is
/// missing, truncated or lacks the term.
fn molecule_mean(root: &Path, paths: &[&str], term: Term, steps: usize) -> Option<Vec<f64>> {
    if paths.is_empty() {
        return None;
    }
    let mut sum = vec![0.0; steps + 1];
    for p in paths {
        let t = read_trajectory(&root.join(p)).ok()?;
        if t.truncated || t.steps.len() != steps + 1 {
            return None;
        }
        for (acc, s) in sum.iter_mut().zip(&t.steps) {
            *acc += match term {
                Term::Ly => s.l_y?,
                Term::Le => s.l_e,
                Term::La => s.l_a,
                Term::Lr => s.l_r,
            };
        }
    }
    let n = paths.len() as f64;
    Some(sum.into_iter().map(|s| s / n).collect())
}

/// Reads a results directory and aggregates one curve per
/// (term, tau, learning rate): molecules selected by that term are averaged
/// per run, each run's curve is min-max normalized, then runs are averaged.
pub fn aggregate_curves(root: &Path) -> Result<AggregatedCurves> {
    let manifest = Manifest::read(root)?;
    let cfg = &manifest.config;
    let steps = cfg.clue.steps;
    let mut cells = Vec::new();
    for term in Term::ALL {
        for &tau in &cfg.taus {
            for &lr in &cfg.clue_lrs {
                let mut runs: Vec<Vec<f64>> = Vec::new();
                for run in &manifest.runs {
                    let Some(cell) = run.cells.iter().find(|c| c.tau == tau && c.error.is_none()) else {
                        continue;
                    };
                    let Some(ids) = cell.selections.get(&term) else {
                        continue;
                    };
                    let paths: Option<Vec<&str>> = ids
                        .iter()
                        .map(|id| {
                            cell.trajectories
                                .iter()
                                .find(|t| &t.id == id && t.clue_lr == lr)
                                .map(|t| t.path.as_str())
                        })
                        .collect();
                    if let Some(curve) = paths.and_then(|p| molecule_mean(root, &p, term, steps)) {
                        runs.push(normalize_min_max(&curve));
                    }
                }
                let curve = (!runs.is_empty()).then(|| {
                    let n = runs.len() as f64;
                    let mean: Vec<f64> = (0..=steps)
                        .map(|k| runs.iter().map(|r| r[k]).sum::<f64>() / n)
                        .collect();
                    let std = (0..=steps)
                        .map(|k| (runs.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n).sqrt())
                        .collect();
                    Curve { mean, std }
                });
                cells.push(CurveCell {
                    term,
                    tau,
                    clue_lr: lr,
                    repeats: runs.len(),
                    curve,
                });
            }
        }
    }
    Ok(AggregatedCurves {
        steps,
        taus: cfg.taus.clone(),
        clue_lrs: cfg.clue_lrs.clone(),
        cells,
    })
}

/// Paths written by [`emit_report`].
#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub svgs: Vec<PathBuf>,
    pub summary: PathBuf,
    pub trajectories: PathBuf,
}

/// Writes `curves.csv`, one SVG per (term, learning rate), a copy of every
/// trajectory under `trajectories/` and `summary.txt` into `out`.
pub fn emit_report(curves: &AggregatedCurves, results: &Path, out: &Path) -> Result<ReportFiles> {
    fs::create_dir_all(out)?;
    let csv = out.join("curves.csv");
    fs::write(&csv, curves_csv(curves))?;

    let mut svgs = Vec::new();
    for term in Term::ALL {
        for &lr in &curves.clue_lrs {
            let path = out.join(format!("{}_lr-{}.svg", term.name(), fmt_float(lr)));
            fs::write(&path, curve_svg(curves, term, lr))?;
            svgs.push(path);
        }
    }

    let manifest = Manifest::read(results)?;
    let traj_dir = out.join("trajectories");
    for run in &manifest.runs {
        for cell in &run.cells {
            for t in &cell.trajectories {
                let dst = traj_dir.join(&t.path);
                if let Some(d) = dst.parent() {
                    fs::create_dir_all(d)?;
                }
                fs::copy(results.join(&t.path), &dst)?;
            }
        }
    }

    let summary = out.join("summary.txt");
    fs::write(&summary, summary_text(&manifest, results)?)?;
    Ok(ReportFiles {
        csv,
        svgs,
        summary,
        trajectories: traj_dir,
    })
}

fn curves_csv(curves: &AggregatedCurves) -> String {
    let mut s = String::from("term,tau,clue_lr,step,mean,std\n");
    for c in &curves.cells {
        if let Some(curve) = &c.curve {
            for (k, (m, sd)) in curve.mean.iter().zip(&curve.std).enumerate() {
                let _ = writeln!(s, "{},{},{},{},{},{}", c.term, c.tau, c.clue_lr, k, m, sd);
            }
        }
    }
    s
}

/// Share of trajectories whose final objective is below the initial one,
/// per (tau, learning rate), read back from the trajectory files.
fn summary_text(manifest: &Manifest, results: &Path) -> Result<String> {
    let cfg = &manifest.config;
    let mut s = String::from("tau,clue_lr,improved,total,fraction\n");
    for &tau in &cfg.taus {
        for &lr in &cfg.clue_lrs {
            let (mut improved, mut total) = (0usize, 0usize);
            for run in &manifest.runs {
                for cell in run.cells.iter().filter(|c| c.tau == tau) {
                    for t in cell.trajectories.iter().filter(|t| t.clue_lr == lr) {
                        let file = read_trajectory(&results.join(&t.path))
                            .map_err(|e| Error::Config(format!("{}: {e}", t.path)))?;
                        total += 1;
                        improved += usize::from(file.improved());
                    }
                }
            }
            let fraction = if total == 0 {
                "NA".to_string()
            } else {
                format!("{:.6}", improved as f64 / total as f64)
            };
            let _ = writeln!(s, "{tau},{lr},{improved},{total},{fraction}");
        }
    }
    Ok(s)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf",
];

fn curve_svg(curves: &AggregatedCurves, term: Term, lr: f64) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 150.0, 40.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let steps = curves.steps.max(1) as f64;
    let present: Vec<&CurveCell> = curves
        .taus
        .iter()
        .filter_map(|&tau| curves.get(term, tau, lr))
        .filter(|c| c.curve.is_some())
        .collect();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for c in &present {
        let curve = c.curve.as_ref().expect("filtered");
        for (m, sd) in curve.mean.iter().zip(&curve.std) {
            lo = lo.min(m - sd);
            hi = hi.max(m + sd);
        }
    }
    let x = |k: f64| left + pw * k / steps;
    let y = |v: f64| top + ph * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{term}, clue_lr = {lr}</text>"#,
        left + pw / 2.0
    );
    let _ = writeln!(
        s,
        r##"<g stroke="#444" fill="none"><line x1="{left}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{b}"/></g>"##,
        b = top + ph,
        r = left + pw
    );
    for v in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v}</text>"#,
            left - 6.0,
            y(v) + 4.0
        );
    }
    let tick = (curves.steps / 4).max(1);
    for k in (0..=curves.steps).step_by(tick) {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{k}</text>"#,
            x(k as f64),
            top + ph + 18.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        left + pw / 2.0,
        h - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">normalized loss</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );

    for (i, c) in present.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let curve = c.curve.as_ref().expect("filtered");
        let upper = curve.mean.iter().zip(&curve.std).enumerate().map(|(k, (m, sd))| (k, m + sd));
        let lower = curve.mean.iter().zip(&curve.std).enumerate().rev().map(|(k, (m, sd))| (k, m - sd));
        let band: Vec<String> = upper
            .chain(lower)
            .map(|(k, v)| format!("{:.2},{:.2}", x(k as f64), y(v)))
            .collect();
        let line: Vec<String> = curve
            .mean
            .iter()
            .enumerate()
            .map(|(k, v)| format!("{:.2},{:.2}", x(k as f64), y(*v)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="{color}" fill-opacity="0.15" stroke="none"/>"#,
            band.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            line.join(" ")
        );
        let ly = top + 10.0 + 20.0 * i as f64;
        let lx = left + pw + 20.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx}" y="{}" width="14" height="4" fill="{color}"/><text x="{}" y="{}">tau = {}</text>"#,
            ly - 2.0,
            lx + 20.0,
            ly + 4.0,
            c.tau
        );
    }
    s.push_str("</svg>\n");
    s
}
