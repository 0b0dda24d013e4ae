//! Contamination sweeps over repeated training runs, and their reports.
//!
//! Layout of a results directory:
//!
//! ```text
//! manifest.json
//! run-{r}/checkpoint.mclu
//! run-{r}/run.json                      training summary, test ids
//! run-{r}/tau-{tau}/cell.json           evaluations and selections
//! run-{r}/tau-{tau}/lr-{lr}/{id}.json   one trajectory
//! ```
//!
//! `cell.json` is written last, so a cell without it is recomputed on the
//! next call to [`run_sweep`]. A run whose checkpoint and `run.json` exist
//! and match the configuration is not retrained.

mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clue::{clue_optimize, evaluate_molecule, rank_worst, ClueConfig, ClueTrajectory, MoleculeEvaluation, Term};
use crate::model::Model;
use crate::molgraph::{contaminate, BondType, DatasetSource, LabeledExample};
use crate::training::{
    fit, holdout_split, load_checkpoint, mix_seed, save_checkpoint, Checkpoint, Holdout, LossBreakdown,
    TrainConfig,
};
use crate::uncertainty::OcReport;
use crate::{Error, Result};

pub use report::{
    aggregate_curves, emit_report, normalize_min_max, read_trajectory, AggregatedCurves, Curve, CurveCell,
    ReportFiles,
};

/// Environment variable that replaces the configured training seed.
pub const SEED_ENV: &str = "MOLECLUE_SEED";
pub const MANIFEST: &str = "manifest.json";

/// Reads [`SEED_ENV`]; unset means no override.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::Config(format!("{SEED_ENV}: {e}"))),
    }
}

pub fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Contamination scales in Angstrom.
    pub taus: Vec<f64>,
    pub clue_lrs: Vec<f64>,
    /// Full pipeline runs; run `r` uses training seed `train.seed + r`.
    pub repeats: usize,
    /// Share of the test set selected per ranking term.
    pub fraction: f64,
    /// Overrides `clue.normalize_terms`.
    pub normalize_terms: bool,
    /// Seeded test share when the dataset carries no split tags.
    pub test_fraction: f64,
    pub dataset: DatasetSource,
    pub train: TrainConfig,
    pub clue: ClueConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            taus: vec![0.0, 0.01, 0.1, 1.0],
            clue_lrs: vec![1.0, 0.1, 0.01],
            repeats: 3,
            fraction: 0.1,
            normalize_terms: true,
            test_fraction: 0.2,
            dataset: DatasetSource::default(),
            train: TrainConfig::default(),
            clue: ClueConfig::default(),
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.taus.is_empty() || self.clue_lrs.is_empty() {
            return Err(Error::Config("taus and clue_lrs must be nonempty".into()));
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config(format!("taus must be finite and nonnegative, got {t}")));
        }
        if !(self.fraction > 0.0 && self.fraction <= 1.0) {
            return Err(Error::Config(format!("fraction must be in (0, 1], got {}", self.fraction)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!("test_fraction must be in (0, 1), got {}", self.test_fraction)));
        }
        for lr in &self.clue_lrs {
            self.clue_config(*lr).validate()?;
        }
        self.train.validate()
    }

    /// Search settings of one learning-rate column.
    pub fn clue_config(&self, clue_lr: f64) -> ClueConfig {
        ClueConfig {
            clue_lr,
            normalize_terms: self.normalize_terms,
            ..self.clue.clone()
        }
    }

    /// Training settings of repeat `r`.
    pub fn train_config(&self, repeat: usize) -> TrainConfig {
        let seed = self.train.seed + repeat as u64;
        TrainConfig {
            seed,
            dataset: Some(self.dataset.clone()),
            holdout: Some(Holdout {
                fraction: self.test_fraction,
                seed,
            }),
            ..self.train.clone()
        }
    }
}

/// Directory name component for a float (shortest round-trip form).
pub fn fmt_float(x: f64) -> String {
    format!("{x}")
}

pub fn run_dir(root: &Path, repeat: usize) -> PathBuf {
    root.join(format!("run-{repeat}"))
}

pub fn cell_dir(root: &Path, repeat: usize, tau: f64) -> PathBuf {
    run_dir(root, repeat).join(format!("tau-{}", fmt_float(tau)))
}

pub fn trajectory_path(root: &Path, repeat: usize, tau: f64, clue_lr: f64, id: &str) -> PathBuf {
    cell_dir(root, repeat, tau)
        .join(format!("lr-{}", fmt_float(clue_lr)))
        .join(format!("{id}.json"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SweepConfig,
    pub runs: Vec<RunRecord>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(root.join(MANIFEST))?)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub repeat: usize,
    pub seed: u64,
    /// Relative to the results directory; absent when training failed.
    pub checkpoint: Option<String>,
    pub error: Option<String>,
    pub cells: Vec<CellRecord>,
}

/// Training summary stored next to a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub n_train: usize,
    pub test_ids: Vec<String>,
    pub final_train: Option<LossBreakdown>,
    pub final_validation: Option<LossBreakdown>,
    pub certificates: OcReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub tau: f64,
    pub error: Option<String>,
    /// Selected ids per ranking term, worst first.
    pub selections: BTreeMap<Term, Vec<String>>,
    pub trajectories: Vec<TrajectoryEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub id: String,
    pub clue_lr: f64,
    /// Relative to the results directory.
    pub path: String,
    pub steps: usize,
    pub truncated: bool,
    pub improved: bool,
}

/// Contents of `cell.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellFile {
    pub repeat: usize,
    pub seed: u64,
    pub tau: f64,
    pub evaluations: Vec<MoleculeEvaluation>,
    pub selections: BTreeMap<Term, Vec<String>>,
    pub trajectories: Vec<TrajectoryEntry>,
}

/// One step of an exported trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_a")]
    pub l_a: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
    #[serde(rename = "L_y")]
    pub l_y: Option<f64>,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub positions: Vec<[f64; 3]>,
    /// Latent the positions were decoded from.
    pub z: Vec<f64>,
}

/// Exported trajectory file. `atoms` and `bonds` are taken from the graph
/// the decoder ran on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryFile {
    pub id: String,
    pub tau: f64,
    pub clue_lr: f64,
    pub truncated: bool,
    pub atoms: Vec<u32>,
    pub bonds: Vec<(usize, usize, BondType)>,
    pub steps: Vec<StepRecord>,
}

impl TrajectoryFile {
    pub fn from_trajectory(t: &ClueTrajectory, ex: &LabeledExample, tau: f64, clue_lr: f64) -> Self {
        Self {
            id: t.id.clone(),
            tau,
            clue_lr,
            truncated: t.truncated,
            atoms: ex.graph.atom_types().to_vec(),
            bonds: ex.graph.bonds().iter().map(|b| (b.i, b.j, b.kind)).collect(),
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    step: s.step,
                    l_e: s.l_e,
                    l_a: s.l_a,
                    l_r: s.l_r,
                    l_y: s.l_y,
                    l_total: s.l_total,
                    positions: s.conformer.positions().to_vec(),
                    z: s.z.values().to_vec(),
                })
                .collect(),
        }
    }

    pub fn improved(&self) -> bool {
        match (self.steps.first(), self.steps.last()) {
            (Some(a), Some(b)) => b.l_total < a.l_total,
            _ => false,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Runs every repeat and cell, writing results under `out`, and returns the
/// manifest (also written to `out/manifest.json`). Stage failures are
/// recorded rather than returned.
pub fn run_sweep(config: &SweepConfig, out: &Path) -> Result<Manifest> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let data = config.dataset.load()?;
    let mut runs = Vec::with_capacity(config.repeats);
    for repeat in 0..config.repeats {
        runs.push(run_repeat(config, out, &data, repeat));
    }
    let manifest = Manifest {
        config: config.clone(),
        runs,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

fn run_repeat(config: &SweepConfig, out: &Path, data: &[LabeledExample], repeat: usize) -> RunRecord {
    let train_cfg = config.train_config(repeat);
    let mut record = RunRecord {
        repeat,
        seed: train_cfg.seed,
        checkpoint: None,
        error: None,
        cells: Vec::new(),
    };
    let (train, test) = holdout_split(data.to_vec(), train_cfg.holdout.as_ref());
    let ck_path = run_dir(out, repeat).join("checkpoint.mclu");
    let model = match trained_model(&train_cfg, &train, &test, &ck_path) {
        Ok(m) => m,
        Err(e) => {
            record.error = Some(format!("training: {e}"));
            return record;
        }
    };
    record.checkpoint = Some(relative(out, &ck_path));
    for &tau in &config.taus {
        let cell = run_cell(config, out, &model, &test, repeat, train_cfg.seed, tau).unwrap_or_else(|e| CellRecord {
            tau,
            error: Some(e.to_string()),
            selections: BTreeMap::new(),
            trajectories: Vec::new(),
        });
        record.cells.push(cell);
    }
    record
}

/// Loads the checkpoint of a finished run or trains a new one.
fn trained_model(cfg: &TrainConfig, train: &[LabeledExample], test: &[LabeledExample], path: &Path) -> Result<Model> {
    let summary_path = path.with_file_name("run.json");
    if path.exists() && summary_path.exists() {
        if let Ok(ck) = load_checkpoint(path, Some(&cfg.dims)) {
            if &ck.config == cfg {
                return Ok(ck.model);
            }
        }
    }
    let out = fit(train, cfg)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    save_checkpoint(&out.checkpoint, path)?;
    let last = out.history.last();
    let summary = RunSummary {
        seed: cfg.seed,
        n_train: train.len(),
        test_ids: test.iter().map(|e| e.id().to_string()).collect(),
        final_train: last.map(|l| l.train),
        final_validation: last.and_then(|l| l.validation),
        certificates: out.certificates,
    };
    write_json(&summary_path, &summary)?;
    Ok(out.checkpoint.model)
}

fn run_cell(
    config: &SweepConfig,
    out: &Path,
    model: &Model,
    test: &[LabeledExample],
    repeat: usize,
    seed: u64,
    tau: f64,
) -> Result<CellRecord> {
    if test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    let dir = cell_dir(out, repeat, tau);
    let cell_path = dir.join("cell.json");
    if let Ok(done) = read_json::<CellFile>(&cell_path) {
        if done.tau == tau && done.seed == seed {
            return Ok(CellRecord {
                tau,
                error: None,
                selections: done.selections,
                trajectories: done.trajectories,
            });
        }
    }

    // The noise draw of a molecule depends only on the run and its test
    // position, so different scales share one direction.
    let inputs = test
        .iter()
        .enumerate()
        .map(|(i, ex)| contaminate(&ex.conformer, tau, mix_seed(&[seed, i as u64])))
        .collect::<Result<Vec<_>, _>>()?;
    let evaluations = test
        .iter()
        .zip(&inputs)
        .map(|(ex, x)| evaluate_molecule(&ex.graph, x, ex.label, model, config.clue.uncertainty_mode))
        .collect::<Result<Vec<_>>>()?;
    let mut selections = BTreeMap::new();
    let mut selected = BTreeSet::new();
    for term in Term::ALL {
        let ids = rank_worst(&evaluations, term.name(), config.fraction)?;
        selected.extend(ids.iter().cloned());
        selections.insert(term, ids);
    }

    let mut trajectories = Vec::new();
    for &lr in &config.clue_lrs {
        let clue = config.clue_config(lr);
        for (ex, x0) in test.iter().zip(&inputs).filter(|(ex, _)| selected.contains(ex.id())) {
            let t = clue_optimize(&ex.graph, x0, Some(ex.label), model, &clue)?;
            let file = TrajectoryFile::from_trajectory(&t, ex, tau, lr);
            let path = trajectory_path(out, repeat, tau, lr, ex.id());
            write_json(&path, &file)?;
            trajectories.push(TrajectoryEntry {
                id: t.id.clone(),
                clue_lr: lr,
                path: relative(out, &path),
                steps: t.steps.len() - 1,
                truncated: t.truncated,
                improved: file.improved(),
            });
        }
    }
    let cell = CellFile {
        repeat,
        seed,
        tau,
        evaluations,
        selections,
        trajectories,
    };
    write_json(&cell_path, &cell)?;
    Ok(CellRecord {
        tau,
        error: None,
        selections: cell.selections,
        trajectories: cell.trajectories,
    })
}

/// Finds a molecule of a checkpoint's dataset by id.
pub fn find_molecule(checkpoint: &Checkpoint, id: &str) -> Result<LabeledExample> {
    let source = checkpoint
        .config
        .dataset
        .as_ref()
        .ok_or_else(|| Error::Config("the checkpoint does not record its dataset".into()))?;
    source
        .load()?
        .into_iter()
        .find(|e| e.id() == id)
        .ok_or_else(|| Error::Config(format!("molecule {id:?} is not in the checkpoint dataset")))
}
