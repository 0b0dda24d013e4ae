//! Latent-space counterfactual search.
//!
//! Starting from the posterior mean of an input conformer, plain gradient
//! descent on `z` lowers
//!
//! ```text
//! L(z) = u_e + u_a + lambda_x d_x(x_hat, x0) + lambda_y_pred (f(x_hat) - f(x0))^2
//! ```
//!
//! where `x_hat` is decoded from `z` on the input's graph. In re-encode mode
//! the uncertainties are scored on the posterior mean of `x_hat`; in direct
//! mode on `z` itself. With term normalization each of `u_e`, `u_a` and the
//! distance term is divided by its value at the starting point.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{
    constants_on_tape, denormalize_on_tape, distance_dx_on_tape, node_features_on_tape,
    node_states_on_tape, propagate_on_tape, topology, Topology,
};
use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{encode, encode_on_tape, positions_tensor, LatentVector, NodeStates};
use crate::model::{Model, ParamVars};
use crate::molgraph::{normalize_positions, Conformer, MoleculeGraph, NormalizationConstants};
use crate::uncertainty::{epistemic_on_tape, predict_on_tape};
use crate::{Error, Result};

/// Where the uncertainty estimators are applied during the search.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UncertaintyMode {
    /// Decode `z`, re-encode the result and score its posterior mean.
    #[default]
    ReEncode,
    /// Score `z` directly.
    Direct,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClueConfig {
    pub steps: usize,
    pub clue_lr: f64,
    pub normalize_terms: bool,
    pub lambda_x: f64,
    /// Weight of the prediction-shift term; zero leaves it out.
    pub lambda_y_pred: f64,
    pub uncertainty_mode: UncertaintyMode,
    pub seed: u64,
}

impl Default for ClueConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            clue_lr: 0.1,
            normalize_terms: false,
            lambda_x: 1.0,
            lambda_y_pred: 0.0,
            uncertainty_mode: UncertaintyMode::ReEncode,
            seed: 0,
        }
    }
}

impl ClueConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("clue steps must be at least 1".into()));
        }
        if !(self.clue_lr >= 0.0) || !self.clue_lr.is_finite() {
            return Err(Error::Config(format!("clue_lr must be nonnegative, got {}", self.clue_lr)));
        }
        if !(self.lambda_x >= 0.0) || !(self.lambda_y_pred >= 0.0) {
            return Err(Error::Config("clue lambdas must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Terms of the search objective, after normalization when enabled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    pub u_e: f64,
    pub u_a: f64,
    /// `lambda_x d_x + lambda_y_pred (f(x_hat) - f(x0))^2`.
    pub distance: f64,
    pub total: f64,
}

/// Step-0 magnitudes used to normalize the objective terms. A zero entry
/// leaves its term unscaled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermScales {
    pub u_e: f64,
    pub u_a: f64,
    pub distance: f64,
}

impl TermScales {
    pub const NONE: Self = Self {
        u_e: 1.0,
        u_a: 1.0,
        distance: 1.0,
    };

    fn from_raw(t: &ObjectiveTerms) -> Self {
        let pick = |v: f64| if v != 0.0 && v.is_finite() { v } else { 1.0 };
        Self {
            u_e: pick(t.u_e),
            u_a: pick(t.u_a),
            distance: pick(t.distance),
        }
    }
}

/// Per-input state that stays fixed during the search.
pub struct ClueContext<'a> {
    pub model: &'a Model,
    pub graph: &'a MoleculeGraph,
    pub x0: Conformer,
    /// Posterior mean of `x0`.
    pub z0: LatentVector,
    node_states: NodeStates,
    norm: NormalizationConstants,
    topo: Topology,
    /// Predicted (standardized) mean at `z0`.
    f_x0: f64,
}

impl<'a> ClueContext<'a> {
    pub fn new(model: &'a Model, graph: &'a MoleculeGraph, x0: &Conformer) -> Result<Self> {
        let dims = &model.dims;
        let (node_states, post) = encode(graph, x0, &model.params, dims)?;
        let z0 = post.mean();
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(&model.params, false);
        let zv = tape.constant(z0.to_row());
        let pred = predict_on_tape(&mut tape, &mut pv, zv)?;
        let f_x0 = tape.scalar(pred.mean);
        Ok(Self {
            model,
            graph,
            x0: x0.clone(),
            z0,
            node_states,
            norm: normalize_positions(x0).constants,
            topo: topology(graph),
            f_x0,
        })
    }
}

/// Tape handles of one objective evaluation.
pub struct ObjectiveVars {
    pub u_e: Var,
    pub u_a: Var,
    pub distance: Var,
    pub total: Var,
    /// Decoded positions `n x 3`.
    pub x_hat: Var,
    /// Standardized predicted mean of the scored latent.
    pub pred_mean: Var,
    pub d_x: Var,
    /// `u_e` and `u_a` before normalization.
    pub raw_u_e: Var,
    pub raw_u_a: Var,
}

/// Records the objective at latent `z` (`1 x latent`).
pub fn clue_objective_on_tape(
    tape: &mut Tape,
    ctx: &ClueContext<'_>,
    config: &ClueConfig,
    scales: &TermScales,
    z: Var,
) -> Result<ObjectiveVars> {
    let model = ctx.model;
    let dims = &model.dims;
    let mut pv = ParamVars::new(&model.params, false);
    let (hs, hv) = node_states_on_tape(tape, &ctx.node_states);
    let feats = node_features_on_tape(tape, &mut pv, dims, hs, hv, z)?;
    let p = propagate_on_tape(tape, &mut pv, dims, &ctx.topo, feats)?;
    let (c, s) = constants_on_tape(tape, &ctx.norm);
    let x_hat = denormalize_on_tape(tape, p, c, s)?;

    let scored = match config.uncertainty_mode {
        UncertaintyMode::Direct => z,
        UncertaintyMode::ReEncode => {
            let enc = encode_on_tape(tape, &mut pv, dims, ctx.graph, x_hat)?;
            enc.mean_latent(tape)?
        }
    };
    let ct = model.certificates.transposed_on_tape(tape);
    let u_e = epistemic_on_tape(tape, ct, scored)?;
    let pred = predict_on_tape(tape, &mut pv, scored)?;
    let u_a = pred.variance(tape);

    let x0 = tape.constant(positions_tensor(&ctx.x0));
    let d_x = distance_dx_on_tape(tape, x_hat, x0)?;
    let mut distance = tape.scale(d_x, config.lambda_x);
    if config.lambda_y_pred != 0.0 {
        let shift = tape.add_scalar(pred.mean, -ctx.f_x0);
        let shift2 = tape.square(shift);
        let weighted = tape.scale(shift2, config.lambda_y_pred);
        distance = tape.add(distance, weighted)?;
    }

    let (raw_u_e, raw_u_a) = (u_e, u_a);
    let u_e = tape.scale(u_e, 1.0 / scales.u_e);
    let u_a = tape.scale(u_a, 1.0 / scales.u_a);
    let distance = tape.scale(distance, 1.0 / scales.distance);
    let ea = tape.add(u_e, u_a)?;
    let total = tape.add(ea, distance)?;
    Ok(ObjectiveVars {
        u_e,
        u_a,
        distance,
        total,
        x_hat,
        pred_mean: pred.mean,
        d_x,
        raw_u_e,
        raw_u_a,
    })
}

/// Objective value, terms and gradient with respect to `z`.
pub struct ObjectiveEval {
    pub terms: ObjectiveTerms,
    pub gradient: Vec<f64>,
    pub x_hat: Tensor,
    /// Standardized predicted mean of the scored latent.
    pub pred_mean: f64,
    pub d_x: f64,
    pub raw_u_e: f64,
    pub raw_u_a: f64,
}

fn evaluate(
    ctx: &ClueContext<'_>,
    config: &ClueConfig,
    scales: &TermScales,
    z: &[f64],
) -> Result<ObjectiveEval> {
    let mut tape = Tape::new();
    let zv = tape.leaf(Tensor::row(z.to_vec()));
    let o = clue_objective_on_tape(&mut tape, ctx, config, scales, zv)?;
    let gradient = tape.backward(o.total)?.wrt(&tape, zv).into_data();
    Ok(ObjectiveEval {
        terms: ObjectiveTerms {
            u_e: tape.scalar(o.u_e),
            u_a: tape.scalar(o.u_a),
            distance: tape.scalar(o.distance),
            total: tape.scalar(o.total),
        },
        gradient,
        x_hat: tape.value(o.x_hat).clone(),
        pred_mean: tape.scalar(o.pred_mean),
        d_x: tape.scalar(o.d_x),
        raw_u_e: tape.scalar(o.raw_u_e),
        raw_u_a: tape.scalar(o.raw_u_a),
    })
}

/// Objective at `z` for input `x0`. With `normalize_terms` the step-0 scales
/// are those of `z0`, the posterior mean of `x0`.
pub fn clue_objective(
    z: &LatentVector,
    x0: &Conformer,
    graph: &MoleculeGraph,
    model: &Model,
    config: &ClueConfig,
) -> Result<ObjectiveTerms> {
    if z.len() != model.dims.latent() {
        return Err(Error::Dim(format!(
            "latent length {}, expected {}",
            z.len(),
            model.dims.latent()
        )));
    }
    let ctx = ClueContext::new(model, graph, x0)?;
    let scales = step0_scales(&ctx, config)?;
    Ok(evaluate(&ctx, config, &scales, z.values())?.terms)
}

fn step0_scales(ctx: &ClueContext<'_>, config: &ClueConfig) -> Result<TermScales> {
    if !config.normalize_terms {
        return Ok(TermScales::NONE);
    }
    let raw = evaluate(ctx, config, &TermScales::NONE, ctx.z0.values())?;
    Ok(TermScales::from_raw(&raw.terms))
}

/// One record of a search trajectory. Uncertainties and RMSD are raw;
/// `l_total` is the objective as optimized.
#[derive(Clone, Debug, PartialEq)]
pub struct ClueStep {
    pub step: usize,
    pub z: LatentVector,
    pub conformer: Conformer,
    pub l_e: f64,
    pub l_a: f64,
    /// RMSD between the decoded conformer and `x0`.
    pub l_r: f64,
    /// Squared error of the predicted mean (label units) when a label is known.
    pub l_y: Option<f64>,
    pub l_total: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClueTrajectory {
    pub id: String,
    pub steps: Vec<ClueStep>,
    /// Set when a non-finite gradient or value ended the search early.
    pub truncated: bool,
}

impl ClueTrajectory {
    pub fn first(&self) -> &ClueStep {
        &self.steps[0]
    }

    pub fn last(&self) -> &ClueStep {
        self.steps.last().expect("at least one record")
    }
}

fn record(
    ctx: &ClueContext<'_>,
    step: usize,
    z: &[f64],
    eval: &ObjectiveEval,
    label: Option<f64>,
) -> Result<ClueStep> {
    let positions = eval.x_hat.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let conformer = Conformer::new(ctx.graph, positions)?;
    let stats = &ctx.model.label_stats;
    Ok(ClueStep {
        step,
        z: LatentVector::new(z.to_vec()),
        conformer,
        l_e: eval.raw_u_e,
        l_a: eval.raw_u_a * stats.std * stats.std,
        l_r: eval.d_x.sqrt(),
        l_y: label.map(|y| (stats.destandardize(eval.pred_mean) - y).powi(2)),
        l_total: eval.terms.total,
    })
}

/// Runs `config.steps` gradient-descent iterations from the posterior mean
/// of `x0`. Labels are only recorded, never differentiated.
pub fn clue_optimize(
    graph: &MoleculeGraph,
    x0: &Conformer,
    label: Option<f64>,
    model: &Model,
    config: &ClueConfig,
) -> Result<ClueTrajectory> {
    config.validate()?;
    let ctx = ClueContext::new(model, graph, x0)?;
    let scales = step0_scales(&ctx, config)?;
    let mut z = ctx.z0.values().to_vec();
    let mut steps = Vec::with_capacity(config.steps + 1);
    let mut truncated = false;
    for step in 0..=config.steps {
        let eval = match evaluate(&ctx, config, &scales, &z) {
            Ok(e) if e.terms.total.is_finite() && e.x_hat.is_finite() => e,
            Ok(_) | Err(Error::Mol(_)) if step > 0 => {
                truncated = true;
                break;
            }
            Ok(_) => {
                return Err(Error::Config(format!(
                    "objective is not finite at the starting latent of {}",
                    graph.id()
                )))
            }
            Err(e) => return Err(e),
        };
        steps.push(record(&ctx, step, &z, &eval, label)?);
        if step == config.steps {
            break;
        }
        if eval.gradient.iter().any(|g| !g.is_finite()) {
            truncated = true;
            break;
        }
        for (zi, gi) in z.iter_mut().zip(&eval.gradient) {
            *zi -= config.clue_lr * gi;
        }
    }
    Ok(ClueTrajectory {
        id: graph.id().to_string(),
        steps,
        truncated,
    })
}

/// Loss term used for ranking and curve panels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Term {
    #[serde(rename = "L_y")]
    Ly,
    #[serde(rename = "L_e")]
    Le,
    #[serde(rename = "L_a")]
    La,
    #[serde(rename = "L_r")]
    Lr,
}

impl Term {
    pub const ALL: [Term; 4] = [Term::Ly, Term::Le, Term::La, Term::Lr];

    pub fn name(self) -> &'static str {
        match self {
            Term::Ly => "L_y",
            Term::Le => "L_e",
            Term::La => "L_a",
            Term::Lr => "L_r",
        }
    }

    /// Value of this term in a trajectory record (`L_y` needs a label).
    pub fn of_step(self, s: &ClueStep) -> Option<f64> {
        match self {
            Term::Ly => s.l_y,
            Term::Le => Some(s.l_e),
            Term::La => Some(s.l_a),
            Term::Lr => Some(s.l_r),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Term::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::UnknownTerm(s.to_string()))
    }
}

/// Per-molecule term values used for ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeEvaluation {
    pub id: String,
    #[serde(rename = "L_y")]
    pub l_y: f64,
    #[serde(rename = "L_e")]
    pub l_e: f64,
    #[serde(rename = "L_a")]
    pub l_a: f64,
    #[serde(rename = "L_r")]
    pub l_r: f64,
}

impl MoleculeEvaluation {
    pub fn value(&self, term: Term) -> f64 {
        match term {
            Term::Ly => self.l_y,
            Term::Le => self.l_e,
            Term::La => self.l_a,
            Term::Lr => self.l_r,
        }
    }
}

/// Terms of `x0` at its own posterior mean, as in the first trajectory record.
pub fn evaluate_molecule(
    graph: &MoleculeGraph,
    x0: &Conformer,
    label: f64,
    model: &Model,
    mode: UncertaintyMode,
) -> Result<MoleculeEvaluation> {
    let config = ClueConfig {
        uncertainty_mode: mode,
        ..ClueConfig::default()
    };
    let ctx = ClueContext::new(model, graph, x0)?;
    let eval = evaluate(&ctx, &config, &TermScales::NONE, ctx.z0.values())?;
    let s = record(&ctx, 0, ctx.z0.values(), &eval, Some(label))?;
    Ok(MoleculeEvaluation {
        id: graph.id().to_string(),
        l_y: s.l_y.expect("label supplied"),
        l_e: s.l_e,
        l_a: s.l_a,
        l_r: s.l_r,
    })
}

/// Ids of the `ceil(fraction * n)` molecules with the largest `term`,
/// largest first; ties go to the lexicographically smaller id.
pub fn rank_worst(evaluations: &[MoleculeEvaluation], term: &str, fraction: f64) -> Result<Vec<String>> {
    let term: Term = term.parse()?;
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut order: Vec<&MoleculeEvaluation> = evaluations.iter().collect();
    order.sort_by(|a, b| {
        b.value(term)
            .partial_cmp(&a.value(term))
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.id.cmp(&b.id))
    });
    let take = (fraction * evaluations.len() as f64).ceil() as usize;
    Ok(order.into_iter().take(take).map(|e| e.id.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;
    use crate::model::ModelDims;
    use crate::molgraph::{make_synthetic_dataset, rmsd};

    fn model() -> Model {
        Model::init(ModelDims::test_scale(), 8)
    }

    fn eval_row(id: &str, v: f64) -> MoleculeEvaluation {
        MoleculeEvaluation {
            id: id.into(),
            l_y: v,
            l_e: v,
            l_a: v,
            l_r: v,
        }
    }

    #[test]
    fn zero_lr_keeps_latent() {
        let ex = &make_synthetic_dataset(1, 1)[0];
        let m = model();
        let cfg = ClueConfig {
            steps: 1,
            clue_lr: 0.0,
            ..ClueConfig::default()
        };
        let t = clue_optimize(&ex.graph, &ex.conformer, None, &m, &cfg).unwrap();
        assert_eq!(t.steps.len(), 2);
        assert_eq!(t.steps[0].z, t.steps[1].z);
        assert_eq!(t.steps[0].l_total, t.steps[1].l_total);
        assert_eq!(t.steps[0].conformer, t.steps[1].conformer);
    }

    #[test]
    fn normalized_step0_terms_are_one() {
        let ex = &make_synthetic_dataset(1, 2)[0];
        let m = model();
        let cfg = ClueConfig {
            normalize_terms: true,
            ..ClueConfig::default()
        };
        let ctx = ClueContext::new(&m, &ex.graph, &ex.conformer).unwrap();
        let t = clue_objective(&ctx.z0, &ex.conformer, &ex.graph, &m, &cfg).unwrap();
        for v in [t.u_e, t.u_a, t.distance] {
            assert!((v - 1.0).abs() < 1e-12, "{t:?}");
        }
        assert!((t.total - (t.u_e + t.u_a + t.distance)).abs() <= 1e-12);
    }

    #[test]
    fn step0_rmsd_matches_decoded_distance() {
        let ex = &make_synthetic_dataset(1, 3)[0];
        let m = model();
        let t = clue_optimize(&ex.graph, &ex.conformer, Some(ex.label), &m, &ClueConfig::default()).unwrap();
        assert_eq!(t.steps.len(), 21);
        let r = rmsd(&t.steps[0].conformer, &ex.conformer).unwrap();
        assert!((t.steps[0].l_r - r).abs() < 1e-12);
        for s in &t.steps {
            assert_eq!(s.conformer.atom_count(), ex.graph.atom_count());
        }
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let ex = &make_synthetic_dataset(1, 4)[0];
        let m = model();
        let ctx = ClueContext::new(&m, &ex.graph, &ex.conformer).unwrap();
        for mode in [UncertaintyMode::Direct, UncertaintyMode::ReEncode] {
            let cfg = ClueConfig {
                uncertainty_mode: mode,
                lambda_y_pred: 0.5,
                ..ClueConfig::default()
            };
            let report = finite_difference_check(
                |tape, z| Ok::<_, Error>(clue_objective_on_tape(tape, &ctx, &cfg, &TermScales::NONE, z)?.total),
                &ctx.z0.to_row(),
                1e-5,
            )
            .unwrap();
            assert!(report.passes(1e-4), "{mode:?}: {report:?}");
        }
    }

    #[test]
    fn ranking_examples() {
        let rows: Vec<_> = (0..10).map(|i| eval_row(&format!("m{i}"), i as f64)).collect();
        assert_eq!(rank_worst(&rows, "L_e", 0.1).unwrap(), vec!["m9"]);
        let flat: Vec<_> = ["d", "b", "a", "c"].iter().map(|id| eval_row(id, 1.0)).collect();
        assert_eq!(rank_worst(&flat, "L_r", 0.5).unwrap(), vec!["a", "b"]);
        assert!(matches!(rank_worst(&rows, "L_q", 0.1), Err(Error::UnknownTerm(_))));
        assert!(rank_worst(&rows, "L_y", 0.0).is_err());
    }
}
