//! Joint training of encoder, decoder and predictor, followed by fitting the
//! certificate bank on the final training latents.

mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{distance_dx_on_tape, reconstruct_on_tape};
use crate::diffcore::{Tape, Var};
use crate::encoder::{encode, kl_on_tape, positions_tensor, LatentVector, Sampling};
use crate::model::{LabelStats, Model, ModelDims, ParamStore, ParamVars};
use crate::molgraph::{DatasetSource, LabeledExample};
use crate::uncertainty::{predict_on_tape, train_certificates, CertificateBank, OcConfig, OcReport};
use crate::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Weights of the four reconstruction-model loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_y: f64,
    pub lambda_v: f64,
    pub lambda_k: f64,
    pub lambda_l: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_y: 1.0,
            lambda_v: 1.0,
            lambda_k: 1.0,
            lambda_l: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub weights: LossWeights,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of examples held out for validation.
    pub validation_fraction: f64,
    pub dims: ModelDims,
    /// Certificate stage, including `lambda_c`.
    pub certificates: OcConfig,
    /// Data the model was trained on, kept so that tools can find molecules
    /// by id later.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSource>,
    /// Test partition removed from `dataset` before training.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub holdout: Option<Holdout>,
}

/// Seeded test partition for datasets without split tags.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Holdout {
    pub fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 16,
            seed: 0,
            validation_fraction: 0.1,
            dims: ModelDims::default(),
            certificates: OcConfig::default(),
            dataset: None,
            holdout: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        let lambdas = [
            ("lambda_y", w.lambda_y),
            ("lambda_v", w.lambda_v),
            ("lambda_k", w.lambda_k),
            ("lambda_l", w.lambda_l),
            ("lambda_c", self.certificates.lambda_c),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must be in [0, 1)".into()));
        }
        if let Some(h) = &self.holdout {
            if !(0.0..1.0).contains(&h.fraction) {
                return Err(Error::Config("holdout fraction must be in [0, 1)".into()));
            }
        }
        self.dims.validate()
    }

    /// Loads `dataset` (synthetic by default) and returns `(train, test)`.
    pub fn load_data(&self) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
        let data = self.dataset.clone().unwrap_or_default().load()?;
        Ok(holdout_split(data, self.holdout.as_ref()))
    }
}

/// Splits off the test partition. Split tags win when any example has one
/// (`"test"` goes to the test side); otherwise `holdout` draws a seeded
/// subset, and without it everything is training data. Both sides keep the
/// input order.
pub fn holdout_split(
    data: Vec<LabeledExample>,
    holdout: Option<&Holdout>,
) -> (Vec<LabeledExample>, Vec<LabeledExample>) {
    if data.iter().any(|e| e.split.is_some()) {
        return data.into_iter().partition(|e| e.split.as_deref() != Some("test"));
    }
    let Some(h) = holdout else {
        return (data, Vec::new());
    };
    let (_, test_idx) = split_indices(data.len(), h.fraction, mix_seed(&[h.seed, 0x7E57]));
    let mut is_test = vec![false; data.len()];
    for i in test_idx {
        is_test[i] = true;
    }
    let (train, test): (Vec<_>, Vec<_>) = data.into_iter().zip(is_test).partition(|(_, t)| !t);
    (
        train.into_iter().map(|(e, _)| e).collect(),
        test.into_iter().map(|(e, _)| e).collect(),
    )
}

/// Batch-mean loss terms and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub l_y: f64,
    pub l_v: f64,
    pub l_k: f64,
    pub l_l: f64,
}

impl LossBreakdown {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.lambda_y * self.l_y + w.lambda_v * self.l_v + w.lambda_k * self.l_k + w.lambda_l * self.l_l
    }
}

/// Per-example loss nodes on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ExampleLoss {
    pub total: Var,
    pub l_y: Var,
    pub l_v: Var,
    pub l_k: Var,
    pub l_l: Var,
}

impl ExampleLoss {
    fn values(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.scalar(self.total),
            l_y: tape.scalar(self.l_y),
            l_v: tape.scalar(self.l_v),
            l_k: tape.scalar(self.l_k),
            l_l: tape.scalar(self.l_l),
        }
    }
}

/// Gaussian negative log-likelihood `0.5 (ln 2 pi + lv + (y - mu)^2 / e^lv)`.
pub fn gaussian_nll(y: f64, mean: f64, logvar: f64) -> f64 {
    0.5 * (LN_2PI + logvar + (y - mean).powi(2) * (-logvar).exp())
}

/// Records the loss of one example with input positions `pos` and
/// standardized label `y`.
pub fn example_loss_on_tape(
    tape: &mut Tape,
    pv: &mut ParamVars<'_>,
    dims: &ModelDims,
    weights: &LossWeights,
    example: &LabeledExample,
    pos: Var,
    y: f64,
    sampling: Sampling,
) -> Result<ExampleLoss> {
    let rec = reconstruct_on_tape(tape, pv, dims, &example.graph, pos, sampling)?;

    let pred = predict_on_tape(tape, pv, rec.z)?;
    let target = tape.constant(crate::diffcore::Tensor::scalar(y));
    let resid = tape.sub(target, pred.mean)?;
    let resid2 = tape.square(resid);
    let neg_lv = tape.neg(pred.logvar);
    let prec = tape.exp(neg_lv);
    let fit = tape.mul(resid2, prec)?;
    let nll = tape.add(fit, pred.logvar)?;
    let nll = tape.add_scalar(nll, LN_2PI);
    let l_y = tape.scale(nll, 0.5);

    let l_v = distance_dx_on_tape(tape, rec.positions, pos)?;
    let l_k = kl_on_tape(tape, &rec.encoder)?;
    let z2 = tape.square(rec.z);
    let l_l = tape.sum(z2);

    let terms = [
        (weights.lambda_y, l_y),
        (weights.lambda_v, l_v),
        (weights.lambda_k, l_k),
        (weights.lambda_l, l_l),
    ];
    let mut total = tape.scale(terms[0].1, terms[0].0);
    for (w, t) in &terms[1..] {
        let wt = tape.scale(*t, *w);
        total = tape.add(total, wt)?;
    }
    Ok(ExampleLoss {
        total,
        l_y,
        l_v,
        l_k,
        l_l,
    })
}

/// Mixes several integers into one seed (splitmix64 finalizer chain).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Batch-mean loss terms without gradients. `sampling` is applied to every
/// example, with seeded draws offset by the example position.
pub fn e3nnvae_loss(
    batch: &[LabeledExample],
    params: &ParamStore,
    dims: &ModelDims,
    weights: &LossWeights,
    label_stats: &LabelStats,
    sampling: Sampling,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut sum = LossBreakdown::default();
    for (i, ex) in batch.iter().enumerate() {
        let mut tape = Tape::new();
        let mut pv = ParamVars::new(params, false);
        let pos = tape.constant(positions_tensor(&ex.conformer));
        let s = match sampling {
            Sampling::Deterministic => Sampling::Deterministic,
            Sampling::Seeded(seed) => Sampling::Seeded(mix_seed(&[seed, i as u64])),
        };
        let y = label_stats.standardize(ex.label);
        let loss = example_loss_on_tape(&mut tape, &mut pv, dims, weights, ex, pos, y, s)?;
        accumulate(&mut sum, &loss.values(&tape));
    }
    Ok(scale_breakdown(&sum, 1.0 / batch.len() as f64))
}

fn accumulate(sum: &mut LossBreakdown, x: &LossBreakdown) {
    sum.total += x.total;
    sum.l_y += x.l_y;
    sum.l_v += x.l_v;
    sum.l_k += x.l_k;
    sum.l_l += x.l_l;
}

fn scale_breakdown(x: &LossBreakdown, f: f64) -> LossBreakdown {
    LossBreakdown {
        total: x.total * f,
        l_y: x.l_y * f,
        l_v: x.l_v * f,
        l_k: x.l_k * f,
        l_l: x.l_l * f,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean over the epoch's training batches.
    pub train: LossBreakdown,
    /// Posterior-mean evaluation on the validation split.
    pub validation: Option<LossBreakdown>,
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct FitOutput {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochLog>,
    pub certificates: OcReport,
    /// Ids of the validation split.
    pub validation_ids: Vec<String>,
}

struct Adam {
    lr: f64,
    step: i32,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ParamStore, lr: f64) -> Self {
        let moments = params
            .iter()
            .map(|(k, t)| (k.clone(), (vec![0.0; t.numel()], vec![0.0; t.numel()])))
            .collect();
        Self { lr, step: 0, moments }
    }

    fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) {
        self.step += 1;
        let bc1 = 1.0 - Self::B1.powi(self.step);
        let bc2 = 1.0 - Self::B2.powi(self.step);
        for (name, t) in params.iter_mut() {
            let (m, v) = self.moments.get_mut(name.as_str()).expect("moment per parameter");
            let g = grads.get(name.as_str());
            for (i, w) in t.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = Self::B1 * m[i] + (1.0 - Self::B1) * gi;
                v[i] = Self::B2 * v[i] + (1.0 - Self::B2) * gi * gi;
                *w -= self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + Self::EPS);
            }
        }
    }
}

/// Seeded train/validation split; returns `(train, validation)` indices.
pub fn split_indices(n: usize, validation_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x5911])));
    let n_val = (validation_fraction * n as f64).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

pub fn fit(dataset: &[LabeledExample], config: &TrainConfig) -> Result<FitOutput> {
    fit_with_progress(dataset, config, |_| {})
}

/// [`fit`] with a callback invoked after every epoch.
pub fn fit_with_progress(
    dataset: &[LabeledExample],
    config: &TrainConfig,
    mut progress: impl FnMut(&EpochLog),
) -> Result<FitOutput> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    if dataset.len() < 2 * config.batch_size {
        return Err(Error::Config(format!(
            "{} examples is fewer than two batches of {}",
            dataset.len(),
            config.batch_size
        )));
    }
    let dims = config.dims;
    let (train_idx, val_idx) = split_indices(dataset.len(), config.validation_fraction, config.seed);
    let train: Vec<&LabeledExample> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val: Vec<LabeledExample> = val_idx.iter().map(|&i| dataset[i].clone()).collect();
    let labels: Vec<f64> = train.iter().map(|e| e.label).collect();
    let label_stats = LabelStats::fit(&labels);

    let mut model = Model::init(dims, config.seed);
    model.label_stats = label_stats;
    let mut adam = Adam::new(&model.params, config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, 0xE0C4, epoch as u64])));
        let mut epoch_sum = LossBreakdown::default();
        let mut batches = 0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
            let mut batch_sum = LossBreakdown::default();
            let inv = 1.0 / chunk.len() as f64;
            for &k in chunk {
                let ex = train[k];
                let sampling = Sampling::Seeded(mix_seed(&[config.seed, epoch as u64, train_idx[k] as u64]));
                let mut tape = Tape::new();
                let mut pv = ParamVars::new(&model.params, true);
                let pos = tape.constant(positions_tensor(&ex.conformer));
                let y = label_stats.standardize(ex.label);
                let loss = example_loss_on_tape(&mut tape, &mut pv, &dims, &config.weights, ex, pos, y, sampling)?;
                let values = loss.values(&tape);
                if !values.total.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b });
                }
                accumulate(&mut batch_sum, &values);
                let root = tape.scale(loss.total, inv);
                let g = tape.backward(root)?;
                for (name, var) in pv.bound() {
                    if let Some(gv) = g.raw(var) {
                        let acc = grads
                            .entry(name.to_string())
                            .or_insert_with(|| vec![0.0; gv.len()]);
                        for (a, x) in acc.iter_mut().zip(gv) {
                            *a += x;
                        }
                    }
                }
            }
            if grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            adam.update(&mut model.params, &grads);
            accumulate(&mut epoch_sum, &scale_breakdown(&batch_sum, inv));
            batches += 1;
        }
        let validation = if val.is_empty() {
            None
        } else {
            Some(e3nnvae_loss(
                &val,
                &model.params,
                &dims,
                &config.weights,
                &label_stats,
                Sampling::Deterministic,
            )?)
        };
        let log = EpochLog {
            epoch,
            train: scale_breakdown(&epoch_sum, 1.0 / batches as f64),
            validation,
        };
        progress(&log);
        history.push(log);
    }

    let latents = posterior_means(train.iter().copied(), &model)?;
    let (bank, report) = train_certificates(model.certificates.clone(), &latents, &config.certificates)?;
    model.certificates = bank;

    Ok(FitOutput {
        checkpoint: Checkpoint {
            config: config.clone(),
            model,
        },
        history,
        certificates: report,
        validation_ids: val.iter().map(|e| e.id().to_string()).collect(),
    })
}

/// Deterministic latents of `examples` under `model`.
pub fn posterior_means<'a>(
    examples: impl IntoIterator<Item = &'a LabeledExample>,
    model: &Model,
) -> Result<Vec<LatentVector>> {
    examples
        .into_iter()
        .map(|ex| Ok(encode(&ex.graph, &ex.conformer, &model.params, &model.dims)?.1.mean()))
        .collect()
}

/// Training-side latents of `dataset` as [`fit`] used them for the
/// certificate stage: the validation split is left out.
pub fn certificate_latents(dataset: &[LabeledExample], model: &Model, config: &TrainConfig) -> Result<Vec<LatentVector>> {
    let (train_idx, _) = split_indices(dataset.len(), config.validation_fraction, config.seed);
    posterior_means(train_idx.iter().map(|&i| &dataset[i]), model)
}

/// Refits only the certificate bank of `model` on the given latents.
pub fn refit_certificates(
    model: &Model,
    latents: &[LatentVector],
    cfg: &OcConfig,
    seed: u64,
) -> Result<(CertificateBank, OcReport)> {
    let init = CertificateBank::random(model.dims.certificates, model.dims.latent(), seed);
    train_certificates(init, latents, cfg)
}
