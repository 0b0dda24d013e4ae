//! Uncertainty scores of a latent: predictive variance of a heteroscedastic
//! regression head (aleatoric) and the response of a bank of orthonormal
//! certificates (epistemic).
//!
//! Certificates are linear maps trained to send training latents to zero
//! while staying orthonormal; a latent far from the training distribution
//! gets a large `||C mu||`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{LatentVector, LOGVAR_MAX, LOGVAR_MIN};
use crate::model::{LabelStats, ModelDims, ParamStore, ParamVars};
use crate::{Error, Result};

/// Gaussian predictive distribution of the target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub mean: f64,
    pub variance: f64,
}

impl PredictiveDistribution {
    /// Maps a distribution over standardized labels to label units.
    pub fn to_original(&self, stats: &LabelStats) -> Self {
        Self {
            mean: stats.destandardize(self.mean),
            variance: self.variance * stats.std * stats.std,
        }
    }
}

/// Predictor outputs on a tape, each `1 x 1`.
#[derive(Clone, Copy, Debug)]
pub struct PredictorVars {
    pub mean: Var,
    /// Clamped log-variance.
    pub logvar: Var,
}

impl PredictorVars {
    pub fn variance(&self, tape: &mut Tape) -> Var {
        tape.exp(self.logvar)
    }
}

pub fn predict_on_tape(tape: &mut Tape, pv: &mut ParamVars<'_>, z: Var) -> Result<PredictorVars> {
    let h = pv.linear(tape, z, "pred.w1", Some("pred.b1"))?;
    let h = tape.ssp(h);
    let h = pv.linear(tape, h, "pred.w2", Some("pred.b2"))?;
    let h = tape.ssp(h);
    let mean = pv.linear(tape, h, "pred.mean_w", Some("pred.mean_b"))?;
    let lv = pv.linear(tape, h, "pred.lv_w", Some("pred.lv_b"))?;
    Ok(PredictorVars {
        mean,
        logvar: tape.clamp(lv, LOGVAR_MIN, LOGVAR_MAX),
    })
}

fn check_latent(z: &LatentVector, dims: &ModelDims) -> Result<()> {
    if z.len() != dims.latent() {
        return Err(Error::Dim(format!("latent length {}, expected {}", z.len(), dims.latent())));
    }
    Ok(())
}

/// Predictive distribution in standardized label units.
pub fn predict(z: &LatentVector, params: &ParamStore, dims: &ModelDims) -> Result<PredictiveDistribution> {
    check_latent(z, dims)?;
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(params, false);
    let zv = tape.constant(z.to_row());
    let out = predict_on_tape(&mut tape, &mut pv, zv)?;
    Ok(PredictiveDistribution {
        mean: tape.scalar(out.mean),
        variance: tape.scalar(out.logvar).exp(),
    })
}

/// `u_a(z)`: the predictive variance.
pub fn aleatoric_u(z: &LatentVector, params: &ParamStore, dims: &ModelDims) -> Result<f64> {
    Ok(predict(z, params, dims)?.variance)
}

/// Rows of `C`, one certificate per row.
#[derive(Clone, Debug, PartialEq)]
pub struct CertificateBank {
    c: Tensor,
}

impl CertificateBank {
    /// Gaussian rows with variance `1 / latent_dim`, so rows start close to
    /// orthonormal.
    pub fn random(k: usize, latent_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 1.0 / (latent_dim as f64).sqrt();
        let data = (0..k * latent_dim)
            .map(|_| { let e: f64 = StandardNormal.sample(&mut rng); std * e })
            .collect();
        Self {
            c: Tensor::matrix(k, latent_dim, data).expect("bank shape"),
        }
    }

    pub fn from_matrix(c: Tensor) -> Result<Self> {
        if c.dims2().is_none() {
            return Err(Error::Dim(format!("certificate bank must be a matrix, got {:?}", c.shape())));
        }
        Ok(Self { c })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.c
    }

    pub fn k(&self) -> usize {
        self.c.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.c.cols()
    }

    fn gram_minus_identity(&self) -> Vec<f64> {
        let (k, m) = (self.k(), self.latent_dim());
        let c = self.c.data();
        let mut g = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                let dot: f64 = (0..m).map(|p| c[i * m + p] * c[j * m + p]).sum();
                g[i * k + j] = dot - if i == j { 1.0 } else { 0.0 };
            }
        }
        g
    }

    /// `||C C^T - I||_F / k`.
    pub fn orthonormality_error(&self) -> f64 {
        let g = self.gram_minus_identity();
        g.iter().map(|x| x * x).sum::<f64>().sqrt() / self.k() as f64
    }

    fn check_mu(&self, mu: &[f64]) -> Result<()> {
        if mu.len() != self.latent_dim() {
            return Err(Error::Dim(format!(
                "latent length {}, certificates expect {}",
                mu.len(),
                self.latent_dim()
            )));
        }
        Ok(())
    }

    /// `C mu`.
    pub fn responses(&self, mu: &[f64]) -> Result<Vec<f64>> {
        self.check_mu(mu)?;
        let m = self.latent_dim();
        Ok(self
            .c
            .data()
            .chunks(m)
            .map(|row| row.iter().zip(mu).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// `u_e = ||C mu||_2`.
    pub fn epistemic_u(&self, mu: &[f64]) -> Result<f64> {
        Ok(self.responses(mu)?.iter().map(|r| r * r).sum::<f64>().sqrt())
    }

    /// `C^T` as a constant tape node.
    pub fn transposed_on_tape(&self, tape: &mut Tape) -> Var {
        tape.constant(self.c.transpose())
    }
}

/// `||mu C^T||_2` for a `1 x latent` row `mu` and `ct = C^T`.
pub fn epistemic_on_tape(tape: &mut Tape, ct: Var, mu: Var) -> Result<Var> {
    let r = tape.matmul(mu, ct)?;
    Ok(tape.l2_norm(r))
}

/// `mean_i ||C mu_i||^2 + lambda_c ||C C^T - I||_F^2`.
pub fn oc_training_loss(bank: &CertificateBank, latents: &[LatentVector], lambda_c: f64) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::Config("certificate training needs at least one latent".into()));
    }
    let mut fit = 0.0;
    for mu in latents {
        fit += bank.responses(mu.values())?.iter().map(|r| r * r).sum::<f64>();
    }
    let ortho: f64 = bank.gram_minus_identity().iter().map(|x| x * x).sum();
    Ok(fit / latents.len() as f64 + lambda_c * ortho)
}

/// Settings of the certificate fitting stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OcConfig {
    pub lambda_c: f64,
    pub learning_rate: f64,
    /// Steps always taken before the stopping test.
    pub min_steps: usize,
    pub max_steps: usize,
    /// Stop once `||C C^T - I||_F / k` is at most this ...
    pub tolerance: f64,
    /// ... and the loss fell by less than this fraction over the last
    /// 50 steps.
    pub plateau: f64,
}

const CONVERGENCE_WINDOW: usize = 50;

impl Default for OcConfig {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            learning_rate: 1e-2,
            min_steps: 200,
            max_steps: 5000,
            tolerance: 0.05,
            plateau: 1e-3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcReport {
    pub steps: usize,
    pub loss: f64,
    pub orthonormality_error: f64,
}

/// Adam on [`oc_training_loss`] starting from `bank`.
pub fn train_certificates(
    mut bank: CertificateBank,
    latents: &[LatentVector],
    cfg: &OcConfig,
) -> Result<(CertificateBank, OcReport)> {
    if latents.is_empty() {
        return Err(Error::Config("certificate training needs at least one latent".into()));
    }
    let (k, m) = (bank.k(), bank.latent_dim());
    for mu in latents {
        bank.check_mu(mu.values())?;
    }
    // Second moment M = (1/N) sum mu mu^T; the fit term is tr(C M C^T).
    let n = latents.len() as f64;
    let mut moment = vec![0.0; m * m];
    for mu in latents {
        let v = mu.values();
        for a in 0..m {
            for b in 0..m {
                moment[a * m + b] += v[a] * v[b] / n;
            }
        }
    }
    let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
    let mut first = vec![0.0; k * m];
    let mut second = vec![0.0; k * m];
    let mut steps = 0;
    let mut window_start = f64::INFINITY;
    while steps < cfg.max_steps {
        let c = bank.c.data();
        let g_ortho = bank.gram_minus_identity();
        let mut grad = vec![0.0; k * m];
        let mut loss = cfg.lambda_c * g_ortho.iter().map(|x| x * x).sum::<f64>();
        for i in 0..k {
            for p in 0..m {
                let fit: f64 = (0..m).map(|q| c[i * m + q] * moment[q * m + p]).sum();
                let ortho: f64 = (0..k).map(|j| g_ortho[i * k + j] * c[j * m + p]).sum();
                grad[i * m + p] = 2.0 * fit + 4.0 * cfg.lambda_c * ortho;
                loss += fit * c[i * m + p];
            }
        }
        // Stop once orthonormal enough and the loss has levelled off over
        // the last window of steps.
        if steps % CONVERGENCE_WINDOW == 0 {
            let settled = window_start - loss <= cfg.plateau * window_start.abs().max(1e-12);
            if steps >= cfg.min_steps && settled && bank.orthonormality_error() <= cfg.tolerance {
                break;
            }
            window_start = loss;
        }
        steps += 1;
        let (bc1, bc2) = (1.0 - b1.powi(steps as i32), 1.0 - b2.powi(steps as i32));
        let data = bank.c.data_mut();
        for idx in 0..k * m {
            first[idx] = b1 * first[idx] + (1.0 - b1) * grad[idx];
            second[idx] = b2 * second[idx] + (1.0 - b2) * grad[idx] * grad[idx];
            data[idx] -= cfg.learning_rate * (first[idx] / bc1) / ((second[idx] / bc2).sqrt() + eps);
        }
    }
    let report = OcReport {
        steps,
        loss: oc_training_loss(&bank, latents, cfg.lambda_c)?,
        orthonormality_error: bank.orthonormality_error(),
    };
    Ok((bank, report))
}
