//! Trainable parameters shared by the encoder, decoder and predictor.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::molgraph::MAX_ELEMENT;
use crate::uncertainty::CertificateBank;
use crate::{Error, Result};

/// Number of decoder relations: four bond types plus the virtual edge.
pub const N_RELATIONS: usize = 5;

/// Layer widths of the whole model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Scalar (L=0) channels `s`.
    pub scalar: usize,
    /// Vector (L=1) channels `v`; each carries 3 components.
    pub vector: usize,
    /// Decoder node width `d`.
    pub hidden: usize,
    pub predictor_hidden: usize,
    pub n_rbf: usize,
    /// Radial cutoff for non-bonded encoder edges, Angstrom.
    pub cutoff: f64,
    pub rounds: usize,
    pub decoder_layers: usize,
    /// Rows `k` of the certificate bank.
    pub certificates: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            scalar: 128,
            vector: 64,
            hidden: 128,
            predictor_hidden: 128,
            n_rbf: 16,
            cutoff: 5.0,
            rounds: 3,
            decoder_layers: 4,
            certificates: 100,
        }
    }
}

impl ModelDims {
    /// Small widths for tests and desk-scale sweeps (latent length 40).
    pub fn test_scale() -> Self {
        Self {
            scalar: 16,
            vector: 8,
            hidden: 32,
            predictor_hidden: 32,
            certificates: 20,
            ..Self::default()
        }
    }

    /// Length of the flattened latent `s + 3v`.
    pub fn latent(&self) -> usize {
        self.scalar + 3 * self.vector
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scalar", self.scalar),
            ("vector", self.vector),
            ("hidden", self.hidden),
            ("predictor_hidden", self.predictor_hidden),
            ("n_rbf", self.n_rbf),
            ("certificates", self.certificates),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("dims.{name} must be positive")));
            }
        }
        if self.n_rbf < 2 {
            return Err(Error::Config("dims.n_rbf must be at least 2".into()));
        }
        if !(self.cutoff > 0.0) {
            return Err(Error::Config("dims.cutoff must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Init {
    Glorot,
    Normal(f64),
    Zeros,
    Ones,
}

fn layout(dims: &ModelDims) -> Vec<(String, Vec<usize>, Init)> {
    let (s, v, d, h, r) = (
        dims.scalar,
        dims.vector,
        dims.hidden,
        dims.predictor_hidden,
        dims.n_rbf,
    );
    let lat = dims.latent();
    let mut out = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| out.push((name, shape, init));
    add("enc.embed".into(), vec![MAX_ELEMENT as usize + 1, s], Init::Normal(1.0));
    for t in 0..dims.rounds {
        let p = |n: &str| format!("enc.{t}.{n}");
        add(p("msg_w"), vec![s, s], Init::Glorot);
        add(p("msg_b"), vec![1, s], Init::Zeros);
        add(p("rbf_s"), vec![r, s], Init::Glorot);
        add(p("dir_w"), vec![s, v], Init::Glorot);
        add(p("rbf_d"), vec![r, v], Init::Glorot);
        add(p("vec_w"), vec![s, v], Init::Glorot);
        add(p("rbf_v"), vec![r, v], Init::Glorot);
        add(p("upd_w1"), vec![s + v, s], Init::Glorot);
        add(p("upd_b1"), vec![1, s], Init::Zeros);
        add(p("upd_w2"), vec![s, s], Init::Glorot);
        add(p("upd_b2"), vec![1, s], Init::Zeros);
        add(p("vmix"), vec![v, v], Init::Glorot);
        add(p("vgate_w"), vec![s, v], Init::Glorot);
        add(p("vgate_b"), vec![1, v], Init::Zeros);
    }
    add("enc.ro_w1".into(), vec![s, s], Init::Glorot);
    add("enc.ro_b1".into(), vec![1, s], Init::Zeros);
    add("enc.ro_mu0_w".into(), vec![s, s], Init::Glorot);
    add("enc.ro_mu0_b".into(), vec![1, s], Init::Zeros);
    add("enc.ro_lv0_w".into(), vec![s, s], Init::Glorot);
    add("enc.ro_lv0_b".into(), vec![1, s], Init::Zeros);
    add("enc.ro_lv1_w".into(), vec![s, v], Init::Glorot);
    add("enc.ro_lv1_b".into(), vec![1, v], Init::Zeros);
    add("enc.mu1_w".into(), vec![v, v], Init::Glorot);

    add("dec.skip_w".into(), vec![s + 3 * v, d], Init::Glorot);
    add("dec.skip_b".into(), vec![1, d], Init::Zeros);
    add("dec.z_w".into(), vec![lat, d], Init::Glorot);
    add("dec.z_b".into(), vec![1, d], Init::Zeros);
    for l in 0..dims.decoder_layers {
        let p = |n: &str| format!("dec.{l}.{n}");
        add(p("self_w"), vec![d, d], Init::Glorot);
        add(p("self_b"), vec![1, d], Init::Zeros);
        for rel in 0..N_RELATIONS {
            add(p(&format!("rel{rel}_w")), vec![d, d], Init::Glorot);
        }
        add(p("ln_g"), vec![1, d], Init::Ones);
        add(p("ln_b"), vec![1, d], Init::Zeros);
    }
    add("dec.psi_w1".into(), vec![d, d], Init::Glorot);
    add("dec.psi_b1".into(), vec![1, d], Init::Zeros);
    add("dec.psi_w2".into(), vec![d, 3], Init::Glorot);
    add("dec.psi_b2".into(), vec![1, 3], Init::Zeros);

    add("pred.w1".into(), vec![lat, h], Init::Glorot);
    add("pred.b1".into(), vec![1, h], Init::Zeros);
    add("pred.w2".into(), vec![h, h], Init::Glorot);
    add("pred.b2".into(), vec![1, h], Init::Zeros);
    add("pred.mean_w".into(), vec![h, 1], Init::Glorot);
    add("pred.mean_b".into(), vec![1, 1], Init::Zeros);
    add("pred.lv_w".into(), vec![h, 1], Init::Glorot);
    add("pred.lv_b".into(), vec![1, 1], Init::Zeros);
    out
}

/// Named parameter tensors in a fixed (sorted) order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    /// Seeded initialization for `dims`.
    pub fn init(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout(dims)
            .into_iter()
            .map(|(name, shape, init)| {
                let n: usize = shape.iter().product();
                let data = match init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Normal(std) => (0..n)
                        .map(|_| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            std * e
                        })
                        .collect::<Vec<f64>>(),
                    Init::Glorot => {
                        let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                        (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                    }
                };
                (name, Tensor::new(shape, data).expect("layout shape"))
            })
            .collect();
        Self { tensors }
    }

    /// Checks that names and shapes match the layout for `dims`.
    pub fn check_layout(&self, dims: &ModelDims) -> Result<()> {
        let expected = layout(dims);
        if expected.len() != self.tensors.len() {
            return Err(Error::Dim(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape, _) in expected {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Dim(format!(
                        "{name}: expected shape {shape:?}, found {:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Dim(format!("missing parameter {name}"))),
            }
        }
        Ok(())
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Sets every tensor whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, t) in &mut self.tensors {
            if name.starts_with(prefix) {
                t.data_mut().fill(0.0);
            }
        }
    }
}

/// Lazily places parameters on a tape, once per name.
pub struct ParamVars<'a> {
    store: &'a ParamStore,
    bound: HashMap<&'a str, Var>,
    trainable: bool,
}

impl<'a> ParamVars<'a> {
    /// `trainable` decides whether parameters become differentiable leaves.
    pub fn new(store: &'a ParamStore, trainable: bool) -> Self {
        Self {
            store,
            bound: HashMap::new(),
            trainable,
        }
    }

    pub fn get(&mut self, tape: &mut Tape, name: &str) -> Var {
        let (key, value) = self
            .store
            .tensors
            .get_key_value(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        *self.bound.entry(key.as_str()).or_insert_with(|| {
            if self.trainable {
                tape.leaf(value.clone())
            } else {
                tape.constant(value.clone())
            }
        })
    }

    /// `x W + b`.
    pub fn linear(&mut self, tape: &mut Tape, x: Var, w: &str, b: Option<&str>) -> Result<Var> {
        let wv = self.get(tape, w);
        let y = tape.matmul(x, wv)?;
        match b {
            Some(b) => {
                let bv = self.get(tape, b);
                Ok(tape.add(y, bv)?)
            }
            None => Ok(y),
        }
    }

    /// Names and tape handles of every parameter used so far.
    pub fn bound(&self) -> impl Iterator<Item = (&'a str, Var)> + '_ {
        self.bound.iter().map(|(k, v)| (*k, *v))
    }
}

/// Label standardization constants (train split).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub mean: f64,
    pub std: f64,
}

impl LabelStats {
    pub const IDENTITY: Self = Self { mean: 0.0, std: 1.0 };

    pub fn fit(labels: &[f64]) -> Self {
        let n = labels.len().max(1) as f64;
        let mean = labels.iter().sum::<f64>() / n;
        let var = labels.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Self { mean, std }
    }

    pub fn standardize(&self, y: f64) -> f64 {
        (y - self.mean) / self.std
    }

    pub fn destandardize(&self, y: f64) -> f64 {
        y * self.std + self.mean
    }
}

/// Everything needed for inference: weights, certificates and label scaling.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub dims: ModelDims,
    pub params: ParamStore,
    pub certificates: CertificateBank,
    pub label_stats: LabelStats,
}

impl Model {
    /// Untrained model with random certificates.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        Self {
            params: ParamStore::init(&dims, seed),
            certificates: CertificateBank::random(dims.certificates, dims.latent(), seed ^ 0xC3C3),
            label_stats: LabelStats::IDENTITY,
            dims,
        }
    }
}
