//! Rotation-equivariant message-passing encoder with a level-separated
//! Gaussian posterior.
//!
//! Node features carry `s` scalar (L=0) channels and `v` vector (L=1)
//! channels. Vector features are stored as three `n x v` blocks, one per
//! Cartesian component, so that channel mixing (`V_c W`) commutes with
//! rotations acting across the blocks. Scalar messages are gated by radial
//! basis functions of the interatomic distance; vector messages combine
//! gated bond directions with gated neighbour vectors. After the message
//! rounds the node features are mean-pooled per level: a two-layer readout
//! of the pooled scalars gives `mu0`, `logvar0` and `logvar1`, and a
//! bias-free channel mix of the pooled vectors gives `mu1`.
//!
//! Edges are every bonded pair plus every pair closer than the cutoff.
//! Non-bonded edges are weighted by a cosine envelope that vanishes with
//! zero slope at the cutoff, so the output is smooth in the positions.

use std::f64::consts::PI;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffcore::{Tape, Tensor, Var};
use crate::model::{ModelDims, ParamStore, ParamVars};
use crate::molgraph::{Conformer, MoleculeGraph};
use crate::{Error, Result};

/// Bounds applied to every posterior log-variance.
pub const LOGVAR_MIN: f64 = -20.0;
pub const LOGVAR_MAX: f64 = 10.0;

const VECTOR_NORM_EPS: f64 = 1e-12;

/// Per-node hidden states `h_phi`.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeStates {
    /// `n x s`.
    pub scalars: Tensor,
    /// `n x v x 3` (row-major: atom, channel, component).
    pub vectors: Tensor,
}

impl NodeStates {
    pub fn atom_count(&self) -> usize {
        self.scalars.rows()
    }

    /// Vector feature of atom `i`, channel `k`.
    pub fn vector(&self, i: usize, k: usize) -> [f64; 3] {
        let v = self.vectors.shape()[1];
        let d = self.vectors.data();
        let base = (i * v + k) * 3;
        [d[base], d[base + 1], d[base + 2]]
    }
}

/// Gaussian posterior split by spherical-harmonic level.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu0: Vec<f64>,
    pub logvar0: Vec<f64>,
    /// `v x 3`, row-major.
    pub mu1: Vec<f64>,
    /// One isotropic log-variance per vector channel.
    pub logvar1: Vec<f64>,
}

impl LatentPosterior {
    pub fn scalar_dim(&self) -> usize {
        self.mu0.len()
    }

    pub fn vector_dim(&self) -> usize {
        self.logvar1.len()
    }

    /// Flattened posterior mean `[mu0, mu1]`.
    pub fn mean(&self) -> LatentVector {
        LatentVector::new(self.mu0.iter().chain(&self.mu1).copied().collect())
    }
}

/// Flattened latent `z = [z0 (s), z1 (v x 3, row-major)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(Vec<f64>);

impl LatentVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_row(&self) -> Tensor {
        Tensor::row(self.0.clone())
    }
}

/// How a latent is drawn from the posterior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Return the posterior mean.
    Deterministic,
    /// Reparameterized draw with noise from this seed.
    Seeded(u64),
}

/// Standard-normal noise for one reparameterized draw.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentNoise {
    pub eps0: Vec<f64>,
    /// `v x 3`, row-major.
    pub eps1: Vec<f64>,
}

impl LatentNoise {
    pub fn draw(dims: &ModelDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        Self {
            eps0: (0..dims.scalar).map(|_| normal()).collect(),
            eps1: (0..3 * dims.vector).map(|_| normal()).collect(),
        }
    }

    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            eps0: vec![0.0; dims.scalar],
            eps1: vec![0.0; 3 * dims.vector],
        }
    }
}

/// Encoder outputs living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct EncoderVars {
    /// `n x s`.
    pub scalars: Var,
    /// Cartesian components, each `n x v`.
    pub vectors: [Var; 3],
    /// `1 x s`.
    pub mu0: Var,
    pub logvar0: Var,
    /// `1 x 3v`, channel-major (`k * 3 + c`).
    pub mu1: Var,
    /// `1 x v`.
    pub logvar1: Var,
}

impl EncoderVars {
    /// Flattened posterior mean `1 x (s + 3v)`.
    pub fn mean_latent(&self, tape: &mut Tape) -> Result<Var> {
        Ok(tape.concat(&[self.mu0, self.mu1], 1)?)
    }

    pub fn node_states(&self, tape: &Tape) -> NodeStates {
        let s = tape.value(self.scalars).clone();
        let (n, v) = (s.rows(), tape.value(self.vectors[0]).cols());
        let mut data = vec![0.0; n * v * 3];
        for c in 0..3 {
            let comp = tape.value(self.vectors[c]).data();
            for i in 0..n {
                for k in 0..v {
                    data[(i * v + k) * 3 + c] = comp[i * v + k];
                }
            }
        }
        NodeStates {
            scalars: s,
            vectors: Tensor::new(vec![n, v, 3], data).expect("shape"),
        }
    }

    pub fn posterior(&self, tape: &Tape) -> LatentPosterior {
        LatentPosterior {
            mu0: tape.value(self.mu0).data().to_vec(),
            logvar0: tape.value(self.logvar0).data().to_vec(),
            mu1: tape.value(self.mu1).data().to_vec(),
            logvar1: tape.value(self.logvar1).data().to_vec(),
        }
    }
}

/// Indices mapping `[x-block | y-block | z-block]` to channel-major order,
/// for `rows` rows of `v` channels each.
pub(crate) fn interleave_index(rows: usize, v: usize) -> Rc<[usize]> {
    let mut idx = Vec::with_capacity(rows * 3 * v);
    for i in 0..rows {
        for k in 0..v {
            for c in 0..3 {
                idx.push(i * 3 * v + c * v + k);
            }
        }
    }
    Rc::from(idx)
}

/// Directed edges `src -> dst` of the encoder graph.
struct EdgeSet {
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    bonded: Vec<bool>,
    inv_degree: Tensor,
}

fn build_edges(graph: &MoleculeGraph, pos: &Tensor, cutoff: f64) -> EdgeSet {
    let n = graph.atom_count();
    let bonded_pairs = graph.bonded_pairs();
    let d = pos.data();
    let (mut src, mut dst, mut bonded) = (Vec::new(), Vec::new(), Vec::new());
    let mut degree = vec![0usize; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let is_bond = bonded_pairs.contains(&(i.min(j), i.max(j)));
            let r2: f64 = (0..3).map(|k| (d[i * 3 + k] - d[j * 3 + k]).powi(2)).sum();
            if is_bond || r2 < cutoff * cutoff {
                src.push(j);
                dst.push(i);
                bonded.push(is_bond);
                degree[i] += 1;
            }
        }
    }
    EdgeSet {
        src: Rc::from(src),
        dst: Rc::from(dst),
        bonded,
        inv_degree: Tensor::col(degree.iter().map(|&k| 1.0 / k.max(1) as f64).collect()),
    }
}

/// Records the encoder on `tape` for positions `pos` (`n x 3`, Angstrom).
pub fn encode_on_tape(
    tape: &mut Tape,
    pv: &mut ParamVars<'_>,
    dims: &ModelDims,
    graph: &MoleculeGraph,
    pos: Var,
) -> Result<EncoderVars> {
    let n = graph.atom_count();
    if tape.shape(pos) != [n, 3] {
        return Err(Error::Dim(format!(
            "positions {:?} for a {n}-atom graph",
            tape.shape(pos)
        )));
    }
    let (s, v) = (dims.scalar, dims.vector);

    let centroid = tape.mean_rows(pos)?;
    let centered = tape.sub(pos, centroid)?;
    let edges = build_edges(graph, tape.value(centered), dims.cutoff);
    let n_edges = edges.src.len();

    let types: Rc<[usize]> = graph.atom_types().iter().map(|&e| e as usize).collect();
    let embed = pv.get(tape, "enc.embed");
    let mut scalars = tape.gather_rows(embed, &types)?;
    let zero_v = tape.constant(Tensor::zeros(&[n, v]));
    let mut vectors = [zero_v; 3];

    if n_edges > 0 {
        let inv_deg = tape.constant(edges.inv_degree.clone());

        let p_src = tape.gather_rows(centered, &edges.src)?;
        let p_dst = tape.gather_rows(centered, &edges.dst)?;
        let diff = tape.sub(p_src, p_dst)?;
        let sq = tape.square(diff);
        let r2 = tape.sum_cols(sq)?;
        let r = tape.sqrt_eps(r2, VECTOR_NORM_EPS);
        let unit = tape.div(diff, r)?;
        let unit_c = [
            tape.slice(unit, 1, 0, 1)?,
            tape.slice(unit, 1, 1, 2)?,
            tape.slice(unit, 1, 2, 3)?,
        ];

        let spacing = dims.cutoff / (dims.n_rbf - 1) as f64;
        let centers = tape.constant(Tensor::row(
            (0..dims.n_rbf).map(|k| k as f64 * spacing).collect(),
        ));
        let offs = tape.sub(r, centers)?;
        let offs2 = tape.square(offs);
        let arg = tape.scale(offs2, -0.5 / (spacing * spacing));
        let rbf = tape.exp(arg);

        // Bonded edges keep full weight; the others fade out at the cutoff.
        let bond_mask = tape.constant(Tensor::col(
            edges.bonded.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        ));
        let free_mask = tape.constant(Tensor::col(
            edges.bonded.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
        ));
        let phase = tape.scale(r, PI / dims.cutoff);
        let cosine = tape.cos(phase);
        let half = tape.scale(cosine, 0.5);
        let env_free = tape.add_scalar(half, 0.5);
        let env_free = tape.mul(env_free, free_mask)?;
        let envelope = tape.add(env_free, bond_mask)?;

        for t in 0..dims.rounds {
            let name = |x: &str| format!("enc.{t}.{x}");
            let s_src = tape.gather_rows(scalars, &edges.src)?;

            let filt_s = pv.linear(tape, rbf, &name("rbf_s"), None)?;
            let filt_s = tape.mul(filt_s, envelope)?;
            let msg = pv.linear(tape, s_src, &name("msg_w"), Some(&name("msg_b")))?;
            let msg = tape.ssp(msg);
            let msg = tape.mul(msg, filt_s)?;

            let filt_d = pv.linear(tape, rbf, &name("rbf_d"), None)?;
            let filt_d = tape.mul(filt_d, envelope)?;
            let gate_d = pv.linear(tape, s_src, &name("dir_w"), None)?;
            let gate_d = tape.mul(gate_d, filt_d)?;

            let filt_v = pv.linear(tape, rbf, &name("rbf_v"), None)?;
            let filt_v = tape.mul(filt_v, envelope)?;
            let gate_v = pv.linear(tape, s_src, &name("vec_w"), None)?;
            let gate_v = tape.mul(gate_v, filt_v)?;

            let agg = tape.scatter_add_rows(msg, &edges.dst, n)?;
            let agg = tape.mul(agg, inv_deg)?;
            scalars = tape.add(scalars, agg)?;

            for c in 0..3 {
                let dir_part = tape.mul(gate_d, unit_c[c])?;
                let v_src = tape.gather_rows(vectors[c], &edges.src)?;
                let vec_part = tape.mul(gate_v, v_src)?;
                let m = tape.add(dir_part, vec_part)?;
                let agg = tape.scatter_add_rows(m, &edges.dst, n)?;
                let agg = tape.mul(agg, inv_deg)?;
                vectors[c] = tape.add(vectors[c], agg)?;
            }

            // Node update: scalars see vector norms, vectors are gated by scalars.
            let norms = vector_norms(tape, &vectors)?;
            let joint = tape.concat(&[scalars, norms], 1)?;
            let upd = pv.linear(tape, joint, &name("upd_w1"), Some(&name("upd_b1")))?;
            let upd = tape.ssp(upd);
            let upd = pv.linear(tape, upd, &name("upd_w2"), Some(&name("upd_b2")))?;
            scalars = tape.add(scalars, upd)?;

            let gate = pv.linear(tape, scalars, &name("vgate_w"), Some(&name("vgate_b")))?;
            for vc in vectors.iter_mut() {
                let mixed = pv.linear(tape, *vc, &name("vmix"), None)?;
                let gated = tape.mul(mixed, gate)?;
                *vc = tape.add(*vc, gated)?;
            }
        }
    }

    let pooled_s = tape.mean_rows(scalars)?;
    let h = pv.linear(tape, pooled_s, "enc.ro_w1", Some("enc.ro_b1"))?;
    let h = tape.ssp(h);
    let mu0 = pv.linear(tape, h, "enc.ro_mu0_w", Some("enc.ro_mu0_b"))?;
    let lv0 = pv.linear(tape, h, "enc.ro_lv0_w", Some("enc.ro_lv0_b"))?;
    let logvar0 = tape.clamp(lv0, LOGVAR_MIN, LOGVAR_MAX);
    let lv1 = pv.linear(tape, h, "enc.ro_lv1_w", Some("enc.ro_lv1_b"))?;
    let logvar1 = tape.clamp(lv1, LOGVAR_MIN, LOGVAR_MAX);

    let mut mu1_c = [zero_v; 3];
    for c in 0..3 {
        let pooled = tape.mean_rows(vectors[c])?;
        mu1_c[c] = pv.linear(tape, pooled, "enc.mu1_w", None)?;
    }
    let blocks = tape.concat(&mu1_c, 1)?;
    let mu1 = tape.take(blocks, &interleave_index(1, v), vec![1, 3 * v])?;
    debug_assert_eq!(tape.shape(mu0), [1, s]);

    Ok(EncoderVars {
        scalars,
        vectors,
        mu0,
        logvar0,
        mu1,
        logvar1,
    })
}

fn vector_norms(tape: &mut Tape, vectors: &[Var; 3]) -> Result<Var> {
    let x2 = tape.square(vectors[0]);
    let y2 = tape.square(vectors[1]);
    let z2 = tape.square(vectors[2]);
    let xy = tape.add(x2, y2)?;
    let all = tape.add(xy, z2)?;
    Ok(tape.sqrt_eps(all, VECTOR_NORM_EPS))
}

pub(crate) fn positions_tensor(c: &Conformer) -> Tensor {
    Tensor::from_rows(c.positions())
}

fn check_pair(graph: &MoleculeGraph, conformer: &Conformer) -> Result<()> {
    if conformer.atom_count() != graph.atom_count() {
        return Err(Error::Dim(format!(
            "conformer has {} atoms, graph {} has {}",
            conformer.atom_count(),
            graph.id(),
            graph.atom_count()
        )));
    }
    Ok(())
}

/// Runs the encoder without recording gradients.
pub fn encode(
    graph: &MoleculeGraph,
    conformer: &Conformer,
    params: &ParamStore,
    dims: &ModelDims,
) -> Result<(NodeStates, LatentPosterior)> {
    check_pair(graph, conformer)?;
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(params, false);
    let pos = tape.constant(positions_tensor(conformer));
    let out = encode_on_tape(&mut tape, &mut pv, dims, graph, pos)?;
    Ok((out.node_states(&tape), out.posterior(&tape)))
}

/// Reparameterized draw on the tape: `mu + exp(logvar / 2) * eps`, with the
/// vector-channel standard deviation shared by the three components.
pub fn sample_on_tape(
    tape: &mut Tape,
    enc: &EncoderVars,
    noise: Option<&LatentNoise>,
) -> Result<Var> {
    let Some(noise) = noise else {
        return enc.mean_latent(tape);
    };
    let v = tape.shape(enc.logvar1)[1];
    let half0 = tape.scale(enc.logvar0, 0.5);
    let std0 = tape.exp(half0);
    let eps0 = tape.constant(Tensor::row(noise.eps0.clone()));
    let d0 = tape.mul(std0, eps0)?;
    let z0 = tape.add(enc.mu0, d0)?;

    let half1 = tape.scale(enc.logvar1, 0.5);
    let std1 = tape.exp(half1);
    let spread: Rc<[usize]> = (0..3 * v).map(|i| i / 3).collect();
    let std1 = tape.take(std1, &spread, vec![1, 3 * v])?;
    let eps1 = tape.constant(Tensor::row(noise.eps1.clone()));
    let d1 = tape.mul(std1, eps1)?;
    let z1 = tape.add(enc.mu1, d1)?;
    Ok(tape.concat(&[z0, z1], 1)?)
}

/// Draws `z` from the posterior; log-variances are clamped to `>= -20`.
pub fn sample_latent(post: &LatentPosterior, sampling: Sampling) -> LatentVector {
    match sampling {
        Sampling::Deterministic => post.mean(),
        Sampling::Seeded(seed) => {
            let dims = ModelDims {
                scalar: post.scalar_dim(),
                vector: post.vector_dim(),
                ..ModelDims::default()
            };
            let noise = LatentNoise::draw(&dims, seed);
            let std = |lv: f64| (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp();
            let z0 = post
                .mu0
                .iter()
                .zip(&post.logvar0)
                .zip(&noise.eps0)
                .map(|((m, lv), e)| m + std(*lv) * e);
            let z1 = post
                .mu1
                .iter()
                .zip(&noise.eps1)
                .enumerate()
                .map(|(i, (m, e))| m + std(post.logvar1[i / 3]) * e);
            LatentVector::new(z0.chain(z1).collect())
        }
    }
}

/// KL divergence of the posterior from `N(0, I)`.
pub fn kl_on_tape(tape: &mut Tape, enc: &EncoderVars) -> Result<Var> {
    // 0.5 * sum(exp(lv) - 1 - lv) per variance entry, plus 0.5 * sum(mu^2).
    let var_term = |tape: &mut Tape, lv: Var, mult: f64| -> Result<Var> {
        let e = tape.exp(lv);
        let a = tape.sub(e, lv)?;
        let a = tape.add_scalar(a, -1.0);
        let s = tape.sum(a);
        Ok(tape.scale(s, 0.5 * mult))
    };
    let k0 = var_term(tape, enc.logvar0, 1.0)?;
    let k1 = var_term(tape, enc.logvar1, 3.0)?;
    let m0 = tape.square(enc.mu0);
    let m0 = tape.sum(m0);
    let m1 = tape.square(enc.mu1);
    let m1 = tape.sum(m1);
    let m = tape.add(m0, m1)?;
    let m = tape.scale(m, 0.5);
    let k = tape.add(k0, k1)?;
    Ok(tape.add(k, m)?)
}

/// `sum 0.5 (exp(lv) + mu^2 - 1 - lv)` over all latent components.
pub fn kl_divergence(post: &LatentPosterior) -> f64 {
    let term = |mu: f64, lv: f64| 0.5 * (lv.exp() + mu * mu - 1.0 - lv);
    let scalar: f64 = post.mu0.iter().zip(&post.logvar0).map(|(m, lv)| term(*m, *lv)).sum();
    let vector: f64 = post
        .mu1
        .iter()
        .enumerate()
        .map(|(i, m)| term(*m, post.logvar1[i / 3]))
        .sum();
    scalar + vector
}
