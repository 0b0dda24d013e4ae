//! Topology-preserving decoder: the latent joins the molecular graph as an
//! extra node, a relational graph convolution mixes it into every atom, and
//! a small readout maps each atom state to coordinates.
//!
//! Relations are the four bond types plus a "virtual" relation linking the
//! supernode to every atom in both directions. Each layer computes
//! `H W_self + b + sum_r mean_{j -> i, r} H_j W_r`, then shifted softplus and
//! layer normalization with a learned gain and shift. Coordinates come out
//! in the centred unit-RMS frame of the input and are mapped back with its
//! normalization constants.

use std::rc::Rc;

use crate::diffcore::{Tape, Tensor, Var};
use crate::encoder::{
    encode_on_tape, interleave_index, positions_tensor, sample_on_tape, LatentNoise, LatentVector,
    NodeStates, Sampling,
};
use crate::model::{ModelDims, ParamStore, ParamVars, N_RELATIONS};
use crate::molgraph::{Bond, Conformer, MoleculeGraph, NormalizationConstants};
use crate::{Error, Result};

/// Relation index of the supernode edges.
pub const VIRTUAL_RELATION: usize = 4;

/// Input graph of the decoder with the latent attached as node `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderGraph {
    /// Molecule the decoded coordinates belong to.
    pub graph: MoleculeGraph,
    /// `(n + 1) x d` initial node features; the last row is the supernode.
    pub node_features: Tensor,
    /// `(supernode, atom)` pairs, one per atom.
    pub virtual_edges: Vec<(usize, usize)>,
    pub supernode_index: usize,
}

impl DecoderGraph {
    pub fn bonds(&self) -> &[Bond] {
        self.graph.bonds()
    }
}

struct Relation {
    src: Rc<[usize]>,
    dst: Rc<[usize]>,
    inv_degree: Tensor,
}

/// Directed typed edge lists of a decoder graph.
pub(crate) struct Topology {
    atoms: usize,
    relations: Vec<Option<Relation>>,
}

pub(crate) fn topology(graph: &MoleculeGraph) -> Topology {
    let n = graph.atom_count();
    let mut lists: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); N_RELATIONS];
    for b in graph.bonds() {
        let (src, dst) = &mut lists[b.kind.relation()];
        src.extend([b.i, b.j]);
        dst.extend([b.j, b.i]);
    }
    let (src, dst) = &mut lists[VIRTUAL_RELATION];
    for i in 0..n {
        src.extend([n, i]);
        dst.extend([i, n]);
    }
    let relations = lists
        .into_iter()
        .map(|(src, dst)| {
            if src.is_empty() {
                return None;
            }
            let mut degree = vec![0usize; n + 1];
            for &d in &dst {
                degree[d] += 1;
            }
            Some(Relation {
                src: Rc::from(src),
                dst: Rc::from(dst),
                inv_degree: Tensor::col(
                    degree.iter().map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect(),
                ),
            })
        })
        .collect();
    Topology { atoms: n, relations }
}

/// Initial node features: projected `[h_s | h_v]` rows for atoms, projected
/// `z` for the supernode.
pub(crate) fn node_features_on_tape(
    tape: &mut Tape,
    pv: &mut ParamVars<'_>,
    dims: &ModelDims,
    scalars: Var,
    vectors: [Var; 3],
    z: Var,
) -> Result<Var> {
    let n = tape.shape(scalars)[0];
    if tape.shape(z) != [1, dims.latent()] {
        return Err(Error::Dim(format!(
            "latent has shape {:?}, expected [1, {}]",
            tape.shape(z),
            dims.latent()
        )));
    }
    let blocks = tape.concat(&vectors, 1)?;
    let flat = tape.take(blocks, &interleave_index(n, dims.vector), vec![n, 3 * dims.vector])?;
    let skip_in = tape.concat(&[scalars, flat], 1)?;
    let atoms = pv.linear(tape, skip_in, "dec.skip_w", Some("dec.skip_b"))?;
    let sup = pv.linear(tape, z, "dec.z_w", Some("dec.z_b"))?;
    Ok(tape.concat(&[atoms, sup], 0)?)
}

/// Message passing and readout; returns `n x 3` coordinates in the
/// normalized frame.
pub(crate) fn propagate_on_tape(
    tape: &mut Tape,
    pv: &mut ParamVars<'_>,
    dims: &ModelDims,
    topo: &Topology,
    features: Var,
) -> Result<Var> {
    let mut h = features;
    for l in 0..dims.decoder_layers {
        let name = |x: &str| format!("dec.{l}.{x}");
        let mut out = pv.linear(tape, h, &name("self_w"), Some(&name("self_b")))?;
        for (r, rel) in topo.relations.iter().enumerate() {
            let Some(rel) = rel else { continue };
            let hw = pv.linear(tape, h, &name(&format!("rel{r}_w")), None)?;
            let msg = tape.gather_rows(hw, &rel.src)?;
            let agg = tape.scatter_add_rows(msg, &rel.dst, topo.atoms + 1)?;
            let inv = tape.constant(rel.inv_degree.clone());
            let agg = tape.mul(agg, inv)?;
            out = tape.add(out, agg)?;
        }
        let act = tape.ssp(out);
        let normed = tape.layer_norm(act)?;
        let gain = pv.get(tape, &name("ln_g"));
        let shift = pv.get(tape, &name("ln_b"));
        let scaled = tape.mul(normed, gain)?;
        h = tape.add(scaled, shift)?;
    }
    let hid = pv.linear(tape, h, "dec.psi_w1", Some("dec.psi_b1"))?;
    let hid = tape.ssp(hid);
    let coords = pv.linear(tape, hid, "dec.psi_w2", Some("dec.psi_b2"))?;
    Ok(tape.slice(coords, 0, 0, topo.atoms)?)
}

/// Centroid (`1 x 3`) and RMS scale (`1 x 1`) of `pos`, differentiable in
/// `pos`. Single atoms and coincident atoms get a constant scale of 1.
pub(crate) fn normalization_on_tape(tape: &mut Tape, pos: Var) -> Result<(Var, Var)> {
    let centroid = tape.mean_rows(pos)?;
    let centered = tape.sub(pos, centroid)?;
    let sq = tape.square(centered);
    let per_atom = tape.sum_cols(sq)?;
    let ms = tape.mean(per_atom);
    let n = tape.shape(pos)[0];
    let scale = if n == 1 || tape.scalar(ms).sqrt() <= 1e-12 {
        tape.constant(Tensor::scalar(1.0))
    } else {
        tape.sqrt_eps(ms, 0.0)
    };
    Ok((centroid, scale))
}

pub(crate) fn denormalize_on_tape(tape: &mut Tape, p: Var, centroid: Var, scale: Var) -> Result<Var> {
    let scaled = tape.mul(p, scale)?;
    Ok(tape.add(scaled, centroid)?)
}

pub(crate) fn constants_on_tape(tape: &mut Tape, k: &NormalizationConstants) -> (Var, Var) {
    (
        tape.constant(Tensor::row(k.centroid.to_vec())),
        tape.constant(Tensor::scalar(k.scale)),
    )
}

/// `h_phi` as constant tape nodes: scalars and the three component blocks.
pub(crate) fn node_states_on_tape(tape: &mut Tape, h: &NodeStates) -> (Var, [Var; 3]) {
    let n = h.atom_count();
    let v = h.vectors.shape()[1];
    let scalars = tape.constant(h.scalars.clone());
    let blocks = [0, 1, 2].map(|c| {
        let data = (0..n)
            .flat_map(|i| (0..v).map(move |k| (i, k)))
            .map(|(i, k)| h.vector(i, k)[c])
            .collect();
        tape.constant(Tensor::matrix(n, v, data).expect("block shape"))
    });
    (scalars, blocks)
}

fn conformer_from(graph: &MoleculeGraph, t: &Tensor) -> Result<Conformer> {
    let positions = t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Conformer::new(graph, positions)?)
}

pub fn build_decoder_graph(
    graph: &MoleculeGraph,
    h_phi: &NodeStates,
    z: &LatentVector,
    params: &ParamStore,
    dims: &ModelDims,
) -> Result<DecoderGraph> {
    let n = graph.atom_count();
    if h_phi.atom_count() != n || h_phi.scalars.cols() != dims.scalar || h_phi.vectors.shape()[1] != dims.vector {
        return Err(Error::Dim(format!(
            "node states {:?}/{:?} do not match a {n}-atom graph with s={}, v={}",
            h_phi.scalars.shape(),
            h_phi.vectors.shape(),
            dims.scalar,
            dims.vector
        )));
    }
    if z.len() != dims.latent() {
        return Err(Error::Dim(format!("latent length {}, expected {}", z.len(), dims.latent())));
    }
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(params, false);
    let (s, v) = node_states_on_tape(&mut tape, h_phi);
    let zv = tape.constant(z.to_row());
    let feats = node_features_on_tape(&mut tape, &mut pv, dims, s, v, zv)?;
    Ok(DecoderGraph {
        graph: graph.clone(),
        node_features: tape.value(feats).clone(),
        virtual_edges: (0..n).map(|i| (n, i)).collect(),
        supernode_index: n,
    })
}

/// Propagates, projects and maps back to the input frame.
pub fn decode(
    dg: &DecoderGraph,
    norm: &NormalizationConstants,
    params: &ParamStore,
    dims: &ModelDims,
) -> Result<Conformer> {
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(params, false);
    let topo = topology(&dg.graph);
    let feats = tape.constant(dg.node_features.clone());
    let p = propagate_on_tape(&mut tape, &mut pv, dims, &topo, feats)?;
    let (c, s) = constants_on_tape(&mut tape, norm);
    let x = denormalize_on_tape(&mut tape, p, c, s)?;
    conformer_from(&dg.graph, tape.value(x))
}

/// Encode, sample, decode on the same graph.
pub fn reconstruct(
    graph: &MoleculeGraph,
    conformer: &Conformer,
    params: &ParamStore,
    dims: &ModelDims,
    sampling: Sampling,
) -> Result<Conformer> {
    if conformer.atom_count() != graph.atom_count() {
        return Err(Error::Dim(format!(
            "conformer has {} atoms, graph has {}",
            conformer.atom_count(),
            graph.atom_count()
        )));
    }
    let mut tape = Tape::new();
    let mut pv = ParamVars::new(params, false);
    let pos = tape.constant(positions_tensor(conformer));
    let x = reconstruct_on_tape(&mut tape, &mut pv, dims, graph, pos, sampling)?.positions;
    conformer_from(graph, tape.value(x))
}

/// Tape handles of one encode-sample-decode pass.
pub struct Reconstruction {
    pub encoder: crate::encoder::EncoderVars,
    pub z: Var,
    pub positions: Var,
}

pub(crate) fn reconstruct_on_tape(
    tape: &mut Tape,
    pv: &mut ParamVars<'_>,
    dims: &ModelDims,
    graph: &MoleculeGraph,
    pos: Var,
    sampling: Sampling,
) -> Result<Reconstruction> {
    let enc = encode_on_tape(tape, pv, dims, graph, pos)?;
    let noise = match sampling {
        Sampling::Deterministic => None,
        Sampling::Seeded(seed) => Some(LatentNoise::draw(dims, seed)),
    };
    let z = sample_on_tape(tape, &enc, noise.as_ref())?;
    let feats = node_features_on_tape(tape, pv, dims, enc.scalars, enc.vectors, z)?;
    let topo = topology(graph);
    let p = propagate_on_tape(tape, pv, dims, &topo, feats)?;
    let (c, s) = normalization_on_tape(tape, pos)?;
    let positions = denormalize_on_tape(tape, p, c, s)?;
    Ok(Reconstruction {
        encoder: enc,
        z,
        positions,
    })
}

/// Mean over atoms of squared displacement between two `n x 3` tape values.
pub(crate) fn distance_dx_on_tape(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let sq = tape.square(d);
    let per_atom = tape.sum_cols(sq)?;
    Ok(tape.mean(per_atom))
}
