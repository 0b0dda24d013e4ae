//! Random small molecules with a geometry-determined target.
//!
//! Graphs are trees grown atom by atom; coordinates follow the growth with
//! bond lengths in 1.0-1.8 Angstrom and roughly tetrahedral bond angles.
//! The label is a sum of pairwise Gaussians of interatomic distance, so it
//! only depends on the internal geometry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{Bond, BondType, Conformer, LabeledExample, MoleculeGraph};

/// Element codes drawn by the generator (C, N, O, S).
pub const SYNTHETIC_ELEMENTS: [u32; 4] = [6, 7, 8, 16];

const LABEL_CENTER: f64 = 2.5;
const LABEL_WIDTH: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Standard deviation of Gaussian noise added to labels.
    pub label_noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            min_atoms: 4,
            max_atoms: 16,
            label_noise: 0.02,
        }
    }
}

fn element_weight(e: u32) -> f64 {
    match e {
        6 => 1.0,
        7 => 1.4,
        8 => 0.6,
        16 => 1.8,
        _ => 1.0,
    }
}

/// Noise-free target: `(1/n) sum_{i<j} w_i w_j exp(-(d_ij - 2.5)^2 / (2 * 0.6^2))`.
pub fn synthetic_label(atom_types: &[u32], positions: &[[f64; 3]]) -> f64 {
    let n = positions.len();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d = (0..3)
                .map(|k| (positions[i][k] - positions[j][k]).powi(2))
                .sum::<f64>()
                .sqrt();
            let g = (-(d - LABEL_CENTER).powi(2) / (2.0 * LABEL_WIDTH * LABEL_WIDTH)).exp();
            total += element_weight(atom_types[i]) * element_weight(atom_types[j]) * g;
        }
    }
    total / n as f64
}

pub fn make_synthetic_dataset(n_molecules: usize, seed: u64) -> Vec<LabeledExample> {
    make_synthetic_dataset_with(n_molecules, seed, &SyntheticConfig::default())
}

pub fn make_synthetic_dataset_with(
    n_molecules: usize,
    seed: u64,
    cfg: &SyntheticConfig,
) -> Vec<LabeledExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_molecules)
        .map(|idx| generate_one(&mut rng, format!("mol-{idx:05}"), cfg))
        .collect()
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [0; 3].map(|_| StandardNormal.sample(rng));
        if norm(v) > 1e-6 {
            return unit(v);
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn bond_length(kind: BondType, rng: &mut ChaCha8Rng) -> f64 {
    let base = match kind {
        BondType::Single => 1.52,
        BondType::Double => 1.34,
        BondType::Triple => 1.20,
        BondType::Aromatic => 1.40,
    };
    (base + rng.random_range(-0.08..0.08f64)).clamp(1.0, 1.8)
}

fn generate_one(rng: &mut ChaCha8Rng, id: String, cfg: &SyntheticConfig) -> LabeledExample {
    let n = rng.random_range(cfg.min_atoms..=cfg.max_atoms);
    let n_elements = rng.random_range(2..=4);
    let mut palette = SYNTHETIC_ELEMENTS.to_vec();
    for i in (1..palette.len()).rev() {
        palette.swap(i, rng.random_range(0..=i));
    }
    palette.truncate(n_elements);

    let mut atoms = Vec::with_capacity(n);
    let mut parent = vec![usize::MAX; n];
    let mut degree = vec![0usize; n];
    let mut bonds = Vec::with_capacity(n.saturating_sub(1));
    let mut positions: Vec<[f64; 3]> = Vec::with_capacity(n);

    atoms.push(palette[0]);
    positions.push([0.0; 3]);
    for i in 1..n {
        atoms.push(palette[rng.random_range(0..palette.len())]);
        let p = if rng.random_bool(0.7) && degree[i - 1] < 3 {
            i - 1
        } else {
            let open: Vec<usize> = (0..i).filter(|&k| degree[k] < 3).collect();
            if open.is_empty() {
                i - 1
            } else {
                open[rng.random_range(0..open.len())]
            }
        };
        let r: f64 = rng.random();
        let kind = if r < 0.75 {
            BondType::Single
        } else if r < 0.88 {
            BondType::Double
        } else if r < 0.96 {
            BondType::Aromatic
        } else {
            BondType::Triple
        };
        parent[i] = p;
        degree[p] += 1;
        degree[i] += 1;
        bonds.push(Bond { i: p, j: i, kind });

        let len = bond_length(kind, rng);
        let mut best = None;
        let mut best_clearance = f64::NEG_INFINITY;
        for _ in 0..40 {
            let dir = if parent[p] == usize::MAX {
                random_unit(rng)
            } else {
                // Angle to the parent's own bond near the tetrahedral value.
                let back = unit([0, 1, 2].map(|k| positions[parent[p]][k] - positions[p][k]));
                let mut perp = cross(back, random_unit(rng));
                while norm(perp) < 1e-6 {
                    perp = cross(back, random_unit(rng));
                }
                let perp = unit(perp);
                let jitter = Normal::new(0.0, 6f64.to_radians()).unwrap().sample(rng);
                let theta = 109.5f64.to_radians() + jitter;
                [0, 1, 2].map(|k| theta.cos() * back[k] + theta.sin() * perp[k])
            };
            let cand = [0, 1, 2].map(|k| positions[p][k] + len * dir[k]);
            let clearance = positions
                .iter()
                .enumerate()
                .filter(|(k, _)| *k != p)
                .map(|(_, q)| norm([0, 1, 2].map(|k| cand[k] - q[k])))
                .fold(f64::INFINITY, f64::min);
            if clearance > best_clearance {
                best_clearance = clearance;
                best = Some(cand);
            }
            if clearance >= 2.2 {
                break;
            }
        }
        positions.push(best.expect("at least one candidate"));
    }

    let offset = [0; 3].map(|_| rng.random_range(-3.0..3.0));
    for p in &mut positions {
        for k in 0..3 {
            p[k] += offset[k];
        }
    }

    let mut label = synthetic_label(&atoms, &positions);
    if cfg.label_noise > 0.0 {
        let e: f64 = StandardNormal.sample(rng);
        label += cfg.label_noise * e;
    }
    let graph = MoleculeGraph::new(id, atoms, bonds).expect("generated tree is valid");
    let conformer = Conformer::new(&graph, positions).expect("finite positions");
    LabeledExample::new(graph, conformer, label).expect("finite label")
}
