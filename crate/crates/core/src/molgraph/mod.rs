//! Molecular graphs, conformers, dataset ingestion and geometry utilities.

mod synthetic;

use std::collections::{BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use synthetic::{
    make_synthetic_dataset, make_synthetic_dataset_with, synthetic_label, SyntheticConfig,
    SYNTHETIC_ELEMENTS,
};

/// Largest element code accepted.
pub const MAX_ELEMENT: u32 = 118;

#[derive(Debug, thiserror::Error)]
pub enum MolError {
    #[error("bond {index} ({i}, {j}): {reason}")]
    InvalidBond {
        index: usize,
        i: usize,
        j: usize,
        reason: &'static str,
    },
    #[error("graph has no atoms")]
    NoAtoms,
    #[error("element code {0} outside 1..={MAX_ELEMENT}")]
    Element(u32),
    #[error("graph is disconnected ({components} components)")]
    Disconnected { components: usize },
    #[error("conformer has {positions} positions but graph has {atoms} atoms")]
    AtomCount { positions: usize, atoms: usize },
    #[error("non-finite coordinate at atom {atom}")]
    NonFinite { atom: usize },
    #[error("conformers belong to different graphs ({0} vs {1})")]
    GraphMismatch(String, String),
    #[error("label is not finite")]
    Label,
    #[error("noise scale must be non-negative, got {0}")]
    NegativeTau(f64),
    #[error("record {index}: {source}")]
    Record {
        index: usize,
        #[source]
        source: Box<MolError>,
    },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate molecule id {0:?}")]
    DuplicateId(String),
    #[error("malformed dataset: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondType {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondType {
    pub const ALL: [BondType; 4] = [
        BondType::Single,
        BondType::Double,
        BondType::Triple,
        BondType::Aromatic,
    ];

    /// Relation index used by the decoder; the virtual relation is 4.
    pub fn relation(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub kind: BondType,
}

/// Atoms and typed bonds of one molecule. Immutable once validated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MoleculeGraph {
    id: String,
    atom_types: Vec<u32>,
    bonds: Vec<Bond>,
}

impl MoleculeGraph {
    pub fn new(id: impl Into<String>, atom_types: Vec<u32>, bonds: Vec<Bond>) -> Result<Self, MolError> {
        let n = atom_types.len();
        if n == 0 {
            return Err(MolError::NoAtoms);
        }
        if let Some(&e) = atom_types.iter().find(|&&e| e == 0 || e > MAX_ELEMENT) {
            return Err(MolError::Element(e));
        }
        let mut seen = HashSet::new();
        for (index, b) in bonds.iter().enumerate() {
            let bad = |reason| MolError::InvalidBond {
                index,
                i: b.i,
                j: b.j,
                reason,
            };
            if b.i >= n || b.j >= n {
                return Err(bad("endpoint out of range"));
            }
            if b.i == b.j {
                return Err(bad("self loop"));
            }
            if !seen.insert((b.i.min(b.j), b.i.max(b.j))) {
                return Err(bad("duplicate bond"));
            }
        }
        let graph = Self {
            id: id.into(),
            atom_types,
            bonds,
        };
        let components = graph.component_count();
        if components != 1 {
            return Err(MolError::Disconnected { components });
        }
        Ok(graph)
    }

    fn component_count(&self) -> usize {
        let n = self.atom_types.len();
        let adj = self.adjacency();
        let mut seen = vec![false; n];
        let mut components = 0;
        for start in 0..n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &w in &adj[u] {
                    if !seen[w] {
                        seen[w] = true;
                        queue.push_back(w);
                    }
                }
            }
        }
        components
    }

    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.atom_types.len()];
        for b in &self.bonds {
            adj[b.i].push(b.j);
            adj[b.j].push(b.i);
        }
        adj
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn atom_types(&self) -> &[u32] {
        &self.atom_types
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn atom_count(&self) -> usize {
        self.atom_types.len()
    }

    /// Unordered bonded pairs.
    pub fn bonded_pairs(&self) -> BTreeSet<(usize, usize)> {
        self.bonds.iter().map(|b| (b.i.min(b.j), b.i.max(b.j))).collect()
    }
}

/// Cartesian positions (Angstrom) of the atoms of one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct Conformer {
    graph_id: String,
    positions: Vec<[f64; 3]>,
}

impl Conformer {
    pub fn new(graph: &MoleculeGraph, positions: Vec<[f64; 3]>) -> Result<Self, MolError> {
        if positions.len() != graph.atom_count() {
            return Err(MolError::AtomCount {
                positions: positions.len(),
                atoms: graph.atom_count(),
            });
        }
        Self::unchecked_count(graph.id(), positions)
    }

    fn unchecked_count(graph_id: &str, positions: Vec<[f64; 3]>) -> Result<Self, MolError> {
        if let Some(atom) = positions.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(MolError::NonFinite { atom });
        }
        Ok(Self {
            graph_id: graph_id.to_string(),
            positions,
        })
    }

    pub fn graph_id(&self) -> &str {
        &self.graph_id
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn atom_count(&self) -> usize {
        self.positions.len()
    }

    /// Same graph, new coordinates.
    pub fn with_positions(&self, positions: Vec<[f64; 3]>) -> Result<Self, MolError> {
        if positions.len() != self.positions.len() {
            return Err(MolError::AtomCount {
                positions: positions.len(),
                atoms: self.positions.len(),
            });
        }
        Self::unchecked_count(&self.graph_id, positions)
    }

    pub fn translated(&self, t: [f64; 3]) -> Self {
        Self {
            graph_id: self.graph_id.clone(),
            positions: self
                .positions
                .iter()
                .map(|p| [p[0] + t[0], p[1] + t[1], p[2] + t[2]])
                .collect(),
        }
    }

    /// Applies `p -> R p` to every position (`r` row-major).
    pub fn rotated(&self, r: &[[f64; 3]; 3]) -> Self {
        Self {
            graph_id: self.graph_id.clone(),
            positions: self.positions.iter().map(|p| rotate(r, p)).collect(),
        }
    }
}

pub fn rotate(r: &[[f64; 3]; 3], p: &[f64; 3]) -> [f64; 3] {
    [
        r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
        r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
        r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
    ]
}

/// Frame used to map positions to and from the centred, unit-RMS frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationConstants {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl NormalizationConstants {
    pub const IDENTITY: Self = Self {
        centroid: [0.0; 3],
        scale: 1.0,
    };
}

#[derive(Clone, Debug)]
pub struct Normalized {
    pub conformer: Conformer,
    pub constants: NormalizationConstants,
    /// Set when several atoms all coincide and the scale was clamped to 1.
    pub degenerate: bool,
}

pub fn centroid(positions: &[[f64; 3]]) -> [f64; 3] {
    let n = positions.len() as f64;
    let mut c = [0.0; 3];
    for p in positions {
        for k in 0..3 {
            c[k] += p[k];
        }
    }
    c.map(|v| v / n)
}

/// Centres the conformer and divides by the RMS distance to the centroid.
pub fn normalize_positions(c: &Conformer) -> Normalized {
    let ctr = centroid(&c.positions);
    let n = c.positions.len();
    let ms = c
        .positions
        .iter()
        .map(|p| (0..3).map(|k| (p[k] - ctr[k]).powi(2)).sum::<f64>())
        .sum::<f64>()
        / n as f64;
    let rms = ms.sqrt();
    let (scale, degenerate) = if n == 1 {
        (1.0, false)
    } else if rms <= 1e-12 {
        (1.0, true)
    } else {
        (rms, false)
    };
    let positions = c
        .positions
        .iter()
        .map(|p| [0, 1, 2].map(|k| (p[k] - ctr[k]) / scale))
        .collect();
    Normalized {
        conformer: Conformer {
            graph_id: c.graph_id.clone(),
            positions,
        },
        constants: NormalizationConstants {
            centroid: ctr,
            scale,
        },
        degenerate,
    }
}

pub fn denormalize_positions(c: &Conformer, k: &NormalizationConstants) -> Conformer {
    Conformer {
        graph_id: c.graph_id.clone(),
        positions: c
            .positions
            .iter()
            .map(|p| [0, 1, 2].map(|i| p[i] * k.scale + k.centroid[i]))
            .collect(),
    }
}

/// Adds i.i.d. `N(0, tau^2)` noise (Angstrom) to every coordinate.
pub fn contaminate(c: &Conformer, tau: f64, seed: u64) -> Result<Conformer, MolError> {
    if tau < 0.0 || tau.is_nan() {
        return Err(MolError::NegativeTau(tau));
    }
    if tau == 0.0 {
        return Ok(c.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = c
        .positions
        .iter()
        .map(|p| {
            [0, 1, 2].map(|k| {
                let e: f64 = StandardNormal.sample(&mut rng);
                p[k] + tau * e
            })
        })
        .collect();
    c.with_positions(positions)
}

fn check_pair(a: &Conformer, b: &Conformer) -> Result<(), MolError> {
    if a.graph_id != b.graph_id {
        return Err(MolError::GraphMismatch(a.graph_id.clone(), b.graph_id.clone()));
    }
    if a.positions.len() != b.positions.len() {
        return Err(MolError::AtomCount {
            positions: b.positions.len(),
            atoms: a.positions.len(),
        });
    }
    Ok(())
}

/// Mean over atoms of the squared displacement, without alignment.
pub fn distance_dx(a: &Conformer, b: &Conformer) -> Result<f64, MolError> {
    check_pair(a, b)?;
    let total: f64 = a
        .positions
        .iter()
        .zip(&b.positions)
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum();
    Ok(total / a.positions.len() as f64)
}

/// `sqrt(distance_dx)`.
pub fn rmsd(a: &Conformer, b: &Conformer) -> Result<f64, MolError> {
    distance_dx(a, b).map(f64::sqrt)
}

/// A graph, one conformer of it and a regression target.
#[derive(Clone, Debug)]
pub struct LabeledExample {
    pub graph: Arc<MoleculeGraph>,
    pub conformer: Conformer,
    pub label: f64,
    /// Optional split tag carried by file datasets ("train" / "test").
    pub split: Option<String>,
}

impl LabeledExample {
    pub fn new(graph: MoleculeGraph, conformer: Conformer, label: f64) -> Result<Self, MolError> {
        if !label.is_finite() {
            return Err(MolError::Label);
        }
        if conformer.graph_id() != graph.id() {
            return Err(MolError::GraphMismatch(
                graph.id().to_string(),
                conformer.graph_id().to_string(),
            ));
        }
        if conformer.atom_count() != graph.atom_count() {
            return Err(MolError::AtomCount {
                positions: conformer.atom_count(),
                atoms: graph.atom_count(),
            });
        }
        Ok(Self {
            graph: Arc::new(graph),
            conformer,
            label,
            split: None,
        })
    }

    pub fn id(&self) -> &str {
        self.graph.id()
    }
}

/// One record of the JSON dataset format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub id: String,
    pub atoms: Vec<u32>,
    pub bonds: Vec<(usize, usize, BondType)>,
    pub positions: Vec<[f64; 3]>,
    pub label: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl DatasetRecord {
    pub fn from_example(e: &LabeledExample) -> Self {
        Self {
            id: e.id().to_string(),
            atoms: e.graph.atom_types().to_vec(),
            bonds: e.graph.bonds().iter().map(|b| (b.i, b.j, b.kind)).collect(),
            positions: e.conformer.positions().to_vec(),
            label: e.label,
            split: e.split.clone(),
        }
    }

    pub fn into_example(self) -> Result<LabeledExample, MolError> {
        let bonds = self
            .bonds
            .iter()
            .map(|&(i, j, kind)| Bond { i, j, kind })
            .collect();
        let graph = MoleculeGraph::new(self.id, self.atoms, bonds)?;
        let conformer = Conformer::new(&graph, self.positions)?;
        let mut ex = LabeledExample::new(graph, conformer, self.label)?;
        ex.split = self.split;
        Ok(ex)
    }
}

/// Parses a JSON list of records, validating each one.
pub fn parse_dataset_str(text: &str) -> Result<Vec<LabeledExample>, MolError> {
    let raw: Vec<serde_json::Value> = serde_json::from_str(text)?;
    let mut ids = HashSet::new();
    let mut out = Vec::with_capacity(raw.len());
    for (index, value) in raw.into_iter().enumerate() {
        let wrap = |e: MolError| MolError::Record {
            index,
            source: Box::new(e),
        };
        let record: DatasetRecord = serde_json::from_value(value).map_err(|e| wrap(e.into()))?;
        let ex = record.into_example().map_err(wrap)?;
        if !ids.insert(ex.id().to_string()) {
            return Err(wrap(MolError::DuplicateId(ex.id().to_string())));
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn parse_dataset(path: &Path) -> Result<Vec<LabeledExample>, MolError> {
    parse_dataset_str(&fs::read_to_string(path)?)
}

pub fn write_dataset(path: &Path, examples: &[LabeledExample]) -> Result<(), MolError> {
    let records: Vec<_> = examples.iter().map(DatasetRecord::from_example).collect();
    fs::write(path, serde_json::to_string_pretty(&records)?)?;
    Ok(())
}

/// Where a dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic {
        n_molecules: usize,
        seed: u64,
        #[serde(default)]
        generator: SyntheticConfig,
    },
    File {
        path: std::path::PathBuf,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        Self::Synthetic {
            n_molecules: 400,
            seed: 0,
            generator: SyntheticConfig::default(),
        }
    }
}

impl DatasetSource {
    pub fn load(&self) -> Result<Vec<LabeledExample>, MolError> {
        match self {
            Self::Synthetic {
                n_molecules,
                seed,
                generator,
            } => {
                if *n_molecules == 0 {
                    return Err(MolError::EmptyDataset);
                }
                Ok(make_synthetic_dataset_with(*n_molecules, *seed, generator))
            }
            Self::File { path } => parse_dataset(path),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize) -> MoleculeGraph {
        let bonds = (1..n)
            .map(|i| Bond {
                i: i - 1,
                j: i,
                kind: BondType::Single,
            })
            .collect();
        MoleculeGraph::new("chain", vec![6; n], bonds).unwrap()
    }

    #[test]
    fn rejects_bad_graphs() {
        let b = |i, j| Bond {
            i,
            j,
            kind: BondType::Single,
        };
        assert!(matches!(
            MoleculeGraph::new("x", vec![6, 6], vec![]),
            Err(MolError::Disconnected { components: 2 })
        ));
        assert!(MoleculeGraph::new("x", vec![6], vec![]).is_ok());
        assert!(MoleculeGraph::new("x", vec![6, 6], vec![b(0, 0)]).is_err());
        assert!(MoleculeGraph::new("x", vec![6, 6], vec![b(0, 2)]).is_err());
        assert!(MoleculeGraph::new("x", vec![6, 6], vec![b(0, 1), b(1, 0)]).is_err());
        assert!(MoleculeGraph::new("x", vec![], vec![]).is_err());
    }

    #[test]
    fn parse_valid_chain() {
        let text = r#"[{"id": "m1", "atoms": [6, 7, 8],
            "bonds": [[0, 1, "single"], [1, 2, "double"]],
            "positions": [[0,0,0],[1.4,0,0],[2.1,1.1,0]], "label": 0.5}]"#;
        let data = parse_dataset_str(text).unwrap();
        assert_eq!(data.len(), 1);
        assert_eq!(data[0].conformer.atom_count(), 3);
        assert_eq!(data[0].graph.bonds()[1].kind, BondType::Double);
    }

    #[test]
    fn parse_rejects_disconnected_nan_and_duplicates() {
        let disconnected = r#"[{"id": "m1", "atoms": [6, 6], "bonds": [],
            "positions": [[0,0,0],[1,0,0]], "label": 0.5}]"#;
        let err = parse_dataset_str(disconnected).unwrap_err();
        assert!(matches!(err, MolError::Record { index: 0, .. }), "{err}");
        assert!(err.to_string().contains("disconnected"));

        // JSON has no NaN literal; a NaN from upstream tooling arrives as a
        // string or null and must fail as a malformed record.
        let nan = r#"[{"id": "m1", "atoms": [6], "bonds": [],
            "positions": [[NaN, 0, 0]], "label": 0.5}]"#;
        assert!(parse_dataset_str(nan).is_err());
        let nan_null = r#"[{"id": "m1", "atoms": [6], "bonds": [],
            "positions": [[null, 0, 0]], "label": 0.5}]"#;
        assert!(parse_dataset_str(nan_null).is_err());

        let dup = r#"[{"id": "a", "atoms": [6], "bonds": [], "positions": [[0,0,0]], "label": 1},
                      {"id": "a", "atoms": [6], "bonds": [], "positions": [[0,0,0]], "label": 2}]"#;
        let err = parse_dataset_str(dup).unwrap_err();
        assert!(matches!(err, MolError::Record { index: 1, .. }), "{err}");
    }

    #[test]
    fn conformer_rejects_nan() {
        let g = chain(2);
        assert!(matches!(
            Conformer::new(&g, vec![[0.0; 3], [f64::NAN, 0.0, 0.0]]),
            Err(MolError::NonFinite { atom: 1 })
        ));
        assert!(Conformer::new(&g, vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let g = chain(2);
        let c = Conformer::new(&g, vec![[1., 1., 1.], [3., 1., 1.]]).unwrap();
        let n = normalize_positions(&c);
        assert_eq!(n.constants.centroid, [2., 1., 1.]);
        assert_eq!(n.constants.scale, 1.0);
        assert_eq!(n.conformer.positions(), &[[-1., 0., 0.], [1., 0., 0.]]);
        assert!(!n.degenerate);

        let again = normalize_positions(&n.conformer);
        assert_eq!(again.conformer, n.conformer);
        assert_eq!(again.constants, NormalizationConstants::IDENTITY);

        let single = Conformer::new(&chain(1), vec![[5., 0., 0.]]).unwrap();
        let s = normalize_positions(&single);
        assert_eq!(s.conformer.positions(), &[[0., 0., 0.]]);
        assert_eq!(s.constants.centroid, [5., 0., 0.]);
        assert_eq!(s.constants.scale, 1.0);
        assert!(!s.degenerate);

        let coincident = Conformer::new(&g, vec![[2., 2., 2.]; 2]).unwrap();
        let d = normalize_positions(&coincident);
        assert!(d.degenerate);
        assert_eq!(d.constants.scale, 1.0);
    }

    #[test]
    fn contaminate_examples() {
        let g = chain(3);
        let c = Conformer::new(&g, vec![[0., 0., 0.], [1.5, 0., 0.], [2.3, 1.2, 0.]]).unwrap();
        assert_eq!(contaminate(&c, 0.0, 9).unwrap(), c);
        assert_eq!(contaminate(&c, 0.3, 9).unwrap(), contaminate(&c, 0.3, 9).unwrap());
        assert_ne!(contaminate(&c, 0.3, 9).unwrap(), contaminate(&c, 0.3, 10).unwrap());
        assert!(matches!(contaminate(&c, -0.1, 1), Err(MolError::NegativeTau(_))));
    }

    #[test]
    fn distance_examples() {
        let g = chain(2);
        let a = Conformer::new(&g, vec![[0., 0., 0.], [1., 0., 0.]]).unwrap();
        let b = Conformer::new(&g, vec![[0., 0., 0.], [1., 0., 2.]]).unwrap();
        assert_eq!(distance_dx(&a, &a).unwrap(), 0.0);
        assert_eq!(rmsd(&a, &a).unwrap(), 0.0);
        assert_eq!(distance_dx(&a, &b).unwrap(), 2.0);
        assert_eq!(rmsd(&a, &b).unwrap(), 2f64.sqrt());
        let other = Conformer::new(&chain(3), vec![[0.; 3]; 3]).unwrap();
        assert!(distance_dx(&a, &other).is_err());
    }
}
