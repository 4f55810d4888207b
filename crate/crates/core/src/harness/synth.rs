//! Synthetic proteins: self-avoiding CA walks with idealized backbone and
//! side-chain atoms, labeled by functions of both sequence and structure.

use std::collections::BTreeMap;
use std::ops::RangeInclusive;

use rand::Rng;
use rand_distr::{Distribution, UnitSphere};

use crate::error::{Error, Result};
use crate::geometry::{build_local_frame, Vec3};
use crate::heads::LigandGraph;
use crate::protein::residue::{chi_atoms, ONE_LETTER};
use crate::protein::{Dataset, Label, Level, ProteinStructure, Record, Residue, Task, TaskKind};
use crate::rng::{stream, tag};

pub const CA_STEP: f64 = 3.8;
/// Minimum CA separation from every earlier non-adjacent residue.
pub const MIN_SEPARATION: f64 = 4.0;
const STEP_TRIES: usize = 200;
const WALK_ATTEMPTS: u64 = 64;

pub const HYDROPHOBIC: &str = "AVILMFWC";
/// Residue types eligible for a positive per-residue label.
pub const SURFACE_TYPES: &str = "DEKRSTNQHY";
pub const CONTACT_RADIUS: f64 = 8.0;
pub const DISTANCE_WEIGHT: f64 = 0.1;
pub const HYDROPHOBIC_WEIGHT: f64 = 1.0;
pub const LIGAND_WEIGHT: f64 = 0.05;
/// Mixed scores in this range are quantized into class buckets.
pub const CLASS_RANGE: (f64, f64) = (0.5, 3.0);
const LIGAND_ELEMENTS: [usize; 4] = [6, 7, 8, 16];

const N_OFFSET: [f64; 3] = [-0.5272, 1.3593, 0.0];
const C_OFFSET: [f64; 3] = [1.5233, 0.0, 0.0];
const O_OFFSET: [f64; 3] = [2.1590, -1.0500, 0.0];
const CB_OFFSET: [f64; 3] = [-0.5290, -0.7740, -1.2050];
const SIDE_BOND: f64 = 1.52;

fn place(origin: Vec3, axes: &[Vec3; 3], offset: [f64; 3]) -> Vec3 {
    origin + axes[0] * offset[0] + axes[1] * offset[1] + axes[2] * offset[2]
}

fn perpendicular(v: Vec3) -> Vec3 {
    let probe = if v.x.abs() < 0.9 {
        Vec3::new(1.0, 0.0, 0.0)
    } else {
        Vec3::new(0.0, 1.0, 0.0)
    };
    let p = probe - v * probe.dot(v);
    p.normalized().expect("probe is not parallel")
}

fn try_walk<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Option<Vec<Vec3>> {
    let mut cas = vec![Vec3::ZERO];
    let mut prev_dir: Option<Vec3> = None;
    while cas.len() < len {
        let last = *cas.last().expect("nonempty");
        let mut placed = false;
        for _ in 0..STEP_TRIES {
            let d: [f64; 3] = UnitSphere.sample(rng);
            let dir = Vec3::new(d[0], d[1], d[2]);
            // Keeps consecutive CA-CA-CA angles away from a straight line or
            // a fold-back.
            if let Some(p) = prev_dir {
                let c = dir.dot(p);
                if !(-0.2..=0.9).contains(&c) {
                    continue;
                }
            }
            let next = last + dir * CA_STEP;
            let clashes = cas[..cas.len() - 1]
                .iter()
                .any(|q| q.distance(next) < MIN_SEPARATION);
            if !clashes {
                cas.push(next);
                prev_dir = Some(dir);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(cas)
}

fn ca_walk(len: usize, base: u64) -> Vec<Vec3> {
    for attempt in 0..WALK_ATTEMPTS {
        let mut rng = stream(base, &[attempt]);
        if let Some(w) = try_walk(len, &mut rng) {
            return w;
        }
    }
    panic!("no self-avoiding walk of length {len} after {WALK_ATTEMPTS} attempts");
}

fn frame_axes(cas: &[Vec3], i: usize) -> [Vec3; 3] {
    let n = cas.len();
    if n >= 3 {
        let k = i.clamp(1, n - 2);
        if let Ok(f) = build_local_frame(cas[k - 1], cas[k], cas[k + 1]) {
            return f.axes;
        }
    }
    let e1 = if n >= 2 {
        (cas[1] - cas[0])
            .normalized()
            .unwrap_or(Vec3::new(1.0, 0.0, 0.0))
    } else {
        Vec3::new(1.0, 0.0, 0.0)
    };
    let e2 = perpendicular(e1);
    [e1, e2, e1.cross(e2)]
}

/// Random chain of `len` residues with N, CA, C, O for every residue, CB for
/// non-glycines and the chi1 gamma atom where the residue type has one.
pub fn random_chain<R: Rng + ?Sized>(id: &str, len: usize, rng: &mut R) -> ProteinStructure {
    let seq: Vec<usize> = (0..len)
        .map(|_| rng.random_range(0..ONE_LETTER.len()))
        .collect();
    chain_with_sequence(id, &seq, rng)
}

/// Like [`random_chain`] with a fixed amino-acid sequence.
pub fn chain_with_sequence<R: Rng + ?Sized>(
    id: &str,
    seq: &[usize],
    rng: &mut R,
) -> ProteinStructure {
    let cas = ca_walk(seq.len(), rng.random());
    let residues = seq
        .iter()
        .enumerate()
        .map(|(i, &aa)| {
            let ca = cas[i];
            let axes = frame_axes(&cas, i);
            let mut atoms = BTreeMap::new();
            atoms.insert("N".to_string(), place(ca, &axes, N_OFFSET));
            atoms.insert("CA".to_string(), ca);
            atoms.insert("C".to_string(), place(ca, &axes, C_OFFSET));
            atoms.insert("O".to_string(), place(ca, &axes, O_OFFSET));
            if ONE_LETTER[aa] != b'G' {
                let cb = place(ca, &axes, CB_OFFSET);
                atoms.insert("CB".to_string(), cb);
                if let Some(quad) = chi_atoms(aa).first() {
                    let d: [f64; 3] = UnitSphere.sample(rng);
                    atoms.insert(
                        quad[3].to_string(),
                        cb + Vec3::new(d[0], d[1], d[2]) * SIDE_BOND,
                    );
                }
            }
            Residue {
                aa_type: aa,
                seq_index: i,
                atoms,
            }
        })
        .collect();
    ProteinStructure::new(id, residues).expect("synthetic residues all have CA")
}

pub fn mean_pairwise_ca_distance(s: &ProteinStructure) -> f64 {
    let n = s.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += s.residues[i].ca().distance(s.residues[j].ca());
            count += 1;
        }
    }
    total / count as f64
}

pub fn hydrophobic_fraction(s: &ProteinStructure) -> f64 {
    let h = s
        .sequence
        .chars()
        .filter(|c| HYDROPHOBIC.contains(*c))
        .count();
    h as f64 / s.len().max(1) as f64
}

/// `DISTANCE_WEIGHT * mean CA distance + HYDROPHOBIC_WEIGHT * hydrophobic fraction`.
pub fn mixed_score(s: &ProteinStructure) -> f64 {
    DISTANCE_WEIGHT * mean_pairwise_ca_distance(s) + HYDROPHOBIC_WEIGHT * hydrophobic_fraction(s)
}

pub fn class_of(score: f64, num_classes: usize) -> usize {
    let (lo, hi) = CLASS_RANGE;
    let t = (score - lo) / (hi - lo) * num_classes as f64;
    (t.floor().max(0.0) as usize).min(num_classes - 1)
}

/// 1 where a residue has more CA contacts than the median residue and its
/// type is in [`SURFACE_TYPES`].
pub fn residue_labels(s: &ProteinStructure) -> Vec<u8> {
    let n = s.len();
    let counts: Vec<usize> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    j != i && s.residues[i].ca().distance(s.residues[j].ca()) < CONTACT_RADIUS
                })
                .count()
        })
        .collect();
    let mut sorted = counts.clone();
    sorted.sort_unstable();
    let median = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    s.sequence
        .chars()
        .zip(&counts)
        .map(|(c, &k)| u8::from(k as f64 > median && SURFACE_TYPES.contains(c)))
        .collect()
}

pub fn random_ligand<R: Rng + ?Sized>(rng: &mut R) -> LigandGraph {
    let n = rng.random_range(3..=8);
    let types = (0..n)
        .map(|_| LIGAND_ELEMENTS[rng.random_range(0..LIGAND_ELEMENTS.len())])
        .collect();
    let mut bonds: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
    if n >= 5 && rng.random_bool(0.5) {
        bonds.push((0, n - 1));
    }
    LigandGraph::new(types, bonds).expect("valid by construction")
}

/// Options for [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub task: Task,
    pub n_proteins: usize,
    pub lengths: RangeInclusive<usize>,
    pub seed: u64,
    pub level: Level,
    pub num_classes: usize,
}

impl SynthSpec {
    pub fn new(task: Task, n_proteins: usize, lengths: RangeInclusive<usize>, seed: u64) -> Self {
        SynthSpec {
            task,
            n_proteins,
            lengths,
            seed,
            level: Level::Base,
            num_classes: 8,
        }
    }
}

/// Generates a labeled dataset. Protein `i` depends only on `(seed, i)`.
pub fn generate_synthetic(spec: &SynthSpec) -> Result<Dataset> {
    if spec.n_proteins == 0 {
        return Err(Error::Config("n_proteins must be at least 1".into()));
    }
    if spec.lengths.is_empty() || *spec.lengths.start() == 0 {
        return Err(Error::Config(format!(
            "bad length range {:?}",
            spec.lengths
        )));
    }
    if spec.task.kind() == TaskKind::Classification && spec.num_classes < 2 {
        return Err(Error::Config(
            "classification needs at least 2 classes".into(),
        ));
    }
    let records = (0..spec.n_proteins)
        .map(|i| {
            let mut rng = stream(spec.seed, &[tag::DATA, i as u64]);
            let len = rng.random_range(spec.lengths.clone());
            let structure = random_chain(&format!("syn{i:04}"), len, &mut rng);
            let score = mixed_score(&structure);
            let (label, ligand, residue_labels) = match spec.task {
                Task::Mqa => (Label::Scalar(score), None, None),
                Task::Reaction => (Label::Class(class_of(score, spec.num_classes)), None, None),
                Task::Lba => {
                    let lig = random_ligand(&mut rng);
                    let label = score + LIGAND_WEIGHT * lig.len() as f64;
                    (Label::Scalar(label), Some(lig), None)
                }
                Task::Ppbs | Task::Bce => (Label::None, None, Some(residue_labels(&structure))),
            };
            Record {
                structure,
                label,
                ligand,
                residue_labels,
            }
        })
        .collect();
    Ok(Dataset::new(spec.task, spec.level, records))
}
