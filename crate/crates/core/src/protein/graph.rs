use super::residue::{Residue, NUM_AA_TYPES};
use super::{Level, ProteinStructure};
use crate::error::{Error, Result};
use crate::geometry::{
    build_local_frame, edge_rotation_angle, euler_angles, side_chain_torsions, spherical_coords,
    EdgeGeometry, LocalFrame, SideChainTorsions,
};
use crate::tensor::Tensor;

/// Sequential distances are clamped to `[-SEQDIST_CLAMP, SEQDIST_CLAMP]`.
pub const SEQDIST_CLAMP: i32 = 32;
/// Rows of the sequential-distance embedding table.
pub const SEQDIST_VOCAB: usize = 2 * SEQDIST_CLAMP as usize + 1;

/// Residue graph with cutoff edges and precomputed invariant geometry.
///
/// Edge `(i, j)` means node `i` receives a message from neighbor `j`; its
/// geometry describes `j` as seen from `i`'s frame.
#[derive(Clone, Debug)]
pub struct ProteinGraph {
    pub n: usize,
    pub aa_types: Vec<usize>,
    /// `[n, 21]` one-hot amino-acid types.
    pub node_features: Tensor,
    pub edges: Vec<(usize, usize)>,
    /// `clamp(j - i)` per edge.
    pub edge_seqdist: Vec<i32>,
    pub positions: Vec<Residue>,
    pub level: Level,
    pub cutoff: f64,
    pub geom: Vec<EdgeGeometry>,
    /// Per node, present at [`Level::AllAtom`].
    pub torsions: Option<Vec<SideChainTorsions>>,
}

/// CA-trace frames: node i uses (CA[i-1], CA[i], CA[i+1]); chain ends reuse
/// the axes of their interior neighbor. `None` where no frame exists.
fn ca_frames(residues: &[Residue]) -> Vec<Option<LocalFrame>> {
    let n = residues.len();
    let mut frames: Vec<Option<LocalFrame>> = vec![None; n];
    for i in 1..n.saturating_sub(1) {
        frames[i] =
            build_local_frame(residues[i - 1].ca(), residues[i].ca(), residues[i + 1].ca()).ok();
    }
    if n >= 3 {
        frames[0] = frames[1].map(|f| f.translated_to(residues[0].ca()));
        frames[n - 1] = frames[n - 2].map(|f| f.translated_to(residues[n - 1].ca()));
    }
    frames
}

fn backbone_frames(residues: &[Residue]) -> Result<Vec<LocalFrame>> {
    residues
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let (Some(n), Some(ca), Some(c)) = (r.atom("N"), r.atom("CA"), r.atom("C")) else {
                return Err(Error::MissingBackboneAtoms(i));
            };
            build_local_frame(n, ca, c)
        })
        .collect()
}

fn edge_geometry(
    fi: Option<&LocalFrame>,
    fj: Option<&LocalFrame>,
    ca_i: crate::geometry::Vec3,
    ca_j: crate::geometry::Vec3,
) -> EdgeGeometry {
    let (d, theta, phi) = match fi {
        Some(f) => spherical_coords(f, ca_j),
        None => (ca_i.distance(ca_j), 0.0, 0.0),
    };
    let tau = match (fi, fj) {
        (Some(a), Some(b)) => edge_rotation_angle(a, b).unwrap_or(0.0),
        _ => 0.0,
    };
    EdgeGeometry {
        d,
        theta,
        phi,
        tau,
        euler: None,
    }
}

/// Builds the cutoff graph of `s` at `level`.
pub fn build_graph(s: &ProteinStructure, cutoff: f64, level: Level) -> Result<ProteinGraph> {
    if !(cutoff > 0.0 && cutoff.is_finite()) {
        return Err(Error::Config(format!(
            "cutoff must be positive, got {cutoff}"
        )));
    }
    if s.residues.is_empty() {
        return Err(Error::EmptyStructure);
    }
    let residues = &s.residues;
    let n = residues.len();
    let bb = if level >= Level::Backbone {
        Some(backbone_frames(residues)?)
    } else {
        None
    };
    let frames = ca_frames(residues);

    let mut edges = Vec::new();
    let mut edge_seqdist = Vec::new();
    let mut geom = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let (ca_i, ca_j) = (residues[i].ca(), residues[j].ca());
            if ca_i.distance(ca_j) >= cutoff {
                continue;
            }
            let mut g = edge_geometry(frames[i].as_ref(), frames[j].as_ref(), ca_i, ca_j);
            if let Some(bb) = &bb {
                let (a, b, c) = euler_angles(&bb[i], &bb[j]);
                g.euler = Some([a, b, c]);
            }
            edges.push((i, j));
            edge_seqdist.push((j as i32 - i as i32).clamp(-SEQDIST_CLAMP, SEQDIST_CLAMP));
            geom.push(g);
        }
    }

    let mut one_hot = vec![0.0; n * NUM_AA_TYPES];
    for (i, r) in residues.iter().enumerate() {
        one_hot[i * NUM_AA_TYPES + r.aa_type.min(NUM_AA_TYPES - 1)] = 1.0;
    }
    let torsions =
        (level == Level::AllAtom).then(|| residues.iter().map(side_chain_torsions).collect());

    Ok(ProteinGraph {
        n,
        aa_types: residues.iter().map(|r| r.aa_type).collect(),
        node_features: Tensor::new(vec![n, NUM_AA_TYPES], one_hot)?,
        edges,
        edge_seqdist,
        positions: residues.clone(),
        level,
        cutoff,
        geom,
        torsions,
    })
}

impl ProteinGraph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// For each node, the ids of its incoming edges ordered by ascending
    /// neighbor index, independent of edge storage order.
    pub fn incoming(&self) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); self.n];
        for (e, (i, _)) in self.edges.iter().enumerate() {
            out[*i].push(e);
        }
        for list in &mut out {
            list.sort_by_key(|e| self.edges[*e].1);
        }
        out
    }

    /// Row index into the sequential-distance embedding for edge `e`.
    pub fn seqdist_index(&self, e: usize) -> usize {
        (self.edge_seqdist[e] + SEQDIST_CLAMP) as usize
    }

    /// Same graph with edges stored in `order` (a permutation of edge ids).
    pub fn with_edge_order(&self, order: &[usize]) -> ProteinGraph {
        let mut g = self.clone();
        g.edges = order.iter().map(|e| self.edges[*e]).collect();
        g.edge_seqdist = order.iter().map(|e| self.edge_seqdist[*e]).collect();
        g.geom = order.iter().map(|e| self.geom[*e]).collect();
        g
    }

    /// Relabels node `k` as `perm[k]`, carrying all features along.
    pub fn permuted(&self, perm: &[usize]) -> ProteinGraph {
        assert_eq!(perm.len(), self.n, "permutation length");
        let mut inverse = vec![0; self.n];
        for (old, new) in perm.iter().enumerate() {
            inverse[*new] = old;
        }
        let d = NUM_AA_TYPES;
        let mut one_hot = vec![0.0; self.n * d];
        for (new, old) in inverse.iter().enumerate() {
            one_hot[new * d..(new + 1) * d].copy_from_slice(self.node_features.row(*old));
        }
        ProteinGraph {
            n: self.n,
            aa_types: inverse.iter().map(|o| self.aa_types[*o]).collect(),
            node_features: Tensor::new(vec![self.n, d], one_hot).expect("same size"),
            edges: self
                .edges
                .iter()
                .map(|(i, j)| (perm[*i], perm[*j]))
                .collect(),
            edge_seqdist: self.edge_seqdist.clone(),
            positions: inverse.iter().map(|o| self.positions[*o].clone()).collect(),
            level: self.level,
            cutoff: self.cutoff,
            geom: self.geom.clone(),
            torsions: self
                .torsions
                .as_ref()
                .map(|t| inverse.iter().map(|o| t[*o]).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{SE3Transform, Vec3};
    use crate::harness::synth::random_chain;

    fn ca_only(points: &[Vec3]) -> ProteinStructure {
        let residues = points
            .iter()
            .enumerate()
            .map(|(i, p)| Residue {
                aa_type: i % 20,
                seq_index: i,
                atoms: BTreeMap::from([("CA".to_string(), *p)]),
            })
            .collect();
        ProteinStructure::new("t", residues).unwrap()
    }

    #[test]
    fn cutoff_threshold_straddle() {
        let s = ca_only(&[Vec3::ZERO, Vec3::new(3.8, 0.0, 0.0)]);
        let g = build_graph(&s, 8.0, Level::Base).unwrap();
        assert_eq!(g.edges, vec![(0, 1), (1, 0)]);
        assert_eq!(g.edge_seqdist, vec![1, -1]);
        let g = build_graph(&s, 2.0, Level::Base).unwrap();
        assert!(g.edges.is_empty());
        // Strictly less than the cutoff.
        let g = build_graph(&s, 3.8, Level::Base).unwrap();
        assert!(g.edges.is_empty());
    }

    #[test]
    fn errors() {
        let s = ca_only(&[Vec3::ZERO]);
        assert!(matches!(
            build_graph(&s, 8.0, Level::Backbone),
            Err(Error::MissingBackboneAtoms(0))
        ));
        let empty = ProteinStructure::new("e", Vec::new()).unwrap();
        assert!(matches!(
            build_graph(&empty, 8.0, Level::Base),
            Err(Error::EmptyStructure)
        ));
        assert!(build_graph(&s, 0.0, Level::Base).is_err());
    }

    #[test]
    fn edges_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let s = random_chain("c", 5, &mut rng);
        let g = build_graph(&s, 10.0, Level::Base).unwrap();
        let mut count = 0;
        for a in &s.residues {
            for b in &s.residues {
                if a.seq_index != b.seq_index && a.ca().distance(b.ca()) < 10.0 {
                    count += 1;
                }
            }
        }
        assert_eq!(g.num_edges(), count);
        for (i, j) in &g.edges {
            assert!(g.edges.contains(&(*j, *i)));
        }
        for r in 0..g.n {
            assert_eq!(g.node_features.row(r).iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn features_invariant_under_rigid_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let s = random_chain("c", 12, &mut rng);
        let g0 = build_graph(&s, 10.0, Level::AllAtom).unwrap();
        for _ in 0..5 {
            let t = SE3Transform::random(&mut rng, 30.0);
            let g1 = build_graph(&s.transformed(&t), 10.0, Level::AllAtom).unwrap();
            assert_eq!(g0.edges, g1.edges);
            for (a, b) in g0.geom.iter().zip(&g1.geom) {
                assert!((a.d - b.d).abs() < 1e-9);
                assert!((a.theta - b.theta).abs() < 1e-9);
                assert!(crate::geometry::wrap_angle(a.phi - b.phi).abs() < 1e-9);
                assert!(crate::geometry::wrap_angle(a.tau - b.tau).abs() < 1e-9);
                let (ea, eb) = (a.euler.unwrap(), b.euler.unwrap());
                for k in 0..3 {
                    assert!(crate::geometry::wrap_angle(ea[k] - eb[k]).abs() < 1e-9);
                }
            }
            let (ta, tb) = (g0.torsions.as_ref().unwrap(), g1.torsions.as_ref().unwrap());
            for (a, b) in ta.iter().zip(tb) {
                assert_eq!(a.defined, b.defined);
                for k in 0..4 {
                    assert!(crate::geometry::wrap_angle(a.chi[k] - b.chi[k]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn incoming_is_storage_order_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let s = random_chain("c", 8, &mut rng);
        let g = build_graph(&s, 8.0, Level::Backbone).unwrap();
        let order: Vec<usize> = (0..g.num_edges()).rev().collect();
        let r = g.with_edge_order(&order);
        let neighbors = |g: &ProteinGraph| -> Vec<Vec<usize>> {
            g.incoming()
                .iter()
                .map(|l| l.iter().map(|e| g.edges[*e].1).collect())
                .collect()
        };
        assert_eq!(neighbors(&g), neighbors(&r));
        assert!(neighbors(&g)
            .iter()
            .all(|l| l.windows(2).all(|w| w[0] < w[1])));
    }
}
