//! Structure branch: message passing over the cutoff graph using invariant
//! edge geometry.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::EdgeGeometry;
use crate::protein::residue::NUM_AA_TYPES;
use crate::protein::{Level, ProteinGraph, SEQDIST_VOCAB};
use crate::tensor::{Graph, Linear, Mlp, ParamId, ParamStore, Tensor, Var};

/// Width of the per-node side-chain torsion features.
pub const TORSION_FEATURES: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct GnnConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub rbf_count: usize,
    pub cutoff: f64,
    pub level: Level,
    pub seqdist_dim: usize,
    pub gaussian_noise: bool,
    pub euler_noise: bool,
    pub noise_sigma: f64,
    pub dropout_p: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            hidden_dim: 16,
            num_layers: 2,
            rbf_count: 8,
            cutoff: 10.0,
            level: Level::Base,
            seqdist_dim: 4,
            gaussian_noise: false,
            euler_noise: false,
            noise_sigma: 0.02,
            dropout_p: 0.0,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 {
            return Err(Error::Config("hidden_dim must be positive".into()));
        }
        if self.rbf_count < 4 {
            return Err(Error::Config(format!(
                "rbf_count must be at least 4, got {}",
                self.rbf_count
            )));
        }
        if !(self.cutoff > 0.0 && self.cutoff.is_finite()) {
            return Err(Error::Config(format!(
                "cutoff must be positive, got {}",
                self.cutoff
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "noise_sigma must be nonnegative, got {}",
                self.noise_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Number of angles encoded per edge.
    pub fn num_angles(&self) -> usize {
        if self.level >= Level::Backbone {
            6
        } else {
            3
        }
    }

    /// Width of the fixed (non-learned) part of an edge feature.
    pub fn geometric_feature_dim(&self) -> usize {
        self.rbf_count + 2 * self.num_angles()
    }

    pub fn edge_feature_dim(&self) -> usize {
        self.geometric_feature_dim() + self.seqdist_dim
    }
}

/// Gaussian radial basis of `d`: centers evenly spaced on `[0, cutoff]`,
/// width `cutoff / count`.
pub fn rbf(d: f64, cutoff: f64, count: usize) -> Vec<f64> {
    let width = cutoff / count as f64;
    (0..count)
        .map(|k| {
            let center = cutoff * k as f64 / (count - 1) as f64;
            let z = (d - center) / width;
            (-z * z).exp()
        })
        .collect()
}

/// RBF of the distance followed by `(sin, cos)` of theta, phi, tau and, at
/// backbone level and above, of the three Euler angles. `euler_offset` is
/// added to the Euler angles first.
pub fn encode_edge_geometry(
    geom: &EdgeGeometry,
    cfg: &GnnConfig,
    euler_offset: [f64; 3],
) -> Result<Vec<f64>> {
    let mut out = rbf(geom.d, cfg.cutoff, cfg.rbf_count);
    let mut angles = vec![geom.theta, geom.phi, geom.tau];
    if cfg.level >= Level::Backbone {
        let e = geom.euler.ok_or_else(|| {
            Error::shape(
                "encode_edge_geometry",
                format!("no Euler angles at level {}", cfg.level),
            )
        })?;
        angles.extend(e.iter().zip(euler_offset).map(|(a, o)| a + o));
    }
    for a in angles {
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// Per-layer node representations `u[0..=L]`, each `[n, hidden_dim]`.
#[derive(Clone, Debug)]
pub struct GnnState {
    pub layers: Vec<Var>,
}

impl GnnState {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("a state holds at least u0")
    }
}

#[derive(Clone, Debug)]
pub struct InteractionBlock {
    pub message: Mlp,
    pub update: Mlp,
}

/// Edge features and aggregation lists shared by every block of one pass.
#[derive(Clone, Copy, Debug)]
pub struct EdgeInputs<'a> {
    pub features: Var,
    pub sources: &'a [usize],
    pub incoming: &'a [Vec<usize>],
}

/// Parameter names start with `gnn.`.
#[derive(Clone, Debug)]
pub struct GnnBranch {
    pub config: GnnConfig,
    pub node_embed: ParamId,
    pub seqdist_embed: ParamId,
    pub torsion_proj: Option<Linear>,
    pub blocks: Vec<InteractionBlock>,
}

impl GnnBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: GnnConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let h = config.hidden_dim;
        let node_embed = store.uniform("gnn.node_embed", &[NUM_AA_TYPES, h], NUM_AA_TYPES, rng);
        let seqdist_embed = store.uniform(
            "gnn.seqdist_embed",
            &[SEQDIST_VOCAB, config.seqdist_dim],
            1,
            rng,
        );
        let torsion_proj = (config.level == Level::AllAtom)
            .then(|| Linear::new(store, "gnn.torsion_proj", TORSION_FEATURES, h, rng));
        let edge_dim = config.edge_feature_dim();
        let blocks = (0..config.num_layers)
            .map(|l| InteractionBlock {
                message: Mlp::new(
                    store,
                    &format!("gnn.block{l}.message"),
                    &[h + edge_dim, h, h],
                    false,
                    rng,
                ),
                update: Mlp::new(
                    store,
                    &format!("gnn.block{l}.update"),
                    &[2 * h, h, h],
                    false,
                    rng,
                ),
            })
            .collect();
        Ok(GnnBranch {
            config,
            node_embed,
            seqdist_embed,
            torsion_proj,
            blocks,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    fn check_graph(&self, graph: &ProteinGraph) -> Result<()> {
        if graph.level < self.config.level {
            return Err(Error::Config(format!(
                "graph built at level {} but the model needs {}",
                graph.level, self.config.level
            )));
        }
        Ok(())
    }

    /// One-hot node features times the embedding table.
    pub fn embed_nodes(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &ProteinGraph,
    ) -> Result<Var> {
        let x = g.constant(graph.node_features.clone());
        let table = g.param(store, self.node_embed);
        g.matmul(x, table)
    }

    /// Projection of the side-chain torsion features, present at all-atom
    /// level.
    pub fn torsion_features(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &ProteinGraph,
    ) -> Result<Option<Var>> {
        let Some(proj) = &self.torsion_proj else {
            return Ok(None);
        };
        let torsions = graph
            .torsions
            .as_ref()
            .ok_or_else(|| Error::Config("all-atom model needs side-chain torsions".into()))?;
        let data = torsions.iter().flat_map(|t| t.features()).collect();
        let x = g.constant(Tensor::new(vec![graph.n, TORSION_FEATURES], data)?);
        proj.forward(g, store, x).map(Some)
    }

    /// `u0`: node embedding plus torsion projection.
    pub fn initial_state(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &ProteinGraph,
    ) -> Result<Var> {
        self.check_graph(graph)?;
        let u = self.embed_nodes(g, store, graph)?;
        match self.torsion_features(g, store, graph)? {
            Some(t) => g.add(u, t),
            None => Ok(u),
        }
    }

    /// `[E, edge_feature_dim]` edge features; Euler noise is drawn here.
    pub fn edge_features<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &ProteinGraph,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_graph(graph)?;
        let cfg = &self.config;
        let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let noisy = training && cfg.euler_noise && cfg.level >= Level::Backbone;
        let dim = cfg.geometric_feature_dim();
        let mut data = Vec::with_capacity(graph.num_edges() * dim);
        for geom in &graph.geom {
            let offset = if noisy {
                [noise.sample(rng), noise.sample(rng), noise.sample(rng)]
            } else {
                [0.0; 3]
            };
            data.extend(encode_edge_geometry(geom, cfg, offset)?);
        }
        let fixed = g.constant(Tensor::new(vec![graph.num_edges(), dim], data)?);
        let table = g.param(store, self.seqdist_embed);
        let idx: Vec<usize> = (0..graph.num_edges())
            .map(|e| graph.seqdist_index(e))
            .collect();
        let sd = g.embedding(table, &idx)?;
        g.concat(&[fixed, sd], 1)
    }

    /// `u + MLP_upd([u | sum_j MLP_msg([u_j | e_ji])])`, with optional
    /// Gaussian noise on `u` first.
    #[allow(clippy::too_many_arguments)]
    pub fn interaction_block<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        u: Var,
        edges: EdgeInputs<'_>,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let cfg = &self.config;
        let block = &self.blocks[layer];
        let u = if training && cfg.gaussian_noise && cfg.noise_sigma > 0.0 {
            let noise =
                Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
            let shape = g.shape(u).to_vec();
            let n: usize = shape.iter().product();
            let eps = g.constant(Tensor::new(
                shape,
                (0..n).map(|_| noise.sample(rng)).collect(),
            )?);
            g.add(u, eps)?
        } else {
            u
        };
        let src = g.gather_rows(u, edges.sources)?;
        let msg_in = g.concat(&[src, edges.features], 1)?;
        let msg = block
            .message
            .forward(g, store, msg_in, cfg.dropout_p, training, rng)?;
        let agg = g.segment_sum(msg, edges.incoming)?;
        let upd_in = g.concat(&[u, agg], 1)?;
        let upd = block
            .update
            .forward(g, store, upd_in, cfg.dropout_p, training, rng)?;
        g.add(u, upd)
    }

    /// `u0` followed by every interaction block, optionally starting from a
    /// supplied `u0`.
    pub fn encode_from<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &ProteinGraph,
        u0: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<GnnState> {
        let features = self.edge_features(g, store, graph, training, rng)?;
        let sources: Vec<usize> = graph.edges.iter().map(|e| e.1).collect();
        let incoming = graph.incoming();
        let edges = EdgeInputs {
            features,
            sources: &sources,
            incoming: &incoming,
        };
        let mut layers = vec![u0];
        for l in 0..self.blocks.len() {
            let u = self.interaction_block(g, store, l, layers[l], edges, training, rng)?;
            layers.push(u);
        }
        Ok(GnnState { layers })
    }

    pub fn encode_structure<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &ProteinGraph,
        training: bool,
        rng: &mut R,
    ) -> Result<GnnState> {
        let u0 = self.initial_state(g, store, graph)?;
        self.encode_from(g, store, graph, u0, training, rng)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::SE3Transform;
    use crate::harness::synth::random_chain;
    use crate::protein::build_graph;

    fn setup(level: Level, layers: usize) -> (ParamStore, GnnBranch) {
        let mut store = ParamStore::new();
        let cfg = GnnConfig {
            level,
            num_layers: layers,
            ..GnnConfig::default()
        };
        let b = GnnBranch::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        (store, b)
    }

    fn run(store: &ParamStore, b: &GnnBranch, graph: &ProteinGraph) -> Vec<Tensor> {
        let mut g = Graph::new();
        let s = b
            .encode_structure(
                &mut g,
                store,
                graph,
                false,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        s.layers.iter().map(|v| g.value(*v).detached()).collect()
    }

    fn chain(len: usize, seed: u64) -> crate::protein::ProteinStructure {
        random_chain("t", len, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn rbf_and_fourier_examples() {
        let v = rbf(0.0, 10.0, 8);
        assert_eq!(v[0], 1.0);
        assert!(v[7] < 1e-20);
        let geom = EdgeGeometry {
            d: 0.0,
            theta: 0.0,
            phi: 0.0,
            tau: 0.0,
            euler: None,
        };
        let cfg = GnnConfig::default();
        let f = encode_edge_geometry(&geom, &cfg, [0.0; 3]).unwrap();
        assert_eq!(&f[8..10], &[0.0, 1.0]);
        let bb = GnnConfig {
            level: Level::Backbone,
            ..GnnConfig::default()
        };
        assert!(encode_edge_geometry(&geom, &bb, [0.0; 3]).is_err());
    }

    #[test]
    fn feature_widths_per_level() {
        for (level, angles) in [(Level::Base, 3), (Level::Backbone, 6), (Level::AllAtom, 6)] {
            for (rbf_count, sd) in [(4, 1), (8, 4), (16, 7)] {
                let cfg = GnnConfig {
                    level,
                    rbf_count,
                    seqdist_dim: sd,
                    ..GnnConfig::default()
                };
                assert_eq!(cfg.edge_feature_dim(), rbf_count + 2 * angles + sd);
                let s = chain(6, 1);
                let graph = build_graph(&s, 10.0, level).unwrap();
                let mut store = ParamStore::new();
                let b = GnnBranch::new(&mut store, cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0))
                    .unwrap();
                let mut g = Graph::new();
                let e = b
                    .edge_features(
                        &mut g,
                        &store,
                        &graph,
                        false,
                        &mut ChaCha8Rng::seed_from_u64(0),
                    )
                    .unwrap();
                assert_eq!(g.shape(e), &[graph.num_edges(), cfg.edge_feature_dim()]);
            }
        }
    }

    #[test]
    fn node_embedding_examples() {
        let (mut store, b) = setup(Level::Base, 1);
        let s = chain(30, 2);
        let graph = build_graph(&s, 8.0, Level::Base).unwrap();
        let mut g = Graph::new();
        let u = b.embed_nodes(&mut g, &store, &graph).unwrap();
        let t = g.value(u).detached();
        for i in 0..graph.n {
            for j in 0..graph.n {
                if graph.aa_types[i] == graph.aa_types[j] {
                    assert_eq!(t.row(i), t.row(j));
                } else {
                    assert_ne!(t.row(i), t.row(j));
                }
            }
        }
        store.zero_prefix("gnn.node_embed");
        let mut g = Graph::new();
        let u = b.embed_nodes(&mut g, &store, &graph).unwrap();
        assert!(g.value(u).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn isolated_node_and_zero_update() {
        let (mut store, b) = setup(Level::Base, 2);
        let s = chain(5, 3);
        let graph = build_graph(&s, 1.0, Level::Base).unwrap();
        assert_eq!(graph.num_edges(), 0);
        let layers = run(&store, &b, &graph);
        assert_eq!(layers.len(), 3);
        assert_ne!(layers[0].data(), layers[1].data());

        let graph = build_graph(&s, 10.0, Level::Base).unwrap();
        store.zero_prefix("gnn.block0.update.1");
        store.zero_prefix("gnn.block1.update.1");
        let layers = run(&store, &b, &graph);
        assert_eq!(layers[0].data(), layers[2].data());
    }

    #[test]
    fn zero_layers_keeps_only_u0() {
        let (store, b) = setup(Level::Base, 0);
        let graph = build_graph(&chain(4, 0), 8.0, Level::Base).unwrap();
        assert_eq!(run(&store, &b, &graph).len(), 1);
    }

    #[test]
    fn edge_order_is_irrelevant() {
        let (store, b) = setup(Level::Backbone, 3);
        let graph = build_graph(&chain(12, 5), 10.0, Level::Backbone).unwrap();
        let reversed: Vec<usize> = (0..graph.num_edges()).rev().collect();
        let a = run(&store, &b, &graph);
        let r = run(&store, &b, &graph.with_edge_order(&reversed));
        for (x, y) in a.iter().zip(&r) {
            assert_eq!(x.data(), y.data());
        }
    }

    #[test]
    fn rigid_motion_invariance() {
        for level in [Level::Base, Level::Backbone, Level::AllAtom] {
            let (store, b) = setup(level, 3);
            let s = chain(15, 6);
            let t = SE3Transform::random(&mut ChaCha8Rng::seed_from_u64(8), 20.0);
            let a = run(&store, &b, &build_graph(&s, 10.0, level).unwrap());
            let m = run(
                &store,
                &b,
                &build_graph(&s.transformed(&t), 10.0, level).unwrap(),
            );
            for (x, y) in a.iter().zip(&m) {
                for (p, q) in x.data().iter().zip(y.data()) {
                    assert!((p - q).abs() < 1e-8, "{level}: {p} vs {q}");
                }
            }
        }
    }

    #[test]
    fn node_permutation_equivariance() {
        let (store, b) = setup(Level::AllAtom, 2);
        let graph = build_graph(&chain(9, 7), 10.0, Level::AllAtom).unwrap();
        let perm = [3, 7, 0, 8, 1, 5, 2, 6, 4];
        let a = run(&store, &b, &graph);
        let p = run(&store, &b, &graph.permuted(&perm));
        for (x, y) in a.iter().zip(&p) {
            for (old, &new) in perm.iter().enumerate() {
                for (u, v) in x.row(old).iter().zip(y.row(new)) {
                    assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
                }
            }
        }
    }

    #[test]
    fn noise_only_in_training() {
        let mut store = ParamStore::new();
        let cfg = GnnConfig {
            level: Level::Backbone,
            gaussian_noise: true,
            euler_noise: true,
            ..GnnConfig::default()
        };
        let b = GnnBranch::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let graph = build_graph(&chain(8, 9), 10.0, Level::Backbone).unwrap();
        let last = |training: bool, seed: u64| {
            let mut g = Graph::new();
            let s = b
                .encode_structure(
                    &mut g,
                    &store,
                    &graph,
                    training,
                    &mut ChaCha8Rng::seed_from_u64(seed),
                )
                .unwrap();
            g.value(s.last()).data().to_vec()
        };
        assert_eq!(last(false, 1), last(false, 2));
        assert_ne!(last(true, 1), last(true, 2));
    }
}
