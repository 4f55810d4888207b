//! Finite-difference gradient suite and the rigid-motion / permutation
//! invariance suite.

use rand::seq::index::sample;
use rand::Rng;

use super::synth::{random_chain, random_ligand};
use crate::error::{Error, Result};
use crate::fusion::{FusionMode, FusionModel, ModelConfig, SequenceInput};
use crate::geometry::{torsion_angle, wrap_angle, SE3Transform};
use crate::gnn::{GnnBranch, GnnConfig};
use crate::heads::{loss_for, LigandGraph, Target};
use crate::protein::embedding::Embedding;
use crate::protein::{build_graph, Level, ProteinGraph, ProteinStructure, Task};
use crate::rng::{stream, tag};
use crate::tensor::{Graph, ParamStore, Tensor};

/// Relative-error threshold of the gradient suite.
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Absolute tolerance of the invariance suite.
pub const INVARIANCE_TOL: f64 = 1e-8;

const STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
const REL_FLOOR: f64 = 1e-6;
const ENTRIES_PER_GROUP: usize = 3;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One checked parameter entry.
#[derive(Clone, Debug)]
pub struct GradEntry {
    pub variant: String,
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    /// A ReLU switches inside the difference stencil; the entry is excluded
    /// from the maximum.
    pub kink: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub entries: Vec<GradEntry>,
    pub groups: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }

    pub fn kinks(&self) -> usize {
        self.entries.iter().filter(|e| e.kink).count()
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries
            .iter()
            .filter(|e| !e.kink)
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Model variant covered by [`gradcheck`].
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
}

/// Tiny models: every fusion mode on a regression target at all-atom level,
/// plus the classification, per-residue, ligand and precomputed-embedding
/// paths.
pub fn gradcheck_variants() -> Vec<Variant> {
    let tiny = |task: Task, mode: FusionMode| {
        let mut c = ModelConfig {
            task,
            num_classes: 3,
            ..ModelConfig::default()
        };
        c.fusion.mode = mode;
        c.gnn.hidden_dim = 8;
        c.gnn.num_layers = 2;
        c.gnn.rbf_count = 4;
        c.gnn.seqdist_dim = 2;
        c.gnn.level = Level::AllAtom;
        c.plm.d_model = 8;
        c.plm.num_layers = 2;
        c.plm.ffn_dim = 16;
        c.plm.max_len = 16;
        c.ligand_dim = 4;
        c
    };
    let mut out: Vec<Variant> = FusionMode::ALL
        .iter()
        .map(|m| Variant {
            name: format!("{m}/mqa"),
            config: tiny(Task::Mqa, *m),
        })
        .collect();
    out.push(Variant {
        name: "local_gated/reaction".into(),
        config: tiny(Task::Reaction, FusionMode::LocalGated),
    });
    out.push(Variant {
        name: "global_attention/ppbs".into(),
        config: tiny(Task::Ppbs, FusionMode::GlobalAttention),
    });
    out.push(Variant {
        name: "serial/lba".into(),
        config: tiny(Task::Lba, FusionMode::Serial),
    });
    let mut pre = tiny(Task::Mqa, FusionMode::GlobalAttention);
    pre.precomputed_dim = Some(6);
    out.push(Variant {
        name: "global_attention/precomputed".into(),
        config: pre,
    });
    out
}

struct Fixture {
    graph: ProteinGraph,
    tokens: Vec<usize>,
    embedding: Embedding,
    ligand: LigandGraph,
    target: Target,
}

fn fixture(seed: u64, task: Task, len: usize) -> Result<Fixture> {
    let mut rng = stream(seed, &[tag::CHECK, 1000]);
    let s = random_chain("gradcheck", len, &mut rng);
    let graph = build_graph(&s, 10.0, Level::AllAtom)?;
    let data = (0..len * 6)
        .map(|_| rng.random_range(-1.0f32..1.0))
        .collect();
    let target = match task {
        Task::Reaction => Target::Class(1),
        Task::Ppbs | Task::Bce => Target::PerResidue((0..len).map(|i| (i % 2) as u8).collect()),
        Task::Mqa | Task::Lba => Target::Scalar(0.7),
    };
    Ok(Fixture {
        tokens: s.tokens(),
        graph,
        embedding: Embedding::new(len, 6, data)?,
        ligand: random_ligand(&mut rng),
        target,
    })
}

fn loss_value(model: &FusionModel, fx: &Fixture, grads: bool) -> Result<(f64, Option<ParamStore>)> {
    let mut g = Graph::new();
    let seq = if model.config.precomputed_dim.is_some() {
        SequenceInput::Embedding(&fx.embedding)
    } else {
        SequenceInput::Tokens(&fx.tokens)
    };
    let lig = (model.config.task == Task::Lba).then_some(&fx.ligand);
    let mut rng = stream(0, &[tag::CHECK]);
    let out = model.forward(&mut g, &fx.graph, seq, lig, false, &mut rng)?;
    let loss = loss_for(&mut g, model.config.task, out.prediction, &fx.target)?;
    let value = g.value(loss).data()[0];
    if !grads {
        return Ok((value, None));
    }
    let mut store = model.params.clone();
    store.zero_grad();
    g.backward_into(loss, &mut store)?;
    Ok((value, Some(store)))
}

/// Sets every parameter, including zero-initialized ones, to U(-0.5, 0.5).
pub fn randomize_params<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.tensor_mut(id).data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}

fn check_variant(
    seed: u64,
    k: usize,
    variant: &Variant,
    report: &mut GradcheckReport,
) -> Result<()> {
    let mut model = FusionModel::new(variant.config.clone(), seed)?;
    let mut rng = stream(seed, &[tag::CHECK, k as u64]);
    randomize_params(&mut model.params, &mut rng);
    let fx = fixture(seed, variant.config.task, 6)?;
    let (_, grads) = loss_value(&model, &fx, true)?;
    let grads = grads.expect("requested");
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        report.groups += 1;
        let name = model.params.name(id).to_string();
        let analytic = grads
            .tensor(id)
            .grad()
            .expect("parameters track gradients")
            .to_vec();
        let n = analytic.len();
        let mut picks: Vec<usize> = sample(&mut rng, n, ENTRIES_PER_GROUP.min(n)).into_vec();
        let top = (0..n)
            .max_by(|a, b| analytic[*a].abs().total_cmp(&analytic[*b].abs()))
            .unwrap_or(0);
        if !picks.contains(&top) {
            picks[0] = top;
        }
        for idx in picks {
            let original = model.params.tensor(id).data()[idx];
            let mut eval = |x: f64| -> Result<f64> {
                model.params.tensor_mut(id).data_mut()[idx] = x;
                Ok(loss_value(&model, &fx, false)?.0)
            };
            let f0 = eval(original)?;
            let mut best: Option<(f64, f64, bool)> = None;
            for h in STEPS {
                let (fp, fm) = (eval(original + h)?, eval(original - h)?);
                let (fp2, fm2) = (eval(original + 2.0 * h)?, eval(original - 2.0 * h)?);
                let numeric = (8.0 * (fp - fm) - (fp2 - fm2)) / (12.0 * h);
                let err = relative_error(analytic[idx], numeric);
                let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
                let kink = (right - left).abs() > 0.5 * (analytic[idx] - numeric).abs()
                    && err >= GRADCHECK_TOL;
                if best.is_none_or(|b| err < b.1) {
                    best = Some((numeric, err, kink));
                }
            }
            model.params.tensor_mut(id).data_mut()[idx] = original;
            let (numeric, rel_err, kink) = best.expect("at least one step");
            report.entries.push(GradEntry {
                variant: variant.name.clone(),
                param: name.clone(),
                index: idx,
                analytic: analytic[idx],
                numeric,
                rel_err,
                kink,
            });
            if !kink {
                report.max_rel_err = report.max_rel_err.max(rel_err);
            }
        }
    }
    Ok(())
}

/// Fourth-order central differences against reverse-mode gradients for
/// every parameter tensor of every variant in [`gradcheck_variants`].
pub fn gradcheck(seed: u64) -> Result<GradcheckReport> {
    let mut report = GradcheckReport::default();
    for (k, v) in gradcheck_variants().iter().enumerate() {
        check_variant(seed, k, v, &mut report)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Default)]
pub struct InvarianceReport {
    pub proteins: usize,
    pub transforms: usize,
    /// Largest change of any edge or torsion feature.
    pub max_feature_diff: f64,
    /// Largest change of any GNN layer output.
    pub max_layer_diff: f64,
    /// Largest deviation from `angle(mirror) = -angle`.
    pub max_mirror_diff: f64,
    /// Largest deviation from node-permutation equivariance.
    pub max_permutation_diff: f64,
}

impl InvarianceReport {
    pub fn passed(&self) -> bool {
        [
            self.max_feature_diff,
            self.max_layer_diff,
            self.max_mirror_diff,
            self.max_permutation_diff,
        ]
        .iter()
        .all(|d| *d <= INVARIANCE_TOL)
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b).abs()
}

/// Largest feature difference between two graphs of the same protein;
/// infinite when the edge sets differ.
pub fn feature_diff(a: &ProteinGraph, b: &ProteinGraph) -> f64 {
    if a.edges != b.edges {
        return f64::INFINITY;
    }
    let mut worst: f64 = 0.0;
    for (x, y) in a.geom.iter().zip(&b.geom) {
        worst = worst
            .max((x.d - y.d).abs())
            .max((x.theta - y.theta).abs())
            .max(angle_diff(x.phi, y.phi))
            .max(angle_diff(x.tau, y.tau));
        match (x.euler, y.euler) {
            (Some(p), Some(q)) => {
                worst = worst.max((p[1] - q[1]).abs());
                worst = worst
                    .max(angle_diff(p[0], q[0]))
                    .max(angle_diff(p[2], q[2]));
            }
            (None, None) => {}
            _ => return f64::INFINITY,
        }
    }
    match (&a.torsions, &b.torsions) {
        (Some(ta), Some(tb)) => {
            for (x, y) in ta.iter().zip(tb) {
                if x.defined != y.defined {
                    return f64::INFINITY;
                }
                for k in 0..4 {
                    worst = worst.max(angle_diff(x.chi[k], y.chi[k]));
                }
            }
        }
        (None, None) => {}
        _ => return f64::INFINITY,
    }
    worst
}

fn layer_outputs(
    branch: &GnnBranch,
    store: &ParamStore,
    graph: &ProteinGraph,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let state =
        branch.encode_structure(&mut g, store, graph, false, &mut stream(0, &[tag::CHECK]))?;
    Ok(state
        .layers
        .iter()
        .map(|v| g.value(*v).detached())
        .collect())
}

fn max_abs_diff(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()).map(|(p, q)| (p - q).abs()))
        .fold(0.0, f64::max)
}

fn mirrored(s: &ProteinStructure) -> ProteinStructure {
    let reflect = SE3Transform {
        rotation: [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        ..SE3Transform::identity()
    };
    s.transformed(&reflect)
}

/// Signed angles of a structure that a reflection negates: side-chain
/// torsions, CA-trace dihedrals and edge rotation angles.
fn signed_angles(s: &ProteinStructure, graph: &ProteinGraph) -> Vec<f64> {
    let mut out: Vec<f64> = graph.geom.iter().map(|g| g.tau).collect();
    if let Some(t) = &graph.torsions {
        out.extend(t.iter().flat_map(|t| t.chi));
    }
    let ca: Vec<_> = s.residues.iter().map(|r| r.ca()).collect();
    out.extend(
        ca.windows(4)
            .filter_map(|w| torsion_angle(w[0], w[1], w[2], w[3]).ok()),
    );
    out
}

/// Runs `n_transforms` random rigid motions, one mirror image and one node
/// permutation over `n_proteins` synthetic proteins at all-atom level.
pub fn invariance_suite(
    seed: u64,
    n_proteins: usize,
    n_transforms: usize,
) -> Result<InvarianceReport> {
    if n_proteins == 0 {
        return Err(Error::Config(
            "invariance suite needs at least one protein".into(),
        ));
    }
    let cfg = GnnConfig {
        hidden_dim: 16,
        num_layers: 3,
        level: Level::AllAtom,
        ..GnnConfig::default()
    };
    let mut store = ParamStore::new();
    let branch = GnnBranch::new(
        &mut store,
        cfg.clone(),
        &mut stream(seed, &[tag::CHECK, tag::INIT]),
    )?;
    let mut report = InvarianceReport {
        proteins: n_proteins,
        transforms: n_transforms,
        ..InvarianceReport::default()
    };
    for p in 0..n_proteins {
        let mut rng = stream(seed, &[tag::CHECK, tag::DATA, p as u64]);
        let len = rng.random_range(8..=24);
        let s = random_chain(&format!("inv{p}"), len, &mut rng);
        let graph = build_graph(&s, cfg.cutoff, cfg.level)?;
        let base = layer_outputs(&branch, &store, &graph)?;
        for _ in 0..n_transforms {
            let t = SE3Transform::random(&mut rng, 50.0);
            let moved = build_graph(&s.transformed(&t), cfg.cutoff, cfg.level)?;
            report.max_feature_diff = report.max_feature_diff.max(feature_diff(&graph, &moved));
            let out = layer_outputs(&branch, &store, &moved)?;
            report.max_layer_diff = report.max_layer_diff.max(max_abs_diff(&base, &out));
        }

        let m = mirrored(&s);
        let mirror_graph = build_graph(&m, cfg.cutoff, cfg.level)?;
        let a = signed_angles(&s, &graph);
        let b = signed_angles(&m, &mirror_graph);
        let mirror = if a.len() == b.len() {
            a.iter()
                .zip(&b)
                .map(|(x, y)| angle_diff(*x, -*y))
                .fold(0.0, f64::max)
        } else {
            f64::INFINITY
        };
        report.max_mirror_diff = report.max_mirror_diff.max(mirror);

        let perm: Vec<usize> = sample(&mut rng, len, len).into_vec();
        let permuted = layer_outputs(&branch, &store, &graph.permuted(&perm))?;
        for (x, y) in base.iter().zip(&permuted) {
            for (old, new) in perm.iter().enumerate() {
                let d = x
                    .row(old)
                    .iter()
                    .zip(y.row(*new))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                report.max_permutation_diff = report.max_permutation_diff.max(d);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert_eq!(relative_error(0.0, 1e-9), 1e-3);
    }

    #[test]
    fn small_invariance_run_passes() {
        let r = invariance_suite(3, 4, 2).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn mirror_changes_chirality_sensitive_features() {
        let mut rng = stream(1, &[]);
        let s = random_chain("m", 12, &mut rng);
        let a = build_graph(&s, 10.0, Level::AllAtom).unwrap();
        let b = build_graph(&mirrored(&s), 10.0, Level::AllAtom).unwrap();
        assert!(feature_diff(&a, &b) > 1e-3);
    }

    #[test]
    fn variants_cover_every_mode() {
        let v = gradcheck_variants();
        for m in FusionMode::ALL {
            assert!(v.iter().any(|x| x.config.fusion.mode == m));
        }
        for v in &v {
            v.config.validate().unwrap();
        }
    }
}
