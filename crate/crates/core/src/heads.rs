//! Task heads, the ligand encoder and per-task losses.

use rand::Rng;

use crate::error::{Error, Result};
use crate::protein::{Label, Record, Task, TaskKind};
use crate::tensor::{Graph, Mlp, ParamId, ParamStore, Tensor, Var};

/// Size of the ligand element vocabulary (atomic numbers fit).
pub const LIGAND_VOCAB: usize = 128;
/// Message-passing rounds in [`LigandEncoder`].
pub const LIGAND_ROUNDS: usize = 3;

/// Small-molecule graph: element indices and undirected bonds.
#[derive(Clone, Debug, PartialEq)]
pub struct LigandGraph {
    pub atom_types: Vec<usize>,
    pub bonds: Vec<(usize, usize)>,
}

impl LigandGraph {
    pub fn new(atom_types: Vec<usize>, bonds: Vec<(usize, usize)>) -> Result<Self> {
        if atom_types.is_empty() {
            return Err(Error::EmptyLigand);
        }
        if let Some(t) = atom_types.iter().find(|t| **t >= LIGAND_VOCAB) {
            return Err(Error::Format(format!(
                "ligand element index {t} >= {LIGAND_VOCAB}"
            )));
        }
        for &(a, b) in &bonds {
            if a == b {
                return Err(Error::Format(format!("ligand self-bond on atom {a}")));
            }
            if a >= atom_types.len() || b >= atom_types.len() {
                return Err(Error::Format(format!(
                    "ligand bond ({a}, {b}) out of range for {} atoms",
                    atom_types.len()
                )));
            }
        }
        Ok(LigandGraph { atom_types, bonds })
    }

    pub fn len(&self) -> usize {
        self.atom_types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atom_types.is_empty()
    }

    /// Neighbor lists in ascending atom order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.atom_types.len()];
        for &(a, b) in &self.bonds {
            out[a].push(b);
            out[b].push(a);
        }
        for list in &mut out {
            list.sort_unstable();
        }
        out
    }

    /// Same molecule with atom `k` renamed `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> LigandGraph {
        let mut types = vec![0; self.atom_types.len()];
        for (old, new) in perm.iter().enumerate() {
            types[*new] = self.atom_types[old];
        }
        LigandGraph {
            atom_types: types,
            bonds: self
                .bonds
                .iter()
                .map(|(a, b)| (perm[*a], perm[*b]))
                .collect(),
        }
    }
}

/// Atom embedding followed by residual sum-aggregation rounds
/// `x <- x + relu(W_r * sum_neighbors x)` and a mean pool.
#[derive(Clone, Debug)]
pub struct LigandEncoder {
    pub embed: ParamId,
    pub rounds: Vec<ParamId>,
    pub dim: usize,
}

impl LigandEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, rng: &mut R) -> Self {
        let embed = store.uniform("ligand.embed", &[LIGAND_VOCAB, dim], 1, rng);
        let rounds = (0..LIGAND_ROUNDS)
            .map(|r| store.uniform(format!("ligand.round{r}"), &[dim, dim], dim, rng))
            .collect();
        LigandEncoder { embed, rounds, dim }
    }

    /// `[dim]` representation of `lig`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, lig: &LigandGraph) -> Result<Var> {
        if lig.is_empty() {
            return Err(Error::EmptyLigand);
        }
        let table = g.param(store, self.embed);
        let mut x = g.embedding(table, &lig.atom_types)?;
        let neighbors = lig.neighbors();
        for &w in &self.rounds {
            let agg = g.segment_sum(x, &neighbors)?;
            let w = g.param(store, w);
            let m = g.matmul(agg, w)?;
            let m = g.relu(m)?;
            x = g.add(x, m)?;
        }
        g.mean_pool(x, 0)
    }
}

/// Supervision target of one record.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Scalar(f64),
    Class(usize),
    PerResidue(Vec<u8>),
}

impl Target {
    pub fn from_record(task: Task, rec: &Record) -> Result<Target> {
        match (task.kind(), rec.label, &rec.residue_labels) {
            (TaskKind::Regression, Label::Scalar(v), _) => Ok(Target::Scalar(v)),
            (TaskKind::Classification, Label::Class(c), _) => Ok(Target::Class(c)),
            (TaskKind::PerResidue, _, Some(l)) => Ok(Target::PerResidue(l.clone())),
            _ => Err(Error::Format(format!(
                "record {} has no {task} label",
                rec.id()
            ))),
        }
    }
}

/// MLP with two hidden layers as wide as its input.
#[derive(Clone, Debug)]
pub struct TaskHead {
    pub task: Task,
    pub num_classes: usize,
    pub input_dim: usize,
    pub mlp: Mlp,
}

impl TaskHead {
    /// `input_dim` is the pooled width for graph-level tasks (including the
    /// ligand part for LBA) or the per-node width for residue tasks.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        task: Task,
        input_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let out = match task.kind() {
            TaskKind::Classification if num_classes < 2 => {
                return Err(Error::Config(format!(
                    "classification needs at least 2 classes, got {num_classes}"
                )))
            }
            TaskKind::Classification => num_classes,
            _ => 1,
        };
        let mlp = Mlp::new(
            store,
            "head",
            &[input_dim, input_dim, input_dim, out],
            false,
            rng,
        );
        Ok(TaskHead {
            task,
            num_classes,
            input_dim,
            mlp,
        })
    }

    /// Scalar `[1]` for regression, `[k]` logits for classification, `[n]`
    /// logits for residue tasks.
    #[allow(clippy::too_many_arguments)]
    pub fn predict<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pooled: Var,
        per_node: Var,
        ligand: Option<Var>,
        dropout: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match (self.task, ligand) {
            (Task::Lba, None) => return Err(Error::MissingLigand),
            (Task::Lba, Some(_)) | (_, None) => {}
            (t, Some(_)) => return Err(Error::Config(format!("task {t} takes no ligand"))),
        }
        if self.task.kind() == TaskKind::PerResidue {
            let n = g.shape(per_node)[0];
            let y = self
                .mlp
                .forward(g, store, per_node, dropout, training, rng)?;
            return g.reshape(y, &[n]);
        }
        let x = match ligand {
            Some(l) => g.concat(&[pooled, l], 0)?,
            None => pooled,
        };
        let width = g.shape(x)[0];
        let x = g.reshape(x, &[1, width])?;
        let y = self.mlp.forward(g, store, x, dropout, training, rng)?;
        let out = self.mlp.out_dim();
        g.reshape(y, &[out])
    }
}

/// Per-task loss: MSE, cross entropy, or mean per-residue BCE on logits.
pub fn loss_for(g: &mut Graph, task: Task, prediction: Var, target: &Target) -> Result<Var> {
    match (task.kind(), target) {
        (TaskKind::Regression, Target::Scalar(v)) => {
            let t = g.constant(Tensor::vector(vec![*v]));
            g.mse_loss(prediction, t)
        }
        (TaskKind::Classification, Target::Class(c)) => g.cross_entropy_loss(prediction, &[*c]),
        (TaskKind::PerResidue, Target::PerResidue(labels)) => {
            let labels: Vec<f64> = labels.iter().map(|b| f64::from(*b)).collect();
            g.binary_cross_entropy_loss(prediction, &labels)
        }
        _ => Err(Error::shape(
            "loss_for",
            format!("target {target:?} does not fit task {task}"),
        )),
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn ligand_validation() {
        assert!(matches!(
            LigandGraph::new(vec![], vec![]),
            Err(Error::EmptyLigand)
        ));
        assert!(LigandGraph::new(vec![6, 7], vec![(0, 0)]).is_err());
        assert!(LigandGraph::new(vec![6, 7], vec![(0, 2)]).is_err());
        assert!(LigandGraph::new(vec![LIGAND_VOCAB], vec![]).is_err());
        assert!(LigandGraph::new(vec![6, 7], vec![(1, 0)]).is_ok());
    }

    #[test]
    fn single_atom_ligand_is_its_embedding() {
        let mut store = ParamStore::new();
        let enc = LigandEncoder::new(&mut store, 4, &mut rng());
        let mut g = Graph::new();
        let out = enc
            .forward(&mut g, &store, &LigandGraph::new(vec![6], vec![]).unwrap())
            .unwrap();
        assert_eq!(g.value(out).data(), store.tensor(enc.embed).row(6));
    }

    #[test]
    fn ligand_relabeling_and_distinctness() {
        let mut store = ParamStore::new();
        let enc = LigandEncoder::new(&mut store, 6, &mut rng());
        let lig = LigandGraph::new(vec![6, 7, 8, 6], vec![(0, 1), (1, 2), (2, 3), (3, 1)]).unwrap();
        let perm = [2, 0, 3, 1];
        let mut g = Graph::new();
        let a = enc.forward(&mut g, &store, &lig).unwrap();
        let b = enc.forward(&mut g, &store, &lig.permuted(&perm)).unwrap();
        for (x, y) in g.value(a).data().iter().zip(g.value(b).data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let c = enc
            .forward(&mut g, &store, &LigandGraph::new(vec![6], vec![]).unwrap())
            .unwrap();
        let n = enc
            .forward(&mut g, &store, &LigandGraph::new(vec![7], vec![]).unwrap())
            .unwrap();
        assert_ne!(g.value(c).data(), g.value(n).data());
    }

    #[test]
    fn head_shapes_and_zero_init() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let head = TaskHead::new(&mut store, Task::Ppbs, 5, 8, &mut r).unwrap();
        let mut g = Graph::new();
        let per_node = g.constant(Tensor::new(vec![7, 5], vec![0.3; 35]).unwrap());
        let pooled = g.constant(Tensor::vector(vec![0.0; 5]));
        let y = head
            .predict(&mut g, &store, pooled, per_node, None, 0.0, false, &mut r)
            .unwrap();
        assert_eq!(g.shape(y), &[7]);

        let mut store = ParamStore::new();
        let head = TaskHead::new(&mut store, Task::Reaction, 5, 384, &mut r).unwrap();
        let widths: Vec<usize> = head.mlp.layers.iter().map(|l| l.out_dim).collect();
        assert_eq!(widths, vec![5, 5, 384]);
        store.zero_prefix("head");
        let mut g = Graph::new();
        let pooled = g.constant(Tensor::vector(vec![0.7; 5]));
        let y = head
            .predict(&mut g, &store, pooled, pooled, None, 0.0, false, &mut r)
            .unwrap();
        assert_eq!(g.shape(y), &[384]);
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lba_requires_ligand() {
        let mut r = rng();
        let mut store = ParamStore::new();
        let head = TaskHead::new(&mut store, Task::Lba, 6, 8, &mut r).unwrap();
        let mut g = Graph::new();
        let pooled = g.constant(Tensor::vector(vec![0.1; 4]));
        let res = head.predict(&mut g, &store, pooled, pooled, None, 0.0, false, &mut r);
        assert!(matches!(res, Err(Error::MissingLigand)));
        let lig = g.constant(Tensor::vector(vec![0.2; 2]));
        let y = head
            .predict(
                &mut g,
                &store,
                pooled,
                pooled,
                Some(lig),
                0.0,
                false,
                &mut r,
            )
            .unwrap();
        assert_eq!(g.shape(y), &[1]);
    }

    #[test]
    fn loss_examples() {
        let ln2 = std::f64::consts::LN_2;
        let mut g = Graph::new();
        let p = g.constant(Tensor::vector(vec![1.5]));
        let l = loss_for(&mut g, Task::Mqa, p, &Target::Scalar(1.5)).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let logits = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = loss_for(&mut g, Task::Reaction, logits, &Target::Class(1)).unwrap();
        assert!((g.value(l).data()[0] - ln2).abs() < 1e-15);
        let logits = g.constant(Tensor::vector(vec![0.0; 3]));
        for labels in [vec![0, 0, 0], vec![1, 0, 1]] {
            let l = loss_for(&mut g, Task::Bce, logits, &Target::PerResidue(labels)).unwrap();
            assert!((g.value(l).data()[0] - ln2).abs() < 1e-15);
        }
        let sure = g.constant(Tensor::vector(vec![30.0, -30.0]));
        let l = loss_for(&mut g, Task::Reaction, sure, &Target::Class(0)).unwrap();
        assert!(g.value(l).data()[0] >= 0.0 && g.value(l).data()[0] < 1e-9);
        let sure = g.constant(Tensor::vector(vec![30.0, -30.0]));
        let l = loss_for(&mut g, Task::Ppbs, sure, &Target::PerResidue(vec![1, 0])).unwrap();
        assert!(g.value(l).data()[0] < 1e-9);
        assert!(loss_for(&mut g, Task::Mqa, sure, &Target::Class(0)).is_err());
    }
}
