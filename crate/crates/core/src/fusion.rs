//! Serial, local gated and global attention fusion of the two branches, and
//! the full model that interleaves them.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::gnn::{EdgeInputs, GnnBranch, GnnConfig};
use crate::heads::{LigandEncoder, LigandGraph, TaskHead};
use crate::plm::{PlmBranch, PlmConfig, PrecomputedAdapter};
use crate::protein::embedding::Embedding;
use crate::protein::{ProteinGraph, Task, TaskKind};
use crate::rng::{stream, tag};
use crate::tensor::{
    multihead_self_attention, Graph, Linear, MhaParams, Mlp, ParamId, ParamStore, Var,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FusionMode {
    /// Structure branch only.
    #[default]
    None,
    /// Final sequence representation becomes the initial node features.
    Serial,
    LocalGated,
    GlobalAttention,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::None,
        FusionMode::Serial,
        FusionMode::LocalGated,
        FusionMode::GlobalAttention,
    ];

    pub fn uses_plm(self) -> bool {
        self != FusionMode::None
    }

    /// Modes that exchange information in both directions.
    pub fn is_bidirectional(self) -> bool {
        matches!(self, FusionMode::LocalGated | FusionMode::GlobalAttention)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::None => "none",
            FusionMode::Serial => "serial",
            FusionMode::LocalGated => "local_gated",
            FusionMode::GlobalAttention => "global_attention",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionMode::None),
            "serial" => Ok(FusionMode::Serial),
            "local_gated" => Ok(FusionMode::LocalGated),
            "global_attention" => Ok(FusionMode::GlobalAttention),
            other => Err(Error::Config(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub num_heads: usize,
    /// `(gnn_layer, plm_layer)` exchange points; `None` selects
    /// [`default_schedule`].
    pub schedule: Option<Vec<(usize, usize)>>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::None,
            num_heads: 2,
            schedule: None,
        }
    }
}

/// Pairs GNN layer `l` with pLM layer `ceil(l * plm_layers / gnn_layers)`
/// for every `l` in `1..=gnn_layers`.
pub fn default_schedule(gnn_layers: usize, plm_layers: usize) -> Vec<(usize, usize)> {
    (1..=gnn_layers)
        .map(|l| (l, (l * plm_layers).div_ceil(gnn_layers)))
        .collect()
}

/// Parses `"1:1,2:3"`; an empty string is the empty schedule.
pub fn parse_schedule(text: &str) -> Result<Vec<(usize, usize)>> {
    let text = text.trim();
    if text.is_empty() {
        return Ok(Vec::new());
    }
    text.split(',')
        .map(|pair| {
            let (a, b) = pair
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("schedule entry {pair:?} is not gnn:plm")))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad schedule layer {s:?}")))
            };
            Ok((parse(a)?, parse(b)?))
        })
        .collect()
}

pub fn format_schedule(schedule: &[(usize, usize)]) -> String {
    schedule
        .iter()
        .map(|(a, b)| format!("{a}:{b}"))
        .collect::<Vec<_>>()
        .join(",")
}

/// Checks GNN layers strictly increase, pLM layers never decrease, and both
/// stay within their branch depths.
pub fn validate_schedule(
    schedule: &[(usize, usize)],
    gnn_layers: usize,
    plm_layers: usize,
) -> Result<()> {
    for (k, &(gl, pl)) in schedule.iter().enumerate() {
        if gl > gnn_layers || pl > plm_layers {
            return Err(Error::Config(format!(
                "schedule entry {gl}:{pl} outside {gnn_layers} GNN / {plm_layers} pLM layers"
            )));
        }
        if k > 0 {
            let (pg, pp) = schedule[k - 1];
            if gl <= pg || pl < pp {
                return Err(Error::Config(format!(
                    "schedule entry {gl}:{pl} out of order after {pg}:{pp}"
                )));
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub task: Task,
    pub num_classes: usize,
    pub plm: PlmConfig,
    pub gnn: GnnConfig,
    pub fusion: FusionConfig,
    /// Width of frozen precomputed sequence embeddings; `None` trains the
    /// toy transformer.
    pub precomputed_dim: Option<usize>,
    pub ligand_dim: usize,
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            task: Task::Mqa,
            num_classes: 8,
            plm: PlmConfig::default(),
            gnn: GnnConfig::default(),
            fusion: FusionConfig::default(),
            precomputed_dim: None,
            ligand_dim: 8,
            head_dropout: 0.0,
        }
    }
}

impl ModelConfig {
    /// Depth of the sequence branch as seen by the schedule.
    pub fn plm_depth(&self) -> usize {
        if self.precomputed_dim.is_some() {
            1
        } else {
            self.plm.num_layers
        }
    }

    pub fn schedule(&self) -> Vec<(usize, usize)> {
        if !self.fusion.mode.is_bidirectional() {
            return Vec::new();
        }
        self.fusion
            .schedule
            .clone()
            .unwrap_or_else(|| default_schedule(self.gnn.num_layers, self.plm_depth()))
    }

    pub fn validate(&self) -> Result<()> {
        self.gnn.validate()?;
        if self.fusion.mode.uses_plm() {
            self.plm.validate()?;
        }
        if self.fusion.mode.is_bidirectional() {
            let c = self.gnn.hidden_dim;
            let h = self.fusion.num_heads;
            if h == 0 || !c.is_multiple_of(h) {
                return Err(Error::HeadCount { dim: c, heads: h });
            }
            validate_schedule(&self.schedule(), self.gnn.num_layers, self.plm_depth())?;
        }
        if self.task.kind() == TaskKind::Classification && self.num_classes < 2 {
            return Err(Error::Config(
                "classification needs at least 2 classes".into(),
            ));
        }
        if self.task == Task::Lba && self.ligand_dim == 0 {
            return Err(Error::Config("ligand_dim must be positive".into()));
        }
        Ok(())
    }

    /// Width of the pooled representation `z`.
    pub fn pooled_dim(&self) -> usize {
        if self.fusion.mode.is_bidirectional() {
            self.gnn.hidden_dim + self.plm.d_model
        } else {
            self.gnn.hidden_dim
        }
    }
}

/// Parameters of one exchange point.
#[derive(Clone, Debug)]
pub struct FusionLayer {
    pub in_gnn: Linear,
    pub in_plm: Linear,
    pub out_gnn: Linear,
    pub out_plm: Linear,
    /// Shared vote MLP `C -> C -> 2` (local gated).
    pub vote: Option<Mlp>,
    /// Attention over the concatenated nodes and tokens (global).
    pub attention: Option<MhaParams>,
    /// `[2, C]` branch tags added before attention (global).
    pub branch_tag: Option<ParamId>,
}

impl FusionLayer {
    /// Output projections and branch tags start at zero, so a fresh layer
    /// leaves both branches unchanged.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        mode: FusionMode,
        gnn_dim: usize,
        plm_dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = gnn_dim;
        let (vote, attention, branch_tag) = match mode {
            FusionMode::LocalGated => (
                Some(Mlp::new(
                    store,
                    &format!("{name}.vote"),
                    &[c, c, 2],
                    false,
                    rng,
                )),
                None,
                None,
            ),
            FusionMode::GlobalAttention => (
                None,
                Some(MhaParams::new(
                    store,
                    &format!("{name}.attn"),
                    c,
                    heads,
                    false,
                    rng,
                )?),
                Some(store.zeros(format!("{name}.branch_tag"), &[2, c])),
            ),
            _ => return Err(Error::Config(format!("mode {mode} has no fusion layers"))),
        };
        Ok(FusionLayer {
            in_gnn: Linear::new(store, &format!("{name}.in_gnn"), gnn_dim, c, rng),
            in_plm: Linear::new(store, &format!("{name}.in_plm"), plm_dim, c, rng),
            out_gnn: Linear::zeroed(store, &format!("{name}.out_gnn"), c, gnn_dim),
            out_plm: Linear::zeroed(store, &format!("{name}.out_plm"), c, plm_dim),
            vote,
            attention,
            branch_tag,
        })
    }
}

/// Gated mix of two aligned `[n, C]` inputs; also returns the `[n, 2]` gates.
pub fn local_gated_fuse<R: Rng + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    x1: Var,
    x2: Var,
    vote: &Mlp,
    rng: &mut R,
) -> Result<(Var, Var)> {
    if g.shape(x1) != g.shape(x2) {
        return Err(Error::shape(
            "local_gated_fuse",
            format!("{:?} vs {:?}", g.shape(x1), g.shape(x2)),
        ));
    }
    let v1 = vote.forward(g, store, x1, 0.0, false, rng)?;
    let v2 = vote.forward(g, store, x2, 0.0, false, rng)?;
    let votes = g.add(v1, v2)?;
    let gates = g.softmax(votes, 1)?;
    let g1 = g.slice(gates, 1, 0, 1)?;
    let g2 = g.slice(gates, 1, 1, 1)?;
    let a = g.mul_col(x1, g1)?;
    let b = g.mul_col(x2, g2)?;
    Ok((g.add(a, b)?, gates))
}

/// Self-attention over `[x1; x2]` with a per-branch residual. `tags` are added
/// to each branch's rows before attention.
pub fn global_attention_fuse(
    g: &mut Graph,
    store: &ParamStore,
    x1: Var,
    x2: Var,
    attention: &MhaParams,
    tags: Option<Var>,
) -> Result<(Var, Var)> {
    if g.shape(x1) != g.shape(x2) {
        return Err(Error::shape(
            "global_attention_fuse",
            format!("{:?} vs {:?}", g.shape(x1), g.shape(x2)),
        ));
    }
    let n = g.shape(x1)[0];
    let (a1, a2) = match tags {
        Some(t) => {
            let t1 = g.slice(t, 0, 0, 1)?;
            let t2 = g.slice(t, 0, 1, 1)?;
            let c = g.shape(x1)[1];
            let t1 = g.reshape(t1, &[c])?;
            let t2 = g.reshape(t2, &[c])?;
            (g.add_row(x1, t1)?, g.add_row(x2, t2)?)
        }
        None => (x1, x2),
    };
    let x = g.concat(&[a1, a2], 0)?;
    let attended = multihead_self_attention(g, store, x, attention, None)?.output;
    let parts = g.split(attended, &[n, n], 0)?;
    Ok((g.add(parts[0], x1)?, g.add(parts[1], x2)?))
}

/// `u0 = Linear(h_L)`; errors when token and node counts differ.
pub fn serial_fuse(
    g: &mut Graph,
    store: &ParamStore,
    plm_last: Var,
    graph: &ProteinGraph,
    proj: &Linear,
) -> Result<Var> {
    let n = g.shape(plm_last)[0];
    if n != graph.n {
        return Err(Error::LengthMismatch(format!(
            "{n} tokens for {} graph nodes",
            graph.n
        )));
    }
    proj.forward(g, store, plm_last)
}

/// Sequence-side input of one protein.
#[derive(Clone, Copy, Debug)]
pub enum SequenceInput<'a> {
    Tokens(&'a [usize]),
    Embedding(&'a Embedding),
}

#[derive(Clone, Debug)]
enum SequenceBranch {
    Toy(PlmBranch),
    Precomputed(PrecomputedAdapter),
}

/// Outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// Pooled protein representation.
    pub z: Var,
    /// `[n, d]` per-residue representation.
    pub per_node: Var,
    pub gnn_layers: Vec<Var>,
    /// Empty for mode none.
    pub plm_layers: Vec<Var>,
    /// `[n, 2]` gates of each local fusion point.
    pub gates: Vec<Var>,
    pub prediction: Var,
}

/// Both branches, fusion layers, ligand encoder and task head, with their
/// parameters.
#[derive(Clone, Debug)]
pub struct FusionModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    gnn: GnnBranch,
    sequence: Option<SequenceBranch>,
    serial_proj: Option<Linear>,
    fusion_layers: Vec<FusionLayer>,
    schedule: Vec<(usize, usize)>,
    ligand: Option<LigandEncoder>,
    head: TaskHead,
}

impl FusionModel {
    /// Initializes every parameter from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let mut params = ParamStore::new();
        let mode = config.fusion.mode;
        let gnn = GnnBranch::new(&mut params, config.gnn.clone(), &mut rng)?;
        let sequence = if mode.uses_plm() {
            Some(match config.precomputed_dim {
                Some(dim) => SequenceBranch::Precomputed(PrecomputedAdapter::new(
                    &mut params,
                    dim,
                    config.plm.d_model,
                    &mut rng,
                )),
                None => {
                    SequenceBranch::Toy(PlmBranch::new(&mut params, config.plm.clone(), &mut rng)?)
                }
            })
        } else {
            None
        };
        let h = config.gnn.hidden_dim;
        let d = config.plm.d_model;
        let serial_proj = (mode == FusionMode::Serial)
            .then(|| Linear::new(&mut params, "serial.proj", d, h, &mut rng));
        let schedule = config.schedule();
        let fusion_layers = schedule
            .iter()
            .enumerate()
            .map(|(k, _)| {
                FusionLayer::new(
                    &mut params,
                    &format!("fusion{k}"),
                    mode,
                    h,
                    d,
                    config.fusion.num_heads,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let ligand = (config.task == Task::Lba)
            .then(|| LigandEncoder::new(&mut params, config.ligand_dim, &mut rng));
        let head_in = match config.task.kind() {
            TaskKind::PerResidue => config.pooled_dim(),
            _ => config.pooled_dim() + ligand.as_ref().map_or(0, |l| l.dim),
        };
        let head = TaskHead::new(
            &mut params,
            config.task,
            head_in,
            config.num_classes,
            &mut rng,
        )?;
        Ok(FusionModel {
            config,
            params,
            gnn,
            sequence,
            serial_proj,
            fusion_layers,
            schedule,
            ligand,
            head,
        })
    }

    pub fn schedule(&self) -> &[(usize, usize)] {
        &self.schedule
    }

    pub fn fusion_layers(&self) -> &[FusionLayer] {
        &self.fusion_layers
    }

    pub fn gnn(&self) -> &GnnBranch {
        &self.gnn
    }

    fn sequence_start(
        &self,
        g: &mut Graph,
        seq: SequenceInput<'_>,
        n: usize,
    ) -> Result<Option<Var>> {
        let store = &self.params;
        let h0 = match (&self.sequence, seq) {
            (None, _) => return Ok(None),
            (Some(SequenceBranch::Toy(p)), SequenceInput::Tokens(t)) => p.embed(g, store, t)?,
            (Some(SequenceBranch::Precomputed(a)), SequenceInput::Embedding(e)) => {
                a.state(g, store, e)?.last()
            }
            (Some(SequenceBranch::Toy(_)), SequenceInput::Embedding(_)) => {
                return Err(Error::Config(
                    "model expects tokens, got a precomputed embedding".into(),
                ))
            }
            (Some(SequenceBranch::Precomputed(_)), SequenceInput::Tokens(_)) => {
                return Err(Error::Config("model expects precomputed embeddings".into()))
            }
        };
        if g.shape(h0)[0] != n {
            return Err(Error::LengthMismatch(format!(
                "{} sequence positions for {n} graph nodes",
                g.shape(h0)[0]
            )));
        }
        Ok(Some(h0))
    }

    /// Advances the sequence branch by one block.
    fn plm_step<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        layer: usize,
        h: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        match &self.sequence {
            Some(SequenceBranch::Toy(p)) => p.block(g, &self.params, layer, h, training, rng),
            // The frozen embedding is its own single layer.
            _ => Ok(h),
        }
    }

    /// Full forward pass: branches interleaved at the schedule, pooled and
    /// per-node readouts, and the task head.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        graph: &ProteinGraph,
        seq: SequenceInput<'_>,
        ligand: Option<&LigandGraph>,
        training: bool,
        rng: &mut R,
    ) -> Result<ModelOutput> {
        let store = &self.params;
        let mode = self.config.fusion.mode;
        let h0 = self.sequence_start(g, seq, graph.n)?;
        let mut plm_layers: Vec<Var> = h0.into_iter().collect();
        let plm_depth = self.config.plm_depth();

        let mut u = self.gnn.initial_state(g, store, graph)?;
        if mode == FusionMode::Serial {
            let mut h = plm_layers[0];
            for l in 0..plm_depth {
                h = self.plm_step(g, l, h, training, rng)?;
                plm_layers.push(h);
            }
            let proj = self
                .serial_proj
                .as_ref()
                .expect("serial mode has a projection");
            let s = serial_fuse(g, store, h, graph, proj)?;
            u = match self.gnn.torsion_features(g, store, graph)? {
                Some(t) => g.add(s, t)?,
                None => s,
            };
        }

        let features = self.gnn.edge_features(g, store, graph, training, rng)?;
        let sources: Vec<usize> = graph.edges.iter().map(|e| e.1).collect();
        let incoming = graph.incoming();
        let edges = EdgeInputs {
            features,
            sources: &sources,
            incoming: &incoming,
        };

        let mut gnn_layers = vec![u];
        let mut gates = Vec::new();
        let mut next_fusion = 0;
        for l in 0..=self.gnn.num_layers() {
            if l > 0 {
                u = self
                    .gnn
                    .interaction_block(g, store, l - 1, u, edges, training, rng)?;
            }
            while next_fusion < self.schedule.len() && self.schedule[next_fusion].0 == l {
                let target = self.schedule[next_fusion].1;
                while plm_layers.len() <= target {
                    let k = plm_layers.len() - 1;
                    let h = self.plm_step(g, k, plm_layers[k], training, rng)?;
                    plm_layers.push(h);
                }
                let layer = &self.fusion_layers[next_fusion];
                let h = *plm_layers.last().expect("sequence branch present");
                let x1 = layer.in_gnn.forward(g, store, u)?;
                let x2 = layer.in_plm.forward(g, store, h)?;
                let (f1, f2) = match mode {
                    FusionMode::LocalGated => {
                        let vote = layer.vote.as_ref().expect("local layer has a vote MLP");
                        let (x, gate) = local_gated_fuse(g, store, x1, x2, vote, rng)?;
                        gates.push(gate);
                        (x, x)
                    }
                    _ => {
                        let attn = layer
                            .attention
                            .as_ref()
                            .expect("global layer has attention");
                        let tags = layer.branch_tag.map(|t| g.param(store, t));
                        global_attention_fuse(g, store, x1, x2, attn, tags)?
                    }
                };
                let du = layer.out_gnn.forward(g, store, f1)?;
                let dh = layer.out_plm.forward(g, store, f2)?;
                u = g.add(u, du)?;
                let fused_h = g.add(h, dh)?;
                *plm_layers.last_mut().expect("nonempty") = fused_h;
                next_fusion += 1;
            }
            if l > 0 {
                gnn_layers.push(u);
            } else {
                gnn_layers[0] = u;
            }
        }
        if mode.is_bidirectional() {
            while plm_layers.len() <= plm_depth {
                let k = plm_layers.len() - 1;
                let h = self.plm_step(g, k, plm_layers[k], training, rng)?;
                plm_layers.push(h);
            }
        }

        let u_last = u;
        let (z, per_node) = if mode.is_bidirectional() {
            let h_last = *plm_layers.last().expect("nonempty");
            let zu = g.mean_pool(u_last, 0)?;
            let zh = g.mean_pool(h_last, 0)?;
            (g.concat(&[zu, zh], 0)?, g.concat(&[u_last, h_last], 1)?)
        } else {
            (g.mean_pool(u_last, 0)?, u_last)
        };
        let lig = match (&self.ligand, ligand) {
            (Some(enc), Some(l)) => Some(enc.forward(g, store, l)?),
            (Some(_), None) => return Err(Error::MissingLigand),
            (None, _) => None,
        };
        let prediction = self.head.predict(
            g,
            store,
            z,
            per_node,
            lig,
            self.config.head_dropout,
            training,
            rng,
        )?;
        Ok(ModelOutput {
            z,
            per_node,
            gnn_layers,
            plm_layers,
            gates,
            prediction,
        })
    }
}

/// Forward pass returning only `(z, per_node)`.
pub fn run_fused_model<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &FusionModel,
    graph: &ProteinGraph,
    seq: SequenceInput<'_>,
    ligand: Option<&LigandGraph>,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let out = model.forward(g, graph, seq, ligand, training, rng)?;
    Ok((out.z, out.per_node))
}

#[cfg(test)]
mod tests {
    use rand::{Rng as _, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::harness::synth::random_chain;
    use crate::protein::{build_graph, Level};
    use crate::tensor::Tensor;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn leaf(g: &mut Graph, n: usize, c: usize, r: &mut ChaCha8Rng) -> Var {
        let data = (0..n * c).map(|_| r.random_range(-2.0..2.0)).collect();
        g.leaf(Tensor::new(vec![n, c], data).unwrap())
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut r = rng(seed);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.tensor_mut(id).data_mut() {
                *v = r.random_range(-0.4..0.4);
            }
        }
    }

    fn config(mode: FusionMode, gnn_layers: usize, plm_layers: usize) -> ModelConfig {
        let mut c = ModelConfig::default();
        c.fusion.mode = mode;
        c.gnn.num_layers = gnn_layers;
        c.gnn.level = Level::Backbone;
        c.plm.num_layers = plm_layers;
        c.plm.max_len = 64;
        c
    }

    fn protein(len: usize) -> (ProteinGraph, Vec<usize>) {
        let s = random_chain("f", len, &mut rng(11));
        (build_graph(&s, 10.0, Level::Backbone).unwrap(), s.tokens())
    }

    fn values(g: &Graph, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().map(|v| g.value(*v).data().to_vec()).collect()
    }

    fn run(model: &FusionModel, graph: &ProteinGraph, tokens: &[usize]) -> (Graph, ModelOutput) {
        let mut g = Graph::new();
        let out = model
            .forward(
                &mut g,
                graph,
                SequenceInput::Tokens(tokens),
                None,
                false,
                &mut rng(0),
            )
            .unwrap();
        (g, out)
    }

    #[test]
    fn schedules() {
        assert_eq!(default_schedule(4, 2), vec![(1, 1), (2, 1), (3, 2), (4, 2)]);
        assert_eq!(default_schedule(2, 4), vec![(1, 2), (2, 4)]);
        assert_eq!(default_schedule(3, 3), vec![(1, 1), (2, 2), (3, 3)]);
        assert_eq!(parse_schedule(" 1:1, 3:2 ").unwrap(), vec![(1, 1), (3, 2)]);
        assert_eq!(parse_schedule("").unwrap(), vec![]);
        assert!(parse_schedule("1-1").is_err());
        assert!(parse_schedule("a:1").is_err());
        assert_eq!(format_schedule(&[(1, 1), (3, 2)]), "1:1,3:2");
        assert!(validate_schedule(&[(1, 1), (2, 1)], 2, 2).is_ok());
        assert!(validate_schedule(&[(1, 1), (1, 2)], 2, 2).is_err());
        assert!(validate_schedule(&[(1, 2), (2, 1)], 2, 2).is_err());
        assert!(validate_schedule(&[(3, 1)], 2, 2).is_err());
        assert!(validate_schedule(&[(1, 3)], 2, 2).is_err());
        for m in FusionMode::ALL {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("late".parse::<FusionMode>().is_err());
    }

    #[test]
    fn gates_are_convex_weights() {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let vote = Mlp::new(&mut store, "vote", &[6, 6, 2], false, &mut r);
        let mut g = Graph::new();
        let x1 = leaf(&mut g, 5, 6, &mut r);
        let x2 = leaf(&mut g, 5, 6, &mut r);
        let (x, gates) = local_gated_fuse(&mut g, &store, x1, x2, &vote, &mut r).unwrap();
        assert_eq!(g.shape(gates), &[5, 2]);
        for i in 0..5 {
            let row = g.value(gates).row(i);
            assert!((row[0] + row[1] - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|w| (0.0..=1.0).contains(w)));
            for j in 0..6 {
                let (a, b) = (g.value(x1).at(i, j), g.value(x2).at(i, j));
                let v = g.value(x).at(i, j);
                assert!(v >= a.min(b) - 1e-12 && v <= a.max(b) + 1e-12);
                assert!((v - (row[0] * a + row[1] * b)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_votes_average_and_saturated_votes_select() {
        let mut store = ParamStore::new();
        let mut r = rng(2);
        let vote = Mlp::new(&mut store, "vote", &[4, 4, 2], false, &mut r);
        store.zero_prefix("vote");
        let mut g = Graph::new();
        let x1 = leaf(&mut g, 3, 4, &mut r);
        let x2 = leaf(&mut g, 3, 4, &mut r);
        let (x, _) = local_gated_fuse(&mut g, &store, x1, x2, &vote, &mut r).unwrap();
        for ((v, a), b) in g
            .value(x)
            .data()
            .iter()
            .zip(g.value(x1).data())
            .zip(g.value(x2).data())
        {
            assert!((v - 0.5 * (a + b)).abs() < 1e-15);
        }

        store.set("vote.1.bias", &[10.0, -10.0]).unwrap();
        let mut g2 = Graph::new();
        let y1 = g2.leaf(g.value(x1).detached());
        let y2 = g2.leaf(g.value(x2).detached());
        let (x, gates) = local_gated_fuse(&mut g2, &store, y1, y2, &vote, &mut r).unwrap();
        assert!(g2.value(gates).data().chunks(2).all(|w| w[0] > 1.0 - 1e-15));
        for (v, a) in g2.value(x).data().iter().zip(g2.value(y1).data()) {
            assert!((v - a).abs() < 1e-15 * 4.0);
        }
    }

    #[test]
    fn global_attention_shapes_identity_and_equivariance() {
        let c = 8;
        for n in [1, 2, 17] {
            let mut store = ParamStore::new();
            let mut r = rng(n as u64);
            let attn = MhaParams::new(&mut store, "a", c, 2, false, &mut r).unwrap();
            let tags = store.uniform("tag", &[2, c], 1, &mut r);
            let mut g = Graph::new();
            let x1 = leaf(&mut g, n, c, &mut r);
            let x2 = leaf(&mut g, n, c, &mut r);
            let t = g.param(&store, tags);
            let (y1, y2) = global_attention_fuse(&mut g, &store, x1, x2, &attn, Some(t)).unwrap();
            assert_eq!(g.shape(y1), &[n, c]);
            assert_eq!(g.shape(y2), &[n, c]);

            let perm: Vec<usize> = (0..n).rev().collect();
            let p1 = g.gather_rows(x1, &perm).unwrap();
            let p2 = g.gather_rows(x2, &perm).unwrap();
            let (q1, q2) = global_attention_fuse(&mut g, &store, p1, p2, &attn, Some(t)).unwrap();
            for (y, q) in [(y1, q1), (y2, q2)] {
                for (i, &p) in perm.iter().enumerate() {
                    for (a, b) in g.value(q).row(i).iter().zip(g.value(y).row(p)) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }

            let zero = MhaParams::new(&mut store, "z", c, 2, true, &mut r).unwrap();
            let (z1, z2) = global_attention_fuse(&mut g, &store, x1, x2, &zero, Some(t)).unwrap();
            assert_eq!(g.value(z1).data(), g.value(x1).data());
            assert_eq!(g.value(z2).data(), g.value(x2).data());
        }
    }

    #[test]
    fn serial_identity_projection() {
        let (graph, _) = protein(5);
        let mut store = ParamStore::new();
        let proj = Linear::zeroed(&mut store, "p", 4, 4);
        let eye: Vec<f64> = (0..16)
            .map(|k| if k % 5 == 0 { 1.0 } else { 0.0 })
            .collect();
        store.set("p.weight", &eye).unwrap();
        let mut g = Graph::new();
        let h = leaf(&mut g, 5, 4, &mut rng(3));
        let u = serial_fuse(&mut g, &store, h, &graph, &proj).unwrap();
        assert_eq!(g.value(u).data(), g.value(h).data());
        let short = leaf(&mut g, 4, 4, &mut rng(3));
        assert!(matches!(
            serial_fuse(&mut g, &store, short, &graph, &proj),
            Err(Error::LengthMismatch(_))
        ));
    }

    #[test]
    fn fresh_fusion_leaves_gnn_half_unchanged() {
        let (graph, tokens) = protein(9);
        let base = FusionModel::new(config(FusionMode::None, 3, 2), 5).unwrap();
        let (gb, ob) = run(&base, &graph, &tokens);
        let h = base.config.gnn.hidden_dim;
        for mode in [FusionMode::LocalGated, FusionMode::GlobalAttention] {
            let model = FusionModel::new(config(mode, 3, 2), 5).unwrap();
            assert_eq!(model.schedule().len(), 3);
            let (g, o) = run(&model, &graph, &tokens);
            assert_eq!(
                values(&g, &o.gnn_layers),
                values(&gb, &ob.gnn_layers),
                "{mode}"
            );
            assert_eq!(&g.value(o.z).data()[..h], gb.value(ob.z).data(), "{mode}");
            assert_eq!(g.shape(o.z), &[h + model.config.plm.d_model]);
            assert_eq!(g.shape(o.per_node), &[9, h + model.config.plm.d_model]);
            assert_eq!(o.plm_layers.len(), 3);
        }
    }

    #[test]
    fn empty_schedule_matches_mode_none() {
        let (graph, tokens) = protein(7);
        let mut base = FusionModel::new(config(FusionMode::None, 2, 2), 9).unwrap();
        randomize(&mut base.params, 1);
        let (gb, ob) = run(&base, &graph, &tokens);
        let mut cfg = config(FusionMode::GlobalAttention, 2, 2);
        cfg.fusion.schedule = Some(Vec::new());
        let mut model = FusionModel::new(cfg, 9).unwrap();
        assert!(model.fusion_layers().is_empty());
        randomize(&mut model.params, 1);
        let (g, o) = run(&model, &graph, &tokens);
        assert_eq!(values(&g, &o.gnn_layers), values(&gb, &ob.gnn_layers));
    }

    #[test]
    fn layers_before_first_exchange_match_mode_none() {
        let (graph, tokens) = protein(8);
        let base = FusionModel::new(config(FusionMode::None, 3, 2), 4).unwrap();
        let (gb, ob) = run(&base, &graph, &tokens);
        for mode in [FusionMode::LocalGated, FusionMode::GlobalAttention] {
            let mut cfg = config(mode, 3, 2);
            cfg.fusion.schedule = Some(vec![(2, 1)]);
            let mut model = FusionModel::new(cfg, 4).unwrap();
            let ids: Vec<_> = model.params.ids().collect();
            let mut r = rng(6);
            for id in ids {
                if model.params.name(id).starts_with("fusion") {
                    for v in model.params.tensor_mut(id).data_mut() {
                        *v = r.random_range(-0.5..0.5);
                    }
                }
            }
            let (g, o) = run(&model, &graph, &tokens);
            let ours = values(&g, &o.gnn_layers);
            let theirs = values(&gb, &ob.gnn_layers);
            assert_eq!(ours[..2], theirs[..2], "{mode}");
            assert_ne!(ours[2], theirs[2], "{mode}");
            if mode == FusionMode::LocalGated {
                assert_eq!(o.gates.len(), 1);
            }
        }
    }

    fn grad_norm(store: &ParamStore, prefix: &str) -> f64 {
        store
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .flat_map(|(_, t)| t.grad().unwrap_or(&[]).iter().map(|v| v * v))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn gradients_cross_between_branches() {
        let (graph, tokens) = protein(6);
        for mode in [FusionMode::LocalGated, FusionMode::GlobalAttention] {
            let mut model = FusionModel::new(config(mode, 2, 2), 3).unwrap();
            randomize(&mut model.params, 8);
            let h = model.config.gnn.hidden_dim;
            let d = model.config.plm.d_model;
            for (start, len, other) in [(0, h, "plm.block"), (h, d, "gnn.block0")] {
                model.params.zero_grad();
                let (mut g, o) = run(&model, &graph, &tokens);
                let part = g.slice(o.z, 0, start, len).unwrap();
                let loss = g.sum_all(part).unwrap();
                g.backward_into(loss, &mut model.params).unwrap();
                assert!(
                    grad_norm(&model.params, other) > 1e-8,
                    "{mode}: no gradient reaches {other}"
                );
            }
        }
    }

    #[test]
    fn serial_mode_uses_sequence_output() {
        let (graph, tokens) = protein(6);
        let model = FusionModel::new(config(FusionMode::Serial, 2, 2), 3).unwrap();
        assert!(model.fusion_layers().is_empty());
        let (g, o) = run(&model, &graph, &tokens);
        assert_eq!(o.plm_layers.len(), 3);
        assert_eq!(g.shape(o.z), &[model.config.gnn.hidden_dim]);
        let mut other = tokens.clone();
        other[0] = (other[0] + 1) % 20;
        let (g2, o2) = run(&model, &graph, &other);
        assert_ne!(g.value(o.z).data(), g2.value(o2.z).data());
        assert!(model
            .forward(
                &mut Graph::new(),
                &graph,
                SequenceInput::Tokens(&tokens[..5]),
                None,
                false,
                &mut rng(0)
            )
            .is_err());
    }
}
