//! Sequence branch: a small pre-norm transformer encoder over residue tokens,
//! or frozen precomputed embeddings standing in for a large language model.

use rand::Rng;

use crate::error::{Error, Result};
use crate::protein::embedding::Embedding;
use crate::tensor::{
    multihead_self_attention, Graph, Linear, MhaParams, Mlp, ParamId, ParamStore, Tensor, Var,
};

/// 21 residue types plus one padding token.
pub const VOCAB_SIZE: usize = 22;
pub const DEFAULT_MAX_LEN: usize = 1024;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct PlmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
    pub dropout_p: f64,
}

impl Default for PlmConfig {
    fn default() -> Self {
        PlmConfig {
            vocab_size: VOCAB_SIZE,
            d_model: 16,
            num_layers: 2,
            num_heads: 2,
            ffn_dim: 32,
            max_len: DEFAULT_MAX_LEN,
            dropout_p: 0.0,
        }
    }
}

impl PlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads)
        {
            return Err(Error::HeadCount {
                dim: self.d_model,
                heads: self.num_heads,
            });
        }
        if self.vocab_size == 0 || self.ffn_dim == 0 || self.max_len == 0 {
            return Err(Error::Config(
                "pLM vocab, ffn and max_len must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

/// Per-layer token representations `h[0..=L]`, each `[n, d_model]`.
#[derive(Clone, Debug)]
pub struct PlmState {
    pub layers: Vec<Var>,
}

impl PlmState {
    pub fn last(&self) -> Var {
        *self
            .layers
            .last()
            .expect("a state holds at least the embedding layer")
    }
}

#[derive(Clone, Debug)]
struct Block {
    attn: MhaParams,
    ffn: Mlp,
}

/// Token and learned positional embeddings followed by pre-norm blocks
/// `h += MHA(LN(h)); h += FFN(LN(h))`. Parameter names start with `plm.`.
#[derive(Clone, Debug)]
pub struct PlmBranch {
    pub config: PlmConfig,
    token_embed: ParamId,
    pos_embed: ParamId,
    blocks: Vec<Block>,
}

impl PlmBranch {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: PlmConfig,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let token_embed = store.uniform("plm.token_embed", &[config.vocab_size, d], 1, rng);
        let pos_embed = store.uniform("plm.pos_embed", &[config.max_len, d], 1, rng);
        let blocks = (0..config.num_layers)
            .map(|l| {
                Ok(Block {
                    attn: MhaParams::new(
                        store,
                        &format!("plm.block{l}.attn"),
                        d,
                        config.num_heads,
                        false,
                        rng,
                    )?,
                    ffn: Mlp::new(
                        store,
                        &format!("plm.block{l}.ffn"),
                        &[d, config.ffn_dim, d],
                        false,
                        rng,
                    ),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PlmBranch {
            config,
            token_embed,
            pos_embed,
            blocks,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    /// `h[0]`: token plus positional embedding.
    pub fn embed(&self, g: &mut Graph, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if tokens.len() > self.config.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.config.max_len,
            });
        }
        if tokens.is_empty() {
            return Err(Error::EmptyStructure);
        }
        if let Some(t) = tokens.iter().find(|t| **t >= self.config.vocab_size) {
            return Err(Error::shape(
                "plm.embed",
                format!("token {t} >= vocab {}", self.config.vocab_size),
            ));
        }
        let tok_table = g.param(store, self.token_embed);
        let pos_table = g.param(store, self.pos_embed);
        let tok = g.embedding(tok_table, tokens)?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.embedding(pos_table, &positions)?;
        g.add(tok, pos)
    }

    /// Applies block `layer` (0-based) to `h`.
    pub fn block<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        h: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let b = &self.blocks[layer];
        let p = self.config.dropout_p;
        let x = g.layer_norm(h, LN_EPS)?;
        let a = multihead_self_attention(g, store, x, &b.attn, None)?.output;
        let a = g.dropout(a, p, training, rng)?;
        let h = g.add(h, a)?;
        let x = g.layer_norm(h, LN_EPS)?;
        let f = b.ffn.forward(g, store, x, p, training, rng)?;
        let f = g.dropout(f, p, training, rng)?;
        g.add(h, f)
    }

    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<PlmState> {
        let mut layers = vec![self.embed(g, store, tokens)?];
        for l in 0..self.blocks.len() {
            let h = self.block(g, store, l, layers[l], training, rng)?;
            layers.push(h);
        }
        Ok(PlmState { layers })
    }
}

/// Reads a BHEM file.
pub fn load_precomputed(path: impl AsRef<std::path::Path>) -> Result<Embedding> {
    Embedding::load(path)
}

/// Frozen embedding as a one-layer state `h[0] = h[1]`, passed through a
/// trainable `adapter.` projection when its width differs from `d_model`.
#[derive(Clone, Debug)]
pub struct PrecomputedAdapter {
    pub input_dim: usize,
    pub d_model: usize,
    pub adapter: Option<Linear>,
}

impl PrecomputedAdapter {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_dim: usize,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        let adapter =
            (input_dim != d_model).then(|| Linear::new(store, "adapter", input_dim, d_model, rng));
        PrecomputedAdapter {
            input_dim,
            d_model,
            adapter,
        }
    }

    pub fn state(&self, g: &mut Graph, store: &ParamStore, emb: &Embedding) -> Result<PlmState> {
        if emb.dim != self.input_dim {
            return Err(Error::shape(
                "precomputed embedding",
                format!("width {} but the model expects {}", emb.dim, self.input_dim),
            ));
        }
        let data = emb.data.iter().map(|v| f64::from(*v)).collect();
        let h = g.constant(Tensor::new(vec![emb.n_residues, emb.dim], data)?);
        let h = match &self.adapter {
            Some(a) => a.forward(g, store, h)?,
            None => h,
        };
        Ok(PlmState { layers: vec![h, h] })
    }
}
