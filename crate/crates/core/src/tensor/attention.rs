use rand::Rng;

use super::{Graph, Linear, ParamStore, Tensor, Var};
use crate::error::{Error, Result};

const MASK_NEG: f64 = -1e30;

/// Projections of a multi-head self-attention layer.
#[derive(Clone, Debug)]
pub struct MhaParams {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub dim: usize,
    pub num_heads: usize,
}

impl MhaParams {
    /// Random Q/K/V projections. The output projection is zeroed when
    /// `zero_output` is set, making the layer initially emit zeros.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        num_heads: usize,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_heads == 0 || !dim.is_multiple_of(num_heads) {
            return Err(Error::HeadCount {
                dim,
                heads: num_heads,
            });
        }
        let output = if zero_output {
            Linear::zeroed(store, &format!("{name}.out"), dim, dim)
        } else {
            Linear::new(store, &format!("{name}.out"), dim, dim, rng)
        };
        Ok(MhaParams {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output,
            dim,
            num_heads,
        })
    }
}

#[derive(Debug)]
pub struct AttentionOutput {
    /// `[n, dim]`, same shape as the input.
    pub output: Var,
    /// One `[n, n]` row-stochastic weight matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product self-attention over the rows of `x: [n, dim]`.
///
/// `mask[i] == false` removes position `i`: no query attends to it and its own
/// output row is zero.
pub fn multihead_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: Var,
    params: &MhaParams,
    mask: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != params.dim {
        return Err(Error::shape(
            "multihead_self_attention",
            format!("{shape:?} for dim {}", params.dim),
        ));
    }
    let (n, dim, heads) = (shape[0], params.dim, params.num_heads);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::HeadCount { dim, heads });
    }
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::shape(
                "multihead_self_attention",
                format!("mask of {} for {n} rows", m.len()),
            ));
        }
    }
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let q = params.query.forward(g, store, x)?;
    let k = params.key.forward(g, store, x)?;
    let v = params.value.forward(g, store, x)?;
    let sizes = vec![head_dim; heads];
    let qs = g.split(q, &sizes, 1)?;
    let ks = g.split(k, &sizes, 1)?;
    let vs = g.split(v, &sizes, 1)?;

    let key_bias = mask.map(|m| {
        let row: Vec<f64> = m
            .iter()
            .map(|keep| if *keep { 0.0 } else { MASK_NEG })
            .collect();
        let data = (0..n).flat_map(|_| row.iter().copied()).collect();
        g.constant(Tensor::new(vec![n, n], data).expect("n x n"))
    });

    let mut weights = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let kt = g.transpose(ks[h])?;
        let scores = g.matmul(qs[h], kt)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(bias) = key_bias {
            scores = g.add(scores, bias)?;
        }
        let w = g.softmax(scores, 1)?;
        outs.push(g.matmul(w, vs[h])?);
        weights.push(w);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        g.concat(&outs, 1)?
    };
    let mut output = params.output.forward(g, store, merged)?;
    if let Some(m) = mask {
        let keep = Tensor::new(
            vec![n, 1],
            m.iter().map(|k| if *k { 1.0 } else { 0.0 }).collect(),
        )?;
        let keep = g.constant(keep);
        output = g.mul_col(output, keep)?;
    }
    Ok(AttentionOutput { output, weights })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn setup(dim: usize, heads: usize, zero_out: bool) -> (ParamStore, MhaParams) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = MhaParams::new(&mut store, "att", dim, heads, zero_out, &mut rng).unwrap();
        (store, p)
    }

    fn random_input(g: &mut Graph, n: usize, d: usize, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        g.constant(Tensor::new(vec![n, d], data).unwrap())
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            MhaParams::new(&mut store, "a", 6, 4, false, &mut rng),
            Err(Error::HeadCount { .. })
        ));
    }

    #[test]
    fn preserves_shape() {
        let (store, p) = setup(8, 2, false);
        for n in [1, 2, 5, 17] {
            let mut g = Graph::new();
            let x = random_input(&mut g, n, 8, n as u64);
            let out = multihead_self_attention(&mut g, &store, x, &p, None).unwrap();
            assert_eq!(g.shape(out.output), &[n, 8]);
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, p) = setup(4, 2, false);
        let mut g = Graph::new();
        let x = random_input(&mut g, 1, 4, 9);
        let out = multihead_self_attention(&mut g, &store, x, &p, None).unwrap();
        for w in &out.weights {
            assert_eq!(g.value(*w).data(), &[1.0]);
        }
        // With weight 1 the head output is the value projection itself.
        let v = p.value.forward(&mut g, &store, x).unwrap();
        let expected = p.output.forward(&mut g, &store, v).unwrap();
        for (a, b) in g
            .value(out.output)
            .data()
            .iter()
            .zip(g.value(expected).data())
        {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_output_projection_gives_zero() {
        let (store, p) = setup(4, 1, true);
        let mut g = Graph::new();
        let x = random_input(&mut g, 3, 4, 2);
        let out = multihead_self_attention(&mut g, &store, x, &p, None).unwrap();
        assert!(g.value(out.output).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_tokens_match_hand_computation() {
        // dim 1, one head: q = 2x, k = x, v = 3x, out = v. Scale 1/sqrt(1).
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = MhaParams::new(&mut store, "att", 1, 1, false, &mut rng).unwrap();
        store.set("att.q.weight", &[2.0]).unwrap();
        store.set("att.k.weight", &[1.0]).unwrap();
        store.set("att.v.weight", &[3.0]).unwrap();
        store.set("att.out.weight", &[1.0]).unwrap();
        let xs = [0.5, -1.0];
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 1], xs.to_vec()).unwrap());
        let out = multihead_self_attention(&mut g, &store, x, &p, None).unwrap();
        for i in 0..2 {
            let s: Vec<f64> = xs.iter().map(|xj| 2.0 * xs[i] * xj).collect();
            let e: Vec<f64> = s.iter().map(|v| v.exp()).collect();
            let z = e[0] + e[1];
            let expected = (e[0] * 3.0 * xs[0] + e[1] * 3.0 * xs[1]) / z;
            assert!((g.value(out.output).data()[i] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn masked_positions_get_no_weight_and_zero_rows() {
        let (store, p) = setup(4, 2, false);
        let mut g = Graph::new();
        let x = random_input(&mut g, 3, 4, 4);
        let mask = [true, false, true];
        let out = multihead_self_attention(&mut g, &store, x, &p, Some(&mask)).unwrap();
        for w in &out.weights {
            let w = g.value(*w);
            for i in 0..3 {
                assert_eq!(w.at(i, 1), 0.0);
            }
        }
        assert!(g.value(out.output).row(1).iter().all(|v| *v == 0.0));

        let none = [false, false, false];
        let out = multihead_self_attention(&mut g, &store, x, &p, Some(&none)).unwrap();
        assert!(g.value(out.output).data().iter().all(|v| *v == 0.0));
    }
}
