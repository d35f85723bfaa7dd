//! Layers built on [`Graph`]: linear maps, MLPs, layer norm, multi-head
//! attention and a post-norm transformer encoder.
//!
//! Layers only hold [`ParamId`]s; values live in the [`ParamStore`] so the
//! same layer can run against an `f32` store for training and an `f64` copy
//! for gradient checks.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, SeqBatch, Var};
use crate::param::{ParamId, ParamStore, INIT_STD};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// `{name}.weight` is `in x out`, `{name}.bias` is `out`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.gaussian(&format!("{name}.weight"), &[in_dim, out_dim], INIT_STD)?;
        let bias = if bias {
            Some(store.gaussian(&format!("{name}.bias"), &[out_dim], INIT_STD)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let y = g.matmul(x, w, false)?;
        match self.bias {
            Some(b) => {
                let b = g.param(b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Stack of linear layers with an activation between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; layer `i` is named `{name}.{i}`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dims: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(CoreError::Invalid(format!("{name}: mlp needs at least two dims")));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true))
            .collect::<Result<_>>()?;
        Ok(Mlp { layers, activation })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(g, h);
            }
        }
        Ok(h)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    /// Scale starts at one and shift at zero, so a fresh layer is a pure
    /// normalization.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: store.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: store.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || self.ffn_dim == 0 || self.max_seq_len == 0 {
            return Err(CoreError::Invalid(format!("encoder dims must be positive: {self:?}")));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(CoreError::Invalid(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Multi-head self/cross attention. The key projection has no bias: a key
/// bias only shifts every score of a query by the same amount, which softmax
/// ignores.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(CoreError::Invalid(format!("{name}: {dim} not divisible by {heads} heads")));
        }
        Ok(MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, true)?,
            key: Linear::new(store, &format!("{name}.key"), dim, dim, false)?,
            value: Linear::new(store, &format!("{name}.value"), dim, dim, true)?,
            output: Linear::new(store, &format!("{name}.output"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, q: Var, k: Var, v: Var, batch: &SeqBatch) -> Result<Var> {
        let qp = self.query.forward(g, q)?;
        let kp = self.key.forward(g, k)?;
        let vp = self.value.forward(g, v)?;
        let ctx = g.attention(qp, kp, vp, self.heads, batch)?;
        self.output.forward(g, ctx)
    }
}

/// Post-norm block: `h = LN(x + Attn(x)); out = LN(h + FFN(h))`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        Ok(EncoderLayer {
            attention: MultiHeadAttention::new(store, &format!("{name}.attn"), cfg.model_dim, cfg.num_heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), cfg.model_dim)?,
            ffn: Mlp::new(
                store,
                &format!("{name}.ffn"),
                &[cfg.model_dim, cfg.ffn_dim, cfg.model_dim],
                Activation::Gelu,
            )?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), cfg.model_dim)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var, batch: &SeqBatch) -> Result<Var> {
        let a = self.attention.forward(g, x, x, x, batch)?;
        let h = g.add(x, a)?;
        let h = self.norm1.forward(g, h)?;
        let f = self.ffn.forward(g, h)?;
        let out = g.add(h, f)?;
        self.norm2.forward(g, out)
    }
}

/// Bidirectional transformer encoder; returns the last layer's states.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub config: EncoderConfig,
}

impl TransformerEncoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.num_layers)
            .map(|i| EncoderLayer::new(store, &format!("{name}.layer{i}"), &config))
            .collect::<Result<_>>()?;
        Ok(TransformerEncoder { layers, config })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, h0: Var, batch: &SeqBatch) -> Result<Var> {
        let (rows, cols) = g.shape(h0);
        if cols != self.config.model_dim || rows != batch.rows() {
            return Err(CoreError::ShapeMismatch {
                op: "transformer_encode",
                expected: format!("({}, {})", batch.rows(), self.config.model_dim),
                actual: format!("({rows}, {cols})"),
            });
        }
        if batch.max_len() > self.config.max_seq_len {
            return Err(CoreError::Invalid(format!(
                "sequence length {} exceeds max_seq_len {}",
                batch.max_len(),
                self.config.max_seq_len
            )));
        }
        let mut h = h0;
        for layer in &self.layers {
            h = layer.forward(g, h, batch)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::model_grad_check;
    use crate::param::gaussian_tensor;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn cfg(layers: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: layers,
            num_heads: 2,
            model_dim: 4,
            ffn_dim: 8,
            max_seq_len: 8,
        }
    }

    /// Re-draws every parameter with a larger scale so gradients are well
    /// above the finite-difference noise floor.
    fn rescale(store: &mut ParamStore<f64>, seed: u64, std: f64) {
        store.reinit_prefix("", seed, std).unwrap();
    }

    fn input(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        gaussian_tensor(seed, &[rows, cols], 1.0).unwrap()
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let mut c = cfg(1);
        c.num_heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_token_attention_is_output_of_value_projection() {
        let mut store = ParamStore::<f64>::new(3);
        let mha = MultiHeadAttention::new(&mut store, "a", 4, 2).unwrap();
        rescale(&mut store, 3, 0.5);
        let x = input(1, 4, 9);
        let batch = SeqBatch::single(vec![true]).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant_tensor(&x);
        let out = mha.forward(&mut g, xv, xv, xv, &batch).unwrap();
        let v = mha.value.forward(&mut g, xv).unwrap();
        let expected = mha.output.forward(&mut g, v).unwrap();
        for (a, b) in g.value(out).iter().zip(g.value(expected)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_get_uniform_weights() {
        // q and k rows identical, v distinct: output must be the mean of v.
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store);
        let q = g.constant(3, 2, vec![0.3, -0.2, 0.3, -0.2, 0.3, -0.2]).unwrap();
        let v = g.constant(3, 2, vec![1.0, 0.0, 0.0, 3.0, 2.0, 6.0]).unwrap();
        let batch = SeqBatch::packed(&[3]).unwrap();
        let out = g.attention(q, q, v, 1, &batch).unwrap();
        for row in g.value(out).chunks(2) {
            assert!((row[0] - 1.0).abs() < 1e-12 && (row[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_two_head_attention_matches_hand_oracle() {
        // d = 2, two heads of width 1; projections are identity-like but
        // distinct per role so the oracle is easy to write out.
        let mut store = ParamStore::<f64>::new(0);
        let mha = MultiHeadAttention::new(&mut store, "a", 2, 2).unwrap();
        let set = |s: &mut ParamStore<f64>, id, data: Vec<f64>| {
            let shape = s.get(id).value.shape().to_vec();
            s.set_value(id, Tensor::new(shape, data).unwrap()).unwrap();
        };
        set(&mut store, mha.query.weight, vec![1.0, 0.0, 0.0, 2.0]);
        set(&mut store, mha.key.weight, vec![0.5, 0.0, 1.0, 1.0]);
        set(&mut store, mha.value.weight, vec![1.0, 1.0, 0.0, -1.0]);
        set(&mut store, mha.output.weight, vec![1.0, 0.0, 0.0, 1.0]);
        for b in [mha.query.bias, mha.value.bias, mha.output.bias] {
            set(&mut store, b.unwrap(), vec![0.0, 0.0]);
        }
        let x = [[1.0, 2.0], [-1.0, 0.5]];

        // oracle
        let proj = |w: [[f64; 2]; 2], r: [f64; 2]| [r[0] * w[0][0] + r[1] * w[1][0], r[0] * w[0][1] + r[1] * w[1][1]];
        let qs = x.map(|r| proj([[1.0, 0.0], [0.0, 2.0]], r));
        let ks = x.map(|r| proj([[0.5, 0.0], [1.0, 1.0]], r));
        let vs = x.map(|r| proj([[1.0, 1.0], [0.0, -1.0]], r));
        let mut expected = [[0.0; 2]; 2];
        for i in 0..2 {
            for h in 0..2 {
                let s: Vec<f64> = (0..2).map(|j| qs[i][h] * ks[j][h]).collect(); // scale 1/sqrt(1)
                let z: f64 = s.iter().map(|v| v.exp()).sum();
                expected[i][h] = (0..2).map(|j| s[j].exp() / z * vs[j][h]).sum();
            }
        }

        let mut g = Graph::new(&store);
        let xv = g.constant(2, 2, x.concat()).unwrap();
        let batch = SeqBatch::packed(&[2]).unwrap();
        let out = mha.forward(&mut g, xv, xv, xv, &batch).unwrap();
        for (a, b) in g.value(out).iter().zip(expected.concat()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_layers_is_identity() {
        let mut store = ParamStore::<f32>::new(0);
        let enc = TransformerEncoder::new(&mut store, "enc", cfg(0)).unwrap();
        let x = input(3, 4, 1).cast::<f32>();
        let mut g = Graph::new(&store);
        let xv = g.constant_tensor(&x);
        let out = enc.forward(&mut g, xv, &SeqBatch::packed(&[3]).unwrap()).unwrap();
        assert_eq!(g.value(out), x.data());
    }

    #[test]
    fn masked_padding_does_not_change_real_positions() {
        let mut store = ParamStore::<f64>::new(5);
        let enc = TransformerEncoder::new(&mut store, "enc", cfg(2)).unwrap();
        rescale(&mut store, 5, 0.3);
        let x = input(3, 4, 2);
        let pad = input(2, 4, 77);

        let mut g = Graph::new(&store);
        let xv = g.constant_tensor(&x);
        let plain = enc.forward(&mut g, xv, &SeqBatch::packed(&[3]).unwrap()).unwrap();

        let mut padded = x.data().to_vec();
        padded.extend_from_slice(pad.data());
        let pv = g.constant(5, 4, padded).unwrap();
        let mask = vec![true, true, true, false, false];
        let out = enc.forward(&mut g, pv, &SeqBatch::single(mask).unwrap()).unwrap();
        for (a, b) in g.value(plain).iter().zip(&g.value(out)[..12]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fresh_layer_norm_outputs_are_standardized() {
        let mut store = ParamStore::<f32>::new(0);
        let ln = LayerNorm::new(&mut store, "ln", 16).unwrap();
        let x = gaussian_tensor::<f32>(4, &[5, 16], 3.0).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant_tensor(&x);
        let y = ln.forward(&mut g, xv).unwrap();
        for row in g.value(y).chunks(16) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / 16.0;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            // eps inside the sqrt shrinks the variance by a factor var/(var+eps)
            assert!((var - 1.0).abs() < 1e-5, "{var}");
        }
    }

    #[test]
    fn zeroed_output_projections_reduce_to_layer_norm_chain() {
        let mut store = ParamStore::<f64>::new(2);
        let enc = TransformerEncoder::new(&mut store, "enc", cfg(2)).unwrap();
        rescale(&mut store, 2, 0.4);
        for layer in &enc.layers {
            for lin in [&layer.attention.output, layer.ffn.layers.last().unwrap()] {
                for id in [Some(lin.weight), lin.bias].into_iter().flatten() {
                    let shape = store.get(id).value.shape().to_vec();
                    store.set_value(id, Tensor::zeros(&shape).unwrap()).unwrap();
                }
            }
        }
        let x = input(4, 4, 3);
        let mut g = Graph::new(&store);
        let xv = g.constant_tensor(&x);
        let out = enc.forward(&mut g, xv, &SeqBatch::packed(&[4]).unwrap()).unwrap();
        let mut h = xv;
        for layer in &enc.layers {
            h = layer.norm1.forward(&mut g, h).unwrap();
            h = layer.norm2.forward(&mut g, h).unwrap();
        }
        for (a, b) in g.value(out).iter().zip(g.value(h)) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_width_and_overlong_sequences() {
        let mut store = ParamStore::<f32>::new(0);
        let enc = TransformerEncoder::new(&mut store, "enc", cfg(1)).unwrap();
        let mut g = Graph::new(&store);
        let bad = g.constant(2, 3, vec![0.0; 6]).unwrap();
        assert!(matches!(
            enc.forward(&mut g, bad, &SeqBatch::packed(&[2]).unwrap()),
            Err(CoreError::ShapeMismatch { .. })
        ));
        let long = g.constant(9, 4, vec![0.0; 36]).unwrap();
        assert!(enc.forward(&mut g, long, &SeqBatch::packed(&[9]).unwrap()).is_err());
    }

    /// Objective `sum(out * proj)` with a fixed random projection.
    fn projected_check(store: &ParamStore<f64>, seed: u64, rows: usize, cols: usize, f: impl Fn(&mut Graph<f64>, Var) -> Result<Var>) -> (f64, String) {
        let x = input(rows, 4, seed + 100);
        let proj = input(rows, cols, seed + 200);
        model_grad_check(store, 1e-5, |g| {
            let xv = g.constant_tensor(&x);
            let out = f(g, xv)?;
            let w = g.constant_tensor(&proj);
            let prod = g.mul(out, w)?;
            Ok(g.sum(prod))
        })
        .unwrap()
    }

    #[test]
    fn each_layer_type_passes_double_precision_grad_check() {
        let batch = SeqBatch::from_blocks(&[3, 2], vec![true, true, false, true, true]).unwrap();
        for seed in 0..10u64 {
            let mut store = ParamStore::<f64>::new(seed);
            let lin = Linear::new(&mut store, "lin", 4, 3, true).unwrap();
            let mlp = Mlp::new(&mut store, "mlp", &[4, 6, 2], Activation::Gelu).unwrap();
            let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
            let mha = MultiHeadAttention::new(&mut store, "mha", 4, 2).unwrap();
            rescale(&mut store, seed, 0.5);
            let checks: Vec<(f64, String)> = vec![
                projected_check(&store, seed, 5, 3, |g, x| lin.forward(g, x)),
                projected_check(&store, seed, 5, 2, |g, x| mlp.forward(g, x)),
                projected_check(&store, seed, 5, 4, |g, x| ln.forward(g, x)),
                projected_check(&store, seed, 5, 4, |g, x| mha.forward(g, x, x, x, &batch)),
            ];
            for (err, name) in checks {
                assert!(err <= 1e-6, "seed {seed}: {name} error {err}");
            }
        }
    }

    #[test]
    fn encoder_stack_passes_grad_check() {
        let batch = SeqBatch::from_blocks(&[3, 2], vec![true, true, false, true, true]).unwrap();
        for seed in 0..10u64 {
            let mut store = ParamStore::<f64>::new(seed);
            let enc = TransformerEncoder::new(&mut store, "enc", cfg(2)).unwrap();
            rescale(&mut store, seed, 0.5);
            let (err, name) = projected_check(&store, seed, 5, 4, |g, x| enc.forward(g, x, &batch));
            assert!(err <= 1e-3, "seed {seed}: {name} error {err}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut store = ParamStore::<f32>::new(9);
            let enc = TransformerEncoder::new(&mut store, "enc", cfg(2)).unwrap();
            let x = input(4, 4, 1).cast::<f32>();
            let mut g = Graph::new(&store);
            let xv = g.constant_tensor(&x);
            let out = enc.forward(&mut g, xv, &SeqBatch::packed(&[4]).unwrap()).unwrap();
            g.value(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    proptest! {
        #[test]
        fn softmax_is_normalized_and_shift_invariant(
            row in proptest::collection::vec(-20.0f64..20.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let store = ParamStore::<f64>::new(0);
            let mut g = Graph::new(&store);
            let n = row.len();
            let a = g.constant(1, n, row.clone()).unwrap();
            let b = g.constant(1, n, row.iter().map(|v| v + shift).collect()).unwrap();
            let sa = g.softmax_rows(a);
            let sb = g.softmax_rows(b);
            let total: f64 = g.value(sa).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-6);
            prop_assert!(g.value(sa).iter().all(|&p| p >= 0.0));
            for (x, y) in g.value(sa).iter().zip(g.value(sb)) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
