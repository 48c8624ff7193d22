use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{Matrix, ParamId, ParamStore};
use super::tape::{Graph, Var};
use crate::error::{Error, Result};
use crate::geom::{sin_cos, Vec3};

/// Negative-side slope of the leaky rectifier used inside every MLP.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    LeakyRelu,
    Tanh,
}

impl Activation {
    fn apply(self, g: &mut Graph<'_>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => g.tanh(x),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/√fan_in`.
    Uniform,
    Zeros,
}

/// Affine map `x W + b` on row-major features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let (weight, bias) = match init {
            Init::Uniform => (
                store.uniform(format!("{prefix}.weight"), fan_in, fan_out, fan_in, rng),
                store.uniform(format!("{prefix}.bias"), 1, fan_out, fan_in, rng),
            ),
            Init::Zeros => (
                store.zeros(format!("{prefix}.weight"), fan_in, fan_out),
                store.zeros(format!("{prefix}.bias"), 1, fan_out),
            ),
        };
        Linear { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let xw = g.matmul(x, w);
        g.add_row(xw, b)
    }
}

/// Shared multi-layer perceptron applied independently to every row.
/// The activation sits between layers; the last layer is affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Linear>,
    pub widths: Vec<usize>,
}

impl MlpParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        init: Init,
        rng: &mut R,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.{i}"), w[0], w[1], init, rng))
            .collect();
        MlpParams {
            layers,
            widths: widths.to_vec(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    /// Zeroes the final layer so the MLP outputs exactly zero.
    pub fn zero_output(&self, store: &mut ParamStore) {
        let last = self.layers.last().expect("at least one layer");
        store.fill_zero(last.weight);
        store.fill_zero(last.bias);
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, activation: Activation) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i + 1 < self.layers.len() {
                h = activation.apply(g, h);
            }
        }
        h
    }
}

/// Single-head attention block with residual MLP update:
/// `x_i ← x_i + MLP([q_i, Σ_j w_ij v_j])`, `w = softmax(q kᵀ / √d)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub mlp: MlpParams,
}

impl AttentionParams {
    /// `hidden` is the width of the update MLP's hidden layer.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        hidden: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let mut proj = |name: &str, rng: &mut R| match init {
            Init::Uniform => store.uniform(format!("{prefix}.{name}"), dim, dim, dim, rng),
            Init::Zeros => store.zeros(format!("{prefix}.{name}"), dim, dim),
        };
        let w_q = proj("w_q", rng);
        let w_k = proj("w_k", rng);
        let w_v = proj("w_v", rng);
        let mlp = MlpParams::new(store, &format!("{prefix}.mlp"), &[2 * dim, hidden, dim], init, rng);
        AttentionParams {
            dim,
            w_q,
            w_k,
            w_v,
            mlp,
        }
    }

    /// Returns the updated query features and the attention weights.
    pub fn forward_with_weights(&self, g: &mut Graph<'_>, queries: Var, keys_values: Var) -> (Var, Var) {
        let wq = g.param(self.w_q);
        let wk = g.param(self.w_k);
        let wv = g.param(self.w_v);
        let q = g.matmul(queries, wq);
        let k = g.matmul(keys_values, wk);
        let v = g.matmul(keys_values, wv);
        let logits = g.matmul_t(q, k);
        let logits = g.scale(logits, 1.0 / (self.dim as f64).sqrt());
        let w = g.softmax_rows(logits);
        let agg = g.matmul(w, v);
        let cat = g.concat_cols(q, agg);
        let upd = self.mlp.forward(g, cat, Activation::LeakyRelu);
        (g.add(queries, upd), w)
    }

    pub fn forward(&self, g: &mut Graph<'_>, queries: Var, keys_values: Var) -> Var {
        self.forward_with_weights(g, queries, keys_values).0
    }
}

/// Wavelengths of the sinusoidal bands, geometric from 0.1 to 10.
pub fn pe_wavelengths(bands: usize) -> Vec<f64> {
    match bands {
        0 => Vec::new(),
        1 => vec![0.1],
        n => (0..n).map(|k| 0.1 * 100f64.powf(k as f64 / (n - 1) as f64)).collect(),
    }
}

/// Per-axis sinusoidal encoding: for axis `a` and band `k`, columns
/// `2(a·B + k)` and `2(a·B + k) + 1` hold `sin(2π x_a / λ_k)` and
/// `cos(2π x_a / λ_k)`, with `B = d / 6` bands.
pub fn positional_encode(points: &[Vec3], d: usize) -> Result<Matrix> {
    if d == 0 || d % 6 != 0 {
        return Err(Error::Config(format!(
            "positional encoding dimension {d} is not a positive multiple of 6"
        )));
    }
    let bands = d / 6;
    let freqs: Vec<f64> = pe_wavelengths(bands)
        .into_iter()
        .map(|l| std::f64::consts::TAU / l)
        .collect();
    let mut out = Matrix::zeros(points.len(), d);
    for (r, p) in points.iter().enumerate() {
        for axis in 0..3 {
            for (k, w) in freqs.iter().enumerate() {
                let col = 2 * (axis * bands + k);
                let (s, c) = sin_cos(w * p[axis]);
                out[(r, col)] = s;
                out[(r, col + 1)] = c;
            }
        }
    }
    Ok(out)
}

/// Evaluates an MLP on a feature matrix.
pub fn mlp_forward(x: &Matrix, p: &MlpParams, store: &ParamStore, activation: Activation) -> Result<Matrix> {
    check_mlp(p, store)?;
    if x.ncols() != p.input_width() {
        return Err(Error::Config(format!(
            "MLP expects {} input features, got {}",
            p.input_width(),
            x.ncols()
        )));
    }
    let mut g = Graph::with_params(store);
    let xv = g.input(x.clone());
    let y = p.forward(&mut g, xv, activation);
    Ok(g.value(y).clone())
}

/// Evaluates one attention block (self-attention when `queries` and
/// `keys_values` are the same matrix).
pub fn attention(queries: &Matrix, keys_values: &Matrix, p: &AttentionParams, store: &ParamStore) -> Result<Matrix> {
    for (name, m) in [("queries", queries), ("keys/values", keys_values)] {
        if m.ncols() != p.dim {
            return Err(Error::Config(format!(
                "{name} have {} features, block expects {}",
                m.ncols(),
                p.dim
            )));
        }
    }
    for id in [p.w_q, p.w_k, p.w_v] {
        if store.get(id).shape() != (p.dim, p.dim) {
            return Err(Error::Config(format!(
                "projection `{}` is not {}×{}",
                store.name(id),
                p.dim,
                p.dim
            )));
        }
    }
    check_mlp(&p.mlp, store)?;
    if p.mlp.input_width() != 2 * p.dim || p.mlp.output_width() != p.dim {
        return Err(Error::Config("attention update MLP must map 2d → d".into()));
    }
    let mut g = Graph::with_params(store);
    let q = g.input(queries.clone());
    let kv = g.input(keys_values.clone());
    let out = p.forward(&mut g, q, kv);
    Ok(g.value(out).clone())
}

fn check_mlp(p: &MlpParams, store: &ParamStore) -> Result<()> {
    if p.layers.len() + 1 != p.widths.len() {
        return Err(Error::Config("MLP layer count does not match widths".into()));
    }
    for (i, l) in p.layers.iter().enumerate() {
        let (fi, fo) = (p.widths[i], p.widths[i + 1]);
        if store.get(l.weight).shape() != (fi, fo) || store.get(l.bias).shape() != (1, fo) {
            return Err(Error::Config(format!("MLP layer {i} does not chain {fi} → {fo}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tape::softmax_rows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn pe_origin_and_config_error() {
        let pe = positional_encode(&[Vec3::zeros()], 12).unwrap();
        for c in 0..12 {
            assert_eq!(pe[(0, c)], if c % 2 == 0 { 0.0 } else { 1.0 });
        }
        assert!(positional_encode(&[Vec3::zeros()], 10).is_err());
        let pts = [Vec3::new(0.3, -0.2, 0.1), Vec3::new(0.3, -0.2, 0.1)];
        let pe = positional_encode(&pts, 18).unwrap();
        assert_eq!(pe.row(0), pe.row(1));
    }

    #[test]
    fn pe_wavelength_range() {
        let w = pe_wavelengths(16);
        assert!((w[0] - 0.1).abs() < 1e-15 && (w[15] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn mlp_zero_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = MlpParams::new(&mut store, "m", &[4, 8, 3], Init::Zeros, &mut rng);
        let x = rand_matrix(5, 4, &mut rng);
        assert!(mlp_forward(&x, &p, &store, Activation::LeakyRelu)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));

        let mut store = ParamStore::new();
        let id = MlpParams::new(&mut store, "id", &[4, 4], Init::Zeros, &mut rng);
        store.set(id.layers[0].weight, Matrix::identity(4, 4));
        assert_eq!(mlp_forward(&x, &id, &store, Activation::Identity).unwrap(), x);
        assert!(mlp_forward(&rand_matrix(2, 3, &mut rng), &id, &store, Activation::Identity).is_err());
    }

    #[test]
    fn mlp_is_row_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = MlpParams::new(&mut store, "m", &[6, 16, 16, 5], Init::Uniform, &mut rng);
        let x = rand_matrix(7, 6, &mut rng);
        let perm = [3, 0, 6, 1, 5, 2, 4];
        let y = mlp_forward(&x, &p, &store, Activation::LeakyRelu).unwrap();
        let yp = mlp_forward(&x.select_rows(&perm), &p, &store, Activation::LeakyRelu).unwrap();
        assert_eq!(yp, y.select_rows(&perm));
    }

    #[test]
    fn attention_zero_update_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 12, 24, Init::Zeros, &mut rng);
        let x = rand_matrix(5, 12, &mut rng);
        let y = rand_matrix(3, 12, &mut rng);
        assert_eq!(attention(&x, &y, &p, &store).unwrap(), x);
    }

    #[test]
    fn attention_single_key() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 6, 8, Init::Uniform, &mut rng);
        let x = rand_matrix(1, 6, &mut rng);
        let kv = rand_matrix(1, 6, &mut rng);
        let q = &x * store.get(p.w_q);
        let v = &kv * store.get(p.w_v);
        let mut cat = Matrix::zeros(1, 12);
        cat.columns_mut(0, 6).copy_from(&q);
        cat.columns_mut(6, 6).copy_from(&v);
        let expect = &x + mlp_forward(&cat, &p.mlp, &store, Activation::LeakyRelu).unwrap();
        let got = attention(&x, &kv, &p, &store).unwrap();
        assert!((got - expect).abs().max() < 1e-14);
    }

    #[test]
    fn self_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 12, 16, Init::Uniform, &mut rng);
        let x = rand_matrix(6, 12, &mut rng);
        let perm = [5, 3, 1, 0, 2, 4];
        let y = attention(&x, &x, &p, &store).unwrap();
        let xp = x.select_rows(&perm);
        let yp = attention(&xp, &xp, &p, &store).unwrap();
        assert!((yp - y.select_rows(&perm)).abs().max() < 1e-12);
    }

    #[test]
    fn attention_shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = AttentionParams::new(&mut store, "a", 6, 8, Init::Uniform, &mut rng);
        assert!(attention(&rand_matrix(2, 5, &mut rng), &rand_matrix(2, 6, &mut rng), &p, &store).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_large_entries() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let m = Matrix::from_fn(64, 128, |_, _| rng.random_range(-1000.0..1000.0));
        let s = softmax_rows(&m);
        for r in 0..64 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(s.row(r).iter().all(|v| *v >= 0.0));
        }
    }
}
