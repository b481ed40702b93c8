//! Multi-head Hopfield association: β-sharpened softmax retrieval over
//! stored patterns, stackable into layers.
//!
//! The projected form computes, per head h,
//! `A_h = softmax(β · (R W_Q^h)(Y W_K^h)^T)` and retrieves `A_h (Y W_V^h)`;
//! head outputs are concatenated and mixed by one output matrix. With
//! `identity_projections` set the module has no parameters and computes the
//! simplified update `softmax(β · R Y^T) Y` with a single head.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopfieldSpec {
    /// Width of the association space; must be divisible by `n_heads`.
    pub hidden_size: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    /// Softmax sharpness; one β shared by all heads and layers.
    pub beta: f64,
    /// Selects the projection-free simplified update.
    pub identity_projections: bool,
}

impl HopfieldSpec {
    /// Scaled-dot default: 1/sqrt(head width).
    pub fn default_beta(hidden_size: usize, n_heads: usize) -> f64 {
        1.0 / ((hidden_size / n_heads) as f64).sqrt()
    }

    pub fn new(hidden_size: usize, n_heads: usize, n_layers: usize) -> Self {
        HopfieldSpec {
            hidden_size,
            n_heads,
            n_layers,
            beta: Self::default_beta(hidden_size, n_heads),
            identity_projections: false,
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn identity(mut self) -> Self {
        self.identity_projections = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return Err(Error::Config(format!("hopfield extents must be >= 1: {self:?}")));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.beta < 0.0 {
            return Err(Error::Config(format!("beta must be nonnegative, got {}", self.beta)));
        }
        Ok(())
    }

    /// Learnable scalars across all layers (zero in identity mode).
    pub fn param_count(&self) -> usize {
        if self.identity_projections {
            0
        } else {
            self.n_layers * 4 * self.hidden_size * self.hidden_size
        }
    }
}

/// Registers W_Q/W_K/W_V/W_O for every layer under `prefix.layer<l>`.
pub fn hopfield_init(spec: &HopfieldSpec, prefix: &str, store: &mut ParamStore) -> Result<()> {
    spec.validate()?;
    if spec.identity_projections {
        return Ok(());
    }
    let h = spec.hidden_size;
    let bound = 1.0 / (h as f64).sqrt();
    for layer in 0..spec.n_layers {
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            store.insert_uniform(&format!("{prefix}.layer{layer}.{w}"), vec![h, h], bound)?;
        }
    }
    Ok(())
}

fn check_patterns(g: &Graph, spec: &HopfieldSpec, id: NodeId, role: &str) -> Result<()> {
    let shape = g.shape(id);
    if shape.len() != 3 || shape[2] != spec.hidden_size {
        return Err(Error::Shape(format!(
            "hopfield: {role} shape {shape:?} must be [B,S,{}]",
            spec.hidden_size
        )));
    }
    Ok(())
}

/// Single association step with attention introspection: returns the output
/// node and one row-stochastic attention map per head.
fn assoc_inner(
    g: &mut Graph,
    store: &ParamStore,
    spec: &HopfieldSpec,
    prefix: &str,
    r: NodeId,
    y: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    spec.validate()?;
    check_patterns(g, spec, r, "query patterns R")?;
    check_patterns(g, spec, y, "stored patterns Y")?;
    if g.shape(r)[0] != g.shape(y)[0] {
        return Err(Error::Shape(format!(
            "hopfield: batch extents differ: R {:?} vs Y {:?}",
            g.shape(r),
            g.shape(y)
        )));
    }

    if spec.identity_projections {
        let yt = g.transpose_last2(y)?;
        let scores = g.matmul(r, yt)?;
        let scores = g.scale(scores, spec.beta);
        let attn = g.softmax_lastdim(scores)?;
        let out = g.matmul(attn, y)?;
        return Ok((out, vec![attn]));
    }

    let wq = g.param(store, &format!("{prefix}.w_q"))?;
    let wk = g.param(store, &format!("{prefix}.w_k"))?;
    let wv = g.param(store, &format!("{prefix}.w_v"))?;
    let wo = g.param(store, &format!("{prefix}.w_o"))?;
    let q = g.matmul(r, wq)?;
    let k = g.matmul(y, wk)?;
    let v = g.matmul(y, wv)?;

    let dh = spec.hidden_size / spec.n_heads;
    let mut heads = Vec::with_capacity(spec.n_heads);
    let mut maps = Vec::with_capacity(spec.n_heads);
    for head in 0..spec.n_heads {
        let qh = g.slice(q, 2, head * dh, dh)?;
        let kh = g.slice(k, 2, head * dh, dh)?;
        let vh = g.slice(v, 2, head * dh, dh)?;
        let kt = g.transpose_last2(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, spec.beta);
        let attn = g.softmax_lastdim(scores)?;
        heads.push(g.matmul(attn, vh)?);
        maps.push(attn);
    }
    let mixed = g.concat(&heads, 2)?;
    let out = g.matmul(mixed, wo)?;
    Ok((out, maps))
}

/// One association step: retrieves from stored patterns `y` using queries
/// `r`; both are [B×S×H] with possibly different S. `prefix` names the layer
/// parameters (ignored in identity mode).
pub fn hopfield_assoc(
    g: &mut Graph,
    store: &ParamStore,
    spec: &HopfieldSpec,
    prefix: &str,
    r: NodeId,
    y: NodeId,
) -> Result<NodeId> {
    assoc_inner(g, store, spec, prefix, r, y).map(|(out, _)| out)
}

/// Per-head attention maps [B × S_r × S_y] for the given inputs; forward
/// introspection used by tests and diagnostics.
pub fn attention_maps(
    store: &ParamStore,
    spec: &HopfieldSpec,
    prefix: &str,
    r: &Tensor,
    y: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let rn = g.leaf(r);
    let yn = g.leaf(y);
    let (_, maps) = assoc_inner(&mut g, store, spec, prefix, rn, yn)?;
    Ok(maps.into_iter().map(|id| g.value(id)).collect())
}

/// Self-association stack: applies `n_layers` association steps with
/// R = Y = the running sequence, each layer with its own parameters.
/// Shape [B×S×H] is preserved.
pub fn hopfield_stack(
    g: &mut Graph,
    store: &ParamStore,
    spec: &HopfieldSpec,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    spec.validate()?;
    let mut h = x;
    for layer in 0..spec.n_layers {
        h = hopfield_assoc(g, store, spec, &format!("{prefix}.layer{layer}"), h, h)?;
    }
    Ok(h)
}

/// Extracts the last sequence position: [B×S×H] → [B×H]. Gradients flow only
/// into that position.
pub fn take_last(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(Error::Shape(format!("take_last: expected non-empty [B,S,H], got {shape:?}")));
    }
    let (b, s, h) = (shape[0], shape[1], shape[2]);
    let last = g.slice(x, 1, s - 1, 1)?;
    g.reshape(last, vec![b, h])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradcheck;
    use rand::Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Brute-force simplified update: softmax(beta * r . y_j) weighted sum.
    fn eq_simple_oracle(beta: f64, queries: &[Vec<f64>], stored: &[Vec<f64>]) -> Vec<Vec<f64>> {
        queries
            .iter()
            .map(|q| {
                let logits: Vec<f64> = stored
                    .iter()
                    .map(|p| beta * q.iter().zip(p).map(|(a, b)| a * b).sum::<f64>())
                    .collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let dim = stored[0].len();
                let mut out = vec![0.0; dim];
                for (w, p) in exps.iter().zip(stored) {
                    for (o, v) in out.iter_mut().zip(p) {
                        *o += (w / z) * v;
                    }
                }
                out
            })
            .collect()
    }

    fn basis(n: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                v
            })
            .collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    fn run_simplified(beta: f64, r: &Tensor, y: &Tensor) -> Vec<f64> {
        let spec = HopfieldSpec::new(y.shape[2], 1, 1).with_beta(beta).identity();
        let store = ParamStore::new(0);
        let mut g = Graph::new();
        let rn = g.leaf(r);
        let yn = g.leaf(y);
        let out = hopfield_assoc(&mut g, &store, &spec, "", rn, yn).unwrap();
        g.data(out).to_vec()
    }

    #[test]
    fn sharp_retrieval_recovers_stored_pattern() {
        let stored = basis(4);
        let y = t(&[1, 4, 4], &stored.concat());
        let r = t(&[1, 1, 4], &stored[1]);
        let out = run_simplified(50.0, &r, &y);
        assert!(cosine(&out, &stored[1]) > 0.999, "{out:?}");
        // matches the brute-force oracle to float precision
        let oracle = eq_simple_oracle(50.0, &[stored[1].clone()], &stored);
        for (a, b) in out.iter().zip(&oracle[0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn beta_zero_returns_pattern_mean() {
        let rows = [
            vec![1.0, 2.0, 3.0],
            vec![-1.0, 0.0, 1.0],
            vec![4.0, -2.0, 0.5],
        ];
        let y = t(&[1, 3, 3], &rows.concat());
        let r = t(&[1, 2, 3], &[5.0, -1.0, 0.0, 0.2, 0.4, 0.6]);
        let out = run_simplified(0.0, &r, &y);
        let mean = [4.0 / 3.0, 0.0, 1.5];
        for row in out.chunks(3) {
            for (a, b) in row.iter().zip(&mean) {
                assert!((a - b).abs() <= 1e-9, "{row:?}");
            }
        }
    }

    #[test]
    fn identity_projections_match_simplified_form() {
        // projected form with all W = I, single head, equals the simplified update
        let mut rng = crate::rng::named_stream(4, "xy");
        let h = 4;
        let rdata: Vec<f64> = (0..2 * 3 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ydata: Vec<f64> = (0..2 * 5 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let r = t(&[2, 3, h], &rdata);
        let y = t(&[2, 5, h], &ydata);

        let mut store = ParamStore::new(0);
        let spec = HopfieldSpec::new(h, 1, 1).with_beta(0.7);
        hopfield_init(&spec, "hop", &mut store).unwrap();
        let mut eye = vec![0.0; h * h];
        for i in 0..h {
            eye[i * h + i] = 1.0;
        }
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            store.get_mut(&format!("hop.layer0.{w}")).unwrap().data = eye.clone();
        }

        let mut g = Graph::new();
        let rn = g.leaf(&r);
        let yn = g.leaf(&y);
        let full = hopfield_assoc(&mut g, &store, &spec, "hop.layer0", rn, yn).unwrap();
        let simplified = run_simplified(0.7, &r, &y);
        for (a, b) in g.data(full).iter().zip(&simplified) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic_per_head() {
        let mut rng = crate::rng::named_stream(9, "attn");
        let spec = HopfieldSpec::new(8, 2, 1).with_beta(1.3);
        let mut store = ParamStore::new(8);
        hopfield_init(&spec, "hop", &mut store).unwrap();
        let rdata: Vec<f64> = (0..2 * 3 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let ydata: Vec<f64> = (0..2 * 4 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let maps = attention_maps(
            &store,
            &spec,
            "hop.layer0",
            &t(&[2, 3, 8], &rdata),
            &t(&[2, 4, 8], &ydata),
        )
        .unwrap();
        assert_eq!(maps.len(), 2);
        for map in &maps {
            assert_eq!(map.shape, vec![2, 3, 4]);
            for row in map.data.chunks(4) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&w| w >= 0.0));
            }
        }
    }

    #[test]
    fn retrieval_sharpens_with_beta() {
        // noisy query near pattern 2: weight on it grows with beta
        let stored = basis(4);
        let mut rng = crate::rng::named_stream(3, "noise");
        let mut query = stored[2].clone();
        let noise: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm: f64 = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (q, n) in query.iter_mut().zip(&noise) {
            *q += 0.1 * n / norm;
        }
        let y = t(&[1, 4, 4], &stored.concat());
        let r = t(&[1, 1, 4], &query);
        let store = ParamStore::new(0);
        let mut weights = Vec::new();
        for beta in [1.0, 4.0, 16.0] {
            let spec = HopfieldSpec::new(4, 1, 1).with_beta(beta).identity();
            let maps = attention_maps(&store, &spec, "", &r, &y).unwrap();
            weights.push(maps[0].data[2]);
        }
        assert!(weights[0] < weights[1] && weights[1] < weights[2], "{weights:?}");
    }

    #[test]
    fn output_stays_in_convex_hull_of_stored_patterns() {
        let mut rng = crate::rng::named_stream(15, "hull");
        let h = 5;
        let ydata: Vec<f64> = (0..6 * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let rdata: Vec<f64> = (0..4 * h).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y = t(&[1, 6, h], &ydata);
        let r = t(&[1, 4, h], &rdata);
        let out = run_simplified(2.5, &r, &y);
        for d in 0..h {
            let coords: Vec<f64> = (0..6).map(|j| ydata[j * h + d]).collect();
            let lo = coords.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = coords.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for row in out.chunks(h) {
                assert!(row[d] >= lo - 1e-9 && row[d] <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn stack_single_layer_equals_one_assoc() {
        let spec = HopfieldSpec::new(6, 2, 1).with_beta(0.9);
        let mut store = ParamStore::new(31);
        hopfield_init(&spec, "hop", &mut store).unwrap();
        let mut rng = crate::rng::named_stream(31, "x");
        let xdata: Vec<f64> = (0..2 * 3 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[2, 3, 6], &xdata);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let stacked = hopfield_stack(&mut g, &store, &spec, "hop", xn).unwrap();
        let direct = hopfield_assoc(&mut g, &store, &spec, "hop.layer0", xn, xn).unwrap();
        assert_eq!(g.data(stacked), g.data(direct));
        assert_eq!(g.shape(stacked), &[2, 3, 6]);
    }

    #[test]
    fn multi_layer_stack_uses_distinct_parameters() {
        let spec = HopfieldSpec::new(4, 1, 2).with_beta(0.5);
        let mut store = ParamStore::new(5);
        hopfield_init(&spec, "hop", &mut store).unwrap();
        assert!(store.contains("hop.layer0.w_q"));
        assert!(store.contains("hop.layer1.w_q"));
        assert_eq!(store.scalar_count(), spec.param_count());
        assert_ne!(
            store.get("hop.layer0.w_q").unwrap().data,
            store.get("hop.layer1.w_q").unwrap().data
        );
    }

    #[test]
    fn single_pattern_is_returned_unchanged_in_identity_mode() {
        let x = t(&[2, 1, 3], &[1.0, -2.0, 0.5, 3.0, 0.0, -1.0]);
        let spec = HopfieldSpec::new(3, 1, 1).with_beta(2.0).identity();
        let store = ParamStore::new(0);
        let mut g = Graph::new();
        let xn = g.leaf(&x);
        let out = hopfield_stack(&mut g, &store, &spec, "", xn).unwrap();
        assert_eq!(g.data(out), &x.data[..]);
    }

    #[test]
    fn identity_mode_is_permutation_equivariant() {
        let mut rng = crate::rng::named_stream(7, "perm");
        let h = 4;
        let xdata: Vec<f64> = (0..3 * h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = t(&[1, 3, h], &xdata);
        let perm = [2usize, 0, 1];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&i| xdata[i * h..(i + 1) * h].to_vec())
            .collect();
        let xp = t(&[1, 3, h], &permuted);
        let out = run_simplified(1.7, &x, &x);
        let out_p = run_simplified(1.7, &xp, &xp);
        for (row_new, &row_old) in perm.iter().enumerate() {
            let a = &out_p[row_new * h..(row_new + 1) * h];
            let b = &out[row_old * h..(row_old + 1) * h];
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn take_last_extracts_and_routes_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).tracked());
        let last = take_last(&mut g, x).unwrap();
        assert_eq!(g.shape(last), &[1, 2]);
        assert_eq!(g.data(last), &[5.0, 6.0]);
        let loss = g.sum_all(last);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);

        let single = g.constant(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let only = take_last(&mut g, single).unwrap();
        assert_eq!(g.data(only), &[1.0, 2.0, 3.0, 4.0]);

        let flat = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(take_last(&mut g, flat).is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_configs() {
        assert!(HopfieldSpec::new(7, 2, 1).validate().is_err());
        assert!(HopfieldSpec::new(8, 2, 1).with_beta(-1.0).validate().is_err());
        let mut g = Graph::new();
        let store = ParamStore::new(0);
        let spec = HopfieldSpec::new(4, 1, 1).identity();
        let bad = g.constant(vec![1, 2, 3], vec![0.0; 6]).unwrap();
        let ok = g.constant(vec![1, 2, 4], vec![0.0; 8]).unwrap();
        assert!(hopfield_assoc(&mut g, &store, &spec, "", bad, ok).is_err());
        assert!(hopfield_assoc(&mut g, &store, &spec, "", ok, bad).is_err());
    }

    #[test]
    fn full_module_gradcheck() {
        // B=1, S=3, H=4, two heads, projected form
        let spec = HopfieldSpec::new(4, 2, 1).with_beta(0.8);
        let mut store = ParamStore::new(19);
        hopfield_init(&spec, "hop", &mut store).unwrap();
        let mut rng = crate::rng::named_stream(19, "x");
        let xdata: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = gradcheck(
            |g, s| {
                let x = g.constant(vec![1, 3, 4], xdata.clone())?;
                let out = hopfield_stack(g, s, &spec, "hop", x)?;
                let last = take_last(g, out)?;
                let sq = g.square(last);
                Ok(g.mean_all(sq))
            },
            &mut store,
            1e-4,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
