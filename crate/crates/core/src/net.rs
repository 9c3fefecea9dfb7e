//! Dense feed-forward networks over flat parameter vectors.
//!
//! A network is described by a [`NetSpec`] and evaluated against a flat
//! `&[f64]` of parameters. The flattening order is, layer by layer, the
//! weight matrix in row-major `(fan_out, fan_in)` order followed by the bias
//! vector. Owners that need extra parameters (the policy's log standard
//! deviations) append them after the network block.
//!
//! Gradients are exact reverse mode. Single-sample routines ([`forward`],
//! [`backward`]) are used while acting in an environment; [`BatchTape`]
//! evaluates many inputs at once with blocked matrix products and is what
//! the estimators and critic fitting use.

use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Linear => z,
        }
    }
}

/// Layer sizes `(input, hidden.., output)` plus one activation per
/// non-input layer. The output layer is always linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    layer_sizes: Vec<usize>,
    activations: Vec<Activation>,
}

/// Where one layer's parameters live inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub activation: Activation,
}

impl LayerLayout {
    pub fn end(&self) -> usize {
        self.bias_offset + self.fan_out
    }
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config("a network needs at least an input and an output layer".into()));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        check_len("activations", layer_sizes.len() - 1, activations.len())?;
        if activations.last() != Some(&Activation::Linear) {
            return Err(Error::Config("the output layer must be linear".into()));
        }
        Ok(NetSpec {
            layer_sizes,
            activations,
        })
    }

    /// Tanh hidden layers with a linear output layer.
    pub fn mlp(input: usize, hidden: &[usize], output: usize) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        let mut acts = vec![Activation::Tanh; hidden.len()];
        acts.push(Activation::Linear);
        NetSpec::new(sizes, acts)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerLayout> + '_ {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .zip(&self.activations)
            .map(move |(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let layout = LayerLayout {
                    fan_in,
                    fan_out,
                    weight_offset: offset,
                    bias_offset: offset + fan_in * fan_out,
                    activation,
                };
                offset = layout.end();
                layout
            })
    }

    /// Uniform Glorot initialization of the weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.param_count()];
        for layer in self.layers() {
            let limit = (6.0 / (layer.fan_in + layer.fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite positive limit");
            for w in &mut params[layer.weight_offset..layer.bias_offset] {
                *w = rng.sample(dist);
            }
        }
        params
    }

    fn check(&self, params: &[f64], input: &[f64]) -> Result<()> {
        check_len("network parameters", self.param_count(), params.len())?;
        check_len("network input", self.input_size(), input.len())
    }
}

/// Flat parameters for one particle: network block followed by any owner
/// blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    /// FNV-1a over the bit patterns. Used to detect trajectories that were
    /// collected under different parameters.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.0 {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// An estimate of a gradient, aligned with a [`ParamVector`], together with
/// the number of transitions (or utility evaluations) behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub values: Vec<f64>,
    pub samples: usize,
}

impl GradientEstimate {
    pub fn zeros(len: usize) -> Self {
        GradientEstimate {
            values: vec![0.0; len],
            samples: 0,
        }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }
}

pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Structured copy of one layer, for inspection and round-tripping.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// `fan_out` rows of `fan_in` weights.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

pub fn unflatten(spec: &NetSpec, params: &[f64]) -> Result<Vec<LayerParams>> {
    check_len("network parameters", spec.param_count(), params.len())?;
    Ok(spec
        .layers()
        .map(|l| LayerParams {
            weights: params[l.weight_offset..l.bias_offset]
                .chunks_exact(l.fan_in)
                .map(<[f64]>::to_vec)
                .collect(),
            bias: params[l.bias_offset..l.end()].to_vec(),
        })
        .collect())
}

pub fn flatten(layers: &[LayerParams]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().flatten().chain(&l.bias).copied())
        .collect()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent accumulators let the compiler keep the reduction in
    // vector registers.
    let mut acc = [0.0f64; 4];
    let (a4, a_rest) = a.split_at(a.len() - a.len() % 4);
    let (b4, b_rest) = b.split_at(a4.len());
    for (x, y) in a4.chunks_exact(4).zip(b4.chunks_exact(4)) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in a_rest.iter().zip(b_rest) {
        s += x * y;
    }
    s
}

/// Layer activations of a single forward pass, input included.
fn forward_trace(spec: &NetSpec, params: &[f64], input: &[f64]) -> Vec<Vec<f64>> {
    let mut acts = Vec::with_capacity(spec.layer_sizes.len());
    acts.push(input.to_vec());
    for layer in spec.layers() {
        let x = acts.last().expect("input pushed");
        let w = &params[layer.weight_offset..layer.bias_offset];
        let b = &params[layer.bias_offset..layer.end()];
        let y: Vec<f64> = w
            .chunks_exact(layer.fan_in)
            .zip(b)
            .map(|(row, bias)| layer.activation.apply(dot(row, x) + bias))
            .collect();
        acts.push(y);
    }
    acts
}

/// Evaluates the network on one input.
pub fn forward(spec: &NetSpec, params: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    spec.check(params, input)?;
    Ok(forward_trace(spec, params, input).pop().expect("output layer"))
}

/// Gradient of `<forward(input), cotangent>` with respect to the parameters.
pub fn backward(
    spec: &NetSpec,
    params: &[f64],
    input: &[f64],
    cotangent: &[f64],
) -> Result<GradientEstimate> {
    spec.check(params, input)?;
    check_len("output cotangent", spec.output_size(), cotangent.len())?;
    let acts = forward_trace(spec, params, input);
    let mut grad = vec![0.0; params.len()];
    let mut delta = cotangent.to_vec();
    let layers: Vec<LayerLayout> = spec.layers().collect();
    for (k, layer) in layers.iter().enumerate().rev() {
        let out = &acts[k + 1];
        if layer.activation == Activation::Tanh {
            for (d, y) in delta.iter_mut().zip(out) {
                *d *= 1.0 - y * y;
            }
        }
        let x = &acts[k];
        let gw = &mut grad[layer.weight_offset..layer.bias_offset];
        for (row, d) in gw.chunks_exact_mut(layer.fan_in).zip(&delta) {
            for (g, xi) in row.iter_mut().zip(x) {
                *g = d * xi;
            }
        }
        grad[layer.bias_offset..layer.end()].copy_from_slice(&delta);
        if k > 0 {
            let w = &params[layer.weight_offset..layer.bias_offset];
            let mut prev = vec![0.0; layer.fan_in];
            for (row, d) in w.chunks_exact(layer.fan_in).zip(&delta) {
                for (p, wi) in prev.iter_mut().zip(row) {
                    *p += d * wi;
                }
            }
            delta = prev;
        }
    }
    Ok(GradientEstimate {
        values: grad,
        samples: 1,
    })
}

/// Row-major matrix product `c = a * b + beta * c` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(last(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(last(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    // SAFETY: every index touched by the kernel is within the bounds
    // asserted above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Forward pass over a batch of inputs, retaining every layer's activations
/// for a subsequent [`BatchTape::backward`].
#[derive(Debug, Clone)]
pub struct BatchTape {
    rows: usize,
    /// `acts[k]` is `rows x layer_sizes[k]`, row-major.
    acts: Vec<Vec<f64>>,
}

impl BatchTape {
    /// `inputs` holds `rows` inputs back to back.
    pub fn forward(spec: &NetSpec, params: &[f64], inputs: &[f64]) -> Result<BatchTape> {
        check_len("network parameters", spec.param_count(), params.len())?;
        let width = spec.input_size();
        if !inputs.len().is_multiple_of(width) {
            return Err(Error::DimensionMismatch {
                what: "batched network input",
                expected: width,
                got: inputs.len() % width,
            });
        }
        let rows = inputs.len() / width;
        let mut acts = Vec::with_capacity(spec.layer_sizes.len());
        acts.push(inputs.to_vec());
        for layer in spec.layers() {
            let x = acts.last().expect("input pushed");
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            let b = &params[layer.bias_offset..layer.end()];
            let mut y: Vec<f64> = b.iter().copied().cycle().take(rows * fo).collect();
            gemm(
                rows,
                fi,
                fo,
                x,
                (fi, 1),
                &params[layer.weight_offset..layer.bias_offset],
                (1, fi),
                1.0,
                &mut y,
                (fo, 1),
            );
            if layer.activation == Activation::Tanh {
                y.iter_mut().for_each(|v| *v = v.tanh());
            }
            acts.push(y);
        }
        Ok(BatchTape { rows, acts })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Network outputs, `rows x output_size`, row-major.
    pub fn outputs(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }

    /// Sum over rows of the parameter gradient of `<output_r, cotangent_r>`.
    pub fn backward(&self, spec: &NetSpec, params: &[f64], cotangents: &[f64]) -> Result<Vec<f64>> {
        check_len("network parameters", spec.param_count(), params.len())?;
        check_len("batched cotangent", self.rows * spec.output_size(), cotangents.len())?;
        let rows = self.rows;
        let mut grad = vec![0.0; params.len()];
        let mut delta = cotangents.to_vec();
        let layers: Vec<LayerLayout> = spec.layers().collect();
        for (k, layer) in layers.iter().enumerate().rev() {
            let (fi, fo) = (layer.fan_in, layer.fan_out);
            if layer.activation == Activation::Tanh {
                for (d, y) in delta.iter_mut().zip(&self.acts[k + 1]) {
                    *d *= 1.0 - y * y;
                }
            }
            // dW = delta^T x
            gemm(
                fo,
                rows,
                fi,
                &delta,
                (1, fo),
                &self.acts[k],
                (fi, 1),
                0.0,
                &mut grad[layer.weight_offset..layer.bias_offset],
                (fi, 1),
            );
            let gb = &mut grad[layer.bias_offset..layer.end()];
            for row in delta.chunks_exact(fo) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            if k > 0 {
                let mut prev = vec![0.0; rows * fi];
                gemm(
                    rows,
                    fo,
                    fi,
                    &delta,
                    (fo, 1),
                    &params[layer.weight_offset..layer.bias_offset],
                    (fi, 1),
                    0.0,
                    &mut prev,
                    (fi, 1),
                );
                delta = prev;
            }
        }
        check_finite("network gradient", &grad)?;
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{particle_seed, stream, Purpose};
    use proptest::prelude::*;
    use rand::Rng;

    fn rng(k: usize) -> crate::rng::RngStream {
        stream(particle_seed(7, k), 0, Purpose::PolicyInit, 0)
    }

    fn random_vec(r: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| r.random_range(-scale..scale)).collect()
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec::new(vec![3], vec![]).is_err());
        assert!(NetSpec::new(vec![3, 0, 1], vec![Activation::Tanh, Activation::Linear]).is_err());
        assert!(NetSpec::new(vec![3, 2], vec![Activation::Tanh]).is_err());
        assert!(NetSpec::new(vec![3, 2], vec![]).is_err());
        let s = NetSpec::mlp(4, &[100, 50, 25], 1).unwrap();
        assert_eq!(s.param_count(), 4 * 100 + 100 + 100 * 50 + 50 + 50 * 25 + 25 + 25 + 1);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let s = NetSpec::mlp(3, &[5, 4], 2).unwrap();
        let p = vec![0.0; s.param_count()];
        assert_eq!(forward(&s, &p, &[0.3, -1.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let s = NetSpec::mlp(3, &[], 3).unwrap();
        let mut p = vec![0.0; s.param_count()];
        for i in 0..3 {
            p[i * 3 + i] = 1.0;
        }
        let x = [0.5, -2.0, 7.25];
        assert_eq!(forward(&s, &p, &x).unwrap(), x.to_vec());
    }

    #[test]
    fn hand_evaluated_3_4_2_network() {
        let s = NetSpec::mlp(3, &[4], 2).unwrap();
        let mut r = rng(1);
        let p = random_vec(&mut r, s.param_count(), 1.0);
        let x = [0.2, -0.7, 1.1];
        // Direct evaluation with explicit indices, independent of the layout
        // helpers.
        let w1 = |o: usize, i: usize| p[o * 3 + i];
        let b1 = |o: usize| p[12 + o];
        let w2 = |o: usize, i: usize| p[16 + o * 4 + i];
        let b2 = |o: usize| p[24 + o];
        let h: Vec<f64> = (0..4)
            .map(|o| (w1(o, 0) * x[0] + w1(o, 1) * x[1] + w1(o, 2) * x[2] + b1(o)).tanh())
            .collect();
        let y: Vec<f64> = (0..2)
            .map(|o| w2(o, 0) * h[0] + w2(o, 1) * h[1] + w2(o, 2) * h[2] + w2(o, 3) * h[3] + b2(o))
            .collect();
        let got = forward(&s, &p, &x).unwrap();
        for (a, b) in got.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dimension_errors() {
        let s = NetSpec::mlp(3, &[4], 2).unwrap();
        let p = vec![0.0; s.param_count()];
        assert!(forward(&s, &p, &[1.0]).is_err());
        assert!(forward(&s, &p[1..], &[1.0, 2.0, 3.0]).is_err());
        assert!(backward(&s, &p, &[1.0, 2.0, 3.0], &[1.0]).is_err());
    }

    #[test]
    fn zero_cotangent_zero_gradient() {
        let s = NetSpec::mlp(3, &[4], 2).unwrap();
        let p = random_vec(&mut rng(2), s.param_count(), 1.0);
        let g = backward(&s, &p, &[1.0, 2.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_gradient_closed_form() {
        let s = NetSpec::mlp(3, &[], 2).unwrap();
        let p = random_vec(&mut rng(3), s.param_count(), 1.0);
        let x = [0.4, -1.5, 2.0];
        let g = backward(&s, &p, &x, &[0.0, 1.0]).unwrap().values;
        assert_eq!(&g[0..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&g[3..6], &x);
        assert_eq!(&g[6..8], &[0.0, 1.0]);
    }

    #[test]
    fn batch_matches_single_sample() {
        let s = NetSpec::mlp(5, &[7, 6], 3).unwrap();
        let mut r = rng(4);
        let p = random_vec(&mut r, s.param_count(), 0.8);
        let rows = 9;
        let xs = random_vec(&mut r, rows * 5, 2.0);
        let cots = random_vec(&mut r, rows * 3, 1.0);
        let tape = BatchTape::forward(&s, &p, &xs).unwrap();
        let mut expect = vec![0.0; p.len()];
        for k in 0..rows {
            let x = &xs[k * 5..(k + 1) * 5];
            let y = forward(&s, &p, x).unwrap();
            for (a, b) in y.iter().zip(&tape.outputs()[k * 3..(k + 1) * 3]) {
                assert!((a - b).abs() < 1e-12);
            }
            let g = backward(&s, &p, x, &cots[k * 3..(k + 1) * 3]).unwrap();
            for (e, v) in expect.iter_mut().zip(&g.values) {
                *e += v;
            }
        }
        let got = tape.backward(&s, &p, &cots).unwrap();
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn glorot_init_bounds() {
        let s = NetSpec::mlp(4, &[100, 50, 25], 1).unwrap();
        let p = s.init_params(&mut rng(5));
        for l in s.layers() {
            let limit = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            assert!(p[l.weight_offset..l.bias_offset].iter().all(|w| w.abs() <= limit));
            assert!(p[l.bias_offset..l.end()].iter().all(|&b| b == 0.0));
        }
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(seed in 0u64..1000, hidden in proptest::collection::vec(1usize..6, 0..3)) {
            let s = NetSpec::mlp(3, &hidden, 2).unwrap();
            let mut r = stream(seed, 0, Purpose::PolicyInit, 0);
            let p = random_vec(&mut r, s.param_count(), 1.0);
            let layers = unflatten(&s, &p).unwrap();
            prop_assert_eq!(flatten(&layers), p);
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let s = NetSpec::mlp(3, &[4], 2).unwrap();
            let mut r = stream(seed, 0, Purpose::PolicyInit, 0);
            let p = random_vec(&mut r, s.param_count(), 1.0);
            let x = random_vec(&mut r, 3, 1.0);
            let a = forward(&s, &p, &x).unwrap();
            let b = forward(&s, &p, &x).unwrap();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
