//! A small feed-forward network engine: forward pass with inverted dropout,
//! reverse-mode gradients, Adam with global-norm clipping, and a step-decay
//! learning-rate schedule.
//!
//! The architecture is two stacks of Linear-ReLU-Dropout layers with a
//! residual copy of the input concatenated after the first stack, followed
//! by a linear head:
//!
//! ```text
//! z ──► block1 ──► [h, z] ──► block2 ──► head ──► outputs
//! └──────────copy──┘
//! ```
//!
//! With both stacks empty the network is a single affine map `z ↦ zW + b`.

mod io;
mod optim;

pub use io::{read_params, write_params, PARAMS_MAGIC};
pub use optim::{optimizer_step, scheduled_lr, AdamConfig, OptimState, StepDecay};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::numerics::SeededRng;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub block1: Vec<usize>,
    pub block2: Vec<usize>,
    pub output_dim: usize,
    pub dropout: f64,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        block1: Vec<usize>,
        block2: Vec<usize>,
        output_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        let spec = MlpSpec {
            input_dim,
            block1,
            block2,
            output_dim,
            dropout,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Single affine layer from `input_dim` to `output_dim`.
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        MlpSpec {
            input_dim,
            block1: Vec::new(),
            block2: Vec::new(),
            output_dim,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.block1.iter().chain(&self.block2).any(|&w| w == 0) {
            return Err(Error::Config("hidden layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn hidden_count(&self) -> usize {
        self.block1.len() + self.block2.len()
    }

    /// Layer whose input is `[block1 output, z]`, with the width of the
    /// block1 part.
    fn concat_point(&self) -> Option<(usize, usize)> {
        self.block1.last().map(|&width| (self.block1.len(), width))
    }

    /// `(fan_in, fan_out)` for every layer, head last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_count() + 1);
        let mut width = self.input_dim;
        for &w in &self.block1 {
            dims.push((width, w));
            width = w;
        }
        if !self.block1.is_empty() {
            width += self.input_dim;
        }
        for &w in &self.block2 {
            dims.push((width, w));
            width = w;
        }
        dims.push((width, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Affine layer `x ↦ x W + b` with `W` stored as `fan_in × fan_out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }
}

/// All network parameters, one [`Dense`] per layer with the head last.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub layers: Vec<Dense>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        ParamSet {
            layers: spec.layer_dims().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
        }
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`.
    pub fn init(spec: &MlpSpec, rng: &mut SeededRng) -> Self {
        let mut params = ParamSet::zeros(spec);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer.weight.iter_mut().for_each(|w| *w = rng.uniform(-bound, bound));
            layer.bias.iter_mut().for_each(|b| *b = rng.uniform(-bound, bound));
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        ParamSet {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matches(&self, spec: &MlpSpec) -> bool {
        let dims = spec.layer_dims();
        dims.len() == self.layers.len()
            && dims
                .iter()
                .zip(&self.layers)
                .all(|(&(i, o), l)| l.weight.dim() == (i, o) && l.bias.len() == o)
    }

    /// Weights then bias for each layer, in layer order.
    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.layers.iter().flat_map(|l| {
            [
                l.weight.as_slice().expect("standard layout"),
                l.bias.as_slice().expect("standard layout"),
            ]
        })
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers.iter_mut().flat_map(|l| {
            [
                l.weight.as_slice_mut().expect("standard layout"),
                l.bias.as_slice_mut().expect("standard layout"),
            ]
        })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::shape(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors().flat_map(|t| t.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Intermediates recorded by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input to every layer, head last.
    inputs: Vec<Array2<f64>>,
    /// Per hidden layer: `1(preactivation > 0) * dropout scale`.
    gates: Vec<Array2<f64>>,
    concat: Option<(usize, usize)>,
    output_dim: (usize, usize),
    /// Dropout multipliers (0 or 1/(1-rate)) per hidden layer, training only.
    masks: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn dropout_masks(&self) -> &[Array2<f64>] {
        &self.masks
    }
}

/// Runs the network on a batch of covariates (`batch × input_dim`).
///
/// Pass a random stream to run in training mode (dropout active); `None`
/// gives the deterministic evaluation-mode pass.
pub fn forward(
    spec: &MlpSpec,
    params: &ParamSet,
    z: ArrayView2<f64>,
    dropout_rng: Option<&mut SeededRng>,
) -> Result<(Array2<f64>, ForwardCache)> {
    if z.ncols() != spec.input_dim {
        return Err(Error::shape(format!(
            "covariate batch has {} columns, network expects {}",
            z.ncols(),
            spec.input_dim
        )));
    }
    if !params.matches(spec) {
        return Err(Error::shape("parameters do not match the network spec"));
    }
    let hidden = spec.hidden_count();
    let concat = spec.concat_point();
    let rate = spec.dropout;
    let mut rng = dropout_rng.filter(|_| rate > 0.0);
    let keep_scale = 1.0 / (1.0 - rate);

    let mut inputs = Vec::with_capacity(hidden + 1);
    let mut gates = Vec::with_capacity(hidden);
    let mut masks = Vec::new();
    let mut h = z.to_owned();
    for (idx, layer) in params.layers.iter().enumerate() {
        if let Some((at, _)) = concat {
            if idx == at {
                h = ndarray::concatenate![Axis(1), h, z];
            }
        }
        let mut a = h.dot(&layer.weight);
        a += &layer.bias;
        inputs.push(h);
        if idx == hidden {
            h = a;
            break;
        }
        let mut gate = a.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        if let Some(rng) = rng.as_deref_mut() {
            let mask = Array2::from_shape_fn(a.dim(), |_| if rng.uniform(0.0, 1.0) < rate { 0.0 } else { keep_scale });
            gate *= &mask;
            masks.push(mask);
        }
        Zip::from(&mut a).and(&gate).for_each(|v, &g| *v *= g);
        gates.push(gate);
        h = a;
    }
    let output_dim = h.dim();
    Ok((
        h,
        ForwardCache {
            inputs,
            gates,
            concat,
            output_dim,
            masks,
        },
    ))
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient with respect to the network outputs.
pub fn backward(params: &ParamSet, cache: &ForwardCache, grad_outputs: ArrayView2<f64>) -> Result<ParamSet> {
    if grad_outputs.dim() != cache.output_dim {
        return Err(Error::StaleCache(format!(
            "output gradient is {:?}, forward produced {:?}",
            grad_outputs.dim(),
            cache.output_dim
        )));
    }
    if cache.inputs.len() != params.layers.len() || cache.gates.len() + 1 != params.layers.len() {
        return Err(Error::StaleCache("layer count differs from the parameters".into()));
    }
    let head = params.layers.len() - 1;
    let mut grads = Vec::with_capacity(params.layers.len());
    let mut g = grad_outputs.to_owned();
    for idx in (0..=head).rev() {
        let layer = &params.layers[idx];
        let input = &cache.inputs[idx];
        if input.ncols() != layer.weight.nrows() {
            return Err(Error::StaleCache(format!(
                "layer {idx} input width {} vs weight rows {}",
                input.ncols(),
                layer.weight.nrows()
            )));
        }
        if idx < head {
            g *= &cache.gates[idx];
        }
        grads.push(Dense {
            weight: input.t().dot(&g),
            bias: g.sum_axis(Axis(0)),
        });
        if idx > 0 {
            let mut upstream = g.dot(&layer.weight.t());
            if let Some((at, width)) = cache.concat {
                if idx == at {
                    upstream = upstream.slice(s![.., ..width]).to_owned();
                }
            }
            g = upstream;
        }
    }
    grads.reverse();
    Ok(ParamSet { layers: grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn random_batch(rows: usize, cols: usize, rng: &mut SeededRng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| rng.standard_normal())
    }

    #[test]
    fn layer_dims_follow_residual_layout() {
        let spec = MlpSpec::new(2, vec![128, 64], vec![128], 2450, 0.3).unwrap();
        assert_eq!(spec.layer_dims(), vec![(2, 128), (128, 64), (66, 128), (128, 2450)]);
        let lin = MlpSpec::linear(3, 6);
        assert_eq!(lin.layer_dims(), vec![(3, 6)]);
        let only1 = MlpSpec::new(3, vec![4], vec![], 6, 0.0).unwrap();
        assert_eq!(only1.layer_dims(), vec![(3, 4), (7, 6)]);
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(2, vec![0], vec![], 2, 0.0).is_err());
        assert!(MlpSpec::new(2, vec![3], vec![], 2, 1.0).is_err());
        assert!(MlpSpec::new(0, vec![], vec![], 2, 0.0).is_err());
    }

    #[test]
    fn zero_params_give_zero_outputs() {
        let spec = MlpSpec::new(3, vec![5, 4], vec![6], 12, 0.0).unwrap();
        let params = ParamSet::zeros(&spec);
        let mut rng = SeededRng::new(0, 0);
        let z = random_batch(7, 3, &mut rng);
        let (out, _) = forward(&spec, &params, z.view(), None).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_head_is_affine_map() {
        let spec = MlpSpec::linear(2, 3);
        let params = ParamSet {
            layers: vec![Dense {
                weight: array![[1.0, 0.0, -2.0], [0.5, 3.0, 1.0]],
                bias: array![0.1, 0.2, 0.3],
            }],
        };
        let z = array![[2.0, 4.0]];
        let (out, _) = forward(&spec, &params, z.view(), None).unwrap();
        assert_eq!(out, array![[2.0 + 2.0 + 0.1, 12.0 + 0.2, -4.0 + 4.0 + 0.3]]);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let spec = MlpSpec::linear(2, 3);
        let params = ParamSet::zeros(&spec);
        let z = Array2::<f64>::zeros((4, 3));
        assert!(matches!(
            forward(&spec, &params, z.view(), None),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn dropout_matches_recomputation_with_recorded_mask() {
        let spec = MlpSpec::new(3, vec![6], vec![5], 4, 0.3).unwrap();
        let mut rng = SeededRng::new(4, 0);
        let params = ParamSet::init(&spec, &mut rng);
        let z = random_batch(8, 3, &mut rng);
        let mut drop_rng = SeededRng::new(4, 1);
        let (out, cache) = forward(&spec, &params, z.view(), Some(&mut drop_rng)).unwrap();
        let masks = cache.dropout_masks();
        assert_eq!(masks.len(), 2);
        let scale = 1.0 / 0.7;
        assert!(masks[0].iter().all(|&m| m == 0.0 || (m - scale).abs() < 1e-15));

        // manual recomputation
        let relu = |a: Array2<f64>| a.mapv(|v| v.max(0.0));
        let l = &params.layers;
        let h1 = relu(z.dot(&l[0].weight) + &l[0].bias) * &masks[0];
        let cat = ndarray::concatenate![Axis(1), h1, z];
        let h2 = relu(cat.dot(&l[1].weight) + &l[1].bias) * &masks[1];
        let expected = h2.dot(&l[2].weight) + &l[2].bias;
        assert!(out.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let spec = MlpSpec::new(2, vec![8, 4], vec![8], 6, 0.5).unwrap();
        let params = ParamSet::init(&spec, &mut SeededRng::new(1, 0));
        let z = random_batch(5, 2, &mut SeededRng::new(1, 1));
        let (a, _) = forward(&spec, &params, z.view(), None).unwrap();
        let (b, _) = forward(&spec, &params, z.view(), None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_preserves_expectation() {
        // nonnegative weights and inputs keep every ReLU in its linear
        // regime, so the output is linear in the masks
        let spec = MlpSpec::new(2, vec![4], vec![], 3, 0.3).unwrap();
        let mut rng = SeededRng::new(8, 0);
        let mut params = ParamSet::init(&spec, &mut rng);
        for t in params.tensors_mut() {
            t.iter_mut().for_each(|v| *v = v.abs() + 0.05);
        }
        let z = array![[0.7, 1.3]];
        let (eval, _) = forward(&spec, &params, z.view(), None).unwrap();
        let draws = 20_000;
        let mut mean = Array2::<f64>::zeros(eval.dim());
        let mut drop_rng = SeededRng::new(8, 1);
        for _ in 0..draws {
            let (out, _) = forward(&spec, &params, z.view(), Some(&mut drop_rng)).unwrap();
            mean += &out;
        }
        mean /= draws as f64;
        for (m, e) in mean.iter().zip(eval.iter()) {
            assert!((m - e).abs() < 0.02 * e.abs().max(1.0), "{m} vs {e}");
        }
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let spec = MlpSpec::new(3, vec![4], vec![4], 6, 0.0).unwrap();
        let params = ParamSet::init(&spec, &mut SeededRng::new(2, 0));
        let z = random_batch(5, 3, &mut SeededRng::new(2, 1));
        let (out, cache) = forward(&spec, &params, z.view(), None).unwrap();
        let grads = backward(&params, &cache, Array2::zeros(out.dim()).view()).unwrap();
        assert!(grads.tensors().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_linear_layer_mse_gradient_closed_form() {
        // loss = (1/n) * sum ||Z W - Y||^2 -> dW = (2/n) Zᵀ (ZW - Y)
        let spec = MlpSpec::linear(3, 2);
        let mut rng = SeededRng::new(3, 0);
        let mut params = ParamSet::init(&spec, &mut rng);
        params.layers[0].bias.fill(0.0);
        let z = random_batch(10, 3, &mut rng);
        let y = random_batch(10, 2, &mut rng);
        let (out, cache) = forward(&spec, &params, z.view(), None).unwrap();
        let n = z.nrows() as f64;
        let grad_out = (&out - &y) * (2.0 / n);
        let grads = backward(&params, &cache, grad_out.view()).unwrap();
        let closed = z.t().dot(&(&out - &y)) * (2.0 / n);
        for (a, b) in grads.layers[0].weight.iter().zip(closed.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_rejects_mismatched_gradient() {
        let spec = MlpSpec::new(3, vec![4], vec![], 6, 0.0).unwrap();
        let params = ParamSet::init(&spec, &mut SeededRng::new(2, 0));
        let z = random_batch(5, 3, &mut SeededRng::new(2, 1));
        let (_, cache) = forward(&spec, &params, z.view(), None).unwrap();
        let wrong = Array2::<f64>::zeros((5, 7));
        assert!(matches!(
            backward(&params, &cache, wrong.view()),
            Err(Error::StaleCache(_))
        ));
        let other = ParamSet::init(
            &MlpSpec::new(3, vec![4, 4], vec![], 6, 0.0).unwrap(),
            &mut SeededRng::new(2, 0),
        );
        assert!(matches!(
            backward(&other, &cache, Array2::zeros((5, 6)).view()),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn flat_round_trip() {
        let spec = MlpSpec::new(2, vec![3], vec![2], 4, 0.0).unwrap();
        let params = ParamSet::init(&spec, &mut SeededRng::new(5, 0));
        let flat = params.to_flat();
        assert_eq!(flat.len(), spec.param_count());
        let mut other = ParamSet::zeros(&spec);
        other.assign_flat(&flat).unwrap();
        assert_eq!(other, params);
        assert!(other.assign_flat(&flat[1..]).is_err());
    }

    #[test]
    fn init_bounds_respected() {
        let spec = MlpSpec::new(10, vec![20], vec![], 30, 0.0).unwrap();
        let params = ParamSet::init(&spec, &mut SeededRng::new(6, 0));
        for layer in &params.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            assert!(layer.weight.iter().chain(layer.bias.iter()).all(|w| w.abs() <= bound));
            assert!(layer.bias.iter().any(|&b| b != 0.0));
        }
    }
}
