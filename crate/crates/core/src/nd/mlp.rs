//! Fully connected networks with hand-written backpropagation.
//!
//! Weights are stored `fan_in x fan_out`, so a batch of row inputs multiplies
//! from the left. The ReLU derivative at exactly zero is taken to be zero.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linalg::{dot, gemm_acc, gemm_at_acc, gemm_bt};
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, v: &mut [f64]) {
        if self == Activation::Relu {
            for x in v {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    #[serde(with = "crate::nd::serde_arrays::matrix")]
    pub weights: Array2<f64>,
    #[serde(with = "crate::nd::serde_arrays::vector")]
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weights.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Dense>", into = "Vec<Dense>")]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl TryFrom<Vec<Dense>> for Mlp {
    type Error = crate::Error;

    fn try_from(layers: Vec<Dense>) -> Result<Self> {
        Mlp::new(layers)
    }
}

impl From<Mlp> for Vec<Dense> {
    fn from(m: Mlp) -> Self {
        m.layers
    }
}

/// Parameter gradients with the same shapes as the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w.as_slice().expect("standard layout"));
            out.push(b.as_slice().expect("standard layout"));
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.biases.iter_mut().for_each(|b| *b *= s);
    }
}

/// Per-layer activations of a batched forward pass (`acts[0]` is the input).
#[derive(Debug, Clone)]
pub struct BatchCache {
    acts: Vec<Array2<f64>>,
}

impl BatchCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds the input")
    }
}

/// Forward pass where row `r` only needs output coordinate `index[r]`.
#[derive(Debug, Clone)]
pub struct DiagCache {
    acts: Vec<Array2<f64>>,
    index: Vec<usize>,
    pub output: Vec<f64>,
}

impl Mlp {
    pub fn new(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return shape_err("network needs at least one layer");
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].fan_out() != pair[1].fan_in() {
                return shape_err(format!(
                    "layer {i} emits {} values but layer {} takes {}",
                    pair[0].fan_out(),
                    i + 1,
                    pair[1].fan_in()
                ));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.fan_out() {
                return shape_err(format!("layer {i} bias has wrong length"));
            }
        }
        if layers.last().unwrap().activation != Activation::Identity {
            return shape_err("final layer must use the identity activation");
        }
        let layers = layers
            .into_iter()
            .map(|l| Dense {
                weights: l.weights.as_standard_layout().into_owned(),
                bias: l.bias.as_standard_layout().into_owned(),
                activation: l.activation,
            })
            .collect();
        Ok(Self { layers })
    }

    /// Random network with layer widths `dims` (`dims[0]` inputs, last entry outputs).
    ///
    /// Hidden layers use `hidden` activations, the last layer is linear. Weights and
    /// biases are drawn uniformly from `±1/sqrt(fan_in)`.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], hidden: Activation, rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return shape_err("need at least input and output widths");
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|l| {
                let (fan_in, fan_out) = (dims[l], dims[l + 1]);
                let activation = if l + 1 == n { Activation::Identity } else { hidden };
                let bound = 1.0 / (fan_in as f64).sqrt();
                let weights = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-bound..bound));
                let bias = Array1::from_shape_simple_fn(fan_out, || rng.random_range(-bound..bound));
                Dense {
                    weights,
                    bias,
                    activation,
                }
            })
            .collect();
        Mlp::new(layers)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().fan_out()
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    /// Mutable parameter views in a fixed order (weights then bias, per layer).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weights.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        out
    }

    pub fn zero_grads(&self) -> MlpGrads {
        MlpGrads {
            weights: self.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: self.layers.iter().map(|l| Array1::zeros(l.fan_out())).collect(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .expect("one row");
        let cache = self.forward_batch(&x)?;
        Ok(cache.output().row(0).to_vec())
    }

    /// Gradients of `upstream · forward(input)` with respect to every parameter and the input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if upstream.len() != self.output_dim() {
            return shape_err(format!(
                "upstream has {} entries, network emits {}",
                upstream.len(),
                self.output_dim()
            ));
        }
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec()).expect("one row");
        let cache = self.forward_batch(&x)?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).expect("one row");
        let mut grads = self.zero_grads();
        let dx = self.backward_batch(&cache, &up, &mut grads);
        Ok((grads, dx.row(0).to_vec()))
    }

    fn check_input(&self, input: &Array2<f64>) -> Result<()> {
        if input.ncols() != self.input_dim() {
            return shape_err(format!(
                "network takes {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            ));
        }
        Ok(())
    }

    fn layer_forward(layer: &Dense, input: &Array2<f64>) -> Array2<f64> {
        let rows = input.nrows();
        let mut out = Array2::<f64>::zeros((rows, layer.fan_out()));
        gemm_acc(
            input.as_slice().expect("standard layout"),
            layer.fan_in(),
            layer.weights.as_slice().unwrap(),
            layer.fan_out(),
            out.as_slice_mut().unwrap(),
        );
        let bias = layer.bias.as_slice().unwrap();
        for row in out.as_slice_mut().unwrap().chunks_exact_mut(layer.fan_out()) {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
            layer.activation.apply(row);
        }
        out
    }

    fn forward_layers(&self, input: &Array2<f64>, upto: usize) -> Vec<Array2<f64>> {
        let mut acts = Vec::with_capacity(upto + 1);
        acts.push(input.as_standard_layout().into_owned());
        for layer in &self.layers[..upto] {
            let next = Self::layer_forward(layer, acts.last().unwrap());
            acts.push(next);
        }
        acts
    }

    pub fn forward_batch(&self, input: &Array2<f64>) -> Result<BatchCache> {
        self.check_input(input)?;
        Ok(BatchCache {
            acts: self.forward_layers(input, self.layers.len()),
        })
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        upstream: &Array2<f64>,
        grads: &mut MlpGrads,
    ) -> Array2<f64> {
        assert_eq!(upstream.dim(), cache.output().dim(), "upstream shape");
        let delta = upstream.as_standard_layout().into_owned();
        self.backprop_from(&cache.acts, self.layers.len(), delta, grads)
    }

    /// Backpropagates `delta` (gradient w.r.t. the output of layer `top - 1`)
    /// through layers `top-1 .. 0`.
    fn backprop_from(
        &self,
        acts: &[Array2<f64>],
        top: usize,
        mut delta: Array2<f64>,
        grads: &mut MlpGrads,
    ) -> Array2<f64> {
        for l in (0..top).rev() {
            let layer = &self.layers[l];
            if layer.activation == Activation::Relu {
                for (d, a) in delta.iter_mut().zip(acts[l + 1].iter()) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let fan_out = layer.fan_out();
            gemm_at_acc(
                acts[l].as_slice().unwrap(),
                layer.fan_in(),
                delta.as_slice().unwrap(),
                fan_out,
                grads.weights[l].as_slice_mut().unwrap(),
            );
            grads.biases[l] += &delta.sum_axis(Axis(0));
            let mut prev = Array2::<f64>::zeros((delta.nrows(), layer.fan_in()));
            gemm_bt(
                delta.as_slice().unwrap(),
                fan_out,
                layer.weights.as_slice().unwrap(),
                prev.as_slice_mut().unwrap(),
            );
            delta = prev;
        }
        delta
    }

    /// Forward pass computing only output coordinate `index[r]` for input row `r`.
    ///
    /// Bit-identical to `forward_batch(..).output()[[r, index[r]]]`.
    pub fn forward_diag(&self, input: &Array2<f64>, index: Vec<usize>) -> Result<DiagCache> {
        self.check_input(input)?;
        if index.len() != input.nrows() {
            return shape_err("one output index per input row required");
        }
        let last = self.layers.len() - 1;
        let layer = &self.layers[last];
        if let Some(&bad) = index.iter().find(|&&j| j >= layer.fan_out()) {
            return shape_err(format!("output index {bad} out of range"));
        }
        let acts = self.forward_layers(input, last);
        let hidden = acts.last().unwrap();
        let wt = layer.weights.t().as_standard_layout().into_owned();
        let output = hidden
            .rows()
            .into_iter()
            .zip(&index)
            .map(|(h, &j)| {
                dot(h.as_slice().unwrap(), wt.row(j).as_slice().unwrap()) + layer.bias[j]
            })
            .collect();
        Ok(DiagCache {
            acts,
            index,
            output,
        })
    }

    /// Backward pass for [`Mlp::forward_diag`] with one upstream scalar per row.
    pub fn backward_diag(
        &self,
        cache: &DiagCache,
        upstream: &[f64],
        grads: &mut MlpGrads,
    ) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let layer = &self.layers[last];
        let hidden = cache.acts.last().unwrap();
        let width = layer.fan_in();
        let fan_out = layer.fan_out();
        let wt = layer.weights.t().as_standard_layout().into_owned();
        let mut gwt = Array2::<f64>::zeros((fan_out, width));
        let mut delta = Array2::<f64>::zeros((hidden.nrows(), width));
        for (r, (&j, &d)) in cache.index.iter().zip(upstream).enumerate() {
            if d == 0.0 {
                continue;
            }
            let h = hidden.row(r);
            let mut gw = gwt.row_mut(j);
            gw.scaled_add(d, &h);
            grads.biases[last][j] += d;
            delta.row_mut(r).scaled_add(d, &wt.row(j));
        }
        grads.weights[last] += &gwt.t();
        self.backprop_from(&cache.acts, last, delta, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nd::rng::{stream, Stream};
    use ndarray::array;

    fn identity_net(n: usize) -> Mlp {
        Mlp::new(vec![Dense {
            weights: Array2::eye(n),
            bias: Array1::zeros(n),
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_passes_through() {
        assert_eq!(identity_net(2).forward(&[2.0, 3.0]).unwrap(), vec![2.0, 3.0]);
    }

    #[test]
    fn relu_hand_value() {
        let net = Mlp::new(vec![
            Dense {
                weights: array![[1.0], [-1.0]],
                bias: array![0.0],
                activation: Activation::Relu,
            },
            Dense {
                weights: array![[1.0]],
                bias: array![0.0],
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        assert_eq!(net.forward(&[2.0, 3.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let net = Mlp::new(vec![Dense {
            weights: Array2::zeros((3, 2)),
            bias: array![0.25, -4.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        assert_eq!(net.forward(&[9.0, -1.0, 3.0]).unwrap(), vec![0.25, -4.0]);
    }

    #[test]
    fn shape_errors() {
        let net = identity_net(2);
        assert!(net.forward(&[1.0]).is_err());
        assert!(net.backward(&[1.0, 2.0], &[1.0]).is_err());
        let bad = Mlp::new(vec![
            Dense {
                weights: Array2::zeros((2, 3)),
                bias: Array1::zeros(3),
                activation: Activation::Relu,
            },
            Dense {
                weights: Array2::zeros((2, 1)),
                bias: Array1::zeros(1),
                activation: Activation::Identity,
            },
        ]);
        assert!(bad.is_err());
        let relu_last = Mlp::new(vec![Dense {
            weights: Array2::zeros((2, 1)),
            bias: Array1::zeros(1),
            activation: Activation::Relu,
        }]);
        assert!(relu_last.is_err());
    }

    #[test]
    fn linear_input_grad_is_weight_row() {
        let net = Mlp::new(vec![Dense {
            weights: array![[0.5], [-2.0], [3.0]],
            bias: array![1.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let (_, dx) = net.backward(&[1.0, 1.0, 1.0], &[1.0]).unwrap();
        assert_eq!(dx, vec![0.5, -2.0, 3.0]);
    }

    #[test]
    fn relu_at_zero_has_zero_subgradient() {
        let net = Mlp::new(vec![
            Dense {
                weights: array![[1.0]],
                bias: array![0.0],
                activation: Activation::Relu,
            },
            Dense {
                weights: array![[2.0]],
                bias: array![0.0],
                activation: Activation::Identity,
            },
        ])
        .unwrap();
        let (g, dx) = net.backward(&[0.0], &[1.0]).unwrap();
        assert_eq!(dx, vec![0.0]);
        assert_eq!(g.weights[0][[0, 0]], 0.0);
        assert_eq!(g.biases[0][0], 0.0);
    }

    #[test]
    fn diag_matches_full_forward_bitwise() {
        let mut rng = stream(3, Stream::Init);
        let net = Mlp::init(&[4, 9, 9, 6], Activation::Relu, &mut rng).unwrap();
        let x = crate::nd::rng::normal_matrix(&mut rng, 12, 4);
        let full = net.forward_batch(&x).unwrap();
        let index: Vec<usize> = (0..12).map(|r| r % 6).collect();
        let diag = net.forward_diag(&x, index.clone()).unwrap();
        for (r, &j) in index.iter().enumerate() {
            assert_eq!(diag.output[r].to_bits(), full.output()[[r, j]].to_bits());
        }
    }

    #[test]
    fn diag_backward_matches_masked_full_backward() {
        let mut rng = stream(4, Stream::Init);
        let net = Mlp::init(&[3, 7, 5], Activation::Relu, &mut rng).unwrap();
        let x = crate::nd::rng::normal_matrix(&mut rng, 10, 3);
        let index: Vec<usize> = (0..10).map(|r| (r * 3) % 5).collect();
        let up: Vec<f64> = (0..10).map(|r| r as f64 * 0.1 - 0.4).collect();

        let diag = net.forward_diag(&x, index.clone()).unwrap();
        let mut g1 = net.zero_grads();
        let dx1 = net.backward_diag(&diag, &up, &mut g1);

        let full = net.forward_batch(&x).unwrap();
        let mut upm = Array2::zeros((10, 5));
        for r in 0..10 {
            upm[[r, index[r]]] = up[r];
        }
        let mut g2 = net.zero_grads();
        let dx2 = net.backward_batch(&full, &upm, &mut g2);
        for (a, b) in dx1.iter().zip(dx2.iter()) {
            assert!((a - b).abs() < 1e-13);
        }
        for (a, b) in g1.slices().iter().zip(g2.slices()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn forward_is_pure() {
        let mut rng = stream(5, Stream::Init);
        let net = Mlp::init(&[3, 8, 2], Activation::Relu, &mut rng).unwrap();
        let a = net.forward(&[0.3, -1.2, 2.0]).unwrap();
        let b = net.forward(&[0.3, -1.2, 2.0]).unwrap();
        assert_eq!(a, b);
        let (ga, da) = net.backward(&[0.3, -1.2, 2.0], &[1.0, -1.0]).unwrap();
        let (gb, db) = net.backward(&[0.3, -1.2, 2.0], &[1.0, -1.0]).unwrap();
        assert_eq!(ga, gb);
        assert_eq!(da, db);
    }

    #[test]
    fn serde_round_trip_validates_shape() {
        let mut rng = stream(6, Stream::Init);
        let net = Mlp::init(&[3, 4, 2], Activation::Relu, &mut rng).unwrap();
        let text = serde_json::to_string(&net).unwrap();
        let back: Mlp = serde_json::from_str(&text).unwrap();
        assert_eq!(back, net);
    }
}
