//! Fully connected ReLU network with a linear output layer and hand-written
//! reverse-mode gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in × fan_out`, applied as `x · W + b`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug)]
pub struct MlpTape {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Array2<f64>>,
}

/// Parameter gradients, laid out like [`Mlp::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// He-uniform initialization. `hidden` lists hidden-layer widths.
    pub fn new<R: Rng>(input: usize, hidden: &[usize], output: usize, rng: &mut R) -> Self {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(input);
        dims.extend_from_slice(hidden);
        dims.push(output);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                Dense {
                    weight: Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound)),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Self {
        assert!(!layers.is_empty(), "an MLP needs at least one layer");
        for w in layers.windows(2) {
            assert_eq!(w[0].fan_out(), w[1].fan_in(), "layer widths do not chain");
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").fan_out()
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1].iter().map(Dense::fan_out).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty");
        last.weight.fill(0.0);
        last.bias.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                h.mapv_inplace(relu);
            }
        }
        h
    }

    pub fn forward_taped(&self, x: Array2<f64>) -> (Array2<f64>, MlpTape) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut next = h.dot(&layer.weight) + &layer.bias;
            if i < last {
                next.mapv_inplace(relu);
            }
            inputs.push(h);
            h = next;
        }
        (h, MlpTape { inputs })
    }

    /// Returns parameter gradients and, if `want_input`, the gradient w.r.t.
    /// the network input.
    pub fn backward(&self, tape: &MlpTape, grad_out: Array2<f64>, want_input: bool) -> (MlpGrads, Option<Array2<f64>>) {
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out;
        let mut grad_input = None;
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &tape.inputs[i];
            let weight = input.t().dot(&g);
            let bias = g.sum_axis(Axis(0));
            grads.push(Dense { weight, bias });
            if i > 0 || want_input {
                let mut gi = g.dot(&layer.weight.t());
                if i > 0 {
                    // input[i] is the ReLU output of layer i−1; its derivative
                    // is 1 exactly where the output is positive
                    ndarray::Zip::from(&mut gi).and(input).for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    g = gi;
                } else {
                    grad_input = Some(gi);
                }
            }
        }
        grads.reverse();
        (MlpGrads { layers: grads }, grad_input)
    }
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers()
                .iter()
                .map(|l| Dense {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weight *= factor;
            l.bias *= factor;
        }
    }
}

#[inline]
fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(mlp: &Mlp, x: &Array2<f64>, w: &Array2<f64>) -> f64 {
        (&mlp.forward(x.view()) * w).sum()
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::new(4, &[6, 5], 3, &mut rng);
        let x = Array2::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let w = Array2::from_shape_fn((5, 3), |(i, j)| ((i + 2 * j) % 5) as f64 / 5.0 - 0.3);
        let (_, tape) = mlp.forward_taped(x.clone());
        let (grads, gin) = mlp.backward(&tape, w.clone(), true);
        let gin = gin.unwrap();
        let h = 1e-6;

        for (li, layer) in mlp.layers().iter().enumerate() {
            for idx in [(0, 0), (layer.fan_in() - 1, layer.fan_out() - 1)] {
                let mut p = mlp.clone();
                p.layers_mut()[li].weight[idx] += h;
                let mut m = mlp.clone();
                m.layers_mut()[li].weight[idx] -= h;
                let fd = (loss(&p, &x, &w) - loss(&m, &x, &w)) / (2.0 * h);
                let an = grads.layers[li].weight[idx];
                assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0), "layer {li} {idx:?}: {fd} vs {an}");
            }
            let mut p = mlp.clone();
            p.layers_mut()[li].bias[0] += h;
            let mut m = mlp.clone();
            m.layers_mut()[li].bias[0] -= h;
            let fd = (loss(&p, &x, &w) - loss(&m, &x, &w)) / (2.0 * h);
            assert!((fd - grads.layers[li].bias[0]).abs() < 1e-6 * fd.abs().max(1.0));
        }
        for i in 0..5 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (loss(&mlp, &xp, &w) - loss(&mlp, &xm, &w)) / (2.0 * h);
                assert!((fd - gin[[i, j]]).abs() < 1e-6 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn zeroed_output_layer_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut mlp = Mlp::new(3, &[8, 8], 2, &mut rng);
        mlp.zero_output_layer();
        let x = Array2::from_elem((4, 3), 0.7);
        assert!(mlp.forward(x.view()).iter().all(|&v| v == 0.0));
        assert_eq!(mlp.hidden_widths(), vec![8, 8]);
    }
}
