//! Adam over the parameter tensors of a [`NarcanModel`].

use crate::fields::mlp::{Mlp, MlpGrads};
use crate::fields::{ModelGrads, NarcanModel};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn update<'a>(&mut self, params: impl Iterator<Item = &'a mut f64>, grads: impl Iterator<Item = &'a f64>, lr: f64, c1: f64, c2: f64) {
        for (((p, g), m), v) in params.zip(grads).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + EPS);
        }
    }
}

fn mlp_moments(mlp: &Mlp) -> Vec<Moments> {
    mlp.layers()
        .iter()
        .flat_map(|l| [Moments::new(l.weight.len()), Moments::new(l.bias.len())])
        .collect()
}

fn step_mlp(moments: &mut [Moments], mlp: &mut Mlp, grads: &MlpGrads, lr: f64, c1: f64, c2: f64) {
    for (i, (layer, grad)) in mlp.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
        moments[2 * i].update(layer.weight.iter_mut(), grad.weight.iter(), lr, c1, c2);
        moments[2 * i + 1].update(layer.bias.iter_mut(), grad.bias.iter(), lr, c1, c2);
    }
}

/// Learning rates for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub homography: f64,
    pub residual: f64,
    pub canonical: f64,
}

#[derive(Debug, Clone)]
pub struct ModelOptimizer {
    homography: Moments,
    residual: Vec<Moments>,
    canonical: Vec<Moments>,
    steps: i32,
}

impl ModelOptimizer {
    pub fn new(model: &NarcanModel) -> Self {
        Self {
            homography: Moments::new(model.homography.params().len()),
            residual: mlp_moments(model.residual.mlp()),
            canonical: mlp_moments(model.canonical.mlp()),
            steps: 0,
        }
    }

    pub fn step(&mut self, model: &mut NarcanModel, grads: &ModelGrads, lr: StepSizes) {
        self.steps += 1;
        let c1 = 1.0 - BETA1.powi(self.steps);
        let c2 = 1.0 - BETA2.powi(self.steps);
        if lr.homography > 0.0 {
            self.homography
                .update(model.homography.params_mut().iter_mut(), grads.homography.iter(), lr.homography, c1, c2);
        }
        if let Some(rg) = &grads.residual {
            step_mlp(&mut self.residual, model.residual.mlp_mut(), rg, lr.residual, c1, c2);
        }
        step_mlp(&mut self.canonical, model.canonical.mlp_mut(), &grads.canonical, lr.canonical, c1, c2);
    }
}
