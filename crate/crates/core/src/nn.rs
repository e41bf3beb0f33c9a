//! Parameterised layers built on the tape, plus the optimizers that update them.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::numerics::Gradients;
use crate::{Graph, Tensor, Var};

/// Anything holding trainable tensors in a fixed order.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn set_trainable(&mut self, flag: bool) {
        for p in self.params_mut() {
            p.set_requires_grad(flag);
        }
    }
}

/// Copies each parameter's gradient out of `grads`, clearing parameters the
/// pass did not reach.
pub fn store_gradients(module: &mut (impl Module + ?Sized), grads: &Gradients<f64>) {
    for p in module.params_mut() {
        let g = grads.of(p).map(<[f64]>::to_vec);
        p.set_grad(g);
    }
}

fn uniform_tensor(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let values = if bound > 0.0 {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        (0..n).map(|_| dist.sample(rng)).collect()
    } else {
        vec![0.0; n]
    };
    Tensor::param(shape, values).expect("finite init")
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform `±gain/√fan_in` weights and zero bias.
    pub fn new(fan_in: usize, fan_out: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let bound = gain / (fan_in.max(1) as f64).sqrt();
        Self { weight: uniform_tensor(vec![fan_out, fan_in], bound, rng), bias: Tensor::param(vec![fan_out], vec![0.0; fan_out]).expect("zeros") }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        x.linear(g.param(&self.weight), g.param(&self.bias))
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Channel-last convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-uniform kernel `[size, size, cin, cout]`, zero bias.
    pub fn new(cin: usize, cout: usize, size: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (size * size * cin) as f64).sqrt();
        Self {
            kernel: uniform_tensor(vec![size, size, cin, cout], bound, rng),
            bias: Tensor::param(vec![cout], vec![0.0; cout]).expect("zeros"),
            stride,
            pad,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Var<'g> {
        x.conv2d(g.param(&self.kernel), self.stride, self.pad) + g.param(&self.bias)
    }
}

impl Module for Conv2d {
    fn params(&self) -> Vec<&Tensor> {
        vec![&self.kernel, &self.bias]
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.kernel, &mut self.bias]
    }
}

/// Fully connected network with `tanh` between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(sizes: &[usize], gain: f64, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self { layers: sizes.windows(2).map(|w| Linear::new(w[0], w[1], gain, rng)).collect() }
    }

    pub fn forward<'g>(&self, g: &'g Graph, mut x: Var<'g>) -> Var<'g> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x);
            if i < last {
                x = x.tanh();
            }
        }
        x
    }
}

impl Module for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Module::params).collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Module::params_mut).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OptimizerKind {
    /// Heavy-ball SGD.
    Sgd { momentum: f64 },
    /// Adaptive moments with decoupled weight decay.
    Adam { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adamw() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug, Default)]
struct Slot {
    first: Vec<f64>,
    second: Vec<f64>,
}

#[derive(Clone, Debug)]
struct Group {
    lr: f64,
    steps: u64,
    slots: Vec<Slot>,
}

/// One optimizer over several parameter groups, each with its own learning
/// rate and step counter.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    groups: Vec<Group>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rates: &[f64]) -> Self {
        Self { kind, groups: learning_rates.iter().map(|&lr| Group { lr, steps: 0, slots: Vec::new() }).collect() }
    }

    pub fn learning_rate(&self, group: usize) -> f64 {
        self.groups[group].lr
    }

    /// Applies one update to `params` of `group` using their accumulated
    /// gradients; parameters without a gradient are left untouched.
    pub fn step(&mut self, group: usize, params: Vec<&mut Tensor>) {
        let kind = self.kind;
        let g = &mut self.groups[group];
        g.steps += 1;
        if g.slots.len() < params.len() {
            g.slots.resize_with(params.len(), Slot::default);
        }
        let (lr, t) = (g.lr, g.steps as f64);
        for (p, slot) in params.into_iter().zip(g.slots.iter_mut()) {
            let Some(grad) = p.grad().map(<[f64]>::to_vec) else { continue };
            if slot.first.len() != grad.len() {
                slot.first = vec![0.0; grad.len()];
                slot.second = vec![0.0; grad.len()];
            }
            let values = p.values_mut();
            match kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((v, m), d) in values.iter_mut().zip(&mut slot.first).zip(&grad) {
                        *m = momentum * *m + d;
                        *v -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps, weight_decay } => {
                    let (c1, c2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    for (((v, m), s), d) in values.iter_mut().zip(&mut slot.first).zip(&mut slot.second).zip(&grad) {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *s = beta2 * *s + (1.0 - beta2) * d * d;
                        *v -= lr * (weight_decay * *v + (*m / c1) / ((*s / c2).sqrt() + eps));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lin = Linear::new(3, 2, 1.0, &mut rng);
        let g = Graph::new();
        let x = [0.5, -1.0, 2.0];
        let y = lin.forward(&g, g.constant(vec![3], x.to_vec())).to_vec();
        for (o, yo) in y.iter().enumerate() {
            let want: f64 = (0..3).map(|i| lin.weight.values()[o * 3 + i] * x[i]).sum();
            assert!((yo - want).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_on_a_quadratic() {
        let mut p = Tensor::param(vec![1], vec![1.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 }, &[0.1]);
        p.set_grad(Some(vec![2.0]));
        opt.step(0, vec![&mut p]);
        assert!((p.values()[0] - 0.8).abs() < 1e-15);
        p.set_grad(Some(vec![2.0]));
        opt.step(0, vec![&mut p]);
        // m = 0.9·2 + 2 = 3.8
        assert!((p.values()[0] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Tensor::param(vec![2], vec![0.0, 0.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 0.0, weight_decay: 0.0 }, &[1e-3]);
        p.set_grad(Some(vec![5.0, -0.01]));
        opt.step(0, vec![&mut p]);
        assert!((p.values()[0] + 1e-3).abs() < 1e-12);
        assert!((p.values()[1] - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn groups_keep_separate_rates() {
        let mut a = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut b = Tensor::param(vec![1], vec![0.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::Sgd { momentum: 0.0 }, &[1.0, 0.5]);
        a.set_grad(Some(vec![1.0]));
        b.set_grad(Some(vec![1.0]));
        opt.step(0, vec![&mut a]);
        opt.step(1, vec![&mut b]);
        assert_eq!((a.values()[0], b.values()[0]), (-1.0, -0.5));
    }

    #[test]
    fn gradient_free_params_are_skipped() {
        let mut p = Tensor::param(vec![1], vec![3.0]).unwrap();
        let mut opt = Optimizer::new(OptimizerKind::adamw(), &[0.1]);
        opt.step(0, vec![&mut p]);
        assert_eq!(p.values()[0], 3.0);
    }
}
