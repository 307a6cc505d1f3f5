use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Trainable parameter with its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
}

impl Param {
    pub fn zeros(n: usize) -> Self {
        Self {
            value: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn filled(n: usize, v: f32) -> Self {
        Self {
            value: vec![v; n],
            grad: vec![0.0; n],
        }
    }

    /// He-normal initialisation for a layer with `fan_in` inputs per output.
    pub fn he_normal(n: usize, fan_in: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            value: (0..n).map(|_| dist.sample(rng) as f32).collect(),
            grad: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Visitor over a module's parameters in a fixed, structural order.
pub trait Parameters {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    /// All parameter values flattened in visiting order.
    fn flat_values(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(&p.value));
        out
    }

    fn flat_grads(&self) -> Vec<f32> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(&p.grad));
        out
    }

    /// Overwrites parameter values from a flat vector; returns false when the
    /// length does not match.
    fn load_flat(&mut self, values: &[f32]) -> bool {
        if values.len() != self.param_count() {
            return false;
        }
        let mut offset = 0;
        self.visit_params_mut(&mut |p| {
            let n = p.len();
            p.value.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        true
    }
}
