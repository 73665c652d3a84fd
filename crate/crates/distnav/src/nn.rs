//! Shared neural-network plumbing: named parameter sets, weight init, the
//! Adam optimizer, warmup+cosine learning-rate schedules, and the
//! finite-difference gradient oracle used by the test suites.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayD};
use rand::Rng;

use crate::tape::{Tape, Var};

/// An ordered collection of named tensors. Order is fixed at construction and
/// shared by optimizer state, gradients, and checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<ArrayD<f64>>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, tensor: ArrayD<f64>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        let ix = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &self.tensors[ix]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        let ix = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        &mut self.tensors[ix]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[ArrayD<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [ArrayD<f64>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(ArrayD::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Round every value through f32, matching the checkpoint container's
    /// storage precision. Parameters loaded from disk are exact fixed points
    /// of this map.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            t.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaves of a [`ParamSet`] loaded onto a tape, addressable by name.
pub struct TapeParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl TapeParams {
    pub fn load(tape: &mut Tape, params: &ParamSet) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        Self { vars, index: params.index.clone() }
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))]
    }

    /// Gradients in parameter order, zero-filled for unused parameters.
    pub fn grads(&self, tape: &Tape, grads: &crate::tape::Grads) -> Vec<ArrayD<f64>> {
        self.vars.iter().map(|v| grads.wrt(tape, *v)).collect()
    }
}

/// Uniform init scaled by 1/sqrt(fan_in).
pub fn init_weight(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

pub fn zeros1(n: usize) -> Array1<f64> {
    Array1::zeros(n)
}

/// Adam with optional decoupled weight decay.
pub struct Adam {
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Adam {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
            v: params.tensors.iter().map(|t| ArrayD::zeros(t.raw_dim())).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[ArrayD<f64>], lr: f64) {
        assert_eq!(grads.len(), params.tensors.len(), "gradient layout mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            azip_update(p, g, m, v, self.beta1, self.beta2, bc1, bc2, self.eps, lr, self.weight_decay);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    p: &mut ArrayD<f64>,
    g: &ArrayD<f64>,
    m: &mut ArrayD<f64>,
    v: &mut ArrayD<f64>,
    beta1: f64,
    beta2: f64,
    bc1: f64,
    bc2: f64,
    eps: f64,
    lr: f64,
    wd: f64,
) {
    for (((pv, &gv), mv), vv) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mv = beta1 * *mv + (1.0 - beta1) * gv;
        *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
        let mh = *mv / bc1;
        let vh = *vv / bc2;
        *pv -= lr * (mh / (vh.sqrt() + eps) + wd * *pv);
    }
}

/// Linear warmup followed by cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        if step < self.warmup_steps {
            return self.base_lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps.saturating_sub(self.warmup_steps)).max(1) as f64;
        let frac = (step - self.warmup_steps) as f64 / span;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
    }
}

/// Central finite differences of `f` over every coordinate of `params`.
pub fn numeric_gradient<F>(params: &ParamSet, mut f: F, h: f64) -> Vec<ArrayD<f64>>
where
    F: FnMut(&ParamSet) -> f64,
{
    let mut work = params.clone();
    let mut out = Vec::with_capacity(params.tensors.len());
    for ti in 0..params.tensors.len() {
        let mut grad = ArrayD::zeros(params.tensors[ti].raw_dim());
        for k in 0..params.tensors[ti].len() {
            let orig = params.tensors[ti].as_slice().unwrap()[k];
            work.tensors[ti].as_slice_mut().unwrap()[k] = orig + h;
            let up = f(&work);
            work.tensors[ti].as_slice_mut().unwrap()[k] = orig - h;
            let down = f(&work);
            work.tensors[ti].as_slice_mut().unwrap()[k] = orig;
            grad.as_slice_mut().unwrap()[k] = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// Worst relative disagreement between analytic and numeric gradients.
///
/// The denominator is floored at 1e-3 so that near-zero gradients are
/// compared absolutely at 1e-7 rather than amplifying finite-difference
/// noise.
pub fn max_rel_grad_error(analytic: &[ArrayD<f64>], numeric: &[ArrayD<f64>]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        assert_eq!(a.shape(), n.shape());
        for (&av, &nv) in a.iter().zip(n.iter()) {
            let denom = av.abs().max(nv.abs()).max(1e-3);
            worst = worst.max((av - nv).abs() / denom);
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = LrSchedule { base_lr: 1e-3, warmup_steps: 10, total_steps: 110 };
        assert!(s.lr_at(0) < s.lr_at(5));
        assert!((s.lr_at(9) - 1e-3).abs() < 1e-9);
        assert!(s.lr_at(50) < s.lr_at(10));
        assert!(s.lr_at(109) < 1e-5);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut params = ParamSet::new();
        params.add("x", ndarray::arr1(&[5.0, -3.0]).into_dyn());
        let mut opt = Adam::new(&params);
        for _ in 0..500 {
            let grads = vec![params.get("x").mapv(|x| 2.0 * x)];
            opt.step(&mut params, &grads, 0.05);
        }
        assert!(params.get("x").iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn numeric_gradient_matches_closed_form() {
        let mut params = ParamSet::new();
        let mut rng = stream(3, "init");
        params.add("w", init_weight(&mut rng, 4, 1).into_dyn());
        let f = |p: &ParamSet| p.get("w").iter().map(|x| x * x * x).sum::<f64>();
        let numeric = numeric_gradient(&params, f, 1e-5);
        let analytic = vec![params.get("w").mapv(|x| 3.0 * x * x)];
        assert!(max_rel_grad_error(&analytic, &numeric) < 1e-4);
    }
}
