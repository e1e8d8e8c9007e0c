//! Named parameter storage, RMSprop, Adam and critic weight clipping.

use serde::{Deserialize, Serialize};

use super::{Graph, Gradients, Scalar, Tensor, Var};
use crate::error::{ensure, Error, Result};

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Appends a parameter and returns its slot.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, slot: usize) -> &Tensor<T> {
        &self.values[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Tensor<T> {
        &mut self.values[slot]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.values.iter_mut()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Adds every parameter to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph<T>, requires_grad: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|v| g.leaf(v.clone(), requires_grad))
            .collect()
    }

    /// Collects the gradient of every bound parameter; absent gradients are zeros.
    pub fn collect_grads(&self, vars: &[Var], grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        vars.iter()
            .zip(&self.values)
            .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
            .collect()
    }

    /// Replaces every value with the same-named, same-shaped value from `other`.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let src = other
                .by_name(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            ensure!(
                src.shape() == value.shape(),
                Checkpoint,
                "parameter {name}: shape {:?} does not match {:?}",
                src.shape(),
                value.shape()
            );
            *value = src.clone();
        }
        Ok(())
    }

    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .map(Tensor::max_abs)
            .fold(T::zero(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(Tensor::is_finite)
    }
}

fn check_shapes<T: Scalar>(params: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
    ensure!(
        params.len() == grads.len(),
        Contract,
        "{} gradients for {} parameters",
        grads.len(),
        params.len()
    );
    for ((name, p), g) in params.iter().zip(grads) {
        ensure!(
            p.shape() == g.shape(),
            Contract,
            "gradient shape {:?} does not match parameter {name} {:?}",
            g.shape(),
            p.shape()
        );
    }
    Ok(())
}

/// RMSprop constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmsPropHyper {
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
}

impl RmsPropHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// One RMSprop update of a single array:
/// `v ← ρv + (1−ρ)g²`, `θ ← θ − lr·g/(√v + ε)`.
pub fn rmsprop_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    sq_avg: &mut [T],
    hyper: &RmsPropHyper,
) -> Result<()> {
    ensure!(
        param.len() == grad.len() && grad.len() == sq_avg.len(),
        Contract,
        "rmsprop: param/grad/state lengths {}/{}/{}",
        param.len(),
        grad.len(),
        sq_avg.len()
    );
    ensure!(hyper.lr > 0.0, Config, "learning rate must be positive");
    let (rho, lr, eps) = (T::of(hyper.rho), T::of(hyper.lr), T::of(hyper.eps));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(sq_avg.iter_mut()) {
        *v = rho * *v + (T::one() - rho) * g * g;
        let delta = lr * g / (v.sqrt() + eps);
        if delta != T::zero() {
            *p -= delta;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp<T> {
    pub hyper: RmsPropHyper,
    pub sq_avg: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> RmsProp<T> {
    pub fn new(hyper: RmsPropHyper, params: &ParamStore<T>) -> Self {
        Self {
            hyper,
            sq_avg: params.values.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads)?;
        for ((p, g), v) in params.values.iter_mut().zip(grads).zip(&mut self.sq_avg) {
            rmsprop_update(p.data_mut(), g.data(), v.data_mut(), &self.hyper)?;
        }
        self.steps += 1;
        Ok(())
    }
}

/// Adam constants; bias correction is always applied.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of a single array at 1-based step `t`.
pub fn adam_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    t: u64,
    hyper: &AdamHyper,
) -> Result<()> {
    ensure!(
        param.len() == grad.len() && grad.len() == m.len() && m.len() == v.len(),
        Contract,
        "adam: param/grad/state lengths {}/{}/{}/{}",
        param.len(),
        grad.len(),
        m.len(),
        v.len()
    );
    ensure!(hyper.lr > 0.0, Config, "learning rate must be positive");
    ensure!(t >= 1, Contract, "adam step counter starts at 1");
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let c1 = T::of(1.0 - hyper.beta1.powi(t as i32));
    let c2 = T::of(1.0 - hyper.beta2.powi(t as i32));
    let (lr, eps) = (T::of(hyper.lr), T::of(hyper.eps));
    for (((p, &g), mm), vv) in param.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
        *mm = b1 * *mm + (T::one() - b1) * g;
        *vv = b2 * *vv + (T::one() - b2) * g * g;
        let m_hat = *mm / c1;
        let v_hat = *vv / c2;
        let delta = lr * m_hat / (v_hat.sqrt() + eps);
        if delta != T::zero() {
            *p -= delta;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub hyper: AdamHyper,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hyper: AdamHyper, params: &ParamStore<T>) -> Self {
        let zeros = || params.values.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            hyper,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        check_shapes(params, grads)?;
        self.steps += 1;
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            adam_update(
                p.data_mut(),
                g.data(),
                m.data_mut(),
                v.data_mut(),
                self.steps,
                &self.hyper,
            )?;
        }
        Ok(())
    }
}

/// Clamps every entry of every parameter into `[-c, c]`.
pub fn clip_weights<T: Scalar>(params: &mut ParamStore<T>, c: f64) -> Result<()> {
    ensure!(c > 0.0, Config, "clip threshold must be positive, got {c}");
    let (lo, hi) = (T::of(-c), T::of(c));
    for p in params.values_mut() {
        for x in p.data_mut() {
            if *x > hi {
                *x = hi;
            } else if *x < lo {
                *x = lo;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rmsprop_zero_gradient_is_a_no_op() {
        let mut p = vec![0.3f32, -1.2];
        let before = p.clone();
        let mut v = vec![0.0f32; 2];
        rmsprop_update(&mut p, &[0.0, 0.0], &mut v, &RmsPropHyper::with_lr(0.01)).unwrap();
        assert_eq!(p, before);
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn rmsprop_first_step_matches_hand_value() {
        // v = 0.1, Δθ = -0.01 / (√0.1 + 1e-8)
        let mut p = vec![0.0f64];
        let mut v = vec![0.0f64];
        rmsprop_update(&mut p, &[1.0], &mut v, &RmsPropHyper::with_lr(0.01)).unwrap();
        assert!((p[0] + 0.0316228).abs() < 1e-7, "{}", p[0]);
    }

    #[test]
    fn rmsprop_steps_shrink_under_constant_gradient() {
        let mut p = vec![0.0f64];
        let mut v = vec![0.0f64];
        let h = RmsPropHyper::with_lr(0.01);
        rmsprop_update(&mut p, &[1.0], &mut v, &h).unwrap();
        let d1 = p[0];
        rmsprop_update(&mut p, &[1.0], &mut v, &h).unwrap();
        let d2 = p[0] - d1;
        assert!(d2.abs() < d1.abs());
    }

    #[test]
    fn rmsprop_rejects_shape_mismatch() {
        let mut p = vec![0.0f32; 2];
        let mut v = vec![0.0f32; 2];
        let err = rmsprop_update(&mut p, &[1.0], &mut v, &RmsPropHyper::with_lr(0.01));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn adam_first_step_is_a_sign_update() {
        let h = AdamHyper::with_lr(1e-4);
        for g in [2.0f64, -0.37, 1e-3, 55.0] {
            let mut p = vec![1.0f64];
            let (mut m, mut v) = (vec![0.0], vec![0.0]);
            adam_update(&mut p, &[g], &mut m, &mut v, 1, &h).unwrap();
            let delta = p[0] - 1.0;
            let want = -1e-4 * g.signum();
            assert!(((delta - want) / want).abs() < 1e-4, "g={g} delta={delta}");
        }
        let mut p = vec![0.5f32];
        let (mut m, mut v) = (vec![0.0f32], vec![0.0f32]);
        adam_update(&mut p, &[0.0], &mut m, &mut v, 1, &h).unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn adam_store_step_counts() {
        let mut store = ParamStore::<f32>::new();
        store.push("w", Tensor::vector(vec![1.0, 2.0]));
        let mut opt = Adam::new(AdamHyper::with_lr(0.1), &store);
        opt.step(&mut store, &[Tensor::vector(vec![1.0, -1.0])]).unwrap();
        opt.step(&mut store, &[Tensor::vector(vec![1.0, -1.0])]).unwrap();
        assert_eq!(opt.steps, 2);
        assert!(store.get(0).data()[0] < 1.0 && store.get(0).data()[1] > 2.0);
        assert!(opt
            .step(&mut store, &[Tensor::vector(vec![1.0])])
            .is_err());
    }

    #[test]
    fn clip_examples() {
        let mut s = ParamStore::<f32>::new();
        s.push("w", Tensor::vector(vec![0.1, -0.2, 0.03]));
        clip_weights(&mut s, 0.05).unwrap();
        assert_eq!(s.get(0).data(), &[0.05, -0.05, 0.03]);
        assert!(matches!(clip_weights(&mut s, 0.0), Err(Error::Config(_))));
        assert!(matches!(clip_weights(&mut s, -1.0), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_bounded(
            xs in prop::collection::vec(-1.0f32..1.0, 1..64),
            c in 0.001f64..0.5,
        ) {
            let mut s = ParamStore::<f32>::new();
            s.push("w", Tensor::vector(xs.clone()));
            clip_weights(&mut s, c).unwrap();
            let once = s.clone();
            clip_weights(&mut s, c).unwrap();
            prop_assert_eq!(&once, &s);
            prop_assert!(s.max_abs() <= c as f32);
            for (&x, &y) in xs.iter().zip(s.get(0).data()) {
                if x.abs() <= c as f32 {
                    prop_assert_eq!(x, y);
                }
            }
        }

        #[test]
        fn zero_gradient_leaves_params_bitwise(
            xs in prop::collection::vec(-10.0f32..10.0, 1..32),
            steps in 1usize..4,
        ) {
            let mut s = ParamStore::<f32>::new();
            s.push("w", Tensor::vector(xs.clone()));
            let zero = vec![Tensor::zeros(&[xs.len()])];
            let mut rms = RmsProp::new(RmsPropHyper::with_lr(0.01), &s);
            let mut adam = Adam::new(AdamHyper::with_lr(0.01), &s);
            for _ in 0..steps {
                rms.step(&mut s, &zero).unwrap();
                adam.step(&mut s, &zero).unwrap();
            }
            prop_assert_eq!(s.get(0).data(), &xs[..]);
        }
    }
}
