//! Adaptive-moment optimizer with decoupled weight decay.

use indexmap::IndexMap;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::backward::Gradient;
use super::state::ModelState;
use crate::error::{Error, Result};

/// Optimizer hyperparameters and per-parameter moment estimates.
///
/// Moment tensors are allocated lazily on the first step so a state can
/// be constructed before the model it will drive.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step_count: u64,
    first_moment: IndexMap<String, ArrayD<f64>>,
    second_moment: IndexMap<String, ArrayD<f64>>,
}

/// Hyperparameters accepted wherever a training loop is configured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step_count: 0,
            first_moment: IndexMap::new(),
            second_moment: IndexMap::new(),
        }
    }
}

/// Apply one decoupled-weight-decay adaptive-moment update to every
/// trainable parameter. Frozen parameters and their moments are left
/// untouched, bit for bit.
pub fn optimizer_step(
    model: &mut ModelState,
    optimizer: &mut OptimizerState,
    gradient: &Gradient,
) -> Result<()> {
    for (name, grad) in gradient {
        if !model.trainable.get(name).copied().unwrap_or(false) {
            continue;
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numerical {
                tensor: name.clone(),
                detail: format!("non-finite gradient entry {bad}"),
            });
        }
    }

    optimizer.step_count += 1;
    let t = optimizer.step_count as i32;
    let bias1 = 1.0 - optimizer.beta1.powi(t);
    let bias2 = 1.0 - optimizer.beta2.powi(t);

    for (name, grad) in gradient {
        if !model.trainable.get(name).copied().unwrap_or(false) {
            continue;
        }
        let param = model
            .params
            .get_mut(name)
            .ok_or_else(|| Error::input(format!("gradient names unknown tensor `{name}`")))?;
        if param.shape() != grad.shape() {
            return Err(Error::input(format!(
                "gradient shape {:?} does not match `{name}` shape {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let m = optimizer
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(param.raw_dim()));
        let v = optimizer
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(param.raw_dim()));

        let (b1, b2) = (optimizer.beta1, optimizer.beta2);
        let (lr, wd, eps) = (
            optimizer.learning_rate,
            optimizer.weight_decay,
            optimizer.epsilon,
        );
        ndarray::Zip::from(param)
            .and(m)
            .and(v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
            });
    }
    Ok(())
}

/// Scale the whole gradient so its global L2 norm does not exceed
/// `max_norm`. No-op when already within bounds.
pub fn clip_gradient_norm(gradient: &mut Gradient, max_norm: f64) {
    let total: f64 = gradient
        .values()
        .map(|g| g.iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = total.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in gradient.values_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::{TaskKind, ViTConfig};
    use crate::model::state::{build_model, set_trainable_last_k, ModelState};
    use approx::assert_abs_diff_eq;
    use indexmap::IndexMap;
    use ndarray::arr0;

    fn tiny_model() -> ModelState {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            depth: 1,
            heads: 2,
            embed_dim: 8,
            mlp_ratio: 2.0,
            num_outputs: 3,
            task_kind: TaskKind::Multiclass,
        };
        build_model(&cfg, 0).unwrap()
    }

    /// A one-scalar model for hand-traced updates.
    fn scalar_model(w: f64) -> ModelState {
        let mut model = tiny_model();
        model.params = IndexMap::new();
        model.trainable = IndexMap::new();
        model.params.insert("w".into(), arr0(w).into_dyn());
        model.trainable.insert("w".into(), true);
        model
    }

    #[test]
    fn zero_gradient_zero_decay_is_identity() {
        let mut model = tiny_model();
        let before = model.clone();
        let mut opt = OptimizerState::new(0.1, 0.0);
        let zeros: Gradient = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), ArrayD::zeros(t.raw_dim())))
            .collect();
        optimizer_step(&mut model, &mut opt, &zeros).unwrap();
        for (name, t) in &model.params {
            let b = &before.params[name];
            assert!(t.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(opt.step_count, 1);
    }

    #[test]
    fn frozen_tensors_never_move() {
        let mut model = tiny_model();
        set_trainable_last_k(&mut model, 0).unwrap();
        let before = model.clone();
        let mut opt = OptimizerState::new(0.5, 0.1);
        let ones: Gradient = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), ArrayD::from_elem(t.raw_dim(), 1.0)))
            .collect();
        for _ in 0..3 {
            optimizer_step(&mut model, &mut opt, &ones).unwrap();
        }
        for (name, t) in &model.params {
            let b = &before.params[name];
            let same = t.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            if name.starts_with("head.") {
                assert!(!same, "{name} should have moved");
            } else {
                assert!(same, "{name} should be frozen");
            }
        }
    }

    #[test]
    fn quadratic_descent_step_matches_hand_trace() {
        // f(w) = w^2 at w = 1: gradient 2. One step with lr 0.1 and the
        // moment updates written out by hand.
        let mut model = scalar_model(1.0);
        let mut opt = OptimizerState::new(0.1, 0.0);
        let mut grad: Gradient = IndexMap::new();
        grad.insert("w".into(), arr0(2.0).into_dyn());
        optimizer_step(&mut model, &mut opt, &grad).unwrap();

        let m = 0.1 * 2.0;
        let v = 0.001 * 4.0;
        let m_hat = m / (1.0 - 0.9);
        let v_hat = v / (1.0 - 0.999);
        let expected = 1.0 - 0.1 * (m_hat / (v_hat.sqrt() + 1e-8));
        let w = model.params["w"].iter().next().copied().unwrap();
        assert_abs_diff_eq!(w, expected, epsilon = 1e-15);
        assert!(w < 1.0, "descent step must decrease w");
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut model = tiny_model();
        let mut opt = OptimizerState::new(0.1, 0.0);
        let mut grads: Gradient = model
            .params
            .iter()
            .map(|(n, t)| (n.clone(), ArrayD::zeros(t.raw_dim())))
            .collect();
        grads.get_mut("blocks.0.mlp.w1").unwrap().fill(f64::NAN);
        let err = optimizer_step(&mut model, &mut opt, &grads).unwrap_err();
        match err {
            Error::Numerical { tensor, .. } => assert_eq!(tensor, "blocks.0.mlp.w1"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn clip_scales_only_above_threshold() {
        let mut grads: Gradient = IndexMap::new();
        grads.insert("a".into(), arr0(3.0).into_dyn());
        grads.insert("b".into(), arr0(4.0).into_dyn());
        let mut clipped = grads.clone();
        clip_gradient_norm(&mut clipped, 10.0);
        assert_eq!(clipped["a"].iter().next().copied().unwrap(), 3.0);
        clip_gradient_norm(&mut clipped, 1.0);
        let a = clipped["a"].iter().next().copied().unwrap();
        let b = clipped["b"].iter().next().copied().unwrap();
        assert_abs_diff_eq!((a * a + b * b).sqrt(), 1.0, epsilon = 1e-12);
    }
}
