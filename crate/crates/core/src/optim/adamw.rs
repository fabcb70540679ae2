use std::collections::BTreeMap;

use crate::autograd::Gradients;
use crate::error::{Error, Result};
use crate::store::ParameterStore;
use crate::tensor::{Scalar, Tensor};
use crate::transfer::FreezeMask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.1,
        }
    }
}

/// Weight decay applies to matrices only: not to norms, biases, embedding
/// tables or the SSM state matrix.
pub fn decays_weight(name: &str, dims: &[usize]) -> bool {
    dims.len() == 2 && !name.starts_with("embed.") && !name.ends_with(".a_log")
}

/// Moments and step count per parameter. A parameter's step count only
/// advances when it is actually updated, so a parameter unfrozen late starts
/// its bias correction from `t = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub config: AdamWConfig,
    m: BTreeMap<String, Tensor<F>>,
    v: BTreeMap<String, Tensor<F>>,
    steps: BTreeMap<String, u64>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(store: &ParameterStore<F>, config: AdamWConfig) -> Self {
        let zeros: BTreeMap<String, Tensor<F>> =
            store.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.dims()))).collect();
        OptimizerState {
            config,
            v: zeros.clone(),
            m: zeros,
            steps: store.names().map(|n| (n.clone(), 0)).collect(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<F>> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<F>> {
        self.v.get(name)
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.steps.get(name).copied().unwrap_or(0)
    }
}

/// Scale unfrozen gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. A non-finite norm leaves the gradients
/// alone so that [`adamw_step`] can name the offending parameter.
pub fn clip_grad_norm<F: Scalar>(grads: &mut Gradients<F>, mask: &FreezeMask, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .filter(|(n, _)| !mask.is_frozen(n))
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = F::lit(max_norm / (norm + 1e-6));
        for (n, g) in grads.iter_mut() {
            if !mask.is_frozen(n) {
                g.data_mut().iter_mut().for_each(|x| *x = *x * s);
            }
        }
    }
    norm
}

/// One bias-corrected AdamW update with decoupled weight decay. Frozen
/// parameters, their moments and step counts are left untouched. Every
/// gradient is validated before any parameter changes.
pub fn adamw_step<F: Scalar>(
    store: &mut ParameterStore<F>,
    grads: &Gradients<F>,
    state: &mut OptimizerState<F>,
    mask: &FreezeMask,
    lr: f64,
) -> Result<()> {
    let active: Vec<String> = store.names().filter(|n| !mask.is_frozen(n)).cloned().collect();
    for name in &active {
        let g = grads.get(name).ok_or_else(|| Error::MissingGradient { name: name.clone() })?;
        if g.dims() != store.get(name).expect("listed").dims() {
            return Err(Error::shape("adamw_step", format!("gradient of {name} has dims {:?}", g.dims())));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    let c = state.config;
    for name in &active {
        let g = grads.get(name).expect("checked");
        let param = store.get_mut(name).expect("listed");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.dims()));
        let t = state.steps.entry(name.clone()).or_insert(0);
        *t += 1;
        let bc1 = 1.0 - c.beta1.powi(*t as i32);
        let bc2 = 1.0 - c.beta2.powi(*t as i32);
        let decay = if decays_weight(name, param.dims()) {
            F::lit(1.0 - lr * c.weight_decay)
        } else {
            F::one()
        };
        let (b1, b2) = (F::lit(c.beta1), F::lit(c.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - c.beta1), F::lit(1.0 - c.beta2));
        let step_size = F::lit(lr / bc1);
        let (inv_sqrt_bc2, eps) = (F::lit(1.0 / bc2.sqrt()), F::lit(c.eps));
        let it = param
            .data_mut()
            .iter_mut()
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
            .zip(g.data());
        for (((p, mi), vi), &gi) in it {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let denom = vi.sqrt() * inv_sqrt_bc2 + eps;
            *p = *p * decay - step_size * *mi / denom;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::transfer::{make_freeze_mask, Component, FreezePolicy, PlanEntry, TransferPlan};

    fn grads_of(pairs: &[(&str, Tensor<f64>)]) -> Gradients<f64> {
        let mut g = Gradients::default();
        for (n, t) in pairs {
            g.insert(*n, t.clone());
        }
        g
    }

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store: ParameterStore<f64> = [("w".to_string(), Tensor::scalar(0.0))].into_iter().collect();
        let mut st = OptimizerState::new(&store, no_decay());
        adamw_step(&mut store, &grads_of(&[("w", Tensor::scalar(1.0))]), &mut st, &FreezeMask::empty(), 0.1).unwrap();
        assert!((store.get("w").unwrap().data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store: ParameterStore<f64> =
            [("a.w".to_string(), Tensor::normal(&[3, 4], 1.0, &mut rng))].into_iter().collect();
        let before = store.clone();
        let mut st = OptimizerState::new(&store, no_decay());
        for _ in 0..5 {
            adamw_step(&mut store, &grads_of(&[("a.w", Tensor::zeros(&[3, 4]))]), &mut st, &FreezeMask::empty(), 0.1)
                .unwrap();
        }
        assert!(store.bit_eq(&before));
    }

    fn frozen_mask(names: &[&str]) -> FreezeMask {
        let plan = TransferPlan {
            entries: names
                .iter()
                .map(|n| PlanEntry {
                    src: n.to_string(),
                    dst: n.to_string(),
                    shape: vec![1],
                    set: Component::Emb,
                })
                .collect(),
        };
        make_freeze_mask(&plan, FreezePolicy::Frozen)
    }

    #[test]
    fn frozen_parameters_and_moments_are_untouched() {
        let mut store: ParameterStore<f64> = [
            ("f".to_string(), Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap()),
            ("u".to_string(), Tensor::from_f64(&[2], &[0.5, -0.5]).unwrap()),
        ]
        .into_iter()
        .collect();
        let mask = frozen_mask(&["f"]);
        let mut st = OptimizerState::new(&store, AdamWConfig::default());
        let g = grads_of(&[("f", Tensor::full(&[2], 3.0)), ("u", Tensor::full(&[2], 3.0))]);
        for _ in 0..100 {
            adamw_step(&mut store, &g, &mut st, &mask, 0.01).unwrap();
        }
        assert_eq!(store.get("f").unwrap().data(), &[0.5, -0.5]);
        assert!(st.first_moment("f").unwrap().data().iter().all(|&x| x.to_bits() == 0));
        assert!(st.second_moment("f").unwrap().data().iter().all(|&x| x.to_bits() == 0));
        assert_eq!(st.step_count("f"), 0);
        assert_eq!(st.step_count("u"), 100);
        assert_ne!(store.get("u").unwrap().data(), &[0.5, -0.5]);
    }

    #[test]
    fn non_finite_gradient_aborts_before_mutation() {
        let mut store: ParameterStore<f64> =
            [("a".to_string(), Tensor::scalar(1.0)), ("b".to_string(), Tensor::scalar(1.0))].into_iter().collect();
        let before = store.clone();
        let mut st = OptimizerState::new(&store, AdamWConfig::default());
        let g = grads_of(&[("a", Tensor::scalar(1.0)), ("b", Tensor::scalar(f64::NAN))]);
        let err = adamw_step(&mut store, &g, &mut st, &FreezeMask::empty(), 0.1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref name } if name == "b"));
        assert!(store.bit_eq(&before));
        assert_eq!(st.step_count("a"), 0);

        let g = grads_of(&[("a", Tensor::scalar(1.0))]);
        assert!(matches!(
            adamw_step(&mut store, &g, &mut st, &FreezeMask::empty(), 0.1),
            Err(Error::MissingGradient { .. })
        ));
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = grads_of(&[("a", Tensor::from_f64(&[2], &[3.0, 4.0]).unwrap()), ("f", Tensor::full(&[1], 100.0))]);
        let mask = frozen_mask(&["f"]);
        let norm = clip_grad_norm(&mut g, &mask, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let a = g.get("a").unwrap().data();
        assert!(((a[0] * a[0] + a[1] * a[1]).sqrt() - 1.0).abs() < 1e-6);
        assert_eq!(g.get("f").unwrap().data(), &[100.0]);
    }

    #[test]
    fn decay_exclusions() {
        assert!(decays_weight("layer.0.mix.wq", &[4, 4]));
        assert!(!decays_weight("embed.in", &[10, 4]));
        assert!(!decays_weight("layer.0.ln1.g", &[4]));
        assert!(!decays_weight("layer.0.ffn.b1", &[16]));
        assert!(!decays_weight("layer.0.mix.a_log", &[8, 4]));
    }

    /// Scalar transcription of the update equations.
    struct Reference {
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    }

    impl Reference {
        fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64, wd: f64) {
            self.t += 1;
            for i in 0..p.len() {
                self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
                self.v[i] = 0.95 * self.v[i] + 0.05 * g[i] * g[i];
                let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
                let vh = self.v[i] / (1.0 - 0.95f64.powi(self.t));
                p[i] -= lr * wd * p[i];
                p[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
    }

    #[test]
    fn matches_reference_over_100_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let init = Tensor::<f64>::normal(&[4, 5], 1.0, &mut rng);
        let mut store: ParameterStore<f64> = [("l.w".to_string(), init.clone())].into_iter().collect();
        let mut st = OptimizerState::new(&store, AdamWConfig::default());
        let mut refp = init.data().to_vec();
        let mut r = Reference {
            m: vec![0.0; 20],
            v: vec![0.0; 20],
            t: 0,
        };
        for _ in 0..100 {
            let g = Tensor::<f64>::normal(&[4, 5], 1.0, &mut rng);
            let lr = rng.random_range(1e-4..1e-2);
            adamw_step(&mut store, &grads_of(&[("l.w", g.clone())]), &mut st, &FreezeMask::empty(), lr).unwrap();
            r.step(&mut refp, g.data(), lr, 0.1);
        }
        for (a, b) in store.get("l.w").unwrap().data().iter().zip(&refp) {
            assert!((a - b).abs() / b.abs().max(1e-12) <= 1e-6, "{a} vs {b}");
        }
    }
}
