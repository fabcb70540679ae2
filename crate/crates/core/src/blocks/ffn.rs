use super::{Init, ParamSpec, Scope};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Position-wise `w2 . GELU(w1 . x + b1) + b2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FfnParams {
    pub d_ff: usize,
}

impl FfnParams {
    pub fn param_specs(&self, d: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("b1", &[self.d_ff], Init::Zeros),
            ParamSpec::new("b2", &[d], Init::Zeros),
            ParamSpec::new("w1", &[d, self.d_ff], Init::Normal),
            ParamSpec::new("w2", &[self.d_ff, d], Init::ResidualOut),
        ]
    }
}

pub fn ffn_forward<F: Scalar>(g: &mut Graph<F>, x: Var, p: Scope<'_>) -> Result<Var> {
    if g.dims(x).len() < 2 {
        return Err(Error::shape("ffn_forward", format!("input {:?} has no feature axis", g.dims(x))));
    }
    let h = g.matmul(x, p.get("w1")?, false)?;
    let h = g.add_bias(h, p.get("b1")?)?;
    let h = g.gelu(h)?;
    let y = g.matmul(h, p.get("w2")?, false)?;
    g.add_bias(y, p.get("b2")?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::store::ParameterStore;
    use crate::tensor::Tensor;

    fn params(d: usize, d_ff: usize, seed: u64) -> ParameterStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FfnParams { d_ff }
            .param_specs(d)
            .into_iter()
            .map(|s| (format!("ffn.{}", s.suffix), Tensor::normal(&s.dims, 0.5, &mut rng)))
            .collect()
    }

    fn run(store: &ParameterStore<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let vars = g.load_params(store, false);
        let xv = g.constant(x.clone());
        let y = ffn_forward(&mut g, xv, Scope::new(&vars, "ffn")).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_in_zero_out() {
        let mut store = params(4, 16, 1);
        *store.get_mut("ffn.b1").unwrap() = Tensor::zeros(&[16]);
        *store.get_mut("ffn.b2").unwrap() = Tensor::zeros(&[4]);
        let y = run(&store, &Tensor::zeros(&[2, 3, 4]));
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_oracle() {
        let store = params(4, 16, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::uniform(&[1, 5, 4], -2.0, 2.0, &mut rng);
        let y = run(&store, &x);
        let w = |n: &str| store.get(&format!("ffn.{n}")).unwrap().data().to_vec();
        let (w1, b1, w2, b2) = (w("w1"), w("b1"), w("w2"), w("b2"));
        for t in 0..5 {
            let xr = &x.data()[t * 4..(t + 1) * 4];
            let hidden: Vec<f64> = (0..16)
                .map(|j| {
                    let a = b1[j] + (0..4).map(|i| xr[i] * w1[i * 16 + j]).sum::<f64>();
                    0.5 * a * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (a + 0.044715 * a.powi(3))).tanh())
                })
                .collect();
            for o in 0..4 {
                let expect = b2[o] + (0..16).map(|j| hidden[j] * w2[j * 4 + o]).sum::<f64>();
                assert!((y.data()[t * 4 + o] - expect).abs() < 1e-6);
            }
        }
    }

    proptest! {
        #[test]
        fn commutes_with_position_permutation(seed in 0u64..1000, perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle()) {
            let store = params(4, 8, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Tensor::uniform(&[1, 6, 4], -1.0, 1.0, &mut rng);
            let mut xp = Tensor::zeros(&[1, 6, 4]);
            for (dst, &src) in perm.iter().enumerate() {
                xp.data_mut()[dst * 4..(dst + 1) * 4].copy_from_slice(&x.data()[src * 4..(src + 1) * 4]);
            }
            let (y, yp) = (run(&store, &x), run(&store, &xp));
            for (dst, &src) in perm.iter().enumerate() {
                prop_assert_eq!(&yp.data()[dst * 4..(dst + 1) * 4], &y.data()[src * 4..(src + 1) * 4]);
            }
        }
    }
}
