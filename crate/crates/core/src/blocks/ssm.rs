//! Selective state-space mixer.
//!
//! `in_proj -> (u, z)`, `u -> causal conv -> SiLU -> selective scan`,
//! gated by `SiLU(z)`, then `out_proj`. The scan uses zero-order-hold
//! discretization with a diagonal, strictly negative `A = -exp(a_log)`:
//!
//! ```text
//! h_t = exp(delta_t A) * h_{t-1} + delta_t B_t u_t
//! y_t = C_t . h_t + D u_t
//! ```

use serde::{Deserialize, Serialize};

use super::{Init, ParamSpec, Scope};
use crate::autograd::ops::{scan_dims, scan_forward};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SsmConfig {
    pub n_state: usize,
    pub conv_width: usize,
    pub expand: usize,
    /// Rank of the step-size projection; `ceil(d / 16)` when absent.
    pub dt_rank: Option<usize>,
    pub dt_min: f64,
    pub dt_max: f64,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            n_state: 16,
            conv_width: 4,
            expand: 2,
            dt_rank: None,
            dt_min: 1e-3,
            dt_max: 1e-1,
        }
    }
}

impl SsmConfig {
    pub fn inner(&self, d: usize) -> usize {
        self.expand * d
    }

    pub fn dt_rank(&self, d: usize) -> usize {
        self.dt_rank.unwrap_or(d.div_ceil(16))
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_state == 0 || self.conv_width == 0 || self.expand == 0 || self.dt_rank == Some(0) {
            return Err(Error::Config(
                "ssm n_state, conv_width, expand and dt_rank must be positive".into(),
            ));
        }
        if !(self.dt_min > 0.0 && self.dt_min <= self.dt_max) {
            return Err(Error::Config(format!(
                "ssm step range [{}, {}] is empty or non-positive",
                self.dt_min, self.dt_max
            )));
        }
        Ok(())
    }

    pub fn param_specs(&self, d: usize) -> Vec<ParamSpec> {
        let (e, n, r, w) = (self.inner(d), self.n_state, self.dt_rank(d), self.conv_width);
        vec![
            ParamSpec::new("a_log", &[e, n], Init::StateLog),
            ParamSpec::new("conv_b", &[e], Init::Zeros),
            ParamSpec::new("conv_w", &[e, w], Init::Uniform(1.0 / (w as f64).sqrt())),
            ParamSpec::new("d_skip", &[e], Init::Ones),
            ParamSpec::new(
                "dt_bias",
                &[e],
                Init::DtBias {
                    lo: self.dt_min,
                    hi: self.dt_max,
                },
            ),
            ParamSpec::new("dt_proj", &[r, e], Init::Uniform(1.0 / (r as f64).sqrt())),
            ParamSpec::new("in_proj", &[d, 2 * e], Init::Normal),
            ParamSpec::new("out_proj", &[e, d], Init::ResidualOut),
            ParamSpec::new("x_proj", &[e, r + 2 * n], Init::Normal),
        ]
    }
}

/// Inputs of a selective scan: `u, delta: [B,T,E]`, `a: [E,N]` (already
/// negative), `b, c: [B,T,N]`, `d: [E]`.
#[derive(Clone, Debug)]
pub struct ScanInputs<F> {
    pub u: Tensor<F>,
    pub delta: Tensor<F>,
    pub a: Tensor<F>,
    pub b: Tensor<F>,
    pub c: Tensor<F>,
    pub d: Tensor<F>,
}

/// Reference scan, one step at a time.
pub fn ssm_scan_sequential<F: Scalar>(s: &ScanInputs<F>) -> Result<Tensor<F>> {
    let (y, _) = scan_forward(&s.u, &s.delta, &s.a, &s.b, &s.c, &s.d, false)?;
    Tensor::from_vec(s.u.dims(), y)
}

/// Chunked scan: each chunk is scanned from a zero state, then the state
/// carried in from previous chunks is added back through the cumulative
/// decay `prod exp(delta A)` within the chunk.
pub fn ssm_scan_chunked<F: Scalar>(s: &ScanInputs<F>, chunk: usize) -> Result<Tensor<F>> {
    if chunk == 0 {
        return Err(Error::Config("scan chunk size must be positive".into()));
    }
    scan_dims(&s.u, &s.delta, &s.a, &s.b, &s.c, &s.d)?;
    let (bsz, t, e) = (s.u.dims()[0], s.u.dims()[1], s.u.dims()[2]);
    let n = s.a.dims()[1];
    let (ud, dd, ad, bd, cd, skip) = (s.u.data(), s.delta.data(), s.a.data(), s.b.data(), s.c.data(), s.d.data());

    let mut y = vec![F::zero(); bsz * t * e];
    let mut carry = vec![F::zero(); e * n];
    let mut local = vec![F::zero(); e * n];
    let mut decay = vec![F::zero(); e * n];
    for bi in 0..bsz {
        carry.fill(F::zero());
        for start in (0..t).step_by(chunk) {
            let end = (start + chunk).min(t);
            local.fill(F::zero());
            decay.fill(F::one());
            for ti in start..end {
                let row = bi * t + ti;
                let bv = &bd[row * n..(row + 1) * n];
                let cv = &cd[row * n..(row + 1) * n];
                for ei in 0..e {
                    let dt = dd[row * e + ei];
                    let x = ud[row * e + ei];
                    let mut acc = F::zero();
                    for j in 0..n {
                        let k = ei * n + j;
                        let da = (dt * ad[k]).exp();
                        local[k] = da * local[k] + dt * bv[j] * x;
                        decay[k] = decay[k] * da;
                        acc = acc + cv[j] * (local[k] + decay[k] * carry[k]);
                    }
                    y[row * e + ei] = acc + skip[ei] * x;
                }
            }
            for k in 0..e * n {
                carry[k] = local[k] + decay[k] * carry[k];
            }
        }
    }
    Tensor::from_vec(s.u.dims(), y)
}

/// `x: [B, T, d] -> [B, T, d]`.
pub fn ssm_block_forward<F: Scalar>(g: &mut Graph<F>, x: Var, p: Scope<'_>, cfg: &SsmConfig) -> Result<Var> {
    if g.dims(x).len() != 3 {
        return Err(Error::shape("ssm_block_forward", format!("input {:?} is not [B,T,d]", g.dims(x))));
    }
    cfg.validate()?;
    let d = g.dims(x)[2];
    let (e, n, r) = (cfg.inner(d), cfg.n_state, cfg.dt_rank(d));

    let xz = g.matmul(x, p.get("in_proj")?, false)?;
    if g.dims(xz)[2] != 2 * e {
        return Err(Error::shape("ssm_block_forward", format!("in_proj output {:?}, expected width {}", g.dims(xz), 2 * e)));
    }
    let u = g.slice_last(xz, 0, e)?;
    let z = g.slice_last(xz, e, e)?;
    let u = g.causal_conv(u, p.get("conv_w")?, p.get("conv_b")?)?;
    let u = g.silu(u)?;

    let proj = g.matmul(u, p.get("x_proj")?, false)?;
    let dt_low = g.slice_last(proj, 0, r)?;
    let bm = g.slice_last(proj, r, n)?;
    let cm = g.slice_last(proj, r + n, n)?;
    let dt = g.matmul(dt_low, p.get("dt_proj")?, false)?;
    let dt = g.add_bias(dt, p.get("dt_bias")?)?;
    let delta = g.softplus(dt)?;
    let a = g.neg_exp(p.get("a_log")?)?;

    let y = g.selective_scan(u, delta, a, bm, cm, p.get("d_skip")?)?;
    let gate = g.silu(z)?;
    let y = g.mul(y, gate)?;
    g.matmul(y, p.get("out_proj")?, false)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::store::ParameterStore;

    fn random_inputs(seed: u64, b: usize, t: usize, e: usize, n: usize) -> ScanInputs<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScanInputs {
            u: Tensor::uniform(&[b, t, e], -1.0, 1.0, &mut rng),
            delta: Tensor::uniform(&[b, t, e], 0.05, 1.0, &mut rng),
            a: Tensor::uniform(&[e, n], -2.0, -0.1, &mut rng),
            b: Tensor::uniform(&[b, t, n], -1.0, 1.0, &mut rng),
            c: Tensor::uniform(&[b, t, n], -1.0, 1.0, &mut rng),
            d: Tensor::uniform(&[e], -1.0, 1.0, &mut rng),
        }
    }

    fn scalar(a: f64, u: &[f64]) -> ScanInputs<f64> {
        let t = u.len();
        ScanInputs {
            u: Tensor::from_f64(&[1, t, 1], u).unwrap(),
            delta: Tensor::full(&[1, t, 1], 1.0),
            a: Tensor::from_f64(&[1, 1], &[a]).unwrap(),
            b: Tensor::full(&[1, t, 1], 1.0),
            c: Tensor::full(&[1, t, 1], 1.0),
            d: Tensor::zeros(&[1]),
        }
    }

    #[test]
    fn scalar_hand_recurrence() {
        let s = scalar(0.5f64.ln(), &[1.0, 1.0]);
        let y = ssm_scan_sequential(&s).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-15);
        assert!((y.data()[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn infinite_decay_is_memoryless() {
        let mut s = scalar(-1e30, &[0.3, -0.7, 2.0]);
        s.d = Tensor::from_f64(&[1], &[0.25]).unwrap();
        s.delta = Tensor::from_f64(&[1, 3, 1], &[0.5, 1.5, 2.0]).unwrap();
        let y = ssm_scan_sequential(&s).unwrap();
        for ti in 0..3 {
            let (u, dt) = (s.u.data()[ti], s.delta.data()[ti]);
            assert!((y.data()[ti] - (dt * u + 0.25 * u)).abs() < 1e-15);
        }
    }

    #[test]
    fn chunked_matches_sequential() {
        let s = random_inputs(1, 2, 19, 3, 4);
        let seq = ssm_scan_sequential(&s).unwrap();
        for chunk in [1, 2, 4, 8] {
            let ch = ssm_scan_chunked(&s, chunk).unwrap();
            assert!(seq.max_abs_diff(&ch) < 1e-10, "chunk {chunk}");
        }
        let s32 = ScanInputs {
            u: s.u.cast::<f32>(),
            delta: s.delta.cast(),
            a: s.a.cast(),
            b: s.b.cast(),
            c: s.c.cast(),
            d: s.d.cast(),
        };
        let seq = ssm_scan_sequential(&s32).unwrap();
        for chunk in [1, 2, 4, 8] {
            assert!(seq.max_abs_diff(&ssm_scan_chunked(&s32, chunk).unwrap()) < 1e-4);
        }
    }

    #[test]
    fn non_positive_delta_is_rejected() {
        let mut s = scalar(-1.0, &[1.0, 1.0]);
        s.delta = Tensor::from_f64(&[1, 2, 1], &[1.0, 0.0]).unwrap();
        assert!(matches!(ssm_scan_sequential(&s), Err(Error::NonPositiveDelta { index: 1 })));
        assert!(matches!(ssm_scan_chunked(&s, 2), Err(Error::NonPositiveDelta { index: 1 })));
        assert!(ssm_scan_chunked(&scalar(-1.0, &[1.0]), 0).is_err());
    }

    fn block_params(d: usize, cfg: &SsmConfig, seed: u64) -> ParameterStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.param_specs(d)
            .into_iter()
            .map(|s| {
                let t = match s.suffix {
                    "a_log" => Tensor::uniform(&s.dims, -1.0, 1.0, &mut rng),
                    "dt_bias" => Tensor::uniform(&s.dims, -3.0, 0.0, &mut rng),
                    _ => Tensor::normal(&s.dims, 0.5, &mut rng),
                };
                (format!("mix.{}", s.suffix), t)
            })
            .collect()
    }

    fn run<F: Scalar>(store: &ParameterStore<F>, x: &Tensor<F>, cfg: &SsmConfig) -> Tensor<F> {
        let mut g = Graph::new();
        let vars = g.load_params(store, false);
        let xv = g.constant(x.clone());
        let y = ssm_block_forward(&mut g, xv, Scope::new(&vars, "mix"), cfg).unwrap();
        g.value(y).clone()
    }

    fn sigmoid(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    fn matvec(x: &[f64], w: &Tensor<f64>) -> Vec<f64> {
        let (k, n) = (w.dims()[0], w.dims()[1]);
        (0..n).map(|j| (0..k).map(|i| x[i] * w.data()[i * n + j]).sum()).collect()
    }

    /// Token-by-token evaluation keeping an explicit conv window and state.
    fn oracle(store: &ParameterStore<f64>, x: &Tensor<f64>, cfg: &SsmConfig) -> Vec<f64> {
        let w = |n: &str| store.get(&format!("mix.{n}")).unwrap();
        let (b, t, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
        let (e, n, r, width) = (cfg.inner(d), cfg.n_state, cfg.dt_rank(d), cfg.conv_width);
        let mut out = Vec::new();
        for bi in 0..b {
            let mut window: Vec<Vec<f64>> = vec![vec![0.0; e]; width];
            let mut h = vec![vec![0.0; n]; e];
            for ti in 0..t {
                let xz = matvec(&x.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d], w("in_proj"));
                window.remove(0);
                window.push(xz[..e].to_vec());
                let u: Vec<f64> = (0..e)
                    .map(|c| {
                        let s = w("conv_b").data()[c]
                            + (0..width).map(|j| w("conv_w").data()[c * width + j] * window[j][c]).sum::<f64>();
                        s * sigmoid(s)
                    })
                    .collect();
                let proj = matvec(&u, w("x_proj"));
                let dt = matvec(&proj[..r], w("dt_proj"));
                let (bv, cv) = (&proj[r..r + n], &proj[r + n..]);
                let mut gated = vec![0.0; e];
                for c in 0..e {
                    let delta = (1.0 + (dt[c] + w("dt_bias").data()[c]).exp()).ln();
                    let mut y = w("d_skip").data()[c] * u[c];
                    for j in 0..n {
                        let a = -w("a_log").data()[c * n + j].exp();
                        h[c][j] = (delta * a).exp() * h[c][j] + delta * bv[j] * u[c];
                        y += cv[j] * h[c][j];
                    }
                    let z = xz[e + c];
                    gated[c] = y * z * sigmoid(z);
                }
                out.extend(matvec(&gated, w("out_proj")));
            }
        }
        out
    }

    #[test]
    fn block_matches_step_oracle() {
        let cfg = SsmConfig {
            n_state: 4,
            ..SsmConfig::default()
        };
        let store = block_params(8, &cfg, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::uniform(&[2, 8, 8], -1.0, 1.0, &mut rng);
        let y = run(&store, &x, &cfg);
        let expect = oracle(&store, &x, &cfg);
        assert_eq!(y.numel(), expect.len());
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let cfg = SsmConfig::default();
        let mut store = block_params(8, &cfg, 5);
        *store.get_mut("mix.conv_b").unwrap() = Tensor::zeros(&[16]);
        let y = run(&store, &Tensor::zeros(&[1, 6, 8]), &cfg);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn causal_under_perturbation() {
        let cfg = SsmConfig::default();
        let store = block_params(8, &cfg, 6).cast::<f32>();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::<f32>::uniform(&[1, 10, 8], -1.0, 1.0, &mut rng);
        let mut x2 = x.clone();
        for j in 0..8 {
            x2.data_mut()[5 * 8 + j] -= 0.5;
        }
        let (a, b) = (run(&store, &x, &cfg), run(&store, &x2, &cfg));
        assert!(a.data()[..40].iter().zip(&b.data()[..40]).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert_ne!(a.data()[40..48], b.data()[40..48]);
    }

    #[test]
    fn default_dt_rank() {
        let cfg = SsmConfig::default();
        assert_eq!(cfg.dt_rank(8), 1);
        assert_eq!(cfg.dt_rank(128), 8);
        assert_eq!(cfg.dt_rank(130), 9);
    }
}
