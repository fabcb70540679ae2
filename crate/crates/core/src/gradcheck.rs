//! Central finite-difference oracle for reverse-mode gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamVars, Var};
use crate::error::{Error, Result};
use crate::store::ParameterStore;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    /// Probe offset; must lie in `[1e-6, 1e-3]`.
    pub eps: f64,
    /// Coordinates sampled per tensor (all of them when the tensor is smaller).
    pub samples_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-6,
            samples_per_tensor: 20,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    /// `max |g_ad - g_fd| / max(1, |g_fd|)` over all probed coordinates.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Compares the autodiff gradient of the scalar built by `f` against central
/// differences `(f(p + eps) - f(p - eps)) / 2 eps` on sampled coordinates of
/// every tensor in `params`. Raw gradients are compared; freezing is an
/// optimizer concern and does not apply here.
pub fn grad_check<Fun>(f: Fun, params: &ParameterStore<f64>, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    Fun: Fn(&mut Graph<f64>, &ParamVars) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&cfg.eps) {
        return Err(Error::Config(format!("grad_check eps {} outside [1e-6, 1e-3]", cfg.eps)));
    }
    let mut graph = Graph::new();
    let vars = graph.load_params(params, true);
    let loss = f(&mut graph, &vars)?;
    let grads = graph.backward(loss)?;

    let eval = |probe: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let vars = g.load_params(probe, false);
        let out = f(&mut g, &vars)?;
        let v = g.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite { op: "grad_check" })
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport::default();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let numel = params.require(&name)?.numel();
        let indices: Vec<usize> = if numel <= cfg.samples_per_tensor {
            (0..numel).collect()
        } else {
            let mut v = sample(&mut rng, numel, cfg.samples_per_tensor).into_vec();
            v.sort_unstable();
            v
        };
        for idx in indices {
            let orig = params.require(&name)?.data()[idx];
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig + cfg.eps;
            let plus = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig - cfg.eps;
            let minus = eval(&probe)?;
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig;

            let g_fd = (plus - minus) / (2.0 * cfg.eps);
            let g_ad = grads.get(&name).map_or(0.0, |g| g.data()[idx]);
            let err = (g_ad - g_fd).abs() / g_fd.abs().max(1.0);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((name.clone(), idx));
            }
        }
    }
    Ok(report)
}
