//! Self-checks behind `xatl verify`: cross-mode equivalence, gradient
//! fidelity, transfer soundness, LIT determinism and checkpoint round trips.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::Graph;
use crate::blocks::{
    retention_parallel, retention_recurrent, ssm_scan_chunked, ssm_scan_sequential, RetentionParams, RetentionState,
    ScanInputs, Scope,
};
use crate::checkpoint::{decode, diff_stores, encode, CheckpointMeta, RawCheckpoint, TensorData};
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::model::{build_model, forward, make_hybrid, MixerKind, ModelConfig};
use crate::optim::{LitConfig, LitEvent, LitState};
use crate::store::ParameterStore;
use crate::tensor::{DType, Scalar, Tensor};
use crate::transfer::{apply_transfer, build_transfer_plan, ComponentSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Equivalence,
    Gradients,
    Transfer,
    Lit,
    Io,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Suite::Equivalence, Suite::Gradients, Suite::Transfer, Suite::Lit, Suite::Io];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Equivalence => "equivalence",
            Suite::Gradients => "gradients",
            Suite::Transfer => "transfer",
            Suite::Lit => "lit",
            Suite::Io => "io",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Parses a suite name; `all` expands to every suite.
pub fn parse_suites(s: &str) -> Result<Vec<Suite>> {
    if s == "all" {
        return Ok(Suite::ALL.to_vec());
    }
    Suite::from_str(s).map(|x| vec![x])
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}; expected equivalence, gradients, transfer, lit, io or all")))
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Relative perturbation applied to retention decays in recurrent mode
    /// only. Zero for real checks; nonzero values exist to prove that the
    /// equivalence check can fail.
    pub decay_perturbation: f64,
    pub cases: usize,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            decay_perturbation: 0.0,
            cases: 100,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyResult {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub properties: Vec<PropertyResult>,
    pub seconds: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }
}

fn prop(suite: Suite, name: &str, passed: bool, detail: String) -> PropertyResult {
    PropertyResult {
        suite,
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Run `suites`. Errors inside a property count as failures, not as an
/// error of the whole run.
pub fn run_suites(suites: &[Suite], opts: &VerifyOptions) -> VerifyReport {
    let start = Instant::now();
    let mut report = VerifyReport::default();
    for &s in suites {
        let out = match s {
            Suite::Equivalence => equivalence(opts),
            Suite::Gradients => gradients(opts),
            Suite::Transfer => transfer(opts),
            Suite::Lit => lit(),
            Suite::Io => io(opts),
        };
        match out {
            Ok(props) => report.properties.extend(props),
            Err(e) => report.properties.push(prop(s, "suite", false, e.to_string())),
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    report
}

/// Random retention block parameters under the prefix `mix`.
pub fn random_retention_store<F: Scalar>(d: usize, rng: &mut ChaCha8Rng) -> ParameterStore<F> {
    let std = 1.0 / (d as f64).sqrt();
    RetentionParams::param_specs(d)
        .into_iter()
        .map(|s| {
            let t = if s.suffix == "gn_scale" {
                Tensor::uniform(&s.dims, 0.5, 1.5, rng)
            } else {
                Tensor::normal(&s.dims, std, rng)
            };
            (format!("mix.{}", s.suffix), t)
        })
        .collect()
}

/// Max-abs gap between the parallel block output and the same block run
/// token by token through the recurrent form.
pub fn retention_mode_gap<F: Scalar>(
    store: &ParameterStore<F>,
    x: &Tensor<F>,
    hp: &RetentionParams,
    recurrent_hp: &RetentionParams,
) -> Result<f64> {
    let (b, t, d) = (x.dims()[0], x.dims()[1], x.dims()[2]);
    let mut g = Graph::new();
    let vars = g.load_params(store, false);
    let xv = g.constant(x.clone());
    let y = retention_parallel(&mut g, xv, Scope::new(&vars, "mix"), hp)?;
    let par = g.value(y);
    let mut state = RetentionState::zeros(b, recurrent_hp);
    let mut gap = 0.0f64;
    for ti in 0..t {
        let mut row = Vec::with_capacity(b * d);
        for bi in 0..b {
            row.extend_from_slice(&x.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d]);
        }
        let out = retention_recurrent(&Tensor::from_vec(&[b, d], row)?, &mut state, store, "mix", recurrent_hp)?;
        for bi in 0..b {
            for j in 0..d {
                let p = par.data()[(bi * t + ti) * d + j].as_f64();
                gap = gap.max((p - out.data()[bi * d + j].as_f64()).abs());
            }
        }
    }
    Ok(gap)
}

/// Random case shape: `B <= 4`, `T <= 64`, `d <= 64`.
fn random_case(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    let b = rng.random_range(1..=4);
    let t = rng.random_range(1..=64);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    let head_size = [2, 4, 8, 16][rng.random_range(0..4)];
    (b, t, heads * head_size, head_size)
}

fn random_scan(rng: &mut ChaCha8Rng) -> ScanInputs<f64> {
    let (b, t, e) = (rng.random_range(1..=4), rng.random_range(1..=64), rng.random_range(1..=64));
    let n = rng.random_range(1..=16);
    ScanInputs {
        u: Tensor::uniform(&[b, t, e], -1.0, 1.0, rng),
        delta: Tensor::uniform(&[b, t, e], 1e-3, 0.5, rng),
        a: Tensor::uniform(&[e, n], -4.0, -0.05, rng),
        b: Tensor::uniform(&[b, t, n], -1.0, 1.0, rng),
        c: Tensor::uniform(&[b, t, n], -1.0, 1.0, rng),
        d: Tensor::uniform(&[e], -1.0, 1.0, rng),
    }
}

fn cast_scan<F: Scalar>(s: &ScanInputs<f64>) -> ScanInputs<F> {
    ScanInputs {
        u: s.u.cast(),
        delta: s.delta.cast(),
        a: s.a.cast(),
        b: s.b.cast(),
        c: s.c.cast(),
        d: s.d.cast(),
    }
}

fn equivalence(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut gap32, mut gap64) = (0.0f64, 0.0f64);
    for _ in 0..opts.cases {
        let (b, t, d, head_size) = random_case(&mut rng);
        let hp = RetentionParams::new(d, head_size, true, 1e-5)?;
        let mut rec = hp.clone();
        for g in rec.decays.iter_mut() {
            *g *= 1.0 - opts.decay_perturbation;
        }
        let store64 = random_retention_store::<f64>(d, &mut rng);
        let x = Tensor::<f64>::uniform(&[b, t, d], -1.0, 1.0, &mut rng);
        gap64 = gap64.max(retention_mode_gap(&store64, &x, &hp, &rec)?);
        gap32 = gap32.max(retention_mode_gap(&store64.cast::<f32>(), &x.cast(), &hp, &rec)?);
    }
    let mut out = vec![
        prop(Suite::Equivalence, "retention_modes_f32", gap32 <= 1e-4, format!("max abs gap {gap32:.3e} (limit 1e-4)")),
        prop(Suite::Equivalence, "retention_modes_f64", gap64 <= 1e-10, format!("max abs gap {gap64:.3e} (limit 1e-10)")),
    ];
    let (mut s32, mut s64) = (0.0f64, 0.0f64);
    for _ in 0..opts.cases {
        let s = random_scan(&mut rng);
        let (seq64, seq32) = (ssm_scan_sequential(&s)?, ssm_scan_sequential(&cast_scan::<f32>(&s))?);
        for chunk in [1, 2, 4, 8] {
            s64 = s64.max(seq64.max_abs_diff(&ssm_scan_chunked(&s, chunk)?));
            s32 = s32.max(seq32.max_abs_diff(&ssm_scan_chunked(&cast_scan::<f32>(&s), chunk)?));
        }
    }
    out.push(prop(Suite::Equivalence, "scan_chunks_f32", s32 <= 1e-4, format!("max abs gap {s32:.3e} (limit 1e-4)")));
    out.push(prop(Suite::Equivalence, "scan_chunks_f64", s64 <= 1e-10, format!("max abs gap {s64:.3e} (limit 1e-10)")));
    Ok(out)
}

/// Two-layer `d = 16` model of a single mixer kind with small vocabulary,
/// used for full-model gradient checks.
pub fn gradcheck_model(kind: MixerKind) -> ModelConfig {
    let mut c = ModelConfig::preset("toy-mha").expect("preset");
    c.vocab_size = 13;
    c.d_model = 16;
    c.d_ff = 32;
    c.n_layers = 2;
    c.mixer_kinds = vec![kind; 2];
    c.n_heads = 2;
    c.retention_head_size = 8;
    c.ssm.n_state = 4;
    c.max_seq_len = 16;
    c
}

/// Parameters of `config` with extra noise so that gradients are far from
/// zero and every code path is exercised.
pub fn noisy_params(config: &ModelConfig, seed: u64) -> Result<ParameterStore<f64>> {
    let mut store = build_model::<f64>(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for (_, t) in store.iter_mut() {
        let noise = Tensor::<f64>::normal(t.dims(), 0.3, &mut rng);
        for (v, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
    Ok(store)
}

/// Relative gradient error of the full model of `config` under a random
/// next-token loss.
pub fn model_gradient_error(config: &ModelConfig, seed: u64, samples: usize) -> Result<f64> {
    let store = noisy_params(config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, t) = (2, 6);
    let inputs: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..config.vocab_size)).collect();
    let targets: Vec<usize> = (0..b * t).map(|_| rng.random_range(0..config.vocab_size)).collect();
    let f = |g: &mut Graph<f64>, vars: &crate::autograd::ParamVars| {
        let y = forward(g, vars, config, &inputs, b, t)?;
        g.cross_entropy(y, &targets, None)
    };
    let cfg = GradCheckConfig {
        samples_per_tensor: samples,
        seed,
        ..GradCheckConfig::default()
    };
    Ok(grad_check(f, &store, &cfg)?.max_rel_error)
}

fn gradients(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let mut out = Vec::new();
    for kind in [MixerKind::Mha, MixerKind::Retention, MixerKind::Ssm] {
        let err = model_gradient_error(&gradcheck_model(kind), opts.seed, 20)?;
        out.push(prop(
            Suite::Gradients,
            &format!("model_{}", kind.name()),
            err <= 1e-5,
            format!("max rel error {err:.3e} (limit 1e-5)"),
        ));
    }
    Ok(out)
}

/// Small donor/student pair used by the transfer suite.
fn transfer_configs() -> Result<(ModelConfig, Vec<ModelConfig>)> {
    let mut donor = gradcheck_model(MixerKind::Mha);
    donor.n_layers = 4;
    donor.mixer_kinds = vec![MixerKind::Mha; 4];
    let mut ret = donor.clone();
    ret.mixer_kinds = vec![MixerKind::Retention; 4];
    let mut ssm = donor.clone();
    ssm.mixer_kinds = vec![MixerKind::Ssm; 4];
    let hyb = make_hybrid(&ret)?;
    Ok((donor, vec![ret, ssm, hyb]))
}

/// Checks transfer soundness for one (donor, student, sets) triple:
/// returns `(plan entries copied exactly, non-entries untouched)`.
pub fn transfer_sound(
    donor_cfg: &ModelConfig,
    student_cfg: &ModelConfig,
    sets: &ComponentSet,
    seed: u64,
) -> Result<(bool, bool, usize)> {
    let donor = build_model::<f32>(donor_cfg, seed)?;
    let init = build_model::<f32>(student_cfg, seed + 1)?;
    let plan = build_transfer_plan(donor_cfg, student_cfg, sets)?;
    let mut student = init.clone();
    apply_transfer(&donor, &mut student, &plan)?;
    let vs_donor = diff_stores(&donor, &student);
    let vs_init = diff_stores(&init, &student);
    let entries: Vec<&str> = plan.dst_names().collect();
    let copied = entries.iter().all(|n| vs_donor.identical.iter().any(|x| x == n));
    let changed_only_entries = vs_init.changed_names().all(|n| entries.contains(&n)) && vs_init.only_a.is_empty() && vs_init.only_b.is_empty();
    Ok((copied, changed_only_entries, plan.len()))
}

fn transfer(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let (donor, students) = transfer_configs()?;
    let mut out = Vec::new();
    for sets in ComponentSet::ablation_grid() {
        for student in &students {
            let kinds: Vec<&str> = student.mixer_kinds.iter().map(|k| k.name()).collect();
            let label = format!("{sets} -> {}", kinds.join("/"));
            match transfer_sound(&donor, student, &sets, opts.seed) {
                Ok((copied, untouched, n)) => out.push(prop(
                    Suite::Transfer,
                    &label,
                    copied && untouched,
                    format!("{n} entries; entries exact: {copied}; others untouched: {untouched}"),
                )),
                // Combinations the destination cannot hold must be refused.
                Err(e @ (Error::MissingParameter { .. } | Error::Config(_))) => {
                    out.push(prop(Suite::Transfer, &label, true, format!("refused: {e}")))
                }
                Err(e) => out.push(prop(Suite::Transfer, &label, false, e.to_string())),
            }
        }
    }
    Ok(out)
}

fn lit() -> Result<Vec<PropertyResult>> {
    let run = |trace: &[f64]| -> Result<Vec<usize>> {
        let mut s = LitState::new(LitConfig::default());
        let mut fired = Vec::new();
        for (i, &l) in trace.iter().enumerate() {
            if s.observe(l)? == LitEvent::Unfreeze {
                fired.push(i + 1);
            }
        }
        Ok(fired)
    };
    let a = run(&[4.0, 3.5, 3.47, 3.45])?;
    let b = run(&[4.0, 3.47, 3.5, 3.45])?;
    let again = run(&[4.0, 3.5, 3.47, 3.45])?;
    Ok(vec![
        prop(Suite::Lit, "fires_after_fourth_interval", a == [4], format!("unfreeze at intervals {a:?}")),
        prop(Suite::Lit, "separated_breaches_do_not_fire", b.is_empty(), format!("unfreeze at intervals {b:?}")),
        prop(Suite::Lit, "deterministic", a == again, format!("{a:?} vs {again:?}")),
    ])
}

/// A random store with random names, ranks 1..=4, both dtypes and arbitrary
/// bit patterns (including NaN payloads and infinities).
pub fn random_raw_checkpoint(rng: &mut ChaCha8Rng) -> RawCheckpoint {
    let n = rng.random_range(0..12);
    let mut tensors = BTreeMap::new();
    while tensors.len() < n {
        let len = rng.random_range(1..16);
        let name: String = (0..len).map(|_| ['a', 'b', '.', '0', '7', 'z', '_', 'é'][rng.random_range(0..8)]).collect();
        let rank = rng.random_range(1..=4);
        let dims: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=5)).collect();
        let numel: usize = dims.iter().product();
        let t = if rng.random_bool(0.5) {
            TensorData::F32(Tensor::from_vec(&dims, (0..numel).map(|_| f32::from_bits(rng.random())).collect()).expect("dims"))
        } else {
            TensorData::F64(Tensor::from_vec(&dims, (0..numel).map(|_| f64::from_bits(rng.random())).collect()).expect("dims"))
        };
        tensors.insert(name, t);
    }
    let dtype = if rng.random_bool(0.5) { DType::Float32 } else { DType::Float64 };
    RawCheckpoint {
        meta: CheckpointMeta::new(None, rng.random_range(0..10_000), rng.random(), dtype),
        tensors,
    }
}

fn io(opts: &VerifyOptions) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let mut failures = Vec::new();
    for i in 0..50 {
        let raw = random_raw_checkpoint(&mut rng);
        let path = dir.path().join(format!("{i}.xatl"));
        crate::checkpoint::save_raw(&raw, &path)?;
        let first = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let back = crate::checkpoint::load_raw(&path)?;
        let same = back.tensors.len() == raw.tensors.len()
            && back.tensors.iter().zip(&raw.tensors).all(|((na, a), (nb, b))| na == nb && a.bit_eq(b));
        let second = encode(&decode(&first)?)?;
        if !same || first != second {
            failures.push(i);
        }
    }
    Ok(vec![prop(
        Suite::Io,
        "round_trip_50_random_stores",
        failures.is_empty(),
        format!("failing cases {failures:?}"),
    )])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_parsing() {
        assert_eq!(parse_suites("all").unwrap().len(), 5);
        assert_eq!(parse_suites("io").unwrap(), vec![Suite::Io]);
        assert!(parse_suites("speed").is_err());
    }

    #[test]
    fn lit_and_io_pass() {
        let r = run_suites(&[Suite::Lit, Suite::Io], &VerifyOptions::default());
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn perturbed_decay_fails_equivalence() {
        let opts = VerifyOptions {
            decay_perturbation: 1e-3,
            cases: 5,
            ..VerifyOptions::default()
        };
        let r = run_suites(&[Suite::Equivalence], &opts);
        assert!(!r.passed());
        let clean = VerifyOptions {
            cases: 5,
            ..VerifyOptions::default()
        };
        assert!(run_suites(&[Suite::Equivalence], &clean).passed());
    }
}
