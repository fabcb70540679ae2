//! Multi-scale retention.
//!
//! Per head, with decay `gamma` and keys pre-scaled by `1/sqrt(dh)`:
//!
//! * parallel: `O = (Q K^T ⊙ D) V` with `D[n, m] = gamma^(n-m)` for `n >= m`, else 0
//! * recurrent: `S_t = gamma S_{t-1} + k_t^T v_t`, `o_t = q_t S_t`
//!
//! Both are followed by a per-head RMS norm with a learnable scale and the
//! output projection `wo`. The two forms are algebraically identical; the
//! recurrent one costs O(1) per generated token.

use super::{Init, ParamSpec, Scope};
use crate::autograd::{rope_tables, Graph, Var};
use crate::error::{Error, Result};
use crate::store::ParameterStore;
use crate::tensor::{gemm, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct RetentionParams {
    pub head_size: usize,
    /// One decay per head, each strictly inside `(0, 1)`.
    pub decays: Vec<f64>,
    pub rotary: bool,
    /// Per-head RMS norm after retention. Disabling it is only useful for
    /// kernel-level tests.
    pub group_norm: bool,
    pub norm_eps: f64,
}

/// `gamma_h = 1 - 2^(-5 - h)`.
pub fn default_decays(heads: usize) -> Vec<f64> {
    (0..heads).map(|h| 1.0 - 2f64.powi(-5 - h as i32)).collect()
}

impl RetentionParams {
    pub fn new(d: usize, head_size: usize, rotary: bool, norm_eps: f64) -> Result<Self> {
        if head_size == 0 || d % head_size != 0 {
            return Err(Error::Config(format!(
                "d_model {d} not divisible by retention head_size {head_size}"
            )));
        }
        let p = RetentionParams {
            head_size,
            decays: default_decays(d / head_size),
            rotary,
            group_norm: true,
            norm_eps,
        };
        p.validate(d)?;
        Ok(p)
    }

    pub fn heads(&self) -> usize {
        self.decays.len()
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if self.head_size == 0 || self.head_size * self.decays.len() != d {
            return Err(Error::Config(format!(
                "{} heads of size {} do not cover d_model {d}",
                self.decays.len(),
                self.head_size
            )));
        }
        if self.rotary && self.head_size % 2 != 0 {
            return Err(Error::Config("rotary needs an even head size".into()));
        }
        Ok(())
    }

    /// Decays at precision `F`, rejecting any that round outside `(0, 1)`.
    pub fn decays_as<F: Scalar>(&self) -> Result<Vec<F>> {
        check_decays(self.decays.iter().map(|&g| F::lit(g)).collect())
    }

    pub fn param_specs(d: usize) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("gn_scale", &[d], Init::Ones),
            ParamSpec::new("wk", &[d, d], Init::Normal),
            ParamSpec::new("wo", &[d, d], Init::ResidualOut),
            ParamSpec::new("wq", &[d, d], Init::Normal),
            ParamSpec::new("wv", &[d, d], Init::Normal),
        ]
    }
}

fn check_decays<F: Scalar>(decays: Vec<F>) -> Result<Vec<F>> {
    for (h, &g) in decays.iter().enumerate() {
        if !(g > F::zero() && g < F::one()) {
            return Err(Error::Config(format!(
                "retention decay for head {h} is {g:?}; must lie strictly in (0, 1)"
            )));
        }
    }
    Ok(decays)
}

fn check_qkv<F: Scalar>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, heads: usize) -> Result<()> {
    if q.rank() != 4 || q.dims() != k.dims() || q.dims()[..3] != v.dims()[..3] || v.rank() != 4 || q.dims()[1] != heads {
        return Err(Error::shape(
            "retention",
            format!("q {:?}, k {:?}, v {:?} with {heads} decays", q.dims(), k.dims(), v.dims()),
        ));
    }
    Ok(())
}

/// Parallel retention kernel on pre-projected `q, k, v: [B, H, T, dh]`
/// (no key scaling, no norm).
pub fn retention_parallel_kernel<F: Scalar>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, decays: &[F]) -> Result<Tensor<F>> {
    check_qkv(q, k, v, decays.len())?;
    let decays = check_decays(decays.to_vec())?;
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let scores = g.batched_matmul(qv, kv, true)?;
    let masked = g.decay_mask(scores, &decays, F::one())?;
    let out = g.batched_matmul(masked, vv, false)?;
    Ok(g.value(out).clone())
}

/// Step-by-step recurrent kernel on the same inputs as
/// [`retention_parallel_kernel`].
pub fn retention_recurrent_kernel<F: Scalar>(q: &Tensor<F>, k: &Tensor<F>, v: &Tensor<F>, decays: &[F]) -> Result<Tensor<F>> {
    check_qkv(q, k, v, decays.len())?;
    let decays = check_decays(decays.to_vec())?;
    let (b, h, t, dk) = (q.dims()[0], q.dims()[1], q.dims()[2], q.dims()[3]);
    let dv = v.dims()[3];
    let mut out = vec![F::zero(); b * h * t * dv];
    let mut state = vec![F::zero(); dk * dv];
    for bh in 0..b * h {
        let gamma = decays[bh % h];
        state.fill(F::zero());
        for ti in 0..t {
            let qr = &q.data()[(bh * t + ti) * dk..(bh * t + ti + 1) * dk];
            let kr = &k.data()[(bh * t + ti) * dk..(bh * t + ti + 1) * dk];
            let vr = &v.data()[(bh * t + ti) * dv..(bh * t + ti + 1) * dv];
            recurrent_update(&mut state, gamma, kr, vr);
            let o = &mut out[(bh * t + ti) * dv..(bh * t + ti + 1) * dv];
            gemm(1, dk, dv, qr, false, &state, false, o, false);
        }
    }
    Tensor::from_vec(&[b, h, t, dv], out)
}

/// `S <- gamma S + k^T v`
fn recurrent_update<F: Scalar>(state: &mut [F], gamma: F, k: &[F], v: &[F]) {
    let dv = v.len();
    for (i, &ki) in k.iter().enumerate() {
        let row = &mut state[i * dv..(i + 1) * dv];
        for (s, &vj) in row.iter_mut().zip(v) {
            *s = gamma * *s + ki * vj;
        }
    }
}

/// Parallel-mode retention block, `x: [B, T, d] -> [B, T, d]`.
pub fn retention_parallel<F: Scalar>(g: &mut Graph<F>, x: Var, p: Scope<'_>, hp: &RetentionParams) -> Result<Var> {
    if g.dims(x).len() != 3 {
        return Err(Error::shape("retention_parallel", format!("input {:?} is not [B,T,d]", g.dims(x))));
    }
    let d = g.dims(x)[2];
    hp.validate(d)?;
    let decays = hp.decays_as::<F>()?;
    let heads = hp.heads();

    let q = g.matmul(x, p.get("wq")?, false)?;
    let k = g.matmul(x, p.get("wk")?, false)?;
    let v = g.matmul(x, p.get("wv")?, false)?;
    let mut q = g.split_heads(q, heads)?;
    let mut k = g.split_heads(k, heads)?;
    let v = g.split_heads(v, heads)?;
    if hp.rotary {
        q = g.rotary(q, 0)?;
        k = g.rotary(k, 0)?;
    }
    let scores = g.batched_matmul(q, k, true)?;
    let key_scale = F::lit(1.0 / (hp.head_size as f64).sqrt());
    let masked = g.decay_mask(scores, &decays, key_scale)?;
    let heads_out = g.batched_matmul(masked, v, false)?;
    let mut merged = g.merge_heads(heads_out)?;
    if hp.group_norm {
        merged = g.rms_group_norm(merged, p.get("gn_scale")?, hp.head_size, F::lit(hp.norm_eps))?;
    }
    g.matmul(merged, p.get("wo")?, false)
}

/// Recurrent retention state: one `dh x dh` matrix per batch row and head,
/// plus the position of the next token.
#[derive(Clone, Debug, PartialEq)]
pub struct RetentionState<F> {
    batch: usize,
    heads: usize,
    head_size: usize,
    s: Vec<F>,
    position: usize,
}

impl<F: Scalar> RetentionState<F> {
    pub fn zeros(batch: usize, hp: &RetentionParams) -> Self {
        let (heads, head_size) = (hp.heads(), hp.head_size);
        RetentionState {
            batch,
            heads,
            head_size,
            s: vec![F::zero(); batch * heads * head_size * head_size],
            position: 0,
        }
    }

    pub fn position(&self) -> usize {
        self.position
    }

    /// `[B, H, dk, dv]`
    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.heads, self.head_size, self.head_size]
    }

    pub fn data(&self) -> &[F] {
        &self.s
    }
}

fn project<F: Scalar>(x: &Tensor<F>, w: &Tensor<F>) -> Result<Vec<F>> {
    let (rows, k) = (x.dims()[0], x.dims()[1]);
    if w.dims()[0] != k {
        return Err(Error::shape("retention_recurrent", format!("x {:?} vs w {:?}", x.dims(), w.dims())));
    }
    let n = w.dims()[1];
    let mut out = vec![F::zero(); rows * n];
    gemm(rows, k, n, x.data(), false, w.data(), false, &mut out, false);
    Ok(out)
}

/// One recurrent step of the retention block: `x_t: [B, d] -> [B, d]`,
/// advancing `state` by one position. Per-step cost does not depend on the
/// position.
pub fn retention_recurrent<F: Scalar>(
    x_t: &Tensor<F>,
    state: &mut RetentionState<F>,
    store: &ParameterStore<F>,
    prefix: &str,
    hp: &RetentionParams,
) -> Result<Tensor<F>> {
    if x_t.rank() != 2 {
        return Err(Error::shape("retention_recurrent", format!("input {:?} is not [B,d]", x_t.dims())));
    }
    let (b, d) = (x_t.dims()[0], x_t.dims()[1]);
    hp.validate(d)?;
    if state.batch != b || state.heads != hp.heads() || state.head_size != hp.head_size {
        return Err(Error::shape(
            "retention_recurrent",
            format!("state {:?} for input {:?} with {} heads of {}", state.dims(), x_t.dims(), hp.heads(), hp.head_size),
        ));
    }
    let decays = hp.decays_as::<F>()?;
    let w = |n: &str| store.require(&format!("{prefix}.{n}"));
    let mut q = project(x_t, w("wq")?)?;
    let mut k = project(x_t, w("wk")?)?;
    let v = project(x_t, w("wv")?)?;

    let dh = hp.head_size;
    let half = dh / 2;
    let (cos, sin) = rope_tables::<F>(state.position..state.position + 1, half);
    let key_scale = F::lit(1.0 / (dh as f64).sqrt());
    let mut merged = vec![F::zero(); b * d];
    for bi in 0..b {
        for h in 0..hp.heads() {
            let off = bi * d + h * dh;
            let (qh, kh) = (&mut q[off..off + dh], &mut k[off..off + dh]);
            if hp.rotary {
                for row in [&mut *qh, &mut *kh] {
                    for i in 0..half {
                        let (x1, x2) = (row[i], row[i + half]);
                        row[i] = x1 * cos[i] - x2 * sin[i];
                        row[i + half] = x2 * cos[i] + x1 * sin[i];
                    }
                }
            }
            for kv in kh.iter_mut() {
                *kv = *kv * key_scale;
            }
            let s_off = (bi * hp.heads() + h) * dh * dh;
            let s = &mut state.s[s_off..s_off + dh * dh];
            recurrent_update(s, decays[h], &k[off..off + dh], &v[off..off + dh]);
            gemm(1, dh, dh, &q[off..off + dh], false, s, false, &mut merged[off..off + dh], false);
        }
    }
    if hp.group_norm {
        let scale = w("gn_scale")?;
        let eps = F::lit(hp.norm_eps);
        let inv = F::one() / F::from_usize(dh).unwrap();
        for (gi, grp) in merged.chunks_exact_mut(dh).enumerate() {
            let ms = grp.iter().fold(F::zero(), |acc, &v| acc + v * v) * inv;
            let rs = F::one() / (ms + eps).sqrt();
            let h = gi % hp.heads();
            for (j, v) in grp.iter_mut().enumerate() {
                *v = *v * rs * scale.data()[h * dh + j];
            }
        }
    }
    let merged = Tensor::from_vec(&[b, d], merged)?;
    let out = project(&merged, w("wo")?)?;
    state.position += 1;
    Tensor::from_vec(&[b, d], out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(dims, v).unwrap()
    }

    #[test]
    fn scalar_head_hand_value() {
        let ones = t(&[1, 1, 2, 1], &[1.0, 1.0]);
        let par = retention_parallel_kernel(&ones, &ones, &ones, &[0.5]).unwrap();
        assert_eq!(par.data(), &[1.0, 1.5]);
        let rec = retention_recurrent_kernel(&ones, &ones, &ones, &[0.5]).unwrap();
        assert_eq!(rec.data(), &[1.0, 1.5]);
    }

    #[test]
    fn vanishing_decay_is_position_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = Tensor::<f64>::uniform(&[1, 1, 5, 3], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[1, 1, 5, 3], -1.0, 1.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[1, 1, 5, 2], -1.0, 1.0, &mut rng);
        let out = retention_parallel_kernel(&q, &k, &v, &[1e-300]).unwrap();
        for ti in 0..5 {
            let qk: f64 = (0..3).map(|i| q.data()[ti * 3 + i] * k.data()[ti * 3 + i]).sum();
            for j in 0..2 {
                assert!((out.data()[ti * 2 + j] - qk * v.data()[ti * 2 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn decay_of_one_is_rejected() {
        let ones = t(&[1, 1, 2, 1], &[1.0, 1.0]);
        assert!(matches!(
            retention_parallel_kernel(&ones, &ones, &ones, &[1.0]),
            Err(Error::Config(_))
        ));
        let hp = RetentionParams {
            head_size: 1,
            decays: vec![1.0],
            rotary: false,
            group_norm: false,
            norm_eps: 1e-5,
        };
        assert!(hp.decays_as::<f64>().is_err());
    }

    #[test]
    fn default_decay_ladder() {
        let d = default_decays(4);
        assert_eq!(d, vec![1.0 - 1.0 / 32.0, 1.0 - 1.0 / 64.0, 1.0 - 1.0 / 128.0, 1.0 - 1.0 / 256.0]);
    }

    #[test]
    fn kernels_agree_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let q = Tensor::<f64>::uniform(&[2, 3, 17, 4], -1.0, 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[2, 3, 17, 4], -1.0, 1.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[2, 3, 17, 4], -1.0, 1.0, &mut rng);
        let decays = [0.9, 0.5, 0.99];
        let a = retention_parallel_kernel(&q, &k, &v, &decays).unwrap();
        let b = retention_recurrent_kernel(&q, &k, &v, &decays).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn state_shape_mismatch_is_rejected() {
        let hp = RetentionParams::new(8, 4, false, 1e-5).unwrap();
        let other = RetentionParams::new(8, 2, false, 1e-5).unwrap();
        let mut state = RetentionState::<f64>::zeros(1, &other);
        let store = ParameterStore::<f64>::new();
        let x = Tensor::zeros(&[1, 8]);
        assert!(matches!(
            retention_recurrent(&x, &mut state, &store, "mix", &hp),
            Err(Error::Shape { .. })
        ));
    }
}
