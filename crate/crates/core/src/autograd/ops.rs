use super::{Graph, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

pub const ROTARY_BASE: f64 = 10000.0;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub(crate) enum Op<F> {
    Leaf,
    MatMul {
        x: Var,
        w: Var,
        trans_w: bool,
    },
    BatchedMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        s: F,
    },
    LayerNorm {
        x: Var,
        g: Var,
        b: Var,
        mean: Vec<F>,
        rstd: Vec<F>,
    },
    RmsGroupNorm {
        x: Var,
        scale: Var,
        group: usize,
        rstd: Vec<F>,
    },
    Gelu {
        x: Var,
    },
    Silu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    NegExp {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
    },
    Rotary {
        x: Var,
        offset: usize,
    },
    CausalSoftmax {
        x: Var,
        scale: F,
    },
    DecayMask {
        x: Var,
        table: Vec<F>,
    },
    CausalConv {
        x: Var,
        w: Var,
        b: Var,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a: Var,
        bm: Var,
        cm: Var,
        d: Var,
        states: Vec<F>,
    },
    SliceLast {
        x: Var,
        start: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        probs: Vec<F>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

impl<F: Scalar> Op<F> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchedMatMul { .. } => "batched_matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RmsGroupNorm { .. } => "rms_group_norm",
            Op::Gelu { .. } => "gelu",
            Op::Silu { .. } => "silu",
            Op::Softplus { .. } => "softplus",
            Op::NegExp { .. } => "neg_exp",
            Op::Embedding { .. } => "embedding",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::Rotary { .. } => "rotary",
            Op::CausalSoftmax { .. } => "causal_softmax",
            Op::DecayMask { .. } => "decay_mask",
            Op::CausalConv { .. } => "causal_conv",
            Op::SelectiveScan { .. } => "selective_scan",
            Op::SliceLast { .. } => "slice_last",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { x, w, .. } => vec![x, w],
            Op::BatchedMatMul { a, b, .. } => vec![a, b],
            Op::AddBias { x, b } => vec![x, b],
            Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::LayerNorm { x, g, b, .. } => vec![x, g, b],
            Op::RmsGroupNorm { x, scale, .. } => vec![x, scale],
            Op::Embedding { table, .. } => vec![table],
            Op::CausalConv { x, w, b } => vec![x, w, b],
            Op::SelectiveScan {
                u, delta, a, bm, cm, d, ..
            } => vec![u, delta, a, bm, cm, d],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Silu { x }
            | Op::Softplus { x }
            | Op::NegExp { x }
            | Op::SplitHeads { x, .. }
            | Op::MergeHeads { x }
            | Op::Rotary { x, .. }
            | Op::CausalSoftmax { x, .. }
            | Op::DecayMask { x, .. }
            | Op::SliceLast { x, .. }
            | Op::Sum { x } => vec![x],
        }
    }

    /// Drops saved-for-backward buffers.
    pub(crate) fn release(&mut self) {
        match self {
            Op::LayerNorm { mean, rstd, .. } => {
                *mean = Vec::new();
                *rstd = Vec::new();
            }
            Op::RmsGroupNorm { rstd, .. } => *rstd = Vec::new(),
            Op::SelectiveScan { states, .. } => *states = Vec::new(),
            Op::CrossEntropy { probs, .. } => *probs = Vec::new(),
            _ => {}
        }
    }

    pub(crate) fn backward(
        &self,
        nodes: &[Node<F>],
        idx: usize,
        gy: &Tensor<F>,
    ) -> Result<Vec<(Var, Tensor<F>)>> {
        let val = |v: Var| &nodes[v.0].value;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let y = &nodes[idx].value;
        let g = gy.data();
        let mut out = Vec::new();
        match self {
            Op::Leaf => {}
            &Op::MatMul { x, w, trans_w } => {
                let (xv, wv) = (val(x), val(w));
                let k = xv.last_dim();
                let rows = xv.numel() / k;
                let n = y.last_dim();
                if needs(x) {
                    let mut gx = vec![F::zero(); xv.numel()];
                    // y = x w  -> gx = gy w^T ; y = x w^T -> gx = gy w
                    gemm(rows, n, k, g, false, wv.data(), !trans_w, &mut gx, false);
                    out.push((x, Tensor::from_vec(xv.dims(), gx)?));
                }
                if needs(w) {
                    let mut gw = vec![F::zero(); wv.numel()];
                    if trans_w {
                        gemm(n, rows, k, g, true, xv.data(), false, &mut gw, false);
                    } else {
                        gemm(k, rows, n, xv.data(), true, g, false, &mut gw, false);
                    }
                    out.push((w, Tensor::from_vec(wv.dims(), gw)?));
                }
            }
            &Op::BatchedMatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let r = av.rank();
                let (m, k) = (av.dims()[r - 2], av.dims()[r - 1]);
                let n = y.last_dim();
                let batch = av.numel() / (m * k);
                if needs(a) {
                    let mut ga = vec![F::zero(); av.numel()];
                    for i in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[i * m * n..(i + 1) * m * n],
                            false,
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            !trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            false,
                        );
                    }
                    out.push((a, Tensor::from_vec(av.dims(), ga)?));
                }
                if needs(b) {
                    let mut gb = vec![F::zero(); bv.numel()];
                    for i in 0..batch {
                        let gs = &g[i * m * n..(i + 1) * m * n];
                        let asl = &av.data()[i * m * k..(i + 1) * m * k];
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if trans_b {
                            gemm(n, m, k, gs, true, asl, false, dst, false);
                        } else {
                            gemm(k, m, n, asl, true, gs, false, dst, false);
                        }
                    }
                    out.push((b, Tensor::from_vec(bv.dims(), gb)?));
                }
            }
            &Op::AddBias { x, b } => {
                if needs(x) {
                    out.push((x, gy.clone()));
                }
                if needs(b) {
                    let n = val(b).numel();
                    let mut gb = vec![F::zero(); n];
                    for row in g.chunks_exact(n) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    out.push((b, Tensor::from_vec(val(b).dims(), gb)?));
                }
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    out.push((a, gy.clone()));
                }
                if needs(b) {
                    out.push((b, gy.clone()));
                }
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (val(a), val(b));
                if needs(a) {
                    let d = g.iter().zip(bv.data()).map(|(&g, &b)| g * b).collect();
                    out.push((a, Tensor::from_vec(av.dims(), d)?));
                }
                if needs(b) {
                    let d = g.iter().zip(av.data()).map(|(&g, &a)| g * a).collect();
                    out.push((b, Tensor::from_vec(bv.dims(), d)?));
                }
            }
            &Op::Scale { x, s } => {
                let d = g.iter().map(|&g| g * s).collect();
                out.push((x, Tensor::from_vec(y.dims(), d)?));
            }
            Op::LayerNorm {
                x,
                g: gamma,
                b: beta,
                mean,
                rstd,
            } => {
                let (xv, gv) = (val(*x), val(*gamma));
                let d = xv.last_dim();
                let rows = xv.numel() / d;
                let inv_d = F::one() / F::from_usize(d).unwrap();
                let mut gx = vec![F::zero(); xv.numel()];
                let mut gg = vec![F::zero(); d];
                let mut gb = vec![F::zero(); d];
                let mut xhat = vec![F::zero(); d];
                let mut gxhat = vec![F::zero(); d];
                for r in 0..rows {
                    let xs = &xv.data()[r * d..(r + 1) * d];
                    let gs = &g[r * d..(r + 1) * d];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut sum_gxhat = F::zero();
                    let mut sum_gxhat_xhat = F::zero();
                    for j in 0..d {
                        xhat[j] = (xs[j] - mu) * rs;
                        gxhat[j] = gs[j] * gv.data()[j];
                        sum_gxhat = sum_gxhat + gxhat[j];
                        sum_gxhat_xhat = sum_gxhat_xhat + gxhat[j] * xhat[j];
                        gg[j] = gg[j] + gs[j] * xhat[j];
                        gb[j] = gb[j] + gs[j];
                    }
                    let m1 = sum_gxhat * inv_d;
                    let m2 = sum_gxhat_xhat * inv_d;
                    for j in 0..d {
                        gx[r * d + j] = rs * (gxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if needs(*x) {
                    out.push((*x, Tensor::from_vec(xv.dims(), gx)?));
                }
                if needs(*gamma) {
                    out.push((*gamma, Tensor::from_vec(gv.dims(), gg)?));
                }
                if needs(*beta) {
                    out.push((*beta, Tensor::from_vec(val(*beta).dims(), gb)?));
                }
            }
            Op::RmsGroupNorm {
                x,
                scale,
                group,
                rstd,
            } => {
                let (xv, sv) = (val(*x), val(*scale));
                let c = xv.last_dim();
                let group = *group;
                let groups = c / group;
                let rows = xv.numel() / c;
                let inv_g = F::one() / F::from_usize(group).unwrap();
                let mut gx = vec![F::zero(); xv.numel()];
                let mut gs = vec![F::zero(); c];
                for r in 0..rows {
                    for h in 0..groups {
                        let base = r * c + h * group;
                        let rs = rstd[r * groups + h];
                        let mut dot = F::zero();
                        for j in 0..group {
                            let xhat = xv.data()[base + j] * rs;
                            let gp = g[base + j] * sv.data()[h * group + j];
                            dot = dot + gp * xhat;
                            gs[h * group + j] = gs[h * group + j] + g[base + j] * xhat;
                        }
                        let mean_dot = dot * inv_g;
                        for j in 0..group {
                            let xhat = xv.data()[base + j] * rs;
                            let gp = g[base + j] * sv.data()[h * group + j];
                            gx[base + j] = rs * (gp - xhat * mean_dot);
                        }
                    }
                }
                if needs(*x) {
                    out.push((*x, Tensor::from_vec(xv.dims(), gx)?));
                }
                if needs(*scale) {
                    out.push((*scale, Tensor::from_vec(sv.dims(), gs)?));
                }
            }
            &Op::Gelu { x } => {
                let xv = val(x);
                let d = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| g * gelu_grad(x))
                    .collect();
                out.push((x, Tensor::from_vec(xv.dims(), d)?));
            }
            &Op::Silu { x } => {
                let xv = val(x);
                let d = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (F::one() + x * (F::one() - s))
                    })
                    .collect();
                out.push((x, Tensor::from_vec(xv.dims(), d)?));
            }
            &Op::Softplus { x } => {
                let xv = val(x);
                let d = g
                    .iter()
                    .zip(xv.data())
                    .map(|(&g, &x)| g * sigmoid(x))
                    .collect();
                out.push((x, Tensor::from_vec(xv.dims(), d)?));
            }
            &Op::NegExp { x } => {
                // y = -exp(x) -> dy/dx = y
                let d = g.iter().zip(y.data()).map(|(&g, &y)| g * y).collect();
                out.push((x, Tensor::from_vec(y.dims(), d)?));
            }
            Op::Embedding { table, ids } => {
                let tv = val(*table);
                let d = tv.last_dim();
                let mut gt = vec![F::zero(); tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    for (acc, &v) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc = *acc + v;
                    }
                }
                out.push((*table, Tensor::from_vec(tv.dims(), gt)?));
            }
            &Op::SplitHeads { x, heads } => {
                let xv = val(x);
                let (b, t, c) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let gx = merge_heads_raw(g, b, heads, t, c / heads);
                out.push((x, Tensor::from_vec(xv.dims(), gx)?));
            }
            &Op::MergeHeads { x } => {
                let xv = val(x);
                let d = xv.dims();
                let gx = split_heads_raw(g, d[0], d[2], d[1] * d[3], d[1]);
                out.push((x, Tensor::from_vec(xv.dims(), gx)?));
            }
            &Op::Rotary { x, offset } => {
                let mut gx = g.to_vec();
                apply_rotary(&mut gx, y.dims(), offset, true);
                out.push((x, Tensor::from_vec(y.dims(), gx)?));
            }
            &Op::CausalSoftmax { x, scale } => {
                let t = y.last_dim();
                let mut gx = vec![F::zero(); y.numel()];
                for (blk, (ys, gs)) in y.data().chunks_exact(t * t).zip(g.chunks_exact(t * t)).enumerate() {
                    for i in 0..t {
                        let yr = &ys[i * t..i * t + i + 1];
                        let gr = &gs[i * t..i * t + i + 1];
                        let dot = yr.iter().zip(gr).fold(F::zero(), |acc, (&a, &b)| acc + a * b);
                        let dst = &mut gx[blk * t * t + i * t..blk * t * t + i * t + i + 1];
                        for j in 0..=i {
                            dst[j] = scale * yr[j] * (gr[j] - dot);
                        }
                    }
                }
                out.push((x, Tensor::from_vec(y.dims(), gx)?));
            }
            Op::DecayMask { x, table } => {
                let gx = apply_decay_table(g, y.dims(), table);
                out.push((*x, Tensor::from_vec(y.dims(), gx)?));
            }
            &Op::CausalConv { x, w, b } => {
                let (xv, wv) = (val(x), val(w));
                let (bsz, t, c) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
                let width = wv.dims()[1];
                let mut gx = vec![F::zero(); xv.numel()];
                let mut gw = vec![F::zero(); wv.numel()];
                let mut gb = vec![F::zero(); c];
                for bi in 0..bsz {
                    for ti in 0..t {
                        let grow = &g[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                        for ch in 0..c {
                            gb[ch] = gb[ch] + grow[ch];
                        }
                        for j in 0..width {
                            let Some(src_t) = (ti + j + 1).checked_sub(width) else {
                                continue;
                            };
                            let xo = (bi * t + src_t) * c;
                            for ch in 0..c {
                                gw[ch * width + j] = gw[ch * width + j] + grow[ch] * xv.data()[xo + ch];
                                gx[xo + ch] = gx[xo + ch] + grow[ch] * wv.data()[ch * width + j];
                            }
                        }
                    }
                }
                if needs(x) {
                    out.push((x, Tensor::from_vec(xv.dims(), gx)?));
                }
                if needs(w) {
                    out.push((w, Tensor::from_vec(wv.dims(), gw)?));
                }
                if needs(b) {
                    out.push((b, Tensor::from_vec(val(b).dims(), gb)?));
                }
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                bm,
                cm,
                d,
                states,
            } => {
                let grads = scan_backward(
                    val(*u),
                    val(*delta),
                    val(*a),
                    val(*bm),
                    val(*cm),
                    val(*d),
                    states,
                    g,
                )?;
                for (var, grad) in [*u, *delta, *a, *bm, *cm, *d].into_iter().zip(grads) {
                    if needs(var) {
                        out.push((var, grad));
                    }
                }
            }
            &Op::SliceLast { x, start } => {
                let xv = val(x);
                let n = xv.last_dim();
                let len = y.last_dim();
                let mut gx = vec![F::zero(); xv.numel()];
                for (dst, src) in gx.chunks_exact_mut(n).zip(g.chunks_exact(len)) {
                    dst[start..start + len].copy_from_slice(src);
                }
                out.push((x, Tensor::from_vec(xv.dims(), gx)?));
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let lv = val(*logits);
                let v = lv.last_dim();
                let mut gl = vec![F::zero(); lv.numel()];
                if *count > 0 {
                    let scale = g[0] / F::from_usize(*count).unwrap();
                    for (r, &tgt) in targets.iter().enumerate() {
                        if Some(tgt) == *ignore {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        for (dst, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *dst = p * scale;
                        }
                        row[tgt] = row[tgt] - scale;
                    }
                }
                out.push((*logits, Tensor::from_vec(lv.dims(), gl)?));
            }
            &Op::Sum { x } => {
                out.push((x, Tensor::full(val(x).dims(), g[0])));
            }
        }
        Ok(out)
    }
}

#[inline]
fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

#[inline]
fn gelu<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(GELU_K);
    let half = F::lit(0.5);
    half * x * (F::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::lit(GELU_C);
    let k = F::lit(GELU_K);
    let half = F::lit(0.5);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (F::one() + th)
        + half * x * (F::one() - th * th) * c * (F::one() + F::lit(3.0) * k * x * x)
}

#[inline]
fn softplus<F: Scalar>(x: F) -> F {
    if x > F::lit(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn split_heads_raw<F: Scalar>(x: &[F], b: usize, t: usize, c: usize, heads: usize) -> Vec<F> {
    let dh = c / heads;
    let mut out = vec![F::zero(); x.len()];
    for bi in 0..b {
        for ti in 0..t {
            for h in 0..heads {
                let src = (bi * t + ti) * c + h * dh;
                let dst = ((bi * heads + h) * t + ti) * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

fn merge_heads_raw<F: Scalar>(x: &[F], b: usize, heads: usize, t: usize, dh: usize) -> Vec<F> {
    let c = heads * dh;
    let mut out = vec![F::zero(); x.len()];
    for bi in 0..b {
        for h in 0..heads {
            for ti in 0..t {
                let src = ((bi * heads + h) * t + ti) * dh;
                let dst = (bi * t + ti) * c + h * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
    out
}

/// Cosine/sine tables for rotary embedding at `positions`, half-width
/// `half = head_dim / 2`, laid out `[position][i]`.
pub fn rope_tables<F: Scalar>(positions: impl Iterator<Item = usize>, half: usize) -> (Vec<F>, Vec<F>) {
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| ROTARY_BASE.powf(-((2 * i) as f64) / (2 * half) as f64))
        .collect();
    let mut cos = Vec::new();
    let mut sin = Vec::new();
    for p in positions {
        for &f in &inv_freq {
            let angle = p as f64 * f;
            cos.push(F::lit(angle.cos()));
            sin.push(F::lit(angle.sin()));
        }
    }
    (cos, sin)
}

/// Rotates pairs `(i, i + dh/2)` of a `[B, H, T, dh]` buffer in place.
/// `inverse` rotates by the negated angle (the adjoint).
fn apply_rotary<F: Scalar>(data: &mut [F], dims: &[usize], offset: usize, inverse: bool) {
    let (t, dh) = (dims[2], dims[3]);
    let half = dh / 2;
    let (cos, sin) = rope_tables::<F>(offset..offset + t, half);
    for (row_idx, row) in data.chunks_exact_mut(dh).enumerate() {
        let ti = row_idx % t;
        let cs = &cos[ti * half..(ti + 1) * half];
        let sn = &sin[ti * half..(ti + 1) * half];
        for i in 0..half {
            let (x1, x2) = (row[i], row[i + half]);
            let s = if inverse { -sn[i] } else { sn[i] };
            row[i] = x1 * cs[i] - x2 * s;
            row[i + half] = x2 * cs[i] + x1 * s;
        }
    }
}

/// Decay table `scale * gamma_h^(n-m)` for `n >= m`, zero above the
/// diagonal, laid out `[H][T][T]`.
pub(crate) fn decay_table<F: Scalar>(gammas: &[F], t: usize, scale: F) -> Vec<F> {
    let mut table = vec![F::zero(); gammas.len() * t * t];
    for (h, &gamma) in gammas.iter().enumerate() {
        let mut pows = Vec::with_capacity(t);
        let mut p = F::one();
        for _ in 0..t {
            pows.push(p);
            p = p * gamma;
        }
        for n in 0..t {
            for m in 0..=n {
                table[(h * t + n) * t + m] = scale * pows[n - m];
            }
        }
    }
    table
}

fn apply_decay_table<F: Scalar>(x: &[F], dims: &[usize], table: &[F]) -> Vec<F> {
    let (heads, t) = (dims[1], dims[2]);
    let tt = t * t;
    let mut out = vec![F::zero(); x.len()];
    for (blk, (dst, src)) in out.chunks_exact_mut(tt).zip(x.chunks_exact(tt)).enumerate() {
        let h = blk % heads;
        let tab = &table[h * tt..(h + 1) * tt];
        for ((o, &v), &w) in dst.iter_mut().zip(src).zip(tab) {
            *o = v * w;
        }
    }
    out
}

/// Row-wise softmax over the causal prefix of each `[T, T]` block; entries
/// above the diagonal are never read and are written as exact zeros.
pub(crate) fn causal_softmax_raw<F: Scalar>(x: &[F], t: usize, scale: F) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for (src, dst) in x.chunks_exact(t * t).zip(out.chunks_exact_mut(t * t)) {
        for i in 0..t {
            let row = &src[i * t..i * t + i + 1];
            let m = row
                .iter()
                .fold(F::neg_infinity(), |acc, &v| acc.max(v * scale));
            let o = &mut dst[i * t..i * t + i + 1];
            let mut sum = F::zero();
            for (oj, &v) in o.iter_mut().zip(row) {
                *oj = (v * scale - m).exp();
                sum = sum + *oj;
            }
            let inv = F::one() / sum;
            for oj in o.iter_mut() {
                *oj = *oj * inv;
            }
        }
    }
    out
}

pub(crate) struct ScanDims {
    b: usize,
    t: usize,
    e: usize,
    n: usize,
}

pub(crate) fn scan_dims<F: Scalar>(
    u: &Tensor<F>,
    delta: &Tensor<F>,
    a: &Tensor<F>,
    bm: &Tensor<F>,
    cm: &Tensor<F>,
    d: &Tensor<F>,
) -> Result<ScanDims> {
    if u.rank() != 3 || a.rank() != 2 {
        return Err(Error::shape("selective_scan", "u must be [B,T,E], A must be [E,N]"));
    }
    let (b, t, e) = (u.dims()[0], u.dims()[1], u.dims()[2]);
    let n = a.dims()[1];
    let ok = delta.dims() == u.dims()
        && a.dims()[0] == e
        && bm.dims() == [b, t, n]
        && cm.dims() == [b, t, n]
        && d.dims() == [e];
    if !ok {
        return Err(Error::shape(
            "selective_scan",
            format!(
                "u {:?}, delta {:?}, A {:?}, B {:?}, C {:?}, D {:?}",
                u.dims(),
                delta.dims(),
                a.dims(),
                bm.dims(),
                cm.dims(),
                d.dims()
            ),
        ));
    }
    if let Some(index) = delta.data().iter().position(|&v| v <= F::zero() || v.is_nan()) {
        return Err(Error::NonPositiveDelta { index });
    }
    Ok(ScanDims { b, t, e, n })
}

/// Sequential zero-order-hold selective scan. Returns `y` and, when
/// `keep_states`, every hidden state laid out `[B][T][E][N]`.
pub(crate) fn scan_forward<F: Scalar>(
    u: &Tensor<F>,
    delta: &Tensor<F>,
    a: &Tensor<F>,
    bm: &Tensor<F>,
    cm: &Tensor<F>,
    d: &Tensor<F>,
    keep_states: bool,
) -> Result<(Vec<F>, Vec<F>)> {
    let ScanDims { b, t, e, n } = scan_dims(u, delta, a, bm, cm, d)?;
    let (ud, dd, ad, bd, cd, skip) = (u.data(), delta.data(), a.data(), bm.data(), cm.data(), d.data());
    let mut y = vec![F::zero(); b * t * e];
    let mut states = if keep_states { vec![F::zero(); b * t * e * n] } else { Vec::new() };
    let mut h = vec![F::zero(); e * n];
    for bi in 0..b {
        h.fill(F::zero());
        for ti in 0..t {
            let row = bi * t + ti;
            let bv = &bd[row * n..(row + 1) * n];
            let cv = &cd[row * n..(row + 1) * n];
            for ei in 0..e {
                let dt = dd[row * e + ei];
                let x = ud[row * e + ei];
                let hs = &mut h[ei * n..(ei + 1) * n];
                let arow = &ad[ei * n..(ei + 1) * n];
                let mut acc = F::zero();
                for j in 0..n {
                    hs[j] = (dt * arow[j]).exp() * hs[j] + dt * bv[j] * x;
                    acc = acc + cv[j] * hs[j];
                }
                y[row * e + ei] = acc + skip[ei] * x;
            }
            if keep_states {
                states[row * e * n..(row + 1) * e * n].copy_from_slice(&h);
            }
        }
    }
    Ok((y, states))
}

#[allow(clippy::too_many_arguments)]
fn scan_backward<F: Scalar>(
    u: &Tensor<F>,
    delta: &Tensor<F>,
    a: &Tensor<F>,
    bm: &Tensor<F>,
    cm: &Tensor<F>,
    d: &Tensor<F>,
    states: &[F],
    gy: &[F],
) -> Result<[Tensor<F>; 6]> {
    let (b, t, e, n) = (u.dims()[0], u.dims()[1], u.dims()[2], a.dims()[1]);
    let (ud, dd, ad, bd, cd, skip) = (u.data(), delta.data(), a.data(), bm.data(), cm.data(), d.data());
    let mut gu = vec![F::zero(); u.numel()];
    let mut gdelta = vec![F::zero(); delta.numel()];
    let mut ga = vec![F::zero(); a.numel()];
    let mut gb = vec![F::zero(); bm.numel()];
    let mut gc = vec![F::zero(); cm.numel()];
    let mut gd = vec![F::zero(); e];
    // carry[e][n]: dL/dh_t flowing back from h_{t+1}, already multiplied by dA_{t+1}
    let mut carry = vec![F::zero(); e * n];
    for bi in 0..b {
        carry.fill(F::zero());
        for ti in (0..t).rev() {
            let row = bi * t + ti;
            let bv = &bd[row * n..(row + 1) * n];
            let cv = &cd[row * n..(row + 1) * n];
            let h_t = &states[row * e * n..(row + 1) * e * n];
            for ei in 0..e {
                let g = gy[row * e + ei];
                let dt = dd[row * e + ei];
                let x = ud[row * e + ei];
                gd[ei] = gd[ei] + g * x;
                let mut gx = g * skip[ei];
                let mut gdt = F::zero();
                let arow = &ad[ei * n..(ei + 1) * n];
                for j in 0..n {
                    let h = h_t[ei * n + j];
                    let h_prev = if ti > 0 {
                        states[(row - 1) * e * n + ei * n + j]
                    } else {
                        F::zero()
                    };
                    gc[row * n + j] = gc[row * n + j] + g * h;
                    let gh = g * cv[j] + carry[ei * n + j];
                    let da = (dt * arow[j]).exp();
                    let gda = gh * h_prev * da;
                    gdt = gdt + gda * arow[j] + gh * bv[j] * x;
                    ga[ei * n + j] = ga[ei * n + j] + gda * dt;
                    gb[row * n + j] = gb[row * n + j] + gh * dt * x;
                    gx = gx + gh * dt * bv[j];
                    carry[ei * n + j] = gh * da;
                }
                gu[row * e + ei] = gx;
                gdelta[row * e + ei] = gdt;
            }
        }
    }
    Ok([
        Tensor::from_vec(u.dims(), gu)?,
        Tensor::from_vec(delta.dims(), gdelta)?,
        Tensor::from_vec(a.dims(), ga)?,
        Tensor::from_vec(bm.dims(), gb)?,
        Tensor::from_vec(cm.dims(), gc)?,
        Tensor::from_vec(d.dims(), gd)?,
    ])
}

fn unary<F: Scalar>(x: &Tensor<F>, f: impl Fn(F) -> F) -> Tensor<F> {
    Tensor::from_vec(x.dims(), x.data().iter().map(|&v| f(v)).collect()).expect("same dims")
}

impl<F: Scalar> Graph<F> {
    /// `x[..., k] @ w[k, n]`, or `x @ w^T` for `w[n, k]` when `trans_w`.
    pub fn matmul(&mut self, x: Var, w: Var, trans_w: bool) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if wv.rank() != 2 {
            return Err(Error::shape("matmul", format!("weight must be rank 2, got {:?}", wv.dims())));
        }
        let (k, n) = if trans_w {
            (wv.dims()[1], wv.dims()[0])
        } else {
            (wv.dims()[0], wv.dims()[1])
        };
        if xv.last_dim() != k {
            return Err(Error::shape(
                "matmul",
                format!("lhs {:?} vs weight {:?} (trans={trans_w})", xv.dims(), wv.dims()),
            ));
        }
        let rows = xv.numel() / k;
        let mut y = vec![F::zero(); rows * n];
        gemm(rows, k, n, xv.data(), false, wv.data(), trans_w, &mut y, false);
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = n;
        let value = Tensor::from_vec(&dims, y)?;
        self.push(value, Op::MatMul { x, w, trans_w })
    }

    /// Batched `a[..., m, k] @ b[..., k, n]` (or `b[..., n, k]^T`).
    pub fn batched_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let r = av.rank();
        if r < 2 || bv.rank() != r || av.dims()[..r - 2] != bv.dims()[..r - 2] {
            return Err(Error::shape("batched_matmul", format!("{:?} x {:?}", av.dims(), bv.dims())));
        }
        let (m, k) = (av.dims()[r - 2], av.dims()[r - 1]);
        let (bk, n) = if trans_b {
            (bv.dims()[r - 1], bv.dims()[r - 2])
        } else {
            (bv.dims()[r - 2], bv.dims()[r - 1])
        };
        if bk != k {
            return Err(Error::shape("batched_matmul", format!("{:?} x {:?}", av.dims(), bv.dims())));
        }
        let batch = av.numel() / (m * k);
        let mut y = vec![F::zero(); batch * m * n];
        for i in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..(i + 1) * m * k],
                false,
                &bv.data()[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut y[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        let mut dims = av.dims().to_vec();
        dims[r - 1] = n;
        let value = Tensor::from_vec(&dims, y)?;
        self.push(value, Op::BatchedMatMul { a, b, trans_b })
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.rank() != 1 || bv.numel() != xv.last_dim() {
            return Err(Error::shape("add_bias", format!("{:?} + {:?}", xv.dims(), bv.dims())));
        }
        let mut y = xv.data().to_vec();
        for row in y.chunks_exact_mut(bv.numel()) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o = *o + bb;
            }
        }
        let value = Tensor::from_vec(xv.dims(), y)?;
        self.push(value, Op::AddBias { x, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(value, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(value, Op::Mul { a, b })
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.dims() != bv.dims() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", av.dims(), bv.dims())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(av.dims(), data)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Result<Var> {
        let value = unary(self.value(x), |v| v * s);
        self.push(value, Op::Scale { x, s })
    }

    /// Layer normalization over the last dimension with affine `g`, `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: F) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        let d = xv.last_dim();
        if gv.dims() != [d] || bv.dims() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.dims(), gv.dims(), bv.dims()),
            ));
        }
        if eps < F::zero() {
            return Err(Error::Config("layer_norm eps must be non-negative".into()));
        }
        let rows = xv.numel() / d;
        let inv_d = F::one() / F::from_usize(d).unwrap();
        let mut y = vec![F::zero(); xv.numel()];
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let xs = &xv.data()[r * d..(r + 1) * d];
            let mu = xs.iter().fold(F::zero(), |acc, &v| acc + v) * inv_d;
            let var = xs.iter().fold(F::zero(), |acc, &v| acc + (v - mu) * (v - mu)) * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            for j in 0..d {
                y[r * d + j] = (xs[j] - mu) * rs * gv.data()[j] + bv.data()[j];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let value = Tensor::from_vec(xv.dims(), y)?;
        self.push(value, Op::LayerNorm { x, g, b, mean, rstd })
    }

    /// RMS normalization applied independently to each contiguous group of
    /// `group` channels, followed by a per-channel learnable scale.
    pub fn rms_group_norm(&mut self, x: Var, scale: Var, group: usize, eps: F) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        let c = xv.last_dim();
        if group == 0 || c % group != 0 || sv.dims() != [c] {
            return Err(Error::shape(
                "rms_group_norm",
                format!("x {:?}, scale {:?}, group {group}", xv.dims(), sv.dims()),
            ));
        }
        let groups = c / group;
        let rows = xv.numel() / c;
        let inv_g = F::one() / F::from_usize(group).unwrap();
        let mut y = vec![F::zero(); xv.numel()];
        let mut rstd = Vec::with_capacity(rows * groups);
        for r in 0..rows {
            for h in 0..groups {
                let base = r * c + h * group;
                let xs = &xv.data()[base..base + group];
                let ms = xs.iter().fold(F::zero(), |acc, &v| acc + v * v) * inv_g;
                let rs = F::one() / (ms + eps).sqrt();
                for j in 0..group {
                    y[base + j] = xs[j] * rs * sv.data()[h * group + j];
                }
                rstd.push(rs);
            }
        }
        let value = Tensor::from_vec(xv.dims(), y)?;
        self.push(value, Op::RmsGroupNorm { x, scale, group, rstd })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = unary(self.value(x), gelu);
        self.push(value, Op::Gelu { x })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let value = unary(self.value(x), |v| v * sigmoid(v));
        self.push(value, Op::Silu { x })
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let value = unary(self.value(x), softplus);
        self.push(value, Op::Softplus { x })
    }

    /// `-exp(x)`, used to keep SSM state matrices strictly negative.
    pub fn neg_exp(&mut self, x: Var) -> Result<Var> {
        let value = unary(self.value(x), |v| -v.exp());
        self.push(value, Op::NegExp { x })
    }

    /// Row lookup into `table[V, d]`; output dims are `lead ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::shape("embedding", format!("table {:?}", tv.dims())));
        }
        let (vocab, d) = (tv.dims()[0], tv.dims()[1]);
        if lead.iter().product::<usize>() != ids.len() {
            return Err(Error::shape("embedding", format!("{} ids for dims {lead:?}", ids.len())));
        }
        let mut y = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            y.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut dims = lead.to_vec();
        dims.push(d);
        let value = Tensor::from_vec(&dims, y)?;
        self.push(
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// `[B, T, H*dh] -> [B, H, T, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || heads == 0 || xv.dims()[2] % heads != 0 {
            return Err(Error::shape("split_heads", format!("{:?} into {heads} heads", xv.dims())));
        }
        let (b, t, c) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let value = Tensor::from_vec(&[b, heads, t, c / heads], split_heads_raw(xv.data(), b, t, c, heads))?;
        self.push(value, Op::SplitHeads { x, heads })
    }

    /// `[B, H, T, dh] -> [B, T, H*dh]`.
    pub fn merge_heads(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 {
            return Err(Error::shape("merge_heads", format!("{:?}", xv.dims())));
        }
        let d = xv.dims();
        let (b, h, t, dh) = (d[0], d[1], d[2], d[3]);
        let value = Tensor::from_vec(&[b, t, h * dh], merge_heads_raw(xv.data(), b, h, t, dh))?;
        self.push(value, Op::MergeHeads { x })
    }

    /// Rotary position embedding on `[B, H, T, dh]`, positions starting at
    /// `offset`.
    pub fn rotary(&mut self, x: Var, offset: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 || xv.dims()[3] % 2 != 0 {
            return Err(Error::shape("rotary", format!("{:?} (need [B,H,T,even])", xv.dims())));
        }
        let mut y = xv.data().to_vec();
        apply_rotary(&mut y, xv.dims(), offset, false);
        let value = Tensor::from_vec(xv.dims(), y)?;
        self.push(value, Op::Rotary { x, offset })
    }

    /// Softmax of `scale * x` over the causal prefix of each row of the
    /// trailing `[T, T]` block.
    pub fn causal_softmax(&mut self, x: Var, scale: F) -> Result<Var> {
        let xv = self.value(x);
        let r = xv.rank();
        if r < 2 || xv.dims()[r - 1] != xv.dims()[r - 2] {
            return Err(Error::shape("causal_softmax", format!("{:?} is not square", xv.dims())));
        }
        let t = xv.dims()[r - 1];
        let value = Tensor::from_vec(xv.dims(), causal_softmax_raw(xv.data(), t, scale))?;
        self.push(value, Op::CausalSoftmax { x, scale })
    }

    /// Multiplies `[B, H, T, T]` scores by `scale * gamma_h^(n-m)` on and below
    /// the diagonal, zero above.
    pub fn decay_mask(&mut self, x: Var, gammas: &[F], scale: F) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 4 || xv.dims()[1] != gammas.len() || xv.dims()[2] != xv.dims()[3] {
            return Err(Error::shape(
                "decay_mask",
                format!("{:?} with {} decays", xv.dims(), gammas.len()),
            ));
        }
        let table = decay_table(gammas, xv.dims()[2], scale);
        let value = Tensor::from_vec(xv.dims(), apply_decay_table(xv.data(), xv.dims(), &table))?;
        self.push(value, Op::DecayMask { x, table })
    }

    /// Depthwise causal convolution: `y[t, c] = b[c] + sum_j w[c, j] x[t - W + 1 + j, c]`.
    pub fn causal_conv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.rank() != 3 || wv.rank() != 2 || wv.dims()[0] != xv.dims()[2] || bv.dims() != [xv.dims()[2]] {
            return Err(Error::shape(
                "causal_conv",
                format!("x {:?}, w {:?}, b {:?}", xv.dims(), wv.dims(), bv.dims()),
            ));
        }
        let (bsz, t, c) = (xv.dims()[0], xv.dims()[1], xv.dims()[2]);
        let width = wv.dims()[1];
        let mut y = vec![F::zero(); xv.numel()];
        for bi in 0..bsz {
            for ti in 0..t {
                let yo = (bi * t + ti) * c;
                y[yo..yo + c].copy_from_slice(bv.data());
                for j in 0..width {
                    let Some(src_t) = (ti + j + 1).checked_sub(width) else {
                        continue;
                    };
                    let xo = (bi * t + src_t) * c;
                    for ch in 0..c {
                        y[yo + ch] = y[yo + ch] + wv.data()[ch * width + j] * xv.data()[xo + ch];
                    }
                }
            }
        }
        let value = Tensor::from_vec(xv.dims(), y)?;
        self.push(value, Op::CausalConv { x, w, b })
    }

    /// Selective scan `h_t = exp(delta_t A) h_{t-1} + delta_t B_t u_t`,
    /// `y_t = C_t . h_t + D u_t` with `u, delta: [B,T,E]`, `A: [E,N]`,
    /// `B, C: [B,T,N]`, `D: [E]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, bm: Var, cm: Var, d: Var) -> Result<Var> {
        let (y, states) = scan_forward(
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(bm),
            self.value(cm),
            self.value(d),
            true,
        )?;
        let value = Tensor::from_vec(self.value(u).dims(), y)?;
        self.push(
            value,
            Op::SelectiveScan {
                u,
                delta,
                a,
                bm,
                cm,
                d,
                states,
            },
        )
    }

    /// `x[..., start..start + len]`.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if len == 0 || start + len > n {
            return Err(Error::shape("slice_last", format!("[{start}, {}) of {n}", start + len)));
        }
        let mut y = Vec::with_capacity(xv.numel() / n * len);
        for row in xv.data().chunks_exact(n) {
            y.extend_from_slice(&row[start..start + len]);
        }
        let mut dims = xv.dims().to_vec();
        *dims.last_mut().unwrap() = len;
        let value = Tensor::from_vec(&dims, y)?;
        self.push(value, Op::SliceLast { x, start })
    }

    /// Mean negative log-likelihood (nats) over rows whose target is not
    /// `ignore`. Returns a one-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let lv = self.value(logits);
        let v = lv.last_dim();
        let rows = lv.numel() / v;
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut probs = vec![F::zero(); lv.numel()];
        let mut total = F::zero();
        let mut count = 0usize;
        for (r, &tgt) in targets.iter().enumerate() {
            if Some(tgt) == ignore {
                continue;
            }
            if tgt >= v {
                return Err(Error::TargetOutOfRange { id: tgt, vocab: v });
            }
            let row = &lv.data()[r * v..(r + 1) * v];
            let m = row.iter().fold(F::neg_infinity(), |acc, &x| acc.max(x));
            let p = &mut probs[r * v..(r + 1) * v];
            let mut sum = F::zero();
            for (pj, &x) in p.iter_mut().zip(row) {
                *pj = (x - m).exp();
                sum = sum + *pj;
            }
            let inv = F::one() / sum;
            for pj in p.iter_mut() {
                *pj = *pj * inv;
            }
            total = total + (m + sum.ln() - row[tgt]);
            count += 1;
        }
        let loss = if count > 0 {
            total / F::from_usize(count).unwrap()
        } else {
            F::zero()
        };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().fold(F::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum { x })
    }
}
