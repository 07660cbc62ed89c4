// SPDX-License-Identifier: MIT OR Apache-2.0

//! Test oracles: a deliberately naive `f64` transformer written straight from
//! the equations, independent of the engine's kernels.

#![allow(dead_code)]

use nmri_core::engine::{ActivationKind, NormKind, PositionalKind};
use nmri_core::{Model, TokenSequence};

pub type Mat = Vec<Vec<f64>>;

fn tensor(model: &Model, name: &str) -> Vec<f64> {
    model.weights().get(name).unwrap_or_else(|| panic!("{name}")).data().iter().map(|&v| v as f64).collect()
}

fn matrix(model: &Model, name: &str) -> Mat {
    let t = model.weights().get(name).unwrap();
    let cols = t.shape()[1];
    t.data().chunks(cols).map(|r| r.iter().map(|&v| v as f64).collect()).collect()
}

fn matvec(x: &[f64], w: &Mat, b: Option<&[f64]>) -> Vec<f64> {
    let out_dim = w[0].len();
    (0..out_dim)
        .map(|j| {
            let mut s = b.map_or(0.0, |b| b[j]);
            for (i, xi) in x.iter().enumerate() {
                s += xi * w[i][j];
            }
            s
        })
        .collect()
}

fn norm(model: &Model, x: &[f64], prefix: &str) -> Vec<f64> {
    let spec = model.spec();
    let w = tensor(model, &format!("{prefix}.w"));
    let d = x.len() as f64;
    let eps = spec.norm_epsilon as f64;
    match spec.norm_kind {
        NormKind::LayerNorm => {
            let b = tensor(model, &format!("{prefix}.b"));
            let mean = x.iter().sum::<f64>() / d;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            if var == 0.0 {
                return b;
            }
            x.iter().enumerate().map(|(i, v)| (v - mean) / (var + eps).sqrt() * w[i] + b[i]).collect()
        }
        NormKind::RmsNorm => {
            let ms = x.iter().map(|v| v * v).sum::<f64>() / d;
            if ms == 0.0 {
                return vec![0.0; x.len()];
            }
            x.iter().enumerate().map(|(i, v)| v / (ms + eps).sqrt() * w[i]).collect()
        }
    }
}

fn act(kind: ActivationKind, x: f64) -> f64 {
    match kind {
        ActivationKind::GeluTanh => {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        }
        ActivationKind::GeluExact => 0.5 * x * (1.0 + libm_erf(x / std::f64::consts::SQRT_2)),
        ActivationKind::Relu => x.max(0.0),
    }
}

/// Abramowitz–Stegun 7.1.26 is too coarse; integrate erf numerically instead.
fn libm_erf(x: f64) -> f64 {
    let n = 2000;
    let h = x / n as f64;
    let f = |t: f64| (-t * t).exp();
    let mut s = f(0.0) + f(x);
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0 * 2.0 / std::f64::consts::PI.sqrt()
}

/// Component intervention for the reference: called with
/// (layer, "attn_out" | "mlp_out" | "resid_post", activations by position).
pub type RefHook<'a> = &'a dyn Fn(usize, &str, &mut Mat);

pub fn reference_logits(model: &Model, tokens: &TokenSequence, hook: Option<RefHook>) -> Mat {
    let spec = model.spec();
    let n = tokens.len();
    let d = spec.d_model;
    let dh = spec.d_head();
    let embed = matrix(model, "embed");
    let mut x: Mat = tokens.ids().iter().map(|&t| embed[t as usize].clone()).collect();
    if spec.positional_kind == PositionalKind::LearnedAbsolute {
        let pos = matrix(model, "pos_embed");
        for p in 0..n {
            for i in 0..d {
                x[p][i] += pos[p][i];
            }
        }
    }
    for l in 0..spec.n_layers {
        let pre = format!("blocks.{l}");
        let h: Mat = x.iter().map(|r| norm(model, r, &format!("{pre}.ln1"))).collect();
        let wq = matrix(model, &format!("{pre}.attn.W_Q"));
        let wk = matrix(model, &format!("{pre}.attn.W_K"));
        let wv = matrix(model, &format!("{pre}.attn.W_V"));
        let wo = matrix(model, &format!("{pre}.attn.W_O"));
        let (bq, bk, bv, bo) = (
            tensor(model, &format!("{pre}.attn.b_Q")),
            tensor(model, &format!("{pre}.attn.b_K")),
            tensor(model, &format!("{pre}.attn.b_V")),
            tensor(model, &format!("{pre}.attn.b_O")),
        );
        let q: Mat = h.iter().map(|r| matvec(r, &wq, Some(&bq))).collect();
        let k: Mat = h.iter().map(|r| matvec(r, &wk, Some(&bk))).collect();
        let v: Mat = h.iter().map(|r| matvec(r, &wv, Some(&bv))).collect();
        let mut z = vec![vec![0.0; d]; n];
        for head in 0..spec.n_heads {
            let cols = head * dh..(head + 1) * dh;
            for qi in 0..n {
                let scores: Vec<f64> = (0..=qi)
                    .map(|ki| cols.clone().map(|c| q[qi][c] * k[ki][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let tot: f64 = e.iter().sum();
                for ki in 0..=qi {
                    for c in cols.clone() {
                        z[qi][c] += e[ki] / tot * v[ki][c];
                    }
                }
            }
        }
        let mut attn_out: Mat = z.iter().map(|r| matvec(r, &wo, Some(&bo))).collect();
        if let Some(f) = hook {
            f(l, "attn_out", &mut attn_out);
        }
        for p in 0..n {
            for i in 0..d {
                x[p][i] += attn_out[p][i];
            }
        }
        let win = matrix(model, &format!("{pre}.mlp.W_in"));
        let wout = matrix(model, &format!("{pre}.mlp.W_out"));
        let bin = tensor(model, &format!("{pre}.mlp.b_in"));
        let bout = tensor(model, &format!("{pre}.mlp.b_out"));
        let mut mlp_out: Mat = x
            .iter()
            .map(|r| {
                let h2 = norm(model, r, &format!("{pre}.ln2"));
                let hidden: Vec<f64> = matvec(&h2, &win, Some(&bin)).into_iter().map(|u| act(spec.activation_kind, u)).collect();
                matvec(&hidden, &wout, Some(&bout))
            })
            .collect();
        if let Some(f) = hook {
            f(l, "mlp_out", &mut mlp_out);
        }
        for p in 0..n {
            for i in 0..d {
                x[p][i] += mlp_out[p][i];
            }
        }
        if let Some(f) = hook {
            f(l, "resid_post", &mut x);
        }
    }
    let unembed = matrix(model, "unembed");
    x.iter().map(|r| matvec(&norm(model, r, "ln_f"), &unembed, None)).collect()
}

pub fn max_abs_diff(engine: &nmri_core::Tensor, reference: &Mat) -> f64 {
    let mut worst = 0.0f64;
    for (p, row) in reference.iter().enumerate() {
        for (a, b) in engine.row(p).iter().zip(row) {
            worst = worst.max((*a as f64 - b).abs());
        }
    }
    worst
}

/// Softmax probability of `token` from a reference logits row.
pub fn reference_prob(row: &[f64], token: u32) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tot: f64 = row.iter().map(|v| (v - m).exp()).sum();
    (row[token as usize] - m).exp() / tot
}
