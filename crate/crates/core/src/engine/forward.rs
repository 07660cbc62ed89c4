// SPDX-License-Identifier: MIT OR Apache-2.0

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};
use core::time::Duration;

use serde::{Deserialize, Serialize};

use super::hooks::{Component, Hook, HookSite};
use super::spec::{ActivationKind, ModelSpec, NormKind, PositionalKind};
use super::tokenizer::ByteLevelBpe;
use super::weights::{WeightDigest, WeightStore};
use crate::tensor::linear;
use crate::{Error, Result, Tensor};

/// Ordered token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        Self(ids)
    }
}

/// Activations captured inside one block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    /// `[position × d_model]`
    pub resid_pre: Tensor,
    /// `[head × query × key]`
    pub attn_pattern: Tensor,
    pub attn_out: Tensor,
    pub mlp_out: Tensor,
    pub resid_post: Tensor,
}

impl LayerTrace {
    pub fn get(&self, component: Component) -> &Tensor {
        match component {
            Component::ResidPre => &self.resid_pre,
            Component::AttnPattern => &self.attn_pattern,
            Component::AttnOut => &self.attn_out,
            Component::MlpOut => &self.mlp_out,
            Component::ResidPost => &self.resid_post,
        }
    }
}

/// Everything one forward pass computed, after any interventions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub tokens: TokenSequence,
    pub layers: Vec<LayerTrace>,
    /// `[position × vocab]`
    pub logits: Tensor,
}

impl ActivationTrace {
    pub fn n_positions(&self) -> usize {
        self.tokens.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn site(&self, site: &HookSite) -> Option<&Tensor> {
        self.layers.get(site.layer).map(|l| l.get(site.component))
    }

    pub fn final_logits(&self) -> &[f32] {
        self.logits.row(self.tokens.len() - 1)
    }
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub trace: ActivationTrace,
    /// Wall-clock time, filled in by callers that have a clock.
    pub elapsed: Option<Duration>,
    /// One description per applied hook, in application order.
    pub hook_manifest: Vec<String>,
}

/// Immutable model: spec, validated weights and an optional tokenizer.
#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    weights: WeightStore,
    digest: WeightDigest,
    tokenizer: Option<Arc<ByteLevelBpe>>,
    forward_calls: AtomicU64,
}

impl Model {
    pub fn new(spec: ModelSpec, weights: WeightStore) -> Result<Self> {
        spec.validate()?;
        let digest = weights.digest();
        Ok(Self {
            spec,
            weights,
            digest,
            tokenizer: None,
            forward_calls: AtomicU64::new(0),
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: ByteLevelBpe) -> Self {
        self.tokenizer = Some(Arc::new(tokenizer));
        self
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &WeightStore {
        &self.weights
    }

    /// Digest recorded when the model was built.
    pub fn digest(&self) -> WeightDigest {
        self.digest
    }

    pub fn tokenizer(&self) -> Option<&ByteLevelBpe> {
        self.tokenizer.as_deref()
    }

    /// Number of forward passes run so far.
    pub fn forward_calls(&self) -> u64 {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let tok = self.tokenizer().ok_or(Error::TokenizerUnavailable)?;
        tok.encode(text).map(TokenSequence)
    }

    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        self.tokenizer().ok_or(Error::TokenizerUnavailable)?.decode(tokens)
    }

    pub fn validate_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("token sequence".into()));
        }
        if tokens.len() > self.spec.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.spec.max_seq_len,
            });
        }
        if let Some(&id) = tokens.ids().iter().find(|&&id| id as usize >= self.spec.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: self.spec.vocab_size,
            });
        }
        Ok(())
    }

    /// Runs the model on `tokens`, applying each hook at its site, and
    /// captures every intermediate activation.
    pub fn forward(&self, tokens: &TokenSequence, hooks: &[&dyn Hook]) -> Result<RunRecord> {
        self.validate_tokens(tokens)?;
        for hook in hooks {
            hook.site().validate(&self.spec, Some(tokens.len()))?;
        }
        self.forward_calls.fetch_add(1, Ordering::Relaxed);

        let spec = &self.spec;
        let w = &self.weights;
        let n = tokens.len();
        let d = spec.d_model;

        let mut x = vec![0.0f32; n * d];
        let embed = w.expect("embed");
        for (p, &id) in tokens.ids().iter().enumerate() {
            x[p * d..(p + 1) * d].copy_from_slice(embed.row(id as usize));
        }
        if spec.positional_kind == PositionalKind::LearnedAbsolute {
            let pos = w.expect("pos_embed");
            for p in 0..n {
                for (xi, &pi) in x[p * d..(p + 1) * d].iter_mut().zip(pos.row(p)) {
                    *xi += pi;
                }
            }
        }

        let mut manifest = Vec::new();
        let mut layers = Vec::with_capacity(spec.n_layers);
        for layer in 0..spec.n_layers {
            let run_hooks = |component: Component, t: &mut Tensor, manifest: &mut Vec<String>| -> Result<()> {
                for hook in hooks {
                    let site = hook.site();
                    if site.layer == layer && site.component == component {
                        hook.apply(t)?;
                        manifest.push(hook.describe());
                    }
                }
                Ok(())
            };
            let prefix = format!("blocks.{layer}");

            let mut resid_pre = Tensor::new(vec![n, d], x)?;
            run_hooks(Component::ResidPre, &mut resid_pre, &mut manifest)?;

            let h = self.norm(resid_pre.data(), n, &format!("{prefix}.ln1"));
            let (mut pattern, v) = self.attention_pattern(&h, n, &prefix)?;
            let before = pattern.clone();
            run_hooks(Component::AttnPattern, &mut pattern, &mut manifest)?;
            if pattern != before {
                renormalize_pattern(&mut pattern, &before);
            }

            let z = mix_values(&pattern, &v, n, spec.n_heads, spec.d_head());
            let attn_out_data = linear(
                &z,
                n,
                d,
                w.expect(&format!("{prefix}.attn.W_O")).data(),
                d,
                Some(w.expect(&format!("{prefix}.attn.b_O")).data()),
            );
            let mut attn_out = Tensor::new(vec![n, d], attn_out_data)?;
            run_hooks(Component::AttnOut, &mut attn_out, &mut manifest)?;

            let mut mid = resid_pre.data().to_vec();
            add_assign(&mut mid, attn_out.data());

            let h2 = self.norm(&mid, n, &format!("{prefix}.ln2"));
            let mut hidden = linear(
                &h2,
                n,
                d,
                w.expect(&format!("{prefix}.mlp.W_in")).data(),
                spec.d_mlp,
                Some(w.expect(&format!("{prefix}.mlp.b_in")).data()),
            );
            for v in hidden.iter_mut() {
                *v = activate(spec.activation_kind, *v);
            }
            let mlp_data = linear(
                &hidden,
                n,
                spec.d_mlp,
                w.expect(&format!("{prefix}.mlp.W_out")).data(),
                d,
                Some(w.expect(&format!("{prefix}.mlp.b_out")).data()),
            );
            let mut mlp_out = Tensor::new(vec![n, d], mlp_data)?;
            run_hooks(Component::MlpOut, &mut mlp_out, &mut manifest)?;

            add_assign(&mut mid, mlp_out.data());
            let mut resid_post = Tensor::new(vec![n, d], mid)?;
            run_hooks(Component::ResidPost, &mut resid_post, &mut manifest)?;

            x = resid_post.data().to_vec();
            layers.push(LayerTrace {
                resid_pre,
                attn_pattern: pattern,
                attn_out,
                mlp_out,
                resid_post,
            });
        }

        let fin = self.norm(&x, n, "ln_f");
        let logits = linear(&fin, n, d, w.expect("unembed").data(), spec.vocab_size, None);
        let logits = Tensor::new(vec![n, spec.vocab_size], logits)?;

        Ok(RunRecord {
            trace: ActivationTrace {
                tokens: tokens.clone(),
                layers,
                logits,
            },
            elapsed: None,
            hook_manifest: manifest,
        })
    }

    fn norm(&self, x: &[f32], n: usize, prefix: &str) -> Vec<f32> {
        let d = self.spec.d_model;
        let eps = self.spec.norm_epsilon;
        let weight = self.weights.expect(&format!("{prefix}.w")).data();
        let bias = match self.spec.norm_kind {
            NormKind::LayerNorm => Some(self.weights.expect(&format!("{prefix}.b")).data()),
            NormKind::RmsNorm => None,
        };
        let mut out = vec![0.0f32; n * d];
        for p in 0..n {
            let row = &x[p * d..(p + 1) * d];
            let o = &mut out[p * d..(p + 1) * d];
            let (centre, scale) = match self.spec.norm_kind {
                NormKind::LayerNorm => {
                    let mean = row.iter().sum::<f32>() / d as f32;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
                    (mean, var)
                }
                NormKind::RmsNorm => (0.0, row.iter().map(|&v| v * v).sum::<f32>() / d as f32),
            };
            // A zero vector (after centring) normalizes to zero for any epsilon.
            let zero = row.iter().all(|&v| v - centre == 0.0);
            let inv = if zero { 0.0 } else { 1.0 / libm::sqrtf(scale + eps) };
            for i in 0..d {
                let normed = (row[i] - centre) * inv;
                o[i] = normed * weight[i] + bias.map_or(0.0, |b| b[i]);
            }
        }
        out
    }

    /// Causal softmax attention pattern `[head × q × k]` plus the value matrix.
    fn attention_pattern(&self, h: &[f32], n: usize, prefix: &str) -> Result<(Tensor, Vec<f32>)> {
        let spec = &self.spec;
        let d = spec.d_model;
        let dh = spec.d_head();
        let w = &self.weights;
        let proj = |m: &str, b: &str| {
            linear(
                h,
                n,
                d,
                w.expect(&format!("{prefix}.attn.{m}")).data(),
                d,
                Some(w.expect(&format!("{prefix}.attn.{b}")).data()),
            )
        };
        let q = proj("W_Q", "b_Q");
        let k = proj("W_K", "b_K");
        let v = proj("W_V", "b_V");
        let scale = 1.0 / libm::sqrtf(dh as f32);
        let mut pattern = vec![0.0f32; spec.n_heads * n * n];
        let mut scores = vec![0.0f32; n];
        for head in 0..spec.n_heads {
            let off = head * dh;
            for qi in 0..n {
                let qrow = &q[qi * d + off..qi * d + off + dh];
                for ki in 0..=qi {
                    let krow = &k[ki * d + off..ki * d + off + dh];
                    scores[ki] = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let row = &mut pattern[(head * n + qi) * n..(head * n + qi + 1) * n];
                softmax_into(&scores[..=qi], &mut row[..=qi]);
            }
        }
        Ok((Tensor::new(vec![spec.n_heads, n, n], pattern)?, v))
    }
}

fn add_assign(acc: &mut [f32], other: &[f32]) {
    for (a, &b) in acc.iter_mut().zip(other) {
        *a += b;
    }
}

fn softmax_into(scores: &[f32], out: &mut [f32]) {
    let max = scores.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = libm::expf(s - max);
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `z[p, head cols] = Σ_k pattern[head, p, k] · v[k, head cols]`
fn mix_values(pattern: &Tensor, v: &[f32], n: usize, n_heads: usize, dh: usize) -> Vec<f32> {
    let d = n_heads * dh;
    let mut z = vec![0.0f32; n * d];
    let p = pattern.data();
    for head in 0..n_heads {
        let off = head * dh;
        for qi in 0..n {
            let zrow = &mut z[qi * d + off..qi * d + off + dh];
            for ki in 0..n {
                let a = p[(head * n + qi) * n + ki];
                if a == 0.0 {
                    continue;
                }
                for (zv, &vv) in zrow.iter_mut().zip(&v[ki * d + off..ki * d + off + dh]) {
                    *zv += a * vv;
                }
            }
        }
    }
    z
}

/// Restores the probability-distribution invariant on rows a hook changed:
/// causal mask re-applied, negatives clamped to zero, rows rescaled to sum to
/// one. A row left with no mass becomes uniform over its valid keys.
fn renormalize_pattern(pattern: &mut Tensor, before: &Tensor) {
    let n = pattern.row_len();
    let rows = pattern.n_rows();
    for r in 0..rows {
        if pattern.row(r) == before.row(r) {
            continue;
        }
        let qi = r % n;
        let row = pattern.row_mut(r);
        for (k, v) in row.iter_mut().enumerate() {
            if k > qi || !v.is_finite() || *v < 0.0 {
                *v = 0.0;
            }
        }
        let sum: f32 = row.iter().sum();
        if sum > 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        } else {
            for v in row[..=qi].iter_mut() {
                *v = 1.0 / (qi + 1) as f32;
            }
        }
    }
}

pub(crate) fn activate(kind: ActivationKind, x: f32) -> f32 {
    match kind {
        ActivationKind::GeluTanh => {
            let c = 0.797_884_6_f32; // sqrt(2/pi)
            0.5 * x * (1.0 + libm::tanhf(c * (x + 0.044_715 * x * x * x)))
        }
        ActivationKind::GeluExact => 0.5 * x * (1.0 + libm::erff(x * core::f32::consts::FRAC_1_SQRT_2)),
        ActivationKind::Relu => x.max(0.0),
    }
}
