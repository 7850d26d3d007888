//! Conditional velocity network: a two-hidden-layer SiLU MLP over
//! `[noisy trajectory | time embedding | context | intent embedding]`,
//! with an intent embedding table and the intent classifier stored in the
//! same flat parameter vector.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hash::Fnv1a;
use crate::intent::{IntentClassifier, CLASSIFIER_PARAMS, CONTEXT_DIM, NUM_INTENTS};
use crate::scalar::{lit, std_normal, Scalar};

/// Fixed shape of the policy. Any change alters [`Architecture::digest`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub traj_dim: usize,
    pub time_dim: usize,
    pub context_dim: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    /// Metres per unit of flow state.
    pub action_scale: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            traj_dim: 20,
            time_dim: 8,
            context_dim: CONTEXT_DIM,
            embed_dim: 8,
            hidden: 128,
            action_scale: 10.0,
        }
    }
}

/// Embedding rows: one per intent plus the unconditional placeholder.
pub const EMBED_ROWS: usize = NUM_INTENTS + 1;

/// Offsets of each tensor in the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Offsets {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub embed: usize,
    pub classifier: usize,
    pub total: usize,
}

impl Architecture {
    pub fn input_dim(&self) -> usize {
        self.traj_dim + self.time_dim + self.context_dim + self.embed_dim
    }

    pub fn offsets(&self) -> Offsets {
        let (i, h, o) = (self.input_dim(), self.hidden, self.traj_dim);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        let embed = b3 + o;
        let classifier = embed + EMBED_ROWS * self.embed_dim;
        Offsets {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            embed,
            classifier,
            total: classifier + CLASSIFIER_PARAMS,
        }
    }

    pub fn param_count(&self) -> usize {
        self.offsets().total
    }

    /// Range of the parameters that belong to the velocity network and the
    /// embedding table (everything except the classifier).
    pub fn flow_range(&self) -> std::ops::Range<usize> {
        0..self.offsets().classifier
    }

    pub fn digest(&self) -> u64 {
        let mut h = Fnv1a::default();
        h.update(b"silu-mlp2/v1");
        for v in [self.traj_dim, self.time_dim, self.context_dim, self.embed_dim, self.hidden, EMBED_ROWS] {
            h.update(&(v as u64).to_le_bytes());
        }
        h.update(&self.action_scale.to_le_bytes());
        h.finish()
    }
}

/// Sinusoidal time features `[sin(pi 2^k t), cos(pi 2^k t)]`.
pub fn time_embedding<S: Scalar>(t: S, dim: usize, out: &mut [S]) {
    for k in 0..dim / 2 {
        let freq = S::PI() * lit::<S>((1u64 << k) as f64);
        out[2 * k] = (freq * t).sin();
        out[2 * k + 1] = (freq * t).cos();
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[inline]
fn silu<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

#[inline]
fn silu_grad<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    pub code: usize,
    input: Vec<S>,
    pre1: Vec<S>,
    h1: Vec<S>,
    pre2: Vec<S>,
    h2: Vec<S>,
}

/// All learnable state of the policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams<S> {
    arch: Architecture,
    data: Vec<S>,
}

fn affine<S: Scalar>(w: &[S], b: &[S], x: &[S], out: &mut [S]) {
    let n_in = x.len();
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * n_in..(j + 1) * n_in];
        let mut acc = b[j];
        for (wi, xi) in row.iter().zip(x) {
            acc += *wi * *xi;
        }
        *o = acc;
    }
}

impl<S: Scalar> PolicyParams<S> {
    /// Seeded initialization: He-normal hidden layers, a small output layer,
    /// unit-normal embeddings and a zero classifier.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let off = arch.offsets();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![S::zero(); off.total];
        let inp = arch.input_dim();
        let he1: S = lit((2.0 / inp as f64).sqrt());
        let he2: S = lit((2.0 / arch.hidden as f64).sqrt());
        let out_scale: S = lit(0.1 / (arch.hidden as f64).sqrt());
        for v in &mut data[off.w1..off.b1] {
            *v = std_normal::<S, _>(&mut rng) * he1;
        }
        for v in &mut data[off.w2..off.b2] {
            *v = std_normal::<S, _>(&mut rng) * he2;
        }
        for v in &mut data[off.w3..off.b3] {
            *v = std_normal::<S, _>(&mut rng) * out_scale;
        }
        for v in &mut data[off.embed..off.classifier] {
            *v = std_normal::<S, _>(&mut rng);
        }
        PolicyParams { arch, data }
    }

    pub fn from_flat(arch: Architecture, data: Vec<S>) -> Option<Self> {
        (data.len() == arch.param_count()).then_some(PolicyParams { arch, data })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Vec<S> {
        vec![S::zero(); self.data.len()]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn embedding_row(&self, code: usize) -> &[S] {
        let off = self.arch.offsets().embed + code * self.arch.embed_dim;
        &self.data[off..off + self.arch.embed_dim]
    }

    pub fn embedding_row_mut(&mut self, code: usize) -> &mut [S] {
        let off = self.arch.offsets().embed + code * self.arch.embed_dim;
        let d = self.arch.embed_dim;
        &mut self.data[off..off + d]
    }

    /// Output-layer weights and biases.
    pub fn output_layer_mut(&mut self) -> &mut [S] {
        let off = self.arch.offsets();
        &mut self.data[off.w3..off.embed]
    }

    pub fn classifier(&self) -> IntentClassifier<S> {
        let off = self.arch.offsets().classifier;
        IntentClassifier::from_flat(&self.data[off..off + CLASSIFIER_PARAMS])
    }

    pub fn set_classifier(&mut self, clf: &IntentClassifier<S>) {
        let off = self.arch.offsets().classifier;
        self.data[off..off + CLASSIFIER_PARAMS].copy_from_slice(&clf.to_flat());
    }

    fn build_input(&self, z: &[S], t: S, context: &[S], code: usize) -> Vec<S> {
        let a = &self.arch;
        let mut input = vec![S::zero(); a.input_dim()];
        input[..a.traj_dim].copy_from_slice(z);
        time_embedding(t, a.time_dim, &mut input[a.traj_dim..a.traj_dim + a.time_dim]);
        let c0 = a.traj_dim + a.time_dim;
        input[c0..c0 + a.context_dim].copy_from_slice(context);
        input[c0 + a.context_dim..].copy_from_slice(self.embedding_row(code));
        input
    }

    /// Velocity at flow state `z` (normalized units), time `t`, for intent
    /// code `code` (`0..8`, or `8` for unconditional).
    pub fn velocity(&self, z: &[S], t: S, context: &[S], code: usize) -> Vec<S> {
        self.forward(z, t, context, code).0
    }

    pub fn forward(&self, z: &[S], t: S, context: &[S], code: usize) -> (Vec<S>, ForwardCache<S>) {
        let a = &self.arch;
        let off = a.offsets();
        let d = &self.data;
        let input = self.build_input(z, t, context, code);
        let mut pre1 = vec![S::zero(); a.hidden];
        affine(&d[off.w1..off.b1], &d[off.b1..off.w2], &input, &mut pre1);
        let h1: Vec<S> = pre1.iter().map(|x| silu(*x)).collect();
        let mut pre2 = vec![S::zero(); a.hidden];
        affine(&d[off.w2..off.b2], &d[off.b2..off.w3], &h1, &mut pre2);
        let h2: Vec<S> = pre2.iter().map(|x| silu(*x)).collect();
        let mut out = vec![S::zero(); a.traj_dim];
        affine(&d[off.w3..off.b3], &d[off.b3..off.embed], &h2, &mut out);
        let cache = ForwardCache {
            code,
            input,
            pre1,
            h1,
            pre2,
            h2,
        };
        (out, cache)
    }

    /// Accumulates `d(dout . v)/d(params)` into `grad`.
    pub fn backward(&self, cache: &ForwardCache<S>, dout: &[S], grad: &mut [S]) {
        let a = &self.arch;
        let off = a.offsets();
        let d = &self.data;
        let (n_in, h) = (a.input_dim(), a.hidden);

        // Output layer.
        let mut dh2 = vec![S::zero(); h];
        for (o, &g) in dout.iter().enumerate() {
            if g == S::zero() {
                continue;
            }
            grad[off.b3 + o] += g;
            let row = off.w3 + o * h;
            for j in 0..h {
                grad[row + j] += g * cache.h2[j];
                dh2[j] += g * d[row + j];
            }
        }
        // Second hidden layer.
        let mut dh1 = vec![S::zero(); h];
        for j in 0..h {
            let g = dh2[j] * silu_grad(cache.pre2[j]);
            grad[off.b2 + j] += g;
            let row = off.w2 + j * h;
            for i in 0..h {
                grad[row + i] += g * cache.h1[i];
                dh1[i] += g * d[row + i];
            }
        }
        // First hidden layer; only the embedding part of the input is learnable.
        let e0 = n_in - a.embed_dim;
        let mut demb = vec![S::zero(); a.embed_dim];
        for j in 0..h {
            let g = dh1[j] * silu_grad(cache.pre1[j]);
            grad[off.b1 + j] += g;
            let row = off.w1 + j * n_in;
            for i in 0..n_in {
                grad[row + i] += g * cache.input[i];
            }
            for (k, de) in demb.iter_mut().enumerate() {
                *de += g * d[row + e0 + k];
            }
        }
        let erow = off.embed + cache.code * a.embed_dim;
        for (k, de) in demb.into_iter().enumerate() {
            grad[erow + k] += de;
        }
    }

    /// Forward-mode directional derivative of the velocity along `dz`.
    pub fn velocity_jvp(&self, z: &[S], t: S, context: &[S], code: usize, dz: &[S]) -> (Vec<S>, Vec<S>) {
        let a = &self.arch;
        let off = a.offsets();
        let d = &self.data;
        let input = self.build_input(z, t, context, code);
        let mut tangent = vec![S::zero(); a.input_dim()];
        tangent[..a.traj_dim].copy_from_slice(dz);

        let layer = |w: &[S], b: &[S], x: &[S], dx: &[S], n_out: usize| {
            let mut pre = vec![S::zero(); n_out];
            let mut dpre = vec![S::zero(); n_out];
            affine(w, b, x, &mut pre);
            affine(w, &vec![S::zero(); n_out], dx, &mut dpre);
            (pre, dpre)
        };
        let (pre1, dpre1) = layer(&d[off.w1..off.b1], &d[off.b1..off.w2], &input, &tangent, a.hidden);
        let h1: Vec<S> = pre1.iter().map(|x| silu(*x)).collect();
        let dh1: Vec<S> = pre1.iter().zip(&dpre1).map(|(x, dx)| silu_grad(*x) * *dx).collect();
        let (pre2, dpre2) = layer(&d[off.w2..off.b2], &d[off.b2..off.w3], &h1, &dh1, a.hidden);
        let h2: Vec<S> = pre2.iter().map(|x| silu(*x)).collect();
        let dh2: Vec<S> = pre2.iter().zip(&dpre2).map(|(x, dx)| silu_grad(*x) * *dx).collect();
        layer(&d[off.w3..off.b3], &d[off.b3..off.embed], &h2, &dh2, a.traj_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_arch() -> Architecture {
        Architecture {
            hidden: 12,
            ..Architecture::default()
        }
    }

    fn random_inputs(rng: &mut ChaCha8Rng) -> (Vec<f64>, f64, Vec<f64>) {
        let z = (0..20).map(|_| rng.random_range(-1.5..1.5)).collect();
        let ctx = (0..CONTEXT_DIM).map(|_| rng.random_range(0.0..1.0)).collect();
        (z, rng.random_range(0.0..1.0), ctx)
    }

    #[test]
    fn default_parameter_count() {
        let a = Architecture::default();
        assert_eq!(a.input_dim(), 52);
        assert_eq!(a.param_count(), 52 * 128 + 128 + 128 * 128 + 128 + 128 * 20 + 20 + 9 * 8 + CLASSIFIER_PARAMS);
        assert_ne!(a.digest(), Architecture { hidden: 64, ..a }.digest());
    }

    #[test]
    fn zero_output_layer_gives_zero_velocity() {
        let mut p = PolicyParams::<f64>::init(small_arch(), 1);
        p.output_layer_mut().fill(0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for code in 0..EMBED_ROWS {
            let (z, t, ctx) = random_inputs(&mut rng);
            assert!(p.velocity(&z, t, &ctx, code).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn intent_code_changes_output() {
        let p = PolicyParams::<f64>::init(small_arch(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (z, t, ctx) = random_inputs(&mut rng);
        let v0 = p.velocity(&z, t, &ctx, 0);
        for code in 1..EMBED_ROWS {
            assert_ne!(p.velocity(&z, t, &ctx, code), v0);
        }
    }

    #[test]
    fn jvp_matches_central_differences() {
        let p = PolicyParams::<f64>::init(small_arch(), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = 1e-5;
        for code in [0, 5, 8] {
            let (z, t, ctx) = random_inputs(&mut rng);
            let dir: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
            let (_, jv) = p.velocity_jvp(&z, t, &ctx, code, &dir);
            let shift = |s: f64| z.iter().zip(&dir).map(|(a, b)| a + s * b).collect::<Vec<_>>();
            let plus = p.velocity(&shift(h), t, &ctx, code);
            let minus = p.velocity(&shift(-h), t, &ctx, code);
            for k in 0..20 {
                let fd = (plus[k] - minus[k]) / (2.0 * h);
                assert!((fd - jv[k]).abs() <= 1e-4 * fd.abs().max(1e-2), "{fd} vs {}", jv[k]);
            }
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let arch = small_arch();
        let p = PolicyParams::<f64>::init(arch, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (z, t, ctx) = random_inputs(&mut rng);
        let code = 3;
        let w: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |q: &PolicyParams<f64>| q.velocity(&z, t, &ctx, code).iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
        let (_, cache) = p.forward(&z, t, &ctx, code);
        let mut grad = p.zeros_like();
        p.backward(&cache, &w, &mut grad);
        let h = 1e-5;
        for idx in (0..arch.flow_range().end).step_by(7) {
            let mut plus = p.clone();
            plus.as_mut_slice()[idx] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[idx] -= h;
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-4 * fd.abs().max(1e-3), "param {idx}: {fd} vs {}", grad[idx]);
        }
        // Only the selected embedding row receives gradient.
        let off = arch.offsets().embed;
        for row in (0..EMBED_ROWS).filter(|r| *r != code) {
            assert!(grad[off + row * 8..off + row * 8 + 8].iter().all(|g| *g == 0.0));
        }
    }
}
