//! Guided stochastic samplers and exact path-likelihood replay.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::PolicyParams;
use crate::error::{Error, Result};
use crate::geometry::{Trajectory, DT};
use crate::intent::{Intent, UNCOND_CODE};
use crate::scalar::{lit, std_normal, Scalar};

/// What a rollout is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Intent(Intent),
    Unconditional,
}

impl Conditioning {
    pub fn code(self) -> usize {
        match self {
            Conditioning::Intent(i) => i.code(),
            Conditioning::Unconditional => UNCOND_CODE,
        }
    }

    pub fn intent(self) -> Option<Intent> {
        match self {
            Conditioning::Intent(i) => Some(i),
            Conditioning::Unconditional => None,
        }
    }
}

impl From<Intent> for Conditioning {
    fn from(i: Intent) -> Self {
        Conditioning::Intent(i)
    }
}

/// Per-step Gaussian transition kernel.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdeKernel {
    /// `z + v dt` plus noise `eta sqrt(dt) (1 - t)`.
    #[default]
    EulerMaruyama,
    /// Re-noises the predicted endpoint at the next time, mixing predicted and
    /// fresh noise at angle `eta pi / 2`, so every state keeps the interpolant's
    /// noise scale.
    CoefficientPreserving,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub cfg_scale: f64,
    pub noise_level: f64,
    pub n_steps: usize,
    #[serde(default)]
    pub kernel: SdeKernel,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            cfg_scale: 2.0,
            noise_level: 0.5,
            n_steps: 16,
            kernel: SdeKernel::EulerMaruyama,
        }
    }
}

impl SamplerConfig {
    pub fn deterministic(self) -> Self {
        SamplerConfig {
            noise_level: 0.0,
            ..self
        }
    }

    pub fn with_cfg(self, cfg_scale: f64) -> Self {
        SamplerConfig { cfg_scale, ..self }
    }
}

/// One realized sampler trajectory with everything needed for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath<S> {
    pub trajectory: Trajectory<S>,
    /// Flow states `z_0 ..= z_N` in normalized units.
    pub states: Vec<Vec<S>>,
    pub context: Vec<S>,
    pub conditioning: Conditioning,
    pub cfg_scale: S,
    pub noise_level: S,
    pub kernel: SdeKernel,
    /// `sigma_k` for every step; the last one is zero.
    pub step_stds: Vec<S>,
    pub path_logprob: S,
}

impl<S: Scalar> SampledPath<S> {
    pub fn n_steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }
}

fn step_time<S: Scalar>(k: usize, n: usize) -> S {
    lit::<S>(k as f64) / lit::<S>(n as f64)
}

/// Euler-Maruyama standard deviation; zero on the final step.
pub fn step_std<S: Scalar>(noise_level: S, k: usize, n: usize) -> S {
    if k + 1 >= n {
        return S::zero();
    }
    let dt = S::one() / lit::<S>(n as f64);
    noise_level * dt.sqrt() * (S::one() - step_time::<S>(k, n))
}

/// Affine step `mean = a z + b v` with standard deviation `sigma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepCoeffs<S> {
    pub a: S,
    pub b: S,
    pub sigma: S,
}

/// Step coefficients of a kernel. Zero noise is the Euler ODE step for every
/// kernel, and the final step is always noiseless.
pub fn step_coeffs<S: Scalar>(kernel: SdeKernel, noise_level: S, k: usize, n: usize) -> StepCoeffs<S> {
    let dt = S::one() / lit::<S>(n as f64);
    let euler = StepCoeffs {
        a: S::one(),
        b: dt,
        sigma: step_std(noise_level, k, n),
    };
    if kernel == SdeKernel::EulerMaruyama || noise_level == S::zero() || k + 1 >= n {
        return euler;
    }
    let t = step_time::<S>(k, n);
    let next = step_time::<S>(k + 1, n);
    let angle = noise_level * lit(std::f64::consts::FRAC_PI_2);
    let (sin, cos) = (angle.sin(), angle.cos());
    // x1 = z + (1 - t) v, x0 = z - t v, mean = t' x1 + (1 - t') cos x0.
    StepCoeffs {
        a: next + (S::one() - next) * cos,
        b: next * (S::one() - t) - (S::one() - next) * t * cos,
        sigma: (S::one() - next) * sin,
    }
}

/// Guided drift `v_u + w (v_c - v_u)`. Scales 1 and 0 evaluate a single branch.
pub fn guided_drift<S: Scalar>(
    params: &PolicyParams<S>,
    z: &[S],
    t: S,
    context: &[S],
    cond: Conditioning,
    cfg_scale: S,
) -> Vec<S> {
    match cond {
        Conditioning::Unconditional => params.velocity(z, t, context, UNCOND_CODE),
        Conditioning::Intent(_) if cfg_scale == S::zero() => params.velocity(z, t, context, UNCOND_CODE),
        Conditioning::Intent(i) if cfg_scale == S::one() => params.velocity(z, t, context, i.code()),
        Conditioning::Intent(i) => {
            let vc = params.velocity(z, t, context, i.code());
            let vu = params.velocity(z, t, context, UNCOND_CODE);
            vu.iter().zip(&vc).map(|(u, c)| *u + cfg_scale * (*c - *u)).collect()
        }
    }
}

/// Accumulates `d(ddrift . drift)/d(params)` into `grad` and returns the drift.
fn guided_drift_backward<S: Scalar>(
    params: &PolicyParams<S>,
    z: &[S],
    t: S,
    context: &[S],
    cond: Conditioning,
    cfg_scale: S,
    ddrift: impl Fn(&[S]) -> Vec<S>,
    grad: &mut [S],
) -> Vec<S> {
    let single = |code: usize, grad: &mut [S]| {
        let (v, cache) = params.forward(z, t, context, code);
        let d = ddrift(&v);
        params.backward(&cache, &d, grad);
        v
    };
    match cond {
        Conditioning::Unconditional => single(UNCOND_CODE, grad),
        Conditioning::Intent(_) if cfg_scale == S::zero() => single(UNCOND_CODE, grad),
        Conditioning::Intent(i) if cfg_scale == S::one() => single(i.code(), grad),
        Conditioning::Intent(i) => {
            let (vc, cc) = params.forward(z, t, context, i.code());
            let (vu, cu) = params.forward(z, t, context, UNCOND_CODE);
            let v: Vec<S> = vu.iter().zip(&vc).map(|(u, c)| *u + cfg_scale * (*c - *u)).collect();
            let d = ddrift(&v);
            let dc: Vec<S> = d.iter().map(|g| *g * cfg_scale).collect();
            let du: Vec<S> = d.iter().map(|g| *g * (S::one() - cfg_scale)).collect();
            params.backward(&cc, &dc, grad);
            params.backward(&cu, &du, grad);
            v
        }
    }
}

fn step_mean<S: Scalar>(z: &[S], drift: &[S], c: &StepCoeffs<S>) -> Vec<S> {
    z.iter().zip(drift).map(|(x, v)| c.a * *x + c.b * *v).collect()
}

fn gaussian_logpdf<S: Scalar>(x: &[S], mean: &[S], sigma: S) -> S {
    let half_log_2pi: S = lit(0.5 * (2.0 * std::f64::consts::PI).ln());
    let half: S = lit(0.5);
    let log_sigma = sigma.ln();
    x.iter()
        .zip(mean)
        .map(|(a, m)| {
            let r = (*a - *m) / sigma;
            -half * r * r - log_sigma - half_log_2pi
        })
        .sum()
}

fn to_trajectory<S: Scalar>(params: &PolicyParams<S>, z: &[S]) -> Trajectory<S> {
    let scale: S = lit(params.arch().action_scale);
    let flat: Vec<S> = z.iter().map(|v| *v * scale).collect();
    Trajectory::from_flat(&flat, lit(DT)).expect("flow state has trajectory shape")
}

/// Draws one path. With `noise_level = 0` this is the deterministic ODE decode
/// from a random start, and the path log-probability is defined as 0.
pub fn sample_sde<S: Scalar, R: Rng + ?Sized>(
    params: &PolicyParams<S>,
    context: &[S],
    cond: Conditioning,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> SampledPath<S> {
    let n = cfg.n_steps.max(1);
    let dim = params.arch().traj_dim;
    let w: S = lit(cfg.cfg_scale);
    let eta: S = lit(cfg.noise_level);
    let mut states = Vec::with_capacity(n + 1);
    states.push((0..dim).map(|_| std_normal::<S, _>(rng)).collect::<Vec<S>>());
    let mut stds = Vec::with_capacity(n);
    let mut logp = S::zero();
    for k in 0..n {
        let z = &states[k];
        let drift = guided_drift(params, z, step_time(k, n), context, cond, w);
        let c = step_coeffs(cfg.kernel, eta, k, n);
        let mean = step_mean(z, &drift, &c);
        let sigma = c.sigma;
        stds.push(sigma);
        let next = if sigma > S::zero() {
            let x: Vec<S> = mean.iter().map(|m| *m + sigma * std_normal::<S, _>(rng)).collect();
            logp += gaussian_logpdf(&x, &mean, sigma);
            x
        } else {
            mean
        };
        states.push(next);
    }
    SampledPath {
        trajectory: to_trajectory(params, &states[n]),
        states,
        context: context.to_vec(),
        conditioning: cond,
        cfg_scale: w,
        noise_level: eta,
        kernel: cfg.kernel,
        step_stds: stds,
        path_logprob: logp,
    }
}

fn check_path<S: Scalar>(params: &PolicyParams<S>, path: &SampledPath<S>) -> Result<usize> {
    let n = path.n_steps();
    let dim = params.arch().traj_dim;
    if n == 0 || path.step_stds.len() != n || path.states.iter().any(|s| s.len() != dim) {
        return Err(Error::MissingStates);
    }
    Ok(n)
}

/// Log-probability of the stored path under `params`.
pub fn replay_logprob<S: Scalar>(params: &PolicyParams<S>, path: &SampledPath<S>) -> Result<S> {
    let n = check_path(params, path)?;
    let mut logp = S::zero();
    for k in 0..n {
        let sigma = path.step_stds[k];
        if sigma <= S::zero() {
            continue;
        }
        let c = step_coeffs(path.kernel, path.noise_level, k, n);
        let z = &path.states[k];
        let drift = guided_drift(params, z, step_time(k, n), &path.context, path.conditioning, path.cfg_scale);
        let mean = step_mean(z, &drift, &c);
        logp += gaussian_logpdf(&path.states[k + 1], &mean, sigma);
    }
    Ok(logp)
}

/// Replay log-probability; adds `coeff * d logp / d params` into `grad`.
pub fn replay_logprob_grad<S: Scalar>(
    params: &PolicyParams<S>,
    path: &SampledPath<S>,
    coeff: S,
    grad: &mut [S],
) -> Result<S> {
    let n = check_path(params, path)?;
    let mut logp = S::zero();
    for k in 0..n {
        let sigma = path.step_stds[k];
        if sigma <= S::zero() {
            continue;
        }
        let c = step_coeffs(path.kernel, path.noise_level, k, n);
        let z = &path.states[k];
        let next = &path.states[k + 1];
        let scale = coeff * c.b / (sigma * sigma);
        let drift = guided_drift_backward(
            params,
            z,
            step_time(k, n),
            &path.context,
            path.conditioning,
            path.cfg_scale,
            |v| {
                v.iter()
                    .zip(z)
                    .zip(next)
                    .map(|((vi, zi), xi)| scale * (*xi - (c.a * *zi + c.b * *vi)))
                    .collect()
            },
            grad,
        );
        let mean = step_mean(z, &drift, &c);
        logp += gaussian_logpdf(next, &mean, sigma);
    }
    Ok(logp)
}

#[cfg(test)]
mod tests {
    use super::super::network::Architecture;
    use super::*;
    use crate::intent::CONTEXT_DIM;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> PolicyParams<f64> {
        PolicyParams::init(
            Architecture {
                hidden: 10,
                ..Architecture::default()
            },
            11,
        )
    }

    fn ctx(rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..CONTEXT_DIM).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn zero_noise_is_seed_independent_after_start() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = ctx(&mut rng);
        let cfg = SamplerConfig::default().deterministic();
        let a = sample_sde(&p, &c, Intent::TurnLeft.into(), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        let b = sample_sde(&p, &c, Intent::TurnLeft.into(), &cfg, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.path_logprob, 0.0);
        assert_eq!(replay_logprob(&p, &a).unwrap(), 0.0);
    }

    #[test]
    fn shape_and_final_step() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = ctx(&mut rng);
        let path = sample_sde(&p, &c, Intent::Cruise.into(), &SamplerConfig::default(), &mut rng);
        assert_eq!(path.states.len(), 17);
        assert_eq!(path.step_stds[15], 0.0);
        assert!(path.path_logprob.is_finite());
        let flat: Vec<f64> = path.states[16].iter().map(|v| v * 10.0).collect();
        assert_eq!(path.trajectory.flatten(), flat);
    }

    #[test]
    fn two_step_logprob_matches_closed_form() {
        let mut p = small();
        p.output_layer_mut().fill(0.0);
        let off = p.arch().offsets();
        // Constant velocity b3 for every input.
        let b3: Vec<f64> = (0..20).map(|i| 0.1 * i as f64 - 1.0).collect();
        p.as_mut_slice()[off.b3..off.embed].copy_from_slice(&b3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = ctx(&mut rng);
        let cfg = SamplerConfig {
            cfg_scale: 2.0,
            noise_level: 0.7,
            n_steps: 2,
            kernel: SdeKernel::EulerMaruyama,
        };
        let path = sample_sde(&p, &c, Intent::UTurn.into(), &cfg, &mut rng);
        let sigma = 0.7 * 0.5f64.sqrt();
        let mut expected = 0.0;
        for d in 0..20 {
            let mean = path.states[0][d] + 0.5 * b3[d];
            let r = (path.states[1][d] - mean) / sigma;
            expected += -0.5 * r * r - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
        assert!((path.path_logprob - expected).abs() < 1e-10);
        for d in 0..20 {
            assert!((path.states[2][d] - (path.states[1][d] + 0.5 * b3[d])).abs() < 1e-12);
        }
    }

    const KERNELS: [SdeKernel; 2] = [SdeKernel::EulerMaruyama, SdeKernel::CoefficientPreserving];

    #[test]
    fn coefficient_preserving_reduces_to_euler_without_noise() {
        for k in 0..8 {
            let e = step_coeffs::<f64>(SdeKernel::EulerMaruyama, 0.0, k, 8);
            let c = step_coeffs::<f64>(SdeKernel::CoefficientPreserving, 0.0, k, 8);
            assert_eq!(e, c);
        }
        let last = step_coeffs::<f64>(SdeKernel::CoefficientPreserving, 0.5, 7, 8);
        assert_eq!(last.sigma, 0.0);
    }

    #[test]
    fn coefficient_preserving_keeps_unit_noise_scale() {
        // With an exact velocity x1 - x0, the step lands on the interpolant at
        // t' with noise coefficient (1 - t') split into cos and sin parts.
        let (x0, x1) = (0.7f64, -1.3f64);
        for k in 0..7 {
            let (t, next) = (k as f64 / 8.0, (k + 1) as f64 / 8.0);
            let c = step_coeffs::<f64>(SdeKernel::CoefficientPreserving, 0.5, k, 8);
            let z = (1.0 - t) * x0 + t * x1;
            let mean = c.a * z + c.b * (x1 - x0);
            let cos = (0.25 * std::f64::consts::PI).cos();
            assert!((mean - (next * x1 + (1.0 - next) * cos * x0)).abs() < 1e-12);
            let noise_var = ((1.0 - next) * cos).powi(2) + c.sigma * c.sigma;
            assert!((noise_var - (1.0 - next).powi(2)).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_stored_logprob() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..20 {
            let c = ctx(&mut rng);
            let cond = if i % 5 == 0 {
                Conditioning::Unconditional
            } else {
                Intent::ALL[i % 8].into()
            };
            let cfg = SamplerConfig {
                kernel: KERNELS[i % 2],
                ..SamplerConfig::default()
            };
            let path = sample_sde(&p, &c, cond, &cfg, &mut rng);
            assert_eq!(replay_logprob(&p, &path).unwrap(), path.path_logprob);
            let mut g = p.zeros_like();
            assert_eq!(replay_logprob_grad(&p, &path, 1.0, &mut g).unwrap(), path.path_logprob);
        }
    }

    #[test]
    fn missing_states_is_an_error() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = ctx(&mut rng);
        let mut path = sample_sde(&p, &c, Intent::Cruise.into(), &SamplerConfig::default(), &mut rng);
        path.states.clear();
        assert!(matches!(replay_logprob(&p, &path), Err(Error::MissingStates)));
    }

    #[test]
    fn replay_gradient_matches_finite_differences() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = ctx(&mut rng);
        for (w, kernel) in [(2.0, KERNELS[0]), (1.0, KERNELS[0]), (0.0, KERNELS[0]), (2.0, KERNELS[1])] {
            let cfg = SamplerConfig {
                n_steps: 4,
                kernel,
                ..SamplerConfig::default()
            };
            let path = sample_sde(&p, &c, Intent::TurnRight.into(), &cfg.with_cfg(w), &mut rng);
            let mut g = p.zeros_like();
            replay_logprob_grad(&p, &path, 1.0, &mut g).unwrap();
            let h = 1e-5;
            for idx in (0..p.arch().flow_range().end).step_by(13) {
                let mut a = p.clone();
                a.as_mut_slice()[idx] += h;
                let mut b = p.clone();
                b.as_mut_slice()[idx] -= h;
                let fd = (replay_logprob(&a, &path).unwrap() - replay_logprob(&b, &path).unwrap()) / (2.0 * h);
                assert!((fd - g[idx]).abs() <= 1e-4 * fd.abs().max(1e-2), "w={w} idx={idx}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn cfg_identities_hold_pointwise() {
        let p = small();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let c = ctx(&mut rng);
            let z: Vec<f64> = (0..20).map(|_| rng.random_range(-2.0..2.0)).collect();
            let t = rng.random_range(0.0..1.0);
            let intent = Intent::ALL[rng.random_range(0..8)];
            let one = guided_drift(&p, &z, t, &c, intent.into(), 1.0);
            assert_eq!(one, p.velocity(&z, t, &c, intent.code()));
            let zero = guided_drift(&p, &z, t, &c, intent.into(), 0.0);
            assert_eq!(zero, guided_drift(&p, &z, t, &c, Intent::UTurn.into(), 0.0));
        }
    }
}
