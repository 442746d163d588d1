//! Noise schedule, forward corruption, the ε-prediction training loss with
//! condition-noise augmentation, DDIM sampling and classifier-free guidance.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::action::ActionCommand;
use crate::error::{Error, Result};
use crate::model::{patchify_chunk, DenoiserInput, DenoiserParameters};
use crate::tensor::Real;

/// Variance schedule over `T` steps. `alpha_bar[0] = 1` is the clean boundary and
/// `alpha_bar[t] = Π_{s ≤ t} (1 − β_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule::linear(1000, 1e-4, 2e-2).expect("valid default schedule")
    }
}

impl DiffusionSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidConfig("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| {
                let f = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                beta_start + f * (beta_end - beta_start)
            })
            .collect();
        DiffusionSchedule::from_betas(betas)
    }

    /// `betas[t − 1]` is β_t.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidConfig("every beta must lie in (0, 1)".into()));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len() + 1);
        alpha_bar.push(1.0);
        for &b in &betas {
            let prev = *alpha_bar.last().expect("non-empty");
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(DiffusionSchedule { betas, alpha_bar })
    }

    /// `T`, the largest timestep.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `ᾱ_0 … ᾱ_T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_bar[t])
    }

    fn check(&self, t: usize) -> Result<()> {
        if t > self.steps() {
            return Err(Error::TimestepRange { t, max: self.steps() });
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t · x0 + √(1 − ᾱ_t) · noise`.
pub fn q_sample<T: Real>(schedule: &DiffusionSchedule, x0: &[T], t: usize, noise: &[T]) -> Result<Vec<T>> {
    let ab = schedule.alpha_bar(t)?;
    if x0.len() != noise.len() {
        return Err(Error::Shape(format!("x0 has {} values, noise {}", x0.len(), noise.len())));
    }
    if t == 0 {
        return Ok(x0.to_vec());
    }
    let (a, s) = (T::lit(ab.sqrt()), T::lit((1.0 - ab).sqrt()));
    Ok(x0.iter().zip(noise).map(|(&x, &n)| a * x + s * n).collect())
}

/// `ε_u + w · (ε_c − ε_u)`.
pub fn cfg_combine<T: Real>(eps_cond: &[T], eps_uncond: &[T], w: f64) -> Vec<T> {
    let w = T::lit(w);
    eps_cond.iter().zip(eps_uncond).map(|(&c, &u)| u + w * (c - u)).collect()
}

pub fn standard_normal<T: Real, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<T> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z)
        })
        .collect()
}

/// Anything that predicts noise for a batch of patchified chunk pairs. Inputs are
/// `[batch × tokens × patch_dim]`; the output matches `x_t`.
pub trait EpsModel<T: Real> {
    fn predict_eps(
        &self,
        cond: &[T],
        x_t: &[T],
        actions: &[ActionCommand],
        t_cond: &[usize],
        t: &[usize],
    ) -> Result<Vec<T>>;
}

impl<T: Real> EpsModel<T> for DenoiserParameters<T> {
    fn predict_eps(
        &self,
        cond: &[T],
        x_t: &[T],
        actions: &[ActionCommand],
        t_cond: &[usize],
        t: &[usize],
    ) -> Result<Vec<T>> {
        self.forward(&DenoiserInput { cond, target: x_t, actions, t_cond, t_target: t })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_steps: usize,
    pub eta: f64,
    pub guidance_scale: f64,
    /// Clamp each x0 estimate to the pixel range `[−1, 1]`.
    pub clip_denoised: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { num_steps: 50, eta: 0.0, guidance_scale: 1.0, clip_denoised: true, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &DiffusionSchedule) -> Result<()> {
        if self.num_steps == 0 || self.num_steps > schedule.steps() {
            return Err(Error::InvalidConfig(format!(
                "sampler steps {} outside 1..={}",
                self.num_steps,
                schedule.steps()
            )));
        }
        if !(self.eta >= 0.0) || !(self.guidance_scale >= 0.0) {
            return Err(Error::InvalidConfig("eta and guidance scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// Evenly spaced timesteps `T = τ_n > … > τ_0 = 0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Vec<usize> {
    (0..=steps).rev().map(|i| ((i as f64) * total as f64 / steps as f64).round() as usize).collect()
}

/// DDIM sampling of target tokens given clean condition tokens.
///
/// `cond` is `[batch × tokens × patch_dim]` and `actions` has one entry per
/// example. The starting noise is drawn from `rng`; with `eta = 0` nothing else is.
pub fn ddim_sample<T: Real, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    cond: &[T],
    actions: &[ActionCommand],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<T>> {
    let x_t = standard_normal(cond.len(), rng);
    ddim_sample_from(model, schedule, cond, actions, config, x_t, rng)
}

/// [`ddim_sample`] from a caller-supplied starting point `x_T`.
pub fn ddim_sample_from<T: Real, M: EpsModel<T> + ?Sized, R: Rng + ?Sized>(
    model: &M,
    schedule: &DiffusionSchedule,
    cond: &[T],
    actions: &[ActionCommand],
    config: &SamplerConfig,
    mut x: Vec<T>,
    rng: &mut R,
) -> Result<Vec<T>> {
    config.validate(schedule)?;
    if x.len() != cond.len() || actions.is_empty() || cond.len() % actions.len() != 0 {
        return Err(Error::Shape("condition, noise and action batch sizes disagree".into()));
    }
    let batch = actions.len();
    let zeros_t = vec![0usize; batch];
    let uncond = vec![ActionCommand::Zero; batch];
    let guided = config.guidance_scale != 1.0;
    let taus = ddim_timesteps(schedule.steps(), config.num_steps);
    for pair in taus.windows(2) {
        let (t, s) = (pair[0], pair[1]);
        let ts = vec![t; batch];
        let mut eps = model.predict_eps(cond, &x, actions, &zeros_t, &ts)?;
        if guided {
            let eps_u = model.predict_eps(cond, &x, &uncond, &zeros_t, &ts)?;
            eps = cfg_combine(&eps, &eps_u, config.guidance_scale);
        }
        let (ab_t, ab_s) = (schedule.alpha_bar(t)?, schedule.alpha_bar(s)?);
        let (sa_t, sb_t) = (T::lit(ab_t.sqrt()), T::lit((1.0 - ab_t).sqrt()));
        let mut x0: Vec<T> = x.iter().zip(&eps).map(|(&xv, &e)| (xv - sb_t * e) / sa_t).collect();
        if config.clip_denoised {
            let one = T::one();
            x0.iter_mut().for_each(|v| *v = v.max(-one).min(one));
            // ε consistent with the clamped estimate
            for ((e, &xv), &x0v) in eps.iter_mut().zip(&x).zip(&x0) {
                *e = (xv - sa_t * x0v) / sb_t;
            }
        }
        if s == 0 {
            x = x0;
            break;
        }
        let sigma = config.eta * ((1.0 - ab_s) / (1.0 - ab_t)).sqrt() * (1.0 - ab_t / ab_s).sqrt();
        let dir = T::lit((1.0 - ab_s - sigma * sigma).max(0.0).sqrt());
        let sa_s = T::lit(ab_s.sqrt());
        x = x0.iter().zip(&eps).map(|(&x0v, &e)| sa_s * x0v + dir * e).collect();
        if sigma > 0.0 {
            let sig = T::lit(sigma);
            for (v, z) in x.iter_mut().zip(standard_normal::<T, R>(cond.len(), rng)) {
                *v += sig * z;
            }
        }
    }
    Ok(x)
}

/// A batch of transitions in pixel layout, each chunk `C·H·W·3` values in `[−1, 1]`.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub cond: &'a [f32],
    pub target: &'a [f32],
    pub actions: &'a [ActionCommand],
}

/// Random quantities of one loss evaluation, in token layout.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub t_cond: Vec<usize>,
    pub t_target: Vec<usize>,
    pub cond_noise: Vec<T>,
    pub target_noise: Vec<T>,
}

impl<T: Real> NoiseDraw<T> {
    /// `t_target ~ U{1..T}`, `t_cond ~ U{0..t_cond_max}` per example, unit normal noise.
    pub fn sample<R: Rng + ?Sized>(batch: usize, values: usize, t_max: usize, t_cond_max: usize, rng: &mut R) -> Self {
        let t_target = (0..batch).map(|_| rng.random_range(1..=t_max)).collect();
        let t_cond = (0..batch).map(|_| rng.random_range(0..=t_cond_max)).collect();
        let target_noise = standard_normal(batch * values, rng);
        let cond_noise = standard_normal(batch * values, rng);
        NoiseDraw { t_cond, t_target, cond_noise, target_noise }
    }
}

pub struct LossOutput<T> {
    pub loss: f64,
    pub grads: DenoiserParameters<T>,
}

/// Mean squared error between predicted and true noise.
pub fn epsilon_mse<T: Real>(pred: &[T], noise: &[T]) -> f64 {
    let sum: f64 = pred.iter().zip(noise).map(|(&p, &n)| (p - n).f64().powi(2)).sum();
    sum / pred.len().max(1) as f64
}

fn patchify_batch<T: Real>(params: &DenoiserParameters<T>, values: &[f32], batch: usize) -> Result<Vec<T>> {
    let per = params.config.chunk_values();
    if values.len() != batch * per {
        return Err(Error::Shape(format!("expected {} chunk values, got {}", batch * per, values.len())));
    }
    let layout = params.config.layout();
    let mut out = Vec::with_capacity(values.len());
    for chunk in values.chunks_exact(per) {
        let cast: Vec<T> = chunk.iter().map(|&v| T::lit(v as f64)).collect();
        out.extend(patchify_chunk(&layout, &cast)?);
    }
    Ok(out)
}

/// ε-MSE over target tokens with independently noised condition chunks, plus
/// parameter gradients. Condition-token outputs receive zero gradient.
pub fn training_loss<T: Real, R: Rng + ?Sized>(
    params: &DenoiserParameters<T>,
    schedule: &DiffusionSchedule,
    batch: &LossBatch<'_>,
    t_cond_max: usize,
    rng: &mut R,
) -> Result<LossOutput<T>> {
    let b = batch.actions.len();
    let draw = NoiseDraw::sample(b, params.config.chunk_values(), schedule.steps(), t_cond_max.min(schedule.steps()), rng);
    training_loss_with(params, schedule, batch, &draw)
}

/// [`training_loss`] with explicit draws.
pub fn training_loss_with<T: Real>(
    params: &DenoiserParameters<T>,
    schedule: &DiffusionSchedule,
    batch: &LossBatch<'_>,
    draw: &NoiseDraw<T>,
) -> Result<LossOutput<T>> {
    let b = batch.actions.len();
    let cond0 = patchify_batch(params, batch.cond, b)?;
    let target0 = patchify_batch(params, batch.target, b)?;
    if draw.t_cond.len() != b || draw.t_target.len() != b || draw.cond_noise.len() != cond0.len() || draw.target_noise.len() != target0.len() {
        return Err(Error::Shape("noise draw does not match the batch".into()));
    }
    let per = cond0.len() / b.max(1);
    let mut cond = Vec::with_capacity(cond0.len());
    let mut target = Vec::with_capacity(target0.len());
    for i in 0..b {
        let span = i * per..(i + 1) * per;
        cond.extend(q_sample(schedule, &cond0[span.clone()], draw.t_cond[i], &draw.cond_noise[span.clone()])?);
        target.extend(q_sample(schedule, &target0[span.clone()], draw.t_target[i], &draw.target_noise[span])?);
    }
    let input = DenoiserInput { cond: &cond, target: &target, actions: batch.actions, t_cond: &draw.t_cond, t_target: &draw.t_target };
    let (out, cache) = params.forward_train(&input)?;
    let count = target.len();
    let scale = T::lit(2.0 / count as f64);
    let mut d_out = vec![T::zero(); out.len()];
    let mut sum = 0.0;
    for i in 0..b {
        let rows = &out[(2 * i + 1) * per..(2 * i + 2) * per];
        let noise = &draw.target_noise[i * per..(i + 1) * per];
        let dst = &mut d_out[(2 * i + 1) * per..(2 * i + 2) * per];
        for ((g, &p), &n) in dst.iter_mut().zip(rows).zip(noise) {
            let diff = p - n;
            sum += diff.f64() * diff.f64();
            *g = scale * diff;
        }
    }
    let mut grads = params.zeros_like();
    params.backward(&cache, &d_out, &mut grads)?;
    Ok(LossOutput { loss: sum / count as f64, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserConfig, InjectionStrategy};
    use crate::seed;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    /// ε̂ = (x_t − √ᾱ_t · x0*) / √(1 − ᾱ_t) for a fixed target.
    struct Analytic<'a> {
        schedule: &'a DiffusionSchedule,
        x0: Vec<f64>,
    }

    impl EpsModel<f64> for Analytic<'_> {
        fn predict_eps(&self, _: &[f64], x: &[f64], _: &[ActionCommand], _: &[usize], t: &[usize]) -> Result<Vec<f64>> {
            let ab = self.schedule.alpha_bar(t[0])?;
            Ok(x.iter().zip(&self.x0).map(|(&v, &x0)| (v - ab.sqrt() * x0) / (1.0 - ab).sqrt()).collect())
        }
    }

    fn target(n: usize) -> Vec<f64> {
        (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) * 0.95).collect()
    }

    #[test]
    fn default_schedule_shape() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert_eq!(s.alpha_bars()[0], 1.0);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0] && w[1] > 0.0));
        assert!(s.alpha_bar(1000).unwrap() <= 1e-4);
        assert!(matches!(s.alpha_bar(1001), Err(Error::TimestepRange { .. })));
        assert!(DiffusionSchedule::from_betas(vec![0.1, 1.0]).is_err());
    }

    #[test]
    fn q_sample_at_zero_is_identity() {
        let s = DiffusionSchedule::default();
        let x0 = target(64);
        let noise = vec![3.0; 64];
        assert_eq!(q_sample(&s, &x0, 0, &noise).unwrap(), x0);
        assert!(q_sample(&s, &x0, 1001, &noise).is_err());
    }

    #[test]
    fn q_sample_moments() {
        let s = DiffusionSchedule::default();
        let mut rng = seed::rng(1, &[]);
        let n = 10_000;
        let x0: Vec<f64> = standard_normal(n, &mut rng);
        for &t in &[1usize, 250, 600] {
            let noise: Vec<f64> = standard_normal(n, &mut rng);
            let xt = q_sample(&s, &x0, t, &noise).unwrap();
            let ab = s.alpha_bar(t).unwrap();
            let var = xt.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let want = ab * (x0.iter().map(|v| v * v).sum::<f64>() / n as f64) + (1.0 - ab);
            assert!((var / want - 1.0).abs() < 0.05, "t={t}: {var} vs {want}");
        }
        // terminal step decorrelates
        let noise: Vec<f64> = standard_normal(n, &mut rng);
        let xt = q_sample(&s, &x0, 1000, &noise).unwrap();
        let corr = xt.iter().zip(&x0).map(|(a, b)| a * b).sum::<f64>()
            / (xt.iter().map(|v| v * v).sum::<f64>() * x0.iter().map(|v| v * v).sum::<f64>()).sqrt();
        assert!(corr.abs() <= 0.05);
    }

    #[test]
    fn q_sample_mean_over_draws() {
        let s = DiffusionSchedule::default();
        let mut rng = seed::rng(2, &[]);
        let x0 = [0.7f64];
        let t = 400;
        let draws = 10_000;
        let mean = (0..draws)
            .map(|_| q_sample(&s, &x0, t, &standard_normal::<f64, _>(1, &mut rng)).unwrap()[0])
            .sum::<f64>()
            / draws as f64;
        let ab = s.alpha_bar(t).unwrap();
        let sigma = ((1.0 - ab) / draws as f64).sqrt();
        assert!((mean - ab.sqrt() * 0.7).abs() < 3.0 * sigma);
    }

    #[test]
    fn cfg_examples() {
        let c = [0.3f64, -1.0];
        let u = [0.1f64, 2.0];
        assert_eq!(cfg_combine(&c, &u, 1.0), c);
        assert_eq!(cfg_combine(&c, &u, 0.0), u);
        assert_eq!(cfg_combine(&[1.0f64], &[0.0], 2.0), vec![2.0]);
    }

    #[test]
    fn analytic_denoiser_is_recovered_for_any_step_count() {
        let s = DiffusionSchedule::default();
        let x0 = target(96);
        let oracle = Analytic { schedule: &s, x0: x0.clone() };
        let mut results = Vec::new();
        for steps in [1, 10, 50, 1000] {
            let cfg = SamplerConfig { num_steps: steps, seed: 3, ..Default::default() };
            let out = ddim_sample(&oracle, &s, &vec![0.0; 96], &[ActionCommand::Left], &cfg, &mut seed::rng(3, &[])).unwrap();
            let err = out.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-6, "{steps} steps: {err}");
            results.push(out);
        }
        for r in &results[1..] {
            let err = r.iter().zip(&results[0]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-9);
        }
    }

    #[test]
    fn timesteps_end_at_zero() {
        assert_eq!(ddim_timesteps(1000, 1), vec![1000, 0]);
        assert_eq!(ddim_timesteps(1000, 4), vec![1000, 750, 500, 250, 0]);
        let all = ddim_timesteps(1000, 1000);
        assert_eq!(all.len(), 1001);
        assert!(all.windows(2).all(|w| w[0] == w[1] + 1));
    }

    #[test]
    fn sampler_config_bounds() {
        let s = DiffusionSchedule::default();
        assert!(SamplerConfig { num_steps: 0, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { num_steps: 1001, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig { eta: -0.1, ..Default::default() }.validate(&s).is_err());
        assert!(SamplerConfig::default().validate(&s).is_ok());
    }

    fn small() -> DenoiserConfig {
        DenoiserConfig { height: 8, width: 8, chunk_len: 2, patch: 4, dim: 16, heads: 2, layers: 1, mlp_ratio: 2, action: Some(InjectionStrategy::Adaln) }
    }

    #[test]
    fn model_sampling_is_deterministic() {
        let s = DiffusionSchedule::default();
        let params = DenoiserParameters::<f32>::init(small(), &mut seed::rng(4, &[])).unwrap();
        let cond = vec![0.25f32; 2 * 8 * 8 * 3];
        let cfg = SamplerConfig { num_steps: 5, ..Default::default() };
        let a = ddim_sample(&params, &s, &cond, &[ActionCommand::Right], &cfg, &mut seed::rng(9, &[])).unwrap();
        let b = ddim_sample(&params, &s, &cond, &[ActionCommand::Right], &cfg, &mut seed::rng(9, &[])).unwrap();
        assert_eq!(a, b);
        let guided = SamplerConfig { guidance_scale: 3.0, ..cfg };
        let c = ddim_sample(&params, &s, &cond, &[ActionCommand::Right], &guided, &mut seed::rng(9, &[])).unwrap();
        assert_eq!(c.len(), a.len());
    }

    #[test]
    fn perfect_prediction_has_zero_loss() {
        let noise = [0.5f64, -1.0, 2.0];
        assert_eq!(epsilon_mse(&noise, &noise), 0.0);
    }

    #[test]
    fn loss_at_init_is_near_unit_variance() {
        let cfg = DenoiserConfig::reduced();
        let params = DenoiserParameters::<f32>::init(cfg, &mut seed::rng(5, &[])).unwrap();
        let s = DiffusionSchedule::default();
        let b = 8;
        let n = cfg.chunk_values();
        let mut rng = seed::rng(6, &[]);
        let cond: Vec<f32> = (0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f32> = (0..b * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let actions = vec![ActionCommand::Forward; b];
        let batch = LossBatch { cond: &cond, target: &target, actions: &actions };
        let out = training_loss(&params, &s, &batch, 250, &mut rng).unwrap();
        // the untrained output is small and uncorrelated with ε
        assert!((out.loss - 1.0).abs() < 0.1, "{}", out.loss);
    }

    #[test]
    fn clean_condition_when_augmentation_disabled() {
        let mut rng = seed::rng(7, &[]);
        let d: NoiseDraw<f32> = NoiseDraw::sample(64, 4, 1000, 0, &mut rng);
        assert!(d.t_cond.iter().all(|&t| t == 0));
        assert!(d.t_target.iter().all(|&t| (1..=1000).contains(&t)));
    }

    #[test]
    fn zero_actions_leave_one_hot_rows_untouched() {
        let cfg = small();
        let mut params = DenoiserParameters::<f64>::init(cfg, &mut seed::rng(8, &[])).unwrap();
        let mut rng = seed::rng(10, &[]);
        params.for_each_mut(|_, t| t.data.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2)));
        let s = DiffusionSchedule::default();
        let n = cfg.chunk_values();
        let cond = vec![0.1f32; 2 * n];
        let target = vec![-0.2f32; 2 * n];
        let actions = [ActionCommand::Zero; 2];
        let out = training_loss(&params, &s, &LossBatch { cond: &cond, target: &target, actions: &actions }, 250, &mut seed::rng(9, &[])).unwrap();
        let g = out.grads.action.as_ref().unwrap();
        assert!(g.hidden.weight.data.iter().all(|&v| v == 0.0));
        assert!(g.hidden.bias.data.iter().any(|&v| v != 0.0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn alpha_bar_monotone_for_any_valid_betas(betas in proptest::collection::vec(1e-6f64..0.999, 1..200)) {
            let s = DiffusionSchedule::from_betas(betas).unwrap();
            let ab = s.alpha_bars();
            prop_assert_eq!(ab[0], 1.0);
            for w in ab.windows(2) {
                prop_assert!(w[1] < w[0]);
                prop_assert!(w[1] > 0.0 && w[1] <= 1.0);
            }
        }

        #[test]
        fn analytic_recovery_any_steps(steps in 1usize..=200, seed_v in 0u64..1000) {
            let s = DiffusionSchedule::default();
            let x0 = target(12);
            let oracle = Analytic { schedule: &s, x0: x0.clone() };
            let cfg = SamplerConfig { num_steps: steps, ..Default::default() };
            let out = ddim_sample(&oracle, &s, &[0.0; 12], &[ActionCommand::Zero], &cfg, &mut seed::rng(seed_v, &[])).unwrap();
            for (a, b) in out.iter().zip(&x0) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
