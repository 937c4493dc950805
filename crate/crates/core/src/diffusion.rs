//! Noise schedules, the ε-prediction training objective, classifier-free
//! conditioning and the DDPM / DDIM samplers with gradient guidance.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::nn::{Batch, Denoiser, DenoiserConfig, NormStats, ParamStore};
use crate::par::{self, Execution};
use crate::rng::{self, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: SigmaChoice,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma: SigmaChoice::Beta,
        }
    }
}

/// Reverse-process noise scale: `√β_k` or the posterior `√β̃_k`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaChoice {
    #[default]
    Beta,
    Posterior,
}

/// Linear-β variance schedule. Vectors are indexed by `k` in `0..=K` with
/// the `k = 0` convention `ᾱ_0 = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(cfg: &ScheduleConfig) -> Result<Self> {
        let k = cfg.steps;
        if k == 0 {
            bail!(Config, "schedule needs at least one step");
        }
        if !(0.0 < cfg.beta_start && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0) {
            bail!(
                Config,
                "beta range [{}, {}] must satisfy 0 < start <= end < 1",
                cfg.beta_start,
                cfg.beta_end
            );
        }
        let mut beta = vec![0.0; k + 1];
        for (i, b) in beta.iter_mut().enumerate().skip(1) {
            let frac = if k == 1 { 0.0 } else { (i - 1) as f64 / (k - 1) as f64 };
            *b = cfg.beta_start + frac * (cfg.beta_end - cfg.beta_start);
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0; k + 1];
        for i in 1..=k {
            alpha_bar[i] = alpha_bar[i - 1] * alpha[i];
        }
        let sigma = (0..=k)
            .map(|i| match cfg.sigma {
                SigmaChoice::Beta => beta[i].sqrt(),
                SigmaChoice::Posterior if i == 0 => 0.0,
                SigmaChoice::Posterior => ((1.0 - alpha_bar[i - 1]) / (1.0 - alpha_bar[i]) * beta[i]).sqrt(),
            })
            .collect();
        Ok(Self {
            steps: k,
            beta,
            alpha,
            alpha_bar,
            sigma,
        })
    }

    fn check(&self, k: usize) -> Result<()> {
        if k > self.steps {
            bail!(Invalid, "diffusion step {} outside 0..={}", k, self.steps);
        }
        Ok(())
    }

    /// `x_k = √ᾱ_k·x0 + √(1−ᾱ_k)·eps`.
    pub fn forward_noise(&self, x0: &[f64], k: usize, eps: &[f64]) -> Result<Vec<f64>> {
        self.check(k)?;
        if x0.len() != eps.len() {
            bail!(Shape, "x0 has {} values, eps {}", x0.len(), eps.len());
        }
        let (a, b) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
    }

    /// `x0 = (x_k − √(1−ᾱ_k)·eps_hat) / √ᾱ_k`.
    pub fn estimate_x0(&self, x_k: &[f64], eps_hat: &[f64], k: usize) -> Result<Vec<f64>> {
        self.check(k)?;
        if x_k.len() != eps_hat.len() {
            bail!(Shape, "x_k has {} values, eps_hat {}", x_k.len(), eps_hat.len());
        }
        let (a, b) = (self.alpha_bar[k].sqrt(), (1.0 - self.alpha_bar[k]).sqrt());
        Ok(x_k.iter().zip(eps_hat).map(|(x, e)| (x - b * e) / a).collect())
    }

    /// DDPM posterior-mean update written as `c_x·x_k + c_eps·ε̂ + σ·ξ`.
    pub fn ddpm_coefficients(&self, k: usize) -> StepCoefficients {
        let c_x = 1.0 / self.alpha[k].sqrt();
        StepCoefficients {
            c_x,
            c_eps: -c_x * self.beta[k] / (1.0 - self.alpha_bar[k]).sqrt(),
            sigma: if k > 1 { self.sigma[k] } else { 0.0 },
        }
    }

    /// DDIM update from `k` to `k_prev < k` with stochasticity `eta`.
    pub fn ddim_coefficients(&self, k: usize, k_prev: usize, eta: f64) -> StepCoefficients {
        let (ab, abp) = (self.alpha_bar[k], self.alpha_bar[k_prev]);
        let sigma = eta * ((1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp)).max(0.0).sqrt();
        let dir = (1.0 - abp - sigma * sigma).max(0.0).sqrt();
        StepCoefficients {
            c_x: (abp / ab).sqrt(),
            c_eps: dir - (abp * (1.0 - ab) / ab).sqrt(),
            sigma,
        }
    }

    /// Guidance scale at step `k`.
    pub fn guidance_weight(&self, k: usize, lambda: f64, schedule: GuidanceSchedule) -> f64 {
        match schedule {
            GuidanceSchedule::Constant => lambda,
            GuidanceSchedule::Cosine => {
                let frac = (self.steps - k) as f64 / self.steps as f64;
                lambda * (1.0 - (PI * frac).cos()) / 2.0
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCoefficients {
    pub c_x: f64,
    pub c_eps: f64,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerMode {
    Ddpm,
    #[default]
    Ddim,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSchedule {
    Constant,
    #[default]
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub ddim_steps: usize,
    pub ddim_eta: f64,
    pub cfg_weight: f64,
    pub guidance_weight: f64,
    pub guidance_schedule: GuidanceSchedule,
    pub recon_guidance_weight: f64,
    /// Clamp the `x0` estimate of every step to `[-b, b]` (normalized
    /// units) and re-derive `ε̂` from it.
    #[serde(default)]
    pub clip_x0: Option<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::Ddim,
            ddim_steps: 50,
            ddim_eta: 1.0,
            cfg_weight: 1.0,
            guidance_weight: 0.0,
            guidance_schedule: GuidanceSchedule::Cosine,
            recon_guidance_weight: 0.0,
            clip_x0: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.mode == SamplerMode::Ddim && !(1..=steps).contains(&self.ddim_steps) {
            bail!(Config, "ddim_steps {} outside 1..={}", self.ddim_steps, steps);
        }
        if !(0.0..=1.0).contains(&self.ddim_eta) {
            bail!(Config, "ddim_eta {} outside [0, 1]", self.ddim_eta);
        }
        if !(0.0..=1.0).contains(&self.cfg_weight) {
            bail!(Config, "cfg_weight {} outside [0, 1]", self.cfg_weight);
        }
        if !(self.guidance_weight >= 0.0 && self.guidance_weight.is_finite()) {
            bail!(Config, "guidance weight must be finite and non-negative");
        }
        if !(self.recon_guidance_weight >= 0.0 && self.recon_guidance_weight.is_finite()) {
            bail!(Config, "recon guidance weight must be finite and non-negative");
        }
        if self.clip_x0.is_some_and(|b| !(b > 0.0 && b.is_finite())) {
            bail!(Config, "clip_x0 bound must be finite and positive");
        }
        Ok(())
    }

    /// Step indices visited by the sampler, from `K` down, each paired with
    /// the step it lands on.
    pub fn trajectory(&self, steps: usize) -> Vec<(usize, usize)> {
        match self.mode {
            SamplerMode::Ddpm => (1..=steps).rev().map(|k| (k, k - 1)).collect(),
            SamplerMode::Ddim => {
                let s = self.ddim_steps;
                let tau: Vec<usize> = (0..=s).map(|i| (i * steps).div_ceil(s)).collect();
                (1..=s).rev().map(|i| (tau[i], tau[i - 1])).collect()
            }
        }
    }
}

/// `n` samples of `c` channels on an `h×w` plane, sample-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Samples {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Samples {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            bail!(Shape, "{} values for {}x{}x{}x{} samples", data.len(), n, c, h, w);
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn stack(parts: &[Vec<f64>], c: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(parts.len(), c, h, w, parts.concat())
    }

    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.data[i * self.sample_len()..(i + 1) * self.sample_len()]
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        idx.iter().flat_map(|i| self.sample(*i).iter().copied()).collect()
    }

    /// Per-channel mean and (population) standard deviation; constant
    /// channels get unit scale.
    pub fn channel_stats(&self) -> (Vec<f64>, Vec<f64>) {
        Self::pooled_stats(&[self])
    }

    /// [`Samples::channel_stats`] over the union of several sets with equal
    /// channel counts (planes may differ).
    pub fn pooled_stats(parts: &[&Samples]) -> (Vec<f64>, Vec<f64>) {
        let c = parts.first().map_or(0, |p| p.c);
        let mut sum = vec![0.0; c];
        let mut count = 0.0;
        for p in parts {
            let plane = p.h * p.w;
            for (i, v) in p.data.iter().enumerate() {
                sum[(i / plane) % c] += v;
            }
            count += (p.n * plane) as f64;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let mut sq = vec![0.0; c];
        for p in parts {
            let plane = p.h * p.w;
            for (i, v) in p.data.iter().enumerate() {
                let ch = (i / plane) % c;
                sq[ch] += (v - mean[ch]).powi(2);
            }
        }
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| {
                let sd = (s / count).sqrt();
                if sd > 1e-12 * (1.0 + m.abs()) {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        (mean, std)
    }

    fn affine(&self, mean: &[f64], std: &[f64], forward: bool) -> Result<Self> {
        if mean.len() != self.c || std.len() != self.c {
            bail!(Shape, "stats for {} channels applied to {}", mean.len(), self.c);
        }
        let plane = self.h * self.w;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let c = (i / plane) % self.c;
                if forward {
                    (v - mean[c]) / std[c]
                } else {
                    v * std[c] + mean[c]
                }
            })
            .collect();
        Self::new(self.n, self.c, self.h, self.w, data)
    }

    pub fn normalize(&self, mean: &[f64], std: &[f64]) -> Result<Self> {
        self.affine(mean, std, true)
    }

    pub fn denormalize(&self, mean: &[f64], std: &[f64]) -> Result<Self> {
        self.affine(mean, std, false)
    }
}

/// Normalization statistics pooled over every `(target, cond)` group.
pub fn fit_stats(groups: &[(Samples, Samples)]) -> NormStats {
    let targets: Vec<&Samples> = groups.iter().map(|g| &g.0).collect();
    let conds: Vec<&Samples> = groups.iter().map(|g| &g.1).collect();
    let (target_mean, target_std) = Samples::pooled_stats(&targets);
    let (cond_mean, cond_std) = Samples::pooled_stats(&conds);
    NormStats {
        target_mean,
        target_std,
        cond_mean,
        cond_std,
    }
}

fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// One ε-prediction step on normalized data: draws `k ~ U{1..K}`, noise and
/// condition dropout from `rng`, accumulates gradients of the batch-mean
/// squared error and returns that loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    store: &mut ParamStore,
    exec: Execution,
    schedule: &NoiseSchedule,
    x0: &Samples,
    cond: &Samples,
    cond_drop: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    if store.stats.is_none() {
        bail!(Invalid, "training batch requires normalization statistics in the parameter store");
    }
    if store.config.diffusion_steps != schedule.steps {
        bail!(
            Config,
            "denoiser expects {} steps, schedule has {}",
            store.config.diffusion_steps,
            schedule.steps
        );
    }
    let n = x0.n;
    let len = x0.sample_len();
    let steps: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps)).collect();
    let null: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < cond_drop).collect();
    let eps = gaussian(rng, n * len);
    let mut x = Vec::with_capacity(n * len);
    for s in 0..n {
        x.extend(schedule.forward_noise(x0.sample(s), steps[s], &eps[s * len..(s + 1) * len])?);
    }
    let batch = Batch {
        n,
        h: x0.h,
        w: x0.w,
        x,
        cond: cond.data.clone(),
        null,
        steps,
    };
    let grads = {
        let (tape, out) = Denoiser::new(store, exec).run(&batch, true)?;
        let mut pred = tape.value(out).to_vec();
        add_prior(&mut pred, schedule, &store.config, &batch.x, &batch.steps);
        let loss = pred.iter().zip(&eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let seed: Vec<f64> = pred.iter().zip(&eps).map(|(p, e)| 2.0 * (p - e) / n as f64).collect();
        (tape.backward(out, &seed)?, loss)
    };
    store.accumulate(&grads.0);
    Ok(grads.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Cosine-anneal the learning rate to zero over `steps`.
    pub cosine_lr: bool,
    pub cond_drop: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            cosine_lr: true,
            cond_drop: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            bail!(Config, "training steps and batch size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            bail!(Config, "learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.cond_drop) {
            bail!(Config, "cond_drop {} outside [0, 1]", self.cond_drop);
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.cosine_lr {
            self.learning_rate * 0.5 * (1.0 + (PI * step as f64 / self.steps as f64).cos())
        } else {
            self.learning_rate
        }
    }
}

/// Group drawn by each training step, uniform over `groups`, from the
/// `groups` stream of `seed`.
pub fn group_draws(groups: usize, steps: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng::stream(seed, "groups", 0);
    (0..steps).map(|_| rng.random_range(0..groups)).collect()
}

/// Full training run on pre-normalized `(target, cond)` groups. Every step
/// takes its whole batch from one group (see [`group_draws`]); samples are
/// drawn with replacement from the `train` stream of `seed`. Returns
/// per-step losses.
pub fn train(
    store: &mut ParamStore,
    exec: Execution,
    schedule: &NoiseSchedule,
    groups: &[(Samples, Samples)],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if groups.is_empty() {
        bail!(Invalid, "no training data");
    }
    for (target, cond) in groups {
        if target.n == 0 || target.n != cond.n {
            bail!(Invalid, "group with {} targets and {} conditions", target.n, cond.n);
        }
    }
    let draws = group_draws(groups.len(), cfg.steps, seed);
    let mut rng = rng::stream(seed, "train", 0);
    let mut losses = Vec::with_capacity(cfg.steps);
    for (step, g) in draws.into_iter().enumerate() {
        let (target, cond) = &groups[g];
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..target.n)).collect();
        let xb = Samples::new(idx.len(), target.c, target.h, target.w, target.gather(&idx))?;
        let cb = Samples::new(idx.len(), cond.c, cond.h, cond.w, cond.gather(&idx))?;
        losses.push(train_step(store, exec, schedule, &xb, &cb, cfg.cond_drop, &mut rng)?);
        store.adam_step(cfg.lr_at(step), 0.9, 0.999, 1e-8)?;
    }
    Ok(losses)
}

/// Adds `√(1−ᾱ_k)·x_k`, the noise estimate that is exact for unit-variance
/// Gaussian data, to the outputs of a `prior_skip` network.
fn add_prior(pred: &mut [f64], schedule: &NoiseSchedule, cfg: &DenoiserConfig, x: &[f64], steps: &[usize]) {
    if !cfg.prior_skip {
        return;
    }
    let len = pred.len() / steps.len();
    for (s, &k) in steps.iter().enumerate() {
        let b = (1.0 - schedule.alpha_bar[k]).sqrt();
        for i in s * len..(s + 1) * len {
            pred[i] += b * x[i];
        }
    }
}

/// `ε(x,∅) + ω(ε(x,y) − ε(x,∅))`, evaluating only the passes the weight
/// needs.
pub fn cfg_epsilon(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    x: &[f64],
    cond: &Samples,
    steps: &[usize],
    omega: f64,
) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&omega) {
        bail!(Invalid, "cfg weight {} outside [0, 1]", omega);
    }
    let batch = |null: bool| Batch {
        n: cond.n,
        h: cond.h,
        w: cond.w,
        x: x.to_vec(),
        cond: cond.data.clone(),
        null: vec![null; cond.n],
        steps: steps.to_vec(),
    };
    let mut eps = if omega == 1.0 {
        net.predict(&batch(false))?
    } else {
        let uncond = net.predict(&batch(true))?;
        if omega == 0.0 {
            uncond
        } else {
            let cond_eps = net.predict(&batch(false))?;
            uncond.iter().zip(&cond_eps).map(|(u, c)| u + omega * (c - u)).collect()
        }
    };
    add_prior(&mut eps, schedule, net.config(), x, steps);
    Ok(eps)
}

/// Maps sample index and the normalized `x0` estimate to `∇J` in the same
/// coordinates.
pub type GuidanceFn<'a> = dyn Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync + 'a;

/// Reverse diffusion from unit Gaussian noise for every condition in `cond`.
/// Sample `i` draws its noise from the `sample` stream of `seeds[i]`, so
/// results do not depend on batch composition. Returns normalized `x0`.
pub fn sample(
    store: &ParamStore,
    exec: Execution,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cond: &Samples,
    seeds: &[u64],
    guidance: Option<&GuidanceFn>,
) -> Result<Samples> {
    sampler.validate(schedule.steps)?;
    let cfg = &store.config;
    if cfg.diffusion_steps != schedule.steps {
        bail!(
            Config,
            "denoiser expects {} steps, schedule has {}",
            cfg.diffusion_steps,
            schedule.steps
        );
    }
    if cond.c != cfg.cond_channels || seeds.len() != cond.n {
        bail!(
            Shape,
            "{} conditions of {} channels with {} seeds for a {}-channel model",
            cond.n,
            cond.c,
            seeds.len(),
            cfg.cond_channels
        );
    }
    let (n, len) = (cond.n, cfg.in_channels * cond.h * cond.w);
    let mut rngs: Vec<StreamRng> = seeds.iter().map(|s| rng::stream(*s, "sample", 0)).collect();
    let mut x: Vec<f64> = rngs.iter_mut().flat_map(|r| gaussian(r, len)).collect();
    let net = Denoiser::new(store, exec);
    for (k, k_prev) in sampler.trajectory(schedule.steps) {
        let mut eps = cfg_epsilon(&net, schedule, &x, cond, &vec![k; n], sampler.cfg_weight)?;
        let mut x0_hat = None;
        if let Some(b) = sampler.clip_x0 {
            let x0: Vec<f64> = schedule.estimate_x0(&x, &eps, k)?.into_iter().map(|v| v.clamp(-b, b)).collect();
            let (a, s) = (schedule.alpha_bar[k].sqrt(), (1.0 - schedule.alpha_bar[k]).sqrt());
            for ((e, xv), x0v) in eps.iter_mut().zip(&x).zip(&x0) {
                *e = (xv - a * x0v) / s;
            }
            x0_hat = Some(x0);
        }
        let co = match sampler.mode {
            SamplerMode::Ddpm => schedule.ddpm_coefficients(k),
            SamplerMode::Ddim => schedule.ddim_coefficients(k, k_prev, sampler.ddim_eta),
        };
        let lambda = schedule.guidance_weight(k, sampler.guidance_weight, sampler.guidance_schedule);
        let grads = match guidance {
            Some(g) if lambda > 0.0 => {
                let x0 = match x0_hat {
                    Some(v) => v,
                    None => schedule.estimate_x0(&x, &eps, k)?,
                };
                let grads = par::try_map_indexed(exec, n, |s| g(s, &x0[s * len..(s + 1) * len]))?;
                if grads.iter().any(|v| v.len() != len || v.iter().any(|g| !g.is_finite())) {
                    return Err(Error::NonFinite(format!("guidance gradient at step {k}")));
                }
                Some(grads)
            }
            _ => None,
        };
        // d x0_hat / d x_k with ε̂ held fixed
        let scale = lambda / schedule.alpha_bar[k].sqrt();
        for s in 0..n {
            let noise = if co.sigma > 0.0 { gaussian(&mut rngs[s], len) } else { Vec::new() };
            for i in 0..len {
                let j = s * len + i;
                let mut v = co.c_x * x[j] + co.c_eps * eps[j];
                if let Some(g) = &grads {
                    v -= scale * g[s][i];
                }
                if co.sigma > 0.0 {
                    v += co.sigma * noise[i];
                }
                x[j] = v;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample state at step {k}")));
        }
    }
    Samples::new(n, cfg.in_channels, cond.h, cond.w, x)
}
