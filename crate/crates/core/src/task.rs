//! Wavelet channel layouts of the three generation tasks, model training
//! and inference on them, and the model-side control objective used for
//! guidance.
//!
//! | task     | target channels       | condition channels                      |
//! |----------|-----------------------|-----------------------------------------|
//! | simulate | `W_u` (4)             | `W_f` (4), `W_u0` (2)                   |
//! | control  | `W_u` (4), `W_f` (4)  | `W_u0` (2), `W_u*` (2)                  |
//! | superres | `W_u` (4)             | `W_f` (4), `W_u0` (2), aligned coarse `W_u` (4) |
//!
//! States are `(nt+1)×nx`; forces are `nt×nx` and get their last row
//! repeated before the 2-D transform so both share coefficient dims. 1-D
//! quantities are transformed in space and repeated along time.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffusion::{self, NoiseSchedule, SamplerConfig, Samples, TrainConfig};
use crate::error::{bail, Error, Result};
use crate::multires;
use crate::nn::{init_params, DenoiserConfig, NormStats, ParamStore};
use crate::par::{self, Execution};
use crate::pde::Trajectory;
use crate::tensor::{AxisRole, GridTensor};
use crate::wavelet::{dwt_axis, dwt_nd, idwt_nd, idwt_nd_adjoint, Mode, SubbandSet, WaveletName, WaveletSpec};

const AXES: [usize; 2] = [0, 1];
const CTS: [AxisRole; 3] = [AxisRole::Channel, AxisRole::Time, AxisRole::Space];

/// Trajectory ↔ coefficient-channel conversion.
#[derive(Clone, Debug, PartialEq)]
pub struct Codec {
    pub spec: WaveletSpec,
}

impl Default for Codec {
    fn default() -> Self {
        Self {
            spec: WaveletSpec::new(WaveletName::Bior24, Mode::Periodization),
        }
    }
}

fn pad_last_row(f: &GridTensor, zero: bool) -> Result<GridTensor> {
    if f.rank() != 2 {
        bail!(Shape, "expected a time × space grid, got dims {:?}", f.dims());
    }
    let (nt, nx) = (f.dims()[0], f.dims()[1]);
    let mut data = f.data().to_vec();
    if zero {
        data.extend(std::iter::repeat_n(0.0, nx));
    } else {
        data.extend_from_slice(&f.data()[(nt - 1) * nx..]);
    }
    GridTensor::new(vec![nt + 1, nx], f.roles().to_vec(), data)
}

impl Codec {
    pub fn new(spec: WaveletSpec) -> Self {
        Self { spec }
    }

    /// Coefficient dims of an `n0×n1` grid.
    pub fn coeff_dims(&self, dims: [usize; 2]) -> [usize; 2] {
        [self.spec.coeff_len(dims[0]), self.spec.coeff_len(dims[1])]
    }

    /// Four stacked subbands of a state grid.
    pub fn state(&self, u: &GridTensor) -> Result<GridTensor> {
        dwt_nd(u, &self.spec, &AXES)?.to_channels()
    }

    pub fn force(&self, f: &GridTensor) -> Result<GridTensor> {
        self.state(&pad_last_row(f, false)?)
    }

    /// Approximation and detail of a spatial line, each repeated over
    /// `rows` coefficient rows.
    pub fn line(&self, v: &[f64], rows: usize) -> Result<GridTensor> {
        let (a, d) = dwt_axis(v, &self.spec)?;
        let mut data = Vec::with_capacity(2 * rows * a.len());
        for band in [&a, &d] {
            for _ in 0..rows {
                data.extend_from_slice(band);
            }
        }
        GridTensor::new(vec![2, rows, a.len()], CTS.to_vec(), data)
    }

    pub fn decode_state(&self, c: &GridTensor, dims: [usize; 2]) -> Result<GridTensor> {
        idwt_nd(&SubbandSet::from_channels(c, &self.spec, &AXES, &dims)?)
    }

    /// Inverse of [`Codec::force`] for an `nt×nx` force.
    pub fn decode_force(&self, c: &GridTensor, dims: [usize; 2]) -> Result<GridTensor> {
        self.decode_state(c, [dims[0] + 1, dims[1]])?.narrow(0, 0, dims[0])
    }

    /// Transpose of [`Codec::decode_state`].
    pub fn state_adjoint(&self, grad: &GridTensor) -> Result<GridTensor> {
        idwt_nd_adjoint(grad, &self.spec, &AXES)?.to_channels()
    }

    /// Transpose of [`Codec::decode_force`].
    pub fn force_adjoint(&self, grad: &GridTensor) -> Result<GridTensor> {
        self.state_adjoint(&pad_last_row(grad, true)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Simulate,
    Control,
    Superres,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Simulate => "simulate",
            TaskKind::Control => "control",
            TaskKind::Superres => "superres",
        }
    }

    pub fn target_channels(self) -> usize {
        match self {
            TaskKind::Control => 8,
            _ => 4,
        }
    }

    pub fn cond_channels(self) -> usize {
        match self {
            TaskKind::Simulate => 6,
            TaskKind::Control => 4,
            TaskKind::Superres => 10,
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simulate" => Ok(TaskKind::Simulate),
            "control" => Ok(TaskKind::Control),
            "superres" => Ok(TaskKind::Superres),
            other => Err(Error::Invalid(format!("unknown task '{other}'"))),
        }
    }
}

fn stack(parts: &[&GridTensor]) -> Result<GridTensor> {
    GridTensor::concat(parts, 0)
}

impl Codec {
    pub fn simulate_cond(&self, f: &GridTensor, u0: &[f64]) -> Result<GridTensor> {
        let wf = self.force(f)?;
        let rows = wf.dims()[1];
        stack(&[&wf, &self.line(u0, rows)?])
    }

    pub fn control_cond(&self, u0: &[f64], u_star: &[f64], nt: usize) -> Result<GridTensor> {
        let rows = self.spec.coeff_len(nt + 1);
        stack(&[&self.line(u0, rows)?, &self.line(u_star, rows)?])
    }

    /// `low` holds the coarse state's coefficients; they are aligned to the
    /// fine coefficient dims by duplication.
    pub fn superres_cond(&self, f: &GridTensor, u0: &[f64], low: &GridTensor) -> Result<GridTensor> {
        let base = self.simulate_cond(f, u0)?;
        let mut target = low.dims().to_vec();
        target[1..].copy_from_slice(&base.dims()[1..]);
        let aligned = multires::align_duplicate(low, &target)?;
        stack(&[&base, &aligned])
    }

    fn line_of(u: &GridTensor, row: usize) -> Vec<f64> {
        let nx = u.dims()[1];
        u.data()[row * nx..(row + 1) * nx].to_vec()
    }

    /// `(target, cond)` for one trajectory already at the task resolution.
    /// `coarse` is the next-coarser state (super-resolution only); the
    /// super-resolution target is the detail left after interpolating it to
    /// the grid of `u`.
    pub fn example(
        &self,
        kind: TaskKind,
        u: &GridTensor,
        f: &GridTensor,
        coarse: Option<&GridTensor>,
    ) -> Result<(GridTensor, GridTensor)> {
        let u0 = Self::line_of(u, 0);
        match kind {
            TaskKind::Simulate => Ok((self.state(u)?, self.simulate_cond(f, &u0)?)),
            TaskKind::Control => {
                let nt = f.dims()[0];
                let target = stack(&[&self.state(u)?, &self.force(f)?])?;
                Ok((target, self.control_cond(&u0, &Self::line_of(u, nt), nt)?))
            }
            TaskKind::Superres => {
                let Some(low) = coarse else {
                    bail!(Invalid, "super-resolution examples need the coarse state");
                };
                let base = multires::interpolate_state(low, u.dims())?;
                let detail = self.state(&u.zip_map(&base, |a, b| a - b)?)?;
                Ok((detail, self.superres_cond(f, &u0, &self.state(low)?)?))
            }
        }
    }

    /// Stacked examples of `kind` for every trajectory at `level`.
    pub fn examples(
        &self,
        kind: TaskKind,
        trajs: &[Trajectory],
        level: usize,
        exec: Execution,
    ) -> Result<(Samples, Samples)> {
        if trajs.is_empty() {
            bail!(Invalid, "no trajectories");
        }
        let parts = par::try_map_indexed(exec, trajs.len(), |i| {
            let t = &trajs[i];
            let u = multires::state_at_level(&t.u, level)?;
            let f = multires::force_at_level(&t.f, level)?;
            let coarse = match kind {
                TaskKind::Superres => Some(multires::state_at_level(&t.u, level + 1)?),
                _ => None,
            };
            self.example(kind, &u, &f, coarse.as_ref())
        })?;
        to_samples(parts)
    }
}

fn to_samples(parts: Vec<(GridTensor, GridTensor)>) -> Result<(Samples, Samples)> {
    let (t0, c0) = &parts[0];
    let [tc, h, w] = [t0.dims()[0], t0.dims()[1], t0.dims()[2]];
    let cc = c0.dims()[0];
    let (ts, cs): (Vec<_>, Vec<_>) = parts.into_iter().map(|(t, c)| (t.into_data(), c.into_data())).unzip();
    Ok((Samples::stack(&ts, tc, h, w)?, Samples::stack(&cs, cc, h, w)?))
}

/// Conditions of several cases stacked into one [`Samples`].
pub fn stack_conds(conds: &[GridTensor]) -> Result<Samples> {
    let Some(c0) = conds.first() else {
        bail!(Invalid, "no conditions");
    };
    let parts: Vec<Vec<f64>> = conds.iter().map(|c| c.data().to_vec()).collect();
    Samples::stack(&parts, c0.dims()[0], c0.dims()[1], c0.dims()[2])
}

/// Records what a checkpoint was trained for.
pub fn tag(store: &mut ParamStore, kind: TaskKind, codec: &Codec, extra: &[(&str, String)]) {
    let meta = &mut store.meta;
    meta.insert("task".into(), kind.as_str().into());
    meta.insert("wavelet".into(), codec.spec.name.as_str().into());
    meta.insert(
        "mode".into(),
        match codec.spec.mode {
            Mode::Periodization => "periodization".into(),
            Mode::Zero => "zero".into(),
        },
    );
    for (k, v) in extra {
        meta.insert((*k).into(), v.clone());
    }
}

/// Reads the tag written by [`tag`] and checks it names `kind`.
pub fn read_tag(store: &ParamStore, kind: TaskKind) -> Result<Codec> {
    let get = |k: &str| {
        store
            .meta
            .get(k)
            .ok_or_else(|| Error::Invalid(format!("checkpoint lacks '{k}' metadata")))
    };
    let found: TaskKind = get("task")?.parse()?;
    if found != kind {
        bail!(Invalid, "checkpoint was trained for {}, not {}", found.as_str(), kind.as_str());
    }
    Ok(Codec::new(WaveletSpec::parse(get("wavelet")?, get("mode")?)?))
}

/// Normalizes raw groups with pooled statistics, initializes a network from
/// `seed` and trains it.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    kind: TaskKind,
    codec: &Codec,
    net: &DenoiserConfig,
    groups: &[(Samples, Samples)],
    schedule: &NoiseSchedule,
    train_cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<(ParamStore, Vec<f64>)> {
    let config = DenoiserConfig {
        in_channels: kind.target_channels(),
        cond_channels: kind.cond_channels(),
        diffusion_steps: schedule.steps,
        ..net.clone()
    };
    if groups.iter().any(|(t, c)| t.c != config.in_channels || c.c != config.cond_channels) {
        bail!(Shape, "training data channels do not match the {} task", kind.as_str());
    }
    let stats = diffusion::fit_stats(groups);
    let normed = groups
        .iter()
        .map(|(t, c)| Ok((normalize_target(t, &stats)?, normalize_cond(c, &stats)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut store = init_params(&config, seed)?;
    store.stats = Some(stats);
    tag(&mut store, kind, codec, &[]);
    let losses = diffusion::train(&mut store, exec, schedule, &normed, train_cfg, seed)?;
    Ok((store, losses))
}

fn normalize_target(t: &Samples, s: &NormStats) -> Result<Samples> {
    t.normalize(&s.target_mean, &s.target_std)
}

fn normalize_cond(c: &Samples, s: &NormStats) -> Result<Samples> {
    c.normalize(&s.cond_mean, &s.cond_std)
}

fn stats_of(store: &ParamStore) -> Result<&NormStats> {
    let s = store
        .stats
        .as_ref()
        .ok_or_else(|| Error::Invalid("checkpoint has no normalization statistics".into()))?;
    s.validate()?;
    Ok(s)
}

/// Samples raw (de-normalized) targets for raw conditions.
pub fn generate(
    store: &ParamStore,
    exec: Execution,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cond: &Samples,
    seeds: &[u64],
    guidance: Option<&diffusion::GuidanceFn>,
) -> Result<Samples> {
    let stats = stats_of(store)?;
    let normed = normalize_cond(cond, stats)?;
    let out = diffusion::sample(store, exec, schedule, sampler, &normed, seeds, guidance)?;
    out.denormalize(&stats.target_mean, &stats.target_std)
}

fn channels(s: &Samples, i: usize, from: usize, count: usize) -> Result<GridTensor> {
    let plane = s.h * s.w;
    let data = s.sample(i)[from * plane..(from + count) * plane].to_vec();
    GridTensor::new(vec![count, s.h, s.w], CTS.to_vec(), data)
}

/// BRM simulation: one state trajectory per `(f, u0)` case at the model's
/// resolution.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    store: &ParamStore,
    exec: Execution,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cases: &[(GridTensor, Vec<f64>)],
    seeds: &[u64],
) -> Result<Vec<GridTensor>> {
    let codec = read_tag(store, TaskKind::Simulate)?;
    let conds = cases
        .iter()
        .map(|(f, u0)| codec.simulate_cond(f, u0))
        .collect::<Result<Vec<_>>>()?;
    let out = generate(store, exec, schedule, sampler, &stack_conds(&conds)?, seeds, None)?;
    (0..cases.len())
        .map(|i| {
            let (nt, nx) = (cases[i].0.dims()[0], cases[i].0.dims()[1]);
            codec.decode_state(&channels(&out, i, 0, 4)?, [nt + 1, nx])
        })
        .collect()
}

/// Model-side control objective
/// `J = Σ_x (û_T − u*)² dx + α Σ f̂² dt dx + w_r Σ_x (û_0 − u0)² dx`.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlObjective {
    pub alpha: f64,
    pub horizon: f64,
    pub recon_weight: f64,
}

impl ControlObjective {
    /// Value and gradient with respect to the normalized control-task
    /// coefficients `x0` (8 channels).
    pub fn value_and_grad(
        &self,
        codec: &Codec,
        stats: &NormStats,
        x0: &[f64],
        nt: usize,
        u0: &[f64],
        u_star: &[f64],
    ) -> Result<(f64, Vec<f64>)> {
        let nx = u0.len();
        let [h, w] = codec.coeff_dims([nt + 1, nx]);
        let plane = h * w;
        if x0.len() != 8 * plane || u_star.len() != nx {
            bail!(Shape, "control coefficients or targets do not match {}x{}", nt, nx);
        }
        let raw = Samples::new(1, 8, h, w, x0.to_vec())?.denormalize(&stats.target_mean, &stats.target_std)?;
        let u = codec.decode_state(&channels(&raw, 0, 0, 4)?, [nt + 1, nx])?;
        let f = codec.decode_force(&channels(&raw, 0, 4, 4)?, [nt, nx])?;
        let dx = 1.0 / nx as f64;
        let dt = self.horizon / nt as f64;
        let ud = u.data();
        let mut gu = vec![0.0; ud.len()];
        let mut j = 0.0;
        for x in 0..nx {
            let r = ud[nt * nx + x] - u_star[x];
            j += r * r * dx;
            gu[nt * nx + x] += 2.0 * r * dx;
            let r0 = ud[x] - u0[x];
            j += self.recon_weight * r0 * r0 * dx;
            gu[x] += 2.0 * self.recon_weight * r0 * dx;
        }
        j += self.alpha * f.data().iter().map(|v| v * v).sum::<f64>() * dt * dx;
        let gf: Vec<f64> = f.data().iter().map(|v| 2.0 * self.alpha * v * dt * dx).collect();
        let cu = codec.state_adjoint(&u.with_data(gu)?)?;
        let cf = codec.force_adjoint(&f.with_data(gf)?)?;
        let mut grad: Vec<f64> = cu.data().iter().chain(cf.data()).copied().collect();
        for (i, g) in grad.iter_mut().enumerate() {
            *g *= stats.target_std[i / plane];
        }
        Ok((j, grad))
    }
}

/// One control result at the model's resolution.
#[derive(Clone, Debug)]
pub struct ControlOutput {
    pub force: GridTensor,
    pub state: GridTensor,
}

/// Guided control: jointly samples state and force for every `(u0, u*)`
/// case; `nt` is the number of force rows at the model's resolution.
#[allow(clippy::too_many_arguments)]
pub fn control(
    store: &ParamStore,
    exec: Execution,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    objective: &ControlObjective,
    nt: usize,
    cases: &[(Vec<f64>, Vec<f64>)],
    seeds: &[u64],
) -> Result<Vec<ControlOutput>> {
    let codec = read_tag(store, TaskKind::Control)?;
    let stats = stats_of(store)?;
    let conds = cases
        .iter()
        .map(|(u0, us)| codec.control_cond(u0, us, nt))
        .collect::<Result<Vec<_>>>()?;
    let objective = ControlObjective {
        recon_weight: sampler.recon_guidance_weight,
        ..objective.clone()
    };
    let grad = |i: usize, x0: &[f64]| -> Result<Vec<f64>> {
        let (u0, us) = &cases[i];
        Ok(objective.value_and_grad(&codec, stats, x0, nt, u0, us)?.1)
    };
    let out = generate(store, exec, schedule, sampler, &stack_conds(&conds)?, seeds, Some(&grad))?;
    (0..cases.len())
        .map(|i| {
            let nx = cases[i].0.len();
            Ok(ControlOutput {
                state: codec.decode_state(&channels(&out, i, 0, 4)?, [nt + 1, nx])?,
                force: codec.decode_force(&channels(&out, i, 4, 4)?, [nt, nx])?,
            })
        })
        .collect()
}

/// Checkpoint metadata as printed by the CLI.
pub fn describe(store: &ParamStore) -> BTreeMap<String, String> {
    let mut m = store.meta.clone();
    m.insert("parameters".into(), store.num_scalars().to_string());
    m.insert("adam_steps".into(), store.adam_step.to_string());
    m
}
