//! Ground-truth data: the forced viscous Burgers solver, a periodic
//! advection solver, random initial conditions and forcing, dataset files,
//! and the control objective scored by the solver.
//!
//! Spatial grids are left-aligned on `[0, 1)`: a line of `n` samples sits at
//! `x_j = j / n`, with the Dirichlet boundary value `0` implied at `x = 1`.
//! State trajectories carry `nt + 1` time stamps (initial frame included),
//! force sequences `nt` stamps, each held constant over its interval.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::par::{self, Execution};
use crate::rng;
use crate::tensor::GridTensor;

/// Fine-grid discretization of `u_t + u·u_x = ν·u_xx + f` on `[0, 1]` with
/// `u = 0` at both ends.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BurgersConfig {
    pub nu: f64,
    pub horizon: f64,
    pub fine_nx: usize,
    pub fine_nt: usize,
    pub store_nt: usize,
    pub store_nx: usize,
    /// Explicit sub-steps per fine step; `None` picks the smallest count
    /// giving `ν·dt/dx² ≤ 0.4`.
    #[serde(default)]
    pub substeps: Option<usize>,
}

impl Default for BurgersConfig {
    fn default() -> Self {
        Self {
            nu: 0.01,
            horizon: 8.0,
            fine_nx: 120 * 16,
            fine_nt: 4800 * 16,
            store_nt: 80,
            store_nx: 120,
            substeps: None,
        }
    }
}

impl BurgersConfig {
    /// Same storage grid with an internal refinement of `factor` (16 is the
    /// full-resolution default).
    pub fn with_refinement(factor: usize) -> Self {
        Self {
            fine_nx: 120 * factor,
            fine_nt: 4800 * factor,
            ..Self::default()
        }
    }

    /// The reduced solver used for desk-scale experiments.
    pub fn desk() -> Self {
        Self::with_refinement(4)
    }

    pub fn dx(&self) -> f64 {
        1.0 / self.fine_nx as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.fine_nt as f64
    }

    pub fn substep_count(&self) -> usize {
        self.substeps.unwrap_or_else(|| {
            let r = self.nu * self.dt() / (self.dx() * self.dx());
            ((r / 0.4).ceil() as usize).max(1)
        })
    }

    /// Diffusion number `ν·dt/dx²` of the step actually taken.
    pub fn diffusion_number(&self) -> f64 {
        self.nu * self.dt() / self.substep_count() as f64 / (self.dx() * self.dx())
    }

    pub fn validate(&self) -> Result<()> {
        if self.store_nx == 0 || self.store_nt == 0 || self.fine_nx == 0 || self.fine_nt == 0 {
            bail!(Config, "grid sizes must be positive");
        }
        if self.fine_nx % self.store_nx != 0 || self.fine_nt % self.store_nt != 0 {
            bail!(
                Config,
                "fine grid {}x{} is not a multiple of the stored grid {}x{}",
                self.fine_nt,
                self.fine_nx,
                self.store_nt,
                self.store_nx
            );
        }
        if !(self.nu >= 0.0 && self.horizon > 0.0) {
            bail!(Config, "need nu >= 0 and horizon > 0");
        }
        if self.substeps == Some(0) {
            bail!(Config, "substeps must be at least 1");
        }
        let r = self.diffusion_number();
        if r > 0.5 {
            bail!(Stability, "nu*dt/dx^2 = {:.4} exceeds 0.5", r);
        }
        Ok(())
    }
}

/// What lies beyond the last sample of a left-aligned line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RightEdge {
    /// Homogeneous Dirichlet value at `x = 1`.
    Zero,
    /// Hold the last sample.
    Clamp,
}

/// Linear interpolation of a left-aligned line onto `n_out` left-aligned
/// samples. Coincident nodes are copied exactly.
pub fn resample_line(values: &[f64], n_out: usize, right: RightEdge) -> Vec<f64> {
    let n = values.len();
    (0..n_out)
        .map(|j| {
            // position in input index units, computed exactly for rational grids
            let num = j * n;
            let lo = num / n_out;
            let rem = num % n_out;
            if rem == 0 {
                return values[lo];
            }
            let w = rem as f64 / n_out as f64;
            let hi = if lo + 1 < n {
                values[lo + 1]
            } else {
                match right {
                    RightEdge::Zero => 0.0,
                    RightEdge::Clamp => values[n - 1],
                }
            };
            values[lo] + w * (hi - values[lo])
        })
        .collect()
}

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Godunov flux of `u²/2` between reconstructed states.
fn godunov(ul: f64, ur: f64) -> f64 {
    if ul <= ur {
        if ul < 0.0 && ur > 0.0 {
            0.0
        } else {
            0.5 * ul.min(ur).abs().min(ul.max(ur).abs()).powi(2)
        }
    } else {
        0.5 * (ul * ul).max(ur * ur)
    }
}

/// Integrates forced Burgers from `u0` under `force` and returns the stored
/// `(store_nt + 1) × store_nx` trajectory.
///
/// The scheme is explicit Euler with MUSCL-minmod reconstruction and a
/// Godunov flux for the convective term and central differences for the
/// viscous term. `u0` and each force stamp are lifted linearly to the fine
/// grid; the force is held constant over its stamp interval.
pub fn solve_burgers(u0: &[f64], force: &GridTensor, cfg: &BurgersConfig) -> Result<GridTensor> {
    cfg.validate()?;
    if u0.len() != cfg.store_nx {
        bail!(Shape, "u0 has {} samples, expected {}", u0.len(), cfg.store_nx);
    }
    if force.dims() != [cfg.store_nt, cfg.store_nx] {
        bail!(
            Shape,
            "force dims {:?}, expected [{}, {}]",
            force.dims(),
            cfg.store_nt,
            cfg.store_nx
        );
    }
    let nx = cfg.fine_nx;
    let sub = cfg.substep_count();
    let dx = cfg.dx();
    let dt = cfg.dt() / sub as f64;
    let c_adv = dt / dx;
    let c_diff = cfg.nu * dt / (dx * dx);
    let steps_per_stamp = cfg.fine_nt / cfg.store_nt * sub;
    let stride = nx / cfg.store_nx;

    // nodes 0..=nx, both ends pinned
    let mut u = resample_line(u0, nx, RightEdge::Zero);
    u.push(0.0);
    u[0] = 0.0;
    let mut next = u.clone();
    let mut slope = vec![0.0; nx + 1];
    let mut flux = vec![0.0; nx];

    let mut stored = Vec::with_capacity((cfg.store_nt + 1) * cfg.store_nx);
    let store = |u: &[f64], out: &mut Vec<f64>| out.extend((0..cfg.store_nx).map(|j| u[j * stride]));
    store(&u, &mut stored);

    for stamp in 0..cfg.store_nt {
        let f_row = &force.data()[stamp * cfg.store_nx..(stamp + 1) * cfg.store_nx];
        let mut f = resample_line(f_row, nx, RightEdge::Clamp);
        f.push(*f_row.last().unwrap());
        for _ in 0..steps_per_stamp {
            for i in 1..nx {
                slope[i] = minmod(u[i] - u[i - 1], u[i + 1] - u[i]);
            }
            for i in 0..nx {
                let ul = u[i] + 0.5 * slope[i];
                let ur = u[i + 1] - 0.5 * slope[i + 1];
                flux[i] = godunov(ul, ur);
            }
            for i in 1..nx {
                next[i] = u[i] - c_adv * (flux[i] - flux[i - 1])
                    + c_diff * (u[i + 1] - 2.0 * u[i] + u[i - 1])
                    + dt * f[i];
            }
            std::mem::swap(&mut u, &mut next);
        }
        if let Some(i) = u.iter().position(|v| !v.is_finite() || v.abs() > 1e6) {
            bail!(BlowUp, "u[{}] = {} at stamp {}", i, u[i], stamp + 1);
        }
        store(&u, &mut stored);
    }
    GridTensor::time_space(cfg.store_nt + 1, cfg.store_nx, stored)?
        .with_domain(vec![cfg.horizon, 1.0])
}

/// Exact periodic transport `u(t, x) = u0(x − c·t)` on `[0, 1)`, realized by
/// a Fourier phase shift. Returns `(nt + 1) × n` frames over `[0, horizon]`.
pub fn solve_advection(u0: &[f64], speed: f64, horizon: f64, nt: usize) -> Result<GridTensor> {
    use rustfft::num_complex::Complex;
    let n = u0.len();
    if n < 2 || nt == 0 {
        bail!(Shape, "advection needs n >= 2 and nt >= 1");
    }
    let mut planner = rustfft::FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut spec: Vec<Complex<f64>> = u0.iter().map(|v| Complex::new(*v, 0.0)).collect();
    fwd.process(&mut spec);
    let mut data = Vec::with_capacity((nt + 1) * n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for s in 0..=nt {
        let shift = speed * horizon * s as f64 / nt as f64;
        for (k, (b, c)) in buf.iter_mut().zip(&spec).enumerate() {
            let freq = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            if n % 2 == 0 && k == n / 2 {
                // keep the Nyquist mode real
                *b = c * (std::f64::consts::PI * n as f64 * shift).cos();
            } else {
                let phase = -2.0 * std::f64::consts::PI * freq * shift;
                *b = c * Complex::from_polar(1.0, phase);
            }
        }
        inv.process(&mut buf);
        data.extend(buf.iter().map(|c| c.re / n as f64));
    }
    GridTensor::time_space(nt + 1, n, data)?.with_domain(vec![horizon, 1.0])
}

/// Two-Gaussian initial condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcSpec {
    pub amp: [f64; 2],
    pub center: [f64; 2],
    pub width: [f64; 2],
}

impl IcSpec {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            amp: [rng.random_range(0.0..2.0), rng.random_range(-2.0..0.0)],
            center: [rng.random_range(0.2..0.4), rng.random_range(0.6..0.8)],
            width: [rng.random_range(0.05..0.15), rng.random_range(0.05..0.15)],
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        (0..2)
            .map(|i| {
                self.amp[i] * (-(x - self.center[i]).powi(2) / (2.0 * self.width[i].powi(2))).exp()
            })
            .sum()
    }

    pub fn grid(&self, nx: usize) -> Vec<f64> {
        (0..nx).map(|j| self.eval(j as f64 / nx as f64)).collect()
    }
}

/// Eight space-time Gaussians; time enters normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceSpec {
    pub amp: [f64; 8],
    pub center_x: [f64; 8],
    pub center_t: [f64; 8],
    pub width_x: [f64; 8],
    pub width_t: [f64; 8],
}

impl ForceSpec {
    pub fn sample(rng: &mut impl Rng) -> Self {
        let mut s = Self {
            amp: [0.0; 8],
            center_x: [0.0; 8],
            center_t: [0.0; 8],
            width_x: [0.0; 8],
            width_t: [0.0; 8],
        };
        for i in 0..8 {
            s.center_x[i] = rng.random_range(0.0..1.0);
            s.center_t[i] = rng.random_range(0.0..1.0);
            s.width_x[i] = rng.random_range(0.1..0.4);
            s.width_t[i] = rng.random_range(0.1..0.4);
            let keep = i == 0 || rng.random_bool(0.5);
            let a = rng.random_range(-1.5..1.5);
            s.amp[i] = if keep { a } else { 0.0 };
        }
        s
    }

    pub fn eval(&self, tau: f64, x: f64) -> f64 {
        (0..8)
            .map(|i| {
                self.amp[i]
                    * (-(x - self.center_x[i]).powi(2) / (2.0 * self.width_x[i].powi(2))).exp()
                    * (-(tau - self.center_t[i]).powi(2) / (2.0 * self.width_t[i].powi(2))).exp()
            })
            .sum()
    }

    /// Samples the force at stamp starts `τ = n / nt`.
    pub fn grid(&self, nt: usize, nx: usize) -> Result<GridTensor> {
        GridTensor::from_fn(
            &[nt, nx],
            &[crate::AxisRole::Time, crate::AxisRole::Space],
            |i| self.eval(i[0] as f64 / nt as f64, i[1] as f64 / nx as f64),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum System {
    Burgers,
    Advection,
}

impl std::str::FromStr for System {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "burgers" => Ok(System::Burgers),
            "advection" => Ok(System::Advection),
            other => Err(Error::Invalid(format!("unknown system '{other}'"))),
        }
    }
}

/// One generated trajectory.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub seed: u64,
    /// `(nt + 1) × nx` state.
    pub u: GridTensor,
    /// `nt × nx` force.
    pub f: GridTensor,
}

impl Trajectory {
    pub fn u0(&self) -> Vec<f64> {
        self.u.data()[..self.u.dims()[1]].to_vec()
    }

    pub fn u_final(&self) -> Vec<f64> {
        let nx = self.u.dims()[1];
        self.u.data()[self.u.len() - nx..].to_vec()
    }
}

/// Generates trajectory `index` of a dataset with master seed `seed`.
pub fn generate_one(system: System, seed: u64, index: usize, cfg: &BurgersConfig) -> Result<Trajectory> {
    let tseed = rng::derive_seed(seed, "data", index as u64);
    let mut r = rng::stream(tseed, "trajectory", 0);
    match system {
        System::Burgers => {
            let ic = IcSpec::sample(&mut r);
            let force = ForceSpec::sample(&mut r).grid(cfg.store_nt, cfg.store_nx)?;
            let u = solve_burgers(&ic.grid(cfg.store_nx), &force, cfg)?;
            Ok(Trajectory { seed: tseed, u, f: force })
        }
        System::Advection => {
            let n = cfg.store_nx;
            let modes: Vec<(f64, f64)> = (0..3)
                .map(|_| (r.random_range(-1.0..1.0), r.random_range(0.0..1.0)))
                .collect();
            let u0: Vec<f64> = (0..n)
                .map(|j| {
                    let x = j as f64 / n as f64;
                    modes
                        .iter()
                        .enumerate()
                        .map(|(k, (a, p))| a * (2.0 * std::f64::consts::PI * ((k + 1) as f64 * x + p)).sin())
                        .sum()
                })
                .collect();
            let u = solve_advection(&u0, 1.0, cfg.horizon, cfg.store_nt)?;
            let f = GridTensor::zeros(&[cfg.store_nt, n], &[crate::AxisRole::Time, crate::AxisRole::Space])?;
            Ok(Trajectory { seed: tseed, u, f })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub sample_id: usize,
    pub seed: u64,
    pub u_path: String,
    pub f_path: String,
}

/// A dataset directory: `manifest.csv` plus `WDT1` tensor files.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Writes `n` trajectories plus `manifest.csv` into `out`. Output bytes
/// depend only on `(system, n, seed, cfg)`.
pub fn gen_dataset(
    n: usize,
    system: System,
    seed: u64,
    cfg: &BurgersConfig,
    out: &Path,
    exec: Execution,
) -> Result<Dataset> {
    if n == 0 {
        bail!(Invalid, "dataset size must be at least 1");
    }
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let entries = par::try_map_indexed(exec, n, |i| {
        let traj = generate_one(system, seed, i, cfg)?;
        let u_path = format!("u_{i:05}.wdt");
        let f_path = format!("f_{i:05}.wdt");
        traj.u.write(&out.join(&u_path))?;
        traj.f.write(&out.join(&f_path))?;
        Ok::<_, Error>(ManifestEntry {
            sample_id: i,
            seed: traj.seed,
            u_path,
            f_path,
        })
    })?;
    let mut manifest = String::from("sample_id,seed,u_path,f_path\n");
    for e in &entries {
        manifest.push_str(&format!("{},{},{},{}\n", e.sample_id, e.seed, e.u_path, e.f_path));
    }
    let path = out.join("manifest.csv");
    std::fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(Dataset {
        dir: out.to_path_buf(),
        entries,
    })
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.csv");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        if lines.next() != Some("sample_id,seed,u_path,f_path") {
            return Err(Error::corrupt(&path, "unexpected manifest header"));
        }
        let entries = lines
            .filter(|l| !l.is_empty())
            .map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                if cols.len() != 4 {
                    return Err(Error::corrupt(&path, format!("bad manifest row '{l}'")));
                }
                let bad = |_| Error::corrupt(&path, format!("bad manifest row '{l}'"));
                Ok(ManifestEntry {
                    sample_id: cols[0].parse().map_err(bad)?,
                    seed: cols[1].parse().map_err(bad)?,
                    u_path: cols[2].to_string(),
                    f_path: cols[3].to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<Trajectory> {
        let e = self
            .entries
            .get(i)
            .ok_or_else(|| Error::Invalid(format!("sample {i} not in dataset")))?;
        Ok(Trajectory {
            seed: e.seed,
            u: GridTensor::read(&self.dir.join(&e.u_path))?,
            f: GridTensor::read(&self.dir.join(&e.f_path))?,
        })
    }

    pub fn load_all(&self, exec: Execution) -> Result<Vec<Trajectory>> {
        par::try_map_indexed(exec, self.len(), |i| self.load(i))
    }
}

/// Terminal mismatch plus control energy,
/// `J = ∫|u(T,x) − u*(x)|² dx + α ∫∫|f|² dt dx`, with `u(T)` produced by the
/// solver from `u0` under `f`.
///
/// Inputs on other grids are linearly interpolated onto the solver's stored
/// grid first; both integrals are midpoint sums on that grid.
pub fn eval_control_objective(
    f: &GridTensor,
    u0: &[f64],
    u_star: &[f64],
    alpha: f64,
    cfg: &BurgersConfig,
) -> Result<f64> {
    if f.rank() != 2 || u0.is_empty() || u_star.is_empty() {
        bail!(Shape, "control must be time × space, u0/u* non-empty");
    }
    let (nt, nx) = (cfg.store_nt, cfg.store_nx);
    let f_store = resample_force(f, nt, nx)?;
    let u0s = resample_line(u0, nx, RightEdge::Zero);
    let us = resample_line(u_star, nx, RightEdge::Zero);
    let traj = solve_burgers(&u0s, &f_store, cfg)?;
    let dx = 1.0 / nx as f64;
    let dt = cfg.horizon / nt as f64;
    let last = &traj.data()[nt * nx..];
    let mismatch: f64 = last.iter().zip(&us).map(|(a, b)| (a - b).powi(2)).sum::<f64>() * dx;
    let energy: f64 = f_store.data().iter().map(|v| v * v).sum::<f64>() * dt * dx;
    Ok(mismatch + alpha * energy)
}

/// Bilinear resampling of a `time × space` force onto `nt × nx`.
pub fn resample_force(f: &GridTensor, nt: usize, nx: usize) -> Result<GridTensor> {
    let [ft, fx] = [f.dims()[0], f.dims()[1]];
    if ft == nt && fx == nx {
        return Ok(f.clone());
    }
    let rows = f.map_lines(1, nx, |src, dst| {
        dst.copy_from_slice(&resample_line(src, nx, RightEdge::Clamp))
    })?;
    rows.map_lines(0, nt, |src, dst| {
        dst.copy_from_slice(&resample_line(src, nt, RightEdge::Clamp))
    })
}
