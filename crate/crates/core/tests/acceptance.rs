//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! fails if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::StandardNormal;

use wdno::cli::RunConfig;
use wdno::diffusion::{
    cfg_epsilon, NoiseSchedule, SamplerConfig, SamplerMode, ScheduleConfig, SigmaChoice,
};
use wdno::multires::{self, RefineCase, ResolutionPair};
use wdno::nn::{init_params, Batch, Denoiser, DenoiserConfig, Gradients, NormStats, ParamStore};
use wdno::par::Execution;
use wdno::pde::{eval_control_objective, gen_dataset, System, Trajectory};
use wdno::rng::{derive_seed, stream};
use wdno::task::{self, Codec, ControlObjective, TaskKind};
use wdno::tensor::{metrics, upsample, Scheme};
use wdno::wavelet::{dwt_axis, dwt_nd, roundtrip_error, Mode, WaveletName, WaveletSpec};
use wdno::{AxisRole, GridTensor};

const ROUNDTRIP_TOL: f64 = 1e-6;
const ROUNDTRIP_SEEDS: u64 = 100;
const ORACLE_TOL: f64 = 1e-10;
const GRAD_TOL: f64 = 1e-4;
const GRAD_FLOOR: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;
const ADAM_DROP: f64 = 0.9;
const IDENTITY_TOL: f64 = 1e-12;
const SIM_RATIO: f64 = 0.5;
const SIM_SEEDS: [u64; 3] = [0, 1, 2];
const CONTROL_SEEDS: u64 = 20;
const CONTROL_CASES: usize = 10;
const CONTROL_WINS: usize = 15;
const SUPERRES_SHARE: f64 = 0.7;
const SCALE_RATIO: f64 = 2.0;
const N_TRAIN: usize = 500;
const N_TEST: usize = 50;
const DATA_SEED: u64 = 7;

const TS: [AxisRole; 2] = [AxisRole::Time, AxisRole::Space];
const EXEC: Execution = Execution::Parallel;

struct Report {
    lines: Vec<(bool, String)>,
}

impl Report {
    fn record(&mut self, id: usize, name: &str, pass: bool, detail: String) {
        let line = format!("{} {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }
}

fn within(t: Instant, limit: Duration) -> (bool, String) {
    let e = t.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn gaussian(n: usize, seed: u64, name: &str) -> Vec<f64> {
    let mut r = stream(seed, name, 0);
    (0..n).map(|_| r.sample(StandardNormal)).collect()
}

fn random(dims: &[usize], roles: &[AxisRole], seed: u64) -> GridTensor {
    let n = dims.iter().product();
    GridTensor::new(dims.to_vec(), roles.to_vec(), gaussian(n, seed, "acceptance")).unwrap()
}

fn wavelet_roundtrip(rep: &mut Report) {
    let t = Instant::now();
    let cases = [
        (WaveletSpec::new(WaveletName::Bior24, Mode::Periodization), vec![81, 120], TS.to_vec()),
        (
            WaveletSpec::new(WaveletName::Bior13, Mode::Zero),
            vec![32, 64, 64],
            vec![AxisRole::Time, AxisRole::Space, AxisRole::Space],
        ),
    ];
    let mut worst = [0.0f64; 2];
    for (c, (spec, dims, roles)) in cases.iter().enumerate() {
        let axes: Vec<usize> = (0..dims.len()).collect();
        for seed in 0..ROUNDTRIP_SEEDS {
            let x = random(dims, roles, seed);
            worst[c] = worst[c].max(roundtrip_error(&x, spec, &axes).unwrap());
        }
    }
    let (fast, time) = within(t, Duration::from_secs(10));
    rep.record(
        1,
        "wavelet round trip",
        worst.iter().all(|w| *w <= ROUNDTRIP_TOL) && fast,
        format!(
            "max rel_l2 81x120 bior2.4/per {:.2e}, 32x64x64 bior1.3/zero {:.2e} (tol {ROUNDTRIP_TOL:e}, {ROUNDTRIP_SEEDS} seeds each), {time}",
            worst[0], worst[1]
        ),
    );
}

fn shape_fidelity(rep: &mut Report) {
    let per = WaveletSpec::new(WaveletName::Bior24, Mode::Periodization);
    let s = dwt_nd(&random(&[81, 120], &TS, 1), &per, &[0, 1]).unwrap();
    let bands2: Vec<Vec<usize>> = s.bands.values().map(|b| b.dims().to_vec()).collect();
    let ok2 = bands2.len() == 4 && bands2.iter().all(|d| d == &[41, 60]);
    let u = random(&[81, 120], &TS, 2);
    let chain: Vec<Vec<usize>> = (1..=3)
        .map(|level| {
            let state = multires::state_at_level(&u, level).unwrap();
            dwt_nd(&state, &per, &[0, 1]).unwrap().band("LL").unwrap().dims().to_vec()
        })
        .collect();
    let ok_chain = chain == [vec![21, 30], vec![11, 15], vec![6, 8]];
    let zero = WaveletSpec::new(WaveletName::Bior13, Mode::Zero);
    let roles = [AxisRole::Time, AxisRole::Space, AxisRole::Space];
    let s3 = dwt_nd(&random(&[32, 64, 64], &roles, 3), &zero, &[0, 1, 2]).unwrap();
    let bands3: Vec<Vec<usize>> = s3.bands.values().map(|b| b.dims().to_vec()).collect();
    let ok3 = bands3.len() == 8 && bands3.iter().all(|d| d == &[18, 34, 34]);
    rep.record(
        2,
        "shape fidelity",
        ok2 && ok_chain && ok3,
        format!(
            "81x120 -> {} x {:?}; chain {:?}; 32x64x64 -> {} x {:?}",
            bands2.len(),
            bands2[0],
            chain,
            bands3.len(),
            bands3[0]
        ),
    );
}

/// Analysis of one filter as `D·C·E`: extension `E`, linear or circular
/// convolution `C` with the taps, decimation `D`.
fn filter_matrix(h: &[f64], n: usize, mode: Mode) -> Vec<Vec<f64>> {
    let l = h.len();
    let matmul = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        a.iter()
            .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
            .collect()
    };
    match mode {
        Mode::Periodization => {
            let m = n + n % 2;
            // odd lines repeat their last sample
            let e: Vec<Vec<f64>> = (0..m).map(|r| (0..n).map(|c| f64::from(u8::from(c == r.min(n - 1)))).collect()).collect();
            let mut circ = vec![vec![0.0; m]; m];
            for (t, row) in circ.iter_mut().enumerate() {
                for (j, hj) in h.iter().enumerate() {
                    row[(t + l * m - j) % m] += hj;
                }
            }
            let d: Vec<Vec<f64>> = (0..m / 2)
                .map(|i| (0..m).map(|t| f64::from(u8::from(t == (2 * i + l / 2) % m))).collect())
                .collect();
            matmul(&d, &matmul(&circ, &e))
        }
        Mode::Zero => {
            let full = n + l - 1;
            let mut conv = vec![vec![0.0; n]; full];
            for (t, row) in conv.iter_mut().enumerate() {
                for (j, hj) in h.iter().enumerate() {
                    if t >= j && t - j < n {
                        row[t - j] += hj;
                    }
                }
            }
            let d: Vec<Vec<f64>> = (0..full / 2)
                .map(|i| (0..full).map(|t| f64::from(u8::from(t == 2 * i + 1))).collect())
                .collect();
            matmul(&d, &conv)
        }
    }
}

fn oracle_equivalence(rep: &mut Report) {
    let mut worst = 0.0f64;
    let mut count = 0;
    for name in WaveletName::ALL {
        for mode in [Mode::Periodization, Mode::Zero] {
            let spec = WaveletSpec::new(name, mode);
            for n in 8..=32 {
                let x = gaussian(n, n as u64, "oracle");
                let (a, d) = dwt_axis(&x, &spec).unwrap();
                for (fast, h) in [(&a, &spec.dec_lo), (&d, &spec.dec_hi)] {
                    let m = filter_matrix(h, n, mode);
                    assert_eq!(m.len(), fast.len(), "{name:?} {mode:?} n={n}");
                    for (row, f) in m.iter().zip(fast) {
                        let y: f64 = row.iter().zip(&x).map(|(r, v)| r * v).sum();
                        worst = worst.max((y - f).abs());
                    }
                }
                count += 1;
            }
        }
    }
    rep.record(
        3,
        "oracle equivalence",
        worst <= ORACLE_TOL,
        format!("max abs diff {worst:.2e} over {count} (wavelet, mode, length) cases (tol {ORACLE_TOL:e})"),
    );
}

fn gradient_correctness(rep: &mut Report) {
    let t = Instant::now();
    let cfg = DenoiserConfig {
        in_channels: 2,
        cond_channels: 1,
        base_width: 8,
        depth: 1,
        channel_mult: vec![1],
        kernel: 3,
        groups: 4,
        time_embed_dim: 8,
        attention: false,
        diffusion_steps: 1000,
        prior_skip: false,
    };
    let mut store = init_params(&cfg, 3).unwrap();
    store.stats = Some(NormStats::identity(2, 1));
    let mut r = stream(4, "perturb", 0);
    for p in store.params_mut() {
        for v in &mut p.value {
            *v += 0.3 * r.sample::<f64, _>(StandardNormal);
        }
    }
    let (h, w) = (5, 6);
    let batch = Batch {
        n: 2,
        h,
        w,
        x: gaussian(2 * 2 * h * w, 5, "x"),
        cond: gaussian(2 * h * w, 6, "cond"),
        null: vec![false, true],
        steps: vec![3, 640],
    };
    let weights = gaussian(2 * 2 * h * w, 7, "weights");
    let loss = |s: &ParamStore| -> f64 {
        let out = Denoiser::new(s, Execution::Sequential).predict(&batch).unwrap();
        out.iter().zip(&weights).map(|(a, b)| a * b).sum()
    };
    let grads = {
        let (tape, out) = Denoiser::new(&store, Execution::Sequential).run(&batch, true).unwrap();
        tape.backward(out, &weights).unwrap()
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for id in 0..store.len() {
        let g = grads.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; store.get(id).value.len()]);
        for (i, gi) in g.iter().enumerate() {
            let orig = store.get(id).value[i];
            store.params_mut()[id].value[i] = orig + FD_STEP;
            let up = loss(&store);
            store.params_mut()[id].value[i] = orig - FD_STEP;
            let dn = loss(&store);
            store.params_mut()[id].value[i] = orig;
            let fd = (up - dn) / (2.0 * FD_STEP);
            worst = worst.max((fd - gi).abs() / fd.abs().max(gi.abs()).max(GRAD_FLOOR));
            checked += 1;
        }
    }
    let mut toy = init_params(&cfg, 1).unwrap();
    let target: Vec<Vec<f64>> = toy.params().iter().map(|p| vec![0.5; p.value.len()]).collect();
    let quad = |s: &ParamStore| -> f64 {
        s.params()
            .iter()
            .zip(&target)
            .flat_map(|(p, t)| p.value.iter().zip(t).map(|(v, t)| (v - t).powi(2)))
            .sum()
    };
    let start = quad(&toy);
    for _ in 0..200 {
        let g = toy
            .params()
            .iter()
            .zip(&target)
            .map(|(p, t)| Some(p.value.iter().zip(t).map(|(v, t)| 2.0 * (v - t)).collect()))
            .collect();
        toy.accumulate(&Gradients(g));
        toy.adam_step(0.05, 0.9, 0.999, 1e-8).unwrap();
    }
    let drop = 1.0 - quad(&toy) / start;
    let (fast, time) = within(t, Duration::from_secs(60));
    rep.record(
        4,
        "gradient correctness",
        worst <= GRAD_TOL && drop >= ADAM_DROP && fast,
        format!(
            "worst rel err {worst:.2e} over {checked} parameters (tol {GRAD_TOL:e}); Adam toy loss drop {:.1}% (need {:.0}%); {time}",
            100.0 * drop,
            100.0 * ADAM_DROP
        ),
    );
}

fn diffusion_algebra(rep: &mut Report) {
    let s = NoiseSchedule::new(&ScheduleConfig::default()).unwrap();
    let x0 = gaussian(256, 1, "x0");
    let eps = gaussian(256, 2, "eps");
    let mut inv = 0.0f64;
    for k in 0..=s.steps {
        let xk = s.forward_noise(&x0, k, &eps).unwrap();
        let back = s.estimate_x0(&xk, &eps, k).unwrap();
        inv = back.iter().zip(&x0).map(|(a, b)| (a - b).abs()).fold(inv, f64::max);
    }
    // DDIM over every step at η = 1 against DDPM with posterior σ
    let post = NoiseSchedule::new(&ScheduleConfig { sigma: SigmaChoice::Posterior, ..Default::default() }).unwrap();
    let ddim = SamplerConfig { ddim_steps: s.steps, ddim_eta: 1.0, ..Default::default() };
    let ddpm = SamplerConfig { mode: SamplerMode::Ddpm, ..ddim.clone() };
    let same_path = ddim.trajectory(s.steps) == ddpm.trajectory(s.steps);
    let mut coeff = 0.0f64;
    for (k, kp) in ddim.trajectory(s.steps) {
        let a = post.ddpm_coefficients(k);
        let b = s.ddim_coefficients(k, kp, 1.0);
        let sigma_a = if k > 1 { a.sigma } else { b.sigma };
        coeff = coeff
            .max((a.c_x - b.c_x).abs() / a.c_x.abs())
            .max((a.c_eps - b.c_eps).abs() / a.c_eps.abs())
            .max((sigma_a - b.sigma).abs());
    }
    // classifier-free endpoints on a small random network
    let cfg = DenoiserConfig {
        in_channels: 2,
        cond_channels: 1,
        base_width: 8,
        depth: 1,
        channel_mult: vec![1],
        kernel: 3,
        groups: 4,
        time_embed_dim: 8,
        attention: false,
        diffusion_steps: 1000,
        prior_skip: true,
    };
    let mut store = init_params(&cfg, 2).unwrap();
    store.stats = Some(NormStats::identity(2, 1));
    let net = Denoiser::new(&store, Execution::Sequential);
    let cond = wdno::diffusion::Samples::new(2, 1, 4, 5, gaussian(40, 3, "cond")).unwrap();
    let x = gaussian(80, 4, "x");
    let steps = [10, 900];
    let prior = |mut e: Vec<f64>| {
        for (i, v) in e.iter_mut().enumerate() {
            *v += (1.0 - s.alpha_bar[steps[i / 40]]).sqrt() * x[i];
        }
        e
    };
    let mk = |null: bool| Batch { n: 2, h: 4, w: 5, x: x.clone(), cond: cond.data.clone(), null: vec![null; 2], steps: steps.to_vec() };
    let c = prior(net.predict(&mk(false)).unwrap());
    let u = prior(net.predict(&mk(true)).unwrap());
    let one = cfg_epsilon(&net, &s, &x, &cond, &steps, 1.0).unwrap() == c;
    let zero = cfg_epsilon(&net, &s, &x, &cond, &steps, 0.0).unwrap() == u;
    // forward marginal of unit-variance data stays N(0, 1)
    let n = 200_000;
    let mut marginal = true;
    let mut worst_z = 0.0f64;
    for k in [1, 100, 500, 1000] {
        let xk = s
            .forward_noise(&gaussian(n, 10 + k as u64, "mx0"), k, &gaussian(n, 20 + k as u64, "meps"))
            .unwrap();
        let mean = xk.iter().sum::<f64>() / n as f64;
        let var = xk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let z_mean = mean.abs() * (n as f64).sqrt();
        let z_var = (var - 1.0).abs() / (2.0 / (n - 1) as f64).sqrt();
        worst_z = worst_z.max(z_mean).max(z_var);
        marginal &= z_mean <= 3.0 && z_var <= 3.0;
    }
    rep.record(
        9,
        "diffusion algebra",
        inv <= IDENTITY_TOL && same_path && coeff <= 1e-9 && one && zero && marginal,
        format!(
            "estimate_x0(forward) max err {inv:.1e} (tol {IDENTITY_TOL:e}); DDIM(S=K,eta=1) vs DDPM coeff rel diff {coeff:.1e}; cfg endpoints {one}/{zero}; marginal worst |z| {worst_z:.2}"
        ),
    );
}

struct Shared {
    train: Vec<Trajectory>,
    test: Vec<Trajectory>,
    schedule: NoiseSchedule,
    codec: Codec,
    data_time: Duration,
}

fn at(u: &GridTensor, level: usize) -> GridTensor {
    multires::state_at_level(u, level).unwrap()
}

fn simulation(rep: &mut Report, sh: &Shared) -> ParamStore {
    let t = Instant::now();
    let level = RunConfig::desk(0).multires.base_level;
    let truth: Vec<GridTensor> = sh.test.iter().map(|tr| at(&tr.u, level)).collect();
    let mut mean = vec![0.0; truth[0].len()];
    for tr in &sh.train {
        for (m, v) in mean.iter_mut().zip(at(&tr.u, level).data()) {
            *m += v / sh.train.len() as f64;
        }
    }
    let mean = truth[0].with_data(mean).unwrap();
    let baseline = truth.iter().map(|u| metrics(&mean, u, true).unwrap().mse).sum::<f64>() / truth.len() as f64;
    let cases: Vec<(GridTensor, Vec<f64>)> = sh
        .test
        .iter()
        .map(|tr| (multires::force_at_level(&tr.f, level).unwrap(), multires::line_at_level(&tr.u0(), level).unwrap()))
        .collect();
    let groups = [sh.codec.examples(TaskKind::Simulate, &sh.train, level, EXEC).unwrap()];
    let mut ratios = Vec::new();
    let mut first = None;
    for seed in SIM_SEEDS {
        let cfg = RunConfig::desk(seed);
        let net = cfg.model.denoiser(TaskKind::Simulate, sh.schedule.steps);
        let (store, _) = task::fit(TaskKind::Simulate, &sh.codec, &net, &groups, &sh.schedule, &cfg.training.train_config(), seed, EXEC)
            .unwrap();
        let seeds: Vec<u64> = (0..cases.len() as u64).map(|i| derive_seed(seed, "case", i)).collect();
        let out = task::simulate(&store, EXEC, &sh.schedule, &cfg.inference.sampler_config(), &cases, &seeds).unwrap();
        let mse = out.iter().zip(&truth).map(|(o, u)| metrics(o, u, true).unwrap().mse).sum::<f64>() / truth.len() as f64;
        ratios.push(mse / baseline);
        first.get_or_insert(store);
    }
    let limit = Duration::from_secs(30 * 60);
    let e = t.elapsed() + sh.data_time;
    rep.record(
        5,
        "desk simulation",
        ratios.iter().all(|r| *r <= SIM_RATIO) && e < limit,
        format!(
            "held-out MSE / mean-predictor MSE {:?} for seeds {SIM_SEEDS:?} (need each <= {SIM_RATIO}; mean-predictor MSE {baseline:.4}); {:.1}s incl. data of {}s",
            ratios.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>(),
            e.as_secs_f64(),
            limit.as_secs()
        ),
    );
    first.unwrap()
}

fn guided_control(rep: &mut Report, sh: &Shared) {
    let t = Instant::now();
    let cfg = RunConfig::desk(1);
    let level = cfg.multires.base_level;
    let groups = [sh.codec.examples(TaskKind::Control, &sh.train, level, EXEC).unwrap()];
    let net = cfg.model.denoiser(TaskKind::Control, sh.schedule.steps);
    let (store, _) =
        task::fit(TaskKind::Control, &sh.codec, &net, &groups, &sh.schedule, &cfg.training.train_config(), cfg.seed, EXEC).unwrap();
    let nt = multires::force_at_level(&sh.test[0].f, level).unwrap().dims()[0];
    let objective = ControlObjective { alpha: cfg.control.alpha, horizon: cfg.solver.horizon, recon_weight: 0.0 };
    let guided = cfg.inference.sampler_config();
    let free = SamplerConfig { guidance_weight: 0.0, ..guided.clone() };
    let mut wins = 0;
    let (mut j_free, mut j_guided) = (0.0, 0.0);
    for seed in 0..CONTROL_SEEDS {
        let picked: Vec<&Trajectory> = (0..CONTROL_CASES)
            .map(|i| &sh.test[(seed as usize * CONTROL_CASES + i) % sh.test.len()])
            .collect();
        let cases: Vec<(Vec<f64>, Vec<f64>)> = picked
            .iter()
            .map(|tr| {
                (multires::line_at_level(&tr.u0(), level).unwrap(), multires::line_at_level(&tr.u_final(), level).unwrap())
            })
            .collect();
        let seeds: Vec<u64> = (0..CONTROL_CASES as u64).map(|i| derive_seed(seed, "case", i)).collect();
        let mean_j = |sampler: &SamplerConfig| -> f64 {
            let out = task::control(&store, EXEC, &sh.schedule, sampler, &objective, nt, &cases, &seeds).unwrap();
            out.iter()
                .zip(&picked)
                .map(|(o, tr)| eval_control_objective(&o.force, &tr.u0(), &tr.u_final(), objective.alpha, &cfg.solver).unwrap())
                .sum::<f64>()
                / CONTROL_CASES as f64
        };
        let (a, b) = (mean_j(&free), mean_j(&guided));
        j_free += a / CONTROL_SEEDS as f64;
        j_guided += b / CONTROL_SEEDS as f64;
        if b < a {
            wins += 1;
        }
    }
    let (fast, time) = within(t, Duration::from_secs(20 * 60));
    rep.record(
        6,
        "guided control direction",
        wins >= CONTROL_WINS && fast,
        format!(
            "lambda {} beats lambda 0 on {wins}/{CONTROL_SEEDS} paired seeds (need {CONTROL_WINS}); mean solver J {j_free:.4} -> {j_guided:.4}; {time}",
            guided.guidance_weight
        ),
    );
}

fn superres_and_scale(rep: &mut Report, sh: &Shared, brm: &ParamStore) {
    let t = Instant::now();
    let cfg = RunConfig::desk(1);
    let base = cfg.multires.base_level;
    let at_base: Vec<Trajectory> = sh
        .train
        .iter()
        .map(|tr| Trajectory { seed: tr.seed, u: at(&tr.u, base), f: multires::force_at_level(&tr.f, base).unwrap() })
        .collect();
    let pairs: Vec<ResolutionPair> = multires::build_pairs(&at_base, cfg.multires.max_level, EXEC).unwrap();
    let net = cfg.model.denoiser(TaskKind::Superres, sh.schedule.steps);
    let (srm, _) = multires::train_srm(&sh.codec, &net, &pairs, &sh.schedule, &cfg.training.train_config(), cfg.seed, EXEC).unwrap();
    let sampler = cfg.inference.sampler_config();
    let cases: Vec<(GridTensor, Vec<f64>)> = sh.test.iter().map(|tr| (tr.f.clone(), tr.u0())).collect();
    let seeds: Vec<u64> = (0..cases.len() as u64).map(|i| derive_seed(cfg.seed, "case", i)).collect();
    let refined = multires::superres_infer(brm, &srm, EXEC, &sh.schedule, &sampler, &cases, base, &seeds).unwrap();
    let coarse_cases: Vec<(GridTensor, Vec<f64>)> = cases
        .iter()
        .map(|(f, u0)| (multires::force_at_level(f, base).unwrap(), multires::line_at_level(u0, base).unwrap()))
        .collect();
    let coarse = task::simulate(brm, EXEC, &sh.schedule, &sampler, &coarse_cases, &seeds).unwrap();
    let factors = [1usize << base; 2];
    let mut wins = 0;
    let (mut m_sr, mut m_up) = (0.0, 0.0);
    for ((r, c), tr) in refined.iter().zip(&coarse).zip(&sh.test) {
        let up = upsample(c, &factors, Scheme::Nearest, &[true, false]).unwrap();
        let a = metrics(r, &tr.u, true).unwrap().mse;
        let b = metrics(&up, &tr.u, true).unwrap().mse;
        m_sr += a / N_TEST as f64;
        m_up += b / N_TEST as f64;
        if a < b {
            wins += 1;
        }
    }
    let share = wins as f64 / N_TEST as f64;
    let (fast, time) = within(t, Duration::from_secs(20 * 60));
    rep.record(
        7,
        "super-resolution direction",
        share >= SUPERRES_SHARE && fast,
        format!(
            "one-step SRM beats nearest-upsampled BRM on {wins}/{N_TEST} (need {:.0}%); mean MSE {m_sr:.5} vs {m_up:.5}; {time}",
            100.0 * SUPERRES_SHARE
        ),
    );

    // refine true coarse states at each level the model was trained on
    let rel_at = |level: usize| -> f64 {
        let rc: Vec<RefineCase> = sh
            .test
            .iter()
            .map(|tr| RefineCase {
                force: multires::force_at_level(&tr.f, level).unwrap(),
                u0: multires::line_at_level(&tr.u0(), level).unwrap(),
                coarse: at(&tr.u, level + 1),
            })
            .collect();
        let out = multires::refine(&srm, EXEC, &sh.schedule, &sampler, &rc, &seeds).unwrap();
        out.iter().zip(&sh.test).map(|(o, tr)| metrics(o, &at(&tr.u, level), true).unwrap().rel_l2).sum::<f64>() / N_TEST as f64
    };
    let trained: Vec<(usize, f64)> = (base..base + cfg.multires.max_level).map(|l| (l, rel_at(l))).collect();
    let best = trained.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let worst = trained.iter().map(|x| x.1).fold(0.0, f64::max);
    let unseen = rel_at(0);
    rep.record(
        8,
        "scale-invariance pipeline",
        worst <= SCALE_RATIO * best,
        format!(
            "mean rel_l2 per trained level {:?}, worst/best {:.2} (limit {SCALE_RATIO}); unseen level 0 {unseen:.4}",
            trained.iter().map(|(l, r)| format!("L{l} {r:.4}")).collect::<Vec<_>>(),
            worst / best
        ),
    );
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_wdno")).args(args).output().unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism(rep: &mut Report) {
    let root = tempfile::tempdir().unwrap();
    let p = |s: &str| root.path().join(s).display().to_string();
    let mut cfg = RunConfig::desk(3);
    cfg.training.training_steps = 5;
    cfg.training.training_batch_size = 2;
    cfg.inference.ddim_sampling_iterations = 4;
    std::fs::write(root.path().join("run.toml"), cfg.to_toml().unwrap()).unwrap();
    let pipeline = |out: &str| -> Vec<(String, Vec<u8>)> {
        let dir = root.path().join(out);
        std::fs::create_dir_all(&dir).unwrap();
        let d = |s: &str| dir.join(s).display().to_string();
        let steps: Vec<Vec<String>> = vec![
            vec!["gen-data", "--n", "4", "--seed", "11", "--out", &d("data")].into_iter().map(String::from).collect(),
            vec!["train", "--config", &p("run.toml"), "--data", &d("data"), "--out", &d("brm.ckpt")].into_iter().map(String::from).collect(),
            vec!["simulate", "--ckpt", &d("brm.ckpt"), "--cond", &d("data"), "--out", &d("sim"), "--seed", "5"]
                .into_iter()
                .map(String::from)
                .collect(),
            vec!["eval", "--pred", &d("sim"), "--truth", &d("data"), "--out", &d("eval")].into_iter().map(String::from).collect(),
        ];
        for s in &steps {
            let args: Vec<&str> = s.iter().map(String::as_str).collect();
            let o = run_cli(&args);
            assert!(o.status.success(), "{:?}: {}", s, String::from_utf8_lossy(&o.stderr));
        }
        let mut all = Vec::new();
        for sub in ["data", "sim", "eval"] {
            all.extend(snapshot(&dir.join(sub)).into_iter().map(|(n, b)| (format!("{sub}/{n}"), b)));
        }
        all.extend(snapshot(&dir));
        all
    };
    let first = pipeline("a");
    std::fs::rename(root.path().join("a"), root.path().join("first")).unwrap();
    let second = pipeline("a");
    let differing: Vec<&String> = first.iter().zip(&second).filter(|(x, y)| x != y).map(|(x, _)| &x.0).collect();
    let same = first.len() == second.len() && differing.is_empty();
    rep.record(
        10,
        "determinism",
        same,
        format!(
            "gen-data/train/simulate/eval re-run: {} files compared, {} differ {:?}",
            first.len(),
            differing.len(),
            differing
        ),
    );
}

fn main() {
    let mut rep = Report { lines: Vec::new() };
    wavelet_roundtrip(&mut rep);
    shape_fidelity(&mut rep);
    oracle_equivalence(&mut rep);
    gradient_correctness(&mut rep);
    diffusion_algebra(&mut rep);
    determinism(&mut rep);

    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let all = gen_dataset(N_TRAIN + N_TEST, System::Burgers, DATA_SEED, &RunConfig::desk(0).solver, dir.path(), EXEC)
        .unwrap()
        .load_all(EXEC)
        .unwrap();
    let (train, test) = all.split_at(N_TRAIN);
    let shared = Shared {
        train: train.to_vec(),
        test: test.to_vec(),
        schedule: NoiseSchedule::new(&RunConfig::desk(0).schedule).unwrap(),
        codec: Codec::default(),
        data_time: t.elapsed(),
    };
    let brm = simulation(&mut rep, &shared);
    guided_control(&mut rep, &shared);
    superres_and_scale(&mut rep, &shared, &brm);

    rep.lines.sort_by_key(|(_, l)| l[5..7].trim().parse::<usize>().unwrap());
    println!("\nsummary:");
    for (_, l) in &rep.lines {
        println!("{l}");
    }
    let failed = rep.lines.iter().filter(|(p, _)| !p).count();
    println!("{} of {} criteria passed", rep.lines.len() - failed, rep.lines.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
