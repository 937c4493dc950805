//! Multi-resolution pairs, alignment by duplication, super-resolution model
//! training and the iterated zero-shot inference chain.
//!
//! Level `l` halves time and space `l` times: an `(nt+1)×nx` state becomes
//! `(nt/2^l + 1)×(nx/2^l)` and an `nt×nx` force `(nt/2^l)×(nx/2^l)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{NoiseSchedule, SamplerConfig, Samples, TrainConfig};
use crate::error::{bail, Error, Result};
use crate::nn::{DenoiserConfig, ParamStore};
use crate::par::{self, Execution};
use crate::pde::{Dataset, Trajectory};
use crate::rng;
use crate::task::{self, Codec, TaskKind};
use crate::tensor::{downsample, GridTensor};

fn halve(t: &GridTensor, level: usize) -> Result<GridTensor> {
    let mut cur = t.clone();
    for _ in 0..level {
        cur = downsample(&cur, &vec![2; cur.rank()])?;
    }
    Ok(cur)
}

/// State trajectory at `level` (time endpoints kept).
pub fn state_at_level(u: &GridTensor, level: usize) -> Result<GridTensor> {
    halve(u, level)
}

pub fn force_at_level(f: &GridTensor, level: usize) -> Result<GridTensor> {
    halve(f, level)
}

pub fn line_at_level(v: &[f64], level: usize) -> Result<Vec<f64>> {
    let step = 1usize << level;
    if v.len() % step != 0 {
        bail!(Invalid, "line of length {} cannot be halved {} times", v.len(), level);
    }
    Ok(v.iter().step_by(step).copied().collect())
}

/// Linear interpolation of a state to the next finer grid: a target length
/// of `2n−1` keeps both end points, `2n` wraps periodically. Equal lengths
/// pass through.
pub fn interpolate_state(low: &GridTensor, target_dims: &[usize]) -> Result<GridTensor> {
    if target_dims.len() != low.rank() {
        bail!(Shape, "target rank {} vs tensor rank {}", target_dims.len(), low.rank());
    }
    let mut cur = low.clone();
    for (axis, (&n, &m)) in low.dims().iter().zip(target_dims).enumerate() {
        if n == m {
            continue;
        }
        if n < 2 || (m + 1 != 2 * n && m != 2 * n) {
            bail!(Shape, "cannot interpolate length {} to {} on axis {}", n, m, axis);
        }
        cur = cur.map_lines(axis, m, |src, dst| {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = if i % 2 == 0 { src[i / 2] } else { 0.5 * (src[i / 2] + src[(i / 2 + 1) % n]) };
            }
        })?;
    }
    Ok(cur)
}

/// Duplicates every entry along each axis whose target length differs:
/// output index `i` reads `min(i/2, n−1)`. Each such axis needs
/// `2n−1 ≤ target ≤ 2n+1`; equal lengths pass through.
pub fn align_duplicate(low: &GridTensor, target_dims: &[usize]) -> Result<GridTensor> {
    if target_dims.len() != low.rank() {
        bail!(Shape, "target rank {} vs tensor rank {}", target_dims.len(), low.rank());
    }
    let mut cur = low.clone();
    for (axis, (&n, &m)) in low.dims().iter().zip(target_dims).enumerate() {
        if n == m {
            continue;
        }
        if n == 0 || m + 1 < 2 * n || m > 2 * n + 1 {
            bail!(
                Shape,
                "cannot align length {} to {} on axis {} by duplication",
                n,
                m,
                axis
            );
        }
        cur = cur.map_lines(axis, m, |src, dst| {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[(i / 2).min(n - 1)];
            }
        })?;
    }
    Ok(cur)
}

/// One high/low pair of a trajectory; `low == downsample(high, 2)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolutionPair {
    pub trajectory: usize,
    pub level: usize,
    pub high: GridTensor,
    pub low: GridTensor,
    /// Force at the high level.
    pub cond_high: GridTensor,
}

fn check_levels(t: &Trajectory, max_level: usize) -> Result<()> {
    let (nt, nx) = (t.f.dims()[0], t.f.dims()[1]);
    let need = 1usize << max_level;
    if max_level == 0 || nt % need != 0 || nx % need != 0 || t.u.dims() != [nt + 1, nx] {
        bail!(
            Invalid,
            "state {:?} / force {:?} do not support {} halvings",
            t.u.dims(),
            t.f.dims(),
            max_level
        );
    }
    Ok(())
}

/// Pairs at levels `0..max_level` for every trajectory, trajectory-major.
pub fn build_pairs(trajs: &[Trajectory], max_level: usize, exec: Execution) -> Result<Vec<ResolutionPair>> {
    for t in trajs {
        check_levels(t, max_level)?;
    }
    let per = par::try_map_indexed(exec, trajs.len(), |i| {
        let t = &trajs[i];
        (0..max_level)
            .map(|level| {
                let high = state_at_level(&t.u, level)?;
                Ok(ResolutionPair {
                    trajectory: i,
                    level,
                    low: state_at_level(&high, 1)?,
                    cond_high: force_at_level(&t.f, level)?,
                    high,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(per.into_iter().flatten().collect())
}

/// `manifest` row of a pair set: references into a base dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub sample_id: usize,
    pub level: usize,
    pub u_path: String,
    pub f_path: String,
}

/// Writes a pair-set manifest for `dataset` without copying tensors. Pair
/// levels count from `base_level` halvings of the stored trajectories and
/// paths point into the dataset directory.
pub fn write_pair_manifest(dataset: &Dataset, base_level: usize, max_level: usize, path: &Path) -> Result<Vec<PairRecord>> {
    if dataset.is_empty() {
        bail!(Invalid, "empty dataset");
    }
    check_levels(&dataset.load(0)?, base_level + max_level)?;
    let full = |p: &str| dataset.dir.join(p).to_string_lossy().into_owned();
    let records: Vec<PairRecord> = dataset
        .entries
        .iter()
        .flat_map(|e| {
            (base_level..base_level + max_level).map(move |level| PairRecord {
                sample_id: e.sample_id,
                level,
                u_path: full(&e.u_path),
                f_path: full(&e.f_path),
            })
        })
        .collect();
    let mut text = String::from("sample_id,level,u_path,f_path\n");
    for r in &records {
        text.push_str(&format!("{},{},{},{}\n", r.sample_id, r.level, r.u_path, r.f_path));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(records)
}

/// One `(target, cond)` group per level.
pub fn srm_groups(codec: &Codec, pairs: &[ResolutionPair], exec: Execution) -> Result<Vec<(Samples, Samples)>> {
    let max_level = pairs.iter().map(|p| p.level + 1).max().unwrap_or(0);
    let mut groups = Vec::with_capacity(max_level);
    for level in 0..max_level {
        let members: Vec<&ResolutionPair> = pairs.iter().filter(|p| p.level == level).collect();
        if members.is_empty() {
            bail!(Invalid, "pair set has no pairs at level {}", level);
        }
        let parts = par::try_map_indexed(exec, members.len(), |i| {
            let p = members[i];
            codec.example(TaskKind::Superres, &p.high, &p.cond_high, Some(&p.low))
        })?;
        let (t0, c0) = (&parts[0].0, &parts[0].1);
        let (tc, cc, h, w) = (t0.dims()[0], c0.dims()[0], t0.dims()[1], t0.dims()[2]);
        let (ts, cs): (Vec<_>, Vec<_>) = parts.into_iter().map(|(t, c)| (t.into_data(), c.into_data())).unzip();
        groups.push((Samples::stack(&ts, tc, h, w)?, Samples::stack(&cs, cc, h, w)?));
    }
    Ok(groups)
}

/// Trains the super-resolution model; each batch comes from one level
/// drawn uniformly.
#[allow(clippy::too_many_arguments)]
pub fn train_srm(
    codec: &Codec,
    net: &DenoiserConfig,
    pairs: &[ResolutionPair],
    schedule: &NoiseSchedule,
    train_cfg: &TrainConfig,
    seed: u64,
    exec: Execution,
) -> Result<(ParamStore, Vec<f64>)> {
    let groups = srm_groups(codec, pairs, exec)?;
    let (mut store, losses) = task::fit(TaskKind::Superres, codec, net, &groups, schedule, train_cfg, seed, exec)?;
    store.meta.insert("levels".into(), groups.len().to_string());
    Ok((store, losses))
}

/// A refinement case: force and initial state at the fine level plus the
/// coarse state to refine.
#[derive(Clone, Debug)]
pub struct RefineCase {
    pub force: GridTensor,
    pub u0: Vec<f64>,
    pub coarse: GridTensor,
}

/// One SRM pass: sampled detail added to the interpolated coarse state.
pub fn refine(
    srm: &ParamStore,
    exec: Execution,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cases: &[RefineCase],
    seeds: &[u64],
) -> Result<Vec<GridTensor>> {
    let codec = task::read_tag(srm, TaskKind::Superres)?;
    let conds = cases
        .iter()
        .map(|c| codec.superres_cond(&c.force, &c.u0, &codec.state(&c.coarse)?))
        .collect::<Result<Vec<_>>>()?;
    let out = task::generate(srm, exec, schedule, sampler, &task::stack_conds(&conds)?, seeds, None)?;
    cases
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let (nt, nx) = (c.force.dims()[0], c.force.dims()[1]);
            let coeffs = GridTensor::new(
                vec![4, out.h, out.w],
                vec![crate::AxisRole::Channel, crate::AxisRole::Time, crate::AxisRole::Space],
                out.sample(i).to_vec(),
            )?;
            let base = interpolate_state(&c.coarse, &[nt + 1, nx])?;
            codec.decode_state(&coeffs, [nt + 1, nx])?.zip_map(&base, |a, b| a + b)
        })
        .collect()
}

/// Generates at the resolution of each `(force, u0)` case: the BRM runs
/// `steps` levels coarser, then the SRM refines one level at a time.
#[allow(clippy::too_many_arguments)]
pub fn superres_infer(
    brm: &ParamStore,
    srm: &ParamStore,
    exec: Execution,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    cases: &[(GridTensor, Vec<f64>)],
    steps: usize,
    seeds: &[u64],
) -> Result<Vec<GridTensor>> {
    if steps > 0 {
        let a = task::read_tag(brm, TaskKind::Simulate)?;
        let b = task::read_tag(srm, TaskKind::Superres)?;
        if a != b {
            bail!(Invalid, "base and super-resolution models use different wavelets");
        }
    }
    let at = |level: usize| -> Result<Vec<(GridTensor, Vec<f64>)>> {
        cases
            .iter()
            .map(|(f, u0)| {
                if f.rank() != 2 || f.dims()[1] != u0.len() {
                    bail!(Shape, "force {:?} does not match u0 of length {}", f.dims(), u0.len());
                }
                if f.dims()[0] % (1 << level) != 0 {
                    bail!(Shape, "force {:?} cannot be halved {} times", f.dims(), level);
                }
                Ok((force_at_level(f, level)?, line_at_level(u0, level)?))
            })
            .collect()
    };
    let mut states = task::simulate(brm, exec, schedule, sampler, &at(steps)?, seeds)?;
    for s in 1..=steps {
        let level = steps - s;
        let refine_cases: Vec<RefineCase> = at(level)?
            .into_iter()
            .zip(states)
            .map(|((force, u0), coarse)| RefineCase { force, u0, coarse })
            .collect();
        let step_seeds: Vec<u64> = seeds.iter().map(|x| rng::derive_seed(*x, "superres", s as u64)).collect();
        states = refine(srm, exec, schedule, sampler, &refine_cases, &step_seeds)?;
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::group_draws;
    use crate::pde::{generate_one, BurgersConfig, System};
    use crate::tensor::AxisRole;

    fn line(v: &[f64]) -> GridTensor {
        GridTensor::new(vec![v.len()], vec![AxisRole::Space], v.to_vec()).unwrap()
    }

    #[test]
    fn align_examples() {
        let a = align_duplicate(&line(&[0.0, 1.0, 2.0]), &[6]).unwrap();
        assert_eq!(a.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
        let a = align_duplicate(&line(&[0.0, 1.0, 2.0]), &[7]).unwrap();
        assert_eq!(a.data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert!(align_duplicate(&line(&[0.0, 1.0, 2.0]), &[8]).is_err());
        assert!(align_duplicate(&line(&[0.0, 1.0, 2.0]), &[4]).is_err());
        let c = GridTensor::zeros(&[4, 21, 30], &[AxisRole::Channel, AxisRole::Time, AxisRole::Space]).unwrap();
        assert_eq!(align_duplicate(&c, &[4, 41, 60]).unwrap().dims(), &[4, 41, 60]);
    }

    #[test]
    fn align_then_downsample_recovers_low() {
        let mut r = crate::rng::stream(1, "test", 0);
        use rand::Rng;
        for (n, m) in [(21, 41), (30, 60), (11, 21), (6, 12), (5, 11)] {
            let low = GridTensor::from_fn(&[3, n], &[AxisRole::Time, AxisRole::Space], |_| r.random::<f64>()).unwrap();
            let up = align_duplicate(&low, &[3, m]).unwrap();
            let back = downsample(&up, &[1, 2]).unwrap().narrow(1, 0, n).unwrap();
            assert_eq!(back, low);
        }
    }

    #[test]
    fn level_chain_shapes() {
        let t = generate_one(System::Burgers, 1, 0, &BurgersConfig::desk()).unwrap();
        let codec = Codec::default();
        let mut coeff = vec![];
        for level in 0..4 {
            let u = state_at_level(&t.u, level).unwrap();
            let f = force_at_level(&t.f, level).unwrap();
            assert_eq!(u.dims()[0], f.dims()[0] + 1);
            let c = codec.state(&u).unwrap();
            assert_eq!(codec.force(&f).unwrap().dims(), c.dims());
            coeff.push([c.dims()[1], c.dims()[2]]);
        }
        assert_eq!(coeff, vec![[41, 60], [21, 30], [11, 15], [6, 8]]);
    }

    #[test]
    fn pairs_are_consistent() {
        let cfg = BurgersConfig::desk();
        let trajs: Vec<_> = (0..3).map(|i| generate_one(System::Burgers, 2, i, &cfg).unwrap()).collect();
        let pairs = build_pairs(&trajs, 3, Execution::Parallel).unwrap();
        assert_eq!(pairs.len(), 3 * 3);
        for p in &pairs {
            assert_eq!(downsample(&p.high, &[2, 2]).unwrap(), p.low);
            assert_eq!(p.high.dims()[0], p.cond_high.dims()[0] + 1);
        }
        assert!(build_pairs(&trajs, 4, Execution::Sequential).is_err());
        let groups = srm_groups(&Codec::default(), &pairs, Execution::Sequential).unwrap();
        let dims: Vec<_> = groups.iter().map(|(t, c)| (t.n, t.h, t.w, c.c)).collect();
        assert_eq!(dims, vec![(3, 41, 60, 10), (3, 21, 30, 10), (3, 11, 15, 10)]);
        let sparse: Vec<_> = pairs.into_iter().filter(|p| p.level != 1).collect();
        assert!(srm_groups(&Codec::default(), &sparse, Execution::Sequential).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let a = interpolate_state(&line(&[0.0, 1.0, 4.0]), &[5]).unwrap();
        assert_eq!(a.data(), &[0.0, 0.5, 1.0, 2.5, 4.0]);
        let b = interpolate_state(&line(&[0.0, 1.0, 4.0]), &[6]).unwrap();
        assert_eq!(b.data(), &[0.0, 0.5, 1.0, 2.5, 4.0, 2.0]);
        assert!(interpolate_state(&line(&[0.0, 1.0, 4.0]), &[7]).is_err());
        let mut r = crate::rng::stream(2, "test", 0);
        use rand::Rng;
        let low = GridTensor::new(vec![41, 60], vec![AxisRole::Time, AxisRole::Space], (0..41 * 60).map(|_| r.random()).collect()).unwrap();
        assert_eq!(downsample(&interpolate_state(&low, &[81, 120]).unwrap(), &[2, 2]).unwrap(), low);
    }

    #[test]
    fn level_draws_are_uniform() {
        let n = 10_000;
        let draws = group_draws(3, n, 17);
        for level in 0..3 {
            let count = draws.iter().filter(|d| **d == level).count() as f64;
            let p = 1.0 / 3.0;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((count - n as f64 * p).abs() <= 3.0 * sd, "level {level}: {count}");
        }
    }

    #[test]
    fn pair_manifest_references_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let ds = crate::pde::gen_dataset(2, System::Burgers, 3, &BurgersConfig::desk(), dir.path(), Execution::Parallel).unwrap();
        let path = dir.path().join("pairs.csv");
        let recs = write_pair_manifest(&ds, 1, 2, &path).unwrap();
        assert_eq!(recs.len(), 4);
        assert_eq!(recs.iter().map(|r| r.level).collect::<Vec<_>>(), [1, 2, 1, 2]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("sample_id,level,u_path,f_path\n"));
        let u = dir.path().join("u_00001.wdt");
        assert!(text.contains(&format!("1,2,{},", u.display())));
        assert!(GridTensor::read(std::path::Path::new(&recs[3].u_path)).is_ok());
        assert!(write_pair_manifest(&ds, 2, 3, &path).is_err());
    }
}
