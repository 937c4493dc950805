use rand::Rng;

use crate::error::{bail, Error, Result};
use crate::par::Execution;
use crate::rng;
use crate::tensor::{AxisRole, GridTensor};

use super::graph::{Shape, Tape, Var};
use super::params::{ParamId, ParamStore};
use super::DenoiserConfig;

/// A batch of denoiser inputs in `(n, c, h, w)` layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub x: Vec<f64>,
    pub cond: Vec<f64>,
    /// `true` replaces the sample's condition by the null condition.
    pub null: Vec<bool>,
    pub steps: Vec<usize>,
}

impl Batch {
    fn check(&self, cfg: &DenoiserConfig) -> Result<()> {
        let plane = self.h * self.w;
        if self.n == 0 || plane == 0 {
            bail!(Shape, "empty batch");
        }
        if self.x.len() != self.n * cfg.in_channels * plane {
            bail!(
                Shape,
                "x holds {} values, expected {}x{}x{}x{}",
                self.x.len(),
                self.n,
                cfg.in_channels,
                self.h,
                self.w
            );
        }
        if self.cond.len() != self.n * cfg.cond_channels * plane {
            bail!(
                Shape,
                "cond holds {} values, expected {}x{}x{}x{}",
                self.cond.len(),
                self.n,
                cfg.cond_channels,
                self.h,
                self.w
            );
        }
        if self.null.len() != self.n || self.steps.len() != self.n {
            bail!(Shape, "batch of {} needs {} null flags and steps", self.n, self.n);
        }
        if let Some(k) = self.steps.iter().find(|k| **k == 0 || **k > cfg.diffusion_steps) {
            bail!(Invalid, "diffusion step {} outside 1..={}", k, cfg.diffusion_steps);
        }
        Ok(())
    }

    /// Network input: target, condition (zeroed when null) and flag channel.
    fn stacked(&self, cfg: &DenoiserConfig) -> Vec<f64> {
        let plane = self.h * self.w;
        let (ci, cc) = (cfg.in_channels * plane, cfg.cond_channels * plane);
        let mut out = Vec::with_capacity(self.n * (ci + cc + plane));
        for s in 0..self.n {
            out.extend_from_slice(&self.x[s * ci..(s + 1) * ci]);
            if self.null[s] {
                out.extend(std::iter::repeat_n(0.0, cc + plane));
            } else {
                out.extend_from_slice(&self.cond[s * cc..(s + 1) * cc]);
                out.extend(std::iter::repeat_n(1.0, plane));
            }
        }
        out
    }
}

fn sinusoid(k: usize, dim: usize) -> impl Iterator<Item = f64> {
    let half = dim / 2;
    let freqs = (0..half).map(move |i| (-(10000f64.ln()) * i as f64 / half as f64).exp());
    let t = k as f64;
    freqs
        .clone()
        .map(move |f| (t * f).sin())
        .chain(freqs.map(move |f| (t * f).cos()))
}

fn conv_params(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cout: usize, cin: usize, k: usize) {
    let std = (1.0 / (cin * k * k) as f64).sqrt();
    store.add_normal(rng, format!("{name}.w"), vec![cout, cin, k, k], std);
    store.add_const(format!("{name}.b"), vec![cout], 0.0);
}

fn norm_params(store: &mut ParamStore, name: &str, c: usize) {
    store.add_const(format!("{name}.gamma"), vec![c], 1.0);
    store.add_const(format!("{name}.beta"), vec![c], 0.0);
}

fn res_params(store: &mut ParamStore, rng: &mut impl Rng, name: &str, cin: usize, cout: usize) {
    let cfg = store.config.clone();
    norm_params(store, &format!("{name}.norm1"), cin);
    conv_params(store, rng, &format!("{name}.conv1"), cout, cin, cfg.kernel);
    conv_params(store, rng, &format!("{name}.temb"), cout, cfg.time_embed_dim, 1);
    norm_params(store, &format!("{name}.norm2"), cout);
    conv_params(store, rng, &format!("{name}.conv2"), cout, cout, cfg.kernel);
    if cin != cout {
        conv_params(store, rng, &format!("{name}.skip"), cout, cin, 1);
    }
}

/// Fresh parameters drawn from the `init` stream of `seed`.
pub fn init_params(config: &DenoiserConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = rng::stream(seed, "init", 0);
    let mut store = ParamStore::empty(config.clone());
    let widths = config.widths();
    let e = config.time_embed_dim;
    conv_params(&mut store, &mut rng, "time.0", e, e, 1);
    conv_params(&mut store, &mut rng, "time.1", e, e, 1);
    let cin = config.in_channels + config.cond_channels + 1;
    conv_params(&mut store, &mut rng, "in", widths[0], cin, config.kernel);
    let mut cur = widths[0];
    for (i, &w) in widths.iter().enumerate() {
        res_params(&mut store, &mut rng, &format!("down{i}"), cur, w);
        cur = w;
        if i + 1 < widths.len() {
            conv_params(&mut store, &mut rng, &format!("down{i}.pool"), w, w, config.kernel);
        }
    }
    res_params(&mut store, &mut rng, "mid", cur, cur);
    if config.attention {
        norm_params(&mut store, "mid.attn.norm", cur);
        for p in ["q", "k", "v", "proj"] {
            conv_params(&mut store, &mut rng, &format!("mid.attn.{p}"), cur, cur, 1);
        }
    }
    for (i, &w) in widths.iter().enumerate().rev() {
        res_params(&mut store, &mut rng, &format!("up{i}"), cur + w, w);
        cur = w;
    }
    norm_params(&mut store, "out.norm", cur);
    conv_params(&mut store, &mut rng, "out", config.in_channels, cur, config.kernel);
    Ok(store)
}

/// Forward evaluation of `ε_θ` against a parameter store.
pub struct Denoiser<'a> {
    store: &'a ParamStore,
    exec: Execution,
}

impl<'a> Denoiser<'a> {
    pub fn new(store: &'a ParamStore, exec: Execution) -> Self {
        Self { store, exec }
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.store.config
    }

    fn id(&self, name: &str) -> Result<ParamId> {
        self.store
            .id(name)
            .ok_or_else(|| Error::Invalid(format!("parameter '{name}' missing from store")))
    }

    fn conv(&self, tape: &mut Tape<'a>, x: Var, name: &str, stride: usize) -> Result<Var> {
        let (w, b) = (self.id(&format!("{name}.w"))?, self.id(&format!("{name}.b"))?);
        tape.conv(x, w, b, stride)
    }

    fn norm(&self, tape: &mut Tape<'a>, x: Var, name: &str) -> Result<Var> {
        let g = self.id(&format!("{name}.gamma"))?;
        let b = self.id(&format!("{name}.beta"))?;
        tape.group_norm(x, g, b, self.store.config.groups)
    }

    fn res(&self, tape: &mut Tape<'a>, x: Var, temb: Var, name: &str) -> Result<Var> {
        let h = self.norm(tape, x, &format!("{name}.norm1"))?;
        let h = tape.silu(h);
        let h = self.conv(tape, h, &format!("{name}.conv1"), 1)?;
        let t = self.conv(tape, temb, &format!("{name}.temb"), 1)?;
        let h = tape.add_channel(h, t)?;
        let h = self.norm(tape, h, &format!("{name}.norm2"))?;
        let h = tape.silu(h);
        let h = self.conv(tape, h, &format!("{name}.conv2"), 1)?;
        let skip = if self.store.id(&format!("{name}.skip.w")).is_some() {
            self.conv(tape, x, &format!("{name}.skip"), 1)?
        } else {
            x
        };
        tape.add(h, skip)
    }

    /// Builds the forward graph; the returned tape can back-propagate when
    /// `record` is set.
    pub fn run(&self, batch: &Batch, record: bool) -> Result<(Tape<'a>, Var)> {
        let cfg = &self.store.config;
        batch.check(cfg)?;
        let depth = cfg.widths().len();
        let mut tape = Tape::new(self.store, self.exec, record);
        let e = cfg.time_embed_dim;
        let emb: Vec<f64> = batch.steps.iter().flat_map(|k| sinusoid(*k, e)).collect();
        let temb = tape.input(Shape::new(batch.n, e, 1, 1), emb)?;
        let temb = self.conv(&mut tape, temb, "time.0", 1)?;
        let temb = tape.silu(temb);
        let temb = self.conv(&mut tape, temb, "time.1", 1)?;
        let temb = tape.silu(temb);

        let cin = cfg.in_channels + cfg.cond_channels + 1;
        let x = tape.input(Shape::new(batch.n, cin, batch.h, batch.w), batch.stacked(cfg))?;
        let mut h = self.conv(&mut tape, x, "in", 1)?;
        let mut skips = Vec::with_capacity(depth);
        for i in 0..depth {
            h = self.res(&mut tape, h, temb, &format!("down{i}"))?;
            skips.push(h);
            if i + 1 < depth {
                h = self.conv(&mut tape, h, &format!("down{i}.pool"), 2)?;
            }
        }
        h = self.res(&mut tape, h, temb, "mid")?;
        if cfg.attention {
            let a = self.norm(&mut tape, h, "mid.attn.norm")?;
            let q = self.conv(&mut tape, a, "mid.attn.q", 1)?;
            let k = self.conv(&mut tape, a, "mid.attn.k", 1)?;
            let v = self.conv(&mut tape, a, "mid.attn.v", 1)?;
            let o = tape.attention(q, k, v)?;
            let o = self.conv(&mut tape, o, "mid.attn.proj", 1)?;
            h = tape.add(h, o)?;
        }
        for i in (0..depth).rev() {
            let skip = skips[i];
            let ss = tape.shape(skip);
            if tape.shape(h).h != ss.h || tape.shape(h).w != ss.w {
                h = tape.upsample_to(h, ss.h, ss.w)?;
            }
            h = tape.concat(h, skip)?;
            h = self.res(&mut tape, h, temb, &format!("up{i}"))?;
        }
        let h = self.norm(&mut tape, h, "out.norm")?;
        let h = tape.silu(h);
        let out = self.conv(&mut tape, h, "out", 1)?;
        Ok((tape, out))
    }

    /// Batched noise prediction in `(n, in_channels, h, w)` layout.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        let (tape, out) = self.run(batch, false)?;
        Ok(tape.value(out).to_vec())
    }

    /// Single-sample prediction; `x_noisy` and `cond` are `(c, h, w)` tensors
    /// with a leading channel axis and `cond = None` means the null
    /// condition.
    pub fn forward(&self, x_noisy: &GridTensor, cond: Option<&GridTensor>, k: usize) -> Result<GridTensor> {
        let cfg = &self.store.config;
        let (h, w) = plane_of(x_noisy, cfg.in_channels, "x_noisy")?;
        let cond_data = match cond {
            Some(c) => {
                if plane_of(c, cfg.cond_channels, "cond")? != (h, w) {
                    bail!(
                        Shape,
                        "cond dims {:?} not congruent with x_noisy {:?}",
                        c.dims(),
                        x_noisy.dims()
                    );
                }
                c.data().to_vec()
            }
            None => vec![0.0; cfg.cond_channels * h * w],
        };
        let batch = Batch {
            n: 1,
            h,
            w,
            x: x_noisy.data().to_vec(),
            cond: cond_data,
            null: vec![cond.is_none()],
            steps: vec![k],
        };
        x_noisy.with_data(self.predict(&batch)?)
    }
}

fn plane_of(t: &GridTensor, channels: usize, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 3 || t.roles()[0] != AxisRole::Channel || t.dims()[0] != channels {
        bail!(
            Shape,
            "{} must be ({} channels, h, w), got dims {:?}",
            what,
            channels,
            t.dims()
        );
    }
    Ok((t.dims()[1], t.dims()[2]))
}
