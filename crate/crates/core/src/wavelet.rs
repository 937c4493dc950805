//! Single-level separable discrete wavelet transform.
//!
//! Four filter banks are available (`bior1.3`, `bior2.4`, `db4`, `sym4`) with
//! two boundary modes:
//!
//! * **periodization**: circular filtering; subbands have `ceil(n/2)`
//!   samples. Odd-length lines are first extended by repeating their last
//!   sample.
//! * **zero**: zero padding; subbands have `floor((n + L − 1)/2)` samples
//!   for a filter of length `L`.
//!
//! Analysis with filter `h` computes, for periodization,
//! `a[i] = Σ_j h[j]·x[(2i + L/2 − j) mod m]` and, for zero mode,
//! `a[i] = Σ_j h[j]·x[2i + 1 − j]`. Synthesis is the transpose of analysis
//! with the time-reversed filter, which is also how [`idwt_nd_adjoint`] is
//! built.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::{AxisRole, GridTensor};

const SQRT2: f64 = std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WaveletName {
    #[serde(rename = "bior1.3")]
    Bior13,
    #[serde(rename = "bior2.4")]
    Bior24,
    #[serde(rename = "db4")]
    Db4,
    #[serde(rename = "sym4")]
    Sym4,
}

impl WaveletName {
    pub const ALL: [WaveletName; 4] = [
        WaveletName::Bior13,
        WaveletName::Bior24,
        WaveletName::Db4,
        WaveletName::Sym4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            WaveletName::Bior13 => "bior1.3",
            WaveletName::Bior24 => "bior2.4",
            WaveletName::Db4 => "db4",
            WaveletName::Sym4 => "sym4",
        }
    }

    pub fn is_orthogonal(self) -> bool {
        matches!(self, WaveletName::Db4 | WaveletName::Sym4)
    }
}

impl std::str::FromStr for WaveletName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        WaveletName::ALL
            .into_iter()
            .find(|w| w.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown wavelet '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Periodization,
    Zero,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "periodization" => Ok(Mode::Periodization),
            "zero" => Ok(Mode::Zero),
            other => Err(Error::Invalid(format!("unknown boundary mode '{other}'"))),
        }
    }
}

// Daubechies minimum-phase and least-asymmetric 8-tap scaling filters
// (analysis low-pass order).
const DB4: [f64; 8] = [
    -0.010_597_401_785_069_032,
    0.032_883_011_666_885_2,
    0.030_841_381_835_560_764,
    -0.187_034_811_719_093_08,
    -0.027_983_769_416_859_854,
    0.630_880_767_929_858_9,
    0.714_846_570_552_915_6,
    0.230_377_813_308_896_5,
];

const SYM4: [f64; 8] = [
    -0.075_765_714_789_502_21,
    -0.029_635_527_646_002_492,
    0.497_618_667_632_774_99,
    0.803_738_751_805_132_1,
    0.297_857_795_605_306_05,
    -0.099_219_543_576_633_53,
    -0.012_603_967_262_031_304,
    0.032_223_100_604_051_47,
];

/// A named two-channel filter bank plus boundary mode.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletSpec {
    pub name: WaveletName,
    pub mode: Mode,
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
}

fn alternate(v: &[f64], odd_positive: bool) -> Vec<f64> {
    v.iter()
        .enumerate()
        .map(|(k, x)| if (k % 2 == 1) == odd_positive { *x } else { -*x })
        .collect()
}

impl WaveletSpec {
    pub fn new(name: WaveletName, mode: Mode) -> Self {
        let (dec_lo, dec_hi, rec_lo, rec_hi) = match name {
            WaveletName::Bior13 | WaveletName::Bior24 => {
                let (dl, rl): (Vec<f64>, Vec<f64>) = if name == WaveletName::Bior13 {
                    (
                        [-1., 1., 8., 8., 1., -1.].iter().map(|c| c * SQRT2 / 16.).collect(),
                        [0., 0., 1., 1., 0., 0.].iter().map(|c| c * SQRT2 / 2.).collect(),
                    )
                } else {
                    (
                        [0., 3., -6., -16., 38., 90., 38., -16., -6., 3.]
                            .iter()
                            .map(|c| c * SQRT2 / 128.)
                            .collect(),
                        [0., 0., 0., 1., 2., 1., 0., 0., 0., 0.]
                            .iter()
                            .map(|c| c * SQRT2 / 4.)
                            .collect(),
                    )
                };
                // dec_hi[k] = (-1)^(k+1) rec_lo[k], rec_hi[k] = (-1)^k dec_lo[k]
                let dh = alternate(&rl, true);
                let rh = alternate(&dl, false);
                (dl, dh, rl, rh)
            }
            WaveletName::Db4 | WaveletName::Sym4 => {
                let h: Vec<f64> = if name == WaveletName::Db4 { DB4.to_vec() } else { SYM4.to_vec() };
                let rec_lo: Vec<f64> = h.iter().rev().copied().collect();
                let rec_hi = alternate(&h, false);
                let dec_hi: Vec<f64> = rec_hi.iter().rev().copied().collect();
                (h, dec_hi, rec_lo, rec_hi)
            }
        };
        Self {
            name,
            mode,
            dec_lo,
            dec_hi,
            rec_lo,
            rec_hi,
        }
    }

    pub fn parse(name: &str, mode: &str) -> Result<Self> {
        Ok(Self::new(name.parse()?, mode.parse()?))
    }

    pub fn filter_len(&self) -> usize {
        self.dec_lo.len()
    }

    /// Number of coefficients per subband for a line of `n` samples.
    pub fn coeff_len(&self, n: usize) -> usize {
        match self.mode {
            Mode::Periodization => n.div_ceil(2),
            Mode::Zero => (n + self.filter_len() - 1) / 2,
        }
    }

    /// Checks the filter-bank moment conditions.
    pub fn validate(&self) -> Result<()> {
        let lo: f64 = self.dec_lo.iter().sum();
        let hi: f64 = self.dec_hi.iter().sum();
        if (lo - SQRT2).abs() > 1e-10 {
            bail!(Invalid, "{}: dec_lo sums to {}", self.name.as_str(), lo);
        }
        if hi.abs() > 1e-10 {
            bail!(Invalid, "{}: dec_hi sums to {}", self.name.as_str(), hi);
        }
        Ok(())
    }
}

/// How the analysis step treats odd periodization lines.
#[derive(Clone, Copy)]
enum OddExtension {
    /// Repeat the last sample (forward transform).
    Repeat,
    /// Append zero (adjoint of the synthesis crop).
    Zero,
}

fn analysis(x: &[f64], h: &[f64], mode: Mode, ext: OddExtension, out: &mut [f64]) {
    let n = x.len();
    let l = h.len();
    match mode {
        Mode::Periodization => {
            let m = n + n % 2;
            let at = |k: usize| -> f64 {
                if k < n {
                    x[k]
                } else {
                    match ext {
                        OddExtension::Repeat => x[n - 1],
                        OddExtension::Zero => 0.0,
                    }
                }
            };
            let c = l / 2;
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, hj) in h.iter().enumerate() {
                    // (2i + c − j) mod m, kept non-negative
                    let k = (2 * i + c + l * m - j) % m;
                    acc += hj * at(k);
                }
                *o = acc;
            }
        }
        Mode::Zero => {
            for (i, o) in out.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, hj) in h.iter().enumerate() {
                    let k = 2 * i + 1;
                    if k >= j && k - j < n {
                        acc += hj * x[k - j];
                    }
                }
                *o = acc;
            }
        }
    }
}

/// Adds the synthesis of one subband into `out` (length = target length).
fn synthesis_add(a: &[f64], g: &[f64], mode: Mode, out: &mut [f64]) {
    let n = out.len();
    let l = g.len();
    match mode {
        Mode::Periodization => {
            let m = n + n % 2;
            let c = l / 2;
            for (i, ai) in a.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    let k = (2 * i + c + j + l * m - (l - 1)) % m;
                    if k < n {
                        out[k] += ai * gj;
                    }
                }
            }
        }
        Mode::Zero => {
            for (i, ai) in a.iter().enumerate() {
                for (j, gj) in g.iter().enumerate() {
                    // out[k] gets a[i]·g[k + L − 2 − 2i]
                    let shifted = 2 * i + j;
                    if shifted + 2 >= l {
                        let k = shifted + 2 - l;
                        if k < n {
                            out[k] += ai * gj;
                        }
                    }
                }
            }
        }
    }
}

/// One-level 1-D transform of `signal` into (approximation, detail).
pub fn dwt_axis(signal: &[f64], spec: &WaveletSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    if signal.len() < 2 {
        bail!(Invalid, "dwt needs at least 2 samples, got {}", signal.len());
    }
    let m = spec.coeff_len(signal.len());
    let mut a = vec![0.0; m];
    let mut d = vec![0.0; m];
    analysis(signal, &spec.dec_lo, spec.mode, OddExtension::Repeat, &mut a);
    analysis(signal, &spec.dec_hi, spec.mode, OddExtension::Repeat, &mut d);
    Ok((a, d))
}

/// Inverse of [`dwt_axis`] producing `n` samples.
pub fn idwt_axis(approx: &[f64], detail: &[f64], n: usize, spec: &WaveletSpec) -> Result<Vec<f64>> {
    if approx.len() != detail.len() || approx.len() != spec.coeff_len(n) {
        bail!(
            Shape,
            "subband lengths {}/{} inconsistent with output length {}",
            approx.len(),
            detail.len(),
            n
        );
    }
    let mut out = vec![0.0; n];
    synthesis_add(approx, &spec.rec_lo, spec.mode, &mut out);
    synthesis_add(detail, &spec.rec_hi, spec.mode, &mut out);
    Ok(out)
}

/// The 2^d single-level subbands of a tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub spec: WaveletSpec,
    /// Transformed axes, in transform order.
    pub axes: Vec<usize>,
    pub source_dims: Vec<usize>,
    /// Keyed by one `L`/`H` character per transformed axis.
    pub bands: BTreeMap<String, GridTensor>,
}

impl SubbandSet {
    pub fn band(&self, key: &str) -> Result<&GridTensor> {
        self.bands
            .get(key)
            .ok_or_else(|| Error::Invalid(format!("missing subband '{key}'")))
    }

    /// Subband keys in canonical order (`L` before `H`, first axis major).
    pub fn keys(rank: usize) -> Vec<String> {
        (0..1usize << rank)
            .map(|bits| {
                (0..rank)
                    .map(|a| if bits >> (rank - 1 - a) & 1 == 0 { 'L' } else { 'H' })
                    .collect()
            })
            .collect()
    }

    pub fn band_dims(&self) -> Result<&[usize]> {
        Ok(self.band(&"L".repeat(self.axes.len()))?.dims())
    }

    /// Stacks subbands along a new leading channel axis in canonical order.
    pub fn to_channels(&self) -> Result<GridTensor> {
        let keys = Self::keys(self.axes.len());
        let first = self.band(&keys[0])?;
        let mut dims = vec![keys.len()];
        dims.extend_from_slice(first.dims());
        let mut roles = vec![AxisRole::Channel];
        roles.extend_from_slice(first.roles());
        let mut data = Vec::with_capacity(first.len() * keys.len());
        for k in &keys {
            let b = self.band(k)?;
            if b.dims() != first.dims() {
                bail!(Shape, "subband {} has dims {:?}, expected {:?}", k, b.dims(), first.dims());
            }
            data.extend_from_slice(b.data());
        }
        GridTensor::new(dims, roles, data)
    }

    /// Inverse of [`SubbandSet::to_channels`].
    pub fn from_channels(
        stacked: &GridTensor,
        spec: &WaveletSpec,
        axes: &[usize],
        source_dims: &[usize],
    ) -> Result<Self> {
        let keys = Self::keys(axes.len());
        if stacked.rank() < 1 || stacked.dims()[0] != keys.len() {
            bail!(
                Shape,
                "expected {} stacked subbands, got dims {:?}",
                keys.len(),
                stacked.dims()
            );
        }
        let inner_dims = stacked.dims()[1..].to_vec();
        let inner_roles = stacked.roles()[1..].to_vec();
        let chunk: usize = inner_dims.iter().product();
        let mut bands = BTreeMap::new();
        for (c, k) in keys.into_iter().enumerate() {
            let data = stacked.data()[c * chunk..(c + 1) * chunk].to_vec();
            bands.insert(k, GridTensor::new(inner_dims.clone(), inner_roles.clone(), data)?);
        }
        let set = Self {
            spec: spec.clone(),
            axes: axes.to_vec(),
            source_dims: source_dims.to_vec(),
            bands,
        };
        set.check()?;
        Ok(set)
    }

    fn check(&self) -> Result<()> {
        let keys = Self::keys(self.axes.len());
        let first = self.band(&keys[0])?.dims().to_vec();
        if first.len() != self.source_dims.len() {
            bail!(Shape, "subband rank {} vs source rank {}", first.len(), self.source_dims.len());
        }
        for k in &keys {
            if self.band(k)?.dims() != first.as_slice() {
                bail!(Shape, "subband {} dims differ from {:?}", k, first);
            }
        }
        for (a, (&d, &s)) in first.iter().zip(&self.source_dims).enumerate() {
            let expect = if self.axes.contains(&a) { self.spec.coeff_len(s) } else { s };
            if d != expect {
                bail!(
                    Shape,
                    "axis {} has {} coefficients but source length {} needs {}",
                    a,
                    d,
                    s,
                    expect
                );
            }
        }
        Ok(())
    }

    /// Writes `header.json` plus one `WDT1` file per subband into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let header = SubbandHeader {
            wavelet: self.spec.name,
            mode: self.spec.mode,
            axes: self.axes.clone(),
            source_dims: self.source_dims.clone(),
            keys: self.bands.keys().cloned().collect(),
        };
        let path = dir.join("header.json");
        let text = serde_json::to_string_pretty(&header).expect("header serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        for (k, b) in &self.bands {
            b.write(&dir.join(format!("{k}.wdt")))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("header.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: SubbandHeader =
            serde_json::from_str(&text).map_err(|e| Error::corrupt(&path, e.to_string()))?;
        let mut bands = BTreeMap::new();
        for k in header.keys {
            let t = GridTensor::read(&dir.join(format!("{k}.wdt")))?;
            bands.insert(k, t);
        }
        let set = Self {
            spec: WaveletSpec::new(header.wavelet, header.mode),
            axes: header.axes,
            source_dims: header.source_dims,
            bands,
        };
        set.check()?;
        Ok(set)
    }
}

#[derive(Serialize, Deserialize)]
struct SubbandHeader {
    wavelet: WaveletName,
    mode: Mode,
    axes: Vec<usize>,
    source_dims: Vec<usize>,
    keys: Vec<String>,
}

fn check_axes(t: &GridTensor, axes: &[usize]) -> Result<()> {
    if axes.is_empty() {
        bail!(Invalid, "no axes to transform");
    }
    for (i, &a) in axes.iter().enumerate() {
        if a >= t.rank() {
            bail!(Invalid, "axis {} out of range for rank {}", a, t.rank());
        }
        if t.roles()[a] == AxisRole::Channel {
            bail!(Invalid, "axis {} is a channel axis", a);
        }
        if axes[..i].contains(&a) {
            bail!(Invalid, "axis {} listed twice", a);
        }
        if t.dims()[a] < 2 {
            bail!(Invalid, "axis {} has {} samples, need at least 2", a, t.dims()[a]);
        }
    }
    Ok(())
}

fn decompose(
    t: &GridTensor,
    axes: &[usize],
    lo: &[f64],
    hi: &[f64],
    mode: Mode,
    ext: OddExtension,
    out_len: impl Fn(usize) -> usize,
) -> Result<BTreeMap<String, GridTensor>> {
    let mut parts = vec![(String::new(), t.clone())];
    for &axis in axes {
        let mut next = Vec::with_capacity(parts.len() * 2);
        for (key, part) in parts {
            let m = out_len(part.dims()[axis]);
            let l = part.map_lines(axis, m, |src, dst| analysis(src, lo, mode, ext, dst))?;
            let h = part.map_lines(axis, m, |src, dst| analysis(src, hi, mode, ext, dst))?;
            next.push((format!("{key}L"), l));
            next.push((format!("{key}H"), h));
        }
        parts = next;
    }
    Ok(parts.into_iter().collect())
}

/// Separable single-level transform along `axes` (in the given order).
/// Channel axes pass through untouched.
pub fn dwt_nd(t: &GridTensor, spec: &WaveletSpec, axes: &[usize]) -> Result<SubbandSet> {
    check_axes(t, axes)?;
    let bands = decompose(
        t,
        axes,
        &spec.dec_lo,
        &spec.dec_hi,
        spec.mode,
        OddExtension::Repeat,
        |n| spec.coeff_len(n),
    )?;
    Ok(SubbandSet {
        spec: spec.clone(),
        axes: axes.to_vec(),
        source_dims: t.dims().to_vec(),
        bands,
    })
}

/// Reconstructs a tensor with exactly `s.source_dims`.
pub fn idwt_nd(s: &SubbandSet) -> Result<GridTensor> {
    s.check()?;
    let spec = &s.spec;
    let mut parts: BTreeMap<String, GridTensor> = s.bands.clone();
    for (depth, &axis) in s.axes.iter().enumerate().rev() {
        let n = s.source_dims[axis];
        let mut merged = BTreeMap::new();
        for prefix in SubbandSet::keys(depth) {
            let lo = &parts[&format!("{prefix}L")];
            let hi = &parts[&format!("{prefix}H")];
            let mut out = lo.map_lines(axis, n, |src, dst| {
                synthesis_add(src, &spec.rec_lo, spec.mode, dst)
            })?;
            let add = hi.map_lines(axis, n, |src, dst| {
                synthesis_add(src, &spec.rec_hi, spec.mode, dst)
            })?;
            out = out.zip_map(&add, |a, b| a + b)?;
            merged.insert(prefix, out);
        }
        parts = merged;
    }
    Ok(parts.remove("").expect("fully merged"))
}

/// Adjoint (transpose) of [`idwt_nd`]: maps a gradient with respect to the
/// reconstructed tensor to gradients with respect to every subband.
pub fn idwt_nd_adjoint(
    grad: &GridTensor,
    spec: &WaveletSpec,
    axes: &[usize],
) -> Result<SubbandSet> {
    check_axes(grad, axes)?;
    let rev = |v: &[f64]| v.iter().rev().copied().collect::<Vec<_>>();
    let bands = decompose(
        grad,
        axes,
        &rev(&spec.rec_lo),
        &rev(&spec.rec_hi),
        spec.mode,
        OddExtension::Zero,
        |n| spec.coeff_len(n),
    )?;
    Ok(SubbandSet {
        spec: spec.clone(),
        axes: axes.to_vec(),
        source_dims: grad.dims().to_vec(),
        bands,
    })
}

/// Relative reconstruction error `‖idwt(dwt(x)) − x‖ / ‖x‖`.
pub fn roundtrip_error(t: &GridTensor, spec: &WaveletSpec, axes: &[usize]) -> Result<f64> {
    let back = idwt_nd(&dwt_nd(t, spec, axes)?)?;
    Ok(crate::tensor::metrics(&back, t, false)?.rel_l2)
}
