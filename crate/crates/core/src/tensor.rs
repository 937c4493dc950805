//! Dense row-major `f64` grids with named axes, resampling and error metrics.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};

/// Role of a tensor axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AxisRole {
    Time,
    Space,
    Channel,
}

impl AxisRole {
    pub fn code(self) -> u8 {
        match self {
            AxisRole::Time => 0,
            AxisRole::Space => 1,
            AxisRole::Channel => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(AxisRole::Time),
            1 => Some(AxisRole::Space),
            2 => Some(AxisRole::Channel),
            _ => None,
        }
    }
}

/// An n-dimensional grid of finite `f64` samples.
///
/// `domain` records the physical extent of each axis (1.0 when unknown);
/// it is carried through resampling but is not part of the on-disk format.
#[derive(Clone, Debug, PartialEq)]
pub struct GridTensor {
    dims: Vec<usize>,
    roles: Vec<AxisRole>,
    domain: Vec<f64>,
    data: Vec<f64>,
}

fn check_layout(dims: &[usize], roles: &[AxisRole], len: usize) -> Result<()> {
    if dims.len() != roles.len() {
        bail!(Shape, "{} dims but {} axis roles", dims.len(), roles.len());
    }
    if dims.iter().product::<usize>() != len {
        bail!(
            Shape,
            "dims {:?} hold {} values, data has {}",
            dims,
            dims.iter().product::<usize>(),
            len
        );
    }
    if roles.iter().filter(|r| **r == AxisRole::Time).count() > 1 {
        bail!(Shape, "more than one time axis in {:?}", roles);
    }
    Ok(())
}

impl GridTensor {
    pub fn new(dims: Vec<usize>, roles: Vec<AxisRole>, data: Vec<f64>) -> Result<Self> {
        check_layout(&dims, &roles, data.len())?;
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            bail!(NonFinite, "tensor entry {} is {}", i, data[i]);
        }
        let domain = vec![1.0; dims.len()];
        Ok(Self {
            dims,
            roles,
            domain,
            data,
        })
    }

    pub fn zeros(dims: &[usize], roles: &[AxisRole]) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), roles.to_vec(), vec![0.0; n])
    }

    /// A time × space grid, the common layout for trajectories.
    pub fn time_space(nt: usize, nx: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![nt, nx], vec![AxisRole::Time, AxisRole::Space], data)
    }

    pub fn from_fn(
        dims: &[usize],
        roles: &[AxisRole],
        mut f: impl FnMut(&[usize]) -> f64,
    ) -> Result<Self> {
        let n: usize = dims.iter().product();
        let mut idx = vec![0usize; dims.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for a in (0..dims.len()).rev() {
                idx[a] += 1;
                if idx[a] < dims[a] {
                    break;
                }
                idx[a] = 0;
            }
        }
        Self::new(dims.to_vec(), roles.to_vec(), data)
    }

    pub fn with_domain(mut self, domain: Vec<f64>) -> Result<Self> {
        if domain.len() != self.dims.len() {
            bail!(Shape, "domain has {} entries for rank {}", domain.len(), self.rank());
        }
        self.domain = domain;
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn roles(&self) -> &[AxisRole] {
        &self.roles
    }

    pub fn domain(&self) -> &[f64] {
        &self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn time_axis(&self) -> Option<usize> {
        self.roles.iter().position(|r| *r == AxisRole::Time)
    }

    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1; self.dims.len()];
        for a in (0..self.dims.len().saturating_sub(1)).rev() {
            s[a] = s[a + 1] * self.dims[a + 1];
        }
        s
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        let off: usize = idx.iter().zip(self.strides()).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    /// Replaces the payload, re-validating finiteness.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        let mut t = Self::new(self.dims.clone(), self.roles.clone(), data)?;
        t.domain = self.domain.clone();
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        self.with_data(self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims != other.dims {
            bail!(Shape, "{:?} vs {:?}", self.dims, other.dims);
        }
        self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        )
    }

    /// Applies a 1-D kernel to every line along `axis`, producing lines of
    /// length `out_len`.
    pub fn map_lines(
        &self,
        axis: usize,
        out_len: usize,
        mut f: impl FnMut(&[f64], &mut [f64]),
    ) -> Result<Self> {
        if axis >= self.rank() {
            bail!(Invalid, "axis {} out of range for rank {}", axis, self.rank());
        }
        let n = self.dims[axis];
        let outer: usize = self.dims[..axis].iter().product();
        let inner: usize = self.dims[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * out_len * inner];
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; out_len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                for (k, v) in line.iter_mut().enumerate() {
                    *v = self.data[base + k * inner];
                }
                res.iter_mut().for_each(|v| *v = 0.0);
                f(&line, &mut res);
                let obase = o * out_len * inner + i;
                for (k, v) in res.iter().enumerate() {
                    out[obase + k * inner] = *v;
                }
            }
        }
        let mut dims = self.dims.clone();
        dims[axis] = out_len;
        let mut t = Self::new(dims, self.roles.clone(), out)?;
        t.domain = self.domain.clone();
        Ok(t)
    }

    /// Sub-tensor of `len` consecutive indices starting at `start` on `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.dims[axis] {
            bail!(
                Invalid,
                "narrow({}, {}, {}) outside dims {:?}",
                axis,
                start,
                len,
                self.dims
            );
        }
        self.map_lines(axis, len, |src, dst| {
            dst.copy_from_slice(&src[start..start + len])
        })
    }

    /// Concatenates tensors with identical dims except along `axis`.
    pub fn concat(parts: &[&GridTensor], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        for p in parts {
            if p.rank() != first.rank() || axis >= p.rank() {
                bail!(Shape, "concat rank mismatch");
            }
            for a in 0..p.rank() {
                if a != axis && p.dims[a] != first.dims[a] {
                    bail!(Shape, "concat dims {:?} vs {:?}", p.dims, first.dims);
                }
            }
        }
        let outer: usize = first.dims[..axis].iter().product();
        let inner: usize = first.dims[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.dims[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.dims[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut dims = first.dims.clone();
        dims[axis] = total;
        let mut t = Self::new(dims, first.roles.clone(), data)?;
        t.domain = first.domain.clone();
        Ok(t)
    }

    /// Serializes to the `WDT1` container.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 5 * self.rank() + 8 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rank() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for r in &self.roles {
            out.push(r.code());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one `WDT1` tensor from the front of `bytes`, returning the
    /// tensor and the number of bytes consumed.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<(Self, usize)> {
        let mut cur = Cursor { bytes, pos: 0, origin };
        if cur.take(4)? != MAGIC {
            return Err(Error::corrupt(origin, "bad magic, expected WDT1"));
        }
        let rank = cur.u32()? as usize;
        if rank > 16 {
            return Err(Error::corrupt(origin, format!("implausible rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32()? as usize);
        }
        let mut roles = Vec::with_capacity(rank);
        for _ in 0..rank {
            let c = cur.take(1)?[0];
            roles.push(
                AxisRole::from_code(c)
                    .ok_or_else(|| Error::corrupt(origin, format!("unknown role code {c}")))?,
            );
        }
        let n: usize = dims.iter().product();
        let payload = cur.take(n.checked_mul(8).ok_or_else(|| Error::corrupt(origin, "size overflow"))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Self::new(dims, roles, data).map_err(|e| Error::corrupt(origin, e.to_string()))?;
        Ok((t, cur.pos))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        let (t, used) = Self::from_bytes(&buf, path)?;
        if used != buf.len() {
            return Err(Error::corrupt(path, "trailing bytes after tensor payload"));
        }
        Ok(t)
    }
}

const MAGIC: &[u8; 4] = b"WDT1";

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub origin: &'a Path,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(
                self.origin,
                format!("truncated: need {} bytes at offset {}", n, self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Strided subsampling from index 0; an axis of length `n` becomes
/// `ceil(n / factor)`.
pub fn downsample(t: &GridTensor, factors: &[usize]) -> Result<GridTensor> {
    if factors.len() != t.rank() {
        bail!(Invalid, "{} factors for rank {}", factors.len(), t.rank());
    }
    let mut cur = t.clone();
    for (axis, &f) in factors.iter().enumerate() {
        let n = t.dims()[axis];
        if f == 0 {
            bail!(Invalid, "downsample factor 0 on axis {}", axis);
        }
        if f == 1 {
            continue;
        }
        if n % f != 0 && (n - 1) % f != 0 {
            bail!(
                Invalid,
                "factor {} divides neither {} nor {} on axis {}",
                f,
                n,
                n - 1,
                axis
            );
        }
        let m = n.div_ceil(f);
        cur = cur.map_lines(axis, m, |src, dst| {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[i * f];
            }
        })?;
    }
    Ok(cur)
}

/// Interpolation scheme for [`upsample`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Nearest,
    Linear,
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nearest" => Ok(Scheme::Nearest),
            "linear" => Ok(Scheme::Linear),
            other => Err(Error::Invalid(format!("unknown interpolation scheme '{other}'"))),
        }
    }
}

/// Upsamples each axis by an integer factor.
///
/// Axes flagged in `endpoint` carry samples at both ends of the domain and
/// grow to `factor·(n−1)+1`; the others grow to `factor·n`. Output sample `i`
/// sits at coarse coordinate `i / factor`; `Linear` interpolates with clamping
/// past the last node, `Nearest` replicates the node at or below.
pub fn upsample(
    t: &GridTensor,
    factors: &[usize],
    scheme: Scheme,
    endpoint: &[bool],
) -> Result<GridTensor> {
    if factors.len() != t.rank() || endpoint.len() != t.rank() {
        bail!(Invalid, "factor/endpoint arity does not match rank {}", t.rank());
    }
    let mut cur = t.clone();
    for (axis, &f) in factors.iter().enumerate() {
        if f == 0 {
            bail!(Invalid, "upsample factor 0 on axis {}", axis);
        }
        if f == 1 {
            continue;
        }
        let n = t.dims()[axis];
        if n == 0 {
            bail!(Invalid, "empty axis {}", axis);
        }
        let m = if endpoint[axis] { f * (n - 1) + 1 } else { f * n };
        cur = cur.map_lines(axis, m, |src, dst| {
            for (i, d) in dst.iter_mut().enumerate() {
                let lo = (i / f).min(n - 1);
                *d = match scheme {
                    Scheme::Nearest => src[lo],
                    Scheme::Linear => {
                        let hi = (lo + 1).min(n - 1);
                        let w = (i % f) as f64 / f as f64;
                        if hi == lo {
                            src[lo]
                        } else {
                            src[lo] + w * (src[hi] - src[lo])
                        }
                    }
                };
            }
        })?;
    }
    Ok(cur)
}

/// Pointwise error summary between a prediction and a reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub linf: f64,
    pub rel_l2: f64,
}

/// Error metrics reduced uniformly over all retained entries. With
/// `exclude_initial`, time index 0 is dropped from both tensors first.
pub fn metrics(pred: &GridTensor, truth: &GridTensor, exclude_initial: bool) -> Result<Metrics> {
    if pred.dims() != truth.dims() {
        bail!(Shape, "metrics on {:?} vs {:?}", pred.dims(), truth.dims());
    }
    let (p, t) = if exclude_initial {
        let axis = truth
            .time_axis()
            .ok_or_else(|| Error::Invalid("exclude_initial needs a time axis".into()))?;
        let n = truth.dims()[axis];
        if n < 2 {
            bail!(Invalid, "time axis of length {} leaves nothing to score", n);
        }
        (pred.narrow(axis, 1, n - 1)?, truth.narrow(axis, 1, n - 1)?)
    } else {
        (pred.clone(), truth.clone())
    };
    let n = t.len() as f64;
    let (mut se, mut ae, mut linf, mut tn) = (0.0, 0.0, 0.0f64, 0.0);
    for (a, b) in p.data().iter().zip(t.data()) {
        let d = a - b;
        se += d * d;
        ae += d.abs();
        linf = linf.max(d.abs());
        tn += b * b;
    }
    if tn == 0.0 {
        bail!(DegenerateReference, "reference tensor has zero norm");
    }
    Ok(Metrics {
        mse: se / n,
        mae: ae / n,
        linf,
        rel_l2: (se / tn).sqrt(),
    })
}

/// Writes `sample_id,mse,mae,linf,rel_l2` rows.
pub fn write_metrics_csv(path: &Path, rows: &[(String, Metrics)]) -> Result<()> {
    let mut s = String::from("sample_id,mse,mae,linf,rel_l2\n");
    for (id, m) in rows {
        s.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
            id, m.mse, m.mae, m.linf, m.rel_l2
        ));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(v: &[f64]) -> GridTensor {
        GridTensor::new(vec![v.len()], vec![AxisRole::Space], v.to_vec()).unwrap()
    }

    #[test]
    fn rejects_bad_layouts() {
        assert!(GridTensor::new(vec![2, 2], vec![AxisRole::Space], vec![0.0; 4]).is_err());
        assert!(GridTensor::new(vec![3], vec![AxisRole::Space], vec![0.0; 4]).is_err());
        assert!(GridTensor::new(
            vec![1, 1],
            vec![AxisRole::Time, AxisRole::Time],
            vec![0.0]
        )
        .is_err());
        assert!(matches!(
            GridTensor::new(vec![2], vec![AxisRole::Space], vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn downsample_examples() {
        let d = downsample(&line(&[0., 1., 2., 3., 4.]), &[2]).unwrap();
        assert_eq!(d.data(), &[0., 2., 4.]);
        let t = GridTensor::zeros(&[81, 120], &[AxisRole::Time, AxisRole::Space]).unwrap();
        assert_eq!(downsample(&t, &[2, 2]).unwrap().dims(), &[41, 60]);
        let c = GridTensor::from_fn(&[9, 8], &[AxisRole::Time, AxisRole::Space], |_| 3.5).unwrap();
        let dc = downsample(&c, &[2, 4]).unwrap();
        assert_eq!(dc.dims(), &[5, 2]);
        assert!(dc.data().iter().all(|v| *v == 3.5));
    }

    #[test]
    fn downsample_errors() {
        let t = line(&[0.; 7]);
        assert!(downsample(&t, &[0]).is_err());
        assert!(downsample(&t, &[4]).is_err());
        assert!(downsample(&t, &[3]).is_ok());
    }

    #[test]
    fn upsample_examples() {
        let l = upsample(&line(&[0., 2.]), &[2], Scheme::Linear, &[true]).unwrap();
        assert_eq!(l.data(), &[0., 1., 2.]);
        let n = upsample(&line(&[0., 2.]), &[2], Scheme::Nearest, &[false]).unwrap();
        assert_eq!(n.data(), &[0., 0., 2., 2.]);
        assert!("cubic".parse::<Scheme>().is_err());
    }

    #[test]
    fn linear_roundtrip_exact_on_affine() {
        let x: Vec<f64> = (0..17).map(|i| 0.25 * i as f64 - 1.0).collect();
        let t = line(&x);
        let back = upsample(&downsample(&t, &[2]).unwrap(), &[2], Scheme::Linear, &[true]).unwrap();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn metrics_examples() {
        let t = GridTensor::from_fn(&[3, 4], &[AxisRole::Time, AxisRole::Space], |i| {
            (i[0] * 4 + i[1]) as f64 - 5.0
        })
        .unwrap();
        let m = metrics(&t, &t, true).unwrap();
        assert_eq!((m.mse, m.mae, m.linf, m.rel_l2), (0.0, 0.0, 0.0, 0.0));
        let p = t.map(|v| v + 1.0).unwrap();
        let m = metrics(&p, &t, false).unwrap();
        assert_eq!((m.mse, m.mae, m.linf), (1.0, 1.0, 1.0));
        let z = GridTensor::zeros(&[3, 4], &[AxisRole::Time, AxisRole::Space]).unwrap();
        assert!(matches!(metrics(&t, &z, false), Err(Error::DegenerateReference(_))));
        let other = GridTensor::zeros(&[4, 3], &[AxisRole::Time, AxisRole::Space]).unwrap();
        assert!(matches!(metrics(&t, &other, false), Err(Error::Shape(_))));
    }

    #[test]
    fn exclude_initial_drops_first_frame() {
        let t = GridTensor::from_fn(&[2, 2], &[AxisRole::Time, AxisRole::Space], |_| 1.0).unwrap();
        let p = GridTensor::time_space(2, 2, vec![9.0, 9.0, 1.0, 3.0]).unwrap();
        let m = metrics(&p, &t, true).unwrap();
        assert_eq!(m.mse, 2.0);
        assert_eq!(m.linf, 2.0);
    }

    #[test]
    fn tensor_bytes_layout() {
        let t = GridTensor::time_space(1, 2, vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..4], b"WDT1");
        assert_eq!(&b[4..8], &2u32.to_le_bytes());
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[16..18], &[0, 1]);
        assert_eq!(&b[18..26], &1.0f64.to_le_bytes());
        let (back, used) = GridTensor::from_bytes(&b, Path::new("mem")).unwrap();
        assert_eq!(used, b.len());
        assert_eq!(back, t);
        assert!(GridTensor::from_bytes(&b[..b.len() - 1], Path::new("mem")).is_err());
    }

    proptest! {
        #[test]
        fn metrics_permutation_invariant(v in prop::collection::vec(-5.0f64..5.0, 12), w in prop::collection::vec(0.5f64..5.0, 12), rot in 0usize..12) {
            let a = GridTensor::time_space(3, 4, v.clone()).unwrap();
            let b = GridTensor::time_space(3, 4, w.clone()).unwrap();
            let mut vp = v.clone(); vp.rotate_left(rot);
            let mut wp = w.clone(); wp.rotate_left(rot);
            let m1 = metrics(&a, &b, false).unwrap();
            let m2 = metrics(&GridTensor::time_space(3, 4, vp).unwrap(), &GridTensor::time_space(3, 4, wp).unwrap(), false).unwrap();
            prop_assert!((m1.mse - m2.mse).abs() < 1e-12);
            prop_assert!((m1.mae - m2.mae).abs() < 1e-12);
            prop_assert!((m1.rel_l2 - m2.rel_l2).abs() < 1e-12);
            prop_assert_eq!(m1.linf, m2.linf);
        }

        #[test]
        fn downsample_composes(a in 1usize..4, b in 1usize..4, k in 1usize..5) {
            let n = a * b * k + 1;
            let t = line(&(0..n).map(|i| (i as f64).sin()).collect::<Vec<_>>());
            let two = downsample(&downsample(&t, &[a]).unwrap(), &[b]).unwrap();
            let one = downsample(&t, &[a * b]).unwrap();
            prop_assert_eq!(two, one);
        }

        #[test]
        fn nearest_exact_on_aligned_steps(v in prop::collection::vec(-3.0f64..3.0, 2..10), f in 1usize..5) {
            let coarse = line(&v);
            let fine: Vec<f64> = v.iter().flat_map(|x| std::iter::repeat_n(*x, f)).collect();
            let up = upsample(&coarse, &[f], Scheme::Nearest, &[false]).unwrap();
            prop_assert_eq!(up.data(), &fine[..]);
        }
    }
}
