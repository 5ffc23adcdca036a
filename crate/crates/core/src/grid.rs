//! Rectangular N-dimensional grids and the scalar fields that live on them.
//!
//! Storage is row-major: the last axis varies fastest. Periodic axes (used
//! for headings) place `n` nodes on `[lo, hi)` and wrap; every other axis
//! places `n` nodes on `[lo, hi]` inclusive.

use std::io::{BufRead, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{domain, usage, Error, Result};

/// Slack used when deciding whether a coordinate sits on a bound.
const BOUND_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
    #[serde(default)]
    pub periodic: bool,
}

impl Axis {
    pub fn new(name: impl Into<String>, lo: f64, hi: f64, n: usize) -> Self {
        Self { name: name.into(), lo, hi, n, periodic: false }
    }

    pub fn periodic(name: impl Into<String>, lo: f64, hi: f64, n: usize) -> Self {
        Self { name: name.into(), lo, hi, n, periodic: true }
    }

    pub fn spacing(&self) -> f64 {
        if self.periodic {
            (self.hi - self.lo) / self.n as f64
        } else {
            (self.hi - self.lo) / (self.n - 1) as f64
        }
    }

    pub fn coord(&self, i: usize) -> f64 {
        self.lo + i as f64 * self.spacing()
    }

    pub fn period(&self) -> f64 {
        self.hi - self.lo
    }

    /// Index of the node nearest to `x` (wrapped on periodic axes, clamped otherwise).
    pub fn nearest(&self, x: f64) -> usize {
        let u = (self.wrap(x) - self.lo) / self.spacing();
        let i = u.round().max(0.0) as usize;
        if self.periodic {
            i % self.n
        } else {
            i.min(self.n - 1)
        }
    }

    /// Maps a periodic coordinate into `[lo, hi)`. Identity on other axes.
    pub fn wrap(&self, x: f64) -> f64 {
        if !self.periodic {
            return x;
        }
        let p = self.period();
        let mut t = (x - self.lo).rem_euclid(p);
        if t >= p {
            t -= p;
        }
        self.lo + t
    }

    pub fn contains(&self, x: f64) -> bool {
        self.periodic || (x >= self.lo - BOUND_EPS && x <= self.hi + BOUND_EPS)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.hi <= self.lo {
            return Err(Error::Validation {
                field: format!("axis `{}`", self.name),
                message: format!("upper bound {} must exceed lower bound {}", self.hi, self.lo),
            });
        }
        if self.n < 2 {
            return Err(Error::Validation {
                field: format!("axis `{}`", self.name),
                message: format!("needs at least 2 points, got {}", self.n),
            });
        }
        Ok(())
    }
}

/// Shape and coordinates of a rectangular grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SpecRepr", into = "SpecRepr")]
pub struct GridSpec {
    pub axes: Vec<Axis>,
    strides: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct SpecRepr {
    axes: Vec<Axis>,
}

impl TryFrom<SpecRepr> for GridSpec {
    type Error = Error;
    fn try_from(r: SpecRepr) -> Result<Self> {
        GridSpec::new(r.axes)
    }
}

impl From<GridSpec> for SpecRepr {
    fn from(g: GridSpec) -> Self {
        SpecRepr { axes: g.axes }
    }
}

impl GridSpec {
    pub fn new(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return usage("a grid needs at least one axis");
        }
        for a in &axes {
            a.validate()?;
        }
        let mut strides = vec![1; axes.len()];
        for d in (0..axes.len() - 1).rev() {
            strides[d] = strides[d + 1] * axes[d + 1].n;
        }
        Ok(Self { axes, strides })
    }

    pub fn ndim(&self) -> usize {
        self.axes.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.axes.iter().map(|a| a.n).collect()
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.n).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.axes[axis].spacing()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }

    pub fn unravel(&self, mut flat: usize, out: &mut [usize]) {
        for (d, s) in self.strides.iter().enumerate() {
            out[d] = flat / s;
            flat %= s;
        }
    }

    pub fn node_coords(&self, idx: &[usize], out: &mut [f64]) {
        for (d, a) in self.axes.iter().enumerate() {
            out[d] = a.coord(idx[d]);
        }
    }

    pub fn coords_of(&self, flat: usize) -> Vec<f64> {
        let mut idx = vec![0; self.ndim()];
        self.unravel(flat, &mut idx);
        let mut x = vec![0.0; self.ndim()];
        self.node_coords(&idx, &mut x);
        x
    }

    /// True when `point` lies inside the grid after wrapping periodic axes.
    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.ndim() && self.axes.iter().zip(point).all(|(a, &x)| a.contains(x))
    }

    /// Keeps only the listed axes, in the order given.
    pub fn sub_spec(&self, axes: &[usize]) -> Result<GridSpec> {
        GridSpec::new(axes.iter().map(|&a| self.axes[a].clone()).collect())
    }
}

/// Values sampled on every node of a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    spec: GridSpec,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return usage(format!(
                "field has {} values but grid has {} nodes",
                values.len(),
                spec.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite field value at node {i}")));
        }
        Ok(Self { spec, values })
    }

    pub fn from_fn(spec: GridSpec, mut f: impl FnMut(&[f64]) -> f64) -> Result<Self> {
        let n = spec.len();
        let mut values = Vec::with_capacity(n);
        let mut idx = vec![0; spec.ndim()];
        let mut x = vec![0.0; spec.ndim()];
        for flat in 0..n {
            spec.unravel(flat, &mut idx);
            spec.node_coords(&idx, &mut x);
            values.push(f(&x));
        }
        Self::new(spec, values)
    }

    pub fn constant(spec: GridSpec, c: f64) -> Result<Self> {
        let n = spec.len();
        Self::new(spec, vec![c; n])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.values[self.spec.flat_index(idx)]
    }

    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Multilinear interpolation. Periodic axes wrap; any other axis errors
    /// when the point lies outside its bounds.
    pub fn interpolate(&self, point: &[f64]) -> Result<f64> {
        let nd = self.spec.ndim();
        if point.len() != nd {
            return usage(format!("point has {} coordinates, grid has {nd} axes", point.len()));
        }
        let mut lo_idx = [0usize; 8];
        let mut hi_idx = [0usize; 8];
        let mut frac = [0.0f64; 8];
        if nd > 8 {
            return usage("interpolation supports at most 8 axes");
        }
        for (d, a) in self.spec.axes.iter().enumerate() {
            let x = point[d];
            if !x.is_finite() {
                return domain(format!("non-finite coordinate on axis `{}`", a.name));
            }
            if !a.contains(x) {
                return domain(format!(
                    "coordinate {x} outside [{}, {}] on axis `{}`",
                    a.lo, a.hi, a.name
                ));
            }
            let h = a.spacing();
            let u = (a.wrap(x) - a.lo) / h;
            if a.periodic {
                let i0 = (u.floor() as usize).min(a.n - 1);
                frac[d] = (u - i0 as f64).clamp(0.0, 1.0);
                lo_idx[d] = i0;
                hi_idx[d] = (i0 + 1) % a.n;
            } else {
                let i0 = (u.floor().max(0.0) as usize).min(a.n - 2);
                frac[d] = (u - i0 as f64).clamp(0.0, 1.0);
                lo_idx[d] = i0;
                hi_idx[d] = i0 + 1;
            }
        }
        let strides = self.spec.strides();
        let mut acc = 0.0;
        for corner in 0..(1usize << nd) {
            let mut w = 1.0;
            let mut flat = 0;
            for d in 0..nd {
                if corner >> d & 1 == 1 {
                    w *= frac[d];
                    flat += hi_idx[d] * strides[d];
                } else {
                    w *= 1.0 - frac[d];
                    flat += lo_idx[d] * strides[d];
                }
            }
            if w != 0.0 {
                acc += w * self.values[flat];
            }
        }
        Ok(acc)
    }

    /// Backward and forward differences along `axis` at node `idx`.
    ///
    /// On a non-periodic boundary the one available one-sided difference is
    /// returned in both slots.
    pub fn upwind_derivatives(&self, idx: &[usize], axis: usize) -> Result<(f64, f64)> {
        if axis >= self.spec.ndim() {
            return usage(format!("axis {axis} out of range for {}-D grid", self.spec.ndim()));
        }
        if idx.len() != self.spec.ndim() || idx.iter().zip(&self.spec.axes).any(|(&i, a)| i >= a.n) {
            return usage(format!("invalid node index {idx:?}"));
        }
        let a = &self.spec.axes[axis];
        let h = a.spacing();
        let s = self.spec.strides()[axis];
        let flat = self.spec.flat_index(idx);
        let i = idx[axis];
        let v = self.values[flat];
        let (prev, next) = if a.periodic {
            let p = if i == 0 { flat + (a.n - 1) * s } else { flat - s };
            let q = if i == a.n - 1 { flat - (a.n - 1) * s } else { flat + s };
            (Some(self.values[p]), Some(self.values[q]))
        } else {
            (
                (i > 0).then(|| self.values[flat - s]),
                (i + 1 < a.n).then(|| self.values[flat + s]),
            )
        };
        Ok(match (prev, next) {
            (Some(p), Some(q)) => ((v - p) / h, (q - v) / h),
            (None, Some(q)) => ((q - v) / h, (q - v) / h),
            (Some(p), None) => ((v - p) / h, (v - p) / h),
            (None, None) => unreachable!("axes have at least two nodes"),
        })
    }

    /// Gradient at an arbitrary point by central differences of interpolated
    /// values, one grid spacing either side. Near a non-periodic bound the
    /// stencil becomes one-sided.
    pub fn gradient(&self, point: &[f64]) -> Result<Vec<f64>> {
        let nd = self.spec.ndim();
        let mut grad = vec![0.0; nd];
        let mut probe = point.to_vec();
        for d in 0..nd {
            let a = &self.spec.axes[d];
            let h = a.spacing();
            let x = point[d];
            let (xm, xp) = if a.periodic {
                (x - h, x + h)
            } else {
                ((x - h).max(a.lo), (x + h).min(a.hi))
            };
            if xp - xm <= 0.0 {
                return domain(format!("degenerate stencil on axis `{}`", a.name));
            }
            probe[d] = xp;
            let fp = self.interpolate(&probe)?;
            probe[d] = xm;
            let fm = self.interpolate(&probe)?;
            probe[d] = x;
            grad[d] = (fp - fm) / (xp - xm);
        }
        Ok(grad)
    }

    /// Minimum over every axis not in `keep_axes`. The result lives on the
    /// kept axes in ascending axis order.
    pub fn project_min(&self, keep_axes: &[usize]) -> Result<ScalarField> {
        let nd = self.spec.ndim();
        let mut keep: Vec<usize> = keep_axes.to_vec();
        keep.sort_unstable();
        keep.dedup();
        if keep.is_empty() || keep.len() >= nd || keep.iter().any(|&a| a >= nd) {
            return usage(format!(
                "keep_axes {keep_axes:?} must be a nonempty strict subset of 0..{nd}"
            ));
        }
        let out_spec = self.spec.sub_spec(&keep)?;
        let mut out = vec![f64::INFINITY; out_spec.len()];
        let out_strides = out_spec.strides().to_vec();
        let mut idx = vec![0; nd];
        for (flat, &v) in self.values.iter().enumerate() {
            self.spec.unravel(flat, &mut idx);
            let o: usize = keep.iter().zip(&out_strides).map(|(&a, s)| idx[a] * s).sum();
            if v < out[o] {
                out[o] = v;
            }
        }
        ScalarField::new(out_spec, out)
    }

    /// Writes the field as one JSON header line followed by the raw values
    /// as little-endian `f64`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = FieldHeader { axes: self.spec.axes.clone() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.values.len() * 8);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = std::io::BufReader::new(r);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let header: FieldHeader = serde_json::from_str(line.trim_end())?;
        let spec = GridSpec::new(header.axes)?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != spec.len() * 8 {
            return usage(format!(
                "field payload has {} bytes, expected {}",
                raw.len(),
                spec.len() * 8
            ));
        }
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(spec, values)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct FieldHeader {
    axes: Vec<Axis>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize) -> GridSpec {
        GridSpec::new(vec![Axis::new("x", 0.0, 1.0, n)]).unwrap()
    }

    #[test]
    fn spacing_periodic_and_not() {
        assert!((Axis::new("x", 0.0, 1.0, 11).spacing() - 0.1).abs() < 1e-15);
        assert!((Axis::periodic("a", 0.0, 1.0, 10).spacing() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(GridSpec::new(vec![Axis::new("x", 1.0, 0.0, 5)]).is_err());
        assert!(GridSpec::new(vec![Axis::new("x", 0.0, 1.0, 1)]).is_err());
    }

    #[test]
    fn interpolate_constant_and_linear() {
        let f = ScalarField::constant(line(5), 3.5).unwrap();
        assert_eq!(f.interpolate(&[0.77]).unwrap(), 3.5);
        let g = ScalarField::from_fn(line(11), |x| x[0]).unwrap();
        assert!((g.interpolate(&[0.35]).unwrap() - 0.35).abs() < 1e-12);
    }

    #[test]
    fn interpolate_bilinear_matches_corner_weights() {
        let spec = GridSpec::new(vec![Axis::new("x", 0.0, 1.0, 5), Axis::new("y", 0.0, 1.0, 5)])
            .unwrap();
        let f = ScalarField::from_fn(spec, |p| p[0] * p[1]).unwrap();
        // Cell [0.25,0.5]x[0.5,0.75]; weights from the corner distances.
        let (x0, x1, y0, y1) = (0.25, 0.5, 0.5, 0.75);
        let (tx, ty) = ((0.3 - x0) / (x1 - x0), (0.6 - y0) / (y1 - y0));
        let oracle = (1.0 - tx) * (1.0 - ty) * x0 * y0
            + tx * (1.0 - ty) * x1 * y0
            + (1.0 - tx) * ty * x0 * y1
            + tx * ty * x1 * y1;
        assert!((f.interpolate(&[0.3, 0.6]).unwrap() - oracle).abs() < 1e-14);
    }

    #[test]
    fn interpolate_out_of_bounds_is_domain_error() {
        let f = ScalarField::constant(line(5), 1.0).unwrap();
        assert!(matches!(f.interpolate(&[1.2]), Err(Error::Domain(_))));
        assert!(matches!(f.interpolate(&[-0.1]), Err(Error::Domain(_))));
    }

    #[test]
    fn interpolate_wraps_periodic_axis() {
        let spec = GridSpec::new(vec![Axis::periodic("psi", -std::f64::consts::PI, std::f64::consts::PI, 8)])
            .unwrap();
        let f = ScalarField::from_fn(spec, |p| p[0].cos()).unwrap();
        let a = f.interpolate(&[3.0]).unwrap();
        let b = f.interpolate(&[3.0 - 2.0 * std::f64::consts::PI]).unwrap();
        assert!((a - b).abs() < 1e-12);
        // between last node and wrap-around to the first
        let hi = f.interpolate(&[std::f64::consts::PI - 1e-12]).unwrap();
        assert!((hi - (-1.0)).abs() < 1e-6);
    }

    #[test]
    fn upwind_examples() {
        let g = ScalarField::from_fn(line(11), |x| 2.0 * x[0]).unwrap();
        let (l, r) = g.upwind_derivatives(&[5], 0).unwrap();
        assert!((l - 2.0).abs() < 1e-12 && (r - 2.0).abs() < 1e-12);
        let c = ScalarField::constant(line(11), 4.0).unwrap();
        assert_eq!(c.upwind_derivatives(&[0], 0).unwrap(), (0.0, 0.0));
        let q = ScalarField::from_fn(line(11), |x| x[0] * x[0]).unwrap();
        let (l, r) = q.upwind_derivatives(&[5], 0).unwrap();
        assert!((l - 0.9).abs() < 1e-12 && (r - 1.1).abs() < 1e-12);
        // boundary duplication
        let (l, r) = q.upwind_derivatives(&[0], 0).unwrap();
        assert_eq!(l, r);
        assert!(matches!(q.upwind_derivatives(&[0], 1), Err(Error::Usage(_))));
    }

    #[test]
    fn project_min_examples() {
        let spec = GridSpec::new(vec![Axis::new("x", 0.0, 1.0, 6), Axis::new("y", 0.0, 1.0, 4)])
            .unwrap();
        let f = ScalarField::from_fn(spec.clone(), |p| p[0] + p[1]).unwrap();
        let g = f.project_min(&[0]).unwrap();
        for i in 0..6 {
            assert!((g.at(&[i]) - Axis::new("x", 0.0, 1.0, 6).coord(i)).abs() < 1e-12);
        }
        let c = ScalarField::constant(spec, 2.0).unwrap();
        assert!(c.project_min(&[1]).unwrap().values().iter().all(|&v| v == 2.0));
        assert!(f.project_min(&[]).is_err());
        assert!(f.project_min(&[0, 1]).is_err());
    }

    #[test]
    fn project_min_matches_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let spec = GridSpec::new(vec![
            Axis::new("a", 0.0, 1.0, 4),
            Axis::new("b", 0.0, 1.0, 4),
            Axis::new("c", 0.0, 1.0, 4),
        ])
        .unwrap();
        let vals: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = ScalarField::new(spec, vals.clone()).unwrap();
        let g = f.project_min(&[0]).unwrap();
        for i in 0..4 {
            let mut m = f64::INFINITY;
            for j in 0..4 {
                for k in 0..4 {
                    m = m.min(vals[i * 16 + j * 4 + k]);
                }
            }
            assert_eq!(g.at(&[i]), m);
        }
    }

    #[test]
    fn gradient_of_linear_field() {
        let spec = GridSpec::new(vec![Axis::new("x", -1.0, 1.0, 21), Axis::new("y", -1.0, 1.0, 21)])
            .unwrap();
        let f = ScalarField::from_fn(spec, |p| 3.0 * p[0] - 2.0 * p[1]).unwrap();
        for pt in [[0.0, 0.0], [0.93, -0.41], [-1.0, 1.0]] {
            let g = f.gradient(&pt).unwrap();
            assert!((g[0] - 3.0).abs() < 1e-9 && (g[1] + 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn persistence_round_trip_is_bit_exact() {
        let spec = GridSpec::new(vec![
            Axis::new("x", -0.3, 1.7, 3),
            Axis::periodic("psi", -std::f64::consts::PI, std::f64::consts::PI, 5),
        ])
        .unwrap();
        let f = ScalarField::from_fn(spec, |p| (p[0] * 1e-3).exp() / 3.0 + p[1].sin()).unwrap();
        let mut buf = Vec::new();
        f.write_to(&mut buf).unwrap();
        let g = ScalarField::read_from(&buf[..]).unwrap();
        assert_eq!(f.spec(), g.spec());
        for (a, b) in f.values().iter().zip(g.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
