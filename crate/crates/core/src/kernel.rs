//! Compactly supported Wendland kernels, kernel matrices and point grids.

use std::io::{Read, Write};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::AxisBox;

/// Exponent `l` in `phi(r) = (1-r)^(l+1) ((l+1) r + 1) / ((l+1)(l+2))`.
///
/// With this normalization `phi'(r) = -r (1-r)^l`.
fn wendland_exponent(n: usize, k: usize) -> Result<i32> {
    match (n, k) {
        (1, 1) => Ok(2),
        (2, 1) | (3, 1) => Ok(3),
        (4, 1) | (5, 1) => Ok(4),
        _ => Err(Error::Capability(format!(
            "no Wendland function tabulated for dimension {n}, smoothness {k}"
        ))),
    }
}

#[inline]
fn phi_l(l: i32, r: f64) -> f64 {
    if r >= 1.0 {
        return 0.0;
    }
    let l1 = f64::from(l + 1);
    (1.0 - r).powi(l + 1) * (l1 * r + 1.0) / (l1 * (l1 + 1.0))
}

/// Wendland function `phi_{n,k}(r)`; zero for `r >= 1`.
pub fn wendland_phi(n: usize, k: usize, r: f64) -> Result<f64> {
    Ok(phi_l(wendland_exponent(n, k)?, r))
}

/// Derivative `phi'_{n,k}(r)`.
pub fn wendland_dphi(n: usize, k: usize, r: f64) -> Result<f64> {
    let l = wendland_exponent(n, k)?;
    Ok(if r >= 1.0 { 0.0 } else { -r * (1.0 - r).powi(l) })
}

/// Radial kernel `k(x, y) = phi_{n,k}(||x - y|| / scale)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawKernelSpec", into = "RawKernelSpec")]
pub struct KernelSpec {
    pub dim: usize,
    pub smoothness: usize,
    pub scale: f64,
    pub lambda: f64,
    exponent: i32,
}

#[derive(Serialize, Deserialize)]
struct RawKernelSpec {
    dim: usize,
    smoothness: usize,
    scale: f64,
    lambda: f64,
}

impl TryFrom<RawKernelSpec> for KernelSpec {
    type Error = Error;

    fn try_from(r: RawKernelSpec) -> Result<Self> {
        KernelSpec::new(r.dim, r.smoothness, r.scale, r.lambda)
    }
}

impl From<KernelSpec> for RawKernelSpec {
    fn from(k: KernelSpec) -> Self {
        RawKernelSpec {
            dim: k.dim,
            smoothness: k.smoothness,
            scale: k.scale,
            lambda: k.lambda,
        }
    }
}

/// Above this many centers the default regularization switches on.
pub const REGULARIZATION_THRESHOLD: usize = 1500;

impl KernelSpec {
    pub fn new(dim: usize, smoothness: usize, scale: f64, lambda: f64) -> Result<Self> {
        let exponent = wendland_exponent(dim, smoothness)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!("kernel scale must be positive, got {scale}")));
        }
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::Config(format!(
                "regularization must be nonnegative, got {lambda}"
            )));
        }
        Ok(Self {
            dim,
            smoothness,
            scale,
            lambda,
            exponent,
        })
    }

    /// `k = 1`, scale half the box diameter, and the size-dependent default `lambda`.
    pub fn default_for(domain: &AxisBox, centers: usize) -> Result<Self> {
        let mut spec = Self::new(domain.dim(), 1, 0.5 * domain.diameter(), 0.0)?;
        spec.lambda = spec.default_lambda(centers);
        Ok(spec)
    }

    pub fn default_lambda(&self, centers: usize) -> f64 {
        if centers > REGULARIZATION_THRESHOLD {
            1e-10 * self.phi0()
        } else {
            0.0
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn phi0(&self) -> f64 {
        phi_l(self.exponent, 0.0)
    }

    #[inline]
    pub fn phi(&self, r: f64) -> f64 {
        phi_l(self.exponent, r)
    }

    #[inline]
    fn eval_sq(&self, dist_sq: f64) -> f64 {
        let s2 = self.scale * self.scale;
        if dist_sq >= s2 {
            0.0
        } else {
            phi_l(self.exponent, (dist_sq / s2).sqrt())
        }
    }

    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        self.eval_sq(dist_sq(x, y))
    }

    /// `grad_x k(x, y) = -(1-r)^l (x - y) / scale^2`.
    pub fn gradient(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let s2 = self.scale * self.scale;
        let d2 = dist_sq(x, y);
        if d2 >= s2 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let w = -(1.0 - (d2 / s2).sqrt()).powi(self.exponent) / s2;
        for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
            *o = w * (a - b);
        }
    }
}

/// Free-function form of [`KernelSpec::eval`].
pub fn kernel_eval(spec: &KernelSpec, x: &[f64], y: &[f64]) -> f64 {
    spec.eval(x, y)
}

#[inline]
fn dist_sq(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Centers stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    dim: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Data(format!(
                "flat buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_points(points: &[DVector<f64>]) -> Result<Self> {
        let dim = points
            .first()
            .map(|p| p.len())
            .ok_or_else(|| Error::Data("empty point set".into()))?;
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Data("points have mixed dimensions".into()));
        }
        let data = points.iter().flat_map(|p| p.iter().copied()).collect();
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vectors(&self) -> Vec<DVector<f64>> {
        self.iter().map(DVector::from_column_slice).collect()
    }

    /// Index pair of the closest two points, if any are closer than `tol`.
    pub fn find_duplicate(&self, tol: f64) -> Option<(usize, usize)> {
        let n = self.len();
        let tol2 = tol * tol;
        (0..n).find_map(|i| {
            ((i + 1)..n)
                .find(|&j| dist_sq(self.point(i), self.point(j)) <= tol2)
                .map(|j| (i, j))
        })
    }

    /// Write one point per row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let header: Vec<String> = (0..self.dim).map(|i| format!("x{}", i + 1)).collect();
        w.write_record(&header)?;
        for p in self.iter() {
            w.write_record(p.iter().map(|v| format!("{v:e}")))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let dim = r.headers()?.len();
        let mut data = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            for field in rec.iter() {
                data.push(
                    field
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad coordinate {field:?}: {e}")))?,
                );
            }
        }
        Self::new(dim, data)
    }
}

/// Cholesky factorization of `K_X + lambda I` over a fixed center set.
#[derive(Debug, Clone)]
pub struct FactorizedKernelMatrix {
    spec: KernelSpec,
    centers: PointSet,
    matrix: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    condition_estimate: f64,
    inverse_norm_estimate: f64,
}

/// Assemble and factorize `K_X + lambda I`.
pub fn kernel_matrix(spec: &KernelSpec, centers: &PointSet) -> Result<FactorizedKernelMatrix> {
    if centers.dim() != spec.dim {
        return Err(Error::Data(format!(
            "centers are {}-dimensional, kernel expects {}",
            centers.dim(),
            spec.dim
        )));
    }
    let d = centers.len();
    if d == 0 {
        return Err(Error::Data("no centers".into()));
    }
    if let Some((i, j)) = centers.find_duplicate(0.0) {
        return Err(Error::Data(format!("centers {i} and {j} coincide")));
    }
    let mut matrix = DMatrix::<f64>::zeros(d, d);
    // Fill the upper triangle column by column, then mirror it.
    let columns: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|j| {
            let xj = centers.point(j);
            (0..j).map(|i| spec.eval(centers.point(i), xj)).collect()
        })
        .collect();
    let diag = spec.phi0() + spec.lambda;
    for (j, col) in columns.into_iter().enumerate() {
        for (i, v) in col.into_iter().enumerate() {
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
        matrix[(j, j)] = diag;
    }
    let suggestion = || Error::Factorization {
        size: d,
        suggested_lambda: (10.0 * spec.lambda).max(1e-10 * spec.phi0()),
    };
    let chol = Cholesky::new(matrix.clone()).ok_or_else(suggestion)?;
    if chol.l_dirty().diagonal().iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(suggestion());
    }
    let mut out = FactorizedKernelMatrix {
        spec: *spec,
        centers: centers.clone(),
        matrix,
        chol,
        condition_estimate: f64::NAN,
        inverse_norm_estimate: f64::NAN,
    };
    let (lmax, inv_lmin) = out.extreme_eigenvalues(60);
    out.condition_estimate = lmax * inv_lmin;
    out.inverse_norm_estimate = inv_lmin;
    Ok(out)
}

impl FactorizedKernelMatrix {
    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn centers(&self) -> &PointSet {
        &self.centers
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// The assembled matrix `K_X + lambda I`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// 2-norm condition number from power and inverse-power iteration.
    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate
    }

    /// `||(K_X + lambda I)^{-1}||_2` from inverse-power iteration.
    pub fn inverse_norm_estimate(&self) -> f64 {
        self.inverse_norm_estimate
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    /// Dense `(K_X + lambda I)^{-1}`.
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Feature vector `k_X(x)`.
    pub fn feature_vector(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.len());
        self.feature_into(x, out.as_mut_slice());
        out
    }

    pub fn feature_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, c) in out.iter_mut().zip(self.centers.iter()) {
            *o = self.spec.eval_sq(dist_sq(x, c));
        }
    }

    /// Rows of the `d x n` matrix of feature gradients at `x`.
    pub fn feature_gradients(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.spec.dim;
        let mut out = DMatrix::zeros(self.len(), n);
        let mut g = vec![0.0; n];
        for (i, c) in self.centers.iter().enumerate() {
            self.spec.gradient(x, c, &mut g);
            for (k, v) in g.iter().enumerate() {
                out[(i, k)] = *v;
            }
        }
        out
    }

    /// `(lambda_max, 1 / lambda_min)` by power and inverse-power iteration.
    fn extreme_eigenvalues(&self, iters: usize) -> (f64, f64) {
        let d = self.len();
        if d == 1 {
            let a = self.matrix[(0, 0)];
            return (a, 1.0 / a);
        }
        let start = DVector::from_fn(d, |i, _| 1.0 + 0.5 * ((i * 7919) % 13) as f64 / 13.0);
        let mut v = start.normalize();
        let mut lmax = 0.0;
        for _ in 0..iters {
            let w = &self.matrix * &v;
            lmax = v.dot(&w);
            let nrm = w.norm();
            if nrm == 0.0 {
                break;
            }
            v = w / nrm;
        }
        let mut v = start.normalize();
        let mut inv_lmin = 0.0;
        for _ in 0..iters {
            let w = self.chol.solve(&v);
            inv_lmin = v.dot(&w);
            let nrm = w.norm();
            if !(nrm.is_finite() && nrm > 0.0) {
                return (lmax, f64::INFINITY);
            }
            v = w / nrm;
        }
        (lmax, inv_lmin)
    }
}

/// Which grid to emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GridKind {
    Padua { order: usize },
    Uniform { per_axis: usize },
    Explicit { points: Vec<Vec<f64>> },
}

/// Grid of virtual observation points over a box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    #[serde(flatten)]
    pub kind: GridKind,
    pub domain: AxisBox,
    pub include_origin: bool,
}

impl GridSpec {
    pub fn points(&self) -> Result<PointSet> {
        match &self.kind {
            GridKind::Padua { order } => padua_points(*order, &self.domain, self.include_origin),
            GridKind::Uniform { per_axis } => {
                uniform_grid(*per_axis, &self.domain, self.include_origin)
            }
            GridKind::Explicit { points } => {
                let pts: Vec<DVector<f64>> =
                    points.iter().map(|p| DVector::from_column_slice(p)).collect();
                if let Some(p) = pts.iter().find(|p| !self.domain.contains(p.as_slice())) {
                    return Err(Error::Data(format!("grid point {:?} outside the box", p.as_slice())));
                }
                finish_grid(pts, &self.domain, self.include_origin)
            }
        }
    }
}

/// Put the origin first (if requested and not yet present) and reject duplicates.
fn finish_grid(
    mut pts: Vec<DVector<f64>>,
    domain: &AxisBox,
    include_origin: bool,
) -> Result<PointSet> {
    if include_origin {
        if !domain.contains(&vec![0.0; domain.dim()]) {
            return Err(Error::Data("origin lies outside the grid box".into()));
        }
        match pts.iter().position(|p| p.iter().all(|v| *v == 0.0)) {
            Some(i) => {
                let o = pts.remove(i);
                pts.insert(0, o);
            }
            None => pts.insert(0, DVector::zeros(domain.dim())),
        }
    }
    let set = PointSet::from_points(&pts)?;
    if let Some((i, j)) = set.find_duplicate(1e-12 * domain.diameter()) {
        return Err(Error::Data(format!("grid points {i} and {j} coincide")));
    }
    Ok(set)
}

/// Padua points of order `p`, mapped affinely from `[-1, 1]^2` onto `domain`.
///
/// With `include_origin` the origin is placed first, ahead of the
/// `(p+1)(p+2)/2` Padua points.
pub fn padua_points(order: usize, domain: &AxisBox, include_origin: bool) -> Result<PointSet> {
    if domain.dim() != 2 {
        return Err(Error::Capability(format!(
            "Padua points are defined in 2-D, box is {}-D",
            domain.dim()
        )));
    }
    if order == 0 {
        return Err(Error::Config("Padua order must be at least 1".into()));
    }
    let p = order;
    let pf = p as f64;
    let map = |axis: usize, t: f64| {
        let (lo, hi) = (domain.lower()[axis], domain.upper()[axis]);
        0.5 * (lo + hi) + 0.5 * (hi - lo) * t
    };
    let mut pts = Vec::with_capacity((p + 1) * (p + 2) / 2 + 1);
    for j in 0..=p {
        let mu = (j as f64 * std::f64::consts::PI / pf).cos();
        let extra = usize::from(p % 2 == 1 && j % 2 == 1);
        for k in 1..=(p / 2 + 1 + extra) {
            let num = if j % 2 == 1 { 2 * k - 2 } else { 2 * k - 1 };
            let eta = (num as f64 * std::f64::consts::PI / (pf + 1.0)).cos();
            pts.push(DVector::from_vec(vec![map(0, mu), map(1, eta)]));
        }
    }
    finish_grid(pts, domain, include_origin)
}

/// `per_axis^n` lattice on `domain`, with the origin placed first when requested.
pub fn uniform_grid(per_axis: usize, domain: &AxisBox, include_origin: bool) -> Result<PointSet> {
    if per_axis < 2 {
        return Err(Error::Config("uniform grids need at least 2 points per axis".into()));
    }
    finish_grid(domain.lattice(per_axis), domain, include_origin)
}

/// Lattice approximation of `sup_{x in domain} min_i ||x - x_i||`.
pub fn fill_distance(points: &PointSet, domain: &AxisBox, resolution: usize) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::Data("fill distance of an empty set".into()));
    }
    let probes = domain.lattice(resolution.max(1));
    Ok(probes
        .par_iter()
        .map(|x| {
            points
                .iter()
                .map(|c| dist_sq(x.as_slice(), c))
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
        .sqrt())
}

/// Default fill-distance resolution for a given dimension.
pub fn default_fill_resolution(dim: usize) -> usize {
    if dim <= 2 {
        200
    } else {
        25
    }
}

/// Bracket on `max_{v in {-1,1}^d} v^T A^{-1} v` for `A = K_X + lambda I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadformBound {
    pub upper: f64,
    pub lower: f64,
    /// True when `lower` came from full enumeration.
    pub exact: bool,
}

pub const EXACT_ENUMERATION_LIMIT: usize = 16;

/// Bound the sign-vector quadratic form of the inverse kernel matrix.
///
/// `upper` is the entrywise absolute sum; `lower` is the best of `samples`
/// random sign vectors after greedy single-flip ascent, or the exact maximum
/// when `d <= 16`.
pub fn signvector_quadform_bound(
    k: &FactorizedKernelMatrix,
    samples: usize,
    seed: u64,
) -> QuadformBound {
    quadform_bound_dense(&k.inverse(), samples, seed)
}

pub fn quadform_bound_dense(a: &DMatrix<f64>, samples: usize, seed: u64) -> QuadformBound {
    let d = a.nrows();
    let upper: f64 = a.iter().map(|v| v.abs()).sum();
    if d <= EXACT_ENUMERATION_LIMIT {
        let mut best = f64::NEG_INFINITY;
        for mask in 0..(1usize << d) {
            let v = DVector::from_fn(d, |i, _| if mask >> i & 1 == 1 { -1.0 } else { 1.0 });
            best = best.max(v.dot(&(a * &v)));
        }
        return QuadformBound {
            upper,
            lower: best.min(upper),
            exact: true,
        };
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = f64::NEG_INFINITY;
    for _ in 0..samples.max(1) {
        let mut v = DVector::from_fn(d, |_, _| if rng.gen::<bool>() { 1.0 } else { -1.0 });
        let mut av = a * &v;
        let mut value = v.dot(&av);
        // Flipping v_i changes the form by 4 (A_ii - v_i (Av)_i).
        loop {
            let mut improved = false;
            for i in 0..d {
                let delta = 4.0 * (a[(i, i)] - v[i] * av[i]);
                if delta > 1e-14 * value.abs().max(1.0) {
                    let s = -2.0 * v[i];
                    v[i] = -v[i];
                    av.axpy(s, &a.column(i), 1.0);
                    value += delta;
                    improved = true;
                }
            }
            if !improved {
                break;
            }
        }
        best = best.max(v.dot(&av));
    }
    QuadformBound {
        upper,
        lower: best.min(upper),
        exact: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vdp_box() -> AxisBox {
        AxisBox::cube(2, -2.0, 2.0).unwrap()
    }

    #[test]
    fn wendland_values() {
        assert!((wendland_phi(2, 1, 0.0).unwrap() - 0.05).abs() < 1e-16);
        assert_eq!(wendland_phi(2, 1, 1.0).unwrap(), 0.0);
        assert_eq!(wendland_phi(3, 1, 1.7).unwrap(), 0.0);
        let expected = 0.5_f64.powi(5) * 3.5 / 30.0;
        assert!((wendland_phi(4, 1, 0.5).unwrap() - expected).abs() < 1e-16);
        assert!((wendland_phi(1, 1, 0.0).unwrap() - 1.0 / 12.0).abs() < 1e-16);
        assert!(matches!(wendland_phi(6, 1, 0.1), Err(Error::Capability(_))));
        assert!(matches!(wendland_phi(2, 2, 0.1), Err(Error::Capability(_))));
    }

    #[test]
    fn wendland_is_c2_at_support_boundary() {
        for n in 1..=5 {
            let h = 1e-4;
            let f = |r: f64| wendland_phi(n, 1, r).unwrap();
            let r = 1.0 - h;
            assert!(f(r) < 1e-11);
            assert!(wendland_dphi(n, 1, r).unwrap().abs() < 1e-7);
            let second = (f(r) - 2.0 * f(r - h) + f(r - 2.0 * h)) / (h * h);
            assert!(second.abs() < 1e-3, "n={n} second={second}");
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        for n in 1..=5 {
            for &r in &[0.1, 0.4, 0.77] {
                let h = 1e-6;
                let fd = (wendland_phi(n, 1, r + h).unwrap() - wendland_phi(n, 1, r - h).unwrap())
                    / (2.0 * h);
                assert!((fd - wendland_dphi(n, 1, r).unwrap()).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn kernel_eval_basics() {
        let spec = KernelSpec::new(2, 1, 1.5, 0.0).unwrap();
        let x = [0.3, -0.2];
        let y = [1.0, 0.4];
        assert_eq!(kernel_eval(&spec, &x, &x), spec.phi0());
        assert_eq!(kernel_eval(&spec, &x, &y), kernel_eval(&spec, &y, &x));
        assert_eq!(kernel_eval(&spec, &[0.0, 0.0], &[1.5, 0.0]), 0.0);
        let r = ((0.7f64).powi(2) + 0.6f64.powi(2)).sqrt() / 1.5;
        assert!((kernel_eval(&spec, &x, &y) - wendland_phi(2, 1, r).unwrap()).abs() < 1e-16);
        assert!(KernelSpec::new(2, 1, 0.0, 0.0).is_err());
        assert!(KernelSpec::new(2, 1, 1.0, -1.0).is_err());
    }

    #[test]
    fn gradient_matches_finite_difference() {
        let spec = KernelSpec::new(2, 1, 1.3, 0.0).unwrap();
        let y = [0.1, 0.2];
        let x = [0.5, -0.3];
        let mut g = [0.0; 2];
        spec.gradient(&x, &y, &mut g);
        for i in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[i] += 1e-6;
            xm[i] -= 1e-6;
            let fd = (spec.eval(&xp, &y) - spec.eval(&xm, &y)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-9);
        }
        spec.gradient(&y, &y, &mut g);
        assert_eq!(g, [0.0, 0.0]);
    }

    #[test]
    fn small_kernel_matrices() {
        let spec = KernelSpec::new(2, 1, 1.0, 0.25).unwrap();
        let one = PointSet::new(2, vec![0.0, 0.0]).unwrap();
        let k = kernel_matrix(&spec, &one).unwrap();
        assert_eq!(k.matrix()[(0, 0)], 0.05 + 0.25);
        let far = PointSet::new(2, vec![0.0, 0.0, 3.0, 0.0]).unwrap();
        let k = kernel_matrix(&spec, &far).unwrap();
        assert_eq!(k.matrix()[(0, 1)], 0.0);
        assert_eq!(k.matrix()[(1, 0)], 0.0);
        let dup = PointSet::new(2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        assert!(matches!(kernel_matrix(&spec, &dup), Err(Error::Data(_))));
    }

    #[test]
    fn padua_counts_and_membership() {
        let b = vdp_box();
        assert_eq!(padua_points(1, &b, false).unwrap().len(), 3);
        assert_eq!(padua_points(25, &b, true).unwrap().len(), 352);
        assert_eq!(padua_points(50, &b, true).unwrap().len(), 1327);
        let pts = padua_points(25, &b, true).unwrap();
        assert_eq!(pts.point(0), &[0.0, 0.0]);
        assert!(pts.iter().all(|p| b.contains(p)));
        assert!(matches!(
            padua_points(3, &AxisBox::cube(3, -1.0, 1.0).unwrap(), true),
            Err(Error::Capability(_))
        ));
    }

    #[test]
    fn padua_count_formula_all_orders() {
        let b = vdp_box();
        for p in 1..=60 {
            let pts = padua_points(p, &b, false).unwrap();
            assert_eq!(pts.len(), (p + 1) * (p + 2) / 2, "order {p}");
        }
    }

    #[test]
    fn uniform_grid_counts() {
        let tanks = AxisBox::new(
            vec![-0.45, -0.46, -0.4417, -0.4882],
            vec![0.71, 0.70, 0.6583, 0.6118],
        )
        .unwrap();
        assert_eq!(uniform_grid(5, &tanks, true).unwrap().len(), 626);
        assert_eq!(uniform_grid(6, &tanks, true).unwrap().len(), 1297);
        assert_eq!(uniform_grid(7, &tanks, true).unwrap().len(), 2402);
        let unit = AxisBox::new(vec![0.0], vec![1.0]).unwrap();
        let g = uniform_grid(2, &unit, false).unwrap();
        assert_eq!(g.as_flat(), &[0.0, 1.0]);
        // The origin already lies on this lattice; it is moved, not duplicated.
        let g = uniform_grid(3, &vdp_box(), true).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.point(0), &[0.0, 0.0]);
    }

    #[test]
    fn padua_352_factorizes_and_interpolates() {
        let b = vdp_box();
        let pts = padua_points(25, &b, true).unwrap();
        let spec = KernelSpec::default_for(&b, pts.len()).unwrap();
        assert_eq!(spec.lambda, 0.0);
        let k = kernel_matrix(&spec, &pts).unwrap();
        assert!(k.condition_estimate().is_finite() && k.condition_estimate() > 1.0);
        let m = k.matrix();
        assert!((0..m.nrows()).all(|i| (0..m.ncols()).all(|j| m[(i, j)] == m[(j, i)])));
        for i in [0, 17, 200, 351] {
            let e = k.solve_vec(&k.feature_vector(pts.point(i)));
            let mut target = DVector::zeros(pts.len());
            target[i] = 1.0;
            assert!((e - target).amax() < 1e-8, "node {i}");
        }
    }

    #[test]
    fn fill_distance_examples() {
        let b = AxisBox::cube(2, -1.0, 1.0).unwrap();
        let origin = PointSet::new(2, vec![0.0, 0.0]).unwrap();
        let h = fill_distance(&origin, &b, 101).unwrap();
        assert!((h - 2f64.sqrt()).abs() < 1e-12);
        let lattice = PointSet::from_points(&b.lattice(9)).unwrap();
        assert_eq!(fill_distance(&lattice, &b, 9).unwrap(), 0.0);
        let coarse = padua_points(14, &vdp_box(), true).unwrap();
        let fine = padua_points(25, &vdp_box(), true).unwrap();
        let hc = fill_distance(&coarse, &vdp_box(), 200).unwrap();
        let hf = fill_distance(&fine, &vdp_box(), 200).unwrap();
        assert!(hf < hc, "{hf} vs {hc}");
    }

    #[test]
    fn quadform_bracket_examples() {
        let spec = KernelSpec::new(2, 1, 1.0, 0.0).unwrap();
        let one = PointSet::new(2, vec![0.0, 0.0]).unwrap();
        let q = signvector_quadform_bound(&kernel_matrix(&spec, &one).unwrap(), 8, 1);
        assert!((q.upper - 20.0).abs() < 1e-12 && (q.lower - 20.0).abs() < 1e-12);
        let diag = DMatrix::from_diagonal(&DVector::from_fn(40, |i, _| 1.0 + i as f64));
        let q = quadform_bound_dense(&diag, 4, 3);
        assert!((q.upper - diag.trace()).abs() < 1e-12);
        assert!((q.lower - diag.trace()).abs() < 1e-12);
    }

    fn brute_force(a: &DMatrix<f64>) -> f64 {
        let d = a.nrows();
        (0..1usize << d)
            .map(|mask| {
                let v = DVector::from_fn(d, |i, _| if mask >> i & 1 == 1 { -1.0 } else { 1.0 });
                v.dot(&(a * &v))
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    proptest! {
        #[test]
        fn quadform_bracket_contains_brute_force(entries in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let m = DMatrix::from_row_slice(3, 3, &entries);
            let a = &m * m.transpose() + DMatrix::identity(3, 3) * 0.1;
            let truth = brute_force(&a);
            let q = quadform_bound_dense(&a, 4, 0);
            prop_assert!(q.lower <= truth + 1e-12 && truth <= q.upper + 1e-12);
            prop_assert!((q.lower - truth).abs() < 1e-12);
        }

        #[test]
        fn sampled_lower_bound_never_exceeds_upper(entries in proptest::collection::vec(-1.0f64..1.0, 400)) {
            let m = DMatrix::from_row_slice(20, 20, &entries);
            let a = &m * m.transpose();
            let q = quadform_bound_dense(&a, 8, 5);
            prop_assert!(q.lower <= q.upper);
            prop_assert!(!q.exact);
        }

        #[test]
        fn fill_distance_nonincreasing_under_insertion(extra in proptest::collection::vec(-1.0f64..1.0, 2)) {
            let b = AxisBox::cube(2, -1.0, 1.0).unwrap();
            let base = PointSet::new(2, vec![0.0, 0.0, 0.5, 0.5]).unwrap();
            let mut data = base.as_flat().to_vec();
            data.extend(extra);
            let grown = PointSet::new(2, data).unwrap();
            prop_assert!(fill_distance(&grown, &b, 41).unwrap() <= fill_distance(&base, &b, 41).unwrap());
        }

        #[test]
        fn kernel_is_symmetric_and_supported(a in proptest::collection::vec(-3.0f64..3.0, 4), b in proptest::collection::vec(-3.0f64..3.0, 4)) {
            let spec = KernelSpec::new(4, 1, 1.1, 0.0).unwrap();
            prop_assert_eq!(spec.eval(&a, &b), spec.eval(&b, &a));
            if dist_sq(&a, &b).sqrt() >= 1.1 {
                prop_assert_eq!(spec.eval(&a, &b), 0.0);
            }
        }
    }

    #[test]
    fn grid_csv_round_trip() {
        let pts = padua_points(4, &vdp_box(), true).unwrap();
        let mut buf = Vec::new();
        pts.write_csv(&mut buf).unwrap();
        let back = PointSet::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, pts);
    }

    #[test]
    fn grid_spec_serde() {
        let g = GridSpec {
            kind: GridKind::Padua { order: 3 },
            domain: vdp_box(),
            include_origin: true,
        };
        let text = serde_json::to_string(&g).unwrap();
        let back: GridSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.points().unwrap().len(), 11);
    }
}
