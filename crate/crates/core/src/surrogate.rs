//! Two-step kernel EDMD: local regressions per cluster, then kernel
//! interpolation of the propagated coordinate interpolants.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{Differentiable, Dynamics};
use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, FactorizedKernelMatrix, GridSpec, KernelSpec, PointSet};
use crate::sampling::{Cluster, ClusterDataset};

/// `H_i = [g0(x_i) | G(x_i)]` estimate with its Frobenius residual.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEstimate {
    pub h: DMatrix<f64>,
    pub residual: f64,
}

fn pseudo_inverse_checked(u: &DMatrix<f64>, needed_rank: usize) -> Result<DMatrix<f64>> {
    let svd = u.clone().svd(true, true);
    let smax = svd.singular_values.iter().fold(0.0_f64, |a, b| a.max(*b));
    let tol = u.nrows().max(u.ncols()) as f64 * f64::EPSILON * smax;
    let rank = svd.singular_values.iter().filter(|s| **s > tol).count();
    if rank < needed_rank {
        return Err(Error::Excitation(format!(
            "excitation matrix has rank {rank}, need {needed_rank}"
        )));
    }
    svd.pseudo_inverse(tol).map_err(|e| Error::Numerical(e.to_string()))
}

/// Least-squares fit `H_i = X+ U_i^+`.
pub fn local_regression(c: &Cluster) -> Result<LocalEstimate> {
    let u = c.excitation_matrix();
    let xp = c.successor_matrix();
    let h = &xp * pseudo_inverse_checked(&u, u.nrows())?;
    let residual = (&xp - &h * &u).norm();
    Ok(LocalEstimate { h, residual })
}

/// Reduced fit at the origin: drift fixed to zero, `G_1 = X+ [u]^+`.
pub fn local_regression_pi(origin: &Cluster) -> Result<LocalEstimate> {
    let n = origin.center.len();
    let m = origin.input_dim();
    let uc = origin.control_matrix();
    let xp = origin.successor_matrix();
    let g = &xp * pseudo_inverse_checked(&uc, m)?;
    let residual = (&xp - &g * &uc).norm();
    let mut h = DMatrix::zeros(n, m + 1);
    h.columns_mut(1, m).copy_from(&g);
    Ok(LocalEstimate { h, residual })
}

/// Diagnostics recorded while fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub condition_estimate: f64,
    pub lambda: f64,
    pub step1_residual_max: f64,
    pub step1_residual_mean: f64,
    /// `||f(0, 0)||` of the fitted model.
    pub origin_residual: f64,
}

/// Provenance of the training data.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelMetadata {
    pub source: String,
    pub r_x: f64,
    pub seed: u64,
    pub grid: Option<GridSpec>,
    /// `max_i sqrt(d_i) ||U_i^+||` of the training clusters.
    #[serde(default)]
    pub excitation_score: Option<f64>,
}

/// Control-affine kernel surrogate `x+ = k_X(x)^T (C_0 + sum_j u_j C_j)`.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    kernel: FactorizedKernelMatrix,
    coeff: Vec<DMatrix<f64>>,
    pi: bool,
    metadata: ModelMetadata,
    report: FitReport,
    // Per center: (m+1) blocks of n coefficients, contiguous.
    packed: Vec<f64>,
}

impl SurrogateModel {
    fn assemble(
        kernel: FactorizedKernelMatrix,
        coeff: Vec<DMatrix<f64>>,
        pi: bool,
        metadata: ModelMetadata,
        mut report: FitReport,
    ) -> Self {
        let d = kernel.len();
        let n = kernel.spec().dim;
        let blocks = coeff.len();
        let mut packed = vec![0.0; d * blocks * n];
        for i in 0..d {
            for (j, c) in coeff.iter().enumerate() {
                for l in 0..n {
                    packed[(i * blocks + j) * n + l] = c[(i, l)];
                }
            }
        }
        let mut model = Self {
            kernel,
            coeff,
            pi,
            metadata,
            report: report.clone(),
            packed,
        };
        let zero_x = DVector::zeros(n);
        let zero_u = DVector::zeros(blocks - 1);
        report.origin_residual = model.eval(&zero_x, &zero_u).norm();
        model.report = report;
        model
    }

    pub fn kernel(&self) -> &FactorizedKernelMatrix {
        &self.kernel
    }

    pub fn spec(&self) -> &KernelSpec {
        self.kernel.spec()
    }

    pub fn coefficients(&self) -> &[DMatrix<f64>] {
        &self.coeff
    }

    pub fn is_pi(&self) -> bool {
        self.pi
    }

    pub fn metadata(&self) -> &ModelMetadata {
        &self.metadata
    }

    pub fn report(&self) -> &FitReport {
        &self.report
    }

    pub fn num_centers(&self) -> usize {
        self.kernel.len()
    }

    /// Same model with every coefficient set to zero.
    pub fn zeroed(&self) -> Self {
        let coeff = self.coeff.iter().map(|c| DMatrix::zeros(c.nrows(), c.ncols())).collect();
        Self::assemble(
            self.kernel.clone(),
            coeff,
            self.pi,
            self.metadata.clone(),
            self.report.clone(),
        )
    }

    /// Accumulate `sum_i w_i(x) * block_i` where `w_i` are kernel values.
    fn eval_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let spec = self.kernel.spec();
        let n = spec.dim;
        let blocks = self.coeff.len();
        let s2 = spec.scale * spec.scale;
        out.iter_mut().for_each(|o| *o = 0.0);
        let centers = self.kernel.centers().as_flat();
        for (i, c) in centers.chunks_exact(n).enumerate() {
            let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 >= s2 {
                continue;
            }
            let k = spec.phi((d2 / s2).sqrt());
            let base = &self.packed[i * blocks * n..(i + 1) * blocks * n];
            for l in 0..n {
                let mut w = base[l];
                for (j, uj) in u.iter().enumerate() {
                    w += uj * base[(j + 1) * n + l];
                }
                out[l] += k * w;
            }
        }
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.kernel.spec().dim);
        self.eval_into(x.as_slice(), u.as_slice(), out.as_mut_slice());
        out
    }

    /// Value together with `J_x` and `J_u = G(x)`.
    pub fn eval_with_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>) {
        let spec = *self.kernel.spec();
        let n = spec.dim;
        let m = self.coeff.len() - 1;
        let blocks = m + 1;
        let s2 = spec.scale * spec.scale;
        let mut fx = DVector::zeros(n);
        let mut jx = DMatrix::zeros(n, n);
        let mut ju = DMatrix::zeros(n, m);
        let mut w = vec![0.0; n];
        let mut grad = vec![0.0; n];
        let centers = self.kernel.centers().as_flat();
        for (i, c) in centers.chunks_exact(n).enumerate() {
            let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 >= s2 {
                continue;
            }
            let r = (d2 / s2).sqrt();
            let k = spec.phi(r);
            spec.gradient(x.as_slice(), c, &mut grad);
            let base = &self.packed[i * blocks * n..(i + 1) * blocks * n];
            for l in 0..n {
                let mut acc = base[l];
                for j in 0..m {
                    acc += u[j] * base[(j + 1) * n + l];
                    ju[(l, j)] += k * base[(j + 1) * n + l];
                }
                w[l] = acc;
                fx[l] += k * acc;
            }
            for l in 0..n {
                for q in 0..n {
                    jx[(l, q)] += w[l] * grad[q];
                }
            }
        }
        (fx, jx, ju)
    }
}

impl Dynamics for SurrogateModel {
    fn state_dim(&self) -> usize {
        self.kernel.spec().dim
    }

    fn input_dim(&self) -> usize {
        self.coeff.len() - 1
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        check_dims(self, x, u)?;
        Ok(self.eval(x, u))
    }
}

impl Differentiable for SurrogateModel {
    fn step_with_jacobians(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, DMatrix<f64>)> {
        check_dims(self, x, u)?;
        Ok(self.eval_with_jacobians(x, u))
    }
}

fn check_dims(model: &SurrogateModel, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != model.state_dim() || u.len() != model.input_dim() {
        return Err(Error::Usage(format!(
            "model expects ({}, {}) arguments, got ({}, {})",
            model.state_dim(),
            model.input_dim(),
            x.len(),
            u.len()
        )));
    }
    Ok(())
}

/// `f(x, u)` of the surrogate.
pub fn eval_surrogate(model: &SurrogateModel, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    model.eval(x, u)
}

/// `(J_x, J_u)` of the surrogate at `(x, u)`.
pub fn surrogate_jacobians(
    model: &SurrogateModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let (_, jx, ju) = model.eval_with_jacobians(x, u);
    (jx, ju)
}

fn bit_key(p: &[f64]) -> Vec<u64> {
    // Normalize -0.0 so it matches a center stored as 0.0.
    p.iter().map(|v| (v + 0.0).to_bits()).collect()
}

/// Values `s_l(y_i)` of the coordinate interpolants at the image points `y_i`.
///
/// Where an image point is a center, the interpolation identity gives the
/// node coordinates exactly and is used instead of the rounded kernel sum.
fn propagate_interpolants(
    k: &FactorizedKernelMatrix,
    alpha: &DMatrix<f64>,
    images: &[DVector<f64>],
    node_index: &HashMap<Vec<u64>, usize>,
) -> DMatrix<f64> {
    let d = k.len();
    let n = k.spec().dim;
    let rows: Vec<Vec<f64>> = images
        .par_iter()
        .map(|y| {
            if let Some(&node) = node_index.get(&bit_key(y.as_slice())) {
                return k.centers().point(node).to_vec();
            }
            let mut feat = vec![0.0; d];
            k.feature_into(y.as_slice(), &mut feat);
            (0..n)
                .map(|l| feat.iter().zip(alpha.column(l).iter()).map(|(a, b)| a * b).sum())
                .collect()
        })
        .collect();
    DMatrix::from_fn(images.len(), n, |i, l| rows[i][l])
}

/// Fit the control-affine surrogate from clustered data.
///
/// With `pi` set, the origin cluster uses the reduced regression so the
/// estimated drift there is exactly zero.
pub fn fit_surrogate(ds: &ClusterDataset, kernel: &KernelSpec, pi: bool) -> Result<SurrogateModel> {
    let n = ds.state_dim();
    let m = ds.input_dim();
    if ds.clusters.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    if pi && ds.clusters[0].center.iter().any(|v| *v != 0.0) {
        return Err(Error::Data(
            "the physics-informed fit needs the origin as first center".into(),
        ));
    }
    let estimates = ds
        .clusters
        .par_iter()
        .enumerate()
        .map(|(i, c)| {
            if pi && i == 0 {
                local_regression_pi(c)
            } else {
                local_regression(c)
            }
            .map_err(|e| match e {
                Error::Excitation(msg) => Error::Excitation(format!("cluster {i}: {msg}")),
                other => other,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let centers = ds.centers()?;
    let factor = kernel_matrix(kernel, &centers)?;
    let coords = DMatrix::from_fn(centers.len(), n, |i, l| centers.point(i)[l]);
    let alpha = factor.solve(&coords);
    let node_index: HashMap<Vec<u64>, usize> = centers
        .iter()
        .enumerate()
        .map(|(i, p)| (bit_key(p), i))
        .collect();
    let coeff = (0..=m)
        .into_par_iter()
        .map(|j| {
            let images: Vec<DVector<f64>> =
                estimates.iter().map(|e| e.h.column(j).into_owned()).collect();
            let v = propagate_interpolants(&factor, &alpha, &images, &node_index);
            factor.solve(&v)
        })
        .collect::<Vec<_>>();
    if coeff.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
        return Err(Error::Numerical("non-finite interpolation coefficients".into()));
    }
    let residuals: Vec<f64> = estimates.iter().map(|e| e.residual).collect();
    let report = FitReport {
        condition_estimate: factor.condition_estimate(),
        lambda: kernel.lambda,
        step1_residual_max: residuals.iter().copied().fold(0.0, f64::max),
        step1_residual_mean: residuals.iter().sum::<f64>() / residuals.len() as f64,
        origin_residual: f64::NAN,
    };
    let metadata = ModelMetadata {
        source: ds.source.clone(),
        r_x: ds.r_x,
        seed: ds.seed,
        grid: ds.grid.clone(),
        excitation_score: Some(ds.excitation_score(pi)),
    };
    Ok(SurrogateModel::assemble(factor, coeff, pi, metadata, report))
}

/// Autonomous kernel interpolant of the flow map from node values.
pub fn fit_flow_regression(
    centers: &PointSet,
    images: &[DVector<f64>],
    kernel: &KernelSpec,
) -> Result<SurrogateModel> {
    if images.len() != centers.len() {
        return Err(Error::Data(format!(
            "{} centers but {} images",
            centers.len(),
            images.len()
        )));
    }
    let n = centers.dim();
    if images.iter().any(|y| y.len() != n) {
        return Err(Error::Data("image dimension differs from center dimension".into()));
    }
    let factor = kernel_matrix(kernel, centers)?;
    let f = DMatrix::from_fn(centers.len(), n, |i, l| images[i][l]);
    let coeff = factor.solve(&f);
    let report = FitReport {
        condition_estimate: factor.condition_estimate(),
        lambda: kernel.lambda,
        step1_residual_max: 0.0,
        step1_residual_mean: 0.0,
        origin_residual: f64::NAN,
    };
    Ok(SurrogateModel::assemble(
        factor,
        vec![coeff],
        false,
        ModelMetadata::default(),
        report,
    ))
}

pub const MODEL_FORMAT: &str = "kedmd-model v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelHeader {
    format: String,
    kernel: KernelSpec,
    pi: bool,
    state_dim: usize,
    input_dim: usize,
    centers: usize,
    metadata: ModelMetadata,
    fit: FitReport,
    blob_bytes: usize,
    blob_sha256: String,
}

impl SurrogateModel {
    fn blob(&self) -> Vec<u8> {
        let mut out = Vec::new();
        let centers = self.kernel.centers();
        let (d, n) = (centers.len(), centers.dim());
        // Column-major: coordinate by coordinate.
        for l in 0..n {
            for i in 0..d {
                out.extend_from_slice(&centers.point(i)[l].to_le_bytes());
            }
        }
        for c in &self.coeff {
            for v in c.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Header line (JSON) followed by the little-endian coefficient blob.
    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        let blob = self.blob();
        let header = ModelHeader {
            format: MODEL_FORMAT.into(),
            kernel: *self.kernel.spec(),
            pi: self.pi,
            state_dim: self.state_dim(),
            input_dim: self.input_dim(),
            centers: self.num_centers(),
            metadata: self.metadata.clone(),
            fit: self.report.clone(),
            blob_bytes: blob.len(),
            blob_sha256: hex::encode(Sha256::digest(&blob)),
        };
        serde_json::to_writer(&mut writer, &header)?;
        writer.write_all(b"\n")?;
        writer.write_all(&blob)?;
        Ok(())
    }

    /// Read a model written by [`SurrogateModel::write`]; the kernel matrix is refactorized.
    pub fn read<R: BufRead>(mut reader: R) -> Result<Self> {
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let header: ModelHeader = serde_json::from_str(line.trim_end())?;
        if header.format != MODEL_FORMAT {
            return Err(Error::Format(format!("unknown model format {:?}", header.format)));
        }
        let (d, n, m) = (header.centers, header.state_dim, header.input_dim);
        let expected = 8 * d * n * (m + 2);
        if header.blob_bytes != expected || header.kernel.dim != n {
            return Err(Error::Format("model header dimensions are inconsistent".into()));
        }
        let mut blob = Vec::with_capacity(expected);
        reader.read_to_end(&mut blob)?;
        if blob.len() != expected {
            return Err(Error::Format(format!(
                "model blob has {} bytes, header declares {expected}",
                blob.len()
            )));
        }
        if hex::encode(Sha256::digest(&blob)) != header.blob_sha256 {
            return Err(Error::Format("model blob hash mismatch".into()));
        }
        let vals: Vec<f64> = blob
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let cm = DMatrix::from_column_slice(d, n, &vals[..d * n]);
        let centers = PointSet::new(n, (0..d).flat_map(|i| cm.row(i).iter().copied().collect::<Vec<_>>()).collect())?;
        let coeff = (0..=m)
            .map(|j| {
                let off = d * n * (j + 1);
                DMatrix::from_column_slice(d, n, &vals[off..off + d * n])
            })
            .collect();
        let factor = kernel_matrix(&header.kernel, &centers)?;
        let mut model = Self::assemble(factor, coeff, header.pi, header.metadata, header.fit.clone());
        // Keep the recorded fit diagnostics byte-for-byte.
        model.report = header.fit;
        Ok(model)
    }
}
