//! Clustered training data around virtual observation points.

use std::collections::HashMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Dynamics;
use crate::error::{Error, Result};
use crate::geometry::AxisBox;
use crate::kernel::{GridSpec, PointSet};
use crate::systems::ControlAffineSystem;

/// Relative singular-value floor for the excitation matrices.
pub const SIGMA_FLOOR_RATIO: f64 = 1e-3;
/// Control redraws before giving up on a cluster.
pub const MAX_CONTROL_REDRAWS: usize = 100;
const MAX_STATE_REJECTIONS: usize = 100_000;

/// One triplet `(x, u, x+)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_plus: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub center: DVector<f64>,
    pub samples: Vec<Sample>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.u.len())
    }

    /// `(m+1) x d_i` matrix with a leading row of ones over the controls.
    pub fn excitation_matrix(&self) -> DMatrix<f64> {
        let m = self.input_dim();
        DMatrix::from_fn(m + 1, self.len(), |r, c| {
            if r == 0 {
                1.0
            } else {
                self.samples[c].u[r - 1]
            }
        })
    }

    /// `m x d_i` matrix of controls alone.
    pub fn control_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.input_dim(), self.len(), |r, c| self.samples[c].u[r])
    }

    /// `n x d_i` matrix of successors.
    pub fn successor_matrix(&self) -> DMatrix<f64> {
        let n = self.center.len();
        DMatrix::from_fn(n, self.len(), |r, c| self.samples[c].x_plus[r])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExcitationDiagnostics {
    pub rank: usize,
    pub sigma_min: f64,
    pub pinv_norm: f64,
    pub excitation_score: f64,
}

fn singular_summary(m: &DMatrix<f64>, needed: usize) -> (usize, f64) {
    if m.is_empty() {
        return (0, 0.0);
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().fold(0.0_f64, |a, b| a.max(*b));
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    let rank = sv.iter().filter(|s| **s > tol).count();
    let mut sorted: Vec<f64> = sv.iter().copied().collect();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let sigma = if needed == 0 || needed > sorted.len() {
        0.0
    } else {
        sorted[needed - 1]
    };
    (rank, sigma)
}

/// Rank and pseudoinverse norm of the excitation matrix `U_i`.
pub fn excitation_diagnostics(c: &Cluster) -> ExcitationDiagnostics {
    let m = c.input_dim();
    let (rank, sigma_min) = singular_summary(&c.excitation_matrix(), m + 1);
    let pinv_norm = if rank == m + 1 && sigma_min > 0.0 {
        1.0 / sigma_min
    } else {
        f64::INFINITY
    };
    ExcitationDiagnostics {
        rank,
        sigma_min,
        pinv_norm,
        excitation_score: (c.len() as f64).sqrt() * pinv_norm,
    }
}

/// Diagnostics of the reduced control matrix used at the origin cluster.
pub fn reduced_excitation_diagnostics(c: &Cluster) -> ExcitationDiagnostics {
    let m = c.input_dim();
    let (rank, sigma_min) = singular_summary(&c.control_matrix(), m);
    let pinv_norm = if rank == m && sigma_min > 0.0 {
        1.0 / sigma_min
    } else {
        f64::INFINITY
    };
    ExcitationDiagnostics {
        rank,
        sigma_min,
        pinv_norm,
        excitation_score: (c.len() as f64).sqrt() * pinv_norm,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterDataset {
    pub clusters: Vec<Cluster>,
    pub r_x: f64,
    pub seed: u64,
    pub source: String,
    pub grid: Option<GridSpec>,
}

impl ClusterDataset {
    pub fn state_dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.center.len())
    }

    pub fn input_dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.input_dim())
    }

    /// Total triplet count.
    pub fn total_samples(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn centers(&self) -> Result<PointSet> {
        let pts: Vec<DVector<f64>> = self.clusters.iter().map(|c| c.center.clone()).collect();
        PointSet::from_points(&pts)
    }

    /// `max_i sqrt(d_i) ||U_i^+||`, using the reduced matrix at the origin when `pi` is set.
    pub fn excitation_score(&self, pi: bool) -> f64 {
        self.clusters
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if pi && i == 0 {
                    reduced_excitation_diagnostics(c).excitation_score
                } else {
                    excitation_diagnostics(c).excitation_score
                }
            })
            .fold(0.0, f64::max)
    }
}

fn uniform_in_box(rng: &mut ChaCha8Rng, b: &AxisBox) -> DVector<f64> {
    DVector::from_iterator(
        b.dim(),
        (0..b.dim()).map(|i| {
            if b.width(i) > 0.0 {
                rng.gen_range(b.lower()[i]..=b.upper()[i])
            } else {
                b.lower()[i]
            }
        }),
    )
}

fn sample_state(
    rng: &mut ChaCha8Rng,
    center: &DVector<f64>,
    r_x: f64,
    omega: &AxisBox,
) -> DVector<f64> {
    if r_x == 0.0 {
        return center.clone();
    }
    let n = center.len();
    let lower: Vec<f64> = (0..n).map(|i| (center[i] - r_x).max(omega.lower()[i])).collect();
    let upper: Vec<f64> = (0..n).map(|i| (center[i] + r_x).min(omega.upper()[i])).collect();
    let local = AxisBox::new(lower, upper).expect("center lies in the domain");
    for _ in 0..MAX_STATE_REJECTIONS {
        let x = uniform_in_box(rng, &local);
        if (&x - center).norm() <= r_x {
            return x;
        }
    }
    center.clone()
}

fn distinct(us: &[DVector<f64>]) -> bool {
    (0..us.len()).all(|i| ((i + 1)..us.len()).all(|j| us[i] != us[j]))
}

fn draw_controls(
    rng: &mut ChaCha8Rng,
    input_box: &AxisBox,
    count: usize,
    origin: bool,
) -> Result<Vec<DVector<f64>>> {
    let m = input_box.dim();
    let floor = SIGMA_FLOOR_RATIO * input_box.diameter();
    for _ in 0..MAX_CONTROL_REDRAWS {
        let us: Vec<DVector<f64>> = (0..count).map(|_| uniform_in_box(rng, input_box)).collect();
        if !distinct(&us) || (origin && us.iter().any(|u| u.iter().all(|v| *v == 0.0))) {
            continue;
        }
        let (mat, needed) = if origin {
            (DMatrix::from_fn(m, count, |r, c| us[c][r]), m)
        } else {
            (
                DMatrix::from_fn(m + 1, count, |r, c| if r == 0 { 1.0 } else { us[c][r - 1] }),
                m + 1,
            )
        };
        let (rank, sigma) = singular_summary(&mat, needed);
        if rank == needed && sigma >= floor {
            return Ok(us);
        }
    }
    Err(Error::Excitation(format!(
        "no control set with singular values above {floor:.3e} after {MAX_CONTROL_REDRAWS} draws"
    )))
}

/// Draw `d_i` triplets around every center.
///
/// The first center must be the origin. Each cluster uses its own ChaCha
/// stream keyed by `(seed, cluster index)`, so the result does not depend on
/// thread scheduling.
pub fn generate_dataset(
    sys: &ControlAffineSystem,
    centers: &PointSet,
    r_x: f64,
    d_i: usize,
    seed: u64,
) -> Result<ClusterDataset> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    if centers.dim() != n {
        return Err(Error::Data(format!(
            "centers are {}-dimensional, system state is {n}-dimensional",
            centers.dim()
        )));
    }
    if centers.is_empty() || centers.point(0).iter().any(|v| *v != 0.0) {
        return Err(Error::Data("the first center must be the origin".into()));
    }
    if !(r_x.is_finite() && r_x >= 0.0) {
        return Err(Error::Config(format!("cluster radius must be nonnegative, got {r_x}")));
    }
    if d_i < m + 1 {
        return Err(Error::Config(format!(
            "need at least {} samples per cluster, got {d_i}",
            m + 1
        )));
    }
    let omega = sys.domain();
    if let Some(i) = (0..centers.len()).find(|&i| !omega.contains(centers.point(i))) {
        return Err(Error::Data(format!("center {i} lies outside the domain")));
    }
    let clusters = (0..centers.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let center = DVector::from_column_slice(centers.point(i));
            let xs: Vec<DVector<f64>> = (0..d_i)
                .map(|_| sample_state(&mut rng, &center, r_x, omega))
                .collect();
            let us = draw_controls(&mut rng, sys.input_box(), d_i, i == 0)
                .map_err(|e| Error::Excitation(format!("cluster {i}: {e}")))?;
            let samples = xs
                .into_iter()
                .zip(us)
                .map(|(x, u)| {
                    let x_plus = sys.step_truth(&x, &u)?;
                    Ok(Sample { x, u, x_plus })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Cluster { center, samples })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClusterDataset {
        clusters,
        r_x,
        seed,
        source: sys.name().to_string(),
        grid: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClauseResult {
    pub clause: String,
    pub passed: bool,
    /// `(cluster, sample)` pairs; `sample` is absent for cluster-level clauses.
    pub offenders: Vec<(usize, Option<usize>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub clauses: Vec<ClauseResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.clauses.iter().all(|c| c.passed)
    }

    pub fn clause(&self, name: &str) -> Option<&ClauseResult> {
        self.clauses.iter().find(|c| c.clause == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ClauseResult> {
        self.clauses.iter().filter(|c| !c.passed)
    }
}

fn clause(name: &str, offenders: Vec<(usize, Option<usize>)>) -> ClauseResult {
    ClauseResult {
        clause: name.to_string(),
        passed: offenders.is_empty(),
        offenders,
    }
}

/// Check every data requirement and report offending indices per clause.
pub fn validate_dataset(ds: &ClusterDataset, omega: &AxisBox, input_box: &AxisBox) -> ValidationReport {
    let m = input_box.dim();
    let mut origin = Vec::new();
    if ds
        .clusters
        .first()
        .is_none_or(|c| c.center.iter().any(|v| *v != 0.0))
    {
        origin.push((0, None));
    }
    let mut radius = Vec::new();
    let mut domain = Vec::new();
    let mut inputs = Vec::new();
    let mut dims = Vec::new();
    let mut rank = Vec::new();
    let mut dup = Vec::new();
    let mut count = Vec::new();
    let mut nonzero = Vec::new();
    for (i, c) in ds.clusters.iter().enumerate() {
        let at_origin = i == 0 && origin.is_empty();
        if !omega.contains(c.center.as_slice()) {
            domain.push((i, None));
        }
        for (j, s) in c.samples.iter().enumerate() {
            if s.x.len() != omega.dim() || s.u.len() != m || s.x_plus.len() != omega.dim() {
                dims.push((i, Some(j)));
                continue;
            }
            if (&s.x - &c.center).norm() > ds.r_x {
                radius.push((i, Some(j)));
            }
            if !omega.contains(s.x.as_slice()) {
                domain.push((i, Some(j)));
            }
            if !input_box.contains(s.u.as_slice()) {
                inputs.push((i, Some(j)));
            }
            if at_origin && s.u.iter().all(|v| *v == 0.0) {
                nonzero.push((i, Some(j)));
            }
            if c.samples[..j].iter().any(|t| t.u == s.u) {
                dup.push((i, Some(j)));
            }
        }
        let needed = if at_origin { m } else { m + 1 };
        if c.len() < needed {
            count.push((i, None));
        }
        if !dims.iter().any(|(k, _)| *k == i) {
            let diag = if at_origin {
                reduced_excitation_diagnostics(c)
            } else {
                excitation_diagnostics(c)
            };
            if diag.rank != needed {
                rank.push((i, None));
            }
        }
    }
    ValidationReport {
        clauses: vec![
            clause("origin_first", origin),
            clause("dimensions", dims),
            clause("within_radius", radius),
            clause("within_domain", domain),
            clause("inputs_in_box", inputs),
            clause("sample_count", count),
            clause("full_rank", rank),
            clause("distinct_inputs", dup),
            clause("origin_inputs_nonzero", nonzero),
        ],
    }
}

/// Sidecar metadata written next to the dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSidecar {
    pub format: String,
    pub source: String,
    pub seed: u64,
    pub r_x: f64,
    pub state_dim: usize,
    pub input_dim: usize,
    pub samples_per_cluster: Vec<usize>,
    pub grid: Option<GridSpec>,
    pub centers: Vec<Vec<f64>>,
}

pub const DATASET_FORMAT: &str = "kedmd-dataset v1";

fn fmt(v: f64) -> String {
    format!("{v:e}")
}

fn parse(field: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|e| Error::Format(format!("bad number {field:?}: {e}")))
}

impl ClusterDataset {
    pub fn sidecar(&self) -> DatasetSidecar {
        DatasetSidecar {
            format: DATASET_FORMAT.into(),
            source: self.source.clone(),
            seed: self.seed,
            r_x: self.r_x,
            state_dim: self.state_dim(),
            input_dim: self.input_dim(),
            samples_per_cluster: self.clusters.iter().map(Cluster::len).collect(),
            grid: self.grid.clone(),
            centers: self
                .clusters
                .iter()
                .map(|c| c.center.as_slice().to_vec())
                .collect(),
        }
    }

    /// Write the triplets as CSV (`cluster_id, x.., u.., x_plus..`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let (n, m) = (self.state_dim(), self.input_dim());
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["cluster_id".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=m).map(|i| format!("u{i}")));
        header.extend((1..=n).map(|i| format!("x_plus{i}")));
        w.write_record(&header)?;
        for (i, c) in self.clusters.iter().enumerate() {
            for s in &c.samples {
                let mut row = vec![i.to_string()];
                row.extend(s.x.iter().chain(s.u.iter()).chain(s.x_plus.iter()).map(|v| fmt(*v)));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_sidecar<W: Write>(&self, mut writer: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut writer, &self.sidecar())?;
        writeln!(writer)?;
        Ok(())
    }

    /// Rebuild a dataset from its CSV and sidecar.
    pub fn read<R1: Read, R2: Read>(csv_reader: R1, sidecar_reader: R2) -> Result<Self> {
        let side: DatasetSidecar = serde_json::from_reader(sidecar_reader)?;
        if side.format != DATASET_FORMAT {
            return Err(Error::Format(format!("unknown dataset format {:?}", side.format)));
        }
        let (n, m) = (side.state_dim, side.input_dim);
        let mut clusters: Vec<Cluster> = side
            .centers
            .iter()
            .map(|c| {
                if c.len() != n {
                    return Err(Error::Format("center dimension mismatch in sidecar".into()));
                }
                Ok(Cluster {
                    center: DVector::from_column_slice(c),
                    samples: Vec::new(),
                })
            })
            .collect::<Result<_>>()?;
        let mut r = csv::Reader::from_reader(csv_reader);
        if r.headers()?.len() != 1 + 2 * n + m {
            return Err(Error::Format("dataset CSV has the wrong number of columns".into()));
        }
        for rec in r.records() {
            let rec = rec?;
            let id: usize = rec[0]
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("bad cluster id {:?}: {e}", &rec[0])))?;
            let vals = rec.iter().skip(1).map(parse).collect::<Result<Vec<f64>>>()?;
            let cluster = clusters
                .get_mut(id)
                .ok_or_else(|| Error::Format(format!("cluster id {id} not in sidecar")))?;
            cluster.samples.push(Sample {
                x: DVector::from_column_slice(&vals[..n]),
                u: DVector::from_column_slice(&vals[n..n + m]),
                x_plus: DVector::from_column_slice(&vals[n + m..]),
            });
        }
        let counts: HashMap<usize, usize> =
            clusters.iter().enumerate().map(|(i, c)| (i, c.len())).collect();
        for (i, expected) in side.samples_per_cluster.iter().enumerate() {
            if counts.get(&i) != Some(expected) {
                return Err(Error::Format(format!(
                    "cluster {i} has {:?} rows, sidecar declares {expected}",
                    counts.get(&i)
                )));
            }
        }
        Ok(ClusterDataset {
            clusters,
            r_x: side.r_x,
            seed: side.seed,
            source: side.source,
            grid: side.grid,
        })
    }
}
