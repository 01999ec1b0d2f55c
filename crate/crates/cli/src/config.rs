use std::fs;
use std::path::{Path, PathBuf};

use kedmd::kernel::{GridKind, GridSpec, PointSet};
use kedmd::{make_four_tank_shifted, make_van_der_pol, AxisBox, ControlAffineSystem, Dynamics, TankParams};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SystemName {
    Vdp,
    Tanks,
}

impl SystemName {
    pub fn label(self) -> &'static str {
        match self {
            SystemName::Vdp => "vdp",
            SystemName::Tanks => "tanks",
        }
    }

    pub fn default_grid(self) -> &'static str {
        match self {
            SystemName::Vdp => "padua:25",
            SystemName::Tanks => "uniform:5",
        }
    }

    /// Cluster radius used when `--rx auto` is given.
    pub fn auto_radius(self, centers: usize) -> f64 {
        match self {
            SystemName::Vdp => 2f64.sqrt() / centers as f64,
            SystemName::Tanks => 2.0 / centers as f64,
        }
    }

    /// Initial state in the system's original coordinates.
    pub fn default_x0(self) -> Vec<f64> {
        match self {
            SystemName::Vdp => vec![0.5, 0.5],
            SystemName::Tanks => vec![1.0; 4],
        }
    }
}

/// The benchmark system in shifted coordinates (equilibrium at the origin).
pub fn build_system(name: SystemName, tank_params: Option<&Path>) -> CliResult<ControlAffineSystem> {
    Ok(match name {
        SystemName::Vdp => make_van_der_pol(),
        SystemName::Tanks => {
            let params = match tank_params {
                Some(p) => TankParams::from_json(&fs::read_to_string(p)?)?,
                None => TankParams::benchmark(),
            };
            make_four_tank_shifted(params)?
        }
    })
}

/// `padua:<order>`, `uniform:<per-axis>` or `file:<csv>`.
pub fn parse_grid(s: &str, domain: &AxisBox) -> CliResult<GridSpec> {
    let (kind, arg) = s
        .split_once(':')
        .ok_or_else(|| CliError::Validation(format!("grid {s:?} is not of the form kind:value")))?;
    let num = |a: &str| {
        a.parse::<usize>()
            .map_err(|e| CliError::Validation(format!("grid parameter {a:?}: {e}")))
    };
    Ok(match kind {
        "padua" => GridSpec { kind: GridKind::Padua { order: num(arg)? }, domain: domain.clone(), include_origin: true },
        "uniform" => GridSpec { kind: GridKind::Uniform { per_axis: num(arg)? }, domain: domain.clone(), include_origin: true },
        "file" => {
            let set = PointSet::read_csv(fs::File::open(arg)?)?;
            let points = set.iter().map(|p| p.to_vec()).collect();
            GridSpec { kind: GridKind::Explicit { points }, domain: domain.clone(), include_origin: false }
        }
        other => return Err(CliError::Validation(format!("unknown grid kind {other:?}"))),
    })
}

/// `auto` or a nonnegative number.
pub fn parse_radius(s: &str, system: SystemName, centers: usize) -> CliResult<f64> {
    if s == "auto" {
        return Ok(system.auto_radius(centers));
    }
    let v: f64 = s
        .parse()
        .map_err(|e| CliError::Validation(format!("cluster radius {s:?}: {e}")))?;
    if !(v.is_finite() && v >= 0.0) {
        return Err(CliError::Validation(format!("cluster radius must be nonnegative, got {v}")));
    }
    Ok(v)
}

pub fn parse_list(s: &str) -> CliResult<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| CliError::Validation(format!("number {t:?}: {e}")))
        })
        .collect()
}

/// Diagonal weight from a comma list; a single value is repeated.
pub fn diag_weight(spec: Option<&str>, dim: usize, default: f64) -> CliResult<DMatrix<f64>> {
    let values = match spec {
        None => vec![default; dim],
        Some(s) => {
            let v = parse_list(s)?;
            match v.len() {
                1 => vec![v[0]; dim],
                n if n == dim => v,
                n => return Err(CliError::Validation(format!("weight has {n} entries, expected {dim}"))),
            }
        }
    };
    Ok(DMatrix::from_diagonal(&DVector::from_vec(values)))
}

/// Initial state given in original coordinates, shifted to the model's.
pub fn shifted_x0(sys: &ControlAffineSystem, system: SystemName, x0: Option<&str>) -> CliResult<DVector<f64>> {
    let raw = match x0 {
        Some(s) => parse_list(s)?,
        None => system.default_x0(),
    };
    if raw.len() != sys.state_dim() {
        return Err(CliError::Validation(format!(
            "initial state has {} entries, system has {}",
            raw.len(),
            sys.state_dim()
        )));
    }
    Ok(DVector::from_iterator(
        raw.len(),
        raw.iter().zip(sys.state_offset()).map(|(a, b)| a - b),
    ))
}

/// Options read from an optional JSON file; command-line values win.
pub fn load_config<T: DeserializeOwned + Default>(path: Option<&PathBuf>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("config {}: {e}", p.display())))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_and_radii() {
        let sys = make_van_der_pol();
        let g = parse_grid("padua:25", sys.domain()).unwrap();
        assert_eq!(g.points().unwrap().len(), 352);
        assert!(parse_grid("hex:3", sys.domain()).is_err());
        assert!(parse_grid("padua", sys.domain()).is_err());
        assert_eq!(parse_radius("auto", SystemName::Vdp, 352).unwrap(), 2f64.sqrt() / 352.0);
        assert_eq!(parse_radius("auto", SystemName::Tanks, 626).unwrap(), 2.0 / 626.0);
        assert!(parse_radius("-1", SystemName::Vdp, 3).is_err());
    }

    #[test]
    fn weights_and_states() {
        let w = diag_weight(Some("2"), 3, 1.0).unwrap();
        assert_eq!(w, DMatrix::identity(3, 3) * 2.0);
        assert!(diag_weight(Some("1,2"), 3, 1.0).is_err());
        let tanks = build_system(SystemName::Tanks, None).unwrap();
        let x0 = shifted_x0(&tanks, SystemName::Tanks, None).unwrap();
        assert!((x0[0] - (1.0 - tanks.state_offset()[0])).abs() < 1e-15);
        assert!(shifted_x0(&tanks, SystemName::Tanks, Some("1,1")).is_err());
    }
}
