//! Benchmark objectives on [-1, 1]^D.
//!
//! The Hartmann coefficient matrices are shipped as a checked-in data file
//! and verified against a grid-plus-refinement oracle in the tests rather
//! than trusted as transcribed.

use std::sync::OnceLock;

use serde::Deserialize;

use crate::error::{NdpError, Result};

/// Hartmann coefficient table (unit-cube convention).
#[derive(Clone, Debug, Deserialize)]
pub struct HartmannTable {
    pub alpha: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub minimiser_unit: Vec<f64>,
    pub minimum: f64,
}

#[derive(Debug, Deserialize)]
struct HartmannFile {
    hartmann3: HartmannTable,
    hartmann6: HartmannTable,
}

fn hartmann_tables() -> &'static HartmannFile {
    static TABLES: OnceLock<HartmannFile> = OnceLock::new();
    TABLES.get_or_init(|| {
        serde_json::from_str(include_str!("../../data/hartmann.json"))
            .expect("bundled hartmann.json is valid")
    })
}

impl HartmannTable {
    pub fn dim(&self) -> usize {
        self.a[0].len()
    }

    /// Evaluate on the unit cube.
    pub fn eval_unit(&self, u: &[f64]) -> f64 {
        let mut sum = 0.0;
        for i in 0..self.alpha.len() {
            let mut inner = 0.0;
            for j in 0..self.dim() {
                let diff = u[j] - self.p[i][j];
                inner += self.a[i][j] * diff * diff;
            }
            sum += self.alpha[i] * (-inner).exp();
        }
        -sum
    }
}

enum Kind {
    Hartmann(&'static HartmannTable),
    /// `(x - 0.3)^2`
    Quadratic1d,
    /// `-cos(2 pi (x - 0.25)) + 0.3 (x - 0.25)^2`: global minimum -1 at
    /// x = 0.25, local minimum near x = -0.75.
    Multimodal1d,
}

/// A deterministic test function on [-1, 1]^D with optional known optimum.
pub struct Objective {
    pub name: String,
    pub dim: usize,
    pub known_minimum: Option<f64>,
    /// Minimiser in [-1, 1]^D coordinates.
    pub known_minimiser: Option<Vec<f64>>,
    kind: Kind,
}

impl Objective {
    pub fn hartmann3() -> Objective {
        let table = &hartmann_tables().hartmann3;
        Objective {
            name: "hartmann3".into(),
            dim: 3,
            known_minimum: Some(table.minimum),
            known_minimiser: Some(table.minimiser_unit.iter().map(|u| 2.0 * u - 1.0).collect()),
            kind: Kind::Hartmann(table),
        }
    }

    pub fn hartmann6() -> Objective {
        let table = &hartmann_tables().hartmann6;
        Objective {
            name: "hartmann6".into(),
            dim: 6,
            known_minimum: Some(table.minimum),
            known_minimiser: Some(table.minimiser_unit.iter().map(|u| 2.0 * u - 1.0).collect()),
            kind: Kind::Hartmann(table),
        }
    }

    pub fn quadratic1d() -> Objective {
        Objective {
            name: "quadratic1d".into(),
            dim: 1,
            known_minimum: Some(0.0),
            known_minimiser: Some(vec![0.3]),
            kind: Kind::Quadratic1d,
        }
    }

    pub fn multimodal1d() -> Objective {
        Objective {
            name: "multimodal1d".into(),
            dim: 1,
            known_minimum: Some(-1.0),
            known_minimiser: Some(vec![0.25]),
            kind: Kind::Multimodal1d,
        }
    }

    pub fn by_name(name: &str) -> Result<Objective> {
        match name {
            "hartmann3" => Ok(Self::hartmann3()),
            "hartmann6" => Ok(Self::hartmann6()),
            "quadratic1d" => Ok(Self::quadratic1d()),
            "multimodal1d" => Ok(Self::multimodal1d()),
            other => Err(NdpError::InvalidArgument(format!(
                "unknown objective {other}; available: hartmann3, hartmann6, quadratic1d, multimodal1d"
            ))),
        }
    }

    /// Evaluate at a point of the [-1, 1]^D search space.
    pub fn eval(&self, x: &[f64]) -> f64 {
        assert_eq!(x.len(), self.dim, "objective {} expects dim {}", self.name, self.dim);
        match &self.kind {
            Kind::Hartmann(table) => {
                let u: Vec<f64> = x.iter().map(|&v| (v + 1.0) / 2.0).collect();
                table.eval_unit(&u)
            }
            Kind::Quadratic1d => (x[0] - 0.3) * (x[0] - 0.3),
            Kind::Multimodal1d => {
                let d = x[0] - 0.25;
                -(2.0 * std::f64::consts::PI * d).cos() + 0.3 * d * d
            }
        }
    }
}
