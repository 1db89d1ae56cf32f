//! Scenario documents: one JSON file describing a model, cost, grid and run
//! settings. Every section is optional here; each command asks for the
//! sections it needs and fails with exit code 2 when one is missing.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use nalgebra::DVector;
use serde::Deserialize;
use serde_json::Value;

use qlqg_core::linalg::{c64, mat_from_rows, Mat, Vector};
use qlqg_core::riccati::CostSpec;
use qlqg_core::sme::{complex_matrix_from_json, DensityMatrix, FiniteModel, SmeScheme};
use qlqg_core::{free_particle_model, GaussianBelief, PhaseSpaceModel, TimeGrid};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: Option<Value>,
    pub model_path: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub cost: Option<CostJson>,
    pub grid: Option<GridJson>,
    pub initial: Option<InitialJson>,
    #[serde(default)]
    pub sim: SimJson,
    /// Coordinate relabelling applied by the duality map.
    pub permutation: Option<Vec<usize>>,
    pub finite_model: Option<Value>,
    pub finite_model_path: Option<PathBuf>,
    pub sme: Option<SmeJson>,
    pub out: Option<PathBuf>,

    #[serde(skip)]
    base_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    FreeParticle {
        #[serde(default = "one")]
        mass: f64,
        #[serde(default = "one")]
        hbar: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostJson {
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "G")]
    pub g: Option<Vec<Vec<f64>>>,
    #[serde(rename = "Omega_T")]
    pub omega_t: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridJson {
    #[serde(default)]
    pub t0: f64,
    pub t1: f64,
    pub dt: Option<f64>,
    pub n_steps: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialJson {
    pub mean: Vec<f64>,
    pub cov: Vec<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimJson {
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    #[serde(default)]
    pub seed: u64,
    pub record_stride: Option<usize>,
    /// How many per-trajectory CSVs to write.
    #[serde(default)]
    pub write_trajectories: usize,
}

impl Default for SimJson {
    fn default() -> Self {
        Self { n_traj: default_n_traj(), seed: 0, record_stride: None, write_trajectories: 0 }
    }
}

fn default_n_traj() -> usize {
    1000
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmeJson {
    pub rho0: Option<Value>,
    pub psi0: Option<StateVectorJson>,
    #[serde(default)]
    pub control: Vec<f64>,
    #[serde(default)]
    pub observables: BTreeMap<String, Value>,
    #[serde(default)]
    pub scheme: SchemeJson,
    #[serde(default = "one_usize")]
    pub n_traj: usize,
    pub record_stride: Option<usize>,
    #[serde(default = "one_usize")]
    pub write_trajectories: usize,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateVectorJson {
    pub re: Vec<f64>,
    #[serde(default)]
    pub im: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeJson {
    #[default]
    Kraus,
    Euler,
}

impl From<SchemeJson> for SmeScheme {
    fn from(s: SchemeJson) -> Self {
        match s {
            SchemeJson::Kraus => SmeScheme::Kraus,
            SchemeJson::Euler => SmeScheme::Euler,
        }
    }
}

impl Scenario {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading scenario {}", path.display()))?;
        let mut s: Scenario =
            serde_json::from_str(&text).with_context(|| format!("parsing scenario {}", path.display()))?;
        s.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(s)
    }

    /// Empty scenario, for commands that can run without one.
    pub fn empty() -> Self {
        serde_json::from_str("{}").expect("empty scenario parses")
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn read_json(&self, p: &Path, what: &str) -> anyhow::Result<Value> {
        let path = self.resolve(p);
        if !path.exists() {
            bail!("{what} file {} does not exist", path.display());
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("parsing {what} file {}", path.display()))
    }

    pub fn phase_space_model(&self) -> anyhow::Result<PhaseSpaceModel> {
        let sources = [self.model.is_some(), self.model_path.is_some(), self.preset.is_some()];
        match sources.iter().filter(|x| **x).count() {
            0 => bail!("scenario needs one of `model`, `model_path` or `preset`"),
            1 => {}
            _ => bail!("scenario gives more than one of `model`, `model_path`, `preset`"),
        }
        if let Some(Preset::FreeParticle { mass, hbar }) = self.preset {
            return Ok(free_particle_model(mass, hbar)?);
        }
        let doc = match (&self.model, &self.model_path) {
            (Some(v), _) => v.clone(),
            (None, Some(p)) => self.read_json(p, "model")?,
            _ => unreachable!(),
        };
        Ok(PhaseSpaceModel::from_json_value(&doc)?)
    }

    pub fn grid(&self) -> anyhow::Result<TimeGrid> {
        let g = self.grid.as_ref().ok_or_else(|| anyhow!("scenario key `grid` missing"))?;
        let n_steps = match (g.dt, g.n_steps) {
            (Some(_), Some(_)) => bail!("key `grid`: give either `dt` or `n_steps`, not both"),
            (None, Some(n)) => n,
            (Some(dt), None) => {
                if !(dt > 0.0 && dt.is_finite()) {
                    bail!("key `grid.dt` must be positive");
                }
                ((g.t1 - g.t0) / dt).round().max(1.0) as usize
            }
            (None, None) => bail!("key `grid` needs `dt` or `n_steps`"),
        };
        TimeGrid::new(g.t0, g.t1, n_steps).context("key `grid`")
    }

    pub fn cost(&self, m: usize, d: usize) -> anyhow::Result<CostSpec> {
        let c = self.cost.as_ref().ok_or_else(|| anyhow!("scenario key `cost` missing"))?;
        let f = mat_from_rows("cost.F", &c.f, Some((m, m)))?;
        let g = match &c.g {
            Some(rows) => mat_from_rows("cost.G", rows, Some((d, m)))?,
            None => Mat::zeros(d, m),
        };
        let omega_t = mat_from_rows("cost.Omega_T", &c.omega_t, Some((m, m)))?;
        CostSpec::new(f, g, omega_t).context("key `cost`")
    }

    pub fn initial(&self, m: usize) -> anyhow::Result<GaussianBelief> {
        let i = self.initial.as_ref().ok_or_else(|| anyhow!("scenario key `initial` missing"))?;
        if i.mean.len() != m {
            bail!("key `initial.mean`: expected {m} entries, got {}", i.mean.len());
        }
        let cov = mat_from_rows("initial.cov", &i.cov, Some((m, m)))?;
        GaussianBelief::new(Vector::from_vec(i.mean.clone()), cov).context("key `initial`")
    }

    pub fn finite_model(&self) -> anyhow::Result<FiniteModel> {
        let doc = match (&self.finite_model, &self.finite_model_path) {
            (Some(_), Some(_)) => bail!("scenario gives both `finite_model` and `finite_model_path`"),
            (Some(v), None) => v.clone(),
            (None, Some(p)) => self.read_json(p, "finite model")?,
            (None, None) => bail!("scenario needs `finite_model` or `finite_model_path`"),
        };
        Ok(FiniteModel::from_json_value(&doc)?)
    }

    pub fn sme(&self) -> anyhow::Result<&SmeJson> {
        self.sme.as_ref().ok_or_else(|| anyhow!("scenario key `sme` missing"))
    }
}

impl SmeJson {
    pub fn initial_state(&self, dim: usize) -> anyhow::Result<DensityMatrix> {
        match (&self.rho0, &self.psi0) {
            (Some(_), Some(_)) => bail!("key `sme`: give either `rho0` or `psi0`, not both"),
            (Some(v), None) => Ok(DensityMatrix::new(complex_matrix_from_json(v, "sme.rho0", dim)?)?),
            (None, Some(psi)) => {
                let im = if psi.im.is_empty() { vec![0.0; psi.re.len()] } else { psi.im.clone() };
                if psi.re.len() != dim || im.len() != dim {
                    bail!("key `sme.psi0`: expected {dim} entries");
                }
                let v = DVector::from_iterator(dim, psi.re.iter().zip(&im).map(|(&a, &b)| c64(a, b)));
                let norm = v.norm();
                if !(norm > 0.0 && norm.is_finite()) {
                    bail!("key `sme.psi0` must be a nonzero finite vector");
                }
                Ok(DensityMatrix::pure(&(v / c64(norm, 0.0)))?)
            }
            (None, None) => bail!("key `sme` needs `rho0` or `psi0`"),
        }
    }

    pub fn observables(&self, dim: usize) -> anyhow::Result<Vec<(String, qlqg_core::linalg::CMat)>> {
        self.observables
            .iter()
            .map(|(name, v)| Ok((name.clone(), complex_matrix_from_json(v, &format!("sme.observables.{name}"), dim)?)))
            .collect()
    }
}
