use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use levelline_core::dgff::{Block, FarBoundary};
use levelline_core::{BoundaryConfig, StepControl};
use serde::{Deserialize, Serialize};

/// Configuration file as written by the user; every section but `boundary`
/// may be omitted.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub boundary: BoundaryConfig,
    #[serde(default)]
    pub step: Option<StepControl>,
    #[serde(default)]
    pub mc: McFile,
    #[serde(default)]
    pub dgff: Option<DgffFile>,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McFile {
    pub n_traj: Option<u64>,
    pub seed_base: Option<u64>,
    pub workers: Option<usize>,
    pub checkpoints: Option<Vec<f64>>,
    pub n_guard: Option<u32>,
    pub t_check: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgffFile {
    pub cells: Option<usize>,
    pub extent: Option<f64>,
    pub far_boundary: Option<FarBoundary>,
    pub n_samples: Option<u64>,
    pub frequency: Option<bool>,
    pub covariance: Option<CovarianceConfig>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

/// Fully resolved configuration; this is what every command echoes.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub boundary: BoundaryConfig,
    pub step: StepControl,
    pub mc: McConfig,
    pub dgff: Option<DgffConfig>,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct McConfig {
    pub n_traj: u64,
    pub seed_base: u64,
    pub workers: usize,
    /// Loewner times at which the martingale is sampled.
    pub checkpoints: Vec<f64>,
    pub n_guard: u32,
    /// Comparison time of the reweighting check.
    pub t_check: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DgffConfig {
    /// Cells per side of the unfolded grid used by the frequency study.
    pub cells: usize,
    /// Side of the grid in the unfolded coordinate.
    pub extent: f64,
    pub far_boundary: FarBoundary,
    pub n_samples: u64,
    pub frequency: bool,
    pub covariance: Option<CovarianceConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceConfig {
    pub cells: usize,
    pub block_a: Block,
    pub block_b: Block,
    pub n_samples: u64,
}

impl Default for CovarianceConfig {
    fn default() -> Self {
        Self {
            cells: 64,
            block_a: Block { i0: 4, j0: 4, size: 4 },
            block_b: Block { i0: 12, j0: 8, size: 4 },
            n_samples: 4000,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub n_traj: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

pub fn demo_file() -> FileConfig {
    FileConfig {
        boundary: BoundaryConfig::new(0.0, vec![1.0, 4.0], 1).expect("valid demo configuration"),
        step: None,
        mc: McFile::default(),
        dgff: Some(DgffFile { frequency: Some(true), covariance: Some(CovarianceConfig::default()), ..Default::default() }),
        output: OutputConfig::default(),
    }
}

pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else { return Ok(demo_file()) };
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid configuration in {}", path.display()))
}

impl FileConfig {
    pub fn resolve(self, overrides: &Overrides) -> Result<RunConfig> {
        let boundary = self.boundary;
        let step = self.step.unwrap_or_else(|| StepControl::for_config(&boundary));
        step.validate()?;
        let g2 = boundary.start_gap().powi(2);
        let mc = McConfig {
            n_traj: overrides.n_traj.or(self.mc.n_traj).unwrap_or(10_000),
            seed_base: overrides.seed.or(self.mc.seed_base).unwrap_or(0),
            workers: overrides.workers.or(self.mc.workers).unwrap_or(1),
            checkpoints: self.mc.checkpoints.unwrap_or_else(|| [0.01, 0.1, 1.0, 10.0].iter().map(|c| c * g2).collect()),
            n_guard: self.mc.n_guard.unwrap_or(1000),
            t_check: self.mc.t_check.unwrap_or(0.1 * g2),
        };
        if mc.n_traj == 0 {
            bail!("n_traj must be at least 1");
        }
        if mc.workers == 0 {
            bail!("workers must be at least 1");
        }
        let dgff = self.dgff.map(|d| {
            let span = (boundary.b()[boundary.n() - 1] - boundary.a()).sqrt();
            DgffConfig {
                cells: d.cells.unwrap_or(128),
                extent: d.extent.unwrap_or(4.0 * span),
                far_boundary: d.far_boundary.unwrap_or(FarBoundary::Matched),
                n_samples: d.n_samples.unwrap_or(1000),
                frequency: d.frequency.unwrap_or(true),
                covariance: d.covariance,
            }
        });
        let output = OutputConfig { dir: overrides.out.clone().or(self.output.dir) };
        Ok(RunConfig { boundary, step, mc, dgff, output })
    }
}
