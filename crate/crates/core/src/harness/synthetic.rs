use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Matrix;
use crate::tensor_io::{write_tensor, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum WeightDist {
    Gaussian,
    Laplace,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CalibDist {
    Gaussian,
    /// AR(1) across columns: `x_j = rho x_{j-1} + sqrt(1 - rho^2) e_j`.
    Correlated { rho: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub m: usize,
    pub n: usize,
    pub n_prime: usize,
    pub weight_dist: WeightDist,
    pub calib_dist: CalibDist,
    /// `X~ = X + sigma * noise`.
    pub perturb_sigma: f64,
}

impl SyntheticSpec {
    /// 256 x 64 correlated calibration (rho = 0.5), 64 x 64 gaussian
    /// weights, sigma = 0.01.
    pub fn default_suite(seed: u64) -> Self {
        Self {
            seed,
            m: 256,
            n: 64,
            n_prime: 64,
            weight_dist: WeightDist::Gaussian,
            calib_dist: CalibDist::Correlated { rho: 0.5 },
            perturb_sigma: 0.01,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.n_prime == 0 {
            return Err(Error::InvalidSpec("dimensions must be positive".into()));
        }
        if self.m < self.n {
            return Err(Error::InvalidSpec(format!(
                "m = {} must be at least n = {}",
                self.m, self.n
            )));
        }
        if !(self.perturb_sigma.is_finite() && self.perturb_sigma >= 0.0) {
            return Err(Error::InvalidSpec("sigma must be finite and >= 0".into()));
        }
        if let CalibDist::Correlated { rho } = self.calib_dist {
            if rho.is_nan() || rho.abs() >= 1.0 {
                return Err(Error::InvalidSpec("rho must lie in (-1, 1)".into()));
            }
        }
        Ok(())
    }
}

/// Weights `w` (N x N'), calibration `x` (m x N) and perturbed calibration
/// `x_tilde` (m x N). Entries are rounded to f32 so the in-memory layer is
/// identical to what the tensor files hold.
#[derive(Debug, Clone)]
pub struct SyntheticLayer {
    pub w: Matrix,
    pub x: Matrix,
    pub x_tilde: Matrix,
}

fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

fn sample_weight(rng: &mut ChaCha8Rng, dist: WeightDist) -> f64 {
    // all three have unit variance
    match dist {
        WeightDist::Gaussian => rng.sample(StandardNormal),
        WeightDist::Laplace => {
            let u: f64 = rng.random_range(-0.5..0.5);
            let b = std::f64::consts::FRAC_1_SQRT_2;
            -b * u.signum() * (1.0 - 2.0 * u.abs()).ln()
        }
        WeightDist::Uniform => rng.random_range(-3f64.sqrt()..3f64.sqrt()),
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticLayer> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (m, n, np) = (spec.m, spec.n, spec.n_prime);

    let w: Vec<f64> = (0..n * np)
        .map(|_| f32_round(sample_weight(&mut rng, spec.weight_dist)))
        .collect();

    let mut x = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut x[i * n..(i + 1) * n];
        match spec.calib_dist {
            CalibDist::Gaussian => {
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
            }
            CalibDist::Correlated { rho } => {
                let innov = (1.0 - rho * rho).sqrt();
                let mut prev: f64 = rng.sample(StandardNormal);
                row[0] = prev;
                for v in row.iter_mut().skip(1) {
                    let e: f64 = rng.sample(StandardNormal);
                    prev = rho * prev + innov * e;
                    *v = prev;
                }
            }
        }
    }
    let x_tilde: Vec<f64> = x
        .iter()
        .map(|&v| {
            let e: f64 = rng.sample(StandardNormal);
            f32_round(f32_round(v) + spec.perturb_sigma * e)
        })
        .collect();
    let x: Vec<f64> = x.into_iter().map(f32_round).collect();

    Ok(SyntheticLayer {
        w: Matrix::from_row_major(n, np, &w),
        x: Matrix::from_row_major(m, n, &x),
        x_tilde: Matrix::from_row_major(m, n, &x_tilde),
    })
}

/// Paths of the three tensor files written by [`write_layer`].
#[derive(Debug, Clone)]
pub struct LayerFiles {
    pub weights: PathBuf,
    pub calib: PathBuf,
    pub calib_tilde: PathBuf,
}

impl LayerFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            weights: dir.join("w.bcn"),
            calib: dir.join("x.bcn"),
            calib_tilde: dir.join("x_tilde.bcn"),
        }
    }
}

pub fn write_layer(layer: &SyntheticLayer, dir: &Path) -> Result<LayerFiles> {
    std::fs::create_dir_all(dir)?;
    let files = LayerFiles::in_dir(dir);
    write_tensor(&files.weights, &Tensor::from_matrix(&layer.w))?;
    write_tensor(&files.calib, &Tensor::from_matrix(&layer.x))?;
    write_tensor(&files.calib_tilde, &Tensor::from_matrix(&layer.x_tilde))?;
    Ok(files)
}
