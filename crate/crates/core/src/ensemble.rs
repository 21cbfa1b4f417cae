//! Boltzmann–Gibbs / determinantal ensembles of `N = k + 1` particles:
//! joint log-density, Hamiltonian, exact partition function, an exact
//! projection-kernel sampler on the grid, a continuous Metropolis
//! sampler, and empirical measures of configurations.
//!
//! The joint law has density proportional to `|det s_i(x_j)|²·e^{−kΣφ}`
//! with respect to `ν^N`; every operation here evaluates it through the
//! weighted section matrix `M_{ij} = s_i(x_j)·e^{−kφ(x_j)/2}`, whose
//! squared determinant magnitude equals the full expression, so all
//! determinants stay in a floating-point-representable range and are
//! accumulated in log magnitude.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::basis::SectionBasis;
use crate::equilibrium::{deposit_and_average, GridMeasure};
use crate::error::{LabError, Result};
use crate::weights::{stable_sum, MeasureGrid, Region, WeightSpec};

/// Admissible spread of the feature Gram spectrum when the sampler
/// re-orthonormalizes the basis against the target data.
const FEATURE_CONDITION_LIMIT: f64 = 1e12;

/// One ordered draw of the `N`-particle ensemble at scaling degree `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Configuration {
    /// The particle positions, ordered as produced.
    pub points: Vec<Complex64>,
    /// Scaling degree; the particle count is `k + 1`.
    pub k: u32,
}

impl Configuration {
    /// Number of particles.
    pub fn n(&self) -> usize {
        self.points.len()
    }
}

/// The data defining one ensemble: an orthonormal section basis built
/// against a reference pair `(ν₀, kφ₀)`, together with the target weight
/// `φ` and target quadrature grid `(ν, E)` the particles live on.
#[derive(Debug, Clone)]
pub struct EnsembleSpec {
    basis: SectionBasis,
    target_weight: WeightSpec,
    target_grid: Arc<MeasureGrid>,
}

impl EnsembleSpec {
    /// Bundles a basis with target data.  The target grid must keep at
    /// least `N` usable nodes or no configuration of distinct nodes
    /// exists.
    pub fn new(
        basis: SectionBasis,
        target_weight: WeightSpec,
        target_grid: Arc<MeasureGrid>,
    ) -> Result<Self> {
        let n = basis.n();
        let usable = target_grid.masked_count();
        if usable < n {
            return Err(LabError::InvalidParameter(format!(
                "target grid keeps {usable} nodes but the ensemble needs {n} distinct particles"
            )));
        }
        Ok(EnsembleSpec {
            basis,
            target_weight,
            target_grid,
        })
    }

    /// The ensemble whose target data coincides with the basis's own
    /// reference data (the baseline ensemble of the reference pair).
    pub fn self_targeted(basis: SectionBasis) -> Result<Self> {
        let w = basis.weight().clone();
        let grid = Arc::clone(basis.grid());
        EnsembleSpec::new(basis, w, grid)
    }

    pub fn k(&self) -> u32 {
        self.basis.k()
    }

    /// Particle count `N = k + 1`.
    pub fn n(&self) -> usize {
        self.basis.n()
    }

    pub fn basis(&self) -> &SectionBasis {
        &self.basis
    }

    pub fn target_weight(&self) -> &WeightSpec {
        &self.target_weight
    }

    pub fn target_grid(&self) -> &Arc<MeasureGrid> {
        &self.target_grid
    }

    /// Column `j` holds the weighted section values
    /// `s_i(x_j)·e^{−kφ(x_j)/2}` of configuration point `x_j`.
    fn weighted_section_matrix(&self, points: &[Complex64]) -> Result<DMatrix<Complex64>> {
        let n = self.n();
        let k = self.k() as f64;
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        for (j, &x) in points.iter().enumerate() {
            let damp = (-0.5 * k * self.target_weight.eval(x)?).exp();
            let col = self.basis.section_values(x) * Complex64::new(damp, 0.0);
            m.set_column(j, &col);
        }
        Ok(m)
    }

    /// Weighted feature rows over the usable target nodes: row `m` is
    /// `s_·(z_m)·e^{−kφ(z_m)/2}·√ν_m`, so the Euclidean Gram of the
    /// columns is the section Gram with respect to `(ν, kφ)`.
    fn feature_matrix(&self) -> Result<(Vec<usize>, DMatrix<Complex64>)> {
        let masked = self.target_grid.masked_indices();
        let n = self.n();
        let k = self.k() as f64;
        let mut a = DMatrix::<Complex64>::zeros(masked.len(), n);
        for (row, &i) in masked.iter().enumerate() {
            let z = self.target_grid.nodes[i];
            let damp = (-0.5 * k * self.target_weight.eval(z)?).exp();
            let factor = damp * self.target_grid.weights[i].sqrt();
            if !factor.is_finite() {
                return Err(LabError::WeightOverflow(format!(
                    "weight factor at node {i} is {factor}"
                )));
            }
            let vals = self.basis.section_values(z);
            for c in 0..n {
                a[(row, c)] = vals[c] * factor;
            }
        }
        Ok((masked, a))
    }

    fn check_configuration(&self, c: &Configuration) -> Result<()> {
        if c.k != self.k() {
            return Err(LabError::InvalidParameter(format!(
                "configuration has k = {} but the ensemble has k = {}",
                c.k,
                self.k()
            )));
        }
        if c.n() != self.n() {
            return Err(LabError::InvalidParameter(format!(
                "configuration carries {} points, ensemble needs {}",
                c.n(),
                self.n()
            )));
        }
        Ok(())
    }
}

/// `ln |det U|²` of a square complex matrix through a partially pivoted
/// triangular factorization, staying in log magnitude throughout.
/// Returns `−∞` for a singular matrix.
pub(crate) fn log_abs_det_sq(m: DMatrix<Complex64>) -> f64 {
    let lu = m.lu();
    let u = lu.u();
    let mut acc = 0.0f64;
    for i in 0..u.nrows().min(u.ncols()) {
        let d = u[(i, i)].norm();
        if d == 0.0 {
            return f64::NEG_INFINITY;
        }
        acc += d.ln();
    }
    2.0 * acc
}

/// `ln(n!)` accumulated in the log domain so large particle counts never
/// overflow.
pub fn ln_factorial(n: usize) -> f64 {
    stable_sum((1..=n).map(|m| (m as f64).ln()))
}

/// Logarithm of the unnormalized joint density
/// `ln |det s_i(x_j)|² − k·Σ_j φ(x_j)` of a configuration.  Coincident
/// points give `−∞`, which is a value here, not an error.
pub fn log_joint_density(e: &EnsembleSpec, c: &Configuration) -> Result<f64> {
    e.check_configuration(c)?;
    // a repeated point zeroes the determinant identically, but the
    // floating-point elimination leaves rounding dust on the diagonal,
    // so exact coincidences short-circuit to the true value
    for (a, za) in c.points.iter().enumerate() {
        if c.points[a + 1..].contains(za) {
            return Ok(f64::NEG_INFINITY);
        }
    }
    let m = e.weighted_section_matrix(&c.points)?;
    Ok(log_abs_det_sq(m))
}

/// The energy `H(c) = −k⁻²·ln|det S(c)|² + k⁻¹·Σφ(x_j)`, so that the
/// joint density is the Boltzmann–Gibbs weight `e^{−k²·H}`.  Coincident
/// points give `+∞`.
pub fn hamiltonian(e: &EnsembleSpec, c: &Configuration) -> Result<f64> {
    if e.k() == 0 {
        return Err(LabError::InvalidParameter(
            "the Hamiltonian normalization requires k >= 1".into(),
        ));
    }
    let lj = log_joint_density(e, c)?;
    let k2 = (e.k() as f64).powi(2);
    Ok(-lj / k2)
}

/// Exact log partition function `ln Z = ln(N!) + ln det G`, with
/// `G_{ij} = ∫ s_i·conj(s_j)·e^{−kφ} dν` the section Gram against the
/// target data (the Andréief evaluation of the `N`-fold integral of the
/// joint density).
pub fn partition_function_exact(e: &EnsembleSpec) -> Result<f64> {
    let (_, a) = e.feature_matrix()?;
    let gram = a.adjoint() * &a;
    let chol = nalgebra::linalg::Cholesky::new(gram).ok_or_else(|| {
        LabError::SingularGram(
            "section Gram against the target data is not positive definite".into(),
        )
    })?;
    let log_det: f64 = 2.0 * stable_sum((0..e.n()).map(|i| chol.l()[(i, i)].re.ln()));
    Ok(ln_factorial(e.n()) + log_det)
}

/// Exact sampler of the discrete determinantal law on the target grid.
///
/// Construction orthonormalizes the weighted feature columns against the
/// target data (a no-op when the target coincides with the basis's
/// reference), producing a rank-`N` projection kernel over the usable
/// nodes; draws then run the sequential conditional algorithm, peeling
/// one particle per step from the residual kernel diagonal.
pub struct ExactSampler {
    grid: Arc<MeasureGrid>,
    masked: Vec<usize>,
    /// Orthonormal-column feature matrix over the masked nodes.
    features: DMatrix<Complex64>,
    k: u32,
}

impl ExactSampler {
    pub fn new(e: &EnsembleSpec) -> Result<Self> {
        let (masked, a) = e.feature_matrix()?;
        let gram = a.adjoint() * &a;
        let chol = nalgebra::linalg::Cholesky::new(gram).ok_or_else(|| {
            LabError::KernelRank(
                "feature Gram against the target data is not positive definite".into(),
            )
        })?;
        let n = e.n();
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..n {
            let d = chol.l()[(i, i)].re;
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if !(lo > 0.0) || (hi / lo).powi(2) > FEATURE_CONDITION_LIMIT {
            return Err(LabError::KernelRank(format!(
                "feature Gram condition estimate {:.3e} exceeds {:.0e}",
                (hi / lo).powi(2),
                FEATURE_CONDITION_LIMIT
            )));
        }
        // B = A·L^{−ᴴ} has orthonormal columns: solve L·Bᴴ = Aᴴ.
        let bh = chol
            .l()
            .solve_lower_triangular(&a.adjoint())
            .ok_or_else(|| LabError::KernelRank("triangular solve failed".into()))?;
        Ok(ExactSampler {
            grid: Arc::clone(e.target_grid()),
            masked,
            features: bh.adjoint(),
            k: e.k(),
        })
    }

    /// Kernel diagonal `K(z_m, z_m)` over the masked nodes, in masked
    /// order; its entries are the per-node inclusion intensities and sum
    /// to `N`.
    pub fn kernel_diagonal(&self) -> Vec<f64> {
        (0..self.masked.len())
            .map(|row| self.features.row(row).norm_squared())
            .collect()
    }

    /// Expectation of the linear statistic `Σ_j u(x_j)` under the
    /// discrete law: `Σ_m K(z_m, z_m)·u(z_m)`.
    pub fn expected_linear_statistic(&self, u: impl Fn(Complex64) -> f64) -> f64 {
        let diag = self.kernel_diagonal();
        stable_sum(
            self.masked
                .iter()
                .zip(diag)
                .map(|(&i, d)| d * u(self.grid.nodes[i])),
        )
    }

    /// One exact draw: `N` distinct grid nodes whose unordered law is
    /// the projection determinantal process of the kernel.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Result<Configuration> {
        let m = self.masked.len();
        let n = self.features.ncols();
        let mut residual = self.kernel_diagonal();
        let mut conditionals: Vec<DVector<Complex64>> = Vec::with_capacity(n);
        let mut chosen = Vec::with_capacity(n);
        for step in 0..n {
            let total = stable_sum(residual.iter().copied());
            if !(total > 1e-9) {
                return Err(LabError::KernelRank(format!(
                    "residual kernel mass {total:.3e} collapsed at step {step}"
                )));
            }
            let mut target = rng.gen::<f64>() * total;
            let mut pick = m - 1;
            for (i, &r) in residual.iter().enumerate() {
                if r > 0.0 {
                    target -= r;
                    pick = i;
                    if target <= 0.0 {
                        break;
                    }
                }
            }
            // Kernel column at the picked node, conditioned on the
            // already-chosen particles (one incremental Cholesky column
            // of the kernel restricted to the growing configuration).
            let picked_row = self.features.row(pick).adjoint();
            let mut col = &self.features * picked_row;
            for prev in &conditionals {
                let coef = prev[pick].conj();
                col.axpy(-coef, prev, Complex64::new(1.0, 0.0));
            }
            let denom = residual[pick];
            col.scale_mut(1.0 / denom.sqrt());
            for (r, c) in residual.iter_mut().zip(col.iter()) {
                *r = (*r - c.norm_sqr()).max(0.0);
            }
            residual[pick] = 0.0;
            chosen.push(self.masked[pick]);
            conditionals.push(col);
        }
        Ok(Configuration {
            points: chosen.iter().map(|&i| self.grid.nodes[i]).collect(),
            k: self.k,
        })
    }
}

/// One exact draw with a fresh deterministic stream.  Bulk sampling
/// should construct [`ExactSampler`] once and call `draw` repeatedly.
pub fn sample_exact(e: &EnsembleSpec, seed: u64) -> Result<Configuration> {
    let sampler = ExactSampler::new(e)?;
    sampler.draw(&mut ChaCha8Rng::seed_from_u64(seed))
}

/// Result of a Metropolis run: final state, post-burn-in acceptance
/// rate, the step scale after burn-in tuning, any warnings, and the
/// trace of the radial statistic `Σ|x_j|²/N` recorded every `N` moves
/// after burn-in (for mixing diagnostics).
#[derive(Debug, Clone)]
pub struct McmcOutcome {
    pub configuration: Configuration,
    pub acceptance: f64,
    pub step_scale: f64,
    pub warnings: Vec<String>,
    pub trace: Vec<f64>,
}

/// Two independent standard Gaussians (Box–Muller).
fn gaussian_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Single-site Metropolis walk targeting the continuous joint density on
/// the region `E` (the grid's quadrature measure read as a constant
/// density on `E`).  Proposals move one particle by a circular Gaussian
/// of the current step scale — along the curve for one-dimensional
/// regions — and are rejected outright when they leave `E`.  The step
/// scale is retuned during the first fifth of the run toward acceptance
/// in `[0.3, 0.5]`; an acceptance rate below `0.01` after burn-in is
/// reported as a `cold-chain` warning.
pub fn sample_mcmc(
    e: &EnsembleSpec,
    n_steps: usize,
    step_scale: f64,
    seed: u64,
) -> Result<McmcOutcome> {
    let n = e.n();
    if n_steps < 100 * n {
        return Err(LabError::InvalidParameter(format!(
            "{n_steps} steps requested; the chain needs at least 100·N = {}",
            100 * n
        )));
    }
    if !(step_scale > 0.0 && step_scale.is_finite()) {
        return Err(LabError::InvalidParameter(format!(
            "step scale must be positive and finite, got {step_scale}"
        )));
    }
    let grid = e.target_grid();
    let region = grid.region;
    let bound = region.bounding_radius();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Initial state: distinct usable nodes; retry on the measure-zero
    // event of a numerically singular start.
    let masked = grid.masked_indices();
    let mut points = Vec::new();
    let mut mat = DMatrix::<Complex64>::zeros(n, n);
    let mut cur = f64::NEG_INFINITY;
    for _ in 0..16 {
        points = masked
            .choose_multiple(&mut rng, n)
            .map(|&i| grid.nodes[i])
            .collect::<Vec<_>>();
        mat = e.weighted_section_matrix(&points)?;
        cur = log_abs_det_sq(mat.clone());
        if cur.is_finite() {
            break;
        }
    }
    if !cur.is_finite() {
        return Err(LabError::KernelRank(
            "could not find a nondegenerate starting configuration".into(),
        ));
    }

    let burn = (n_steps / 5).max(100.min(n_steps));
    let block = (burn / 10).max(20);
    let mut step = step_scale;
    let mut block_accepted = 0usize;
    let mut block_proposals = 0usize;
    let mut accepted = 0usize;
    let mut measured = 0usize;
    let mut trace = Vec::new();
    let k = e.k() as f64;

    for move_index in 0..n_steps {
        let site = rng.gen_range(0..n);
        let p = points[site];
        let (g1, g2) = gaussian_pair(&mut rng);
        let proposal = if let Region::Circle { center, radius } = region {
            let theta = (p - center).arg() + step / radius * g1;
            center + Complex64::from_polar(radius, theta)
        } else {
            p + Complex64::new(step * g1, step * g2)
        };
        let in_e = region.contains(proposal) && grid.e_mask[grid.nearest_node(proposal)];
        let mut accept = false;
        let mut proposed_col = None;
        if in_e {
            let damp = (-0.5 * k * e.target_weight.eval(proposal)?).exp();
            let col = e.basis.section_values(proposal) * Complex64::new(damp, 0.0);
            let mut trial = mat.clone();
            trial.set_column(site, &col);
            let new = log_abs_det_sq(trial);
            if new.is_finite() && rng.gen::<f64>().ln() < new - cur {
                accept = true;
                proposed_col = Some((col, new));
            }
        }
        if accept {
            let (col, new) = proposed_col.unwrap();
            mat.set_column(site, &col);
            points[site] = proposal;
            cur = new;
        }
        if move_index < burn {
            block_proposals += 1;
            block_accepted += usize::from(accept);
            if block_proposals >= block {
                let rate = block_accepted as f64 / block_proposals as f64;
                if rate < 0.3 {
                    step = (step * 0.7).max(1e-6 * bound);
                } else if rate > 0.5 {
                    step = (step * 1.4).min(bound);
                }
                block_accepted = 0;
                block_proposals = 0;
            }
        } else {
            measured += 1;
            accepted += usize::from(accept);
            if measured % n == 0 {
                trace.push(stable_sum(points.iter().map(|z| z.norm_sqr())) / n as f64);
            }
        }
    }

    let acceptance = accepted as f64 / measured.max(1) as f64;
    let mut warnings = Vec::new();
    if acceptance < 0.01 {
        warnings.push("cold-chain".to_string());
    }
    Ok(McmcOutcome {
        configuration: Configuration {
            points,
            k: e.k(),
        },
        acceptance,
        step_scale: step,
        warnings,
        trace,
    })
}

/// The empirical measure `(1/N)·Σ δ_{x_j}` of a configuration.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasure {
    pub points: Vec<Complex64>,
}

impl EmpiricalMeasure {
    /// Mass carried by each atom.
    pub fn mass_per_point(&self) -> f64 {
        1.0 / self.points.len() as f64
    }

    /// Linear-statistic pairing `⟨μ, u⟩ = (1/N)·Σ u(x_j)`.
    pub fn pair(&self, u: impl Fn(Complex64) -> f64) -> f64 {
        stable_sum(self.points.iter().map(|&z| u(z))) * self.mass_per_point()
    }

    /// Discretizes the atoms for comparison against grid measures: each
    /// atom's mass goes to its nearest usable node, then one
    /// nearest-neighbor averaging step spreads half of every node's mass
    /// equally over its usable neighbors.  Total mass is preserved
    /// exactly.  [`GridMeasure::coarsened`] applies the same kernel to a
    /// grid measure, which is the matching way to put the comparison
    /// target on the same grid.
    pub fn smoothed(&self, grid: &Arc<MeasureGrid>) -> Result<GridMeasure> {
        if self.points.is_empty() {
            return Err(LabError::InvalidParameter(
                "cannot smooth an empty configuration".into(),
            ));
        }
        let mass = self.mass_per_point();
        let pairs: Vec<(Complex64, f64)> = self.points.iter().map(|&z| (z, mass)).collect();
        let out = deposit_and_average(&pairs, grid);
        GridMeasure::from_node_masses(Arc::clone(grid), out)
    }
}

/// The empirical measure of a configuration.
pub fn empirical(c: &Configuration) -> EmpiricalMeasure {
    EmpiricalMeasure {
        points: c.points.clone(),
    }
}

/// Header of a sample dump file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleDumpHeader {
    pub k: u32,
    pub weight: String,
    pub seed: u64,
    pub sampler: String,
}

/// Writes configurations as one JSON array of `[re, im]` pairs per line,
/// preceded by a JSON header line recording `k`, the weight label, the
/// seed, and the sampler type.
pub fn write_sample_dump(
    path: &Path,
    header: &SampleDumpHeader,
    samples: &[Configuration],
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let head = serde_json::to_string(header)
        .map_err(|e| LabError::Format(format!("header serialization failed: {e}")))?;
    writeln!(out, "{head}")?;
    for c in samples {
        let pairs: Vec<[f64; 2]> = c.points.iter().map(|z| [z.re, z.im]).collect();
        let line = serde_json::to_string(&pairs)
            .map_err(|e| LabError::Format(format!("sample serialization failed: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

/// Reads a sample dump written by [`write_sample_dump`].
pub fn read_sample_dump(path: &Path) -> Result<(SampleDumpHeader, Vec<Configuration>)> {
    let mut lines = BufReader::new(File::open(path)?).lines();
    let head_line = lines
        .next()
        .ok_or_else(|| LabError::Format("sample dump is empty".into()))??;
    let header: SampleDumpHeader = serde_json::from_str(&head_line)
        .map_err(|e| LabError::Format(format!("bad sample dump header: {e}")))?;
    let mut samples = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let pairs: Vec<[f64; 2]> = serde_json::from_str(&line).map_err(|e| {
            LabError::Format(format!("bad sample on line {}: {e}", lineno + 2))
        })?;
        samples.push(Configuration {
            points: pairs
                .iter()
                .map(|p| Complex64::new(p[0], p[1]))
                .collect(),
            k: header.k,
        });
    }
    Ok((header, samples))
}
