//! Large-deviation experiment harness: deviation-probability estimation,
//! rate prediction by constrained energy minimization, free-energy
//! convergence curves, Fekete-point ascent, and localization diagnostics.
//!
//! Experiments are organized as independent cells, one per `(k, seed)`
//! pair; cells run concurrently and reducers collect them in list order,
//! so results are reproducible regardless of thread count.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::orthonormalize;
use crate::ensemble::{
    empirical, ln_factorial, log_abs_det_sq, log_joint_density, partition_function_exact,
    sample_mcmc, Configuration, EnsembleSpec, ExactSampler,
};
use crate::envelope::{envelope_radial, RadialProfile, LAB_T_NODES, LAB_T_SPAN};
use crate::equilibrium::{log_kernel, ma_radial, GridMeasure};
use crate::error::{LabError, Result};
use crate::rate::{envelope_energy, mask_window};
use crate::weights::{
    build_grid, fubini_study_reference, normalize_mass, stable_sum, MeasureGrid, MeasureKind,
    Reference, Region, WeightSpec,
};

/// Normal quantile of the 97.5th percentile: the confidence intervals
/// reported by [`deviation_probability`] are two-sided 95% Wilson
/// intervals.
const WILSON_Z: f64 = 1.959_963_984_540_054;

/// Iteration budget of the constrained simplex solver before it reports a
/// stall.
const RATE_QP_MAX_ITERS: usize = 400_000;

/// Duality-gap tolerance of the simplex solves inside
/// [`rate_prediction`].
const RATE_QP_TOL: f64 = 1e-7;

/// Atom masses below this floor are dropped from the active-vertex
/// bookkeeping of the constrained solver.
const ATOM_FLOOR: f64 = 1e-15;

/// A candidate column swap must beat the current Fekete column by this
/// relative margin to count as an improving move; the margin absorbs
/// round-off in the determinant-ratio evaluation.
const FEKETE_IMPROVE_MARGIN: f64 = 1e-10;

/// Full-sweep budget of one Fekete ascent restart.
const FEKETE_MAX_SWEEPS: usize = 1_000;

// ---------------------------------------------------------------------
// observables
// ---------------------------------------------------------------------

/// Scalar observable `u` paired with empirical measures in linear
/// statistics `N⁻¹ Σ u(x_i)`.
#[derive(Clone)]
pub enum TestFunction {
    /// `u(z) = Re z`.
    ReZ,
    /// `u(z) = Im z`.
    ImZ,
    /// `u(z) = |z|²`.
    AbsSq,
    /// Arbitrary observable with a display label.
    Custom {
        label: String,
        f: Arc<dyn Fn(Complex64) -> f64 + Send + Sync>,
    },
}

impl TestFunction {
    pub fn eval(&self, z: Complex64) -> f64 {
        match self {
            TestFunction::ReZ => z.re,
            TestFunction::ImZ => z.im,
            TestFunction::AbsSq => z.norm_sqr(),
            TestFunction::Custom { f, .. } => f(z),
        }
    }

    pub fn label(&self) -> &str {
        match self {
            TestFunction::ReZ => "re-z",
            TestFunction::ImZ => "im-z",
            TestFunction::AbsSq => "abs-sq",
            TestFunction::Custom { label, .. } => label,
        }
    }

    /// Looks up a panel observable by name (`re-z`, `im-z`, `abs-sq`).
    pub fn from_name(name: &str) -> Option<TestFunction> {
        match name {
            "re-z" | "re" => Some(TestFunction::ReZ),
            "im-z" | "im" => Some(TestFunction::ImZ),
            "abs-sq" | "abs2" => Some(TestFunction::AbsSq),
            _ => None,
        }
    }
}

impl fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TestFunction({})", self.label())
    }
}

// ---------------------------------------------------------------------
// deviation probabilities
// ---------------------------------------------------------------------

/// Which sampler generates the configurations of a deviation experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerKind {
    Exact,
    Mcmc,
}

/// A deviation-probability experiment: how often the empirical mean of
/// `u` falls more than `epsilon` away from its equilibrium value.
#[derive(Debug, Clone)]
pub struct DeviationExperiment {
    pub test_function: TestFunction,
    /// Deviation threshold; `0` is admitted and makes every sample a hit
    /// (the distance is almost surely positive).
    pub epsilon: f64,
    pub k_list: Vec<u32>,
    pub n_samples: usize,
    pub sampler: SamplerKind,
    pub seed: u64,
}

impl DeviationExperiment {
    fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(LabError::InvalidParameter(format!(
                "deviation threshold {} must be finite and nonnegative",
                self.epsilon
            )));
        }
        validate_k_list(&self.k_list)?;
        if self.n_samples < 1_000 {
            return Err(LabError::InvalidParameter(format!(
                "{} samples are too few for a deviation estimate; need at least 1000",
                self.n_samples
            )));
        }
        Ok(())
    }
}

/// One `k`-row of a deviation experiment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DeviationRow {
    pub k: u32,
    pub n_samples: usize,
    pub hits: usize,
    /// `hits / n_samples`.
    pub estimate: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

/// Two-sided 95% Wilson score interval for `hits` successes out of `n`
/// trials.  At zero hits the interval is `[0, bound]` with a positive
/// upper bound, so rare events stay distinguishable from impossible
/// ones.
pub fn wilson_interval(hits: usize, n: usize) -> (f64, f64) {
    assert!(n > 0, "interval of an empty sample");
    let nf = n as f64;
    let p = hits as f64 / nf;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = WILSON_Z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    // at the degenerate counts the exact bounds are 0 and 1; computing
    // them by cancellation leaves round-off, so they are pinned
    let low = if hits == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if hits == n { 1.0 } else { (center + half).min(1.0) };
    (low, high)
}

/// Derives the per-cell random stream from the experiment seed, the
/// degree, and a lane index, so cells stay independent and reproducible
/// under any execution order.
fn cell_seed(seed: u64, k: u32, lane: u64) -> u64 {
    seed ^ (u64::from(k) + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ lane.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn validate_k_list(k_list: &[u32]) -> Result<()> {
    if k_list.is_empty() {
        return Err(LabError::InvalidParameter(
            "degree list is empty".into(),
        ));
    }
    if k_list.iter().any(|&k| k == 0) {
        return Err(LabError::InvalidParameter(
            "degree list must contain positive degrees".into(),
        ));
    }
    if k_list.windows(2).any(|p| p[0] >= p[1]) {
        return Err(LabError::InvalidParameter(
            "degree list must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Equilibrium measure of `(grid, w)`: the radial envelope route when the
/// weight is radial and the region is centered at the origin (exact up to
/// the radial discretization), otherwise the simplex minimizer of the
/// weighted energy.
///
/// The radial route assumes the grid mask is radially symmetric, which
/// holds for grids built from disk, annulus, and circle regions that have
/// not been restricted by an asymmetric predicate.
pub fn equilibrium_measure(grid: &Arc<MeasureGrid>, w: &WeightSpec) -> Result<GridMeasure> {
    let centered = match grid.region {
        Region::Disk { center, .. }
        | Region::Annulus { center, .. }
        | Region::Circle { center, .. } => center.norm() <= 1e-12,
        _ => false,
    };
    if centered && w.radial_profile().is_some() {
        let profile = RadialProfile::from_weight(w, -LAB_T_SPAN, LAB_T_SPAN, LAB_T_NODES)?;
        let env = envelope_radial(&profile, mask_window(grid)?)?;
        ma_radial(&env, grid)
    } else {
        let masked = grid.masked_indices();
        let zs: Vec<Complex64> = masked.iter().map(|&i| grid.nodes[i]).collect();
        let rs: Vec<f64> = masked.iter().map(|&i| grid.cell_radius[i]).collect();
        let phi = zs.iter().map(|&z| w.eval(z)).collect::<Result<Vec<f64>>>()?;
        let sol = constrained_simplex_qp(&zs, &rs, &phi, None, RATE_QP_TOL, RATE_QP_MAX_ITERS)?;
        masses_to_measure(grid, &masked, &sol.masses)
    }
}

/// Estimates, for every `k` in the experiment, the probability that the
/// empirical mean of the observable deviates from its equilibrium value
/// by more than `epsilon` (strict inequality), with a Wilson confidence
/// interval per row.  Cells for different `k` run concurrently; the
/// result is deterministic given the experiment seed.
pub fn deviation_probability(
    grid: &Arc<MeasureGrid>,
    w: &WeightSpec,
    x: &DeviationExperiment,
) -> Result<Vec<DeviationRow>> {
    x.validate()?;
    let mu_eq = equilibrium_measure(grid, w)?;
    let target_mean = mu_eq.mean(|z| x.test_function.eval(z));
    x.k_list
        .par_iter()
        .map(|&k| deviation_cell(grid, w, x, k, target_mean))
        .collect()
}

fn deviation_cell(
    grid: &Arc<MeasureGrid>,
    w: &WeightSpec,
    x: &DeviationExperiment,
    k: u32,
    target_mean: f64,
) -> Result<DeviationRow> {
    let basis = orthonormalize(grid, w, k)?;
    let e = EnsembleSpec::self_targeted(basis)?;
    let statistic = |c: &Configuration| empirical(c).pair(|z| x.test_function.eval(z));
    let mut hits = 0usize;
    match x.sampler {
        SamplerKind::Exact => {
            let sampler = ExactSampler::new(&e)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(x.seed, k, 0));
            for _ in 0..x.n_samples {
                let c = sampler.draw(&mut rng)?;
                if (statistic(&c) - target_mean).abs() > x.epsilon {
                    hits += 1;
                }
            }
        }
        SamplerKind::Mcmc => {
            // one independent chain per sample: slower than thinning a
            // single chain but free of autocorrelation in the counts
            let step = grid.region.bounding_radius() / 8.0;
            let budget = 200 * e.n();
            for s in 0..x.n_samples {
                let out = sample_mcmc(&e, budget, step, cell_seed(x.seed, k, s as u64 + 1))?;
                if (statistic(&out.configuration) - target_mean).abs() > x.epsilon {
                    hits += 1;
                }
            }
        }
    }
    let (wilson_low, wilson_high) = wilson_interval(hits, x.n_samples);
    Ok(DeviationRow {
        k,
        n_samples: x.n_samples,
        hits,
        estimate: hits as f64 / x.n_samples as f64,
        wilson_low,
        wilson_high,
    })
}

// ---------------------------------------------------------------------
// rate prediction: energy minimization over a half-space slice of the
// simplex
// ---------------------------------------------------------------------

/// Which one-sided deviation attains the predicted infimum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviationSide {
    Upper,
    Lower,
    TwoSided,
}

/// Predicted decay rate of a deviation event: the minimum of the rate
/// functional over measures whose `u`-mean deviates by at least
/// `epsilon`, together with the minimizing measure.
#[derive(Debug, Clone)]
pub struct RatePrediction {
    /// Smaller of the two one-sided infima; nonnegative.
    pub inf_value: f64,
    pub side: DeviationSide,
    pub minimizing_measure: GridMeasure,
    /// `∫ u dμ_eq`, the center the deviation is measured from.
    pub equilibrium_mean: f64,
    /// Infimum over `{∫u dμ ≥ mean + ε}`; `None` when that half-space
    /// misses the simplex.
    pub upper_inf: Option<f64>,
    /// Infimum over `{∫u dμ ≤ mean − ε}`.
    pub lower_inf: Option<f64>,
    /// Weighted energy `J` of the minimizer, reference constant included.
    pub constrained_energy: f64,
    /// Weighted energy `J` of the unconstrained minimizer (the envelope
    /// energy of the constraint set in the same discretization).
    pub equilibrium_energy: f64,
}

/// A vertex of the simplex sliced by one half-space: either a single
/// node, or a two-node mixture sitting exactly on the constraint plane.
#[derive(Clone, Copy, Debug)]
struct SliceVertex {
    hi: usize,
    lo: usize,
    /// Mass on `hi`; the rest sits on `lo`.  Single nodes have
    /// `lo == hi` and `theta == 1`.
    theta: f64,
}

impl SliceVertex {
    fn single(i: usize) -> Self {
        SliceVertex {
            hi: i,
            lo: i,
            theta: 1.0,
        }
    }

    fn is_single(&self) -> bool {
        self.lo == self.hi
    }

    fn dot(&self, v: &[f64]) -> f64 {
        if self.is_single() {
            v[self.hi]
        } else {
            self.theta * v[self.hi] + (1.0 - self.theta) * v[self.lo]
        }
    }

    /// Adds `scale` times this vertex to the dense mass vector, keeping
    /// the support list current.  Membership is tracked by `present`
    /// rather than by `x[i] == 0`, because a clamped-to-zero node stays
    /// listed until the next cleanup and must not be listed twice.
    fn deposit(&self, scale: f64, x: &mut [f64], supp: &mut Vec<usize>, present: &mut [bool]) {
        let mut add = |i: usize, m: f64| {
            if m != 0.0 && !present[i] {
                present[i] = true;
                supp.push(i);
            }
            x[i] += m;
        };
        if self.is_single() {
            add(self.hi, scale);
        } else {
            add(self.hi, scale * self.theta);
            add(self.lo, scale * (1.0 - self.theta));
        }
    }
}

/// Linear minimization oracle over the simplex, optionally sliced by
/// `a·x ≥ b`: the optimum is a single node when the free argmin already
/// satisfies the plane, otherwise a node-or-mixture on the plane located
/// by a parametric search over the plane's multiplier.
fn linear_oracle(g: &[f64], constraint: Option<(&[f64], f64)>) -> SliceVertex {
    let m = g.len();
    let argmin_free = (0..m)
        .min_by(|&i, &j| g[i].total_cmp(&g[j]))
        .expect("oracle over an empty node set");
    let Some((a, b)) = constraint else {
        return SliceVertex::single(argmin_free);
    };
    if a[argmin_free] >= b {
        return SliceVertex::single(argmin_free);
    }
    // tilted argmin of g − λa; ties resolve toward the larger constraint
    // value so the path is monotone in λ
    let pick = |lambda: f64| -> usize {
        let mut best = 0usize;
        let mut best_v = f64::INFINITY;
        for i in 0..m {
            let v = g[i] - lambda * a[i];
            if v < best_v || (v == best_v && a[i] > a[best]) {
                best = i;
                best_v = v;
            }
        }
        best
    };
    let mut lam_hi = 1.0;
    let mut hi_pick = pick(lam_hi);
    let mut guard = 0usize;
    while a[hi_pick] < b {
        lam_hi *= 2.0;
        hi_pick = pick(lam_hi);
        guard += 1;
        if guard > 200 {
            // caller guarantees max a ≥ b, so the limit pick is feasible;
            // this is unreachable short of NaN contamination
            break;
        }
    }
    let mut lam_lo = 0.0;
    let mut lo_pick = argmin_free;
    for _ in 0..100 {
        let mid = 0.5 * (lam_lo + lam_hi);
        let p = pick(mid);
        if a[p] >= b {
            lam_hi = mid;
            hi_pick = p;
        } else {
            lam_lo = mid;
            lo_pick = p;
        }
    }
    let denom = a[hi_pick] - a[lo_pick];
    let theta = if denom.abs() <= f64::EPSILON * (a[hi_pick].abs() + a[lo_pick].abs()) {
        1.0
    } else {
        ((b - a[lo_pick]) / denom).clamp(0.0, 1.0)
    };
    let mix = SliceVertex {
        hi: hi_pick,
        lo: lo_pick,
        theta,
    };
    // a feasible single node always exists when the slice is nonempty;
    // keep whichever candidate scores lower
    let single = (0..m)
        .filter(|&i| a[i] >= b)
        .min_by(|&i, &j| g[i].total_cmp(&g[j]))
        .map(SliceVertex::single);
    match single {
        Some(s) if s.dot(g) <= mix.dot(g) => s,
        _ => mix,
    }
}

struct QpSolution {
    /// Masses over the masked-node index space, normalized to 1.
    masses: Vec<f64>,
    /// `½ xᵀQx + φᵀx` recomputed from scratch on the final support
    /// (no reference constant included).
    objective: f64,
}

/// Minimizes `½ Σᵢⱼ (−ln|zᵢ−zⱼ|²) xᵢxⱼ + Σᵢ φᵢ xᵢ` over the probability
/// simplex, optionally restricted to the half-space `a·x ≥ b`, by the
/// conditional-gradient method with away steps.  The vertex set of the
/// sliced simplex (nodes and on-plane two-node mixtures) is tracked
/// explicitly so away steps never leave the feasible region; the
/// Frank–Wolfe gap certifies the returned objective.
fn constrained_simplex_qp(
    zs: &[Complex64],
    rs: &[f64],
    phi: &[f64],
    constraint: Option<(&[f64], f64)>,
    tol: f64,
    max_iters: usize,
) -> Result<QpSolution> {
    let m = zs.len();
    if m == 0 {
        return Err(LabError::EmptySupport(
            "constraint set covers no grid nodes".into(),
        ));
    }
    if let Some((a, b)) = constraint {
        let amax = a.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
        if amax < b {
            return Err(LabError::InfeasibleDeviation(format!(
                "half-space a·x ≥ {b:.6} misses the simplex (max a = {amax:.6})"
            )));
        }
    }
    let column = |j: usize| -> Vec<f64> {
        let zj = zs[j];
        let rj = rs[j];
        zs.par_iter()
            .zip(rs)
            .map(|(&z, &r)| -log_kernel(z, zj, r.max(rj)))
            .collect()
    };
    let vertex_column = |v: &SliceVertex| -> Vec<f64> {
        let chi = column(v.hi);
        if v.is_single() {
            return chi;
        }
        let clo = column(v.lo);
        chi.iter()
            .zip(&clo)
            .map(|(&h, &l)| v.theta * h + (1.0 - v.theta) * l)
            .collect()
    };

    let v0 = linear_oracle(phi, constraint);
    let mut x = vec![0.0f64; m];
    let mut supp: Vec<usize> = Vec::new();
    let mut present = vec![false; m];
    v0.deposit(1.0, &mut x, &mut supp, &mut present);
    let mut atoms: Vec<(SliceVertex, f64)> = vec![(v0, 1.0)];
    let mut g: Vec<f64> = vertex_column(&v0)
        .into_iter()
        .zip(phi)
        .map(|(q, &p)| q + p)
        .collect();

    let mut iterations = 0usize;
    let mut gap;
    loop {
        let s = linear_oracle(&g, constraint);
        let gx: f64 = supp.iter().map(|&j| g[j] * x[j]).sum();
        gap = gx - s.dot(&g);
        if gap <= tol {
            break;
        }
        if iterations >= max_iters {
            return Err(LabError::QpStall(format!(
                "duality gap {gap:.3e} after {iterations} iterations (tolerance {tol:.1e})"
            )));
        }
        let (away_idx, away_gx) = atoms
            .iter()
            .enumerate()
            .map(|(i, (v, _))| (i, v.dot(&g)))
            .max_by(|(_, a), (_, b)| a.total_cmp(b))
            .expect("nonempty atom list");
        let toward = gap >= away_gx - gx;

        if toward {
            let qs = vertex_column(&s);
            // qd = Q(s − x), using Qx = g − φ
            let qd: Vec<f64> = (0..m).map(|i| qs[i] - (g[i] - phi[i])).collect();
            let dqd = s.dot(&qd) - supp.iter().map(|&j| x[j] * qd[j]).sum::<f64>();
            let gd = s.dot(&g) - gx;
            let eta = if dqd > 0.0 {
                (-gd / dqd).clamp(0.0, 1.0)
            } else {
                1.0
            };
            if !(eta > 0.0) {
                break;
            }
            if eta >= 1.0 {
                for &j in &supp {
                    x[j] = 0.0;
                    present[j] = false;
                }
                supp.clear();
                atoms.clear();
            } else {
                for &j in &supp {
                    x[j] *= 1.0 - eta;
                }
                for atom in &mut atoms {
                    atom.1 *= 1.0 - eta;
                }
            }
            s.deposit(eta, &mut x, &mut supp, &mut present);
            merge_atom(&mut atoms, s, eta);
            for (gi, qi) in g.iter_mut().zip(&qd) {
                *gi += eta * qi;
            }
        } else {
            let (va, alpha_a) = atoms[away_idx];
            if alpha_a >= 1.0 - 1e-15 {
                // the iterate is a single vertex; no away direction left
                break;
            }
            let qa = vertex_column(&va);
            let qd: Vec<f64> = (0..m).map(|i| (g[i] - phi[i]) - qa[i]).collect();
            let gd = gx - va.dot(&g);
            let dqd = supp.iter().map(|&j| x[j] * qd[j]).sum::<f64>() - va.dot(&qd);
            let eta_max = alpha_a / (1.0 - alpha_a);
            let eta = if dqd > 0.0 {
                (-gd / dqd).clamp(0.0, eta_max)
            } else {
                eta_max
            };
            if !(eta > 0.0) {
                break;
            }
            for &j in &supp {
                x[j] *= 1.0 + eta;
            }
            va.deposit(-eta, &mut x, &mut supp, &mut present);
            for &j in &supp {
                if x[j] < 0.0 {
                    x[j] = 0.0;
                }
            }
            for atom in &mut atoms {
                atom.1 *= 1.0 + eta;
            }
            atoms[away_idx].1 -= eta;
            if atoms[away_idx].1 <= ATOM_FLOOR {
                atoms.remove(away_idx);
            }
            for (gi, qi) in g.iter_mut().zip(&qd) {
                *gi += eta * qi;
            }
        }
        iterations += 1;

        // periodic hygiene against incremental drift
        if iterations % 4_096 == 0 {
            supp.retain(|&j| {
                if x[j] > 0.0 {
                    true
                } else {
                    present[j] = false;
                    false
                }
            });
            let mass: f64 = stable_sum(supp.iter().map(|&j| x[j]));
            for &j in &supp {
                x[j] /= mass;
            }
            atoms.retain(|&(_, alpha)| alpha > ATOM_FLOOR);
            let amass: f64 = stable_sum(atoms.iter().map(|&(_, alpha)| alpha));
            for atom in &mut atoms {
                atom.1 /= amass;
            }
        }
        if iterations % 65_536 == 0 {
            g = phi.to_vec();
            for &j in &supp {
                let cj = column(j);
                let xj = x[j];
                for (gi, qi) in g.iter_mut().zip(&cj) {
                    *gi += xj * qi;
                }
            }
        }
    }

    supp.retain(|&j| x[j] > 0.0);
    let mut masses_supp: Vec<f64> = supp.iter().map(|&j| x[j]).collect();
    normalize_mass(&mut masses_supp);
    let rows: Vec<f64> = supp
        .par_iter()
        .zip(&masses_supp)
        .map(|(&j, &xj)| {
            let row: f64 = supp
                .iter()
                .zip(&masses_supp)
                .map(|(&l, &xl)| -log_kernel(zs[j], zs[l], rs[j].max(rs[l])) * xl)
                .sum();
            xj * row
        })
        .collect();
    let quad = stable_sum(rows);
    let linear = stable_sum(supp.iter().zip(&masses_supp).map(|(&j, &xj)| phi[j] * xj));
    let mut masses = vec![0.0f64; m];
    for (&j, &mass) in supp.iter().zip(&masses_supp) {
        masses[j] = mass;
    }
    Ok(QpSolution {
        masses,
        objective: 0.5 * quad + linear,
    })
}

/// Folds a vertex into the atom list, merging with an existing equal
/// atom so single-node atoms do not pile up.
fn merge_atom(atoms: &mut Vec<(SliceVertex, f64)>, v: SliceVertex, alpha: f64) {
    for (existing, mass) in atoms.iter_mut() {
        if existing.hi == v.hi
            && existing.lo == v.lo
            && (existing.theta - v.theta).abs() <= 1e-12
        {
            *mass += alpha;
            return;
        }
    }
    atoms.push((v, alpha));
}

fn masses_to_measure(
    grid: &Arc<MeasureGrid>,
    masked: &[usize],
    masses: &[f64],
) -> Result<GridMeasure> {
    let mut density = vec![0.0f64; grid.len()];
    for (&gi, &mass) in masked.iter().zip(masses) {
        density[gi] = mass;
    }
    GridMeasure::new(Arc::clone(grid), density)
}

/// Predicts the large-deviation rate of the event
/// `|∫u dμ − ∫u dμ_eq| ≥ ε` by solving the two one-sided problems
/// `min { I(μ) : ±(∫u dμ − ∫u dμ_eq) ≥ ε }` over the simplex of grid
/// measures, each by conditional gradient with the deviation plane as
/// one extra linear constraint.  Returns the smaller infimum and its
/// minimizer; the infimum is the difference of the constrained and
/// unconstrained energies on the same grid, so discretization bias
/// cancels and `ε = 0` gives exactly zero.  The reference drops out of
/// that difference; it only fixes the constant in the reported
/// energies.
pub fn rate_prediction(
    grid: &Arc<MeasureGrid>,
    w: &WeightSpec,
    reference: Reference,
    u: &TestFunction,
    epsilon: f64,
) -> Result<RatePrediction> {
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(LabError::InvalidParameter(format!(
            "deviation threshold {epsilon} must be finite and nonnegative"
        )));
    }
    let masked = grid.masked_indices();
    if masked.is_empty() {
        return Err(LabError::EmptySupport(
            "constraint set covers no grid nodes".into(),
        ));
    }
    let zs: Vec<Complex64> = masked.iter().map(|&i| grid.nodes[i]).collect();
    let rs: Vec<f64> = masked.iter().map(|&i| grid.cell_radius[i]).collect();
    let phi = zs.iter().map(|&z| w.eval(z)).collect::<Result<Vec<f64>>>()?;
    let uv: Vec<f64> = zs.iter().map(|&z| u.eval(z)).collect();

    let eq = constrained_simplex_qp(&zs, &rs, &phi, None, RATE_QP_TOL, RATE_QP_MAX_ITERS)?;
    let equilibrium_mean: f64 = stable_sum(uv.iter().zip(&eq.masses).map(|(&ui, &xi)| ui * xi));
    let equilibrium_energy = eq.objective + reference.energy_offset();

    if epsilon == 0.0 {
        let mu = masses_to_measure(grid, &masked, &eq.masses)?;
        return Ok(RatePrediction {
            inf_value: 0.0,
            side: DeviationSide::TwoSided,
            minimizing_measure: mu,
            equilibrium_mean,
            upper_inf: Some(0.0),
            lower_inf: Some(0.0),
            constrained_energy: equilibrium_energy,
            equilibrium_energy,
        });
    }

    let solve_side = |sign: f64| -> Result<Option<(f64, Vec<f64>)>> {
        let a: Vec<f64> = uv.iter().map(|&v| sign * v).collect();
        let b = sign * equilibrium_mean + epsilon;
        if a.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v)) < b {
            return Ok(None);
        }
        let sol = constrained_simplex_qp(&zs, &rs, &phi, Some((&a, b)), RATE_QP_TOL,
            RATE_QP_MAX_ITERS)?;
        Ok(Some(((sol.objective - eq.objective).max(0.0), sol.masses)))
    };
    let upper = solve_side(1.0)?;
    let lower = solve_side(-1.0)?;

    let (inf_value, side, masses) = match (&upper, &lower) {
        (None, None) => {
            return Err(LabError::InfeasibleDeviation(format!(
                "deviation {epsilon} exceeds the oscillation of {} on the constraint set",
                u.label()
            )))
        }
        (Some((iu, mu)), None) => (*iu, DeviationSide::Upper, mu.clone()),
        (None, Some((il, ml))) => (*il, DeviationSide::Lower, ml.clone()),
        (Some((iu, mu)), Some((il, ml))) => {
            // differences below the solver's gap tolerance are noise: a
            // symmetric weight should report a two-sided optimum
            if (iu - il).abs() <= 10.0 * RATE_QP_TOL * (1.0 + iu.abs()) {
                (*iu, DeviationSide::TwoSided, mu.clone())
            } else if iu < il {
                (*iu, DeviationSide::Upper, mu.clone())
            } else {
                (*il, DeviationSide::Lower, ml.clone())
            }
        }
    };
    Ok(RatePrediction {
        inf_value,
        side,
        minimizing_measure: masses_to_measure(grid, &masked, &masses)?,
        equilibrium_mean,
        upper_inf: upper.map(|(v, _)| v),
        lower_inf: lower.map(|(v, _)| v),
        constrained_energy: inf_value + equilibrium_energy,
        equilibrium_energy,
    })
}

// ---------------------------------------------------------------------
// rate fitting
// ---------------------------------------------------------------------

/// Result of fitting the empirical decay rates against `1/k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RateFit {
    /// `(k, r̂_k)` with `r̂_k = −k⁻² ln(estimate)`, for every usable
    /// (nonzero-estimate) input row.
    pub per_k: Vec<(u32, f64)>,
    /// Intercept of the least-squares line `r̂ = limit + slope·(1/k)`:
    /// the extrapolated rate.
    pub limit: f64,
    pub slope: f64,
    /// Whether `r̂_k` is nondecreasing along the usable rows.
    pub nondecreasing: bool,
}

/// Converts per-`k` deviation-probability estimates into empirical rates
/// `r̂_k = −k⁻² ln(estimate)` and extrapolates them against `1/k` by
/// least squares.  Rows with zero estimates carry no rate information
/// and are dropped; fewer than three usable rows cannot support a fit.
pub fn rate_fit(probabilities: &[f64], k_list: &[u32]) -> Result<RateFit> {
    if probabilities.len() != k_list.len() {
        return Err(LabError::InvalidParameter(format!(
            "{} probabilities against {} degrees",
            probabilities.len(),
            k_list.len()
        )));
    }
    validate_k_list(k_list)?;
    if probabilities
        .iter()
        .any(|&p| !p.is_finite() || !(0.0..=1.0).contains(&p))
    {
        return Err(LabError::InvalidParameter(
            "probabilities must lie in [0, 1]".into(),
        ));
    }
    let per_k: Vec<(u32, f64)> = k_list
        .iter()
        .zip(probabilities)
        .filter(|&(_, &p)| p > 0.0)
        .map(|(&k, &p)| (k, -p.ln() / f64::from(k).powi(2)))
        .collect();
    if per_k.len() < 3 {
        return Err(LabError::InsufficientDecayData(format!(
            "only {} of {} estimates are nonzero; a decay fit needs 3",
            per_k.len(),
            k_list.len()
        )));
    }
    let n = per_k.len() as f64;
    let sx = stable_sum(per_k.iter().map(|&(k, _)| 1.0 / f64::from(k)));
    let sxx = stable_sum(per_k.iter().map(|&(k, _)| (1.0 / f64::from(k)).powi(2)));
    let sy = stable_sum(per_k.iter().map(|&(_, r)| r));
    let sxy = stable_sum(per_k.iter().map(|&(k, r)| r / f64::from(k)));
    let denom = n * sxx - sx * sx;
    let (limit, slope) = if denom.abs() <= 1e-300 {
        (sy / n, 0.0)
    } else {
        let slope = (n * sxy - sx * sy) / denom;
        ((sy - slope * sx) / n, slope)
    };
    let nondecreasing = per_k.windows(2).all(|p| p[1].1 >= p[0].1 - 1e-12);
    Ok(RateFit {
        per_k,
        limit,
        slope,
        nondecreasing,
    })
}

// ---------------------------------------------------------------------
// free-energy curves
// ---------------------------------------------------------------------

/// One degree of a free-energy curve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FreeEnergyRow {
    pub k: u32,
    /// Number of sections (= particles) at this degree.
    pub sections: usize,
    pub ln_z: f64,
    /// `−k⁻² ln Z`.
    pub free_energy: f64,
}

/// A free-energy convergence curve with its extrapolated limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreeEnergyCurve {
    pub rows: Vec<FreeEnergyRow>,
    /// Limit of the correction model `a + b·(ln k)/k + c/k` solved
    /// through the last three degrees.
    pub extrapolated: f64,
    /// Largest absolute misfit of that model on the earlier degrees
    /// (zero when exactly three are given): the fit diagnostic.
    pub fit_residual: f64,
    /// Minimum of the weighted energy over the constraint set, the
    /// predicted limit.
    pub envelope_energy: f64,
    /// `|extrapolated − envelope_energy| / |envelope_energy|`.
    pub relative_error: f64,
    /// Whether the curve is monotone (either direction) in `k`.
    pub monotone: bool,
}

/// Reference quadrature pair used to orthonormalize section bases for
/// partition-function evaluations: a fixed window wide enough for every
/// admissible weight in the laboratory.
fn reference_pair(reference: Reference, k_max: u32) -> Result<(Arc<MeasureGrid>, WeightSpec)> {
    match reference {
        Reference::FubiniStudy => Ok((
            Arc::new(fubini_study_reference(4.0, 96)?),
            WeightSpec::fubini_study(),
        )),
        Reference::LogPlus => {
            let nodes = 256.max(4 * (k_max + 1));
            let grid = build_grid(
                Region::Circle {
                    center: Complex64::new(0.0, 0.0),
                    radius: 1.0,
                },
                nodes,
                MeasureKind::Arclength,
            )?;
            Ok((Arc::new(grid), WeightSpec::log_plus()))
        }
    }
}

/// Computes `−k⁻² ln Z` for every degree in `k_list` (exact partition
/// function through the weighted Gram determinant), extrapolates the
/// curve, and compares the limit against the envelope energy of the
/// constraint set.
///
/// The extrapolation solves `F(k) = a + b·(ln k)/k + c/k` through the
/// last three degrees and reports `a`; the observed leading correction
/// of these ensembles is `(ln k)/k`, and a pure `1/k` model leaves
/// errors several times larger on every built-in weight.  The misfit of
/// the solved model on the earlier degrees is returned as the fit
/// diagnostic.
pub fn free_energy_curve(
    grid: &Arc<MeasureGrid>,
    w: &WeightSpec,
    reference: Reference,
    k_list: &[u32],
) -> Result<FreeEnergyCurve> {
    validate_k_list(k_list)?;
    if k_list.len() < 3 {
        return Err(LabError::InvalidParameter(format!(
            "free-energy extrapolation needs at least three degrees, got {}",
            k_list.len()
        )));
    }
    let (ref_grid, ref_weight) = reference_pair(reference, *k_list.last().expect("nonempty"))?;
    let rows: Vec<FreeEnergyRow> = k_list
        .par_iter()
        .map(|&k| {
            let basis = orthonormalize(&ref_grid, &ref_weight, k)?;
            let e = EnsembleSpec::new(basis, w.clone(), Arc::clone(grid))?;
            let ln_z = partition_function_exact(&e)?;
            Ok(FreeEnergyRow {
                k,
                sections: k as usize + 1,
                ln_z,
                free_energy: -ln_z / f64::from(k).powi(2),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let tail = &rows[rows.len() - 3..];
    let model_row = |r: &FreeEnergyRow| {
        let kf = f64::from(r.k);
        [1.0, kf.ln() / kf, 1.0 / kf]
    };
    let design = Matrix3::from_fn(|i, j| model_row(&tail[i])[j]);
    let values = Vector3::from_fn(|i, _| tail[i].free_energy);
    let coeffs = design.lu().solve(&values).ok_or_else(|| {
        LabError::InvalidParameter(
            "degenerate extrapolation system; degrees too close together".into(),
        )
    })?;
    let extrapolated = coeffs[0];
    let fit_residual = rows[..rows.len() - 3]
        .iter()
        .map(|r| {
            let m = model_row(r);
            (coeffs[0] * m[0] + coeffs[1] * m[1] + coeffs[2] * m[2] - r.free_energy).abs()
        })
        .fold(0.0, f64::max);
    let diffs: Vec<f64> = rows
        .windows(2)
        .map(|p| p[1].free_energy - p[0].free_energy)
        .collect();
    let monotone =
        diffs.iter().all(|&d| d >= -1e-12) || diffs.iter().all(|&d| d <= 1e-12);
    let env = envelope_energy(w, grid, reference)?;
    Ok(FreeEnergyCurve {
        rows,
        extrapolated,
        fit_residual,
        envelope_energy: env,
        relative_error: (extrapolated - env).abs() / env.abs().max(1e-12),
        monotone,
    })
}

// ---------------------------------------------------------------------
// Fekete ascent
// ---------------------------------------------------------------------

/// Best configuration found by [`fekete_ascent`], with its ascent
/// history.
#[derive(Debug, Clone)]
pub struct FeketeOutcome {
    pub configuration: Configuration,
    /// `ln |det S|²` at the returned configuration, weight factors
    /// included, with the section basis expressed in the fixed round
    /// reference gauge and the `N·ln N` cell-concentration factor
    /// removed, so that `k⁻²·objective` estimates the negative envelope
    /// energy directly (both adjustments are configuration-independent
    /// constants; see [`fekete_ascent`]).
    pub objective: f64,
    /// Objective after the initial draw and after each accepted move of
    /// the winning restart, in the same normalization; nondecreasing by
    /// construction.
    pub trace: Vec<f64>,
    /// Full sweeps used by the winning restart.
    pub sweeps: usize,
    pub restarts: usize,
}

/// Maximizes the weighted determinant `ln |det S(x)|² − k Σφ(x_j)` over
/// configurations of masked grid nodes by cyclic single-point ascent:
/// each slot in turn scans every node for the best replacement, using
/// the determinant-ratio identity (replacing column `j` of `M` by `v`
/// scales the determinant by `(M⁻¹v)_j`), until a full sweep makes no
/// improving move.  Returns the best over `restarts` random starts.
///
/// The argmax does not depend on the basis gauge, but the objective
/// value shifts by a constant under a basis change, so the reported
/// objective is normalized: the determinant is re-expressed in the basis
/// orthonormal against the fixed round reference pair, and `N·ln N` is
/// subtracted.  The second term is the concentration factor a maximizing
/// configuration gains by pinning each particle to its own `1/N`-mass
/// cell; on the unit circle with the flat weight it accounts for the
/// whole finite-`k` excess (the regular `N`-gon has `|det V|² = N^N` in
/// the arclength-orthonormal monomial basis).  With both adjustments
/// `k⁻²·objective` increases toward the negative envelope energy of the
/// constraint set from below as `k` grows.
pub fn fekete_ascent(
    grid: &Arc<MeasureGrid>,
    w: &WeightSpec,
    k: u32,
    restarts: usize,
    seed: u64,
) -> Result<FeketeOutcome> {
    if k == 0 {
        return Err(LabError::InvalidParameter(
            "Fekete ascent needs degree at least 1".into(),
        ));
    }
    if restarts == 0 {
        return Err(LabError::InvalidParameter(
            "Fekete ascent needs at least one restart".into(),
        ));
    }
    let basis = orthonormalize(grid, w, k)?;
    let n = basis.n();
    let masked = grid.masked_indices();
    if masked.len() < n {
        return Err(LabError::InvalidParameter(format!(
            "constraint set keeps {} nodes but the configuration needs {n}",
            masked.len()
        )));
    }
    // weighted section values at every masked node: row m is the matrix
    // column a configuration would use for a particle at that node
    let mut wmat = DMatrix::<Complex64>::zeros(masked.len(), n);
    for (r, &gi) in masked.iter().enumerate() {
        let z = grid.nodes[gi];
        let damp = (-0.5 * f64::from(k) * w.eval(z)?).exp();
        if !damp.is_finite() {
            return Err(LabError::WeightOverflow(format!(
                "weight factor overflows at node {z}"
            )));
        }
        let s = basis.section_values(z);
        for i in 0..n {
            wmat[(r, i)] = s[i] * damp;
        }
    }

    let mut best: Option<(f64, Vec<usize>, Vec<f64>, usize)> = None;
    for restart in 0..restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed(seed, k, restart as u64));
        let mut idx: Vec<usize> = Vec::new();
        let mut m = DMatrix::<Complex64>::zeros(n, n);
        let mut objective = f64::NEG_INFINITY;
        for _ in 0..16 {
            idx = (0..masked.len()).choose_multiple(&mut rng, n);
            for (j, &row) in idx.iter().enumerate() {
                m.set_column(j, &wmat.row(row).transpose());
            }
            objective = log_abs_det_sq(m.clone());
            if objective.is_finite() {
                break;
            }
        }
        if !objective.is_finite() {
            return Err(LabError::KernelRank(
                "no nonsingular starting configuration found on the constraint set".into(),
            ));
        }
        let mut trace = vec![objective];
        let mut sweeps = 0usize;
        while sweeps < FEKETE_MAX_SWEEPS {
            let mut improved = false;
            for j in 0..n {
                // row j of M⁻¹, as the solution of Mᵀ r = e_j
                let mut ej = DVector::<Complex64>::zeros(n);
                ej[j] = Complex64::new(1.0, 0.0);
                let Some(r) = m.transpose().lu().solve(&ej) else {
                    break;
                };
                let scores = &wmat * &r;
                let (best_row, best_ratio) = scores
                    .iter()
                    .map(|v| v.norm_sqr())
                    .enumerate()
                    .max_by(|(_, a), (_, b)| a.total_cmp(b))
                    .expect("nonempty node set");
                if best_ratio > 1.0 + FEKETE_IMPROVE_MARGIN {
                    idx[j] = best_row;
                    m.set_column(j, &wmat.row(best_row).transpose());
                    objective += best_ratio.ln();
                    trace.push(objective);
                    improved = true;
                }
            }
            sweeps += 1;
            if !improved {
                break;
            }
        }
        let exact = log_abs_det_sq(m.clone());
        if best.as_ref().map_or(true, |(b, ..)| exact > *b) {
            best = Some((exact, idx, trace, sweeps));
        }
    }
    let (objective, idx, trace, sweeps) = best.expect("at least one restart ran");
    let points: Vec<Complex64> = idx.iter().map(|&r| grid.nodes[masked[r]]).collect();
    // gauge normalization: ln|det S|² in the round-reference basis equals
    // the self-orthonormal value plus ln det G, where G is the Gram of
    // the reference basis under the target data — exactly the determinant
    // factor of the exact partition function.
    let (ref_grid, ref_weight) = reference_pair(Reference::FubiniStudy, k)?;
    let ref_basis = orthonormalize(&ref_grid, &ref_weight, k)?;
    let ref_ensemble = EnsembleSpec::new(ref_basis, w.clone(), Arc::clone(grid))?;
    let nf = n as f64;
    let shift = partition_function_exact(&ref_ensemble)? - ln_factorial(n) - nf * nf.ln();
    Ok(FeketeOutcome {
        configuration: Configuration { points, k },
        objective: objective + shift,
        trace: trace.into_iter().map(|v| v + shift).collect(),
        sweeps,
        restarts,
    })
}

// ---------------------------------------------------------------------
// localization
// ---------------------------------------------------------------------

/// Estimates the ensemble mass of the localization set
/// `{c : k⁻² ln γ(c) ≥ −1/k}`: the fraction of exact-sampler draws whose
/// log-density (normalized with the exactly known `ln Z`) clears the
/// threshold.  As `k` grows the density concentrates and the fraction
/// approaches 1.
pub fn localization_mass(e: &EnsembleSpec, n_samples: usize, seed: u64) -> Result<f64> {
    if e.k() == 0 {
        return Err(LabError::InvalidParameter(
            "localization mass needs degree at least 1".into(),
        ));
    }
    if n_samples < 1_000 {
        return Err(LabError::InvalidParameter(format!(
            "{n_samples} samples are too few for a localization estimate; need at least 1000"
        )));
    }
    let ln_z = partition_function_exact(e)?;
    let threshold = ln_z - f64::from(e.k());
    let sampler = ExactSampler::new(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let c = sampler.draw(&mut rng)?;
        if log_joint_density(e, &c)? >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_samples as f64)
}

// ---------------------------------------------------------------------
// plain-text result tables
// ---------------------------------------------------------------------

/// Renders deviation rows as CSV, one row per degree.
pub fn deviation_csv(rows: &[DeviationRow]) -> String {
    let mut out = String::from("k,n_samples,hits,estimate,wilson_low,wilson_high\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k, r.n_samples, r.hits, r.estimate, r.wilson_low, r.wilson_high
        ));
    }
    out
}

/// Renders a free-energy curve as CSV, one row per degree.
pub fn free_energy_csv(curve: &FreeEnergyCurve) -> String {
    let mut out = String::from("k,sections,ln_z,free_energy\n");
    for r in &curve.rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.k, r.sections, r.ln_z, r.free_energy
        ));
    }
    out
}
