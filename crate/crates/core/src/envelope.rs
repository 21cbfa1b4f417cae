//! Radial obstacle envelopes, curvature measures, and the quadratic
//! energy pairing between radial potentials.
//!
//! Rotation-invariant potentials on the chart reduce to functions of
//! `t = ln|z|²`.  Under that reduction:
//!
//! * a potential is *admissible* iff its profile is convex with slopes in
//!   `[0, 1]` (positivity of curvature plus the unit-mass normalization of
//!   the underlying geometry);
//! * its curvature measure is `f''(t) dt ⊗ (uniform angle)`, with total
//!   mass equal to the slope range — exactly 1 for admissible profiles
//!   once the constant-slope arms at `t = ∓∞` (slopes 0 and 1) are
//!   accounted for;
//! * the largest admissible minorant of an obstacle `f` on a constraint
//!   window is the upper envelope of all lines `m·t + c`, `m ∈ [0,1]`,
//!   `c ≤ min (f − m t)` over the window.
//!
//! Discretely, every quantity here is exact piecewise-linear calculus on
//! the profile's node values.  The energy pairing uses the summed-by-parts
//! form `∫u dMA(v) = u(t_max) − Σ_i s_i(u) s_i(v) Δt_i` (with the arm
//! convention above), which makes the bifunctional identities — gauge
//! shift, antisymmetric cocycle, concavity in each slot — hold to floating
//! rounding rather than to quadrature tolerance.

use crate::error::{LabError, Result};
use crate::weights::WeightSpec;

/// Tolerance for accepting a profile as convex ("curvature positive
/// within quadrature noise"): chord slopes may decrease by at most this
/// much per node.
const CONVEXITY_TOL: f64 = 1e-10;

/// Tolerance on the admissible slope window `[0, 1]`.
const SLOPE_TOL: f64 = 1e-9;

/// A radial potential profile: values `f(t_i)` on an increasing grid of
/// `t = ln|z|²` nodes.  Between nodes the function is linear; beyond the
/// grid it continues with constant slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialProfile {
    pub t: Vec<f64>,
    pub f: Vec<f64>,
}

/// Atoms of a radial curvature measure on the node set of a profile.
/// Total mass 1 for admissible profiles (arm convention: slope 0 at
/// `t = -∞`, slope 1 at `t = +∞`).
#[derive(Debug, Clone)]
pub struct RadialMeasure {
    pub t: Vec<f64>,
    pub mass: Vec<f64>,
}

impl RadialMeasure {
    pub fn total_mass(&self) -> f64 {
        crate::weights::stable_sum(self.mass.iter().copied())
    }
}

impl RadialProfile {
    /// Samples `g` on `n` equispaced nodes spanning `[t_lo, t_hi]`.
    pub fn from_fn(t_lo: f64, t_hi: f64, n: usize, g: impl Fn(f64) -> f64) -> Result<Self> {
        if !(t_hi > t_lo) || n < 3 {
            return Err(LabError::InvalidParameter(format!(
                "profile window [{t_lo}, {t_hi}] with {n} nodes is degenerate"
            )));
        }
        let dt = (t_hi - t_lo) / (n - 1) as f64;
        let t: Vec<f64> = (0..n).map(|i| t_lo + i as f64 * dt).collect();
        let f: Vec<f64> = t.iter().map(|&ti| g(ti)).collect();
        if f.iter().any(|v| !v.is_finite()) {
            return Err(LabError::WeightOverflow(
                "profile sample is not finite on the requested window".into(),
            ));
        }
        Ok(RadialProfile { t, f })
    }

    /// Samples the radial profile of a rotation-invariant weight.
    pub fn from_weight(w: &WeightSpec, t_lo: f64, t_hi: f64, n: usize) -> Result<Self> {
        let radial = w.radial_profile().ok_or_else(|| {
            LabError::InvalidParameter(format!(
                "weight `{}` declares no radial profile",
                w.label()
            ))
        })?;
        let radial = std::sync::Arc::clone(radial);
        RadialProfile::from_fn(t_lo, t_hi, n, |t| radial(t))
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Piecewise-linear evaluation with constant-slope extension beyond
    /// the node range.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.len();
        if t <= self.t[0] {
            let s = self.chord(0);
            return self.f[0] + s * (t - self.t[0]);
        }
        if t >= self.t[n - 1] {
            let s = self.chord(n - 2);
            return self.f[n - 1] + s * (t - self.t[n - 1]);
        }
        let j = match self.t.partition_point(|&x| x <= t) {
            0 => 0,
            p => p - 1,
        };
        let s = self.chord(j);
        self.f[j] + s * (t - self.t[j])
    }

    /// Slope of the chord between nodes `i` and `i+1`.
    #[inline]
    fn chord(&self, i: usize) -> f64 {
        (self.f[i + 1] - self.f[i]) / (self.t[i + 1] - self.t[i])
    }

    /// All chord slopes (`len() - 1` of them).
    pub fn chord_slopes(&self) -> Vec<f64> {
        (0..self.len() - 1).map(|i| self.chord(i)).collect()
    }

    /// The profile shifted by a constant.
    pub fn shifted(&self, c: f64) -> Self {
        RadialProfile {
            t: self.t.clone(),
            f: self.f.iter().map(|&v| v + c).collect(),
        }
    }

    /// Checks admissibility: convex (chord slopes nondecreasing within
    /// tolerance) with slopes in `[0, 1]` within tolerance.
    pub fn check_admissible(&self) -> Result<()> {
        let slopes = self.chord_slopes();
        for pair in slopes.windows(2) {
            if pair[1] < pair[0] - CONVEXITY_TOL {
                return Err(LabError::NotPsh(format!(
                    "profile is not convex: slope drops from {} to {}",
                    pair[0], pair[1]
                )));
            }
        }
        for &s in &slopes {
            if !(-SLOPE_TOL..=1.0 + SLOPE_TOL).contains(&s) {
                return Err(LabError::NotPsh(format!(
                    "profile slope {s} leaves the admissible window [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Verifies both profiles live on the same node grid.
    fn check_same_grid(&self, other: &Self) -> Result<()> {
        if self.len() != other.len()
            || self
                .t
                .iter()
                .zip(&other.t)
                .any(|(a, b)| (a - b).abs() > 1e-12)
        {
            return Err(LabError::InvalidParameter(
                "profiles live on different node grids".into(),
            ));
        }
        Ok(())
    }
}

/// Half-width of the default laboratory window in `t = ln|z|²`: wide
/// enough that admissible-profile slopes reach their asymptotic values
/// 0 and 1 to ~1e-20 before the boundary.
pub const LAB_T_SPAN: f64 = 46.0;

/// Default node count of the laboratory window.  Odd, so that `t = 0`
/// (the unit circle) is itself a node: the built-in scenarios all switch
/// regime exactly there, and an on-grid switch point removes the leading
/// discretization error of their envelopes.
pub const LAB_T_NODES: usize = 32_769;

/// Largest convex function with slopes in `[0, 1]` lying below the
/// obstacle `p` on the window `e_interval` (intersected with the node
/// grid), evaluated on the full node grid of `p`.
///
/// Equivalent to the sup of all admissible affine minorants, computed in
/// closed form from the lower convex hull of the constrained nodes: a
/// slope-0 arm left of the hull's minimum vertex, the hull polyline while
/// its slopes stay in `[0, 1]`, and a slope-1 arm from the vertex where
/// the hull slope exceeds 1 (the minimizer of `f_i − t_i`).  Everything
/// is evaluated in point-slope form from obstacle values — no line
/// intersections — so the construction stays exact even for profiles
/// spanning hundreds of orders of magnitude.
pub fn envelope_radial(p: &RadialProfile, e_interval: (f64, f64)) -> Result<RadialProfile> {
    let (lo, hi) = e_interval;
    if !(lo <= hi) {
        return Err(LabError::EmptySupport(format!(
            "constraint window [{lo}, {hi}] is empty"
        )));
    }
    let n = p.len();
    if lo < p.t[0] - 1e-12 || hi > p.t[n - 1] + 1e-12 {
        return Err(LabError::InvalidParameter(format!(
            "constraint window [{lo}, {hi}] leaves the node range [{}, {}]",
            p.t[0],
            p.t[n - 1]
        )));
    }
    if p.f.iter().any(|v| !v.is_finite()) {
        return Err(LabError::WeightOverflow(
            "obstacle is not finite on its nodes".into(),
        ));
    }
    let mut constrained: Vec<usize> = (0..n).filter(|&i| p.t[i] >= lo && p.t[i] <= hi).collect();
    if constrained.is_empty() {
        // a window thinner than the node spacing: snap to the nearest
        // node, the grid-level picture of a point constraint
        let mid = 0.5 * (lo + hi);
        let nearest = (0..n)
            .min_by(|&i, &j| {
                (p.t[i] - mid).abs().total_cmp(&(p.t[j] - mid).abs())
            })
            .unwrap();
        constrained.push(nearest);
    }

    // lower convex hull of the constrained nodes (monotone chain; nodes
    // are already sorted by t)
    let mut hull: Vec<usize> = Vec::with_capacity(constrained.len());
    for &i in &constrained {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // cross > 0 ⟺ b strictly below the chord a→i, a genuine
            // lower-hull vertex; on or above the chord it is dropped
            let cross =
                (p.t[b] - p.t[a]) * (p.f[i] - p.f[a]) - (p.f[b] - p.f[a]) * (p.t[i] - p.t[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let h = hull.len();
    let slope = |j: usize| -> f64 {
        (p.f[hull[j + 1]] - p.f[hull[j]]) / (p.t[hull[j + 1]] - p.t[hull[j]])
    };
    // first vertex with outgoing slope > 0: left of it the envelope is the
    // constant support line at the hull minimum
    let mut a = h - 1;
    for j in 0..h - 1 {
        if slope(j) > 0.0 {
            a = j;
            break;
        }
    }
    // first vertex at or after `a` with outgoing slope > 1: right of it
    // the envelope is the slope-1 support line (tangent at the minimizer
    // of f_i − t_i)
    let mut b = h - 1;
    for j in a..h - 1 {
        if slope(j) > 1.0 {
            b = j;
            break;
        }
    }
    let (ta, fa) = (p.t[hull[a]], p.f[hull[a]]);
    let (tb, fb) = (p.t[hull[b]], p.f[hull[b]]);

    let mut f_env = Vec::with_capacity(n);
    let mut seg = a;
    for &t in &p.t {
        let v = if t <= ta {
            fa
        } else if t >= tb {
            fb + (t - tb)
        } else {
            while seg + 1 < b && p.t[hull[seg + 1]] <= t {
                seg += 1;
            }
            p.f[hull[seg]] + slope(seg) * (t - p.t[hull[seg]])
        };
        f_env.push(v);
    }
    Ok(RadialProfile {
        t: p.t.clone(),
        f: f_env,
    })
}

/// Curvature measure of an admissible profile: the chord-slope kink at
/// each interior node, plus the arm atoms at the boundary nodes that
/// connect the first chord slope down to 0 and the last chord slope up
/// to 1.  Total mass is exactly 1 by telescoping.
pub fn radial_curvature(p: &RadialProfile) -> Result<RadialMeasure> {
    p.check_admissible()?;
    let n = p.len();
    let slopes = p.chord_slopes();
    let mut mass = vec![0.0; n];
    mass[0] = slopes[0];
    for i in 1..n - 1 {
        mass[i] = slopes[i] - slopes[i - 1];
    }
    mass[n - 1] = 1.0 - slopes[n - 2];
    Ok(RadialMeasure {
        t: p.t.clone(),
        mass,
    })
}

/// Curvature atoms of a convex profile at interior nodes only — no arm
/// atoms, so the total mass equals the slope range
/// `s(t_max) − s(t_min)` of the profile itself.  This is the portion of
/// the curvature that actually lives inside the node window, the right
/// object to push onto a planar grid.
pub fn radial_curvature_interior(p: &RadialProfile) -> Result<RadialMeasure> {
    let n = p.len();
    let slopes = p.chord_slopes();
    for pair in slopes.windows(2) {
        if pair[1] < pair[0] - CONVEXITY_TOL {
            return Err(LabError::NotPsh(format!(
                "profile is not convex: slope drops from {} to {}",
                pair[0], pair[1]
            )));
        }
    }
    let mut mass = vec![0.0; n];
    for i in 1..n - 1 {
        mass[i] = (slopes[i] - slopes[i - 1]).max(0.0);
    }
    Ok(RadialMeasure {
        t: p.t.clone(),
        mass,
    })
}

/// Pairing `∫ v dμ` of node values against a radial measure on the same
/// grid.
pub fn radial_pairing(v: &RadialProfile, mu: &RadialMeasure) -> Result<f64> {
    if v.len() != mu.t.len() {
        return Err(LabError::InvalidParameter(
            "profile and measure node grids disagree".into(),
        ));
    }
    Ok(crate::weights::stable_sum(
        v.f.iter().zip(&mu.mass).map(|(&vi, &mi)| vi * mi),
    ))
}

/// Pairing `∫ u dMA(v)` in summed-by-parts form: exactly equals
/// `radial_pairing(u, radial_curvature(v))` in exact arithmetic, but
/// exposes the symmetric structure `u(t_max) − Σ s(u)s(v)Δt` that the
/// energy identities rely on.
#[cfg(test)]
fn pairing_by_parts(u: &RadialProfile, v: &RadialProfile) -> f64 {
    let n = u.len();
    let mut cross = 0.0;
    for i in 0..n - 1 {
        let dt = u.t[i + 1] - u.t[i];
        cross += (u.f[i + 1] - u.f[i]) * (v.f[i + 1] - v.f[i]) / dt;
    }
    u.f[n - 1] - cross
}

/// The energy bifunctional
/// `ℰ[ψ₁, ψ₂] = ½ ∫ (ψ₁ − ψ₂) d(MA ψ₁ + MA ψ₂)`
/// for admissible radial profiles on a common grid.
///
/// In summed-by-parts form this is
/// `ψ₁(t_max) − ψ₂(t_max) − ½ Σ (s_i(ψ₁)² − s_i(ψ₂)²) Δt_i`,
/// from which the structural identities are immediate: `ℰ[ψ,ψ] = 0`,
/// `ℰ[ψ+c, ψ] = c`, the cocycle `ℰ[a,b]+ℰ[b,c]+ℰ[c,a] = 0`, and concavity
/// along affine paths in the first slot (the quadratic part is negative
/// semidefinite).
pub fn energy_radial(psi1: &RadialProfile, psi2: &RadialProfile) -> Result<f64> {
    psi1.check_same_grid(psi2)?;
    psi1.check_admissible()?;
    psi2.check_admissible()?;
    let n = psi1.len();
    let mut quad = 0.0;
    for i in 0..n - 1 {
        let dt = psi1.t[i + 1] - psi1.t[i];
        let s1 = (psi1.f[i + 1] - psi1.f[i]) / dt;
        let s2 = (psi2.f[i + 1] - psi2.f[i]) / dt;
        quad += (s1 * s1 - s2 * s2) * dt;
    }
    Ok(psi1.f[n - 1] - psi2.f[n - 1] - 0.5 * quad)
}

/// Report of [`envelope_monotone_check`].
#[derive(Debug, Clone)]
pub struct MonotoneReport {
    /// Largest pointwise increase of successive envelopes (0 for a
    /// genuinely decreasing family).
    pub max_envelope_increase: f64,
    /// For each test function, `|⟨MA env_j, v⟩ − ⟨MA env_last, v⟩|` per
    /// step: weak convergence of the curvature measures shows up as decay
    /// of these drifts.
    pub pairing_drift: Vec<Vec<f64>>,
}

impl MonotoneReport {
    /// Maximum violation of envelope monotonicity.
    pub fn max_violation(&self) -> f64 {
        self.max_envelope_increase
    }
}

/// Verifies that the envelope operator respects a decreasing family of
/// obstacles: envelopes must decrease pointwise, and their curvature
/// measures must converge weakly (drifts of pairings against a bounded
/// radial test panel).
pub fn envelope_monotone_check(
    obstacles: &[RadialProfile],
    e_interval: (f64, f64),
) -> Result<MonotoneReport> {
    if obstacles.len() < 2 {
        return Err(LabError::InvalidParameter(
            "need at least two obstacles to check monotonicity".into(),
        ));
    }
    for w in obstacles.windows(2) {
        w[0].check_same_grid(&w[1])?;
        let rising = w[0]
            .f
            .iter()
            .zip(&w[1].f)
            .map(|(&a, &b)| b - a)
            .fold(f64::NEG_INFINITY, f64::max);
        if rising > 1e-12 {
            return Err(LabError::NotMonotone(format!(
                "obstacle sequence increases by {rising} at some node"
            )));
        }
    }
    let envelopes: Vec<RadialProfile> = obstacles
        .iter()
        .map(|p| envelope_radial(p, e_interval))
        .collect::<Result<_>>()?;
    let mut max_rise = 0.0f64;
    for w in envelopes.windows(2) {
        let rise = w[0]
            .f
            .iter()
            .zip(&w[1].f)
            .map(|(&a, &b)| b - a)
            .fold(f64::NEG_INFINITY, f64::max);
        max_rise = max_rise.max(rise.max(0.0));
    }
    // bounded radial test panel: total mass, a sigmoidal coordinate, and a
    // capped version of |z|²
    let panel: [Box<dyn Fn(f64) -> f64>; 3] = [
        Box::new(|_| 1.0),
        Box::new(f64::tanh),
        Box::new(|t: f64| t.exp().min(4.0)),
    ];
    let measures: Vec<RadialMeasure> = envelopes
        .iter()
        .map(radial_curvature)
        .collect::<Result<_>>()?;
    let grid = &envelopes[0].t;
    let mut pairing_drift = Vec::with_capacity(panel.len());
    for v in &panel {
        let pairings: Vec<f64> = measures
            .iter()
            .map(|m| {
                crate::weights::stable_sum(
                    grid.iter().zip(&m.mass).map(|(&t, &mass)| v(t) * mass),
                )
            })
            .collect();
        let last = *pairings.last().unwrap();
        pairing_drift.push(pairings.iter().map(|&p| (p - last).abs()).collect());
    }
    Ok(MonotoneReport {
        max_envelope_increase: max_rise,
        pairing_drift,
    })
}
