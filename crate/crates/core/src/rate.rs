//! Entropy, total energy, and the rate value of a measure: Green-kernel
//! double sums, a Dirichlet-form cross check, Legendre upper bounds
//! through envelope energies, and the assembled [`EnergyReport`].
//!
//! Conventions.  The reference self-energy constant vanishes for both
//! built-in references (which is why this module accepts only the two
//! [`Reference`] variants), so for a probability measure `μ`:
//!
//! * entropy      `𝒮[μ] = ½ ∬ g₀(z, w) dμ(z) dμ(w)`,
//! * total energy `J[μ] = −𝒮[μ] + ∫ (φ − φ₀) dμ`,
//! * rate value   `I[μ] = J[μ] − ℰ[P_Eφ, φ₀]`,
//!
//! where `g₀(z, w) = ln|z−w|² − φ₀(z) − φ₀(w) + C'` is the reference
//! Green kernel and `ℰ[P_Eφ, φ₀]` the envelope energy of the weight over
//! the constraint set.  `I` is nonnegative up to discretization noise and
//! vanishes exactly at the equilibrium measure.
//!
//! Extended reals: entropy, `J`, and `I` may be infinite.  They are
//! carried as `f64` with the IEEE infinities as the honest states; any
//! computed entropy below [`ENTROPY_CUTOFF`] is reported as `−∞`.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envelope::{
    energy_radial, envelope_radial, RadialMeasure, RadialProfile, LAB_T_NODES, LAB_T_SPAN,
};
use crate::equilibrium::{dirichlet_form, log_kernel, potential_on_grid, GridMeasure};
use crate::error::{LabError, Result};
use crate::weights::{
    build_grid, fubini_study_reference, stable_sum, MeasureGrid, MeasureKind, Reference, Region,
    WeightSpec,
};

/// Entropies below this value are reported as `−∞` (the degenerate state
/// of measures charging sets of vanishing capacity).
pub const ENTROPY_CUTOFF: f64 = -1e6;

/// Floor applied to `|z|²` before taking logarithms, so a node at the
/// origin maps to a very negative but finite `t`.
const NORM_SQR_FLOOR: f64 = 1e-300;

/// Lattice step of the internal window on which the Dirichlet-form route
/// evaluates the potential.
const DIRICHLET_STEP: f64 = 0.05;

/// `t = ln|z|²` coordinate of a node, finite even at the origin.
fn node_t(z: Complex64) -> f64 {
    z.norm_sqr().max(NORM_SQR_FLOOR).ln()
}

fn apply_cutoff(s: f64) -> f64 {
    if s < ENTROPY_CUTOFF {
        f64::NEG_INFINITY
    } else {
        s
    }
}

/// Which evaluation route produced the entropy figure of a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyRoute {
    /// Half double sum of the reference Green kernel over the measure.
    #[serde(rename = "green-double-integral")]
    GreenDoubleIntegral,
    /// `−½ ∫ du_μ ∧ d^c u_μ` through the discrete Dirichlet form.
    #[serde(rename = "dirichlet-form")]
    DirichletForm,
    /// Infimum of `∫(ψ−φ₀)dμ − ℰ[Pψ]` over a panel of admissible weights.
    #[serde(rename = "legendre-inf")]
    LegendreInf,
}

impl EntropyRoute {
    /// Stable tag used in reports and file formats.
    pub fn label(self) -> &'static str {
        match self {
            EntropyRoute::GreenDoubleIntegral => "green-double-integral",
            EntropyRoute::DirichletForm => "dirichlet-form",
            EntropyRoute::LegendreInf => "legendre-inf",
        }
    }
}

/// Serde helpers for extended-real fields: finite values serialize as
/// numbers, infinities as the strings `"inf"` / `"-inf"` (bare JSON has
/// no literal for them).
mod extended_real {
    use serde::de::{self, Visitor};
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else if *v == f64::NEG_INFINITY {
            s.serialize_str("-inf")
        } else {
            Err(serde::ser::Error::custom("NaN in an extended-real field"))
        }
    }

    struct ExtendedRealVisitor;

    impl Visitor<'_> for ExtendedRealVisitor {
        type Value = f64;

        fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.write_str("a number or the string \"inf\"/\"-inf\"")
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<f64, E> {
            match v {
                "inf" | "+inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                other => Err(de::Error::custom(format!(
                    "`{other}` is not an extended-real value"
                ))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        d.deserialize_any(ExtendedRealVisitor)
    }
}

/// The decomposition of a measure's rate value.
///
/// Identities (exact by construction, up to floating-point rounding):
/// `J = −entropy + linear_term` and `I = J − envelope_energy`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    /// `𝒮[μ]`; `−∞` for degenerate measures.
    #[serde(with = "extended_real")]
    pub entropy: f64,
    /// `∫ (φ − φ₀) dμ`.
    pub linear_term: f64,
    /// `ℰ[P_Eφ, φ₀]`, the minimum of `J` over probability measures on the
    /// constraint set.
    pub envelope_energy: f64,
    /// `J[μ] = −entropy + linear_term`; `+∞` when the entropy is `−∞`.
    #[serde(rename = "J", with = "extended_real")]
    pub j: f64,
    /// `I[μ] = J[μ] − envelope_energy`.
    #[serde(rename = "I", with = "extended_real")]
    pub i: f64,
    /// Route that produced the entropy figure.
    pub route: EntropyRoute,
}

/// Entropy by the Green-kernel double sum:
/// `𝒮[μ] = ½ ΣΣ g₀(z_i, z_j) m_i m_j` over the support of `μ`, with the
/// kernel's short-distance clamp regularizing the diagonal.  Values below
/// [`ENTROPY_CUTOFF`] are reported as `−∞`.
pub fn entropy_green(mu: &GridMeasure, reference: Reference) -> Result<f64> {
    mu.validate()?;
    let supp = mu.support_indices();
    if supp.is_empty() {
        return Err(LabError::EmptySupport("measure carries no mass".into()));
    }
    let pts: Vec<(Complex64, f64, f64)> = supp
        .iter()
        .map(|&i| (mu.grid.nodes[i], mu.grid.cell_radius[i], mu.density[i]))
        .collect();
    // ½ΣΣ g₀ m m = ½ΣΣ (clamped ln) m m − ∫φ₀dμ + C'/2: the reference
    // terms are hoisted out of the pair loop, leaving one log per pair
    let ref_mean = stable_sum(pts.iter().map(|&(z, _, m)| reference.eval(z) * m));
    // parallel over rows, ordered reduction: scheduler-independent result
    let rows: Vec<f64> = pts
        .par_iter()
        .map(|&(z, r, m)| {
            let row: f64 = pts
                .iter()
                .map(|&(w, rw, mw)| log_kernel(z, w, r.max(rw)) * mw)
                .sum();
            m * row
        })
        .collect();
    let s = 0.5 * stable_sum(rows) - ref_mean + 0.5 * reference.green_constant();
    Ok(apply_cutoff(s))
}

/// Quadrature grid for the reference measure `ω₀`, used to normalize
/// potentials (the normalization drops out of every Dirichlet form).
fn reference_quadrature(reference: Reference) -> Result<MeasureGrid> {
    match reference {
        Reference::FubiniStudy => fubini_study_reference(4.0, 48),
        Reference::LogPlus => build_grid(
            Region::Circle {
                center: Complex64::new(0.0, 0.0),
                radius: 1.0,
            },
            128,
            MeasureKind::Arclength,
        ),
    }
}

/// Number of moments kept in the closed-form far-field correction of the
/// Dirichlet integral: the truncation error is of order
/// `(supp radius / window radius)^(2·(MULTIPOLE_ORDER+1))`, below 1e-13
/// for the 2.5× window margin used here.
const MULTIPOLE_ORDER: usize = 16;

/// Entropy by the Dirichlet-form route: `𝒮[μ] = −½ ∫ du_μ ∧ d^c u_μ`.
///
/// The potential is evaluated on an internal lattice window wide enough
/// to contain the measure's support with a 2.5× margin; the discrete
/// Dirichlet form on the window is extrapolated to zero lattice step from
/// two steps (`h` and `2h`), which cancels the leading `O(h²)` difference
/// error for smooth potentials.  The window misses only the far tail of
/// the integral, where the potential is the asymptotic radial shape plus
/// a moment expansion; both pieces integrate in closed form.  For window
/// radius `R` the radial piece is `ln(1+R⁻²) − 1/(1+R²)` for the round
/// reference and zero for the flat-outside one (its potential is constant
/// beyond `max(1, support radius)`), and the moment corrections are
/// `Σ_p |c_p|²/(p·R^(2p))` with `c_p = ∫wᵖ dμ(w)` — gradients of distinct
/// angular orders are orthogonal over circles, so no cross terms appear.
///
/// The route is a cross check: it agrees with [`entropy_green`] to the
/// residual discretization error, which for smooth measures comes from
/// the lattice sampling of the potential near the support (and, for the
/// flat-outside reference, from the gradient kink its potential carries
/// on the unit circle, which extrapolation does not remove).
pub fn entropy_dirichlet(mu: &GridMeasure, reference: Reference) -> Result<f64> {
    mu.validate()?;
    let supp = mu.support_indices();
    let supp_radius = supp
        .iter()
        .map(|&i| mu.grid.nodes[i].norm())
        .fold(0.0, f64::max);
    let base_radius: f64 = match reference {
        Reference::FubiniStudy => 5.0,
        Reference::LogPlus => 3.0,
    };
    let window_radius = base_radius.max(2.5 * supp_radius.max(1.0));
    let fine = {
        let raw = ((2.0 * window_radius / DIRICHLET_STEP).ceil() as u32).max(64);
        raw + raw % 2
    };
    let ref_quad = reference_quadrature(reference)?;
    let mut forms = [0.0f64; 2];
    for (slot, resolution) in [(0usize, fine), (1, fine / 2)] {
        let window = Arc::new(build_grid(
            Region::Disk {
                center: Complex64::new(0.0, 0.0),
                radius: window_radius,
            },
            resolution,
            MeasureKind::Area,
        )?);
        let field = potential_on_grid(mu, reference, &window, &ref_quad)?;
        forms[slot] = dirichlet_form(&field)?;
    }
    // the continuum form is nonnegative; extrapolation overshoot below
    // zero on near-constant potentials is pure noise, so clamp it away
    let inside = ((4.0 * forms[0] - forms[1]) / 3.0).max(0.0);
    let radial_tail = match reference {
        Reference::FubiniStudy => {
            let r2 = window_radius * window_radius;
            (1.0 + 1.0 / r2).ln() - 1.0 / (1.0 + r2)
        }
        Reference::LogPlus => 0.0,
    };
    let mut moment_tail = 0.0;
    let base: Vec<Complex64> = supp.iter().map(|&i| mu.grid.nodes[i]).collect();
    let masses: Vec<f64> = supp.iter().map(|&i| mu.density[i]).collect();
    let mut powers = base.clone();
    for p in 1..=MULTIPOLE_ORDER {
        let c_p = Complex64::new(
            stable_sum(powers.iter().zip(&masses).map(|(w, &m)| w.re * m)),
            stable_sum(powers.iter().zip(&masses).map(|(w, &m)| w.im * m)),
        );
        moment_tail += c_p.norm_sqr() / (p as f64 * window_radius.powi(2 * p as i32));
        for (w, z) in powers.iter_mut().zip(&base) {
            *w *= z;
        }
    }
    Ok(apply_cutoff(-0.5 * (inside + radial_tail + moment_tail)))
}

/// Collapses a planar measure to its radial mass distribution: one atom
/// per occurring `t = ln|z|²` value (nodes sharing a radius merge), in
/// increasing order of `t`.
pub fn radialize(mu: &GridMeasure) -> RadialMeasure {
    let supp = mu.support_indices();
    let mut pairs: Vec<(f64, f64)> = supp
        .iter()
        .map(|&i| (node_t(mu.grid.nodes[i]), mu.density[i]))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut t: Vec<f64> = Vec::with_capacity(pairs.len());
    let mut mass: Vec<f64> = Vec::with_capacity(pairs.len());
    for (ti, mi) in pairs {
        match t.last() {
            Some(&last) if ti - last <= 1e-12 => {
                *mass.last_mut().expect("mass tracks t") += mi;
            }
            _ => {
                t.push(ti);
                mass.push(mi);
            }
        }
    }
    RadialMeasure { t, mass }
}

/// The admissible radial weight whose curvature is the given radial
/// probability distribution:
/// `ψ(t) = Σ_j m_j·max(t, s_j) − Σ_j m_j·φ₀(s_j) + C'`,
/// the reference-normalized Green potential of the masses plus `φ₀`,
/// sampled on an equispaced window.  Slopes are cumulative masses, so the
/// result is convex with slopes running from 0 to 1 by construction.
pub fn radial_green_weight(
    mu: &RadialMeasure,
    reference: Reference,
    t_lo: f64,
    t_hi: f64,
    n: usize,
) -> Result<RadialProfile> {
    let total = mu.total_mass();
    if (total - 1.0).abs() > 1e-8 {
        return Err(LabError::InvalidParameter(format!(
            "radial masses total {total}, expected a probability distribution"
        )));
    }
    if mu.mass.iter().any(|&m| m < -1e-15) {
        return Err(LabError::InvalidParameter(
            "radial masses must be nonnegative".into(),
        ));
    }
    let mut atoms: Vec<(f64, f64)> = mu.t.iter().copied().zip(mu.mass.iter().copied()).collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    // suffix sums of m_j·s_j and the constant part of ψ
    let mut weighted_above = vec![0.0f64; atoms.len() + 1];
    for (j, &(s, m)) in atoms.iter().enumerate().rev() {
        weighted_above[j] = weighted_above[j + 1] + m * s;
    }
    let offset = stable_sum(atoms.iter().map(|&(s, m)| m * reference.radial(s)))
        - reference.green_constant();
    let profile = RadialProfile::from_fn(t_lo, t_hi, n, |_| 0.0)?;
    let mut f = Vec::with_capacity(n);
    let mut below_mass = 0.0f64;
    let mut next_atom = 0usize;
    for &ti in &profile.t {
        while next_atom < atoms.len() && atoms[next_atom].0 <= ti {
            below_mass += atoms[next_atom].1;
            next_atom += 1;
        }
        f.push(ti * below_mass + weighted_above[next_atom] - offset);
    }
    Ok(RadialProfile { t: profile.t, f })
}

/// Legendre upper bound for the entropy: the minimum over a panel of
/// admissible radial weights `ψ` of `∫(ψ−φ₀)dμ − ℰ[Pψ, φ₀]`, with `P` the
/// unconstrained (whole-window) envelope.  Always at least `𝒮[μ]` up to
/// discretization; the bound is attained when the panel contains the
/// measure's own potential weight ([`radial_green_weight`] of its radial
/// masses).
pub fn entropy_legendre(
    mu: &GridMeasure,
    panel: &[RadialProfile],
    reference: Reference,
) -> Result<f64> {
    if panel.is_empty() {
        return Err(LabError::InvalidParameter(
            "the Legendre panel must contain at least one weight".into(),
        ));
    }
    mu.validate()?;
    let supp = mu.support_indices();
    let atoms: Vec<(f64, f64)> = supp
        .iter()
        .map(|&i| (node_t(mu.grid.nodes[i]), mu.density[i]))
        .collect();
    let mut best = f64::INFINITY;
    for psi in panel {
        psi.check_admissible()?;
        let window = (psi.t[0], psi.t[psi.len() - 1]);
        let env = envelope_radial(psi, window)?;
        let ref_profile = RadialProfile {
            t: psi.t.clone(),
            f: psi.t.iter().map(|&ti| reference.radial(ti)).collect(),
        };
        let envelope_energy = energy_radial(&env, &ref_profile)?;
        let linear = stable_sum(
            atoms
                .iter()
                .map(|&(t, m)| (psi.eval(t) - reference.radial(t)) * m),
        );
        best = best.min(linear - envelope_energy);
    }
    Ok(best)
}

/// The `t`-window spanned by a grid's constraint mask.  If the mask
/// reaches the innermost lattice cell the window extends to the left end
/// of the laboratory range (the constraint set fills inward to the
/// origin, whose `t` is `−∞`).
pub(crate) fn mask_window(grid: &MeasureGrid) -> Result<(f64, f64)> {
    let masked = grid.masked_indices();
    if masked.is_empty() {
        return Err(LabError::EmptySupport(
            "constraint mask keeps no grid nodes".into(),
        ));
    }
    let mut r_min = f64::INFINITY;
    let mut r_max = 0.0f64;
    for &i in &masked {
        let r = grid.nodes[i].norm();
        r_min = r_min.min(r);
        r_max = r_max.max(r);
    }
    let reaches_origin = grid.spacing().is_some_and(|h| r_min <= h);
    let t_lo = if reaches_origin {
        -LAB_T_SPAN
    } else {
        (2.0 * r_min.max(1e-150).ln()).max(-LAB_T_SPAN)
    };
    let t_hi = (2.0 * r_max.max(1e-150).ln()).min(LAB_T_SPAN);
    Ok((t_lo, t_hi.max(t_lo)))
}

/// Envelope energy `ℰ[P_Eφ, φ₀]` of a radial weight over the constraint
/// set carried by a grid's mask, computed on the radial laboratory
/// window.  This is the minimum of the total energy `J` over probability
/// measures on the constraint set.
pub fn envelope_energy(w: &WeightSpec, grid: &MeasureGrid, reference: Reference) -> Result<f64> {
    let window = mask_window(grid)?;
    let profile = RadialProfile::from_weight(w, -LAB_T_SPAN, LAB_T_SPAN, LAB_T_NODES)?;
    let env = envelope_radial(&profile, window)?;
    let ref_profile = RadialProfile {
        t: profile.t.clone(),
        f: profile.t.iter().map(|&ti| reference.radial(ti)).collect(),
    };
    energy_radial(&env, &ref_profile)
}

/// Full decomposition `I[μ] = −𝒮[μ] + ∫(φ−φ₀)dμ − ℰ[P_Eφ, φ₀]` of the
/// rate value of a measure against a weight and constraint set, with the
/// entropy from the Green double sum.
///
/// The measure must live on the constraint grid and place no mass off its
/// mask.
pub fn rate_functional(
    mu: &GridMeasure,
    w: &WeightSpec,
    grid: &MeasureGrid,
    reference: Reference,
) -> Result<EnergyReport> {
    mu.validate()?;
    if mu.grid.len() != grid.len()
        || (mu.grid.nodes[0] - grid.nodes[0]).norm() > 1e-12
        || (mu.grid.nodes[grid.len() - 1] - grid.nodes[grid.len() - 1]).norm() > 1e-12
    {
        return Err(LabError::InvalidParameter(
            "measure grid and constraint grid disagree".into(),
        ));
    }
    let off_mask: f64 = (0..grid.len())
        .filter(|&i| !grid.e_mask[i])
        .map(|i| mu.density[i])
        .sum();
    if off_mask > 1e-12 {
        return Err(LabError::SupportOffE(format!(
            "measure places mass {off_mask:.3e} outside the constraint set"
        )));
    }
    let entropy = entropy_green(mu, reference)?;
    let supp = mu.support_indices();
    let mut linear_parts = Vec::with_capacity(supp.len());
    for &i in &supp {
        let z = mu.grid.nodes[i];
        linear_parts.push((w.eval(z)? - reference.eval(z)) * mu.density[i]);
    }
    let linear_term = stable_sum(linear_parts);
    let envelope = envelope_energy(w, grid, reference)?;
    let j = linear_term - entropy;
    let i = j - envelope;
    Ok(EnergyReport {
        entropy,
        linear_term,
        envelope_energy: envelope,
        j,
        i,
        route: EntropyRoute::GreenDoubleIntegral,
    })
}
