//! Weight functions, reference geometries, and quadrature grids.
//!
//! A *weight* is a real-valued function `φ` on the complex plane; it
//! penalizes particle positions through the factor `exp(-k φ)`.  A
//! *reference geometry* fixes the background potential `φ₀` and its unit
//! curvature measure `ω₀` against which energies and entropies are
//! normalized.  A [`MeasureGrid`] is the discrete carrier of a probability
//! measure `ν` together with the membership mask of the compact constraint
//! set `E` on which particles are allowed to live.
//!
//! All quadrature in the crate is plain grid summation: a grid *is* the
//! measure, so identities that hold at grid level (mass normalization,
//! Gram orthonormality) are exact by construction rather than approximate.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use num_complex::Complex64;

use crate::error::{LabError, Result};

/// Growth behaviour of a weight at infinity.
///
/// `FubiniStudyEquivalent` weights stay within a bounded distance of
/// `ln(1+|z|²)`; they confine particles only when paired with a compact
/// constraint set.  `Superlogarithmic` weights dominate `1.01·ln(1+|z|²)`
/// beyond some radius and confine on their own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthClass {
    FubiniStudyEquivalent,
    Superlogarithmic,
}

impl fmt::Display for GrowthClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GrowthClass::FubiniStudyEquivalent => write!(f, "fubini-study-equivalent"),
            GrowthClass::Superlogarithmic => write!(f, "superlogarithmic"),
        }
    }
}

type EvalFn = dyn Fn(Complex64) -> f64 + Send + Sync;
type RadialFn = dyn Fn(f64) -> f64 + Send + Sync;

/// An evaluable weight function `φ: ℂ → ℝ` with a declared growth class.
///
/// Rotation-invariant weights additionally carry their radial profile
/// `f(t) = φ(z)` at `t = ln|z|²`, which the envelope machinery consumes.
#[derive(Clone)]
pub struct WeightSpec {
    label: String,
    growth: GrowthClass,
    eval_fn: Arc<EvalFn>,
    radial_fn: Option<Arc<RadialFn>>,
}

impl fmt::Debug for WeightSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WeightSpec")
            .field("label", &self.label)
            .field("growth", &self.growth)
            .field("radial", &self.radial_fn.is_some())
            .finish()
    }
}

impl WeightSpec {
    /// Builds a weight from an arbitrary evaluator.
    pub fn custom(
        label: impl Into<String>,
        growth: GrowthClass,
        eval: impl Fn(Complex64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        WeightSpec {
            label: label.into(),
            growth,
            eval_fn: Arc::new(eval),
            radial_fn: None,
        }
    }

    /// Builds a rotation-invariant weight from its radial profile
    /// `f(t) = φ` at `t = ln|z|²`.
    pub fn radial(
        label: impl Into<String>,
        growth: GrowthClass,
        profile: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        let profile = Arc::new(profile);
        let eval_profile = Arc::clone(&profile);
        WeightSpec {
            label: label.into(),
            growth,
            eval_fn: Arc::new(move |z: Complex64| {
                let r2 = z.norm_sqr();
                if r2 == 0.0 {
                    // limit t → -∞ along the profile; all built-in profiles
                    // have finite limits, callers with singular profiles
                    // must use `custom`
                    eval_profile(f64::NEG_INFINITY)
                } else {
                    eval_profile(r2.ln())
                }
            }),
            radial_fn: Some(profile),
        }
    }

    /// The quadratic confinement `φ(z) = |z|²` of the planar Gaussian
    /// ensemble.
    pub fn ginibre() -> Self {
        WeightSpec::radial("ginibre", GrowthClass::Superlogarithmic, |t: f64| {
            if t == f64::NEG_INFINITY {
                0.0
            } else {
                t.exp()
            }
        })
    }

    /// The quartic confinement `φ(z) = |z|⁴/2`.
    pub fn quartic() -> Self {
        WeightSpec::radial("quartic", GrowthClass::Superlogarithmic, |t: f64| {
            if t == f64::NEG_INFINITY {
                0.0
            } else {
                0.5 * (2.0 * t).exp()
            }
        })
    }

    /// The zero weight, used with curve-supported constraint sets where
    /// confinement comes from compactness rather than growth.
    pub fn zero() -> Self {
        WeightSpec::radial("zero", GrowthClass::FubiniStudyEquivalent, |_| 0.0)
    }

    /// `φ(z) = ln(1+|z|²)`, the potential of the round metric.
    pub fn fubini_study() -> Self {
        WeightSpec::radial(
            "fubini-study",
            GrowthClass::FubiniStudyEquivalent,
            |t: f64| {
                if t == f64::NEG_INFINITY {
                    0.0
                } else if t > 0.0 {
                    // ln(1+e^t) = t + ln(1+e^(-t)), stable for large t
                    t + (-t).exp().ln_1p()
                } else {
                    t.exp().ln_1p()
                }
            },
        )
    }

    /// `φ(z) = max(ln|z|², 0)`, the potential whose curvature is uniform
    /// arclength on the unit circle.
    pub fn log_plus() -> Self {
        WeightSpec::radial("log-plus", GrowthClass::FubiniStudyEquivalent, |t: f64| {
            if t == f64::NEG_INFINITY {
                0.0
            } else {
                t.max(0.0)
            }
        })
    }

    /// The weight `φ + c`, sharing this weight's growth class.
    pub fn shifted(&self, c: f64) -> Self {
        let base_eval = Arc::clone(&self.eval_fn);
        let radial_fn = self.radial_fn.as_ref().map(|base| {
            let base = Arc::clone(base);
            Arc::new(move |t: f64| base(t) + c) as Arc<RadialFn>
        });
        WeightSpec {
            label: format!("{}{:+}", self.label, c),
            growth: self.growth,
            eval_fn: Arc::new(move |z| base_eval(z) + c),
            radial_fn,
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn growth_class(&self) -> GrowthClass {
        self.growth
    }

    /// Evaluates `φ(z)` without finiteness checks (hot-loop variant).
    #[inline]
    pub fn eval_raw(&self, z: Complex64) -> f64 {
        (self.eval_fn)(z)
    }

    /// Evaluates `φ(z)`, reporting non-finite results as `weight-overflow`.
    pub fn eval(&self, z: Complex64) -> Result<f64> {
        let v = self.eval_raw(z);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(LabError::WeightOverflow(format!(
                "weight `{}` evaluated to {v} at z = {z}",
                self.label
            )))
        }
    }

    /// Radial profile `f(t) = φ` at `t = ln|z|²`, if the weight declared one.
    pub fn radial_profile(&self) -> Option<&Arc<RadialFn>> {
        self.radial_fn.as_ref()
    }

    /// Verifies the declared growth class numerically.
    ///
    /// For a superlogarithmic weight there must exist a radius `R` (sought
    /// over doubling steps up to 2¹⁰) such that `φ(z) ≥ 1.01·ln(1+|z|²)`
    /// at sampled moduli in `[R, 4R]` and sampled angles.  Weights declared
    /// `FubiniStudyEquivalent` pass vacuously.
    pub fn verify_growth(&self) -> Result<()> {
        if self.growth != GrowthClass::Superlogarithmic {
            return Ok(());
        }
        let mut r = 1.0f64;
        while r <= 1024.0 {
            let mut ok = true;
            'sample: for i in 0..16 {
                let radius = r * 4.0f64.powf(i as f64 / 15.0);
                for a in 0..8 {
                    let theta = std::f64::consts::TAU * a as f64 / 8.0;
                    let z = Complex64::from_polar(radius, theta);
                    if self.eval_raw(z) < 1.01 * z.norm_sqr().ln_1p() {
                        ok = false;
                        break 'sample;
                    }
                }
            }
            if ok {
                return Ok(());
            }
            r *= 2.0;
        }
        Err(LabError::InvalidParameter(format!(
            "weight `{}` declared superlogarithmic but never dominates \
             1.01·ln(1+|z|²) on sampled annuli up to radius 4096",
            self.label
        )))
    }
}

/// The two built-in reference geometries `(φ₀, ω₀)`.
///
/// Both have unit-mass curvature and known normalization constants, which
/// is what allows entropies and energies to be reported on an absolute
/// scale.  `green_constant` is the constant `C'` in the pair kernel
/// `g₀(z,w) = ln|z-w|² − φ₀(z) − φ₀(w) + C'` fixed by requiring
/// `∫ g₀(·,w) dω₀ = 0`; `energy_offset` is the constant `C'' = −C'/2`
/// appearing in the closed-form weighted energy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reference {
    /// `φ₀ = ln(1+|z|²)`, `ω₀` = round area measure of total mass 1.
    FubiniStudy,
    /// `φ₀ = ln⁺|z|²`, `ω₀` = uniform arclength on the unit circle.
    LogPlus,
}

impl Reference {
    pub fn weight(self) -> WeightSpec {
        match self {
            Reference::FubiniStudy => WeightSpec::fubini_study(),
            Reference::LogPlus => WeightSpec::log_plus(),
        }
    }

    /// `φ₀(z)`.
    #[inline]
    pub fn eval(self, z: Complex64) -> f64 {
        match self {
            Reference::FubiniStudy => z.norm_sqr().ln_1p(),
            Reference::LogPlus => z.norm_sqr().ln().max(0.0),
        }
    }

    /// Radial profile of `φ₀` at `t = ln|z|²`.
    #[inline]
    pub fn radial(self, t: f64) -> f64 {
        match self {
            Reference::FubiniStudy => {
                if t > 0.0 {
                    t + (-t).exp().ln_1p()
                } else {
                    t.exp().ln_1p()
                }
            }
            Reference::LogPlus => t.max(0.0),
        }
    }

    /// The constant `C'` in `g₀(z,w) = ln|z-w|² − φ₀(z) − φ₀(w) + C'`.
    ///
    /// For the round geometry, `∫ ln|z-w|² dω₀(z) = ln(1+|w|²)` and
    /// `∫ φ₀ dω₀ = 1`, forcing `C' = 1`.  For the circle geometry,
    /// `∫ ln|z-w|² dω₀(z) = ln⁺|w|²` and `φ₀` vanishes on the circle,
    /// forcing `C' = 0`.
    pub fn green_constant(self) -> f64 {
        match self {
            Reference::FubiniStudy => 1.0,
            Reference::LogPlus => 0.0,
        }
    }

    /// The constant `C'' = −C'/2` completing the closed-form energy
    /// `J[μ] = −½∬ln|z-w|²dμdμ + ∫φdμ + C''`.
    pub fn energy_offset(self) -> f64 {
        -0.5 * self.green_constant()
    }

    /// Planar density of the reference curvature measure `ω₀` with
    /// respect to Lebesgue area, when it has one.  The circle reference
    /// concentrates on `|z| = 1` and has no area density.
    pub fn area_density(self, z: Complex64) -> Option<f64> {
        match self {
            Reference::FubiniStudy => {
                let s = 1.0 + z.norm_sqr();
                Some(1.0 / (std::f64::consts::PI * s * s))
            }
            Reference::LogPlus => None,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Reference::FubiniStudy => "fs",
            Reference::LogPlus => "logplus",
        }
    }
}

impl FromStr for Reference {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fs" | "fubini-study" => Ok(Reference::FubiniStudy),
            "logplus" | "log-plus" => Ok(Reference::LogPlus),
            other => Err(LabError::Format(format!("unknown reference `{other}`"))),
        }
    }
}

impl fmt::Display for Reference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Supported compact regions for constraint sets and quadrature supports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region {
    Disk {
        center: Complex64,
        radius: f64,
    },
    Annulus {
        center: Complex64,
        inner: f64,
        outer: f64,
    },
    Rectangle {
        center: Complex64,
        half_width: f64,
        half_height: f64,
    },
    /// The one-dimensional curve `|z - center| = radius` (not the disk it
    /// bounds); carries arclength measure.
    Circle {
        center: Complex64,
        radius: f64,
    },
}

/// Relative tolerance used when testing membership on a curve region.
const CURVE_TOL: f64 = 1e-9;

impl Region {
    /// Membership test; curve regions use a thin relative tolerance band.
    pub fn contains(&self, z: Complex64) -> bool {
        match *self {
            Region::Disk { center, radius } => (z - center).norm() <= radius,
            Region::Annulus {
                center,
                inner,
                outer,
            } => {
                let d = (z - center).norm();
                inner <= d && d <= outer
            }
            Region::Rectangle {
                center,
                half_width,
                half_height,
            } => {
                (z.re - center.re).abs() <= half_width && (z.im - center.im).abs() <= half_height
            }
            Region::Circle { center, radius } => {
                ((z - center).norm() - radius).abs() <= CURVE_TOL * radius.max(1.0)
            }
        }
    }

    /// True for one-dimensional (arclength-carrying) regions.
    pub fn is_curve(&self) -> bool {
        matches!(self, Region::Circle { .. })
    }

    /// Radius of the smallest origin-independent bounding disk, used to
    /// scale monomials.
    pub fn bounding_radius(&self) -> f64 {
        match *self {
            Region::Disk { center, radius } | Region::Circle { center, radius } => {
                center.norm() + radius
            }
            Region::Annulus { center, outer, .. } => center.norm() + outer,
            Region::Rectangle {
                center,
                half_width,
                half_height,
            } => center.norm() + (half_width * half_width + half_height * half_height).sqrt(),
        }
    }

    /// Checks for zero area/length, the `empty-support` condition.
    fn check_nondegenerate(&self) -> Result<()> {
        let bad = match *self {
            Region::Disk { radius, .. } => radius <= 0.0,
            Region::Annulus { inner, outer, .. } => inner < 0.0 || outer <= inner,
            Region::Rectangle {
                half_width,
                half_height,
                ..
            } => half_width <= 0.0 || half_height <= 0.0,
            Region::Circle { radius, .. } => radius <= 0.0,
        };
        if bad {
            Err(LabError::EmptySupport(format!(
                "region {self} has zero area/length"
            )))
        } else {
            Ok(())
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Region::Disk { center, radius } => {
                write!(f, "disk({:e},{:e},{:e})", center.re, center.im, radius)
            }
            Region::Annulus {
                center,
                inner,
                outer,
            } => write!(
                f,
                "annulus({:e},{:e},{:e},{:e})",
                center.re, center.im, inner, outer
            ),
            Region::Rectangle {
                center,
                half_width,
                half_height,
            } => write!(
                f,
                "rectangle({:e},{:e},{:e},{:e})",
                center.re, center.im, half_width, half_height
            ),
            Region::Circle { center, radius } => {
                write!(f, "circle({:e},{:e},{:e})", center.re, center.im, radius)
            }
        }
    }
}

impl FromStr for Region {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let open = s
            .find('(')
            .ok_or_else(|| LabError::Format(format!("region `{s}`: missing `(`")))?;
        if !s.ends_with(')') {
            return Err(LabError::Format(format!("region `{s}`: missing `)`")));
        }
        let name = &s[..open];
        let args: Vec<f64> = s[open + 1..s.len() - 1]
            .split(',')
            .map(|a| {
                a.trim()
                    .parse::<f64>()
                    .map_err(|e| LabError::Format(format!("region `{s}`: bad number: {e}")))
            })
            .collect::<Result<_>>()?;
        let need = |n: usize| -> Result<()> {
            if args.len() == n {
                Ok(())
            } else {
                Err(LabError::Format(format!(
                    "region `{s}`: expected {n} arguments, got {}",
                    args.len()
                )))
            }
        };
        match name {
            "disk" => {
                need(3)?;
                Ok(Region::Disk {
                    center: Complex64::new(args[0], args[1]),
                    radius: args[2],
                })
            }
            "annulus" => {
                need(4)?;
                Ok(Region::Annulus {
                    center: Complex64::new(args[0], args[1]),
                    inner: args[2],
                    outer: args[3],
                })
            }
            "rectangle" => {
                need(4)?;
                Ok(Region::Rectangle {
                    center: Complex64::new(args[0], args[1]),
                    half_width: args[2],
                    half_height: args[3],
                })
            }
            "circle" => {
                need(3)?;
                Ok(Region::Circle {
                    center: Complex64::new(args[0], args[1]),
                    radius: args[2],
                })
            }
            other => Err(LabError::Format(format!("unknown region kind `{other}`"))),
        }
    }
}

/// Base measure carried by a grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasureKind {
    /// Uniform area measure on a two-dimensional region.
    Area,
    /// Uniform arclength measure on a curve region.
    Arclength,
}

impl fmt::Display for MeasureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeasureKind::Area => write!(f, "area"),
            MeasureKind::Arclength => write!(f, "arclength"),
        }
    }
}

impl FromStr for MeasureKind {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "area" => Ok(MeasureKind::Area),
            "arclength" => Ok(MeasureKind::Arclength),
            other => Err(LabError::Format(format!("unknown measure kind `{other}`"))),
        }
    }
}

/// Neumaier-compensated summation; keeps mass bookkeeping exact to a few
/// ulps even over 10⁵ summands.
pub(crate) fn stable_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            comp += (sum - t) + x;
        } else {
            comp += (x - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Rescales `weights` to total mass exactly 1 (to working precision): a
/// compensated normalization pass followed by absorbing the residual into
/// the largest entry.
pub(crate) fn normalize_mass(weights: &mut [f64]) {
    let total = stable_sum(weights.iter().copied());
    for w in weights.iter_mut() {
        *w /= total;
    }
    let residual = 1.0 - stable_sum(weights.iter().copied());
    if let Some((imax, _)) = weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
    {
        weights[imax] += residual;
    }
}

/// Square-lattice structure of an area grid, kept for neighbor queries.
#[derive(Debug, Clone)]
struct Lattice {
    origin: Complex64,
    spacing: f64,
    coords: Vec<(i32, i32)>,
    index: HashMap<(i32, i32), usize>,
}

impl Lattice {
    fn from_parts(origin: Complex64, spacing: f64, coords: Vec<(i32, i32)>) -> Self {
        let index = coords
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i))
            .collect::<HashMap<_, _>>();
        Lattice {
            origin,
            spacing,
            coords,
            index,
        }
    }

    /// Attempts to recognize a loaded node set as a square lattice with the
    /// given spacing.  Returns `None` when any node fails to land on a
    /// unique lattice coordinate.
    fn rebuild(nodes: &[Complex64], spacing: f64) -> Option<Self> {
        if spacing <= 0.0 || nodes.is_empty() {
            return None;
        }
        let ox = nodes.iter().map(|z| z.re).fold(f64::INFINITY, f64::min);
        let oy = nodes.iter().map(|z| z.im).fold(f64::INFINITY, f64::min);
        let origin = Complex64::new(ox, oy);
        let mut coords = Vec::with_capacity(nodes.len());
        for z in nodes {
            let fx = (z.re - ox) / spacing;
            let fy = (z.im - oy) / spacing;
            let ix = fx.round();
            let iy = fy.round();
            if (fx - ix).abs() > 1e-6 || (fy - iy).abs() > 1e-6 {
                return None;
            }
            coords.push((ix as i32, iy as i32));
        }
        let lat = Lattice::from_parts(origin, spacing, coords);
        if lat.index.len() == nodes.len() {
            Some(lat)
        } else {
            None
        }
    }

}

/// Discretization of a weighted measure `(ν, E)`: complex nodes, positive
/// quadrature weights summing to 1, a membership mask for the constraint
/// set `E`, and per-node cell radii used to regularize logarithmic kernels.
#[derive(Debug, Clone)]
pub struct MeasureGrid {
    pub nodes: Vec<Complex64>,
    pub weights: Vec<f64>,
    pub e_mask: Vec<bool>,
    pub cell_radius: Vec<f64>,
    pub region: Region,
    lattice: Option<Lattice>,
}

/// Builds the quadrature grid of a region with its natural uniform measure.
///
/// Area regions are discretized by the centers of a square lattice of
/// `resolution` cells across the bounding box; curve regions by
/// `resolution` equispaced nodes.  Weights are normalized to total mass 1.
pub fn build_grid(region: Region, resolution: u32, measure: MeasureKind) -> Result<MeasureGrid> {
    match (measure, region.is_curve()) {
        (MeasureKind::Area, true) => Err(LabError::InvalidParameter(
            "area measure requested on a curve region; use arclength".into(),
        )),
        (MeasureKind::Arclength, false) => Err(LabError::InvalidParameter(
            "arclength measure requested on a two-dimensional region; use area".into(),
        )),
        _ => build_grid_with_density(region, resolution, |_| 1.0),
    }
}

/// Builds a grid carrying the measure `density(z)·(uniform)`, normalized to
/// total mass 1.  The density must be nonnegative and not identically zero
/// on the region's nodes.
pub fn build_grid_with_density(
    region: Region,
    resolution: u32,
    density: impl Fn(Complex64) -> f64,
) -> Result<MeasureGrid> {
    region.check_nondegenerate()?;
    if resolution < 8 {
        return Err(LabError::InvalidParameter(format!(
            "resolution {resolution} < 8"
        )));
    }
    let mut grid = match region {
        Region::Circle { center, radius } => {
            let n = resolution as usize;
            let mut nodes = Vec::with_capacity(n);
            let mut weights = Vec::with_capacity(n);
            for j in 0..n {
                let theta = std::f64::consts::TAU * j as f64 / n as f64;
                let z = center + Complex64::from_polar(radius, theta);
                let d = density(z);
                if d < 0.0 {
                    return Err(LabError::InvalidParameter(format!(
                        "negative density {d} at z = {z}"
                    )));
                }
                nodes.push(z);
                weights.push(d);
            }
            let cell = radius * (std::f64::consts::PI / n as f64).sin();
            MeasureGrid {
                cell_radius: vec![cell; n],
                e_mask: vec![true; n],
                nodes,
                weights,
                region,
                lattice: None,
            }
        }
        _ => {
            let (center, half_x, half_y) = match region {
                Region::Disk { center, radius } => (center, radius, radius),
                Region::Annulus { center, outer, .. } => (center, outer, outer),
                Region::Rectangle {
                    center,
                    half_width,
                    half_height,
                } => (center, half_width, half_height),
                Region::Circle { .. } => unreachable!(),
            };
            let h = 2.0 * half_x.max(half_y) / resolution as f64;
            // floor() keeps every cell center strictly inside the bounding
            // rectangle, so rectangle grids never need a membership fudge
            let nx = ((2.0 * half_x) / h + 1e-9).floor().max(1.0) as i32;
            let ny = ((2.0 * half_y) / h + 1e-9).floor().max(1.0) as i32;
            let origin = Complex64::new(
                center.re - 0.5 * nx as f64 * h + 0.5 * h,
                center.im - 0.5 * ny as f64 * h + 0.5 * h,
            );
            let mut nodes = Vec::new();
            let mut weights = Vec::new();
            let mut coords = Vec::new();
            for ix in 0..nx {
                for iy in 0..ny {
                    let z = Complex64::new(
                        origin.re + ix as f64 * h,
                        origin.im + iy as f64 * h,
                    );
                    if !region.contains(z) {
                        continue;
                    }
                    let d = density(z);
                    if d < 0.0 {
                        return Err(LabError::InvalidParameter(format!(
                            "negative density {d} at z = {z}"
                        )));
                    }
                    nodes.push(z);
                    weights.push(d);
                    coords.push((ix, iy));
                }
            }
            let n = nodes.len();
            MeasureGrid {
                cell_radius: vec![0.5 * h; n],
                e_mask: vec![true; n],
                nodes,
                weights,
                region,
                lattice: Some(Lattice::from_parts(origin, h, coords)),
            }
        }
    };
    let total: f64 = grid.weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(LabError::EmptySupport(format!(
            "region {region} at resolution {resolution} kept no quadrature mass"
        )));
    }
    normalize_mass(&mut grid.weights);
    grid.validate()?;
    Ok(grid)
}

/// Builds the reference grid of the round geometry: the density
/// `1/(π(1+|z|²)²)` sampled on a disk of the given radius, with the mass
/// of the chart complement (which the disk cannot see) folded into the
/// outermost ring of cells.
///
/// The folding makes grid sums approximate integrals over the whole
/// geometry for any integrand that has stabilized by `|z| = radius`; all
/// pair kernels used downstream have (angular averages of) this property.
pub fn fubini_study_reference(radius: f64, resolution: u32) -> Result<MeasureGrid> {
    if radius <= 1.0 {
        return Err(LabError::InvalidParameter(format!(
            "reference disk radius {radius} must exceed 1"
        )));
    }
    let region = Region::Disk {
        center: Complex64::new(0.0, 0.0),
        radius,
    };
    let mut grid = build_grid_with_density(region, resolution, |z| {
        let s = z.norm_sqr();
        1.0 / (std::f64::consts::PI * (1.0 + s) * (1.0 + s))
    })?;
    // mass of the round measure inside the disk; the remainder lives past
    // the chart horizon and is re-attached to the rim band below
    let inside = radius * radius / (1.0 + radius * radius);
    for w in &mut grid.weights {
        *w *= inside;
    }
    let h = 2.0 * radius / resolution as f64;
    let rim: Vec<usize> = (0..grid.nodes.len())
        .filter(|&i| grid.nodes[i].norm() >= radius - h)
        .collect();
    if rim.is_empty() {
        return Err(LabError::EmptySupport(
            "reference grid rim band is empty".into(),
        ));
    }
    let rim_mass: f64 = rim.iter().map(|&i| grid.weights[i]).sum();
    let fold = 1.0 - inside;
    for &i in &rim {
        grid.weights[i] += fold * grid.weights[i] / rim_mass;
    }
    normalize_mass(&mut grid.weights);
    grid.validate()?;
    Ok(grid)
}

impl MeasureGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Lattice spacing for area grids, `None` for curve or irregular grids.
    pub fn spacing(&self) -> Option<f64> {
        self.lattice.as_ref().map(|l| l.spacing)
    }

    /// Indices of the nodes belonging to the constraint set `E`.
    pub fn masked_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.e_mask[i]).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.e_mask.iter().filter(|&&m| m).count()
    }

    /// Grid quadrature `Σ f(z_i) w_i` of `∫ f dν`.
    pub fn integrate(&self, f: impl Fn(Complex64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&z, &w)| f(z) * w)
            .sum()
    }

    /// Checks the structural invariants: unit mass within 1e-12, positive
    /// weights, positive cell radii, a non-empty mask, and masked nodes
    /// inside the declared region.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.weights.len() != n || self.e_mask.len() != n || self.cell_radius.len() != n {
            return Err(LabError::InvalidParameter(
                "grid field lengths disagree".into(),
            ));
        }
        if n == 0 || !self.e_mask.iter().any(|&m| m) {
            return Err(LabError::EmptySupport(
                "grid has no nodes in the constraint set".into(),
            ));
        }
        let total = stable_sum(self.weights.iter().copied());
        if (total - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidParameter(format!(
                "grid mass {total} differs from 1 by more than 1e-12"
            )));
        }
        if self.weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(LabError::InvalidParameter(
                "grid has non-positive or non-finite weights".into(),
            ));
        }
        if self.cell_radius.iter().any(|&c| !(c > 0.0)) {
            return Err(LabError::InvalidParameter(
                "grid has non-positive cell radii".into(),
            ));
        }
        for (i, &z) in self.nodes.iter().enumerate() {
            if self.e_mask[i] && !self.region.contains(z) {
                return Err(LabError::InvalidParameter(format!(
                    "masked node {z} lies outside the declared region {}",
                    self.region
                )));
            }
        }
        Ok(())
    }

    /// Returns a copy whose mask keeps only nodes satisfying `keep` (and
    /// already masked).  Weights are untouched: the measure `ν` stays the
    /// same, only the constraint set shrinks.
    pub fn restrict_mask(&self, keep: impl Fn(Complex64) -> bool) -> Result<MeasureGrid> {
        let mut out = self.clone();
        for (i, &z) in self.nodes.iter().enumerate() {
            out.e_mask[i] = self.e_mask[i] && keep(z);
        }
        if !out.e_mask.iter().any(|&m| m) {
            return Err(LabError::EmptySupport(
                "mask restriction removed every node".into(),
            ));
        }
        Ok(out)
    }

    /// Indices of the geometric neighbors of node `i`: the 4-neighborhood
    /// on lattice grids, the two ring neighbors on circle grids.
    pub fn neighbor_indices(&self, i: usize) -> Vec<usize> {
        if let Some(lat) = &self.lattice {
            let (ix, iy) = lat.coords[i];
            [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .filter_map(|&(dx, dy)| lat.index.get(&(ix + dx, iy + dy)).copied())
                .collect()
        } else if matches!(self.region, Region::Circle { .. }) {
            let n = self.len();
            vec![(i + 1) % n, (i + n - 1) % n]
        } else {
            Vec::new()
        }
    }

    /// Index of the grid node nearest to `z`.
    pub fn nearest_node(&self, z: Complex64) -> usize {
        if let Region::Circle { center, radius: _ } = self.region {
            let n = self.len() as f64;
            let theta = (z - center).arg().rem_euclid(std::f64::consts::TAU);
            let j = (theta / std::f64::consts::TAU * n).round() as usize % self.len();
            return j;
        }
        if let Some(lat) = &self.lattice {
            let fx = ((z.re - lat.origin.re) / lat.spacing).round() as i64;
            let fy = ((z.im - lat.origin.im) / lat.spacing).round() as i64;
            let mut best: Option<(f64, usize)> = None;
            for ring in 0..=64i64 {
                if let Some((bd, _)) = best {
                    // every cell on later rings is at least this far away
                    if (ring - 1) as f64 * lat.spacing > bd {
                        break;
                    }
                }
                let mut probe = |ix: i64, iy: i64| {
                    let key = (ix as i32, iy as i32);
                    if let Some(&idx) = lat.index.get(&key) {
                        let d = (self.nodes[idx] - z).norm();
                        if best.map_or(true, |(bd, _)| d < bd) {
                            best = Some((d, idx));
                        }
                    }
                };
                if ring == 0 {
                    probe(fx, fy);
                } else {
                    for t in -ring..=ring {
                        probe(fx + t, fy - ring);
                        probe(fx + t, fy + ring);
                    }
                    for t in (1 - ring)..ring {
                        probe(fx - ring, fy + t);
                        probe(fx + ring, fy + t);
                    }
                }
            }
            if let Some((_, idx)) = best {
                return idx;
            }
        }
        // irregular grid or far-away query: exact linear scan
        let mut best = 0;
        let mut bd = f64::INFINITY;
        for (i, &node) in self.nodes.iter().enumerate() {
            let d = (node - z).norm_sqr();
            if d < bd {
                bd = d;
                best = i;
            }
        }
        best
    }

    /// Writes the grid as columnar text with a schema header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut out = BufWriter::new(file);
        writeln!(
            out,
            "# loggas-grid v1 region={} nodes={}",
            self.region,
            self.len()
        )?;
        writeln!(out, "# re im weight e_mask cell_radius")?;
        for i in 0..self.len() {
            writeln!(
                out,
                "{:.17e} {:.17e} {:.17e} {} {:.17e}",
                self.nodes[i].re,
                self.nodes[i].im,
                self.weights[i],
                u8::from(self.e_mask[i]),
                self.cell_radius[i]
            )?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a grid written by [`MeasureGrid::save`], revalidating all
    /// structural invariants and reconstructing lattice adjacency.
    pub fn load(path: &Path) -> Result<MeasureGrid> {
        let file = std::fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| LabError::Format("empty grid file".into()))??;
        let mut region: Option<Region> = None;
        let mut declared_nodes: Option<usize> = None;
        if !header.starts_with("# loggas-grid v1") {
            return Err(LabError::Format(format!(
                "unrecognized grid header `{header}`"
            )));
        }
        for tok in header.split_whitespace() {
            if let Some(r) = tok.strip_prefix("region=") {
                region = Some(r.parse()?);
            } else if let Some(n) = tok.strip_prefix("nodes=") {
                declared_nodes = Some(n.parse().map_err(|e| {
                    LabError::Format(format!("bad node count in header: {e}"))
                })?);
            }
        }
        let region =
            region.ok_or_else(|| LabError::Format("grid header lacks region=".into()))?;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let mut e_mask = Vec::new();
        let mut cell_radius = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 5 {
                return Err(LabError::Format(format!(
                    "grid line {}: expected 5 fields, got {}",
                    lineno + 2,
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|e| LabError::Format(format!("grid line {}: {e}", lineno + 2)))
            };
            nodes.push(Complex64::new(parse(fields[0])?, parse(fields[1])?));
            weights.push(parse(fields[2])?);
            e_mask.push(fields[3] == "1");
            cell_radius.push(parse(fields[4])?);
        }
        if let Some(n) = declared_nodes {
            if n != nodes.len() {
                return Err(LabError::Format(format!(
                    "header declares {n} nodes, file has {}",
                    nodes.len()
                )));
            }
        }
        let lattice = if region.is_curve() {
            None
        } else {
            // lattice spacing is twice the (uniform) cell radius by
            // construction; irregular hand-made grids simply skip adjacency
            cell_radius
                .first()
                .and_then(|&c| Lattice::rebuild(&nodes, 2.0 * c))
        };
        let grid = MeasureGrid {
            nodes,
            weights,
            e_mask,
            cell_radius,
            region,
            lattice,
        };
        grid.validate()?;
        Ok(grid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn unit_disk(res: u32) -> MeasureGrid {
        build_grid(
            Region::Disk {
                center: c(0.0, 0.0),
                radius: 1.0,
            },
            res,
            MeasureKind::Area,
        )
        .unwrap()
    }

    #[test]
    fn disk_grid_mass_is_normalized() {
        let g = unit_disk(64);
        let total: f64 = g.weights.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn circle_grid_nodes_sit_on_the_circle() {
        let g = build_grid(
            Region::Circle {
                center: c(0.0, 0.0),
                radius: 1.0,
            },
            256,
            MeasureKind::Arclength,
        )
        .unwrap();
        assert_eq!(g.len(), 256);
        for z in &g.nodes {
            assert!((z.norm() - 1.0).abs() < 1e-12);
        }
        let total: f64 = g.weights.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn disk_radius_two_node_count_brackets() {
        let g = build_grid(
            Region::Disk {
                center: c(0.0, 0.0),
                radius: 2.0,
            },
            128,
            MeasureKind::Area,
        )
        .unwrap();
        let lower = std::f64::consts::FRAC_PI_4 * 128.0 * 128.0;
        assert!(g.len() as f64 >= lower, "count {} < {lower}", g.len());
        assert!(g.len() <= 128 * 128);
    }

    #[test]
    fn second_moment_quadrature_converges_with_order_at_least_one() {
        // ∫|z|² dν = 1/2 for normalized area measure on the unit disk
        let mut pts = Vec::new();
        for res in [32u32, 64, 128, 256] {
            let g = unit_disk(res);
            let m2 = g.integrate(|z| z.norm_sqr());
            let err = (m2 - 0.5).abs();
            pts.push(((2.0 / res as f64).ln(), err.ln()));
        }
        let n = pts.len() as f64;
        let (sx, sy): (f64, f64) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
        let sxx: f64 = pts.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = pts.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        assert!(slope >= 1.0, "observed quadrature order {slope} < 1");
        let finest = pts.last().unwrap().1.exp();
        assert!(finest < 5e-4, "finest-grid error {finest} too large");
    }

    #[test]
    fn builtin_weight_values() {
        let gin = WeightSpec::ginibre();
        assert_eq!(gin.eval(c(0.0, 0.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(gin.eval(c(1.0, 2.0)).unwrap(), 5.0, epsilon = 1e-14);
        let fs = WeightSpec::fubini_study();
        assert_eq!(fs.eval(c(0.0, 0.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(
            fs.eval(c(2.0, 0.0)).unwrap(),
            5.0f64.ln(),
            epsilon = 1e-15
        );
        let quartic = WeightSpec::quartic();
        assert_abs_diff_eq!(
            quartic.eval(c(0.0, 1.5)).unwrap(),
            0.5 * 1.5f64.powi(4),
            epsilon = 1e-14
        );
        let lp = WeightSpec::log_plus();
        assert_eq!(lp.eval(c(0.5, 0.0)).unwrap(), 0.0);
        assert_abs_diff_eq!(
            lp.eval(c(3.0, 0.0)).unwrap(),
            9.0f64.ln(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn non_finite_weight_is_reported_as_overflow() {
        let bad = WeightSpec::custom("bad", GrowthClass::Superlogarithmic, |z| {
            if z.re > 1.0 {
                f64::INFINITY
            } else {
                0.0
            }
        });
        let err = bad.eval(c(2.0, 0.0)).unwrap_err();
        assert_eq!(err.name(), "weight-overflow");
        assert!(bad.eval(c(0.0, 0.0)).is_ok());
    }

    #[test]
    fn growth_class_verification() {
        WeightSpec::ginibre().verify_growth().unwrap();
        WeightSpec::quartic().verify_growth().unwrap();
        // a weight that merely tracks ln(1+|z|²) cannot pass the
        // superlogarithmic margin test
        let liar = WeightSpec::custom("liar", GrowthClass::Superlogarithmic, |z| {
            z.norm_sqr().ln_1p()
        });
        assert!(liar.verify_growth().is_err());
        WeightSpec::zero().verify_growth().unwrap();
    }

    #[test]
    fn round_reference_curvature_has_unit_mass() {
        // total curvature mass of a radial profile is the slope range
        // f'(+∞) − f'(−∞); quadrature of f'' over [-T, T] captures it up
        // to exponentially small tails
        let t_lo = -46.0;
        let t_hi = 46.0;
        let m = 40_000;
        let dt = (t_hi - t_lo) / m as f64;
        let f = |t: f64| Reference::FubiniStudy.radial(t);
        let mut mass = 0.0;
        for i in 1..m {
            let t = t_lo + i as f64 * dt;
            mass += (f(t + dt) - 2.0 * f(t) + f(t - dt)) / dt;
        }
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn circle_reference_kernel_normalization() {
        // ∫ ln|z-w|² dω₀(z) over the unit circle equals ln⁺|w|², so the
        // pair kernel with C' = 0 integrates to zero against ω₀
        let g = build_grid(
            Region::Circle {
                center: c(0.0, 0.0),
                radius: 1.0,
            },
            1024,
            MeasureKind::Arclength,
        )
        .unwrap();
        for w in [c(0.5, 0.0), c(0.3, -1.2), c(1.7, 0.4)] {
            let quad = g.integrate(|z| (z - w).norm_sqr().ln());
            let expected = w.norm_sqr().ln().max(0.0);
            assert_abs_diff_eq!(quad, expected, epsilon = 1e-3);
        }
    }

    #[test]
    fn round_reference_pair_kernel_integrates_to_zero() {
        // Σ_i g₀(z_i, w) ω₀_i ≈ 0 on the rim-folded reference grid:
        // validates both the constant C' = 1 and the rim folding
        let refgrid = fubini_study_reference(4.0, 160).unwrap();
        let total: f64 = refgrid.weights.iter().sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
        for w in [c(0.0, 0.0), c(1.0, 0.5), c(-1.8, 0.3)] {
            let pair = refgrid.integrate(|z| {
                (z - w).norm_sqr().ln() - Reference::FubiniStudy.eval(z)
                    - Reference::FubiniStudy.eval(w)
                    + Reference::FubiniStudy.green_constant()
            });
            assert!(
                pair.abs() < 5e-3,
                "pair kernel mean {pair} at w = {w} exceeds tolerance"
            );
        }
    }

    #[test]
    fn reference_constants() {
        assert_eq!(Reference::FubiniStudy.green_constant(), 1.0);
        assert_eq!(Reference::FubiniStudy.energy_offset(), -0.5);
        assert_eq!(Reference::LogPlus.green_constant(), 0.0);
        assert_eq!(Reference::LogPlus.energy_offset(), 0.0);
    }

    #[test]
    fn degenerate_regions_are_empty_support() {
        let err = build_grid(
            Region::Disk {
                center: c(0.0, 0.0),
                radius: 0.0,
            },
            64,
            MeasureKind::Area,
        )
        .unwrap_err();
        assert_eq!(err.name(), "empty-support");
        let err = build_grid(
            Region::Annulus {
                center: c(0.0, 0.0),
                inner: 2.0,
                outer: 2.0,
            },
            64,
            MeasureKind::Area,
        )
        .unwrap_err();
        assert_eq!(err.name(), "empty-support");
    }

    #[test]
    fn low_resolution_is_rejected() {
        let err = build_grid(
            Region::Disk {
                center: c(0.0, 0.0),
                radius: 1.0,
            },
            4,
            MeasureKind::Area,
        )
        .unwrap_err();
        assert_eq!(err.name(), "invalid-parameter");
    }

    #[test]
    fn annulus_grid_respects_membership() {
        let region = Region::Annulus {
            center: c(0.0, 0.0),
            inner: 0.5,
            outer: 1.5,
        };
        let g = build_grid(region, 64, MeasureKind::Area).unwrap();
        for z in &g.nodes {
            let d = z.norm();
            assert!((0.5..=1.5).contains(&d));
        }
    }

    #[test]
    fn mask_restriction_shrinks_support_and_can_empty_it() {
        let g = unit_disk(32);
        let restricted = g.restrict_mask(|z| z.re > 0.0).unwrap();
        assert!(restricted.masked_count() < g.masked_count());
        assert!(restricted.masked_count() > 0);
        // weights untouched: same underlying measure
        assert_eq!(restricted.weights, g.weights);
        let err = g.restrict_mask(|z| z.re > 10.0).unwrap_err();
        assert_eq!(err.name(), "empty-support");
    }

    #[test]
    fn lattice_neighbors_and_nearest_node() {
        let g = unit_disk(32);
        let h = g.spacing().unwrap();
        // an interior node has all four lattice neighbors at distance h
        let center_idx = g.nearest_node(c(0.0, 0.0));
        let nbrs = g.neighbor_indices(center_idx);
        assert_eq!(nbrs.len(), 4);
        for &j in &nbrs {
            assert_abs_diff_eq!((g.nodes[j] - g.nodes[center_idx]).norm(), h, epsilon = 1e-12);
        }
        // nearest_node inverts node positions, including boundary ones
        for &i in &[0usize, g.len() / 2, g.len() - 1] {
            assert_eq!(g.nearest_node(g.nodes[i]), i);
        }
        // a far-away query still resolves (linear-scan fallback)
        let far = g.nearest_node(c(50.0, 50.0));
        assert!(g.nodes[far].norm() > 0.5);
    }

    #[test]
    fn circle_neighbors_are_ring_neighbors() {
        let g = build_grid(
            Region::Circle {
                center: c(0.0, 0.0),
                radius: 1.0,
            },
            64,
            MeasureKind::Arclength,
        )
        .unwrap();
        assert_eq!(g.neighbor_indices(0), vec![1, 63]);
        assert_eq!(g.nearest_node(g.nodes[17]), 17);
    }

    #[test]
    fn save_load_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.txt");
        let g = unit_disk(24)
            .restrict_mask(|z| z.im >= 0.0)
            .unwrap();
        g.save(&path).unwrap();
        let back = MeasureGrid::load(&path).unwrap();
        assert_eq!(back.len(), g.len());
        assert_eq!(back.region, g.region);
        for i in 0..g.len() {
            assert_eq!(back.nodes[i], g.nodes[i]);
            assert_eq!(back.weights[i], g.weights[i]);
            assert_eq!(back.e_mask[i], g.e_mask[i]);
            assert_eq!(back.cell_radius[i], g.cell_radius[i]);
        }
        // lattice adjacency survives the roundtrip
        let idx = back.nearest_node(c(0.3, 0.4));
        assert_eq!(
            back.neighbor_indices(idx).len(),
            g.neighbor_indices(idx).len()
        );
    }

    #[test]
    fn malformed_grid_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "# not a grid\n1 2 3\n").unwrap();
        let err = MeasureGrid::load(&path).unwrap_err();
        assert_eq!(err.name(), "format");
        assert_eq!(err.exit_code(), 3);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn region_display_parse_roundtrip(
            cx in -3.0f64..3.0, cy in -3.0f64..3.0,
            a in 0.1f64..4.0, b in 0.1f64..4.0,
            kind in 0usize..4,
        ) {
            let region = match kind {
                0 => Region::Disk { center: c(cx, cy), radius: a },
                1 => Region::Annulus {
                    center: c(cx, cy),
                    inner: a.min(b) * 0.5,
                    outer: a.max(b) + 0.1,
                },
                2 => Region::Rectangle {
                    center: c(cx, cy),
                    half_width: a,
                    half_height: b,
                },
                _ => Region::Circle { center: c(cx, cy), radius: a },
            };
            let back: Region = region.to_string().parse().unwrap();
            prop_assert_eq!(back, region);
        }

        #[test]
        fn every_construction_path_normalizes_mass(
            r in 0.4f64..3.0,
            res in 8u32..48,
            curve in proptest::bool::ANY,
        ) {
            let grid = if curve {
                build_grid(
                    Region::Circle { center: c(0.0, 0.0), radius: r },
                    res.max(8),
                    MeasureKind::Arclength,
                ).unwrap()
            } else {
                build_grid_with_density(
                    Region::Disk { center: c(0.0, 0.0), radius: r },
                    res.max(8),
                    |z| 1.0 + z.re * z.re,
                ).unwrap()
            };
            let total: f64 = grid.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            grid.validate().unwrap();
        }
    }
}
