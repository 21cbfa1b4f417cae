//! Error taxonomy shared by every module in the crate.
//!
//! Each variant carries the short machine-readable name that the
//! executables print and that the test suite matches on.  The names are
//! stable strings; matching code should use [`LabError::name`] rather
//! than formatting the variant.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, LabError>;

/// Failure modes of the numerical pipeline.
#[derive(Debug, Error)]
pub enum LabError {
    /// A grid restricted to a region kept no nodes, or a constraint set
    /// used for an envelope or equilibrium computation was empty.
    #[error("empty-support: {0}")]
    EmptySupport(String),

    /// Evaluating `exp(-k φ)` (or a derived quantity) overflowed or
    /// produced a non-finite value at some node.
    #[error("weight-overflow: {0}")]
    WeightOverflow(String),

    /// The weighted Gram matrix of the monomial basis is numerically
    /// singular: its estimated condition number exceeds the admissible
    /// bound, so the inner product cannot distinguish basis directions.
    #[error("degenerate-inner-product: {0}")]
    DegenerateInnerProduct(String),

    /// A Cholesky or LU factorization of a Gram-type matrix failed.
    #[error("singular-gram: {0}")]
    SingularGram(String),

    /// A sampler needed `N` independent feature directions but the
    /// feature matrix on the grid has lower numerical rank.
    #[error("kernel-rank: {0}")]
    KernelRank(String),

    /// The quadratic-program solver stalled: the duality gap stopped
    /// improving before reaching the requested tolerance.
    #[error("qp-stall: {0}")]
    QpStall(String),

    /// A radial profile that must be convex with slopes in `[0, 1]`
    /// failed that check.
    #[error("not-psh: {0}")]
    NotPsh(String),

    /// A quantity that must be monotone in its argument (an envelope
    /// under pointwise-ordered obstacles) was not.
    #[error("not-monotone: {0}")]
    NotMonotone(String),

    /// A measure placed mass on nodes outside the admissible constraint
    /// set where it is required to be supported.
    #[error("support-off-E: {0}")]
    SupportOffE(String),

    /// A requested deviation half-space does not intersect the probability
    /// simplex over the grid, so the constrained minimization is void.
    #[error("infeasible-deviation: {0}")]
    InfeasibleDeviation(String),

    /// A decay-rate fit was requested with fewer than two usable
    /// (scale, estimate) points.
    #[error("insufficient-decay-data: {0}")]
    InsufficientDecayData(String),

    /// A caller violated a documented precondition (mismatched grids,
    /// non-positive resolution, out-of-range parameter, …).
    #[error("invalid-parameter: {0}")]
    InvalidParameter(String),

    /// Reading or writing one of the on-disk formats failed.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// A file did not conform to the expected schema.
    #[error("format: {0}")]
    Format(String),
}

impl LabError {
    /// Stable machine-readable name of the failure class.
    pub fn name(&self) -> &'static str {
        match self {
            LabError::EmptySupport(_) => "empty-support",
            LabError::WeightOverflow(_) => "weight-overflow",
            LabError::DegenerateInnerProduct(_) => "degenerate-inner-product",
            LabError::SingularGram(_) => "singular-gram",
            LabError::KernelRank(_) => "kernel-rank",
            LabError::QpStall(_) => "qp-stall",
            LabError::NotPsh(_) => "not-psh",
            LabError::NotMonotone(_) => "not-monotone",
            LabError::SupportOffE(_) => "support-off-E",
            LabError::InfeasibleDeviation(_) => "infeasible-deviation",
            LabError::InsufficientDecayData(_) => "insufficient-decay-data",
            LabError::InvalidParameter(_) => "invalid-parameter",
            LabError::Io(_) => "io",
            LabError::Format(_) => "format",
        }
    }

    /// Process exit code for the failure class: `2` for configuration,
    /// I/O, and format problems, `3` for numerical or modelling failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Io(_) | LabError::Format(_) | LabError::InvalidParameter(_) => 2,
            _ => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_match_display_prefix() {
        let cases: Vec<LabError> = vec![
            LabError::EmptySupport("x".into()),
            LabError::WeightOverflow("x".into()),
            LabError::DegenerateInnerProduct("x".into()),
            LabError::SingularGram("x".into()),
            LabError::KernelRank("x".into()),
            LabError::QpStall("x".into()),
            LabError::NotPsh("x".into()),
            LabError::NotMonotone("x".into()),
            LabError::SupportOffE("x".into()),
            LabError::InfeasibleDeviation("x".into()),
            LabError::InsufficientDecayData("x".into()),
            LabError::InvalidParameter("x".into()),
            LabError::Format("x".into()),
        ];
        for err in cases {
            let shown = err.to_string();
            assert!(
                shown.starts_with(err.name()),
                "display `{shown}` must start with name `{}`",
                err.name()
            );
        }
    }

    #[test]
    fn exit_codes_split_config_from_numeric() {
        assert_eq!(LabError::QpStall("x".into()).exit_code(), 3);
        assert_eq!(LabError::EmptySupport("x".into()).exit_code(), 3);
        assert_eq!(LabError::SingularGram("x".into()).exit_code(), 3);
        assert_eq!(LabError::Format("x".into()).exit_code(), 2);
        assert_eq!(LabError::InvalidParameter("x".into()).exit_code(), 2);
        let io = LabError::Io(std::io::Error::new(std::io::ErrorKind::Other, "x"));
        assert_eq!(io.exit_code(), 2);
    }
}
