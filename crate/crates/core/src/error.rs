use thiserror::Error;

/// Every failure mode surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point {0:?} lies within 1e-8 of a chart pole")]
    ChartDomain([f64; 2]),
    #[error("invalid manifold model: {0}")]
    InvalidModel(String),
    #[error("shooting did not converge after {0} iterations")]
    Convergence(usize),
    #[error("energy drift {drift:.3e} exceeds 10x tolerance {tol:.1e}")]
    Tolerance { drift: f64, tol: f64 },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("curve tangent vanishes at node {0}")]
    DegenerateCurve(usize),
    #[error("conormal samples {0} and {1} coincide")]
    DuplicateSamples(usize, usize),
    #[error("conormal sample {0} lies in no cover ball")]
    Cover(usize),
    #[error("time {requested} exceeds horizon cap {cap}; classification inconclusive")]
    Inconclusive { requested: f64, cap: f64 },
    #[error("coloring needs {needed} colors, budget is {budget}")]
    ColorBudget { needed: usize, budget: usize },
    #[error("matrix is not hyperbolic unimodular: {0}")]
    NonHyperbolic(String),
    #[error("iterates shrink by factor {0:.3} per step, need at least 1.2")]
    NonContracting(f64),
    #[error("principal angle {angle:.3e} rad below threshold {threshold}")]
    Transversality { angle: f64, threshold: f64 },
    #[error("constraint violated: {0}")]
    Constraint(String),
    #[error("thickening estimates {0:.6e} and {1:.6e} differ by more than 10%")]
    NoConvergence(f64, f64),
    #[error("degree {0} exceeds the overflow guard")]
    OverflowGuard(u64),
    #[error("quadrature levels disagree: {0:.3e} vs {1:.3e}")]
    Quadrature(f64, f64),
    #[error("grid refinement changed estimate by {0:.2}%")]
    Resolution(f64),
    #[error("degenerate abscissae in fit")]
    Rank,
    #[error("symbol needs rank above {0} for 1e-6 accuracy")]
    RankCap(usize),
    #[error("no non-self-looping certificate accompanies the symbol")]
    CertificateMissing,
    #[error("configuration error: {0}")]
    Config(String),
    #[error("manifests describe different experiments: {0} vs {1}")]
    SchemaMismatch(String, String),
    #[error("assertion failed: {0}")]
    Assertion(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
