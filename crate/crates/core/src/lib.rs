pub mod multiindex;
pub mod scalar;
pub mod shape_calculus;
pub mod boundary_basis;
pub mod mapping;
pub mod fem;
pub mod greedy;
pub mod analysis;
pub mod bounds;
pub mod experiment;

pub type Mat2f = shape_calculus::Mat2<f64>;
pub type DecaySeriesf = analysis::DecaySeries<f64>;
pub type RateFitf = analysis::RateFit<f64>;
pub type MollifierConstantsf = bounds::MollifierConstants<f64>;
