//! Distribution functions, rectangle probabilities and scalar searches.

mod bvn;
mod mvn;
mod quadrature;
mod search;
mod univariate;

pub use mvn::{
    equicoordinate_quantile, factor_loadings, mvn_cdf, mvn_cdf_factor, mvn_probability, mvt_cdf,
    mvt_cdf_factor, IntegrationSettings, ProbabilityEstimate,
};
pub use quadrature::gauss_legendre;
pub use search::{min_integer_satisfying, minimize_scalar, solve_root, ScalarMinimum};
pub use univariate::{
    std_normal_cdf, std_normal_pdf, std_normal_quantile, student_t_cdf, student_t_quantile,
};
