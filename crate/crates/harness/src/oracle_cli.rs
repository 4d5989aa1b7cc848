//! `mollify oracle`: smoothed value, standard error and gradient as CSV.

use mollify_core::numerics::RngStream;
use mollify_core::oracle::{mc_mollified_grad, mc_mollify, BuiltinObjective, SmoothingSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("unknown objective `{0}` (expected quadratic, absval, double-well or rosenbrock)")]
    UnknownObjective(String),
    #[error("cannot parse theta {0:?}: expected comma-separated numbers")]
    Theta(String),
    #[error(transparent)]
    Core(#[from] mollify_core::Error),
}

pub fn parse_theta(text: &str) -> Result<Vec<f64>, OracleError> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
        .collect::<Option<Vec<f64>>>()
        .filter(|v| !v.is_empty())
        .ok_or_else(|| OracleError::Theta(text.to_string()))
}

/// Header plus one data line. Value and gradient share the seed, so they
/// are computed under common random numbers.
pub fn run_oracle(objective: &str, theta: &[f64], sigma: f64, samples: usize, seed: u64) -> Result<String, OracleError> {
    let obj = BuiltinObjective::parse(objective).ok_or_else(|| OracleError::UnknownObjective(objective.into()))?;
    let handle = obj.handle(theta.len())?;
    let spec = SmoothingSpec::new(sigma, samples)?;
    let est = mc_mollify(&handle, theta, spec, &mut RngStream::new(seed))?;
    let grad = mc_mollified_grad(&handle, theta, spec, &mut RngStream::new(seed))?;
    let mut header = vec!["value".to_string(), "std_error".to_string()];
    header.extend((1..=theta.len()).map(|i| format!("grad_{i}")));
    let mut fields = vec![est.value.to_string(), est.std_error.to_string()];
    fields.extend(grad.mean.iter().map(f64::to_string));
    Ok(format!("{}\n{}\n", header.join(","), fields.join(",")))
}
