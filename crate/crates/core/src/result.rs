//! Test result container shared by the permutation and Monte Carlo tests.

use serde::{Deserialize, Serialize};

use crate::rng::RngStream;

/// Outcome of a randomized hypothesis test.
///
/// The p-value is always `(1 + #{null_draws > statistic}) / (m_used + 1)`,
/// so it lies on the grid `{1/(m_used+1), ..., 1}` and never reaches zero.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub null_draws: Vec<f64>,
    pub m_used: usize,
    pub seed: RngStream,
}

impl TestResult {
    pub fn from_null_draws(statistic: f64, null_draws: Vec<f64>, seed: RngStream) -> Self {
        let m = null_draws.len();
        let exceed = null_draws.iter().filter(|&&t| t > statistic).count();
        TestResult {
            statistic,
            p_value: (1 + exceed) as f64 / (m + 1) as f64,
            null_draws,
            m_used: m,
            seed,
        }
    }

    pub fn reject(&self, alpha: f64) -> bool {
        self.p_value <= alpha
    }
}
