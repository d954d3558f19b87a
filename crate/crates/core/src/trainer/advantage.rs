use super::TrainError;

pub const ADVANTAGE_EPS: f64 = 1e-6;

/// Group-relative advantages: `(r − mean) / (σ + eps)` with the population
/// standard deviation. A group whose rewards are all equal gets exact zeros.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>, TrainError> {
    if rewards.len() < 2 {
        return Err(TrainError::GroupTooSmall(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(TrainError::NonFiniteReward);
    }
    if rewards.iter().all(|r| *r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + eps;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-5)
    }

    #[test]
    fn worked_examples() {
        assert_eq!(group_advantages(&[1.0; 4], ADVANTAGE_EPS).unwrap(), vec![0.0; 4]);
        assert!(close(&group_advantages(&[1.0, 0.0], ADVANTAGE_EPS).unwrap(), &[1.0, -1.0]));
        assert!(close(&group_advantages(&[1.0, 0.0, 0.0, 1.0], ADVANTAGE_EPS).unwrap(), &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn singleton_group_is_rejected() {
        assert!(matches!(group_advantages(&[1.0], ADVANTAGE_EPS), Err(TrainError::GroupTooSmall(1))));
    }

    #[test]
    fn repeated_fraction_is_exactly_zero() {
        assert_eq!(group_advantages(&[0.1, 0.1, 0.1], ADVANTAGE_EPS).unwrap(), vec![0.0; 3]);
    }
}
