use super::AgentError;

/// Discounted reward-to-go from step `t` of an `n`-step episode, given the
/// rewards `r_t .. r_{n-1}` and the bootstrap value of the final state:
/// `sum_i gamma^i r_{t+i} + gamma^(n-t) * bootstrap`.
pub fn discounted_return(
    rewards: &[f64],
    value_bootstrap: f64,
    gamma: f64,
    t: usize,
    n: usize,
) -> Result<f64, AgentError> {
    if t >= n || rewards.len() != n - t {
        return Err(AgentError::Trace(format!(
            "{} rewards for steps {t}..{n}",
            rewards.len()
        )));
    }
    let mut total = 0.0;
    let mut discount = 1.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    Ok(total + discount * value_bootstrap)
}

/// Returns for every step by the backward recursion `R <- r_i + gamma * R`,
/// seeded with the bootstrap value.
pub fn returns_backward(rewards: &[f64], value_bootstrap: f64, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = value_bootstrap;
    for (i, r) in rewards.iter().enumerate().rev() {
        acc = r + gamma * acc;
        out[i] = acc;
    }
    out
}

/// `R - V`: positive when the action beat the state's expected return.
pub fn advantage(ret: f64, value: f64) -> f64 {
    ret - value
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn closed_form_cases() {
        assert_eq!(discounted_return(&[1.0, 1.0], 4.0, 0.5, 0, 2).unwrap(), 2.5);
        let r = [0.3, -1.2, 4.0, 0.5];
        assert_eq!(discounted_return(&r, 0.0, 1.0, 0, 4).unwrap(), r.iter().sum::<f64>());
        assert_eq!(
            discounted_return(&r[2..], 2.0, 0.9, 2, 4).unwrap(),
            4.0 + 0.9 * 0.5 + 0.81 * 2.0
        );
    }

    #[test]
    fn closed_form_rejects_bad_lengths() {
        assert!(discounted_return(&[1.0], 0.0, 0.9, 0, 2).is_err());
        assert!(discounted_return(&[], 0.0, 0.9, 2, 2).is_err());
    }

    #[test]
    fn advantage_cases() {
        assert_eq!(advantage(2.5, 2.0), 0.5);
        assert_eq!(advantage(1.25, 1.25), 0.0);
        assert_eq!(advantage(0.0, 1.0), -1.0);
    }

    proptest! {
        #[test]
        fn recursion_matches_closed_form(
            rewards in proptest::collection::vec(-5.0f64..5.0, 1..=10),
            boot in -3.0f64..3.0,
            gamma in 0.01f64..=1.0,
        ) {
            let n = rewards.len();
            let rec = returns_backward(&rewards, boot, gamma);
            for t in 0..n {
                let closed = discounted_return(&rewards[t..], boot, gamma, t, n).unwrap();
                prop_assert!((closed - rec[t]).abs() < 1e-12);
            }
        }
    }
}
