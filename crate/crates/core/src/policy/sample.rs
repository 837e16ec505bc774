use rand::Rng;

use crate::dist::ProbabilityVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Temperature {
    Value(f64),
    Greedy,
}

/// Draws a token from `dist` scaled by `temperature`; `Greedy` returns the
/// lowest-index argmax.
pub fn sample_token<R: Rng + ?Sized>(dist: &ProbabilityVector, rng: &mut R, temperature: Temperature) -> usize {
    let tau = match temperature {
        Temperature::Greedy => return dist.argmax(),
        Temperature::Value(t) if t <= 0.0 || !t.is_finite() => return dist.argmax(),
        Temperature::Value(t) => t,
    };
    let probs = dist.probs();
    let weights: Vec<f64> = if tau == 1.0 {
        probs.to_vec()
    } else {
        let logw: Vec<f64> = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() / tau } else { f64::NEG_INFINITY })
            .collect();
        let lse = crate::dist::log_sum_exp(&logw);
        logw.iter().map(|&l| (l - lse).exp()).collect()
    };
    let u: f64 = rng.random_range(0.0..1.0);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}
