//! Split-chain convergence diagnostics.

use crate::error::{Error, Result};

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn var(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

fn split(chains: &[Vec<f64>]) -> Result<Vec<&[f64]>> {
    if chains.len() < 2 {
        return Err(Error::invalid(format!("need at least 2 chains, got {}", chains.len())));
    }
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if n < 4 {
        return Err(Error::invalid(format!("need at least 4 draws per chain, got {n}")));
    }
    let half = n / 2;
    Ok(chains
        .iter()
        .flat_map(|c| [&c[..half], &c[n - half..n]])
        .collect())
}

/// Split-chain potential scale reduction factor. Constant input gives 1.0.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    let parts = split(chains)?;
    let n = parts[0].len() as f64;
    let means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let w = parts.iter().map(|c| var(c)).sum::<f64>() / parts.len() as f64;
    let b = n * var(&means);
    if w <= 0.0 || !w.is_finite() {
        return Ok(if b > 0.0 { f64::INFINITY } else { 1.0 });
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    Ok((var_plus / w).sqrt())
}

fn autocov(xs: &[f64], lag: usize) -> f64 {
    let m = mean(xs);
    let n = xs.len();
    xs[..n - lag]
        .iter()
        .zip(&xs[lag..])
        .map(|(a, b)| (a - m) * (b - m))
        .sum::<f64>()
        / n as f64
}

/// Effective sample size across split chains using Geyer's initial
/// monotone positive sequence.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    let parts = split(chains)?;
    let m = parts.len() as f64;
    let n = parts[0].len();
    let w = parts.iter().map(|c| var(c)).sum::<f64>() / m;
    let means: Vec<f64> = parts.iter().map(|c| mean(c)).collect();
    let b_over_n = var(&means);
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus <= 0.0 || !var_plus.is_finite() {
        return Ok(m * n as f64);
    }
    let rho = |lag: usize| -> f64 {
        let acov = parts.iter().map(|c| autocov(c, lag)).sum::<f64>() / m;
        1.0 - (w - acov) / var_plus
    };
    let mut tau = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let mut pair = rho(lag) + rho(lag + 1);
        if pair < 0.0 {
            break;
        }
        if pair > prev_pair {
            pair = prev_pair;
        }
        prev_pair = pair;
        tau += pair;
        lag += 2;
    }
    let tau = (2.0 * tau - 1.0).max(1.0 / (m * n as f64).log10().max(1.0));
    Ok(m * n as f64 / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn noise(seed: u64, n: usize, mu: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(mu, 1.0).unwrap();
        (0..n).map(|_| d.sample(&mut rng)).collect()
    }

    #[test]
    fn iid_chains_near_one() {
        let r = split_rhat(&[noise(1, 1000, 0.0), noise(2, 1000, 0.0)]).unwrap();
        assert!((r - 1.0).abs() < 0.05, "{r}");
    }

    #[test]
    fn disjoint_means_flagged() {
        let r = split_rhat(&[noise(1, 500, -10.0), noise(2, 500, 10.0)]).unwrap();
        assert!(r > 1.5, "{r}");
    }

    #[test]
    fn constant_is_one() {
        assert_eq!(split_rhat(&[vec![3.0; 10], vec![3.0; 10]]).unwrap(), 1.0);
    }

    #[test]
    fn too_few_draws_or_chains() {
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0, 4.0]]).is_err());
        assert!(split_rhat(&[vec![1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0]]).is_err());
    }

    #[test]
    fn ess_of_iid_is_near_total() {
        let ess = effective_sample_size(&[noise(3, 2000, 0.0), noise(4, 2000, 0.0)]).unwrap();
        assert!(ess > 3000.0 && ess < 5500.0, "{ess}");
    }

    #[test]
    fn ess_of_ar1_is_reduced() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = Normal::new(0.0, 1.0).unwrap();
        let ar = |rng: &mut ChaCha8Rng| {
            let mut x = 0.0;
            (0..4000).map(|_| { x = 0.9 * x + d.sample(rng); x }).collect::<Vec<_>>()
        };
        let c = vec![ar(&mut rng), ar(&mut rng)];
        let ess = effective_sample_size(&c).unwrap();
        // theory: n (1 - phi) / (1 + phi) = 8000 * 0.1 / 1.9 ~ 421
        assert!(ess > 250.0 && ess < 650.0, "{ess}");
    }
}
