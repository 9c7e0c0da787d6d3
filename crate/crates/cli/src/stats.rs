//! Small summary statistics used by the recipes.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Paired one-sided sign test of `a > b`. Ties are discarded. Returns
/// `(wins, informative pairs, p)` with `p = P(Bin(n, 1/2) >= wins)`.
pub fn sign_test(a: &[f64], b: &[f64]) -> (usize, usize, f64) {
    let mut wins = 0;
    let mut n = 0;
    for (x, y) in a.iter().zip(b) {
        if x != y {
            n += 1;
            if x > y {
                wins += 1;
            }
        }
    }
    (wins, n, binomial_upper_tail(n, wins))
}

/// `P(X >= k)` for `X ~ Bin(n, 1/2)`, summed in log space.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=n).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();
    let ln_half_n = n as f64 * 0.5f64.ln();
    (k..=n)
        .map(|j| (ln_fact[n] - ln_fact[j] - ln_fact[n - j] + ln_half_n).exp())
        .sum::<f64>()
        .min(1.0)
}
