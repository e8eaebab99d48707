//! Small numeric diagnostics shared by tests and validation commands:
//! composite Simpson quadrature, Kolmogorov–Smirnov statistics and a
//! chi-square uniformity statistic.

/// Composite Simpson integration of `f` over `[a, b]` with `n` panels
/// (`n` is rounded up to the next even number).
pub fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
    let n = if n % 2 == 0 { n.max(2) } else { n + 1 };
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let x = a + h * i as f64;
        acc += if i % 2 == 0 { 2.0 * f(x) } else { 4.0 * f(x) };
    }
    acc * h / 3.0
}

/// One-sample KS statistic: sup |ECDF(x) - cdf(x)| over the sample.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &mut [f64], cdf: F) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("non-finite sample"));
    let n = samples.len() as f64;
    let mut sup: f64 = 0.0;
    for (i, &x) in samples.iter().enumerate() {
        let c = cdf(x);
        sup = sup.max((c - i as f64 / n).abs());
        sup = sup.max(((i + 1) as f64 / n - c).abs());
    }
    sup
}

/// Two-sample KS statistic between two empirical distributions.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("non-finite sample"));
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut sup: f64 = 0.0;
    while i < a.len() && j < b.len() {
        if a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
        sup = sup.max((i as f64 / na - j as f64 / nb).abs());
    }
    sup
}

/// Pearson chi-square statistic of observed counts against a uniform
/// distribution over `counts.len()` bins.
pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_polynomials_exactly() {
        // Simpson is exact on cubics.
        let v = simpson(|x| x * x * x - 2.0 * x + 1.0, 0.0, 2.0, 8);
        assert!((v - (4.0 - 4.0 + 2.0)).abs() < 1e-12);
    }

    #[test]
    fn ks_of_exact_uniform_grid_is_small() {
        let n = 10_000;
        let mut xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let ks = ks_statistic(&mut xs, |x| x.clamp(0.0, 1.0));
        assert!(ks <= 0.5 / n as f64 + 1e-12, "ks = {ks}");
    }

    #[test]
    fn chi_square_zero_for_perfectly_uniform_counts() {
        assert_eq!(chi_square_uniform(&[5, 5, 5, 5]), 0.0);
    }
}
