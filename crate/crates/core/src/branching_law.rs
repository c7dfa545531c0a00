//! Offspring laws and the induced KPP nonlinearity.

use crate::error::{config, Error, Result};

/// Finitely supported offspring law with mean 2.
#[derive(Debug, Clone, PartialEq)]
pub struct OffspringDistribution {
    /// (k, p_k) sorted by k, zero weights dropped.
    probs: Vec<(u32, f64)>,
    cumulative: Vec<f64>,
    /// p_0, p_1, ..., p_kmax with zeros filled in.
    dense: Vec<f64>,
}

impl OffspringDistribution {
    pub fn new(probs: Vec<(u32, f64)>) -> Result<Self> {
        let mut probs: Vec<(u32, f64)> = probs.into_iter().filter(|&(_, p)| p != 0.0).collect();
        probs.sort_by_key(|&(k, _)| k);
        if probs.is_empty() {
            return config("offspring law is empty");
        }
        if probs.windows(2).any(|w| w[0].0 == w[1].0) {
            return config("offspring law lists a value of k twice");
        }
        if probs.iter().any(|&(k, p)| k == 0 || !(p > 0.0 && p <= 1.0)) {
            return config("offspring law needs k >= 1 and p_k in (0, 1]");
        }
        let total: f64 = probs.iter().map(|&(_, p)| p).sum();
        if (total - 1.0).abs() > 1e-12 {
            return config(format!("offspring probabilities sum to {total}, not 1"));
        }
        let mean: f64 = probs.iter().map(|&(k, p)| k as f64 * p).sum();
        if (mean - 2.0).abs() > 1e-10 {
            return config(format!("offspring mean is {mean}, must be 2"));
        }
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|&(_, p)| {
                acc += p;
                acc
            })
            .collect();
        let kmax = probs.last().map_or(1, |&(k, _)| k) as usize;
        let mut dense = vec![0.0; kmax + 1];
        for &(k, p) in &probs {
            dense[k as usize] = p;
        }
        Ok(Self { probs, cumulative, dense })
    }

    pub fn binary() -> Self {
        Self::new(vec![(2, 1.0)]).expect("binary law is valid")
    }

    pub fn probs(&self) -> &[(u32, f64)] {
        &self.probs
    }

    pub fn max_k(&self) -> u32 {
        self.probs.last().map_or(1, |&(k, _)| k)
    }

    pub fn second_moment(&self) -> f64 {
        self.probs.iter().map(|&(k, p)| (k as f64).powi(2) * p).sum()
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        if self.probs.len() == 1 {
            return self.probs[0].0;
        }
        let u: f64 = rng.random();
        let i = self.cumulative.partition_point(|&c| c <= u);
        self.probs[i.min(self.probs.len() - 1)].0
    }

    /// Generating function Σ p_k s^k.
    #[inline]
    pub fn pgf(&self, s: f64) -> f64 {
        self.dense.iter().rev().fold(0.0, |acc, &p| acc * s + p)
    }
}

/// F(u) = (1 − u) − Σ p_k (1 − u)^k and c(w) = F(w)/w.
#[derive(Debug, Clone, PartialEq)]
pub struct Nonlinearity {
    dist: OffspringDistribution,
    /// Coefficients of c as a polynomial in w.
    c_coeffs: Vec<f64>,
}

impl Nonlinearity {
    pub fn new(dist: OffspringDistribution) -> Self {
        // F(w) = Σ_j a_j w^j with a_0 = 0, so c(w) = Σ_j a_{j+1} w^j.
        let kmax = dist.max_k() as usize;
        let mut a = vec![0.0; kmax + 1];
        a[0] += 1.0;
        a[1] -= 1.0;
        for &(k, p) in dist.probs() {
            let k = k as usize;
            let mut binom = 1.0;
            for (j, aj) in a.iter_mut().enumerate().take(k + 1) {
                let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
                *aj -= p * sign * binom;
                binom = binom * (k - j) as f64 / (j + 1) as f64;
            }
        }
        let c_coeffs = a[1..].to_vec();
        Self { dist, c_coeffs }
    }

    pub fn binary() -> Self {
        Self::new(OffspringDistribution::binary())
    }

    pub fn dist(&self) -> &OffspringDistribution {
        &self.dist
    }

    /// F without domain checking; used in solver inner loops.
    #[inline]
    pub fn f_unchecked(&self, u: f64) -> f64 {
        let s = 1.0 - u;
        s - self.dist.pgf(s)
    }

    pub fn eval_f(&self, u: f64) -> Result<f64> {
        domain(u)?;
        Ok(self.f_unchecked(u).clamp(0.0, 1.0))
    }

    pub fn c_unchecked(&self, w: f64) -> f64 {
        self.c_coeffs.iter().rev().fold(0.0, |acc, &a| acc * w + a)
    }

    pub fn eval_c(&self, w: f64) -> Result<f64> {
        domain(w)?;
        if w == 0.0 {
            return Ok(1.0);
        }
        if w == 1.0 {
            return Ok(0.0);
        }
        Ok(self.c_unchecked(w))
    }

    /// Largest slope of c measured on a uniform grid of `points` nodes.
    pub fn c_lipschitz(&self, points: usize) -> f64 {
        let h = 1.0 / (points - 1) as f64;
        (0..points - 1)
            .map(|i| {
                let (a, b) = (i as f64 * h, (i + 1) as f64 * h);
                (self.c_unchecked(b) - self.c_unchecked(a)).abs() / h
            })
            .fold(0.0, f64::max)
    }
}

fn domain(u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::Domain(format!("argument {u} outside [0, 1]")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn p13() -> Nonlinearity {
        Nonlinearity::new(OffspringDistribution::new(vec![(1, 0.5), (3, 0.5)]).unwrap())
    }

    #[test]
    fn binary_values() {
        let nl = Nonlinearity::binary();
        assert!((nl.eval_f(0.5).unwrap() - 0.25).abs() < 1e-15);
        assert!((nl.eval_c(0.3).unwrap() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn two_point_law() {
        assert!((p13().eval_f(0.5).unwrap() - 0.1875).abs() < 1e-15);
    }

    #[test]
    fn endpoints() {
        for nl in [Nonlinearity::binary(), p13()] {
            assert_eq!(nl.eval_f(0.0).unwrap(), 0.0);
            assert_eq!(nl.eval_f(1.0).unwrap(), 0.0);
            assert_eq!(nl.eval_c(0.0).unwrap(), 1.0);
            assert_eq!(nl.eval_c(1.0).unwrap(), 0.0);
            assert!((nl.c_unchecked(0.0) - 1.0).abs() < 1e-12);
            assert!(nl.c_unchecked(1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_laws() {
        assert!(OffspringDistribution::new(vec![(2, 0.5), (3, 0.5)]).is_err());
        assert!(OffspringDistribution::new(vec![(1, 0.5), (3, 0.4)]).is_err());
        assert!(OffspringDistribution::new(vec![(0, 0.5), (4, 0.5)]).is_err());
        assert!(OffspringDistribution::new(vec![]).is_err());
    }

    #[test]
    fn domain_errors() {
        assert!(matches!(Nonlinearity::binary().eval_f(1.5), Err(Error::Domain(_))));
        assert!(matches!(Nonlinearity::binary().eval_c(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn sampling_moments() {
        let d = OffspringDistribution::new(vec![(1, 0.5), (3, 0.5)]).unwrap();
        let mut r = rng::stream(11, 0);
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| d.sample(&mut r) as f64).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((mean - 2.0).abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.01, "{var}");

        let b = OffspringDistribution::binary();
        assert!((0..100).all(|_| b.sample(&mut r) == 2));

        let mut r1 = rng::stream(3, 1);
        let mut r2 = rng::stream(3, 1);
        let a: Vec<u32> = (0..50).map(|_| d.sample(&mut r1)).collect();
        let c: Vec<u32> = (0..50).map(|_| d.sample(&mut r2)).collect();
        assert_eq!(a, c);
    }

    #[test]
    fn derivative_at_zero() {
        for nl in [Nonlinearity::binary(), p13()] {
            let d1 = nl.f_unchecked(1e-3) / 1e-3;
            let d2 = nl.f_unchecked(5e-4) / 5e-4;
            let richardson = 2.0 * d2 - d1;
            assert!((richardson - 1.0).abs() < 1e-6, "{richardson}");
        }
    }

    #[test]
    fn lipschitz_of_c() {
        assert!((Nonlinearity::binary().c_lipschitz(1001) - 1.0).abs() < 1e-9);
        // c(w) = (1 - w)(2 - w)/2 has slope 3/2 at w = 0
        assert!((p13().c_lipschitz(10001) - 1.5).abs() < 1e-3);
    }
}
