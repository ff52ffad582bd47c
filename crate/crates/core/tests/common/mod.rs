//! Oracles shared by the integration test targets.
#![allow(dead_code)]

use coalpsm::glm::{fit_logistic, fit_poisson, score, DesignMatrix, Family};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Log-likelihood written out per observation, independent of the library.
pub fn oracle_loglik(family: Family, rows: &[Vec<f64>], y: &[f64], offset: &[f64], beta: &[f64]) -> f64 {
    rows.iter()
        .zip(y)
        .zip(offset)
        .map(|((x, &yi), &o)| {
            let eta = o + beta[0] + x.iter().zip(&beta[1..]).map(|(a, b)| a * b).sum::<f64>();
            match family {
                Family::Logistic => yi * eta - (1.0 + eta.exp()).ln(),
                Family::Poisson => yi * eta - eta.exp(),
            }
        })
        .sum()
}

pub fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    (0..at.len())
        .map(|j| {
            let h = 1e-5 * at[j].abs().max(1.0);
            let mut up = at.to_vec();
            let mut down = at.to_vec();
            up[j] += h;
            down[j] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

pub struct Problem {
    pub rows: Vec<Vec<f64>>,
    pub x: DesignMatrix,
    pub y: Vec<f64>,
    pub offset: Vec<f64>,
}

pub fn random_problem(family: Family, seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 60 + (seed as usize % 5) * 20;
    let p = 2 + (seed as usize % 3);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let truth: Vec<f64> = (0..=p).map(|_| rng.gen_range(-0.6..0.6)).collect();
    let offset: Vec<f64> = match family {
        Family::Logistic => vec![0.0; n],
        Family::Poisson => (0..n).map(|_| rng.gen_range(1.0..3.0)).collect(),
    };
    let y = rows
        .iter()
        .zip(&offset)
        .map(|(x, &o)| {
            let eta = o + truth[0] + x.iter().zip(&truth[1..]).map(|(a, b)| a * b).sum::<f64>();
            match family {
                Family::Logistic => f64::from(rng.gen::<f64>() < 1.0 / (1.0 + (-eta).exp())),
                Family::Poisson => {
                    use rand_distr::{Distribution, Poisson};
                    Poisson::new(eta.exp()).unwrap().sample(&mut rng)
                }
            }
        })
        .collect();
    let cols = (0..p).map(|j| (format!("x{j}"), rows.iter().map(|r| r[j]).collect())).collect();
    Problem {
        x: DesignMatrix::from_columns(cols).unwrap(),
        rows,
        y,
        offset,
    }
}

pub fn fit(family: Family, pr: &Problem) -> Vec<f64> {
    let model = match family {
        Family::Logistic => fit_logistic(&pr.x, &pr.y.iter().map(|&v| v == 1.0).collect::<Vec<_>>()).unwrap(),
        Family::Poisson => fit_poisson(&pr.x, &pr.y.iter().map(|&v| v as u64).collect::<Vec<_>>(), &pr.offset).unwrap(),
    };
    assert!(model.converged);
    model.coefficients.iter().copied().collect()
}

pub fn check_gradient(family: Family, pr: &Problem, beta: &[f64]) -> f64 {
    let analytic = score(family, &pr.x, &pr.y, &pr.offset, &DVector::from_column_slice(beta));
    let numeric = central_difference(|b| oracle_loglik(family, &pr.rows, &pr.y, &pr.offset, b), beta);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

