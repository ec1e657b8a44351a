//! Independent reference computations shared by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use lada::assimilate::{Codec, Forecaster};
use lada::scene::Field;
use lada::Result;

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&x, &y| m[x][col].abs().total_cmp(&m[y][col].abs())).unwrap();
        m.swap(col, piv);
        let d = m[col][col];
        assert!(d.abs() > 1e-300, "singular matrix");
        m[col].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                let pivot_row = m[col].clone();
                m[r].iter_mut().zip(&pivot_row).for_each(|(v, p)| *v -= f * p);
            }
        }
    }
    m.into_iter().map(|r| r[n..].to_vec()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

/// `Q (Q + R)^-1` by explicit inversion.
pub fn oracle_gain(q: &[Vec<f64>], r: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let s: Vec<Vec<f64>> = q
        .iter()
        .zip(r)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect();
    matmul(q, &invert(&s))
}

/// `V Vᵀ` with V the mean-removed samples as columns.
pub fn oracle_covariance(samples: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = samples[0].len();
    let s = samples.len() as f64;
    let mean: Vec<f64> = (0..n).map(|i| samples.iter().map(|x| x[i]).sum::<f64>() / s).collect();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| samples.iter().map(|x| (x[i] - mean[i]) * (x[j] - mean[j])).sum())
                .collect()
        })
        .collect()
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Latent space equal to the flattened field.
pub struct IdentityCodec {
    pub rows: usize,
    pub cols: usize,
}

impl Codec for IdentityCodec {
    fn latent_dim(&self) -> usize {
        self.rows * self.cols
    }
    fn encode(&self, field: &Field) -> Result<Vec<f64>> {
        Ok(field.values().to_vec())
    }
    fn decode(&self, h: &[f64]) -> Result<Field> {
        Field::new(self.rows, self.cols, 1, h.to_vec())
    }
}

/// Forecasts the last state of the window.
pub struct Persistence {
    pub lookback: usize,
}

impl Forecaster for Persistence {
    fn lookback(&self) -> usize {
        self.lookback
    }
    fn forecast(&self, window: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(window.last().unwrap().clone())
    }
}
