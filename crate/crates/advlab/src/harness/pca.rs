//! Two-component PCA via covariance eigendecomposition (power iteration
//! with deflation), with a deterministic sign convention.

use crate::diffcore::Tensor;
use crate::{Error, Result};

/// 2-D projection of a latent matrix.
#[derive(Debug)]
pub struct PcaProjection {
    /// `[n, 2]` coordinates in the top-2 principal directions.
    pub coords: Tensor,
    /// Fraction of total variance captured by each direction, non-increasing.
    pub explained: [f32; 2],
    /// Set when the input had (numerically) no variance; coords are zeros.
    pub degenerate: bool,
}

/// Project `[n, d]` latents onto their top-2 principal directions.
///
/// Directions are mean-centered covariance eigenvectors; each is flipped so
/// its largest-magnitude component is positive, making the output
/// deterministic.
pub fn pca_project(latents: &Tensor) -> Result<PcaProjection> {
    if latents.rank() != 2 {
        return Err(Error::config(format!(
            "latents must be [n, d], got {:?}",
            latents.shape()
        )));
    }
    let n = latents.shape()[0];
    let d = latents.shape()[1];
    if n < 3 || d < 2 {
        return Err(Error::config(format!(
            "pca needs >= 3 samples and width >= 2, got {n} x {d}"
        )));
    }

    // Mean-center in f64.
    let mut mean = vec![0.0f64; d];
    for row in latents.data().chunks_exact(d) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let centered: Vec<f64> = latents
        .data()
        .chunks_exact(d)
        .flat_map(|row| {
            row.iter()
                .zip(&mean)
                .map(|(&v, &m)| v as f64 - m)
                .collect::<Vec<_>>()
        })
        .collect();

    // Covariance (d x d), population normalization.
    let mut cov = vec![0.0f64; d * d];
    for row in centered.chunks_exact(d) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in 0..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    for v in &mut cov {
        *v /= n as f64;
    }
    let total_var: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total_var <= 1e-24 {
        return Ok(PcaProjection {
            coords: Tensor::zeros(&[n, 2]),
            explained: [0.0, 0.0],
            degenerate: true,
        });
    }

    let mut directions = Vec::new();
    let mut lambdas = Vec::new();
    let mut work = cov.clone();
    for comp in 0..2 {
        let (v, lambda) = dominant_eigenvector(&work, d, comp as u64);
        // Deflate: work -= lambda v v^T
        for i in 0..d {
            for j in 0..d {
                work[i * d + j] -= lambda * v[i] * v[j];
            }
        }
        directions.push(v);
        lambdas.push(lambda.max(0.0));
    }

    let mut coords = Vec::with_capacity(n * 2);
    for row in centered.chunks_exact(d) {
        for v in &directions {
            coords.push(row.iter().zip(v).map(|(&x, &vi)| x * vi).sum::<f64>() as f32);
        }
    }
    Ok(PcaProjection {
        coords: Tensor::new(vec![n, 2], coords)?,
        explained: [
            (lambdas[0] / total_var) as f32,
            (lambdas[1] / total_var) as f32,
        ],
        degenerate: false,
    })
}

/// Power iteration for the dominant eigenpair, sign-fixed.
fn dominant_eigenvector(matrix: &[f64], d: usize, salt: u64) -> (Vec<f64>, f64) {
    // Deterministic pseudo-random start (splitmix64 stream).
    let mut state = 0x9e3779b97f4a7c15u64 ^ salt.wrapping_mul(0xbf58476d1ce4e5b9);
    let mut next = || {
        state = state.wrapping_add(0x9e3779b97f4a7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z = z ^ (z >> 31);
        (z as f64 / u64::MAX as f64) - 0.5
    };
    let mut v: Vec<f64> = (0..d).map(|_| next()).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..1000 {
        let mut w = vec![0.0f64; d];
        for i in 0..d {
            let row = &matrix[i * d..(i + 1) * d];
            w[i] = row.iter().zip(&v).map(|(a, b)| a * b).sum();
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-300 {
            // Null direction: eigenvalue 0, keep the current vector.
            lambda = 0.0;
            break;
        }
        for x in &mut w {
            *x /= norm;
        }
        let delta: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs().min((a + b).abs()))
            .fold(0.0, f64::max);
        v = w;
        lambda = norm;
        if delta < 1e-12 {
            break;
        }
    }
    // Sign convention: largest-magnitude component positive.
    let mut max_i = 0;
    for i in 0..d {
        if v[i].abs() > v[max_i].abs() {
            max_i = i;
        }
    }
    if v[max_i] < 0.0 {
        for x in &mut v {
            *x = -*x;
        }
    }
    (v, lambda)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}
