use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

const TOLERANCE: f64 = 1e-10;
const MAX_ITERATIONS: usize = 10_000;

/// Principal components of a point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    /// Data mean.
    pub mean: Vec<f64>,
    /// Unit-norm, mutually orthogonal components, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Covariance eigenvalue of each component over the total variance.
    pub explained_ratio: Vec<f64>,
    /// Centered data projected on the components, one row per input vector.
    pub coordinates: Vec<Vec<f64>>,
}

/// Top-`dims` principal components by power iteration with deflation.
pub fn pca_project(vectors: &[Vec<f64>], dims: usize) -> Result<Pca> {
    let n = vectors.len();
    if dims == 0 || n < dims + 1 {
        return Err(Error::invalid(format!(
            "PCA to {dims} dimensions needs at least {} vectors, got {n}",
            dims + 1
        )));
    }
    let d = vectors[0].len();
    if d < dims || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::shape("PCA vectors must share a length of at least dims"));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let total = cov.trace();

    let mut components: Vec<DVector<f64>> = Vec::with_capacity(dims);
    let mut eigenvalues = Vec::with_capacity(dims);
    for c in 0..dims {
        let (v, lambda) = leading_eigenvector(&cov, &components, c)?;
        cov -= lambda * &v * v.transpose();
        components.push(v);
        eigenvalues.push(lambda);
    }
    let coordinates = (0..n)
        .map(|i| {
            let row = centered.row(i).transpose();
            components.iter().map(|v| row.dot(v)).collect()
        })
        .collect();
    Ok(Pca {
        mean,
        components: components.iter().map(|v| v.iter().copied().collect()).collect(),
        explained_ratio: eigenvalues
            .iter()
            .map(|l| if total > 0.0 { l / total } else { 0.0 })
            .collect(),
        coordinates,
    })
}

fn orthogonalize(v: &mut DVector<f64>, basis: &[DVector<f64>]) {
    for b in basis {
        let p = v.dot(b);
        v.axpy(-p, b, 1.0);
    }
}

/// Unit vector orthogonal to `basis`, from the standard basis.
fn orthogonal_fallback(d: usize, basis: &[DVector<f64>]) -> DVector<f64> {
    (0..d)
        .map(|i| {
            let mut e = DVector::zeros(d);
            e[i] = 1.0;
            orthogonalize(&mut e, basis);
            e
        })
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .map(|e| e.normalize())
        .expect("d > 0")
}

fn leading_eigenvector(cov: &DMatrix<f64>, basis: &[DVector<f64>], index: usize) -> Result<(DVector<f64>, f64)> {
    let d = cov.nrows();
    let scale = cov.diagonal().iter().map(|x| x.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    // Deterministic start with no special alignment to the axes.
    let mut v = DVector::from_fn(d, |i, _| 1.0 + ((i * 7 + index * 13) % 11) as f64 / 10.0);
    orthogonalize(&mut v, basis);
    v /= v.norm();
    for _ in 0..MAX_ITERATIONS {
        let mut w = cov * &v;
        orthogonalize(&mut w, basis);
        let norm = w.norm();
        if norm <= TOLERANCE * scale {
            // Remaining variance is zero: any orthogonal direction will do.
            let v = if v.norm() > 0.5 { v } else { orthogonal_fallback(d, basis) };
            return Ok((v, 0.0));
        }
        let lambda = v.dot(&w);
        let residual = (&w - lambda * &v).norm();
        if residual <= TOLERANCE * scale {
            return Ok((v, lambda.max(0.0)));
        }
        v = w / norm;
    }
    Err(Error::NotConverged {
        what: format!("principal component {}", index + 1),
        iterations: MAX_ITERATIONS,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn check_orthonormal(p: &Pca) {
        for (i, a) in p.components.iter().enumerate() {
            for (j, b) in p.components.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot - want).abs() < 1e-8, "components {i},{j}: {dot}");
            }
        }
    }

    #[test]
    fn rank_one_line() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dir: Vec<f64> = (0..50).map(|_| rng.sample(StandardNormal)).collect();
        let data: Vec<Vec<f64>> = (0..40)
            .map(|_| {
                let t: f64 = rng.gen_range(-3.0..3.0);
                dir.iter().map(|d| 0.5 + t * d).collect()
            })
            .collect();
        let p = pca_project(&data, 3).unwrap();
        assert!((p.explained_ratio[0] - 1.0).abs() < 1e-6);
        assert!(p.explained_ratio[1].abs() < 1e-6);
        check_orthonormal(&p);
    }

    #[test]
    fn known_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        // Random orthonormal pair in 10-D by Gram-Schmidt.
        let mut a: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        a.iter_mut().for_each(|x| *x /= na);
        let mut b: Vec<f64> = (0..10).map(|_| rng.sample(StandardNormal)).collect();
        let p: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= p * x);
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        b.iter_mut().for_each(|x| *x /= nb);
        let data: Vec<Vec<f64>> = (0..10_000)
            .map(|_| {
                let u: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
                let v: f64 = rng.sample(StandardNormal);
                (0..10).map(|i| u * a[i] + v * b[i]).collect()
            })
            .collect();
        let p = pca_project(&data, 2).unwrap();
        assert!((p.explained_ratio[0] - 0.8).abs() < 0.05);
        assert!((p.explained_ratio[1] - 0.2).abs() < 0.05);
        check_orthonormal(&p);
        assert_eq!(p.coordinates.len(), 10_000);
    }

    #[test]
    fn order_invariant_up_to_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data: Vec<Vec<f64>> = (0..30)
            .map(|i| (0..5).map(|j| rng.gen_range(-1.0..1.0) * (j + 1) as f64 + i as f64 * 0.01).collect())
            .collect();
        let mut rev = data.clone();
        rev.reverse();
        let a = pca_project(&data, 2).unwrap();
        let b = pca_project(&rev, 2).unwrap();
        for (x, y) in a.components.iter().zip(&b.components) {
            let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn too_few_vectors() {
        assert!(pca_project(&[vec![1.0, 2.0], vec![0.0, 1.0]], 2).is_err());
    }
}
