//! Small dense complex linear algebra: Hermitian eigendecomposition by
//! cyclic Jacobi rotations and the diagonal matrix exponential.

use num_complex::{Complex, Complex64};

use crate::error::{invalid, Error, Result};
use crate::scalar::Real;

/// Square complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix {
    n: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![Complex64::new(0.0, 0.0); n * n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> Complex64) -> Self {
        Self {
            n,
            data: (0..n * n).map(|k| f(k / n, k % n)).collect(),
        }
    }

    pub fn from_real(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(invalid(format!("{} values for a {n}x{n} matrix", data.len())));
        }
        Ok(Self::from_fn(n, |i, j| Complex64::new(data[i * n + j], 0.0)))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.n, |i, j| self[(j, i)].conj())
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self[(i, k)];
                for j in 0..n {
                    out.data[i * n + j] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn scale(&self, s: Complex64) -> Self {
        Self {
            n: self.n,
            data: self.data.iter().map(|&z| z * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// max |H_ij − conj(H_ji)|
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in i..self.n {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.n + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.n + j]
    }
}

#[derive(Clone, Debug)]
pub struct HermitianEig {
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors as columns.
    pub eigenvectors: CMatrix,
    pub sweeps: usize,
}

impl HermitianEig {
    /// V·diag(w)·V†
    pub fn reconstruct(&self) -> CMatrix {
        let v = &self.eigenvectors;
        let n = v.dim();
        let vw = CMatrix::from_fn(n, |i, j| v[(i, j)] * self.eigenvalues[j]);
        vw.matmul(&v.adjoint())
    }
}

const MAX_SWEEPS: usize = 100;
const HERMITIAN_TOL: f64 = 1e-12;

/// Eigendecomposition of a Hermitian matrix by cyclic Jacobi sweeps.
///
/// Sweeps stop once the largest off-diagonal modulus drops below
/// `1e-12 · max(1, ‖H‖_max)`, or after 100 sweeps.
pub fn eig_hermitian(h: &CMatrix) -> Result<HermitianEig> {
    let n = h.dim();
    let scale = h.max_abs().max(1.0);
    let asym = h.max_asymmetry();
    if asym > HERMITIAN_TOL * scale {
        return Err(Error::NotHermitian(asym));
    }
    let mut a = h.clone();
    for i in 0..n {
        a[(i, i)] = Complex64::new(a[(i, i)].re, 0.0);
    }
    let mut v = CMatrix::identity(n);
    let tol = 1e-12 * scale;
    let mut sweeps = 0;
    while sweeps < MAX_SWEEPS && max_off_diagonal(&a) >= tol {
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let b = a[(p, q)];
                let mag = b.norm();
                if mag < f64::MIN_POSITIVE {
                    continue;
                }
                let phase = b / mag;
                let theta = 0.5 * (2.0 * mag).atan2(a[(p, p)].re - a[(q, q)].re);
                let (s, c) = theta.sin_cos();
                rotate(&mut a, &mut v, p, q, c, s, phase);
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].re.total_cmp(&a[(j, j)].re));
    let eigenvalues = order.iter().map(|&i| a[(i, i)].re).collect();
    let eigenvectors = CMatrix::from_fn(n, |r, c| v[(r, order[c])]);
    Ok(HermitianEig {
        eigenvalues,
        eigenvectors,
        sweeps,
    })
}

fn max_off_diagonal(a: &CMatrix) -> f64 {
    let n = a.dim();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                worst = worst.max(a[(i, j)].norm());
            }
        }
    }
    worst
}

/// Apply `A ← Gᴴ A G`, `V ← V G` with
/// `G = [[c, −s·e^{iφ}], [s·e^{−iφ}, c]]` on the (p, q) plane.
fn rotate(a: &mut CMatrix, v: &mut CMatrix, p: usize, q: usize, c: f64, s: f64, phase: Complex64) {
    let n = a.dim();
    let gpq = -phase * s; // G[p][q]
    let gqp = phase.conj() * s; // G[q][p]
    for k in 0..n {
        let (akp, akq) = (a[(k, p)], a[(k, q)]);
        a[(k, p)] = akp * c + akq * gqp;
        a[(k, q)] = akp * gpq + akq * c;
        let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
        v[(k, p)] = vkp * c + vkq * gqp;
        v[(k, q)] = vkp * gpq + vkq * c;
    }
    for k in 0..n {
        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
        a[(p, k)] = apk * c + aqk * gqp.conj();
        a[(q, k)] = apk * gpq.conj() + aqk * c;
    }
    a[(p, q)] = Complex64::new(0.0, 0.0);
    a[(q, p)] = Complex64::new(0.0, 0.0);
    a[(p, p)] = Complex64::new(a[(p, p)].re, 0.0);
    a[(q, q)] = Complex64::new(a[(q, q)].re, 0.0);
}

/// Elementwise `exp(λ_p · Δ_p)`.
pub fn matexp_diag<T: Real>(lambda: &[Complex<T>], dt: &[T]) -> Result<Vec<Complex<T>>> {
    if lambda.len() != dt.len() {
        return Err(invalid(format!(
            "lambda has {} entries, dt has {}",
            lambda.len(),
            dt.len()
        )));
    }
    if let Some(bad) = dt.iter().find(|&&d| d.is_nan() || d <= T::zero()) {
        return Err(invalid(format!("timescales must be positive, got {bad}")));
    }
    Ok(lambda.iter().zip(dt).map(|(&l, &d)| (l * d).exp()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(n: usize, rng: &mut ChaCha8Rng) -> CMatrix {
        let mut m = CMatrix::zeros(n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(rng.gen_range(-2.0..2.0), 0.0);
            for j in i + 1..n {
                let z = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
        m
    }

    fn unitarity_err(v: &CMatrix) -> f64 {
        v.adjoint().matmul(v).max_abs_diff(&CMatrix::identity(v.dim()))
    }

    #[test]
    fn identity_matrix() {
        let e = eig_hermitian(&CMatrix::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);
        assert!(unitarity_err(&e.eigenvectors) < 1e-14);
    }

    #[test]
    fn diagonal_sorted_ascending() {
        let h = CMatrix::from_real(3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]).unwrap();
        let e = eig_hermitian(&h).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn random_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [2, 5, 8, 16] {
            let h = random_hermitian(n, &mut rng);
            let e = eig_hermitian(&h).unwrap();
            assert!(e.reconstruct().max_abs_diff(&h) < 1e-10 * h.max_abs(), "n={n}");
            assert!(unitarity_err(&e.eigenvectors) < 1e-10);
            assert!(e.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn unitary_similarity_preserves_spectrum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = random_hermitian(8, &mut rng);
        let q = eig_hermitian(&random_hermitian(8, &mut rng)).unwrap().eigenvectors;
        let g = q.adjoint().matmul(&h).matmul(&q);
        // round-off can leave g a hair off Hermitian; symmetrize
        let g = CMatrix::from_fn(8, |i, j| 0.5 * (g[(i, j)] + g[(j, i)].conj()));
        let a = eig_hermitian(&h).unwrap().eigenvalues;
        let b = eig_hermitian(&g).unwrap().eigenvalues;
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_hermitian() {
        let h = CMatrix::from_real(2, &[1.0, 2.0, 0.0, 1.0]).unwrap();
        match eig_hermitian(&h) {
            Err(Error::NotHermitian(a)) => assert!((a - 2.0).abs() < 1e-15),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn matexp_examples() {
        let half = matexp_diag(&[Complex64::new(-1.0, 0.0)], &[std::f64::consts::LN_2]).unwrap();
        assert!((half[0] - Complex64::new(0.5, 0.0)).norm() < 1e-15);
        let one = matexp_diag(&[Complex64::new(0.0, 0.0)], &[3.7]).unwrap();
        assert_eq!(one[0], Complex64::new(1.0, 0.0));
        let m1 = matexp_diag(&[Complex64::new(0.0, std::f64::consts::PI)], &[1.0]).unwrap();
        assert!((m1[0] - Complex64::new(-1.0, 0.0)).norm() < 1e-14);
        assert!(matexp_diag(&[Complex64::new(-1.0, 0.0)], &[0.0]).is_err());
    }
}
