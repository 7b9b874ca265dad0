//! Dense complex linear-algebra kernel.
//!
//! Everything here operates on small dense matrices (dimension <= a few
//! hundred). Matrix functions go through Hermitian eigendecompositions or
//! singular value decompositions rather than scaling-and-squaring, except
//! for the general [`expm`] helper used for constant non-Hermitian
//! generators.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex;

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;
pub type CMatrix = DMatrix<C64>;
pub type CVector = DVector<C64>;

/// Elementwise tolerance for Hermitian-flagged matrices.
pub const HERMITIAN_TOL: f64 = 1e-12;
/// Eigenvalues above this (negative) threshold are clipped to zero in PSD
/// matrix functions. Monte Carlo averages routinely produce tiny negative
/// eigenvalues.
pub const PSD_CLIP: f64 = -1e-10;

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    Complex::new(re, im)
}

pub fn identity(dim: usize) -> CMatrix {
    CMatrix::identity(dim, dim)
}

pub fn sigma_x() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(1., 0.), c(0., 0.)])
}

pub fn sigma_y() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., -1.), c(0., 1.), c(0., 0.)])
}

/// Pauli z in the basis {|up>, |down>}: sigma_z |up> = +|up>.
pub fn sigma_z() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(-1., 0.)])
}

/// Lowering operator |down><up|.
pub fn sigma_minus() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., 0.), c(1., 0.), c(0., 0.)])
}

/// Raising operator |up><down|.
pub fn sigma_plus() -> CMatrix {
    CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(1., 0.), c(0., 0.), c(0., 0.)])
}

/// Kronecker product a (x) b.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

pub fn max_hermitian_deviation(a: &CMatrix) -> f64 {
    let adj = a.adjoint();
    (a - adj).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn is_hermitian(a: &CMatrix, tol: f64) -> bool {
    a.is_square() && max_hermitian_deviation(a) <= tol
}

pub fn trace(a: &CMatrix) -> C64 {
    a.diagonal().iter().sum()
}

/// Checked dense matrix product.
pub fn matmul(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    if a.ncols() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "matmul: {}x{} times {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(a * b)
}

/// Eigendecomposition of a Hermitian matrix. Returns (eigenvalues, V) with
/// A = V diag(w) V^dag. Eigenvalues are real but unsorted.
pub fn hermitian_eigen(a: &CMatrix, tol: f64) -> Result<(Vec<f64>, CMatrix)> {
    let dev = max_hermitian_deviation(a);
    if dev > tol {
        return Err(Error::NonHermitian { max_dev: dev });
    }
    // Symmetrize so the solver sees an exactly Hermitian input.
    let sym = (a + a.adjoint()).scale(0.5);
    let eig = SymmetricEigen::new(sym);
    let values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    Ok((values, eig.eigenvectors))
}

/// Applies a real scalar function to a Hermitian matrix through its
/// eigendecomposition.
pub fn hermitian_map(a: &CMatrix, tol: f64, f: impl Fn(f64) -> C64) -> Result<CMatrix> {
    let (w, v) = hermitian_eigen(a, tol)?;
    let d = CMatrix::from_diagonal(&CVector::from_iterator(w.len(), w.iter().map(|&x| f(x))));
    Ok(&v * d * v.adjoint())
}

/// exp(-i h t) for Hermitian h, via eigendecomposition. Unitary to 1e-10.
pub fn expm_hermitian_generator(h: &CMatrix, t: f64) -> Result<CMatrix> {
    hermitian_map(h, 1e-9, |w| c(0.0, -w * t).exp())
}

/// Principal square root of a PSD matrix. Eigenvalues in [PSD_CLIP, 0) are
/// clipped to zero; anything below errors out.
pub fn sqrtm_psd(a: &CMatrix) -> Result<CMatrix> {
    sqrtm_psd_with_clip(a, PSD_CLIP)
}

pub fn sqrtm_psd_with_clip(a: &CMatrix, clip: f64) -> Result<CMatrix> {
    let (w, v) = hermitian_eigen(a, 1e-8)?;
    if let Some(&min_eig) = w
        .iter()
        .filter(|&&x| x < clip)
        .min_by(|a, b| a.partial_cmp(b).unwrap())
    {
        return Err(Error::NotPositiveSemidefinite { min_eig });
    }
    let d = CMatrix::from_diagonal(&CVector::from_iterator(
        w.len(),
        w.iter().map(|&x| c(x.max(0.0).sqrt(), 0.0)),
    ));
    Ok(&v * d * v.adjoint())
}

/// Polar decomposition l = U X with U unitary and X = sqrt(l^dag l) PSD.
///
/// For rank-deficient l the unitary factor is completed by pairing the
/// unused left and right singular vectors in index order, so the result is
/// deterministic.
pub fn polar_decompose(l: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    if !l.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "polar decomposition needs a square matrix, got {}x{}",
            l.nrows(),
            l.ncols()
        )));
    }
    let svd = nalgebra::SVD::new(l.clone(), true, true);
    let u = svd.u.expect("SVD with u requested");
    let v_t = svd.v_t.expect("SVD with v_t requested");
    let s = svd.singular_values;
    // l = u diag(s) v_t  =>  unitary = u v_t, positive = v_t^dag diag(s) v_t
    let unitary = &u * &v_t;
    let d = CMatrix::from_diagonal(&CVector::from_iterator(s.len(), s.iter().map(|&x| c(x, 0.0))));
    let positive = v_t.adjoint() * d * &v_t;
    Ok((unitary, positive))
}

/// Partial trace over the last qubit of a 2d x 2d matrix ordered as
/// system (x) ancilla.
pub fn partial_trace_last_qubit(a: &CMatrix) -> Result<CMatrix> {
    let n = a.nrows();
    if !a.is_square() || n % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "partial trace over last qubit needs an even square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let d = n / 2;
    let mut out = CMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            out[(i, j)] = a[(2 * i, 2 * j)] + a[(2 * i + 1, 2 * j + 1)];
        }
    }
    Ok(out)
}

/// Fidelity tr sqrt(sqrt(rho) sigma sqrt(rho)), unsquared.
pub fn fidelity(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    if rho.shape() != sigma.shape() {
        return Err(Error::DimensionMismatch(format!(
            "fidelity: {}x{} vs {}x{}",
            rho.nrows(),
            rho.ncols(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    for (name, m) in [("rho", rho), ("sigma", sigma)] {
        let tr = trace(m);
        if (tr.re - 1.0).abs() > 1e-6 || tr.im.abs() > 1e-6 {
            return Err(Error::NotNormalized { value: tr.re })
                .map_err(|e| match e {
                    Error::NotNormalized { value } => Error::InvalidConfig(format!(
                        "fidelity input {name} has trace {value}, expected 1"
                    )),
                    other => other,
                });
        }
    }
    let sr = sqrtm_psd_with_clip(rho, -1e-7)?;
    let inner = &sr * sigma * &sr;
    let (w, _) = hermitian_eigen(&inner, 1e-7)?;
    if let Some(&min_eig) = w
        .iter()
        .filter(|&&x| x < -1e-7)
        .min_by(|a, b| a.partial_cmp(b).unwrap())
    {
        return Err(Error::NotPositiveSemidefinite { min_eig });
    }
    Ok(w.iter().map(|&x| x.max(0.0).sqrt()).sum())
}

/// Squared (Uhlmann) fidelity convention.
pub fn fidelity_squared(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    fidelity(rho, sigma).map(|f| f * f)
}

/// Trace distance (1/2) sum |eigenvalues(rho - sigma)| for Hermitian inputs.
pub fn trace_distance(rho: &CMatrix, sigma: &CMatrix) -> Result<f64> {
    if rho.shape() != sigma.shape() {
        return Err(Error::DimensionMismatch(format!(
            "trace_distance: {}x{} vs {}x{}",
            rho.nrows(),
            rho.ncols(),
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let diff = rho - sigma;
    let (w, _) = hermitian_eigen(&diff, 1e-7)?;
    Ok(0.5 * w.iter().map(|x| x.abs()).sum::<f64>())
}

/// Projects a nearly-Hermitian matrix onto the PSD cone by symmetrizing and
/// clipping negative eigenvalues, optionally rescaling to unit trace.
/// Intended for Monte Carlo averages before fidelity evaluation.
pub fn psd_project(a: &CMatrix, unit_trace: bool) -> Result<CMatrix> {
    let sym = (a + a.adjoint()).scale(0.5);
    let (w, v) = hermitian_eigen(&sym, f64::INFINITY)?;
    let d = CMatrix::from_diagonal(&CVector::from_iterator(
        w.len(),
        w.iter().map(|&x| c(x.max(0.0), 0.0)),
    ));
    let mut out = &v * d * v.adjoint();
    if unit_trace {
        let tr = trace(&out).re;
        if tr <= 0.0 {
            return Err(Error::NotPositiveSemidefinite { min_eig: tr });
        }
        out.scale_mut(1.0 / tr);
    }
    Ok(out)
}

/// General matrix exponential by scaling-and-squaring on a Taylor series.
/// Meant for constant generators with moderate norm.
pub fn expm(a: &CMatrix) -> CMatrix {
    let n = a.nrows();
    let norm = a.iter().map(|z| z.norm()).fold(0.0, f64::max) * n as f64;
    let s = if norm > 0.25 {
        (norm / 0.25).log2().ceil() as u32
    } else {
        0
    };
    let scaled = a.scale(1.0 / (2f64.powi(s as i32)));
    let mut term = CMatrix::identity(n, n);
    let mut sum = CMatrix::identity(n, n);
    for k in 1..=20 {
        term = &term * &scaled / c(k as f64, 0.0);
        sum += &term;
    }
    for _ in 0..s {
        sum = &sum * &sum;
    }
    sum
}

/// Frobenius norm of the difference.
pub fn frobenius_distance(a: &CMatrix, b: &CMatrix) -> f64 {
    (a - b).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ket0() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(0., 0.)])
    }

    fn ket1() -> CMatrix {
        CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., 0.), c(0., 0.), c(1., 0.)])
    }

    #[test]
    fn matmul_identity_and_paulis() {
        let a = CMatrix::from_row_slice(2, 2, &[c(1., 2.), c(0., -1.), c(3., 0.), c(0.5, 0.5)]);
        let id = identity(2);
        assert_abs_diff_eq!(frobenius_distance(&matmul(&id, &a).unwrap(), &a), 0.0);
        let sx = sigma_x();
        assert_abs_diff_eq!(
            frobenius_distance(&matmul(&sx, &sx).unwrap(), &id),
            0.0,
            epsilon = 1e-14
        );
        // sigma_x sigma_y = i sigma_z, by hand multiplication of the 2x2 Paulis
        let prod = matmul(&sigma_x(), &sigma_y()).unwrap();
        let expected = sigma_z().map(|z| z * c(0., 1.));
        assert_abs_diff_eq!(frobenius_distance(&prod, &expected), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = CMatrix::zeros(2, 3);
        let b = CMatrix::zeros(2, 2);
        assert!(matmul(&a, &b).is_err());
    }

    /// Power-series oracle for exp(-i h t), summed to machine precision.
    fn expm_series_oracle(h: &CMatrix, t: f64) -> CMatrix {
        let gen = h.map(|z| z * c(0., -t));
        let n = h.nrows();
        let mut term = CMatrix::identity(n, n);
        let mut sum = CMatrix::identity(n, n);
        for k in 1..=30 {
            term = &term * &gen / c(k as f64, 0.0);
            sum += &term;
        }
        sum
    }

    #[test]
    fn expm_hermitian_basics() {
        let zero = CMatrix::zeros(2, 2);
        let u = expm_hermitian_generator(&zero, 3.7).unwrap();
        assert_abs_diff_eq!(frobenius_distance(&u, &identity(2)), 0.0, epsilon = 1e-12);

        // exp(-i sigma_x pi/2) = -i sigma_x, against the power-series oracle
        let u = expm_hermitian_generator(&sigma_x(), std::f64::consts::FRAC_PI_2).unwrap();
        let expected = sigma_x().map(|z| z * c(0., -1.));
        assert_abs_diff_eq!(frobenius_distance(&u, &expected), 0.0, epsilon = 1e-10);
        let oracle = expm_series_oracle(&sigma_x(), std::f64::consts::FRAC_PI_2);
        assert_abs_diff_eq!(frobenius_distance(&u, &oracle), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn expm_hermitian_rejects_non_hermitian() {
        assert!(expm_hermitian_generator(&sigma_minus(), 1.0).is_err());
    }

    #[test]
    fn expm_hermitian_random_unitarity_and_series() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = 4;
            let raw = CMatrix::from_fn(n, n, |_, _| {
                c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let h = (&raw + raw.adjoint()).scale(0.5);
            let t = rng.gen_range(0.1..0.5);
            let u = expm_hermitian_generator(&h, t).unwrap();
            let uu = &u * u.adjoint();
            assert!(frobenius_distance(&uu, &identity(n)) < 1e-10);
            let oracle = expm_series_oracle(&h, t);
            assert!(frobenius_distance(&u, &oracle) < 1e-8);
        }
    }

    #[test]
    fn sqrtm_psd_cases() {
        assert_abs_diff_eq!(
            frobenius_distance(&sqrtm_psd(&identity(2)).unwrap(), &identity(2)),
            0.0,
            epsilon = 1e-12
        );
        let four = identity(2).scale(4.0);
        assert_abs_diff_eq!(
            frobenius_distance(&sqrtm_psd(&four).unwrap(), &identity(2).scale(2.0)),
            0.0,
            epsilon = 1e-12
        );
        let a = CMatrix::from_diagonal(&CVector::from_vec(vec![c(0., 0.), c(9., 0.)]));
        let b = sqrtm_psd(&a).unwrap();
        let expected = CMatrix::from_diagonal(&CVector::from_vec(vec![c(0., 0.), c(3., 0.)]));
        assert_abs_diff_eq!(frobenius_distance(&b, &expected), 0.0, epsilon = 1e-12);
        assert!(frobenius_distance(&(&b * &b), &a) < 1e-9);
    }

    #[test]
    fn sqrtm_psd_rejects_negative() {
        let a = CMatrix::from_diagonal(&CVector::from_vec(vec![c(-0.5, 0.), c(1., 0.)]));
        assert!(matches!(
            sqrtm_psd(&a),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
    }

    #[test]
    fn polar_cases() {
        let (u, x) = polar_decompose(&identity(2)).unwrap();
        assert!(frobenius_distance(&u, &identity(2)) < 1e-12);
        assert!(frobenius_distance(&x, &identity(2)) < 1e-12);

        // polar(2 sigma_x) = (sigma_x, 2I), by hand
        let (u, x) = polar_decompose(&sigma_x().scale(2.0)).unwrap();
        assert!(frobenius_distance(&u, &sigma_x()) < 1e-10);
        assert!(frobenius_distance(&x, &identity(2).scale(2.0)) < 1e-10);

        // polar(sigma_-): X = sqrt(sigma_+ sigma_-) is the projector onto
        // the excited state (basis index 0)
        let (u, x) = polar_decompose(&sigma_minus()).unwrap();
        assert!(frobenius_distance(&(&u * &x), &sigma_minus()) < 1e-10);
        let p_up = CMatrix::from_row_slice(2, 2, &[c(1., 0.), c(0., 0.), c(0., 0.), c(0., 0.)]);
        assert!(frobenius_distance(&x, &p_up) < 1e-10);
        assert!(frobenius_distance(&(&u * u.adjoint()), &identity(2)) < 1e-10);
    }

    #[test]
    fn polar_random_round_trip() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let l = CMatrix::from_fn(4, 4, |_, _| {
                c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let (u, x) = polar_decompose(&l).unwrap();
            assert!(frobenius_distance(&(&u * &x), &l) < 1e-9);
            assert!(frobenius_distance(&(&u * u.adjoint()), &identity(4)) < 1e-9);
            assert!(is_hermitian(&x, 1e-9));
        }
    }

    #[test]
    fn partial_trace_cases() {
        let rho_s = CMatrix::from_row_slice(
            2,
            2,
            &[c(0.7, 0.), c(0.1, 0.2), c(0.1, -0.2), c(0.3, 0.)],
        );
        let prod = kron(&rho_s, &ket0());
        let out = partial_trace_last_qubit(&prod).unwrap();
        assert!(frobenius_distance(&out, &rho_s) < 1e-12);

        let max_mixed4 = identity(4).scale(0.25);
        let out = partial_trace_last_qubit(&max_mixed4).unwrap();
        assert!(frobenius_distance(&out, &identity(2).scale(0.5)) < 1e-12);

        // Bell state projector traces to the maximally mixed state (explicit 4x4)
        let mut bell = CVector::zeros(4);
        bell[0] = c(std::f64::consts::FRAC_1_SQRT_2, 0.);
        bell[3] = c(std::f64::consts::FRAC_1_SQRT_2, 0.);
        let proj = &bell * bell.adjoint();
        let out = partial_trace_last_qubit(&proj).unwrap();
        assert!(frobenius_distance(&out, &identity(2).scale(0.5)) < 1e-12);
        assert!((trace(&out).re - 1.0).abs() < 1e-12);
    }

    #[test]
    fn partial_trace_rejects_odd_dimension() {
        assert!(partial_trace_last_qubit(&CMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn fidelity_cases() {
        let rho = CMatrix::from_row_slice(
            2,
            2,
            &[c(0.7, 0.), c(0.1, 0.2), c(0.1, -0.2), c(0.3, 0.)],
        );
        assert!((fidelity(&rho, &rho).unwrap() - 1.0).abs() < 1e-9);
        assert!(fidelity(&ket0(), &ket1()).unwrap().abs() < 1e-9);
        // F(|0><0|, I/2) = 1/sqrt(2), closed-form eigendecomposition
        let half = identity(2).scale(0.5);
        assert!((fidelity(&ket0(), &half).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    }

    #[test]
    fn fidelity_symmetry_and_range() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let a = CMatrix::from_fn(3, 3, |_, _| {
                c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let b = CMatrix::from_fn(3, 3, |_, _| {
                c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            });
            let mut rho = &a * a.adjoint();
            let mut sigma = &b * b.adjoint();
            rho.scale_mut(1.0 / trace(&rho).re);
            sigma.scale_mut(1.0 / trace(&sigma).re);
            let f1 = fidelity(&rho, &sigma).unwrap();
            let f2 = fidelity(&sigma, &rho).unwrap();
            assert!((f1 - f2).abs() < 1e-9);
            assert!(f1 >= 0.0 && f1 <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn trace_distance_cases() {
        let rho = identity(2).scale(0.5);
        assert!(trace_distance(&rho, &rho).unwrap().abs() < 1e-12);
        assert!((trace_distance(&ket0(), &ket1()).unwrap() - 1.0).abs() < 1e-12);
        let sigma = CMatrix::from_diagonal(&CVector::from_vec(vec![c(0.6, 0.), c(0.4, 0.)]));
        assert!((trace_distance(&rho, &sigma).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn expm_general_matches_hermitian_route() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let raw = CMatrix::from_fn(4, 4, |_, _| {
            c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        });
        let h = (&raw + raw.adjoint()).scale(0.5);
        let t = 0.8;
        let gen = h.map(|z| z * c(0., -t));
        let a = expm(&gen);
        let b = expm_hermitian_generator(&h, t).unwrap();
        assert!(frobenius_distance(&a, &b) < 1e-11);
    }

    #[test]
    fn psd_project_clips_and_renormalizes() {
        let a = CMatrix::from_diagonal(&CVector::from_vec(vec![c(1.02, 0.), c(-0.02, 0.)]));
        let p = psd_project(&a, true).unwrap();
        assert!((trace(&p).re - 1.0).abs() < 1e-12);
        let (w, _) = hermitian_eigen(&p, 1e-9).unwrap();
        assert!(w.iter().all(|&x| x >= -1e-15));
    }
}
