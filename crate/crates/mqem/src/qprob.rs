//! Quasi-probability post-processing: given a decomposition of a channel
//! inverse E^{-1} = sum_k q_k B_k into physical (trace-preserving) maps
//! with real coefficients summing to 1, estimate tr(O E^{-1}(rho)) by
//! sampling maps with probability |q_k|/C and reweighting with C and the
//! coefficient signs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::complexla::{c, identity, sigma_x, sigma_y, sigma_z, trace, CMatrix};
use crate::error::{Error, Result};

const COEFF_SUM_TOL: f64 = 1e-10;
const TRACE_PRESERVING_TOL: f64 = 1e-10;

/// A completely positive trace-preserving map in Kraus form.
#[derive(Debug, Clone)]
pub struct KrausChannel {
    pub kraus: Vec<CMatrix>,
}

impl KrausChannel {
    pub fn new(kraus: Vec<CMatrix>) -> Result<Self> {
        if kraus.is_empty() {
            return Err(Error::InvalidDecomposition(
                "channel with no Kraus operators".into(),
            ));
        }
        let dim = kraus[0].nrows();
        let mut total = CMatrix::zeros(dim, dim);
        for k in &kraus {
            if k.nrows() != dim || k.ncols() != dim {
                return Err(Error::DimensionMismatch(
                    "Kraus operators differ in dimension".into(),
                ));
            }
            total += k.adjoint() * k;
        }
        let dev = crate::complexla::frobenius_distance(&total, &identity(dim));
        if dev > TRACE_PRESERVING_TOL {
            return Err(Error::InvalidDecomposition(format!(
                "channel is not trace-preserving (deviation {dev:.3e})"
            )));
        }
        Ok(KrausChannel { kraus })
    }

    pub fn dim(&self) -> usize {
        self.kraus[0].nrows()
    }

    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let dim = self.dim();
        let mut out = CMatrix::zeros(dim, dim);
        for k in &self.kraus {
            out += k * rho * k.adjoint();
        }
        out
    }
}

/// E^{-1} = sum_k q_k B_k with sum_k q_k = 1.
#[derive(Debug, Clone)]
pub struct QuasiDecomposition {
    pub maps: Vec<KrausChannel>,
    pub coefficients: Vec<f64>,
}

impl QuasiDecomposition {
    pub fn new(maps: Vec<KrausChannel>, coefficients: Vec<f64>) -> Result<Self> {
        if maps.len() != coefficients.len() || maps.is_empty() {
            return Err(Error::InvalidDecomposition(format!(
                "{} maps vs {} coefficients",
                maps.len(),
                coefficients.len()
            )));
        }
        let dim = maps[0].dim();
        if !maps.iter().all(|m| m.dim() == dim) {
            return Err(Error::DimensionMismatch(
                "maps differ in dimension".into(),
            ));
        }
        let sum: f64 = coefficients.iter().sum();
        if (sum - 1.0).abs() > COEFF_SUM_TOL {
            return Err(Error::InvalidDecomposition(format!(
                "coefficients sum to {sum}, not 1"
            )));
        }
        Ok(QuasiDecomposition { maps, coefficients })
    }

    /// Deterministic full sum: sum_k q_k B_k(rho).
    pub fn apply(&self, rho: &CMatrix) -> CMatrix {
        let dim = self.maps[0].dim();
        let mut out = CMatrix::zeros(dim, dim);
        for (map, &q) in self.maps.iter().zip(&self.coefficients) {
            out += map.apply(rho).scale(q);
        }
        out
    }
}

/// Sampling form of a quasi-probability decomposition: cost C = sum |q_k|,
/// probabilities p_k = |q_k|/C and signs s_k = sign(q_k).
#[derive(Debug, Clone)]
pub struct QPSampling {
    pub cost: f64,
    pub probabilities: Vec<f64>,
    pub signs: Vec<f64>,
}

pub fn normalize(decomp: &QuasiDecomposition) -> Result<QPSampling> {
    let cost: f64 = decomp.coefficients.iter().map(|q| q.abs()).sum();
    if cost == 0.0 {
        return Err(Error::InvalidDecomposition(
            "all coefficients vanish".into(),
        ));
    }
    Ok(QPSampling {
        cost,
        probabilities: decomp.coefficients.iter().map(|q| q.abs() / cost).collect(),
        signs: decomp
            .coefficients
            .iter()
            .map(|q| if *q < 0.0 { -1.0 } else { 1.0 })
            .collect(),
    })
}

/// Monte Carlo estimator of tr(O E^{-1}(rho)): draw k ~ p, average
/// C s_k tr(O B_k(rho)). Returns (mean, standard error).
pub fn qp_estimate(
    sampling: &QPSampling,
    decomp: &QuasiDecomposition,
    rho: &CMatrix,
    observable: &CMatrix,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let dev = crate::complexla::max_hermitian_deviation(observable);
    if dev > 1e-10 {
        return Err(Error::NonHermitian { max_dev: dev });
    }
    // per-map value C s_k tr(O B_k(rho)); sampling then only draws indices
    let values: Vec<f64> = decomp
        .maps
        .iter()
        .zip(&sampling.signs)
        .map(|(map, &s)| sampling.cost * s * trace(&(observable * map.apply(rho))).re)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_samples {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = values.len() - 1;
        for (k, &p) in sampling.probabilities.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = k;
                break;
            }
        }
        sum += values[chosen];
        sum_sq += values[chosen] * values[chosen];
    }
    let n = n_samples as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0);
    Ok((mean, (var / n).sqrt()))
}

/// Depolarizing channel E(rho) = (1-p) rho + p/3 (X rho X + Y rho Y + Z rho Z).
pub fn depolarizing_channel(p: f64) -> Result<KrausChannel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("depolarizing p={p}")));
    }
    let w = (p / 3.0).sqrt();
    KrausChannel::new(vec![
        identity(2).scale((1.0 - p).sqrt()),
        sigma_x().scale(w),
        sigma_y().scale(w),
        sigma_z().scale(w),
    ])
}

/// Closed-form inverse of the depolarizing channel as a quasi-probability
/// mix of Pauli conjugations. With f = 1 - 4p/3 the inverse acts as
/// rho -> rho/f + (f-1)/f (I/2) tr(rho), which in the conjugation basis
/// gives coefficients q = ((3+f)/(4f), v, v, v) with v = (f-1)/(4f) < 0.
pub fn depolarizing_inverse(p: f64) -> Result<QuasiDecomposition> {
    let f = 1.0 - 4.0 * p / 3.0;
    if f <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "depolarizing channel with p={p} is not invertible"
        )));
    }
    let v = (f - 1.0) / (4.0 * f);
    let w0 = (3.0 + f) / (4.0 * f);
    let maps = vec![
        KrausChannel::new(vec![identity(2)])?,
        KrausChannel::new(vec![sigma_x()])?,
        KrausChannel::new(vec![sigma_y()])?,
        KrausChannel::new(vec![sigma_z()])?,
    ];
    QuasiDecomposition::new(maps, vec![w0, v, v, v])
}

/// Plain-text decomposition format:
/// ```text
/// dim,k_count
/// <q_0>
/// <kraus_count_0>
/// re,im re,im ...   (one line per Kraus operator, row-major)
/// <q_1>
/// ...
/// ```
pub fn read_decomposition(path: &Path) -> Result<QuasiDecomposition> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidDecomposition("empty file".into()))?;
    let mut parts = header.split(',');
    let parse_usize = |s: Option<&str>, what: &str| -> Result<usize> {
        s.and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::InvalidDecomposition(format!("bad {what} in header")))
    };
    let dim = parse_usize(parts.next(), "dim")?;
    let k_count = parse_usize(parts.next(), "k_count")?;
    let mut maps = Vec::with_capacity(k_count);
    let mut coefficients = Vec::with_capacity(k_count);
    for ki in 0..k_count {
        let q: f64 = lines
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| Error::InvalidDecomposition(format!("map {ki}: bad coefficient")))?;
        let n_kraus: usize = lines
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| Error::InvalidDecomposition(format!("map {ki}: bad Kraus count")))?;
        let mut kraus = Vec::with_capacity(n_kraus);
        for mi in 0..n_kraus {
            let line = lines.next().ok_or_else(|| {
                Error::InvalidDecomposition(format!("map {ki}: missing Kraus operator {mi}"))
            })?;
            let entries: Vec<crate::complexla::C64> = line
                .split_whitespace()
                .map(|tok| {
                    let mut p = tok.split(',');
                    match (
                        p.next().and_then(|x| x.parse::<f64>().ok()),
                        p.next().and_then(|x| x.parse::<f64>().ok()),
                    ) {
                        (Some(re), Some(im)) => Ok(c(re, im)),
                        _ => Err(Error::InvalidDecomposition(format!(
                            "map {ki}: bad entry `{tok}`"
                        ))),
                    }
                })
                .collect::<Result<_>>()?;
            if entries.len() != dim * dim {
                return Err(Error::InvalidDecomposition(format!(
                    "map {ki}: {} entries for a {dim}x{dim} operator",
                    entries.len()
                )));
            }
            kraus.push(CMatrix::from_row_slice(dim, dim, &entries));
        }
        maps.push(KrausChannel::new(kraus)?);
        coefficients.push(q);
    }
    QuasiDecomposition::new(maps, coefficients)
}

pub fn write_decomposition(decomp: &QuasiDecomposition, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let dim = decomp.maps[0].dim();
    let mut out = String::new();
    let _ = writeln!(out, "{dim},{}", decomp.maps.len());
    for (map, q) in decomp.maps.iter().zip(&decomp.coefficients) {
        let _ = writeln!(out, "{q}");
        let _ = writeln!(out, "{}", map.kraus.len());
        for k in &map.kraus {
            let row: Vec<String> = (0..dim)
                .flat_map(|i| (0..dim).map(move |j| (i, j)))
                .map(|(i, j)| format!("{},{}", k[(i, j)].re, k[(i, j)].im))
                .collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexla::frobenius_distance;
    use nalgebra::DMatrix;

    fn basis_rho(i: usize) -> CMatrix {
        let mut m = CMatrix::zeros(2, 2);
        m[(i, i)] = c(1.0, 0.0);
        m
    }

    fn random_rho(rng: &mut impl Rng) -> CMatrix {
        let g = CMatrix::from_fn(2, 2, |_, _| c(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        let mut rho: CMatrix = &g * g.adjoint();
        let tr = trace(&rho).re;
        rho.scale_mut(1.0 / tr);
        rho
    }

    #[test]
    fn normalize_cases() {
        let id = KrausChannel::new(vec![identity(2)]).unwrap();
        let d = QuasiDecomposition::new(vec![id.clone()], vec![1.0]).unwrap();
        let s = normalize(&d).unwrap();
        assert_eq!(s.cost, 1.0);
        assert_eq!(s.probabilities, vec![1.0]);
        assert_eq!(s.signs, vec![1.0]);

        let x = KrausChannel::new(vec![sigma_x()]).unwrap();
        let d = QuasiDecomposition::new(vec![id, x], vec![1.5, -0.5]).unwrap();
        let s = normalize(&d).unwrap();
        assert!((s.cost - 2.0).abs() < 1e-15);
        assert!((s.probabilities[0] - 0.75).abs() < 1e-15);
        assert!((s.probabilities[1] - 0.25).abs() < 1e-15);
        assert_eq!(s.signs, vec![1.0, -1.0]);
        // s_k p_k C = q_k exactly
        assert!((s.signs[1] * s.probabilities[1] * s.cost - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn decomposition_validation() {
        // coefficients must sum to 1
        let id = KrausChannel::new(vec![identity(2)]).unwrap();
        assert!(QuasiDecomposition::new(vec![id], vec![0.5]).is_err());
        // non-trace-preserving Kraus set rejected
        assert!(KrausChannel::new(vec![identity(2).scale(0.5)]).is_err());
    }

    /// Pauli-transfer-matrix oracle: T[i,j] = tr(P_i E(P_j))/2, inverted
    /// numerically and projected onto the four Pauli conjugations.
    fn ptm_oracle_coefficients(p: f64) -> Vec<f64> {
        let paulis = [identity(2), sigma_x(), sigma_y(), sigma_z()];
        let e = depolarizing_channel(p).unwrap();
        let mut t = DMatrix::<f64>::zeros(4, 4);
        for j in 0..4 {
            let out = e.apply(&paulis[j]);
            for i in 0..4 {
                t[(i, j)] = trace(&(&paulis[i] * &out)).re / 2.0;
            }
        }
        let t_inv = t.try_inverse().unwrap();
        // conjugation by P_k has PTM diag(d_k); solve sum_k q_k d_k = diag(T^{-1})
        let mut basis = DMatrix::<f64>::zeros(4, 4);
        for (k, pk) in paulis.iter().enumerate() {
            for i in 0..4 {
                basis[(i, k)] = trace(&(&paulis[i] * pk * &paulis[i] * pk)).re / 2.0;
            }
        }
        let rhs = nalgebra::DVector::from_iterator(4, (0..4).map(|i| t_inv[(i, i)]));
        let q = basis.lu().solve(&rhs).unwrap();
        q.iter().copied().collect()
    }

    #[test]
    fn depolarizing_inverse_matches_ptm_oracle() {
        for &p in &[0.05, 0.1, 0.2] {
            let d = depolarizing_inverse(p).unwrap();
            let oracle = ptm_oracle_coefficients(p);
            for (a, b) in d.coefficients.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "p={p}: {a} vs {b}");
            }
            let s = normalize(&d).unwrap();
            assert!(s.cost > 1.0);
        }
    }

    #[test]
    fn full_sum_inverts_the_channel() {
        let p = 0.1;
        let e = depolarizing_channel(p).unwrap();
        let inv = depolarizing_inverse(p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..20 {
            let rho = random_rho(&mut rng);
            let recovered = inv.apply(&e.apply(&rho));
            assert!(frobenius_distance(&recovered, &rho) < 1e-9);
        }
    }

    #[test]
    fn estimator_single_identity_map_is_exact() {
        let id = KrausChannel::new(vec![identity(2)]).unwrap();
        let d = QuasiDecomposition::new(vec![id], vec![1.0]).unwrap();
        let s = normalize(&d).unwrap();
        let rho = basis_rho(0);
        let (mean, se) = qp_estimate(&s, &d, &rho, &sigma_z(), 100, 7).unwrap();
        assert!((mean - 1.0).abs() < 1e-14);
        assert!(se < 1e-14);
    }

    #[test]
    fn estimator_recovers_depolarized_expectation() {
        // O = sigma_z, rho = |0><0|: after E(p=0.1), the mitigated
        // expectation must return to +1.
        let p = 0.1;
        let e = depolarizing_channel(p).unwrap();
        let inv = depolarizing_inverse(p).unwrap();
        let s = normalize(&inv).unwrap();
        let noisy = e.apply(&basis_rho(0));
        let (mean, se) = qp_estimate(&s, &inv, &noisy, &sigma_z(), 100_000, 3).unwrap();
        assert!(
            (mean - 1.0).abs() <= 3.0 * se,
            "mean {mean} +- {se} vs exact 1"
        );
        // and the raw (unmitigated) value is visibly damped
        let raw = trace(&(sigma_z() * &noisy)).re;
        assert!(raw < 0.9);
    }

    #[test]
    fn stderr_grows_with_cost() {
        let rho0 = basis_rho(0);
        let mut ses = Vec::new();
        for &p in &[0.1, 0.2] {
            let e = depolarizing_channel(p).unwrap();
            let inv = depolarizing_inverse(p).unwrap();
            let s = normalize(&inv).unwrap();
            let noisy = e.apply(&rho0);
            let (_, se) = qp_estimate(&s, &inv, &noisy, &sigma_z(), 20_000, 11).unwrap();
            ses.push(se);
        }
        assert!(ses[1] > ses[0], "stderr {ses:?} not increasing with cost");
    }

    #[test]
    fn estimator_unbiased_over_repetitions() {
        let p = 0.1;
        let e = depolarizing_channel(p).unwrap();
        let inv = depolarizing_inverse(p).unwrap();
        let s = normalize(&inv).unwrap();
        let noisy = e.apply(&basis_rho(0));
        let exact = trace(&(sigma_z() * inv.apply(&noisy))).re;
        let mut means = Vec::new();
        let mut ses = Vec::new();
        for run in 0..50u64 {
            let (m, se) = qp_estimate(&s, &inv, &noisy, &sigma_z(), 2000, 100 + run).unwrap();
            means.push(m);
            ses.push(se);
        }
        let grand = means.iter().sum::<f64>() / means.len() as f64;
        let combined = (ses.iter().map(|s| s * s).sum::<f64>()).sqrt() / ses.len() as f64;
        assert!(
            (grand - exact).abs() <= 3.0 * combined,
            "grand mean {grand} vs {exact} (combined SE {combined})"
        );
    }

    #[test]
    fn decomposition_file_round_trip() {
        let dir = std::env::temp_dir().join("mqem_qprob_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("depol_inverse.qpd");
        let d = depolarizing_inverse(0.1).unwrap();
        write_decomposition(&d, &path).unwrap();
        let back = read_decomposition(&path).unwrap();
        assert_eq!(back.maps.len(), d.maps.len());
        for (a, b) in back.coefficients.iter().zip(&d.coefficients) {
            assert!((a - b).abs() < 1e-15);
        }
        for (ma, mb) in back.maps.iter().zip(&d.maps) {
            for (ka, kb) in ma.kraus.iter().zip(&mb.kraus) {
                assert!(frobenius_distance(ka, kb) < 1e-15);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
