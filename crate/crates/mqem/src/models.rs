//! Model construction: Hamiltonians, Lindblad channel sets and
//! time-dependent rate functions.

use std::path::Path;

use crate::complexla::{
    self, c, identity, kron, sigma_minus, sigma_x, sigma_y, sigma_z, sqrtm_psd, CMatrix,
    HERMITIAN_TOL,
};
use crate::error::{Error, Result};

/// Scalar rate as a function of time. Tabulated rates interpolate linearly
/// and refuse to extrapolate.
#[derive(Debug, Clone)]
pub enum RateFunction {
    Constant(f64),
    Tabulated { times: Vec<f64>, values: Vec<f64> },
}

impl RateFunction {
    pub fn tabulated(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() {
            return Err(Error::InvalidRateTable(format!(
                "{} times vs {} values",
                times.len(),
                values.len()
            )));
        }
        if times.len() < 2 {
            return Err(Error::InvalidRateTable("need at least two samples".into()));
        }
        if !times.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidRateTable(
                "times must be strictly increasing".into(),
            ));
        }
        Ok(RateFunction::Tabulated { times, values })
    }

    pub fn eval(&self, t: f64) -> Result<f64> {
        match self {
            RateFunction::Constant(v) => Ok(*v),
            RateFunction::Tabulated { times, values } => {
                let t_min = times[0];
                let t_max = *times.last().unwrap();
                // Small slack for grid round-off at the table edges.
                let eps = 1e-9 * (1.0 + t_max.abs());
                if t < t_min - eps || t > t_max + eps {
                    return Err(Error::RateOutOfRange { t, t_min, t_max });
                }
                let t = t.clamp(t_min, t_max);
                let idx = match times.binary_search_by(|x| x.partial_cmp(&t).unwrap()) {
                    Ok(i) => return Ok(values[i]),
                    Err(i) => i,
                };
                let (t0, t1) = (times[idx - 1], times[idx]);
                let (v0, v1) = (values[idx - 1], values[idx]);
                Ok(v0 + (v1 - v0) * (t - t0) / (t1 - t0))
            }
        }
    }

    /// Trapezoid integral of the rate from grid[0] to every grid point.
    pub fn cumulative_integral(&self, grid: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(grid.len());
        let mut acc = 0.0;
        let mut prev_t = match grid.first() {
            Some(&t) => t,
            None => return Ok(out),
        };
        let mut prev_v = self.eval(prev_t)?;
        out.push(0.0);
        for &t in &grid[1..] {
            let v = self.eval(t)?;
            acc += 0.5 * (prev_v + v) * (t - prev_t);
            out.push(acc);
            prev_t = t;
            prev_v = v;
        }
        Ok(out)
    }

    /// The same rate multiplied pointwise by `a`.
    pub fn scaled(&self, a: f64) -> RateFunction {
        match self {
            RateFunction::Constant(v) => RateFunction::Constant(a * v),
            RateFunction::Tabulated { times, values } => RateFunction::Tabulated {
                times: times.clone(),
                values: values.iter().map(|v| a * v).collect(),
            },
        }
    }

    /// Loads a two-column `time,value` text file with a header line.
    pub fn from_table_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut times = Vec::new();
        let mut values = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if i == 0 || line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split(',');
            let (t, v) = match (parts.next(), parts.next()) {
                (Some(t), Some(v)) => (t.trim(), v.trim()),
                _ => {
                    return Err(Error::InvalidRateTable(format!(
                        "line {}: expected `time,value`",
                        i + 1
                    )))
                }
            };
            let t: f64 = t.parse().map_err(|_| {
                Error::InvalidRateTable(format!("line {}: bad time `{t}`", i + 1))
            })?;
            let v: f64 = v.parse().map_err(|_| {
                Error::InvalidRateTable(format!("line {}: bad value `{v}`", i + 1))
            })?;
            times.push(t);
            values.push(v);
        }
        Self::tabulated(times, values)
    }
}

/// One dissipation channel: a Lindblad operator with a (possibly
/// time-dependent) rate. `site` records the lattice site for single-site
/// operators, used by the error-injection study.
#[derive(Debug, Clone)]
pub struct Channel {
    pub lindblad: CMatrix,
    pub rate: RateFunction,
    pub label: String,
    pub site: Option<usize>,
}

impl Channel {
    pub fn new(lindblad: CMatrix, rate: RateFunction, label: impl Into<String>) -> Self {
        Channel {
            lindblad,
            rate,
            label: label.into(),
            site: None,
        }
    }
}

/// Hamiltonian, constant or piecewise-constant on the integration grid.
#[derive(Debug, Clone)]
pub enum Hamiltonian {
    Constant(CMatrix),
    /// Each entry (t_k, H_k) applies for t >= t_k until the next tag.
    PiecewiseConstant(Vec<(f64, CMatrix)>),
}

impl Hamiltonian {
    pub fn at(&self, t: f64) -> &CMatrix {
        match self {
            Hamiltonian::Constant(h) => h,
            Hamiltonian::PiecewiseConstant(segments) => {
                let mut current = &segments[0].1;
                for (t_k, h) in segments {
                    if *t_k <= t {
                        current = h;
                    } else {
                        break;
                    }
                }
                current
            }
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Hamiltonian::Constant(_))
    }
}

/// Hamiltonian plus a list of dissipation channels.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    pub dim: usize,
    pub hamiltonian: Hamiltonian,
    pub channels: Vec<Channel>,
}

impl NoiseModel {
    pub fn new(hamiltonian: Hamiltonian, channels: Vec<Channel>) -> Result<Self> {
        let h0 = hamiltonian.at(f64::NEG_INFINITY);
        let dim = h0.nrows();
        match &hamiltonian {
            Hamiltonian::Constant(h) => check_hermitian(h)?,
            Hamiltonian::PiecewiseConstant(segments) => {
                if segments.is_empty() {
                    return Err(Error::InvalidConfig("empty piecewise Hamiltonian".into()));
                }
                for (_, h) in segments {
                    check_hermitian(h)?;
                    if h.nrows() != dim {
                        return Err(Error::DimensionMismatch(
                            "piecewise Hamiltonian segments differ in dimension".into(),
                        ));
                    }
                }
            }
        }
        for ch in &channels {
            if ch.lindblad.nrows() != dim || ch.lindblad.ncols() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "channel `{}` is {}x{} but the model dimension is {dim}",
                    ch.label,
                    ch.lindblad.nrows(),
                    ch.lindblad.ncols()
                )));
            }
        }
        Ok(NoiseModel {
            dim,
            hamiltonian,
            channels,
        })
    }

    /// True when the Hamiltonian and all rates are time-independent, which
    /// enables precomputed propagators in the stochastic engines.
    pub fn is_time_independent(&self) -> bool {
        self.hamiltonian.is_constant()
            && self
                .channels
                .iter()
                .all(|ch| matches!(ch.rate, RateFunction::Constant(_)))
    }
}

fn check_hermitian(h: &CMatrix) -> Result<()> {
    let dev = complexla::max_hermitian_deviation(h);
    if dev > HERMITIAN_TOL * (1.0 + h.iter().map(|z| z.norm()).fold(0.0, f64::max)) {
        return Err(Error::NonHermitian { max_dev: dev });
    }
    Ok(())
}

/// Embeds a single-site operator at `site` of an `n_sites` qubit register,
/// site 0 being the most significant factor.
pub fn embed_single_site(op: &CMatrix, site: usize, n_sites: usize) -> CMatrix {
    let mut out = identity(1);
    for i in 0..n_sites {
        let factor = if i == site { op.clone() } else { identity(2) };
        out = kron(&out, &factor);
    }
    out
}

/// Anisotropic Heisenberg Hamiltonian on the 2x2 lattice (4 spins,
/// row-major site order, open-square bonds (0,1),(0,2),(1,3),(2,3)):
/// J sum_bonds [(1+g) sx sx + (1-g) sy sy + sz sz] - g h sum_i sy_i.
pub fn build_heisenberg_2x2(j: f64, anisotropy: f64, field: f64) -> CMatrix {
    const N: usize = 4;
    const BONDS: [(usize, usize); 4] = [(0, 1), (0, 2), (1, 3), (2, 3)];
    let mut h = CMatrix::zeros(16, 16);
    let paulis = [sigma_x(), sigma_y(), sigma_z()];
    let couplings = [j * (1.0 + anisotropy), j * (1.0 - anisotropy), j];
    for &(a, b) in &BONDS {
        for (p, &coupling) in paulis.iter().zip(&couplings) {
            let term = embed_single_site(p, a, N) * embed_single_site(p, b, N);
            h += term.scale(coupling);
        }
    }
    let sy = sigma_y();
    for i in 0..N {
        h -= embed_single_site(&sy, i, N).scale(anisotropy * field);
    }
    h
}

/// Local relaxation and dephasing channels on all 4 sites:
/// sigma_-^(i) with rate gamma_r and sigma_z^(i) with rate gamma_d.
pub fn build_local_noise(gamma_r: RateFunction, gamma_d: RateFunction) -> Vec<Channel> {
    const N: usize = 4;
    let mut channels = Vec::with_capacity(2 * N);
    let sm = sigma_minus();
    let sz = sigma_z();
    for i in 0..N {
        channels.push(Channel {
            lindblad: embed_single_site(&sm, i, N),
            rate: gamma_r.clone(),
            label: format!("relax_{i}"),
            site: Some(i),
        });
    }
    for i in 0..N {
        channels.push(Channel {
            lindblad: embed_single_site(&sz, i, N),
            rate: gamma_d.clone(),
            label: format!("dephase_{i}"),
            site: Some(i),
        });
    }
    channels
}

/// Engineered rates gamma_k(t) = m(t) - noise_rate_k(t), validated for
/// positivity on the given grid. Constant inputs stay constant; anything
/// time-dependent is tabulated on the grid.
pub fn engineered_rates(
    noise_rates: &[RateFunction],
    m: &RateFunction,
    grid: &[f64],
) -> Result<Vec<RateFunction>> {
    let mut out = Vec::with_capacity(noise_rates.len());
    for (k, noise) in noise_rates.iter().enumerate() {
        match (noise, m) {
            (RateFunction::Constant(g), RateFunction::Constant(mv)) => {
                let gamma = mv - g;
                if gamma < 0.0 {
                    return Err(Error::NegativeEngineeredRate {
                        channel: k,
                        t: grid.first().copied().unwrap_or(0.0),
                        m: *mv,
                        noise_rate: *g,
                    });
                }
                out.push(RateFunction::Constant(gamma));
            }
            _ => {
                let mut values = Vec::with_capacity(grid.len());
                for &t in grid {
                    let mv = m.eval(t)?;
                    let g = noise.eval(t)?;
                    let gamma = mv - g;
                    if gamma < 0.0 {
                        return Err(Error::NegativeEngineeredRate {
                            channel: k,
                            t,
                            m: mv,
                            noise_rate: g,
                        });
                    }
                    values.push(gamma);
                }
                out.push(RateFunction::tabulated(grid.to_vec(), values)?);
            }
        }
    }
    Ok(out)
}

/// Result of rescaling a Lindblad set so that sum_k L_k^dag L_k plus a
/// padding operator squares to the identity.
///
/// The reweighting theorem behind the influence martingale needs the
/// engineered channel set to satisfy sum_k L_k^dag L_k = I. Dividing every
/// operator by sqrt(a) with a = ||sum L^dag L|| and scaling rates by a
/// leaves every dissipator invariant; the remaining deficiency is absorbed
/// by the positive padding operator P = sqrt(I - sum Lhat^dag Lhat), which
/// carries zero target rate so jumps through it weight the trajectory by 0.
#[derive(Debug, Clone)]
pub struct PaddedChannelSet {
    /// Rescaled Lindblad operators L_k / sqrt(a).
    pub lindblads: Vec<CMatrix>,
    /// Rate multiplier a applied to all channel rates.
    pub rate_scale: f64,
    /// Padding operator, None when the rescaled set is already complete.
    pub padding: Option<CMatrix>,
}

/// Tolerance below which the completeness deficiency is ignored.
const PADDING_TOL: f64 = 1e-12;

pub fn completeness_padding(lindblads: &[CMatrix]) -> Result<PaddedChannelSet> {
    if lindblads.is_empty() {
        return Err(Error::InvalidPlan("no Lindblad operators".into()));
    }
    let dim = lindblads[0].nrows();
    let mut s = CMatrix::zeros(dim, dim);
    for l in lindblads {
        s += l.adjoint() * l;
    }
    let (w, _) = complexla::hermitian_eigen(&s, 1e-9)?;
    let a = w.iter().copied().fold(0.0, f64::max);
    if a <= 0.0 {
        return Err(Error::InvalidPlan("all Lindblad operators vanish".into()));
    }
    let scale = 1.0 / a.sqrt();
    let scaled: Vec<CMatrix> = lindblads.iter().map(|l| l.scale(scale)).collect();
    let deficiency = identity(dim) - s.scale(1.0 / a);
    let max_deficiency = deficiency.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let padding = if max_deficiency > PADDING_TOL {
        Some(sqrtm_psd(&deficiency)?)
    } else {
        None
    };
    Ok(PaddedChannelSet {
        lindblads: scaled,
        rate_scale: a,
        padding,
    })
}

/// Ground-state ket |down...down> has index dim-1; the all-up state used as
/// the benchmark default is index 0.
pub fn basis_ket(dim: usize, index: usize) -> crate::complexla::CVector {
    let mut v = crate::complexla::CVector::zeros(dim);
    v[index] = c(1.0, 0.0);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexla::{frobenius_distance, is_hermitian, trace};

    #[test]
    fn rate_table_rejects_bad_grids() {
        assert!(RateFunction::tabulated(vec![0.0, 0.0, 1.0], vec![1.0, 2.0, 3.0]).is_err());
        assert!(RateFunction::tabulated(vec![0.0], vec![1.0]).is_err());
    }

    #[test]
    fn rate_table_interpolates_and_refuses_extrapolation() {
        let r = RateFunction::tabulated(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 2.0]).unwrap();
        assert!((r.eval(0.5).unwrap() - 1.0).abs() < 1e-12);
        assert!((r.eval(2.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(r.eval(2.5), Err(Error::RateOutOfRange { .. })));
        assert!(matches!(r.eval(-0.5), Err(Error::RateOutOfRange { .. })));
    }

    #[test]
    fn heisenberg_is_hermitian() {
        let h = build_heisenberg_2x2(1.0, 0.5, 0.3);
        assert!(is_hermitian(&h, 1e-12));
    }

    #[test]
    fn heisenberg_isotropic_when_anisotropy_zero() {
        // The field term carries a coefficient anisotropy*h, so it vanishes too.
        let h_with_field = build_heisenberg_2x2(1.0, 0.0, 7.3);
        let h_without = build_heisenberg_2x2(1.0, 0.0, 0.0);
        assert!(frobenius_distance(&h_with_field, &h_without) < 1e-12);
    }

    #[test]
    fn heisenberg_all_up_expectation() {
        // Brute-force oracle: each of the 4 bonds contributes J from sz sz,
        // the xx/yy terms flip spins and do not contribute diagonally.
        let j = 1.3;
        let h = build_heisenberg_2x2(j, 0.4, 0.9);
        assert!((h[(0, 0)].re - 4.0 * j).abs() < 1e-12);
        assert!(h[(0, 0)].im.abs() < 1e-12);
    }

    #[test]
    fn heisenberg_commutes_with_spin_flip_at_zero_anisotropy() {
        let h = build_heisenberg_2x2(1.0, 0.0, 0.0);
        let mut flip = identity(1);
        for _ in 0..4 {
            flip = kron(&flip, &sigma_x());
        }
        let comm = &h * &flip - &flip * &h;
        assert!(comm.norm() < 1e-10);
    }

    #[test]
    fn local_noise_channel_count_and_algebra() {
        let channels = build_local_noise(RateFunction::Constant(0.001), RateFunction::Constant(0.001));
        assert_eq!(channels.len(), 8);
        for ch in &channels[..4] {
            // sigma_-^2 = 0
            let sq = &ch.lindblad * &ch.lindblad;
            assert!(sq.norm() < 1e-14);
        }
        for ch in &channels[4..] {
            // sigma_z^2 = identity
            let sq = &ch.lindblad * &ch.lindblad;
            assert!(frobenius_distance(&sq, &identity(16)) < 1e-14);
        }
    }

    #[test]
    fn engineered_rates_constant() {
        let grid: Vec<f64> = (0..10).map(|i| i as f64 * 0.1).collect();
        let noise = vec![RateFunction::Constant(0.001); 3];
        let out = engineered_rates(&noise, &RateFunction::Constant(0.002), &grid).unwrap();
        for r in &out {
            assert!((r.eval(0.5).unwrap() - 0.001).abs() < 1e-15);
        }
        // negative-definite noise rates with m = 0 give gamma_k = |rate|
        let noise = vec![RateFunction::Constant(-0.3)];
        let out = engineered_rates(&noise, &RateFunction::Constant(0.0), &grid).unwrap();
        assert!((out[0].eval(0.1).unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn engineered_rates_tabulated_and_reconstruction() {
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.05).collect();
        let cos_table = RateFunction::tabulated(
            grid.clone(),
            grid.iter().map(|&t| t.cos()).collect(),
        )
        .unwrap();
        let m = RateFunction::Constant(2.0);
        let out = engineered_rates(&[cos_table.clone()], &m, &grid).unwrap();
        for &t in &grid {
            let gamma = out[0].eval(t).unwrap();
            assert!(gamma > 0.0);
            // gamma + noise reconstructs m pointwise
            assert!((gamma + cos_table.eval(t).unwrap() - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn engineered_rates_reports_negativity() {
        let grid: Vec<f64> = vec![0.0, 1.0];
        let noise = vec![RateFunction::Constant(0.5)];
        let err = engineered_rates(&noise, &RateFunction::Constant(0.1), &grid).unwrap_err();
        assert!(matches!(err, Error::NegativeEngineeredRate { channel: 0, .. }));
    }

    #[test]
    fn completeness_padding_properties() {
        // sigma_- alone: a = 1, padding is the ground-state projector.
        let set = completeness_padding(&[sigma_minus()]).unwrap();
        assert!((set.rate_scale - 1.0).abs() < 1e-12);
        let p = set.padding.as_ref().unwrap();
        let mut total = CMatrix::zeros(2, 2);
        for l in &set.lindblads {
            total += l.adjoint() * l;
        }
        total += p.adjoint() * p;
        assert!(frobenius_distance(&total, &identity(2)) < 1e-10);

        // sigma_z alone is already complete.
        let set = completeness_padding(&[sigma_z()]).unwrap();
        assert!(set.padding.is_none());
        assert!((set.rate_scale - 1.0).abs() < 1e-12);

        // Benchmark channel set: scale is ||4 I + sum P_up|| = 8.
        let channels =
            build_local_noise(RateFunction::Constant(0.001), RateFunction::Constant(0.001));
        let ls: Vec<CMatrix> = channels.iter().map(|c| c.lindblad.clone()).collect();
        let set = completeness_padding(&ls).unwrap();
        assert!((set.rate_scale - 8.0).abs() < 1e-9);
        let mut total = CMatrix::zeros(16, 16);
        for l in &set.lindblads {
            total += l.adjoint() * l;
        }
        if let Some(p) = &set.padding {
            total += p.adjoint() * p;
        }
        assert!(frobenius_distance(&total, &identity(16)) < 1e-9);
        assert!((trace(&total).re - 16.0).abs() < 1e-9);
    }
}
