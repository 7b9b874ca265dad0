//! Discrete ancilla-qubit realization of jump trajectories: a system qubit
//! register is coupled to one ancilla per step through a rotation generated
//! by X (x) sigma_x, the ancilla is measured, and the measurement record is
//! reweighted with discrete martingale factors. Includes the single-channel
//! step, the probabilistic multi-channel step, the consecutive-measurement
//! cascade, and the stepped mitigation loop.

use nalgebra::ComplexField;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::complexla::{
    c, expm, expm_hermitian_generator, frobenius_distance, hermitian_eigen, identity, kron,
    max_hermitian_deviation, polar_decompose, sqrtm_psd, trace, CMatrix, CVector,
};
use crate::error::{Error, Result};
use crate::jumps::{derive_seed, merge_ensemble_results, EnsembleResult};
use crate::martingale::padded_plan;
use crate::mitigate::{assemble_fidelity_report, sme_ensemble_average, FidelityReport, SmeRecord};
use crate::models::{Channel, Hamiltonian, NoiseModel};
use crate::propagate::uniform_grid;

/// Upper bound on gamma * dt * ||X||^2, i.e. on the squared rotation angle
/// of the system-ancilla coupling. Keeps the second-order expansion honest
/// for the largest eigenvalue of X instead of demanding a bound on the bare
/// rate, which would not survive the operator rescaling used for padding.
pub const MAX_COUPLING_ANGLE_SQ: f64 = 0.1;

/// Leaked weight tolerated outside a cascade stage's support projector.
const SUPPORT_LEAK_TOL: f64 = 1e-8;

/// Branch probabilities at each step must sum to 1 within this.
const BRANCH_SUM_TOL: f64 = 1e-9;

/// Step parameters of the ancilla scheme. `t_c` is the physical coupling
/// time; `alpha = t_c / dt` sets the interaction strength so that the
/// rotation angle comes out as sqrt(gamma * dt). `m` is the (constant)
/// martingale rate used by the weight factors.
#[derive(Debug, Clone, Copy)]
pub struct LVStepConfig {
    pub dt: f64,
    pub t_c: f64,
    pub m: f64,
}

impl LVStepConfig {
    pub fn new(dt: f64, t_c: f64, m: f64) -> Result<Self> {
        if !(dt > 0.0) || !(t_c > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "step config needs positive dt and t_c, got dt={dt}, t_c={t_c}"
            )));
        }
        Ok(Self { dt, t_c, m })
    }

    pub fn alpha(&self) -> f64 {
        self.t_c / self.dt
    }

    /// Expansion-validity guard: the squared coupling angle
    /// gamma * dt * ||X||^2 must stay small.
    pub fn validate_rate(&self, gamma: f64, x_norm: f64) -> Result<()> {
        if gamma < 0.0 {
            return Err(Error::RateOutOfRange {
                t: 0.0,
                t_min: 0.0,
                t_max: f64::INFINITY,
            });
        }
        let angle_sq = gamma * self.dt * x_norm * x_norm;
        if angle_sq > MAX_COUPLING_ANGLE_SQ {
            return Err(Error::InvalidConfig(format!(
                "coupling angle^2 = {angle_sq:.3e} exceeds {MAX_COUPLING_ANGLE_SQ}; \
                 reduce dt or the channel rate"
            )));
        }
        Ok(())
    }
}

/// Result of one ancilla step (or one full cascade): the measurement bits,
/// the post-measurement system state, the martingale factor picked up, and
/// the index of the channel that fired (if any).
#[derive(Debug, Clone)]
pub struct LVOutcome {
    pub bits: Vec<u8>,
    pub state: CMatrix,
    pub weight_factor: f64,
    pub channel: Option<usize>,
}

/// System-ancilla unitary exp(-i sqrt(gamma/(alpha t_c)) t_c X (x) sigma_x)
/// = cos(theta X) (x) I - i sin(theta X) (x) sigma_x with
/// theta = sqrt(gamma/(alpha t_c)) * t_c, built by eigendecomposition of X.
/// The ancilla is the last (least significant) qubit.
pub fn lv_unitary(x: &CMatrix, gamma: f64, alpha: f64, t_c: f64) -> Result<CMatrix> {
    if gamma < 0.0 || alpha <= 0.0 || t_c <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "lv_unitary needs gamma >= 0, alpha > 0, t_c > 0; got {gamma}, {alpha}, {t_c}"
        )));
    }
    let (cos_x, sin_x) = coupling_trig(x, (gamma / (alpha * t_c)).sqrt() * t_c)?;
    let eye2 = identity(2);
    let sx = crate::complexla::sigma_x();
    Ok(kron(&cos_x, &eye2) + kron(&sin_x, &sx).map(|z| z * c(0.0, -1.0)))
}

/// (cos(theta X), sin(theta X)) for Hermitian PSD X.
fn coupling_trig(x: &CMatrix, theta: f64) -> Result<(CMatrix, CMatrix)> {
    let dev = max_hermitian_deviation(x);
    if dev > 1e-9 {
        return Err(Error::NonHermitian { max_dev: dev });
    }
    let (w, v) = hermitian_eigen(x, 1e-9)?;
    if let Some(&min) = w.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -1e-9 {
            return Err(Error::NotPositiveSemidefinite { min_eig: min });
        }
    }
    let diag = |f: &dyn Fn(f64) -> f64| {
        let d = CVector::from_iterator(w.len(), w.iter().map(|&e| c(f(e), 0.0)));
        &v * CMatrix::from_diagonal(&d) * v.adjoint()
    };
    Ok((diag(&|e| (theta * e).cos()), diag(&|e| (theta * e).sin())))
}

/// Discrete martingale factor for one measurement: bit 0 (no jump) gives
/// 1 + m*dt, bit 1 (jump) gives -Gamma/gamma. The rates must satisfy the
/// pairing gamma + Gamma = m.
pub fn lv_weight_factor(bit: u8, gamma: f64, big_gamma: f64, m: f64, dt: f64) -> Result<f64> {
    if (gamma + big_gamma - m).abs() > 1e-10 * (1.0 + m.abs()) {
        return Err(Error::InvalidPlan(format!(
            "rates violate the pairing gamma + Gamma = m: {gamma} + {big_gamma} != {m}"
        )));
    }
    match bit {
        0 => Ok(1.0 + m * dt),
        1 => {
            if gamma <= 0.0 {
                return Err(Error::InvalidPlan(format!(
                    "jump factor undefined at vanishing engineered rate gamma={gamma}"
                )));
            }
            Ok(-big_gamma / gamma)
        }
        _ => Err(Error::InvalidConfig(format!("measurement bit {bit} out of range"))),
    }
}

/// One single-channel ancilla step: couples rho (x) |0><0| through the exact
/// lv_unitary built from the positive part of L = U X, measures the ancilla
/// with the exact branch probabilities, projects and normalizes via the
/// ancilla blocks, and applies U on the jump branch.
pub fn lv_step_single(
    rho_s: &CMatrix,
    l: &CMatrix,
    gamma: f64,
    cfg: &LVStepConfig,
    rng: &mut impl Rng,
) -> Result<LVOutcome> {
    let (u_l, x) = polar_decompose(l)?;
    let (w, _) = hermitian_eigen(&x, 1e-9)?;
    let x_norm = w.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
    cfg.validate_rate(gamma, x_norm)?;
    let dim = rho_s.nrows();
    let u = lv_unitary(&x, gamma, cfg.alpha(), cfg.t_c)?;

    // joint = rho (x) |0><0|, evolved exactly
    let mut joint = CMatrix::zeros(2 * dim, 2 * dim);
    for i in 0..dim {
        for j in 0..dim {
            joint[(2 * i, 2 * j)] = rho_s[(i, j)];
        }
    }
    let evolved = &u * joint * u.adjoint();

    let block = |bit: usize| CMatrix::from_fn(dim, dim, |i, j| evolved[(2 * i + bit, 2 * j + bit)]);
    let p0 = block(0).diagonal().iter().map(|z| z.re).sum::<f64>();
    let p1 = block(1).diagonal().iter().map(|z| z.re).sum::<f64>();
    for &p in [p0, p1].iter() {
        if p < -1e-12 {
            return Err(Error::NotPositiveSemidefinite { min_eig: p });
        }
    }
    if (p0 + p1 - 1.0).abs() > BRANCH_SUM_TOL {
        return Err(Error::TraceDrift {
            t: 0.0,
            drift: (p0 + p1 - 1.0).abs(),
        });
    }

    let bit = u8::from(rng.gen::<f64>() >= p0.max(0.0));
    let (p, mut state) = if bit == 0 {
        (p0, block(0))
    } else {
        (p1, block(1))
    };
    state.scale_mut(1.0 / p);
    if bit == 1 {
        state = &u_l * state * u_l.adjoint();
    }
    let weight_factor = lv_weight_factor(bit, gamma, cfg.m - gamma, cfg.m, cfg.dt)?;
    Ok(LVOutcome {
        bits: vec![bit],
        state,
        weight_factor,
        channel: (bit == 1).then_some(0),
    })
}

/// Deterministic branch average of [`lv_step_single`]: the unnormalized
/// branches summed with their martingale factors (`weighted`) or plainly
/// (`!weighted`, which reproduces gamma * D[L] to first order in dt).
pub fn lv_single_mean(
    rho_s: &CMatrix,
    l: &CMatrix,
    gamma: f64,
    cfg: &LVStepConfig,
    weighted: bool,
) -> Result<CMatrix> {
    let (u_l, x) = polar_decompose(l)?;
    let theta = (gamma * cfg.dt).sqrt();
    let (cos_x, sin_x) = coupling_trig(&x, theta)?;
    let jump_op = &u_l * &sin_x;
    let (w0, w1) = if weighted {
        (
            lv_weight_factor(0, gamma, cfg.m - gamma, cfg.m, cfg.dt)?,
            lv_weight_factor(1, gamma, cfg.m - gamma, cfg.m, cfg.dt)?,
        )
    } else {
        (1.0, 1.0)
    };
    Ok((&cos_x * rho_s * cos_x.adjoint()).scale(w0)
        + (&jump_op * rho_s * jump_op.adjoint()).scale(w1))
}

/// One probabilistic multi-channel step: channel k is drawn uniformly and
/// run as a single-channel step with the inflated rate N*gamma_k; the jump
/// factor uses the uninflated rate so that selection and inflation cancel
/// in the weighted average.
pub fn lv_probabilistic_step(
    rho_s: &CMatrix,
    channels: &[(CMatrix, f64)],
    cfg: &LVStepConfig,
    rng: &mut impl Rng,
) -> Result<LVOutcome> {
    let n = channels.len();
    if n == 0 {
        return Err(Error::InvalidPlan("no channels to sample from".into()));
    }
    let k = if n > 1 { rng.gen_range(0..n) } else { 0 };
    let (l, gamma_k) = &channels[k];
    // inflated-rate single step with the pairing temporarily relaxed
    let inflated = n as f64 * gamma_k;
    let inner_cfg = LVStepConfig {
        m: inflated + (cfg.m - gamma_k),
        ..*cfg
    };
    let mut out = lv_step_single(rho_s, l, inflated, &inner_cfg, rng)?;
    out.weight_factor = lv_weight_factor(
        out.bits[0],
        *gamma_k,
        cfg.m - gamma_k,
        cfg.m,
        cfg.dt,
    )?;
    out.channel = (out.bits[0] == 1).then_some(k);
    Ok(out)
}

/// Deterministic average of [`lv_probabilistic_step`] over both the channel
/// draw and the measurement outcome.
pub fn lv_probabilistic_mean(
    rho_s: &CMatrix,
    channels: &[(CMatrix, f64)],
    cfg: &LVStepConfig,
    weighted: bool,
) -> Result<CMatrix> {
    let n = channels.len();
    if n == 0 {
        return Err(Error::InvalidPlan("no channels to sample from".into()));
    }
    let dim = rho_s.nrows();
    let mut out = CMatrix::zeros(dim, dim);
    for (l, gamma_k) in channels {
        let (u_l, x) = polar_decompose(l)?;
        let theta = (n as f64 * gamma_k * cfg.dt).sqrt();
        let (cos_x, sin_x) = coupling_trig(&x, theta)?;
        let jump_op = &u_l * &sin_x;
        let (w0, w1) = if weighted {
            (
                lv_weight_factor(0, *gamma_k, cfg.m - gamma_k, cfg.m, cfg.dt)?,
                lv_weight_factor(1, *gamma_k, cfg.m - gamma_k, cfg.m, cfg.dt)?,
            )
        } else {
            (1.0, 1.0)
        };
        out += (&cos_x * rho_s * cos_x.adjoint()).scale(w0 / n as f64)
            + (&jump_op * rho_s * jump_op.adjoint()).scale(w1 / n as f64);
    }
    Ok(out)
}

/// One measurement stage of the cascade: the Kraus pair, its polar
/// unitaries, the coupling operator realizing it as a (cos, sin) rotation,
/// the support projector the stage lives on, and which channel each
/// terminating outcome corresponds to.
#[derive(Debug, Clone)]
pub struct CascadeStage {
    pub g0: CMatrix,
    pub g1: CMatrix,
    pub w0: CMatrix,
    pub w1: CMatrix,
    pub x: CMatrix,
    pub support: CMatrix,
    /// Channel fired on outcome 0; outcome-1 channel is set only for the
    /// final stage (otherwise outcome 1 continues to the next stage).
    pub terminal: (usize, Option<usize>),
}

/// Shared immutable precomputation for [`lv_cascade_step`].
#[derive(Debug, Clone)]
pub struct CascadeOperators {
    /// Second-order no-jump operator I - (t_c^2/2) sum_k eps_k^2 A_k^dag A_k.
    pub b0: CMatrix,
    /// B_j = t_c sqrt(sum_{k>=j} eps_k^2 A_k^dag A_k) for j = 1..=N
    /// (stored at index j-1).
    pub b: Vec<CMatrix>,
    /// Exact no-jump operator sqrt(I - B_1^2); together with B_1 it forms an
    /// exactly complete pair, so branch probabilities carry no truncation.
    pub stage0_cos: CMatrix,
    /// Polar unitaries of the channel operators, applied when a jump
    /// terminates at stage 0 (single-channel cascade).
    pub channel_unitaries: Vec<CMatrix>,
    pub stages: Vec<CascadeStage>,
}

/// Eigenvalue pseudo-inverse and support projector of a PSD matrix, with
/// cutoff 1e-10 * ||b||.
fn pinv_and_support(b: &CMatrix) -> Result<(CMatrix, CMatrix)> {
    let (w, v) = hermitian_eigen(b, 1e-9)?;
    let wmax = w.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
    let cutoff = 1e-10 * wmax.max(1e-300);
    let inv = CVector::from_iterator(
        w.len(),
        w.iter().map(|&e| if e > cutoff { c(1.0 / e, 0.0) } else { c(0.0, 0.0) }),
    );
    let proj = CVector::from_iterator(
        w.len(),
        w.iter().map(|&e| if e > cutoff { c(1.0, 0.0) } else { c(0.0, 0.0) }),
    );
    Ok((
        &v * CMatrix::from_diagonal(&inv) * v.adjoint(),
        &v * CMatrix::from_diagonal(&proj) * v.adjoint(),
    ))
}

/// Builds the B_j ladder and the per-stage Kraus pairs of the
/// consecutive-measurement cascade. With eps_k = sqrt(gamma_k dt)/t_c:
/// stage 0 measures (B_0, B_1); stage j in 1..N-1 measures
/// (eps_j t_c A_j B_j^+, B_{j+1} B_j^+) where outcome 0 fires channel j;
/// the final stage distinguishes the last two channels with
/// (eps_{N-1} t_c A_{N-1} B_{N-1}^+, eps_N t_c A_N B_{N-1}^+). All pairs
/// are complete on the support of the B they invert, which is what the
/// telescoping product needs to reproduce sqrt(gamma_k dt) A_k exactly.
pub fn build_cascade_operators(
    channels: &[(CMatrix, f64)],
    cfg: &LVStepConfig,
) -> Result<CascadeOperators> {
    let n = channels.len();
    if n == 0 {
        return Err(Error::InvalidPlan("no channels to build a cascade for".into()));
    }
    let dim = channels[0].0.nrows();
    for (l, gamma) in channels {
        if l.nrows() != dim || l.ncols() != dim {
            return Err(Error::DimensionMismatch(
                "cascade channels must share one square dimension".into(),
            ));
        }
        let (_, x) = polar_decompose(l)?;
        let (w, _) = hermitian_eigen(&x, 1e-9)?;
        let x_norm = w.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
        cfg.validate_rate(*gamma, x_norm)?;
    }
    // eps_k^2 t_c^2 = gamma_k dt, so B_j^2 = dt sum_{k>=j} gamma_k A_k^dag A_k
    let weighted_grams: Vec<CMatrix> = channels
        .iter()
        .map(|(l, gamma)| (l.adjoint() * l).scale(gamma * cfg.dt))
        .collect();
    let mut b = Vec::with_capacity(n);
    let mut tail = CMatrix::zeros(dim, dim);
    for g in weighted_grams.iter().rev() {
        tail += g;
        b.push(sqrtm_psd(&tail)?);
    }
    b.reverse();

    let eye = identity(dim);
    let b1_sq = &b[0] * &b[0];
    let b0 = &eye - b1_sq.scale(0.5);
    let (w1sq, _) = hermitian_eigen(&b1_sq, 1e-9)?;
    let p_tot = w1sq.iter().fold(0.0f64, |a, &e| a.max(e));
    if p_tot > 1.0 {
        return Err(Error::StepTooLarge { t: 0.0, p_tot });
    }
    let (w, v) = hermitian_eigen(&b[0], 1e-9)?;
    let cos_diag = CVector::from_iterator(
        w.len(),
        w.iter().map(|&e| c((1.0 - (e * e).min(1.0)).sqrt(), 0.0)),
    );
    let stage0_cos = &v * CMatrix::from_diagonal(&cos_diag) * v.adjoint();

    let channel_unitaries = channels
        .iter()
        .map(|(l, _)| polar_decompose(l).map(|(u, _)| u))
        .collect::<Result<Vec<_>>>()?;

    let mut stages = Vec::new();
    for j in 1..n {
        let (b_inv, support) = pinv_and_support(&b[j - 1])?;
        let scale_j = (channels[j - 1].1 * cfg.dt).sqrt();
        let g0 = (&channels[j - 1].0 * &b_inv).scale(scale_j);
        let (g1, terminal) = if j == n - 1 {
            let scale_last = (channels[j].1 * cfg.dt).sqrt();
            ((&channels[j].0 * &b_inv).scale(scale_last), (j - 1, Some(j)))
        } else {
            (&b[j] * &b_inv, (j - 1, None))
        };
        let gram0 = g0.adjoint() * &g0;
        let gram1 = g1.adjoint() * &g1;
        let residual = frobenius_distance(&(&gram0 + &gram1), &support);
        if residual > BRANCH_SUM_TOL {
            return Err(Error::SupportMismatch { weight: residual });
        }
        let m0 = sqrtm_psd(&gram0)?;
        let m1 = sqrtm_psd(&gram1)?;
        let (w0, _) = polar_decompose(&g0)?;
        let (w1, _) = polar_decompose(&g1)?;
        // extend the cosine part by the identity on the kernel so the pair
        // splits as an exact (cos, sin) rotation on the full space
        let m0_ext = &m0 + (&eye - &support);
        let x = cos_sin_split(&m0_ext, &m1)?;
        stages.push(CascadeStage {
            g0,
            g1,
            w0,
            w1,
            x,
            support,
            terminal,
        });
    }
    Ok(CascadeOperators {
        b0,
        b,
        stage0_cos,
        channel_unitaries,
        stages,
    })
}

/// Recovers the Hermitian PSD rotation generator X with cos(X) = M1 and
/// sin(X) = M2 from a complete positive pair, by diagonalizing M1 and
/// reading off arccos of its eigenvalues.
pub fn cos_sin_split(m1: &CMatrix, m2: &CMatrix) -> Result<CMatrix> {
    for m in [m1, m2] {
        let dev = max_hermitian_deviation(m);
        if dev > 1e-8 {
            return Err(Error::NonHermitian { max_dev: dev });
        }
    }
    let eye = identity(m1.nrows());
    let completeness = frobenius_distance(&(m1.adjoint() * m1 + m2.adjoint() * m2), &eye);
    if completeness > 1e-8 {
        return Err(Error::InvalidDecomposition(format!(
            "M1^2 + M2^2 deviates from the identity by {completeness:.3e}"
        )));
    }
    let m1_sq = m1 * m1;
    let m2_sq = m2 * m2;
    let commutator = (&m1_sq * &m2_sq - &m2_sq * &m1_sq).norm();
    if commutator > 1e-8 {
        return Err(Error::NotSimultaneouslyDiagonalizable { residual: commutator });
    }
    let (w, v) = hermitian_eigen(m1, 1e-9)?;
    let angles = CVector::from_iterator(
        w.len(),
        w.iter().map(|&e| c(e.clamp(-1.0, 1.0).acos(), 0.0)),
    );
    let x = &v * CMatrix::from_diagonal(&angles) * v.adjoint();
    let (_, sin_x) = coupling_trig(&x, 1.0)?;
    let resid = frobenius_distance(&sin_x, m2);
    if resid > 1e-8 {
        return Err(Error::InvalidDecomposition(format!(
            "sin(X) misses M2 by {resid:.3e}; M2 is not the positive root of I - M1^2"
        )));
    }
    Ok(x)
}

/// Reads the coupling operator and interaction time off a no-jump Kraus
/// operator: |G0| = V D V^dag, delta_t_c = tr(arccos D), and X the unit-trace
/// generator arccos(D) conjugated back. delta_t_c = 0 signals that no
/// interaction is needed (G0 unitary).
pub fn extract_coupling(g0: &CMatrix) -> Result<(CMatrix, f64)> {
    let modulus = sqrtm_psd(&(g0.adjoint() * g0))?;
    let (w, v) = hermitian_eigen(&modulus, 1e-9)?;
    for &e in &w {
        if e > 1.0 + 1e-10 {
            return Err(Error::SingularValueAboveOne { value: e });
        }
    }
    let angles: Vec<f64> = w.iter().map(|&e| e.clamp(-1.0, 1.0).acos()).collect();
    let delta_tc: f64 = angles.iter().sum();
    if delta_tc == 0.0 {
        return Ok((CMatrix::zeros(g0.nrows(), g0.ncols()), 0.0));
    }
    let d = CVector::from_iterator(angles.len(), angles.iter().map(|&a| c(a / delta_tc, 0.0)));
    Ok((&v * CMatrix::from_diagonal(&d) * v.adjoint(), delta_tc))
}

/// One full cascade step: stage 0 decides jump vs no jump with the exactly
/// complete pair (sqrt(I - B_1^2), B_1); later stages walk the Kraus pairs
/// until a channel terminates. Branch probabilities are exact; martingale
/// factors come from [`lv_weight_factor`] with the terminating channel's
/// rate.
pub fn lv_cascade_step(
    rho_s: &CMatrix,
    ops: &CascadeOperators,
    channels: &[(CMatrix, f64)],
    cfg: &LVStepConfig,
    rng: &mut impl Rng,
) -> Result<LVOutcome> {
    let jump_factor = |k: usize| {
        lv_weight_factor(1, channels[k].1, cfg.m - channels[k].1, cfg.m, cfg.dt)
    };
    let branch_prob = |op: &CMatrix, rho: &CMatrix| (op * rho * op.adjoint()).trace().re;

    let p1 = branch_prob(&ops.b[0], rho_s);
    let p0 = branch_prob(&ops.stage0_cos, rho_s);
    if (p0 + p1 - 1.0).abs() > BRANCH_SUM_TOL {
        return Err(Error::TraceDrift {
            t: 0.0,
            drift: (p0 + p1 - 1.0).abs(),
        });
    }
    if rng.gen::<f64>() < p0 {
        let mut state = &ops.stage0_cos * rho_s * ops.stage0_cos.adjoint();
        state.scale_mut(1.0 / p0);
        return Ok(LVOutcome {
            bits: vec![0],
            state,
            weight_factor: 1.0 + cfg.m * cfg.dt,
            channel: None,
        });
    }
    let mut bits = vec![1u8];
    let mut rho = &ops.b[0] * rho_s * ops.b[0].adjoint();
    rho.scale_mut(1.0 / p1);
    if ops.stages.is_empty() {
        let u = &ops.channel_unitaries[0];
        return Ok(LVOutcome {
            bits,
            state: u * rho * u.adjoint(),
            weight_factor: jump_factor(0)?,
            channel: Some(0),
        });
    }
    for (si, stage) in ops.stages.iter().enumerate() {
        let leak = (trace(&rho).re - (&stage.support * &rho).trace().re).abs();
        if leak > SUPPORT_LEAK_TOL {
            return Err(Error::SupportMismatch { weight: leak });
        }
        let q0 = branch_prob(&stage.g0, &rho);
        let q1 = branch_prob(&stage.g1, &rho);
        if q0 + q1 < 1e-12 {
            return Err(Error::ProbabilityUnderflow { stage: si, p: q0 + q1 });
        }
        if (q0 + q1 - 1.0).abs() > BRANCH_SUM_TOL + leak {
            return Err(Error::SupportMismatch {
                weight: (q0 + q1 - 1.0).abs(),
            });
        }
        if rng.gen::<f64>() * (q0 + q1) < q0 {
            bits.push(0);
            let mut state = &stage.g0 * rho * stage.g0.adjoint();
            state.scale_mut(1.0 / q0);
            return Ok(LVOutcome {
                bits,
                state,
                weight_factor: jump_factor(stage.terminal.0)?,
                channel: Some(stage.terminal.0),
            });
        }
        bits.push(1);
        rho = &stage.g1 * rho * stage.g1.adjoint();
        rho.scale_mut(1.0 / q1);
        if let Some(k) = stage.terminal.1 {
            return Ok(LVOutcome {
                bits,
                state: rho,
                weight_factor: jump_factor(k)?,
                channel: Some(k),
            });
        }
    }
    Err(Error::InvalidPlan(
        "cascade walked off the final stage without terminating".into(),
    ))
}

/// Deterministic branch average of [`lv_cascade_step`], summing the
/// telescoped effective Kraus operators of every terminal branch.
pub fn lv_cascade_mean(
    rho_s: &CMatrix,
    ops: &CascadeOperators,
    channels: &[(CMatrix, f64)],
    cfg: &LVStepConfig,
    weighted: bool,
) -> Result<CMatrix> {
    let factor = |k: Option<usize>| -> Result<f64> {
        if !weighted {
            return Ok(1.0);
        }
        match k {
            None => Ok(1.0 + cfg.m * cfg.dt),
            Some(k) => lv_weight_factor(1, channels[k].1, cfg.m - channels[k].1, cfg.m, cfg.dt),
        }
    };
    let mut out =
        (&ops.stage0_cos * rho_s * ops.stage0_cos.adjoint()).scale(factor(None)?);
    if ops.stages.is_empty() {
        let k = &ops.channel_unitaries[0] * &ops.b[0];
        out += (&k * rho_s * k.adjoint()).scale(factor(Some(0))?);
        return Ok(out);
    }
    let mut path = ops.b[0].clone();
    for stage in &ops.stages {
        let k0 = &stage.g0 * &path;
        out += (&k0 * rho_s * k0.adjoint()).scale(factor(Some(stage.terminal.0))?);
        let next = &stage.g1 * &path;
        if let Some(k) = stage.terminal.1 {
            out += (&next * rho_s * next.adjoint()).scale(factor(Some(k))?);
        }
        path = next;
    }
    Ok(out)
}

/// Stepped mitigation benchmark: per step one probabilistic ancilla
/// mitigation step over the padded engineered channel set, the Trotter
/// unitary exp(-i H dt), and one exact dense substep of the physical
/// (unmonitored) noise bath. The weighted ensemble estimates the noise-free
/// evolution.
#[derive(Debug, Clone)]
pub struct LVRun {
    pub hamiltonian: CMatrix,
    pub noise_channels: Vec<Channel>,
    pub psi0: CVector,
    pub t_end: f64,
    pub steps: usize,
    pub t_c: f64,
    pub n_trajectories: usize,
    pub master_seed: u64,
    pub squared_fidelity: bool,
    pub batch_size: usize,
    /// RK4 substeps per ancilla step for the dense reference curves.
    pub dense_substeps: usize,
}

impl LVRun {
    pub fn new(
        hamiltonian: CMatrix,
        noise_channels: Vec<Channel>,
        psi0: CVector,
        t_end: f64,
        steps: usize,
        n_trajectories: usize,
        master_seed: u64,
    ) -> Result<Self> {
        if steps == 0 || !(t_end > 0.0) {
            return Err(Error::InvalidConfig(
                "the run needs a positive horizon and at least one step".into(),
            ));
        }
        Ok(Self {
            hamiltonian,
            noise_channels,
            psi0,
            t_end,
            steps,
            t_c: 1.0,
            n_trajectories,
            master_seed,
            squared_fidelity: false,
            batch_size: 256,
            dense_substeps: 200,
        })
    }
}

/// Precomputed per-channel step operators of the mitigation loop.
struct LVEngChannel {
    cos_x: CMatrix,
    /// U * sin(theta X): the full jump branch operator.
    jump: CMatrix,
    /// sin^2(theta X) for the exact jump probability tr(sin^2 rho).
    sin_sq: CMatrix,
    jump_factor: f64,
}

/// Dissipator-only superoperator sum_k Gamma_k (conj(L) (x) L
/// - 1/2 I (x) L^dag L - 1/2 (L^dag L)^T (x) I), acting on column-major
/// vec(rho).
fn dissipator_superop(channels: &[Channel], dim: usize) -> Result<CMatrix> {
    let eye = identity(dim);
    let mut out = CMatrix::zeros(dim * dim, dim * dim);
    for ch in channels {
        let rate = ch.rate.eval(0.0)?;
        if rate == 0.0 {
            continue;
        }
        let l = &ch.lindblad;
        let ldl = l.adjoint() * l;
        out += (kron(&l.map(|z| z.conjugate()), l)
            - kron(&eye, &ldl).scale(0.5)
            - kron(&ldl.transpose(), &eye).scale(0.5))
        .scale(rate);
    }
    Ok(out)
}

fn vec_apply(superop: &CMatrix, rho: &CMatrix) -> CMatrix {
    let dim = rho.nrows();
    let v = CVector::from_iterator(dim * dim, rho.iter().copied());
    let out = superop * v;
    CMatrix::from_iterator(dim, dim, out.iter().copied())
}

pub fn lv_mitigation_run(run: &LVRun) -> Result<FidelityReport> {
    let dim = run.psi0.len();
    let dt = run.t_end / run.steps as f64;
    let boundaries = uniform_grid(0.0, dt, run.steps);
    for ch in &run.noise_channels {
        if !matches!(ch.rate, crate::models::RateFunction::Constant(_)) {
            return Err(Error::InvalidConfig(
                "the stepped mitigation loop supports constant rates only".into(),
            ));
        }
    }
    let padded = padded_plan(&run.noise_channels, &boundaries)?;
    let n_eng = padded.sampling_channels.len();
    let m = padded.plan.m.eval(0.0)?;
    let cfg = LVStepConfig::new(dt, run.t_c, m)?;

    let mut engineered = Vec::with_capacity(n_eng);
    for (k, ch) in padded.sampling_channels.iter().enumerate() {
        let gamma = padded.plan.engineered_rates[k].eval(0.0)?;
        let big_gamma = padded.plan.noise_rates[k].eval(0.0)?;
        let (u_l, x) = polar_decompose(&ch.lindblad)?;
        let (w, _) = hermitian_eigen(&x, 1e-9)?;
        let x_norm = w.iter().fold(0.0f64, |a, &e| a.max(e.abs()));
        let inflated = n_eng as f64 * gamma;
        cfg.validate_rate(inflated, x_norm)?;
        let (cos_x, sin_x) = coupling_trig(&x, (inflated * dt).sqrt())?;
        let jump_factor = if gamma > 0.0 { -big_gamma / gamma } else { 0.0 };
        engineered.push(LVEngChannel {
            jump: &u_l * &sin_x,
            sin_sq: &sin_x * &sin_x,
            cos_x,
            jump_factor,
        });
    }
    let no_jump_factor = 1.0 + m * dt;
    let u_h = expm_hermitian_generator(&run.hamiltonian, dt)?;
    let noise_step = expm(&dissipator_superop(&run.noise_channels, dim)?.scale(dt));
    let rho0: CMatrix = &run.psi0 * run.psi0.adjoint();

    let sample_one = |seed: u64| -> Result<(SmeRecord, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rho = rho0.clone();
        let mut weight = 1.0;
        let mut states = Vec::with_capacity(run.steps + 1);
        let mut weights = Vec::with_capacity(run.steps + 1);
        states.push(rho.clone());
        weights.push(weight);
        for _ in 0..run.steps {
            let k = if n_eng > 1 { rng.gen_range(0..n_eng) } else { 0 };
            let ch = &engineered[k];
            let p1 = ch
                .sin_sq
                .iter()
                .zip(rho.iter())
                .map(|(a, b)| (a * b).re)
                .sum::<f64>()
                .clamp(0.0, 1.0);
            if rng.gen::<f64>() < p1 {
                rho = &ch.jump * rho * ch.jump.adjoint();
                rho.scale_mut(1.0 / p1);
                weight *= ch.jump_factor;
            } else {
                rho = &ch.cos_x * rho * ch.cos_x.adjoint();
                rho.scale_mut(1.0 / (1.0 - p1));
                weight *= no_jump_factor;
            }
            rho = &u_h * rho * u_h.adjoint();
            rho = vec_apply(&noise_step, &rho);
            let tr = trace(&rho).re;
            if tr < 1e-12 {
                return Err(Error::NormCollapse { norm: tr });
            }
            rho.scale_mut(1.0 / tr);
            states.push(rho.clone());
            weights.push(weight);
        }
        Ok((
            SmeRecord {
                seed,
                events: Vec::new(),
                states,
            },
            weights,
        ))
    };

    let n_out = run.steps + 1;
    let mut parts: Vec<EnsembleResult> = Vec::new();
    let mut cost_sum = vec![0.0; n_out];
    let mut start = 0usize;
    while start < run.n_trajectories {
        let end = (start + run.batch_size.max(1)).min(run.n_trajectories);
        let sampled: Vec<(SmeRecord, Vec<f64>)> = (start..end)
            .into_par_iter()
            .map(|i| sample_one(derive_seed(run.master_seed, i as u64)))
            .collect::<Result<_>>()?;
        let (records, weights): (Vec<_>, Vec<_>) = sampled.into_iter().unzip();
        for w in &weights {
            for (cs, v) in cost_sum.iter_mut().zip(w) {
                *cs += v.abs();
            }
        }
        parts.push(sme_ensemble_average(&records, &boundaries, Some(&weights))?);
        start = end;
    }
    let mitigated = merge_ensemble_results(&parts)?;
    let cost: Vec<f64> = cost_sum
        .iter()
        .map(|&s| s / run.n_trajectories as f64)
        .collect();

    let pure = crate::mitigate::unitary_reference(&run.hamiltonian, &run.psi0, &boundaries)?;
    let noise_model = NoiseModel::new(
        Hamiltonian::Constant(run.hamiltonian.clone()),
        run.noise_channels.clone(),
    )?;
    let mut both_channels = run.noise_channels.clone();
    both_channels.extend(padded.sampling_channels.iter().cloned());
    let both_model = NoiseModel::new(
        Hamiltonian::Constant(run.hamiltonian.clone()),
        both_channels,
    )?;
    let dense_noisy =
        crate::propagate::integrate(&noise_model, &rho0, &boundaries, &[], run.dense_substeps)?;
    let dense_both =
        crate::propagate::integrate(&both_model, &rho0, &boundaries, &[], run.dense_substeps)?;
    assemble_fidelity_report(
        &pure,
        &dense_noisy,
        &dense_both,
        &mitigated,
        cost,
        run.squared_fidelity,
    )
}
