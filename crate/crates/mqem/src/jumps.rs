//! Stochastic quantum-jump trajectory engine for Lindblad-form dissipators
//! with positive rates.
//!
//! Fixed-step first-order sampling: at every grid step a uniform draw
//! decides between a single jump and a renormalized drift step. Each
//! trajectory owns an RNG stream derived from (master seed, trajectory
//! index), so ensembles are reproducible under any parallel schedule.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::complexla::{c, CMatrix, CVector};
use crate::error::{Error, Result};
use crate::models::NoiseModel;

/// Hard cap on the per-step total jump probability.
pub const MAX_STEP_PROBABILITY: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct JumpEvent {
    pub time: f64,
    pub channel: usize,
}

#[derive(Debug, Clone)]
pub struct TrajectoryRecord {
    pub seed: u64,
    pub events: Vec<JumpEvent>,
    /// State at every grid time, normalized.
    pub states: Vec<CVector>,
}

/// Weighted (or plain) ensemble average with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct EnsembleResult {
    pub times: Vec<f64>,
    pub mean: Vec<CMatrix>,
    /// Per grid time, per entry: standard error of the complex mean
    /// (sqrt of the summed re/im variances of the mean).
    pub entry_stderr: Vec<DMatrix<f64>>,
    /// Mean of w * ||psi||^2 per grid time (the weighted trace).
    pub trace: Vec<f64>,
    pub trace_stderr: Vec<f64>,
    pub mean_weight: Vec<f64>,
    pub n_trajectories: usize,
}

/// SplitMix64, used to derive independent per-trajectory seeds.
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed
        .wrapping_add(0x9e3779b97f4a7c15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Per-channel jump probabilities p_k = gamma_k(t) ||L_k psi||^2 dt and
/// their total. Errors when the total exceeds [`MAX_STEP_PROBABILITY`].
pub fn jump_probabilities(
    model: &NoiseModel,
    psi: &CVector,
    t: f64,
    dt: f64,
) -> Result<(Vec<f64>, f64)> {
    let mut probs = Vec::with_capacity(model.channels.len());
    let mut total = 0.0;
    for ch in &model.channels {
        let rate = ch.rate.eval(t)?;
        let lpsi = &ch.lindblad * psi;
        let p = rate * lpsi.norm_squared() * dt;
        total += p;
        probs.push(p);
    }
    if total > MAX_STEP_PROBABILITY {
        return Err(Error::StepTooLarge { t, p_tot: total });
    }
    Ok((probs, total))
}

/// First-order no-jump update followed by explicit renormalization.
pub fn drift_step(model: &NoiseModel, psi: &CVector, t: f64, dt: f64) -> Result<CVector> {
    let h = model.hamiltonian.at(t);
    let mut dpsi = (h * psi).map(|z| z * c(0.0, -dt));
    for ch in &model.channels {
        let rate = ch.rate.eval(t)?;
        if rate == 0.0 {
            continue;
        }
        let lpsi = &ch.lindblad * psi;
        let n2 = lpsi.norm_squared();
        dpsi -= (ch.lindblad.adjoint() * lpsi).scale(0.5 * rate * dt);
        dpsi += psi.scale(0.5 * rate * n2 * dt);
    }
    let mut out = psi + dpsi;
    let norm = out.norm();
    if norm < 1e-12 {
        return Err(Error::NormCollapse { norm });
    }
    out.scale_mut(1.0 / norm);
    Ok(out)
}

/// Jump rule psi -> L psi / ||L psi||.
pub fn apply_jump(psi: &CVector, lindblad: &CMatrix) -> Result<CVector> {
    let lpsi = lindblad * psi;
    let norm = lpsi.norm();
    if norm <= 1e-12 {
        return Err(Error::NullJump { norm });
    }
    Ok(lpsi.scale(1.0 / norm))
}

/// Samples one jump trajectory on the grid. Fully deterministic given the
/// seed. At most one jump per grid step.
pub fn sample_trajectory(
    model: &NoiseModel,
    psi0: &CVector,
    t_grid: &[f64],
    seed: u64,
) -> Result<TrajectoryRecord> {
    if t_grid.is_empty() {
        return Err(Error::InvalidConfig("empty time grid".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi = psi0.clone();
    let norm = psi.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::NotNormalized { value: norm });
    }
    let n_ch = model.channels.len();
    let mut events = Vec::new();
    let mut states = Vec::with_capacity(t_grid.len());
    states.push(psi.clone());
    let mut lpsis: Vec<CVector> = vec![CVector::zeros(model.dim); n_ch];
    let mut rates: Vec<f64> = vec![0.0; n_ch];
    for w in t_grid.windows(2) {
        let t = w[0];
        let dt = w[1] - w[0];
        let mut p_tot = 0.0;
        for (k, ch) in model.channels.iter().enumerate() {
            rates[k] = ch.rate.eval(t)?;
            lpsis[k] = &ch.lindblad * &psi;
            p_tot += rates[k] * lpsis[k].norm_squared() * dt;
        }
        if p_tot > MAX_STEP_PROBABILITY {
            return Err(Error::StepTooLarge { t, p_tot });
        }
        let u: f64 = rng.gen();
        if u < p_tot {
            // select channel k with probability p_k / p_tot
            let mut acc = 0.0;
            let mut chosen = n_ch - 1;
            for k in 0..n_ch {
                acc += rates[k] * lpsis[k].norm_squared() * dt;
                if u < acc {
                    chosen = k;
                    break;
                }
            }
            let norm = lpsis[chosen].norm();
            if norm <= 1e-12 {
                return Err(Error::NullJump { norm });
            }
            psi = lpsis[chosen].scale(1.0 / norm);
            events.push(JumpEvent {
                time: t,
                channel: chosen,
            });
        } else {
            // first-order drift, reusing the channel applications
            let h = model.hamiltonian.at(t);
            let mut dpsi = (h * &psi).map(|z| z * c(0.0, -dt));
            for k in 0..n_ch {
                if rates[k] == 0.0 {
                    continue;
                }
                let n2 = lpsis[k].norm_squared();
                dpsi -= (model.channels[k].lindblad.adjoint() * &lpsis[k])
                    .scale(0.5 * rates[k] * dt);
                dpsi += psi.scale(0.5 * rates[k] * n2 * dt);
            }
            psi += dpsi;
            let norm = psi.norm();
            if norm < 1e-12 {
                return Err(Error::NormCollapse { norm });
            }
            psi.scale_mut(1.0 / norm);
        }
        states.push(psi.clone());
    }
    Ok(TrajectoryRecord {
        seed,
        events,
        states,
    })
}

/// Samples an ensemble in parallel. Trajectory i always uses the stream
/// seed derived from (master_seed, i), so the result is independent of the
/// worker count.
pub fn sample_ensemble(
    model: &NoiseModel,
    psi0: &CVector,
    t_grid: &[f64],
    n_trajectories: usize,
    master_seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    sample_ensemble_range(model, psi0, t_grid, 0, n_trajectories, master_seed)
}

/// Samples trajectories with indices in `[start, end)` of the ensemble
/// identified by `master_seed`, allowing batched processing.
pub fn sample_ensemble_range(
    model: &NoiseModel,
    psi0: &CVector,
    t_grid: &[f64],
    start: usize,
    end: usize,
    master_seed: u64,
) -> Result<Vec<TrajectoryRecord>> {
    (start..end)
        .into_par_iter()
        .map(|i| sample_trajectory(model, psi0, t_grid, derive_seed(master_seed, i as u64)))
        .collect()
}

/// Merges batch-wise [`EnsembleResult`]s into the result over the union of
/// the batches, reconstructing the pooled second moments exactly. Merging
/// is sequential and in batch order, so the outcome does not depend on how
/// the batches were computed.
pub fn merge_ensemble_results(parts: &[EnsembleResult]) -> Result<EnsembleResult> {
    if parts.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let n_times = parts[0].times.len();
    let dim = parts[0].mean[0].nrows();
    for p in parts {
        if p.times != parts[0].times || p.mean[0].nrows() != dim {
            return Err(Error::DimensionMismatch(
                "ensemble parts disagree on grid or dimension".into(),
            ));
        }
    }
    let total: usize = parts.iter().map(|p| p.n_trajectories).sum();
    let tf = total as f64;
    let mut mean = vec![CMatrix::zeros(dim, dim); n_times];
    let mut sq = vec![DMatrix::<f64>::zeros(dim, dim); n_times];
    let mut trace_sum = vec![0.0; n_times];
    let mut trace_sq = vec![0.0; n_times];
    let mut weight_sum = vec![0.0; n_times];
    for p in parts {
        let nf = p.n_trajectories as f64;
        for ti in 0..n_times {
            mean[ti] += p.mean[ti].scale(nf);
            // se^2 = (sq/n - |mean|^2)/n  =>  sq = n*(n*se^2 + |mean|^2)
            for ((dst, se), m) in sq[ti]
                .iter_mut()
                .zip(p.entry_stderr[ti].iter())
                .zip(p.mean[ti].iter())
            {
                *dst += nf * (nf * se * se + m.re * m.re + m.im * m.im);
            }
            trace_sum[ti] += nf * p.trace[ti];
            trace_sq[ti] +=
                nf * (nf * p.trace_stderr[ti] * p.trace_stderr[ti] + p.trace[ti] * p.trace[ti]);
            weight_sum[ti] += nf * p.mean_weight[ti];
        }
    }
    let mut entry_stderr = Vec::with_capacity(n_times);
    let mut trace = vec![0.0; n_times];
    let mut trace_stderr = vec![0.0; n_times];
    let mut mean_weight = vec![0.0; n_times];
    for ti in 0..n_times {
        mean[ti].scale_mut(1.0 / tf);
        let mut se = DMatrix::<f64>::zeros(dim, dim);
        for ((dst, s), m) in se.iter_mut().zip(sq[ti].iter()).zip(mean[ti].iter()) {
            let var = (s / tf - (m.re * m.re + m.im * m.im)).max(0.0);
            *dst = (var / tf).sqrt();
        }
        entry_stderr.push(se);
        trace[ti] = trace_sum[ti] / tf;
        let var = (trace_sq[ti] / tf - trace[ti] * trace[ti]).max(0.0);
        trace_stderr[ti] = (var / tf).sqrt();
        mean_weight[ti] = weight_sum[ti] / tf;
    }
    Ok(EnsembleResult {
        times: parts[0].times.clone(),
        mean,
        entry_stderr,
        trace,
        trace_stderr,
        mean_weight,
        n_trajectories: total,
    })
}

/// Mean of w(t) psi psi^dag per grid time, with diagnostics. `weights`
/// holds one value per record per grid time; `None` means all ones.
pub fn ensemble_average(
    records: &[TrajectoryRecord],
    times: &[f64],
    weights: Option<&[Vec<f64>]>,
) -> Result<EnsembleResult> {
    if records.is_empty() {
        return Err(Error::EmptyEnsemble);
    }
    let n_times = records[0].states.len();
    if times.len() != n_times {
        return Err(Error::DimensionMismatch(format!(
            "{} grid times vs {} recorded states",
            times.len(),
            n_times
        )));
    }
    if !records.iter().all(|r| r.states.len() == n_times) {
        return Err(Error::DimensionMismatch(
            "records disagree on the grid length".into(),
        ));
    }
    if let Some(ws) = weights {
        if ws.len() != records.len() || !ws.iter().all(|w| w.len() == n_times) {
            return Err(Error::DimensionMismatch(
                "weights do not match records/grid".into(),
            ));
        }
    }
    let dim = records[0].states[0].len();
    let n = records.len();
    let mut mean = vec![CMatrix::zeros(dim, dim); n_times];
    let mut sq = vec![DMatrix::<f64>::zeros(dim, dim); n_times];
    let mut trace_sum = vec![0.0; n_times];
    let mut trace_sq = vec![0.0; n_times];
    let mut weight_sum = vec![0.0; n_times];
    for (ri, rec) in records.iter().enumerate() {
        for (ti, psi) in rec.states.iter().enumerate() {
            let w = weights.map(|ws| ws[ri][ti]).unwrap_or(1.0);
            let proj = psi * psi.adjoint();
            let tr = w * psi.norm_squared();
            trace_sum[ti] += tr;
            trace_sq[ti] += tr * tr;
            weight_sum[ti] += w;
            let m = &mut mean[ti];
            let s = &mut sq[ti];
            for (dst, (sdst, src)) in
                m.iter_mut().zip(s.iter_mut().zip(proj.iter()))
            {
                let v = src * c(w, 0.0);
                *dst += v;
                *sdst += v.re * v.re + v.im * v.im;
            }
        }
    }
    let nf = n as f64;
    let mut entry_stderr = Vec::with_capacity(n_times);
    for ti in 0..n_times {
        mean[ti].scale_mut(1.0 / nf);
        let m = &mean[ti];
        let mut se = DMatrix::<f64>::zeros(dim, dim);
        for ((dst, s), mv) in se.iter_mut().zip(sq[ti].iter()).zip(m.iter()) {
            let var = (s / nf - (mv.re * mv.re + mv.im * mv.im)).max(0.0);
            *dst = (var / nf).sqrt();
        }
        entry_stderr.push(se);
    }
    let mut trace = vec![0.0; n_times];
    let mut trace_stderr = vec![0.0; n_times];
    let mut mean_weight = vec![0.0; n_times];
    for ti in 0..n_times {
        trace[ti] = trace_sum[ti] / nf;
        let var = (trace_sq[ti] / nf - trace[ti] * trace[ti]).max(0.0);
        trace_stderr[ti] = (var / nf).sqrt();
        mean_weight[ti] = weight_sum[ti] / nf;
    }
    Ok(EnsembleResult {
        times: times.to_vec(),
        mean,
        entry_stderr,
        trace,
        trace_stderr,
        mean_weight,
        n_trajectories: n,
    })
}

/// Writes jump events as CSV lines `trajectory_index,t_j,channel_index`.
pub fn write_event_dump<W: std::io::Write>(
    records: &[TrajectoryRecord],
    mut out: W,
) -> Result<()> {
    writeln!(out, "trajectory_index,t_j,channel_index")?;
    for (i, rec) in records.iter().enumerate() {
        for ev in &rec.events {
            writeln!(out, "{i},{},{}", ev.time, ev.channel)?;
        }
    }
    Ok(())
}
