//! Batch experiment runner: parses a TOML config, dispatches one of the
//! pipelines (dense oracle, plain unravelling, martingale mitigation, the
//! ancilla-qubit scheme, cost curves, quasi-probability estimation) and
//! writes CSV results plus a run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::complexla::{fidelity, fidelity_squared, psd_project, trace_distance, CMatrix, CVector};
use crate::error::{Error, Result};
use crate::jumps::{ensemble_average, sample_ensemble, write_event_dump};
use crate::lloyd_viola::{lv_mitigation_run, LVRun};
use crate::martingale::{cost_bound, cost_estimate, padded_plan, weights_for_records};
use crate::mitigate::{run_mitigation, unitary_reference, ErrorInjection, FidelityReport, MitigationRun};
use crate::models::{
    build_heisenberg_2x2, build_local_noise, basis_ket, Channel, Hamiltonian, NoiseModel,
    RateFunction,
};
use crate::propagate::{integrate, uniform_grid};
use crate::qprob::{
    depolarizing_channel, depolarizing_inverse, normalize, qp_estimate, read_decomposition,
    write_decomposition,
};

/// The experiment pipelines reachable from the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subcommand {
    /// Dense master-equation reference curves.
    Oracle,
    /// Plain (positive-rate) trajectory unravelling vs the dense oracle.
    Unravel,
    /// Martingale-reweighted mitigation pipeline.
    Mitigate,
    /// Ancilla-qubit (discrete-step) mitigation pipeline.
    Lv,
    /// Empirical mitigation cost and its bounds.
    Cost,
    /// Quasi-probability channel-inverse estimator.
    Qprob,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::Oracle => "oracle",
            Subcommand::Unravel => "unravel",
            Subcommand::Mitigate => "mitigate",
            Subcommand::Lv => "lv",
            Subcommand::Cost => "cost",
            Subcommand::Qprob => "qprob",
        }
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub trajectories: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub grid: GridConfig,
    pub run: RunConfig,
    #[serde(default)]
    pub injection: InjectionConfig,
    #[serde(default)]
    pub lv: LvConfig,
    #[serde(default)]
    pub qprob: QprobConfig,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// "heisenberg" (2x2 lattice, 4 qubits) or "two_level".
    #[serde(default = "default_kind")]
    pub kind: String,
    #[serde(default = "one")]
    pub j: f64,
    #[serde(default = "default_anisotropy")]
    pub anisotropy: f64,
    #[serde(default = "default_field")]
    pub field: f64,
    /// Two-level drive: H = (omega/2) sigma_x.
    #[serde(default = "one")]
    pub omega: f64,
    #[serde(default = "default_rate")]
    pub gamma_relax: f64,
    #[serde(default = "default_rate")]
    pub gamma_dephase: f64,
    /// Optional tabulated-rate files (two columns: t, rate) overriding the
    /// constant rates; two_level only.
    pub relax_table: Option<PathBuf>,
    pub dephase_table: Option<PathBuf>,
    /// Computational-basis index of the initial product state.
    #[serde(default)]
    pub initial_state: usize,
}

fn default_kind() -> String {
    "heisenberg".into()
}
fn one() -> f64 {
    1.0
}
fn default_anisotropy() -> f64 {
    0.5
}
fn default_field() -> f64 {
    0.3
}
fn default_rate() -> f64 {
    0.001
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub t_end: f64,
    pub dt: f64,
    #[serde(default = "one_usize")]
    pub sample_every: usize,
}

fn one_usize() -> usize {
    1
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub trajectories: usize,
    pub seed: u64,
    /// 0 = use every core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub squared_fidelity: bool,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct InjectionConfig {
    /// "none", "lindblad", "rates" or "jump_times".
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub e_l: f64,
    #[serde(default)]
    pub e_r: f64,
    #[serde(default)]
    pub e_t: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LvConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "one")]
    pub t_c: f64,
}

fn default_steps() -> usize {
    50
}

impl Default for LvConfig {
    fn default() -> Self {
        LvConfig {
            steps: default_steps(),
            t_c: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QprobConfig {
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Read the quasi-probability decomposition from a file instead of the
    /// closed-form depolarizing inverse.
    pub decomposition: Option<PathBuf>,
}

fn default_p() -> f64 {
    0.1
}
fn default_samples() -> usize {
    100_000
}

impl Default for QprobConfig {
    fn default() -> Self {
        QprobConfig {
            p: default_p(),
            samples: default_samples(),
            decomposition: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<(Self, u64)> {
        let text = fs::read_to_string(path)?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok((config, fnv1a64(text.as_bytes())))
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        for (name, v) in [
            ("grid.t_end", g.t_end),
            ("grid.dt", g.dt),
            ("model.gamma_relax", self.model.gamma_relax),
            ("model.gamma_dephase", self.model.gamma_dephase),
        ] {
            if !(v >= 0.0) || (name.starts_with("grid") && v <= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        let steps = g.t_end / g.dt;
        if (steps - steps.round()).abs() > 1e-9 * steps.max(1.0) {
            return Err(Error::InvalidConfig(format!(
                "grid.dt = {} does not divide grid.t_end = {}",
                g.dt, g.t_end
            )));
        }
        if self.grid.sample_every == 0 {
            return Err(Error::InvalidConfig("grid.sample_every must be positive".into()));
        }
        if self.run.trajectories == 0 {
            return Err(Error::InvalidConfig("run.trajectories must be positive".into()));
        }
        match self.model.kind.as_str() {
            "heisenberg" | "two_level" => {}
            other => {
                return Err(Error::InvalidConfig(format!("unknown model.kind \"{other}\"")))
            }
        }
        match self.injection.kind.as_deref() {
            None | Some("none") | Some("lindblad") | Some("rates") | Some("jump_times") => {}
            Some(other) => {
                return Err(Error::InvalidConfig(format!(
                    "unknown injection.kind \"{other}\""
                )))
            }
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.grid.t_end / self.grid.dt).round() as usize
    }

    fn injection(&self) -> ErrorInjection {
        match self.injection.kind.as_deref() {
            Some("lindblad") => ErrorInjection::Lindblad {
                e_l: self.injection.e_l,
            },
            Some("rates") => ErrorInjection::Rates {
                e_r: self.injection.e_r,
            },
            Some("jump_times") => ErrorInjection::JumpTimes {
                e_t: self.injection.e_t,
                gamma_base: self.model.gamma_relax.max(self.model.gamma_dephase),
            },
            _ => ErrorInjection::None,
        }
    }
}

/// 64-bit FNV-1a, used only to fingerprint the config text in the output
/// headers.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Model pieces a pipeline needs: Hamiltonian, physical noise channels and
/// the initial ket.
struct BuiltModel {
    hamiltonian: CMatrix,
    channels: Vec<Channel>,
    psi0: CVector,
}

fn build_model(cfg: &ModelConfig) -> Result<BuiltModel> {
    match cfg.kind.as_str() {
        "heisenberg" => {
            let h = build_heisenberg_2x2(cfg.j, cfg.anisotropy, cfg.field);
            let channels = build_local_noise(
                RateFunction::Constant(cfg.gamma_relax),
                RateFunction::Constant(cfg.gamma_dephase),
            );
            if cfg.initial_state >= 16 {
                return Err(Error::InvalidConfig(format!(
                    "model.initial_state {} out of range for 16 levels",
                    cfg.initial_state
                )));
            }
            Ok(BuiltModel {
                hamiltonian: h,
                channels,
                psi0: basis_ket(16, cfg.initial_state),
            })
        }
        "two_level" => {
            let h = crate::complexla::sigma_x().scale(cfg.omega / 2.0);
            let relax = match &cfg.relax_table {
                Some(path) => RateFunction::from_table_file(path)?,
                None => RateFunction::Constant(cfg.gamma_relax),
            };
            let dephase = match &cfg.dephase_table {
                Some(path) => RateFunction::from_table_file(path)?,
                None => RateFunction::Constant(cfg.gamma_dephase),
            };
            let channels = vec![
                Channel::new(crate::complexla::sigma_minus(), relax, "relax"),
                Channel::new(crate::complexla::sigma_z(), dephase, "dephase"),
            ];
            if cfg.initial_state >= 2 {
                return Err(Error::InvalidConfig(format!(
                    "model.initial_state {} out of range for 2 levels",
                    cfg.initial_state
                )));
            }
            Ok(BuiltModel {
                hamiltonian: h,
                channels,
                psi0: basis_ket(2, cfg.initial_state),
            })
        }
        other => Err(Error::InvalidConfig(format!("unknown model.kind \"{other}\""))),
    }
}

/// Everything a pipeline needs to emit files.
struct RunContext {
    config: ExperimentConfig,
    config_hash: u64,
    seed: u64,
    trajectories: usize,
    out_dir: PathBuf,
}

impl RunContext {
    fn header(&self) -> String {
        format!("# config_hash={:016x}, seed={}\n", self.config_hash, self.seed)
    }

    fn write_file(&self, name: &str, body: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out_dir)?;
        let path = self.out_dir.join(name);
        fs::write(&path, format!("{}{body}", self.header()))?;
        Ok(path)
    }

    fn write_manifest(&self, subcommand: Subcommand) -> Result<()> {
        let mut body = String::new();
        body.push_str(&format!("subcommand = {}\n", subcommand.name()));
        body.push_str(&format!("version = {}\n", env!("CARGO_PKG_VERSION")));
        body.push_str(&format!("seed = {}\n", self.seed));
        body.push_str(&format!("trajectories = {}\n", self.trajectories));
        body.push_str(&format!("config_hash = {:016x}\n", self.config_hash));
        body.push_str("\n# config echo\n");
        for line in format!("{:#?}", self.config).lines() {
            body.push_str(&format!("# {line}\n"));
        }
        self.write_file("run_manifest.txt", &body)?;
        Ok(())
    }
}

const FIDELITY_HEADER: &str = "t,F_noisy,F_both,F_mitigated,stderr";

fn fidelity_csv(
    times: &[f64],
    f_noisy: &[f64],
    f_both: &[f64],
    f_mitigated: &[f64],
    stderr: &[f64],
) -> String {
    let mut out = String::from(FIDELITY_HEADER);
    out.push('\n');
    for i in 0..times.len() {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            times[i], f_noisy[i], f_both[i], f_mitigated[i], stderr[i]
        ));
    }
    out
}

fn report_files(ctx: &RunContext, report: &FidelityReport) -> Result<()> {
    ctx.write_file(
        "fidelity.csv",
        &fidelity_csv(
            &report.times,
            &report.f_noisy,
            &report.f_both,
            &report.f_mitigated,
            &report.stderr,
        ),
    )?;
    let mut summary = String::new();
    summary.push_str(&format!("trajectories = {}\n", report.n_trajectories));
    summary.push_str(&format!(
        "improvement_mean = {}\n",
        report
            .improvement_mean
            .map_or("n/a".into(), |v| format!("{v:.6}"))
    ));
    summary.push_str(&format!(
        "improvement_final = {}\n",
        report
            .improvement_final
            .map_or("n/a".into(), |v| format!("{v:.6}"))
    ));
    summary.push_str(&format!(
        "cost_final = {:.6}\n",
        report.cost.last().copied().unwrap_or(1.0)
    ));
    summary.push_str(&format!(
        "mean_weight_final = {:.6}\n",
        report.mean_weight.last().copied().unwrap_or(1.0)
    ));
    summary.push_str(&format!(
        "f_mitigated_final = {:.8}\n",
        report.f_mitigated.last().copied().unwrap_or(f64::NAN)
    ));
    summary.push_str(&format!(
        "f_noisy_final = {:.8}\n",
        report.f_noisy.last().copied().unwrap_or(f64::NAN)
    ));
    ctx.write_file("summary.txt", &summary)?;
    Ok(())
}

fn pure_fidelity(psi: &CVector, rho: &CMatrix, squared: bool, project: bool) -> Result<f64> {
    let pure: CMatrix = psi * psi.adjoint();
    let rho = if project {
        psd_project(rho, true)?
    } else {
        rho.clone()
    };
    if squared {
        fidelity_squared(&pure, &rho)
    } else {
        fidelity(&pure, &rho)
    }
}

fn thin<T: Clone>(items: &[T], every: usize) -> Vec<T> {
    let n = items.len();
    let mut out: Vec<T> = items.iter().step_by(every.max(1)).cloned().collect();
    if n > 0 && (n - 1) % every.max(1) != 0 {
        out.push(items[n - 1].clone());
    }
    out
}

fn run_oracle(ctx: &RunContext) -> Result<()> {
    let model = build_model(&ctx.config.model)?;
    let grid = uniform_grid(0.0, ctx.config.grid.dt, ctx.config.n_steps());
    let noise_model = NoiseModel::new(
        Hamiltonian::Constant(model.hamiltonian.clone()),
        model.channels.clone(),
    )?;
    let rho0: CMatrix = &model.psi0 * model.psi0.adjoint();
    let dense = integrate(&noise_model, &rho0, &grid, &[], 4)?;
    let times = thin(&grid, ctx.config.grid.sample_every);
    let states = thin(&dense, ctx.config.grid.sample_every);
    let pure = unitary_reference(&model.hamiltonian, &model.psi0, &times)?;
    let squared = ctx.config.run.squared_fidelity;
    let f: Vec<f64> = pure
        .iter()
        .zip(&states)
        .map(|(p, s)| pure_fidelity(p, s, squared, false))
        .collect::<Result<_>>()?;
    let zeros = vec![0.0; times.len()];
    ctx.write_file("fidelity.csv", &fidelity_csv(&times, &f, &f, &f, &zeros))?;
    let mut summary = format!("f_final = {:.8}\n", f.last().unwrap());
    summary.push_str(&format!("grid_points = {}\n", times.len()));
    ctx.write_file("summary.txt", &summary)?;
    Ok(())
}

fn run_unravel(ctx: &RunContext) -> Result<()> {
    let model = build_model(&ctx.config.model)?;
    let grid = uniform_grid(0.0, ctx.config.grid.dt, ctx.config.n_steps());
    let noise_model = NoiseModel::new(
        Hamiltonian::Constant(model.hamiltonian.clone()),
        model.channels.clone(),
    )?;
    let rho0: CMatrix = &model.psi0 * model.psi0.adjoint();
    let dense = integrate(&noise_model, &rho0, &grid, &[], 4)?;
    let records = sample_ensemble(&noise_model, &model.psi0, &grid, ctx.trajectories, ctx.seed)?;
    let ensemble = ensemble_average(&records, &grid, None)?;

    let times = thin(&grid, ctx.config.grid.sample_every);
    let dense_t = thin(&dense, ctx.config.grid.sample_every);
    let mean_t = thin(&ensemble.mean, ctx.config.grid.sample_every);
    let se_t: Vec<f64> = thin(&ensemble.entry_stderr, ctx.config.grid.sample_every)
        .iter()
        .map(|m| m.norm())
        .collect();
    let pure = unitary_reference(&model.hamiltonian, &model.psi0, &times)?;
    let squared = ctx.config.run.squared_fidelity;
    let mut f_dense = Vec::new();
    let mut f_mc = Vec::new();
    let mut max_td = 0.0f64;
    for i in 0..times.len() {
        f_dense.push(pure_fidelity(&pure[i], &dense_t[i], squared, false)?);
        f_mc.push(pure_fidelity(&pure[i], &mean_t[i], squared, true)?);
        max_td = max_td.max(trace_distance(&dense_t[i], &psd_project(&mean_t[i], true)?)?);
    }
    ctx.write_file(
        "fidelity.csv",
        &fidelity_csv(&times, &f_dense, &f_dense, &f_mc, &se_t),
    )?;
    let mut events = Vec::new();
    write_event_dump(&records, &mut events)?;
    ctx.write_file("events.csv", std::str::from_utf8(&events).unwrap_or(""))?;
    let mut summary = format!("max_trace_distance = {max_td:.6e}\n");
    summary.push_str(&format!("trajectories = {}\n", ctx.trajectories));
    ctx.write_file("summary.txt", &summary)?;
    Ok(())
}

fn run_mitigate(ctx: &RunContext) -> Result<()> {
    let model = build_model(&ctx.config.model)?;
    let grid = uniform_grid(0.0, ctx.config.grid.dt, ctx.config.n_steps());
    let mut run = MitigationRun::new(
        model.hamiltonian,
        model.channels,
        model.psi0,
        grid,
        ctx.trajectories,
        ctx.seed,
    );
    run.sample_every = ctx.config.grid.sample_every;
    run.squared_fidelity = ctx.config.run.squared_fidelity;
    run.error_injection = ctx.config.injection();
    let report = run_mitigation(&run)?;
    report_files(ctx, &report)
}

fn run_lv(ctx: &RunContext) -> Result<()> {
    let model = build_model(&ctx.config.model)?;
    let mut run = LVRun::new(
        model.hamiltonian,
        model.channels,
        model.psi0,
        ctx.config.grid.t_end,
        ctx.config.lv.steps,
        ctx.trajectories,
        ctx.seed,
    )?;
    run.t_c = ctx.config.lv.t_c;
    run.squared_fidelity = ctx.config.run.squared_fidelity;
    let report = lv_mitigation_run(&run)?;
    report_files(ctx, &report)
}

fn run_cost(ctx: &RunContext) -> Result<()> {
    let model = build_model(&ctx.config.model)?;
    let grid = uniform_grid(0.0, ctx.config.grid.dt, ctx.config.n_steps());
    let padded = padded_plan(&model.channels, &grid)?;
    let bound = cost_bound(&padded.plan, &grid)?;
    let engineered_model = NoiseModel::new(
        Hamiltonian::Constant(model.hamiltonian.clone()),
        padded.sampling_channels.clone(),
    )?;
    let records =
        sample_ensemble(&engineered_model, &model.psi0, &grid, ctx.trajectories, ctx.seed)?;
    let weights = weights_for_records(&padded.plan, &records, &grid)?;
    let empirical = cost_estimate(&weights, &grid)?;
    let times = thin(&grid, ctx.config.grid.sample_every);
    let emp_t = thin(&empirical, ctx.config.grid.sample_every);
    let gen_t = thin(&bound.general, ctx.config.grid.sample_every);
    let uni_t = thin(&bound.unital, ctx.config.grid.sample_every);
    let mut csv = String::from("t,cost_empirical,bound_general,bound_unital\n");
    for i in 0..times.len() {
        csv.push_str(&format!("{},{},{},{}\n", times[i], emp_t[i], gen_t[i], uni_t[i]));
    }
    ctx.write_file("cost.csv", &csv)?;
    let mut summary = format!("cost_final = {:.6}\n", empirical.last().unwrap());
    summary.push_str(&format!("bound_general_final = {:.6}\n", bound.general.last().unwrap()));
    summary.push_str(&format!("bound_unital_final = {:.6}\n", bound.unital.last().unwrap()));
    ctx.write_file("summary.txt", &summary)?;
    Ok(())
}

fn run_qprob(ctx: &RunContext) -> Result<()> {
    let qc = &ctx.config.qprob;
    let decomp = match &qc.decomposition {
        Some(path) => read_decomposition(path)?,
        None => depolarizing_inverse(qc.p)?,
    };
    let sampling = normalize(&decomp)?;
    let channel = depolarizing_channel(qc.p)?;
    let rho0: CMatrix = {
        let psi = basis_ket(2, 0);
        &psi * psi.adjoint()
    };
    let noisy = channel.apply(&rho0);
    let observable = crate::complexla::sigma_z();
    let exact = (&observable * &rho0).trace().re;
    let (estimate, stderr) = qp_estimate(
        &sampling,
        &decomp,
        &noisy,
        &observable,
        qc.samples,
        ctx.seed,
    )?;
    let mut csv = String::from("estimate,stderr,exact,cost,samples\n");
    csv.push_str(&format!(
        "{},{},{},{},{}\n",
        estimate, stderr, exact, sampling.cost, qc.samples
    ));
    ctx.write_file("qprob.csv", &csv)?;
    let written = ctx.out_dir.join("decomposition.txt");
    write_decomposition(&decomp, &written)?;
    let mut summary = format!("estimate = {estimate:.6}\n");
    summary.push_str(&format!("stderr = {stderr:.6}\n"));
    summary.push_str(&format!("exact = {exact:.6}\n"));
    summary.push_str(&format!("cost = {:.6}\n", sampling.cost));
    ctx.write_file("summary.txt", &summary)?;
    Ok(())
}

/// Loads the config, applies overrides and executes one pipeline, writing
/// its files into the output directory (default: `out/<subcommand>`).
pub fn run(subcommand: Subcommand, config_path: &Path, overrides: &Overrides) -> Result<()> {
    let (mut config, config_hash) = ExperimentConfig::from_path(config_path)?;
    if let Some(n) = overrides.trajectories {
        config.run.trajectories = n;
    }
    if let Some(s) = overrides.seed {
        config.run.seed = s;
    }
    if let Some(w) = overrides.workers {
        config.run.workers = w;
    }
    config.validate()?;
    let ctx = RunContext {
        seed: config.run.seed,
        trajectories: config.run.trajectories,
        out_dir: overrides
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(subcommand.name())),
        config_hash,
        config,
    };
    ctx.write_manifest(subcommand)?;
    let workers = ctx.config.run.workers;
    let dispatch = || match subcommand {
        Subcommand::Oracle => run_oracle(&ctx),
        Subcommand::Unravel => run_unravel(&ctx),
        Subcommand::Mitigate => run_mitigate(&ctx),
        Subcommand::Lv => run_lv(&ctx),
        Subcommand::Cost => run_cost(&ctx),
        Subcommand::Qprob => run_qprob(&ctx),
    };
    if workers > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(dispatch)
    } else {
        dispatch()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_config(extra: &str) -> String {
        format!(
            "[model]\nkind = \"two_level\"\nomega = 1.0\ngamma_relax = 0.0\ngamma_dephase = 0.0\n\n\
             [grid]\nt_end = 1.0\ndt = 0.01\nsample_every = 10\n\n\
             [run]\ntrajectories = 50\nseed = 7\n{extra}"
        )
    }

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let path = dir.join("config.toml");
        fs::write(&path, text).unwrap();
        path
    }

    fn temp_dir(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("mqem-cli-{tag}-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = temp_dir("unknown");
        let path = write_config(&dir, &base_config("banana = 3\n"));
        assert!(matches!(
            ExperimentConfig::from_path(&path),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn grid_divisibility_is_enforced() {
        let dir = temp_dir("grid");
        let text = base_config("").replace("dt = 0.01", "dt = 0.3");
        let path = write_config(&dir, &text);
        let err = ExperimentConfig::from_path(&path).unwrap_err();
        assert!(err.to_string().contains("divide"), "got: {err}");
    }

    #[test]
    fn oracle_zero_noise_is_exact_and_headers_are_stable() {
        let dir = temp_dir("oracle");
        let path = write_config(&dir, &base_config(""));
        let out = dir.join("out");
        run(
            Subcommand::Oracle,
            &path,
            &Overrides {
                out: Some(out.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        let text = fs::read_to_string(out.join("fidelity.csv")).unwrap();
        let mut lines = text.lines();
        let head = lines.next().unwrap();
        assert!(head.starts_with("# config_hash="), "header line: {head}");
        assert!(head.contains("seed=7"));
        assert_eq!(lines.next().unwrap(), FIDELITY_HEADER);
        for line in lines {
            let f: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert!((f - 1.0).abs() < 1e-8, "fidelity {f} deviates from 1");
        }
        assert!(out.join("run_manifest.txt").exists());
        assert!(out.join("summary.txt").exists());
    }

    #[test]
    fn unravel_is_deterministic_across_worker_counts() {
        let dir = temp_dir("det");
        let text = base_config("")
            .replace("gamma_relax = 0.0", "gamma_relax = 0.3")
            .replace("gamma_dephase = 0.0", "gamma_dephase = 0.1");
        let path = write_config(&dir, &text);
        let mut outputs = Vec::new();
        for workers in [1usize, 4] {
            let out = dir.join(format!("out-{workers}"));
            let text_with_workers = fs::read_to_string(&path).unwrap();
            let amended = text_with_workers.replace("seed = 7", &format!("seed = 7\nworkers = {workers}"));
            let wpath = dir.join(format!("config-{workers}.toml"));
            fs::write(&wpath, amended).unwrap();
            run(
                Subcommand::Unravel,
                &wpath,
                &Overrides {
                    out: Some(out.clone()),
                    ..Default::default()
                },
            )
            .unwrap();
            // drop the header line (config hash differs with the workers key)
            let body: String = fs::read_to_string(out.join("fidelity.csv"))
                .unwrap()
                .lines()
                .skip(1)
                .collect::<Vec<_>>()
                .join("\n");
            outputs.push(body);
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn qprob_pipeline_writes_decomposition_and_estimate() {
        let dir = temp_dir("qprob");
        let path = write_config(&dir, &base_config("\n[qprob]\np = 0.1\nsamples = 2000\n"));
        let out = dir.join("out");
        run(
            Subcommand::Qprob,
            &path,
            &Overrides {
                out: Some(out.clone()),
                ..Default::default()
            },
        )
        .unwrap();
        let text = fs::read_to_string(out.join("qprob.csv")).unwrap();
        let data = text.lines().nth(2).unwrap();
        let cols: Vec<f64> = data.split(',').map(|v| v.parse().unwrap()).collect();
        let (estimate, stderr, exact) = (cols[0], cols[1], cols[2]);
        assert!(
            (estimate - exact).abs() < 4.0 * stderr.max(1e-3),
            "estimate {estimate} vs exact {exact} (se {stderr})"
        );
        assert!(out.join("decomposition.txt").exists());
    }
}
