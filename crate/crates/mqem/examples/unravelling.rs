//! Stochastic jump unravelling of a driven, damped qubit: the trajectory
//! ensemble mean converges to the dense master-equation solution at the
//! Monte Carlo rate.
//!
//!     cargo run --release --example unravelling

use mqem::complexla::{psd_project, trace_distance, CMatrix};
use mqem::jumps::{ensemble_average, sample_ensemble};
use mqem::models::{basis_ket, Channel, Hamiltonian, NoiseModel, RateFunction};
use mqem::propagate::{integrate, uniform_grid};

fn main() -> mqem::Result<()> {
    let model = NoiseModel::new(
        Hamiltonian::Constant(mqem::complexla::sigma_x().scale(0.5)),
        vec![
            Channel::new(mqem::complexla::sigma_minus(), RateFunction::Constant(0.4), "relax"),
            Channel::new(mqem::complexla::sigma_z(), RateFunction::Constant(0.1), "dephase"),
        ],
    )?;
    let psi0 = basis_ket(2, 0);
    let rho0: CMatrix = &psi0 * psi0.adjoint();
    let grid = uniform_grid(0.0, 0.005, 400);
    let dense = integrate(&model, &rho0, &grid, &[], 2)?;

    println!("{:>8} {:>16} {:>14}", "N", "max trace dist", "jumps/traj");
    for n in [500usize, 2000, 8000] {
        let records = sample_ensemble(&model, &psi0, &grid, n, 42)?;
        let ensemble = ensemble_average(&records, &grid, None)?;
        let mut max_td = 0.0f64;
        for (mc, exact) in ensemble.mean.iter().zip(&dense) {
            max_td = max_td.max(trace_distance(&psd_project(mc, true)?, exact)?);
        }
        let jumps: usize = records.iter().map(|r| r.events.len()).sum();
        println!("{n:>8} {max_td:>16.6} {:>14.3}", jumps as f64 / n as f64);
    }
    println!("\nthe deviation shrinks like 1/sqrt(N), as expected");
    Ok(())
}
