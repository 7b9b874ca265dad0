//! The price of reweighting: the empirical cost E|mu(t)| grows with the
//! mitigated horizon and stays below the analytic bounds. With all target
//! rates non-positive (nothing to mitigate) the bound collapses to 1.
//!
//!     cargo run --release --example cost_of_mitigation

use mqem::jumps::sample_ensemble;
use mqem::martingale::{cost_bound, cost_estimate, padded_plan, weights_for_records};
use mqem::models::{basis_ket, Channel, Hamiltonian, NoiseModel, RateFunction};
use mqem::propagate::uniform_grid;

fn main() -> mqem::Result<()> {
    let noise = vec![
        Channel::new(mqem::complexla::sigma_minus(), RateFunction::Constant(0.1), "relax"),
        Channel::new(mqem::complexla::sigma_z(), RateFunction::Constant(0.05), "dephase"),
    ];
    let grid = uniform_grid(0.0, 0.01, 500); // t in [0, 5]
    let padded = padded_plan(&noise, &grid)?;
    let bound = cost_bound(&padded.plan, &grid)?;

    let engineered = NoiseModel::new(
        Hamiltonian::Constant(mqem::complexla::sigma_x().scale(0.5)),
        padded.sampling_channels.clone(),
    )?;
    let records = sample_ensemble(&engineered, &basis_ket(2, 0), &grid, 20_000, 7)?;
    let weights = weights_for_records(&padded.plan, &records, &grid)?;
    let empirical = cost_estimate(&weights, &grid)?;

    println!(
        "{:>6} {:>12} {:>14} {:>14}",
        "t", "E|mu(t)|", "general bound", "unital bound"
    );
    for i in (0..grid.len()).step_by(100) {
        println!(
            "{:>6.2} {:>12.4} {:>14.4} {:>14.4}",
            grid[i], empirical[i], bound.general[i], bound.unital[i]
        );
    }

    // nothing to mitigate: bound is identically one
    let benign = mqem::martingale::MartingalePlan::new(
        RateFunction::Constant(0.0),
        vec![RateFunction::Constant(-0.1)],
        vec![RateFunction::Constant(0.1)],
        &grid,
    )?;
    let flat = cost_bound(&benign, &grid)?;
    println!(
        "\nall-negative target rates: bound at t_end = {:.1} (exactly 1)",
        flat.general.last().unwrap()
    );
    Ok(())
}
