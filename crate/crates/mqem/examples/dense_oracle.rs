//! Dense master-equation integration as the exactness oracle: amplitude
//! damping of an excited qubit, compared against the analytic exponential.
//!
//!     cargo run --release --example dense_oracle

use mqem::complexla::{c, CMatrix};
use mqem::models::{Channel, Hamiltonian, NoiseModel, RateFunction};
use mqem::propagate::{integrate, uniform_grid};

fn main() -> mqem::Result<()> {
    let gamma = 1.0;
    let model = NoiseModel::new(
        Hamiltonian::Constant(CMatrix::zeros(2, 2)),
        vec![Channel::new(
            mqem::complexla::sigma_minus(),
            RateFunction::Constant(gamma),
            "relax",
        )],
    )?;
    let mut rho0 = CMatrix::zeros(2, 2);
    rho0[(0, 0)] = c(1.0, 0.0); // excited state

    let grid = uniform_grid(0.0, 0.01, 200);
    let states = integrate(&model, &rho0, &grid, &[], 1)?;

    println!("{:>6} {:>12} {:>12} {:>10}", "t", "rho_ee", "exp(-t)", "error");
    for (i, (rho, &t)) in states.iter().zip(&grid).enumerate() {
        if i % 25 == 0 || i == grid.len() - 1 {
            let numeric = rho[(0, 0)].re;
            let exact = (-gamma * t).exp();
            println!(
                "{t:>6.2} {numeric:>12.8} {exact:>12.8} {:>10.2e}",
                (numeric - exact).abs()
            );
        }
    }
    Ok(())
}
