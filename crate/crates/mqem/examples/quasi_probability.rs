//! Quasi-probability inversion of a depolarizing channel: the inverse map
//! is not physical, but it is a signed mixture of physical channels, so
//! sampling channels with probability |q_k|/C and sign s_k recovers the
//! noiseless expectation value at variance cost C^2.
//!
//!     cargo run --release --example quasi_probability

use mqem::complexla::CMatrix;
use mqem::models::basis_ket;
use mqem::qprob::{depolarizing_channel, depolarizing_inverse, normalize, qp_estimate};

fn main() -> mqem::Result<()> {
    let p = 0.1;
    let channel = depolarizing_channel(p)?;
    let inverse = depolarizing_inverse(p)?;
    let sampling = normalize(&inverse)?;

    let psi = basis_ket(2, 0);
    let rho: CMatrix = &psi * psi.adjoint();
    let noisy = channel.apply(&rho);
    let observable = mqem::complexla::sigma_z();
    let exact = (&observable * &rho).trace().re;
    let damped = (&observable * &noisy).trace().re;

    println!("depolarizing p = {p}, sampling cost C = {:.4}", sampling.cost);
    println!("exact  <Z> = {exact:.6}");
    println!("noisy  <Z> = {damped:.6}");
    println!("{:>10} {:>12} {:>10}", "samples", "estimate", "stderr");
    for n in [1_000usize, 10_000, 100_000] {
        let (est, se) = qp_estimate(&sampling, &inverse, &noisy, &observable, n, 11)?;
        println!("{n:>10} {est:>12.6} {se:>10.6}");
    }
    Ok(())
}
