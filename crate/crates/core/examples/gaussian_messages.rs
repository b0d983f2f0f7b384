//! Natural-parameter Gaussians: products, quotients and the cavity a device
//! sees when its own site is removed from the global approximation.
//!
//! cargo run --example gaussian_messages

use fedhier::gaussian::NaturalGaussian;

fn main() -> fedhier::Result<()> {
    let prior = NaturalGaussian::from_diagonal(&[0.0, 0.0], &[100.0, 4.0])?;
    let site_a = NaturalGaussian::from_diagonal(&[1.0, -0.5], &[0.5, 1.0])?;
    let site_b = NaturalGaussian::from_diagonal(&[2.0, 0.5], &[0.25, 2.0])?;

    let q = prior.product(&site_a)?.product(&site_b)?;
    let m = q.to_moments()?;
    println!("global mean {:.4?}", m.mean().as_slice());
    println!("global var  {:.4?}", m.covariance().diagonal().as_slice());

    // Removing a site is exact in natural parameters.
    let cavity = q.quotient(&site_b)?;
    let back = cavity.product(&site_b)?;
    println!("cavity mean {:.4?}", cavity.to_moments()?.mean().as_slice());
    println!("round trip error {:.2e}", (back.q() - q.q()).norm() + (back.r() - q.r()).norm());

    // A quotient that removes more precision than exists is improper.
    let too_much = site_a.quotient(&site_b.scale(3.0))?;
    println!("over-removed proper: {} (min eigenvalue {:.3})", too_much.is_proper(), too_much.min_eigenvalue());
    Ok(())
}
