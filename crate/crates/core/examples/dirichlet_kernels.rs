//! Dirichlet density, Dirichlet-multinomial marginal, sampling and the
//! fixed-point concentration fit.

use birdnest::math::{
    dirichlet_log_pdf, dirmult_log_marginal, fit_dirichlet_multinomial, sample_dirichlet,
    CountVector, DirichletParams, FixedPointLimits, SimplexPoint,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> birdnest::Result<()> {
    let alpha = DirichletParams::new(vec![1.0, 1.0, 2.0, 4.0, 8.0])?;
    let mean = SimplexPoint::new(alpha.mean())?;
    let corner = SimplexPoint::new(vec![0.96, 0.01, 0.01, 0.01, 0.01])?;
    println!("log density at mean   {:.3}", dirichlet_log_pdf(&mean, &alpha)?);
    println!("log density at corner {:.3}", dirichlet_log_pdf(&corner, &alpha)?);

    let counts = CountVector::new(vec![0, 0, 1, 3, 6]);
    println!("log P(sequence with counts {:?}) = {:.4}", counts.counts(), dirmult_log_marginal(&counts, &alpha)?);

    // Draw users from the prior, then recover the prior from their counts.
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let users: Vec<CountVector> = (0..3000)
        .map(|_| {
            let p = sample_dirichlet(&alpha, &mut rng);
            let mut c = CountVector::zeros(5);
            for _ in 0..30 {
                let u: f64 = rand::Rng::random(&mut rng);
                let mut acc = 0.0;
                let l = p.as_slice().iter().position(|&x| { acc += x; u < acc }).unwrap_or(4);
                c.increment(l);
            }
            c
        })
        .collect();
    let fit = fit_dirichlet_multinomial(&DirichletParams::ones(5), &users, &FixedPointLimits::default())?;
    println!(
        "recovered alpha {:?} in {} iterations",
        fit.params.as_slice().iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>(),
        fit.iterations
    );
    Ok(())
}
