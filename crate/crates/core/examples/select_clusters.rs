//! Choose the number of clusters by BIC.

use birdnest::fit::{select_k, ClusterParams, FitLimits};
use birdnest::math::DirichletParams;
use birdnest::synth::{generate, RatingsPerUser, SynthSpec};

fn main() -> birdnest::Result<()> {
    let dp = |v: &[f64]| DirichletParams::new(v.to_vec());
    let mut spec = SynthSpec::single(1500, dp(&[1.0, 1.0, 2.0, 4.0, 8.0])?, DirichletParams::ones(21), 20, 5);
    spec.clusters[0].pi = 0.6;
    spec.clusters.push(ClusterParams { pi: 0.4, alpha: dp(&[6.0, 4.0, 2.0, 1.0, 1.0])?, beta: DirichletParams::ones(21) });
    spec.ratings_per_user = RatingsPerUser::Uniform { min: 5, max: 30 };
    let data = generate(&spec)?;
    let sel = select_k(&data.histograms, 1, 4, 11, &FitLimits::default())?;
    for c in &sel.candidates {
        println!("K = {}  log-likelihood {:>12.1}  BIC {:>12.1}", c.k, c.log_likelihood, c.bic);
    }
    println!("chosen K = {}", sel.model.k());
    Ok(())
}
