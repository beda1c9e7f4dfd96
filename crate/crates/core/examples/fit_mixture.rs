//! Fit a two-cluster mixture to synthetic users and compare with the truth.

use birdnest::fit::{fit_bird_traced, ClusterParams, FitLimits};
use birdnest::ingest::BucketingConfig;
use birdnest::math::DirichletParams;
use birdnest::synth::{generate, RatingsPerUser, SynthSpec};

fn main() -> birdnest::Result<()> {
    let dp = |v: &[f64]| DirichletParams::new(v.to_vec());
    let spec = SynthSpec {
        m: 2000,
        clusters: vec![
            ClusterParams { pi: 0.5, alpha: dp(&[1.0, 1.0, 2.0, 4.0, 8.0])?, beta: dp(&[1.0, 1.0, 2.0, 6.0, 3.0, 1.0])? },
            ClusterParams { pi: 0.5, alpha: dp(&[6.0, 4.0, 2.0, 1.0, 1.0])?, beta: dp(&[5.0, 3.0, 1.0, 1.0, 1.0, 1.0])? },
        ],
        ratings_per_user: RatingsPerUser::Fixed(30),
        fraud: None,
        seed: 1,
        bucketing: BucketingConfig::new(4.0, 6, 1)?,
    };
    let data = generate(&spec)?;
    let out = fit_bird_traced(&data.histograms, 2, 7, &FitLimits::default())?;
    let trace = &out.traces[out.best_restart];
    println!(
        "best restart {}: {} sweeps, log-likelihood {:.1}, largest step decrease {:.1e}",
        out.best_restart, trace.iterations, out.model.total_log_likelihood, trace.worst_decrease()
    );
    for (k, c) in out.model.clusters.iter().enumerate() {
        let alpha: Vec<String> = c.alpha.as_slice().iter().map(|a| format!("{a:.2}")).collect();
        println!("cluster {}: pi {:.3} alpha {alpha:?}", k + 1, c.pi);
    }
    Ok(())
}
