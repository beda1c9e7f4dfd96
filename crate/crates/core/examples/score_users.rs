//! Inject a small fraud cohort into a synthetic population, fit, score,
//! and see how many of the flagged users are fraudulent.
//!
//! A cohort this uniform is a cluster in its own right, so a BIC search
//! gives it a component and its members stop looking unusual. Scoring
//! against the ordinary population's component count flags them.

use birdnest::fit::{fit_bird, select_k, BirdModel, ClusterParams, FitLimits};
use birdnest::math::DirichletParams;
use birdnest::nest::{nest_scores, DEFAULT_SAMPLES};
use birdnest::synth::SynthData;
use birdnest::synth::{generate, FraudCohort, RatingsPerUser, SynthSpec};

fn main() -> birdnest::Result<()> {
    let dp = |v: Vec<f64>| DirichletParams::new(v);
    let gaps = |c: f64| dp((0..21).map(|j| 1.0 + 6.0 * (-(j as f64 - c).powi(2) / 8.0).exp()).collect());
    let mut burst = vec![0.05; 21];
    burst[0] = 12.0;
    burst[1] = 8.0;
    let spec = SynthSpec {
        m: 5000,
        clusters: vec![
            ClusterParams { pi: 0.6, alpha: dp(vec![1.2, 1.1, 1.6, 3.5, 6.0])?, beta: gaps(15.0)? },
            ClusterParams { pi: 0.4, alpha: dp(vec![3.0, 2.0, 2.5, 3.0, 2.0])?, beta: gaps(18.0)? },
        ],
        ratings_per_user: RatingsPerUser::Uniform { min: 2, max: 40 },
        fraud: Some(FraudCohort {
            count: 50,
            alpha: dp(vec![0.05, 0.05, 0.05, 0.05, 30.0])?,
            beta: dp(burst)?,
            ratings_per_user: Some(RatingsPerUser::Fixed(30)),
        }),
        seed: 21,
        bucketing: birdnest::ingest::BucketingConfig::new(2.0, 21, 1)?,
    };
    let data = generate(&spec)?;
    let bic = select_k(&data.histograms, 1, 4, 3, &FitLimits::default())?.model;
    report("BIC-selected", &bic, &data)?;
    let fixed = fit_bird(&data.histograms, 2, 3, &FitLimits::default())?;
    report("population", &fixed, &data)
}

fn report(label: &str, model: &BirdModel, data: &SynthData) -> birdnest::Result<()> {
    let scores = nest_scores(model, &data.histograms, DEFAULT_SAMPLES, 3)?;
    let is_fraud = |id: &str| {
        data.histograms.iter().zip(&data.labels).any(|(h, l)| h.user_id == id && l.is_fraud)
    };
    println!("{label} K = {}", model.k());
    for r in scores.records.iter().take(5) {
        println!("  {:>3} {} nest {:7.3} fraud={}", r.rank, r.user_id, r.nest, is_fraud(&r.user_id));
    }
    let hits = scores.records.iter().take(50).filter(|r| is_fraud(&r.user_id)).count();
    println!("  precision@50 = {:.2}", hits as f64 / 50.0);
    Ok(())
}
