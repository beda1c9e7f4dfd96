//! Few extreme ratings versus many extreme ratings versus many typical ones.
//! Four five-star ratings could be chance; fifty of them are not, and the
//! posterior reflects that.

use birdnest::fit::{BirdModel, ClusterParams};
use birdnest::math::{CountVector, DirichletParams};
use birdnest::nest::{expected_surprise, posterior_mean_rating_draws, Side};
use birdnest::ingest::UserHistogram;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> birdnest::Result<()> {
    let alpha = DirichletParams::new(vec![1.5, 1.2, 2.0, 3.5, 4.0])?;
    let model = BirdModel {
        clusters: vec![ClusterParams { pi: 1.0, alpha, beta: DirichletParams::new(vec![2.0, 2.0])? }],
        user_ids: vec![],
        assignments: vec![],
        total_log_likelihood: 0.0,
        bic: 0.0,
    };
    let users = [
        ("alice", vec![0, 0, 0, 0, 4]),
        ("bob", vec![0, 0, 0, 0, 50]),
        ("carol", vec![37, 31, 51, 88, 93]),
    ];
    for (i, (name, counts)) in users.into_iter().enumerate() {
        let hist = UserHistogram {
            user_id: name.into(),
            rating_counts: CountVector::new(counts),
            temporal_counts: CountVector::zeros(2),
        };
        let posterior = model.posterior_rating(0, &hist)?;
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let s = expected_surprise(&posterior, &model, Side::Rating, 2048, &mut rng)?;
        let draws = posterior_mean_rating_draws(&model, &hist, 0, 10_000, 1, i)?;
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / draws.len() as f64).sqrt();
        println!(
            "{name:6} rating surprise {:6.3} +/- {:.3}   posterior mean rating {mean:.2} +/- {sd:.2}",
            s.value, s.std_error
        );
    }
    Ok(())
}
