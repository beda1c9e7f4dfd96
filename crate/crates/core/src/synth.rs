//! Synthetic populations drawn from the generative mixture, with an optional
//! held-out fraud cohort. Used as ground truth for recovery and detection
//! tests and by the `simulate` command.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};
use crate::fit::ClusterParams;
use crate::ingest::{BucketingConfig, RatingEvent, UserHistogram};
use crate::math::{CountVector, DirichletParams, DirichletSampler};
use crate::seed::{self, Domain};

/// How many ratings each user gives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatingsPerUser {
    Fixed(u32),
    Uniform { min: u32, max: u32 },
}

impl RatingsPerUser {
    fn validate(&self) -> Result<()> {
        match *self {
            RatingsPerUser::Fixed(n) if n >= 1 => Ok(()),
            RatingsPerUser::Uniform { min, max } if min >= 1 && min <= max => Ok(()),
            other => Err(BirdError::InvalidSpec(format!(
                "ratings per user must be at least 1: {other:?}"
            ))),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        match *self {
            RatingsPerUser::Fixed(n) => n,
            RatingsPerUser::Uniform { min, max } => rng.random_range(min..=max),
        }
    }
}

/// Users that bypass the mixture and draw from their own priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FraudCohort {
    pub count: usize,
    pub alpha: DirichletParams,
    pub beta: DirichletParams,
    /// Defaults to the population's setting.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratings_per_user: Option<RatingsPerUser>,
}

fn default_bucketing() -> BucketingConfig {
    BucketingConfig {
        base: 2.0,
        num_buckets: 21,
        min_gap: 1,
    }
}

/// Full generative parameter set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    /// Number of ordinary (mixture) users.
    pub m: usize,
    pub clusters: Vec<ClusterParams>,
    pub ratings_per_user: RatingsPerUser,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fraud: Option<FraudCohort>,
    pub seed: u64,
    /// Used when materializing timestamps; its bucket count must equal the
    /// length of every `beta`.
    #[serde(default = "default_bucketing")]
    pub bucketing: BucketingConfig,
}

/// Ground truth for one generated user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct UserLabel {
    /// 0-based mixture component; `None` for fraud users.
    pub cluster: Option<usize>,
    pub is_fraud: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub histograms: Vec<UserHistogram>,
    pub labels: Vec<UserLabel>,
}

impl SynthSpec {
    /// Single-component spec with fixed ratings per user and the default
    /// bucketing (base 2, 21 buckets).
    pub fn single(m: usize, alpha: DirichletParams, beta: DirichletParams, n: u32, seed: u64) -> Self {
        Self {
            m,
            clusters: vec![ClusterParams { pi: 1.0, alpha, beta }],
            ratings_per_user: RatingsPerUser::Fixed(n),
            fraud: None,
            seed,
            bucketing: default_bucketing(),
        }
    }

    pub fn total_users(&self) -> usize {
        self.m + self.fraud.as_ref().map_or(0, |f| f.count)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clusters.is_empty() {
            return Err(BirdError::InvalidSpec("at least one cluster required".into()));
        }
        let pi_sum: f64 = self.clusters.iter().map(|c| c.pi).sum();
        if self.clusters.iter().any(|c| !(c.pi >= 0.0)) || (pi_sum - 1.0).abs() > 1e-9 {
            return Err(BirdError::InvalidSpec(format!(
                "mixing weights must be non-negative and sum to 1, got {pi_sum}"
            )));
        }
        self.bucketing.validate()?;
        let stars = self.clusters[0].alpha.len();
        let buckets = self.bucketing.num_buckets;
        let dims_ok = |a: &DirichletParams, b: &DirichletParams| a.len() == stars && b.len() == buckets;
        if !self.clusters.iter().all(|c| dims_ok(&c.alpha, &c.beta)) {
            return Err(BirdError::InvalidSpec(format!(
                "every alpha needs {stars} entries and every beta {buckets}"
            )));
        }
        self.ratings_per_user.validate()?;
        if let Some(f) = &self.fraud {
            if !dims_ok(&f.alpha, &f.beta) {
                return Err(BirdError::InvalidSpec("fraud priors have wrong dimensions".into()));
            }
            if let Some(r) = &f.ratings_per_user {
                r.validate()?;
            }
        }
        if self.total_users() == 0 {
            return Err(BirdError::InvalidSpec("no users requested".into()));
        }
        Ok(())
    }

    fn user_id(&self, index: usize) -> String {
        let width = self.total_users().saturating_sub(1).max(1).to_string().len();
        format!("u{index:0width$}")
    }

    fn fraud_mask(&self) -> Vec<bool> {
        let total = self.total_users();
        let mut mask = vec![false; total];
        if let Some(f) = &self.fraud {
            let mut rng = seed::stream(self.seed, Domain::SynthLayout, 0);
            for i in rand::seq::index::sample(&mut rng, total, f.count.min(total)) {
                mask[i] = true;
            }
        }
        mask
    }
}

/// Exact multinomial draw via sequential conditional binomials.
fn multinomial_counts<R: Rng + ?Sized>(n: u32, probs: &[f64], rng: &mut R) -> CountVector {
    let mut counts = vec![0u32; probs.len()];
    let mut remaining = u64::from(n);
    let mut mass = 1.0f64;
    for (slot, &p) in counts.iter_mut().zip(probs).take(probs.len() - 1) {
        if remaining == 0 {
            break;
        }
        let ratio = if mass > 0.0 { (p / mass).clamp(0.0, 1.0) } else { 1.0 };
        let draw = Binomial::new(remaining, ratio)
            .expect("probability clamped to [0, 1]")
            .sample(rng);
        *slot = draw as u32;
        remaining -= draw;
        mass -= p;
    }
    *counts.last_mut().expect("at least two categories") += remaining as u32;
    CountVector::new(counts)
}

fn draw_cluster<R: Rng + ?Sized>(clusters: &[ClusterParams], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, c) in clusters.iter().enumerate() {
        acc += c.pi;
        if u < acc {
            return k;
        }
    }
    clusters.iter().rposition(|c| c.pi > 0.0).unwrap_or(0)
}

/// Sample histograms and labels for every user.
///
/// Per user: pick a cluster from the mixing weights (or the fraud cohort),
/// draw star and gap distributions from the cluster's priors, then `n`
/// ratings and `n − 1` gap buckets from those distributions.
pub fn generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mask = spec.fraud_mask();
    let samplers: Vec<(DirichletSampler, DirichletSampler)> = spec
        .clusters
        .iter()
        .map(|c| (DirichletSampler::new(&c.alpha), DirichletSampler::new(&c.beta)))
        .collect();
    let fraud_samplers = spec
        .fraud
        .as_ref()
        .map(|f| (DirichletSampler::new(&f.alpha), DirichletSampler::new(&f.beta)));
    let (histograms, labels): (Vec<_>, Vec<_>) = (0..spec.total_users())
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(spec.seed, Domain::SynthUser, i as u64);
            let (label, (rating_prior, temporal_prior), per_user) = if mask[i] {
                let f = spec.fraud.as_ref().expect("mask implies cohort");
                (
                    UserLabel { cluster: None, is_fraud: true },
                    fraud_samplers.as_ref().expect("cohort samplers"),
                    f.ratings_per_user.unwrap_or(spec.ratings_per_user),
                )
            } else {
                let k = draw_cluster(&spec.clusters, &mut rng);
                (
                    UserLabel { cluster: Some(k), is_fraud: false },
                    &samplers[k],
                    spec.ratings_per_user,
                )
            };
            let p = rating_prior.sample(&mut rng);
            let q = temporal_prior.sample(&mut rng);
            let n = per_user.draw(&mut rng);
            let hist = UserHistogram {
                user_id: spec.user_id(i),
                rating_counts: multinomial_counts(n, p.as_slice(), &mut rng),
                temporal_counts: multinomial_counts(n - 1, q.as_slice(), &mut rng),
            };
            (hist, label)
        })
        .unzip();
    Ok(SynthData { histograms, labels })
}

/// Generated events with the population they were drawn from.
#[derive(Debug, Clone)]
pub struct SynthEvents {
    pub events: Vec<RatingEvent>,
    pub data: SynthData,
}

const EPOCH_START: u64 = 1_400_000_000;
const START_SPREAD: u64 = 365 * 24 * 3600;
const PRODUCTS: u32 = 10_000;

/// Materialize timestamped events whose gaps fall in the drawn buckets
/// (uniform over the whole seconds of `[base^j, base^(j+1))`). Events are
/// ordered by time across users; re-ingesting them with `spec.bucketing`
/// reproduces the generated histograms exactly.
pub fn generate_events(spec: &SynthSpec) -> Result<SynthEvents> {
    let data = generate(spec)?;
    let cfg = spec.bucketing;
    let ranges: Vec<Option<(u64, u64)>> = (0..cfg.num_buckets)
        .map(|j| cfg.gap_range(j).ok())
        .collect();
    let per_user: Vec<Vec<RatingEvent>> = data
        .histograms
        .par_iter()
        .enumerate()
        .map(|(i, h)| user_events(spec.seed, i, h, &ranges))
        .collect::<Result<_>>()?;
    let mut events: Vec<RatingEvent> = per_user.into_iter().flatten().collect();
    events.sort_by_key(|e| e.timestamp);
    Ok(SynthEvents { events, data })
}

fn expand(counts: &CountVector, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut seq: Vec<usize> = counts
        .counts()
        .iter()
        .enumerate()
        .flat_map(|(l, &c)| std::iter::repeat_n(l, c as usize))
        .collect();
    seq.shuffle(rng);
    seq
}

fn user_events(
    seed_value: u64,
    index: usize,
    hist: &UserHistogram,
    ranges: &[Option<(u64, u64)>],
) -> Result<Vec<RatingEvent>> {
    let mut rng = seed::stream(seed_value, Domain::SynthEvents, index as u64);
    let stars = expand(&hist.rating_counts, &mut rng);
    let buckets = expand(&hist.temporal_counts, &mut rng);
    let mut t = EPOCH_START + rng.random_range(0..START_SPREAD);
    let mut out = Vec::with_capacity(stars.len());
    for (j, &star) in stars.iter().enumerate() {
        if j > 0 {
            let bucket = buckets[j - 1];
            let (lo, hi) = ranges[bucket].ok_or(BirdError::UnreachableBucket { bucket })?;
            t += rng.random_range(lo..=hi);
        }
        out.push(RatingEvent {
            user_id: hist.user_id.clone(),
            product_id: format!("p{}", rng.random_range(0..PRODUCTS)),
            stars: star as u32 + 1,
            timestamp: t,
        });
    }
    Ok(out)
}

/// Write events in the ingest CSV format, with a header line.
pub fn write_events_csv<W: Write>(out: W, events: &[RatingEvent]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "product_id", "stars", "timestamp"])?;
    for e in events {
        w.write_record([
            e.user_id.as_str(),
            e.product_id.as_str(),
            &e.stars.to_string(),
            &e.timestamp.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `user_id,cluster,is_fraud` with 1-based clusters; fraud rows leave the
/// cluster empty.
pub fn write_labels_csv<W: Write>(out: W, data: &SynthData) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "cluster", "is_fraud"])?;
    for (h, l) in data.histograms.iter().zip(&data.labels) {
        w.write_record([
            h.user_id.as_str(),
            &l.cluster.map_or(String::new(), |k| (k + 1).to_string()),
            if l.is_fraud { "true" } else { "false" },
        ])?;
    }
    w.flush()?;
    Ok(())
}
