//! Rating-log ingestion: CSV parsing, logarithmic gap bucketing and per-user
//! rating/temporal histograms.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BirdError, Result};
use crate::math::CountVector;

/// Gaps below this many seconds are clamped up before bucketing.
pub const MIN_GAP_SECONDS: u64 = 1;

/// Default star scale.
pub const DEFAULT_STARS: u32 = 5;

/// One timestamped star rating.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RatingEvent {
    pub user_id: String,
    pub product_id: String,
    pub stars: u32,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Logarithmic bucketing of inter-rating gaps.
///
/// A gap `δ` (clamped below at `min_gap`) lands in bucket
/// `min(floor(log_base δ), num_buckets - 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketingConfig {
    pub base: f64,
    pub num_buckets: usize,
    pub min_gap: u64,
}

impl BucketingConfig {
    pub fn new(base: f64, num_buckets: usize, min_gap: u64) -> Result<Self> {
        let cfg = Self {
            base,
            num_buckets,
            min_gap,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base.is_finite() && self.base > 1.0) {
            return Err(BirdError::InvalidBucketing(format!(
                "base must exceed 1, got {}",
                self.base
            )));
        }
        if self.num_buckets < 2 {
            return Err(BirdError::InvalidBucketing(format!(
                "need at least 2 buckets, got {}",
                self.num_buckets
            )));
        }
        if self.min_gap == 0 {
            return Err(BirdError::InvalidBucketing("min_gap must be positive".into()));
        }
        Ok(())
    }

    pub fn top_bucket(&self) -> usize {
        self.num_buckets - 1
    }

    fn power(&self, exponent: usize) -> f64 {
        self.base.powi(exponent as i32)
    }

    /// Bucket index of a gap in seconds: the largest `j` with
    /// `base^j <= max(gap, min_gap)`, capped at the top bucket.
    pub fn bucket(&self, gap: u64) -> usize {
        let delta = gap.max(self.min_gap) as f64;
        let top = self.top_bucket();
        let estimate = (delta.ln() / self.base.ln()).floor();
        let mut j = if estimate > 0.0 {
            (estimate as usize).min(top)
        } else {
            0
        };
        while j < top && self.power(j + 1) <= delta {
            j += 1;
        }
        while j > 0 && self.power(j) > delta {
            j -= 1;
        }
        j
    }

    /// Smallest whole-second gap whose bucket is at least `j`.
    fn first_gap_reaching(&self, j: usize) -> u64 {
        let mut lo = 1u64;
        let mut hi = (self.power(j).ceil().min(1e18) as u64).max(1);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if self.bucket(mid) >= j {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        lo
    }

    /// Inclusive range of whole-second gaps that land in bucket `j`, i.e.
    /// the integers in `[base^j, base^(j+1))` after clamping.
    pub fn gap_range(&self, j: usize) -> Result<(u64, u64)> {
        if j >= self.num_buckets {
            return Err(BirdError::UnreachableBucket { bucket: j });
        }
        let lo = self.first_gap_reaching(j);
        let hi = if j < self.top_bucket() {
            self.first_gap_reaching(j + 1) - 1
        } else {
            let end = self.power(j + 1).min(1e18).ceil() as u64;
            end.saturating_sub(1).max(lo)
        };
        if lo > hi || self.bucket(lo) != j {
            return Err(BirdError::UnreachableBucket { bucket: j });
        }
        Ok((lo, hi))
    }
}

/// A row the parser refused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectedRow {
    /// 1-based line number in the source.
    pub line: u64,
    pub reason: String,
}

/// Parser output: accepted events plus the rejection report.
#[derive(Debug, Clone, Default)]
pub struct ParsedRatings {
    pub events: Vec<RatingEvent>,
    pub rejected: Vec<RejectedRow>,
    /// Data rows seen, excluding a header and blank lines.
    pub rows: usize,
}

impl ParsedRatings {
    /// Fails when more than 1% of the data rows were rejected.
    pub fn enforce_malformed_limit(&self) -> Result<()> {
        if self.rejected.len() * 100 > self.rows {
            Err(BirdError::TooManyMalformed {
                rejected: self.rejected.len(),
                rows: self.rows,
            })
        } else {
            Ok(())
        }
    }
}

/// Parse `user_id,product_id,stars,unix_timestamp_seconds` rows, keeping
/// malformed rows in the report instead of failing. A first line whose stars
/// field is not numeric is treated as a header.
pub fn parse_ratings_lenient<R: Read>(source: R, stars: u32) -> Result<ParsedRatings> {
    if stars < 2 {
        return Err(BirdError::InvalidArgument(format!(
            "star scale must be at least 2, got {stars}"
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut out = ParsedRatings::default();
    let mut record = csv::ByteRecord::new();
    let mut first = true;
    loop {
        let line = reader.position().line();
        match reader.read_byte_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => return Err(e.into()),
                _ => {
                    out.rows += 1;
                    out.rejected.push(RejectedRow {
                        line,
                        reason: e.to_string(),
                    });
                    continue;
                }
            },
        }
        let line = record.position().map_or(line, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if first {
            first = false;
            if record.len() >= 3 && std::str::from_utf8(&record[2])
                .map_or(true, |f| f.parse::<i64>().is_err())
            {
                continue;
            }
        }
        out.rows += 1;
        match parse_row(&record, stars) {
            Ok(event) => out.events.push(event),
            Err(reason) => out.rejected.push(RejectedRow { line, reason }),
        }
    }
    Ok(out)
}

/// Parse and enforce the 1% malformed-row limit.
pub fn parse_ratings<R: Read>(source: R, stars: u32) -> Result<ParsedRatings> {
    let parsed = parse_ratings_lenient(source, stars)?;
    parsed.enforce_malformed_limit()?;
    Ok(parsed)
}

fn parse_row(record: &csv::ByteRecord, stars: u32) -> std::result::Result<RatingEvent, String> {
    if record.len() != 4 {
        return Err(format!("expected 4 fields, found {}", record.len()));
    }
    let field = |i: usize| {
        std::str::from_utf8(&record[i]).map_err(|_| format!("field {} is not UTF-8", i + 1))
    };
    let user_id = field(0)?;
    let product_id = field(1)?;
    if user_id.is_empty() {
        return Err("empty user_id".into());
    }
    if product_id.is_empty() {
        return Err("empty product_id".into());
    }
    let star_text = field(2)?;
    let value: u32 = star_text
        .parse()
        .map_err(|_| format!("stars {star_text:?} is not an integer"))?;
    if value < 1 || value > stars {
        return Err(format!("stars {value} outside 1..={stars}"));
    }
    let ts_text = field(3)?;
    let timestamp: u64 = ts_text
        .parse()
        .map_err(|_| format!("timestamp {ts_text:?} is not a non-negative integer"))?;
    Ok(RatingEvent {
        user_id: user_id.to_owned(),
        product_id: product_id.to_owned(),
        stars: value,
        timestamp,
    })
}

/// `<input>.errors.txt`
pub fn error_report_path(input: &Path) -> PathBuf {
    let mut name = input.as_os_str().to_owned();
    name.push(".errors.txt");
    PathBuf::from(name)
}

/// Write one line per rejected row: `line <n>: <reason>`.
pub fn write_error_report(path: &Path, rejected: &[RejectedRow]) -> io::Result<()> {
    let mut out = io::BufWriter::new(fs::File::create(path)?);
    for row in rejected {
        writeln!(out, "line {}: {}", row.line, row.reason)?;
    }
    out.flush()
}

/// Event indices per user, users in order of first appearance, each user's
/// events sorted by timestamp with ties kept in input order.
fn group_by_user(events: &[RatingEvent]) -> Vec<Vec<usize>> {
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, e) in events.iter().enumerate() {
        let slot = *index.entry(e.user_id.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push(i);
    }
    groups
        .par_iter_mut()
        .for_each(|g| g.sort_by_key(|&i| events[i].timestamp));
    groups
}

/// Pick the log base so the largest observed gap lands exactly at bucket
/// `target_buckets`: `base = max_gap^(1/target_buckets)`, giving
/// `target_buckets + 1` buckets.
pub fn choose_base(events: &[RatingEvent], target_buckets: usize) -> Result<BucketingConfig> {
    if target_buckets < 1 {
        return Err(BirdError::InvalidArgument(
            "target bucket count must be positive".into(),
        ));
    }
    let groups = group_by_user(events);
    let mut max_gap: Option<u64> = None;
    for g in groups.iter().filter(|g| g.len() >= 2) {
        for w in g.windows(2) {
            let gap = (events[w[1]].timestamp - events[w[0]].timestamp).max(MIN_GAP_SECONDS);
            max_gap = Some(max_gap.map_or(gap, |m| m.max(gap)));
        }
    }
    let max_gap = max_gap.ok_or(BirdError::NoTemporalData)?;
    if max_gap <= MIN_GAP_SECONDS {
        return Err(BirdError::DegenerateTemporal { gap: max_gap });
    }
    let base = ((max_gap as f64).ln() / target_buckets as f64).exp();
    let mut cfg = BucketingConfig::new(base, target_buckets + 1, MIN_GAP_SECONDS)?;
    // rounding in base^target can leave the largest gap one bucket short
    while cfg.bucket(max_gap) < target_buckets {
        cfg.base = f64::from_bits(cfg.base.to_bits() - 1);
    }
    Ok(cfg)
}

/// Per-user star and gap-bucket counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserHistogram {
    pub user_id: String,
    pub rating_counts: CountVector,
    pub temporal_counts: CountVector,
}

impl UserHistogram {
    pub fn n_ratings(&self) -> u64 {
        self.rating_counts.total()
    }
}

/// Build histograms for every user, in order of first appearance.
///
/// A user's first rating has no predecessor and contributes no temporal
/// observation, so `temporal_counts.total() == n_ratings - 1`.
pub fn build_histograms(
    events: &[RatingEvent],
    cfg: &BucketingConfig,
    stars: u32,
) -> Result<Vec<UserHistogram>> {
    cfg.validate()?;
    if let Some(bad) = events.iter().find(|e| e.stars < 1 || e.stars > stars) {
        return Err(BirdError::InvalidArgument(format!(
            "event for {} has {} stars on a 1..={stars} scale",
            bad.user_id, bad.stars
        )));
    }
    let groups = group_by_user(events);
    Ok(groups
        .par_iter()
        .map(|g| {
            let mut rating_counts = CountVector::zeros(stars as usize);
            let mut temporal_counts = CountVector::zeros(cfg.num_buckets);
            for &i in g {
                rating_counts.increment(events[i].stars as usize - 1);
            }
            for w in g.windows(2) {
                let gap = events[w[1]].timestamp - events[w[0]].timestamp;
                temporal_counts.increment(cfg.bucket(gap));
            }
            UserHistogram {
                user_id: events[g[0]].user_id.clone(),
                rating_counts,
                temporal_counts,
            }
        })
        .collect())
}
