//! Parse a ratings CSV, pick the gap bucketing, and build per-user histograms.

use birdnest::ingest::{build_histograms, choose_base, parse_ratings_lenient};

const CSV: &str = "\
user_id,product_id,stars,timestamp
alice,p1,5,1000
alice,p2,4,1090
bob,p1,5,1000
bob,p3,5,1001
bob,p4,5,1002
carol,p2,3,500
carol,p9,six,600
carol,p5,2,86900
";

fn main() -> birdnest::Result<()> {
    let parsed = parse_ratings_lenient(CSV.as_bytes(), 5)?;
    for r in &parsed.rejected {
        println!("rejected line {}: {}", r.line, r.reason);
    }
    let cfg = choose_base(&parsed.events, 20)?;
    println!("base {:.4}, {} buckets", cfg.base, cfg.num_buckets);
    for h in build_histograms(&parsed.events, &cfg, 5)? {
        println!("{:6} stars {:?} gaps {:?}", h.user_id, h.rating_counts.counts(), h.temporal_counts.counts());
    }
    Ok(())
}
