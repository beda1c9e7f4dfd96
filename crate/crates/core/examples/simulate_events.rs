//! Turn a synthetic population into timestamped events and read them back.

use birdnest::ingest::{build_histograms, parse_ratings};
use birdnest::math::DirichletParams;
use birdnest::synth::{generate_events, write_events_csv, RatingsPerUser, SynthSpec};

fn main() -> birdnest::Result<()> {
    let mut spec = SynthSpec::single(
        1000,
        DirichletParams::new(vec![1.0, 1.0, 2.0, 4.0, 8.0])?,
        DirichletParams::new((0..21).map(|j| if j < 10 { 0.5 } else { 2.0 }).collect())?,
        10,
        8,
    );
    spec.ratings_per_user = RatingsPerUser::Uniform { min: 1, max: 15 };
    let synth = generate_events(&spec)?;
    let mut csv = Vec::new();
    write_events_csv(&mut csv, &synth.events)?;
    println!("{} events, {} bytes of CSV; first rows:", synth.events.len(), csv.len());
    for line in String::from_utf8_lossy(&csv).lines().take(4) {
        println!("  {line}");
    }
    let parsed = parse_ratings(csv.as_slice(), 5)?;
    let mut hists = build_histograms(&parsed.events, &spec.bucketing, 5)?;
    hists.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    println!("histograms identical after round trip: {}", hists == synth.data.histograms);
    Ok(())
}
