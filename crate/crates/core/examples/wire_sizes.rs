//! Bandwidth and storage measurements.

use viceroy::agent::export_store;
use viceroy::bench;
use viceroy::encoding::WireMode;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let report = bench::run(3)?;
    println!("{report}");

    let (baseline, history) = bench::reference_stores()?;
    let text = String::from_utf8(export_store(&baseline, WireMode::Optimized))?;
    println!("baseline store ({} B):\n{text}", text.len());
    println!(
        "100 visits: {} B optimized, {} B verbose",
        export_store(&history, WireMode::Optimized).len(),
        export_store(&history, WireMode::Verbose).len()
    );
    Ok(())
}
