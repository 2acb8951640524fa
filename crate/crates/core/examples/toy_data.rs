//! Writes the synthetic square-detection dataset used by the acceptance run.
//!
//! cargo run --example toy_data -- <dir> [seed]

use std::path::PathBuf;

use fairsight::pipeline::synthetic::{write_dataset, SplitSizes, ToySpec};

fn main() -> fairsight::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "toy".into()));
    let seed = args.next().map(|s| s.parse().expect("seed must be an integer")).unwrap_or(2024);
    let sizes = SplitSizes { train: 1400, val: 200, test: 400 };
    let manifest = write_dataset(&dir, &ToySpec::default(), sizes, seed)?;
    println!("{}", manifest.display());
    Ok(())
}
