//! Writes a synthetic corpus (`images/` and `masks/`) for trying the CLI.
//!
//! `cargo run --example make_synthetic -- <out-dir> [count] [side] [seed]`

use std::path::PathBuf;

use selfsal::data::{make_synthetic, SyntheticSpec};

fn main() -> selfsal::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "synthetic".into()));
    let mut num = |default: u64| args.next().and_then(|v| v.parse().ok()).unwrap_or(default);
    let count = num(8) as usize;
    let side = num(64) as usize;
    let seed = num(0);
    let corpus = make_synthetic(&SyntheticSpec {
        count,
        side,
        ..SyntheticSpec::desk(seed)
    })?
    .write_to(&out)?;
    println!("wrote {} images to {}", corpus.len(), out.display());
    Ok(())
}
