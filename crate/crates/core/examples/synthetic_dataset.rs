//! Writes a synthetic dataset usable by every `mmlf` subcommand.
//!
//! cargo run --example synthetic_dataset -- <out-dir> [frames] [seed]

use mmlf::kitti_io::ClassList;
use mmlf::synthetic::{generate, write_dataset, SyntheticConfig};
use std::path::PathBuf;
use std::process::ExitCode;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(root) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synthetic_dataset <out-dir> [frames] [seed]");
        return ExitCode::from(2);
    };
    let frames = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = generate(&SyntheticConfig {
        frames,
        seed,
        ..SyntheticConfig::default()
    });
    if let Err(e) = write_dataset(&root, &data, &ClassList::default()) {
        eprintln!("synthetic_dataset: {}: {e}", root.display());
        return ExitCode::from(1);
    }
    println!("frames={frames} root={}", root.display());
    ExitCode::SUCCESS
}
