//! Writes a small class-coloured PNG corpus and its manifest for trying the
//! pipeline with the stub backbone.
//!
//! cargo run -p retino-bench --example synthetic_corpus -- <dir> [per_class] [side] [seed]

use std::path::PathBuf;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(dir) = args.first().map(PathBuf::from) else {
        eprintln!("usage: synthetic_corpus <dir> [per_class] [side] [seed]");
        std::process::exit(1);
    };
    let num = |i: usize, default: u64| args.get(i).map(|s| s.parse().expect("integer argument")).unwrap_or(default);
    match retino_bench::dataset::write_synthetic_corpus(&dir, num(1, 20) as usize, num(2, 32) as u32, num(3, 0)) {
        Ok(manifest) => println!("{}", manifest.display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    }
}
