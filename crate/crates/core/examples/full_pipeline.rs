//! Every stage from data preparation to the evaluation report. A second call
//! resumes from the registered artifacts and finishes almost immediately.
//!
//! `cargo run --release --example full_pipeline [config.toml] [section.key=value ...]`

use std::time::Instant;

use btsumm::config::PipelineConfig;
use btsumm::pipeline;

fn main() -> btsumm::Result<()> {
    let mut args: Vec<String> = std::env::args().skip(1).collect();
    let text = match args.first().filter(|a| !a.contains('=')) {
        Some(path) => {
            let t = std::fs::read_to_string(path).map_err(|source| btsumm::Error::Io {
                path: path.into(),
                source,
            })?;
            args.remove(0);
            t
        }
        None => include_str!("small.toml").to_string(),
    };
    let cfg = PipelineConfig::from_text(&text, &args)?;
    for pass in ["first", "resumed"] {
        let start = Instant::now();
        let report = pipeline::run_all(&cfg)?;
        println!("{pass} run: {:.1}s", start.elapsed().as_secs_f64());
        if pass == "resumed" {
            print!("{}", pipeline::format_report(&report));
        }
    }
    Ok(())
}
