//! Runs two back-translation iterations per lineage on a small synthetic
//! corpus and lists the registered artifacts.
//!
//! `cargo run --release --example back_translation`

use btsumm::bt::summarizers;
use btsumm::config::PipelineConfig;
use btsumm::pipeline;

fn main() -> btsumm::Result<()> {
    let text = include_str!("small.toml");
    let cfg = PipelineConfig::from_text(text, &["run.work_dir=\"target/example-bt\"".to_string()])?;
    pipeline::prepare(&cfg)?;
    pipeline::train_embeddings(&cfg)?;
    pipeline::align(&cfg)?;
    pipeline::init_prthr(&cfg)?;
    pipeline::init_dbae(&cfg)?;
    pipeline::init_moments(&cfg)?;
    let state = pipeline::bt_loop(&cfg)?;

    print!("{}", state.registry.to_text());
    for (name, lineage, it) in summarizers(&state) {
        println!("summarizer {name}: lineage {lineage}, iteration {it}");
    }
    Ok(())
}
