//! Builds the three iteration-0 summarizers on a small synthetic corpus and
//! compares them with the hidden reference summaries.
//!
//! `cargo run --release --example initializers`

use btsumm::config::PipelineConfig;
use btsumm::corpus::TokenId;
use btsumm::pipeline::{self, Initializers, Prepared, Workspace};
use btsumm::rouge::rouge;

fn main() -> btsumm::Result<()> {
    let text = include_str!("small.toml");
    let cfg = PipelineConfig::from_text(text, &["run.work_dir=\"target/example-init\"".to_string()])?;
    pipeline::prepare(&cfg)?;
    pipeline::train_embeddings(&cfg)?;
    pipeline::align(&cfg)?;
    pipeline::init_prthr(&cfg)?;
    pipeline::init_dbae(&cfg)?;
    pipeline::init_moments(&cfg)?;

    let ws = Workspace::new(&cfg);
    let data = Prepared::load(&ws)?;
    let inits = Initializers::load(&ws, &data, &cfg.lineages()?)?;
    let inputs: Vec<&[TokenId]> = data.test.iter().map(|(f, _)| f.as_slice()).collect();
    let show = |ids: &[TokenId]| data.shared.decode(ids);

    println!("full text: {}", show(inputs[0]));
    println!("reference: {}", show(&data.test[0].1));
    for (lineage, f, _) in inits.functions()? {
        let out = f.apply(&inputs, 0)?;
        let rl: f64 = out
            .iter()
            .zip(&data.test)
            .map(|(o, (_, s))| rouge(o, s).rl.f)
            .sum::<f64>()
            / out.len() as f64;
        println!("{lineage:>6}: {:<40} mean R-L {:.1}", show(&out[0]), 100.0 * rl);
    }
    Ok(())
}
