//! Scores candidate summaries with ROUGE-1/2/L and the Lead-8 baseline.

use btsumm::corpus::tokenize;
use btsumm::rouge::{average, lead8, rouge, EvalReport};

fn main() -> btsumm::Result<()> {
    let articles = [
        (
            "the central bank raised interest rates on thursday citing persistent inflation in services",
            "central bank raises rates",
            "bank raises interest rates",
        ),
        (
            "heavy rain flooded roads across the northern region forcing schools to close early",
            "floods close schools in north",
            "rain floods northern roads",
        ),
    ];
    let mut system = Vec::new();
    let mut lead = Vec::new();
    for (full, reference, candidate) in articles {
        let (full, reference, candidate) = (tokenize(full), tokenize(reference), tokenize(candidate));
        let s = rouge(&candidate, &reference);
        println!(
            "{:<32} R-1 {:.3}  R-2 {:.3}  R-L {:.3}",
            candidate.join(" "),
            s.r1.f,
            s.r2.f,
            s.rl.f
        );
        system.push(s);
        lead.push(rouge(&lead8(&full), &reference));
    }
    let mut report = EvalReport::new("example", "none");
    report.push("system", average(&system)?)?;
    report.push("Lead-8", average(&lead)?)?;
    print!("\n{}", report.to_text());
    Ok(())
}
