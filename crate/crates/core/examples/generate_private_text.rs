//! End-to-end private generation: one text per disjoint batch of sensitive
//! references, calibrated to (ε, δ) = (5, 1e-6).
//!
//!     cargo run --example generate_private_text

use std::fs;
use std::path::Path;

use dpdecode::accounting::ConversionMethod;
use dpdecode::provider::ContextLayout;
use dpdecode::{generate_corpus, ClipSource, Dataset, GenerationParams, NGramModel, NGramProvider};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let public = fs::read_to_string(data.join("public.txt"))?;
    let docs: Vec<&str> = public.lines().filter(|l| !l.is_empty()).collect();
    let model = NGramModel::train_on_texts(&docs, 4, 0.05)?;
    let vocab = model.vocabulary().clone();
    let provider = NGramProvider::new(model).with_layout(ContextLayout {
        reference_first: false,
        separator: vocab.id("."),
    });

    let refs = fs::read_to_string(data.join("references.txt"))?;
    let references = refs
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| vocab.encode(l))
        .collect::<Result<_, _>>()?;
    let dataset = Dataset::new(vocab.encode("note. ")?, references);

    let params = GenerationParams::new(
        4,
        1.0,
        6,
        60,
        ClipSource::TargetEpsilon {
            epsilon: 5.0,
            delta: 1e-6,
            method: ConversionMethod::Tight,
        },
    )
    .with_seed(17)
    .with_trace(true);
    let config = params.calibrate()?;
    let run = generate_corpus(&config, &dataset, &provider, 2)?;

    for r in &run.records {
        let trace = r.trace.as_deref().unwrap_or_default();
        let mean_k =
            trace.iter().map(|s| s.effective_k as f64).sum::<f64>() / trace.len().max(1) as f64;
        println!(
            "batch {} [{}, mean effective k {mean_k:.1}, {} expansion tokens]\n  {}",
            r.batch_index,
            r.finished_by.as_str(),
            r.expansion_tokens().unwrap_or(0),
            vocab.decode(&r.tokens)
        );
    }
    println!(
        "\nC = {:.4}; guarantee rho = {:.4}, eps = {:.3} at delta = 1e-6, for all {} texts together",
        config.clip_norm(),
        run.report.rho,
        run.report.epsilon.unwrap_or(f64::NAN),
        run.records.len()
    );
    println!(
        "dropped references: {:?}; provider calls: {}",
        run.leftover,
        run.total_requests()
    );
    Ok(())
}
