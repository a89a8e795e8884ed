//! Enumerates every output sequence of a tiny run and checks the Rényi
//! divergence to each neighbouring batch against the accounted ρ.
//!
//!     cargo run --example exact_zcdp_certificate

use dpdecode::eval::{certify_batch, exact_distribution, ALPHA_GRID};
use dpdecode::{
    AdjacencyNotion, ClipSource, GenerationParams, NGramModel, NGramProvider, ReferenceBatch,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = NGramModel::train_on_texts(&["aab", "abba", "bab"], 2, 0.5)?;
    let vocab = model.vocabulary().clone();
    let provider = NGramProvider::new(model);
    let batch = ReferenceBatch::new(
        0,
        vocab.encode("a")?,
        vec![vocab.encode("bb")?, vocab.encode("ab")?],
    );

    for adjacency in [AdjacencyNotion::ReplaceByNull, AdjacencyNotion::ZeroOut] {
        let config = GenerationParams::new(2, 1.0, 2, 4, ClipSource::TargetRho(0.3))
            .with_adjacency(adjacency)
            .calibrate()?;
        let law = exact_distribution(&config, &batch, &provider)?;
        let cert = certify_batch(&config, &batch, &provider, &ALPHA_GRID)?;
        println!(
            "{adjacency}: C = {:.3}, {} sequences, rho = {}, max D_a/a = {:.4}, passed = {}",
            config.clip_norm(),
            law.len(),
            cert.rho,
            cert.max_divergence_per_alpha,
            cert.passed
        );
        for check in cert.checks.iter().filter(|c| c.replaced == 0) {
            println!(
                "  alpha {:>4}: D(P||Q) {:.5}  D(Q||P) {:.5}  bound {:.3}",
                check.alpha, check.forward, check.backward, check.bound
            );
        }
    }
    Ok(())
}
