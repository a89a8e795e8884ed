//! Trains the built-in character n-gram provider, saves it, reloads it and
//! prints its most likely continuations.
//!
//!     cargo run --example train_ngram

use std::fs;
use std::path::Path;

use dpdecode::{LogitProvider, LogitRequest, NGramModel, NGramProvider};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let text = fs::read_to_string(data.join("public.txt"))?;
    let docs: Vec<&str> = text.lines().filter(|l| !l.is_empty()).collect();

    let model = NGramModel::train_on_texts(&docs, 4, 0.05)?;
    let dir = std::env::temp_dir().join("dpdecode-train-example");
    fs::create_dir_all(&dir)?;
    let path = dir.join("public.model.json");
    model.save(&path)?;
    let model = NGramModel::load(&path)?;
    let v = model.vocabulary().clone();
    println!(
        "order {} alpha {} |V| {} hash {} -> {}",
        model.order(),
        model.alpha(),
        v.size(),
        &v.hash()[..12],
        path.display()
    );

    let provider = NGramProvider::new(model);
    for context in ["the pat", "no fev", "the left kn"] {
        let req = LogitRequest::public(v.encode("")?, v.encode(context)?);
        let logits = provider.logits(&[req])?.remove(0);
        let probs = logits.softmax();
        let mut ranked: Vec<usize> = (0..probs.len()).collect();
        ranked.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
        let top: Vec<String> = ranked[..4]
            .iter()
            .map(|&y| format!("{:?} {:.3}", v.token(y).unwrap(), probs[y]))
            .collect();
        println!("{context:>12} | {}", top.join(", "));
    }
    Ok(())
}
