//! Serves an n-gram model over the JSON logits protocol and generates through
//! the HTTP client. Output matches local generation bit for bit.
//!
//!     cargo run --example remote_logits

use std::thread;

use dpdecode::provider::remote::handle_request;
use dpdecode::{
    generate_corpus, ClipSource, Dataset, GenerationParams, NGramModel, NGramProvider,
    RemoteProvider,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let docs = [
        "the cat sat on the mat",
        "a dog and a cat",
        "the mat is flat",
        "the dog sat",
    ];
    let model = NGramModel::train_on_texts(&docs, 3, 0.1)?;
    let vocab = model.vocabulary().clone();
    let local = NGramProvider::new(model);

    let server = tiny_http::Server::http("127.0.0.1:0").map_err(|e| e.to_string())?;
    let url = format!(
        "http://{}",
        server.server_addr().to_ip().ok_or("no ip address")?
    );
    let served = local.clone();
    thread::spawn(move || {
        for mut req in server.incoming_requests() {
            let mut body = String::new();
            let _ = req.as_reader().read_to_string(&mut body);
            let (status, reply) = handle_request(&served, &body);
            let _ = req.respond(tiny_http::Response::from_string(reply).with_status_code(status));
        }
    });
    println!("serving logits at {url}");

    let remote = RemoteProvider::new(&url, vocab.clone()).with_env_token();
    let references = [
        "the cat is on the mat",
        "a dog sat",
        "the flat mat",
        "a cat and the dog",
    ]
    .iter()
    .map(|s| vocab.encode(s))
    .collect::<Result<_, _>>()?;
    let dataset = Dataset::new(vocab.encode("the ")?, references);
    let config = GenerationParams::new(2, 1.0, 4, 30, ClipSource::TargetRho(2.0))
        .with_seed(8)
        .calibrate()?;

    let over_http = generate_corpus(&config, &dataset, &remote, 2)?;
    let in_process = generate_corpus(&config, &dataset, &local, 1)?;
    for r in &over_http.records {
        println!("batch {}: {}", r.batch_index, vocab.decode(&r.tokens));
    }
    println!(
        "identical to local generation: {}",
        over_http.records == in_process.records
    );
    Ok(())
}
