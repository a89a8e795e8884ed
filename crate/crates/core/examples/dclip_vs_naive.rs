//! Clipping raw logits flattens the next-token law once logits spread wider
//! than C; clipping the deviation from the public logits does not.
//!
//!     cargo run --example dclip_vs_naive

use dpdecode::accounting::{sensitivity, AdjacencyNotion, ClippingStrategy};
use dpdecode::mechanism::{
    aggregate, expanded_top_vocabulary, next_token_distribution, ClipParams,
};
use dpdecode::LogitVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

fn main() {
    let (v, b, c) = (40, 8, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let phi_pub = LogitVector::new(
        (0..v)
            .map(|i| 8.0 - 16.0 * i as f64 / (v - 1) as f64)
            .collect(),
    )
    .unwrap();
    let phis: Vec<LogitVector> = (0..b)
        .map(|_| {
            LogitVector::new(
                phi_pub
                    .as_slice()
                    .iter()
                    .map(|&p| p + rng.random_range(-0.5..0.5))
                    .collect(),
            )
            .unwrap()
        })
        .collect();
    let all = expanded_top_vocabulary(&phi_pub, v, c, b).unwrap();

    println!("|V| = {v}, B = {b}, C = {c}, public logits from 8 down to -8\n");
    println!("uniform entropy {:.3}", (v as f64).ln());
    for (name, params) in [
        ("dclip", ClipParams::dclip(c).unwrap()),
        ("naive", ClipParams::naive(c).unwrap()),
    ] {
        let agg = aggregate(&phis, &phi_pub, &params).unwrap();
        let p = next_token_distribution(&agg.values, &all, 1.0).unwrap();
        println!(
            "{name:>6}: entropy {:.3}, top-3 mass {:.3}",
            entropy(&p),
            p[..3].iter().sum::<f64>()
        );
    }

    for adj in [AdjacencyNotion::ReplaceByNull, AdjacencyNotion::ZeroOut] {
        let d = sensitivity(ClippingStrategy::Dclip, adj, c, b).unwrap();
        let n = sensitivity(
            ClippingStrategy::NaiveClip {
                sensitivity_advantage: false,
            },
            adj,
            c,
            b,
        )
        .unwrap();
        println!("sensitivity under {adj}: dclip {d:.4}, naive {n:.4}");
    }
}
