//! Privacy reports for a few configurations: adjacency, clipping strategy,
//! and the number of generations.
//!
//!     cargo run --example audit_report

use dpdecode::accounting::{AccountingReport, MechanismParams};
use dpdecode::{AdjacencyNotion, ClippingStrategy, ConversionMethod};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let base = MechanismParams {
        strategy: ClippingStrategy::Dclip,
        adjacency: AdjacencyNotion::ReplaceByNull,
        clip_norm: 0.66,
        batch_size: 7,
        temperature: 1.2,
        max_tokens: 500,
    };
    let naive = ClippingStrategy::NaiveClip {
        sensitivity_advantage: false,
    };
    let favourable = ClippingStrategy::NaiveClip {
        sensitivity_advantage: true,
    };
    let cases = [
        ("dclip, replace-by-null", base),
        (
            "dclip, zero-out",
            MechanismParams {
                adjacency: AdjacencyNotion::ZeroOut,
                ..base
            },
        ),
        (
            "naive, replace-by-null",
            MechanismParams {
                strategy: naive,
                ..base
            },
        ),
        (
            "naive, zero-out",
            MechanismParams {
                strategy: naive,
                adjacency: AdjacencyNotion::ZeroOut,
                ..base
            },
        ),
        (
            "naive, favourable convention",
            MechanismParams {
                strategy: favourable,
                ..base
            },
        ),
    ];
    println!("C = 0.66, B = 7, tau = 1.2, T = 500, delta = 1e-6\n");
    for (name, params) in cases {
        let r = AccountingReport::for_disjoint_batches(&params, 1)?
            .with_epsilon_at(1e-6, ConversionMethod::Tight)?;
        println!(
            "{name:<30} sensitivity {:.4}  rho {:.4}  eps {:.3}",
            r.sensitivity,
            r.rho,
            r.epsilon.unwrap()
        );
    }

    let one = AccountingReport::for_disjoint_batches(&base, 1)?;
    let many = AccountingReport::for_disjoint_batches(&base, 10_000)?;
    println!(
        "\n1 generation vs 10000 generations, same report: {}",
        one == many
    );
    println!("\n{}", serde_json::to_string_pretty(&one)?);

    match AccountingReport::for_disjoint_batches(
        &MechanismParams {
            adjacency: AdjacencyNotion::AddOrRemove,
            ..base
        },
        1,
    ) {
        Ok(_) => println!("add-or-remove accepted"),
        Err(e) => println!("add-or-remove: {e}"),
    }
    Ok(())
}
