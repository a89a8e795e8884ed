//! Turns an (ε, δ) target into a clip norm, and shows how far the loose
//! conversion falls from the tight one.
//!
//!     cargo run --example calibrate_clip_norm

use dpdecode::accounting::{
    calibrate_clip_norm, eps_to_zcdp, zcdp_to_eps, AdjacencyNotion, ClippingStrategy,
    ConversionMethod,
};

fn main() {
    let (b, tau, t, delta) = (7, 1.2, 500, 1e-6);
    println!("B={b} tau={tau} T={t} delta={delta}, dclip, replace-by-null\n");
    println!(
        "{:>6} {:>10} {:>10} {:>10} {:>10}",
        "eps", "rho tight", "C tight", "rho loose", "C loose"
    );
    for eps in [0.5, 1.0, 3.0, 5.0, 10.0, 20.0] {
        let row: Vec<(f64, f64)> = [ConversionMethod::Tight, ConversionMethod::Loose]
            .into_iter()
            .map(|m| {
                let rho = eps_to_zcdp(eps, delta, m).unwrap();
                let c = calibrate_clip_norm(
                    rho,
                    b,
                    tau,
                    t,
                    ClippingStrategy::Dclip,
                    AdjacencyNotion::ReplaceByNull,
                )
                .unwrap();
                (rho, c)
            })
            .collect();
        println!(
            "{eps:>6} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            row[0].0, row[0].1, row[1].0, row[1].1
        );
    }

    // Going back from ρ: the tight ε is never larger.
    let rho = 1.0;
    let tight = zcdp_to_eps(rho, delta, ConversionMethod::Tight).unwrap();
    let loose = zcdp_to_eps(rho, delta, ConversionMethod::Loose).unwrap();
    println!("\nrho=1 at delta=1e-6: eps tight {tight:.3}, loose {loose:.3}");
}
