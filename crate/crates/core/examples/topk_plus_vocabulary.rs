//! How the expanded top-k set grows with the clip norm, and why it must:
//! a single reference can lift a token from just below the public top-k
//! into the private top-k.
//!
//!     cargo run --example topk_plus_vocabulary

use dpdecode::mechanism::{
    expanded_top_vocabulary, standalone_contribution, superset_check, TopKPlusSet,
};
use dpdecode::LogitVector;

fn main() {
    let phi_pub = LogitVector::new(vec![3.0, 2.6, 2.5, 2.2, 1.9, 1.0, 0.4, -1.0]).unwrap();
    let (k, b) = (3, 4);
    println!("public logits {:?}, k = {k}, B = {b}", phi_pub.as_slice());
    for c in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let set = expanded_top_vocabulary(&phi_pub, k, c, b).unwrap();
        println!(
            "C = {c:<4} threshold {:.2}  core {:?}  members {:?}  effective k {}",
            set.ell - set.expansion,
            set.core,
            set.members,
            set.effective_k()
        );
    }

    // One reference pushes token 4 up by C while pulling token 2 down.
    let c = 2.0;
    let mut phi = phi_pub.as_slice().to_vec();
    phi[4] += c;
    phi[2] -= c;
    let phi = LogitVector::new(phi).unwrap();
    let alone = standalone_contribution(&phi, &phi_pub, c, b).unwrap();
    println!(
        "\nstandalone contribution of that reference: {:?}",
        alone.as_slice()
    );
    let ok = superset_check(std::slice::from_ref(&phi), &phi_pub, k, c).unwrap();
    let narrow = TopKPlusSet::with_margin(&phi_pub, k, c / (2.0 * b as f64)).unwrap();
    println!(
        "covered by the 2C/B set: {ok}; members with margin C/(2B) only: {:?}",
        narrow.members
    );
}
