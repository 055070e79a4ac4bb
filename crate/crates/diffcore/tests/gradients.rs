//! Analytic gradients against the central-difference oracle.

mod support;

use diffcore::{Graph, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use support::{primitive_errors, rand_tensor, random_composite, random_composite_error, TOL};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, err) in primitive_errors() {
        assert!(err < TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn random_composites_match_finite_differences_over_100_seeds() {
    for seed in 0..100u64 {
        let err = random_composite_error(seed);
        assert!(err < TOL, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let va = g.input(a).unwrap();
        let vb = g.input(b).unwrap();
        let loss = random_composite(&mut g, &[va, vb], 42, 10).unwrap();
        g.backward(loss, &mut ParamStore::new()).unwrap();
        (g.grad(va).unwrap().to_vec(), g.grad(vb).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}
