//! Shared helpers for the integration-test suites.

// not every test binary uses every helper
#![allow(dead_code)]

use evade_core::nn::{Tape, Tensor2, Var};

/// Compare reverse-mode gradients against central finite differences.
///
/// `f` rebuilds the computation on a fresh tape from the given inputs and
/// returns a scalar loss var; it must be deterministic (re-seed any RNG it
/// uses internally). Every entry of every input tensor is perturbed by
/// ±`H`; the check passes when
/// |fd - analytic| / max(|fd|, |analytic|, 1) <= tol for all entries.
pub fn fd_check<F>(inputs: &[Tensor2], tol: f64, f: F)
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    const H: f64 = 1e-5;

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    assert_eq!(tape.value(loss).shape(), (1, 1), "loss must be scalar");
    let mut grads = tape.backward(loss).expect("backward");
    let analytic: Vec<Tensor2> = vars.iter().map(|v| grads.take(*v)).collect();

    let eval = |bumped: &[Tensor2]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = bumped.iter().map(|t| tape.input(t.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };

    for ti in 0..inputs.len() {
        for idx in 0..inputs[ti].len() {
            let mut plus = inputs.to_vec();
            plus[ti].as_mut_slice()[idx] += H;
            let mut minus = inputs.to_vec();
            minus[ti].as_mut_slice()[idx] -= H;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * H);
            let an = analytic[ti].as_slice()[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            assert!(
                rel <= tol,
                "input {ti} entry {idx}: fd {fd:.8e} vs analytic {an:.8e} (rel {rel:.3e})"
            );
        }
    }
}

/// Deterministic pseudo-random tensor in [lo, hi) for test fixtures.
pub fn rand_tensor(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor2 {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    evade_core::nn::init::uniform(rows, cols, lo, hi, &mut rng)
}
