//! Library losses and aggregations against brute-force recomputation.

mod reference;

use fedaf::rng;
use fedaf::server::evaluate_tensor;
use fedaf::{ModelArchitecture, ModelParams, Tensor};
use rand::Rng as _;
use reference::checks::{self, ORACLE_TOL};
use reference::RefNet;

#[test]
fn dm_and_cdc_losses_match_brute_force() {
    let (dm, cdc) = checks::condensation_loss_oracle(50);
    assert!(dm <= ORACLE_TOL, "dm gap {dm}");
    assert!(cdc <= ORACLE_TOL, "cdc gap {cdc}");
}

#[test]
fn lgkm_matches_brute_force() {
    let gap = checks::lgkm_oracle(50);
    assert!(gap <= ORACLE_TOL, "gap {gap}");
}

#[test]
fn lgkm_hand_computed_value() {
    assert!((checks::lgkm_hand_case() - 0.43941).abs() <= 1e-4);
}

#[test]
fn aggregation_matches_brute_force() {
    let (v, r) = checks::aggregation_oracle(50);
    assert!(v <= ORACLE_TOL, "mean logits gap {v}");
    assert!(r <= ORACLE_TOL, "soft labels gap {r}");
}

#[test]
fn swd_matches_common_grid_expansion() {
    let gap = checks::swd_oracle(50);
    assert!(gap <= ORACLE_TOL, "gap {gap}");
}

#[test]
fn accuracy_matches_recount() {
    let mut rng = rng::stream(25, &[]);
    let arch = ModelArchitecture::mlp((1, 2, 2), vec![4], 3);
    for seed in 0..10 {
        let params = ModelParams::init(&arch, seed).unwrap();
        let x = Tensor::from_fn(&[40, 1, 2, 2], |_| rng.random::<f32>());
        let labels: Vec<usize> = (0..40).map(|_| rng.random_range(0..3)).collect();
        let logits = RefNet::new(&params).logits(&x.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), 40);
        let hits = (0..40)
            .filter(|&i| {
                let row = &logits[i * 3..i * 3 + 3];
                let best = (0..3).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == labels[i]
            })
            .count();
        assert_eq!(evaluate_tensor(&params, &x, &labels).unwrap(), hits as f32 / 40.0);
    }
}
