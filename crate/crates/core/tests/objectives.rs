use mpsclip::numerics::{Tape, Tensor, Var};
use mpsclip::objectives::{
    info_nce, mpc_loss, mpt_loss, s_max_matrix, similarity_matrix, total_loss, weighted_triplet, BatchFeatures,
    LossConfig, TripletWeighting,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Tensor<f64> {
    let t = Tensor::randn(&[rows, dim], 1.0, rng);
    mpsclip::numerics::l2_normalize_rows(&t, 0.0)
}

fn weighting() -> TripletWeighting {
    TripletWeighting::Sigmoid { kappa: 10.0 }
}

struct Instance {
    g_v: Tensor<f64>,
    g_t: Tensor<f64>,
    g_m: Tensor<f64>,
    b: usize,
    k: usize,
    d: usize,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (b, k, d) = (rng.random_range(2..=6), rng.random_range(1..=4), rng.random_range(2..=6));
    Instance { g_v: unit_rows(&mut rng, b, d), g_t: unit_rows(&mut rng, b, d), g_m: unit_rows(&mut rng, b * k, d), b, k, d }
}

fn item(v: &Var<f64>) -> f64 {
    v.item().unwrap()
}

#[test]
fn single_perspective_reduces_to_global_losses() {
    let cfg = LossConfig::default();
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (b, d) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let tape = Tape::new();
        let g_m = tape.constant(&unit_rows(&mut rng, b, d));
        let g_t = tape.constant(&unit_rows(&mut rng, b, d));
        let s = similarity_matrix(&g_m, &g_t).unwrap();
        let s_max = s_max_matrix(&g_m, &g_t, 1).unwrap();
        let mpc = item(&mpc_loss(&s_max, cfg.tau_inv).unwrap());
        let nce = item(&info_nce(&s, cfg.tau_inv).unwrap());
        assert!((mpc - nce).abs() <= 1e-12, "seed {seed}");
        let mpt = item(&mpt_loss(&s_max, cfg.margin, weighting()).unwrap());
        let tri = item(&weighted_triplet(&s, cfg.margin, weighting()).unwrap());
        assert!((mpt - tri).abs() <= 1e-12, "seed {seed}");
    }
}

#[test]
fn zero_weights_give_the_base_loss_exactly() {
    for seed in 0..50 {
        let x = instance(seed);
        let tape = Tape::new();
        let batch = BatchFeatures {
            g_v: tape.constant(&x.g_v),
            g_t: tape.constant(&x.g_t),
            g_m: Some(tape.constant(&x.g_m)),
            k: x.k,
        };
        let cfg = LossConfig { lambda_mpc: 0.0, lambda_mpt: 0.0, ..LossConfig::default() };
        let out = total_loss(&batch, &cfg).unwrap();
        let s = similarity_matrix(&batch.g_v, &batch.g_t).unwrap();
        let base = item(&info_nce(&s, cfg.tau_inv).unwrap()) + item(&weighted_triplet(&s, cfg.margin, cfg.weighting).unwrap());
        assert_eq!(item(&out.total), base);
        assert_eq!(item(&out.total), item(&out.base));
    }
}

#[test]
fn weighted_total_adds_both_terms() {
    let x = instance(7);
    let tape = Tape::new();
    let batch =
        BatchFeatures { g_v: tape.constant(&x.g_v), g_t: tape.constant(&x.g_t), g_m: Some(tape.constant(&x.g_m)), k: x.k };
    let cfg = LossConfig { lambda_mpc: 0.3, lambda_mpt: 0.7, ..LossConfig::default() };
    let [total, base, mpc, mpt] = total_loss(&batch, &cfg).unwrap().values().unwrap();
    assert!((total - (base + 0.3 * mpc + 0.7 * mpt)).abs() < 1e-12);
    let missing = BatchFeatures { g_m: None, ..batch };
    assert!(total_loss(&missing, &cfg).is_err());
}

/// Appends to every sample the mean of its perspectives. Its score against
/// any caption is the mean of the existing scores, strictly below their max
/// unless all of them coincide.
fn with_dominated(x: &Instance) -> Tensor<f64> {
    let (b, k, d) = (x.b, x.k, x.d);
    let mut data = Vec::with_capacity(b * (k + 1) * d);
    for i in 0..b {
        let group = &x.g_m.data()[i * k * d..(i + 1) * k * d];
        data.extend_from_slice(group);
        data.extend((0..d).map(|c| (0..k).map(|p| group[p * d + c]).sum::<f64>() / k as f64));
    }
    Tensor::new(vec![b * (k + 1), d], data).unwrap()
}

#[test]
fn dominated_perspective_changes_nothing() {
    let cfg = LossConfig::default();
    let mut checked = 0;
    for seed in 0..200 {
        let x = instance(seed);
        if x.k < 2 {
            continue;
        }
        let extended = with_dominated(&x);
        let tape = Tape::new();
        let g_t = tape.constant(&x.g_t);
        let before = s_max_matrix(&tape.constant(&x.g_m), &g_t, x.k).unwrap();
        let after = s_max_matrix(&tape.constant(&extended), &g_t, x.k + 1).unwrap();
        let extra = similarity_matrix(&tape.constant(&extended), &g_t).unwrap().value();
        let strictly_below = |i: usize, j: usize| extra.at(i * (x.k + 1) + x.k, j) < before.value().at(i, j);
        assert!((0..x.b).all(|i| (0..x.b).all(|j| strictly_below(i, j))), "seed {seed}");
        checked += 1;
        assert_eq!(before.value(), after.value());
        assert_eq!(item(&mpc_loss(&before, cfg.tau_inv).unwrap()), item(&mpc_loss(&after, cfg.tau_inv).unwrap()));
        assert_eq!(
            item(&mpt_loss(&before, cfg.margin, weighting()).unwrap()),
            item(&mpt_loss(&after, cfg.margin, weighting()).unwrap())
        );
    }
    assert!(checked >= 50, "only {checked} dominated instances");
}

proptest! {
    #[test]
    fn losses_are_finite_and_non_negative(seed in 0u64..100_000) {
        let x = instance(seed);
        let tape = Tape::new();
        let s = similarity_matrix(&tape.constant(&x.g_v), &tape.constant(&x.g_t)).unwrap();
        prop_assert!(item(&info_nce(&s, 1.0 / 0.07).unwrap()) >= 0.0);
        let tri = item(&weighted_triplet(&s, 0.2, weighting()).unwrap());
        prop_assert!(tri.is_finite() && tri >= 0.0);
        let uniform = item(&weighted_triplet(&s, 0.2, TripletWeighting::Uniform).unwrap());
        prop_assert!(uniform >= tri);
    }

    #[test]
    fn s_max_bounds_every_perspective(seed in 0u64..100_000) {
        let x = instance(seed);
        let tape = Tape::new();
        let g_t = tape.constant(&x.g_t);
        let s_max = s_max_matrix(&tape.constant(&x.g_m), &g_t, x.k).unwrap().value();
        let all = similarity_matrix(&tape.constant(&x.g_m), &g_t).unwrap().value();
        for i in 0..x.b {
            for j in 0..x.b {
                let best = (0..x.k).map(|p| all.at(i * x.k + p, j)).fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(s_max.at(i, j), best);
            }
        }
    }
}
