use mpsclip::numerics::{finite_diff_check_piecewise, grad, matmul, softmax_rows, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Build = dyn Fn(&[Var<f64>]) -> Var<f64>;

/// Evaluates `sum(op(inputs) ⊙ R)` for a fixed random readout `R`.
fn readout(out: &Var<f64>, seed: u64) -> Var<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
    let w = Tensor::randn(&out.shape(), 1.0, &mut rng);
    let w = out.tape().constant(&w);
    out.mul(&w).unwrap().sum()
}

fn check(seed: u64, shapes: &[Vec<usize>], build: &Build) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut rng)).collect();
    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();

    let eval = |flat: &[f64]| -> (f64, u64) {
        let tape = Tape::new();
        let mut off = 0;
        let vars: Vec<_> = inputs
            .iter()
            .zip(&sizes)
            .map(|(t, &n)| {
                let t = Tensor::new(t.shape().to_vec(), flat[off..off + n].to_vec()).unwrap();
                off += n;
                tape.leaf(&t.with_requires_grad())
            })
            .collect();
        let loss = readout(&build(&vars), seed);
        (loss.item().unwrap(), tape.branch_signature())
    };

    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(&t.clone().with_requires_grad())).collect();
    let loss = readout(&build(&vars), seed);
    let grads = loss.backward().unwrap();
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(&inputs) {
        match grads.get_slice(v) {
            Some(g) => analytic.extend_from_slice(g),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let report = finite_diff_check_piecewise(eval, &theta, &analytic, 1e-4).unwrap();
    assert!(report.skipped * 20 <= theta.len().max(20), "too many kinks: {report:?}");
    report.max_rel_error
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

fn suite(name: &str, gen: impl Fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>, build: &Build) {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let shapes = gen(&mut rng);
        worst = worst.max(check(seed, &shapes, build));
    }
    assert!(worst < 1e-4, "{name}: worst relative error {worst}");
}

#[test]
fn matmul_gradients() {
    suite(
        "matmul",
        |r| {
            let (n, k, m) = (dims(r), dims(r), dims(r));
            vec![vec![n, k], vec![k, m]]
        },
        &|v| v[0].matmul(&v[1]).unwrap(),
    );
}

#[test]
fn elementwise_gradients() {
    let shapes = |r: &mut ChaCha8Rng| {
        let s = vec![dims(r), dims(r)];
        vec![s.clone(), s]
    };
    suite("add", shapes, &|v| v[0].add(&v[1]).unwrap());
    suite("sub", shapes, &|v| v[0].sub(&v[1]).unwrap());
    suite("mul", shapes, &|v| v[0].mul(&v[1]).unwrap());
    suite("scale", shapes, &|v| v[0].scale(-1.7).add_scalar(0.3));
    suite("gelu", shapes, &|v| v[0].gelu(Default::default()));
    suite("gelu_tanh", shapes, &|v| v[0].gelu(mpsclip::numerics::GeluMode::Tanh));
    suite("sigmoid", shapes, &|v| v[0].sigmoid());
    suite("relu", shapes, &|v| v[0].relu());
    suite("transpose", shapes, &|v| v[0].transpose().unwrap());
}

#[test]
fn broadcast_and_reduction_gradients() {
    suite(
        "add_bias",
        |r| {
            let (n, m) = (dims(r), dims(r));
            vec![vec![n, m], vec![m]]
        },
        &|v| v[0].add_bias(&v[1]).unwrap(),
    );
    suite(
        "mul_scalar_var",
        |r| vec![vec![dims(r), dims(r)], vec![1]],
        &|v| v[0].mul_scalar_var(&v[1]).unwrap(),
    );
    suite("sum", |r| vec![vec![dims(r), dims(r)]], &|v| v[0].sum());
    suite("mean", |r| vec![vec![dims(r), dims(r)]], &|v| v[0].mean());
    suite(
        "diag",
        |r| {
            let n = dims(r);
            vec![vec![n, n]]
        },
        &|v| v[0].diag().unwrap(),
    );
}

#[test]
fn row_normalization_gradients() {
    let mat = |r: &mut ChaCha8Rng| vec![vec![dims(r), dims(r) + 1]];
    suite("softmax_rows", mat, &|v| v[0].softmax_rows().unwrap());
    suite("log_softmax_rows", mat, &|v| v[0].log_softmax_rows().unwrap());
    suite("layer_norm_rows", mat, &|v| v[0].layer_norm_rows(1e-5).unwrap());
    suite("l2_normalize_rows", mat, &|v| v[0].l2_normalize_rows(1e-8));
}

#[test]
fn indexing_gradients() {
    suite(
        "gather_rows",
        |r| vec![vec![dims(r), dims(r)]],
        &|v| {
            let n = v[0].shape()[0];
            let idx: Vec<usize> = (0..2 * n).map(|i| (i * 7 + 3) % n).collect();
            v[0].gather_rows(&idx).unwrap()
        },
    );
    suite(
        "concat_rows",
        |r| {
            let m = dims(r);
            vec![vec![dims(r), m], vec![dims(r), m]]
        },
        &|v| Var::concat_rows(v).unwrap(),
    );
    suite(
        "segment_mean",
        |r| vec![vec![dims(r) * 3, dims(r)]],
        &|v| v[0].segment_mean(3).unwrap(),
    );
    suite(
        "segment_max",
        |r| vec![vec![dims(r) * 2, dims(r)]],
        &|v| v[0].segment_max(2).unwrap(),
    );
    suite(
        "hardest_negative",
        |r| {
            let n = dims(r) + 1;
            vec![vec![n, n]]
        },
        &|v| v[0].hardest_negative().unwrap(),
    );
    suite(
        "reshape",
        |r| vec![vec![dims(r), 6]],
        &|v| {
            let n = v[0].shape()[0];
            v[0].reshape(vec![n * 2, 3]).unwrap()
        },
    );
}

#[test]
fn attention_gradients() {
    suite(
        "attention",
        |r| {
            let heads = r.random_range(1..=2);
            let d = heads * r.random_range(1..=3);
            let group = dims(r);
            let n = group * r.random_range(1..=2);
            vec![vec![n, d], vec![n, d], vec![n, d], vec![1, group, heads]]
        },
        &|v| {
            let meta = v[3].shape();
            Var::attention(&v[0], &v[1], &v[2], meta[1], meta[2]).unwrap()
        },
    );
}

#[test]
fn sum_gives_all_ones() {
    let tape = Tape::new();
    let mut x = Tensor::<f64>::zeros(&[2, 3]).with_requires_grad();
    let xv = tape.leaf(&x);
    let loss = xv.sum();
    grad(&loss, &mut [(&xv, &mut x)], false).unwrap();
    assert_eq!(x.grad().unwrap(), &[1.0; 6]);
}

#[test]
fn product_rule_and_reset() {
    let tape = Tape::new();
    let mut x = Tensor::scalar(3.0f64).with_requires_grad();
    let mut y = Tensor::scalar(-2.0f64).with_requires_grad();
    let (xv, yv) = (tape.leaf(&x), tape.leaf(&y));
    let loss = xv.mul(&yv).unwrap();
    grad(&loss, &mut [(&xv, &mut x), (&yv, &mut y)], false).unwrap();
    assert_eq!(x.grad().unwrap(), &[-2.0]);
    assert_eq!(y.grad().unwrap(), &[3.0]);
    // second call resets
    grad(&loss, &mut [(&xv, &mut x)], false).unwrap();
    assert_eq!(x.grad().unwrap(), &[-2.0]);
    // unless accumulation is requested
    grad(&loss, &mut [(&xv, &mut x)], true).unwrap();
    assert_eq!(x.grad().unwrap(), &[-4.0]);
}

#[test]
fn backward_needs_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(&Tensor::<f64>::zeros(&[2]).with_requires_grad());
    assert!(matches!(x.backward(), Err(mpsclip::Error::Shape(_))));
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let w = tape.constant(&Tensor::<f64>::full(&[2, 2], 0.5));
    let x = tape.leaf(&Tensor::<f64>::full(&[1, 2], 1.0).with_requires_grad());
    let loss = x.matmul(&w).unwrap().sum();
    let g = loss.backward().unwrap();
    assert!(g.get(&w).is_none());
    assert_eq!(g.get_slice(&x).unwrap(), &[1.0, 1.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(n in 1usize..5, m in 1usize..7, vals in proptest::collection::vec(-1e3f64..1e3, 36)) {
        let t = Tensor::new(vec![n, m], vals[..n * m].to_vec()).unwrap();
        let s = softmax_rows(&t).unwrap();
        for i in 0..n {
            let total: f64 = s.row(i).iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            prop_assert!(s.row(i).iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..5, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::randn(&[a, b], 1.0, &mut rng);
        let y = Tensor::<f64>::randn(&[b, c], 1.0, &mut rng);
        let z = Tensor::<f64>::randn(&[c, d], 1.0, &mut rng);
        let left = matmul(&matmul(&x, &y).unwrap(), &z).unwrap();
        let right = matmul(&x, &matmul(&y, &z).unwrap()).unwrap();
        for (l, r) in left.data().iter().zip(right.data()) {
            prop_assert!((l - r).abs() < 1e-9);
        }
    }

    #[test]
    fn l2_normalize_never_exceeds_one(vals in proptest::collection::vec(-1e6f64..1e6, 1..12), eps in 1e-12f64..1.0) {
        let v = mpsclip::numerics::l2_normalize(&Tensor::vector(&vals), eps);
        prop_assert!(v.norm() <= 1.0);
    }

    #[test]
    fn finite_inputs_stay_finite(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 10f64.powi(rng.random_range(-3..3));
        let x = Tensor::<f64>::randn(&[3, 4], scale, &mut rng);
        let tape = Tape::new();
        let v = tape.constant(&x);
        let out = v.gelu(Default::default()).softmax_rows().unwrap().l2_normalize_rows(1e-8)
            .layer_norm_rows(1e-5).unwrap().log_softmax_rows().unwrap().sigmoid();
        prop_assert!(out.value().is_finite());
    }
}
