use p2v::refiner::*;
use p2v::tensor_io::Volume3D;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> RefinerConfig {
    RefinerConfig { base_channels: 4, disc_channels: 4, epochs: 2, seed: 3, ..RefinerConfig::default() }
}

fn random_volume(r: &mut ChaCha8Rng, d: usize, h: usize, w: usize) -> Volume3D {
    Volume3D::new(d, h, w, (0..d * h * w).map(|_| r.random_range(0.0..1.0)).collect()).unwrap()
}

/// Direct definition: -[y ln s + (1 - y) ln(1 - s)], s = 1 / (1 + e^-l).
fn bce_oracle(logits: &[f64], y: f64) -> f64 {
    logits
        .iter()
        .map(|&l| {
            let s = 1.0 / (1.0 + (-l).exp());
            -(y * s.ln() + (1.0 - y) * (1.0 - s).ln())
        })
        .sum::<f64>()
        / logits.len() as f64
}

#[test]
fn adversarial_losses_at_zero_logits() {
    let zero = PatchScores::constant([1, 4, 4], 0.0);
    let ln2 = std::f64::consts::LN_2;
    assert!((adversarial_loss_g(&zero) - ln2).abs() < 1e-12);
    assert!((adversarial_loss_d(&zero, &zero) - 2.0 * ln2).abs() < 1e-12);
}

#[test]
fn adversarial_loss_limits() {
    let fooled = PatchScores::constant([1, 2, 2], -40.0);
    assert!(adversarial_loss_g(&fooled) > 39.0);
    let real = PatchScores::constant([1, 2, 2], 40.0);
    let d = adversarial_loss_d(&real, &fooled);
    assert!(d >= 0.0 && d < 1e-15, "{d}");
}

#[test]
fn bce_matches_the_direct_formula() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let logits: Vec<f64> = (0..16).map(|_| r.random_range(-6.0..6.0)).collect();
        for y in [0.0, 1.0] {
            let (l, _) = bce_with_logits(&logits, y);
            assert!((l - bce_oracle(&logits, y)).abs() < 1e-12);
        }
    }
}

#[test]
fn l1_examples() {
    let a = Volume3D::constant(2, 4, 4, 0.0).unwrap();
    let b = Volume3D::constant(2, 4, 4, 1.0).unwrap();
    assert_eq!(l1_fidelity(&a, &a).unwrap(), 0.0);
    assert_eq!(l1_fidelity(&a, &b).unwrap(), 1.0);
    let v = Volume3D::constant(2, 4, 4, 0.25).unwrap();
    let shifted = Volume3D::constant(2, 4, 4, 0.35).unwrap();
    assert!((l1_fidelity(&v, &shifted).unwrap() - 0.1).abs() < 1e-7);
    let other = Volume3D::constant(2, 4, 8, 0.0).unwrap();
    assert!(l1_fidelity(&a, &other).is_err());
}

#[test]
fn objective_combines_adversarial_and_l1() {
    let logits = vec![0.0; 16];
    let real = vec![0.0; 32];
    let pred = vec![0.1; 32];
    let (l, _, _) = refiner_objective_grad(&logits, &real, &pred, 10.0);
    assert!((l - (std::f64::consts::LN_2 + 1.0)).abs() < 1e-8, "{l}");

    let zero = PatchScores::constant([1, 4, 4], 0.0);
    let a = Volume3D::constant(2, 4, 4, 0.0).unwrap();
    let b = Volume3D::constant(2, 4, 4, 0.1).unwrap();
    let via_volumes = refiner_objective(&zero, &a, &b, 10.0).unwrap();
    assert!((via_volumes - 1.693_147_18).abs() < 1e-6);
    assert_eq!(refiner_objective(&zero, &a, &b, 0.0).unwrap(), adversarial_loss_g(&zero));
    assert!(refiner_objective(&zero, &a, &b, -1.0).is_err());
}

#[test]
fn objective_gradient_matches_central_differences() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let n = 2 * 4 * 4;
    let logits: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
    let real: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let pred: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
    let alpha = 10.0;
    let (_, dl, dp) = refiner_objective_grad(&logits, &real, &pred, alpha);
    let h = 1e-6;
    let f = |l: &[f64], p: &[f64]| refiner_objective_grad(l, &real, p, alpha).0;
    let mut worst: f64 = 0.0;
    for i in 0..logits.len() {
        let (mut a, mut b) = (logits.clone(), logits.clone());
        a[i] += h;
        b[i] -= h;
        let num = (f(&a, &pred) - f(&b, &pred)) / (2.0 * h);
        worst = worst.max((num - dl[i]).abs() / num.abs().max(dl[i].abs()).max(1e-12));
    }
    for i in 0..n {
        let (mut a, mut b) = (pred.clone(), pred.clone());
        a[i] += h;
        b[i] -= h;
        let num = (f(&logits, &a) - f(&logits, &b)) / (2.0 * h);
        worst = worst.max((num - dp[i]).abs() / num.abs().max(dp[i].abs()).max(1e-12));
    }
    assert!(worst < 1e-4, "{worst}");
}

/// floor((n + 2p - k) / s) + 1 per layer, an axis of one voxel stays one.
fn grid_oracle(dims: [usize; 3]) -> [usize; 3] {
    dims.map(|mut n| {
        for _ in 0..4 {
            n = if n + 2 >= 4 { (n + 2 - 4) / 2 + 1 } else { 1 };
        }
        n
    })
}

#[test]
fn patch_grids() {
    assert_eq!(patch_grid([8, 64, 64]).unwrap(), [1, 4, 4]);
    assert_eq!(patch_grid([32, 256, 256]).unwrap(), [2, 16, 16]);
    for dims in [[8, 16, 16], [8, 32, 48], [16, 64, 32], [24, 40, 56]] {
        assert_eq!(patch_grid(dims).unwrap(), grid_oracle(dims), "{dims:?}");
    }
    assert!(patch_grid([8, 8, 64]).is_err());
}

#[test]
fn discriminator_output_follows_the_grid() {
    let mut r = ChaCha8Rng::seed_from_u64(2);
    for dims in [[8, 64, 64], [8, 16, 24]] {
        let refiner = Refiner::new(small_config(), dims).unwrap();
        let v = random_volume(&mut r, dims[0], dims[1], dims[2]);
        let s = refiner.discriminate(&v, None).unwrap();
        assert_eq!(s.dims, patch_grid(dims).unwrap());
        assert_eq!(s.logits.len(), s.dims.iter().product::<usize>());
    }
    let big = p2v::refiner::PatchDiscriminator::new(1, 1, 0);
    let mut g = p2v_nn::Graph::new(false);
    let x = g.input(p2v_nn::Tensor::zeros(&[1, 1, 32, 256, 256]));
    let y = big.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 16, 16]);
}

#[test]
fn discriminator_is_local() {
    let refiner = Refiner::new(small_config(), [8, 64, 64]).unwrap();
    let base = Volume3D::constant(8, 64, 64, 0.0).unwrap();
    let mut vals = base.values().to_vec();
    for z in 0..8 {
        for y in 56..64 {
            for x in 56..64 {
                vals[(z * 64 + y) * 64 + x] = 1.0;
            }
        }
    }
    let changed = Volume3D::new(8, 64, 64, vals).unwrap();
    let a = refiner.discriminate(&base, None).unwrap();
    let b = refiner.discriminate(&changed, None).unwrap();
    assert_eq!(a.logits[0], b.logits[0], "far patch must not see the change");
    assert_ne!(a.logits[15], b.logits[15], "covering patch must see it");
}

#[test]
fn refiner_preserves_shape_and_range() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let refiner = Refiner::new(small_config(), [8, 64, 64]).unwrap();
    let v = random_volume(&mut r, 8, 64, 64);
    let out = refiner.refine(&v, 1).unwrap();
    assert_eq!(out.dims(), (8, 64, 64));
    assert!(out.values().iter().all(|x| x.is_finite() && (0.0..=1.0).contains(x)));
    assert_eq!(out, refiner.refine(&v, 1).unwrap());
    assert!(refiner.refine(&random_volume(&mut r, 8, 32, 32), 1).is_err());
    assert!(Refiner::new(small_config(), [6, 64, 64]).is_err());
}

#[test]
fn training_reduces_l1_and_round_trips() {
    let mut r = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<_> = (0..4)
        .map(|_| {
            let real = random_volume(&mut r, 8, 16, 16);
            let blurred = Volume3D::clamped(8, 16, 16, real.values().iter().map(|v| 0.5 + 0.3 * (v - 0.5)).collect()).unwrap();
            (blurred, real)
        })
        .collect();
    let cfg = RefinerConfig { epochs: 6, lr: 1e-3, ..small_config() };
    let (refiner, history) = train_refiner(&pairs, &cfg).unwrap();
    assert_eq!(history.epochs(), 6);
    assert_eq!(history.columns, ["loss_total", "adv_g", "l1", "loss_d"]);
    let l1 = history.column("l1").unwrap();
    assert!(l1.last() < l1.first(), "{l1:?}");
    assert!(history.column("loss_d").unwrap().iter().all(|v| v.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("refiner.p2ck");
    refiner.save(&path).unwrap();
    let back = Refiner::load(&path).unwrap();
    assert_eq!(back.refine(&pairs[0].0, 9).unwrap(), refiner.refine(&pairs[0].0, 9).unwrap());
    assert!(train_refiner(&[], &cfg).is_err());
}

#[test]
fn training_is_deterministic() {
    let mut r = ChaCha8Rng::seed_from_u64(12);
    let pairs: Vec<_> = (0..2).map(|_| (random_volume(&mut r, 8, 16, 16), random_volume(&mut r, 8, 16, 16))).collect();
    let (a, ha) = train_refiner(&pairs, &small_config()).unwrap();
    let (b, hb) = train_refiner(&pairs, &small_config()).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(a.refine(&pairs[1].0, 2).unwrap(), b.refine(&pairs[1].0, 2).unwrap());
}

#[test]
fn histogram_distance() {
    let a = Volume3D::constant(2, 4, 4, 0.0).unwrap();
    let b = Volume3D::constant(2, 4, 4, 1.0).unwrap();
    let (ha, hb) = (intensity_histogram(&a, 32), intensity_histogram(&b, 32));
    assert_eq!(ha[0], 1.0);
    assert_eq!(hb[31], 1.0);
    assert_eq!(histogram_l1(&ha, &hb), 2.0);
    assert_eq!(histogram_l1(&ha, &ha), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn discriminator_loss_is_nonnegative(real in prop::collection::vec(-20.0f32..20.0, 4), fake in prop::collection::vec(-20.0f32..20.0, 4)) {
        let r = PatchScores { dims: [1, 2, 2], logits: real };
        let f = PatchScores { dims: [1, 2, 2], logits: fake };
        prop_assert!(adversarial_loss_d(&r, &f) >= 0.0);
        prop_assert!(adversarial_loss_g(&f) >= 0.0);
    }
}
