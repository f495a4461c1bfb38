use std::collections::HashSet;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use transferbound::attacks::{attack, lambda_optimal, pgd, solve_fixed_point, StepSize};
use transferbound::capacity::{
    capacity_substitute, capacity_target, kappa, layer_norm, lipschitz_product,
};
use transferbound::data::{gen_gaussian_mixture, split_half, split_train_test, split_validation};
use transferbound::io::{decode_model, encode_model, from_kv, to_kv};
use transferbound::linalg::{norm_2_1, project_l2, project_linf, svd_bruteforce};
use transferbound::metrics::{transferability_rate, Eligibility};
use transferbound::specreg::normalize_layer;
use transferbound::trainer::train_erm;
use transferbound::{
    Activation, Architecture, AttackSpec, BoxDomain, Loss, Matrix, Network, SpectralCap,
    TrainConfig,
};

fn gaussian(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
}

fn matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    Matrix::new(rows, cols, gaussian(seed, rows * cols)).unwrap()
}

fn arb_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..=max_len)
}

fn arb_activation() -> impl Strategy<Value = Activation> {
    prop_oneof![
        Just(Activation::Tanh),
        Just(Activation::Identity),
        (0.5f64..4.0).prop_map(|s| Activation::softplus(s).unwrap()),
    ]
}

/// A small seeded network with 1–3 layers of width ≤ 8.
fn arb_net() -> impl Strategy<Value = Network> {
    (
        prop::collection::vec(1usize..=8, 2..=4),
        arb_activation(),
        any::<u64>(),
    )
        .prop_map(|(mut widths, act, seed)| {
            let last = widths.len() - 1;
            widths[last] = widths[last].max(2);
            Architecture::new(widths, act).unwrap().init(seed)
        })
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn projections_are_idempotent_and_non_expansive(v in arb_vec(12), r in 0.0f64..5.0) {
        let p = project_l2(&v, r);
        prop_assert_eq!(&*project_l2(&p, r), &*p);
        prop_assert!(p.norm_l2() <= l2(&v) + 1e-12);
        prop_assert!(p.norm_l2() <= r * (1.0 + 1e-12));
        let q = project_linf(&v, r);
        prop_assert_eq!(&*project_linf(&q, r), &*q);
        prop_assert!(q.norm_linf() <= r);
        prop_assert!(q.norm_linf() <= v.iter().fold(0.0f64, |m, x| m.max(x.abs())));
    }

    #[test]
    fn two_one_norm_dominates_max_row_norm(rows in 1usize..10, cols in 1usize..10, seed: u64) {
        let m = matrix(seed, rows, cols);
        prop_assert!(norm_2_1(&m) >= m.max_row_norm());
        prop_assert!(m.max_row_norm() >= 0.0);
    }

    #[test]
    fn zero_fixed_activations_map_zero_to_zero(net in arb_net()) {
        let out = net.forward(&vec![0.0; net.input_dim()]).unwrap();
        prop_assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn lipschitz_product_bounds_output_differences(net in arb_net(), seed: u64) {
        let lw: f64 = net
            .layers()
            .iter()
            .map(|l| l.activation.lipschitz() * svd_bruteforce(&l.weights).unwrap())
            .product();
        let d = net.input_dim();
        let x = gaussian(seed, d);
        let x2 = gaussian(seed ^ 1, d);
        let out = net.forward(&x).unwrap().sub(&net.forward(&x2).unwrap());
        let dist: f64 = x.iter().zip(&x2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(out.norm_l2() <= lw * dist * (1.0 + 1e-12) + 1e-12);
    }

    #[test]
    fn brier_metadata_holds(k in 2usize..6, y_seed: u64, seed: u64, scale in 0.01f64..20.0) {
        let y = (y_seed % k as u64) as usize;
        let z1: Vec<f64> = gaussian(seed, k).iter().map(|v| v * scale).collect();
        let z2: Vec<f64> = gaussian(seed ^ 7, k).iter().map(|v| v * scale).collect();
        let loss = Loss::Brier;
        let dz = l2(&z1.iter().zip(&z2).map(|(a, b)| a - b).collect::<Vec<_>>());
        let (l1, l2v) = (loss.value(&z1, y), loss.value(&z2, y));
        prop_assert!((0.0..=loss.bound().unwrap()).contains(&l1));
        prop_assert!((l1 - l2v).abs() <= loss.lipschitz().unwrap() * dz + 1e-12);
        let g = loss.gradient(&z1, y).unwrap().sub(&loss.gradient(&z2, y).unwrap());
        prop_assert!(g.norm_l2() <= loss.smoothness().unwrap() * dz + 1e-12);
    }

    #[test]
    fn attacks_respect_their_budget(net in arb_net(), seed: u64, eps in 0.0f64..2.0, method in 0usize..4) {
        let x = gaussian(seed, net.input_dim());
        let y = (seed % net.output_dim() as u64) as usize;
        let spec = match method {
            0 => AttackSpec::fgm(eps),
            1 => AttackSpec::fgsm(eps),
            2 => AttackSpec::pgd_l2(eps, 7),
            _ => AttackSpec::pgd_linf(eps, 7),
        };
        let r = attack(&spec, &net, Loss::CrossEntropy, &x, y, None).unwrap();
        let size = match method {
            0 | 2 => r.delta.norm_l2(),
            _ => r.delta.norm_linf(),
        };
        prop_assert!(size <= eps + 1e-9);

        let again = attack(&spec, &net, Loss::CrossEntropy, &x, y, None).unwrap();
        prop_assert_eq!(&*again.delta, &*r.delta);
    }

    #[test]
    fn attacks_stay_in_a_declared_domain(net in arb_net(), seed: u64, eps in 0.0f64..2.0) {
        let d = net.input_dim();
        let x: Vec<f64> = gaussian(seed, d).iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let dom = BoxDomain::uniform(d, -1.0, 1.0);
        for spec in [AttackSpec::fgsm(eps), AttackSpec::pgd_l2(eps, 5)] {
            let r = attack(&spec, &net, Loss::CrossEntropy, &x, 0, Some(&dom)).unwrap();
            prop_assert!(r.delta.add(&x).iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_step_pgd_equals_fgm(net in arb_net(), seed: u64, eps in 0.01f64..2.0, extra in 1.0f64..3.0) {
        let x = gaussian(seed, net.input_dim());
        let spec = AttackSpec::pgd_l2(eps, 1).with_step_size(StepSize::Fixed(eps * extra));
        let p = pgd(&net, Loss::CrossEntropy, &x, 0, &spec, None).unwrap();
        let f = attack(&AttackSpec::fgm(eps), &net, Loss::CrossEntropy, &x, 0, None).unwrap();
        for (a, b) in p.delta.iter().zip(f.delta.iter()) {
            prop_assert!((a - b).abs() <= 1e-15 * eps.max(1.0));
        }
    }

    #[test]
    fn fixed_point_gaps_contract(seed: u64, d in 2usize..5, h in 3usize..10) {
        let net = Architecture::new(vec![d, h, 3], Activation::Tanh).unwrap().init(seed);
        let loss = Loss::Brier;
        let lambda = 2.0 * kappa(&net, loss).unwrap();
        let x = gaussian(seed, d);
        let fp = solve_fixed_point(|u| net.input_gradient(loss, u, 1), &x, lambda, &vec![0.0; d], 1e-13, 500)
            .unwrap();
        prop_assert!(fp.converged);
        for w in fp.gaps.windows(2).skip(3) {
            if w[0] > 1e-11 {
                prop_assert!(w[1] / w[0] <= 0.5 + 0.05);
            }
        }
        let r = lambda_optimal(&net, loss, &x, 1, lambda, 1e-10, 500).unwrap();
        prop_assert!(r.delta.norm_l2() <= lipschitz_product(&net) / lambda + 1e-10);
    }

    #[test]
    fn normalization_is_idempotent_and_equivariant(rows in 1usize..10, cols in 1usize..10, seed: u64, beta in 0.1f64..3.0) {
        let w = matrix(seed, rows, cols);
        let cap = SpectralCap::new(beta).unwrap();
        let once = normalize_layer(&w, cap, 1e-12).unwrap();
        let twice = normalize_layer(&once, cap, 1e-12).unwrap();
        for (a, b) in once.data().iter().zip(twice.data()) {
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1e-300));
        }
        prop_assert!(svd_bruteforce(&once).unwrap() <= beta * (1.0 + 1e-6));
        if svd_bruteforce(&w).unwrap() > beta {
            let unit = normalize_layer(&w, SpectralCap::new(1.0).unwrap(), 1e-12).unwrap();
            let unit_norm = svd_bruteforce(&w).unwrap() > 1.0;
            if unit_norm {
                for (a, b) in once.data().iter().zip(unit.data()) {
                    prop_assert!((a - beta * b).abs() <= 1e-9 * a.abs().max(1e-12));
                }
            }
        }
    }

    #[test]
    fn capped_networks_have_bounded_lipschitz_product(widths in prop::collection::vec(2usize..8, 2..5), seed: u64, beta in 0.2f64..2.0) {
        let net = Architecture::new(widths, Activation::Tanh).unwrap().init(seed);
        let cap = SpectralCap::new(beta).unwrap();
        let capped = transferbound::specreg::normalize_network(&net, cap).unwrap();
        let lw: f64 = capped.weights().map(|w| svd_bruteforce(w).unwrap()).product();
        prop_assert!(lw <= beta.powi(capped.depth() as i32) * (1.0 + 1e-6));
    }

    #[test]
    fn capacities_are_permutation_invariant(d in 2usize..5, h in 3usize..8, seed: u64, a in 0usize..8, b in 0usize..8) {
        let net = Architecture::new(vec![d, h, 3], Activation::Tanh).unwrap().init(seed);
        let (a, b) = (a % h, b % h);
        let mut w0 = net.layers()[0].weights.clone();
        let mut w1 = net.layers()[1].weights.clone();
        w0.swap_rows(a, b);
        w1.swap_cols(a, b);
        let perm = net.with_layer_weights(0, w0).unwrap().with_layer_weights(1, w1).unwrap();
        let close = |p: f64, q: f64| (p - q).abs() <= 1e-9 * p.abs().max(1.0);
        prop_assert!(close(kappa(&net, Loss::Brier).unwrap(), kappa(&perm, Loss::Brier).unwrap()));
        prop_assert!(close(lipschitz_product(&net), lipschitz_product(&perm)));
        prop_assert!(close(capacity_substitute(&net).unwrap(), capacity_substitute(&perm).unwrap()));
        prop_assert!(close(capacity_target(&net).unwrap(), capacity_target(&perm).unwrap()));
        let x = gaussian(seed, d);
        for (p, q) in net.forward(&x).unwrap().iter().zip(perm.forward(&x).unwrap().iter()) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0));
        }
    }

    #[test]
    fn layer_norm_agrees_with_oracle(rows in 1usize..17, cols in 1usize..17, seed: u64) {
        let m = matrix(seed, rows, cols);
        let exact = svd_bruteforce(&m).unwrap();
        prop_assert!((layer_norm(&m) - exact).abs() <= 1e-6 * exact);
    }

    #[test]
    fn model_files_round_trip(net in arb_net(), seed: u64) {
        let bytes = encode_model(&net, &serde_json::json!({"seed": seed})).unwrap();
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(&back.network, &net);
        let x = gaussian(seed, net.input_dim());
        prop_assert_eq!(&*back.network.forward(&x).unwrap(), &*net.forward(&x).unwrap());
    }

    #[test]
    fn train_configs_round_trip_through_kv(epochs in 1usize..500, lr in 1e-6f64..1.0, beta in prop::option::of(0.1f64..5.0), seed: u64, eps in 0.0f64..1.0) {
        let cfg = TrainConfig {
            epochs,
            optimizer: transferbound::Optimizer::adam(lr),
            spectral_cap: beta.map_or(SpectralCap::none(), |b| SpectralCap::new(b).unwrap()),
            adversarial: Some(AttackSpec::pgd_linf(eps, 9)),
            seed,
            ..TrainConfig::default()
        };
        let text = to_kv(&cfg).unwrap();
        prop_assert_eq!(from_kv::<TrainConfig>(&text).unwrap(), cfg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_are_seeded_partitions(n in 20usize..300, classes in 2usize..5, seed: u64, frac in 0.1f64..0.9) {
        let data = gen_gaussian_mixture(classes, 2, 1.0, n.max(classes), seed).unwrap();
        let n = data.len();
        let check = |a: &transferbound::Dataset, b: &transferbound::Dataset| {
            let ia: HashSet<_> = a.lineage().indices.iter().collect();
            let ib: HashSet<_> = b.lineage().indices.iter().collect();
            ia.is_disjoint(&ib) && a.len() + b.len() == n && !a.lineage().overlaps(b.lineage())
        };
        let (a, b) = split_half(&data, seed).unwrap();
        prop_assert!(check(&a, &b));
        prop_assert_eq!(split_half(&data, seed).unwrap(), (a, b));
        let (a, b) = split_validation(&data, frac, seed).unwrap();
        prop_assert!(check(&a, &b));
        let (a, b) = split_train_test(&data, frac, seed).unwrap();
        prop_assert!(check(&a, &b));
    }

    #[test]
    fn transferability_rate_is_a_fraction(seed: u64, eps in 0.0f64..3.0) {
        let data = gen_gaussian_mixture(3, 2, 2.0, 60, seed).unwrap();
        let sub = Architecture::new(vec![2, 6, 3], Activation::Tanh).unwrap().init(seed);
        let tgt = Architecture::new(vec![2, 5, 3], Activation::Tanh).unwrap().init(seed ^ 3);
        match transferability_rate(&sub, &tgt, &AttackSpec::fgm(eps), Loss::CrossEntropy, &data, Eligibility::CleanCorrect) {
            Ok(r) => {
                prop_assert!((0.0..=1.0).contains(&r.rate));
                prop_assert!(r.n_fooled <= r.n_eligible);
            }
            Err(e) => prop_assert!(matches!(e, transferbound::Error::EmptyDenominator)),
        }
    }

    #[test]
    fn training_is_deterministic(seed: u64) {
        let data = gen_gaussian_mixture(2, 2, 3.0, 80, seed).unwrap();
        let arch = Architecture::new(vec![2, 5, 2], Activation::Tanh).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 16, seed, ..TrainConfig::default() };
        prop_assert_eq!(train_erm(&data, &arch, &cfg).unwrap(), train_erm(&data, &arch, &cfg).unwrap());
    }
}

/// One-dimensional logistic toy: the target shares the substitute's decision
/// boundary at 0, so FGSM fools exactly the samples with margin below ε.
#[test]
fn fgsm_transfer_rate_is_monotone_on_logistic_toy() {
    let w = Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
    let net = Network::from_weights(vec![w], Activation::Identity).unwrap();
    let xs: Vec<transferbound::Vector> = (1..=40)
        .map(|i| vec![if i % 2 == 0 { 0.05 * i as f64 } else { -0.05 * i as f64 }].into())
        .collect();
    let ys: Vec<usize> = (1..=40).map(|i| usize::from(i % 2 == 0)).collect();
    let data = transferbound::Dataset::new(
        xs,
        ys,
        2,
        transferbound::Lineage::root("toy", 0, 40),
    )
    .unwrap();
    let mut prev = 0.0;
    for k in 0..=25 {
        let eps = 0.1 * k as f64;
        let r = transferability_rate(
            &net,
            &net,
            &AttackSpec::fgsm(eps),
            Loss::CrossEntropy,
            &data,
            Eligibility::CleanCorrect,
        )
        .unwrap();
        assert!(r.rate >= prev, "rate fell from {prev} to {} at ε = {eps}", r.rate);
        prev = r.rate;
    }
    assert_eq!(prev, 1.0);
}

/// Convex case: one linear layer under the Brier loss.
#[test]
fn convex_training_loss_does_not_increase() {
    let data = gen_gaussian_mixture(3, 4, 2.0, 600, 11).unwrap();
    let arch = Architecture::new(vec![4, 3], Activation::Identity).unwrap();
    let cfg = TrainConfig {
        epochs: 10,
        loss: Loss::Brier,
        seed: 12,
        ..TrainConfig::default()
    };
    let (_, report) = train_erm(&data, &arch, &cfg).unwrap();
    for w in report.epochs.windows(2) {
        assert!(w[1].train_loss <= w[0].train_loss, "{} -> {}", w[0].train_loss, w[1].train_loss);
    }
}
