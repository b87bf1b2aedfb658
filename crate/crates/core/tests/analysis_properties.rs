use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use cobformer_core::analysis::*;
use cobformer_core::graph::{edge_homophily, Graph};
use cobformer_core::model::{Cobformer, ModelConfig, ModelInputs};
use cobformer_core::nn::normalized_adjacency;
use cobformer_core::partition::{partition_multilevel, Partition};
use cobformer_core::synth::{generate_homophilic_graph, SynthSpec};
use cobformer_core::tensor::{softmax_rows, Matrix, ParamStore, Tape};

const RHOS: [f64; 6] = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9];

#[test]
fn closed_form_matches_the_recursion() {
    for y in 2..=7 {
        for &rho in &RHOS {
            for k in 0..=50 {
                let a = theoretical_cuk(rho, y, k);
                let b = theoretical_cuk_closed(rho, y, k);
                assert!((a - b).abs() < 1e-12, "ρ={rho} |Y|={y} k={k}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn homophilic_profiles_decrease_and_heterophilic_ones_alternate() {
    for y in 2..=7 {
        let base = 1.0 / y as f64;
        for &rho in &RHOS {
            let d = |k| theoretical_cuk_deviation(rho, y, k);
            if rho == 0.0 && y == 2 {
                // r = −1: the profile alternates between 1 and 0 forever.
                for k in 0..20 {
                    assert_eq!(theoretical_cuk(rho, y, 2 * k), 1.0);
                    assert_eq!(theoretical_cuk(rho, y, 2 * k + 1), 0.0);
                }
                continue;
            }
            let r = cuk_ratio(rho, y);
            assert!(r.abs() < 1.0);
            for k in 0..30 {
                if r > 0.0 {
                    assert!(d(k) > d(k + 1) && d(k + 1) > 0.0, "ρ={rho} |Y|={y} k={k}");
                } else if r < 0.0 {
                    assert!(d(2 * k) > 0.0 && d(2 * k + 1) < 0.0);
                    assert!(d(2 * k + 2) < d(2 * k) && d(2 * k + 3) > d(2 * k + 1));
                } else {
                    assert_eq!(theoretical_cuk(rho, y, k + 1), base);
                }
            }
        }
    }
}

#[test]
fn empirical_profile_follows_theory_on_a_large_graph() {
    let spec = SynthSpec { num_nodes: 6000, num_classes: 3, target_rho: 0.7, avg_degree: 6.0, seed: 8 };
    let ds = generate_homophilic_graph(&spec).unwrap();
    let rho = edge_homophily(&ds.graph, &ds.data.labels).unwrap();
    let prof = empirical_cuk(&ds.graph, &ds.data.labels, 3);
    for k in 1..=3 {
        let emp = prof.mean[k].unwrap();
        let th = theoretical_cuk(rho, 3, k);
        assert!((emp - th).abs() < 0.05, "k={k}: {emp} vs {th}");
    }
}

fn random_view(n: usize, p: usize, seed: u64) -> (AttnView, Vec<usize>, Graph) {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut assign: Vec<usize> = (0..n).map(|u| u % p).collect();
    for i in (1..n).rev() {
        assign.swap(i, rng.gen_range(0..=i));
    }
    let part = Partition::from_assignment(assign, p, f64::INFINITY).unwrap();
    let logits = |r, c, rng: &mut Xoshiro256StarStar| softmax_rows(&Matrix::from_fn(r, c, |_, _| rng.gen_range(-2.0..2.0)));
    let intra = part.members().iter().map(|m| logits(m.len(), m.len(), &mut rng)).collect();
    let inter = logits(p, p, &mut rng);
    let labels = (0..n).map(|_| rng.gen_range(0..3)).collect();
    let edges: Vec<_> = (0..2 * n).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
    let graph = Graph::from_edges(n, edges).unwrap().0;
    (AttnView::Bga { partition: part, intra, inter, layer: 0 }, labels, graph)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn attention_distance_profile_conserves_mass(n in 4usize..40, p in 1usize..5, k in 0usize..5, seed: u64) {
        prop_assume!(p <= n);
        let (view, _, g) = random_view(n, p, seed);
        prop_assert!(view.max_row_sum_error() < 1e-12);
        let prof = attn_k_profile(&view, &g, k);
        prop_assert!(prof.max_conservation_error < 1e-12);
        prop_assert!((prof.bins.iter().sum::<f64>() + prof.overflow - 1.0).abs() < 1e-12);
    }

    #[test]
    fn denoising_never_lowers_snr(n in 6usize..40, p in 1usize..4, factor in 1.0f64..8.0, seed: u64) {
        prop_assume!(p <= n);
        let (view, labels, _) = random_view(n, p, seed);
        let before = attn_snr(&view, &labels).unwrap();
        let after = attn_snr(&denoise_attention(&view, &labels, factor).unwrap(), &labels).unwrap();
        prop_assert!(after.snr_db >= before.snr_db - 1e-9);
    }

    #[test]
    fn doubling_same_label_mass_adds_three_decibels(same in 1e-6f64..1e3, diff in 1e-6f64..1e3) {
        let a = snr_from_masses(same, diff).unwrap().snr_db;
        let b = snr_from_masses(2.0 * same, diff).unwrap().snr_db;
        prop_assert!((b - a - 10.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn attention_gradient_identity_holds(n in 3usize..30, classes in 2usize..4, seed: u64) {
        let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
        let q = Matrix::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0));
        let k = Matrix::from_fn(n, 4, |_, _| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..classes)).collect();
        let rep = thm31_identity(&q, &k, &labels).unwrap();
        prop_assert_eq!(rep.nodes.len(), n);
        prop_assert!(rep.max_gap < 1e-10, "gap {}", rep.max_gap);
    }
}

#[test]
fn constant_rows_have_zero_smoothness_residual() {
    let (view, _, _) = random_view(20, 3, 1);
    let z = Matrix::from_fn(20, 5, |_, c| c as f64 - 2.0);
    assert!(smoothness_frobenius(&z, &view).unwrap() < 1e-12);
    let varied = Matrix::from_fn(20, 5, |r, c| (r * c) as f64);
    assert!(smoothness_frobenius(&varied, &view).unwrap() > 1.0);
}

#[test]
fn captured_model_attention_is_stochastic_and_costs_what_it_should() {
    let spec = SynthSpec { num_nodes: 120, num_classes: 3, target_rho: 0.8, avg_degree: 4.0, seed: 2 };
    let ds = generate_homophilic_graph(&spec).unwrap();
    let part = partition_multilevel(&ds.graph, 5, 0.1, 0).unwrap();
    let mut store = ParamStore::new();
    let cfg = ModelConfig { hidden: 8, gcn_hidden: 8, num_bga_layers: 2, num_heads: 2, ..ModelConfig::default() };
    let model = Cobformer::new(&mut store, cfg, ds.data.features.cols(), 3, 0).unwrap();
    let inputs = ModelInputs {
        features: ds.data.features.clone(),
        adjacency: normalized_adjacency(&ds.graph),
        partition: part.clone(),
    };
    let mut t = Tape::no_grad();
    let out = model.forward(&mut t, &store, &inputs, true).unwrap();
    assert_eq!(out.captures.len(), 2);
    assert_eq!(out.attention_cost, 2 * attention_cost(&part));
    for (layer, cap) in out.captures.iter().enumerate() {
        let view = AttnView::from_capture(&part, cap, layer);
        assert!(view.max_row_sum_error() < 1e-12);
        let prof = attn_k_profile(&view, &ds.graph, 4);
        assert!(prof.max_conservation_error < 1e-12);
        let snr = attn_snr(&view, &ds.data.labels).unwrap();
        assert!(snr.snr_db.is_finite());
    }
}
