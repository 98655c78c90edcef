use std::collections::BTreeMap;

use proptest::prelude::*;

use hiermoe::encoder::{assign_topk, encode, validate_assignment, Encoder, HierarchyConfig};
use hiermoe::harness::{cosine, rand_index, spearman, Checkpoint, MetricsReport, RunConfig};
use hiermoe::routers::{guide_distribution, kl_penalty};
use hiermoe::tensor::{softmax_rows, ParamStore, RngStream, Tensor};
use hiermoe::world::{
    gen_dataset, gen_subject, gen_world, load_dataset, save_dataset, DatasetManifest, WorldSpec, FORMAT_VERSION,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn topk_is_a_balanced_partition(n in 1usize..60, e in 1usize..9, seed in any::<u64>()) {
        prop_assume!(e <= n);
        let p = softmax_rows(&RngStream::new(seed, 0).normal_tensor(n, e, 2.0)).unwrap();
        let sets = assign_topk(&p, 1.0).unwrap();
        let mut seen = vec![0; n];
        for s in &sets {
            prop_assert!(s.len() == n / e || s.len() == n / e + 1);
            for &i in s {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
        prop_assert_eq!(sets.iter().filter(|s| s.len() == n / e + 1).count(), if n % e == 0 { 0 } else { n % e });
    }

    #[test]
    fn encoder_routing_keeps_its_invariants(
        levels in 1usize..4,
        root in 1usize..4,
        branching in 1usize..4,
        extra in 0usize..40,
        seed in any::<u64>(),
    ) {
        let cfg = HierarchyConfig { levels, root_experts: root, branching, d_embed: 8, d_f: 4, d_u: 3, ..HierarchyConfig::default() };
        let v = cfg.experts_at(levels - 1) + extra;
        let mut store = ParamStore::new();
        let mut rng = RngStream::new(seed, 0);
        let enc = Encoder::init(cfg.clone(), v, &mut store, &mut rng).unwrap();
        let (_, h) = encode(&rng.normals(v), &enc, &store).unwrap();
        prop_assert!(validate_assignment(&h, &cfg, v).is_ok());
    }

    #[test]
    fn rand_index_is_a_symmetric_relabeling_invariant_score(
        a in prop::collection::vec(0usize..4, 2..40),
        seed in any::<u64>(),
    ) {
        let mut rng = RngStream::new(seed, 0);
        let b: Vec<usize> = a.iter().map(|_| rng.below(5) as usize).collect();
        let ab = rand_index(&a, &b).unwrap();
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(ab, rand_index(&b, &a).unwrap());
        prop_assert_eq!(rand_index(&a, &a).unwrap(), 1.0);
        let relabeled: Vec<usize> = a.iter().map(|&x| 10 + 3 * (3 - x)).collect();
        prop_assert_eq!(rand_index(&relabeled, &b).unwrap(), ab);
    }

    #[test]
    fn spearman_is_bounded_and_rank_based(xs in prop::collection::vec(-100.0f64..100.0, 3..30), seed in any::<u64>()) {
        let ys = RngStream::new(seed, 0).normals(xs.len());
        let r = spearman(&xs, &ys).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
        prop_assert!((r - spearman(&ys, &xs).unwrap()).abs() < 1e-12);
        // strictly increasing transforms leave ranks alone
        let cubed: Vec<f64> = xs.iter().map(|x| x.powi(3) + 1.0).collect();
        prop_assert!((r - spearman(&cubed, &ys).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn cosine_ignores_positive_scale(a in prop::collection::vec(-5.0f64..5.0, 1..16), s in 0.01f64..100.0) {
        let b: Vec<f64> = a.iter().rev().copied().collect();
        let c = cosine(&a, &b);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        let scaled: Vec<f64> = a.iter().map(|x| s * x).collect();
        prop_assert!((c - cosine(&scaled, &b)).abs() < 1e-9);
    }

    #[test]
    fn guide_is_a_distribution_and_kl_is_nonnegative(
        tau in 0usize..30,
        levels in 1usize..7,
        sigma in 0.2f64..4.0,
        seed in any::<u64>(),
    ) {
        let q = guide_distribution(tau as f64, 30, levels, sigma);
        prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(q.iter().all(|&x| x > 0.0));
        let p = softmax_rows(&RngStream::new(seed, 0).normal_tensor(1, levels, 1.0)).unwrap();
        prop_assert!(kl_penalty(p.data(), &q).unwrap() >= 0.0);
        prop_assert!(kl_penalty(&q, &q).unwrap().abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn dataset_files_round_trip_exactly(n in 1usize..20, subject in 0u64..4, seed in any::<u64>()) {
        let spec = WorldSpec { groups: 4, voxels: 16, latent: 3, target: 8, ..WorldSpec::default() };
        let world = gen_world(&spec).unwrap();
        let ds = gen_dataset(&world, &gen_subject(&world, subject), n, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.mrbd");
        let manifest = DatasetManifest { format_version: FORMAT_VERSION, spec, subject, data_seed: seed, n: n as u64 };
        save_dataset(&path, &ds, &manifest).unwrap();
        prop_assert_eq!(load_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn checkpoints_round_trip_bit_exactly(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..6), seed in any::<u64>()) {
        let mut rng = RngStream::new(seed, 0);
        let mut store = ParamStore::new();
        for (k, &(r, c)) in shapes.iter().enumerate() {
            let mut t = rng.normal_tensor(r, c, 1e3);
            t.data_mut()[0] = f64::MIN_POSITIVE / 2.0; // subnormals survive too
            store.add(format!("p{k}"), t);
        }
        let metrics: BTreeMap<String, f64> = [("x".to_string(), 0.1)].into();
        let mut ck = Checkpoint::new("test", RunConfig::default(), 3, metrics, store);
        let dir = tempfile::tempdir().unwrap();
        let path = ck.save(dir.path(), "ck").unwrap();
        let back = Checkpoint::load(&path).unwrap();
        prop_assert_eq!(back.fingerprint(""), ck.fingerprint(""));
        prop_assert_eq!(back.manifest, ck.manifest);
    }

    #[test]
    fn metrics_json_round_trips(values in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let mut m = MetricsReport::default();
        for (i, v) in values.iter().enumerate() {
            m.push("s", i as u64, *v);
        }
        m.set("last", *values.last().unwrap());
        let back: MetricsReport = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        prop_assert_eq!(back, m);
    }
}

#[test]
fn tensor_shapes_are_checked() {
    assert!(Tensor::matrix(2, 3, vec![0.0; 5]).is_err());
}
