use ldpfl_core::data::{
    dirichlet_partition, load_idx, normalize_histogram, synth_blobs, tv_distance, Dataset, PartitionConfig,
};
use ldpfl_core::models::{Model, ModelSpec};
use proptest::prelude::*;

fn multiset(ds: &[&Dataset]) -> Vec<(Vec<u64>, usize)> {
    let mut out: Vec<(Vec<u64>, usize)> = ds
        .iter()
        .flat_map(|d| (0..d.len()).map(move |i| (d.row(i).iter().map(|v| v.to_bits()).collect(), d.labels()[i])))
        .collect();
    out.sort();
    out
}

fn mean_tv(ds: &Dataset, alpha: f64, seed: u64, n: usize) -> f64 {
    let global = normalize_histogram(&ds.label_histogram());
    let p = dirichlet_partition(ds, &PartitionConfig { num_clients: n, alpha, seed }).unwrap();
    let tvs: Vec<f64> = p
        .shards
        .iter()
        .filter(|s| !s.is_empty())
        .map(|s| tv_distance(&normalize_histogram(&s.label_histogram()), &global))
        .collect();
    tvs.iter().sum::<f64>() / tvs.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn partition_preserves_samples(seed in any::<u64>(), n in 1usize..8, alpha in 0.05f64..100.0) {
        let ds = synth_blobs(3, 2, 15, 1.0, seed ^ 0xabc).unwrap();
        let p = dirichlet_partition(&ds, &PartitionConfig { num_clients: n, alpha, seed }).unwrap();
        prop_assert_eq!(p.shards.len(), n);
        let parts: Vec<&Dataset> = p.shards.iter().collect();
        prop_assert_eq!(multiset(&parts), multiset(&[&ds]));
        let empty: Vec<usize> = (0..n).filter(|&i| p.shards[i].is_empty()).collect();
        prop_assert_eq!(p.empty_clients, empty);
    }
}

#[test]
fn partition_is_deterministic() {
    let ds = synth_blobs(4, 2, 30, 1.0, 1).unwrap();
    let cfg = PartitionConfig { num_clients: 5, alpha: 0.5, seed: 17 };
    let a = dirichlet_partition(&ds, &cfg).unwrap();
    let b = dirichlet_partition(&ds, &cfg).unwrap();
    for (x, y) in a.shards.iter().zip(&b.shards) {
        assert_eq!(x, y);
    }
}

#[test]
fn huge_alpha_is_near_iid() {
    // per-client counts are multinomial, so the TV floor shrinks with shard size
    let ds = synth_blobs(10, 1, 10_000, 1.0, 3).unwrap();
    let global = normalize_histogram(&ds.label_histogram());
    let p = dirichlet_partition(&ds, &PartitionConfig { num_clients: 10, alpha: 1e6, seed: 8 }).unwrap();
    for s in &p.shards {
        let tv = tv_distance(&normalize_histogram(&s.label_histogram()), &global);
        assert!(tv <= 0.02, "tv {tv}");
    }
}

#[test]
fn smaller_alpha_means_more_skew() {
    let ds = synth_blobs(10, 2, 100, 1.0, 3).unwrap();
    let seeds = 0..20u64;
    let skewed: f64 = seeds.clone().map(|s| mean_tv(&ds, 1.0, s, 10)).sum::<f64>() / 20.0;
    let flat: f64 = seeds.map(|s| mean_tv(&ds, 500.0, s, 10)).sum::<f64>() / 20.0;
    assert!(skewed > flat, "{skewed} vs {flat}");
}

#[test]
fn single_client_holds_everything() {
    let ds = synth_blobs(3, 2, 10, 1.0, 3).unwrap();
    let p = dirichlet_partition(&ds, &PartitionConfig { num_clients: 1, alpha: 1.0, seed: 0 }).unwrap();
    assert_eq!(p.shards[0], ds);
}

#[test]
fn blobs_deterministic_balanced_and_separable() {
    let a = synth_blobs(4, 3, 25, 0.0, 6).unwrap();
    assert_eq!(a, synth_blobs(4, 3, 25, 0.0, 6).unwrap());
    assert_eq!(a.label_histogram(), vec![25; 4]);
    let batch = a.batch().unwrap();
    let model = Model::new(ModelSpec::logistic(3, 4)).unwrap();
    let mut theta = model.zeros();
    for _ in 0..2000 {
        let g = model.grad(&theta, &batch).unwrap();
        theta = theta.sub(&g.scale(1.0).unwrap()).unwrap();
    }
    assert_eq!(model.error_rate(&theta, &batch).unwrap(), 0.0);
}

#[test]
fn bundled_mnist_subset_loads() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k");
    let ds = load_idx(root.join("images-idx3-ubyte.gz"), root.join("labels-idx1-ubyte.gz")).unwrap();
    assert_eq!((ds.len(), ds.input_dim(), ds.num_classes()), (5000, 784, 10));
    assert!(ds.inputs().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

/// Full MNIST training files, when available under `MNIST_DIR`.
#[test]
#[ignore = "needs the full MNIST files in MNIST_DIR"]
fn full_mnist_train_files() {
    let dir = std::path::PathBuf::from(std::env::var("MNIST_DIR").expect("MNIST_DIR"));
    let ds = load_idx(dir.join("train-images-idx3-ubyte"), dir.join("train-labels-idx1-ubyte")).unwrap();
    assert_eq!((ds.len(), ds.input_dim()), (60000, 784));
}
