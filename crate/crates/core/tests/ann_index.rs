use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use retro_core::ann::{brute_force_search, AnnIndex, IndexConfig, QueryParams};

fn unit_vectors(n: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n * dim);
    for _ in 0..n {
        let v: Vec<f32> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

fn small_index(n: usize, config: &IndexConfig, seed: u64) -> (AnnIndex, Vec<f32>) {
    let data = unit_vectors(n, 16, seed);
    let mut idx = AnnIndex::train(&data, 16, config).unwrap();
    let ids: Vec<u64> = (0..n as u64).collect();
    idx.add(&data, &ids).unwrap();
    (idx, data)
}

fn small_config() -> IndexConfig {
    IndexConfig {
        ncentroids: 32,
        m_sub: 4,
        nprobe_default: 4,
        hnsw_degree: 8,
        opq_iters: 2,
        pq_iters: 8,
        kmeans_iters: 10,
        ..Default::default()
    }
}

#[test]
fn conservation_and_deterministic_add() {
    let config = small_config();
    let (idx, data) = small_index(3000, &config, 1);
    assert_eq!(idx.lists().total(), 3000);
    let mut again = AnnIndex::train(&data, 16, &config).unwrap();
    again.add(&data, &(0..3000).collect::<Vec<u64>>()).unwrap();
    assert_eq!(idx, again);
}

#[test]
fn full_beam_assignment_matches_exhaustive() {
    let config = IndexConfig {
        hnsw_ef_search: 32,
        ..small_config()
    };
    let (idx, data) = small_index(2000, &config, 2);
    assert!(idx.coarse().graph().is_base_connected());
    for v in data.chunks(16) {
        let r = idx.rotation().apply(v);
        assert_eq!(idx.assign(v), idx.coarse().exhaustive_nearest(&r));
    }
}

#[test]
fn serialization_roundtrip() {
    let (idx, _) = small_index(1500, &small_config(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("index.bin");
    let sum1 = idx.save(&path).unwrap();
    let back = AnnIndex::load(&path).unwrap();
    assert_eq!(idx, back);
    assert_eq!(sum1, back.save(&dir.path().join("again.bin")).unwrap());
    let queries = unit_vectors(20, 16, 99);
    for q in queries.chunks(16) {
        let p = QueryParams::k(5);
        assert_eq!(idx.search(q, &p).unwrap().hits, back.search(q, &p).unwrap().hits);
    }
    assert!(AnnIndex::from_bytes(&idx.to_bytes()[..100]).is_err());
}

#[test]
fn full_probe_with_full_rerank_is_exact() {
    let (idx, data) = small_index(2000, &small_config(), 4);
    let queries = unit_vectors(30, 16, 5);
    for q in queries.chunks(16) {
        let p = QueryParams::k(10).with_nprobe(32).with_rerank(2000).with_top_n(10);
        let got = idx.search(q, &p).unwrap();
        assert_eq!(got.lists_probed, 32);
        assert_eq!(got.hits, brute_force_search(&data, 16, q, 10).unwrap());
    }
}

#[test]
fn probe_counter_bounded_by_nprobe() {
    let (idx, _) = small_index(2000, &small_config(), 6);
    let before = idx.probe_count();
    let queries = unit_vectors(10, 16, 7);
    for q in queries.chunks(16) {
        let r = idx.search(q, &QueryParams::k(3).with_nprobe(5)).unwrap();
        assert!(r.lists_probed <= 5);
    }
    assert!(idx.probe_count() - before <= 50);
}

#[test]
fn nprobe_recall_is_monotone_on_average() {
    let (idx, data) = small_index(4000, &small_config(), 8);
    let queries = unit_vectors(40, 16, 9);
    let mut prev = 0.0;
    for nprobe in [1, 2, 4, 8, 16, 32] {
        let mut hits = 0usize;
        for q in queries.chunks(16) {
            let truth: Vec<u64> = brute_force_search(&data, 16, q, 10).unwrap().iter().map(|h| h.0).collect();
            let got = idx.search(q, &QueryParams::k(10).with_nprobe(nprobe).with_rerank(100)).unwrap();
            hits += got.hits.iter().filter(|h| truth.contains(&h.0)).count();
        }
        let recall = hits as f64 / 400.0;
        assert!(recall + 1e-12 >= prev, "nprobe {nprobe}: {recall} < {prev}");
        prev = recall;
    }
}
