use proptest::prelude::*;

use vip_core::prompt_space::{
    kernel_matrix, median_bandwidth, EmbeddingRecord, KernelCache, PromptSet,
};

fn rows(max_q: usize, dim: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, dim), 2..=max_q)
}

fn set(rows: &[Vec<f64>]) -> PromptSet {
    PromptSet::from_rows(rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn kernel_is_symmetric_with_unit_diagonal(r in rows(24, 4), h in 0.1f64..20.0) {
        let k = kernel_matrix(&set(&r), h).unwrap();
        for i in 0..k.len() {
            prop_assert_eq!(k.get(i, i), 1.0);
            for j in 0..i {
                prop_assert_eq!(k.get(i, j), k.get(j, i));
                prop_assert!(k.get(i, j) >= 0.0 && k.get(i, j) <= 1.0);
            }
        }
    }

    #[test]
    fn kernel_matches_direct_formula(r in rows(12, 3), h in 0.1f64..20.0) {
        let k = kernel_matrix(&set(&r), h).unwrap();
        for i in 0..r.len() {
            for j in 0..r.len() {
                let sq: f64 = r[i].iter().zip(&r[j]).map(|(a, b)| (a - b).powi(2)).sum();
                let expected = (-sq / (2.0 * h * h)).exp();
                prop_assert!((k.get(i, j) - expected).abs() <= 1e-14);
            }
        }
    }

    #[test]
    fn kernel_is_permutation_equivariant(r in rows(16, 3), h in 0.1f64..20.0, seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<usize> = (0..r.len()).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let shuffled: Vec<Vec<f64>> = perm.iter().map(|&i| r[i].clone()).collect();
        let k = kernel_matrix(&set(&r), h).unwrap();
        let kp = kernel_matrix(&set(&shuffled), h).unwrap();
        for a in 0..r.len() {
            for b in 0..r.len() {
                prop_assert_eq!(kp.get(a, b), k.get(perm[a], perm[b]));
            }
        }
    }

    #[test]
    fn median_ignores_order_and_translation(r in rows(20, 3), shift in prop::collection::vec(-5.0f64..5.0, 3)) {
        let base = median_bandwidth(&set(&r));
        prop_assume!(base.is_ok());
        let base = base.unwrap();
        let mut rev = r.clone();
        rev.reverse();
        prop_assert_eq!(median_bandwidth(&set(&rev)).unwrap(), base);
        let moved: Vec<Vec<f64>> = r.iter().map(|x| x.iter().zip(&shift).map(|(a, b)| a + b).collect()).collect();
        let m = median_bandwidth(&set(&moved)).unwrap();
        prop_assert!((m - base).abs() <= 1e-12 * base.max(1.0));
    }

    #[test]
    fn median_matches_sorted_pairs(r in rows(15, 2)) {
        let mut d = Vec::new();
        for i in 0..r.len() {
            for j in 0..i {
                d.push(r[i].iter().zip(&r[j]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
            }
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        let expected = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
        prop_assume!(expected > 0.0);
        let got = median_bandwidth(&set(&r)).unwrap();
        prop_assert!((got - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn blocks_reassemble_the_kernel(r in rows(16, 3), mask in prop::collection::vec(any::<bool>(), 16)) {
        let k = kernel_matrix(&set(&r), 2.0).unwrap();
        let mut batch: Vec<usize> = (0..r.len()).filter(|&i| mask[i]).collect();
        prop_assume!(!batch.is_empty());
        batch.reverse();
        let b = k.blocks(&batch).unwrap();
        prop_assert_eq!(b.batch.len() + b.complement.len(), r.len());
        for (x, &i) in b.batch.iter().enumerate() {
            for (y, &j) in b.batch.iter().enumerate() {
                prop_assert_eq!(b.batch_batch[(x, y)], k.get(i, j));
            }
            for (y, &j) in b.complement.iter().enumerate() {
                prop_assert_eq!(b.complement_batch[(y, x)], k.get(j, i));
            }
        }
        for (x, &i) in b.complement.iter().enumerate() {
            for (y, &j) in b.complement.iter().enumerate() {
                prop_assert_eq!(b.complement_complement[(x, y)], k.get(i, j));
            }
        }
    }

    #[test]
    fn cache_round_trips_bit_exactly(r in rows(20, 5), h in prop::option::of(0.1f64..20.0)) {
        let s = set(&r);
        let cache = match KernelCache::build(&s, h) {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        let back = KernelCache::from_bytes(&cache.to_bytes()).unwrap();
        prop_assert_eq!(&back, &cache);
        prop_assert_eq!(back.hash(), cache.hash());
        back.verify(&s).unwrap();
        prop_assert_eq!(back.kernel().unwrap(), cache.kernel().unwrap());
    }
}

#[test]
fn cache_file_round_trip_and_rejections() {
    let s = set(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![6.0, 8.0]]);
    let cache = KernelCache::build(&s, None).unwrap();
    assert_eq!(cache.bandwidth, 5.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("k.vipk");
    cache.write(&path).unwrap();
    let back = KernelCache::read(&path).unwrap();
    assert_eq!(back, cache);

    let mut bytes = cache.to_bytes();
    bytes[4] = 9;
    assert_eq!(
        KernelCache::from_bytes(&bytes).unwrap_err().code(),
        vip_core::ErrorCode::Version
    );
    let bytes = cache.to_bytes();
    assert!(KernelCache::from_bytes(&bytes[..bytes.len() - 3]).is_err());

    let other = set(&[vec![0.0, 0.0], vec![3.0, 4.0], vec![6.0, 8.5]]);
    assert!(cache.verify(&other).is_err());
}

#[test]
fn records_reject_duplicates_and_ragged_rows() {
    let rec = |id: &str, e: Vec<f64>| EmbeddingRecord {
        id: id.into(),
        embedding: e,
    };
    assert!(PromptSet::new(vec![rec("a", vec![1.0]), rec("a", vec![2.0])]).is_err());
    assert!(PromptSet::new(vec![rec("a", vec![1.0]), rec("b", vec![2.0, 3.0])]).is_err());
    let s = PromptSet::new(vec![rec("b", vec![1.0]), rec("a", vec![2.0])]).unwrap();
    assert_eq!(s.index_of("a"), Some(1));
    assert_eq!(s.ids(), ["b", "a"]);
}

#[test]
fn coincident_prompts_need_an_explicit_bandwidth() {
    let s = set(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
    assert!(median_bandwidth(&s).is_err());
    let k = kernel_matrix(&s, 1.0).unwrap();
    assert_eq!(k.get(0, 2), 1.0);
}
