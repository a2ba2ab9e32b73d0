use proptest::prelude::*;
use xfields::gradcore::Tensor;
use xfields::model::{consistency_weights, ConsistencyConfig, JacobianMap};
use xfields::trainer::neighbor_select;
use xfields::XFieldCoord;

fn coord(v: Vec<f64>) -> XFieldCoord {
    XFieldCoord::new(v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn weights_sum_to_one(
        sigma in 0.1f64..50.0,
        n in 1usize..6,
        jac in prop::collection::vec(-4.0f64..4.0, 4 * 4 * 2 * 6),
        xs in prop::collection::vec(0.0f64..1.0, 7),
    ) {
        let x = coord(vec![xs[0]]);
        let sources: Vec<XFieldCoord> = (0..n).map(|i| coord(vec![xs[i + 1]])).collect();
        let mut next = 0;
        let w = consistency_weights(&x, &sources, |_| {
            let t = Tensor::new([4, 4, 2], jac[next * 32..next * 32 + 32].to_vec()).unwrap();
            next = (next + 1) % 6;
            JacobianMap::from_tensor(t, 1).unwrap()
        }, ConsistencyConfig { sigma }).unwrap();
        for p in 0..16 {
            let s: f64 = w.iter().map(|m| m.data()[p]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn neighbors_are_distinct_and_exclude_target(
        pts in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..12),
        k_frac in 0.0f64..1.0,
    ) {
        let pool: Vec<XFieldCoord> = pts.iter().map(|&(a, b)| coord(vec![a, b])).collect();
        let k = 1 + ((pool.len() - 2) as f64 * k_frac) as usize;
        let chosen = neighbor_select(&pool[0], &pool, k).unwrap();
        prop_assert_eq!(chosen.len(), k);
        let mut sorted = chosen.clone();
        sorted.sort_unstable();
        sorted.dedup();
        prop_assert_eq!(sorted.len(), k);
        prop_assert!(!chosen.contains(&0));
        // Nothing left out is strictly closer than something chosen.
        let worst_in = chosen.iter().map(|&i| pool[i].distance_sq(&pool[0])).fold(0.0, f64::max);
        for i in 1..pool.len() {
            if !chosen.contains(&i) {
                prop_assert!(pool[i].distance_sq(&pool[0]) >= worst_in);
            }
        }
    }

    #[test]
    fn clamp_is_idempotent(v in prop::collection::vec(-3.0f64..3.0, 1..5)) {
        let c = XFieldCoord::clamped(&v).unwrap();
        prop_assert_eq!(c.clamp(), c.clone());
        prop_assert!(c.values().iter().all(|x| (0.0..=1.0).contains(x)));
    }
}
