use std::collections::HashSet;

use edgeforest::idspace::*;
use proptest::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn split_inverts_make(m in 1u32..=16, p in any::<u32>(), s in any::<u128>()) {
        let cfg = ZoneConfig::new(m).unwrap();
        let prefix = (p as u128) & ((1u128 << m) - 1);
        let suffix = s & cfg.suffix_mask();
        let id = make_node_id(prefix, suffix, &cfg).unwrap();
        prop_assert_eq!(id.split(&cfg), (prefix as u32, suffix));
    }

    #[test]
    fn ring_distance_is_a_metric(a in any::<u128>(), b in any::<u128>(), c in any::<u128>()) {
        prop_assert_eq!(ring_distance(a, b), ring_distance(b, a));
        prop_assert_eq!(ring_distance(a, b) == 0, a == b);
        prop_assert!(ring_distance(a, b) <= 1u128 << 127);
        // Two half-ring distances can sum to 2^128, which trivially bounds any distance.
        if let Some(sum) = ring_distance(a, b).checked_add(ring_distance(b, c)) {
            prop_assert!(ring_distance(a, c) <= sum);
        }
    }

    #[test]
    fn hex_form_round_trips(x in any::<u128>()) {
        let id = NodeId(x);
        prop_assert_eq!(id.to_hex().parse::<NodeId>().unwrap(), id);
        prop_assert_eq!(id.to_hex().len(), 32);
    }
}

#[test]
fn app_ids_are_distinct_and_uniform() {
    let ids: Vec<AppId> = (0..10_000).map(|i| app_id(&format!("app-{i}"), b"key", b"")).collect();
    let unique: HashSet<AppId> = ids.iter().copied().collect();
    assert_eq!(unique.len(), ids.len());

    let chi = ChiSquared::new(15.0).unwrap();
    for shift in [124u32, 120] {
        let mut bins = [0f64; 16];
        for id in &ids {
            bins[((id.0 >> shift) & 0xf) as usize] += 1.0;
        }
        let expected = ids.len() as f64 / 16.0;
        let stat: f64 = bins.iter().map(|o| (o - expected).powi(2) / expected).sum();
        let p = 1.0 - chi.cdf(stat);
        assert!(p > 0.001, "nibble at bit {shift}: chi2 {stat}, p {p}");
    }
}

#[test]
fn ring_distance_edges() {
    assert_eq!(ring_distance(5, 5), 0);
    assert_eq!(ring_distance(0, 1 << 127), 1 << 127);
    assert_eq!(ring_distance(1, u128::MAX), 2);
}
