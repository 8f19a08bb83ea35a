//! Small synthetic datasets for tests, benches and smoke runs.

use std::collections::BTreeMap;

use rand::Rng;

use crate::data::{temporal_split, Group, RatingRecord, RatingTable, SensitiveAssignment, SensitiveAttribute, SplitFractions, SplitTable};
use crate::rng::substream;

/// A random low-rank rating matrix over `users × items`, observed with
/// probability `density`, split chronologically 80/10/10. Even user ids
/// are S0 and odd ones S1. Every user rates at least ten items, or all of them when there are fewer.
pub fn synthetic(users: u32, items: u32, density: f64, seed: u64) -> (SplitTable, SensitiveAssignment) {
    let mut rng = substream(seed, "fixtures", &[]);
    let uf: Vec<[f64; 2]> = (0..users).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let vf: Vec<[f64; 2]> = (0..items).map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let mut records = Vec::new();
    for u in 0..users {
        for k in 0..items {
            // rotate so the guaranteed items differ between users
            let item = (k + u) % items;
            if k < 10 || rng.random_bool(density) {
                let (a, b) = (uf[u as usize], vf[item as usize]);
                let score = 3.0 + 1.5 * (a[0] * b[0] + a[1] * b[1]);
                records.push(RatingRecord {
                    user: u,
                    item,
                    rating: score.round().clamp(1.0, 5.0),
                    timestamp: rng.random_range(0..100_000),
                });
            }
        }
    }
    let table = RatingTable::new(records).expect("synthetic ratings are valid");
    let split = temporal_split(&table, SplitFractions::default()).expect("default fractions are valid");
    let groups: BTreeMap<_, _> = (0..users)
        .map(|u| (u, if u % 2 == 0 { Group::S0 } else { Group::S1 }))
        .collect();
    (split, SensitiveAssignment::new(SensitiveAttribute::Gender, groups))
}
