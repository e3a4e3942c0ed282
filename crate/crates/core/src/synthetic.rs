//! Planted-cluster interaction generator.
//!
//! Users and items are split into `groups` equal-ish groups. Each user rates
//! an in-group item 4 or 5 with probability `p_in` and an out-of-group item
//! with probability `p_out`; a few extra ratings of 1-3 act as noise that
//! binarization removes. Items carry a `genre` attribute that names their
//! group with probability `genre_accuracy`. Timestamps are a random
//! permutation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{AttributeTable, IdMap, InteractionLog, InteractionRecord};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub groups: usize,
    pub users: usize,
    pub items: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub noise_per_user: usize,
    pub genre_accuracy: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            users: 200,
            items: 100,
            p_in: 0.08,
            p_out: 0.002,
            noise_per_user: 3,
            genre_accuracy: 1.0,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub log: InteractionLog,
    pub item_attributes: AttributeTable,
    pub user_groups: Vec<usize>,
    pub item_groups: Vec<usize>,
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData> {
    if config.groups == 0 || config.users < config.groups || config.items < config.groups {
        return Err(Error::Invalid("need at least one user and item per group".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let user_groups: Vec<usize> = (0..config.users).map(|u| u % config.groups).collect();
    let item_groups: Vec<usize> = (0..config.items).map(|i| i % config.groups).collect();

    let mut pairs: Vec<(usize, usize, u8)> = Vec::new();
    for u in 0..config.users {
        let mut rated = vec![false; config.items];
        for i in 0..config.items {
            let p = if user_groups[u] == item_groups[i] { config.p_in } else { config.p_out };
            if rng.random_bool(p) {
                pairs.push((u, i, rng.random_range(4..=5)));
                rated[i] = true;
            }
        }
        let mut unrated: Vec<usize> = (0..config.items).filter(|&i| !rated[i]).collect();
        unrated.shuffle(&mut rng);
        for &i in unrated.iter().take(config.noise_per_user) {
            pairs.push((u, i, rng.random_range(1..=3)));
        }
    }
    let mut times: Vec<u64> = (0..pairs.len() as u64).collect();
    times.shuffle(&mut rng);

    let users = IdMap::from_external((0..config.users).map(|u| format!("u{u}")))?;
    let items = IdMap::from_external((0..config.items).map(|i| format!("i{i}")))?;
    let mut records: Vec<InteractionRecord> = pairs
        .into_iter()
        .zip(times)
        .map(|((user, item, rating), timestamp)| InteractionRecord {
            user,
            item,
            rating,
            timestamp,
        })
        .collect();
    records.sort_by_key(|r| r.timestamp);

    let values = item_groups
        .iter()
        .map(|&g| {
            let genre = if rng.random_bool(config.genre_accuracy) {
                g
            } else {
                (g + rng.random_range(1..config.groups.max(2))) % config.groups
            };
            vec![Some(format!("g{genre}"))]
        })
        .collect();
    Ok(SyntheticData {
        log: InteractionLog { records, users, items },
        item_attributes: AttributeTable {
            families: vec!["genre".into()],
            values,
        },
        user_groups,
        item_groups,
    })
}
