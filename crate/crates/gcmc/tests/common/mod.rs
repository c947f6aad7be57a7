//! Synthetic dataset builders shared by the integration suites.
// Not every test binary uses every helper.
#![allow(dead_code)]

pub mod gradcheck;
pub mod naive_encoder;

use gcmc::data::{Gender, ItemMeta, RatingDataset, RatingTriple, UserMeta, GENRE_COUNT};
use gcmc::tensor::Rng;

/// Random bipartite rating data: every (user, item) pair is rated with
/// probability `density`, levels uniform. Metadata is filled in so side
/// features always work. Valued 1..=R.
pub fn synthetic(
    num_users: usize,
    num_items: usize,
    num_levels: usize,
    density: f64,
    rng: &mut Rng,
) -> RatingDataset {
    let mut triples = Vec::new();
    for u in 0..num_users {
        for i in 0..num_items {
            if rng.next_f64() < density {
                triples.push(RatingTriple {
                    user: u as u32,
                    item: i as u32,
                    level: rng.below(num_levels) as u8,
                });
            }
        }
    }
    let user_meta = (0..num_users)
        .map(|_| UserMeta {
            age: 18.0 + rng.below(50) as f64,
            gender: if rng.bernoulli(0.5) { Gender::M } else { Gender::F },
            occupation: rng.below(21) as u8,
        })
        .collect();
    let item_meta = (0..num_items)
        .map(|_| {
            let mut genres = [false; GENRE_COUNT];
            for g in &mut genres {
                *g = rng.bernoulli(0.2);
            }
            genres[0] |= true;
            ItemMeta { genres }
        })
        .collect();
    RatingDataset {
        num_users,
        num_items,
        triples,
        level_values: (1..=num_levels).map(|v| v as f64).collect(),
        user_ids: (1..=num_users as u32).collect(),
        item_ids: (1..=num_items as u32).collect(),
        user_meta: Some(user_meta),
        item_meta: Some(item_meta),
    }
}

/// Synthetic data where every user has rated at least `min_per_user`
/// items, so splits never orphan a user.
pub fn synthetic_connected(
    num_users: usize,
    num_items: usize,
    num_levels: usize,
    min_per_user: usize,
    density: f64,
    rng: &mut Rng,
) -> RatingDataset {
    let mut ds = synthetic(num_users, num_items, num_levels, density, rng);
    let mut rated: Vec<Vec<u32>> = vec![Vec::new(); num_users];
    for t in &ds.triples {
        rated[t.user as usize].push(t.item);
    }
    for (u, items) in rated.iter().enumerate() {
        let mut have = items.len();
        let mut next_item = 0u32;
        while have < min_per_user {
            if !items.contains(&next_item)
                && !ds
                    .triples
                    .iter()
                    .any(|t| t.user == u as u32 && t.item == next_item)
            {
                ds.triples.push(RatingTriple {
                    user: u as u32,
                    item: next_item,
                    level: rng.below(num_levels) as u8,
                });
                have += 1;
            }
            next_item += 1;
        }
    }
    ds.triples.sort_by_key(|t| (t.user, t.item));
    ds
}

/// Shuffled split of `0..n` into train and held-out index lists.
pub fn split_indices(n: usize, train_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let cut = ((n as f64) * train_fraction).round() as usize;
    let (a, b) = idx.split_at(cut.min(n));
    let mut train = a.to_vec();
    let mut rest = b.to_vec();
    train.sort_unstable();
    rest.sort_unstable();
    (train, rest)
}
