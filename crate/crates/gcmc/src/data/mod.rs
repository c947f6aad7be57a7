//! Dataset ingestion, splits, and cold-start surgery.
//!
//! Ratings are stored as triples of dense 0-based user/item indices plus a
//! rating *level index*; the real-valued rating scale lives in
//! `level_values` and re-enters only when predictions are converted back to
//! rating units. This uniformly handles whole-star and half-star scales.

mod features;
mod graph;

pub use features::{
    build_side_features, identity_features, FeatureKind, FeatureSet, Gender, ItemMeta, UserMeta,
    ENCODING_VERSION, GENRE_COUNT, OCCUPATIONS,
};
pub use graph::{build_rating_graph, GraphEdge, RatingGraph};

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{derive_seed, Rng};

const SPLIT_STREAM: u64 = 0x53504c4954;
const COLDSTART_STREAM: u64 = 0x434f4c44;

/// One observed rating: dense user/item indices and the rating-level index.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RatingTriple {
    pub user: u32,
    pub item: u32,
    pub level: u8,
}

/// A loaded rating dataset with contiguous 0-based indices.
///
/// `user_ids`/`item_ids` map dense indices back to the original file ids
/// (needed to join metadata and to serve predictions keyed by original ids).
#[derive(Clone, Debug)]
pub struct RatingDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub triples: Vec<RatingTriple>,
    pub level_values: Vec<f64>,
    pub user_ids: Vec<u32>,
    pub item_ids: Vec<u32>,
    pub user_meta: Option<Vec<UserMeta>>,
    pub item_meta: Option<Vec<ItemMeta>>,
}

impl RatingDataset {
    pub fn num_levels(&self) -> usize {
        self.level_values.len()
    }

    /// Dense index of an original user id, if present.
    pub fn user_index(&self, original_id: u32) -> Option<usize> {
        self.user_ids.binary_search(&original_id).ok()
    }

    pub fn item_index(&self, original_id: u32) -> Option<usize> {
        self.item_ids.binary_search(&original_id).ok()
    }
}

/// Supported MovieLens file layouts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MovielensFormat {
    /// Tab-separated `user item rating timestamp`, whole-star ratings 1-5.
    Ml100k,
    /// `user::item::rating::timestamp`, whole-star ratings 1-5.
    Ml1m,
    /// `user::item::rating::timestamp`, half-star ratings 0.5-5.0.
    Ml10m,
}

impl MovielensFormat {
    pub fn level_values(self) -> Vec<f64> {
        match self {
            MovielensFormat::Ml100k | MovielensFormat::Ml1m => {
                (1..=5).map(f64::from).collect()
            }
            MovielensFormat::Ml10m => (1..=10).map(|i| f64::from(i) * 0.5).collect(),
        }
    }

    pub fn parse_name(name: &str) -> Result<Self> {
        match name {
            "ml100k" => Ok(MovielensFormat::Ml100k),
            "ml1m" => Ok(MovielensFormat::Ml1m),
            "ml10m" => Ok(MovielensFormat::Ml10m),
            other => Err(Error::InvalidConfig(format!(
                "unknown dataset format '{other}' (expected ml100k, ml1m, or ml10m)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            MovielensFormat::Ml100k => "ml100k",
            MovielensFormat::Ml1m => "ml1m",
            MovielensFormat::Ml10m => "ml10m",
        }
    }

    fn level_index(self, rating: f64) -> Option<u8> {
        let scaled = match self {
            MovielensFormat::Ml100k | MovielensFormat::Ml1m => rating,
            MovielensFormat::Ml10m => rating * 2.0,
        };
        let rounded = scaled.round();
        if (scaled - rounded).abs() > 1e-9 {
            return None;
        }
        let count = self.level_values().len() as f64;
        if rounded < 1.0 || rounded > count {
            return None;
        }
        Some(rounded as u8 - 1)
    }
}

/// Raw parse of one ratings file: original ids and level indices, in file order.
fn parse_ratings_file(path: &Path, format: MovielensFormat) -> Result<Vec<(u32, u32, u8)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sep: &str = match format {
        MovielensFormat::Ml100k => "\t",
        MovielensFormat::Ml1m | MovielensFormat::Ml10m => "::",
    };
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split(sep).collect();
        if fields.len() != 4 {
            return Err(parse_err(format!(
                "expected 4 fields separated by {sep:?}, got {}",
                fields.len()
            )));
        }
        let user: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad user id '{}'", fields[0])))?;
        let item: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad item id '{}'", fields[1])))?;
        if user == 0 || item == 0 {
            return Err(parse_err("ids are 1-based; got 0".into()));
        }
        let rating: f64 = fields[2]
            .parse()
            .map_err(|_| parse_err(format!("bad rating '{}'", fields[2])))?;
        let _timestamp: i64 = fields[3]
            .parse()
            .map_err(|_| parse_err(format!("bad timestamp '{}'", fields[3])))?;
        let level = format.level_index(rating).ok_or_else(|| {
            Error::Data(format!(
                "{}:{lineno}: rating {rating} outside the {} levels",
                path.display(),
                format.name()
            ))
        })?;
        out.push((user, item, level));
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no ratings", path.display())));
    }
    Ok(out)
}

fn densify(raw: &[(u32, u32, u8)]) -> (Vec<u32>, Vec<u32>, Vec<RatingTriple>) {
    let mut user_ids: Vec<u32> = raw.iter().map(|t| t.0).collect();
    user_ids.sort_unstable();
    user_ids.dedup();
    let mut item_ids: Vec<u32> = raw.iter().map(|t| t.1).collect();
    item_ids.sort_unstable();
    item_ids.dedup();
    let triples = raw
        .iter()
        .map(|&(u, i, level)| RatingTriple {
            user: user_ids.binary_search(&u).unwrap() as u32,
            item: item_ids.binary_search(&i).unwrap() as u32,
            level,
        })
        .collect();
    (user_ids, item_ids, triples)
}

fn check_no_duplicates(raw: &[(u32, u32, u8)]) -> Result<()> {
    let mut seen = HashSet::with_capacity(raw.len());
    for &(u, i, _) in raw {
        if !seen.insert((u, i)) {
            return Err(Error::Data(format!(
                "duplicate rating for user {u}, item {i}"
            )));
        }
    }
    Ok(())
}

fn assemble(
    raw: Vec<(u32, u32, u8)>,
    users_path: Option<&Path>,
    items_path: Option<&Path>,
    format: MovielensFormat,
) -> Result<RatingDataset> {
    check_no_duplicates(&raw)?;
    let (user_ids, item_ids, triples) = densify(&raw);
    let user_meta = match users_path {
        Some(p) => Some(features::load_user_meta(p, &user_ids)?),
        None => None,
    };
    let item_meta = match items_path {
        Some(p) => Some(features::load_item_meta(p, &item_ids)?),
        None => None,
    };
    Ok(RatingDataset {
        num_users: user_ids.len(),
        num_items: item_ids.len(),
        triples,
        level_values: format.level_values(),
        user_ids,
        item_ids,
        user_meta,
        item_meta,
    })
}

/// Loads one ratings file (plus optional user/item metadata) as a dataset.
pub fn load_movielens(
    ratings_path: &Path,
    users_path: Option<&Path>,
    items_path: Option<&Path>,
    format: MovielensFormat,
) -> Result<RatingDataset> {
    let raw = parse_ratings_file(ratings_path, format)?;
    assemble(raw, users_path, items_path, format)
}

/// Index lists into a dataset's triples. Train/validation/test are pairwise
/// disjoint; for internally generated splits their union covers the source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Loads a pre-split train/test file pair into one dataset sharing a single
/// id space. Triples are stored train-file-first; the returned split has an
/// empty validation list (carve one with [`split_train_val`]).
pub fn load_movielens_split(
    train_path: &Path,
    test_path: &Path,
    users_path: Option<&Path>,
    items_path: Option<&Path>,
    format: MovielensFormat,
) -> Result<(RatingDataset, SplitSpec)> {
    let train_raw = parse_ratings_file(train_path, format)?;
    let test_raw = parse_ratings_file(test_path, format)?;
    let n_train = train_raw.len();
    let mut raw = train_raw;
    raw.extend_from_slice(&test_raw);
    let ds = assemble(raw, users_path, items_path, format)?;
    let split = SplitSpec {
        train: (0..n_train).collect(),
        val: Vec::new(),
        test: (n_train..ds.triples.len()).collect(),
        seed: 0,
    };
    Ok((ds, split))
}

/// Splits `indices` into a train part of share `fraction` and a validation
/// part, by seeded shuffle. Both outputs are returned sorted.
pub fn split_train_val(indices: &[usize], fraction: f64, seed: u64) -> Result<SplitSpec> {
    if !(0.0..1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::InvalidConfig(format!(
            "train fraction must be in (0, 1), got {fraction}"
        )));
    }
    let mut shuffled = indices.to_vec();
    let mut rng = Rng::new(derive_seed(seed, SPLIT_STREAM));
    rng.shuffle(&mut shuffled);
    let n_train = ((indices.len() as f64) * fraction).round() as usize;
    let n_train = n_train.min(indices.len());
    let mut train = shuffled[..n_train].to_vec();
    let mut val = shuffled[n_train..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    Ok(SplitSpec {
        train,
        val,
        test: Vec::new(),
        seed,
    })
}

/// Cold-start surgery: picks `n_c` users uniformly among users present in
/// `train_indices` and removes all but `n_r` randomly kept training ratings
/// for each. Users that already have `n_r` or fewer ratings keep everything.
/// The relative order of the surviving indices is preserved.
pub fn coldstart_filter(
    ds: &RatingDataset,
    train_indices: &[usize],
    n_c: usize,
    n_r: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if n_c > ds.num_users {
        return Err(Error::InvalidConfig(format!(
            "n_c = {n_c} exceeds the {} users in the dataset",
            ds.num_users
        )));
    }
    if n_r == 0 {
        return Err(Error::InvalidConfig("n_r must be at least 1".into()));
    }
    if n_c == 0 {
        return Ok(train_indices.to_vec());
    }

    let mut train_users: Vec<u32> = train_indices
        .iter()
        .map(|&i| ds.triples[i].user)
        .collect();
    train_users.sort_unstable();
    train_users.dedup();
    if n_c > train_users.len() {
        return Err(Error::InvalidConfig(format!(
            "n_c = {n_c} exceeds the {} users present in the training split",
            train_users.len()
        )));
    }

    let mut rng = Rng::new(derive_seed(seed, COLDSTART_STREAM));
    let mut pool = train_users;
    rng.shuffle(&mut pool);
    let mut selected: Vec<u32> = pool[..n_c].to_vec();
    selected.sort_unstable();

    let mut keep = vec![true; train_indices.len()];
    // Iterate selected users in ascending order so the RNG consumption
    // order is independent of the shuffle outcome.
    for &user in &selected {
        let mut positions: Vec<usize> = train_indices
            .iter()
            .enumerate()
            .filter(|&(_, &ti)| ds.triples[ti].user == user)
            .map(|(pos, _)| pos)
            .collect();
        if positions.len() <= n_r {
            continue;
        }
        rng.shuffle(&mut positions);
        for &pos in &positions[n_r..] {
            keep[pos] = false;
        }
    }
    Ok(train_indices
        .iter()
        .zip(&keep)
        .filter(|&(_, &k)| k)
        .map(|(&i, _)| i)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ml100k_line_maps_to_dense_triple() {
        let f = write_temp("1\t1\t5\t874965758\n");
        let ds = load_movielens(f.path(), None, None, MovielensFormat::Ml100k).unwrap();
        assert_eq!(ds.num_users, 1);
        assert_eq!(ds.num_items, 1);
        assert_eq!(
            ds.triples,
            vec![RatingTriple {
                user: 0,
                item: 0,
                level: 4
            }]
        );
        assert_eq!(ds.level_values, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn rating_outside_levels_is_data_error() {
        let f = write_temp("1\t1\t6\t874965758\n");
        let err = load_movielens(f.path(), None, None, MovielensFormat::Ml100k).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
    }

    #[test]
    fn malformed_line_is_parse_error_with_line_number() {
        let f = write_temp("1\t1\t5\t874965758\n1\t2\tfive\t3\n");
        let err = load_movielens(f.path(), None, None, MovielensFormat::Ml100k).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other}"),
        }
    }

    #[test]
    fn duplicate_pair_rejected_at_load() {
        let f = write_temp("1\t1\t5\t0\n1\t1\t3\t1\n");
        let err = load_movielens(f.path(), None, None, MovielensFormat::Ml100k).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn ml1m_separator_and_index_densification() {
        let f = write_temp("7::100::3::956704056\n7::4::1::956704056\n");
        let ds = load_movielens(f.path(), None, None, MovielensFormat::Ml1m).unwrap();
        assert_eq!(ds.num_users, 1);
        assert_eq!(ds.num_items, 2);
        // item ids 4 and 100 densify in sorted order
        assert_eq!(ds.item_ids, vec![4, 100]);
        assert_eq!(ds.triples[0].item, 1);
        assert_eq!(ds.triples[1].item, 0);
    }

    #[test]
    fn ml10m_half_star_levels() {
        let f = write_temp("1::122::3.5::838985046\n");
        let ds = load_movielens(f.path(), None, None, MovielensFormat::Ml10m).unwrap();
        assert_eq!(ds.num_levels(), 10);
        assert_eq!(ds.triples[0].level, 6);
        assert_eq!(ds.level_values[6], 3.5);
    }

    #[test]
    fn split_is_exact_and_seed_stable() {
        let indices: Vec<usize> = (0..100).collect();
        let s1 = split_train_val(&indices, 0.8, 11).unwrap();
        assert_eq!(s1.train.len(), 80);
        assert_eq!(s1.val.len(), 20);
        let s2 = split_train_val(&indices, 0.8, 11).unwrap();
        assert_eq!(s1, s2);

        let mut union: Vec<usize> = s1.train.iter().chain(&s1.val).copied().collect();
        union.sort_unstable();
        assert_eq!(union, indices);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        assert!(split_train_val(&[0, 1], 0.0, 1).is_err());
        assert!(split_train_val(&[0, 1], 1.0, 1).is_err());
    }

    fn toy_dataset() -> RatingDataset {
        // 3 users: user 0 has 4 ratings, user 1 has 2, user 2 has 1.
        let raw: Vec<(u32, u32, u8)> = vec![
            (1, 1, 4),
            (1, 2, 2),
            (1, 3, 0),
            (1, 4, 1),
            (2, 1, 3),
            (2, 2, 0),
            (3, 1, 2),
        ];
        assemble(raw, None, None, MovielensFormat::Ml100k).unwrap()
    }

    #[test]
    fn coldstart_zero_users_is_identity() {
        let ds = toy_dataset();
        let train: Vec<usize> = (0..ds.triples.len()).collect();
        let out = coldstart_filter(&ds, &train, 0, 1, 7).unwrap();
        assert_eq!(out, train);
    }

    #[test]
    fn coldstart_trims_selected_users_and_keeps_short_ones() {
        let ds = toy_dataset();
        let train: Vec<usize> = (0..ds.triples.len()).collect();
        let out = coldstart_filter(&ds, &train, 3, 2, 7).unwrap();
        let count = |user: u32, ids: &[usize]| {
            ids.iter().filter(|&&i| ds.triples[i].user == user).count()
        };
        assert_eq!(count(0, &out), 2);
        assert_eq!(count(1, &out), 2);
        assert_eq!(count(2, &out), 1);
        let out2 = coldstart_filter(&ds, &train, 3, 2, 7).unwrap();
        assert_eq!(out, out2);
    }

    #[test]
    fn coldstart_preserves_order_and_rejects_bad_args() {
        let ds = toy_dataset();
        let train: Vec<usize> = (0..ds.triples.len()).collect();
        let out = coldstart_filter(&ds, &train, 1, 1, 3).unwrap();
        let mut sorted = out.clone();
        sorted.sort_unstable();
        assert_eq!(out, sorted);
        assert!(coldstart_filter(&ds, &train, 99, 1, 3).is_err());
        assert!(coldstart_filter(&ds, &train, 1, 0, 3).is_err());
    }
}
