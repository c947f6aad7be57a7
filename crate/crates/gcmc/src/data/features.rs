//! Node input features: one-hot identity or encoded side information.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::data::RatingDataset;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Bumped whenever the fixed feature layouts below change shape or meaning.
/// Stored in checkpoints so stale models are rejected instead of silently
/// fed differently encoded inputs.
pub const ENCODING_VERSION: u32 = 1;

/// Occupation vocabulary, alphabetical; one-hot position = index here.
pub const OCCUPATIONS: [&str; 21] = [
    "administrator",
    "artist",
    "doctor",
    "educator",
    "engineer",
    "entertainment",
    "executive",
    "healthcare",
    "homemaker",
    "lawyer",
    "librarian",
    "marketing",
    "none",
    "other",
    "programmer",
    "retired",
    "salesman",
    "scientist",
    "student",
    "technician",
    "writer",
];

/// Number of genre flags in the item metadata file.
pub const GENRE_COUNT: usize = 19;

const USER_SIDE_DIM: usize = 1 + 2 + OCCUPATIONS.len();

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Gender {
    M,
    F,
}

/// One user's raw demographic record. `occupation` indexes [`OCCUPATIONS`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserMeta {
    pub age: f64,
    pub gender: Gender,
    pub occupation: u8,
}

/// One item's raw genre record, in metadata-file flag order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ItemMeta {
    pub genres: [bool; GENRE_COUNT],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    /// Each node is its own one-hot; feature dim equals node count.
    IdentityOnehot,
    /// Encoded metadata vectors (age/gender/occupation, genre flags).
    SideInfo,
}

/// Input feature matrices for both sides of the graph.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub user_features: DenseMatrix,
    pub item_features: DenseMatrix,
    pub kind: FeatureKind,
}

/// One-hot identity features: row i of each matrix is e_i.
pub fn identity_features(ds: &RatingDataset) -> FeatureSet {
    FeatureSet {
        user_features: DenseMatrix::identity(ds.num_users),
        item_features: DenseMatrix::identity(ds.num_items),
        kind: FeatureKind::IdentityOnehot,
    }
}

/// Encodes loaded metadata into dense side-information features.
///
/// Users get 24 dims: age/100, then a 2-slot gender one-hot (M, F), then a
/// 21-slot occupation one-hot. Items get the 19 genre flags as 0/1 values.
pub fn build_side_features(ds: &RatingDataset) -> Result<FeatureSet> {
    let user_meta = ds.user_meta.as_ref().ok_or_else(|| {
        Error::InvalidConfig("side features requested but no user metadata was loaded".into())
    })?;
    let item_meta = ds.item_meta.as_ref().ok_or_else(|| {
        Error::InvalidConfig("side features requested but no item metadata was loaded".into())
    })?;

    let mut users = DenseMatrix::zeros(ds.num_users, USER_SIDE_DIM);
    for (i, m) in user_meta.iter().enumerate() {
        let row = users.row_mut(i);
        row[0] = m.age / 100.0;
        match m.gender {
            Gender::M => row[1] = 1.0,
            Gender::F => row[2] = 1.0,
        }
        row[3 + m.occupation as usize] = 1.0;
    }

    let mut items = DenseMatrix::zeros(ds.num_items, GENRE_COUNT);
    for (i, m) in item_meta.iter().enumerate() {
        let row = items.row_mut(i);
        for (slot, &flag) in row.iter_mut().zip(&m.genres) {
            *slot = f64::from(u8::from(flag));
        }
    }

    Ok(FeatureSet {
        user_features: users,
        item_features: items,
        kind: FeatureKind::SideInfo,
    })
}

/// Parses the pipe-separated user metadata file and aligns records to the
/// dense user index order given by sorted `user_ids`.
pub(super) fn load_user_meta(path: &Path, user_ids: &[u32]) -> Result<Vec<UserMeta>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut by_id: HashMap<u32, UserMeta> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('|').collect();
        if fields.len() != 5 {
            return Err(parse_err(format!("expected 5 fields, got {}", fields.len())));
        }
        let id: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(format!("bad user id '{}'", fields[0])))?;
        let age: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(format!("bad age '{}'", fields[1])))?;
        let gender = match fields[2] {
            "M" => Gender::M,
            "F" => Gender::F,
            other => return Err(parse_err(format!("bad gender '{other}'"))),
        };
        let occupation = OCCUPATIONS
            .iter()
            .position(|&o| o == fields[3])
            .ok_or_else(|| {
                Error::Data(format!(
                    "{}:{lineno}: occupation '{}' not in the known vocabulary",
                    path.display(),
                    fields[3]
                ))
            })? as u8;
        by_id.insert(
            id,
            UserMeta {
                age: f64::from(age),
                gender,
                occupation,
            },
        );
    }
    align(path, &by_id, user_ids, "user")
}

/// Parses the pipe-separated item metadata file (latin-1 encoded; only the
/// ASCII id and genre-flag fields are interpreted) and aligns records to
/// dense item index order.
pub(super) fn load_item_meta(path: &Path, item_ids: &[u32]) -> Result<Vec<ItemMeta>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<&[u8]> = bytes.split(|&b| b == b'\n').collect();
    if lines.last() == Some(&&b""[..]) {
        lines.pop();
    }
    let mut by_id: HashMap<u32, ItemMeta> = HashMap::new();
    for (idx, line) in lines.iter().enumerate() {
        let lineno = idx + 1;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&[u8]> = line.split(|&b| b == b'|').collect();
        if fields.len() != 5 + GENRE_COUNT {
            return Err(parse_err(format!(
                "expected {} fields, got {}",
                5 + GENRE_COUNT,
                fields.len()
            )));
        }
        let id: u32 = std::str::from_utf8(fields[0])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                parse_err(format!(
                    "bad item id '{}'",
                    String::from_utf8_lossy(fields[0])
                ))
            })?;
        let mut genres = [false; GENRE_COUNT];
        for (k, flag) in genres.iter_mut().enumerate() {
            *flag = match fields[5 + k] {
                b"0" => false,
                b"1" => true,
                other => {
                    return Err(parse_err(format!(
                        "genre flag {k} must be 0 or 1, got '{}'",
                        String::from_utf8_lossy(other)
                    )))
                }
            };
        }
        by_id.insert(id, ItemMeta { genres });
    }
    align(path, &by_id, item_ids, "item")
}

fn align<T: Copy>(
    path: &Path,
    by_id: &HashMap<u32, T>,
    ids: &[u32],
    side: &str,
) -> Result<Vec<T>> {
    ids.iter()
        .map(|id| {
            by_id.get(id).copied().ok_or_else(|| {
                Error::Data(format!(
                    "{}: no metadata record for {side} id {id}",
                    path.display()
                ))
            })
        })
        .collect()
}
