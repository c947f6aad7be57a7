//! Model checkpoint container.
//!
//! Layout: 4 magic bytes `GCMC`, a little-endian u32 format version, a
//! little-endian u64 header length, a UTF-8 text header, then the tensor
//! payloads as little-endian f64 in header order. The header lists dataset
//! metadata, hyperparameters, the original user/item id tables, and one
//! `tensor <name> <rows> <cols>` line per payload, closed by `end`.
//! Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::decoder::DecoderParams;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"GCMC";
pub const FORMAT_VERSION: u32 = 1;

/// A saved model: metadata plus named tensors. Tensor names follow the
/// training layout (`enc.*`, `dec.*`), with EMA shadows under `ema.` and
/// precomputed inference embeddings under `infer.u` / `infer.v`, so
/// prediction needs no dataset access.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub format_name: String,
    pub encoding_version: u32,
    pub fingerprint: Option<String>,
    pub seed: u64,
    pub level_values: Vec<f64>,
    pub hyper: Vec<(String, String)>,
    pub user_ids: Vec<u32>,
    pub item_ids: Vec<u32>,
    pub tensors: Vec<(String, DenseMatrix)>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn no_whitespace(kind: &str, s: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(bad(format!("{kind} {s:?} must be nonempty without whitespace")));
    }
    Ok(())
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Result<&DenseMatrix> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| bad(format!("tensor {name} not in checkpoint")))
    }

    pub fn hyper(&self, key: &str) -> Result<&str> {
        self.hyper
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| bad(format!("hyperparameter {key} not in checkpoint")))
    }

    fn header(&self) -> Result<String> {
        let mut h = String::new();
        no_whitespace("format name", &self.format_name)?;
        h.push_str(&format!("format {}\n", self.format_name));
        h.push_str(&format!("encoding {}\n", self.encoding_version));
        match &self.fingerprint {
            Some(f) => {
                no_whitespace("fingerprint", f)?;
                h.push_str(&format!("fingerprint {f}\n"));
            }
            None => h.push_str("fingerprint -\n"),
        }
        h.push_str(&format!("seed {}\n", self.seed));
        let levels: Vec<String> = self.level_values.iter().map(f64::to_string).collect();
        h.push_str(&format!("levels {}\n", levels.join(" ")));
        for (k, v) in &self.hyper {
            no_whitespace("hyperparameter key", k)?;
            no_whitespace("hyperparameter value", v)?;
            h.push_str(&format!("hyper {k} {v}\n"));
        }
        let ids = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
        h.push_str(&format!("user_ids {}\n", ids(&self.user_ids)));
        h.push_str(&format!("item_ids {}\n", ids(&self.item_ids)));
        for (name, t) in &self.tensors {
            no_whitespace("tensor name", name)?;
            h.push_str(&format!("tensor {name} {} {}\n", t.rows(), t.cols()));
        }
        h.push_str("end\n");
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let header = self.header()?;
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        w.write_all(&MAGIC).map_err(io)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(header.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(header.as_bytes()).map_err(io)?;
        for (_, t) in &self.tensors {
            for &v in t.values() {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if magic != MAGIC {
            return Err(bad(format!("bad magic bytes {magic:02x?}, want {MAGIC:02x?}")));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let mut long = [0u8; 8];
        r.read_exact(&mut long).map_err(io)?;
        let header_len = usize::try_from(u64::from_le_bytes(long))
            .map_err(|_| bad("header length does not fit in memory"))?;
        let mut header = vec![0u8; header_len];
        r.read_exact(&mut header).map_err(io)?;
        let header = String::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;

        let mut format_name = None;
        let mut encoding_version = None;
        let mut fingerprint = None;
        let mut seed = None;
        let mut level_values = None;
        let mut hyper = Vec::new();
        let mut user_ids = None;
        let mut item_ids = None;
        let mut shapes: Vec<(String, usize, usize)> = Vec::new();
        let mut closed = false;
        for line in header.lines() {
            if closed {
                return Err(bad("header continues past the end marker"));
            }
            let mut parts = line.split(' ');
            let key = parts.next().unwrap_or_default();
            let rest: Vec<&str> = parts.collect();
            let one = || -> Result<&str> {
                match rest.as_slice() {
                    [v] => Ok(v),
                    _ => Err(bad(format!("header line {line:?} wants exactly one value"))),
                }
            };
            match key {
                "format" => format_name = Some(one()?.to_string()),
                "encoding" => {
                    encoding_version =
                        Some(one()?.parse::<u32>().map_err(|_| bad("bad encoding version"))?);
                }
                "fingerprint" => {
                    let v = one()?;
                    fingerprint = Some((v != "-").then(|| v.to_string()));
                }
                "seed" => seed = Some(one()?.parse::<u64>().map_err(|_| bad("bad seed"))?),
                "levels" => {
                    level_values = Some(
                        rest.iter()
                            .map(|v| v.parse::<f64>().map_err(|_| bad("bad level value")))
                            .collect::<Result<Vec<f64>>>()?,
                    );
                }
                "hyper" => match rest.as_slice() {
                    [k, v] => hyper.push((k.to_string(), v.to_string())),
                    _ => return Err(bad(format!("bad hyperparameter line {line:?}"))),
                },
                "user_ids" | "item_ids" => {
                    let ids = rest
                        .iter()
                        .filter(|v| !v.is_empty())
                        .map(|v| v.parse::<u32>().map_err(|_| bad("bad id table entry")))
                        .collect::<Result<Vec<u32>>>()?;
                    if key == "user_ids" {
                        user_ids = Some(ids);
                    } else {
                        item_ids = Some(ids);
                    }
                }
                "tensor" => match rest.as_slice() {
                    [name, rows, cols] => {
                        let rows = rows.parse().map_err(|_| bad("bad tensor rows"))?;
                        let cols = cols.parse().map_err(|_| bad("bad tensor cols"))?;
                        shapes.push((name.to_string(), rows, cols));
                    }
                    _ => return Err(bad(format!("bad tensor line {line:?}"))),
                },
                "end" => closed = true,
                other => return Err(bad(format!("unknown header key {other:?}"))),
            }
        }
        if !closed {
            return Err(bad("header is missing its end marker"));
        }

        let mut tensors = Vec::with_capacity(shapes.len());
        for (name, rows, cols) in shapes {
            let mut values = vec![0.0f64; rows * cols];
            let mut buf = [0u8; 8];
            for v in &mut values {
                r.read_exact(&mut buf).map_err(io)?;
                *v = f64::from_le_bytes(buf);
            }
            tensors.push((name, DenseMatrix::from_values(rows, cols, values)?));
        }
        let mut trailing = [0u8; 1];
        match r.read(&mut trailing).map_err(io)? {
            0 => {}
            _ => return Err(bad("trailing bytes after the last tensor payload")),
        }

        Ok(Checkpoint {
            format_name: format_name.ok_or_else(|| bad("header lacks a format line"))?,
            encoding_version: encoding_version.ok_or_else(|| bad("header lacks an encoding line"))?,
            fingerprint: fingerprint.ok_or_else(|| bad("header lacks a fingerprint line"))?,
            seed: seed.ok_or_else(|| bad("header lacks a seed line"))?,
            level_values: level_values.ok_or_else(|| bad("header lacks a levels line"))?,
            hyper,
            user_ids: user_ids.ok_or_else(|| bad("header lacks a user id table"))?,
            item_ids: item_ids.ok_or_else(|| bad("header lacks an item id table"))?,
            tensors,
        })
    }
}

/// Rebuilds decoder weights from checkpoint tensors under `prefix`
/// (`""` for the live tensors, `"ema."` for the shadow).
pub fn decoder_from_tensors(ck: &Checkpoint, prefix: &str) -> Result<DecoderParams> {
    let mut p = Vec::new();
    while let Ok(t) = ck.tensor(&format!("{prefix}dec.p.{}", p.len())) {
        p.push(t.clone());
    }
    if p.is_empty() {
        return Err(bad(format!("no {prefix}dec.p.* tensors in checkpoint")));
    }
    let a = ck.tensor(&format!("{prefix}dec.a"))?.clone();
    if a.cols() != p.len() {
        return Err(bad(format!(
            "{prefix}dec.a has {} columns but {} basis matrices",
            a.cols(),
            p.len()
        )));
    }
    Ok(DecoderParams { p, a })
}
