//! Self-describing binary checkpoint container.
//!
//! Layout: magic `FCKPT1` (6 bytes); little-endian u32 metadata length and
//! that many UTF-8 bytes of sorted `key=value` lines; little-endian u32
//! array count; per array a u16 name length, the name, a u8 rank, u32
//! dimensions, then raw little-endian f32 data. Everything round-trips
//! bit-exactly, including optimizer state stored as extra arrays.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

use super::params::ParamSet;

const MAGIC: &[u8; 6] = b"FCKPT1";

/// Named arrays plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, ArrayD<f32>)>,
}

impl Checkpoint {
    /// Moves a parameter set into the container under its registered
    /// names (ordered by id so loading reproduces the same id layout).
    pub fn from_params(params: &ParamSet<f32>) -> Checkpoint {
        Checkpoint {
            meta: BTreeMap::new(),
            arrays: params
                .iter()
                .map(|(n, a)| (n.to_string(), a.clone()))
                .collect(),
        }
    }

    /// Rebuilds a parameter set from arrays whose names start with
    /// `prefix.`, registering them in stored order.
    pub fn to_params(&self, prefix: &str) -> ParamSet<f32> {
        let mut ps = ParamSet::new();
        let want = format!("{prefix}.");
        for (name, arr) in &self.arrays {
            if name.starts_with(&want) {
                ps.add(name.clone(), arr.clone());
            }
        }
        ps
    }

    pub fn array(&self, name: &str) -> Option<&ArrayD<f32>> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    /// Overwrites every tensor of `ps` with the stored array of the same
    /// name. The container may hold extra arrays (optimizer state, metric
    /// history); a parameter missing from the container or stored with a
    /// different shape is a data error. This is the resume path: wiring is
    /// rebuilt deterministically from config, then values are restored by
    /// name.
    pub fn load_into(&self, ps: &mut ParamSet<f32>) -> Result<()> {
        let by_name: std::collections::HashMap<&str, &ArrayD<f32>> =
            self.arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        for id in 0..ps.len() {
            let name = ps.name(id).to_string();
            let stored = by_name.get(name.as_str()).ok_or_else(|| {
                Error::data(format!("checkpoint: no stored array named {name}"))
            })?;
            if stored.shape() != ps.get(id).shape() {
                return Err(Error::data(format!(
                    "checkpoint: array {name} has shape {:?}, expected {:?}",
                    stored.shape(),
                    ps.get(id).shape()
                )));
            }
            *ps.get_mut(id) = (*stored).clone();
        }
        Ok(())
    }

    pub fn meta_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::data(format!("checkpoint: missing metadata key {key}")))?;
        raw.parse()
            .map_err(|_| Error::data(format!("checkpoint: metadata {key}={raw} unparsable")))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(MAGIC)?;

        let mut meta_text = String::new();
        for (k, v) in &self.meta {
            assert!(
                !k.contains(['=', '\n']) && !v.contains('\n'),
                "checkpoint metadata key/value contains reserved characters: {k}"
            );
            meta_text.push_str(k);
            meta_text.push('=');
            meta_text.push_str(v);
            meta_text.push('\n');
        }
        out.write_all(&(meta_text.len() as u32).to_le_bytes())?;
        out.write_all(meta_text.as_bytes())?;

        out.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, arr) in &self.arrays {
            let nb = name.as_bytes();
            assert!(nb.len() <= u16::MAX as usize, "array name too long");
            out.write_all(&(nb.len() as u16).to_le_bytes())?;
            out.write_all(nb)?;
            let dims = arr.shape();
            assert!(dims.len() <= u8::MAX as usize);
            out.write_all(&[dims.len() as u8])?;
            for &d in dims {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            // Standard layout guaranteed for arrays we construct; fall back
            // to an explicit iteration order otherwise.
            match arr.as_slice() {
                Some(s) => {
                    for v in s {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
                None => {
                    for v in arr.iter() {
                        out.write_all(&v.to_le_bytes())?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Checkpoint> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let need = |r: &mut dyn Read, buf: &mut [u8], what: &str| -> Result<()> {
            r.read_exact(buf)
                .map_err(|_| Error::data(format!("checkpoint: truncated while reading {what}")))
        };

        let mut magic = [0u8; 6];
        need(&mut f, &mut magic, "header")?;
        if &magic[..5] != &MAGIC[..5] {
            return Err(Error::data("checkpoint: bad magic bytes"));
        }
        if magic[5] != MAGIC[5] {
            return Err(Error::data(format!(
                "checkpoint: unsupported container version {:?}",
                magic[5] as char
            )));
        }

        let mut u32b = [0u8; 4];
        need(&mut f, &mut u32b, "metadata length")?;
        let meta_len = u32::from_le_bytes(u32b) as usize;
        let mut meta_raw = vec![0u8; meta_len];
        need(&mut f, &mut meta_raw, "metadata")?;
        let meta_text = String::from_utf8(meta_raw)
            .map_err(|_| Error::data("checkpoint: metadata is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(format!("checkpoint: malformed metadata line {line:?}")))?;
            meta.insert(k.to_string(), v.to_string());
        }

        need(&mut f, &mut u32b, "array count")?;
        let count = u32::from_le_bytes(u32b) as usize;
        let mut arrays = Vec::with_capacity(count);
        for i in 0..count {
            let mut u16b = [0u8; 2];
            need(&mut f, &mut u16b, "array name length")?;
            let name_len = u16::from_le_bytes(u16b) as usize;
            let mut name_raw = vec![0u8; name_len];
            need(&mut f, &mut name_raw, "array name")?;
            let name = String::from_utf8(name_raw)
                .map_err(|_| Error::data(format!("checkpoint: array {i} name is not UTF-8")))?;
            let mut rank = [0u8; 1];
            need(&mut f, &mut rank, "array rank")?;
            let mut dims = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                need(&mut f, &mut u32b, "array dimension")?;
                dims.push(u32::from_le_bytes(u32b) as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0u8; len * 4];
            need(&mut f, &mut data, &format!("array {name} data"))?;
            let values: Vec<f32> = data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), values)
                .map_err(|e| Error::data(format!("checkpoint: array {name} shape: {e}")))?;
            arrays.push((name, arr));
        }
        Ok(Checkpoint { meta, arrays })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_normal;

    fn sample() -> Checkpoint {
        let mut rng = crate::rng::derive_rng(3, "ckpt-test", 0);
        let mut ps = ParamSet::<f32>::new();
        ps.add("net.a.w", init_normal(&mut rng, &[4, 3], 1.0));
        ps.add("net.b.b", init_normal(&mut rng, &[7], 0.5));
        ps.add("opt.m.net.a.w", init_normal(&mut rng, &[4, 3], 0.1));
        let mut ck = Checkpoint::from_params(&ps);
        ck.meta.insert("train.iter".into(), "123".into());
        ck.meta.insert("model.widths".into(), "8,16,32".into());
        ck
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(ck, back);
        assert_eq!(back.meta_parsed::<u64>("train.iter").unwrap(), 123);

        let ps = back.to_params("net");
        assert_eq!(ps.len(), 2);
        assert_eq!(ps.id("net.a.w"), Some(0));
    }

    #[test]
    fn header_corruption_cases_are_distinct() {
        let ck = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.write(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'Z';
        std::fs::write(&path, &bad).unwrap();
        let e = Checkpoint::read(&path).unwrap_err();
        assert!(e.to_string().contains("magic"), "{e}");

        let mut bad = good.clone();
        bad[5] = b'7';
        std::fs::write(&path, &bad).unwrap();
        let e = Checkpoint::read(&path).unwrap_err();
        assert!(e.to_string().contains("version"), "{e}");

        std::fs::write(&path, &good[..good.len() - 9]).unwrap();
        let e = Checkpoint::read(&path).unwrap_err();
        assert!(e.to_string().contains("truncated"), "{e}");
    }
}
