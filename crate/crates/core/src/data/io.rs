//! Dataset files.
//!
//! A dataset is two files sharing a stem:
//!
//! * `<stem>.tsv`: a header line `#feds2t-data\tv1\tfeature_dim=<d_f>`, then
//!   one tab-separated record per utterance:
//!   `role  client_id  split  frame_offset  frame_count  tokens`, where
//!   `role` is `visible`, `invisible` or `public`, `split` is `train`, `dev`
//!   or `test`, `frame_offset` counts frames (not bytes) into the sidecar and
//!   `tokens` is a space-separated id list.
//! * `<stem>.frames.bin`: every frame as `d_f` little-endian `f32` values,
//!   concatenated in record order.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;

use super::{ClientDataset, Example};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClientRole {
    Visible,
    Invisible,
    Public,
}

impl ClientRole {
    fn as_str(self) -> &'static str {
        match self {
            ClientRole::Visible => "visible",
            ClientRole::Invisible => "invisible",
            ClientRole::Public => "public",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "visible" => Ok(ClientRole::Visible),
            "invisible" => Ok(ClientRole::Invisible),
            "public" => Ok(ClientRole::Public),
            _ => Err(Error::format("dataset", format!("unknown role {s:?}"))),
        }
    }
}

const SPLITS: [&str; 3] = ["train", "dev", "test"];

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    let mut tsv = stem.as_os_str().to_owned();
    tsv.push(".tsv");
    let mut bin = stem.as_os_str().to_owned();
    bin.push(".frames.bin");
    (tsv.into(), bin.into())
}

/// Writes `(role, dataset)` pairs under `stem`.
pub fn write_dataset(stem: &Path, feature_dim: usize, sets: &[(ClientRole, &ClientDataset)]) -> Result<()> {
    let (tsv_path, bin_path) = paths(stem);
    let mut tsv = BufWriter::new(fs::File::create(tsv_path)?);
    let mut bin = BufWriter::new(fs::File::create(bin_path)?);
    writeln!(tsv, "#feds2t-data\tv1\tfeature_dim={feature_dim}")?;
    let mut offset = 0usize;
    for (role, set) in sets {
        for (split, examples) in SPLITS.iter().zip([&set.train, &set.dev, &set.test]) {
            for e in examples {
                if e.frames.ncols() != feature_dim {
                    return Err(Error::FrameDim {
                        expected: feature_dim,
                        got: e.frames.ncols(),
                    });
                }
                let tokens: Vec<String> = e.tokens.iter().map(u32::to_string).collect();
                writeln!(
                    tsv,
                    "{}\t{}\t{}\t{}\t{}\t{}",
                    role.as_str(),
                    set.client_id,
                    split,
                    offset,
                    e.frames.nrows(),
                    tokens.join(" ")
                )?;
                for &x in e.frames.iter() {
                    bin.write_all(&(x as f32).to_le_bytes())?;
                }
                offset += e.frames.nrows();
            }
        }
    }
    tsv.flush()?;
    bin.flush()?;
    Ok(())
}

/// Reads a dataset back; clients keep their order of first appearance.
pub fn read_dataset(stem: &Path) -> Result<(usize, Vec<(ClientRole, ClientDataset)>)> {
    let (tsv_path, bin_path) = paths(stem);
    let blob = fs::read(bin_path)?;
    let mut lines = BufReader::new(fs::File::open(tsv_path)?).lines();
    let header = lines.next().ok_or_else(|| Error::format("dataset", "empty file"))??;
    let feature_dim: usize = header
        .strip_prefix("#feds2t-data\tv1\tfeature_dim=")
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| Error::format("dataset", "bad header"))?;
    if feature_dim == 0 || blob.len() % (4 * feature_dim) != 0 {
        return Err(Error::format("dataset", "frame blob length mismatch"));
    }
    let frames_total = blob.len() / (4 * feature_dim);

    let mut out: Vec<(ClientRole, ClientDataset)> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |d: &str| Error::format("dataset", format!("line {}: {d}", lineno + 2));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let role = ClientRole::parse(fields[0])?;
        let client_id: u32 = fields[1].parse().map_err(|_| bad("client_id"))?;
        let split = SPLITS
            .iter()
            .position(|s| *s == fields[2])
            .ok_or_else(|| bad("split"))?;
        let offset: usize = fields[3].parse().map_err(|_| bad("frame_offset"))?;
        let count: usize = fields[4].parse().map_err(|_| bad("frame_count"))?;
        let tokens = fields[5]
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad("tokens"))?;
        if offset + count > frames_total {
            return Err(bad("frames out of range"));
        }
        let start = offset * feature_dim * 4;
        let values: Vec<f64> = blob[start..start + count * feature_dim * 4]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let frames = Array2::from_shape_vec((count, feature_dim), values)
            .map_err(|e| bad(&e.to_string()))?;
        let example = Example::new(frames, tokens)?;

        let idx = match out.iter().position(|(r, c)| *r == role && c.client_id == client_id) {
            Some(i) => i,
            None => {
                out.push((
                    role,
                    ClientDataset {
                        client_id,
                        train: Vec::new(),
                        dev: Vec::new(),
                        test: Vec::new(),
                    },
                ));
                out.len() - 1
            }
        };
        let set = &mut out[idx].1;
        [&mut set.train, &mut set.dev, &mut set.test][split].push(example);
    }
    Ok((feature_dim, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_world, WorldConfig};

    #[test]
    fn world_roundtrips_exactly() {
        let cfg = WorldConfig {
            vocab_size: 10,
            max_len: 5,
            feature_dim: 3,
            num_clients: 2,
            num_invisible: 1,
            train_sizes: vec![6, 4],
            dev_size: 2,
            test_size: 2,
            public_train_size: 3,
            public_dev_size: 1,
            ..WorldConfig::default()
        };
        let w = generate_world(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("world");
        let mut sets: Vec<(ClientRole, &ClientDataset)> =
            w.clients.iter().map(|c| (ClientRole::Visible, c)).collect();
        sets.push((ClientRole::Invisible, &w.invisible[0]));
        sets.push((ClientRole::Public, &w.public));
        write_dataset(&stem, 3, &sets).unwrap();

        let (df, back) = read_dataset(&stem).unwrap();
        assert_eq!(df, 3);
        assert_eq!(back.len(), 4);
        assert_eq!(back[0], (ClientRole::Visible, w.clients[0].clone()));
        assert_eq!(back[1], (ClientRole::Visible, w.clients[1].clone()));
        assert_eq!(back[2], (ClientRole::Invisible, w.invisible[0].clone()));
        assert_eq!(back[3], (ClientRole::Public, w.public.clone()));
    }
}
