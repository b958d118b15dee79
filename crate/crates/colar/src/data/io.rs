//! Dataset persistence: JSONL samples per split, a vocabulary sidecar, and a
//! metadata file carrying the generating config and its hash.

use crate::data::gen::{Dataset, DatasetConfig, TokenSample};
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub config_hash: String,
    pub vocab_hash: String,
    pub counts: [usize; 3],
}

/// Hex SHA-256 of the canonical JSON serialization of a config.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut h = Sha256::new();
    h.update(&json);
    let out = h.finalize();
    out.iter().map(|b| format!("{:02x}", b)).collect()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

/// Writes `train.jsonl`, `val.jsonl`, `test.jsonl`, `vocab.json`, and
/// `meta.json` into `dir`, creating it if needed.
pub fn save_dataset(dir: &Path, ds: &Dataset, vocab: &Vocabulary) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (name, split) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        let f = fs::File::create(dir.join(format!("{}.jsonl", name)))?;
        let mut w = BufWriter::new(f);
        for s in split.iter() {
            serde_json::to_writer(&mut w, s)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    fs::write(dir.join("vocab.json"), vocab.to_json())?;
    let meta = DatasetMeta {
        config: ds.config.clone(),
        config_hash: config_hash(&ds.config),
        vocab_hash: hex(&vocab.hash()),
        counts: [ds.train.len(), ds.val.len(), ds.test.len()],
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

fn load_split(path: &Path) -> Result<Vec<TokenSample>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Loads a dataset directory, checking that the stored vocabulary hash still
/// matches the sidecar.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Vocabulary)> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let vocab = Vocabulary::from_json(&fs::read_to_string(dir.join("vocab.json"))?)?;
    if hex(&vocab.hash()) != meta.vocab_hash {
        return Err(Error::Validation(format!(
            "vocabulary sidecar in {} does not match its recorded hash",
            dir.display()
        )));
    }
    let ds = Dataset {
        config: meta.config,
        train: load_split(&dir.join("train.jsonl"))?,
        val: load_split(&dir.join("val.jsonl"))?,
        test: load_split(&dir.join("test.jsonl"))?,
    };
    let counts = [ds.train.len(), ds.val.len(), ds.test.len()];
    if counts != meta.counts {
        return Err(Error::Validation(format!(
            "split sizes {:?} do not match recorded {:?}",
            counts, meta.counts
        )));
    }
    Ok((ds, vocab))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen::generate_dataset;

    #[test]
    fn save_load_round_trip() {
        let vocab = Vocabulary::standard();
        let cfg = DatasetConfig::easy(100, 11);
        let ds = generate_dataset(&cfg, &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds, &vocab).unwrap();
        let (back, v2) = load_dataset(dir.path()).unwrap();
        assert_eq!(v2.hash(), vocab.hash());
        assert_eq!(
            serde_json::to_string(&back.train).unwrap(),
            serde_json::to_string(&ds.train).unwrap()
        );
        assert_eq!(back.val.len(), ds.val.len());
        assert_eq!(back.test.len(), ds.test.len());
        assert_eq!(config_hash(&back.config), config_hash(&cfg));
    }

    #[test]
    fn tampered_vocab_rejected() {
        let vocab = Vocabulary::standard();
        let ds = generate_dataset(&DatasetConfig::easy(20, 1), &vocab).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds, &vocab).unwrap();
        let path = dir.path().join("vocab.json");
        let mut tokens: Vec<String> =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        tokens.push("<extra>".into());
        fs::write(&path, serde_json::to_string(&tokens).unwrap()).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
