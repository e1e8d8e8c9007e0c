use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TaskSpec;
use crate::error::{Error, Result};

/// Sidecar describing how a dataset was generated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub spec: TaskSpec,
    pub vocab_size: usize,
    pub seed: u64,
    pub train_pairs: usize,
    pub test_pairs: usize,
}

/// One sequence per line, space-separated task symbols.
pub fn write_sequences(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in seqs {
        let line: Vec<String> = s.iter().map(u32::to_string).collect();
        writeln!(w, "{}", line.join(" ")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_sequences(path: &Path) -> Result<Vec<Vec<u32>>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let seq = line
            .split_whitespace()
            .map(|t| {
                t.parse::<u32>().map_err(|_| {
                    Error::Data(format!(
                        "{}:{}: bad token {t:?}",
                        path.display(),
                        lineno + 1
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequences_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        let seqs = vec![vec![1, 3, 18, 3, 2], vec![0], vec![]];
        write_sequences(&p, &seqs).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "1 3 18 3 2\n0\n\n");
        assert_eq!(read_sequences(&p).unwrap(), seqs);
    }

    #[test]
    fn bad_token_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.txt");
        fs::write(&p, "1 2\n3 x\n").unwrap();
        let err = read_sequences(&p).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        let missing = dir.path().join("nope.txt");
        let err = read_sequences(&missing).unwrap_err().to_string();
        assert!(err.contains("nope.txt"), "{err}");
    }

    #[test]
    fn meta_round_trip_and_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("meta.json");
        let meta = DatasetMeta {
            spec: TaskSpec::sort(10, 20),
            vocab_size: 24,
            seed: 9,
            train_pairs: 5,
            test_pairs: 2,
        };
        write_meta(&p, &meta).unwrap();
        assert_eq!(read_meta(&p).unwrap(), meta);
        fs::write(&p, r#"{"spec":{"task":"sort","error_mean":1,"error_sd":1},"vocab_size":1,"seed":0,"train_pairs":0,"test_pairs":0,"extra":1}"#).unwrap();
        assert!(read_meta(&p).is_err());
    }
}
