//! Line-delimited JSON corpus files.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec =
            serde_json::from_str(&line).map_err(|e| Error::Malformed(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PreferencePair, PromptRecord};
    use crate::tinylm::TokenSeq;

    #[test]
    fn pairs_round_trip_and_field_names() {
        let dir = std::env::temp_dir().join(format!("rlhf-io-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("pairs.jsonl");
        let pairs =
            vec![PreferencePair::new(1, TokenSeq(vec![4, 5]), TokenSeq(vec![6]), TokenSeq(vec![7, 8]), "synthetic")
                .unwrap()];
        write_jsonl(&path, &pairs).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "{\"id\":1,\"prompt\":[4,5],\"y_w\":[6],\"y_l\":[7,8],\"len_w\":1,\"len_l\":2,\"source_tag\":\"synthetic\"}\n"
        );
        let back: Vec<PreferencePair> = read_jsonl(&path).unwrap();
        assert_eq!(back, pairs);
        fs::write(&path, "{\"id\":1,\"bogus\":2}\n").unwrap();
        assert!(read_jsonl::<PromptRecord>(&path).is_err());
        fs::remove_dir_all(&dir).ok();
    }
}
