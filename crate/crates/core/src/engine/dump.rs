//! Tab-separated extraction dumps: source index, comma-joined neighbor
//! indices, comma-joined distances, then one column per edited sentence.

use std::path::Path;

use crate::engine::edit::ExtractionResult;
use crate::engine::index::Neighbor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::text::{Sentence, Vocabulary};

pub fn write_extractions<S: Scalar>(path: &Path, results: &[ExtractionResult<S>], vocab: &Vocabulary) -> Result<()> {
    let mut body = String::new();
    for r in results {
        let idx: Vec<String> = r.neighbors.iter().map(|n| n.index.to_string()).collect();
        let dist: Vec<String> = r.neighbors.iter().map(|n| n.distance.to_string()).collect();
        body.push_str(&format!("{}\t{}\t{}", r.source, idx.join(","), dist.join(",")));
        for e in &r.edited {
            body.push('\t');
            body.push_str(&e.render(vocab));
        }
        body.push('\n');
    }
    std::fs::write(path, body)?;
    Ok(())
}

pub fn read_extractions<S: Scalar>(path: &Path, vocab: &Vocabulary) -> Result<Vec<ExtractionResult<S>>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let bad = |detail: String| Error::Ingestion {
            path: path.to_path_buf(),
            line: n + 1,
            detail,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(bad(format!("expected at least 4 columns, found {}", cols.len())));
        }
        let source = cols[0].parse().map_err(|e| bad(format!("source index: {e}")))?;
        let idx = cols[1]
            .split(',')
            .map(|x| x.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("neighbor index: {e}")))?;
        let dist = cols[2]
            .split(',')
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(format!("distance: {e}")))?;
        let edited = cols[3..]
            .iter()
            .map(|c| Sentence::parse(c, vocab))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| bad(e.to_string()))?;
        if idx.len() != dist.len() || idx.len() != edited.len() {
            return Err(bad("neighbor, distance and edit counts differ".into()));
        }
        out.push(ExtractionResult {
            source,
            neighbors: idx
                .into_iter()
                .zip(dist)
                .map(|(index, distance)| Neighbor { index, distance })
                .collect(),
            edited,
            edited_embeddings: None,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let vocab = Vocabulary::from_frequency(["a", "b", "c"]);
        let s = |t: &str| Sentence::parse(t, &vocab).unwrap();
        let results: Vec<ExtractionResult<f64>> = vec![ExtractionResult {
            source: 7,
            neighbors: vec![
                Neighbor { index: 3, distance: 0.125 },
                Neighbor { index: 1, distance: 1.0 / 3.0 },
            ],
            edited: vec![s("a b"), s("c")],
            edited_embeddings: None,
        }];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.tsv");
        write_extractions(&p, &results, &vocab).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("7\t3,1\t0.125,0.3333333333333333\ta b\tc\n"));
        assert_eq!(read_extractions::<f64>(&p, &vocab).unwrap(), results);
    }
}
