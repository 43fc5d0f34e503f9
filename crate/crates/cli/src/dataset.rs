//! JSONL dataset files: one record per line, `{"id", "fs", "samples",
//! "labels"}`. serde_json emits shortest round-trip decimal for f64, so
//! write-then-load preserves every sample and label bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use ppgvit_core::signal::PpgRecord;
use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct RecordJson {
    id: String,
    fs: f64,
    samples: Vec<f64>,
    /// Open vocabulary: unknown label names are preserved as-is.
    labels: BTreeMap<String, f64>,
}

pub fn save_dataset(path: &Path, records: &[PpgRecord]) -> Result<()> {
    let mut w = BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    );
    for r in records {
        let row = RecordJson {
            id: r.id.clone(),
            fs: r.fs,
            samples: r.samples.clone(),
            labels: r.labels.clone().into_iter().collect(),
        };
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<PpgRecord>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RecordJson = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}: malformed record", path.display(), lineno + 1))?;
        let rec = PpgRecord {
            id: row.id,
            fs: row.fs,
            samples: row.samples,
            labels: row.labels.into_iter().collect(),
        };
        rec.validate().with_context(|| {
            format!("{}:{}: invalid record '{}'", path.display(), lineno + 1, rec.id)
        })?;
        out.push(rec);
    }
    Ok(out)
}
