use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use super::{CorpusError, Result, Utterance};

fn io_err(path: &Path, e: impl std::fmt::Display) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

/// Newline-delimited JSON, gzip-compressed when the path ends in `.gz`.
pub fn write_corpus(path: &Path, utts: &[Utterance]) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w: Box<dyn Write> = if is_gz(path) {
        Box::new(BufWriter::new(GzEncoder::new(file, Compression::default())))
    } else {
        Box::new(BufWriter::new(file))
    };
    for u in utts {
        serde_json::to_writer(&mut w, u).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads and validates every record; errors name the offending line.
pub fn read_corpus(path: &Path) -> Result<Vec<Utterance>> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let r: Box<dyn Read> = if is_gz(path) {
        Box::new(GzDecoder::new(file))
    } else {
        Box::new(file)
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let u: Utterance =
            serde_json::from_str(&line).map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?;
        u.validate()
            .map_err(|e| io_err(path, format!("line {}: {e}", n + 1)))?;
        out.push(u);
    }
    Ok(out)
}
