pub mod attack;
pub mod evaluate;
pub mod train;
pub mod verify;
pub mod watermark;

use anyhow::{Context, Result};
use std::io::{BufRead, BufReader};
use std::path::Path;

/// Reads JSONL records of a serde type, skipping blank lines.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(&line)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        out.push(rec);
    }
    Ok(out)
}

/// Writes serde records as JSONL.
pub fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// Parses a comma-separated temperature list.
pub fn parse_temps(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().with_context(|| format!("bad temperature {p:?}")))
        .collect()
}

/// Applies insertion-flag overrides onto a config.
pub fn insertion_overrides(
    cfg: &mut textmark_core::insertion::InsertionConfig,
    seed: Option<u64>,
    beam: Option<usize>,
    iters: Option<usize>,
    temps: Option<&str>,
    mask_pct: Option<f64>,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = beam {
        cfg.beam_width = b;
    }
    if let Some(k) = iters {
        cfg.iterations = k;
        // keep the default temperature shape when only K changes
        if temps.is_none() && cfg.temperatures.len() != k {
            let last = cfg.temperatures.last().copied().unwrap_or(1.0);
            cfg.temperatures.resize(k, last);
        }
    }
    if let Some(t) = temps {
        cfg.temperatures = parse_temps(t)?;
    }
    if let Some(m) = mask_pct {
        cfg.mask_pct = m;
    }
    Ok(())
}
