//! Attention dumps: one JSON line per sample plus a PGM (P2) image per
//! glimpse of the grid attention.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionResult;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const DUMP_FILE: &str = "attention.jsonl";

/// One line of `attention.jsonl`. `a1` is `G·H·W` values and `a2` is
/// `G·N_d` values, glimpse-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub index: usize,
    pub question_type: String,
    pub predicted: String,
    pub glimpses: usize,
    pub grid: [usize; 2],
    pub boxes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a1: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub a2: Option<Vec<f64>>,
}

impl DumpRecord {
    pub fn new(
        index: usize,
        question_type: &str,
        predicted: &str,
        result: &AttentionResult,
        cfg: &ModelConfig,
    ) -> Self {
        DumpRecord {
            index,
            question_type: question_type.to_owned(),
            predicted: predicted.to_owned(),
            glimpses: cfg.glimpses,
            grid: [cfg.grid_h, cfg.grid_w],
            boxes: cfg.num_boxes,
            a1: result.a1.as_ref().map(|t| t.data().to_vec()),
            a2: result.a2.as_ref().map(|t| t.data().to_vec()),
        }
    }

    /// Rows of `a1` (one per glimpse), if present.
    pub fn a1_rows(&self) -> Vec<&[f64]> {
        let cells = self.grid[0] * self.grid[1];
        self.a1
            .as_deref()
            .map_or_else(Vec::new, |a| a.chunks(cells).collect())
    }

    pub fn a2_rows(&self) -> Vec<&[f64]> {
        self.a2
            .as_deref()
            .map_or_else(Vec::new, |a| a.chunks(self.boxes).collect())
    }
}

/// ASCII graymap of one attention map, min-max rescaled to 0..=255.
pub fn pgm(values: &[f64], height: usize, width: usize) -> String {
    assert_eq!(values.len(), height * width);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let level = if span > 0.0 {
                    (v - lo) / span * 255.0
                } else {
                    0.0
                };
                (level.round() as u8).to_string()
            })
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

/// Writes `attention.jsonl` and `sample{index:05}_g{glimpse}.pgm` files.
pub fn write_dump(dir: &Path, records: &[DumpRecord]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut jsonl = String::new();
    for rec in records {
        jsonl.push_str(&serde_json::to_string(rec).expect("serializable"));
        jsonl.push('\n');
        for (g, row) in rec.a1_rows().into_iter().enumerate() {
            let name = format!("sample{:05}_g{g}.pgm", rec.index);
            fs::write(dir.join(name), pgm(row, rec.grid[0], rec.grid[1]))?;
        }
    }
    fs::write(dir.join(DUMP_FILE), jsonl)?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<Vec<DumpRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                record: i,
                message: e.to_string(),
            })
        })
        .collect()
}
