//! Collapse a results grid to per-(mode, scale) optimal learning rates and
//! their shift, in grid points, from the base scale.

use std::collections::BTreeMap;
use std::path::Path;

use fslr::error::{Error, Result};

use crate::runner::ResultRow;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub mode: String,
    pub scale: f64,
    pub argmin_eta0: f64,
    /// Index into the ascending eta0 grid.
    pub argmin_index: usize,
    /// |argmin_index - base argmin_index|; base scale is the first scale
    /// appearing in the results.
    pub shift_from_base: usize,
}

/// Per-(mode, scale) argmin over the seed-mean of final losses.
///
/// Divergent rows keep their last finite loss, which naturally penalizes
/// an exploding learning rate; a loss of NaN (diverged before the first
/// step completed) is treated as worse than any finite value. Ties break
/// toward the smaller eta0.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Data("no result rows".into()));
    }
    let mut grid: Vec<f64> = Vec::new();
    for r in rows {
        if !grid.iter().any(|&g| g == r.eta0) {
            grid.push(r.eta0);
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite grid"));

    // scales in order of appearance, per mode
    let mut scales_by_mode: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in rows {
        let scales = scales_by_mode.entry(r.mode.as_str()).or_default();
        if !scales.iter().any(|&s| s == r.scale) {
            scales.push(r.scale);
        }
    }

    // seed counts must form a complete grid
    let mut cell_counts: BTreeMap<(String, u64, u64), usize> = BTreeMap::new();
    let mut seeds: BTreeMap<&str, usize> = BTreeMap::new();
    for r in rows {
        *cell_counts
            .entry((r.mode.clone(), r.scale.to_bits(), r.eta0.to_bits()))
            .or_default() += 1;
    }
    for r in rows {
        let n = cell_counts[&(r.mode.clone(), r.scale.to_bits(), r.eta0.to_bits())];
        let e = seeds.entry(r.mode.as_str()).or_insert(n);
        if *e != n {
            return Err(Error::Data(format!(
                "incomplete grid: uneven seed counts in mode {}",
                r.mode
            )));
        }
    }
    for (mode, scales) in &scales_by_mode {
        for &scale in scales {
            for &eta in &grid {
                if !cell_counts.contains_key(&(mode.to_string(), scale.to_bits(), eta.to_bits())) {
                    return Err(Error::Data(format!(
                        "incomplete grid: mode {mode} scale {scale} missing eta0 {eta}"
                    )));
                }
            }
        }
    }

    let mut out = Vec::new();
    for (mode, scales) in &scales_by_mode {
        let mut base_idx: Option<usize> = None;
        for &scale in scales {
            let mut best: Option<(usize, f64)> = None;
            for (gi, &eta) in grid.iter().enumerate() {
                let losses: Vec<f64> = rows
                    .iter()
                    .filter(|r| r.mode == *mode && r.scale == scale && r.eta0 == eta)
                    .map(|r| if r.final_loss.is_nan() { f64::INFINITY } else { r.final_loss })
                    .collect();
                let mean = losses.iter().sum::<f64>() / losses.len() as f64;
                if best.is_none() || mean < best.expect("checked").1 {
                    best = Some((gi, mean));
                }
            }
            let (argmin_index, _) = best.expect("non-empty grid");
            let base = *base_idx.get_or_insert(argmin_index);
            out.push(SummaryRow {
                mode: mode.to_string(),
                scale,
                argmin_eta0: grid[argmin_index],
                argmin_index,
                shift_from_base: argmin_index.abs_diff(base),
            });
        }
    }
    Ok(out)
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut out = String::from("mode,scale,argmin_eta0,argmin_index,shift_from_base\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode, r.scale, r.argmin_eta0, r.argmin_index, r.shift_from_base
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn render_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>14} {:>8} {:>6}\n",
        "mode", "scale", "argmin_eta0", "index", "shift"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<24} {:>10} {:>14.6e} {:>8} {:>6}\n",
            r.mode, r.scale, r.argmin_eta0, r.argmin_index, r.shift_from_base
        ));
    }
    out
}
