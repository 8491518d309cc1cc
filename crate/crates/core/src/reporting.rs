//! Report emission: flat RMSE tables, cross-seed summaries, behavior-cloning
//! curves, the informative-actions verdict, and SVG histograms of predicted
//! versus true values.
//!
//! Everything here consumes only files listed in the run manifest and writes
//! byte-deterministic output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::bc::BCReport;
use crate::error::{Error, Result};
use crate::experiment::{DiagnosticReport, EvalCondition};
use crate::manifest::RunManifest;

/// Fixed histogram bin count over the pooled min-max range.
pub const HISTOGRAM_BINS: usize = 50;

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

/// Count values into `bins` equal-width bins over [lo, hi]; values at the
/// upper edge land in the last bin.
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0usize; bins];
    if !(hi > lo) || bins == 0 {
        return counts;
    }
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let idx = (((v - lo) / width) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    counts
}

/// Render two overlaid step-outline histograms as a standalone SVG string.
/// Output bytes are a pure function of the inputs.
pub fn render_histogram_svg(
    title: &str,
    label_a: &str,
    values_a: &[f64],
    label_b: &str,
    values_b: &[f64],
) -> String {
    let (w, h) = (520.0f64, 340.0f64);
    let (ml, mr, mt, mb) = (52.0f64, 16.0f64, 34.0f64, 40.0f64);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in values_a.iter().chain(values_b) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let ca = histogram(values_a, lo, hi, HISTOGRAM_BINS);
    let cb = histogram(values_b, lo, hi, HISTOGRAM_BINS);
    let peak = ca.iter().chain(&cb).copied().max().unwrap_or(1).max(1) as f64;

    let outline = |counts: &[usize]| -> String {
        let mut d = String::new();
        let bw = plot_w / HISTOGRAM_BINS as f64;
        let y_of = |c: usize| mt + plot_h - (c as f64 / peak) * plot_h;
        d.push_str(&format!("M {:.2} {:.2}", ml, mt + plot_h));
        for (i, &c) in counts.iter().enumerate() {
            let x0 = ml + i as f64 * bw;
            let x1 = x0 + bw;
            let y = y_of(c);
            d.push_str(&format!(" L {x0:.2} {y:.2} L {x1:.2} {y:.2}"));
        }
        d.push_str(&format!(" L {:.2} {:.2}", ml + plot_w, mt + plot_h));
        d
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w:.0}\" height=\"{h:.0}\" viewBox=\"0 0 {w:.0} {h:.0}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        title
    ));
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{ml:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"1\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml:.2}\" y1=\"{mt:.2}\" x2=\"{ml:.2}\" y2=\"{:.2}\" stroke=\"black\" stroke-width=\"1\"/>\n",
        mt + plot_h
    ));
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let x = ml + frac * plot_w;
        let v = lo + frac * (hi - lo);
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\">{v:.2}</text>\n",
            mt + plot_h + 16.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2})\">count (peak {peak:.0})</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));
    svg.push_str(&format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>\n",
        outline(&ca)
    ));
    svg.push_str(&format!(
        "<path d=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>\n",
        outline(&cb)
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#1f77b4\">{} (n={})</text>\n",
        ml + 8.0,
        mt + 14.0,
        label_a,
        values_a.len()
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"#d62728\">{} (n={})</text>\n",
        ml + 8.0,
        mt + 28.0,
        label_b,
        values_b.len()
    ));
    svg.push_str("</svg>\n");
    svg
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(content.as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Out  of one emission run: the files written plus non-fatal issues.
#[derive(Debug, Default)]
pub struct EmitOutcome {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn load_grid_report(out_dir: &Path, manifest: &RunManifest) -> Result<DiagnosticReport> {
    let path = manifest.verify_input(out_dir, "train-dynamics", "dynamics/grid_report.json")?;
    let bytes = std::fs::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::CorruptResult {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn load_bc_report(out_dir: &Path, manifest: &RunManifest) -> Result<BCReport> {
    let path = manifest.verify_input(out_dir, "train-bc", "bc/bc_report.json")?;
    let bytes = std::fs::read(&path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::CorruptResult {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Write the flat RMSE table, the cross-seed summary, the behavior-cloning
/// table, and the verdict from whatever results the manifest lists. A
/// corrupt input is reported by name while the remaining artifacts are still
/// emitted; it is an error only if no results exist at all.
pub fn emit_report(out_dir: &Path) -> Result<EmitOutcome> {
    let manifest = RunManifest::load_or_default(out_dir)?;
    let mut outcome = EmitOutcome::default();
    let report_dir = out_dir.join("report");

    let grid = match load_grid_report(out_dir, &manifest) {
        Ok(g) => Some(g),
        Err(Error::NoResultsFound(_)) => None,
        Err(e) => {
            outcome.warnings.push(e.to_string());
            None
        }
    };
    let bc = match load_bc_report(out_dir, &manifest) {
        Ok(b) => Some(b),
        Err(Error::NoResultsFound(_)) => None,
        Err(e) => {
            outcome.warnings.push(e.to_string());
            None
        }
    };
    if grid.is_none() && bc.is_none() && outcome.warnings.is_empty() {
        return Err(Error::NoResultsFound(out_dir.display().to_string()));
    }

    if let Some(grid) = &grid {
        let mut table = String::from("metric,horizon,scheme,seed,condition,rmse\n");
        let mut rows: Vec<(String, usize, String, u64, usize, f64)> = Vec::new();
        for c in &grid.cells {
            for (ci, condition) in EvalCondition::ALL.iter().enumerate() {
                if let Some(&rmse) = c.rmse.get(condition.name()) {
                    rows.push((
                        c.metric.name().to_string(),
                        c.horizon,
                        c.scheme.name().to_string(),
                        c.seed,
                        ci,
                        rmse,
                    ));
                }
            }
        }
        rows.sort_by(|a, b| {
            (&a.0, a.1, &a.2, a.3, a.4)
                .partial_cmp(&(&b.0, b.1, &b.2, b.3, b.4))
                .unwrap()
        });
        for (metric, horizon, scheme, seed, ci, rmse) in rows {
            table.push_str(&format!(
                "{metric},{horizon},{scheme},{seed},{},{}\n",
                EvalCondition::ALL[ci].name(),
                f6(rmse)
            ));
        }
        let p = report_dir.join("rmse_table.csv");
        write_file(&p, &table)?;
        outcome.files.push(p);

        let p = report_dir.join("rmse_summary.json");
        write_file(&p, &format!("{}\n", serde_json::to_string_pretty(&grid.aggregates)?))?;
        outcome.files.push(p);

        let p = report_dir.join("verdict.json");
        write_file(&p, &format!("{}\n", serde_json::to_string_pretty(&grid.verdict)?))?;
        outcome.files.push(p);
    }

    if let Some(bc) = &bc {
        let mut table = String::from("seed,drug,horizon,r2\n");
        let mut entries = bc.entries.clone();
        entries.sort_by_key(|e| (e.seed, e.drug, e.horizon));
        for e in &entries {
            let r2 = e.r2.map(f6).unwrap_or_else(|| "undefined".to_string());
            table.push_str(&format!("{},{},{},{}\n", e.seed, e.drug.name(), e.horizon, r2));
        }
        let p = report_dir.join("bc_r2.csv");
        write_file(&p, &table)?;
        outcome.files.push(p);

        let p = report_dir.join("bc_summary.json");
        write_file(&p, &format!("{}\n", serde_json::to_string_pretty(&bc.summaries)?))?;
        outcome.files.push(p);
    }

    Ok(outcome)
}

/// Render the retained prediction-versus-truth samples as SVG histograms:
/// one per retained (metric, horizon, condition) from the dynamics grid and
/// one per (drug, horizon) from behavior cloning. Missing samples are
/// skipped with a warning.
pub fn emit_histograms(out_dir: &Path) -> Result<EmitOutcome> {
    let manifest = RunManifest::load_or_default(out_dir)?;
    let mut outcome = EmitOutcome::default();
    let hist_dir = out_dir.join("report").join("histograms");

    let grid = match load_grid_report(out_dir, &manifest) {
        Ok(g) => Some(g),
        Err(Error::NoResultsFound(_)) => None,
        Err(e) => {
            outcome.warnings.push(e.to_string());
            None
        }
    };
    let bc = match load_bc_report(out_dir, &manifest) {
        Ok(b) => Some(b),
        Err(Error::NoResultsFound(_)) => None,
        Err(e) => {
            outcome.warnings.push(e.to_string());
            None
        }
    };
    if grid.is_none() && bc.is_none() && outcome.warnings.is_empty() {
        return Err(Error::NoResultsFound(out_dir.display().to_string()));
    }

    let mut wrote_any = false;
    if let Some(grid) = &grid {
        let mut retained: BTreeMap<String, &Vec<(f64, f64)>> = BTreeMap::new();
        for c in &grid.cells {
            for (cond, pairs) in &c.samples {
                retained.insert(
                    format!("{}_{}h_{}_{}", c.metric.name(), c.horizon, c.scheme.name(), cond),
                    pairs,
                );
            }
        }
        if retained.is_empty() {
            outcome.warnings.push("no retained dynamics samples; skipping histograms".into());
        }
        for (key, pairs) in retained {
            if pairs.is_empty() {
                outcome.warnings.push(format!("empty sample set for {key}"));
                continue;
            }
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let svg = render_histogram_svg(
                &format!("severity change (z): {key}"),
                "true",
                &truth,
                "predicted",
                &pred,
            );
            let p = hist_dir.join(format!("hist_{key}.svg"));
            write_file(&p, &svg)?;
            outcome.files.push(p);
            wrote_any = true;
        }
    }
    if let Some(bc) = &bc {
        if bc.samples.is_empty() {
            outcome.warnings.push("no retained behavior-cloning samples".into());
        }
        for (key, pairs) in &bc.samples {
            if pairs.is_empty() {
                outcome.warnings.push(format!("empty sample set for bc {key}"));
                continue;
            }
            let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let truth: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let name = key.replace(':', "_");
            let svg = render_histogram_svg(
                &format!("dose (z of log): {key}"),
                "true",
                &truth,
                "predicted",
                &pred,
            );
            let p = hist_dir.join(format!("hist_bc_{name}h.svg"));
            write_file(&p, &svg)?;
            outcome.files.push(p);
            wrote_any = true;
        }
    }
    let _ = wrote_any;
    Ok(outcome)
}
