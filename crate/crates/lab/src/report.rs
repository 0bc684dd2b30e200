//! Files written for each run: report JSON, training histories, prototype
//! and embedding dumps, checkpoints, the trade-off table and a manifest of
//! content hashes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use flair_core::datagen::{fmt_f64, Split};
use flair_core::trainer::write_history;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::runner::{CellArtifacts, EmbeddingRow, MetricSummary, Stat, SweepRow};
use crate::LabError;

pub const MANIFEST: &str = "manifest.json";
pub const TRADEOFF: &str = "tradeoff.csv";

pub const TRADEOFF_HEADER: &str = "param,value,accuracy_mean,accuracy_std,delta_dp_mean,delta_dp_std,auc_fair_mean,auc_fair_std,consistency_mean,consistency_std,failed_cells";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    /// Seconds since the Unix epoch when the manifest was written.
    pub created_unix: u64,
    pub files: Vec<ManifestEntry>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabError + '_ {
    move |e| LabError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, LabError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn write_text(path: &Path, text: &str) -> Result<(), LabError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn cell_stem(heldout: u32, seed: u64) -> String {
    format!("h{heldout}_s{seed}")
}

/// Directory of one labelled run inside the output directory.
pub fn run_dir(param: &str, value: &str) -> String {
    format!("{param}_{value}")
}

pub fn checkpoint_name(heldout: u32, seed: u64) -> String {
    format!("model_{}.ckpt", cell_stem(heldout, seed))
}

/// The report document of one run.
pub fn report_json(row: &SweepRow) -> serde_json::Value {
    let run = &row.result;
    let cells: Vec<serde_json::Value> = run
        .cells
        .iter()
        .map(|c| match &c.outcome {
            Ok(a) => json!({
                "heldout": c.heldout,
                "seed": c.seed,
                "status": "ok",
                "steps": a.history.len(),
                "plateau_at": a.plateau_at,
                "report": a.report,
            }),
            Err(e) => json!({
                "heldout": c.heldout,
                "seed": c.seed,
                "status": "failed",
                "error": e,
            }),
        })
        .collect();
    json!({
        "method": run.method,
        "param": row.param,
        "value": row.value,
        "config": run.config_echo,
        "cells": cells,
        "per_domain": run.per_domain,
        "overall": run.overall,
    })
}

pub fn write_embeddings<W: Write>(w: &mut W, rows: &[EmbeddingRow]) -> std::io::Result<()> {
    let c = rows.first().map_or(0, |r| r.content.len());
    let mut header = String::from("split,domain,a,y");
    for j in 0..c {
        header.push_str(&format!(",c{j}"));
    }
    for j in 0..c {
        header.push_str(&format!(",ctilde{j}"));
    }
    writeln!(w, "{header}")?;
    for r in rows {
        let split = match r.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        write!(w, "{split},{},{},{}", r.domain, r.a.sign(), r.y)?;
        for v in r.content.iter().chain(&r.fair) {
            write!(w, ",{}", fmt_f64(*v))?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn stat_cols(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [fmt_f64(s.mean), fmt_f64(s.std)],
        None => [String::new(), String::new()],
    }
}

pub fn write_tradeoff<W: Write>(w: &mut W, rows: &[SweepRow]) -> std::io::Result<()> {
    writeln!(w, "{TRADEOFF_HEADER}")?;
    for row in rows {
        let MetricSummary {
            accuracy,
            delta_dp,
            auc_fair,
            consistency,
        } = row.result.overall;
        let cols: Vec<String> = [accuracy, delta_dp, auc_fair, consistency]
            .into_iter()
            .flat_map(stat_cols)
            .collect();
        writeln!(
            w,
            "{},{},{},{}",
            row.param,
            row.value,
            cols.join(","),
            row.result.failures().count()
        )?;
    }
    Ok(())
}

fn emit_cell(dir: &Path, stem: &str, a: &CellArtifacts) -> Result<(), LabError> {
    if !a.history.is_empty() {
        let path = dir.join(format!("history_{stem}.csv"));
        let mut w = create(&path)?;
        write_history(&mut w, &a.history)?;
        w.flush().map_err(io_err(&path))?;
    }
    if let Some(p) = a.prototypes() {
        let path = dir.join(format!("prototypes_{stem}.csv"));
        let mut w = create(&path)?;
        p.write_prototypes(&mut w)?;
        w.flush().map_err(io_err(&path))?;
    }
    if !a.embeddings.is_empty() {
        let path = dir.join(format!("embeddings_{stem}.csv"));
        let mut w = create(&path)?;
        write_embeddings(&mut w, &a.embeddings).map_err(io_err(&path))?;
        w.flush().map_err(io_err(&path))?;
    }
    if let Some(m) = &a.model {
        let path = dir.join(format!("model_{stem}.ckpt"));
        let mut w = create(&path)?;
        m.write_checkpoint(&mut w)?;
        w.flush().map_err(io_err(&path))?;
    }
    Ok(())
}

/// Writes every run into its own subdirectory, the trade-off table over
/// all runs and the manifest.
pub fn emit_reports(rows: &[SweepRow], outdir: &Path) -> Result<Manifest, LabError> {
    for row in rows {
        let dir = outdir.join(run_dir(&row.param, &row.value));
        let text = serde_json::to_string_pretty(&report_json(row)).expect("report serializes");
        write_text(&dir.join("report.json"), &(text + "\n"))?;
        for c in &row.result.cells {
            if let Ok(a) = &c.outcome {
                emit_cell(&dir, &cell_stem(c.heldout, c.seed), a)?;
            }
        }
    }
    let path = outdir.join(TRADEOFF);
    let mut w = create(&path)?;
    write_tradeoff(&mut w, rows).map_err(io_err(&path))?;
    w.flush().map_err(io_err(&path))?;
    write_manifest(outdir)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), LabError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join(MANIFEST) {
            out.push(path);
        }
    }
    Ok(())
}

/// Hashes every file under `outdir` except the manifest itself.
pub fn manifest_entries(outdir: &Path) -> Result<Vec<ManifestEntry>, LabError> {
    let mut files = Vec::new();
    collect_files(outdir, outdir, &mut files)?;
    let mut entries = files
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(io_err(p))?;
            let rel = p.strip_prefix(outdir).expect("under outdir");
            let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
            Ok(ManifestEntry {
                path: rel,
                sha256: format!("{:x}", Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            })
        })
        .collect::<Result<Vec<_>, LabError>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

pub fn write_manifest(outdir: &Path) -> Result<Manifest, LabError> {
    let manifest = Manifest {
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        files: manifest_entries(outdir)?,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&outdir.join(MANIFEST), &(text + "\n"))?;
    Ok(manifest)
}

pub fn read_manifest(outdir: &Path) -> Result<Manifest, LabError> {
    let path = outdir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
}
