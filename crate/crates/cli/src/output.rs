//! Run directories, artifact files and dataset hashing.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use dmrn::data::Dataset;
use dmrn::eval::{CvResult, FoldResult};
use sha2::{Digest, Sha256};

use crate::Failure;

pub fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

/// Creates `<root>/<command>-<UTC timestamp>-<seed>`, suffixed if taken.
pub fn run_dir(root: &Path, command: &str, seed: u64) -> Result<PathBuf, Failure> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{command}-{stamp}-{seed}");
    create_dir(root)?;
    let mut n = 1;
    loop {
        let name = if n == 1 { base.clone() } else { format!("{base}-{n}") };
        let path = root.join(name);
        match fs::create_dir(&path) {
            Ok(()) => return Ok(path),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(Failure::data(format!("{}: {e}", path.display()))),
        }
    }
}

/// SHA-256 over every file under `root`, keyed by relative path, in path order.
pub fn hash_dir(root: &Path) -> Result<String, Failure> {
    let mut hasher = Sha256::new();
    let walker = walkdir::WalkDir::new(root).sort_by_file_name();
    for entry in walker {
        let entry = entry.map_err(|e| Failure::data(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).expect("under root");
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0]);
        let mut bytes = Vec::new();
        fs::File::open(entry.path())
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Failure::data(format!("{}: {e}", entry.path().display())))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn csv_bytes(f: impl FnOnce(&mut Vec<u8>) -> dmrn::Result<()>) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    f(&mut buf).map_err(Failure::from)?;
    Ok(buf)
}

fn write_predictions(path: &Path, dataset: &Dataset, fold: &FoldResult) -> Result<(), Failure> {
    let mut text = String::from("study_id,true_class,predicted_class");
    for c in &dataset.classes {
        text.push_str(&format!(",p_{c}"));
    }
    text.push('\n');
    for p in &fold.predictions {
        text.push_str(&format!(
            "{},{},{}",
            dataset.studies[p.study].id, dataset.classes[p.truth], dataset.classes[p.predicted]
        ));
        for c in 0..dataset.num_classes() {
            match p.classes.iter().position(|&k| k == c) {
                Some(i) => text.push_str(&format!(",{}", p.probabilities[i])),
                None => text.push(','),
            }
        }
        text.push('\n');
    }
    write(path, text.as_bytes())
}

/// Writes per-fold and pooled reports of a cross-validation under `dir`.
pub fn write_cv(dir: &Path, dataset: &Dataset, cv: &CvResult, with_logs: bool) -> Result<(), Failure> {
    create_dir(dir)?;
    let classes = &dataset.classes;
    let folds: Vec<Vec<&str>> = cv
        .plan
        .folds
        .iter()
        .map(|f| f.iter().map(|&s| dataset.studies[s].id.as_str()).collect())
        .collect();
    write(
        &dir.join("folds.json"),
        serde_json::to_string_pretty(&folds).expect("serialisable").as_bytes(),
    )?;
    for fold in &cv.folds {
        let fdir = dir.join(format!("fold{}", fold.fold + 1));
        create_dir(&fdir)?;
        write(&fdir.join("report.csv"), &csv_bytes(|b| fold.report.write_csv(classes, b))?)?;
        write(&fdir.join("confusion.csv"), &csv_bytes(|b| fold.confusion.write_csv(classes, b))?)?;
        write_predictions(&fdir.join("predictions.csv"), dataset, fold)?;
        if with_logs {
            write(&fdir.join("training_log.csv"), &csv_bytes(|b| fold.log.write_csv(b))?)?;
        }
    }
    write(&dir.join("report.csv"), &csv_bytes(|b| cv.pooled.write_csv(classes, b))?)?;
    write(&dir.join("confusion.csv"), &csv_bytes(|b| cv.confusion.write_csv(classes, b))?)?;
    let mut table = cv.pooled.to_table(classes);
    table.push_str("fold accuracies:");
    for f in &cv.folds {
        table.push_str(&format!(" {:.4}", f.report.accuracy_value()));
    }
    table.push('\n');
    write(&dir.join("report.txt"), table.as_bytes())
}
