//! Text formats.
//!
//! Logs: one `student,exercise,correct` triple per line. Q-matrix: one
//! `exercise,concept` pair per line. Fields may be separated by commas or
//! tabs and the first line may be a header. Identifiers are arbitrary
//! strings; they are re-indexed densely in numeric order when every id is an
//! integer and in lexicographic order otherwise, so files whose ids are
//! already `0..n` keep their numbering.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{QMatrix, ResponseDataset, ResponseLog};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions {
    /// Keep the first occurrence of a repeated (student, exercise) pair
    /// instead of rejecting the file.
    pub keep_first_duplicate: bool,
}

struct Row {
    line: usize,
    fields: Vec<String>,
}

fn split_fields(line: &str) -> Vec<String> {
    line.split([',', '\t'])
        .map(|f| f.trim().to_string())
        .collect()
}

fn read_rows(path: &Path, arity: usize) -> Result<Vec<Row>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields = split_fields(line);
        if fields.len() != arity {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected {arity} fields, found {}", fields.len()),
            });
        }
        rows.push(Row {
            line: i + 1,
            fields,
        });
    }
    Ok(rows)
}

fn is_numeric(s: &str) -> bool {
    s.parse::<i64>().is_ok()
}

fn parse_correct(s: &str) -> Option<bool> {
    match s {
        "1" | "1.0" | "true" => Some(true),
        "0" | "0.0" | "false" => Some(false),
        _ => None,
    }
}

/// First row is a header when it names the columns, or when some field is
/// non-numeric while the same column of the second row is numeric.
fn drop_header(rows: &mut Vec<Row>) {
    let Some(first) = rows.first() else { return };
    let named = first.fields.len() == 2
        && matches!(
            first.fields[0].to_ascii_lowercase().as_str(),
            "exercise" | "exercise_id" | "item"
        )
        && matches!(
            first.fields[1].to_ascii_lowercase().as_str(),
            "concept" | "concept_id" | "skill"
        );
    let header = named
        || rows.get(1).is_some_and(|second| {
            first
                .fields
                .iter()
                .zip(&second.fields)
                .any(|(a, b)| !is_numeric(a) && is_numeric(b))
        });
    if header {
        rows.remove(0);
    }
}

fn dense_ids<'a>(ids: impl Iterator<Item = &'a str>) -> (Vec<String>, HashMap<String, usize>) {
    let set: BTreeSet<&str> = ids.collect();
    let mut labels: Vec<String> = set.into_iter().map(str::to_string).collect();
    if labels.iter().all(|l| is_numeric(l)) {
        labels.sort_by_key(|l| l.parse::<i64>().expect("checked numeric"));
    }
    let index = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (l.clone(), i))
        .collect();
    (labels, index)
}

/// Load logs and Q-matrix; see the module docs for the format.
pub fn load_dataset(logs_path: &Path, qmatrix_path: &Path) -> Result<ResponseDataset> {
    load_dataset_with(logs_path, qmatrix_path, LoadOptions::default())
}

pub fn load_dataset_with(
    logs_path: &Path,
    qmatrix_path: &Path,
    opts: LoadOptions,
) -> Result<ResponseDataset> {
    let mut q_rows = read_rows(qmatrix_path, 2)?;
    drop_header(&mut q_rows);
    let (exercise_labels, exercise_index) = dense_ids(q_rows.iter().map(|r| r.fields[0].as_str()));
    let (concept_labels, concept_index) = dense_ids(q_rows.iter().map(|r| r.fields[1].as_str()));
    let mut concepts = vec![Vec::new(); exercise_labels.len()];
    for r in &q_rows {
        concepts[exercise_index[&r.fields[0]]].push(concept_index[&r.fields[1]]);
    }
    let q_matrix = QMatrix::new(concept_labels.len(), concepts)?;

    let mut log_rows = read_rows(logs_path, 3)?;
    if let Some(first) = log_rows.first() {
        if parse_correct(&first.fields[2]).is_none() {
            log_rows.remove(0);
        }
    }
    let (student_labels, student_index) = dense_ids(log_rows.iter().map(|r| r.fields[0].as_str()));

    let perr = |line: usize, msg: String| Error::Parse {
        path: logs_path.to_path_buf(),
        line,
        msg,
    };
    let mut logs = Vec::with_capacity(log_rows.len());
    let mut seen: HashMap<(usize, usize), usize> = HashMap::with_capacity(log_rows.len());
    for r in &log_rows {
        let student = student_index[&r.fields[0]];
        let exercise = *exercise_index.get(&r.fields[1]).ok_or_else(|| {
            perr(
                r.line,
                format!("exercise {} is not in the Q-matrix", r.fields[1]),
            )
        })?;
        let correct = parse_correct(&r.fields[2])
            .ok_or_else(|| perr(r.line, format!("correctness {:?} is not 0/1", r.fields[2])))?;
        if let Some(&prev) = seen.get(&(student, exercise)) {
            if opts.keep_first_duplicate {
                continue;
            }
            return Err(perr(
                r.line,
                format!(
                    "duplicate pair (student {}, exercise {}) first seen on line {prev}",
                    r.fields[0], r.fields[1]
                ),
            ));
        }
        seen.insert((student, exercise), r.line);
        logs.push(ResponseLog {
            student,
            exercise,
            correct,
        });
    }

    let ds = ResponseDataset {
        num_students: student_labels.len(),
        num_exercises: exercise_labels.len(),
        num_concepts: concept_labels.len(),
        logs,
        q_matrix,
        student_labels,
        exercise_labels,
        concept_labels,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write logs and Q-matrix with their original labels and a header line.
pub fn write_dataset(ds: &ResponseDataset, logs_path: &Path, qmatrix_path: &Path) -> Result<()> {
    let mut out = String::from("student,exercise,correct\n");
    for l in &ds.logs {
        let _ = writeln!(
            out,
            "{},{},{}",
            ds.student_labels[l.student],
            ds.exercise_labels[l.exercise],
            u8::from(l.correct)
        );
    }
    fs::write(logs_path, out)?;
    let mut q = String::from("exercise,concept\n");
    for j in 0..ds.num_exercises {
        for &k in ds.q_matrix.concepts_of(j) {
            let _ = writeln!(q, "{},{}", ds.exercise_labels[j], ds.concept_labels[k]);
        }
    }
    fs::write(qmatrix_path, q)?;
    Ok(())
}

/// Concept names file: `concept,name` per line. Names are returned in the
/// dataset's dense concept order; a concept without a name is an error.
pub fn load_concept_names(path: &Path, ds: &ResponseDataset) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    let mut names: HashMap<String, String> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Some((id, name)) = line.split_once([',', '\t']) else {
            return Err(Error::Parse {
                path: PathBuf::from(path),
                line: i + 1,
                msg: "expected `concept,name`".into(),
            });
        };
        names.insert(id.trim().to_string(), name.trim().to_string());
    }
    ds.concept_labels
        .iter()
        .map(|label| {
            names
                .get(label)
                .cloned()
                .ok_or_else(|| Error::Data(format!("no name for concept {label}")))
        })
        .collect()
}

pub fn write_concept_names(path: &Path, ds: &ResponseDataset, names: &[String]) -> Result<()> {
    let mut out = String::new();
    for (label, name) in ds.concept_labels.iter().zip(names) {
        let _ = writeln!(out, "{label},{name}");
    }
    fs::write(path, out)?;
    Ok(())
}
