//! Text-derived semantic vectors for students and exercises.

mod client;
mod pca;
mod prompts;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

pub use client::{
    description_text, fetch_embeddings, parse_embeddings, EmbeddingClient, HttpClient, HttpConfig,
    MockClient,
};
pub use pca::{pca_project, Pca};
pub use prompts::{
    build_prompts, ExercisePrompt, PromptBundle, StudentPrompt, EXERCISE_INSTRUCTION,
    STUDENT_INSTRUCTION,
};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Raw and projected semantic vectors for both entity types.
#[derive(Clone, Debug)]
pub struct SemanticTable {
    pub raw_students: Tensor,
    pub raw_exercises: Tensor,
    /// N × d.
    pub students: Tensor,
    /// M × d.
    pub exercises: Tensor,
    pub student_pca: Pca,
    pub exercise_pca: Pca,
}

impl SemanticTable {
    /// Fit one PCA per entity type and project to `d`.
    pub fn fit(raw_students: Tensor, raw_exercises: Tensor, d: usize) -> Result<Self> {
        if raw_students.cols() != raw_exercises.cols() {
            return Err(Error::Data(format!(
                "student embeddings have {} dims, exercise embeddings {}",
                raw_students.cols(),
                raw_exercises.cols()
            )));
        }
        let (students, student_pca) = pca_project(&raw_students, d)?;
        let (exercises, exercise_pca) = pca_project(&raw_exercises, d)?;
        Ok(SemanticTable {
            raw_students,
            raw_exercises,
            students,
            exercises,
            student_pca,
            exercise_pca,
        })
    }
}

/// Write `label<TAB>v1,v2,...` per row.
pub fn write_embeddings(path: &Path, labels: &[String], vectors: &Tensor) -> Result<()> {
    let mut out = String::new();
    for (r, label) in labels.iter().enumerate() {
        let _ = write!(out, "{label}\t");
        for (c, x) in vectors.row(r).iter().enumerate() {
            if c > 0 {
                out.push(',');
            }
            // Shortest representation that round-trips.
            let _ = write!(out, "{x:?}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read an embedding file and order its rows by `labels`. Every label must
/// be present and every row must have the same dimension.
pub fn read_embeddings(path: &Path, labels: &[String]) -> Result<Tensor> {
    let text = std::fs::read_to_string(path)?;
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut rows: HashMap<&str, Vec<f64>> = HashMap::new();
    let mut dim = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, values) = line
            .split_once('\t')
            .ok_or_else(|| perr(i + 1, "expected `id<TAB>v1,v2,...`".into()))?;
        let v = values
            .split(',')
            .map(|x| x.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| perr(i + 1, format!("bad value: {e}")))?;
        if let Some(x) = v.iter().find(|x| !x.is_finite()) {
            return Err(perr(i + 1, format!("non-finite value {x}")));
        }
        match dim {
            None => dim = Some(v.len()),
            Some(d) if d != v.len() => {
                return Err(perr(
                    i + 1,
                    format!("{} values, earlier rows have {d}", v.len()),
                ))
            }
            _ => {}
        }
        if rows.insert(id.trim(), v).is_some() {
            return Err(perr(i + 1, format!("id {} repeated", id.trim())));
        }
    }
    let dim = dim.unwrap_or(0);
    let mut data = Vec::with_capacity(labels.len() * dim);
    for label in labels {
        let v = rows.get(label.as_str()).ok_or_else(|| {
            Error::Data(format!("{}: no embedding for id {label}", path.display()))
        })?;
        data.extend_from_slice(v);
    }
    Ok(Tensor::matrix(labels.len(), dim, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embedding_file_round_trip_and_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        let labels: Vec<String> = vec!["a".into(), "b".into()];
        let t = Tensor::matrix(2, 3, vec![0.1, -2.5, 1e-17, 3.0, 4.0, 5.0]);
        write_embeddings(&p, &labels, &t).unwrap();
        assert_eq!(read_embeddings(&p, &labels).unwrap(), t);
        let rev = read_embeddings(&p, &["b".into(), "a".into()]).unwrap();
        assert_eq!(rev.row(0), t.row(1));
        assert!(read_embeddings(&p, &["c".into()]).is_err());
    }

    #[test]
    fn ragged_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        std::fs::write(&p, "a\t1,2\nb\t1,2,3\n").unwrap();
        assert!(matches!(
            read_embeddings(&p, &["a".into()]),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
