//! Student-profile and exercise-description prompts.
//!
//! Inputs are rendered as JSON objects with the field names the generator
//! expects (`right_num`, `right_skills`, `wrong_num`, `wrong_skills` for
//! students; `skills`, optional `skills_diff` and `question_diff` for
//! exercises). Only the logs passed in are consulted, so callers hand over
//! the training split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ResponseDataset;
use crate::error::{Error, Result};

pub const STUDENT_INSTRUCTION: &str = "\
You are assisting with educational diagnosis. Describe the current student: \
their learning situation and how well they have mastered each knowledge \
concept, based on the answer record given below.

The record has these fields:
{\"right_num\": \"count of correctly answered questions\", \
\"right_skills\": \"concepts of each correctly answered question\", \
\"wrong_num\": \"count of incorrectly answered questions\", \
\"wrong_skills\": \"concepts of each incorrectly answered question\"}

Answer with a single JSON object and nothing else:
{\"summarization\": \"the student's learning situation and concept mastery\", \
\"reasoning\": \"why the summarization follows from the record\"}
Keep each field under 200 words.

Record:";

pub const EXERCISE_INSTRUCTION: &str = "\
You are assisting with educational diagnosis. Describe the type of the \
question below and the skills a student needs to answer it correctly.

The question is given as JSON:
{\"skills\": \"skill names, separated by semicolons\", \
\"skills_diff\": \"optional difficulty per skill, separated by semicolons\", \
\"question_diff\": \"correct answers over total answers\"}

Answer with a single JSON object and nothing else:
{\"summarization\": \"the question type\", \
\"reasoning\": \"why the summarization follows from the description\"}
Keep each field under 200 words.

Question:";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentPrompt {
    pub right_num: usize,
    /// One entry per correctly answered question; a question with several
    /// concepts contributes their names joined by `"; "`.
    pub right_skills: Vec<String>,
    pub wrong_num: usize,
    pub wrong_skills: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExercisePrompt {
    pub skills: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub skills_diff: Option<String>,
    pub question_diff: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptBundle {
    pub students: Vec<StudentPrompt>,
    pub exercises: Vec<ExercisePrompt>,
}

pub fn build_prompts(
    ds: &ResponseDataset,
    logs: &[usize],
    concept_names: &[String],
) -> Result<PromptBundle> {
    if concept_names.len() != ds.num_concepts {
        return Err(Error::Data(format!(
            "{} concept names for {} concepts",
            concept_names.len(),
            ds.num_concepts
        )));
    }
    if let Some(k) = concept_names.iter().position(|n| n.trim().is_empty()) {
        return Err(Error::Data(format!(
            "concept {} has an empty name",
            ds.concept_labels[k]
        )));
    }
    let skill = |j: usize| {
        ds.q_matrix
            .concepts_of(j)
            .iter()
            .map(|&k| concept_names[k].as_str())
            .collect::<Vec<_>>()
            .join("; ")
    };
    let mut students = vec![
        StudentPrompt {
            right_num: 0,
            right_skills: Vec::new(),
            wrong_num: 0,
            wrong_skills: Vec::new(),
        };
        ds.num_students
    ];
    let mut correct = vec![0usize; ds.num_exercises];
    let mut total = vec![0usize; ds.num_exercises];
    for &i in logs {
        let l = ds.logs[i];
        let p = &mut students[l.student];
        total[l.exercise] += 1;
        if l.correct {
            correct[l.exercise] += 1;
            p.right_num += 1;
            p.right_skills.push(skill(l.exercise));
        } else {
            p.wrong_num += 1;
            p.wrong_skills.push(skill(l.exercise));
        }
    }
    let exercises = (0..ds.num_exercises)
        .map(|j| ExercisePrompt {
            skills: skill(j),
            skills_diff: None,
            question_diff: format!("{}/{}", correct[j], total[j]),
        })
        .collect();
    Ok(PromptBundle {
        students,
        exercises,
    })
}

impl PromptBundle {
    pub fn student_input(&self, i: usize) -> String {
        serde_json::to_string(&self.students[i]).expect("plain struct")
    }

    pub fn exercise_input(&self, j: usize) -> String {
        serde_json::to_string(&self.exercises[j]).expect("plain struct")
    }

    /// Instruction followed by the JSON input.
    pub fn student_text(&self, i: usize) -> String {
        format!("{STUDENT_INSTRUCTION}\n{}", self.student_input(i))
    }

    pub fn exercise_text(&self, j: usize) -> String {
        format!("{EXERCISE_INSTRUCTION}\n{}", self.exercise_input(j))
    }

    pub fn student_texts(&self) -> Vec<String> {
        (0..self.students.len())
            .map(|i| self.student_text(i))
            .collect()
    }

    pub fn exercise_texts(&self) -> Vec<String> {
        (0..self.exercises.len())
            .map(|j| self.exercise_text(j))
            .collect()
    }

    /// One file per entity: `students/<label>.txt`, `exercises/<label>.txt`.
    pub fn dump(&self, dir: &Path, ds: &ResponseDataset) -> Result<()> {
        let sdir = dir.join("students");
        let edir = dir.join("exercises");
        std::fs::create_dir_all(&sdir)?;
        std::fs::create_dir_all(&edir)?;
        for i in 0..self.students.len() {
            std::fs::write(
                sdir.join(format!("{}.txt", ds.student_labels[i])),
                self.student_text(i),
            )?;
        }
        for j in 0..self.exercises.len() {
            std::fs::write(
                edir.join(format!("{}.txt", ds.exercise_labels[j])),
                self.exercise_text(j),
            )?;
        }
        Ok(())
    }
}
