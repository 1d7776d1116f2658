//! From a run config to training inputs: data, split, noise and semantic vectors.

use crate::dataset::{
    inject_noise, load_concept_names, load_dataset, split, split_stratified, synthetic, NoiseSpec,
    ResponseDataset, SplitSpec,
};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::semantics::{
    build_prompts, fetch_embeddings, read_embeddings, EmbeddingClient, HttpClient, MockClient,
    PromptBundle, SemanticTable,
};

use super::config::{EmbeddingProvider, Framework, RunConfig};
use super::trainer::TrainData;

/// A dataset with the names used in prompts.
#[derive(Clone, Debug)]
pub struct Source {
    pub dataset: ResponseDataset,
    pub concept_names: Vec<String>,
}

/// Read the configured files or generate synthetic data.
pub fn load_source(cfg: &RunConfig) -> Result<Source> {
    let d = &cfg.data;
    let (mut dataset, concept_names) = match (&d.synthetic, &d.logs, &d.q_matrix) {
        (Some(syn), None, None) => {
            let s = synthetic::generate(syn)?;
            (s.dataset, Some(s.concept_names))
        }
        (None, Some(logs), Some(q)) => {
            let ds = load_dataset(logs, q)?;
            let names = d
                .concept_names
                .as_deref()
                .map(|p| load_concept_names(p, &ds))
                .transpose()?;
            (ds, names)
        }
        (Some(_), _, _) => {
            return Err(Error::Config(
                "data.synthetic cannot be combined with data.logs/q_matrix".into(),
            ))
        }
        _ => {
            return Err(Error::Config(
                "set data.logs and data.q_matrix, or data.synthetic".into(),
            ))
        }
    };
    if d.min_responses > 0 {
        dataset = dataset.filter_min_responses(d.min_responses)?;
    }
    let concept_names = match concept_names {
        Some(n) if d.min_responses == 0 => n,
        _ => dataset
            .concept_labels
            .iter()
            .map(|l| format!("concept {l}"))
            .collect(),
    };
    Ok(Source {
        dataset,
        concept_names,
    })
}

/// Split and, when configured, inject noise into the training portion.
pub fn split_and_noise(
    cfg: &RunConfig,
    ds: &ResponseDataset,
) -> Result<(ResponseDataset, SplitSpec, Option<NoiseSpec>)> {
    let d = &cfg.data;
    let spec = if d.stratified {
        split_stratified(ds, d.split_seed)?
    } else {
        split(ds, d.split_seed)?
    };
    if d.noise_level > 0.0 {
        let (noisy, spec, noise) =
            inject_noise(ds, &spec, d.noise_level, d.split_seed, d.noise_mode)?;
        Ok((noisy, spec, Some(noise)))
    } else {
        Ok((ds.clone(), spec, None))
    }
}

pub fn prompts(source: &Source, ds: &ResponseDataset, split: &SplitSpec) -> Result<PromptBundle> {
    build_prompts(ds, &split.train, &source.concept_names)
}

/// Raw student and exercise embeddings from the configured provider.
pub fn raw_embeddings(
    cfg: &RunConfig,
    ds: &ResponseDataset,
    bundle: &PromptBundle,
) -> Result<(Tensor, Tensor)> {
    let s = &cfg.semantics;
    match s.provider {
        EmbeddingProvider::Files => {
            let (Some(sf), Some(ef)) = (&s.student_file, &s.exercise_file) else {
                return Err(Error::Config(
                    "provider `files` needs semantics.student_file and semantics.exercise_file"
                        .into(),
                ));
            };
            Ok((
                read_embeddings(sf, &ds.student_labels)?,
                read_embeddings(ef, &ds.exercise_labels)?,
            ))
        }
        EmbeddingProvider::Mock => {
            let client = MockClient::new(s.mock_dim, cfg.data.split_seed);
            embed_bundle(&client, bundle)
        }
        EmbeddingProvider::Http => {
            let http = s.http.clone().ok_or_else(|| {
                Error::Config("provider `http` needs a [semantics.http] table".into())
            })?;
            let client = HttpClient::new(http)?;
            embed_bundle(&client, bundle)
        }
    }
}

fn embed_bundle(client: &dyn EmbeddingClient, bundle: &PromptBundle) -> Result<(Tensor, Tensor)> {
    Ok((
        fetch_embeddings(&bundle.student_texts(), client)?,
        fetch_embeddings(&bundle.exercise_texts(), client)?,
    ))
}

/// Project raw embeddings to width `d` and stack students over exercises.
pub fn project(raw_students: Tensor, raw_exercises: Tensor, d: usize) -> Result<Tensor> {
    let table = SemanticTable::fit(raw_students, raw_exercises, d)?;
    Tensor::vstack(&[&table.students, &table.exercises])
}

/// Whether a config consumes semantic vectors at all.
pub fn needs_semantics(cfg: &RunConfig) -> bool {
    cfg.model.framework == Framework::Dllm && cfg.ablation.semantic
}

/// Everything `train` needs, built from the config alone.
pub fn prepare(cfg: &RunConfig) -> Result<(Source, TrainData, Option<NoiseSpec>)> {
    let source = load_source(cfg)?;
    let (dataset, split, noise) = split_and_noise(cfg, &source.dataset)?;
    let semantic = if needs_semantics(cfg) {
        let bundle = prompts(&source, &dataset, &split)?;
        let (rs, re) = raw_embeddings(cfg, &dataset, &bundle)?;
        Some(project(rs, re, cfg.model.dim_for(dataset.num_concepts))?)
    } else {
        None
    };
    Ok((
        source,
        TrainData {
            dataset,
            split,
            semantic,
        },
        noise,
    ))
}
