//! Parameters and forward computations of one run.

use std::sync::Arc;

use crate::alignment::{fuse, relation_loss, semantic_loss, SubgraphViews};
use crate::cdm::{bce_logits, mastery, Head, TransformLayer};
use crate::dataset::{ResponseDataset, ResponseLog};
use crate::diffusion::{
    cond_loss, param_seed, refine, register_denoiser, register_film, uncond_loss,
    ConditionalDenoiser, Denoiser, DenoiserIds, DiffusionSchedule, FilmIds, NoisePredictor,
};
use crate::error::{Error, Result};
use crate::graphs::{decompose, lightgcn};
use crate::numerics::{
    rng, sigmoid, xavier_uniform, Binding, ParamId, ParamStore, SparseMatrix, Tape, Tensor, Var,
};

use super::config::{Framework, RunConfig};

/// Handles of every parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelIds {
    /// Base embedding table, students then exercises.
    pub table: ParamId,
    pub fusion: Option<(ParamId, ParamId)>,
    pub ddm_u: Option<DenoiserIds>,
    pub ddm_c: Option<(DenoiserIds, FilmIds)>,
    /// Concept table transformed alongside the entity rows.
    pub concepts: Option<ParamId>,
    pub transform: Option<TransformLayer>,
    pub head: Head,
}

/// Tape values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub cor: Option<Var>,
    pub incor: Option<Var>,
    /// Fused representation (DLLM) or the table itself (plain), N+M rows.
    pub fused: Var,
    /// Rows consumed by the head: students, exercises, then any concept rows.
    pub head_input: Var,
}

/// Regulariser values on the tape; absent terms are ablated.
#[derive(Clone, Copy, Debug, Default)]
pub struct Regularizers {
    pub relation: Option<Var>,
    pub semantic: Option<Var>,
    pub uncond: Option<Var>,
    pub cond: Option<Var>,
}

pub struct Model {
    pub config: RunConfig,
    pub store: ParamStore,
    pub ids: ModelIds,
    pub num_students: usize,
    pub num_exercises: usize,
    pub num_concepts: usize,
    pub dim: usize,
    /// Normalised cor, incor, cor_aug, incor_aug adjacencies (DLLM only).
    graphs: Option<[Arc<SparseMatrix>; 4]>,
    /// M × Z dense Q rows.
    q_rows: Tensor,
    semantic: Option<Tensor>,
    schedule: DiffusionSchedule,
}

fn xavier(store: &mut ParamStore, name: &str, shape: [usize; 2], seed: u64) -> Result<ParamId> {
    store.add(name, xavier_uniform(&shape, param_seed(seed, name)))
}

impl Model {
    /// Build from the training logs `train` of `ds`. `semantic` stacks the
    /// projected student rows over the exercise rows.
    pub fn build(
        config: &RunConfig,
        ds: &ResponseDataset,
        train: &[usize],
        semantic: Option<Tensor>,
    ) -> Result<Model> {
        config.validate()?;
        let (n, m, z) = (ds.num_students, ds.num_exercises, ds.num_concepts);
        let d = config.model.dim_for(z);
        let seed = config.seed;
        let dllm = config.model.framework == Framework::Dllm;
        if let Some(&bad) = train.iter().find(|&&i| i >= ds.logs.len()) {
            return Err(Error::Data(format!(
                "training index {bad} outside {} logs",
                ds.logs.len()
            )));
        }
        if dllm && config.ablation.semantic {
            match &semantic {
                None => {
                    return Err(Error::Config(
                        "semantic alignment is on but no semantic vectors were supplied".into(),
                    ))
                }
                Some(v) if v.shape() != [n + m, d] => {
                    return Err(Error::Data(format!(
                        "semantic vectors have shape {:?}, expected [{}, {d}]",
                        v.shape(),
                        n + m
                    )))
                }
                _ => {}
            }
        }

        let graphs = if dllm {
            let mut pair = decompose(ds, train);
            if config.ablation.raa {
                pair.augment(seed, 0)?;
            }
            Some(pair.normalized())
        } else {
            None
        };

        let mut store = ParamStore::new();
        let table = xavier(&mut store, "table", [n + m, d], seed)?;
        let (fusion, ddm_u, ddm_c) = if dllm {
            let w = xavier(&mut store, "fusion.w", [2 * d, d], seed)?;
            let b = store.add("fusion.b", Tensor::zeros(&[1, d]))?;
            let u = register_denoiser(&mut store, "ddm_u", d, seed)?;
            let c = register_denoiser(&mut store, "ddm_c", d, seed)?;
            let f = register_film(&mut store, "ddm_c.film", d, seed)?;
            (Some((w, b)), Some(u), Some((c, f)))
        } else {
            (None, None, None)
        };
        let kind = config.model.head;
        let (concepts, transform, head_dim) = if !kind.is_latent() && d != z {
            let k = xavier(&mut store, "concepts", [z, d], seed)?;
            let t = TransformLayer::register(&mut store, n + m + z, d, z, seed)?;
            (Some(k), Some(t), z)
        } else {
            (None, None, d)
        };
        let [h1, h2] = config.model.hidden;
        let head = Head::register(&mut store, kind, head_dim, z, (h1, h2), seed)?;

        let q_rows = Tensor::matrix(
            m,
            z,
            (0..m).flat_map(|j| ds.q_matrix.dense_row(j)).collect(),
        );
        Ok(Model {
            config: config.clone(),
            store,
            ids: ModelIds {
                table,
                fusion,
                ddm_u,
                ddm_c,
                concepts,
                transform,
                head,
            },
            num_students: n,
            num_exercises: m,
            num_concepts: z,
            dim: d,
            graphs,
            q_rows,
            semantic: if dllm { semantic } else { None },
            schedule: config.diffusion.schedule()?,
        })
    }

    pub fn is_dllm(&self) -> bool {
        self.graphs.is_some()
    }

    /// Parameters updated only through the named term's gradient.
    /// Normalised cor, incor, cor_aug, incor_aug adjacencies; `None` for plain backbones.
    pub fn graphs(&self) -> Option<&[Arc<SparseMatrix>; 4]> {
        self.graphs.as_ref()
    }

    pub fn term_params(&self, term: &str) -> Vec<ParamId> {
        match term {
            "uncond" => self.ids.ddm_u.map(|u| u.ids().to_vec()).unwrap_or_default(),
            "cond" => self
                .ids
                .ddm_c
                .map(|(c, f)| c.ids().iter().chain(f.ids().iter()).copied().collect())
                .unwrap_or_default(),
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, tape: &mut Tape, b: &Binding) -> Result<Forward> {
        let table = b.var(self.ids.table);
        let (cor, incor, fused) = match (&self.graphs, self.ids.fusion) {
            (Some(g), Some((w, bias))) => {
                let layers = self.config.model.layers;
                let cor = lightgcn(tape, &g[0], table, layers)?;
                let incor = lightgcn(tape, &g[1], table, layers)?;
                let fused = fuse(
                    tape,
                    cor,
                    incor,
                    &[(b.var(w), b.var(bias))],
                    self.config.model.fusion_activation,
                )?;
                (Some(cor), Some(incor), fused)
            }
            _ => (None, None, table),
        };
        let head_input = match (self.ids.transform, self.ids.concepts) {
            (Some(t), Some(k)) => {
                let stacked = tape.concat_rows(fused, b.var(k))?;
                t.apply(tape, b, stacked)?
            }
            _ => fused,
        };
        Ok(Forward {
            cor,
            incor,
            fused,
            head_input,
        })
    }

    /// Head logits for `logs`, one per row.
    pub fn logits(
        &self,
        tape: &mut Tape,
        b: &Binding,
        fwd: &Forward,
        logs: &[ResponseLog],
    ) -> Result<Var> {
        let n = self.num_students;
        let students: Vec<usize> = logs.iter().map(|l| l.student).collect();
        let exercises: Vec<usize> = logs.iter().map(|l| n + l.exercise).collect();
        let q: Vec<usize> = logs.iter().map(|l| l.exercise).collect();
        let hs = tape.gather_rows(fwd.head_input, &students)?;
        let he = tape.gather_rows(fwd.head_input, &exercises)?;
        let qv = tape.constant(self.q_rows.gather_rows(&q));
        self.ids.head.logits(tape, b, hs, he, qv)
    }

    pub fn bce(
        &self,
        tape: &mut Tape,
        b: &Binding,
        fwd: &Forward,
        logs: &[ResponseLog],
    ) -> Result<Var> {
        let z = self.logits(tape, b, fwd, logs)?;
        let labels = Tensor::matrix(
            logs.len(),
            1,
            logs.iter()
                .map(|l| f64::from(u8::from(l.correct)))
                .collect(),
        );
        bce_logits(tape, z, &labels, self.config.train.bce)
    }

    /// Alignment and diffusion terms for one step. `stream` separates the
    /// random draws of different steps.
    pub fn regularizers(
        &self,
        tape: &mut Tape,
        b: &Binding,
        fwd: &Forward,
        stream: u64,
    ) -> Result<Regularizers> {
        let (Some(g), Some(cor), Some(incor)) = (&self.graphs, fwd.cor, fwd.incor) else {
            return Ok(Regularizers::default());
        };
        let cfg = &self.config;
        let abl = cfg.ablation;
        let seed = cfg.seed;
        let layers = cfg.model.layers;
        let table = b.var(self.ids.table);
        let (cor_aug, incor_aug) = if abl.raa {
            (
                lightgcn(tape, &g[2], table, layers)?,
                lightgcn(tape, &g[3], table, layers)?,
            )
        } else {
            (cor, incor)
        };
        let nodes = self.num_students + self.num_exercises;
        let (u_ids, (c_ids, film)) = (self.ids.ddm_u.expect("dllm"), self.ids.ddm_c.expect("dllm"));
        let t_star = cfg.diffusion.t_star;

        // Refine the augmented views conditioned on the original views.
        let aug_values = Tensor::vstack(&[tape.value(cor_aug), tape.value(incor_aug)])?;
        let orig_values = Tensor::vstack(&[tape.value(cor), tape.value(incor)])?;
        let refining = (abl.ddm_u || abl.ddm_c) && t_star > 0;
        let (pos_cor, pos_incor) = if refining {
            let refined = self.refine(
                &aug_values,
                &orig_values,
                u_ids,
                c_ids,
                film,
                &mut rng::stream(seed, "refine-relation", stream),
            )?;
            (
                tape.constant(refined.slice_rows(0, nodes)),
                tape.constant(refined.slice_rows(nodes, 2 * nodes)),
            )
        } else {
            (cor_aug, incor_aug)
        };
        let relation = relation_loss(
            tape,
            &[
                SubgraphViews {
                    original: cor,
                    augmented: pos_cor,
                },
                SubgraphViews {
                    original: incor,
                    augmented: pos_incor,
                },
            ],
            self.num_students,
            &cfg.alignment,
            &mut rng::stream(seed, "nce-relation", stream),
        )?;

        let fused_values = tape.value(fwd.fused).clone();
        let semantic = match (&self.semantic, abl.semantic) {
            (Some(v), true) => {
                let target = if refining {
                    let r = self.refine(
                        v,
                        &fused_values,
                        u_ids,
                        c_ids,
                        film,
                        &mut rng::stream(seed, "refine-semantic", stream),
                    )?;
                    tape.constant(r)
                } else {
                    tape.constant(v.clone())
                };
                Some(semantic_loss(
                    tape,
                    fwd.fused,
                    target,
                    self.num_students,
                    &cfg.alignment,
                    &mut rng::stream(seed, "nce-semantic", stream),
                )?)
            }
            _ => None,
        };

        // Denoisers learn on detached representations.
        let (x0, c) = match (&self.semantic, abl.semantic) {
            (Some(v), true) => (
                Tensor::vstack(&[&aug_values, v])?,
                Tensor::vstack(&[&orig_values, &fused_values])?,
            ),
            _ => (aug_values, orig_values),
        };
        let uncond = if abl.ddm_u {
            Some(uncond_loss(
                tape,
                &u_ids.vars(b),
                &x0,
                &self.schedule,
                &mut rng::stream(seed, "ddm-u", stream),
            )?)
        } else {
            None
        };
        let cond = if abl.ddm_c {
            Some(cond_loss(
                tape,
                &c_ids.vars(b),
                &film.vars(b),
                &x0,
                &c,
                &self.schedule,
                &mut rng::stream(seed, "ddm-c", stream),
            )?)
        } else {
            None
        };
        Ok(Regularizers {
            relation: Some(relation),
            semantic,
            uncond,
            cond,
        })
    }

    fn refine(
        &self,
        x: &Tensor,
        c: &Tensor,
        u_ids: DenoiserIds,
        c_ids: DenoiserIds,
        film: FilmIds,
        rng: &mut rng::StreamRng,
    ) -> Result<Tensor> {
        let abl = self.config.ablation;
        let u = Denoiser {
            store: &self.store,
            ids: u_ids,
        };
        let cd = ConditionalDenoiser {
            base: Denoiser {
                store: &self.store,
                ids: c_ids,
            },
            film,
            condition: c,
        };
        let stage1: Option<&dyn NoisePredictor> = if abl.ddm_u { Some(&u) } else { None };
        let stage2: Option<&dyn NoisePredictor> = if abl.ddm_c { Some(&cd) } else { None };
        refine(
            x,
            stage1,
            stage2,
            &self.schedule,
            self.config.diffusion.t_star,
            rng,
        )
    }

    /// Head input rows with frozen parameters.
    pub fn head_input(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let fwd = self.forward(&mut tape, &b)?;
        Ok(tape.value(fwd.head_input).clone())
    }

    /// `P(correct)` for every log, evaluated in chunks of the batch size.
    pub fn predict(&self, logs: &[ResponseLog]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let b = self.store.bind_frozen(&mut tape);
        let fwd = self.forward(&mut tape, &b)?;
        let mut out = Vec::with_capacity(logs.len());
        for chunk in logs.chunks(self.config.train.batch_size.max(1)) {
            let z = self.logits(&mut tape, &b, &fwd, chunk)?;
            out.extend(tape.value(z).data().iter().map(|&x| sigmoid(x)));
        }
        Ok(out)
    }

    /// Student mastery (N × Z) for heads that expose it.
    pub fn mastery(&self) -> Result<Tensor> {
        if !self.ids.head.kind.supports_mastery() {
            return mastery(self.ids.head.kind, &Tensor::zeros(&[0, 0]));
        }
        let h = self.head_input()?;
        mastery(self.ids.head.kind, &h.slice_rows(0, self.num_students))
    }
}
