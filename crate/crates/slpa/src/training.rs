//! Optimization loop, Adam optimizer, run configuration for the named model
//! variants, training history, and the checkpoint codec.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batching::{sample_pair_batch, sample_quadruplet_batch};
use crate::data::EpochDataset;
use crate::error::{Error, Result};
use crate::losses::{
    clip_loss, cross_entropy_head, encode_pairs, latent_permutation_from_encoded, pooled_banks,
    reconstruction_loss, LatentSpace, LossComponent, LossConfig,
};
use crate::model::{LatentCodec, Model, ModelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SLPA";
pub const CHECKPOINT_FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second-moment accumulators per parameter, plus the step counter.
pub struct AdamState {
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &IndexMap<String, Tensor<f32>>) -> AdamState {
        let m = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        let v = params
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.numel()]))
            .collect();
        AdamState { m, v, t: 0 }
    }
}

/// One bias-corrected Adam update in place. Parameters without an entry in
/// `grads` are left untouched (their moments still decay consistently by
/// skipping the step entirely for them).
pub fn adam_step(
    params: &mut IndexMap<String, Tensor<f32>>,
    grads: &HashMap<String, Vec<f32>>,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for (name, tensor) in params.iter_mut() {
        let Some(grad) = grads.get(name) else {
            continue;
        };
        if grad.len() != tensor.numel() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} elements, parameter has {}",
                grad.len(),
                tensor.numel()
            )));
        }
        let m = state.m.get_mut(name).expect("state covers all params");
        let v = state.v.get_mut(name).expect("state covers all params");
        for ((p, &g), (mi, vi)) in tensor
            .data_mut()
            .iter_mut()
            .zip(grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g as f64;
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * g;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= (hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps)) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub steps: usize,
    /// Requested pairs (or quadruplets / plain samples) per batch; clamped
    /// to the number of eligible classes where pair sampling requires
    /// distinct classes.
    pub k_pairs: usize,
    pub optimizer: AdamHyper,
    pub seed: u64,
    /// Checkpoint every this many steps into `out_dir` (0 disables).
    pub checkpoint_every: usize,
    pub out_dir: Option<std::path::PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            steps: 1000,
            k_pairs: 16,
            optimizer: AdamHyper::default(),
            seed: 0,
            checkpoint_every: 0,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("steps must be positive".into()));
        }
        if self.k_pairs == 0 {
            return Err(Error::Config("k_pairs must be positive".into()));
        }
        if self.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.loss.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// One record per optimization step: each enabled component and their sum.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub step: usize,
    /// values in the variant's component order
    pub components: Vec<(&'static str, f64)>,
    pub total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainHistory {
    pub records: Vec<StepRecord>,
}

impl TrainHistory {
    pub fn component_names(&self) -> Vec<&'static str> {
        self.records
            .first()
            .map(|r| r.components.iter().map(|(n, _)| *n).collect())
            .unwrap_or_default()
    }

    /// Comma-separated values with a header row of component names.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let names = self.component_names();
        writeln!(out, "step,{},total", names.join(","))?;
        for r in &self.records {
            let vals: Vec<String> = r.components.iter().map(|(_, v)| format!("{v}")).collect();
            writeln!(out, "{},{},{}", r.step, vals.join(","), r.total)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Auxiliary linear probes used only by the supervised-classification
/// variants; they are trained jointly but are not part of the checkpoint.
struct CeHeads {
    params: IndexMap<String, Tensor<f32>>,
}

impl CeHeads {
    fn build(
        config: &ModelConfig,
        components: &[LossComponent],
        n_subjects: usize,
        n_tasks: usize,
        rng: &mut ChaCha8Rng,
    ) -> CeHeads {
        let mut params = IndexMap::new();
        let head = |params: &mut IndexMap<String, Tensor<f32>>,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        classes: usize| {
            // heads consume moment-pooled latents: [mean, std] per dimension
            let d_in = 2 * config.d_latent;
            let limit = (6.0 / d_in as f64).sqrt() as f32;
            let data: Vec<f32> = (0..d_in * classes)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            params.insert(
                format!("{name}.w"),
                Tensor::from_vec(vec![d_in, classes], data).unwrap(),
            );
            params.insert(format!("{name}.b"), Tensor::zeros(vec![1, classes]));
        };
        if components.contains(&LossComponent::CeSubject) {
            head(&mut params, rng, "head.subject", n_subjects);
        }
        if components.contains(&LossComponent::CeTask) {
            head(&mut params, rng, "head.task", n_tasks);
        }
        CeHeads { params }
    }
}

fn max_label(labels: &[u32]) -> usize {
    labels.iter().copied().max().unwrap_or(0) as usize
}

fn pair_tensors(
    dataset: &EpochDataset,
    pairs: &[(usize, usize)],
) -> Vec<(Tensor<f32>, Tensor<f32>)> {
    pairs
        .iter()
        .map(|&(a, b)| (dataset.epoch(a).clone(), dataset.epoch(b).clone()))
        .collect()
}

/// Run the variant's loss set for `steps` optimization steps.
///
/// Each step draws the batches its components need (one subject-pair batch,
/// one task-pair batch, one quadruplet batch and/or one plain batch), builds
/// the unweighted component sum on a fresh tape, backpropagates and applies
/// one Adam update. A non-finite total aborts the run.
pub fn train(config: &TrainConfig, dataset: &EpochDataset) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if dataset.n_channels() != config.model.n_channels || dataset.n_time() != config.model.n_time {
        return Err(Error::Shape(format!(
            "dataset epochs are [{}, {}] but the model expects [{}, {}]",
            dataset.n_channels(),
            dataset.n_time(),
            config.model.n_channels,
            config.model.n_time
        )));
    }
    let components = config.loss.variant.components();
    let mut model = Model::build(config.model.clone(), config.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut heads = CeHeads::build(
        &config.model,
        components,
        max_label(dataset.subject_ids()) + 1,
        max_label(dataset.task_ids()) + 1,
        &mut rng,
    );

    let n_subject_classes = dataset.subjects().len();
    let n_task_classes = dataset.tasks().len();
    let k_subject = config.k_pairs.min(n_subject_classes);
    let k_task = config.k_pairs.min(n_task_classes);

    let needs_subject_pairs = components.iter().any(|c| {
        matches!(c, LossComponent::LpSubject | LossComponent::ClipSubject)
    });
    let needs_task_pairs = components
        .iter()
        .any(|c| matches!(c, LossComponent::LpTask | LossComponent::ClipTask));
    let needs_plain = components.iter().any(|c| {
        matches!(
            c,
            LossComponent::Recon | LossComponent::CeSubject | LossComponent::CeTask
        )
    });

    let mut optimizer = AdamState::new(model.params());
    let mut head_optimizer = AdamState::new(&heads.params);
    let mut history = TrainHistory::default();

    for step in 0..config.steps {
        let mut tape: Tape<f32> = Tape::new();
        let staged = model.stage::<f32>(&mut tape, true);
        let mut head_vars: HashMap<String, Var> = HashMap::new();
        for (name, tensor) in &heads.params {
            head_vars.insert(name.clone(), tape.leaf(tensor, true));
        }

        let subject_encoded = if needs_subject_pairs {
            let batch = sample_pair_batch(dataset, LatentSpace::Subject, k_subject, &mut rng)?;
            let tensors = pair_tensors(dataset, &batch.pairs);
            Some(encode_pairs(&mut tape, &staged, &tensors)?)
        } else {
            None
        };
        let task_encoded = if needs_task_pairs {
            let batch = sample_pair_batch(dataset, LatentSpace::Task, k_task, &mut rng)?;
            let tensors = pair_tensors(dataset, &batch.pairs);
            Some(encode_pairs(&mut tape, &staged, &tensors)?)
        } else {
            None
        };
        let plain: Option<Vec<usize>> = if needs_plain {
            Some(
                (0..config.k_pairs)
                    .map(|_| rng.gen_range(0..dataset.len()))
                    .collect(),
            )
        } else {
            None
        };
        let plain_encoded: Option<Vec<(Var, (Var, Var))>> = match &plain {
            Some(indices) => {
                let mut encoded = Vec::with_capacity(indices.len());
                for &i in indices {
                    let x = tape.constant(dataset.epoch(i));
                    let latents = staged.encode_vars(&mut tape, x)?;
                    encoded.push((x, latents));
                }
                Some(encoded)
            }
            None => None,
        };

        let mut component_vars: Vec<(&'static str, Var)> = Vec::with_capacity(components.len());
        for component in components {
            let var = match component {
                LossComponent::Recon => {
                    let encoded = plain_encoded.as_ref().unwrap();
                    let mut total: Option<Var> = None;
                    for (x, (zs, zt)) in encoded {
                        let hat = staged.decode_vars(&mut tape, *zs, *zt)?;
                        let term = reconstruction_loss(&mut tape, *x, hat)?;
                        total = Some(match total {
                            Some(t) => tape.add(t, term)?,
                            None => term,
                        });
                    }
                    let total = total.unwrap();
                    tape.scale(total, 1.0 / encoded.len() as f32)
                }
                LossComponent::LpSubject => latent_permutation_from_encoded(
                    &mut tape,
                    &staged,
                    LatentSpace::Subject,
                    subject_encoded.as_ref().unwrap(),
                )?,
                LossComponent::LpTask => latent_permutation_from_encoded(
                    &mut tape,
                    &staged,
                    LatentSpace::Task,
                    task_encoded.as_ref().unwrap(),
                )?,
                LossComponent::ClipSubject => {
                    let encoded = subject_encoded.as_ref().unwrap();
                    let (bank_a, bank_b) =
                        pooled_banks(&mut tape, encoded, LatentSpace::Subject)?;
                    clip_loss(
                        &mut tape,
                        &bank_a,
                        &bank_b,
                        config.loss.temperature,
                        config.loss.denominator_includes_positive,
                    )?
                }
                LossComponent::ClipTask => {
                    let encoded = task_encoded.as_ref().unwrap();
                    let (bank_a, bank_b) = pooled_banks(&mut tape, encoded, LatentSpace::Task)?;
                    clip_loss(
                        &mut tape,
                        &bank_a,
                        &bank_b,
                        config.loss.temperature,
                        config.loss.denominator_includes_positive,
                    )?
                }
                LossComponent::CeSubject | LossComponent::CeTask => {
                    let encoded = plain_encoded.as_ref().unwrap();
                    let indices = plain.as_ref().unwrap();
                    let subject = *component == LossComponent::CeSubject;
                    let (w, b) = if subject {
                        (head_vars["head.subject.w"], head_vars["head.subject.b"])
                    } else {
                        (head_vars["head.task.w"], head_vars["head.task.b"])
                    };
                    let mut total: Option<Var> = None;
                    for (&i, (_, (zs, zt))) in indices.iter().zip(encoded) {
                        let (z, label) = if subject {
                            (*zs, dataset.subject(i) as usize)
                        } else {
                            (*zt, dataset.task(i) as usize)
                        };
                        let pooled = crate::losses::pooled_moments(&mut tape, z)?;
                        let term = cross_entropy_head(&mut tape, pooled, label, w, b)?;
                        total = Some(match total {
                            Some(t) => tape.add(t, term)?,
                            None => term,
                        });
                    }
                    let total = total.unwrap();
                    tape.scale(total, 1.0 / encoded.len() as f32)
                }
                LossComponent::Qp => {
                    let batch = sample_quadruplet_batch(dataset, config.k_pairs, &mut rng)?;
                    let quads: Vec<[Tensor<f32>; 4]> = batch
                        .quads
                        .iter()
                        .map(|&(a, b, c, d)| {
                            [
                                dataset.epoch(a).clone(),
                                dataset.epoch(b).clone(),
                                dataset.epoch(c).clone(),
                                dataset.epoch(d).clone(),
                            ]
                        })
                        .collect();
                    crate::losses::quadruplet_permutation_loss(&mut tape, &staged, &quads)?
                }
            };
            component_vars.push((component.name(), var));
        }

        let mut total_var: Option<Var> = None;
        for &(_, v) in &component_vars {
            total_var = Some(match total_var {
                Some(t) => tape.add(t, v)?,
                None => v,
            });
        }
        let total_var = total_var.expect("every variant has at least one component");
        let total = tape.scalar_value(total_var) as f64;
        if !total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite total loss {total} at step {step}; aborting"
            )));
        }
        let record = StepRecord {
            step,
            components: component_vars
                .iter()
                .map(|&(n, v)| (n, tape.scalar_value(v) as f64))
                .collect(),
            total,
        };
        history.records.push(record);

        tape.backward(total_var)?;
        let mut grads: HashMap<String, Vec<f32>> = HashMap::new();
        for (name, &var) in staged.vars() {
            if let Some(g) = tape.grad(var) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        let mut head_grads: HashMap<String, Vec<f32>> = HashMap::new();
        for (name, &var) in &head_vars {
            if let Some(g) = tape.grad(var) {
                head_grads.insert(name.clone(), g.to_vec());
            }
        }
        drop(tape);
        adam_step(model.params_mut(), &grads, &mut optimizer, &config.optimizer)?;
        adam_step(
            &mut heads.params,
            &head_grads,
            &mut head_optimizer,
            &config.optimizer,
        )?;

        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            if let Some(dir) = &config.out_dir {
                let path = dir.join(format!("checkpoint-{:06}.slpa", step + 1));
                save_checkpoint(&model, &path)?;
            }
        }
        if step % 50 == 0 {
            log::info!(
                "step {step}: total {total:.6} ({})",
                history.records[step]
                    .components
                    .iter()
                    .map(|(n, v)| format!("{n} {v:.4}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            );
        }
    }

    Ok((model, history))
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_FORMAT_VERSION.to_le_bytes())?;
    let config_text = toml::to_string(&model.config)
        .map_err(|e| Error::Format(format!("config serialization failed: {e}")))?;
    out.write_all(&(config_text.len() as u32).to_le_bytes())?;
    out.write_all(config_text.as_bytes())?;
    for (name, tensor) in model.params() {
        let name_bytes = name.as_bytes();
        out.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        out.write_all(name_bytes)?;
        out.write_all(&[tensor.shape().len() as u8])?;
        for &extent in tensor.shape() {
            out.write_all(&(extent as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::Format("truncated checkpoint".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let mut b2 = [0u8; 2];
    let mut b4 = [0u8; 4];
    let trunc = |_| Error::Format("truncated checkpoint".into());
    file.read_exact(&mut b2).map_err(trunc)?;
    let version = u16::from_le_bytes(b2);
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    file.read_exact(&mut b4).map_err(trunc)?;
    let config_len = u32::from_le_bytes(b4) as usize;
    let mut config_bytes = vec![0u8; config_len];
    file.read_exact(&mut config_bytes).map_err(trunc)?;
    let config_text = String::from_utf8(config_bytes)
        .map_err(|_| Error::Format("checkpoint config block is not UTF-8".into()))?;
    let config: ModelConfig = toml::from_str(&config_text)
        .map_err(|e| Error::Format(format!("bad checkpoint config: {e}")))?;

    let mut params = IndexMap::new();
    loop {
        match file.read_exact(&mut b2) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name_bytes = vec![0u8; name_len];
        file.read_exact(&mut name_bytes).map_err(trunc)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        file.read_exact(&mut rank).map_err(trunc)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            file.read_exact(&mut b4).map_err(trunc)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        for v in &mut data {
            file.read_exact(&mut b4).map_err(trunc)?;
            *v = f32::from_le_bytes(b4);
        }
        params.insert(name, Tensor::from_vec(shape, data)?);
    }
    Model::from_parts(config, params)
}
