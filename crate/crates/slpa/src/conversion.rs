//! Zero-shot conversion by latent swapping and the converted-ERP evaluation
//! with its four donor-sampling conditions.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::EpochDataset;
use crate::error::{Error, Result};
use crate::model::{Model, SplitLatents};
use crate::tensor::Tensor;

/// Whether latent donors share the target subject and/or task. The four
/// values are written `ss-st`, `ds-st`, `ss-dt`, `ds-dt` (same/different
/// subject crossed with same/different task).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConversionCondition {
    /// task-latent donors come from the target subject (true) or from any
    /// other subject (false)
    pub same_subject: bool,
    /// subject-latent donors come from the target task (true) or from any
    /// other task (false)
    pub same_task: bool,
}

impl ConversionCondition {
    pub const ALL: [ConversionCondition; 4] = [
        ConversionCondition { same_subject: true, same_task: true },
        ConversionCondition { same_subject: false, same_task: true },
        ConversionCondition { same_subject: true, same_task: false },
        ConversionCondition { same_subject: false, same_task: false },
    ];

    pub fn name(&self) -> &'static str {
        match (self.same_subject, self.same_task) {
            (true, true) => "ss-st",
            (false, true) => "ds-st",
            (true, false) => "ss-dt",
            (false, false) => "ds-dt",
        }
    }

    pub fn from_name(name: &str) -> Result<ConversionCondition> {
        ConversionCondition::ALL
            .iter()
            .copied()
            .find(|c| c.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown conversion condition {name:?} (expected ss-st, ds-st, ss-dt or ds-dt)"
                ))
            })
    }
}

/// Split latents of every epoch of a dataset, labels carried through.
pub struct LatentBank {
    pub latents: Vec<SplitLatents>,
    pub subject_ids: Vec<u32>,
    pub task_ids: Vec<u32>,
}

impl LatentBank {
    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

/// Target cell and readout channel of one converted-ERP measurement.
#[derive(Clone, Copy, Debug)]
pub struct ErpTarget {
    pub subject: u32,
    pub task: u32,
    pub channel: usize,
}

/// Decode with the subject latent of one epoch and the task latent of
/// another: the core latent-swap operation.
pub fn convert(
    model: &Model,
    style_source: &Tensor<f32>,
    content_source: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let style = model.encode(style_source)?;
    let content = model.encode(content_source)?;
    model.decode(&SplitLatents {
        z_subject: style.z_subject,
        z_task: content.z_task,
    })
}

pub fn build_latent_bank(model: &Model, dataset: &EpochDataset) -> Result<LatentBank> {
    let mut latents = Vec::with_capacity(dataset.len());
    for i in 0..dataset.len() {
        latents.push(model.encode(dataset.epoch(i))?);
    }
    Ok(LatentBank {
        latents,
        subject_ids: dataset.subject_ids().to_vec(),
        task_ids: dataset.task_ids().to_vec(),
    })
}

/// Draw `n` (subject-latent, task-latent) donor index pairs for the target
/// cell under the given condition, uniformly with replacement.
///
/// Subject-latent donors always have the target subject; the same/different
/// *task* constraint selects which of their tasks are eligible. Task-latent
/// donors always have the target task; the same/different *subject*
/// constraint selects their subjects.
pub fn sample_condition_pairs(
    bank: &LatentBank,
    target: &ErpTarget,
    cond: ConversionCondition,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, usize)>> {
    if n == 0 {
        return Err(Error::Config("need at least one draw".into()));
    }
    let subject_pool: Vec<usize> = (0..bank.len())
        .filter(|&i| {
            bank.subject_ids[i] == target.subject
                && if cond.same_task {
                    bank.task_ids[i] == target.task
                } else {
                    bank.task_ids[i] != target.task
                }
        })
        .collect();
    let task_pool: Vec<usize> = (0..bank.len())
        .filter(|&i| {
            bank.task_ids[i] == target.task
                && if cond.same_subject {
                    bank.subject_ids[i] == target.subject
                } else {
                    bank.subject_ids[i] != target.subject
                }
        })
        .collect();
    if subject_pool.is_empty() || task_pool.is_empty() {
        return Err(Error::Data(format!(
            "condition {} has an empty donor pool for cell ({}, {}): {} subject donors, {} task donors",
            cond.name(),
            target.subject,
            target.task,
            subject_pool.len(),
            task_pool.len()
        )));
    }
    Ok((0..n)
        .map(|_| {
            (
                subject_pool[rng.gen_range(0..subject_pool.len())],
                task_pool[rng.gen_range(0..task_pool.len())],
            )
        })
        .collect())
}

/// Channel trace of the per-cell ground truth: elementwise mean over all
/// epochs of the target (subject, task) cell.
pub fn ground_truth_erp(dataset: &EpochDataset, target: &ErpTarget) -> Result<Vec<f32>> {
    if target.channel >= dataset.n_channels() {
        return Err(Error::Data(format!(
            "channel {} out of range for {} channels",
            target.channel,
            dataset.n_channels()
        )));
    }
    let indices = dataset.cell_indices(target.subject, target.task);
    if indices.is_empty() {
        return Err(Error::Data(format!(
            "no epochs in cell ({}, {})",
            target.subject, target.task
        )));
    }
    let t = dataset.n_time();
    let mut mean = vec![0.0f32; t];
    for &i in &indices {
        let row = &dataset.epoch(i).data()[target.channel * t..(target.channel + 1) * t];
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= indices.len() as f32;
    }
    Ok(mean)
}

/// Anything that can turn split latents back into an epoch. [`Model`] is the
/// real implementation; tests substitute exact stand-ins.
pub trait LatentDecoder {
    fn decode_latents(&self, latents: &SplitLatents) -> Result<Tensor<f32>>;
}

impl LatentDecoder for Model {
    fn decode_latents(&self, latents: &SplitLatents) -> Result<Tensor<f32>> {
        self.decode(latents)
    }
}

/// Decode every donor pair, extract the target channel, and average.
pub fn converted_erp(
    decoder: &impl LatentDecoder,
    bank: &LatentBank,
    pairs: &[(usize, usize)],
    channel: usize,
) -> Result<Vec<f32>> {
    if pairs.is_empty() {
        return Err(Error::Data("no donor pairs to decode".into()));
    }
    let mut mean: Option<Vec<f32>> = None;
    for &(si, ti) in pairs {
        let decoded = decoder.decode_latents(&SplitLatents {
            z_subject: bank.latents[si].z_subject.clone(),
            z_task: bank.latents[ti].z_task.clone(),
        })?;
        let t = decoded.shape()[1];
        if channel >= decoded.shape()[0] {
            return Err(Error::Data(format!(
                "channel {channel} out of range for {} channels",
                decoded.shape()[0]
            )));
        }
        let row = &decoded.data()[channel * t..(channel + 1) * t];
        let mean = mean.get_or_insert_with(|| vec![0.0f32; t]);
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let mut mean = mean.expect("at least one pair decoded");
    for m in &mut mean {
        *m /= pairs.len() as f32;
    }
    Ok(mean)
}

/// Per-sample mean of the squared difference between the ground-truth and
/// converted traces.
pub fn erp_conversion_mse(erp: &[f32], c_erp: &[f32]) -> Result<f64> {
    if erp.len() != c_erp.len() || erp.is_empty() {
        return Err(Error::Shape(format!(
            "trace lengths differ: {} vs {}",
            erp.len(),
            c_erp.len()
        )));
    }
    Ok(erp
        .iter()
        .zip(c_erp)
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum::<f64>()
        / erp.len() as f64)
}

/// One row of the conversion report: a condition with its per-cell MSEs
/// averaged over all (subject, task) target combinations.
#[derive(Clone, Debug)]
pub struct ConditionResult {
    pub condition: ConversionCondition,
    /// (subject, task, mse) per evaluated cell
    pub cells: Vec<(u32, u32, f64)>,
    pub mean_mse: f64,
}

#[derive(Clone, Debug)]
pub struct ConversionReport {
    pub results: Vec<ConditionResult>,
    pub n_draws: usize,
}

impl ConversionReport {
    /// Comma-separated rows: condition, subject, task, draws, mse; one
    /// trailing summary row per condition with the cell mean.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "condition,subject,task,n,mse")?;
        for r in &self.results {
            for &(s, t, mse) in &r.cells {
                writeln!(out, "{},{s},{t},{},{mse}", r.condition.name(), self.n_draws)?;
            }
            writeln!(out, "{},mean,mean,{},{}", r.condition.name(), self.n_draws, r.mean_mse)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Evaluate every requested condition on every (subject, task) cell of the
/// dataset: draw `n` donor pairs, form the converted ERP, and compare it to
/// the cell's ground-truth ERP.
pub fn conversion_report(
    decoder: &impl LatentDecoder,
    bank: &LatentBank,
    dataset: &EpochDataset,
    channel: usize,
    conditions: &[ConversionCondition],
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConversionReport> {
    if bank.len() != dataset.len() {
        return Err(Error::Data(format!(
            "bank size {} does not match dataset size {}",
            bank.len(),
            dataset.len()
        )));
    }
    let mut results = Vec::with_capacity(conditions.len());
    for &cond in conditions {
        let mut cells = Vec::new();
        for &subject in &dataset.subjects() {
            for &task in &dataset.tasks() {
                let target = ErpTarget { subject, task, channel };
                let pairs = sample_condition_pairs(bank, &target, cond, n, rng)?;
                let truth = ground_truth_erp(dataset, &target)?;
                let converted = converted_erp(decoder, bank, &pairs, channel)?;
                cells.push((subject, task, erp_conversion_mse(&truth, &converted)?));
            }
        }
        let mean_mse = cells.iter().map(|&(_, _, m)| m).sum::<f64>() / cells.len() as f64;
        results.push(ConditionResult {
            condition: cond,
            cells,
            mean_mse,
        });
    }
    Ok(ConversionReport { results, n_draws: n })
}

/// Baseline for the conversion evaluation: the grand mean of the target
/// channel over *all* epochs, compared against each cell's ERP.
pub fn global_mean_baseline_mse(dataset: &EpochDataset, channel: usize) -> Result<f64> {
    let t = dataset.n_time();
    if channel >= dataset.n_channels() {
        return Err(Error::Data(format!(
            "channel {channel} out of range for {} channels",
            dataset.n_channels()
        )));
    }
    let mut grand = vec![0.0f32; t];
    for i in 0..dataset.len() {
        let row = &dataset.epoch(i).data()[channel * t..(channel + 1) * t];
        for (g, &v) in grand.iter_mut().zip(row) {
            *g += v;
        }
    }
    for g in &mut grand {
        *g /= dataset.len() as f32;
    }
    let mut total = 0.0;
    let mut cells = 0usize;
    for &subject in &dataset.subjects() {
        for &task in &dataset.tasks() {
            let target = ErpTarget { subject, task, channel };
            let truth = ground_truth_erp(dataset, &target)?;
            total += erp_conversion_mse(&truth, &grand)?;
            cells += 1;
        }
    }
    Ok(total / cells as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthSpec};
    use crate::model::ModelConfig;
    use rand_chacha::rand_core::SeedableRng;

    fn tiny_model() -> Model {
        Model::build(
            ModelConfig {
                n_channels: 2,
                n_time: 16,
                n_blocks: 1,
                conv_width: 4,
                d_latent: 2,
                n_transformer_layers: 1,
                n_heads: 2,
                kernel_size: 3,
                padding: 1,
            },
            8,
        )
        .unwrap()
    }

    fn tiny_dataset() -> EpochDataset {
        generate_synthetic(
            &SynthSpec {
                n_subjects: 3,
                n_tasks: 2,
                epochs_per_cell: 3,
                n_channels: 2,
                n_time: 16,
                noise_std: 0.3,
                erp_channel: 0,
            },
            6,
        )
        .unwrap()
    }

    #[test]
    fn convert_with_one_source_is_plain_reconstruction() {
        let model = tiny_model();
        let ds = tiny_dataset();
        let x = ds.epoch(0);
        let converted = convert(&model, x, x).unwrap();
        let direct = model.decode(&model.encode(x).unwrap()).unwrap();
        assert!(converted
            .data()
            .iter()
            .zip(direct.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn latent_bank_mirrors_dataset_labels() {
        let model = tiny_model();
        let ds = tiny_dataset();
        let bank = build_latent_bank(&model, &ds).unwrap();
        assert_eq!(bank.len(), ds.len());
        assert_eq!(bank.subject_ids, ds.subject_ids());
        assert_eq!(bank.task_ids, ds.task_ids());
        let expect = vec![8, 2]; // bottleneck_len x d_latent
        assert_eq!(bank.latents[0].z_subject.shape(), &expect[..]);
    }

    #[test]
    fn condition_pools_respect_their_constraints() {
        let model = tiny_model();
        let ds = tiny_dataset();
        let bank = build_latent_bank(&model, &ds).unwrap();
        let target = ErpTarget {
            subject: 1,
            task: 0,
            channel: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for cond in ConversionCondition::ALL {
            let pairs = sample_condition_pairs(&bank, &target, cond, 50, &mut rng).unwrap();
            assert_eq!(pairs.len(), 50);
            for (si, ti) in pairs {
                assert_eq!(bank.subject_ids[si], 1);
                assert_eq!(bank.task_ids[ti], 0);
                if cond.same_task {
                    assert_eq!(bank.task_ids[si], 0);
                } else {
                    assert_ne!(bank.task_ids[si], 0);
                }
                if cond.same_subject {
                    assert_eq!(bank.subject_ids[ti], 1);
                } else {
                    assert_ne!(bank.subject_ids[ti], 1);
                }
            }
        }
    }

    #[test]
    fn single_task_grid_has_no_different_task_donors() {
        let model = tiny_model();
        let ds = generate_synthetic(
            &SynthSpec {
                n_subjects: 2,
                n_tasks: 1,
                epochs_per_cell: 2,
                n_channels: 2,
                n_time: 16,
                noise_std: 0.1,
                erp_channel: 0,
            },
            1,
        )
        .unwrap();
        let bank = build_latent_bank(&model, &ds).unwrap();
        let target = ErpTarget {
            subject: 0,
            task: 0,
            channel: 0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cond = ConversionCondition {
            same_subject: true,
            same_task: false,
        };
        assert!(sample_condition_pairs(&bank, &target, cond, 5, &mut rng).is_err());
    }

    #[test]
    fn ground_truth_erp_is_cell_mean() {
        let epochs = vec![
            Tensor::from_vec(vec![1, 2], vec![0.0f32, 2.0]).unwrap(),
            Tensor::from_vec(vec![1, 2], vec![2.0f32, 0.0]).unwrap(),
        ];
        let ds = EpochDataset::new(epochs, vec![0, 0], vec![0, 0]).unwrap();
        let erp = ground_truth_erp(
            &ds,
            &ErpTarget {
                subject: 0,
                task: 0,
                channel: 0,
            },
        )
        .unwrap();
        assert_eq!(erp, vec![1.0, 1.0]);
    }

    #[test]
    fn erp_mse_hand_values() {
        assert_eq!(erp_conversion_mse(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        // squared errors 1 and 9 average to 5
        assert_eq!(erp_conversion_mse(&[0.0, 0.0], &[1.0, 3.0]).unwrap(), 5.0);
        assert!(erp_conversion_mse(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn conversion_report_covers_cells_and_is_seeded() {
        let model = tiny_model();
        let ds = tiny_dataset();
        let bank = build_latent_bank(&model, &ds).unwrap();
        let conds = [ConversionCondition {
            same_subject: true,
            same_task: true,
        }];
        let run = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            conversion_report(&model, &bank, &ds, 0, &conds, 4, &mut rng).unwrap()
        };
        let a = run(9);
        assert_eq!(a.results.len(), 1);
        assert_eq!(a.results[0].cells.len(), 6); // 3 subjects x 2 tasks
        assert_eq!(a.n_draws, 4);
        let b = run(9);
        assert_eq!(a.results[0].mean_mse.to_bits(), b.results[0].mean_mse.to_bits());
    }

    #[test]
    fn global_mean_baseline_beats_nothing_on_flat_data() {
        // identical epochs: grand mean equals every cell mean, baseline 0
        let epochs = vec![
            Tensor::from_vec(vec![1, 2], vec![1.0f32, -1.0]).unwrap(),
            Tensor::from_vec(vec![1, 2], vec![1.0f32, -1.0]).unwrap(),
        ];
        let ds = EpochDataset::new(epochs, vec![0, 1], vec![0, 0]).unwrap();
        assert_eq!(global_mean_baseline_mse(&ds, 0).unwrap(), 0.0);
    }

    #[test]
    fn condition_names_round_trip() {
        for cond in ConversionCondition::ALL {
            let back = ConversionCondition::from_name(cond.name()).unwrap();
            assert_eq!(back.name(), cond.name());
        }
        assert!(ConversionCondition::from_name("xx-yy").is_err());
    }
}
