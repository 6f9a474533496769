//! Subject-disjoint latent evaluation: stratified cross-validation with
//! per-fold training-split undersampling, a KNN probe, and balanced
//! accuracy on each latent split.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conversion::LatentBank;
use crate::error::{Error, Result};
use crate::losses::LatentSpace;
use crate::model::pool_latent;

/// `k` folds of epoch indices, stratified on a label vector.
#[derive(Clone, Debug)]
pub struct FoldPlan {
    pub folds: Vec<Vec<usize>>,
}

/// Deterministic stratified partition: within each shuffled class the items
/// are dealt round-robin to folds (fold order rotated per class so fold
/// sizes stay balanced overall).
pub fn stratified_kfold(labels: &[u32], k: usize, rng: &mut ChaCha8Rng) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for (class, members) in &by_class {
        if members.len() < k {
            return Err(Error::Data(format!(
                "class {class} has {} members, fewer than {k} folds",
                members.len()
            )));
        }
    }
    let mut folds = vec![Vec::new(); k];
    let mut next_fold = 0usize;
    for members in by_class.values() {
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        for idx in shuffled {
            folds[next_fold].push(idx);
            next_fold = (next_fold + 1) % k;
        }
    }
    Ok(FoldPlan { folds })
}

/// Downsample every class uniformly without replacement to the minority
/// class count; returns the retained indices into `labels`, sorted.
pub fn undersample(labels: &[u32], rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if labels.is_empty() {
        return Err(Error::Data("cannot undersample an empty label set".into()));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    let minority = by_class.values().map(Vec::len).min().unwrap();
    let mut retained = Vec::new();
    for members in by_class.values() {
        let mut shuffled = members.clone();
        shuffled.shuffle(rng);
        retained.extend_from_slice(&shuffled[..minority]);
    }
    retained.sort_unstable();
    Ok(retained)
}

/// Majority vote among the `k_neighbors` nearest training vectors by
/// Euclidean distance. Vote ties are broken by the smallest summed distance
/// of the tied classes' in-neighborhood members, then by the lowest label.
pub fn knn_classify(
    train_vectors: &[Vec<f32>],
    train_labels: &[u32],
    query_vectors: &[Vec<f32>],
    k_neighbors: usize,
) -> Result<Vec<u32>> {
    if train_vectors.is_empty() {
        return Err(Error::Data("empty KNN training set".into()));
    }
    if train_vectors.len() != train_labels.len() {
        return Err(Error::Data(format!(
            "{} training vectors but {} labels",
            train_vectors.len(),
            train_labels.len()
        )));
    }
    if k_neighbors == 0 || k_neighbors > train_vectors.len() {
        return Err(Error::Config(format!(
            "k_neighbors {k_neighbors} out of range for {} training vectors",
            train_vectors.len()
        )));
    }
    let dim = train_vectors[0].len();
    let mut predictions = Vec::with_capacity(query_vectors.len());
    for q in query_vectors {
        if q.len() != dim {
            return Err(Error::Shape(format!(
                "query dimension {} differs from training dimension {dim}",
                q.len()
            )));
        }
        let mut dist: Vec<(f64, usize)> = train_vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let d: f64 = v
                    .iter()
                    .zip(q)
                    .map(|(&a, &b)| {
                        let d = (a - b) as f64;
                        d * d
                    })
                    .sum();
                (d, i)
            })
            .collect();
        dist.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let neighborhood = &dist[..k_neighbors];
        let mut votes: BTreeMap<u32, (usize, f64)> = BTreeMap::new();
        for &(d, i) in neighborhood {
            let entry = votes.entry(train_labels[i]).or_insert((0, 0.0));
            entry.0 += 1;
            entry.1 += d.sqrt();
        }
        let best = votes
            .iter()
            .min_by(|(la, (ca, da)), (lb, (cb, db))| {
                cb.cmp(ca) // most votes first
                    .then(da.partial_cmp(db).expect("finite distances")) // then closest
                    .then(la.cmp(lb)) // then lowest label
            })
            .map(|(&l, _)| l)
            .expect("nonempty neighborhood");
        predictions.push(best);
    }
    Ok(predictions)
}

/// Unweighted mean of per-class recall over classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[u32], y_pred: &[u32]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(Error::Data(format!(
            "label vectors differ in length: {} vs {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut per_class: BTreeMap<u32, (usize, usize)> = BTreeMap::new();
    for (&t, &p) in y_true.iter().zip(y_pred) {
        let entry = per_class.entry(t).or_insert((0, 0));
        entry.0 += 1;
        if t == p {
            entry.1 += 1;
        }
    }
    let recall_sum: f64 = per_class
        .values()
        .map(|&(total, hit)| hit as f64 / total as f64)
        .sum();
    Ok(recall_sum / per_class.len() as f64)
}

/// Mean and standard error of per-fold balanced accuracies.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
}

impl AccuracySummary {
    fn from_folds(per_fold: Vec<f64>) -> AccuracySummary {
        let n = per_fold.len() as f64;
        let mean = per_fold.iter().sum::<f64>() / n;
        let var = per_fold.iter().map(|&a| (a - mean) * (a - mean)).sum::<f64>()
            / (n - 1.0).max(1.0);
        AccuracySummary {
            mean,
            stderr: (var / n).sqrt(),
            per_fold,
        }
    }
}

/// The four accuracy columns: each latent split probed with both label
/// kinds. `subject_on_subject` reads "subject labels decoded from subject
/// latents" and so on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub subject_on_subject: AccuracySummary,
    pub task_on_subject: AccuracySummary,
    pub task_on_task: AccuracySummary,
    pub subject_on_task: AccuracySummary,
}

impl MetricsReport {
    pub fn rows(&self) -> [(&'static str, &AccuracySummary); 4] {
        [
            ("S.acc", &self.subject_on_subject),
            ("T|S.acc", &self.task_on_subject),
            ("T.acc", &self.task_on_task),
            ("S|T.acc", &self.subject_on_task),
        ]
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "metric,mean,stderr,folds")?;
        for (name, summary) in self.rows() {
            let folds: Vec<String> = summary.per_fold.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{name},{},{},{}", summary.mean, summary.stderr, folds.join(";"))?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub n_folds: usize,
    pub k_neighbors: usize,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            n_folds: 5,
            k_neighbors: 5,
            seed: 0,
        }
    }
}

fn run_one_cv(
    vectors: &[Vec<f32>],
    strat_labels: &[u32],
    primary_labels: &[u32],
    secondary_labels: &[u32],
    config: &CvConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(AccuracySummary, AccuracySummary)> {
    let plan = stratified_kfold(strat_labels, config.n_folds, rng)?;
    let mut primary_folds = Vec::with_capacity(config.n_folds);
    let mut secondary_folds = Vec::with_capacity(config.n_folds);
    for test_fold in 0..config.n_folds {
        let test_idx = &plan.folds[test_fold];
        let train_idx: Vec<usize> = (0..config.n_folds)
            .filter(|&f| f != test_fold)
            .flat_map(|f| plan.folds[f].iter().copied())
            .collect();
        // per probe: undersample the training split on that probe's labels,
        // leave the test split untouched, one prediction per epoch
        for (labels, out) in [
            (primary_labels, &mut primary_folds),
            (secondary_labels, &mut secondary_folds),
        ] {
            let train_labels_full: Vec<u32> = train_idx.iter().map(|&i| labels[i]).collect();
            let retained = undersample(&train_labels_full, rng)?;
            let train_vectors: Vec<Vec<f32>> = retained
                .iter()
                .map(|&r| vectors[train_idx[r]].clone())
                .collect();
            let train_labels: Vec<u32> = retained.iter().map(|&r| train_labels_full[r]).collect();
            let query_vectors: Vec<Vec<f32>> =
                test_idx.iter().map(|&i| vectors[i].clone()).collect();
            let y_true: Vec<u32> = test_idx.iter().map(|&i| labels[i]).collect();
            let k = config.k_neighbors.min(train_vectors.len());
            let y_pred = knn_classify(&train_vectors, &train_labels, &query_vectors, k)?;
            out.push(balanced_accuracy(&y_true, &y_pred)?);
        }
    }
    Ok((
        AccuracySummary::from_folds(primary_folds),
        AccuracySummary::from_folds(secondary_folds),
    ))
}

/// Pool both latent splits of a bank and run the two cross-validations: one
/// on subject latents stratified by subject labels, one on task latents
/// stratified by task labels; each probed with both label kinds.
pub fn run_latent_cv(bank: &LatentBank, config: &CvConfig) -> Result<MetricsReport> {
    if bank.is_empty() {
        return Err(Error::Data("empty latent bank".into()));
    }
    let pooled = |space: LatentSpace| -> Vec<Vec<f32>> {
        bank.latents
            .iter()
            .map(|l| match space {
                LatentSpace::Subject => pool_latent(&l.z_subject),
                LatentSpace::Task => pool_latent(&l.z_task),
            })
            .collect()
    };
    let subject_vectors = pooled(LatentSpace::Subject);
    let task_vectors = pooled(LatentSpace::Task);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (subject_on_subject, task_on_subject) = run_one_cv(
        &subject_vectors,
        &bank.subject_ids,
        &bank.subject_ids,
        &bank.task_ids,
        config,
        &mut rng,
    )?;
    let (task_on_task, subject_on_task) = run_one_cv(
        &task_vectors,
        &bank.task_ids,
        &bank.task_ids,
        &bank.subject_ids,
        config,
        &mut rng,
    )?;
    Ok(MetricsReport {
        subject_on_subject,
        task_on_subject,
        task_on_task,
        subject_on_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn kfold_partitions_with_class_balance() {
        let labels: Vec<u32> = (0..30).map(|i| (i % 3) as u32).collect();
        let plan = stratified_kfold(&labels, 5, &mut rng(0)).unwrap();
        assert_eq!(plan.folds.len(), 5);
        let mut seen = vec![false; labels.len()];
        for fold in &plan.folds {
            assert_eq!(fold.len(), 6);
            for &i in fold {
                assert!(!seen[i], "index {i} in two folds");
                seen[i] = true;
            }
            for class in 0..3u32 {
                let n = fold.iter().filter(|&&i| labels[i] == class).count();
                assert_eq!(n, 2, "class {class} uneven in fold");
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn kfold_rejects_scarce_classes_and_bad_k() {
        assert!(stratified_kfold(&[0, 0, 1], 2, &mut rng(0)).is_err());
        assert!(stratified_kfold(&[0, 1, 0, 1], 1, &mut rng(0)).is_err());
    }

    #[test]
    fn undersample_trims_to_minority_class() {
        let labels = [0u32, 0, 0, 0, 0, 1, 1, 1];
        let kept = undersample(&labels, &mut rng(3)).unwrap();
        assert_eq!(kept.len(), 6);
        for class in [0u32, 1] {
            assert_eq!(kept.iter().filter(|&&i| labels[i] == class).count(), 3);
        }
        // already balanced sets keep every index
        let balanced = [0u32, 1, 0, 1];
        let kept = undersample(&balanced, &mut rng(3)).unwrap();
        assert_eq!(kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn knn_nearest_neighbor_and_majority_vote() {
        let train = vec![
            vec![0.0f32, 0.0],
            vec![0.1, 0.0],
            vec![1.0, 1.0],
            vec![1.1, 1.0],
            vec![0.9, 1.0],
        ];
        let labels = vec![0u32, 0, 1, 1, 1];
        let pred = knn_classify(&train, &labels, &[vec![0.05, 0.0], vec![1.0, 0.9]], 1).unwrap();
        assert_eq!(pred, vec![0, 1]);
        let pred3 = knn_classify(&train, &labels, &[vec![0.5, 0.5]], 5).unwrap();
        assert_eq!(pred3, vec![1]); // three of five neighbors vote 1
    }

    #[test]
    fn knn_breaks_vote_ties_by_distance_then_label() {
        // one neighbor of each class at different distances: closer class wins
        let train = vec![vec![0.0f32], vec![0.3]];
        let labels = vec![1u32, 0];
        let pred = knn_classify(&train, &labels, &[vec![0.1]], 2).unwrap();
        assert_eq!(pred, vec![1]);
        // exactly symmetric: the smaller label wins
        let train = vec![vec![-0.2f32], vec![0.2]];
        let labels = vec![5u32, 2];
        let pred = knn_classify(&train, &labels, &[vec![0.0]], 2).unwrap();
        assert_eq!(pred, vec![2]);
    }

    #[test]
    fn balanced_accuracy_hand_values() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.5);
        // recalls 1/2 and 2/3 average to 7/12
        let acc = balanced_accuracy(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0]).unwrap();
        assert!((acc - 7.0 / 12.0).abs() < 1e-12);
        assert!(balanced_accuracy(&[0], &[]).is_err());
    }

    #[test]
    fn accuracy_summary_mean_and_stderr() {
        let s = AccuracySummary::from_folds(vec![0.5, 0.7, 0.9]);
        assert!((s.mean - 0.7).abs() < 1e-12);
        // sample std 0.2, stderr 0.2/sqrt(3)
        assert!((s.stderr - 0.2 / 3.0f64.sqrt()).abs() < 1e-12);
    }
}
