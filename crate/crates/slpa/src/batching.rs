//! Class-structured minibatch construction: same-class pairs for the
//! permutation/contrastive losses and subject-task quadruplets for the
//! four-way permutation loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::EpochDataset;
use crate::error::{Error, Result};
use crate::losses::LatentSpace;

/// Retries allowed when a drawn (subject, task) combination hits an empty cell.
pub const QUADRUPLET_RETRY_BUDGET: usize = 100;

/// `K` same-class epoch index pairs with pairwise-distinct classes.
///
/// For `LatentSpace::Subject` the class of a pair is its shared subject id;
/// for `LatentSpace::Task` it is the shared task id.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub selector: LatentSpace,
    /// (epoch index a, epoch index b) per pair; members are distinct epochs.
    pub pairs: Vec<(usize, usize)>,
    /// shared class id per pair
    pub classes: Vec<u32>,
}

impl PairBatch {
    pub fn k(&self) -> usize {
        self.pairs.len()
    }

    /// Check the structural invariants against the dataset the indices refer to.
    pub fn validate(&self, dataset: &EpochDataset) -> Result<()> {
        if self.pairs.len() != self.classes.len() {
            return Err(Error::Data("pair/class length mismatch".into()));
        }
        let class_of = |i: usize| match self.selector {
            LatentSpace::Subject => dataset.subject(i),
            LatentSpace::Task => dataset.task(i),
        };
        for (k, (&(a, b), &cls)) in self.pairs.iter().zip(&self.classes).enumerate() {
            if a == b {
                return Err(Error::Data(format!("pair {k} repeats epoch {a}")));
            }
            if class_of(a) != cls || class_of(b) != cls {
                return Err(Error::Data(format!(
                    "pair {k} members do not share class {cls}"
                )));
            }
        }
        let mut seen = self.classes.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::Data("batch classes are not pairwise distinct".into()));
        }
        Ok(())
    }
}

/// `K` quadruplets of epoch indices (a, b, c, d) covering the subject/task
/// grid pattern (U,M), (V,M), (U,N), (V,N) with U != V and M != N.
#[derive(Clone, Debug)]
pub struct QuadrupletBatch {
    pub quads: Vec<(usize, usize, usize, usize)>,
    /// (U, V, M, N) per quadruplet
    pub labels: Vec<(u32, u32, u32, u32)>,
}

impl QuadrupletBatch {
    pub fn k(&self) -> usize {
        self.quads.len()
    }

    pub fn validate(&self, dataset: &EpochDataset) -> Result<()> {
        if self.quads.len() != self.labels.len() {
            return Err(Error::Data("quad/label length mismatch".into()));
        }
        for (k, (&(a, b, c, d), &(u, v, m, n))) in
            self.quads.iter().zip(&self.labels).enumerate()
        {
            if u == v || m == n {
                return Err(Error::Data(format!(
                    "quadruplet {k} labels not distinct: subjects ({u},{v}), tasks ({m},{n})"
                )));
            }
            let want = [(a, u, m), (b, v, m), (c, u, n), (d, v, n)];
            for &(idx, s, t) in &want {
                if dataset.subject(idx) != s || dataset.task(idx) != t {
                    return Err(Error::Data(format!(
                        "quadruplet {k} member {idx} is not in cell ({s},{t})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draw `k` distinct classes without replacement, then two distinct epochs
/// uniformly from each. Deterministic given the generator state.
pub fn sample_pair_batch(
    dataset: &EpochDataset,
    selector: LatentSpace,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairBatch> {
    if k == 0 {
        return Err(Error::Config("pair batch size must be positive".into()));
    }
    let classes = match selector {
        LatentSpace::Subject => dataset.subjects(),
        LatentSpace::Task => dataset.tasks(),
    };
    let eligible: Vec<(u32, Vec<usize>)> = classes
        .into_iter()
        .map(|c| {
            let idx: Vec<usize> = (0..dataset.len())
                .filter(|&i| match selector {
                    LatentSpace::Subject => dataset.subject(i) == c,
                    LatentSpace::Task => dataset.task(i) == c,
                })
                .collect();
            (c, idx)
        })
        .filter(|(_, idx)| idx.len() >= 2)
        .collect();
    if eligible.len() < k {
        return Err(Error::Data(format!(
            "need {k} classes with at least 2 epochs each, found {}",
            eligible.len()
        )));
    }
    let mut order: Vec<usize> = (0..eligible.len()).collect();
    order.shuffle(rng);
    let mut pairs = Vec::with_capacity(k);
    let mut chosen = Vec::with_capacity(k);
    for &ci in order.iter().take(k) {
        let (cls, idx) = &eligible[ci];
        let a = idx[rng.gen_range(0..idx.len())];
        let b = loop {
            let cand = idx[rng.gen_range(0..idx.len())];
            if cand != a {
                break cand;
            }
        };
        pairs.push((a, b));
        chosen.push(*cls);
    }
    Ok(PairBatch {
        selector,
        pairs,
        classes: chosen,
    })
}

/// Draw `k` quadruplets: two distinct subjects, two distinct tasks, one epoch
/// per resulting cell. Combinations with an empty cell are re-drawn within a
/// bounded retry budget.
pub fn sample_quadruplet_batch(
    dataset: &EpochDataset,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QuadrupletBatch> {
    if k == 0 {
        return Err(Error::Config("quadruplet batch size must be positive".into()));
    }
    let subjects = dataset.subjects();
    let tasks = dataset.tasks();
    if subjects.len() < 2 || tasks.len() < 2 {
        return Err(Error::Data(format!(
            "quadruplets need >= 2 subjects and >= 2 tasks, got {} and {}",
            subjects.len(),
            tasks.len()
        )));
    }
    let mut quads = Vec::with_capacity(k);
    let mut labels = Vec::with_capacity(k);
    for _ in 0..k {
        let mut accepted = None;
        for _ in 0..QUADRUPLET_RETRY_BUDGET {
            let u = subjects[rng.gen_range(0..subjects.len())];
            let v = loop {
                let cand = subjects[rng.gen_range(0..subjects.len())];
                if cand != u {
                    break cand;
                }
            };
            let m = tasks[rng.gen_range(0..tasks.len())];
            let n = loop {
                let cand = tasks[rng.gen_range(0..tasks.len())];
                if cand != m {
                    break cand;
                }
            };
            let cells = [
                dataset.cell_indices(u, m),
                dataset.cell_indices(v, m),
                dataset.cell_indices(u, n),
                dataset.cell_indices(v, n),
            ];
            if cells.iter().any(|c| c.is_empty()) {
                continue;
            }
            let pick = |cell: &Vec<usize>, rng: &mut ChaCha8Rng| cell[rng.gen_range(0..cell.len())];
            let a = pick(&cells[0], rng);
            let b = pick(&cells[1], rng);
            let c = pick(&cells[2], rng);
            let d = pick(&cells[3], rng);
            accepted = Some(((a, b, c, d), (u, v, m, n)));
            break;
        }
        match accepted {
            Some((q, l)) => {
                quads.push(q);
                labels.push(l);
            }
            None => {
                return Err(Error::Data(format!(
                    "no populated subject/task combination found in {QUADRUPLET_RETRY_BUDGET} draws"
                )))
            }
        }
    }
    Ok(QuadrupletBatch { quads, labels })
}

/// Duplicate pair members into degenerate quadruplets so that the four-way
/// permutation loss on the result reduces to the two-way case:
/// a same-task pair (a, b) becomes (a, b, a, b) and a same-subject pair
/// (a, c) becomes (a, a, c, c).
pub fn collapse_pairs_to_quadruplets(
    pairs: &PairBatch,
    dataset: &EpochDataset,
) -> QuadrupletBatch {
    let mut quads = Vec::with_capacity(pairs.k());
    let mut labels = Vec::with_capacity(pairs.k());
    for &(a, other) in &pairs.pairs {
        match pairs.selector {
            LatentSpace::Task => {
                quads.push((a, other, a, other));
                labels.push((
                    dataset.subject(a),
                    dataset.subject(other),
                    dataset.task(a),
                    dataset.task(a),
                ));
            }
            LatentSpace::Subject => {
                quads.push((a, a, other, other));
                labels.push((
                    dataset.subject(a),
                    dataset.subject(a),
                    dataset.task(a),
                    dataset.task(other),
                ));
            }
        }
    }
    QuadrupletBatch { quads, labels }
}
