//! Training objectives: reconstruction, split-latent permutation, NT-Xent
//! and CLIP contrastive losses, supervised cross-entropy heads, and the
//! quadruplet permutation generalization. Named model variants map onto
//! fixed component sets combined by unweighted summation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LatentCodec;
use crate::nn;
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Which latent split a class-structured operation acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LatentSpace {
    Subject,
    Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossComponent {
    Recon,
    LpSubject,
    LpTask,
    ClipSubject,
    ClipTask,
    CeSubject,
    CeTask,
    Qp,
}

impl LossComponent {
    pub fn name(&self) -> &'static str {
        match self {
            LossComponent::Recon => "recon",
            LossComponent::LpSubject => "lp_s",
            LossComponent::LpTask => "lp_t",
            LossComponent::ClipSubject => "clip_s",
            LossComponent::ClipTask => "clip_t",
            LossComponent::CeSubject => "ce_s",
            LossComponent::CeTask => "ce_t",
            LossComponent::Qp => "qp",
        }
    }

    pub fn needs_decoder(&self) -> bool {
        matches!(
            self,
            LossComponent::Recon | LossComponent::LpSubject | LossComponent::LpTask | LossComponent::Qp
        )
    }
}

/// Named model variants, each enabling a fixed loss component set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    CslpAe,
    SlpAe,
    CAe,
    Ae,
    Cl,
    Ce,
    CeTask,
    SqpAe,
    CsqpAe,
    SqlpAe,
    CsqlpAe,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::CslpAe,
        Variant::SlpAe,
        Variant::CAe,
        Variant::Ae,
        Variant::Cl,
        Variant::Ce,
        Variant::CeTask,
        Variant::SqpAe,
        Variant::CsqpAe,
        Variant::SqlpAe,
        Variant::CsqlpAe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::CslpAe => "CSLP-AE",
            Variant::SlpAe => "SLP-AE",
            Variant::CAe => "C-AE",
            Variant::Ae => "AE",
            Variant::Cl => "CL",
            Variant::Ce => "CE",
            Variant::CeTask => "CE(t)",
            Variant::SqpAe => "SQP-AE",
            Variant::CsqpAe => "CSQP-AE",
            Variant::SqlpAe => "SQLP-AE",
            Variant::CsqlpAe => "CSQLP-AE",
        }
    }

    pub fn from_name(name: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name().eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::Config(format!("unknown variant {name:?}")))
    }

    pub fn components(&self) -> &'static [LossComponent] {
        use LossComponent::*;
        match self {
            Variant::CslpAe => &[LpSubject, LpTask, ClipSubject, ClipTask],
            Variant::SlpAe => &[LpSubject, LpTask],
            Variant::CAe => &[Recon, ClipSubject, ClipTask],
            Variant::Ae => &[Recon],
            Variant::Cl => &[ClipSubject, ClipTask],
            Variant::Ce => &[CeSubject, CeTask],
            Variant::CeTask => &[CeTask],
            Variant::SqpAe => &[Qp],
            Variant::CsqpAe => &[Qp, ClipSubject, ClipTask],
            Variant::SqlpAe => &[Qp, LpSubject, LpTask],
            Variant::CsqlpAe => &[Qp, ClipSubject, ClipTask, LpSubject, LpTask],
        }
    }

    pub fn uses_decoder(&self) -> bool {
        self.components().iter().any(LossComponent::needs_decoder)
    }
}

/// Loss hyperparameters shared by all contrastive components.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub variant: Variant,
    /// Contrastive temperature.
    pub temperature: f64,
    /// Include the positive pair in the NT-Xent denominator (the common
    /// NT-Xent form). Off by default: the denominator runs over the
    /// negatives only, so negative loss values are legal.
    pub denominator_includes_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            variant: Variant::CslpAe,
            temperature: 0.1,
            denominator_includes_positive: false,
        }
    }
}

/// Element-mean squared error between same-shape tensors.
pub fn reconstruction_loss<F: Real>(tape: &mut Tape<F>, x: Var, x_hat: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(x_hat) {
        return Err(Error::Shape(format!(
            "reconstruction_loss shapes {:?} vs {:?}",
            tape.shape(x),
            tape.shape(x_hat)
        )));
    }
    let diff = tape.sub(x, x_hat)?;
    let sq = tape.square(diff)?;
    Ok(tape.mean_all(sq))
}

/// `dot(a, b) / (|a| |b|)`; a degenerate norm below 1e-12 yields similarity 0
/// (with a warning) instead of NaN.
pub fn cosine_similarity<F: Real>(tape: &mut Tape<F>, a: Var, b: Var) -> Result<Var> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape(format!(
            "cosine_similarity shapes {:?} vs {:?}",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    let prod = tape.mul(a, b)?;
    let dot = tape.sum_all(prod);
    let a2 = tape.square(a)?;
    let na2 = tape.sum_all(a2);
    let b2 = tape.square(b)?;
    let nb2 = tape.sum_all(b2);
    let na = tape.sqrt(na2);
    let nb = tape.sqrt(nb2);
    let denom = tape.mul(na, nb)?;
    if tape.scalar_value(denom).to_f64().unwrap() < 1e-12 {
        log::warn!("cosine_similarity: zero-norm operand, defining similarity as 0");
        return Ok(tape.scalar(F::zero()));
    }
    tape.div(dot, denom)
}

/// Normalized temperature-scaled cross entropy for the `k`'th pair of the
/// two latent banks. With `include_positive` off, the denominator sums the
/// negatives only.
pub fn nt_xent<F: Real>(
    tape: &mut Tape<F>,
    z_a: &[Var],
    z_b: &[Var],
    k: usize,
    temperature: f64,
    include_positive: bool,
) -> Result<Var> {
    let big_k = z_a.len();
    if big_k < 2 || z_b.len() != big_k {
        return Err(Error::Data(format!(
            "nt_xent needs matching banks with K >= 2, got {} and {}",
            big_k,
            z_b.len()
        )));
    }
    if k >= big_k {
        return Err(Error::Data(format!("nt_xent index {k} out of range {big_k}")));
    }
    if temperature <= 0.0 {
        return Err(Error::Config("temperature must be positive".into()));
    }
    let inv_tau = F::from_f64(1.0 / temperature);
    let mut scaled = Vec::with_capacity(big_k);
    for i in 0..big_k {
        let sim = cosine_similarity(tape, z_a[k], z_b[i])?;
        scaled.push(tape.scale(sim, inv_tau));
    }
    let mut denom: Option<Var> = None;
    for (i, &s) in scaled.iter().enumerate() {
        if i == k && !include_positive {
            continue;
        }
        let e = tape.exp(s);
        denom = Some(match denom {
            Some(d) => tape.add(d, e)?,
            None => e,
        });
    }
    let denom = denom.expect("K >= 2 guarantees at least one denominator term");
    let log_denom = tape.ln(denom);
    tape.sub(log_denom, scaled[k])
}

/// Symmetric temperature-scaled contrastive loss over `K` latent pairs:
/// the mean over `k` of both NT-Xent directions.
pub fn clip_loss<F: Real>(
    tape: &mut Tape<F>,
    z_a: &[Var],
    z_b: &[Var],
    temperature: f64,
    include_positive: bool,
) -> Result<Var> {
    let big_k = z_a.len();
    if big_k != z_b.len() {
        return Err(Error::Data(format!(
            "clip_loss banks differ in size: {} vs {}",
            big_k,
            z_b.len()
        )));
    }
    let mut total: Option<Var> = None;
    for k in 0..big_k {
        let fwd = nt_xent(tape, z_a, z_b, k, temperature, include_positive)?;
        let bwd = nt_xent(tape, z_b, z_a, k, temperature, include_positive)?;
        let pair = tape.add(fwd, bwd)?;
        total = Some(match total {
            Some(t) => tape.add(t, pair)?,
            None => pair,
        });
    }
    let total = total.ok_or_else(|| Error::Data("clip_loss over empty banks".into()))?;
    Ok(tape.scale(total, F::from_f64(1.0 / big_k as f64)))
}

/// Split latents of one encoded pair member.
pub struct EncodedPair {
    pub x_a: Var,
    pub x_b: Var,
    pub latents_a: (Var, Var),
    pub latents_b: (Var, Var),
}

/// Encode both members of each pair once so permutation and contrastive
/// losses can share the encodings.
pub fn encode_pairs<F: Real, C: LatentCodec<F>>(
    tape: &mut Tape<F>,
    codec: &C,
    pairs: &[(Tensor<F>, Tensor<F>)],
) -> Result<Vec<EncodedPair>> {
    pairs
        .iter()
        .map(|(a, b)| {
            let x_a = tape.constant(a);
            let x_b = tape.constant(b);
            let latents_a = codec.encode_vars(tape, x_a)?;
            let latents_b = codec.encode_vars(tape, x_b)?;
            Ok(EncodedPair {
                x_a,
                x_b,
                latents_a,
                latents_b,
            })
        })
        .collect()
}

/// Pool a latent sequence `[T', d]` over time into a `[2d]` vector holding
/// the per-dimension mean followed by the per-dimension standard deviation.
/// Keeping the second moment leaves zero-mean oscillatory structure (which a
/// plain temporal mean would cancel) visible to contrastive and probe heads.
pub fn pooled_moments<F: Real>(tape: &mut Tape<F>, z: Var) -> Result<Var> {
    let mean = tape.mean_axis(z, 0)?;
    let sq = tape.square(z)?;
    let mean_sq = tape.mean_axis(sq, 0)?;
    let mean2 = tape.square(mean)?;
    let var = tape.sub(mean_sq, mean2)?;
    // small positive floor so sqrt stays differentiable and cancellation
    // cannot produce a negative variance
    let var = tape.shift(var, F::from_f64(1e-6));
    let std = tape.sqrt(var);
    let both = tape.concat(&[mean, std], 1)?;
    let d = tape.shape(both)[1];
    tape.reshape(both, vec![d])
}

/// Moment-pooled latent vectors `[2d]` of the selected split for the `a` and
/// `b` members of each encoded pair.
pub fn pooled_banks<F: Real>(
    tape: &mut Tape<F>,
    encoded: &[EncodedPair],
    selector: LatentSpace,
) -> Result<(Vec<Var>, Vec<Var>)> {
    let mut bank_a = Vec::with_capacity(encoded.len());
    let mut bank_b = Vec::with_capacity(encoded.len());
    for pair in encoded {
        let (za, zb) = match selector {
            LatentSpace::Subject => (pair.latents_a.0, pair.latents_b.0),
            LatentSpace::Task => (pair.latents_a.1, pair.latents_b.1),
        };
        for (bank, z) in [(&mut bank_a, za), (&mut bank_b, zb)] {
            bank.push(pooled_moments(tape, z)?);
        }
    }
    Ok((bank_a, bank_b))
}

/// Split-latent permutation loss over already-encoded pairs: swap the
/// selected split across each pair, decode, and average the pairwise
/// reconstruction error sums.
pub fn latent_permutation_from_encoded<F: Real, C: LatentCodec<F>>(
    tape: &mut Tape<F>,
    codec: &C,
    selector: LatentSpace,
    encoded: &[EncodedPair],
) -> Result<Var> {
    if encoded.is_empty() {
        return Err(Error::Data("latent permutation over an empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for pair in encoded {
        let (zs_a, zt_a) = pair.latents_a;
        let (zs_b, zt_b) = pair.latents_b;
        let (hat_a, hat_b) = match selector {
            // swap the selected split, keep the other from the same sample
            LatentSpace::Task => (
                codec.decode_vars(tape, zs_a, zt_b)?,
                codec.decode_vars(tape, zs_b, zt_a)?,
            ),
            LatentSpace::Subject => (
                codec.decode_vars(tape, zs_b, zt_a)?,
                codec.decode_vars(tape, zs_a, zt_b)?,
            ),
        };
        let loss_a = reconstruction_loss(tape, pair.x_a, hat_a)?;
        let loss_b = reconstruction_loss(tape, pair.x_b, hat_b)?;
        let pair_loss = tape.add(loss_a, loss_b)?;
        total = Some(match total {
            Some(t) => tape.add(t, pair_loss)?,
            None => pair_loss,
        });
    }
    Ok(tape.scale(total.unwrap(), F::from_f64(1.0 / encoded.len() as f64)))
}

/// Convenience entry: encode and permute in one call.
pub fn latent_permutation_loss<F: Real, C: LatentCodec<F>>(
    tape: &mut Tape<F>,
    codec: &C,
    selector: LatentSpace,
    pairs: &[(Tensor<F>, Tensor<F>)],
) -> Result<Var> {
    let encoded = encode_pairs(tape, codec, pairs)?;
    latent_permutation_from_encoded(tape, codec, selector, &encoded)
}

/// Quadruplet permutation loss: both splits are swapped across the
/// `(U,M),(V,M),(U,N),(V,N)` pattern so no direct input/output path remains.
/// Averages the element-mean reconstruction errors over all `4K` terms.
pub fn quadruplet_permutation_loss<F: Real, C: LatentCodec<F>>(
    tape: &mut Tape<F>,
    codec: &C,
    quads: &[[Tensor<F>; 4]],
) -> Result<Var> {
    if quads.is_empty() {
        return Err(Error::Data("quadruplet permutation over an empty batch".into()));
    }
    let mut total: Option<Var> = None;
    for quad in quads {
        let xs: Vec<Var> = quad.iter().map(|x| tape.constant(x)).collect();
        let enc: Vec<(Var, Var)> = xs
            .iter()
            .map(|&x| codec.encode_vars(tape, x))
            .collect::<Result<_>>()?;
        let (a, b, c, d) = (enc[0], enc[1], enc[2], enc[3]);
        let recons = [
            codec.decode_vars(tape, c.0, b.1)?, // reconstructs a
            codec.decode_vars(tape, d.0, a.1)?, // reconstructs b
            codec.decode_vars(tape, a.0, d.1)?, // reconstructs c
            codec.decode_vars(tape, b.0, c.1)?, // reconstructs d
        ];
        for (x, hat) in xs.iter().zip(recons) {
            let term = reconstruction_loss(tape, *x, hat)?;
            total = Some(match total {
                Some(t) => tape.add(t, term)?,
                None => term,
            });
        }
    }
    Ok(tape.scale(total.unwrap(), F::from_f64(1.0 / (4 * quads.len()) as f64)))
}

/// Softmax cross-entropy of a linear head applied to a pooled latent.
pub fn cross_entropy_head<F: Real>(
    tape: &mut Tape<F>,
    pooled: Var,
    label: usize,
    head_w: Var,
    head_b: Var,
) -> Result<Var> {
    let d = tape.data(pooled).len();
    let row = tape.reshape(pooled, vec![1, d])?;
    let logits = nn::linear(tape, row, head_w, Some(head_b))?;
    nn::softmax_cross_entropy(tape, logits, label)
}

/// Plain unweighted sum of the components enabled by the variant; every
/// enabled component must be present exactly once and no others.
pub fn total_loss(config: &LossConfig, components: &[(LossComponent, f64)]) -> Result<f64> {
    let enabled = config.variant.components();
    for want in enabled {
        if !components.iter().any(|(c, _)| c == want) {
            return Err(Error::Config(format!(
                "variant {} is missing component {}",
                config.variant.name(),
                want.name()
            )));
        }
    }
    for (have, _) in components {
        if !enabled.contains(have) {
            return Err(Error::Config(format!(
                "component {} is not part of variant {}",
                have.name(),
                config.variant.name()
            )));
        }
    }
    Ok(components.iter().map(|(_, v)| v).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn vec1(tape: &mut Tape<f64>, data: &[f64]) -> Var {
        let t = Tensor::from_vec(vec![data.len()], data.to_vec()).unwrap();
        tape.constant(&t)
    }

    fn tiny_model() -> Model {
        Model::build(
            ModelConfig {
                n_channels: 2,
                n_time: 8,
                n_blocks: 1,
                conv_width: 4,
                d_latent: 2,
                n_transformer_layers: 1,
                n_heads: 2,
                kernel_size: 3,
                padding: 1,
            },
            3,
        )
        .unwrap()
    }

    fn epoch(seed: usize) -> Tensor<f64> {
        Tensor::from_vec(
            vec![2, 8],
            (0..16).map(|i| ((i + 17 * seed) as f64 * 0.61).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn reconstruction_hand_values() {
        let mut tape: Tape<f64> = Tape::new();
        let x = vec1(&mut tape, &[1.0, 2.0]);
        let y = vec1(&mut tape, &[2.0, 4.0]);
        let l = reconstruction_loss(&mut tape, x, y).unwrap();
        assert!((tape.scalar_value(l) - 2.5).abs() < 1e-12);
        let same = reconstruction_loss(&mut tape, x, x).unwrap();
        assert_eq!(tape.scalar_value(same), 0.0);
        let bad = vec1(&mut tape, &[1.0, 2.0, 3.0]);
        assert!(reconstruction_loss(&mut tape, x, bad).is_err());
    }

    #[test]
    fn cosine_hand_values() {
        let mut tape: Tape<f64> = Tape::new();
        let a = vec1(&mut tape, &[1.0, 1.0]);
        let b = vec1(&mut tape, &[1.0, 0.0]);
        let c = vec1(&mut tape, &[0.0, 2.0]);
        let z = vec1(&mut tape, &[0.0, 0.0]);
        let ab = cosine_similarity(&mut tape, a, b).unwrap();
        assert!((tape.scalar_value(ab) - 0.7071067811865475).abs() < 1e-12);
        let aa = cosine_similarity(&mut tape, a, a).unwrap();
        assert!((tape.scalar_value(aa) - 1.0).abs() < 1e-12);
        let bc = cosine_similarity(&mut tape, b, c).unwrap();
        assert_eq!(tape.scalar_value(bc), 0.0);
        let az = cosine_similarity(&mut tape, a, z).unwrap();
        assert_eq!(tape.scalar_value(az), 0.0);
    }

    fn orthonormal_banks(tape: &mut Tape<f64>) -> (Vec<Var>, Vec<Var>) {
        let e1 = vec1(tape, &[1.0, 0.0]);
        let e2 = vec1(tape, &[0.0, 1.0]);
        (vec![e1, e2], vec![e1, e2])
    }

    #[test]
    fn nt_xent_orthonormal_hand_value() {
        let mut tape: Tape<f64> = Tape::new();
        let (za, zb) = orthonormal_banks(&mut tape);
        let l = nt_xent(&mut tape, &za, &zb, 0, 1.0, false).unwrap();
        assert!((tape.scalar_value(l) - (-1.0)).abs() < 1e-12);
        // with the positive in the denominator: ln(e + 1) - 1
        let lp = nt_xent(&mut tape, &za, &zb, 0, 1.0, true).unwrap();
        assert!((tape.scalar_value(lp) - 0.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn nt_xent_input_validation() {
        let mut tape: Tape<f64> = Tape::new();
        let (za, zb) = orthonormal_banks(&mut tape);
        assert!(nt_xent(&mut tape, &za[..1], &zb[..1], 0, 1.0, false).is_err());
        assert!(nt_xent(&mut tape, &za, &zb, 5, 1.0, false).is_err());
        assert!(nt_xent(&mut tape, &za, &zb, 0, 0.0, false).is_err());
    }

    #[test]
    fn clip_orthonormal_hand_value_and_symmetry() {
        let mut tape: Tape<f64> = Tape::new();
        let (za, zb) = orthonormal_banks(&mut tape);
        let l = clip_loss(&mut tape, &za, &zb, 1.0, false).unwrap();
        assert!((tape.scalar_value(l) - (-2.0)).abs() < 1e-12);

        let a0 = vec1(&mut tape, &[0.3, -1.1, 0.7]);
        let a1 = vec1(&mut tape, &[1.4, 0.2, -0.5]);
        let b0 = vec1(&mut tape, &[-0.8, 0.9, 0.1]);
        let b1 = vec1(&mut tape, &[0.6, 0.6, 1.2]);
        let fwd = clip_loss(&mut tape, &[a0, a1], &[b0, b1], 0.25, false).unwrap();
        let bwd = clip_loss(&mut tape, &[b0, b1], &[a0, a1], 0.25, false).unwrap();
        assert!((tape.scalar_value(fwd) - tape.scalar_value(bwd)).abs() < 1e-6);
    }

    #[test]
    fn clip_is_invariant_to_latent_scale() {
        let mut tape: Tape<f64> = Tape::new();
        let a0 = vec1(&mut tape, &[0.3, -1.1, 0.7]);
        let a1 = vec1(&mut tape, &[1.4, 0.2, -0.5]);
        let b0 = vec1(&mut tape, &[-0.8, 0.9, 0.1]);
        let b1 = vec1(&mut tape, &[0.6, 0.6, 1.2]);
        let base = clip_loss(&mut tape, &[a0, a1], &[b0, b1], 0.5, false).unwrap();
        let a0s = tape.scale(a0, 3.0);
        let a1s = tape.scale(a1, 3.0);
        let scaled = clip_loss(&mut tape, &[a0s, a1s], &[b0, b1], 0.5, false).unwrap();
        assert!((tape.scalar_value(base) - tape.scalar_value(scaled)).abs() < 1e-9);
    }

    /// Loop-and-arithmetic re-derivation of the symmetric contrastive loss,
    /// sharing no code with the tape implementation.
    fn brute_clip(za: &[Vec<f64>], zb: &[Vec<f64>], tau: f64, include_positive: bool) -> f64 {
        let cos = |a: &[f64], b: &[f64]| -> f64 {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let one = |from: &[Vec<f64>], to: &[Vec<f64>], k: usize| -> f64 {
            let mut denom = 0.0;
            for i in 0..to.len() {
                if i == k && !include_positive {
                    continue;
                }
                denom += (cos(&from[k], &to[i]) / tau).exp();
            }
            denom.ln() - cos(&from[k], &to[k]) / tau
        };
        (0..za.len()).map(|k| one(za, zb, k) + one(zb, za, k)).sum::<f64>() / za.len() as f64
    }

    #[test]
    fn clip_matches_independent_rederivation() {
        let za = vec![vec![0.3, -1.1, 0.7], vec![1.4, 0.2, -0.5], vec![0.1, 0.1, -0.9]];
        let zb = vec![vec![-0.8, 0.9, 0.1], vec![0.6, 0.6, 1.2], vec![1.0, -0.4, 0.2]];
        for include in [false, true] {
            let expect = brute_clip(&za, &zb, 0.37, include);
            let mut tape: Tape<f64> = Tape::new();
            let va: Vec<Var> = za.iter().map(|v| vec1(&mut tape, v)).collect();
            let vb: Vec<Var> = zb.iter().map(|v| vec1(&mut tape, v)).collect();
            let l = clip_loss(&mut tape, &va, &vb, 0.37, include).unwrap();
            assert!((tape.scalar_value(l) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_pair_latent_permutation_is_twice_reconstruction() {
        let model = tiny_model();
        let x = epoch(0);
        for selector in [LatentSpace::Subject, LatentSpace::Task] {
            let mut tape: Tape<f64> = Tape::new();
            let staged = model.stage::<f64>(&mut tape, false);
            let lp =
                latent_permutation_loss(&mut tape, &staged, selector, &[(x.clone(), x.clone())])
                    .unwrap();
            let xv = tape.constant(&x);
            let (zs, zt) = staged.encode_vars(&mut tape, xv).unwrap();
            let hat = staged.decode_vars(&mut tape, zs, zt).unwrap();
            let recon = reconstruction_loss(&mut tape, xv, hat).unwrap();
            let (lp, recon) = (tape.scalar_value(lp), tape.scalar_value(recon));
            assert!((lp - 2.0 * recon).abs() < 1e-9, "{lp} vs 2*{recon}");
        }
    }

    #[test]
    fn quadruplet_of_identical_epochs_is_reconstruction() {
        let model = tiny_model();
        let x = epoch(1);
        let mut tape: Tape<f64> = Tape::new();
        let staged = model.stage::<f64>(&mut tape, false);
        let qp = quadruplet_permutation_loss(
            &mut tape,
            &staged,
            &[[x.clone(), x.clone(), x.clone(), x.clone()]],
        )
        .unwrap();
        let xv = tape.constant(&x);
        let (zs, zt) = staged.encode_vars(&mut tape, xv).unwrap();
        let hat = staged.decode_vars(&mut tape, zs, zt).unwrap();
        let recon = reconstruction_loss(&mut tape, xv, hat).unwrap();
        assert!((tape.scalar_value(qp) - tape.scalar_value(recon)).abs() < 1e-9);
    }

    #[test]
    fn quadruplet_collapses_to_halved_latent_permutation() {
        // Repeating one pair across the quadruplet pattern leaves two
        // distinct decodes, each counted twice over the 4 terms, so the
        // quadruplet loss equals half the pair loss under the per-term means.
        let model = tiny_model();
        let (p, q) = (epoch(2), epoch(3));
        // same-subject pair (p, q) spread as (p, p, q, q)
        let mut tape: Tape<f64> = Tape::new();
        let staged = model.stage::<f64>(&mut tape, false);
        let qp = quadruplet_permutation_loss(
            &mut tape,
            &staged,
            &[[p.clone(), p.clone(), q.clone(), q.clone()]],
        )
        .unwrap();
        let lp = latent_permutation_loss(
            &mut tape,
            &staged,
            LatentSpace::Subject,
            &[(p.clone(), q.clone())],
        )
        .unwrap();
        let (qp, lp) = (tape.scalar_value(qp), tape.scalar_value(lp));
        assert!((qp - lp / 2.0).abs() < 1e-9, "{qp} vs {lp}/2");

        // same-task pair (p, q) spread as (p, q, p, q)
        let mut tape: Tape<f64> = Tape::new();
        let staged = model.stage::<f64>(&mut tape, false);
        let qp = quadruplet_permutation_loss(
            &mut tape,
            &staged,
            &[[p.clone(), q.clone(), p.clone(), q.clone()]],
        )
        .unwrap();
        let lp = latent_permutation_loss(&mut tape, &staged, LatentSpace::Task, &[(p, q)]).unwrap();
        let (qp, lp) = (tape.scalar_value(qp), tape.scalar_value(lp));
        assert!((qp - lp / 2.0).abs() < 1e-9, "{qp} vs {lp}/2");
    }

    #[test]
    fn cross_entropy_head_hand_values() {
        let mut tape: Tape<f64> = Tape::new();
        let pooled = vec1(&mut tape, &[0.4, -0.2]);
        // zero weights: uniform logits, loss ln(C) for any label
        let w0 = tape.constant(&Tensor::zeros(vec![2, 3]));
        let b0 = tape.constant(&Tensor::zeros(vec![3]));
        let l = cross_entropy_head(&mut tape, pooled, 1, w0, b0).unwrap();
        assert!((tape.scalar_value(l) - 3.0f64.ln()).abs() < 1e-12);
        // bias-only logits (1, 0), true label 0: ln(1 + e^{-1})
        let w2 = tape.constant(&Tensor::zeros(vec![2, 2]));
        let b2 = vec1(&mut tape, &[1.0, 0.0]);
        let l2 = cross_entropy_head(&mut tape, pooled, 0, w2, b2).unwrap();
        assert!((tape.scalar_value(l2) - 0.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn total_loss_enforces_exact_component_set() {
        let config = LossConfig {
            variant: Variant::SlpAe,
            ..Default::default()
        };
        let full = [(LossComponent::LpSubject, 1.5), (LossComponent::LpTask, 0.25)];
        assert_eq!(total_loss(&config, &full).unwrap(), 1.75);
        assert!(total_loss(&config, &full[..1]).is_err());
        let extra = [
            (LossComponent::LpSubject, 1.5),
            (LossComponent::LpTask, 0.25),
            (LossComponent::Recon, 0.1),
        ];
        assert!(total_loss(&config, &extra).is_err());
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(Variant::from_name(v.name()).unwrap(), v);
        }
        assert!(Variant::from_name("nope").is_err());
    }
}
