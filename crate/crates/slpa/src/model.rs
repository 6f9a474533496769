//! Mirrored strided convolutional autoencoder with a transformer bottleneck
//! and an explicit subject/task latent split.
//!
//! The encoder applies `n_blocks` rounds of (ConvBlock + stride-2 conv),
//! halving the time axis each round, then a transformer stack and a linear
//! split head. The decoder mirrors it with transposed convolutions and a
//! join head. Contrastive and probe losses consume moment-pooled (temporal
//! mean + std) latent vectors; conversion swaps whole latent sequences.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    self, attention_block, instance_norm, linear, sinusoidal_encoding, AttentionParams,
};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Kernel/padding pair of the stride-2 transposed upsampling convolutions;
/// together with stride 2 they double the time axis exactly.
const UPSAMPLE_KERNEL: usize = 4;
const UPSAMPLE_PADDING: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_channels: usize,
    pub n_time: usize,
    pub n_blocks: usize,
    pub conv_width: usize,
    pub d_latent: usize,
    pub n_transformer_layers: usize,
    pub n_heads: usize,
    pub kernel_size: usize,
    pub padding: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_channels: 8,
            n_time: 256,
            n_blocks: 4,
            conv_width: 64,
            d_latent: 32,
            n_transformer_layers: 4,
            n_heads: 4,
            kernel_size: 3,
            padding: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks < 1 || self.d_latent < 1 || self.n_channels < 1 {
            return Err(Error::Config(
                "n_blocks, d_latent and n_channels must be at least 1".into(),
            ));
        }
        let div = 1usize << self.n_blocks;
        if self.n_time == 0 || self.n_time % div != 0 {
            return Err(Error::Config(format!(
                "n_time {} must be a positive multiple of 2^n_blocks = {div}",
                self.n_time
            )));
        }
        if self.conv_width == 0 || self.n_heads == 0 || self.conv_width % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "conv_width {} must be divisible by n_heads {}",
                self.conv_width, self.n_heads
            )));
        }
        if self.kernel_size % 2 == 0 || self.padding != (self.kernel_size - 1) / 2 {
            return Err(Error::Config(format!(
                "kernel_size {} must be odd with padding (k-1)/2, got padding {}",
                self.kernel_size, self.padding
            )));
        }
        Ok(())
    }

    /// Time extent of the latent sequences.
    pub fn bottleneck_len(&self) -> usize {
        self.n_time >> self.n_blocks
    }
}

/// The pair of latent sequences, each `[bottleneck_len, d_latent]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitLatents {
    pub z_subject: Tensor<f32>,
    pub z_task: Tensor<f32>,
}

/// Temporal moment pooling of a latent sequence `[T', d]` -> `[2d]`: the
/// per-dimension mean followed by the per-dimension standard deviation
/// (population variance with a 1e-6 floor, matching the tape-side pooling
/// used by the contrastive and probe losses).
pub fn pool_latent<F: Real>(z: &Tensor<F>) -> Vec<F> {
    let (t, d) = (z.shape()[0], z.shape()[1]);
    let mut mean = vec![F::zero(); d];
    let mut mean_sq = vec![F::zero(); d];
    for row in 0..t {
        for col in 0..d {
            let v = z.data()[row * d + col];
            mean[col] = mean[col] + v;
            mean_sq[col] = mean_sq[col] + v * v;
        }
    }
    let n = F::from_f64(t as f64);
    let eps = F::from_f64(1e-6);
    let mut out = Vec::with_capacity(2 * d);
    for col in 0..d {
        mean[col] = mean[col] / n;
        out.push(mean[col]);
    }
    for col in 0..d {
        let var = mean_sq[col] / n - mean[col] * mean[col];
        out.push((var + eps).sqrt());
    }
    out
}

/// Encoder/decoder pair with named parameters.
pub struct Model {
    pub config: ModelConfig,
    params: IndexMap<String, Tensor<f32>>,
    decode_calls: AtomicU64,
}

/// Anything that can encode an epoch into split latents and decode a pair of
/// latents back, on a tape. Stub implementations are used by loss tests.
pub trait LatentCodec<F: Real> {
    fn encode_vars(&self, tape: &mut Tape<F>, x: Var) -> Result<(Var, Var)>;
    fn decode_vars(&self, tape: &mut Tape<F>, z_subject: Var, z_task: Var) -> Result<Var>;
}

impl Model {
    /// Deterministic parameter initialization from a seed.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = IndexMap::new();

        let conv = |params: &mut IndexMap<String, Tensor<f32>>,
                        rng: &mut ChaCha8Rng,
                        name: &str,
                        c_out: usize,
                        c_in: usize,
                        k: usize,
                        bias: bool| {
            let fan_in = c_in * k;
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            let data: Vec<f32> = (0..c_out * c_in * k)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            params.insert(
                format!("{name}.w"),
                Tensor::from_vec(vec![c_out, c_in, k], data).unwrap(),
            );
            if bias {
                params.insert(format!("{name}.b"), Tensor::zeros(vec![c_out, 1]));
            }
        };
        let lin = |params: &mut IndexMap<String, Tensor<f32>>,
                   rng: &mut ChaCha8Rng,
                   name: &str,
                   d_in: usize,
                   d_out: usize| {
            let limit = (6.0 / d_in as f64).sqrt() as f32;
            let data: Vec<f32> = (0..d_in * d_out)
                .map(|_| rng.gen_range(-limit..limit))
                .collect();
            params.insert(
                format!("{name}.w"),
                Tensor::from_vec(vec![d_in, d_out], data).unwrap(),
            );
            params.insert(format!("{name}.b"), Tensor::zeros(vec![1, d_out]));
        };

        let w = config.conv_width;
        let k = config.kernel_size;
        let tf = |params: &mut IndexMap<String, Tensor<f32>>, rng: &mut ChaCha8Rng, prefix: &str| {
            for l in 0..config.n_transformer_layers {
                let p = format!("{prefix}.tf{l}");
                params.insert(format!("{p}.ln1.g"), Tensor::full(vec![1, w], 1.0));
                params.insert(format!("{p}.ln1.b"), Tensor::zeros(vec![1, w]));
                for proj in ["wq", "wk", "wv", "wo"] {
                    lin(params, rng, &format!("{p}.{proj}"), w, w);
                }
                params.insert(format!("{p}.ln2.g"), Tensor::full(vec![1, w], 1.0));
                params.insert(format!("{p}.ln2.b"), Tensor::zeros(vec![1, w]));
                lin(params, rng, &format!("{p}.ff1"), w, 2 * w);
                lin(params, rng, &format!("{p}.ff2"), 2 * w, w);
            }
        };

        // encoder conv path
        for b in 0..config.n_blocks {
            let c_in = if b == 0 { config.n_channels } else { w };
            let prefix = format!("enc.block{b}");
            conv(&mut params, &mut rng, &format!("{prefix}.conv0"), w, c_in, k, true);
            conv(&mut params, &mut rng, &format!("{prefix}.conv1"), w, w, k, true);
            conv(&mut params, &mut rng, &format!("{prefix}.conv2"), w, w, k, true);
            if c_in != w {
                conv(&mut params, &mut rng, &format!("{prefix}.proj"), w, c_in, 1, false);
            }
            conv(&mut params, &mut rng, &format!("enc.down{b}"), w, w, k, true);
        }
        tf(&mut params, &mut rng, "enc");
        lin(&mut params, &mut rng, "enc.split", w, 2 * config.d_latent);

        // decoder
        lin(&mut params, &mut rng, "dec.join", 2 * config.d_latent, w);
        tf(&mut params, &mut rng, "dec");
        for b in 0..config.n_blocks {
            // transposed conv kernels are laid out [C_in, C_out, k]
            conv(
                &mut params,
                &mut rng,
                &format!("dec.up{b}"),
                w,
                w,
                UPSAMPLE_KERNEL,
                true,
            );
            let prefix = format!("dec.block{b}");
            conv(&mut params, &mut rng, &format!("{prefix}.conv0"), w, w, k, true);
            conv(&mut params, &mut rng, &format!("{prefix}.conv1"), w, w, k, true);
            conv(&mut params, &mut rng, &format!("{prefix}.conv2"), w, w, k, true);
        }
        conv(&mut params, &mut rng, "dec.out", config.n_channels, w, 1, true);

        Ok(Model {
            config,
            params,
            decode_calls: AtomicU64::new(0),
        })
    }

    /// Reassemble a model from a config and a full parameter set, e.g. when
    /// loading a checkpoint. The names and shapes must match exactly what
    /// [`Model::build`] would produce for this config.
    pub fn from_parts(
        config: ModelConfig,
        params: IndexMap<String, Tensor<f32>>,
    ) -> Result<Model> {
        let reference = Model::build(config.clone(), 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::Format(format!(
                "parameter count {} does not match config ({} expected)",
                params.len(),
                reference.params.len()
            )));
        }
        for (name, tensor) in &reference.params {
            match params.get(name) {
                Some(t) if t.shape() == tensor.shape() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        tensor.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name}"))),
            }
        }
        Ok(Model {
            config,
            params,
            decode_calls: AtomicU64::new(0),
        })
    }

    pub fn params(&self) -> &IndexMap<String, Tensor<f32>> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut IndexMap<String, Tensor<f32>> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn decode_calls(&self) -> u64 {
        self.decode_calls.load(Ordering::Relaxed)
    }

    /// Load all parameters onto a tape (cast to `F`), returning a handle that
    /// can run encode/decode on that tape.
    pub fn stage<'m, F: Real>(&'m self, tape: &mut Tape<F>, trainable: bool) -> TapedModel<'m, F> {
        let mut vars = HashMap::with_capacity(self.params.len());
        for (name, tensor) in &self.params {
            let cast = tensor.cast::<F>();
            vars.insert(name.clone(), tape.leaf(&cast, trainable));
        }
        TapedModel {
            model: self,
            vars,
            _marker: std::marker::PhantomData,
        }
    }

    /// Convenience single-epoch encode (no gradients).
    pub fn encode(&self, x: &Tensor<f32>) -> Result<SplitLatents> {
        let mut tape = Tape::new();
        let staged = self.stage::<f32>(&mut tape, false);
        let xv = tape.constant(x);
        let (zs, zt) = staged.encode_vars(&mut tape, xv)?;
        Ok(SplitLatents {
            z_subject: tape.value(zs),
            z_task: tape.value(zt),
        })
    }

    /// Convenience single-epoch decode (no gradients).
    pub fn decode(&self, latents: &SplitLatents) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let staged = self.stage::<f32>(&mut tape, false);
        let zs = tape.constant(&latents.z_subject);
        let zt = tape.constant(&latents.z_task);
        let out = staged.decode_vars(&mut tape, zs, zt)?;
        Ok(tape.value(out))
    }

    /// Time extents of the encoder conv stages, input first. The decoder
    /// traverses the same list in reverse.
    pub fn encoder_time_trace(&self) -> Vec<usize> {
        let mut trace = vec![self.config.n_time];
        let mut t = self.config.n_time;
        for _ in 0..self.config.n_blocks {
            t /= 2;
            trace.push(t);
        }
        trace
    }
}

/// A [`Model`] whose parameters are staged on a specific tape.
pub struct TapedModel<'m, F: Real> {
    model: &'m Model,
    vars: HashMap<String, Var>,
    _marker: std::marker::PhantomData<F>,
}

impl<'m, F: Real> TapedModel<'m, F> {
    /// Bind externally created parameter variables (one per named parameter,
    /// matching shapes) to this model's architecture. Used by the gradient
    /// checker to differentiate with respect to parameters on an `f64` tape.
    pub fn from_vars(model: &'m Model, vars: HashMap<String, Var>) -> Result<TapedModel<'m, F>> {
        for name in model.params.keys() {
            if !vars.contains_key(name) {
                return Err(Error::Config(format!("missing variable for parameter {name}")));
            }
        }
        Ok(TapedModel {
            model,
            vars,
            _marker: std::marker::PhantomData,
        })
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn conv_stage(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        name: &str,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let h = tape.conv1d(x, self.var(&format!("{name}.w")), stride, padding)?;
        let h = tape.add(h, self.var(&format!("{name}.b")))?;
        let h = tape.relu(h);
        instance_norm(tape, h, nn::INSTANCE_NORM_EPS)
    }

    /// Three conv/ReLU/norm stages with a residual connection around them.
    fn conv_block(&self, tape: &mut Tape<F>, x: Var, prefix: &str) -> Result<Var> {
        let p = self.config().padding;
        let mut h = x;
        for j in 0..3 {
            h = self.conv_stage(tape, h, &format!("{prefix}.conv{j}"), 1, p)?;
        }
        let residual = if self.vars.contains_key(&format!("{prefix}.proj.w")) {
            tape.conv1d(x, self.var(&format!("{prefix}.proj.w")), 1, 0)?
        } else {
            x
        };
        tape.add(h, residual)
    }

    fn transformer_stack(&self, tape: &mut Tape<F>, a: Var, prefix: &str) -> Result<Var> {
        let cfg = self.config();
        let t = tape.shape(a)[0];
        let pe = sinusoidal_encoding::<F>(t, cfg.conv_width);
        let pe = tape.constant(&pe);
        let mut a = tape.add(a, pe)?;
        for l in 0..cfg.n_transformer_layers {
            let p = format!("{prefix}.tf{l}");
            let params = AttentionParams {
                ln1_g: self.var(&format!("{p}.ln1.g")),
                ln1_b: self.var(&format!("{p}.ln1.b")),
                wq: self.var(&format!("{p}.wq.w")),
                bq: self.var(&format!("{p}.wq.b")),
                wk: self.var(&format!("{p}.wk.w")),
                bk: self.var(&format!("{p}.wk.b")),
                wv: self.var(&format!("{p}.wv.w")),
                bv: self.var(&format!("{p}.wv.b")),
                wo: self.var(&format!("{p}.wo.w")),
                bo: self.var(&format!("{p}.wo.b")),
                ln2_g: self.var(&format!("{p}.ln2.g")),
                ln2_b: self.var(&format!("{p}.ln2.b")),
                ff1_w: self.var(&format!("{p}.ff1.w")),
                ff1_b: self.var(&format!("{p}.ff1.b")),
                ff2_w: self.var(&format!("{p}.ff2.w")),
                ff2_b: self.var(&format!("{p}.ff2.b")),
            };
            a = attention_block(tape, a, &params, cfg.n_heads)?;
        }
        Ok(a)
    }
}

impl<'m, F: Real> LatentCodec<F> for TapedModel<'m, F> {
    fn encode_vars(&self, tape: &mut Tape<F>, x: Var) -> Result<(Var, Var)> {
        let cfg = self.config().clone();
        let shape = tape.shape(x);
        if shape != [cfg.n_channels, cfg.n_time] {
            return Err(Error::Shape(format!(
                "encode expects [{}, {}], got {:?}",
                cfg.n_channels, cfg.n_time, shape
            )));
        }
        let mut h = x;
        for b in 0..cfg.n_blocks {
            h = self.conv_block(tape, h, &format!("enc.block{b}"))?;
            h = self.conv_stage(tape, h, &format!("enc.down{b}"), 2, cfg.padding)?;
        }
        let a = tape.transpose(h)?;
        let a = self.transformer_stack(tape, a, "enc")?;
        let split = linear(tape, a, self.var("enc.split.w"), Some(self.var("enc.split.b")))?;
        let zs = tape.narrow(split, 1, 0, cfg.d_latent)?;
        let zt = tape.narrow(split, 1, cfg.d_latent, cfg.d_latent)?;
        Ok((zs, zt))
    }

    fn decode_vars(&self, tape: &mut Tape<F>, z_subject: Var, z_task: Var) -> Result<Var> {
        let cfg = self.config().clone();
        let expect = [cfg.bottleneck_len(), cfg.d_latent];
        for z in [z_subject, z_task] {
            if tape.shape(z) != expect {
                return Err(Error::Shape(format!(
                    "decode expects latents {:?}, got {:?}",
                    expect,
                    tape.shape(z)
                )));
            }
        }
        self.model.decode_calls.fetch_add(1, Ordering::Relaxed);
        let joined = tape.concat(&[z_subject, z_task], 1)?;
        let a = linear(tape, joined, self.var("dec.join.w"), Some(self.var("dec.join.b")))?;
        let a = self.transformer_stack(tape, a, "dec")?;
        let mut h = tape.transpose(a)?;
        for b in 0..cfg.n_blocks {
            let up = tape.conv1d_transposed(
                h,
                self.var(&format!("dec.up{b}.w")),
                2,
                UPSAMPLE_PADDING,
            )?;
            let up = tape.add(up, self.var(&format!("dec.up{b}.b")))?;
            let up = tape.relu(up);
            h = instance_norm(tape, up, nn::INSTANCE_NORM_EPS)?;
            h = self.conv_block(tape, h, &format!("dec.block{b}"))?;
        }
        let out = tape.conv1d(h, self.var("dec.out.w"), 1, 0)?;
        tape.add(out, self.var("dec.out.b"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
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
        }
    }

    fn ramp_input(config: &ModelConfig) -> Tensor<f32> {
        let n = config.n_channels * config.n_time;
        Tensor::from_vec(
            vec![config.n_channels, config.n_time],
            (0..n).map(|i| (i as f32 * 0.37).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn bottleneck_length_default_config() {
        let config = ModelConfig::default();
        assert_eq!(config.n_time, 256);
        assert_eq!(config.n_blocks, 4);
        assert_eq!(config.bottleneck_len(), 16);
    }

    #[test]
    fn validate_rejects_indivisible_time_extent() {
        let config = ModelConfig {
            n_time: 40,
            ..ModelConfig::default()
        };
        assert!(config.validate().is_err());
        let config = ModelConfig {
            conv_width: 6,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let a = Model::build(tiny_config(), 5).unwrap();
        let b = Model::build(tiny_config(), 5).unwrap();
        let c = Model::build(tiny_config(), 6).unwrap();
        assert_eq!(a.params().len(), b.params().len());
        for (name, t) in a.params() {
            assert_eq!(t.data(), b.params()[name].data(), "{name}");
        }
        assert!(a.params().iter().any(|(n, t)| t.data() != c.params()[n].data()));
    }

    #[test]
    fn parameter_count_regression() {
        assert_eq!(Model::build(ModelConfig::default(), 0).unwrap().param_count(), 678024);
        assert_eq!(Model::build(tiny_config(), 0).unwrap().param_count(), 810);
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let config = tiny_config();
        let model = Model::build(config.clone(), 1).unwrap();
        let x = ramp_input(&config);
        let latents = model.encode(&x).unwrap();
        let expect = vec![config.bottleneck_len(), config.d_latent];
        assert_eq!(latents.z_subject.shape(), &expect[..]);
        assert_eq!(latents.z_task.shape(), &expect[..]);
        let again = model.encode(&x).unwrap();
        assert_eq!(latents.z_subject.data(), again.z_subject.data());
        assert_eq!(latents.z_task.data(), again.z_task.data());
        let x_hat = model.decode(&latents).unwrap();
        assert_eq!(x_hat.shape(), &[config.n_channels, config.n_time]);
        assert!(x_hat.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decode_call_counter_tracks_decoder_use_only() {
        let config = tiny_config();
        let model = Model::build(config.clone(), 1).unwrap();
        let x = ramp_input(&config);
        let latents = model.encode(&x).unwrap();
        assert_eq!(model.decode_calls(), 0);
        model.decode(&latents).unwrap();
        model.decode(&latents).unwrap();
        assert_eq!(model.decode_calls(), 2);
    }

    #[test]
    fn from_parts_validates_names_and_shapes() {
        let model = Model::build(tiny_config(), 2).unwrap();
        let good = Model::from_parts(tiny_config(), model.params().clone()).unwrap();
        assert_eq!(good.param_count(), model.param_count());

        let mut missing = model.params().clone();
        missing.shift_remove("dec.out.w");
        assert!(Model::from_parts(tiny_config(), missing).is_err());

        let mut wrong_shape = model.params().clone();
        wrong_shape.insert("dec.out.b".into(), Tensor::zeros(vec![7]));
        assert!(Model::from_parts(tiny_config(), wrong_shape).is_err());

        let mut extra = model.params().clone();
        extra.insert("enc.bogus".into(), Tensor::zeros(vec![1]));
        assert!(Model::from_parts(tiny_config(), extra).is_err());
    }

    #[test]
    fn encoder_time_trace_halves_per_block() {
        let trace = Model::build(ModelConfig::default(), 0).unwrap().encoder_time_trace();
        assert_eq!(trace, vec![256, 128, 64, 32, 16]);
    }
}
