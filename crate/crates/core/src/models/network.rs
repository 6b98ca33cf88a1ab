use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, Variant};
use crate::dsp::N_MELS;
use crate::tensor::{
    read_checkpoint, write_checkpoint, BatchNormArgs, Conv2dSpec, Graph, Mode, ParamStore, Scalar, Tensor, Var,
};
use crate::{Error, Result};

const KERNEL: usize = 5;
const CONV: Conv2dSpec = Conv2dSpec { stride: (1, 1), padding: (2, 2) };
/// Four 2×2 pools must leave at least one frame.
pub const MIN_FRAMES: usize = 16;

/// Intermediate values of one side network.
#[derive(Debug, Clone, Copy)]
pub struct SideOutput {
    pub embedding: Var,
    pub head_input: Var,
    /// `[B, 1]` preference score.
    pub score: Var,
}

/// Configuration plus every tensor the network owns.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn insert_bn<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, c: usize) {
    p.insert(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()), true);
    p.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]), true);
    p.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), false);
    p.insert(format!("{prefix}.running_var"), Tensor::full(&[c], T::one()), false);
}

fn insert_linear<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) {
    p.insert_kaiming(&format!("{prefix}.weight"), &[out, inp], inp, rng);
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]), true);
}

fn insert_mlp<T: Scalar>(p: &mut ParamStore<T>, prefix: &str, inp: usize, hidden: usize, out: usize, rng: &mut ChaCha8Rng) {
    insert_linear(p, &format!("{prefix}.fc1"), inp, hidden, rng);
    insert_bn(p, &format!("{prefix}.bn"), hidden);
    insert_linear(p, &format!("{prefix}.fc2"), hidden, out, rng);
}

fn insert_conv<T: Scalar>(p: &mut ParamStore<T>, name: &str, inp: usize, out: usize, rng: &mut ChaCha8Rng) {
    p.insert_kaiming(name, &[out, inp, KERNEL, KERNEL], inp * KERNEL * KERNEL, rng);
}

/// Stacks `frames × 64` row-major spectrograms into a `[N, 1, frames, 64]`
/// tensor.
pub fn batch_specs<T: Scalar>(specs: &[&[f32]], frames: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(specs.len() * frames * N_MELS);
    for s in specs {
        if s.len() != frames * N_MELS {
            return Err(Error::shape("batch_specs", format!("{} values, expected {frames}×{N_MELS}", s.len())));
        }
        data.extend(s.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![specs.len(), 1, frames, N_MELS], data)
}

/// `<checkpoint>.json`, holding the [`ModelConfig`].
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl<T: Scalar> Model<T> {
    /// Kaiming-uniform weights, zero biases, identity batchnorm.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut inp = 1;
        for (i, &c) in config.encoder.channels.iter().enumerate() {
            insert_conv(&mut p, &format!("encoder.stage{i}.conv.weight"), inp, c, &mut rng);
            insert_bn(&mut p, &format!("encoder.stage{i}.bn"), c);
            inp = c;
        }
        match config.variant {
            Variant::Ao | Variant::Asl => {}
            Variant::Ase => insert_mlp(&mut p, "gate", config.subject_dim, config.subject_hidden, N_MELS, &mut rng),
            Variant::Asp => {
                let pd = config.parallel_dim;
                insert_mlp(&mut p, "kernel_mlp", config.subject_dim, config.subject_hidden, pd * KERNEL * KERNEL, &mut rng);
                insert_bn(&mut p, "parallel.stage0.bn", pd);
                for i in 1..4 {
                    insert_conv(&mut p, &format!("parallel.stage{i}.conv.weight"), pd, pd, &mut rng);
                    insert_bn(&mut p, &format!("parallel.stage{i}.bn"), pd);
                }
            }
        }
        insert_mlp(&mut p, "head", config.head_input_dim(), config.mlp_hidden, 1, &mut rng);
        Ok(Model { config, params: p })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), params: self.params.cast() }
    }

    fn bn(&self, g: &mut Graph<T>, x: Var, prefix: &str, mode: Mode) -> Result<Var> {
        let gamma = g.param(&self.params, &format!("{prefix}.gamma"))?;
        let beta = g.param(&self.params, &format!("{prefix}.beta"))?;
        let mean_key = format!("{prefix}.running_mean");
        let var_key = format!("{prefix}.running_var");
        let args = BatchNormArgs {
            running_mean: self.params.tensor(&mean_key)?.data(),
            running_var: self.params.tensor(&var_key)?.data(),
            mean_key: &mean_key,
            var_key: &var_key,
            momentum: self.config.bn_momentum,
            eps: self.config.bn_eps,
        };
        g.batch_norm(x, gamma, beta, args, mode)
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("{prefix}.weight"))?;
        let b = g.param(&self.params, &format!("{prefix}.bias"))?;
        g.linear(x, w, b)
    }

    /// linear → batchnorm → relu → linear.
    pub fn mlp_block(&self, g: &mut Graph<T>, x: Var, prefix: &str, mode: Mode) -> Result<Var> {
        let h = self.linear(g, x, &format!("{prefix}.fc1"))?;
        let h = self.bn(g, h, &format!("{prefix}.bn"), mode)?;
        let h = g.relu(h);
        self.linear(g, h, &format!("{prefix}.fc2"))
    }

    /// batchnorm → relu → 2×2 average pool after a convolution.
    fn stage_tail(&self, g: &mut Graph<T>, x: Var, bn: &str, mode: Mode) -> Result<Var> {
        let x = self.bn(g, x, bn, mode)?;
        let x = g.relu(x);
        g.avg_pool2(x)
    }

    /// Mean over frequency, then mean + max over time: `[B,C,T,F]` → `[B,C]`.
    fn global_pool(g: &mut Graph<T>, x: Var) -> Result<Var> {
        let x = g.mean_axis(x, 3)?;
        let mean = g.mean_axis(x, 2)?;
        let max = g.max_axis(x, 2)?;
        g.add(mean, max)
    }

    fn check_input(&self, g: &Graph<T>, specs: Var) -> Result<()> {
        let s = g.shape(specs);
        if s.len() != 4 || s[1] != 1 || s[3] != N_MELS {
            return Err(Error::shape("encoder", format!("expected [B, 1, frames, {N_MELS}], got {s:?}")));
        }
        if s[2] < MIN_FRAMES {
            return Err(Error::shape(
                "encoder",
                format!("{} frames is too short; the encoder needs at least {MIN_FRAMES}", s[2]),
            ));
        }
        Ok(())
    }

    /// CNN6-style encoder: `[B,1,T,64]` → `[B, embedding_dim]`.
    pub fn encode(&self, g: &mut Graph<T>, specs: Var, mode: Mode) -> Result<Var> {
        self.check_input(g, specs)?;
        let mut x = specs;
        for i in 0..4 {
            let w = g.param(&self.params, &format!("encoder.stage{i}.conv.weight"))?;
            x = g.conv2d(x, w, CONV)?;
            x = self.stage_tail(g, x, &format!("encoder.stage{i}.bn"), mode)?;
        }
        Self::global_pool(g, x)
    }

    /// Per-sample gate in (0, 2) over the mel bins.
    pub fn gate(&self, g: &mut Graph<T>, subjects: Var, mode: Mode) -> Result<Var> {
        let z = self.mlp_block(g, subjects, "gate", mode)?;
        let s = g.sigmoid(z);
        Ok(g.scale(s, T::from_f64_lossy(2.0)))
    }

    /// Parallel path whose first-layer kernels come from the subject vector.
    fn parallel_path(&self, g: &mut Graph<T>, specs: Var, subjects: Var, mode: Mode) -> Result<Var> {
        let pd = self.config.parallel_dim;
        let b = g.shape(specs)[0];
        let k = self.mlp_block(g, subjects, "kernel_mlp", mode)?;
        let k = g.reshape(k, &[b, pd, 1, KERNEL, KERNEL])?;
        let mut x = g.conv2d_per_sample(specs, k, CONV)?;
        x = self.stage_tail(g, x, "parallel.stage0.bn", mode)?;
        for i in 1..4 {
            let w = g.param(&self.params, &format!("parallel.stage{i}.conv.weight"))?;
            x = g.conv2d(x, w, CONV)?;
            x = self.stage_tail(g, x, &format!("parallel.stage{i}.bn"), mode)?;
        }
        Self::global_pool(g, x)
    }

    /// One side network: `specs [B,1,T,64]`, `subjects [B,6]` → score `[B,1]`.
    pub fn side(&self, g: &mut Graph<T>, specs: Var, subjects: Var, mode: Mode) -> Result<SideOutput> {
        let b = g.shape(specs)[0];
        let ss = g.shape(subjects);
        if ss != [b, self.config.subject_dim] {
            return Err(Error::shape(
                "side",
                format!("subject input {ss:?}, expected [{b}, {}]", self.config.subject_dim),
            ));
        }
        let (embedding, head_input) = match self.config.variant {
            Variant::Ao => {
                let e = self.encode(g, specs, mode)?;
                (e, e)
            }
            Variant::Asl => {
                let e = self.encode(g, specs, mode)?;
                (e, g.concat(&[e, subjects], 1)?)
            }
            Variant::Ase => {
                self.check_input(g, specs)?;
                let gate = self.gate(g, subjects, mode)?;
                let gated = g.scale_last_axis(specs, gate)?;
                let e = self.encode(g, gated, mode)?;
                (e, e)
            }
            Variant::Asp => {
                let e = self.encode(g, specs, mode)?;
                let p = self.parallel_path(g, specs, subjects, mode)?;
                (e, g.concat(&[e, p], 1)?)
            }
        };
        let score = self.mlp_block(g, head_input, "head", mode)?;
        Ok(SideOutput { embedding, head_input, score })
    }

    /// Both sides run as one batch of `2N` with shared weights and the same
    /// subject vector; returns softmax probabilities `[N, 2]`.
    pub fn siamese(&self, g: &mut Graph<T>, a: Var, b: Var, subjects: Var, mode: Mode) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::shape("siamese", format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
        }
        let n = g.shape(a)[0];
        let specs = g.concat(&[a, b], 0)?;
        let subj = g.concat(&[subjects, subjects], 0)?;
        let scores = self.side(g, specs, subj, mode)?.score;
        let sa = g.slice_rows(scores, 0, n)?;
        let sb = g.slice_rows(scores, n, 2 * n)?;
        let logits = g.concat(&[sa, sb], 1)?;
        g.softmax(logits)
    }

    /// Writes the checkpoint and its JSON config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.params)?;
        let json = serde_json::to_string_pretty(&self.config)?;
        crate::fsutil::atomic_write(&sidecar_path(path), json.as_bytes())
    }

    /// Reads a checkpoint written by [`Model::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Model::init(config, 0)?;
        model.params.load_entries(&read_checkpoint(path)?)?;
        Ok(model)
    }
}
