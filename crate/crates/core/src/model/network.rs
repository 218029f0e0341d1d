use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::PatchSet;
use crate::numerics::init::trunc_normal;
use crate::numerics::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

use super::config::{ModelConfig, Sharing};
use super::mask::{batch_flags, batch_rows, MaskSpec};

pub const INIT_STD: f64 = 0.02;

/// A recording context: the tape, the parameter values it reads, and the mode.
pub struct Graph<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    trainable: bool,
    drop_rng: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Graph<'a, T> {
    /// Training mode: parameters receive gradients and stochastic depth is live.
    pub fn train(tape: &'a mut Tape<T>, store: &'a ParamStore<T>, drop_seed: u64) -> Self {
        Self {
            tape,
            store,
            trainable: true,
            drop_rng: Some(ChaCha8Rng::seed_from_u64(drop_seed)),
        }
    }

    /// Deterministic forward whose parameters still receive gradients.
    pub fn deterministic(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            trainable: true,
            drop_rng: None,
        }
    }

    /// Inference: parameters are recorded as constants.
    pub fn eval(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            trainable: false,
            drop_rng: None,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn is_training(&self) -> bool {
        self.drop_rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if self.trainable {
            self.tape.param(self.store, id)
        } else {
            self.tape.frozen_param(self.store, id)
        }
    }

    pub fn linear(&mut self, x: Var, l: &Linear) -> Result<Var> {
        let w = self.p(l.w);
        let b = l.b.map(|b| self.p(b));
        self.tape.linear(x, w, b)
    }

    /// Zeroes whole samples (groups of `rows_per_sample` rows) with probability `rate`.
    fn drop_path(&mut self, x: Var, rate: f64, rows_per_sample: usize) -> Result<Var> {
        let Some(rng) = self.drop_rng.as_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let samples = self.tape.value(x).rows() / rows_per_sample;
        let keep = 1.0 - rate;
        let mut factors = Vec::with_capacity(samples * rows_per_sample);
        for _ in 0..samples {
            let f = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
            factors.extend(std::iter::repeat_n(T::from_f64(f), rows_per_sample));
        }
        self.tape.row_scale(x, factors)
    }
}

/// Affine layer `x·w + b` with `w: [in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub ln1: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Transformer stack plus projector; one per branch in non-shared mode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoder {
    pub blocks: Vec<Block>,
    pub proj1: Linear,
    pub proj2: Linear,
}

/// Which branch a sequence belongs to; selects the encoder in non-shared mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Center,
    Surround,
}

/// Parameter handles of the whole network. Values live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub pos1: Linear,
    pub pos2: Linear,
    pub pn1: Linear,
    pub pn2: Linear,
    pub pn3: Linear,
    pub pn4: Linear,
    pub mask_c: ParamId,
    pub mask_s: ParamId,
    pub encoders: Vec<Encoder>,
}

/// Outputs of one encoder pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Transformer output before the projector, `[rows, D]`.
    pub tokens: Var,
    /// Projector output, `[rows, D]`.
    pub h: Var,
    /// Attention weights per block, `[batch·heads, N, N]`.
    pub attention: Vec<Var>,
}

/// Patch inputs of a batch laid out sample-major.
#[derive(Clone, Debug)]
pub struct PatchBatch<T> {
    /// `[B·N, 3]`
    pub centers: Tensor<T>,
    /// `[B·N·k, 3]`, center-relative.
    pub patches: Tensor<T>,
    pub batch: usize,
    pub n: usize,
    pub k: usize,
}

impl<T: Scalar> PatchBatch<T> {
    pub fn from_patch_sets(sets: &[PatchSet]) -> Result<Self> {
        let first = sets.first().ok_or_else(|| Error::invalid_arg("empty patch batch"))?;
        let (n, k) = (first.n, first.k);
        if let Some(bad) = sets.iter().find(|s| s.n != n || s.k != k) {
            return Err(Error::invalid_arg(format!(
                "patch batch mixes (N, k) = ({n}, {k}) and ({}, {})",
                bad.n, bad.k
            )));
        }
        let mut centers = Vec::with_capacity(sets.len() * n * 3);
        let mut patches = Vec::with_capacity(sets.len() * n * k * 3);
        for s in sets {
            centers.extend(s.centers.iter().flatten().map(|&c| T::from_f64(c as f64)));
            patches.extend(s.patches.iter().flatten().map(|&c| T::from_f64(c)));
        }
        Ok(Self {
            centers: Tensor::new(&[sets.len() * n, 3], centers)?,
            patches: Tensor::new(&[sets.len() * n * k, 3], patches)?,
            batch: sets.len(),
            n,
            k,
        })
    }
}

/// Intermediate values of the dual-branch forward.
#[derive(Clone, Debug)]
pub struct DualForward {
    pub e_c: Var,
    pub e_s: Var,
    pub z_c: Var,
    pub z_s: Var,
    pub h_c: Var,
    pub h_s: Var,
    /// Masked rows of `h_c`/`h_s`, `[B·M, D]`, sample-major and ascending.
    pub v_c: Var,
    pub v_s: Var,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Linear> {
        self.linear_std(name, fan_in, fan_out, bias, INIT_STD)
    }

    /// Fan-in scaled layer for the embedding MLPs, which see raw coordinates
    /// and have no normalisation of their own.
    fn embed_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        self.linear_std(name, fan_in, fan_out, true, (2.0 / fan_in as f64).sqrt())
    }

    fn linear_std(&mut self, name: &str, fan_in: usize, fan_out: usize, bias: bool, std: f64) -> Result<Linear> {
        let w = self
            .store
            .add(format!("{name}.w"), trunc_normal(self.rng, &[fan_in, fan_out], std), true)?;
        let b = if bias {
            Some(self.store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), false)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNorm> {
        Ok(LayerNorm {
            g: self.store.add(format!("{name}.g"), Tensor::full(&[dim], T::one()), false)?,
            b: self.store.add(format!("{name}.b"), Tensor::zeros(&[dim]), false)?,
        })
    }

    fn encoder(&mut self, prefix: &str, c: &ModelConfig) -> Result<Encoder> {
        let d = c.dim;
        let mut blocks = Vec::with_capacity(c.depth);
        for i in 0..c.depth {
            let p = format!("{prefix}.block{i}");
            blocks.push(Block {
                ln1: self.layer_norm(&format!("{p}.ln1"), d)?,
                q: self.linear(&format!("{p}.attn.q"), d, d, true)?,
                k: self.linear(&format!("{p}.attn.k"), d, d, true)?,
                v: self.linear(&format!("{p}.attn.v"), d, d, true)?,
                o: self.linear(&format!("{p}.attn.o"), d, d, true)?,
                ln2: self.layer_norm(&format!("{p}.ln2"), d)?,
                fc1: self.linear(&format!("{p}.mlp.fc1"), d, d * c.mlp_ratio, true)?,
                fc2: self.linear(&format!("{p}.mlp.fc2"), d * c.mlp_ratio, d, true)?,
            });
        }
        Ok(Encoder {
            blocks,
            proj1: self.linear(&format!("{prefix}.proj.fc1"), d, c.proj_hidden, true)?,
            proj2: self.linear(&format!("{prefix}.proj.fc2"), c.proj_hidden, d, true)?,
        })
    }
}

fn encoder_prefixes(sharing: Sharing) -> &'static [&'static str] {
    match sharing {
        Sharing::Shared => &["encoder"],
        Sharing::NonShared => &["encoder_c", "encoder_s"],
    }
}

/// Stochastic-depth rate of block `i`, rising linearly to `rate` at the last block.
pub fn drop_path_rate(rate: f64, i: usize, depth: usize) -> f64 {
    if depth <= 1 {
        rate
    } else {
        rate * i as f64 / (depth - 1) as f64
    }
}

impl Model {
    /// Fresh parameters: truncated normal weights (σ 0.02, fan-in scaled in the
    /// embedding MLPs) and mask tokens,
    /// zero biases, unit layer-norm gains.
    pub fn init<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let d = config.dim;
        let c1 = config.pointnet_hidden();
        let pos1 = b.embed_linear("pos.fc1", 3, d)?;
        let pos2 = b.embed_linear("pos.fc2", d, d)?;
        let pn1 = b.embed_linear("patch.fc1", 3, c1)?;
        let pn2 = b.embed_linear("patch.fc2", c1, c1)?;
        let pn3 = b.embed_linear("patch.fc3", 2 * c1, d)?;
        let pn4 = b.embed_linear("patch.fc4", d, d)?;
        let mask_c = b.store.add("mask.c", trunc_normal(b.rng, &[1, d], INIT_STD), false)?;
        let mask_s = b.store.add("mask.s", trunc_normal(b.rng, &[1, d], INIT_STD), false)?;
        let encoders = encoder_prefixes(config.sharing)
            .iter()
            .map(|p| b.encoder(p, config))
            .collect::<Result<Vec<_>>>()?;
        let model = Model {
            config: config.clone(),
            pos1,
            pos2,
            pn1,
            pn2,
            pn3,
            pn4,
            mask_c,
            mask_s,
            encoders,
        };
        Ok((model, store))
    }

    /// Rebinds handles to an existing store (e.g. a loaded checkpoint),
    /// checking that every expected parameter is present with the right shape.
    pub fn bind<T: Scalar>(config: &ModelConfig, store: &ParamStore<T>) -> Result<Model> {
        let (model, template) = Model::init::<T>(config, 0)?;
        for id in template.ids() {
            let name = template.name(id);
            let found = store
                .id(name)
                .ok_or_else(|| Error::invalid_arg(format!("parameter `{name}` missing from store")))?;
            if found != id {
                return Err(Error::invalid_arg(format!("parameter `{name}` is out of order in store")));
            }
            if store.value(found).shape() != template.value(id).shape() {
                return Err(Error::invalid_arg(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    store.value(found).shape(),
                    template.value(id).shape()
                )));
            }
        }
        Ok(model)
    }

    pub fn encoder(&self, branch: Branch) -> &Encoder {
        match (branch, self.encoders.len()) {
            (Branch::Surround, 2) => &self.encoders[1],
            _ => &self.encoders[0],
        }
    }

    /// Position projector: `[rows, 3] → [rows, D]`.
    pub fn embed_centers<T: Scalar>(&self, g: &mut Graph<T>, centers: Var) -> Result<Var> {
        let h = g.linear(centers, &self.pos1)?;
        let h = g.tape.gelu(h);
        g.linear(h, &self.pos2)
    }

    /// Two-stage mini-PointNet: `[rows·k, 3] → [rows, D]`.
    pub fn embed_patches<T: Scalar>(&self, g: &mut Graph<T>, patches: Var, k: usize) -> Result<Var> {
        let total = g.tape.shape(patches)[0];
        if k == 0 || total % k != 0 {
            return Err(Error::invalid_arg(format!(
                "embed_patches: {total} points do not split into patches of {k}"
            )));
        }
        let rows = total / k;
        let c1 = self.config.pointnet_hidden();
        let d = self.config.dim;
        let h = g.linear(patches, &self.pn1)?;
        let h = g.tape.gelu(h);
        let local = g.linear(h, &self.pn2)?;
        let grouped = g.tape.reshape(local, &[rows, k, c1])?;
        let pooled = g.tape.reduce_max(grouped, 1)?;
        let owner: Vec<usize> = (0..total).map(|r| r / k).collect();
        let broadcast = g.tape.gather_rows(pooled, &owner)?;
        let h = g.tape.concat(broadcast, local, 1)?;
        let h = g.linear(h, &self.pn3)?;
        let h = g.tape.gelu(h);
        let h = g.linear(h, &self.pn4)?;
        let grouped = g.tape.reshape(h, &[rows, k, d])?;
        g.tape.reduce_max(grouped, 1)
    }

    /// `Z_c = E_c[mask→m_c] + E_s` and `Z_s = E_c + E_s[mask→m_s]`.
    pub fn build_branches<T: Scalar>(&self, g: &mut Graph<T>, e_c: Var, e_s: Var, flags: &[bool]) -> Result<(Var, Var)> {
        let mc = g.p(self.mask_c);
        let ms = g.p(self.mask_s);
        let c_masked = g.tape.replace_rows(e_c, mc, flags)?;
        let z_c = g.tape.add(c_masked, e_s)?;
        let s_masked = g.tape.replace_rows(e_s, ms, flags)?;
        let z_s = g.tape.add(e_c, s_masked)?;
        Ok((z_c, z_s))
    }

    fn attention<T: Scalar>(&self, g: &mut Graph<T>, blk: &Block, x: Var, batch: usize) -> Result<(Var, Var)> {
        let (n, d, h) = (self.config.n_patches, self.config.dim, self.config.heads);
        let dh = d / h;
        let split = |g: &mut Graph<T>, l: &Linear| -> Result<Var> {
            let y = g.linear(x, l)?;
            let y = g.tape.reshape(y, &[batch, n, h, dh])?;
            let y = g.tape.permute(y, &[0, 2, 1, 3])?;
            g.tape.reshape(y, &[batch * h, n, dh])
        };
        let q = split(g, &blk.q)?;
        let k = split(g, &blk.k)?;
        let v = split(g, &blk.v)?;
        let q = g.tape.scale(q, T::from_f64(1.0 / (dh as f64).sqrt()));
        let scores = g.tape.matmul_t(q, k, false, true)?;
        let attn = g.tape.softmax(scores);
        let out = g.tape.matmul(attn, v)?;
        let out = g.tape.reshape(out, &[batch, h, n, dh])?;
        let out = g.tape.permute(out, &[0, 2, 1, 3])?;
        let out = g.tape.reshape(out, &[batch * n, d])?;
        Ok((g.linear(out, &blk.o)?, attn))
    }

    /// Pre-norm transformer followed by the projector. `z: [batch·N, D]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, branch: Branch, z: Var, batch: usize) -> Result<Encoded> {
        let n = self.config.n_patches;
        let expected = [batch * n, self.config.dim];
        if g.tape.shape(z) != expected {
            return Err(Error::invalid_arg(format!(
                "encode: input shape {:?}, expected {expected:?}",
                g.tape.shape(z)
            )));
        }
        let enc = self.encoder(branch);
        let depth = enc.blocks.len();
        let mut x = z;
        let mut attention = Vec::with_capacity(depth);
        for (i, blk) in enc.blocks.iter().enumerate() {
            let rate = drop_path_rate(self.config.drop_path, i, depth);
            let (gain, bias) = (g.p(blk.ln1.g), g.p(blk.ln1.b));
            let h = g.tape.layer_norm(x, gain, bias)?;
            let (a, w) = self.attention(g, blk, h, batch)?;
            attention.push(w);
            let a = g.drop_path(a, rate, n)?;
            x = g.tape.add(x, a)?;
            let (gain, bias) = (g.p(blk.ln2.g), g.p(blk.ln2.b));
            let h = g.tape.layer_norm(x, gain, bias)?;
            let h = g.linear(h, &blk.fc1)?;
            let h = g.tape.gelu(h);
            let h = g.linear(h, &blk.fc2)?;
            let h = g.drop_path(h, rate, n)?;
            x = g.tape.add(x, h)?;
        }
        let h = self.project(g, enc, x)?;
        Ok(Encoded {
            tokens: x,
            h,
            attention,
        })
    }

    fn project<T: Scalar>(&self, g: &mut Graph<T>, enc: &Encoder, x: Var) -> Result<Var> {
        let h = g.linear(x, &enc.proj1)?;
        let h = g.tape.gelu(h);
        g.linear(h, &enc.proj2)
    }

    /// Records the batch inputs and both embeddings.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, batch: &PatchBatch<T>) -> Result<(Var, Var)> {
        self.check_batch(batch)?;
        let centers = g.tape.input(batch.centers.clone());
        let patches = g.tape.input(batch.patches.clone());
        let e_c = self.embed_centers(g, centers)?;
        let e_s = self.embed_patches(g, patches, batch.k)?;
        Ok((e_c, e_s))
    }

    fn check_batch<T>(&self, batch: &PatchBatch<T>) -> Result<()> {
        if batch.n != self.config.n_patches || batch.k != self.config.k {
            return Err(Error::invalid_arg(format!(
                "batch has (N, k) = ({}, {}), model expects ({}, {})",
                batch.n, batch.k, self.config.n_patches, self.config.k
            )));
        }
        Ok(())
    }

    /// Encodes two sequences of `batch` samples each, through one stacked
    /// pass when the encoder is shared.
    pub fn encode_pair<T: Scalar>(&self, g: &mut Graph<T>, a: Var, b: Var, batch: usize) -> Result<(Encoded, Encoded)> {
        if self.encoders.len() == 1 {
            let rows = batch * self.config.n_patches;
            let z = g.tape.concat(a, b, 0)?;
            let out = self.encode(g, Branch::Center, z, 2 * batch)?;
            let first: Vec<usize> = (0..rows).collect();
            let second: Vec<usize> = (rows..2 * rows).collect();
            let split = |g: &mut Graph<T>, v: Var, idx: &[usize]| g.tape.gather_rows(v, idx);
            let ea = Encoded {
                tokens: split(g, out.tokens, &first)?,
                h: split(g, out.h, &first)?,
                attention: out.attention.clone(),
            };
            let eb = Encoded {
                tokens: split(g, out.tokens, &second)?,
                h: split(g, out.h, &second)?,
                attention: out.attention,
            };
            Ok((ea, eb))
        } else {
            let ea = self.encode(g, Branch::Center, a, batch)?;
            let eb = self.encode(g, Branch::Surround, b, batch)?;
            Ok((ea, eb))
        }
    }

    /// Full dual-branch forward with one mask per sample.
    pub fn forward_dual<T: Scalar>(&self, g: &mut Graph<T>, batch: &PatchBatch<T>, masks: &[MaskSpec]) -> Result<DualForward> {
        if masks.len() != batch.batch || masks.iter().any(|m| m.n != batch.n) {
            return Err(Error::invalid_arg("forward_dual: one mask of size N per sample is required"));
        }
        let (e_c, e_s) = self.embed(g, batch)?;
        let (z_c, z_s) = self.build_branches(g, e_c, e_s, &batch_flags(masks))?;
        let (oc, os) = self.encode_pair(g, z_c, z_s, batch.batch)?;
        let rows = batch_rows(masks);
        let v_c = g.tape.gather_rows(oc.h, &rows)?;
        let v_s = g.tape.gather_rows(os.h, &rows)?;
        Ok(DualForward {
            e_c,
            e_s,
            z_c,
            z_s,
            h_c: oc.h,
            h_s: os.h,
            v_c,
            v_s,
        })
    }

    /// Unmasked forward (`Z = E_c + E_s`); returns pre-projector tokens `[B·N, D]`.
    pub fn forward_tokens<T: Scalar>(&self, g: &mut Graph<T>, batch: &PatchBatch<T>) -> Result<Var> {
        let (e_c, e_s) = self.embed(g, batch)?;
        let z = g.tape.add(e_c, e_s)?;
        Ok(self.encode(g, Branch::Center, z, batch.batch)?.tokens)
    }

    /// Global feature `[B, 2D]`: mean and max over tokens, concatenated.
    pub fn global_features<T: Scalar>(&self, g: &mut Graph<T>, batch: &PatchBatch<T>) -> Result<Var> {
        let tokens = self.forward_tokens(g, batch)?;
        let t = g.tape.reshape(tokens, &[batch.batch, self.config.n_patches, self.config.dim])?;
        let mean = g.tape.reduce_mean(t, 1)?;
        let max = g.tape.reduce_max(t, 1)?;
        g.tape.concat(mean, max, 1)
    }

    /// Names of backbone parameters (everything except projectors and mask tokens).
    pub fn is_backbone_param(name: &str) -> bool {
        !(name.contains(".proj.") || name.starts_with("mask."))
    }
}
