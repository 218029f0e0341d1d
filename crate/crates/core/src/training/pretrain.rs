use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{patchify, PatchSet, PointCloud};
use crate::loss::{alignment_target_loss, inner_instance_loss, inter_instance_loss, LossKind};
use crate::model::{batch_flags, batch_rows, make_mask, Branch, Graph, MaskSpec, Model, ModelConfig, PatchBatch};
use crate::numerics::{ParamStore, Scalar, Tape, Var};
use crate::rng::{derive_seed, rng_for, tag};
use crate::synthdata::augment;

use super::checkpoint::save_checkpoint;
use super::config::{PositivePair, TrainConfig};
use super::optim::{clip_grad_norm, AdamW, LrSchedule};

pub const TRACE_FILE: &str = "trace.tsv";
pub const EPOCHS_FILE: &str = "epochs.tsv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
}

pub struct PretrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub trace: Vec<TraceRow>,
    pub epochs: Vec<EpochStats>,
    pub checkpoint: Option<PathBuf>,
}

/// One training example after augmentation, patchification and masking.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub patches: PatchSet,
    pub mask: MaskSpec,
    /// Second independent mask, drawn only for surround–surround pairs.
    pub mask2: Option<MaskSpec>,
}

/// Augments, patchifies and masks `cloud`; a pure function of `(seed, epoch, index)`.
pub fn prepare_sample(cloud: &PointCloud, mc: &ModelConfig, tc: &TrainConfig, epoch: usize, index: usize) -> Result<PreparedSample> {
    let mut rng = rng_for(tc.seed, &[tag("sample"), epoch as u64, index as u64]);
    let cloud = augment(cloud, tc.augment, &tc.augment_params, &mut rng);
    let start = if tc.random_fps_start {
        rng.random_range(0..cloud.len())
    } else {
        0
    };
    let patches = patchify(&cloud, mc.n_patches, mc.k, start)?;
    let mask = make_mask(mc.n_patches, mc.mask_ratio, &mut rng)?;
    let mask2 = match tc.positive_pair {
        PositivePair::SurroundSurround => Some(make_mask(mc.n_patches, mc.mask_ratio, &mut rng)?),
        PositivePair::CenterSurround => None,
    };
    Ok(PreparedSample { patches, mask, mask2 })
}

/// Scalar pretraining objective of one batch under the configured variant.
pub fn objective<T: Scalar>(
    model: &Model,
    g: &mut Graph<T>,
    batch: &PatchBatch<T>,
    masks: &[MaskSpec],
    masks2: Option<&[MaskSpec]>,
    tc: &TrainConfig,
) -> Result<Var> {
    let tau = model.config.tau;
    let b = batch.batch;
    let contrast = |g: &mut Graph<T>, v1: Var, v2: Var| -> Result<Var> {
        match tc.loss {
            LossKind::Inter => inter_instance_loss(g.tape, v1, v2, tau, tc.symmetric),
            _ => inner_instance_loss(g.tape, v1, v2, b, tau, tc.symmetric),
        }
    };
    match tc.positive_pair {
        PositivePair::CenterSurround => {
            let f = model.forward_dual(g, batch, masks)?;
            if tc.loss != LossKind::Alignment {
                return contrast(g, f.v_c, f.v_s);
            }
            let z = g.tape.add(f.e_c, f.e_s)?;
            let full = model.encode(g, Branch::Center, z, b)?;
            let v_full = g.tape.gather_rows(full.h, &batch_rows(masks))?;
            let lc = alignment_target_loss(g.tape, v_full, f.v_c)?;
            let ls = alignment_target_loss(g.tape, v_full, f.v_s)?;
            let sum = g.tape.add(lc, ls)?;
            Ok(g.tape.scale(sum, T::from_f64(0.5)))
        }
        PositivePair::SurroundSurround => {
            let masks2 = masks2.ok_or_else(|| Error::invalid_arg("surround–surround pairs need a second mask per sample"))?;
            if masks2.len() != masks.len() {
                return Err(Error::invalid_arg("second mask set has the wrong length"));
            }
            let (e_c, e_s) = model.embed(g, batch)?;
            let ms = g.p(model.mask_s);
            let s1 = g.tape.replace_rows(e_s, ms, &batch_flags(masks))?;
            let s2 = g.tape.replace_rows(e_s, ms, &batch_flags(masks2))?;
            let z1 = g.tape.add(e_c, s1)?;
            let z2 = g.tape.add(e_c, s2)?;
            let (o1, o2) = model.encode_pair(g, z1, z2, b)?;
            let rows = batch_rows(masks);
            let v1 = g.tape.gather_rows(o1.h, &rows)?;
            let v2 = g.tape.gather_rows(o2.h, &rows)?;
            if tc.loss == LossKind::Alignment {
                return alignment_target_loss(g.tape, v1, v2);
            }
            contrast(g, v1, v2)
        }
    }
}

struct TraceWriter {
    trace: Option<(PathBuf, BufWriter<File>)>,
    epochs: Option<(PathBuf, BufWriter<File>)>,
}

impl TraceWriter {
    fn open(out: Option<&Path>) -> Result<Self> {
        let open = |name: &str, header: &str| -> Result<Option<(PathBuf, BufWriter<File>)>> {
            match out {
                None => Ok(None),
                Some(dir) => {
                    let path = dir.join(name);
                    let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                    let mut w = BufWriter::new(f);
                    writeln!(w, "{header}").map_err(|e| Error::io(&path, e))?;
                    Ok(Some((path, w)))
                }
            }
        };
        Ok(Self {
            trace: open(TRACE_FILE, "step\tepoch\tlr\tloss")?,
            epochs: open(EPOCHS_FILE, "epoch\tmean_loss\tseconds")?,
        })
    }

    fn step(&mut self, r: &TraceRow) -> Result<()> {
        if let Some((path, w)) = self.trace.as_mut() {
            writeln!(w, "{}\t{}\t{:e}\t{}", r.step, r.epoch, r.lr, r.loss).map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    fn epoch(&mut self, s: &EpochStats) -> Result<()> {
        if let Some((path, w)) = self.trace.as_mut() {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        if let Some((path, w)) = self.epochs.as_mut() {
            writeln!(w, "{}\t{}\t{:.3}", s.epoch, s.mean_loss, s.seconds).map_err(|e| Error::io(path.as_path(), e))?;
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Pretrains from scratch on `data`. With `out`, the trace, per-epoch
/// timings and checkpoints are written there.
pub fn pretrain(
    mc: &ModelConfig,
    tc: &TrainConfig,
    data: &[PointCloud],
    out: Option<&Path>,
    progress: &mut dyn FnMut(&EpochStats),
) -> Result<PretrainOutcome> {
    mc.validate()?;
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::invalid_arg("pretrain: empty dataset"));
    }
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (model, mut store) = Model::init::<f32>(mc, derive_seed(tc.seed, &[tag("init")]))?;
    let mut opt = AdamW::new(&store, tc.weight_decay);
    let steps_per_epoch = data.len().div_ceil(tc.batch_size);
    let schedule = LrSchedule {
        base: tc.base_lr,
        min: tc.min_lr,
        warmup_steps: tc.warmup_epochs * steps_per_epoch,
        total_steps: tc.epochs * steps_per_epoch,
    };
    let mut writer = TraceWriter::open(out)?;
    let mut trace = Vec::with_capacity(schedule.total_steps);
    let mut epochs = Vec::with_capacity(tc.epochs);
    let mut last_good = String::from("none");
    let mut step = 0usize;

    for epoch in 0..tc.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(tc.seed, &[tag("shuffle"), epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let prepared = chunk
                .iter()
                .map(|&i| prepare_sample(&data[i], mc, tc, epoch, i))
                .collect::<Result<Vec<_>>>()?;
            let sets: Vec<PatchSet> = prepared.iter().map(|p| p.patches.clone()).collect();
            let masks: Vec<MaskSpec> = prepared.iter().map(|p| p.mask.clone()).collect();
            let masks2: Option<Vec<MaskSpec>> = prepared.iter().map(|p| p.mask2.clone()).collect();
            let batch = PatchBatch::<f32>::from_patch_sets(&sets)?;

            let lr = schedule.lr(step);
            let mut tape = Tape::new();
            let loss = {
                let mut g = Graph::train(&mut tape, &store, derive_seed(tc.seed, &[tag("drop"), step as u64]));
                objective(&model, &mut g, &batch, &masks, masks2.as_deref(), tc)?
            };
            let value = tape.value(loss).data()[0].as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    epoch,
                    last_good,
                });
            }
            store.zero_grads();
            tape.backward_into(loss, &mut store)?;
            drop(tape);
            clip_grad_norm(&mut store, tc.grad_clip);
            opt.step(&mut store, lr);

            let row = TraceRow { step, epoch, lr, loss: value };
            writer.step(&row)?;
            trace.push(row);
            loss_sum += value;
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            seconds: started.elapsed().as_secs_f64(),
        };
        writer.epoch(&stats)?;
        progress(&stats);
        epochs.push(stats);
        if let Some(dir) = out {
            if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 && epoch + 1 < tc.epochs {
                let path = dir.join(format!("checkpoint_epoch{:04}.bin", epoch + 1));
                save_checkpoint(&path, &model, &store)?;
                last_good = path.display().to_string();
            }
        }
    }

    let checkpoint = match out {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&path, &model, &store)?;
            Some(path)
        }
        None => None,
    };
    Ok(PretrainOutcome {
        model,
        store,
        trace,
        epochs,
        checkpoint,
    })
}
