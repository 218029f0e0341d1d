//! Cosine similarity and the contrastive objectives over masked-patch representations.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Var, NORM_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// Negatives are the other masked patches of the same cloud.
    Inner,
    /// Negatives are all masked patches in the batch.
    Inter,
    /// Negative cosine to the encoding of the unmasked sequence; no negatives.
    Alignment,
}

impl LossKind {
    pub const ALL: [LossKind; 3] = [LossKind::Inner, LossKind::Inter, LossKind::Alignment];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Inner => "inner",
            LossKind::Inter => "inter",
            LossKind::Alignment => "alignment",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(LossKind::Inner),
            "inter" => Ok(LossKind::Inter),
            "alignment" | "alignment_target" => Ok(LossKind::Alignment),
            _ => Err(Error::invalid_arg(format!("unknown loss `{s}` (expected inner, inter or alignment)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cosine {
    pub value: f64,
    /// Set when either operand has zero norm; `value` is then 0.
    pub degenerate: bool,
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<Cosine> {
    if a.len() != b.len() {
        return Err(Error::invalid_arg(format!("cosine_sim: lengths {} and {}", a.len(), b.len())));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("cosine_sim: non-finite operand".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Ok(Cosine {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cosine {
        value: dot / (na.max(NORM_FLOOR) * nb.max(NORM_FLOOR)),
        degenerate: false,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid_arg(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

fn check_pair<T: Scalar>(tape: &Tape<T>, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa.len() != 2 || sa != sb || sa[0] == 0 {
        return Err(Error::invalid_arg(format!("{op}: need equal non-empty [rows, D] inputs, got {sa:?} and {sb:?}")));
    }
    Ok((sa[0], sa[1]))
}

/// InfoNCE with per-sample negatives. `v_c`, `v_s`: `[B·M, D]`, sample-major;
/// row `i` of `v_c` is positive with row `i` of `v_s`. The result is the mean
/// over samples of the per-sample mean over anchors.
pub fn inner_instance_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v_c: Var,
    v_s: Var,
    batch: usize,
    tau: f64,
    symmetric: bool,
) -> Result<Var> {
    check_tau(tau)?;
    let (rows, d) = check_pair(tape, v_c, v_s, "inner_instance_loss")?;
    if batch == 0 || rows % batch != 0 {
        return Err(Error::invalid_arg(format!("inner_instance_loss: {rows} rows do not split into {batch} samples")));
    }
    let m = rows / batch;
    let nc = tape.l2_normalize(v_c);
    let ns = tape.l2_normalize(v_s);
    let nc = tape.reshape(nc, &[batch, m, d])?;
    let ns = tape.reshape(ns, &[batch, m, d])?;
    let targets: Vec<usize> = (0..rows).map(|i| i % m).collect();
    let term = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
        let sim = tape.matmul_t(a, b, false, true)?;
        let logits = tape.scale(sim, T::from_f64(1.0 / tau));
        let logits = tape.reshape(logits, &[rows, m])?;
        tape.cross_entropy(logits, &targets)
    };
    let forward = term(tape, nc, ns)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = term(tape, ns, nc)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, T::from_f64(0.5)))
}

/// InfoNCE over every masked patch of the batch: each anchor's denominator
/// runs over all `B·M` rows of `v_s`.
pub fn inter_instance_loss<T: Scalar>(tape: &mut Tape<T>, v_c: Var, v_s: Var, tau: f64, symmetric: bool) -> Result<Var> {
    check_tau(tau)?;
    let (rows, _) = check_pair(tape, v_c, v_s, "inter_instance_loss")?;
    let nc = tape.l2_normalize(v_c);
    let ns = tape.l2_normalize(v_s);
    let targets: Vec<usize> = (0..rows).collect();
    let term = |tape: &mut Tape<T>, a: Var, b: Var| -> Result<Var> {
        let sim = tape.matmul_t(a, b, false, true)?;
        let logits = tape.scale(sim, T::from_f64(1.0 / tau));
        tape.cross_entropy(logits, &targets)
    };
    let forward = term(tape, nc, ns)?;
    if !symmetric {
        return Ok(forward);
    }
    let backward = term(tape, ns, nc)?;
    let sum = tape.add(forward, backward)?;
    Ok(tape.scale(sum, T::from_f64(0.5)))
}

/// Negative mean cosine similarity between corresponding rows.
pub fn alignment_target_loss<T: Scalar>(tape: &mut Tape<T>, full: Var, branch: Var) -> Result<Var> {
    check_pair(tape, full, branch, "alignment_target_loss")?;
    let a = tape.l2_normalize(full);
    let b = tape.l2_normalize(branch);
    let prod = tape.mul(a, b)?;
    let cos = tape.reduce_sum(prod, 1)?;
    let mean = tape.mean_all(cos)?;
    Ok(tape.scale(mean, T::from_f64(-1.0)))
}
