//! Scalar objectives for standard training and for adversarial generation.
//!
//! Sign convention: the adversarial generator descends
//! `L_HAS = L_CLS − λ1·L_ROB + λ2·L_REL − λ3·L_DIV`, with
//! `L_DIV = Σ_k H(softmax(h_k)) − ‖h_k‖²`. Under descent the perturbation keeps
//! the label (lower cross-entropy), spreads the class posterior (higher
//! entropy), stays close to the clean features (lower drift) and flattens and
//! weakens every attention map (higher `L_DIV`).

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, ENTROPY_FLOOR};
use crate::error::{Error, Result};
use crate::model::{ForwardOutputs, ForwardVars};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Robustness (class-posterior entropy) weight.
    pub lambda1: f64,
    /// Reliability (feature drift) weight.
    pub lambda2: f64,
    /// Diversity (attention) weight.
    pub lambda3: f64,
}

impl LossWeights {
    pub const ZERO: LossWeights = LossWeights {
        lambda1: 0.0,
        lambda2: 0.0,
        lambda3: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.lambda3];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0, got {self:?}")));
        }
        Ok(())
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            lambda2: 10.0,
            lambda3: 1e-4,
        }
    }
}

fn one_hot(label: usize, n: usize) -> Result<Vec<f64>> {
    if label >= n {
        return Err(Error::Index {
            what: "class scores",
            index: label,
            len: n,
        });
    }
    let mut t = vec![0.0; n];
    t[label] = 1.0;
    Ok(t)
}

/// `−log softmax(scores)[label]`.
pub fn cls(tape: &mut Tape, scores: Var, label: usize) -> Result<Var> {
    let target = one_hot(label, tape.shape(scores)[0])?;
    tape.cross_entropy(scores, &target)
}

/// Cross-entropy against a label mixture given as `(class, weight)` pairs.
pub fn cls_mixture(tape: &mut Tape, scores: Var, mixture: &[(usize, f64)]) -> Result<Var> {
    let n = tape.shape(scores)[0];
    let mut target = vec![0.0; n];
    for &(c, w) in mixture {
        if c >= n {
            return Err(Error::Index {
                what: "class scores",
                index: c,
                len: n,
            });
        }
        target[c] += w;
    }
    tape.cross_entropy(scores, &target)
}

/// `‖attr_local − φ‖²`.
pub fn loc(tape: &mut Tape, attr_local: Var, phi: &[f64]) -> Result<Var> {
    let k = tape.shape(attr_local)[0];
    if phi.len() != k {
        return Err(Error::dim("loc_loss", &[k], &[phi.len()]));
    }
    let target = tape.constant(Tensor::from_vec(phi.to_vec()));
    let diff = tape.sub(attr_local, target)?;
    Ok(tape.sum_squares(diff))
}

/// Entropy of the class posterior.
pub fn rob(tape: &mut Tape, scores: Var) -> Result<Var> {
    let p = tape.softmax(scores)?;
    tape.entropy(p, ENTROPY_FLOOR)
}

/// `‖clean − adv‖²`; the clean anchor enters as a constant.
pub fn rel(tape: &mut Tape, clean_feat: &Tensor, adv_feat: Var) -> Result<Var> {
    if clean_feat.shape() != tape.shape(adv_feat) {
        return Err(Error::dim("rel_loss", clean_feat.shape(), tape.shape(adv_feat)));
    }
    let anchor = tape.constant(clean_feat.clone());
    let diff = tape.sub(adv_feat, anchor)?;
    Ok(tape.sum_squares(diff))
}

/// `Σ_k H(spatial_softmax(h)_k) − ‖h_k‖²`. Entropy uses the normalized maps,
/// the magnitude penalty the raw maps.
pub fn div(tape: &mut Tape, attn_maps: Var) -> Result<Var> {
    let p = tape.spatial_softmax(attn_maps)?;
    let h = tape.entropy(p, ENTROPY_FLOOR)?;
    let mag = tape.sum_squares(attn_maps);
    tape.sub(h, mag)
}

/// Alternative diversity term `Σ_k ‖h_k‖² + H(softmax(h_k))`, paired with ascent
/// for comparison runs.
pub fn div_magnitude_plus_entropy(tape: &mut Tape, attn_maps: Var) -> Result<Var> {
    let p = tape.spatial_softmax(attn_maps)?;
    let h = tape.entropy(p, ENTROPY_FLOOR)?;
    let mag = tape.sum_squares(attn_maps);
    tape.add(h, mag)
}

/// Which way the generator moves relative to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignConvention {
    /// Descend `L_HAS` with the entropy-minus-magnitude diversity term.
    #[default]
    Descent,
    /// Ascend `L_HAS` with [`div_magnitude_plus_entropy`] as the diversity term.
    Ascent,
}

/// Handles to each component and the weighted total.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveTerms {
    pub cls: Var,
    pub rob: Var,
    pub rel: Var,
    pub div: Var,
    pub total: Var,
}

/// `cls_weight·L_CLS − λ1·L_ROB + λ2·L_REL − λ3·L_DIV`. `cls_weight` is 1 in
/// normal use; setting it to 0 isolates the other terms.
pub fn has_objective_on_tape(
    tape: &mut Tape,
    fv: &ForwardVars,
    label: usize,
    clean_feat: &Tensor,
    w: &LossWeights,
    cls_weight: f64,
    signs: SignConvention,
) -> Result<ObjectiveTerms> {
    let c = cls(tape, fv.class_scores, label)?;
    let r = rob(tape, fv.class_scores)?;
    let d = rel(tape, clean_feat, fv.global_feat)?;
    let v = match signs {
        SignConvention::Descent => div(tape, fv.attn_maps)?,
        SignConvention::Ascent => div_magnitude_plus_entropy(tape, fv.attn_maps)?,
    };
    let a = tape.scale(c, cls_weight);
    let b = tape.scale(r, -w.lambda1);
    let e = tape.scale(d, w.lambda2);
    let f = tape.scale(v, -w.lambda3);
    let ab = tape.add(a, b)?;
    let ef = tape.add(e, f)?;
    let total = tape.add(ab, ef)?;
    Ok(ObjectiveTerms {
        cls: c,
        rob: r,
        rel: d,
        div: v,
        total,
    })
}

fn scalar_of(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).item())
}

pub fn cls_loss(outputs: &ForwardOutputs, label: usize) -> Result<f64> {
    scalar_of(|t| {
        let s = t.constant(outputs.class_scores.clone());
        cls(t, s, label)
    })
}

pub fn loc_loss(outputs: &ForwardOutputs, phi: &[f64]) -> Result<f64> {
    scalar_of(|t| {
        let a = t.constant(outputs.attr_local.clone());
        loc(t, a, phi)
    })
}

pub fn rob_loss(outputs: &ForwardOutputs) -> Result<f64> {
    scalar_of(|t| {
        let s = t.constant(outputs.class_scores.clone());
        rob(t, s)
    })
}

pub fn rel_loss(clean_feat: &Tensor, adv_feat: &Tensor) -> Result<f64> {
    scalar_of(|t| {
        let a = t.constant(adv_feat.clone());
        rel(t, clean_feat, a)
    })
}

pub fn div_loss(attn_maps: &Tensor) -> Result<f64> {
    scalar_of(|t| {
        let a = t.constant(attn_maps.clone());
        div(t, a)
    })
}

/// Reads back a full forward output set from raw tensors onto a tape, for
/// computing the objective on precomputed outputs.
fn record_outputs(tape: &mut Tape, o: &ForwardOutputs) -> ForwardVars {
    ForwardVars {
        featmaps: tape.constant(o.featmaps.clone()),
        global_feat: tape.constant(o.global_feat.clone()),
        attr_global: tape.constant(o.attr_global.clone()),
        attn_maps: tape.constant(o.attn_maps.clone()),
        attr_local: tape.constant(o.attr_local.clone()),
        class_scores: tape.constant(o.class_scores.clone()),
    }
}

pub fn has_objective(
    outputs_adv: &ForwardOutputs,
    label: usize,
    clean_feat: &Tensor,
    w: &LossWeights,
) -> Result<f64> {
    scalar_of(|t| {
        let fv = record_outputs(t, outputs_adv);
        Ok(has_objective_on_tape(t, &fv, label, clean_feat, w, 1.0, SignConvention::Descent)?.total)
    })
}
