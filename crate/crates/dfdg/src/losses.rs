//! Distillation losses and label-weighting tables.
//!
//! Everything here follows two conventions. First, per-sample quantities are
//! aggregated with batch means. Second, Kullback-Leibler divergence between
//! logit tensors is always `KL(softmax(first) || softmax(second))` in the
//! written argument order; callers choose which side is which.
//!
//! Gradient-flow boundaries are the caller's responsibility and follow one
//! rule: network *weights* are frozen via non-trainable staging, while input
//! gradients always flow. A frozen teacher therefore still transports
//! gradient from its logits back into the synthetic images that produced
//! them.

use dfdg_nn::{Tape, TensorId};
use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};

use crate::data::LabelCounter;
use crate::error::{DfdgError, Result};

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// weighting tables

/// Label-conditional client weights and the marginal label distribution,
/// derived from the uploaded label counters.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightingTables {
    /// `tau[(i, y)] = n_i^y / n^y`: client i's share of class y.
    pub tau: Array2<f64>,
    /// `p(y) = n^y / n`: sampling distribution for synthetic labels.
    pub label_probs: Array1<f64>,
}

pub fn compute_weights(counter: &LabelCounter) -> Result<WeightingTables> {
    let (clients, classes) = (counter.num_clients(), counter.num_classes());
    let mut tau = Array2::zeros((clients, classes));
    let mut label_probs = Array1::zeros(classes);
    let mut total = 0u64;
    for y in 0..classes {
        let class_total = counter.class_total(y);
        total += class_total;
        if class_total == 0 {
            continue; // unseen class: zero column, zero probability
        }
        label_probs[y] = class_total as f64;
        for i in 0..clients {
            tau[(i, y)] = counter.counts[i][y] as f64 / class_total as f64;
        }
    }
    if total == 0 {
        return Err(DfdgError::Weighting("all label counters are zero".into()));
    }
    label_probs /= total as f64;
    Ok(WeightingTables { tau, label_probs })
}

// ---------------------------------------------------------------------------
// ensembles

/// Label-weighted ensemble of teacher logits:
/// `ens[b, :] = sum_i tau[(i, y_b)] * logits_i[b, :]`.
///
/// Errors if some requested label has no holder (its tau column is zero);
/// sampling only from the observed label distribution prevents this.
pub fn ensemble_logits(
    tape: &mut Tape,
    teacher_logits: &[TensorId],
    tau: &Array2<f64>,
    y: &[usize],
) -> Result<TensorId> {
    assert_eq!(teacher_logits.len(), tau.nrows(), "one logit tensor per client");
    for &label in y {
        if label >= tau.ncols() {
            return Err(DfdgError::Weighting(format!("label {label} outside the tau table")));
        }
        let col_sum: f64 = (0..tau.nrows()).map(|i| tau[(i, label)]).sum();
        if col_sum < 1e-12 {
            return Err(DfdgError::Weighting(format!("no client holds examples of class {label}")));
        }
    }
    let mut acc: Option<TensorId> = None;
    for (i, &logits) in teacher_logits.iter().enumerate() {
        let weights: Vec<f64> = y.iter().map(|&label| tau[(i, label)]).collect();
        let w = tape.constant(ArrayD::from_shape_vec(IxDyn(&[y.len(), 1]), weights).unwrap());
        let term = tape.mul_broadcast(logits, w);
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    Ok(acc.expect("at least one teacher"))
}

// ---------------------------------------------------------------------------
// divergences

/// Per-sample `KL(softmax(p) || softmax(q))`, shape `[B]`.
pub fn kl_rows(tape: &mut Tape, p_logits: TensorId, q_logits: TensorId) -> TensorId {
    let lp = tape.log_softmax(p_logits);
    let lq = tape.log_softmax(q_logits);
    let p = tape.exp(lp);
    let diff = tape.sub(lp, lq);
    let terms = tape.mul(p, diff);
    tape.sum_axis(terms, 1)
}

/// Batch-mean `KL(softmax(p) || softmax(q))`.
pub fn kl_mean(tape: &mut Tape, p_logits: TensorId, q_logits: TensorId) -> TensorId {
    let rows = kl_rows(tape, p_logits, q_logits);
    tape.mean_all(rows)
}

// ---------------------------------------------------------------------------
// generator losses

/// Cross-entropy of the ensemble prediction against the conditioning labels
/// (batch mean).
pub fn fidelity_loss(tape: &mut Tape, ens_logits: TensorId, y: &[usize]) -> TensorId {
    let lp = tape.log_softmax(ens_logits);
    let picked = tape.select_class(lp, y);
    let mean = tape.mean_all(picked);
    tape.neg(mean)
}

/// Which samples the transferability term is active for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    /// Active when the student misclassifies a sample the ensemble gets
    /// right: the full method's gate.
    Diamond,
    /// Always active.
    TriangleUp,
    /// Active whenever student and ensemble disagree.
    TriangleDown,
}

/// Evaluate one gate from hard predictions.
pub fn transfer_gate(
    variant: GateVariant,
    student_argmax: usize,
    ensemble_argmax: usize,
    label: usize,
) -> f64 {
    let active = match variant {
        GateVariant::Diamond => student_argmax != label && ensemble_argmax == label,
        GateVariant::TriangleUp => true,
        GateVariant::TriangleDown => student_argmax != ensemble_argmax,
    };
    if active {
        1.0
    } else {
        0.0
    }
}

/// Per-sample gates from detached logit values (no gradient flows through
/// the gating decision).
pub fn gates_for_batch(
    variant: GateVariant,
    student_logits: &ArrayView2<f64>,
    ensemble_logits: &ArrayView2<f64>,
    y: &[usize],
) -> Vec<f64> {
    y.iter()
        .enumerate()
        .map(|(b, &label)| {
            let s = argmax(student_logits.row(b).as_slice().expect("contiguous row"));
            let e = argmax(ensemble_logits.row(b).as_slice().expect("contiguous row"));
            transfer_gate(variant, s, e, label)
        })
        .collect()
}

/// Negated, gated ensemble-to-student divergence (batch mean):
/// `-mean_b gate_b * KL(ens_b || student_b)`. Minimizing it pushes the
/// generator toward samples the student has not yet learned.
pub fn transferability_loss(
    tape: &mut Tape,
    ens_logits: TensorId,
    student_logits: TensorId,
    gates: &[f64],
) -> TensorId {
    let rows = kl_rows(tape, ens_logits, student_logits);
    let g = tape.constant(ArrayD::from_shape_vec(IxDyn(&[gates.len()]), gates.to_vec()).unwrap());
    let gated = tape.mul(rows, g);
    let mean = tape.mean_all(gated);
    tape.neg(mean)
}

/// Similarity penalty `exp(-sum_{j,l} ||s_j - s_l|| * ||h_j - h_l|| / B^2)`
/// over all ordered pairs including the diagonal. Identical batches score
/// `exp(0) = 1`; spread in both image and input space drives it toward 0.
pub fn diversity_loss(tape: &mut Tape, s: TensorId, h: TensorId) -> TensorId {
    let shape = tape.shape(s).to_vec();
    let b = shape[0];
    let flat_dim: usize = shape[1..].iter().product();
    let s_flat = tape.reshape(s, &[b, flat_dim]);
    let ds = tape.pairwise_dist(s_flat);
    let dh = tape.pairwise_dist(h);
    let prod = tape.mul(ds, dh);
    let total = tape.sum_all(prod);
    let scaled = tape.scale(total, -1.0 / (b * b) as f64);
    tape.exp(scaled)
}

/// Negated divergence between this generator's ensemble outputs and the
/// sibling generator's (`-mean_b KL(own_b || other_b)`). The sibling's
/// logits enter as constants, so only the owning generator feels the push
/// apart.
pub fn cross_divergence_loss(
    tape: &mut Tape,
    ens_own: TensorId,
    ens_other_const: TensorId,
) -> TensorId {
    let mean = kl_mean(tape, ens_own, ens_other_const);
    tape.neg(mean)
}

/// Composite generator objective weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaWeights {
    pub tran: f64,
    pub div: f64,
    pub cd: f64,
}

/// Detached per-term values for logging.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenLossParts {
    pub fid: f64,
    pub tran: f64,
    pub div: f64,
    pub cd: f64,
}

/// `L = L_fid + beta_tran * L_tran + beta_div * L_div + beta_cd * L_cd`.
/// `ens_other_const` is absent for single-generator modes, dropping the
/// cross-divergence term entirely.
#[allow(clippy::too_many_arguments)]
pub fn generator_objective(
    tape: &mut Tape,
    ens_logits: TensorId,
    student_logits: TensorId,
    s: TensorId,
    h: TensorId,
    y: &[usize],
    gates: &[f64],
    ens_other_const: Option<TensorId>,
    betas: &BetaWeights,
) -> (TensorId, GenLossParts) {
    let fid = fidelity_loss(tape, ens_logits, y);
    let tran = transferability_loss(tape, ens_logits, student_logits, gates);
    let div = diversity_loss(tape, s, h);
    let mut loss = fid;
    let tran_scaled = tape.scale(tran, betas.tran);
    loss = tape.add(loss, tran_scaled);
    let div_scaled = tape.scale(div, betas.div);
    loss = tape.add(loss, div_scaled);
    let cd_value = match ens_other_const {
        Some(other) => {
            let cd = cross_divergence_loss(tape, ens_logits, other);
            let cd_scaled = tape.scale(cd, betas.cd);
            loss = tape.add(loss, cd_scaled);
            tape.scalar_value(cd)
        }
        None => 0.0,
    };
    let parts = GenLossParts {
        fid: tape.scalar_value(fid),
        tran: tape.scalar_value(tran),
        div: tape.scalar_value(div),
        cd: cd_value,
    };
    (loss, parts)
}

// ---------------------------------------------------------------------------
// distillation loss

/// Direction of the distillation divergence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlOrder {
    /// `KL(student || ensemble)`.
    AsWritten,
    /// `KL(ensemble || student)`: the conventional distillation direction.
    TeacherFirst,
}

/// Dual-model distillation objective: the summed batch-mean divergence
/// between student and ensemble predictions on each generator's batch. The
/// ensemble logits are constants; only the student learns here.
pub fn distillation_loss(
    tape: &mut Tape,
    student_logits: &[TensorId],
    ensemble_logits_const: &[TensorId],
    order: KlOrder,
) -> TensorId {
    assert_eq!(student_logits.len(), ensemble_logits_const.len());
    let mut acc: Option<TensorId> = None;
    for (&s, &e) in student_logits.iter().zip(ensemble_logits_const.iter()) {
        let term = match order {
            KlOrder::AsWritten => kl_mean(tape, s, e),
            KlOrder::TeacherFirst => kl_mean(tape, e, s),
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term),
            None => term,
        });
    }
    acc.expect("at least one generator batch")
}
