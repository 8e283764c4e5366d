//! Server-side orchestration: one-shot aggregation of the uploaded client
//! models, adversarial training of the conditional generators against the
//! weighted teacher ensemble, and distillation of the global student on the
//! synthetic batches.
//!
//! The outer loop follows a strict order per iteration: one shared
//! noise/label batch is drawn; the first generator updates against the
//! second's pre-update samples; the second updates against the first's
//! already-updated samples; then the student takes its distillation steps.
//!
//! Distillation uses frozen batch-norm statistics: the student's running
//! estimates stay at their aggregated values and every server-side forward
//! pass normalizes with them. Only client training updates running
//! statistics, since only clients see real data.

use indexmap::IndexMap;
use ndarray::{Array1, Array2, ArrayD, Ix2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use dfdg_nn::Tape;

use crate::client::evaluate_test;
use crate::data::{DatasetHandle, LabelCounter};
use crate::error::{DfdgError, Result};
use crate::losses::{
    compute_weights, distillation_loss, ensemble_logits, gates_for_batch, generator_objective,
    BetaWeights, GateVariant, GenLossParts, KlOrder,
};
use crate::models::{
    build_generator, forward_generator, forward_model, stage_params, GeneratorSpec,
    GeneratorState, MergeOp, ParameterSet,
};
use crate::seeds;

// ---------------------------------------------------------------------------
// modes

/// Which one-shot pipeline to run. The baselines reuse the same machinery
/// with fewer generators and different transfer gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Dual generators, cross-divergence, miss-and-hit gate.
    Dfdg,
    /// Single generator, miss-and-hit gate, no cross term.
    Dfad,
    /// Single generator, disagreement gate.
    DenseStyle,
    /// Single generator, always-on gate.
    FedftgStyle,
    /// Aggregation only; no server-side training.
    FedavgOnly,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "dfdg" => Mode::Dfdg,
            "dfad" => Mode::Dfad,
            "dense_style" => Mode::DenseStyle,
            "fedftg_style" => Mode::FedftgStyle,
            "fedavg_only" => Mode::FedavgOnly,
            other => return Err(DfdgError::Config(format!("unknown mode `{other}`"))),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dfdg => "dfdg",
            Mode::Dfad => "dfad",
            Mode::DenseStyle => "dense_style",
            Mode::FedftgStyle => "fedftg_style",
            Mode::FedavgOnly => "fedavg_only",
        }
    }

    pub fn num_generators(self) -> usize {
        match self {
            Mode::Dfdg => 2,
            Mode::FedavgOnly => 0,
            _ => 1,
        }
    }

    /// Baseline modes pin their gate; the full method and the single-
    /// generator ablation honor the configured variant.
    pub fn effective_gate(self, configured: GateVariant) -> GateVariant {
        match self {
            Mode::Dfdg | Mode::Dfad => configured,
            Mode::DenseStyle => GateVariant::TriangleDown,
            Mode::FedftgStyle => GateVariant::TriangleUp,
            Mode::FedavgOnly => configured,
        }
    }
}

// ---------------------------------------------------------------------------
// aggregation

/// One-shot aggregation. A homogeneous federation (every client matches the
/// global architecture) averages everything elementwise, running statistics
/// included, and reports `averaged = true`. Any width heterogeneity keeps
/// the shared global initialization as the student start instead.
pub fn one_shot_aggregate(
    client_params: &[ParameterSet],
    global_init: &ParameterSet,
) -> Result<(ParameterSet, bool)> {
    if client_params.is_empty() {
        return Err(DfdgError::Config("no client models to aggregate".into()));
    }
    let homogeneous = client_params.iter().all(|p| p.arch == global_init.arch);
    if homogeneous {
        let refs: Vec<&ParameterSet> = client_params.iter().collect();
        Ok((ParameterSet::average(&refs)?, true))
    } else {
        Ok((global_init.clone(), false))
    }
}

// ---------------------------------------------------------------------------
// the generator optimizer

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdamBiasMode {
    /// Fixed bias-correction denominators `1 - b1` and `1 - b2` on every
    /// step, exactly as the update rule is stated.
    Literal,
    /// Conventional step-indexed denominators `1 - b1^t`, `1 - b2^t`.
    Standard,
}

/// Adam with moments zeroed at construction. One state is created per
/// generator update call, so moments never persist across outer iterations.
pub struct AdamState {
    m: IndexMap<String, ArrayD<f64>>,
    v: IndexMap<String, ArrayD<f64>>,
    t: u32,
    eta: f64,
    b1: f64,
    b2: f64,
    mode: AdamBiasMode,
}

const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ParameterSet, eta: f64, b1: f64, b2: f64, mode: AdamBiasMode) -> Self {
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for (name, a) in &params.entries {
            if ParameterSet::is_trainable(name) {
                m.insert(name.clone(), ArrayD::zeros(a.raw_dim()));
                v.insert(name.clone(), ArrayD::zeros(a.raw_dim()));
            }
        }
        AdamState { m, v, t: 0, eta, b1, b2, mode }
    }

    /// Apply one update from `grads` (keyed like the parameter entries).
    pub fn step(&mut self, params: &mut ParameterSet, grads: &IndexMap<String, ArrayD<f64>>) {
        self.t += 1;
        let (c1, c2) = match self.mode {
            AdamBiasMode::Literal => (1.0 - self.b1, 1.0 - self.b2),
            AdamBiasMode::Standard => {
                (1.0 - self.b1.powi(self.t as i32), 1.0 - self.b2.powi(self.t as i32))
            }
        };
        for (name, g) in grads {
            let m = self.m.get_mut(name).expect("moment entry");
            let v = self.v.get_mut(name).expect("moment entry");
            let w = params.entries.get_mut(name).expect("parameter entry");
            ndarray::Zip::from(w)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|w, m, v, &g| {
                    *m = self.b1 * *m + (1.0 - self.b1) * g;
                    *v = self.b2 * *v + (1.0 - self.b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *w -= self.eta * m_hat / (v_hat.sqrt() + ADAM_EPS);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// sampling

/// Draw a noise matrix `[batch, noise_dim]` of standard normals and labels
/// from the observed label distribution (inverse-CDF; labels first, then
/// noise, so the stream layout is stable).
pub fn sample_noise_labels(
    rng: &mut ChaCha12Rng,
    batch: usize,
    noise_dim: usize,
    label_probs: &Array1<f64>,
) -> (Array2<f64>, Vec<usize>) {
    let mut y = Vec::with_capacity(batch);
    for _ in 0..batch {
        let u: f64 = rng.gen();
        let mut cum = 0.0;
        let mut chosen = label_probs.len() - 1;
        for (c, &p) in label_probs.iter().enumerate() {
            cum += p;
            if u < cum {
                chosen = c;
                break;
            }
        }
        // guard against cumulative rounding leaving a zero-probability tail
        if label_probs[chosen] == 0.0 {
            chosen = (0..label_probs.len()).rev().find(|&c| label_probs[c] > 0.0).unwrap_or(0);
        }
        y.push(chosen);
    }
    let z = Array2::from_shape_fn((batch, noise_dim), |_| StandardNormal.sample(rng));
    (z, y)
}

// ---------------------------------------------------------------------------
// forward helpers

/// Teacher logits for a staged synthetic batch, on the tape (weights frozen,
/// input gradient flows). Teachers always run with their stored statistics.
fn teacher_logits_on_tape(
    tape: &mut Tape,
    teachers: &[ParameterSet],
    s: dfdg_nn::TensorId,
) -> Vec<dfdg_nn::TensorId> {
    teachers
        .iter()
        .map(|t| {
            let staged = stage_params(tape, t, false);
            let (logits, _) = forward_model(tape, t, &staged, s, false);
            logits
        })
        .collect()
}

/// Detached generator samples for a fixed noise/label batch.
pub fn generator_sample_values(gen: &GeneratorState, z: &Array2<f64>, y: &[usize]) -> ArrayD<f64> {
    let mut tape = Tape::new();
    let zi = tape.constant(z.clone().into_dyn());
    let staged = stage_params(&mut tape, &gen.params, false);
    let (s, _) = forward_generator(&mut tape, gen, &staged, zi, y);
    tape.value_owned(s)
}

/// Detached ensemble logits of the teachers on a fixed batch.
fn ensemble_values(
    teachers: &[ParameterSet],
    tau: &Array2<f64>,
    x: &ArrayD<f64>,
    y: &[usize],
) -> Result<Array2<f64>> {
    let mut tape = Tape::new();
    let xi = tape.constant(x.clone());
    let logits = teacher_logits_on_tape(&mut tape, teachers, xi);
    let ens = ensemble_logits(&mut tape, &logits, tau, y)?;
    Ok(tape.value_owned(ens).into_dimensionality::<Ix2>().expect("logits are 2-d"))
}

// ---------------------------------------------------------------------------
// generator update

struct GenUpdateCtx<'a> {
    teachers: &'a [ParameterSet],
    tau: &'a Array2<f64>,
    student: &'a ParameterSet,
    betas: BetaWeights,
    gate: GateVariant,
    inner_iters: usize,
    resample: bool,
    batch: usize,
    noise_dim: usize,
    label_probs: &'a Array1<f64>,
    outer_iter: usize,
    which: usize,
}

/// One call of the generator optimizer: fresh Adam moments, `inner_iters`
/// ascent/descent steps on the composite objective, optionally resampling
/// the noise/label batch between steps. Returns the last step's loss parts.
fn generator_update(
    gen: &mut GeneratorState,
    z0: &Array2<f64>,
    y0: &[usize],
    other_ens: Option<&Array2<f64>>,
    ctx: &GenUpdateCtx<'_>,
    eta: f64,
    b1: f64,
    b2: f64,
    bias_mode: AdamBiasMode,
    rng: &mut ChaCha12Rng,
) -> Result<GenLossParts> {
    let mut adam = AdamState::new(&gen.params, eta, b1, b2, bias_mode);
    let mut z = z0.clone();
    let mut y = y0.to_vec();
    let mut last_parts = GenLossParts { fid: 0.0, tran: 0.0, div: 0.0, cd: 0.0 };
    for inner in 0..ctx.inner_iters {
        if ctx.resample && inner > 0 {
            let (z_new, y_new) = sample_noise_labels(rng, ctx.batch, ctx.noise_dim, ctx.label_probs);
            z = z_new;
            y = y_new;
        }
        let mut tape = Tape::new();
        let zi = tape.constant(z.clone().into_dyn());
        let staged_gen = stage_params(&mut tape, &gen.params, true);
        let (s, h) = forward_generator(&mut tape, gen, &staged_gen, zi, &y);
        let teacher_ids = teacher_logits_on_tape(&mut tape, ctx.teachers, s);
        let ens = ensemble_logits(&mut tape, &teacher_ids, ctx.tau, &y)?;
        let staged_student = stage_params(&mut tape, ctx.student, false);
        let (student_logits, _) = forward_model(&mut tape, ctx.student, &staged_student, s, false);
        let student_vals = tape.value_owned(student_logits).into_dimensionality::<Ix2>().unwrap();
        let ens_vals = tape.value_owned(ens).into_dimensionality::<Ix2>().unwrap();
        let gates = gates_for_batch(ctx.gate, &student_vals.view(), &ens_vals.view(), &y);
        let other_const = other_ens.map(|o| tape.constant(o.clone().into_dyn()));
        let (loss, parts) = generator_objective(
            &mut tape,
            ens,
            student_logits,
            s,
            h,
            &y,
            &gates,
            other_const,
            &ctx.betas,
        );
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(DfdgError::Diverged(format!(
                "generator {} diverged at outer iteration {} inner step {inner} (loss {loss_val})",
                ctx.which, ctx.outer_iter
            )));
        }
        tape.backward(loss);
        let mut grads = IndexMap::new();
        for (name, &id) in &staged_gen.ids {
            if let Some(g) = tape.grad(id) {
                grads.insert(name.clone(), g.to_owned());
            }
        }
        adam.step(&mut gen.params, &grads);
        last_parts = parts;
    }
    Ok(last_parts)
}

// ---------------------------------------------------------------------------
// distillation update

struct DistillCtx<'a> {
    teachers: &'a [ParameterSet],
    tau: &'a Array2<f64>,
    eta: f64,
    inner_iters: usize,
    kl_order: KlOrder,
    resample: bool,
    batch: usize,
    noise_dim: usize,
    label_probs: &'a Array1<f64>,
    outer_iter: usize,
}

/// Distillation steps on the frozen generators' batches. With resampling off
/// (the default) the synthetic batches and their ensemble logits are fixed
/// across the inner steps, so they are computed once; regenerating them each
/// step would produce identical values.
fn distill_update(
    student: &mut ParameterSet,
    gens: &[GeneratorState],
    z0: &Array2<f64>,
    y0: &[usize],
    ctx: &DistillCtx<'_>,
    rng: &mut ChaCha12Rng,
) -> Result<f64> {
    let make_batches = |z: &Array2<f64>, y: &[usize]| -> Result<Vec<(ArrayD<f64>, Array2<f64>)>> {
        gens.iter()
            .map(|g| {
                let s = generator_sample_values(g, z, y);
                let ens = ensemble_values(ctx.teachers, ctx.tau, &s, y)?;
                Ok((s, ens))
            })
            .collect()
    };
    let mut batches = make_batches(z0, y0)?;
    let mut last_loss = 0.0;
    for inner in 0..ctx.inner_iters {
        if ctx.resample && inner > 0 {
            let (z, y) = sample_noise_labels(rng, ctx.batch, ctx.noise_dim, ctx.label_probs);
            batches = make_batches(&z, &y)?;
        }
        let mut tape = Tape::new();
        let staged = stage_params(&mut tape, student, true);
        let mut student_ids = Vec::new();
        let mut ens_ids = Vec::new();
        for (s, ens) in &batches {
            let si = tape.constant(s.clone());
            // Frozen-BN distillation: the student trains through the
            // aggregate's running statistics (eval-mode normalization)
            // instead of batch statistics. Synthetic batches, especially
            // from freshly initialized generators, have statistics far from
            // the real data; letting them into the running estimates
            // destroys the aggregate's test accuracy within a few outer
            // iterations even when the weights barely move.
            let (logits, _) = forward_model(&mut tape, student, &staged, si, false);
            student_ids.push(logits);
            ens_ids.push(tape.constant(ens.clone().into_dyn()));
        }
        let loss = distillation_loss(&mut tape, &student_ids, &ens_ids, ctx.kl_order);
        let loss_val = tape.scalar_value(loss);
        if !loss_val.is_finite() {
            return Err(DfdgError::Diverged(format!(
                "distillation diverged at outer iteration {} inner step {inner} (loss {loss_val})",
                ctx.outer_iter
            )));
        }
        tape.backward(loss);
        for (name, &id) in &staged.ids {
            if let Some(g) = tape.grad(id) {
                let entry = student.entries.get_mut(name).expect("staged entry exists");
                entry.zip_mut_with(&g, |w, &gv| *w -= ctx.eta * gv);
            }
        }
        last_loss = loss_val;
    }
    Ok(last_loss)
}

// ---------------------------------------------------------------------------
// the outer loop

#[derive(Debug, Clone, PartialEq)]
pub struct ServerRunConfig {
    pub mode: Mode,
    pub outer_iters: usize,
    pub gen_inner_iters: usize,
    pub distill_inner_iters: usize,
    pub eta_g: f64,
    pub adam_b1: f64,
    pub adam_b2: f64,
    pub eta_d: f64,
    pub batch_size: usize,
    pub betas: BetaWeights,
    pub gate: GateVariant,
    pub eval_every: usize,
    pub adam_bias_mode: AdamBiasMode,
    pub resample_per_inner_step: bool,
    pub kl_order: KlOrder,
    pub noise_dim: usize,
    pub merge: MergeOp,
    pub gen_base_width: usize,
}

/// One measured point of the server loop. `outer_iter` is 1-based; iteration
/// 0 is the aggregation-only snapshot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub outer_iter: usize,
    pub test_accuracy: f64,
    pub distill_loss: f64,
    pub gen_parts: Vec<GenLossParts>,
}

pub struct ServerRunResult {
    pub student: ParameterSet,
    pub generators: Vec<GeneratorState>,
    pub eval_points: Vec<EvalPoint>,
    pub best_accuracy: f64,
    pub averaged: bool,
}

pub fn run_server(
    dataset: &DatasetHandle,
    client_params: &[ParameterSet],
    counter: &LabelCounter,
    global_init: &ParameterSet,
    cfg: &ServerRunConfig,
    server_seed: u64,
) -> Result<ServerRunResult> {
    let (mut student, averaged) = one_shot_aggregate(client_params, global_init)?;
    let weights = compute_weights(counter)?;
    let gate = cfg.mode.effective_gate(cfg.gate);
    let num_gens = cfg.mode.num_generators();

    let mut eval_points = Vec::new();
    let initial_acc = evaluate_test(&student, dataset)?;
    eval_points.push(EvalPoint {
        outer_iter: 0,
        test_accuracy: initial_acc,
        distill_loss: 0.0,
        gen_parts: Vec::new(),
    });
    let mut best_accuracy = initial_acc;

    if num_gens == 0 || cfg.outer_iters == 0 {
        return Ok(ServerRunResult {
            student,
            generators: Vec::new(),
            eval_points,
            best_accuracy,
            averaged,
        });
    }

    let gen_spec = GeneratorSpec {
        image_shape: dataset.image_shape,
        num_classes: dataset.num_classes,
        noise_dim: cfg.noise_dim,
        merge: cfg.merge,
        base_width: cfg.gen_base_width,
    };
    let mut gens: Vec<GeneratorState> = (0..num_gens)
        .map(|k| build_generator(&gen_spec, server_seed + k as u64))
        .collect::<Result<_>>()?;
    let mut rng = seeds::rng_from(server_seed, "server-sampling", 0);
    let teachers = client_params;

    for outer in 1..=cfg.outer_iters {
        let (z, y) = sample_noise_labels(&mut rng, cfg.batch_size, cfg.noise_dim, &weights.label_probs);
        let mut gen_parts = Vec::with_capacity(num_gens);
        for k in 0..num_gens {
            // the sibling's ensemble logits: generator 0 sees the other's
            // pre-update batch, generator 1 sees the freshly updated one
            let other_ens = if num_gens == 2 {
                let other = &gens[1 - k];
                let s_other = generator_sample_values(other, &z, &y);
                Some(ensemble_values(teachers, &weights.tau, &s_other, &y)?)
            } else {
                None
            };
            let ctx = GenUpdateCtx {
                teachers,
                tau: &weights.tau,
                student: &student,
                betas: cfg.betas,
                gate,
                inner_iters: cfg.gen_inner_iters,
                resample: cfg.resample_per_inner_step,
                batch: cfg.batch_size,
                noise_dim: cfg.noise_dim,
                label_probs: &weights.label_probs,
                outer_iter: outer,
                which: k,
            };
            let parts = generator_update(
                &mut gens[k],
                &z,
                &y,
                other_ens.as_ref(),
                &ctx,
                cfg.eta_g,
                cfg.adam_b1,
                cfg.adam_b2,
                cfg.adam_bias_mode,
                &mut rng,
            )?;
            gen_parts.push(parts);
        }
        let distill_ctx = DistillCtx {
            teachers,
            tau: &weights.tau,
            eta: cfg.eta_d,
            inner_iters: cfg.distill_inner_iters,
            kl_order: cfg.kl_order,
            resample: cfg.resample_per_inner_step,
            batch: cfg.batch_size,
            noise_dim: cfg.noise_dim,
            label_probs: &weights.label_probs,
            outer_iter: outer,
        };
        let distill_loss = distill_update(&mut student, &gens, &z, &y, &distill_ctx, &mut rng)?;

        let is_eval = outer % cfg.eval_every == 0 || outer == cfg.outer_iters;
        if is_eval {
            let acc = evaluate_test(&student, dataset)?;
            best_accuracy = best_accuracy.max(acc);
            eval_points.push(EvalPoint { outer_iter: outer, test_accuracy: acc, distill_loss, gen_parts });
        }
    }

    Ok(ServerRunResult { student, generators: gens, eval_points, best_accuracy, averaged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_toy;
    use crate::models::{build_model, ModelFamily, ModelSpec};
    use rand::SeedableRng;

    #[test]
    fn literal_adam_first_step_is_signed_learning_rate() {
        let spec = ModelSpec::new(ModelFamily::Mlp2 { hidden: 3 }, 2, (1, 16, 16));
        let mut ps = build_model(&spec, 0).unwrap();
        let before = ps.clone();
        let eta = 2e-4;
        let mut adam = AdamState::new(&ps, eta, 0.5, 0.999, AdamBiasMode::Literal);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut grads = IndexMap::new();
        for (name, a) in &ps.entries {
            if ParameterSet::is_trainable(name) {
                // magnitudes well above the stabilizer so sign(g) is the
                // whole story
                let g = ArrayD::from_shape_fn(a.raw_dim(), |_| {
                    let mag: f64 = rng.gen_range(0.1..2.0);
                    if rng.gen::<bool>() {
                        mag
                    } else {
                        -mag
                    }
                });
                grads.insert(name.clone(), g);
            }
        }
        adam.step(&mut ps, &grads);
        for (name, g) in &grads {
            let w0 = &before.entries[name];
            let w1 = &ps.entries[name];
            for ((a, b), gv) in w0.iter().zip(w1.iter()).zip(g.iter()) {
                let expected = a - eta * gv.signum();
                assert!(
                    (b - expected).abs() < 1e-7,
                    "{name}: step {} vs expected {}",
                    b - a,
                    expected - a
                );
            }
        }
    }

    #[test]
    fn literal_and_standard_bias_modes_differ_after_first_step() {
        let spec = ModelSpec::new(ModelFamily::Mlp2 { hidden: 2 }, 2, (1, 16, 16));
        let run = |mode: AdamBiasMode| {
            let mut ps = build_model(&spec, 0).unwrap();
            let mut adam = AdamState::new(&ps, 0.01, 0.5, 0.999, mode);
            let grads: IndexMap<String, ArrayD<f64>> = ps
                .entries
                .iter()
                .filter(|(n, _)| ParameterSet::is_trainable(n))
                .map(|(n, a)| (n.clone(), ArrayD::from_elem(a.raw_dim(), 0.7)))
                .collect();
            adam.step(&mut ps, &grads);
            let after_one = ps.entries["fc1.w"].clone();
            adam.step(&mut ps, &grads);
            (after_one, ps.entries["fc1.w"].clone())
        };
        let (lit1, lit2) = run(AdamBiasMode::Literal);
        let (std1, std2) = run(AdamBiasMode::Standard);
        // identical on the first step (1 - b^1 = 1 - b), different afterward
        assert_eq!(lit1, std1);
        assert_ne!(lit2, std2);
    }

    #[test]
    fn noise_label_sampling_respects_the_distribution() {
        let probs = Array1::from_vec(vec![0.5, 0.0, 0.3, 0.2]);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let (z, y) = sample_noise_labels(&mut rng, 10_000, 4, &probs);
        assert_eq!(z.dim(), (10_000, 4));
        let mut freq = [0usize; 4];
        for &label in &y {
            freq[label] += 1;
        }
        assert_eq!(freq[1], 0, "zero-probability class was sampled");
        for (c, &p) in probs.iter().enumerate() {
            let observed = freq[c] as f64 / 10_000.0;
            assert!(
                (observed - p).abs() < 0.02,
                "class {c}: observed {observed}, expected {p}"
            );
        }
        // same seed, same draw
        let mut rng2 = ChaCha12Rng::seed_from_u64(5);
        let (z2, y2) = sample_noise_labels(&mut rng2, 10_000, 4, &probs);
        assert_eq!(z, z2);
        assert_eq!(y, y2);
    }

    #[test]
    fn aggregate_averages_homogeneous_and_keeps_init_otherwise() {
        let spec = ModelSpec::new(ModelFamily::Cnn4Bn { base_width: 4 }, 10, (1, 16, 16));
        let init = build_model(&spec, 0).unwrap();
        let a = build_model(&spec, 1).unwrap();
        let b = build_model(&spec, 2).unwrap();
        let (avg, averaged) = one_shot_aggregate(&[a.clone(), b.clone()], &init).unwrap();
        assert!(averaged);
        assert_eq!(avg, ParameterSet::average(&[&a, &b]).unwrap());

        let narrow_spec = crate::models::extract_submodel(&spec, 0.5).unwrap();
        let narrow = build_model(&narrow_spec, 3).unwrap();
        let (kept, averaged) = one_shot_aggregate(&[a, narrow], &init).unwrap();
        assert!(!averaged);
        assert_eq!(kept, init);
    }

    fn tiny_run(mode: Mode, seed: u64) -> ServerRunResult {
        let dataset = synth_toy().subset(Some(120), Some(60));
        let spec = ModelSpec::new(ModelFamily::Cnn4Bn { base_width: 4 }, 10, (1, 16, 16));
        let init = build_model(&spec, 0).unwrap();
        let partition =
            crate::data::dirichlet_partition(&dataset, 2, 0.5, seeds::derive_seed(seed, "partition", 0))
                .unwrap();
        let client_cfg = crate::client::ClientConfig {
            local_epochs: 2,
            learning_rate: 0.05,
            batch_size: 16,
        };
        let mut params = Vec::new();
        let mut counter = LabelCounter::zeros(2, 10);
        for (i, shard) in partition.client_indices.iter().enumerate() {
            let out = crate::client::client_update(
                i,
                &init,
                &dataset,
                shard,
                &client_cfg,
                seeds::derive_seed(seed, "client", i as u64),
            )
            .unwrap();
            counter.counts[i] = out.label_counts;
            params.push(out.params);
        }
        let cfg = ServerRunConfig {
            mode,
            outer_iters: 3,
            gen_inner_iters: 2,
            distill_inner_iters: 1,
            eta_g: 2e-4,
            adam_b1: 0.5,
            adam_b2: 0.999,
            eta_d: 0.01,
            batch_size: 8,
            betas: BetaWeights { tran: 1.0, div: 1.0, cd: 1.0 },
            gate: GateVariant::Diamond,
            eval_every: 2,
            adam_bias_mode: AdamBiasMode::Literal,
            resample_per_inner_step: false,
            kl_order: KlOrder::AsWritten,
            noise_dim: 16,
            merge: MergeOp::Mul,
            gen_base_width: 8,
        };
        run_server(&dataset, &params, &counter, &init, &cfg, seeds::derive_seed(seed, "server", 0))
            .unwrap()
    }

    #[test]
    fn server_loop_runs_each_mode_deterministically() {
        let dual = tiny_run(Mode::Dfdg, 9);
        assert_eq!(dual.generators.len(), 2);
        assert!(dual.averaged);
        // outer 0 snapshot + iterations 2 and 3 (eval_every = 2 plus final)
        let iters: Vec<usize> = dual.eval_points.iter().map(|p| p.outer_iter).collect();
        assert_eq!(iters, vec![0, 2, 3]);
        assert_eq!(dual.eval_points[1].gen_parts.len(), 2);
        assert!(dual.eval_points[1].gen_parts[0].cd != 0.0, "dual mode exercises the cross term");

        let single = tiny_run(Mode::DenseStyle, 9);
        assert_eq!(single.generators.len(), 1);
        assert_eq!(single.eval_points[1].gen_parts.len(), 1);
        assert_eq!(single.eval_points[1].gen_parts[0].cd, 0.0);

        let agg = tiny_run(Mode::FedavgOnly, 9);
        assert!(agg.generators.is_empty());
        assert_eq!(agg.eval_points.len(), 1);

        // bitwise determinism of the whole pipeline
        let again = tiny_run(Mode::Dfdg, 9);
        assert_eq!(dual.student, again.student);
        assert_eq!(dual.eval_points, again.eval_points);
    }
}
