//! Local training. Every client starts from its slice of the shared global
//! initialization, runs plain minibatch SGD on its own shard for a fixed
//! number of epochs, and reports the trained weights together with the label
//! counts gathered while caching examples.

use std::collections::HashSet;

use dfdg_nn::Tape;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::data::DatasetHandle;
use crate::error::{DfdgError, Result};
use crate::models::{apply_bn_observations, forward_model, stage_params, ParameterSet};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientConfig {
    pub local_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

/// What a client hands back to the server: weights, its label counter
/// (`counts[y]` = number of distinct local examples with label `y`), and
/// summary numbers from the final epoch.
#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub params: ParameterSet,
    pub label_counts: Vec<u64>,
    pub final_local_accuracy: f64,
    pub final_loss: f64,
}

/// Train one client. `shuffle_seed` drives the per-epoch example order; the
/// label counter increments exactly once per distinct example, at the moment
/// the example is first cached, so after a full epoch it equals the shard's
/// label histogram regardless of epoch count.
pub fn client_update(
    client_id: usize,
    init: &ParameterSet,
    dataset: &DatasetHandle,
    indices: &[usize],
    cfg: &ClientConfig,
    shuffle_seed: u64,
) -> Result<ClientOutcome> {
    if indices.is_empty() {
        return Err(DfdgError::Config(format!("client {client_id} has an empty shard")));
    }
    if cfg.batch_size == 0 {
        return Err(DfdgError::Config("client batch_size must be positive".into()));
    }
    let mut params = init.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(shuffle_seed);
    let mut cached: HashSet<usize> = HashSet::new();
    let mut label_counts = vec![0u64; dataset.num_classes];
    let mut order: Vec<usize> = indices.to_vec();
    let mut final_loss = 0.0;

    for epoch in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            for &idx in chunk {
                if cached.insert(idx) {
                    label_counts[dataset.train_labels()[idx] as usize] += 1;
                }
            }
            let (x, y) = dataset.train_batch(chunk);
            let mut tape = Tape::new();
            let xi = tape.constant(x.into_dyn());
            let staged = stage_params(&mut tape, &params, true);
            let (logits, obs) = forward_model(&mut tape, &params, &staged, xi, true);
            let lp = tape.log_softmax(logits);
            let picked = tape.select_class(lp, &y);
            let mean_lp = tape.mean_all(picked);
            let loss = tape.neg(mean_lp);
            let loss_val = tape.scalar_value(loss);
            if !loss_val.is_finite() {
                return Err(DfdgError::Diverged(format!(
                    "client {client_id} diverged in epoch {epoch} (loss {loss_val})"
                )));
            }
            epoch_loss += loss_val * chunk.len() as f64;
            tape.backward(loss);
            apply_bn_observations(&mut params, &obs);
            for (name, &id) in &staged.ids {
                if let Some(grad) = tape.grad(id) {
                    let entry = params.entries.get_mut(name).expect("staged entry exists");
                    entry.zip_mut_with(&grad, |w, &g| *w -= cfg.learning_rate * g);
                }
            }
        }
        final_loss = epoch_loss / order.len() as f64;
    }
    // a zero-epoch run still caches nothing; count the shard so reported
    // counters always describe the data the client holds
    if cfg.local_epochs == 0 {
        for &idx in indices {
            if cached.insert(idx) {
                label_counts[dataset.train_labels()[idx] as usize] += 1;
            }
        }
    }

    let final_local_accuracy = evaluate_train_subset(&params, dataset, indices)?;
    Ok(ClientOutcome { params, label_counts, final_local_accuracy, final_loss })
}

const EVAL_CHUNK: usize = 256;

fn accuracy_over(
    ps: &ParameterSet,
    batches: impl Iterator<Item = (ndarray::Array4<f64>, Vec<usize>)>,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, y) in batches {
        let mut tape = Tape::new();
        let xi = tape.constant(x.into_dyn());
        let staged = stage_params(&mut tape, ps, false);
        let (logits, _) = forward_model(&mut tape, ps, &staged, xi, false);
        let vals = tape.value(logits);
        let classes = tape.shape(logits)[1];
        let flat = vals.as_slice().expect("logits contiguous");
        for (b, &label) in y.iter().enumerate() {
            if crate::losses::argmax(&flat[b * classes..(b + 1) * classes]) == label {
                correct += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(DfdgError::Config("accuracy over an empty example set".into()));
    }
    Ok(correct as f64 / total as f64)
}

/// Accuracy on a subset of the training split (eval-mode normalization).
pub fn evaluate_train_subset(ps: &ParameterSet, dataset: &DatasetHandle, indices: &[usize]) -> Result<f64> {
    accuracy_over(ps, indices.chunks(EVAL_CHUNK).map(|c| dataset.train_batch(c)))
}

/// Accuracy on the whole test split.
pub fn evaluate_test(ps: &ParameterSet, dataset: &DatasetHandle) -> Result<f64> {
    let all: Vec<usize> = (0..dataset.test_len()).collect();
    accuracy_over(ps, all.chunks(EVAL_CHUNK).map(|c| dataset.test_batch(c)))
}

/// Test accuracy of the uniform logit ensemble over a set of client models.
///
/// This is a diagnostic upper bound for distillation: the student is trained
/// to imitate (a weighted variant of) this ensemble, so its accuracy rarely
/// exceeds this number.
pub fn evaluate_ensemble(models: &[ParameterSet], dataset: &DatasetHandle) -> Result<f64> {
    if models.is_empty() {
        return Err(DfdgError::Config("ensemble evaluation needs at least one model".into()));
    }
    let all: Vec<usize> = (0..dataset.test_len()).collect();
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in all.chunks(EVAL_CHUNK) {
        let (x, y) = dataset.test_batch(chunk);
        let mut summed: Option<ndarray::ArrayD<f64>> = None;
        for ps in models {
            let mut tape = Tape::new();
            let xi = tape.constant(x.clone().into_dyn());
            let staged = stage_params(&mut tape, ps, false);
            let (logits, _) = forward_model(&mut tape, ps, &staged, xi, false);
            let vals = tape.value(logits).to_owned();
            summed = Some(match summed {
                Some(acc) => acc + &vals,
                None => vals,
            });
        }
        let vals = summed.expect("at least one model");
        let classes = vals.shape()[1];
        let flat = vals.as_slice().expect("logits contiguous");
        for (b, &label) in y.iter().enumerate() {
            if crate::losses::argmax(&flat[b * classes..(b + 1) * classes]) == label {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_toy;
    use crate::models::{build_model, ModelFamily, ModelSpec};

    fn toy_setup(n_train: usize) -> (DatasetHandle, ParameterSet, Vec<usize>) {
        let dataset = synth_toy().subset(Some(n_train), Some(100));
        let spec = ModelSpec::new(ModelFamily::Cnn4Bn { base_width: 4 }, 10, (1, 16, 16));
        let ps = build_model(&spec, 0).unwrap();
        let indices: Vec<usize> = (0..dataset.train_len()).collect();
        (dataset, ps, indices)
    }

    #[test]
    fn label_counts_equal_shard_histogram() {
        let (dataset, ps, indices) = toy_setup(64);
        let shard = &indices[..50];
        let cfg = ClientConfig { local_epochs: 3, learning_rate: 0.01, batch_size: 16 };
        let out = client_update(0, &ps, &dataset, shard, &cfg, 42).unwrap();
        let mut hist = vec![0u64; 10];
        for &i in shard {
            hist[dataset.train_labels()[i] as usize] += 1;
        }
        assert_eq!(out.label_counts, hist);
        assert_eq!(out.label_counts.iter().sum::<u64>(), 50);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_untouched() {
        let (dataset, ps, indices) = toy_setup(40);
        let cfg = ClientConfig { local_epochs: 2, learning_rate: 0.0, batch_size: 16 };
        let out = client_update(0, &ps, &dataset, &indices, &cfg, 7).unwrap();
        for (name, w) in &out.params.entries {
            if ParameterSet::is_trainable(name) {
                assert_eq!(w, &ps.entries[name], "{name} changed under lr = 0");
            }
        }
        // normalization statistics do move: training-mode passes observe batches
        assert_ne!(
            out.params.entries["block1.bn.running_mean"],
            ps.entries["block1.bn.running_mean"]
        );
    }

    #[test]
    fn same_seed_reproduces_the_outcome() {
        let (dataset, ps, indices) = toy_setup(48);
        let cfg = ClientConfig { local_epochs: 2, learning_rate: 0.05, batch_size: 16 };
        let a = client_update(0, &ps, &dataset, &indices, &cfg, 3).unwrap();
        let b = client_update(0, &ps, &dataset, &indices, &cfg, 3).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.final_local_accuracy, b.final_local_accuracy);
        let c = client_update(0, &ps, &dataset, &indices, &cfg, 4).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn toy_shard_is_learnable() {
        let (dataset, ps, indices) = toy_setup(200);
        let cfg = ClientConfig { local_epochs: 20, learning_rate: 0.1, batch_size: 32 };
        let out = client_update(0, &ps, &dataset, &indices, &cfg, 1).unwrap();
        assert!(
            out.final_local_accuracy >= 0.9,
            "local accuracy {} below 0.9 after {} epochs",
            out.final_local_accuracy,
            cfg.local_epochs
        );
        assert!(out.final_loss < 1.0, "final loss {} still high", out.final_loss);
    }
}
