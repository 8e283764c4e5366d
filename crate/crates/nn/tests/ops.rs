//! Finite-difference validation of every tape op, plus a couple of composed
//! network-shaped chains. Each test rebuilds the graph inside the eval closure
//! so perturbations flow through the exact forward path under test.

use dfdg_nn::gradcheck::check_grad;
use dfdg_nn::init;
use dfdg_nn::{Tape, TensorId};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn rng(seed: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha12Rng) -> ArrayD<f64> {
    init::normal(shape, 0.0, 1.0, r)
}

/// Reduce an arbitrary-shaped tensor to a scalar with fixed random weights so
/// the pullback seen by the op under test is non-uniform.
fn weighted_sum(t: &mut Tape, x: TensorId, w: &ArrayD<f64>) -> TensorId {
    let wc = t.constant(w.clone());
    let p = t.mul(x, wc);
    t.sum_all(p)
}

/// Check gradients of `build` w.r.t. each input in `inputs`.
fn check_inputs<F>(inputs: &[ArrayD<f64>], tol: f64, build: F)
where
    F: Fn(&mut Tape, &[TensorId]) -> TensorId,
{
    let mut t = Tape::new();
    let ids: Vec<TensorId> = inputs.iter().map(|x| t.leaf(x.clone(), true)).collect();
    let loss = build(&mut t, &ids);
    t.backward(loss);
    let grads: Vec<ArrayD<f64>> = ids.iter().map(|&id| t.grad_owned(id).unwrap()).collect();
    for (k, (input, grad)) in inputs.iter().zip(grads.iter()).enumerate() {
        let eval = |probe: &ArrayD<f64>| {
            let mut t = Tape::new();
            let ids: Vec<TensorId> = inputs
                .iter()
                .enumerate()
                .map(|(j, x)| {
                    let v = if j == k { probe.clone() } else { x.clone() };
                    t.leaf(v, false)
                })
                .collect();
            let l = build(&mut t, &ids);
            t.scalar_value(l)
        };
        let report = check_grad(eval, input, grad, 1e-5, tol)
            .unwrap_or_else(|e| panic!("input {k}: {e}"));
        assert!(report.checked > 0, "input {k}: gradient check compared nothing");
    }
}

#[test]
fn elementwise_binary_ops() {
    let mut r = rng(1);
    let a = randn(&[3, 4], &mut r);
    let b = randn(&[3, 4], &mut r);
    let w = randn(&[3, 4], &mut r);
    check_inputs(&[a.clone(), b.clone()], 1e-6, |t, ids| {
        let s = t.add(ids[0], ids[1]);
        weighted_sum(t, s, &w)
    });
    check_inputs(&[a.clone(), b.clone()], 1e-6, |t, ids| {
        let s = t.sub(ids[0], ids[1]);
        weighted_sum(t, s, &w)
    });
    check_inputs(&[a, b], 1e-6, |t, ids| {
        let s = t.mul(ids[0], ids[1]);
        weighted_sum(t, s, &w)
    });
}

#[test]
fn broadcast_ops() {
    let mut r = rng(2);
    let a = randn(&[2, 3, 4, 4], &mut r);
    let b = randn(&[3, 1, 1], &mut r);
    let w = randn(&[2, 3, 4, 4], &mut r);
    check_inputs(&[a.clone(), b.clone()], 1e-6, |t, ids| {
        let s = t.add_broadcast(ids[0], ids[1]);
        weighted_sum(t, s, &w)
    });
    check_inputs(&[a, b], 1e-6, |t, ids| {
        let s = t.mul_broadcast(ids[0], ids[1]);
        weighted_sum(t, s, &w)
    });
    // row-vector broadcast as used by embedding-merge paths
    let mut r = rng(3);
    let a = randn(&[5, 6], &mut r);
    let b = randn(&[6], &mut r);
    let w = randn(&[5, 6], &mut r);
    check_inputs(&[a, b], 1e-6, |t, ids| {
        let s = t.mul_broadcast(ids[0], ids[1]);
        weighted_sum(t, s, &w)
    });
}

#[test]
fn scalar_and_unary_ops() {
    let mut r = rng(4);
    let a = randn(&[4, 5], &mut r);
    let w = randn(&[4, 5], &mut r);
    check_inputs(&[a.clone()], 1e-6, |t, ids| {
        let s = t.scale(ids[0], -2.5);
        weighted_sum(t, s, &w)
    });
    check_inputs(&[a.clone()], 1e-6, |t, ids| {
        let s = t.add_scalar(ids[0], 0.7);
        weighted_sum(t, s, &w)
    });
    check_inputs(&[a.clone()], 1e-6, |t, ids| {
        let s = t.neg(ids[0]);
        weighted_sum(t, s, &w)
    });
    check_inputs(&[a.clone()], 1e-6, |t, ids| {
        let s = t.exp(ids[0]);
        weighted_sum(t, s, &w)
    });
    check_inputs(&[a], 1e-6, |t, ids| {
        let s = t.tanh(ids[0]);
        weighted_sum(t, s, &w)
    });
    // keep relu inputs away from the kink
    let base = randn(&[4, 5], &mut r);
    let a = base.mapv(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 });
    check_inputs(&[a], 1e-6, |t, ids| {
        let s = t.relu(ids[0]);
        weighted_sum(t, s, &w)
    });
}

#[test]
fn matmul_grads() {
    let mut r = rng(5);
    let a = randn(&[3, 4], &mut r);
    let b = randn(&[4, 5], &mut r);
    let w = randn(&[3, 5], &mut r);
    check_inputs(&[a, b], 1e-6, |t, ids| {
        let s = t.matmul(ids[0], ids[1]);
        weighted_sum(t, s, &w)
    });
}

#[test]
fn shape_and_index_ops() {
    let mut r = rng(6);
    let a = randn(&[2, 3, 4], &mut r);
    let w = randn(&[2, 12], &mut r);
    check_inputs(&[a], 1e-6, |t, ids| {
        let s = t.reshape(ids[0], &[2, 12]);
        weighted_sum(t, s, &w)
    });

    let a = randn(&[3, 4], &mut r);
    let b = randn(&[3, 2], &mut r);
    let w = randn(&[3, 6], &mut r);
    check_inputs(&[a, b], 1e-6, |t, ids| {
        let s = t.concat(ids[0], ids[1], 1);
        weighted_sum(t, s, &w)
    });

    let table = randn(&[5, 3], &mut r);
    let idx = vec![4usize, 0, 2, 2]; // repeated row exercises accumulation
    let w = randn(&[4, 3], &mut r);
    check_inputs(&[table], 1e-6, |t, ids| {
        let s = t.gather_rows(ids[0], &idx);
        weighted_sum(t, s, &w)
    });

    let x = randn(&[4, 6], &mut r);
    let classes = vec![1usize, 5, 0, 3];
    let w = randn(&[4], &mut r);
    check_inputs(&[x], 1e-6, |t, ids| {
        let s = t.select_class(ids[0], &classes);
        weighted_sum(t, s, &w)
    });
}

#[test]
fn reductions() {
    let mut r = rng(7);
    let a = randn(&[3, 4, 2], &mut r);
    check_inputs(&[a.clone()], 1e-6, |t, ids| t.sum_all(ids[0]));
    check_inputs(&[a.clone()], 1e-6, |t, ids| t.mean_all(ids[0]));
    let w = randn(&[3, 2], &mut r);
    check_inputs(&[a], 1e-6, |t, ids| {
        let s = t.sum_axis(ids[0], 1);
        weighted_sum(t, s, &w)
    });
}

#[test]
fn log_softmax_grads() {
    let mut r = rng(8);
    let x = randn(&[4, 7], &mut r).mapv(|v| v * 3.0); // spread logits
    let w = randn(&[4, 7], &mut r);
    check_inputs(&[x.clone()], 1e-6, |t, ids| {
        let s = t.log_softmax(ids[0]);
        weighted_sum(t, s, &w)
    });
    // cross-entropy composition: -mean(log p[y])
    let classes = vec![2usize, 0, 6, 3];
    check_inputs(&[x], 1e-6, |t, ids| {
        let lp = t.log_softmax(ids[0]);
        let picked = t.select_class(lp, &classes);
        let s = t.sum_all(picked);
        t.scale(s, -1.0 / 4.0)
    });
}

#[test]
fn conv2d_grads() {
    let mut r = rng(9);
    for &(stride, pad) in &[(1usize, 0usize), (2, 1), (1, 1)] {
        let x = randn(&[2, 3, 5, 5], &mut r);
        let wt = randn(&[4, 3, 3, 3], &mut r).mapv(|v| v * 0.3);
        let geom_out = {
            let oh = (5 + 2 * pad - 3) / stride + 1;
            [2, 4, oh, oh]
        };
        let w = randn(&geom_out, &mut r);
        check_inputs(&[x, wt], 1e-5, |t, ids| {
            let y = t.conv2d(ids[0], ids[1], stride, pad);
            weighted_sum(t, y, &w)
        });
    }
}

#[test]
fn conv2d_matches_direct_convolution() {
    // brute-force forward reference
    let mut r = rng(10);
    let x = randn(&[2, 2, 4, 4], &mut r);
    let wt = randn(&[3, 2, 3, 3], &mut r);
    let (stride, pad) = (1usize, 1usize);
    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let wi = t.constant(wt.clone());
    let y = t.conv2d(xi, wi, stride, pad);
    let yv = t.value_owned(y);
    for b in 0..2 {
        for co in 0..3 {
            for oh in 0..4 {
                for ow in 0..4 {
                    let mut acc = 0.0;
                    for ci in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let ih = (oh * stride + ki) as isize - pad as isize;
                                let iw = (ow * stride + kj) as isize - pad as isize;
                                if ih >= 0 && iw >= 0 && (ih as usize) < 4 && (iw as usize) < 4 {
                                    acc += x[[b, ci, ih as usize, iw as usize]]
                                        * wt[[co, ci, ki, kj]];
                                }
                            }
                        }
                    }
                    assert!((yv[[b, co, oh, ow]] - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_transpose2d_grads() {
    let mut r = rng(11);
    // stride-1 no-pad (first generator stage) and stride-2 pad-1 (upsampling stages)
    for &(hin, stride, pad, k) in &[(1usize, 1usize, 0usize, 4usize), (4, 2, 1, 4), (3, 1, 0, 3)] {
        let hout = (hin - 1) * stride + k - 2 * pad;
        let x = randn(&[2, 3, hin, hin], &mut r);
        let wt = randn(&[3, 4, k, k], &mut r).mapv(|v| v * 0.3);
        let w = randn(&[2, 4, hout, hout], &mut r);
        check_inputs(&[x, wt], 1e-5, |t, ids| {
            let y = t.conv_transpose2d(ids[0], ids[1], stride, pad);
            weighted_sum(t, y, &w)
        });
    }
}

#[test]
fn conv_transpose2d_matches_direct_form() {
    // reference: out[oh,ow] += x[ih,iw] * w[ki,kj] where oh = ih*s + ki - p
    let mut r = rng(12);
    let (s, p, k) = (2usize, 1usize, 4usize);
    let x = randn(&[1, 2, 4, 4], &mut r);
    let wt = randn(&[2, 3, k, k], &mut r);
    let hout = (4 - 1) * s + k - 2 * p;
    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let wi = t.constant(wt.clone());
    let y = t.conv_transpose2d(xi, wi, s, p);
    let yv = t.value_owned(y);
    assert_eq!(yv.shape(), &[1, 3, hout, hout]);
    let mut reference = ndarray::Array4::<f64>::zeros((1, 3, hout, hout));
    for ci in 0..2 {
        for co in 0..3 {
            for ih in 0..4 {
                for iw in 0..4 {
                    for ki in 0..k {
                        for kj in 0..k {
                            let oh = (ih * s + ki) as isize - p as isize;
                            let ow = (iw * s + kj) as isize - p as isize;
                            if oh >= 0 && ow >= 0 && (oh as usize) < hout && (ow as usize) < hout {
                                reference[[0, co, oh as usize, ow as usize]] +=
                                    x[[0, ci, ih, iw]] * wt[[ci, co, ki, kj]];
                            }
                        }
                    }
                }
            }
        }
    }
    for (a, b) in yv.iter().zip(reference.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_train_grads() {
    let mut r = rng(13);
    let x = randn(&[3, 2, 2, 2], &mut r);
    let gamma = randn(&[2], &mut r).mapv(|v| v * 0.2 + 1.0);
    let beta = randn(&[2], &mut r).mapv(|v| v * 0.2);
    let w = randn(&[3, 2, 2, 2], &mut r);
    check_inputs(&[x, gamma, beta], 1e-5, |t, ids| {
        let (y, _stats) = t.batch_norm_train(ids[0], ids[1], ids[2]);
        weighted_sum(t, y, &w)
    });
}

#[test]
fn batch_norm_train_stats_are_batch_moments() {
    let mut r = rng(14);
    let x = randn(&[4, 3, 2, 2], &mut r);
    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let g = t.constant(init::ones(&[3]));
    let b = t.constant(init::zeros(&[3]));
    let (_, stats) = t.batch_norm_train(xi, g, b);
    for ch in 0..3 {
        let vals: Vec<f64> = (0..4)
            .flat_map(|bb| (0..2).flat_map(move |i| (0..2).map(move |j| (bb, i, j))))
            .map(|(bb, i, j)| x[[bb, ch, i, j]])
            .collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
        assert!((stats.mean[ch] - m).abs() < 1e-12);
        assert!((stats.var[ch] - v).abs() < 1e-12);
    }
}

#[test]
fn batch_norm_eval_grads() {
    let mut r = rng(15);
    let x = randn(&[3, 2, 2, 2], &mut r);
    let gamma = randn(&[2], &mut r).mapv(|v| v * 0.2 + 1.0);
    let beta = randn(&[2], &mut r).mapv(|v| v * 0.2);
    let mean = Array1::from_vec(vec![0.1, -0.2]);
    let var = Array1::from_vec(vec![0.9, 1.3]);
    let w = randn(&[3, 2, 2, 2], &mut r);
    check_inputs(&[x, gamma, beta], 1e-6, |t, ids| {
        let y = t.batch_norm_eval(ids[0], ids[1], ids[2], &mean, &var);
        weighted_sum(t, y, &w)
    });
}

#[test]
fn max_pool2_grads() {
    let mut r = rng(16);
    let x = randn(&[2, 3, 4, 4], &mut r);
    let w = randn(&[2, 3, 2, 2], &mut r);
    check_inputs(&[x], 1e-6, |t, ids| {
        let y = t.max_pool2(ids[0]);
        weighted_sum(t, y, &w)
    });
}

#[test]
fn global_avg_pool_grads() {
    let mut r = rng(17);
    let x = randn(&[2, 3, 4, 4], &mut r);
    let w = randn(&[2, 3], &mut r);
    check_inputs(&[x], 1e-6, |t, ids| {
        let y = t.global_avg_pool(ids[0]);
        weighted_sum(t, y, &w)
    });
}

#[test]
fn pairwise_dist_grads() {
    let mut r = rng(18);
    // well-separated rows keep the sqrt away from zero
    let x = randn(&[4, 3], &mut r).mapv(|v| v * 2.0);
    let w = randn(&[4, 4], &mut r);
    check_inputs(&[x.clone()], 1e-5, |t, ids| {
        let d = t.pairwise_dist(ids[0]);
        weighted_sum(t, d, &w)
    });
    // symmetry and zero diagonal
    let mut t = Tape::new();
    let xi = t.constant(x);
    let d = t.pairwise_dist(xi);
    let dv = t.value_owned(d);
    for j in 0..4 {
        assert_eq!(dv[[j, j]], 0.0);
        for l in 0..4 {
            assert!((dv[[j, l]] - dv[[l, j]]).abs() < 1e-12);
        }
    }
}

#[test]
fn grad_accumulates_across_reuse() {
    // y = x*x + x  =>  dy/dx = 2x + 1
    let x = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.25, 2.0]).unwrap();
    let mut t = Tape::new();
    let xi = t.leaf(x.clone(), true);
    let sq = t.mul(xi, xi);
    let y = t.add(sq, xi);
    let loss = t.sum_all(y);
    t.backward(loss);
    let g = t.grad_owned(xi).unwrap();
    for i in 0..3 {
        assert!((g[[i]] - (2.0 * x[[i]] + 1.0)).abs() < 1e-12);
    }
}

#[test]
fn frozen_leaves_get_no_grad() {
    let mut r = rng(19);
    let a = randn(&[2, 2], &mut r);
    let b = randn(&[2, 2], &mut r);
    let mut t = Tape::new();
    let ia = t.leaf(a, true);
    let ib = t.leaf(b, false);
    let p = t.mul(ia, ib);
    let loss = t.sum_all(p);
    t.backward(loss);
    assert!(t.grad(ia).is_some());
    assert!(t.grad(ib).is_none());
}

#[test]
fn classifier_chain_grads() {
    // conv -> bn -> relu -> pool -> flatten -> linear -> log-softmax -> nll
    let mut r = rng(20);
    let x = randn(&[2, 1, 8, 8], &mut r);
    let conv_w = randn(&[4, 1, 3, 3], &mut r).mapv(|v| v * 0.4);
    let gamma = init::ones(&[4]);
    let beta = init::zeros(&[4]);
    let fc_w = randn(&[4 * 4 * 4, 3], &mut r).mapv(|v| v * 0.2);
    let fc_b = randn(&[3], &mut r).mapv(|v| v * 0.1);
    let labels = vec![2usize, 0];
    check_inputs(
        &[x, conv_w, gamma, beta, fc_w, fc_b],
        1e-4,
        |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1, 1);
            let (y, _) = t.batch_norm_train(y, ids[2], ids[3]);
            let y = t.relu(y);
            let y = t.max_pool2(y);
            let y = t.reshape(y, &[2, 4 * 4 * 4]);
            let y = t.matmul(y, ids[4]);
            let y = t.add_broadcast(y, ids[5]);
            let lp = t.log_softmax(y);
            let picked = t.select_class(lp, &labels);
            let s = t.sum_all(picked);
            t.scale(s, -0.5)
        },
    );
}

#[test]
fn generator_chain_grads() {
    // embed-merge -> convT -> bn -> relu -> convT -> tanh, reduced to a scalar
    let mut r = rng(21);
    let d = 6usize;
    let z = randn(&[2, d], &mut r);
    let embed = randn(&[3, d], &mut r).mapv(|v| v * 0.5);
    let w1 = randn(&[d, 5, 4, 4], &mut r).mapv(|v| v * 0.2);
    let gamma = init::ones(&[5]);
    let beta = init::zeros(&[5]);
    let w2 = randn(&[5, 1, 4, 4], &mut r).mapv(|v| v * 0.2);
    let labels = vec![1usize, 2];
    let w = randn(&[2, 1, 10, 10], &mut r);
    check_inputs(&[z, embed, w1, gamma, beta, w2], 1e-4, |t, ids| {
        let e = t.gather_rows(ids[1], &labels);
        let h = t.mul(ids[0], e);
        let h4 = t.reshape(h, &[2, d, 1, 1]);
        let y = t.conv_transpose2d(h4, ids[2], 1, 0); // 1 -> 4
        let (y, _) = t.batch_norm_train(y, ids[3], ids[4]);
        let y = t.relu(y);
        let y = t.conv_transpose2d(y, ids[5], 2, 0); // 4 -> 10
        let y = t.tanh(y);
        weighted_sum(t, y, &w)
    });
}

#[test]
fn reshape_after_concat_grads() {
    // concat can hand reshape a non-standard-layout value; both directions
    // must compact the layout instead of failing.
    let mut r = rng(22);
    let a = randn(&[2, 3], &mut r);
    let b = randn(&[2, 4], &mut r);
    let w = randn(&[2, 7, 1, 1], &mut r);
    check_inputs(&[a, b], 1e-4, |t, ids| {
        let c = t.concat(ids[0], ids[1], 1);
        let c4 = t.reshape(c, &[2, 7, 1, 1]);
        weighted_sum(t, c4, &w)
    });
}
