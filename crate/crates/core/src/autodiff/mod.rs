//! Minimal reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation as it is evaluated; `backward` then walks
//! the tape in reverse. Only the operations the network needs are provided:
//! matmul, per-channel bias/scale, ReLU, axis reductions (max with argmax
//! routing, sum, mean), column concat, row gather, softmax, log, elementwise
//! product, and batch standardization.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var};
pub use params::{AdamConfig, Bindings, ParameterStore};
pub use tensor::Tensor;


use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch normalization over the rows of a `(points × channels)` tensor, followed
/// by the learnable per-channel `gamma`/`beta`.
///
/// In training mode the batch statistics normalize the input and the returned
/// stats are the updated running averages (`momentum · old + (1 − momentum) · batch`).
/// In eval mode the running stats are used and `None` is returned.
pub fn batch_norm(
    g: &mut Graph,
    x: Var,
    gamma: Var,
    beta: Var,
    running: &RunningStats,
    mode: Mode,
    momentum: f64,
) -> Result<(Var, Option<RunningStats>)> {
    let c = g.value(x).cols();
    if running.mean.len() != c || running.var.len() != c || g.value(gamma).len() != c {
        return Err(Error::ShapeMismatch {
            op: "batch_norm",
            lhs: g.value(x).shape().to_vec(),
            rhs: vec![running.mean.len()],
        });
    }
    let (normed, update) = match mode {
        Mode::Train => {
            let (n, mean, var) = g.batch_standardize(x, BN_EPS)?;
            let blend = |old: &[f64], new: &[f64]| -> Vec<f64> {
                old.iter().zip(new).map(|(o, n)| momentum * o + (1.0 - momentum) * n).collect()
            };
            let stats = RunningStats {
                mean: blend(&running.mean, &mean),
                var: blend(&running.var, &var),
            };
            (n, Some(stats))
        }
        Mode::Eval => {
            let scale: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
            let shift: Vec<f64> = running.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            (g.channel_affine(x, &scale, &shift)?, None)
        }
    };
    let scaled = g.mul_channel(normed, gamma)?;
    Ok((g.add_bias(scaled, beta)?, update))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` with respect to every input, compared by
    /// relative vector norm against the tape gradient.
    fn check_grads(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var, tol: f64) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.backward(out).unwrap();
        let h = 1e-4;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[k]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
            let mut numeric = vec![0.0; t.len()];
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, tj)| {
                            let mut tj = tj.clone();
                            if j == k {
                                tj.data_mut()[i] += delta;
                            }
                            g2.param(tj)
                        })
                        .collect();
                    let o = f(&mut g2, &vs);
                    g2.value(o).data()[0]
                };
                numeric[i] = (eval(h) - eval(-h)) / (2.0 * h);
            }
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt()).max(1e-12);
            assert!(diff / scale < tol, "input {k}: rel err {}", diff / scale);
        }
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
        let big = g.constant(Tensor::new(vec![2, 3], vec![50.0, -50.0, 0.0, -50.0, 50.0, 49.0]).unwrap());
        let p = g.softmax(big);
        let lp = g.log(p);
        assert!(g.value(lp).data().iter().all(|v| v.is_finite()));
        for r in 0..2 {
            assert!((g.value(p).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn max_routes_to_first_argmax() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 3, 2], vec![1.0, 5.0, 3.0, 5.0, 3.0, 0.0]).unwrap());
        let m = g.max_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("{other:?}"),
        }
        let c = g.constant(Tensor::zeros(vec![3]));
        assert!(g.add(a, c).is_err());
        assert!(g.add_bias(a, c).is_ok());
    }

    #[test]
    fn three_layer_mlp_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![
            rand_tensor(&mut rng, vec![7, 4]),
            rand_tensor(&mut rng, vec![4, 6]),
            rand_tensor(&mut rng, vec![6]),
            rand_tensor(&mut rng, vec![6, 5]),
            rand_tensor(&mut rng, vec![5]),
            rand_tensor(&mut rng, vec![5, 3]),
        ];
        let f = |g: &mut Graph, v: &[Var]| {
            let h = g.matmul(v[0], v[1]).unwrap();
            let h = g.add_bias(h, v[2]).unwrap();
            let h = g.relu(h);
            let h = g.matmul(h, v[3]).unwrap();
            let h = g.add_bias(h, v[4]).unwrap();
            let h = g.relu(h);
            let o = g.matmul(h, v[5]).unwrap();
            let p = g.softmax(o);
            let l = g.log(p);
            let s = g.sum(l);
            g.scale(s, -1.0 / 7.0)
        };
        check_grads(&inputs, &f, 1e-4);
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![
            rand_tensor(&mut rng, vec![6, 3]),
            rand_tensor(&mut rng, vec![6, 2]),
            rand_tensor(&mut rng, vec![5]),
            rand_tensor(&mut rng, vec![12, 5]),
        ];
        let f = |g: &mut Graph, v: &[Var]| {
            let c = g.concat(&[v[0], v[1]]).unwrap();
            let gathered = g.gather_rows(c, &[0, 2, 2, 5, 1, 3, 4, 0, 1, 5, 3, 2]).unwrap();
            let scaled = g.mul_channel(gathered, v[2]).unwrap();
            let prod = g.mul(scaled, v[3]).unwrap();
            let r = g.reshape(prod, vec![4, 3, 5]).unwrap();
            let mx = g.max_axis(r, 1).unwrap();
            let mean = g.mean_axis(r, 1).unwrap();
            let sm = g.sum_axis(r, 2).unwrap();
            let a = g.add(mx, mean).unwrap();
            let s1 = g.sum(a);
            let s2 = g.sum(sm);
            let sq = g.mul(s2, s2).unwrap();
            let t = g.scale(sq, 0.1);
            let s1v = g.reshape(s1, vec![1]).unwrap();
            let tv = g.reshape(t, vec![1]).unwrap();
            let tot = g.add(s1v, tv).unwrap();
            let wg = g.weighted_gather(v[0], &[0, 5, 2, 1, 1, 4], &[0.5, 0.25, 0.25, 0.9, 0.1, 0.0], 3).unwrap();
            let wr = g.relu(wg);
            let ws = g.sum(wr);
            let wsv = g.reshape(ws, vec![1]).unwrap();
            let tot = g.add(tot, wsv).unwrap();
            g.sum(tot)
        };
        check_grads(&inputs, &f, 1e-4);
    }

    #[test]
    fn batch_norm_train_eval_and_gradients() {
        // constant column standardizes to zero
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![4, 2], vec![3.0, 1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0]).unwrap());
        let gamma = g.constant(Tensor::new(vec![2], vec![1.0, 1.0]).unwrap());
        let beta = g.constant(Tensor::zeros(vec![2]));
        let rs = RunningStats { mean: vec![0.0; 2], var: vec![1.0; 2] };
        let (y, upd) = batch_norm(&mut g, x, gamma, beta, &rs, Mode::Train, BN_MOMENTUM).unwrap();
        let v = g.value(y);
        assert!((0..4).all(|r| v.row(r)[0].abs() < 1e-6));
        let upd = upd.unwrap();
        assert!((upd.mean[0] - 0.3).abs() < 1e-12);
        assert!((upd.var[1] - (0.9 + 0.1 * 1.25)).abs() < 1e-12);

        // eval with unit stats is the identity
        let (y, none) = batch_norm(&mut g, x, gamma, beta, &rs, Mode::Eval, BN_MOMENTUM).unwrap();
        assert!(none.is_none());
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            assert!((a - b).abs() < 1e-4);
        }
        assert!(batch_norm(&mut g, x, gamma, beta, &RunningStats { mean: vec![0.0], var: vec![1.0] }, Mode::Eval, 0.9).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inputs = vec![
            rand_tensor(&mut rng, vec![9, 4]),
            rand_tensor(&mut rng, vec![4]),
            rand_tensor(&mut rng, vec![4]),
            rand_tensor(&mut rng, vec![9, 4]),
        ];
        let f = |g: &mut Graph, v: &[Var]| {
            let rs = RunningStats { mean: vec![0.0; 4], var: vec![1.0; 4] };
            let (y, _) = batch_norm(g, v[0], v[1], v[2], &rs, Mode::Train, BN_MOMENTUM).unwrap();
            let w = g.mul(y, v[3]).unwrap();
            let r = g.relu(w);
            g.sum(r)
        };
        check_grads(&inputs, &f, 1e-4);
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut s = ParameterStore::new();
        s.insert("p", Tensor::scalar(0.0)).unwrap();
        s.insert("q", Tensor::scalar(2.0)).unwrap();
        let grads = [("p".to_string(), vec![1.0]), ("q".to_string(), vec![0.0])].into_iter().collect();
        s.adam_step(&grads, 0.001, AdamConfig::default()).unwrap();
        assert!((s.get("p").unwrap().data()[0] + 0.001).abs() < 1e-10);
        assert_eq!(s.get("q").unwrap().data()[0], 2.0);
        let missing = [("p".to_string(), vec![1.0])].into_iter().collect();
        assert!(matches!(s.adam_step(&missing, 0.001, AdamConfig::default()), Err(Error::MissingGradient(n)) if n == "q"));
    }

    #[test]
    fn container_round_trip() {
        let mut s = ParameterStore::new();
        s.insert("layer.weight", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap()).unwrap();
        s.insert("layer.bn.running_mean", Tensor::zeros(vec![2])).unwrap();
        assert!(!s.is_trainable("layer.bn.running_mean"));
        let grads = [("layer.weight".to_string(), vec![0.1, 0.2, 0.3, 0.4])].into_iter().collect();
        s.adam_step(&grads, 0.01, AdamConfig::default()).unwrap();
        let bytes = s.to_bytes();
        assert_eq!(&bytes[..4], b"FPN1");
        let back = ParameterStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.adam_steps(), 1);
        assert_eq!(back.get("layer.weight"), s.get("layer.weight"));
        assert!(ParameterStore::from_bytes(b"FPN0").is_err());
        assert!(ParameterStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(s.insert("layer.weight", Tensor::scalar(0.0)).is_err());
        assert!(s.set("layer.weight", &[0.0]).is_err());
    }
}
