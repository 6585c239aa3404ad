//! Minimal reverse-mode differentiation engine and the layer vocabulary
//! (convolution, normalization, activations, pooling, resampling, softmax,
//! reductions) that the models and losses are built from. 64-bit floats
//! throughout.

mod checkpoint;
mod gradcheck;
mod graph;
mod init;
mod kernels;
mod tensor;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, CheckpointEntry};
pub use gradcheck::{grad_check, GradientReport, ParamCheck, GRAD_CHECK_BUDGET};
pub use graph::{BufferUpdate, Evaluation, GradientResult, Graph, Mode, NodeId, Op};
pub use init::uniform_fan_in;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::seeds;
    use indexmap::IndexMap;
    use rand::Rng;

    fn bind(pairs: &[(&str, Tensor)]) -> IndexMap<String, Tensor> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    /// Independent direct sliding-window convolution, the oracle for the
    /// im2col/GEMM path.
    fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Tensor {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let co = w.shape()[0];
        let (kh, kw) = (w.shape()[2], w.shape()[3]);
        let (ph, pw) = (kh / 2, kw / 2);
        let ho = (h + 2 * ph - kh) / stride + 1;
        let wo = (wd + 2 * pw - kw) / stride + 1;
        let mut y = Tensor::zeros(&[n, co, ho, wo]);
        for i in 0..n {
            for oc in 0..co {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[oc];
                        for ic in 0..ci {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - ph as isize;
                                    let ix = (ox * stride + kx) as isize - pw as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((i * ci + ic) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((oc * ci + ic) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        y.data_mut()[((i * co + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn evaluate_square() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let ev = g.evaluate(&[y], &IndexMap::new(), Mode::Eval).unwrap();
        assert_eq!(ev.value(y).item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = seeds::rng(11);
        let img: Vec<f64> = (0..2 * 3 * 5 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(vec![2, 3, 5, 5], img).unwrap();
        // 1x1 kernel mapping each channel to itself.
        let mut w = Tensor::zeros(&[3, 3, 1, 1]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        let b = Tensor::zeros(&[3]);

        let mut g = Graph::new();
        let xi = g.input("x");
        let wi = g.constant(w);
        let bi = g.constant(b);
        let y = g.conv2d(xi, wi, bi, 1);
        let ev = g
            .evaluate(&[y], &bind(&[("x", x.clone())]), Mode::Eval)
            .unwrap();
        assert_eq!(ev.value(y), &x);
    }

    #[test]
    fn conv_matches_sliding_window_oracle() {
        // 3x3 conv on a 5x5 ramp image with a fixed kernel.
        let ramp: Vec<f64> = (0..25).map(|v| v as f64 / 10.0).collect();
        let x = Tensor::from_vec(vec![1, 1, 5, 5], ramp).unwrap();
        let w = Tensor::from_vec(
            vec![1, 1, 3, 3],
            vec![0.5, -1.0, 0.25, 2.0, 0.0, -0.5, 1.5, -0.25, 0.75],
        )
        .unwrap();
        let b = Tensor::from_vec(vec![1], vec![0.1]).unwrap();
        let expect = conv2d_oracle(&x, &w, &b, 1);

        let mut g = Graph::new();
        let xi = g.input("x");
        let wi = g.constant(w);
        let bi = g.constant(b);
        let y = g.conv2d(xi, wi, bi, 1);
        let ev = g.evaluate(&[y], &bind(&[("x", x)]), Mode::Eval).unwrap();
        for (a, o) in ev.value(y).data().iter().zip(expect.data()) {
            assert!((a - o).abs() < 1e-12, "{a} vs {o}");
        }
    }

    #[test]
    fn conv_strided_matches_oracle() {
        let mut rng = seeds::rng(5);
        let x = Tensor::from_vec(
            vec![2, 3, 7, 7],
            (0..2 * 3 * 49).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let w = Tensor::from_vec(
            vec![4, 3, 3, 3],
            (0..4 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = Tensor::from_vec(vec![4], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let expect = conv2d_oracle(&x, &w, &b, 2);

        let mut g = Graph::new();
        let xi = g.input("x");
        let wi = g.constant(w);
        let bi = g.constant(b);
        let y = g.conv2d(xi, wi, bi, 2);
        let ev = g.evaluate(&[y], &bind(&[("x", x)]), Mode::Eval).unwrap();
        assert_eq!(ev.value(y).shape(), expect.shape());
        for (a, o) in ev.value(y).data().iter().zip(expect.data()) {
            assert!((a - o).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_square() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let res = g.gradients(y, &IndexMap::new(), Mode::Eval).unwrap();
        assert_eq!(res.loss_value, 9.0);
        assert_eq!(res.grads["x"].item(), 6.0);
    }

    #[test]
    fn unreached_parameter_gets_exact_zero() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::scalar(2.0));
        let _unused = g.param("unused", Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.mul(x, x);
        let res = g.gradients(y, &IndexMap::new(), Mode::Eval).unwrap();
        assert!(res.grads["unused"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
        let build = || {
            let mut g = Graph::new();
            let mut rng = seeds::rng(21);
            let w = g.param(
                "w",
                Tensor::from_vec(vec![6], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .unwrap(),
            );
            let l1 = {
                let a = g.abs(w);
                g.mean(a)
            };
            let l2 = {
                let m = g.mul(w, w);
                g.sum(m)
            };
            (g, w, l1, l2)
        };
        let (mut g, w, l1, l2) = build();
        let _ = w;
        let (a, b) = (0.7, -1.3);
        let g1 = g.gradients(l1, &IndexMap::new(), Mode::Eval).unwrap().grads["w"].clone();
        let g2 = g.gradients(l2, &IndexMap::new(), Mode::Eval).unwrap().grads["w"].clone();
        let la = g.affine(l1, a, 0.0);
        let lb = g.affine(l2, b, 0.0);
        let combined = g.add(la, lb);
        let gc = g
            .gradients(combined, &IndexMap::new(), Mode::Eval)
            .unwrap()
            .grads["w"]
            .clone();
        for i in 0..6 {
            let want = a * g1.data()[i] + b * g2.data()[i];
            let got = gc.data()[i];
            let rel = (want - got).abs() / want.abs().max(got.abs()).max(1e-300);
            assert!(rel < 1e-10, "component {i}: {want} vs {got}");
        }
    }

    #[test]
    fn random_conv_net_matches_finite_differences() {
        let mut rng = seeds::rng(42);
        let mut g = Graph::new();
        let x = g.input("x");
        let w1 = g.param("w1", uniform_fan_in(&[3, 2, 3, 3], 18, &mut rng));
        let b1 = g.param("b1", Tensor::zeros(&[3]));
        let c1 = g.conv2d(x, w1, b1, 2);
        let a1 = g.leaky_relu(c1, 0.2);
        let w2 = g.param("w2", uniform_fan_in(&[2, 3, 3, 3], 27, &mut rng));
        let b2 = g.param("b2", Tensor::zeros(&[2]));
        let c2 = g.conv2d(a1, w2, b2, 1);
        let p = g.max_pool2x2(c2);
        let a = g.abs(p);
        let loss = g.mean(a);

        let input = Tensor::from_vec(
            vec![2, 2, 6, 6],
            (0..2 * 2 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let report = grad_check(&mut g, loss, &bind(&[("x", input)]), 1e-3).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn grad_check_linear_layer_l1() {
        let mut rng = seeds::rng(7);
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param("w", uniform_fan_in(&[4, 3, 1, 1], 3, &mut rng));
        let b = g.param("b", Tensor::zeros(&[4]));
        let y = g.conv2d(x, w, b, 1);
        let t = g.input("t");
        let d = g.sub(y, t);
        let a = g.abs(d);
        let loss = g.mean(a);

        let input = Tensor::from_vec(
            vec![2, 3, 4, 4],
            (0..2 * 3 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let target = Tensor::from_vec(
            vec![2, 4, 4, 4],
            (0..2 * 4 * 16).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let report = grad_check(&mut g, loss, &bind(&[("x", input), ("t", target)]), 1e-3).unwrap();
        assert!(
            report.max_rel_error < 1e-5,
            "max rel error {}",
            report.max_rel_error
        );
    }

    #[test]
    fn grad_check_zero_parameter_graph() {
        let mut g = Graph::new();
        let x = g.input("x");
        let loss = g.mean(x);
        let input = Tensor::from_vec(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let report = grad_check(&mut g, loss, &bind(&[("x", input)]), 1e-3).unwrap();
        assert!(report.per_param.is_empty());
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_budget_is_enforced() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::zeros(&[101, 101]));
        let loss = g.mean(w);
        let err = grad_check(&mut g, loss, &IndexMap::new(), 1e-3).unwrap_err();
        assert!(matches!(err, Error::BudgetExceeded { .. }));
    }

    #[test]
    fn softmax_outputs_probability_vectors() {
        let mut rng = seeds::rng(3);
        let x = Tensor::from_vec(
            vec![8, 10],
            (0..80).map(|_| rng.gen_range(-5.0..5.0)).collect(),
        )
        .unwrap();
        let mut g = Graph::new();
        let xi = g.input("x");
        let s = g.softmax(xi);
        let ev = g.evaluate(&[s], &bind(&[("x", x)]), Mode::Eval).unwrap();
        for row in ev.value(s).data().chunks_exact(10) {
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn evaluation_is_deterministic() {
        let mut rng = seeds::rng(99);
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.param("w", uniform_fan_in(&[4, 3, 3, 3], 27, &mut rng));
        let b = g.param("b", Tensor::zeros(&[4]));
        let c = g.conv2d(x, w, b, 1);
        let r = g.relu(c);
        let loss = g.mean(r);
        let input = Tensor::from_vec(
            vec![3, 3, 8, 8],
            (0..3 * 3 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let inputs = bind(&[("x", input)]);
        let r1 = g.gradients(loss, &inputs, Mode::Eval).unwrap();
        let r2 = g.gradients(loss, &inputs, Mode::Eval).unwrap();
        assert_eq!(r1.loss_value.to_bits(), r2.loss_value.to_bits());
        for (a, b) in r1.grads["w"].data().iter().zip(r2.grads["w"].data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn unbound_input_is_reported() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.relu(x);
        let err = g.evaluate(&[y], &IndexMap::new(), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::UnboundInput(name) if name == "x"));
    }

    #[test]
    fn shape_mismatch_names_offending_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let y = g.add(a, b);
        let err = g
            .evaluate(
                &[y],
                &bind(&[
                    ("a", Tensor::zeros(&[2, 2])),
                    ("b", Tensor::zeros(&[3])),
                ]),
                Mode::Eval,
            )
            .unwrap_err();
        match err {
            Error::ShapeMismatch { node, .. } => assert_eq!(node, y),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::zeros(&[3]));
        let y = g.relu(w);
        let err = g.gradients(y, &IndexMap::new(), Mode::Eval).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = seeds::rng(13);
        let t1 = Tensor::from_vec(
            vec![3, 2],
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let t2 = Tensor::from_vec(vec![4], vec![f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, 255.0]).unwrap();
        let entries = vec![
            CheckpointEntry {
                name: "a.w".into(),
                kind: "param".into(),
                tensor: t1.clone(),
            },
            CheckpointEntry {
                name: "bn.mean".into(),
                kind: "buffer".into(),
                tensor: t2.clone(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        let meta = serde_json::json!({"step": 7});
        save_checkpoint(&path, &meta, &entries).unwrap();
        let (meta2, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(meta2["step"], 7);
        assert_eq!(loaded.len(), 2);
        for (orig, back) in entries.iter().zip(&loaded) {
            assert_eq!(orig.name, back.name);
            assert_eq!(orig.kind, back.kind);
            assert_eq!(orig.tensor.shape(), back.tensor.shape());
            for (x, y) in orig.tensor.data().iter().zip(back.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
