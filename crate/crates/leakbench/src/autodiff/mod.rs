//! Tape-based reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The primitive set covers exactly what the training objectives and probes
//! need: matmul, conv2d, relu, add, mul, scalar ops, sum/mean, exp/log,
//! row-wise l2 normalization, fused softmax cross-entropy and weighted BCE,
//! concat/slice/transpose, global mean pooling, and gradient reversal.

mod graph;
mod kernels;
mod tensor;

pub use graph::{sigmoid, softplus, Graph, NodeId, NORM_EPS};
pub use kernels::{conv_out_len, im2col, matmul, matmul_at_b};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, shape: Vec<usize>, data: Vec<f64>) -> NodeId {
        g.leaf(Tensor::new(shape, data).unwrap().with_grad())
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 3], vec![1.0; 6]);
        let b = leaf(&mut g, vec![3, 1], vec![1.0; 3]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 1]);
        assert_eq!(g.value(c), &[3.0, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 3], vec![0.0; 6]);
        let b = leaf(&mut g, vec![4, 1], vec![0.0; 4]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]") && err.contains("[4, 1]"), "{err}");
    }

    #[test]
    fn l2_normalize_345_triangle() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1, 2], vec![3.0, 4.0]);
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.value(y);
        assert!((v[0] - 0.6).abs() < 1e-9 && (v[1] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![-1.0, 0.0, 2.0]);
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        // loss = sum(x ∘ x), x = [1, -2] → grad [2, -4]
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, -2.0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_of_mean() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = g.mean(x);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, 2.0]);
        let y = g.relu(x);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_twice_accumulates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![1.0, -2.0]);
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[4.0, -8.0]);
        g.zero_grads();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn diamond_graph_sums_shared_contributions() {
        // a = x∘x used twice: loss = sum(a + a) → dloss/dx = 4x,
        // matching the hand-expanded oracle d(2x²)/dx.
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![3], vec![1.5, -0.5, 2.0]);
        let a = g.mul(x, x).unwrap();
        let both = g.add(a, a).unwrap();
        let loss = g.sum(both);
        g.backward(loss).unwrap();
        let expect: Vec<f64> = [1.5, -0.5, 2.0].iter().map(|v| 4.0 * v).collect();
        assert_eq!(g.grad(x).unwrap(), expect.as_slice());
    }

    #[test]
    fn grad_reverse_forward_is_bit_identical() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![2], vec![5.0, -1.0]);
        let y = g.grad_reverse(x, 1.0).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert_eq!(g.value(y), &[5.0, -1.0]);
    }

    #[test]
    fn grad_reverse_negates_and_scales() {
        // loss = sum(square(grad_reverse(x, λ))) at x=[3]:
        //   λ=1   → grad = -2x = -6
        //   λ=0.2 → grad = -0.2·2x = -1.2
        for (lambda, expect) in [(1.0, -6.0), (0.2, -1.2000000000000002)] {
            let mut g = Graph::new();
            let x = leaf(&mut g, vec![1], vec![3.0]);
            let r = g.grad_reverse(x, lambda).unwrap();
            let sq = g.mul(r, r).unwrap();
            let loss = g.sum(sq);
            g.backward(loss).unwrap();
            let got = g.grad(x).unwrap()[0];
            assert!((got - expect).abs() < 1e-12, "λ={lambda}: {got}");
        }
    }

    #[test]
    fn grad_reverse_rejects_non_positive_lambda() {
        let mut g = Graph::new();
        let x = leaf(&mut g, vec![1], vec![3.0]);
        assert!(g.grad_reverse(x, 0.0).is_err());
        assert!(g.grad_reverse(x, -1.0).is_err());
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        // Compare the im2col path against a naive direct convolution.
        let (b, c, h, w, co, k, s, p) = (2usize, 2usize, 5usize, 5usize, 3usize, 3usize, 2usize, 1usize);
        let x: Vec<f64> = (0..b * c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let wt: Vec<f64> = (0..co * c * k * k).map(|i| (i as f64 * 0.11).cos()).collect();
        let bias: Vec<f64> = (0..co).map(|i| i as f64 * 0.5 - 0.5).collect();
        let mut g = Graph::new();
        let xn = g.constant(Tensor::new(vec![b, c, h, w], x.clone()).unwrap());
        let wn = g.constant(Tensor::new(vec![co, c, k, k], wt.clone()).unwrap());
        let bn = g.constant(Tensor::new(vec![co], bias.clone()).unwrap());
        let y = g.conv2d(xn, wn, bn, s, p).unwrap();
        let ho = conv_out_len(h, k, s, p).unwrap();
        let wo = conv_out_len(w, k, s, p).unwrap();
        assert_eq!(g.shape(y), &[b, co, ho, wo]);
        for bi in 0..b {
            for ci in 0..co {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = bias[ci];
                        for ii in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let yi = (oi * s + ki) as isize - p as isize;
                                    let xj = (oj * s + kj) as isize - p as isize;
                                    if yi < 0 || yi >= h as isize || xj < 0 || xj >= w as isize {
                                        continue;
                                    }
                                    acc += x[((bi * c + ii) * h + yi as usize) * w + xj as usize]
                                        * wt[((ci * c + ii) * k + ki) * k + kj];
                                }
                            }
                        }
                        let got = g.value(y)[((bi * co + ci) * ho + oi) * wo + oj];
                        assert!((got - acc).abs() < 1e-12, "mismatch at {bi},{ci},{oi},{oj}");
                    }
                }
            }
        }
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = Graph::new();
        let a = leaf(&mut g, vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, vec![1, 2], vec![5.0, 6.0]);
        let cat = g.concat(&[a, b]).unwrap();
        assert_eq!(g.shape(cat), &[3, 2]);
        let back = g.slice(cat, 2, 3).unwrap();
        assert_eq!(g.value(back), &[5.0, 6.0]);
        let loss = g.sum(back);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[0.0; 4]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let logits = leaf(&mut g, vec![4, 2], vec![0.0; 8]);
        let loss = g.softmax_cross_entropy(logits, &[0, 1, 0, 1]).unwrap();
        assert!((g.value(loss)[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_rejects_out_of_range_label() {
        let mut g = Graph::new();
        let logits = leaf(&mut g, vec![2, 3], vec![0.0; 6]);
        assert!(g.softmax_cross_entropy(logits, &[0, 3]).is_err());
    }

    #[test]
    fn bce_stable_for_huge_logits() {
        let mut g = Graph::new();
        let logits = leaf(&mut g, vec![1], vec![100.0]);
        let loss = g.bce_with_logits(logits, &[1.0], 1.0).unwrap();
        let v = g.value(loss)[0];
        assert!(v.is_finite() && v < 1e-30, "{v}");
        g.backward(loss).unwrap();
        assert!(g.grad(logits).unwrap()[0].is_finite());
    }

    #[test]
    fn bce_at_zero_logit_is_ln_two() {
        let mut g = Graph::new();
        let logits = leaf(&mut g, vec![1], vec![0.0]);
        let loss = g.bce_with_logits(logits, &[1.0], 1.0).unwrap();
        assert!((g.value(loss)[0] - 2f64.ln()).abs() < 1e-12);
    }
}
