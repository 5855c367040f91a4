//! Self-contained correctness suites: finite-difference gradient checks and
//! closed-form oracles that stay independent of the implementation paths they
//! verify. The `selftest` CLI subcommand and the acceptance tests both run
//! these.

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::rng::stream_rng;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Step size for central finite differences.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error budget for all gradient checks in 64-bit.
pub const FD_TOL: f64 = 1e-6;

/// Outcome of one named check suite.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!("{} {} ({})", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Builds a scalar loss node from leaf nodes inserted in the given order.
pub type LossBuilder<'a> = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'a;

fn eval_loss(build: &LossBuilder, leaves: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves.iter().map(|t| g.constant(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.value(loss)[0])
}

/// Central finite-difference check of `d loss / d leaf` for every coordinate
/// of every leaf. Returns the maximum relative error observed.
///
/// The numeric side rebuilds the graph at perturbed inputs; the analytic side
/// is one backward pass. Near-zero gradient pairs (both below 1e-8) pass.
pub fn finite_difference_check(build: &LossBuilder, leaves: &[Tensor]) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .map(|t| g.leaf(t.clone().with_grad()))
        .collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(id).len()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = leaves.to_vec();
    for (li, leaf) in leaves.iter().enumerate() {
        for ci in 0..leaf.len() {
            let orig = leaf.data()[ci];
            work[li].data_mut()[ci] = orig + FD_STEP;
            let up = eval_loss(build, &work)?;
            work[li].data_mut()[ci] = orig - FD_STEP;
            let down = eval_loss(build, &work)?;
            work[li].data_mut()[ci] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let ana = analytic[li][ci];
            let denom = ana.abs().max(numeric.abs());
            if denom < 1e-8 {
                continue;
            }
            let diff = (ana - numeric).abs();
            if diff < 1e-9 {
                continue;
            }
            max_rel = max_rel.max(diff / denom);
        }
    }
    Ok(max_rel)
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Random values kept away from the relu kink so finite differences stay valid.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mut v: f64 = rng.gen_range(-2.0..2.0);
            while v.abs() < 1e-3 {
                v = rng.gen_range(-2.0..2.0);
            }
            v
        })
        .collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Project a tensor-valued node to a scalar with fixed random weights so the
/// whole Jacobian is exercised, not just its row sums.
fn project_to_scalar(
    g: &mut Graph,
    out: NodeId,
    weights: &Tensor,
) -> Result<NodeId> {
    let w = g.constant(weights.clone());
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

type Case<'a> = (&'a str, Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>);

/// Finite-difference suite over every differentiable primitive, `reps` random
/// instances each. Returns one result row per primitive.
pub fn gradient_check_primitives(reps: usize) -> Vec<SuiteResult> {
    let check = |name: &str, max_err: Result<f64>| -> SuiteResult {
        match max_err {
            Ok(e) => SuiteResult {
                name: format!("grad/{name}"),
                passed: e < FD_TOL,
                detail: format!("max rel err {e:.2e}"),
            },
            Err(err) => SuiteResult {
                name: format!("grad/{name}"),
                passed: false,
                detail: err.to_string(),
            },
        }
    };

    let cases: Vec<Case> = vec![
        ("matmul", Box::new(|rng: &mut ChaCha8Rng| {
            let (m, k, n) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5));
            let a = rand_tensor(rng, vec![m, k], -2.0, 2.0);
            let b = rand_tensor(rng, vec![k, n], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![m, n], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.matmul(ids[0], ids[1])?;
                    project_to_scalar(g, y, &proj)
                },
                &[a, b],
            )
        })),
        ("conv2d", Box::new(|rng: &mut ChaCha8Rng| {
            let (b, c, co) = (rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(1..3));
            let k = *[1usize, 3].get(rng.gen_range(0..2)).unwrap();
            let (h, w) = (rng.gen_range(k..7), rng.gen_range(k..7));
            let stride = rng.gen_range(1..3);
            let padding = rng.gen_range(0..2);
            let ho = crate::autodiff::conv_out_len(h, k, stride, padding);
            let wo = crate::autodiff::conv_out_len(w, k, stride, padding);
            let (Some(ho), Some(wo)) = (ho, wo) else { return Ok(0.0) };
            let x = rand_tensor(rng, vec![b, c, h, w], -1.5, 1.5);
            let wt = rand_tensor(rng, vec![co, c, k, k], -1.0, 1.0);
            let bias = rand_tensor(rng, vec![co], -0.5, 0.5);
            let proj = rand_tensor(rng, vec![b, co, ho, wo], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.conv2d(ids[0], ids[1], ids[2], stride, padding)?;
                    project_to_scalar(g, y, &proj)
                },
                &[x, wt, bias],
            )
        })),
        ("relu", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let x = rand_tensor_off_kink(rng, vec![n]);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.relu(ids[0]);
                    project_to_scalar(g, y, &proj)
                },
                &[x],
            )
        })),
        ("add", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let a = rand_tensor(rng, vec![n], -2.0, 2.0);
            let b = rand_tensor(rng, vec![n], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.add(ids[0], ids[1])?;
                    project_to_scalar(g, y, &proj)
                },
                &[a, b],
            )
        })),
        ("add_scalar", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let c = rng.gen_range(-3.0..3.0);
            let a = rand_tensor(rng, vec![n], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.add_scalar(ids[0], c);
                    project_to_scalar(g, y, &proj)
                },
                &[a],
            )
        })),
        ("mul", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let a = rand_tensor(rng, vec![n], -2.0, 2.0);
            let b = rand_tensor(rng, vec![n], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.mul(ids[0], ids[1])?;
                    project_to_scalar(g, y, &proj)
                },
                &[a, b],
            )
        })),
        ("scalar_mul", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let c = rng.gen_range(-3.0..3.0);
            let a = rand_tensor(rng, vec![n], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.scalar_mul(ids[0], c);
                    project_to_scalar(g, y, &proj)
                },
                &[a],
            )
        })),
        ("sum", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let a = rand_tensor(rng, vec![n], -2.0, 2.0);
            finite_difference_check(&|g, ids| Ok(g.sum(ids[0])), &[a])
        })),
        ("mean", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let a = rand_tensor(rng, vec![n], -2.0, 2.0);
            finite_difference_check(&|g, ids| Ok(g.mean(ids[0])), &[a])
        })),
        ("exp", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let a = rand_tensor(rng, vec![n], -1.5, 1.5);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.exp(ids[0]);
                    project_to_scalar(g, y, &proj)
                },
                &[a],
            )
        })),
        ("log", Box::new(|rng: &mut ChaCha8Rng| {
            let n = rng.gen_range(1..9);
            let a = rand_tensor(rng, vec![n], 0.2, 3.0);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.log(ids[0]);
                    project_to_scalar(g, y, &proj)
                },
                &[a],
            )
        })),
        ("l2_normalize", Box::new(|rng: &mut ChaCha8Rng| {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..6));
            let a = rand_tensor(rng, vec![r, c], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![r, c], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.l2_normalize_rows(ids[0])?;
                    project_to_scalar(g, y, &proj)
                },
                &[a],
            )
        })),
        ("softmax_cross_entropy", Box::new(|rng: &mut ChaCha8Rng| {
            let (b, k) = (rng.gen_range(1..5), rng.gen_range(2..5));
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
            let logits = rand_tensor(rng, vec![b, k], -2.0, 2.0);
            finite_difference_check(
                &|g, ids| g.softmax_cross_entropy(ids[0], &labels),
                &[logits],
            )
        })),
        ("bce_with_logits", Box::new(|rng: &mut ChaCha8Rng| {
            let b = rng.gen_range(1..7);
            let targets: Vec<f64> = (0..b).map(|_| f64::from(rng.gen_range(0..2u8))).collect();
            let pw = rng.gen_range(0.5..120.0);
            let logits = rand_tensor(rng, vec![b], -3.0, 3.0);
            finite_difference_check(
                &|g, ids| g.bce_with_logits(ids[0], &targets, pw),
                &[logits],
            )
        })),
        ("concat", Box::new(|rng: &mut ChaCha8Rng| {
            let c = rng.gen_range(1..4);
            let (r1, r2) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let a = rand_tensor(rng, vec![r1, c], -2.0, 2.0);
            let b = rand_tensor(rng, vec![r2, c], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![r1 + r2, c], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.concat(&[ids[0], ids[1]])?;
                    project_to_scalar(g, y, &proj)
                },
                &[a, b],
            )
        })),
        ("slice", Box::new(|rng: &mut ChaCha8Rng| {
            let (r, c) = (rng.gen_range(2..6), rng.gen_range(1..4));
            let start = rng.gen_range(0..r - 1);
            let end = rng.gen_range(start + 1..=r);
            let a = rand_tensor(rng, vec![r, c], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![end - start, c], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.slice(ids[0], start, end)?;
                    project_to_scalar(g, y, &proj)
                },
                &[a],
            )
        })),
        ("transpose", Box::new(|rng: &mut ChaCha8Rng| {
            let (r, c) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let a = rand_tensor(rng, vec![r, c], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![c, r], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.transpose(ids[0])?;
                    project_to_scalar(g, y, &proj)
                },
                &[a],
            )
        })),
        ("global_mean_pool", Box::new(|rng: &mut ChaCha8Rng| {
            let (b, c, h, w) = (
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            );
            let a = rand_tensor(rng, vec![b, c, h, w], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![b, c], -1.0, 1.0);
            finite_difference_check(
                &|g, ids| {
                    let y = g.global_mean_pool(ids[0])?;
                    project_to_scalar(g, y, &proj)
                },
                &[a],
            )
        })),
        ("grad_reverse", Box::new(|rng: &mut ChaCha8Rng| {
            // FD sees the forward identity, so the analytic gradient through
            // the reversal must equal -λ times the FD gradient of the same
            // composite built without it.
            let n = rng.gen_range(1..9);
            let lambda: f64 = rng.gen_range(0.05..3.0);
            let a = rand_tensor(rng, vec![n], -2.0, 2.0);
            let proj = rand_tensor(rng, vec![n], -1.0, 1.0);

            let mut g = Graph::new();
            let xid = g.leaf(a.clone().with_grad());
            let r = g.grad_reverse(xid, lambda)?;
            let sq = g.mul(r, r)?;
            let loss = project_to_scalar(&mut g, sq, &proj)?;
            g.backward(loss)?;
            let analytic = g.grad(xid).unwrap().to_vec();

            let plain = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId> {
                let sq = g.mul(ids[0], ids[0])?;
                project_to_scalar(g, sq, &proj)
            };
            let mut work = [a.clone()];
            let mut max_rel = 0.0f64;
            for ci in 0..a.len() {
                let orig = a.data()[ci];
                work[0].data_mut()[ci] = orig + FD_STEP;
                let up = eval_loss(&plain, &work)?;
                work[0].data_mut()[ci] = orig - FD_STEP;
                let down = eval_loss(&plain, &work)?;
                work[0].data_mut()[ci] = orig;
                let expect = -lambda * (up - down) / (2.0 * FD_STEP);
                let denom = expect.abs().max(analytic[ci].abs());
                if denom < 1e-8 {
                    continue;
                }
                max_rel = max_rel.max((analytic[ci] - expect).abs() / denom);
            }
            Ok(max_rel)
        })),
    ];

    let mut results = Vec::new();
    for (idx, (name, case)) in cases.iter().enumerate() {
        let mut rng = stream_rng(0xF1D0 + idx as u64, "selftest/grad");
        let mut max_err: Result<f64> = Ok(0.0);
        for _ in 0..reps {
            match (case)(&mut rng) {
                Ok(e) => {
                    if let Ok(cur) = &mut max_err {
                        *cur = cur.max(e);
                    }
                }
                Err(err) => {
                    max_err = Err(err);
                    break;
                }
            }
        }
        results.push(check(name, max_err));
    }
    results
}

/// Scalar-arithmetic reference for the normalized-temperature contrastive
/// loss, written from the definition: stack the two view batches, cosine
/// similarity per pair, one positive per anchor, denominator over the `2B-1`
/// non-self entries. Shares no code with the graph implementation.
pub fn ntxent_reference(view1: &[Vec<f64>], view2: &[Vec<f64>], tau: f64) -> f64 {
    assert_eq!(view1.len(), view2.len());
    let b = view1.len();
    let all: Vec<&Vec<f64>> = view1.iter().chain(view2.iter()).collect();
    let n = 2 * b;
    let cos = |a: &[f64], c: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(c).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nc: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nc)
    };
    let mut total = 0.0;
    for i in 0..n {
        let positive = (i + b) % n;
        let mut denom = 0.0;
        for j in 0..n {
            if j != i {
                denom += (cos(all[i], all[j]) / tau).exp();
            }
        }
        let num = (cos(all[i], all[positive]) / tau).exp();
        total += -(num / denom).ln();
    }
    total / n as f64
}

/// Gradient-reversal contract: forward bit-identity, and the gradient through
/// `grad_reverse(·, λ)` equals `-λ ×` the gradient through the identity path
/// on random composites.
pub fn grl_contract(reps: usize) -> SuiteResult {
    let mut rng = stream_rng(0x6B1, "selftest/grl");
    let mut worst = 0.0f64;
    let mut forward_ok = true;
    for _ in 0..reps {
        let n = rng.gen_range(2..7);
        let lambda: f64 = rng.gen_range(0.05..2.5);
        let x = rand_tensor(&mut rng, vec![n], -2.0, 2.0);
        let w1 = rand_tensor(&mut rng, vec![n], -1.0, 1.0);

        let run = |reverse: bool| -> (Vec<f64>, Vec<f64>) {
            let mut g = Graph::new();
            let xid = g.leaf(x.clone().with_grad());
            let fed = if reverse { g.grad_reverse(xid, lambda).unwrap() } else { xid };
            let w = g.constant(w1.clone());
            let prod = g.mul(fed, w).unwrap();
            let e = g.exp(prod);
            let sq = g.mul(e, e).unwrap();
            let loss = g.sum(sq);
            let forward = g.value(fed).to_vec();
            g.backward(loss).unwrap();
            (forward, g.grad(xid).unwrap().to_vec())
        };

        let (fwd_rev, grad_rev) = run(true);
        let (_, grad_id) = run(false);
        if fwd_rev != x.data() {
            forward_ok = false;
        }
        for (a, b) in grad_rev.iter().zip(&grad_id) {
            let expect = -lambda * b;
            let denom = expect.abs().max(1e-12);
            worst = worst.max((a - expect).abs() / denom);
        }
    }
    SuiteResult {
        name: "grl/contract".into(),
        passed: forward_ok && worst < 1e-12,
        detail: format!("forward identity: {forward_ok}, max backward rel dev {worst:.2e}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_primitive_gradients_match_finite_differences() {
        for r in gradient_check_primitives(20) {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn grl_contract_holds() {
        let r = grl_contract(10);
        assert!(r.passed, "{}", r.line());
    }
}
