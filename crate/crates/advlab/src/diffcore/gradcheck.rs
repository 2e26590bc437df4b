//! Central-finite-difference gradient verification.

use crate::diffcore::tape::{NodeId, Primitive, Tape};
use crate::diffcore::tensor::Tensor;
use crate::{Error, Result};

/// Outcome of one gradient check.
#[derive(Debug)]
pub struct GradCheckReport {
    /// Max relative error over coordinates that did not cross a kink.
    pub max_rel_err: f64,
    /// Relative error per input coordinate.
    pub per_coord: Vec<f64>,
    /// Coordinates whose ±h probes straddled a relu/max nondifferentiability;
    /// reported but excluded from `max_rel_err`.
    pub kink_coords: Vec<usize>,
}

/// Compare the tape's analytic input gradient against central finite
/// differences of the same recorded program.
///
/// `program` builds a scalar loss from the input node. The analytic side
/// runs the engine's f32 backward; the difference quotients replay the tape
/// in f64 so the oracle's own rounding noise stays far below the tolerance
/// being checked. Relative error per coordinate is
/// `|analytic − central| / (|analytic| + |central| + 1e-8)`.
pub fn check_gradient<F>(program: F, point: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut tape = Tape::new();
    let x = tape.input(point.clone());
    let root = program(&mut tape, x)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::NonScalarLoss {
            shape: tape.value(root).shape().to_vec(),
        });
    }
    let analytic = tape.backward(root)?.wrt(x);

    let base: Vec<f64> = point.data().iter().map(|&v| v as f64).collect();
    let mut per_coord = Vec::with_capacity(base.len());
    let mut kink_coords = Vec::new();
    let mut max_rel: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let mut minus = base.clone();
        minus[i] -= h;
        let rp = tape.replay_f64(&[(x, plus)])?;
        let rm = tape.replay_f64(&[(x, minus)])?;
        let central = (rp.scalar(root) - rm.scalar(root)) / (2.0 * h);
        let a = analytic.data()[i] as f64;
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-8);
        per_coord.push(rel);
        if crossed_kink(&tape, root, &rp, &rm) {
            kink_coords.push(i);
        } else {
            max_rel = max_rel.max(rel);
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        per_coord,
        kink_coords,
    })
}

/// True when any relu input changed sign, or any max-reduction changed its
/// argmax, between the two probe evaluations.
fn crossed_kink(
    tape: &Tape,
    root: NodeId,
    plus: &crate::diffcore::replay64::Replay64,
    minus: &crate::diffcore::replay64::Replay64,
) -> bool {
    for id in 0..=root {
        match tape.op(id) {
            Primitive::Relu => {
                let input = tape.inputs_of(id)[0];
                let vp = plus.value(input);
                let vm = minus.value(input);
                if vp.iter().zip(vm).any(|(&a, &b)| (a > 0.0) != (b > 0.0)) {
                    return true;
                }
            }
            Primitive::MaxLastAxis => {
                let input = tape.inputs_of(id)[0];
                let n = *plus.shape(input).last().unwrap();
                let argmax = |row: &[f64]| {
                    let mut best = 0;
                    for (i, &v) in row.iter().enumerate() {
                        if v > row[best] {
                            best = i;
                        }
                    }
                    best
                };
                let vp = plus.value(input);
                let vm = minus.value(input);
                for (rp, rm) in vp.chunks_exact(n).zip(vm.chunks_exact(n)) {
                    if argmax(rp) != argmax(rm) {
                        return true;
                    }
                }
            }
            _ => {}
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn linear_function_checks_exactly() {
        let report = check_gradient(
            |tape, x| tape.sum(x),
            &Tensor::from_vec(vec![0.3, -0.8, 2.0]),
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "err {}", report.max_rel_err);
        assert!(report.kink_coords.is_empty());
    }

    #[test]
    fn relu_at_zero_is_reported_as_kink() {
        let report = check_gradient(
            |tape, x| {
                let r = tape.relu(x)?;
                tape.sum(r)
            },
            &Tensor::from_vec(vec![1.0, 0.0, -1.0]),
            1e-3,
        )
        .unwrap();
        assert_eq!(report.kink_coords, vec![1]);
        assert!(report.max_rel_err < 1e-6);
    }

    #[test]
    fn rejects_non_positive_step() {
        let err = check_gradient(|tape, x| tape.sum(x), &Tensor::from_vec(vec![1.0]), 0.0);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_non_scalar_program() {
        let err = check_gradient(
            |tape, x| tape.relu(x),
            &Tensor::from_vec(vec![1.0, 2.0]),
            1e-3,
        );
        assert!(matches!(err, Err(crate::Error::NonScalarLoss { .. })));
    }

    /// Every differentiable primitive, probed at random smooth points with a
    /// random linear functional on top. 100 points per primitive.
    #[test]
    fn primitives_match_finite_differences() {
        let mut rng = StdRng::seed_from_u64(0x5eed);
        for case in 0..100 {
            let _ = case;
            check_unary(&mut rng, "relu", |t, x| t.relu(x), true);
            check_unary(&mut rng, "gelu", |t, x| t.gelu(x), false);
            check_unary(&mut rng, "tanh", |t, x| t.tanh(x), false);
            check_unary(&mut rng, "softmax", |t, x| t.softmax(x), false);
            check_unary(&mut rng, "max-last", |t, x| t.max_last(x), true);
            check_unary(&mut rng, "mean", |t, x| t.mean(x), false);
            check_unary(&mut rng, "reshape", |t, x| t.reshape(x, &[3, 2, 1]), false);
            check_unary(&mut rng, "transpose", |t, x| t.transpose(x, 0, 1), false);
            check_unary(&mut rng, "slice", |t, x| t.slice(x, 1, 1, 2), false);
            check_binary_each_slot(&mut rng);
        }
    }

    fn away_from_zero(shape: &[usize], rng: &mut StdRng) -> Tensor {
        // magnitudes in [0.25, 1.25]: clear of relu/max kinks and div poles
        let u = Tensor::uniform(shape, 0.25, 1.25, rng);
        let signs = Tensor::uniform(shape, 0.0, 1.0, rng);
        Tensor::new(
            shape.to_vec(),
            u.data()
                .iter()
                .zip(signs.data())
                .map(|(&m, &s)| if s < 0.5 { -m } else { m })
                .collect(),
        )
        .unwrap()
    }

    fn check_unary(
        rng: &mut StdRng,
        name: &str,
        op: impl Fn(&mut Tape, super::NodeId) -> crate::Result<super::NodeId>,
        kinky: bool,
    ) {
        let point = away_from_zero(&[2, 3], rng);
        let direction = away_from_zero(&[2, 3], rng);
        let report = check_gradient(
            |tape, x| {
                let y = op(tape, x)?;
                let yshape = tape.value(y).shape().to_vec();
                let d = tape.constant(trimmed(&direction, &yshape));
                let dy = tape.mul(y, d)?;
                tape.sum(dy)
            },
            &point,
            1e-3,
        )
        .unwrap();
        if kinky {
            // points were sampled away from kinks; none should be excluded
            assert!(report.kink_coords.is_empty(), "{name}: unexpected kink");
        }
        assert!(
            report.max_rel_err < 1e-3,
            "{name}: rel err {}",
            report.max_rel_err
        );
    }

    /// Cycle a direction tensor's data out to the given shape.
    fn trimmed(direction: &Tensor, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = direction.data().iter().cloned().cycle().take(n).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn check_binary_each_slot(rng: &mut StdRng) {
        // matmul, add (broadcast), mul, divide, sub, layernorm, conv2d,
        // cross-entropy: check the gradient w.r.t. each differentiable slot.
        let a = away_from_zero(&[2, 3], rng);
        let b = away_from_zero(&[3, 2], rng);
        for slot in 0..2 {
            let (pt, other) = if slot == 0 { (&a, &b) } else { (&b, &a) };
            let report = check_gradient(
                |tape, x| {
                    let o = tape.constant(other.clone());
                    let y = if slot == 0 {
                        tape.matmul(x, o)?
                    } else {
                        tape.matmul(o, x)?
                    };
                    tape.sum(y)
                },
                pt,
                1e-3,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-3, "matmul slot {slot}: {}", report.max_rel_err);
        }

        let x = away_from_zero(&[2, 4], rng);
        let bias = away_from_zero(&[4], rng);
        type BinOp = fn(&mut Tape, super::NodeId, super::NodeId) -> crate::Result<super::NodeId>;
        let binops: [(&str, BinOp); 3] = [
            ("add", Tape::add),
            ("mul", Tape::mul),
            ("divide", Tape::divide),
        ];
        for (name, prim) in binops {
            for slot in 0..2 {
                let (pt, other): (&Tensor, Tensor) = if slot == 0 {
                    (&x, bias.clone())
                } else {
                    (&bias, x.clone())
                };
                let report = check_gradient(
                    |tape, v| {
                        let o = tape.constant(other.clone());
                        let y = if slot == 0 {
                            prim(tape, v, o)?
                        } else {
                            prim(tape, o, v)?
                        };
                        tape.sum(y)
                    },
                    pt,
                    1e-3,
                )
                .unwrap();
                assert!(report.max_rel_err < 1e-3, "{name} slot {slot}: {}", report.max_rel_err);
            }
        }

        // layernorm: x, gamma, beta slots
        let lx = away_from_zero(&[2, 4], rng);
        let gamma = away_from_zero(&[4], rng);
        let beta = away_from_zero(&[4], rng);
        for slot in 0..3 {
            let pt = [&lx, &gamma, &beta][slot].clone();
            let report = check_gradient(
                |tape, v| {
                    let xs = tape.constant(lx.clone());
                    let gs = tape.constant(gamma.clone());
                    let bs = tape.constant(beta.clone());
                    let chosen = [xs, gs, bs];
                    let mut slots = chosen;
                    slots[slot] = v;
                    let y = tape.layernorm(slots[0], slots[1], slots[2], 1e-5)?;
                    let d = tape.constant(away_clone(&lx));
                    let dy = tape.mul(y, d)?;
                    tape.sum(dy)
                },
                &pt,
                1e-3,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-3, "layernorm slot {slot}: {}", report.max_rel_err);
        }

        // conv2d: x, w, b slots
        let cx = away_from_zero(&[1, 2, 4, 4], rng);
        let cw = away_from_zero(&[3, 2, 3, 3], rng);
        let cb = away_from_zero(&[3], rng);
        for slot in 0..3 {
            let pt = [&cx, &cw, &cb][slot].clone();
            let report = check_gradient(
                |tape, v| {
                    let xs = tape.constant(cx.clone());
                    let ws = tape.constant(cw.clone());
                    let bs = tape.constant(cb.clone());
                    let mut slots = [xs, ws, bs];
                    slots[slot] = v;
                    let y = tape.conv2d(slots[0], slots[1], slots[2], 1, 1)?;
                    tape.sum(y)
                },
                &pt,
                1e-3,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-3, "conv2d slot {slot}: {}", report.max_rel_err);
        }

        // cross-entropy w.r.t. logits
        let logits = away_from_zero(&[3, 4], rng);
        let report = check_gradient(
            |tape, v| tape.cross_entropy(v, &[0, 2, 3]),
            &logits,
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "cross-entropy: {}", report.max_rel_err);

        // embedding-lookup w.r.t. the table
        let table = away_from_zero(&[4, 3], rng);
        let report = check_gradient(
            |tape, v| {
                let rows = tape.embedding(v, vec![1, 3, 1])?;
                tape.sum(rows)
            },
            &table,
            1e-3,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "embedding: {}", report.max_rel_err);

        // sub both slots
        let s1 = away_from_zero(&[2, 3], rng);
        let s2 = away_from_zero(&[2, 3], rng);
        for slot in 0..2 {
            let (pt, other) = if slot == 0 { (&s1, &s2) } else { (&s2, &s1) };
            let report = check_gradient(
                |tape, v| {
                    let o = tape.constant(other.clone());
                    let y = if slot == 0 { tape.sub(v, o)? } else { tape.sub(o, v)? };
                    tape.sum(y)
                },
                pt,
                1e-3,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-3, "sub slot {slot}: {}", report.max_rel_err);
        }

        // concat-last-axis both slots
        for slot in 0..2 {
            let (pt, other) = if slot == 0 { (&s1, &s2) } else { (&s2, &s1) };
            let report = check_gradient(
                |tape, v| {
                    let o = tape.constant(other.clone());
                    let parts = if slot == 0 { [v, o] } else { [o, v] };
                    let y = tape.concat_last(&parts)?;
                    tape.sum(y)
                },
                pt,
                1e-3,
            )
            .unwrap();
            assert!(report.max_rel_err < 1e-3, "concat slot {slot}: {}", report.max_rel_err);
        }
    }

    fn away_clone(like: &Tensor) -> Tensor {
        Tensor::full(like.shape(), 0.7)
    }
}
