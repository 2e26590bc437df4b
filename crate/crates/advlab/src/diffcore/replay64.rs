//! f64 shadow evaluation of a recorded tape.
//!
//! The finite-difference oracle cannot run in f32: with step h = 1e-3 the
//! f32 rounding noise of the loss (~1e-6) turns into ~1e-3 absolute noise in
//! the quotient, swamping small gradients. Replaying the recorded program
//! with f64 kernels keeps the oracle honest while the engine itself stays
//! f32. The formulas here are written independently of the f32 kernels.

use crate::diffcore::tape::{NodeId, Primitive, Tape};
use crate::Result;

const GELU_C0: f64 = 0.797_884_560_802_865_4;
const GELU_C1: f64 = 0.044715;

/// All node values recomputed in f64, with leaf overrides.
pub struct Replay64 {
    values: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Replay64 {
    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id]
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.values[id][0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.shapes[id]
    }
}

impl Tape {
    /// Recompute every node in f64, overriding listed leaf values.
    pub fn replay_f64(&self, overrides: &[(NodeId, Vec<f64>)]) -> Result<Replay64> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.len());
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.len());
        for id in 0..self.len() {
            let shape = self.value(id).shape().to_vec();
            let v = if matches!(self.op(id), Primitive::Input) {
                match overrides.iter().find(|(oid, _)| *oid == id) {
                    Some((_, data)) => {
                        assert_eq!(data.len(), self.value(id).numel(), "override length");
                        data.clone()
                    }
                    None => self.value(id).data().iter().map(|&v| v as f64).collect(),
                }
            } else {
                let ins: Vec<(&[f64], &[usize])> = self
                    .inputs_of(id)
                    .iter()
                    .map(|&i| (values[i].as_slice(), shapes[i].as_slice()))
                    .collect();
                eval_f64(self.op(id), &ins, &shape)
            };
            values.push(v);
            shapes.push(shape);
        }
        Ok(Replay64 { values, shapes })
    }
}

fn mm64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
}

fn eval_f64(op: &Primitive, ins: &[(&[f64], &[usize])], out_shape: &[usize]) -> Vec<f64> {
    let numel = |s: &[usize]| s.iter().product::<usize>();
    match op {
        Primitive::Input => unreachable!(),
        Primitive::MatMul => {
            let (a, ashape) = ins[0];
            let (b, bshape) = ins[1];
            let mut out = vec![0.0; numel(out_shape)];
            if bshape.len() == 2 {
                let k = bshape[0];
                let n = bshape[1];
                let rows = numel(ashape) / k;
                mm64(a, b, rows, k, n, &mut out);
            } else {
                let m = ashape[ashape.len() - 2];
                let k = ashape[ashape.len() - 1];
                let n = bshape[bshape.len() - 1];
                let batch = numel(ashape) / (m * k);
                for bi in 0..batch {
                    mm64(
                        &a[bi * m * k..(bi + 1) * m * k],
                        &b[bi * k * n..(bi + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut out[bi * m * n..(bi + 1) * m * n],
                    );
                }
            }
            out
        }
        Primitive::Add | Primitive::Mul | Primitive::Divide => {
            let (l, _) = ins[0];
            let (r, _) = ins[1];
            let rn = r.len().max(1);
            l.iter()
                .enumerate()
                .map(|(i, &lv)| match op {
                    Primitive::Add => lv + r[i % rn],
                    Primitive::Mul => lv * r[i % rn],
                    _ => lv / r[i % rn],
                })
                .collect()
        }
        Primitive::Sub => {
            let (l, _) = ins[0];
            let (r, _) = ins[1];
            l.iter().zip(r).map(|(a, b)| a - b).collect()
        }
        Primitive::Reshape(_) => ins[0].0.to_vec(),
        Primitive::Transpose(ax0, ax1) => {
            let (x, xshape) = ins[0];
            let rank = xshape.len();
            let mut out_strides = vec![1usize; rank];
            for i in (0..rank.saturating_sub(1)).rev() {
                out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
            }
            let mut out = vec![0.0; x.len()];
            let mut idx = vec![0usize; rank];
            for &v in x {
                let mut off = 0;
                for d in 0..rank {
                    let od = if d == *ax0 {
                        *ax1
                    } else if d == *ax1 {
                        *ax0
                    } else {
                        d
                    };
                    off += idx[d] * out_strides[od];
                }
                out[off] = v;
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    if idx[d] < xshape[d] {
                        break;
                    }
                    idx[d] = 0;
                }
            }
            out
        }
        Primitive::ConcatLastAxis => {
            let lead: usize = out_shape[..out_shape.len() - 1].iter().product();
            let mut out = Vec::with_capacity(numel(out_shape));
            for r in 0..lead {
                for (data, shape) in ins {
                    let last = *shape.last().unwrap();
                    out.extend_from_slice(&data[r * last..(r + 1) * last]);
                }
            }
            out
        }
        Primitive::Slice { axis, start, len } => {
            let (x, xshape) = ins[0];
            let dim = xshape[*axis];
            let inner: usize = xshape[axis + 1..].iter().product();
            let outer: usize = xshape[..*axis].iter().product();
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out.extend_from_slice(&x[base..base + len * inner]);
            }
            out
        }
        Primitive::Relu => ins[0].0.iter().map(|&v| v.max(0.0)).collect(),
        Primitive::Gelu => ins[0]
            .0
            .iter()
            .map(|&x| {
                let u = GELU_C0 * (x + GELU_C1 * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            })
            .collect(),
        Primitive::Tanh => ins[0].0.iter().map(|&v| v.tanh()).collect(),
        Primitive::SoftmaxLastAxis => {
            let (x, xshape) = ins[0];
            let n = *xshape.last().unwrap();
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(n) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let s: f64 = exps.iter().sum();
                out.extend(exps.iter().map(|e| e / s));
            }
            out
        }
        Primitive::LayerNorm { eps } => {
            let (x, xshape) = ins[0];
            let (gamma, _) = ins[1];
            let (beta, _) = ins[2];
            let n = *xshape.last().unwrap();
            let mut out = Vec::with_capacity(x.len());
            for row in x.chunks_exact(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let inv = 1.0 / (var + *eps as f64).sqrt();
                for (i, &v) in row.iter().enumerate() {
                    out.push(gamma[i] * (v - mean) * inv + beta[i]);
                }
            }
            out
        }
        Primitive::Mean => {
            let x = ins[0].0;
            vec![x.iter().sum::<f64>() / x.len() as f64]
        }
        Primitive::Sum => vec![ins[0].0.iter().sum::<f64>()],
        Primitive::MaxLastAxis => {
            let (x, xshape) = ins[0];
            let n = *xshape.last().unwrap();
            x.chunks_exact(n)
                .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
                .collect()
        }
        Primitive::EmbeddingLookup(indices) => {
            let (table, tshape) = ins[0];
            let d = tshape[1];
            let mut out = Vec::with_capacity(indices.len() * d);
            for &i in indices {
                out.extend_from_slice(&table[i as usize * d..(i as usize + 1) * d]);
            }
            out
        }
        Primitive::CrossEntropy { labels } => {
            let (logits, lshape) = ins[0];
            let c = lshape[1];
            let mut total = 0.0;
            for (row, &label) in logits.chunks_exact(c).zip(labels.iter()) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[label as usize];
            }
            vec![total / labels.len() as f64]
        }
        Primitive::Conv2d { stride, pad } => {
            let (x, xshape) = ins[0];
            let (w, wshape) = ins[1];
            let (bias, _) = ins[2];
            let (b, cin, h, wd) = (xshape[0], xshape[1], xshape[2], xshape[3]);
            let (cout, _, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
            let (oh, ow) = (out_shape[2], out_shape[3]);
            let mut out = vec![0.0; b * cout * oh * ow];
            for bi in 0..b {
                for co in 0..cout {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut acc = bias[co];
                            for ci in 0..cin {
                                for u in 0..kh {
                                    let ii = (oi * stride + u) as isize - *pad as isize;
                                    if ii < 0 || ii as usize >= h {
                                        continue;
                                    }
                                    for v in 0..kw {
                                        let jj = (oj * stride + v) as isize - *pad as isize;
                                        if jj < 0 || jj as usize >= wd {
                                            continue;
                                        }
                                        acc += x[((bi * cin + ci) * h + ii as usize) * wd
                                            + jj as usize]
                                            * w[((co * cin + ci) * kh + u) * kw + v];
                                    }
                                }
                            }
                            out[((bi * cout + co) * oh + oi) * ow + oj] = acc;
                        }
                    }
                }
            }
            out
        }
    }
}
