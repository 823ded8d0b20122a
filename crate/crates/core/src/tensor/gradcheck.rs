//! Finite-difference checks of the tape's analytic gradients.
//!
//! Each instance draws random shapes and values, projects the op's output
//! onto a random direction to get a scalar, and compares the tape gradient
//! for every input against central differences of an independent f64
//! forward pass. The error of an instance is `|a - n| / (|a| + |n|)` over
//! the concatenated gradient vectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Result, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckedOp {
    Conv2d,
    Dense,
    Relu,
    LstmStep,
    SquaredError,
}

impl CheckedOp {
    pub const ALL: [CheckedOp; 5] = [
        CheckedOp::Conv2d,
        CheckedOp::Dense,
        CheckedOp::Relu,
        CheckedOp::LstmStep,
        CheckedOp::SquaredError,
    ];

    pub fn id(self) -> &'static str {
        match self {
            CheckedOp::Conv2d => "conv2d",
            CheckedOp::Dense => "dense",
            CheckedOp::Relu => "relu",
            CheckedOp::LstmStep => "lstm_step",
            CheckedOp::SquaredError => "squared_error",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: CheckedOp,
    pub instances: usize,
    pub worst: f64,
    pub mean: f64,
}

/// One random instance: input tensors plus whatever the op needs besides.
struct Instance {
    inputs: Vec<(Vec<usize>, Vec<f64>)>,
    stride: usize,
    target: Vec<f64>,
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn instance(op: CheckedOp, rng: &mut ChaCha8Rng, eps: f64) -> Instance {
    let mut inputs = Vec::new();
    let mut stride = 1;
    let mut target = Vec::new();
    match op {
        CheckedOp::Conv2d => {
            let batch = rng.gen_range(0..3usize);
            let (c, h, w) = (
                rng.gen_range(1..4),
                rng.gen_range(3..8),
                rng.gen_range(3..8),
            );
            let (o, kh, kw) = (
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
            );
            stride = rng.gen_range(1..3);
            let shape = if batch == 0 {
                vec![c, h, w]
            } else {
                vec![batch, c, h, w]
            };
            let n = shape.iter().product();
            inputs.push((shape, uniform(rng, n, 1.0)));
            inputs.push((vec![o, c, kh, kw], uniform(rng, o * c * kh * kw, 0.5)));
            inputs.push((vec![o], uniform(rng, o, 0.5)));
        }
        CheckedOp::Dense => {
            let batch = rng.gen_range(0..4usize);
            let (n, m) = (rng.gen_range(1..8), rng.gen_range(1..6));
            let shape = if batch == 0 { vec![n] } else { vec![batch, n] };
            inputs.push((shape, uniform(rng, batch.max(1) * n, 1.0)));
            inputs.push((vec![m, n], uniform(rng, m * n, 0.5)));
            inputs.push((vec![m], uniform(rng, m, 0.5)));
        }
        CheckedOp::Relu => {
            // keep every value well clear of the kink
            let n = rng.gen_range(1..24);
            let x = (0..n)
                .map(|_| {
                    let mag = rng.gen_range(10.0 * eps..1.0);
                    if rng.gen() {
                        mag
                    } else {
                        -mag
                    }
                })
                .collect();
            inputs.push((vec![n], x));
        }
        CheckedOp::LstmStep => {
            let batch = rng.gen_range(0..3usize);
            let (n_in, hid) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let rows = batch.max(1);
            let vec_shape = |k: usize| if batch == 0 { vec![k] } else { vec![batch, k] };
            inputs.push((vec_shape(n_in), uniform(rng, rows * n_in, 1.0)));
            inputs.push((vec_shape(hid), uniform(rng, rows * hid, 1.0)));
            inputs.push((vec_shape(hid), uniform(rng, rows * hid, 1.0)));
            inputs.push((vec![4 * hid, n_in], uniform(rng, 4 * hid * n_in, 0.7)));
            inputs.push((vec![4 * hid, hid], uniform(rng, 4 * hid * hid, 0.7)));
            inputs.push((vec![4 * hid], uniform(rng, 4 * hid, 0.5)));
        }
        CheckedOp::SquaredError => {
            let batch = rng.gen_range(1..6usize);
            let shape = if rng.gen() {
                vec![batch]
            } else {
                vec![batch, 1]
            };
            inputs.push((shape, uniform(rng, batch, 2.0)));
            target = uniform(rng, batch, 2.0);
        }
    }
    Instance {
        inputs,
        stride,
        target,
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Straight-line f64 forward of the op, outputs flattened in tape order.
fn reference(op: CheckedOp, inst: &Instance, vals: &[Vec<f64>]) -> Vec<f64> {
    let shapes: Vec<&[usize]> = inst.inputs.iter().map(|(s, _)| s.as_slice()).collect();
    match op {
        CheckedOp::Conv2d => {
            let xs = shapes[0];
            let batch = if xs.len() == 4 { xs[0] } else { 1 };
            let (c, h, w) = (xs[xs.len() - 3], xs[xs.len() - 2], xs[xs.len() - 1]);
            let (o, kh, kw) = (shapes[1][0], shapes[1][2], shapes[1][3]);
            let s = inst.stride;
            let (oh, ow) = ((h - kh) / s + 1, (w - kw) / s + 1);
            let (x, k, bias) = (&vals[0], &vals[1], &vals[2]);
            let mut out = Vec::with_capacity(batch * o * oh * ow);
            for b in 0..batch {
                for oc in 0..o {
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = bias[oc];
                            for ic in 0..c {
                                for u in 0..kh {
                                    for v in 0..kw {
                                        let xv = x[((b * c + ic) * h + i * s + u) * w + j * s + v];
                                        acc += k[((oc * c + ic) * kh + u) * kw + v] * xv;
                                    }
                                }
                            }
                            out.push(acc);
                        }
                    }
                }
            }
            out
        }
        CheckedOp::Dense => {
            let n = *shapes[0].last().unwrap();
            let m = shapes[1][0];
            let (x, wt, bias) = (&vals[0], &vals[1], &vals[2]);
            x.chunks(n)
                .flat_map(|row| {
                    (0..m)
                        .map(move |r| bias[r] + (0..n).map(|q| wt[r * n + q] * row[q]).sum::<f64>())
                })
                .collect()
        }
        CheckedOp::Relu => vals[0].iter().map(|&v| v.max(0.0)).collect(),
        CheckedOp::LstmStep => {
            let n_in = *shapes[0].last().unwrap();
            let hid = *shapes[1].last().unwrap();
            let (x, h, c, wx, wh, bias) =
                (&vals[0], &vals[1], &vals[2], &vals[3], &vals[4], &vals[5]);
            let rows = x.len() / n_in;
            let (mut hs, mut cs) = (Vec::new(), Vec::new());
            for b in 0..rows {
                let gate = |g: usize, j: usize| {
                    let r = g * hid + j;
                    bias[r]
                        + (0..n_in)
                            .map(|q| wx[r * n_in + q] * x[b * n_in + q])
                            .sum::<f64>()
                        + (0..hid)
                            .map(|q| wh[r * hid + q] * h[b * hid + q])
                            .sum::<f64>()
                };
                for j in 0..hid {
                    let i_g = sigmoid(gate(0, j));
                    let f_g = sigmoid(gate(1, j));
                    let g_g = gate(2, j).tanh();
                    let o_g = sigmoid(gate(3, j));
                    let c_new = f_g * c[b * hid + j] + i_g * g_g;
                    hs.push(o_g * c_new.tanh());
                    cs.push(c_new);
                }
            }
            hs.extend(cs);
            hs
        }
        CheckedOp::SquaredError => {
            let p = &vals[0];
            let sum: f64 = p
                .iter()
                .zip(&inst.target)
                .map(|(q, y)| (y - q) * (y - q))
                .sum();
            vec![sum / p.len() as f64]
        }
    }
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Tape gradients of `direction · op(inputs)` for every input, concatenated.
fn analytic(op: CheckedOp, inst: &Instance, direction: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = inst
        .inputs
        .iter()
        .map(|(shape, v)| Ok(tape.input_with_grad(Tensor::new(shape, to_f32(v))?)))
        .collect::<Result<Vec<_>>>()?;
    let out = match op {
        CheckedOp::Conv2d => {
            let y = tape.conv2d(vars[0], vars[1], vars[2], inst.stride)?;
            tape.flatten(y)?
        }
        CheckedOp::Dense => {
            let y = tape.dense(vars[0], vars[1], vars[2])?;
            tape.flatten(y)?
        }
        CheckedOp::Relu => tape.relu(vars[0])?,
        CheckedOp::LstmStep => {
            let (h, c) = tape.lstm_step(vars[0], vars[1], vars[2], vars[3], vars[4], vars[5])?;
            tape.concat(&[h, c])?
        }
        CheckedOp::SquaredError => {
            let target = Tensor::new(&inst.inputs[0].0, to_f32(&inst.target))?;
            let l = tape.squared_error(vars[0], &target)?;
            tape.flatten(l)?
        }
    };
    let n = direction.len();
    let w = tape.input(Tensor::new(&[1, n], to_f32(direction))?);
    let b = tape.input(Tensor::zeros(&[1]));
    let loss = tape.dense(out, w, b)?;
    let grads = tape.backward(loss)?;
    let mut all = Vec::new();
    for v in vars {
        all.extend(grads.wrt(v)?.into_iter().map(f64::from));
    }
    Ok(all)
}

fn numeric(op: CheckedOp, inst: &Instance, direction: &[f64], eps: f64) -> Vec<f64> {
    let mut vals: Vec<Vec<f64>> = inst.inputs.iter().map(|(_, v)| v.clone()).collect();
    let objective = |vals: &[Vec<f64>]| -> f64 {
        reference(op, inst, vals)
            .iter()
            .zip(direction)
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut out = Vec::new();
    for t in 0..vals.len() {
        for i in 0..vals[t].len() {
            let orig = vals[t][i];
            vals[t][i] = orig + eps;
            let up = objective(&vals);
            vals[t][i] = orig - eps;
            let down = objective(&vals);
            vals[t][i] = orig;
            out.push((up - down) / (2.0 * eps));
        }
    }
    out
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error of one random instance.
pub fn instance_error(op: CheckedOp, rng: &mut ChaCha8Rng, eps: f64) -> Result<f64> {
    let mut inst = instance(op, rng, eps);
    // the f64 reference and the f32 tape must see identical values
    for (_, v) in &mut inst.inputs {
        for x in v.iter_mut() {
            *x = f64::from(*x as f32);
        }
    }
    for y in &mut inst.target {
        *y = f64::from(*y as f32);
    }
    let vals: Vec<Vec<f64>> = inst.inputs.iter().map(|(_, v)| v.clone()).collect();
    let out_len = reference(op, &inst, &vals).len();
    let direction: Vec<f64> = uniform(rng, out_len, 1.0)
        .into_iter()
        .map(|x| f64::from(x as f32))
        .collect();
    let a = analytic(op, &inst, &direction)?;
    let n = numeric(op, &inst, &direction, eps);
    let diff = norm(a.iter().zip(&n).map(|(x, y)| x - y));
    let scale = norm(a.iter().copied()) + norm(n.iter().copied());
    Ok(if scale == 0.0 { 0.0 } else { diff / scale })
}

pub fn check_op(op: CheckedOp, instances: usize, eps: f64, seed: u64) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut total = 0.0;
    for _ in 0..instances {
        let e = instance_error(op, &mut rng, eps)?;
        worst = worst.max(e);
        total += e;
    }
    Ok(OpReport {
        op,
        instances,
        worst,
        mean: total / instances.max(1) as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_dense_matches_hand_computation() {
        let inst = Instance {
            inputs: vec![
                (vec![2], vec![1.0, 1.0]),
                (vec![2, 2], vec![1., 2., 3., 4.]),
                (vec![2], vec![1.0, -1.0]),
            ],
            stride: 1,
            target: vec![],
        };
        let vals: Vec<Vec<f64>> = inst.inputs.iter().map(|(_, v)| v.clone()).collect();
        assert_eq!(reference(CheckedOp::Dense, &inst, &vals), vec![4.0, 6.0]);
    }

    #[test]
    fn a_wrong_gradient_would_be_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inst = instance(CheckedOp::Dense, &mut rng, 1e-3);
        let vals: Vec<Vec<f64>> = inst.inputs.iter().map(|(_, v)| v.clone()).collect();
        let dir = vec![1.0; reference(CheckedOp::Dense, &inst, &vals).len()];
        let n = numeric(CheckedOp::Dense, &inst, &dir, 1e-3);
        let doubled: Vec<f64> = n.iter().map(|x| 2.0 * x).collect();
        let err = norm(doubled.iter().zip(&n).map(|(a, b)| a - b))
            / (norm(doubled.iter().copied()) + norm(n.iter().copied()));
        assert!(err > 0.3);
    }

    #[test]
    fn every_op_passes_a_few_instances() {
        for op in CheckedOp::ALL {
            let r = check_op(op, 5, 1e-3, 7).unwrap();
            assert!(r.worst < 1e-3, "{}: {}", op.id(), r.worst);
        }
    }
}
