//! Central finite-difference checking of tape primitives.
//!
//! Each primitive is paired with an independent, naive f64 reference forward.
//! The oracle differences the reference with central steps of [`FD_STEP`] and
//! compares against the analytic f32 gradient from [`Tape::backward`],
//! coordinate by coordinate. Differencing the f64 twin instead of the f32
//! forward keeps the oracle's own noise far below the tolerance being
//! enforced. Coordinates sitting on a non-differentiable kink (ReLU at zero)
//! are excluded and counted rather than failed.

use std::fmt;

use crate::error::Result;
use crate::rng::StreamRng;
use crate::tape::{NodeId, Tape};

/// Central difference step.
pub const FD_STEP: f64 = 1e-3;

/// Relative error uses an absolute floor so that near-zero gradient
/// coordinates are compared at absolute tolerance `tolerance * REL_FLOOR`.
const REL_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrimitiveKind {
    MatmulNN,
    MatmulNT,
    MatmulTN,
    Add,
    AddBias,
    Mul,
    MulGate,
    ScaleConst,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    Softmax,
    SoftmaxCausal,
    LayerNorm,
    Relu,
    Sigmoid,
    Tanh,
    Embedding,
    Dropout,
    CrossEntropy,
    Sum,
    Mean,
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            PrimitiveKind::MatmulNN => "matmul",
            PrimitiveKind::MatmulNT => "matmul_nt",
            PrimitiveKind::MatmulTN => "matmul_tn",
            PrimitiveKind::Add => "add",
            PrimitiveKind::AddBias => "add_bias",
            PrimitiveKind::Mul => "mul",
            PrimitiveKind::MulGate => "mul_gate",
            PrimitiveKind::ScaleConst => "scale",
            PrimitiveKind::ConcatRows => "concat_rows",
            PrimitiveKind::ConcatCols => "concat_cols",
            PrimitiveKind::SliceRows => "slice_rows",
            PrimitiveKind::SliceCols => "slice_cols",
            PrimitiveKind::Softmax => "softmax",
            PrimitiveKind::SoftmaxCausal => "softmax_causal",
            PrimitiveKind::LayerNorm => "layer_norm",
            PrimitiveKind::Relu => "relu",
            PrimitiveKind::Sigmoid => "sigmoid",
            PrimitiveKind::Tanh => "tanh",
            PrimitiveKind::Embedding => "embedding",
            PrimitiveKind::Dropout => "dropout",
            PrimitiveKind::CrossEntropy => "cross_entropy",
            PrimitiveKind::Sum => "sum",
            PrimitiveKind::Mean => "mean",
        };
        f.write_str(name)
    }
}

pub fn all_primitives() -> Vec<PrimitiveKind> {
    use PrimitiveKind::*;
    vec![
        MatmulNN, MatmulNT, MatmulTN, Add, AddBias, Mul, MulGate, ScaleConst, ConcatRows,
        ConcatCols, SliceRows, SliceCols, Softmax, SoftmaxCausal, LayerNorm, Relu, Sigmoid, Tanh,
        Embedding, Dropout, CrossEntropy, Sum, Mean,
    ]
}

/// One input tensor of a check case.
pub struct CaseInput {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub differentiable: bool,
    /// Coordinates within 1.5 * FD_STEP of zero are excluded as kinks.
    pub kink_at_zero: bool,
}

/// A differentiable computation to check: the f32 tape construction plus an
/// independent f64 reference forward of the same function.
pub struct Case {
    pub inputs: Vec<CaseInput>,
    pub build: Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>,
    pub forward64: Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>,
    /// Weights reducing a non-scalar output to a scalar loss.
    pub weights: Vec<f32>,
    /// Central difference step. Deep compositions want a smaller step than
    /// the per-primitive default: the f64 reference keeps tiny steps clean.
    pub fd_step: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub kind: String,
    pub max_rel_err: f64,
    pub worst_input: usize,
    pub worst_coord: usize,
    pub excluded_kinks: usize,
    pub checked_coords: usize,
    pub tolerance: f64,
    pub pass: bool,
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} (max rel err {:.3e} at input {} coord {}, {} coords, {} kinks excluded)",
            self.kind,
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.worst_input,
            self.worst_coord,
            self.checked_coords,
            self.excluded_kinks,
        )
    }
}

fn rand_values(rng: &mut StreamRng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

// ---- f64 reference kernels -------------------------------------------------

pub mod ref64 {
    //! Naive f64 implementations used only as finite-difference oracles.

    pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0f64; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0f64; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[j * k + p];
                }
            }
        }
        c
    }

    pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0f64; k * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[p * n + j] += a[i * k + p] * b[i * n + j];
                }
            }
        }
        c
    }

    pub fn softmax_rows(x: &[f64], rows: usize, cols: usize, causal: bool) -> Vec<f64> {
        let mut out = vec![0f64; rows * cols];
        for r in 0..rows {
            let limit = if causal { r + 1 } else { cols };
            let row = &x[r * cols..r * cols + limit];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for j in 0..limit {
                out[r * cols + j] = exps[j] / sum;
            }
        }
        out
    }

    pub fn layer_norm(
        x: &[f64],
        gain: &[f64],
        bias: &[f64],
        rows: usize,
        cols: usize,
        eps: f64,
    ) -> Vec<f64> {
        let mut out = vec![0f64; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                out[r * cols + j] = (row[j] - mean) * inv * gain[j] + bias[j];
            }
        }
        out
    }

    pub fn cross_entropy_mean(logits: &[f64], targets: &[u32], rows: usize, cols: usize) -> f64 {
        let mut total = 0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = &logits[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[t as usize];
        }
        total / rows as f64
    }
}

/// Deterministic dropout mask, shared by the f32 op and the f64 reference.
fn dropout_mask(seed: u64, len: usize, p: f32) -> Vec<f32> {
    let keep = 1.0 / (1.0 - p);
    let mut rng = StreamRng::new(seed).stream("dropout");
    (0..len)
        .map(|_| if rng.next_f32() < p { 0.0 } else { keep })
        .collect()
}

/// Build the standard check case for a primitive. Shapes may be overridden
/// where that makes sense; `None` uses small defaults.
pub fn make_case(kind: PrimitiveKind, shapes: Option<&[Vec<usize>]>, seed: u64) -> Case {
    let mut rng = StreamRng::new(seed).stream("gradcheck");
    let dims = |idx: usize, default: &[usize]| -> Vec<usize> {
        shapes
            .and_then(|s| s.get(idx).cloned())
            .unwrap_or_else(|| default.to_vec())
    };
    let mk = |rng: &mut StreamRng, shape: Vec<usize>| {
        let values = rand_values(rng, numel(&shape));
        CaseInput {
            shape,
            values,
            differentiable: true,
            kink_at_zero: false,
        }
    };

    type Build = Box<dyn Fn(&mut Tape, &[NodeId]) -> Result<NodeId>>;
    type Fwd64 = Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>;

    let (inputs, build, forward64): (Vec<CaseInput>, Build, Fwd64) = match kind {
        PrimitiveKind::MatmulNN => {
            let a = mk(&mut rng, dims(0, &[2, 3]));
            let b = mk(&mut rng, dims(1, &[3, 2]));
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            (
                vec![a, b],
                Box::new(|t, ids| t.matmul(ids[0], ids[1])),
                Box::new(move |xs| ref64::matmul(&xs[0], &xs[1], m, k, n)),
            )
        }
        PrimitiveKind::MatmulNT => {
            let a = mk(&mut rng, dims(0, &[3, 4]));
            let b = mk(&mut rng, dims(1, &[2, 4]));
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[0];
            (
                vec![a, b],
                Box::new(|t, ids| t.matmul_nt(ids[0], ids[1])),
                Box::new(move |xs| ref64::matmul_nt(&xs[0], &xs[1], m, k, n)),
            )
        }
        PrimitiveKind::MatmulTN => {
            let a = mk(&mut rng, dims(0, &[3, 4]));
            let b = mk(&mut rng, dims(1, &[3, 2]));
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            (
                vec![a, b],
                Box::new(|t, ids| t.matmul_tn(ids[0], ids[1])),
                Box::new(move |xs| ref64::matmul_tn(&xs[0], &xs[1], m, k, n)),
            )
        }
        PrimitiveKind::Add => {
            let a = mk(&mut rng, dims(0, &[3, 4]));
            let b = mk(&mut rng, dims(0, &[3, 4]));
            (
                vec![a, b],
                Box::new(|t, ids| t.add(ids[0], ids[1])),
                Box::new(|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x + y).collect()),
            )
        }
        PrimitiveKind::AddBias => {
            let a = mk(&mut rng, dims(0, &[3, 4]));
            let n = a.shape[1];
            let b = mk(&mut rng, vec![n]);
            (
                vec![a, b],
                Box::new(|t, ids| t.add_bias(ids[0], ids[1])),
                Box::new(move |xs| {
                    xs[0]
                        .chunks(n)
                        .flat_map(|row| row.iter().zip(&xs[1]).map(|(x, y)| x + y))
                        .collect()
                }),
            )
        }
        PrimitiveKind::Mul => {
            let a = mk(&mut rng, dims(0, &[3, 4]));
            let b = mk(&mut rng, dims(0, &[3, 4]));
            (
                vec![a, b],
                Box::new(|t, ids| t.mul(ids[0], ids[1])),
                Box::new(|xs| xs[0].iter().zip(&xs[1]).map(|(x, y)| x * y).collect()),
            )
        }
        PrimitiveKind::MulGate => {
            let a = mk(&mut rng, dims(0, &[3, 4]));
            let g = mk(&mut rng, vec![1]);
            (
                vec![a, g],
                Box::new(|t, ids| t.mul_gate(ids[0], ids[1])),
                Box::new(|xs| xs[0].iter().map(|x| x * xs[1][0]).collect()),
            )
        }
        PrimitiveKind::ScaleConst => {
            let a = mk(&mut rng, dims(0, &[3, 4]));
            (
                vec![a],
                Box::new(|t, ids| t.scale(ids[0], 0.7313)),
                Box::new(|xs| xs[0].iter().map(|x| x * f64::from(0.7313f32)).collect()),
            )
        }
        PrimitiveKind::ConcatRows => {
            let a = mk(&mut rng, dims(0, &[2, 3]));
            let b = mk(&mut rng, dims(1, &[3, 3]));
            (
                vec![a, b],
                Box::new(|t, ids| t.concat_rows(&[ids[0], ids[1]])),
                Box::new(|xs| xs[0].iter().chain(&xs[1]).copied().collect()),
            )
        }
        PrimitiveKind::ConcatCols => {
            let a = mk(&mut rng, dims(0, &[3, 2]));
            let b = mk(&mut rng, dims(1, &[3, 3]));
            let (m, wa, wb) = (a.shape[0], a.shape[1], b.shape[1]);
            (
                vec![a, b],
                Box::new(|t, ids| t.concat_cols(&[ids[0], ids[1]])),
                Box::new(move |xs| {
                    let mut out = Vec::with_capacity(m * (wa + wb));
                    for r in 0..m {
                        out.extend_from_slice(&xs[0][r * wa..(r + 1) * wa]);
                        out.extend_from_slice(&xs[1][r * wb..(r + 1) * wb]);
                    }
                    out
                }),
            )
        }
        PrimitiveKind::SliceRows => {
            let a = mk(&mut rng, dims(0, &[5, 3]));
            let n = a.shape[1];
            (
                vec![a],
                Box::new(|t, ids| t.slice_rows(ids[0], 1, 3)),
                Box::new(move |xs| xs[0][n..4 * n].to_vec()),
            )
        }
        PrimitiveKind::SliceCols => {
            let a = mk(&mut rng, dims(0, &[3, 5]));
            let n = a.shape[1];
            (
                vec![a],
                Box::new(|t, ids| t.slice_cols(ids[0], 1, 2)),
                Box::new(move |xs| {
                    xs[0]
                        .chunks(n)
                        .flat_map(|row| row[1..3].iter().copied())
                        .collect()
                }),
            )
        }
        PrimitiveKind::Softmax => {
            let a = mk(&mut rng, dims(0, &[4, 5]));
            let (m, n) = (a.shape[0], a.shape[1]);
            (
                vec![a],
                Box::new(|t, ids| t.softmax(ids[0], false)),
                Box::new(move |xs| ref64::softmax_rows(&xs[0], m, n, false)),
            )
        }
        PrimitiveKind::SoftmaxCausal => {
            let a = mk(&mut rng, dims(0, &[5, 5]));
            let m = a.shape[0];
            (
                vec![a],
                Box::new(|t, ids| t.softmax(ids[0], true)),
                Box::new(move |xs| ref64::softmax_rows(&xs[0], m, m, true)),
            )
        }
        PrimitiveKind::LayerNorm => {
            let shape = dims(0, &[3, 6]);
            let (m, n) = (shape[0], shape[1]);
            let a = mk(&mut rng, shape);
            let g = mk(&mut rng, vec![n]);
            let b = mk(&mut rng, vec![n]);
            (
                vec![a, g, b],
                Box::new(|t, ids| t.layer_norm(ids[0], ids[1], ids[2], 1e-5)),
                Box::new(move |xs| {
                    ref64::layer_norm(&xs[0], &xs[1], &xs[2], m, n, f64::from(1e-5f32))
                }),
            )
        }
        PrimitiveKind::Relu => {
            let mut a = mk(&mut rng, dims(0, &[4, 5]));
            a.kink_at_zero = true;
            (
                vec![a],
                Box::new(|t, ids| t.relu(ids[0])),
                Box::new(|xs| xs[0].iter().map(|&x| x.max(0.0)).collect()),
            )
        }
        PrimitiveKind::Sigmoid => {
            let a = mk(&mut rng, dims(0, &[4, 5]));
            (
                vec![a],
                Box::new(|t, ids| t.sigmoid(ids[0])),
                Box::new(|xs| xs[0].iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect()),
            )
        }
        PrimitiveKind::Tanh => {
            let a = mk(&mut rng, dims(0, &[4, 5]));
            (
                vec![a],
                Box::new(|t, ids| t.tanh_op(ids[0])),
                Box::new(|xs| xs[0].iter().map(|&x| x.tanh()).collect()),
            )
        }
        PrimitiveKind::Embedding => {
            let table = mk(&mut rng, dims(0, &[7, 4]));
            let w = table.shape[1];
            let ids: Vec<u32> = vec![2, 5, 2, 0, 6];
            let ids2 = ids.clone();
            (
                vec![table],
                Box::new(move |t, nids| t.embedding(nids[0], &ids)),
                Box::new(move |xs| {
                    ids2.iter()
                        .flat_map(|&i| xs[0][i as usize * w..(i as usize + 1) * w].to_vec())
                        .collect()
                }),
            )
        }
        PrimitiveKind::Dropout => {
            let a = mk(&mut rng, dims(0, &[4, 5]));
            let len = a.values.len();
            let mask_seed = rng.next_u64();
            let mask64: Vec<f64> = dropout_mask(mask_seed, len, 0.3)
                .into_iter()
                .map(f64::from)
                .collect();
            (
                vec![a],
                Box::new(move |t, ids| {
                    let mut mask_rng = StreamRng::new(mask_seed).stream("dropout");
                    t.dropout(ids[0], 0.3, &mut mask_rng)
                }),
                Box::new(move |xs| xs[0].iter().zip(&mask64).map(|(x, m)| x * m).collect()),
            )
        }
        PrimitiveKind::CrossEntropy => {
            let shape = dims(0, &[4, 7]);
            let (rows, cols) = (shape[0], shape[1]);
            let a = mk(&mut rng, shape);
            let targets: Vec<u32> = (0..rows).map(|_| rng.below(cols as u64) as u32).collect();
            let targets2 = targets.clone();
            (
                vec![a],
                Box::new(move |t, ids| t.cross_entropy_mean(ids[0], &targets)),
                Box::new(move |xs| vec![ref64::cross_entropy_mean(&xs[0], &targets2, rows, cols)]),
            )
        }
        PrimitiveKind::Sum => {
            let a = mk(&mut rng, dims(0, &[4, 5]));
            (
                vec![a],
                Box::new(|t, ids| t.sum(ids[0])),
                Box::new(|xs| vec![xs[0].iter().sum()]),
            )
        }
        PrimitiveKind::Mean => {
            let a = mk(&mut rng, dims(0, &[4, 5]));
            (
                vec![a],
                Box::new(|t, ids| t.mean(ids[0])),
                Box::new(|xs| vec![xs[0].iter().sum::<f64>() / xs[0].len() as f64]),
            )
        }
    };

    // Probe the output size once to fix the reduction weights.
    let mut probe = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|inp| probe.constant(&inp.shape, inp.values.clone()))
        .collect();
    let out = (build)(&mut probe, &ids).expect("case must build");
    let out_len = probe.values(out).len();
    let weights = rand_values(&mut rng, out_len);

    Case {
        inputs,
        build,
        forward64,
        weights,
        fd_step: FD_STEP,
    }
}

fn eval_loss64(case: &Case, values: &[Vec<f64>]) -> f64 {
    let out = (case.forward64)(values);
    out.iter()
        .zip(&case.weights)
        .map(|(&o, &w)| o * f64::from(w))
        .sum()
}

/// Check one case: analytic f32 gradients against central differences of the
/// f64 reference forward.
pub fn check_case(case: &Case, kind_label: &str, tolerance: f64) -> Result<GradCheckReport> {
    let total_params: usize = case.inputs.iter().map(|i| i.values.len()).sum();
    assert!(
        total_params < 10_000,
        "finite differencing every coordinate needs < 1e4 parameters, got {total_params}"
    );

    // Analytic side: one tape, loss = sum(out * weights), backward.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = case
        .inputs
        .iter()
        .map(|inp| tape.leaf(&inp.shape, inp.values.clone(), inp.differentiable))
        .collect();
    let out = (case.build)(&mut tape, &ids)?;
    let wnode = tape.constant(tape.shape(out).to_vec().as_slice(), case.weights.clone());
    let weighted = tape.mul(out, wnode)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;

    // Sanity: the reference forward must agree with the f32 forward.
    let base64: Vec<Vec<f64>> = case
        .inputs
        .iter()
        .map(|i| i.values.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let ref_out = (case.forward64)(&base64);
    for (a, b) in tape.values(out).iter().zip(&ref_out) {
        assert!(
            (f64::from(*a) - b).abs() <= 1e-4 * (1.0 + b.abs()),
            "reference forward diverges from the checked forward: {a} vs {b}"
        );
    }

    let h = case.fd_step;
    let mut max_rel = 0f64;
    let (mut worst_input, mut worst_coord) = (0usize, 0usize);
    let mut excluded = 0usize;
    let mut checked = 0usize;

    for (i, inp) in case.inputs.iter().enumerate() {
        if !inp.differentiable {
            continue;
        }
        let analytic = grads
            .get(ids[i])
            .expect("differentiable input must receive a gradient");
        for c in 0..inp.values.len() {
            if inp.kink_at_zero && f64::from(inp.values[c].abs()) <= 1.5 * h {
                excluded += 1;
                continue;
            }
            let mut plus = base64.clone();
            plus[i][c] += h;
            let mut minus = base64.clone();
            minus[i][c] -= h;
            let fd = (eval_loss64(case, &plus) - eval_loss64(case, &minus)) / (2.0 * h);
            let a = f64::from(analytic[c]);
            let rel = (a - fd).abs() / (a.abs().max(fd.abs())).max(REL_FLOOR);
            checked += 1;
            if rel > max_rel {
                max_rel = rel;
                worst_input = i;
                worst_coord = c;
            }
        }
    }

    Ok(GradCheckReport {
        kind: kind_label.to_string(),
        max_rel_err: max_rel,
        worst_input,
        worst_coord,
        excluded_kinks: excluded,
        checked_coords: checked,
        tolerance,
        pass: max_rel < tolerance,
    })
}

/// Finite-difference check of one primitive with default (or given) shapes.
/// Deterministic given the seed; the report includes the worst coordinate.
pub fn grad_check(
    kind: PrimitiveKind,
    shapes: Option<&[Vec<usize>]>,
    tolerance: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let case = make_case(kind, shapes, seed);
    check_case(&case, &kind.to_string(), tolerance)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes_at_default_shapes() {
        for kind in all_primitives() {
            let report = grad_check(kind, None, 1e-3, 42).expect("check runs");
            assert!(report.pass, "{report}");
        }
    }

    #[test]
    fn matmul_spec_shapes_pass() {
        let shapes = vec![vec![2, 3], vec![3, 2]];
        let report = grad_check(PrimitiveKind::MatmulNN, Some(&shapes), 1e-3, 7).unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn cross_entropy_spec_shapes_pass() {
        let shapes = vec![vec![4, 7]];
        let report = grad_check(PrimitiveKind::CrossEntropy, Some(&shapes), 1e-3, 7).unwrap();
        assert!(report.pass, "{report}");
    }

    #[test]
    fn relu_kink_coordinate_is_excluded_not_failed() {
        let mut case = make_case(PrimitiveKind::Relu, None, 3);
        case.inputs[0].values[4] = 0.0;
        let report = check_case(&case, "relu", 1e-3).unwrap();
        assert!(report.pass, "{report}");
        assert!(report.excluded_kinks >= 1);
    }

    #[test]
    fn composition_matches_end_to_end_differences() {
        // layer_norm(matmul(a, b)) with gain/bias: the chain rule through two
        // primitives checked purely by forward differencing.
        let mut rng = StreamRng::new(9).stream("compose");
        let mk = |rng: &mut StreamRng, shape: Vec<usize>| CaseInput {
            values: (0..shape.iter().product::<usize>())
                .map(|_| rng.uniform(-1.0, 1.0))
                .collect(),
            shape,
            differentiable: true,
            kink_at_zero: false,
        };
        let inputs = vec![
            mk(&mut rng, vec![3, 4]),
            mk(&mut rng, vec![4, 5]),
            mk(&mut rng, vec![5]),
            mk(&mut rng, vec![5]),
        ];
        let weights = (0..15).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let case = Case {
            inputs,
            build: Box::new(|t, ids| {
                let mm = t.matmul(ids[0], ids[1])?;
                t.layer_norm(mm, ids[2], ids[3], 1e-5)
            }),
            forward64: Box::new(|xs| {
                let mm = ref64::matmul(&xs[0], &xs[1], 3, 4, 5);
                ref64::layer_norm(&mm, &xs[2], &xs[3], 3, 5, f64::from(1e-5f32))
            }),
            weights,
            fd_step: 1e-5,
        };
        let report = check_case(&case, "layer_norm(matmul)", 1e-3).unwrap();
        assert!(report.pass, "{report}");
    }
}
