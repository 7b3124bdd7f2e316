//! In-context n-th order Markov predictor with Laplace smoothing, plus the
//! exhaustive (order, smoothing) sweep used as the tuned baseline.
//!
//! The predictor is trained on nothing but the evaluation context itself:
//! counts come from every k-gram occurrence within the context window, and
//! the query gram is the window's last k tokens.

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const VOCAB: usize = 256;
/// Sweep grid: orders 0-5.
pub const ORDERS: [usize; 6] = [0, 1, 2, 3, 4, 5];
/// Sweep grid: smoothing values, largest first so argmin ties prefer larger.
pub const LAMBDAS: [f64; 5] = [1.0, 0.1, 0.01, 1e-4, 1e-6];

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MarkovConfig {
    pub order: usize,
    pub lambda: f64,
}

/// Counts of `gram -> next` transitions for the query gram within a context.
fn query_counts(context: &[u8], k: usize) -> (u64, [u64; VOCAB]) {
    let gram = &context[context.len() - k..];
    let mut total = 0u64;
    let mut per_token = [0u64; VOCAB];
    for i in k..context.len() {
        if &context[i - k..i] == gram {
            total += 1;
            per_token[context[i] as usize] += 1;
        }
    }
    (total, per_token)
}

/// Laplace-smoothed next-token distribution given the context's last k tokens.
pub fn predict_in_context(context: &[u8], k: usize, lambda: f64) -> Result<Vec<f64>> {
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    if context.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "context of {} tokens is too short for order {k}",
            context.len()
        )));
    }
    let (total, per_token) = query_counts(context, k);
    let denom = total as f64 + VOCAB as f64 * lambda;
    Ok(per_token
        .iter()
        .map(|&c| (c as f64 + lambda) / denom)
        .collect())
}

/// -log2 of the smoothed probability of `target` after `context`.
pub fn bits_in_context(context: &[u8], target: u8, k: usize, lambda: f64) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::InvalidArgument("lambda must be positive".into()));
    }
    if context.len() <= k {
        return Err(Error::InvalidArgument(format!(
            "context of {} tokens is too short for order {k}",
            context.len()
        )));
    }
    let (total, per_token) = query_counts(context, k);
    let p = (per_token[target as usize] as f64 + lambda) / (total as f64 + VOCAB as f64 * lambda);
    Ok(-p.log2())
}

/// Slice start positions for the shared evaluation protocol: uniform over
/// [0, len - ctx], so the whole stream is reachable.
pub fn sample_slice_starts(
    stream_len: usize,
    ctx: usize,
    count: usize,
    rng: &mut StreamRng,
) -> Result<Vec<usize>> {
    if stream_len <= ctx {
        return Err(Error::InvalidArgument(format!(
            "stream of {stream_len} tokens is shorter than the context length {ctx}"
        )));
    }
    let span = (stream_len - ctx + 1) as u64;
    Ok((0..count).map(|_| rng.below(span) as usize).collect())
}

/// Mean bits/char of the Markov predictor over the given slices. Each slice
/// is `ctx` tokens: the model is trained in-context on the first ctx-1 and
/// scored on the last.
pub fn eval_on_slices(
    stream: &[u8],
    starts: &[usize],
    ctx: usize,
    k: usize,
    lambda: f64,
) -> Result<f64> {
    let mut total = 0f64;
    for &s in starts {
        let slice = &stream[s..s + ctx];
        total += bits_in_context(&slice[..ctx - 1], slice[ctx - 1], k, lambda)?;
    }
    Ok(total / starts.len() as f64)
}

/// Mean bits/char over freshly sampled slices.
pub fn eval_markov(
    stream: &[u8],
    ctx: usize,
    slice_count: usize,
    k: usize,
    lambda: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    let starts = sample_slice_starts(stream.len(), ctx, slice_count, rng)?;
    eval_on_slices(stream, &starts, ctx, k, lambda)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepResult {
    pub best: MarkovConfig,
    pub best_bits: f64,
    /// Every (order, lambda, bits) cell of the grid.
    pub grid: Vec<(usize, f64, f64)>,
}

/// Exhaustive sweep over orders 0-5 and the smoothing grid, all cells scored
/// on one shared slice sample for variance reduction. Ties break toward the
/// smaller order, then the larger smoothing value.
pub fn sweep(stream: &[u8], ctx: usize, slice_count: usize, rng: &mut StreamRng) -> Result<SweepResult> {
    let starts = sample_slice_starts(stream.len(), ctx, slice_count, rng)?;
    let mut grid = Vec::with_capacity(ORDERS.len() * LAMBDAS.len());
    let mut best: Option<(MarkovConfig, f64)> = None;
    for &k in ORDERS.iter() {
        // One counting pass per (slice, order) serves every lambda.
        let mut per_lambda = [0f64; LAMBDAS.len()];
        for &s in &starts {
            let slice = &stream[s..s + ctx];
            let context = &slice[..ctx - 1];
            let target = slice[ctx - 1];
            if context.len() <= k {
                return Err(Error::InvalidArgument(format!(
                    "context length {ctx} too short for order {k}"
                )));
            }
            let (total, per_token) = query_counts(context, k);
            let c = per_token[target as usize] as f64;
            for (li, &lambda) in LAMBDAS.iter().enumerate() {
                let p = (c + lambda) / (total as f64 + VOCAB as f64 * lambda);
                per_lambda[li] -= p.log2();
            }
        }
        for (li, &lambda) in LAMBDAS.iter().enumerate() {
            let bits = per_lambda[li] / starts.len() as f64;
            grid.push((k, lambda, bits));
            let better = match &best {
                None => true,
                Some((_, b)) => bits < *b,
            };
            if better {
                best = Some((MarkovConfig { order: k, lambda }, bits));
            }
        }
    }
    let (best, best_bits) = best.expect("non-empty grid");
    Ok(SweepResult {
        best,
        best_bits,
        grid,
    })
}
