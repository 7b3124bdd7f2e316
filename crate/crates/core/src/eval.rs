//! Zero-shot evaluation: bits/char of a model (or any scorer) on evaluation
//! streams, and comparison reports against the tuned in-context Markov
//! baseline.
//!
//! The protocol: sample slices of the context length from the stream at
//! uniform positions, feed each slice's first ctx-1 tokens to the predictor,
//! and average -log2 of the probability it assigns to the slice's last
//! token. Model and Markov rows in a report share identically seeded slices.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::data::{EvalStream, Role};
use crate::error::{Error, Result};
use crate::markov::{self, MarkovConfig};
use crate::model::{Mode, Transformer};
use crate::ops;
use crate::rng::StreamRng;
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct EvalProtocol {
    pub slice_count: usize,
    pub ctx: usize,
    /// Slices per forward pass when scoring a model.
    pub batch: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        // Desk-scale default; the reference protocol uses 10_000 slices.
        EvalProtocol {
            slice_count: 2000,
            ctx: 512,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EvalResult {
    pub bits: f64,
    pub stderr: f64,
    pub slices: usize,
}

/// Evaluate an arbitrary scorer under the slice protocol. The scorer maps
/// batches of (stream position, slice) to bits for each slice's last token.
pub fn eval_scored<F>(
    stream: &EvalStream,
    proto: &EvalProtocol,
    rng: &mut StreamRng,
    mut scorer: F,
) -> Result<EvalResult>
where
    F: FnMut(&[(usize, &[u8])]) -> Result<Vec<f64>>,
{
    let starts = markov::sample_slice_starts(stream.tokens.len(), proto.ctx, proto.slice_count, rng)?;
    let mut bits = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(proto.batch.max(1)) {
        let slices: Vec<(usize, &[u8])> = chunk
            .iter()
            .map(|&s| (s, &stream.tokens[s..s + proto.ctx]))
            .collect();
        let scored = scorer(&slices)?;
        if scored.len() != slices.len() {
            return Err(Error::InvalidArgument(format!(
                "scorer returned {} values for {} slices",
                scored.len(),
                slices.len()
            )));
        }
        bits.extend(scored);
    }
    Ok(summarize(&bits))
}

fn summarize(bits: &[f64]) -> EvalResult {
    let n = bits.len() as f64;
    let mean = bits.iter().sum::<f64>() / n;
    let var = bits.iter().map(|b| (b - mean) * (b - mean)).sum::<f64>() / n.max(2.0);
    EvalResult {
        bits: mean,
        stderr: (var / n).sqrt(),
        slices: bits.len(),
    }
}

/// Mean bits/char the model assigns to the last token of each slice,
/// eval-mode forward, scored in f64.
pub fn eval_model(
    model: &Transformer,
    stream: &EvalStream,
    proto: &EvalProtocol,
    rng: &mut StreamRng,
) -> Result<EvalResult> {
    if proto.ctx < 2 || proto.ctx - 1 > model.cfg.context {
        return Err(Error::InvalidArgument(format!(
            "eval context {} incompatible with model context {}",
            proto.ctx, model.cfg.context
        )));
    }
    let freeze = vec![false; model.params.len()];
    eval_scored(stream, proto, rng, |slices| {
        let tokens: Vec<Vec<u8>> = slices
            .iter()
            .map(|(_, s)| s[..proto.ctx - 1].to_vec())
            .collect();
        let mut tape = Tape::new();
        let mut dummy = StreamRng::new(0);
        let (logits, _) = model.forward(&mut tape, &tokens, Mode::Eval, &mut dummy, &freeze)?;
        let lv = tape.values(logits);
        let t = proto.ctx - 1;
        Ok(slices
            .iter()
            .enumerate()
            .map(|(i, (_, s))| {
                let row = &lv[(i * t + t - 1) * 256..(i * t + t) * 256];
                ops::bits_for_target(row, s[proto.ctx - 1] as usize)
            })
            .collect())
    })
}

/// One row of an evaluation report.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub dataset: String,
    pub role: Role,
    pub model_bits: f64,
    pub model_stderr: f64,
    pub markov_bits: f64,
    pub markov: MarkovConfig,
    pub slice_count: usize,
    pub ctx: usize,
    pub instances: u64,
}

/// Cached sweep winners per (dataset, context length): hyperparameters are
/// tuned once per dataset and reused for every checkpoint.
#[derive(Debug, Clone, Default)]
pub struct SweepCache {
    entries: HashMap<(String, usize), (MarkovConfig, f64)>,
}

impl SweepCache {
    pub fn get(&self, dataset: &str, ctx: usize) -> Option<(MarkovConfig, f64)> {
        self.entries.get(&(dataset.to_string(), ctx)).copied()
    }

    pub fn insert(&mut self, dataset: &str, ctx: usize, cfg: MarkovConfig, bits: f64) {
        self.entries.insert((dataset.to_string(), ctx), (cfg, bits));
    }

    pub fn to_csv(&self) -> String {
        let mut rows: Vec<_> = self.entries.iter().collect();
        rows.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::from("dataset,ctx,order,lambda,bits\n");
        for ((dataset, ctx), (cfg, bits)) in rows {
            let _ = writeln!(out, "{dataset},{ctx},{},{:e},{bits:.6}", cfg.order, cfg.lambda);
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<SweepCache> {
        let mut cache = SweepCache::default();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(Error::Parse(format!("sweep cache line {}: bad row", i + 1)));
            }
            let parse_err = |what: &str| Error::Parse(format!("sweep cache line {}: bad {what}", i + 1));
            cache.insert(
                fields[0],
                fields[1].parse().map_err(|_| parse_err("ctx"))?,
                MarkovConfig {
                    order: fields[2].parse().map_err(|_| parse_err("order"))?,
                    lambda: fields[3].parse().map_err(|_| parse_err("lambda"))?,
                },
                fields[4].parse().map_err(|_| parse_err("bits"))?,
            );
        }
        Ok(cache)
    }
}

/// Compare the model against the tuned Markov baseline on every stream.
/// Slice samples are shared between the two scorers per dataset; missing
/// sweep winners are computed and cached.
pub fn compare(
    model: &Transformer,
    streams: &[(EvalStream, Role)],
    cache: &mut SweepCache,
    proto: &EvalProtocol,
    eval_rng_base: &StreamRng,
    instances: u64,
) -> Result<Vec<CompareRow>> {
    let mut rows = Vec::with_capacity(streams.len());
    for (stream, role) in streams {
        let markov_cfg = match cache.get(&stream.name, proto.ctx) {
            Some((cfg, _)) => cfg,
            None => {
                let mut sweep_rng = eval_rng_base.stream("markov-sweep").stream(&stream.name);
                let result = markov::sweep(&stream.tokens, proto.ctx, proto.slice_count, &mut sweep_rng)?;
                cache.insert(&stream.name, proto.ctx, result.best, result.best_bits);
                result.best
            }
        };
        // Identically seeded slices for both scorers.
        let slice_rng = eval_rng_base.stream("slices").stream(&stream.name);
        let model_result = eval_model(model, stream, proto, &mut slice_rng.clone())?;
        let markov_result = eval_scored(stream, proto, &mut slice_rng.clone(), |slices| {
            slices
                .iter()
                .map(|(_, s)| {
                    markov::bits_in_context(
                        &s[..proto.ctx - 1],
                        s[proto.ctx - 1],
                        markov_cfg.order,
                        markov_cfg.lambda,
                    )
                })
                .collect()
        })?;
        rows.push(CompareRow {
            dataset: stream.name.clone(),
            role: *role,
            model_bits: model_result.bits,
            model_stderr: model_result.stderr,
            markov_bits: markov_result.bits,
            markov: markov_cfg,
            slice_count: proto.slice_count,
            ctx: proto.ctx,
            instances,
        });
    }
    Ok(rows)
}

/// CSV rendering of a report (deterministic formatting).
pub fn report_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "dataset,split,model_bits,model_stderr,markov_bits,markov_order,markov_lambda,slices,ctx,instances\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{},{:e},{},{},{}",
            r.dataset,
            r.role,
            r.model_bits,
            r.model_stderr,
            r.markov_bits,
            r.markov.order,
            r.markov.lambda,
            r.slice_count,
            r.ctx,
            r.instances
        );
    }
    out
}

/// Human-readable table of a report.
pub fn report_table(rows: &[CompareRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<10} {:<11} {:>12} {:>8} {:>12} {:>14}",
        "dataset", "split", "model b/c", "stderr", "markov b/c", "markov (k, l)"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<10} {:<11} {:>12.4} {:>8.4} {:>12.4} {:>8} {:>5.0e}",
            r.dataset, r.role.to_string(), r.model_bits, r.model_stderr, r.markov_bits, r.markov.order, r.markov.lambda
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_stream, DatasetSpec};
    use crate::model::{build_config, Transformer};

    fn uniform_model() -> Transformer {
        let mut cfg = build_config(16, Some(1)).unwrap();
        cfg.context = 512;
        let mut model = Transformer::init(cfg, &StreamRng::new(3)).unwrap();
        let hw = model.param_index("head_w").unwrap();
        let hb = model.param_index("head_b").unwrap();
        model.params[hw].data.iter_mut().for_each(|v| *v = 0.0);
        model.params[hb].data.iter_mut().for_each(|v| *v = 0.0);
        model
    }

    #[test]
    fn uniform_logits_score_exactly_eight_bits() {
        let model = uniform_model();
        let spec = DatasetSpec::builtin("bits").unwrap();
        let mut srng = StreamRng::new(7).stream("stream");
        let stream = build_stream(&spec, &mut srng, 20_000).unwrap();
        let proto = EvalProtocol {
            slice_count: 50,
            ctx: 512,
            batch: 8,
        };
        let mut erng = StreamRng::new(7).stream("eval");
        let result = eval_model(&model, &stream, &proto, &mut erng).unwrap();
        assert!(
            (result.bits - 8.0).abs() < 1e-9,
            "uniform model scored {}",
            result.bits
        );
        assert!(result.stderr.abs() < 1e-9);
    }

    #[test]
    fn slices_reach_into_the_stream_and_include_delimiters() {
        let spec = DatasetSpec::builtin("dyck").unwrap();
        let mut srng = StreamRng::new(9).stream("stream");
        let stream = build_stream(&spec, &mut srng, 110_000).unwrap();
        let proto = EvalProtocol {
            slice_count: 200,
            ctx: 512,
            batch: 16,
        };
        let mut seen_delimiter = false;
        let mut max_start = 0usize;
        let mut erng = StreamRng::new(1).stream("eval");
        eval_scored(&stream, &proto, &mut erng, |slices| {
            for (start, s) in slices {
                max_start = max_start.max(*start);
                if s.contains(&crate::data::DELIMITER) {
                    seen_delimiter = true;
                }
            }
            Ok(vec![0.0; slices.len()])
        })
        .unwrap();
        assert!(seen_delimiter, "delimiters should appear inside slices");
        assert!(max_start > stream.tokens.len() / 2, "slices should reach deep into the stream");
    }

    #[test]
    fn compare_produces_one_row_per_dataset_and_is_deterministic() {
        let model = uniform_model();
        let mut streams = Vec::new();
        for name in ["bits", "bitsflip"] {
            let spec = DatasetSpec::builtin(name).unwrap();
            let mut srng = StreamRng::new(11).stream(name);
            let stream = build_stream(&spec, &mut srng, 20_000).unwrap();
            streams.push((stream, spec.role));
        }
        let proto = EvalProtocol {
            slice_count: 40,
            ctx: 256,
            batch: 8,
        };
        let base = StreamRng::new(5);
        let mut cache = SweepCache::default();
        let rows = compare(&model, &streams, &mut cache, &proto, &base, 0).unwrap();
        assert_eq!(rows.len(), 2);
        for r in &rows {
            assert!((r.model_bits - 8.0).abs() < 1e-9);
            assert!(r.markov_bits <= 8.0 + 1e-6);
        }
        let mut cache2 = SweepCache::from_csv(&cache.to_csv()).unwrap();
        let rows2 = compare(&model, &streams, &mut cache2, &proto, &base, 0).unwrap();
        assert_eq!(report_csv(&rows), report_csv(&rows2));
    }

    #[test]
    fn sweep_cache_round_trips() {
        let mut cache = SweepCache::default();
        cache.insert("dyck", 512, MarkovConfig { order: 2, lambda: 1e-4 }, 1.25);
        cache.insert("bits", 256, MarkovConfig { order: 0, lambda: 1.0 }, 3.5);
        let csv = cache.to_csv();
        let back = SweepCache::from_csv(&csv).unwrap();
        let (cfg, bits) = back.get("dyck", 512).unwrap();
        assert_eq!(cfg.order, 2);
        assert_eq!(cfg.lambda, 1e-4);
        assert_eq!(bits, 1.25);
        assert!(back.get("dyck", 256).is_none());
    }
}
