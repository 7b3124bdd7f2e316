//! Downstream evaluation data: synthetic generators and a byte-corpus loader,
//! assembled into delimiter-joined evaluation streams.
//!
//! Every generator produces ASCII units; units are concatenated with a single
//! `|` delimiter (except `bitsflip`, which has no delimiter) until the stream
//! exceeds the minimum length. Real corpora are loaded as raw bytes, one token
//! per byte.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const DELIMITER: u8 = b'|';
pub const MIN_STREAM_LEN: usize = 100_000;

/// Guard against runaway grammar or automaton units.
const MAX_UNIT_LEN: usize = 8192;
const MAX_UNIT_RETRIES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Validation,
    Test,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Validation => f.write_str("validation"),
            Role::Test => f.write_str("test"),
        }
    }
}

/// A fully assembled evaluation stream of tokens in [0, 255].
#[derive(Debug, Clone)]
pub struct EvalStream {
    pub name: String,
    pub tokens: Vec<u8>,
    /// Human-readable description of where the stream came from.
    pub provenance: String,
}

#[derive(Debug, Clone)]
pub enum DatasetKind {
    /// Decimal digits of 256 consecutive integers, starting uniformly in
    /// [0, 2^24 - 256].
    Champ,
    /// Balanced bracket words.
    Dyck { depth_cap: usize },
    /// Weighted production grammar.
    Grammar(Grammar),
    /// Labeled automaton walked with uniform transition probabilities.
    Automaton(Automaton),
    /// 10 random bits, then xor / and / or / eq of the two 5-bit halves.
    Bits,
    /// 6 random bits followed by the same bits reversed; no delimiter.
    BitsFlip,
    /// Raw bytes from a file.
    File {
        path: PathBuf,
        max_bytes: Option<usize>,
    },
}

#[derive(Debug, Clone)]
pub struct DatasetSpec {
    pub name: String,
    pub role: Role,
    pub kind: DatasetKind,
}

impl DatasetSpec {
    /// The eight built-in synthetic datasets.
    pub fn builtin(name: &str) -> Result<DatasetSpec> {
        let (role, kind) = match name {
            "champ" => (Role::Validation, DatasetKind::Champ),
            "dyck" => (Role::Validation, DatasetKind::Dyck { depth_cap: 16 }),
            "ndfa" => (
                Role::Validation,
                DatasetKind::Automaton(Automaton::parse(NDFA_DEFAULT)?),
            ),
            "aut" => (
                Role::Test,
                DatasetKind::Automaton(Automaton::parse(AUT_DEFAULT)?),
            ),
            "toy" => (
                Role::Validation,
                DatasetKind::Grammar(Grammar::parse(TOY_DEFAULT)?),
            ),
            "toy2" => (
                Role::Test,
                DatasetKind::Grammar(Grammar::parse(TOY2_DEFAULT)?),
            ),
            "bits" => (Role::Test, DatasetKind::Bits),
            "bitsflip" => (Role::Test, DatasetKind::BitsFlip),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown dataset '{other}' (expected champ, dyck, ndfa, aut, toy, toy2, bits, bitsflip, or a file path)"
                )))
            }
        };
        Ok(DatasetSpec {
            name: name.to_string(),
            role,
            kind,
        })
    }

    pub fn builtin_names() -> [&'static str; 8] {
        ["champ", "dyck", "ndfa", "aut", "toy", "toy2", "bits", "bitsflip"]
    }

    pub fn from_file(path: impl Into<PathBuf>, max_bytes: Option<usize>) -> DatasetSpec {
        let path = path.into();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "file".to_string());
        DatasetSpec {
            name,
            role: Role::Test,
            kind: DatasetKind::File { path, max_bytes },
        }
    }
}

// ---- unit generators --------------------------------------------------------

const CHAMP_INTEGERS: u64 = 256;
const CHAMP_RANGE: u64 = 16_777_216;

fn champ_unit(rng: &mut StreamRng) -> Vec<u8> {
    let start = rng.below(CHAMP_RANGE - CHAMP_INTEGERS + 1);
    let mut out = Vec::with_capacity(2048);
    for i in 0..CHAMP_INTEGERS {
        out.extend_from_slice((start + i).to_string().as_bytes());
    }
    out
}

fn dyck_unit(rng: &mut StreamRng, depth_cap: usize) -> Vec<u8> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    loop {
        let open = if depth == 0 {
            true
        } else if depth >= depth_cap {
            false
        } else {
            rng.next_f32() < 0.5
        };
        if open {
            out.push(b'(');
            depth += 1;
        } else {
            out.push(b')');
            depth -= 1;
            if depth == 0 {
                return out;
            }
        }
    }
}

/// Last 20 characters of a bits unit from its first 10: xor, and, or, eq.
fn bits_combine(first10: &[u8]) -> Vec<u8> {
    debug_assert_eq!(first10.len(), 10);
    let bit = |c: u8| c - b'0';
    let chr = |b: u8| b + b'0';
    let mut out = Vec::with_capacity(20);
    for op in 0..4 {
        for i in 0..5 {
            let a = bit(first10[i]);
            let b = bit(first10[5 + i]);
            let r = match op {
                0 => a ^ b,
                1 => a & b,
                2 => a | b,
                _ => u8::from(a == b),
            };
            out.push(chr(r));
        }
    }
    out
}

fn bits_unit(rng: &mut StreamRng) -> Vec<u8> {
    let mut unit: Vec<u8> = (0..10).map(|_| b'0' + (rng.next_u64() & 1) as u8).collect();
    let tail = bits_combine(&unit);
    unit.extend_from_slice(&tail);
    unit
}

fn bitsflip_unit(rng: &mut StreamRng) -> Vec<u8> {
    let mut unit: Vec<u8> = (0..6).map(|_| b'0' + (rng.next_u64() & 1) as u8).collect();
    for i in (0..6).rev() {
        unit.push(unit[i]);
    }
    unit
}

/// One generated unit for any synthetic dataset kind.
pub fn next_unit(kind: &DatasetKind, rng: &mut StreamRng) -> Result<Vec<u8>> {
    match kind {
        DatasetKind::Champ => Ok(champ_unit(rng)),
        DatasetKind::Dyck { depth_cap } => Ok(dyck_unit(rng, *depth_cap)),
        DatasetKind::Grammar(g) => g.expand(rng),
        DatasetKind::Automaton(a) => Ok(a.walk(rng)),
        DatasetKind::Bits => Ok(bits_unit(rng)),
        DatasetKind::BitsFlip => Ok(bitsflip_unit(rng)),
        DatasetKind::File { .. } => Err(Error::InvalidArgument(
            "file datasets are loaded, not generated".into(),
        )),
    }
}

/// Assemble an evaluation stream: units joined by `|` (bitsflip: no
/// delimiter) until the stream exceeds `min_len`.
pub fn build_stream(spec: &DatasetSpec, rng: &mut StreamRng, min_len: usize) -> Result<EvalStream> {
    if let DatasetKind::File { path, max_bytes } = &spec.kind {
        return load_corpus(path, *max_bytes);
    }
    let delimited = !matches!(spec.kind, DatasetKind::BitsFlip);
    let mut tokens: Vec<u8> = Vec::with_capacity(min_len + 1024);
    loop {
        tokens.extend_from_slice(&next_unit(&spec.kind, rng)?);
        if tokens.len() > min_len {
            break;
        }
        if delimited {
            tokens.push(DELIMITER);
        }
    }
    Ok(EvalStream {
        name: spec.name.clone(),
        provenance: format!("synthetic:{}", spec.name),
        tokens,
    })
}

/// Load a real corpus as one token per byte, with optional truncation.
pub fn load_corpus(path: &Path, max_bytes: Option<usize>) -> Result<EvalStream> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut tokens = Vec::new();
    match max_bytes {
        Some(limit) => {
            file.take(limit as u64)
                .read_to_end(&mut tokens)
                .map_err(|e| Error::io(path, e))?;
        }
        None => {
            { file }
                .read_to_end(&mut tokens)
                .map_err(|e| Error::io(path, e))?;
        }
    }
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "corpus {} is empty",
            path.display()
        )));
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "file".to_string());
    Ok(EvalStream {
        name,
        provenance: format!("file:{}", path.display()),
        tokens,
    })
}

// ---- weighted production grammars -------------------------------------------

#[derive(Debug, Clone)]
enum GrammarTok {
    NonTerm(usize),
    Literal(Vec<u8>),
}

#[derive(Debug, Clone)]
struct GrammarRule {
    weight: f32,
    rhs: Vec<GrammarTok>,
}

/// A weighted context-free grammar in the line format `SYM p: rhs`, where
/// `p` is an optional weight (uniform over the symbol's options when absent),
/// rhs tokens naming another rule's symbol are nonterminals, `_` emits a
/// space, and anything else is emitted verbatim.
#[derive(Debug, Clone)]
pub struct Grammar {
    symbols: Vec<String>,
    rules: Vec<Vec<GrammarRule>>,
    start: usize,
}

impl Grammar {
    pub fn parse(text: &str) -> Result<Grammar> {
        struct RawRule {
            lhs: String,
            weight: f32,
            rhs: Vec<String>,
        }
        let mut raw: Vec<RawRule> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, rhs) = line.split_once(':').ok_or_else(|| {
                Error::Parse(format!("grammar line {}: missing ':'", lineno + 1))
            })?;
            let mut head_parts = head.split_whitespace();
            let lhs = head_parts
                .next()
                .ok_or_else(|| Error::Parse(format!("grammar line {}: empty symbol", lineno + 1)))?
                .to_string();
            let weight = match head_parts.next() {
                Some(w) => w.parse::<f32>().map_err(|_| {
                    Error::Parse(format!("grammar line {}: bad weight '{w}'", lineno + 1))
                })?,
                None => 1.0,
            };
            if weight <= 0.0 {
                return Err(Error::Parse(format!(
                    "grammar line {}: weight must be positive",
                    lineno + 1
                )));
            }
            if let Some(extra) = head_parts.next() {
                return Err(Error::Parse(format!(
                    "grammar line {}: unexpected '{extra}' before ':'",
                    lineno + 1
                )));
            }
            let rhs: Vec<String> = rhs.split_whitespace().map(str::to_string).collect();
            raw.push(RawRule { lhs, weight, rhs });
        }
        if raw.is_empty() {
            return Err(Error::Parse("grammar has no rules".into()));
        }
        let mut symbols: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        for r in &raw {
            if !index.contains_key(&r.lhs) {
                index.insert(r.lhs.clone(), symbols.len());
                symbols.push(r.lhs.clone());
            }
        }
        let mut rules: Vec<Vec<GrammarRule>> = vec![Vec::new(); symbols.len()];
        for r in &raw {
            let rhs = r
                .rhs
                .iter()
                .map(|tok| match index.get(tok) {
                    Some(&i) => GrammarTok::NonTerm(i),
                    None if tok == "_" => GrammarTok::Literal(vec![b' ']),
                    None => GrammarTok::Literal(tok.as_bytes().to_vec()),
                })
                .collect();
            rules[index[&r.lhs]].push(GrammarRule {
                weight: r.weight,
                rhs,
            });
        }
        Ok(Grammar {
            symbols,
            rules,
            start: 0,
        })
    }

    /// Leftmost expansion from the start symbol with a length guard.
    pub fn expand(&self, rng: &mut StreamRng) -> Result<Vec<u8>> {
        'attempt: for _ in 0..MAX_UNIT_RETRIES {
            let mut out: Vec<u8> = Vec::new();
            let mut stack: Vec<GrammarTok> = vec![GrammarTok::NonTerm(self.start)];
            while let Some(tok) = stack.pop() {
                match tok {
                    GrammarTok::Literal(bytes) => out.extend_from_slice(&bytes),
                    GrammarTok::NonTerm(sym) => {
                        let options = &self.rules[sym];
                        let weights: Vec<f32> = options.iter().map(|r| r.weight).collect();
                        let pick = rng.categorical(&weights);
                        for t in options[pick].rhs.iter().rev() {
                            stack.push(t.clone());
                        }
                    }
                }
                if out.len() > MAX_UNIT_LEN {
                    continue 'attempt;
                }
            }
            return Ok(out);
        }
        Err(Error::InvalidArgument(format!(
            "grammar starting at '{}' kept exceeding {MAX_UNIT_LEN} bytes",
            self.symbols[self.start]
        )))
    }
}

// ---- labeled automata ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Automaton {
    state_names: Vec<String>,
    /// Per state: (emitted label, target state, or None for END).
    transitions: Vec<Vec<(u8, Option<usize>)>>,
    start: usize,
}

impl Automaton {
    /// Parse the line format `SRC l -> DST`, with `END` as terminal target.
    /// The first line's source is the start state. Every state must have at
    /// least one outgoing transition.
    pub fn parse(text: &str) -> Result<Automaton> {
        let mut state_names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut edges: Vec<(usize, u8, Option<String>)> = Vec::new();
        let intern = |names: &mut Vec<String>, idx: &mut HashMap<String, usize>, s: &str| {
            *idx.entry(s.to_string()).or_insert_with(|| {
                names.push(s.to_string());
                names.len() - 1
            })
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[2] != "->" {
                return Err(Error::Parse(format!(
                    "automaton line {}: expected 'STATE label -> STATE'",
                    lineno + 1
                )));
            }
            if parts[1].len() != 1 || !parts[1].is_ascii() {
                return Err(Error::Parse(format!(
                    "automaton line {}: label must be one ASCII character",
                    lineno + 1
                )));
            }
            let src = intern(&mut state_names, &mut index, parts[0]);
            let label = parts[1].as_bytes()[0];
            let dst = if parts[3] == "END" {
                None
            } else {
                Some(parts[3].to_string())
            };
            edges.push((src, label, dst));
        }
        if edges.is_empty() {
            return Err(Error::Parse("automaton has no transitions".into()));
        }
        // Resolve targets after all states are known.
        let mut transitions: Vec<Vec<(u8, Option<usize>)>> = vec![Vec::new(); state_names.len()];
        let mut resolved: Vec<(usize, u8, Option<usize>)> = Vec::new();
        for (src, label, dst) in edges {
            let dst = match dst {
                None => None,
                Some(name) => Some(intern(&mut state_names, &mut index, &name)),
            };
            resolved.push((src, label, dst));
        }
        transitions.resize(state_names.len(), Vec::new());
        for (src, label, dst) in resolved {
            transitions[src].push((label, dst));
        }
        for (i, t) in transitions.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::Parse(format!(
                    "automaton state '{}' has no outgoing transition",
                    state_names[i]
                )));
            }
        }
        Ok(Automaton {
            state_names,
            transitions,
            start: 0,
        })
    }

    pub fn state_count(&self) -> usize {
        self.state_names.len()
    }

    pub fn transitions_from(&self, state: usize) -> &[(u8, Option<usize>)] {
        &self.transitions[state]
    }

    /// Random walk from the start state, emitting each taken transition's
    /// label, uniform over outgoing transitions. Stops on END or at the
    /// length guard (for automata without a reachable END).
    pub fn walk(&self, rng: &mut StreamRng) -> Vec<u8> {
        let mut out = Vec::new();
        let mut state = self.start;
        while out.len() < MAX_UNIT_LEN {
            let options = &self.transitions[state];
            let (label, target) = options[rng.below(options.len() as u64) as usize];
            out.push(label);
            match target {
                Some(next) => state = next,
                None => break,
            }
        }
        out
    }
}

// ---- built-in dataset definitions ---------------------------------------------

/// Hand-designed non-deterministic automaton: from the start state the same
/// label can lead to different branches.
const NDFA_DEFAULT: &str = "\
S0 a -> S1
S0 a -> S2
S1 b -> S1
S1 c -> S3
S2 c -> S2
S2 b -> S3
S3 ! -> END
";

/// Randomly generated automaton instance (5 states, out-degree 2), frozen.
const AUT_DEFAULT: &str = "\
Q0 k -> Q2
Q0 r -> Q1
Q1 m -> Q3
Q1 t -> Q0
Q2 w -> Q4
Q2 z -> Q2
Q3 f -> Q4
Q3 h -> Q1
Q4 s -> Q0
Q4 d -> END
";

/// Hand-designed toy grammar: short noun/verb sentences.
const TOY_DEFAULT: &str = "\
S 1: NP _ VP .
NP 0.4: the _ N
NP 0.4: a _ N
NP 0.2: NP _ P _ NP
N: cat
N: dog
N: bird
N: fox
VP 0.5: V _ NP
VP 0.5: V
V: sees
V: chases
V: likes
V: finds
P: near
P: behind
";

/// Toy grammar adapted from a textbook arithmetic-expression example.
const TOY2_DEFAULT: &str = "\
E 0.35: E + T
E 0.65: T
T 0.3: T * F
T 0.7: F
F 0.25: ( E )
F 0.75: N
N 0.4: N D
N 0.6: D
D: 0
D: 1
D: 2
D: 3
D: 4
D: 5
D: 6
D: 7
D: 8
D: 9
";

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(label: &str) -> StreamRng {
        StreamRng::new(1234).stream(label)
    }

    /// Independent big-integer concatenation oracle for champ units.
    fn champ_oracle(start: u64) -> Vec<u8> {
        (start..start + CHAMP_INTEGERS)
            .flat_map(|i| i.to_string().into_bytes())
            .collect()
    }

    #[test]
    fn champ_unit_matches_concatenation_oracle() {
        let mut r = rng("champ");
        for _ in 0..50 {
            // Regenerate with a cloned rng to recover the drawn start.
            let mut probe = r;
            let start = probe.below(CHAMP_RANGE - CHAMP_INTEGERS + 1);
            let unit = champ_unit(&mut r);
            assert_eq!(unit, champ_oracle(start));
        }
    }

    #[test]
    fn champ_spec_example_999() {
        let oracle = champ_oracle(999);
        assert!(oracle.starts_with(b"99910001001"));
    }

    #[test]
    fn dyck_units_are_balanced_with_prefix_property() {
        let mut r = rng("dyck");
        for _ in 0..10_000 {
            let unit = dyck_unit(&mut r, 16);
            let mut depth: i64 = 0;
            for (i, &c) in unit.iter().enumerate() {
                depth += if c == b'(' { 1 } else { -1 };
                assert!(depth >= 0, "negative depth at {i}");
                if i + 1 < unit.len() {
                    assert!(depth > 0, "depth returned to zero before the end");
                }
            }
            assert_eq!(depth, 0, "unit not balanced");
        }
    }

    proptest::proptest! {
        #[test]
        fn dyck_units_balance_for_any_cap_and_seed(seed in 0u64..1_000_000, cap in 1usize..32) {
            let mut r = StreamRng::new(seed).stream("dyck-prop");
            let unit = dyck_unit(&mut r, cap);
            let mut depth: i64 = 0;
            let mut max_depth: i64 = 0;
            for &c in &unit {
                depth += if c == b'(' { 1 } else { -1 };
                max_depth = max_depth.max(depth);
                proptest::prop_assert!(depth >= 0);
            }
            proptest::prop_assert_eq!(depth, 0);
            proptest::prop_assert!(max_depth <= cap as i64);
        }
    }

    #[test]
    fn bits_spec_example() {
        let first10 = b"1010101100";
        let tail = bits_combine(first10);
        let mut unit = first10.to_vec();
        unit.extend_from_slice(&tail);
        assert_eq!(unit.len(), 30);
        assert_eq!(
            unit,
            b"101010110011001001001110100110".to_vec(),
            "xor, and, or, eq of 10101 and 01100"
        );
    }

    #[test]
    fn bits_units_pass_boolean_recomputation() {
        let mut r = rng("bits");
        for _ in 0..10_000 {
            let unit = bits_unit(&mut r);
            assert_eq!(unit.len(), 30);
            assert_eq!(&unit[10..], bits_combine(&unit[..10]).as_slice());
        }
    }

    #[test]
    fn bitsflip_spec_example() {
        // A unit is its first 6 bits followed by their reversal.
        let mut r = rng("bitsflip");
        for _ in 0..1000 {
            let unit = bitsflip_unit(&mut r);
            assert_eq!(unit.len(), 12);
            for i in 0..6 {
                assert_eq!(unit[6 + i], unit[5 - i]);
            }
        }
    }

    #[test]
    fn bitsflip_reversal_of_known_string() {
        // 010110 -> 010110011010
        let mut unit = b"010110".to_vec();
        for i in (0..6).rev() {
            unit.push(unit[i]);
        }
        assert_eq!(unit, b"010110011010".to_vec());
    }

    #[test]
    fn stream_is_delimited_and_long_enough() {
        let spec = DatasetSpec::builtin("dyck").unwrap();
        let mut r = rng("stream");
        let s = build_stream(&spec, &mut r, MIN_STREAM_LEN).unwrap();
        assert!(s.tokens.len() > MIN_STREAM_LEN);
        assert!(s.tokens.contains(&DELIMITER));
        // Delimiters separate balanced units.
        let first = s.tokens.split(|&c| c == DELIMITER).next().unwrap();
        assert!(first.iter().all(|&c| c == b'(' || c == b')'));
    }

    #[test]
    fn bitsflip_stream_has_no_delimiter_and_only_bits() {
        let spec = DatasetSpec::builtin("bitsflip").unwrap();
        let mut r = rng("flipstream");
        let s = build_stream(&spec, &mut r, MIN_STREAM_LEN).unwrap();
        assert!(s.tokens.len() > MIN_STREAM_LEN);
        assert!(s.tokens.iter().all(|&c| c == b'0' || c == b'1'));
    }

    #[test]
    fn streams_are_deterministic_given_seed() {
        for name in DatasetSpec::builtin_names() {
            let spec = DatasetSpec::builtin(name).unwrap();
            let a = build_stream(&spec, &mut rng("det"), 10_000).unwrap();
            let b = build_stream(&spec, &mut rng("det"), 10_000).unwrap();
            assert_eq!(a.tokens, b.tokens, "{name} not deterministic");
        }
    }

    #[test]
    fn grammar_units_use_expected_alphabet() {
        let spec = DatasetSpec::builtin("toy2").unwrap();
        let mut r = rng("toy2");
        for _ in 0..200 {
            let unit = next_unit(&spec.kind, &mut r).unwrap();
            assert!(!unit.is_empty());
            assert!(
                unit.iter()
                    .all(|c| c.is_ascii_digit() || matches!(c, b'+' | b'*' | b'(' | b')')),
                "unexpected byte in {:?}",
                String::from_utf8_lossy(&unit)
            );
        }
    }

    #[test]
    fn toy_grammar_produces_sentences() {
        let spec = DatasetSpec::builtin("toy").unwrap();
        let mut r = rng("toy");
        let unit = next_unit(&spec.kind, &mut r).unwrap();
        let text = String::from_utf8(unit).unwrap();
        assert!(text.ends_with('.'), "{text}");
        assert!(text.contains(' '), "{text}");
    }

    #[test]
    fn ndfa_walks_match_the_design() {
        let spec = DatasetSpec::builtin("ndfa").unwrap();
        let mut r = rng("ndfa");
        for _ in 0..500 {
            let unit = next_unit(&spec.kind, &mut r).unwrap();
            let text = String::from_utf8(unit).unwrap();
            // a then (b* c | c* b) then !
            assert!(text.starts_with('a') && text.ends_with('!'), "{text}");
        }
    }

    #[test]
    fn automaton_without_outgoing_transition_is_rejected() {
        // S1 has no outgoing edge.
        let err = Automaton::parse("S0 a -> S1\n").unwrap_err();
        assert!(err.to_string().contains("no outgoing"));
    }

    #[test]
    fn grammar_parse_errors_name_the_line() {
        let err = Grammar::parse("S missing colon\n").unwrap_err();
        assert!(err.to_string().contains("line 1"));
        let err = Grammar::parse("S x: a\n").unwrap_err();
        assert!(err.to_string().contains("bad weight"));
    }

    #[test]
    fn load_corpus_is_byte_exact_and_truncates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.bin");
        std::fs::write(&path, [0x41u8, 0x42, 0x00, 0xff, 0x10]).unwrap();
        let s = load_corpus(&path, None).unwrap();
        assert_eq!(s.tokens, vec![65, 66, 0, 255, 16]);
        let s = load_corpus(&path, Some(2)).unwrap();
        assert_eq!(s.tokens, vec![65, 66]);

        let empty = dir.path().join("empty.bin");
        std::fs::write(&empty, b"").unwrap();
        assert!(load_corpus(&empty, None).is_err());
    }
}
