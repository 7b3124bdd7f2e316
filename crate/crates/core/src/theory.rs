//! Exact verification of the mixture theory on tiny enumerable model classes:
//! mixture construction, domination, the cumulative-KL bound, and domination
//! across iterations of conditional resampling.
//!
//! Everything here is exhaustive over bitstrings of a fixed length L (<= 14):
//! measures put all terminal mass on length-L strings, and prefix masses are
//! derived by pairwise summation, so every claim is checked at every string
//! with no sampling. Double precision with an accumulated error budget of
//! 1e-12.

use crate::error::{Error, Result};

pub const MAX_LEN: usize = 14;
const PRIOR_TOLERANCE: f64 = 1e-9;
pub const DOMINATION_SLACK: f64 = 1e-12;

/// An exactly computable distribution over bitstrings of length L.
#[derive(Debug, Clone)]
pub enum Member {
    /// Independent bits, each 1 with probability `p1`.
    Bernoulli { p1: f64 },
    /// First-order binary Markov chain: P(first bit = 1), then P(1 | prev).
    MarkovChain { p1_init: f64, p1_after: [f64; 2] },
    /// Explicit table over all 2^L strings (e.g. a machine simulating another
    /// class's mixture).
    Table { probs: Vec<f64> },
}

impl Member {
    /// Probability of the length-`len` string with bits given by `x`
    /// (most significant bit = first bit).
    pub fn probability(&self, x: usize, len: usize) -> f64 {
        match self {
            Member::Bernoulli { p1 } => {
                let ones = (x as u64).count_ones() as i32;
                p1.powi(ones) * (1.0 - p1).powi(len as i32 - ones)
            }
            Member::MarkovChain { p1_init, p1_after } => {
                let mut p = 1.0;
                let mut prev = 0usize;
                for i in 0..len {
                    let bit = (x >> (len - 1 - i)) & 1;
                    let p1 = if i == 0 { *p1_init } else { p1_after[prev] };
                    p *= if bit == 1 { p1 } else { 1.0 - p1 };
                    prev = bit;
                }
                p
            }
            Member::Table { probs } => probs[x],
        }
    }
}

/// A finite class of members with a prior.
#[derive(Debug, Clone)]
pub struct ToyClass {
    pub len: usize,
    /// (prior mass, member); priors must be positive and sum to <= 1.
    pub members: Vec<(f64, Member)>,
}

impl ToyClass {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.len > MAX_LEN {
            return Err(Error::InvalidArgument(format!(
                "class length {} outside 1..={MAX_LEN}",
                self.len
            )));
        }
        let prior_sum: f64 = self.members.iter().map(|(p, _)| p).sum();
        if prior_sum > 1.0 + PRIOR_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "prior mass {prior_sum} exceeds 1"
            )));
        }
        for (i, (prior, member)) in self.members.iter().enumerate() {
            if *prior <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "member {i} has non-positive prior"
                )));
            }
            let total: f64 = (0..1usize << self.len)
                .map(|x| member.probability(x, self.len))
                .sum();
            if total > 1.0 + PRIOR_TOLERANCE {
                return Err(Error::InvalidArgument(format!(
                    "member {i} sums to {total} > 1: not a (semi)distribution"
                )));
            }
        }
        Ok(())
    }
}

/// An exact measure: terminal mass on every length-L string, with prefix
/// masses for every shorter string derived by summation.
#[derive(Debug, Clone)]
pub struct ExactMeasure {
    pub len: usize,
    /// Terminal probabilities, indexed by the string's integer value.
    pub terminal: Vec<f64>,
}

impl ExactMeasure {
    pub fn new(len: usize, terminal: Vec<f64>) -> Self {
        debug_assert_eq!(terminal.len(), 1 << len);
        ExactMeasure { len, terminal }
    }

    pub fn uniform(len: usize) -> Self {
        let n = 1usize << len;
        ExactMeasure::new(len, vec![1.0 / n as f64; n])
    }

    /// Prefix masses per level: `levels()[n][x]` is p(x_) for |x| = n.
    /// Level `len` is the terminal mass itself.
    pub fn levels(&self) -> Vec<Vec<f64>> {
        let mut levels = vec![Vec::new(); self.len + 1];
        levels[self.len] = self.terminal.clone();
        for n in (0..self.len).rev() {
            let child = &levels[n + 1];
            levels[n] = (0..1usize << n)
                .map(|x| child[2 * x] + child[2 * x + 1])
                .collect();
        }
        levels
    }

    /// Largest violation of p(x_) = p(x0_) + p(x1_) across all prefixes.
    pub fn prefix_consistency_error(&self) -> f64 {
        let levels = self.levels();
        let mut worst = 0f64;
        for n in 0..self.len {
            for x in 0..1usize << n {
                let lhs = levels[n][x];
                let rhs = levels[n + 1][2 * x] + levels[n + 1][2 * x + 1];
                worst = worst.max((lhs - rhs).abs());
            }
        }
        worst
    }
}

/// The class mixture: m(x) = sum over members of prior * member probability,
/// exact at every string of length <= L.
pub fn exact_mixture(class: &ToyClass) -> Result<ExactMeasure> {
    class.validate()?;
    let n = 1usize << class.len;
    let mut terminal = vec![0f64; n];
    for (prior, member) in &class.members {
        for (x, t) in terminal.iter_mut().enumerate() {
            *t += prior * member.probability(x, class.len);
        }
    }
    Ok(ExactMeasure::new(class.len, terminal))
}

#[derive(Debug, Clone)]
pub struct DominationReport {
    pub member: usize,
    pub prior: f64,
    /// min over strings (terminal and every prefix level) of m(x)/p_c(x),
    /// over strings where p_c(x) > 0.
    pub worst_ratio: f64,
    pub worst_len: usize,
    pub worst_x: usize,
    pub holds: bool,
}

/// Exhaustive domination check of the mixture against every member: the
/// worst-case ratio must be at least the member's prior (minus slack).
pub fn check_domination(mixture: &ExactMeasure, class: &ToyClass) -> Result<Vec<DominationReport>> {
    if mixture.len != class.len {
        return Err(Error::InvalidArgument(
            "mixture and class have different lengths".into(),
        ));
    }
    let mix_levels = mixture.levels();
    let mut reports = Vec::with_capacity(class.members.len());
    for (ci, (prior, member)) in class.members.iter().enumerate() {
        let member_terminal: Vec<f64> = (0..1usize << class.len)
            .map(|x| member.probability(x, class.len))
            .collect();
        let member_levels = ExactMeasure::new(class.len, member_terminal).levels();
        let mut worst = f64::INFINITY;
        let (mut worst_len, mut worst_x) = (0usize, 0usize);
        for n in 0..=class.len {
            for x in 0..1usize << n {
                let pc = member_levels[n][x];
                if pc > 0.0 {
                    let ratio = mix_levels[n][x] / pc;
                    if ratio < worst {
                        worst = ratio;
                        worst_len = n;
                        worst_x = x;
                    }
                }
            }
        }
        reports.push(DominationReport {
            member: ci,
            prior: *prior,
            worst_ratio: worst,
            worst_len,
            worst_x,
            holds: worst >= prior - DOMINATION_SLACK,
        });
    }
    Ok(reports)
}

/// The cumulative expected next-bit KL series between two measures.
#[derive(Debug, Clone)]
pub struct KlSeries {
    /// d[n] is the expected KL (in bits, under p's prefix distribution at
    /// length n) between the next-bit conditionals of p and q.
    pub d: Vec<f64>,
    /// partial[m] = sum of d[0..=m].
    pub partial: Vec<f64>,
}

/// Compute D_n for prefix lengths 0..count-1, exactly, by summing over all
/// prefixes. A zero q-conditional where the p-conditional is positive makes
/// the corresponding D_n infinite, reported explicitly.
pub fn cumulative_kl(p: &ExactMeasure, q: &ExactMeasure, count: usize) -> Result<KlSeries> {
    if p.len != q.len {
        return Err(Error::InvalidArgument(
            "measures have different lengths".into(),
        ));
    }
    if count > p.len {
        return Err(Error::InvalidArgument(format!(
            "requested {count} terms but conditionals exist only up to length {}",
            p.len - 1
        )));
    }
    let pl = p.levels();
    let ql = q.levels();
    let mut d = Vec::with_capacity(count);
    for n in 0..count {
        let mut dn = 0f64;
        for x in 0..1usize << n {
            let px = pl[n][x];
            if px <= 0.0 {
                continue;
            }
            let qx = ql[n][x];
            for b in 0..2usize {
                let pb = pl[n + 1][2 * x + b] / px;
                if pb <= 0.0 {
                    continue;
                }
                if qx <= 0.0 {
                    dn = f64::INFINITY;
                    continue;
                }
                let qb = ql[n + 1][2 * x + b] / qx;
                if qb <= 0.0 {
                    dn = f64::INFINITY;
                    continue;
                }
                dn += px * pb * (pb / qb).log2();
            }
        }
        d.push(dn);
    }
    let mut partial = Vec::with_capacity(count);
    let mut acc = 0f64;
    for &v in &d {
        acc += v;
        partial.push(acc);
    }
    Ok(KlSeries { d, partial })
}

// ---- conditional classes and iteration ---------------------------------------

/// An exactly computable conditional machine c(x | u) on length-L strings.
#[derive(Debug, Clone)]
pub enum CondMember {
    /// Copies the conditioning string.
    Identity,
    /// Flips every bit.
    FlipAll,
    /// Cyclic left shift by k.
    Shift(usize),
    /// Flips each bit independently with probability `flip_prob`.
    Noise { flip_prob: f64 },
    /// XOR with a fixed mask.
    XorMask(usize),
}

#[derive(Debug, Clone)]
pub struct CondClass {
    pub len: usize,
    pub members: Vec<(f64, CondMember)>,
}

impl CondClass {
    pub fn validate(&self) -> Result<()> {
        if self.len == 0 || self.len > MAX_LEN {
            return Err(Error::InvalidArgument(format!(
                "class length {} outside 1..={MAX_LEN}",
                self.len
            )));
        }
        let prior_sum: f64 = self.members.iter().map(|(p, _)| p).sum();
        if prior_sum > 1.0 + PRIOR_TOLERANCE {
            return Err(Error::InvalidArgument(format!(
                "prior mass {prior_sum} exceeds 1"
            )));
        }
        if self.members.iter().any(|(p, _)| *p <= 0.0) {
            return Err(Error::InvalidArgument("non-positive prior".into()));
        }
        Ok(())
    }

    /// Prior of the identity machine, if the class contains it.
    pub fn identity_prior(&self) -> Option<f64> {
        self.members
            .iter()
            .find(|(_, m)| matches!(m, CondMember::Identity))
            .map(|(p, _)| *p)
    }
}

fn cyclic_unshift(x: usize, k: usize, len: usize) -> usize {
    // Inverse of a cyclic left shift by k.
    let k = k % len;
    let mask = (1usize << len) - 1;
    ((x >> k) | (x << (len - k))) & mask
}

/// One iteration step: m'(x) = sum over (u, c) of m(u) p(c) p_c(x | u).
fn iterate_once(class: &CondClass, m: &ExactMeasure) -> ExactMeasure {
    let len = class.len;
    let size = 1usize << len;
    let mask = size - 1;
    let mut out = vec![0f64; size];
    for (prior, member) in &class.members {
        match member {
            CondMember::Identity => {
                for x in 0..size {
                    out[x] += prior * m.terminal[x];
                }
            }
            CondMember::FlipAll => {
                for x in 0..size {
                    out[x] += prior * m.terminal[!x & mask];
                }
            }
            CondMember::Shift(k) => {
                for x in 0..size {
                    out[x] += prior * m.terminal[cyclic_unshift(x, *k, len)];
                }
            }
            CondMember::XorMask(mk) => {
                for x in 0..size {
                    out[x] += prior * m.terminal[x ^ (mk & mask)];
                }
            }
            CondMember::Noise { flip_prob } => {
                let eps = *flip_prob;
                // Precompute eps^d (1-eps)^(L-d) per Hamming distance.
                let by_dist: Vec<f64> = (0..=len)
                    .map(|d| eps.powi(d as i32) * (1.0 - eps).powi((len - d) as i32))
                    .collect();
                for (x, o) in out.iter_mut().enumerate() {
                    let mut acc = 0f64;
                    for (u, &mu) in m.terminal.iter().enumerate() {
                        acc += mu * by_dist[(x ^ u).count_ones() as usize];
                    }
                    *o += prior * acc;
                }
            }
        }
    }
    ExactMeasure::new(len, out)
}

/// The iterated mixtures m^0 (uniform per length) through m^n.
pub fn iterate_mixture(class: &CondClass, steps: usize) -> Result<Vec<ExactMeasure>> {
    class.validate()?;
    let mut iterates = vec![ExactMeasure::uniform(class.len)];
    for _ in 0..steps {
        let next = iterate_once(class, iterates.last().expect("non-empty"));
        iterates.push(next);
    }
    Ok(iterates)
}

#[derive(Debug, Clone)]
pub struct IterationReport {
    /// None when the class has no identity member (check skipped).
    pub identity_prior: Option<f64>,
    /// Worst slack of m^{t+1}(x) >= p(i) m^t(x) over all t and x
    /// (positive slack means the bound holds with margin).
    pub one_step_worst: f64,
    /// Worst slack of the k-step corollary m^n(x) >= p(i)^k m^{n-k}(x).
    pub k_step_worst: f64,
    pub holds: bool,
}

/// Verify the one-step and k-step domination bounds across iterates.
pub fn check_iteration_domination(
    class: &CondClass,
    iterates: &[ExactMeasure],
) -> IterationReport {
    let Some(pi) = class.identity_prior() else {
        return IterationReport {
            identity_prior: None,
            one_step_worst: f64::NAN,
            k_step_worst: f64::NAN,
            holds: false,
        };
    };
    let mut one_step_worst = f64::INFINITY;
    for t in 0..iterates.len() - 1 {
        for x in 0..iterates[t].terminal.len() {
            let slack = iterates[t + 1].terminal[x] - pi * iterates[t].terminal[x];
            one_step_worst = one_step_worst.min(slack);
        }
    }
    let mut k_step_worst = f64::INFINITY;
    for n in 0..iterates.len() {
        for k in 1..=n {
            let factor = pi.powi(k as i32);
            for x in 0..iterates[n].terminal.len() {
                let slack = iterates[n].terminal[x] - factor * iterates[n - k].terminal[x];
                k_step_worst = k_step_worst.min(slack);
            }
        }
    }
    IterationReport {
        identity_prior: Some(pi),
        one_step_worst,
        k_step_worst,
        holds: one_step_worst >= -DOMINATION_SLACK && k_step_worst >= -DOMINATION_SLACK,
    }
}

// ---- shipped toy classes ------------------------------------------------------

pub fn shipped_classes() -> Vec<(&'static str, ToyClass)> {
    vec![
        (
            "bern-pair",
            ToyClass {
                len: 10,
                members: vec![
                    (0.5, Member::Bernoulli { p1: 0.25 }),
                    (0.5, Member::Bernoulli { p1: 0.75 }),
                ],
            },
        ),
        (
            "mixed-three",
            ToyClass {
                len: 10,
                members: vec![
                    (0.2, Member::Bernoulli { p1: 0.1 }),
                    (0.3, Member::Bernoulli { p1: 0.5 }),
                    (
                        0.5,
                        Member::MarkovChain {
                            p1_init: 0.5,
                            p1_after: [0.8, 0.3],
                        },
                    ),
                ],
            },
        ),
        (
            "skewed-prior",
            ToyClass {
                len: 12,
                members: vec![
                    (0.9, Member::Bernoulli { p1: 0.5 }),
                    (0.1, Member::Bernoulli { p1: 0.05 }),
                ],
            },
        ),
    ]
}

pub fn shipped_cond_classes() -> Vec<(&'static str, CondClass)> {
    vec![
        (
            "flip-pair",
            CondClass {
                len: 3,
                members: vec![(0.5, CondMember::Identity), (0.5, CondMember::FlipAll)],
            },
        ),
        (
            "shift-flip",
            CondClass {
                len: 8,
                members: vec![
                    (0.5, CondMember::Identity),
                    (0.3, CondMember::FlipAll),
                    (0.2, CondMember::Shift(1)),
                ],
            },
        ),
        (
            "noisy-xor",
            CondClass {
                len: 8,
                members: vec![
                    (0.4, CondMember::Identity),
                    (0.3, CondMember::Noise { flip_prob: 0.1 }),
                    (0.3, CondMember::XorMask(0b1011_0100)),
                ],
            },
        ),
    ]
}

// ---- class file parsing ---------------------------------------------------------

#[derive(Debug, Clone)]
pub enum ParsedClass {
    Measure(ToyClass),
    Conditional(CondClass),
}

/// Parse a toy-class spec file. One class per file:
///
/// ```text
/// L 10
/// bernoulli 0.25 prior 0.5
/// markov 0.5 0.8 0.3 prior 0.5
/// ```
///
/// or, for a conditional class:
///
/// ```text
/// L 8
/// identity prior 0.5
/// flip prior 0.3
/// shift 1 prior 0.2
/// noise 0.1 prior 0.3
/// xormask 180 prior 0.3
/// ```
pub fn parse_class_file(text: &str) -> Result<ParsedClass> {
    let mut len: Option<usize> = None;
    let mut measures: Vec<(f64, Member)> = Vec::new();
    let mut conds: Vec<(f64, CondMember)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: &str| Error::Parse(format!("class file line {}: {msg}", lineno + 1));
        let parse_f64 = |s: &str, what: &str| {
            s.parse::<f64>()
                .map_err(|_| bad(&format!("bad {what} '{s}'")))
        };
        // Each member line ends with "prior <p>".
        let prior_of = |parts: &[&str]| -> Result<f64> {
            if parts.len() < 2 || parts[parts.len() - 2] != "prior" {
                return Err(bad("expected trailing 'prior <p>'"));
            }
            parse_f64(parts[parts.len() - 1], "prior")
        };
        match parts[0] {
            "L" => {
                let v = parts
                    .get(1)
                    .ok_or_else(|| bad("expected 'L <len>'"))?
                    .parse::<usize>()
                    .map_err(|_| bad("bad length"))?;
                len = Some(v);
            }
            "bernoulli" => {
                let p1 = parse_f64(parts.get(1).ok_or_else(|| bad("missing p1"))?, "p1")?;
                measures.push((prior_of(&parts)?, Member::Bernoulli { p1 }));
            }
            "markov" => {
                if parts.len() < 6 {
                    return Err(bad("expected 'markov <p1_init> <p1_after0> <p1_after1> prior <p>'"));
                }
                measures.push((
                    prior_of(&parts)?,
                    Member::MarkovChain {
                        p1_init: parse_f64(parts[1], "p1_init")?,
                        p1_after: [parse_f64(parts[2], "p1_after0")?, parse_f64(parts[3], "p1_after1")?],
                    },
                ));
            }
            "identity" => conds.push((prior_of(&parts)?, CondMember::Identity)),
            "flip" => conds.push((prior_of(&parts)?, CondMember::FlipAll)),
            "shift" => {
                let k = parts
                    .get(1)
                    .ok_or_else(|| bad("missing shift amount"))?
                    .parse::<usize>()
                    .map_err(|_| bad("bad shift amount"))?;
                conds.push((prior_of(&parts)?, CondMember::Shift(k)));
            }
            "noise" => {
                let eps = parse_f64(parts.get(1).ok_or_else(|| bad("missing flip prob"))?, "flip prob")?;
                conds.push((prior_of(&parts)?, CondMember::Noise { flip_prob: eps }));
            }
            "xormask" => {
                let mask = parts
                    .get(1)
                    .ok_or_else(|| bad("missing mask"))?
                    .parse::<usize>()
                    .map_err(|_| bad("bad mask"))?;
                conds.push((prior_of(&parts)?, CondMember::XorMask(mask)));
            }
            other => return Err(bad(&format!("unknown member kind '{other}'"))),
        }
    }
    let len = len.ok_or_else(|| Error::Parse("class file missing 'L <len>' line".into()))?;
    match (measures.is_empty(), conds.is_empty()) {
        (false, true) => {
            let class = ToyClass {
                len,
                members: measures,
            };
            class.validate()?;
            Ok(ParsedClass::Measure(class))
        }
        (true, false) => {
            let class = CondClass { len, members: conds };
            class.validate()?;
            Ok(ParsedClass::Conditional(class))
        }
        (true, true) => Err(Error::Parse("class file has no members".into())),
        (false, false) => Err(Error::Parse(
            "class file mixes measure and conditional members".into(),
        )),
    }
}

// ---- the full check table -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Run the whole exact-verification suite over the given (or shipped)
/// classes, producing one pass/fail line per check.
pub fn run_all_checks(
    classes: &[(String, ToyClass)],
    cond_classes: &[(String, CondClass)],
    iteration_steps: usize,
) -> Result<Vec<CheckLine>> {
    let mut lines = Vec::new();
    for (name, class) in classes {
        let mixture = exact_mixture(class)?;

        let consistency = mixture.prefix_consistency_error();
        lines.push(CheckLine {
            name: format!("{name}: prefix consistency"),
            pass: consistency < 1e-12,
            detail: format!("max violation {consistency:.3e}"),
        });

        for report in check_domination(&mixture, class)? {
            lines.push(CheckLine {
                name: format!("{name}: domination member {}", report.member),
                pass: report.holds,
                detail: format!(
                    "worst ratio {:.6} vs prior {:.6} (len {} x {:#b})",
                    report.worst_ratio, report.prior, report.worst_len, report.worst_x
                ),
            });
        }

        for (ci, (prior, member)) in class.members.iter().enumerate() {
            let terminal: Vec<f64> = (0..1usize << class.len)
                .map(|x| member.probability(x, class.len))
                .collect();
            let p = ExactMeasure::new(class.len, terminal);
            let series = cumulative_kl(&p, &mixture, class.len)?;
            let bound = -prior.log2() + 1e-9;
            let worst = series.partial.iter().cloned().fold(0.0, f64::max);
            let nondecreasing = series
                .partial
                .windows(2)
                .all(|w| w[1] >= w[0] - DOMINATION_SLACK);
            lines.push(CheckLine {
                name: format!("{name}: cumulative KL bound member {ci}"),
                pass: worst <= bound && nondecreasing,
                detail: format!("sup partial sum {worst:.6} <= -log2 prior {:.6}", -prior.log2()),
            });
        }
    }

    for (name, class) in cond_classes {
        let iterates = iterate_mixture(class, iteration_steps)?;
        let report = check_iteration_domination(class, &iterates);
        match report.identity_prior {
            None => lines.push(CheckLine {
                name: format!("{name}: iteration domination"),
                pass: false,
                detail: "identity member absent: check skipped".to_string(),
            }),
            Some(pi) => {
                lines.push(CheckLine {
                    name: format!("{name}: iteration one-step bound"),
                    pass: report.one_step_worst >= -DOMINATION_SLACK,
                    detail: format!("p(i) = {pi}, worst slack {:.3e}", report.one_step_worst),
                });
                lines.push(CheckLine {
                    name: format!("{name}: iteration k-step bound"),
                    pass: report.k_step_worst >= -DOMINATION_SLACK,
                    detail: format!("worst slack {:.3e}", report.k_step_worst),
                });
            }
        }
    }
    Ok(lines)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bern_pair(len: usize) -> ToyClass {
        ToyClass {
            len,
            members: vec![
                (0.5, Member::Bernoulli { p1: 0.25 }),
                (0.5, Member::Bernoulli { p1: 0.75 }),
            ],
        }
    }

    #[test]
    fn mixture_hand_arithmetic() {
        // L=2, members Bernoulli(0.25)/Bernoulli(0.75), uniform prior:
        // m("11") = 0.5 * 0.0625 + 0.5 * 0.5625 = 0.3125
        let mixture = exact_mixture(&bern_pair(2)).unwrap();
        assert!((mixture.terminal[0b11] - 0.3125).abs() < 1e-14);
    }

    #[test]
    fn single_member_mixture_is_the_member() {
        let class = ToyClass {
            len: 6,
            members: vec![(1.0, Member::Bernoulli { p1: 0.3 })],
        };
        let mixture = exact_mixture(&class).unwrap();
        for x in 0..64 {
            let want = class.members[0].1.probability(x, 6);
            assert!((mixture.terminal[x] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn heavy_prior_tracks_member_where_other_vanishes() {
        // Second member is a point mass on all-ones; everywhere else the
        // mixture is within 10% of the 0.9-prior member.
        let class = ToyClass {
            len: 6,
            members: vec![
                (0.9, Member::Bernoulli { p1: 0.4 }),
                (0.1, Member::Bernoulli { p1: 1.0 }),
            ],
        };
        let mixture = exact_mixture(&class).unwrap();
        for x in 0..63 {
            let pa = class.members[0].1.probability(x, 6);
            let rel = (mixture.terminal[x] - pa).abs() / pa;
            assert!(rel <= 0.1 + 1e-12, "x={x}: rel {rel}");
        }
    }

    #[test]
    fn domination_holds_exhaustively() {
        let class = bern_pair(10);
        let mixture = exact_mixture(&class).unwrap();
        for report in check_domination(&mixture, &class).unwrap() {
            assert!(report.holds, "{report:?}");
            assert!(report.worst_ratio >= 0.5 - 1e-12);
        }

        // A member with prior 0.1 keeps ratio >= 0.1 over all strings.
        let skewed = shipped_classes()
            .into_iter()
            .find(|(n, _)| *n == "skewed-prior")
            .unwrap()
            .1;
        let mixture = exact_mixture(&skewed).unwrap();
        let reports = check_domination(&mixture, &skewed).unwrap();
        assert!(reports[1].holds);
        assert!(reports[1].worst_ratio >= 0.1 - 1e-12);
    }

    #[test]
    fn nested_class_simulation_dominates_inner_members() {
        // D contains a machine that simulates the mixture of C: m_D then
        // dominates every member of C with constant >= p(sim) * p_C(c).
        let inner = bern_pair(8);
        let inner_mixture = exact_mixture(&inner).unwrap();
        let outer = ToyClass {
            len: 8,
            members: vec![
                (
                    0.25,
                    Member::Table {
                        probs: inner_mixture.terminal.clone(),
                    },
                ),
                (0.75, Member::Bernoulli { p1: 0.5 }),
            ],
        };
        let outer_mixture = exact_mixture(&outer).unwrap();
        for (prior_c, member) in &inner.members {
            for x in 0..256usize {
                let pc = member.probability(x, 8);
                if pc > 0.0 {
                    let ratio = outer_mixture.terminal[x] / pc;
                    assert!(ratio >= 0.25 * prior_c - 1e-12);
                }
            }
        }
    }

    #[test]
    fn kl_of_identical_measures_is_zero() {
        let mixture = exact_mixture(&bern_pair(8)).unwrap();
        let series = cumulative_kl(&mixture, &mixture, 8).unwrap();
        for &d in &series.d {
            assert!(d.abs() < 1e-14);
        }
    }

    #[test]
    fn kl_partial_sums_bounded_and_match_telescoping() {
        let class = bern_pair(12);
        let mixture = exact_mixture(&class).unwrap();
        let member: Vec<f64> = (0..1usize << 12)
            .map(|x| class.members[0].1.probability(x, 12))
            .collect();
        let p = ExactMeasure::new(12, member);
        let series = cumulative_kl(&p, &mixture, 12).unwrap();

        // Non-decreasing partials, all within the 1-bit bound (-log2 0.5).
        for w in series.partial.windows(2) {
            assert!(w[1] >= w[0] - 1e-14);
        }
        for &s in &series.partial {
            assert!(s <= 1.0 + 1e-9, "partial {s}");
        }

        // Telescoping identity: sum of D_0..D_{m-1} equals the end-to-end
        // KL of the length-m prefix distributions.
        let pl = p.levels();
        let ql = mixture.levels();
        for m in 1..=12usize {
            let mut want = 0f64;
            for x in 0..1usize << m {
                if pl[m][x] > 0.0 {
                    want += pl[m][x] * (pl[m][x] / ql[m][x]).log2();
                }
            }
            assert!(
                (series.partial[m - 1] - want).abs() < 1e-10,
                "m={m}: {} vs {want}",
                series.partial[m - 1]
            );
        }
    }

    #[test]
    fn zero_q_conditional_reports_infinity() {
        // p puts mass on strings q assigns zero probability.
        let p = ExactMeasure::new(2, vec![0.25, 0.25, 0.25, 0.25]);
        let q = ExactMeasure::new(2, vec![0.5, 0.5, 0.0, 0.0]);
        let series = cumulative_kl(&p, &q, 2).unwrap();
        assert!(series.d.iter().any(|d| d.is_infinite()));
    }

    #[test]
    fn identity_only_class_is_a_fixed_point() {
        let class = CondClass {
            len: 5,
            members: vec![(1.0, CondMember::Identity)],
        };
        let iterates = iterate_mixture(&class, 4).unwrap();
        for m in &iterates {
            for (a, b) in m.terminal.iter().zip(&iterates[0].terminal) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn flip_pair_iteration_bounds_at_len_three() {
        // {identity 0.5, flip 0.5} at L=3: m^3(x) >= 0.5 m^2(x) everywhere,
        // and the k-step corollary m^3(x) >= 0.25 m^1(x).
        let class = shipped_cond_classes()
            .into_iter()
            .find(|(n, _)| *n == "flip-pair")
            .unwrap()
            .1;
        let iterates = iterate_mixture(&class, 3).unwrap();
        for x in 0..8usize {
            assert!(iterates[3].terminal[x] >= 0.5 * iterates[2].terminal[x] - 1e-12);
            assert!(iterates[3].terminal[x] >= 0.25 * iterates[1].terminal[x] - 1e-12);
        }
        let report = check_iteration_domination(&class, &iterates);
        assert!(report.holds, "{report:?}");
    }

    #[test]
    fn missing_identity_skips_with_warning() {
        let class = CondClass {
            len: 4,
            members: vec![(1.0, CondMember::FlipAll)],
        };
        let iterates = iterate_mixture(&class, 2).unwrap();
        let report = check_iteration_domination(&class, &iterates);
        assert!(report.identity_prior.is_none());
        assert!(!report.holds);
    }

    #[test]
    fn iterates_remain_distributions() {
        for (_, class) in shipped_cond_classes() {
            let iterates = iterate_mixture(&class, 3).unwrap();
            for m in &iterates {
                let total: f64 = m.terminal.iter().sum();
                let prior_sum: f64 = class.members.iter().map(|(p, _)| p).sum();
                // Total mass shrinks by the prior sum each step when < 1.
                assert!(total <= 1.0 + 1e-9);
                assert!(total > 0.0);
                let _ = prior_sum;
            }
        }
    }

    #[test]
    fn overweight_member_is_rejected() {
        let class = ToyClass {
            len: 3,
            members: vec![(
                1.0,
                Member::Table {
                    probs: vec![0.3; 8], // sums to 2.4
                },
            )],
        };
        assert!(exact_mixture(&class).is_err());
    }

    #[test]
    fn shipped_suite_passes_end_to_end() {
        let classes: Vec<(String, ToyClass)> = shipped_classes()
            .into_iter()
            .map(|(n, c)| (n.to_string(), c))
            .collect();
        let conds: Vec<(String, CondClass)> = shipped_cond_classes()
            .into_iter()
            .map(|(n, c)| (n.to_string(), c))
            .collect();
        let lines = run_all_checks(&classes, &conds, 3).unwrap();
        assert!(!lines.is_empty());
        for line in &lines {
            assert!(line.pass, "{}: {}", line.name, line.detail);
        }
    }

    #[test]
    fn class_file_round_trip() {
        let text = "L 6\nbernoulli 0.25 prior 0.5\nmarkov 0.5 0.8 0.3 prior 0.5\n";
        match parse_class_file(text).unwrap() {
            ParsedClass::Measure(c) => {
                assert_eq!(c.len, 6);
                assert_eq!(c.members.len(), 2);
            }
            _ => panic!("expected measure class"),
        }
        let text = "L 4\nidentity prior 0.6\nshift 2 prior 0.4\n";
        match parse_class_file(text).unwrap() {
            ParsedClass::Conditional(c) => {
                assert_eq!(c.members.len(), 2);
                assert_eq!(c.identity_prior(), Some(0.6));
            }
            _ => panic!("expected conditional class"),
        }
        assert!(parse_class_file("bernoulli 0.5 prior 1.0\n").is_err());
        assert!(parse_class_file("L 4\nbernoulli 0.5 prior 0.5\nidentity prior 0.5\n").is_err());
    }
}
