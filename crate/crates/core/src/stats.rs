//! Agreement statistics between two per-question evaluations.
//!
//! Under independence, two evaluations with accuracies `a` and `b` agree on
//! a question (both right or both wrong) with probability
//! `a·b + (1−a)(1−b)`, so the agreement count over `s` questions is
//! `Binomial(s, p)`. The observed count is tested against the exact upper
//! tail.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{arg, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub s: usize,
    pub n_agree: usize,
    pub consistency: f64,
    pub a_exp: f64,
    pub a_cog: f64,
    pub p_expected: f64,
    pub p_value: f64,
}

fn index_by_id<'a, T>(records: &'a [(String, T)], side: &str) -> Result<HashMap<&'a str, &'a T>> {
    let mut map = HashMap::with_capacity(records.len());
    for (id, v) in records {
        if map.insert(id.as_str(), v).is_some() {
            return Err(arg(format!("duplicate question id '{id}' in {side} records")));
        }
    }
    Ok(map)
}

/// Pairs up two record sets by question id, requiring identical id sets.
fn align<'a, T>(a: &'a [(String, T)], b: &'a [(String, T)]) -> Result<Vec<(&'a T, &'a T)>> {
    let bmap = index_by_id(b, "second")?;
    index_by_id(a, "first")?;
    if a.len() != b.len() {
        return Err(arg(format!(
            "question id sets differ in size ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    a.iter()
        .map(|(id, va)| {
            bmap.get(id.as_str())
                .map(|vb| (va, *vb))
                .ok_or_else(|| arg(format!("question id '{id}' missing from second record set")))
        })
        .collect()
}

/// Returns `(s, n_agree, n_agree / s)`; agreement means both correct or
/// both incorrect.
pub fn consistency_ratio(
    records_exp: &[(String, bool)],
    records_cog: &[(String, bool)],
) -> Result<(usize, usize, f64)> {
    let pairs = align(records_exp, records_cog)?;
    if pairs.is_empty() {
        return Err(arg("no questions to compare"));
    }
    let agree = pairs.iter().filter(|(a, b)| a == b).count();
    Ok((pairs.len(), agree, agree as f64 / pairs.len() as f64))
}

/// Probability that two independent evaluations with the given accuracies
/// agree on one question.
pub fn expected_agreement(a_exp: f64, a_cog: f64) -> Result<f64> {
    for (name, v) in [("a_exp", a_exp), ("a_cog", a_cog)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(arg(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(a_exp * a_cog + (1.0 - a_exp) * (1.0 - a_cog))
}

/// The alternative parameterization `1 − (1−a)(1−b)`: probability that at
/// least one evaluation is correct. Kept for comparison only.
pub fn at_least_one_correct(a_exp: f64, a_cog: f64) -> f64 {
    1.0 - (1.0 - a_exp) * (1.0 - a_cog)
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `ln(n!) − ln(√(2πn)·(n/e)^n)`.
fn stirlerr(n: f64) -> f64 {
    const S0: f64 = 1.0 / 12.0;
    const S1: f64 = 1.0 / 360.0;
    const S2: f64 = 1.0 / 1260.0;
    const S3: f64 = 1.0 / 1680.0;
    const S4: f64 = 1.0 / 1188.0;
    if n <= 15.0 {
        // n is integral here; the direct form is accurate for small n.
        let ln_fact: f64 = (2..=n as u64).map(|k| (k as f64).ln()).sum();
        return ln_fact - (n + 0.5) * n.ln() + n - 0.5 * LN_2PI;
    }
    let nn = n * n;
    if n > 500.0 {
        (S0 - S1 / nn) / n
    } else if n > 80.0 {
        (S0 - (S1 - S2 / nn) / nn) / n
    } else if n > 35.0 {
        (S0 - (S1 - (S2 - S3 / nn) / nn) / nn) / n
    } else {
        (S0 - (S1 - (S2 - (S3 - S4 / nn) / nn) / nn) / nn) / n
    }
}

/// Deviance term `x·ln(x/np) + np − x`, evaluated without cancellation.
fn bd0(x: f64, np: f64) -> f64 {
    if (x - np).abs() < 0.1 * (x + np) {
        let mut v = (x - np) / (x + np);
        let mut s = (x - np) * v;
        if s.abs() < f64::MIN_POSITIVE {
            return s;
        }
        let mut ej = 2.0 * x * v;
        v *= v;
        for j in 1..1000 {
            ej *= v;
            let s1 = s + ej / (2 * j + 1) as f64;
            if s1 == s {
                return s1;
            }
            s = s1;
        }
    }
    x * (x / np).ln() + np - x
}

/// Natural log of the binomial probability mass `P(X = k)`, `X ~ Bin(n, p)`,
/// via the saddle-point expansion (accurate to a few ulps of the mass).
pub fn binomial_log_pmf(k: u64, n: u64, p: f64) -> f64 {
    let q = 1.0 - p;
    if k > n {
        return f64::NEG_INFINITY;
    }
    if p == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if q == 0.0 {
        return if k == n { 0.0 } else { f64::NEG_INFINITY };
    }
    let (x, nf) = (k as f64, n as f64);
    if k == 0 {
        if n == 0 {
            return 0.0;
        }
        return if p < 0.1 { -bd0(nf, nf * q) - nf * p } else { nf * q.ln() };
    }
    if k == n {
        return if q < 0.1 { -bd0(nf, nf * p) - nf * q } else { nf * p.ln() };
    }
    let lc = stirlerr(nf) - stirlerr(x) - stirlerr(nf - x) - bd0(x, nf * p) - bd0(nf - x, nf * q);
    let lf = LN_2PI + x.ln() + (-x / nf).ln_1p();
    lc - 0.5 * lf
}

/// Exact `P(X ≥ n_agree)` for `X ~ Binomial(s, p)`.
pub fn binomial_upper_pvalue(s: u64, p: f64, n_agree: u64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(arg(format!("p = {p} outside [0, 1]")));
    }
    if n_agree > s {
        return Err(arg(format!("n_agree = {n_agree} exceeds s = {s}")));
    }
    if n_agree == 0 {
        return Ok(1.0);
    }
    let mode = ((s as f64 + 1.0) * p).floor().min(s as f64) as u64;
    let peak = binomial_log_pmf(n_agree.max(mode), s, p);
    if peak == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    // Neumaier-compensated sum of exp(log_pmf - peak).
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for k in n_agree..=s {
        let term = (binomial_log_pmf(k, s, p) - peak).exp();
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
        if k > mode && term < 1e-20 * sum {
            break;
        }
    }
    Ok(((sum + comp) * peak.exp()).clamp(0.0, 1.0))
}

/// Full consistency analysis for aligned per-question correctness records.
pub fn consistency_report(
    records_exp: &[(String, bool)],
    records_cog: &[(String, bool)],
) -> Result<ConsistencyReport> {
    let (s, n_agree, consistency) = consistency_ratio(records_exp, records_cog)?;
    let acc = |r: &[(String, bool)]| r.iter().filter(|(_, c)| *c).count() as f64 / r.len() as f64;
    let a_exp = acc(records_exp);
    let a_cog = acc(records_cog);
    let p_expected = expected_agreement(a_exp, a_cog)?;
    let p_value = binomial_upper_pvalue(s as u64, p_expected, n_agree as u64)?;
    Ok(ConsistencyReport {
        s,
        n_agree,
        consistency,
        a_exp,
        a_cog,
        p_expected,
        p_value,
    })
}

/// Fraction of questions on which two checkpoints pick different options.
/// An unparsed answer (`None`) counts as its own option.
pub fn inconsistency_ratio(
    answers_a: &[(String, Option<usize>)],
    answers_b: &[(String, Option<usize>)],
) -> Result<f64> {
    let pairs = align(answers_a, answers_b)?;
    if pairs.is_empty() {
        return Err(arg("no questions to compare"));
    }
    let differ = pairs.iter().filter(|(a, b)| a != b).count();
    Ok(differ as f64 / pairs.len() as f64)
}
