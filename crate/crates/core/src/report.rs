//! CSV writers for scores and experiment results.
//!
//! Numbers are printed with 9 significant digits in the shortest of fixed or
//! exponent notation, so re-emitting a result is byte-identical.

use std::fmt::Write as _;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::influence::ScoreVector;
use crate::refine::ExperimentResult;

pub const RAW_HEADER: &str = "fold,ratio,seed,accuracy,n_removed,recall,precision";
pub const SUMMARY_HEADER: &str = "ratio,mean,std";
pub const SCORES_HEADER: &str = "index,subject_id,label,score,metric_tag";

/// `%.9g`-style formatting. NaN prints as `NaN`.
pub fn fmt_num(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn raw_csv(r: &ExperimentResult) -> String {
    let mut out = format!("{RAW_HEADER}\n");
    for c in &r.cells {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            c.fold,
            fmt_num(c.ratio),
            c.seed,
            fmt_num(c.accuracy),
            c.n_removed,
            fmt_num(c.recall),
            fmt_num(c.precision)
        )
        .expect("writing to a String");
    }
    out
}

pub fn summary_csv(r: &ExperimentResult) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for s in &r.summary {
        writeln!(out, "{},{},{}", fmt_num(s.ratio), fmt_num(s.mean), fmt_num(s.std))
            .expect("writing to a String");
    }
    out
}

pub fn scores_csv(d: &Dataset, s: &ScoreVector) -> Result<String> {
    if s.len() != d.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} trials",
            s.len(),
            d.len()
        )));
    }
    let mut out = format!("{SCORES_HEADER}\n");
    for (i, (t, score)) in d.trials.iter().zip(&s.scores).enumerate() {
        writeln!(
            out,
            "{i},{},{},{},{}",
            t.subject_id,
            t.label,
            fmt_num(*score),
            s.metric
        )
        .expect("writing to a String");
    }
    Ok(out)
}
