//! ROUGE-1 / ROUGE-L and report aggregation.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::lm::words;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores<T> {
    pub r1_precision: T,
    pub r1_recall: T,
    pub r1_f1: T,
    pub rl_f1: T,
}

fn f1<T: Real>(p: T, r: T) -> T {
    if p + r == T::zero() {
        T::zero()
    } else {
        T::lit(2.0) * p * r / (p + r)
    }
}

/// Clipped unigram overlap: (precision, recall, f1).
pub fn rouge1_tokens<T: Real>(reference: &[String], hypothesis: &[String]) -> (T, T, T) {
    if reference.is_empty() || hypothesis.is_empty() {
        return (T::zero(), T::zero(), T::zero());
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in reference {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in hypothesis {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    let p = T::from_usize_lossy(overlap) / T::from_usize_lossy(hypothesis.len());
    let r = T::from_usize_lossy(overlap) / T::from_usize_lossy(reference.len());
    (p, r, f1(p, r))
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

pub fn rouge_l_tokens<T: Real>(reference: &[String], hypothesis: &[String]) -> T {
    if reference.is_empty() || hypothesis.is_empty() {
        return T::zero();
    }
    let l = T::from_usize_lossy(lcs_len(reference, hypothesis));
    f1(l / T::from_usize_lossy(hypothesis.len()), l / T::from_usize_lossy(reference.len()))
}

pub fn rouge1<T: Real>(reference: &str, hypothesis: &str) -> RougeScores<T> {
    let (r, h) = (words(reference), words(hypothesis));
    let (p, rc, f) = rouge1_tokens(&r, &h);
    RougeScores {
        r1_precision: p,
        r1_recall: rc,
        r1_f1: f,
        rl_f1: T::zero(),
    }
}

pub fn rouge_l<T: Real>(reference: &str, hypothesis: &str) -> T {
    rouge_l_tokens(&words(reference), &words(hypothesis))
}

/// Both metrics in one pass over the tokenized strings.
pub fn score<T: Real>(reference: &str, hypothesis: &str) -> RougeScores<T> {
    let (r, h) = (words(reference), words(hypothesis));
    let (p, rc, f) = rouge1_tokens(&r, &h);
    RougeScores {
        r1_precision: p,
        r1_recall: rc,
        r1_f1: f,
        rl_f1: rouge_l_tokens(&r, &h),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryScore<T> {
    pub user_id: String,
    pub period: usize,
    pub scores: RougeScores<T>,
}

/// Mean of `values` summed in sorted order, so the result does not depend
/// on input order.
fn stable_mean<T: Real>(values: &mut [RougeScores<T>]) -> RougeScores<T> {
    let n = T::from_usize_lossy(values.len());
    let field = |values: &mut [RougeScores<T>], get: fn(&RougeScores<T>) -> T| {
        let mut xs: Vec<T> = values.iter().map(get).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
        xs.into_iter().sum::<T>() / n
    };
    RougeScores {
        r1_precision: field(values, |s| s.r1_precision),
        r1_recall: field(values, |s| s.r1_recall),
        r1_f1: field(values, |s| s.r1_f1),
        rl_f1: field(values, |s| s.rl_f1),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report<T> {
    /// Mean over the queries of each (user, period) cell.
    pub cells: BTreeMap<(String, usize), RougeScores<T>>,
    pub query_counts: BTreeMap<(String, usize), usize>,
    /// Mean over users of the cell means, per period.
    pub per_period: BTreeMap<usize, RougeScores<T>>,
    /// Equal-weight mean over the periods present.
    pub period_avg: Option<RougeScores<T>>,
}

impl<T: Real> Report<T> {
    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["user_id", "period", "r1_f1", "rl_f1"]).map_err(csv_err)?;
        let fmt = |x: T| format!("{:.4}", x.as_f64());
        for ((user, period), s) in &self.cells {
            w.write_record([user.as_str(), &period.to_string(), &fmt(s.r1_f1), &fmt(s.rl_f1)])
                .map_err(csv_err)?;
        }
        for (period, s) in &self.per_period {
            w.write_record(["ALL", &period.to_string(), &fmt(s.r1_f1), &fmt(s.rl_f1)])
                .map_err(csv_err)?;
        }
        if let Some(s) = &self.period_avg {
            w.write_record(["ALL", "period_avg", &fmt(s.r1_f1), &fmt(s.rl_f1)]).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

pub(crate) fn csv_err(e: csv::Error) -> crate::error::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io.into(),
        other => crate::error::Error::Data(format!("csv: {other:?}")),
    }
}

pub fn aggregate<T: Real>(per_query: &[QueryScore<T>]) -> Report<T> {
    let mut grouped: BTreeMap<(String, usize), Vec<RougeScores<T>>> = BTreeMap::new();
    for q in per_query {
        grouped.entry((q.user_id.clone(), q.period)).or_default().push(q.scores);
    }
    if grouped.is_empty() {
        log::warn!("aggregating an empty set of query scores");
    }
    let mut report = Report::default();
    let mut by_period: BTreeMap<usize, Vec<RougeScores<T>>> = BTreeMap::new();
    for (key, mut values) in grouped {
        let mean = stable_mean(&mut values);
        by_period.entry(key.1).or_default().push(mean);
        report.query_counts.insert(key.clone(), values.len());
        report.cells.insert(key, mean);
    }
    for (period, mut means) in by_period {
        report.per_period.insert(period, stable_mean(&mut means));
    }
    if !report.per_period.is_empty() {
        let mut means: Vec<RougeScores<T>> = report.per_period.values().copied().collect();
        report.period_avg = Some(stable_mean(&mut means));
    }
    report
}
