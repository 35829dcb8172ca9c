//! Interaction records, per-user temporal streams and period batches.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use chrono::{DateTime, NaiveDate};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::ceil_fraction;
use crate::stats::quantile;

/// Sortable time key. Years and raw integers are kept as-is; calendar dates
/// become days since the Unix epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub i64);

impl Timestamp {
    /// Accepts integers (`2019`, `"1370822400"`), ISO dates, RFC 3339
    /// datetimes and the `MM DD, YYYY` style used by review dumps.
    pub fn parse(value: &Value) -> Option<Self> {
        match value {
            Value::Number(n) => n
                .as_i64()
                .or_else(|| n.as_f64().filter(|f| f.fract() == 0.0).map(|f| f as i64))
                .map(Timestamp),
            Value::String(s) => Self::parse_str(s),
            _ => None,
        }
    }

    pub fn parse_str(raw: &str) -> Option<Self> {
        let s = raw.trim();
        if let Ok(n) = s.parse::<i64>() {
            return Some(Timestamp(n));
        }
        let epoch = NaiveDate::from_ymd_opt(1970, 1, 1)?;
        let days = |d: NaiveDate| Timestamp((d - epoch).num_days());
        if let Ok(d) = NaiveDate::parse_from_str(s, "%Y-%m-%d") {
            return Some(days(d));
        }
        if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
            return Some(days(dt.date_naive()));
        }
        if let Ok(d) = NaiveDate::parse_from_str(s, "%m %d, %Y") {
            return Some(days(d));
        }
        None
    }
}

/// One (query, response) pair from a user's history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: String,
    pub timestamp: Timestamp,
    pub query: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub aux: BTreeMap<String, String>,
}

/// Identity used for de-duplication; `aux` does not participate.
pub type InteractionKey<'a> = (&'a str, Timestamp, &'a str, &'a str);

impl Interaction {
    pub fn new(
        user_id: impl Into<String>,
        timestamp: i64,
        query: impl Into<String>,
        response: impl Into<String>,
    ) -> Self {
        Interaction {
            user_id: user_id.into(),
            timestamp: Timestamp(timestamp),
            query: query.into(),
            response: response.into(),
            aux: BTreeMap::new(),
        }
    }

    pub fn key(&self) -> InteractionKey<'_> {
        (&self.user_id, self.timestamp, &self.query, &self.response)
    }

    /// Text used for indexing and embedding: query followed by response.
    pub fn joined_text(&self) -> String {
        format!("{} {}", self.query, self.response)
    }

    fn is_valid(&self) -> bool {
        !self.query.trim().is_empty() && !self.response.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserStream {
    pub user_id: String,
    pub interactions: Vec<Interaction>,
}

impl UserStream {
    /// Builds a stream, stable-sorting by timestamp so ties keep input order.
    pub fn new(user_id: impl Into<String>, mut interactions: Vec<Interaction>) -> Self {
        interactions.sort_by_key(|i| i.timestamp);
        UserStream {
            user_id: user_id.into(),
            interactions,
        }
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodBatch {
    pub period_index: usize,
    pub train: Vec<Interaction>,
    pub test: Vec<Interaction>,
}

/// Maps record field names onto interaction fields. A name starting with
/// `/` is treated as a JSON pointer into nested records.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldMapping {
    pub user_id: String,
    pub timestamp: String,
    pub query: String,
    pub response: String,
    pub aux: Vec<String>,
}

impl Default for FieldMapping {
    fn default() -> Self {
        FieldMapping {
            user_id: "user_id".into(),
            timestamp: "timestamp".into(),
            query: "query".into(),
            response: "response".into(),
            aux: Vec::new(),
        }
    }
}

impl FieldMapping {
    fn lookup<'v>(record: &'v Value, field: &str) -> Option<&'v Value> {
        if field.starts_with('/') {
            record.pointer(field)
        } else {
            record.get(field)
        }
    }

    fn text(record: &Value, field: &str) -> Option<String> {
        match Self::lookup(record, field)? {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            Value::Bool(b) => Some(b.to_string()),
            _ => None,
        }
    }

    /// Extracts one interaction, or `None` when a required field is missing
    /// or empty.
    pub fn extract(&self, record: &Value) -> Option<Interaction> {
        let user_id = Self::text(record, &self.user_id)?;
        let timestamp = Timestamp::parse(Self::lookup(record, &self.timestamp)?)?;
        let query = Self::text(record, &self.query)?;
        let response = Self::text(record, &self.response)?;
        let aux = self
            .aux
            .iter()
            .filter_map(|f| Self::text(record, f).map(|v| (f.trim_start_matches('/').to_string(), v)))
            .collect();
        let interaction = Interaction {
            user_id,
            timestamp,
            query,
            response,
            aux,
        };
        interaction.is_valid().then_some(interaction)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedInteractions {
    pub interactions: Vec<Interaction>,
    pub skipped: usize,
}

/// Reads line-delimited JSON. Blank lines are ignored; malformed lines and
/// records missing required fields are skipped and counted.
pub fn load_interactions(path: impl AsRef<Path>, schema: &FieldMapping) -> Result<LoadedInteractions> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&raw, schema)
}

pub fn parse_interactions(raw: &str, schema: &FieldMapping) -> Result<LoadedInteractions> {
    let mut interactions = Vec::new();
    let mut skipped = 0;
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        match serde_json::from_str::<Value>(line).ok().and_then(|v| schema.extract(&v)) {
            Some(i) => interactions.push(i),
            None => skipped += 1,
        }
    }
    if interactions.is_empty() {
        return Err(Error::Data(format!(
            "no parseable interaction records ({skipped} skipped)"
        )));
    }
    Ok(LoadedInteractions {
        interactions,
        skipped,
    })
}

/// Groups interactions by user (sorted by user id) and orders each stream.
pub fn build_streams(interactions: Vec<Interaction>) -> Vec<UserStream> {
    let mut by_user: BTreeMap<String, Vec<Interaction>> = BTreeMap::new();
    for i in interactions {
        by_user.entry(i.user_id.clone()).or_default().push(i);
    }
    by_user
        .into_iter()
        .map(|(user, items)| UserStream::new(user, items))
        .collect()
}

/// Contiguous chronological partition into `n_periods` near-equal parts;
/// the earliest periods absorb the remainder.
pub fn partition_periods(stream: &UserStream, n_periods: usize) -> Result<Vec<Vec<Interaction>>> {
    if n_periods == 0 {
        return Err(Error::InvalidArgument("n_periods must be at least 1".into()));
    }
    let n = stream.len();
    if n == 0 {
        return Err(Error::Data(format!("user {} has an empty stream", stream.user_id)));
    }
    if n_periods > n {
        return Err(Error::Data(format!(
            "user {} has {n} interactions, fewer than {n_periods} periods",
            stream.user_id
        )));
    }
    let base = n / n_periods;
    let extra = n % n_periods;
    let mut out = Vec::with_capacity(n_periods);
    let mut start = 0;
    for p in 0..n_periods {
        let size = base + usize::from(p < extra);
        out.push(stream.interactions[start..start + size].to_vec());
        start += size;
    }
    Ok(out)
}

/// Number of training items for a period of `n` items: `ceil(ratio * n)`,
/// reduced by one when that would leave no test item and `n >= 2`.
pub fn train_size(n: usize, train_ratio: f64) -> usize {
    let mut size = ceil_fraction(train_ratio, n).min(n);
    if n >= 2 && size == n {
        size = n - 1;
    }
    size
}

pub fn split_train_test(
    period_index: usize,
    period_interactions: &[Interaction],
    train_ratio: f64,
) -> Result<PeriodBatch> {
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train_ratio must lie in (0, 1), got {train_ratio}"
        )));
    }
    let n = period_interactions.len();
    if n == 0 {
        return Err(Error::Data(format!("period {period_index} has no interactions")));
    }
    let cut = train_size(n, train_ratio);
    Ok(PeriodBatch {
        period_index,
        train: period_interactions[..cut].to_vec(),
        test: period_interactions[cut..].to_vec(),
    })
}

/// Partitions a stream and splits every period.
pub fn period_batches(stream: &UserStream, n_periods: usize, train_ratio: f64) -> Result<Vec<PeriodBatch>> {
    partition_periods(stream, n_periods)?
        .iter()
        .enumerate()
        .map(|(t, items)| split_train_test(t, items, train_ratio))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UserGroup {
    Small,
    Large,
    Neither,
}

/// Labels users by stream size. Percentiles (0..=100) are interpolated over
/// the size distribution; `size <= small cutoff` is small, `size >= large
/// cutoff` is large, and a user meeting both is small.
pub fn categorize_users(
    streams: &[UserStream],
    small_pct: f64,
    large_pct: f64,
) -> Result<HashMap<String, UserGroup>> {
    if streams.len() < 2 {
        return Err(Error::InvalidArgument("categorization needs at least two users".into()));
    }
    let sizes: Vec<f64> = streams.iter().map(|s| s.len() as f64).collect();
    let small_cut = quantile(&sizes, small_pct / 100.0).expect("non-empty");
    let large_cut = quantile(&sizes, large_pct / 100.0).expect("non-empty");
    Ok(streams
        .iter()
        .map(|s| {
            let n = s.len() as f64;
            let group = if n <= small_cut {
                UserGroup::Small
            } else if n >= large_cut {
                UserGroup::Large
            } else {
                UserGroup::Neither
            };
            (s.user_id.clone(), group)
        })
        .collect())
}
