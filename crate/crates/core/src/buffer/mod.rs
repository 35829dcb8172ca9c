//! Per-user replay buffer: merging drift samples with the previous buffer
//! and retaining at most `n_max` of them by post-update residual score.

pub mod cluster;
pub mod embed;

use std::collections::HashSet;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Interaction;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub use cluster::{kmeans, select_k, silhouette, ClusterConfig, Clustering, KMeansResult};
pub use embed::{Embedder, HashedTfEmbedder};

pub const BUFFER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: serde::de::DeserializeOwned"))]
pub struct BufferEntry<T> {
    pub interaction: Interaction,
    pub post_score: T,
    /// Not persisted; recomputed when clustering needs it.
    #[serde(skip)]
    pub embedding: Option<Vec<T>>,
}

impl<T> BufferEntry<T> {
    pub fn new(interaction: Interaction, post_score: T) -> Self {
        BufferEntry {
            interaction,
            post_score,
            embedding: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: serde::de::DeserializeOwned"))]
pub struct ReplayBuffer<T> {
    pub n_max: usize,
    pub entries: Vec<BufferEntry<T>>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound(deserialize = "T: serde::de::DeserializeOwned"))]
struct BufferDoc<T> {
    version: u32,
    n_max: usize,
    entries: Vec<BufferEntry<T>>,
}

impl<T: Real> ReplayBuffer<T> {
    pub fn empty(n_max: usize) -> Self {
        ReplayBuffer {
            n_max,
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn interactions(&self) -> impl Iterator<Item = &Interaction> {
        self.entries.iter().map(|e| &e.interaction)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = BufferDoc {
            version: BUFFER_VERSION,
            n_max: self.n_max,
            entries: self.entries.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(raw: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(raw)?;
        let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if found != BUFFER_VERSION {
            return Err(Error::Version {
                found,
                expected: BUFFER_VERSION,
            });
        }
        let doc: BufferDoc<T> = serde_json::from_value(value)?;
        if doc.entries.len() > doc.n_max {
            return Err(Error::Data(format!(
                "buffer holds {} entries over its budget of {}",
                doc.entries.len(),
                doc.n_max
            )));
        }
        if doc.entries.iter().any(|e| !e.post_score.is_finite()) {
            return Err(Error::NonFinite("buffer post_score"));
        }
        Ok(ReplayBuffer {
            n_max: doc.n_max,
            entries: doc.entries,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }
}

/// Union of the drift set and the previous buffer by interaction identity.
/// Drift items come first; on collisions the drift copy is kept.
pub fn merge_candidates<T>(drift_set: &[Interaction], prev: &ReplayBuffer<T>) -> Vec<Interaction> {
    let mut seen = HashSet::new();
    let mut pool = Vec::with_capacity(drift_set.len() + prev.entries.len());
    for it in drift_set.iter().chain(prev.entries.iter().map(|e| &e.interaction)) {
        if seen.insert(it.key()) {
            pool.push(it.clone());
        }
    }
    pool
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionPolicy {
    #[default]
    GlobalHighest,
    ClusterWise,
    ClusterRound,
    Random,
}

impl RetentionPolicy {
    pub const ALL: [RetentionPolicy; 4] = [
        RetentionPolicy::GlobalHighest,
        RetentionPolicy::ClusterWise,
        RetentionPolicy::ClusterRound,
        RetentionPolicy::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RetentionPolicy::GlobalHighest => "global_highest",
            RetentionPolicy::ClusterWise => "cluster_wise",
            RetentionPolicy::ClusterRound => "cluster_round",
            RetentionPolicy::Random => "random",
        }
    }

    pub fn uses_clusters(self) -> bool {
        matches!(self, RetentionPolicy::ClusterWise | RetentionPolicy::ClusterRound)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetentionConfig {
    pub policy: RetentionPolicy,
    pub n_max: usize,
    /// Seed for the `random` policy.
    pub seed: u64,
    pub cluster: ClusterConfig,
}

impl Default for RetentionConfig {
    fn default() -> Self {
        RetentionConfig {
            policy: RetentionPolicy::GlobalHighest,
            n_max: 50,
            seed: 0,
            cluster: ClusterConfig::default(),
        }
    }
}

/// Highest score first, earlier timestamp on ties, then pool order.
fn by_priority<T: Real>(pool: &[(Interaction, T)], idx: &mut [usize]) {
    idx.sort_by(|&a, &b| {
        pool[b]
            .1
            .partial_cmp(&pool[a].1)
            .expect("finite scores")
            .then(pool[a].0.timestamp.cmp(&pool[b].0.timestamp))
            .then(a.cmp(&b))
    });
}

fn validate<T: Real>(pool: &[(Interaction, T)], n_max: usize) -> Result<()> {
    if n_max == 0 {
        return Err(Error::Config("n_max must be at least 1".into()));
    }
    if pool.iter().any(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFinite("retention post_score"));
    }
    Ok(())
}

fn build<T: Real>(pool: Vec<(Interaction, T)>, picked: &[usize], embeddings: Option<Vec<Vec<T>>>, n_max: usize) -> ReplayBuffer<T> {
    let mut slots: Vec<Option<(Interaction, T)>> = pool.into_iter().map(Some).collect();
    let mut embeddings: Option<Vec<Option<Vec<T>>>> = embeddings.map(|e| e.into_iter().map(Some).collect());
    let entries = picked
        .iter()
        .map(|&i| {
            let (interaction, post_score) = slots[i].take().expect("each index picked once");
            BufferEntry {
                interaction,
                post_score,
                embedding: embeddings.as_mut().and_then(|e| e[i].take()),
            }
        })
        .collect();
    ReplayBuffer { n_max, entries }
}

/// Applies the retention rule to a re-scored pool. Pools that already fit
/// the budget are kept verbatim, in pool order.
pub fn retain<T: Real>(
    pool: Vec<(Interaction, T)>,
    cfg: &RetentionConfig,
    embedder: &dyn Embedder<T>,
) -> Result<ReplayBuffer<T>> {
    validate(&pool, cfg.n_max)?;
    let n = pool.len();
    if n <= cfg.n_max {
        let all: Vec<usize> = (0..n).collect();
        return Ok(build(pool, &all, None, cfg.n_max));
    }
    if !cfg.policy.uses_clusters() {
        let picked = pick_unclustered(&pool, cfg.policy, cfg.n_max, cfg.seed);
        return Ok(build(pool, &picked, None, cfg.n_max));
    }
    let vectors: Vec<Vec<T>> = pool.iter().map(|(it, _)| embedder.embed_interaction(it)).collect();
    let clustering = select_k(&vectors, &cfg.cluster)?;
    log::debug!("retention clustered {n} candidates into K = {}", clustering.k);
    let picked = pick_clustered(&pool, &clustering.assignments, cfg.policy, cfg.n_max);
    Ok(build(pool, &picked, Some(vectors), cfg.n_max))
}

/// Same as [`retain`] with cluster assignments supplied by the caller.
/// Non-cluster policies ignore `assignments`.
pub fn retain_clustered<T: Real>(
    pool: Vec<(Interaction, T)>,
    assignments: &[usize],
    cfg: &RetentionConfig,
) -> Result<ReplayBuffer<T>> {
    validate(&pool, cfg.n_max)?;
    if assignments.len() != pool.len() {
        return Err(Error::InvalidArgument("one cluster assignment per pool item is required".into()));
    }
    let n = pool.len();
    let picked: Vec<usize> = if n <= cfg.n_max {
        (0..n).collect()
    } else if cfg.policy.uses_clusters() {
        pick_clustered(&pool, assignments, cfg.policy, cfg.n_max)
    } else {
        pick_unclustered(&pool, cfg.policy, cfg.n_max, cfg.seed)
    };
    Ok(build(pool, &picked, None, cfg.n_max))
}

fn pick_unclustered<T: Real>(pool: &[(Interaction, T)], policy: RetentionPolicy, n_max: usize, seed: u64) -> Vec<usize> {
    match policy {
        RetentionPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = index::sample(&mut rng, pool.len(), n_max).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            by_priority(pool, &mut idx);
            idx.truncate(n_max);
            idx
        }
    }
}

fn pick_clustered<T: Real>(pool: &[(Interaction, T)], assignments: &[usize], policy: RetentionPolicy, n_max: usize) -> Vec<usize> {
    let k = assignments.iter().copied().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &c) in assignments.iter().enumerate() {
        members[c].push(i);
    }
    members.retain(|m| !m.is_empty());
    for m in &mut members {
        by_priority(pool, m);
    }
    let mut picked = Vec::with_capacity(n_max);
    match policy {
        RetentionPolicy::ClusterWise => {
            let mean = |m: &Vec<usize>| m.iter().map(|&i| pool[i].1).sum::<T>() / T::from_usize_lossy(m.len());
            let mut order: Vec<usize> = (0..members.len()).collect();
            order.sort_by(|&a, &b| mean(&members[b]).partial_cmp(&mean(&members[a])).expect("finite").then(a.cmp(&b)));
            for c in order {
                let room = n_max - picked.len();
                if room == 0 {
                    break;
                }
                // the last cluster to fit partially contributes its best items
                picked.extend(members[c].iter().take(room));
            }
        }
        _ => {
            let top = |m: &Vec<usize>| pool[m[0]].1;
            let mut order: Vec<usize> = (0..members.len()).collect();
            order.sort_by(|&a, &b| {
                top(&members[b])
                    .partial_cmp(&top(&members[a]))
                    .expect("finite")
                    .then(pool[members[a][0]].0.timestamp.cmp(&pool[members[b][0]].0.timestamp))
                    .then(a.cmp(&b))
            });
            let mut round = 0;
            while picked.len() < n_max {
                for &c in &order {
                    if let Some(&i) = members[c].get(round) {
                        picked.push(i);
                        if picked.len() == n_max {
                            break;
                        }
                    }
                }
                round += 1;
            }
        }
    }
    picked
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn it(ts: i64, text: &str) -> Interaction {
        Interaction::new("u", ts, format!("q {text}"), format!("r {text}"))
    }

    fn pool_of(scores: &[f64]) -> Vec<(Interaction, f64)> {
        scores.iter().enumerate().map(|(i, &s)| (it(i as i64, &format!("w{i}")), s)).collect()
    }

    fn cfg(policy: RetentionPolicy, n_max: usize) -> RetentionConfig {
        RetentionConfig {
            policy,
            n_max,
            ..Default::default()
        }
    }

    fn scores_of(buf: &ReplayBuffer<f64>) -> Vec<f64> {
        buf.entries.iter().map(|e| e.post_score).collect()
    }

    #[test]
    fn merge_cases() {
        let drift: Vec<Interaction> = (0..3).map(|i| it(i, "d")).collect();
        let mut prev = ReplayBuffer::<f64>::empty(10);
        prev.entries = (10..12).map(|i| BufferEntry::new(it(i, "b"), 0.0)).collect();
        assert_eq!(merge_candidates(&drift, &prev).len(), 5);

        let subset: Vec<Interaction> = prev.interactions().take(1).cloned().collect();
        let pool = merge_candidates(&subset, &prev);
        assert_eq!(pool, prev.interactions().cloned().collect::<Vec<_>>());

        assert!(merge_candidates::<f64>(&[], &ReplayBuffer::empty(3)).is_empty());
    }

    #[test]
    fn merge_prefers_drift_copy() {
        let mut prev = ReplayBuffer::<f64>::empty(4);
        let mut old = it(1, "x");
        old.aux.insert("origin".into(), "buffer".into());
        prev.entries.push(BufferEntry::new(old, 1.0));
        let mut fresh = it(1, "x");
        fresh.aux.insert("origin".into(), "drift".into());
        let pool = merge_candidates(&[fresh.clone()], &prev);
        assert_eq!(pool, vec![fresh]);
    }

    #[test]
    fn small_pool_kept_verbatim() {
        for policy in RetentionPolicy::ALL {
            let pool = pool_of(&[0.3, -1.0, 2.0]);
            let buf = retain(pool.clone(), &cfg(policy, 50), &HashedTfEmbedder::default()).unwrap();
            assert_eq!(buf.interactions().cloned().collect::<Vec<_>>(), pool.into_iter().map(|p| p.0).collect::<Vec<_>>());
        }
    }

    #[test]
    fn global_highest_sixty_to_fifty() {
        let scores: Vec<f64> = (0..60).map(|i| ((i * 37) % 60) as f64 * 0.5 - 7.0).collect();
        let buf = retain(pool_of(&scores), &cfg(RetentionPolicy::GlobalHighest, 50), &HashedTfEmbedder::default()).unwrap();
        let mut oracle = scores.clone();
        oracle.sort_by(|a, b| b.partial_cmp(a).unwrap());
        oracle.truncate(50);
        assert_eq!(scores_of(&buf), oracle);
    }

    #[test]
    fn global_highest_ties_prefer_earlier() {
        let pool = vec![(it(5, "late"), 1.0), (it(2, "early"), 1.0), (it(9, "low"), 0.0)];
        let buf = retain(pool, &cfg(RetentionPolicy::GlobalHighest, 1), &HashedTfEmbedder::default()).unwrap();
        assert_eq!(buf.entries[0].interaction.timestamp.0, 2);
    }

    #[test]
    fn cluster_round_two_by_four() {
        // cluster 0 holds the top item overall
        let scores = [9.0, 5.0, 4.0, 3.0, 8.0, 7.0, 6.0, 2.0];
        let assignments = [0, 0, 0, 0, 1, 1, 1, 1];
        let buf = retain_clustered(pool_of(&scores), &assignments, &cfg(RetentionPolicy::ClusterRound, 3)).unwrap();
        assert_eq!(scores_of(&buf), vec![9.0, 8.0, 5.0]);
    }

    #[test]
    fn cluster_wise_whole_clusters_then_partial() {
        // means: c0 = 1.0, c1 = 5.0, c2 = 3.0
        let scores = [0.0, 2.0, 4.0, 6.0, 1.0, 3.0, 5.0];
        let assignments = [0, 0, 1, 1, 2, 2, 2];
        let buf = retain_clustered(pool_of(&scores), &assignments, &cfg(RetentionPolicy::ClusterWise, 4)).unwrap();
        assert_eq!(scores_of(&buf), vec![6.0, 4.0, 5.0, 3.0]);
    }

    #[test]
    fn clustered_retain_with_embedder() {
        let mut pool = Vec::new();
        for i in 0..6 {
            pool.push((it(i, "apple banana cherry"), i as f64));
            pool.push((it(100 + i, "engine piston valve"), 10.0 + i as f64));
        }
        let buf = retain(pool, &cfg(RetentionPolicy::ClusterRound, 4), &HashedTfEmbedder::default()).unwrap();
        assert_eq!(scores_of(&buf), vec![15.0, 5.0, 14.0, 4.0]);
        assert!(buf.entries.iter().all(|e| e.embedding.is_some()));

        let mut pool = Vec::new();
        for i in 0..6 {
            pool.push((it(i, "apple banana cherry"), i as f64));
            pool.push((it(100 + i, "engine piston valve"), 10.0 + i as f64));
        }
        let buf = retain(pool, &cfg(RetentionPolicy::ClusterWise, 8), &HashedTfEmbedder::default()).unwrap();
        assert_eq!(scores_of(&buf), vec![15.0, 14.0, 13.0, 12.0, 11.0, 10.0, 5.0, 4.0]);
    }

    #[test]
    fn zero_budget_rejected() {
        assert!(retain(pool_of(&[1.0]), &cfg(RetentionPolicy::GlobalHighest, 0), &HashedTfEmbedder::default()).is_err());
    }

    #[test]
    fn persistence_round_trip() {
        let mut buf = retain(pool_of(&[1.5, -0.25, 3.0]), &cfg(RetentionPolicy::GlobalHighest, 5), &HashedTfEmbedder::default()).unwrap();
        buf.entries[0].embedding = Some(vec![1.0; 4]);
        let raw = buf.to_json().unwrap();
        let value: serde_json::Value = serde_json::from_str(&raw).unwrap();
        assert_eq!(value["version"], 1);
        assert!(value["entries"][0].get("embedding").is_none());
        let back = ReplayBuffer::<f64>::from_json(&raw).unwrap();
        assert_eq!(scores_of(&back), scores_of(&buf));
        assert!(back.entries[0].embedding.is_none());

        let bad = raw.replace("\"version\": 1", "\"version\": 7");
        assert!(matches!(ReplayBuffer::<f64>::from_json(&bad), Err(Error::Version { found: 7, .. })));
    }

    proptest! {
        #[test]
        fn global_highest_matches_sort_oracle(scores in prop::collection::vec(-50i32..50, 1..200), n_max in 1usize..80) {
            let scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 4.0).collect();
            let pool = pool_of(&scores);
            let buf = retain(pool.clone(), &cfg(RetentionPolicy::GlobalHighest, n_max), &HashedTfEmbedder::default()).unwrap();
            let mut idx: Vec<usize> = (0..scores.len()).collect();
            // timestamps equal pool index here, so the tie-break is index order
            idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            if scores.len() <= n_max {
                prop_assert_eq!(scores_of(&buf), scores.clone());
            } else {
                let oracle: Vec<f64> = idx.iter().take(n_max).map(|&i| scores[i]).collect();
                prop_assert_eq!(scores_of(&buf), oracle);
            }
        }

        #[test]
        fn budget_holds_over_periods(batches in prop::collection::vec(prop::collection::vec(-20i32..20, 0..30), 100), n_max in 1usize..40, policy in 0usize..4) {
            let policy = RetentionPolicy::ALL[policy];
            let mut buf = ReplayBuffer::<f64>::empty(n_max);
            let mut ts = 0i64;
            for batch in batches {
                let drift: Vec<Interaction> = batch.iter().map(|_| { ts += 1; it(ts, &format!("t{}", ts % 7)) }).collect();
                let pool = merge_candidates(&drift, &buf);
                let scored: Vec<(Interaction, f64)> = pool.into_iter().map(|i| { let s = (i.timestamp.0 % 13) as f64; (i, s) }).collect();
                let did_fit = scored.len() <= n_max;
                let before = scored.clone();
                buf = retain(scored, &RetentionConfig { policy, n_max, seed: ts as u64, ..Default::default() }, &HashedTfEmbedder { dim: 16 }).unwrap();
                prop_assert!(buf.len() <= n_max);
                let keys: HashSet<_> = buf.interactions().map(|i| i.key()).collect();
                prop_assert_eq!(keys.len(), buf.len());
                if did_fit {
                    prop_assert_eq!(buf.len(), before.len());
                }
            }
        }

        #[test]
        fn cluster_round_covers_every_cluster(scores in prop::collection::vec(-10i32..10, 4..60), k in 1usize..5, extra in 0usize..5) {
            let assignments: Vec<usize> = (0..scores.len()).map(|i| (i * 7 + 3) % k).collect();
            let present: HashSet<usize> = assignments.iter().copied().collect();
            let n_max = (present.len() + extra).min(scores.len());
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let buf = retain_clustered(pool_of(&scores), &assignments, &cfg(RetentionPolicy::ClusterRound, n_max)).unwrap();
            let covered: HashSet<usize> = buf.interactions().map(|i| assignments[i.timestamp.0 as usize]).collect();
            prop_assert_eq!(covered, present);
        }

        #[test]
        fn random_policy_reproducible(scores in prop::collection::vec(-10i32..10, 2..60), seed in any::<u64>()) {
            let scores: Vec<f64> = scores.into_iter().map(f64::from).collect();
            let n_max = (scores.len() / 2).max(1);
            let c = RetentionConfig { policy: RetentionPolicy::Random, n_max, seed, ..Default::default() };
            let a = retain(pool_of(&scores), &c, &HashedTfEmbedder::default()).unwrap();
            let b = retain(pool_of(&scores), &c, &HashedTfEmbedder::default()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn silhouette_in_range(points in prop::collection::vec((0i32..20, 0i32..20), 3..25), k in 2usize..5) {
            let vectors: Vec<Vec<f64>> = points.iter().map(|&(x, y)| vec![x as f64, y as f64]).collect();
            if let Ok(run) = kmeans(&vectors, k, 3, 100) {
                let s = silhouette(&vectors, &run.assignments);
                prop_assert!((-1.0..=1.0).contains(&s));
            }
        }
    }
}
