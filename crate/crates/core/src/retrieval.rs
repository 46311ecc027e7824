//! Linear and attribute-bucket search over embedded galleries, plus
//! precision@k / MAP evaluation and a timing harness.
//!
//! Linear search ranks by squared Euclidean distance over `sls ∥ acs`.
//! Bucket search only visits the buckets keyed by the query's two most
//! probable colors × two most probable models and ranks by the `sls`
//! embedding alone. Rankings order by ascending distance, then ascending
//! gallery index. A gallery entry with the query's own `sample_idx` is never
//! ranked.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::time::Instant;

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::network::Embedding;
use crate::par::Exec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchMode {
    #[default]
    Linear,
    Bucket,
}

impl std::str::FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SearchMode::Linear),
            "bucket" => Ok(SearchMode::Bucket),
            other => Err(Error::Param(format!("unknown search mode '{other}'"))),
        }
    }
}

/// Ground-truth labels carried alongside an embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Labels {
    pub sample_idx: usize,
    pub vehicle_id: u32,
    pub color: u32,
    pub model: u32,
}

/// Labels plus network outputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedSample {
    pub labels: Labels,
    pub embedding: Embedding,
}

pub fn embed_dataset(embeddings: Vec<Embedding>, dataset: &Dataset) -> Vec<EmbeddedSample> {
    dataset
        .samples
        .iter()
        .zip(embeddings)
        .map(|(s, embedding)| EmbeddedSample {
            labels: Labels {
                sample_idx: s.sample_idx,
                vehicle_id: s.vehicle_id,
                color: s.color,
                model: s.model,
            },
            embedding,
        })
        .collect()
}

/// Two most probable classes, ties to the lower index. A single-class
/// distribution repeats its only class.
pub fn top2(probs: &[f64]) -> [u32; 2] {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let first = order.first().copied().unwrap_or(0) as u32;
    [first, order.get(1).map_or(first, |&i| i as u32)]
}

/// A search request.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub labels: Labels,
    pub sls: Vec<f64>,
    pub acs: Vec<f64>,
    pub colors: [u32; 2],
    pub models: [u32; 2],
}

impl Query {
    pub fn from_embedded(e: &EmbeddedSample) -> Self {
        Self {
            labels: e.labels,
            sls: e.embedding.sls.clone(),
            acs: e.embedding.acs.clone(),
            colors: top2(&e.embedding.color_probs),
            models: top2(&e.embedding.model_probs),
        }
    }
}

/// Flat row storage: entry `i` owns `sls[i·d_sls..]` and
/// `acs[i·d_acs..]`. Only the two most probable classes per attribute are
/// kept from the predicted distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    d_sls: usize,
    d_acs: usize,
    n_colors: usize,
    n_models: usize,
    labels: Vec<Labels>,
    sls: Vec<f64>,
    acs: Vec<f64>,
    colors: Vec<[u32; 2]>,
    models: Vec<[u32; 2]>,
}

impl Gallery {
    pub fn new(d_sls: usize, d_acs: usize, n_colors: usize, n_models: usize) -> Self {
        Self {
            d_sls,
            d_acs,
            n_colors,
            n_models,
            labels: Vec::new(),
            sls: Vec::new(),
            acs: Vec::new(),
            colors: Vec::new(),
            models: Vec::new(),
        }
    }

    pub fn from_embedded(items: &[EmbeddedSample], n_colors: usize, n_models: usize) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Param("cannot build a gallery from zero items".into()))?;
        let mut g = Gallery::new(first.embedding.sls.len(), first.embedding.acs.len(), n_colors, n_models);
        for e in items {
            if e.embedding.color_probs.len() != n_colors || e.embedding.model_probs.len() != n_models {
                return Err(Error::shape(format!(
                    "sample {} has {}+{} class probabilities, gallery expects {n_colors}+{n_models}",
                    e.labels.sample_idx,
                    e.embedding.color_probs.len(),
                    e.embedding.model_probs.len()
                )));
            }
            g.push(
                e.labels,
                &e.embedding.sls,
                &e.embedding.acs,
                top2(&e.embedding.color_probs),
                top2(&e.embedding.model_probs),
            )?;
        }
        Ok(g)
    }

    pub fn push(&mut self, labels: Labels, sls: &[f64], acs: &[f64], colors: [u32; 2], models: [u32; 2]) -> Result<()> {
        if sls.len() != self.d_sls || acs.len() != self.d_acs {
            return Err(Error::shape(format!(
                "entry dims sls {} / acs {} differ from gallery dims {} / {}",
                sls.len(),
                acs.len(),
                self.d_sls,
                self.d_acs
            )));
        }
        if colors.iter().any(|&c| c as usize >= self.n_colors) || models.iter().any(|&m| m as usize >= self.n_models) {
            return Err(Error::Validation(format!(
                "predicted classes {colors:?}/{models:?} outside {}x{} attribute space",
                self.n_colors, self.n_models
            )));
        }
        self.labels.push(labels);
        self.sls.extend_from_slice(sls);
        self.acs.extend_from_slice(acs);
        self.colors.push(colors);
        self.models.push(models);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_sls(&self) -> usize {
        self.d_sls
    }

    pub fn d_acs(&self) -> usize {
        self.d_acs
    }

    pub fn n_colors(&self) -> usize {
        self.n_colors
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn labels(&self, i: usize) -> &Labels {
        &self.labels[i]
    }

    pub fn sls(&self, i: usize) -> &[f64] {
        &self.sls[i * self.d_sls..(i + 1) * self.d_sls]
    }

    pub fn acs(&self, i: usize) -> &[f64] {
        &self.acs[i * self.d_acs..(i + 1) * self.d_acs]
    }

    /// Predicted (color, model) bucket key.
    pub fn bucket_key(&self, i: usize) -> (u32, u32) {
        (self.colors[i][0], self.models[i][0])
    }

    /// Entries sharing `query`'s vehicle id, excluding the query itself.
    pub fn ground_truth_count(&self, query: &Labels) -> usize {
        self.labels
            .iter()
            .filter(|l| l.vehicle_id == query.vehicle_id && l.sample_idx != query.sample_idx)
            .count()
    }
}

/// `(gallery index, distance)` pairs in ranking order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RankingList {
    pub items: Vec<(usize, f64)>,
}

impl RankingList {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Relevance of each ranked item to `vehicle_id`.
    pub fn hits(&self, gallery: &Gallery, vehicle_id: u32) -> Vec<bool> {
        self.items
            .iter()
            .map(|&(i, _)| gallery.labels(i).vehicle_id == vehicle_id)
            .collect()
    }

    /// Distances non-decreasing with index tie-breaks, no duplicates.
    pub fn is_well_ordered(&self) -> bool {
        let ordered = self.items.windows(2).all(|w| rank_cmp(&w[0], &w[1]) == Ordering::Less);
        let mut ids: Vec<usize> = self.items.iter().map(|p| p.0).collect();
        ids.sort_unstable();
        ids.dedup();
        ordered && ids.len() == self.items.len()
    }
}

fn rank_cmp(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    a.1.total_cmp(&b.1).then(a.0.cmp(&b.0))
}

fn top_k(mut scored: Vec<(usize, f64)>, k: usize) -> RankingList {
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, rank_cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(rank_cmp);
    RankingList { items: scored }
}

/// Squared distance over the concatenation `a1 ∥ a2` vs `b1 ∥ b2`,
/// accumulated left to right.
#[inline]
fn concat_sq_distance(a1: &[f64], a2: &[f64], b1: &[f64], b2: &[f64]) -> f64 {
    a1.iter()
        .chain(a2)
        .zip(b1.iter().chain(b2))
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum()
}

fn check_query(query: &Query, gallery: &Gallery, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Param("k must be at least 1".into()));
    }
    if query.sls.len() != gallery.d_sls || query.acs.len() != gallery.d_acs {
        return Err(Error::shape(format!(
            "query dims sls {} / acs {} differ from gallery dims {} / {}",
            query.sls.len(),
            query.acs.len(),
            gallery.d_sls,
            gallery.d_acs
        )));
    }
    Ok(())
}

/// Exhaustive scan over every gallery entry.
pub fn linear_search(query: &Query, gallery: &Gallery, k: usize) -> Result<RankingList> {
    check_query(query, gallery, k)?;
    if gallery.is_empty() {
        return Err(Error::Param("linear search over an empty gallery".into()));
    }
    let scored = (0..gallery.len())
        .filter(|&i| gallery.labels[i].sample_idx != query.labels.sample_idx)
        .map(|i| {
            (
                i,
                concat_sq_distance(&query.sls, &query.acs, gallery.sls(i), gallery.acs(i)),
            )
        })
        .collect();
    Ok(top_k(scored, k))
}

/// Gallery entries grouped by predicted (color, model).
#[derive(Debug, Clone, PartialEq)]
pub struct BucketIndex {
    n_colors: usize,
    n_models: usize,
    buckets: Vec<Vec<usize>>,
}

impl BucketIndex {
    pub fn build(gallery: &Gallery) -> Self {
        let mut buckets = vec![Vec::new(); gallery.n_colors * gallery.n_models];
        for i in 0..gallery.len() {
            let (c, m) = gallery.bucket_key(i);
            buckets[c as usize * gallery.n_models + m as usize].push(i);
        }
        Self {
            n_colors: gallery.n_colors,
            n_models: gallery.n_models,
            buckets,
        }
    }

    pub fn bucket(&self, color: u32, model: u32) -> &[usize] {
        &self.buckets[color as usize * self.n_models + model as usize]
    }

    /// Non-empty buckets with their keys, in key order.
    pub fn non_empty(&self) -> impl Iterator<Item = ((u32, u32), &[usize])> {
        self.buckets
            .iter()
            .enumerate()
            .filter(|(_, b)| !b.is_empty())
            .map(move |(k, b)| (((k / self.n_models) as u32, (k % self.n_models) as u32), b.as_slice()))
    }

    pub fn total_entries(&self) -> usize {
        self.buckets.iter().map(Vec::len).sum()
    }

    /// The distinct bucket keys searched for a query.
    pub fn candidate_keys(&self, query: &Query) -> Vec<(u32, u32)> {
        let mut colors = query.colors.to_vec();
        colors.dedup();
        let mut models = query.models.to_vec();
        models.dedup();
        let mut keys = Vec::with_capacity(4);
        for &c in &colors {
            for &m in &models {
                if (c as usize) < self.n_colors && (m as usize) < self.n_models {
                    keys.push((c, m));
                }
            }
        }
        keys
    }

    pub fn stats(&self) -> BucketStats {
        let sizes: Vec<usize> = self.buckets.iter().map(Vec::len).filter(|&n| n > 0).collect();
        BucketStats {
            entries: self.total_entries(),
            buckets: self.buckets.len(),
            non_empty: sizes.len(),
            min_size: sizes.iter().copied().min().unwrap_or(0),
            max_size: sizes.iter().copied().max().unwrap_or(0),
            mean_size: if sizes.is_empty() {
                0.0
            } else {
                sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BucketStats {
    pub entries: usize,
    pub buckets: usize,
    pub non_empty: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub mean_size: f64,
}

impl BucketStats {
    pub fn to_key_value(&self) -> String {
        format!(
            "entries={}\nbuckets={}\nnon_empty_buckets={}\nmin_bucket_size={}\nmax_bucket_size={}\nmean_bucket_size={}\n",
            self.entries, self.buckets, self.non_empty, self.min_size, self.max_size, self.mean_size
        )
    }
}

/// Bucket search plus the number of candidates scanned.
pub fn bucket_search_with_stats(
    query: &Query,
    index: &BucketIndex,
    gallery: &Gallery,
    k: usize,
) -> Result<(RankingList, usize)> {
    check_query(query, gallery, k)?;
    let mut scored = Vec::new();
    let mut candidates = 0;
    for (c, m) in index.candidate_keys(query) {
        let bucket = index.bucket(c, m);
        candidates += bucket.len();
        for &i in bucket {
            if gallery.labels[i].sample_idx != query.labels.sample_idx {
                scored.push((i, crate::linalg::squared_distance(&query.sls, gallery.sls(i))));
            }
        }
    }
    Ok((top_k(scored, k), candidates))
}

pub fn bucket_search(query: &Query, index: &BucketIndex, gallery: &Gallery, k: usize) -> Result<RankingList> {
    bucket_search_with_stats(query, index, gallery, k).map(|(r, _)| r)
}

pub fn search(
    query: &Query,
    gallery: &Gallery,
    index: &BucketIndex,
    k: usize,
    mode: SearchMode,
) -> Result<RankingList> {
    match mode {
        SearchMode::Linear => linear_search(query, gallery, k),
        SearchMode::Bucket => bucket_search(query, index, gallery, k),
    }
}

/// Runs every query, in parallel when `exec` allows; output order follows
/// `queries`.
pub fn search_batch(
    queries: &[Query],
    gallery: &Gallery,
    index: &BucketIndex,
    k: usize,
    mode: SearchMode,
    exec: Exec,
) -> Result<Vec<RankingList>> {
    exec.map(queries, |q| search(q, gallery, index, k, mode))
        .into_iter()
        .collect()
}

/// `(1/k) Σ_{i≤k} hit_i`; positions past the end of `hits` count as misses.
pub fn precision_at_k(hits: &[bool], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Param("precision@k needs k >= 1".into()));
    }
    let found = hits.iter().take(k).filter(|h| **h).count();
    Ok(found as f64 / k as f64)
}

/// `(1/T) Σ_k hit_k · precision@k`; `None` when `T = 0`.
///
/// The sum is kept as an exact fraction and rounded once, so e.g. hits at
/// ranks 1 and 3 with `T = 2` give exactly the nearest double to 5/6. Very
/// long rankings whose common denominator outgrows `u128` continue in
/// floating point.
pub fn average_precision(hits: &[bool], ground_truth: usize) -> Option<f64> {
    if ground_truth == 0 {
        return None;
    }
    let mut sum = FractionSum::default();
    let mut found = 0u128;
    for (i, &h) in hits.iter().enumerate() {
        if h {
            found += 1;
            sum.add(found, i as u128 + 1);
        }
    }
    Some(sum.divided_by(ground_truth as u128))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

#[derive(Debug, Clone, Copy)]
enum FractionSum {
    Exact { num: u128, den: u128 },
    Float(f64),
}

impl Default for FractionSum {
    fn default() -> Self {
        FractionSum::Exact { num: 0, den: 1 }
    }
}

impl FractionSum {
    fn add(&mut self, n: u128, d: u128) {
        *self = match *self {
            FractionSum::Exact { num, den } => {
                let g = gcd(den, d);
                let sum = (den / g)
                    .checked_mul(d)
                    .zip(num.checked_mul(d / g))
                    .zip(n.checked_mul(den / g))
                    .and_then(|((lcm, a), b)| Some((a.checked_add(b)?, lcm)));
                match sum {
                    Some((num, den)) => {
                        let g = gcd(num, den);
                        FractionSum::Exact {
                            num: num / g,
                            den: den / g,
                        }
                    }
                    None => FractionSum::Float(ratio_to_f64(num, den) + n as f64 / d as f64),
                }
            }
            FractionSum::Float(v) => FractionSum::Float(v + n as f64 / d as f64),
        }
    }

    fn divided_by(self, t: u128) -> f64 {
        match self {
            FractionSum::Exact { num, den } => match den.checked_mul(t) {
                Some(den) => ratio_to_f64(num, den),
                None => ratio_to_f64(num, den) / t as f64,
            },
            FractionSum::Float(v) => v / t as f64,
        }
    }
}

/// `n / d` rounded to nearest, ties to even. Exact long division to 55
/// significant bits plus a sticky bit, then a single rounding.
fn ratio_to_f64(n: u128, d: u128) -> f64 {
    debug_assert!(d > 0);
    if n == 0 {
        return 0.0;
    }
    let (mut q, mut r) = (n / d, n % d);
    let mut exp = 0i32;
    let mut sticky = false;
    while q >= 1 << 55 {
        sticky |= q & 1 == 1;
        q >>= 1;
        exp += 1;
    }
    while q < 1 << 54 {
        let bit = r >= d - r;
        r = if bit { r - (d - r) } else { r + r };
        q = (q << 1) | u128::from(bit);
        exp -= 1;
    }
    sticky |= r != 0;
    let low = q & 3;
    let mut m = q >> 2;
    exp += 2;
    if low > 2 || (low == 2 && (sticky || m & 1 == 1)) {
        m += 1;
    }
    m as f64 * 2f64.powi(exp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapSummary {
    pub map: f64,
    pub evaluated: usize,
    /// Queries dropped because they had no ground truth in the gallery.
    pub excluded: usize,
}

/// Mean AP over `(hits, ground_truth_count)` per query.
pub fn mean_average_precision<'a, I>(per_query: I) -> MapSummary
where
    I: IntoIterator<Item = (&'a [bool], usize)>,
{
    let mut sum = 0.0;
    let (mut evaluated, mut excluded) = (0, 0);
    for (hits, t) in per_query {
        match average_precision(hits, t) {
            Some(ap) => {
                sum += ap;
                evaluated += 1;
            }
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        log::warn!("{excluded} queries have no ground truth in the gallery and were excluded from MAP");
    }
    MapSummary {
        map: if evaluated == 0 { 0.0 } else { sum / evaluated as f64 },
        evaluated,
        excluded,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: MapSummary,
    /// Mean precision@k over all queries for each requested k.
    pub precision: Vec<(usize, f64)>,
}

impl EvalReport {
    pub fn to_key_value(&self) -> String {
        let mut s = format!(
            "map={}\nqueries_evaluated={}\nqueries_excluded={}\n",
            self.map.map, self.map.evaluated, self.map.excluded
        );
        for (k, p) in &self.precision {
            s.push_str(&format!("precision_at_{k}={p}\n"));
        }
        s
    }
}

/// Scores per-query relevance lists: `(hits, ground truth count)`.
pub fn evaluate_hits(per_query: &[(Vec<bool>, usize)], ks: &[usize]) -> Result<EvalReport> {
    let map = mean_average_precision(per_query.iter().map(|(h, t)| (h.as_slice(), *t)));
    let mut precision = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut sum = 0.0;
        for (h, _) in per_query {
            sum += precision_at_k(h, k)?;
        }
        precision.push((k, sum / per_query.len().max(1) as f64));
    }
    Ok(EvalReport { map, precision })
}

/// Relevance lists for rankings produced by [`search_batch`].
pub fn relevance(queries: &[Query], rankings: &[RankingList], gallery: &Gallery) -> Vec<(Vec<bool>, usize)> {
    queries
        .iter()
        .zip(rankings)
        .map(|(q, r)| {
            (
                r.hits(gallery, q.labels.vehicle_id),
                gallery.ground_truth_count(&q.labels),
            )
        })
        .collect()
}

/// AP over the full (untruncated) ranking, computed from the ranks of the
/// relevant entries instead of sorting every candidate.
fn full_ranking_ap(query: &Query, candidates: &[(usize, f64)], gallery: &Gallery) -> Option<f64> {
    let t = gallery.ground_truth_count(&query.labels);
    let is_rel = |i: usize| gallery.labels[i].vehicle_id == query.labels.vehicle_id;
    let mut relevant: Vec<(usize, f64)> = candidates.iter().copied().filter(|&(i, _)| is_rel(i)).collect();
    relevant.sort_unstable_by(rank_cmp);
    // ahead[j] = irrelevant candidates ranked before relevant[j]
    let mut ahead = vec![0usize; relevant.len() + 1];
    for &(i, d) in candidates {
        if !is_rel(i) {
            let pos = relevant.partition_point(|r| rank_cmp(r, &(i, d)) == Ordering::Less);
            ahead[pos] += 1;
        }
    }
    let mut hits = Vec::new();
    let mut irrelevant_before = 0;
    for j in 0..relevant.len() {
        irrelevant_before += ahead[j];
        hits.extend(std::iter::repeat_n(false, irrelevant_before - (hits.len() - j)));
        hits.push(true);
    }
    average_precision(&hits, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub queries: usize,
    pub gallery: usize,
    pub repetitions: usize,
    pub k: usize,
    pub linear_mean_s: f64,
    pub bucket_mean_s: f64,
    pub speedup: f64,
    pub map_linear: f64,
    pub map_bucket: f64,
    pub mean_candidates: f64,
    pub max_candidates: usize,
}

impl BenchReport {
    pub fn to_key_value(&self) -> String {
        format!(
            "queries={}\ngallery={}\nrepetitions={}\nk={}\nlinear_mean_s={}\nbucket_mean_s={}\nspeedup={}\nmap_linear={}\nmap_bucket={}\nmean_candidates={}\nmax_candidates={}\n",
            self.queries,
            self.gallery,
            self.repetitions,
            self.k,
            self.linear_mean_s,
            self.bucket_mean_s,
            self.speedup,
            self.map_linear,
            self.map_bucket,
            self.mean_candidates,
            self.max_candidates
        )
    }
}

/// Times single-threaded linear vs bucket search (mean seconds per query)
/// and reports full-ranking MAP for both. MAP evaluation may use `exec`.
pub fn bench(
    gallery: &Gallery,
    index: &BucketIndex,
    queries: &[Query],
    k: usize,
    repetitions: usize,
    exec: Exec,
) -> Result<BenchReport> {
    if queries.is_empty() || repetitions == 0 {
        return Err(Error::Param("bench needs at least one query and one repetition".into()));
    }
    // warm caches and validate shapes
    linear_search(&queries[0], gallery, k)?;
    let mut candidate_counts = Vec::with_capacity(queries.len());
    for q in queries {
        candidate_counts.push(bucket_search_with_stats(q, index, gallery, k)?.1);
    }

    let mut linear_total = 0.0;
    let mut bucket_total = 0.0;
    for _ in 0..repetitions {
        let start = Instant::now();
        for q in queries {
            std::hint::black_box(linear_search(q, gallery, k)?);
        }
        linear_total += start.elapsed().as_secs_f64();
        let start = Instant::now();
        for q in queries {
            std::hint::black_box(bucket_search(q, index, gallery, k)?);
        }
        bucket_total += start.elapsed().as_secs_f64();
    }
    let runs = (repetitions * queries.len()) as f64;
    let (linear_mean_s, bucket_mean_s) = (linear_total / runs, bucket_total / runs);

    let aps: Vec<(Option<f64>, Option<f64>)> = exec.map(queries, |q| {
        let all: Vec<(usize, f64)> = (0..gallery.len())
            .filter(|&i| gallery.labels[i].sample_idx != q.labels.sample_idx)
            .map(|i| (i, concat_sq_distance(&q.sls, &q.acs, gallery.sls(i), gallery.acs(i))))
            .collect();
        let mut cands = Vec::new();
        for (c, m) in index.candidate_keys(q) {
            for &i in index.bucket(c, m) {
                if gallery.labels[i].sample_idx != q.labels.sample_idx {
                    cands.push((i, crate::linalg::squared_distance(&q.sls, gallery.sls(i))));
                }
            }
        }
        (full_ranking_ap(q, &all, gallery), full_ranking_ap(q, &cands, gallery))
    });
    let mean = |v: Vec<f64>| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let map_linear = mean(aps.iter().filter_map(|p| p.0).collect());
    let map_bucket = mean(aps.iter().filter_map(|p| p.1).collect());
    Ok(BenchReport {
        queries: queries.len(),
        gallery: gallery.len(),
        repetitions,
        k,
        linear_mean_s,
        bucket_mean_s,
        speedup: linear_mean_s / bucket_mean_s,
        map_linear,
        map_bucket,
        mean_candidates: candidate_counts.iter().sum::<usize>() as f64 / queries.len() as f64,
        max_candidates: candidate_counts.iter().copied().max().unwrap_or(0),
    })
}

/// Parameters for a synthetic embedded gallery with oracle (one-hot)
/// attribute predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticGallerySpec {
    pub entries: usize,
    pub queries: usize,
    pub n_colors: usize,
    pub n_models: usize,
    pub d_sls: usize,
    pub d_acs: usize,
    /// Gallery entries per vehicle identity.
    pub per_identity: usize,
    pub noise: f64,
}

impl Default for SyntheticGallerySpec {
    fn default() -> Self {
        Self {
            entries: 100_000,
            queries: 1_000,
            n_colors: 7,
            n_models: 250,
            d_sls: 32,
            d_acs: 64,
            per_identity: 4,
            noise: 0.2,
        }
    }
}

/// Builds a gallery whose identities are spread uniformly over the
/// attribute buckets, and one query per identity for the first
/// `spec.queries` identities (queries are extra samples, not gallery
/// members).
pub fn synthetic_gallery(spec: &SyntheticGallerySpec, seed: u64) -> Result<(Gallery, Vec<Query>)> {
    if spec.per_identity == 0 || spec.entries == 0 || spec.d_sls == 0 || spec.d_acs == 0 {
        return Err(Error::Spec("synthetic gallery dims and counts must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ids = spec.entries.div_ceil(spec.per_identity);
    if spec.queries > n_ids {
        return Err(Error::Spec(format!(
            "{} queries requested but only {n_ids} identities",
            spec.queries
        )));
    }
    let gaussian = |n: usize, scale: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect()
    };
    let mut gallery = Gallery::new(spec.d_sls, spec.d_acs, spec.n_colors, spec.n_models);
    let mut queries = Vec::with_capacity(spec.queries);
    let mut sample_idx = 0;
    for id in 0..n_ids {
        let color = rng.random_range(0..spec.n_colors) as u32;
        let model = rng.random_range(0..spec.n_models) as u32;
        let center_sls = gaussian(spec.d_sls, 1.0, &mut rng);
        let center_acs = gaussian(spec.d_acs, 1.0, &mut rng);
        let count = spec.per_identity.min(spec.entries - gallery.len()) + usize::from(id < spec.queries);
        for j in 0..count {
            let sls: Vec<f64> = center_sls
                .iter()
                .zip(gaussian(spec.d_sls, spec.noise, &mut rng))
                .map(|(c, e)| c + e)
                .collect();
            let acs: Vec<f64> = center_acs
                .iter()
                .zip(gaussian(spec.d_acs, spec.noise, &mut rng))
                .map(|(c, e)| c + e)
                .collect();
            let (sls, _) = crate::layers::l2_normalize(&sls);
            let labels = Labels {
                sample_idx,
                vehicle_id: id as u32,
                color,
                model,
            };
            sample_idx += 1;
            let colors = [
                color,
                if spec.n_colors > 1 {
                    (color + 1) % spec.n_colors as u32
                } else {
                    color
                },
            ];
            let models = [
                model,
                if spec.n_models > 1 {
                    (model + 1) % spec.n_models as u32
                } else {
                    model
                },
            ];
            if id < spec.queries && j == count - 1 {
                queries.push(Query {
                    labels,
                    sls,
                    acs,
                    colors,
                    models,
                });
            } else {
                gallery.push(labels, &sls, &acs, colors, models)?;
            }
        }
    }
    Ok((gallery, queries))
}

const GALLERY_MAGIC: &[u8; 4] = b"RPNG";
const GALLERY_VERSION: u32 = 1;

/// Writes embedded samples: header `"RPNG" | u32 version | u32 count |
/// u32 d_sls | u32 d_acs | u32 n_colors | u32 n_models`, then per entry
/// `u64 sample_idx | u32 vehicle_id | u32 color | u32 model` followed by the
/// sls, acs, color-prob and model-prob f64 values; trailing u32 crc32.
pub fn write_embeddings(items: &[EmbeddedSample], path: &Path) -> Result<()> {
    let first = items
        .first()
        .ok_or_else(|| Error::Param("no embeddings to write".into()))?;
    let dims = [
        first.embedding.sls.len(),
        first.embedding.acs.len(),
        first.embedding.color_probs.len(),
        first.embedding.model_probs.len(),
    ];
    let mut out = Vec::new();
    out.extend_from_slice(GALLERY_MAGIC);
    out.write_u32::<LittleEndian>(GALLERY_VERSION)?;
    out.write_u32::<LittleEndian>(items.len() as u32)?;
    for d in dims {
        out.write_u32::<LittleEndian>(d as u32)?;
    }
    for e in items {
        let em = &e.embedding;
        if [em.sls.len(), em.acs.len(), em.color_probs.len(), em.model_probs.len()] != dims {
            return Err(Error::shape(format!(
                "sample {} has inconsistent embedding dims",
                e.labels.sample_idx
            )));
        }
        out.write_u64::<LittleEndian>(e.labels.sample_idx as u64)?;
        out.write_u32::<LittleEndian>(e.labels.vehicle_id)?;
        out.write_u32::<LittleEndian>(e.labels.color)?;
        out.write_u32::<LittleEndian>(e.labels.model)?;
        for v in em
            .sls
            .iter()
            .chain(&em.acs)
            .chain(&em.color_probs)
            .chain(&em.model_probs)
        {
            out.write_f64::<LittleEndian>(*v)?;
        }
    }
    let crc = crc32fast::hash(&out);
    out.write_u32::<LittleEndian>(crc)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&out)?;
    f.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddedSample>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let fmt = |offset: usize, msg: &str| Error::Format {
        offset: offset as u64,
        msg: msg.to_string(),
    };
    if bytes.len() < 32 {
        return Err(fmt(0, "embedding file shorter than its header"));
    }
    if &bytes[..4] != GALLERY_MAGIC {
        return Err(fmt(0, "bad embedding file magic"));
    }
    let version = LittleEndian::read_u32(&bytes[4..]);
    if version != GALLERY_VERSION {
        return Err(fmt(4, &format!("unsupported embedding file version {version}")));
    }
    let end = bytes.len() - 4;
    let crc = LittleEndian::read_u32(&bytes[end..]);
    let count = LittleEndian::read_u32(&bytes[8..]) as usize;
    let dims: Vec<usize> = (0..4)
        .map(|i| LittleEndian::read_u32(&bytes[12 + 4 * i..]) as usize)
        .collect();
    let floats: usize = dims.iter().sum();
    let entry = 20 + 8 * floats;
    let expected = 28 + count * entry;
    if end != expected {
        return Err(fmt(
            end.min(expected),
            &format!("expected {expected} payload bytes for {count} entries, found {end}"),
        ));
    }
    if crc32fast::hash(&bytes[..end]) != crc {
        return Err(fmt(end, "embedding file checksum mismatch"));
    }
    let mut items = Vec::with_capacity(count);
    let mut pos = 28;
    for _ in 0..count {
        let labels = Labels {
            sample_idx: LittleEndian::read_u64(&bytes[pos..]) as usize,
            vehicle_id: LittleEndian::read_u32(&bytes[pos + 8..]),
            color: LittleEndian::read_u32(&bytes[pos + 12..]),
            model: LittleEndian::read_u32(&bytes[pos + 16..]),
        };
        pos += 20;
        let mut values = vec![0.0; floats];
        LittleEndian::read_f64_into(&bytes[pos..pos + 8 * floats], &mut values);
        pos += 8 * floats;
        let mut rest = values.into_iter();
        let mut take = |n: usize| rest.by_ref().take(n).collect::<Vec<f64>>();
        let embedding = Embedding {
            sls: take(dims[0]),
            acs: take(dims[1]),
            color_probs: take(dims[2]),
            model_probs: take(dims[3]),
        };
        items.push(EmbeddedSample { labels, embedding });
    }
    Ok(items)
}

pub const RANKING_HEADER: &str = "query_idx,rank,gallery_idx,distance,vehicle_id_match";

/// One row of the ranking CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingRow {
    pub query_idx: usize,
    pub rank: usize,
    pub gallery_idx: usize,
    pub distance: f64,
    pub vehicle_id_match: bool,
}

pub fn write_rankings(
    queries: &[Query],
    rankings: &[RankingList],
    gallery: &Gallery,
    w: &mut impl Write,
) -> Result<()> {
    writeln!(w, "{RANKING_HEADER}")?;
    for (qi, (q, r)) in queries.iter().zip(rankings).enumerate() {
        for (rank, &(gi, d)) in r.items.iter().enumerate() {
            let m = u8::from(gallery.labels(gi).vehicle_id == q.labels.vehicle_id);
            writeln!(w, "{qi},{},{gi},{d},{m}", rank + 1)?;
        }
    }
    Ok(())
}

pub fn read_rankings(text: &str) -> Result<Vec<RankingRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == RANKING_HEADER => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header '{RANKING_HEADER}', got {other:?}"),
            })
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let line_no = n as u64 + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.trim_end().split(',').collect();
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        if f.len() != 5 {
            return Err(bad(format!("expected 5 fields, got {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("'{s}': {e}")));
        rows.push(RankingRow {
            query_idx: int(f[0])?,
            rank: int(f[1])?,
            gallery_idx: int(f[2])?,
            distance: f[3].parse().map_err(|e| bad(format!("'{}': {e}", f[3])))?,
            vehicle_id_match: match f[4] {
                "0" => false,
                "1" => true,
                other => return Err(bad(format!("vehicle_id_match must be 0 or 1, got '{other}'"))),
            },
        });
    }
    Ok(rows)
}

/// Rebuilds per-query relevance lists from CSV rows, checking the match
/// column against gallery labels. `T` comes from the gallery.
pub fn relevance_from_rows(
    rows: &[RankingRow],
    queries: &[Query],
    gallery: &Gallery,
) -> Result<Vec<(Vec<bool>, usize)>> {
    let mut per: Vec<Vec<(usize, bool)>> = vec![Vec::new(); queries.len()];
    for r in rows {
        let q = queries.get(r.query_idx).ok_or_else(|| {
            Error::Consistency(format!("ranking row names query {} of {}", r.query_idx, queries.len()))
        })?;
        if r.gallery_idx >= gallery.len() {
            return Err(Error::Consistency(format!(
                "ranking row names gallery entry {} of {}",
                r.gallery_idx,
                gallery.len()
            )));
        }
        let hit = gallery.labels(r.gallery_idx).vehicle_id == q.labels.vehicle_id;
        if hit != r.vehicle_id_match {
            return Err(Error::Consistency(format!(
                "query {} rank {}: match flag disagrees with gallery labels",
                r.query_idx, r.rank
            )));
        }
        per[r.query_idx].push((r.rank, hit));
    }
    Ok(per
        .into_iter()
        .zip(queries)
        .map(|(mut v, q)| {
            v.sort_by_key(|p| p.0);
            (
                v.into_iter().map(|p| p.1).collect(),
                gallery.ground_truth_count(&q.labels),
            )
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(i: usize, id: u32) -> Labels {
        Labels {
            sample_idx: i,
            vehicle_id: id,
            color: 0,
            model: 0,
        }
    }

    fn tiny_gallery() -> Gallery {
        let mut g = Gallery::new(1, 1, 3, 3);
        let rows = [(0.0, 0.0, 0, 0), (1.0, 0.0, 0, 0), (2.0, 0.0, 1, 1), (1.0, 0.0, 2, 2)];
        for (i, (s, a, c, m)) in rows.into_iter().enumerate() {
            g.push(labels(i, i as u32 % 2), &[s], &[a], [c, c], [m, m]).unwrap();
        }
        g
    }

    fn query(sls: f64, colors: [u32; 2], models: [u32; 2]) -> Query {
        Query {
            labels: labels(999, 0),
            sls: vec![sls],
            acs: vec![0.0],
            colors,
            models,
        }
    }

    #[test]
    fn linear_self_match_and_full_ranking() {
        let g = tiny_gallery();
        let mut q = query(2.0, [0, 1], [0, 1]);
        let r = linear_search(&q, &g, 10).unwrap();
        assert_eq!(r.items[0], (2, 0.0));
        assert_eq!(r.len(), 4);
        // equal distances ordered by index
        assert_eq!(r.items[1].0, 1);
        assert_eq!(r.items[2].0, 3);
        assert!(r.is_well_ordered());
        q.labels.sample_idx = 2;
        let r = linear_search(&q, &g, 10).unwrap();
        assert!(r.items.iter().all(|p| p.0 != 2));
        assert!(linear_search(&q, &g, 0).is_err());
    }

    #[test]
    fn bucket_partition_and_confinement() {
        let g = tiny_gallery();
        let idx = BucketIndex::build(&g);
        assert_eq!(idx.total_entries(), g.len());
        assert_eq!(idx.bucket(0, 0), &[0, 1]);
        let r = bucket_search(&query(2.0, [0, 1], [0, 1]), &idx, &g, 10).unwrap();
        let ids: Vec<usize> = r.items.iter().map(|p| p.0).collect();
        assert_eq!(ids, vec![2, 1, 0]);
        // entry 3 sits in bucket (2, 2), outside the query's four buckets
        assert!(!ids.contains(&3));
    }

    #[test]
    fn single_class_falls_back_to_existing_keys() {
        let mut g = Gallery::new(1, 1, 1, 2);
        g.push(labels(0, 0), &[0.0], &[0.0], [0, 0], [1, 0]).unwrap();
        let idx = BucketIndex::build(&g);
        let q = query(0.0, top2(&[1.0]), top2(&[0.3, 0.7]));
        assert_eq!(idx.candidate_keys(&q), vec![(0, 1), (0, 0)]);
        assert_eq!(bucket_search(&q, &idx, &g, 5).unwrap().len(), 1);
    }

    #[test]
    fn top2_ties_go_low() {
        assert_eq!(top2(&[0.2, 0.4, 0.4]), [1, 2]);
        assert_eq!(top2(&[0.5, 0.5]), [0, 1]);
        assert_eq!(top2(&[1.0]), [0, 0]);
    }

    #[test]
    fn precision_formula() {
        let hits = [true, false, true];
        assert!((precision_at_k(&hits, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(precision_at_k(&[false, false], 2).unwrap(), 0.0);
        assert_eq!(precision_at_k(&[true, true, false], 2).unwrap(), 1.0);
        assert_eq!(precision_at_k(&[true], 4).unwrap(), 0.25);
        assert!(precision_at_k(&hits, 0).is_err());
    }

    #[test]
    fn ratio_rounding_matches_ieee_division() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20_000 {
            let bits = rng.random_range(1..=53);
            let n = rng.random_range(0..1u64 << bits) as u128;
            let d_bits = rng.random_range(1..=53);
            let d = rng.random_range(1..=1u64 << d_bits) as u128;
            assert_eq!(ratio_to_f64(n, d).to_bits(), (n as f64 / d as f64).to_bits(), "{n}/{d}");
        }
        assert_eq!(ratio_to_f64(u128::MAX, 1), u128::MAX as f64);
        assert_eq!(ratio_to_f64(1, 3 << 100), 1.0 / 3.0 / 2f64.powi(100));
    }

    #[test]
    fn long_rankings_fall_back_to_float() {
        let hits = vec![true; 300];
        let ap = average_precision(&hits, 300).unwrap();
        assert!((ap - 1.0).abs() < 1e-12);
        let sparse: Vec<bool> = (0..5000).map(|i| i % 7 == 3).collect();
        let t = sparse.iter().filter(|h| **h).count();
        let float: f64 = sparse
            .iter()
            .enumerate()
            .filter(|(_, h)| **h)
            .enumerate()
            .map(|(j, (i, _))| (j + 1) as f64 / (i + 1) as f64)
            .sum::<f64>()
            / t as f64;
        assert!((average_precision(&sparse, t).unwrap() - float).abs() < 1e-12);
    }

    #[test]
    fn average_precision_formula() {
        assert_eq!(average_precision(&[true, false, true], 2), Some(5.0 / 6.0));
        assert_eq!(average_precision(&[true, true, false, false], 2), Some(1.0));
        assert_eq!(average_precision(&[false, false, true], 1), Some(1.0 / 3.0));
        assert_eq!(average_precision(&[true], 0), None);
        let s = mean_average_precision([(&[true][..], 1), (&[false][..], 0)]);
        assert_eq!((s.map, s.evaluated, s.excluded), (1.0, 1, 1));
    }

    #[test]
    fn rank_based_ap_matches_sorted_ap() {
        let (g, qs) = synthetic_gallery(
            &SyntheticGallerySpec {
                entries: 400,
                queries: 20,
                n_colors: 3,
                n_models: 4,
                d_sls: 4,
                d_acs: 3,
                per_identity: 3,
                noise: 1.0,
            },
            8,
        )
        .unwrap();
        for q in &qs {
            let full = linear_search(q, &g, g.len()).unwrap();
            let hits = full.hits(&g, q.labels.vehicle_id);
            let expected = average_precision(&hits, g.ground_truth_count(&q.labels));
            let all: Vec<(usize, f64)> = (0..g.len())
                .map(|i| (i, concat_sq_distance(&q.sls, &q.acs, g.sls(i), g.acs(i))))
                .collect();
            assert_eq!(full_ranking_ap(q, &all, &g), expected);
        }
    }

    #[test]
    fn embeddings_file_round_trip_and_corruption() {
        let items: Vec<EmbeddedSample> = (0..3)
            .map(|i| EmbeddedSample {
                labels: Labels {
                    sample_idx: 10 + i,
                    vehicle_id: i as u32,
                    color: 1,
                    model: 0,
                },
                embedding: Embedding {
                    sls: vec![i as f64, 0.5],
                    acs: vec![-1.0],
                    color_probs: vec![0.25, 0.75],
                    model_probs: vec![1.0],
                },
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.bin");
        write_embeddings(&items, &path).unwrap();
        assert_eq!(read_embeddings(&path).unwrap(), items);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[40] ^= 1;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_embeddings(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn ranking_csv_round_trip() {
        let g = tiny_gallery();
        let qs = vec![query(2.0, [0, 1], [0, 1]), query(0.0, [2, 0], [2, 0])];
        let idx = BucketIndex::build(&g);
        let rankings = search_batch(&qs, &g, &idx, 3, SearchMode::Linear, Exec::Sequential).unwrap();
        let mut buf = Vec::new();
        write_rankings(&qs, &rankings, &g, &mut buf).unwrap();
        let rows = read_rankings(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(rows.len(), 6);
        let rel = relevance_from_rows(&rows, &qs, &g).unwrap();
        assert_eq!(rel, relevance(&qs, &rankings, &g));
        assert!(matches!(read_rankings("a,b\n"), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn bucket_stats_report() {
        let idx = BucketIndex::build(&tiny_gallery());
        let s = idx.stats();
        assert_eq!(
            (s.entries, s.buckets, s.non_empty, s.min_size, s.max_size),
            (4, 9, 3, 1, 2)
        );
        assert!(s.to_key_value().contains("non_empty_buckets=3"));
        assert_eq!(BucketIndex::build(&Gallery::new(1, 1, 2, 2)).total_entries(), 0);
    }
}
