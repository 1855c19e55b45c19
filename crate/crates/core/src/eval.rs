//! Retrieval metrics, the inclusion test, uncertainty profiles and
//! embedding-space traversal.
//!
//! Rankings sort by similarity descending; equal similarities rank the lower
//! gallery index first.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{informative_len, HierDataset, LEVELS};
use crate::error::{check_dim, Error, Result};
use crate::geometry::{dot, inclusion_score, DiagGaussian};
use crate::losses::{cosine_similarity, Similarity};
use crate::masking::build_chain;
use crate::model::Model;
use crate::trainer::derive_seed;

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    AudioToText,
    TextToAudio,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::AudioToText => "audio->text",
            Direction::TextToAudio => "text->audio",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    /// Recall at each `K` in [`RECALL_KS`], in `[0, 1]`.
    pub r_at: BTreeMap<usize, f64>,
    pub map_at_10: f64,
    pub n_queries: usize,
    pub gallery_size: usize,
}

/// Gallery indices by descending score; ties keep the lower index first.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx
}

/// Average precision over the first `cutoff` ranks, normalized by
/// `min(|relevant|, cutoff)`.
pub fn average_precision_at(ranking: &[usize], relevant: &BTreeSet<usize>, cutoff: usize) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, g) in ranking.iter().take(cutoff).enumerate() {
        if relevant.contains(g) {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / relevant.len().min(cutoff) as f64
}

/// Metrics from a `queries x gallery` score matrix and per-query relevant
/// gallery indices.
pub fn retrieval_from_scores(
    direction: Direction,
    scores: &[Vec<f64>],
    relevant: &[Vec<usize>],
) -> Result<RetrievalReport> {
    check_dim(scores.len(), relevant.len())?;
    if scores.is_empty() {
        return Err(Error::invalid("retrieval needs at least one query"));
    }
    let gallery_size = scores[0].len();
    if gallery_size == 0 {
        return Err(Error::invalid("retrieval needs a non-empty gallery"));
    }
    let per_query: Vec<(Vec<bool>, f64)> = scores
        .par_iter()
        .zip(relevant)
        .enumerate()
        .map(|(q, (row, rel))| -> Result<(Vec<bool>, f64)> {
            check_dim(gallery_size, row.len())?;
            let rel: BTreeSet<usize> = rel.iter().copied().collect();
            if rel.is_empty() {
                return Err(Error::invalid(format!(
                    "query {q} has no relevant gallery item"
                )));
            }
            if let Some(g) = rel.iter().find(|g| **g >= gallery_size) {
                return Err(Error::invalid(format!(
                    "query {q} lists gallery index {g} out of range"
                )));
            }
            let ranking = rank(row);
            let first_hit = ranking
                .iter()
                .position(|g| rel.contains(g))
                .expect("relevant set non-empty");
            let hits = RECALL_KS.iter().map(|&k| first_hit < k).collect();
            Ok((hits, average_precision_at(&ranking, &rel, 10)))
        })
        .collect::<Result<_>>()?;
    let n = per_query.len() as f64;
    let r_at = RECALL_KS
        .iter()
        .enumerate()
        .map(|(i, &k)| (k, per_query.iter().filter(|(h, _)| h[i]).count() as f64 / n))
        .collect();
    let map_at_10 = per_query.iter().map(|(_, ap)| ap).sum::<f64>() / n;
    Ok(RetrievalReport {
        direction,
        r_at,
        map_at_10,
        n_queries: per_query.len(),
        gallery_size,
    })
}

fn score(kind: Similarity, a: &DiagGaussian, t: &DiagGaussian) -> Result<f64> {
    crate::model::score(kind, a, t)
}

/// Retrieval between audio and text embeddings. `pairs` lists every
/// matching `(audio index, text index)`.
pub fn retrieval_eval(
    audio: &[DiagGaussian],
    text: &[DiagGaussian],
    pairs: &[(usize, usize)],
    kind: Similarity,
    direction: Direction,
) -> Result<RetrievalReport> {
    let (queries, gallery) = match direction {
        Direction::AudioToText => (audio, text),
        Direction::TextToAudio => (text, audio),
    };
    let mut relevant = vec![Vec::new(); queries.len()];
    for &(a, t) in pairs {
        let (q, g) = match direction {
            Direction::AudioToText => (a, t),
            Direction::TextToAudio => (t, a),
        };
        let slot = relevant
            .get_mut(q)
            .ok_or_else(|| Error::invalid(format!("pair references query {q} out of range")))?;
        slot.push(g);
    }
    let scores: Vec<Vec<f64>> = queries
        .par_iter()
        .map(|q| {
            gallery
                .iter()
                .map(|g| match direction {
                    Direction::AudioToText => score(kind, q, g),
                    Direction::TextToAudio => score(kind, g, q),
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    retrieval_from_scores(direction, &scores, &relevant)
}

/// Percentage of pairs with `H(lv4 ⊂ lv1) > 0`. Exact zeros count as
/// failures.
pub fn inclusion_test_rate(level1: &[DiagGaussian], level4: &[DiagGaussian]) -> Result<f64> {
    check_dim(level1.len(), level4.len())?;
    if level1.is_empty() {
        return Err(Error::invalid("inclusion test needs at least one pair"));
    }
    let mut passed = 0usize;
    for (z1, z4) in level1.iter().zip(level4) {
        if inclusion_score(z4, z1)? > 0.0 {
            passed += 1;
        }
    }
    Ok(100.0 * passed as f64 / level1.len() as f64)
}

/// Elementwise average of means and of variances.
pub fn make_root(
    empty_caption: &DiagGaussian,
    most_inclusive: &DiagGaussian,
) -> Result<DiagGaussian> {
    check_dim(empty_caption.dim(), most_inclusive.dim())?;
    let mu = empty_caption
        .mu()
        .iter()
        .zip(most_inclusive.mu())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let var: Vec<f64> = empty_caption
        .variance()
        .iter()
        .zip(most_inclusive.variance())
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    DiagGaussian::from_variance(mu, &var)
}

/// Gallery index maximizing `H(query ⊂ caption)`; lowest index on ties.
pub fn most_inclusive(query: &DiagGaussian, gallery: &[DiagGaussian]) -> Result<usize> {
    let mut best = (None, f64::NEG_INFINITY);
    for (j, g) in gallery.iter().enumerate() {
        let h = inclusion_score(query, g)?;
        if h > best.1 || best.0.is_none() {
            best = (Some(j), h);
        }
    }
    best.0.ok_or_else(|| Error::invalid("empty gallery"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalEntry {
    /// Gallery index retrieved at each of the interpolation points.
    pub trace: Vec<usize>,
    /// `trace` with consecutive repeats removed.
    pub retrieved: Vec<usize>,
    pub precision: f64,
    pub r_at_1: f64,
    pub r_at_1_lv1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalReport {
    pub precision: f64,
    pub r_at_1: f64,
    pub r_at_1_lv1: f64,
    pub entries: Vec<TraversalEntry>,
}

/// Scores derived from a raw retrieved sequence.
///
/// * precision: distinct retrieved entries in the query's chain over all
///   distinct retrieved entries;
/// * R@1: fraction of the chain's levels with at least one retrieved chain
///   entry;
/// * R@1-Lv1: whether a Level-1 chain entry was retrieved.
pub fn traversal_scores(
    retrieved: &[usize],
    levels: &[usize],
    in_chain: &[bool],
) -> (f64, f64, f64) {
    let distinct: BTreeSet<usize> = retrieved.iter().copied().collect();
    let good: Vec<usize> = distinct.iter().copied().filter(|&j| in_chain[j]).collect();
    let precision = if distinct.is_empty() {
        0.0
    } else {
        good.len() as f64 / distinct.len() as f64
    };
    let chain_levels: BTreeSet<usize> = (0..levels.len())
        .filter(|&j| in_chain[j])
        .map(|j| levels[j])
        .collect();
    let hit_levels: BTreeSet<usize> = good.iter().map(|&j| levels[j]).collect();
    let r_at_1 = if chain_levels.is_empty() {
        0.0
    } else {
        hit_levels.len() as f64 / chain_levels.len() as f64
    };
    let lv1 = if hit_levels.contains(&1) { 1.0 } else { 0.0 };
    (precision, r_at_1, lv1)
}

/// Walks `n_points` equally spaced points from `query` (first) to `root`
/// (last), interpolating means and variances linearly, and retrieves the
/// highest-scoring gallery entry at each.
#[allow(clippy::too_many_arguments)]
pub fn traversal(
    query: &DiagGaussian,
    gallery: &[DiagGaussian],
    levels: &[usize],
    in_chain: &[bool],
    root: &DiagGaussian,
    n_points: usize,
    kind: Similarity,
) -> Result<TraversalEntry> {
    if gallery.is_empty() {
        return Err(Error::invalid("traversal needs a non-empty gallery"));
    }
    if n_points < 2 {
        return Err(Error::invalid(format!(
            "traversal needs at least 2 points, got {n_points}"
        )));
    }
    check_dim(gallery.len(), levels.len())?;
    check_dim(gallery.len(), in_chain.len())?;
    check_dim(query.dim(), root.dim())?;
    for g in gallery {
        check_dim(query.dim(), g.dim())?;
    }
    // The interpolated variance shifts every corrected similarity equally,
    // so only the means and each entry's own trace decide the argmax.
    let half_trace: Vec<f64> = gallery.iter().map(|g| 0.5 * g.total_variance()).collect();
    let mut trace = Vec::with_capacity(n_points);
    for p in 0..n_points {
        let t = p as f64 / (n_points - 1) as f64;
        let mu: Vec<f64> = query
            .mu()
            .iter()
            .zip(root.mu())
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect();
        let mut best = (0usize, f64::NEG_INFINITY);
        for (j, g) in gallery.iter().enumerate() {
            let s = match kind {
                Similarity::Csd => dot(&mu, g.mu()) - half_trace[j],
                Similarity::Cosine => cosine_similarity(&mu, g.mu()),
            };
            if s > best.1 {
                best = (j, s);
            }
        }
        trace.push(best.0);
    }
    let mut retrieved = trace.clone();
    retrieved.dedup();
    let (precision, r_at_1, r_at_1_lv1) = traversal_scores(&retrieved, levels, in_chain);
    Ok(TraversalEntry {
        trace,
        retrieved,
        precision,
        r_at_1,
        r_at_1_lv1,
    })
}

pub fn summarize_traversal(entries: Vec<TraversalEntry>) -> TraversalReport {
    let n = entries.len().max(1) as f64;
    let mean = |f: fn(&TraversalEntry) -> f64| entries.iter().map(f).sum::<f64>() / n;
    TraversalReport {
        precision: mean(|e| e.precision),
        r_at_1: mean(|e| e.r_at_1),
        r_at_1_lv1: mean(|e| e.r_at_1_lv1),
        entries,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow<K> {
    pub group: K,
    pub count: usize,
    pub mean_total_variance: f64,
}

/// Mean of `Σ σ²` per group, in the order of `groups`. Groups without
/// members are left out with a warning.
pub fn uncertainty_profile<K: Ord + Clone + std::fmt::Debug>(
    embeds: &[DiagGaussian],
    keys: &[K],
    groups: &[K],
) -> Result<Vec<ProfileRow<K>>> {
    check_dim(embeds.len(), keys.len())?;
    let mut acc: BTreeMap<&K, (usize, f64)> = BTreeMap::new();
    for (z, k) in embeds.iter().zip(keys) {
        let e = acc.entry(k).or_default();
        e.0 += 1;
        e.1 += z.total_variance();
    }
    let mut rows = Vec::new();
    for g in groups {
        match acc.get(g) {
            Some(&(count, sum)) => rows.push(ProfileRow {
                group: g.clone(),
                count,
                mean_total_variance: sum / count as f64,
            }),
            None => log::warn!("uncertainty group {g:?} has no members; omitted"),
        }
    }
    Ok(rows)
}

pub fn profile_csv<K: std::fmt::Display>(key_name: &str, rows: &[ProfileRow<K>]) -> String {
    let mut out = format!("{key_name},count,mean_total_variance\n");
    for r in rows {
        writeln!(out, "{},{},{:?}", r.group, r.count, r.mean_total_variance).expect("String write");
    }
    out
}

/// Raw embeddings of every item's audio and four captions.
#[derive(Debug, Clone)]
pub struct EmbeddedSplit {
    pub audio: Vec<DiagGaussian>,
    /// `captions[item][level - 1]`.
    pub captions: Vec<Vec<DiagGaussian>>,
}

pub fn check_model_fits(model: &Model, ds: &HierDataset) -> Result<()> {
    let d_model = model.audio.arch().d_in;
    match ds.dim() {
        Some(d) if d != d_model => Err(Error::Incompatible(format!(
            "model expects {d_model}-dimensional inputs but the dataset has dimension {d}"
        ))),
        _ => Ok(()),
    }
}

pub fn embed_split(model: &Model, ds: &HierDataset) -> Result<EmbeddedSplit> {
    check_model_fits(model, ds)?;
    let rows: Vec<(DiagGaussian, Vec<DiagGaussian>)> = ds
        .items
        .par_iter()
        .map(|item| -> Result<_> {
            let a = model.embed_audio(&item.audio_feat, None)?;
            let caps = (1..=LEVELS)
                .map(|l| model.embed_text(item.caption(l), None))
                .collect::<Result<Vec<_>>>()?;
            Ok((a, caps))
        })
        .collect::<Result<_>>()?;
    let (audio, captions) = rows.into_iter().unzip();
    Ok(EmbeddedSplit { audio, captions })
}

/// Audio against Level-4 captions, both directions.
pub fn retrieval_task(model: &Model, split: &EmbeddedSplit) -> Result<[RetrievalReport; 2]> {
    let text: Vec<DiagGaussian> = split
        .captions
        .iter()
        .map(|c| c[LEVELS - 1].clone())
        .collect();
    let pairs: Vec<(usize, usize)> = (0..text.len()).map(|i| (i, i)).collect();
    Ok([
        retrieval_eval(
            &split.audio,
            &text,
            &pairs,
            model.similarity,
            Direction::AudioToText,
        )?,
        retrieval_eval(
            &split.audio,
            &text,
            &pairs,
            model.similarity,
            Direction::TextToAudio,
        )?,
    ])
}

pub fn inclusion_task(split: &EmbeddedSplit) -> Result<f64> {
    let lv1: Vec<DiagGaussian> = split.captions.iter().map(|c| c[0].clone()).collect();
    let lv4: Vec<DiagGaussian> = split
        .captions
        .iter()
        .map(|c| c[LEVELS - 1].clone())
        .collect();
    inclusion_test_rate(&lv1, &lv4)
}

/// Traversal from every item's audio over the gallery of all captions.
///
/// Gallery entry `4 * i + (level - 1)` is item `i`'s Level-`level` caption.
/// An entry lies on item `q`'s chain when it is `q`'s own Level-4 caption or
/// a Level-1..3 caption of the same concept as `q`'s caption at that level.
pub fn traversal_task(
    model: &Model,
    ds: &HierDataset,
    split: &EmbeddedSplit,
    n_points: usize,
) -> Result<TraversalReport> {
    let gallery: Vec<DiagGaussian> = split.captions.iter().flatten().cloned().collect();
    let levels: Vec<usize> = (0..gallery.len()).map(|j| j % LEVELS + 1).collect();
    let empty = model.empty_caption()?;
    let entries: Vec<TraversalEntry> = (0..ds.len())
        .into_par_iter()
        .map(|q| -> Result<TraversalEntry> {
            let item = &ds.items[q];
            let in_chain: Vec<bool> = (0..gallery.len())
                .map(|j| {
                    let (other, level) = (j / LEVELS, j % LEVELS + 1);
                    if level == LEVELS {
                        other == q
                    } else {
                        ds.items[other].concept(level) == item.concept(level)
                    }
                })
                .collect();
            let query = &split.audio[q];
            let root = match model.similarity {
                Similarity::Csd => make_root(&empty, &gallery[most_inclusive(query, &gallery)?])?,
                Similarity::Cosine => empty.clone(),
            };
            traversal(
                query,
                &gallery,
                &levels,
                &in_chain,
                &root,
                n_points,
                model.similarity,
            )
        })
        .collect::<Result<_>>()?;
    Ok(summarize_traversal(entries))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyReport {
    /// Mask chain level `0..=L` (0 = fully masked) of raw audio.
    pub audio_by_mask_level: Vec<ProfileRow<usize>>,
    /// Mask chain level of the Level-4 caption.
    pub text_by_mask_level: Vec<ProfileRow<usize>>,
    /// Unmasked captions by abstraction level.
    pub text_by_caption_level: Vec<ProfileRow<usize>>,
    /// Every caption level under every chain level, bucketed by the number of
    /// informative coordinates left visible (rounded up to a block).
    pub text_by_length: Vec<ProfileRow<usize>>,
}

impl UncertaintyReport {
    /// `fully masked >= mean(intermediate) >= raw`, per modality.
    pub fn mask_ordering_holds(rows: &[ProfileRow<usize>]) -> bool {
        let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
            return false;
        };
        let mid = &rows[1..rows.len() - 1];
        if mid.is_empty() {
            return first.mean_total_variance >= last.mean_total_variance;
        }
        let m = mid.iter().map(|r| r.mean_total_variance).sum::<f64>() / mid.len() as f64;
        first.mean_total_variance >= m && m >= last.mean_total_variance
    }

    pub fn non_increasing(rows: &[ProfileRow<usize>]) -> bool {
        rows.windows(2)
            .all(|w| w[1].mean_total_variance <= w[0].mean_total_variance)
    }
}

struct TextView {
    z: DiagGaussian,
    caption_level: usize,
    mask_level: usize,
    length_bucket: usize,
}

/// Uncertainty profiles using one seeded mask chain per item and modality.
pub fn uncertainty_task(
    model: &Model,
    ds: &HierDataset,
    levels: usize,
    keep: &[f64],
    seed: u64,
) -> Result<UncertaintyReport> {
    check_model_fits(model, ds)?;
    let d = model.audio.arch().d_in;
    let block = (d / LEVELS).max(1);
    let rows: Vec<(Vec<DiagGaussian>, Vec<TextView>)> = ds
        .items
        .par_iter()
        .enumerate()
        .map(|(i, item)| -> Result<_> {
            let ca = build_chain(d, levels, keep, derive_seed(seed, 11, i as u64))?;
            let ct = build_chain(d, levels, keep, derive_seed(seed, 12, i as u64))?;
            let audio = (0..=levels)
                .map(|m| model.embed_audio(&item.audio_feat, Some(&ca.visible(m))))
                .collect::<Result<Vec<_>>>()?;
            let mut text = Vec::with_capacity(LEVELS * (levels + 1));
            for caption_level in 1..=LEVELS {
                let n_inf = informative_len(d, caption_level);
                for mask_level in 0..=levels {
                    let vis = ct.visible(mask_level);
                    let visible_informative = vis[..n_inf].iter().filter(|v| **v).count();
                    text.push(TextView {
                        z: model.embed_text(item.caption(caption_level), Some(&vis))?,
                        caption_level,
                        mask_level,
                        length_bucket: visible_informative.div_ceil(block) * block,
                    });
                }
            }
            Ok((audio, text))
        })
        .collect::<Result<_>>()?;

    let mask_levels: Vec<usize> = (0..=levels).collect();
    let (mut az, mut ak) = (Vec::new(), Vec::new());
    for (audio, _) in &rows {
        for (m, z) in audio.iter().enumerate() {
            az.push(z.clone());
            ak.push(m);
        }
    }
    let views: Vec<&TextView> = rows.iter().flat_map(|(_, t)| t).collect();
    let select = |keep: &dyn Fn(&TextView) -> bool, key: &dyn Fn(&TextView) -> usize| {
        let picked: Vec<&&TextView> = views.iter().filter(|v| keep(v)).collect();
        (
            picked.iter().map(|v| v.z.clone()).collect::<Vec<_>>(),
            picked.iter().map(|v| key(v)).collect::<Vec<_>>(),
        )
    };
    let (tz, tk) = select(&|v| v.caption_level == LEVELS, &|v| v.mask_level);
    let (cz, ck) = select(&|v| v.mask_level == levels, &|v| v.caption_level);
    let (lz, lk) = select(&|_| true, &|v| v.length_bucket);
    let mut buckets: Vec<usize> = lk.clone();
    buckets.sort_unstable();
    buckets.dedup();
    Ok(UncertaintyReport {
        audio_by_mask_level: uncertainty_profile(&az, &ak, &mask_levels)?,
        text_by_mask_level: uncertainty_profile(&tz, &tk, &mask_levels)?,
        text_by_caption_level: uncertainty_profile(&cz, &ck, &(1..=LEVELS).collect::<Vec<_>>())?,
        text_by_length: uncertainty_profile(&lz, &lk, &buckets)?,
    })
}

/// Mean similarity of matched (audio, Level-4 caption) pairs and of all
/// unmatched pairs.
pub fn pair_similarity_gap(model: &Model, split: &EmbeddedSplit) -> Result<(f64, f64)> {
    let n = split.audio.len();
    let mut matched = 0.0;
    let mut unmatched = 0.0;
    for (i, a) in split.audio.iter().enumerate() {
        for (j, c) in split.captions.iter().enumerate() {
            let s = model.score(a, &c[LEVELS - 1])?;
            if i == j {
                matched += s;
            } else {
                unmatched += s;
            }
        }
    }
    let pairs = (n * n - n).max(1) as f64;
    Ok((matched / n.max(1) as f64, unmatched / pairs))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mu: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::from_variance(mu.to_vec(), var).unwrap()
    }

    #[test]
    fn single_item_gallery_is_perfect() {
        let r = retrieval_from_scores(Direction::AudioToText, &[vec![0.3]], &[vec![0]]).unwrap();
        assert_eq!(r.r_at.values().copied().collect::<Vec<_>>(), vec![1.0; 3]);
        assert_eq!(r.map_at_10, 1.0);
    }

    #[test]
    fn diagonal_scores_are_perfect() {
        let s: Vec<Vec<f64>> = (0..10)
            .map(|i| (0..10).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let rel: Vec<Vec<usize>> = (0..10).map(|i| vec![i]).collect();
        let r = retrieval_from_scores(Direction::TextToAudio, &s, &rel).unwrap();
        assert_eq!(r.r_at[&1], 1.0);
        assert_eq!(r.map_at_10, 1.0);
    }

    #[test]
    fn hand_ranked_average_precision() {
        // Ranking 2, 0, 4, 1, 3 with relevant {0, 1}: AP = (1/2 + 2/4) / 2.
        let scores = vec![vec![0.8, 0.2, 0.9, 0.1, 0.5]];
        let r = retrieval_from_scores(Direction::AudioToText, &scores, &[vec![0, 1]]).unwrap();
        assert!((r.map_at_10 - 0.5).abs() < 1e-15);
        assert_eq!(r.r_at[&1], 0.0);
        assert_eq!(r.r_at[&5], 1.0);
    }

    #[test]
    fn query_without_relevants_errors() {
        assert!(retrieval_from_scores(Direction::AudioToText, &[vec![1.0]], &[vec![]]).is_err());
    }

    #[test]
    fn inclusion_rate_conventions() {
        let lv4 = vec![g(&[0.0, 1.0], &[0.5, 1.0]), g(&[2.0, -1.0], &[0.2, 0.3])];
        assert_eq!(inclusion_test_rate(&lv4, &lv4).unwrap(), 0.0);
        let lv1: Vec<DiagGaussian> = lv4
            .iter()
            .map(|z| {
                g(
                    z.mu(),
                    &z.variance().iter().map(|v| 4.0 * v).collect::<Vec<_>>(),
                )
            })
            .collect();
        assert_eq!(inclusion_test_rate(&lv1, &lv4).unwrap(), 100.0);
        assert!(inclusion_test_rate(&lv1, &lv4[..1]).is_err());
    }

    #[test]
    fn root_is_an_average() {
        let a = g(&[0.0, 0.0], &[1.0, 3.0]);
        let b = g(&[2.0, 2.0], &[3.0, 1.0]);
        let r = make_root(&a, &b).unwrap();
        assert_eq!(r.mu(), &[1.0, 1.0]);
        assert!(r.variance().iter().all(|v| (v - 2.0).abs() < 1e-12));
        let same = make_root(&a, &a).unwrap();
        assert!(same.mu() == a.mu());
    }

    #[test]
    fn own_chain_gallery_gives_full_precision() {
        let q = g(&[1.0, 0.0], &[0.1, 0.1]);
        let gallery: Vec<DiagGaussian> = (0..4)
            .map(|i| g(&[1.0 - 0.3 * i as f64, 0.0], &[0.1, 0.1]))
            .collect();
        let root = g(&[0.0, 0.0], &[1.0, 1.0]);
        let e = traversal(
            &q,
            &gallery,
            &[4, 3, 2, 1],
            &[true; 4],
            &root,
            50,
            Similarity::Csd,
        )
        .unwrap();
        assert_eq!(e.precision, 1.0);
        assert_eq!(e.trace.len(), 50);
        let two = traversal(
            &q,
            &gallery,
            &[4, 3, 2, 1],
            &[true; 4],
            &root,
            2,
            Similarity::Csd,
        )
        .unwrap();
        assert_eq!(two.trace.len(), 2);
    }

    #[test]
    fn profile_means_by_group() {
        let z = vec![g(&[0.0], &[1.0]), g(&[0.0], &[3.0]), g(&[0.0], &[5.0])];
        let rows = uncertainty_profile(&z, &[0, 0, 1], &[0, 1, 2]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!((rows[0].mean_total_variance - 2.0).abs() < 1e-12);
        assert!((rows[1].mean_total_variance - 5.0).abs() < 1e-12);
    }
}
