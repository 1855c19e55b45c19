//! Synthetic paired data with a known four-level concept hierarchy, and the
//! line-oriented dataset file format.
//!
//! The feature space of width `d_in` is split into four contiguous blocks.
//! The root prototype is zero; a depth-`k` node equals its parent plus a
//! Gaussian perturbation confined to block `k - 1`. Each item picks a leaf and
//! draws an item-specific offset over all coordinates. Then
//!
//! * audio = leaf prototype + item offset + audio noise,
//! * Level-4 caption = leaf prototype + item offset + caption noise,
//! * Level-`k` caption (`k < 4`) = depth-`k` prototype + noise on blocks
//!   `0 .. k`, zero elsewhere.
//!
//! A Level-`k` caption therefore carries `end_of_block(k - 1)` informative
//! coordinates, which serves as the caption-length proxy.
//!
//! # File format
//!
//! UTF-8, one record per line, fields separated by a single tab:
//!
//! ```text
//! prolap-hier v1
//! config  <GenConfig as JSON>                 (optional)
//! node    <id>  <parent id or ->  <depth>  <prototype>
//! item    <id>  <path>  <audio>  <cap1>  <cap2>  <cap3>  <cap4>
//! ```
//!
//! Vectors are comma-separated decimals written with the shortest
//! representation that round-trips exactly. `<path>` lists node ids from the
//! root to the leaf separated by `/`. Node lines must precede the items that
//! reference them. A file holding only the header is an empty dataset.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEADER: &str = "prolap-hier v1";
pub const LEVELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_items: usize,
    /// Children per node at depths 0, 1, 2 and 3.
    pub branching: [usize; LEVELS],
    pub d_in: usize,
    /// Per-coordinate std of the perturbation that creates depth `k + 1`.
    pub proto_scales: [f64; LEVELS],
    /// Per-coordinate std of the Level-`k + 1` caption noise.
    pub caption_noise: [f64; LEVELS],
    pub audio_noise: f64,
    /// Std of the item offset shared by the audio and the Level-4 caption.
    pub item_scale: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_items: 512,
            branching: [4, 3, 2, 2],
            d_in: 32,
            proto_scales: [1.0, 1.0, 1.0, 1.25],
            caption_noise: [0.1; LEVELS],
            audio_noise: 0.1,
            item_scale: 0.25,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.branching.iter().position(|b| *b == 0) {
            return Err(Error::Config {
                key: "branching".into(),
                message: format!("depth {k} has branching 0"),
            });
        }
        if self.d_in < LEVELS {
            return Err(Error::Config {
                key: "d_in".into(),
                message: format!("need at least {LEVELS} coordinates, got {}", self.d_in),
            });
        }
        let scales = self
            .proto_scales
            .iter()
            .map(|s| ("proto_scales", *s))
            .chain(self.caption_noise.iter().map(|s| ("caption_noise", *s)))
            .chain([
                ("audio_noise", self.audio_noise),
                ("item_scale", self.item_scale),
            ]);
        for (key, s) in scales {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config {
                    key: key.into(),
                    message: format!("scale must be finite and non-negative, got {s}"),
                });
            }
        }
        Ok(())
    }
}

/// Coordinates `[start, end)` of block `k`.
pub fn block_range(d_in: usize, k: usize) -> std::ops::Range<usize> {
    (k * d_in / LEVELS)..((k + 1) * d_in / LEVELS)
}

/// Number of informative coordinates in a Level-`level` caption (1-based).
pub fn informative_len(d_in: usize, level: usize) -> usize {
    block_range(d_in, level - 1).end
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: usize,
    pub prototype: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierItem {
    pub item_id: usize,
    pub audio_feat: Vec<f64>,
    /// Levels 1 to 4; index 3 is the most specific.
    pub caption_feats: [Vec<f64>; LEVELS],
    /// Node ids from the root (depth 0) to the leaf (depth 4).
    pub hierarchy_path: Vec<usize>,
}

impl HierItem {
    pub fn caption(&self, level: usize) -> &[f64] {
        &self.caption_feats[level - 1]
    }

    /// Concept node the Level-`level` caption was drawn from.
    pub fn concept(&self, level: usize) -> usize {
        self.hierarchy_path[level]
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HierDataset {
    pub items: Vec<HierItem>,
    pub concept_tree: Vec<ConceptNode>,
    pub config: Option<GenConfig>,
}

fn gaussian(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    scale * z
}

pub fn generate(cfg: &GenConfig) -> Result<HierDataset> {
    cfg.validate()?;
    let d = cfg.d_in;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tree = vec![ConceptNode {
        id: 0,
        parent: None,
        depth: 0,
        prototype: vec![0.0; d],
    }];
    let mut frontier = vec![0usize];
    for depth in 0..LEVELS {
        let mut next = Vec::new();
        for &parent in &frontier {
            for _ in 0..cfg.branching[depth] {
                let mut proto = tree[parent].prototype.clone();
                for x in &mut proto[block_range(d, depth)] {
                    *x += gaussian(&mut rng, cfg.proto_scales[depth]);
                }
                let id = tree.len();
                tree.push(ConceptNode {
                    id,
                    parent: Some(parent),
                    depth: depth + 1,
                    prototype: proto,
                });
                next.push(id);
            }
        }
        frontier = next;
    }
    let leaves = frontier;

    let mut items = Vec::with_capacity(cfg.n_items);
    for item_id in 0..cfg.n_items {
        let leaf = leaves[item_id % leaves.len()];
        let mut path = vec![leaf];
        while let Some(p) = tree[*path.last().expect("non-empty")].parent {
            path.push(p);
        }
        path.reverse();

        let instance: Vec<f64> = tree[leaf]
            .prototype
            .iter()
            .map(|x| x + gaussian(&mut rng, cfg.item_scale))
            .collect();
        let audio_feat: Vec<f64> = instance
            .iter()
            .map(|x| x + gaussian(&mut rng, cfg.audio_noise))
            .collect();
        let caption_feats: [Vec<f64>; LEVELS] = std::array::from_fn(|k| {
            let level = k + 1;
            let noise = cfg.caption_noise[k];
            if level == LEVELS {
                instance
                    .iter()
                    .map(|x| x + gaussian(&mut rng, noise))
                    .collect()
            } else {
                let proto = &tree[path[level]].prototype;
                let end = informative_len(d, level);
                (0..d)
                    .map(|i| {
                        if i < end {
                            proto[i] + gaussian(&mut rng, noise)
                        } else {
                            0.0
                        }
                    })
                    .collect()
            }
        });
        items.push(HierItem {
            item_id,
            audio_feat,
            caption_feats,
            hierarchy_path: path,
        });
    }

    let ds = HierDataset {
        items,
        concept_tree: tree,
        config: Some(cfg.clone()),
    };
    let q = quality_report(&ds);
    if !q.monotone_specificity {
        return Err(Error::invalid(format!(
            "generated captions are not monotone in specificity: mean distances {:?}",
            q.level_distances
        )));
    }
    Ok(ds)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Generation-quality checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityReport {
    pub n_items: usize,
    /// Fraction of items whose own Level-4 caption is the nearest Level-4
    /// caption to their audio.
    pub nearest_caption_rate: f64,
    /// Mean Euclidean distance between audio and the Level-`k` caption.
    pub level_distances: [f64; LEVELS],
    pub monotone_specificity: bool,
    /// Smallest distance between two distinct leaf prototypes.
    pub min_leaf_separation: f64,
    /// Standard deviation of an item's audio around its leaf prototype along
    /// any fixed direction.
    pub within_leaf_spread: f64,
}

/// Leaves count as separated when their closest pair is this many
/// `within_leaf_spread`s apart; a nearest-prototype rule then confuses a
/// given pair with probability `Φ(-SEPARATION_MARGIN / 2)` (about 6.7%).
pub const SEPARATION_MARGIN: f64 = 3.0;

impl QualityReport {
    pub fn siblings_separated(&self) -> bool {
        self.min_leaf_separation > SEPARATION_MARGIN * self.within_leaf_spread
    }
}

pub fn quality_report(ds: &HierDataset) -> QualityReport {
    let n = ds.items.len();
    let mut hits = 0usize;
    let mut level_distances = [0.0; LEVELS];
    for (idx, item) in ds.items.iter().enumerate() {
        // Lowest index wins ties, like every other ranking in the crate.
        let best = ds
            .items
            .iter()
            .enumerate()
            .map(|(j, other)| (j, sq_dist(&item.audio_feat, other.caption(LEVELS))))
            .fold((usize::MAX, f64::INFINITY), |acc, (j, dj)| {
                if dj < acc.1 {
                    (j, dj)
                } else {
                    acc
                }
            });
        hits += (best.0 == idx) as usize;
        for (k, slot) in level_distances.iter_mut().enumerate() {
            *slot += sq_dist(&item.audio_feat, &item.caption_feats[k]).sqrt();
        }
    }
    if n > 0 {
        for slot in &mut level_distances {
            *slot /= n as f64;
        }
    }
    let monotone_specificity = level_distances.windows(2).all(|w| w[1] <= w[0]);

    let leaves: Vec<&ConceptNode> = ds
        .concept_tree
        .iter()
        .filter(|c| c.depth == LEVELS)
        .collect();
    let mut min_leaf_separation = f64::INFINITY;
    for (i, a) in leaves.iter().enumerate() {
        for b in &leaves[i + 1..] {
            min_leaf_separation =
                min_leaf_separation.min(sq_dist(&a.prototype, &b.prototype).sqrt());
        }
    }
    let within_leaf_spread = ds
        .config
        .as_ref()
        .map(|c| (c.item_scale.powi(2) + c.audio_noise.powi(2)).sqrt())
        .unwrap_or(0.0);
    QualityReport {
        n_items: n,
        nearest_caption_rate: if n == 0 { 1.0 } else { hits as f64 / n as f64 },
        level_distances,
        monotone_specificity,
        min_leaf_separation,
        within_leaf_spread,
    }
}

fn write_vec(out: &mut String, v: &[f64]) {
    for (i, x) in v.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        write!(out, "{x:?}").expect("writing to a String cannot fail");
    }
}

/// Serializes `ds` in the line format described in the module docs.
pub fn to_text(ds: &HierDataset) -> Result<String> {
    let mut out = String::new();
    out.push_str(HEADER);
    out.push('\n');
    if let Some(cfg) = &ds.config {
        out.push_str("config\t");
        out.push_str(&serde_json::to_string(cfg)?);
        out.push('\n');
    }
    for node in &ds.concept_tree {
        let parent = node
            .parent
            .map_or_else(|| "-".to_string(), |p| p.to_string());
        write!(out, "node\t{}\t{}\t{}\t", node.id, parent, node.depth).expect("String write");
        write_vec(&mut out, &node.prototype);
        out.push('\n');
    }
    for item in &ds.items {
        let path: Vec<String> = item.hierarchy_path.iter().map(usize::to_string).collect();
        write!(out, "item\t{}\t{}\t", item.item_id, path.join("/")).expect("String write");
        write_vec(&mut out, &item.audio_feat);
        for cap in &item.caption_feats {
            out.push('\t');
            write_vec(&mut out, cap);
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes atomically: a temporary sibling file is renamed over `path`.
pub fn save(ds: &HierDataset, path: &Path) -> Result<()> {
    write_atomic(path, to_text(ds)?.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<HierDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text, path)
}

/// Parses the line format; `origin` only labels error messages.
pub fn parse(text: &str, origin: &Path) -> Result<HierDataset> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        Some((_, h)) => return Err(err(1, format!("expected header `{HEADER}`, found `{h}`"))),
        None => return Err(err(1, "empty file, missing header".into())),
    }

    let mut ds = HierDataset::default();
    let mut dim: Option<usize> = None;
    for (no, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let vector = |s: &str, dim: &mut Option<usize>| -> Result<Vec<f64>> {
            let v = s
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| err(no, format!("bad number in vector: {e}")))?;
            if let Some(x) = v.iter().find(|x| !x.is_finite()) {
                return Err(err(no, format!("non-finite value {x}")));
            }
            match dim {
                Some(d) if *d != v.len() => Err(err(
                    no,
                    format!("vector has {} entries, expected {d}", v.len()),
                )),
                _ => {
                    *dim = Some(v.len());
                    Ok(v)
                }
            }
        };
        let index = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| err(no, format!("bad {what} `{s}`")))
        };
        match fields[0] {
            "config" if fields.len() == 2 => {
                let cfg: GenConfig = serde_json::from_str(fields[1])
                    .map_err(|e| err(no, format!("bad config record: {e}")))?;
                ds.config = Some(cfg);
            }
            "node" if fields.len() == 5 => {
                let id = index(fields[1], "node id")?;
                if id != ds.concept_tree.len() {
                    return Err(err(
                        no,
                        format!("node ids must be dense and ordered, got {id}"),
                    ));
                }
                let parent = match fields[2] {
                    "-" => None,
                    p => {
                        let p = index(p, "parent id")?;
                        if p >= id {
                            return Err(err(
                                no,
                                format!("parent {p} is not defined before node {id}"),
                            ));
                        }
                        Some(p)
                    }
                };
                let depth = index(fields[3], "depth")?;
                let expected = parent.map_or(0, |p| ds.concept_tree[p].depth + 1);
                if depth != expected {
                    return Err(err(
                        no,
                        format!("node {id} has depth {depth}, expected {expected}"),
                    ));
                }
                let prototype = vector(fields[4], &mut dim)?;
                ds.concept_tree.push(ConceptNode {
                    id,
                    parent,
                    depth,
                    prototype,
                });
            }
            "item" if fields.len() == 3 + 1 + LEVELS => {
                let item_id = index(fields[1], "item id")?;
                let hierarchy_path = fields[2]
                    .split('/')
                    .map(|s| index(s, "path node"))
                    .collect::<Result<Vec<usize>>>()?;
                if hierarchy_path.len() != LEVELS + 1 {
                    return Err(err(no, format!("path must have {} nodes", LEVELS + 1)));
                }
                for (depth, &node) in hierarchy_path.iter().enumerate() {
                    let ok = ds.concept_tree.get(node).is_some_and(|c| {
                        c.depth == depth
                            && (depth == 0 || c.parent == Some(hierarchy_path[depth - 1]))
                    });
                    if !ok {
                        return Err(err(
                            no,
                            format!("path node {node} is not in the concept tree at depth {depth}"),
                        ));
                    }
                }
                let audio_feat = vector(fields[3], &mut dim)?;
                let mut caps = Vec::with_capacity(LEVELS);
                for f in &fields[4..] {
                    caps.push(vector(f, &mut dim)?);
                }
                ds.items.push(HierItem {
                    item_id,
                    audio_feat,
                    caption_feats: caps.try_into().expect("exactly LEVELS captions"),
                    hierarchy_path,
                });
            }
            kind => {
                return Err(err(
                    no,
                    format!("malformed `{kind}` record with {} fields", fields.len()),
                ))
            }
        }
    }
    Ok(ds)
}

impl HierDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.items
            .first()
            .map(|i| i.audio_feat.len())
            .or_else(|| self.concept_tree.first().map(|c| c.prototype.len()))
    }

    /// Depth-`k` branching factors observed in the tree.
    pub fn tree_shape(&self) -> Vec<usize> {
        (0..=LEVELS)
            .map(|d| self.concept_tree.iter().filter(|c| c.depth == d).count())
            .collect()
    }
}
