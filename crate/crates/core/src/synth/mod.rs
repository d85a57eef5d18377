//! Dataset construction: GPS bucketing, similarity refinement, entity
//! tagging, entity swaps and split allocation, plus a generator for fully
//! synthetic corpora.

mod generate;

pub use generate::{generate_synthetic_corpus, synthesize, SynthConfig, SynthOutput, SyntheticCorpus};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::retrieval::cosine;
use crate::types::{
    validate_package, DatasetManifest, EntityKind, EntitySpan, FeatureBundle, Gps, IntegrityLabel, LocationNames,
    ManipulationType, Package, Split,
};

/// Coordinates truncated toward zero at two decimals, in hundredths of a degree.
pub type CellKey = (i64, i64);

/// Truncates to hundredths. The value is first rounded at 1e-6 of a cell so
/// that decimal inputs like `51.02` do not land in the cell below.
pub fn cell_key(gps: Gps) -> CellKey {
    let trunc = |deg: f64| {
        let scaled = (deg * 100.0 * 1e6).round() / 1e6;
        scaled.trunc() as i64
    };
    (trunc(gps.lat), trunc(gps.lon))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeoBucket {
    pub key: CellKey,
    pub members: Vec<String>,
}

impl GeoBucket {
    pub fn key_degrees(&self) -> (f64, f64) {
        (self.key.0 as f64 / 100.0, self.key.1 as f64 / 100.0)
    }
}

/// Groups packages by truncated coordinates. Buckets come out in key order,
/// members in input order.
pub fn bucket_by_gps(packages: &[Package]) -> Result<Vec<GeoBucket>> {
    let mut buckets: BTreeMap<CellKey, Vec<String>> = BTreeMap::new();
    for p in packages {
        if !p.gps.is_valid() {
            return Err(Error::Validation(format!("package {} has gps out of range", p.id)));
        }
        buckets.entry(cell_key(p.gps)).or_default().push(p.id.clone());
    }
    Ok(buckets
        .into_iter()
        .map(|(key, members)| GeoBucket { key, members })
        .collect())
}

/// Unions buckets whose cells touch (including diagonally). A merged
/// bucket takes the smallest key; members follow bucket key order.
pub fn merge_neighbor_buckets(buckets: Vec<GeoBucket>) -> Vec<GeoBucket> {
    let slot: BTreeMap<CellKey, usize> = buckets.iter().enumerate().map(|(i, b)| (b.key, i)).collect();
    let mut parent: Vec<usize> = (0..buckets.len()).collect();
    for (i, b) in buckets.iter().enumerate() {
        let (x, y) = b.key;
        for (dx, dy) in [(0, 1), (1, -1), (1, 0), (1, 1)] {
            if let Some(&j) = slot.get(&(x + dx, y + dy)) {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                parent[ri.max(rj)] = ri.min(rj);
            }
        }
    }
    let mut merged: BTreeMap<usize, GeoBucket> = BTreeMap::new();
    for (i, b) in buckets.into_iter().enumerate() {
        let root = find(&mut parent, i);
        merged
            .entry(root)
            .and_modify(|m| m.members.extend(b.members.iter().cloned()))
            .or_insert(b);
    }
    merged.into_values().collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cluster {
    pub id: u32,
    pub members: Vec<String>,
    /// Pairs that passed both similarity thresholds.
    pub edges: Vec<(String, String)>,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Splits a bucket into connected components of the graph whose edges join
/// members with image and text cosine both at or above their thresholds.
/// Clusters are numbered from 0 in order of their first member.
pub fn refine_clusters(
    bucket: &GeoBucket,
    features: &BTreeMap<String, FeatureBundle>,
    tau_img: f64,
    tau_txt: f64,
) -> Result<Vec<Cluster>> {
    let feats = bucket
        .members
        .iter()
        .map(|id| features.get(id).ok_or_else(|| Error::MissingId(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    let n = feats.len();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let img = cosine(&feats[i].image, &feats[j].image)?;
            let txt = cosine(&feats[i].text_pooled, &feats[j].text_pooled)?;
            if img >= tau_img && txt >= tau_txt {
                edges.push((i, j));
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut by_root: BTreeMap<usize, usize> = BTreeMap::new();
    let mut clusters: Vec<Cluster> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        let slot = *by_root.entry(root).or_insert_with(|| {
            clusters.push(Cluster {
                id: clusters.len() as u32,
                members: Vec::new(),
                edges: Vec::new(),
            });
            clusters.len() - 1
        });
        clusters[slot].members.push(bucket.members[i].clone());
    }
    for (i, j) in edges {
        let slot = by_root[&find(&mut parent, i)];
        clusters[slot]
            .edges
            .push((bucket.members[i].clone(), bucket.members[j].clone()));
    }
    Ok(clusters)
}

/// Surface phrase to entity kind, matched token by token.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gazetteer {
    entries: BTreeMap<Vec<String>, EntityKind>,
    max_len: usize,
}

impl Gazetteer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, surface: &str, kind: EntityKind) {
        let tokens: Vec<String> = surface.split_whitespace().map(str::to_owned).collect();
        if tokens.is_empty() {
            return;
        }
        self.max_len = self.max_len.max(tokens.len());
        self.entries.insert(tokens, kind);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<EntityKind> {
        let tokens: Vec<String> = surface.split_whitespace().map(str::to_owned).collect();
        self.entries.get(&tokens).copied()
    }

    /// Surfaces of one kind, in sorted order.
    pub fn surfaces(&self, kind: EntityKind) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, k)| **k == kind)
            .map(|(t, _)| t.join(" "))
            .collect()
    }

    /// `<surface>\t<kind>` per line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        for (tokens, kind) in &self.entries {
            let _ = writeln!(s, "{}\t{kind}", tokens.join(" "));
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut g = Gazetteer::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (surface, kind) = line
                .split_once('\t')
                .ok_or_else(|| Error::format(path, i + 1, "expected `<surface>\\t<kind>`"))?;
            let kind: EntityKind = kind.trim().parse().map_err(|e: Error| Error::format(path, i + 1, e.to_string()))?;
            g.insert(surface, kind);
        }
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_to_string(path)?, path)
    }
}

/// Longest-match, left-to-right gazetteer tagging.
pub fn tag_entities(tokens: &[String], gazetteer: &Gazetteer) -> Vec<EntitySpan> {
    let mut spans = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let longest = (1..=gazetteer.max_len.min(tokens.len() - i))
            .rev()
            .find_map(|len| gazetteer.entries.get(&tokens[i..i + len]).map(|k| (len, *k)));
        match longest {
            Some((len, kind)) => {
                spans.push(EntitySpan {
                    start: i,
                    end: i + len,
                    kind,
                    surface: tokens[i..i + len].join(" "),
                });
                i += len;
            }
            None => i += 1,
        }
    }
    spans
}

/// One entity swap, recorded so the corpus can be audited.
#[derive(Debug, Clone, PartialEq)]
pub struct ManipulationPlan {
    pub target: String,
    pub source: String,
    pub kind: EntityKind,
    pub replacement: String,
    /// Location swaps also carry the source's coordinates and names.
    pub gps: Option<Gps>,
    pub loc_names: Option<LocationNames>,
}

impl ManipulationPlan {
    pub fn tsv_header() -> &'static str {
        "target\tsource\tkind\treplacement\tlat\tlon"
    }

    pub fn to_tsv_line(&self) -> String {
        let (lat, lon) = self
            .gps
            .map_or_else(|| ("-".to_string(), "-".to_string()), |g| (g.lat.to_string(), g.lon.to_string()));
        format!("{}\t{}\t{}\t{}\t{lat}\t{lon}", self.target, self.source, self.kind, self.replacement)
    }
}

pub fn plan_manipulation(target: &Package, source: &Package, kind: EntityKind) -> Result<ManipulationPlan> {
    if target.spans_of(kind).next().is_none() {
        return Err(Error::Plan(format!("target {} has no {kind} entity", target.id)));
    }
    let first = source
        .spans_of(kind)
        .next()
        .ok_or_else(|| Error::Plan(format!("source {} has no {kind} entity", source.id)))?;
    if let (Some(a), Some(b)) = (target.cluster_id, source.cluster_id) {
        if a == b {
            return Err(Error::Plan(format!(
                "target {} and source {} share cluster {a}",
                target.id, source.id
            )));
        }
    }
    let location = kind == EntityKind::Location;
    Ok(ManipulationPlan {
        target: target.id.clone(),
        source: source.id.clone(),
        kind,
        replacement: first.surface.clone(),
        gps: location.then_some(source.gps),
        loc_names: location.then(|| source.loc_names.clone()),
    })
}

/// Replaces every span of the plan's kind and re-indexes all spans.
pub fn apply_plan(target: &Package, plan: &ManipulationPlan) -> Result<Package> {
    if plan.target != target.id {
        return Err(Error::Plan(format!("plan for {} applied to {}", plan.target, target.id)));
    }
    let replacement: Vec<String> = plan.replacement.split_whitespace().map(str::to_owned).collect();
    if replacement.is_empty() {
        return Err(Error::Plan("empty replacement surface".into()));
    }
    let mut spans = target.entities.clone();
    spans.sort_by_key(|s| s.start);
    let mut tokens = Vec::with_capacity(target.tokens.len() + replacement.len());
    let mut entities = Vec::with_capacity(spans.len());
    let mut cursor = 0;
    for span in &spans {
        tokens.extend_from_slice(&target.tokens[cursor..span.start]);
        let start = tokens.len();
        if span.kind == plan.kind {
            tokens.extend_from_slice(&replacement);
        } else {
            tokens.extend_from_slice(&target.tokens[span.start..span.end]);
        }
        entities.push(EntitySpan {
            start,
            end: tokens.len(),
            kind: span.kind,
            surface: tokens[start..].join(" "),
        });
        cursor = span.end;
    }
    tokens.extend_from_slice(&target.tokens[cursor..]);

    let mut out = target.clone();
    out.tokens = tokens;
    out.entities = entities;
    if let Some(gps) = plan.gps {
        out.gps = gps;
    }
    if let Some(names) = &plan.loc_names {
        out.loc_names = names.clone();
    }
    out.integrity_label = IntegrityLabel::Manipulated;
    out.manipulation_type = plan.kind.into();
    Ok(out)
}

/// Swaps every `kind` entity of `target` for the first one in `source`.
pub fn manipulate_package(target: &Package, source: &Package, kind: EntityKind) -> Result<Package> {
    apply_plan(target, &plan_manipulation(target, source, kind)?)
}

/// Query-pool proportions for train, val and test.
pub const SPLIT_FRACTIONS: [f64; 3] = [40_940.0 / 57_940.0, 7_000.0 / 57_940.0, 10_000.0 / 57_940.0];

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SplitAssignment {
    pub splits: BTreeMap<String, Split>,
    /// Query packages to manipulate, in cluster order.
    pub targets: Vec<String>,
}

/// Per cluster (`n >= 4`): `ceil(n/2)` members to reference, the rest to the
/// query pool with `floor(q/2)` marked for manipulation. Smaller clusters
/// go entirely to reference. Query packages are then assigned to
/// train/val/test a whole cluster at a time, so no cluster contributes
/// queries to more than one split.
pub fn allocate_splits(clusters: &[Cluster], seed: u64) -> SplitAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SplitAssignment::default();
    let mut groups: Vec<Vec<String>> = Vec::new();
    for c in clusters {
        let mut members = c.members.clone();
        members.shuffle(&mut rng);
        if members.len() < 4 {
            for m in members {
                out.splits.insert(m, Split::Reference);
            }
            continue;
        }
        let n_ref = members.len().div_ceil(2);
        let query = members.split_off(n_ref);
        for m in members {
            out.splits.insert(m, Split::Reference);
        }
        let n_manip = query.len() / 2;
        out.targets.extend(query[..n_manip].iter().cloned());
        groups.push(query);
    }
    groups.shuffle(&mut rng);
    let n: usize = groups.iter().map(Vec::len).sum();
    let train_end = (n as f64 * SPLIT_FRACTIONS[0]).round() as usize;
    let val_end = (n as f64 * (SPLIT_FRACTIONS[0] + SPLIT_FRACTIONS[1])).round() as usize;
    let mut assigned = 0;
    for group in groups {
        // A group goes to the split whose quota its midpoint falls in.
        let mid = assigned + group.len() / 2;
        let split = if mid < train_end {
            Split::Train
        } else if mid < val_end {
            Split::Val
        } else {
            Split::Test
        };
        assigned += group.len();
        for id in group {
            out.splits.insert(id, split);
        }
    }
    out
}

/// Kind cycle giving a 2:1:1 location:person:organization mix.
pub const KIND_CYCLE: [EntityKind; 4] = [
    EntityKind::Location,
    EntityKind::Person,
    EntityKind::Location,
    EntityKind::Organization,
];

/// Everything produced by [`build_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltDataset {
    /// Final packages (manipulated ones replace their originals), input order.
    pub packages: Vec<Package>,
    pub clusters: Vec<Cluster>,
    pub plans: Vec<ManipulationPlan>,
    pub manifest: DatasetManifest,
}

impl BuiltDataset {
    pub fn split(&self, split: Split) -> Vec<&Package> {
        self.packages.iter().filter(|p| p.split == split).collect()
    }

    pub fn plans_tsv(&self) -> String {
        let mut s = String::from(ManipulationPlan::tsv_header());
        s.push('\n');
        for p in &self.plans {
            s.push_str(&p.to_tsv_line());
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildOptions {
    pub tau_img: f64,
    pub tau_txt: f64,
    pub seed: u64,
    /// Adds uniform noise of at most this many degrees to the gps of
    /// person/organization swaps. Zero disables it.
    pub non_location_jitter: f64,
    /// Merge touching gps cells into one bucket before refinement.
    pub neighbor_merge: bool,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            tau_img: 0.5,
            tau_txt: 0.5,
            seed: 0,
            non_location_jitter: 0.0,
            neighbor_merge: false,
        }
    }
}

/// Runs the whole construction on clean packages: tagging (when the
/// gazetteer is non-empty), bucketing, refinement, allocation and swaps.
/// Seeds: allocation uses `seed + 1`, source selection `seed + 2`.
pub fn build_dataset(
    mut packages: Vec<Package>,
    features: &BTreeMap<String, FeatureBundle>,
    gazetteer: &Gazetteer,
    opts: BuildOptions,
    config: BTreeMap<String, String>,
) -> Result<BuiltDataset> {
    let mut seen = BTreeSet::new();
    for p in &mut packages {
        if !seen.insert(p.id.clone()) {
            return Err(Error::Validation(format!("duplicate package id {}", p.id)));
        }
        if !gazetteer.is_empty() {
            p.entities = tag_entities(&p.tokens, gazetteer);
        }
        p.integrity_label = IntegrityLabel::Clean;
        p.manipulation_type = ManipulationType::None;
        p.split = Split::Unassigned;
        let report = validate_package(p);
        if !report.is_ok() {
            return Err(Error::Validation(format!("package {}: {report}", p.id)));
        }
    }

    let mut clusters = Vec::new();
    let mut buckets = bucket_by_gps(&packages)?;
    if opts.neighbor_merge {
        buckets = merge_neighbor_buckets(buckets);
    }
    for bucket in buckets {
        for mut c in refine_clusters(&bucket, features, opts.tau_img, opts.tau_txt)? {
            c.id = clusters.len() as u32;
            clusters.push(c);
        }
    }
    let position: BTreeMap<String, usize> = packages.iter().enumerate().map(|(i, p)| (p.id.clone(), i)).collect();
    for c in &clusters {
        for m in &c.members {
            packages[position[m]].cluster_id = Some(c.id);
        }
    }

    let assignment = allocate_splits(&clusters, opts.seed.wrapping_add(1));
    let originals = packages.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(2));
    let mut plans = Vec::new();
    for (t, target_id) in assignment.targets.iter().enumerate() {
        let target = &originals[position[target_id]];
        // Prefer the cycle's kind; fall back to any kind the target has.
        let preferred = KIND_CYCLE[t % KIND_CYCLE.len()];
        let kinds = std::iter::once(preferred).chain(EntityKind::ALL.into_iter().filter(|k| *k != preferred));
        let mut chosen = None;
        for kind in kinds {
            if target.spans_of(kind).next().is_none() {
                continue;
            }
            if let Some(source) = pick_source(target, kind, &originals, &mut rng) {
                chosen = Some(plan_manipulation(target, source, kind)?);
                break;
            }
        }
        if let Some(mut plan) = chosen {
            if plan.kind != EntityKind::Location && opts.non_location_jitter > 0.0 {
                let j = opts.non_location_jitter;
                let g = target.gps;
                let jittered = Gps::new(
                    (g.lat + rng.random_range(-j..=j)).clamp(-90.0, 90.0),
                    (g.lon + rng.random_range(-j..=j)).clamp(-180.0, 180.0),
                );
                plan.gps = Some(jittered);
            }
            packages[position[target_id]] = apply_plan(target, &plan)?;
            plans.push(plan);
        }
    }
    for p in &mut packages {
        p.split = assignment.splits.get(&p.id).copied().unwrap_or(Split::Reference);
        let report = validate_package(p);
        if !report.is_ok() {
            return Err(Error::Validation(format!("generated package {}: {report}", p.id)));
        }
    }
    let manifest = DatasetManifest::from_packages(opts.seed, &packages, config);
    manifest.check()?;
    Ok(BuiltDataset {
        packages,
        clusters,
        plans,
        manifest,
    })
}

/// Uniform choice among packages from other clusters whose first `kind`
/// surface differs from every `kind` surface of the target.
fn pick_source<'a>(target: &Package, kind: EntityKind, pool: &'a [Package], rng: &mut ChaCha8Rng) -> Option<&'a Package> {
    let own: BTreeSet<&str> = target.spans_of(kind).map(|s| s.surface.as_str()).collect();
    let candidates: Vec<&Package> = pool
        .iter()
        .filter(|p| p.cluster_id.is_none() || p.cluster_id != target.cluster_id)
        .filter(|p| p.spans_of(kind).next().is_some_and(|s| !own.contains(s.surface.as_str())))
        .collect();
    if candidates.is_empty() {
        None
    } else {
        Some(candidates[rng.random_range(0..candidates.len())])
    }
}

#[cfg(test)]
mod tests;
