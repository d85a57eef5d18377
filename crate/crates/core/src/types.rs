//! Domain types shared by every stage of the pipeline.
//!
//! A [`Package`] is one multimodal record (caption tokens, entity spans, GPS,
//! location names, labels). Packages are immutable once built; stages that
//! change a package (manipulation, split allocation) return a new value.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Person,
    Organization,
    Location,
}

impl EntityKind {
    pub const ALL: [EntityKind; 3] = [EntityKind::Location, EntityKind::Person, EntityKind::Organization];

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::Person => "person",
            EntityKind::Organization => "organization",
            EntityKind::Location => "location",
        }
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "person" => Ok(EntityKind::Person),
            "organization" => Ok(EntityKind::Organization),
            "location" => Ok(EntityKind::Location),
            other => Err(Error::Invalid(format!("unknown entity kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Reference,
    Train,
    Val,
    Test,
    #[default]
    Unassigned,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Reference, Split::Train, Split::Val, Split::Test, Split::Unassigned];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Reference => "reference",
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegrityLabel {
    Clean,
    Manipulated,
    Unknown,
}

impl IntegrityLabel {
    /// Class index used by the three-way manipulation head.
    pub fn class_index(self) -> usize {
        match self {
            IntegrityLabel::Clean => 0,
            IntegrityLabel::Manipulated => 1,
            IntegrityLabel::Unknown => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ManipulationType {
    #[default]
    None,
    Location,
    Person,
    Organization,
}

impl ManipulationType {
    pub const ALL: [ManipulationType; 4] = [
        ManipulationType::None,
        ManipulationType::Location,
        ManipulationType::Person,
        ManipulationType::Organization,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ManipulationType::None => "none",
            ManipulationType::Location => "location",
            ManipulationType::Person => "person",
            ManipulationType::Organization => "organization",
        }
    }
}

impl From<EntityKind> for ManipulationType {
    fn from(kind: EntityKind) -> Self {
        match kind {
            EntityKind::Location => ManipulationType::Location,
            EntityKind::Person => ManipulationType::Person,
            EntityKind::Organization => ManipulationType::Organization,
        }
    }
}

/// Feature modality used for retrieval and by the detection model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Gps,
}

impl Modality {
    /// Fixed concatenation order. Checkpoints depend on it.
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Gps];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Gps => "gps",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Text => 1,
            Modality::Gps => 2,
        }
    }

    /// Parses a comma-separated list such as `image,text,gps`.
    pub fn parse_list(s: &str) -> Result<Vec<Modality>> {
        let mut out: Vec<Modality> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m: Modality = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            "gps" | "location" => Ok(Modality::Gps),
            other => Err(Error::Invalid(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub kind: EntityKind,
    pub surface: String,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gps {
    pub lat: f64,
    pub lon: f64,
}

impl Gps {
    pub fn new(lat: f64, lon: f64) -> Self {
        Gps { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        (-90.0..=90.0).contains(&self.lat) && (-180.0..=180.0).contains(&self.lon)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LocationNames {
    #[serde(default)]
    pub country: String,
    #[serde(default)]
    pub county: String,
    #[serde(default)]
    pub region: String,
    #[serde(default)]
    pub locality: String,
}

/// One multimodal record. Serialized one per line in corpus files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Package {
    pub id: String,
    pub tokens: Vec<String>,
    #[serde(default)]
    pub entities: Vec<EntitySpan>,
    pub gps: Gps,
    #[serde(default)]
    pub loc_names: LocationNames,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<u32>,
    #[serde(default)]
    pub split: Split,
    pub integrity_label: IntegrityLabel,
    #[serde(default)]
    pub manipulation_type: ManipulationType,
    /// Carried through untouched; never featurized.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
    /// Key into a precomputed image-feature file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
}

impl Package {
    /// A clean, unassigned package with no entities.
    pub fn new(id: impl Into<String>, tokens: Vec<String>, gps: Gps) -> Self {
        Package {
            id: id.into(),
            tokens,
            entities: Vec::new(),
            gps,
            loc_names: LocationNames::default(),
            cluster_id: None,
            split: Split::Unassigned,
            integrity_label: IntegrityLabel::Clean,
            manipulation_type: ManipulationType::None,
            timestamp: None,
            image_ref: None,
        }
    }

    pub fn spans_of(&self, kind: EntityKind) -> impl Iterator<Item = &EntitySpan> {
        self.entities.iter().filter(move |e| e.kind == kind)
    }

    pub fn is_manipulated(&self) -> bool {
        self.integrity_label == IntegrityLabel::Manipulated
    }

    pub fn caption(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Whitespace tokenization applied on ingestion.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_owned).collect()
}

/// Maps degrees to `(lat/90, lon/180)`.
pub fn normalize_gps(lat: f64, lon: f64) -> Result<[f64; 2]> {
    let gps = Gps::new(lat, lon);
    if !gps.is_valid() {
        return Err(Error::Validation(format!("gps ({lat}, {lon}) out of range")));
    }
    Ok([lat / 90.0, lon / 180.0])
}

pub fn denormalize_gps(v: [f64; 2]) -> Gps {
    Gps::new(v[0] * 90.0, v[1] * 180.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    GpsOutOfRange,
    SpanBounds { span: usize },
    SpanOverlap { first: usize, second: usize },
    SurfaceMismatch { span: usize },
    ReferenceNotClean,
    ManipulationLabelMismatch,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "empty package id"),
            Violation::GpsOutOfRange => write!(f, "gps out of range"),
            Violation::SpanBounds { span } => write!(f, "span {span} exceeds token bounds"),
            Violation::SpanOverlap { first, second } => {
                write!(f, "spans {first} and {second} overlap")
            }
            Violation::SurfaceMismatch { span } => {
                write!(f, "span {span} surface differs from its tokens")
            }
            Violation::ReferenceNotClean => write!(f, "reference package is not clean"),
            Violation::ManipulationLabelMismatch => {
                write!(f, "manipulation type disagrees with integrity label")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks every package invariant and lists the ones that fail.
pub fn validate_package(p: &Package) -> ValidationReport {
    let mut violations = Vec::new();
    if p.id.is_empty() {
        violations.push(Violation::EmptyId);
    }
    if !p.gps.is_valid() {
        violations.push(Violation::GpsOutOfRange);
    }
    let n = p.tokens.len();
    for (i, span) in p.entities.iter().enumerate() {
        if span.start >= span.end || span.end > n {
            violations.push(Violation::SpanBounds { span: i });
            continue;
        }
        if p.tokens[span.start..span.end].join(" ") != span.surface {
            violations.push(Violation::SurfaceMismatch { span: i });
        }
    }
    for i in 0..p.entities.len() {
        for j in (i + 1)..p.entities.len() {
            let (a, b) = (&p.entities[i], &p.entities[j]);
            if a.start < b.end && b.start < a.end {
                violations.push(Violation::SpanOverlap { first: i, second: j });
            }
        }
    }
    if p.split == Split::Reference && p.integrity_label != IntegrityLabel::Clean {
        violations.push(Violation::ReferenceNotClean);
    }
    let manipulated = p.integrity_label == IntegrityLabel::Manipulated;
    if (p.manipulation_type != ManipulationType::None) != manipulated {
        violations.push(Violation::ManipulationLabelMismatch);
    }
    ValidationReport { violations }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Presence {
    pub image: bool,
    pub text: bool,
    pub gps: bool,
}

impl Presence {
    pub const ALL: Presence = Presence {
        image: true,
        text: true,
        gps: true,
    };

    pub fn get(&self, m: Modality) -> bool {
        match m {
            Modality::Image => self.image,
            Modality::Text => self.text,
            Modality::Gps => self.gps,
        }
    }

    pub fn set(&mut self, m: Modality, present: bool) {
        match m {
            Modality::Image => self.image = present,
            Modality::Text => self.text = present,
            Modality::Gps => self.gps = present,
        }
    }
}

impl Default for Presence {
    fn default() -> Self {
        Presence::ALL
    }
}

/// Numeric features of one package.
///
/// A missing modality is an all-zero vector with its presence flag cleared.
/// A missing text modality also has an empty token matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub image: Vec<f64>,
    pub text_tokens: Vec<Vec<f64>>,
    pub text_pooled: Vec<f64>,
    pub gps: [f64; 2],
    pub present: Presence,
}

impl FeatureBundle {
    pub fn modality(&self, m: Modality) -> &[f64] {
        match m {
            Modality::Image => &self.image,
            Modality::Text => &self.text_pooled,
            Modality::Gps => &self.gps,
        }
    }

    pub fn image_dim(&self) -> usize {
        self.image.len()
    }

    pub fn text_dim(&self) -> usize {
        self.text_pooled.len()
    }

    /// Copy with modality `m` replaced by zeros and flagged absent.
    pub fn without(&self, m: Modality) -> FeatureBundle {
        let mut out = self.clone();
        match m {
            Modality::Image => out.image.iter_mut().for_each(|v| *v = 0.0),
            Modality::Text => {
                out.text_tokens.clear();
                out.text_pooled.iter_mut().for_each(|v| *v = 0.0);
            }
            Modality::Gps => out.gps = [0.0; 2],
        }
        out.present.set(m, false);
        out
    }

    pub fn check(&self, image_dim: usize, text_dim: usize) -> Result<()> {
        if self.image.len() != image_dim {
            return Err(Error::Shape(format!(
                "image dim {} != {image_dim}",
                self.image.len()
            )));
        }
        if self.text_pooled.len() != text_dim {
            return Err(Error::Shape(format!(
                "text dim {} != {text_dim}",
                self.text_pooled.len()
            )));
        }
        if let Some(row) = self.text_tokens.iter().find(|r| r.len() != text_dim) {
            return Err(Error::Shape(format!("token row dim {} != {text_dim}", row.len())));
        }
        let finite = self.image.iter().chain(&self.text_pooled).chain(&self.gps).all(|v| v.is_finite())
            && self.text_tokens.iter().flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Validation("non-finite feature value".into()));
        }
        Ok(())
    }
}

/// Per-cluster allocation counts recorded in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterCounts {
    pub cluster_id: u32,
    pub size: usize,
    pub reference: usize,
    pub manipulated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub total: usize,
    pub split_counts: BTreeMap<Split, usize>,
    pub manipulation_counts: BTreeMap<ManipulationType, usize>,
    pub clusters: Vec<ClusterCounts>,
    /// `key = value` snapshot of the configuration that produced the data.
    pub config: BTreeMap<String, String>,
}

impl DatasetManifest {
    /// Recomputes counts from the packages.
    pub fn from_packages(seed: u64, packages: &[Package], config: BTreeMap<String, String>) -> Self {
        let mut split_counts: BTreeMap<Split, usize> = BTreeMap::new();
        let mut manipulation_counts: BTreeMap<ManipulationType, usize> = BTreeMap::new();
        let mut per_cluster: BTreeMap<u32, ClusterCounts> = BTreeMap::new();
        for p in packages {
            *split_counts.entry(p.split).or_default() += 1;
            *manipulation_counts.entry(p.manipulation_type).or_default() += 1;
            if let Some(c) = p.cluster_id {
                let entry = per_cluster.entry(c).or_insert(ClusterCounts {
                    cluster_id: c,
                    size: 0,
                    reference: 0,
                    manipulated: 0,
                });
                entry.size += 1;
                entry.reference += usize::from(p.split == Split::Reference);
                entry.manipulated += usize::from(p.is_manipulated());
            }
        }
        DatasetManifest {
            seed,
            total: packages.len(),
            split_counts,
            manipulation_counts,
            clusters: per_cluster.into_values().collect(),
            config,
        }
    }

    pub fn split_count(&self, split: Split) -> usize {
        self.split_counts.get(&split).copied().unwrap_or(0)
    }

    pub fn manipulation_count(&self, kind: ManipulationType) -> usize {
        self.manipulation_counts.get(&kind).copied().unwrap_or(0)
    }

    pub fn check(&self) -> Result<()> {
        let by_split: usize = self.split_counts.values().sum();
        let by_kind: usize = self.manipulation_counts.values().sum();
        if by_split != self.total || by_kind != self.total {
            return Err(Error::Validation(format!(
                "manifest counts disagree: total {}, by split {by_split}, by kind {by_kind}",
                self.total
            )));
        }
        if let Some(c) = self.clusters.iter().find(|c| c.reference + c.manipulated > c.size) {
            return Err(Error::Validation(format!(
                "cluster {} counts exceed its size",
                c.cluster_id
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn table_one_package() -> Package {
        let tokens = tokenize("Ex Convento at Cuilapan De Guerrero completed in 1555");
        let mut p = Package::new("p1", tokens, Gps::new(16.992657, -96.779133));
        p.entities.push(EntitySpan {
            start: 3,
            end: 6,
            kind: EntityKind::Location,
            surface: "Cuilapan De Guerrero".into(),
        });
        p
    }

    #[test]
    fn normalize_gps_examples() {
        assert_eq!(normalize_gps(0.0, 0.0).unwrap(), [0.0, 0.0]);
        assert_eq!(normalize_gps(90.0, 180.0).unwrap(), [1.0, 1.0]);
        let v = normalize_gps(16.992657, -96.779133).unwrap();
        assert!((v[0] - 0.18881).abs() < 1e-5);
        assert!((v[1] + 0.53766).abs() < 1e-5);
    }

    #[test]
    fn normalize_gps_rejects_out_of_range() {
        assert!(matches!(normalize_gps(90.5, 0.0), Err(Error::Validation(_))));
        assert!(normalize_gps(0.0, -180.01).is_err());
    }

    #[test]
    fn well_formed_package_validates() {
        assert!(validate_package(&table_one_package()).is_ok());
    }

    #[test]
    fn span_past_tokens_is_reported() {
        let mut p = table_one_package();
        p.entities[0].end = 12;
        let report = validate_package(&p);
        assert_eq!(report.violations, vec![Violation::SpanBounds { span: 0 }]);
        assert!(report.to_string().contains("token bounds"));
    }

    #[test]
    fn manipulated_reference_is_reported() {
        let mut p = table_one_package();
        p.split = Split::Reference;
        p.integrity_label = IntegrityLabel::Manipulated;
        p.manipulation_type = ManipulationType::Location;
        let report = validate_package(&p);
        assert_eq!(report.violations, vec![Violation::ReferenceNotClean]);
    }

    #[test]
    fn overlap_and_surface_mismatch() {
        let mut p = table_one_package();
        p.entities.push(EntitySpan {
            start: 5,
            end: 7,
            kind: EntityKind::Person,
            surface: "wrong".into(),
        });
        let v = validate_package(&p).violations;
        assert!(v.contains(&Violation::SurfaceMismatch { span: 1 }));
        assert!(v.contains(&Violation::SpanOverlap { first: 0, second: 1 }));
    }

    #[test]
    fn label_type_mismatch() {
        let mut p = table_one_package();
        p.manipulation_type = ManipulationType::Person;
        assert_eq!(
            validate_package(&p).violations,
            vec![Violation::ManipulationLabelMismatch]
        );
    }

    #[test]
    fn bundle_without_zeroes_and_flags() {
        let b = FeatureBundle {
            image: vec![1.0, 2.0],
            text_tokens: vec![vec![1.0], vec![3.0]],
            text_pooled: vec![2.0],
            gps: [0.5, -0.5],
            present: Presence::ALL,
        };
        let no_text = b.without(Modality::Text);
        assert!(no_text.text_tokens.is_empty());
        assert_eq!(no_text.text_pooled, vec![0.0]);
        assert!(!no_text.present.text);
        assert_eq!(no_text.image, b.image);
        let no_gps = b.without(Modality::Gps);
        assert_eq!(no_gps.gps, [0.0, 0.0]);
        assert!(no_gps.check(2, 1).is_ok());
        assert!(b.check(3, 1).is_err());
    }

    #[test]
    fn modality_list_parsing() {
        assert_eq!(
            Modality::parse_list("image,text,gps").unwrap(),
            Modality::ALL.to_vec()
        );
        assert!(Modality::parse_list("image,audio").is_err());
    }

    fn arb_package() -> impl Strategy<Value = Package> {
        (
            "[a-z0-9]{1,8}",
            proptest::collection::vec("[A-Za-z]{1,6}", 0..12),
            -90.0f64..=90.0,
            -180.0f64..=180.0,
            proptest::option::of(0u32..1000),
            proptest::option::of("[0-9:-]{4,12}"),
        )
            .prop_map(|(id, tokens, lat, lon, cluster_id, timestamp)| {
                let mut p = Package::new(id, tokens, Gps::new(lat, lon));
                if p.tokens.len() >= 2 {
                    p.entities.push(EntitySpan {
                        start: 0,
                        end: 2,
                        kind: EntityKind::Person,
                        surface: p.tokens[..2].join(" "),
                    });
                }
                p.cluster_id = cluster_id;
                p.timestamp = timestamp;
                p.loc_names.country = "Mexico".into();
                p
            })
    }

    proptest! {
        #[test]
        fn gps_normalization_inverts(lat in -90.0f64..=90.0, lon in -180.0f64..=180.0) {
            let back = denormalize_gps(normalize_gps(lat, lon).unwrap());
            prop_assert!((back.lat - lat).abs() <= 1e-12);
            prop_assert!((back.lon - lon).abs() <= 1e-12);
        }

        #[test]
        fn package_json_round_trip(p in arb_package()) {
            let line = serde_json::to_string(&p).unwrap();
            let back: Package = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, p);
        }

        #[test]
        fn manifest_json_round_trip(ps in proptest::collection::vec(arb_package(), 0..20), seed in any::<u64>()) {
            let mut cfg = BTreeMap::new();
            cfg.insert("synth.clusters".to_string(), "40".to_string());
            let m = DatasetManifest::from_packages(seed, &ps, cfg);
            m.check().unwrap();
            let text = serde_json::to_string_pretty(&m).unwrap();
            let back: DatasetManifest = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
