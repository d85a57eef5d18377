use super::*;
use crate::embed::HashEmbedder;
use crate::types::{tokenize, Modality, Presence};
use proptest::prelude::*;

fn pkg(id: &str, lat: f64, lon: f64) -> Package {
    Package::new(id, tokenize("a photo"), Gps::new(lat, lon))
}

fn bundle(image: Vec<f64>, text: Vec<f64>) -> FeatureBundle {
    FeatureBundle {
        image,
        text_tokens: vec![text.clone()],
        text_pooled: text,
        gps: [0.0, 0.0],
        present: Presence::ALL,
    }
}

fn tagged(text: &str, gaz: &[(&str, EntityKind)]) -> Package {
    let mut g = Gazetteer::new();
    for (s, k) in gaz {
        g.insert(s, *k);
    }
    let mut p = Package::new("t", tokenize(text), Gps::new(43.737553, -122.883646));
    p.entities = tag_entities(&p.tokens, &g);
    p
}

#[test]
fn bucket_keys_truncate_toward_zero() {
    assert_eq!(cell_key(Gps::new(43.737553, -122.883646)), (4373, -12288));
    assert_eq!(cell_key(Gps::new(0.004, -0.004)), (0, 0));
    assert_eq!(cell_key(Gps::new(51.0249, -0.4502)), (5102, -45));
    assert_eq!(cell_key(Gps::new(51.0201, -0.4599)), (5102, -45));
    let buckets = bucket_by_gps(&[pkg("a", 51.0249, -0.4502), pkg("b", 51.0201, -0.4599), pkg("c", 0.004, -0.004)]).unwrap();
    assert_eq!(buckets.len(), 2);
    let k = buckets.iter().find(|b| b.members.len() == 2).unwrap();
    assert_eq!(k.key_degrees(), (51.02, -0.45));
    let zero = buckets.iter().find(|b| b.members == ["c"]).unwrap().key_degrees();
    assert!(zero.0 == 0.0 && zero.1 == 0.0 && !zero.0.is_sign_negative() && !zero.1.is_sign_negative());
}

#[test]
fn neighbor_merge_joins_touching_cells() {
    let ps = [
        pkg("a", 10.005, 20.005),
        pkg("b", 10.015, 20.015),
        pkg("c", 10.025, 20.005),
        pkg("d", 10.045, 20.005),
        pkg("e", 10.005, 20.035),
    ];
    let merged = merge_neighbor_buckets(bucket_by_gps(&ps).unwrap());
    let groups: Vec<Vec<&str>> = merged.iter().map(|b| b.members.iter().map(String::as_str).collect()).collect();
    assert_eq!(groups, [vec!["a", "b", "c"], vec!["e"], vec!["d"]]);
    assert_eq!(merged[0].key, (1000, 2000));
}

#[test]
fn bucketing_rejects_invalid_gps() {
    assert!(bucket_by_gps(&[pkg("a", 91.0, 0.0)]).is_err());
}

#[test]
fn refinement_components() {
    let e = |i: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v
    };
    let mix = |i: usize, j: usize| {
        let mut v = vec![0.0; 4];
        v[i] = 1.0;
        v[j] = 1.0;
        v
    };
    // a~b (cos 0.707), b~c (0.707), a and c orthogonal, d isolated.
    let feats: BTreeMap<String, FeatureBundle> = [
        ("a", bundle(e(0), e(0))),
        ("b", bundle(mix(0, 1), mix(0, 1))),
        ("c", bundle(e(1), e(1))),
        ("d", bundle(e(3), e(3))),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let bucket = GeoBucket {
        key: (0, 0),
        members: ["a", "b", "c", "d"].map(String::from).to_vec(),
    };
    let clusters = refine_clusters(&bucket, &feats, 0.5, 0.5).unwrap();
    let sets: Vec<Vec<String>> = clusters.iter().map(|c| c.members.clone()).collect();
    assert_eq!(sets, vec![vec!["a", "b", "c"], vec!["d"]]);
    assert_eq!(clusters[0].edges.len(), 2);
    assert!(clusters[1].edges.is_empty());

    let two = GeoBucket {
        key: (0, 0),
        members: vec!["a".into(), "c".into()],
    };
    assert_eq!(refine_clusters(&two, &feats, 0.5, 0.5).unwrap().len(), 2);
    let same = GeoBucket {
        key: (0, 0),
        members: vec!["a".into(), "a".into()],
    };
    assert_eq!(refine_clusters(&same, &feats, 0.5, 0.5).unwrap().len(), 1);
    let missing = GeoBucket {
        key: (0, 0),
        members: vec!["a".into(), "zz".into()],
    };
    match refine_clusters(&missing, &feats, 0.5, 0.5) {
        Err(Error::MissingId(id)) => assert_eq!(id, "zz"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn refinement_requires_both_thresholds() {
    let feats: BTreeMap<String, FeatureBundle> = [
        ("a", bundle(vec![1.0, 0.0], vec![1.0, 0.0])),
        ("b", bundle(vec![1.0, 0.0], vec![0.0, 1.0])),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let bucket = GeoBucket {
        key: (0, 0),
        members: vec!["a".into(), "b".into()],
    };
    assert_eq!(refine_clusters(&bucket, &feats, 0.5, 0.5).unwrap().len(), 2);
    assert_eq!(refine_clusters(&bucket, &feats, 0.5, -1.0).unwrap().len(), 1);
}

#[test]
fn tagger_spans() {
    let p = tagged(
        "Ex Convento at Cuilapan De Guerrero completed in 1555",
        &[("Cuilapan De Guerrero", EntityKind::Location)],
    );
    assert_eq!(p.entities.len(), 1);
    let s = &p.entities[0];
    assert_eq!((s.start, s.end, s.kind), (3, 6, EntityKind::Location));
    assert_eq!(s.surface, "Cuilapan De Guerrero");

    assert!(tag_entities(&p.tokens, &Gazetteer::new()).is_empty());

    let p = tagged(
        "skyline of New York City at dusk",
        &[("New York", EntityKind::Location), ("New York City", EntityKind::Location)],
    );
    assert_eq!(p.entities.len(), 1);
    assert_eq!(p.entities[0].surface, "New York City");
    assert_eq!((p.entities[0].start, p.entities[0].end), (2, 5));
}

#[test]
fn gazetteer_tsv_round_trip() {
    let mut g = Gazetteer::new();
    g.insert("Dorena Bridge", EntityKind::Location);
    g.insert("Neil Gaiman", EntityKind::Person);
    let text = g.to_tsv();
    assert!(text.contains("Dorena Bridge\tlocation\n"));
    let back = Gazetteer::parse(&text, Path::new("g.tsv")).unwrap();
    assert_eq!(back, g);
    assert_eq!(back.get("Neil Gaiman"), Some(EntityKind::Person));
    match Gazetteer::parse("a\tplanet\n", Path::new("g.tsv")) {
        Err(Error::Format { line, .. }) => assert_eq!(line, 1),
        other => panic!("{other:?}"),
    }
}

#[test]
fn location_swap_replaces_text_and_coordinates() {
    let mut target = tagged(
        "Ex Convento at Cuilapan De Guerrero completed in 1555",
        &[("Cuilapan De Guerrero", EntityKind::Location)],
    );
    target.cluster_id = Some(1);
    let mut source = tagged("Dorena Bridge in spring", &[("Dorena Bridge", EntityKind::Location)]);
    source.id = "s".into();
    source.gps = Gps::new(43.737553, -122.883646);
    source.loc_names = LocationNames {
        country: "United States".into(),
        county: "Lane".into(),
        region: "Oregon".into(),
        locality: "Row River".into(),
    };
    source.cluster_id = Some(2);
    target.gps = Gps::new(17.0, -96.8);
    let out = manipulate_package(&target, &source, EntityKind::Location).unwrap();
    assert_eq!(out.caption(), "Ex Convento at Dorena Bridge completed in 1555");
    assert_eq!(out.gps, source.gps);
    assert_eq!(out.loc_names, source.loc_names);
    assert_eq!(out.integrity_label, IntegrityLabel::Manipulated);
    assert_eq!(out.manipulation_type, ManipulationType::Location);
    assert_eq!((out.entities[0].start, out.entities[0].end), (3, 5));
    assert!(validate_package(&out).is_ok());
}

#[test]
fn person_swap_keeps_coordinates() {
    let target = tagged(
        "Castle modelled in Lego by Dilip",
        &[("Dilip", EntityKind::Person)],
    );
    let mut source = tagged("Neil Gaiman reading", &[("Neil Gaiman", EntityKind::Person)]);
    source.id = "s".into();
    source.gps = Gps::new(1.0, 1.0);
    let out = manipulate_package(&target, &source, EntityKind::Person).unwrap();
    assert_eq!(out.caption(), "Castle modelled in Lego by Neil Gaiman");
    assert_eq!(out.gps, target.gps);
    assert_eq!(out.loc_names, target.loc_names);
    assert_eq!(out.manipulation_type, ManipulationType::Person);
}

#[test]
fn every_mention_is_replaced() {
    let gaz = [
        ("Ann Lee", EntityKind::Person),
        ("Bob", EntityKind::Person),
        ("Acme", EntityKind::Organization),
    ];
    let target = tagged("Ann Lee of Acme met Ann Lee again", &gaz);
    let mut source = tagged("Bob of Acme", &gaz);
    source.id = "s".into();
    let out = manipulate_package(&target, &source, EntityKind::Person).unwrap();
    assert_eq!(out.caption(), "Bob of Acme met Bob again");
    let people: Vec<(usize, usize)> = out.spans_of(EntityKind::Person).map(|s| (s.start, s.end)).collect();
    assert_eq!(people, vec![(0, 1), (4, 5)]);
    let org = out.spans_of(EntityKind::Organization).next().unwrap();
    assert_eq!((org.start, org.end, org.surface.as_str()), (2, 3, "Acme"));
}

#[test]
fn swap_preconditions() {
    let gaz = [("Ann", EntityKind::Person), ("Acme", EntityKind::Organization)];
    let mut target = tagged("Ann at home", &gaz);
    let mut source = tagged("Acme", &gaz);
    source.id = "s".into();
    assert!(matches!(
        manipulate_package(&target, &source, EntityKind::Person),
        Err(Error::Plan(_))
    ));
    assert!(matches!(
        manipulate_package(&target, &source, EntityKind::Organization),
        Err(Error::Plan(_))
    ));
    let mut source = tagged("Ann", &gaz);
    source.id = "s".into();
    target.cluster_id = Some(3);
    source.cluster_id = Some(3);
    assert!(matches!(
        manipulate_package(&target, &source, EntityKind::Person),
        Err(Error::Plan(_))
    ));
}

fn cluster(id: u32, n: usize) -> Cluster {
    Cluster {
        id,
        members: (0..n).map(|i| format!("k{id}-{i}")).collect(),
        edges: Vec::new(),
    }
}

#[test]
fn allocation_examples() {
    let a = allocate_splits(&[cluster(0, 8)], 1);
    let refs = a.splits.values().filter(|s| **s == Split::Reference).count();
    assert_eq!(refs, 4);
    assert_eq!(a.targets.len(), 2);
    assert!(a.targets.iter().all(|t| a.splits[t] != Split::Reference));

    let a = allocate_splits(&[cluster(0, 2)], 1);
    assert!(a.splits.values().all(|s| *s == Split::Reference));
    assert!(a.targets.is_empty());

    let a = allocate_splits(&[cluster(0, 5)], 1);
    let refs = a.splits.values().filter(|s| **s == Split::Reference).count();
    assert_eq!((refs, a.targets.len()), (3, 1));
}

#[test]
fn allocation_query_proportions() {
    let clusters: Vec<Cluster> = (0..500).map(|c| cluster(c, 8)).collect();
    let a = allocate_splits(&clusters, 9);
    let n_query = a.splits.values().filter(|s| **s != Split::Reference).count() as f64;
    for (split, want) in [Split::Train, Split::Val, Split::Test].into_iter().zip(SPLIT_FRACTIONS) {
        let got = a.splits.values().filter(|s| **s == split).count() as f64 / n_query;
        assert!((got - want).abs() < 0.01, "{split}: {got} vs {want}");
    }
}

fn small_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        clusters: 10,
        per_cluster: 8,
        ..SynthConfig::default()
    }
}

#[test]
fn generator_counts_and_buckets() {
    let corpus = generate_synthetic_corpus(&small_cfg(3), None).unwrap();
    assert_eq!(corpus.packages.len(), 80);
    let clusters: BTreeSet<u32> = corpus.truth.values().copied().collect();
    assert_eq!(clusters.len(), 10);
    let buckets = bucket_by_gps(&corpus.packages).unwrap();
    assert_eq!(buckets.len(), 10);
    assert_eq!(merge_neighbor_buckets(buckets.clone()), buckets);
    for b in &buckets {
        let truth: BTreeSet<u32> = b.members.iter().map(|m| corpus.truth[m]).collect();
        assert_eq!(truth.len(), 1);
    }
    for p in &corpus.packages {
        assert!(validate_package(p).is_ok(), "{}", p.id);
        for kind in EntityKind::ALL {
            assert!(p.spans_of(kind).next().is_some(), "{} lacks {kind}", p.id);
        }
        // Tagging the generated caption recovers the generated spans.
        assert_eq!(tag_entities(&p.tokens, &corpus.gazetteer), p.entities);
    }
}

#[test]
fn generator_is_deterministic() {
    let a = generate_synthetic_corpus(&small_cfg(5), None).unwrap();
    let b = generate_synthetic_corpus(&small_cfg(5), None).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic_corpus(&small_cfg(6), None).unwrap();
    assert_ne!(a.packages, c.packages);
}

#[test]
fn generator_lexicon_size_checked() {
    let mut g = Gazetteer::new();
    for i in 0..19 {
        g.insert(&format!("Loc{i}"), EntityKind::Location);
        g.insert(&format!("Per{i}"), EntityKind::Person);
        g.insert(&format!("Org{i}"), EntityKind::Organization);
    }
    assert!(matches!(generate_synthetic_corpus(&small_cfg(1), Some(&g)), Err(Error::Config(_))));
    g.insert("Loc19", EntityKind::Location);
    g.insert("Per19", EntityKind::Person);
    g.insert("Org19", EntityKind::Organization);
    let corpus = generate_synthetic_corpus(&small_cfg(1), Some(&g)).unwrap();
    for p in &corpus.packages {
        for s in &p.entities {
            assert_eq!(g.get(&s.surface), Some(s.kind));
        }
    }
}

fn embedder() -> HashEmbedder {
    HashEmbedder::new(64, 0).unwrap()
}

#[test]
fn refinement_recovers_generator_clusters() {
    let out = synthesize(&SynthConfig { clusters: 40, ..small_cfg(2) }, &embedder(), None).unwrap();
    assert_eq!(out.dataset.clusters.len(), 40);
    for c in &out.dataset.clusters {
        let truth: BTreeSet<u32> = c.members.iter().map(|m| out.truth[m]).collect();
        assert_eq!(truth.len(), 1);
        assert_eq!(c.members.len(), 8);
    }
}

fn check_dataset_invariants(out: &SynthOutput) {
    let ds = &out.dataset;
    let by_id: BTreeMap<&str, &Package> = ds.packages.iter().map(|p| (p.id.as_str(), p)).collect();
    for p in &ds.packages {
        assert!(validate_package(p).is_ok(), "{}", p.id);
        if p.split == Split::Reference {
            assert!(!p.is_manipulated(), "{}", p.id);
        }
        assert_eq!(p.is_manipulated(), p.manipulation_type != ManipulationType::None);
    }
    assert_eq!(ds.plans.len(), ds.packages.iter().filter(|p| p.is_manipulated()).count());
    for plan in &ds.plans {
        let (t, s) = (by_id[plan.target.as_str()], by_id[plan.source.as_str()]);
        assert_ne!(t.cluster_id, s.cluster_id);
        assert_ne!(out.truth[&plan.target], out.truth[&plan.source]);
        assert_eq!(t.manipulation_type, ManipulationType::from(plan.kind));
        for span in t.spans_of(plan.kind) {
            assert_eq!(span.surface, plan.replacement);
        }
        if plan.kind == EntityKind::Location {
            assert_eq!(Some(t.gps), plan.gps);
        }
    }
}

#[test]
fn synthesized_dataset_invariants_and_ratios() {
    let out = synthesize(&SynthConfig { clusters: 80, ..small_cfg(4) }, &embedder(), None).unwrap();
    check_dataset_invariants(&out);
    let m = &out.dataset.manifest;
    for c in &m.clusters {
        assert_eq!((c.size, c.reference, c.manipulated), (8, 4, 2));
    }
    let (l, p, o) = (
        m.manipulation_count(ManipulationType::Location),
        m.manipulation_count(ManipulationType::Person),
        m.manipulation_count(ManipulationType::Organization),
    );
    assert_eq!((l, p, o), (80, 40, 40));
}

#[test]
fn swaps_change_content() {
    let cfg = SynthConfig { clusters: 20, ..small_cfg(8) };
    let corpus = generate_synthetic_corpus(&cfg, None).unwrap();
    let out = synthesize(&cfg, &embedder(), None).unwrap();
    let originals: BTreeMap<&str, &Package> = corpus.packages.iter().map(|p| (p.id.as_str(), p)).collect();
    for plan in &out.dataset.plans {
        let before = originals[plan.target.as_str()];
        let found = tag_entities(&before.tokens, &out.gazetteer);
        assert!(!found.iter().any(|s| s.kind == plan.kind && s.surface == plan.replacement));
    }
}

#[test]
fn synthesis_is_reproducible() {
    let cfg = SynthConfig { clusters: 12, ..small_cfg(11) };
    let a = synthesize(&cfg, &embedder(), None).unwrap();
    let b = synthesize(&cfg, &embedder(), None).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        serde_json::to_string(&a.dataset.manifest).unwrap(),
        serde_json::to_string(&b.dataset.manifest).unwrap()
    );
    assert_eq!(a.dataset.plans_tsv(), b.dataset.plans_tsv());
}

#[test]
fn synth_config_keys_round_trip() {
    let mut cfg = SynthConfig::default();
    cfg.set("clusters", "42").unwrap();
    cfg.set("lat_range", "10,20").unwrap();
    let mut back = SynthConfig::default();
    for (k, v) in cfg.to_pairs() {
        back.set(k.strip_prefix("synth.").unwrap(), &v).unwrap();
    }
    assert_eq!(back, cfg);
    assert!(cfg.set("nope", "1").is_err());
    assert!(SynthConfig { non_location_jitter: 1e-3, ..cfg.clone() }.validate().is_err());
}

#[test]
fn non_location_jitter_is_bounded() {
    let cfg = SynthConfig {
        clusters: 12,
        non_location_jitter: 1e-5,
        ..small_cfg(12)
    };
    let corpus = generate_synthetic_corpus(&cfg, None).unwrap();
    let out = synthesize(&cfg, &embedder(), None).unwrap();
    let originals: BTreeMap<&str, &Package> = corpus.packages.iter().map(|p| (p.id.as_str(), p)).collect();
    for plan in out.dataset.plans.iter().filter(|p| p.kind != EntityKind::Location) {
        let before = originals[plan.target.as_str()].gps;
        let after = plan.gps.unwrap();
        assert!((after.lat - before.lat).abs() <= 1e-5 && (after.lon - before.lon).abs() <= 1e-5);
    }
}

#[test]
fn retrieval_on_generated_corpus_recovers_clusters() {
    let out = synthesize(&SynthConfig { clusters: 30, ..small_cfg(13) }, &embedder(), None).unwrap();
    let features = |p: &Package| crate::embed::featurize(p, &embedder(), &out.images).unwrap();
    let refs: Vec<_> = out
        .dataset
        .split(Split::Reference)
        .into_iter()
        .map(|p| crate::retrieval::ReferenceEntry {
            id: p.id.clone(),
            bundle: features(p),
            cluster_id: p.cluster_id,
        })
        .collect();
    let index = crate::retrieval::ReferenceIndex::build(refs).unwrap();
    let clean: Vec<&Package> = out
        .dataset
        .packages
        .iter()
        .filter(|p| p.split != Split::Reference && !p.is_manipulated())
        .collect();
    let hits = clean
        .iter()
        .filter(|p| index.entry(index.top1(&features(p), &Modality::ALL).unwrap()).cluster_id == p.cluster_id)
        .count();
    assert!(hits as f64 >= 0.95 * clean.len() as f64, "{hits}/{}", clean.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bucket_members_share_truncated_key(coords in prop::collection::vec((-89.99f64..89.99, -179.99f64..179.99), 1..40)) {
        let packages: Vec<Package> = coords.iter().enumerate().map(|(i, (a, b))| pkg(&format!("p{i}"), *a, *b)).collect();
        let buckets = bucket_by_gps(&packages).unwrap();
        let total: usize = buckets.iter().map(|b| b.members.len()).sum();
        prop_assert_eq!(total, packages.len());
        for b in &buckets {
            for m in &b.members {
                let p = packages.iter().find(|p| &p.id == m).unwrap();
                prop_assert_eq!(cell_key(p.gps), b.key);
                let (klat, klon) = b.key_degrees();
                prop_assert!((p.gps.lat - klat).abs() < 0.01 + 1e-9);
                prop_assert!((p.gps.lon - klon).abs() < 0.01 + 1e-9);
            }
        }
    }

    #[test]
    fn tagger_spans_are_disjoint_and_verbatim(words in prop::collection::vec(0usize..6, 0..30)) {
        let vocab = ["New", "York", "City", "at", "Ann", "Lee"];
        let tokens: Vec<String> = words.iter().map(|&i| vocab[i].to_string()).collect();
        let mut g = Gazetteer::new();
        g.insert("New York", EntityKind::Location);
        g.insert("New York City", EntityKind::Location);
        g.insert("York", EntityKind::Location);
        g.insert("Ann Lee", EntityKind::Person);
        g.insert("Lee", EntityKind::Person);
        let spans = tag_entities(&tokens, &g);
        let mut last_end = 0;
        for s in &spans {
            prop_assert!(s.start >= last_end && s.end > s.start && s.end <= tokens.len());
            prop_assert_eq!(&tokens[s.start..s.end].join(" "), &s.surface);
            prop_assert_eq!(g.get(&s.surface), Some(s.kind));
            last_end = s.end;
        }
    }

    #[test]
    fn allocation_never_manipulates_reference(sizes in prop::collection::vec(1usize..20, 1..30), seed in 0u64..1000) {
        let clusters: Vec<Cluster> = sizes.iter().enumerate().map(|(i, &n)| cluster(i as u32, n)).collect();
        let a = allocate_splits(&clusters, seed);
        prop_assert_eq!(a.splits.len(), sizes.iter().sum::<usize>());
        for t in &a.targets {
            prop_assert!(a.splits[t] != Split::Reference);
        }
        for c in &clusters {
            let refs = c.members.iter().filter(|m| a.splits[*m] == Split::Reference).count();
            let manip = c.members.iter().filter(|m| a.targets.contains(m)).count();
            let n = c.members.len();
            if n < 4 {
                prop_assert_eq!((refs, manip), (n, 0));
            } else {
                prop_assert_eq!(refs, n.div_ceil(2));
                prop_assert_eq!(manip, (n - n.div_ceil(2)) / 2);
            }
        }
    }
}
