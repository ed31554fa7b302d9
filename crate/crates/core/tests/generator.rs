use regnn::hgraph::{generate_synthetic, HeteroGraph, SyntheticRelation, SyntheticSpec, SyntheticType};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// `(receiver, sender)` global index pairs of relation `name`.
fn edges(g: &HeteroGraph, name: &str) -> Vec<(usize, usize)> {
    let r = g.relations().iter().find(|r| r.name == name).unwrap();
    let mut out = Vec::new();
    for row in 0..r.edges.rows() {
        for &col in r.edges.row(row).0 {
            out.push((row, col));
        }
    }
    out
}

/// Pearson independence test on the class-by-class edge counts.
fn independence_p_value(table: [[f64; 2]; 2]) -> f64 {
    let total: f64 = table.iter().flatten().sum();
    let rows = [table[0][0] + table[0][1], table[1][0] + table[1][1]];
    let cols = [table[0][0] + table[1][0], table[0][1] + table[1][1]];
    let mut stat = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let expected = rows[i] * cols[j] / total;
            stat += (table[i][j] - expected).powi(2) / expected;
        }
    }
    1.0 - ChiSquared::new(1.0).unwrap().cdf(stat)
}

#[test]
fn half_homophily_relation_is_independent_of_labels() {
    let spec = SyntheticSpec::skewed_homophily();
    for seed in [0, 1, 2] {
        let g = generate_synthetic(&spec, seed).unwrap();
        let labels = g.labels().unwrap();
        let mut table = [[0.0; 2]; 2];
        for (v, u) in edges(&g, "P-P") {
            table[labels[v]][labels[u]] += 1.0;
        }
        let p = independence_p_value(table);
        assert!(p > 0.01, "seed {seed}: p = {p}, table {table:?}");
    }
}

#[test]
fn independence_test_detects_homophily() {
    // same spec with the paper-to-paper relation made homophilous
    let mut spec = SyntheticSpec::skewed_homophily();
    spec.relations[2].homophily = 0.6;
    let g = generate_synthetic(&spec, 0).unwrap();
    let labels = g.labels().unwrap();
    let mut table = [[0.0; 2]; 2];
    for (v, u) in edges(&g, "P-P") {
        table[labels[v]][labels[u]] += 1.0;
    }
    assert!(independence_p_value(table) < 1e-6);
}

/// Fraction of target nodes whose label is the majority label among the
/// its `neighbours` (ties and self-references skipped).
fn majority_probe(g: &HeteroGraph, neighbours: &[Vec<usize>]) -> f64 {
    let labels = g.labels().unwrap();
    let mut hits = 0;
    let mut counted = 0;
    for (v, ns) in neighbours.iter().enumerate() {
        let mut hist = [0usize; 2];
        for &u in ns {
            if u != v {
                hist[labels[u]] += 1;
            }
        }
        if hist[0] == hist[1] {
            continue;
        }
        counted += 1;
        if (hist[1] > hist[0]) as usize == labels[v] {
            hits += 1;
        }
    }
    hits as f64 / counted as f64
}

#[test]
fn homophilous_relation_predicts_labels_and_noise_does_not() {
    let g = generate_synthetic(&SyntheticSpec::skewed_homophily(), 0).unwrap();
    let p = g.node_count(0);

    // P <- A -> P: papers sharing an author
    let mut by_author: Vec<Vec<usize>> = vec![Vec::new(); g.num_nodes()];
    for (v, u) in edges(&g, "A-P") {
        by_author[u].push(v);
    }
    let mut via_author = vec![Vec::new(); p];
    for papers in &by_author {
        for &a in papers {
            via_author[a].extend(papers.iter().copied());
        }
    }
    let mut via_citation = vec![Vec::new(); p];
    for (v, u) in edges(&g, "P-P") {
        via_citation[v].push(u);
    }

    let informative = majority_probe(&g, &via_author);
    let noise = majority_probe(&g, &via_citation);
    assert!(informative > 0.85, "{informative}");
    assert!((noise - 0.5).abs() < 0.06, "{noise}");
}

#[test]
fn classes_are_balanced_and_counts_respected() {
    let spec = SyntheticSpec {
        node_types: vec![
            SyntheticType { name: "X".into(), count: 31, features: true, separation: None },
            SyntheticType { name: "Y".into(), count: 7, features: false, separation: None },
        ],
        target_type: "X".into(),
        num_classes: 3,
        relations: vec![SyntheticRelation {
            name: "Y-X".into(),
            src: "Y".into(),
            dst: "X".into(),
            num_edges: 50,
            homophily: 0.7,
        }],
        feature_dim: 4,
        separation: 2.0,
        noise: 0.1,
        seed: 0,
    };
    let g = generate_synthetic(&spec, 5).unwrap();
    let mut counts = [0; 3];
    for &l in g.labels().unwrap() {
        counts[l] += 1;
    }
    assert_eq!(counts, [11, 10, 10]);
    assert_eq!(edges(&g, "Y-X").len(), 50);
    assert!(g.has_generated_features(1));
    assert_eq!(g.features(0).cols(), 4);

    let mut too_many = spec.clone();
    too_many.relations[0].num_edges = 31 * 7 + 1;
    assert!(generate_synthetic(&too_many, 5).is_err());
}
