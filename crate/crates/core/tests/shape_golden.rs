use densepoint::networks::{build_classification, build_normal_estimation, build_segmentation, Connectivity, Network};

// Golden rows are "layer, setting, output" with K standing for the class count.
fn check(net: &Network, golden: &str, classes: usize) {
    let want: Vec<String> = golden.lines().skip(1).map(|l| l.replace('K', &classes.to_string())).collect();
    let got: Vec<String> = net
        .shape_table()
        .unwrap()
        .iter()
        .map(|r| format!("{}\t{}\t{}", r.kind, r.setting, r.shape()))
        .collect();
    for (i, (g, w)) in got.iter().zip(&want).enumerate() {
        assert_eq!(g, w, "row {}", i + 1);
    }
    assert_eq!(got.len(), want.len());
}

#[test]
fn classification_table() {
    let net = build_classification(24, 2, 40, Connectivity::Dense, 0).unwrap();
    check(&net, include_str!("golden/classification.tsv"), 40);
    let net = build_classification(24, 2, 10, Connectivity::Dense, 0).unwrap();
    check(&net, include_str!("golden/classification.tsv"), 10);
}

#[test]
fn segmentation_table() {
    let net = build_segmentation(24, 2, 50, 16, 0).unwrap();
    check(&net, include_str!("golden/segmentation.tsv"), 50);
}

#[test]
fn normal_table() {
    let net = build_normal_estimation(24, 2, 40, 0).unwrap();
    check(&net, include_str!("golden/normal.tsv"), 3);
}

#[test]
fn stage_outputs_follow_the_growth_law() {
    let net = build_segmentation(24, 2, 50, 16, 0).unwrap();
    let outs: Vec<String> = net
        .shape_table()
        .unwrap()
        .iter()
        .filter(|r| r.kind == "output")
        .map(|r| r.shape())
        .collect();
    assert_eq!(outs, ["(224, 256)", "(336, 64)", "(432, 16)"]);
}
