//! Hand-derived values. Expected numbers were computed outside this crate
//! (by hand or with a few lines of Python) and are frozen here.

use hierssl::losses::{
    cross_entropy, distill_loss, fixmatch_loss, hier_loss, infonce_loss, level_cross_entropy, pseudo_label_loss, softmax,
    HierLossSpec,
};
use hierssl::synthdata::semi_inat_taxonomy;
use hierssl::Taxonomy;

fn toy() -> Taxonomy {
    Taxonomy::from_text("Kingdom,Phylum,Species\nK,P1,S1\nK,P1,S2\nK,P2,S3\nK,P2,S4\n", "toy").unwrap()
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn toy_counts_parents_ancestor() {
    let t = toy();
    assert_eq!(t.class_counts(), vec![1, 2, 4]);
    assert_eq!(t.parents(2).unwrap(), &[0, 0, 1, 1]);
    let s3 = t.class_index(2, "S3").unwrap();
    let a = t.ancestor(s3, 1).unwrap();
    assert_eq!(t.class_name(1, a).unwrap(), "P2");
}

#[test]
fn toy_composition_entrywise() {
    let t = toy();
    let w31 = t.marginalization_matrix(2, 0).unwrap().to_dense();
    let w32 = t.marginalization_matrix(2, 1).unwrap().to_dense();
    let w21 = t.marginalization_matrix(1, 0).unwrap().to_dense();
    assert_eq!(w32, vec![vec![1, 0], vec![1, 0], vec![0, 1], vec![0, 1]]);
    assert_eq!(w31, vec![vec![1]; 4]);
    for (i, row) in w32.iter().enumerate() {
        let prod: u8 = row.iter().zip(&w21).map(|(a, r)| a * r[0]).sum();
        assert_eq!(prod, w31[i][0]);
    }
}

#[test]
fn semi_inat_level_counts() {
    let t = semi_inat_taxonomy();
    assert_eq!(t.class_counts(), vec![3, 8, 29, 123, 339, 729, 810]);
    assert_eq!(t.class_counts().iter().sum::<usize>(), 2041);
}

#[test]
fn marginal_coarse_term_is_minus_log_mass() {
    let t = toy();
    let spec = HierLossSpec::species(&t, 1).unwrap();
    let q = vec![vec![0.1, 0.2, 0.3, 0.4]];
    let loss = hier_loss(&q, &[3], &q, &[0], &spec).unwrap();
    // -ln(0.1 + 0.2) and -ln(0.4)
    assert!(close(loss.coarse.value, 1.2039728043259361, 1e-15));
    assert!(close(loss.labeled.value, 0.916290731874155, 1e-15));
}

#[test]
fn species_level_term_is_plain_ce_bitwise() {
    let t = toy();
    let spec = HierLossSpec::species(&t, 2).unwrap();
    let q = vec![vec![0.1, 0.2, 0.3, 0.4], vec![0.25, 0.25, 0.4, 0.1]];
    let out = level_cross_entropy(&q, &[1, 2], spec.coarse_map()).unwrap();
    let plain = (cross_entropy(&q[0], 1) + cross_entropy(&q[1], 2)) * 0.5;
    assert_eq!(out.value.to_bits(), plain.to_bits());
}

#[test]
fn pseudo_label_confident_sample() {
    let out = pseudo_label_loss(&[vec![0.9, 0.1]], 0.8);
    assert!(close(out.value, 0.10536051565782628, 1e-15));
    let out = pseudo_label_loss(&[vec![0.7, 0.3]], 0.8);
    assert_eq!(out.value, 0.0);
}

#[test]
fn fixmatch_identical_views_is_min_entropy() {
    let t = toy();
    let spec = HierLossSpec::species(&t, 1).unwrap();
    let q = vec![vec![0.85, 0.05, 0.05, 0.05]];
    let out = fixmatch_loss(&q, &[0], &q, &q, &[0], &spec, 0.8).unwrap();
    assert!(close(out.consistency.value, -(0.85f64).ln(), 1e-15));
}

#[test]
fn distillation_two_logit_example() {
    let out = distill_loss(&[vec![2.0, 0.0]], &[vec![0.0, 2.0]], 1.0).unwrap();
    assert!(close(out.value, 1.8885221669987375, 1e-12), "{}", out.value);
    // identical logits: CE equals the teacher entropy, KL is zero
    let same = distill_loss(&[vec![2.0, 0.0]], &[vec![2.0, 0.0]], 1.0).unwrap();
    assert!(close(same.kl, 0.0, 1e-15));
}

#[test]
fn infonce_aligned_query_is_near_zero() {
    let q = vec![1.0, 0.0];
    let negatives = vec![vec![-1.0, 0.0]; 16];
    let out = infonce_loss(&q, &q, &negatives, 0.07).unwrap();
    // ln(1 + 16 exp(-2/0.07))
    assert!(close(out.value, 6.247447004151165e-12, 1e-13), "{}", out.value);
}

#[test]
fn softmax_survives_large_logits() {
    let p = softmax(&[1000.0, 0.0]);
    assert_eq!(p, vec![1.0, 0.0]);
}
