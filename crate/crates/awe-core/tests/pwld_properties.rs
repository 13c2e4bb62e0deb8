//! PWLD against an exhaustive alignment oracle, plus its metric properties.

use awe_core::phonology::{
    bundled_feature_table, levenshtein, pwld, substitution_cost, CostModel, FeatureTable, Phone,
    PhoneSequence,
};
use awe_core::rng::SeededRng;
use proptest::prelude::*;

/// Minimum cost over every edit script, enumerated recursively with no
/// memoization; independent of the DP implementation.
fn brute_force_pwld(
    a: &[Phone],
    b: &[Phone],
    table: &FeatureTable,
    cm: &CostModel,
) -> f64 {
    if a.is_empty() {
        return b.len() as f64 * cm.indel_cost;
    }
    if b.is_empty() {
        return a.len() as f64 * cm.indel_cost;
    }
    let sub = substitution_cost(&a[0], &b[0], table, cm).unwrap()
        + brute_force_pwld(&a[1..], &b[1..], table, cm);
    let del = cm.indel_cost + brute_force_pwld(&a[1..], b, table, cm);
    let ins = cm.indel_cost + brute_force_pwld(a, &b[1..], table, cm);
    sub.min(del).min(ins)
}

fn random_sequence(table: &FeatureTable, len: usize, rng: &mut SeededRng) -> PhoneSequence {
    let symbols = table.symbols();
    let chosen: Vec<&str> = (0..len)
        .map(|_| symbols[rng.below(symbols.len())].as_str())
        .collect();
    table.sequence(&chosen).unwrap()
}

#[test]
fn dp_matches_exhaustive_enumeration_on_500_short_pairs() {
    let table = bundled_feature_table();
    let cm = CostModel::default();
    let mut rng = SeededRng::new(20240501);
    for _ in 0..500 {
        let la = rng.range_inclusive(1, 4);
        let lb = rng.range_inclusive(1, 4);
        let s1 = random_sequence(&table, la, &mut rng);
        let s2 = random_sequence(&table, lb, &mut rng);
        let got = pwld(&s1, &s2, &table, &cm).unwrap();
        let want = brute_force_pwld(s1.phones(), s2.phones(), &table, &cm);
        assert!(
            (got - want).abs() < 1e-12,
            "{s1} vs {s2}: dp {got}, oracle {want}"
        );
    }
}

/// Strategy: random phone index sequences over the bundled inventory.
fn phone_seq_strategy(max_len: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..bundled_feature_table().n_phones(), 1..=max_len)
}

fn to_seq(table: &FeatureTable, indices: &[usize]) -> PhoneSequence {
    let symbols = table.symbols();
    let chosen: Vec<&str> = indices.iter().map(|&i| symbols[i].as_str()).collect();
    table.sequence(&chosen).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn identity_symmetry_bound(a in phone_seq_strategy(6), b in phone_seq_strategy(6)) {
        let table = bundled_feature_table();
        let cm = CostModel::default();
        let s1 = to_seq(&table, &a);
        let s2 = to_seq(&table, &b);
        let d12 = pwld(&s1, &s2, &table, &cm).unwrap();
        let d21 = pwld(&s2, &s1, &table, &cm).unwrap();
        prop_assert_eq!(pwld(&s1, &s1, &table, &cm).unwrap(), 0.0);
        prop_assert!((d12 - d21).abs() < 1e-12);
        prop_assert!(d12 <= cm.indel_cost * (s1.len() + s2.len()) as f64 + 1e-12);
        prop_assert!(d12 >= 0.0);
        // PWLD never exceeds indel_cost * plain Levenshtein.
        let ld = levenshtein(&s1, &s2) as f64;
        prop_assert!(d12 <= cm.indel_cost * ld + 1e-12);
    }

    #[test]
    fn triangle_inequality(
        a in phone_seq_strategy(5),
        b in phone_seq_strategy(5),
        c in phone_seq_strategy(5),
    ) {
        let table = bundled_feature_table();
        let cm = CostModel::default();
        let sa = to_seq(&table, &a);
        let sb = to_seq(&table, &b);
        let sc = to_seq(&table, &c);
        let ab = pwld(&sa, &sb, &table, &cm).unwrap();
        let bc = pwld(&sb, &sc, &table, &cm).unwrap();
        let ac = pwld(&sa, &sc, &table, &cm).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9, "{ac} > {ab} + {bc}");
    }
}

/// A table whose rows differ in every position: each phone's vector is a
/// constant row of its own index, so every substitution costs the full
/// indel price.
fn all_distinct_table(n_phones: usize, n_features: usize) -> FeatureTable {
    // Feature values cycle through {+,-,0} per phone; rows are constant, so
    // any two distinct phones differ in all positions.
    let mut text = String::from("phone");
    for f in 0..n_features {
        text.push_str(&format!("\tf{f}"));
    }
    text.push('\n');
    let vals = ["+", "-", "0"];
    for p in 0..n_phones.min(3) {
        text.push_str(&format!("p{p}"));
        for _ in 0..n_features {
            text.push_str(&format!("\t{}", vals[p % 3]));
        }
        text.push('\n');
    }
    FeatureTable::parse(&text).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn refinement_on_all_distinct_vectors(
        a in prop::collection::vec(0usize..3, 1..=6),
        b in prop::collection::vec(0usize..3, 1..=6),
    ) {
        let table = all_distinct_table(3, 4);
        let cm = CostModel::default();
        let symbols = table.symbols();
        let sa = table
            .sequence(&a.iter().map(|&i| symbols[i].as_str()).collect::<Vec<_>>())
            .unwrap();
        let sb = table
            .sequence(&b.iter().map(|&i| symbols[i].as_str()).collect::<Vec<_>>())
            .unwrap();
        let d = pwld(&sa, &sb, &table, &cm).unwrap();
        let ld = levenshtein(&sa, &sb) as f64;
        // With all substitution costs equal to the indel cost, PWLD
        // collapses to indel_cost * LD.
        prop_assert!((d - cm.indel_cost * ld).abs() < 1e-12, "{d} vs 0.5 * {ld}");
    }
}
