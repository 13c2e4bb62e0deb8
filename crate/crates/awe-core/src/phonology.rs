//! Phone inventories, feature tables, and edit distances over phone strings.
//!
//! The phonologically weighted Levenshtein distance (PWLD) replaces the unit
//! substitution cost of plain Levenshtein with a cost derived from the Hamming
//! distance between discrete phonological feature vectors, while insertions
//! and deletions cost a flat 0.5 — the maximum possible substitution cost
//! under the default (normalized) cost model.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhonologyError {
    #[error("phonology: feature table parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("phonology: duplicate phone symbol '{0}' in feature table")]
    DuplicateSymbol(String),
    #[error("phonology: feature table is degenerate (all rows identical)")]
    DegenerateTable,
    #[error("phonology: unknown phone '{0}'")]
    UnknownPhone(String),
    #[error("phonology: empty phone sequence")]
    EmptySequence,
    #[error("phonology: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, PhonologyError>;

/// One phone: its surface symbol and its row index in a [`FeatureTable`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Phone {
    pub symbol: String,
    pub index: usize,
}

/// Ternary feature values: `+` → 1, `-` → -1, `0` (unspecified) → 0.
/// An unspecified value is an ordinary value: two phones differ in a position
/// whenever their entries differ, with no wildcard semantics.
pub type FeatureValue = i8;

/// Discrete multi-valued phonological feature vectors keyed by phone symbol.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    feature_names: Vec<String>,
    symbols: Vec<String>,
    rows: Vec<Vec<FeatureValue>>,
    by_symbol: HashMap<String, usize>,
}

impl FeatureTable {
    /// Parse the tab-separated format: header `phone<TAB>f1<TAB>…<TAB>fF`,
    /// one row per phone with values in `{+,-,0}`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or(PhonologyError::Parse {
            line: 1,
            msg: "empty file".into(),
        })?;
        let mut cols = header.split('\t');
        match cols.next() {
            Some("phone") => {}
            _ => {
                return Err(PhonologyError::Parse {
                    line: 1,
                    msg: "header must start with 'phone'".into(),
                })
            }
        }
        let feature_names: Vec<String> = cols.map(str::to_owned).collect();
        if feature_names.is_empty() {
            return Err(PhonologyError::Parse {
                line: 1,
                msg: "header names no features".into(),
            });
        }
        let f = feature_names.len();

        let mut symbols = Vec::new();
        let mut rows: Vec<Vec<FeatureValue>> = Vec::new();
        let mut by_symbol = HashMap::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let lineno = i + 1;
            let mut fields = line.split('\t');
            let symbol = fields.next().unwrap_or("").trim();
            if symbol.is_empty() {
                return Err(PhonologyError::Parse {
                    line: lineno,
                    msg: "empty phone symbol".into(),
                });
            }
            let values: Vec<&str> = fields.collect();
            if values.len() != f {
                return Err(PhonologyError::Parse {
                    line: lineno,
                    msg: format!("expected {f} feature values, found {}", values.len()),
                });
            }
            let mut row = Vec::with_capacity(f);
            for v in values {
                row.push(match v.trim() {
                    "+" => 1,
                    "-" => -1,
                    "0" => 0,
                    other => {
                        return Err(PhonologyError::Parse {
                            line: lineno,
                            msg: format!("invalid feature value '{other}' (expected +, - or 0)"),
                        })
                    }
                });
            }
            if by_symbol.insert(symbol.to_owned(), rows.len()).is_some() {
                return Err(PhonologyError::DuplicateSymbol(symbol.to_owned()));
            }
            symbols.push(symbol.to_owned());
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(PhonologyError::Parse {
                line: 1,
                msg: "no phone rows".into(),
            });
        }
        if rows.len() > 1 && rows.iter().all(|r| r == &rows[0]) {
            return Err(PhonologyError::DegenerateTable);
        }
        Ok(Self {
            feature_names,
            symbols,
            rows,
            by_symbol,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PhonologyError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn n_phones(&self) -> usize {
        self.rows.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    /// All phone symbols in table order.
    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn contains(&self, symbol: &str) -> bool {
        self.by_symbol.contains_key(symbol)
    }

    pub fn phone(&self, symbol: &str) -> Result<Phone> {
        let &index = self
            .by_symbol
            .get(symbol)
            .ok_or_else(|| PhonologyError::UnknownPhone(symbol.to_owned()))?;
        Ok(Phone {
            symbol: symbol.to_owned(),
            index,
        })
    }

    pub fn features(&self, phone: &Phone) -> Result<&[FeatureValue]> {
        let row = self
            .rows
            .get(phone.index)
            .ok_or_else(|| PhonologyError::UnknownPhone(phone.symbol.clone()))?;
        if self.symbols[phone.index] != phone.symbol {
            return Err(PhonologyError::UnknownPhone(phone.symbol.clone()));
        }
        Ok(row)
    }

    /// Build a [`PhoneSequence`] from symbols, validating each against the table.
    pub fn sequence(&self, symbols: &[&str]) -> Result<PhoneSequence> {
        if symbols.is_empty() {
            return Err(PhonologyError::EmptySequence);
        }
        let phones = symbols
            .iter()
            .map(|s| self.phone(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(PhoneSequence { phones })
    }

    /// Like [`sequence`](Self::sequence) but over owned strings.
    pub fn sequence_owned(&self, symbols: &[String]) -> Result<PhoneSequence> {
        let refs: Vec<&str> = symbols.iter().map(String::as_str).collect();
        self.sequence(&refs)
    }
}

/// An ordered, nonempty phone string.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneSequence {
    phones: Vec<Phone>,
}

impl PhoneSequence {
    pub fn phones(&self) -> &[Phone] {
        &self.phones
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: N >= 1
    }
}

impl fmt::Display for PhoneSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let syms: Vec<&str> = self.phones.iter().map(|p| p.symbol.as_str()).collect();
        write!(f, "{}", syms.join(" "))
    }
}

/// Edit-cost parameters for PWLD.
#[derive(Debug, Clone, Copy)]
pub struct CostModel {
    pub indel_cost: f64,
    pub max_sub_cost: f64,
    /// When set, substitution cost is `max_sub_cost * hamming / F`, so the
    /// maximum possible substitution cost equals the indel cost under the
    /// defaults. When unset, the raw Hamming count is scaled by
    /// `max_sub_cost` alone.
    pub normalize_hamming: bool,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            indel_cost: 0.5,
            max_sub_cost: 0.5,
            normalize_hamming: true,
        }
    }
}

/// Hamming-based substitution cost between two phones.
///
/// Symmetric, zero iff the feature vectors are identical, and bounded by
/// `max_sub_cost` in normalized mode.
pub fn substitution_cost(
    a: &Phone,
    b: &Phone,
    table: &FeatureTable,
    cm: &CostModel,
) -> Result<f64> {
    let fa = table.features(a)?;
    let fb = table.features(b)?;
    let differing = fa.iter().zip(fb).filter(|(x, y)| x != y).count();
    let cost = if cm.normalize_hamming {
        cm.max_sub_cost * differing as f64 / table.n_features() as f64
    } else {
        cm.max_sub_cost * differing as f64
    };
    Ok(cost)
}

/// Plain unit-cost Levenshtein distance over phone symbols.
pub fn levenshtein(s1: &PhoneSequence, s2: &PhoneSequence) -> usize {
    let a = s1.phones();
    let b = s2.phones();
    let n = b.len();
    let mut prev: Vec<usize> = (0..=n).collect();
    let mut cur = vec![0usize; n + 1];
    for (i, pa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, pb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(pa.symbol != pb.symbol);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[n]
}

/// Phonologically weighted Levenshtein distance: minimum-cost alignment with
/// [`substitution_cost`] for substitutions and `cm.indel_cost` for
/// insertions and deletions.
pub fn pwld(
    s1: &PhoneSequence,
    s2: &PhoneSequence,
    table: &FeatureTable,
    cm: &CostModel,
) -> Result<f64> {
    let a = s1.phones();
    let b = s2.phones();
    // Validate all phones up front so errors do not depend on DP order.
    for p in a.iter().chain(b) {
        table.features(p)?;
    }
    let n = b.len();
    let mut prev: Vec<f64> = (0..=n).map(|j| j as f64 * cm.indel_cost).collect();
    let mut cur = vec![0.0f64; n + 1];
    for (i, pa) in a.iter().enumerate() {
        cur[0] = (i + 1) as f64 * cm.indel_cost;
        for (j, pb) in b.iter().enumerate() {
            let sub = prev[j] + substitution_cost(pa, pb, table, cm)?;
            let del = prev[j + 1] + cm.indel_cost;
            let ins = cur[j] + cm.indel_cost;
            cur[j + 1] = sub.min(del).min(ins);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[n])
}

/// PWLD divided by the longer sequence length. Provided for analysis only;
/// ranking and correlation always use the raw alignment cost.
pub fn pwld_normalized(
    s1: &PhoneSequence,
    s2: &PhoneSequence,
    table: &FeatureTable,
    cm: &CostModel,
) -> Result<f64> {
    let raw = pwld(s1, s2, table, cm)?;
    Ok(raw / s1.len().max(s2.len()) as f64)
}

/// Full pairwise PWLD matrix: `M[i][j] = pwld(w_i, w_j)`, symmetric with a
/// zero diagonal. With `threads > 1` rows are partitioned across workers;
/// each cell is a pure function of its pair, so the result is bit-identical
/// to sequential execution.
pub fn pwld_matrix(
    words: &[PhoneSequence],
    table: &FeatureTable,
    cm: &CostModel,
    threads: usize,
) -> Result<Vec<Vec<f64>>> {
    let k = words.len();
    if k == 0 {
        return Err(PhonologyError::EmptySequence);
    }
    let compute_row = |i: usize| -> Result<Vec<f64>> {
        let mut row = vec![0.0; k];
        for j in 0..k {
            if j != i {
                row[j] = pwld(&words[i], &words[j], table, cm)?;
            }
        }
        Ok(row)
    };
    if threads <= 1 {
        let mut m = Vec::with_capacity(k);
        for i in 0..k {
            m.push(compute_row(i)?);
        }
        return Ok(m);
    }
    let mut rows: Vec<Result<Vec<f64>>> = Vec::with_capacity(k);
    for _ in 0..k {
        rows.push(Ok(Vec::new()));
    }
    let chunk = k.div_ceil(threads);
    std::thread::scope(|scope| {
        for (t, out_chunk) in rows.chunks_mut(chunk).enumerate() {
            let compute_row = &compute_row;
            scope.spawn(move || {
                for (off, slot) in out_chunk.iter_mut().enumerate() {
                    *slot = compute_row(t * chunk + off);
                }
            });
        }
    });
    rows.into_iter().collect()
}

/// Feature table bundled with the crate: a German-flavored inventory of 43
/// phones over 24 PHOIBLE-style articulatory features.
pub const BUNDLED_FEATURES: &str = include_str!("../data/features.tsv");

pub fn bundled_feature_table() -> FeatureTable {
    FeatureTable::parse(BUNDLED_FEATURES).expect("bundled feature table is valid")
}

/// SHA-256 of the bundled feature table bytes, hex-encoded.
pub fn bundled_table_checksum() -> String {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(BUNDLED_FEATURES.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_table() -> FeatureTable {
        FeatureTable::parse(
            "phone\tf1\tf2\tf3\tf4\nz\t+\t+\t-\t0\nb\t+\t-\t-\t+\nc\t-\t-\t-\t-\n",
        )
        .unwrap()
    }

    #[test]
    fn parse_builds_table() {
        let t = toy_table();
        assert_eq!(t.n_features(), 4);
        assert_eq!(t.n_phones(), 3);
        assert!(t.contains("z"));
    }

    #[test]
    fn parse_rejects_empty_file() {
        assert!(matches!(
            FeatureTable::parse(""),
            Err(PhonologyError::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn parse_rejects_short_row_with_line_number() {
        let err = FeatureTable::parse("phone\tf1\tf2\na\t+\n").unwrap_err();
        match err {
            PhonologyError::Parse { line, msg } => {
                assert_eq!(line, 2);
                assert!(msg.contains("expected 2"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_duplicate_symbol() {
        let err = FeatureTable::parse("phone\tf1\na\t+\na\t-\n").unwrap_err();
        assert!(matches!(err, PhonologyError::DuplicateSymbol(s) if s == "a"));
    }

    #[test]
    fn parse_rejects_degenerate_table() {
        let err = FeatureTable::parse("phone\tf1\tf2\na\t+\t-\nb\t+\t-\n").unwrap_err();
        assert!(matches!(err, PhonologyError::DegenerateTable));
    }

    #[test]
    fn substitution_cost_identity_and_worked_example() {
        let t = toy_table();
        let cm = CostModel::default();
        let z = t.phone("z").unwrap();
        let b = t.phone("b").unwrap();
        assert_eq!(substitution_cost(&z, &z, &t, &cm).unwrap(), 0.0);
        // (+,+,-,0) vs (+,-,-,+): 2 of 4 positions differ.
        let c = substitution_cost(&z, &b, &t, &cm).unwrap();
        assert!((c - 0.25).abs() < 1e-12);
        // Symmetry.
        assert_eq!(c, substitution_cost(&b, &z, &t, &cm).unwrap());
    }

    #[test]
    fn substitution_cost_maximum_equals_indel() {
        let t = FeatureTable::parse("phone\tf1\tf2\na\t+\t+\nb\t-\t-\n").unwrap();
        let cm = CostModel::default();
        let a = t.phone("a").unwrap();
        let b = t.phone("b").unwrap();
        let c = substitution_cost(&a, &b, &t, &cm).unwrap();
        assert_eq!(c, cm.indel_cost);
    }

    #[test]
    fn unknown_phone_is_reported_by_symbol() {
        let t = toy_table();
        let err = t.phone("q").unwrap_err();
        assert!(matches!(err, PhonologyError::UnknownPhone(s) if s == "q"));
    }

    #[test]
    fn levenshtein_table1_pairs() {
        let t = bundled_feature_table();
        let sicher = t.sequence(&["z", "ɪ", "ç", "ɐ"]).unwrap();
        let becher = t.sequence(&["b", "ɛ", "ç", "ɐ"]).unwrap();
        let fischer = t.sequence(&["f", "ɪ", "ʃ", "ɐ"]).unwrap();
        let lichter = t.sequence(&["l", "ɪ", "ç", "t", "ɐ"]).unwrap();
        let sitzt = t.sequence(&["z", "ɪ", "ts", "t"]).unwrap();
        assert_eq!(levenshtein(&sicher, &becher), 2);
        assert_eq!(levenshtein(&sicher, &fischer), 2);
        assert_eq!(levenshtein(&sicher, &lichter), 2);
        assert_eq!(levenshtein(&sicher, &sitzt), 2);
        assert_eq!(levenshtein(&sicher, &sicher), 0);
    }

    #[test]
    fn pwld_table1_ordering() {
        let t = bundled_feature_table();
        let cm = CostModel::default();
        let sicher = t.sequence(&["z", "ɪ", "ç", "ɐ"]).unwrap();
        let becher = t.sequence(&["b", "ɛ", "ç", "ɐ"]).unwrap();
        let fischer = t.sequence(&["f", "ɪ", "ʃ", "ɐ"]).unwrap();
        let lichter = t.sequence(&["l", "ɪ", "ç", "t", "ɐ"]).unwrap();
        let sitzt = t.sequence(&["z", "ɪ", "ts", "t"]).unwrap();
        let d_becher = pwld(&sicher, &becher, &t, &cm).unwrap();
        let d_fischer = pwld(&sicher, &fischer, &t, &cm).unwrap();
        let d_lichter = pwld(&sicher, &lichter, &t, &cm).unwrap();
        let d_sitzt = pwld(&sicher, &sitzt, &t, &cm).unwrap();
        assert!(
            d_becher < d_fischer && d_fischer < d_lichter && d_lichter < d_sitzt,
            "ordering violated: {d_becher} {d_fischer} {d_lichter} {d_sitzt}"
        );
        assert_eq!(pwld(&sicher, &sicher, &t, &cm).unwrap(), 0.0);
    }

    #[test]
    fn pwld_matrix_matches_pairwise_and_parallel() {
        let t = bundled_feature_table();
        let cm = CostModel::default();
        let words = vec![
            t.sequence(&["z", "ɪ", "ç", "ɐ"]).unwrap(),
            t.sequence(&["b", "ɛ", "ç", "ɐ"]).unwrap(),
            t.sequence(&["l", "ɪ", "ç", "t", "ɐ"]).unwrap(),
        ];
        let m = pwld_matrix(&words, &t, &cm, 1).unwrap();
        for i in 0..3 {
            assert_eq!(m[i][i], 0.0);
            for j in 0..3 {
                assert_eq!(m[i][j], m[j][i]);
                assert_eq!(m[i][j], pwld(&words[i], &words[j], &t, &cm).unwrap());
            }
        }
        let m2 = pwld_matrix(&words, &t, &cm, 3).unwrap();
        assert_eq!(m, m2);
    }

    #[test]
    fn pwld_matrix_degenerate_sizes() {
        let t = bundled_feature_table();
        let cm = CostModel::default();
        let w = t.sequence(&["a"]).unwrap();
        let m = pwld_matrix(std::slice::from_ref(&w), &t, &cm, 1).unwrap();
        assert_eq!(m, vec![vec![0.0]]);
        let m2 = pwld_matrix(&[w.clone(), w], &t, &cm, 1).unwrap();
        assert_eq!(m2, vec![vec![0.0, 0.0], vec![0.0, 0.0]]);
    }

    #[test]
    fn bundled_table_shape() {
        let t = bundled_feature_table();
        assert_eq!(t.n_features(), 24);
        assert!(t.n_phones() >= 40);
        assert_eq!(bundled_table_checksum().len(), 64);
    }
}
