//! Phone n-gram inventories and multi-hot target vectors.
//!
//! Sequences are padded with a single `#` boundary marker on each side before
//! n-grams are taken, so a word like /k ɪ ʁ ç ə/ yields the bigrams
//! {#k, kɪ, ɪʁ, ʁç, çə, ə#}.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::CorpusError;

pub const BOUNDARY: &str = "#";

/// Ordered set of phone n-grams used as detection targets. Entries are
/// sorted lexicographically for stable output-unit indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramInventory {
    orders: Vec<usize>,
    grams: Vec<String>,
    index: HashMap<String, usize>,
}

fn padded(phones: &[String]) -> Vec<&str> {
    let mut seq = Vec::with_capacity(phones.len() + 2);
    seq.push(BOUNDARY);
    seq.extend(phones.iter().map(String::as_str));
    seq.push(BOUNDARY);
    seq
}

/// All order-`n` grams of a boundary-padded phone sequence, joined by spaces.
pub fn ngrams_of(phones: &[String], order: usize) -> Vec<String> {
    let seq = padded(phones);
    if order == 0 || order > seq.len() {
        return Vec::new();
    }
    seq.windows(order).map(|w| w.join(" ")).collect()
}

/// Union of n-grams over a vocabulary of word types.
pub fn ngram_inventory(
    vocabulary: &BTreeMap<String, Vec<String>>,
    orders: &[usize],
) -> Result<NgramInventory, CorpusError> {
    if orders.is_empty() {
        return Err(CorpusError::Config("n-gram orders must be nonempty".into()));
    }
    let mut set = BTreeSet::new();
    for phones in vocabulary.values() {
        for &order in orders {
            set.extend(ngrams_of(phones, order));
        }
    }
    let grams: Vec<String> = set.into_iter().collect();
    let index = grams
        .iter()
        .enumerate()
        .map(|(i, g)| (g.clone(), i))
        .collect();
    Ok(NgramInventory {
        orders: orders.to_vec(),
        grams,
        index,
    })
}

impl NgramInventory {
    pub fn len(&self) -> usize {
        self.grams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grams.is_empty()
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn grams(&self) -> &[String] {
        &self.grams
    }

    pub fn position(&self, gram: &str) -> Option<usize> {
        self.index.get(gram).copied()
    }

    /// Multi-hot target: `y[i] = 1` iff gram `i` occurs in the padded phone
    /// sequence (presence, not count). In strict mode a gram absent from the
    /// inventory is an error; lenient mode ignores it.
    pub fn targets(&self, phones: &[String], strict: bool) -> Result<Vec<f32>, CorpusError> {
        let mut y = vec![0.0f32; self.grams.len()];
        for &order in &self.orders {
            for gram in ngrams_of(phones, order) {
                match self.index.get(&gram) {
                    Some(&i) => y[i] = 1.0,
                    None if strict => {
                        return Err(CorpusError::UnknownNgram(gram));
                    }
                    None => {}
                }
            }
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strs(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn kirche_bigrams_match_worked_example() {
        let phones = strs(&["k", "I", "K", "ç", "@"]);
        let grams = ngrams_of(&phones, 2);
        assert_eq!(
            grams,
            vec!["# k", "k I", "I K", "K ç", "ç @", "@ #"]
        );
    }

    #[test]
    fn kirche_trigrams_match_worked_example() {
        let phones = strs(&["k", "I", "K", "ç", "@"]);
        let grams = ngrams_of(&phones, 3);
        assert_eq!(
            grams,
            vec!["# k I", "k I K", "I K ç", "K ç @", "ç @ #"]
        );
    }

    #[test]
    fn single_phone_word_keeps_boundary_bigrams() {
        let grams = ngrams_of(&strs(&["a"]), 2);
        assert_eq!(grams, vec!["# a", "a #"]);
    }

    #[test]
    fn inventory_is_sorted_and_bounded() {
        let mut vocab = BTreeMap::new();
        vocab.insert("w1".to_string(), strs(&["a", "b"]));
        vocab.insert("w2".to_string(), strs(&["b", "a"]));
        let inv = ngram_inventory(&vocab, &[2]).unwrap();
        let mut sorted = inv.grams().to_vec();
        sorted.sort();
        assert_eq!(inv.grams(), sorted.as_slice());
        // Size bound: sum over words of (len + 1).
        assert!(inv.len() <= 2 * 3);
        // Every gram occurs in at least one word.
        for gram in inv.grams() {
            let hit = vocab
                .values()
                .any(|p| ngrams_of(p, 2).contains(gram));
            assert!(hit, "gram {gram} in no word");
        }
    }

    #[test]
    fn targets_mark_presence_not_count() {
        let mut vocab = BTreeMap::new();
        vocab.insert("w".to_string(), strs(&["a", "b", "a", "b"]));
        let inv = ngram_inventory(&vocab, &[2]).unwrap();
        let y = inv.targets(&strs(&["a", "b", "a", "b"]), true).unwrap();
        // "a b" occurs twice but the target stays 1.
        let i = inv.position("a b").unwrap();
        assert_eq!(y[i], 1.0);
        assert!(y.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn first_two_entries_give_leading_ones() {
        let mut vocab = BTreeMap::new();
        vocab.insert("w".to_string(), strs(&["a"]));
        vocab.insert("v".to_string(), strs(&["z", "q"]));
        let inv = ngram_inventory(&vocab, &[2]).unwrap();
        let y = inv.targets(&strs(&["a"]), true).unwrap();
        let ones: Vec<usize> = y
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(ones.len(), 2);
        assert_eq!(inv.grams()[ones[0]], "# a");
        assert_eq!(inv.grams()[ones[1]], "a #");
    }

    #[test]
    fn strict_mode_rejects_unknown_grams() {
        let mut vocab = BTreeMap::new();
        vocab.insert("w".to_string(), strs(&["a", "b"]));
        let inv = ngram_inventory(&vocab, &[2]).unwrap();
        let err = inv.targets(&strs(&["x", "y"]), true).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownNgram(_)));
        // Lenient mode ignores unseen grams.
        let y = inv.targets(&strs(&["x", "y"]), false).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
