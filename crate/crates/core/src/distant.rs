//! Gazetteer lookup producing distant BIO labels.

use std::collections::HashMap;

use crate::corpus::{Corpus, Document, LabelSet, Layer, Tag, TagSequence};
use crate::error::{Error, Result};

/// Lowercased multi-token surface forms mapped to entity type indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gazetteer {
    entries: HashMap<Vec<String>, usize>,
    max_len: usize,
}

impl Gazetteer {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn get(&self, surface: &[String]) -> Option<usize> {
        self.entries.get(surface).copied()
    }

    /// Inserts or replaces an entry. Returns `true` when the surface form was already present.
    pub fn insert(&mut self, surface: &str, type_index: usize) -> bool {
        let key = normalize(surface);
        assert!(!key.is_empty(), "empty surface form");
        self.max_len = self.max_len.max(key.len());
        self.entries.insert(key, type_index).is_some()
    }
}

fn normalize(surface: &str) -> Vec<String> {
    surface.split_whitespace().map(str::to_lowercase).collect()
}

/// Loaded gazetteer plus the number of surface forms that overrode an earlier line.
#[derive(Debug, Clone)]
pub struct LoadedGazetteer {
    pub gazetteer: Gazetteer,
    pub duplicates: usize,
}

/// Reads `surface form<TAB>TYPE` lines. Later duplicates win.
pub fn load_gazetteer(text: &str, labels: &LabelSet) -> Result<LoadedGazetteer> {
    let mut gazetteer = Gazetteer {
        entries: HashMap::new(),
        max_len: 0,
    };
    let mut duplicates = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (surface, ty) = line.rsplit_once('\t').ok_or_else(|| Error::Parse {
            line: line_no,
            message: "expected `surface<TAB>TYPE`".into(),
        })?;
        let ty = ty.trim();
        let type_index = labels.type_index(ty).ok_or_else(|| Error::UnknownType {
            line: line_no,
            entity_type: ty.to_string(),
        })?;
        if normalize(surface).is_empty() {
            return Err(Error::Parse {
                line: line_no,
                message: "empty surface form".into(),
            });
        }
        if gazetteer.insert(surface, type_index) {
            duplicates += 1;
        }
    }
    if gazetteer.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(LoadedGazetteer { gazetteer, duplicates })
}

/// Greedy leftmost-longest, case-insensitive match of the document against the gazetteer.
pub fn distant_label(doc: &Document, gaz: &Gazetteer) -> TagSequence {
    let lowered: Vec<String> = doc.tokens().iter().map(|t| t.to_lowercase()).collect();
    let n = lowered.len();
    let mut tags = Vec::with_capacity(n);
    let mut i = 0;
    while i < n {
        let longest = (1..=gaz.max_len.min(n - i))
            .rev()
            .find_map(|len| gaz.get(&lowered[i..i + len]).map(|ty| (len, ty)));
        match longest {
            Some((len, ty)) => {
                tags.push(Tag::Begin(ty).index());
                tags.extend(std::iter::repeat_n(Tag::Inside(ty).index(), len - 1));
                i += len;
            }
            None => {
                tags.push(Tag::Outside.index());
                i += 1;
            }
        }
    }
    TagSequence::new(tags)
}

/// Replaces the distant layer of `corpus` with gazetteer matches.
pub fn label_corpus(corpus: Corpus, gaz: &Gazetteer) -> Result<Corpus> {
    let tags = corpus.documents().iter().map(|d| distant_label(d, gaz)).collect();
    corpus.with_layer(Layer::Distant, tags)
}

/// Fraction of tokens carrying a non-`O` tag in `layer`.
pub fn coverage(corpus: &Corpus, layer: Layer) -> Result<f64> {
    let tags = corpus.layer(layer)?;
    let total = corpus.token_count();
    let tagged: usize = tags
        .iter()
        .map(|t| t.iter().filter(|&&x| x != Tag::Outside.index()).count())
        .sum();
    Ok(if total == 0 { 0.0 } else { tagged as f64 / total as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::repair_tags;
    use proptest::prelude::*;

    fn labels() -> LabelSet {
        LabelSet::new(["PER", "LOC", "ORG"]).unwrap()
    }

    fn names(doc: &Document, gaz: &Gazetteer) -> Vec<String> {
        let l = labels();
        distant_label(doc, gaz)
            .names(&l)
            .into_iter()
            .map(String::from)
            .collect()
    }

    #[test]
    fn load_examples() {
        let g = load_gazetteer("new york\tLOC\n", &labels()).unwrap();
        assert_eq!(g.gazetteer.len(), 1);
        assert_eq!(g.gazetteer.max_len(), 2);
        assert!(matches!(load_gazetteer("", &labels()), Err(Error::EmptyInput)));

        let g = load_gazetteer("paris\tLOC\nparis\tPER\n", &labels()).unwrap();
        assert_eq!(g.duplicates, 1);
        assert_eq!(g.gazetteer.get(&["paris".to_string()]), Some(0));

        match load_gazetteer("a\tLOC\nb\tFOO\n", &labels()) {
            Err(Error::UnknownType { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn longer_entry_can_shift_segmentation() {
        let doc = Document::new("d", vec!["a", "b", "c"]).unwrap();
        let mut g = load_gazetteer("b c\tLOC\n", &labels()).unwrap().gazetteer;
        assert_eq!(names(&doc, &g), ["O", "B-LOC", "I-LOC"]);
        g.insert("a b", 0);
        assert_eq!(names(&doc, &g), ["B-PER", "I-PER", "O"]);
    }

    #[test]
    fn longest_match() {
        let doc = Document::new("d", vec!["I", "love", "New", "York"]).unwrap();
        let g = load_gazetteer("new york\tLOC\n", &labels()).unwrap().gazetteer;
        assert_eq!(names(&doc, &g), ["O", "O", "B-LOC", "I-LOC"]);

        let g = load_gazetteer("new\tORG\nnew york\tLOC\n", &labels())
            .unwrap()
            .gazetteer;
        let doc = Document::new("d", vec!["New", "York"]).unwrap();
        assert_eq!(names(&doc, &g), ["B-LOC", "I-LOC"]);

        let g = load_gazetteer("berlin\tLOC\n", &labels()).unwrap().gazetteer;
        assert_eq!(names(&doc, &g), ["O", "O"]);
    }

    proptest! {
        #[test]
        fn output_is_bio_valid_and_monotone(
            tokens in prop::collection::vec(0u8..6, 1..15),
            entries in prop::collection::vec((prop::collection::vec(0u8..6, 1..3), 0usize..3), 1..6),
            extra in (0u8..8, 0usize..3),
        ) {
            let tok = |x: &u8| format!("w{x}");
            let doc = Document::new("d", tokens.iter().map(tok).collect()).unwrap();
            let mut gaz = Gazetteer { entries: HashMap::new(), max_len: 0 };
            for (surface, ty) in &entries {
                gaz.insert(&surface.iter().map(tok).collect::<Vec<_>>().join(" "), *ty);
            }
            let before = distant_label(&doc, &gaz);
            prop_assert_eq!(&repair_tags(&before), &before);
            prop_assert_eq!(&distant_label(&doc, &gaz), &before);

            // Multi-token additions can shift the leftmost-longest segmentation,
            // so monotonicity is checked for new single-token entries.
            let surface = tok(&extra.0);
            if gaz.get(&normalize(&surface)).is_none() {
                gaz.insert(&surface, extra.1);
                let after = distant_label(&doc, &gaz);
                for (b, a) in before.iter().zip(after.iter()) {
                    if *b != 0 { prop_assert!(*a != 0); }
                }
            }
        }
    }
}
