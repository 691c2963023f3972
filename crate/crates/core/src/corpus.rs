//! Tokenized documents, BIO tag algebra and CoNLL two-column I/O.
//!
//! Tags are stored as indices into a [`LabelSet`]. The layout is fixed:
//! index 0 is `O`, and entity type `i` owns `B-i = 1 + 2i` and `I-i = 2 + 2i`.
//! Because the layout is structural, BIO repair and span decoding only need
//! the indices themselves.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use crate::error::{Error, Result};

pub const DOCSTART: &str = "-DOCSTART-";

/// Index of the `O` tag in every label set.
pub const OUTSIDE: usize = 0;

/// Decoded view of a tag index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl Tag {
    pub fn from_index(index: usize) -> Self {
        if index == OUTSIDE {
            Tag::Outside
        } else if (index - 1).is_multiple_of(2) {
            Tag::Begin((index - 1) / 2)
        } else {
            Tag::Inside((index - 1) / 2)
        }
    }

    pub fn index(self) -> usize {
        match self {
            Tag::Outside => OUTSIDE,
            Tag::Begin(t) => 1 + 2 * t,
            Tag::Inside(t) => 2 + 2 * t,
        }
    }

    pub fn entity_type(self) -> Option<usize> {
        match self {
            Tag::Outside => None,
            Tag::Begin(t) | Tag::Inside(t) => Some(t),
        }
    }
}

/// Entity types plus the derived BIO tag vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSet {
    entity_types: Vec<String>,
    tags: Vec<String>,
    index: HashMap<String, usize>,
}

impl LabelSet {
    pub fn new<I, S>(entity_types: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
        let mut seen = HashSet::new();
        for name in &entity_types {
            if name.is_empty() {
                return Err(Error::InvalidLabelSet("empty entity type name".into()));
            }
            if name.chars().any(char::is_whitespace) {
                return Err(Error::InvalidLabelSet(format!("whitespace in type `{name}`")));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidLabelSet(format!("duplicate entity type `{name}`")));
            }
        }
        let mut tags = Vec::with_capacity(2 * entity_types.len() + 1);
        tags.push("O".to_string());
        for name in &entity_types {
            tags.push(format!("B-{name}"));
            tags.push(format!("I-{name}"));
        }
        let index = tags.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self {
            entity_types,
            tags,
            index,
        })
    }

    /// Collects entity types from the tag column of a CoNLL file, in order of
    /// first appearance.
    pub fn infer_from_conll(text: &str) -> Result<Self> {
        let mut types: Vec<String> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            if fields.len() != 2 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected 2 fields, found {}", fields.len()),
                });
            }
            let tag = fields[1];
            if fields[0] == DOCSTART || tag == "O" {
                continue;
            }
            let name = tag
                .strip_prefix("B-")
                .or_else(|| tag.strip_prefix("I-"))
                .ok_or_else(|| Error::UnknownTag {
                    line: lineno + 1,
                    tag: tag.to_string(),
                })?;
            if !types.iter().any(|t| t == name) {
                types.push(name.to_string());
            }
        }
        Self::new(types)
    }

    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn num_types(&self) -> usize {
        self.entity_types.len()
    }

    pub fn tag_count(&self) -> usize {
        self.tags.len()
    }

    pub fn tag_name(&self, index: usize) -> &str {
        &self.tags[index]
    }

    pub fn tag_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.entity_types.iter().position(|t| t == name)
    }

    pub fn type_name(&self, type_index: usize) -> &str {
        &self.entity_types[type_index]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    id: String,
    tokens: Vec<String>,
}

impl Document {
    pub fn new<S: Into<String>>(id: impl Into<String>, tokens: Vec<S>) -> Result<Self> {
        let tokens: Vec<String> = tokens.into_iter().map(Into::into).collect();
        let id = id.into();
        if tokens.is_empty() {
            return Err(Error::InvalidDocument(format!("`{id}` has no tokens")));
        }
        for tok in &tokens {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) || tok == DOCSTART {
                return Err(Error::InvalidDocument(format!("`{id}` has invalid token {tok:?}")));
            }
        }
        Ok(Self { id, tokens })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Tag indices for one document. BIO validity is not enforced; see [`repair_tags`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TagSequence(Vec<usize>);

impl TagSequence {
    pub fn new(tags: Vec<usize>) -> Self {
        Self(tags)
    }

    pub fn outside(len: usize) -> Self {
        Self(vec![OUTSIDE; len])
    }

    pub fn from_names(names: &[&str], labels: &LabelSet) -> Result<Self> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| {
                labels.tag_index(n).ok_or_else(|| Error::UnknownTag {
                    line: i + 1,
                    tag: n.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Self)
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names<'a>(&self, labels: &'a LabelSet) -> Vec<&'a str> {
        self.0.iter().map(|&t| labels.tag_name(t)).collect()
    }

    fn check(&self, doc: &Document, labels: &LabelSet) -> Result<()> {
        if self.len() != doc.len() {
            return Err(Error::LengthMismatch {
                expected: doc.len(),
                found: self.len(),
            });
        }
        if let Some(&bad) = self.0.iter().find(|&&t| t >= labels.tag_count()) {
            return Err(Error::Shape(format!(
                "tag index {bad} out of range for {} tags",
                labels.tag_count()
            )));
        }
        Ok(())
    }
}

impl std::ops::Deref for TagSequence {
    type Target = [usize];

    fn deref(&self) -> &[usize] {
        &self.0
    }
}

/// Half-open token range `[start, end)` carrying an entity type name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntitySpan {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Layer {
    Gold,
    Distant,
}

impl Layer {
    pub fn name(self) -> &'static str {
        match self {
            Layer::Gold => "gold",
            Layer::Distant => "distant",
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(Layer::Gold),
            "distant" => Ok(Layer::Distant),
            other => Err(Error::InvalidConfig(format!("unknown tag layer `{other}`"))),
        }
    }
}

/// Documents plus optional gold and distant tag layers, aligned by position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    documents: Vec<Document>,
    label_set: LabelSet,
    gold: Option<Vec<TagSequence>>,
    distant: Option<Vec<TagSequence>>,
}

impl Corpus {
    pub fn new(documents: Vec<Document>, label_set: LabelSet) -> Result<Self> {
        let mut seen = HashSet::new();
        for doc in &documents {
            if !seen.insert(doc.id()) {
                return Err(Error::InvalidDocument(format!("duplicate doc id `{}`", doc.id())));
            }
        }
        Ok(Self {
            documents,
            label_set,
            gold: None,
            distant: None,
        })
    }

    pub fn with_layer(mut self, layer: Layer, tags: Vec<TagSequence>) -> Result<Self> {
        if tags.len() != self.documents.len() {
            return Err(Error::LengthMismatch {
                expected: self.documents.len(),
                found: tags.len(),
            });
        }
        for (doc, t) in self.documents.iter().zip(&tags) {
            t.check(doc, &self.label_set)?;
        }
        match layer {
            Layer::Gold => self.gold = Some(tags),
            Layer::Distant => self.distant = Some(tags),
        }
        Ok(self)
    }

    pub fn without_layer(mut self, layer: Layer) -> Self {
        match layer {
            Layer::Gold => self.gold = None,
            Layer::Distant => self.distant = None,
        }
        self
    }

    /// Moves the tags of layer `from` into layer `to`.
    pub fn relabel_layer(mut self, from: Layer, to: Layer) -> Result<Self> {
        let tags = match from {
            Layer::Gold => self.gold.take(),
            Layer::Distant => self.distant.take(),
        }
        .ok_or(Error::MissingLayer(from.name()))?;
        match to {
            Layer::Gold => self.gold = Some(tags),
            Layer::Distant => self.distant = Some(tags),
        }
        Ok(self)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    /// Document ids in corpus order.
    pub fn ids(&self) -> Vec<String> {
        self.documents.iter().map(|d| d.id().to_string()).collect()
    }

    pub fn label_set(&self) -> &LabelSet {
        &self.label_set
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn has_layer(&self, layer: Layer) -> bool {
        match layer {
            Layer::Gold => self.gold.is_some(),
            Layer::Distant => self.distant.is_some(),
        }
    }

    pub fn layer(&self, layer: Layer) -> Result<&[TagSequence]> {
        match layer {
            Layer::Gold => self.gold.as_deref(),
            Layer::Distant => self.distant.as_deref(),
        }
        .ok_or(Error::MissingLayer(layer.name()))
    }

    pub fn token_count(&self) -> usize {
        self.documents.iter().map(Document::len).sum()
    }

    /// New corpus with the documents at `indices`, in that order, keeping any layers.
    pub fn subset(&self, indices: &[usize]) -> Corpus {
        let pick = |layer: &Option<Vec<TagSequence>>| {
            layer
                .as_ref()
                .map(|tags| indices.iter().map(|&i| tags[i].clone()).collect())
        };
        Corpus {
            documents: indices.iter().map(|&i| self.documents[i].clone()).collect(),
            label_set: self.label_set.clone(),
            gold: pick(&self.gold),
            distant: pick(&self.distant),
        }
    }
}

/// Parses two-column CoNLL text into a corpus with the gold layer populated.
///
/// `-DOCSTART-` lines delimit documents; without them every sentence becomes
/// its own document. Document ids are positional (`doc0`, `doc1`, ...).
pub fn parse_conll(text: &str, label_set: &LabelSet) -> Result<Corpus> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput);
    }
    let has_docstart = text.lines().any(|l| l.split_whitespace().next() == Some(DOCSTART));

    let mut docs: Vec<(Vec<String>, Vec<usize>)> = Vec::new();
    let mut tokens = Vec::new();
    let mut tags = Vec::new();

    fn flush(docs: &mut Vec<(Vec<String>, Vec<usize>)>, tokens: &mut Vec<String>, tags: &mut Vec<usize>) {
        if !tokens.is_empty() {
            docs.push((std::mem::take(tokens), std::mem::take(tags)));
        }
    }

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() {
            if !has_docstart {
                flush(&mut docs, &mut tokens, &mut tags);
            }
            continue;
        }
        if fields.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 fields, found {}", fields.len()),
            });
        }
        if fields[0] == DOCSTART {
            flush(&mut docs, &mut tokens, &mut tags);
            continue;
        }
        let tag = label_set.tag_index(fields[1]).ok_or_else(|| Error::UnknownTag {
            line,
            tag: fields[1].to_string(),
        })?;
        tokens.push(fields[0].to_string());
        tags.push(tag);
    }
    flush(&mut docs, &mut tokens, &mut tags);

    if docs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut documents = Vec::with_capacity(docs.len());
    let mut gold = Vec::with_capacity(docs.len());
    for (i, (toks, t)) in docs.into_iter().enumerate() {
        documents.push(Document::new(format!("doc{i}"), toks)?);
        gold.push(TagSequence::new(t));
    }
    Corpus::new(documents, label_set.clone())?.with_layer(Layer::Gold, gold)
}

/// Writes one tag layer (or all-`O` when `layer` is `None`) in the format
/// [`parse_conll`] reads. Output is byte-deterministic.
pub fn write_conll(corpus: &Corpus, layer: Option<Layer>) -> Result<String> {
    let tags = layer.map(|l| corpus.layer(l)).transpose()?;
    let labels = corpus.label_set();
    let mut out = String::new();
    for (i, doc) in corpus.documents().iter().enumerate() {
        out.push_str(DOCSTART);
        out.push_str(" O\n\n");
        for (j, tok) in doc.tokens().iter().enumerate() {
            let tag = tags.map_or("O", |t| labels.tag_name(t[i][j]));
            writeln!(out, "{tok} {tag}").expect("write to String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Promotes every `I-τ` not continuing an entity of type τ to `B-τ`.
pub fn repair_tags(tags: &TagSequence) -> TagSequence {
    let mut out = Vec::with_capacity(tags.len());
    let mut prev = Tag::Outside;
    for &index in tags.iter() {
        let tag = match Tag::from_index(index) {
            Tag::Inside(t) if prev.entity_type() != Some(t) => Tag::Begin(t),
            other => other,
        };
        out.push(tag.index());
        prev = tag;
    }
    TagSequence(out)
}

/// Maximal BIO spans, after repair, sorted by start.
pub fn tags_to_spans(tags: &TagSequence, labels: &LabelSet) -> Vec<EntitySpan> {
    let repaired = repair_tags(tags);
    let mut spans = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (pos, &index) in repaired.iter().enumerate() {
        match Tag::from_index(index) {
            Tag::Inside(_) => {}
            Tag::Begin(t) => {
                if let Some((start, ty)) = open.take() {
                    spans.push(EntitySpan::new(start, pos, labels.type_name(ty)));
                }
                open = Some((pos, t));
            }
            Tag::Outside => {
                if let Some((start, ty)) = open.take() {
                    spans.push(EntitySpan::new(start, pos, labels.type_name(ty)));
                }
            }
        }
    }
    if let Some((start, ty)) = open {
        spans.push(EntitySpan::new(start, repaired.len(), labels.type_name(ty)));
    }
    spans
}

/// Inverse of [`tags_to_spans`] for disjoint spans.
pub fn spans_to_tags(spans: &[EntitySpan], len: usize, labels: &LabelSet) -> Result<TagSequence> {
    let mut tags = vec![OUTSIDE; len];
    for span in spans {
        if span.start >= span.end || span.end > len {
            return Err(Error::Shape(format!(
                "span [{}, {}) invalid for length {len}",
                span.start, span.end
            )));
        }
        let ty = labels.type_index(&span.entity_type).ok_or_else(|| Error::UnknownTag {
            line: 0,
            tag: span.entity_type.clone(),
        })?;
        if tags[span.start..span.end].iter().any(|&t| t != OUTSIDE) {
            return Err(Error::OverlappingSpans(format!("[{}, {})", span.start, span.end)));
        }
        tags[span.start] = Tag::Begin(ty).index();
        for t in &mut tags[span.start + 1..span.end] {
            *t = Tag::Inside(ty).index();
        }
    }
    Ok(TagSequence(tags))
}
