//! Synthetic clustered corpora with planted entities and a noisy distant layer.
//!
//! Each cluster owns its context vocabulary and one cue word per entity type;
//! an entity is always preceded by its cue. Entity names come from per-cluster
//! pools, or from one pool shared by all clusters when `shared_names` is set.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{spans_to_tags, Corpus, Document, EntitySpan, LabelSet, Layer, TagSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_clusters: usize,
    pub docs_per_cluster: usize,
    pub min_doc_len: usize,
    pub max_doc_len: usize,
    pub vocab_per_cluster: usize,
    pub names_per_type: usize,
    pub entity_types: Vec<String>,
    pub max_entity_len: usize,
    /// Chance of starting an entity at each free position; cluster `c` uses
    /// entry `c % len`.
    pub entity_rates: Vec<f64>,
    /// Chance that an entity takes its cluster's favored type (`c % num_types`)
    /// instead of a uniformly drawn one.
    pub type_skew: f64,
    pub shared_names: bool,
    /// Per-entity corruption rate of the distant layer.
    pub noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_clusters: 4,
            docs_per_cluster: 50,
            min_doc_len: 20,
            max_doc_len: 40,
            vocab_per_cluster: 60,
            names_per_type: 12,
            entity_types: vec!["PER".into(), "LOC".into(), "ORG".into()],
            max_entity_len: 3,
            entity_rates: vec![0.12],
            type_skew: 0.0,
            shared_names: false,
            noise_rate: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_clusters == 0 || self.docs_per_cluster == 0 {
            return bad("num_clusters and docs_per_cluster must be >= 1");
        }
        if self.vocab_per_cluster == 0 || self.names_per_type == 0 || self.max_entity_len == 0 {
            return bad("vocab_per_cluster, names_per_type and max_entity_len must be >= 1");
        }
        if self.entity_types.is_empty() {
            return bad("at least one entity type is required");
        }
        if self.min_doc_len == 0 || self.min_doc_len > self.max_doc_len {
            return bad("doc length range must satisfy 1 <= min_doc_len <= max_doc_len");
        }
        if self.min_doc_len < self.max_entity_len + 1 {
            return Err(Error::InvalidConfig(format!(
                "min_doc_len {} is shorter than the entity template (cue + {} tokens)",
                self.min_doc_len, self.max_entity_len
            )));
        }
        let unit = |x: &f64| (0.0..=1.0).contains(x);
        if self.entity_rates.is_empty() || !self.entity_rates.iter().all(unit) {
            return bad("entity_rates must be non-empty with entries in [0, 1]");
        }
        if !unit(&self.type_skew) || !unit(&self.noise_rate) {
            return bad("type_skew and noise_rate must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Generated corpus (gold and distant layers) plus the latent cluster of each document.
#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub clusters: Vec<usize>,
    /// Every name in the pools as `(tokens, type index)`, in generation order.
    pub names: Vec<(Vec<String>, usize)>,
}

impl SynthCorpus {
    /// Noise-free gazetteer listing every pool name (`surface<TAB>TYPE`).
    pub fn gazetteer_tsv(&self) -> String {
        let labels = self.corpus.label_set();
        self.names
            .iter()
            .map(|(toks, t)| format!("{}\t{}\n", toks.join(" "), labels.type_name(*t)))
            .collect()
    }

    /// `doc_id<TAB>cluster` per document.
    pub fn clusters_tsv(&self) -> String {
        self.corpus
            .documents()
            .iter()
            .zip(&self.clusters)
            .map(|(d, c)| format!("{}\t{}\n", d.id(), c))
            .collect()
    }
}

fn name_pools(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<Vec<String>>>> {
    // pools[cluster][type][name] -> tokens
    let owners = if spec.shared_names { 1 } else { spec.num_clusters };
    let mut pools = Vec::with_capacity(owners);
    for c in 0..owners {
        let prefix = if spec.shared_names {
            String::new()
        } else {
            format!("c{c}")
        };
        let per_type = spec
            .entity_types
            .iter()
            .map(|ty| {
                (0..spec.names_per_type)
                    .map(|n| {
                        let len = rng.random_range(1..=spec.max_entity_len);
                        (0..len).map(|j| format!("{ty}{prefix}n{n}p{j}")).collect()
                    })
                    .collect()
            })
            .collect();
        pools.push(per_type);
    }
    pools
}

fn corrupt(gold: &[EntitySpan], spec: &SynthSpec, labels: &LabelSet, rng: &mut ChaCha8Rng) -> Vec<EntitySpan> {
    let k = labels.num_types();
    let mut out = Vec::with_capacity(gold.len());
    for span in gold {
        let r: f64 = rng.random();
        if r < spec.noise_rate / 2.0 {
            continue;
        }
        if r < spec.noise_rate {
            if k < 2 {
                // nothing to retype to; corrupt by deletion instead
                continue;
            }
            let current = labels.type_index(&span.entity_type).expect("planted type");
            let mut other = rng.random_range(0..k - 1);
            if other >= current {
                other += 1;
            }
            out.push(EntitySpan::new(span.start, span.end, labels.type_name(other)));
        } else {
            out.push(span.clone());
        }
    }
    out
}

/// Deterministic in `spec.seed`. Document `i` belongs to cluster `i % num_clusters`.
pub fn generate(spec: &SynthSpec) -> Result<SynthCorpus> {
    spec.validate()?;
    let labels = LabelSet::new(spec.entity_types.iter().cloned())?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let pools = name_pools(spec, &mut rng);
    let n_types = labels.num_types();

    let total = spec.num_clusters * spec.docs_per_cluster;
    let mut docs = Vec::with_capacity(total);
    let mut gold = Vec::with_capacity(total);
    let mut distant = Vec::with_capacity(total);
    let mut clusters = Vec::with_capacity(total);
    for i in 0..total {
        let c = i % spec.num_clusters;
        let pool = &pools[if spec.shared_names { 0 } else { c }];
        let rate = spec.entity_rates[c % spec.entity_rates.len()];
        let len = rng.random_range(spec.min_doc_len..=spec.max_doc_len);
        let mut tokens = Vec::with_capacity(len);
        let mut spans = Vec::new();
        while tokens.len() < len {
            let room = len - tokens.len();
            if room >= 2 && rng.random_bool(rate) {
                let t = if rng.random_bool(spec.type_skew) {
                    c % n_types
                } else {
                    rng.random_range(0..n_types)
                };
                let fitting: Vec<&Vec<String>> = pool[t].iter().filter(|n| n.len() < room).collect();
                if let Some(&name) = fitting.get(rng.random_range(0..fitting.len().max(1))) {
                    tokens.push(format!("c{c}cue{}", labels.type_name(t).to_lowercase()));
                    let start = tokens.len();
                    tokens.extend(name.iter().cloned());
                    spans.push(EntitySpan::new(start, tokens.len(), labels.type_name(t)));
                    continue;
                }
            }
            tokens.push(format!("c{c}w{}", rng.random_range(0..spec.vocab_per_cluster)));
        }
        let noisy = corrupt(&spans, spec, &labels, &mut rng);
        gold.push(spans_to_tags(&spans, len, &labels)?);
        distant.push(spans_to_tags(&noisy, len, &labels)?);
        docs.push(Document::new(format!("doc{i}"), tokens)?);
        clusters.push(c);
    }

    let names = pools
        .iter()
        .flat_map(|per_type| {
            per_type
                .iter()
                .enumerate()
                .flat_map(|(t, names)| names.iter().map(move |n| (n.clone(), t)))
        })
        .collect();
    let corpus = Corpus::new(docs, labels)?
        .with_layer(Layer::Gold, gold)?
        .with_layer(Layer::Distant, distant)?;
    Ok(SynthCorpus {
        corpus,
        clusters,
        names,
    })
}

/// Purity of the expert partition: each expert's documents are credited to
/// its majority cluster. A collapse onto one expert scores `1 / num_clusters`
/// on balanced data.
pub fn cluster_purity(clusters: &[usize], experts: &[usize]) -> f64 {
    assert_eq!(clusters.len(), experts.len());
    if clusters.is_empty() {
        return 1.0;
    }
    let n_clusters = clusters.iter().max().map_or(0, |&m| m + 1);
    let n_experts = experts.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![vec![0usize; n_clusters]; n_experts];
    for (&c, &e) in clusters.iter().zip(experts) {
        counts[e][c] += 1;
    }
    let majority: usize = counts.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
    majority as f64 / clusters.len() as f64
}

/// Tags of the gold layer as stored (convenience for tests and tools).
pub fn gold_tags(s: &SynthCorpus) -> &[TagSequence] {
    s.corpus.layer(Layer::Gold).expect("synthetic corpora carry gold")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_conll, tags_to_spans, write_conll};

    #[test]
    fn deterministic_and_well_formed() {
        let spec = SynthSpec {
            docs_per_cluster: 10,
            noise_rate: 0.3,
            seed: 3,
            ..SynthSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.corpus, b.corpus);
        assert_eq!(a.clusters, b.clusters);
        assert_eq!(a.corpus.len(), 40);
        for d in a.corpus.documents() {
            assert!((spec.min_doc_len..=spec.max_doc_len).contains(&d.len()));
        }
        let text = write_conll(&a.corpus, Some(Layer::Gold)).unwrap();
        let back = parse_conll(&text, a.corpus.label_set()).unwrap();
        assert_eq!(back.layer(Layer::Gold).unwrap(), gold_tags(&a));
    }

    #[test]
    fn zero_noise_distant_equals_gold() {
        let s = generate(&SynthSpec::default()).unwrap();
        assert_eq!(s.corpus.layer(Layer::Distant).unwrap(), gold_tags(&s));
        assert!(gold_tags(&s).iter().any(|t| t.iter().any(|&x| x != 0)));
    }

    #[test]
    fn full_noise_changes_every_entity() {
        for types in [vec!["PER".to_string(), "LOC".to_string()], vec!["PER".to_string()]] {
            let s = generate(&SynthSpec {
                noise_rate: 1.0,
                entity_types: types,
                seed: 11,
                ..SynthSpec::default()
            })
            .unwrap();
            let labels = s.corpus.label_set();
            let mut entities = 0;
            for (g, d) in gold_tags(&s).iter().zip(s.corpus.layer(Layer::Distant).unwrap()) {
                for span in tags_to_spans(g, labels) {
                    entities += 1;
                    assert_ne!(&g[span.start..span.end], &d[span.start..span.end]);
                }
            }
            assert!(entities > 100);
        }
    }

    #[test]
    fn clusters_have_disjoint_vocabularies() {
        let s = generate(&SynthSpec {
            num_clusters: 2,
            ..SynthSpec::default()
        })
        .unwrap();
        let vocab = |c: usize| -> std::collections::HashSet<&String> {
            s.corpus
                .documents()
                .iter()
                .zip(&s.clusters)
                .filter(|(_, &k)| k == c)
                .flat_map(|(d, _)| d.tokens())
                .collect()
        };
        assert!(vocab(0).is_disjoint(&vocab(1)));
    }

    #[test]
    fn impossible_spec_rejected() {
        let spec = SynthSpec {
            min_doc_len: 3,
            max_doc_len: 5,
            max_entity_len: 3,
            ..SynthSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn purity() {
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[0, 0, 0, 0]), 0.5);
        assert_eq!(cluster_purity(&[0, 0, 1, 1], &[0, 1, 0, 1]), 0.5);
    }
}
