//! Subcommand implementations. Each writes its report lines to `out`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use moener::checkpoint::{pool_from_bytes, pool_scalar_width, pool_to_bytes};
use moener::corpus::{parse_conll, write_conll, Corpus, LabelSet, Layer};
use moener::distant::{coverage, label_corpus, load_gazetteer};
use moener::eval::evaluate_report;
use moener::fairness::{format_fair_dump, sinkhorn, to_scores};
use moener::moe::{format_histogram, predict_corpus, score_documents, ExpertPool};
use moener::selftrain::{format_history, self_train};
use moener::synth::generate;
use moener::tagger::Vocabulary;
use moener::Scalar;

use crate::config::{Precision, RunConfig};
use crate::error::{CliError, CliResult};

pub const MODEL_FILE: &str = "model.bin";
pub const HISTORY_FILE: &str = "history.tsv";
pub const STAGE1_FILE: &str = "stage1.tsv";
pub const ASSIGNMENT_FILE: &str = "assignment.tsv";
pub const HISTOGRAM_FILE: &str = "histogram.txt";
pub const CONFIG_FILE: &str = "config.txt";

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn emit(out: &mut (dyn Write + Send), line: impl AsRef<str>) -> CliResult<()> {
    writeln!(out, "{}", line.as_ref())?;
    Ok(())
}

fn required(p: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    p.ok_or_else(|| CliError::Usage(format!("missing {what} path")))
}

/// Reads a CoNLL file whose tag column becomes `layer`.
fn load_layer(path: &Path, labels: &LabelSet, layer: Layer) -> CliResult<Corpus> {
    let corpus = parse_conll(&read_text(path)?, labels).map_err(|e| CliError::from(e).at(path))?;
    Ok(corpus.relabel_layer(Layer::Gold, layer)?)
}

/// Combines a gold file and a distant file over the same tokens.
fn load_corpus(gold: Option<&Path>, distant: Option<&Path>, labels: &LabelSet) -> CliResult<Corpus> {
    match (gold, distant) {
        (None, None) => Err(CliError::Usage("no corpus given (use --gold and/or --distant)".into())),
        (Some(g), None) => load_layer(g, labels, Layer::Gold),
        (None, Some(d)) => load_layer(d, labels, Layer::Distant),
        (Some(g), Some(d)) => {
            let gold = load_layer(g, labels, Layer::Gold)?;
            let distant = load_layer(d, labels, Layer::Distant)?;
            let same = gold.len() == distant.len()
                && gold
                    .documents()
                    .iter()
                    .zip(distant.documents())
                    .all(|(a, b)| a.tokens() == b.tokens());
            if !same {
                return Err(CliError::Data(format!(
                    "{} and {} do not hold the same tokens",
                    g.display(),
                    d.display()
                )));
            }
            Ok(gold.with_layer(Layer::Distant, distant.layer(Layer::Distant)?.to_vec())?)
        }
    }
}

/// Configured types, or the union of the types seen in `files` and the
/// gazetteer, in order of first appearance.
fn resolve_labels(cfg: &RunConfig, files: &[&Path], gazetteer: Option<&str>) -> CliResult<LabelSet> {
    if !cfg.types.is_empty() {
        return Ok(LabelSet::new(cfg.types.clone())?);
    }
    let mut types: Vec<String> = Vec::new();
    let mut add = |t: &str| {
        if !types.iter().any(|x| x == t) {
            types.push(t.to_string());
        }
    };
    for path in files {
        let inferred = LabelSet::infer_from_conll(&read_text(path)?).map_err(|e| CliError::from(e).at(path))?;
        inferred.entity_types().iter().for_each(|t| add(t));
    }
    if let Some(text) = gazetteer {
        for t in text.lines().filter_map(|l| l.rsplit_once('\t')).map(|(_, t)| t.trim()) {
            add(t);
        }
    }
    if types.is_empty() {
        return Err(CliError::Data("no entity types found; set `types`".into()));
    }
    Ok(LabelSet::new(types)?)
}

pub fn synth(cfg: &RunConfig, out_dir: &Path, out: &mut (dyn Write + Send)) -> CliResult<()> {
    let s = generate(&cfg.synth_spec())?;
    write_file(&out_dir.join("gold.conll"), write_conll(&s.corpus, Some(Layer::Gold))?)?;
    write_file(
        &out_dir.join("distant.conll"),
        write_conll(&s.corpus, Some(Layer::Distant))?,
    )?;
    write_file(&out_dir.join("gazetteer.tsv"), s.gazetteer_tsv())?;
    write_file(&out_dir.join("clusters.tsv"), s.clusters_tsv())?;
    emit(out, format!("documents\t{}", s.corpus.len()))?;
    emit(out, format!("tokens\t{}", s.corpus.token_count()))?;
    emit(out, format!("gold_coverage\t{:.6}", coverage(&s.corpus, Layer::Gold)?))?;
    emit(
        out,
        format!("distant_coverage\t{:.6}", coverage(&s.corpus, Layer::Distant)?),
    )
}

pub fn distant_label(
    cfg: &RunConfig,
    corpus_path: &Path,
    gazetteer_path: &Path,
    out_path: &Path,
    out: &mut (dyn Write + Send),
) -> CliResult<()> {
    let gaz_text = read_text(gazetteer_path)?;
    let labels = resolve_labels(cfg, &[corpus_path], Some(&gaz_text))?;
    let gaz = load_gazetteer(&gaz_text, &labels).map_err(|e| CliError::from(e).at(gazetteer_path))?;
    let corpus = load_layer(corpus_path, &labels, Layer::Gold)?;
    let labeled = label_corpus(corpus, &gaz.gazetteer)?;
    write_file(out_path, write_conll(&labeled, Some(Layer::Distant))?)?;
    if gaz.duplicates > 0 {
        emit(out, format!("gazetteer_duplicates\t{}", gaz.duplicates))?;
    }
    emit(out, format!("coverage\t{:.6}", coverage(&labeled, Layer::Distant)?))
}

pub fn train(cfg: &RunConfig, dump_fair: Option<&Path>, out: &mut (dyn Write + Send)) -> CliResult<()> {
    cfg.validate()?;
    let distant = required(cfg.distant.clone(), "distant corpus")?;
    let out_dir = required(cfg.out_dir.clone(), "output directory")?;
    let mut files = vec![distant.as_path()];
    files.extend(cfg.gold.as_deref());
    let labels = resolve_labels(cfg, &files, None)?;
    let corpus = load_corpus(cfg.gold.as_deref(), Some(&distant), &labels)?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(cfg, corpus, &out_dir, dump_fair, out),
        Precision::F64 => train_with::<f64>(cfg, corpus, &out_dir, dump_fair, out),
    }
}

fn train_with<T: Scalar>(
    cfg: &RunConfig,
    corpus: Corpus,
    out_dir: &Path,
    dump_fair: Option<&Path>,
    out: &mut (dyn Write + Send),
) -> CliResult<()> {
    let vocab = Vocabulary::build(corpus.documents());
    let pool = ExpertPool::<T>::init(vocab, corpus.label_set().clone(), cfg.k, cfg.dims, cfg.seed)?;
    let res = self_train(pool, &corpus, &cfg.self_train, &cfg.fair, &cfg.train_config())?;

    for r in &res.stage1 {
        emit(out, format!("stage1\t{}", r.line()))?;
    }
    for r in &res.history {
        emit(out, format!("selftrain\t{}", r.line()))?;
    }
    let assignment: String = res
        .final_assignment
        .doc_ids()
        .iter()
        .zip(res.final_assignment.experts())
        .map(|(d, z)| format!("{d}\t{z}\n"))
        .collect();
    let histogram = format_histogram(&res.final_assignment.histogram());
    write_file(&out_dir.join(MODEL_FILE), pool_to_bytes(&res.pool))?;
    write_file(&out_dir.join(STAGE1_FILE), format_history(&res.stage1))?;
    write_file(&out_dir.join(HISTORY_FILE), format_history(&res.history))?;
    write_file(&out_dir.join(ASSIGNMENT_FILE), assignment)?;
    write_file(&out_dir.join(HISTOGRAM_FILE), format!("{histogram}\n"))?;
    write_file(&out_dir.join(CONFIG_FILE), cfg.dump())?;

    if let Some(path) = dump_fair {
        let scores = score_documents(&res.pool, &res.train, Layer::Distant)?;
        let (vectors, scaled) = sinkhorn(&to_scores(&scores, &cfg.fair), &cfg.fair)?;
        write_file(path, format_fair_dump(&vectors, &scaled))?;
    }

    let best = res.best_round.map_or("stage1".to_string(), |r| r.to_string());
    emit(out, format!("best_round\t{best}"))?;
    emit(out, format!("best_dev_f1\t{:.6}", res.best_dev_f1))?;
    emit(out, format!("histogram\t{histogram}"))?;
    if corpus.has_layer(Layer::Gold) {
        let report = evaluate_report(&res.pool, &corpus, Layer::Gold, true)?;
        emit(out, format!("gold\t{}", report.overall))?;
    }
    Ok(())
}

/// Which pool layout a checkpoint holds.
enum Loaded {
    F32(ExpertPool<f32>),
    F64(ExpertPool<f64>),
}

fn load_model(path: &Path) -> CliResult<Loaded> {
    let bytes = read_bytes(path)?;
    let at = |e: moener::Error| CliError::from(e).at(path);
    match pool_scalar_width(&bytes).map_err(at)? {
        4 => Ok(Loaded::F32(pool_from_bytes(&bytes).map_err(at)?)),
        8 => Ok(Loaded::F64(pool_from_bytes(&bytes).map_err(at)?)),
        w => Err(CliError::Data(format!(
            "{}: unsupported scalar width {w}",
            path.display()
        ))),
    }
}

pub fn eval(
    model: &Path,
    gold: Option<&Path>,
    distant: Option<&Path>,
    reference: Layer,
    per_type: bool,
    out: &mut (dyn Write + Send),
) -> CliResult<()> {
    match load_model(model)? {
        Loaded::F32(p) => eval_with(&p, gold, distant, reference, per_type, out),
        Loaded::F64(p) => eval_with(&p, gold, distant, reference, per_type, out),
    }
}

fn eval_with<T: Scalar>(
    pool: &ExpertPool<T>,
    gold: Option<&Path>,
    distant: Option<&Path>,
    reference: Layer,
    per_type: bool,
    out: &mut (dyn Write + Send),
) -> CliResult<()> {
    let corpus = load_corpus(gold, distant, pool.labels())?;
    let report = evaluate_report(pool, &corpus, reference, true)?;
    emit(out, format!("all\t{}", report.overall))?;
    if per_type {
        for (name, m) in &report.per_type {
            emit(out, format!("{name}\t{m}"))?;
        }
    }
    Ok(())
}

pub fn predict(model: &Path, input: &Path, out_path: &Path, out: &mut (dyn Write + Send)) -> CliResult<()> {
    match load_model(model)? {
        Loaded::F32(p) => predict_with(&p, input, out_path, out),
        Loaded::F64(p) => predict_with(&p, input, out_path, out),
    }
}

fn predict_with<T: Scalar>(
    pool: &ExpertPool<T>,
    input: &Path,
    out_path: &Path,
    out: &mut (dyn Write + Send),
) -> CliResult<()> {
    let corpus = load_layer(input, pool.labels(), Layer::Gold)?;
    let predicted = predict_corpus(pool, &corpus, true);
    let corpus = corpus.with_layer(Layer::Gold, predicted)?;
    write_file(out_path, write_conll(&corpus, Some(Layer::Gold))?)?;
    emit(out, format!("documents\t{}", corpus.len()))?;
    emit(
        out,
        format!("predicted_coverage\t{:.6}", coverage(&corpus, Layer::Gold)?),
    )
}
