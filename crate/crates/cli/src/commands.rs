use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use ooc_core::context::parse_ner_file;
use ooc_core::fixtures::{synthetic_corpus, SyntheticSpec};
use ooc_core::metrics::{evaluate as score, per_item, per_item_csv};
use ooc_core::trainer::{build_samples, train as run_training, write_loss_log, SampleSpec};
use ooc_core::visual::{load_features, write_features_jsonl, DEFAULT_N_OBJ};
use ooc_core::{
    build_context, BpeVocab, CaptionModel, Checkpoint, ContextSettings, DecodeMode, EvalCorpus, EvalItem, LabelSet,
    ModelInput, NerDictionary, NerRecord, VisualRecord,
};

use crate::config::{DataSection, ModelSection, RunConfig, TrainSection, DEFAULT_VOCAB_SIZE};
use crate::{BpeTrainArgs, EvaluateArgs, GenerateArgs, SynthArgs, TokenizeArgs, TrainArgs, UsageError, ValidateArgs};

fn data_error(id: &str, message: impl Into<String>) -> anyhow::Error {
    ooc_core::Error::Data {
        id: id.to_string(),
        message: message.into(),
    }
    .into()
}

/// Relative paths in a config file are taken relative to the file.
fn anchor_paths(mut config: RunConfig, file: &Path) -> RunConfig {
    let base = file.parent().unwrap_or(Path::new(""));
    for slot in [
        &mut config.data.features,
        &mut config.data.ner,
        &mut config.data.vocab,
        &mut config.data.merges,
    ] {
        if let Some(p) = slot.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
    config
}

fn flag_config(a: &TrainArgs) -> RunConfig {
    RunConfig {
        data: DataSection {
            features: a.features.clone(),
            ner: a.ner.clone(),
            vocab: a.vocab.clone(),
            merges: a.merges.clone(),
            vocab_size: a.vocab_size,
        },
        model: ModelSection {
            d_model: a.d_model,
            n_heads: a.n_heads,
            d_ff: a.d_ff,
            text_len: a.text_len,
            n_obj: a.n_obj,
            ..Default::default()
        },
        train: TrainSection {
            lr: a.lr,
            epochs: a.epochs,
            batch_size: a.batch_size,
            loss: a.loss.clone(),
            seed: a.seed,
            ablation: a.ablation.clone(),
            data_fraction: a.data_fraction,
            target_loss: a.target_loss,
        },
    }
}

/// Captions, labels and entity strings from NER records.
fn tokenizer_corpus(ner: &[NerRecord], labels: &LabelSet) -> Vec<String> {
    let mut texts: Vec<String> = ner.iter().filter_map(|r| r.caption.clone()).collect();
    texts.extend(labels.labels().iter().cloned());
    for r in ner {
        for (_, tokens) in r.entities.iter() {
            texts.push(tokens.iter().map(|t| format!(" {t}")).collect());
        }
    }
    texts
}

pub fn train(args: TrainArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => anchor_paths(RunConfig::load(path)?, path),
        None => RunConfig::default(),
    };
    let run = base.overlay(&flag_config(&args));
    if run.data.vocab.is_some() != run.data.merges.is_some() {
        return Err(UsageError("vocab and merges must be given together".into()).into());
    }
    let features_path = RunConfig::required_path(&run.data.features, "--features")?;
    let ner_path = RunConfig::required_path(&run.data.ner, "--ner")?;
    let train_config = run.train_config()?;

    let n_obj = run.model.n_obj.unwrap_or(DEFAULT_N_OBJ);
    let features = load_features(&features_path, n_obj)?;
    let first = features
        .first()
        .ok_or_else(|| ooc_core::Error::Input(format!("{} has no records", features_path.display())))?;
    let d_vis = first.d_vis();
    let labels = LabelSet::default();
    let ner = parse_ner_file(&ner_path, &labels)?;

    let (vocab, trained_size) = match (&run.data.vocab, &run.data.merges) {
        (Some(v), Some(m)) => (BpeVocab::load(v, m)?, None),
        _ => {
            let size = run.data.vocab_size.unwrap_or(DEFAULT_VOCAB_SIZE);
            (BpeVocab::train(&tokenizer_corpus(&ner, &labels), size)?, Some(size))
        }
    };
    let model_config = run.model_config(&vocab, d_vis)?;
    let samples = build_samples(
        &features,
        &ner,
        &vocab,
        SampleSpec {
            text_len: model_config.text_len,
            include_types: train_config.ablation.use_entity_types,
            max_caption_len: model_config.max_caption_len,
        },
    )?;

    let resolved = run.resolved(&model_config, &train_config, trained_size);
    let snapshot = resolved.to_toml()?;
    eprintln!("resolved config:\n{snapshot}");

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    fs::write(args.out.join("config.toml"), &snapshot)?;

    let mut model = CaptionModel::new(model_config)?;
    let quiet = args.quiet;
    let log = run_training(&mut model, &samples, &train_config, |e| {
        if !quiet {
            eprintln!("epoch {:>4}  loss {:.5}  {:.0} tok/s", e.epoch, e.loss, e.tokens_per_sec);
        }
    })?;
    write_loss_log(args.out.join("loss.csv"), &log)?;

    let mut checkpoint = Checkpoint {
        model,
        vocab,
        context: ContextSettings {
            labels,
            ablation: train_config.ablation,
        },
    };
    checkpoint.model.round_to_f32();
    checkpoint.save(args.out.join("model.ckpt"))?;
    if let Some(last) = log.last() {
        eprintln!(
            "trained {} epoch(s) on {} sample(s), final loss {:.5}; wrote {}",
            last.epoch,
            samples.len(),
            last.loss,
            args.out.display()
        );
    }
    Ok(())
}

/// Loads features sized for the checkpointed model.
pub fn load_model_features(checkpoint: &Checkpoint, path: &Path) -> Result<Vec<VisualRecord>> {
    let c = checkpoint.model.config();
    let features = load_features(path, c.n_obj)?;
    for r in &features {
        r.validate(c.graph.d_vis, c.n_obj)
            .with_context(|| format!("{} does not match the checkpoint", path.display()))?;
    }
    Ok(features)
}

pub fn find_record<'a>(features: &'a [VisualRecord], id: &str) -> Result<&'a VisualRecord> {
    features
        .iter()
        .find(|r| r.sample_id == id)
        .ok_or_else(|| data_error(id, "no feature record with this id"))
}

/// Caption text for one record under an entity context.
pub fn caption(
    checkpoint: &Checkpoint,
    record: &VisualRecord,
    entities: &NerDictionary,
    mode: DecodeMode,
    max_len: Option<usize>,
) -> Result<String> {
    let model = &checkpoint.model;
    let ablation = &checkpoint.context.ablation;
    let text = build_context(
        entities,
        &checkpoint.vocab,
        model.config().text_len,
        ablation.use_entity_types,
    )?;
    let input = ModelInput { visual: record, text: &text };
    let ids = model.generate(&input, ablation, mode, max_len)?;
    Ok(checkpoint.vocab.decode(&ids)?)
}

pub fn generate(args: GenerateArgs) -> Result<()> {
    let mode: DecodeMode = args.mode.parse().map_err(|e: ooc_core::Error| UsageError(e.to_string()))?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let entities = NerDictionary::parse_spec(&args.tokens, &checkpoint.context.labels)?;
    let features = load_model_features(&checkpoint, &args.features)?;
    let record = find_record(&features, &args.id)?;
    println!("{}", caption(&checkpoint, record, &entities, mode, args.max_len)?);
    Ok(())
}

#[derive(Deserialize)]
struct HypLine {
    id: String,
    hyp: String,
}

#[derive(Deserialize)]
struct RefLine {
    id: String,
    refs: Vec<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| ooc_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| ooc_core::Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Joins hypotheses and references by id; both sides must cover the same ids.
fn join_by_id(hyps: Vec<HypLine>, refs: Vec<RefLine>) -> Result<Vec<EvalItem>> {
    let mut by_id: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in refs {
        by_id.entry(r.id).or_default().extend(r.refs);
    }
    let hyp_ids: BTreeSet<&str> = hyps.iter().map(|h| h.id.as_str()).collect();
    let no_refs: Vec<&str> = hyp_ids.iter().copied().filter(|id| !by_id.contains_key(*id)).collect();
    if let Some(first) = no_refs.first() {
        return Err(data_error(first, format!("hypotheses without references: {}", no_refs.join(", "))));
    }
    let no_hyp: Vec<&str> = by_id.keys().map(String::as_str).filter(|id| !hyp_ids.contains(id)).collect();
    if let Some(first) = no_hyp.first() {
        return Err(data_error(first, format!("references without hypotheses: {}", no_hyp.join(", "))));
    }
    Ok(hyps
        .into_iter()
        .map(|h| EvalItem {
            refs: by_id[&h.id].clone(),
            id: h.id,
            hyp: h.hyp,
        })
        .collect())
}

fn generated_corpus(checkpoint_path: &Path, features: &Path, ner: &Path, mode: DecodeMode) -> Result<Vec<EvalItem>> {
    let checkpoint = Checkpoint::load(checkpoint_path)?;
    let features = load_model_features(&checkpoint, features)?;
    let records = parse_ner_file(ner, &checkpoint.context.labels)?;
    let mut items = Vec::with_capacity(records.len());
    for r in records {
        let reference = r
            .caption
            .clone()
            .ok_or_else(|| data_error(&r.id, "evaluation record has no reference caption"))?;
        let record = find_record(&features, &r.id)?;
        items.push(EvalItem {
            hyp: caption(&checkpoint, record, &r.entities, mode, None)?,
            refs: vec![reference],
            id: r.id,
        });
    }
    Ok(items)
}

pub fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mode: DecodeMode = args.mode.parse().map_err(|e: ooc_core::Error| UsageError(e.to_string()))?;
    let corpus = match (&args.corpus, &args.hyp, &args.refs, &args.checkpoint) {
        (Some(path), ..) => EvalCorpus::load(path)?,
        (None, Some(h), Some(r), None) => EvalCorpus::new(join_by_id(read_jsonl(h)?, read_jsonl(r)?)?)?,
        (None, None, None, Some(ck)) => {
            let (Some(f), Some(n)) = (&args.features, &args.ner) else {
                return Err(UsageError("--checkpoint needs --features and --ner".into()).into());
            };
            EvalCorpus::new(generated_corpus(ck, f, n, mode)?)?
        }
        _ => {
            return Err(UsageError("give one of --corpus, --hyp with --refs, or --checkpoint".into()).into());
        }
    };
    let report = serde_json::to_string_pretty(&score(&corpus))?;
    println!("{report}");
    if let Some(path) = &args.report {
        fs::write(path, format!("{report}\n")).with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = &args.csv {
        fs::write(path, per_item_csv(&per_item(&corpus))).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn load_vocab(vocab: &Option<PathBuf>, merges: &Option<PathBuf>, checkpoint: &Option<PathBuf>) -> Result<BpeVocab> {
    match (vocab, merges, checkpoint) {
        (Some(v), Some(m), None) => Ok(BpeVocab::load(v, m)?),
        (None, None, Some(c)) => Ok(Checkpoint::load(c)?.vocab),
        _ => Err(UsageError("give --vocab with --merges, or --checkpoint".into()).into()),
    }
}

pub fn tokenize(args: TokenizeArgs) -> Result<()> {
    let vocab = load_vocab(&args.vocab, &args.merges, &args.checkpoint)?;
    let text = args.input.join(" ");
    let mut out = std::io::stdout().lock();
    if args.decode {
        let ids = text
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| ooc_core::Error::Input(format!("`{t}` is not a token id"))))
            .collect::<Result<Vec<_>, _>>()?;
        writeln!(out, "{}", vocab.decode(&ids)?)?;
    } else {
        let ids = vocab.encode(&text);
        let shown: Vec<String> = ids.iter().map(usize::to_string).collect();
        writeln!(out, "{}", shown.join(" "))?;
        writeln!(out, "{}", vocab.decode(&ids)?)?;
    }
    Ok(())
}

pub fn validate_features(args: ValidateArgs) -> Result<()> {
    let records = load_features(&args.features, args.n_obj)?;
    let d_vis = match (args.d_vis, records.first()) {
        (Some(d), _) => d,
        (None, Some(r)) => r.d_vis(),
        (None, None) => return Err(ooc_core::Error::Input(format!("{} has no records", args.features.display())).into()),
    };
    let mut seen = BTreeSet::new();
    let mut objects = 0;
    for r in &records {
        r.validate(d_vis, args.n_obj)?;
        if !seen.insert(r.sample_id.as_str()) {
            return Err(data_error(&r.sample_id, "duplicate sample id"));
        }
        objects += r.real_objects();
    }
    println!(
        "ok: {} record(s), d_vis {d_vis}, n_obj {}, {:.2} real objects per record",
        records.len(),
        args.n_obj,
        if records.is_empty() { 0.0 } else { objects as f64 / records.len() as f64 }
    );
    Ok(())
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut spec = match args.preset.as_str() {
        "tiny" => SyntheticSpec::tiny(args.d_vis, args.n_obj),
        "overfit" => SyntheticSpec::overfit(args.d_vis, args.n_obj),
        other => return Err(UsageError(format!("unknown preset `{other}`; expected tiny or overfit")).into()),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let corpus = synthetic_corpus(&spec)?;
    let labels = LabelSet::default();
    let vocab = BpeVocab::train(&corpus.tokenizer_corpus(&labels), args.vocab_size)?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    write_features_jsonl(args.out.join("features.jsonl"), &corpus.features)?;
    ooc_core::context::write_ner_file(args.out.join("ner.jsonl"), &corpus.ner)?;
    vocab.save(args.out.join("vocab.json"), args.out.join("merges.txt"))?;
    println!(
        "wrote {} sample(s), vocabulary of {} to {}",
        corpus.features.len(),
        vocab.vocab_size(),
        args.out.display()
    );
    Ok(())
}

pub fn bpe_train(args: BpeTrainArgs) -> Result<()> {
    let text = fs::read_to_string(&args.input).map_err(|e| ooc_core::Error::Io {
        path: args.input.clone(),
        source: e,
    })?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let vocab = BpeVocab::train(&lines, args.vocab_size)?;
    vocab.save(&args.out_vocab, &args.out_merges)?;
    println!("vocabulary of {} with {} merges", vocab.vocab_size(), vocab.merges().len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hyp(id: &str) -> HypLine {
        HypLine {
            id: id.into(),
            hyp: "a b".into(),
        }
    }

    fn refs(id: &str) -> RefLine {
        RefLine {
            id: id.into(),
            refs: vec!["a b".into()],
        }
    }

    #[test]
    fn join_reports_missing_sides() {
        let err = join_by_id(vec![hyp("x"), hyp("y")], vec![refs("x")]).unwrap_err();
        assert!(err.to_string().contains('y'));
        let err = join_by_id(vec![hyp("x")], vec![refs("x"), refs("z")]).unwrap_err();
        assert!(err.to_string().contains('z'));
        assert_eq!(join_by_id(vec![hyp("x")], vec![refs("x")]).unwrap().len(), 1);
    }

    #[test]
    fn config_paths_are_anchored_to_the_file() {
        let mut c = RunConfig::default();
        c.data.features = Some("f.jsonl".into());
        c.data.ner = Some("/abs/n.jsonl".into());
        let c = anchor_paths(c, Path::new("dir/config.toml"));
        assert_eq!(c.data.features, Some(PathBuf::from("dir/f.jsonl")));
        assert_eq!(c.data.ner, Some(PathBuf::from("/abs/n.jsonl")));
    }
}
