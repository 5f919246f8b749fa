//! One pipeline per subcommand.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::synth::{shapes_corpus, synthetic_tables, SynthConfig};
use crate::corpus::{load_manifest, Dataset, EmbeddingTable, PretrainedTables, TableKind, Vocab, RETRIEVAL_TEST_SIZE};
use crate::error::{io_err, Error, Result};
use crate::eval::{
    eval_bidirectional_retrieval, eval_transfer_classification, fcc_accuracy_report, TrunkSource,
};
use crate::gradsuite::run_suite;
use crate::inspect::{rank_features, specificity_all, text_heatmap, vision_heatmap};
use crate::model::{export_features, load_checkpoint, save_checkpoint, Branch, CombinerConfig, CombinerMode, FccModel};
use crate::training::{train_fcc_folds, TrainConfig};

use super::config::RunConfig;
use super::{parse_branch, parse_scorer, parse_trunk, Command, Common};

fn resolve(command: &str, common: &Common, defaults: TrainConfig) -> Result<RunConfig> {
    RunConfig::resolve(command, common.flags(), common.config.clone(), defaults)
}

/// Creates the output directory and echoes the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let path = cfg.out.join("config.json");
    fs::write(&path, cfg.to_json()? + "\n").map_err(io_err(&path))?;
    if let Some(src) = &cfg.config_file {
        let copy = cfg.out.join("config.source.toml");
        fs::copy(src, &copy).map_err(io_err(&copy))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn load_tables(cfg: &RunConfig, mode: CombinerMode) -> Result<PretrainedTables> {
    cfg.require_tables(mode)?;
    let load = |p: &Option<std::path::PathBuf>, kind| p.as_ref().map(|p| EmbeddingTable::load(p, kind)).transpose();
    let mut tables = PretrainedTables::default();
    for kind in mode.pretrained_sources() {
        match kind {
            TableKind::Word => tables.word = load(&cfg.embeddings.word, TableKind::Word)?,
            TableKind::Lemma => tables.lemma = load(&cfg.embeddings.lemma, TableKind::Lemma)?,
            TableKind::Concept => tables.concept = load(&cfg.embeddings.concept, TableKind::Concept)?,
        }
    }
    Ok(tables)
}

/// The checkpoint's model with its pretrained tables attached.
fn load_model(cfg: &RunConfig) -> Result<FccModel> {
    let path = cfg.require_checkpoint()?;
    let mut model = load_checkpoint(path, cfg.mode)?;
    let tables = load_tables(cfg, model.combiner.mode)?;
    model.attach_tables(tables)?;
    Ok(model)
}

fn load_data(cfg: &RunConfig, model: &FccModel, images: bool) -> Result<Dataset> {
    let records = load_manifest(cfg.require_manifest()?)?;
    Dataset::load(records, &model.vocab, model.tables(), model.arch.image_size, model.arch.seq_len, images)
}

/// A fresh model whose vocabulary is built from the manifest.
fn fresh_model(cfg: &RunConfig) -> Result<(FccModel, Dataset)> {
    let mode = cfg.mode.unwrap_or(CombinerMode::A);
    let tables = load_tables(cfg, mode)?;
    let records = load_manifest(cfg.require_manifest()?)?;
    let vocab = Vocab::build(&records, None, 1);
    let arch = cfg.scale.arch();
    let model = FccModel::new(arch, CombinerConfig::new(mode, cfg.combine), vocab, tables, cfg.seed)?;
    let data = Dataset::load(records, &model.vocab, model.tables(), model.arch.image_size, model.arch.seq_len, true)?;
    Ok((model, data))
}

pub(super) fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(c) => train(&resolve("train", &c, TrainConfig::default())?),
        Command::EvalFcc(c) => eval_fcc(&resolve("eval-fcc", &c, TrainConfig::default())?),
        Command::Retrieve { common, scorer, ks } => {
            let scorer = parse_scorer(&scorer)?;
            retrieve(&resolve("retrieve", &common, TrainConfig::default())?, scorer, &ks)
        }
        Command::Classify { common, branch, source, trunk } => {
            let branch = parse_branch(&branch)?;
            let trunk = parse_trunk(&trunk)?;
            let defaults = match branch {
                Branch::Vision => TrainConfig::figure_classifier(),
                Branch::Language => TrainConfig::caption_classifier(),
            };
            classify(&resolve("classify", &common, defaults)?, branch, &source, trunk)
        }
        Command::Inspect { common, branch, top_k, render } => {
            let branch = parse_branch(&branch)?;
            inspect(&resolve("inspect", &common, TrainConfig::default())?, branch, top_k, render)
        }
        Command::ExportFeatures { common, branch } => {
            let branch = parse_branch(&branch)?;
            export(&resolve("export-features", &common, TrainConfig::default())?, branch)
        }
        Command::Gradcheck(c) => gradcheck(&c, &resolve("gradcheck", &c, TrainConfig::default())?),
        Command::Synth { common, records, shapes, colors, image_size } => {
            let cfg = resolve("synth", &common, TrainConfig::default())?;
            synth(&cfg, SynthConfig { records, shapes, colors, image_size, seed: cfg.seed })
        }
    }
}

fn train(cfg: &RunConfig) -> Result<()> {
    let mode = cfg.mode.unwrap_or(CombinerMode::A);
    cfg.require_tables(mode)?;
    cfg.require_manifest()?;
    prepare_out(cfg)?;
    let (template, data) = fresh_model(cfg)?;
    log::info!(
        "training on {} records, {} folds, {} epochs, vocabulary {}",
        data.len(),
        cfg.train.folds,
        cfg.train.epochs,
        template.vocab.len()
    );
    let (models, log) = match train_fcc_folds(&data, &template, &cfg.train) {
        Ok(r) => r,
        Err(Error::Diverged { epoch, cause, last_good }) => {
            if let Some(m) = last_good {
                let path = cfg.out.join("last_good.fcck");
                save_checkpoint(&m, &path)?;
                log::error!("training diverged; last good parameters saved to {}", path.display());
            }
            return Err(Error::Diverged { epoch, cause, last_good: None });
        }
        Err(e) => return Err(e),
    };
    for (k, m) in models.iter().enumerate() {
        save_checkpoint(m, cfg.out.join(format!("fold{k}.fcck")))?;
    }
    save_checkpoint(&models[log.best_fold], cfg.out.join("model.fcck"))?;
    log.write_jsonl(cfg.out.join("runlog.jsonl"))?;
    println!(
        "mean validation accuracy {:.4}; best fold {} saved to {}",
        log.mean_val_accuracy.unwrap_or(f64::NAN),
        log.best_fold,
        cfg.out.join("model.fcck").display()
    );
    Ok(())
}

fn eval_fcc(cfg: &RunConfig) -> Result<()> {
    cfg.require_manifest()?;
    let model = load_model(cfg)?;
    prepare_out(cfg)?;
    let data = load_data(cfg, &model, true)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut report = fcc_accuracy_report(&model, &data, &rows, cfg.seed)?;
    report.checkpoint = cfg.checkpoint.as_ref().map(|p| p.display().to_string());
    report.write(cfg.out.join("eval_fcc.json"))?;
    println!("accuracy {:.4} over {} pairs", report.get("accuracy").unwrap_or(f64::NAN), report.get("pairs").unwrap_or(0.0));
    Ok(())
}

fn retrieve(cfg: &RunConfig, scorer: crate::eval::Scorer, ks: &[usize]) -> Result<()> {
    cfg.require_manifest()?;
    let model = load_model(cfg)?;
    prepare_out(cfg)?;
    let data = load_data(cfg, &model, true)?;
    let mut rows: Vec<usize> = (0..data.len())
        .filter(|&i| !model.training_ids.contains(&data.records[i].id))
        .collect();
    if rows.len() < data.len() {
        log::warn!("skipping {} records the model was trained on", data.len() - rows.len());
    }
    if rows.len() > RETRIEVAL_TEST_SIZE {
        rows.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
        rows.truncate(RETRIEVAL_TEST_SIZE);
        rows.sort_unstable();
    }
    let r = eval_bidirectional_retrieval(&model, &data, &rows, ks, scorer)?;
    let mut report = r.report(format!("{} test records, {scorer:?} scorer", rows.len()));
    report.checkpoint = cfg.checkpoint.as_ref().map(|p| p.display().to_string());
    report.write(cfg.out.join("retrieval.json"))?;
    let ids: Vec<String> = rows.iter().map(|&i| data.records[i].id.clone()).collect();
    r.write_ranks_csv(&ids, cfg.out.join("ranks.csv"))?;
    for (i, k) in r.ks.iter().enumerate() {
        println!(
            "R@{k}: caption→figure {:.4}, figure→caption {:.4}",
            r.caption_to_figure[i], r.figure_to_caption[i]
        );
    }
    Ok(())
}

fn classify(cfg: &RunConfig, branch: Branch, source: &str, trunk: crate::eval::TrunkMode) -> Result<()> {
    cfg.require_manifest()?;
    let (template, data) = match (source, &cfg.checkpoint) {
        ("fcc", None) => return Err(Error::Validation("--source fcc needs --checkpoint".into())),
        (_, Some(_)) => {
            let model = load_model(cfg)?;
            let data = load_data(cfg, &model, source != "external")?;
            (model, data)
        }
        (_, None) => fresh_model(cfg)?,
    };
    let source = match source {
        "fcc" => TrunkSource::Fcc(&template),
        "random" => TrunkSource::Random,
        "external" => TrunkSource::External,
        other => return Err(Error::Validation(format!("unknown trunk source {other:?} (expected fcc, random or external)"))),
    };
    prepare_out(cfg)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut report = eval_transfer_classification(&template, source, trunk, branch, &data, &rows, &cfg.train)?;
    report.checkpoint = cfg.checkpoint.as_ref().map(|p| p.display().to_string());
    report.write(cfg.out.join("classify.json"))?;
    println!("{}: mean accuracy {:.4}", report.task, report.get("accuracy").unwrap_or(f64::NAN));
    Ok(())
}

fn inspect(cfg: &RunConfig, branch: Branch, top_k: usize, render: usize) -> Result<()> {
    cfg.require_manifest()?;
    let model = load_model(cfg)?;
    prepare_out(cfg)?;
    let data = load_data(cfg, &model, true)?;
    let rows: Vec<usize> = (0..data.len()).collect();
    let mut profiles = rank_features(&model, &data, &rows, branch, top_k)?;
    if branch == Branch::Vision && data.records.iter().any(|r| r.concepts.is_some()) {
        let spec = specificity_all(&model, &data, &rows, top_k)?;
        for p in &mut profiles {
            p.specificity = Some(spec[p.feature]);
        }
    }
    let json = serde_json::to_string_pretty(&profiles).map_err(|e| Error::Format(e.to_string()))?;
    write_text(&cfg.out.join("features.json"), &(json + "\n"))?;
    let dir = cfg.out.join("heatmaps");
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for p in profiles.iter().take(render) {
        let Some(id) = p.top_samples.first() else { continue };
        let row = data.records.iter().position(|r| &r.id == id).expect("top sample comes from the data");
        let stem = format!("feature{:03}_{id}", p.feature);
        match branch {
            Branch::Vision => {
                let figure = &data.images.as_ref().expect("figures were loaded")[row];
                vision_heatmap(&model, figure, p.feature)?.write(figure, &dir, &stem)?;
            }
            Branch::Language => text_heatmap(&model, &data, row, &[p.feature])?.write(&dir, &stem)?,
        }
    }
    println!("{} features ranked; heatmaps in {}", profiles.len(), dir.display());
    Ok(())
}

fn export(cfg: &RunConfig, branch: Branch) -> Result<()> {
    cfg.require_manifest()?;
    let model = load_model(cfg)?;
    prepare_out(cfg)?;
    let data = load_data(cfg, &model, branch == Branch::Vision)?;
    let name = match branch {
        Branch::Vision => "vision_features.vec",
        Branch::Language => "text_features.vec",
    };
    let table = export_features(&model, &data, branch, cfg.out.join(name))?;
    println!("{} feature vectors of dimension {} written to {}", table.len(), table.dim(), cfg.out.join(name).display());
    Ok(())
}

fn gradcheck(common: &Common, cfg: &RunConfig) -> Result<()> {
    let mut entries = run_suite::<f32>(cfg.seed)?;
    entries.extend(run_suite::<f64>(cfg.seed)?);
    let failed: Vec<String> = entries
        .iter()
        .filter(|e| !e.passed())
        .map(|e| format!("{} ({}, max relative error {:.3e})", e.check, e.report.dtype, e.report.max_rel_error()))
        .collect();
    if common.out.is_some() || common.config.is_some() {
        prepare_out(cfg)?;
        let json = serde_json::to_string_pretty(&entries).map_err(|e| Error::Format(e.to_string()))?;
        write_text(&cfg.out.join("gradcheck.json"), &(json + "\n"))?;
    }
    if failed.is_empty() {
        println!("gradcheck passed: {} checks, seed {}", entries.len(), cfg.seed);
        Ok(())
    } else {
        Err(Error::Contract(format!("gradient checks failed: {}", failed.join("; "))))
    }
}

fn synth(cfg: &RunConfig, config: SynthConfig) -> Result<()> {
    let corpus = shapes_corpus(&config)?;
    prepare_out(cfg)?;
    corpus.write(&cfg.out)?;
    let mode = cfg.mode.unwrap_or(CombinerMode::C);
    let dim = CombinerConfig::new(mode, cfg.combine).sub_dim(cfg.scale.arch().embed_dim)?;
    let tables = synthetic_tables(&corpus.records, dim, cfg.seed)?;
    for (table, name) in [(&tables.word, "word.vec"), (&tables.lemma, "lemma.vec"), (&tables.concept, "concept.vec")] {
        if let Some(t) = table {
            t.write(cfg.out.join(name))?;
        }
    }
    println!(
        "{} records and {dim}-dimensional tables written to {}",
        corpus.records.len(),
        cfg.out.display()
    );
    Ok(())
}
