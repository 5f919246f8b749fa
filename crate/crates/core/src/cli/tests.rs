use std::fs;
use std::path::PathBuf;

use super::*;
use crate::training::TrainConfig;

fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p
}

fn flags(seed: Option<u64>) -> FileConfig {
    FileConfig {
        seed,
        ..FileConfig::default()
    }
}

#[test]
fn flags_override_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(&dir, "run.toml", "lr = 1e-4\nepochs = 7\nseed = 3\n");
    let mut f = flags(None);
    f.learning_rate = Some(1e-3);
    let cfg = RunConfig::resolve("train", f, Some(file), TrainConfig::default()).unwrap();
    assert_eq!(cfg.train.learning_rate, 1e-3);
    assert_eq!(cfg.train.epochs, 7);
    assert_eq!(cfg.seed, 3);
    assert_eq!(cfg.train.seed, 3);
}

#[test]
fn empty_file_with_flags_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let file = write(&dir, "empty.toml", "");
    let mut f = flags(Some(1));
    f.mode = Some("b".into());
    f.combine = Some("add".into());
    f.scale = Some("desk".into());
    let cfg = RunConfig::resolve("train", f, Some(file), TrainConfig::default()).unwrap();
    assert_eq!(cfg.mode, Some(crate::model::CombinerMode::B));
    assert_eq!(cfg.combine, crate::model::CombineOp::Add);
    assert_eq!(cfg.scale, Scale::Desk);
    assert_eq!(cfg.out, PathBuf::from("runs/train"));
}

#[test]
fn malformed_files_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("dup.toml", "seed = 1\nseed = 2\n"),
        ("type.toml", "seed = \"one\"\n"),
        ("unknown.toml", "seed = 1\nlearning_speed = 2.0\n"),
        ("badmode.toml", "seed = 1\nmode = \"z\"\n"),
        ("badlr.toml", "seed = 1\nlr = -1.0\n"),
    ] {
        let file = write(&dir, name, text);
        let err = RunConfig::resolve("train", flags(None), Some(file), TrainConfig::default()).unwrap_err();
        assert!(matches!(err, crate::Error::Validation(_)), "{name}: {err}");
        assert_eq!(exit_code(&err), EXIT_VALIDATION);
    }
}

#[test]
fn seed_and_paths_are_checked() {
    let err = RunConfig::resolve("train", flags(None), None, TrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains("seed"));
    let mut f = flags(Some(0));
    f.checkpoint = Some("missing.fcck".into());
    let err = RunConfig::resolve("eval-fcc", f, None, TrainConfig::default()).unwrap_err();
    assert!(err.to_string().contains("missing.fcck"));
}

#[test]
fn mode_c_requires_lemma_and_concept_tables() {
    let mut cfg = RunConfig::resolve("train", flags(Some(0)), None, TrainConfig::default()).unwrap();
    let err = cfg.require_tables(crate::model::CombinerMode::C).unwrap_err();
    assert!(err.to_string().contains("--embeddings-lemma and --embeddings-concept"));
    cfg.embeddings.lemma = Some("l.vec".into());
    cfg.embeddings.concept = Some("c.vec".into());
    assert!(cfg.require_tables(crate::model::CombinerMode::C).is_ok());
    assert!(cfg.require_tables(crate::model::CombinerMode::B).is_err());
}

#[test]
fn exit_codes_for_argument_problems() {
    assert_eq!(run(["fcc", "train", "--no-such-flag"]), EXIT_VALIDATION);
    assert_eq!(run(["fcc", "frobnicate"]), EXIT_VALIDATION);
    assert_eq!(run(["fcc", "--help"]), EXIT_OK);
    assert_eq!(run(["fcc", "eval-fcc", "--seed", "1", "--checkpoint", "missing.fcck"]), EXIT_VALIDATION);
    assert_eq!(run(["fcc", "gradcheck"]), EXIT_VALIDATION);
}

#[test]
fn gradcheck_passes() {
    assert_eq!(run(["fcc", "gradcheck", "--seed", "7"]), EXIT_OK);
}
