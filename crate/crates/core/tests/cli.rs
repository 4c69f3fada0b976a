mod pipeline;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use idhider::backbones::{Component, ParserArch};
use idhider::cli::commands::{load_stage, EvalReport, PARSER_FILE, REPORT_FILE};
use idhider::cli::config::{stage_seed, Config};
use idhider::cli::manifest::{RunManifest, RUN_MANIFEST_FILE};
use idhider::cli::{run_args, Env, Stage};
use idhider::corpus::{ManifestEntry, MANIFEST_FILE};
use idhider::Image;
use pipeline::{env, tree_difference};

const TINY: [&str; 6] = [
    "--set",
    "corpus.identities=4",
    "--set",
    "corpus.per_identity=4",
    "--set",
    "corpus.holdout_per_identity=1",
];

fn run(args: &[&str]) -> Result<RunManifest, (i32, String)> {
    run_args(args, &env())
}

fn ok(args: &[&str]) -> RunManifest {
    run(args).unwrap_or_else(|(c, m)| panic!("exit {c}: {m}"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    corpus: PathBuf,
    workdir: PathBuf,
}

/// A tiny corpus with every stage trained for a couple of steps.
fn trained() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut a = vec!["synth", "--out", p(dir.path()), "--seed", "3"];
        a.extend(TINY);
        let corpus = ok(&a).output_dir;
        let workdir = dir.path().join("work");
        for stage in pipeline::STAGES {
            let mut a = vec!["train", stage, "--corpus", p(&corpus), "--workdir", p(&workdir), "--steps", "2"];
            a.extend(["--seed", "3", "--set", "mapper.mean_latent_samples=64"]);
            ok(&a);
        }
        Fixture {
            _dir: dir,
            corpus,
            workdir,
        }
    })
}

#[test]
fn synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let args = ["synth", "--out", p(&out), "--n", "10", "--seed", "7"];
    let first = ok(&args).output_dir;
    let kept = dir.path().join("kept");
    fs::rename(&out, &kept).unwrap();
    let second = ok(&args).output_dir;
    assert_eq!(first, second);
    assert_eq!(tree_difference(&kept.join(first.file_name().unwrap()), &second).unwrap(), None);
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(second.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(entries.len(), 10);
}

#[test]
fn synth_seed_comes_from_env_when_no_flag() {
    let dir = tempfile::tempdir().unwrap();
    let by_flag = ok(&["synth", "--out", p(dir.path()), "--n", "3", "--seed", "9"]);
    let by_env = run_args(
        &["synth", "--out", p(dir.path()), "--n", "3"],
        &Env {
            seed: Some("9".into()),
            ..env()
        },
    )
    .unwrap();
    assert_eq!(by_flag.seed, 9);
    assert_eq!(by_env.seed, 9);
    assert_eq!(by_flag.output_dir, by_env.output_dir);
}

#[test]
fn synth_zero_records_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let m = ok(&["synth", "--out", p(dir.path()), "--n", "0"]);
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(m.output_dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert!(entries.is_empty());
    assert_eq!(m.metrics["records"], 0);
}

#[test]
fn unknown_config_key_exits_2_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = run(&["synth", "--out", p(dir.path()), "--set", "mapper.lambda=3"]).unwrap_err();
    assert_eq!(code, 2);
    assert!(msg.contains("mapper.lambda"), "{msg}");
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"disennet": {"steps": 1, "lr": 0.1}}"#).unwrap();
    let (code, msg) = run(&["synth", "--out", p(dir.path()), "--config", p(&cfg)]).unwrap_err();
    assert_eq!(code, 2);
    assert!(msg.contains("disennet.lr"), "{msg}");
    let (code, _) = run(&["synth"]).unwrap_err();
    assert_eq!(code, 2);
}

#[test]
fn manifest_records_config_hash_and_inputs() {
    let f = trained();
    let m = RunManifest::load(&f.corpus.join(RUN_MANIFEST_FILE)).unwrap();
    let cfg: Config = serde_json::from_value(m.config.clone()).unwrap();
    assert_eq!(m.config_hash, cfg.hash().unwrap());
    assert_eq!(cfg.corpus.identities, 4);
    assert!(m.artifacts.iter().any(|a| a.path == MANIFEST_FILE));

    let ptr: serde_json::Value = serde_json::from_slice(&fs::read(f.workdir.join("mapper.json")).unwrap()).unwrap();
    let dir = f.workdir.join(ptr["dir"].as_str().unwrap());
    let m = RunManifest::load(&dir.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(m.command, "train");
    // Corpus plus the generator and parser checkpoints.
    assert_eq!(m.inputs.len(), 3);
    assert!(m.args.contains(&"mapper".to_string()));
    assert!(dir.join("log.csv").exists());
}

#[test]
fn missing_prerequisite_exits_3_naming_stage() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = run(&["train", "mapper", "--corpus", p(&f.corpus), "--workdir", p(dir.path())]).unwrap_err();
    assert_eq!(code, 3);
    assert!(msg.contains("`generator`"), "{msg}");
    let (code, msg) = run(&[
        "protect",
        "--workdir",
        p(dir.path()),
        "--input",
        p(&f.corpus),
        "--out",
        p(&dir.path().join("o")),
    ])
    .unwrap_err();
    assert_eq!(code, 3, "{msg}");
}

#[test]
fn zero_steps_saves_the_initialization() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    ok(&["train", "parser", "--corpus", p(&f.corpus), "--workdir", p(dir.path()), "--steps", "0", "--seed", "5"]);
    let (trained, _) = load_stage::<ParserArch>(dir.path(), Stage::Parser, PARSER_FILE).unwrap();
    let init = Component::init(trained.arch().clone(), stage_seed(5, "parser")).unwrap();
    assert_eq!(trained.store().snapshot().unwrap(), init.store().snapshot().unwrap());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path().join("w");
    ok(&["train", "parser", "--corpus", p(&f.corpus), "--workdir", p(&w), "--steps", "0"]);
    let ptr: serde_json::Value = serde_json::from_slice(&fs::read(w.join("parser.json")).unwrap()).unwrap();
    let ckpt = w.join(ptr["dir"].as_str().unwrap()).join(PARSER_FILE);
    let mut bytes = fs::read(&ckpt).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    fs::write(&ckpt, bytes).unwrap();
    assert!(load_stage::<ParserArch>(&w, Stage::Parser, PARSER_FILE).is_err());
}

#[test]
fn non_finite_training_exits_4() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let (code, msg) = run(&[
        "train",
        "identity",
        "--corpus",
        p(&f.corpus),
        "--workdir",
        p(dir.path()),
        "--steps",
        "20",
        "--set",
        "identity.learning_rate=1e30",
    ])
    .unwrap_err();
    assert_eq!(code, 4, "{msg}");
}

fn protect(f: &Fixture, out: &Path, extra: &[&str]) -> RunManifest {
    let mut a = vec!["protect", "--workdir", p(&f.workdir), "--input", p(&f.corpus), "--out", p(out), "--seed", "7"];
    a.extend(extra);
    ok(&a)
}

#[test]
fn protect_defaults_to_full_transfer_and_writes_records() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    let m = protect(f, &out, &["--split", "holdout"]);
    assert_eq!(m.metrics["alpha"], 1.0);
    assert_eq!(m.metrics["outputs"], 4);
    let rec: serde_json::Value = serde_json::from_slice(&fs::read(out.join("images/00012.json")).unwrap()).unwrap();
    assert_eq!(rec["alpha"], 1.0);
    assert!(rec["id_similarity"].as_f64().unwrap().abs() <= 1.0 + 1e-9);
    assert!(out.join("images/00012.png").exists());
    assert!(out.join("virtual/images/00012.png").exists());
}

#[test]
fn diverse_outputs_are_reproducible() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let single = dir.path().join("one.png");
    fs::copy(f.corpus.join("images/00000.png"), &single).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let m = ok(&[
            "protect",
            "--workdir",
            p(&f.workdir),
            "--input",
            p(&single),
            "--out",
            p(out),
            "--diverse",
            "4",
            "--seed",
            "7",
        ]);
        assert_eq!(m.metrics["outputs"], 4);
    }
    let pngs = |d: &Path| {
        (0..4)
            .map(|k| fs::read(d.join(format!("one_{k}.png"))).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(pngs(&a), pngs(&b));
    let v = pngs(&a);
    assert!(v.windows(2).any(|w| w[0] != w[1]), "variants should differ");
}

#[test]
fn keep_background_is_recorded() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    protect(f, &out, &["--split", "holdout", "--keep-background"]);
    let rec: serde_json::Value = serde_json::from_slice(&fs::read(out.join("images/00012.json")).unwrap()).unwrap();
    assert_eq!(rec["keep_background"], true);
}

#[test]
fn unreadable_inputs_fail_per_file() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in");
    fs::create_dir_all(&input).unwrap();
    fs::write(input.join("broken.png"), b"not a png").unwrap();
    let args = |out: &Path| {
        vec![
            "protect".to_string(),
            "--workdir".into(),
            p(&f.workdir).into(),
            "--input".into(),
            p(&input).into(),
            "--out".into(),
            p(out).into(),
        ]
    };
    let (code, msg) = run_args(&args(&dir.path().join("o1")), &env()).unwrap_err();
    assert_ne!(code, 0);
    assert!(msg.contains("none of the 1 inputs"), "{msg}");

    fs::copy(f.corpus.join("images/00000.png"), input.join("good.png")).unwrap();
    let m = run_args(&args(&dir.path().join("o2")), &env()).unwrap();
    assert_eq!(m.metrics["outputs"], 1);
    assert_eq!(m.metrics["failures"].as_array().unwrap().len(), 1);
    assert!(dir.path().join("o2/good.png").exists());
}

fn evaluate(f: &Fixture, protected: &Path, out: &Path, extra: &[&str]) -> Result<RunManifest, (i32, String)> {
    let mut a = vec![
        "evaluate",
        "--workdir",
        p(&f.workdir),
        "--original",
        p(&f.corpus),
        "--protected",
        p(protected),
        "--out",
        p(out),
        "--split",
        "all",
        "--set",
        "evaluate.same_pairs=10",
        "--set",
        "evaluate.diff_pairs=10",
    ];
    a.extend(extra);
    run(&a)
}

fn report(dir: &Path) -> EvalReport {
    serde_json::from_slice(&fs::read(dir.join(REPORT_FILE)).unwrap()).unwrap()
}

#[test]
fn evaluating_a_corpus_against_itself_is_perfect() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    evaluate(f, &f.corpus, dir.path(), &["--domains", "orig"]).unwrap();
    let r = report(dir.path());
    let sim = r.similarity.unwrap();
    assert!((sim.ssim - 1.0).abs() < 1e-9);
    assert_eq!((sim.mae, sim.rmse, sim.lpips_proxy), (0.0, 0.0, 0.0));
    assert_eq!(r.parsing.unwrap().pa, 1.0);
}

#[test]
fn adr_without_protected_images_is_rejected() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    let (code, msg) = evaluate(f, &empty, &dir.path().join("e"), &["--domains", "adr"]).unwrap_err();
    assert_eq!(code, 1);
    assert!(msg.contains("adr"), "{msg}");
}

#[test]
fn full_report_has_every_metric_and_roc_file() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let prot = dir.path().join("p");
    protect(f, &prot, &[]);
    let out = dir.path().join("e");
    evaluate(f, &prot, &out, &[]).unwrap();
    let raw: serde_json::Value = serde_json::from_slice(&fs::read(out.join(REPORT_FILE)).unwrap()).unwrap();
    for key in ["lpips_proxy", "ssim", "mae", "rmse"] {
        assert!(raw["similarity"][key].is_number(), "missing {key}");
    }
    for key in ["pa", "mpa", "miou", "fwiou"] {
        assert!(raw["parsing"][key].is_number(), "missing {key}");
    }
    let r = report(&out);
    assert_eq!(r.verification.len(), 6);
    for e in ["identity", "heldout"] {
        for d in ["orig", "adr", "xdr"] {
            let csv = fs::read_to_string(out.join(format!("roc/{e}_{d}.csv"))).unwrap();
            assert!(csv.starts_with("threshold,fpr,tpr\n"));
        }
    }
    let m = RunManifest::load(&out.join(RUN_MANIFEST_FILE)).unwrap();
    assert_eq!(m.metrics, raw);
    // Re-running gives the same report bytes.
    let again = dir.path().join("e2");
    evaluate(f, &prot, &again, &[]).unwrap();
    assert_eq!(fs::read(out.join(REPORT_FILE)).unwrap(), fs::read(again.join(REPORT_FILE)).unwrap());
}

#[test]
fn protected_png_round_trips() {
    let f = trained();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("p");
    protect(f, &out, &["--split", "holdout"]);
    let img = Image::load_png(&out.join("images/00012.png")).unwrap();
    assert_eq!(img.dims(), (64, 64, 3));
    assert!(img.is_in_unit_range());
}
