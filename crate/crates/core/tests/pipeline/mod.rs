//! The toy pipeline driven through the command line, and the measurements
//! taken from its outputs.

#![allow(dead_code)]

use std::error::Error as StdError;
use std::fs;
use std::path::{Path, PathBuf};

use idhider::backbones::{parse_face, ParserArch};
use idhider::cli::commands::{load_stage, open_corpus, select_split, EvalReport, PARSER_FILE, REPORT_FILE};
use idhider::cli::manifest::{list_files, RunManifest, RUN_MANIFEST_FILE};
use idhider::cli::{run_args, Env, Split, Stage};
use idhider::corpus::CorpusConfig;
use idhider::metrics::{parsing_similarity, ssim};
use idhider::Image;

pub type Res<T> = Result<T, Box<dyn StdError>>;

pub const ALPHAS: [f64; 7] = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0];
pub const STAGES: [&str; 6] = ["parser", "identity", "heldout", "generator", "mapper", "disennet"];

/// Toy schedule for the acceptance pipeline, about 35 minutes of training on
/// one core. The mapper runs at a higher learning rate than its default
/// and the attribute term is down-weighted, because the encoder's feature
/// scale is unconstrained at this size and would otherwise drown the
/// identity term.
pub const CONFIG: &str = r#"{
  "parser": { "steps": 400 },
  "identity": { "steps": 400 },
  "heldout": { "steps": 800 },
  "generator": { "steps": 2400 },
  "mapper": { "steps": 1600, "learning_rate": 5e-4 },
  "disennet": { "steps": 2000, "lambda_attr": 1.0 },
  "evaluate": { "same_pairs": 200, "diff_pairs": 200 }
}
"#;

pub fn env() -> Env {
    Env {
        seed: None,
        source_date_epoch: Some("1700000000".into()),
    }
}

pub fn cli(args: &[String]) -> Res<RunManifest> {
    run_args(args, &env()).map_err(|(code, msg)| format!("`idhider {}` exited {code}: {msg}", args.join(" ")).into())
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn args(parts: &[&str]) -> Vec<String> {
    parts.iter().map(|p| p.to_string()).collect()
}

pub struct Pipeline {
    pub base: PathBuf,
    pub corpus: PathBuf,
    pub workdir: PathBuf,
    pub protected: PathBuf,
    pub eval: PathBuf,
}

impl Pipeline {
    pub fn at(base: &Path, corpus: PathBuf) -> Self {
        Self {
            base: base.to_path_buf(),
            corpus,
            workdir: base.join("work"),
            protected: base.join("protected"),
            eval: base.join("eval"),
        }
    }

    pub fn alpha_dir(&self, alpha: f64) -> PathBuf {
        self.protected.join(format!("alpha-{alpha:.1}"))
    }
}

/// synth → six training stages → protect at every α → evaluate at α = 1.
pub fn run(base: &Path, config: &Path, seed: u64, progress: &mut dyn FnMut(&str)) -> Res<Pipeline> {
    let (cfg, seed) = (s(config), seed.to_string());
    let common = ["--config", cfg.as_str(), "--seed", seed.as_str()];
    let mut a = args(&["synth", "--out", &s(base)]);
    a.extend(args(&common));
    let corpus = cli(&a)?.output_dir;
    let p = Pipeline::at(base, corpus);
    for stage in STAGES {
        let t = std::time::Instant::now();
        let mut a = args(&["train", stage, "--corpus", &s(&p.corpus), "--workdir", &s(&p.workdir)]);
        a.extend(args(&common));
        cli(&a)?;
        progress(&format!("trained {stage} in {:.0}s", t.elapsed().as_secs_f64()));
    }
    for alpha in ALPHAS {
        let mut a = args(&[
            "protect",
            "--workdir",
            &s(&p.workdir),
            "--input",
            &s(&p.corpus),
            "--out",
            &s(&p.alpha_dir(alpha)),
            "--split",
            "holdout",
            "--alpha",
            &alpha.to_string(),
        ]);
        a.extend(args(&common));
        cli(&a)?;
    }
    let mut a = args(&[
        "evaluate",
        "--workdir",
        &s(&p.workdir),
        "--original",
        &s(&p.corpus),
        "--protected",
        &s(&p.alpha_dir(1.0)),
        "--out",
        &s(&p.eval),
    ]);
    a.extend(args(&common));
    cli(&a)?;
    progress("protected and evaluated");
    Ok(p)
}

/// Retrains only the DisenNet stage with `overrides`, reusing every other
/// stage of `p`, and protects the held-out split at α = 1.
pub fn retrain_disennet(p: &Pipeline, base: &Path, config: &Path, seed: u64, overrides: &[&str]) -> Res<Pipeline> {
    let q = Pipeline::at(base, p.corpus.clone());
    fs::create_dir_all(&q.workdir)?;
    for stage in STAGES.iter().filter(|s| **s != "disennet") {
        let pointer = format!("{stage}.json");
        fs::copy(p.workdir.join(&pointer), q.workdir.join(&pointer))?;
        let ptr: serde_json::Value = serde_json::from_slice(&fs::read(p.workdir.join(&pointer))?)?;
        let dir = ptr["dir"].as_str().ok_or("pointer without dir")?;
        fs::create_dir_all(q.workdir.join(dir))?;
        for f in list_files(&p.workdir.join(dir))? {
            fs::copy(p.workdir.join(dir).join(&f), q.workdir.join(dir).join(&f))?;
        }
    }
    let (cfg, seed) = (s(config), seed.to_string());
    let mut a = args(&["train", "disennet", "--corpus", &s(&q.corpus), "--workdir", &s(&q.workdir)]);
    a.extend(args(&["--config", &cfg, "--seed", &seed]));
    for o in overrides {
        a.extend(args(&["--set", o]));
    }
    cli(&a)?;
    let mut a = args(&[
        "protect",
        "--workdir",
        &s(&q.workdir),
        "--input",
        &s(&q.corpus),
        "--out",
        &s(&q.alpha_dir(1.0)),
        "--split",
        "holdout",
    ]);
    a.extend(args(&["--config", &cfg, "--seed", &seed]));
    cli(&a)?;
    Ok(q)
}

#[derive(Debug, Clone)]
pub struct Metrics {
    /// Mean PA of the parser's map of X_v against its map of X_i.
    pub pa_virtual: f64,
    /// Mean SSIM(X_i, X_p) per α, in `ALPHAS` order.
    pub ssim_by_alpha: Vec<f64>,
    /// Mean SSIM(X_p, X_v) at α = 1.
    pub ssim_pv: f64,
    /// Mean cosine between E_id(X_i) and E_id(X_p) at α = 1.
    pub id_similarity: f64,
    pub report: Option<EvalReport>,
}

impl Metrics {
    pub fn auc(&self, embedder: &str, domain: &str) -> Option<f64> {
        self.report.as_ref()?.verification.iter().find_map(|v| {
            (v.embedder == embedder && v.domain.as_str() == domain).then_some(v.auc)
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Measures a pipeline from its files on disk. Only α directories that exist
/// enter `ssim_by_alpha`.
pub fn measure(p: &Pipeline) -> Res<Metrics> {
    let corpus = open_corpus(&p.corpus, &CorpusConfig::default())?;
    let idx = select_split(&corpus.records, corpus.config.holdout_per_identity, Split::Holdout);
    let (parser, _) = load_stage::<ParserArch>(&p.workdir, Stage::Parser, PARSER_FILE)?;
    let n_cls = parser.arch().n_classes;
    let load = |dir: &Path, i: usize| Image::load_png(&dir.join(&corpus.entries[i].image));
    let full = p.alpha_dir(1.0);
    let virt = full.join("virtual");

    let mut pa = Vec::new();
    let mut ssim_pv = Vec::new();
    for &i in &idx {
        let x_i = &corpus.records[i].image;
        let x_v = load(&virt, i)?;
        let x_p = load(&full, i)?;
        let (_, mi) = parse_face(&parser, x_i)?;
        let (_, mv) = parse_face(&parser, &x_v)?;
        pa.push(parsing_similarity(&mi, &mv, n_cls)?.pa);
        ssim_pv.push(ssim(&x_p, &x_v)?);
    }
    let mut ssim_by_alpha = Vec::new();
    for alpha in ALPHAS {
        let dir = p.alpha_dir(alpha);
        if !dir.exists() {
            continue;
        }
        let v = idx
            .iter()
            .map(|&i| ssim(&corpus.records[i].image, &load(&dir, i)?))
            .collect::<idhider::Result<Vec<_>>>()?;
        ssim_by_alpha.push(mean(&v));
    }
    let m = RunManifest::load(&full.join(RUN_MANIFEST_FILE))?;
    let id_similarity = m.metrics["mean_id_similarity"].as_f64().ok_or("protect manifest lacks id similarity")?;
    let report_path = p.eval.join(REPORT_FILE);
    let report = if report_path.exists() {
        Some(serde_json::from_slice(&fs::read(&report_path)?)?)
    } else {
        None
    };
    Ok(Metrics {
        pa_virtual: mean(&pa),
        ssim_by_alpha,
        ssim_pv: mean(&ssim_pv),
        id_similarity,
        report,
    })
}

/// First byte-level difference between two directory trees, if any.
pub fn tree_difference(a: &Path, b: &Path) -> Res<Option<String>> {
    let fa = list_files(a)?;
    let fb = list_files(b)?;
    if fa != fb {
        let only: Vec<_> = fa.iter().filter(|f| !fb.contains(f)).chain(fb.iter().filter(|f| !fa.contains(f))).take(3).collect();
        return Ok(Some(format!("file sets differ, e.g. {only:?}")));
    }
    for f in &fa {
        if fs::read(a.join(f))? != fs::read(b.join(f))? {
            return Ok(Some(format!("{} differs", f.display())));
        }
    }
    Ok(None)
}

pub fn count_files(dir: &Path) -> Res<usize> {
    Ok(list_files(dir)?.len())
}
