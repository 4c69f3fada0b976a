use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::config::{resolve_seed, sha256_hex, stage_seed, Config};
use super::manifest::{self, digest_tree, file_sha256, tree_sha256, FileDigest, RunManifest, Timestamps};
use super::{fsutil, Common, Env, Split, Stage};
use crate::atm::{protect, train_disennet, ProtectionResult};
use crate::backbones::{
    embed_identity, Arch, AttributeArch, BackboneBundle, Component, DiscriminatorArch, FusionArch, IdentityArch,
    LatentCode, MapperArch, ParserArch, StyleArch,
};
use crate::background::replace_background;
use crate::corpus::{
    build_synthetic_corpus, load_corpus, sample_verification_pairs, split_holdout, write_corpus, CorpusConfig,
    Domain, FaceRecord, ManifestEntry, MANIFEST_FILE,
};
use crate::diversity::diverse_protect;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{
    mean_parsing_report, parsing_similarity, similarity_report, verification_roc, PairImages, ParsingReport,
    PerceptualNet, RocReport, SimilarityReport, PERCEPTUAL_SEED,
};
use crate::pretrain::{heldout_identity_arch, train_generator, train_identity, train_parser};
use crate::train::{TrainLog, SMOOTHING_WINDOW};
use crate::vfgm::{generate_virtual, generate_virtual_batch, mean_latent, train_mapper, GaussianSampler, Vfgm};

pub const CORPUS_INFO_FILE: &str = "corpus.json";
pub const REPORT_FILE: &str = "report.json";

struct Run<'a> {
    command: &'static str,
    args: &'a [String],
    env: &'a Env,
    started: u64,
    cfg: Config,
    seed: u64,
}

impl<'a> Run<'a> {
    fn start(command: &'static str, common: &Common, args: &'a [String], env: &'a Env, edit: impl FnOnce(&mut Config)) -> Result<Self> {
        let mut cfg = Config::load(common.config.as_deref(), &common.set)?;
        edit(&mut cfg);
        cfg.validate()?;
        let seed = resolve_seed(common.seed, &cfg, env.seed.as_deref())?;
        Ok(Self {
            command,
            args,
            env,
            started: env.now(),
            cfg,
            seed,
        })
    }

    fn finish(self, output_dir: &Path, inputs: Vec<FileDigest>, metrics: Value) -> Result<RunManifest> {
        let config_hash = self.cfg.hash()?;
        let m = RunManifest {
            run_id: manifest::run_id(self.command, &config_hash, self.seed, self.args, &inputs),
            command: self.command.to_string(),
            args: self.args.to_vec(),
            config: serde_json::to_value(&self.cfg)?,
            config_hash,
            seed: self.seed,
            inputs,
            output_dir: output_dir.to_path_buf(),
            artifacts: digest_tree(output_dir)?,
            metrics,
            timestamps: Timestamps {
                started: self.started,
                finished: self.env.now(),
            },
        };
        m.write()?;
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub config: CorpusConfig,
    pub seed: Option<u64>,
}

pub fn synth(common: &Common, out: &Path, n: Option<u32>, args: &[String], env: &Env) -> Result<RunManifest> {
    let run = Run::start("synth", common, args, env, |c| {
        if let Some(n) = n {
            c.corpus.count = Some(n);
        }
    })?;
    let corpus_seed = stage_seed(run.seed, "corpus");
    let info = CorpusInfo {
        config: run.cfg.corpus.clone(),
        seed: Some(corpus_seed),
    };
    let digest = sha256_hex(serde_json::to_string(&info)?.as_bytes());
    let dir = out.join(format!("corpus-{}", &digest[..16]));
    let records = build_synthetic_corpus(&info.config, corpus_seed)?;
    write_corpus(&dir, &records)?;
    fsutil::write_json(&dir.join(CORPUS_INFO_FILE), &info)?;
    let metrics = json!({
        "records": records.len(),
        "identities": records.iter().map(|r| r.identity_id).collect::<std::collections::BTreeSet<_>>().len(),
    });
    run.finish(&dir, Vec::new(), metrics)
}

pub struct OpenCorpus {
    pub config: CorpusConfig,
    pub entries: Vec<ManifestEntry>,
    pub records: Vec<FaceRecord>,
    pub digest: FileDigest,
}

pub fn open_corpus(dir: &Path, fallback: &CorpusConfig) -> Result<OpenCorpus> {
    let info_path = dir.join(CORPUS_INFO_FILE);
    let config = if info_path.exists() {
        serde_json::from_slice::<CorpusInfo>(&fs::read(&info_path)?)
            .map_err(|e| Error::record(&info_path, e.to_string()))?
            .config
    } else {
        fallback.clone()
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.exists() {
        return Err(Error::record(&manifest_path, "corpus manifest not found"));
    }
    let entries: Vec<ManifestEntry> = serde_json::from_slice(&fs::read(&manifest_path)?)
        .map_err(|e| Error::record(&manifest_path, e.to_string()))?;
    let records = load_corpus(dir, &manifest_path, config.labels.n_classes())?;
    let digest = FileDigest {
        path: dir.display().to_string(),
        sha256: tree_sha256(dir)?,
    };
    Ok(OpenCorpus {
        config,
        entries,
        records,
        digest,
    })
}

pub fn select_split(records: &[FaceRecord], holdout: u32, split: Split) -> Vec<usize> {
    let (train, test) = split_holdout(records, holdout);
    match split {
        Split::All => (0..records.len()).collect(),
        Split::Train => train,
        Split::Holdout => test,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePointer {
    pub stage: String,
    pub dir: String,
    pub files: Vec<FileDigest>,
}

pub fn pointer_path(workdir: &Path, stage: Stage) -> PathBuf {
    workdir.join(format!("{}.json", stage.as_str()))
}

pub fn read_pointer(workdir: &Path, stage: Stage) -> Result<StagePointer> {
    let path = pointer_path(workdir, stage);
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            stage: stage.as_str().to_string(),
            path,
        });
    }
    serde_json::from_slice(&fs::read(&path)?).map_err(|e| Error::record(&path, e.to_string()))
}

/// Loads one checkpoint of a finished stage, checking it against the pointer.
pub fn load_stage<A: Arch>(workdir: &Path, stage: Stage, file: &str) -> Result<(Component<A>, Value)> {
    let ptr = read_pointer(workdir, stage)?;
    let path = workdir.join(&ptr.dir).join(file);
    let want = ptr
        .files
        .iter()
        .find(|f| f.path == file)
        .ok_or_else(|| Error::Checkpoint(format!("stage `{}` has no `{file}`", stage.as_str())))?;
    if !path.exists() {
        return Err(Error::MissingPrerequisite {
            stage: stage.as_str().to_string(),
            path,
        });
    }
    if file_sha256(&path)? != want.sha256 {
        return Err(Error::Checkpoint(format!(
            "{} changed since stage `{}` recorded it",
            path.display(),
            stage.as_str()
        )));
    }
    Component::load(&path)
}

fn pointer_inputs(workdir: &Path, stages: &[Stage]) -> Result<Vec<FileDigest>> {
    let mut out = Vec::new();
    for &s in stages {
        let ptr = read_pointer(workdir, s)?;
        out.extend(ptr.files.into_iter().map(|f| FileDigest {
            path: format!("{}/{}", ptr.dir, f.path),
            sha256: f.sha256,
        }));
    }
    Ok(out)
}

fn log_summary(log: &TrainLog) -> Value {
    let mut m = serde_json::Map::new();
    m.insert("steps".into(), json!(log.len()));
    for c in &log.columns {
        if let Some((first, last)) = log.first_last_means(c, SMOOTHING_WINDOW) {
            m.insert(c.clone(), json!({ "first": first, "last": last }));
        }
    }
    Value::Object(m)
}

pub const PARSER_FILE: &str = "parser.idh";
pub const IDENTITY_FILE: &str = "identity.idh";
pub const HELDOUT_FILE: &str = "heldout.idh";
pub const GENERATOR_FILE: &str = "generator.idh";
pub const MAPPER_FILE: &str = "mapper.idh";
pub const ATTRIBUTE_FILE: &str = "attribute_encoder.idh";
pub const FUSION_FILE: &str = "fusion_generator.idh";
pub const DISCRIMINATOR_FILE: &str = "discriminators.idh";

fn stage_section(cfg: &Config, stage: Stage) -> Result<Value> {
    Ok(match stage {
        Stage::Parser => serde_json::to_value(&cfg.parser)?,
        Stage::Identity => serde_json::to_value(&cfg.identity)?,
        Stage::Heldout => serde_json::to_value(&cfg.heldout)?,
        Stage::Generator => serde_json::to_value(&cfg.generator)?,
        Stage::Mapper => serde_json::to_value(&cfg.mapper)?,
        Stage::Disennet => serde_json::to_value(&cfg.disennet)?,
    })
}

fn set_steps(cfg: &mut Config, stage: Stage, steps: usize) {
    match stage {
        Stage::Parser => cfg.parser.steps = steps,
        Stage::Identity => cfg.identity.steps = steps,
        Stage::Heldout => cfg.heldout.steps = steps,
        Stage::Generator => cfg.generator.steps = steps,
        Stage::Mapper => cfg.mapper.steps = steps,
        Stage::Disennet => cfg.disennet.steps = steps,
    }
}

fn identity_arch(base: IdentityArch, corpus: &CorpusConfig, n_ids: usize) -> IdentityArch {
    IdentityArch {
        image_size: corpus.image_size,
        n_identities: n_ids.max(1),
        ..base
    }
}

/// Trained state that later stages consume.
pub fn load_bundle(workdir: &Path) -> Result<BackboneBundle> {
    Ok(BackboneBundle {
        style_generator: load_stage(workdir, Stage::Generator, GENERATOR_FILE)?.0,
        mapper: load_stage(workdir, Stage::Mapper, MAPPER_FILE)?.0,
        face_parser: load_stage(workdir, Stage::Parser, PARSER_FILE)?.0,
        identity_encoder: load_stage(workdir, Stage::Identity, IDENTITY_FILE)?.0,
        attribute_encoder: load_stage(workdir, Stage::Disennet, ATTRIBUTE_FILE)?.0,
        fusion_generator: load_stage(workdir, Stage::Disennet, FUSION_FILE)?.0,
        discriminators: load_stage(workdir, Stage::Disennet, DISCRIMINATOR_FILE)?.0,
    })
}

pub fn train(
    common: &Common,
    stage: Stage,
    corpus_dir: &Path,
    workdir: &Path,
    steps: Option<usize>,
    args: &[String],
    env: &Env,
) -> Result<RunManifest> {
    let run = Run::start("train", common, args, env, |c| {
        if let Some(s) = steps {
            set_steps(c, stage, s);
        }
    })?;
    let cfg = &run.cfg;
    let seed = stage_seed(run.seed, stage.as_str());
    let corpus = open_corpus(corpus_dir, &cfg.corpus)?;
    let mut inputs = vec![corpus.digest.clone()];
    inputs.extend(pointer_inputs(workdir, stage.prerequisites())?);
    let key = json!({
        "stage": stage.as_str(),
        "section": stage_section(cfg, stage)?,
        "seed": seed,
        "inputs": inputs.iter().map(|i| &i.sha256).collect::<Vec<_>>(),
    });
    let dir_name = format!("{}-{}", stage.as_str(), &sha256_hex(key.to_string().as_bytes())[..16]);
    let out = workdir.join(&dir_name);
    fs::create_dir_all(&out)?;

    let train_idx = select_split(&corpus.records, corpus.config.holdout_per_identity, Split::Train);
    let records: Vec<&FaceRecord> = train_idx.iter().map(|&i| &corpus.records[i]).collect();
    let n_ids = records.iter().map(|r| r.identity_id).collect::<std::collections::BTreeSet<_>>().len();
    let meta = json!({ "seed": seed, "records": records.len() });
    let (log, files) = match stage {
        Stage::Parser => {
            let arch = ParserArch {
                n_classes: corpus.config.labels.n_classes(),
                image_size: corpus.config.image_size,
                ..ParserArch::default()
            };
            let mut c = Component::init(arch, seed)?;
            let log = train_parser(&mut c, &records, &cfg.parser, seed ^ 1)?;
            c.save(&out.join(PARSER_FILE), meta)?;
            (log, vec![PARSER_FILE])
        }
        Stage::Identity | Stage::Heldout => {
            let (base, section, file) = if stage == Stage::Identity {
                (IdentityArch::default(), &cfg.identity, IDENTITY_FILE)
            } else {
                (heldout_identity_arch(), &cfg.heldout, HELDOUT_FILE)
            };
            let mut c = Component::init(identity_arch(base, &corpus.config, n_ids), seed)?;
            let log = train_identity(&mut c, &records, section, seed ^ 1)?;
            c.save(&out.join(file), meta)?;
            (log, vec![file])
        }
        Stage::Generator => {
            let arch = StyleArch::default();
            if arch.image_size() != corpus.config.image_size {
                return Err(Error::shape(format!(
                    "generator renders {} px, corpus images are {} px",
                    arch.image_size(),
                    corpus.config.image_size
                )));
            }
            let mut c = Component::init(arch, seed)?;
            let log = train_generator(&mut c, &corpus.config.renderer(), &cfg.generator, seed ^ 1)?;
            c.save(&out.join(GENERATOR_FILE), meta)?;
            (log, vec![GENERATOR_FILE])
        }
        Stage::Mapper => {
            let (generator, _) = load_stage::<StyleArch>(workdir, Stage::Generator, GENERATOR_FILE)?;
            let (parser, _) = load_stage::<ParserArch>(workdir, Stage::Parser, PARSER_FILE)?;
            let arch = MapperArch {
                image_size: corpus.config.image_size,
                z_dim: generator.arch().z_dim,
                ..MapperArch::default()
            };
            let mut sampler = GaussianSampler::new(arch.z_dim, seed ^ 2);
            let mut vfgm = Vfgm {
                mapper: Component::init(arch, seed)?,
                z_mean: mean_latent(&mut sampler, cfg.mapper.mean_latent_samples)?,
            };
            let log = train_mapper(&mut vfgm, &generator, &parser, &records, &cfg.mapper, seed ^ 1)?;
            let meta = json!({ "seed": seed, "records": records.len(), "z_mean": vfgm.z_mean.data() });
            vfgm.mapper.save(&out.join(MAPPER_FILE), meta)?;
            (log, vec![MAPPER_FILE])
        }
        Stage::Disennet => {
            let identity: Component<IdentityArch> = load_stage(workdir, Stage::Identity, IDENTITY_FILE)?.0;
            let fusion = FusionArch {
                id_dim: identity.arch().embed_dim,
                ..FusionArch::default()
            };
            let mut bundle = BackboneBundle {
                style_generator: load_stage(workdir, Stage::Generator, GENERATOR_FILE)?.0,
                mapper: load_stage(workdir, Stage::Mapper, MAPPER_FILE)?.0,
                face_parser: load_stage(workdir, Stage::Parser, PARSER_FILE)?.0,
                identity_encoder: identity,
                attribute_encoder: Component::init(AttributeArch::default(), seed ^ 3)?,
                fusion_generator: Component::init(fusion, seed ^ 4)?,
                discriminators: Component::init(
                    DiscriminatorArch {
                        m_scales: cfg.disennet.m_scales,
                        ..DiscriminatorArch::default()
                    },
                    seed ^ 5,
                )?,
            };
            bundle.check_compatible(corpus.config.image_size)?;
            let log = train_disennet_stage(&mut bundle, &records, &cfg.disennet, seed ^ 1)?;
            bundle.attribute_encoder.save(&out.join(ATTRIBUTE_FILE), meta.clone())?;
            bundle.fusion_generator.save(&out.join(FUSION_FILE), meta.clone())?;
            bundle.discriminators.save(&out.join(DISCRIMINATOR_FILE), meta)?;
            (log, vec![ATTRIBUTE_FILE, FUSION_FILE, DISCRIMINATOR_FILE])
        }
    };
    log.save_csv(&out.join("log.csv"))?;
    let pointer = StagePointer {
        stage: stage.as_str().to_string(),
        dir: dir_name,
        files: files
            .iter()
            .map(|f| {
                Ok(FileDigest {
                    path: f.to_string(),
                    sha256: file_sha256(&out.join(f))?,
                })
            })
            .collect::<Result<_>>()?,
    };
    let m = run.finish(&out, inputs, log_summary(&log))?;
    fsutil::write_json(&pointer_path(workdir, stage), &pointer)?;
    Ok(m)
}

/// DisenNet training with the virtual faces of `records` computed once up front.
pub fn train_disennet_stage(
    bundle: &mut BackboneBundle,
    records: &[&FaceRecord],
    cfg: &crate::atm::DisenConfig,
    seed: u64,
) -> Result<TrainLog> {
    let images: Vec<&Image> = records.iter().map(|r| &r.image).collect();
    let virtual_faces = generate_virtual_batch(&bundle.mapper, &bundle.style_generator, &images)?;
    let refs: Vec<&Image> = virtual_faces.iter().collect();
    train_disennet(bundle, records, &refs, cfg, seed)
}

/// Mean latent recorded with the mapper checkpoint.
pub fn load_z_mean(meta: &Value) -> Result<LatentCode> {
    let z: Vec<f32> = serde_json::from_value(meta.get("z_mean").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Checkpoint(format!("mapper checkpoint lacks z_mean: {e}")))?;
    LatentCode::input(z)
}

/// Inputs to protect: relative output name and image, or a per-file failure.
/// Inputs keyed by output-relative path; unreadable files keep their error.
type Inputs = Vec<(String, Result<Image>)>;

fn protect_inputs(input: &Path, split: Split, cfg: &Config) -> Result<(Inputs, FileDigest)> {
    if input.is_dir() && input.join(MANIFEST_FILE).exists() {
        let c = open_corpus(input, &cfg.corpus)?;
        let idx = select_split(&c.records, c.config.holdout_per_identity, split);
        let items = idx
            .into_iter()
            .map(|i| (c.entries[i].image.clone(), Ok(c.records[i].image.clone())))
            .collect();
        return Ok((items, c.digest));
    }
    if input.is_dir() {
        let files: Vec<PathBuf> = manifest::list_files(input)?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        let items = files
            .iter()
            .map(|p| (p.to_string_lossy().replace('\\', "/"), Image::load_png(&input.join(p))))
            .collect();
        let digest = FileDigest {
            path: input.display().to_string(),
            sha256: tree_sha256(input)?,
        };
        return Ok((items, digest));
    }
    let name = input
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::record(input, "not a file"))?;
    let digest = FileDigest {
        path: input.display().to_string(),
        sha256: file_sha256(input).map_err(|e| Error::record(input, e.to_string()))?,
    };
    Ok((vec![(name, Image::load_png(input))], digest))
}

fn with_suffix(rel: &str, suffix: &str, ext: &str) -> String {
    let p = Path::new(rel);
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = format!("{stem}{suffix}.{ext}");
    match p.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(d) => format!("{}/{name}", d.to_string_lossy()),
        None => name,
    }
}

#[derive(Debug, Clone, Serialize)]
struct ProtectRecord<'a> {
    source: &'a str,
    output: String,
    virtual_face: String,
    keep_background: bool,
    #[serde(flatten)]
    result: &'a ProtectionResult,
}

#[derive(Debug, Clone, Copy)]
pub struct ProtectFlags {
    pub alpha: f64,
    pub diverse: Option<usize>,
    pub keep_background: bool,
    pub split: Split,
}

pub fn protect_cmd(
    common: &Common,
    workdir: &Path,
    input: &Path,
    out: &Path,
    flags: ProtectFlags,
    args: &[String],
    env: &Env,
) -> Result<RunManifest> {
    let run = Run::start("protect", common, args, env, |_| {})?;
    if !(0.0..=1.0).contains(&flags.alpha) {
        return Err(Error::Config {
            key: "--alpha".into(),
            message: format!("{} outside [0,1]", flags.alpha),
        });
    }
    if flags.diverse == Some(0) {
        return Err(Error::Config {
            key: "--diverse".into(),
            message: "must be at least 1".into(),
        });
    }
    let bundle = load_bundle(workdir)?;
    let mut inputs = pointer_inputs(workdir, &[Stage::Generator, Stage::Mapper, Stage::Parser, Stage::Identity, Stage::Disennet])?;
    let (items, digest) = protect_inputs(input, flags.split, &run.cfg)?;
    inputs.insert(0, digest);
    fs::create_dir_all(out)?;
    let mut failures = Vec::new();
    let mut sims = Vec::new();
    for (rel, img) in &items {
        let img = match img {
            Ok(i) => i,
            Err(e) => {
                failures.push(json!({ "input": rel, "error": e.to_string() }));
                continue;
            }
        };
        let outcome: Result<Vec<(String, ProtectionResult)>> = (|| {
            let results = match flags.diverse {
                Some(n) => {
                    let seed = stage_seed(run.seed, &format!("diverse/{rel}"));
                    diverse_protect(&bundle, img, n, seed)?
                        .into_iter()
                        .enumerate()
                        .map(|(k, r)| (with_suffix(rel, &format!("_{k}"), "png"), r))
                        .collect()
                }
                None => {
                    let x_v = generate_virtual(&bundle.mapper, &bundle.style_generator, img)?;
                    vec![(rel.clone(), protect(&bundle, img, &x_v, flags.alpha)?)]
                }
            };
            results
                .into_iter()
                .map(|(name, mut r)| {
                    if flags.keep_background {
                        r.protected = replace_background(img, &r.protected, &bundle.face_parser)?.image;
                        let e0 = embed_identity(&bundle.identity_encoder, img)?;
                        r.id_similarity = e0.cosine(&embed_identity(&bundle.identity_encoder, &r.protected)?);
                    }
                    Ok((name, r))
                })
                .collect()
        })();
        match outcome {
            Ok(results) => {
                for (name, r) in results {
                    let virtual_name = format!("virtual/{name}");
                    r.protected.save_png(&out.join(&name))?;
                    r.virtual_used.save_png(&out.join(&virtual_name))?;
                    let rec = ProtectRecord {
                        source: rel,
                        output: name.clone(),
                        virtual_face: virtual_name,
                        keep_background: flags.keep_background,
                        result: &r,
                    };
                    fsutil::write_json(&out.join(with_suffix(&name, "", "json")), &rec)?;
                    sims.push(r.id_similarity);
                }
            }
            Err(e @ (Error::NonFinite { .. } | Error::Config { .. })) => return Err(e),
            Err(e) => failures.push(json!({ "input": rel, "error": e.to_string() })),
        }
    }
    if !items.is_empty() && failures.len() == items.len() {
        return Err(Error::validation(format!(
            "none of the {} inputs could be protected; first error: {}",
            items.len(),
            failures[0]["error"]
        )));
    }
    let mean = if sims.is_empty() { 0.0 } else { sims.iter().sum::<f64>() / sims.len() as f64 };
    let metrics = json!({
        "inputs": items.len(),
        "outputs": sims.len(),
        "failures": failures,
        "mean_id_similarity": mean,
        "alpha": flags.alpha,
    });
    run.finish(out, inputs, metrics)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub embedder: String,
    pub domain: Domain,
    pub auc: f64,
    pub n_same: usize,
    pub n_diff: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: usize,
    pub protected: usize,
    pub similarity: Option<SimilarityReport>,
    pub parsing: Option<ParsingReport>,
    pub verification: Vec<VerificationSummary>,
}

/// ROC curve keyed by `<embedder>_<domain>`.
pub type NamedRoc = (String, RocReport);

#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    common: &Common,
    workdir: &Path,
    original: &Path,
    protected_dir: &Path,
    out: &Path,
    domains: &[Domain],
    split: Split,
    args: &[String],
    env: &Env,
) -> Result<(RunManifest, EvalReport, Vec<NamedRoc>)> {
    let run = Run::start("evaluate", common, args, env, |_| {})?;
    let (parser, _) = load_stage::<ParserArch>(workdir, Stage::Parser, PARSER_FILE)?;
    let (identity, _) = load_stage::<IdentityArch>(workdir, Stage::Identity, IDENTITY_FILE)?;
    let (heldout, _) = load_stage::<IdentityArch>(workdir, Stage::Heldout, HELDOUT_FILE)?;
    let mut inputs = pointer_inputs(workdir, &[Stage::Parser, Stage::Identity, Stage::Heldout])?;
    let corpus = open_corpus(original, &run.cfg.corpus)?;
    inputs.insert(0, corpus.digest.clone());
    inputs.insert(
        1,
        FileDigest {
            path: protected_dir.display().to_string(),
            sha256: tree_sha256(protected_dir)?,
        },
    );
    let idx = select_split(&corpus.records, corpus.config.holdout_per_identity, split);
    let originals: Vec<Image> = idx.iter().map(|&i| corpus.records[i].image.clone()).collect();
    let protected: Vec<Option<Image>> = idx
        .iter()
        .map(|&i| {
            let p = protected_dir.join(&corpus.entries[i].image);
            p.exists().then(|| Image::load_png(&p)).transpose()
        })
        .collect::<Result<_>>()?;
    let n_protected = protected.iter().filter(|p| p.is_some()).count();
    let all_protected: Option<Vec<Image>> = protected.iter().cloned().collect();
    for d in domains {
        if *d != Domain::Orig && all_protected.is_none() {
            return Err(Error::validation(format!(
                "{} pairs need protected images, but only {n_protected} of {} records have one in {}",
                d.as_str(),
                idx.len(),
                protected_dir.display()
            )));
        }
    }

    let pairs_present: Vec<(&Image, &Image)> = originals
        .iter()
        .zip(&protected)
        .filter_map(|(o, p)| p.as_ref().map(|p| (o, p)))
        .collect();
    let (similarity, parsing) = if pairs_present.is_empty() {
        (None, None)
    } else {
        let net = PerceptualNet::new(PERCEPTUAL_SEED)?;
        let sim = similarity_report(&pairs_present, &net)?;
        let n_cls = parser.arch().n_classes;
        let reports = pairs_present
            .iter()
            .map(|(o, p)| {
                let (_, ro) = crate::backbones::parse_face(&parser, o)?;
                let (_, rp) = crate::backbones::parse_face(&parser, p)?;
                parsing_similarity(&ro, &rp, n_cls)
            })
            .collect::<Result<Vec<_>>>()?;
        (Some(sim), Some(mean_parsing_report(&reports)?))
    };

    let ids: Vec<u32> = idx.iter().map(|&i| corpus.records[i].identity_id).collect();
    let base = if domains.is_empty() {
        Vec::new()
    } else {
        sample_verification_pairs(
            &ids,
            run.cfg.evaluate.same_pairs,
            run.cfg.evaluate.diff_pairs,
            stage_seed(run.seed, "pairs"),
        )?
    };
    let images = PairImages {
        originals: &originals,
        protected: all_protected.as_deref(),
    };
    fs::create_dir_all(out.join("roc"))?;
    let mut rocs = Vec::new();
    let mut verification = Vec::new();
    for (name, embedder) in [("identity", &identity), ("heldout", &heldout)] {
        for &d in domains {
            let pairs: Vec<_> = base.iter().map(|p| p.with_domain(d)).collect();
            let roc = verification_roc(&pairs, images, embedder)?;
            fsutil::write_atomic(&out.join(format!("roc/{name}_{}.csv", d.as_str())), roc.to_csv().as_bytes())?;
            verification.push(VerificationSummary {
                embedder: name.to_string(),
                domain: d,
                auc: roc.auc,
                n_same: roc.n_same,
                n_diff: roc.n_diff,
            });
            rocs.push((name.to_string(), roc));
        }
    }
    let report = EvalReport {
        records: idx.len(),
        protected: n_protected,
        similarity,
        parsing,
        verification,
    };
    fsutil::write_json(&out.join(REPORT_FILE), &report)?;
    let m = run.finish(out, inputs, serde_json::to_value(&report)?)?;
    Ok((m, report, rocs))
}
