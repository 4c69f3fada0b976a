//! Face records: the procedural synthetic corpus, on-disk ingestion, and
//! verification-pair sampling.

pub mod labels;
pub mod render;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ParsingMap};
pub use labels::LabelSet;
pub use render::{FaceGeometry, Renderer, Texture, ATTR_DIM, GEOMETRY_DIM};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FaceRecord {
    pub image: Image,
    pub parsing: ParsingMap,
    pub identity_id: u32,
    pub attr_params: Vec<f32>,
    pub source: Source,
    /// Texture seed for synthetic records.
    pub render_seed: Option<u64>,
}

impl FaceRecord {
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        if !self.image.is_in_unit_range() {
            return Err(Error::validation("image values outside [0,1]"));
        }
        if self.parsing.dims() != (self.image.height(), self.image.width()) {
            return Err(Error::shape(format!(
                "parsing {:?} vs image {:?}",
                self.parsing.dims(),
                (self.image.height(), self.image.width())
            )));
        }
        self.parsing.validate_classes(n_classes)
    }
}

/// Renders one synthetic face. Geometry comes from `identity_id`, looks from
/// `attr_params`, and background texture phase/noise from `seed`.
pub fn generate_synthetic_face(
    renderer: &Renderer,
    identity_id: u32,
    attr_params: &[f32],
    seed: u64,
) -> Result<FaceRecord> {
    let geometry = FaceGeometry::for_identity(identity_id as u64);
    let (image, parsing) = renderer.render(&geometry, attr_params, Texture::Seeded(seed))?;
    Ok(FaceRecord {
        image,
        parsing,
        identity_id,
        attr_params: attr_params.to_vec(),
        source: Source::Synthetic,
        render_seed: Some(seed),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub identities: u32,
    pub per_identity: u32,
    /// Total record count; defaults to `identities * per_identity`.
    pub count: Option<u32>,
    pub image_size: usize,
    pub labels: LabelSet,
    /// Records per identity kept out of every training stage.
    pub holdout_per_identity: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            identities: 20,
            per_identity: 25,
            count: None,
            image_size: 64,
            labels: LabelSet::Coarse7,
            holdout_per_identity: 6,
        }
    }
}

impl CorpusConfig {
    pub fn total(&self) -> u32 {
        self.count.unwrap_or(self.identities * self.per_identity)
    }

    pub fn renderer(&self) -> Renderer {
        Renderer::new(self.image_size, self.labels)
    }
}

fn record_rng(seed: u64, index: u32) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64)
}

/// Record `i` belongs to identity `i % identities`; attributes and texture
/// seed are drawn from a per-record stream so any prefix is stable.
pub fn build_synthetic_corpus(cfg: &CorpusConfig, seed: u64) -> Result<Vec<FaceRecord>> {
    if cfg.identities == 0 && cfg.total() > 0 {
        return Err(Error::validation("corpus needs at least one identity"));
    }
    let renderer = cfg.renderer();
    (0..cfg.total())
        .map(|i| {
            let mut rng = record_rng(seed, i);
            let attrs: Vec<f32> = (0..ATTR_DIM).map(|_| rng.random::<f32>()).collect();
            let render_seed = rng.random::<u64>();
            generate_synthetic_face(&renderer, i % cfg.identities, &attrs, render_seed)
        })
        .collect()
}

/// Splits record indices into (train, held-out): the last `holdout` records
/// of each identity in corpus order are held out.
pub fn split_holdout(records: &[FaceRecord], holdout: u32) -> (Vec<usize>, Vec<usize>) {
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_id.entry(r.identity_id).or_default().push(i);
    }
    let mut held = HashSet::new();
    for idx in by_id.values() {
        let k = (holdout as usize).min(idx.len().saturating_sub(1));
        held.extend(idx[idx.len() - k..].iter().copied());
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..records.len() {
        if held.contains(&i) {
            test.push(i);
        } else {
            train.push(i);
        }
    }
    (train, test)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub parsing: String,
    pub identity_id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attr_params: Option<Vec<f32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub render_seed: Option<u64>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes images, parsing maps, and a manifest beneath `dir`.
pub fn write_corpus(dir: &Path, records: &[FaceRecord]) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("parsing"))?;
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let image = format!("images/{i:05}.png");
        let parsing = format!("parsing/{i:05}.png");
        r.image.save_png(&dir.join(&image))?;
        r.parsing.save_png(&dir.join(&parsing))?;
        let synthetic = r.source == Source::Synthetic;
        entries.push(ManifestEntry {
            image,
            parsing,
            identity_id: r.identity_id,
            attr_params: synthetic.then(|| r.attr_params.clone()),
            render_seed: r.render_seed,
        });
    }
    let json = serde_json::to_vec_pretty(&entries)?;
    crate::cli::fsutil::write_atomic(&dir.join(MANIFEST_FILE), &json)?;
    Ok(entries)
}

/// Loads records listed in `manifest` (paths relative to `dir`), in manifest order.
pub fn load_corpus(dir: &Path, manifest: &Path, n_classes: usize) -> Result<Vec<FaceRecord>> {
    let text = std::fs::read_to_string(manifest).map_err(|e| Error::record(manifest, e.to_string()))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::record(manifest, e.to_string()))?;
    entries
        .iter()
        .map(|e| load_entry(dir, e, n_classes))
        .collect()
}

fn load_entry(dir: &Path, e: &ManifestEntry, n_classes: usize) -> Result<FaceRecord> {
    let image_path: PathBuf = dir.join(&e.image);
    let parsing_path: PathBuf = dir.join(&e.parsing);
    let image = Image::load_png(&image_path)?;
    let parsing = ParsingMap::load_png(&parsing_path)?;
    if parsing.dims() != (image.height(), image.width()) {
        return Err(Error::record(
            &parsing_path,
            format!(
                "parsing dims {:?} differ from image dims {:?}",
                parsing.dims(),
                (image.height(), image.width())
            ),
        ));
    }
    parsing
        .validate_classes(n_classes)
        .map_err(|err| Error::record(&parsing_path, err.to_string()))?;
    let (attr_params, source) = match &e.attr_params {
        Some(a) => (a.clone(), Source::Synthetic),
        None => (Vec::new(), Source::External),
    };
    Ok(FaceRecord {
        image,
        parsing,
        identity_id: e.identity_id,
        attr_params,
        source,
        render_seed: e.render_seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Orig,
    Adr,
    Xdr,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Orig => "orig",
            Domain::Adr => "adr",
            Domain::Xdr => "xdr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "orig" => Some(Domain::Orig),
            "adr" => Some(Domain::Adr),
            "xdr" => Some(Domain::Xdr),
            _ => None,
        }
    }
}

/// Indices into a record list; which sides are protected follows from the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same_identity: bool,
    pub domain: Domain,
}

impl VerificationPair {
    pub fn a_protected(&self) -> bool {
        matches!(self.domain, Domain::Adr | Domain::Xdr)
    }

    pub fn b_protected(&self) -> bool {
        self.domain == Domain::Adr
    }

    pub fn with_domain(self, domain: Domain) -> Self {
        Self { domain, ..self }
    }
}

/// Samples unordered pairs of distinct records without repetition.
pub fn sample_verification_pairs(
    identities: &[u32],
    n_same: usize,
    n_diff: usize,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    let n = identities.len();
    let mut same_pool = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if identities[i] == identities[j] {
                same_pool.push((i, j));
            }
        }
    }
    let total_pairs = n * n.saturating_sub(1) / 2;
    let max_diff = total_pairs - same_pool.len();
    if n_same > same_pool.len() || n_diff > max_diff {
        return Err(Error::Infeasible(format!(
            "requested {n_same} same-identity and {n_diff} different-identity pairs; \
             this corpus supports at most {} and {max_diff}",
            same_pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    same_pool.shuffle(&mut rng);
    let mut out: Vec<VerificationPair> = same_pool[..n_same]
        .iter()
        .map(|&(a, b)| VerificationPair {
            a,
            b,
            same_identity: true,
            domain: Domain::Orig,
        })
        .collect();

    if n_diff * 2 > max_diff {
        let mut pool = Vec::with_capacity(max_diff);
        for i in 0..n {
            for j in i + 1..n {
                if identities[i] != identities[j] {
                    pool.push((i, j));
                }
            }
        }
        pool.shuffle(&mut rng);
        pool.truncate(n_diff);
        out.extend(pool.into_iter().map(|(a, b)| VerificationPair {
            a,
            b,
            same_identity: false,
            domain: Domain::Orig,
        }));
    } else {
        let mut seen = HashSet::new();
        while seen.len() < n_diff {
            let i = rng.random_range(0..n);
            let j = rng.random_range(0..n);
            if identities[i] == identities[j] {
                continue;
            }
            let key = (i.min(j), i.max(j));
            if seen.insert(key) {
                out.push(VerificationPair {
                    a: key.0,
                    b: key.1,
                    same_identity: false,
                    domain: Domain::Orig,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig {
            identities: 4,
            per_identity: 3,
            image_size: 32,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn synthetic_faces_are_deterministic() {
        let r = Renderer::new(64, LabelSet::Coarse7);
        let attrs = vec![0.3; ATTR_DIM];
        let a = generate_synthetic_face(&r, 2, &attrs, 11).unwrap();
        let b = generate_synthetic_face(&r, 2, &attrs, 11).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.parsing, b.parsing);
        a.validate(7).unwrap();
    }

    #[test]
    fn parsing_mostly_tracks_identity_not_attributes() {
        let r = Renderer::new(64, LabelSet::Coarse7);
        let lo = vec![0.0; ATTR_DIM];
        let hi = vec![1.0; ATTR_DIM];
        for id in 0..20 {
            let a = generate_synthetic_face(&r, id, &lo, 1).unwrap();
            let b = generate_synthetic_face(&r, id, &hi, 2).unwrap();
            let same = a
                .parsing
                .data()
                .iter()
                .zip(b.parsing.data())
                .filter(|(x, y)| x == y)
                .count();
            let frac = same as f64 / (64.0 * 64.0);
            assert!(frac >= 0.9, "identity {id}: {frac}");
            assert_ne!(a.image, b.image);
        }
    }

    #[test]
    fn identities_differ_in_pixels() {
        let r = Renderer::new(64, LabelSet::Coarse7);
        let attrs = vec![0.5; ATTR_DIM];
        for id in 0..19 {
            let a = generate_synthetic_face(&r, id, &attrs, 3).unwrap();
            let b = generate_synthetic_face(&r, id + 1, &attrs, 3).unwrap();
            let diff = a
                .image
                .data()
                .chunks(3)
                .zip(b.image.data().chunks(3))
                .filter(|(p, q)| p != q)
                .count();
            assert!(diff as f64 > 0.01 * 4096.0, "ids {id},{}: {diff}", id + 1);
        }
    }

    #[test]
    fn attribute_validation() {
        let r = Renderer::new(16, LabelSet::Coarse7);
        assert!(generate_synthetic_face(&r, 0, &[0.5; 11].map(|v: f32| v - 1.0), 0).is_err());
    }

    #[test]
    fn corpus_prefix_is_stable() {
        let cfg = small_cfg();
        let full = build_synthetic_corpus(&cfg, 9).unwrap();
        let part = build_synthetic_corpus(
            &CorpusConfig {
                count: Some(5),
                ..cfg.clone()
            },
            9,
        )
        .unwrap();
        assert_eq!(full.len(), 12);
        assert_eq!(&full[..5], &part[..]);
        assert_eq!(full[5].identity_id, 1);
    }

    #[test]
    fn holdout_split_takes_tail_of_each_identity() {
        let recs = build_synthetic_corpus(&small_cfg(), 1).unwrap();
        let (train, test) = split_holdout(&recs, 1);
        assert_eq!(train.len(), 8);
        assert_eq!(test, vec![8, 9, 10, 11]);
    }

    #[test]
    fn corpus_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let recs = build_synthetic_corpus(&small_cfg(), 4).unwrap();
        write_corpus(dir.path(), &recs).unwrap();
        let back = load_corpus(dir.path(), &dir.path().join(MANIFEST_FILE), 7).unwrap();
        assert_eq!(back.len(), recs.len());
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(b.image, a.image.quantized());
            assert_eq!(b.parsing, a.parsing);
            assert_eq!(b.identity_id, a.identity_id);
            assert_eq!(b.source, Source::Synthetic);
        }
    }

    #[test]
    fn empty_manifest_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.json");
        std::fs::write(&m, "[]").unwrap();
        assert!(load_corpus(dir.path(), &m, 7).unwrap().is_empty());
    }

    #[test]
    fn out_of_range_class_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let recs = build_synthetic_corpus(&small_cfg(), 4).unwrap();
        write_corpus(dir.path(), &recs[..3]).unwrap();
        let mut bad = recs[1].parsing.clone();
        bad.set(0, 0, 7);
        bad.save_png(&dir.path().join("parsing/00001.png")).unwrap();
        let err = load_corpus(dir.path(), &dir.path().join(MANIFEST_FILE), 7).unwrap_err();
        assert!(err.to_string().contains("00001.png"), "{err}");
    }

    #[test]
    fn missing_file_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let recs = build_synthetic_corpus(&small_cfg(), 4).unwrap();
        write_corpus(dir.path(), &recs[..2]).unwrap();
        std::fs::remove_file(dir.path().join("images/00000.png")).unwrap();
        let err = load_corpus(dir.path(), &dir.path().join(MANIFEST_FILE), 7).unwrap_err();
        assert!(err.to_string().contains("00000.png"), "{err}");
    }

    #[test]
    fn pair_sampling_counts_and_errors() {
        let ids = [0, 0, 0, 1, 1, 2];
        let pairs = sample_verification_pairs(&ids, 4, 5, 3).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.same_identity).count(), 4);
        assert_eq!(pairs.iter().filter(|p| !p.same_identity).count(), 5);
        let one = sample_verification_pairs(&[0, 1], 0, 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        assert!(!one[0].same_identity);
        let err = sample_verification_pairs(&[5, 5, 5], 0, 1, 0).unwrap_err();
        assert!(err.to_string().contains("at most 3 and 0"), "{err}");
        assert!(sample_verification_pairs(&ids, 5, 0, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pairs_are_labelled_correctly_and_unique(
                ids in proptest::collection::vec(0u32..5, 2..30),
                seed in any::<u64>(),
                fs in 0.0f64..1.0,
                fd in 0.0f64..1.0,
            ) {
                let n = ids.len();
                let same_max = (0..n).flat_map(|i| (i+1..n).map(move |j| (i, j)))
                    .filter(|&(i, j)| ids[i] == ids[j]).count();
                let diff_max = n * (n - 1) / 2 - same_max;
                let ns = (same_max as f64 * fs) as usize;
                let nd = (diff_max as f64 * fd) as usize;
                let pairs = sample_verification_pairs(&ids, ns, nd, seed).unwrap();
                prop_assert_eq!(pairs.len(), ns + nd);
                let mut seen = HashSet::new();
                for p in &pairs {
                    prop_assert!(p.a < p.b);
                    prop_assert_eq!(p.same_identity, ids[p.a] == ids[p.b]);
                    prop_assert!(seen.insert((p.a, p.b)));
                }
                prop_assert_eq!(pairs, sample_verification_pairs(&ids, ns, nd, seed).unwrap());
            }
        }
    }
}
