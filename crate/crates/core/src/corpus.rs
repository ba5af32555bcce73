//! Enhanced image-text records, manifest I/O, knowledge extraction and the
//! synthetic corpus generator.
//!
//! Every image-text pair is expanded into a *knowledge set* (raw caption,
//! disease-aspect text, concept-aspect text) and a *subtext set* (the
//! caption's sentences). Batches lay the texts out in fixed slots
//! `[raw, disease, concept, S^1..S^K]` with a validity mask.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Number of fixed knowledge-set slots ahead of the subtexts.
pub const KNOWLEDGE_SLOTS: usize = 3;
pub const SLOT_RAW: usize = 0;
pub const SLOT_DISEASE: usize = 1;
pub const SLOT_CONCEPT: usize = 2;

const MIN_SUBTEXT_CHARS: usize = 3;
const SPLIT_SALT: u64 = 0x5eed_5e11;

/// Square RGB image, row-major HWC bytes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(size: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != size * size * 3 {
            return Err(Error::ShapeMismatch(format!("{} bytes for a {size}x{size}x3 image", pixels.len())));
        }
        Ok(Self { size, pixels })
    }

    /// Pixel intensities scaled to `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect()
    }

    pub fn to_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.size, self.size).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_ppm(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::ShapeMismatch(format!("ppm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?.to_string());
        }
        if fields[0] != "P6" || fields[3] != "255" {
            return Err(bad("only binary 8-bit P6 is supported"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        if w != h {
            return Err(bad("image is not square"));
        }
        let body = &bytes[(pos + 1).min(bytes.len())..];
        if body.len() < w * h * 3 {
            return Err(bad("truncated pixel data"));
        }
        Self::new(w, body[..w * h * 3].to_vec())
    }
}

/// Resolves `image_ref`s to images: in-memory entries first, then files
/// relative to `root` (`.ppm`, otherwise raw HWC bytes).
#[derive(Clone, Debug, Default)]
pub struct ImageStore {
    pub root: Option<PathBuf>,
    memory: BTreeMap<String, Image>,
}

impl ImageStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(root: impl Into<PathBuf>) -> Self {
        Self { root: Some(root.into()), memory: BTreeMap::new() }
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, image: Image) {
        self.memory.insert(image_ref.into(), image);
    }

    pub fn get(&self, image_ref: &str) -> Option<&Image> {
        self.memory.get(image_ref)
    }

    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    pub fn resolve(&self, image_ref: &str, expected_size: usize) -> Result<Image> {
        let img = match self.memory.get(image_ref) {
            Some(img) => img.clone(),
            None => self.read(image_ref, expected_size)?,
        };
        if img.size != expected_size {
            return Err(Error::ShapeMismatch(format!("{image_ref}: {0}x{0} image, expected {expected_size}x{expected_size}", img.size)));
        }
        Ok(img)
    }

    fn read(&self, image_ref: &str, expected_size: usize) -> Result<Image> {
        let path = match &self.root {
            Some(root) => root.join(image_ref),
            None => PathBuf::from(image_ref),
        };
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let bytes = fs::read(&path)?;
        if path.extension().is_some_and(|e| e == "ppm") {
            Image::from_ppm(&bytes)
        } else {
            Image::new(expected_size, bytes)
        }
    }

    /// Loads every referenced image into memory.
    pub fn preload(&mut self, manifest: &CorpusManifest, expected_size: usize) -> Result<()> {
        for r in &manifest.records {
            if !self.memory.contains_key(&r.base.image_ref) {
                let img = self.resolve(&r.base.image_ref, expected_size)?;
                self.memory.insert(r.base.image_ref.clone(), img);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawPair {
    pub image_ref: String,
    pub raw_text: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnhancedRecord {
    pub base: RawPair,
    pub disease_text: String,
    pub concept_text: String,
    pub subtexts: Vec<String>,
    pub class_label: Option<String>,
    pub concept_labels: Option<Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct CorpusManifest {
    pub records: Vec<EnhancedRecord>,
    pub class_vocabulary: Vec<String>,
    pub concept_vocabulary: Vec<String>,
    pub split_tag: SplitTag,
    pub images: ImageStore,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Index of each record's class in `class_vocabulary`.
    pub fn class_indices(&self) -> Vec<Option<usize>> {
        self.records
            .iter()
            .map(|r| r.class_label.as_ref().and_then(|l| self.class_vocabulary.iter().position(|c| c == l)))
            .collect()
    }

    fn subset(&self, idx: &[usize], split_tag: SplitTag) -> Self {
        Self {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            class_vocabulary: self.class_vocabulary.clone(),
            concept_vocabulary: self.concept_vocabulary.clone(),
            split_tag,
            images: self.images.clone(),
        }
    }

    /// Seeded per-class hold-out: `round(eval_fraction · n_c)` records of each
    /// class go to the eval split. Unlabeled records stay in train.
    pub fn split(&self, eval_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&eval_fraction) {
            return Err(Error::InvalidConfig(format!("eval fraction {eval_fraction} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT);
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        let classes = self.class_indices();
        for (i, c) in classes.iter().enumerate() {
            by_class.entry(c.map_or(usize::MAX, |c| c)).or_default().push(i);
        }
        let mut eval = BTreeSet::new();
        for (c, mut members) in by_class {
            if c == usize::MAX {
                continue;
            }
            members.shuffle(&mut rng);
            let take = (eval_fraction * members.len() as f64).round() as usize;
            eval.extend(members.into_iter().take(take));
        }
        let train_idx: Vec<usize> = (0..self.len()).filter(|i| !eval.contains(i)).collect();
        let eval_idx: Vec<usize> = eval.into_iter().collect();
        Ok((self.subset(&train_idx, SplitTag::Train), self.subset(&eval_idx, SplitTag::Eval)))
    }
}


/// One manifest line.
#[derive(Serialize, Deserialize)]
struct ManifestLine {
    image_ref: String,
    raw_text: String,
    disease_text: String,
    concept_text: String,
    subtexts: Vec<String>,
    class_label: Option<String>,
    concept_labels: Option<Vec<String>>,
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, line: usize, name: &str) -> Result<&'a Value> {
    obj.get(name).ok_or_else(|| Error::SchemaViolation { line, field: name.into() })
}

fn nonempty_str(obj: &serde_json::Map<String, Value>, line: usize, name: &str) -> Result<String> {
    match field(obj, line, name)? {
        Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
        _ => Err(Error::SchemaViolation { line, field: name.into() }),
    }
}

fn string_list(v: &Value, line: usize, name: &str) -> Result<Vec<String>> {
    let bad = || Error::SchemaViolation { line, field: name.into() };
    let arr = v.as_array().ok_or_else(bad)?;
    arr.iter()
        .map(|x| match x {
            Value::String(s) if !s.trim().is_empty() => Ok(s.clone()),
            _ => Err(bad()),
        })
        .collect()
}

fn parse_record(text: &str, line: usize) -> Result<EnhancedRecord> {
    let value: Value = serde_json::from_str(text).map_err(|_| Error::SchemaViolation { line, field: "<json>".into() })?;
    let obj = value.as_object().ok_or_else(|| Error::SchemaViolation { line, field: "<object>".into() })?;
    let image_ref = nonempty_str(obj, line, "image_ref")?;
    let raw_text = nonempty_str(obj, line, "raw_text")?;
    let disease_text = nonempty_str(obj, line, "disease_text")?;
    let concept_text = nonempty_str(obj, line, "concept_text")?;
    let subtexts = string_list(field(obj, line, "subtexts")?, line, "subtexts")?;
    let class_label = match obj.get("class_label") {
        None | Some(Value::Null) => None,
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
        Some(_) => return Err(Error::SchemaViolation { line, field: "class_label".into() }),
    };
    let concept_labels = match obj.get("concept_labels") {
        None | Some(Value::Null) => None,
        Some(v) => Some(string_list(v, line, "concept_labels")?),
    };
    Ok(EnhancedRecord { base: RawPair { image_ref, raw_text }, disease_text, concept_text, subtexts, class_label, concept_labels })
}

fn first_seen(items: impl Iterator<Item = String>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    items.filter(|x| seen.insert(x.clone())).collect()
}

/// Reads a line-delimited JSON manifest. Images resolve relative to the
/// manifest's directory; vocabularies are collected in order of first use.
pub fn load_manifest(path: &Path, split_tag: SplitTag) -> Result<CorpusManifest> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(parse_record(&line, i + 1)?);
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let class_vocabulary = first_seen(records.iter().filter_map(|r| r.class_label.clone()));
    let concept_vocabulary = first_seen(records.iter().flat_map(|r| r.concept_labels.clone().unwrap_or_default()));
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(CorpusManifest { records, class_vocabulary, concept_vocabulary, split_tag, images: ImageStore::on_disk(root) })
}

/// Serializes records as manifest lines, in order.
pub fn manifest_to_jsonl(records: &[EnhancedRecord]) -> String {
    let mut out = String::new();
    for r in records {
        let line = ManifestLine {
            image_ref: r.base.image_ref.clone(),
            raw_text: r.base.raw_text.clone(),
            disease_text: r.disease_text.clone(),
            concept_text: r.concept_text.clone(),
            subtexts: r.subtexts.clone(),
            class_label: r.class_label.clone(),
            concept_labels: r.concept_labels.clone(),
        };
        out.push_str(&serde_json::to_string(&line).expect("manifest line serializes"));
        out.push('\n');
    }
    out
}

/// Writes the manifest to `path` and every in-memory image it references
/// (as PPM) beside it.
pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    for r in &manifest.records {
        if let Some(img) = manifest.images.get(&r.base.image_ref) {
            let target = dir.join(&r.base.image_ref);
            if let Some(p) = target.parent() {
                fs::create_dir_all(p)?;
            }
            fs::write(target, img.to_ppm())?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(manifest_to_jsonl(&manifest.records).as_bytes())?;
    Ok(())
}

/// Splits a caption into sentences on `.`, `!` and `?`, trimming each and
/// dropping fragments shorter than three characters counting their
/// terminator. A caption with no terminator is returned whole.
pub fn decompose_raw_text(raw: &str) -> Vec<String> {
    let trimmed = raw.trim();
    if !trimmed.contains(['.', '!', '?']) {
        return if trimmed.is_empty() { Vec::new() } else { vec![trimmed.to_string()] };
    }
    trimmed
        .split(['.', '!', '?'])
        .map(str::trim)
        // Lengths count the sentence terminator (end of text counts as one).
        .filter(|s| s.chars().count() + 1 >= MIN_SUBTEXT_CHARS)
        .map(str::to_string)
        .collect()
}

fn matched_terms<'a>(haystack: &str, lexicon: &'a [String]) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    lexicon
        .iter()
        .filter(|t| !t.trim().is_empty())
        .filter(|t| haystack.contains(&t.to_lowercase()))
        .filter(|t| seen.insert(t.to_lowercase()))
        .map(String::as_str)
        .collect()
}

/// Rule-based stand-in for LLM knowledge extraction: lists the lexicon terms
/// occurring (case-insensitively) in the caption, in lexicon order.
pub fn stub_knowledge_extract(raw: &str, disease_lexicon: &[String], concept_lexicon: &[String]) -> (String, String) {
    let lower = raw.to_lowercase();
    let diseases = matched_terms(&lower, disease_lexicon);
    let concepts = matched_terms(&lower, concept_lexicon);
    let disease_text = if diseases.is_empty() { "diagnosis: unknown".to_string() } else { format!("diagnosis: {}", diseases.join(", ")) };
    let concept_text = if concepts.is_empty() { "concepts: none".to_string() } else { format!("concepts: {}", concepts.join(", ")) };
    (disease_text, concept_text)
}

/// Builds an enhanced record from a raw pair with the extraction stub.
pub fn enhance(base: RawPair, disease_lexicon: &[String], concept_lexicon: &[String]) -> EnhancedRecord {
    let (disease_text, concept_text) = stub_knowledge_extract(&base.raw_text, disease_lexicon, concept_lexicon);
    let subtexts = decompose_raw_text(&base.raw_text);
    EnhancedRecord { base, disease_text, concept_text, subtexts, class_label: None, concept_labels: None }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_classes: 8, samples_per_class: 50, image_size: 32, patch_size: 8, seed: 7 }
    }
}

const DISEASES: [&str; 16] = [
    "melanoma",
    "psoriasis",
    "eczema",
    "basal cell carcinoma",
    "acne vulgaris",
    "rosacea",
    "vitiligo",
    "urticaria",
    "tinea corporis",
    "seborrheic keratosis",
    "lichen planus",
    "impetigo",
    "scabies",
    "actinic keratosis",
    "dermatofibroma",
    "molluscum contagiosum",
];

const CONCEPTS: [&str; 24] = [
    "plaque",
    "scale",
    "papule",
    "nodule",
    "erythema",
    "hyperpigmentation",
    "ulcer",
    "crust",
    "vesicle",
    "pustule",
    "atrophy",
    "telangiectasia",
    "macule",
    "wheal",
    "comedone",
    "excoriation",
    "lichenification",
    "burrow",
    "umbilication",
    "pearly border",
    "hypopigmentation",
    "annular ring",
    "keratin horn",
    "fissure",
];

const SITES: [&str; 12] = ["scalp", "face", "neck", "chest", "back", "arm", "hand", "leg", "knee", "elbow", "foot", "abdomen"];

const PALETTE: [[u8; 3]; 8] = [
    [230, 40, 40],
    [40, 200, 60],
    [50, 80, 235],
    [235, 215, 40],
    [210, 50, 220],
    [40, 215, 220],
    [245, 140, 30],
    [245, 245, 245],
];

const CONCEPTS_PER_CLASS: usize = 3;

fn disease_name(c: usize) -> String {
    DISEASES.get(c).map_or_else(|| format!("disorder-{c:03}"), |s| s.to_string())
}

fn class_concepts(c: usize) -> Vec<usize> {
    (0..CONCEPTS_PER_CLASS).map(|j| (c * CONCEPTS_PER_CLASS + j) % CONCEPTS.len()).collect()
}

fn class_sites(c: usize) -> [usize; 2] {
    [(2 * c) % SITES.len(), (2 * c + 1) % SITES.len()]
}

/// Draws shape `shape` (one of 8) in an 8-level mask over a `cell × cell` block.
fn motif_mask(shape: usize, cell: usize, y: usize, x: usize) -> bool {
    let c = cell as isize;
    let (yy, xx) = (y as isize, x as isize);
    let mid = c / 2;
    let edge = (c / 4).max(1);
    match shape % 8 {
        0 => yy >= edge && yy < c - edge && xx >= edge && xx < c - edge,
        1 => yy < edge || yy >= c - edge || xx < edge || xx >= c - edge,
        2 => (yy - mid).abs() < edge.max(1) || (xx - mid).abs() < edge.max(1),
        3 => (yy - xx).abs() <= edge / 2 || (yy + xx - (c - 1)).abs() <= edge / 2,
        4 => (yy / edge.max(1)) % 2 == 0,
        5 => (xx / edge.max(1)) % 2 == 0,
        6 => {
            let d2 = (2 * yy - c + 1).pow(2) + (2 * xx - c + 1).pow(2);
            d2 <= (c - 1) * (c - 1) && d2 >= (c / 2) * (c / 2)
        }
        _ => ((yy / edge.max(1)) + (xx / edge.max(1))) % 2 == 0,
    }
}

fn synth_image(class: usize, cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Image {
    let s = cfg.image_size;
    let cell = cfg.patch_size;
    let grid = s / cell;
    let mut px: Vec<u8> = (0..s * s * 3).map(|_| rng.gen_range(0..90u8)).collect();
    let color = PALETTE[(class + class / PALETTE.len()) % PALETTE.len()];
    let shape = class % 8;
    let cells = grid * grid;
    let n_cells = rng.gen_range(1..=2usize).min(cells);
    let chosen = rand::seq::index::sample(rng, cells, n_cells).into_vec();
    for cidx in chosen {
        let (gy, gx) = (cidx / grid, cidx % grid);
        for y in 0..cell {
            for x in 0..cell {
                if motif_mask(shape, cell, y, x) {
                    let p = ((gy * cell + y) * s + gx * cell + x) * 3;
                    for ch in 0..3 {
                        let jitter: i16 = rng.gen_range(-15..=15);
                        px[p + ch] = (i16::from(color[ch]) + jitter).clamp(0, 255) as u8;
                    }
                }
            }
        }
    }
    Image { size: s, pixels: px }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    c.next().map_or_else(String::new, |f| f.to_uppercase().collect::<String>() + c.as_str())
}

fn synth_caption(disease: &str, concepts: &[&str], site: &str, rng: &mut ChaCha8Rng) -> String {
    let disease_sentence = match rng.gen_range(0..4) {
        0 => format!("Findings consistent with {disease}"),
        1 => format!("Clinical diagnosis of {disease}"),
        2 => format!("Biopsy confirmed {disease}"),
        _ => format!("Typical presentation of {disease}"),
    };
    let concept_sentence = |cs: &[&str]| match cs.len() {
        1 => format!("{} is present", capitalize(cs[0])),
        _ => format!("{} with {}", capitalize(cs[0]), cs[1..].join(" and ")),
    };
    let site_sentence = match rng.gen_range(0..3) {
        0 => format!("Lesion located on the {site}"),
        1 => format!("Affects the {site}"),
        _ => format!("Seen on the {site} for several weeks"),
    };
    let n_sentences = rng.gen_range(1..=4usize);
    let mut sentences = match n_sentences {
        1 => vec![format!("{} on the {site} with {}", capitalize(disease), concepts.join(" and "))],
        2 => vec![concept_sentence(concepts) + &format!(" on the {site}"), disease_sentence],
        3 => vec![concept_sentence(concepts), site_sentence, disease_sentence],
        _ => {
            let split = concepts.len() / 2;
            vec![concept_sentence(&concepts[..split.max(1)]), concept_sentence(&concepts[split.max(1)..]), site_sentence, disease_sentence]
        }
    };
    if sentences.len() > 1 {
        let last = sentences.len() - 1;
        let at = rng.gen_range(0..=last);
        sentences.swap(at, last);
    }
    sentences.join(". ") + "."
}

/// Seeded synthetic corpus: each class pairs a colored geometric motif
/// (drawn in one or two patch cells over a noise background) with captions
/// mentioning its disease name, two to four of its concepts, and a body site.
pub fn synth_generate(cfg: &SynthConfig) -> Result<CorpusManifest> {
    if cfg.n_classes < 2 {
        return Err(Error::InvalidConfig("n_classes must be at least 2".into()));
    }
    if cfg.samples_per_class < 1 {
        return Err(Error::InvalidConfig("samples_per_class must be at least 1".into()));
    }
    if cfg.patch_size == 0 || cfg.image_size == 0 || cfg.image_size % cfg.patch_size != 0 {
        return Err(Error::InvalidConfig("image_size must be a positive multiple of patch_size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_vocabulary: Vec<String> = (0..cfg.n_classes).map(disease_name).collect();
    let concept_vocabulary: Vec<String> = CONCEPTS.iter().map(|s| s.to_string()).collect();
    let mut images = ImageStore::in_memory();
    let mut records = Vec::with_capacity(cfg.n_classes * cfg.samples_per_class);
    for s in 0..cfg.samples_per_class {
        for c in 0..cfg.n_classes {
            let own = class_concepts(c);
            let n_own = rng.gen_range(2..=CONCEPTS_PER_CLASS);
            let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, own.len(), n_own).into_iter().map(|i| own[i]).collect();
            if rng.gen_bool(0.3) {
                let other = rng.gen_range(0..CONCEPTS.len());
                if !picked.contains(&other) {
                    picked.push(other);
                }
            }
            let concept_terms: Vec<&str> = picked.iter().map(|&i| CONCEPTS[i]).collect();
            let site = SITES[class_sites(c)[rng.gen_range(0..2)]];
            let raw_text = synth_caption(&class_vocabulary[c], &concept_terms, site, &mut rng);
            let image_ref = format!("images/{c:03}_{s:04}.ppm");
            images.insert(image_ref.clone(), synth_image(c, cfg, &mut rng));
            let mut record = enhance(RawPair { image_ref, raw_text }, &class_vocabulary, &concept_vocabulary);
            record.class_label = Some(class_vocabulary[c].clone());
            record.concept_labels = Some(concept_terms.iter().map(|t| t.to_string()).collect());
            records.push(record);
        }
    }
    Ok(CorpusManifest { records, class_vocabulary, concept_vocabulary, split_tag: SplitTag::Train, images })
}

/// Texts of a batch laid out as `[raw, disease, concept, S^1..S^K]` per
/// sample; `mask` marks real texts.
#[derive(Clone, Debug, PartialEq)]
pub struct EnhancedBatch {
    pub images: Vec<Image>,
    pub texts: Vec<Vec<String>>,
    pub mask: Vec<Vec<bool>>,
    pub k_max: usize,
}

impl EnhancedBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn slots(&self) -> usize {
        self.k_max + KNOWLEDGE_SLOTS
    }

    /// Row-major flattening of the mask.
    pub fn flat_mask(&self) -> Vec<bool> {
        self.mask.concat()
    }
}

/// Lays out a batch with `k_max` subtext slots, keeping the first `k_max`
/// subtexts of each record and padding the rest.
pub fn build_batch(records: &[&EnhancedRecord], k_max: usize, images: &ImageStore, image_size: usize) -> Result<EnhancedBatch> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut imgs = Vec::with_capacity(records.len());
    let mut texts = Vec::with_capacity(records.len());
    let mut mask = Vec::with_capacity(records.len());
    for r in records {
        imgs.push(images.resolve(&r.base.image_ref, image_size)?);
        let mut row = vec![r.base.raw_text.clone(), r.disease_text.clone(), r.concept_text.clone()];
        let mut m = vec![true; KNOWLEDGE_SLOTS];
        for j in 0..k_max {
            match r.subtexts.get(j) {
                Some(s) => {
                    row.push(s.clone());
                    m.push(true);
                }
                None => {
                    row.push(String::new());
                    m.push(false);
                }
            }
        }
        texts.push(row);
        mask.push(m);
    }
    Ok(EnhancedBatch { images: imgs, texts, mask, k_max })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lex(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn record(n_sub: usize) -> EnhancedRecord {
        EnhancedRecord {
            base: RawPair { image_ref: "a.ppm".into(), raw_text: "x".into() },
            disease_text: "diagnosis: x".into(),
            concept_text: "concepts: none".into(),
            subtexts: (0..n_sub).map(|i| format!("sentence {i}")).collect(),
            class_label: None,
            concept_labels: None,
        }
    }

    fn store() -> ImageStore {
        let mut s = ImageStore::in_memory();
        s.insert("a.ppm", Image::new(4, vec![0; 48]).unwrap());
        s
    }

    #[test]
    fn decomposition_examples() {
        assert_eq!(decompose_raw_text("Red plaque on arm. Itchy at night."), vec!["Red plaque on arm", "Itchy at night"]);
        assert_eq!(decompose_raw_text("Melanoma"), vec!["Melanoma"]);
        assert_eq!(decompose_raw_text("A. b? ok!"), vec!["ok"]);
    }

    #[test]
    fn extraction_examples() {
        let d = lex(&["melanoma", "psoriasis"]);
        let c = lex(&["plaque", "scale"]);
        assert_eq!(
            stub_knowledge_extract("Superficial spreading melanoma with scale", &d, &c),
            ("diagnosis: melanoma".to_string(), "concepts: scale".to_string())
        );
        assert_eq!(stub_knowledge_extract("nothing here", &d, &c), ("diagnosis: unknown".to_string(), "concepts: none".to_string()));
        assert_eq!(stub_knowledge_extract("PLAQUE and Plaque", &d, &c).1, "concepts: plaque");
    }

    #[test]
    fn padding_and_truncation() {
        let r2 = record(2);
        let b = build_batch(&[&r2], 4, &store(), 4).unwrap();
        assert_eq!(b.mask[0], vec![true, true, true, true, true, false, false]);
        assert_eq!(b.texts[0][5], "");
        let r6 = record(6);
        let b = build_batch(&[&r6], 4, &store(), 4).unwrap();
        assert_eq!(b.mask[0], vec![true; 7]);
        assert_eq!(b.texts[0][6], "sentence 3");
        assert!(matches!(build_batch(&[], 4, &store(), 4), Err(Error::EmptyBatch)));
    }

    #[test]
    fn wrong_resolution_is_rejected() {
        let r = record(0);
        assert!(matches!(build_batch(&[&r], 0, &store(), 8), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn synth_counts_and_contract() {
        let m = synth_generate(&SynthConfig { n_classes: 8, samples_per_class: 50, ..Default::default() }).unwrap();
        assert_eq!(m.len(), 400);
        assert_eq!(m.class_vocabulary.len(), 8);
        assert!(m.records.iter().all(|r| m.class_vocabulary.contains(r.class_label.as_ref().unwrap())));
        assert!(m.records.iter().all(|r| r.disease_text != "diagnosis: unknown"));
        assert!(m.records.iter().all(|r| (1..=4).contains(&r.subtexts.len())));
        let bad = SynthConfig { n_classes: 1, ..Default::default() };
        assert!(matches!(synth_generate(&bad), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn synth_is_seeded() {
        let cfg = SynthConfig { n_classes: 2, samples_per_class: 3, seed: 7, ..Default::default() };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(manifest_to_jsonl(&a.records), manifest_to_jsonl(&b.records));
        for r in &a.records {
            assert_eq!(a.images.get(&r.base.image_ref), b.images.get(&r.base.image_ref));
        }
        let c = synth_generate(&SynthConfig { seed: 8, ..cfg }).unwrap();
        let r = &a.records[0].base.image_ref;
        assert_ne!(a.images.get(r), c.images.get(r));
    }

    #[test]
    fn split_holds_out_a_fifth_per_class() {
        let m = synth_generate(&SynthConfig::default()).unwrap();
        let (train, eval) = m.split(0.2, 3).unwrap();
        assert_eq!((train.len(), eval.len()), (320, 80));
        let train_refs: BTreeSet<_> = train.records.iter().map(|r| &r.base.image_ref).collect();
        assert!(eval.records.iter().all(|r| !train_refs.contains(&r.base.image_ref)));
        for c in &m.class_vocabulary {
            assert_eq!(eval.records.iter().filter(|r| r.class_label.as_ref() == Some(c)).count(), 10);
        }
    }

    #[test]
    fn ppm_round_trip() {
        let img = Image::new(2, (0..12).collect()).unwrap();
        assert_eq!(Image::from_ppm(&img.to_ppm()).unwrap(), img);
        assert!(Image::from_ppm(&img.to_ppm()[..15]).is_err());
    }

    #[test]
    fn manifest_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&SynthConfig { n_classes: 2, samples_per_class: 1, ..Default::default() }).unwrap();
        let path = dir.path().join("train.jsonl");
        write_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path, SplitTag::Train).unwrap();
        assert_eq!(loaded.records, m.records);
        assert_eq!(loaded.class_vocabulary, m.class_vocabulary);
        let img = loaded.images.resolve(&loaded.records[0].base.image_ref, 32).unwrap();
        assert_eq!(Some(&img), m.images.get(&m.records[0].base.image_ref));

        let missing = dir.path().join("missing.jsonl");
        assert!(matches!(load_manifest(&missing, SplitTag::Train), Err(Error::MissingFile(_))));

        let empty = dir.path().join("empty.jsonl");
        fs::write(&empty, "").unwrap();
        assert!(matches!(load_manifest(&empty, SplitTag::Train), Err(Error::EmptyManifest)));

        let broken = dir.path().join("broken.jsonl");
        let good = manifest_to_jsonl(&m.records[..1]);
        fs::write(&broken, format!("{good}{{\"image_ref\":\"x\",\"disease_text\":\"d\",\"concept_text\":\"c\",\"subtexts\":[]}}\n")).unwrap();
        match load_manifest(&broken, SplitTag::Train) {
            Err(Error::SchemaViolation { line, field }) => assert_eq!((line, field.as_str()), (2, "raw_text")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
