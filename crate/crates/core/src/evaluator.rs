//! Zero-shot evaluation (classification accuracy, concept AUROC, retrieval
//! recall) and the ablation harness.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusManifest, Image};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::tensor::{dot, Scalar, Tensor};
use crate::trainer::{train, TrainConfig};

pub const DEFAULT_TEMPLATES: [&str; 3] = ["a photo of {}", "a skin image of {}", "dermatology image showing {}"];

/// Prompt templates with a `{}` placeholder; `overrides` replaces the shared
/// templates for individual labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSet {
    pub templates: Vec<String>,
    #[serde(default)]
    pub overrides: BTreeMap<String, Vec<String>>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self { templates: DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect(), overrides: BTreeMap::new() }
    }
}

impl PromptSet {
    pub fn new(templates: Vec<String>) -> Result<Self> {
        let p = Self { templates, overrides: BTreeMap::new() };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let lists = std::iter::once(&self.templates).chain(self.overrides.values());
        for list in lists {
            if list.is_empty() {
                return Err(Error::EmptyPromptSet);
            }
            if let Some(t) = list.iter().find(|t| !t.contains("{}")) {
                return Err(Error::InvalidConfig(format!("prompt template {t:?} has no {{}} placeholder")));
            }
        }
        Ok(())
    }

    pub fn prompts_for(&self, label: &str) -> Vec<String> {
        self.overrides.get(label).unwrap_or(&self.templates).iter().map(|t| t.replacen("{}", label, 1)).collect()
    }
}

/// Mean of unit vectors, re-normalized.
pub fn mean_direction(rows: &[&[f32]]) -> Vec<f32> {
    let d = rows.first().map_or(0, |r| r.len());
    let mut acc = vec![0.0f32; d];
    for r in rows {
        for (a, &x) in acc.iter_mut().zip(*r) {
            *a += x;
        }
    }
    crate::tensor::normalized(&acc)
}

/// One unit vector per label: the normalized mean of its prompt embeddings.
pub fn class_text_embeddings(prompts: &PromptSet, labels: &[String], encoder: &DualEncoder) -> Result<Tensor<f32>> {
    prompts.validate()?;
    if labels.is_empty() {
        return Err(Error::EmptyPromptSet);
    }
    let filled: Vec<Vec<String>> = labels.iter().map(|l| prompts.prompts_for(l)).collect();
    let flat: Vec<String> = filled.concat();
    let emb = encoder.embed_texts(&flat)?;
    let mut rows = Vec::with_capacity(labels.len());
    let mut at = 0;
    for group in &filled {
        let members: Vec<&[f32]> = (at..at + group.len()).map(|i| emb.row(i)).collect();
        rows.push(mean_direction(&members));
        at += group.len();
    }
    Tensor::from_rows(&rows)
}

fn check_dims<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Index of the largest value; the first one wins ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Classification {
    pub predictions: Vec<usize>,
    pub accuracy: f64,
}

/// Predicts the most similar class per image and scores against `labels`.
pub fn zero_shot_classify<T: Scalar>(images: &Tensor<T>, classes: &Tensor<T>, labels: &[usize]) -> Result<Classification> {
    check_dims(images, classes)?;
    if labels.len() != images.rows() {
        return Err(Error::ShapeMismatch(format!("{} labels for {} images", labels.len(), images.rows())));
    }
    let predictions: Vec<usize> = (0..images.rows())
        .map(|i| {
            let scores: Vec<T> = (0..classes.rows()).map(|c| dot(images.row(i), classes.row(c))).collect();
            argmax(&scores)
        })
        .collect();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let accuracy = if labels.is_empty() { 0.0 } else { correct as f64 / labels.len() as f64 };
    Ok(Classification { predictions, accuracy })
}

/// Pair-counting AUROC; `None` without at least one positive and one negative.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| !l).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return None;
    }
    let mut wins = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                wins += 1.0;
            } else if p == n {
                wins += 0.5;
            }
        }
    }
    Some(wins / (pos.len() * neg.len()) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConceptAuroc {
    /// `None` for concepts lacking positives or negatives.
    pub per_concept: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
    pub macro_auroc: f64,
}

/// Per-concept AUROC and their macro average over scorable concepts.
pub fn concept_auroc(scores: &[Vec<f64>], labels: &[Vec<bool>]) -> Result<ConceptAuroc> {
    if scores.len() != labels.len() || scores.iter().zip(labels).any(|(s, l)| s.len() != l.len()) {
        return Err(Error::ShapeMismatch("scores and labels differ in shape".into()));
    }
    let per_concept: Vec<Option<f64>> = scores.iter().zip(labels).map(|(s, l)| auroc(s, l)).collect();
    let skipped: Vec<usize> = per_concept.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(i, _)| i).collect();
    let scored: Vec<f64> = per_concept.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::NoScorableConcepts);
    }
    let macro_auroc = scored.iter().sum::<f64>() / scored.len() as f64;
    Ok(ConceptAuroc { per_concept, skipped, macro_auroc })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Retrieval {
    /// Cutoffs actually used (clipped to the corpus size).
    pub ks: Vec<usize>,
    /// Set when a requested cutoff exceeded the corpus size.
    pub k_exceeds_corpus: bool,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

/// 1-based rank of candidate `truth` under descending score, lower index first on ties.
fn rank_of<T: Scalar>(scores: &[T], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores.iter().enumerate().filter(|&(j, &s)| s > t || (s == t && j < truth)).count()
}

/// Recall@K in both directions; row `i` of `texts` belongs to image `i`.
pub fn retrieval_recall<T: Scalar>(images: &Tensor<T>, texts: &Tensor<T>, ks: &[usize]) -> Result<Retrieval> {
    check_dims(images, texts)?;
    let n = images.rows();
    if texts.rows() != n || n == 0 {
        return Err(Error::ShapeMismatch(format!("{} images vs {} texts", n, texts.rows())));
    }
    if ks.contains(&0) {
        return Err(Error::InvalidConfig("recall cutoffs must be at least 1".into()));
    }
    let k_exceeds_corpus = ks.iter().any(|&k| k > n);
    let ks: Vec<usize> = ks.iter().map(|&k| k.min(n)).collect();
    let sim: Vec<Vec<T>> = (0..n).map(|i| (0..n).map(|j| dot(images.row(i), texts.row(j))).collect()).collect();
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(&sim[i], i)).collect();
    let t2i: Vec<usize> = (0..n).map(|j| rank_of(&(0..n).map(|i| sim[i][j]).collect::<Vec<_>>(), j)).collect();
    let recall = |ranks: &[usize]| ks.iter().map(|&k| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64).collect();
    Ok(Retrieval { image_to_text: recall(&i2t), text_to_image: recall(&t2i), ks, k_exceeds_corpus })
}

/// Which evaluations to run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalTasks {
    pub classify: bool,
    pub concepts: bool,
    /// Recall cutoffs; retrieval is skipped when empty.
    pub retrieval_ks: Vec<usize>,
}

impl Default for EvalTasks {
    fn default() -> Self {
        Self { classify: true, concepts: true, retrieval_ks: vec![1, 5, 10] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassScore {
    pub label: String,
    pub correct: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassificationReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConceptScore {
    pub concept: String,
    pub auroc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConceptReport {
    pub macro_auroc: f64,
    pub per_concept: Vec<ConceptScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub tasks: Vec<String>,
    pub records: usize,
    pub fingerprint: String,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classification: Option<ClassificationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub concepts: Option<ConceptReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<Retrieval>,
}

impl EvalReport {
    /// Aligned plain-text summary.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k:<28} {v:>10}\n"));
        if let Some(c) = &self.classification {
            line("accuracy", format!("{:.4}", c.accuracy));
        }
        if let Some(c) = &self.concepts {
            line("concept macro AUROC", format!("{:.4}", c.macro_auroc));
        }
        if let Some(r) = &self.retrieval {
            for (i, k) in r.ks.iter().enumerate() {
                line(&format!("image-to-text R@{k}"), format!("{:.4}", r.image_to_text[i]));
            }
            for (i, k) in r.ks.iter().enumerate() {
                line(&format!("text-to-image R@{k}"), format!("{:.4}", r.text_to_image[i]));
            }
        }
        out
    }
}

fn manifest_images(encoder: &DualEncoder, manifest: &CorpusManifest) -> Result<Vec<Image>> {
    let size = encoder.cfg.vision.image_size;
    manifest
        .records
        .iter()
        .map(|r| {
            manifest.images.resolve(&r.base.image_ref, size).map_err(|e| match e {
                Error::ShapeMismatch(m) => Error::Incompatible(m),
                other => other,
            })
        })
        .collect()
}

/// Runs the requested tasks of `tasks` on `manifest`.
pub fn evaluate(encoder: &DualEncoder, manifest: &CorpusManifest, prompts: &PromptSet, tasks: &EvalTasks, fingerprint: &str, seed: u64) -> Result<EvalReport> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let images = manifest_images(encoder, manifest)?;
    let refs: Vec<&Image> = images.iter().collect();
    let image_embs = encoder.embed_images(&refs)?;
    let mut report = EvalReport { tasks: Vec::new(), records: manifest.len(), fingerprint: fingerprint.to_string(), seed, classification: None, concepts: None, retrieval: None };

    if tasks.classify {
        report.tasks.push("classify".into());
        let idx = manifest.class_indices();
        let labelled: Vec<usize> = (0..idx.len()).filter(|&i| idx[i].is_some()).collect();
        if labelled.is_empty() || manifest.class_vocabulary.is_empty() {
            return Err(Error::InvalidConfig("classification needs class labels".into()));
        }
        let classes = class_text_embeddings(prompts, &manifest.class_vocabulary, encoder)?;
        let sub = Tensor::from_rows(&labelled.iter().map(|&i| image_embs.row(i).to_vec()).collect::<Vec<_>>())?;
        let labels: Vec<usize> = labelled.iter().map(|&i| idx[i].expect("labelled")).collect();
        let result = zero_shot_classify(&sub, &classes, &labels)?;
        let per_class = manifest
            .class_vocabulary
            .iter()
            .enumerate()
            .map(|(c, label)| {
                let members: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == c).collect();
                ClassScore { label: label.clone(), correct: members.iter().filter(|&&k| result.predictions[k] == c).count(), total: members.len() }
            })
            .collect();
        report.classification = Some(ClassificationReport { accuracy: result.accuracy, per_class });
    }

    if tasks.concepts {
        report.tasks.push("concepts".into());
        let vocab = &manifest.concept_vocabulary;
        let labelled: Vec<usize> = (0..manifest.len()).filter(|&i| manifest.records[i].concept_labels.is_some()).collect();
        if vocab.is_empty() || labelled.is_empty() {
            return Err(Error::NoScorableConcepts);
        }
        let concept_embs = class_text_embeddings(prompts, vocab, encoder)?;
        let mut scores = Vec::with_capacity(vocab.len());
        let mut labels = Vec::with_capacity(vocab.len());
        for (c, concept) in vocab.iter().enumerate() {
            scores.push(labelled.iter().map(|&i| f64::from(dot(image_embs.row(i), concept_embs.row(c)))).collect());
            labels.push(labelled.iter().map(|&i| manifest.records[i].concept_labels.as_ref().is_some_and(|ls| ls.contains(concept))).collect());
        }
        let a = concept_auroc(&scores, &labels)?;
        let per_concept = vocab.iter().zip(&a.per_concept).map(|(c, &auroc)| ConceptScore { concept: c.clone(), auroc }).collect();
        report.concepts = Some(ConceptReport { macro_auroc: a.macro_auroc, per_concept });
    }

    if !tasks.retrieval_ks.is_empty() {
        report.tasks.push("retrieval".into());
        let captions: Vec<String> = manifest.records.iter().map(|r| r.base.raw_text.clone()).collect();
        let text_embs = encoder.embed_texts(&captions)?;
        report.retrieval = Some(retrieval_recall(&image_embs, &text_embs, &tasks.retrieval_ks)?);
    }
    Ok(report)
}

/// Loss-component switches of one ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FlagSet {
    pub mkcl_knowledge: bool,
    pub mkcl_subtexts: bool,
    pub slra: bool,
    pub dkw: bool,
}

impl FlagSet {
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            enable_mkcl_knowledge: self.mkcl_knowledge,
            enable_mkcl_subtexts: self.mkcl_subtexts,
            enable_slra: self.slra,
            enable_dkw: self.dkw,
            ..base.clone()
        }
    }

    /// `+`-joined names of the enabled switches, or `none`.
    pub fn label(&self) -> String {
        let on: Vec<&str> = [(self.mkcl_knowledge, "knowledge"), (self.mkcl_subtexts, "subtexts"), (self.slra, "slra"), (self.dkw, "dkw")]
            .iter()
            .filter(|(b, _)| *b)
            .map(|(_, n)| *n)
            .collect();
        if on.is_empty() {
            "none".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: FlagSet,
}

/// Base training config of the ablation harness. The desk defaults stop
/// inside warmup on a few hundred records, so the harness trains longer with
/// a larger step and smaller batches.
pub fn ablation_base() -> TrainConfig {
    TrainConfig { epochs: 30, batch_size: 32, learning_rate: 1e-3, warmup_steps: 20, ..TrainConfig::default() }
}

/// Baseline, knowledge-set-only mkcl, full mkcl, +slra, +slra+dkw.
pub fn canonical_rows() -> Vec<AblationRow> {
    let row = |name: &str, k, s, l, d| AblationRow { name: name.into(), flags: FlagSet { mkcl_knowledge: k, mkcl_subtexts: s, slra: l, dkw: d } };
    vec![
        row("baseline", false, false, false, false),
        row("mkcl#", true, false, false, false),
        row("mkcl", true, true, false, false),
        row("mkcl+slra", true, true, true, false),
        row("mkcl+slra+dkw", true, true, true, true),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowResult {
    pub row: String,
    pub flags: String,
    pub seeds: Vec<u64>,
    pub accuracy: Vec<f64>,
    pub auroc: Vec<f64>,
    pub acc_mean: f64,
    pub acc_sd: f64,
    pub auroc_mean: f64,
    pub auroc_sd: f64,
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<RowResult>,
}

impl AblationTable {
    pub const HEADER: &'static str = "row,flags,acc_mean,acc_sd,auroc_mean,auroc_sd,seeds";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{},{},{:.6},{:.6},{:.6},{:.6},{}\n", r.row, r.flags, r.acc_mean, r.acc_sd, r.auroc_mean, r.auroc_sd, r.seeds.len()));
        }
        out
    }

    pub fn row(&self, name: &str) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.row == name)
    }
}

/// Trains one model per `(row, seed)` on `train_set`, evaluates zero-shot
/// accuracy and concept AUROC on `eval_set`, and aggregates per row. Runs
/// are spread over `threads` workers; results do not depend on the count.
pub fn ablation_run(train_set: &CorpusManifest, eval_set: &CorpusManifest, base: &TrainConfig, rows: &[AblationRow], seeds: &[u64], prompts: &PromptSet, threads: usize) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    base.validate()?;
    prompts.validate()?;
    let jobs: Vec<(usize, u64)> = rows.iter().enumerate().flat_map(|(r, _)| seeds.iter().map(move |&s| (r, s))).collect();
    let results: Mutex<Vec<Option<Result<(f64, f64)>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let tasks = EvalTasks { classify: true, concepts: true, retrieval_ks: Vec::new() };
    let run = |job: usize| -> Result<(f64, f64)> {
        let (r, seed) = jobs[job];
        let cfg = TrainConfig { seed, ..rows[r].flags.apply(base) };
        let out = train(train_set, &cfg)?;
        let encoder = out.state.encoder()?;
        let report = evaluate(&encoder, eval_set, prompts, &tasks, &cfg.fingerprint(), seed)?;
        Ok((report.classification.map_or(f64::NAN, |c| c.accuracy), report.concepts.map_or(f64::NAN, |c| c.macro_auroc)))
    };
    std::thread::scope(|scope| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            scope.spawn(|| loop {
                let job = next.fetch_add(1, Ordering::SeqCst);
                if job >= jobs.len() {
                    break;
                }
                let res = run(job);
                results.lock().expect("no poisoned workers")[job] = Some(res);
            });
        }
    });
    let mut results = results.into_inner().expect("no poisoned workers");
    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let mut acc = Vec::new();
        let mut auc = Vec::new();
        for (job, &(jr, _)) in jobs.iter().enumerate() {
            if jr == r {
                let (a, u) = results[job].take().expect("every job ran")?;
                acc.push(a);
                auc.push(u);
            }
        }
        let (acc_mean, acc_sd) = mean_sd(&acc);
        let (auroc_mean, auroc_sd) = mean_sd(&auc);
        out.push(RowResult { row: row.name.clone(), flags: row.flags.label(), seeds: seeds.to_vec(), accuracy: acc, auroc: auc, acc_mean, acc_sd, auroc_mean, auroc_sd });
    }
    Ok(AblationTable { rows: out })
}
