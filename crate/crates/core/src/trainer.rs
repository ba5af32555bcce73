//! Deterministic training loop: seeded shuffling, encoder forward and
//! backward through the loss stack, AdamW with linear warmup, a learnable
//! log-temperature, per-epoch checkpoints and a JSON-lines metric log.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::checkpoint::Checkpoint;
use crate::corpus::{build_batch, CorpusManifest};
use crate::encoders::{encode_batch_graph, init_params, Bound, DualEncoder, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::fnv1a64;
use crate::losses::{inverse_temperature, total_loss_graph, weights_for, EmbeddingBatch, LossBreakdown, LossConfig, TAU_INIT, TAU_MAX, TAU_MIN};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
const SHUFFLE_SALT: u64 = 0x50ff_1e5e;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const LOG_TAU: &str = "log_tau";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    pub k_max: usize,
    pub seed: u64,
    pub tau_init: f64,
    /// Disease and concept texts in the contrastive loss.
    pub enable_mkcl_knowledge: bool,
    /// Subtexts in the contrastive loss.
    pub enable_mkcl_subtexts: bool,
    pub enable_slra: bool,
    pub enable_dkw: bool,
    pub literal_eq3: bool,
    pub literal_eq5: bool,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch_size: 64,
            learning_rate: 1e-4,
            warmup_steps: 100,
            weight_decay: 0.1,
            lambda: 0.7,
            k_max: 4,
            seed: 0,
            tau_init: TAU_INIT,
            enable_mkcl_knowledge: true,
            enable_mkcl_subtexts: true,
            enable_slra: true,
            enable_dkw: true,
            literal_eq3: false,
            literal_eq5: false,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} must be non-negative", self.lambda));
        }
        if !(self.tau_init >= TAU_MIN && self.tau_init <= TAU_MAX) {
            return bad(format!("tau_init {} outside [{TAU_MIN}, {TAU_MAX}]", self.tau_init));
        }
        self.model.validate()
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            knowledge_slots: self.enable_mkcl_knowledge,
            subtext_slots: self.enable_mkcl_subtexts,
            slra: self.enable_slra,
            dkw: self.enable_dkw,
            literal_eq3: self.literal_eq3,
            literal_eq5: self.literal_eq5,
        }
    }

    /// Subtext slots actually encoded; none when nothing reads them.
    pub fn effective_k_max(&self) -> usize {
        if self.enable_mkcl_subtexts || self.enable_slra {
            self.k_max
        } else {
            0
        }
    }

    /// FNV-1a of the canonical JSON form, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        config_hash(&serde_json::to_value(self).expect("serializable"))
    }
}

pub fn config_hash(v: &serde_json::Value) -> String {
    format!("{:016x}", fnv1a64(v.to_string().as_bytes()))
}

/// Learning rate for the `step`-th update (1-based): linear ramp from zero
/// over `warmup` updates, constant afterwards.
pub fn lr_at(step: u64, base: f64, warmup: usize) -> f64 {
    base * (step.min(warmup as u64) as f64) / warmup as f64
}

/// Parameters exempt from weight decay: biases, layer-norm gains and the
/// temperature.
pub fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    name != LOG_TAU && !matches!(last, "g" | "b" | "bo" | "b1" | "b2")
}

fn clamp_log_tau(x: f32) -> f32 {
    x.clamp(TAU_MIN.ln() as f32, TAU_MAX.ln() as f32)
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelConfig,
    pub params: ParamStore,
    pub log_tau: f32,
    /// Updates applied so far.
    pub step: u64,
    /// Epochs completed.
    pub epoch: usize,
    /// First and second moments, one per parameter, then one for `log_tau`.
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub rng: ChaCha8Rng,
    pub config_hash: String,
}

impl TrainState {
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg.model, cfg.seed)?;
        let zeros = |p: &ParamStore| -> Vec<Tensor<f32>> {
            p.iter().map(|(_, t)| Tensor::zeros(t.shape())).chain(std::iter::once(Tensor::zeros(&[1]))).collect()
        };
        Ok(Self {
            model: cfg.model.clone(),
            m: zeros(&params),
            v: zeros(&params),
            params,
            log_tau: clamp_log_tau(cfg.tau_init.ln() as f32),
            step: 0,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT),
            config_hash: cfg.fingerprint(),
        })
    }

    pub fn tau(&self) -> f64 {
        f64::from(self.log_tau).exp()
    }

    pub fn encoder(&self) -> Result<DualEncoder> {
        DualEncoder::new(self.model.clone(), self.params.clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<(String, Tensor<f32>)> = self.params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.push((LOG_TAU.into(), Tensor::from_vec(&[1], vec![self.log_tau]).expect("sized")));
        let names: Vec<String> = self.params.names().iter().cloned().chain(std::iter::once(LOG_TAU.to_string())).collect();
        for (prefix, moments) in [("adam.m", &self.m), ("adam.v", &self.v)] {
            for (n, t) in names.iter().zip(moments) {
                tensors.push((format!("{prefix}.{n}"), t.clone()));
            }
        }
        let seed: String = self.rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        let meta = serde_json::json!({
            "model": self.model,
            "step": self.step,
            "epoch": self.epoch,
            "config_hash": self.config_hash,
            "rng": { "seed": seed, "word_pos": self.rng.get_word_pos().to_string() },
        });
        Checkpoint { meta, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let bad = |m: &str| Error::VersionMismatch(format!("checkpoint metadata: {m}"));
        let model: ModelConfig = serde_json::from_value(ck.meta.get("model").cloned().ok_or_else(|| bad("model"))?).map_err(|_| bad("model"))?;
        let step = ck.meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| bad("step"))?;
        let epoch = ck.meta.get("epoch").and_then(|v| v.as_u64()).ok_or_else(|| bad("epoch"))? as usize;
        let config_hash = ck.meta.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
        let rng_meta = ck.meta.get("rng").ok_or_else(|| bad("rng"))?;
        let seed_hex = rng_meta.get("seed").and_then(|v| v.as_str()).ok_or_else(|| bad("rng.seed"))?;
        let word_pos: u128 = rng_meta.get("word_pos").and_then(|v| v.as_str()).and_then(|s| s.parse().ok()).ok_or_else(|| bad("rng.word_pos"))?;
        if seed_hex.len() != 64 {
            return Err(bad("rng.seed"));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad("rng.seed"))?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);

        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        let mut log_tau = None;
        for (name, t) in &ck.tensors {
            if name.starts_with("adam.m.") {
                m.push(t.clone());
            } else if name.starts_with("adam.v.") {
                v.push(t.clone());
            } else if name == LOG_TAU {
                log_tau = Some(t.item());
            } else {
                params.insert(name.clone(), t.clone());
            }
        }
        let log_tau = log_tau.ok_or_else(|| bad(LOG_TAU))?;
        if m.len() != params.len() + 1 || v.len() != m.len() {
            return Err(bad("optimizer moments"));
        }
        DualEncoder::new(model.clone(), params.clone())?;
        Ok(Self { model, params, log_tau, step, epoch, m, v, rng, config_hash })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Encoder weights from a checkpoint written by the trainer.
pub fn load_encoder(path: &Path) -> Result<DualEncoder> {
    TrainState::load(path)?.encoder()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_mkcl_i2t: f64,
    pub loss_mkcl_t2i: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_slra: Option<f64>,
    pub tau: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_mkcl: f64,
    pub mean_slra: Option<f64>,
    pub tau: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Debug, Default)]
pub struct TrainOptions {
    /// Where checkpoints and the metric log go; nothing is written when unset.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<TrainState>,
}

/// Trains in memory without writing anything.
pub fn train(manifest: &CorpusManifest, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(manifest, cfg, TrainOptions::default())
}

pub fn train_with(manifest: &CorpusManifest, cfg: &TrainConfig, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if manifest.len() < cfg.batch_size {
        return Err(Error::InsufficientData { records: manifest.len(), batch_size: cfg.batch_size });
    }
    let mut state = match opts.resume {
        Some(mut s) => {
            if s.model != cfg.model {
                return Err(Error::Incompatible("checkpoint model config differs from the run config".into()));
            }
            s.config_hash = cfg.fingerprint();
            s
        }
        None => TrainState::init(cfg)?,
    };
    let mut images = manifest.images.clone();
    images.preload(manifest, cfg.model.vision.image_size)?;
    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_FILE);
            let f = if state.epoch == 0 { fs::File::create(path)? } else { OpenOptions::new().append(true).create(true).open(path)? };
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };

    let mut metrics = Vec::new();
    let mut epochs = Vec::new();
    let steps_per_epoch = manifest.len() / cfg.batch_size;
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let mut order: Vec<usize> = (0..manifest.len()).collect();
        order.shuffle(&mut state.rng);
        let first = metrics.len();
        for b in 0..steps_per_epoch {
            let idx = &order[b * cfg.batch_size..(b + 1) * cfg.batch_size];
            let recs: Vec<_> = idx.iter().map(|&i| &manifest.records[i]).collect();
            let batch = build_batch(&recs, cfg.effective_k_max(), &images, cfg.model.vision.image_size)?;
            let (_, m) = train_step(&mut state, cfg, &batch, epoch).map_err(|e| match e {
                Error::NonFiniteLoss { step, .. } => Error::NonFiniteLoss { step, records: idx.to_vec() },
                other => other,
            })?;
            if let Some(w) = log.as_mut() {
                serde_json::to_writer(&mut *w, &m).map_err(|e| Error::Io(e.into()))?;
                w.write_all(b"\n")?;
            }
            metrics.push(m);
        }
        state.epoch = epoch;
        let done = &metrics[first..];
        let mean = |f: &dyn Fn(&StepMetrics) -> f64| done.iter().map(f).sum::<f64>() / done.len().max(1) as f64;
        epochs.push(EpochSummary {
            epoch,
            steps: done.len(),
            mean_total: mean(&|m| m.loss_total),
            mean_mkcl: mean(&|m| (m.loss_mkcl_i2t + m.loss_mkcl_t2i) / 2.0),
            mean_slra: cfg.enable_slra.then(|| mean(&|m| m.loss_slra.unwrap_or(0.0))),
            tau: state.tau(),
        });
        if let Some(dir) = &opts.out_dir {
            if let Some(w) = log.as_mut() {
                w.flush()?;
            }
            let ck = state.to_checkpoint().to_bytes()?;
            fs::write(dir.join(format!("epoch_{epoch:03}.ckpt")), &ck)?;
            if state.epoch == cfg.epochs {
                fs::write(dir.join(FINAL_CHECKPOINT), &ck)?;
            }
        }
    }
    Ok(TrainOutcome { state, metrics, epochs })
}

/// One forward/backward/update on `batch`. Returns the loss components and
/// the logged metrics.
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, batch: &crate::corpus::EnhancedBatch, epoch: usize) -> Result<(LossBreakdown, StepMetrics)> {
    let loss_cfg = cfg.loss_config();
    let mut g = Graph::<f32>::new();
    let bound = Bound::bind(&mut g, &state.params, true);
    let log_tau = g.param(Tensor::from_vec(&[1], vec![state.log_tau])?);
    let nodes = encode_batch_graph(&mut g, &bound, &state.model, batch)?;
    let w = weights_for(&EmbeddingBatch::from_graph(&g, &nodes)?, &loss_cfg);
    let inv_tau = inverse_temperature(&mut g, log_tau);
    let l = total_loss_graph(&mut g, &nodes, &w, inv_tau, cfg.lambda, &loss_cfg)?;
    let breakdown = LossBreakdown::read(&g, &l, loss_cfg.slra);
    let step = state.step + 1;
    if !breakdown.all_finite() {
        return Err(Error::NonFiniteLoss { step, records: Vec::new() });
    }
    g.backward(l.total)?;

    let lr = lr_at(step, cfg.learning_rate, cfg.warmup_steps);
    let names: Vec<String> = state.params.names().to_vec();
    let mut grads: Vec<Tensor<f32>> = names.iter().map(|n| bound.var(n).map(|v| g.grad_or_zeros(v))).collect::<Result<_>>()?;
    grads.push(g.grad_or_zeros(log_tau));
    if grads.iter().any(|t| !t.all_finite()) {
        return Err(Error::NonFiniteLoss { step, records: Vec::new() });
    }
    let bc1 = 1.0 - BETA1.powf(step as f64);
    let bc2 = 1.0 - BETA2.powf(step as f64);
    let mut tau_value = [state.log_tau];
    let tensors = state.params.tensors_mut().map(|(n, t)| (decays(n), t.data_mut())).chain(std::iter::once((false, &mut tau_value[..])));
    for (((decay, p), grad), (m, v)) in tensors.zip(&grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        adamw(p, grad.data(), m.data_mut(), v.data_mut(), lr, if decay { cfg.weight_decay } else { 0.0 }, bc1, bc2);
    }
    let tau_used = f64::from(state.log_tau).exp();
    state.log_tau = clamp_log_tau(tau_value[0]);
    state.step = step;
    let metrics = StepMetrics {
        step,
        epoch,
        loss_total: breakdown.total,
        loss_mkcl_i2t: breakdown.mkcl_i2t,
        loss_mkcl_t2i: breakdown.mkcl_t2i,
        loss_slra: loss_cfg.slra.then_some(breakdown.slra),
        tau: tau_used,
        lr,
    };
    Ok((breakdown, metrics))
}

#[allow(clippy::too_many_arguments)]
fn adamw(p: &mut [f32], g: &[f32], m: &mut [f32], v: &mut [f32], lr: f64, wd: f64, bc1: f64, bc2: f64) {
    let (b1, b2) = (BETA1 as f32, BETA2 as f32);
    let (lr, wd, bc1, bc2, eps) = (lr as f32, wd as f32, bc1 as f32, bc2 as f32, ADAM_EPS as f32);
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
        p[i] -= lr * (update + wd * p[i]);
    }
}

/// Checkpoint path written for epoch `epoch`.
pub fn epoch_checkpoint(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{synth_generate, SynthConfig};
    use crate::encoders::{TextEncoderConfig, VisionEncoderConfig};

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 1e-3,
            warmup_steps: 3,
            k_max: 2,
            seed: 5,
            model: ModelConfig {
                vision: VisionEncoderConfig { image_size: 16, patch_size: 8, embed_dim: 16, depth: 1, heads: 2 },
                text: TextEncoderConfig { vocab_size: 256, context_length: 16, embed_dim: 16, depth: 1, heads: 2 },
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus() -> CorpusManifest {
        synth_generate(&SynthConfig { n_classes: 4, samples_per_class: 6, image_size: 16, patch_size: 8, seed: 3 }).unwrap()
    }

    #[test]
    fn warmup_schedule() {
        assert_eq!(lr_at(0, 1e-4, 100), 0.0);
        assert!((lr_at(25, 1e-4, 100) - 2.5e-5).abs() < 1e-20);
        assert_eq!(lr_at(100, 1e-4, 100), 1e-4);
        assert_eq!(lr_at(5000, 1e-4, 100), 1e-4);
    }

    #[test]
    fn decay_exemptions() {
        assert!(decays("vision.patch.w"));
        assert!(decays("text.blocks.0.mlp.w1"));
        assert!(!decays("text.blocks.0.mlp.b1"));
        assert!(!decays("vision.ln_f.g"));
        assert!(!decays("vision.blocks.1.attn.bo"));
        assert!(!decays(LOG_TAU));
    }

    #[test]
    fn insufficient_data() {
        let cfg = TrainConfig { batch_size: 100, ..tiny_cfg() };
        assert!(matches!(train(&tiny_corpus(), &cfg), Err(Error::InsufficientData { records: 24, batch_size: 100 })));
    }

    #[test]
    fn deterministic_and_resumable() {
        let corpus = tiny_corpus();
        let cfg = tiny_cfg();
        let a = train(&corpus, &cfg).unwrap();
        let b = train(&corpus, &cfg).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert_eq!(a.metrics.len(), 6);
        let bytes = a.state.to_checkpoint().to_bytes().unwrap();
        assert_eq!(bytes, b.state.to_checkpoint().to_bytes().unwrap());

        let half = train(&corpus, &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        let reloaded = TrainState::from_checkpoint(&Checkpoint::from_reader(&half.state.to_checkpoint().to_bytes().unwrap()[..]).unwrap()).unwrap();
        let resumed = train_with(&corpus, &cfg, TrainOptions { out_dir: None, resume: Some(reloaded) }).unwrap();
        assert_eq!(resumed.state.to_checkpoint().to_bytes().unwrap(), bytes);
        assert_eq!(resumed.metrics[..], a.metrics[3..]);
    }

    #[test]
    fn slra_column_follows_flag() {
        let cfg = TrainConfig { epochs: 1, enable_slra: false, ..tiny_cfg() };
        let out = train(&tiny_corpus(), &cfg).unwrap();
        let line = serde_json::to_string(&out.metrics[0]).unwrap();
        assert!(!line.contains("loss_slra"));
        assert!(line.starts_with("{\"step\":1,\"epoch\":1,\"loss_total\""));
    }

    #[test]
    fn tau_stays_clamped() {
        let cfg = TrainConfig { epochs: 1, learning_rate: 50.0, warmup_steps: 1, tau_init: 9.9, ..tiny_cfg() };
        let out = train(&tiny_corpus(), &cfg);
        if let Ok(o) = out {
            for m in &o.metrics {
                assert!(m.tau >= TAU_MIN * 0.999 && m.tau <= TAU_MAX * 1.001);
            }
            assert!(o.state.tau() <= TAU_MAX * 1.001);
        }
    }
}
