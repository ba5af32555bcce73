//! Multi-aspect contrastive loss, fine-grained subtext alignment and
//! diagnosis-guided weighting.
//!
//! Text slots per sample are `[raw, disease, concept, S^1..S^K]`. Every loss
//! term is `−log softmax` of a temperature-scaled cosine similarity:
//!
//! * image→text: for image `i`, softmax over every valid text in the batch,
//!   positives are its own valid texts;
//! * text→image: for text `(i, j)`, softmax over the `N` images;
//! * subtext→enhanced image: for subtext `(i, j)`, softmax over the `N`
//!   knowledge-enhanced image embeddings `e^k`, where `e^k_i` pools the
//!   patches of image `i` with a softmax map over raw-text/patch scores.
//!
//! Each term is multiplied by its slot weight and every loss is the
//! weight-normalized mean of its terms. Knowledge-set slots weigh 1;
//! subtext weights are the clamped, max-normalized similarity of each
//! subtext to the sample's disease text, held constant for the gradient.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::corpus::{KNOWLEDGE_SLOTS, SLOT_DISEASE, SLOT_RAW};
use crate::encoders::{EOT_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::tensor::{dot, Scalar, Tensor};

pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
/// CLIP's initial temperature.
pub const TAU_INIT: f64 = 0.07;
pub const DEFAULT_LAMBDA: f64 = 0.7;
/// Floor applied to subtext/disease similarities before max-normalization.
pub const WEIGHT_FLOOR: f64 = 1e-3;

const _: () = assert!(EOT_ID != PAD_ID);

/// Plain-value embeddings of a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch<T> {
    /// `[N, d]`, unit rows.
    pub visual: Tensor<T>,
    /// `[N, HW, d]`.
    pub patches: Tensor<T>,
    /// `[N, K+3, d]`, unit rows where valid, zero rows elsewhere.
    pub texts: Tensor<T>,
    /// Row-major `N × (K+3)` validity.
    pub mask: Vec<bool>,
}

impl<T: Scalar> EmbeddingBatch<T> {
    pub fn new(visual: Tensor<T>, patches: Tensor<T>, texts: Tensor<T>, mask: Vec<bool>) -> Result<Self> {
        let b = Self { visual, patches, texts, mask };
        b.check_shapes()?;
        Ok(b)
    }

    pub fn n(&self) -> usize {
        self.visual.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.visual.shape()[1]
    }

    pub fn slots(&self) -> usize {
        self.texts.shape()[1]
    }

    pub fn hw(&self) -> usize {
        self.patches.shape()[1]
    }

    pub fn k_max(&self) -> usize {
        self.slots() - KNOWLEDGE_SLOTS
    }

    pub fn valid(&self, i: usize, j: usize) -> bool {
        self.mask[i * self.slots() + j]
    }

    /// Embedding of text slot `j` of sample `i`.
    pub fn text(&self, i: usize, j: usize) -> &[T] {
        let d = self.dim();
        let off = (i * self.slots() + j) * d;
        &self.texts.data()[off..off + d]
    }

    pub fn visual_row(&self, i: usize) -> &[T] {
        self.visual.row(i)
    }

    pub fn patch(&self, i: usize, n: usize) -> &[T] {
        let d = self.dim();
        let off = (i * self.hw() + n) * d;
        &self.patches.data()[off..off + d]
    }

    fn check_shapes(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ShapeMismatch(m.into()));
        if self.visual.shape().len() != 2 || self.patches.shape().len() != 3 || self.texts.shape().len() != 3 {
            return bad("expected visual [N,d], patches [N,HW,d], texts [N,S,d]");
        }
        let (n, d) = (self.visual.shape()[0], self.visual.shape()[1]);
        if n == 0 || self.patches.shape()[0] != n || self.texts.shape()[0] != n {
            return bad("batch sizes differ");
        }
        if self.patches.shape()[2] != d || self.texts.shape()[2] != d {
            return bad("embedding widths differ");
        }
        if self.texts.shape()[1] < KNOWLEDGE_SLOTS || self.mask.len() != n * self.texts.shape()[1] {
            return bad("mask does not cover the text slots");
        }
        if self.patches.shape()[1] == 0 {
            return bad("no patches");
        }
        Ok(())
    }

    /// Checks shapes, unit norms (±`tol`) and the always-valid knowledge slots.
    pub fn validate(&self, tol: f64) -> Result<()> {
        self.check_shapes()?;
        let unit = |v: &[T]| (crate::tensor::l2_norm(v).f64() - 1.0).abs() <= tol;
        for i in 0..self.n() {
            if !unit(self.visual_row(i)) {
                return Err(Error::ShapeMismatch(format!("visual row {i} is not unit norm")));
            }
            for j in 0..self.slots() {
                if j < KNOWLEDGE_SLOTS && !self.valid(i, j) {
                    return Err(Error::ShapeMismatch(format!("knowledge slot {j} of sample {i} is masked")));
                }
                if self.valid(i, j) && !unit(self.text(i, j)) {
                    return Err(Error::ShapeMismatch(format!("text ({i},{j}) is not unit norm")));
                }
            }
        }
        Ok(())
    }

    pub fn from_graph(g: &Graph<T>, nodes: &EmbeddingNodes) -> Result<Self> {
        let d = g.value(nodes.visual).cols();
        Self::new(
            g.value(nodes.visual).clone(),
            g.value(nodes.patches).clone().reshaped(&[nodes.n, nodes.hw, d])?,
            g.value(nodes.texts).clone().reshaped(&[nodes.n, nodes.slots, d])?,
            nodes.mask.clone(),
        )
    }

    /// Places the batch on a graph as trainable leaves.
    pub fn to_graph(&self, g: &mut Graph<T>) -> Result<EmbeddingNodes> {
        let (n, d, hw, s) = (self.n(), self.dim(), self.hw(), self.slots());
        Ok(EmbeddingNodes {
            visual: g.param(self.visual.clone()),
            patches: g.param(self.patches.clone().reshaped(&[n * hw, d])?),
            texts: g.param(self.texts.clone().reshaped(&[n * s, d])?),
            mask: self.mask.clone(),
            n,
            slots: s,
            hw,
        })
    }

    /// Reorders samples: output sample `k` is input sample `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let take = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let mut data = Vec::with_capacity(t.len());
            for &p in perm {
                data.extend_from_slice(t.row(p));
            }
            Tensor::from_vec(t.shape(), data)
        };
        let s = self.slots();
        let mask = perm.iter().flat_map(|&p| self.mask[p * s..(p + 1) * s].iter().copied()).collect();
        Self::new(take(&self.visual)?, take(&self.patches)?, take(&self.texts)?, mask)
    }
}

/// Graph nodes of an encoded batch.
#[derive(Clone, Debug)]
pub struct EmbeddingNodes {
    /// `[N, d]`.
    pub visual: Var,
    /// `[N·HW, d]`.
    pub patches: Var,
    /// `[N·(K+3), d]`.
    pub texts: Var,
    pub mask: Vec<bool>,
    pub n: usize,
    pub slots: usize,
    pub hw: usize,
}

/// Temperature and slra weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossParams {
    pub tau: f64,
    pub lambda: f64,
}

impl LossParams {
    /// Clamps `tau` into `[1e-3, 10]`.
    pub fn new(tau: f64, lambda: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::InvalidConfig(format!("temperature {tau} must be positive")));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!("lambda {lambda} must be non-negative")));
        }
        Ok(Self { tau: tau.clamp(TAU_MIN, TAU_MAX), lambda })
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self { tau: TAU_INIT, lambda: DEFAULT_LAMBDA }
    }
}

/// Which parts of the objective are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct LossConfig {
    /// Disease and concept texts take part in the contrastive loss.
    pub knowledge_slots: bool,
    /// Subtexts take part in the contrastive loss.
    pub subtext_slots: bool,
    pub slra: bool,
    /// Diagnosis-guided subtext weights; off means every valid slot weighs 1.
    pub dkw: bool,
    /// Image→text denominator over images instead of texts (then equal to text→image).
    pub literal_eq3: bool,
    /// Similarity map normalized by its sum instead of a softmax.
    pub literal_eq5: bool,
}

impl LossConfig {
    pub fn full() -> Self {
        Self { knowledge_slots: true, subtext_slots: true, slra: true, dkw: true, literal_eq3: false, literal_eq5: false }
    }

    /// Raw caption only, plain symmetric InfoNCE.
    pub fn clip() -> Self {
        Self { knowledge_slots: false, subtext_slots: false, slra: false, dkw: false, literal_eq3: false, literal_eq5: false }
    }

    /// Whether slot `j` enters the contrastive sums.
    pub fn mkcl_slot(&self, j: usize) -> bool {
        match j {
            SLOT_RAW => true,
            j if j < KNOWLEDGE_SLOTS => self.knowledge_slots,
            _ => self.subtext_slots,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::full()
    }
}

/// Per-slot weights, row-major `N × (K+3)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosisWeights {
    pub n: usize,
    pub slots: usize,
    pub w: Vec<f64>,
}

impl DiagnosisWeights {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.slots + j]
    }

    /// 1 on every valid slot, 0 on padding.
    pub fn uniform(mask: &[bool], n: usize, slots: usize) -> Self {
        Self { n, slots, w: mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect() }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.w[i * self.slots..(i + 1) * self.slots]
    }
}

/// Max-normalizes raw similarities after flooring them at [`WEIGHT_FLOOR`].
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = raw.iter().map(|&r| r.max(WEIGHT_FLOOR)).collect();
    let max = clamped.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    clamped.iter().map(|&c| c / max).collect()
}

/// Diagnosis-guided weights from disease/subtext similarities.
pub fn diagnosis_weights<T: Scalar>(batch: &EmbeddingBatch<T>) -> DiagnosisWeights {
    let (n, s) = (batch.n(), batch.slots());
    let mut w = vec![0.0; n * s];
    for i in 0..n {
        let disease = batch.text(i, SLOT_DISEASE);
        let valid: Vec<usize> = (KNOWLEDGE_SLOTS..s).filter(|&j| batch.valid(i, j)).collect();
        let raw: Vec<f64> = valid.iter().map(|&j| dot(disease, batch.text(i, j)).f64()).collect();
        for (&j, wj) in valid.iter().zip(normalize_weights(&raw)) {
            w[i * s + j] = wj;
        }
        for j in 0..KNOWLEDGE_SLOTS {
            w[i * s + j] = if batch.valid(i, j) { 1.0 } else { 0.0 };
        }
    }
    DiagnosisWeights { n, slots: s, w }
}

/// Graph nodes of every loss component.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub mkcl_i2t: Var,
    pub mkcl_t2i: Var,
    pub mkcl: Var,
    /// `None` when slra is disabled or no subtext carries weight.
    pub slra: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub mkcl_i2t: f64,
    pub mkcl_t2i: f64,
    pub mkcl: f64,
    pub slra: f64,
    pub total: f64,
    /// Set when slra was requested but no valid subtext existed.
    pub no_subtexts: bool,
}

impl LossBreakdown {
    pub fn all_finite(&self) -> bool {
        [self.mkcl_i2t, self.mkcl_t2i, self.mkcl, self.slra, self.total].iter().all(|x| x.is_finite())
    }

    pub fn read<T: Scalar>(g: &Graph<T>, nodes: &LossNodes, slra_requested: bool) -> Self {
        let v = |x: Var| g.value(x).item().f64();
        Self {
            mkcl_i2t: v(nodes.mkcl_i2t),
            mkcl_t2i: v(nodes.mkcl_t2i),
            mkcl: v(nodes.mkcl),
            slra: nodes.slra.map_or(0.0, v),
            total: v(nodes.total),
            no_subtexts: slra_requested && nodes.slra.is_none(),
        }
    }
}

/// `exp(−log_tau)` as a graph node.
pub fn inverse_temperature<T: Scalar>(g: &mut Graph<T>, log_tau: Var) -> Var {
    let neg = g.scale(log_tau, -T::one());
    g.exp(neg)
}

/// `Σ w·(−picked) / Σ w` over the picked log-probabilities.
fn weighted_nll<T: Scalar>(g: &mut Graph<T>, logp: Var, pick: Vec<bool>, weights: Vec<f64>) -> Result<Option<Var>> {
    let total: f64 = weights.iter().sum();
    if weights.is_empty() || total <= 0.0 {
        return Ok(None);
    }
    let picked = g.mask_select(logp, pick)?;
    let n = weights.len();
    let w = Tensor::from_vec(&[n], weights.iter().map(|&w| T::of(w)).collect())?;
    let weighted = g.mul_const(picked, w)?;
    let s = g.sum(weighted);
    Ok(Some(g.scale(s, T::of(-1.0 / total))))
}

/// Valid, positively weighted `(i, j, w)` pairs in row-major order.
fn positives(nodes: &EmbeddingNodes, w: &DiagnosisWeights, keep: impl Fn(usize) -> bool) -> Vec<(usize, usize, f64)> {
    let mut out = Vec::new();
    for i in 0..nodes.n {
        for j in 0..nodes.slots {
            if nodes.mask[i * nodes.slots + j] && keep(j) && w.get(i, j) > 0.0 {
                out.push((i, j, w.get(i, j)));
            }
        }
    }
    out
}

fn text_to_image_nll<T: Scalar>(g: &mut Graph<T>, texts: Var, images: Var, inv_tau: Var, nodes: &EmbeddingNodes, pos: &[(usize, usize, f64)]) -> Result<Option<Var>> {
    let sim = g.matmul_nt(texts, images)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let logp = g.log_softmax_rows(logits, None)?;
    let mut pick = vec![false; nodes.n * nodes.slots * nodes.n];
    for &(i, j, _) in pos {
        pick[(i * nodes.slots + j) * nodes.n + i] = true;
    }
    weighted_nll(g, logp, pick, pos.iter().map(|p| p.2).collect())
}

/// Image→text contrastive loss: softmax over every valid contrastive text
/// carrying positive weight.
pub fn mkcl_i2t_graph<T: Scalar>(g: &mut Graph<T>, nodes: &EmbeddingNodes, w: &DiagnosisWeights, inv_tau: Var, cfg: &LossConfig) -> Result<Var> {
    let pos = positives(nodes, w, |j| cfg.mkcl_slot(j));
    if pos.is_empty() {
        return Err(Error::NoValidPairs);
    }
    if cfg.literal_eq3 {
        return text_to_image_nll(g, nodes.texts, nodes.visual, inv_tau, nodes, &pos)?.ok_or(Error::NoValidPairs);
    }
    let cols = nodes.n * nodes.slots;
    let col_valid: Vec<bool> = (0..cols).map(|c| nodes.mask[c] && cfg.mkcl_slot(c % nodes.slots) && w.w[c] > 0.0).collect();
    let sim = g.matmul_nt(nodes.visual, nodes.texts)?;
    let logits = g.mul_scalar(sim, inv_tau)?;
    let mask: Vec<bool> = (0..nodes.n).flat_map(|_| col_valid.iter().copied()).collect();
    let logp = g.log_softmax_rows(logits, Some(mask))?;
    let mut pick = vec![false; nodes.n * cols];
    for &(i, j, _) in &pos {
        pick[i * cols + i * nodes.slots + j] = true;
    }
    weighted_nll(g, logp, pick, pos.iter().map(|p| p.2).collect())?.ok_or(Error::NoValidPairs)
}

/// Text→image contrastive loss: softmax over the batch's images.
pub fn mkcl_t2i_graph<T: Scalar>(g: &mut Graph<T>, nodes: &EmbeddingNodes, w: &DiagnosisWeights, inv_tau: Var, cfg: &LossConfig) -> Result<Var> {
    let pos = positives(nodes, w, |j| cfg.mkcl_slot(j));
    if pos.is_empty() {
        return Err(Error::NoValidPairs);
    }
    text_to_image_nll(g, nodes.texts, nodes.visual, inv_tau, nodes, &pos)?.ok_or(Error::NoValidPairs)
}

/// Knowledge-enhanced image embeddings `[N, d]` (unit rows): each image's
/// patches pooled with the map of its raw-text/patch scores.
pub fn enhanced_embeddings_graph<T: Scalar>(g: &mut Graph<T>, nodes: &EmbeddingNodes, literal_eq5: bool) -> Result<Var> {
    let (n, hw, s) = (nodes.n, nodes.hw, nodes.slots);
    let raw = g.gather_rows(nodes.texts, (0..n).map(|i| Some(i * s + SLOT_RAW)).collect())?;
    let scores = g.matmul_nt(raw, nodes.patches)?;
    let block: Vec<bool> = (0..n * n * hw).map(|k| (k % (n * hw)) / hw == k / (n * hw)).collect();
    let own = g.mask_select(scores, block.clone())?;
    let own = g.reshape(own, &[n, hw])?;
    let z = if literal_eq5 { g.sum_normalize_rows(own)? } else { g.softmax_rows(own, None)? };
    let z = g.sum_normalize_rows(z)?;
    let spread = g.mask_scatter(z, block, &[n, n * hw])?;
    let pooled = g.matmul(spread, nodes.patches)?;
    Ok(g.l2_normalize_rows(pooled))
}

/// Subtext↔enhanced-image alignment loss; `None` when no subtext carries weight.
pub fn slra_graph<T: Scalar>(g: &mut Graph<T>, nodes: &EmbeddingNodes, w: &DiagnosisWeights, inv_tau: Var, literal_eq5: bool) -> Result<Option<Var>> {
    let pos = positives(nodes, w, |j| j >= KNOWLEDGE_SLOTS);
    if pos.is_empty() {
        return Ok(None);
    }
    let ek = enhanced_embeddings_graph(g, nodes, literal_eq5)?;
    text_to_image_nll(g, nodes.texts, ek, inv_tau, nodes, &pos)
}

/// Full objective `(i2t + t2i)/2 + λ·slra` with the configured parts.
pub fn total_loss_graph<T: Scalar>(g: &mut Graph<T>, nodes: &EmbeddingNodes, w: &DiagnosisWeights, inv_tau: Var, lambda: f64, cfg: &LossConfig) -> Result<LossNodes> {
    if w.n != nodes.n || w.slots != nodes.slots {
        return Err(Error::ShapeMismatch("weights do not match the batch".into()));
    }
    let mkcl_i2t = mkcl_i2t_graph(g, nodes, w, inv_tau, cfg)?;
    let mkcl_t2i = mkcl_t2i_graph(g, nodes, w, inv_tau, cfg)?;
    let sum = g.add(mkcl_i2t, mkcl_t2i)?;
    let mkcl = g.scale(sum, T::of(0.5));
    let slra = if cfg.slra { slra_graph(g, nodes, w, inv_tau, cfg.literal_eq5)? } else { None };
    let total = match slra {
        Some(s) => {
            let scaled = g.scale(s, T::of(lambda));
            g.add(mkcl, scaled)?
        }
        None => mkcl,
    };
    Ok(LossNodes { mkcl_i2t, mkcl_t2i, mkcl, slra, total })
}

/// Weights the objective uses for a batch under `cfg`.
pub fn weights_for<T: Scalar>(batch: &EmbeddingBatch<T>, cfg: &LossConfig) -> DiagnosisWeights {
    if cfg.dkw {
        diagnosis_weights(batch)
    } else {
        DiagnosisWeights::uniform(&batch.mask, batch.n(), batch.slots())
    }
}

fn with_graph<T: Scalar, R>(batch: &EmbeddingBatch<T>, tau: f64, f: impl FnOnce(&mut Graph<T>, &EmbeddingNodes, Var) -> Result<R>) -> Result<R> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!("temperature {tau} must be positive")));
    }
    let mut g = Graph::new();
    let nodes = batch.to_graph(&mut g)?;
    let inv_tau = g.constant(Tensor::scalar(T::of(1.0 / tau)));
    f(&mut g, &nodes, inv_tau)
}

/// `A · Bᵀ` for unit-row matrices.
pub fn cosine_similarity_matrix<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul_nt(va, vb)?;
    Ok(g.value(out).clone())
}

pub fn mkcl_i2t<T: Scalar>(batch: &EmbeddingBatch<T>, w: &DiagnosisWeights, tau: f64) -> Result<f64> {
    with_graph(batch, tau, |g, nodes, inv| {
        let l = mkcl_i2t_graph(g, nodes, w, inv, &LossConfig::full())?;
        Ok(g.value(l).item().f64())
    })
}

pub fn mkcl_t2i<T: Scalar>(batch: &EmbeddingBatch<T>, w: &DiagnosisWeights, tau: f64) -> Result<f64> {
    with_graph(batch, tau, |g, nodes, inv| {
        let l = mkcl_t2i_graph(g, nodes, w, inv, &LossConfig::full())?;
        Ok(g.value(l).item().f64())
    })
}

pub fn mkcl_total<T: Scalar>(batch: &EmbeddingBatch<T>, w: &DiagnosisWeights, tau: f64) -> Result<f64> {
    Ok((mkcl_i2t(batch, w, tau)? + mkcl_t2i(batch, w, tau)?) / 2.0)
}

/// Returns the loss and whether it was empty (no weighted subtexts).
pub fn slra_loss<T: Scalar>(batch: &EmbeddingBatch<T>, w: &DiagnosisWeights, tau: f64) -> Result<(f64, bool)> {
    with_graph(batch, tau, |g, nodes, inv| Ok(slra_graph(g, nodes, w, inv, false)?.map_or((0.0, true), |v| (g.value(v).item().f64(), false))))
}

/// Evaluates every component with weights derived per `cfg`.
pub fn total_loss<T: Scalar>(batch: &EmbeddingBatch<T>, params: &LossParams, cfg: &LossConfig) -> Result<LossBreakdown> {
    let w = weights_for(batch, cfg);
    total_loss_with_weights(batch, &w, params, cfg)
}

pub fn total_loss_with_weights<T: Scalar>(batch: &EmbeddingBatch<T>, w: &DiagnosisWeights, params: &LossParams, cfg: &LossConfig) -> Result<LossBreakdown> {
    with_graph(batch, params.tau, |g, nodes, inv| {
        let l = total_loss_graph(g, nodes, w, inv, params.lambda, cfg)?;
        Ok(LossBreakdown::read(g, &l, cfg.slra))
    })
}

/// Softmax over patches of the raw-text/patch scores.
pub fn similarity_map<T: Scalar>(raw_text: &[T], patches: &Tensor<T>) -> Result<Vec<T>> {
    if patches.cols() != raw_text.len() {
        return Err(Error::ShapeMismatch(format!("{}-d text vs {}-d patches", raw_text.len(), patches.cols())));
    }
    let mut g = Graph::new();
    let r = g.constant(Tensor::from_vec(&[1, raw_text.len()], raw_text.to_vec())?);
    let p = g.constant(patches.clone());
    let scores = g.matmul_nt(r, p)?;
    let z = g.softmax_rows(scores, None)?;
    Ok(g.value(z).data().to_vec())
}

/// `normalize(Σ_n v_n · z_n / Σ_j z_j)`.
pub fn knowledge_enhanced_embedding<T: Scalar>(patches: &Tensor<T>, z: &[T]) -> Result<Vec<T>> {
    if z.len() != patches.rows() {
        return Err(Error::ShapeMismatch(format!("{} weights for {} patches", z.len(), patches.rows())));
    }
    if z.iter().any(|&x| x < T::zero()) {
        return Err(Error::DegenerateMap);
    }
    let mut g = Graph::new();
    let zv = g.constant(Tensor::from_vec(&[1, z.len()], z.to_vec())?);
    let zn = g.sum_normalize_rows(zv)?;
    let p = g.constant(patches.clone());
    let pooled = g.matmul(zn, p)?;
    let out = g.l2_normalize_rows(pooled);
    Ok(g.value(out).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    /// Two samples, raw text only (other slots masked in `mask`), visual =
    /// texts = {[1,0],[0,1]}.
    fn orthogonal_pair() -> EmbeddingBatch<f64> {
        let visual = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let patches = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let texts = t(&[2, 3, 2], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let mask = vec![true, false, false, true, false, false];
        EmbeddingBatch::new(visual, patches, texts, mask).unwrap()
    }

    #[test]
    fn cosine_examples() {
        let a = t(&[1, 2], &[0.6, 0.8]);
        let b = t(&[2, 2], &[0.8, 0.6, -0.8, 0.6]);
        let s = cosine_similarity_matrix(&a, &b).unwrap();
        assert!((s.data()[0] - 0.96).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn orthogonal_closed_form() {
        let b = orthogonal_pair();
        let w = DiagnosisWeights::uniform(&b.mask, 2, 3);
        let expect = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((mkcl_i2t(&b, &w, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((mkcl_t2i(&b, &w, 1.0).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn single_sample_single_text_is_zero() {
        let b = EmbeddingBatch::new(t(&[1, 2], &[1.0, 0.0]), t(&[1, 1, 2], &[1.0, 0.0]), t(&[1, 3, 2], &[0.6, 0.8, 0.0, 0.0, 0.0, 0.0]), vec![true, false, false]).unwrap();
        let w = DiagnosisWeights::uniform(&b.mask, 1, 3);
        assert_eq!(mkcl_i2t(&b, &w, 0.5).unwrap(), 0.0);
        assert_eq!(mkcl_t2i(&b, &w, 0.5).unwrap(), 0.0);
        assert_eq!(mkcl_total(&b, &w, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn slra_orthogonal_and_empty_cases() {
        // e^k of each sample is its only patch; subtexts match their own image.
        let visual = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let patches = t(&[2, 1, 2], &[1.0, 0.0, 0.0, 1.0]);
        let texts = t(&[2, 4, 2], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        let b = EmbeddingBatch::new(visual, patches, texts, vec![true; 8]).unwrap();
        let w = DiagnosisWeights::uniform(&b.mask, 2, 4);
        let (v, empty) = slra_loss(&b, &w, 1.0).unwrap();
        assert!(!empty);
        assert!((v - 0.313_261_687_518_222_8).abs() < 1e-12);

        let mut none = b.clone();
        none.mask = vec![true, true, true, false, true, true, true, false];
        let w = DiagnosisWeights::uniform(&none.mask, 2, 4);
        assert_eq!(slra_loss(&none, &w, 1.0).unwrap(), (0.0, true));
    }

    #[test]
    fn similarity_map_examples() {
        let same = t(&[3, 2], &[0.3, 0.4, 0.3, 0.4, 0.3, 0.4]);
        let z = similarity_map(&[1.0, 0.0], &same).unwrap();
        assert!(z.iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-12));
        let two = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let z = similarity_map(&[1.0, 0.0], &two).unwrap();
        assert!((z[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((z[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
    }

    #[test]
    fn enhanced_embedding_examples() {
        let two = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let e = knowledge_enhanced_embedding(&two, &[0.731_058_578_630_004_9, 0.268_941_421_369_995_1]).unwrap();
        let norm = (0.731_058_578_630_004_9f64.powi(2) + 0.268_941_421_369_995_1f64.powi(2)).sqrt();
        assert!((e[0] - 0.731_058_578_630_004_9 / norm).abs() < 1e-12);
        assert!((e[1] - 0.268_941_421_369_995_1 / norm).abs() < 1e-12);
        // Five-figure rounding of the same numbers.
        assert!((e[0] - 0.93852).abs() < 5e-5 && (e[1] - 0.34525).abs() < 5e-5);
        let p = t(&[2, 2], &[3.0, 4.0, 1.0, 1.0]);
        assert_eq!(knowledge_enhanced_embedding(&p, &[1.0, 0.0]).unwrap(), vec![0.6, 0.8]);
        assert!(matches!(knowledge_enhanced_embedding(&p, &[0.0, 0.0]), Err(Error::DegenerateMap)));
    }

    #[test]
    fn weight_examples() {
        assert_eq!(normalize_weights(&[0.8, 0.4]), vec![1.0, 0.5]);
        let w = normalize_weights(&[0.5, -0.2]);
        assert_eq!(w[0], 1.0);
        assert!((w[1] - 0.002).abs() < 1e-15);
        assert_eq!(normalize_weights(&[0.3, 0.3]), vec![1.0, 1.0]);
    }

    #[test]
    fn diagnosis_weights_layout() {
        // Sample 0: disease [1,0]; subtexts [1,0] (sim 1) and [0.6,0.8] (sim 0.6); last slot padded.
        let visual = t(&[1, 2], &[1.0, 0.0]);
        let patches = t(&[1, 1, 2], &[1.0, 0.0]);
        let texts = t(&[1, 6, 2], &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.6, 0.8, 0.0, 0.0]);
        let b = EmbeddingBatch::new(visual, patches, texts, vec![true, true, true, true, true, false]).unwrap();
        let w = diagnosis_weights(&b);
        assert_eq!(w.row(0)[..3], [1.0, 1.0, 1.0]);
        assert!((w.get(0, 3) - 1.0).abs() < 1e-15);
        assert!((w.get(0, 4) - 0.6).abs() < 1e-15);
        assert_eq!(w.get(0, 5), 0.0);
    }

    #[test]
    fn lambda_zero_gives_mkcl_exactly() {
        let b = orthogonal_pair();
        let mut full = b.clone();
        full.mask = vec![true; 6];
        // Make all slots unit vectors.
        full.texts = t(&[2, 3, 2], &[1.0, 0.0, 0.6, 0.8, 0.0, 1.0, 0.0, 1.0, 0.8, 0.6, 1.0, 0.0]);
        let p = LossParams::new(0.5, 0.0).unwrap();
        let l = total_loss(&full, &p, &LossConfig::full()).unwrap();
        assert_eq!(l.total, l.mkcl);
        assert_eq!(l.mkcl, (l.mkcl_i2t + l.mkcl_t2i) / 2.0);
    }

    #[test]
    fn loss_params_clamp_tau() {
        assert_eq!(LossParams::new(100.0, 0.7).unwrap().tau, TAU_MAX);
        assert_eq!(LossParams::new(1e-6, 0.7).unwrap().tau, TAU_MIN);
        assert!(LossParams::new(0.0, 0.7).is_err());
        assert!(LossParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn literal_eq3_makes_directions_equal() {
        let mut b = orthogonal_pair();
        b.visual = t(&[2, 2], &[0.6, 0.8, 0.0, 1.0]);
        let w = DiagnosisWeights::uniform(&b.mask, 2, 3);
        let cfg = LossConfig { literal_eq3: true, ..LossConfig::full() };
        let l = total_loss_with_weights(&b, &w, &LossParams::new(0.3, 0.7).unwrap(), &cfg).unwrap();
        assert_eq!(l.mkcl_i2t, l.mkcl_t2i);
    }
}
