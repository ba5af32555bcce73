mod common;

use common::{dotp, random_batch, unit};
use make_core::corpus::{build_batch, decompose_raw_text, stub_knowledge_extract, synth_generate, Image, SynthConfig, KNOWLEDGE_SLOTS};
use make_core::encoders::{tokenize, DualEncoder, ModelConfig, TextEncoderConfig, VisionEncoderConfig, EOT_ID, PAD_ID};
use make_core::evaluator::{argmax, auroc, retrieval_recall, zero_shot_classify};
use make_core::losses::{normalize_weights, similarity_map, total_loss, DiagnosisWeights, LossConfig, LossParams};
use make_core::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn loss_is_batch_permutation_invariant(seed in any::<u64>(), n in 1usize..6, k in 0usize..4, d in 2usize..10, hw in 1usize..5, tau in 0.01f64..3.0, perm_seed in any::<u64>()) {
        let b = random_batch(&mut rng(seed), n, k, d, hw, 0.6);
        let mut perm: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng(perm_seed));
        let p = LossParams::new(tau, 0.7).unwrap();
        let a = total_loss(&b, &p, &LossConfig::full()).unwrap();
        let c = total_loss(&b.permuted(&perm).unwrap(), &p, &LossConfig::full()).unwrap();
        for (x, y) in [(a.mkcl_i2t, c.mkcl_i2t), (a.mkcl_t2i, c.mkcl_t2i), (a.mkcl, c.mkcl), (a.slra, c.slra), (a.total, c.total)] {
            prop_assert!((x - y).abs() <= 1e-6, "{x} vs {y}");
        }
        prop_assert_eq!(a.no_subtexts, c.no_subtexts);
    }

    #[test]
    fn single_sample_batches(seed in any::<u64>(), k in 0usize..4, d in 2usize..10, hw in 1usize..5, tau in 0.001f64..10.0) {
        let b = random_batch(&mut rng(seed), 1, k, d, hw, 0.5);
        let l = total_loss(&b, &LossParams::new(tau, 0.7).unwrap(), &LossConfig::full()).unwrap();
        prop_assert_eq!(l.mkcl_t2i, 0.0);
        prop_assert_eq!(l.slra, 0.0);
        // Three knowledge texts are always valid, so the image sees several candidates.
        prop_assert!(l.mkcl_i2t > 0.0);
        prop_assert!(l.all_finite());
    }

    #[test]
    fn weights_ignore_positive_scaling(raw in prop::collection::vec(1e-3f64..1.0, 1..8), c in 1.0f64..50.0) {
        let a = normalize_weights(&raw);
        let b = normalize_weights(&raw.iter().map(|r| r * c).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!(a.iter().all(|&w| w > 0.0 && w <= 1.0));
        prop_assert_eq!(a.iter().copied().fold(0.0, f64::max), 1.0);
    }

    #[test]
    fn similarity_map_is_shift_invariant(seed in any::<u64>(), d in 1usize..8, hw in 1usize..8, shift in -5.0f64..5.0) {
        let mut r = rng(seed);
        let text = unit(&mut r, d);
        let patches: Vec<f64> = (0..hw).flat_map(|_| unit(&mut r, d)).collect();
        let z = similarity_map(&text, &Tensor::from_vec(&[hw, d], patches.clone()).unwrap()).unwrap();
        prop_assert!((z.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // Adding shift·text to every patch adds `shift` to every score.
        let moved: Vec<f64> = patches.iter().enumerate().map(|(i, v)| v + shift * text[i % d]).collect();
        let zm = similarity_map(&text, &Tensor::from_vec(&[hw, d], moved).unwrap()).unwrap();
        for (a, b) in z.iter().zip(&zm) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn recall_is_monotone_and_complete(seed in any::<u64>(), n in 1usize..25, d in 2usize..8) {
        let mut r = rng(seed);
        let img = Tensor::from_vec(&[n, d], (0..n).flat_map(|_| unit(&mut r, d)).collect()).unwrap();
        let txt = Tensor::from_vec(&[n, d], (0..n).flat_map(|_| unit(&mut r, d)).collect()).unwrap();
        let ks: Vec<usize> = (1..=n).collect();
        let rec = retrieval_recall(&img, &txt, &ks).unwrap();
        for dir in [&rec.image_to_text, &rec.text_to_image] {
            prop_assert!(dir.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(dir[n - 1], 1.0);
        }
        prop_assert!(!rec.k_exceeds_corpus);
    }

    #[test]
    fn auroc_transform_and_complement(pairs in prop::collection::vec((0u8..10, any::<bool>()), 2..40)) {
        let scores: Vec<f64> = pairs.iter().map(|p| f64::from(p.0)).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let Some(a) = auroc(&scores, &labels) else { return Ok(()) };
        let moved: Vec<f64> = scores.iter().map(|s| (s / 3.0).exp() - 7.0).collect();
        prop_assert_eq!(auroc(&moved, &labels), Some(a));
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auroc(&scores, &flipped).unwrap() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn classification_survives_monotone_maps(seed in any::<u64>(), n in 1usize..10, c in 2usize..6, d in 2usize..8, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let img = Tensor::from_vec(&[n, d], (0..n).flat_map(|_| unit(&mut r, d)).collect()).unwrap();
        let cls = Tensor::from_vec(&[c, d], (0..c).flat_map(|_| unit(&mut r, d)).collect()).unwrap();
        let labels = vec![0; n];
        let a = zero_shot_classify(&img, &cls, &labels).unwrap();
        let b = zero_shot_classify(&img, &cls.map(|x| x * scale), &labels).unwrap();
        prop_assert_eq!(&a.predictions, &b.predictions);
        for i in 0..n {
            let scores: Vec<f64> = (0..c).map(|j| dotp(img.row(i), cls.row(j))).collect();
            let moved: Vec<f64> = scores.iter().map(|s| s.powi(3) + 2.0 * s).collect();
            prop_assert_eq!(argmax(&scores), argmax(&moved));
            prop_assert_eq!(a.predictions[i], argmax(&scores));
        }
    }

    #[test]
    fn tokenizer_layout(text in "[a-z0-9 ,.;-]{0,120}", limit in 1usize..40, vocab in 3usize..5000) {
        let ids = tokenize(&text, limit, vocab);
        prop_assert_eq!(ids.len(), limit);
        prop_assert!(ids.iter().all(|&id| (id as usize) < vocab));
        let eot = ids.iter().position(|&id| id == EOT_ID).unwrap();
        prop_assert!(ids[..eot].iter().all(|&id| id != PAD_ID && id != EOT_ID));
        prop_assert!(ids[eot + 1..].iter().all(|&id| id == PAD_ID));
    }

    #[test]
    fn decompose_round_trips(raw in "[a-zA-Z .!?]{0,80}") {
        let parts = decompose_raw_text(&raw);
        prop_assert_eq!(decompose_raw_text(&parts.join(". ")), parts.clone());
        prop_assert!(parts.iter().all(|p| !p.is_empty() && !p.contains(['.', '!', '?'])));
    }

    #[test]
    fn knowledge_extraction_is_pure(raw in "[a-z ]{0,60}") {
        let diseases = vec!["eczema".to_string(), "psoriasis".to_string()];
        let concepts = vec!["scale".to_string(), "plaque".to_string()];
        prop_assert_eq!(stub_knowledge_extract(&raw, &diseases, &concepts), stub_knowledge_extract(&raw, &diseases, &concepts));
    }
}

fn tiny_model(image_size: usize, patch_size: usize) -> ModelConfig {
    ModelConfig {
        vision: VisionEncoderConfig { image_size, patch_size, embed_dim: 8, depth: 1, heads: 2 },
        text: TextEncoderConfig { vocab_size: 64, context_length: 12, embed_dim: 8, depth: 1, heads: 2 },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn encoders_emit_unit_vectors_deterministically(seed in any::<u64>(), grid in 1usize..4, patch in 2usize..5, text in "[a-z ]{0,40}") {
        let size = grid * patch;
        let enc = DualEncoder::init(tiny_model(size, patch), seed).unwrap();
        let pixels: Vec<u8> = (0..size * size * 3).map(|i| (i as u64).wrapping_mul(seed | 1) as u8).collect();
        let img = Image::new(size, pixels).unwrap();
        let v = enc.encode_image(&img).unwrap();
        prop_assert_eq!(v.patches.rows(), grid * grid);
        let norm = v.pooled.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-6, "pooled norm {norm}");
        let t = enc.encode_text(&enc.tokenize(&text)).unwrap();
        let tn = t.vector.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        prop_assert!((tn - 1.0).abs() <= 1e-6, "text norm {tn}");
        prop_assert_eq!(enc.encode_image(&img).unwrap(), v);
        prop_assert_eq!(enc.encode_text(&enc.tokenize(&text)).unwrap(), t);
    }

    #[test]
    fn batches_mark_knowledge_and_subtext_prefix(seed in 0u64..1000, k in 0usize..5) {
        let corpus = synth_generate(&SynthConfig { n_classes: 2, samples_per_class: 3, image_size: 8, patch_size: 4, seed }).unwrap();
        let refs: Vec<_> = corpus.records.iter().collect();
        let b = build_batch(&refs, k, &corpus.images, 8).unwrap();
        for row in &b.mask {
            prop_assert_eq!(row.len(), k + KNOWLEDGE_SLOTS);
            prop_assert!(row[..KNOWLEDGE_SLOTS].iter().all(|&m| m));
            let sub = &row[KNOWLEDGE_SLOTS..];
            let valid = sub.iter().take_while(|&&m| m).count();
            prop_assert!(sub[valid..].iter().all(|&m| !m));
        }
    }

    #[test]
    fn synthesis_is_seeded(seed in 0u64..1000) {
        let cfg = SynthConfig { n_classes: 2, samples_per_class: 2, image_size: 8, patch_size: 4, seed };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        let c = synth_generate(&SynthConfig { seed: seed + 1, ..cfg }).unwrap();
        let pixels = |m: &make_core::corpus::CorpusManifest| -> Vec<Vec<u8>> {
            m.records.iter().map(|r| m.images.get(&r.base.image_ref).unwrap().to_ppm()).collect()
        };
        prop_assert_eq!(&a.records, &b.records);
        prop_assert_eq!(pixels(&a), pixels(&b));
        prop_assert_ne!(pixels(&a), pixels(&c));
    }
}

#[test]
fn uniform_weights_follow_the_mask() {
    let w = DiagnosisWeights::uniform(&[true, false, true], 1, 3);
    assert_eq!(w.row(0), [1.0, 0.0, 1.0]);
}
