//! Evaluation protocol: word/char accuracy, per-iteration accuracy
//! curves, single-image prediction, and reconstruction dumps.

use crate::data::{DatasetManifest, ImageSample};
use crate::error::Error;
use crate::model::{text_tokens, MvltModel, TextInput};
use crate::rng::{self, tag};
use crate::tensor::Tape;
use crate::text::{decode_prediction, encode_label, sample_text_mask, TextMaskPlan};
use crate::vision::{patchify, sample_patch_mask, unpatchify, PatchSequence};
use crate::Result;
use serde::{Deserialize, Serialize};

/// Accuracy summary over a labeled dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub word_accuracy: f64,
    pub char_accuracy: f64,
    pub sample_count: usize,
    /// Word accuracy when stopping after iteration k, for k = 0..=K.
    pub per_iteration_accuracy: Vec<f64>,
    pub config_hash: String,
}

/// Logits of every correction iteration for one image.
pub fn iteration_logits(model: &MvltModel, patches: &PatchSequence, k: usize) -> Vec<Vec<f64>> {
    let mut tape = Tape::new(&model.store);
    let encoded = model.encode_full(&mut tape, patches);
    let logits = model.iterative_correct(&mut tape, encoded, k);
    logits.iter().map(|&n| tape.value(n).to_vec()).collect()
}

/// Predicted word after each iteration (`K+1` entries, last is final).
pub fn predict(model: &MvltModel, image: &ImageSample, k: usize) -> Result<Vec<String>> {
    check_dims(model, image)?;
    let patches = patchify(image, model.config.p)?;
    let logits = iteration_logits(model, &patches, k);
    Ok(logits
        .iter()
        .map(|l| decode_prediction(l, model.config.l, model.config.m))
        .collect())
}

fn check_dims(model: &MvltModel, image: &ImageSample) -> Result<()> {
    let cfg = &model.config;
    if (image.h, image.w, image.c) != (cfg.h, cfg.w, cfg.c) {
        return Err(Error::Data(format!(
            "image is {}x{}x{}, model expects {}x{}x{}",
            image.h, image.w, image.c, cfg.h, cfg.w, cfg.c
        )));
    }
    Ok(())
}

/// Evaluate word accuracy on a labeled manifest with `K` correction
/// iterations. Samples are scored sequentially; the final word comes from
/// the last iteration, and each intermediate iteration contributes to the
/// accuracy curve. Char accuracy scores positions up to and including the
/// first end-of-word class of the target.
pub fn evaluate(model: &MvltModel, manifest: &DatasetManifest, k: usize) -> Result<EvalReport> {
    if !manifest.labeled {
        return Err(Error::Data(
            "evaluation needs a labeled manifest".into(),
        ));
    }
    let cfg = &model.config;
    let mut word_hits = vec![0usize; k + 1];
    let mut char_hits = 0usize;
    let mut char_total = 0usize;
    for i in 0..manifest.len() {
        let image = manifest.load_image(i)?;
        check_dims(model, &image)?;
        let label = manifest.label(i)?.to_ascii_lowercase();
        let targets = encode_label(&label, cfg.l)?;
        let patches = patchify(&image, cfg.p)?;
        let logits = iteration_logits(model, &patches, k);
        for (iter, l) in logits.iter().enumerate() {
            if decode_prediction(l, cfg.l, cfg.m) == label {
                word_hits[iter] += 1;
            }
        }
        let last = logits.last().expect("at least one iteration");
        for pos in 0..=targets.word_len {
            let row = &last[pos * cfg.m..(pos + 1) * cfg.m];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best == targets.indices[pos] {
                char_hits += 1;
            }
            char_total += 1;
        }
    }
    let n = manifest.len();
    Ok(EvalReport {
        word_accuracy: word_hits[k] as f64 / n as f64,
        char_accuracy: char_hits as f64 / char_total as f64,
        sample_count: n,
        per_iteration_accuracy: word_hits.iter().map(|&h| h as f64 / n as f64).collect(),
        config_hash: cfg.hash(),
    })
}

/// The four panels of a reconstruction dump plus both text predictions.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// Input with masked patches zeroed.
    pub masked_input: ImageSample,
    /// Explicit-view reconstruction (predicted pixels at masked slots,
    /// original pixels at unmasked slots) and its text decode.
    pub explicit_recon: ImageSample,
    pub explicit_text: String,
    /// Implicit-view reconstruction and text decode.
    pub implicit_recon: ImageSample,
    pub implicit_text: String,
    /// Unmodified input.
    pub ground_truth: ImageSample,
    pub masked_patches: usize,
}

/// Run both decoding views on one masked image and assemble the dump.
///
/// The explicit view needs a label for its visible characters; without one
/// it degenerates to the all-masked input (same as the implicit view).
pub fn reconstruct(
    model: &MvltModel,
    image: &ImageSample,
    label: Option<&str>,
    seed: u64,
) -> Result<Reconstruction> {
    check_dims(model, image)?;
    let cfg = &model.config;
    let patches = patchify(image, cfg.p)?;
    let mut r = rng::stream(seed, &[tag::EVAL]);
    let plan = sample_patch_mask(cfg.num_patches(), cfg.patch_mask_ratio, &mut r);

    let mut masked = patches.clone();
    for &i in &plan.masked {
        masked.data[i * patches.patch_len..(i + 1) * patches.patch_len].fill(0.0);
    }
    let masked_input = unpatchify(&masked)?;

    let explicit_plan = match label {
        Some(word) => {
            let targets = encode_label(word, cfg.l)?;
            let plan =
                sample_text_mask(targets.word_len, cfg.text_mask_ratio_explicit, cfg.l, &mut r);
            Some((targets, plan))
        }
        None => None,
    };

    let mut tape = Tape::new(&model.store);
    let encoded = model.encode_masked(&mut tape, &patches, &plan);

    let decode_view = |tape: &mut Tape, tokens: &[usize], text_plan: &TextMaskPlan| {
        model.decode(tape, encoded, &plan, TextInput::Tokens(tokens), text_plan)
    };

    let implicit_plan = TextMaskPlan::full(cfg.l);
    let mask_ids = vec![model.mask_token_id(); cfg.l];

    let (explicit_out, implicit_out) = {
        let explicit = match &explicit_plan {
            Some((targets, tplan)) => {
                let tokens = text_tokens(&targets.indices, tplan, model.mask_token_id());
                decode_view(&mut tape, &tokens, tplan)
            }
            None => decode_view(&mut tape, &mask_ids, &implicit_plan),
        };
        let implicit = decode_view(&mut tape, &mask_ids, &implicit_plan);
        (explicit, implicit)
    };

    let compose = |tape: &Tape, v_full: crate::tensor::NodeId| -> Result<ImageSample> {
        // Predicted pixels at masked slots, original pixels elsewhere.
        let pred = tape.value(v_full);
        let mut composed = patches.clone();
        for &i in &plan.masked {
            let range = i * patches.patch_len..(i + 1) * patches.patch_len;
            composed.data[range.clone()].copy_from_slice(&pred[range]);
        }
        unpatchify(&composed)
    };

    let explicit_recon = compose(&tape, explicit_out.v_full)?;
    let implicit_recon = compose(&tape, implicit_out.v_full)?;
    let explicit_text = decode_prediction(tape.value(explicit_out.t_full), cfg.l, cfg.m);
    let implicit_text = decode_prediction(tape.value(implicit_out.t_full), cfg.l, cfg.m);

    Ok(Reconstruction {
        masked_input,
        explicit_recon,
        explicit_text,
        implicit_recon,
        implicit_text,
        ground_truth: image.clone(),
        masked_patches: plan.masked.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::data::{make_dataset, CanvasSize, WordSource};

    fn small_model() -> MvltModel {
        let cfg = ModelConfig {
            h: 16,
            w: 32,
            c: 1,
            p: 4,
            d1: 16,
            d2: 8,
            enc_depth: 1,
            enc_heads: 2,
            dec_depth: 1,
            dec_heads: 2,
            l: 5,
            m: 37,
            ..ModelConfig::toy()
        };
        MvltModel::new(cfg, 3).unwrap()
    }

    fn small_dataset(n: usize, labeled: bool) -> (tempfile::TempDir, DatasetManifest) {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(
            n,
            17,
            &WordSource::Random {
                min_len: 2,
                max_len: 4,
            },
            dir.path(),
            labeled,
            CanvasSize { h: 16, w: 32, c: 1 },
            0,
        )
        .unwrap();
        (dir, m)
    }

    #[test]
    fn eval_report_shape() {
        let model = small_model();
        let (_dir, manifest) = small_dataset(6, true);
        let report = evaluate(&model, &manifest, 3).unwrap();
        assert_eq!(report.sample_count, 6);
        assert_eq!(report.per_iteration_accuracy.len(), 4);
        assert!((0.0..=1.0).contains(&report.word_accuracy));
        assert!((0.0..=1.0).contains(&report.char_accuracy));
        assert_eq!(report.config_hash, model.config.hash());
        assert_eq!(report.word_accuracy, report.per_iteration_accuracy[3]);
    }

    #[test]
    fn eval_refuses_unlabeled_manifests() {
        let model = small_model();
        let (_dir, manifest) = small_dataset(4, false);
        assert!(evaluate(&model, &manifest, 0).is_err());
    }

    #[test]
    fn predict_is_deterministic_and_sized() {
        let model = small_model();
        let (_dir, manifest) = small_dataset(2, true);
        let image = manifest.load_image(0).unwrap();
        let a = predict(&model, &image, 3).unwrap();
        let b = predict(&model, &image, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        let single = predict(&model, &image, 0).unwrap();
        assert_eq!(single.len(), 1);
    }

    #[test]
    fn predict_rejects_wrong_dimensions() {
        let model = small_model();
        let image = ImageSample {
            pixels: vec![0.0; 8 * 8],
            h: 8,
            w: 8,
            c: 1,
            label: None,
            sample_id: String::new(),
        };
        assert!(predict(&model, &image, 0).is_err());
    }

    #[test]
    fn eval_k0_equals_plain_decode_bitwise() {
        // Stopping at iteration 0 must be exactly the single decode.
        let model = small_model();
        let (_dir, manifest) = small_dataset(2, true);
        let image = manifest.load_image(0).unwrap();
        let patches = patchify(&image, model.config.p).unwrap();
        let via_eval = iteration_logits(&model, &patches, 0);

        let mut tape = Tape::new(&model.store);
        let encoded = model.encode_full(&mut tape, &patches);
        let plan = crate::vision::PatchMaskPlan::empty(model.config.num_patches());
        let tokens = vec![model.mask_token_id(); model.config.l];
        let text_plan = TextMaskPlan::full(model.config.l);
        let out = model.decode(
            &mut tape,
            encoded,
            &plan,
            TextInput::Tokens(&tokens),
            &text_plan,
        );
        assert_eq!(via_eval[0], tape.value(out.t_full));
    }

    #[test]
    fn reconstruction_panels_have_input_dimensions() {
        let model = small_model();
        let (_dir, manifest) = small_dataset(2, true);
        let image = manifest.load_image(0).unwrap();
        let label = image.label.clone();
        let dump = reconstruct(&model, &image, label.as_deref(), 5).unwrap();
        for panel in [
            &dump.masked_input,
            &dump.explicit_recon,
            &dump.implicit_recon,
            &dump.ground_truth,
        ] {
            assert_eq!((panel.h, panel.w, panel.c), (image.h, image.w, image.c));
        }
        // Expected masked-patch count for the configured ratio.
        let n = model.config.num_patches();
        let expect = (model.config.patch_mask_ratio * n as f64).round() as usize;
        assert_eq!(dump.masked_patches, expect);
    }

    #[test]
    fn reconstruction_keeps_unmasked_pixels_bit_exact() {
        let model = small_model();
        let (_dir, manifest) = small_dataset(2, true);
        let image = manifest.load_image(1).unwrap();
        let dump = reconstruct(&model, &image, image.label.as_deref(), 5).unwrap();

        // Masked input: exactly the masked patches zeroed.
        let patches = patchify(&image, model.config.p).unwrap();
        let masked_patches = patchify(&dump.masked_input, model.config.p).unwrap();
        let plen = patches.patch_len;
        let mut zeroed = 0;
        for i in 0..patches.n {
            let orig = &patches.data[i * plen..(i + 1) * plen];
            let got = &masked_patches.data[i * plen..(i + 1) * plen];
            if got.iter().all(|&v| v == 0.0) && orig.iter().any(|&v| v != 0.0) {
                zeroed += 1;
            } else {
                assert_eq!(got, orig, "unmasked patch {i} altered");
            }
        }
        assert_eq!(zeroed, dump.masked_patches);

        // Reconstructions: unmasked patches carry the original pixels.
        let recon_patches = patchify(&dump.implicit_recon, model.config.p).unwrap();
        for i in 0..patches.n {
            let orig = &patches.data[i * plen..(i + 1) * plen];
            let got = &recon_patches.data[i * plen..(i + 1) * plen];
            let masked_in_dump = masked_patches.data[i * plen..(i + 1) * plen]
                .iter()
                .all(|&v| v == 0.0)
                && orig.iter().any(|&v| v != 0.0);
            if !masked_in_dump {
                assert_eq!(got, orig);
            }
        }
    }
}
