//! The masked vision-language network: a ViT encoder that sees only
//! unmasked patches, a multi-modal transformer decoder over visual and
//! character tokens, pixel/character output heads, and the fine-tuning
//! iterative-correction loop.
//!
//! The two text-masking views ("explicit", ratio 0.2, and "implicit",
//! ratio 1.0) are plain `decode` calls against the same parameter set —
//! there is exactly one decoder in the store, so sharing is structural.

use crate::config::ModelConfig;
use crate::param::{LayerGroup, ParamId, ParamKind, ParameterStore};
use crate::rng::{self, tag};
use crate::tensor::{NodeId, Tape};
use crate::text::TextMaskPlan;
use crate::vision::{PatchMaskPlan, PatchSequence};
use crate::Result;
use rand::Rng;
use rand_distr::StandardNormal;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct NormIds {
    pub scale: ParamId,
    pub shift: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub ln1: NormIds,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2: NormIds,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Resolved parameter ids for every piece of the network.
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub patch_embed: LinearIds,
    pub enc_pos: ParamId,
    pub enc_blocks: Vec<BlockIds>,
    pub enc_norm: NormIds,
    pub enc_to_dec: LinearIds,
    pub mask_token: ParamId,
    pub vis_pos: ParamId,
    pub text_pos: ParamId,
    pub char_embed: ParamId,
    pub dec_blocks: Vec<BlockIds>,
    pub dec_norm: NormIds,
    pub pixel_head: LinearIds,
    pub char_head: LinearIds,
    pub correction: LinearIds,
}

/// Text-side decoder input.
pub enum TextInput<'a> {
    /// Per-position embedding-table rows: char ids at unmasked positions,
    /// the MASK id (= M) elsewhere.
    Tokens(&'a [usize]),
    /// Precomputed `[L, D2]` embeddings (the correction path); positional
    /// embeddings are still added inside `decode`.
    Embedded(NodeId),
}

/// The four split decoder outputs plus the unsplit head outputs.
/// Row counts of the split views match the plans that produced them;
/// fields are `None` when the corresponding index set is empty.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    pub v_m: Option<NodeId>,
    pub v_u: Option<NodeId>,
    pub t_m: Option<NodeId>,
    pub t_u: Option<NodeId>,
    /// All `N` pixel-head rows in grid order.
    pub v_full: NodeId,
    /// All `L` char-head rows in position order.
    pub t_full: NodeId,
}

/// Parameter collection plus the forward graphs that use it.
#[derive(Debug)]
pub struct MvltModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub ids: ParamIds,
}

fn truncated_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

struct Builder<'r, R: Rng> {
    store: ParameterStore,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn matrix(&mut self, name: String, group: LayerGroup, rows: usize, cols: usize) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| truncated_normal(self.rng, INIT_STD))
            .collect();
        self.store
            .add(name, ParamKind::Matrix, group, vec![rows, cols], data)
    }

    fn bias(&mut self, name: String, group: LayerGroup, len: usize) -> ParamId {
        self.store
            .add(name, ParamKind::Bias, group, vec![len], vec![0.0; len])
    }

    fn embedding(&mut self, name: String, group: LayerGroup, rows: usize, cols: usize) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| truncated_normal(self.rng, INIT_STD))
            .collect();
        self.store
            .add(name, ParamKind::Embedding, group, vec![rows, cols], data)
    }

    fn norm(&mut self, prefix: &str, group: LayerGroup, len: usize) -> NormIds {
        NormIds {
            scale: self.store.add(
                format!("{prefix}.scale"),
                ParamKind::Norm,
                group,
                vec![len],
                vec![1.0; len],
            ),
            shift: self.store.add(
                format!("{prefix}.shift"),
                ParamKind::Norm,
                group,
                vec![len],
                vec![0.0; len],
            ),
        }
    }

    fn linear(&mut self, prefix: &str, group: LayerGroup, rows: usize, cols: usize) -> LinearIds {
        LinearIds {
            weight: self.matrix(format!("{prefix}.weight"), group, rows, cols),
            bias: self.bias(format!("{prefix}.bias"), group, cols),
        }
    }

    fn block(&mut self, prefix: &str, group: LayerGroup, d: usize) -> BlockIds {
        let hidden = 4 * d;
        BlockIds {
            ln1: self.norm(&format!("{prefix}.ln1"), group, d),
            wq: self.matrix(format!("{prefix}.attn.wq"), group, d, d),
            bq: self.bias(format!("{prefix}.attn.bq"), group, d),
            wk: self.matrix(format!("{prefix}.attn.wk"), group, d, d),
            bk: self.bias(format!("{prefix}.attn.bk"), group, d),
            wv: self.matrix(format!("{prefix}.attn.wv"), group, d, d),
            bv: self.bias(format!("{prefix}.attn.bv"), group, d),
            wo: self.matrix(format!("{prefix}.attn.wo"), group, d, d),
            bo: self.bias(format!("{prefix}.attn.bo"), group, d),
            ln2: self.norm(&format!("{prefix}.ln2"), group, d),
            w1: self.matrix(format!("{prefix}.mlp.w1"), group, d, hidden),
            b1: self.bias(format!("{prefix}.mlp.b1"), group, hidden),
            w2: self.matrix(format!("{prefix}.mlp.w2"), group, hidden, d),
            b2: self.bias(format!("{prefix}.mlp.b2"), group, d),
        }
    }
}

impl MvltModel {
    /// Build a model with truncated-normal(σ=0.02) weights, zero biases,
    /// and unit norm scales, all drawn from `seed` in a fixed order.
    pub fn new(config: ModelConfig, seed: u64) -> Result<MvltModel> {
        config.validate()?;
        let mut init_rng = rng::stream(seed, &[tag::INIT]);
        let mut b = Builder {
            store: ParameterStore::new(),
            rng: &mut init_rng,
        };
        let n = config.num_patches();
        let (d1, d2) = (config.d1, config.d2);

        let patch_embed = b.linear("patch_embed", LayerGroup::Input, config.patch_len(), d1);
        let enc_pos = b.embedding("enc.pos".into(), LayerGroup::Input, n, d1);
        let enc_blocks = (0..config.enc_depth)
            .map(|i| b.block(&format!("enc.block{i}"), LayerGroup::EncoderBlock(i), d1))
            .collect();
        let enc_norm = b.norm("enc.norm", LayerGroup::Head, d1);
        let enc_to_dec = b.linear("enc_to_dec", LayerGroup::Head, d1, d2);
        let mask_token = b.embedding("dec.mask_token".into(), LayerGroup::Head, 1, d2);
        let vis_pos = b.embedding("dec.vis_pos".into(), LayerGroup::Head, n, d2);
        let text_pos = b.embedding("dec.text_pos".into(), LayerGroup::Head, config.l, d2);
        let char_embed = b.embedding("dec.char_embed".into(), LayerGroup::Head, config.m + 1, d2);
        let dec_blocks = (0..config.dec_depth)
            .map(|i| b.block(&format!("dec.block{i}"), LayerGroup::Head, d2))
            .collect();
        let dec_norm = b.norm("dec.norm", LayerGroup::Head, d2);
        let pixel_head = b.linear("head.pixel", LayerGroup::Head, d2, config.patch_len());
        let char_head = b.linear("head.char", LayerGroup::Head, d2, config.m);
        let correction = b.linear("head.correction", LayerGroup::Head, config.m, d2);

        Ok(MvltModel {
            config,
            store: b.store,
            ids: ParamIds {
                patch_embed,
                enc_pos,
                enc_blocks,
                enc_norm,
                enc_to_dec,
                mask_token,
                vis_pos,
                text_pos,
                char_embed,
                dec_blocks,
                dec_norm,
                pixel_head,
                char_head,
                correction,
            },
        })
    }

    /// MASK token id in the character embedding table.
    pub fn mask_token_id(&self) -> usize {
        self.config.m
    }

    /// Ids of the parameters shared by the two decoding views (everything
    /// from the decoder itself through the output heads).
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("dec.") || p.name.starts_with("head."))
            .map(|(id, _)| id)
            .collect()
    }

    fn linear(&self, tape: &mut Tape, x: NodeId, ids: LinearIds) -> NodeId {
        let w = tape.param(ids.weight);
        let b = tape.param(ids.bias);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }

    fn norm(&self, tape: &mut Tape, x: NodeId, ids: NormIds) -> NodeId {
        let scale = tape.param(ids.scale);
        let shift = tape.param(ids.shift);
        tape.layer_norm(x, scale, shift)
    }

    /// Pre-norm transformer block: self-attention and MLP, each residual.
    fn block(&self, tape: &mut Tape, x: NodeId, ids: &BlockIds, heads: usize) -> NodeId {
        let normed = self.norm(tape, x, ids.ln1);
        let q = self.linear(tape, normed, LinearIds { weight: ids.wq, bias: ids.bq });
        let k = self.linear(tape, normed, LinearIds { weight: ids.wk, bias: ids.bk });
        let v = self.linear(tape, normed, LinearIds { weight: ids.wv, bias: ids.bv });
        let merged = tape.attention(q, k, v, heads);
        let proj = self.linear(tape, merged, LinearIds { weight: ids.wo, bias: ids.bo });
        let x = tape.add(x, proj);

        let normed2 = self.norm(tape, x, ids.ln2);
        let h1 = self.linear(tape, normed2, LinearIds { weight: ids.w1, bias: ids.b1 });
        let act = tape.gelu(h1);
        let h2 = self.linear(tape, act, LinearIds { weight: ids.w2, bias: ids.b2 });
        tape.add(x, h2)
    }

    /// Encode the patches whose grid indices are listed in `order` (in that
    /// row order). Positional embeddings are looked up at the grid indices.
    pub fn encode_rows(&self, tape: &mut Tape, patches: &PatchSequence, order: &[usize]) -> NodeId {
        let n = self.config.num_patches();
        assert_eq!(
            patches.n, n,
            "patch count {} does not match the configured grid {n}",
            patches.n
        );
        let plen = self.config.patch_len();
        let mut rows = Vec::with_capacity(order.len() * plen);
        for &g in order {
            assert!(g < n, "patch index {g} out of range for {n} patches");
            rows.extend_from_slice(&patches.data[g * plen..(g + 1) * plen]);
        }
        let x = tape.constant(vec![order.len(), plen], rows);
        let embedded = self.linear(tape, x, self.ids.patch_embed);
        let pos_table = tape.param(self.ids.enc_pos);
        let pos = tape.gather_rows(pos_table, order);
        let mut x = tape.add(embedded, pos);
        for block in &self.ids.enc_blocks {
            x = self.block(tape, x, block, self.config.enc_heads);
        }
        self.norm(tape, x, self.ids.enc_norm)
    }

    /// Masked encoding: only the plan's unmasked patches enter the encoder.
    pub fn encode_masked(
        &self,
        tape: &mut Tape,
        patches: &PatchSequence,
        plan: &PatchMaskPlan,
    ) -> NodeId {
        assert_eq!(
            plan.len(),
            self.config.num_patches(),
            "mask plan covers {} patches, config has {}",
            plan.len(),
            self.config.num_patches()
        );
        self.encode_rows(tape, patches, &plan.unmasked)
    }

    /// Full-image encoding (the fine-tuning path): every patch, no masking.
    pub fn encode_full(&self, tape: &mut Tape, patches: &PatchSequence) -> NodeId {
        let order: Vec<usize> = (0..self.config.num_patches()).collect();
        self.encode_rows(tape, patches, &order)
    }

    /// Run the multi-modal decoder.
    ///
    /// The token sequence is `N` visual slots in grid order — projected
    /// encoder outputs at unmasked slots, the learned mask token at masked
    /// slots — followed by `L` text slots; positional tables are added to
    /// both; attention is full (bidirectional) over all `N+L` tokens.
    pub fn decode(
        &self,
        tape: &mut Tape,
        encoded: NodeId,
        patch_plan: &PatchMaskPlan,
        text: TextInput,
        text_plan: &TextMaskPlan,
    ) -> DecoderOutput {
        let n = self.config.num_patches();
        let l = self.config.l;
        assert_eq!(
            patch_plan.len(),
            n,
            "patch plan covers {} slots, config has {n}",
            patch_plan.len()
        );
        assert_eq!(
            tape.shape(encoded)[0],
            patch_plan.unmasked.len(),
            "encoder rows {} do not match the plan's {} unmasked patches",
            tape.shape(encoded)[0],
            patch_plan.unmasked.len()
        );
        assert_eq!(
            text_plan.len(),
            l,
            "text plan covers {} positions, config has {l}",
            text_plan.len()
        );

        let projected = self.linear(tape, encoded, self.ids.enc_to_dec);
        let vis = if patch_plan.masked.is_empty() {
            projected
        } else {
            let mask_tok = tape.param(self.ids.mask_token);
            let masked_rows = tape.repeat_row(mask_tok, patch_plan.masked.len());
            let stacked = tape.concat_rows(&[projected, masked_rows]);
            // Scatter [unmasked; masked] row blocks back into grid order.
            let mut grid_to_row = vec![0usize; n];
            for (i, &g) in patch_plan.unmasked.iter().enumerate() {
                grid_to_row[g] = i;
            }
            for (j, &g) in patch_plan.masked.iter().enumerate() {
                grid_to_row[g] = patch_plan.unmasked.len() + j;
            }
            tape.gather_rows(stacked, &grid_to_row)
        };
        let vis_pos = tape.param(self.ids.vis_pos);
        let vis = tape.add(vis, vis_pos);

        let text_emb = match text {
            TextInput::Tokens(ids) => {
                assert_eq!(ids.len(), l, "{} text tokens for L={l}", ids.len());
                let table = tape.param(self.ids.char_embed);
                tape.gather_rows(table, ids)
            }
            TextInput::Embedded(node) => {
                assert_eq!(
                    tape.shape(node),
                    &[l, self.config.d2],
                    "embedded text input has shape {:?}, expected [{l}, {}]",
                    tape.shape(node),
                    self.config.d2
                );
                node
            }
        };
        let text_pos = tape.param(self.ids.text_pos);
        let text_in = tape.add(text_emb, text_pos);

        let mut seq = tape.concat_rows(&[vis, text_in]);
        for block in &self.ids.dec_blocks {
            seq = self.block(tape, seq, block, self.config.dec_heads);
        }
        let seq = self.norm(tape, seq, self.ids.dec_norm);

        let vis_out = tape.slice_rows(seq, 0, n);
        let text_out = tape.slice_rows(seq, n, l);
        let v_full = self.linear(tape, vis_out, self.ids.pixel_head);
        let t_full = self.linear(tape, text_out, self.ids.char_head);

        let pick = |tape: &mut Tape, src: NodeId, idx: &[usize]| {
            (!idx.is_empty()).then(|| tape.gather_rows(src, idx))
        };
        DecoderOutput {
            v_m: pick(tape, v_full, &patch_plan.masked),
            v_u: pick(tape, v_full, &patch_plan.unmasked),
            t_m: pick(tape, t_full, &text_plan.masked),
            t_u: pick(tape, t_full, &text_plan.unmasked),
            v_full,
            t_full,
        }
    }

    /// Fine-tuning decode chain. `encoded` must come from [`encode_full`].
    ///
    /// Iteration 0 decodes with all text positions masked; each later
    /// iteration feeds softmax of the previous logits (gradient stopped)
    /// through the correction projection as the new text input. Returns the
    /// `K+1` logit matrices; pixel outputs are discarded.
    pub fn iterative_correct(&self, tape: &mut Tape, encoded: NodeId, k: usize) -> Vec<NodeId> {
        let n = self.config.num_patches();
        let l = self.config.l;
        let no_patch_mask = PatchMaskPlan::empty(n);
        let all_text_masked = TextMaskPlan::full(l);
        let mask_ids = vec![self.mask_token_id(); l];

        let first = self.decode(
            tape,
            encoded,
            &no_patch_mask,
            TextInput::Tokens(&mask_ids),
            &all_text_masked,
        );
        let mut logits = vec![first.t_full];

        // Later iterations treat the projected probabilities as fully
        // "unmasked" text: predictions still cover all L positions.
        let all_text_visible = TextMaskPlan {
            masked: Vec::new(),
            unmasked: (0..l).collect(),
            ratio: 0.0,
        };
        for _ in 1..=k {
            let prev = *logits.last().expect("at least one iteration");
            let stopped = tape.detach(prev);
            let prob = tape.softmax(stopped, 1);
            let emb = self.linear(tape, prob, self.ids.correction);
            let out = self.decode(
                tape,
                encoded,
                &no_patch_mask,
                TextInput::Embedded(emb),
                &all_text_visible,
            );
            logits.push(out.t_full);
        }
        logits
    }
}

/// Embedding-table row per text position: the target's char id where the
/// plan leaves the position unmasked, the MASK id everywhere else.
pub fn text_tokens(targets: &[usize], plan: &TextMaskPlan, mask_id: usize) -> Vec<usize> {
    let l = plan.len();
    assert_eq!(targets.len(), l, "{} targets for L={l}", targets.len());
    let mut ids = vec![mask_id; l];
    for &pos in &plan.unmasked {
        ids[pos] = targets[pos];
    }
    ids
}
