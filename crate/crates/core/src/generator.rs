//! Grounded autoregressive transformer LM p(y | x, z).
//!
//! Input layout: `[z tokens] [SEP] [x tokens] [y tokens]` under a full
//! causal mask, so document tokens attend only among themselves while
//! context and target attend to everything before them. Document tokens
//! carry token-type 1 and positions starting at `doc_pos_offset`; the
//! separator and the context/target segment carry type 0, with context
//! positions restarting at 0. The separator takes the position slot right
//! after the document segment so that context numbering is unperturbed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retgen_numeric::{ParamBinding, ParamStore, Tape, Tensor, VarId};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::text::{TokenId, SEP};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GenConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub doc_pos_offset: usize,
    pub max_doc: usize,
    pub max_context: usize,
    pub max_target: usize,
}

impl GenConfig {
    pub fn max_positions(&self) -> usize {
        (self.doc_pos_offset + self.max_doc + 1).max(self.max_context + self.max_target + 1)
    }

    /// Caps for the backward (MMI) model: the target text becomes the
    /// conditioning segment and the document plus context become targets.
    pub fn backward_of(forward: &GenConfig) -> GenConfig {
        GenConfig {
            max_doc: forward.max_target,
            max_context: 0,
            max_target: forward.max_doc + forward.max_context,
            ..*forward
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(CoreError::Generation(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.vocab_size == 0 || self.layers == 0 {
            return Err(CoreError::Generation("vocab_size and layers must be positive".into()));
        }
        Ok(())
    }
}

/// Token, position, and type ids for one `[z SEP x y]` sequence, plus the
/// span of target positions that contribute to the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct InputLayout {
    pub ids: Vec<TokenId>,
    pub positions: Vec<usize>,
    pub type_ids: Vec<usize>,
    pub target_start: usize,
    pub target_len: usize,
}

impl InputLayout {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| i >= self.target_start && i < self.target_start + self.target_len).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GroundedLM {
    pub config: GenConfig,
    pub params: ParamStore,
}

impl GroundedLM {
    pub fn new(config: GenConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (v, d, ff, p) = (config.vocab_size, config.dim, config.ff_dim, config.max_positions());
        let std = 0.02;
        params.insert_randn("gen.tok_emb", &[v, d], std, &mut rng)?;
        params.insert_randn("gen.pos_emb", &[p, d], std, &mut rng)?;
        params.insert_randn("gen.type_emb", &[2, d], std, &mut rng)?;
        for l in 0..config.layers {
            let p = format!("gen.l{l}");
            params.insert(&format!("{p}.ln1.g"), Tensor::full(&[d], 1.0))?;
            params.insert_zeros(&format!("{p}.ln1.b"), &[d])?;
            for name in ["wq", "wk", "wv", "wo"] {
                params.insert_randn(&format!("{p}.attn.{name}"), &[d, d], std, &mut rng)?;
            }
            for name in ["bq", "bk", "bv", "bo"] {
                params.insert_zeros(&format!("{p}.attn.{name}"), &[d])?;
            }
            params.insert(&format!("{p}.ln2.g"), Tensor::full(&[d], 1.0))?;
            params.insert_zeros(&format!("{p}.ln2.b"), &[d])?;
            params.insert_randn(&format!("{p}.ff.w1"), &[d, ff], std, &mut rng)?;
            params.insert_zeros(&format!("{p}.ff.b1"), &[ff])?;
            params.insert_randn(&format!("{p}.ff.w2"), &[ff, d], std, &mut rng)?;
            params.insert_zeros(&format!("{p}.ff.b2"), &[d])?;
        }
        params.insert("gen.lnf.g", Tensor::full(&[d], 1.0))?;
        params.insert_zeros("gen.lnf.b", &[d])?;
        params.insert_randn("gen.out.w", &[d, config.vocab_size], std, &mut rng)?;
        params.insert_zeros("gen.out.b", &[config.vocab_size])?;
        Ok(GroundedLM { config, params })
    }

    /// Build the `[z SEP x y]` layout; rejects cap and position overflows.
    pub fn layout_input(&self, z: &[TokenId], x: &[TokenId], y: &[TokenId]) -> Result<InputLayout> {
        let c = &self.config;
        if z.len() > c.max_doc {
            return Err(CoreError::Generation(format!(
                "document length {} exceeds cap {}",
                z.len(),
                c.max_doc
            )));
        }
        if x.len() > c.max_context || y.len() > c.max_target {
            return Err(CoreError::Generation(format!(
                "context/target lengths {}/{} exceed caps {}/{}",
                x.len(),
                y.len(),
                c.max_context,
                c.max_target
            )));
        }
        let max_pos = c.max_positions();
        let sep_pos = c.doc_pos_offset + z.len();
        if sep_pos >= max_pos || x.len() + y.len() > max_pos {
            return Err(CoreError::Generation(format!(
                "layout overflows the {} position embeddings",
                max_pos
            )));
        }

        let n = z.len() + 1 + x.len() + y.len();
        let mut ids = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut type_ids = Vec::with_capacity(n);
        for (i, &t) in z.iter().enumerate() {
            ids.push(t);
            positions.push(c.doc_pos_offset + i);
            type_ids.push(1);
        }
        ids.push(SEP);
        positions.push(sep_pos);
        type_ids.push(0);
        for (i, &t) in x.iter().enumerate() {
            ids.push(t);
            positions.push(i);
            type_ids.push(0);
        }
        for (i, &t) in y.iter().enumerate() {
            ids.push(t);
            positions.push(x.len() + i);
            type_ids.push(0);
        }
        Ok(InputLayout {
            ids,
            positions,
            type_ids,
            target_start: z.len() + 1 + x.len(),
            target_len: y.len(),
        })
    }

    /// Full forward pass, returning the [n, vocab] logits var.
    pub fn forward_logits(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        layout: &InputLayout,
    ) -> Result<VarId> {
        let c = &self.config;
        let n = layout.len();
        let tok = tape.embedding(binding.var("gen.tok_emb")?, &layout.ids)?;
        let pos = tape.embedding(binding.var("gen.pos_emb")?, &layout.positions)?;
        let typ = tape.embedding(binding.var("gen.type_emb")?, &layout.type_ids)?;
        let mut h = tape.add(tok, pos)?;
        h = tape.add(h, typ)?;

        // additive causal mask: 0 at or before the diagonal, -1e9 after
        let mut mask = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                mask[i * n + j] = -1e9;
            }
        }
        let mask = tape.leaf(Tensor::new(vec![n, n], mask)?);

        let dh = c.dim / c.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in 0..c.layers {
            let p = format!("gen.l{l}");
            let a = tape.layer_norm(
                h,
                binding.var(&format!("{p}.ln1.g"))?,
                binding.var(&format!("{p}.ln1.b"))?,
                1e-5,
            )?;
            let q = tape.matmul(a, binding.var(&format!("{p}.attn.wq"))?)?;
            let q = tape.add_row(q, binding.var(&format!("{p}.attn.bq"))?)?;
            let k = tape.matmul(a, binding.var(&format!("{p}.attn.wk"))?)?;
            let k = tape.add_row(k, binding.var(&format!("{p}.attn.bk"))?)?;
            let v = tape.matmul(a, binding.var(&format!("{p}.attn.wv"))?)?;
            let v = tape.add_row(v, binding.var(&format!("{p}.attn.bv"))?)?;

            let mut head_ctxs_t = Vec::with_capacity(c.heads);
            for head in 0..c.heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let kt = tape.transpose(kh)?;
                let scores = tape.matmul(qh, kt)?;
                let scores = tape.scale(scores, scale)?;
                let scores = tape.add(scores, mask)?;
                let attn = tape.softmax(scores)?;
                let ctx = tape.matmul(attn, vh)?;
                head_ctxs_t.push(tape.transpose(ctx)?);
            }
            // reassemble heads along columns via a row-stack of transposes
            let stacked = tape.concat_rows(&head_ctxs_t)?;
            let ctx = tape.transpose(stacked)?;
            let proj = tape.matmul(ctx, binding.var(&format!("{p}.attn.wo"))?)?;
            let proj = tape.add_row(proj, binding.var(&format!("{p}.attn.bo"))?)?;
            h = tape.add(h, proj)?;

            let a2 = tape.layer_norm(
                h,
                binding.var(&format!("{p}.ln2.g"))?,
                binding.var(&format!("{p}.ln2.b"))?,
                1e-5,
            )?;
            let f1 = tape.matmul(a2, binding.var(&format!("{p}.ff.w1"))?)?;
            let f1 = tape.add_row(f1, binding.var(&format!("{p}.ff.b1"))?)?;
            let f1 = tape.gelu(f1)?;
            let f2 = tape.matmul(f1, binding.var(&format!("{p}.ff.w2"))?)?;
            let f2 = tape.add_row(f2, binding.var(&format!("{p}.ff.b2"))?)?;
            h = tape.add(h, f2)?;
        }
        let hf = tape.layer_norm(h, binding.var("gen.lnf.g")?, binding.var("gen.lnf.b")?, 1e-5)?;
        let logits = tape.matmul(hf, binding.var("gen.out.w")?)?;
        Ok(tape.add_row(logits, binding.var("gen.out.b")?)?)
    }

    /// Differentiable log p(y | x, z): summed target log-likelihood on an
    /// existing tape. Empty y is the empty product, log 1 = 0.
    pub fn log_prob_on_tape(
        &self,
        tape: &mut Tape,
        binding: &ParamBinding,
        z: &[TokenId],
        x: &[TokenId],
        y: &[TokenId],
    ) -> Result<VarId> {
        if y.is_empty() {
            return Ok(tape.scalar(0.0));
        }
        let layout = self.layout_input(z, x, y)?;
        let logits = self.forward_logits(tape, binding, &layout)?;
        // the row predicting y_t sits one position before it
        let rows = tape.slice_rows(logits, layout.target_start - 1, layout.target_len)?;
        let nll = tape.cross_entropy_sum(rows, y)?;
        Ok(tape.scale(nll, -1.0)?)
    }

    pub fn log_prob(&self, z: &[TokenId], x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape)?;
        let lp = self.log_prob_on_tape(&mut tape, &binding, z, x, y)?;
        Ok(tape.value(lp).scalar_value()?)
    }

    /// Per-token log p(y_t | x, z, y_{0:t-1}) from a single forward pass.
    pub fn target_log_probs(&self, z: &[TokenId], x: &[TokenId], y: &[TokenId]) -> Result<Vec<f64>> {
        if y.is_empty() {
            return Ok(vec![]);
        }
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape)?;
        let layout = self.layout_input(z, x, y)?;
        let logits = self.forward_logits(&mut tape, &binding, &layout)?;
        let rows = tape.slice_rows(logits, layout.target_start - 1, layout.target_len)?;
        let logp = tape.log_softmax(rows)?;
        let v = tape.value(logp);
        let vocab = self.config.vocab_size;
        Ok(y.iter().enumerate().map(|(i, &t)| v.data()[i * vocab + t]).collect())
    }

    /// Distribution over the next token given a consensus prefix.
    pub fn next_token_dist(&self, z: &[TokenId], x: &[TokenId], y_prefix: &[TokenId]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let binding = self.params.bind(&mut tape)?;
        let layout = self.layout_input(z, x, y_prefix)?;
        let logits = self.forward_logits(&mut tape, &binding, &layout)?;
        let last = tape.slice_rows(logits, layout.len() - 1, 1)?;
        let probs = tape.softmax(last)?;
        Ok(tape.value(probs).data().to_vec())
    }

    /// Backward-model score log p(x, z | y): condition on y in the
    /// document slot and score z then x as the target segment.
    pub fn backward_log_prob(&self, z: &[TokenId], x: &[TokenId], y: &[TokenId]) -> Result<f64> {
        let mut target = z.to_vec();
        target.extend_from_slice(x);
        self.log_prob(y, &[], &target)
    }

    pub fn save(&self, path: &std::path::Path, header: &serde_json::Value) -> Result<()> {
        let mut h = header.clone();
        h["gen_config"] = serde_json::to_value(self.config)?;
        retgen_numeric::save_checkpoint(path, &h, &self.params)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let (header, params) = retgen_numeric::load_checkpoint(path)?;
        let config: GenConfig = serde_json::from_value(
            header
                .get("gen_config")
                .cloned()
                .ok_or_else(|| CoreError::Generation("checkpoint missing gen_config".into()))?,
        )?;
        config.validate()?;
        let model = GroundedLM { config, params };
        model.validate_shapes()?;
        Ok(model)
    }

    fn validate_shapes(&self) -> Result<()> {
        let c = &self.config;
        let expect = |name: &str, shape: &[usize]| -> Result<()> {
            let t = &self.params.get(name)?.tensor;
            if t.shape() != shape {
                return Err(CoreError::Generation(format!(
                    "checkpoint shape mismatch for `{name}`: {:?} vs config {:?}",
                    t.shape(),
                    shape
                )));
            }
            Ok(())
        };
        expect("gen.tok_emb", &[c.vocab_size, c.dim])?;
        expect("gen.pos_emb", &[c.max_positions(), c.dim])?;
        expect("gen.type_emb", &[2, c.dim])?;
        for l in 0..c.layers {
            expect(&format!("gen.l{l}.attn.wq"), &[c.dim, c.dim])?;
            expect(&format!("gen.l{l}.ff.w1"), &[c.dim, c.ff_dim])?;
        }
        expect("gen.out.w", &[c.dim, c.vocab_size])?;
        Ok(())
    }
}
