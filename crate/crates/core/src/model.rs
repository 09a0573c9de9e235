//! Tiny transformer text classifier with a frozen base and named adapter
//! attachment points.
//!
//! Layout: frozen embedding table, `num_blocks` attention-only residual
//! blocks (Q,K,V,O projections, frozen), mean pooling over real (non-pad)
//! positions, a frozen penultimate dense layer with tanh, and a trainable
//! classifier head. Adapters may be attached at each block's Q and V
//! projections and at the penultimate layer.

use crate::error::{Error, Result};
use crate::lora::{init_adapter, MuscleAdapter, ScalingVector};
use crate::rng::RngStream;
use crate::tensor::param::{ParamId, ParamStore};
use crate::tensor::tape::{NodeId, Tape};
use crate::tensor::DenseMatrix;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PAD_TOKEN: u32 = 0;

/// Init std for frozen base projection weights.
pub const BASE_INIT_STD: f64 = 0.05;

/// Init std for the embedding table. This also sets the pairwise
/// flattened-embedding distance scale seen by the probe's Gaussian kernel
/// at its fixed variance: larger values narrow the effective kernel, so the
/// clean mapping's low band retains genuine structure instead of smoothing
/// to a near-constant that any one-epoch fit already matches.
pub const EMBED_INIT_STD: f64 = 0.2;

/// Fixed gain folded into mean pooling. Embeddings are deliberately small
/// (see EMBED_INIT_STD), which would leave pooled features around 1e-2 and
/// starve the classifier head of logit scale within a short training
/// budget; this constant restores O(1) features without touching the
/// frozen embedding table the probe depends on.
pub const POOLED_SCALE: f64 = 1.0 / EMBED_INIT_STD;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_len: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub num_classes: usize,
    pub classifier_hidden: usize,
    /// Token ids 1..=num_reserved_tokens are reserved rare tokens (trigger
    /// candidates); their embedding rows are initialized with
    /// `rare_token_gain` times the base std, mirroring how rare tokens sit
    /// far from the bulk of a real embedding distribution.
    pub num_reserved_tokens: usize,
    pub rare_token_gain: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 200,
            embed_dim: 32,
            max_len: 24,
            num_heads: 2,
            num_blocks: 2,
            num_classes: 2,
            classifier_hidden: 32,
            num_reserved_tokens: 9,
            rare_token_gain: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.max_len == 0
            || self.num_heads == 0
            || self.num_blocks == 0
            || self.classifier_hidden == 0
        {
            return Err(Error::config("model config fields must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.num_reserved_tokens + 1 >= self.vocab_size {
            return Err(Error::config(format!(
                "vocab_size {} leaves no room for {} reserved tokens",
                self.vocab_size, self.num_reserved_tokens
            )));
        }
        if self.rare_token_gain <= 0.0 || !self.rare_token_gain.is_finite() {
            return Err(Error::config("rare_token_gain must be positive and finite"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// One padded mini-batch.
#[derive(Debug, Clone)]
pub struct Batch {
    /// B x max_len token ids, padded with PAD_TOKEN.
    pub tokens: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    /// True sequence lengths (pad positions excluded downstream).
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_samples(token_seqs: &[Vec<u32>], labels: &[usize], max_len: usize) -> Result<Self> {
        assert_eq!(token_seqs.len(), labels.len());
        let mut tokens = Vec::with_capacity(token_seqs.len());
        let mut lengths = Vec::with_capacity(token_seqs.len());
        for seq in token_seqs {
            if seq.len() > max_len {
                return Err(Error::input(format!(
                    "sample length {} exceeds max_len {max_len}",
                    seq.len()
                )));
            }
            if seq.is_empty() {
                return Err(Error::input("empty sample"));
            }
            let mut padded = seq.clone();
            padded.resize(max_len, PAD_TOKEN);
            lengths.push(seq.len());
            tokens.push(padded);
        }
        Ok(Batch {
            tokens,
            labels: labels.to_vec(),
            lengths,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone)]
struct BlockParams {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

pub struct ClassifierModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    embedding: ParamId,
    blocks: Vec<BlockParams>,
    pen_weight: ParamId,
    pen_bias: ParamId,
    head_weight: ParamId,
    head_bias: ParamId,
    /// Attached adapters keyed by site name.
    adapters: BTreeMap<String, MuscleAdapter>,
}

/// Valid adapter site names for a config.
pub fn adapter_sites(config: &ModelConfig) -> Vec<String> {
    let mut sites = Vec::new();
    for b in 0..config.num_blocks {
        sites.push(format!("block{b}.Q"));
        sites.push(format!("block{b}.V"));
    }
    sites.push("penultimate".to_string());
    sites
}

pub fn build_model(config: &ModelConfig, rng: &mut RngStream) -> Result<ClassifierModel> {
    config.validate()?;
    let d = config.embed_dim;
    let mut store = ParamStore::new();
    let mut table = DenseMatrix::randn(config.vocab_size, d, EMBED_INIT_STD, rng);
    for id in 1..=config.num_reserved_tokens {
        for v in table.row_mut(id) {
            *v *= config.rare_token_gain;
        }
    }
    let embedding = store.register("embedding", table, false);
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for b in 0..config.num_blocks {
        let proj = |tag: &str, rng: &mut RngStream, store: &mut ParamStore| {
            store.register(
                format!("block{b}.{tag}"),
                DenseMatrix::randn(d, d, BASE_INIT_STD, rng),
                false,
            )
        };
        let wq = proj("Q", rng, &mut store);
        let wk = proj("K", rng, &mut store);
        let wv = proj("V", rng, &mut store);
        let wo = proj("O", rng, &mut store);
        blocks.push(BlockParams { wq, wk, wv, wo });
    }
    let pen_weight = store.register(
        "penultimate.weight",
        DenseMatrix::randn(config.classifier_hidden, d, BASE_INIT_STD, rng),
        false,
    );
    let pen_bias = store.register(
        "penultimate.bias",
        DenseMatrix::zeros(1, config.classifier_hidden),
        false,
    );
    let head_weight = store.register(
        "head.weight",
        DenseMatrix::randn(config.num_classes, config.classifier_hidden, BASE_INIT_STD, rng),
        true,
    );
    let head_bias = store.register("head.bias", DenseMatrix::zeros(1, config.num_classes), true);
    Ok(ClassifierModel {
        config: config.clone(),
        store,
        embedding,
        blocks,
        pen_weight,
        pen_bias,
        head_weight,
        head_bias,
        adapters: BTreeMap::new(),
    })
}

impl ClassifierModel {
    /// Attach fresh adapters at the named sites. A factory maps the site
    /// name to the scaling vector to use there.
    pub fn attach_adapters<F>(
        &mut self,
        sites: &[String],
        mut scaling_for_site: F,
        rng: &mut RngStream,
    ) -> Result<()>
    where
        F: FnMut(&str) -> ScalingVector,
    {
        let valid = adapter_sites(&self.config);
        for site in sites {
            if !valid.contains(site) {
                return Err(Error::config(format!(
                    "unknown adapter site {site}; valid sites: {valid:?}"
                )));
            }
            if self.adapters.contains_key(site) {
                return Err(Error::config(format!(
                    "adapter already attached at site {site}"
                )));
            }
            let d = self.config.embed_dim;
            let (d_in, d_out) = if site == "penultimate" {
                (d, self.config.classifier_hidden)
            } else {
                (d, d)
            };
            let scaling = scaling_for_site(site);
            let adapter = init_adapter(&mut self.store, site, d_in, d_out, &scaling, rng)?;
            self.adapters.insert(site.clone(), adapter);
        }
        Ok(())
    }

    pub fn adapters(&self) -> impl Iterator<Item = (&String, &MuscleAdapter)> {
        self.adapters.iter()
    }

    pub fn adapter(&self, site: &str) -> Option<&MuscleAdapter> {
        self.adapters.get(site)
    }

    fn validate_batch(&self, batch: &Batch) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        for seq in &batch.tokens {
            if seq.len() != self.config.max_len {
                return Err(Error::input("batch not padded to max_len"));
            }
            for &t in seq {
                if t as usize >= self.config.vocab_size {
                    return Err(Error::input(format!(
                        "token id {t} out of vocabulary (size {})",
                        self.config.vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattened frozen embeddings, B x (max_len * d). Pads contribute the
    /// pad token's embedding row. This is the representation consumed by
    /// the frequency probe.
    pub fn embed(&self, batch: &Batch) -> Result<DenseMatrix> {
        self.validate_batch(batch)?;
        let d = self.config.embed_dim;
        let table = &self.store.get(self.embedding).value;
        let mut out = DenseMatrix::zeros(batch.len(), self.config.max_len * d);
        for (i, seq) in batch.tokens.iter().enumerate() {
            let row = out.row_mut(i);
            for (pos, &tok) in seq.iter().enumerate() {
                row[pos * d..(pos + 1) * d].copy_from_slice(table.row(tok as usize));
            }
        }
        Ok(out)
    }

    /// Forward pass building the gradient graph; returns the B x C logits
    /// node. Pad positions are dropped per sample before attention, so
    /// extra padding can never affect the output.
    pub fn forward_graph(&self, tape: &mut Tape, batch: &Batch) -> Result<NodeId> {
        self.validate_batch(batch)?;
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let dh = cfg.head_dim();
        let table = &self.store.get(self.embedding).value;

        let mut pooled_rows = Vec::with_capacity(batch.len());
        for (i, seq) in batch.tokens.iter().enumerate() {
            let len = batch.lengths[i];
            // per-sample embedding matrix, true length only (no pads)
            let emb = DenseMatrix::from_fn(len, d, |p, j| table.get(seq[p] as usize, j));
            let mut x = tape.constant(emb)?;

            for (b, block) in self.blocks.iter().enumerate() {
                let q = self.projected(tape, x, block.wq, &format!("block{b}.Q"))?;
                let k = self.projected(tape, x, block.wk, "")?;
                let v = self.projected(tape, x, block.wv, &format!("block{b}.V"))?;

                let mut head_ctx = Vec::with_capacity(cfg.num_heads);
                for h in 0..cfg.num_heads {
                    let qh = tape.slice_cols(q, h * dh, dh)?;
                    let kh = tape.slice_cols(k, h * dh, dh)?;
                    let vh = tape.slice_cols(v, h * dh, dh)?;
                    let kh_t = tape.transpose(kh)?;
                    let scores = tape.matmul(qh, kh_t)?;
                    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                    let attn = tape.softmax_rows(scores)?;
                    head_ctx.push(tape.matmul(attn, vh)?);
                }
                let ctx = tape.concat_cols(&head_ctx)?;
                let wo = tape.param(&self.store, block.wo)?;
                let wo_t = tape.transpose(wo)?;
                let proj = tape.matmul(ctx, wo_t)?;
                x = tape.add(x, proj)?;
            }

            // mean pooling over real positions, with the fixed feature gain
            let weights =
                DenseMatrix::from_vec(1, len, vec![POOLED_SCALE / len as f64; len]);
            let wnode = tape.constant(weights)?;
            pooled_rows.push(tape.matmul(wnode, x)?);
        }
        let pooled = tape.stack_rows(&pooled_rows)?;

        let pen = self.projected(tape, pooled, self.pen_weight, "penultimate")?;
        let pen_b = tape.param(&self.store, self.pen_bias)?;
        let pen = tape.add_row_broadcast(pen, pen_b)?;
        let hidden = tape.tanh(pen)?;

        let hw = tape.param(&self.store, self.head_weight)?;
        let hw_t = tape.transpose(hw)?;
        let logits = tape.matmul(hidden, hw_t)?;
        let hb = tape.param(&self.store, self.head_bias)?;
        tape.add_row_broadcast(logits, hb)
    }

    /// X W^T plus the site's adapter contribution, if one is attached.
    fn projected(
        &self,
        tape: &mut Tape,
        x: NodeId,
        weight: ParamId,
        site: &str,
    ) -> Result<NodeId> {
        let w = tape.param(&self.store, weight)?;
        let w_t = tape.transpose(w)?;
        let base = tape.matmul(x, w_t)?;
        if let Some(adapter) = self.adapters.get(site) {
            let delta = adapter.contribution(tape, &self.store, x)?;
            tape.add(base, delta)
        } else {
            Ok(base)
        }
    }

    /// Logits without keeping the graph.
    pub fn forward(&self, batch: &Batch) -> Result<DenseMatrix> {
        let mut tape = Tape::new();
        let logits = self.forward_graph(&mut tape, batch)?;
        Ok(tape.value(logits).clone())
    }

    /// Mean softmax cross-entropy loss node over the batch.
    pub fn loss_graph(&self, tape: &mut Tape, batch: &Batch) -> Result<NodeId> {
        for &l in &batch.labels {
            if l >= self.config.num_classes {
                return Err(Error::input(format!(
                    "label {l} out of range for {} classes",
                    self.config.num_classes
                )));
            }
        }
        let logits = self.forward_graph(tape, batch)?;
        tape.cross_entropy(logits, &batch.labels)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let loss = self.loss_graph(&mut tape, batch)?;
        Ok(tape.value(loss).get(0, 0))
    }

    /// Rowwise argmax of logits; ties break toward the smaller class index.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<usize>> {
        let logits = self.forward(batch)?;
        Ok(argmax_rows(&logits))
    }

    pub fn embedding_table(&self) -> &DenseMatrix {
        &self.store.get(self.embedding).value
    }

    /// Base weight parameter living at an adapter site.
    pub fn base_param_for_site(&self, site: &str) -> Result<ParamId> {
        if site == "penultimate" {
            return Ok(self.pen_weight);
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if site == format!("block{b}.Q") {
                return Ok(block.wq);
            }
            if site == format!("block{b}.V") {
                return Ok(block.wv);
            }
        }
        Err(Error::contract(format!("no base weight for site {site}")))
    }

    /// Deployment-path model: adapter deltas folded into the base weights,
    /// no adapters attached. Forward outputs are identical to the adapted
    /// model up to floating-point association.
    pub fn merge_adapters(&self) -> Result<ClassifierModel> {
        let mut merged = ClassifierModel {
            config: self.config.clone(),
            store: self.store.clone(),
            embedding: self.embedding,
            blocks: self.blocks.clone(),
            pen_weight: self.pen_weight,
            pen_bias: self.pen_bias,
            head_weight: self.head_weight,
            head_bias: self.head_bias,
            adapters: BTreeMap::new(),
        };
        for (site, adapter) in &self.adapters {
            let base_id = self.base_param_for_site(site)?;
            let w0 = &self.store.get(base_id).value;
            let w = adapter.merge(&self.store, w0)?;
            merged.store.get_mut(base_id).value = w;
        }
        Ok(merged)
    }
}

/// Central finite-difference check of the model's loss gradients over all
/// trainable entries. Returns max |analytic - central| / max(|central|, 1e-8).
pub fn gradient_check(model: &mut ClassifierModel, batch: &Batch, step: f64) -> Result<f64> {
    if step <= 0.0 {
        return Err(Error::contract("gradient_check: step must be positive"));
    }
    model.store.zero_grads();
    let mut tape = Tape::new();
    let loss = model.loss_graph(&mut tape, batch)?;
    tape.backward(loss, &mut model.store)?;
    let analytic: Vec<(ParamId, Vec<f64>)> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.grad.as_slice().to_vec()))
        .collect();

    let mut max_rel = 0.0f64;
    for (id, grads) in analytic {
        for k in 0..grads.len() {
            let orig = model.store.get(id).value.as_slice()[k];
            model.store.get_mut(id).value.as_mut_slice()[k] = orig + step;
            let up = model.loss(batch)?;
            model.store.get_mut(id).value.as_mut_slice()[k] = orig - step;
            let down = model.loss(batch)?;
            model.store.get_mut(id).value.as_mut_slice()[k] = orig;
            let central = (up - down) / (2.0 * step);
            // absolute floor 1e-6: below it, central differences are
            // dominated by f64 cancellation noise (~1e-11 for unit-scale
            // losses at step 1e-5) and a pure relative error is meaningless
            let rel = (grads[k] - central).abs() / grads[k].abs().max(central.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

/// Argmax per row, ties toward the smaller index.
pub fn argmax_rows(m: &DenseMatrix) -> Vec<usize> {
    (0..m.rows())
        .map(|i| {
            let row = m.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            embed_dim: 8,
            max_len: 6,
            num_heads: 2,
            num_blocks: 1,
            num_classes: 2,
            classifier_hidden: 8,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn same_seed_identical_weights() {
        let cfg = tiny_config();
        let a = build_model(&cfg, &mut RngStream::new(3)).unwrap();
        let b = build_model(&cfg, &mut RngStream::new(3)).unwrap();
        for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(pa.value, pb.value);
        }
    }

    #[test]
    fn head_dim_arithmetic() {
        let cfg = tiny_config();
        assert_eq!(cfg.head_dim(), 4);
    }

    #[test]
    fn indivisible_heads_rejected() {
        let cfg = ModelConfig {
            num_heads: 3,
            ..tiny_config()
        };
        assert!(build_model(&cfg, &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn embed_is_positional_lookup() {
        let cfg = tiny_config();
        let model = build_model(&cfg, &mut RngStream::new(1)).unwrap();
        let batch = Batch::from_samples(&[vec![3, 7]], &[0], cfg.max_len).unwrap();
        let e = model.embed(&batch).unwrap();
        let table = model.embedding_table();
        assert_eq!(&e.row(0)[0..8], table.row(3));
        assert_eq!(&e.row(0)[8..16], table.row(7));
        // pads embed as the pad vector
        assert_eq!(&e.row(0)[16..24], table.row(PAD_TOKEN as usize));

        // permuting two distinct tokens changes the row
        let batch2 = Batch::from_samples(&[vec![7, 3]], &[0], cfg.max_len).unwrap();
        let e2 = model.embed(&batch2).unwrap();
        assert_ne!(e.row(0), e2.row(0));
    }

    #[test]
    fn embed_rejects_out_of_vocab() {
        let cfg = tiny_config();
        let model = build_model(&cfg, &mut RngStream::new(1)).unwrap();
        let batch = Batch::from_samples(&[vec![19, 25]], &[0], cfg.max_len).unwrap();
        assert!(model.embed(&batch).is_err());
    }

    #[test]
    fn duplicated_samples_give_duplicated_logits() {
        let cfg = tiny_config();
        let model = build_model(&cfg, &mut RngStream::new(2)).unwrap();
        let batch = Batch::from_samples(&[vec![1, 2, 3], vec![1, 2, 3]], &[0, 1], cfg.max_len)
            .unwrap();
        let logits = model.forward(&batch).unwrap();
        assert_eq!(logits.row(0), logits.row(1));
    }

    #[test]
    fn zero_init_adapters_are_transparent() {
        let cfg = tiny_config();
        let mut rng = RngStream::new(4);
        let model = build_model(&cfg, &mut rng).unwrap();
        let batch =
            Batch::from_samples(&[vec![5, 6, 7, 8], vec![9, 1, 2]], &[0, 1], cfg.max_len).unwrap();
        let before = model.forward(&batch).unwrap();

        let mut model2 = build_model(&cfg, &mut RngStream::new(4)).unwrap();
        let sites = adapter_sites(&cfg);
        model2
            .attach_adapters(&sites, |_| ScalingVector::new(vec![1.0, 2.0], 1).unwrap(), &mut rng)
            .unwrap();
        let after = model2.forward(&batch).unwrap();
        assert_eq!(before, after, "zero-init adapters must change nothing");
    }

    #[test]
    fn attach_twice_rejected() {
        let cfg = tiny_config();
        let mut rng = RngStream::new(4);
        let mut model = build_model(&cfg, &mut rng).unwrap();
        let site = vec!["penultimate".to_string()];
        model
            .attach_adapters(&site, |_| ScalingVector::all_ones(2), &mut rng)
            .unwrap();
        assert!(model
            .attach_adapters(&site, |_| ScalingVector::all_ones(2), &mut rng)
            .is_err());
    }

    #[test]
    fn unknown_site_rejected() {
        let cfg = tiny_config();
        let mut rng = RngStream::new(4);
        let mut model = build_model(&cfg, &mut rng).unwrap();
        let err = model
            .attach_adapters(
                &["block9.Q".to_string()],
                |_| ScalingVector::all_ones(2),
                &mut rng,
            )
            .unwrap_err();
        assert!(err.is_config());
    }

    #[test]
    fn padding_invariance() {
        // same logical sample under two different max_len paddings
        let cfg = tiny_config();
        let model = build_model(&cfg, &mut RngStream::new(8)).unwrap();
        let short = Batch::from_samples(&[vec![4, 5, 6]], &[0], cfg.max_len).unwrap();
        let mut long = short.clone();
        // pads already fill to max_len; shrink lengths path instead by
        // comparing against a batch built from the explicit padded tokens
        long.tokens[0] = vec![4, 5, 6, PAD_TOKEN, PAD_TOKEN, PAD_TOKEN];
        long.lengths[0] = 3;
        let a = model.forward(&short).unwrap();
        let b = model.forward(&long).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn uniform_logits_loss_is_ln2() {
        let mut tape = Tape::new();
        let logits = tape
            .constant(DenseMatrix::from_vec(1, 2, vec![0.4, 0.4]))
            .unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        assert!((tape.value(loss).get(0, 0) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_loss_near_zero() {
        let mut tape = Tape::new();
        let logits = tape
            .constant(DenseMatrix::from_vec(1, 2, vec![-30.0, 30.0]))
            .unwrap();
        let loss = tape.cross_entropy(logits, &[1]).unwrap();
        assert!(tape.value(loss).get(0, 0) < 1e-12);
    }

    #[test]
    fn loss_matches_direct_recomputation() {
        let cfg = tiny_config();
        let model = build_model(&cfg, &mut RngStream::new(13)).unwrap();
        let batch = Batch::from_samples(
            &[vec![1, 2, 3, 4], vec![5, 6], vec![7, 8, 9]],
            &[0, 1, 0],
            cfg.max_len,
        )
        .unwrap();
        let logits = model.forward(&batch).unwrap();
        let mut expect = 0.0;
        for i in 0..batch.len() {
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            expect += lse - row[batch.labels[i]];
        }
        expect /= batch.len() as f64;
        let got = model.loss(&batch).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn predict_ties_break_low() {
        let m = DenseMatrix::from_vec(2, 2, vec![0.2, 0.9, 0.5, 0.5]);
        assert_eq!(argmax_rows(&m), vec![1, 0]);
    }

    #[test]
    fn label_out_of_range_rejected() {
        let cfg = tiny_config();
        let model = build_model(&cfg, &mut RngStream::new(0)).unwrap();
        let batch = Batch::from_samples(&[vec![1, 2]], &[5], cfg.max_len).unwrap();
        assert!(model.loss(&batch).is_err());
    }

    #[test]
    fn gradient_check_full_toy_classifier() {
        let cfg = tiny_config();
        let mut rng = RngStream::new(31);
        let mut model = build_model(&cfg, &mut rng).unwrap();
        let sites = adapter_sites(&cfg);
        model
            .attach_adapters(&sites, |_| ScalingVector::new(vec![1.0, 2.0], 1).unwrap(), &mut rng)
            .unwrap();
        // nonzero up-projections so gradients flow through every path
        let mut up_names: Vec<String> = Vec::new();
        for (_, ad) in model.adapters() {
            up_names.push(model.store.get(ad.up).name.clone());
        }
        for name in up_names {
            let id = model.store.find(&name).unwrap();
            let (r, c) = model.store.get(id).value.shape();
            model.store.get_mut(id).value = DenseMatrix::randn(r, c, 0.1, &mut rng);
        }
        let batch = Batch::from_samples(
            &[vec![1, 2, 3, 4, 5], vec![6, 7, 8]],
            &[0, 1],
            cfg.max_len,
        )
        .unwrap();
        let err = gradient_check(&mut model, &batch, 1e-5).unwrap();
        assert!(err < 1e-4, "gradient check failed: {err}");
    }
}
