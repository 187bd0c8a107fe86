//! Bidirectional masked-item model used to fill imaginary positions.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_params, read_checkpoint, write_checkpoint, CheckpointMeta, ModelKind, FORMAT_VERSION};
use crate::corpus::{ItemIndex, FIRST_ITEM, MASK, PAD};
use crate::error::{Error, Result};
use crate::nn::layers::{apply_mask, BlockCache};
use crate::nn::{adam_step, dropout_mask, AdamConfig, AttentionMask, EncoderBlock, ParamTensor, Parameterized, Tensor};
use crate::nn::ops::restricted_cross_entropy;
use crate::nn::tensor::dot;
use crate::scalar::Scalar;
use crate::seed::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnricherConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_seq_len: usize,
    pub mask_prob: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for EnricherConfig {
    /// Small model that trains on one CPU core in minutes.
    fn default() -> Self {
        Self {
            layers: 2,
            model_dim: 64,
            heads: 2,
            ffn_dim: 256,
            max_seq_len: 50,
            mask_prob: 0.15,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 60,
            dropout: 0.1,
            seed: 42,
        }
    }
}

impl EnricherConfig {
    /// BERT-base sized configuration.
    pub fn bert_base() -> Self {
        Self { layers: 12, model_dim: 768, heads: 12, ffn_dim: 3072, max_seq_len: 512, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("enricher: {m}")));
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("layers, model_dim, heads and ffn_dim must be positive");
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be divisible by heads");
        }
        if self.max_seq_len == 0 || self.batch_size == 0 {
            return bad("max_seq_len and batch_size must be positive");
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad("mask_prob must lie in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// One masked-language-model training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedExample {
    pub input: Vec<ItemIndex>,
    pub target_positions: Vec<usize>,
    pub target_items: Vec<ItemIndex>,
}

/// Builds a training example from a full history: the last item is held
/// out, at most `max_seq_len` most recent items are kept, and every kept
/// position is replaced by MASK with probability `mask_prob` (at least one).
pub fn make_training_example(
    history: &[ItemIndex],
    max_seq_len: usize,
    mask_prob: f64,
    rng: &mut Rng,
) -> Result<MaskedExample> {
    if history.len() < 2 {
        return Err(Error::Contract(format!("history of length {} has no training prefix", history.len())));
    }
    let prefix = &history[..history.len() - 1];
    let mut input = prefix[prefix.len().saturating_sub(max_seq_len)..].to_vec();
    let mut target_positions: Vec<usize> = (0..input.len()).filter(|_| rng.random::<f64>() < mask_prob).collect();
    if target_positions.is_empty() {
        target_positions.push(rng.random_range(0..input.len()));
    }
    let target_items = target_positions.iter().map(|&p| input[p]).collect();
    for &p in &target_positions {
        input[p] = MASK;
    }
    Ok(MaskedExample { input, target_positions, target_items })
}

/// Output of an enricher forward pass.
#[derive(Clone, Debug)]
pub struct EnricherLogits<T> {
    /// `[seq_len, vocab_size]`.
    pub logits: Tensor<T>,
    /// Set when no position was attendable (all PAD).
    pub degenerate: bool,
}

/// Predicts the item behind a single MASK token.
pub trait MaskPredictor: Sync {
    /// Top-`k` real items for the sole MASK in `items`, best first, ties
    /// broken by ascending index.
    fn predict_top_k(&self, items: &[ItemIndex], k: usize) -> Result<Vec<ItemIndex>>;
}

struct Hidden<T> {
    h: Tensor<T>,
    input_drop: Option<Tensor<T>>,
    blocks: Vec<BlockCache<T>>,
    degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct Enricher<T> {
    config: EnricherConfig,
    vocab_size: usize,
    pub item_embedding: ParamTensor<T>,
    pub position_embedding: ParamTensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub output_w: ParamTensor<T>,
    pub output_b: ParamTensor<T>,
}

impl<T: Scalar> Enricher<T> {
    /// `vocab_size` counts PAD and MASK.
    pub fn new(vocab_size: usize, config: EnricherConfig) -> Result<Self> {
        config.validate()?;
        if vocab_size <= FIRST_ITEM as usize {
            return Err(Error::Config("enricher vocabulary has no real items".into()));
        }
        let d = config.model_dim;
        let mut rng = rng_for(config.seed, "enricher-init", 0);
        let item_embedding = ParamTensor::uniform("item_embedding", vocab_size, d, d, &mut rng);
        let position_embedding = ParamTensor::uniform("position_embedding", config.max_seq_len, d, d, &mut rng);
        let blocks = (0..config.layers)
            .map(|l| EncoderBlock::new(&format!("block{l}"), d, config.heads, config.ffn_dim, config.dropout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let output_w = ParamTensor::uniform("output.W", d, vocab_size, d, &mut rng);
        let output_b = ParamTensor::zeros("output.b", 1, vocab_size);
        Ok(Self { config, vocab_size, item_embedding, position_embedding, blocks, output_w, output_b })
    }

    pub fn config(&self) -> &EnricherConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn check_items(&self, items: &[ItemIndex]) -> Result<()> {
        if items.len() > self.config.max_seq_len {
            return Err(Error::Contract(format!(
                "enricher input of length {} exceeds max_seq_len {}",
                items.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = items.iter().find(|&&i| i as usize >= self.vocab_size) {
            return Err(Error::Contract(format!("item index {bad} outside vocabulary of {}", self.vocab_size)));
        }
        Ok(())
    }

    fn hidden(&self, items: &[ItemIndex], mut rng: Option<&mut Rng>) -> Result<Hidden<T>> {
        self.check_items(items)?;
        let n = items.len();
        let d = self.config.model_dim;
        let mut x = Tensor::zeros(n, d);
        for (t, &item) in items.iter().enumerate() {
            let e = self.item_embedding.value.row(item as usize);
            let p = self.position_embedding.value.row(t);
            for ((o, &a), &b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        let input_drop = dropout_mask(n, d, self.config.dropout, rng.as_deref_mut());
        apply_mask(&mut x, input_drop.as_ref());
        let valid: Vec<bool> = items.iter().map(|&i| i != PAD).collect();
        let degenerate = !valid.iter().any(|&v| v);
        let mask = AttentionMask::key_padding(n, &valid);
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, cache) = block.forward(&x, &mask, rng.as_deref_mut())?;
            x = y;
            blocks.push(cache);
        }
        Ok(Hidden { h: x, input_drop, blocks, degenerate })
    }

    fn logits_row(&self, h: &[T]) -> Vec<T> {
        let mut out = self.output_b.value.data().to_vec();
        for (k, &hk) in h.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(self.output_w.value.row(k)) {
                *o += hk * w;
            }
        }
        out
    }

    /// Per-position logits over the full vocabulary (evaluation mode).
    pub fn forward(&self, items: &[ItemIndex]) -> Result<EnricherLogits<T>> {
        let hidden = self.hidden(items, None)?;
        let mut logits = Tensor::zeros(items.len(), self.vocab_size);
        for t in 0..items.len() {
            logits.row_mut(t).copy_from_slice(&self.logits_row(hidden.h.row(t)));
        }
        Ok(EnricherLogits { logits, degenerate: hidden.degenerate })
    }

    /// Mean cross-entropy over the example's masked positions, evaluation mode.
    pub fn masked_loss(&self, example: &MaskedExample) -> Result<T> {
        let out = self.forward(&example.input)?;
        masked_loss(&out.logits, example)
    }

    /// Adds `scale ×` the gradient of the example's mean masked loss to the
    /// parameter gradients. Returns the loss and the number of targets
    /// ranked in the top 10.
    pub fn accumulate_gradients(
        &mut self,
        example: &MaskedExample,
        scale: T,
        rng: Option<&mut Rng>,
    ) -> Result<(T, usize)> {
        check_example(example, self.vocab_size)?;
        let hidden = self.hidden(&example.input, rng)?;
        let n = example.input.len();
        let d = self.config.model_dim;
        let m = T::of(example.target_positions.len() as f64);
        let mut d_h = Tensor::zeros(n, d);
        let mut total = T::zero();
        let mut hits = 0;
        for (&p, &target) in example.target_positions.iter().zip(&example.target_items) {
            let h = hidden.h.row(p);
            let logits = self.logits_row(h);
            let (loss, mut probs) = restricted_cross_entropy(&logits, FIRST_ITEM as usize, target as usize);
            total += loss;
            let t = logits[target as usize];
            let better = logits[FIRST_ITEM as usize..].iter().filter(|&&l| l > t).count();
            if better < 10 {
                hits += 1;
            }
            probs[target as usize] -= T::one();
            let g = scale / m;
            for v in probs.iter_mut() {
                *v *= g;
            }
            for (b, &v) in self.output_b.grad.data_mut().iter_mut().zip(&probs) {
                *b += v;
            }
            for k in 0..d {
                let hk = h[k];
                for (w, &v) in self.output_w.grad.row_mut(k).iter_mut().zip(&probs) {
                    *w += hk * v;
                }
                d_h.row_mut(p)[k] += dot(self.output_w.value.row(k), &probs);
            }
        }
        let loss = total / m;
        if !loss.is_finite() {
            return Err(Error::numeric("enricher_loss", "non-finite masked loss"));
        }

        let mut d_x = d_h;
        for (block, cache) in self.blocks.iter_mut().zip(&hidden.blocks).rev() {
            d_x = block.backward(cache, &d_x);
        }
        apply_mask(&mut d_x, hidden.input_drop.as_ref());
        for (t, &item) in example.input.iter().enumerate() {
            let g = d_x.row(t);
            for (o, &v) in self.item_embedding.grad.row_mut(item as usize).iter_mut().zip(g) {
                *o += v;
            }
            for (o, &v) in self.position_embedding.grad.row_mut(t).iter_mut().zip(g) {
                *o += v;
            }
        }
        Ok((loss, hits))
    }

    /// Top-`k` real items for the single MASK in `items`. Inputs longer
    /// than `max_seq_len` are cut to a window centred on the MASK.
    pub fn predict_mask_top_k(&self, items: &[ItemIndex], k: usize) -> Result<Vec<ItemIndex>> {
        let real = self.vocab_size - FIRST_ITEM as usize;
        if k == 0 || k > real {
            return Err(Error::Config(format!("k = {k} must lie in 1..={real}")));
        }
        let masks: Vec<usize> = items.iter().enumerate().filter(|(_, &i)| i == MASK).map(|(p, _)| p).collect();
        let &[pos] = masks.as_slice() else {
            return Err(Error::Contract(format!("expected exactly one MASK, found {}", masks.len())));
        };
        let max = self.config.max_seq_len;
        let start = if items.len() > max { pos.saturating_sub(max / 2).min(items.len() - max) } else { 0 };
        let window = &items[start..(start + max).min(items.len())];
        let hidden = self.hidden(window, None)?;
        let logits = self.logits_row(hidden.h.row(pos - start));
        if let Some(bad) = logits.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric("predict_mask_top_k", format!("non-finite logit for item {bad}")));
        }
        Ok(top_k_items(&logits, k))
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            model_kind: ModelKind::Enricher,
            vocab_size: self.vocab_size,
            model_dim: self.config.model_dim,
            layers: self.config.layers,
            heads: self.config.heads,
            ffn_dim: self.config.ffn_dim,
            max_seq_len: self.config.max_seq_len,
            seed: self.config.seed,
            training: serde_json::to_value(&self.config).unwrap_or_default(),
            tensors: Vec::new(),
        }
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, &self.meta(), &self.params())
    }

    pub fn load<R: std::io::Read>(r: R) -> Result<Self> {
        let (meta, tensors) = read_checkpoint(r)?;
        if meta.model_kind != ModelKind::Enricher {
            return Err(Error::Format(format!("checkpoint holds a {}, not an enricher", meta.model_kind)));
        }
        let config: EnricherConfig = serde_json::from_value(meta.training.clone())
            .map_err(|e| Error::Format(format!("enricher config: {e}")))?;
        if (config.model_dim, config.layers, config.heads, config.ffn_dim, config.max_seq_len)
            != (meta.model_dim, meta.layers, meta.heads, meta.ffn_dim, meta.max_seq_len)
        {
            return Err(Error::Format("enricher config disagrees with checkpoint dimensions".into()));
        }
        let mut model = Self::new(meta.vocab_size, config)?;
        load_params(model.params_mut(), tensors)?;
        Ok(model)
    }
}

fn check_example(example: &MaskedExample, vocab_size: usize) -> Result<()> {
    if example.target_positions.is_empty() || example.target_positions.len() != example.target_items.len() {
        return Err(Error::Contract("masked example needs matching, non-empty targets".into()));
    }
    for (&p, &t) in example.target_positions.iter().zip(&example.target_items) {
        if p >= example.input.len() {
            return Err(Error::Contract(format!("target position {p} outside input")));
        }
        if t < FIRST_ITEM || t as usize >= vocab_size {
            return Err(Error::Data(format!("target {t} is not a real item")));
        }
    }
    Ok(())
}

/// Mean cross-entropy (restricted to real items) of the targets at the
/// example's masked rows of `logits`.
pub fn masked_loss<T: Scalar>(logits: &Tensor<T>, example: &MaskedExample) -> Result<T> {
    check_example(example, logits.cols())?;
    if logits.rows() != example.input.len() {
        return Err(Error::shape("masked_loss", format!("{} logit rows for {} inputs", logits.rows(), example.input.len())));
    }
    let mut total = T::zero();
    for (&p, &t) in example.target_positions.iter().zip(&example.target_items) {
        total += restricted_cross_entropy(logits.row(p), FIRST_ITEM as usize, t as usize).0;
    }
    Ok(total / T::of(example.target_positions.len() as f64))
}

/// Indices `>= FIRST_ITEM` of the `k` largest scores, best first, ties by
/// ascending index.
pub fn top_k_items<T: Scalar>(scores: &[T], k: usize) -> Vec<ItemIndex> {
    let mut idx: Vec<usize> = (FIRST_ITEM as usize..scores.len()).collect();
    let cmp = |a: &usize, b: &usize| scores[*b].partial_cmp(&scores[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
    let k = k.min(idx.len());
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.into_iter().map(|i| i as ItemIndex).collect()
}

impl<T: Scalar> Parameterized<T> for Enricher<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut v = vec![&self.item_embedding, &self.position_embedding];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.push(&self.output_w);
        v.push(&self.output_b);
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut v = vec![&mut self.item_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.push(&mut self.output_w);
        v.push(&mut self.output_b);
        v
    }
}

impl<T: Scalar> MaskPredictor for Enricher<T> {
    fn predict_top_k(&self, items: &[ItemIndex], k: usize) -> Result<Vec<ItemIndex>> {
        self.predict_mask_top_k(items, k)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnricherEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub masked_accuracy_at_10: f64,
}

/// Trains from scratch on every history with at least two items. Masks
/// are redrawn each epoch.
pub fn train_enricher<T: Scalar>(
    histories: &[Vec<ItemIndex>],
    vocab_size: usize,
    config: &EnricherConfig,
    mut on_epoch: impl FnMut(&EnricherEpoch),
) -> Result<Enricher<T>> {
    let mut model = Enricher::<T>::new(vocab_size, config.clone())?;
    let usable: Vec<&Vec<ItemIndex>> = histories.iter().filter(|h| h.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Data("no history with at least two items to train the enricher".into()));
    }
    let mut adam = AdamConfig::new(config.learning_rate);
    adam.validate()?;
    for epoch in 0..config.epochs {
        let mut rng = rng_for(config.seed, "enricher-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut hits, mut masks) = (0.0, 0usize, 0usize);
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let scale = T::of(1.0 / batch.len() as f64);
            for &i in batch {
                let ex = make_training_example(usable[i], config.max_seq_len, config.mask_prob, &mut rng)?;
                let (loss, h) = model
                    .accumulate_gradients(&ex, scale, Some(&mut rng))
                    .map_err(|e| locate(e, epoch, b))?;
                loss_sum += loss.to_f64_lossy();
                hits += h;
                masks += ex.target_positions.len();
            }
            adam_step(&mut model.params_mut(), &mut adam).map_err(|e| locate(e, epoch, b))?;
        }
        let log = EnricherEpoch {
            epoch,
            mean_loss: loss_sum / usable.len() as f64,
            masked_accuracy_at_10: hits as f64 / masks.max(1) as f64,
        };
        log::debug!("enricher epoch {epoch}: loss {:.4} acc@10 {:.4}", log.mean_loss, log.masked_accuracy_at_10);
        on_epoch(&log);
    }
    Ok(model)
}

pub(crate) fn locate(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric { op, detail } => Error::Numeric { op, detail: format!("{detail} (epoch {epoch}, batch {batch})") },
        other => other,
    }
}
