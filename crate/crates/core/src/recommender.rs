//! Causal self-attentive next-item recommender.
//!
//! Inputs are left-padded to `max_seq_len`. Only real positions are
//! computed; PAD rows of the output are zero and PAD keys are never
//! attended to, so a sequence scores identically however it is padded.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_params, read_checkpoint, write_checkpoint, CheckpointMeta, ModelKind, FORMAT_VERSION};
use crate::corpus::{ItemIndex, SplitCorpus, FIRST_ITEM, PAD};
use crate::enricher::locate;
use crate::error::{Error, Result};
use crate::evaluation::{rank_of_target, NextItemScorer};
use crate::nn::layers::{apply_mask, BlockCache};
use crate::nn::ops::pairwise_bce;
use crate::nn::tensor::dot;
use crate::nn::{adam_step, dropout_mask, AdamConfig, AttentionMask, EncoderBlock, ParamTensor, Parameterized, Tensor};
use crate::scalar::Scalar;
use crate::seed::{rng_for, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecConfig {
    pub blocks: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            blocks: 2,
            hidden_dim: 50,
            heads: 1,
            max_seq_len: 50,
            learning_rate: 0.001,
            batch_size: 128,
            epochs: 200,
            dropout: 0.5,
            seed: 42,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("recommender: {m}")));
        if self.blocks == 0 || self.hidden_dim == 0 || self.heads == 0 || self.max_seq_len == 0 || self.batch_size == 0 {
            return bad("blocks, hidden_dim, heads, max_seq_len and batch_size must be positive");
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad("hidden_dim must be divisible by heads");
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

/// One left-padded training row: `expected[t]` follows `input[..=t]`,
/// `negatives[t]` is an item the user never touched. PAD marks unused slots.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingStep {
    pub input: Vec<ItemIndex>,
    pub expected: Vec<ItemIndex>,
    pub negatives: Vec<ItemIndex>,
}

/// A training sequence and the items excluded from negative sampling.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainingSequence {
    pub items: Vec<ItemIndex>,
    /// Sorted.
    pub seen: Vec<ItemIndex>,
}

/// Evaluation prefixes as training sequences; negatives avoid the full
/// history including the held-out target.
pub fn training_sequences(split: &SplitCorpus) -> Vec<TrainingSequence> {
    split
        .cases
        .iter()
        .map(|c| TrainingSequence { items: c.prefix.clone(), seen: c.seen.clone() })
        .collect()
}

/// Uniform draw from the real items not in `seen` (sorted).
pub fn sample_negative(seen: &[ItemIndex], vocab_size: usize, rng: &mut Rng) -> Result<ItemIndex> {
    let real = vocab_size.saturating_sub(FIRST_ITEM as usize);
    let seen_real = seen.iter().filter(|&&i| i >= FIRST_ITEM && (i as usize) < vocab_size).count();
    if seen_real >= real {
        return Err(Error::Data("user has interacted with every item; no negative available".into()));
    }
    loop {
        let c = rng.random_range(FIRST_ITEM..vocab_size as ItemIndex);
        if seen.binary_search(&c).is_err() {
            return Ok(c);
        }
    }
}

/// Builds the left-padded training row for `sequence` (length ≥ 2).
pub fn make_training_step(
    sequence: &TrainingSequence,
    vocab_size: usize,
    max_seq_len: usize,
    rng: &mut Rng,
) -> Result<TrainingStep> {
    let items = &sequence.items;
    if items.len() < 2 {
        return Err(Error::Contract("training sequence needs at least two items".into()));
    }
    let n = (items.len() - 1).min(max_seq_len);
    let start = items.len() - 1 - n;
    let pad = max_seq_len - n;
    let mut step = TrainingStep {
        input: vec![PAD; max_seq_len],
        expected: vec![PAD; max_seq_len],
        negatives: vec![PAD; max_seq_len],
    };
    for t in 0..n {
        step.input[pad + t] = items[start + t];
        step.expected[pad + t] = items[start + t + 1];
        step.negatives[pad + t] = sample_negative(&sequence.seen, vocab_size, rng)?;
    }
    Ok(step)
}

struct Active<T> {
    /// Real items in order, at most `max_seq_len`.
    items: Vec<ItemIndex>,
    /// Row of `items[0]` in the padded layout.
    offset: usize,
    h: Tensor<T>,
    input_drop: Option<Tensor<T>>,
    blocks: Vec<BlockCache<T>>,
}

#[derive(Clone, Debug)]
pub struct Recommender<T> {
    config: RecConfig,
    vocab_size: usize,
    /// Shared input and output item embedding.
    pub item_embedding: ParamTensor<T>,
    pub position_embedding: ParamTensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
}

impl<T: Scalar> Recommender<T> {
    /// `vocab_size` counts PAD and MASK.
    pub fn new(vocab_size: usize, config: RecConfig) -> Result<Self> {
        config.validate()?;
        if vocab_size <= FIRST_ITEM as usize {
            return Err(Error::Config("recommender vocabulary has no real items".into()));
        }
        let d = config.hidden_dim;
        let mut rng = rng_for(config.seed, "recommender-init", 0);
        let item_embedding = ParamTensor::uniform("item_embedding", vocab_size, d, d, &mut rng);
        let position_embedding = ParamTensor::uniform("position_embedding", config.max_seq_len, d, d, &mut rng);
        let blocks = (0..config.blocks)
            .map(|l| EncoderBlock::new(&format!("block{l}"), d, config.heads, d, config.dropout, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, vocab_size, item_embedding, position_embedding, blocks })
    }

    pub fn config(&self) -> &RecConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Strips PAD and keeps the most recent `max_seq_len` items.
    fn window(&self, items: &[ItemIndex]) -> Result<(Vec<ItemIndex>, usize)> {
        let real: Vec<ItemIndex> = items.iter().copied().filter(|&i| i != PAD).collect();
        if let Some(&bad) = real.iter().find(|&&i| i < FIRST_ITEM || i as usize >= self.vocab_size) {
            return Err(Error::Contract(format!("item index {bad} is not a real item")));
        }
        let keep = real[real.len().saturating_sub(self.config.max_seq_len)..].to_vec();
        let offset = self.config.max_seq_len - keep.len();
        Ok((keep, offset))
    }

    fn embed_active(&self, items: &[ItemIndex], offset: usize) -> Tensor<T> {
        let mut x = Tensor::zeros(items.len(), self.config.hidden_dim);
        for (t, &item) in items.iter().enumerate() {
            let e = self.item_embedding.value.row(item as usize);
            let p = self.position_embedding.value.row(offset + t);
            for ((o, &a), &b) in x.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        x
    }

    /// `[max_seq_len, d]` input `E[item] + P[position]`; PAD rows are zero.
    pub fn embed_sequence(&self, items: &[ItemIndex]) -> Result<Tensor<T>> {
        let (active, offset) = self.window(items)?;
        let mut out = Tensor::zeros(self.config.max_seq_len, self.config.hidden_dim);
        let x = self.embed_active(&active, offset);
        for t in 0..active.len() {
            out.row_mut(offset + t).copy_from_slice(x.row(t));
        }
        Ok(out)
    }

    fn run(&self, items: &[ItemIndex], mut rng: Option<&mut Rng>) -> Result<Active<T>> {
        let (items, offset) = self.window(items)?;
        let mut x = self.embed_active(&items, offset);
        let input_drop = dropout_mask(x.rows(), x.cols(), self.config.dropout, rng.as_deref_mut());
        apply_mask(&mut x, input_drop.as_ref());
        let mask = AttentionMask::causal(items.len());
        let mut blocks = Vec::with_capacity(self.blocks.len());
        if !items.is_empty() {
            for block in &self.blocks {
                let (y, cache) = block.forward(&x, &mask, rng.as_deref_mut())?;
                x = y;
                blocks.push(cache);
            }
        }
        Ok(Active { items, offset, h: x, input_drop, blocks })
    }

    /// Final-block output `[max_seq_len, d]` in evaluation mode; PAD rows are zero.
    pub fn forward(&self, items: &[ItemIndex]) -> Result<Tensor<T>> {
        let a = self.run(items, None)?;
        let mut out = Tensor::zeros(self.config.max_seq_len, self.config.hidden_dim);
        for t in 0..a.items.len() {
            out.row_mut(a.offset + t).copy_from_slice(a.h.row(t));
        }
        Ok(out)
    }

    /// Output at the last real position; zeros for an empty sequence.
    pub fn last_hidden(&self, items: &[ItemIndex]) -> Result<Vec<T>> {
        let a = self.run(items, None)?;
        Ok(match a.items.len() {
            0 => vec![T::zero(); self.config.hidden_dim],
            n => a.h.row(n - 1).to_vec(),
        })
    }

    /// `F · N[c]` for each candidate.
    pub fn relevance_scores(&self, hidden: &[T], candidates: &[ItemIndex]) -> Result<Vec<T>> {
        if hidden.len() != self.config.hidden_dim {
            return Err(Error::shape("relevance_scores", format!("hidden of length {}", hidden.len())));
        }
        candidates
            .iter()
            .map(|&c| {
                if c < FIRST_ITEM || c as usize >= self.vocab_size {
                    Err(Error::Contract(format!("candidate {c} is not a real item")))
                } else {
                    Ok(dot(hidden, self.item_embedding.value.row(c as usize)))
                }
            })
            .collect()
    }

    fn step_loss(&self, a: &Active<T>, step: &TrainingStep) -> Result<T> {
        let mut loss = T::zero();
        for t in 0..a.items.len() {
            let p = a.offset + t;
            let f = a.h.row(t);
            let pos = dot(f, self.item_embedding.value.row(step.expected[p] as usize));
            let neg = dot(f, self.item_embedding.value.row(step.negatives[p] as usize));
            loss += pairwise_bce(pos, neg).0;
        }
        Ok(loss)
    }

    fn check_step(&self, step: &TrainingStep) -> Result<()> {
        let l = self.config.max_seq_len;
        if step.input.len() != l || step.expected.len() != l || step.negatives.len() != l {
            return Err(Error::shape("training_step", format!("rows must have length {l}")));
        }
        let first_real = step.input.iter().position(|&i| i != PAD).unwrap_or(l);
        if step.input[first_real..].contains(&PAD) {
            return Err(Error::Contract("training input must be left-padded".into()));
        }
        for p in 0..l {
            let real = step.input[p] != PAD;
            if real != (step.expected[p] != PAD) || real != (step.negatives[p] != PAD) {
                return Err(Error::Contract(format!("PAD pattern differs at position {p}")));
            }
            if real && step.expected[p] == step.negatives[p] {
                return Err(Error::Contract(format!("negative equals expected item at position {p}")));
            }
        }
        Ok(())
    }

    /// Mean over steps of the summed per-position pairwise loss, evaluation mode.
    pub fn training_loss(&self, steps: &[TrainingStep]) -> Result<T> {
        if steps.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let mut total = T::zero();
        for s in steps {
            self.check_step(s)?;
            total += self.step_loss(&self.run(&s.input, None)?, s)?;
        }
        Ok(total / T::of(steps.len() as f64))
    }

    /// Adds the gradient of [`Self::training_loss`] (with dropout when `rng`
    /// is given) to the parameter gradients and returns the loss.
    pub fn accumulate_gradients(&mut self, steps: &[TrainingStep], mut rng: Option<&mut Rng>) -> Result<T> {
        if steps.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let scale = T::of(1.0 / steps.len() as f64);
        let mut total = T::zero();
        for s in steps {
            self.check_step(s)?;
            let a = self.run(&s.input, rng.as_deref_mut())?;
            let n = a.items.len();
            if n == 0 {
                continue;
            }
            let d = self.config.hidden_dim;
            let mut d_f = Tensor::zeros(n, d);
            for t in 0..n {
                let p = a.offset + t;
                let (e, g) = (s.expected[p] as usize, s.negatives[p] as usize);
                let f = a.h.row(t);
                let pos = dot(f, self.item_embedding.value.row(e));
                let neg = dot(f, self.item_embedding.value.row(g));
                let (loss, dpos, dneg) = pairwise_bce(pos, neg);
                total += loss;
                let (dpos, dneg) = (dpos * scale, dneg * scale);
                for k in 0..d {
                    d_f.row_mut(t)[k] = dpos * self.item_embedding.value.get(e, k) + dneg * self.item_embedding.value.get(g, k);
                }
                for (o, &v) in self.item_embedding.grad.row_mut(e).iter_mut().zip(f) {
                    *o += dpos * v;
                }
                for (o, &v) in self.item_embedding.grad.row_mut(g).iter_mut().zip(f) {
                    *o += dneg * v;
                }
            }
            let mut d_x = d_f;
            for (block, cache) in self.blocks.iter_mut().zip(&a.blocks).rev() {
                d_x = block.backward(cache, &d_x);
            }
            apply_mask(&mut d_x, a.input_drop.as_ref());
            for (t, &item) in a.items.iter().enumerate() {
                let g = d_x.row(t);
                for (o, &v) in self.item_embedding.grad.row_mut(item as usize).iter_mut().zip(g) {
                    *o += v;
                }
                for (o, &v) in self.position_embedding.grad.row_mut(a.offset + t).iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        let loss = total * scale;
        if !loss.is_finite() {
            return Err(Error::numeric("recommender_loss", "non-finite training loss"));
        }
        Ok(loss)
    }

    /// 1-based pessimistic rank of `target` among `target ∪ negatives`.
    pub fn score_candidates(&self, history: &[ItemIndex], target: ItemIndex, negatives: &[ItemIndex]) -> Result<usize> {
        if negatives.contains(&target) {
            return Err(Error::Contract(format!("target {target} appears among the negatives")));
        }
        let f = self.last_hidden(history)?;
        let mut candidates = Vec::with_capacity(negatives.len() + 1);
        candidates.push(target);
        candidates.extend_from_slice(negatives);
        let scores: Vec<f64> = self.relevance_scores(&f, &candidates)?.into_iter().map(Scalar::to_f64_lossy).collect();
        rank_of_target(scores[0], &scores[1..])
    }

    fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            format_version: FORMAT_VERSION,
            model_kind: ModelKind::Recommender,
            vocab_size: self.vocab_size,
            model_dim: self.config.hidden_dim,
            layers: self.config.blocks,
            heads: self.config.heads,
            ffn_dim: self.config.hidden_dim,
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
        if meta.model_kind != ModelKind::Recommender {
            return Err(Error::Format(format!("checkpoint holds an {}, not a recommender", meta.model_kind)));
        }
        let config: RecConfig = serde_json::from_value(meta.training.clone())
            .map_err(|e| Error::Format(format!("recommender config: {e}")))?;
        if (config.hidden_dim, config.blocks, config.heads, config.max_seq_len)
            != (meta.model_dim, meta.layers, meta.heads, meta.max_seq_len)
        {
            return Err(Error::Format("recommender config disagrees with checkpoint dimensions".into()));
        }
        let mut model = Self::new(meta.vocab_size, config)?;
        load_params(model.params_mut(), tensors)?;
        Ok(model)
    }
}

impl<T: Scalar> Parameterized<T> for Recommender<T> {
    fn params(&self) -> Vec<&ParamTensor<T>> {
        let mut v = vec![&self.item_embedding, &self.position_embedding];
        for b in &self.blocks {
            v.extend(b.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor<T>> {
        let mut v = vec![&mut self.item_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v
    }
}

impl<T: Scalar> NextItemScorer for Recommender<T> {
    fn score(&self, history: &[ItemIndex], candidates: &[ItemIndex]) -> Result<Vec<f64>> {
        let f = self.last_hidden(history)?;
        Ok(self.relevance_scores(&f, candidates)?.into_iter().map(Scalar::to_f64_lossy).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trains from scratch. Sequences shorter than two items are skipped;
/// order, negatives and dropout are redrawn every epoch.
pub fn train_recommender<T: Scalar>(
    sequences: &[TrainingSequence],
    vocab_size: usize,
    config: &RecConfig,
    mut on_epoch: impl FnMut(&RecEpoch),
) -> Result<Recommender<T>> {
    let mut model = Recommender::<T>::new(vocab_size, config.clone())?;
    let usable: Vec<&TrainingSequence> = sequences.iter().filter(|s| s.items.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Data("no sequence with at least two items to train the recommender".into()));
    }
    let mut adam = AdamConfig::new(config.learning_rate).with_beta2(0.98);
    adam.validate()?;
    for epoch in 0..config.epochs {
        let mut rng = rng_for(config.seed, "recommender-epoch", epoch as u64);
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let steps = batch
                .iter()
                .map(|&i| make_training_step(usable[i], vocab_size, config.max_seq_len, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let loss = model.accumulate_gradients(&steps, Some(&mut rng)).map_err(|e| locate(e, epoch, b))?;
            adam_step(&mut model.params_mut(), &mut adam).map_err(|e| locate(e, epoch, b))?;
            loss_sum += loss.to_f64_lossy();
            batches += 1;
        }
        let log = RecEpoch { epoch, mean_loss: loss_sum / batches as f64 };
        log::debug!("recommender epoch {epoch}: loss {:.4}", log.mean_loss);
        on_epoch(&log);
    }
    Ok(model)
}
