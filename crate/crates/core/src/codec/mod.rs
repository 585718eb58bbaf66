//! Frozen bridge between token sequences and continuous latents.
//!
//! The encoder is a small pre-norm transformer over content positions; PAD
//! positions skip the transformer so their latents depend only on position.
//! The decoder is non-autoregressive: a transformer over the latent grid
//! followed by a per-position classifier, truncated at the first EOS.

mod norm;
mod vocab;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{randn, Prng};
use crate::tensor::nn::{bucket_grid, Attention, GeGluFfn, Linear, Norm};
use crate::tensor::{AdamW, AdamWConfig, BucketGrid, Gradients, Graph, LrSchedule, Mat, ParamId, ParamStore, Var};
use crate::train_util::{batch_gradients, LossRecord};

pub use norm::{NormStats, STD_FLOOR};
pub use vocab::{detokenize, tokenize, TokenSeq, Vocab, BOS, EOS, MASK, PAD, SPECIALS, UNK};

/// An `L x d` latent grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSeq {
    pub values: Mat,
    pub length_hint: Option<usize>,
}

impl LatentSeq {
    pub fn new(values: Mat) -> Self {
        Self { values, length_hint: None }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub max_len: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ffn_mult: usize,
    pub rel_buckets: usize,
    /// Upper bound of the per-sequence Gaussian noise added to latents while training the decoder.
    pub latent_noise: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            max_len: 24,
            width: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            ffn_mult: 2,
            rel_buckets: 16,
            latent_noise: 0.5,
            steps: 3000,
            batch: 32,
            lr: 1e-3,
            warmup: 100,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    norm1: Norm,
    attn: Attention,
    norm2: Norm,
    ffn: GeGluFfn,
}

impl Block {
    fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &CodecConfig, rng: &mut R) -> Self {
        let d = cfg.width;
        Self {
            norm1: Norm::new(store, &format!("{name}.norm1"), d),
            attn: Attention::new(store, &format!("{name}.attn"), d, cfg.heads, Some(cfg.rel_buckets), rng),
            norm2: Norm::new(store, &format!("{name}.norm2"), d),
            ffn: GeGluFfn::new(store, &format!("{name}.ffn"), d, cfg.ffn_mult * d, rng),
        }
    }

    fn forward<'p>(
        &self,
        g: &mut Graph<'p>,
        p: &'p ParamStore,
        x: Var,
        grid: &Arc<BucketGrid>,
        mask: Option<&[bool]>,
    ) -> Var {
        let h = self.norm1.forward(g, p, x);
        let a = self.attn.forward(g, p, h, h, Some(grid), mask);
        let x = g.add(x, a);
        let h = self.norm2.forward(g, p, x);
        let f = self.ffn.forward(g, p, h);
        g.add(x, f)
    }
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: ParamId,
    enc_pos: ParamId,
    enc_blocks: Vec<Block>,
    enc_norm: Norm,
    enc_out: Linear,
    dec_in: Linear,
    dec_pos: ParamId,
    dec_blocks: Vec<Block>,
    dec_norm: Norm,
    dec_out: Linear,
}

impl Layout {
    fn build<R: Rng>(store: &mut ParamStore, cfg: &CodecConfig, vocab: usize, rng: &mut R) -> Self {
        let d = cfg.width;
        let tok_emb = store.normal("enc.tok_emb", vocab, d, 1.0, rng);
        let enc_pos = store.normal("enc.pos_emb", cfg.max_len, d, 0.5, rng);
        let enc_blocks = (0..cfg.enc_layers).map(|i| Block::new(store, &format!("enc.block{i}"), cfg, rng)).collect();
        let enc_norm = Norm::new(store, "enc.norm", d);
        let enc_out = Linear::new(store, "enc.out", d, d, rng);
        let dec_in = Linear::new(store, "dec.in", d, d, rng);
        let dec_pos = store.normal("dec.pos_emb", cfg.max_len, d, 0.5, rng);
        let dec_blocks = (0..cfg.dec_layers).map(|i| Block::new(store, &format!("dec.block{i}"), cfg, rng)).collect();
        let dec_norm = Norm::new(store, "dec.norm", d);
        let dec_out = Linear::new(store, "dec.out", d, vocab, rng);
        Self { tok_emb, enc_pos, enc_blocks, enc_norm, enc_out, dec_in, dec_pos, dec_blocks, dec_norm, dec_out }
    }
}

/// Encoder/decoder pair plus vocabulary. Parameters are only reachable
/// immutably once the model is frozen.
#[derive(Clone, Debug)]
pub struct CodecModel {
    config: CodecConfig,
    vocab: Vocab,
    store: ParamStore,
    layout: Layout,
    grid: Arc<BucketGrid>,
    frozen: bool,
}

impl CodecModel {
    /// Randomly initialised, unfrozen model.
    pub fn init(config: CodecConfig, vocab: Vocab, rng: &mut Prng) -> Result<Self> {
        if vocab.is_empty() {
            return Err(Error::Invalid("empty vocabulary".into()));
        }
        if config.width % config.heads != 0 || config.max_len < 3 {
            return Err(Error::Invalid(format!("bad codec config {config:?}")));
        }
        let mut store = ParamStore::new();
        let layout = Layout::build(&mut store, &config, vocab.len(), rng);
        let grid = bucket_grid(config.max_len, config.max_len, config.rel_buckets, 2 * config.max_len);
        Ok(Self { config, vocab, store, layout, grid, frozen: false })
    }

    /// Reassembles a model from checkpointed parameters.
    pub fn from_parts(config: CodecConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        let mut scratch = crate::rng::seeded(0);
        let mut model = Self::init(config, vocab, &mut scratch)?;
        let expected = model.store.len();
        if params.len() != expected || model.store.copy_matching(&params) != expected {
            return Err(Error::Checkpoint("codec parameters do not match config".into()));
        }
        model.frozen = true;
        Ok(model)
    }

    pub fn config(&self) -> &CodecConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn max_len(&self) -> usize {
        self.config.max_len
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        tokenize(text, &self.vocab, self.config.max_len)
    }

    pub fn detokenize(&self, seq: &TokenSeq) -> String {
        detokenize(seq, &self.vocab)
    }

    fn check_tokens(&self, tokens: &TokenSeq) -> Result<()> {
        if tokens.len() != self.config.max_len {
            return Err(Error::shape(self.config.max_len, tokens.len()));
        }
        if let Some(&bad) = tokens.ids.iter().find(|&&t| t >= self.vocab.len()) {
            return Err(Error::Invalid(format!("token id {bad} outside vocabulary of {}", self.vocab.len())));
        }
        Ok(())
    }

    fn encode_graph<'p>(&'p self, g: &mut Graph<'p>, tokens: &TokenSeq) -> Var {
        let p = &self.store;
        let l = &self.layout;
        let table = g.param(p, l.tok_emb);
        let emb = g.embed(table, &tokens.ids);
        let pos = g.param(p, l.enc_pos);
        let x0 = g.add(emb, pos);
        let mask = tokens.non_pad_mask();
        let mut x = x0;
        for b in &l.enc_blocks {
            x = b.forward(g, p, x, &self.grid, Some(&mask));
        }
        let x = g.blend(x, x0, &mask);
        let h = l.enc_norm.forward(g, p, x);
        let h = l.enc_out.forward(g, p, h);
        g.layer_norm(h)
    }

    fn decode_graph<'p>(&'p self, g: &mut Graph<'p>, latent: Var) -> Var {
        let p = &self.store;
        let l = &self.layout;
        let h = l.dec_in.forward(g, p, latent);
        let pos = g.param(p, l.dec_pos);
        let mut x = g.add(h, pos);
        for b in &l.dec_blocks {
            x = b.forward(g, p, x, &self.grid, None);
        }
        let x = l.dec_norm.forward(g, p, x);
        l.dec_out.forward(g, p, x)
    }

    pub fn encode(&self, tokens: &TokenSeq) -> Result<LatentSeq> {
        self.check_tokens(tokens)?;
        let mut g = Graph::inference();
        let z = self.encode_graph(&mut g, tokens);
        let out = g.take(z);
        Ok(LatentSeq { values: out, length_hint: Some(tokens.content_len()) })
    }

    pub fn encode_text(&self, text: &str) -> Result<LatentSeq> {
        self.encode(&self.tokenize(text)?)
    }

    /// Per-position logits `[L, vocab]`.
    pub fn logits(&self, latent: &LatentSeq) -> Result<Mat> {
        let want = (self.config.max_len, self.config.width);
        if latent.shape() != want {
            return Err(Error::shape(want, latent.shape()));
        }
        let mut g = Graph::inference();
        let z = g.constant_ref(&latent.values);
        let logits = self.decode_graph(&mut g, z);
        Ok(g.take(logits))
    }

    pub fn decode(&self, latent: &LatentSeq) -> Result<TokenSeq> {
        let logits = self.logits(latent)?;
        let ids = logits
            .rows()
            .into_iter()
            .map(|r| r.iter().enumerate().fold((0, f64::NEG_INFINITY), |a, (i, &v)| if v > a.1 { (i, v) } else { a }).0)
            .collect();
        Ok(TokenSeq::truncated(ids))
    }

    pub fn decode_text(&self, latent: &LatentSeq) -> Result<String> {
        Ok(self.detokenize(&self.decode(latent)?))
    }

    /// Reconstruction loss and gradients for one sequence with optional latent noise.
    fn loss_and_grad(&self, tokens: &TokenSeq, noise: Option<&Mat>) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&[self.store.tag()]);
        let z = self.encode_graph(&mut g, tokens);
        let z = match noise {
            Some(n) => {
                let n = g.constant_ref(n);
                g.add(z, n)
            }
            None => z,
        };
        let logits = self.decode_graph(&mut g, z);
        let loss = g.cross_entropy(logits, &tokens.ids);
        Ok((g.scalar(loss), g.backward(loss, &self.store)))
    }

    /// Fraction of sentences whose decoded token sequence equals the input exactly.
    pub fn round_trip_accuracy(&self, texts: &[String]) -> Result<f64> {
        if texts.is_empty() {
            return Ok(1.0);
        }
        let hits = crate::parallel::map(texts, |t| -> Result<bool> {
            let seq = self.tokenize(t)?;
            Ok(self.decode(&self.encode(&seq)?)? == seq)
        });
        let mut n = 0usize;
        for h in hits {
            n += usize::from(h?);
        }
        Ok(n as f64 / texts.len() as f64)
    }
}

/// Result of [`train_codec`].
#[derive(Clone, Debug)]
pub struct CodecTraining {
    pub model: CodecModel,
    pub log: Vec<LossRecord>,
}

/// Trains the codec on a sentence corpus and returns it frozen.
pub fn train_codec(sentences: &[String], config: CodecConfig, rng: &mut Prng) -> Result<CodecTraining> {
    if sentences.is_empty() {
        return Err(Error::Invalid("codec corpus is empty".into()));
    }
    if sentences.len() < 1000 {
        log::warn!("codec corpus has only {} sentences", sentences.len());
    }
    let vocab = Vocab::from_texts(sentences.iter().map(String::as_str));
    let mut model = CodecModel::init(config.clone(), vocab, rng)?;
    let seqs: Vec<TokenSeq> = sentences.iter().map(|s| model.tokenize(s)).collect::<Result<_>>()?;
    let mut opt = AdamW::new(&model.store, AdamWConfig { lr: config.lr, clip_norm: 1.0, ..Default::default() });
    let sched = LrSchedule { base: config.lr, warmup: config.warmup };
    let mut log = Vec::with_capacity(config.steps);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut cursor = order.len();
    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let seq = &seqs[order[cursor]];
            cursor += 1;
            let scale = rng.gen::<f64>() * config.latent_noise;
            let noise = randn(rng, config.max_len, config.width) * scale;
            batch.push((seq, noise));
        }
        let (loss, mut grads) = batch_gradients(&model.store, &batch, |(seq, noise)| model.loss_and_grad(seq, Some(noise)))
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("codec step {step}: {m}")),
                other => other,
            })?;
        let lr = sched.at(step);
        opt.step(&mut model.store, &mut grads, lr);
        log.push(LossRecord { step, loss, lr });
        if step % 500 == 0 {
            log::info!("codec step {step} loss {loss:.5}");
        }
    }
    model.frozen = true;
    Ok(CodecTraining { model, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny_config() -> CodecConfig {
        CodecConfig {
            max_len: 8,
            width: 16,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn_mult: 2,
            rel_buckets: 8,
            latent_noise: 0.2,
            steps: 150,
            batch: 4,
            lr: 3e-3,
            warmup: 10,
            seed: 1,
        }
    }

    fn sentences() -> Vec<String> {
        ["how can i learn chess", "what is the best way to cook", "how do i swim"].iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn encode_is_deterministic_and_shaped() {
        let vocab = Vocab::from_texts(sentences().iter().map(String::as_str));
        let m = CodecModel::init(tiny_config(), vocab, &mut seeded(1)).unwrap();
        let seq = m.tokenize("how can i learn chess").unwrap();
        let a = m.encode(&seq).unwrap();
        let b = m.encode(&seq).unwrap();
        assert_eq!(a.shape(), (8, 16));
        assert_eq!(a.values.as_slice().unwrap(), b.values.as_slice().unwrap());
    }

    #[test]
    fn pad_tail_depends_only_on_position() {
        let vocab = Vocab::from_texts(sentences().iter().map(String::as_str));
        let m = CodecModel::init(tiny_config(), vocab, &mut seeded(2)).unwrap();
        let a = m.encode_text("how can i").unwrap();
        let b = m.encode_text("what is best").unwrap();
        assert_ne!(a.values.row(1), b.values.row(1));
        for r in 5..8 {
            assert_eq!(a.values.row(r), b.values.row(r));
        }
    }

    #[test]
    fn rejects_out_of_range_ids_and_bad_shapes() {
        let vocab = Vocab::from_texts(sentences().iter().map(String::as_str));
        let m = CodecModel::init(tiny_config(), vocab, &mut seeded(3)).unwrap();
        let bad = TokenSeq { ids: vec![BOS, 999, EOS, PAD, PAD, PAD, PAD, PAD] };
        assert!(m.encode(&bad).is_err());
        assert!(m.decode(&LatentSeq::new(Mat::zeros((3, 16)))).is_err());
    }

    #[test]
    fn zero_latent_decodes_to_something_well_formed() {
        let vocab = Vocab::from_texts(sentences().iter().map(String::as_str));
        let m = CodecModel::init(tiny_config(), vocab, &mut seeded(4)).unwrap();
        let out = m.decode(&LatentSeq::new(Mat::zeros((8, 16)))).unwrap();
        assert!(out.is_well_formed());
    }

    #[test]
    fn single_sentence_is_memorised_and_training_is_seeded() {
        let corpus = vec!["how can i learn chess".to_string()];
        let cfg = CodecConfig { steps: 60, ..tiny_config() };
        let a = train_codec(&corpus, cfg.clone(), &mut seeded(5)).unwrap();
        let b = train_codec(&corpus, cfg, &mut seeded(5)).unwrap();
        assert!(a.model.is_frozen());
        assert_eq!(a.model.params().fingerprint(), b.model.params().fingerprint());
        assert_eq!(a.model.round_trip_accuracy(&corpus).unwrap(), 1.0);
    }

    #[test]
    fn small_corpus_round_trips_and_one_token_changes_latent() {
        let corpus = sentences();
        let t = train_codec(&corpus, tiny_config(), &mut seeded(6)).unwrap();
        assert_eq!(t.model.round_trip_accuracy(&corpus).unwrap(), 1.0);
        let a = t.model.encode_text("how can i learn chess").unwrap();
        let b = t.model.encode_text("how can i learn cook").unwrap();
        assert_ne!(a.values, b.values);
        assert!(t.log.last().unwrap().loss < t.log[0].loss);
    }

    #[test]
    fn from_parts_restores_identical_outputs() {
        let corpus = sentences();
        let t = train_codec(&corpus, CodecConfig { steps: 5, ..tiny_config() }, &mut seeded(8)).unwrap();
        let m2 = CodecModel::from_parts(t.model.config().clone(), t.model.vocab().clone(), t.model.params().clone()).unwrap();
        let x = t.model.encode_text("how do i swim").unwrap();
        assert_eq!(x, m2.encode_text("how do i swim").unwrap());
    }
}
