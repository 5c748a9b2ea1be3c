//! Language-model pretraining and two-tier bridge training.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::PointEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::llm::bridge::{assemble_graph, expanded_targets, point_tokens_graph, Projector};
use crate::llm::conversation::ConversationRecord;
use crate::llm::lm::{decode_greedy, sft_loss_graph, TinyCausalLM};
use crate::llm::vocab::Vocab;
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::params::{Bindings, Params};
use crate::smo::PointCloud;
use crate::Scalar;

/// Point encoder, projector and frozen language model.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeModel<T> {
    pub encoder: PointEncoder<T>,
    pub projector: Projector<T>,
    pub lm: TinyCausalLM<T>,
    pub vocab: Vocab,
    pub num_tokens: usize,
}

/// A rendered conversation and the cloud its placeholder stands for.
#[derive(Debug, Clone)]
pub struct BridgeExample<T> {
    pub cloud: PointCloud<T>,
    pub record: ConversationRecord,
}

impl<T: Scalar> BridgeModel<T> {
    fn bind(&self, g: &Graph<T>) -> Bindings {
        self.encoder.params.bind(g).merge(self.projector.params.bind(g)).merge(self.lm.params.bind(g))
    }

    /// Assembled embedding of `ex` up to token `upto` of its record.
    fn sequence(&self, g: &Graph<T>, b: &Bindings, ex: &BridgeExample<T>, upto: usize) -> Result<Var> {
        let pts = g.leaf(ex.cloud.points().clone());
        let tokens = point_tokens_graph(g, b, &self.encoder, pts, self.num_tokens)?;
        let block = if self.num_tokens == 0 {
            g.leaf(ndarray::Array2::zeros((0, self.lm.config.width)))
        } else {
            self.projector.forward(g, b, tokens)?
        };
        assemble_graph(g, b, &self.lm, &self.vocab, &ex.record, block, upto)
    }

    /// Mean masked loss over `batch` as a graph node.
    pub fn loss_graph(&self, g: &Graph<T>, b: &Bindings, batch: &[&BridgeExample<T>]) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty bridge batch".into()));
        }
        let mut total = None;
        for ex in batch {
            let seq = self.sequence(g, b, ex, ex.record.ids.len())?;
            let (ids, mask) = expanded_targets(&ex.record, &self.vocab, self.num_tokens)?;
            let l = sft_loss_graph(g, b, &self.lm, seq, &ids, &mask)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l),
            });
        }
        Ok(g.scale(total.expect("non-empty"), T::of(1.0 / batch.len() as f64)))
    }

    pub fn loss(&self, batch: &[&BridgeExample<T>]) -> Result<T> {
        let g = Graph::new();
        let b = self.bind(&g);
        let l = self.loss_graph(&g, &b, batch)?;
        Ok(g.scalar(l))
    }

    /// Greedy caption ids for `ex`, generated after its `ASSISTANT:` token.
    pub fn decode(&self, ex: &BridgeExample<T>, max_len: usize) -> Result<Vec<usize>> {
        let g = Graph::new();
        let b = self.bind(&g);
        let prefix = self.sequence(&g, &b, ex, ex.record.prompt_len)?;
        let p = g.value(prefix).clone();
        Ok(decode_greedy(&self.lm, &p, max_len, self.vocab.eos_id()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeStepConfig {
    pub optimizer: AdamWConfig,
    /// Projector learning rate.
    pub lr_main: f64,
    /// Point-encoder learning rate.
    pub lr_low: f64,
    pub total_steps: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BridgeState<T> {
    pub model: BridgeModel<T>,
    pub optimizer: AdamW<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BridgeMetrics {
    pub step: u64,
    pub lr_main: f64,
    pub lr_low: f64,
    pub loss: f64,
}

impl<T: Scalar> BridgeState<T> {
    pub fn new(model: BridgeModel<T>, optimizer: AdamWConfig) -> Self {
        Self { model, optimizer: AdamW::new(optimizer) }
    }
}

/// One update of the projector at `lr_main` and the point encoder at `lr_low`.
///
/// The language model is read but never written.
pub fn llm_train_step<T: Scalar>(
    state: &mut BridgeState<T>,
    batch: &[&BridgeExample<T>],
    cfg: &BridgeStepConfig,
) -> Result<BridgeMetrics> {
    let g = Graph::new();
    let model = &mut state.model;
    let b = model.bind(&g);
    let loss = model.loss_graph(&g, &b, batch)?;
    let value = g.scalar(loss).as_f64();
    let step = state.optimizer.step_count();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss { step, detail: format!("bridge loss {value}") });
    }
    let grads = g.backward(loss);
    let lr_main = cosine_lr(cfg.lr_main, step, cfg.total_steps);
    let lr_low = cosine_lr(cfg.lr_low, step, cfg.total_steps);
    state.optimizer.config = cfg.optimizer;
    state.optimizer.begin_step();
    let gp = b.grads(&grads, &model.projector.params);
    state.optimizer.update(&mut model.projector.params, &gp, lr_main);
    let ge = b.grads(&grads, &model.encoder.params);
    state.optimizer.update(&mut model.encoder.params, &ge, lr_low);
    Ok(BridgeMetrics { step, lr_main, lr_low, loss: value })
}

/// Plain next-token training of the language model on the conversations
/// with the placeholder removed, every position after the first a target.
///
/// Returns the loss of every step.
pub fn pretrain_lm<T: Scalar>(
    lm: &mut TinyCausalLM<T>,
    vocab: &Vocab,
    records: &[ConversationRecord],
    steps: u64,
    batch_size: usize,
    optimizer: AdamWConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if records.is_empty() || batch_size == 0 {
        return Err(Error::InvalidArgument("language model pretraining needs records and a positive batch".into()));
    }
    let seqs: Vec<Vec<usize>> =
        records.iter().map(|r| r.ids.iter().copied().filter(|&t| t != vocab.point_id()).collect()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(optimizer);
    let mut losses = Vec::with_capacity(steps as usize);
    for step in 0..steps {
        let g = Graph::new();
        let b = lm.params.bind(&g);
        let mut total = None;
        let picks: Vec<&Vec<usize>> = (0..batch_size).map(|_| seqs.choose(&mut rng).expect("non-empty")).collect();
        for ids in &picks {
            let mask: Vec<bool> = (0..ids.len()).map(|i| i > 0).collect();
            let seq = lm.embed_ids(&g, &b, ids);
            let l = sft_loss_graph(&g, &b, lm, seq, ids, &mask)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l),
            });
        }
        let loss = g.scale(total.expect("batch_size > 0"), T::of(1.0 / batch_size as f64));
        let value = g.scalar(loss).as_f64();
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step, detail: format!("language model loss {value}") });
        }
        let grads = g.backward(loss);
        opt.begin_step();
        let gp: Params<T> = b.grads(&grads, &lm.params);
        opt.update(&mut lm.params, &gp, cosine_lr(optimizer.lr, step, steps));
        losses.push(value);
    }
    Ok(losses)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::encoders::PointEncoderConfig;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::llm::bridge::ProjectorConfig;
    use crate::llm::conversation::{build_conversations, default_templates};
    use crate::llm::lm::LmConfig;
    use crate::smo::{generate_synthetic_corpus, CorpusSpec};

    pub(crate) fn tiny_examples(n: usize) -> (Vec<BridgeExample<f64>>, Vocab) {
        let spec = CorpusSpec { parents: 2, subs_per_parent: 2, samples_per_sub: 3, n_points: 16, seed: 4 };
        let corpus = generate_synthetic_corpus::<f64>(&spec).unwrap();
        let caps: Vec<(String, String)> =
            corpus.iter().take(n).map(|e| (e.cloud.id.clone(), format!("a {}", e.sub))).collect();
        let convs = build_conversations(&caps, &default_templates(), 1).unwrap();
        let vocab = Vocab::build(convs.iter().flat_map(|c| c.texts()));
        let ex = convs
            .iter()
            .zip(&corpus)
            .map(|(c, e)| BridgeExample { cloud: e.cloud.clone(), record: c.render(&vocab).unwrap() })
            .collect();
        (ex, vocab)
    }

    pub(crate) fn tiny_model(vocab: Vocab, seed: u64) -> BridgeModel<f64> {
        let encoder = PointEncoder::new(PointEncoderConfig { point_widths: vec![6, 5], head_hidden: 4, dim: 4 }, seed);
        let lm = TinyCausalLM::new(LmConfig { vocab_size: vocab.len(), width: 4, blocks: 1, heads: 2, ffn: 6 }, seed + 1)
            .unwrap();
        let projector = Projector::new(ProjectorConfig { in_dim: 5, out_dim: 4, layers: 1 }, seed + 2).unwrap();
        BridgeModel { encoder, projector, lm, vocab, num_tokens: 3 }
    }

    fn cfg(lr_main: f64, lr_low: f64) -> BridgeStepConfig {
        BridgeStepConfig { optimizer: AdamWConfig::default(), lr_main, lr_low, total_steps: 10 }
    }

    #[test]
    fn frozen_lm_and_zero_low_lr() {
        let (ex, vocab) = tiny_examples(4);
        let mut state = BridgeState::new(tiny_model(vocab, 1), AdamWConfig::default());
        let (lm, enc, proj) = (state.model.lm.checksum(), state.model.encoder.params.checksum(), state.model.projector.params.checksum());
        let batch: Vec<&BridgeExample<f64>> = ex.iter().collect();
        for _ in 0..3 {
            llm_train_step(&mut state, &batch, &cfg(1e-2, 0.0)).unwrap();
        }
        assert_eq!(state.model.lm.checksum(), lm);
        assert_eq!(state.model.encoder.params.checksum(), enc);
        assert_ne!(state.model.projector.params.checksum(), proj);
    }

    #[test]
    fn trajectory_is_reproducible() {
        let (ex, vocab) = tiny_examples(4);
        let batch: Vec<&BridgeExample<f64>> = ex.iter().collect();
        let run = || {
            let mut s = BridgeState::new(tiny_model(vocab.clone(), 2), AdamWConfig::default());
            (0..10).map(|_| llm_train_step(&mut s, &batch, &cfg(1e-2, 1e-3)).unwrap().loss).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6));
        assert!(a[9] < a[0], "{a:?}");
    }

    #[test]
    fn encoder_gradient_through_tokens_checks() {
        let (ex, vocab) = tiny_examples(2);
        let model = tiny_model(vocab, 3);
        let batch: Vec<&BridgeExample<f64>> = ex.iter().collect();
        let g = Graph::new();
        let b = model.bind(&g);
        let l = model.loss_graph(&g, &b, &batch).unwrap();
        let grads = g.backward(l);
        for name in ["enc.point.0.w", "enc.point.1.b", "proj.0.w"] {
            let tensor = if name.starts_with("proj") { model.projector.params.tensor(name) } else { model.encoder.params.tensor(name) };
            let num = central_difference(tensor, 1e-6, |x| {
                let mut m = model.clone();
                let slot = if name.starts_with("proj") { &mut m.projector.params } else { &mut m.encoder.params };
                *slot.get_mut(name).unwrap() = x.clone();
                m.loss(&batch).unwrap()
            });
            let err = max_relative_error(grads.get(b.var(name)).unwrap(), &num);
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }

    #[test]
    fn pretraining_lowers_language_loss() {
        let (ex, vocab) = tiny_examples(6);
        let mut lm = TinyCausalLM::<f64>::new(LmConfig { vocab_size: vocab.len(), width: 8, blocks: 1, heads: 2, ffn: 8 }, 5).unwrap();
        let recs: Vec<ConversationRecord> = ex.iter().map(|e| e.record.clone()).collect();
        let opt = AdamWConfig { lr: 1e-2, ..AdamWConfig::default() };
        let l = pretrain_lm(&mut lm, &vocab, &recs, 40, 3, opt, 1).unwrap();
        assert!(l[39] < l[0]);
    }
}
