//! Point tokens, their projection to the language width and injection at the placeholder.

use std::cmp::Ordering;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::PointEncoder;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::llm::conversation::ConversationRecord;
use crate::llm::lm::TinyCausalLM;
use crate::llm::vocab::Vocab;
use crate::params::{linear, normal, Bindings, Params};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectorConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    /// 1 for a single affine map, 2 for two with a ReLU between.
    pub layers: usize,
}

/// Row-wise map from point-feature width to language width.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector<T> {
    pub config: ProjectorConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Projector<T> {
    pub fn new(config: ProjectorConfig, seed: u64) -> Result<Self> {
        if !(1..=2).contains(&config.layers) || config.in_dim == 0 || config.out_dim == 0 {
            return Err(Error::InvalidArgument(format!("invalid projector {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let mut fan_in = config.in_dim;
        for i in 0..config.layers {
            let gain = if i + 1 < config.layers { 2f64.sqrt() } else { 1.0 };
            params.insert(format!("proj.{i}.w"), normal(&mut rng, fan_in, config.out_dim, gain / (fan_in as f64).sqrt()));
            params.insert(format!("proj.{i}.b"), Array2::zeros((1, config.out_dim)));
            fan_in = config.out_dim;
        }
        Ok(Self { config, params })
    }

    /// Single square layer with identity weights.
    pub fn identity(dim: usize) -> Self {
        let mut p = Self::new(ProjectorConfig { in_dim: dim, out_dim: dim, layers: 1 }, 0).expect("valid shape");
        *p.params.get_mut("proj.0.w").expect("created") = Array2::eye(dim);
        p
    }

    pub fn zeros(config: ProjectorConfig) -> Result<Self> {
        let mut p = Self::new(config, 0)?;
        p.params = p.params.zeros_like();
        Ok(p)
    }

    pub fn forward(&self, g: &Graph<T>, b: &Bindings, tokens: Var) -> Result<Var> {
        let cols = g.shape(tokens).1;
        if cols != self.config.in_dim {
            return Err(Error::DimensionMismatch { expected: self.config.in_dim, got: cols });
        }
        let mut x = tokens;
        for i in 0..self.config.layers {
            x = linear(g, b, x, &format!("proj.{i}"));
            if i + 1 < self.config.layers {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    pub fn cast<U: Scalar>(&self) -> Projector<U> {
        Projector { config: self.config, params: self.params.cast() }
    }
}

/// `T'_c` for a plain `n x in_dim` token block.
pub fn project_point_tokens<T: Scalar>(tokens: &Array2<T>, projector: &Projector<T>) -> Result<Array2<T>> {
    let g = Graph::new();
    let b = projector.params.bind(&g);
    let t = g.leaf(tokens.clone());
    let out = projector.forward(&g, &b, t)?;
    let v = g.value(out).clone();
    Ok(v)
}

/// Points ranked by pooling contribution.
///
/// A point earns one credit for every channel where it attains the max (all
/// tied points earn it). Ranking is by credits, then by feature row in
/// descending lexicographic order, so equal rank implies equal features and
/// the selected rows do not depend on point order.
fn rank_points<T: Scalar>(per_point: &Array2<T>) -> Vec<usize> {
    let mut credit = vec![0usize; per_point.nrows()];
    for col in per_point.columns() {
        let max = col.iter().copied().fold(T::neg_infinity(), T::max);
        for (i, &v) in col.iter().enumerate() {
            if v == max {
                credit[i] += 1;
            }
        }
    }
    let mut order: Vec<usize> = (0..per_point.nrows()).collect();
    order.sort_by(|&a, &b| {
        credit[b].cmp(&credit[a]).then_with(|| {
            per_point
                .row(b)
                .iter()
                .zip(per_point.row(a))
                .map(|(x, y)| x.partial_cmp(y).unwrap_or(Ordering::Equal))
                .find(|o| *o != Ordering::Equal)
                .unwrap_or(Ordering::Equal)
        })
    });
    order
}

fn check_token_count<T: Scalar>(encoder: &PointEncoder<T>, n_points: usize, n: usize) -> Result<()> {
    if encoder.config.point_widths.is_empty() {
        return Err(Error::InvalidArgument("point encoder has no per-point stage to take tokens from".into()));
    }
    if n > n_points + 1 {
        return Err(Error::InvalidArgument(format!("{n} point tokens requested from a cloud of {n_points} points")));
    }
    Ok(())
}

/// Graph form of [`extract_point_tokens`] for one cloud given as an `N x 3` node.
///
/// Row 0 is the max-pooled feature; rows 1.. are the per-point features of
/// the `n - 1` highest-ranked points.
pub fn point_tokens_graph<T: Scalar>(
    g: &Graph<T>,
    b: &Bindings,
    encoder: &PointEncoder<T>,
    points: Var,
    n: usize,
) -> Result<Var> {
    let n_points = g.shape(points).0;
    check_token_count(encoder, n_points, n)?;
    let width = encoder.config.pooled_width();
    if n == 0 {
        return Ok(g.leaf(Array2::zeros((0, width))));
    }
    let enc = encoder.forward(g, b, points, n_points);
    if n == 1 {
        return Ok(enc.pooled);
    }
    let order = rank_points(&g.value(enc.per_point));
    let picked = g.gather(enc.per_point, &order[..n - 1]);
    Ok(g.concat_rows(&[enc.pooled, picked]))
}

/// `T_c`: `n` tokens of width `pooled_width` taken before the encoder head.
pub fn extract_point_tokens<T: Scalar>(
    cloud: &crate::smo::PointCloud<T>,
    encoder: &PointEncoder<T>,
    n: usize,
) -> Result<Array2<T>> {
    let g = Graph::new();
    let b = encoder.params.bind(&g);
    let pts = g.leaf(cloud.points().clone());
    let t = point_tokens_graph(&g, &b, encoder, pts, n)?;
    let v = g.value(t).clone();
    Ok(v)
}

/// Target ids and loss mask aligned with the assembled sequence.
///
/// The placeholder expands to `n` positions that carry the placeholder id
/// and are never targets.
pub fn expanded_targets(record: &ConversationRecord, vocab: &Vocab, n: usize) -> Result<(Vec<usize>, Vec<bool>)> {
    let at = single_placeholder(record, vocab)?;
    let mut ids = record.ids[..at].to_vec();
    let mut mask = record.mask[..at].to_vec();
    ids.extend(std::iter::repeat_n(vocab.point_id(), n));
    mask.extend(std::iter::repeat_n(false, n));
    ids.extend(&record.ids[at + 1..]);
    mask.extend(&record.mask[at + 1..]);
    Ok((ids, mask))
}

fn single_placeholder(record: &ConversationRecord, vocab: &Vocab) -> Result<usize> {
    match record.placeholder_positions(vocab).as_slice() {
        [at] => Ok(*at),
        other => Err(Error::InvalidArgument(format!(
            "conversation {:?} has {} placeholders, expected exactly one",
            record.conversation.id,
            other.len()
        ))),
    }
}

/// Embed `ids[..upto]` with the language table and splice `block` in at the placeholder.
pub fn assemble_graph<T: Scalar>(
    g: &Graph<T>,
    b: &Bindings,
    lm: &TinyCausalLM<T>,
    vocab: &Vocab,
    record: &ConversationRecord,
    block: Var,
    upto: usize,
) -> Result<Var> {
    let at = single_placeholder(record, vocab)?;
    let (n, w) = g.shape(block);
    if w != lm.config.width {
        return Err(Error::DimensionMismatch { expected: lm.config.width, got: w });
    }
    if upto <= at || upto > record.ids.len() {
        return Err(Error::InvalidArgument(format!("prefix length {upto} must cover the placeholder at {at}")));
    }
    let mut parts = vec![lm.embed_ids(g, b, &record.ids[..at])];
    if n > 0 {
        parts.push(block);
    }
    if upto > at + 1 {
        parts.push(lm.embed_ids(g, b, &record.ids[at + 1..upto]));
    }
    Ok(g.concat_rows(&parts))
}

/// `[T'_c, T_l]` as one `(n + m - 1) x width` matrix, the placeholder replaced by `projected`.
pub fn assemble_input<T: Scalar>(
    record: &ConversationRecord,
    projected: &Array2<T>,
    lm: &TinyCausalLM<T>,
    vocab: &Vocab,
) -> Result<Array2<T>> {
    let g = Graph::new();
    let b = lm.params.bind(&g);
    let block = g.leaf(projected.clone());
    let seq = assemble_graph(&g, &b, lm, vocab, record, block, record.ids.len())?;
    let v = g.value(seq).clone();
    Ok(v)
}

/// Remove a row range from a plain matrix (used to drop the point block).
pub fn without_rows<T: Scalar>(m: &Array2<T>, start: usize, len: usize) -> Array2<T> {
    let keep: Vec<usize> = (0..m.nrows()).filter(|r| !(start..start + len).contains(r)).collect();
    m.select(Axis(0), &keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::PointEncoderConfig;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::llm::conversation::{Conversation, Layout};
    use crate::llm::lm::LmConfig;
    use crate::smo::{generate_synthetic_corpus, CorpusSpec, PointCloud};
    use rand::seq::SliceRandom;

    fn cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let spec = CorpusSpec { parents: 1, subs_per_parent: 1, samples_per_sub: 1, n_points: n, seed };
        generate_synthetic_corpus::<f64>(&spec).unwrap().remove(0).cloud
    }

    fn encoder() -> PointEncoder<f64> {
        PointEncoder::new(PointEncoderConfig { point_widths: vec![8, 6], head_hidden: 8, dim: 4 }, 3)
    }

    #[test]
    fn identity_and_zero_projectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t: Array2<f64> = normal(&mut rng, 5, 4, 1.0);
        assert_eq!(project_point_tokens(&t, &Projector::identity(4)).unwrap(), t);
        let z = Projector::zeros(ProjectorConfig { in_dim: 4, out_dim: 3, layers: 1 }).unwrap();
        assert!(project_point_tokens(&t, &z).unwrap().iter().all(|v| *v == 0.0));
        assert!(project_point_tokens(&t, &Projector::identity(3)).is_err());
    }

    #[test]
    fn projector_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t: Array2<f64> = normal(&mut rng, 3, 4, 1.0);
        let w: Array2<f64> = normal(&mut rng, 3, 5, 1.0);
        for layers in [1, 2] {
            let p = Projector::<f64>::new(ProjectorConfig { in_dim: 4, out_dim: 5, layers }, 9).unwrap();
            let g = Graph::new();
            let b = p.params.bind(&g);
            let tv = g.leaf(t.clone());
            let out = p.forward(&g, &b, tv).unwrap();
            let root = g.sum(g.mul(out, g.leaf(w.clone())));
            let grads = g.backward(root);
            let probe = |p: &Projector<f64>, t: &Array2<f64>| (project_point_tokens(t, p).unwrap() * &w).sum();
            let num = central_difference(&t, 1e-5, |x| probe(&p, x));
            assert!(max_relative_error(grads.get(tv).unwrap(), &num) <= 1e-4);
            for name in p.params.names().cloned().collect::<Vec<_>>() {
                let num = central_difference(p.params.tensor(&name), 1e-5, |x| {
                    let mut q = p.clone();
                    *q.params.get_mut(&name).unwrap() = x.clone();
                    probe(&q, &t)
                });
                assert!(max_relative_error(grads.get(b.var(&name)).unwrap(), &num) <= 1e-4, "{name}");
            }
        }
    }

    #[test]
    fn single_token_is_global_pooled_feature() {
        let c = cloud(32, 1);
        let enc = encoder();
        let t = extract_point_tokens(&c, &enc, 1).unwrap();
        let g = Graph::new();
        let b = enc.params.bind(&g);
        let out = enc.forward(&g, &b, g.leaf(c.points().clone()), c.len());
        assert_eq!(t, *g.value(out.pooled));
    }

    #[test]
    fn tokens_are_permutation_invariant_and_repeatable() {
        let c = cloud(48, 2);
        let enc = encoder();
        let base = extract_point_tokens(&c, &enc, 6).unwrap();
        assert_eq!(base.dim(), (6, 6));
        assert_eq!(base, extract_point_tokens(&c, &enc, 6).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut order: Vec<usize> = (0..c.len()).collect();
            order.shuffle(&mut rng);
            let pc = PointCloud::new("p", c.points().select(Axis(0), &order)).unwrap();
            assert_eq!(extract_point_tokens(&pc, &enc, 6).unwrap(), base);
        }
    }

    #[test]
    fn token_count_limits() {
        let c = cloud(8, 2);
        assert!(extract_point_tokens(&c, &encoder(), 10).is_err());
        assert_eq!(extract_point_tokens(&c, &encoder(), 9).unwrap().nrows(), 9);
        assert_eq!(extract_point_tokens(&c, &encoder(), 0).unwrap().nrows(), 0);
        let bare = PointEncoder::<f64>::new(PointEncoderConfig { point_widths: vec![], head_hidden: 4, dim: 4 }, 1);
        assert!(extract_point_tokens(&c, &bare, 1).is_err());
    }

    fn record(layout: Layout) -> (ConversationRecord, Vocab) {
        let conv = Conversation { id: "a".into(), layout, instruction: "describe it .".into(), caption: "a box".into() };
        let vocab = Vocab::build(conv.texts());
        (conv.render(&vocab).unwrap(), vocab)
    }

    #[test]
    fn assembled_lengths_and_positions() {
        let lm = TinyCausalLM::<f64>::new(LmConfig { vocab_size: 16, width: 4, blocks: 1, heads: 1, ffn: 4 }, 1).unwrap();
        for layout in [Layout::PointFirst, Layout::PointLast] {
            let (rec, vocab) = record(layout);
            let m = rec.ids.len();
            let block = Array2::from_elem((3, 4), 7.0);
            let seq = assemble_input(&rec, &block, &lm, &vocab).unwrap();
            assert_eq!(seq.nrows(), m - 1 + 3);
            let at = rec.placeholder_positions(&vocab)[0];
            for r in 0..3 {
                assert!(seq.row(at + r).iter().all(|v| *v == 7.0));
            }
            let instr = rec.ids.iter().position(|&t| t == vocab.id("describe")).unwrap();
            match layout {
                Layout::PointFirst => assert!(at < instr),
                Layout::PointLast => assert!(at > instr),
            }
            let empty = assemble_input(&rec, &Array2::zeros((0, 4)), &lm, &vocab).unwrap();
            assert_eq!(empty.nrows(), m - 1);
            assert_eq!(without_rows(&seq, at, 3), empty);
            let (ids, mask) = expanded_targets(&rec, &vocab, 3).unwrap();
            assert_eq!((ids.len(), mask.len()), (seq.nrows(), seq.nrows()));
        }
    }

    #[test]
    fn sixty_four_tokens_and_twenty_ids() {
        let lm = TinyCausalLM::<f64>::new(LmConfig { vocab_size: 40, width: 4, blocks: 1, heads: 1, ffn: 4 }, 1).unwrap();
        let caption = (0..15).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let conv = Conversation { id: "x".into(), layout: Layout::PointFirst, instruction: "go".into(), caption };
        let vocab = Vocab::build(conv.texts());
        let rec = conv.render(&vocab).unwrap();
        let lang = rec.ids.len() - 1;
        assert_eq!(lang, 20);
        let seq = assemble_input(&rec, &Array2::zeros((64, 4)), &lm, &vocab).unwrap();
        assert_eq!(seq.nrows(), 84);
    }

    #[test]
    fn placeholder_count_enforced() {
        let lm = TinyCausalLM::<f64>::new(LmConfig { vocab_size: 16, width: 4, blocks: 1, heads: 1, ffn: 4 }, 1).unwrap();
        let (mut rec, vocab) = record(Layout::PointFirst);
        rec.ids[2] = vocab.point_id();
        assert!(assemble_input(&rec, &Array2::zeros((1, 4)), &lm, &vocab).is_err());
        rec.ids.retain(|&t| t != vocab.point_id());
        assert!(assemble_input(&rec, &Array2::zeros((1, 4)), &lm, &vocab).is_err());
    }
}
