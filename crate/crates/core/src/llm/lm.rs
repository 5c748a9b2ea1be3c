//! Small pre-norm causal transformer used as the frozen language model.

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::sinusoidal_table;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{linear, normal, Bindings, Params};
use crate::Scalar;

const LN_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 3 || self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) || self.ffn == 0 {
            return Err(Error::InvalidArgument(format!("invalid language model shape {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TinyCausalLM<T> {
    pub config: LmConfig,
    pub params: Params<T>,
}

fn dense<T: Scalar>(p: &mut Params<T>, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, gain: f64) {
    p.insert(format!("{name}.w"), normal(rng, fan_in, fan_out, gain / (fan_in as f64).sqrt()));
    p.insert(format!("{name}.b"), Array2::zeros((1, fan_out)));
}

fn norm_affine<T: Scalar>(p: &mut Params<T>, name: &str, width: usize) {
    p.insert(format!("{name}.g"), Array2::ones((1, width)));
    p.insert(format!("{name}.b"), Array2::zeros((1, width)));
}

impl<T: Scalar> TinyCausalLM<T> {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.width;
        let mut p = Params::new();
        p.insert("lm.tok", normal(&mut rng, config.vocab_size, w, 0.5));
        let residual_gain = 1.0 / (2.0 * config.blocks as f64).sqrt();
        for i in 0..config.blocks {
            norm_affine(&mut p, &format!("lm.{i}.ln1"), w);
            for proj in ["q", "k", "v"] {
                dense(&mut p, &mut rng, &format!("lm.{i}.{proj}"), w, w, 1.0);
            }
            dense(&mut p, &mut rng, &format!("lm.{i}.o"), w, w, residual_gain);
            norm_affine(&mut p, &format!("lm.{i}.ln2"), w);
            dense(&mut p, &mut rng, &format!("lm.{i}.ffn.0"), w, config.ffn, 2f64.sqrt());
            dense(&mut p, &mut rng, &format!("lm.{i}.ffn.1"), config.ffn, w, residual_gain);
        }
        norm_affine(&mut p, "lm.lnf", w);
        dense(&mut p, &mut rng, "lm.out", w, config.vocab_size, 1.0);
        Ok(Self { config, params: p })
    }

    /// Embedding table rows for `ids`.
    pub fn embed_ids(&self, g: &Graph<T>, b: &Bindings, ids: &[usize]) -> Var {
        g.gather(b.var("lm.tok"), ids)
    }

    pub fn embed_array(&self, ids: &[usize]) -> Array2<T> {
        self.params.tensor("lm.tok").select(Axis(0), ids)
    }

    fn norm(g: &Graph<T>, b: &Bindings, x: Var, name: &str) -> Var {
        let n = g.layer_norm(x, T::of(LN_FLOOR));
        g.add_row(g.mul_row(n, b.var(&format!("{name}.g"))), b.var(&format!("{name}.b")))
    }

    /// Next-token logits (`L x vocab`) for an embedded `L x width` sequence.
    pub fn forward(&self, g: &Graph<T>, b: &Bindings, seq: Var) -> Var {
        let (len, w) = g.shape(seq);
        let pos = g.leaf(sinusoidal_table(len, w).mapv(T::of));
        let mut x = g.add(seq, pos);
        let heads = self.config.heads;
        let dh = w / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        for i in 0..self.config.blocks {
            let h = Self::norm(g, b, x, &format!("lm.{i}.ln1"));
            let q = linear(g, b, h, &format!("lm.{i}.q"));
            let k = linear(g, b, h, &format!("lm.{i}.k"));
            let v = linear(g, b, h, &format!("lm.{i}.v"));
            let outs: Vec<Var> = (0..heads)
                .map(|hd| {
                    let (qh, kh, vh) = (g.slice_cols(q, hd * dh, dh), g.slice_cols(k, hd * dh, dh), g.slice_cols(v, hd * dh, dh));
                    let att = g.causal_softmax(g.scale(g.matmul(qh, g.transpose(kh)), scale));
                    g.matmul(att, vh)
                })
                .collect();
            let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
            x = g.add(x, linear(g, b, cat, &format!("lm.{i}.o")));
            let h = Self::norm(g, b, x, &format!("lm.{i}.ln2"));
            let f = g.relu(linear(g, b, h, &format!("lm.{i}.ffn.0")));
            x = g.add(x, linear(g, b, f, &format!("lm.{i}.ffn.1")));
        }
        let h = Self::norm(g, b, x, "lm.lnf");
        linear(g, b, h, "lm.out")
    }

    /// Logits for a plain embedded sequence.
    pub fn logits(&self, seq: &Array2<T>) -> Array2<T> {
        let g = Graph::new();
        let b = self.params.bind(&g);
        let s = g.leaf(seq.clone());
        let out = self.forward(&g, &b, s);
        let v = g.value(out).clone();
        v
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub fn cast<U: Scalar>(&self) -> TinyCausalLM<U> {
        TinyCausalLM { config: self.config, params: self.params.cast() }
    }
}

/// Per-row targets: row `p` predicts token `p + 1` when that token is masked in.
pub fn shifted_targets(ids: &[usize], mask: &[bool]) -> Result<Vec<Option<usize>>> {
    if ids.len() != mask.len() {
        return Err(Error::DimensionMismatch { expected: ids.len(), got: mask.len() });
    }
    if mask.first() == Some(&true) {
        return Err(Error::InvalidArgument("the first position has no preceding context to predict it".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::InvalidArgument("loss mask selects no positions".into()));
    }
    let mut t: Vec<Option<usize>> = (1..ids.len()).map(|p| mask[p].then_some(ids[p])).collect();
    t.push(None);
    Ok(t)
}

/// Graph form of [`sft_loss`].
pub fn sft_loss_graph<T: Scalar>(
    g: &Graph<T>,
    b: &Bindings,
    lm: &TinyCausalLM<T>,
    seq: Var,
    ids: &[usize],
    mask: &[bool],
) -> Result<Var> {
    let len = g.shape(seq).0;
    if len != ids.len() {
        return Err(Error::DimensionMismatch { expected: len, got: ids.len() });
    }
    let targets = shifted_targets(ids, mask)?;
    if let Some(bad) = targets.iter().flatten().find(|&&t| t >= lm.config.vocab_size) {
        return Err(Error::InvalidArgument(format!("target id {bad} outside the vocabulary")));
    }
    Ok(g.cross_entropy(lm.forward(g, b, seq), &targets))
}

/// Mean next-token cross entropy over the positions whose `mask` is true.
///
/// `ids[p]` is the token at position `p` of the embedded sequence `seq`; the
/// ids at unmasked positions never enter the value.
pub fn sft_loss<T: Scalar>(lm: &TinyCausalLM<T>, seq: &Array2<T>, ids: &[usize], mask: &[bool]) -> Result<T> {
    let g = Graph::new();
    let b = lm.params.bind(&g);
    let s = g.leaf(seq.clone());
    let l = sft_loss_graph(&g, &b, lm, s, ids, mask)?;
    Ok(g.scalar(l))
}

/// Index of the largest entry; the lowest index wins ties.
fn argmax<T: Scalar>(row: ndarray::ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding after an embedded prefix.
///
/// Stops at `eos` (not included) or after `max_len` tokens.
pub fn decode_greedy<T: Scalar>(lm: &TinyCausalLM<T>, prefix: &Array2<T>, max_len: usize, eos: usize) -> Vec<usize> {
    let mut seq = prefix.clone();
    let mut out = Vec::new();
    while out.len() < max_len {
        let logits = lm.logits(&seq);
        let next = argmax(logits.row(logits.nrows() - 1));
        if next == eos {
            break;
        }
        out.push(next);
        seq.push_row(lm.params.tensor("lm.tok").row(next)).expect("width matches");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};

    pub(crate) fn tiny() -> LmConfig {
        LmConfig { vocab_size: 7, width: 4, blocks: 1, heads: 2, ffn: 6 }
    }

    fn seq(lm: &TinyCausalLM<f64>, ids: &[usize]) -> Array2<f64> {
        lm.embed_array(ids)
    }

    #[test]
    fn causal_prefix_logits_do_not_see_the_future() {
        let lm = TinyCausalLM::<f64>::new(tiny(), 1).unwrap();
        let full = lm.logits(&seq(&lm, &[3, 4, 5, 6]));
        let prefix = lm.logits(&seq(&lm, &[3, 4]));
        let d = (&full.slice(ndarray::s![..2, ..]) - &prefix).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v));
        assert!(d < 1e-12);
    }

    #[test]
    fn uniform_model_gives_log_vocab() {
        let cfg = LmConfig { vocab_size: 50, width: 8, blocks: 1, heads: 2, ffn: 8 };
        let mut lm = TinyCausalLM::<f64>::new(cfg, 2).unwrap();
        *lm.params.get_mut("lm.out.w").unwrap() = Array2::zeros((8, 50));
        let ids = [5, 9, 11, 40];
        let l = sft_loss(&lm, &lm.embed_array(&ids), &ids, &[false, true, true, true]).unwrap();
        assert!((l - 50f64.ln()).abs() < 1e-12);
        assert!((l - 3.912).abs() < 1e-3);
    }

    #[test]
    fn certain_model_gives_zero_loss() {
        let mut lm = TinyCausalLM::<f64>::new(tiny(), 3).unwrap();
        *lm.params.get_mut("lm.out.w").unwrap() = Array2::zeros((4, 7));
        let mut bias = Array2::zeros((1, 7));
        bias[[0, 2]] = 1e4;
        *lm.params.get_mut("lm.out.b").unwrap() = bias;
        let ids = [0, 2, 2];
        assert!(sft_loss(&lm, &lm.embed_array(&ids), &ids, &[false, true, true]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn empty_mask_and_mismatch_rejected() {
        let lm = TinyCausalLM::<f64>::new(tiny(), 4).unwrap();
        let ids = [1, 2, 3];
        let s = lm.embed_array(&ids);
        assert!(sft_loss(&lm, &s, &ids, &[false; 3]).is_err());
        assert!(sft_loss(&lm, &s, &ids, &[false, true]).is_err());
        assert!(sft_loss(&lm, &s, &ids, &[true, true, true]).is_err());
    }

    #[test]
    fn unmasked_targets_do_not_matter() {
        let lm = TinyCausalLM::<f64>::new(tiny(), 5).unwrap();
        let ids = [1, 2, 3, 4, 5];
        let mask = [false, false, true, false, true];
        let s = lm.embed_array(&ids);
        let a = sft_loss(&lm, &s, &ids, &mask).unwrap();
        let b = sft_loss(&lm, &s, &[6, 0, 3, 6, 5], &mask).unwrap();
        assert!((a - b).abs() <= 1e-8);
    }

    #[test]
    fn hard_wired_end_token_decodes_empty() {
        let mut lm = TinyCausalLM::<f64>::new(tiny(), 6).unwrap();
        *lm.params.get_mut("lm.out.w").unwrap() = Array2::zeros((4, 7));
        let mut bias = Array2::zeros((1, 7));
        bias[[0, 2]] = 5.0;
        *lm.params.get_mut("lm.out.b").unwrap() = bias;
        assert!(decode_greedy(&lm, &lm.embed_array(&[4, 5]), 10, 2).is_empty());
    }

    #[test]
    fn decoding_is_pure() {
        let lm = TinyCausalLM::<f64>::new(tiny(), 7).unwrap();
        let p = lm.embed_array(&[3, 1]);
        let a = decode_greedy(&lm, &p, 6, 2);
        assert_eq!(a, decode_greedy(&lm, &p, 6, 2));
        assert!(a.len() <= 6);
    }

    #[test]
    fn parameter_and_input_gradients_check() {
        let lm = TinyCausalLM::<f64>::new(tiny(), 8).unwrap();
        let ids = [3, 1, 4, 5, 2];
        let mask = [false, false, true, true, true];
        let s0 = lm.embed_array(&ids);
        let g = Graph::new();
        let b = lm.params.bind(&g);
        let s = g.leaf(s0.clone());
        let l = sft_loss_graph(&g, &b, &lm, s, &ids, &mask).unwrap();
        let grads = g.backward(l);
        let num = central_difference(&s0, 1e-5, |x| sft_loss(&lm, x, &ids, &mask).unwrap());
        assert!(max_relative_error(grads.get(s).unwrap(), &num) <= 1e-4);
        for name in ["lm.0.q.w", "lm.0.k.w", "lm.0.v.w", "lm.0.o.w", "lm.0.ffn.0.w", "lm.0.ln1.g", "lm.lnf.b", "lm.out.w"] {
            let num = central_difference(lm.params.tensor(name), 1e-5, |w| {
                let mut m = lm.clone();
                *m.params.get_mut(name).unwrap() = w.clone();
                sft_loss(&m, &s0, &ids, &mask).unwrap()
            });
            let err = max_relative_error(grads.get(b.var(name)).unwrap(), &num);
            assert!(err <= 1e-4, "{name}: {err}");
        }
    }
}
