//! Text-weighted joint view feature and the symmetric contrastive loss.

use ndarray::{Array1, Array2, Axis};

use crate::encoders::Embedding;
use crate::error::{Error, Result};
use crate::graph::{log_softmax_at, softmax_rows, Graph, Var};
use crate::Scalar;

/// Convex combination of view rows weighted by their agreement with a text embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct JointFeature<T> {
    pub vec: Array1<T>,
    pub weights: Array1<T>,
}

impl<T: Scalar> JointFeature<T> {
    /// Recombine `views` with the stored weights.
    pub fn recompute(&self, views: &Array2<T>) -> Array1<T> {
        self.weights.dot(views)
    }
}

/// `s = views . text`, `w = softmax(s)`, `vec = sum_v w_v views_v`.
///
/// Scores use the rows as given; callers normalize views and text first when
/// cosine scores are wanted.
pub fn joint_feature<T: Scalar>(views: &Array2<T>, text: &Embedding<T>) -> Result<JointFeature<T>> {
    if views.nrows() == 0 {
        return Err(Error::InvalidArgument("joint feature needs at least one view".into()));
    }
    if views.ncols() != text.dim() {
        return Err(Error::DimensionMismatch { expected: views.ncols(), got: text.dim() });
    }
    let scores = views.dot(&text.vec).insert_axis(Axis(0));
    let weights = softmax_rows(&scores, false).row(0).to_owned();
    let vec = weights.dot(views);
    Ok(JointFeature { vec, weights })
}

/// Graph form of [`joint_feature`] for a `V x D` view block and a `1 x D` text row.
pub fn joint_feature_graph<T: Scalar>(g: &Graph<T>, views: Var, text: Var) -> Var {
    let scores = g.matmul(text, g.transpose(views));
    let weights = g.softmax(scores);
    g.matmul(weights, views)
}

fn check_pair<T: Scalar>(a: &Array2<T>, b: &Array2<T>, temperature: f64) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.nrows(), got: b.nrows() });
    }
    if a.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs at least 2 pairs, got {}",
            a.nrows()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    Ok(())
}

/// Symmetric InfoNCE over matched rows of `a` and `b`, averaged over pairs.
///
/// Rows are used as given (normalize first for cosine logits).
pub fn contrastive_loss<T: Scalar>(a: &Array2<T>, b: &Array2<T>, temperature: f64) -> Result<T> {
    check_pair(a, b, temperature)?;
    let logits = a.dot(&b.t()).mapv(|v| v / T::of(temperature));
    let n = a.nrows();
    let mut total = T::zero();
    for i in 0..n {
        total -= log_softmax_at(logits.row(i), i);
        total -= log_softmax_at(logits.column(i), i);
    }
    Ok(total / T::of(2.0 * n as f64))
}

/// Graph form of [`contrastive_loss`]; shapes are validated up front.
pub fn contrastive_graph<T: Scalar>(g: &Graph<T>, a: Var, b: Var, temperature: f64) -> Result<Var> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::DimensionMismatch { expected: sa.0, got: sb.0 });
    }
    if sa.0 < 2 {
        return Err(Error::InvalidArgument(format!("contrastive loss needs at least 2 pairs, got {}", sa.0)));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    let logits = g.scale(g.matmul(a, g.transpose(b)), T::of(1.0 / temperature));
    let diag: Vec<Option<usize>> = (0..sa.0).map(Some).collect();
    let ab = g.cross_entropy(logits, &diag);
    let ba = g.cross_entropy(g.transpose(logits), &diag);
    Ok(g.scale(g.add(ab, ba), T::of(0.5)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, max_relative_error};
    use crate::params::normal;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_view_is_returned_exactly() {
        let v = array![[0.3, -1.2, 4.0]];
        let j = joint_feature(&v, &Embedding::new(array![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(j.weights, array![1.0]);
        assert_eq!(j.vec, v.row(0));
    }

    #[test]
    fn identical_views_give_uniform_weights() {
        let v: Array2<f64> = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let j = joint_feature(&v, &Embedding::new(array![0.2, -0.9])).unwrap();
        for w in &j.weights {
            assert!((w - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!((&j.vec - &v.row(0)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn hand_evaluated_two_view_weights() {
        let ln3 = 3f64.ln();
        let v = array![[0.0, 1.0], [ln3, 0.0]];
        let j = joint_feature(&v, &Embedding::new(array![1.0, 0.0])).unwrap();
        assert!((j.weights[0] - 0.25).abs() <= 1e-9 && (j.weights[1] - 0.75).abs() <= 1e-9);
        let expect = &v.row(0) * 0.25 + &v.row(1) * 0.75;
        assert!((&j.vec - &expect).iter().all(|d| d.abs() <= 1e-12));
        assert_eq!(j.recompute(&v), j.vec);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let v = array![[1.0, 2.0]];
        assert!(joint_feature(&v, &Embedding::new(array![1.0, 2.0, 3.0])).is_err());
    }

    #[test]
    fn identity_pair_contrastive_value() {
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let l = contrastive_loss(&eye, &eye, 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn identical_rows_give_ln_two() {
        let s = 0.5f64.sqrt();
        let a = array![[s, s], [s, s]];
        let l = contrastive_loss(&a, &a, 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_pair_rejected() {
        let a = array![[1.0, 0.0]];
        assert!(contrastive_loss(&a, &a, 0.07).is_err());
    }

    #[test]
    fn graph_matches_direct_and_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Array2<f64> = normal(&mut rng, 4, 3, 0.6);
        let b: Array2<f64> = normal(&mut rng, 4, 3, 0.6);
        let g = Graph::new();
        let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let l = contrastive_graph(&g, va, vb, 0.5).unwrap();
        assert!((g.scalar(l) - contrastive_loss(&a, &b, 0.5).unwrap()).abs() < 1e-12);
        let grads = g.backward(l);
        let num = central_difference(&a, 1e-5, |x| contrastive_loss(x, &b, 0.5).unwrap());
        assert!(max_relative_error(grads.get(va).unwrap(), &num) <= 1e-4);
    }

    #[test]
    fn joint_graph_matches_direct_and_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let views: Array2<f64> = normal(&mut rng, 3, 4, 0.8);
        let text: Array2<f64> = normal(&mut rng, 1, 4, 0.8);
        let w: Array2<f64> = normal(&mut rng, 1, 4, 1.0);
        let g = Graph::new();
        let (vv, vt) = (g.leaf(views.clone()), g.leaf(text.clone()));
        let j = joint_feature_graph(&g, vv, vt);
        let direct = joint_feature(&views, &Embedding::new(text.row(0).to_owned())).unwrap();
        assert!((&g.value(j).row(0) - &direct.vec).iter().all(|d| d.abs() < 1e-12));
        let wl = g.leaf(w.clone());
        let root = g.sum(g.mul(j, wl));
        let grads = g.backward(root);
        let probe = |v: &Array2<f64>, t: &Array2<f64>| {
            joint_feature(v, &Embedding::new(t.row(0).to_owned())).unwrap().vec.dot(&w.row(0))
        };
        let nv = central_difference(&views, 1e-5, |v| probe(v, &text));
        let nt = central_difference(&text, 1e-5, |t| probe(&views, t));
        assert!(max_relative_error(grads.get(vv).unwrap(), &nv) <= 1e-4);
        assert!(max_relative_error(grads.get(vt).unwrap(), &nt) <= 1e-4);
    }
}
