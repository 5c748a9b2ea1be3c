//! The trainable model and the combined contrastive plus classification objective.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::jma::{contrastive_graph, joint_feature_graph};
use crate::encoders::{PointEncoder, PointEncoderConfig, ViewFusion, ViewFusionConfig};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{init_linear, linear, Bindings, Params};
use crate::{derive_seed, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0, temperature: 0.07 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda1, self.lambda2, self.lambda3];
        if lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidArgument(format!("loss weights {lambdas:?} must be finite and nonnegative")));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature {} must be positive", self.temperature)));
        }
        Ok(())
    }
}

/// Which visual target the point embedding is aligned with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveMode {
    /// Text-weighted joint view feature, three contrastive terms.
    #[default]
    Joint,
    /// Plain mean of the view features, no text-to-view term.
    IndependentAlignment,
}

/// Two-layer perceptron from point embeddings to parent-category logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead<T> {
    pub params: Params<T>,
    pub num_parents: usize,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(dim: usize, hidden: usize, num_parents: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        init_linear(&mut params, &mut rng, "cls.0", dim, hidden);
        init_linear(&mut params, &mut rng, "cls.1", hidden, num_parents);
        Self { params, num_parents }
    }

    pub fn logits(&self, g: &Graph<T>, b: &Bindings, h: Var) -> Var {
        linear(g, b, g.relu(linear(g, b, h, "cls.0")), "cls.1")
    }

    fn check_codes(&self, codes: &[usize]) -> Result<()> {
        match codes.iter().find(|&&c| c >= self.num_parents) {
            Some(c) => Err(Error::InvalidArgument(format!("parent code {c} outside [0, {})", self.num_parents))),
            None if codes.is_empty() => Err(Error::InvalidArgument("no parent codes".into())),
            None => Ok(()),
        }
    }

    /// Mean negative log-likelihood of the true parents.
    pub fn loss_graph(&self, g: &Graph<T>, b: &Bindings, h: Var, codes: &[usize]) -> Result<Var> {
        self.check_codes(codes)?;
        if g.shape(h).0 != codes.len() {
            return Err(Error::DimensionMismatch { expected: g.shape(h).0, got: codes.len() });
        }
        let logits = self.logits(g, b, h);
        let targets: Vec<Option<usize>> = codes.iter().map(|&c| Some(c)).collect();
        Ok(g.cross_entropy(logits, &targets))
    }
}

/// Cross-entropy of the head's parent predictions for raw point embeddings `h_c`.
pub fn parent_classification_loss<T: Scalar>(head: &ClassifierHead<T>, h_c: &Array2<T>, codes: &[usize]) -> Result<T> {
    let g = Graph::new();
    let b = head.params.bind(&g);
    let h = g.leaf(h_c.clone());
    let l = head.loss_graph(&g, &b, h, codes)?;
    Ok(g.scalar(l))
}

/// One minibatch with frozen features already computed.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    /// `(N * n_points) x 3`, clouds stacked in sample order.
    pub points: Array2<T>,
    pub n_points: usize,
    /// `(N * V) x D` raw frozen view features, `V` consecutive rows per sample.
    pub views: Array2<T>,
    pub num_views: usize,
    pub angles: Vec<usize>,
    pub depths: Vec<f64>,
    /// `N x D` unit-norm subcategory prompt embeddings.
    pub text: Array2<T>,
    pub parent_codes: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.parent_codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent_codes.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        let c = |a: &Array2<T>| a.mapv(|v| U::of(v.as_f64()));
        Batch {
            points: c(&self.points),
            n_points: self.n_points,
            views: c(&self.views),
            num_views: self.num_views,
            angles: self.angles.clone(),
            depths: self.depths.clone(),
            text: c(&self.text),
            parent_codes: self.parent_codes.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let checks = [
            (self.points.nrows(), n * self.n_points),
            (self.views.nrows(), n * self.num_views),
            (self.angles.len(), n * self.num_views),
            (self.depths.len(), n * self.num_views),
            (self.text.nrows(), n),
            (self.points.ncols(), 3),
        ];
        for (got, expected) in checks {
            if got != expected {
                return Err(Error::DimensionMismatch { expected, got });
            }
        }
        if self.num_views == 0 {
            return Err(Error::InvalidArgument("batch has no views".into()));
        }
        Ok(())
    }
}

/// Per-term loss values of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Point embedding vs visual target (joint or mean view).
    pub point_image: f64,
    pub point_text: f64,
    /// Text vs joint view feature; zero in the independent ablation.
    pub text_image: f64,
    pub classification: f64,
    pub total: f64,
}

/// Graph handles of one objective evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub point_image: Var,
    pub point_text: Option<Var>,
    pub text_image: Option<Var>,
    pub classification: Var,
    pub total: Var,
    /// `N x D` raw point embeddings.
    pub point_embedding: Var,
    /// `N x D` unit-norm visual targets.
    pub visual_target: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: PointEncoderConfig,
    pub fusion: ViewFusionConfig,
    pub head_hidden: usize,
    pub num_parents: usize,
}

/// Every trainable part: point encoder, view fusion tables and classifier head.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignModel<T> {
    pub encoder: PointEncoder<T>,
    pub fusion: ViewFusion<T>,
    pub head: ClassifierHead<T>,
}

impl<T: Scalar> AlignModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        if config.encoder.dim != config.fusion.dim {
            return Err(Error::DimensionMismatch { expected: config.encoder.dim, got: config.fusion.dim });
        }
        if config.num_parents == 0 {
            return Err(Error::InvalidArgument("need at least one parent category".into()));
        }
        Ok(Self {
            encoder: PointEncoder::new(config.encoder.clone(), derive_seed(seed, &[1])),
            fusion: ViewFusion::new(config.fusion.clone(), derive_seed(seed, &[2])),
            head: ClassifierHead::new(config.encoder.dim, config.head_hidden, config.num_parents, derive_seed(seed, &[3])),
        })
    }

    /// All trainable tensors under their unique names.
    pub fn params(&self) -> Params<T> {
        let mut p = self.encoder.params.clone();
        p.extend(self.fusion.params.clone());
        p.extend(self.head.params.clone());
        p
    }

    /// Inverse of [`AlignModel::params`]; every tensor must be present with its shape.
    pub fn set_params(&mut self, all: &Params<T>) -> Result<()> {
        for part in [&mut self.encoder.params, &mut self.fusion.params, &mut self.head.params] {
            for (name, t) in part.iter_mut() {
                let src = all.get(name).ok_or_else(|| Error::UnknownKey(name.clone()))?;
                if src.dim() != t.dim() {
                    return Err(Error::DimensionMismatch { expected: t.len(), got: src.len() });
                }
                t.assign(src);
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &Graph<T>) -> Bindings {
        self.encoder.params.bind(g).merge(self.fusion.params.bind(g)).merge(self.head.params.bind(g))
    }

    /// Build the objective on `g`.
    pub fn forward(
        &self,
        g: &Graph<T>,
        b: &Bindings,
        batch: &Batch<T>,
        lw: &LossWeights,
        mode: ObjectiveMode,
    ) -> Result<LossVars> {
        batch.validate()?;
        lw.validate()?;
        let (n, v) = (batch.len(), batch.num_views);
        let points = g.leaf(batch.points.clone());
        let h_c = self.encoder.forward(g, b, points, batch.n_points).embedding;
        let hc_n = g.l2_normalize(h_c);
        let raw = g.leaf(batch.views.clone());
        let fused = g.l2_normalize(self.fusion.forward(g, b, raw, &batch.angles, &batch.depths)?);
        let text = g.leaf(batch.text.clone());
        let tau = lw.temperature;
        let classification = self.head.loss_graph(g, b, h_c, &batch.parent_codes)?;
        let weighted = |l: Var, w: f64| g.scale(l, T::of(w));
        let (point_image, point_text, text_image, visual_target, total) = match mode {
            ObjectiveMode::Joint => {
                let rows: Vec<Var> = (0..n)
                    .map(|i| joint_feature_graph(g, g.slice_rows(fused, i * v, v), g.slice_rows(text, i, 1)))
                    .collect();
                let joint = g.l2_normalize(g.concat_rows(&rows));
                let cj = contrastive_graph(g, hc_n, joint, tau)?;
                let ct = contrastive_graph(g, hc_n, text, tau)?;
                let tj = contrastive_graph(g, text, joint, tau)?;
                let total = g.add(
                    g.add(weighted(cj, lw.lambda1), weighted(ct, lw.lambda2)),
                    g.add(weighted(tj, lw.lambda3), classification),
                );
                (cj, Some(ct), Some(tj), joint, total)
            }
            ObjectiveMode::IndependentAlignment => {
                let rows: Vec<Var> = (0..n).map(|i| g.mean_rows(g.slice_rows(fused, i * v, v))).collect();
                let mean = g.l2_normalize(g.concat_rows(&rows));
                let cm = contrastive_graph(g, hc_n, mean, tau)?;
                let ct = contrastive_graph(g, hc_n, text, tau)?;
                let total = g.add(g.add(weighted(cm, lw.lambda1), weighted(ct, lw.lambda2)), classification);
                (cm, Some(ct), None, mean, total)
            }
        };
        Ok(LossVars {
            point_image,
            point_text,
            text_image,
            classification,
            total,
            point_embedding: h_c,
            visual_target,
        })
    }

    /// Objective value and its terms, without gradients.
    pub fn total_loss(&self, batch: &Batch<T>, lw: &LossWeights, mode: ObjectiveMode) -> Result<LossBreakdown> {
        let g = Graph::new();
        let b = self.bind(&g);
        let vars = self.forward(&g, &b, batch, lw, mode)?;
        Ok(breakdown(&g, &vars))
    }

    pub fn cast<U: Scalar>(&self) -> AlignModel<U> {
        AlignModel {
            encoder: self.encoder.cast(),
            fusion: self.fusion.cast(),
            head: ClassifierHead { params: self.head.params.cast(), num_parents: self.head.num_parents },
        }
    }
}

pub(crate) fn breakdown<T: Scalar>(g: &Graph<T>, vars: &LossVars) -> LossBreakdown {
    let opt = |v: Option<Var>| v.map_or(0.0, |v| g.scalar(v).as_f64());
    LossBreakdown {
        point_image: g.scalar(vars.point_image).as_f64(),
        point_text: opt(vars.point_text),
        text_image: opt(vars.text_image),
        classification: g.scalar(vars.classification).as_f64(),
        total: g.scalar(vars.total).as_f64(),
    }
}
