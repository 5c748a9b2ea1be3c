//! Turning triplets into minibatches with cached frozen features.

use std::collections::HashMap;

use ndarray::{Array1, Array2};

use crate::align::objective::Batch;
use crate::encoders::FrozenEncoder;
use crate::error::{Error, Result};
use crate::smo::{CategoryTree, TripletSample, ViewImage};
use crate::zeroshot::fill_template;
use crate::Scalar;

/// Memo of frozen encoder outputs; valid as long as the encoders are unchanged.
#[derive(Debug, Clone, Default)]
pub struct FeatureCache<T> {
    images: HashMap<String, Array1<T>>,
    texts: HashMap<String, Array1<T>>,
}

impl<T: Scalar> FeatureCache<T> {
    pub fn new() -> Self {
        Self { images: HashMap::new(), texts: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.images.len() + self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image(&mut self, enc: &FrozenEncoder, view: &ViewImage<T>) -> Result<Array1<T>> {
        let key = view.content_key();
        if let Some(v) = self.images.get(&key) {
            return Ok(v.clone());
        }
        let v = enc.encode_image(view)?.vec;
        self.images.insert(key, v.clone());
        Ok(v)
    }

    pub fn text(&mut self, enc: &FrozenEncoder, text: &str) -> Result<Array1<T>> {
        if let Some(v) = self.texts.get(text) {
            return Ok(v.clone());
        }
        let v = enc.encode_text(text)?.vec;
        self.texts.insert(text.to_string(), v.clone());
        Ok(v)
    }
}

/// Frozen encoders, the category tree and the prompt template used to build batches.
#[derive(Debug, Clone, Copy)]
pub struct BatchBuilder<'a> {
    pub image: &'a FrozenEncoder,
    pub text: &'a FrozenEncoder,
    pub tree: &'a CategoryTree,
    pub template: &'a str,
}

impl BatchBuilder<'_> {
    /// Stack `samples` into one batch; every sample needs the same point and view counts.
    pub fn build<T: Scalar>(&self, samples: &[&TripletSample<T>], cache: &mut FeatureCache<T>) -> Result<Batch<T>> {
        let first = samples.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (n_points, num_views) = (first.cloud.len(), first.views.len());
        let dim = self.image.dim();
        if self.text.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.text.dim() });
        }
        let n = samples.len();
        let mut points = Array2::zeros((n * n_points, 3));
        let mut views = Array2::zeros((n * num_views, dim));
        let mut text = Array2::zeros((n, dim));
        let mut angles = Vec::with_capacity(n * num_views);
        let mut depths = Vec::with_capacity(n * num_views);
        let mut parent_codes = Vec::with_capacity(n);
        for (i, s) in samples.iter().enumerate() {
            if s.cloud.len() != n_points {
                return Err(Error::DimensionMismatch { expected: n_points, got: s.cloud.len() });
            }
            if s.views.len() != num_views {
                return Err(Error::DimensionMismatch { expected: num_views, got: s.views.len() });
            }
            points.slice_mut(ndarray::s![i * n_points..(i + 1) * n_points, ..]).assign(s.cloud.points());
            for (k, view) in s.views.iter().enumerate() {
                views.row_mut(i * num_views + k).assign(&cache.image(self.image, view)?);
                angles.push(view.angle_index);
                depths.push(view.mean_depth());
            }
            let prompt = fill_template(self.template, &s.sub)?;
            text.row_mut(i).assign(&cache.text(self.text, &prompt)?);
            let code = self.tree.parent_code(&s.parent).ok_or_else(|| Error::UnknownKey(s.parent.clone()))?;
            parent_codes.push(code);
        }
        Ok(Batch { points, n_points, views, num_views, angles, depths, text, parent_codes })
    }
}
