//! Corpus loading, train/held-out partition and frozen encoder construction.

use std::collections::BTreeMap;
use std::path::Path;

use crate::encoders::FrozenEncoder;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::smo::{
    generate_synthetic_corpus, read_manifest, read_points, render_candidate_views, CandidateViewSet, CategoryTree,
    CorpusEntry,
};
use crate::zeroshot::EvalSplit;
use crate::Scalar;

/// Every sample of a run with its rendered candidates and role.
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub tree: CategoryTree,
    pub entries: Vec<CorpusEntry<T>>,
    pub candidates: Vec<CandidateViewSet<T>>,
    /// Indices into `entries`.
    pub train: Vec<usize>,
    /// Held-out samples of trained subcategories.
    pub heldout: Vec<usize>,
    /// All samples of never-trained subcategories.
    pub unseen: Vec<usize>,
}

impl<T: Scalar> Dataset<T> {
    /// Held-out and unseen samples, the zero-shot evaluation pool.
    pub fn eval_indices(&self) -> Vec<usize> {
        let mut v = self.heldout.clone();
        v.extend(&self.unseen);
        v.sort_unstable();
        v
    }

    /// Subcategories with at least one training sample, in code order.
    pub fn trained_subs(&self) -> Vec<String> {
        let mut subs: Vec<String> = self.train.iter().map(|&i| self.entries[i].sub.clone()).collect();
        subs.sort_by_key(|s| self.tree.sub_code(s));
        subs.dedup();
        subs
    }
}

fn load_entries<T: Scalar>(cfg: &RunConfig) -> Result<Vec<CorpusEntry<T>>> {
    let Some(path) = &cfg.data.manifest else {
        return generate_synthetic_corpus(&cfg.data.corpus_spec());
    };
    let base = path.parent().unwrap_or(Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|r| {
            let cloud = read_points(&base.join(&r.points_path), r.id.clone())?.normalized();
            Ok(CorpusEntry { cloud, parent: r.parent, sub: r.sub })
        })
        .collect()
}

/// Category tree of the configured corpus without rendering any views.
pub fn build_tree(cfg: &RunConfig) -> Result<CategoryTree> {
    let entries = load_entries::<f32>(cfg)?;
    CategoryTree::build(entries.iter().map(|e| (e.parent.clone(), Some(e.sub.clone()))))
}

/// Load or generate the corpus, render candidate views and assign roles.
///
/// Within each trained subcategory the last `heldout_per_sub` samples are held out.
pub fn prepare_dataset<T: Scalar>(cfg: &RunConfig) -> Result<Dataset<T>> {
    let entries = load_entries::<T>(cfg)?;
    if entries.is_empty() {
        return Err(Error::InvalidArgument("corpus is empty".into()));
    }
    let tree = CategoryTree::build(entries.iter().map(|e| (e.parent.clone(), Some(e.sub.clone()))))?;
    for u in &cfg.data.unseen {
        if tree.sub_code(u).is_none() {
            return Err(Error::Config(vec![format!("data.unseen: {u:?} is not a subcategory of the corpus")]));
        }
    }
    let size = cfg.data.image_size;
    let candidates = entries
        .iter()
        .map(|e| render_candidate_views(&e.cloud, size, size))
        .collect::<Result<Vec<_>>>()?;
    let mut by_sub: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        by_sub.entry(tree.sub_code(&e.sub).expect("tree built from entries")).or_default().push(i);
    }
    let (mut train, mut heldout, mut unseen) = (Vec::new(), Vec::new(), Vec::new());
    for idx in by_sub.values() {
        if cfg.data.unseen.contains(&entries[idx[0]].sub) {
            unseen.extend(idx);
            continue;
        }
        let keep = idx.len().saturating_sub(cfg.data.heldout_per_sub);
        if keep == 0 {
            return Err(Error::Config(vec![format!(
                "data.heldout_per_sub: leaves no training samples for {:?}",
                entries[idx[0]].sub
            )]));
        }
        train.extend(&idx[..keep]);
        heldout.extend(&idx[keep..]);
    }
    train.sort_unstable();
    heldout.sort_unstable();
    unseen.sort_unstable();
    Ok(Dataset { tree, entries, candidates, train, heldout, unseen })
}

/// Frozen image and text encoders of a run.
#[derive(Debug, Clone)]
pub struct FrozenPair {
    pub image: FrozenEncoder,
    pub text: FrozenEncoder,
}

pub fn frozen_encoders(cfg: &RunConfig) -> Result<FrozenPair> {
    let e = &cfg.encoders;
    let dim = cfg.model.dim;
    let image = match &e.image_table {
        Some(p) => FrozenEncoder::load_table(p)?,
        None => FrozenEncoder::stub_image(dim, e.image_seed, e.image_grid),
    };
    let text = match &e.text_table {
        Some(p) => FrozenEncoder::load_table(p)?,
        None => FrozenEncoder::stub_text(dim, e.text_seed),
    };
    for enc in [&image, &text] {
        if enc.dim() != dim {
            return Err(Error::Config(vec![format!("model.dim: {dim} but a frozen table has dimension {}", enc.dim())]));
        }
    }
    Ok(FrozenPair { image, text })
}

/// Synthetic evaluation splits.
///
/// All excludes nothing. Medium excludes the trained subcategories of the
/// first half of the parents; Hard excludes every trained subcategory, which
/// leaves only the never-trained ones.
pub fn default_splits<T: Scalar>(data: &Dataset<T>) -> Vec<EvalSplit> {
    let trained = data.trained_subs();
    let half: Vec<&String> = data.tree.parents().iter().take(data.tree.num_parents().div_ceil(2)).collect();
    let medium = trained
        .iter()
        .filter(|s| data.tree.parent_of(s).is_some_and(|p| half.iter().any(|h| *h == p)))
        .cloned()
        .collect();
    vec![
        EvalSplit::all(),
        EvalSplit { name: "Medium".into(), excluded: medium },
        EvalSplit { name: "Hard".into(), excluded: trained },
    ]
}
