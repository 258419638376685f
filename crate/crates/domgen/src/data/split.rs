use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use super::corpus::{DomainDataset, LabeledImage};
use super::kmeans::kmeans;
use super::mix_seed;
use crate::error::{Result, RunError};

/// How to carve a pooled sample collection into training domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitStrategy {
    /// Group by the provided per-sample annotation tags.
    Annotation,
    /// k-means on `feature_fn` outputs, one domain per cluster.
    Cluster,
    /// Uniformly random assignment into k groups.
    Random,
}

/// Splits a pooled collection into `k` training domains under the chosen
/// strategy, then applies the standard per-domain validation split.
///
/// `annotations` supplies one tag per sample and is required (and only
/// consulted) by `Annotation`; with tags equal to original domain ids the
/// annotation split reconstructs those domains exactly. `feature_fn` is
/// only invoked by `Cluster`.
pub fn split_domains(
    pool: &[LabeledImage],
    annotations: Option<&[String]>,
    strategy: SplitStrategy,
    k: usize,
    feature_fn: impl Fn(&LabeledImage) -> Vec<f64>,
    seed: u64,
    val_fraction: f64,
    n_classes: usize,
) -> Result<Vec<DomainDataset>> {
    if pool.is_empty() {
        return Err(RunError::data("cannot split an empty pool"));
    }
    if k == 0 || k > pool.len() {
        return Err(RunError::data(format!(
            "cannot split {} sample(s) into {} domain(s)",
            pool.len(),
            k
        )));
    }
    let groups: Vec<(String, Vec<LabeledImage>)> = match strategy {
        SplitStrategy::Annotation => {
            let tags = annotations.ok_or_else(|| {
                RunError::data("annotation split requires per-sample domain tags")
            })?;
            if tags.len() != pool.len() {
                return Err(RunError::data(format!(
                    "{} annotation tag(s) for {} sample(s)",
                    tags.len(),
                    pool.len()
                )));
            }
            let mut by_tag: BTreeMap<&str, Vec<LabeledImage>> = BTreeMap::new();
            for (s, tag) in pool.iter().zip(tags) {
                by_tag.entry(tag.as_str()).or_default().push(s.clone());
            }
            if by_tag.len() != k {
                return Err(RunError::data(format!(
                    "annotation tags form {} group(s), expected k = {}",
                    by_tag.len(),
                    k
                )));
            }
            by_tag.into_iter().map(|(tag, v)| (tag.to_string(), v)).collect()
        }
        SplitStrategy::Cluster => {
            let feats: Vec<Vec<f64>> = pool.iter().map(&feature_fn).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "cluster-split"));
            let fit = kmeans(&feats, k, &mut rng, 100)?;
            let mut groups: Vec<Vec<LabeledImage>> = vec![Vec::new(); k];
            for (s, &c) in pool.iter().zip(&fit.assignments) {
                groups[c].push(s.clone());
            }
            groups
                .into_iter()
                .enumerate()
                .map(|(i, v)| (format!("cluster{}", i), v))
                .collect()
        }
        SplitStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "random-split"));
            let mut groups: Vec<Vec<LabeledImage>> = vec![Vec::new(); k];
            for s in pool {
                groups[rng.gen_range(0..k)].push(s.clone());
            }
            groups
                .into_iter()
                .enumerate()
                .map(|(i, v)| (format!("random{}", i), v))
                .collect()
        }
    };

    if let Some((id, _)) = groups.iter().find(|(_, v)| v.is_empty()) {
        return Err(RunError::data(format!("split produced empty domain {}", id)));
    }
    groups
        .into_iter()
        .map(|(id, samples)| DomainDataset::new(id, samples, val_fraction, n_classes))
        .collect()
}
