use rand::seq::index::sample as index_sample;
use rand::Rng;

use super::corpus::MultiDomainCorpus;
use crate::error::{Result, RunError};

/// Per-domain support set: `per_class[c]` holds train-split indices into that
/// domain's samples, one list per class.
#[derive(Clone, Debug)]
pub struct DomainSupport {
    /// Index into `corpus.sources`.
    pub domain: usize,
    pub per_class: Vec<Vec<usize>>,
}

/// One training episode: a held-out meta-target domain, labeled support sets
/// from the remaining source domains, and a query batch drawn from the
/// meta-target's train split (disjoint from its own support indices).
#[derive(Clone, Debug)]
pub struct Episode {
    /// Index into `corpus.sources` of the domain playing test-domain for
    /// this episode.
    pub meta_target: usize,
    /// Support sets for every source domain, the meta-target included (its
    /// entry feeds the prior path; the others feed the posterior path).
    pub support: Vec<DomainSupport>,
    /// Train-split indices into the meta-target domain for the query batch.
    pub query: Vec<usize>,
}

/// Non-episodic batch: support sets for every source domain plus a query
/// batch pooled over all source domains (each query sample plays the
/// target role for its own posterior during non-meta training).
#[derive(Clone, Debug)]
pub struct PooledBatch {
    pub support: Vec<DomainSupport>,
    /// (source-domain index, train-split index) pairs.
    pub query: Vec<(usize, usize)>,
}

/// Draws an episode: meta-target uniform over sources, `support_per_class`
/// examples per class per domain without replacement, and a `batch`-sized
/// query from the meta-target train split excluding its support samples.
pub fn sample_episode(
    corpus: &MultiDomainCorpus,
    rng: &mut impl Rng,
    support_per_class: usize,
    batch: usize,
) -> Result<Episode> {
    if corpus.sources.is_empty() {
        return Err(RunError::data("episode sampling needs at least one source domain"));
    }
    let meta_target = rng.gen_range(0..corpus.sources.len());

    let mut support = Vec::with_capacity(corpus.sources.len());
    for (d, domain) in corpus.sources.iter().enumerate() {
        let mut per_class = Vec::with_capacity(corpus.n_classes);
        for c in 0..corpus.n_classes {
            let idx = &domain.train_by_class()[c];
            if idx.len() < support_per_class {
                return Err(RunError::data(format!(
                    "domain {} class {} has {} train sample(s), need {} for support",
                    domain.id,
                    c,
                    idx.len(),
                    support_per_class
                )));
            }
            let picks = index_sample(rng, idx.len(), support_per_class)
                .into_iter()
                .map(|i| idx[i])
                .collect();
            per_class.push(picks);
        }
        support.push(DomainSupport { domain: d, per_class });
    }

    let target = &corpus.sources[meta_target];
    let taken: std::collections::HashSet<usize> =
        support[meta_target].per_class.iter().flatten().copied().collect();
    let free: Vec<usize> = (0..target.train.len()).filter(|i| !taken.contains(i)).collect();
    if free.len() < batch {
        return Err(RunError::data(format!(
            "domain {} has {} train sample(s) left after support, need {} for the query batch",
            target.id,
            free.len(),
            batch
        )));
    }
    let query = index_sample(rng, free.len(), batch).into_iter().map(|i| free[i]).collect();

    Ok(Episode { meta_target, support, query })
}

/// Draws a pooled batch for non-episodic training: per-domain per-class
/// support exactly as in `sample_episode`, and a query batch drawn without
/// replacement from the union of all source train splits, excluding each
/// domain's own support samples.
pub fn sample_pooled_batch(
    corpus: &MultiDomainCorpus,
    rng: &mut impl Rng,
    support_per_class: usize,
    batch: usize,
) -> Result<PooledBatch> {
    // Reuse the episodic sampler for the support draw; its meta-target
    // choice is discarded, rng consumption stays deterministic.
    let ep = sample_episode(corpus, rng, support_per_class, 0)?;
    let support = ep.support;

    let mut free: Vec<(usize, usize)> = Vec::new();
    for (d, domain) in corpus.sources.iter().enumerate() {
        let taken: std::collections::HashSet<usize> =
            support[d].per_class.iter().flatten().copied().collect();
        free.extend((0..domain.train.len()).filter(|i| !taken.contains(i)).map(|i| (d, i)));
    }
    if free.len() < batch {
        return Err(RunError::data(format!(
            "{} pooled train sample(s) left after support, need {} for the query batch",
            free.len(),
            batch
        )));
    }
    let query = index_sample(rng, free.len(), batch).into_iter().map(|i| free[i]).collect();
    Ok(PooledBatch { support, query })
}
