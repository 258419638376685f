use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fnv1a64, rotate::rotate_image};
use crate::error::{Result, RunError};

pub const IMG_SIDE: usize = 28;
pub const IMG_PIXELS: usize = IMG_SIDE * IMG_SIDE;

/// One 28×28 grayscale image (row-major, intensities in [0, 1]) with its
/// class label.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub pixels: Vec<f32>,
    pub label: usize,
}

/// Samples from one domain, split once into train and held-out validation.
/// The split is a fixed seeded partition derived from the domain id, so
/// rebuilding the same domain always yields the same split.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub id: String,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    by_class: Vec<Vec<usize>>,
}

impl DomainDataset {
    pub fn new(
        id: impl Into<String>,
        samples: Vec<LabeledImage>,
        val_fraction: f64,
        n_classes: usize,
    ) -> Result<Self> {
        let id = id.into();
        if samples.is_empty() {
            return Err(RunError::data(format!("domain {}: no samples", id)));
        }
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(RunError::data(format!(
                "domain {}: val_fraction {} outside [0, 1)",
                id, val_fraction
            )));
        }
        if let Some(bad) = samples.iter().find(|s| s.label >= n_classes) {
            return Err(RunError::data(format!(
                "domain {}: label {} exceeds class count {}",
                id, bad.label, n_classes
            )));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a64(&id) ^ 0x56414c53504c4954);
        order.shuffle(&mut rng);
        let n_val = (samples.len() as f64 * val_fraction).floor() as usize;
        let val_idx: std::collections::BTreeSet<usize> =
            order[..n_val].iter().copied().collect();

        let mut train = Vec::with_capacity(samples.len() - n_val);
        let mut val = Vec::with_capacity(n_val);
        for (i, s) in samples.into_iter().enumerate() {
            if val_idx.contains(&i) {
                val.push(s);
            } else {
                train.push(s);
            }
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, s) in train.iter().enumerate() {
            by_class[s.label].push(i);
        }
        Ok(DomainDataset { id, train, val, by_class })
    }

    /// Train-set indices per class label.
    pub fn train_by_class(&self) -> &[Vec<usize>] {
        &self.by_class
    }

    /// All samples, train first then validation.
    pub fn iter_all(&self) -> impl Iterator<Item = &LabeledImage> {
        self.train.iter().chain(self.val.iter())
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Source domains used for training plus target domains held out for
/// out-of-distribution evaluation.
#[derive(Clone, Debug)]
pub struct MultiDomainCorpus {
    pub sources: Vec<DomainDataset>,
    pub targets: Vec<DomainDataset>,
    pub n_classes: usize,
}

/// Compact angle formatting for domain ids: "15", "7.5".
pub fn fmt_angle(angle: f64) -> String {
    if (angle - angle.round()).abs() < 1e-9 {
        format!("{}", angle.round() as i64)
    } else {
        format!("{}", angle)
    }
}

/// Rotates a base corpus by each source and target angle, producing one
/// domain per angle. Source domains get a `val_fraction` validation split;
/// target domains stay whole (they are never trained or tuned on).
pub fn build_rotation_domains(
    base: &[LabeledImage],
    source_angles: &[f64],
    target_angles: &[f64],
    val_fraction: f64,
) -> Result<MultiDomainCorpus> {
    if base.is_empty() {
        return Err(RunError::data("empty base corpus"));
    }
    if source_angles.is_empty() || target_angles.is_empty() {
        return Err(RunError::data("need at least one source and one target angle"));
    }
    for &s in source_angles {
        if target_angles.iter().any(|&t| (s - t).abs() < 1e-9) {
            return Err(RunError::config(
                "data.source_angles",
                format!("angle {} appears in both source and target lists", fmt_angle(s)),
            ));
        }
    }
    let n_classes = base.iter().map(|s| s.label).max().unwrap() + 1;

    let rotate_all = |angle: f64| -> Vec<LabeledImage> {
        base.iter()
            .map(|s| LabeledImage {
                pixels: rotate_image(&s.pixels, angle),
                label: s.label,
            })
            .collect()
    };

    let mut sources = Vec::with_capacity(source_angles.len());
    for &a in source_angles {
        sources.push(DomainDataset::new(
            format!("rot{}", fmt_angle(a)),
            rotate_all(a),
            val_fraction,
            n_classes,
        )?);
    }
    let mut targets = Vec::with_capacity(target_angles.len());
    for &a in target_angles {
        targets.push(DomainDataset::new(
            format!("rot{}", fmt_angle(a)),
            rotate_all(a),
            0.0,
            n_classes,
        )?);
    }
    Ok(MultiDomainCorpus { sources, targets, n_classes })
}
