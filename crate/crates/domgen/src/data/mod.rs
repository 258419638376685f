//! Synthetic corpus generation, on-disk formats, domain bookkeeping and
//! episode sampling.

mod corpus;
mod episode;
mod glyphs;
mod idx;
mod kmeans;
mod rotate;
mod split;

pub use corpus::{
    build_rotation_domains, fmt_angle, DomainDataset, LabeledImage, MultiDomainCorpus,
    IMG_PIXELS, IMG_SIDE,
};
pub use episode::{sample_episode, sample_pooled_batch, DomainSupport, Episode, PooledBatch};
pub use glyphs::{generate_glyph_corpus, render_glyph, NUM_GLYPH_CLASSES};
pub use idx::{
    load_idx, load_idx_images, load_idx_labels, write_idx_images, write_idx_labels,
    IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC,
};
pub use kmeans::{kmeans, KmeansFit};
pub use rotate::rotate_image;
pub use split::{split_domains, SplitStrategy};

/// Stable 64-bit hash used wherever a string (domain id) has to seed an
/// RNG reproducibly across runs and platforms.
pub(crate) fn fnv1a64(s: &str) -> u64 {
    fnv1a64_bytes(s.as_bytes())
}

pub(crate) fn fnv1a64_bytes(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derives an independent stream seed from a base seed and a stream label,
/// so corpus noise, episode sampling and evaluation draws never share an
/// RNG sequence.
pub(crate) fn mix_seed(base: u64, label: &str) -> u64 {
    base ^ fnv1a64(label).rotate_left(17)
}
