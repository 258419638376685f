//! Experiment protocols: the rotation benchmark (in-distribution vs
//! out-of-distribution accuracy), the split-strategy study on pooled
//! source data, and the entropy-adaptation comparison grid.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use numcore::Scalar;

use crate::baselines::{erm_accuracy, tent_adapt, train_erm, StreamMode, TentConfig};
use crate::data::{
    build_rotation_domains, fmt_angle, mix_seed, rotate_image, split_domains, LabeledImage,
    MultiDomainCorpus, SplitStrategy,
};
use crate::error::{Result, RunError};
use crate::eval::{EvalMode, InferenceContext, MetricsReport};
use crate::trainer::{train, MethodSpec, TrainConfig};

// ── Streams ─────────────────────────────────────────────────────────────

/// One ordered test stream: a label and the sample order as
/// (target index, sample index) pairs. Batching is applied afterwards so
/// every batch size sees the same underlying order.
#[derive(Clone, Debug)]
pub struct Stream {
    pub label: String,
    pub order: Vec<(usize, usize)>,
}

/// Composition of test streams for adaptation experiments.
#[derive(Clone, Copy, Debug)]
pub struct StreamSpec {
    pub mode: StreamMode,
    pub shuffle_seed: u64,
}

/// Builds the stream(s) over the corpus targets: one shuffled stream per
/// target in single-domain mode, one interleaved stream (no domain
/// identifiers) in multi-domain mode.
pub fn build_streams(corpus: &MultiDomainCorpus, spec: StreamSpec) -> Result<Vec<Stream>> {
    if corpus.targets.is_empty() {
        return Err(RunError::data("corpus has no target domains to stream"));
    }
    match spec.mode {
        StreamMode::SingleDomain => corpus
            .targets
            .iter()
            .enumerate()
            .map(|(t, dom)| {
                let mut order: Vec<(usize, usize)> =
                    (0..dom.train.len()).map(|i| (t, i)).collect();
                let mut rng =
                    ChaCha8Rng::seed_from_u64(mix_seed(spec.shuffle_seed, &dom.id));
                order.shuffle(&mut rng);
                Ok(Stream { label: dom.id.clone(), order })
            })
            .collect(),
        StreamMode::MultiDomain => {
            let mut order = Vec::new();
            for (t, dom) in corpus.targets.iter().enumerate() {
                order.extend((0..dom.train.len()).map(|i| (t, i)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.shuffle_seed, "mixed"));
            order.shuffle(&mut rng);
            Ok(vec![Stream { label: "mixed".into(), order }])
        }
    }
}

fn stream_samples<'c>(
    corpus: &'c MultiDomainCorpus,
    stream: &Stream,
) -> Vec<&'c LabeledImage> {
    stream
        .order
        .iter()
        .map(|&(t, i)| &corpus.targets[t].train[i])
        .collect()
}

fn chunk<'a>(samples: &[&'a LabeledImage], batch: usize) -> Vec<Vec<&'a LabeledImage>> {
    samples.chunks(batch.max(1)).map(|c| c.to_vec()).collect()
}

// ── Rotation benchmark ──────────────────────────────────────────────────

/// Trains `spec` under each seed and reports in-distribution accuracy
/// (held-out validation split of every source domain, experiment
/// `rotation-id`) and out-of-distribution accuracy (every target domain,
/// experiment `rotation-ood`).
pub fn run_rotation_benchmark<F: Scalar>(
    corpus: &MultiDomainCorpus,
    spec: MethodSpec,
    method_name: &str,
    base: &TrainConfig,
    widths: &[usize],
    seeds: &[u64],
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let outcome = train::<F>(corpus, &spec, &cfg, widths)?;
        let ctx = InferenceContext::new(
            &outcome.best,
            corpus,
            spec,
            EvalMode::Deterministic,
            cfg.support_per_class,
            mix_seed(seed, "eval-support"),
        )?;
        for dom in &corpus.sources {
            let acc = ctx.accuracy(dom.val.iter())?;
            report.push("rotation-id", method_name, &dom.id, seed, acc);
        }
        for dom in &corpus.targets {
            let acc = ctx.accuracy(dom.train.iter())?;
            report.push("rotation-ood", method_name, &dom.id, seed, acc);
        }
    }
    Ok(report)
}

/// Rotation benchmark for the non-episodic supervised baseline: identical
/// row schema to [`run_rotation_benchmark`] with in-distribution accuracy
/// on the pooled source validation split (reported once per source domain
/// for schema parity) and out-of-distribution accuracy per target.
pub fn run_erm_benchmark<F: Scalar>(
    corpus: &MultiDomainCorpus,
    method_name: &str,
    base: &TrainConfig,
    widths: &[usize],
    seeds: &[u64],
) -> Result<MetricsReport> {
    let mut report = MetricsReport::new();
    for &seed in seeds {
        let cfg = TrainConfig { seed, ..base.clone() };
        let outcome = train_erm::<F>(corpus, &cfg, widths)?;
        for dom in &corpus.sources {
            let acc = erm_accuracy(&outcome.best, dom.val.iter())?;
            report.push("rotation-id", method_name, &dom.id, seed, acc);
        }
        for dom in &corpus.targets {
            let acc = erm_accuracy(&outcome.best, dom.train.iter())?;
            report.push("rotation-ood", method_name, &dom.id, seed, acc);
        }
    }
    Ok(report)
}

// ── Leave-one-out protocol ──────────────────────────────────────────────

/// Holds each source angle out in turn: trains on the remaining angles and
/// evaluates on the held-out one. Rows carry experiment `leave-one-out`
/// and the held-out domain id. `spec` of `None` selects the supervised
/// baseline instead of an episodic variant.
pub fn run_leave_one_out<F: Scalar>(
    base_images: &[LabeledImage],
    angles: &[f64],
    val_fraction: f64,
    spec: Option<MethodSpec>,
    method_name: &str,
    base: &TrainConfig,
    widths: &[usize],
    seeds: &[u64],
) -> Result<MetricsReport> {
    if angles.len() < 2 {
        return Err(RunError::data(
            "leave-one-out needs at least two source angles",
        ));
    }
    let mut report = MetricsReport::new();
    for (hold, &held_angle) in angles.iter().enumerate() {
        let kept: Vec<f64> =
            angles.iter().enumerate().filter(|&(i, _)| i != hold).map(|(_, &a)| a).collect();
        let corpus = build_rotation_domains(base_images, &kept, &[held_angle], val_fraction)?;
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..base.clone() };
            let target = &corpus.targets[0];
            let acc = match spec {
                Some(spec) => {
                    let outcome = train::<F>(&corpus, &spec, &cfg, widths)?;
                    let ctx = InferenceContext::new(
                        &outcome.best,
                        &corpus,
                        spec,
                        EvalMode::Deterministic,
                        cfg.support_per_class,
                        mix_seed(seed, "eval-support"),
                    )?;
                    ctx.accuracy(target.train.iter())?
                }
                None => {
                    let outcome = train_erm::<F>(&corpus, &cfg, widths)?;
                    erm_accuracy(&outcome.best, target.train.iter())?
                }
            };
            report.push("leave-one-out", method_name, &target.id, seed, acc);
        }
    }
    Ok(report)
}

// ── Split-strategy study ────────────────────────────────────────────────

/// Inputs for the split study: the un-rotated base corpus plus the
/// rotation protocol, so the pooled source data can be regenerated with
/// ground-truth tags.
pub struct SplitStudyPlan<'a> {
    pub base: &'a [LabeledImage],
    pub source_angles: &'a [f64],
    pub target_angles: &'a [f64],
    pub val_fraction: f64,
    pub train: TrainConfig,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
}

/// Pooled source data in a fixed order (angle-major, base order within
/// each angle) with ground-truth rotation tags.
pub fn build_tagged_pool(
    base: &[LabeledImage],
    source_angles: &[f64],
) -> (Vec<LabeledImage>, Vec<String>) {
    let mut pool = Vec::with_capacity(base.len() * source_angles.len());
    let mut tags = Vec::with_capacity(pool.capacity());
    for &angle in source_angles {
        let tag = format!("rot{}", fmt_angle(angle));
        for s in base {
            pool.push(LabeledImage {
                pixels: rotate_image(&s.pixels, angle),
                label: s.label,
            });
            tags.push(tag.clone());
        }
    }
    (pool, tags)
}

/// Runs the full method once per (seed, split strategy) on identically
/// pooled source data, differing only in how the pool is cut into
/// training domains; evaluates each run on the same target domains.
/// Methods are reported as `split-annotation`, `split-cluster`,
/// `split-random` under experiment `split-study`.
pub fn run_split_study<F: Scalar>(plan: &SplitStudyPlan<'_>) -> Result<MetricsReport> {
    let reference = build_rotation_domains(
        plan.base,
        plan.source_angles,
        plan.target_angles,
        plan.val_fraction,
    )?;
    let (pool, tags) = build_tagged_pool(plan.base, plan.source_angles);
    let k = plan.source_angles.len();
    let spec = MethodSpec::full();

    let mut report = MetricsReport::new();
    for &seed in &plan.seeds {
        for strategy in [SplitStrategy::Annotation, SplitStrategy::Cluster, SplitStrategy::Random]
        {
            let annotations = match strategy {
                SplitStrategy::Annotation => Some(tags.as_slice()),
                _ => None,
            };
            let sources = split_domains(
                &pool,
                annotations,
                strategy,
                k,
                |s| s.pixels.iter().map(|&p| f64::from(p)).collect(),
                seed,
                plan.val_fraction,
                reference.n_classes,
            )?;
            let corpus = MultiDomainCorpus {
                sources,
                targets: reference.targets.clone(),
                n_classes: reference.n_classes,
            };
            let cfg = TrainConfig { seed, ..plan.train.clone() };
            let outcome = train::<F>(&corpus, &spec, &cfg, &plan.widths)?;
            let ctx = InferenceContext::new(
                &outcome.best,
                &corpus,
                spec,
                EvalMode::Deterministic,
                cfg.support_per_class,
                mix_seed(seed, "eval-support"),
            )?;
            let method = format!("split-{}", strategy_name(strategy));
            for dom in &corpus.targets {
                let acc = ctx.accuracy(dom.train.iter())?;
                report.push("split-study", &method, &dom.id, seed, acc);
            }
        }
    }
    Ok(report)
}

fn strategy_name(s: SplitStrategy) -> &'static str {
    match s {
        SplitStrategy::Annotation => "annotation",
        SplitStrategy::Cluster => "cluster",
        SplitStrategy::Random => "random",
    }
}

// ── Entropy-adaptation comparison ───────────────────────────────────────

/// Grid specification for the adaptation comparison.
pub struct TentComparisonPlan {
    pub train: TrainConfig,
    pub widths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub batch_sizes: Vec<usize>,
    pub step_counts: Vec<usize>,
    pub lr: f64,
    pub shuffle_seed: u64,
}

impl Default for TentComparisonPlan {
    fn default() -> Self {
        TentComparisonPlan {
            train: TrainConfig::default(),
            widths: crate::model::DEFAULT_WIDTHS.to_vec(),
            seeds: vec![0, 1, 2, 3, 4],
            batch_sizes: vec![1, 32, 128],
            step_counts: vec![1, 10, 100],
            lr: 1e-3,
            shuffle_seed: 7,
        }
    }
}

/// Trains the full method and the normalized supervised baseline on the
/// same sources per seed, then evaluates:
/// - the adapter across the batch-size × steps grid on single-domain
///   streams (experiment `tent-single`, one row per target) and on the
///   interleaved multi-domain stream (experiment `tent-multi`, domain
///   `mixed`), method names `tent-b{B}-s{S}`;
/// - the full method per sample on the identical streams (method `ours`).
///
/// Sample order within a stream is fixed per seed before batching, so
/// every grid point adapts over the same sequence.
pub fn run_tent_comparison<F: Scalar>(
    corpus: &MultiDomainCorpus,
    plan: &TentComparisonPlan,
) -> Result<MetricsReport> {
    let spec = MethodSpec::full();
    let mut report = MetricsReport::new();
    for &seed in &plan.seeds {
        let cfg = TrainConfig { seed, ..plan.train.clone() };
        let ours = train::<F>(corpus, &spec, &cfg, &plan.widths)?;
        let ctx = InferenceContext::new(
            &ours.best,
            corpus,
            spec,
            EvalMode::Deterministic,
            cfg.support_per_class,
            mix_seed(seed, "eval-support"),
        )?;
        let erm = train_erm::<F>(corpus, &cfg, &plan.widths)?;

        let shuffle = mix_seed(plan.shuffle_seed, "tent-streams") ^ seed;
        let singles = build_streams(
            corpus,
            StreamSpec { mode: StreamMode::SingleDomain, shuffle_seed: shuffle },
        )?;
        let multi = build_streams(
            corpus,
            StreamSpec { mode: StreamMode::MultiDomain, shuffle_seed: shuffle },
        )?;

        for (experiment, streams) in
            [("tent-single", &singles), ("tent-multi", &multi)]
        {
            for stream in streams.iter() {
                let samples = stream_samples(corpus, stream);
                let acc = ctx.accuracy(samples.iter().copied())?;
                report.push(experiment, "ours", &stream.label, seed, acc);

                for &batch_size in &plan.batch_sizes {
                    for &steps in &plan.step_counts {
                        let tent_cfg = TentConfig {
                            batch_size,
                            steps,
                            lr: plan.lr,
                            stream_mode: match experiment {
                                "tent-single" => StreamMode::SingleDomain,
                                _ => StreamMode::MultiDomain,
                            },
                        };
                        let batches = chunk(&samples, batch_size);
                        let preds = tent_adapt(&erm.best, &batches, &tent_cfg)?;
                        let correct = preds
                            .iter()
                            .zip(&samples)
                            .filter(|(&p, s)| p == s.label)
                            .count();
                        let acc = correct as f64 / samples.len() as f64;
                        let method = format!("tent-b{}-s{}", batch_size, steps);
                        report.push(experiment, &method, &stream.label, seed, acc);
                    }
                }
            }
        }
    }
    Ok(report)
}
