//! Command implementations behind the binary: each subcommand is an
//! ordinary function from a validated [`RunConfig`] to files on disk, so
//! every behavior is testable without spawning a process. The binary
//! itself only parses arguments and dispatches here.

use serde::Serialize;
use std::fs;
use std::path::{Path, PathBuf};

use crate::baselines::BaselineKind;
use crate::checkpoint::{checkpoint_erm, checkpoint_generative};
use crate::config::RunConfig;
use crate::baselines::train_erm;
use crate::data::{
    build_rotation_domains, generate_glyph_corpus, load_idx, mix_seed, split_domains,
    write_idx_images, write_idx_labels, DomainDataset, LabeledImage, MultiDomainCorpus,
    SplitStrategy,
};
use crate::error::{Result, RunError};
use crate::eval::{export_scatter_svg, project_2d, EvalMode, InferenceContext, MetricsReport};
use crate::experiments::{
    build_tagged_pool, run_erm_benchmark, run_leave_one_out, run_rotation_benchmark,
    run_split_study, run_tent_comparison, SplitStudyPlan, TentComparisonPlan,
};
use crate::trainer::{history_to_csv, train, MethodSpec, TrainConfig};

// ── Shared plumbing ─────────────────────────────────────────────────────

/// Maps the config's method string onto the episodic trainer's toggles;
/// `None` selects the plain supervised baseline. Unknown names are caught
/// earlier by config validation.
pub fn method_spec_for(method: &str) -> Option<MethodSpec> {
    match method {
        "full" => Some(MethodSpec::full()),
        "invariant" => BaselineKind::InvariantAmortized.method_spec(),
        "no-hierarchy" => BaselineKind::NoHierarchy.method_spec(),
        "no-prior-supervision" => BaselineKind::NoPriorSupervision.method_spec(),
        "non-meta" => BaselineKind::NonMeta.method_spec(),
        _ => None,
    }
}

/// Loads or synthesizes the un-rotated base corpus selected by the data
/// block. A missing IDX path is a data error, not an I/O error: the input
/// contract is broken, nothing was read.
pub fn base_images(cfg: &RunConfig) -> Result<Vec<LabeledImage>> {
    match cfg.data.source.as_str() {
        "glyphs" => Ok(generate_glyph_corpus(cfg.data.n_per_class, cfg.data.seed)),
        "idx" => {
            let images = cfg.data.idx_images.as_deref().expect("validated");
            let labels = cfg.data.idx_labels.as_deref().expect("validated");
            for p in [images, labels] {
                if !Path::new(p).is_file() {
                    return Err(RunError::data(format!("IDX file not found: {}", p)));
                }
            }
            let img = fs::File::open(images)?;
            let lab = fs::File::open(labels)?;
            load_idx(img, lab)
        }
        other => Err(RunError::config("data.source", format!("unknown source `{}`", other))),
    }
}

/// Builds the full rotation corpus, applying the configured pseudo-domain
/// split to the pooled source data when one is requested.
pub fn build_corpus(cfg: &RunConfig) -> Result<MultiDomainCorpus> {
    let base = base_images(cfg)?;
    let corpus = build_rotation_domains(
        &base,
        &cfg.data.source_angles,
        &cfg.data.target_angles,
        cfg.data.val_fraction,
    )?;
    let strategy = match cfg.split.strategy.as_str() {
        "none" => return Ok(corpus),
        "annotation" => SplitStrategy::Annotation,
        "cluster" => SplitStrategy::Cluster,
        "random" => SplitStrategy::Random,
        other => {
            return Err(RunError::config("split.strategy", format!("unknown strategy `{}`", other)))
        }
    };
    let (pool, tags) = build_tagged_pool(&base, &cfg.data.source_angles);
    let sources = split_domains(
        &pool,
        Some(&tags),
        strategy,
        cfg.split.effective_k(&cfg.data),
        |s| s.pixels.iter().map(|&p| f64::from(p)).collect(),
        cfg.data.seed,
        cfg.data.val_fraction,
        corpus.n_classes,
    )?;
    Ok(MultiDomainCorpus { sources, targets: corpus.targets, n_classes: corpus.n_classes })
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.output.dir);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Writes a metrics report as CSV and JSON, both carrying the config hash
/// (a leading `#` comment line in the CSV, a top-level field in the JSON).
fn write_report(
    report: &MetricsReport,
    dir: &Path,
    stem: &str,
    hash: &str,
) -> Result<Vec<PathBuf>> {
    let csv_path = dir.join(format!("{stem}.csv"));
    let csv = format!("# config_hash={hash}\n{}", report.to_csv());
    fs::write(&csv_path, csv)?;

    let json_path = dir.join(format!("{stem}.json"));
    let mut doc: serde_json::Value =
        serde_json::from_str(&report.to_json()).expect("report JSON is valid");
    doc.as_object_mut()
        .expect("report JSON is an object")
        .insert("config_hash".into(), serde_json::Value::String(hash.to_string()));
    fs::write(&json_path, serde_json::to_string_pretty(&doc).expect("serializable"))?;
    Ok(vec![csv_path, json_path])
}

// ── gen-data ────────────────────────────────────────────────────────────

#[derive(Serialize)]
struct DomainEntry {
    id: String,
    role: &'static str,
    train: usize,
    val: usize,
}

#[derive(Serialize)]
struct Manifest {
    config_hash: String,
    source: String,
    data_seed: u64,
    n_classes: usize,
    source_angles: Vec<f64>,
    target_angles: Vec<f64>,
    files: Vec<String>,
    domains: Vec<DomainEntry>,
}

/// Materializes the corpus: for the synthetic source, writes the base
/// images and labels in the classic IDX binary layout; for an external
/// IDX pair, verifies the files load. Always writes `manifest.json` with
/// per-domain counts. Deterministic: same config, same bytes.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = ensure_out_dir(cfg)?;
    let base = base_images(cfg)?;
    let corpus = build_corpus(cfg)?;

    let mut written = Vec::new();
    let mut files = Vec::new();
    if cfg.data.source == "glyphs" {
        let side = (base[0].pixels.len() as f64).sqrt() as usize;
        let img_path = dir.join("base-images.idx");
        let lab_path = dir.join("base-labels.idx");
        let pixel_rows: Vec<Vec<f32>> = base.iter().map(|s| s.pixels.clone()).collect();
        let labels: Vec<u8> = base.iter().map(|s| s.label as u8).collect();
        write_idx_images(fs::File::create(&img_path)?, &pixel_rows, side, side)?;
        write_idx_labels(fs::File::create(&lab_path)?, &labels)?;
        files.push("base-images.idx".to_string());
        files.push("base-labels.idx".to_string());
        written.push(img_path);
        written.push(lab_path);
    }

    let entry = |dom: &DomainDataset, role: &'static str| DomainEntry {
        id: dom.id.clone(),
        role,
        train: dom.train.len(),
        val: dom.val.len(),
    };
    let manifest = Manifest {
        config_hash: cfg.hash(),
        source: cfg.data.source.clone(),
        data_seed: cfg.data.seed,
        n_classes: corpus.n_classes,
        source_angles: cfg.data.source_angles.clone(),
        target_angles: cfg.data.target_angles.clone(),
        files,
        domains: corpus
            .sources
            .iter()
            .map(|d| entry(d, "source"))
            .chain(corpus.targets.iter().map(|d| entry(d, "target")))
            .collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).expect("serializable"))?;
    written.push(path);
    Ok(written)
}

// ── train ───────────────────────────────────────────────────────────────

/// Files produced by one training run plus its selection score.
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub config: PathBuf,
    pub best_val_accuracy: f64,
}

/// Trains the configured method once (at `train.seed`) and writes the
/// checkpoint, the per-iteration history CSV, and the resolved config
/// document. Every file carries the config hash.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts> {
    let dir = ensure_out_dir(cfg)?;
    let corpus = build_corpus(cfg)?;
    let hash = cfg.hash();

    let (ckpt, history, best_val) = match method_spec_for(&cfg.experiment.method) {
        Some(spec) => {
            let outcome = train::<f32>(&corpus, &spec, &cfg.train, &cfg.model.widths)?;
            (
                checkpoint_generative(&outcome.best, &hash),
                outcome.history,
                outcome.best_val_accuracy,
            )
        }
        None => {
            let outcome = train_erm::<f32>(&corpus, &cfg.train, &cfg.model.widths)?;
            (checkpoint_erm(&outcome.best, &hash), outcome.history, outcome.best_val_accuracy)
        }
    };

    let checkpoint = dir.join("checkpoint.bin");
    ckpt.write(&checkpoint)?;

    let history_path = dir.join("history.csv");
    fs::write(&history_path, format!("# config_hash={hash}\n{}", history_to_csv(&history)))?;

    let config_path = dir.join("config.json");
    let doc = format!(
        "{{\n  \"config_hash\": \"{hash}\",\n  \"config\": {}\n}}\n",
        cfg.canonical_json()
    );
    fs::write(&config_path, doc)?;

    Ok(TrainArtifacts {
        checkpoint,
        history: history_path,
        config: config_path,
        best_val_accuracy: best_val,
    })
}

// ── eval ────────────────────────────────────────────────────────────────

/// Runs the protocol selected by `experiment.kind` for the configured
/// method over all experiment seeds and writes `metrics.{csv,json}`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = ensure_out_dir(cfg)?;
    let method = cfg.experiment.method.as_str();
    let spec = method_spec_for(method);
    let report = match cfg.experiment.kind.as_str() {
        "rotation" => {
            let corpus = build_corpus(cfg)?;
            match spec {
                Some(spec) => run_rotation_benchmark::<f32>(
                    &corpus,
                    spec,
                    method,
                    &cfg.train,
                    &cfg.model.widths,
                    &cfg.experiment.seeds,
                )?,
                None => run_erm_benchmark::<f32>(
                    &corpus,
                    method,
                    &cfg.train,
                    &cfg.model.widths,
                    &cfg.experiment.seeds,
                )?,
            }
        }
        "leave-one-out" => {
            let base = base_images(cfg)?;
            run_leave_one_out::<f32>(
                &base,
                &cfg.data.source_angles,
                cfg.data.val_fraction,
                spec,
                method,
                &cfg.train,
                &cfg.model.widths,
                &cfg.experiment.seeds,
            )?
        }
        other => {
            return Err(RunError::config(
                "experiment.kind",
                format!("unknown experiment kind `{}`", other),
            ))
        }
    };
    write_report(&report, &dir, "metrics", &cfg.hash())
}

// ── ablate ──────────────────────────────────────────────────────────────

/// Objective-component ablation plus the meta-training comparison on
/// shared seeds and data. The meta-trained entry is the full method by
/// definition, so its rows are duplicated under the method name `meta`
/// rather than re-trained (training is deterministic per seed; a second
/// run would reproduce them bitwise). Also runs the split-strategy study
/// when a multi-angle source list is configured. Writes
/// `ablation.{csv,json}`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = ensure_out_dir(cfg)?;
    let corpus = build_corpus(cfg)?;
    let seeds = &cfg.experiment.seeds;

    let mut report = MetricsReport::new();
    let variants: [(&str, MethodSpec); 5] = [
        ("full", MethodSpec::full()),
        ("no-hierarchy", method_spec_for("no-hierarchy").expect("amortized")),
        ("no-prior-supervision", method_spec_for("no-prior-supervision").expect("amortized")),
        ("invariant", method_spec_for("invariant").expect("amortized")),
        ("non-meta", method_spec_for("non-meta").expect("amortized")),
    ];
    for (name, spec) in variants {
        let part = run_rotation_benchmark::<f32>(
            &corpus,
            spec,
            name,
            &cfg.train,
            &cfg.model.widths,
            seeds,
        )?;
        if name == "full" {
            for row in &part.rows {
                report.push(&row.experiment, "meta", &row.target_domain, row.seed, row.accuracy);
            }
        }
        report.extend(part);
    }
    write_report(&report, &dir, "ablation", &cfg.hash())
}

/// The domain-split study as its own artifact: identical pooled source
/// data cut by annotation, clustering, and chance. Writes
/// `split-study.{csv,json}`.
pub fn cmd_split_study(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = ensure_out_dir(cfg)?;
    let base = base_images(cfg)?;
    let plan = SplitStudyPlan {
        base: &base,
        source_angles: &cfg.data.source_angles,
        target_angles: &cfg.data.target_angles,
        val_fraction: cfg.data.val_fraction,
        train: cfg.train.clone(),
        widths: cfg.model.widths.clone(),
        seeds: cfg.experiment.seeds.clone(),
    };
    let report = run_split_study::<f32>(&plan)?;
    write_report(&report, &dir, "split-study", &cfg.hash())
}

// ── tent-compare ────────────────────────────────────────────────────────

/// The adaptation comparison grid from the baseline block, on the
/// configured corpus and seeds. Writes `tent.{csv,json}`.
pub fn cmd_tent_compare(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = ensure_out_dir(cfg)?;
    let corpus = build_corpus(cfg)?;
    let plan = TentComparisonPlan {
        train: cfg.train.clone(),
        widths: cfg.model.widths.clone(),
        seeds: cfg.experiment.seeds.clone(),
        batch_sizes: cfg.baseline.tent.batch_sizes.clone(),
        step_counts: cfg.baseline.tent.step_counts.clone(),
        lr: cfg.baseline.tent.lr,
        shuffle_seed: cfg.baseline.tent.shuffle_seed,
    };
    let report = run_tent_comparison::<f32>(&corpus, &plan)?;
    write_report(&report, &dir, "tent", &cfg.hash())
}

// ── visualize ───────────────────────────────────────────────────────────

/// Caps how many target features anchor each projection; enough to show
/// the class structure, small enough to keep the figure readable.
const SCATTER_FEATURE_CAP: usize = 200;

/// Trains the full method once, embeds a pool of target samples, and maps
/// features and classifier rows into a shared plane: one SVG for the
/// sample-independent source classifier (the "before adaptation"
/// reference) and one SVG per requested sample showing the classifier
/// adapted to it. Writes `scatter-baseline.svg` and
/// `scatter-sample-{i}.svg`.
pub fn cmd_visualize(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = ensure_out_dir(cfg)?;
    let corpus = build_corpus(cfg)?;
    let hash = cfg.hash();
    let seed = cfg.experiment.seeds.first().copied().unwrap_or(cfg.train.seed);
    let train_cfg = TrainConfig { seed, ..cfg.train.clone() };

    let spec = MethodSpec::full();
    let outcome = train::<f32>(&corpus, &spec, &train_cfg, &cfg.model.widths)?;
    let ctx = InferenceContext::new(
        &outcome.best,
        &corpus,
        spec,
        EvalMode::Deterministic,
        train_cfg.support_per_class,
        mix_seed(seed, "eval-support"),
    )?;

    // Round-robin across target domains so every domain contributes both
    // to the anchor pool and to the adapted-classifier examples.
    let pool: Vec<&LabeledImage> = round_robin(&corpus.targets, SCATTER_FEATURE_CAP);
    if pool.is_empty() {
        return Err(RunError::data("no target samples to visualize"));
    }
    let features: Vec<Vec<f64>> =
        pool.iter().map(|s| ctx.features_of(&s.pixels)).collect::<Result<_>>()?;
    let labels: Vec<usize> = pool.iter().map(|s| s.label).collect();

    let mut written = Vec::new();
    let baseline = project_2d(&features, &ctx.conditioning_rows())?;
    let path = dir.join("scatter-baseline.svg");
    export_scatter_svg(&baseline, &labels, &path, &hash)?;
    written.push(path);

    for (i, sample) in pool.iter().take(cfg.output.scatter_samples).enumerate() {
        let rows = ctx.adapted_classifier_rows(&sample.pixels)?;
        let projection = project_2d(&features, &rows)?;
        let path = dir.join(format!("scatter-sample-{i}.svg"));
        export_scatter_svg(&projection, &labels, &path, &hash)?;
        written.push(path);
    }
    Ok(written)
}

fn round_robin(domains: &[DomainDataset], cap: usize) -> Vec<&LabeledImage> {
    let mut picked = Vec::new();
    let mut i = 0;
    loop {
        let mut any = false;
        for dom in domains {
            if let Some(s) = dom.train.get(i) {
                picked.push(s);
                any = true;
                if picked.len() == cap {
                    return picked;
                }
            }
        }
        if !any {
            return picked;
        }
        i += 1;
    }
}
