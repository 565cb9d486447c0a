use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Variant};
use super::context::{
    io_err, obtain_model, obtain_models, run_predictor_selection, run_selection, sample_rows, seed_table, stage, write_json, Context,
    InputDigest, ModelRequest, TrainedModel,
};
use super::PipelineError;
use crate::chem_data::{Dataset, TaskKind};
use crate::descriptors::{noise_scale, noisy_descriptor, pearson, SelectionReport};
use crate::latent::{
    cluster_error_profile, dataset_prior_kl, kl_error_correlation_without_farthest, kmeans, pca2, standardize_columns,
    ClusterProfile,
};
use crate::qsar::{kfold_cv, metric_map, CvReport, QsarSpec};
use crate::seeding::{derive_seed, rng_for};
use crate::stats::{mean, sample_std, spearman};
use crate::vae::{descriptor_probe, embed, reconstruction_accuracy, EmbedMode, EmbeddingSet, ProbeResult};

/// Envelope shared by every report: the resolved config, input digests and
/// seeds, then the command's result.
#[derive(Debug, Serialize)]
pub struct Report<'a, T> {
    pub command: &'a str,
    pub config: &'a ExperimentConfig,
    pub inputs: &'a [InputDigest],
    pub seeds: BTreeMap<String, u64>,
    pub result: &'a T,
}

fn write_report<T: Serialize>(ctx: &Context, command: &str, result: &T) -> Result<PathBuf, PipelineError> {
    let report = Report {
        command,
        config: &ctx.cfg,
        inputs: &ctx.inputs,
        seeds: seed_table(ctx),
        result,
    };
    let path = ctx.write_json(&format!("{command}_report.json"), &report)?;
    log::info!("wrote {}", path.display());
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
    pub per_fold: Vec<BTreeMap<String, f64>>,
    /// Metrics of the pooled out-of-fold predictions.
    pub pooled: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        Self {
            mean: mean(values),
            std: if values.len() > 1 { sample_std(values) } else { 0.0 },
            n: values.len(),
        }
    }
}

fn cv_seed(ctx: &Context) -> u64 {
    derive_seed(ctx.cfg.seed, "cv")
}

fn write_oof(path: &Path, smiles: &[String], y: &[f64], rep: &CvReport) -> Result<(), PipelineError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut write = || -> Result<(), csv::Error> {
        w.write_record(["smiles", "y_true", "y_pred", "fold"])?;
        for i in 0..smiles.len() {
            w.write_record([
                smiles[i].clone(),
                format!("{:?}", y[i]),
                format!("{:?}", rep.oof[i]),
                rep.folds[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

/// Cross-validates every configured QSAR model on the embedding's `z`
/// rows. Out-of-fold predictions go to `tables/<tag>_<model>_oof.csv`.
pub fn evaluate_embedding(
    ctx: &Context,
    target: &Dataset,
    es: &EmbeddingSet,
    tag: &str,
) -> Result<(BTreeMap<String, CvSummary>, BTreeMap<String, CvReport>), PipelineError> {
    let all_y = target
        .targets()
        .ok_or_else(|| PipelineError::Config("target dataset has no target column".into()))?;
    let y: Vec<f64> = es.rows.iter().map(|&i| all_y[i]).collect();
    let task = ctx.task();
    let mut summaries = BTreeMap::new();
    let mut reports = BTreeMap::new();
    for entry in &ctx.cfg.qsar {
        let spec: QsarSpec = entry.resolve(task, derive_seed(ctx.cfg.seed, "qsar"));
        let rep = kfold_cv(&es.z, &y, &spec, ctx.cfg.folds, cv_seed(ctx)).map_err(stage("train-qsar"))?;
        let pooled = metric_map(task, &y, &rep.oof).map_err(stage("train-qsar"))?;
        write_oof(
            &ctx.out.join("tables").join(format!("{tag}_{}_oof.csv", entry.label())),
            &es.smiles,
            &y,
            &rep,
        )?;
        summaries.insert(
            entry.label().to_string(),
            CvSummary {
                mean: rep.mean.clone(),
                std: rep.std.clone(),
                per_fold: rep.per_fold.clone(),
                pooled,
            },
        );
        reports.insert(entry.label().to_string(), rep);
    }
    Ok((summaries, reports))
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Plain => "plain",
        Variant::Joint => "joint",
    }
}

// ---- select-descriptors -------------------------------------------------

pub fn cmd_select_descriptors(ctx: &Context) -> Result<SelectionReport, PipelineError> {
    let report = run_selection(ctx)?;
    for (n, r) in report.selected.iter().zip(&report.selected_r) {
        log::info!("selected {n} (r = {r:.3})");
    }
    write_report(ctx, "select-descriptors", &report)?;
    Ok(report)
}

/// The top descriptor among those the source can supply.
fn predictor_name(ctx: &Context) -> Result<(String, SelectionReport), PipelineError> {
    let sel = run_predictor_selection(ctx)?;
    let name = sel.selected.first().cloned().ok_or_else(|| PipelineError::Stage {
        stage: "select-descriptors".into(),
        message: "no descriptor available for the source survived selection".into(),
    })?;
    Ok((name, sel))
}

fn request(variant: Variant, seed: u64, fraction: f64, predictor: &Option<(String, Vec<f64>)>) -> ModelRequest {
    ModelRequest {
        seed,
        fraction,
        predictor: match variant {
            Variant::Plain => None,
            Variant::Joint => predictor.clone(),
        },
    }
}

/// The predictor column for joint models: explicit names come from the
/// config, otherwise the top-ranked descriptor of the target.
fn joint_predictor(ctx: &Context) -> Result<(Option<(String, Vec<f64>)>, Option<SelectionReport>), PipelineError> {
    if ctx.target.is_none() {
        let name = ctx.cfg.selection.names.first().cloned();
        return Ok((
            match name {
                Some(n) => Some((n.clone(), ctx.source_descriptor(&n)?)),
                None => None,
            },
            None,
        ));
    }
    let (name, sel) = predictor_name(ctx)?;
    let values = ctx.source_descriptor(&name)?;
    Ok((Some((name, values)), Some(sel)))
}

// ---- train-vae -----------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainVaeResult {
    pub model_key: String,
    pub bundle: PathBuf,
    pub predictor: Option<String>,
    pub best_epoch: Option<usize>,
    pub val_recon_accuracy: Option<f64>,
    pub epochs: usize,
}

fn best_val(t: &TrainedModel) -> Option<f64> {
    t.log
        .best_epoch
        .and_then(|e| t.log.epochs.get(e))
        .and_then(|e| e.val_recon_accuracy)
}

pub fn cmd_train_vae(ctx: &Context) -> Result<TrainVaeResult, PipelineError> {
    let (predictor, _) = match ctx.cfg.variant {
        Variant::Joint => joint_predictor(ctx)?,
        Variant::Plain => (None, None),
    };
    let seed = ctx.cfg.replicate_seeds[0];
    let req = request(ctx.cfg.variant, seed, ctx.cfg.source.subset_fraction, &predictor);
    let t = obtain_model(ctx, &req)?;
    let result = TrainVaeResult {
        model_key: t.key.clone(),
        bundle: ctx.cfg.output_dir.join("models").join(&t.key),
        predictor: predictor.map(|(n, _)| n),
        best_epoch: t.log.best_epoch,
        val_recon_accuracy: best_val(&t),
        epochs: t.log.epochs.len(),
    };
    write_json(&ctx.out.join("train_log.json"), &t.log)?;
    write_report(ctx, "train-vae", &result)?;
    Ok(result)
}

// ---- pipeline ------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub seed: u64,
    pub variant: String,
    pub model_key: String,
    pub best_epoch: Option<usize>,
    pub val_recon_accuracy: Option<f64>,
    pub embedded_rows: usize,
    pub excluded_rows: usize,
    pub cv: BTreeMap<String, CvSummary>,
    /// Linear probe of the predictor descriptor from the embeddings.
    pub probe: Option<ProbeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub selection: SelectionReport,
    pub predictor: String,
    pub runs: Vec<PipelineRun>,
    /// variant → model → metric → statistics over replicate seeds.
    pub summary: BTreeMap<String, BTreeMap<String, BTreeMap<String, Stat>>>,
    /// model → metric → joint mean minus plain mean.
    pub delta: BTreeMap<String, BTreeMap<String, f64>>,
}

fn embed_seed(ctx: &Context, model_seed: u64, replicate: usize) -> u64 {
    derive_seed(ctx.cfg.seed ^ model_seed.rotate_left(17), &format!("embed/{replicate}"))
}

fn run_one(
    ctx: &Context,
    target: &Dataset,
    t: &TrainedModel,
    variant: &str,
    seed: u64,
    probe_column: Option<&str>,
    command: &str,
) -> Result<PipelineRun, PipelineError> {
    let smiles = target.smiles();
    let es = embed(&t.model, &smiles, ctx.cfg.embed_mode, embed_seed(ctx, seed, 0)).map_err(stage("embed"))?;
    let tag = format!("{command}_{variant}_s{seed}");
    let path = ctx.out.join("embeddings").join(format!("{tag}.csv"));
    fs::create_dir_all(path.parent().expect("has parent")).map_err(io_err(&path))?;
    let file = fs::File::create(&path).map_err(io_err(&path))?;
    es.write_csv(std::io::BufWriter::new(file)).map_err(stage("embed"))?;
    let (cv, _) = evaluate_embedding(ctx, target, &es, &tag)?;
    let probe = match probe_column.and_then(|c| target.column(c)) {
        Some(col) => {
            let col: Vec<f64> = es.rows.iter().map(|&i| col[i]).collect();
            Some(descriptor_probe(&es.z, &col, cv_seed(ctx)).map_err(stage("probe"))?)
        }
        None => None,
    };
    Ok(PipelineRun {
        seed,
        variant: variant.into(),
        model_key: t.key.clone(),
        best_epoch: t.log.best_epoch,
        val_recon_accuracy: best_val(t),
        embedded_rows: es.len(),
        excluded_rows: es.excluded.len(),
        cv,
        probe,
    })
}

fn summarize(runs: &[PipelineRun]) -> BTreeMap<String, BTreeMap<String, BTreeMap<String, Stat>>> {
    let mut acc: BTreeMap<String, BTreeMap<String, BTreeMap<String, Vec<f64>>>> = BTreeMap::new();
    for r in runs {
        for (model, s) in &r.cv {
            for (metric, v) in &s.mean {
                acc.entry(r.variant.clone())
                    .or_default()
                    .entry(model.clone())
                    .or_default()
                    .entry(metric.clone())
                    .or_default()
                    .push(*v);
            }
        }
        if let Some(p) = &r.probe {
            let e = acc.entry(r.variant.clone()).or_default().entry("probe".into()).or_default();
            e.entry("rmse".into()).or_default().push(p.rmse_mean);
            e.entry("r2".into()).or_default().push(p.r2_mean);
        }
    }
    acc.into_iter()
        .map(|(v, models)| {
            (
                v,
                models
                    .into_iter()
                    .map(|(m, metrics)| (m, metrics.into_iter().map(|(k, xs)| (k, Stat::of(&xs))).collect()))
                    .collect(),
            )
        })
        .collect()
}

fn pipeline_on(ctx: &Context, target: &Dataset, command: &str) -> Result<PipelineResult, PipelineError> {
    let (predictor, selection) = joint_predictor(ctx)?;
    let selection = selection.expect("target present");
    let name = predictor.as_ref().map(|(n, _)| n.clone()).expect("target present");
    let mut reqs = Vec::new();
    for &s in &ctx.cfg.replicate_seeds {
        for v in [Variant::Plain, Variant::Joint] {
            reqs.push((v, s, request(v, s, ctx.cfg.source.subset_fraction, &predictor)));
        }
    }
    let models = obtain_models(ctx, &reqs.iter().map(|(_, _, r)| r.clone()).collect::<Vec<_>>())?;
    let mut runs = Vec::new();
    for ((v, s, _), t) in reqs.iter().zip(&models) {
        runs.push(run_one(ctx, target, t, variant_name(*v), *s, Some(&name), command)?);
    }
    let summary = summarize(&runs);
    let mut delta = BTreeMap::new();
    if let (Some(p), Some(j)) = (summary.get("plain"), summary.get("joint")) {
        for (model, metrics) in j {
            let mut d = BTreeMap::new();
            for (metric, st) in metrics {
                if let Some(b) = p.get(model).and_then(|m| m.get(metric)) {
                    d.insert(metric.clone(), st.mean - b.mean);
                }
            }
            delta.insert(model.clone(), d);
        }
    }
    for (model, d) in &delta {
        log::info!("{command}: joint − plain for {model}: {d:?}");
    }
    let result = PipelineResult {
        selection,
        predictor: name,
        runs,
        summary,
        delta,
    };
    write_report(ctx, command, &result)?;
    Ok(result)
}

/// Selection, plain and joint VAEs for every replicate seed, embedding, and
/// cross-validated QSAR on the target.
pub fn cmd_pipeline(ctx: &Context) -> Result<PipelineResult, PipelineError> {
    let target = ctx.target()?;
    pipeline_on(ctx, target, "pipeline")
}

/// The pipeline on a seeded subsample of `size_matched_n` target rows.
pub fn cmd_size_matched(ctx: &Context) -> Result<PipelineResult, PipelineError> {
    let target = ctx.target()?;
    let n = ctx
        .cfg
        .size_matched_n
        .ok_or_else(|| PipelineError::Config("size-matched needs size_matched_n".into()))?;
    if n > target.len() || n < ctx.cfg.folds {
        return Err(PipelineError::Config(format!(
            "size_matched_n = {n} must lie between folds ({}) and the target size ({})",
            ctx.cfg.folds,
            target.len()
        )));
    }
    let rows = sample_rows(target.len(), n, ctx.cfg.seed, "size-matched");
    let sub = target.select_rows(&rows);
    pipeline_on(ctx, &sub, "size-matched")
}

// ---- embed / train-qsar (file-level verbs) --------------------------------

pub fn cmd_embed(bundle: &Path, input: &Path, mode: EmbedMode, seed: u64, output: &Path) -> Result<EmbeddingSet, PipelineError> {
    let model = crate::vae::load_bundle(bundle).map_err(|e| PipelineError::Config(format!("{}: {e}", bundle.display())))?;
    let (ds, _) = Dataset::load(input, &crate::chem_data::Schema::unlabeled())?;
    let es = embed(&model, &ds.smiles(), mode, seed).map_err(stage("embed"))?;
    let file = fs::File::create(output).map_err(io_err(output))?;
    es.write_csv(std::io::BufWriter::new(file)).map_err(stage("embed"))?;
    for (i, why) in &es.excluded {
        log::warn!("row {i} excluded: {why}");
    }
    Ok(es)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainQsarResult {
    pub spec: QsarSpec,
    pub rows: usize,
    pub cv: CvSummary,
    pub folds: Vec<usize>,
}

/// Cross-validates one QSAR model on an embedding CSV joined to a target
/// CSV by SMILES.
pub fn cmd_train_qsar(
    embeddings: &Path,
    target: &super::config::TargetConfig,
    spec: &QsarSpec,
    k: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<TrainQsarResult, PipelineError> {
    let file = fs::File::open(embeddings).map_err(io_err(embeddings))?;
    let es = EmbeddingSet::read_csv(file, EmbedMode::Sampled, 0)?;
    let ds = super::context::load_target(target)?;
    let y_all = ds.targets().ok_or_else(|| PipelineError::Config("target has no target column".into()))?;
    let index: BTreeMap<&str, usize> = ds.records.iter().enumerate().map(|(i, r)| (r.smiles.as_str(), i)).collect();
    let mut x = Vec::new();
    let mut y = Vec::new();
    let mut smiles = Vec::new();
    for (i, s) in es.smiles.iter().enumerate() {
        if let Some(&j) = index.get(s.as_str()) {
            x.push(es.z[i].clone());
            y.push(y_all[j]);
            smiles.push(s.clone());
        }
    }
    let rep = kfold_cv(&x, &y, spec, k, seed).map_err(stage("train-qsar"))?;
    let pooled = metric_map(spec.task, &y, &rep.oof).map_err(stage("train-qsar"))?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    write_oof(&out_dir.join("oof.csv"), &smiles, &y, &rep)?;
    let result = TrainQsarResult {
        spec: spec.clone(),
        rows: x.len(),
        cv: CvSummary {
            mean: rep.mean.clone(),
            std: rep.std.clone(),
            per_fold: rep.per_fold.clone(),
            pooled,
        },
        folds: rep.folds.clone(),
    };
    write_json(&out_dir.join("cv_report.json"), &result)?;
    Ok(result)
}

// ---- subset sweep --------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub fraction: f64,
    pub train_molecules: usize,
    pub model_key: String,
    pub recon_accuracy: f64,
    pub best_epoch: Option<usize>,
    pub downstream: Option<BTreeMap<String, CvSummary>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetSweepResult {
    pub variant: String,
    pub rows: Vec<SweepRow>,
    pub spearman_size_accuracy: f64,
}

pub fn cmd_subset_sweep(ctx: &Context) -> Result<SubsetSweepResult, PipelineError> {
    let (predictor, _) = match ctx.cfg.variant {
        Variant::Joint => joint_predictor(ctx)?,
        Variant::Plain => (None, None),
    };
    let seed = ctx.cfg.replicate_seeds[0];
    let reqs: Vec<ModelRequest> = ctx
        .cfg
        .subset_fractions
        .iter()
        .map(|&f| ModelRequest {
            seed,
            fraction: f,
            predictor: predictor.clone(),
        })
        .collect();
    let models = obtain_models(ctx, &reqs)?;
    let val = ctx.validation_set();
    let mut rows = Vec::new();
    for (req, t) in reqs.iter().zip(&models) {
        let acc = reconstruction_accuracy(&t.model, &val).map_err(stage("reconstruction"))?;
        let downstream = match &ctx.target {
            Some(target) => {
                let es = embed(&t.model, &target.smiles(), ctx.cfg.embed_mode, embed_seed(ctx, seed, 0))
                    .map_err(stage("embed"))?;
                Some(evaluate_embedding(ctx, target, &es, &format!("subset_{}", req.fraction))?.0)
            }
            None => None,
        };
        log::info!("subset {}: reconstruction accuracy {acc:.4}", req.fraction);
        rows.push(SweepRow {
            fraction: req.fraction,
            train_molecules: ctx.subset_rows(req.fraction).len(),
            model_key: t.key.clone(),
            recon_accuracy: acc,
            best_epoch: t.log.best_epoch,
            downstream,
        });
    }
    let sizes: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    let accs: Vec<f64> = rows.iter().map(|r| r.recon_accuracy).collect();
    let result = SubsetSweepResult {
        variant: variant_name(ctx.cfg.variant).into(),
        spearman_size_accuracy: spearman(&sizes, &accs),
        rows,
    };
    write_report(ctx, "subset-sweep", &result)?;
    Ok(result)
}

// ---- noise sweep ---------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisePoint {
    pub r_target: f64,
    pub r_achieved: Option<f64>,
    pub noise_sd: Option<f64>,
    pub model_key: Option<String>,
    pub cv: Option<BTreeMap<String, CvSummary>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepResult {
    pub base: String,
    pub base_r: f64,
    pub points: Vec<NoisePoint>,
    /// Spearman correlation between |r| and the first model's first metric.
    pub trend: Option<f64>,
}

pub fn cmd_noise_sweep(ctx: &Context) -> Result<NoiseSweepResult, PipelineError> {
    let target = ctx.target()?;
    let y = ctx.target_values()?;
    let base = match &ctx.cfg.selection.noise_base {
        Some(b) => b.clone(),
        None => predictor_name(ctx)?.0,
    };
    let d_target = target
        .column(&base)
        .ok_or_else(|| PipelineError::Config(format!("target has no column {base}")))?;
    let d_source = ctx.source_descriptor(&base)?;
    let base_r = pearson(&d_target, &y).map_err(stage("noise-sweep"))?;
    let sigma = crate::stats::population_std(&d_target);
    let seed = ctx.cfg.replicate_seeds[0];
    let mut points = Vec::new();
    let mut pending = Vec::new();
    for (i, &rt) in ctx.cfg.selection.r_targets.iter().enumerate() {
        let noisy = noisy_descriptor(&d_target, &y, rt, derive_seed(ctx.cfg.seed, &format!("noise/target/{i}")));
        let achieved = match noisy.map_err(|e| e.to_string()).and_then(|v| pearson(&v, &y).map_err(|e| e.to_string())) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("noise point r = {rt}: {e}");
                points.push(NoisePoint {
                    r_target: rt,
                    r_achieved: None,
                    noise_sd: None,
                    model_key: None,
                    cv: None,
                    error: Some(e),
                });
                continue;
            }
        };
        let s = noise_scale(base_r, rt, sigma);
        let mut rng = rng_for(ctx.cfg.seed, &format!("noise/source/{i}"));
        let column: Vec<f64> = d_source
            .iter()
            .map(|v| v + s * rng.sample::<f64, _>(StandardNormal))
            .collect();
        points.push(NoisePoint {
            r_target: rt,
            r_achieved: Some(achieved),
            noise_sd: Some(s),
            model_key: None,
            cv: None,
            error: None,
        });
        pending.push((
            points.len() - 1,
            ModelRequest {
                seed,
                fraction: ctx.cfg.source.subset_fraction,
                predictor: Some((format!("{base}~r{rt}"), column)),
            },
        ));
    }
    let reqs: Vec<ModelRequest> = pending.iter().map(|(_, r)| r.clone()).collect();
    let models = obtain_models(ctx, &reqs)?;
    for ((idx, _), t) in pending.iter().zip(&models) {
        let rt = points[*idx].r_target;
        let es = embed(&t.model, &target.smiles(), ctx.cfg.embed_mode, embed_seed(ctx, seed, 0)).map_err(stage("embed"))?;
        let (cv, _) = evaluate_embedding(ctx, target, &es, &format!("noise_{rt}"))?;
        points[*idx].model_key = Some(t.key.clone());
        points[*idx].cv = Some(cv);
    }
    let ok: Vec<&NoisePoint> = points.iter().filter(|p| p.cv.is_some()).collect();
    let trend = ctx.cfg.qsar.first().and_then(|q| {
        let metric = match ctx.task() {
            TaskKind::Regression => "r2",
            TaskKind::Classification => "accuracy",
        };
        let xs: Vec<f64> = ok.iter().map(|p| p.r_target.abs()).collect();
        let ys: Vec<f64> = ok
            .iter()
            .filter_map(|p| p.cv.as_ref().and_then(|c| c.get(q.label())).and_then(|s| s.mean.get(metric).copied()))
            .collect();
        (xs.len() >= 3 && xs.len() == ys.len()).then(|| spearman(&xs, &ys))
    });
    if let Some(t) = trend {
        log::info!("noise sweep: Spearman(|r|, metric) = {t:.3}");
    }
    let result = NoiseSweepResult {
        base,
        base_r,
        points,
        trend,
    };
    write_report(ctx, "noise-sweep", &result)?;
    Ok(result)
}

// ---- variance study ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceResult {
    pub variant: String,
    pub metric: String,
    pub model: String,
    /// Mean metric of each sampled embedding of the first model.
    pub embedding_means: Vec<f64>,
    /// Fold standard deviation of each of those embeddings.
    pub embedding_fold_stds: Vec<f64>,
    /// Mean metric of one embedding per independently trained model.
    pub model_means: Vec<f64>,
    pub across_embedding_std: f64,
    pub mean_fold_std: f64,
    pub across_model_std: f64,
    pub embedding_to_fold_ratio: f64,
}

pub fn cmd_variance_study(ctx: &Context) -> Result<VarianceResult, PipelineError> {
    let target = ctx.target()?;
    let (predictor, _) = match ctx.cfg.variant {
        Variant::Joint => joint_predictor(ctx)?,
        Variant::Plain => (None, None),
    };
    let entry = ctx
        .cfg
        .qsar
        .first()
        .ok_or_else(|| PipelineError::Config("variance-study needs a QSAR model".into()))?;
    let metric = match ctx.task() {
        TaskKind::Regression => "r2",
        TaskKind::Classification => "accuracy",
    };
    let reqs: Vec<ModelRequest> = ctx
        .cfg
        .replicate_seeds
        .iter()
        .map(|&s| request(ctx.cfg.variant, s, ctx.cfg.source.subset_fraction, &predictor))
        .collect();
    let models = obtain_models(ctx, &reqs)?;
    let pick = |c: &BTreeMap<String, CvSummary>| -> Result<(f64, f64), PipelineError> {
        let s = &c[entry.label()];
        match (s.mean.get(metric), s.std.get(metric)) {
            (Some(m), Some(sd)) => Ok((*m, *sd)),
            _ => Err(PipelineError::Stage {
                stage: "variance-study".into(),
                message: format!("metric {metric} missing"),
            }),
        }
    };
    let first_seed = ctx.cfg.replicate_seeds[0];
    let mut embedding_means = Vec::new();
    let mut embedding_fold_stds = Vec::new();
    for e in 0..ctx.cfg.embedding_replicates.max(1) {
        let es = embed(&models[0].model, &target.smiles(), EmbedMode::Sampled, embed_seed(ctx, first_seed, e))
            .map_err(stage("embed"))?;
        let (cv, _) = evaluate_embedding(ctx, target, &es, &format!("variance_embed{e}"))?;
        let (m, sd) = pick(&cv)?;
        embedding_means.push(m);
        embedding_fold_stds.push(sd);
    }
    let mut model_means = Vec::new();
    for (t, &s) in models.iter().zip(&ctx.cfg.replicate_seeds) {
        let es = embed(&t.model, &target.smiles(), EmbedMode::Sampled, embed_seed(ctx, s, 0)).map_err(stage("embed"))?;
        let (cv, _) = evaluate_embedding(ctx, target, &es, &format!("variance_model{s}"))?;
        model_means.push(pick(&cv)?.0);
    }
    let across_embedding_std = Stat::of(&embedding_means).std;
    let mean_fold_std = mean(&embedding_fold_stds);
    let result = VarianceResult {
        variant: variant_name(ctx.cfg.variant).into(),
        metric: metric.into(),
        model: entry.label().into(),
        across_model_std: Stat::of(&model_means).std,
        embedding_to_fold_ratio: across_embedding_std / mean_fold_std,
        embedding_means,
        embedding_fold_stds,
        model_means,
        across_embedding_std,
        mean_fold_std,
    };
    log::info!(
        "variance: across-embedding std {:.4}, mean fold std {:.4}, across-model std {:.4}",
        result.across_embedding_std,
        result.mean_fold_std,
        result.across_model_std
    );
    write_report(ctx, "variance-study", &result)?;
    Ok(result)
}

// ---- cluster analysis ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRun {
    pub k: usize,
    pub effective_k: usize,
    pub inertia: f64,
    pub iterations: usize,
    pub profiles: Vec<ClusterProfile>,
    pub spearman_without_farthest: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAnalysisResult {
    pub model_key: String,
    pub source_prior_kl: f64,
    pub target_prior_kl: f64,
    pub oof: BTreeMap<String, f64>,
    pub clusterings: Vec<ClusterRun>,
    pub pca_explained_variance: [f64; 2],
    pub pca_fit_on: String,
}

#[derive(Serialize)]
struct PlotBundle<'a> {
    points_csv: &'a str,
    x: &'a str,
    y: &'a str,
    color: &'a str,
    labels: &'a str,
    fit_on: &'a str,
    explained_variance: [f64; 2],
    clusters_k: usize,
}

pub fn cmd_cluster_analysis(ctx: &Context) -> Result<ClusterAnalysisResult, PipelineError> {
    let target = ctx.target()?;
    let (predictor, _) = match ctx.cfg.variant {
        Variant::Joint => joint_predictor(ctx)?,
        Variant::Plain => (None, None),
    };
    let seed = ctx.cfg.replicate_seeds[0];
    let t = obtain_model(ctx, &request(ctx.cfg.variant, seed, ctx.cfg.source.subset_fraction, &predictor))?;
    let es = embed(&t.model, &target.smiles(), EmbedMode::Mean, 0).map_err(stage("embed"))?;
    let val_smiles = ctx.validation.smiles();
    let src = embed(&t.model, &val_smiles, EmbedMode::Mean, 0).map_err(stage("embed"))?;

    let entry = ctx
        .cfg
        .qsar
        .first()
        .ok_or_else(|| PipelineError::Config("cluster-analysis needs a QSAR model".into()))?;
    let (_, reports) = evaluate_embedding(ctx, target, &es, "clusters")?;
    let rep = &reports[entry.label()];
    let y_all = ctx.target_values()?;
    let y: Vec<f64> = es.rows.iter().map(|&i| y_all[i]).collect();
    let oof = metric_map(ctx.task(), &y, &rep.oof).map_err(stage("cluster-analysis"))?;

    let standardized = standardize_columns(&es.mu);
    let mut clusterings = Vec::new();
    let mut first_assign = None;
    for &k in &ctx.cfg.cluster_ks {
        let km = kmeans(&standardized, k, derive_seed(ctx.cfg.seed, &format!("kmeans/{k}")), 300)
            .map_err(stage("cluster-analysis"))?;
        let profiles = cluster_error_profile(&es.mu, &es.logvar, &km.assignments, &y, &rep.oof, ctx.task())
            .map_err(stage("cluster-analysis"))?;
        let rho = kl_error_correlation_without_farthest(&profiles);
        log::info!("k = {k}: Spearman(KL, error) without farthest cluster = {rho:.3}");
        write_profiles(&ctx.out.join("tables").join(format!("clusters_k{k}.csv")), &profiles)?;
        if first_assign.is_none() {
            first_assign = Some((k, km.assignments.clone()));
        }
        clusterings.push(ClusterRun {
            k,
            effective_k: km.k,
            inertia: km.inertia,
            iterations: km.iterations,
            profiles,
            spearman_without_farthest: rho,
        });
    }

    let mut union = src.mu.clone();
    union.extend(es.mu.iter().cloned());
    let pca = pca2(&union).map_err(stage("cluster-analysis"))?;
    let (ck, assign) = first_assign.unwrap_or((0, vec![0; es.len()]));
    write_plot_points(&ctx.out.join("plots").join("pca_points.csv"), &pca.scores, &src, &es, &assign, &y, &rep.oof)?;
    write_json(
        &ctx.out.join("plots").join("pca_bundle.json"),
        &PlotBundle {
            points_csv: "pca_points.csv",
            x: "pc1",
            y: "pc2",
            color: "kl_to_prior",
            labels: "set",
            fit_on: "union",
            explained_variance: pca.explained_variance_ratio,
            clusters_k: ck,
        },
    )?;

    let result = ClusterAnalysisResult {
        model_key: t.key.clone(),
        source_prior_kl: dataset_prior_kl(&src.mu, &src.logvar).map_err(stage("cluster-analysis"))?,
        target_prior_kl: dataset_prior_kl(&es.mu, &es.logvar).map_err(stage("cluster-analysis"))?,
        oof,
        clusterings,
        pca_explained_variance: pca.explained_variance_ratio,
        pca_fit_on: "union".into(),
    };
    write_report(ctx, "cluster-analysis", &result)?;
    Ok(result)
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> PipelineError + '_ {
    move |e| PipelineError::Config(format!("{}: {e}", path.display()))
}

fn write_profiles(path: &Path, profiles: &[ClusterProfile]) -> Result<(), PipelineError> {
    fs::create_dir_all(path.parent().expect("has parent")).map_err(io_err(path))?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["cluster_id", "size", "kl_to_prior", "metric"]).map_err(csv_err(path))?;
    for p in profiles {
        w.write_record([
            p.cluster_id.to_string(),
            p.size.to_string(),
            format!("{:?}", p.kl_to_prior),
            format!("{:?}", p.metric),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

#[allow(clippy::too_many_arguments)]
fn write_plot_points(
    path: &Path,
    scores: &[[f64; 2]],
    src: &EmbeddingSet,
    tgt: &EmbeddingSet,
    assign: &[usize],
    y: &[f64],
    oof: &[f64],
) -> Result<(), PipelineError> {
    fs::create_dir_all(path.parent().expect("has parent")).map_err(io_err(path))?;
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(["set", "smiles", "pc1", "pc2", "kl_to_prior", "cluster", "abs_error"])
        .map_err(csv_err(path))?;
    let kl = |m: &[f64], l: &[f64]| 0.5 * m.iter().zip(l).map(|(a, b)| a * a + b.exp() - 1.0 - b).sum::<f64>();
    for (i, s) in src.smiles.iter().enumerate() {
        let p = scores[i];
        w.write_record([
            "source".to_string(),
            s.clone(),
            format!("{:?}", p[0]),
            format!("{:?}", p[1]),
            format!("{:?}", kl(&src.mu[i], &src.logvar[i])),
            String::new(),
            String::new(),
        ])
        .map_err(csv_err(path))?;
    }
    for (i, s) in tgt.smiles.iter().enumerate() {
        let p = scores[src.len() + i];
        w.write_record([
            "target".to_string(),
            s.clone(),
            format!("{:?}", p[0]),
            format!("{:?}", p[1]),
            format!("{:?}", kl(&tgt.mu[i], &tgt.logvar[i])),
            assign[i].to_string(),
            format!("{:?}", (y[i] - oof[i]).abs()),
        ])
        .map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
