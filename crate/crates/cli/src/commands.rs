//! The pipeline stages behind each subcommand.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use mdd_core::corpus::{self, CaptionSource, DatasetManifest, ManifestRecord, PairedFeatureSource, Split};
use mdd_core::denoiser::{self, DenoiserConfig, DenoiserModel, ToyDenoiser, TrainingExample};
use mdd_core::diffusion::NoiseSchedule;
use mdd_core::hsa::{Aggregator, ConditionEmbedding, NgramProvider, TextEncoderProvider};
use mdd_core::metrics::{self, FeatureExtractor, MetricSummary, RandomProjectionExtractor};
use mdd_core::motion_repr::{canonicalize, decode_features, encode_features, JointMotion, MotionClip, Skeleton, FEATURE_DIM, NUM_JOINTS};
use mdd_core::sampler::generate_batch;
use mdd_core::vq::{self, Codebook, VqModel, STRIDE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::record::RunRecord;
use crate::synthetic;
use crate::CliError;

pub const MANIFEST: &str = "manifest.jsonl";
pub const RUN_RECORD: &str = "run.json";

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    Ok(BufReader::new(File::open(path).map_err(|e| CliError::io(path, e))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<(), CliError> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn load_manifest(dir: &Path) -> Result<DatasetManifest, CliError> {
    let path = dir.join(MANIFEST);
    DatasetManifest::read_jsonl(open(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_clip(dir: &Path, record: &ManifestRecord) -> Result<MotionClip, CliError> {
    let path = dir.join(&record.motion_path);
    MotionClip::read_from(&mut open(&path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_vq(path: &Path) -> Result<(VqModel, Codebook), CliError> {
    VqModel::read_from(&mut open(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_denoiser(path: &Path) -> Result<(DenoiserModel, NoiseSchedule, NgramProvider), CliError> {
    DenoiserModel::read_from(&mut open(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn records_in(manifest: &DatasetManifest, split: Split) -> Vec<&ManifestRecord> {
    manifest.records.iter().filter(|r| r.split == split).collect()
}

pub fn make_synthetic(cfg: &PipelineConfig, out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let items = synthetic::make_corpus(&cfg.synthetic, &mut rng);
    let manifest = synthetic::manifest_for(&items, "jntm");
    for (item, rec) in items.iter().zip(&manifest.records) {
        let path = out.join(&rec.motion_path);
        let mut w = create(&path)?;
        item.motion.write_to(&mut w)?;
        finish(w, &path)?;
    }
    let mpath = out.join(MANIFEST);
    manifest.save(&mpath)?;
    RunRecord::new("make-synthetic", cfg).output(&mpath)?.write(&out.join(RUN_RECORD))?;
    println!("wrote {} motions, {} captions to {}", manifest.records.len(), manifest.num_captions(), out.display());
    Ok(())
}

pub fn preprocess(cfg: &PipelineConfig, input: &Path, output: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(input)?;
    std::fs::create_dir_all(output).map_err(|e| CliError::io(output, e))?;
    let sk = Skeleton::humanml3d();
    let p = &cfg.preprocess;
    let results: Vec<Result<(ManifestRecord, bool), CliError>> = manifest
        .records
        .par_iter()
        .map(|rec| {
            let src = input.join(&rec.motion_path);
            let wrap = |e: mdd_core::Error| CliError::Data(format!("{}: {e}", src.display()));
            let motion = JointMotion::read_from(&mut open(&src)?).map_err(wrap)?;
            let canon = canonicalize(&motion, &sk, p.target_fps, p.max_frames).map_err(wrap)?;
            let clip = encode_features(&canon.motion, &sk, p.contact_threshold).map_err(wrap)?;
            let stem = Path::new(&rec.motion_path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| rec.motion_path.clone());
            let name = format!("{stem}.mclp");
            let dst = output.join(&name);
            let mut w = create(&dst)?;
            clip.write_to(&mut w)?;
            finish(w, &dst)?;
            let mut out = rec.clone();
            out.motion_path = name;
            Ok((out, canon.resampled))
        })
        .collect();
    let mut records = Vec::with_capacity(results.len());
    let mut resampled = 0;
    for r in results {
        let (rec, flag) = r?;
        resampled += flag as usize;
        records.push(rec);
    }
    let encoded = DatasetManifest::new(records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let plan = corpus::split_and_batch(&encoded, &cfg.split.ratios, cfg.split.batch_size, &mut rng)
        .map_err(|e| CliError::Usage(format!("split: {e}")))?;
    let encoded = plan.apply(&encoded);
    let mpath = output.join(MANIFEST);
    encoded.save(&mpath)?;
    RunRecord::new("preprocess", cfg)
        .input(&input.join(MANIFEST))?
        .output(&mpath)?
        .write(&output.join(RUN_RECORD))?;
    let count = |s| plan.splits.iter().filter(|x| **x == s).count();
    println!(
        "encoded {} motions ({} resampled); split train/val/test = {}/{}/{}",
        encoded.records.len(),
        resampled,
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

pub fn train_vq(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(data)?;
    let clips = records_in(&manifest, Split::Train)
        .into_iter()
        .map(|r| load_clip(data, r))
        .collect::<Result<Vec<_>, _>>()?;
    if clips.is_empty() {
        return Err(CliError::Data(format!("{} has no training motions", data.join(MANIFEST).display())));
    }
    let outcome = vq::train_toy_vq(&clips, &cfg.vq)?;
    let mut w = create(out)?;
    outcome.model.write_to(&outcome.codebook, &mut w)?;
    finish(w, out)?;

    let csv = with_suffix(out, ".loss.csv");
    let mut w = create(&csv)?;
    let io = |e| CliError::io(&csv, e);
    writeln!(w, "step,loss,recon,embed,commit,resets").map_err(io)?;
    for r in &outcome.curve {
        writeln!(w, "{},{},{},{},{},{}", r.step, r.loss.total, r.loss.recon, r.loss.embed, r.loss.commit, r.resets).map_err(io)?;
    }
    finish(w, &csv)?;

    let train_err = vq::reconstruction_error(&outcome.model, &outcome.codebook, &clips)?;
    RunRecord::new("train-vq", cfg)
        .input(&data.join(MANIFEST))?
        .output(out)?
        .output(&csv)?
        .write(&with_suffix(out, ".run.json"))?;
    println!("trained tokenizer on {} clips; train reconstruction L1 {train_err:.5}", clips.len());
    Ok(())
}

pub fn train_denoiser(cfg: &PipelineConfig, data: &Path, vq_path: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(data)?;
    let (vq_model, book) = load_vq(vq_path)?;
    let provider = cfg.text.clone();
    let mut examples = Vec::new();
    for rec in records_in(&manifest, Split::Train) {
        let clip = load_clip(data, rec)?;
        let tokens = vq::encode_to_tokens(&clip, &vq_model, &book)?;
        if rec.captions.is_empty() {
            examples.push(TrainingExample {
                tokens,
                source: CaptionSource::Wild,
                features: None,
            });
            continue;
        }
        for c in &rec.captions {
            examples.push(TrainingExample {
                tokens: tokens.clone(),
                source: c.source,
                features: Some(provider.embed(&c.text)?),
            });
        }
    }
    if examples.is_empty() {
        return Err(CliError::Data(format!("{} has no training motions", data.join(MANIFEST).display())));
    }
    let d = &cfg.denoiser;
    let k = book.num_codes();
    let schedule = NoiseSchedule::build(d.diffusion_steps, k, &d.profile).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(d.train.seed);
    let net = ToyDenoiser::new(
        DenoiserConfig {
            num_codes: k,
            hidden: d.hidden,
            cond_dim: d.cond_dim,
            blocks: d.blocks,
            radius: d.radius,
            steps: d.diffusion_steps,
            activation: d.activation,
        },
        &mut rng,
    )?;
    let aggregator = Aggregator::for_provider(&provider, d.cond_dim, &mut rng);
    let outcome = denoiser::train_denoiser(DenoiserModel { net, aggregator }, &schedule, &examples, &d.train)?;

    let mut w = create(out)?;
    outcome.model.write_to(&schedule, &provider, &mut w)?;
    finish(w, out)?;
    let csv = with_suffix(out, ".loss.csv");
    let mut w = create(&csv)?;
    denoiser::write_loss_csv(&mut w, &outcome.reports)?;
    finish(w, &csv)?;
    RunRecord::new("train-denoiser", cfg)
        .input(&data.join(MANIFEST))?
        .input(vq_path)?
        .output(out)?
        .output(&csv)?
        .write(&with_suffix(out, ".run.json"))?;
    let tail = &outcome.reports[outcome.reports.len().saturating_sub(50)..];
    let last = tail.iter().map(|r| r.loss).sum::<f64>() / tail.len().max(1) as f64;
    println!("trained denoiser on {} examples; final loss {last:.4}", examples.len());
    Ok(())
}

pub fn generate(
    cfg: &PipelineConfig,
    vq_path: &Path,
    den_path: &Path,
    text: Option<&str>,
    frames: usize,
    out: &Path,
    joints: Option<&Path>,
    tokens_out: Option<&Path>,
) -> Result<(), CliError> {
    let tokens = frames / STRIDE;
    if tokens == 0 {
        return Err(CliError::Usage(format!("--length must be at least {STRIDE} frames")));
    }
    let (vq_model, book) = load_vq(vq_path)?;
    let (model, schedule, provider) = load_denoiser(den_path)?;
    if book.num_codes() != schedule.num_codes() {
        return Err(CliError::Data(format!(
            "tokenizer has {} codes but the denoiser was trained on {}",
            book.num_codes(),
            schedule.num_codes()
        )));
    }
    let cond = match text {
        None => ConditionEmbedding::Null,
        Some(t) => model.aggregator.aggregate(&provider.embed(t)?)?,
    };
    let seq = generate_batch(&model, &[cond], &cfg.generate, tokens, &schedule, 0)?.remove(0);
    let clip = vq::decode_from_tokens(&seq, &vq_model, &book, mdd_core::motion_repr::TARGET_FPS)?;
    let mut w = create(out)?;
    clip.write_to(&mut w)?;
    finish(w, out)?;
    let mut record = RunRecord::new("generate", cfg).input(vq_path)?.input(den_path)?.output(out)?;
    if let Some(tpath) = tokens_out {
        let mut w = create(tpath)?;
        serde_json::to_writer(&mut w, &seq).map_err(mdd_core::Error::from)?;
        writeln!(w).map_err(|e| CliError::io(tpath, e))?;
        finish(w, tpath)?;
        record = record.output(tpath)?;
    }
    if let Some(jpath) = joints {
        let motion = decode_features(&clip, NUM_JOINTS)?;
        let mut w = create(jpath)?;
        motion.write_to(&mut w)?;
        finish(w, jpath)?;
        record = record.output(jpath)?;
    }
    record.write(&with_suffix(out, ".run.json"))?;
    println!("generated {} frames ({} tokens) to {}", clip.len(), tokens, out.display());
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct EvaluationReport {
    pub records: usize,
    pub fid: f64,
    pub mm_dist: f64,
    pub mm_dist_real: f64,
    pub r_precision_top1: MetricSummary,
    pub r_precision_top2: MetricSummary,
    pub r_precision_top3: MetricSummary,
    pub diversity: MetricSummary,
    pub diversity_real: MetricSummary,
    pub mmodality: Option<MetricSummary>,
}

fn extractor(cfg: &PipelineConfig, provider: NgramProvider) -> RandomProjectionExtractor<NgramProvider> {
    RandomProjectionExtractor::new(provider, FEATURE_DIM, cfg.evaluate.feature_dim, cfg.evaluate.extractor_seed)
}

pub fn evaluate(cfg: &PipelineConfig, data: &Path, vq_path: &Path, den_path: &Path, out: &Path) -> Result<(), CliError> {
    let manifest = load_manifest(data)?;
    let (vq_model, book) = load_vq(vq_path)?;
    let (model, schedule, provider) = load_denoiser(den_path)?;
    let ex = extractor(cfg, provider.clone());
    let test: Vec<&ManifestRecord> = records_in(&manifest, Split::Test)
        .into_iter()
        .filter(|r| !r.captions.is_empty())
        .collect();
    if test.len() < 2 {
        return Err(CliError::Data(format!(
            "{} needs at least 2 captioned test motions, found {}",
            data.join(MANIFEST).display(),
            test.len()
        )));
    }
    let generate_for = |text: &str, tokens: usize, index: u64| -> Result<MotionClip, CliError> {
        let cond = model.aggregator.aggregate(&provider.embed(text)?)?;
        let seq = generate_batch(&model, &[cond], &cfg.generate, tokens, &schedule, index)?.remove(0);
        Ok(vq::decode_from_tokens(&seq, &vq_model, &book, mdd_core::motion_repr::TARGET_FPS)?)
    };
    let (mut real, mut generated, mut texts) = (Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in test.iter().enumerate() {
        let clip = load_clip(data, rec)?;
        let text = &rec.captions[0].text;
        let gen = generate_for(text, (clip.len() / STRIDE).max(1), i as u64)?;
        real.push(ex.motion_features(&clip)?);
        generated.push(ex.motion_features(&gen)?);
        texts.push(ex.text_features(text)?);
    }
    let (real, generated, texts) = (metrics::stack(&real)?, metrics::stack(&generated)?, metrics::stack(&texts)?);
    let n = test.len();
    let e = &cfg.evaluate;
    let seed = cfg.generate.seed;
    let pool = metrics::R_PRECISION_POOL.min(n);
    let mut tops = [Vec::new(), Vec::new(), Vec::new()];
    for r in 0..e.runs {
        let v = metrics::r_precision(&generated, &texts, pool, &mut mdd_core::sampler::stream_rng(seed, r as u64))?;
        for (t, x) in tops.iter_mut().zip(v) {
            t.push(x);
        }
    }
    let [top1, top2, top3] = tops.map(MetricSummary::from_runs);
    let subset = metrics::DIVERSITY_SUBSET.min(n / 2).max(1);
    let diversity = metrics::repeat(e.runs, seed, |rng| metrics::diversity(&generated, subset, rng))?;
    let diversity_real = metrics::repeat(e.runs, seed, |rng| metrics::diversity(&real, subset, rng))?;

    let mmodality = if e.mm_texts > 0 && e.mm_subset > 0 {
        let mut per_text = BTreeMap::new();
        for (t, rec) in test.iter().take(e.mm_texts).enumerate() {
            let text = &rec.captions[0].text;
            if per_text.contains_key(text) {
                continue;
            }
            let clip = load_clip(data, rec)?;
            let rows = (0..2 * e.mm_subset)
                .map(|j| {
                    let index = (1 << 32) + (t * 2 * e.mm_subset + j) as u64;
                    ex.motion_features(&generate_for(text, (clip.len() / STRIDE).max(1), index)?)
                        .map_err(CliError::from)
                })
                .collect::<Result<Vec<_>, _>>()?;
            per_text.insert(text.clone(), metrics::stack(&rows)?);
        }
        Some(metrics::repeat(e.runs.min(metrics::MMODALITY_RUNS).max(1), seed, |rng| {
            metrics::mmodality(&per_text, e.mm_subset, rng)
        })?)
    } else {
        None
    };
    let report = EvaluationReport {
        records: n,
        fid: metrics::fid(&real, &generated)?,
        mm_dist: metrics::mm_dist(&generated, &texts)?,
        mm_dist_real: metrics::mm_dist(&real, &texts)?,
        r_precision_top1: top1,
        r_precision_top2: top2,
        r_precision_top3: top3,
        diversity,
        diversity_real,
        mmodality,
    };
    let mut w = create(out)?;
    serde_json::to_writer_pretty(&mut w, &report).map_err(mdd_core::Error::from)?;
    writeln!(w).map_err(|e| CliError::io(out, e))?;
    finish(w, out)?;
    RunRecord::new("evaluate", cfg)
        .input(&data.join(MANIFEST))?
        .input(vq_path)?
        .input(den_path)?
        .output(out)?
        .write(&with_suffix(out, ".run.json"))?;
    println!(
        "evaluated {n} test motions: FID {:.4}, MM-Dist {:.4}, top-3 {:.3}, diversity {:.4}",
        report.fid, report.mm_dist, report.r_precision_top3.mean, report.diversity.mean
    );
    Ok(())
}

/// Caption scoring through a feature extractor, reading motions from the
/// manifest's directory.
pub struct ExtractorFeatures<'a, E: FeatureExtractor> {
    pub extractor: &'a E,
    pub dir: &'a Path,
}

impl<E: FeatureExtractor> PairedFeatureSource for ExtractorFeatures<'_, E> {
    fn motion(&self, record: &ManifestRecord) -> mdd_core::Result<Vec<f64>> {
        let clip = MotionClip::read_from(&mut BufReader::new(File::open(self.dir.join(&record.motion_path))?))?;
        self.extractor.motion_features(&clip)
    }

    fn text(&self, text: &str) -> mdd_core::Result<Vec<f64>> {
        self.extractor.text_features(text)
    }
}

pub fn filter_captions(cfg: &PipelineConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    if !(cfg.filter.tau >= 0.0) {
        return Err(CliError::Usage(format!("tau {} must be >= 0", cfg.filter.tau)));
    }
    let manifest = load_manifest(data)?;
    let ex = extractor(cfg, cfg.text.clone());
    let source = ExtractorFeatures { extractor: &ex, dir: data };
    let (filtered, removed) = corpus::filter_captions(&manifest, &source, cfg.filter.tau)?;
    let mut w = create(out)?;
    filtered.write_jsonl(&mut w)?;
    finish(w, out)?;
    RunRecord::new("filter-captions", cfg)
        .input(&data.join(MANIFEST))?
        .output(out)?
        .write(&with_suffix(out, ".run.json"))?;
    let flagged = filtered.records.iter().filter(|r| r.uncaptioned).count();
    println!(
        "removed {removed} of {} captions (tau {}); {flagged} motions left uncaptioned",
        manifest.num_captions(),
        cfg.filter.tau
    );
    Ok(())
}
