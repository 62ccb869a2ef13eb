use std::path::{Path, PathBuf};
use std::str::FromStr;

use dcl_core::adapt::{
    adapt as run_adaptation, generator_from_checkpoint, pretrain as run_pretraining, run_hash, AdaptationConfig,
    AdaptationRun, Method, SourceModels,
};
use dcl_core::checkpoint::Checkpoint;
use dcl_core::config::{parse_overrides, ExperimentConfig};
use dcl_core::data::{assert_disjoint, sample_few_shot, save_grid, Dataset, Split};
use dcl_core::metrics::{
    frechet_feature_distance, intra_lpips, realisticness_probe, standard_lpips, EvalReport,
};
use dcl_core::mi::{verify_bound, BoundReport};
use dcl_core::models::{GeneratorModel, ImageBatch, LatentBatch, Provenance};
use dcl_core::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::run::{load_echo, RunDir};
use crate::Common;

/// Seed of the fixed latents behind every sample grid.
const GRID_SEED: u64 = 3;
const GRID_SIZE: usize = 64;

fn load_config(c: &Common, extra: Vec<(String, String)>) -> Result<ExperimentConfig> {
    let mut overrides = parse_overrides(&c.overrides)?;
    overrides.extend(extra);
    ExperimentConfig::load(c.config.as_deref(), &overrides)
}

fn flag_overrides(method: Option<&str>, shots: Option<usize>, seed: Option<u64>) -> Result<Vec<(String, String)>> {
    let mut v = Vec::new();
    if let Some(m) = method {
        Method::from_str(m)?;
        v.push(("adapt.method".into(), format!("\"{m}\"")));
    }
    if let Some(n) = shots {
        v.push(("adapt.shots".into(), n.to_string()));
    }
    if let Some(s) = seed {
        v.push(("adapt.seed".into(), s.to_string()));
    }
    Ok(v)
}

fn load_target(cfg: &ExperimentConfig) -> Result<Dataset> {
    Dataset::load(&cfg.data.specs(&cfg.model).1)
}

fn load_source(path: &Path, cfg: &ExperimentConfig, force: bool) -> Result<SourceModels> {
    SourceModels::from_checkpoint(&Checkpoint::load(path)?, Some(&cfg.model), force)
}

fn grid_latents(z_dim: usize) -> LatentBatch {
    LatentBatch::sample(&mut ChaCha8Rng::seed_from_u64(GRID_SEED), GRID_SIZE, z_dim)
}

fn save_samples(dir: &mut RunDir, name: &str, g: &GeneratorModel) -> Result<()> {
    let imgs = g.generate(&grid_latents(g.config.z_dim), GRID_SIZE)?;
    save_grid(&imgs, 8, 4, &dir.file(name))
}

/// Shots drawn from the target training split, checked against the
/// evaluation split.
fn draw_shots(cfg: &ExperimentConfig, target: &Dataset) -> Result<(ImageBatch, Vec<usize>)> {
    let (shots, idx) = sample_few_shot(target, cfg.adapt.shots, cfg.adapt.seed)?;
    assert_disjoint(&shots, &target.split(Split::Eval).images)?;
    Ok((shots, idx))
}

fn absolute(p: &Path) -> String {
    p.canonicalize().unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

pub fn pretrain(c: &Common) -> Result<PathBuf> {
    let cfg = load_config(c, Vec::new())?;
    let (s_spec, t_spec) = cfg.data.specs(&cfg.model);
    let source = Dataset::load(&s_spec)?;
    let target = Dataset::load(&t_spec)?;
    if source.skipped + target.skipped > 0 {
        log::warn!("skipped {} undecodable images", source.skipped + target.skipped);
    }
    let (models, report) = run_pretraining(&cfg.pretrain, &cfg.model, &source, &target)?;
    let mut dir = RunDir::create(&c.out, "pretrain", "pretrain", cfg.pretrain.seed, c.config.as_deref(), &cfg)?;
    models.to_checkpoint().save(&dir.file("source.ckpt"))?;
    dir.write("pretrain_report.txt", report.to_text().as_bytes())?;
    dir.write("source_manifest.txt", source.manifest().as_bytes())?;
    dir.write("target_manifest.txt", target.manifest().as_bytes())?;
    save_samples(&mut dir, "samples.png", &models.generator)?;
    dir.manifest.facts.insert("realism_ok".into(), report.realism_ok.to_string());
    dir.finish()
}

fn series_csv(run: &AdaptationRun) -> Result<String> {
    run.series.to_csv()
}

fn losses_csv(run: &AdaptationRun) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "d_loss", "adv", "cl1", "cl2", "aux", "total"])?;
    for (i, (b, d)) in run.losses.iter().zip(&run.d_losses).enumerate() {
        w.write_record([
            (i + 1).to_string(),
            d.to_string(),
            b.adv.to_string(),
            b.cl1.to_string(),
            b.cl2.to_string(),
            b.aux.to_string(),
            b.total.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn adapt(
    c: &Common,
    source: &Path,
    method: Option<&str>,
    shots: Option<usize>,
    seed: Option<u64>,
    force: bool,
) -> Result<PathBuf> {
    let cfg = load_config(c, flag_overrides(method, shots, seed)?)?;
    let models = load_source(source, &cfg, force)?;
    let target = load_target(&cfg)?;
    let (shots, idx) = draw_shots(&cfg, &target)?;
    let run = run_adaptation(&cfg.adapt, &models, &shots)?;

    let a = &cfg.adapt;
    let mut dir = RunDir::create(&c.out, a.method.name(), "adapt", a.seed, c.config.as_deref(), &cfg)?;
    dir.manifest.facts.insert("source".into(), absolute(source));
    dir.manifest.facts.insert("force".into(), force.to_string());
    dir.manifest.facts.insert(
        "shot_indices".into(),
        idx.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","),
    );
    dir.manifest.facts.insert("wall_clock_seconds".into(), format!("{:.1}", run.wall_clock.as_secs_f64()));
    dir.write("metrics.csv", series_csv(&run)?.as_bytes())?;
    dir.write("losses.csv", losses_csv(&run)?.as_bytes())?;
    for (it, ck) in &run.checkpoints {
        let mut ck = ck.clone();
        ck.put_images("shots", &shots);
        let name = if *it == a.iterations { "final.ckpt".to_string() } else { format!("ckpt_{it:06}.ckpt") };
        ck.save(&dir.file(&name))?;
    }
    save_grid(&shots, shots.len().min(10), 4, &dir.file("shots.png"))?;
    save_samples(&mut dir, "samples.png", &run.generator)?;
    dir.finish()
}

pub fn eval(run_dir: &Path) -> Result<PathBuf> {
    let mut dir = RunDir::open(run_dir)?;
    let cfg = load_echo(run_dir)?;
    let source = dir
        .manifest
        .facts
        .get("source")
        .cloned()
        .ok_or_else(|| Error::Input("run manifest names no source checkpoint".into()))?;
    let force = dir.manifest.facts.get("force").is_some_and(|f| f == "true");
    let models = load_source(Path::new(&source), &cfg, force)?;
    let ck = Checkpoint::load(&run_dir.join("final.ckpt"))?;
    ck.check_hash(&run_hash(&cfg.adapt, &cfg.model), force)?;
    let g = generator_from_checkpoint(&ck)?;
    let shots = ck.get_images("shots", Provenance::RealTarget)?;

    let e = &cfg.eval;
    let z = LatentBatch::sample(&mut ChaCha8Rng::seed_from_u64(e.seed), e.generated, cfg.model.z_dim);
    let generated = g.generate(&z, 128)?;
    let intra = intra_lpips(&generated, &shots, e.pair_budget, &models.feat_net, e.seed)?;
    let target = load_target(&cfg)?;
    let report = EvalReport {
        intra_lpips: intra.mean,
        standard_lpips: standard_lpips(&generated, e.standard_pairs, &models.feat_net, e.seed)?,
        frechet: frechet_feature_distance(&generated, &target.split(Split::Eval).images, &models.feat_net)?,
        p_t: realisticness_probe(&models.classifier, &g, &z)?,
        generated: e.generated,
        per_cluster: intra.per_cluster.to_vec(),
    };
    dir.write("eval_report.txt", report.to_text().as_bytes())?;
    dir.write("per_cluster.csv", report.per_cluster_csv().as_bytes())?;
    dir.finish()
}

pub fn probe(
    c: &Common,
    source: &Path,
    methods: &[String],
    shots: Option<usize>,
    seed: Option<u64>,
    force: bool,
) -> Result<PathBuf> {
    let methods: Vec<Method> = if methods.is_empty() {
        Method::ALL.to_vec()
    } else {
        methods.iter().map(|m| Method::from_str(m)).collect::<Result<_>>()?
    };
    let cfg = load_config(c, flag_overrides(None, shots, seed)?)?;
    let models = load_source(source, &cfg, force)?;
    let target = load_target(&cfg)?;
    let (shots, _) = draw_shots(&cfg, &target)?;

    let mut rows = csv::Writer::from_writer(Vec::new());
    rows.write_record(["method", "iteration", "p_t", "intra_lpips"])?;
    let mut per_method = Vec::new();
    let mut grids = Vec::new();
    let grid_z = grid_latents(cfg.model.z_dim).select(&(0..8).collect::<Vec<_>>());
    for m in &methods {
        let acfg = AdaptationConfig { method: *m, ..cfg.adapt.clone() };
        log::info!("probe: running {m}");
        let run = run_adaptation(&acfg, &models, &shots)?;
        for r in &run.series.rows {
            rows.write_record([m.name().to_string(), r.iteration.to_string(), r.p_t.to_string(), r.intra_lpips.to_string()])?;
        }
        per_method.push((*m, series_csv(&run)?));
        grids.push(run.generator.generate(&grid_z, 8)?);
    }
    let bytes = rows.into_inner().map_err(|e| Error::Io(e.into_error()))?;

    let mut dir = RunDir::create(&c.out, "probe", "probe", cfg.adapt.seed, c.config.as_deref(), &cfg)?;
    dir.manifest.facts.insert("source".into(), absolute(source));
    dir.manifest.facts.insert(
        "methods".into(),
        methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
    );
    dir.write("probe.csv", &bytes)?;
    for (m, csv) in per_method {
        dir.write(&format!("metrics_{}.csv", m.name()), csv.as_bytes())?;
    }
    let refs: Vec<&ImageBatch> = grids.iter().collect();
    save_grid(&ImageBatch::concat(&refs)?, 8, 4, &dir.file("samples.png"))?;
    save_grid(&shots, shots.len().min(10), 4, &dir.file("shots.png"))?;
    dir.finish()
}

pub fn mi_check(c: &Common, joint: &str, batch_sizes: &[usize], trials: Option<usize>) -> Result<PathBuf> {
    let mut extra = Vec::new();
    if let Some(t) = trials {
        extra.push(("mi.trials".to_string(), t.to_string()));
    }
    let cfg = load_config(c, extra)?;
    let j = cfg.mi.joint(joint)?;
    let mut reports: Vec<BoundReport> = Vec::new();
    for &n in batch_sizes {
        let (r, _) = verify_bound(&j, n, &cfg.mi)?;
        log::info!(
            "{joint} N={n}: bound {:.4} vs MI {:.4} (±{:.4}) holds={}",
            r.bound_value,
            r.exact_mi,
            r.epsilon,
            r.holds
        );
        reports.push(r);
    }
    let mut dir = RunDir::create(&c.out, &format!("mi-{joint}"), "mi-check", cfg.mi.seed, c.config.as_deref(), &cfg)?;
    let mut csv = format!("{}\n", BoundReport::CSV_HEADER);
    for r in &reports {
        dir.write(&format!("bound_report_n{}.txt", r.batch_size), r.to_text().as_bytes())?;
        csv.push_str(&r.csv_row());
    }
    dir.write("bound_reports.csv", csv.as_bytes())?;
    dir.manifest.facts.insert("all_hold".into(), reports.iter().all(|r| r.holds).to_string());
    dir.finish()
}
