use std::path::{Path, PathBuf};

use flowguide::evalagg::{parse_records, Averaging, RankTable};
use flowguide::flow::{cfm_loss, sample as run_sample, sample_guided, Condition, SamplerConfig, VelocityField, ZeroField};
use flowguide::gradcheck::{gradient_sweep, GradTarget};
use flowguide::guidance::{appearance_target, GuidanceObjective};
use flowguide::io::{
    docs, export_ply as write_ply, read_bytes, read_ffld, read_slat, shape_digest, write_ffld, write_slat,
    ClustersFile, CorrespondenceFile, FeatureFile, ParamsFile,
};
use flowguide::optim::OptimizerConfig;
use flowguide::partition::{
    build_correspondence, cosegment, kmeans, ClusterAssignment, CorrespondenceMap, KMeansConfig, ShapeFeatures,
};
use flowguide::rng::derive_seed;
use flowguide::slat::StructuredLatent;
use flowguide::toyflows::{
    train_cfm, velocity_mse, Architecture, FlowData, GaussianField, GaussianFlowSpec, MixtureField, TrainConfig,
    TrainableField,
};
use flowguide::Error;
use serde_json::json;

use crate::config::{PartitionSection, RunConfig, SamplerSection, VelocityConfig};
use crate::manifest::Manifest;
use crate::{
    ArchArg, ClusterArgs, CorrespondArgs, EvalArgs, ExportArgs, Failure, FormatArg, GradcheckArgs, SampleArgs,
    SynthArgs, TrainToyArgs, TransferArgs, SEED_ENV,
};

type CmdResult = Result<(), Failure>;

fn ensure_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("cannot create {}: {e}", dir.display())))
}

fn out_path(explicit: Option<PathBuf>, dir: &Path, name: &str) -> PathBuf {
    explicit.unwrap_or_else(|| dir.join(name))
}

/// Flag, then config, then `FLOWGUIDE_SEED`, then zero.
fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn synth(a: SynthArgs) -> CmdResult {
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(Failure::Usage(format!("--noise {} must be finite and ≥ 0", a.noise)));
    }
    let dir = a.out.out_dir;
    ensure_dir(&dir)?;
    let mut m = Manifest::start(
        "synth",
        &json!({ "resolution": a.resolution, "channels": a.channels, "noise": a.noise, "seed": a.seed }),
    )?;
    m.seed("seed", a.seed);
    for (variant, name) in [(0, "query"), (1, "appearance")] {
        let shape = crate::synth::chair_shape(variant, a.resolution, a.channels, a.noise, a.seed, name)?;
        let slat = dir.join(format!("{name}.slat"));
        write_slat(&slat, &shape.latent)?;
        m.output(&slat)?;
        let ffld = dir.join(format!("{name}.ffld"));
        write_ffld(&ffld, &FeatureFile::for_shape(&shape.latent, shape.features)?)?;
        m.output(&ffld)?;
        println!("{}: {} voxels", slat.display(), shape.latent.len());
    }
    m.finish(&dir)?;
    Ok(())
}

pub fn cluster(a: ClusterArgs) -> CmdResult {
    if a.features.len() > 2 {
        return Err(Failure::Usage("--features takes one or two files".into()));
    }
    let dir = a.out_dir.out_dir;
    ensure_dir(&dir)?;
    let out = out_path(a.out, &dir, "clusters.json");
    let mut m = Manifest::start(
        "cluster",
        &json!({ "features": a.features, "k": a.k, "seed": a.seed, "max_iters": a.max_iters, "out": out }),
    )?;
    m.seed("kmeans", a.seed);
    let config = KMeansConfig {
        max_iters: a.max_iters,
        ..KMeansConfig::new(a.k, a.seed)
    };

    let mut files = Vec::new();
    for path in &a.features {
        let digest = m.input(path)?;
        files.push((read_ffld(path)?, digest));
    }
    let assignments = if let [(q, _), (ap, _)] = files.as_slice() {
        let (qa, aa) = cosegment(&q.field, &ap.field, &config)?;
        vec![qa, aa]
    } else {
        vec![kmeans(&files[0].0.field, &config)?]
    };
    let sources = assignments
        .iter()
        .zip(&files)
        .map(|(asg, (file, digest))| (asg, digest.clone(), shape_digest(file.resolution, &file.positions)))
        .collect();
    ClustersFile::new(a.seed, sources)?.write(&out)?;
    m.output(&out)?;
    let history = &assignments[0].inertia_history;
    println!(
        "k = {}, {} iterations, inertia {:.6}",
        a.k,
        history.len(),
        history.last().copied().unwrap_or(0.0)
    );
    m.finish(&dir)?;
    Ok(())
}

fn load_shape(path: &Path, m: &mut Manifest) -> Result<(StructuredLatent, String), Failure> {
    let digest = m.input(path)?;
    Ok((read_slat(path)?, digest))
}

fn load_features(path: &Path, shape: &StructuredLatent, m: &mut Manifest) -> Result<FeatureFile, Failure> {
    m.input(path)?;
    let file = read_ffld(path)?;
    file.ensure_matches(shape)?;
    Ok(file)
}

pub fn correspond(a: CorrespondArgs) -> CmdResult {
    let dir = a.out_dir.out_dir;
    ensure_dir(&dir)?;
    let out = out_path(a.out, &dir, "correspondence.json");
    let method: flowguide::partition::CorrespondenceMethod = a.mode.into();
    let mut m = Manifest::start(
        "correspond",
        &json!({
            "query_slat": a.query_slat, "query_features": a.query_features,
            "appearance_slat": a.appearance_slat, "appearance_features": a.appearance_features,
            "mode": method, "clusters": a.clusters, "k": a.k, "seed": a.seed, "out": out,
        }),
    )?;
    let (query, query_digest) = load_shape(&a.query_slat, &mut m)?;
    let (appearance, appearance_digest) = load_shape(&a.appearance_slat, &mut m)?;
    let qf = load_features(&a.query_features, &query, &mut m)?;
    let af = load_features(&a.appearance_features, &appearance, &mut m)?;

    let clusters = match (method, &a.clusters) {
        (flowguide::partition::CorrespondenceMethod::CosegNn, Some(path)) => {
            m.input(path)?;
            let file = ClustersFile::read(path)?;
            Some((
                file.assignment_for_shape(&shape_digest(query.resolution(), query.positions()))?,
                file.assignment_for_shape(&shape_digest(appearance.resolution(), appearance.positions()))?,
            ))
        }
        (flowguide::partition::CorrespondenceMethod::CosegNn, None) => {
            m.seed("kmeans", a.seed);
            Some(cosegment(&qf.field, &af.field, &KMeansConfig::new(a.k, a.seed))?)
        }
        _ => None,
    };
    let map = build_correspondence(
        ShapeFeatures {
            shape: &query,
            features: &qf.field,
            clusters: clusters.as_ref().map(|c| &c.0),
        },
        ShapeFeatures {
            shape: &appearance,
            features: &af.field,
            clusters: clusters.as_ref().map(|c| &c.1),
        },
        method,
    )?;
    CorrespondenceFile::new(&map, query_digest, appearance_digest, appearance.len()).write(&out)?;
    m.output(&out)?;
    println!("{} query voxels matched ({})", map.target.len(), method);
    m.finish(&dir)?;
    Ok(())
}

fn velocity_field(config: &RunConfig, m: &mut Manifest) -> Result<Box<dyn VelocityField>, Failure> {
    Ok(match &config.velocity {
        VelocityConfig::Zero => Box::new(ZeroField),
        VelocityConfig::Gaussian { mean, std } => Box::new(GaussianField(GaussianFlowSpec::new(mean.clone(), *std)?)),
        VelocityConfig::Mixture { components } => {
            for c in components {
                c.validate()?;
            }
            if components.is_empty() {
                return Err(Error::EmptyInput("mixture components").into());
            }
            Box::new(MixtureField(components.clone()))
        }
        VelocityConfig::Trained { params } => {
            m.input(params)?;
            Box::new(ParamsFile::read(params)?.to_field()?)
        }
    })
}

fn condition(config: &RunConfig) -> Result<Condition, Failure> {
    Ok(match &config.condition {
        Some(v) => Condition::vector(v.clone())?,
        None => Condition::None,
    })
}

/// Clusters for the query and, when appearance features are given, the
/// query → appearance correspondence.
fn run_partition(
    p: &PartitionSection,
    query: &StructuredLatent,
    appearance: Option<&StructuredLatent>,
    m: &mut Manifest,
) -> Result<(ClusterAssignment, Option<CorrespondenceMap>), Failure> {
    m.seed("kmeans", p.seed);
    let config = KMeansConfig::new(p.k, p.seed);
    let qf = load_features(&p.query_features, query, m)?;
    match (&p.appearance_features, appearance) {
        (Some(path), Some(app)) => {
            let af = load_features(path, app, m)?;
            let (qa, aa) = cosegment(&qf.field, &af.field, &config)?;
            let map = build_correspondence(
                ShapeFeatures {
                    shape: query,
                    features: &qf.field,
                    clusters: Some(&qa),
                },
                ShapeFeatures {
                    shape: app,
                    features: &af.field,
                    clusters: Some(&aa),
                },
                p.method,
            )?;
            Ok((qa, Some(map)))
        }
        _ => Ok((kmeans(&qf.field, &config)?, None)),
    }
}

fn guidance_spec(
    config: &RunConfig,
    query: &StructuredLatent,
    query_digest: &str,
    m: &mut Manifest,
) -> Result<flowguide::guidance::GuidanceSpec, Failure> {
    let mut spec = config.guidance.to_spec();
    let objective = spec.objective;
    if objective == GuidanceObjective::None {
        return Ok(spec);
    }
    let appearance = match (&config.appearance, objective) {
        (Some(a), GuidanceObjective::Appearance | GuidanceObjective::GlobalPool) => {
            Some(load_shape(&a.slat, m)?)
        }
        (None, GuidanceObjective::Appearance | GuidanceObjective::GlobalPool) => {
            return Err(Failure::Data(format!(
                "{objective:?} guidance needs an `appearance` section in the config"
            )))
        }
        _ => None,
    };
    let partitioned = match &config.partition {
        Some(p) => Some(run_partition(p, query, appearance.as_ref().map(|a| &a.0), m)?),
        None => None,
    };

    match objective {
        GuidanceObjective::None => {}
        GuidanceObjective::Appearance => {
            let (app, app_digest) = appearance.expect("checked above");
            let corr_path = config.appearance.as_ref().and_then(|a| a.correspondence.as_ref());
            let map = match (corr_path, partitioned.and_then(|p| p.1)) {
                (Some(path), _) => {
                    m.input(path)?;
                    let file = CorrespondenceFile::read(path)?;
                    file.check_sources(query_digest, &app_digest)?;
                    if file.appearance_voxels != app.len() || file.query_voxels != query.len() {
                        return Err(Error::SchemaMismatch(format!(
                            "{} maps {} → {} voxels, shapes have {} and {}",
                            path.display(),
                            file.query_voxels,
                            file.appearance_voxels,
                            query.len(),
                            app.len()
                        ))
                        .into());
                    }
                    file.to_map()?
                }
                (None, Some(map)) => map,
                (None, None) => return Err(Error::MissingTarget.into()),
            };
            spec.appearance_target = Some(appearance_target(app.latents(), &map)?);
        }
        GuidanceObjective::GlobalPool => {
            spec.appearance_values = Some(appearance.expect("checked above").0.latents().clone());
        }
        GuidanceObjective::Structure => {
            let labels = match (&config.clusters, partitioned) {
                (Some(path), _) => {
                    m.input(path)?;
                    ClustersFile::read(path)?
                        .assignment_for_shape(&shape_digest(query.resolution(), query.positions()))?
                }
                (None, Some((qa, _))) => qa,
                (None, None) => return Err(Error::MissingLabels.into()),
            };
            spec.cluster_labels = Some(labels);
        }
    }
    Ok(spec)
}

fn apply_overrides(config: &mut RunConfig, seed: Option<u64>, steps: Option<usize>) -> Result<u64, Failure> {
    let seed = resolve_seed(seed, config.sampler.seed)?;
    config.sampler.seed = Some(seed);
    if let Some(s) = steps {
        config.sampler.steps = s;
    }
    Ok(seed)
}

pub fn transfer(a: TransferArgs) -> CmdResult {
    let dir = a.out_dir.out_dir;
    ensure_dir(&dir)?;
    let mut config = RunConfig::load(&a.config)?;
    let seed = apply_overrides(&mut config, a.seed, a.steps)?;
    if let Some(w) = a.weight {
        config.guidance.weight = w;
    }
    let out = out_path(a.out, &dir, "result.slat");
    let ply = out_path(a.ply, &dir, "result.ply");
    let report_path = dir.join("report.json");

    let mut m = Manifest::start("transfer", &config)?;
    m.seed("sampler", seed);
    m.input(&a.config)?;
    let (query, query_digest) = load_shape(&config.query_slat, &mut m)?;
    let field = velocity_field(&config, &mut m)?;
    let condition = condition(&config)?;
    let spec = guidance_spec(&config, &query, &query_digest, &mut m)?;

    let sampler = SamplerConfig::new(config.sampler.steps, seed).with_guidance(spec);
    let (state, report) = sample_guided(&query, &*field, &condition, &sampler)?;
    let result = state.to_latent()?;
    write_slat(&out, &result)?;
    write_ply(&result, &ply)?;
    docs::write_json(&report_path, &report)?;
    for p in [&out, &ply, &report_path] {
        m.output(p)?;
    }
    if let (Some(first), Some(last)) = (report.records.first(), report.records.last()) {
        println!(
            "{:?} guidance: loss {:.6e} → {:.6e} over {} applications",
            report.objective,
            first.loss_before,
            last.loss_after,
            report.records.len()
        );
    }
    println!("wrote {}", out.display());
    m.finish(&dir)?;
    Ok(())
}

pub fn sample(a: SampleArgs) -> CmdResult {
    let dir = a.out_dir.out_dir;
    ensure_dir(&dir)?;
    let mut config = match (&a.config, &a.query_slat) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(q)) => RunConfig {
            query_slat: q.clone(),
            velocity: VelocityConfig::Zero,
            condition: None,
            sampler: SamplerSection::default(),
            guidance: Default::default(),
            appearance: None,
            clusters: None,
            partition: None,
        },
        (None, None) => return Err(Failure::Usage("give --config or --query-slat".into())),
    };
    let seed = apply_overrides(&mut config, a.seed, a.steps)?;
    let out = out_path(a.out, &dir, "result.slat");

    let mut m = Manifest::start("sample", &json!({ "velocity": config.velocity, "condition": config.condition,
        "query_slat": config.query_slat, "sampler": config.sampler, "out": out, "ply": a.ply }))?;
    m.seed("sampler", seed);
    if let Some(path) = &a.config {
        m.input(path)?;
    }
    let (query, _) = load_shape(&config.query_slat, &mut m)?;
    let field = velocity_field(&config, &mut m)?;
    let condition = condition(&config)?;
    let state = run_sample(&query, &*field, &condition, &SamplerConfig::new(config.sampler.steps, seed))?;
    let result = state.to_latent()?;
    write_slat(&out, &result)?;
    m.output(&out)?;
    if let Some(ply) = &a.ply {
        write_ply(&result, ply)?;
        m.output(ply)?;
    }
    println!("wrote {}", out.display());
    m.finish(&dir)?;
    Ok(())
}

fn parse_mean(text: &str) -> Result<Vec<f64>, Failure> {
    text.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Failure::Usage(format!("--mean {text:?}: {v:?} is not a number")))
        })
        .collect()
}

pub fn train_toy(a: TrainToyArgs) -> CmdResult {
    if a.mean.len() != a.std.len() {
        return Err(Failure::Usage(format!(
            "{} --mean values but {} --std values",
            a.mean.len(),
            a.std.len()
        )));
    }
    let dir = a.out_dir.out_dir;
    ensure_dir(&dir)?;
    let out = out_path(a.out, &dir, "params.json");
    let report_path = dir.join("train_report.json");
    let architecture = match a.arch {
        ArchArg::Affine => Architecture::Affine,
        ArchArg::Mlp1 => Architecture::Mlp1 { hidden: a.hidden },
    };
    let components = a
        .mean
        .iter()
        .zip(&a.std)
        .map(|(mean, &std)| Ok(GaussianFlowSpec::new(parse_mean(mean)?, std)?))
        .collect::<Result<Vec<_>, Failure>>()?;
    let data = if components.len() == 1 {
        FlowData::Gaussian(components[0].clone())
    } else {
        FlowData::Mixture(components.clone())
    };
    let optimizer = OptimizerConfig {
        learning_rate: a.lr,
        ..OptimizerConfig::default()
    };
    let mut m = Manifest::start(
        "train-toy",
        &json!({
            "components": components, "architecture": architecture, "steps": a.steps,
            "batch_size": a.batch_size, "optimizer": optimizer, "eval_samples": a.eval_samples,
            "seed": a.seed, "out": out,
        }),
    )?;
    let (init_seed, train_seed, eval_seed) = (derive_seed(a.seed, 0), derive_seed(a.seed, 1), derive_seed(a.seed, 2));
    m.seed("init", init_seed);
    m.seed("train", train_seed);
    m.seed("eval", eval_seed);

    let field = TrainableField::new(architecture, data.channels(), data.condition_dim(), init_seed)?;
    let train = TrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        seed: train_seed,
        optimizer,
    };
    let (trained, curve) = train_cfm(&field, &data, &train)?;
    let held_out = data.draw_batch(a.eval_samples, eval_seed);
    let analytic: Box<dyn VelocityField> = match &data {
        FlowData::Gaussian(g) => Box::new(GaussianField(g.clone())),
        FlowData::Mixture(c) => Box::new(MixtureField(c.clone())),
    };
    let mse = velocity_mse(&trained, &data, &held_out)?;
    let trained_loss = cfm_loss(&trained, &held_out)?;
    let analytic_loss = cfm_loss(&*analytic, &held_out)?;

    ParamsFile::from_field(&trained).write(&out)?;
    docs::write_json(
        &report_path,
        &json!({
            "curve": curve, "velocity_mse": mse,
            "cfm_loss_trained": trained_loss, "cfm_loss_analytic": analytic_loss,
        }),
    )?;
    m.output(&out)?;
    m.output(&report_path)?;
    println!("held-out velocity MSE {mse:.6}");
    println!("held-out CFM loss: trained {trained_loss:.6}, analytic {analytic_loss:.6}");
    m.finish(&dir)?;
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    if a.instances == 0 {
        return Err(Failure::Usage("--instances must be positive".into()));
    }
    let dir = a.out_dir.out_dir;
    ensure_dir(&dir)?;
    let targets: Vec<GradTarget> = if a.target.is_empty() {
        GradTarget::ALL.to_vec()
    } else {
        a.target.iter().map(|&t| t.into()).collect()
    };
    let mut m = Manifest::start(
        "gradcheck",
        &json!({ "instances": a.instances, "targets": targets, "threshold": a.threshold, "seed": a.seed }),
    )?;
    m.seed("instances", a.seed);

    let mut rows = Vec::new();
    let mut failed = Vec::new();
    for target in targets {
        let r = gradient_sweep(target, a.instances, a.seed)?;
        let threshold = a.threshold.unwrap_or(target.tolerance());
        let passed = r.max_relative_error < threshold;
        println!(
            "{:<22} max rel err {:.3e}  threshold {:.0e}  {}",
            target.as_str(),
            r.max_relative_error,
            threshold,
            if passed { "ok" } else { "FAILED" }
        );
        if !passed {
            failed.push(target.as_str());
        }
        rows.push(json!({
            "target": target, "instances": r.instances, "max_relative_error": r.max_relative_error,
            "worst_instance": r.worst_instance, "threshold": threshold, "passed": passed,
        }));
    }
    let report = dir.join("gradcheck.json");
    docs::write_json(&report, &rows)?;
    m.output(&report)?;
    m.finish(&dir)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

pub fn eval_aggregate(a: EvalArgs) -> CmdResult {
    let dir = a.out_dir.out_dir;
    ensure_dir(&dir)?;
    let averaging = if a.flat { Averaging::Flat } else { Averaging::ViewThenObject };
    let mut m = Manifest::start(
        "eval-aggregate",
        &json!({ "records": a.records, "strict": !a.lenient, "averaging": if a.flat { "flat" } else { "view_then_object" } }),
    )?;
    m.input(&a.records)?;
    let bytes = read_bytes(&a.records)?;
    let parsed = parse_records(bytes.as_slice(), !a.lenient)?;
    for (line, e) in &parsed.rejected {
        eprintln!("warning: skipped line {line}: {e}");
    }
    let table = RankTable::build(&parsed.records, averaging)?;
    let (text, csv) = (table.render_text(), table.render_csv());
    let text_path = dir.join("ranks.txt");
    let csv_path = dir.join("ranks.csv");
    flowguide::io::write_bytes(&text_path, text.as_bytes())?;
    flowguide::io::write_bytes(&csv_path, csv.as_bytes())?;
    m.output(&text_path)?;
    m.output(&csv_path)?;
    match a.format {
        FormatArg::Text => print!("{text}"),
        FormatArg::Csv => print!("{csv}"),
    }
    m.finish(&dir)?;
    Ok(())
}

pub fn export_ply(a: ExportArgs) -> CmdResult {
    let dir = a.out_dir.out_dir;
    ensure_dir(&dir)?;
    let out = out_path(a.out, &dir, "result.ply");
    let mut m = Manifest::start("export-ply", &json!({ "slat": a.slat, "out": out }))?;
    let (latent, _) = load_shape(&a.slat, &mut m)?;
    write_ply(&latent, &out)?;
    m.output(&out)?;
    println!("wrote {} ({} vertices)", out.display(), latent.len());
    m.finish(&dir)?;
    Ok(())
}
