use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use babelkit::detect_eval::{
    evaluate, harmonic_modality_map, load_detections, load_ground_truth, write_report_csv,
    write_report_json, ApMode, EvalConfig, ModalityRegistry, Unit, DEFAULT_IOU_THRESHOLDS,
};
use babelkit::grad_lab::{
    amp_stress, conditioning_sweep, detection_gradient_reports, initial_losses,
    proposition3_experiment, write_conditioning_csv, write_stability_csv, write_trace_csv,
    write_trajectories_csv, CoherenceResult, GradLabConfig, GradientReport, InitialLosses,
    LabError,
};
use babelkit::mixture::{draw_epoch, drawn_counts, expected_counts, write_manifest, MixtureRecipe};
use babelkit::pivot_align::{cross_modal_consistency, pretrain_align, AlignConfig, Encoder};
use serde::Serialize;

use crate::failure::Failure;
use crate::manifest::{write_json_atomic, RunManifest, MANIFEST_FILE};
use crate::{AlignArgs, EvalArgs, GradlabArgs, HmapArgs, SampleArgs};

fn out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

fn finish(
    mut manifest: RunManifest,
    started: Instant,
    path: &Path,
) -> Result<RunManifest, Failure> {
    manifest.duration_secs = started.elapsed().as_secs_f64();
    write_json_atomic(path, &manifest)?;
    Ok(manifest)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

pub fn eval(args: &EvalArgs, seed: Option<u64>) -> Result<RunManifest, Failure> {
    let started = Instant::now();
    let ap_mode: ApMode = args
        .ap_mode
        .parse()
        .map_err(|e| Failure::input(format!("--ap-mode: {e}")))?;
    let registry = ModalityRegistry::load(&args.registry)?;
    let gts = load_ground_truth(&args.gt)?;
    let dets = load_detections(&args.det)?;
    let config = EvalConfig {
        iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
        ap_mode,
    };
    let report = evaluate(&dets, &gts, &registry, &config)?;

    out_dir(&args.out)?;
    let json = args.out.join("report.json");
    let csv = args.out.join("report.csv");
    write_report_json(&report, &json)?;
    write_report_csv(&report, &csv)?;
    println!("{}", report.summary());

    let mut m = RunManifest::new("eval", Some(&args.registry), seed);
    m.inputs = vec![display(&args.gt), display(&args.det)];
    m.outputs = vec![display(&json), display(&csv)];
    finish(m, started, &args.out.join(MANIFEST_FILE))
}

/// H-mAP of percent values, rendered with 2 decimals.
pub fn hmap(args: &HmapArgs) -> Result<String, Failure> {
    let values = args
        .values
        .iter()
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Failure::input(format!("`{v}` is not a number")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let h = harmonic_modality_map(&values, Unit::Percent)?;
    Ok(format!("{h:.2}"))
}

#[derive(Serialize)]
struct TensorEntry {
    name: &'static str,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

/// Encoder weights as one flat array plus a shape table.
#[derive(Serialize)]
struct Checkpoint<'a> {
    dx: usize,
    nz: usize,
    de: usize,
    fusion: Option<Vec<usize>>,
    tensors: Vec<TensorEntry>,
    values: &'a [f64],
}

fn write_checkpoint(encoder: &Encoder, path: &Path) -> Result<(), Failure> {
    let names = ["w1", "b1", "w2", "b2"];
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (name, t) in names.into_iter().zip(encoder.params()) {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        });
        offset += t.len();
    }
    let values = encoder.flat();
    let ckpt = Checkpoint {
        dx: encoder.dx,
        nz: encoder.nz,
        de: encoder.de,
        fusion: encoder.fusion.clone().map(Vec::from),
        tensors,
        values: &values,
    };
    write_json_atomic(path, &ckpt)
}

#[derive(Serialize)]
struct ConsistencyRow {
    concept: String,
    modalities: [String; 2],
    untrained: f64,
    trained: f64,
}

#[derive(Serialize)]
struct ConsistencyReport {
    untrained_alpha: f64,
    trained_alpha: f64,
    pairs: Vec<ConsistencyRow>,
}

fn load_align_config(path: &Path) -> Result<AlignConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    let config: AlignConfig = serde_json::from_str(&text)
        .map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    config.validate()?;
    Ok(config)
}

pub fn align(args: &AlignArgs, seed: Option<u64>) -> Result<RunManifest, Failure> {
    let started = Instant::now();
    let mut config = load_align_config(&args.config)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let run = pretrain_align(&config)?;

    out_dir(&args.out)?;
    let trace_path = args.out.join("trace.csv");
    let mut w = csv::Writer::from_path(&trace_path)?;
    w.write_record(["step", "loss", "alpha"])?;
    for s in &run.trace {
        w.serialize((s.step, s.loss, s.alpha))?;
    }
    w.flush()?;

    let ckpt_path = args.out.join("checkpoint.json");
    write_checkpoint(&run.encoder, &ckpt_path)?;

    let untrained_alpha = run.setup.alpha(0);
    let mut pairs = Vec::new();
    let names: Vec<&str> = config.modalities.iter().map(|m| m.name.as_str()).collect();
    for concept in &config.concepts {
        for i in 0..names.len() {
            for j in i + 1..names.len() {
                let pair = (names[i], names[j]);
                pairs.push(ConsistencyRow {
                    concept: concept.clone(),
                    modalities: [pair.0.into(), pair.1.into()],
                    untrained: cross_modal_consistency(
                        &run.setup,
                        &run.initial,
                        concept,
                        pair,
                        untrained_alpha,
                    )?,
                    trained: cross_modal_consistency(
                        &run.setup,
                        &run.encoder,
                        concept,
                        pair,
                        run.final_alpha,
                    )?,
                });
            }
        }
    }
    let consistency_path = args.out.join("consistency.json");
    write_json_atomic(
        &consistency_path,
        &ConsistencyReport {
            untrained_alpha,
            trained_alpha: run.final_alpha,
            pairs,
        },
    )?;
    if let (Some(first), Some(last)) = (run.trace.first(), run.trace.last()) {
        println!(
            "steps={} loss {:.6} -> {:.6}",
            run.trace.len(),
            first.loss,
            last.loss
        );
    } else {
        println!("steps=0");
    }

    let mut m = RunManifest::new("align", Some(&args.config), Some(config.seed));
    m.outputs = vec![
        display(&trace_path),
        display(&ckpt_path),
        display(&consistency_path),
    ];
    finish(m, started, &args.out.join(MANIFEST_FILE))
}

/// Gradient report without the raw gradient vectors.
#[derive(Serialize)]
struct GradientSummary {
    modalities: Vec<String>,
    inner: Vec<Vec<f64>>,
    cosine: Vec<Vec<f64>>,
    joint_norm_sq: f64,
    sum_sq_norms: f64,
    cross_terms: f64,
    mean_pairwise_cosine: f64,
}

impl GradientSummary {
    fn new(r: GradientReport) -> Result<Self, LabError> {
        let mean_pairwise_cosine = r.mean_pairwise_cosine()?;
        Ok(Self {
            modalities: r.modalities,
            inner: r.inner,
            cosine: r.cosine,
            joint_norm_sq: r.joint_norm_sq,
            sum_sq_norms: r.sum_sq_norms,
            cross_terms: r.cross_terms,
            mean_pairwise_cosine,
        })
    }
}

#[derive(Serialize)]
struct InitialLossSummary {
    lambda: f64,
    seeds: Vec<InitialLosses>,
    mean_late_total: f64,
    mean_late_detection: f64,
    mean_two_stage: f64,
}

#[derive(Serialize)]
struct GradLabReport {
    seed: u64,
    pre_alignment: GradientSummary,
    post_alignment: GradientSummary,
    coherence: CoherenceResult,
    initial_losses: InitialLossSummary,
}

pub fn gradlab(args: &GradlabArgs, seed: Option<u64>) -> Result<RunManifest, Failure> {
    let started = Instant::now();
    let mut config = GradLabConfig::load(&args.config)?;
    if let Some(s) = seed {
        let n = config.coherence_seeds.len() as u64;
        config = config.with_seed(s);
        config.coherence_seeds = (s..s + n).collect();
    }
    out_dir(&args.out)?;
    let traces_dir = args.out.join("traces");
    out_dir(&traces_dir)?;
    let mut outputs: Vec<PathBuf> = Vec::new();

    let sweep = conditioning_sweep(&config.conditioning.spec, &config.conditioning.lambdas)?;
    let sweep_path = args.out.join("conditioning_sweep.csv");
    write_conditioning_csv(&sweep_path, &sweep)?;
    outputs.push(sweep_path);

    let (table, traces) = amp_stress(&config)?;
    let table_path = args.out.join("stability_table.csv");
    write_stability_csv(&table_path, &table)?;
    outputs.push(table_path);
    for t in &traces {
        let p = traces_dir.join(format!("trace_{}.csv", t.run_id));
        write_trace_csv(&p, t)?;
        outputs.push(p);
    }
    let traj_path = args.out.join("trajectories.csv");
    write_trajectories_csv(&traj_path, &traces)?;
    outputs.push(traj_path);

    let report_seed = config.align.seed;
    let (pre, post) = detection_gradient_reports(&config.align, &config.finetune, report_seed)?;
    let coherence =
        proposition3_experiment(&config.align, &config.finetune, &config.coherence_seeds)?;
    let lambda = config.stability.lambdas.iter().copied().fold(0.0, f64::max);
    let seeds = config
        .coherence_seeds
        .iter()
        .map(|&s| initial_losses(&config, lambda, s))
        .collect::<Result<Vec<_>, _>>()?;
    let n = seeds.len().max(1) as f64;
    let mean = |f: fn(&InitialLosses) -> f64| seeds.iter().map(f).sum::<f64>() / n;
    let initial = InitialLossSummary {
        lambda,
        mean_late_total: mean(|s| s.late_total),
        mean_late_detection: mean(|s| s.late_detection),
        mean_two_stage: mean(|s| s.two_stage),
        seeds,
    };
    let report = GradLabReport {
        seed: report_seed,
        pre_alignment: GradientSummary::new(pre)?,
        post_alignment: GradientSummary::new(post)?,
        coherence,
        initial_losses: initial,
    };
    let report_path = args.out.join("gradient_report.json");
    write_json_atomic(&report_path, &report)?;
    outputs.push(report_path);

    for row in &table.rows {
        println!("{} {}", row.run_id, row.verdict.as_str());
    }
    println!(
        "coherence mean cosine {:.4} -> {:.4}",
        report.coherence.pre_alignment_mean_cosine, report.coherence.post_alignment_mean_cosine
    );

    let mut m = RunManifest::new("gradlab", Some(&args.config), Some(report_seed));
    m.outputs = outputs.iter().map(|p| display(p)).collect();
    finish(m, started, &args.out.join(MANIFEST_FILE))
}

/// Run manifest path for a sample output file.
pub fn sample_manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".run.json");
    out.with_file_name(name)
}

pub fn sample(args: &SampleArgs, seed: Option<u64>) -> Result<RunManifest, Failure> {
    let started = Instant::now();
    let recipe = MixtureRecipe::load(&args.recipe)?;
    let seed = seed.unwrap_or(recipe.seed);
    let draws = draw_epoch(&recipe, seed);
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        out_dir(parent)?;
    }
    write_manifest(&draws, &args.out)?;

    let expected: BTreeMap<String, f64> = expected_counts(&recipe);
    println!("dataset,expected,drawn");
    for (name, drawn) in drawn_counts(&draws, &recipe)? {
        println!("{name},{:.1},{drawn}", expected[&name]);
    }

    let mut m = RunManifest::new("sample", Some(&args.recipe), Some(seed));
    m.outputs = vec![display(&args.out)];
    finish(m, started, &sample_manifest_path(&args.out))
}
