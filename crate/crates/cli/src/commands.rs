// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use typolens::analysis::{self, IdPoint, SinkReport};
use typolens::circuit::{self, AlphaPoint, CircuitBuild};
use typolens::datakit::{
    PlantedHead, PlantedLayout, PlantedRegion, RegionPlacement, ZeroShotSummary,
};
use typolens::probe::{self, ProbeConfig, ProbePoint, ProbeTarget};
use typolens::score::{self, ScoreMatrix};
use typolens::vit::{CaptureFlags, HeadId, InterventionSpec};
use typolens::{
    gen_planted_model, gen_synthetic_dataset, load_dyslexic, zero_shot_classify, Circuit,
    ClassPrototypes, Dataset, DyslexicModel, PlantedConfig, RegionMask, SynthConfig,
};

use crate::report::{self, opt, Csv};

fn load_model(path: &Path) -> Result<DyslexicModel> {
    let m = load_dyslexic(path).with_context(|| format!("loading weights {}", path.display()))?;
    if let Some(c) = &m.circuit {
        eprintln!(
            "note: applying circuit sidecar ({} heads) from {}",
            c.len(),
            circuit::sidecar_path(path).display()
        );
    }
    Ok(m)
}

/// Weights for analyses that read the unmodified encoder.
fn load_plain(path: &Path, what: &str) -> Result<typolens::VitWeights> {
    let m = load_model(path)?;
    if m.circuit.is_some() {
        eprintln!("note: {what} runs on the base weights; the sidecar circuit is not applied");
    }
    Ok(m.weights)
}

fn load_data(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn load_protos(path: &Path) -> Result<ClassPrototypes> {
    ClassPrototypes::load(path).with_context(|| format!("loading prototypes {}", path.display()))
}

fn load_circuit(path: &Path) -> Result<Circuit> {
    Circuit::read(path).with_context(|| format!("loading circuit {}", path.display()))
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn union(a: &InterventionSpec, b: &InterventionSpec) -> InterventionSpec {
    InterventionSpec::ablate(a.ablate.iter().chain(&b.ablate).copied())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    typo_classes: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    /// `fixed-bottom` or `random`.
    #[arg(long, default_value = "fixed-bottom")]
    region: RegionPlacement,
    #[arg(long, default_value_t = 1)]
    region_rows: usize,
    /// Defaults to the full grid width.
    #[arg(long)]
    region_cols: Option<usize>,
    #[arg(long, default_value_t = 0.02)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct GenDataReport {
    config: SynthConfig,
    clean_manifest: String,
    typo_manifest: String,
    tokens: usize,
    mean_mask_tokens: f64,
    uniform_expected_score: f64,
}

pub fn gen_data(out: &Path, a: GenDataArgs) -> Result<()> {
    let cfg = SynthConfig {
        n: a.n,
        classes: a.classes,
        typo_classes: a.typo_classes,
        image_size: a.image_size,
        patch_size: a.patch_size,
        region: a.region,
        region_rows: a.region_rows,
        region_cols: a.region_cols,
        noise: a.noise,
        seed: a.seed,
    };
    let ds = gen_synthetic_dataset(&cfg)?;
    let clean = ds.clean.save(out, "clean")?;
    let typo = ds.typo.save(out, "typo")?;
    let masks = ds
        .typo
        .entries()
        .iter()
        .map(|e| e.region_mask())
        .collect::<typolens::Result<Vec<RegionMask>>>()?;
    let rep = GenDataReport {
        tokens: cfg.tokens(),
        mean_mask_tokens: masks.iter().map(|m| m.count() as f64).sum::<f64>() / masks.len().max(1) as f64,
        uniform_expected_score: score::expected_uniform_score(&masks)?,
        clean_manifest: file_name(&clean),
        typo_manifest: file_name(&typo),
        config: cfg,
    };
    report::json(out, "gen_data.json", &rep)?;
    println!(
        "wrote {} clean and {} typographic samples to {} (uniform score {:.4})",
        ds.clean.len(),
        ds.typo.len(),
        out.display(),
        rep.uniform_expected_score
    );
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct GenPlantedArgs {
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 4)]
    patch_size: usize,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 6)]
    typo_classes: usize,
    /// Planted head as `layer:head`; repeatable.
    #[arg(long = "planted", default_value = "1:2")]
    planted: Vec<HeadId>,
    /// Restrict planted heads to the bottom N grid rows.
    #[arg(long)]
    bottom_rows: Option<usize>,
    /// Head that carries object identity to cls.
    #[arg(long)]
    gatherer: Option<HeadId>,
    #[arg(long, default_value_t = 100.0)]
    logit_scale: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
struct PlantedReport {
    weights: String,
    prototypes: String,
    model_hash: String,
    planted: Vec<HeadId>,
    gatherer: HeadId,
    layout: PlantedLayout,
    config: PlantedConfig,
}

pub fn gen_planted(out: &Path, a: GenPlantedArgs) -> Result<()> {
    let region = a.bottom_rows.map_or(PlantedRegion::Anywhere, PlantedRegion::BottomRows);
    let cfg = PlantedConfig {
        layers: a.layers,
        heads: a.heads,
        width: a.width,
        image_size: a.image_size,
        patch_size: a.patch_size,
        classes: a.classes,
        typo_classes: a.typo_classes,
        planted: a.planted.iter().map(|&head| PlantedHead { head, region }).collect(),
        gatherer: a.gatherer,
        embed_dim: None,
        logit_scale: a.logit_scale,
        seed: a.seed,
    };
    let pm = gen_planted_model(&cfg)?;
    let weights = out.join("model.safetensors");
    let protos = out.join("prototypes.safetensors");
    pm.weights.save(&weights)?;
    pm.prototypes.save(&protos)?;
    let rep = PlantedReport {
        weights: file_name(&weights),
        prototypes: file_name(&protos),
        model_hash: pm.weights.model_hash(),
        planted: pm.planted_heads(),
        gatherer: pm.gatherer,
        layout: pm.layout.clone(),
        config: cfg,
    };
    report::json(out, "planted.json", &rep)?;
    let heads: Vec<String> = rep.planted.iter().map(ToString::to_string).collect();
    println!(
        "planted model ({} layers x {} heads) with circuit [{}] written to {}",
        a.layers,
        a.heads,
        heads.join(", "),
        weights.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ScoreArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Typographic manifest (every sample needs a non-empty mask).
    #[arg(long)]
    manifest: PathBuf,
}

pub fn score(out: &Path, a: ScoreArgs) -> Result<()> {
    let m = load_model(&a.weights)?;
    let data = load_data(&a.manifest)?;
    let s = score::typo_attention_score_with(&m.weights, &data, &m.intervention())?;
    report::json(out, "score_matrix.json", &s)?;
    let mut csv = Csv::new(&["layer", "head", "score"]);
    for l in 0..s.layers {
        for h in 0..s.heads {
            csv.row(&[&l, &h, &s.get(HeadId::new(l, h))]);
        }
    }
    csv.write(out, "score_matrix.csv")?;
    println!("mean score {:.4} over {} heads", s.mean, s.scores.len());
    for (h, v) in s.ranked().into_iter().take(5) {
        let mark = if v >= 3.0 * s.mean { "  (>= 3x mean)" } else { "" };
        println!("  {h:>6}  {v:.4}{mark}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ProbeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// `image` or `typo`.
    #[arg(long, default_value = "typo")]
    target: ProbeTarget,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    l2: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write every fitted probe under `probes/`.
    #[arg(long)]
    export: bool,
}

#[derive(Serialize)]
struct ProbeReport {
    target: ProbeTarget,
    config: ProbeConfig,
    points: Vec<ProbePoint>,
}

fn target_name(t: ProbeTarget) -> &'static str {
    match t {
        ProbeTarget::ImageLabel => "image",
        ProbeTarget::TypoLabel => "typo",
    }
}

pub fn probe(out: &Path, a: ProbeArgs) -> Result<()> {
    let w = load_plain(&a.weights, "probe")?;
    let data = load_data(&a.manifest)?;
    let cfg = ProbeConfig {
        epochs: a.epochs,
        lr: a.lr,
        l2: a.l2,
        seed: a.seed,
        ..ProbeConfig::default()
    };
    let fitted = probe::probe_curve_models(&w, &data, a.target, &cfg)?;
    let name = target_name(a.target);
    if a.export {
        let dir = out.join("probes");
        std::fs::create_dir_all(&dir)?;
        for (p, model) in &fitted {
            probe::export_probe(model, p.accuracy, &dir, &format!("{name}_{}", p.capture_point))?;
        }
    }
    let points: Vec<ProbePoint> = fitted.into_iter().map(|(p, _)| p).collect();
    let mut csv = Csv::new(&["capture_point", "accuracy", "train_accuracy", "converged", "epochs"]);
    for p in &points {
        csv.row(&[&p.capture_point, &p.accuracy, &p.train_accuracy, &p.converged, &p.epochs]);
    }
    csv.write(out, &format!("probe_{name}.csv"))?;
    report::json(
        out,
        &format!("probe_{name}.json"),
        &ProbeReport {
            target: a.target,
            config: cfg,
            points: points.clone(),
        },
    )?;
    println!("{name} probe accuracy (held out):");
    for p in &points {
        let note = if p.converged { "" } else { "  (epoch cap)" };
        println!("  {:<14} {:.3}{note}", p.capture_point.to_string(), p.accuracy);
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct BuildCircuitArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    prototypes: PathBuf,
    /// Clean manifest the control split is drawn from.
    #[arg(long)]
    control: PathBuf,
    /// Score matrix from `score`; computed from `--manifest` when absent.
    #[arg(long, required_unless_present = "manifest")]
    scores: Option<PathBuf>,
    /// Typographic manifest for scoring.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = circuit::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Class-balanced fraction of `--control` used as the control split.
    #[arg(long, default_value_t = circuit::DEFAULT_CONTROL_FRACTION)]
    control_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn build_circuit(out: &Path, a: BuildCircuitArgs) -> Result<()> {
    let w = load_plain(&a.weights, "build-circuit")?;
    let protos = load_protos(&a.prototypes)?;
    let scores = match (&a.scores, &a.manifest) {
        (Some(p), _) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            ScoreMatrix::from_json(&text)?
        }
        (None, Some(m)) => score::typo_attention_score(&w, &load_data(m)?)?,
        (None, None) => bail!("either --scores or --manifest is required"),
    };
    let control = load_data(&a.control)?.balanced_subset(a.control_fraction, a.seed)?;
    let b: CircuitBuild = circuit::build_circuit(&w, &scores, &control, &protos, a.epsilon)?;
    report::json(out, "circuit.json", &b.circuit)?;
    report::json(out, "circuit_build.json", &b)?;
    let mut csv = Csv::new(&["layer", "head", "score", "control_acc", "delta_acc", "accepted"]);
    for s in &b.steps {
        csv.row(&[&s.layer, &s.head, &s.score, &s.control_acc, &s.delta_acc, &s.accepted]);
    }
    csv.write(out, "circuit_steps.csv")?;
    let c = &b.circuit;
    let heads: Vec<String> = c.head_ids().iter().map(ToString::to_string).collect();
    println!(
        "circuit of {} heads [{}] on {} control samples; control accuracy {:.4} -> {:.4} (epsilon {})",
        c.len(),
        heads.join(", "),
        control.len(),
        c.control_acc_base,
        c.control_acc_final,
        c.epsilon
    );
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct AblateEvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    prototypes: PathBuf,
    /// Heads to ablate on top of any sidecar circuit; none when omitted.
    #[arg(long)]
    circuit: Option<PathBuf>,
    /// Manifest to evaluate; repeatable.
    #[arg(long = "manifest", required = true)]
    manifests: Vec<PathBuf>,
}

#[derive(Serialize)]
struct EvalRow {
    dataset: String,
    base: ZeroShotSummary,
    ablated: ZeroShotSummary,
    delta_acc_image: f64,
}

#[derive(Serialize)]
struct AblateReport {
    heads: Vec<HeadId>,
    datasets: Vec<EvalRow>,
}

pub fn ablate_eval(out: &Path, a: AblateEvalArgs) -> Result<()> {
    let m = load_model(&a.weights)?;
    let protos = load_protos(&a.prototypes)?;
    let c = match &a.circuit {
        Some(p) => load_circuit(p)?,
        None => Circuit::default(),
    };
    c.validate_for(&m.weights.config)?;
    let base_iv = m.intervention();
    let abl_iv = union(&base_iv, &c.intervention());
    let mut rows = Vec::new();
    for path in &a.manifests {
        let data = load_data(path)?;
        let base = zero_shot_classify(&m.weights, &base_iv, &data, &protos)?.summary;
        let ablated = zero_shot_classify(&m.weights, &abl_iv, &data, &protos)?.summary;
        rows.push(EvalRow {
            dataset: stem(path),
            delta_acc_image: ablated.acc_image - base.acc_image,
            base,
            ablated,
        });
    }
    let mut csv = Csv::new(&["dataset", "n", "acc_base", "acc_ablated", "delta", "attack_base", "attack_ablated"]);
    for r in &rows {
        csv.row(&[
            &r.dataset,
            &r.base.n,
            &r.base.acc_image,
            &r.ablated.acc_image,
            &r.delta_acc_image,
            &opt(r.base.acc_typo),
            &opt(r.ablated.acc_typo),
        ]);
    }
    csv.write(out, "ablate_eval.csv")?;
    report::json(
        out,
        "ablate_eval.json",
        &AblateReport {
            heads: c.head_ids(),
            datasets: rows,
        },
    )?;
    Ok(print_table(out)?)
}

fn print_table(out: &Path) -> std::io::Result<()> {
    let text = std::fs::read_to_string(out.join("ablate_eval.csv"))?;
    for line in text.lines() {
        println!("{}", line.replace(',', "\t"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct AlphaSweepArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    prototypes: PathBuf,
    #[arg(long)]
    circuit: PathBuf,
    /// Typographic manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated α values (default 0.0, 0.1, …, 1.0).
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f32>>,
}

#[derive(Serialize)]
struct SweepReport {
    heads: Vec<HeadId>,
    points: Vec<AlphaPoint>,
}

pub fn alpha_sweep(out: &Path, a: AlphaSweepArgs) -> Result<()> {
    let w = load_plain(&a.weights, "alpha-sweep")?;
    let protos = load_protos(&a.prototypes)?;
    let c = load_circuit(&a.circuit)?;
    let data = load_data(&a.manifest)?;
    let grid = a.alphas.unwrap_or_else(circuit::default_alpha_grid);
    let points = circuit::alpha_sweep(&w, &c, &data, &protos, &grid)?;
    let mut csv = Csv::new(&["alpha", "mean_p_image", "mean_p_typo", "acc_image", "acc_typo"]);
    for p in &points {
        csv.row(&[&p.alpha, &p.mean_p_image, &opt(p.mean_p_typo), &p.acc_image, &opt(p.acc_typo)]);
    }
    csv.write(out, "alpha_sweep.csv")?;
    report::json(out, "alpha_sweep.json", &SweepReport { heads: c.head_ids(), points: points.clone() })?;
    println!("alpha   p(y_image)  p(y_typo)");
    for p in &points {
        println!("{:<7} {:<11.4} {}", p.alpha, p.mean_p_image, opt(p.mean_p_typo));
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct IdArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = analysis::DEFAULT_ID_THRESHOLD)]
    threshold: f64,
    /// Report probe accuracy for this target at the same capture points.
    #[arg(long)]
    probe_target: Option<ProbeTarget>,
}

#[derive(Serialize)]
struct IdRow {
    #[serde(flatten)]
    point: IdPoint,
    #[serde(skip_serializing_if = "Option::is_none")]
    probe_accuracy: Option<f64>,
}

#[derive(Serialize)]
struct IdReport {
    threshold: f64,
    id_curve: BTreeMap<String, usize>,
    points: Vec<IdRow>,
}

pub fn id(out: &Path, a: IdArgs) -> Result<()> {
    let w = load_plain(&a.weights, "id")?;
    let data = load_data(&a.manifest)?;
    let curve = analysis::id_curve(&w, &data, a.threshold)?;
    let probes = match a.probe_target {
        Some(t) => Some(probe::probe_curve(&w, &data, t, &ProbeConfig::default())?),
        None => None,
    };
    let rows: Vec<IdRow> = curve
        .into_iter()
        .map(|point| {
            let probe_accuracy = probes.as_ref().and_then(|ps| {
                ps.iter()
                    .find(|p| p.capture_point == point.capture_point)
                    .map(|p| p.accuracy)
            });
            IdRow { point, probe_accuracy }
        })
        .collect();
    let mut csv = Csv::new(&["capture_point", "id", "zero_variance", "total_variance", "probe_accuracy"]);
    for r in &rows {
        let p = &r.point;
        csv.row(&[&p.capture_point, &p.id, &p.zero_variance, &p.total_variance, &opt(r.probe_accuracy)]);
        let warn = if p.zero_variance { "  (zero variance)" } else { "" };
        let acc = r.probe_accuracy.map(|v| format!("  probe {v:.3}")).unwrap_or_default();
        println!("{:<14} ID {:>3}{acc}{warn}", p.capture_point.to_string(), p.id);
    }
    csv.write(out, "id_curve.csv")?;
    let rep = IdReport {
        threshold: a.threshold,
        id_curve: rows.iter().map(|r| (r.point.capture_point.to_string(), r.point.id)).collect(),
        points: rows,
    };
    report::json(out, "id_curve.json", &rep)?;
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct SinkRocArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Head as `layer:head`.
    #[arg(long)]
    head: HeadId,
    #[arg(long)]
    clean: PathBuf,
    #[arg(long)]
    typo: PathBuf,
    /// Also fit a linear clean/typo probe on the final cls embedding.
    #[arg(long)]
    linear: bool,
}

pub fn sink_roc(out: &Path, a: SinkRocArgs) -> Result<()> {
    let w = load_plain(&a.weights, "sink-roc")?;
    let clean = load_data(&a.clean)?;
    let typo = load_data(&a.typo)?;
    let mut rep: SinkReport = analysis::sink_report(&w, a.head, &clean, &typo)?;
    if a.linear {
        rep.linear_auc = Some(analysis::linear_baseline_auc(&w, &clean, &typo, &ProbeConfig::default())?);
    }
    let norms = analysis::sink_norm_stats(&w, a.head, &clean, &typo)?;
    let mut csv = Csv::new(&["set", "id", "spatial_norm"]);
    for (set, data, values) in [("clean", &clean, &norms.clean), ("typo", &typo, &norms.typo)] {
        for (e, v) in data.entries().iter().zip(values) {
            csv.row(&[&set, &e.id, v]);
        }
    }
    csv.write(out, "sink_norms.csv")?;
    report::json(out, "sink_report.json", &rep)?;
    println!(
        "head {}: AUC {:.4}; median spatial norm clean {:.4}, typo {:.4}",
        a.head, rep.auc, rep.clean_stats.median, rep.typo_stats.median
    );
    if let Some(l) = rep.linear_auc {
        println!("linear probe on final embedding: AUC {l:.4}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    circuit: PathBuf,
    /// Output weight path (default `<out>/dyslexic.safetensors`).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct ExportReport {
    weights: String,
    sidecar: String,
    model_hash: String,
    heads: Vec<HeadId>,
}

pub fn export_dyslexic(out: &Path, a: ExportArgs) -> Result<()> {
    let w = load_plain(&a.weights, "export-dyslexic")?;
    let c = load_circuit(&a.circuit)?;
    let target = a.output.unwrap_or_else(|| out.join("dyslexic.safetensors"));
    if target == a.weights {
        bail!("refusing to overwrite the input weights {}", target.display());
    }
    let side = circuit::export_dyslexic(&w, &c, &target)?;
    // reload to prove the pair is consistent
    let back = load_dyslexic(&target)?;
    let probe_img = typolens::Tensor::zeros(vec![3, w.config.image_size, w.config.image_size]);
    back.weights.forward(&probe_img, &back.intervention(), CaptureFlags::default())?;
    report::json(
        out,
        "export.json",
        &ExportReport {
            weights: file_name(&target),
            sidecar: file_name(&side),
            model_hash: w.model_hash(),
            heads: c.head_ids(),
        },
    )?;
    println!(
        "wrote {} with {}-head circuit sidecar {}",
        target.display(),
        c.len(),
        side.display()
    );
    Ok(())
}
