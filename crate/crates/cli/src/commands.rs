use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::json;
use taskmod::analysis::{energy_curves, rank_strategy_report, sensitivity, sensitivity_all_params};
use taskmod::degradations::{
    psnr, read_png, sample_seed, write_manifest, write_png, DatasetEntry, EvalChannel, SamplePair, TaskSpec,
};
use taskmod::instruct::{InstructionLexicon, Route};
use taskmod::model::{Checkpoint, TinyIpt};
use taskmod::modulation::TaskId;
use taskmod::rng::derive_named;
use taskmod::training::{
    downstream_finetune, evaluate, metrics_to_jsonl, psnr_table, validation_set, TrainConfig, Trainer, ValResult,
};
use taskmod::{Error, Result};

use crate::args::*;
use crate::manifest::{Manifest, OutDir};

pub const CHECKPOINT_FILE: &str = "checkpoint.tmod";
pub const SNAPSHOT_FILE: &str = "divergence-snapshot.tmod";

/// Failure modes beyond the library's own errors.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    Ambiguous(Vec<(TaskId, f64)>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

pub type Outcome = std::result::Result<(), Failure>;

fn validation_json(v: &BTreeMap<TaskId, ValResult>) -> serde_json::Value {
    v.iter()
        .map(|(t, r)| {
            (
                t.to_string(),
                json!({"psnr": r.psnr, "degraded_psnr": r.degraded_psnr, "gain": r.gain()}),
            )
        })
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn pretty(v: &serde_json::Value) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s.into_bytes()
}

fn print_validation(v: &BTreeMap<TaskId, ValResult>) {
    for (t, r) in v {
        println!(
            "{t}: {:.3} dB (input {:.3} dB, gain {:+.3} dB)",
            r.psnr,
            r.degraded_psnr,
            r.gain()
        );
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    if !path.exists() {
        return Err(Error::Config {
            path: path.display().to_string(),
            message: "config file not found".into(),
        });
    }
    TrainConfig::load(path)
}

/// Resolves a task id, preferring specs from `config`.
fn task_spec(name: &str, config: Option<&TrainConfig>) -> Result<TaskSpec> {
    if let Some(t) = config.and_then(|c| c.tasks.iter().find(|t| t.id.as_str() == name)) {
        return Ok(t.clone());
    }
    TaskSpec::by_name(name)
}

fn load_model(path: &Path, manifest: &mut Manifest) -> Result<TinyIpt<f32>> {
    let m = TinyIpt::load(path)?;
    manifest.input(path)?;
    Ok(m)
}

pub fn train(a: &TrainArgs) -> Outcome {
    let mut cfg = load_config(&a.config)?;
    if let Some(r) = a.regime {
        cfg.regime = r.into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    cfg.validate()?;
    let mut out = OutDir::create(&a.out, "train")?;
    out.manifest.input(&a.config)?;
    out.manifest.seed = Some(cfg.seed);
    out.manifest.config = Some(serde_json::from_str(&cfg.to_json()).expect("config is json"));
    out.write("config.json", cfg.to_json().as_bytes())?;
    let mut trainer = Trainer::new(cfg, None)?;
    match trainer.run() {
        Ok(()) => {}
        Err(e @ Error::Divergence { .. }) => {
            trainer.model.save(&out.path(SNAPSHOT_FILE))?;
            out.record(SNAPSHOT_FILE)?;
            out.write("metrics.jsonl", metrics_to_jsonl(trainer.metrics()).as_bytes())?;
            out.write("divergence.json", &pretty(&json!({"error": e.to_string()})))?;
            out.finish()?;
            return Err(e.into());
        }
        Err(e) => return Err(e.into()),
    }
    let outcome = trainer.finish();
    outcome.model.save(&out.path(CHECKPOINT_FILE))?;
    out.record(CHECKPOINT_FILE)?;
    out.write("metrics.jsonl", metrics_to_jsonl(&outcome.metrics).as_bytes())?;
    out.write("validation.json", &pretty(&validation_json(&outcome.validation)))?;
    out.finish()?;
    print_validation(&outcome.validation);
    Ok(())
}

pub fn finetune(a: &FinetuneArgs) -> Outcome {
    let base_cfg = match &a.config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let mut cfg = base_cfg.clone().unwrap_or_default();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.steps {
        cfg.steps = n;
    }
    let spec = task_spec(&a.task, base_cfg.as_ref())?;
    let mut out = OutDir::create(&a.out, "finetune")?;
    let model = load_model(&a.ckpt, &mut out.manifest)?;
    if let Some(p) = &a.config {
        out.manifest.input(p)?;
    }
    out.manifest.seed = Some(cfg.seed);
    out.manifest.config =
        Some(json!({"train": serde_json::from_str::<serde_json::Value>(&cfg.to_json()).expect("json"), "task": spec}));
    let result = downstream_finetune(&model, &spec, &cfg)?;
    result.model.save(&out.path(CHECKPOINT_FILE))?;
    out.record(CHECKPOINT_FILE)?;
    let pack_name = format!("{}.pack", spec.id);
    result.pack.save(&out.path(&pack_name))?;
    out.record(&pack_name)?;
    out.write("metrics.jsonl", metrics_to_jsonl(&result.metrics).as_bytes())?;
    let v = BTreeMap::from([(spec.id.clone(), result.validation)]);
    out.write("validation.json", &pretty(&validation_json(&v)))?;
    out.finish()?;
    print_validation(&v);
    Ok(())
}

fn load_pair(reference: &Path, finetuned: &Path, manifest: &mut Manifest) -> Result<(Checkpoint, Checkpoint)> {
    let a = Checkpoint::load(reference)?;
    let b = Checkpoint::load(finetuned)?;
    manifest.input(reference)?;
    manifest.input(finetuned)?;
    Ok((a, b))
}

pub fn analyze_sensitivity(a: &SensitivityArgs) -> Outcome {
    let mut out = OutDir::create(&a.out, "analyze-sensitivity")?;
    let (r, f) = load_pair(&a.reference, &a.finetuned, &mut out.manifest)?;
    let report = if a.all_params {
        sensitivity_all_params(&r, &f)?
    } else {
        sensitivity(&r, &f)?
    };
    out.manifest.config = Some(json!({"all_params": a.all_params}));
    out.write("sensitivity.csv", report.to_csv().as_bytes())?;
    out.write("sensitivity.json", report.to_json().as_bytes())?;
    out.finish()?;
    println!("| Layers | Similarity | Tensors |\n|---|---:|---:|");
    for g in &report.groups {
        println!("| {} | {:.4} | {} |", g.group.label(), g.mean, g.count);
    }
    Ok(())
}

pub fn analyze_rank(a: &RankArgs) -> Outcome {
    let mut out = OutDir::create(&a.out, "analyze-rank")?;
    let (r, f) = load_pair(&a.reference, &a.finetuned, &mut out.manifest)?;
    let analysis = energy_curves(&r, &f)?;
    let report = rank_strategy_report(&analysis, a.constant_r, a.proportional_p)?;
    out.manifest.config = Some(json!({"constant_r": a.constant_r, "proportional_p": a.proportional_p}));
    out.write("energy.json", analysis.to_json().as_bytes())?;
    out.write("energy.dat", analysis.to_gnuplot().as_bytes())?;
    out.write("rank.csv", report.to_csv().as_bytes())?;
    out.write("rank.json", report.to_json().as_bytes())?;
    out.finish()?;
    if report.rows.is_empty() {
        println!("no 2-D weight differs between the checkpoints");
        return Ok(());
    }
    for s in [&report.constant, &report.proportional] {
        println!(
            "{}: mean energy {:.4}, min {:.4}, bias params {} ({:.2}% of dense)",
            s.strategy,
            s.mean_energy,
            s.min_energy,
            s.bias_params,
            100.0 * s.params_fraction
        );
    }
    let flagged: Vec<&str> = report.flagged().map(|r| r.layer.as_str()).collect();
    println!(
        "layers below {} energy under {}: {}",
        taskmod::analysis::LOW_ENERGY_FLAG,
        report.proportional.strategy,
        flagged.len()
    );
    if !analysis.skipped.is_empty() {
        println!("skipped (zero delta): {}", analysis.skipped.join(", "));
    }
    Ok(())
}

pub fn eval(a: &EvalArgs) -> Outcome {
    if a.n == 0 {
        return Err(Error::Config {
            path: "--n".into(),
            message: "evaluation needs at least one sample".into(),
        }
        .into());
    }
    let cfg = match &a.config {
        Some(p) => Some(load_config(p)?),
        None => None,
    };
    let mut manifest = Manifest::new("eval");
    let mut model = load_model(&a.ckpt, &mut manifest)?;
    let names: Vec<String> = if a.tasks.is_empty() {
        model.tasks().iter().map(ToString::to_string).collect()
    } else {
        a.tasks.clone()
    };
    let mut specs = Vec::new();
    for n in &names {
        let spec = task_spec(n, cfg.as_ref())?;
        if !model.is_registered(&spec.id) {
            return Err(Error::UnknownTask {
                task: spec.id.to_string(),
                registered: model.tasks().iter().map(ToString::to_string).collect(),
            }
            .into());
        }
        specs.push(spec);
    }
    let size = model.config().patch_size;
    let mut restored = BTreeMap::new();
    let mut degraded = BTreeMap::new();
    for spec in &specs {
        let pairs = validation_set(spec, a.seed, a.n, size)?;
        let v = evaluate(&mut model, spec, &pairs)?;
        restored.insert(spec.id.clone(), v.psnr);
        degraded.insert(spec.id.clone(), v.degraded_psnr);
    }
    let ids: Vec<TaskId> = specs.iter().map(|s| s.id.clone()).collect();
    let rows = vec![
        ("Degraded input".to_string(), degraded),
        ("Restored".to_string(), restored),
    ];
    let table = psnr_table(&rows, &ids);
    print!("{table}");
    if let Some(dir) = &a.out {
        let mut out = OutDir::create(dir, "eval")?;
        out.manifest.inputs = std::mem::take(&mut manifest.inputs);
        out.manifest.seed = Some(a.seed);
        out.manifest.config = Some(json!({"tasks": specs, "n": a.n}));
        let mut csv = String::from("method");
        for id in &ids {
            csv.push(',');
            csv.push_str(id.as_str());
        }
        csv.push('\n');
        for (name, vals) in &rows {
            csv.push_str(name);
            for id in &ids {
                csv.push_str(&format!(",{:.4}", vals[id]));
            }
            csv.push('\n');
        }
        out.write("eval.csv", csv.as_bytes())?;
        out.write("eval.md", table.as_bytes())?;
        out.finish()?;
    }
    Ok(())
}

fn lexicon(path: Option<&PathBuf>, manifest: Option<&mut Manifest>) -> Result<InstructionLexicon> {
    match path {
        Some(p) => {
            let l = InstructionLexicon::load(p)?;
            if let Some(m) = manifest {
                m.input(p)?;
            }
            Ok(l)
        }
        None => Ok(InstructionLexicon::standard()),
    }
}

fn routed(lex: &InstructionLexicon, text: &str) -> std::result::Result<(TaskId, f64), Failure> {
    match lex.route(text)? {
        Route::Task { task, confidence } => Ok((task, confidence)),
        Route::Ambiguous { .. } => Err(Failure::Ambiguous(lex.scores(text))),
    }
}

pub fn restore(a: &RestoreArgs) -> Outcome {
    let mut manifest = Manifest::new("restore");
    let (task, confidence) = match (&a.task, &a.instruction) {
        (Some(t), _) => (TaskId::from(t.as_str()), None),
        (None, Some(text)) => {
            let lex = lexicon(a.lexicon.as_ref(), Some(&mut manifest))?;
            let (t, c) = routed(&lex, text)?;
            (t, Some(c))
        }
        (None, None) => unreachable!("clap requires --task or --instruction"),
    };
    let mut model = load_model(&a.ckpt, &mut manifest)?;
    let image = read_png(&a.input)?;
    manifest.input(&a.input)?;
    let y = model.restore_padded(&image, &task)?;
    let mut side = json!({"task": task, "confidence": confidence, "instruction": a.instruction});
    if let Some(r) = &a.reference {
        let clean = read_png(r)?;
        manifest.input(r)?;
        let channel = TaskSpec::by_name(task.as_str())
            .map(|s| s.eval_channel())
            .unwrap_or(EvalChannel::Rgb);
        side["psnr"] = json!(psnr(&y, &clean, channel)?);
        side["degraded_psnr"] = json!(psnr(&image, &clean, channel)?);
    }
    write_png(&a.out, &y)?;
    let base = a.out.parent().unwrap_or(Path::new("")).to_path_buf();
    manifest.output(&base, &a.out)?;
    let side_path = sidecar(&a.out, "json");
    taskmod::fsutil::write_atomic(&side_path, &pretty(&side))?;
    manifest.output(&base, &side_path)?;
    manifest.write(&sidecar(&a.out, "manifest.json"))?;
    match confidence {
        Some(c) => println!("{task} (confidence {c:.3}) -> {}", a.out.display()),
        None => println!("{task} -> {}", a.out.display()),
    }
    Ok(())
}

/// `out.png` → `out.png.<ext>`.
fn sidecar(path: &Path, ext: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn route(a: &RouteArgs) -> Outcome {
    let mut lex = lexicon(a.lexicon.as_ref(), None)?;
    if let Some(t) = a.threshold {
        lex = lex.with_threshold(t)?;
    }
    let (task, confidence) = routed(&lex, &a.text)?;
    println!("{}", json!({"task": task, "confidence": confidence}));
    Ok(())
}

pub fn gen_data(a: &GenDataArgs) -> Outcome {
    if a.n == 0 || a.size == 0 {
        return Err(Error::Config {
            path: if a.n == 0 { "--n" } else { "--size" }.into(),
            message: "must be positive".into(),
        }
        .into());
    }
    let specs: Vec<TaskSpec> = a.tasks.iter().map(|t| TaskSpec::by_name(t)).collect::<Result<_>>()?;
    let mut out = OutDir::create(&a.out, "gen-data")?;
    out.manifest.seed = Some(a.seed);
    out.manifest.config = Some(json!({"tasks": specs, "n": a.n, "size": a.size}));
    let mut entries = Vec::new();
    for spec in &specs {
        let dir = out.path(spec.id.as_str());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stream = derive_named(a.seed, &format!("gen/{}", spec.id));
        for i in 0..a.n {
            let seed = sample_seed(stream, i as u64);
            let pair = SamplePair::generate(spec, seed, a.size, a.size)?;
            for (kind, img) in [("clean", &pair.clean), ("degraded", &pair.degraded)] {
                let name = format!("{}/{i:05}_{kind}.png", spec.id);
                write_png(&out.path(&name), img)?;
                out.record(&name)?;
            }
            entries.push(DatasetEntry {
                seed,
                task: spec.id.clone(),
                size: [a.size, a.size],
            });
        }
    }
    write_manifest(&out.path("dataset.json"), &entries)?;
    out.record("dataset.json")?;
    out.finish()?;
    println!("wrote {} pairs to {}", entries.len(), a.out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_appends_extension() {
        assert_eq!(sidecar(Path::new("a/b.png"), "json"), PathBuf::from("a/b.png.json"));
    }

    #[test]
    fn config_specs_shadow_builtins() {
        let mut cfg = TrainConfig::default();
        cfg.tasks[0] = TaskSpec::denoise(10.0);
        cfg.tasks[0].id = TaskId::from("denoise");
        assert_eq!(task_spec("denoise", Some(&cfg)).unwrap(), cfg.tasks[0]);
        assert_eq!(task_spec("derain", Some(&cfg)).unwrap(), TaskSpec::derain());
        assert!(task_spec("sharpen", None).is_err());
    }
}
