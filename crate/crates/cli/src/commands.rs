use std::path::{Path, PathBuf};

use docalign_core::flow::{read_flow, write_flow};
use docalign_core::metrics::{evaluate_flow, FlowEvalReport};
use docalign_core::prealign::{prealign_with, PrealignOptions, TpsTransform};
use docalign_core::synth::{generate_dataset, read_manifest, DatasetOptions, ManifestRecord, SynthParams, MANIFEST_NAME};
use docalign_core::transfer::{read_annotations, render_overlay, transfer_annotations, write_annotations};
use docalign_core::{warp_with, FlowField, Image, OutOfBounds};
use docalign_net::train::{load_samples, map_ordered, selfsup_finetune, train_supervised, write_loss_log, Pair};
use docalign_net::{gradcheck, Model, ModelConfig, SelfSupConfig, TrainConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::{
    create_dir, threads_from_env, write_json, write_run, AlignArgs, Cli, Command, EvalArgs, GradcheckArgs, PrealignArgs,
    SelfsupArgs, SynthArgs, TrainArgs, TransferArgs, CHECKPOINT_NAME,
};

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(cli, a),
        Command::Prealign(a) => prealign(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Selfsup(a) => selfsup(cli, a),
        Command::Align(a) => align(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Transfer(a) => transfer(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn to_value(v: &impl Serialize) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut params = match &a.params {
        Some(p) => read_json::<SynthParams>(p)?,
        None => SynthParams::default(),
    };
    if let Some(size) = a.size {
        if size == 0 {
            return Err(CliError::usage("--size must be positive"));
        }
        params = params.rescaled(size);
    }
    if let Some(seed) = a.seed {
        params.seed = seed;
    }
    params.validate()?;
    let opts = DatasetOptions { count: a.count, split: a.split.clone(), sources: a.sources.clone() };
    create_dir(&a.out)?;
    let records = generate_dataset(&opts, &params, &a.out)?;
    if cli.verbose {
        eprintln!("wrote {} triplets to {}", records.len(), a.out.display());
    }
    let inputs: Vec<&Path> = a.params.iter().map(PathBuf::as_path).collect();
    write_run(&a.out, cli, json!({ "params": params, "dataset": opts }), &inputs, 0)
}

fn prealign(cli: &Cli, a: &PrealignArgs) -> Result<()> {
    let photo = Image::read(&a.photo)?;
    let opts = PrealignOptions {
        points_per_edge: a.points_per_edge,
        lambda: a.lambda,
        out_dims: a.size.map(|(w, h)| (h, w)),
        mask: None,
    };
    let out = prealign_with(&photo, &opts)?;
    create_dir(&a.out)?;
    out.image.write_png(a.out.join("prealigned.png"))?;
    let tps = a.out.join("transform.json");
    std::fs::write(&tps, out.transform.to_json()?).map_err(|e| CliError::io(&tps, e))?;
    write_flow(&out.flow, a.out.join("prealign.flo"))?;
    let (h, w) = out.image.dims();
    write_run(
        &a.out,
        cli,
        json!({ "points_per_edge": a.points_per_edge, "lambda": a.lambda, "width": w, "height": h }),
        &[&a.photo],
        0,
    )
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let threads = threads_from_env()?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.augment |= a.augment;
    cfg.threads = threads;
    cfg.validate()?;

    let mut model = match (&a.resume, &a.model) {
        (Some(ckpt), _) => Model::<f32>::load(ckpt)?,
        (None, Some(p)) => Model::new(read_json::<ModelConfig>(p)?)?,
        (None, None) if a.tiny => Model::new(ModelConfig::tiny())?,
        (None, None) => Model::new(ModelConfig::default())?,
    };
    let samples = load_samples(&a.data)?;
    let verbose = cli.verbose;
    let log = train_supervised(&mut model, &samples, &cfg, |s, _| {
        if verbose {
            eprintln!("epoch {} step {} loss {:.6}", s.epoch, s.step, s.loss);
        }
    })?;
    if log.iter().any(|s| !s.loss.is_finite()) {
        return Err(CliError::Numerical("training loss became non-finite".into()));
    }
    create_dir(&a.out)?;
    model.save(a.out.join(CHECKPOINT_NAME))?;
    write_loss_log(&a.out.join("loss.csv"), &log)?;
    let mut inputs: Vec<&Path> = vec![&a.data];
    inputs.extend(a.config.iter().chain(&a.model).chain(&a.resume).map(PathBuf::as_path));
    write_run(&a.out, cli, json!({ "train": cfg, "model": model.config }), &inputs, threads)
}

/// Pairs from a manifest's photo and clean entries.
pub fn load_pairs(manifest: &Path) -> Result<Vec<Pair>> {
    let root = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|r| Ok(Pair { source: Image::read(root.join(&r.photo))?, target: Image::read(root.join(&r.clean))? }))
        .collect()
}

fn selfsup(cli: &Cli, a: &SelfsupArgs) -> Result<()> {
    let threads = threads_from_env()?;
    let mut cfg = match &a.config {
        Some(p) => read_json::<SelfSupConfig>(p)?,
        None => SelfSupConfig::default(),
    };
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.threads = threads;
    let mut model = Model::<f32>::load(&a.checkpoint)?;
    let pairs = load_pairs(&a.data)?;
    let report = selfsup_finetune(&mut model, &pairs, &cfg)?;
    if !report.final_loss.is_finite() {
        return Err(CliError::Numerical("alignment loss became non-finite".into()));
    }
    if cli.verbose {
        eprintln!("alignment loss {:.6} -> {:.6}", report.initial_loss, report.final_loss);
    }
    create_dir(&a.out)?;
    model.save(a.out.join(CHECKPOINT_NAME))?;
    write_json(&a.out.join("report.json"), &report)?;
    let mut inputs: Vec<&Path> = vec![&a.checkpoint, &a.data];
    inputs.extend(a.config.iter().map(PathBuf::as_path));
    write_run(&a.out, cli, json!({ "selfsup": cfg }), &inputs, threads)
}

/// Alternating `tile x tile` squares of `a` and `b`.
pub fn checkerboard(a: &Image, b: &Image, tile: usize) -> Result<Image> {
    if a.dims() != b.dims() || a.channels() != b.channels() {
        return Err(CliError::usage("checkerboard images differ in size"));
    }
    if tile == 0 {
        return Err(CliError::usage("--tile must be positive"));
    }
    let (h, w) = a.dims();
    Ok(Image::from_fn(h, w, a.channels(), |x, y, c| if (x / tile + y / tile) % 2 == 0 { a.get(x, y, c) } else { b.get(x, y, c) })?)
}

fn align(cli: &Cli, a: &AlignArgs) -> Result<()> {
    let model = Model::<f32>::load(&a.checkpoint)?;
    let source = Image::read(&a.source)?.to_rgb();
    let target = Image::read(&a.target)?.to_rgb();
    if source.dims() != target.dims() {
        return Err(CliError::usage(format!("source {:?} and target {:?} differ in size", source.dims(), target.dims())));
    }
    let flow = model.predict(&source, &target)?;
    let warped = warp_with(&source, &flow, OutOfBounds::Border)?;
    let overlay = checkerboard(&warped, &target, a.tile)?;
    create_dir(&a.out)?;
    write_flow(&flow, a.out.join("flow.flo"))?;
    warped.write_png(a.out.join("warped.png"))?;
    overlay.write_png(a.out.join("overlay.png"))?;
    write_run(&a.out, cli, json!({ "model": model.config }), &[&a.checkpoint, &a.source, &a.target], 0)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalItem {
    pub id: String,
    #[serde(flatten)]
    pub report: FlowEvalReport,
}

/// Per-item reports and their means, one column per metric.
#[derive(Debug, Clone, Serialize)]
pub struct EvalTable {
    pub method: String,
    pub aepe: f64,
    pub pck: std::collections::BTreeMap<String, f64>,
    pub items: Vec<EvalItem>,
}

impl EvalTable {
    pub fn new(method: &str, items: Vec<EvalItem>) -> Self {
        let n = items.len().max(1) as f64;
        let aepe = items.iter().map(|i| i.report.aepe).sum::<f64>() / n;
        let mut pck = std::collections::BTreeMap::new();
        for i in &items {
            for (k, v) in &i.report.pck {
                *pck.entry(k.clone()).or_insert(0.0) += v / n;
            }
        }
        Self { method: method.into(), aepe, pck, items }
    }
}

fn eval_record(root: &Path, r: &ManifestRecord, model: Option<&Model<f32>>, thresholds: &[f64]) -> Result<EvalItem> {
    let gt = read_flow(root.join(&r.flow))?;
    let pred = match model {
        Some(m) => {
            let photo = Image::read(root.join(&r.photo))?.to_rgb();
            let clean = Image::read(root.join(&r.clean))?.to_rgb();
            m.predict(&photo, &clean)?
        }
        None => FlowField::zeros(gt.height(), gt.width()),
    };
    Ok(EvalItem { id: r.id.clone(), report: evaluate_flow(&pred, &gt, thresholds, None)? })
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    if a.thresholds.iter().any(|t| !(*t > 0.0)) {
        return Err(CliError::usage("PCK thresholds must be positive"));
    }
    let threads = threads_from_env()?;
    let (table, inputs): (EvalTable, Vec<&Path>) = match (&a.pred, &a.gt, &a.data) {
        (Some(p), Some(g), None) => {
            let report = evaluate_flow(&read_flow(p)?, &read_flow(g)?, &a.thresholds, None)?;
            let id = p.display().to_string();
            (EvalTable::new("file", vec![EvalItem { id, report }]), vec![p, g])
        }
        (None, None, Some(data)) => {
            let model = match (&a.checkpoint, a.zero_flow) {
                (Some(c), false) => Some(Model::<f32>::load(c)?),
                (None, true) => None,
                _ => return Err(CliError::usage("evaluating a manifest needs --checkpoint or --zero-flow")),
            };
            let root = data.parent().unwrap_or(Path::new("."));
            let records = read_manifest(data)?;
            let items = map_ordered(&records, threads, |r| {
                eval_record(root, r, model.as_ref(), &a.thresholds).map_err(|e| match e {
                    CliError::Core(e) => e.into(),
                    CliError::Net(e) => e,
                    other => docalign_net::NetError::invalid(other.to_string()),
                })
            })?;
            let method = if model.is_some() { "model" } else { "zero-flow" };
            let mut inputs: Vec<&Path> = vec![data];
            inputs.extend(a.checkpoint.iter().map(PathBuf::as_path));
            (EvalTable::new(method, items), inputs)
        }
        _ => return Err(CliError::usage("give either --pred and --gt, or --data")),
    };
    if !table.aepe.is_finite() {
        return Err(CliError::Numerical("AEPE is not finite".into()));
    }
    crate::emit(&serde_json::to_string_pretty(&table)?)?;
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("eval.json"), &table)?;
        write_run(out, cli, json!({ "thresholds": a.thresholds }), &inputs, threads)?;
    }
    Ok(())
}

fn transfer(cli: &Cli, a: &TransferArgs) -> Result<()> {
    let set = read_annotations(&a.annotations)?;
    let flow = read_flow(&a.flow)?;
    let tps = match &a.tps {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Some(TpsTransform::from_json(&text)?)
        }
        None => None,
    };
    let photo = Image::read(&a.photo)?;
    let (out_set, summary) = transfer_annotations(&set, a.image_id, &flow, tps.as_ref(), photo.dims(), a.densify)?;
    create_dir(&a.out)?;
    write_annotations(&out_set, a.out.join("annotations.json"))?;
    if a.overlay {
        render_overlay(&photo.to_rgb(), &out_set).write_png(a.out.join("overlay.png"))?;
    }
    if !summary.degenerate.is_empty() {
        eprintln!("warning: {} boxes collapsed after clipping: {:?}", summary.degenerate.len(), summary.degenerate);
    }
    if cli.verbose {
        eprintln!("transferred {} annotations", summary.transferred);
    }
    let mut inputs: Vec<&Path> = vec![&a.annotations, &a.flow, &a.photo];
    inputs.extend(a.tps.iter().map(PathBuf::as_path));
    write_run(
        &a.out,
        cli,
        json!({ "transferred": summary.transferred, "degenerate": summary.degenerate }),
        &inputs,
        0,
    )
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let names: Vec<&str> = if a.all || a.block.is_empty() {
        gradcheck::BLOCKS.to_vec()
    } else {
        a.block.iter().map(String::as_str).collect()
    };
    let mut reports = Vec::new();
    for name in names {
        let r = gradcheck::check_block(name, a.seed)?;
        crate::emit(&format!(
            "{} {:<16} max rel err {:.3e} (tolerance {:.0e})",
            if r.passed { "ok  " } else { "FAIL" },
            r.block,
            r.max_rel_err,
            r.tolerance
        ))?;
        if cli.verbose {
            for t in &r.tensors {
                crate::emit(&format!("       {:<24} {:>4} entries  {:.3e}", t.name, t.checked, t.rel_err))?;
            }
        }
        reports.push(r);
    }
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_json(&out.join("gradcheck.json"), &reports)?;
        write_run(out, cli, to_value(&a.seed)?, &[], 0)?;
    }
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.block.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// The manifest path inside a dataset directory.
pub fn manifest_in(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_NAME)
}
