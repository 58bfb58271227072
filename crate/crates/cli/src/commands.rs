use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use frozen_align::checkpoint::Checkpoint;
use frozen_align::class_reps::build_classifier;
use frozen_align::embed;
use frozen_align::eval::{
    config_digest, eval_caption_choice, eval_classification, eval_retrieval, eval_winoground, parse_caption_choice_manifest,
    parse_label_manifest, parse_winoground_manifest, EvalReport, LabeledImages,
};
use frozen_align::projection::ProjectionNet;
use frozen_align::store::{parse_pair_manifest, PairedDataset, StoreHandle};
use frozen_align::trainer::train;
use frozen_align::viterb::{aggregate, run_viterb, ViterbEntry, ViterbSplit, ViterbTask};
use frozen_align::{Error, Result};
use rayon::prelude::*;
use serde_json::json;

use crate::config::{EvalFile, Overrides, TaskSpec, TrainFile, ViterbDataset, ViterbFile};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn out_dir(flag: Option<PathBuf>, config: Option<PathBuf>) -> Result<PathBuf> {
    let dir = flag.or(config).unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn open(path: &Path) -> Result<Arc<StoreHandle>> {
    Ok(Arc::new(StoreHandle::open(path)?))
}

pub fn inspect(path: &Path, head: usize) -> Result<()> {
    let store = StoreHandle::open(path)?;
    let h = store.header();
    println!("path      {}", path.display());
    println!("version   {}", h.version);
    println!("modality  {}", store.modality());
    println!("dim       {}", store.dim());
    println!("count     {}", store.len());
    for i in 0..head.min(store.len()) {
        let v = store.row(i);
        let norm = v.iter().map(|x| f64::from(*x) * f64::from(*x)).sum::<f64>().sqrt();
        println!("{}\t{norm:.6}", store.id(i));
    }
    Ok(())
}

pub fn train_cmd(config: &Path, overrides: &Overrides, out: Option<PathBuf>, verbose: bool) -> Result<()> {
    let c = TrainFile::load(config, overrides)?;
    let digest = config_digest(&c)?;
    let out = out_dir(out, c.out.clone())?;
    let data = PairedDataset::from_manifest(open(&c.vision_store)?, open(&c.text_store)?, &c.pairs)?;
    if verbose {
        eprintln!("{} images, {} captions; training for up to {} steps", data.len(), data.caption_count(), c.train.max_steps);
    }
    let (report, _) = train(&c.train, &c.projection, &c.optimizer, &data, Some(&out))?;

    let mut table = String::new();
    let _ = writeln!(table, "steps run        {}", report.steps_run);
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    let _ = writeln!(table, "final train loss {}", fmt(report.final_train_loss));
    let _ = writeln!(table, "best val loss    {}", fmt(report.best_val_loss));
    let _ = writeln!(table, "best step        {}", report.best_step.map_or("-".to_string(), |s| s.to_string()));
    let _ = writeln!(table, "stopped early    {}", report.stopped_early);
    let _ = writeln!(table, "wall clock       {:.2} s", report.wall_clock_secs);
    if let Some(p) = &report.checkpoint_path {
        let _ = writeln!(table, "checkpoint       {}", p.display());
    }
    let doc = json!({ "command": "train", "seed": c.seed, "config_digest": digest, "config": c, "report": report });
    write(&out.join("report.json"), serde_json::to_string_pretty(&doc)?)?;
    write(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run_task(task: &TaskSpec, net: &ProjectionNet<f32>, vision: &StoreHandle, text: &StoreHandle, verbose: bool) -> Result<EvalReport> {
    match task {
        TaskSpec::Classification { dataset, labels, representations, mode } => {
            let reps = representations.load(None)?;
            let clf = build_classifier(&reps, net, text)?;
            let images = LabeledImages::load(vision, &parse_label_manifest(labels)?, &reps.classes)?;
            eval_classification(&images, &clf, *mode, dataset)
        }
        TaskSpec::Retrieval { dataset, pairs, k } => {
            let pairs = parse_pair_manifest(pairs)?;
            let images: Vec<&str> = pairs.iter().map(|(i, _)| i.as_str()).collect();
            let mut captions = Vec::new();
            let mut text_to_image = Vec::new();
            for (i, (_, caps)) in pairs.iter().enumerate() {
                captions.extend(caps.iter().map(String::as_str));
                text_to_image.extend(std::iter::repeat_n(i, caps.len()));
            }
            let zi = embed::vision_ids(vision, &images)?;
            let zt = embed::text_ids(net, text, &captions)?;
            eval_retrieval(zi.view(), zt.view(), &text_to_image, *k, dataset)
        }
        TaskSpec::Winoground { dataset, items } => {
            eval_winoground(&parse_winoground_manifest(items)?, net, vision, text, dataset, verbose)
        }
        TaskSpec::CaptionChoice { dataset, items } => {
            eval_caption_choice(&parse_caption_choice_manifest(items)?, net, vision, text, dataset)
        }
    }
}

pub fn eval_cmd(config: &Path, dataset: Option<&str>, out: Option<PathBuf>, verbose: bool) -> Result<()> {
    let c = EvalFile::load(config, dataset)?;
    let digest = config_digest(&c)?;
    let out = out_dir(out, c.out.clone())?;
    let ckpt = Checkpoint::load(&c.checkpoint)?;
    let (vision, text) = (open(&c.vision_store)?, open(&c.text_store)?);
    let mut reports = Vec::with_capacity(c.tasks.len());
    let mut tables = String::new();
    for task in &c.tasks {
        let report = run_task(task, &ckpt.net, &vision, &text, verbose)?.with_digest(digest.clone());
        tables.push_str(&report.to_table());
        if verbose {
            for item in &report.items {
                let _ = writeln!(tables, "  {item}");
            }
        }
        reports.push(report);
    }
    let doc = json!({ "command": "eval", "seed": ckpt.seed, "config_digest": digest, "config": c, "reports": reports });
    write(&out.join("eval.json"), serde_json::to_string_pretty(&doc)?)?;
    write(&out.join("eval.txt"), &tables)?;
    print!("{tables}");
    Ok(())
}

fn viterb_one(d: &ViterbDataset, c: &ViterbFile, verbose: bool) -> Result<(ViterbEntry, ViterbSplit)> {
    let split = d.split.resolve(&d.name, Path::new(""))?;
    let classes: Vec<String> = split.seen.iter().chain(&split.unseen).cloned().collect();
    let task = ViterbTask {
        vision: open(&d.vision_store)?,
        text: open(&d.text_store)?,
        train_labels: parse_label_manifest(&d.train_labels)?,
        eval_labels: parse_label_manifest(&d.eval_labels)?,
        reps: d.representations.load(Some(&classes))?,
        split: split.clone(),
    };
    let (entry, _) = run_viterb(&task, &c.settings)?;
    if verbose {
        eprintln!("{}: unseen per-class accuracy {:.2}", d.name, entry.unseen_accuracy);
    }
    Ok((entry, split))
}

pub fn viterb_cmd(config: &Path, overrides: &Overrides, dataset: Option<&str>, out: Option<PathBuf>, verbose: bool) -> Result<()> {
    let c = ViterbFile::load(config, overrides, dataset)?;
    let digest = config_digest(&c)?;
    let out = out_dir(out, c.out.clone())?;
    let results: Vec<Result<(ViterbEntry, ViterbSplit)>> = c.datasets.par_iter().map(|d| viterb_one(d, &c, verbose)).collect();
    let mut entries = Vec::with_capacity(results.len());
    let mut splits = Vec::with_capacity(results.len());
    for r in results {
        let (e, s) = r?;
        entries.push(e);
        splits.push(s);
    }
    let names: Vec<String> = c.datasets.iter().map(|d| d.name.clone()).collect();
    let result = aggregate(entries, &names)?;

    let split_dir = out.join("splits");
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
    for s in &splits {
        write(&split_dir.join(format!("{}.txt", s.dataset)), s.to_file_string())?;
    }
    let table = result.to_table();
    let doc = json!({ "command": "viterb", "seed": c.seed, "config_digest": digest, "config": c, "splits": splits, "result": result });
    write(&out.join("viterb.json"), serde_json::to_string_pretty(&doc)?)?;
    write(&out.join("viterb.txt"), &table)?;
    print!("{table}");
    Ok(())
}
