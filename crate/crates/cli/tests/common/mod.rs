#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use frozen_align::class_reps::{text_feature_id, RepresentationKind};
use frozen_align::store::{write_store, FeatureRecord, Modality};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

pub fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_frozen-align")).args(args).output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

pub fn write_json(path: &Path, v: &Value) -> PathBuf {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
    path.to_path_buf()
}

fn gauss(r: &mut ChaCha8Rng) -> f32 {
    // Box-Muller keeps the test free of extra distributions
    let (u, v): (f32, f32) = (r.random_range(1e-7..1.0), r.random());
    (-2.0 * u.ln()).sqrt() * (std::f32::consts::TAU * v).cos()
}

/// `n` images (8-d) and one caption each (16-d: the image twice plus noise),
/// with a pair manifest and a training config. Returns the config path.
pub fn train_fixture(dir: &Path, n: usize) -> PathBuf {
    let mut r = ChaCha8Rng::seed_from_u64(7);
    let mut vision = Vec::new();
    let mut text = Vec::new();
    let mut pairs = String::new();
    for i in 0..n {
        let v: Vec<f32> = (0..8).map(|_| gauss(&mut r)).collect();
        let t: Vec<f32> = (0..16).map(|j| v[j % 8] + 0.1 * gauss(&mut r)).collect();
        vision.push(FeatureRecord::new(format!("img{i}"), v));
        text.push(FeatureRecord::new(format!("cap{i}"), t));
        pairs.push_str(&format!("img{i}\tcap{i}\n"));
    }
    write_store(vision, 8, Modality::Vision, dir.join("vision.fst")).unwrap();
    write_store(text, 16, Modality::Text, dir.join("text.fst")).unwrap();
    fs::write(dir.join("pairs.tsv"), pairs).unwrap();
    write_json(
        &dir.join("train.json"),
        &json!({
            "vision_store": "vision.fst",
            "text_store": "text.fst",
            "pairs": "pairs.tsv",
            "seed": 3,
            "train": { "batch_size": 8, "max_steps": 40, "val_fraction": 0.1, "val_interval": 10 },
            "projection": { "input_dim": 16, "hidden_dim": 32, "output_dim": 8, "num_layers": 2 },
            "optimizer": { "lr": 0.003 }
        }),
    )
}

/// One circle-toy benchmark dataset under `dir/name`: six classes, two of
/// them unseen, class texts equal to the class centroid plus noise.
pub fn viterb_dataset(dir: &Path, name: &str, seed: u64, unseen: [usize; 2]) -> Value {
    let root = dir.join(name);
    fs::create_dir_all(root.join("desc")).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut vision = Vec::new();
    let mut text = Vec::new();
    let (mut train, mut eval) = (String::new(), String::new());
    for c in 0..6 {
        let a = std::f32::consts::TAU * c as f32 / 6.0;
        let centroid = [a.cos(), a.sin(), 0.0, 0.0];
        let class = format!("k{c}");
        let noisy = |r: &mut ChaCha8Rng| centroid.iter().map(|x| x + 0.15 * gauss(r)).collect::<Vec<f32>>();
        for i in 0..30 {
            let id = format!("{class}/img{i}");
            vision.push(FeatureRecord::new(&id, noisy(&mut r)));
            let line = format!("{id}\t{class}\n");
            if unseen.contains(&c) { eval.push_str(&line) } else { train.push_str(&line) }
        }
        let lines: Vec<String> = (0..10).map(|i| format!("text {i} about {class}")).collect();
        for i in 0..10 {
            text.push(FeatureRecord::new(text_feature_id(RepresentationKind::Description, &class, i), noisy(&mut r)));
        }
        fs::write(root.join("desc").join(format!("{class}.txt")), lines.join("\n")).unwrap();
    }
    write_store(vision, 4, Modality::Vision, root.join("vision.fst")).unwrap();
    write_store(text, 4, Modality::Text, root.join("text.fst")).unwrap();
    fs::write(root.join("train.tsv"), train).unwrap();
    fs::write(root.join("eval.tsv"), eval).unwrap();
    let seen: Vec<String> = (0..6).filter(|c| !unseen.contains(c)).map(|c| format!("k{c}")).collect();
    let split = format!("seen\n{}\nunseen\nk{}\nk{}\n", seen.join("\n"), unseen[0], unseen[1]);
    fs::write(root.join("split.txt"), split).unwrap();
    json!({
        "name": name,
        "vision_store": format!("{name}/vision.fst"),
        "text_store": format!("{name}/text.fst"),
        "split": { "kind": "file", "path": format!("{name}/split.txt") },
        "train_labels": format!("{name}/train.tsv"),
        "eval_labels": format!("{name}/eval.tsv"),
        "representations": { "kind": "description", "dir": format!("{name}/desc") }
    })
}

pub fn viterb_settings() -> Value {
    json!({
        "train": { "batch_size": 32, "max_steps": 300, "val_fraction": 0.05, "val_interval": 50 },
        "projection": { "input_dim": 4, "hidden_dim": 32, "output_dim": 4, "num_layers": 2, "dropout_p": 0.0 },
        "optimizer": { "lr": 0.003 }
    })
}
