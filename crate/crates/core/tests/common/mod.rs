#![allow(dead_code)]

pub mod grad;

use std::path::Path;
use std::sync::Arc;

use frozen_align::store::{write_store, FeatureRecord, Modality, PairedDataset, StoreHandle};
use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian<F: frozen_align::Float>(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let v: f64 = StandardNormal.sample(rng);
        F::from(v).unwrap()
    })
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f32> {
    let mut m = gaussian::<f32>(rows, cols, rng);
    for mut r in m.rows_mut() {
        let n = r.dot(&r).sqrt();
        r /= n;
    }
    m
}

pub fn records(prefix: &str, m: ArrayView2<f32>) -> Vec<FeatureRecord> {
    m.rows().into_iter().enumerate().map(|(i, r)| FeatureRecord::new(format!("{prefix}{i}"), r.to_vec())).collect()
}

pub fn store_from(path: &Path, modality: Modality, records: Vec<FeatureRecord>) -> Arc<StoreHandle> {
    let dim = records[0].vector.len();
    write_store(records, dim, modality, path).unwrap();
    Arc::new(StoreHandle::open(path).unwrap())
}

/// Images `img{i}` with captions `cap{i}_{j}`; every caption is a noisy
/// linear image of its image's vision feature.
pub fn paired_toy(
    dir: &Path,
    n_images: usize,
    captions_per_image: usize,
    text_dim: usize,
    vision_dim: usize,
    noise: f32,
    seed: u64,
) -> PairedDataset {
    let mut r = rng(seed);
    let vision = gaussian::<f32>(n_images, vision_dim, &mut r);
    let mix = gaussian::<f32>(vision_dim, text_dim, &mut r);
    let mut text_records = Vec::new();
    let mut pairs = Vec::new();
    for i in 0..n_images {
        let base = vision.row(i).dot(&mix);
        let mut caps = Vec::new();
        for j in 0..captions_per_image {
            let id = format!("cap{i}_{j}");
            let noise_vec = gaussian::<f32>(1, text_dim, &mut r).row(0).to_owned() * noise;
            text_records.push(FeatureRecord::new(&id, (&base + &noise_vec).to_vec()));
            caps.push(id);
        }
        pairs.push((format!("img{i}"), caps));
    }
    let v = store_from(&dir.join("vision.fst"), Modality::Vision, records("img", vision.view()));
    let t = store_from(&dir.join("text.fst"), Modality::Text, text_records);
    PairedDataset::new(v, t, pairs).unwrap()
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// `|a − b| / max(|a| + |b|, floor)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Term-by-term symmetric InfoNCE in f64 with plain `exp`/`ln`:
/// `(mean_i −ln softmax_row_i[i] + mean_i −ln softmax_col_i[i]) / 2`.
/// Returns `(total, t2i, i2t)`.
pub fn brute_force_infonce(img: ArrayView2<f64>, txt: ArrayView2<f64>, tau: f64) -> (f64, f64, f64) {
    let n = img.nrows();
    let s = |i: usize, j: usize| img.row(i).dot(&txt.row(j)) / tau;
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        let row: f64 = (0..n).map(|j| s(i, j).exp()).sum();
        i2t += -(s(i, i).exp() / row).ln();
        let col: f64 = (0..n).map(|j| s(j, i).exp()).sum();
        t2i += -(s(i, i).exp() / col).ln();
    }
    let (t2i, i2t) = (t2i / n as f64, i2t / n as f64);
    ((t2i + i2t) / 2.0, t2i, i2t)
}

/// Gram–Schmidt on Gaussian rows: `n ≤ d` orthonormal rows.
pub fn orthonormal_rows(n: usize, d: usize, rng: &mut impl Rng) -> Array2<f32> {
    let mut m = gaussian::<f64>(n, d, rng);
    for i in 0..n {
        for j in 0..i {
            let proj = m.row(i).dot(&m.row(j));
            let rj = m.row(j).to_owned();
            m.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = m.row(i).dot(&m.row(i)).sqrt();
        m.row_mut(i).mapv_inplace(|v| v / norm);
    }
    m.mapv(|v| v as f32)
}

/// Eight pairs, vision 8-d orthonormal, text 16-d: the vision vector
/// repeated twice plus fixed Gaussian noise.
pub fn overfit_toy(dir: &Path, seed: u64) -> PairedDataset {
    let mut r = rng(seed);
    let vision = orthonormal_rows(8, 8, &mut r);
    let noise = gaussian::<f32>(8, 16, &mut r) * 0.1;
    let text = ndarray::concatenate(ndarray::Axis(1), &[vision.view(), vision.view()]).unwrap() + noise;
    let v = store_from(&dir.join("vision.fst"), Modality::Vision, records("img", vision.view()));
    let t = store_from(&dir.join("text.fst"), Modality::Text, records("cap", text.view()));
    let pairs = (0..8).map(|i| (format!("img{i}"), vec![format!("cap{i}")])).collect();
    PairedDataset::new(v, t, pairs).unwrap()
}

pub struct OverfitOutcome {
    pub final_loss: f64,
    pub self_retrieved: usize,
    pub steps: u64,
    pub secs: f64,
}

/// 500 full-batch steps on [`overfit_toy`], then eval-mode self-retrieval.
pub fn overfit(dir: &Path) -> OverfitOutcome {
    use frozen_align::optimizer::AdamConfig;
    use frozen_align::projection::ProjectionConfig;
    use frozen_align::trainer::{embed_pairs, TrainConfig, Trainer};

    let data = overfit_toy(dir, 5);
    let config = TrainConfig { batch_size: 8, max_steps: 500, seed: 5, ..TrainConfig::default() };
    let projection = ProjectionConfig { dropout_p: 0.0, seed: 5, ..ProjectionConfig::new(16, 64, 8, 2) };
    let optimizer = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
    let started = std::time::Instant::now();
    let mut trainer = Trainer::new(config, projection, optimizer, data.clone(), None).unwrap();
    let report = trainer.run(None).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let (img, txt) = embed_pairs(trainer.net(), &data).unwrap();
    let sims = txt.dot(&img.t());
    let self_retrieved = (0..8)
        .filter(|&i| (0..8).all(|j| j == i || sims[[i, j]] < sims[[i, i]]))
        .count();
    OverfitOutcome { final_loss: report.final_train_loss.unwrap(), self_retrieved, steps: report.steps_run, secs }
}

/// Six classes with centroids evenly spaced on a circle in the first two of
/// four dimensions. Classes 2 and 5 are unseen, each lying between two seen
/// neighbours. Images and the ten texts per class are centroid plus noise.
pub fn viterb_toy(dir: &Path, seed: u64, images_per_class: usize) -> frozen_align::viterb::ViterbTask {
    use frozen_align::class_reps::{ClassRepresentationSet, RepresentationKind};
    use frozen_align::viterb::{ViterbSplit, ViterbTask};

    let d = 4;
    let mut r = rng(seed);
    let classes: Vec<String> = (0..6).map(|c| format!("k{c}")).collect();
    let centroids = Array2::from_shape_fn((6, d), |(c, j)| {
        let a = std::f32::consts::TAU * c as f32 / 6.0;
        [a.cos(), a.sin(), 0.0, 0.0][j]
    });
    let unseen = [2usize, 5];
    let mut vision = Vec::new();
    let mut train_labels = Vec::new();
    let mut eval_labels = Vec::new();
    for (c, class) in classes.iter().enumerate() {
        let noisy = gaussian::<f32>(images_per_class, d, &mut r) * 0.15 + &centroids.row(c);
        for (i, row) in noisy.rows().into_iter().enumerate() {
            let id = format!("{class}/img{i}");
            vision.push(FeatureRecord::new(&id, row.to_vec()));
            if !unseen.contains(&c) { &mut train_labels } else { &mut eval_labels }.push((id, class.clone()));
        }
    }
    let per_class: Vec<(String, Vec<String>)> =
        classes.iter().map(|c| (c.clone(), (0..10).map(|i| format!("text {i} for {c}")).collect())).collect();
    let reps = ClassRepresentationSet::from_texts(RepresentationKind::Description, per_class).unwrap();
    let mut text = Vec::new();
    for (c, list) in reps.texts.iter().enumerate() {
        let noisy = gaussian::<f32>(list.len(), d, &mut r) * 0.15 + &centroids.row(c);
        for (t, row) in list.iter().zip(noisy.rows()) {
            text.push(FeatureRecord::new(&t.id, row.to_vec()));
        }
    }
    let split = ViterbSplit::new(
        format!("toy{seed}"),
        (0..6).filter(|c| !unseen.contains(c)).map(|c| classes[c].clone()).collect(),
        unseen.iter().map(|&c| classes[c].clone()).collect(),
        "toy",
    ).unwrap();
    ViterbTask {
        split,
        vision: store_from(&dir.join("vision.fst"), Modality::Vision, vision),
        text: store_from(&dir.join("text.fst"), Modality::Text, text),
        train_labels,
        eval_labels,
        reps,
    }
}

pub fn viterb_settings(seed: u64, steps: u64) -> frozen_align::viterb::ViterbSettings {
    use frozen_align::optimizer::AdamConfig;
    use frozen_align::projection::ProjectionConfig;
    use frozen_align::trainer::TrainConfig;
    frozen_align::viterb::ViterbSettings {
        train: TrainConfig { batch_size: 32, max_steps: steps, val_fraction: 0.05, val_interval: 50, seed, ..TrainConfig::default() },
        projection: ProjectionConfig { dropout_p: 0.0, seed, ..ProjectionConfig::new(4, 32, 4, 2) },
        optimizer: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
    }
}

/// Trained unseen per-class accuracy on the separable toy.
pub fn viterb_separable(dir: &Path, seed: u64) -> f64 {
    let task = viterb_toy(dir, seed, 50);
    frozen_align::viterb::run_viterb(&task, &viterb_settings(seed, 300)).unwrap().0.unseen_accuracy
}

/// Train once, then score with the unseen texts randomly reassigned across
/// the unseen classes, `trials` times. Returns the per-trial accuracies.
pub fn viterb_shuffled(dir: &Path, seed: u64, trials: usize) -> Vec<f64> {
    use frozen_align::class_reps::ClassRepresentationSet;
    use rand::seq::SliceRandom;
    let task = viterb_toy(dir, seed, 50);
    let (_, net) = frozen_align::viterb::run_viterb(&task, &viterb_settings(seed, 300)).unwrap();
    let unseen = task.reps.restrict(&task.split.unseen).unwrap();
    let sizes: Vec<usize> = unseen.texts.iter().map(Vec::len).collect();
    let mut r = rng(seed ^ 0x5eed);
    (0..trials)
        .map(|_| {
            let mut pool: Vec<_> = unseen.texts.iter().flatten().cloned().collect();
            pool.shuffle(&mut r);
            let mut lists = Vec::new();
            for &n in &sizes {
                lists.push(pool.drain(..n).collect());
            }
            let shuffled = ClassRepresentationSet::new(unseen.kind, unseen.classes.clone(), lists).unwrap();
            frozen_align::viterb::evaluate_unseen(&task, &net, &shuffled).unwrap().metric("per_class_mean").unwrap()
        })
        .collect()
}

/// Unseen accuracy of untrained nets, one per seed.
pub fn viterb_untrained(dir: &Path, seeds: std::ops::Range<u64>) -> Vec<f64> {
    let task = viterb_toy(dir, 0, 50);
    seeds
        .map(|s| frozen_align::viterb::run_viterb(&task, &viterb_settings(s, 0)).unwrap().0.unseen_accuracy)
        .collect()
}

/// Each deliberately contaminated variant of the toy, with whether it was
/// rejected as a leak (or, for overlapping splits, as an overlap).
pub fn viterb_contamination(dir: &Path) -> Vec<(&'static str, bool)> {
    use frozen_align::class_reps::ClassRepresentationSet;
    use frozen_align::viterb::{run_viterb, ViterbSplit};
    use frozen_align::Error;
    let base = viterb_toy(dir, 0, 10);
    let settings = viterb_settings(0, 20);
    let leaks = |task: &frozen_align::viterb::ViterbTask| matches!(run_viterb(task, &settings), Err(Error::LeakDetected(_)));

    let mut unseen_label = base.clone();
    unseen_label.train_labels.push(("k2/img0".into(), "k2".into()));

    let mut shared_image = base.clone();
    shared_image.train_labels.push(("k5/img3".into(), "k0".into()));

    let mut shared_text = base.clone();
    let mut texts = shared_text.reps.texts.clone();
    let stolen = texts[2][0].clone();
    texts[1].push(stolen);
    shared_text.reps = ClassRepresentationSet::new(base.reps.kind, base.reps.classes.clone(), texts).unwrap();

    let overlap = ViterbSplit::new("toy", vec!["k0".into(), "k2".into()], vec!["k2".into(), "k5".into()], "toy");
    vec![
        ("clean split trains", run_viterb(&base, &settings).is_ok()),
        ("unseen-class training image", leaks(&unseen_label)),
        ("image in train and eval", leaks(&shared_image)),
        ("text shared by seen and unseen", leaks(&shared_text)),
        ("overlapping seen/unseen classes", matches!(overlap, Err(Error::OverlapDetected(ref c)) if c == &["k2".to_string()])),
    ]
}

/// Stores of random features and an untrained projection, so that every
/// image-text similarity is random.
pub struct RandomWorld {
    pub vision: Arc<StoreHandle>,
    pub text: Arc<StoreHandle>,
    pub net: frozen_align::projection::ProjectionNet<f32>,
}

pub fn random_world(dir: &Path, seed: u64, images: usize, texts: usize) -> RandomWorld {
    use frozen_align::projection::{ProjectionConfig, ProjectionNet};
    let mut r = rng(seed);
    let (text_dim, dim) = (32, 64);
    RandomWorld {
        vision: store_from(&dir.join("v.fst"), Modality::Vision, records("i", gaussian::<f32>(images, dim, &mut r).view())),
        text: store_from(&dir.join("t.fst"), Modality::Text, records("t", gaussian::<f32>(texts, text_dim, &mut r).view())),
        net: ProjectionNet::init(ProjectionConfig { seed, ..ProjectionConfig::new(text_dim, 128, dim, 2) }).unwrap(),
    }
}

/// Binomial standard deviation of a percentage over `n` trials.
pub fn pct_sigma(p: f64, n: usize) -> f64 {
    100.0 * (p * (1.0 - p) / n as f64).sqrt()
}

/// Winoground text/image/group scores on `n` items of random unit
/// embeddings in `d` dimensions.
pub fn winoground_chance(seed: u64, n: usize, d: usize) -> [f64; 3] {
    use frozen_align::eval::{winoground_from_verdicts, winoground_verdict};
    let mut r = rng(seed);
    let (img, txt) = (unit_rows(2 * n, d, &mut r), unit_rows(2 * n, d, &mut r));
    let verdicts: Vec<_> = (0..n)
        .map(|k| {
            let s = |c: usize, i: usize| txt.row(2 * k + c).dot(&img.row(2 * k + i));
            winoground_verdict([[s(0, 0), s(0, 1)], [s(1, 0), s(1, 1)]])
        })
        .collect();
    let rep = winoground_from_verdicts(&verdicts, "random", false).unwrap();
    ["text", "image", "group"].map(|m| rep.metric(m).unwrap())
}

/// Caption-choice accuracy on `n` items of random unit embeddings.
pub fn caption_choice_chance(seed: u64, n: usize, d: usize) -> f64 {
    let mut r = rng(seed);
    let (img, txt) = (unit_rows(n, d, &mut r), unit_rows(2 * n, d, &mut r));
    let scores: Vec<(f32, f32)> = (0..n).map(|k| (img.row(k).dot(&txt.row(2 * k)), img.row(k).dot(&txt.row(2 * k + 1)))).collect();
    frozen_align::eval::caption_choice_from_scores(&scores, "random").unwrap().metric("accuracy").unwrap()
}

/// Text-to-image Recall@`k` over `n` random unit pairs, one value per seed.
pub fn retrieval_chance(n: usize, k: usize, seeds: std::ops::Range<u64>) -> Vec<f64> {
    seeds
        .map(|s| {
            let mut r = rng(s);
            let (img, txt) = (unit_rows(n, 16, &mut r), unit_rows(n, 16, &mut r));
            let pairs: Vec<usize> = (0..n).collect();
            let rep = frozen_align::eval::eval_retrieval(img.view(), txt.view(), &pairs, k, "random").unwrap();
            rep.metric(&format!("t2i_recall@{k}")).unwrap()
        })
        .collect()
}

/// The exact bytes a two-record text store must have.
pub fn golden_bytes() -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(b"FSTORE01");
    b.extend_from_slice(&1u32.to_le_bytes()); // version
    b.extend_from_slice(&3u32.to_le_bytes()); // dim
    b.extend_from_slice(&2u64.to_le_bytes()); // count
    b.extend_from_slice(&1u32.to_le_bytes()); // modality: text
    b.extend_from_slice(&0u32.to_le_bytes()); // reserved
    b.extend_from_slice(&(40u64 + 2 * 3 * 4).to_le_bytes());
    for v in [1.0f32, -2.5, 0.125, f32::MIN_POSITIVE, 3.0e7, -0.0] {
        b.extend_from_slice(&v.to_le_bytes());
    }
    for off in [0u64, 1, 5] {
        b.extend_from_slice(&off.to_le_bytes());
    }
    b.extend_from_slice("aβcd".as_bytes()); // "a" then "βcd" (β is two bytes)
    b
}

pub fn golden_records() -> Vec<FeatureRecord> {
    vec![
        FeatureRecord::new("a", vec![1.0, -2.5, 0.125]),
        FeatureRecord::new("βcd", vec![f32::MIN_POSITIVE, 3.0e7, -0.0]),
    ]
}

/// Train losses and final net of a short fixed-seed run.
pub fn short_run(dir: &Path, seed: u64, steps: u64) -> (Vec<f64>, frozen_align::projection::ProjectionNet<f32>) {
    use frozen_align::optimizer::AdamConfig;
    use frozen_align::trainer::{train, TrainConfig};
    let data = paired_toy(dir, 40, 3, 12, 6, 0.3, 11);
    let config = TrainConfig { batch_size: 8, max_steps: steps, val_interval: 5, val_fraction: 0.1, seed, ..TrainConfig::default() };
    let (report, net) = train(&config, &small_projection(seed), &AdamConfig::default(), &data, None).unwrap();
    (report.history.iter().map(|e| e.train_loss).collect(), net)
}

pub fn small_projection(seed: u64) -> frozen_align::projection::ProjectionConfig {
    frozen_align::projection::ProjectionConfig { seed, dropout_p: 0.1, ..frozen_align::projection::ProjectionConfig::new(12, 16, 6, 3) }
}

/// Whether training 10 steps, checkpointing, and resuming to 20 ends in the
/// bitwise-same state as 20 uninterrupted steps.
pub fn resume_matches(dir: &Path) -> bool {
    use frozen_align::checkpoint::Checkpoint;
    use frozen_align::optimizer::AdamConfig;
    use frozen_align::trainer::{split_train_val, TrainConfig, Trainer};
    let data = paired_toy(dir, 40, 3, 12, 6, 0.3, 11);
    let (tr, va) = split_train_val(&data, 0.1, 2).unwrap();
    let cfg = |steps| TrainConfig { batch_size: 8, max_steps: steps, val_interval: 4, seed: 2, ..TrainConfig::default() };

    let mut straight = Trainer::new(cfg(20), small_projection(2), AdamConfig::default(), tr.clone(), Some(va.clone())).unwrap();
    straight.run(None).unwrap();

    let out = dir.join("half");
    let mut first = Trainer::new(cfg(10), small_projection(2), AdamConfig::default(), tr.clone(), Some(va.clone())).unwrap();
    first.run(Some(&out)).unwrap();
    let ckpt = Checkpoint::load(out.join("last.ckpt")).unwrap();
    let mut second = Trainer::resume(cfg(20), ckpt, tr, Some(va)).unwrap();
    second.run(None).unwrap();

    second.net() == straight.net()
        && second.checkpoint().adam == straight.checkpoint().adam
        && second.progress() == straight.progress()
}
