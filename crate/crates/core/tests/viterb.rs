mod common;

use std::collections::HashSet;

use frozen_align::trainer::AccessLog;
use frozen_align::viterb::{audit_access, run_viterb};
use frozen_align::Error;
use tempfile::tempdir;

#[test]
fn separable_toy_transfers_to_unseen_classes() {
    for seed in 0..3 {
        let dir = tempdir().unwrap();
        let acc = common::viterb_separable(dir.path(), seed);
        assert!(acc > 90.0, "seed {seed}: {acc}");
    }
}

#[test]
fn shuffled_unseen_texts_fall_to_chance() {
    let dir = tempdir().unwrap();
    let accs = common::viterb_shuffled(dir.path(), 1, 60);
    let (mean, se) = common::mean_se(&accs);
    assert!((mean - 50.0).abs() < 3.0 * se, "{mean} ± {se}");
}

#[test]
fn untrained_net_is_at_chance() {
    let dir = tempdir().unwrap();
    let accs = common::viterb_untrained(dir.path(), 0..40);
    let (mean, se) = common::mean_se(&accs);
    assert!((mean - 50.0).abs() < 3.0 * se, "{mean} ± {se}");
}

#[test]
fn contaminated_splits_are_rejected() {
    let dir = tempdir().unwrap();
    for (case, ok) in common::viterb_contamination(dir.path()) {
        assert!(ok, "{case}");
    }
}

#[test]
fn training_reads_only_seen_rows() {
    let dir = tempdir().unwrap();
    let task = common::viterb_toy(dir.path(), 3, 10);
    let (entry, _) = run_viterb(&task, &common::viterb_settings(3, 30)).unwrap();
    assert_eq!((entry.seen_classes, entry.unseen_classes, entry.train_images, entry.eval_images), (4, 2, 40, 20));
    assert_eq!(entry.train_report.unwrap().steps_run, 30);

    let eval_row = task.vision.index_of("k2/img0").unwrap();
    let log = AccessLog { vision_rows: HashSet::from([0, eval_row]), text_rows: HashSet::new() };
    assert!(matches!(audit_access(&log, &HashSet::from([eval_row]), &HashSet::new()), Err(Error::LeakDetected(_))));
    assert!(audit_access(&log, &HashSet::new(), &HashSet::new()).is_ok());
}
