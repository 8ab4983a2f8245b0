use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::detector::{Bbox, Detection, Domain};
use crate::synthdata::{render_split, DomainShift, SceneParams};

fn small_cfg() -> TrainConfig {
    TrainConfig {
        total_steps: 12,
        lr_decay_step: 8,
        launch_instance: 4,
        launch_corr: 8,
        ..TrainConfig::default()
    }
}

fn data(n: usize) -> (Vec<Sample>, Vec<Tensor>) {
    let p = SceneParams::default();
    let s = render_split(11, n, Domain::Source, &p, &DomainShift::default()).unwrap();
    let t = render_split(12, n, Domain::Target, &p, &DomainShift::default())
        .unwrap()
        .into_iter()
        .map(|x| x.image)
        .collect();
    (s, t)
}

fn det(image_box: Bbox, score: f64, label: usize) -> Detection {
    let mut post = vec![0.0; 4];
    post[label] = score;
    post[3] = 1.0 - score;
    Detection {
        bbox: image_box,
        class_posterior: post,
        domain: Domain::Target,
        score,
    }
}

fn gt1(b: Bbox, label: usize) -> GroundTruth {
    GroundTruth {
        boxes: vec![b],
        labels: vec![label],
    }
}

// ---- evaluator ----

#[test]
fn single_good_detection_scores_full_ap() {
    let g = Bbox::new(10.0, 10.0, 30.0, 30.0);
    let d = Bbox::new(10.0, 10.0, 30.0, 28.0);
    assert!(d.iou(&g) >= 0.9);
    for score in [0.06, 0.5, 0.99] {
        let r = evaluate_detections(3, &[(vec![det(d, score, 1)], gt1(g, 1))]).unwrap();
        assert_eq!(r.ap[1], Some(1.0));
        assert_eq!(r.ap[0], None);
        assert_eq!(r.map, 1.0);
    }
}

#[test]
fn duplicate_detection_is_a_false_positive() {
    let g = Bbox::new(10.0, 10.0, 30.0, 30.0);
    let dets = [(0, 0.9, g), (0, 0.8, Bbox::new(11.0, 10.0, 30.0, 30.0))];
    let flags = match_detections(&dets, &[vec![g]]);
    assert_eq!(flags, vec![(0.9, true), (0.8, false)]);
    // recall reaches 1 at precision 1 on the first detection
    assert_eq!(average_precision(&dets, &[vec![g]]), Some(1.0));
    // reversed scores: the true positive comes second
    let dets = [(0, 0.9, Bbox::new(40.0, 40.0, 50.0, 50.0)), (0, 0.8, g)];
    assert_eq!(average_precision(&dets, &[vec![g]]), Some(0.5));
}

#[test]
fn mixed_case_by_hand() {
    // two images, 5 GT, 8 detections; TP/FP sequence by score:
    // T F T T F F T F  -> precisions 1, 1/2, 2/3, 3/4, 3/5, 3/6, 4/7, 4/8
    let b = |x: f64, y: f64| Bbox::new(x, y, x + 10.0, y + 10.0);
    let gts = vec![vec![b(0.0, 0.0), b(20.0, 0.0), b(40.0, 0.0)], vec![b(0.0, 20.0), b(20.0, 20.0)]];
    let dets = vec![
        (0, 0.95, b(0.0, 0.0)),
        (0, 0.90, b(0.5, 0.0)),
        (1, 0.85, b(0.0, 20.0)),
        (0, 0.80, b(20.0, 1.0)),
        (1, 0.70, b(50.0, 50.0)),
        (0, 0.60, b(20.0, 0.0)),
        (1, 0.50, b(21.0, 20.0)),
        (0, 0.40, b(60.0, 0.0)),
    ];
    let flags: Vec<bool> = match_detections(&dets, &gts).into_iter().map(|x| x.1).collect();
    assert_eq!(flags, vec![true, false, true, true, false, false, true, false]);
    // envelope: 1, 3/4, 3/4, 3/4, 4/7, 4/7, 4/7, 1/2; recall steps of 1/5 at ranks 1, 3, 4, 7
    let want = 0.2 * (1.0 + 0.75 + 0.75 + 4.0 / 7.0);
    assert!((average_precision(&dets, &gts).unwrap() - want).abs() < 1e-15);
}

#[test]
fn ties_keep_input_order() {
    let g = Bbox::new(0.0, 0.0, 10.0, 10.0);
    let miss = Bbox::new(30.0, 30.0, 40.0, 40.0);
    assert_eq!(average_precision(&[(0, 0.5, miss), (0, 0.5, g)], &[vec![g]]), Some(0.5));
    assert_eq!(average_precision(&[(0, 0.5, g), (0, 0.5, miss)], &[vec![g]]), Some(1.0));
}

#[test]
fn empty_class_is_excluded_and_no_gt_is_an_error() {
    let g = Bbox::new(0.0, 0.0, 10.0, 10.0);
    let r = evaluate_detections(3, &[(vec![det(g, 0.9, 2), det(g, 0.9, 0)], gt1(g, 0))]).unwrap();
    assert_eq!(r.ap, vec![Some(1.0), None, None]);
    assert_eq!(r.map, 1.0);
    assert_eq!(r.detection_counts, vec![1, 0, 1]);
    assert_eq!(r.gt_counts, vec![1, 0, 0]);
    let empty = GroundTruth {
        boxes: vec![],
        labels: vec![],
    };
    assert!(evaluate_detections(3, &[(vec![det(g, 0.9, 0)], empty)]).is_err());
}

/// Independent reference: for every prefix of the score-sorted list, redo
/// the greedy matching from scratch, then integrate the max-precision
/// envelope over recall increments.
fn oracle_ap(dets: &[(usize, f64, Bbox)], gts: &[Vec<Bbox>]) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut sorted: Vec<(usize, f64, Bbox)> = dets.to_vec();
    // insertion sort keeps ties in input order
    for i in 1..sorted.len() {
        let mut j = i;
        while j > 0 && sorted[j - 1].1 < sorted[j].1 {
            sorted.swap(j - 1, j);
            j -= 1;
        }
    }
    let tp_in_prefix = |k: usize| {
        let mut used = vec![vec![false; 10]; gts.len()];
        let mut tp = 0usize;
        for &(img, _, b) in &sorted[..k] {
            let mut best_j = usize::MAX;
            let mut best = -1.0;
            for (j, t) in gts[img].iter().enumerate() {
                if b.iou(t) > best {
                    best = b.iou(t);
                    best_j = j;
                }
            }
            if best_j != usize::MAX && best >= 0.5 && !used[img][best_j] {
                used[img][best_j] = true;
                tp += 1;
            }
        }
        tp
    };
    let n = sorted.len();
    let prec: Vec<f64> = (1..=n).map(|k| tp_in_prefix(k) as f64 / k as f64).collect();
    let rec: Vec<f64> = (1..=n).map(|k| tp_in_prefix(k) as f64 / n_gt as f64).collect();
    let mut ap = 0.0;
    for k in 0..n {
        let prev = if k == 0 { 0.0 } else { rec[k - 1] };
        let env = prec[k..].iter().copied().fold(0.0, f64::max);
        ap += (rec[k] - prev) * env;
    }
    Some(ap)
}

#[test]
fn ap_matches_bruteforce_oracle_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0.0..40.0);
        let y = rng.random_range(0.0..40.0);
        Bbox::new(x, y, x + rng.random_range(4.0..20.0), y + rng.random_range(4.0..20.0))
    };
    for _ in 0..200 {
        let n_img = rng.random_range(1..=3);
        let mut gts = vec![Vec::new(); n_img];
        for _ in 0..rng.random_range(0..=10) {
            let i = rng.random_range(0..n_img);
            let b = rand_box(&mut rng);
            gts[i].push(b);
        }
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(0..=10) {
            let i = rng.random_range(0..n_img);
            // half jittered copies of a GT box, half random
            let b = match (gts[i].is_empty(), rng.random_bool(0.5)) {
                (false, true) => {
                    let g: Bbox = gts[i][rng.random_range(0..gts[i].len())];
                    let d = rng.random_range(-3.0..3.0);
                    Bbox::new(g.x1 + d, g.y1, g.x2 + d, g.y2)
                }
                _ => rand_box(&mut rng),
            };
            // coarse scores so ties occur
            let s = rng.random_range(0..5) as f64 / 4.0;
            dets.push((i, s, b));
        }
        assert_eq!(average_precision(&dets, &gts), oracle_ap(&dets, &gts), "{dets:?} {gts:?}");
    }
}

// ---- optimizer ----

#[test]
fn zero_gradient_step_from_rest_is_bit_identical() {
    let (mut store, _) = fresh_store();
    let before = store.digest(|_| true);
    let mut opt = Sgd::new(&store, 0.9);
    let grads = store.iter().map(|(_, _, t)| Some(vec![0.0; t.len()])).collect();
    opt.step(&mut store, grads, 1e-3).unwrap();
    let n = store.len();
    opt.step(&mut store, vec![None; n], 1e-3).unwrap();
    assert_eq!(store.digest(|_| true), before);
}

#[test]
fn momentum_accumulates_by_hand() {
    let mut store = ParamStore::new();
    let id = store.add("w", Tensor::from_slice(&[2], &[1.0, -1.0]).unwrap()).unwrap();
    let mut opt = Sgd::new(&store, 0.9);
    opt.step(&mut store, vec![Some(vec![1.0, 2.0])], 0.1).unwrap();
    assert_eq!(store.get(id).data(), &[1.0 - 0.1, -1.0 - 0.2]);
    // v = 0.9·[1, 2] + [0, 0]
    opt.step(&mut store, vec![None], 0.1).unwrap();
    let want = [0.9 - 0.1 * 0.9, -1.2 - 0.1 * 1.8];
    for (a, b) in store.get(id).data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
    assert!(opt.step(&mut store, vec![], 0.1).is_err());
}

fn fresh_store() -> (ParamStore, Model) {
    let mut store = ParamStore::new();
    let m = Model::init(&mut store, &TrainConfig::default()).unwrap();
    (store, m)
}

// ---- model construction ----

#[test]
fn absent_modules_register_no_parameters_and_leave_others_unchanged() {
    let mut none = TrainConfig::default();
    none.set_modes(Modes::SOURCE_ONLY);
    let mut a = ParamStore::new();
    let m = Model::init(&mut a, &none).unwrap();
    assert!(m.bank.is_none() && m.ins.is_none() && m.corr.is_none());
    assert!(a.iter().all(|(_, n, _)| crate::detector::Detector::is_detector_param(n)));
    let (b, full) = fresh_store();
    assert_eq!(full.ins.as_ref().unwrap().outputs(), 3);
    let det = |n: &str| crate::detector::Detector::is_detector_param(n);
    assert_eq!(a.digest(det), b.digest(det));

    let mut ins = TrainConfig::default();
    ins.set_modes(Modes {
        img: true,
        ins: true,
        cat: false,
        corr: false,
    });
    let mut c = ParamStore::new();
    let m = Model::init(&mut c, &ins).unwrap();
    assert_eq!(m.ins.unwrap().outputs(), 1);
    let img = |n: &str| n.starts_with("disc_img.");
    assert_eq!(b.digest(img), c.digest(img));
}

// ---- training loop ----

#[test]
fn source_only_never_reads_target_images() {
    let (s, t) = data(6);
    let mut cfg = small_cfg();
    cfg.set_modes(Modes::SOURCE_ONLY);
    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.run(&s, &t, |_| Ok(())).unwrap();
    let mut b = Trainer::new(cfg).unwrap();
    b.run(&s, &[], |_| Ok(())).unwrap();
    assert_eq!(a.store.digest(|_| true), b.store.digest(|_| true));
    // garbage target images make no difference either
    let junk: Vec<Tensor> = t.iter().map(|x| Tensor::full(x.shape(), 1e9)).collect();
    let mut c = Trainer::new(small_cfg_with(Modes::SOURCE_ONLY)).unwrap();
    c.run(&s, &junk, |_| Ok(())).unwrap();
    assert_eq!(a.store.digest(|_| true), c.store.digest(|_| true));
}

fn small_cfg_with(m: Modes) -> TrainConfig {
    let mut c = small_cfg();
    c.set_modes(m);
    c
}

#[test]
fn pre_launch_modules_leave_shared_parameters_untouched() {
    let (s, t) = data(6);
    let with = small_cfg_with(Modes::FULL);
    let without = small_cfg_with(Modes {
        img: true,
        ..Modes::SOURCE_ONLY
    });
    let mut a = Trainer::new(with.clone()).unwrap();
    let mut b = Trainer::new(without).unwrap();
    let mut rows = Vec::new();
    for _ in 0..with.launch_instance {
        let (si, ti) = a.next_indices(s.len(), t.len());
        rows.push(a.train_step(&s[si].image, &s[si].gt, ti.map(|i| &t[i])).unwrap());
        let (si, ti) = b.next_indices(s.len(), t.len());
        b.train_step(&s[si].image, &s[si].gt, ti.map(|i| &t[i])).unwrap();
    }
    let shared = |n: &str| !n.starts_with("disc_ins.") && !n.starts_with("corr.");
    assert_eq!(a.store.digest(shared), b.store.digest(shared));
    // the dormant modules themselves never moved
    let fresh = Trainer::new(with).unwrap();
    let dormant = |n: &str| !shared(n);
    assert_eq!(a.store.digest(dormant), fresh.store.digest(dormant));
    assert!(rows.iter().all(|r| r.cat == 0.0 && r.corr == 0.0 && r.active_flags == "img"));
}

#[test]
fn stopping_and_resuming_matches_one_run() {
    let (s, t) = data(6);
    let cfg = small_cfg_with(Modes::FULL);
    let mut a = Trainer::new(cfg.clone()).unwrap();
    a.run(&s, &t, |_| Ok(())).unwrap();
    let mut b = Trainer::new(cfg.clone()).unwrap();
    b.run_until(5, &s, &t, |_| Ok(())).unwrap();
    assert_eq!(b.step, 5);
    b.run_until(100, &s, &t, |_| Ok(())).unwrap();
    assert_eq!(b.step, cfg.total_steps);
    assert_eq!(a.store.digest(|_| true), b.store.digest(|_| true));
}

#[test]
fn late_launch_switches_terms_on() {
    let (s, t) = data(6);
    let mut cfg = small_cfg_with(Modes::FULL);
    cfg.corr_score = 0.0;
    let mut rows = Vec::new();
    Trainer::new(cfg.clone())
        .unwrap()
        .run(&s, &t, |r| {
            rows.push(r.clone());
            Ok(())
        })
        .unwrap();
    assert_eq!(rows.len(), 12);
    for r in &rows {
        assert!(r.det > 0.0 && r.levels.iter().all(|&l| l > 0.0));
        assert_eq!(r.ins, 0.0);
        if r.step < cfg.launch_instance {
            assert_eq!(r.cat, 0.0);
            assert_eq!(r.active_flags, "img");
        } else {
            assert!(r.active_flags.starts_with("img+cat"), "{}", r.active_flags);
        }
        if r.step < cfg.launch_corr {
            assert_eq!(r.corr, 0.0);
        }
        assert_eq!(r.lr, if r.step < 8 { 1e-3 } else { 1e-4 });
    }
    assert!(rows[4..].iter().any(|r| r.cat > 0.0));
    assert!(rows[8..].iter().any(|r| r.corr > 0.0));
}

#[test]
fn training_is_deterministic_and_writes_artifacts() {
    let (s, t) = data(4);
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_cfg_with(Modes::FULL);
    let a = train_to_dir(&cfg, &s, &t, &dir.path().join("a"), |_| {}).unwrap();
    let b = train_to_dir(&cfg, &s, &t, &dir.path().join("b"), |_| {}).unwrap();
    assert_eq!(a.store.digest(|_| true), b.store.digest(|_| true));
    let csv_a = std::fs::read_to_string(dir.path().join("a/metrics.csv")).unwrap();
    let csv_b = std::fs::read_to_string(dir.path().join("b/metrics.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let lines: Vec<&str> = csv_a.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 13);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 10));
    let loaded = ParamStore::load(dir.path().join("a/checkpoint.bin")).unwrap();
    assert_eq!(loaded.digest(|_| true), a.store.digest(|_| true));
    let r = evaluate(&loaded, &s, Domain::Source).unwrap();
    assert!((0.0..=1.0).contains(&r.map));
}

#[test]
fn image_only_run_logs_zero_instance_columns() {
    let (s, t) = data(4);
    let mut rows = Vec::new();
    Trainer::new(small_cfg_with(Modes {
        img: true,
        ..Modes::SOURCE_ONLY
    }))
    .unwrap()
    .run(&s, &t, |r| {
        rows.push(r.csv_row());
        Ok(())
    })
    .unwrap();
    for r in rows {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(&f[6..9], &["0", "0", "0"]);
        assert_eq!(f[9], "img");
    }
}

#[test]
fn divergence_aborts_with_diagnostic() {
    let (s, t) = data(4);
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_cfg_with(Modes::FULL);
    cfg.lr = 1e12;
    cfg.total_steps = 40;
    cfg.lr_decay_step = 40;
    cfg.launch_instance = 20;
    cfg.launch_corr = 30;
    let err = train_to_dir(&cfg, &s, &t, dir.path(), |_| {}).err().expect("must diverge");
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    let d: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("diagnostic.json")).unwrap()).unwrap();
    assert!(d["failed_step"].as_u64().unwrap() >= 1);
    assert!(d["last_completed"]["det"].is_number());
    assert!(!dir.path().join("checkpoint.bin").exists());
}

// ---- gradient check ----

#[test]
fn grad_check_passes_on_probe_pair() {
    let (s, t) = data(2);
    let mut cfg = TrainConfig::default();
    cfg.set_modes(Modes::FULL);
    let r = grad_check(&cfg, &s[0].image, &s[0].gt, &t[0], 8).unwrap();
    assert!(r.passed, "{}", r.summary());
    assert_eq!(r.entries.len(), 6 * 8);
    // every module gets some gradient signal
    for m in ["backbone", "rpn", "head", "disc_img", "disc_ins", "corr"] {
        assert!(r.entries.iter().any(|e| e.module == m && e.analytic != 0.0), "{m}: {}", r.summary());
    }
    let again = grad_check(&cfg, &s[0].image, &s[0].gt, &t[0], 8).unwrap();
    assert_eq!(r, again);
}

#[test]
fn grad_check_without_reversal_weight_sees_detection_loss_only() {
    let (s, t) = data(2);
    let mut cfg = TrainConfig::default();
    cfg.lambda_adv = 0.0;
    let with = grad_check(&cfg, &s[0].image, &s[0].gt, &t[0], 6).unwrap();
    assert!(with.passed, "{}", with.summary());
    cfg.set_modes(Modes::SOURCE_ONLY);
    let without = grad_check(&cfg, &s[0].image, &s[0].gt, &t[0], 6).unwrap();
    for (a, b) in with.entries.iter().zip(&without.entries) {
        assert_eq!(a.path, b.path);
        assert_eq!(a.analytic, b.analytic, "{}", a.path);
    }
}
