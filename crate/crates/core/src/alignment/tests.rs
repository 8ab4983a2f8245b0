use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::detector::DetectorConfig;
use crate::rng::normal_tensor;
use crate::tensor::tests::{fd_max_rel_err, fd_max_rel_err_scaled};

const CH: [usize; 4] = [16, 32, 64, 64];

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).item().unwrap()
}

fn constant(g: &mut Graph, shape: &[usize], v: f64) -> Var {
    g.constant(Tensor::full(shape, v))
}

fn column(g: &mut Graph, vals: &[f64]) -> Var {
    g.constant(Tensor::from_slice(&[vals.len(), 1], vals).unwrap())
}

fn test_image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    normal_tensor(&mut rng, &[1, 3, 64, 64], 0.5)
}

fn random_pyramid(g: &mut Graph, seed: u64) -> FeaturePyramid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = [16, 8, 4, 4];
    let mut v = Vec::new();
    for l in 0..4 {
        let t = normal_tensor(&mut rng, &[1, CH[l], sizes[l], sizes[l]], 1.0);
        v.push(g.leaf(t, true));
    }
    FeaturePyramid {
        levels: [v[0], v[1], v[2], v[3]],
    }
}

#[test]
fn perfect_discrimination_costs_nothing() {
    let mut g = Graph::new();
    let s = constant(&mut g, &[1, 1, 4, 4], 0.0);
    let t = constant(&mut g, &[1, 1, 4, 4], 1.0);
    let l = least_squares_loss(&mut g, Some(s), Some(t)).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
}

#[test]
fn undecided_discriminator_costs_half_per_level() {
    let mut g = Graph::new();
    let s = constant(&mut g, &[1, 1, 8, 8], 0.5);
    let t = constant(&mut g, &[1, 1, 8, 8], 0.5);
    let l = least_squares_loss(&mut g, Some(s), Some(t)).unwrap();
    assert!((scalar(&g, l) - 0.5).abs() < 1e-12);
}

#[test]
fn image_loss_sums_four_undecided_levels_to_two() {
    let mut store = ParamStore::new();
    let bank = ImageDomainClassifierBank::init(&mut store, CH, 64, 3).unwrap();
    // zero final layers make every level output sigmoid(0) = 0.5
    for l in 1..=4 {
        let id = store.id(&format!("disc_img.l{l}.conv3.weight")).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let s = random_pyramid(&mut g, 1);
    let t = random_pyramid(&mut g, 2);
    let loss = bank.image_level_loss(&mut g, &p, &s, &t, [1.0; 4]).unwrap();
    for lv in loss.levels {
        assert!((scalar(&g, lv) - 0.5).abs() < 1e-12);
    }
    assert!((scalar(&g, loss.total) - 2.0).abs() < 1e-12);
}

#[test]
fn image_discriminator_output_matches_level_size() {
    let mut store = ParamStore::new();
    let bank = ImageDomainClassifierBank::init(&mut store, CH, 64, 3).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let pyr = random_pyramid(&mut g, 5);
    for l in 0..4 {
        let d = bank.forward(&mut g, &p, l, pyr.levels[l]).unwrap();
        let fs = g.shape(pyr.levels[l]).to_vec();
        assert_eq!(g.shape(d), &[1, 1, fs[2], fs[3]]);
        assert!(g.value(d).data().iter().all(|&x| x > 0.0 && x < 1.0));
    }
}

#[test]
fn agnostic_instance_hand_case() {
    let mut g = Graph::new();
    let s = column(&mut g, &[0.3]);
    let t = column(&mut g, &[0.6]);
    let l = instance_agnostic_loss(&mut g, Some(s), Some(t)).unwrap();
    assert!((scalar(&g, l.value) - 0.25).abs() < 1e-12);
    assert!(!l.skipped);

    let s = column(&mut g, &[0.0, 0.0]);
    let t = column(&mut g, &[1.0]);
    let l = instance_agnostic_loss(&mut g, Some(s), Some(t)).unwrap();
    assert_eq!(scalar(&g, l.value), 0.0);
}

#[test]
fn duplicating_proposals_keeps_the_mean() {
    let mut g = Graph::new();
    let s = column(&mut g, &[0.3, 0.8]);
    let t = column(&mut g, &[0.6, 0.1, 0.45]);
    let once = instance_agnostic_loss(&mut g, Some(s), Some(t)).unwrap().value;
    let s2 = column(&mut g, &[0.3, 0.8, 0.3, 0.8]);
    let t2 = column(&mut g, &[0.6, 0.1, 0.45, 0.6, 0.1, 0.45]);
    let twice = instance_agnostic_loss(&mut g, Some(s2), Some(t2)).unwrap().value;
    assert!((scalar(&g, once) - scalar(&g, twice)).abs() < 1e-15);
}

#[test]
fn empty_side_is_skipped_and_zero() {
    let mut g = Graph::new();
    let t = column(&mut g, &[0.6]);
    let l = instance_agnostic_loss(&mut g, None, Some(t)).unwrap();
    assert!(l.skipped);
    assert!((scalar(&g, l.value) - 0.16).abs() < 1e-12);
}

#[test]
fn category_aware_hand_case() {
    let mut g = Graph::new();
    let d = g.constant(Tensor::from_slice(&[1, 2], &[0.2, 0.4]).unwrap());
    let post = vec![vec![0.7, 0.3, 0.0]];
    let l = instance_category_aware_loss(&mut g, Some((d, &post)), None).unwrap();
    assert!((scalar(&g, l.value) - 0.076).abs() < 1e-12);
    assert!(l.skipped);

    // target side: 0.7·0.64 + 0.3·0.36
    let l = instance_category_aware_loss(&mut g, None, Some((d, &post))).unwrap();
    assert!((scalar(&g, l.value) - 0.556).abs() < 1e-12);
}

#[test]
fn category_aware_weights_are_not_renormalized() {
    let mut g = Graph::new();
    let d = g.constant(Tensor::from_slice(&[1, 2], &[0.5, 0.5]).unwrap());
    let post = vec![vec![0.1, 0.1, 0.8]];
    let l = category_aware_term(&mut g, d, &post, Domain::Source).unwrap().unwrap();
    assert!((scalar(&g, l) - 0.2 * 0.25).abs() < 1e-12);
}

#[test]
fn background_dominated_instances_are_dropped() {
    let mut g = Graph::new();
    let d = g.constant(Tensor::from_slice(&[2, 2], &[0.2, 0.4, 0.9, 0.9]).unwrap());
    let post = vec![vec![0.7, 0.3, 0.0], vec![1e-7, 1e-7, 1.0 - 2e-7]];
    let l = category_aware_term(&mut g, d, &post, Domain::Source).unwrap().unwrap();
    assert!((scalar(&g, l) - 0.076).abs() < 1e-12);

    let only_bg = vec![vec![0.0, 0.0, 1.0]];
    let d1 = g.constant(Tensor::from_slice(&[1, 2], &[0.2, 0.4]).unwrap());
    assert!(category_aware_term(&mut g, d1, &only_bg, Domain::Source).unwrap().is_none());
}

#[test]
fn category_aware_factorizes_over_constant_outputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let v: f64 = rng.random_range(0.0..1.0);
        let r = rng.random_range(1..6);
        let mut g = Graph::new();
        let d = g.constant(Tensor::full(&[r, 3], v));
        let d1 = g.constant(Tensor::full(&[r, 1], v));
        let post: Vec<Vec<f64>> = (0..r)
            .map(|_| {
                let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.01..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|x| x / z).collect()
            })
            .collect();
        let aware = category_aware_term(&mut g, d, &post, Domain::Target).unwrap().unwrap();
        let plain = instance_agnostic_loss(&mut g, None, Some(d1)).unwrap().value;
        let mass: f64 = post.iter().map(|p| p[..3].iter().sum::<f64>()).sum::<f64>() / r as f64;
        assert!((scalar(&g, aware) - scalar(&g, plain) * mass).abs() < 1e-12);
    }
}

fn random_roi_features(rng: &mut ChaCha8Rng, r: usize, dim: usize) -> Tensor {
    normal_tensor(rng, &[r, dim], 1.0)
}

#[test]
fn single_class_aware_loss_equals_agnostic_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for trial in 0..25 {
        let mut store = ParamStore::new();
        let disc = InstanceDomainClassifier::init(&mut store, 98, 128, 1, trial).unwrap();
        let (rs, rt) = (rng.random_range(1..10), rng.random_range(1..10));
        let fs = random_roi_features(&mut rng, rs, 98);
        let ft = random_roi_features(&mut rng, rt, 98);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let xs = g.constant(fs);
        let xt = g.constant(ft);
        let ds = disc.forward(&mut g, &p, xs).unwrap();
        let dt = disc.forward(&mut g, &p, xt).unwrap();
        let ps = vec![vec![1.0, 0.0]; rs];
        let pt = vec![vec![1.0, 0.0]; rt];
        let aware = instance_category_aware_loss(&mut g, Some((ds, &ps)), Some((dt, &pt))).unwrap();
        let plain = instance_agnostic_loss(&mut g, Some(ds), Some(dt)).unwrap();
        assert!((scalar(&g, aware.value) - scalar(&g, plain.value)).abs() < 1e-12);
    }
}

#[test]
fn instance_discriminator_arity_and_range() {
    let mut store = ParamStore::new();
    let disc = InstanceDomainClassifier::init(&mut store, 40, 128, 3, 1).unwrap();
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = g.constant(random_roi_features(&mut rng, 5, 40));
    let d = disc.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(d), &[5, 3]);
    assert!(g.value(d).data().iter().all(|&v| v > 0.0 && v < 1.0));
    assert_eq!(disc.outputs(), 3);
}

fn corr_head(store: &mut ParamStore) -> CorrelationHead {
    CorrelationHead::init(store, CH, 256, 256, 7, 4).unwrap()
}

#[test]
fn refined_features_of_zero_pyramid_vanish() {
    let mut store = ParamStore::new();
    let head = corr_head(&mut store);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let sizes = [16, 8, 4, 4];
    let lv: Vec<Var> = (0..4)
        .map(|l| g.constant(Tensor::zeros(&[1, CH[l], sizes[l], sizes[l]])))
        .collect();
    let pyr = FeaturePyramid {
        levels: [lv[0], lv[1], lv[2], lv[3]],
    };
    let boxes = [Bbox::new(4.0, 4.0, 30.0, 22.0), Bbox::new(10.0, 20.0, 60.0, 63.0)];
    let (f, kept) = head.refine_instance_features(&mut g, &p, &pyr, &boxes).unwrap().unwrap();
    assert_eq!(kept, vec![0, 1]);
    assert_eq!(g.shape(f), &[2, 256]);
    assert!(g.value(f).data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_level_path_survives_when_others_are_zeroed() {
    let mut store = ParamStore::new();
    let head = corr_head(&mut store);
    for l in [1, 2, 4] {
        let id = store.id(&format!("corr.level{l}.weight")).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let bid = store.id("corr.level3.bias").unwrap();
    store.get_mut(bid).data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = 0.01 * i as f64);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let pyr = random_pyramid(&mut g, 8);
    let boxes = [Bbox::new(3.0, 5.0, 41.0, 33.0)];
    let (fused, _) = head.refine_instance_features(&mut g, &p, &pyr, &boxes).unwrap().unwrap();

    // direct evaluation of level 3 alone: ROI samples, 1×1 projection, average
    let roi = g.roi_align(pyr.levels[2], &[boxes[0].to_array()], 16.0, 7).unwrap();
    let roi = g.value(roi).clone();
    let w = store.get(store.id("corr.level3.weight").unwrap());
    let b = store.get(bid);
    let c = CH[2];
    for o in 0..256 {
        let mut acc = 0.0;
        for k in 0..49 {
            let mut v = b.data()[o];
            for ch in 0..c {
                v += w.data()[o * c + ch] * roi.data()[ch * 49 + k];
            }
            acc += v;
        }
        let want = acc / 49.0;
        assert!((g.value(fused).data()[o] - want).abs() < 1e-12, "channel {o}");
    }
}

#[test]
fn degenerate_boxes_are_skipped_in_refinement() {
    let mut store = ParamStore::new();
    let head = corr_head(&mut store);
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let pyr = random_pyramid(&mut g, 3);
    let boxes = [Bbox::new(5.0, 5.0, 5.5, 5.5), Bbox::new(0.0, 0.0, 20.0, 20.0)];
    let (f, kept) = head.refine_instance_features(&mut g, &p, &pyr, &boxes).unwrap().unwrap();
    assert_eq!(kept, vec![1]);
    assert_eq!(g.shape(f), &[1, 256]);
    let e = head.embed(&mut g, &p, f).unwrap();
    assert_eq!(g.shape(e), &[1, 256]);
    assert!(head
        .refine_instance_features(&mut g, &p, &pyr, &boxes[..1])
        .unwrap()
        .is_none());
}

fn embed_rows(g: &mut Graph, rows: &[[f64; 3]]) -> Var {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    g.constant(Tensor::from_slice(&[rows.len(), 3], &flat).unwrap())
}

fn pair(a: usize, b: usize, group: PairGroup) -> InstancePair {
    InstancePair { a, b, group }
}

#[test]
fn correlation_hand_case() {
    let mut g = Graph::new();
    let e = embed_rows(&mut g, &[[0.0; 3], [0.3, 0.4, 0.0], [1.0, 1.0, 1.0], [1.0, 1.0, 1.4]]);
    let pairs = [pair(0, 1, PairGroup::Sddc), pair(2, 3, PairGroup::Ddsc)];
    let l = correlation_loss(&mut g, e, &pairs, 1.0).unwrap();
    assert!((scalar(&g, l) - 0.61).abs() < 1e-12);
}

#[test]
fn correlation_terms_vanish_at_their_minima() {
    let mut g = Graph::new();
    let e = embed_rows(&mut g, &[[0.2, 0.1, 0.0], [0.2, 0.1, 0.0], [0.0; 3], [1.5, 0.0, 0.0]]);
    let far = [pair(2, 3, PairGroup::Ddsc)];
    let l = correlation_loss(&mut g, e, &far, 1.0).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    let same = [pair(0, 1, PairGroup::Sddc)];
    let l = correlation_loss(&mut g, e, &same, 1.0).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    // ignored groups and empty lists contribute nothing
    let other = [pair(0, 2, PairGroup::Sdsc), pair(1, 3, PairGroup::Dddc)];
    let l = correlation_loss(&mut g, e, &other, 1.0).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
    let l = correlation_loss(&mut g, e, &[], 1.0).unwrap();
    assert_eq!(scalar(&g, l), 0.0);
}

#[test]
fn correlation_loss_averages_within_groups() {
    let mut g = Graph::new();
    let e = embed_rows(&mut g, &[[0.0; 3], [0.5, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    // SDDC distances² 0.25 and 1.0; DDSC distance 0.5 → hinge 0.25
    let pairs = [pair(0, 1, PairGroup::Sddc), pair(0, 2, PairGroup::Sddc), pair(0, 1, PairGroup::Ddsc)];
    let l = correlation_loss(&mut g, e, &pairs, 1.0).unwrap();
    assert!((scalar(&g, l) - (0.625 + 0.25)).abs() < 1e-12);
}

#[test]
fn pair_group_definitions() {
    use Domain::*;
    assert_eq!(classify_pair((Source, 0), (Target, 0)), PairGroup::Ddsc);
    assert_eq!(classify_pair((Source, 0), (Source, 2)), PairGroup::Sddc);
    assert_eq!(classify_pair((Target, 1), (Target, 1)), PairGroup::Sdsc);
    assert_eq!(classify_pair((Target, 1), (Source, 2)), PairGroup::Dddc);
}

fn random_instances(rng: &mut ChaCha8Rng, max: usize) -> Vec<(Domain, usize)> {
    let n = rng.random_range(0..=max);
    (0..n)
        .map(|_| {
            let d = if rng.random_bool(0.5) { Domain::Source } else { Domain::Target };
            (d, rng.random_range(0..3))
        })
        .collect()
}

/// Independent reference: nested loops over ordered index pairs with i < j.
fn brute_force_groups(inst: &[(Domain, usize)]) -> [Vec<(usize, usize)>; 4] {
    let mut out: [Vec<(usize, usize)>; 4] = Default::default();
    for i in 0..inst.len() {
        for j in 0..inst.len() {
            if i >= j {
                continue;
            }
            let same_domain = inst[i].0 == inst[j].0;
            let same_class = inst[i].1 == inst[j].1;
            let k = if same_domain && same_class {
                0
            } else if same_domain {
                1
            } else if same_class {
                2
            } else {
                3
            };
            out[k].push((i, j));
        }
    }
    out
}

fn group_index(g: PairGroup) -> usize {
    match g {
        PairGroup::Sdsc => 0,
        PairGroup::Sddc => 1,
        PairGroup::Ddsc => 2,
        PairGroup::Dddc => 3,
    }
}

#[test]
fn pair_grouping_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for _ in 0..200 {
        let inst = random_instances(&mut rng, 40);
        let want = brute_force_groups(&inst);
        let mut got: [Vec<(usize, usize)>; 4] = Default::default();
        for p in all_pairs(&inst) {
            got[group_index(p.group)].push((p.a, p.b));
        }
        assert_eq!(got, want);
        let n = inst.len();
        assert_eq!(got.iter().map(Vec::len).sum::<usize>(), n * n.saturating_sub(1) / 2);

        let kept = build_pairs(&inst, usize::MAX, &mut rng);
        let mut expect: Vec<(usize, usize)> = want[1].clone();
        expect.extend(&want[2]);
        assert_eq!(kept.iter().map(|p| (p.a, p.b)).collect::<Vec<_>>(), expect);
    }
}

proptest! {
    #[test]
    fn capped_pairs_are_a_subset(seed in any::<u64>(), cap in 0usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = random_instances(&mut rng, 30);
        let full = brute_force_groups(&inst);
        let kept = build_pairs(&inst, cap, &mut rng);
        for (k, group) in [(1, PairGroup::Sddc), (2, PairGroup::Ddsc)] {
            let sel: Vec<(usize, usize)> = kept.iter().filter(|p| p.group == group).map(|p| (p.a, p.b)).collect();
            prop_assert_eq!(sel.len(), full[k].len().min(cap));
            prop_assert!(sel.iter().all(|x| full[k].contains(x)));
            prop_assert!(sel.windows(2).all(|w| w[0] < w[1]));
        }
        prop_assert!(kept.iter().all(|p| matches!(p.group, PairGroup::Sddc | PairGroup::Ddsc)));
    }
}

#[test]
fn pair_sampling_is_seeded() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inst = random_instances(&mut rng, 40);
    let a = build_pairs(&inst, 10, &mut ChaCha8Rng::seed_from_u64(5));
    let b = build_pairs(&inst, 10, &mut ChaCha8Rng::seed_from_u64(5));
    assert_eq!(a, b);
}

/// Detector, image bank and a source/target image pair for gradient probes.
struct Rig {
    store: ParamStore,
    det: Detector,
    bank: ImageDomainClassifierBank,
    images: [Tensor; 2],
}

fn rig() -> Rig {
    let mut store = ParamStore::new();
    let det = Detector::init(&mut store, DetectorConfig::default(), 5).unwrap();
    let bank = ImageDomainClassifierBank::init(&mut store, CH, 64, 5).unwrap();
    Rig {
        store,
        det,
        bank,
        images: [test_image(30), test_image(31)],
    }
}

/// Image-level loss and the graph it was recorded on. `lambda` of `None`
/// leaves the gradient reversal out.
fn image_loss_graph(r: &Rig, store: &ParamStore, lambda: Option<f64>) -> (Graph, crate::tensor::Bound, Var) {
    let mut g = Graph::new();
    let p = store.bind(&mut g);
    let xs = g.constant(r.images[0].clone());
    let xt = g.constant(r.images[1].clone());
    let mut ps = r.det.backbone_forward(&mut g, &p, xs).unwrap();
    let mut pt = r.det.backbone_forward(&mut g, &p, xt).unwrap();
    if let Some(l) = lambda {
        ps = adversarial_wrap(&mut g, &ps, l).unwrap();
        pt = adversarial_wrap(&mut g, &pt, l).unwrap();
    }
    let loss = r.bank.image_level_loss(&mut g, &p, &ps, &pt, [1.0; 4]).unwrap();
    g.backward(loss.total).unwrap();
    (g, p, loss.total)
}

#[test]
fn reversal_scales_detector_gradients_only() {
    let r = rig();
    let (g0, p0, _) = image_loss_graph(&r, &r.store, None);
    let (g1, p1, _) = image_loss_graph(&r, &r.store, Some(0.1));
    for (id, name, _) in r.store.iter() {
        let a = g0.grad(p0[id]).unwrap_or(&[]);
        let b = g1.grad(p1[id]).unwrap_or(&[]);
        if Detector::is_detector_param(name) {
            if name.starts_with("backbone.") {
                assert!(a.iter().any(|&v| v != 0.0), "{name}");
            }
            for (x, y) in a.iter().zip(b) {
                assert!((y + 0.1 * x).abs() <= 1e-12 * x.abs().max(1e-300) + 1e-18, "{name}: {y} vs {x}");
            }
        } else {
            assert_eq!(a, b, "{name}");
        }
    }
}

#[test]
fn zero_reversal_weight_silences_the_detector() {
    let r = rig();
    let (g0, p0, _) = image_loss_graph(&r, &r.store, Some(0.0));
    let (g1, p1, _) = image_loss_graph(&r, &r.store, Some(0.1));
    for (id, name, _) in r.store.iter() {
        let a = g0.grad(p0[id]).unwrap_or(&[]);
        if Detector::is_detector_param(name) {
            assert!(a.iter().all(|&v| v == 0.0), "{name}");
        } else {
            assert_eq!(a, g1.grad(p1[id]).unwrap(), "{name}");
        }
    }
}

fn step(store: &ParamStore, grads: &[Option<Vec<f64>>], lr: f64, keep: impl Fn(&str) -> bool) -> ParamStore {
    let mut out = store.clone();
    for (id, name, _) in store.iter() {
        if !keep(name) {
            continue;
        }
        if let Some(gr) = &grads[id.index()] {
            for (w, d) in out.get_mut(id).data_mut().iter_mut().zip(gr) {
                *w -= lr * d;
            }
        }
    }
    out
}

#[test]
fn minimax_descent_directions() {
    let r = rig();
    let (g, p, loss) = image_loss_graph(&r, &r.store, Some(0.1));
    let base = scalar(&g, loss);
    let grads = p.grads(&g);
    for lr in [1e-4, 1e-3, 1e-2] {
        let disc = step(&r.store, &grads, lr, |n| !Detector::is_detector_param(n));
        let (gd, _, ld) = image_loss_graph(&r, &disc, Some(0.1));
        assert!(scalar(&gd, ld) < base, "discriminator step lr={lr}");
        let det = step(&r.store, &grads, lr, Detector::is_detector_param);
        let (gg, _, lg) = image_loss_graph(&r, &det, Some(0.1));
        assert!(scalar(&gg, lg) > base, "detector step lr={lr}");
    }
}

#[test]
fn losses_pass_finite_differences_through_reversal() {
    let mut store = ParamStore::new();
    let bank = ImageDomainClassifierBank::init(&mut store, [2, 3, 2, 2], 4, 1).unwrap();
    let disc = InstanceDomainClassifier::init(&mut store, 8, 5, 2, 1).unwrap();
    let head = CorrelationHead::init(&mut store, [2, 3, 2, 2], 4, 3, 2, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sizes = [8, 4, 2, 2];
    let mut inputs: Vec<Tensor> = Vec::new();
    for _domain in 0..2 {
        for l in 0..4 {
            let c = [2, 3, 2, 2][l];
            inputs.push(normal_tensor(&mut rng, &[1, c, sizes[l], sizes[l]], 1.0));
        }
    }
    let roi_s = normal_tensor(&mut rng, &[3, 8], 1.0);
    let roi_t = normal_tensor(&mut rng, &[2, 8], 1.0);
    inputs.push(roi_s);
    inputs.push(roi_t);
    let post_s = vec![vec![0.5, 0.3, 0.2], vec![0.1, 0.6, 0.3], vec![0.2, 0.2, 0.6]];
    let post_t = vec![vec![0.4, 0.4, 0.2], vec![0.7, 0.1, 0.2]];
    let boxes = [Bbox::new(2.0, 3.0, 20.0, 25.0), Bbox::new(10.0, 8.0, 30.0, 30.0)];
    let pairs = [
        InstancePair { a: 0, b: 1, group: PairGroup::Sddc },
        InstancePair { a: 0, b: 2, group: PairGroup::Ddsc },
        InstancePair { a: 1, b: 3, group: PairGroup::Ddsc },
    ];
    let lambda = 0.1;
    // the objective as seen by the upstream features: loss through the
    // reversal, whose analytic gradient is −λ times the plain derivative
    let objective = |g: &mut Graph, x: &[Var], reversed: bool| -> Result<Var> {
        let p = store.bind_frozen(g);
        let wrap = |g: &mut Graph, v: Var| if reversed { g.grl(v, lambda) } else { Ok(v) };
        let mut lv = Vec::new();
        for &v in x {
            lv.push(wrap(g, v)?);
        }
        let ps = FeaturePyramid { levels: [lv[0], lv[1], lv[2], lv[3]] };
        let pt = FeaturePyramid { levels: [lv[4], lv[5], lv[6], lv[7]] };
        let img = bank.image_level_loss(g, &p, &ps, &pt, [1.0, 0.5, 2.0, 1.0])?;
        let ds = disc.forward(g, &p, lv[8])?;
        let dt = disc.forward(g, &p, lv[9])?;
        let cat = instance_category_aware_loss(g, Some((ds, &post_s)), Some((dt, &post_t)))?;
        let ds1 = g.gather_rows(ds, &[0, 1, 2])?;
        let ag = instance_agnostic_loss(g, Some(ds1), None)?;
        let (fs, _) = head.refine_instance_features(g, &p, &ps, &boxes)?.unwrap();
        let (ft, _) = head.refine_instance_features(g, &p, &pt, &boxes)?.unwrap();
        let f = g.concat_rows(&[fs, ft])?;
        let e = head.embed(g, &p, f)?;
        let corr = correlation_loss(g, e, &pairs, 1.0)?;
        let a = g.add(img.total, cat.value)?;
        let b = g.add(ag.value, corr)?;
        g.add(a, b)
    };
    let plain = fd_max_rel_err(&inputs, |g, x| objective(g, x, false));
    assert!(plain < 1e-4, "plain relative error {plain}");
    // sign included: through the reversal the analytic gradient is −λ times
    // the derivative of the (unchanged) forward value
    let reversed = fd_max_rel_err_scaled(&inputs, -lambda, |g, x| objective(g, x, true));
    assert!(reversed < 1e-4, "reversed relative error {reversed}");
}
