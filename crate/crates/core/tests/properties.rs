mod common;

use common::*;
use ease_core::agg::{assign_labels, edge_smooth, group_matrix, pool_attention, AggConfig};
use ease_core::calib::{calibrate_target, select_level, Aggregate, SelectWeights};
use ease_core::crs::{crs_refine, merge_prototypes, quantize_feature_map, seed_dictionary};
use ease_core::evalx::{cl_iou, confusion, hungarian_miou, BinaryMask};
use ease_core::hmerge::{
    ch_index, granularity_scores, score_levels, select_top_n, sweep_merge, sweep_merge_with_gradient,
    HmConfig,
};
use ease_core::pipeline::PipelineConfig;
use ease_core::sauce::{cross_attention_upsample, rope_embed, se_excite, grid_positions, SeWeights};
use ease_core::synth::{gen_blob_scene, SynthSpec};
use ease_core::tensors::{l2_normalize, spatial_gradient};
use ease_core::{FeatureMap, LabelMap, Matrix, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig::with_cases(n)
}

proptest! {
    #![proptest_config(cases(64))]

    #[test]
    fn tensor_round_trip(seed in any::<u64>(), c in 1usize..5, h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let f = rand_features(&mut r, c, h, w);
        let back = FeatureMap::try_from(Tensor::decode(&Tensor::from(&f).encode()).unwrap()).unwrap();
        prop_assert_eq!(back, f);
        let l = rand_labels(&mut r, h, w, 3, true);
        let back = LabelMap::try_from(Tensor::decode(&Tensor::from(&l).encode()).unwrap()).unwrap();
        prop_assert_eq!(back, l);
    }

    #[test]
    fn truncated_files_rejected(seed in any::<u64>(), cut in 1usize..20) {
        let mut r = rng(seed);
        let bytes = Tensor::from(&rand_features(&mut r, 2, 3, 3)).encode();
        let cut = cut.min(bytes.len());
        prop_assert!(Tensor::decode(&bytes[..bytes.len() - cut]).is_err());
    }

    #[test]
    fn se_matches_scalar_and_gate_bounds(seed in any::<u64>(), half in 1usize..17, h in 1usize..5, w in 1usize..5, bias in any::<bool>()) {
        let c = half * 2;
        let mut r = rng(seed);
        let f = rand_features(&mut r, c, h, w);
        let wts = SeWeights::seeded(c, 2, seed, bias).unwrap();
        let out = se_excite(&f, &wts).unwrap();
        let oracle = se_scalar(&f, &wts);
        for ((o, x), i) in out.data().iter().zip(&oracle).zip(f.data()) {
            prop_assert!((*o as f64 - x).abs() <= 1e-6);
            prop_assert!(o.abs() <= i.abs());
            prop_assert!(o * i >= 0.0);
        }
    }

    #[test]
    fn rope_preserves_norms(seed in any::<u64>(), h in 1usize..5, w in 1usize..5, half in 1usize..6) {
        let mut r = rng(seed);
        let d = half * 4;
        let m = rand_matrix(&mut r, h * w, d, -2.0, 2.0);
        let e = rope_embed(&m, &grid_positions(h, w)).unwrap();
        for i in 0..h * w {
            let a: f64 = m.row(i).iter().map(|v| (*v as f64).powi(2)).sum();
            let b: f64 = e.row(i).iter().map(|v| (*v as f64).powi(2)).sum();
            prop_assert!((a - b).abs() <= 1e-4 * a.max(1.0));
        }
    }

    #[test]
    fn attention_rows_stochastic_and_convex(seed in any::<u64>(), hh in 1usize..7, ww in 1usize..7, n_lr in 1usize..12, d in 1usize..9, c in 1usize..6) {
        let mut r = rng(seed);
        let q = rand_matrix(&mut r, hh * ww, d, -3.0, 3.0);
        let k = rand_matrix(&mut r, n_lr, d, -3.0, 3.0);
        let v = rand_matrix(&mut r, n_lr, c, -5.0, 5.0);
        let (f, a) = cross_attention_upsample(&q, &k, &v, hh, ww).unwrap();
        for i in 0..hh * ww {
            let s: f64 = a.row(i).iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
            for ch in 0..c {
                let col = (0..n_lr).map(|j| v.get(j, ch));
                let (lo, hi) = col.fold((f32::MAX, f32::MIN), |(l, h), x| (l.min(x), h.max(x)));
                let o = f.get(ch, i / ww, i % ww);
                prop_assert!(o >= lo - 1e-5 && o <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn crs_never_grows(seed in any::<u64>(), lh in 1usize..5, lw in 1usize..5) {
        let mut r = rng(seed);
        let c = 4;
        let f_lr = rand_features(&mut r, c, lh, lw);
        let f_hr = rand_features(&mut r, c, lh * 2, lw * 2);
        let a = rand_attention(&mut r, f_hr.num_pixels(), f_lr.num_pixels());
        let out = crs_refine(&f_lr, &f_hr, &a, 0.5, None).unwrap();
        prop_assert!(out.iterations <= f_lr.num_pixels());
        prop_assert!(out.sizes.windows(2).all(|w| w[1] < w[0]));
        prop_assert_eq!(*out.sizes.last().unwrap(), out.dict.len());
    }

    #[test]
    fn merge_output_never_larger(seed in any::<u64>(), k in 1usize..8, tau in 0.05f64..1.0) {
        let mut r = rng(seed);
        let f_hr = rand_features(&mut r, 3, 4, 4);
        let dict = rand_dict(&mut r, k, 3);
        let s = quantize_feature_map(&f_hr, &dict).unwrap();
        let rr: Vec<usize> = (0..16).map(|_| r.random_range(0..k)).collect();
        let out = merge_prototypes(&s, &rr, &dict, tau).unwrap();
        prop_assert!(out.len() <= dict.len() && !out.is_empty());
    }

    #[test]
    fn agg_beta_zero_equals_quantize(seed in any::<u64>(), k in 1usize..7, h in 1usize..7, w in 1usize..7) {
        let mut r = rng(seed);
        let f = rand_features(&mut r, 3, h, w);
        let dict = rand_dict(&mut r, k, 3);
        let a_m = rand_matrix(&mut r, h * w, k, 0.0, 1.0);
        let cfg = AggConfig { beta: 0.0, alpha: r.random_range(0.1..4.0), ..Default::default() };
        let y = assign_labels(&f, &dict, &a_m, &cfg).unwrap();
        let q: Vec<u32> = quantize_feature_map(&f, &dict).unwrap().iter().map(|&v| v as u32 + 1).collect();
        prop_assert_eq!(y.labels(), &q[..]);
    }

    #[test]
    fn agg_weight_rescaling(seed in any::<u64>(), k in 1usize..7, scale in 0.01f64..100.0) {
        let mut r = rng(seed);
        let f = rand_features(&mut r, 3, 5, 5);
        let dict = rand_dict(&mut r, k, 3);
        let a_m = rand_matrix(&mut r, 25, k, 0.0, 1.0);
        let cfg = AggConfig { alpha: r.random_range(0.1..1.0), beta: r.random_range(0.1..1.0), ..Default::default() };
        let scaled = AggConfig { alpha: cfg.alpha * scale, beta: cfg.beta * scale, ..cfg };
        prop_assert_eq!(assign_labels(&f, &dict, &a_m, &cfg).unwrap(), assign_labels(&f, &dict, &a_m, &scaled).unwrap());
    }

    #[test]
    fn smoothing_never_introduces_labels(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = rand_labels(&mut r, 8, 8, 4, false);
        let f = rand_features(&mut r, 2, 8, 8);
        let s = edge_smooth(&l, &f, &AggConfig::default()).unwrap();
        for v in s.labels() {
            prop_assert!(l.labels().contains(v));
        }
    }
}

proptest! {
    #![proptest_config(cases(48))]

    #[test]
    fn sweep_equals_naive_reference(seed in any::<u64>(), k in 2usize..11, beta in prop::sample::select(vec![0.0, 0.5, 2.0]), holes in any::<bool>()) {
        let mut r = rng(seed);
        let l = rand_labels(&mut r, 9, 9, k, holes);
        let f = rand_segment_features(&mut r, &l, 4, 0.4, 0.05);
        let cfg = HmConfig { min_size: 3, beta_bnd: beta, step: 0.01, ..Default::default() };
        let grad = spatial_gradient(&f);
        let fast = sweep_merge_with_gradient(&l, &f, &grad, &cfg).unwrap();
        let slow = naive_sweep(&l, &f, &grad, &cfg);
        prop_assert_eq!(fast.len(), slow.len());
        for (a, b) in fast.iter().zip(&slow) {
            prop_assert_eq!(&a.labels, &b.labels);
            prop_assert_eq!(a.tau, b.tau);
            prop_assert_eq!(a.num_segments, b.num_segments);
            prop_assert_eq!(a.gap, b.gap);
            prop_assert!((a.tau_floor - b.tau_floor).abs() < 1e-9);
        }
    }

    #[test]
    fn sweep_structure(seed in any::<u64>(), k in 2usize..11) {
        let mut r = rng(seed);
        let l = rand_labels(&mut r, 10, 10, k, false);
        let f = rand_segment_features(&mut r, &l, 4, 0.5, 0.1);
        let cfg = HmConfig { min_size: 3, step: 0.005, ..Default::default() };
        let hist = sweep_merge(&l, &f, &cfg).unwrap();
        let mut prev = l.compact().0;
        let mut prev_k = prev.num_segments();
        for s in &hist {
            prop_assert!(s.num_segments < prev_k);
            prop_assert!(is_coarsening(&prev, &s.labels));
            prop_assert!(s.tau <= cfg.theta_hi && s.tau >= cfg.theta_lo - 1e-12);
            prop_assert!(s.num_segments >= 1);
            if s.num_segments > 1 {
                let mut areas = std::collections::BTreeMap::new();
                for &v in s.labels.labels() {
                    *areas.entry(v).or_insert(0usize) += 1;
                }
                prop_assert!(areas.values().all(|&a| a >= cfg.min_size));
            }
            prev = s.labels.clone();
            prev_k = s.num_segments;
        }
    }

    #[test]
    fn sweep_ignores_gradient_without_penalty(seed in any::<u64>(), k in 2usize..9) {
        let mut r = rng(seed);
        let l = rand_labels(&mut r, 8, 8, k, false);
        let f = rand_segment_features(&mut r, &l, 3, 0.4, 0.05);
        let cfg = HmConfig { min_size: 2, step: 0.01, ..Default::default() };
        let g1 = spatial_gradient(&f);
        let g2 = rand_features(&mut r, 1, 8, 8);
        let g2 = FeatureMap::new(1, 8, 8, g2.data().iter().map(|v| v.abs() * 9.0).collect()).unwrap();
        prop_assert_eq!(
            sweep_merge_with_gradient(&l, &f, &g1, &cfg).unwrap(),
            sweep_merge_with_gradient(&l, &f, &g2, &cfg).unwrap()
        );
    }

    #[test]
    fn ch_matches_direct_formula(seed in any::<u64>(), n in 3usize..200, k in 1usize..9) {
        let mut r = rng(seed);
        let labels: Vec<u32> = (0..n).map(|_| r.random_range(1..=k as u32)).collect();
        let l = LabelMap::new(1, n, labels).unwrap();
        let f = l2_normalize(&rand_features(&mut r, 3, 1, n));
        match (ch_index(&l, &f), ch_oracle(&l, &f)) {
            (Ok(a), Some(b)) => prop_assert!(a == b || ((a - b) / b).abs() <= 1e-9, "{} vs {}", a, b),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
        }
    }

    #[test]
    fn best_level_invariant_to_ch_rescale(seed in any::<u64>(), scale in 0.001f64..1000.0) {
        let mut r = rng(seed);
        let l = rand_labels(&mut r, 10, 10, 8, false);
        let f = rand_segment_features(&mut r, &l, 4, 0.5, 0.1);
        let hist = sweep_merge(&l, &f, &HmConfig { min_size: 2, step: 0.01, ..Default::default() }).unwrap();
        prop_assume!(!hist.is_empty());
        let levels = score_levels(&hist, &f, 0.25).unwrap();
        let max_ch = levels.iter().map(|l| l.ch).fold(0.0, f64::max);
        let rescored: Vec<f64> = levels
            .iter()
            .map(|l| {
                let chn = if max_ch > 0.0 && max_ch.is_finite() { (l.ch * scale) / (max_ch * scale) } else { l.ch_norm };
                0.75 * l.cost_norm + 0.25 * chn + l.bonus
            })
            .collect();
        let top = select_top_n(levels.clone(), 1)[0].snapshot.tau;
        let best = (0..levels.len())
            .max_by(|&a, &b| rescored[a].total_cmp(&rescored[b]).then(levels[a].snapshot.num_segments.cmp(&levels[b].snapshot.num_segments)))
            .unwrap();
        prop_assert!((rescored[best] - levels.iter().find(|l| l.snapshot.tau == top).unwrap().score).abs() < 1e-12);
    }

    #[test]
    fn select_level_order_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = rand_labels(&mut r, 12, 12, 9, false);
        let f = rand_segment_features(&mut r, &l, 4, 0.5, 0.1);
        let hist = sweep_merge(&l, &f, &HmConfig { min_size: 2, step: 0.01, ..Default::default() }).unwrap();
        prop_assume!(hist.len() > 1);
        let mut levels = score_levels(&hist, &f, 0.25).unwrap();
        for lv in &mut levels {
            lv.granularity = granularity_scores(&lv.labels, &f).ok();
        }
        let target = ease_core::calib::GranularityTarget { g_scale: r.random_range(0.0..0.5), g_sem: r.random_range(0.0..1.0), samples: 1 };
        let pick = select_level(&levels, &target, SelectWeights::default()).unwrap();
        let chosen = levels[pick].snapshot.tau;
        levels.shuffle(&mut r);
        let again = select_level(&levels, &target, SelectWeights::default()).unwrap();
        prop_assert_eq!(levels[again].snapshot.tau, chosen);
    }

    #[test]
    fn calibrate_single_image_is_its_scores(seed in any::<u64>()) {
        let mut r = rng(seed);
        let l = rand_labels(&mut r, 8, 8, 6, true);
        let f = rand_features(&mut r, 3, 8, 8);
        match granularity_scores(&l, &f) {
            Ok(g) => {
                let t = calibrate_target(&[l], &[f], Aggregate::Mean).unwrap();
                prop_assert_eq!((t.g_scale, t.g_sem), (g.scale, g.sem));
            }
            Err(_) => prop_assert!(calibrate_target(&[l], &[f], Aggregate::Mean).is_err()),
        }
    }
}

proptest! {
    #![proptest_config(cases(2000))]

    #[test]
    fn hungarian_matches_brute_force(seed in any::<u64>(), p in 1usize..7, g in 1usize..7, bg in any::<bool>()) {
        let mut r = rng(seed);
        let cm = rand_confusion(&mut r, p, g);
        prop_assume!(cm.total() > 0);
        let bg = if bg { Some(r.random_range(0..g)) } else { None };
        let res = hungarian_miou(&cm, bg).unwrap();
        let (best, mious) = hungarian_oracle(&cm, bg);
        prop_assert_eq!(res.matched_intersection, best);
        prop_assert!(mious.iter().any(|m| (m - res.miou).abs() <= 1e-12));
        prop_assert!((0.0..=1.0).contains(&res.miou));
        let mut perm: Vec<usize> = (0..p).collect();
        perm.shuffle(&mut r);
        let permuted = hungarian_miou(&cm.permute_rows(&perm), bg).unwrap();
        prop_assert_eq!(permuted.miou, res.miou);
        prop_assert_eq!(&permuted.per_class, &res.per_class);
        prop_assert_eq!(permuted.matched_intersection, res.matched_intersection);
    }

    #[test]
    fn miou_one_iff_permutation(seed in any::<u64>(), k in 1usize..6) {
        let mut r = rng(seed);
        let gt = rand_labels(&mut r, 6, 6, k, false);
        let mut ids: Vec<u32> = (10..10 + k as u32).collect();
        ids.shuffle(&mut r);
        let pred = LabelMap::new(6, 6, gt.labels().iter().map(|&v| ids[v as usize - 1]).collect()).unwrap();
        prop_assert_eq!(hungarian_miou(&confusion(&pred, &gt, &[]).unwrap(), None).unwrap().miou, 1.0);
        let mut broken = pred.labels().to_vec();
        // a pixel whose class has company, so the new id cannot be a relabeling
        let shared: Vec<usize> = (0..36)
            .filter(|&i| gt.labels().iter().filter(|&&v| v == gt.labels()[i]).count() > 1)
            .collect();
        prop_assume!(!shared.is_empty());
        let i = shared[r.random_range(0..shared.len())];
        broken[i] = 99;
        let broken = LabelMap::new(6, 6, broken).unwrap();
        prop_assert!(hungarian_miou(&confusion(&broken, &gt, &[]).unwrap(), None).unwrap().miou < 1.0);
    }

    #[test]
    fn confusion_matches_loops(seed in any::<u64>()) {
        let mut r = rng(seed);
        let pred = rand_labels(&mut r, 8, 8, 5, true);
        let gt = rand_labels(&mut r, 8, 8, 4, true);
        let cm = confusion(&pred, &gt, &[]).unwrap();
        let oracle = confusion_oracle(&pred, &gt);
        for (pi, &p) in cm.pred_ids().iter().enumerate() {
            for (gi, &g) in cm.gt_ids().iter().enumerate() {
                prop_assert_eq!(cm.get(pi, gi), oracle.get(&(p, g)).copied().unwrap_or(0));
            }
        }
        prop_assert_eq!(cm.total(), 64);
    }

    #[test]
    fn cl_iou_symmetric_for_equal_support(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut a = BinaryMask::empty(20, 20);
        let mut b = BinaryMask::empty(20, 20);
        let (ya, yb) = (r.random_range(2..18), r.random_range(2..18));
        for x in 3..17 {
            a.set(ya, x, true);
            b.set(yb, x, true);
        }
        prop_assert_eq!(cl_iou(&a, &b, 4).unwrap(), cl_iou(&b, &a, 4).unwrap());
    }
}

proptest! {
    #![proptest_config(cases(16))]

    #[test]
    fn synthetic_attention_is_stochastic(seed in any::<u64>(), regions in 1usize..5) {
        let spec = SynthSpec { seed, height: 16, width: 16, patch: 4, channels: 8, regions, ..Default::default() };
        let sc = gen_blob_scene(&spec).unwrap();
        for row in sc.attention.row_iter() {
            let s: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
        }
        prop_assert_eq!(sc.gt.compact().0, sc.gt.clone());
        prop_assert_eq!(sc.gt.num_segments(), regions);
    }

    #[test]
    fn config_round_trip(seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut cfg = PipelineConfig::default();
        cfg.hm.beta_bnd = r.random_range(0.0..3.0);
        cfg.agg.alpha = r.random_range(0.01..2.0);
        cfg.hm.min_size = r.random_range(1..100);
        cfg.seed = r.random();
        cfg.target_scale = Some(r.random_range(0.0..1.0));
        cfg.target_sem = Some(r.random_range(0.0..1.0));
        let once = PipelineConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(&once, &cfg);
        prop_assert_eq!(PipelineConfig::parse(&once.to_text()).unwrap(), once);
    }

    #[test]
    fn pooled_attention_rows_sum_to_one(seed in any::<u64>(), k in 1usize..6) {
        let mut r = rng(seed);
        let f_lr = rand_features(&mut r, 3, 3, 3);
        let a = rand_attention(&mut r, 16, 9);
        let dict = rand_dict(&mut r, k, 3);
        let g = group_matrix(&f_lr.to_tokens(), &dict).unwrap();
        let p = pool_attention(&a, &g).unwrap();
        for i in 0..16 {
            let s: f64 = p.row(i).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-5);
        }
    }
}

#[test]
fn seeding_from_identical_scales_gives_one_prototype_per_token() {
    let mut r = rng(9);
    let f_lr = rand_features(&mut r, 4, 2, 2);
    let tokens: Matrix = f_lr.to_tokens();
    let f_hr = FeatureMap::from_tokens(&tokens, 2, 2).unwrap();
    let d = seed_dictionary(&f_lr, &f_hr).unwrap();
    assert_eq!(d.len(), 4);
    for (k, v) in d.iter().enumerate() {
        assert_eq!(v, tokens.row(k));
    }
}
