use mlbranch_core::branching::{simulate_tree, tau_k, Alignment, BranchParams, BranchSchedule, LevelGrid, TreeSetup};
use mlbranch_core::estimators::{merge_in_order, DigitalSet, EstimatorConfig, LevelSampler};
use mlbranch_core::mlmc::{allocate_samples, MomentAccumulator};
use mlbranch_core::schemes::Scheme;
use mlbranch_core::sde_models::{make_clark_cameron, make_gbm, GbmParams};
use mlbranch_core::selftest::work_by_segments;
use proptest::prelude::*;

fn gbm_cfg(scheme: Scheme, branching: bool, seed: u64) -> EstimatorConfig {
    let params = branching.then(|| BranchParams::new(0.5, 1.0, Alignment::default_for(scheme)).unwrap());
    EstimatorConfig::new(make_gbm(GbmParams::reference(1)).unwrap(), scheme)
        .with_branching(params)
        .with_seed(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn level_samples_are_bounded(seed in any::<u64>(), level in 0u32..6, branching in any::<bool>(), milstein in any::<bool>()) {
        let scheme = if milstein { Scheme::Milstein } else { Scheme::Euler };
        let cfg = gbm_cfg(scheme, branching, seed);
        let sampler = LevelSampler::new(&cfg, level).unwrap();
        let leaves = sampler.schedule().leaf_count() as f64;
        sampler.for_each(0..64, |_, s| {
            assert!(s.value.abs() <= 1.0);
            if !branching {
                assert!(s.value == -1.0 || s.value == 0.0 || s.value == 1.0);
            } else {
                let scaled = s.value * leaves;
                assert_eq!(scaled, scaled.round());
            }
        }).unwrap();
    }

    #[test]
    fn antithetic_samples_are_bounded(seed in any::<u64>(), level in 0u32..6) {
        let cfg = EstimatorConfig::new(make_clark_cameron(), Scheme::AntitheticCc)
            .with_set(DigitalSet::Corner { threshold: 1.0 })
            .with_branching(Some(BranchParams::new(0.5, 1.0, Alignment::Snap).unwrap()))
            .with_seed(seed);
        LevelSampler::new(&cfg, level).unwrap().for_each(0..32, |_, s| assert!(s.value.abs() <= 1.0)).unwrap();
    }

    #[test]
    fn membership_flips_at_zero_distance(
        d in 1usize..5,
        threshold in -2.0f64..2.0,
        kind in 0u8..3,
        origin in prop::collection::vec(-3.0f64..3.0, 4),
        dir in prop::collection::vec(-1.0f64..1.0, 4),
    ) {
        let (set, d) = match kind {
            0 => (DigitalSet::MeanBelow { threshold }, d),
            1 => (DigitalSet::Corner { threshold }, 2),
            _ => (DigitalSet::HalfPlane { axis: 1, threshold }, 2),
        };
        let point = |t: f64| -> Vec<f64> { (0..d).map(|i| origin[i] + t * dir[i]).collect() };
        let ts: Vec<f64> = (0..=400).map(|i| -4.0 + 0.02 * f64::from(i)).collect();
        for w in ts.windows(2) {
            let (a, b) = (point(w[0]), point(w[1]));
            if set.contains(&a) != set.contains(&b) {
                // a flip means the segment touches the boundary
                let len: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                prop_assert!(set.dist(&a) <= len + 1e-12 && set.dist(&b) <= len + 1e-12);
            }
        }
        let inside: Vec<f64> = point(0.0);
        if set.dist(&inside) > 0.0 {
            let r = 0.999 * set.dist(&inside);
            for i in 0..d {
                let mut q = inside.clone();
                q[i] += r;
                prop_assert_eq!(set.contains(&q), set.contains(&inside));
                q[i] -= 2.0 * r;
                prop_assert_eq!(set.contains(&q), set.contains(&inside));
            }
        }
    }

    #[test]
    fn schedule_is_monotone_and_bracketed(level in 0u32..14, tau0 in 0.05f64..1.0, eta in 0.5f64..2.0) {
        let grid = LevelGrid::new(level, 0.5, 2).unwrap();
        let s = BranchSchedule::new(grid, BranchParams::new(tau0, eta, Alignment::Split).unwrap()).unwrap();
        prop_assert!(s.points.windows(2).all(|w| w[0] <= w[1]));
        // the first unused lag brackets the fine step
        if tau0 >= grid.h {
            let next = tau_k(tau0, eta, s.depth);
            prop_assert!(next >= grid.h * (1.0 - 1e-9));
            prop_assert!(next < grid.h * eta.exp2() * (1.0 + 1e-9));
        } else {
            prop_assert_eq!(s.depth, 0);
        }
    }

    #[test]
    fn simulated_work_matches_segment_sum(level in 0u32..10, eta_index in 0usize..4, seed in any::<u64>()) {
        let eta = [0.8, 1.0, 4.0 / 3.0, 1.5][eta_index];
        let grid = LevelGrid::new(level, 0.5, 2).unwrap();
        let schedule = BranchSchedule::new(grid, BranchParams::new(0.5, eta, Alignment::Split).unwrap()).unwrap();
        let model = make_gbm(GbmParams::reference(1)).unwrap();
        let setup = TreeSetup { model: &model, scheme: Scheme::Euler, schedule: &schedule, master_seed: seed };
        let tree = simulate_tree(setup, 0).unwrap();
        prop_assert_eq!(tree.leaves.len() as u64, schedule.leaf_count());
        prop_assert_eq!(tree.work.increments_generated, work_by_segments(grid.h, 0.5, eta));
        prop_assert_eq!(tree.work.increments_generated, schedule.expected_work());
    }

    #[test]
    fn shard_merge_equals_sequential(seed in any::<u64>(), start in 0u64..5000, n in 1u64..3000) {
        let cfg = gbm_cfg(Scheme::Euler, false, seed);
        let sampler = LevelSampler::new(&cfg, 3).unwrap();
        let mut seq = MomentAccumulator::default();
        let mut shard_seq = Vec::new();
        let mut current = MomentAccumulator::default();
        let shard = mlbranch_core::estimators::SHARD_SIZE;
        sampler.for_each(start..start + n, |r, s| {
            if r != start && r % shard == 0 {
                shard_seq.push(current);
                current = MomentAccumulator::default();
            }
            current.push(s.value, s.work);
            seq.push(s.value, s.work);
        }).unwrap();
        shard_seq.push(current);
        let parallel = sampler.accumulate(start, n).unwrap();
        prop_assert_eq!(parallel, merge_in_order(&shard_seq));
        prop_assert_eq!(parallel.n, seq.n);
        prop_assert_eq!(parallel.work, seq.work);
    }

    #[test]
    fn allocation_meets_budget(
        vw in prop::collection::vec((1e-10f64..1.0, 1.0f64..1e6), 1..12),
        eps in 1e-4f64..0.1,
    ) {
        let (v, w): (Vec<f64>, Vec<f64>) = vw.into_iter().unzip();
        let n = allocate_samples(&v, &w, eps).unwrap();
        let spent: f64 = v.iter().zip(&n).map(|(v, &k)| v / k as f64).sum();
        prop_assert!(spent <= 0.5 * eps * eps);
        prop_assert!(n.iter().all(|&k| k >= 1));
    }

    #[test]
    fn allocation_is_locally_optimal(
        vw in prop::collection::vec((1e-6f64..1.0, 1.0f64..1e4), 2..8),
        eps in 1e-3f64..0.05,
        which in any::<prop::sample::Index>(),
        up in any::<bool>(),
    ) {
        let (v, w): (Vec<f64>, Vec<f64>) = vw.into_iter().unzip();
        let budget = 0.5 * eps * eps;
        let n = allocate_samples(&v, &w, eps).unwrap();
        let work = |n: &[f64]| n.iter().zip(&w).map(|(k, w)| k * w).sum::<f64>();
        let base = work(&n.iter().map(|&k| k as f64).collect::<Vec<_>>());
        let mut p: Vec<f64> = n.iter().map(|&k| k as f64).collect();
        let i = which.index(p.len());
        p[i] *= if up { 1.1 } else { 0.9 };
        // rescale to spend exactly the budget, the cheapest feasible version of p
        let spent: f64 = v.iter().zip(&p).map(|(v, k)| v / k).sum();
        let scale = spent / budget;
        let perturbed = work(&p.iter().map(|k| k * scale).collect::<Vec<_>>());
        let slack: f64 = w.iter().sum();
        prop_assert!(perturbed >= base - slack, "perturbed {perturbed} base {base} slack {slack}");
    }
}
