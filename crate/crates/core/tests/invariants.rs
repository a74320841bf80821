use defotox::evalx::{confusion_metrics, fold_hash, kfold_split};
use defotox::field::{compose, jacobian_determinant, jacobian_field, warp};
use defotox::nn::{onecycle_lr, TrainSchedule};
use defotox::volio::{read_volume, write_volume};
use defotox::{DisplacementField, Grid, Volume};
use proptest::prelude::*;

fn small_grid() -> impl Strategy<Value = Grid> {
    grid_from(2)
}

fn grid_from(min: usize) -> impl Strategy<Value = Grid> {
    ([min..7, min..7, min..7], [0.5f64..3.0, 0.5f64..3.0, 0.5f64..3.0])
        .prop_map(|(d, s)| Grid::new(d, s, [0.0; 3]).unwrap())
}

fn field_on(g: Grid) -> impl Strategy<Value = DisplacementField> {
    proptest::collection::vec(-4.0f64..4.0, 3 * g.len()).prop_map(move |v| {
        let n = g.len();
        DisplacementField::from_fn(g.clone(), |x, y, z| {
            let i = g.index(x, y, z);
            [v[i], v[n + i], v[2 * n + i]]
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn composing_with_zero_is_identity(u in small_grid().prop_flat_map(field_on)) {
        let z = DisplacementField::zeros(u.grid().clone());
        let a = compose(&u, &z).unwrap();
        let b = compose(&z, &u).unwrap();
        prop_assert_eq!(a.volume().data(), u.volume().data());
        prop_assert_eq!(b.volume().data(), u.volume().data());
    }

    #[test]
    fn warp_stays_within_input_range(
        (g, vals, u) in small_grid().prop_flat_map(|g| {
            let n = g.len();
            (Just(g.clone()), proptest::collection::vec(-100.0f32..100.0, n), field_on(g))
        })
    ) {
        let v = Volume::new(g, 1, vals.clone()).unwrap();
        let w = warp(&v, &u).unwrap();
        let (lo, hi) = vals.iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
        prop_assert!(w.data().iter().all(|&x| x >= lo - 1e-3 && x <= hi + 1e-3));
    }

    #[test]
    fn uniform_translation_has_unit_determinant(g in grid_from(3), t in proptest::array::uniform3(-5.0f64..5.0)) {
        let u = DisplacementField::from_fn(g, |_, _, _| t);
        let det = jacobian_determinant(&jacobian_field(&u).unwrap());
        prop_assert!(det.data().iter().all(|&d| (d - 1.0).abs() < 1e-6));
    }

    #[test]
    fn volumes_read_back_bit_exact(
        (g, c, vals) in small_grid().prop_flat_map(|g| {
            let n = g.len();
            (1usize..4).prop_flat_map(move |c| (Just(g.clone()), Just(c), proptest::collection::vec(any::<f32>(), c * n)))
        })
    ) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.v3j");
        let v = Volume::new(g, c, vals).unwrap();
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        prop_assert_eq!(back.grid(), v.grid());
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn folds_partition_the_indices(n in 4usize..80, k in 2usize..6, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let folds = kfold_split(n, k, seed, None).unwrap();
        let mut all: Vec<usize> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(fold_hash(&folds), fold_hash(&kfold_split(n, k, seed, None).unwrap()));
    }

    #[test]
    fn balanced_accuracy_is_bounded(pairs in proptest::collection::vec((any::<bool>(), any::<bool>()), 2..60)) {
        let (p, y): (Vec<bool>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(y.iter().any(|&b| b) && y.iter().any(|&b| !b));
        let m = confusion_metrics(&p, &y).unwrap();
        prop_assert!((0.0..=1.0).contains(&m.bacc));
        let flipped: Vec<bool> = p.iter().map(|b| !b).collect();
        let f = confusion_metrics(&flipped, &y).unwrap();
        prop_assert!((m.bacc + f.bacc - 1.0).abs() < 1e-12);
    }

    #[test]
    fn onecycle_is_continuous(max_lr in 1e-5f64..1e-1, total in 10usize..2000) {
        let s = TrainSchedule::one_cycle(max_lr, total);
        let lrs: Vec<f64> = (0..total).map(|i| onecycle_lr(&s, i).unwrap()).collect();
        // steepest step of each cosine half-wave
        let peak = s.peak_step().max(1) as f64;
        let decay = (total - 1 - s.peak_step()).max(1) as f64;
        let bound = std::f64::consts::FRAC_PI_2 * max_lr / peak.min(decay);
        prop_assert!(lrs.windows(2).all(|w| (w[1] - w[0]).abs() <= bound));
        prop_assert!(lrs.iter().all(|&l| l > 0.0 && l <= max_lr * (1.0 + 1e-12)));
    }
}
