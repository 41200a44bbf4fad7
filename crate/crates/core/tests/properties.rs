mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use stream_qif::blocks::within_batch_blocks;
use stream_qif::offline::{blockwise_subject_scores, dense_aggregates, dense_subject_scores, CumulativeData};
use stream_qif::sim::summarize;
use stream_qif::{inference, BasisSet, Family};

use common::{max_rel_err, random_stream, FAMILIES};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn blockwise_equals_dense(
        seed in any::<u64>(),
        fam in 0usize..3,
        m in 1usize..=6,
        b in 1usize..=5,
        n in 1usize..=5,
        q in prop::sample::select(vec![0.1, 0.5, 0.9, 1.0]),
    ) {
        let family = FAMILIES[fam];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let by_time = random_stream(&mut rng, family, m, b, n, 3);
        let data = CumulativeData::from_batches(&by_time).unwrap();
        let beta = [0.1, -0.3, 0.2];
        for basis in [BasisSet::Independence, BasisSet::Ar1] {
            let dense = dense_subject_scores(&data, &beta, q, family, basis).unwrap();
            let block = blockwise_subject_scores(&data, &beta, q, family, basis).unwrap();
            for ((ud, sd), (ub, sb)) in dense.iter().zip(&block) {
                prop_assert!(max_rel_err(ud.as_slice(), ub.as_slice()) < 1e-10);
                prop_assert!(max_rel_err(sd.as_slice(), sb.as_slice()) < 1e-10);
            }
        }
    }

    #[test]
    fn variability_is_psd(seed in any::<u64>(), fam in 0usize..3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let family = FAMILIES[fam];
        let by_time = random_stream(&mut rng, family, 5, 3, 4, 2);
        let data = CumulativeData::from_batches(&by_time).unwrap();
        let agg = dense_aggregates(&data, &[0.2, -0.1], 0.5, family, BasisSet::Ar1).unwrap();
        let eig = agg.v.clone().symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-10 * eig.amax().max(1.0));
        prop_assert_eq!(agg.v.clone(), agg.v.transpose());
    }

    #[test]
    fn identity_blocks_are_symmetric_psd(seed in any::<u64>(), fam in 0usize..3, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let by_time = random_stream(&mut rng, FAMILIES[fam], 1, 1, n, 3);
        let wb = within_batch_blocks(&by_time[0][0], &[0.3, 0.1, -0.2], FAMILIES[fam]).unwrap();
        prop_assert!((&wb.s1 - wb.s1.transpose()).amax() < 1e-12);
        prop_assert!((&wb.s2 - wb.s2.transpose()).amax() < 1e-12);
        prop_assert!(wb.s1.clone().symmetric_eigen().eigenvalues.min() > -1e-12);
    }

    #[test]
    fn rmse_identity(est in prop::collection::vec(-3.0f64..3.0, 2..40), truth in -1.0f64..1.0) {
        let reports: Vec<_> = est
            .iter()
            .map(|&b| {
                inference::confidence_intervals(
                    &DVector::from_element(1, b),
                    &DMatrix::from_element(1, 1, 0.1),
                    0.95, 1, 1.0, None, 1,
                )
                .unwrap()
            })
            .collect();
        let row = &summarize(&reports, &[truth])[0];
        let lhs = row.rmse * row.rmse;
        let rhs = row.ese * row.ese + row.bias * row.bias;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.max(1e-12));
        prop_assert!((0.0..=1.0).contains(&row.cp));
    }
}

#[test]
fn ar1_gradient_is_exact_for_gaussian() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let by_time = random_stream(&mut rng, Family::GaussianIdentity, 3, 3, 4, 3);
    let data = CumulativeData::from_batches(&by_time).unwrap();
    let beta = [0.2, 0.1, -0.4];
    let err = common::gradient_check(&data, &beta, 0.7, Family::GaussianIdentity, BasisSet::Ar1);
    assert!(err < 1e-7, "{err:e}");
}

#[test]
fn identity_gradient_is_exact_for_canonical_links() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for family in [Family::BernoulliLogit, Family::PoissonLog] {
        let by_time = random_stream(&mut rng, family, 3, 3, 4, 3);
        let data = CumulativeData::from_batches(&by_time).unwrap();
        let err = common::gradient_check(&data, &[0.2, 0.1, -0.4], 0.7, family, BasisSet::Independence);
        assert!(err < 1e-5, "{family:?}: {err:e}");
    }
}
