use netseg_core::phantom::{generate_cohort, GammaLaw, PhantomSpec};
use netseg_core::stats::{anova_oneway, fit_gamma, intensity_by_region, ks_test_gamma, tukey_hsd, Region};
use netseg_core::{Modality, MultiModalRecord};

#[test]
fn cohort_net_volumes_follow_the_planted_gamma_law() {
    let base = PhantomSpec { shape: [32, 48, 48], ..Default::default() };
    let law = GammaLaw { shape_k: 2.0, scale_theta: 1500.0 };
    let cohort = generate_cohort(200, &base, Some(law), 17).unwrap();
    let vols: Vec<f64> = cohort.iter().map(|p| p.truth.net_voxels as f64).collect();
    let clamped = cohort.iter().filter(|p| p.truth.net_voxels != p.truth.net_target.unwrap()).count();
    assert_eq!(clamped, 0);
    let fit = fit_gamma(&vols).unwrap();
    assert!((fit.shape_k - 2.0).abs() / 2.0 < 0.15, "k = {}", fit.shape_k);
    assert!(ks_test_gamma(&vols, &fit).p_value > 0.01);
    let again = generate_cohort(200, &base, Some(law), 17).unwrap();
    assert!(cohort.iter().zip(&again).all(|(a, b)| a.record == b.record));
}

fn normalized_cohort(n: usize, seed: u64) -> Vec<MultiModalRecord> {
    let base = PhantomSpec { shape: [24, 40, 40], ..Default::default() };
    generate_cohort(n, &base, None, seed).unwrap().into_iter().map(|p| p.record.normalized().unwrap()).collect()
}

#[test]
fn net_separates_in_t1c_and_flair() {
    let records = normalized_cohort(50, 99);
    let samples = intensity_by_region(&records);
    for m in Modality::ALL {
        let groups: Vec<Vec<f64>> = Region::ALL.iter().map(|r| samples[&m][r].clone()).collect();
        assert!(groups.iter().all(|g| g.len() == 50));
        let a = anova_oneway(&groups).unwrap();
        assert!(a.p_value < 0.01, "{m}: p = {}", a.p_value);
    }
    // NET (index 2) against every other compartment
    for m in [Modality::T1c, Modality::Flair] {
        let groups: Vec<Vec<f64>> = Region::ALL.iter().map(|r| samples[&m][r].clone()).collect();
        let t = tukey_hsd(&groups, 0.05).unwrap();
        for other in [0, 1, 3] {
            assert!(t.pair(2, other).unwrap().significant, "{m}: NET vs {:?}", Region::ALL[other]);
        }
    }
    // the table puts NET next to ET in T1 and next to ED in T2
    let groups = |m: Modality| Region::ALL.iter().map(|r| samples[&m][r].clone()).collect::<Vec<_>>();
    let t1 = tukey_hsd(&groups(Modality::T1), 0.05).unwrap();
    assert!(t1.pair(2, 3).unwrap().q_statistic < t1.pair(2, 0).unwrap().q_statistic);
    let t2 = tukey_hsd(&groups(Modality::T2), 0.05).unwrap();
    assert!(t2.pair(1, 2).unwrap().q_statistic < t2.pair(2, 3).unwrap().q_statistic);
}
