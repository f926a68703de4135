use std::sync::Arc;

use approx::assert_abs_diff_eq;
use mcis::clock::ClockMode;
use mcis::estimators::{lais, mcis_running, smcis, vanilla, MixtureForm};
use mcis::proposals::ProposalFamily;
use mcis::targets::{DiagGaussian, GaussianMixture, TargetDensity};
use mcis::{run_chain, AcceptMode, ChainConfig, TestFunction};
use proptest::prelude::*;

const VIRTUAL: ClockMode = ClockMode::Virtual(mcis::clock::VirtualCosts {
    target: 1.0,
    gradient: 1.0,
    proposal: 1.0,
    draw: 1.0,
    test_function: 1.0,
    step: 1.0,
});

fn mog() -> TargetDensity {
    TargetDensity::mixture(
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![
                DiagGaussian::isotropic(3, 3.0, 0.7).unwrap(),
                DiagGaussian::isotropic(3, 7.0, 1.5).unwrap(),
            ],
        )
        .unwrap(),
    )
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
    (m, var.sqrt())
}

#[test]
fn lais_and_mcis_agree_on_the_mixture_target() {
    let target = mog();
    let q = ProposalFamily::random_walk(3, 0.9).unwrap();
    let fs = [TestFunction::Identity];
    let mut m = Vec::new();
    let mut l = Vec::new();
    for seed in 0..20 {
        let cfg = ChainConfig::new(5000, seed, vec![5.0; 3], AcceptMode::MetropolisHastings)
            .with_clock(VIRTUAL);
        let trace = run_chain(&target, &q, &cfg).unwrap();
        m.push(mcis_running(&trace, &q, &fs, VIRTUAL).unwrap()[0].final_estimate());
        l.push(
            lais(
                &trace,
                &target,
                &q,
                &fs,
                seed + 99,
                MixtureForm::Final,
                VIRTUAL,
            )
            .unwrap()[0]
                .final_estimate(),
        );
    }
    let (mm, ms) = mean_sd(&m);
    let (lm, ls) = mean_sd(&l);
    assert!(
        (mm - lm).abs() <= 3.0 * ms.max(ls),
        "mcis {mm} +- {ms}, lais {lm} +- {ls}"
    );
    assert_abs_diff_eq!(mm, 5.0, epsilon = 3.0 * ms);
}

#[test]
fn evidence_with_a_wide_independent_proposal() {
    let target = TargetDensity::isotropic_gaussian(2, 1.0, 0.8).unwrap();
    let q = ProposalFamily::independent(DiagGaussian::isotropic(2, 1.0, 1.5).unwrap());
    let cfg = ChainConfig::new(20000, 3, vec![1.0, 1.0], AcceptMode::MetropolisHastings)
        .with_clock(VIRTUAL);
    let trace = run_chain(&target, &q, &cfg).unwrap();
    let s = mcis_running(&trace, &q, &[TestFunction::Identity], VIRTUAL).unwrap();
    let z = s[0].log_evidence.unwrap().exp();
    assert_abs_diff_eq!(z, 1.0, epsilon = 0.05);
    assert_abs_diff_eq!(s[0].final_estimate(), 1.0, epsilon = 0.05);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn weighted_estimates_stay_in_the_hull(
        seed in 0u64..1000,
        theta in 0.2f64..2.0,
        k in 20usize..200,
    ) {
        let target = TargetDensity::isotropic_gaussian(2, 0.5, 1.0).unwrap();
        let q = ProposalFamily::random_walk(2, theta).unwrap();
        let cfg = ChainConfig::new(k, seed, vec![0.0, 0.0], AcceptMode::MetropolisHastings)
            .with_clock(VIRTUAL);
        let trace = run_chain(&target, &q, &cfg).unwrap();
        let f = TestFunction::Square;
        let vals: Vec<f64> = (0..k).map(|i| f.eval(trace.proposal(i))).collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for s in [mcis_running(&trace, &q, &[f], VIRTUAL).unwrap(), smcis(&trace, &q, &[f], VIRTUAL).unwrap()] {
            for (i, &e) in s[0].estimates.iter().enumerate() {
                let seen = &vals[..=i];
                let lo_i = seen.iter().copied().fold(f64::INFINITY, f64::min);
                let hi_i = seen.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(e >= lo_i && e <= hi_i);
            }
            prop_assert!(s[0].final_estimate() >= lo && s[0].final_estimate() <= hi);
        }
        let v = vanilla(&trace, &[f], VIRTUAL).unwrap();
        prop_assert_eq!(v[0].estimates.len(), k);
        // Virtual time never decreases.
        prop_assert!(v[0].cpu_ns.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn proposal_equal_to_target_has_unit_evidence(
        dim in 1usize..5,
        mean in -3.0f64..3.0,
        sd in 0.3f64..3.0,
        seed in 0u64..1000,
    ) {
        let g = DiagGaussian::isotropic(dim, mean, sd).unwrap();
        let target = Arc::new(TargetDensity::gaussian(g.clone()));
        let q = ProposalFamily::independent(g);
        let cfg = ChainConfig::new(200, seed, vec![mean; dim], AcceptMode::MetropolisHastings)
            .with_clock(VIRTUAL);
        let trace = run_chain(&target, &q, &cfg).unwrap();
        prop_assert!(trace.accepted.iter().all(|&a| a));
        let s = mcis_running(&trace, &q, &[TestFunction::Identity], VIRTUAL).unwrap();
        prop_assert_eq!(s[0].log_evidence, Some(0.0));
    }
}
