mod common;

use common::*;
use ipgphormer::ingest::SurvivalLabel;
use ipgphormer::survival::{
    chi2_sf, concordance_index, cox_fit, cox_partial_loglik, kaplan_meier, log_rank_test, normal_two_sided_p,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn lab(time: f64, event: bool) -> SurvivalLabel {
    SurvivalLabel { time, event }
}

#[test]
fn cindex_hand_example() {
    // Comparable pairs: (0,1), (0,2), (1,2); risks order them 2 of 3 times, one tie.
    let labels = [lab(1.0, true), lab(2.0, true), lab(3.0, false)];
    assert_eq!(concordance_index(&[3.0, 1.0, 2.0], &labels).unwrap(), 2.0 / 3.0);
    assert_eq!(concordance_index(&[3.0, 1.0, 1.0], &labels).unwrap(), 2.5 / 3.0);
}

#[test]
fn cindex_without_comparable_pairs_is_an_error() {
    let labels = [lab(1.0, false), lab(2.0, false)];
    assert!(concordance_index(&[0.0, 1.0], &labels).is_err());
}

#[test]
fn cindex_tied_times_are_not_comparable() {
    let labels = [lab(2.0, true), lab(2.0, true), lab(5.0, true)];
    let risks = [0.0, 1.0, 0.5];
    assert_eq!(concordance_index(&risks, &labels).unwrap(), cindex_oracle(&risks, &labels).unwrap());
}

#[test]
fn kaplan_meier_hand_values() {
    // Times 1, 2+, 3, 3, 4+, 5: S = 5/6, then ×(2/4) at 3, then ×(0/1) at 5.
    let labels = [
        lab(1.0, true),
        lab(2.0, false),
        lab(3.0, true),
        lab(3.0, true),
        lab(4.0, false),
        lab(5.0, true),
    ];
    let km = kaplan_meier(&labels);
    assert_eq!(km.times, vec![1.0, 3.0, 5.0]);
    assert_eq!(km.at_risk, vec![6, 4, 1]);
    assert_eq!(km.events, vec![1, 2, 1]);
    assert_eq!(km.survival, vec![5.0 / 6.0, 5.0 / 6.0 * 0.5, 0.0]);
    assert_eq!(km.survival_at(0.5), 1.0);
    assert_eq!(km.survival_at(4.0), 5.0 / 12.0);
    assert_eq!(km.median(), Some(3.0));
}

#[test]
fn log_rank_hand_value() {
    // One event per group at distinct times, two at risk each time.
    // t=1: n=4, d=1, group a 2 at risk: O-E = 1 - 0.5, V = 0.25·... computed below.
    let a = [lab(1.0, true), lab(3.0, false)];
    let b = [lab(2.0, true), lab(4.0, false)];
    // t=1: n=4, n_a=2, d=1: E=0.5, V=2·2·1·3/(16·3)=0.25.
    // t=2: n=3, n_a=1, d=1: E=1/3, V=1·2·1·2/(9·2)=2/9.
    let (o_minus_e, var) = (1.0 - 0.5 - 1.0 / 3.0, 0.25 + 2.0 / 9.0);
    let stat = o_minus_e * o_minus_e / var;
    let lr = log_rank_test(&a, &b).unwrap();
    assert!((lr.statistic - stat).abs() < 1e-14);
    assert!((lr.p_value - chi2_sf_oracle(stat, 1)).abs() < 1e-8);
}

#[test]
fn log_rank_identical_groups_give_unit_p() {
    let mut r = rng(10);
    let g = random_labels(&mut r, 30, 0.3);
    let lr = log_rank_test(&g, &g).unwrap();
    assert!(lr.statistic.abs() < 1e-12);
    assert!((lr.p_value - 1.0).abs() < 1e-12);
}

#[test]
fn chi2_tail_matches_integration_oracle() {
    for &(x, k) in &[(0.5, 1u32), (3.841, 1), (6.0, 2), (2.5, 3), (10.0, 4), (15.0, 7)] {
        let lib = chi2_sf(x, k as f64).unwrap();
        assert!((lib - chi2_sf_oracle(x, k)).abs() < 1e-7, "x={x} k={k}");
    }
    assert!((normal_two_sided_p(1.959963984540054) - 0.05).abs() < 1e-9);
}

#[test]
fn cox_recovers_planted_coefficient() {
    let mut r = rng(11);
    let n = 400;
    let x = uniform(&mut r, n, 2, -1.0, 1.0);
    let labels: Vec<SurvivalLabel> = (0..n)
        .map(|i| {
            let rate = (1.5 * x[[i, 0]] - 0.8 * x[[i, 1]]).exp();
            let u: f64 = r.random_range(1e-9..1.0);
            let t = -u.ln() / rate;
            let c: f64 = r.random_range(0.0..3.0);
            lab(t.min(c), t <= c)
        })
        .collect();
    let fit = cox_fit(&x, &labels).unwrap();
    assert!(fit.converged);
    assert!((fit.gamma[0] - 1.5).abs() < 0.35 && (fit.gamma[1] + 0.8).abs() < 0.35, "{:?}", fit.gamma);
    let z = fit.z();
    assert!(z[0] > 2.0 && z[1] < -2.0);
}

#[test]
fn cox_loglik_agrees_with_loop_oracle() {
    let mut r = rng(12);
    let x = uniform(&mut r, 25, 3, -1.0, 1.0);
    let labels = random_labels(&mut r, 25, 0.3);
    let g = [0.3, -0.2, 0.9];
    let (ll, _) = cox_loglik_oracle(&x, &labels, &g);
    assert!((cox_partial_loglik(&x, &labels, &g) - ll).abs() < 1e-10);
}

#[test]
fn cox_flags_separation() {
    let x = Array2::from_shape_vec((4, 1), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let labels = [lab(4.0, true), lab(3.0, true), lab(2.0, true), lab(1.0, true)];
    let fit = cox_fit(&x, &labels).unwrap();
    assert!(!fit.converged);
}

proptest! {
    #[test]
    fn cindex_is_a_probability_and_flips_under_negation(
        seed in 0u64..10_000, n in 2usize..40,
    ) {
        let mut r = rng(seed);
        let labels = random_labels(&mut r, n, 0.4);
        let risks: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        if let Some(expect) = cindex_oracle(&risks, &labels) {
            let c = concordance_index(&risks, &labels).unwrap();
            prop_assert!((0.0..=1.0).contains(&c));
            prop_assert_eq!(c, expect);
            let neg: Vec<f64> = risks.iter().map(|v| -v).collect();
            prop_assert!((concordance_index(&neg, &labels).unwrap() - (1.0 - c)).abs() < 1e-12);
            let squashed: Vec<f64> = risks.iter().map(|v| (3.0 * v).exp()).collect();
            prop_assert_eq!(concordance_index(&squashed, &labels).unwrap(), c);
        }
    }

    #[test]
    fn km_is_monotone_in_unit_interval(seed in 0u64..10_000, n in 1usize..60) {
        let mut r = rng(seed);
        let labels = random_labels(&mut r, n, 0.3);
        let km = kaplan_meier(&labels);
        let mut prev = 1.0;
        for &s in &km.survival {
            prop_assert!((0.0..=prev).contains(&s));
            prev = s;
        }
    }

    #[test]
    fn log_rank_is_symmetric(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let a = random_labels(&mut r, 15, 0.3);
        let b = random_labels(&mut r, 20, 0.3);
        if let (Ok(x), Ok(y)) = (log_rank_test(&a, &b), log_rank_test(&b, &a)) {
            prop_assert!((x.statistic - y.statistic).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&x.p_value));
        }
    }
}

#[test]
fn kaplan_meier_small_examples() {
    let km = kaplan_meier(&[lab(1.0, true), lab(2.0, true)]);
    assert_eq!((km.survival_at(1.0), km.survival_at(2.0)), (0.5, 0.0));
    let km = kaplan_meier(&[lab(1.0, false), lab(2.0, false)]);
    assert_eq!((km.survival_at(0.5), km.survival_at(5.0)), (1.0, 1.0));
    let km = kaplan_meier(&[lab(1.0, true), lab(2.0, false), lab(3.0, true)]);
    assert_eq!((km.survival_at(1.0), km.survival_at(3.0)), (2.0 / 3.0, 0.0));
}

#[test]
fn kaplan_meier_ignores_duplication() {
    let mut r = rng(13);
    let labels = random_labels(&mut r, 25, 0.3);
    let doubled: Vec<_> = labels.iter().chain(&labels).copied().collect();
    let (a, b) = (kaplan_meier(&labels), kaplan_meier(&doubled));
    assert_eq!(a.times, b.times);
    for (x, y) in a.survival.iter().zip(&b.survival) {
        assert!((x - y).abs() < 1e-15);
    }
}

#[test]
fn log_rank_separated_groups_by_tabulation() {
    let a = [lab(1.0, true), lab(2.0, true), lab(3.0, true)];
    let b = [lab(10.0, true), lab(11.0, true), lab(12.0, true)];
    // Event times in a: risk sets (3,3), (2,3), (1,3) for (a, b).
    let mut o_minus_e = 0.0;
    let mut var = 0.0;
    for (na, nb) in [(3.0, 3.0), (2.0, 3.0), (1.0, 3.0)] {
        let n: f64 = na + nb;
        o_minus_e += 1.0 - na / n;
        var += na * nb / (n * n);
    }
    // Later events happen with group a empty: no contribution.
    let stat = o_minus_e * o_minus_e / var;
    let lr = log_rank_test(&a, &b).unwrap();
    assert!((lr.statistic - stat).abs() < 1e-12);
    assert!(lr.p_value < 0.05);
}

#[test]
fn chi2_tail_edge_behaviour() {
    assert_eq!(chi2_sf(0.0, 1.0).unwrap(), 1.0);
    assert!(chi2_sf(-1.0, 1.0).is_err());
    let mut prev = 1.0;
    for i in 1..200 {
        let p = chi2_sf(i as f64 * 0.1, 1.0).unwrap();
        assert!(p < prev);
        prev = p;
    }
}

#[test]
fn cox_binary_covariate_matches_grid_search() {
    let x = Array2::from_shape_vec((4, 1), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    // Interleaved times keep the likelihood maximum finite.
    let labels = [lab(1.0, true), lab(3.0, true), lab(2.0, true), lab(4.0, true)];
    let fit = cox_fit(&x, &labels).unwrap();
    assert!(fit.converged);
    let (_, best) = cox_grid_max(&x, &labels);
    assert!((fit.gamma[0] - best[0]).abs() < 1e-4, "{} vs {}", fit.gamma[0], best[0]);
}

#[test]
fn cox_rejects_empty_design_and_constant_columns() {
    let labels = [lab(1.0, true), lab(2.0, true), lab(3.0, true)];
    assert!(cox_fit(&Array2::zeros((3, 0)), &labels).is_err());
    assert!(cox_fit(&Array2::ones((3, 1)), &labels).is_err());
}

#[test]
fn cox_on_permuted_responses_is_null_on_average() {
    let mut total_z = 0.0;
    for seed in 0..20 {
        let mut r = rng(200 + seed);
        let x = uniform(&mut r, 60, 1, -1.0, 1.0);
        let labels = random_labels(&mut r, 60, 0.2);
        let fit = cox_fit(&x, &labels).unwrap();
        assert!(cox_partial_loglik(&x, &labels, &fit.gamma) >= cox_partial_loglik(&x, &labels, &[0.0]));
        total_z += fit.z()[0];
    }
    assert!((total_z / 20.0).abs() < 0.75, "{}", total_z / 20.0);
}

#[test]
fn survival_loss_matches_direct_likelihood() {
    use ipgphormer::autodiff::Tape;
    use ipgphormer::ingest::TimeBins;
    use ipgphormer::survival::nll_survival_loss;

    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let bins = TimeBins { edges: vec![2.0, 5.0, 9.0] };
    let mut r = rng(14);
    for _ in 0..50 {
        let risk: f64 = r.random_range(-2.0..2.0);
        let b: Vec<f64> = (0..4).map(|_| r.random_range(-2.0..2.0)).collect();
        let label = lab(r.random_range(0.5..12.0), r.random::<bool>());
        let k = bins.edges.iter().filter(|&&e| e < label.time).count();
        // Probability of surviving bins 0..k-1, then the event (or survival) in bin k.
        let mut lik = 1.0;
        for t in 0..k {
            lik *= 1.0 - sig(risk + b[t]);
        }
        lik *= if label.event { sig(risk + b[k]) } else { 1.0 - sig(risk + b[k]) };
        let mut tape = Tape::new();
        let tr = tape.constant(Array2::from_elem((1, 1), risk)).unwrap();
        let tb = tape.constant(Array2::from_shape_vec((1, 4), b.clone()).unwrap()).unwrap();
        let loss = nll_survival_loss(&mut tape, tr, tb, &label, &bins).unwrap();
        assert!((tape.scalar(loss) + lik.ln()).abs() < 1e-12);
    }
    let one_bin = TimeBins { edges: vec![] };
    let mut tape = Tape::new();
    let tr = tape.constant(Array2::zeros((1, 1))).unwrap();
    let tb = tape.constant(Array2::zeros((1, 1))).unwrap();
    let loss = nll_survival_loss(&mut tape, tr, tb, &lab(1.0, true), &one_bin).unwrap();
    assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-15);
}

#[test]
fn cindex_simple_cases() {
    let labels: Vec<_> = (1..=5).map(|t| lab(t as f64, true)).collect();
    assert_eq!(concordance_index(&[5.0, 4.0, 3.0, 2.0, 1.0], &labels).unwrap(), 1.0);
    assert_eq!(concordance_index(&[1.0; 5], &labels).unwrap(), 0.5);
}
