use proptest::prelude::*;

use super::published::{reproduce_table2, PublishedTables};
use super::render::{render_csv, render_text};
use super::*;

fn method(name: &str, acc: [f64; 3], ratio: f64) -> MethodResult {
    let ids = ["rod", "linemod", "nyu"];
    MethodResult::new(
        name,
        Setting::Rgb,
        ids.iter()
            .zip(acc)
            .map(|(id, a)| TaskOutcome {
                task_id: (*id).into(),
                accuracy: a,
                param_ratio: ratio,
            })
            .collect(),
    )
    .unwrap()
}

fn rgb_refs() -> ReferenceAccuracies {
    refs_from([0.908, 0.967, 0.675], [0.876, 0.139, 0.579])
}

fn refs_from(ft: [f64; 3], fe: [f64; 3]) -> ReferenceAccuracies {
    let ids = ["rod", "linemod", "nyu"];
    ReferenceAccuracies::new(
        Setting::Rgb,
        (0..3)
            .map(|i| TaskReference {
                task_id: ids[i].into(),
                alpha_ft: ft[i],
                alpha_fe: fe[i],
            })
            .collect(),
    )
    .unwrap()
}

/// Direct evaluation of the score formulas, written independently of the
/// engine's per-task breakdown.
fn oracle(acc: [f64; 3], ratio: f64, ft: [f64; 3], fe: [f64; 3]) -> (f64, f64, f64) {
    let (gamma, lambda) = (2.0_f64, 10.0_f64);
    let mut ds = 0.0;
    let mut rev = 0.0;
    let mut ll = 0.0;
    for i in 0..3 {
        let amin = f64::max(0.0, 2.0 * ft[i] - 1.0);
        let term = 1000.0 / (1.0 - amin).powi(2) * f64::max(0.0, acc[i] - amin).powf(gamma);
        ds += term;
        rev += term * lambda.powf(-ratio);
        ll += f64::max(0.0, 1.0 - ratio) * f64::max(0.0, acc[i] - fe[i]) / (ft[i] - fe[i]);
    }
    (ds, rev, ll * 1000.0 / 3.0)
}

const FT: [f64; 3] = [0.908, 0.967, 0.675];
const FE: [f64; 3] = [0.876, 0.139, 0.579];
const BAT: [f64; 3] = [0.929, 0.950, 0.681];

#[test]
fn average_accuracy_examples() {
    let bat = method("BAT", BAT, 0.03);
    assert!((avg_accuracy(&bat).unwrap() - 0.8533333333333334).abs() < 1e-12);
    assert_eq!(avg_accuracy(&method("x", [1.0; 3], 0.0)).unwrap(), 1.0);
    let ft_rgbd = method("FT", [0.939, 0.969, 0.684], 1.0);
    assert!((avg_accuracy(&ft_rgbd).unwrap() - 0.864).abs() < 1e-12);
}

#[test]
fn min_accuracy_examples() {
    assert!((min_accuracy(0.908) - 0.816).abs() < 1e-12);
    assert_eq!(min_accuracy(0.4), 0.0);
    assert_eq!(min_accuracy(1.0), 1.0);
}

#[test]
fn decathlon_examples() {
    let cfg = ScoringConfig::default();
    let ft = decathlon_score(&method("FT", FT, 1.0), &rgb_refs(), &cfg).unwrap();
    assert!((ft - 750.0).abs() < 1e-9);
    let fe = decathlon_score(&method("FE", FE, 0.0), &rgb_refs(), &cfg).unwrap();
    assert!((fe - 229.0).abs() <= 2.0, "{fe}");
    assert!((fe - oracle(FE, 0.0, FT, FE).0).abs() < 1e-9);
    let bat = decathlon_score(&method("BAT", BAT, 0.03), &rgb_refs(), &cfg).unwrap();
    assert!((bat - 693.0).abs() <= 3.0, "{bat}");
    assert!((bat - oracle(BAT, 0.03, FT, FE).0).abs() < 1e-9);
}

#[test]
fn revised_decathlon_examples() {
    let cfg = ScoringConfig::default();
    let fe = method("FE", FE, 0.0);
    let s = score_method(&fe, &rgb_refs(), &cfg).unwrap();
    assert_eq!(s.revds, s.ds);
    let ft = score_method(&method("FT", FT, 1.0), &rgb_refs(), &cfg).unwrap();
    assert!((ft.revds - 75.0).abs() < 1e-9);
    let bat = score_method(&method("BAT", BAT, 0.03), &rgb_refs(), &cfg).unwrap();
    assert!((bat.revds - bat.ds * 10f64.powf(-0.03)).abs() < 1e-9);
    assert!((bat.revds - oracle(BAT, 0.03, FT, FE).1).abs() < 1e-9);
    assert!((bat.revds - 648.0).abs() < 1.5, "{}", bat.revds);
}

#[test]
fn exponent_scale_only_changes_revds() {
    let cfg = ScoringConfig {
        revds_exponent_scale: 2.0,
        ..Default::default()
    };
    let base = score_method(&method("BAT", BAT, 0.03), &rgb_refs(), &ScoringConfig::default()).unwrap();
    let s = score_method(&method("BAT", BAT, 0.03), &rgb_refs(), &cfg).unwrap();
    assert_eq!((s.avga, s.ds, s.ll), (base.avga, base.ds, base.ll));
    assert!((s.revds - s.ds * 10f64.powf(-0.06)).abs() < 1e-9);
}

#[test]
fn locally_linear_examples() {
    let cfg = ScoringConfig::default();
    let (ll, tasks) = locally_linear(&method("BAT", BAT, 0.03), &rgb_refs(), &cfg).unwrap();
    assert!((ll - 1195.7).abs() < 0.2, "{ll}");
    assert!((ll - oracle(BAT, 0.03, FT, FE).2).abs() < 1e-9);
    // BAT beats FT on the first task, and A_t is not capped.
    assert!((tasks[0].a - 53.0 / 32.0).abs() < 1e-9);
    assert_eq!(locally_linear(&method("FT", FT, 1.0), &rgb_refs(), &cfg).unwrap().0, 0.0);
    assert_eq!(locally_linear(&method("FE", FE, 0.0), &rgb_refs(), &cfg).unwrap().0, 0.0);
}

#[test]
fn ll_rgbd_series_adapter_example() {
    let refs = refs_from([0.939, 0.969, 0.684], [0.916, 0.148, 0.602]);
    let rs = method("RS", [0.937, 0.938, 0.709], 0.16);
    let (ll, _) = locally_linear(&rs, &refs, &ScoringConfig::default()).unwrap();
    assert!((ll - 890.4).abs() < 0.1, "{ll}");
}

#[test]
fn ideal_method_scores_1000_ll() {
    let ideal = method("ideal", FT, 0.0);
    let s = score_method(&ideal, &rgb_refs(), &ScoringConfig::default()).unwrap();
    assert!((s.ll - 1000.0).abs() < 1e-9);
}

#[test]
fn breakdown_recombines_exactly() {
    let s = score_method(&method("BAT", BAT, 0.03), &rgb_refs(), &ScoringConfig::default()).unwrap();
    assert_eq!(s.ds, s.tasks.iter().map(|t| t.ds_term).sum::<f64>());
    assert_eq!(s.revds, s.tasks.iter().map(|t| t.revds_term).sum::<f64>());
    assert_eq!(s.ll, s.tasks.iter().map(|t| t.ll_term).sum::<f64>());
    for t in &s.tasks {
        assert_eq!(t.ll_term, 1000.0 / 3.0 * t.r * t.a);
    }
}

#[test]
fn perfect_fine_tuning_does_not_produce_nan() {
    let refs = refs_from([1.0, 0.9, 0.9], [0.5, 0.5, 0.5]);
    let s = score_method(&method("m", [1.0, 0.9, 0.9], 0.0), &refs, &ScoringConfig::default()).unwrap();
    assert!(s.ds.is_finite());
    assert_eq!(s.tasks[0].ds_term, 0.0);
}

#[test]
fn rejects_bad_inputs() {
    let cfg = ScoringConfig::default();
    let bad_gamma = ScoringConfig { gamma: 0.5, ..Default::default() };
    assert!(score_method(&method("m", BAT, 0.0), &rgb_refs(), &bad_gamma).is_err());
    let bad_lambda = ScoringConfig { lambda: 1.0, ..Default::default() };
    assert!(score_method(&method("m", BAT, 0.0), &rgb_refs(), &bad_lambda).is_err());
    let mut other = method("m", BAT, 0.0);
    other.tasks[2].task_id = "unknown".into();
    assert!(matches!(score_method(&other, &rgb_refs(), &cfg), Err(Error::InconsistentTasks(_))));
    let r = ReferenceAccuracies::new(
        Setting::Rgb,
        vec![TaskReference { task_id: "a".into(), alpha_ft: 0.3, alpha_fe: 0.4 }],
    );
    assert!(matches!(r, Err(Error::InvalidReference { .. })));
    assert!(leaderboard(&[], &rgb_refs(), &cfg).is_err());
    let mut short = method("short", BAT, 0.0);
    short.tasks.pop();
    assert!(matches!(
        leaderboard(&[method("a", BAT, 0.0), short], &rgb_refs(), &cfg),
        Err(Error::InconsistentTasks(_))
    ));
}

#[test]
fn leaderboard_rankings_follow_the_published_pattern() {
    let tables = PublishedTables::load();
    let cfg = ScoringConfig::default();
    let order = |setting| {
        let r = leaderboard(&tables.results(setting).unwrap(), &tables.references(setting).unwrap(), &cfg).unwrap();
        r.rankings[&Metric::Ll]
            .iter()
            .map(|e| (e.method.clone(), e.rank))
            .collect::<Vec<_>>()
    };
    let rgb = order(Setting::Rgb);
    let names: Vec<_> = rgb.iter().map(|(m, _)| m.as_str()).collect();
    assert_eq!(&names[..4], ["BAT", "RP", "PB", "RS"]);
    assert_eq!(rgb[4].1, rgb[5].1);
    let depth = order(Setting::Depth);
    let names: Vec<_> = depth.iter().map(|(m, _)| m.as_str()).collect();
    assert_eq!(&names[..4], ["BAT", "PB", "RS", "RP"]);

    let single = leaderboard(&tables.results(Setting::Rgb).unwrap()[3..4], &tables.references(Setting::Rgb).unwrap(), &cfg).unwrap();
    assert_eq!(single.methods.len(), 1);
    assert_eq!(single.rankings[&Metric::Ll][0].marker, Some(Marker::Best));
}

#[test]
fn renderers_mark_best_and_second() {
    let tables = PublishedTables::load();
    let cfg = ScoringConfig::default();
    let report = leaderboard(
        &tables.results(Setting::Rgb).unwrap(),
        &tables.references(Setting::Rgb).unwrap(),
        &cfg,
    )
    .unwrap();
    let text = render_text(&report, &Metric::ALL);
    let bat = text.lines().find(|l| l.starts_with("BAT")).unwrap();
    assert!(bat.contains("85.3*"), "{bat}");
    assert!(bat.contains("1196*"), "{bat}");
    let rp = text.lines().find(|l| l.starts_with("RP")).unwrap();
    assert!(rp.ends_with('+'), "{rp}");

    let csv = render_csv(std::slice::from_ref(&report), &[Metric::Ll]).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "setting,method,par,ll,ll_rank,rod:R,rod:A,linemod:R,linemod:A,nyu:R,nyu:A"
    );
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn table2_reproduction_structure() {
    let rep = reproduce_table2(&PublishedTables::load(), &ScoringConfig::default()).unwrap();
    assert_eq!(rep.cells.len(), 18 * 4);
    assert!(rep.all_pass(Metric::AvgA));
    assert!(rep.all_pass(Metric::RevDs));
    for c in rep.cells_for(Metric::Ds).filter(|c| c.method == "FT") {
        assert!(c.delta.abs() < 1e-9);
    }
}

fn arb_case() -> impl Strategy<Value = ([f64; 3], [f64; 3], [f64; 3], f64)> {
    (
        prop::array::uniform3(0.0f64..1.0),
        prop::array::uniform3(0.0f64..0.9),
        prop::array::uniform3(0.01f64..0.5),
        0.0f64..1.5,
    )
        .prop_map(|(acc, fe, gap, ratio)| {
            let ft = [
                (fe[0] + gap[0]).min(0.999),
                (fe[1] + gap[1]).min(0.999),
                (fe[2] + gap[2]).min(0.999),
            ];
            (acc, ft, fe, ratio)
        })
}

proptest! {
    #[test]
    fn engine_matches_oracle((acc, ft, fe, ratio) in arb_case()) {
        let s = score_method(&method("m", acc, ratio), &refs_from(ft, fe), &ScoringConfig::default()).unwrap();
        let (ds, rev, ll) = oracle(acc, ratio, ft, fe);
        prop_assert!((s.ds - ds).abs() <= 1e-9 * ds.max(1.0));
        prop_assert!((s.revds - rev).abs() <= 1e-9 * rev.max(1.0));
        prop_assert!((s.ll - ll).abs() <= 1e-9 * ll.max(1.0));
        prop_assert!(s.ds >= 0.0 && s.revds >= 0.0 && s.ll >= 0.0);
        for t in &s.tasks {
            prop_assert!((0.0..=1000.0 + 1e-9).contains(&t.ds_term));
        }
    }

    #[test]
    fn avga_ignores_refs_and_ratios((acc, ft, fe, ratio) in arb_case(), other in 0.0f64..2.0) {
        let cfg = ScoringConfig::default();
        let a = score_method(&method("m", acc, ratio), &refs_from(ft, fe), &cfg).unwrap();
        let b = score_method(&method("m", acc, other), &rgb_refs(), &cfg).unwrap();
        prop_assert_eq!(a.avga, b.avga);
    }

    #[test]
    fn ds_ignores_ratios_and_fe((acc, ft, fe, ratio) in arb_case(), other in 0.0f64..2.0) {
        let cfg = ScoringConfig::default();
        let a = score_method(&method("m", acc, ratio), &refs_from(ft, fe), &cfg).unwrap();
        let fe0 = [ft[0] * 0.5, ft[1] * 0.5, ft[2] * 0.5];
        let b = score_method(&method("m", acc, other), &refs_from(ft, fe0), &cfg).unwrap();
        prop_assert_eq!(a.ds, b.ds);
    }

    #[test]
    fn revds_strictly_decreases_in_ratio((acc, ft, fe, ratio) in arb_case(), step in 0.01f64..1.0) {
        let cfg = ScoringConfig::default();
        let a = score_method(&method("m", acc, ratio), &refs_from(ft, fe), &cfg).unwrap();
        prop_assume!(a.ds > 1e-6);
        let b = score_method(&method("m", acc, ratio + step), &refs_from(ft, fe), &cfg).unwrap();
        prop_assert!(b.revds < a.revds);
    }

    #[test]
    fn ll_depends_on_fe_ft_and_ratio(acc in prop::array::uniform3(0.6f64..0.7)) {
        let cfg = ScoringConfig::default();
        let ft = [0.8; 3];
        let fe = [0.5; 3];
        let base = score_method(&method("m", acc, 0.1), &refs_from(ft, fe), &cfg).unwrap().ll;
        let fe2 = score_method(&method("m", acc, 0.1), &refs_from(ft, [0.4; 3]), &cfg).unwrap().ll;
        let ft2 = score_method(&method("m", acc, 0.1), &refs_from([0.9; 3], fe), &cfg).unwrap().ll;
        let r2 = score_method(&method("m", acc, 0.2), &refs_from(ft, fe), &cfg).unwrap().ll;
        prop_assert!(fe2 != base && ft2 != base && r2 < base);
    }

    #[test]
    fn metrics_are_monotone_in_each_accuracy(
        (acc, ft, fe, ratio) in arb_case(), idx in 0usize..3, bump in 0.0f64..0.5
    ) {
        let cfg = ScoringConfig::default();
        let refs = refs_from(ft, fe);
        let a = score_method(&method("m", acc, ratio), &refs, &cfg).unwrap();
        let mut hi = acc;
        hi[idx] = (hi[idx] + bump).min(1.0);
        let b = score_method(&method("m", hi, ratio), &refs, &cfg).unwrap();
        for m in Metric::ALL {
            prop_assert!(b.get(m) >= a.get(m), "{}", m);
        }
    }

    #[test]
    fn scores_are_scale_free(task in 0u64..1_000_000, backbone in 1u64..1_000_000, k in 1u64..1000) {
        let a = crate::model::ParamCost::new(task, backbone).unwrap();
        let b = crate::model::ParamCost::new(task * k, backbone * k).unwrap();
        prop_assert_eq!(a.ratio, b.ratio);
    }
}
