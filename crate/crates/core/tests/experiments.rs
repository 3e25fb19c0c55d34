use rfkde::experiments::*;
use rfkde::fields::{marginal_density_linear_gaussian, CoefficientMap, FieldSpec, LipschitzMap, PairMap};
use rfkde::innovations::InnovationSpec;
use rfkde::kde::{make_kernel, BandwidthRule, KbarOptions};
use rfkde::lattice::Region;
use rfkde::Error;

fn iid(d: usize) -> FieldSpec {
    FieldSpec::linear(
        CoefficientMap::stored(d, vec![(rfkde::lattice::IndexPoint::origin(d), 1.0)]).unwrap(),
        InnovationSpec::standard_normal(),
    )
}

#[test]
fn independent_field_passes_classical_clt_thresholds() {
    let spec = iid(1);
    let f = marginal_density_linear_gaussian(&spec).unwrap();
    let r = run_clt(
        &CltParams {
            spec,
            kernel: make_kernel("epanechnikov").unwrap(),
            points: vec![-1.0, 0.0, 1.0],
            region: Region::cube(1, 4096).unwrap(),
            rule: BandwidthRule::PowerLaw { beta: 1.0 / 3.0 },
            replicates: 2000,
            seed: 11,
            centering: Centering::Expected,
        },
        &f,
    )
    .unwrap();
    assert!(r.passed(), "{:?}", r.assertions());
    // exact finite-size variance is within a few percent of gamma
    for p in &r.points {
        let pred = p.predicted_variance.unwrap();
        assert!((pred / p.gamma - 1.0).abs() < 0.1, "{pred} vs {}", p.gamma);
    }
}

#[test]
fn predicted_variance_tracks_monte_carlo_under_dependence() {
    let c = CoefficientMap::geometric(2, 1.0, 0.3, 0).unwrap().with_tolerance(1e-6).unwrap();
    let s = c.square_sum().unwrap();
    let spec = FieldSpec::linear(c.scaled(1.0 / s.sqrt()), InnovationSpec::standard_normal());
    let f = marginal_density_linear_gaussian(&spec).unwrap();
    let r = run_clt(
        &CltParams {
            spec,
            kernel: make_kernel("epanechnikov").unwrap(),
            points: vec![-1.0, 1.0],
            region: Region::cube(2, 32).unwrap(),
            rule: BandwidthRule::PowerLaw { beta: 1.0 / 3.0 },
            replicates: 1500,
            seed: 5,
            centering: Centering::Expected,
        },
        &f,
    )
    .unwrap();
    for p in &r.points {
        let pred = p.predicted_variance.unwrap();
        // sampling error of a variance from 1500 draws is about 3.7%
        assert!((p.variance / pred - 1.0).abs() < 0.15, "{} vs {pred}", p.variance);
    }
}

#[test]
fn density_centering_requires_small_bias_term() {
    let spec = iid(1);
    let f = marginal_density_linear_gaussian(&spec).unwrap();
    let params = CltParams {
        spec,
        kernel: make_kernel("epanechnikov").unwrap(),
        points: vec![-1.0, 1.0],
        region: Region::cube(1, 4096).unwrap(),
        rule: BandwidthRule::PowerLaw { beta: 1.0 / 3.0 },
        replicates: 10,
        seed: 1,
        centering: Centering::Density,
    };
    // |Lambda| b^3 = 1 for beta = 1/3
    assert!(matches!(run_clt(&params, &f), Err(Error::AssumptionFailed(_))));
    let ok = CltParams {
        rule: BandwidthRule::PowerLaw { beta: 0.45 },
        ..params
    };
    run_clt(&ok, &f).unwrap();
}

#[test]
fn zero_weights_give_zero_audit_rows() {
    let spec = FieldSpec::linear(
        CoefficientMap::geometric(1, 1.0, 0.5, 6).unwrap(),
        InnovationSpec::standard_normal(),
    );
    let region = Region::cube(1, 8).unwrap();
    let a = audit_moment_inequality(&AuditParams {
        spec,
        kernel: make_kernel("triangular").unwrap(),
        ms: vec![1, 3],
        bs: vec![0.3],
        ps: vec![2.0],
        x: 0.2,
        weights: vec![0.0; region.len()],
        region,
        replicates: 200,
        seed: 3,
        options: KbarOptions::default(),
    })
    .unwrap();
    for r in &a.rows {
        assert_eq!((r.lhs, r.rhs, r.ratio, r.pass), (0.0, 0.0, 0.0, true));
    }
}

#[test]
fn audits_with_alternating_weights_and_two_dimensions() {
    let spec = FieldSpec::linear(
        CoefficientMap::geometric(2, 1.0, 0.4, 0).unwrap().with_tolerance(1e-4).unwrap(),
        InnovationSpec::standard_normal(),
    );
    let region = Region::cube(2, 4).unwrap();
    let weights: Vec<f64> = (0..region.len()).map(|k| if k % 2 == 0 { 1.0 } else { -0.5 }).collect();
    let params = AuditParams {
        spec,
        kernel: make_kernel("epanechnikov").unwrap(),
        ms: vec![1, 2],
        bs: vec![0.5, 0.2],
        ps: vec![2.0, 3.0],
        x: -0.3,
        weights,
        region,
        replicates: 400,
        seed: 9,
        options: KbarOptions::default(),
    };
    let m = audit_moment_inequality(&params).unwrap();
    let k = audit_kbar_norm(&params).unwrap();
    assert!(m.passed() && k.passed());
    assert_eq!(k.lipschitz_constant, 1.5);
}

#[test]
fn audits_reject_nonlinear_fields() {
    let pairs = PairMap::new(1, vec![([0].into(), [1].into(), 1.0)]).unwrap();
    let spec = FieldSpec::volterra(pairs, InnovationSpec::standard_normal());
    let region = Region::cube(1, 4).unwrap();
    let r = audit_kbar_norm(&AuditParams {
        spec,
        kernel: make_kernel("triangular").unwrap(),
        ms: vec![1],
        bs: vec![0.5],
        ps: vec![2.0],
        x: 0.0,
        weights: vec![1.0; 4],
        region,
        replicates: 10,
        seed: 1,
        options: KbarOptions::default(),
    });
    assert!(matches!(r, Err(Error::WrongSpecKind(_))));
}

#[test]
fn berry_esseen_guards() {
    let zero = FieldSpec::linear(CoefficientMap::stored(1, vec![]).unwrap(), InnovationSpec::standard_normal());
    assert!(matches!(reference_density(&zero, 0), Err(Error::Degenerate(_))));

    let spec = iid(1);
    let f = marginal_density_linear_gaussian(&spec).unwrap();
    let base = BerryEsseenParams {
        spec,
        kernel: make_kernel("epanechnikov").unwrap(),
        x: 0.0,
        sizes: vec![256, 512],
        tau: 3.0,
        alpha: 10.0,
        p: 2.0,
        replicates: 100,
        seed: 2,
    };
    // f vanishes far in the tail, so U_n is undefined
    let far = BerryEsseenParams { x: 60.0, ..base.clone() };
    assert!(matches!(run_berry_esseen(&far, &f), Err(Error::Degenerate(_))));
    let bad_tau = BerryEsseenParams { tau: 3.5, ..base.clone() };
    assert!(run_berry_esseen(&bad_tau, &f).is_err());
    let slow = FieldSpec::linear(
        CoefficientMap::polynomial(1, 1.0, 4.0, 50).unwrap(),
        InnovationSpec::standard_normal(),
    );
    let tail = BerryEsseenParams { spec: slow, ..base.clone() };
    assert!(matches!(run_berry_esseen(&tail, &f), Err(Error::UncertifiableTail(_))));
    let r = run_berry_esseen(&base, &f).unwrap();
    assert!(r.rows.iter().all(|row| row.theta == 1.0 / 6.0));
}

#[test]
fn non_gaussian_fields_use_a_numeric_baseline() {
    let pairs = PairMap::new(1, vec![([0].into(), [1].into(), 1.0), ([0].into(), [2].into(), 0.5)]).unwrap();
    let spec = FieldSpec::volterra(pairs, InnovationSpec::Uniform { half_width: 3f64.sqrt() })
        .subordinated(LipschitzMap::Tanh);
    let f = reference_density(&spec, 4).unwrap();
    assert!(!f.is_exact());
    let r = run_l1_rate(
        &L1RateParams {
            spec: spec.clone(),
            kernel: make_kernel("epanechnikov").unwrap(),
            sizes: vec![256, 1024, 4096, 16384],
            rule: BandwidthRule::PowerLaw { beta: 1.0 / 3.0 },
            replicates: 20,
            seed: 4,
            range_sds: 8.0,
        },
        &f,
    )
    .unwrap();
    assert!(r.rows.windows(2).all(|w| w[1].value < w[0].value), "{:?}", r.rows);

    let report = audit_assumptions(&AssumptionInputs {
        spec: &spec,
        kernel_name: "epanechnikov",
        rule: BandwidthRule::PowerLaw { beta: 1.0 / 3.0 },
        sizes: vec![256, 1024],
        density: Some(&f),
        c_p: 1.0,
    });
    assert!(report.get("A4").unwrap().passed);
    assert!(!report.get("B1").unwrap().passed);
    assert!(!report.get("B3").unwrap().passed);
    assert_eq!(report.failures(required_assumptions("l1-rate")), Vec::<String>::new());
}

#[test]
fn mn_audit_respects_weight_override() {
    let profile = rfkde::dependence::DependenceProfile::from_law(
        CoefficientMap::geometric(1, 1.0, 0.01, 0).unwrap(),
        2.0,
    );
    let a = audit_mn_limits(&profile, &[4, 8, 12], Some(10.0), true).unwrap();
    assert_eq!(a.weight, 10.0);
    let b = audit_mn_limits(&profile, &[4, 8, 12], None, true).unwrap();
    assert_eq!(b.weight, 2.5);
    assert!(a.rows.iter().zip(&b.rows).all(|(x, y)| x.schedule.tail_at_v >= y.schedule.tail_at_v));
}

#[test]
fn discrete_marginals_have_no_reference_density() {
    let pairs = PairMap::new(1, vec![([0].into(), [1].into(), 1.0)]).unwrap();
    let spec = FieldSpec::volterra(pairs, InnovationSpec::Rademacher);
    assert!(matches!(reference_density(&spec, 0), Err(Error::Degenerate(_))));
    let constant = spec.subordinated(LipschitzMap::ScaledAbs { scale: 2.0 });
    assert!(matches!(reference_density(&constant, 0), Err(Error::Degenerate(_))));
}
