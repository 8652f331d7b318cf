use odemri::gradcheck::{gradcheck_family, GradcheckReport};
use odemri::ModelSpec;

fn check(name: &str) -> GradcheckReport {
    let report = gradcheck_family(ModelSpec::parse(name).unwrap(), 8, 3).unwrap();
    println!("{report:?}");
    assert!(report.fd_passed(), "{name}: {report:?}");
    report
}

#[test]
fn ft_families_match_finite_differences() {
    for name in ["ft_euler", "ft_rk2", "ft_rk4"] {
        check(name);
    }
}

#[test]
fn lt_families_match_finite_differences() {
    for name in ["lt_euler", "lt_rk2", "lt_rk4"] {
        check(name);
    }
}

#[test]
fn adjoint_gap_shrinks_with_more_steps() {
    for name in ["fa_euler", "fa_rk4"] {
        let report = check(name);
        assert_eq!(report.gaps.len(), 3);
        assert!(report.gaps_passed(), "{name}: {:?}", report.gaps);
    }
}

#[test]
fn size_outside_range_is_rejected() {
    let err = gradcheck_family(ModelSpec::parse("ft_euler").unwrap(), 32, 0).unwrap_err();
    assert_eq!(err.exit_code(), 1);
}
