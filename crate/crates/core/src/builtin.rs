//! Built-in motivating trials: fitted parameters and design-stage hypotheses.

use crate::design::{
    williams_square, Direction, HypothesisSpec, ModelParams, PowerKind, TrialDesign,
};
use crate::error::{Error, Result};

pub const EXAMPLE_NAMES: [&str; 3] = ["example1", "example2", "example3"];

/// A built-in trial: design, fitted truth and hypotheses.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinTrial {
    pub design: TrialDesign,
    pub params: ModelParams,
    pub hypothesis: HypothesisSpec,
}

/// Look up a built-in trial by name.
///
/// * `example1`: four-treatment four-period trial on one 4x4 Williams square.
/// * `example2`: three treatments in six two-period incomplete-block sequences.
/// * `example3`: two treatments, three periods, four extra-period sequences.
pub fn builtin_design(name: &str) -> Result<BuiltinTrial> {
    match name {
        "example1" => Ok(BuiltinTrial {
            design: williams_square(4)?,
            params: ModelParams {
                mu0: 10.65,
                pi: vec![0.0, -0.77, -0.96, -0.55],
                tau: vec![0.0, -1.51, -2.15, -2.37],
                sigma_e2: 6.51,
                sigma_b2: 10.12,
            },
            hypothesis: HypothesisSpec {
                direction: Direction::Less,
                delta: -1.24,
                alpha: 0.05,
                beta: 0.2,
                power_kind: PowerKind::Pairwise,
            },
        }),
        "example2" => Ok(BuiltinTrial {
            design: TrialDesign::from_strings(3, &["01", "10", "02", "20", "12", "21"])?,
            params: ModelParams {
                mu0: 1.51,
                pi: vec![0.0, 0.03],
                tau: vec![0.0, 0.50, 0.52],
                sigma_e2: 0.053,
                sigma_b2: 0.49,
            },
            hypothesis: HypothesisSpec {
                direction: Direction::Greater,
                delta: 0.2,
                alpha: 0.1,
                beta: 0.2,
                power_kind: PowerKind::Pairwise,
            },
        }),
        "example3" => Ok(BuiltinTrial {
            design: TrialDesign::from_strings(2, &["011", "100", "010", "101"])?,
            params: ModelParams {
                mu0: 156.77,
                pi: vec![0.0, -2.13, -4.90],
                tau: vec![0.0, -7.55],
                sigma_e2: 169.8,
                sigma_b2: 255.0,
            },
            hypothesis: HypothesisSpec {
                direction: Direction::Less,
                delta: -5.39,
                alpha: 0.025,
                beta: 0.1,
                power_kind: PowerKind::Pairwise,
            },
        }),
        other => Err(Error::UnknownExample(other.to_string())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fitted_values() {
        let e1 = builtin_design("example1").unwrap();
        assert_eq!(e1.params.sigma_e2, 6.51);
        assert!(e1.design.is_complete_block());
        let e2 = builtin_design("example2").unwrap();
        assert_eq!(e2.params.sigma_b2, 0.49);
        let e3 = builtin_design("example3").unwrap();
        assert_eq!(e3.params.tau[1], -7.55);
        for name in EXAMPLE_NAMES {
            let t = builtin_design(name).unwrap();
            t.params.validate(&t.design).unwrap();
            t.hypothesis.validate().unwrap();
            assert!(t.design.is_period_balanced(), "{name}");
        }
    }

    #[test]
    fn unknown_name() {
        assert!(matches!(
            builtin_design("example9"),
            Err(Error::UnknownExample(_))
        ));
    }
}
