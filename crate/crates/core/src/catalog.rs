//! Small named chains used by tests, benches and the CLI.

use crate::chain::{ChainSpec, ParamChainSpec};

/// `a -> b -> c -> a`, all rates 1.
pub fn three_cycle() -> ChainSpec {
    ChainSpec::named(&["a", "b", "c"], &[("a", "b", 1.0), ("b", "c", 1.0), ("c", "a", 1.0)])
        .expect("valid chain")
}

/// The reversed orientation `a -> c -> b -> a`.
pub fn three_cycle_reversed() -> ChainSpec {
    ChainSpec::named(&["a", "b", "c"], &[("a", "c", 1.0), ("c", "b", 1.0), ("b", "a", 1.0)])
        .expect("valid chain")
}

/// States `x`, `y` with `R(x,y) = r`, `R(y,x) = s`.
pub fn two_state(r: f64, s: f64) -> ChainSpec {
    ChainSpec::named(&["x", "y"], &[("x", "y", r), ("y", "x", s)]).expect("valid chain")
}

/// Two chains on `{a,b,c}` with identical measure-current functionals:
/// `a -> b` at rate 2 versus `a -> c` at rate 2, both with `b <-> c` at rate 1.
pub fn ex02_pair() -> (ChainSpec, ChainSpec) {
    let first = ChainSpec::named(
        &["a", "b", "c"],
        &[("a", "b", 2.0), ("b", "c", 1.0), ("c", "b", 1.0)],
    )
    .expect("valid chain");
    let second = ChainSpec::named(
        &["a", "b", "c"],
        &[("a", "c", 2.0), ("b", "c", 1.0), ("c", "b", 1.0)],
    )
    .expect("valid chain");
    (first, second)
}

/// Nearest-neighbour chain on `-3..=3` whose jumps `-2 -> -1`, `-1 -> 0`,
/// `2 -> 1` and `1 -> 0` have rate `1/n`; every other rate is 1.
pub fn rm5() -> ParamChainSpec {
    let slow = [("-2", "-1"), ("-1", "0"), ("2", "1"), ("1", "0")];
    let names = ["-3", "-2", "-1", "0", "1", "2", "3"];
    let mut edges = Vec::new();
    for w in names.windows(2) {
        for (a, b) in [(w[0], w[1]), (w[1], w[0])] {
            let k = if slow.contains(&(a, b)) { 1 } else { 0 };
            edges.push((a, b, 1.0, k));
        }
    }
    ParamChainSpec::named(&names, &edges).expect("valid family")
}

/// Birth-death ladder on `0..=4` with wells at 0, 2, 4: the barrier
/// between 0 and 2 is crossed on scale `n`, the one between 2 and 4 on
/// scale `n^2`.
pub fn three_well_ladder() -> ParamChainSpec {
    ParamChainSpec::named(
        &["0", "1", "2", "3", "4"],
        &[
            ("0", "1", 1.0, 1),
            ("1", "0", 1.0, 0),
            ("1", "2", 1.0, 0),
            ("2", "1", 1.0, 1),
            ("2", "3", 1.0, 2),
            ("3", "2", 1.0, 0),
            ("3", "4", 1.0, 0),
            ("4", "3", 1.0, 2),
        ],
    )
    .expect("valid family")
}

/// Double well `0 - 1 - 2` whose two sides have different barriers: leaving
/// 0 costs `n^-1`, leaving 2 costs `n^-2`.
pub fn asymmetric_double_well() -> ParamChainSpec {
    ParamChainSpec::named(
        &["0", "1", "2"],
        &[
            ("0", "1", 1.0, 1),
            ("1", "0", 1.0, 0),
            ("1", "2", 1.0, 0),
            ("2", "1", 1.0, 2),
        ],
    )
    .expect("valid family")
}

/// Two-state family with both rates `1/n`.
pub fn two_state_slow() -> ParamChainSpec {
    ParamChainSpec::named(&["x", "y"], &[("x", "y", 1.0, 1), ("y", "x", 1.0, 1)]).expect("valid family")
}

/// Names of the bundled examples, as accepted by [`by_name`].
pub const NAMES: &[&str] = &[
    "c3",
    "c3-reversed",
    "ex02-first",
    "ex02-second",
    "rm5",
    "two-state",
    "three-well-ladder",
    "asymmetric-double-well",
];

/// A bundled example as a family (fixed chains have exponent 0 throughout).
pub fn by_name(name: &str) -> Option<ParamChainSpec> {
    Some(match name {
        "c3" => ParamChainSpec::constant(&three_cycle()),
        "c3-reversed" => ParamChainSpec::constant(&three_cycle_reversed()),
        "ex02-first" => ParamChainSpec::constant(&ex02_pair().0),
        "ex02-second" => ParamChainSpec::constant(&ex02_pair().1),
        "rm5" => rm5(),
        "two-state" => ParamChainSpec::constant(&two_state(2.0, 3.0)),
        "three-well-ladder" => three_well_ladder(),
        "asymmetric-double-well" => asymmetric_double_well(),
        _ => return None,
    })
}
