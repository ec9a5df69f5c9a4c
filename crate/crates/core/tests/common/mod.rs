//! Systems shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use mcf_core::conley::System;
use mcf_core::lyapunov::Collar;
use mcf_core::{build_block, parse, BlockSpec, FieldDef, Grid, GridBlock, ScalarFunction};

pub fn boxed(bounds: &[(f64, f64)], h: f64) -> GridBlock {
    build_block(&BlockSpec::Box(bounds.to_vec()), &Grid::with_spacing(h)).unwrap()
}

pub fn collar(points: &[&[f64]]) -> Collar {
    Collar {
        samples: points.iter().map(|p| p.to_vec()).collect(),
        radius: 0.1,
    }
}

pub fn system(field: &[&str], block: GridBlock, lyapunov: &str, set: &[&[f64]]) -> System {
    let dim = field.len();
    System {
        field: FieldDef::parse(dim, field, false).unwrap(),
        block,
        lyapunov: parse(lyapunov, dim).unwrap(),
        collar: collar(set),
    }
}

/// Negative gradient flow of `f` with `f` as its own Lyapunov function.
pub fn gradient_system(f: &str, block: GridBlock, set: &[&[f64]]) -> System {
    let dim = block.dim();
    let e = parse(f, dim).unwrap();
    System {
        field: ScalarFunction::new(e.clone(), dim).negative_gradient_field(),
        block,
        lyapunov: e,
        collar: collar(set),
    }
}

pub fn saddle() -> System {
    system(&["x1", "-x2"], boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25), "-(x1^2 - x2^2)/2", &[&[0.0, 0.0]])
}

pub fn sink() -> System {
    system(&["-x1", "-x2"], boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25), "(x1^2 + x2^2)/2", &[&[0.0, 0.0]])
}

pub fn repeller_1d() -> System {
    system(&["x1"], boxed(&[(-1.0, 1.0)], 0.25), "-x1^4/4", &[&[0.0]])
}

pub fn repeller_2d() -> System {
    system(&["x1", "x2"], boxed(&[(-1.0, 1.0), (-1.0, 1.0)], 0.25), "-(x1^2 + x2^2)/2", &[&[0.0, 0.0]])
}

pub const DOUBLE_WELL_POTENTIAL: &str = "-x1^2/2 + x1^4/4";

pub fn double_well_interval() -> System {
    system(
        &["x1 - x1^3"],
        boxed(&[(-2.0, 2.0)], 0.25),
        DOUBLE_WELL_POTENTIAL,
        &[&[-1.0], &[0.0], &[1.0]],
    )
}

pub fn double_well_part(lo: f64, hi: f64, center: f64) -> System {
    system(&["x1 - x1^3"], boxed(&[(lo, hi)], 0.25), DOUBLE_WELL_POTENTIAL, &[&[center]])
}

pub fn double_well_plane() -> System {
    gradient_system(
        "(x1^2 - 1)^2 + x2^2",
        boxed(&[(-2.0, 2.0), (-2.0, 2.0)], 0.25),
        &[&[-1.0, 0.0], &[0.0, 0.0], &[1.0, 0.0]],
    )
}

/// Radial attraction to the unit circle with slow rotation, on a square
/// annulus.
pub fn limit_cycle() -> System {
    let cubes: Vec<Vec<i64>> = (-8..8)
        .flat_map(|i| (-8..8).map(move |j| vec![i, j]))
        .filter(|c| !((-1..1).contains(&c[0]) && (-1..1).contains(&c[1])))
        .collect();
    let block = build_block(&BlockSpec::Cubes(cubes), &Grid::with_spacing(0.25)).unwrap();
    let ring: Vec<Vec<f64>> = (0..64)
        .map(|k| {
            let t = std::f64::consts::TAU * k as f64 / 64.0;
            vec![t.cos(), t.sin()]
        })
        .collect();
    System {
        field: FieldDef::parse(
            2,
            &[
                "x1*(1 - x1^2 - x2^2) - 0.5*x2",
                "x2*(1 - x1^2 - x2^2) + 0.5*x1",
            ],
            false,
        )
        .unwrap(),
        block,
        lyapunov: parse("-((x1^2 + x2^2)/2 - (x1^2 + x2^2)^2/4)", 2).unwrap(),
        collar: Collar {
            samples: ring,
            radius: 0.1,
        },
    }
}

pub fn semistable() -> System {
    system(&["x1^2/(1 + x1^2)"], boxed(&[(-1.0, 1.0)], 0.25), "-x1", &[&[0.0]])
}

pub fn drift() -> System {
    system(&["1"], boxed(&[(0.0, 1.0)], 0.25), "-x1", &[])
}

pub const THREE_MINIMA: &str = "x1^6/6 - 5*x1^4/4 + 2*x1^2 + (x2 - 0.2*x1^2)^2";

pub fn three_minima() -> System {
    gradient_system(
        THREE_MINIMA,
        boxed(&[(-3.0, 3.0), (-1.0, 2.0)], 0.25),
        &[&[-2.0, 0.8], &[-1.0, 0.2], &[0.0, 0.0], &[1.0, 0.2], &[2.0, 0.8]],
    )
}

pub fn product_3d() -> System {
    let set: Vec<Vec<f64>> = [-1.0, 0.0, 1.0]
        .iter()
        .flat_map(|&a| [-1.0, 0.0, 1.0].map(|b| vec![a, b, 0.0]))
        .collect();
    let refs: Vec<&[f64]> = set.iter().map(|v| v.as_slice()).collect();
    gradient_system(
        "(x1^2 - 1)^2 + (x2^2 - 1)^2 + x3^2",
        boxed(&[(-2.0, 2.0), (-2.0, 2.0), (-1.0, 1.0)], 0.5),
        &refs,
    )
}
