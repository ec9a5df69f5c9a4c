use criterion::{black_box, criterion_group, criterion_main, Criterion};
use mcf_core::flow::integrate;
use mcf_core::homalg::{cubical_relative_homology, smith_normal_form};
use mcf_core::{build_block, compute_hi, parse, BlockSpec, Collar, Coefficients, FieldDef, Grid, IntMatrix, PipelineOptions, System};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn square(field: &[&str], h: f64) -> (FieldDef, mcf_core::GridBlock) {
    let f = FieldDef::parse(2, field, false).unwrap();
    let b = build_block(&BlockSpec::Box(vec![(-1.0, 1.0), (-1.0, 1.0)]), &Grid::with_spacing(h)).unwrap();
    (f, b)
}

fn snf(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<Vec<i64>> = (0..24).map(|_| (0..24).map(|_| rng.gen_range(-9..=9)).collect()).collect();
    let m = IntMatrix::from_rows(&rows);
    c.bench_function("snf 24x24", |b| b.iter(|| smith_normal_form(black_box(&m))));
}

fn integration(c: &mut Criterion) {
    let f = FieldDef::parse(2, &["x2", "-x1 + (1 - x1^2)*x2"], false).unwrap();
    let tol = mcf_core::Tolerances::default();
    c.bench_function("dopri5 van der pol, t = 20", |b| {
        b.iter(|| integrate(&f, black_box(&[0.5, 0.0]), 20.0, &tol).unwrap())
    });
}

fn cubical(c: &mut Criterion) {
    let (f, block) = square(&["x1", "-x2"], 0.125);
    let block = block.classify_boundary(&f, 3, 1e-9);
    let exit = block.exit_set().unwrap();
    let set = block.cubical_set();
    c.bench_function("H(B, B-) saddle 16x16", |b| {
        b.iter(|| cubical_relative_homology(black_box(&set), &exit, Coefficients::Integer).unwrap())
    });
}

fn pipeline(c: &mut Criterion) {
    let (field, block) = square(&["x1", "-x2"], 0.25);
    let sys = System {
        field,
        block,
        lyapunov: parse("-(x1^2 - x2^2)/2", 2).unwrap(),
        collar: Collar {
            samples: vec![vec![0.0, 0.0]],
            radius: 0.1,
        },
    };
    let opts = PipelineOptions::default();
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("saddle HI", |b| b.iter(|| compute_hi(black_box(&sys), &opts).unwrap()));
    g.finish();
}

criterion_group!(benches, snf, integration, cubical, pipeline);
criterion_main!(benches);
