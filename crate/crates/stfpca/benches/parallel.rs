//! Compares the data-parallel map against the always-sequential fallback on
//! a batch of independent small fits, the workload shape used by simulation
//! replicates, CV folds, and bootstrap replicates.
//!
//! With the default `parallel` feature the first benchmark runs on the rayon
//! pool (`RAYON_NUM_THREADS` controls its size); built with
//! `--no-default-features` both benchmarks run sequentially.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use stfpca::basis2d::orthonormal_basis;
use stfpca::em;
use stfpca::mesh::{Point2, Triangle, Triangulation};
use stfpca::model::{FitConfig, Penalties};
use stfpca::panel::{ObservationPanel, RawPanel, RawTimeSlice};
use stfpca::parallel::{map_indexed, map_indexed_sequential};
use stfpca::temporal::{build_temporal_basis, TemporalBasisSpec};

struct Workload {
    basis: Arc<stfpca::basis2d::BivariateBasis>,
    temporal: Arc<stfpca::temporal::TemporalBasis>,
    panels: Vec<ObservationPanel>,
}

fn build_workload(batch: usize) -> Workload {
    let mesh = Triangulation::new(
        vec![
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ],
        vec![Triangle { v: [0, 1, 2] }, Triangle { v: [0, 2, 3] }],
    )
    .unwrap();
    let basis = Arc::new(orthonormal_basis(&mesh, 2, 0).unwrap());
    let n = 30;
    let temporal = Arc::new(
        build_temporal_basis(
            &TemporalBasisSpec { trend_order: 1, knots: vec![], fourier_pairs: 1, period: 12.0 },
            n,
        )
        .unwrap(),
    );
    let panels = (0..batch)
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(b as u64);
            let mut raw = RawPanel { times: Vec::new() };
            for t in 0..n {
                let mut slice = RawTimeSlice::default();
                for _ in 0..12 {
                    let p = Point2::new(rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0));
                    slice.locations.push(p);
                    slice.values.push(
                        p.x + 0.4 * p.y
                            + 0.3 * (t as f64 * 0.5).sin()
                            + 0.1 * rng.gen_range(-1.0..1.0),
                    );
                }
                raw.times.push(slice);
            }
            ObservationPanel::build(&raw, &basis, &temporal).unwrap()
        })
        .collect();
    Workload { basis, temporal, panels }
}

fn run_one(w: &Workload, index: usize) -> f64 {
    let mut config = FitConfig::new(1, 1).with_penalties(Penalties::uniform(1e-3));
    config.max_iter = 15;
    config.ar_warmup = 5;
    let model =
        em::fit(&w.panels[index], w.basis.clone(), w.temporal.clone(), config).unwrap();
    model.params.sigma2
}

fn bench_batched_fits(c: &mut Criterion) {
    let batch = 4;
    let workload = build_workload(batch);
    let mut group = c.benchmark_group("batched_fits");
    group.sample_size(10);
    group.bench_function("data_parallel", |b| {
        b.iter(|| map_indexed(batch, |i| run_one(&workload, i)))
    });
    group.bench_function("sequential", |b| {
        b.iter(|| map_indexed_sequential(batch, |i| run_one(&workload, i)))
    });
    group.finish();
}

criterion_group!(benches, bench_batched_fits);
criterion_main!(benches);
