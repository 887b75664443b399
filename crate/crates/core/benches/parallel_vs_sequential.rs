use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stagehand_core::config::EngineConfig;
use stagehand_core::engine::{run_batch, Engine, EngineOptions};
use stagehand_core::heatgrid::{HeatGrid, HeatGridParams};
use stagehand_core::ingest::{ScenarioAgent, ScenarioScript, Waypoint};
use stagehand_core::model::{EntityKind, Position, RoomBounds, TrackedEntity};
use stagehand_core::provider::MockProvider;

const ROOM: RoomBounds = RoomBounds {
    width: 40.0,
    height: 30.0,
};

fn crowd(n: usize, rng: &mut ChaCha8Rng) -> Vec<TrackedEntity> {
    (0..n)
        .map(|i| TrackedEntity {
            id: format!("e{i}"),
            kind: EntityKind::Audience,
            position: Position {
                x: rng.gen_range(0.0..ROOM.width),
                y: rng.gen_range(0.0..ROOM.height),
            },
            last_seen: 0,
            label: None,
        })
        .collect()
}

fn grid_tick(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let people = crowd(200, &mut rng);
    let mut group = c.benchmark_group("heatgrid_tick");
    for &(cols, rows) in &[(64, 48), (256, 192), (640, 480)] {
        let params = HeatGridParams {
            cols,
            rows,
            ..Default::default()
        };
        let grid = HeatGrid::new(ROOM, &params).unwrap().tick(&people);
        let label = format!("{cols}x{rows}");
        group.bench_with_input(BenchmarkId::new("sequential", &label), &grid, |b, g| {
            b.iter(|| black_box(g.tick_sequential(&people)))
        });
        #[cfg(feature = "parallel")]
        group.bench_with_input(BenchmarkId::new("parallel", &label), &grid, |b, g| {
            b.iter(|| black_box(g.tick_parallel(&people)))
        });
    }
    group.finish();
}

const CONFIG: &str = r#"{
    "room": {"width": 10, "height": 8},
    "zones": [{"id": "pillar", "name": "pillar", "shape": {"circle": {"center": {"x": 5, "y": 4}, "radius": 1.5}}}],
    "actuators": [{"id": "pillar_light", "kind": "light", "zone": "pillar"}, {"id": "fan", "kind": "relay"}],
    "commands": ["when proximity(<2m, 2) then relay(fan, on)"]
}"#;

fn scripts(n: usize) -> Vec<ScenarioScript> {
    (0..n as u64)
        .map(|seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ScenarioScript {
                duration_ms: 20_000,
                agents: (0..4)
                    .map(|i| ScenarioAgent {
                        id: format!("a{i}"),
                        kind: EntityKind::Audience,
                        waypoints: (0..=20)
                            .map(|k| Waypoint {
                                t_ms: k * 1000,
                                x: rng.gen_range(0.0..10.0),
                                y: rng.gen_range(0.0..8.0),
                            })
                            .collect(),
                    })
                    .collect(),
                utterances: Vec::new(),
            }
        })
        .collect()
}

fn batch(c: &mut Criterion) {
    let cfg = EngineConfig::from_json(CONFIG).unwrap();
    let jobs = scripts(16);
    let make = |i: usize| {
        let opts = EngineOptions {
            session_id: Some(format!("bench-{i}")),
            ..Default::default()
        };
        Engine::new(cfg.clone(), Arc::new(MockProvider::holding()), opts)
    };
    let mut group = c.benchmark_group("scenario_batch");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| {
            for (i, s) in jobs.iter().enumerate() {
                let mut e = make(i).unwrap();
                black_box(stagehand_core::engine::run_scenario(&mut e, s).unwrap());
            }
        })
    });
    group.bench_function(if cfg!(feature = "parallel") { "parallel" } else { "batch" }, |b| {
        b.iter(|| black_box(run_batch(jobs.clone(), make)))
    });
    group.finish();
}

criterion_group!(benches, grid_tick, batch);
criterion_main!(benches);
