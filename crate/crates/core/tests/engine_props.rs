use std::sync::{Arc, Mutex};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stagehand_core::config::EngineConfig;
use stagehand_core::director::{default_colors, ActuationTarget};
use stagehand_core::engine::{replay, run_scenario, Engine, EngineOptions, Storage};
use stagehand_core::ingest::{ScenarioAgent, ScenarioScript, Utterance, Waypoint};
use stagehand_core::memory::{Annotation, Exchange, Memory, MemoryParams, MemoryStore, PatternKey};
use stagehand_core::model::EntityKind;
use stagehand_core::provider::{LanguageModelProvider, MockProvider, ProviderError, ProviderRequest, Unavailable};
use stagehand_core::session_log::{LoadedLog, Payload};

const CONFIG: &str = r#"{
    "room": {"width": 10, "height": 8},
    "zones": [
        {"id": "pillar", "name": "pillar", "shape": {"circle": {"center": {"x": 5, "y": 4}, "radius": 1.5}}},
        {"id": "door", "name": "door", "shape": {"rectangle": {"min": {"x": 0, "y": 0}, "max": {"x": 2, "y": 2}}}}
    ],
    "actuators": [
        {"id": "pillar_light", "kind": "light", "zone": "pillar"},
        {"id": "door_light", "kind": "light", "zone": "door"},
        {"id": "fan", "kind": "relay"}
    ],
    "policy": {"query_on": ["speech", "zone_change", "hotspot_emerged", "proximity_change"], "min_interval_ms": MIN, "max_inflight": MAX},
    "commands": [
        "constraint palette(red,green)",
        "constraint transition >= 3s",
        "when proximity(<2m, 2) then relay(fan, on)",
        "when enter(door) then light(door_light, bri=30%)"
    ],
    "framing": "be a scared room"
}"#;

fn config(min_interval: u64, max_inflight: usize) -> EngineConfig {
    EngineConfig::from_json(
        &CONFIG
            .replace("MIN", &min_interval.to_string())
            .replace("MAX", &max_inflight.to_string()),
    )
    .unwrap()
}

fn wandering(seed: u64, agents: usize, duration_ms: u64) -> ScenarioScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ScenarioScript {
        duration_ms,
        agents: (0..agents)
            .map(|i| ScenarioAgent {
                id: format!("a{i}"),
                kind: if i % 2 == 0 { EntityKind::Performer } else { EntityKind::Audience },
                waypoints: (0..=duration_ms / 700)
                    .map(|k| Waypoint {
                        t_ms: k * 700,
                        x: rng.gen_range(0.0..10.0),
                        y: rng.gen_range(0.0..8.0),
                    })
                    .collect(),
            })
            .collect(),
        utterances: (1..duration_ms / 1100)
            .map(|k| Utterance {
                t_ms: k * 1100,
                speaker: None,
                text: ["How are you?", "Hello?", "Anyone?"][k as usize % 3].into(),
            })
            .collect(),
    }
}

/// Replies with random, often constraint-breaking light states.
struct Fuzz(Mutex<ChaCha8Rng>);

impl LanguageModelProvider for Fuzz {
    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let mut rng = self.0.lock().unwrap();
        if request.user.contains("be a scared room") {
            return Ok(r#"{"intention":"shrink","affect":"fear","primary_modality":"light","reaction_pattern":"go red"}"#.into());
        }
        if rng.gen_bool(0.1) {
            return Err(ProviderError::Transport("flaky".into()));
        }
        let actions: Vec<_> = (0..rng.gen_range(0..3))
            .map(|_| {
                let target = ["pillar_light", "door_light", "fan"][rng.gen_range(0..3)];
                if target == "fan" {
                    serde_json::json!({"target": target, "relay": rng.gen_bool(0.5)})
                } else {
                    serde_json::json!({"target": target, "light": {
                        "on": rng.gen_bool(0.8),
                        "bri": rng.gen_range(0..=254),
                        "hue": rng.gen_range(0..=65535),
                        "sat": rng.gen_range(0..=254),
                        "transition_ms": rng.gen_range(0..6000),
                    }})
                }
            })
            .collect();
        Ok(serde_json::json!({"actions": actions, "reasoning": "fuzzed"}).to_string())
    }

    fn name(&self) -> &str {
        "fuzz"
    }
}

fn run(cfg: &EngineConfig, provider: Arc<dyn LanguageModelProvider>, script: &ScenarioScript) -> LoadedLog {
    let mut e = Engine::new(cfg.clone(), provider, EngineOptions::default()).unwrap();
    run_scenario(&mut e, script).unwrap();
    e.log().to_loaded()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dispatched_actions_respect_constraints(seed in any::<u64>(), agents in 1usize..6) {
        let cfg = config(500, 2);
        let log = run(&cfg, Arc::new(Fuzz(Mutex::new(ChaCha8Rng::seed_from_u64(seed)))), &wandering(seed, agents, 8000));
        let colors = default_colors();
        for cmd in log.dispatched() {
            if let ActuationTarget::Light(s) = cmd.target {
                if cmd.exchange.is_some() || s.on {
                    prop_assert!(!s.on || colors[..2].iter().any(|c| c.contains(s.hue)), "{cmd:?}");
                    prop_assert!(s.transition_ms >= 3000, "{cmd:?}");
                }
            }
        }
    }

    #[test]
    fn provider_calls_respect_rate_limit(seed in any::<u64>(), min in 200u64..3000, max in 1usize..4) {
        let cfg = config(min, max);
        let log = run(&cfg, Arc::new(Fuzz(Mutex::new(ChaCha8Rng::seed_from_u64(seed)))), &wandering(seed, 4, 8000));
        let starts: Vec<u64> = log
            .entries
            .iter()
            .filter(|e| matches!(&e.payload, Payload::PromptComposed { .. }))
            .map(|e| e.t_ms)
            .collect();
        for (i, &t) in starts.iter().enumerate() {
            let in_window = starts[i..].iter().take_while(|&&u| u < t + min).count();
            prop_assert!(in_window <= max, "{in_window} calls within {min} ms from {t}");
        }
    }

    #[test]
    fn runs_are_deterministic_and_replay_is_idempotent(seed in any::<u64>(), agents in 1usize..5) {
        let cfg = config(1000, 1);
        let script = wandering(seed, agents, 6000);
        let mock = || -> Arc<dyn LanguageModelProvider> { Arc::new(MockProvider::holding()) };
        let a = run(&cfg, mock(), &script);
        let b = run(&cfg, Arc::new(Fuzz(Mutex::new(ChaCha8Rng::seed_from_u64(seed)))), &script);
        let b2 = run(&cfg, Arc::new(Fuzz(Mutex::new(ChaCha8Rng::seed_from_u64(seed)))), &script);
        prop_assert_eq!(b.dispatched_bytes(), b2.dispatched_bytes());
        prop_assert_eq!(a.dispatched_bytes(), run(&cfg, mock(), &script).dispatched_bytes());

        let first = replay(&b, &cfg, &mut |_, _| {}).unwrap();
        prop_assert!(first.identical);
        prop_assert!(first.prompt_mismatches.is_empty());
        let second = replay(&first.log, &cfg, &mut |_, _| {}).unwrap();
        prop_assert!(second.identical);
        prop_assert_eq!(first.log.dispatched_bytes(), second.log.dispatched_bytes());
    }

    #[test]
    fn ticking_survives_a_dead_provider(seed in any::<u64>()) {
        let mut cfg = config(500, 1);
        cfg.framing = None;
        let script = wandering(seed, 4, 6000);
        let mut e = Engine::new(cfg, Arc::new(Unavailable), EngineOptions::default()).unwrap();
        let summary = run_scenario(&mut e, &script).unwrap();
        let log = e.log().to_loaded();
        let ticks = log.entries.iter().filter(|x| matches!(x.payload, Payload::Tick)).count() as u64;
        prop_assert_eq!(ticks, summary.ticks);
        prop_assert!(e.grid().global_max() > 0.0);
        let failed = log.entries.iter().filter(|x| matches!(x.payload, Payload::ProviderFailed { .. })).count();
        let composed = log.entries.iter().filter(|x| matches!(x.payload, Payload::PromptComposed { .. })).count();
        // one transport retry per exchange
        prop_assert_eq!(failed, 2 * composed);
    }
}

// ---------------------------------------------------------------------------
// memory

fn exchange(i: usize, trigger: &str, hue: u16) -> Exchange {
    let actions = vec![stagehand_core::director::ProposedAction {
        actuator: "pillar_light".into(),
        target: ActuationTarget::Light(stagehand_core::model::LightState {
            on: true,
            bri: 80,
            hue,
            sat: 254,
            transition_ms: 3000,
        }),
    }];
    Exchange {
        id: format!("x{i}"),
        timestamp: i as u64 * 100,
        prompt_digest: "d".into(),
        pattern: PatternKey::from_actions(trigger, &actions, &default_colors()),
        actions,
        reasoning: format!("because {i}"),
        annotation: Annotation::None,
        note: None,
        trigger: trigger.into(),
        from_rule: false,
    }
}

#[derive(Debug, Clone)]
enum Op {
    Record(String, u16),
    Annotate(usize, Annotation),
    Promote,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        4 => (prop::sample::select(vec!["speech", "zone_change", "hotspot_emerged"]), prop::sample::select(vec![0u16, 25500, 46920]))
            .prop_map(|(t, h)| Op::Record(t.to_string(), h)),
        2 => (0usize..40, prop::sample::select(vec![Annotation::Worked, Annotation::NeedsAdjustment]))
            .prop_map(|(i, a)| Op::Annotate(i, a)),
        1 => Just(Op::Promote),
    ];
    prop::collection::vec(op, 0..60)
}

fn apply(m: &mut Memory, ops: &[Op]) {
    let mut n = 0;
    for op in ops {
        match op {
            Op::Record(t, h) => {
                let before: Vec<_> = m.longterm().to_vec();
                m.record_exchange(exchange(n, t, *h)).unwrap();
                n += 1;
                // recording alone never touches long-term weights
                assert_eq!(before, m.longterm());
            }
            Op::Annotate(i, a) => {
                let _ = m.annotate(&format!("x{i}"), *a, None);
            }
            Op::Promote => {
                m.promote();
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ring_is_bounded_and_consolidation_is_pure(ops in ops(), k in 1usize..8) {
        let params = MemoryParams { short_term_size: k, ..Default::default() };
        let mut a = Memory::new(params, default_colors()).unwrap();
        apply(&mut a, &ops);
        prop_assert!(a.ring_len() <= k);
        let mut b = a.clone();
        let sa = a.consolidate(None, &[], &[], &[], None, 5);
        let sb = b.consolidate(None, &[], &[], &[], None, 5);
        prop_assert_eq!(serde_json::to_string(&sa).unwrap(), serde_json::to_string(&sb).unwrap());
        let again = a.consolidate(None, &[], &[], &[], None, 6);
        prop_assert!(again.version > sa.version);
    }
}

#[test]
fn restarted_engine_reproduces_prompts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(1000, 1);
    cfg.data_dir = dir.path().to_path_buf();
    let opts = |id: &str| EngineOptions {
        session_id: Some(id.into()),
        storage: Storage::Directory,
        ..Default::default()
    };
    let provider = || -> Arc<dyn LanguageModelProvider> { Arc::new(MockProvider::holding()) };
    let mut first = Engine::new(cfg.clone(), provider(), opts("one")).unwrap();
    run_scenario(&mut first, &wandering(3, 3, 5000)).unwrap();
    let score = first.consolidate(6000);
    // the room is empty after a restart; everything above it must survive
    let settled = |t: String| t.split("[CURRENT ENVIRONMENTAL STATE]").next().unwrap().to_string();
    let prompt = settled(first.current_prompt().text());
    first.close().unwrap();

    let second = Engine::new(cfg.clone(), provider(), opts("two")).unwrap();
    assert_eq!(second.score(), &score);
    assert_eq!(settled(second.current_prompt().text()), prompt);

    let (entries, stored) = MemoryStore::new(dir.path(), "two").load_production().unwrap();
    assert_eq!(stored.as_ref(), Some(&score));
    assert_eq!(entries.len(), first.memory().longterm().len());
}
