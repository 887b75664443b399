use proptest::prelude::*;

use stagehand_core::actuation::{
    apply_virtual, encode_hue_request, transition_deciseconds, ActuationCommand, Actuator, LightTransition,
    PhysicalBinding,
};
use stagehand_core::director::{
    default_colors, validate_action, ActuationTarget, Constraint, ProposedAction, Validation,
};
use stagehand_core::dramaturgy::Modality;
use stagehand_core::heatgrid::{HeatGrid, HeatGridParams};
use stagehand_core::model::{EntityKind, LightState, Position, RoomBounds, TrackedEntity, MAX_BRI, MAX_SAT};

const ROOM: RoomBounds = RoomBounds {
    width: 10.0,
    height: 8.0,
};

fn params(cols: usize, rows: usize, decay: f64, deposit: f64) -> HeatGridParams {
    HeatGridParams {
        cols,
        rows,
        decay,
        deposit,
        ..Default::default()
    }
}

fn entities(points: &[(f64, f64)]) -> Vec<TrackedEntity> {
    points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| TrackedEntity {
            id: format!("e{i}"),
            kind: EntityKind::Audience,
            position: Position { x, y },
            last_seen: 0,
            label: None,
        })
        .collect()
}

fn walk(k: usize, ticks: usize) -> impl Strategy<Value = Vec<Vec<(f64, f64)>>> {
    prop::collection::vec(prop::collection::vec((0.0..=10.0f64, 0.0..=8.0f64), 0..=k), ticks)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn empty_room_decays_strictly(
        frames in walk(4, 20),
        decay in 0.05..0.999f64,
        deposit in 0.1..5.0f64,
    ) {
        let mut g = HeatGrid::new(ROOM, &params(12, 9, decay, deposit)).unwrap();
        for f in &frames {
            g = g.tick(&entities(f));
        }
        for _ in 0..50 {
            let next = g.tick(&[]);
            for (a, b) in g.cells().iter().zip(next.cells()) {
                if *a >= 1e-12 {
                    prop_assert!(b < a, "{b} !< {a}");
                } else {
                    prop_assert!(b <= a);
                }
            }
            g = next;
        }
    }

    #[test]
    fn heat_is_bounded(
        frames in walk(5, 120),
        decay in 0.05..0.99f64,
        deposit in 0.1..5.0f64,
    ) {
        let mut g = HeatGrid::new(ROOM, &params(10, 8, decay, deposit)).unwrap();
        let k = frames.iter().map(Vec::len).max().unwrap_or(0) as f64;
        let bound = deposit * k / (1.0 - decay) + 1e-9;
        for f in &frames {
            g = g.tick(&entities(f));
            prop_assert!(g.cells().iter().all(|&v| v >= 0.0 && v <= bound));
        }
    }

    #[test]
    fn sequential_and_parallel_ticks_agree(frames in walk(6, 30)) {
        // large enough to take the rayon path
        let p = params(80, 64, 0.9, 1.0);
        let (mut a, mut b) = (HeatGrid::new(ROOM, &p).unwrap(), HeatGrid::new(ROOM, &p).unwrap());
        for f in &frames {
            let es = entities(f);
            a = a.tick_sequential(&es);
            b = b.tick(&es);
            prop_assert_eq!(a.cells(), b.cells());
        }
    }
}

/// The definition, cell by cell.
fn brute_hotspots(g: &HeatGrid, theta: f64, h_min: f64) -> Vec<(usize, usize)> {
    let (cols, rows) = (g.cols(), g.rows());
    let max = g.cells().iter().copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return vec![];
    }
    let threshold = (theta * max).max(h_min);
    let uniform = g.cells().iter().all(|&v| v == max);
    let mut out = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let v = g.get(col, row);
            let peak = if uniform {
                (col, row) == (0, 0)
            } else {
                let mut ge_all = true;
                let mut gt_one = false;
                for r in row.saturating_sub(1)..=(row + 1).min(rows - 1) {
                    for c in col.saturating_sub(1)..=(col + 1).min(cols - 1) {
                        if (c, r) == (col, row) {
                            continue;
                        }
                        ge_all &= v >= g.get(c, r);
                        gt_one |= v > g.get(c, r);
                    }
                }
                ge_all && gt_one
            };
            if peak && v >= threshold {
                out.push((col, row));
            }
        }
    }
    out.sort_by(|a, b| g.get(b.0, b.1).total_cmp(&g.get(a.0, a.1)).then(a.cmp(b)));
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn hotspots_match_brute_force(
        cols in 1usize..9,
        rows in 1usize..9,
        // few distinct levels so ties and plateaus are common
        levels in prop::collection::vec(0u8..4, 64),
        theta in 0.01..=1.0f64,
        h_min in 0.0..3.0f64,
    ) {
        let mut g = HeatGrid::new(ROOM, &params(cols, rows, 0.9, 1.0)).unwrap();
        for row in 0..rows {
            for col in 0..cols {
                g.set(col, row, levels[row * cols + col] as f64);
            }
        }
        let got: Vec<_> = g.hotspots(theta, h_min).iter().map(|h| (h.col, h.row)).collect();
        prop_assert_eq!(got, brute_hotspots(&g, theta, h_min));
    }
}

// ---------------------------------------------------------------------------
// constraint validation

fn light() -> impl Strategy<Value = LightState> {
    (any::<bool>(), 0..=MAX_BRI, any::<u16>(), 0..=MAX_SAT, 0u32..20_000).prop_map(|(on, bri, hue, sat, transition_ms)| {
        LightState {
            on,
            bri,
            hue,
            sat,
            transition_ms,
        }
    })
}

fn action() -> impl Strategy<Value = ProposedAction> {
    let target = prop_oneof![
        4 => light().prop_map(ActuationTarget::Light),
        1 => any::<bool>().prop_map(ActuationTarget::Relay),
    ];
    target.prop_map(|target| ProposedAction {
        actuator: "lamp".into(),
        target,
    })
}

fn constraint() -> impl Strategy<Value = Constraint> {
    let names = prop::sample::subsequence(vec!["red", "green", "blue"], 1..=3)
        .prop_map(|v| v.into_iter().map(String::from).collect());
    prop_oneof![
        names.prop_map(|allowed| Constraint::Palette { allowed }),
        (0u32..10_000).prop_map(|ms| Constraint::MinTransition { ms }),
        (0..=MAX_BRI).prop_map(|bri| Constraint::MaxIntensity { bri }),
        prop_oneof![Just(Modality::Light), Just(Modality::Motion)].prop_map(|modality| Constraint::ModalityOnly { modality }),
    ]
}

fn satisfies(a: &ProposedAction, cs: &[Constraint]) -> bool {
    let colors = default_colors();
    cs.iter().all(|c| match (c, &a.target) {
        (Constraint::ModalityOnly { modality }, t) => t.modality() == *modality,
        (Constraint::Palette { allowed }, ActuationTarget::Light(s)) => {
            !s.on || colors.iter().any(|col| allowed.contains(&col.name) && col.contains(s.hue))
        }
        (Constraint::MinTransition { ms }, ActuationTarget::Light(s)) => s.transition_ms >= *ms,
        (Constraint::MaxIntensity { bri }, ActuationTarget::Light(s)) => s.bri <= *bri,
        _ => true,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(5000))]

    #[test]
    fn validation_is_idempotent_and_sound(a in action(), cs in prop::collection::vec(constraint(), 0..5)) {
        let colors = default_colors();
        match validate_action(&a, &cs, &colors) {
            Validation::Valid { action } => {
                prop_assert_eq!(&action, &a);
                prop_assert!(satisfies(&action, &cs));
            }
            Validation::Clamped { action, adjustments } => {
                prop_assert!(!adjustments.is_empty());
                prop_assert!(satisfies(&action, &cs));
                prop_assert_eq!(
                    validate_action(&action, &cs, &colors),
                    Validation::Valid { action: action.clone() }
                );
            }
            Validation::Violation { reasons } => {
                prop_assert!(!reasons.is_empty());
                // only colour and modality breaches reject
                let breach = cs.iter().any(|c| match (c, &a.target) {
                    (Constraint::ModalityOnly { modality }, t) => t.modality() != *modality,
                    (Constraint::Palette { allowed }, ActuationTarget::Light(s)) => {
                        s.on && !colors.iter().any(|col| allowed.contains(&col.name) && col.contains(s.hue))
                    }
                    _ => false,
                });
                prop_assert!(breach);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// virtual and physical actuation

proptest! {
    #![proptest_config(ProptestConfig::with_cases(3000))]

    #[test]
    fn physical_body_mirrors_virtual_state(target in light(), start in light(), issued in 0u64..100_000) {
        let mut lamp = Actuator::light("lamp", None, LightState { transition_ms: 0, ..start });
        let cmd = ActuationCommand {
            actuator: "lamp".into(),
            target: ActuationTarget::Light(target),
            issued_at: issued,
            exchange: None,
        };
        apply_virtual(&mut lamp, &cmd, issued).unwrap();
        let settled = lamp.light_target().unwrap();
        prop_assert_eq!(settled, target);

        let binding = PhysicalBinding::Hue {
            bridge: "http://127.0.0.1:9".into(),
            key: "k".into(),
            physical_id: "3".into(),
        };
        let req = encode_hue_request(&cmd, &binding).unwrap();
        prop_assert_eq!(req.method.as_str(), "PUT");
        prop_assert_eq!(req.path.as_str(), "/api/k/lights/3/state");
        let body: serde_json::Value = serde_json::from_str(&req.body).unwrap();
        prop_assert_eq!(body["on"].as_bool(), Some(settled.on));
        if settled.on {
            prop_assert_eq!(body["bri"].as_u64(), Some(settled.bri as u64));
            prop_assert_eq!(body["hue"].as_u64(), Some(settled.hue as u64));
            prop_assert_eq!(body["sat"].as_u64(), Some(settled.sat as u64));
            let expected = (settled.transition_ms as f64 / 100.0).round() as u64;
            prop_assert_eq!(body["transitiontime"].as_u64(), Some(expected));
            prop_assert_eq!(transition_deciseconds(settled.transition_ms) as u64, expected);
            let exact = format!(
                r#"{{"on":true,"bri":{},"hue":{},"sat":{},"transitiontime":{expected}}}"#,
                settled.bri, settled.hue, settled.sat
            );
            prop_assert_eq!(&req.body, &exact);
        }
    }

    #[test]
    fn transition_endpoints_are_exact(from in light(), to in light(), start in 0u64..100_000) {
        let tr = LightTransition { from, to, start };
        prop_assert_eq!(tr.state_at(start + to.transition_ms as u64), to);
        if to.transition_ms > 0 {
            prop_assert_eq!(tr.state_at(start), from);
        }
    }
}
