//! Randomized invariants: bijectivity of the action codec, conservation of
//! real power on arbitrary radial networks, monotone device responses, and
//! the environment's reward contract.

use std::collections::HashSet;

use gcdt_core::env::{
    decode_action, encode_action, ActionIndex, Env, EnvConfig, Environment,
};
use gcdt_core::feeder::{
    bundled_feeder, load_feeder, solve_power_flow, DeviceState, FeederSpec,
};
use proptest::prelude::*;
use serde_json::json;

// ---------------------------------------------------------------------------
// Random radial networks.

/// A random tree on `n` buses (parent of bus i is drawn from 0..i, so bus 0
/// is the source and the graph is radial by construction), with random
/// loads, device placements, device settings, and load scales.
fn arb_feeder_case() -> impl Strategy<Value = (FeederSpec, DeviceState, Vec<f64>)> {
    (2usize..10).prop_flat_map(|n| {
        let parents = prop::collection::vec(any::<prop::sample::Index>(), n - 1);
        let impedances = prop::collection::vec((1e-4f64..0.02, 1e-4f64..0.03), n - 1);
        let load_p = prop::collection::vec(0.0f64..0.12, n - 1);
        let caps = prop::collection::vec(prop::option::weighted(0.3, 0.005f64..0.06), n - 1);
        let regs = prop::collection::vec(prop::bool::weighted(0.2), n - 1);
        let bats = prop::collection::vec(prop::option::weighted(0.3, 0.01f64..0.08), n - 1);
        let cap_on = prop::collection::vec(any::<bool>(), n - 1);
        let taps = prop::collection::vec(0u32..33, n - 1);
        let socs = prop::collection::vec(0.0f64..=1.0, n - 1);
        let discharges = prop::collection::vec(-1.0f64..=1.0, n - 1);
        let scales = prop::collection::vec(0.5f64..1.5, n - 1);
        (
            Just(n),
            parents,
            impedances,
            load_p,
            (caps, regs, bats),
            (cap_on, taps, socs, discharges, scales),
        )
            .prop_map(build_feeder_case)
    })
}

type Placements = (Vec<Option<f64>>, Vec<bool>, Vec<Option<f64>>);
type Settings = (Vec<bool>, Vec<u32>, Vec<f64>, Vec<f64>, Vec<f64>);

fn build_feeder_case(
    (n, parents, impedances, load_p, (caps, regs, bats), (cap_on, taps, socs, discharges, scales)): (
        usize,
        Vec<prop::sample::Index>,
        Vec<(f64, f64)>,
        Vec<f64>,
        Placements,
        Settings,
    ),
) -> (FeederSpec, DeviceState, Vec<f64>) {
    let buses: Vec<_> = (0..n)
        .map(|i| json!({ "id": format!("b{i}"), "phases": [1, 2, 3] }))
        .collect();
    let lines: Vec<_> = (1..n)
        .map(|i| {
            let parent = parents[i - 1].index(i);
            let (r, x) = impedances[i - 1];
            json!({ "from": format!("b{parent}"), "to": format!("b{i}"), "r_pu": r, "x_pu": x })
        })
        .collect();
    let loads: Vec<_> = (1..n)
        .filter(|&i| load_p[i - 1] > 0.005)
        .map(|i| {
            let p = load_p[i - 1];
            json!({ "bus": format!("b{i}"), "p_pu": p, "q_pu": p * 0.5 })
        })
        .collect();
    let capacitors: Vec<_> = (1..n)
        .filter_map(|i| {
            caps[i - 1].map(|q| json!({ "bus": format!("b{i}"), "q_pu": q }))
        })
        .collect();
    let regulators: Vec<_> = (1..n)
        .filter(|&i| regs[i - 1])
        .map(|i| {
            json!({ "bus": format!("b{i}"), "tap_count": 33, "ratio_min": 0.9, "ratio_max": 1.1 })
        })
        .collect();
    let batteries: Vec<_> = (1..n)
        .filter_map(|i| {
            bats[i - 1].map(|d| {
                json!({ "bus": format!("b{i}"), "capacity_pu_h": 0.4, "max_discharge_pu": d })
            })
        })
        .collect();
    let doc = json!({
        "name": "random",
        "buses": buses,
        "lines": lines,
        "source": "b0",
        "capacitors": capacitors,
        "regulators": regulators,
        "batteries": batteries,
        "loads": loads,
    });
    let spec = load_feeder(&doc.to_string()).expect("generated feeder must be valid");

    let dev = DeviceState {
        cap_on: cap_on[..spec.capacitors.len()].to_vec(),
        tap: taps[..spec.regulators.len()].to_vec(),
        soc: socs[..spec.batteries.len()].to_vec(),
        discharge: discharges[..spec.batteries.len()].to_vec(),
    };
    let load_scale = scales[..spec.loads.len()].to_vec();
    (spec, dev, load_scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    /// Source generation plus battery discharge equals served load plus
    /// line losses, for any radial network and any device settings.
    #[test]
    fn real_power_is_conserved_on_random_radial_networks(
        case in arb_feeder_case(),
    ) {
        let (spec, dev, load_scale) = case;
        let sol = solve_power_flow(&spec, &dev, &load_scale).unwrap();
        prop_assume!(sol.converged);
        let served: f64 = spec
            .loads
            .iter()
            .zip(&load_scale)
            .map(|(l, s)| l.p_pu * s)
            .sum();
        let gap = (sol.total_power_pu - served - sol.power_loss_pu).abs();
        prop_assert!(gap <= 1e-6, "imbalance {gap} on {} buses", spec.n_bus());
        prop_assert!(sol.power_loss_pu >= 0.0);
        for v in sol.voltage.iter() {
            prop_assert!(v.is_finite() && *v > 0.0);
        }
    }
}

// ---------------------------------------------------------------------------
// Action codec.

proptest! {
    #[test]
    fn action_codec_round_trips_on_bundled_feeders(
        raw in any::<prop::sample::Index>(),
        feeder in prop::sample::select(vec!["feeder13", "feeder34"]),
    ) {
        let spec = bundled_feeder(feeder).unwrap();
        let cfg = EnvConfig::default();
        let env = Env::new(spec.clone(), cfg.clone()).unwrap();
        let idx = ActionIndex(raw.index(env.action_count()));
        let dec = decode_action(idx, &spec, &cfg).unwrap();
        prop_assert_eq!(dec.cap_on.len(), spec.capacitors.len());
        prop_assert!(dec.tap.iter().all(|t| cfg.tap_choices.contains(t)));
        prop_assert!(dec
            .discharge_choice
            .iter()
            .all(|c| cfg.discharge_choices.contains(c)));
        prop_assert!(dec.discharge.iter().all(|d| (-1.0..=1.0).contains(d)));
        prop_assert_eq!(encode_action(&dec, &spec, &cfg).unwrap(), idx);
    }
}

#[test]
fn every_feeder13_action_decodes_to_a_distinct_device_tuple() {
    let spec = bundled_feeder("feeder13").unwrap();
    let cfg = EnvConfig::default();
    let env = Env::new(spec.clone(), cfg.clone()).unwrap();
    let count = env.action_count();
    assert_eq!(count, 100, "2 caps x 5 taps x 5 discharge levels");
    let mut seen = HashSet::new();
    for i in 0..count {
        let dec = decode_action(ActionIndex(i), &spec, &cfg).unwrap();
        assert!(seen.insert((dec.cap_on.clone(), dec.tap.clone(), dec.discharge_choice.clone())));
        assert_eq!(encode_action(&dec, &spec, &cfg).unwrap(), ActionIndex(i));
    }
    assert!(decode_action(ActionIndex(count), &spec, &cfg).is_err());
}

// ---------------------------------------------------------------------------
// Monotone device responses on the 13-bus feeder.

fn feeder13_case(
    cap_on: (bool, bool),
    tap: u32,
    soc: f64,
    discharge: f64,
) -> (FeederSpec, DeviceState) {
    let spec = bundled_feeder("feeder13").unwrap();
    let dev = DeviceState {
        cap_on: vec![cap_on.0, cap_on.1],
        tap: vec![tap],
        soc: vec![soc],
        discharge: vec![discharge],
    };
    (spec, dev)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Raising the regulator tap never lowers any downstream voltage.
    #[test]
    fn raising_a_tap_weakly_raises_downstream_voltages(
        cap_on in (any::<bool>(), any::<bool>()),
        tap in 0u32..32,
        soc in 0.0f64..=1.0,
        discharge in -1.0f64..=1.0,
        scale in prop::collection::vec(0.8f64..1.2, 9),
    ) {
        let (spec, mut dev) = feeder13_case(cap_on, tap, soc, discharge);
        let lo = solve_power_flow(&spec, &dev, &scale).unwrap();
        dev.tap[0] += 1;
        let hi = solve_power_flow(&spec, &dev, &scale).unwrap();
        prop_assume!(lo.converged && hi.converged);
        let reg_bus = spec.regulators[0].bus;
        for b in 0..spec.n_bus() {
            if spec.is_descendant(b, reg_bus) {
                for ph in 0..3 {
                    prop_assert!(
                        hi.voltage[(b, ph)] >= lo.voltage[(b, ph)] - 1e-9,
                        "bus {b} phase {ph}: {} -> {}",
                        lo.voltage[(b, ph)],
                        hi.voltage[(b, ph)],
                    );
                }
            }
        }
    }

    /// Switching a capacitor on never lowers the voltage on its injection
    /// phase at its own bus.
    #[test]
    fn energizing_a_capacitor_weakly_raises_its_bus_voltage(
        which in 0usize..2,
        other in any::<bool>(),
        tap in 0u32..33,
        soc in 0.0f64..=1.0,
        discharge in -1.0f64..=1.0,
        scale in prop::collection::vec(0.8f64..1.2, 9),
    ) {
        let cap_on = if which == 0 { (false, other) } else { (other, false) };
        let (spec, mut dev) = feeder13_case(cap_on, tap, soc, discharge);
        let off = solve_power_flow(&spec, &dev, &scale).unwrap();
        dev.cap_on[which] = true;
        let on = solve_power_flow(&spec, &dev, &scale).unwrap();
        prop_assume!(off.converged && on.converged);
        let bus = spec.capacitors[which].bus;
        prop_assert!(
            on.voltage[(bus, 0)] >= off.voltage[(bus, 0)] - 1e-9,
            "bus {bus}: {} -> {}",
            off.voltage[(bus, 0)],
            on.voltage[(bus, 0)],
        );
    }
}

// ---------------------------------------------------------------------------
// Environment reward contract.

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Over a full random episode: rewards are never positive, every
    /// converged step's reward equals the negated sum of its three logged
    /// components, failed steps cost exactly the failure penalty, and the
    /// episode terminates exactly at the horizon.
    #[test]
    fn episode_rewards_decompose_and_are_nonpositive(
        seed in any::<u64>(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 24),
    ) {
        let spec = bundled_feeder("feeder13").unwrap();
        let cfg = EnvConfig::default();
        let mut env = Env::new(spec, cfg.clone()).unwrap();
        let obs = Environment::reset(&mut env, seed);
        prop_assert_eq!(obs.len(), env.obs_len());
        let n = env.action_count();
        for (t, pick) in picks.iter().enumerate() {
            let out = env.step(ActionIndex(pick.index(n))).unwrap();
            prop_assert!(out.reward <= 0.0, "step {t}: reward {}", out.reward);
            if out.solver_failed {
                prop_assert_eq!(out.reward, -cfg.failure_penalty);
            } else {
                let parts =
                    out.power_loss_term + out.volt_penalty_term + out.ctrl_error_term;
                prop_assert!(out.power_loss_term >= 0.0);
                prop_assert!(out.volt_penalty_term >= 0.0);
                prop_assert!(out.ctrl_error_term >= 0.0);
                prop_assert!(
                    (out.reward + parts).abs() <= 1e-9,
                    "step {t}: reward {} vs parts {parts}",
                    out.reward,
                );
            }
            prop_assert_eq!(out.observation.len(), env.obs_len());
            prop_assert_eq!(out.done, t == cfg.horizon - 1);
        }
    }
}
