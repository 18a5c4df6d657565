//! Radial distribution feeder model and backward/forward-sweep power flow.
//!
//! The grid is a tree of buses rooted at a substation source held at 1.0 pu.
//! All three phases are solved independently over the same topology (balanced
//! approximation): loads split evenly across the phases present at their bus,
//! while capacitors and batteries attach to phase 1. A regulator at bus b
//! rescales the voltage presented to the subtree strictly below b; branch
//! currents crossing the regulator are scaled by the same ratio (ideal,
//! lossless transformer), so converged solutions satisfy exact power balance.

use ndarray::Array2;
use serde::Deserialize;
use thiserror::Error;

/// Number of discrete regulator positions (taps 0..=32).
pub const DEFAULT_TAP_COUNT: u32 = 33;

#[derive(Debug, Error)]
pub enum FeederError {
    #[error("feeder parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate bus id `{0}`")]
    DuplicateBus(String),
    #[error("{referenced_by} references unknown bus `{bus}`")]
    UnknownBus { referenced_by: String, bus: String },
    #[error("feeder is not radial: {0}")]
    NotRadial(String),
    #[error("invalid feeder value: {0}")]
    InvalidValue(String),
    #[error("{context}: expected length {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown bundled feeder `{0}` (available: feeder13, feeder34, feeder123)")]
    UnknownBundled(String),
}

// ---------------------------------------------------------------------------
// Raw document schema. Field-level strictness keeps typos loud: unknown keys
// are parse errors with serde's line/column diagnostics.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeederDoc {
    #[serde(default)]
    name: Option<String>,
    buses: Vec<BusDoc>,
    lines: Vec<LineDoc>,
    source: String,
    #[serde(default)]
    capacitors: Vec<CapacitorDoc>,
    #[serde(default)]
    regulators: Vec<RegulatorDoc>,
    #[serde(default)]
    batteries: Vec<BatteryDoc>,
    #[serde(default)]
    loads: Vec<LoadDoc>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BusDoc {
    id: String,
    phases: Vec<u8>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LineDoc {
    from: String,
    to: String,
    r_pu: f64,
    x_pu: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CapacitorDoc {
    bus: String,
    q_pu: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegulatorDoc {
    bus: String,
    #[serde(default = "default_tap_count")]
    tap_count: u32,
    #[serde(default = "default_ratio_min")]
    ratio_min: f64,
    #[serde(default = "default_ratio_max")]
    ratio_max: f64,
}

fn default_tap_count() -> u32 {
    DEFAULT_TAP_COUNT
}
fn default_ratio_min() -> f64 {
    0.9
}
fn default_ratio_max() -> f64 {
    1.1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatteryDoc {
    bus: String,
    capacity_pu_h: f64,
    max_discharge_pu: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadDoc {
    bus: String,
    p_pu: f64,
    q_pu: f64,
}

// ---------------------------------------------------------------------------
// Resolved model.

#[derive(Debug, Clone)]
pub struct Bus {
    pub id: String,
    /// Phases present at this bus, subset of {1,2,3}, sorted.
    pub phases: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r_pu: f64,
    pub x_pu: f64,
}

#[derive(Debug, Clone)]
pub struct Capacitor {
    pub bus: usize,
    pub q_pu: f64,
}

#[derive(Debug, Clone)]
pub struct Regulator {
    pub bus: usize,
    pub tap_count: u32,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Regulator {
    /// Voltage ratio presented to the subtree below the regulator bus.
    pub fn ratio(&self, tap: u32) -> f64 {
        let span = self.ratio_max - self.ratio_min;
        self.ratio_min + f64::from(tap) * span / f64::from(self.tap_count - 1)
    }
}

#[derive(Debug, Clone)]
pub struct Battery {
    pub bus: usize,
    pub capacity_pu_h: f64,
    pub max_discharge_pu: f64,
}

#[derive(Debug, Clone)]
pub struct Load {
    pub bus: usize,
    pub p_pu: f64,
    pub q_pu: f64,
}

/// Static feeder topology plus device placements, validated radial.
#[derive(Debug, Clone)]
pub struct FeederSpec {
    pub name: String,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub source: usize,
    pub capacitors: Vec<Capacitor>,
    pub regulators: Vec<Regulator>,
    pub batteries: Vec<Battery>,
    pub loads: Vec<Load>,
    /// Per bus: (parent bus, incoming line index); None only at the source.
    parent: Vec<Option<(usize, usize)>>,
    /// Breadth-first bus order from the source; parents precede children.
    order: Vec<usize>,
}

/// Controllable device settings for one power-flow solve.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub cap_on: Vec<bool>,
    /// Regulator tap position in 0..tap_count.
    pub tap: Vec<u32>,
    /// Battery state of charge in [0,1].
    pub soc: Vec<f64>,
    /// Battery discharge, normalized to max_discharge_pu, in [-1,1].
    pub discharge: Vec<f64>,
}

/// Fixed point of the backward/forward sweep.
#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    /// Voltage magnitude per bus (rows) and phase (3 columns), in pu.
    pub voltage: Array2<f64>,
    /// Total line I^2 R losses across all phases, in pu.
    pub power_loss_pu: f64,
    /// Total real generation: substation injection plus battery discharge.
    pub total_power_pu: f64,
    pub converged: bool,
    pub iterations: u32,
}

impl PowerFlowSolution {
    /// Largest voltage magnitude among the given bus's phases.
    pub fn bus_max_voltage(&self, bus: usize) -> f64 {
        (0..3).map(|p| self.voltage[(bus, p)]).fold(f64::MIN, f64::max)
    }

    /// Smallest voltage magnitude among the given bus's phases.
    pub fn bus_min_voltage(&self, bus: usize) -> f64 {
        (0..3).map(|p| self.voltage[(bus, p)]).fold(f64::MAX, f64::min)
    }
}

/// Sweep termination constants.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Convergence threshold on the max complex voltage change per sweep.
    pub tolerance_pu: f64,
    pub max_iterations: u32,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tolerance_pu: 1e-8,
            max_iterations: 100,
        }
    }
}

// ---------------------------------------------------------------------------
// Complex phasor arithmetic (only what the sweep needs).

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cpx {
    re: f64,
    im: f64,
}

impl Cpx {
    const ZERO: Cpx = Cpx { re: 0.0, im: 0.0 };

    fn new(re: f64, im: f64) -> Cpx {
        Cpx { re, im }
    }

    fn conj(self) -> Cpx {
        Cpx::new(self.re, -self.im)
    }

    fn norm_sqr(self) -> f64 {
        self.re * self.re + self.im * self.im
    }

    fn abs(self) -> f64 {
        self.norm_sqr().sqrt()
    }

    fn mul(self, o: Cpx) -> Cpx {
        Cpx::new(
            self.re * o.re - self.im * o.im,
            self.re * o.im + self.im * o.re,
        )
    }

    fn div(self, o: Cpx) -> Cpx {
        let d = o.norm_sqr();
        Cpx::new(
            (self.re * o.re + self.im * o.im) / d,
            (self.im * o.re - self.re * o.im) / d,
        )
    }

    fn scale(self, s: f64) -> Cpx {
        Cpx::new(self.re * s, self.im * s)
    }

    fn add(self, o: Cpx) -> Cpx {
        Cpx::new(self.re + o.re, self.im + o.im)
    }

    fn sub(self, o: Cpx) -> Cpx {
        Cpx::new(self.re - o.re, self.im - o.im)
    }
}

// ---------------------------------------------------------------------------

/// Parses and validates a feeder document.
pub fn load_feeder(text: &str) -> Result<FeederSpec, FeederError> {
    let doc: FeederDoc = serde_json::from_str(text)?;
    resolve(doc)
}

/// Returns one of the three bundled desk-scale feeders by name.
pub fn bundled_feeder(name: &str) -> Result<FeederSpec, FeederError> {
    let text = match name {
        "feeder13" => include_str!("../feeders/feeder13.json"),
        "feeder34" => include_str!("../feeders/feeder34.json"),
        "feeder123" => include_str!("../feeders/feeder123.json"),
        other => return Err(FeederError::UnknownBundled(other.to_string())),
    };
    load_feeder(text)
}

fn resolve(doc: FeederDoc) -> Result<FeederSpec, FeederError> {
    let n = doc.buses.len();
    if n == 0 {
        return Err(FeederError::InvalidValue("feeder has no buses".into()));
    }

    let mut index = std::collections::HashMap::with_capacity(n);
    for (i, b) in doc.buses.iter().enumerate() {
        if index.insert(b.id.clone(), i).is_some() {
            return Err(FeederError::DuplicateBus(b.id.clone()));
        }
        if b.phases.is_empty() {
            return Err(FeederError::InvalidValue(format!(
                "bus `{}` lists no phases",
                b.id
            )));
        }
        let mut seen = [false; 3];
        for &p in &b.phases {
            if !(1..=3).contains(&p) {
                return Err(FeederError::InvalidValue(format!(
                    "bus `{}` lists phase {p}, expected 1..3",
                    b.id
                )));
            }
            if seen[(p - 1) as usize] {
                return Err(FeederError::InvalidValue(format!(
                    "bus `{}` repeats phase {p}",
                    b.id
                )));
            }
            seen[(p - 1) as usize] = true;
        }
    }

    let lookup = |referenced_by: String, id: &str| -> Result<usize, FeederError> {
        index.get(id).copied().ok_or(FeederError::UnknownBus {
            referenced_by,
            bus: id.to_string(),
        })
    };

    let mut lines = Vec::with_capacity(doc.lines.len());
    for (i, l) in doc.lines.iter().enumerate() {
        if l.r_pu < 0.0 || l.x_pu < 0.0 {
            return Err(FeederError::InvalidValue(format!(
                "line {i} ({} -> {}) has negative impedance",
                l.from, l.to
            )));
        }
        lines.push(Line {
            from: lookup(format!("line {i}"), &l.from)?,
            to: lookup(format!("line {i}"), &l.to)?,
            r_pu: l.r_pu,
            x_pu: l.x_pu,
        });
    }

    let source = lookup("source".into(), &doc.source)?;

    // Radiality: a connected graph on n vertices with n-1 edges is a tree.
    if lines.len() != n - 1 {
        return Err(FeederError::NotRadial(format!(
            "{} buses need exactly {} lines, found {}",
            n,
            n - 1,
            lines.len()
        )));
    }
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
    for (li, l) in lines.iter().enumerate() {
        if l.from == l.to {
            return Err(FeederError::NotRadial(format!(
                "line {li} connects bus `{}` to itself",
                doc.buses[l.from].id
            )));
        }
        adj[l.from].push((l.to, li));
        adj[l.to].push((l.from, li));
    }
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n];
    let mut order = Vec::with_capacity(n);
    let mut visited = vec![false; n];
    visited[source] = true;
    order.push(source);
    let mut head = 0;
    while head < order.len() {
        let b = order[head];
        head += 1;
        for &(nb, li) in &adj[b] {
            if !visited[nb] {
                visited[nb] = true;
                parent[nb] = Some((b, li));
                order.push(nb);
            }
        }
    }
    if order.len() != n {
        let missing = doc
            .buses
            .iter()
            .enumerate()
            .find(|(i, _)| !visited[*i])
            .map(|(_, b)| b.id.clone())
            .unwrap_or_default();
        return Err(FeederError::NotRadial(format!(
            "bus `{missing}` is unreachable from the source"
        )));
    }

    let buses: Vec<Bus> = doc
        .buses
        .into_iter()
        .map(|b| {
            let mut phases = b.phases;
            phases.sort_unstable();
            Bus { id: b.id, phases }
        })
        .collect();

    let has_phase_1 = |bus: usize| buses[bus].phases.contains(&1);

    let mut capacitors = Vec::with_capacity(doc.capacitors.len());
    for (i, c) in doc.capacitors.iter().enumerate() {
        let bus = lookup(format!("capacitor {i}"), &c.bus)?;
        if c.q_pu < 0.0 {
            return Err(FeederError::InvalidValue(format!(
                "capacitor {i} has negative q_pu"
            )));
        }
        if !has_phase_1(bus) {
            return Err(FeederError::InvalidValue(format!(
                "capacitor {i} at bus `{}` requires phase 1 at that bus",
                c.bus
            )));
        }
        capacitors.push(Capacitor { bus, q_pu: c.q_pu });
    }

    let mut regulators = Vec::with_capacity(doc.regulators.len());
    let mut reg_seen = vec![false; n];
    for (i, r) in doc.regulators.iter().enumerate() {
        let bus = lookup(format!("regulator {i}"), &r.bus)?;
        if r.tap_count < 2 {
            return Err(FeederError::InvalidValue(format!(
                "regulator {i} needs at least 2 taps"
            )));
        }
        if r.ratio_min >= r.ratio_max {
            return Err(FeederError::InvalidValue(format!(
                "regulator {i} has ratio_min >= ratio_max"
            )));
        }
        if reg_seen[bus] {
            return Err(FeederError::InvalidValue(format!(
                "regulator {i} duplicates a regulator at bus `{}`",
                r.bus
            )));
        }
        reg_seen[bus] = true;
        regulators.push(Regulator {
            bus,
            tap_count: r.tap_count,
            ratio_min: r.ratio_min,
            ratio_max: r.ratio_max,
        });
    }

    let mut batteries = Vec::with_capacity(doc.batteries.len());
    for (i, b) in doc.batteries.iter().enumerate() {
        let bus = lookup(format!("battery {i}"), &b.bus)?;
        if b.capacity_pu_h <= 0.0 {
            return Err(FeederError::InvalidValue(format!(
                "battery {i} has non-positive capacity"
            )));
        }
        if b.max_discharge_pu < 0.0 {
            return Err(FeederError::InvalidValue(format!(
                "battery {i} has negative max_discharge_pu"
            )));
        }
        if !has_phase_1(bus) {
            return Err(FeederError::InvalidValue(format!(
                "battery {i} at bus `{}` requires phase 1 at that bus",
                b.bus
            )));
        }
        batteries.push(Battery {
            bus,
            capacity_pu_h: b.capacity_pu_h,
            max_discharge_pu: b.max_discharge_pu,
        });
    }

    let mut loads = Vec::with_capacity(doc.loads.len());
    for (i, l) in doc.loads.iter().enumerate() {
        loads.push(Load {
            bus: lookup(format!("load {i}"), &l.bus)?,
            p_pu: l.p_pu,
            q_pu: l.q_pu,
        });
    }

    Ok(FeederSpec {
        name: doc.name.unwrap_or_default(),
        buses,
        lines,
        source,
        capacitors,
        regulators,
        batteries,
        loads,
        parent,
        order,
    })
}

impl FeederSpec {
    pub fn n_bus(&self) -> usize {
        self.buses.len()
    }

    pub fn bus_index(&self, id: &str) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Caps off, taps centered, SOC at one half, no discharge.
    pub fn neutral_device_state(&self) -> DeviceState {
        DeviceState {
            cap_on: vec![false; self.capacitors.len()],
            tap: self
                .regulators
                .iter()
                .map(|r| (r.tap_count - 1) / 2)
                .collect(),
            soc: vec![0.5; self.batteries.len()],
            discharge: vec![0.0; self.batteries.len()],
        }
    }

    /// True if `bus` lies strictly below `ancestor` in the tree.
    pub fn is_descendant(&self, bus: usize, ancestor: usize) -> bool {
        let mut b = bus;
        while let Some((p, _)) = self.parent[b] {
            if p == ancestor {
                return true;
            }
            b = p;
        }
        false
    }

    fn validate_device_state(&self, dev: &DeviceState) -> Result<(), FeederError> {
        let check = |context: &'static str, expected: usize, got: usize| {
            if expected == got {
                Ok(())
            } else {
                Err(FeederError::DimensionMismatch {
                    context,
                    expected,
                    got,
                })
            }
        };
        check("cap_on", self.capacitors.len(), dev.cap_on.len())?;
        check("tap", self.regulators.len(), dev.tap.len())?;
        check("soc", self.batteries.len(), dev.soc.len())?;
        check("discharge", self.batteries.len(), dev.discharge.len())?;
        for (r, &tap) in self.regulators.iter().zip(&dev.tap) {
            if tap >= r.tap_count {
                return Err(FeederError::InvalidValue(format!(
                    "tap {tap} out of range 0..{}",
                    r.tap_count
                )));
            }
        }
        for &s in &dev.soc {
            if !(0.0..=1.0).contains(&s) {
                return Err(FeederError::InvalidValue(format!("soc {s} outside [0,1]")));
            }
        }
        for &d in &dev.discharge {
            if !(-1.0..=1.0).contains(&d) {
                return Err(FeederError::InvalidValue(format!(
                    "discharge {d} outside [-1,1]"
                )));
            }
        }
        Ok(())
    }
}

/// Solves the feeder at the given device state and per-load scale factors
/// using the default sweep constants.
pub fn solve_power_flow(
    spec: &FeederSpec,
    dev: &DeviceState,
    load_scale: &[f64],
) -> Result<PowerFlowSolution, FeederError> {
    solve_power_flow_with(spec, dev, load_scale, &SolverConfig::default())
}

/// Backward/forward sweep to a fixed point, each phase independent.
pub fn solve_power_flow_with(
    spec: &FeederSpec,
    dev: &DeviceState,
    load_scale: &[f64],
    cfg: &SolverConfig,
) -> Result<PowerFlowSolution, FeederError> {
    spec.validate_device_state(dev)?;
    if load_scale.len() != spec.loads.len() {
        return Err(FeederError::DimensionMismatch {
            context: "load_scale",
            expected: spec.loads.len(),
            got: load_scale.len(),
        });
    }

    let n = spec.n_bus();

    // Complex power consumed at each (bus, phase).
    let mut s = vec![[Cpx::ZERO; 3]; n];
    for (l, &scale) in spec.loads.iter().zip(load_scale) {
        let phases = &spec.buses[l.bus].phases;
        let share = 1.0 / phases.len() as f64;
        let part = Cpx::new(l.p_pu * scale * share, l.q_pu * scale * share);
        for &p in phases {
            let ph = (p - 1) as usize;
            s[l.bus][ph] = s[l.bus][ph].add(part);
        }
    }
    for (c, &on) in spec.capacitors.iter().zip(&dev.cap_on) {
        if on {
            // Reactive injection on phase 1.
            s[c.bus][0] = s[c.bus][0].sub(Cpx::new(0.0, c.q_pu));
        }
    }
    let mut battery_injection = 0.0;
    for (b, &d) in spec.batteries.iter().zip(&dev.discharge) {
        let p = d * b.max_discharge_pu;
        battery_injection += p;
        s[b.bus][0] = s[b.bus][0].sub(Cpx::new(p, 0.0));
    }

    // Voltage ratio presented by each bus to its children.
    let mut ratio = vec![1.0_f64; n];
    for (r, &tap) in spec.regulators.iter().zip(&dev.tap) {
        ratio[r.bus] = r.ratio(tap);
    }

    let mut voltage = Array2::<f64>::zeros((n, 3));
    let mut total_loss = 0.0;
    let mut total_source = 0.0;
    let mut converged = true;
    let mut iterations = 0;

    for phase in 0..3 {
        let mut v = vec![Cpx::new(1.0, 0.0); n];
        let mut i_branch = vec![Cpx::ZERO; spec.lines.len()];
        let mut acc = vec![Cpx::ZERO; n];
        let mut phase_converged = false;
        let mut phase_iters = 0;

        while phase_iters < cfg.max_iterations {
            phase_iters += 1;

            // Backward sweep: node currents accumulated toward the source.
            // A child's subtree current enters its parent scaled by the
            // parent's regulator ratio (ideal transformer primary current).
            for b in 0..n {
                acc[b] = s[b][phase].div(v[b]).conj();
            }
            for &b in spec.order.iter().rev() {
                if let Some((p, li)) = spec.parent[b] {
                    i_branch[li] = acc[b];
                    let contrib = acc[b].scale(ratio[p]);
                    acc[p] = acc[p].add(contrib);
                }
            }

            // Forward sweep: voltage drops from the source outward.
            let mut max_dv = 0.0_f64;
            for &b in &spec.order {
                if let Some((p, li)) = spec.parent[b] {
                    let line = &spec.lines[li];
                    let z = Cpx::new(line.r_pu, line.x_pu);
                    let upstream = v[p].scale(ratio[p]);
                    let new_v = upstream.sub(z.mul(i_branch[li]));
                    max_dv = max_dv.max(new_v.sub(v[b]).abs());
                    v[b] = new_v;
                }
            }

            if max_dv <= cfg.tolerance_pu {
                phase_converged = true;
                break;
            }
        }

        converged &= phase_converged;
        iterations = iterations.max(phase_iters);

        for b in 0..n {
            voltage[(b, phase)] = v[b].abs();
        }
        for (li, line) in spec.lines.iter().enumerate() {
            total_loss += line.r_pu * i_branch[li].norm_sqr();
        }
        // Substation complex injection on this phase.
        total_source += v[spec.source].mul(acc[spec.source].conj()).re;
    }

    Ok(PowerFlowSolution {
        voltage,
        power_loss_pu: total_loss,
        total_power_pu: total_source + battery_injection,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_bus_doc() -> &'static str {
        r#"{
            "name": "two-bus",
            "buses": [
                { "id": "src", "phases": [1, 2, 3] },
                { "id": "load", "phases": [1] }
            ],
            "lines": [ { "from": "src", "to": "load", "r_pu": 0.01, "x_pu": 0.02 } ],
            "source": "src",
            "capacitors": [ { "bus": "load", "q_pu": 0.05 } ],
            "loads": [ { "bus": "load", "p_pu": 0.1, "q_pu": 0.05 } ]
        }"#
    }

    #[test]
    fn two_bus_document_loads() {
        let spec = load_feeder(two_bus_doc()).unwrap();
        assert_eq!(spec.n_bus(), 2);
        assert_eq!(spec.lines.len(), 1);
        assert_eq!(spec.source, 0);
        assert_eq!(spec.capacitors.len(), 1);
    }

    #[test]
    fn cycle_is_rejected() {
        let text = r#"{
            "buses": [
                { "id": "a", "phases": [1] },
                { "id": "b", "phases": [1] },
                { "id": "c", "phases": [1] }
            ],
            "lines": [
                { "from": "a", "to": "b", "r_pu": 0.01, "x_pu": 0.01 },
                { "from": "b", "to": "c", "r_pu": 0.01, "x_pu": 0.01 },
                { "from": "c", "to": "a", "r_pu": 0.01, "x_pu": 0.01 }
            ],
            "source": "a"
        }"#;
        match load_feeder(text) {
            Err(FeederError::NotRadial(_)) => {}
            other => panic!("expected NotRadial, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_bus_is_rejected() {
        let text = r#"{
            "buses": [ { "id": "a", "phases": [1] }, { "id": "a", "phases": [1] } ],
            "lines": [ { "from": "a", "to": "a", "r_pu": 0.0, "x_pu": 0.0 } ],
            "source": "a"
        }"#;
        match load_feeder(text) {
            Err(FeederError::DuplicateBus(id)) => assert_eq!(id, "a"),
            other => panic!("expected DuplicateBus, got {other:?}"),
        }
    }

    #[test]
    fn unknown_bus_reference_is_rejected() {
        let text = r#"{
            "buses": [ { "id": "a", "phases": [1] }, { "id": "b", "phases": [1] } ],
            "lines": [ { "from": "a", "to": "b", "r_pu": 0.01, "x_pu": 0.01 } ],
            "source": "a",
            "loads": [ { "bus": "nope", "p_pu": 0.1, "q_pu": 0.0 } ]
        }"#;
        match load_feeder(text) {
            Err(FeederError::UnknownBus { bus, .. }) => assert_eq!(bus, "nope"),
            other => panic!("expected UnknownBus, got {other:?}"),
        }
    }

    #[test]
    fn parse_error_carries_location() {
        let err = load_feeder("{ not json").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line"), "diagnostics missing location: {msg}");
    }

    #[test]
    fn zero_load_solution_is_flat() {
        let spec = load_feeder(two_bus_doc()).unwrap();
        let dev = spec.neutral_device_state();
        let sol = solve_power_flow(&spec, &dev, &[0.0]).unwrap();
        assert!(sol.converged);
        for b in 0..2 {
            for p in 0..3 {
                assert!((sol.voltage[(b, p)] - 1.0).abs() < 1e-12);
            }
        }
        assert!(sol.power_loss_pu.abs() < 1e-12);
        assert!(sol.total_power_pu.abs() < 1e-12);
    }

    // Closed-form oracle for the single-line, single-phase case: the load-bus
    // voltage magnitude u = |V| satisfies
    //   u^4 - u^2 (|Vs|^2 - 2(rP + xQ)) + |Z|^2 |S|^2 = 0,
    // taking the root near 1.0.
    fn two_bus_exact(r: f64, x: f64, p: f64, q: f64) -> f64 {
        let b = 1.0 - 2.0 * (r * p + x * q);
        let c = (r * r + x * x) * (p * p + q * q);
        let u2 = (b + (b * b - 4.0 * c).sqrt()) / 2.0;
        u2.sqrt()
    }

    #[test]
    fn two_bus_voltage_matches_closed_form() {
        let spec = load_feeder(two_bus_doc()).unwrap();
        let dev = spec.neutral_device_state();
        let sol = solve_power_flow(&spec, &dev, &[1.0]).unwrap();
        assert!(sol.converged);
        let oracle = two_bus_exact(0.01, 0.02, 0.1, 0.05);
        assert!((oracle - 0.99795).abs() < 1e-4, "oracle sanity: {oracle}");
        let got = sol.voltage[(1, 0)];
        assert!(
            (got - oracle).abs() < 1e-9,
            "solver {got} vs closed form {oracle}"
        );
        // Unloaded phases stay at the source magnitude.
        assert!((sol.voltage[(1, 1)] - 1.0).abs() < 1e-12);
        // Loss equals r |S/V|^2 at the fixed point.
        let i2 = (0.1f64.powi(2) + 0.05f64.powi(2)) / got.powi(2);
        assert!((sol.power_loss_pu - 0.01 * i2).abs() < 1e-9);
        // Power balance.
        assert!((sol.total_power_pu - 0.1 - sol.power_loss_pu).abs() < 1e-6);
    }

    #[test]
    fn capacitor_raises_its_bus_voltage() {
        let spec = load_feeder(two_bus_doc()).unwrap();
        let mut dev = spec.neutral_device_state();
        let off = solve_power_flow(&spec, &dev, &[1.0]).unwrap();
        dev.cap_on[0] = true;
        let on = solve_power_flow(&spec, &dev, &[1.0]).unwrap();
        assert!(on.voltage[(1, 0)] > off.voltage[(1, 0)]);
    }

    #[test]
    fn bundled_feeder13_counts() {
        let spec = bundled_feeder("feeder13").unwrap();
        assert_eq!(spec.n_bus(), 13);
        assert_eq!(spec.capacitors.len(), 2);
        assert_eq!(spec.regulators.len(), 1);
        assert_eq!(spec.batteries.len(), 1);
    }

    #[test]
    fn bundled_feeders_solve_at_peak_load() {
        for name in ["feeder13", "feeder34", "feeder123"] {
            let spec = bundled_feeder(name).unwrap();
            let dev = spec.neutral_device_state();
            let scale = vec![1.05; spec.loads.len()];
            let sol = solve_power_flow(&spec, &dev, &scale).unwrap();
            assert!(sol.converged, "{name} did not converge");
            let total_load: f64 = spec.loads.iter().map(|l| l.p_pu * 1.05).sum();
            assert!(
                (sol.total_power_pu - total_load - sol.power_loss_pu).abs() <= 1e-6,
                "{name} power balance violated"
            );
            for b in 0..spec.n_bus() {
                for p in 0..3 {
                    let v = sol.voltage[(b, p)];
                    assert!(v > 0.85 && v < 1.15, "{name} bus {b} phase {p}: {v}");
                }
            }
        }
    }

    #[test]
    fn regulator_tap_lifts_downstream_voltage() {
        let spec = bundled_feeder("feeder13").unwrap();
        let mut dev = spec.neutral_device_state();
        let scale = vec![1.0; spec.loads.len()];
        let base = solve_power_flow(&spec, &dev, &scale).unwrap();
        dev.tap[0] += 1;
        let up = solve_power_flow(&spec, &dev, &scale).unwrap();
        let reg_bus = spec.regulators[0].bus;
        for b in 0..spec.n_bus() {
            if spec.is_descendant(b, reg_bus) {
                for p in 0..3 {
                    assert!(up.voltage[(b, p)] >= base.voltage[(b, p)] - 1e-12);
                }
            }
        }
    }

    #[test]
    fn device_dimension_mismatch_is_reported() {
        let spec = load_feeder(two_bus_doc()).unwrap();
        let mut dev = spec.neutral_device_state();
        dev.cap_on.push(true);
        match solve_power_flow(&spec, &dev, &[1.0]) {
            Err(FeederError::DimensionMismatch { context, .. }) => {
                assert_eq!(context, "cap_on")
            }
            other => panic!("expected DimensionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn solutions_are_bit_identical() {
        let spec = bundled_feeder("feeder13").unwrap();
        let dev = spec.neutral_device_state();
        let scale = vec![0.9; spec.loads.len()];
        let a = solve_power_flow(&spec, &dev, &scale).unwrap();
        let b = solve_power_flow(&spec, &dev, &scale).unwrap();
        assert_eq!(a.voltage, b.voltage);
        assert_eq!(a.power_loss_pu.to_bits(), b.power_loss_pu.to_bits());
        assert_eq!(a.total_power_pu.to_bits(), b.total_power_pu.to_bits());
    }
}
