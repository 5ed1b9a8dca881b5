//! Seeded property suites over the simulator, the oracles, the rewriting
//! rules and the departure application.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::apps::{RandomApp, RandomAppConfig};
use crate::build::{adversarial_init, Corruption};
use crate::fdp::departure_sim;
use crate::ids::Rid;
use crate::ifr::{
    apply_random_rule, cpg, plan_transform, random_connected_world, random_simple_world, Executor, ProcessMultigraph,
    ProcessRule, TargetGraph,
};
use crate::message::Message;
use crate::oracle::{fdp_legitimate, is_legal, process_components, stayers_connected, valid_graph_has_cycle};
use crate::sim::{AppEvent, SchedulerPolicy, Simulation};
use crate::world::{fnv1a, WorldState};

pub const SUITES: [&str; 10] = [
    "delivery",
    "closure",
    "convergence",
    "shutdown",
    "connectivity",
    "universality",
    "emulation",
    "fdp",
    "cycle-free",
    "determinism",
];

/// Every this many steps a simulated state is checked for valid cycles.
const CYCLE_SAMPLE: u64 = 16;
const BUDGET: u64 = 100_000;

#[derive(Clone, Copy, Debug)]
pub struct SuiteConfig {
    /// Overrides the number of runs (or rule applications).
    pub runs: Option<usize>,
    pub base_seed: u64,
    pub tracing: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            runs: None,
            base_seed: 0,
            tracing: false,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub runs: usize,
    pub violations: usize,
    pub cycle_samples: u64,
    pub cycle_violations: u64,
    pub max_steps: u64,
    pub notes: Vec<String>,
    #[serde(skip)]
    pub trace: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        SuiteReport {
            name: name.to_string(),
            ..Default::default()
        }
    }

    pub fn passed(&self) -> bool {
        self.violations == 0 && self.cycle_violations == 0
    }

    fn sample(&mut self, w: &WorldState) {
        self.cycle_samples += 1;
        if valid_graph_has_cycle(w) {
            self.cycle_violations += 1;
        }
    }

    fn fail(&mut self, note: String) {
        self.violations += 1;
        if self.notes.len() < 8 {
            self.notes.push(note);
        }
    }

    fn absorb(&mut self, sim: &mut Simulation, header: String) {
        if sim.tracing {
            self.trace.push(header);
            self.trace.append(&mut sim.trace);
            self.trace.push(format!("digest {:016x}", sim.world.digest()));
        }
    }

    /// Digest of the collected trace text.
    pub fn trace_digest(&self) -> u64 {
        fnv1a(self.trace.join("\n").as_bytes())
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "suite={} result={} runs={} violations={} cycle_samples={} cycle_violations={} max_steps={}",
            self.name,
            if self.passed() { "pass" } else { "fail" },
            self.runs,
            self.violations,
            self.cycle_samples,
            self.cycle_violations,
            self.max_steps
        )
    }
}

fn seed_of(cfg: &SuiteConfig, i: usize) -> u64 {
    cfg.base_seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

fn install_random_apps(sim: &mut Simulation, cfg: RandomAppConfig) {
    let rids: Vec<Rid> = sim.world.processes.keys().copied().collect();
    for r in rids {
        sim.set_app(r, Box::new(RandomApp::new(r, cfg)));
    }
}

fn legal_start(rng: &mut ChaCha8Rng, seed: u64) -> WorldState {
    let n = rng.gen_range(3..=8);
    let relays = rng.gen_range(n as usize..=24);
    adversarial_init(seed, n, relays, 0, Corruption::None)
}

fn sim_with(world: WorldState, seed: u64, tracing: bool) -> Simulation {
    let mut sim = Simulation::new(world, seed, SchedulerPolicy::default());
    sim.tracing = tracing;
    sim
}

fn app_traffic_in_flight(w: &WorldState) -> bool {
    w.relays().any(|r| {
        r.buf.iter().any(|e| match &e.msg {
            Message::Transmit(t) => !t.is_probe(),
            Message::Local(_) | Message::NotAuthorized(_) => true,
            _ => false,
        })
    })
}

pub fn delivery(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("delivery");
    rep.runs = cfg.runs.unwrap_or(100);
    let mut judged = 0usize;
    for i in 0..rep.runs {
        let seed = seed_of(cfg, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sim = sim_with(legal_start(&mut rng, seed), seed, cfg.tracing);
        sim.hints_enabled = true;
        install_random_apps(&mut sim, RandomAppConfig::default());
        for _ in 0..2_000 {
            sim.step();
            if sim.world.step_count % CYCLE_SAMPLE == 0 {
                rep.sample(&sim.world);
            }
        }
        // Quiesce the applications and let every payload land.
        sim.ticks_enabled = false;
        let out = sim.run_until(BUDGET, |w| !app_traffic_in_flight(w));
        rep.max_steps = rep.max_steps.max(2_000 + out.steps());
        let mut delivered: BTreeMap<u64, Vec<Rid>> = BTreeMap::new();
        for e in &sim.events {
            if let AppEvent::Delivered { uid, at } = e {
                delivered.entry(*uid).or_default().push(*at);
            }
        }
        for e in &sim.events {
            if let AppEvent::Sent {
                uid,
                via,
                expected: Some(to),
            } = e
            {
                judged += 1;
                if delivered.get(uid).map(Vec::as_slice) != Some(&[*to][..]) {
                    rep.fail(format!("seed {seed}: message {uid:#x} via {via} expected at {to}, got {:?}", delivered.get(uid)));
                }
            }
        }
        rep.absorb(&mut sim, format!("run {i} seed {seed}"));
    }
    rep.notes.insert(0, format!("messages_via_valid_relays={judged}"));
    rep
}

pub fn closure(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("closure");
    rep.runs = cfg.runs.unwrap_or(100);
    rep.max_steps = 10_000;
    for i in 0..rep.runs {
        let seed = seed_of(cfg, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sim = sim_with(legal_start(&mut rng, seed), seed, cfg.tracing);
        install_random_apps(&mut sim, RandomAppConfig::default());
        for step in 0..10_000u64 {
            sim.step();
            if !is_legal(&sim.world) {
                rep.fail(format!("seed {seed}: illegal after step {step}"));
                break;
            }
            if step % CYCLE_SAMPLE == 0 {
                rep.sample(&sim.world);
            }
        }
        rep.absorb(&mut sim, format!("run {i} seed {seed}"));
    }
    rep
}

pub fn convergence(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("convergence");
    rep.runs = cfg.runs.unwrap_or(200);
    for i in 0..rep.runs {
        let seed = seed_of(cfg, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..=8);
        let relays = rng.gen_range(n as usize..=24);
        let msgs = rng.gen_range(0..=40);
        let w = adversarial_init(seed, n, relays, msgs, Corruption::Full);
        let mut sim = sim_with(w, seed, cfg.tracing);
        install_random_apps(
            &mut sim,
            RandomAppConfig {
                indirect_refs: false,
                ..Default::default()
            },
        );
        rep.sample(&sim.world);
        let out = sim.run_until(BUDGET, is_legal);
        rep.max_steps = rep.max_steps.max(out.steps());
        if !out.reached() {
            rep.fail(format!("seed {seed}: not legal within {BUDGET} steps"));
            rep.absorb(&mut sim, format!("run {i} seed {seed}"));
            continue;
        }
        let window = 10 * sim.policy.fairness_bound;
        for k in 0..window {
            sim.step();
            if !is_legal(&sim.world) {
                rep.fail(format!("seed {seed}: illegal {k} steps after convergence"));
                break;
            }
            if k % CYCLE_SAMPLE == 0 {
                rep.sample(&sim.world);
            }
        }
        rep.absorb(&mut sim, format!("run {i} seed {seed} converged_at {}", out.steps()));
    }
    rep
}

pub fn shutdown(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("shutdown");
    rep.runs = cfg.runs.unwrap_or(100);
    for i in 0..rep.runs {
        let seed = seed_of(cfg, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sim = sim_with(legal_start(&mut rng, seed), seed, cfg.tracing);
        install_random_apps(
            &mut sim,
            RandomAppConfig {
                indirect_refs: false,
                ..Default::default()
            },
        );
        let mut order: Vec<Rid> = sim.world.processes.keys().copied().collect();
        order.shuffle(&mut rng);
        for p in order {
            let gap = rng.gen_range(0..300);
            sim.run_for(gap, |_| {});
            rep.sample(&sim.world);
            sim.act(p, |c| c.stop());
        }
        let out = sim.run_until(BUDGET, |w| w.layers.is_empty());
        rep.max_steps = rep.max_steps.max(out.steps());
        let survivors: Vec<Rid> = sim
            .world
            .layers
            .keys()
            .copied()
            .filter(|r| !sim.world.is_active(*r))
            .collect();
        if !survivors.is_empty() {
            rep.fail(format!("seed {seed}: layers {survivors:?} survived"));
        }
        rep.absorb(&mut sim, format!("run {i} seed {seed}"));
    }
    rep
}

pub fn connectivity(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("connectivity");
    let total = cfg.runs.unwrap_or(1000);
    let per_world = 10;
    let mut applied = 0;
    let mut world_ix = 0;
    while applied < total && world_ix < 10 * total.max(1) {
        let seed = seed_of(cfg, world_ix);
        world_ix += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..=8);
        let (pairs, indirect) = (rng.gen_range(0..10), rng.gen_range(0..5));
        let w = random_connected_world(&mut rng, n, pairs, indirect);
        let mut ex = Executor::new(w, seed);
        ex.sim.tracing = cfg.tracing;
        if let Err(e) = ex.settle() {
            rep.fail(format!("seed {seed}: {e}"));
            continue;
        }
        for _ in 0..per_world.min(total - applied) {
            let before = process_components(ex.world()).len();
            let step = apply_random_rule(&mut ex, &mut rng);
            let after = process_components(ex.world()).len();
            match step {
                Ok(Some(_)) => {
                    applied += 1;
                    if before != 1 || after != 1 {
                        rep.fail(format!("seed {seed}: components {before} -> {after}"));
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    applied += 1;
                    rep.fail(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        if let Err(e) = ex.connectivity_ok() {
            rep.fail(format!("seed {seed}: {e}"));
        }
        rep.sample(ex.world());
        rep.max_steps = rep.max_steps.max(ex.world().step_count);
        rep.absorb(&mut ex.sim, format!("world {world_ix} seed {seed}"));
    }
    rep.runs = applied;
    rep
}

pub fn universality(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("universality");
    rep.runs = cfg.runs.unwrap_or(50);
    let mut steps = 0;
    for i in 0..rep.runs {
        let seed = seed_of(cfg, i);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(3..=6);
        let (p1, ind) = (rng.gen_range(0..8), rng.gen_range(0..4));
        let src = random_connected_world(&mut rng, n, p1, ind);
        let p2 = rng.gen_range(0..8);
        let target = TargetGraph::from_world(&random_simple_world(&mut rng, n, p2));
        match plan_transform(src, &target, seed) {
            Ok(t) => {
                steps += t.plan.steps.len();
                rep.max_steps = rep.max_steps.max(t.world.step_count);
                match cpg(&t.world) {
                    Ok(g) if g == target.process_graph() => {}
                    other => rep.fail(format!("seed {seed}: final graph {other:?}")),
                }
                rep.sample(&t.world);
                if cfg.tracing {
                    rep.trace.push(format!("run {i} seed {seed}"));
                    rep.trace
                        .push(serde_json::to_string(&t.plan).expect("plan serializes"));
                    rep.trace.push(format!("digest {:016x}", t.world.digest()));
                }
            }
            Err(e) => rep.fail(format!("seed {seed}: {e}")),
        }
    }
    rep.notes.push(format!("relay_rule_steps={steps}"));
    rep
}

/// Picks a random instance of `kind` (0..4) applicable to `g`.
fn applicable(g: &ProcessMultigraph, kind: usize, rng: &mut ChaCha8Rng) -> Option<ProcessRule> {
    let mut out = Vec::new();
    let starts: BTreeSet<Rid> = g.edges.keys().map(|(a, _)| *a).collect();
    for &u in &starts {
        let outs: Vec<Rid> = g.edges.keys().filter(|(a, _)| *a == u).map(|(_, b)| *b).collect();
        for &v in &outs {
            match kind {
                0 | 1 => {
                    for &w in &outs {
                        if v != w {
                            out.push(if kind == 0 {
                                ProcessRule::Introduction { u, v, w }
                            } else {
                                ProcessRule::Delegation { u, v, w }
                            });
                        }
                    }
                }
                2 if g.count(u, v) >= 2 => out.push(ProcessRule::Fusion { u, v }),
                3 => out.push(ProcessRule::Reversal { u, v }),
                _ => {}
            }
        }
    }
    out.choose(rng).copied()
}

pub fn emulation(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("emulation");
    let per_rule = cfg.runs.unwrap_or(25);
    for kind in 0..4 {
        let mut done = 0;
        let mut attempt = 0;
        while done < per_rule {
            let seed = seed_of(cfg, kind * 1_000_000 + attempt);
            attempt += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(3..=6);
            let edges = rng.gen_range(n as usize..=10);
            let w = random_simple_world(&mut rng, n, edges);
            let before = cpg(&w).expect("generated graph is simple");
            let Some(rule) = applicable(&before, kind, &mut rng) else {
                continue;
            };
            done += 1;
            let mut expect = before.clone();
            rule.apply(&mut expect).expect("instance is applicable");
            let mut ex = Executor::new(w, seed);
            ex.sim.tracing = cfg.tracing;
            let res = ex.settle().and_then(|_| ex.emulate(rule)).and_then(|_| ex.connectivity_ok());
            match res.and_then(|_| cpg(ex.world())) {
                Ok(after) if before.delta(&after) == before.delta(&expect) => {}
                Ok(after) => rep.fail(format!(
                    "seed {seed} {rule:?}: delta {:?} expected {:?}",
                    before.delta(&after),
                    before.delta(&expect)
                )),
                Err(e) => rep.fail(format!("seed {seed} {rule:?}: {e}")),
            }
            rep.sample(ex.world());
            rep.max_steps = rep.max_steps.max(ex.world().step_count);
            rep.absorb(&mut ex.sim, format!("rule {rule:?} seed {seed}"));
        }
    }
    rep.runs = 4 * per_rule;
    rep
}

/// Random connected world over 3..=8 processes with one to three leavers.
pub fn departure_world(seed: u64) -> WorldState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(3..=8);
    let (pairs, indirect) = (rng.gen_range(0..10), rng.gen_range(0..4));
    let mut w = random_connected_world(&mut rng, n, pairs, indirect);
    let mut ids: Vec<u32> = (0..n).collect();
    ids.shuffle(&mut rng);
    let k = rng.gen_range(1..=3.min(n as usize - 1));
    for l in &ids[..k] {
        if let Some(p) = w.processes.get_mut(&Rid(*l)) {
            p.leaving = true;
        }
    }
    w
}

pub fn fdp(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("fdp");
    rep.runs = cfg.runs.unwrap_or(100);
    for i in 0..rep.runs {
        let seed = seed_of(cfg, i);
        let w = departure_world(seed);
        let initial = process_components(&w);
        let mut sim = departure_sim(w, seed, SchedulerPolicy::default());
        sim.tracing = cfg.tracing;
        let mut steps = 0;
        let mut split = 0;
        while !fdp_legitimate(&sim.world, &initial) && steps < BUDGET && sim.step() {
            steps += 1;
            if !stayers_connected(&sim.world, &initial) {
                split += 1;
            }
            if steps % CYCLE_SAMPLE == 0 {
                rep.sample(&sim.world);
            }
        }
        rep.max_steps = rep.max_steps.max(steps);
        if split > 0 {
            rep.fail(format!("seed {seed}: stayers split at {split} steps"));
        }
        if !fdp_legitimate(&sim.world, &initial) {
            rep.fail(format!("seed {seed}: not legitimate within {BUDGET} steps"));
        }
        rep.absorb(&mut sim, format!("run {i} seed {seed}"));
    }
    rep
}

type SuiteFn = fn(&SuiteConfig) -> SuiteReport;

const SIMPLE: [(&str, SuiteFn); 8] = [
    ("delivery", delivery),
    ("closure", closure),
    ("convergence", convergence),
    ("shutdown", shutdown),
    ("connectivity", connectivity),
    ("universality", universality),
    ("emulation", emulation),
    ("fdp", fdp),
];

/// Aggregates the cycle samples of already-computed suites.
pub fn cycle_free(reports: &[SuiteReport]) -> SuiteReport {
    let mut rep = SuiteReport::new("cycle-free");
    for r in reports {
        rep.runs += r.runs;
        rep.cycle_samples += r.cycle_samples;
        rep.cycle_violations += r.cycle_violations;
        if r.cycle_violations > 0 {
            rep.notes.push(format!("{}: {}", r.name, r.cycle_violations));
        }
    }
    rep
}

/// Runs every other suite twice at reduced size with tracing and compares
/// the traces byte for byte.
pub fn determinism(cfg: &SuiteConfig) -> SuiteReport {
    let mut rep = SuiteReport::new("determinism");
    let small = SuiteConfig {
        runs: Some(cfg.runs.unwrap_or(3)),
        base_seed: cfg.base_seed,
        tracing: true,
    };
    for (name, f) in SIMPLE {
        let a = f(&small);
        let b = f(&small);
        rep.runs += 1;
        let bytes = a.trace.iter().map(|l| l.len() + 1).sum::<usize>();
        if a.trace.is_empty() || a.trace != b.trace || a.to_string() != b.to_string() {
            rep.fail(format!("{name}: traces differ"));
        }
        rep.notes.push(format!("{name}: {} lines {bytes} bytes digest {:016x}", a.trace.len(), a.trace_digest()));
    }
    rep
}

/// Runs one suite by name. `cycle-free` runs everything it aggregates.
pub fn run_suite(name: &str, cfg: &SuiteConfig) -> Option<SuiteReport> {
    if let Some((_, f)) = SIMPLE.iter().find(|(n, _)| *n == name) {
        return Some(f(cfg));
    }
    match name {
        "cycle-free" => {
            let all: Vec<SuiteReport> = SIMPLE.iter().map(|(_, f)| f(cfg)).collect();
            Some(cycle_free(&all))
        }
        "determinism" => Some(determinism(cfg)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SuiteConfig {
        SuiteConfig {
            runs: Some(2),
            base_seed: 7,
            tracing: false,
        }
    }

    #[test]
    fn every_name_resolves() {
        for name in SUITES.iter().filter(|n| **n != "cycle-free" && **n != "determinism") {
            let r = run_suite(name, &tiny()).unwrap();
            assert!(r.passed(), "{r} {:?}", r.notes);
        }
        assert!(run_suite("nope", &tiny()).is_none());
    }

    #[test]
    fn report_line_is_key_value() {
        let r = cycle_free(&[]);
        assert_eq!(
            r.to_string(),
            "suite=cycle-free result=pass runs=0 violations=0 cycle_samples=0 cycle_violations=0 max_steps=0"
        );
    }

    #[test]
    fn departure_worlds_have_leavers_and_stayers() {
        for s in 0..20 {
            let w = departure_world(s);
            let leaving = w.processes.values().filter(|p| p.leaving).count();
            assert!((1..=3).contains(&leaving));
            assert!(leaving < w.processes.len());
        }
    }
}
