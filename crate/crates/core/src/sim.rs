//! Deterministic discrete-event kernel: atomic actions, a weakly fair seeded
//! scheduler, and reliable non-FIFO delivery out of relay and layer buffers.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ids::{RelayId, RelayRef, Rid};
use crate::layer::RelayLayer;
use crate::message::{Action, Message};
use crate::world::{fnv1a, ProcessInfo, WorldState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedMode {
    RoundRobin,
    SeededRandomFair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedulerPolicy {
    pub mode: SchedMode,
    /// Enabled actions older than this many steps are forced, oldest first.
    pub fairness_bound: u64,
}

impl Default for SchedulerPolicy {
    fn default() -> Self {
        SchedulerPolicy {
            mode: SchedMode::SeededRandomFair,
            fairness_bound: 64,
        }
    }
}

/// Something an application wants the harness to know about.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AppEvent {
    /// A tagged payload handed to `send`. `expected` is the sink of the
    /// carrying relay when the harness judged that relay valid.
    Sent { uid: u64, via: RelayId, expected: Option<Rid> },
    Delivered { uid: u64, at: Rid },
}

/// Process-side view: the primitives of its own relay layer plus local state.
pub struct ProcessCtx<'a> {
    layer: &'a mut RelayLayer,
    info: &'a mut ProcessInfo,
    rng: &'a mut ChaCha8Rng,
    hints: Option<&'a BTreeMap<RelayId, Rid>>,
    events: &'a mut Vec<AppEvent>,
    stop: bool,
}

impl ProcessCtx<'_> {
    pub fn rid(&self) -> Rid {
        self.layer.rid
    }
    pub fn leaving(&self) -> bool {
        self.info.leaving
    }
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
    pub fn new_relay(&mut self) -> Option<RelayRef> {
        self.layer.new_relay()
    }
    pub fn delete(&mut self, r: RelayRef) {
        self.layer.delete(r)
    }
    pub fn merge(&mut self, refs: &[RelayRef]) -> Option<RelayRef> {
        self.layer.merge(refs)
    }
    pub fn get_relays(&self) -> Vec<RelayRef> {
        self.layer.get_relays()
    }
    pub fn incoming(&self, r: RelayRef) -> usize {
        self.layer.incoming(r)
    }
    pub fn direct(&self, r: RelayRef) -> bool {
        self.layer.direct(r)
    }
    pub fn is_sink(&self, r: RelayRef) -> bool {
        self.layer.is_sink(r)
    }
    pub fn dead(&self, r: RelayRef) -> bool {
        self.layer.dead(r)
    }
    pub fn same_target(&self, a: RelayRef, b: RelayRef) -> bool {
        self.layer.same_target(a, b)
    }
    pub fn send(&mut self, r: RelayRef, action: Action) {
        self.layer.send(r, action)
    }
    /// Requests `stop`; takes effect atomically at the end of this action.
    pub fn stop(&mut self) {
        self.stop = true;
    }
    /// Harness-supplied oracle verdict for a relay, if the harness enabled
    /// hints: `Some(sinkRID)` when the relay is currently valid.
    pub fn hint_valid(&self, r: RelayRef) -> Option<Option<Rid>> {
        self.hints.map(|h| h.get(&r.peek_id()).copied())
    }
    pub fn record(&mut self, ev: AppEvent) {
        self.events.push(ev);
    }
}

pub trait Application {
    fn on_tick(&mut self, ctx: &mut ProcessCtx<'_>);
    fn on_deliver(&mut self, ctx: &mut ProcessCtx<'_>, action: Action);
    /// Opaque digest of application state, folded into traces.
    fn digest(&self) -> u64 {
        0
    }
}

/// Application that never does anything.
pub struct Idle;

impl Application for Idle {
    fn on_tick(&mut self, _: &mut ProcessCtx<'_>) {}
    fn on_deliver(&mut self, _: &mut ProcessCtx<'_>, _: Action) {}
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ActionSel {
    Timeout(Rid),
    AppTick(Rid),
    DeliverRelay(RelayId, usize),
    DeliverLayer(Rid, usize),
}

impl ActionSel {
    pub fn kind(&self) -> &'static str {
        match self {
            ActionSel::Timeout(_) => "timeout",
            ActionSel::AppTick(_) => "app",
            ActionSel::DeliverRelay(..) => "deliver",
            ActionSel::DeliverLayer(..) => "control",
        }
    }

    pub fn rid(&self) -> Rid {
        match self {
            ActionSel::Timeout(r) | ActionSel::AppTick(r) | ActionSel::DeliverLayer(r, _) => *r,
            ActionSel::DeliverRelay(id, _) => id.rid,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunOutcome {
    Reached(u64),
    BudgetExhausted(u64),
}

impl RunOutcome {
    pub fn reached(&self) -> bool {
        matches!(self, RunOutcome::Reached(_))
    }
    pub fn steps(&self) -> u64 {
        match self {
            RunOutcome::Reached(s) | RunOutcome::BudgetExhausted(s) => *s,
        }
    }
}

pub struct Simulation {
    pub world: WorldState,
    pub apps: BTreeMap<Rid, Box<dyn Application>>,
    pub policy: SchedulerPolicy,
    pub rng: ChaCha8Rng,
    pub events: Vec<AppEvent>,
    /// Recompute oracle hints before every application action.
    pub hints_enabled: bool,
    /// When false, applications only react to deliveries.
    pub ticks_enabled: bool,
    pub tracing: bool,
    pub trace: Vec<String>,
    /// Enabled-since stamps for timeouts and ticks.
    last_timeout: BTreeMap<Rid, u64>,
    last_tick: BTreeMap<Rid, u64>,
    rr_cursor: usize,
}

impl Simulation {
    pub fn new(world: WorldState, seed: u64, policy: SchedulerPolicy) -> Self {
        let step = world.step_count;
        let last_timeout = world.layers.keys().map(|r| (*r, step)).collect();
        let last_tick = world.processes.keys().map(|r| (*r, step)).collect();
        Simulation {
            world,
            apps: BTreeMap::new(),
            policy,
            rng: ChaCha8Rng::seed_from_u64(seed),
            events: Vec::new(),
            hints_enabled: false,
            ticks_enabled: true,
            tracing: false,
            trace: Vec::new(),
            last_timeout,
            last_tick,
            rr_cursor: 0,
        }
    }

    pub fn set_app(&mut self, rid: Rid, app: Box<dyn Application>) {
        self.apps.insert(rid, app);
    }

    /// Every action enabled in the current state with its age in steps.
    pub fn enabled(&self) -> Vec<(ActionSel, u64)> {
        let now = self.world.step_count;
        let mut out = Vec::new();
        for rid in self.world.layers.keys() {
            let since = self.last_timeout.get(rid).copied().unwrap_or(now);
            out.push((ActionSel::Timeout(*rid), now.saturating_sub(since)));
        }
        for rid in self.world.active_processes() {
            if self.ticks_enabled && self.apps.contains_key(&rid) {
                let since = self.last_tick.get(&rid).copied().unwrap_or(now);
                out.push((ActionSel::AppTick(rid), now.saturating_sub(since)));
            }
        }
        for l in self.world.layers.values() {
            for r in l.relays.values() {
                for (i, e) in r.buf.iter().enumerate() {
                    out.push((ActionSel::DeliverRelay(r.id, i), now.saturating_sub(e.born)));
                }
            }
            for (i, (_, e)) in l.layer_buf.iter().enumerate() {
                out.push((ActionSel::DeliverLayer(l.rid, i), now.saturating_sub(e.born)));
            }
        }
        out
    }

    fn choose(&mut self) -> Option<ActionSel> {
        let en = self.enabled();
        if en.is_empty() {
            return None;
        }
        let bound = self.policy.fairness_bound;
        let starving = en
            .iter()
            .filter(|(_, age)| *age > bound)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((a, _)) = starving {
            return Some(*a);
        }
        let i = match self.policy.mode {
            SchedMode::RoundRobin => {
                self.rr_cursor = self.rr_cursor.wrapping_add(1);
                self.rr_cursor % en.len()
            }
            SchedMode::SeededRandomFair => self.rng.gen_range(0..en.len()),
        };
        Some(en[i].0)
    }

    /// Executes one enabled action. Returns `false` if nothing is enabled.
    pub fn step(&mut self) -> bool {
        let Some(a) = self.choose() else {
            return false;
        };
        self.execute(a);
        true
    }

    /// Runs the given action atomically.
    pub fn execute(&mut self, a: ActionSel) {
        let now = self.world.step_count;
        let digest = match a {
            ActionSel::Timeout(rid) => {
                self.last_timeout.insert(rid, now + 1);
                if let Some(l) = self.world.layers.get_mut(&rid) {
                    l.clock = now;
                    l.timeout();
                }
                self.layer_digest(rid)
            }
            ActionSel::AppTick(rid) => {
                self.last_tick.insert(rid, now + 1);
                self.with_app(rid, |app, ctx| app.on_tick(ctx));
                self.layer_digest(rid)
            }
            ActionSel::DeliverRelay(id, i) => self.deliver_from_relay(id, i),
            ActionSel::DeliverLayer(rid, i) => self.deliver_from_layer(rid, i),
        };
        self.world.layers.retain(|_, l| !l.shut_down);
        if self.tracing {
            self.trace.push(format!("{} {} {} {:016x}", now, a.kind(), a.rid(), digest));
        }
        self.world.step_count += 1;
    }

    fn layer_digest(&self, rid: Rid) -> u64 {
        if !self.tracing {
            return 0;
        }
        let app = self.apps.get(&rid).map_or(0, |a| a.digest());
        let l = self.world.layers.get(&rid);
        fnv1a(format!("{l:?}{app}").as_bytes())
    }

    fn deliver_from_relay(&mut self, id: RelayId, i: usize) -> u64 {
        let Some(r) = self.world.relay_mut(id) else {
            return 0;
        };
        if i >= r.buf.len() {
            return 0;
        }
        let env = r.buf.remove(i);
        let digest = if self.tracing { fnv1a(format!("{:?}", env.msg).as_bytes()) } else { 0 };
        match r.out.id {
            Some(target) => {
                let now = self.world.step_count;
                if let Some(l) = self.world.layers.get_mut(&target.rid) {
                    l.clock = now;
                    l.receive(env.msg);
                }
            }
            None => {
                if let Message::Local(action) = env.msg {
                    self.with_app(id.rid, |app, ctx| app.on_deliver(ctx, action));
                }
            }
        }
        digest
    }

    fn deliver_from_layer(&mut self, rid: Rid, i: usize) -> u64 {
        let Some(l) = self.world.layers.get_mut(&rid) else {
            return 0;
        };
        if i >= l.layer_buf.len() {
            return 0;
        }
        let (to, env) = l.layer_buf.remove(i);
        let digest = if self.tracing { fnv1a(format!("{:?}", env.msg).as_bytes()) } else { 0 };
        let now = self.world.step_count;
        if let Some(t) = self.world.layers.get_mut(&to) {
            t.clock = now;
            t.receive(env.msg);
        }
        digest
    }

    fn with_app(&mut self, rid: Rid, f: impl FnOnce(&mut dyn Application, &mut ProcessCtx<'_>)) {
        if !self.world.is_active(rid) {
            return;
        }
        let Some(mut app) = self.apps.remove(&rid) else {
            return;
        };
        let hints = self.hints_enabled.then(|| crate::oracle::valid_sinks(&self.world));
        self.act_inner(rid, hints.as_ref(), |ctx| f(app.as_mut(), ctx));
        self.apps.insert(rid, app);
    }

    /// Runs `f` as one application action of process `rid`, outside the
    /// scheduler. Used by plan executors and tests.
    pub fn act<T>(&mut self, rid: Rid, f: impl FnOnce(&mut ProcessCtx<'_>) -> T) -> Option<T> {
        if !self.world.is_active(rid) {
            return None;
        }
        let now = self.world.step_count;
        let out = self.act_inner(rid, None, f);
        self.world.layers.retain(|_, l| !l.shut_down);
        if self.tracing {
            let d = self.layer_digest(rid);
            self.trace.push(format!("{now} act {rid} {d:016x}"));
        }
        self.world.step_count += 1;
        out
    }

    fn act_inner<T>(
        &mut self,
        rid: Rid,
        hints: Option<&BTreeMap<RelayId, Rid>>,
        f: impl FnOnce(&mut ProcessCtx<'_>) -> T,
    ) -> Option<T> {
        let now = self.world.step_count;
        let info = self.world.processes.get_mut(&rid)?;
        let layer = self.world.layers.get_mut(&rid)?;
        layer.clock = now;
        let mut ctx = ProcessCtx {
            layer,
            info,
            rng: &mut self.rng,
            hints,
            events: &mut self.events,
            stop: false,
        };
        let out = f(&mut ctx);
        if ctx.stop {
            ctx.info.active = false;
            ctx.layer.stop_process();
        }
        Some(out)
    }

    /// Steps until `pred` holds or `max_steps` actions have run.
    pub fn run_until(&mut self, max_steps: u64, mut pred: impl FnMut(&WorldState) -> bool) -> RunOutcome {
        let mut n = 0;
        loop {
            if pred(&self.world) {
                return RunOutcome::Reached(n);
            }
            if n >= max_steps || !self.step() {
                return RunOutcome::BudgetExhausted(n);
            }
            n += 1;
        }
    }

    /// Runs exactly `n` steps, calling `observe` after each.
    pub fn run_for(&mut self, n: u64, mut observe: impl FnMut(&WorldState)) {
        for _ in 0..n {
            if !self.step() {
                break;
            }
            observe(&self.world);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::message::Param;

    fn one_layer() -> Simulation {
        let mut w = WorldState::new();
        w.add_process(Rid(0), false);
        Simulation::new(w, 1, SchedulerPolicy::default())
    }

    #[test]
    fn lone_layer_only_has_timeout_enabled() {
        let s = one_layer();
        let en = s.enabled();
        assert_eq!(en.len(), 1);
        assert_eq!(en[0].0, ActionSel::Timeout(Rid(0)));
    }

    #[test]
    fn run_until_true_predicate_takes_zero_steps() {
        let mut s = one_layer();
        assert_eq!(s.run_until(10, |_| true), RunOutcome::Reached(0));
    }

    #[test]
    fn run_until_false_predicate_exhausts_budget() {
        let mut s = one_layer();
        assert_eq!(s.run_until(10, |_| false), RunOutcome::BudgetExhausted(10));
        assert_eq!(s.world.step_count, 10);
    }

    #[test]
    fn buffered_messages_can_leave_out_of_order() {
        let mut seen_reverse = false;
        for seed in 0..40 {
            let mut w = WorldState::new();
            let l = w.add_process(Rid(0), false);
            let r = l.new_relay().unwrap();
            l.send(r, Action::new("a", vec![Param::Value(0)]));
            l.send(r, Action::new("a", vec![Param::Value(1)]));
            let mut s = Simulation::new(w, seed, SchedulerPolicy::default());
            struct Rec(Vec<u64>);
            impl Application for Rec {
                fn on_tick(&mut self, _: &mut ProcessCtx<'_>) {}
                fn on_deliver(&mut self, ctx: &mut ProcessCtx<'_>, a: Action) {
                    self.0.push(a.value(0).unwrap());
                    ctx.record(AppEvent::Delivered { uid: a.value(0).unwrap(), at: ctx.rid() });
                }
            }
            s.set_app(Rid(0), Box::new(Rec(vec![])));
            s.run_until(100, |w| w.message_count() == 0);
            let order: Vec<u64> = s
                .events
                .iter()
                .filter_map(|e| match e {
                    AppEvent::Delivered { uid, .. } => Some(*uid),
                    _ => None,
                })
                .collect();
            assert_eq!(order.len(), 2);
            if order == vec![1, 0] {
                seen_reverse = true;
            }
        }
        assert!(seen_reverse);
    }

    #[test]
    fn starving_actions_are_forced_within_bound() {
        let mut w = WorldState::new();
        for i in 0..4 {
            let l = w.add_process(Rid(i), false);
            let r = l.new_relay().unwrap();
            for v in 0..5 {
                l.send(r, Action::new("a", vec![Param::Value(v)]));
            }
        }
        let policy = SchedulerPolicy {
            mode: SchedMode::SeededRandomFair,
            fairness_bound: 8,
        };
        let mut s = Simulation::new(w, 9, policy);
        let mut worst = 0;
        for _ in 0..2000 {
            for (_, age) in s.enabled() {
                worst = worst.max(age);
            }
            s.step();
        }
        let total_actions = 4 + 20;
        assert!(worst <= 8 * total_actions, "worst age {worst}");
    }

    #[test]
    fn round_robin_is_deterministic() {
        let run = || {
            let mut s = one_layer();
            s.policy.mode = SchedMode::RoundRobin;
            s.tracing = true;
            s.run_for(50, |_| {});
            s.trace
        };
        assert_eq!(run(), run());
    }
}
