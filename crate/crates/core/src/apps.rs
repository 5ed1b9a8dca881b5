//! A deliberate random application: it never deletes a relay that still has
//! incoming entries.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ids::RelayRef;
use crate::message::{Action, Param};
use crate::sim::{AppEvent, Application, ProcessCtx};
use crate::world::fnv1a;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomAppConfig {
    /// Soft cap on relays in this process's layer.
    pub max_relays: usize,
    /// When false, only direct relays (level at most 1) are introduced.
    pub indirect_refs: bool,
    /// When true, references are only sent through relays the harness hints
    /// are valid.
    pub refs_via_valid_only: bool,
}

impl Default for RandomAppConfig {
    fn default() -> Self {
        RandomAppConfig {
            max_relays: 6,
            indirect_refs: true,
            refs_via_valid_only: false,
        }
    }
}

pub struct RandomApp {
    cfg: RandomAppConfig,
    next_uid: u64,
    uid_base: u64,
}

impl RandomApp {
    pub fn new(rid: crate::ids::Rid, cfg: RandomAppConfig) -> Self {
        RandomApp {
            cfg,
            next_uid: 0,
            uid_base: u64::from(rid.0) << 32,
        }
    }

    fn alive(ctx: &ProcessCtx<'_>) -> Vec<RelayRef> {
        ctx.get_relays().into_iter().filter(|r| !ctx.dead(*r)).collect()
    }

    fn send_data(&mut self, ctx: &mut ProcessCtx<'_>, relays: &[RelayRef]) {
        let Some(&r) = relays.choose(ctx.rng()) else {
            return;
        };
        let uid = self.uid_base | self.next_uid;
        self.next_uid += 1;
        let expected = ctx.hint_valid(r).flatten();
        ctx.send(r, Action::new("msg", vec![Param::Value(uid)]));
        ctx.record(AppEvent::Sent {
            uid,
            via: r.peek_id(),
            expected,
        });
    }

    fn introduce(&mut self, ctx: &mut ProcessCtx<'_>, relays: &[RelayRef]) {
        let mut vias: Vec<RelayRef> = relays.iter().copied().filter(|r| !ctx.is_sink(*r)).collect();
        if self.cfg.refs_via_valid_only {
            vias.retain(|r| ctx.hint_valid(*r).flatten().is_some());
        }
        let subjects: Vec<RelayRef> = relays
            .iter()
            .copied()
            .filter(|s| self.cfg.indirect_refs || ctx.direct(*s))
            .filter(|s| !self.cfg.refs_via_valid_only || ctx.hint_valid(*s).flatten().is_some())
            .collect();
        let (Some(&via), Some(&s)) = (vias.choose(ctx.rng()), subjects.choose(ctx.rng())) else {
            return;
        };
        ctx.send(via, Action::new("intro", vec![Param::Ref(s)]));
    }

    fn prune(&mut self, ctx: &mut ProcessCtx<'_>, relays: &[RelayRef]) {
        let sinks = relays.iter().filter(|r| ctx.is_sink(**r)).count();
        let victims: Vec<RelayRef> = relays
            .iter()
            .copied()
            .filter(|r| ctx.incoming(*r) == 0 && (!ctx.is_sink(*r) || sinks > 1))
            .collect();
        if let Some(&r) = victims.choose(ctx.rng()) {
            ctx.delete(r);
        }
    }

    fn fuse(&mut self, ctx: &mut ProcessCtx<'_>, relays: &[RelayRef]) {
        let fwd: Vec<RelayRef> = relays.iter().copied().filter(|r| !ctx.is_sink(*r)).collect();
        let Some(&a) = fwd.choose(ctx.rng()) else {
            return;
        };
        let same: Vec<RelayRef> = fwd
            .iter()
            .copied()
            .filter(|b| *b != a && ctx.same_target(a, *b))
            .collect();
        if let Some(&b) = same.choose(ctx.rng()) {
            ctx.merge(&[a, b]);
        }
    }
}

impl Application for RandomApp {
    fn on_tick(&mut self, ctx: &mut ProcessCtx<'_>) {
        let relays = Self::alive(ctx);
        let full = relays.len() >= self.cfg.max_relays;
        match ctx.rng().gen_range(0..20) {
            0..=6 => self.send_data(ctx, &relays),
            7..=10 if !full => self.introduce(ctx, &relays),
            11..=12 if !full => {
                ctx.new_relay();
            }
            13..=15 => self.prune(ctx, &relays),
            16..=17 => self.fuse(ctx, &relays),
            _ if full => self.prune(ctx, &relays),
            _ => {}
        }
    }

    fn on_deliver(&mut self, ctx: &mut ProcessCtx<'_>, action: Action) {
        if action.label == "msg" {
            if let Some(uid) = action.value(0) {
                let at = ctx.rid();
                ctx.record(AppEvent::Delivered { uid, at });
            }
        }
    }

    fn digest(&self) -> u64 {
        fnv1a(&self.next_uid.to_le_bytes())
    }
}
