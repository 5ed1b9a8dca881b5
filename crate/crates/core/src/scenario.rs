//! TOML scenario files: topology, applications, scheduler, stop predicate and
//! outputs. A scenario and a seed fully determine a run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::apps::{RandomApp, RandomAppConfig};
use crate::build::{adversarial_init, Corruption};
use crate::dot::{build_world, parse_dot, to_dot, DotError};
use crate::fdp::DepartureApp;
use crate::ids::Rid;
use crate::ifr::{TargetGraph, TargetRelay};
use crate::oracle::{fdp_legitimate, process_components, stayers_connected, valid_graph_has_cycle, Oracle};
use crate::sim::{SchedMode, SchedulerPolicy, Simulation};
use crate::world::WorldState;

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_BUDGET: u8 = 3;
pub const EXIT_VIOLATION: u8 = 4;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("topology: {0}")]
    Dot(#[from] DotError),
    #[error("scenario: {0}")]
    Invalid(String),
}

impl ScenarioError {
    /// Exit code for failures before the run starts; output failures count
    /// as parse errors too since nothing was judged.
    pub fn exit_code(&self) -> u8 {
        EXIT_PARSE
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_max_steps")]
    pub max_steps: u64,
    #[serde(default)]
    pub stop: StopPredicate,
    /// Steps after the predicate first holds during which legality is
    /// re-checked. Defaults to ten fairness bounds when stopping on `legal`.
    pub closure_window: Option<u64>,
    /// Processes tagged as leaving.
    #[serde(default)]
    pub leaving: Vec<u32>,
    pub topology: Topology,
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default)]
    pub app: AppConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn default_max_steps() -> u64 {
    100_000
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopPredicate {
    #[default]
    Legal,
    FdpLegitimate,
    /// Every relay layer has been removed.
    Shutdown,
    /// Run exactly `max_steps` steps.
    Steps,
}

impl StopPredicate {
    fn name(&self) -> &'static str {
        match self {
            StopPredicate::Legal => "legal",
            StopPredicate::FdpLegitimate => "fdp_legitimate",
            StopPredicate::Shutdown => "shutdown",
            StopPredicate::Steps => "steps",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Topology {
    /// Random legal topology or corrupted state over `p0..p{processes-1}`.
    Generated {
        processes: u32,
        relays: usize,
        #[serde(default)]
        messages: usize,
        #[serde(default)]
        corruption: Corruption,
    },
    /// Relays listed by name; `out` names another relay, absent for sinks.
    Explicit {
        processes: Vec<u32>,
        relays: Vec<NamedRelay>,
    },
    /// A Graphviz file using the export convention, relative to the scenario.
    Dot { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedRelay {
    pub name: String,
    pub owner: u32,
    pub out: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub mode: SchedMode,
    pub fairness_bound: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        let p = SchedulerPolicy::default();
        SchedulerConfig {
            mode: p.mode,
            fairness_bound: p.fairness_bound,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppKind {
    #[default]
    Idle,
    Random,
    Departure,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default)]
    pub kind: AppKind,
    pub max_relays: Option<usize>,
    pub indirect_refs: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub trace: Option<PathBuf>,
    pub dot_every: Option<u64>,
    pub dot_dir: Option<PathBuf>,
}

/// Command-line overrides of the scenario file.
#[derive(Clone, Debug, Default)]
pub struct RunOverrides {
    pub seed: Option<u64>,
    pub max_steps: Option<u64>,
    pub trace: Option<PathBuf>,
    pub dot_every: Option<(u64, PathBuf)>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ScenarioError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut s = Self::from_toml(&text)?;
        if let Topology::Dot { path: p } = &mut s.topology {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        Ok(s)
    }

    pub fn initial_world(&self) -> Result<WorldState, ScenarioError> {
        let mut w = match &self.topology {
            Topology::Generated {
                processes,
                relays,
                messages,
                corruption,
            } => {
                if *processes == 0 {
                    return Err(ScenarioError::Invalid("at least one process is required".into()));
                }
                adversarial_init(self.seed, *processes, *relays, *messages, *corruption)
            }
            Topology::Explicit { processes, relays } => {
                let mut t = TargetGraph {
                    processes: processes.iter().map(|p| Rid(*p)).collect(),
                    ..Default::default()
                };
                for r in relays {
                    if !t.processes.contains(&Rid(r.owner)) {
                        return Err(ScenarioError::Invalid(format!("relay {} has unknown owner {}", r.name, r.owner)));
                    }
                    if r.out.as_ref().is_some_and(|o| !relays.iter().any(|x| &x.name == o)) {
                        return Err(ScenarioError::Invalid(format!("relay {} points to an unknown relay", r.name)));
                    }
                    let prev = t.relays.insert(
                        r.name.clone(),
                        TargetRelay {
                            owner: Rid(r.owner),
                            out: r.out.clone(),
                        },
                    );
                    if prev.is_some() {
                        return Err(ScenarioError::Invalid(format!("relay {} listed twice", r.name)));
                    }
                }
                build_world(&t)?.0
            }
            Topology::Dot { path } => {
                let text = fs::read_to_string(path).map_err(|source| ScenarioError::Io {
                    path: path.clone(),
                    source,
                })?;
                build_world(&parse_dot(&text)?.to_target()?)?.0
            }
        };
        for l in &self.leaving {
            match w.processes.get_mut(&Rid(*l)) {
                Some(p) => p.leaving = true,
                None => return Err(ScenarioError::Invalid(format!("leaving process {l} does not exist"))),
            }
        }
        Ok(w)
    }
}

/// Result of a run: ordered report pairs and the exit code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunReport {
    pub fields: Vec<(String, String)>,
    pub exit: u8,
}

impl RunReport {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.fields.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.fields {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

struct Frames {
    every: u64,
    dir: PathBuf,
}

impl Frames {
    fn write(&self, w: &WorldState) -> Result<(), ScenarioError> {
        let path = self.dir.join(format!("frame_{:08}.dot", w.step_count));
        fs::write(&path, to_dot(w)).map_err(|source| ScenarioError::Io { path, source })
    }
}

fn install_apps(sim: &mut Simulation, cfg: &AppConfig) {
    let procs: Vec<(Rid, bool)> = sim.world.processes.iter().map(|(r, i)| (*r, i.leaving)).collect();
    for (rid, leaving) in procs {
        match cfg.kind {
            AppKind::Idle => {}
            AppKind::Random => {
                let d = RandomAppConfig::default();
                let c = RandomAppConfig {
                    max_relays: cfg.max_relays.unwrap_or(d.max_relays),
                    indirect_refs: cfg.indirect_refs.unwrap_or(d.indirect_refs),
                    refs_via_valid_only: false,
                };
                sim.set_app(rid, Box::new(RandomApp::new(rid, c)));
            }
            AppKind::Departure => {
                let initial = sim.world.layers[&rid].relays.keys().copied().collect();
                sim.set_app(rid, Box::new(DepartureApp::new(rid, leaving, initial)));
            }
        }
    }
}

/// Runs a scenario; I/O errors while writing outputs are returned as errors.
pub fn run_scenario(sc: &Scenario, label: &str, ov: &RunOverrides) -> Result<RunReport, ScenarioError> {
    let mut sc = sc.clone();
    if let Some(s) = ov.seed {
        sc.seed = s;
    }
    if let Some(m) = ov.max_steps {
        sc.max_steps = m;
    }
    let world = sc.initial_world()?;
    let initial_components = process_components(&world);
    let initial_relays = world.relays().count();
    let policy = SchedulerPolicy {
        mode: sc.scheduler.mode,
        fairness_bound: sc.scheduler.fairness_bound,
    };
    let mut sim = Simulation::new(world, sc.seed, policy);
    let trace_path = ov.trace.clone().or(sc.output.trace.clone());
    sim.tracing = trace_path.is_some();
    install_apps(&mut sim, &sc.app);

    let frames = match (&ov.dot_every, sc.output.dot_every, &sc.output.dot_dir) {
        (Some((n, d)), _, _) => Some(Frames {
            every: *n,
            dir: d.clone(),
        }),
        (None, Some(n), Some(d)) => Some(Frames {
            every: n,
            dir: d.clone(),
        }),
        _ => None,
    };
    if let Some(f) = &frames {
        if f.every == 0 {
            return Err(ScenarioError::Invalid("dot_every must be positive".into()));
        }
        fs::create_dir_all(&f.dir).map_err(|source| ScenarioError::Io {
            path: f.dir.clone(),
            source,
        })?;
        f.write(&sim.world)?;
    }

    let pred = |w: &WorldState| match sc.stop {
        StopPredicate::Legal => Oracle::new(w).is_legal(),
        StopPredicate::FdpLegitimate => fdp_legitimate(w, &initial_components),
        StopPredicate::Shutdown => w.layers.is_empty(),
        StopPredicate::Steps => false,
    };
    let departure = sc.app.kind == AppKind::Departure;
    let mut clause_iii = 0u64;
    let mut cycles = 0u64;
    let mut steps = 0u64;
    let mut reached = pred(&sim.world);
    let after_step = |sim: &Simulation, clause_iii: &mut u64, cycles: &mut u64| -> Result<(), ScenarioError> {
        if departure && !stayers_connected(&sim.world, &initial_components) {
            *clause_iii += 1;
        }
        if valid_graph_has_cycle(&sim.world) {
            *cycles += 1;
        }
        if let Some(f) = &frames {
            if sim.world.step_count % f.every == 0 {
                f.write(&sim.world)?;
            }
        }
        Ok(())
    };
    while !reached && steps < sc.max_steps {
        if !sim.step() {
            break;
        }
        steps += 1;
        after_step(&sim, &mut clause_iii, &mut cycles)?;
        reached = pred(&sim.world);
    }
    let window = match (sc.closure_window, sc.stop) {
        (Some(w), _) => w,
        (None, StopPredicate::Legal) => 10 * policy.fairness_bound,
        (None, _) => 0,
    };
    let mut closure_violations = 0u64;
    if reached && sc.stop == StopPredicate::Legal {
        for _ in 0..window {
            if !sim.step() {
                break;
            }
            after_step(&sim, &mut clause_iii, &mut cycles)?;
            if !Oracle::new(&sim.world).is_legal() {
                closure_violations += 1;
            }
        }
    }
    if let Some(p) = &trace_path {
        let mut text = sim.trace.join("\n");
        text.push('\n');
        fs::write(p, text).map_err(|source| ScenarioError::Io {
            path: p.clone(),
            source,
        })?;
    }

    let o = Oracle::new(&sim.world);
    let alive: Vec<_> = sim.world.relays().filter(|r| r.is_alive()).collect();
    let invalid = alive.iter().filter(|r| !o.is_valid(r.id)).count();
    let budget_ok = reached || sc.stop == StopPredicate::Steps;
    let violated = closure_violations > 0 || clause_iii > 0 || cycles > 0;
    let exit = if violated {
        EXIT_VIOLATION
    } else if !budget_ok {
        EXIT_BUDGET
    } else {
        EXIT_OK
    };
    let mut f: Vec<(String, String)> = Vec::new();
    let mut put = |k: &str, v: String| f.push((k.to_string(), v));
    put("scenario", label.to_string());
    put("seed", sc.seed.to_string());
    put("processes", sim.world.processes.len().to_string());
    put("leaving", sc.leaving.len().to_string());
    put("relays_initial", initial_relays.to_string());
    put("components_initial", initial_components.len().to_string());
    put("stop", sc.stop.name().to_string());
    put("reached", reached.to_string());
    put("steps", steps.to_string());
    put("closure_window", if reached && sc.stop == StopPredicate::Legal { window } else { 0 }.to_string());
    put("closure_violations", closure_violations.to_string());
    put("legal", o.is_legal().to_string());
    put("relays", alive.len().to_string());
    put("invalid_relays", invalid.to_string());
    put("valid_cycle_states", cycles.to_string());
    put("components", process_components(&sim.world).len().to_string());
    put("active", sim.world.active_processes().count().to_string());
    put("layers", sim.world.layers.len().to_string());
    put("in_flight", sim.world.message_count().to_string());
    put("fdp_legitimate", fdp_legitimate(&sim.world, &initial_components).to_string());
    put("fdp_clause_iii_violations", clause_iii.to_string());
    put("digest", format!("{:016x}", sim.world.digest()));
    put("exit", exit.to_string());
    Ok(RunReport { fields: f, exit })
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXAMPLE: &str = r#"
        seed = 3
        stop = "legal"

        [topology]
        kind = "explicit"
        processes = [0, 1, 2]
        relays = [
          { name = "p", owner = 2 },
          { name = "r", owner = 1, out = "p" },
          { name = "q", owner = 0, out = "r" },
        ]
    "#;

    #[test]
    fn clean_example_is_legal_at_once() {
        let sc = Scenario::from_toml(EXAMPLE).unwrap();
        let r = run_scenario(&sc, "example", &RunOverrides::default()).unwrap();
        assert_eq!(r.get("reached"), Some("true"));
        assert_eq!(r.get("steps"), Some("0"));
        assert_eq!(r.get("invalid_relays"), Some("0"));
        assert_eq!(r.get("closure_violations"), Some("0"));
        assert_eq!(r.exit, EXIT_OK);
    }

    #[test]
    fn corrupted_start_converges() {
        let sc = Scenario::from_toml(
            r#"
            seed = 11
            [topology]
            kind = "generated"
            processes = 5
            relays = 14
            messages = 20
            corruption = "full"
            [app]
            kind = "random"
            indirect_refs = false
            "#,
        )
        .unwrap();
        let r = run_scenario(&sc, "adv", &RunOverrides::default()).unwrap();
        assert_eq!(r.get("reached"), Some("true"), "{}", r.render());
        assert_eq!(r.get("closure_window"), Some("640"));
        assert_eq!(r.exit, EXIT_OK);
    }

    #[test]
    fn tiny_budget_is_exhausted() {
        let sc = Scenario::from_toml(
            r#"
            [topology]
            kind = "generated"
            processes = 4
            relays = 12
            messages = 30
            corruption = "full"
            "#,
        )
        .unwrap();
        let ov = RunOverrides {
            max_steps: Some(1),
            seed: Some(5),
            ..Default::default()
        };
        let r = run_scenario(&sc, "x", &ov).unwrap();
        assert_eq!(r.get("reached"), Some("false"));
        assert_eq!(r.exit, EXIT_BUDGET);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let e = Scenario::from_toml("seed = 1\nbogus = 2\n[topology]\nkind = \"dot\"\npath = \"x\"").unwrap_err();
        assert!(matches!(e, ScenarioError::Toml(_)));
        assert_eq!(e.exit_code(), EXIT_PARSE);
    }

    #[test]
    fn report_renders_key_value_lines() {
        let sc = Scenario::from_toml(EXAMPLE).unwrap();
        let r = run_scenario(&sc, "example", &RunOverrides::default()).unwrap();
        let text = r.render();
        assert!(text.lines().all(|l| l.split_once('=').is_some()));
        assert!(text.starts_with("scenario=example\nseed=3\n"));
        assert!(text.ends_with("exit=0\n"));
    }
}
