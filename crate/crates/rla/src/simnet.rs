//! Deterministic, seed-driven asynchronous network simulation.
//!
//! A simulation owns one automaton per process and a bag of in-flight
//! envelopes. Logical time is the delivery step index: each step the
//! scheduler picks one pending envelope (seeded random delays, send
//! order, or an exhaustive walk over every choice), delivers it, and
//! processes the resulting sends to completion. Crash directives remove
//! processes at fixed steps; commit messages go through a reliable
//! broadcast that delivers all-or-nothing among correct processes.
//!
//! Runs record a full trace plus derived summaries (learned states,
//! commits, per-propose round counts, configuration availability) and a
//! set of inline safety monitors flags violations as they happen.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::ladt::{quorums, quorums_intersect, Ladt, QuorumRule};
use crate::lattice::{ConfigState, Pid, ProductElem, StateLattice, Triple, Value};
use crate::objects::{AppOp, AppOutput, ClientDriver, DriverStep, ObjectCtx, ObjectError, OpSide};
use crate::protocol::{
    Dest, Effect, Envelope, LearnPath, MsgKind, Mutation, Process, ProtoCtx, ProtocolError,
};

/// Scheduling policy for pending deliveries.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheduler {
    /// Each envelope gets a seeded random delay; channels reorder freely.
    #[default]
    RandomDelay,
    /// Deliveries happen in send order.
    Fifo,
    /// Every delivery and issue interleaving is explored; see
    /// [`enumerate`].
    ExhaustiveSmall,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CrashDirective {
    pub process: Pid,
    pub at_step: u64,
}

/// Reproducibility parameters for one run.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub scheduler: Scheduler,
    pub max_steps: u64,
    #[serde(default)]
    pub fault_plan: Vec<CrashDirective>,
    #[serde(default)]
    pub mutation: Mutation,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            seed: 0,
            scheduler: Scheduler::RandomDelay,
            max_steps: 50_000,
            fault_plan: Vec::new(),
            mutation: Mutation::None,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ProcSpec {
    pub id: Pid,
    #[serde(default)]
    pub client: bool,
    #[serde(default)]
    pub replica: bool,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ScriptedOp {
    #[serde(default)]
    pub at: u64,
    pub op: AppOp,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ClientScript {
    pub process: Pid,
    pub ops: Vec<ScriptedOp>,
}

/// A complete experiment: the replicated object, the initial replica
/// configuration, the processes and what each client does.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub object: Ladt,
    pub initial_config: ConfigState,
    pub processes: Vec<ProcSpec>,
    pub scripts: Vec<ClientScript>,
    #[serde(default)]
    pub quorum_rule: QuorumRule,
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scripted operation failed: {0}")]
    Script(#[from] ObjectError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("the exhaustive scheduler is driven through `enumerate`, not `run`")]
    ExhaustiveViaRun,
    #[error("exhaustive exploration exceeded {0}: raise the ceiling or shrink the scenario")]
    CeilingExceeded(String),
}

/// splitmix64: tiny, fast and fully reproducible across platforms.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct SimRng {
    state: u64,
}

impl SimRng {
    pub fn new(seed: u64) -> Self {
        SimRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    pub fn below(&mut self, bound: u64) -> u64 {
        if bound == 0 {
            0
        } else {
            self.next_u64() % bound
        }
    }
}

const DELAY_SPREAD: u64 = 16;

/// One line of the trace.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "ev", rename_all = "kebab-case")]
pub enum TraceEvent {
    AppInvoke {
        step: u64,
        process: Pid,
        op: u64,
        what: AppOp,
    },
    AppRespond {
        step: u64,
        process: Pid,
        op: u64,
        output: AppOutput,
    },
    ObjInvoke {
        step: u64,
        process: Pid,
        op: u64,
        parent: u64,
        side: OpSide,
        input: crate::ladt::Input,
    },
    ObjRespond {
        step: u64,
        process: Pid,
        op: u64,
        output: crate::ladt::Output,
    },
    ProposeInvoke {
        step: u64,
        process: Pid,
        op: u64,
        parent: u64,
        proposed: ProductElem,
        known_obj: Value,
        known_cfg: Value,
    },
    ProposeRespond {
        step: u64,
        process: Pid,
        op: u64,
        learned: ProductElem,
        via: LearnPath,
        rounds: u64,
        interruptions: u64,
    },
    RoundStart {
        step: u64,
        process: Pid,
        op: u64,
        seq: u64,
        queried: Vec<Value>,
        recipients: Vec<Pid>,
    },
    PreCommit {
        step: u64,
        process: Pid,
        op: u64,
        bound: ProductElem,
    },
    CommitInit {
        step: u64,
        process: Pid,
        op: u64,
        state: ProductElem,
    },
    Send {
        step: u64,
        from: Pid,
        to: Dest,
        kind: MsgKind,
        payload: Triple,
        flight: Option<u64>,
        bcast: Option<u64>,
    },
    Deliver {
        step: u64,
        process: Pid,
        from: Pid,
        kind: MsgKind,
        payload: Triple,
        flight: u64,
        bcast: Option<u64>,
    },
    Drop {
        step: u64,
        process: Pid,
        from: Pid,
        kind: MsgKind,
        flight: u64,
        bcast: Option<u64>,
    },
    BcastDropped {
        step: u64,
        bcast: u64,
        from: Pid,
    },
    Crash {
        step: u64,
        process: Pid,
    },
    Violation {
        step: u64,
        kind: ViolationKind,
        process: Option<Pid>,
        detail: String,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    TripleWellFormed,
    TripleMonotonicity,
    CommitShape,
    Consistency,
    Validity,
    RoundBound,
    EmptyConfigQueried,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            ViolationKind::TripleWellFormed => "triple-well-formed",
            ViolationKind::TripleMonotonicity => "triple-monotonicity",
            ViolationKind::CommitShape => "commit-shape",
            ViolationKind::Consistency => "consistency",
            ViolationKind::Validity => "validity",
            ViolationKind::RoundBound => "round-bound",
            ViolationKind::EmptyConfigQueried => "empty-config-queried",
        };
        write!(f, "{name}")
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub step: u64,
    pub kind: ViolationKind,
    pub process: Option<Pid>,
    pub detail: String,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status")]
pub enum QuiescenceStatus {
    /// All deliveries done, no operation pending on a live process.
    Quiescent,
    /// Live processes wait forever: nothing in flight can wake them.
    Stalled { at_step: u64 },
    /// The step budget ran out before the run settled.
    MaxStepsExceeded,
    /// An exhaustive path cut short by the depth ceiling.
    Truncated,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct LearnRecord {
    pub process: Pid,
    pub op: u64,
    pub proposed: ProductElem,
    pub learned: ProductElem,
    pub invoke_step: u64,
    pub respond_step: u64,
    pub rounds: u64,
    pub interruptions: u64,
    pub via: LearnPath,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct CommitRecord {
    pub process: Pid,
    pub step: u64,
    pub state: ProductElem,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct UnfinishedPropose {
    pub process: Pid,
    pub op: u64,
    pub proposed: ProductElem,
    pub invoke_step: u64,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ConfigAvailability {
    pub config: ConfigState,
    pub superseded_at: Option<u64>,
    pub has_correct_quorum: bool,
    pub compliant: bool,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
pub struct AvailabilityReport {
    pub entries: Vec<ConfigAvailability>,
    pub violated: bool,
    pub empty_config_queried: bool,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RunMeta {
    pub scenario: Scenario,
    pub sim: SimConfig,
}

/// Everything one run produced. The summaries are pure functions of the
/// trace, so a stored trace replays to an identical record.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub quiescence: QuiescenceStatus,
    pub steps: u64,
    pub events: Vec<TraceEvent>,
    pub learned: Vec<LearnRecord>,
    pub committed: Vec<CommitRecord>,
    pub unfinished: Vec<UnfinishedPropose>,
    pub crashed: BTreeSet<Pid>,
    pub violations: Vec<ViolationRecord>,
    pub availability: AvailabilityReport,
}

// ---------------------------------------------------------------------------
// Simulation state
// ---------------------------------------------------------------------------

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
struct Frame {
    app_id: u64,
    app: AppOp,
    obj_id: u64,
    prop_id: u64,
    sub: u64,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
struct Node {
    proc: Process,
    driver: Option<ClientDriver>,
    script: Vec<ScriptedOp>,
    script_pos: usize,
    crashed: bool,
    frame: Option<Frame>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
struct Flight {
    to: Pid,
    from: Pid,
    kind: MsgKind,
    payload: Triple,
    bcast: Option<u64>,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize)]
struct Bcast {
    from: Pid,
    delivered_any: bool,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Default)]
struct InflightMon {
    proposed: ProductElem,
    learned_before: Option<ProductElem>,
    concurrent_states: BTreeSet<ProductElem>,
    concurrent_ops: BTreeSet<u64>,
}

impl Default for ProductElem {
    fn default() -> Self {
        ProductElem::new(Value::Flag(false), Value::Flag(false))
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Default)]
struct Monitor {
    learned_set: BTreeSet<ProductElem>,
    committed_set: BTreeSet<ProductElem>,
    proposed_set: BTreeSet<ProductElem>,
    completed: BTreeMap<u64, (ProductElem, ProductElem)>,
    inflight: BTreeMap<u64, InflightMon>,
}

#[derive(Clone, PartialEq, Debug, Serialize)]
struct SimState {
    step: u64,
    nodes: BTreeMap<Pid, Node>,
    pending: BTreeMap<(u64, u64), Flight>,
    broadcasts: BTreeMap<u64, Bcast>,
    next_flight: u64,
    next_bcast: u64,
    crash_cursor: usize,
    fate_queue: VecDeque<u64>,
    rng: SimRng,
    monitor: Monitor,
    violations: Vec<ViolationRecord>,
    empty_config_queried: bool,
}

struct SimCtx {
    scenario: Scenario,
    cfg: SimConfig,
    proto: ProtoCtx,
    objects: ObjectCtx,
    initial: ProductElem,
    crash_plan: Vec<CrashDirective>,
}

struct Sim<'a> {
    ctx: &'a SimCtx,
    state: SimState,
    record: bool,
    events: Vec<TraceEvent>,
}

/// What the simulation can do next.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Choice {
    Issue(Pid),
    Deliver(u64, u64),
    BcastFate(u64, bool),
}

enum Progress {
    Choices,
    Quiescent,
    Stalled,
}

impl SimCtx {
    fn new(cfg: &SimConfig, scenario: &Scenario) -> Result<Self, SimError> {
        validate(scenario)?;
        let object = scenario.object.clone();
        let config = Ladt::config();
        let lat = StateLattice::new(object.state_lattice(), config.state_lattice());
        let initial = ProductElem::new(
            object.initial(),
            Value::Config(scenario.initial_config.clone()),
        );
        let mut crash_plan = cfg.fault_plan.clone();
        crash_plan.sort_by_key(|d| (d.at_step, d.process));
        Ok(SimCtx {
            proto: ProtoCtx {
                lat,
                quorum_rule: scenario.quorum_rule.clone(),
                mutation: cfg.mutation,
            },
            objects: ObjectCtx::new(object),
            initial,
            crash_plan,
            scenario: scenario.clone(),
            cfg: cfg.clone(),
        })
    }
}

fn validate(scenario: &Scenario) -> Result<(), SimError> {
    let bad = |msg: String| Err(SimError::InvalidScenario(msg));
    let mut ids = BTreeSet::new();
    for spec in &scenario.processes {
        if !ids.insert(spec.id) {
            return bad(format!("duplicate process id {}", spec.id));
        }
    }
    let replicas: BTreeSet<Pid> = scenario
        .processes
        .iter()
        .filter(|s| s.replica)
        .map(|s| s.id)
        .collect();
    let clients: BTreeSet<Pid> = scenario
        .processes
        .iter()
        .filter(|s| s.client)
        .map(|s| s.id)
        .collect();
    for p in scenario
        .initial_config
        .activated
        .iter()
        .chain(scenario.initial_config.removed.iter())
    {
        if !replicas.contains(p) {
            return bad(format!("configuration references undeclared replica {p}"));
        }
    }
    if scenario.initial_config.members().is_empty() {
        return bad("initial configuration has no members".into());
    }
    let mut scripted = BTreeSet::new();
    for script in &scenario.scripts {
        if !clients.contains(&script.process) {
            return bad(format!("script for non-client process {}", script.process));
        }
        if !scripted.insert(script.process) {
            return bad(format!("two scripts for process {}", script.process));
        }
        for op in &script.ops {
            if let AppOp::CfgAdd(p) | AppOp::CfgRemove(p) = op.op {
                if !replicas.contains(&p) {
                    return bad(format!("reconfiguration references undeclared replica {p}"));
                }
            }
        }
    }
    if let QuorumRule::Explicit(entries) = &scenario.quorum_rule {
        for entry in entries {
            let members = entry.config.members();
            if entry.quorums.is_empty() {
                return bad(format!("no quorums listed for {}", entry.config));
            }
            for q in &entry.quorums {
                if !q.is_subset(&members) {
                    return bad(format!("quorum not within members of {}", entry.config));
                }
            }
            if !quorums_intersect(&entry.quorums) {
                return bad(format!("quorums of {} do not intersect", entry.config));
            }
        }
    }
    Ok(())
}

impl<'a> Sim<'a> {
    fn new(ctx: &'a SimCtx, record: bool) -> Self {
        let mut nodes = BTreeMap::new();
        for spec in &ctx.scenario.processes {
            let driver = spec.client.then(|| {
                ClientDriver::new(
                    spec.id,
                    &ctx.objects,
                    Value::Config(ctx.scenario.initial_config.clone()),
                )
            });
            let script = ctx
                .scenario
                .scripts
                .iter()
                .find(|s| s.process == spec.id)
                .map(|s| s.ops.clone())
                .unwrap_or_default();
            nodes.insert(
                spec.id,
                Node {
                    proc: Process::new(spec.id, ctx.initial.clone()),
                    driver,
                    script,
                    script_pos: 0,
                    crashed: false,
                    frame: None,
                },
            );
        }
        Sim {
            ctx,
            state: SimState {
                step: 0,
                nodes,
                pending: BTreeMap::new(),
                broadcasts: BTreeMap::new(),
                next_flight: 0,
                next_bcast: 0,
                crash_cursor: 0,
                fate_queue: VecDeque::new(),
                rng: SimRng::new(ctx.cfg.seed),
                monitor: Monitor::default(),
                violations: Vec::new(),
                empty_config_queried: false,
            },
            record,
            events: Vec::new(),
        }
    }

    fn log(&mut self, ev: TraceEvent) {
        if self.record {
            self.events.push(ev);
        }
    }

    fn violation(&mut self, kind: ViolationKind, process: Option<Pid>, detail: String) {
        let record = ViolationRecord {
            step: self.state.step,
            kind,
            process,
            detail: detail.clone(),
        };
        self.state.violations.push(record);
        self.log(TraceEvent::Violation {
            step: self.state.step,
            kind,
            process,
            detail,
        });
    }

    // -- timers -------------------------------------------------------------

    /// Fires due crashes. In exhaustive mode undelivered broadcasts of a
    /// crashed sender become fate choices instead of staying live.
    fn fire_crashes(&mut self, branching: bool) {
        while self.state.crash_cursor < self.ctx.crash_plan.len() {
            let directive = self.ctx.crash_plan[self.state.crash_cursor];
            if directive.at_step > self.state.step {
                break;
            }
            self.state.crash_cursor += 1;
            let p = directive.process;
            let node = match self.state.nodes.get_mut(&p) {
                Some(n) if !n.crashed => n,
                _ => continue,
            };
            node.crashed = true;
            self.log(TraceEvent::Crash {
                step: self.state.step,
                process: p,
            });
            // In-flight envelopes to a crashed process are dropped.
            let doomed: Vec<(u64, u64)> = self
                .state
                .pending
                .iter()
                .filter(|(_, f)| f.to == p)
                .map(|(k, _)| *k)
                .collect();
            for key in doomed {
                let flight = self.state.pending.remove(&key).unwrap();
                self.log(TraceEvent::Drop {
                    step: self.state.step,
                    process: p,
                    from: flight.from,
                    kind: flight.kind,
                    flight: key.1,
                    bcast: flight.bcast,
                });
            }
            // Broadcasts by the crashed sender that nobody delivered yet
            // may vanish entirely or still reach everyone.
            let undelivered: Vec<u64> = self
                .state
                .broadcasts
                .iter()
                .filter(|(_, b)| b.from == p && !b.delivered_any)
                .filter(|(id, _)| {
                    self.state
                        .pending
                        .values()
                        .any(|f| f.bcast == Some(**id))
                })
                .map(|(id, _)| *id)
                .collect();
            if branching {
                self.state.fate_queue.extend(undelivered);
            }
        }
    }

    fn issuable(&self) -> Vec<Pid> {
        self.state
            .nodes
            .iter()
            .filter(|(_, n)| {
                !n.crashed
                    && n.frame.is_none()
                    && n.driver.is_some()
                    && n.script_pos < n.script.len()
                    && n.script[n.script_pos].at <= self.state.step
            })
            .map(|(p, _)| *p)
            .collect()
    }

    fn next_issue_at(&self) -> Option<u64> {
        self.state
            .nodes
            .values()
            .filter(|n| !n.crashed && n.frame.is_none() && n.script_pos < n.script.len())
            .map(|n| n.script[n.script_pos].at)
            .min()
    }

    fn live_inflight(&self) -> bool {
        self.state
            .nodes
            .values()
            .any(|n| !n.crashed && (n.frame.is_some() || n.proc.has_inflight()))
    }

    /// Fires timers and classifies what can happen next.
    fn settle(&mut self, branching: bool) -> Progress {
        loop {
            self.fire_crashes(branching);
            if !branching {
                for p in self.issuable() {
                    self.issue(p).expect("validated scenario");
                }
            }
            if !self.state.pending.is_empty()
                || !self.state.fate_queue.is_empty()
                || (branching && !self.issuable().is_empty())
            {
                return Progress::Choices;
            }
            if self.live_inflight() {
                return Progress::Stalled;
            }
            match self.next_issue_at() {
                // An idle future op: jump time forward to it.
                Some(at) if at > self.state.step => {
                    self.state.step = at;
                }
                Some(_) if branching => return Progress::Choices,
                Some(_) => continue,
                None => return Progress::Quiescent,
            }
        }
    }

    fn choices(&self) -> Vec<Choice> {
        if let Some(b) = self.state.fate_queue.front() {
            return vec![Choice::BcastFate(*b, false), Choice::BcastFate(*b, true)];
        }
        let mut out: Vec<Choice> = self.issuable().into_iter().map(Choice::Issue).collect();
        out.extend(
            self.state
                .pending
                .keys()
                .map(|(due, id)| Choice::Deliver(*due, *id)),
        );
        out
    }

    fn apply_choice(&mut self, choice: Choice) -> Result<(), SimError> {
        match choice {
            Choice::Issue(p) => self.issue(p),
            Choice::Deliver(due, id) => {
                self.deliver(due, id);
                Ok(())
            }
            Choice::BcastFate(bcast, drop) => {
                let popped = self.state.fate_queue.pop_front();
                debug_assert_eq!(popped, Some(bcast));
                if drop {
                    let from = self.state.broadcasts[&bcast].from;
                    let doomed: Vec<(u64, u64)> = self
                        .state
                        .pending
                        .iter()
                        .filter(|(_, f)| f.bcast == Some(bcast))
                        .map(|(k, _)| *k)
                        .collect();
                    for key in doomed {
                        self.state.pending.remove(&key);
                    }
                    self.log(TraceEvent::BcastDropped {
                        step: self.state.step,
                        bcast,
                        from,
                    });
                }
                Ok(())
            }
        }
    }

    // -- operations ---------------------------------------------------------

    fn issue(&mut self, p: Pid) -> Result<(), SimError> {
        let node = self.state.nodes.get_mut(&p).expect("known process");
        let op = node.script[node.script_pos].op.clone();
        node.script_pos += 1;
        let app_id = (p.0 as u64) * 10_000 + (node.script_pos as u64) * 100;
        let step = self.state.step;
        self.log(TraceEvent::AppInvoke {
            step,
            process: p,
            op: app_id,
            what: op.clone(),
        });
        let driver = self
            .state
            .nodes
            .get_mut(&p)
            .unwrap()
            .driver
            .as_mut()
            .expect("client node");
        let first = driver.begin(&self.ctx.objects, &op)?;
        let frame = Frame {
            app_id,
            app: op,
            obj_id: 0,
            prop_id: 0,
            sub: 0,
        };
        self.state.nodes.get_mut(&p).unwrap().frame = Some(frame);
        match first {
            DriverStep::Invoke {
                side,
                input,
                proposed,
            } => self.begin_object_op(p, side, input, proposed)?,
            DriverStep::Done(out) => self.finish_app_op(p, out),
        }
        Ok(())
    }

    fn begin_object_op(
        &mut self,
        p: Pid,
        side: OpSide,
        input: crate::ladt::Input,
        proposed: ProductElem,
    ) -> Result<(), SimError> {
        let step = self.state.step;
        let (app_id, sub) = {
            let frame = self.state.nodes.get_mut(&p).unwrap().frame.as_mut().unwrap();
            frame.sub += 1;
            let obj_id = frame.app_id + 2 * frame.sub - 1;
            frame.obj_id = obj_id;
            frame.prop_id = obj_id + 1;
            (frame.app_id, frame.sub)
        };
        let obj_id = app_id + 2 * sub - 1;
        let prop_id = obj_id + 1;
        self.log(TraceEvent::ObjInvoke {
            step,
            process: p,
            op: obj_id,
            parent: app_id,
            side,
            input,
        });
        let before = self.state.nodes[&p].proc.triple();
        self.log(TraceEvent::ProposeInvoke {
            step,
            process: p,
            op: prop_id,
            parent: obj_id,
            proposed: proposed.clone(),
            known_obj: before.obj.clone(),
            known_cfg: before.commit.cfg.clone(),
        });
        self.monitor_propose_invoke(p, prop_id, &proposed, &before);
        let effects = {
            let node = self.state.nodes.get_mut(&p).unwrap();
            node.proc.propose(&self.ctx.proto, prop_id, &proposed)?
        };
        self.check_step_invariants(p, &before);
        self.process_effects(p, effects);
        Ok(())
    }

    fn finish_app_op(&mut self, p: Pid, out: AppOutput) {
        let frame = self.state.nodes.get_mut(&p).unwrap().frame.take().unwrap();
        self.log(TraceEvent::AppRespond {
            step: self.state.step,
            process: p,
            op: frame.app_id,
            output: out,
        });
    }

    fn deliver(&mut self, due: u64, id: u64) {
        let flight = self
            .state
            .pending
            .remove(&(due, id))
            .expect("pending flight");
        self.state.step += 1;
        let step = self.state.step;
        let node = self.state.nodes.get_mut(&flight.to).expect("known process");
        if node.crashed {
            self.log(TraceEvent::Drop {
                step,
                process: flight.to,
                from: flight.from,
                kind: flight.kind,
                flight: id,
                bcast: flight.bcast,
            });
            return;
        }
        if let Some(b) = flight.bcast {
            self.state.broadcasts.get_mut(&b).unwrap().delivered_any = true;
        }
        self.log(TraceEvent::Deliver {
            step,
            process: flight.to,
            from: flight.from,
            kind: flight.kind,
            payload: flight.payload.clone(),
            flight: id,
            bcast: flight.bcast,
        });
        let env = Envelope {
            kind: flight.kind,
            payload: flight.payload.clone(),
            from: flight.from,
            to: Dest::To(flight.to),
        };
        let before = self.state.nodes[&flight.to].proc.triple();
        let effects = {
            let node = self.state.nodes.get_mut(&flight.to).unwrap();
            node.proc.deliver(&self.ctx.proto, &env)
        };
        self.check_step_invariants(flight.to, &before);
        self.process_effects(flight.to, effects);
    }

    fn check_step_invariants(&mut self, p: Pid, before: &Triple) {
        let after = self.state.nodes[&p].proc.triple();
        match self.ctx.proto.lat.is_well_formed(&after) {
            Ok(true) => {}
            Ok(false) => self.violation(
                ViolationKind::TripleWellFormed,
                Some(p),
                format!("tracked entry below commit estimate in {after}"),
            ),
            Err(e) => self.violation(ViolationKind::TripleWellFormed, Some(p), e.to_string()),
        }
        match self.ctx.proto.lat.leq_star(before, &after) {
            Ok(true) => {}
            Ok(false) => self.violation(
                ViolationKind::TripleMonotonicity,
                Some(p),
                format!("state regressed from {before} to {after}"),
            ),
            Err(e) => self.violation(ViolationKind::TripleMonotonicity, Some(p), e.to_string()),
        }
    }

    fn process_effects(&mut self, origin: Pid, effects: Vec<Effect>) {
        let mut queue: VecDeque<(Pid, Effect)> =
            effects.into_iter().map(|e| (origin, e)).collect();
        while let Some((p, effect)) = queue.pop_front() {
            match effect {
                Effect::Send(env) => self.send(env),
                Effect::RoundStarted {
                    op,
                    seq,
                    queried,
                    recipients,
                } => {
                    if queried
                        .iter()
                        .any(|u| u.expect_config().members().is_empty())
                    {
                        self.state.empty_config_queried = true;
                        self.violation(
                            ViolationKind::EmptyConfigQueried,
                            Some(p),
                            "a queried configuration has no members".into(),
                        );
                    }
                    self.log(TraceEvent::RoundStart {
                        step: self.state.step,
                        process: p,
                        op,
                        seq,
                        queried,
                        recipients,
                    });
                }
                Effect::PreCommitted { op, bound } => {
                    self.log(TraceEvent::PreCommit {
                        step: self.state.step,
                        process: p,
                        op,
                        bound,
                    });
                }
                Effect::CommitInitiated { op, state } => {
                    self.monitor_commit(p, &state);
                    self.log(TraceEvent::CommitInit {
                        step: self.state.step,
                        process: p,
                        op,
                        state,
                    });
                }
                Effect::Learned {
                    op,
                    state,
                    via,
                    rounds,
                    interruptions,
                } => {
                    self.log(TraceEvent::ProposeRespond {
                        step: self.state.step,
                        process: p,
                        op,
                        learned: state.clone(),
                        via,
                        rounds,
                        interruptions,
                    });
                    self.monitor_propose_respond(p, op, &state, rounds, interruptions);
                    let outcome = {
                        let node = self.state.nodes.get_mut(&p).unwrap();
                        let driver = node.driver.as_mut().expect("learning client");
                        driver.on_learned(&self.ctx.objects, state)
                    };
                    match outcome {
                        Ok(outcome) => {
                            let obj_id = self.state.nodes[&p].frame.as_ref().unwrap().obj_id;
                            self.log(TraceEvent::ObjRespond {
                                step: self.state.step,
                                process: p,
                                op: obj_id,
                                output: outcome.output,
                            });
                            match outcome.next {
                                DriverStep::Invoke {
                                    side,
                                    input,
                                    proposed,
                                } => {
                                    if let Err(e) = self.begin_object_op(p, side, input, proposed)
                                    {
                                        panic!("propose after learn failed: {e}");
                                    }
                                }
                                DriverStep::Done(out) => self.finish_app_op(p, out),
                            }
                        }
                        Err(e) => panic!("driver rejected learnt state: {e}"),
                    }
                }
            }
            let _ = &queue;
        }
    }

    fn send(&mut self, env: Envelope) {
        if env.kind == MsgKind::Commit && !env.commit_shaped() {
            self.violation(
                ViolationKind::CommitShape,
                Some(env.from),
                format!("commit payload {}", env.payload),
            );
        }
        match env.to {
            Dest::To(to) => {
                let id = self.state.next_flight;
                self.state.next_flight += 1;
                let due = self.due_step();
                self.log(TraceEvent::Send {
                    step: self.state.step,
                    from: env.from,
                    to: env.to,
                    kind: env.kind,
                    payload: env.payload.clone(),
                    flight: Some(id),
                    bcast: None,
                });
                if self.state.nodes[&to].crashed {
                    self.log(TraceEvent::Drop {
                        step: self.state.step,
                        process: to,
                        from: env.from,
                        kind: env.kind,
                        flight: id,
                        bcast: None,
                    });
                    return;
                }
                self.state.pending.insert(
                    (due, id),
                    Flight {
                        to,
                        from: env.from,
                        kind: env.kind,
                        payload: env.payload,
                        bcast: None,
                    },
                );
            }
            Dest::Broadcast => {
                let bcast = self.state.next_bcast;
                self.state.next_bcast += 1;
                self.state.broadcasts.insert(
                    bcast,
                    Bcast {
                        from: env.from,
                        delivered_any: false,
                    },
                );
                self.log(TraceEvent::Send {
                    step: self.state.step,
                    from: env.from,
                    to: Dest::Broadcast,
                    kind: env.kind,
                    payload: env.payload.clone(),
                    flight: None,
                    bcast: Some(bcast),
                });
                let targets: Vec<Pid> = self
                    .state
                    .nodes
                    .iter()
                    .filter(|(_, n)| !n.crashed)
                    .map(|(p, _)| *p)
                    .collect();
                for to in targets {
                    let id = self.state.next_flight;
                    self.state.next_flight += 1;
                    let due = self.due_step();
                    self.state.pending.insert(
                        (due, id),
                        Flight {
                            to,
                            from: env.from,
                            kind: env.kind,
                            payload: env.payload.clone(),
                            bcast: Some(bcast),
                        },
                    );
                }
            }
        }
    }

    fn due_step(&mut self) -> u64 {
        match self.ctx.cfg.scheduler {
            Scheduler::RandomDelay => self.state.step + 1 + self.state.rng.below(DELAY_SPREAD),
            Scheduler::Fifo => 0,
            Scheduler::ExhaustiveSmall => 0,
        }
    }

    // -- inline monitors ----------------------------------------------------

    fn monitor_propose_invoke(&mut self, p: Pid, op: u64, proposed: &ProductElem, known: &Triple) {
        let lat = &self.ctx.proto.lat;
        let learned_before = self
            .state
            .monitor
            .learned_set
            .iter()
            .cloned()
            .reduce(|a, b| lat.join(&a, &b).expect("learned states share lattices"));
        let mut mon = InflightMon {
            proposed: proposed.clone(),
            learned_before,
            concurrent_states: BTreeSet::new(),
            concurrent_ops: BTreeSet::new(),
        };
        let other_ops: Vec<u64> = self.state.monitor.inflight.keys().copied().collect();
        for b in other_ops {
            let other = self.state.monitor.inflight.get_mut(&b).unwrap();
            other.concurrent_states.insert(proposed.clone());
            other.concurrent_ops.insert(op);
            mon.concurrent_states.insert(other.proposed.clone());
            mon.concurrent_ops.insert(b);
        }
        for (b, (b_proposed, b_learned)) in &self.state.monitor.completed {
            let obj_known = lat
                .obj
                .leq(&b_learned.obj, &known.obj)
                .unwrap_or(false);
            let cfg_known = lat
                .cfg
                .leq(&b_learned.cfg, &known.commit.cfg)
                .unwrap_or(false);
            if !(obj_known && cfg_known) {
                mon.concurrent_states.insert(b_proposed.clone());
                mon.concurrent_ops.insert(*b);
            }
        }
        self.state.monitor.proposed_set.insert(proposed.clone());
        self.state.monitor.inflight.insert(op, mon);
        let _ = p;
    }

    fn monitor_commit(&mut self, p: Pid, state: &ProductElem) {
        let lat = self.ctx.proto.lat.clone();
        for other in self
            .state
            .monitor
            .learned_set
            .union(&self.state.monitor.committed_set)
        {
            let comparable = lat.leq(state, other).unwrap_or(false)
                || lat.leq(other, state).unwrap_or(false);
            if !comparable {
                self.violation(
                    ViolationKind::Consistency,
                    Some(p),
                    format!("incomparable committed states {state} and {other}"),
                );
                break;
            }
        }
        self.state.monitor.committed_set.insert(state.clone());
    }

    fn monitor_propose_respond(
        &mut self,
        p: Pid,
        op: u64,
        learned: &ProductElem,
        rounds: u64,
        interruptions: u64,
    ) {
        let lat = self.ctx.proto.lat.clone();
        let mon = match self.state.monitor.inflight.remove(&op) {
            Some(m) => m,
            None => return,
        };
        // Consistency: every pair of learned states must be comparable.
        for other in self
            .state
            .monitor
            .learned_set
            .union(&self.state.monitor.committed_set)
        {
            let comparable = lat.leq(learned, other).unwrap_or(false)
                || lat.leq(other, learned).unwrap_or(false);
            if !comparable {
                self.violation(
                    ViolationKind::Consistency,
                    Some(p),
                    format!("incomparable learned states {learned} and {other}"),
                );
                break;
            }
        }
        // Validity: above the input, above everything learned before the
        // invocation, and exactly a join of proposed states.
        if !lat.leq(&mon.proposed, learned).unwrap_or(false) {
            self.violation(
                ViolationKind::Validity,
                Some(p),
                format!("learned {learned} does not include proposal {}", mon.proposed),
            );
        }
        if let Some(before) = &mon.learned_before {
            if !lat.leq(before, learned).unwrap_or(false) {
                self.violation(
                    ViolationKind::Validity,
                    Some(p),
                    format!("learned {learned} below prior learn bound {before}"),
                );
            }
        }
        let mut contributors = vec![self.ctx.initial.clone()];
        for prop in &self.state.monitor.proposed_set {
            if lat.leq(prop, learned).unwrap_or(false) {
                contributors.push(prop.clone());
            }
        }
        let reachable = contributors
            .into_iter()
            .reduce(|a, b| lat.join(&a, &b).expect("proposals share lattices"))
            .expect("initial state present");
        if &reachable != learned {
            self.violation(
                ViolationKind::Validity,
                Some(p),
                format!("learned {learned} is not a join of proposed states"),
            );
        }
        // Round-trip bound: one round per distinct concurrent state plus
        // one, and no more interruptions than concurrent proposals.
        let c_states = mon.concurrent_states.len() as u64;
        let c_ops = mon.concurrent_ops.len() as u64;
        if rounds > c_states + 1 {
            self.violation(
                ViolationKind::RoundBound,
                Some(p),
                format!("{rounds} rounds with {c_states} concurrent states"),
            );
        }
        if interruptions > c_ops {
            self.violation(
                ViolationKind::RoundBound,
                Some(p),
                format!("{interruptions} interruptions with {c_ops} concurrent proposals"),
            );
        }
        self.state.monitor.learned_set.insert(learned.clone());
        self.state
            .monitor
            .completed
            .insert(op, (mon.proposed, learned.clone()));
    }

    // -- state hashing for the exhaustive scheduler --------------------------

    fn fingerprint(&self) -> [u8; 16] {
        let mut hasher = Sha256::new();
        let mut flights: Vec<Vec<u8>> = self
            .state
            .pending
            .values()
            .map(|f| {
                serde_json::to_vec(&(f.to, f.from, f.kind, &f.payload, f.bcast.is_some()))
                    .expect("serializable flight")
            })
            .collect();
        flights.sort();
        for f in &flights {
            hasher.update(f);
        }
        hasher.update(serde_json::to_vec(&self.state.nodes).expect("serializable nodes"));
        hasher.update(serde_json::to_vec(&self.state.monitor).expect("serializable monitor"));
        // Timers only matter while crash directives or delayed issues
        // remain; fold them in only then so equivalent states merge.
        let timers_live = self.state.crash_cursor < self.ctx.crash_plan.len()
            || self
                .state
                .nodes
                .values()
                .any(|n| n.script_pos < n.script.len() && n.script[n.script_pos].at > 0);
        if timers_live {
            hasher.update(serde_json::to_vec(&self.state.step).unwrap());
            let fates: Vec<bool> = self
                .state
                .broadcasts
                .values()
                .map(|b| b.delivered_any)
                .collect();
            hasher.update(serde_json::to_vec(&(&self.state.fate_queue, fates)).unwrap());
        }
        let digest = hasher.finalize();
        let mut out = [0u8; 16];
        out.copy_from_slice(&digest[..16]);
        out
    }

    fn into_record(self, quiescence: QuiescenceStatus) -> RunRecord {
        let crashed: BTreeSet<Pid> = self
            .state
            .nodes
            .iter()
            .filter(|(_, n)| n.crashed)
            .map(|(p, _)| *p)
            .collect();
        derive_record(
            RunMeta {
                scenario: self.ctx.scenario.clone(),
                sim: self.ctx.cfg.clone(),
            },
            self.events,
            quiescence,
            self.state.step,
            crashed,
            self.state.violations,
        )
    }
}

/// Builds the derived summaries from a trace. Replaying a stored trace
/// goes through this same function, so summaries cannot drift.
pub fn derive_record(
    meta: RunMeta,
    events: Vec<TraceEvent>,
    quiescence: QuiescenceStatus,
    steps: u64,
    crashed: BTreeSet<Pid>,
    violations: Vec<ViolationRecord>,
) -> RunRecord {
    let mut invokes: BTreeMap<u64, (Pid, ProductElem, u64)> = BTreeMap::new();
    let mut learned = Vec::new();
    let mut committed = Vec::new();
    for ev in &events {
        match ev {
            TraceEvent::ProposeInvoke {
                step,
                process,
                op,
                proposed,
                ..
            } => {
                invokes.insert(*op, (*process, proposed.clone(), *step));
            }
            TraceEvent::ProposeRespond {
                step,
                process,
                op,
                learned: state,
                via,
                rounds,
                interruptions,
            } => {
                let (_, proposed, invoke_step) =
                    invokes.remove(op).expect("respond matches an invoke");
                learned.push(LearnRecord {
                    process: *process,
                    op: *op,
                    proposed,
                    learned: state.clone(),
                    invoke_step,
                    respond_step: *step,
                    rounds: *rounds,
                    interruptions: *interruptions,
                    via: *via,
                });
            }
            TraceEvent::CommitInit {
                step,
                process,
                state,
                ..
            } => {
                committed.push(CommitRecord {
                    process: *process,
                    step: *step,
                    state: state.clone(),
                });
            }
            _ => {}
        }
    }
    let unfinished: Vec<UnfinishedPropose> = invokes
        .into_iter()
        .map(|(op, (process, proposed, invoke_step))| UnfinishedPropose {
            process,
            op,
            proposed,
            invoke_step,
        })
        .collect();
    let availability = audit_availability(&meta.scenario, &events, &crashed);
    RunRecord {
        meta,
        quiescence,
        steps,
        events,
        learned,
        committed,
        unfinished,
        crashed,
        violations,
        availability,
    }
}

/// Recomputes the potential configurations of a run, when each became
/// superseded in the eyes of a correct process, and whether every
/// never-superseded one kept a fully correct quorum.
pub fn audit_availability(
    scenario: &Scenario,
    events: &[TraceEvent],
    crashed: &BTreeSet<Pid>,
) -> AvailabilityReport {
    let cfg_lat = crate::lattice::Lattice::Config;
    let c0 = Value::Config(scenario.initial_config.clone());

    let mut proposed: BTreeSet<Value> = BTreeSet::new();
    let mut empty_config_queried = false;
    for ev in events {
        match ev {
            TraceEvent::ProposeInvoke { proposed: p, .. } => {
                proposed.insert(p.cfg.clone());
            }
            TraceEvent::RoundStart { queried, .. } => {
                if queried
                    .iter()
                    .any(|u| u.expect_config().members().is_empty())
                {
                    empty_config_queried = true;
                }
            }
            _ => {}
        }
    }
    let proposed: Vec<Value> = proposed.into_iter().collect();

    // Potential configurations: joins of the initial configuration with
    // every subset of the proposed ones.
    let mut potential: BTreeSet<Value> = BTreeSet::new();
    assert!(
        proposed.len() <= 16,
        "availability audit is meant for desk-scale runs"
    );
    for mask in 0u32..(1 << proposed.len()) {
        let subset = proposed
            .iter()
            .enumerate()
            .filter(|(i, _)| mask & (1 << i) != 0)
            .map(|(_, v)| v);
        potential.insert(
            cfg_lat
                .join_all(std::iter::once(&c0).chain(subset))
                .expect("configs from one lattice"),
        );
    }

    // A configuration is superseded once some correct process's commit
    // estimate strictly dominates it; replay each correct process's
    // deliveries to find those times.
    let mut superseded_at: BTreeMap<Value, u64> = BTreeMap::new();
    let mut estimates: BTreeMap<Pid, Value> = scenario
        .processes
        .iter()
        .filter(|s| !crashed.contains(&s.id))
        .map(|s| (s.id, c0.clone()))
        .collect();
    let mut note = |cfg: &Value, step: u64, potential: &BTreeSet<Value>, sup: &mut BTreeMap<Value, u64>| {
        for c in potential {
            if c != cfg
                && cfg_lat.leq(c, cfg).unwrap_or(false)
                && !sup.contains_key(c)
            {
                sup.insert(c.clone(), step);
            }
        }
    };
    for ev in events {
        if let TraceEvent::Deliver {
            step,
            process,
            payload,
            ..
        } = ev
        {
            if let Some(current) = estimates.get_mut(process) {
                let next = cfg_lat
                    .join(current, &payload.commit.cfg)
                    .expect("configs from one lattice");
                if &next != current {
                    *current = next.clone();
                    note(&next, *step, &potential, &mut superseded_at);
                }
            }
        }
    }

    let correct: BTreeSet<Pid> = scenario
        .processes
        .iter()
        .map(|s| s.id)
        .filter(|p| !crashed.contains(p))
        .collect();
    let mut entries = Vec::new();
    let mut violated = false;
    for c in &potential {
        let config = c.expect_config().clone();
        let has_correct_quorum = quorums(&config, &scenario.quorum_rule)
            .iter()
            .any(|q| q.is_subset(&correct));
        let superseded = superseded_at.get(c).copied();
        let compliant = superseded.is_some() || has_correct_quorum;
        violated |= !compliant;
        entries.push(ConfigAvailability {
            config,
            superseded_at: superseded,
            has_correct_quorum,
            compliant,
        });
    }
    AvailabilityReport {
        entries,
        violated,
        empty_config_queried,
    }
}

/// Executes one run under a deterministic or seeded-random scheduler.
pub fn run(cfg: &SimConfig, scenario: &Scenario) -> Result<RunRecord, SimError> {
    if cfg.scheduler == Scheduler::ExhaustiveSmall {
        return Err(SimError::ExhaustiveViaRun);
    }
    let ctx = SimCtx::new(cfg, scenario)?;
    let mut sim = Sim::new(&ctx, true);
    let status = loop {
        match sim.settle(false) {
            Progress::Quiescent => break QuiescenceStatus::Quiescent,
            Progress::Stalled => {
                break QuiescenceStatus::Stalled {
                    at_step: sim.state.step,
                }
            }
            Progress::Choices => {}
        }
        if sim.state.step >= cfg.max_steps {
            break QuiescenceStatus::MaxStepsExceeded;
        }
        let key = *sim.state.pending.keys().next().expect("pending delivery");
        sim.deliver(key.0, key.1);
    };
    Ok(sim.into_record(status))
}

/// Re-runs a scenario with growing step budgets until it settles, so a
/// slow run is not mistaken for a liveness failure.
pub fn run_with_escalation(
    cfg: &SimConfig,
    scenario: &Scenario,
    retries: u32,
) -> Result<RunRecord, SimError> {
    let mut attempt = cfg.clone();
    loop {
        let record = run(&attempt, scenario)?;
        if record.quiescence != QuiescenceStatus::MaxStepsExceeded {
            return Ok(record);
        }
        if attempt.max_steps >= cfg.max_steps.saturating_mul(10u64.pow(retries)) {
            return Ok(record);
        }
        attempt.max_steps = attempt.max_steps.saturating_mul(10);
    }
}

/// Ceilings for the exhaustive scheduler.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ExhaustiveOpts {
    /// Merge states already explored (complete state coverage). With
    /// dedup off the walk is a plain tree over schedules; feasible only
    /// for very small scenarios.
    pub dedup: bool,
    pub max_states: u64,
    pub max_depth: u64,
    /// How many terminal runs to keep as full records.
    pub keep_runs: usize,
}

impl Default for ExhaustiveOpts {
    fn default() -> Self {
        ExhaustiveOpts {
            dedup: true,
            max_states: 2_000_000,
            max_depth: 4_000,
            keep_runs: 8,
        }
    }
}

#[derive(Debug)]
pub struct Enumeration {
    /// Choice points visited (tree nodes without dedup).
    pub explored: u64,
    /// Distinct states when dedup is on.
    pub distinct_states: u64,
    /// Terminal paths reached (quiescent or stalled leaves).
    pub leaves: u64,
    pub stalled_leaves: u64,
    pub truncated: u64,
    /// First violation found on each offending path, with a replayed
    /// full record as a witness.
    pub violations: Vec<(ViolationRecord, RunRecord)>,
    /// A few terminal runs replayed in full.
    pub sample_runs: Vec<RunRecord>,
}

/// Walks every schedule of a scenario: at each point the next event is
/// any pending delivery, any issuable client operation, or the fate of
/// an orphaned broadcast. With dedup, states already seen are not
/// re-expanded, which keeps full coverage of reachable states while
/// pruning redundant interleavings.
pub fn enumerate(
    cfg: &SimConfig,
    scenario: &Scenario,
    opts: &ExhaustiveOpts,
) -> Result<Enumeration, SimError> {
    let ctx = SimCtx::new(cfg, scenario)?;
    let mut out = Enumeration {
        explored: 0,
        distinct_states: 0,
        leaves: 0,
        stalled_leaves: 0,
        truncated: 0,
        violations: Vec::new(),
        sample_runs: Vec::new(),
    };
    let mut seen: BTreeSet<[u8; 16]> = BTreeSet::new();
    // Depth-first over choice prefixes; each stack entry owns a state.
    struct Pos {
        sim: SimState,
        choices: Vec<Choice>,
        next: usize,
        path: Vec<usize>,
    }
    let root = {
        let mut sim = Sim::new(&ctx, false);
        match sim.settle(true) {
            Progress::Choices => Some(sim),
            Progress::Quiescent => {
                out.leaves += 1;
                None
            }
            Progress::Stalled => {
                out.leaves += 1;
                out.stalled_leaves += 1;
                None
            }
        }
    };
    let mut stack: Vec<Pos> = Vec::new();
    if let Some(sim) = root {
        if opts.dedup {
            seen.insert(sim.fingerprint());
        }
        stack.push(Pos {
            choices: sim.choices(),
            sim: sim.state,
            next: 0,
            path: Vec::new(),
        });
    }
    out.explored += stack.len() as u64;

    let replay = |path: &[usize]| -> Result<(RunRecord, bool), SimError> {
        let mut sim = Sim::new(&ctx, true);
        let mut ok = true;
        let mut status = QuiescenceStatus::Truncated;
        for idx in path {
            match sim.settle(true) {
                Progress::Choices => {}
                Progress::Quiescent => {
                    status = QuiescenceStatus::Quiescent;
                    ok = false;
                    break;
                }
                Progress::Stalled => {
                    status = QuiescenceStatus::Stalled {
                        at_step: sim.state.step,
                    };
                    ok = false;
                    break;
                }
            }
            let choices = sim.choices();
            sim.apply_choice(choices[*idx])?;
        }
        if ok {
            status = match sim.settle(true) {
                Progress::Choices => QuiescenceStatus::Truncated,
                Progress::Quiescent => QuiescenceStatus::Quiescent,
                Progress::Stalled => QuiescenceStatus::Stalled {
                    at_step: sim.state.step,
                },
            };
        }
        Ok((sim.into_record(status), ok))
    };

    while let Some(top) = stack.last_mut() {
        if top.next >= top.choices.len() {
            stack.pop();
            continue;
        }
        let idx = top.next;
        top.next += 1;
        let choice = top.choices[idx];
        let mut sim = Sim {
            ctx: &ctx,
            state: top.sim.clone(),
            record: false,
            events: Vec::new(),
        };
        let mut path = top.path.clone();
        path.push(idx);
        sim.apply_choice(choice)?;
        out.explored += 1;
        if out.explored > opts.max_states.saturating_mul(4) {
            return Err(SimError::CeilingExceeded(format!(
                "{} explored choice points",
                out.explored
            )));
        }
        if !sim.state.violations.is_empty() {
            // A violated path is a counterexample; replay it with full
            // recording and stop extending it.
            let violation = sim.state.violations[0].clone();
            let (record, _) = replay(&path)?;
            if out.violations.len() < 16 {
                out.violations.push((violation, record));
            } else {
                out.violations.push((violation, replay(&[])?.0));
            }
            continue;
        }
        let progress = sim.settle(true);
        match progress {
            Progress::Quiescent => {
                out.leaves += 1;
                if out.sample_runs.len() < opts.keep_runs {
                    out.sample_runs.push(replay(&path)?.0);
                }
                continue;
            }
            Progress::Stalled => {
                out.leaves += 1;
                out.stalled_leaves += 1;
                if out.sample_runs.len() < opts.keep_runs {
                    out.sample_runs.push(replay(&path)?.0);
                }
                continue;
            }
            Progress::Choices => {}
        }
        if !sim.state.violations.is_empty() {
            let violation = sim.state.violations[0].clone();
            let (record, _) = replay(&path)?;
            if out.violations.len() < 16 {
                out.violations.push((violation, record));
            }
            continue;
        }
        if path.len() as u64 >= opts.max_depth {
            out.truncated += 1;
            continue;
        }
        if opts.dedup {
            let fp = sim.fingerprint();
            if !seen.insert(fp) {
                continue;
            }
            if seen.len() as u64 > opts.max_states {
                return Err(SimError::CeilingExceeded(format!(
                    "{} distinct states",
                    seen.len()
                )));
            }
        }
        let choices = sim.choices();
        stack.push(Pos {
            sim: sim.state,
            choices,
            next: 0,
            path,
        });
    }
    out.distinct_states = seen.len() as u64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladt::Input;
    use crate::lattice::{Scalar, ScalarKind};

    fn pid(n: u32) -> Pid {
        Pid(n)
    }

    fn write(v: i64) -> AppOp {
        AppOp::Raw(Input::WriteMax(Scalar::Int(v)))
    }

    fn read() -> AppOp {
        AppOp::Raw(Input::ReadMax)
    }

    fn mr_scenario(scripts: Vec<(u32, Vec<AppOp>)>) -> Scenario {
        let mut processes = vec![
            ProcSpec { id: pid(1), client: false, replica: true },
            ProcSpec { id: pid(2), client: false, replica: true },
            ProcSpec { id: pid(3), client: false, replica: true },
        ];
        let scripts: Vec<ClientScript> = scripts
            .into_iter()
            .map(|(p, ops)| {
                processes.push(ProcSpec { id: pid(p), client: true, replica: false });
                ClientScript {
                    process: pid(p),
                    ops: ops.into_iter().map(|op| ScriptedOp { at: 0, op }).collect(),
                }
            })
            .collect();
        Scenario {
            name: "test".into(),
            object: Ladt::max_register(ScalarKind::Int),
            initial_config: ConfigState::new([pid(1), pid(2), pid(3)], []),
            processes,
            scripts,
            quorum_rule: QuorumRule::Majority,
        }
    }

    #[test]
    fn same_seed_gives_identical_records() {
        let scenario = mr_scenario(vec![(10, vec![write(5), read()]), (11, vec![write(9)])]);
        let cfg = SimConfig { seed: 42, ..SimConfig::default() };
        let a = run(&cfg, &scenario).unwrap();
        let b = run(&cfg, &scenario).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            serde_json::to_string(&a.events).unwrap(),
            serde_json::to_string(&b.events).unwrap()
        );
        let c = run(&SimConfig { seed: 43, ..cfg }, &scenario).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn fifo_uncontended_run_commits_once() {
        let scenario = mr_scenario(vec![(10, vec![write(5)])]);
        let cfg = SimConfig { scheduler: Scheduler::Fifo, ..SimConfig::default() };
        let record = run(&cfg, &scenario).unwrap();
        assert_eq!(record.quiescence, QuiescenceStatus::Quiescent);
        assert_eq!(record.committed.len(), 1);
        assert_eq!(record.learned.len(), 1);
        assert_eq!(record.learned[0].rounds, 1);
        assert!(record.violations.is_empty());
        assert!(!record.availability.violated);
    }

    #[test]
    fn learned_value_reflects_concurrent_writes() {
        let scenario = mr_scenario(vec![(10, vec![write(3), read()]), (11, vec![write(7), read()])]);
        for seed in 0..40 {
            let cfg = SimConfig { seed, ..SimConfig::default() };
            let record = run(&cfg, &scenario).unwrap();
            assert_eq!(record.quiescence, QuiescenceStatus::Quiescent, "seed {seed}");
            assert!(record.violations.is_empty(), "seed {seed}: {:?}", record.violations);
            // The final reads see the max of all committed writes.
            let reads: Vec<&TraceEvent> = record
                .events
                .iter()
                .filter(|e| matches!(e, TraceEvent::AppRespond { .. }))
                .collect();
            assert!(!reads.is_empty());
        }
    }

    #[test]
    fn crash_outside_quorum_does_not_block() {
        let scenario = mr_scenario(vec![(10, vec![write(5), read()])]);
        let cfg = SimConfig {
            seed: 7,
            fault_plan: vec![CrashDirective { process: pid(3), at_step: 0 }],
            ..SimConfig::default()
        };
        let record = run(&cfg, &scenario).unwrap();
        assert_eq!(record.quiescence, QuiescenceStatus::Quiescent);
        assert_eq!(record.learned.len(), 2);
        assert!(!record.availability.violated);
    }

    #[test]
    fn majority_crash_stalls_and_flags_availability() {
        let scenario = mr_scenario(vec![(10, vec![write(5)])]);
        let cfg = SimConfig {
            seed: 7,
            fault_plan: vec![
                CrashDirective { process: pid(2), at_step: 0 },
                CrashDirective { process: pid(3), at_step: 0 },
            ],
            ..SimConfig::default()
        };
        let record = run(&cfg, &scenario).unwrap();
        assert!(matches!(record.quiescence, QuiescenceStatus::Stalled { .. }));
        assert!(record.availability.violated);
        assert_eq!(record.unfinished.len(), 1);
    }

    #[test]
    fn crashed_client_does_not_block_others() {
        let scenario = mr_scenario(vec![(10, vec![write(5)]), (11, vec![write(9), read()])]);
        let cfg = SimConfig {
            seed: 3,
            fault_plan: vec![CrashDirective { process: pid(10), at_step: 2 }],
            ..SimConfig::default()
        };
        let record = run(&cfg, &scenario).unwrap();
        assert_eq!(record.quiescence, QuiescenceStatus::Quiescent);
        // The surviving client finished both its operations.
        let survivors: Vec<_> = record
            .learned
            .iter()
            .filter(|l| l.process == pid(11))
            .collect();
        assert_eq!(survivors.len(), 2);
        assert!(record.violations.is_empty());
    }

    #[test]
    fn exhaustive_tiny_enumeration_matches_recursive_count() {
        // One client, one replica: small enough for a full tree walk.
        let scenario = Scenario {
            name: "tiny".into(),
            object: Ladt::max_register(ScalarKind::Int),
            initial_config: ConfigState::new([pid(1)], []),
            processes: vec![
                ProcSpec { id: pid(1), client: false, replica: true },
                ProcSpec { id: pid(10), client: true, replica: false },
            ],
            scripts: vec![ClientScript {
                process: pid(10),
                ops: vec![ScriptedOp { at: 0, op: write(5) }],
            }],
            quorum_rule: QuorumRule::Majority,
        };
        let cfg = SimConfig {
            scheduler: Scheduler::ExhaustiveSmall,
            ..SimConfig::default()
        };
        let opts = ExhaustiveOpts { dedup: false, ..ExhaustiveOpts::default() };
        let result = enumerate(&cfg, &scenario, &opts).unwrap();

        // Independent count: recursively walk the same choice tree
        // without building any records.
        fn count(sim: &mut Sim<'_>) -> u64 {
            match sim.settle(true) {
                Progress::Quiescent | Progress::Stalled => return 1,
                Progress::Choices => {}
            }
            let choices = sim.choices();
            let mut total = 0;
            for c in choices {
                let mut child = Sim {
                    ctx: sim.ctx,
                    state: sim.state.clone(),
                    record: false,
                    events: Vec::new(),
                };
                child.apply_choice(c).unwrap();
                total += count(&mut child);
            }
            total
        }
        let ctx = SimCtx::new(&cfg, &scenario).unwrap();
        let mut sim = Sim::new(&ctx, false);
        let expected = count(&mut sim);
        assert_eq!(result.leaves, expected);
        assert!(result.leaves > 1);
        assert!(result.violations.is_empty());
    }

    #[test]
    fn exhaustive_dedup_covers_two_clients() {
        let scenario = mr_scenario(vec![(10, vec![write(3)]), (11, vec![write(7)])]);
        let cfg = SimConfig {
            scheduler: Scheduler::ExhaustiveSmall,
            ..SimConfig::default()
        };
        let opts = ExhaustiveOpts::default();
        let result = enumerate(&cfg, &scenario, &opts).unwrap();
        assert!(result.violations.is_empty());
        assert!(result.leaves > 0);
        assert_eq!(result.stalled_leaves, 0);
        assert!(result.distinct_states > 0);
    }

    #[test]
    fn broadcast_from_crashed_sender_is_all_or_nothing() {
        // The client commits (broadcast initiated), then crashes before
        // any delivery; exhaustive exploration takes both the drop-all
        // and deliver-all branches.
        let scenario = Scenario {
            name: "bcast".into(),
            object: Ladt::max_register(ScalarKind::Int),
            initial_config: ConfigState::new([pid(1)], []),
            processes: vec![
                ProcSpec { id: pid(1), client: false, replica: true },
                ProcSpec { id: pid(10), client: true, replica: false },
                ProcSpec { id: pid(11), client: true, replica: false },
            ],
            scripts: vec![
                ClientScript {
                    process: pid(10),
                    ops: vec![ScriptedOp { at: 0, op: write(5) }],
                },
                ClientScript {
                    process: pid(11),
                    ops: vec![ScriptedOp { at: 4, op: read() }],
                },
            ],
            quorum_rule: QuorumRule::Majority,
        };
        let cfg = SimConfig {
            scheduler: Scheduler::ExhaustiveSmall,
            fault_plan: vec![CrashDirective { process: pid(10), at_step: 3 }],
            ..SimConfig::default()
        };
        let opts = ExhaustiveOpts { keep_runs: 64, ..ExhaustiveOpts::default() };
        let result = enumerate(&cfg, &scenario, &opts).unwrap();
        let mut saw_drop = false;
        let mut saw_deliver = false;
        for record in &result.sample_runs {
            let dropped = record
                .events
                .iter()
                .any(|e| matches!(e, TraceEvent::BcastDropped { .. }));
            let commit_deliveries = record
                .events
                .iter()
                .filter(|e| matches!(e, TraceEvent::Deliver { kind: MsgKind::Commit, .. }))
                .count();
            if dropped {
                saw_drop = true;
            }
            if commit_deliveries > 0 {
                saw_deliver = true;
            }
        }
        assert!(saw_drop && saw_deliver, "both broadcast fates explored");
    }

    #[test]
    fn run_refuses_exhaustive_scheduler() {
        let scenario = mr_scenario(vec![(10, vec![write(1)])]);
        let cfg = SimConfig {
            scheduler: Scheduler::ExhaustiveSmall,
            ..SimConfig::default()
        };
        assert!(matches!(run(&cfg, &scenario), Err(SimError::ExhaustiveViaRun)));
    }

    #[test]
    fn validation_rejects_bad_scenarios() {
        let mut scenario = mr_scenario(vec![(10, vec![write(1)])]);
        scenario.initial_config.activated.insert(pid(9));
        assert!(matches!(
            run(&SimConfig::default(), &scenario),
            Err(SimError::InvalidScenario(_))
        ));

        let mut scenario = mr_scenario(vec![(10, vec![write(1)])]);
        scenario.scripts[0].process = pid(1);
        assert!(matches!(
            run(&SimConfig::default(), &scenario),
            Err(SimError::InvalidScenario(_))
        ));
    }

    #[test]
    fn reconfiguration_run_is_clean() {
        let mut scenario = mr_scenario(vec![
            (10, vec![write(5), AppOp::CfgAdd(pid(4)), read()]),
            (11, vec![AppOp::CfgRemove(pid(1)), write(9)]),
        ]);
        scenario.processes.push(ProcSpec { id: pid(4), client: false, replica: true });
        for seed in 0..40 {
            let cfg = SimConfig { seed, ..SimConfig::default() };
            let record = run(&cfg, &scenario).unwrap();
            assert_eq!(record.quiescence, QuiescenceStatus::Quiescent, "seed {seed}");
            assert!(record.violations.is_empty(), "seed {seed}: {:?}", record.violations);
            // Every learned configuration is a potential one.
            assert!(!record.availability.violated, "seed {seed}");
        }
    }
}
