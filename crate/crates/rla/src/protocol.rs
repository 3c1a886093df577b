//! The reconfigurable lattice agreement automaton.
//!
//! Every process, client or replica, runs the same event-driven state
//! machine over a triple (commit estimate, object candidate, tracked
//! input configurations). A client's `propose` runs rounds: it queries a
//! quorum of every join of its tracked configurations, merges everything
//! it hears back, and commits once a round completes without discovering
//! new configurations or object states. A committed state is broadcast
//! so that slower clients can adopt it instead of racing forever.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ladt::{quorums, QuorumRule};
use crate::lattice::{Pid, ProductElem, StateLattice, Triple, Value};

/// Message kind; requests and responses carry the round's sequence
/// number so stale responses never count toward a quorum.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum MsgKind {
    Req(u64),
    Resp(u64),
    Commit,
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MsgKind::Req(s) => write!(f, "REQ#{s}"),
            MsgKind::Resp(s) => write!(f, "RESP#{s}"),
            MsgKind::Commit => write!(f, "COMMIT"),
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Dest {
    To(Pid),
    Broadcast,
}

impl fmt::Display for Dest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dest::To(p) => write!(f, "{p}"),
            Dest::Broadcast => write!(f, "*"),
        }
    }
}

/// A protocol message: a kind tag plus the sender's full triple.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Envelope {
    pub kind: MsgKind,
    pub payload: Triple,
    pub from: Pid,
    pub to: Dest,
}

impl Envelope {
    /// Commit messages must carry an empty tracked set and an object
    /// candidate equal to the committed object state.
    pub fn commit_shaped(&self) -> bool {
        match self.kind {
            MsgKind::Commit => {
                self.payload.tracked.is_empty() && self.payload.obj == self.payload.commit.obj
            }
            _ => true,
        }
    }
}

/// Protocol-level fault injection used by the verification suites to
/// demonstrate that the checkers catch real bugs.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Mutation {
    #[default]
    None,
    /// Quorums no longer intersect: any single member suffices.
    BrokenQuorums,
    /// Merging skips the trim of superseded tracked configurations.
    SkipTrim,
    /// Commits drop the tracked configurations from the committed state.
    WrongCommitPayload,
    /// The stability guard is ignored: any completed round commits.
    DropStableGuard,
}

/// Immutable per-run context shared by all processes.
#[derive(Clone, Debug)]
pub struct ProtoCtx {
    pub lat: StateLattice,
    pub quorum_rule: QuorumRule,
    pub mutation: Mutation,
}

impl ProtoCtx {
    fn quorums_of(&self, cfg: &Value) -> Vec<BTreeSet<Pid>> {
        let config = cfg.expect_config();
        match self.mutation {
            Mutation::BrokenQuorums => config
                .members()
                .into_iter()
                .map(|p| BTreeSet::from([p]))
                .collect(),
            _ => quorums(config, &self.quorum_rule),
        }
    }
}

/// What the automaton asks its host to do after processing an event.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Effect {
    Send(Envelope),
    RoundStarted {
        op: u64,
        seq: u64,
        queried: Vec<Value>,
        recipients: Vec<Pid>,
    },
    PreCommitted {
        op: u64,
        bound: ProductElem,
    },
    CommitInitiated {
        op: u64,
        state: ProductElem,
    },
    Learned {
        op: u64,
        state: ProductElem,
        via: LearnPath,
        rounds: u64,
        interruptions: u64,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LearnPath {
    Commit,
    Adopt,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("process {0} already has a propose in flight")]
    ProposeInFlight(Pid),
    #[error(transparent)]
    Lattice(#[from] crate::lattice::LatticeError),
}

/// Outcome of evaluating the round's wait condition.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum WaitStatus {
    StillWaiting,
    /// The commit estimate's configuration advanced during the round.
    Interrupted,
    /// Every queried configuration has a full quorum of responses.
    QuorumsComplete,
}

/// Per-propose bookkeeping, reset each round.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
struct ProposeCtx {
    op: u64,
    learn_lb: Option<ProductElem>,
    old_commit: ProductElem,
    old_obj: Value,
    old_tracked: BTreeSet<Value>,
    queried: Vec<Value>,
    responders: BTreeSet<Pid>,
    rounds: u64,
    interruptions: u64,
}

/// Dynamic state of one process. All lattice context lives in
/// [`ProtoCtx`] so this struct can be cheaply cloned and fingerprinted
/// by the exhaustive scheduler.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Process {
    pub id: Pid,
    seq: u64,
    commit: ProductElem,
    obj: Value,
    tracked: BTreeSet<Value>,
    inflight: Option<ProposeCtx>,
}

impl Process {
    pub fn new(id: Pid, initial: ProductElem) -> Self {
        Process {
            id,
            seq: 0,
            obj: initial.obj.clone(),
            commit: initial,
            tracked: BTreeSet::new(),
            inflight: None,
        }
    }

    /// The process's current triple.
    pub fn triple(&self) -> Triple {
        Triple::new(self.commit.clone(), self.obj.clone(), self.tracked.clone())
    }

    pub fn commit_estimate(&self) -> &ProductElem {
        &self.commit
    }

    pub fn has_inflight(&self) -> bool {
        self.inflight.is_some()
    }

    pub fn inflight_op(&self) -> Option<u64> {
        self.inflight.as_ref().map(|ctx| ctx.op)
    }

    /// Starts a propose: merges the proposal into the local triple and
    /// runs the first round. `op` tags the resulting `Learned` effect.
    pub fn propose(
        &mut self,
        ctx: &ProtoCtx,
        op: u64,
        prop: &ProductElem,
    ) -> Result<Vec<Effect>, ProtocolError> {
        if self.inflight.is_some() {
            return Err(ProtocolError::ProposeInFlight(self.id));
        }
        let incoming = Triple::new(
            self.commit.clone(),
            prop.obj.clone(),
            BTreeSet::from([prop.cfg.clone()]),
        );
        self.update_state(ctx, &incoming);
        self.inflight = Some(ProposeCtx {
            op,
            learn_lb: None,
            old_commit: self.commit.clone(),
            old_obj: self.obj.clone(),
            old_tracked: self.tracked.clone(),
            queried: Vec::new(),
            responders: BTreeSet::new(),
            rounds: 0,
            interruptions: 0,
        });
        Ok(self.start_round(ctx))
    }

    /// Handles one delivered message: merges the payload, answers
    /// requests, and re-evaluates any round in flight.
    pub fn deliver(&mut self, ctx: &ProtoCtx, env: &Envelope) -> Vec<Effect> {
        let mut effects = Vec::new();
        self.update_state(ctx, &env.payload);
        if let MsgKind::Req(seq) = env.kind {
            effects.push(Effect::Send(Envelope {
                kind: MsgKind::Resp(seq),
                payload: self.triple(),
                from: self.id,
                to: Dest::To(env.from),
            }));
        }
        if let MsgKind::Resp(seq) = env.kind {
            if let Some(active) = &mut self.inflight {
                if seq == self.seq {
                    active.responders.insert(env.from);
                }
            }
        }
        self.drive(ctx, &mut effects);
        effects
    }

    /// Runs the wait-condition/epilogue loop until the propose either
    /// returns, or blocks waiting for more responses.
    fn drive(&mut self, ctx: &ProtoCtx, effects: &mut Vec<Effect>) {
        while let Some(status) = self.wait_status(ctx) {
            match status {
                WaitStatus::StillWaiting => break,
                other => {
                    if !self.round_epilogue(ctx, other, effects) {
                        break;
                    }
                }
            }
        }
    }

    fn wait_status(&self, ctx: &ProtoCtx) -> Option<WaitStatus> {
        let active = self.inflight.as_ref()?;
        if active.old_commit.cfg != self.commit.cfg {
            return Some(WaitStatus::Interrupted);
        }
        let complete = active.queried.iter().all(|u| {
            ctx.quorums_of(u)
                .iter()
                .any(|q| q.is_subset(&active.responders))
        });
        Some(if complete {
            WaitStatus::QuorumsComplete
        } else {
            WaitStatus::StillWaiting
        })
    }

    /// Closes a round. Returns true when another round should start
    /// immediately, false when the propose returned or must keep waiting.
    fn round_epilogue(&mut self, ctx: &ProtoCtx, status: WaitStatus, effects: &mut Vec<Effect>) -> bool {
        let lat = ctx.lat.clone();
        let active = self.inflight.as_mut().expect("round in flight");
        if status == WaitStatus::Interrupted {
            active.interruptions += 1;
        }
        let stable = active.old_commit.cfg == self.commit.cfg && active.old_tracked == self.tracked;
        let guard = match ctx.mutation {
            Mutation::DropStableGuard => status == WaitStatus::QuorumsComplete,
            _ => stable,
        };
        if guard {
            let decided = lat
                .decide(&Triple::new(
                    self.commit.clone(),
                    self.obj.clone(),
                    self.tracked.clone(),
                ))
                .expect("decide on own state");
            if active.learn_lb.is_none() {
                active.learn_lb = Some(decided.clone());
                effects.push(Effect::PreCommitted {
                    op: active.op,
                    bound: decided.clone(),
                });
            }
            let object_stable = match ctx.mutation {
                Mutation::DropStableGuard => true,
                _ => active.old_obj == self.obj,
            };
            if object_stable {
                let state = match ctx.mutation {
                    Mutation::WrongCommitPayload => {
                        ProductElem::new(self.obj.clone(), self.commit.cfg.clone())
                    }
                    _ => decided,
                };
                let op = active.op;
                let rounds = active.rounds;
                let interruptions = active.interruptions;
                effects.push(Effect::Send(Envelope {
                    kind: MsgKind::Commit,
                    payload: Triple::new(state.clone(), state.obj.clone(), BTreeSet::new()),
                    from: self.id,
                    to: Dest::Broadcast,
                }));
                effects.push(Effect::CommitInitiated {
                    op,
                    state: state.clone(),
                });
                effects.push(Effect::Learned {
                    op,
                    state,
                    via: LearnPath::Commit,
                    rounds,
                    interruptions,
                });
                self.inflight = None;
                return false;
            }
        }
        if let Some(lb) = &active.learn_lb {
            if lat.leq(lb, &self.commit).expect("comparable states") {
                effects.push(Effect::Learned {
                    op: active.op,
                    state: self.commit.clone(),
                    via: LearnPath::Adopt,
                    rounds: active.rounds,
                    interruptions: active.interruptions,
                });
                self.inflight = None;
                return false;
            }
        }
        effects.extend(self.start_round(ctx));
        // A fresh round begins with no responses, so keep driving only if
        // something already invalidates it (it cannot), i.e. stop here.
        false
    }

    /// Opens a round: archives the current estimates, computes every join
    /// of the commit configuration with subsets of the tracked set, and
    /// queries all members of those configurations.
    fn start_round(&mut self, ctx: &ProtoCtx) -> Vec<Effect> {
        self.seq += 1;
        let seq = self.seq;
        let triple = self.triple();
        let active = self.inflight.as_mut().expect("propose in flight");
        active.rounds += 1;
        active.old_commit = triple.commit.clone();
        active.old_obj = triple.obj.clone();
        active.old_tracked = triple.tracked.clone();
        active.responders.clear();

        // Joins of the commit configuration with every subset of the
        // tracked configurations, deduplicated.
        let tracked: Vec<&Value> = triple.tracked.iter().collect();
        let mut queried: BTreeSet<Value> = BTreeSet::new();
        for mask in 0u32..(1 << tracked.len()) {
            let subset = tracked
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, v)| *v);
            let joined = ctx
                .lat
                .cfg
                .join_all(std::iter::once(&triple.commit.cfg).chain(subset))
                .expect("configs from one lattice");
            queried.insert(joined);
        }
        let queried: Vec<Value> = queried.into_iter().collect();
        active.queried = queried.clone();

        let mut recipients: BTreeSet<Pid> = BTreeSet::new();
        for u in &queried {
            recipients.extend(u.expect_config().members());
        }
        let recipients: Vec<Pid> = recipients.into_iter().collect();

        let mut effects = vec![Effect::RoundStarted {
            op: active.op,
            seq,
            queried: queried.clone(),
            recipients: recipients.clone(),
        }];
        for to in &recipients {
            effects.push(Effect::Send(Envelope {
                kind: MsgKind::Req(seq),
                payload: triple.clone(),
                from: self.id,
                to: Dest::To(*to),
            }));
        }
        effects
    }

    /// Merges an incoming triple into the local one.
    fn update_state(&mut self, ctx: &ProtoCtx, incoming: &Triple) {
        let merged = ctx
            .lat
            .merge(
                &self.triple(),
                incoming,
                ctx.mutation == Mutation::SkipTrim,
            )
            .expect("states from one lattice");
        self.commit = merged.commit;
        self.obj = merged.obj;
        self.tracked = merged.tracked;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ladt::{Ladt, QuorumRule};
    use crate::lattice::{ConfigState, Lattice, Scalar, ScalarKind};

    fn pid(n: u32) -> Pid {
        Pid(n)
    }

    fn cfg(ins: &[u32], outs: &[u32]) -> Value {
        Value::Config(ConfigState::new(
            ins.iter().map(|n| pid(*n)),
            outs.iter().map(|n| pid(*n)),
        ))
    }

    fn max(v: i64) -> Value {
        Value::Max(Some(Scalar::Int(v)))
    }

    fn ctx() -> ProtoCtx {
        ProtoCtx {
            lat: StateLattice::new(Lattice::Max(ScalarKind::Int), Lattice::Config),
            quorum_rule: QuorumRule::Majority,
            mutation: Mutation::None,
        }
    }

    fn initial() -> ProductElem {
        ProductElem::new(
            Ladt::max_register(ScalarKind::Int).initial(),
            cfg(&[1, 2, 3], &[]),
        )
    }

    fn round_reqs(effects: &[Effect]) -> Vec<(Pid, u64)> {
        effects
            .iter()
            .filter_map(|e| match e {
                Effect::Send(env) => match (env.kind, env.to) {
                    (MsgKind::Req(s), Dest::To(p)) => Some((p, s)),
                    _ => None,
                },
                _ => None,
            })
            .collect()
    }

    fn resp(from: u32, seq: u64, payload: Triple) -> Envelope {
        Envelope {
            kind: MsgKind::Resp(seq),
            payload,
            from: pid(from),
            to: Dest::To(pid(10)),
        }
    }

    #[test]
    fn first_round_queries_commit_config_members() {
        let ctx = ctx();
        let mut p = Process::new(pid(10), initial());
        let effects = p
            .propose(&ctx, 1, &ProductElem::new(max(5), cfg(&[1, 2, 3], &[])))
            .unwrap();
        // Tracked set is empty after the trim, so only the base config is
        // queried and each member gets exactly one request.
        assert_eq!(
            round_reqs(&effects),
            vec![(pid(1), 1), (pid(2), 1), (pid(3), 1)]
        );
        match &effects[0] {
            Effect::RoundStarted { queried, .. } => assert_eq!(queried, &vec![cfg(&[1, 2, 3], &[])]),
            other => panic!("expected RoundStarted, got {other:?}"),
        }
    }

    #[test]
    fn powerset_of_tracked_configs_is_queried_once_each() {
        let ctx = ctx();
        let mut p = Process::new(pid(10), initial());
        // Two tracked additions produce at most four distinct joins.
        let effects = p
            .propose(&ctx, 1, &ProductElem::new(max(1), cfg(&[1, 2, 3, 4], &[])))
            .unwrap();
        let queried = match &effects[0] {
            Effect::RoundStarted { queried, .. } => queried.clone(),
            _ => unreachable!(),
        };
        assert_eq!(queried, vec![cfg(&[1, 2, 3], &[]), cfg(&[1, 2, 3, 4], &[])]);
        // Recipients are deduplicated across the overlapping configs.
        assert_eq!(round_reqs(&effects).len(), 4);
    }

    #[test]
    fn uncontended_round_commits_and_returns() {
        let ctx = ctx();
        let mut p = Process::new(pid(10), initial());
        let prop = ProductElem::new(max(5), cfg(&[1, 2, 3], &[]));
        p.propose(&ctx, 7, &prop).unwrap();
        let echo = p.triple();
        let effects = p.deliver(&ctx, &resp(1, 1, echo.clone()));
        assert!(effects.is_empty() || round_reqs(&effects).is_empty());
        let effects = p.deliver(&ctx, &resp(2, 1, echo));
        // Majority reached with no new information: pre-commit, commit
        // broadcast and the learned state all in one epilogue.
        let learned = effects.iter().find_map(|e| match e {
            Effect::Learned { state, via, rounds, .. } => Some((state.clone(), *via, *rounds)),
            _ => None,
        });
        let (state, via, rounds) = learned.expect("propose returned");
        assert_eq!(state, ProductElem::new(max(5), cfg(&[1, 2, 3], &[])));
        assert_eq!(via, LearnPath::Commit);
        assert_eq!(rounds, 1);
        let commit = effects.iter().find_map(|e| match e {
            Effect::Send(env) if env.kind == MsgKind::Commit => Some(env.clone()),
            _ => None,
        });
        let commit = commit.expect("commit broadcast");
        assert_eq!(commit.to, Dest::Broadcast);
        assert!(commit.commit_shaped());
        assert!(!p.has_inflight());
    }

    #[test]
    fn stale_responses_merge_but_do_not_count() {
        let ctx = ctx();
        let mut p = Process::new(pid(10), initial());
        p.propose(&ctx, 1, &ProductElem::new(max(5), cfg(&[1, 2, 3], &[])))
            .unwrap();
        // A response tagged with an old sequence number carries news (a
        // larger object candidate) but must not count toward the quorum.
        let stale = Triple::new(
            ProductElem::new(max(9), cfg(&[1, 2, 3], &[])),
            max(9),
            BTreeSet::new(),
        );
        let effects = p.deliver(&ctx, &resp(1, 0, stale));
        assert!(effects.iter().all(|e| !matches!(e, Effect::Learned { .. })));
        assert_eq!(p.triple().obj, max(9));
        assert!(p.has_inflight());
    }

    #[test]
    fn commit_with_larger_config_interrupts_round() {
        let ctx = ctx();
        let mut p = Process::new(pid(10), initial());
        p.propose(&ctx, 1, &ProductElem::new(max(5), cfg(&[1, 2, 3], &[])))
            .unwrap();
        let bigger = ProductElem::new(max(5), cfg(&[1, 2, 3, 4], &[]));
        let commit = Envelope {
            kind: MsgKind::Commit,
            payload: Triple::new(bigger.clone(), bigger.obj.clone(), BTreeSet::new()),
            from: pid(99),
            to: Dest::Broadcast,
        };
        let effects = p.deliver(&ctx, &commit);
        // The interrupt forces a new round against the advanced config.
        let started: Vec<_> = effects
            .iter()
            .filter(|e| matches!(e, Effect::RoundStarted { .. }))
            .collect();
        assert_eq!(started.len(), 1);
        match started[0] {
            Effect::RoundStarted { seq, queried, .. } => {
                assert_eq!(*seq, 2);
                assert_eq!(queried, &vec![cfg(&[1, 2, 3, 4], &[])]);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn grown_object_defers_commit_but_precommits() {
        let ctx = ctx();
        let mut p = Process::new(pid(10), initial());
        p.propose(&ctx, 1, &ProductElem::new(max(5), cfg(&[1, 2, 3], &[])))
            .unwrap();
        // Responses echo the request but one carries a larger object.
        let mut grown = p.triple();
        grown.obj = max(9);
        let effects_a = p.deliver(&ctx, &resp(1, 1, grown));
        assert!(round_reqs(&effects_a).is_empty());
        let effects_b = p.deliver(&ctx, &resp(2, 1, p.triple()));
        // Tracked set stable: pre-commit happens, commit deferred, a new
        // round begins.
        assert!(effects_b
            .iter()
            .any(|e| matches!(e, Effect::PreCommitted { .. })));
        assert!(!effects_b.iter().any(|e| matches!(e, Effect::Learned { .. })));
        assert!(effects_b
            .iter()
            .any(|e| matches!(e, Effect::RoundStarted { seq: 2, .. })));
    }

    #[test]
    fn adopts_commit_above_learn_lb() {
        let ctx = ctx();
        let mut p = Process::new(pid(10), initial());
        p.propose(&ctx, 1, &ProductElem::new(max(5), cfg(&[1, 2, 3], &[])))
            .unwrap();
        // Round 1: object grows mid-round, so only a pre-commit happens.
        let mut grown = p.triple();
        grown.obj = max(9);
        p.deliver(&ctx, &resp(1, 1, grown));
        let effects = p.deliver(&ctx, &resp(2, 1, p.triple()));
        assert!(effects.iter().any(|e| matches!(e, Effect::PreCommitted { .. })));
        // A commit arrives whose state is above the pre-committed bound:
        // the client adopts it without committing itself.
        let committed = ProductElem::new(max(9), cfg(&[1, 2, 3], &[]));
        let commit = Envelope {
            kind: MsgKind::Commit,
            payload: Triple::new(committed.clone(), committed.obj.clone(), BTreeSet::new()),
            from: pid(99),
            to: Dest::Broadcast,
        };
        let effects = p.deliver(&ctx, &commit);
        let learned = effects.iter().find_map(|e| match e {
            Effect::Learned { state, via, .. } => Some((state.clone(), *via)),
            _ => None,
        });
        let (state, via) = learned.expect("adopted");
        assert_eq!(state, committed);
        assert_eq!(via, LearnPath::Adopt);
    }

    #[test]
    fn replica_answers_requests_with_merged_triple() {
        let ctx = ctx();
        let mut r = Process::new(pid(1), initial());
        let req_payload = Triple::new(
            ProductElem::new(max(5), cfg(&[1, 2, 3], &[])),
            max(5),
            BTreeSet::new(),
        );
        let req = Envelope {
            kind: MsgKind::Req(4),
            payload: req_payload,
            from: pid(10),
            to: Dest::To(pid(1)),
        };
        let effects = r.deliver(&ctx, &req);
        assert_eq!(effects.len(), 1);
        match &effects[0] {
            Effect::Send(env) => {
                assert_eq!(env.kind, MsgKind::Resp(4));
                assert_eq!(env.to, Dest::To(pid(10)));
                assert_eq!(env.payload.obj, max(5));
            }
            other => panic!("unexpected effect {other:?}"),
        }
    }

    #[test]
    fn second_propose_while_inflight_is_rejected() {
        let ctx = ctx();
        let mut p = Process::new(pid(10), initial());
        p.propose(&ctx, 1, &ProductElem::new(max(5), cfg(&[1, 2, 3], &[])))
            .unwrap();
        let err = p
            .propose(&ctx, 2, &ProductElem::new(max(6), cfg(&[1, 2, 3], &[])))
            .unwrap_err();
        assert_eq!(err, ProtocolError::ProposeInFlight(pid(10)));
    }

    #[test]
    fn merge_order_does_not_matter() {
        let ctx = ctx();
        let base = initial();
        let m1 = Triple::new(
            ProductElem::new(max(3), cfg(&[1, 2, 3], &[])),
            max(3),
            BTreeSet::from([cfg(&[1, 2, 3, 4], &[])]),
        );
        let m2 = Triple::new(
            ProductElem::new(max(7), cfg(&[1, 2, 3, 4], &[])),
            max(7),
            BTreeSet::from([cfg(&[1, 2, 3, 5], &[])]),
        );
        let deliver_both = |first: &Triple, second: &Triple| {
            let mut p = Process::new(pid(1), base.clone());
            p.deliver(
                &ctx,
                &Envelope {
                    kind: MsgKind::Commit,
                    payload: first.clone(),
                    from: pid(8),
                    to: Dest::Broadcast,
                },
            );
            p.deliver(
                &ctx,
                &Envelope {
                    kind: MsgKind::Commit,
                    payload: second.clone(),
                    from: pid(9),
                    to: Dest::Broadcast,
                },
            );
            p.triple()
        };
        assert_eq!(deliver_both(&m1, &m2), deliver_both(&m2, &m1));
    }

    // Merging yields an upper bound of both the previous state and the
    // incoming triple, and trimmed entries are exactly those below the
    // merged commit configuration.
    #[test]
    fn update_state_is_upper_bound() {
        let ctx = ctx();
        let mut p = Process::new(pid(1), initial());
        let before = p.triple();
        let incoming = Triple::new(
            ProductElem::new(max(2), cfg(&[1, 2, 3, 4], &[])),
            max(2),
            BTreeSet::from([cfg(&[1, 2, 3, 5], &[])]),
        );
        p.deliver(
            &ctx,
            &Envelope {
                kind: MsgKind::Commit,
                payload: incoming.clone(),
                from: pid(9),
                to: Dest::Broadcast,
            },
        );
        let after = p.triple();
        assert!(ctx.lat.leq_star(&before, &after).unwrap());
        assert!(ctx.lat.leq_star(&incoming, &after).unwrap());
        assert!(ctx.lat.is_well_formed(&after).unwrap());
    }
}
