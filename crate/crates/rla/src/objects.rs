//! Replicated objects on top of lattice agreement.
//!
//! A client turns every object or reconfiguration operation into one
//! propose: it applies the transition function to its last learnt state,
//! proposes the result, and computes the response from the state it
//! learns back. The derived abstractions (atomic snapshot, commit-adopt,
//! safe agreement) are small scripted sequences of such operations over
//! one composed type, so a single agreement instance covers all of their
//! components and any concurrent reconfiguration.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ladt::{component_input, Input, Ladt, LadtError, Output};
use crate::lattice::{Pid, ProductElem, Scalar, Value};

/// A scripted client operation as written in scenario files.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AppOp {
    /// A raw object operation passed straight through the wrapper.
    Raw(Input),
    /// Reconfiguration: activate a replica.
    CfgAdd(Pid),
    /// Reconfiguration: remove a replica.
    CfgRemove(Pid),
    /// Atomic-snapshot update of position `i` (1-based).
    SnapUpdate(usize, i64),
    /// Atomic-snapshot scan.
    SnapScan,
    /// Commit-adopt proposal.
    CaPropose(i64),
    /// Safe-agreement proposal.
    SaPropose(i64),
}

impl fmt::Display for AppOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppOp::Raw(i) => write!(f, "{i}"),
            AppOp::CfgAdd(p) => write!(f, "add {p}"),
            AppOp::CfgRemove(p) => write!(f, "remove {p}"),
            AppOp::SnapUpdate(i, v) => write!(f, "update {i} {v}"),
            AppOp::SnapScan => write!(f, "scan"),
            AppOp::CaPropose(v) => write!(f, "ca-propose {v}"),
            AppOp::SaPropose(v) => write!(f, "sa-propose {v}"),
        }
    }
}

/// Result of a scripted operation.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum AppOutput {
    Ok,
    Out(Output),
    Snapshot(Vec<Option<i64>>),
    Ca(CaFlag, i64),
    Sa(Option<i64>),
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaFlag {
    Commit,
    Adopt,
}

impl fmt::Display for AppOutput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AppOutput::Ok => write!(f, "ok"),
            AppOutput::Out(o) => write!(f, "{o}"),
            AppOutput::Snapshot(xs) => {
                let items: Vec<String> = xs
                    .iter()
                    .map(|x| x.map_or("bot".into(), |v| v.to_string()))
                    .collect();
                write!(f, "[{}]", items.join(","))
            }
            AppOutput::Ca(CaFlag::Commit, v) => write!(f, "(commit,{v})"),
            AppOutput::Ca(CaFlag::Adopt, v) => write!(f, "(adopt,{v})"),
            AppOutput::Sa(Some(v)) => write!(f, "{v}"),
            AppOutput::Sa(None) => write!(f, "bot"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ObjectError {
    #[error("operation `{op}` is not supported by object `{object}`")]
    Unsupported { object: String, op: String },
    #[error("snapshot index {index} out of range 1..={size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("client already has an operation in flight")]
    Busy,
    #[error(transparent)]
    Ladt(#[from] LadtError),
}

/// Which component of the agreement state an operation targets.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpSide {
    Object,
    Config,
}

/// Immutable object context for one scenario: the object type and the
/// configuration type it is paired with.
#[derive(Clone, Debug)]
pub struct ObjectCtx {
    pub object: Ladt,
    pub config: Ladt,
}

impl ObjectCtx {
    pub fn new(object: Ladt) -> Self {
        ObjectCtx {
            object,
            config: Ladt::config(),
        }
    }
}

/// What the driver wants next: run one more object/config operation
/// through the agreement, or finish with an output.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum DriverStep {
    Invoke {
        side: OpSide,
        input: Input,
        proposed: ProductElem,
    },
    Done(AppOutput),
}

/// Outcome of one learnt state: the object-level output plus the next step.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LearnOutcome {
    pub output: Output,
    pub next: DriverStep,
}

/// Multi-step plans for the derived abstractions.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
enum Plan {
    Raw,
    Cfg,
    SnapRead { index: usize, value: i64 },
    SnapWrite,
    SnapScan,
    CaCheck { value: i64 },
    CaWrite { value: i64 },
    CaFlagCheck { value: i64 },
    CaAbort { value: i64 },
    CaRead { value: i64 },
    SaEnter { value: i64 },
    SaFirstRead { value: i64 },
    SaWrite,
    SaExit,
    SaReadIn,
    SaReadOut { entered: Output },
    SaFinalRead,
    SaDone { matched: bool },
}

/// Per-client object state: the last learnt object and configuration
/// states plus the plan of the operation in flight.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ClientDriver {
    pub id: Pid,
    last_obj: Value,
    last_cfg: Value,
    current: Option<(Input, OpSide, Plan)>,
}

impl ClientDriver {
    pub fn new(id: Pid, ctx: &ObjectCtx, initial_cfg: Value) -> Self {
        ClientDriver {
            id,
            last_obj: ctx.object.initial(),
            last_cfg: initial_cfg,
            current: None,
        }
    }

    pub fn last_state(&self) -> ProductElem {
        ProductElem::new(self.last_obj.clone(), self.last_cfg.clone())
    }

    pub fn busy(&self) -> bool {
        self.current.is_some()
    }

    /// Starts a scripted operation, yielding the first invocation.
    pub fn begin(&mut self, ctx: &ObjectCtx, op: &AppOp) -> Result<DriverStep, ObjectError> {
        if self.current.is_some() {
            return Err(ObjectError::Busy);
        }
        let step = match op {
            AppOp::Raw(input) => {
                if !ctx.object.accepts(input) {
                    return Err(ObjectError::Unsupported {
                        object: ctx.object.name.clone(),
                        op: input.to_string(),
                    });
                }
                self.invoke(ctx, OpSide::Object, input.clone(), Plan::Raw)?
            }
            AppOp::CfgAdd(p) => self.invoke(ctx, OpSide::Config, Input::Add(*p), Plan::Cfg)?,
            AppOp::CfgRemove(p) => {
                self.invoke(ctx, OpSide::Config, Input::Remove(*p), Plan::Cfg)?
            }
            AppOp::SnapUpdate(index, value) => {
                let size = ctx.object.read_all.ok_or_else(|| ObjectError::Unsupported {
                    object: ctx.object.name.clone(),
                    op: op.to_string(),
                })?;
                if *index < 1 || *index > size {
                    return Err(ObjectError::IndexOutOfRange {
                        index: *index,
                        size,
                    });
                }
                let read = component_input(size, *index, Input::ReadMax);
                self.invoke(
                    ctx,
                    OpSide::Object,
                    read,
                    Plan::SnapRead {
                        index: *index,
                        value: *value,
                    },
                )?
            }
            AppOp::SnapScan => {
                if ctx.object.read_all.is_none() {
                    return Err(ObjectError::Unsupported {
                        object: ctx.object.name.clone(),
                        op: op.to_string(),
                    });
                }
                self.invoke(ctx, OpSide::Object, Input::ReadAll, Plan::SnapScan)?
            }
            AppOp::CaPropose(v) => {
                let input = Input::Left(Box::new(Input::Left(Box::new(Input::CdCheck(
                    Scalar::Int(*v),
                )))));
                if !ctx.object.accepts(&input) {
                    return Err(ObjectError::Unsupported {
                        object: ctx.object.name.clone(),
                        op: op.to_string(),
                    });
                }
                self.invoke(ctx, OpSide::Object, input, Plan::CaCheck { value: *v })?
            }
            AppOp::SaPropose(v) => {
                let input = Input::Left(Box::new(Input::Left(Box::new(Input::AddSet(
                    Scalar::Proc(self.id),
                )))));
                if !ctx.object.accepts(&input) {
                    return Err(ObjectError::Unsupported {
                        object: ctx.object.name.clone(),
                        op: op.to_string(),
                    });
                }
                self.invoke(ctx, OpSide::Object, input, Plan::SaEnter { value: *v })?
            }
        };
        Ok(step)
    }

    /// Advances the plan with a freshly learnt state.
    pub fn on_learned(
        &mut self,
        ctx: &ObjectCtx,
        learned: ProductElem,
    ) -> Result<LearnOutcome, ObjectError> {
        let (input, side, plan) = self.current.take().expect("operation in flight");
        self.last_obj = learned.obj;
        self.last_cfg = learned.cfg;
        // The response comes from the learnt state, not the proposed one.
        let output = match side {
            OpSide::Object => ctx.object.output(&self.last_obj, &input)?,
            OpSide::Config => Output::Bot,
        };
        let next = self.next_step(ctx, plan, &output)?;
        Ok(LearnOutcome { output, next })
    }

    fn next_step(
        &mut self,
        ctx: &ObjectCtx,
        plan: Plan,
        output: &Output,
    ) -> Result<DriverStep, ObjectError> {
        let done = |out: AppOutput| Ok(DriverStep::Done(out));
        match plan {
            Plan::Raw => done(AppOutput::Out(output.clone())),
            Plan::Cfg => done(AppOutput::Ok),
            Plan::SnapRead { index, value } => {
                let size = ctx.object.read_all.expect("snapshot object");
                let seq = match output {
                    Output::Val(Value::Max(Some(Scalar::Seq(s, _, _)))) => *s,
                    Output::Val(Value::Max(None)) => 0,
                    other => {
                        return Err(ObjectError::Unsupported {
                            object: ctx.object.name.clone(),
                            op: format!("unexpected read result {other}"),
                        })
                    }
                };
                let write = component_input(
                    size,
                    index,
                    Input::WriteMax(Scalar::Seq(seq + 1, value, self.id)),
                );
                self.invoke(ctx, OpSide::Object, write, Plan::SnapWrite)
            }
            Plan::SnapWrite => done(AppOutput::Ok),
            Plan::SnapScan => {
                let comps = match output {
                    Output::Vector(xs) => xs.clone(),
                    other => {
                        return Err(ObjectError::Unsupported {
                            object: ctx.object.name.clone(),
                            op: format!("unexpected scan result {other}"),
                        })
                    }
                };
                let values = comps
                    .iter()
                    .map(|c| match c {
                        Value::Max(Some(Scalar::Seq(_, v, _))) => Some(*v),
                        _ => None,
                    })
                    .collect();
                done(AppOutput::Snapshot(values))
            }
            Plan::CaCheck { value } => match output {
                Output::Bool(false) => {
                    // No conflict: publish the proposal, then consult the flag.
                    let write = Input::Left(Box::new(Input::Right(Box::new(Input::WriteMax(
                        Scalar::Int(value),
                    )))));
                    self.invoke(ctx, OpSide::Object, write, Plan::CaWrite { value })
                }
                Output::Bool(true) => {
                    let abort = Input::Right(Box::new(Input::Abort));
                    self.invoke(ctx, OpSide::Object, abort, Plan::CaAbort { value })
                }
                other => Err(ObjectError::Unsupported {
                    object: ctx.object.name.clone(),
                    op: format!("unexpected conflict verdict {other}"),
                }),
            },
            Plan::CaWrite { value } => {
                let check = Input::Right(Box::new(Input::AfCheck));
                self.invoke(ctx, OpSide::Object, check, Plan::CaFlagCheck { value })
            }
            Plan::CaFlagCheck { value } => match output {
                Output::Val(Value::Flag(true)) => done(AppOutput::Ca(CaFlag::Adopt, value)),
                Output::Val(Value::Flag(false)) => done(AppOutput::Ca(CaFlag::Commit, value)),
                other => Err(ObjectError::Unsupported {
                    object: ctx.object.name.clone(),
                    op: format!("unexpected flag state {other}"),
                }),
            },
            Plan::CaAbort { value } => {
                let read = Input::Left(Box::new(Input::Right(Box::new(Input::ReadMax))));
                self.invoke(ctx, OpSide::Object, read, Plan::CaRead { value })
            }
            Plan::CaRead { value } => match output {
                Output::Val(Value::Max(None)) => done(AppOutput::Ca(CaFlag::Adopt, value)),
                Output::Val(Value::Max(Some(Scalar::Int(w)))) => {
                    done(AppOutput::Ca(CaFlag::Adopt, *w))
                }
                other => Err(ObjectError::Unsupported {
                    object: ctx.object.name.clone(),
                    op: format!("unexpected register state {other}"),
                }),
            },
            Plan::SaEnter { value } => {
                let read = Input::Right(Box::new(Input::ReadMax));
                self.invoke(ctx, OpSide::Object, read, Plan::SaFirstRead { value })
            }
            Plan::SaFirstRead { value } => match output {
                Output::Val(Value::Max(None)) => {
                    let write = Input::Right(Box::new(Input::WriteMax(Scalar::Int(value))));
                    self.invoke(ctx, OpSide::Object, write, Plan::SaWrite)
                }
                Output::Val(Value::Max(Some(_))) => self.sa_exit(ctx),
                other => Err(ObjectError::Unsupported {
                    object: ctx.object.name.clone(),
                    op: format!("unexpected register state {other}"),
                }),
            },
            Plan::SaWrite => self.sa_exit(ctx),
            Plan::SaExit => {
                let read_in = Input::Left(Box::new(Input::Left(Box::new(Input::ReadSet))));
                self.invoke(ctx, OpSide::Object, read_in, Plan::SaReadIn)
            }
            Plan::SaReadIn => {
                let read_out = Input::Left(Box::new(Input::Right(Box::new(Input::ReadSet))));
                self.invoke(
                    ctx,
                    OpSide::Object,
                    read_out,
                    Plan::SaReadOut {
                        entered: output.clone(),
                    },
                )
            }
            Plan::SaReadOut { entered } => {
                if &entered == output {
                    let read = Input::Right(Box::new(Input::ReadMax));
                    self.invoke(ctx, OpSide::Object, read, Plan::SaFinalRead)
                } else {
                    self.next_step(ctx, Plan::SaDone { matched: false }, output)
                }
            }
            Plan::SaFinalRead => match output {
                Output::Val(Value::Max(Some(Scalar::Int(v)))) => done(AppOutput::Sa(Some(*v))),
                Output::Val(Value::Max(None)) => done(AppOutput::Sa(None)),
                other => Err(ObjectError::Unsupported {
                    object: ctx.object.name.clone(),
                    op: format!("unexpected register state {other}"),
                }),
            },
            Plan::SaDone { matched } => {
                debug_assert!(!matched);
                done(AppOutput::Sa(None))
            }
        }
    }

    fn sa_exit(&mut self, ctx: &ObjectCtx) -> Result<DriverStep, ObjectError> {
        let exit = Input::Left(Box::new(Input::Right(Box::new(Input::AddSet(
            Scalar::Proc(self.id),
        )))));
        self.invoke(ctx, OpSide::Object, exit, Plan::SaExit)
    }

    /// Builds the proposed state for one operation: apply the transition
    /// to the last learnt state on the relevant side, keep the other side.
    fn invoke(
        &mut self,
        ctx: &ObjectCtx,
        side: OpSide,
        input: Input,
        plan: Plan,
    ) -> Result<DriverStep, ObjectError> {
        let proposed = match side {
            OpSide::Object => ProductElem::new(
                ctx.object.transition(&self.last_obj, &input)?,
                self.last_cfg.clone(),
            ),
            OpSide::Config => ProductElem::new(
                self.last_obj.clone(),
                ctx.config.transition(&self.last_cfg, &input)?,
            ),
        };
        self.current = Some((input.clone(), side, plan));
        Ok(DriverStep::Invoke {
            side,
            input,
            proposed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{ConfigState, ScalarKind};

    fn cfg0() -> Value {
        Value::Config(ConfigState::new([Pid(1), Pid(2), Pid(3)], []))
    }

    /// Feeds the driver, pretending agreement simply accepts whatever was
    /// proposed (a solo client against responsive replicas).
    fn run_solo(ctx: &ObjectCtx, driver: &mut ClientDriver, op: &AppOp) -> AppOutput {
        let mut step = driver.begin(ctx, op).unwrap();
        loop {
            match step {
                DriverStep::Invoke { proposed, .. } => {
                    let outcome = driver.on_learned(ctx, proposed).unwrap();
                    step = outcome.next;
                }
                DriverStep::Done(out) => return out,
            }
        }
    }

    #[test]
    fn max_register_write_then_read() {
        let ctx = ObjectCtx::new(Ladt::max_register(ScalarKind::Int));
        let mut driver = ClientDriver::new(Pid(10), &ctx, cfg0());
        let out = run_solo(&ctx, &mut driver, &AppOp::Raw(Input::WriteMax(Scalar::Int(5))));
        assert_eq!(out, AppOutput::Out(Output::Bot));
        let out = run_solo(&ctx, &mut driver, &AppOp::Raw(Input::ReadMax));
        assert_eq!(
            out,
            AppOutput::Out(Output::Val(Value::Max(Some(Scalar::Int(5)))))
        );
    }

    #[test]
    fn reconfiguration_keeps_object_state() {
        let ctx = ObjectCtx::new(Ladt::max_register(ScalarKind::Int));
        let mut driver = ClientDriver::new(Pid(10), &ctx, cfg0());
        run_solo(&ctx, &mut driver, &AppOp::Raw(Input::WriteMax(Scalar::Int(5))));
        let out = run_solo(&ctx, &mut driver, &AppOp::CfgAdd(Pid(4)));
        assert_eq!(out, AppOutput::Ok);
        let members = driver.last_state().cfg.expect_config().members();
        assert!(members.contains(&Pid(4)));
        let out = run_solo(&ctx, &mut driver, &AppOp::Raw(Input::ReadMax));
        assert_eq!(
            out,
            AppOutput::Out(Output::Val(Value::Max(Some(Scalar::Int(5)))))
        );
    }

    #[test]
    fn snapshot_update_then_scan() {
        let ctx = ObjectCtx::new(Ladt::mrset(3));
        let mut driver = ClientDriver::new(Pid(10), &ctx, cfg0());
        let out = run_solo(&ctx, &mut driver, &AppOp::SnapUpdate(1, 42));
        assert_eq!(out, AppOutput::Ok);
        let out = run_solo(&ctx, &mut driver, &AppOp::SnapScan);
        assert_eq!(out, AppOutput::Snapshot(vec![Some(42), None, None]));
    }

    #[test]
    fn snapshot_index_out_of_range() {
        let ctx = ObjectCtx::new(Ladt::mrset(2));
        let mut driver = ClientDriver::new(Pid(10), &ctx, cfg0());
        let err = driver.begin(&ctx, &AppOp::SnapUpdate(3, 1)).unwrap_err();
        assert!(matches!(err, ObjectError::IndexOutOfRange { .. }));
    }

    #[test]
    fn commit_adopt_solo_commits_own_value() {
        let ctx = ObjectCtx::new(Ladt::commit_adopt());
        let mut driver = ClientDriver::new(Pid(10), &ctx, cfg0());
        let out = run_solo(&ctx, &mut driver, &AppOp::CaPropose(7));
        assert_eq!(out, AppOutput::Ca(CaFlag::Commit, 7));
    }

    #[test]
    fn safe_agreement_solo_returns_own_value() {
        let ctx = ObjectCtx::new(Ladt::safe_agreement());
        let mut driver = ClientDriver::new(Pid(10), &ctx, cfg0());
        let out = run_solo(&ctx, &mut driver, &AppOp::SaPropose(3));
        assert_eq!(out, AppOutput::Sa(Some(3)));
    }

    #[test]
    fn raw_op_must_match_object() {
        let ctx = ObjectCtx::new(Ladt::max_register(ScalarKind::Int));
        let mut driver = ClientDriver::new(Pid(10), &ctx, cfg0());
        let err = driver
            .begin(&ctx, &AppOp::Raw(Input::AddSet(Scalar::Int(1))))
            .unwrap_err();
        assert!(matches!(err, ObjectError::Unsupported { .. }));
    }
}
