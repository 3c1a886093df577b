//! Lattice abstract data types: state machines whose states form a join
//! semilattice and whose transitions are monotone and commute through the
//! join. Includes the built-in instances (max-register, add-only set,
//! abort flag, conflict detector, replica configuration), binary
//! composition, the update/query classification and the
//! interval-sequential specification derived from the transition
//! function.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lattice::{
    CdState, ConfigState, Lattice, LatticeError, Pid, Scalar, ScalarKind, Value,
};

/// An operation together with its arguments. `Left`/`Right` inject
/// operations into the corresponding component of a composed type.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Input {
    WriteMax(Scalar),
    ReadMax,
    AddSet(Scalar),
    ReadSet,
    Abort,
    AfCheck,
    CdCheck(Scalar),
    Add(Pid),
    Remove(Pid),
    /// Query over every component of an n-fold register product.
    ReadAll,
    Left(Box<Input>),
    Right(Box<Input>),
}

impl fmt::Display for Input {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Input::WriteMax(v) => write!(f, "writeMax({v})"),
            Input::ReadMax => write!(f, "readMax"),
            Input::AddSet(v) => write!(f, "addSet({v})"),
            Input::ReadSet => write!(f, "readSet"),
            Input::Abort => write!(f, "abort"),
            Input::AfCheck => write!(f, "check"),
            Input::CdCheck(v) => write!(f, "check({v})"),
            Input::Add(p) => write!(f, "add({p})"),
            Input::Remove(p) => write!(f, "remove({p})"),
            Input::ReadAll => write!(f, "readAll"),
            Input::Left(i) => write!(f, "L.{i}"),
            Input::Right(i) => write!(f, "R.{i}"),
        }
    }
}

/// Operation result. Updates return the uninformative `Bot`; queries
/// return a lattice value, a conflict verdict or a component vector.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum Output {
    Bot,
    Val(Value),
    Bool(bool),
    Vector(Vec<Value>),
}

impl fmt::Display for Output {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Output::Bot => write!(f, "bot"),
            Output::Val(v) => write!(f, "{v}"),
            Output::Bool(b) => write!(f, "{b}"),
            Output::Vector(xs) => {
                let items: Vec<String> = xs.iter().map(|v| v.to_string()).collect();
                write!(f, "[{}]", items.join(","))
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LadtError {
    #[error("input `{input}` is outside the alphabet of `{ladt}`")]
    InputOutsideAlphabet { ladt: String, input: String },
    #[error("state error in `{ladt}`: {source}")]
    State {
        ladt: String,
        #[source]
        source: LatticeError,
    },
    #[error("malformed interval-sequential history: {0}")]
    MalformedHistory(String),
    #[error("unknown type id `{0}`")]
    UnknownType(String),
}

/// Structural description of a type: the base instances plus binary
/// products built by [`Ladt::compose`].
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Shape {
    MaxRegister(ScalarKind),
    AddSet(ScalarKind),
    AbortFlag,
    ConflictDetector(ScalarKind),
    Config,
    Product(Box<Shape>, Box<Shape>),
}

impl Shape {
    fn lattice(&self) -> Lattice {
        match self {
            Shape::MaxRegister(k) => Lattice::Max(*k),
            Shape::AddSet(k) => Lattice::Set(*k),
            Shape::AbortFlag => Lattice::Flag,
            Shape::ConflictDetector(k) => Lattice::Cd(*k),
            Shape::Config => Lattice::Config,
            Shape::Product(l, r) => Lattice::Product(Box::new(l.lattice()), Box::new(r.lattice())),
        }
    }
}

/// A lattice abstract data type: input alphabet, output alphabet, state
/// lattice with initial element, and the transition/output functions.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Ladt {
    pub name: String,
    pub shape: Shape,
    /// When set to `m`, the type is an m-fold register product enriched
    /// with the `ReadAll` query over its components.
    pub read_all: Option<usize>,
}

impl Ladt {
    pub fn max_register(kind: ScalarKind) -> Ladt {
        Ladt {
            name: "max-register".into(),
            shape: Shape::MaxRegister(kind),
            read_all: None,
        }
    }

    pub fn add_set(kind: ScalarKind) -> Ladt {
        Ladt {
            name: "set".into(),
            shape: Shape::AddSet(kind),
            read_all: None,
        }
    }

    pub fn abort_flag() -> Ladt {
        Ladt {
            name: "abort-flag".into(),
            shape: Shape::AbortFlag,
            read_all: None,
        }
    }

    pub fn conflict_detector(kind: ScalarKind) -> Ladt {
        Ladt {
            name: "conflict-detector".into(),
            shape: Shape::ConflictDetector(kind),
            read_all: None,
        }
    }

    pub fn config() -> Ladt {
        Ladt {
            name: "config".into(),
            shape: Shape::Config,
            read_all: None,
        }
    }

    /// Composition: disjoint-union inputs, product state lattice,
    /// componentwise transition and output functions.
    pub fn compose(left: Ladt, right: Ladt) -> Ladt {
        Ladt {
            name: format!("({}x{})", left.name, right.name),
            shape: Shape::Product(Box::new(left.shape), Box::new(right.shape)),
            read_all: None,
        }
    }

    /// m-fold product of sequence-numbered max-registers enriched with
    /// the `ReadAll` query returning the vector of component states.
    pub fn mrset(m: usize) -> Ladt {
        assert!(m >= 1, "mrset needs at least one component");
        let mut shape = Shape::MaxRegister(ScalarKind::Seq);
        for _ in 1..m {
            shape = Shape::Product(Box::new(shape), Box::new(Shape::MaxRegister(ScalarKind::Seq)));
        }
        Ladt {
            name: format!("mrset:{m}"),
            shape,
            read_all: Some(m),
        }
    }

    /// Composed object backing the commit-adopt construction:
    /// a conflict detector, a max-register and an abort flag.
    pub fn commit_adopt() -> Ladt {
        let mut l = Ladt::compose(
            Ladt::conflict_detector(ScalarKind::Int),
            Ladt::max_register(ScalarKind::Int),
        );
        l = Ladt::compose(l, Ladt::abort_flag());
        l.name = "commit-adopt".into();
        l
    }

    /// Composed object backing the safe-agreement construction:
    /// doorway entry/exit sets and a max-register.
    pub fn safe_agreement() -> Ladt {
        let mut l = Ladt::compose(
            Ladt::add_set(ScalarKind::Proc),
            Ladt::add_set(ScalarKind::Proc),
        );
        l = Ladt::compose(l, Ladt::max_register(ScalarKind::Int));
        l.name = "safe-agreement".into();
        l
    }

    /// Resolves a type id as used in scenario files.
    pub fn by_name(id: &str) -> Result<Ladt, LadtError> {
        match id {
            "max-register" => Ok(Ladt::max_register(ScalarKind::Int)),
            "set" => Ok(Ladt::add_set(ScalarKind::Int)),
            "abort-flag" => Ok(Ladt::abort_flag()),
            "conflict-detector" => Ok(Ladt::conflict_detector(ScalarKind::Int)),
            "config" => Ok(Ladt::config()),
            "commit-adopt" => Ok(Ladt::commit_adopt()),
            "safe-agreement" => Ok(Ladt::safe_agreement()),
            _ => {
                if let Some(m) = id.strip_prefix("mrset:") {
                    let m: usize = m
                        .parse()
                        .map_err(|_| LadtError::UnknownType(id.to_string()))?;
                    if m == 0 {
                        return Err(LadtError::UnknownType(id.to_string()));
                    }
                    return Ok(Ladt::mrset(m));
                }
                Err(LadtError::UnknownType(id.to_string()))
            }
        }
    }

    pub fn state_lattice(&self) -> Lattice {
        self.shape.lattice()
    }

    pub fn initial(&self) -> Value {
        self.state_lattice().bottom()
    }

    /// Whether `input` belongs to this type's alphabet.
    pub fn accepts(&self, input: &Input) -> bool {
        if matches!(input, Input::ReadAll) {
            return self.read_all.is_some();
        }
        shape_accepts(&self.shape, input)
    }

    /// True for inputs that may change the state and return the dummy
    /// output, false for queries; conflict-detector checks are neither.
    pub fn is_update(&self, input: &Input) -> bool {
        match input {
            Input::WriteMax(_) | Input::AddSet(_) | Input::Abort | Input::Add(_) | Input::Remove(_) => true,
            Input::Left(i) | Input::Right(i) => self_is_update(i),
            _ => false,
        }
    }

    pub fn is_query(&self, input: &Input) -> bool {
        match input {
            Input::ReadMax | Input::ReadSet | Input::AfCheck | Input::ReadAll => true,
            Input::Left(i) | Input::Right(i) => self_is_query(i),
            _ => false,
        }
    }

    /// An update-query type partitions its alphabet into state-only
    /// updates and read-only queries. The conflict detector's check is
    /// neither, which excludes it (and anything composed with it).
    pub fn is_update_query(&self) -> bool {
        shape_update_query(&self.shape)
    }

    /// The transition function.
    pub fn transition(&self, z: &Value, input: &Input) -> Result<Value, LadtError> {
        self.guard(z, input)?;
        Ok(shape_transition(&self.shape, z, input))
    }

    /// The output function, evaluated at `z`.
    pub fn output(&self, z: &Value, input: &Input) -> Result<Output, LadtError> {
        self.guard(z, input)?;
        if matches!(input, Input::ReadAll) {
            let m = self.read_all.unwrap();
            return Ok(Output::Vector(collect_components(z, m)));
        }
        Ok(shape_output(&self.shape, z, input))
    }

    /// Applies an input: returns the post state together with the output
    /// evaluated on the post state, which is the convention the
    /// replicated object wrapper uses. Callers needing the output at a
    /// different state can call [`Ladt::output`] directly.
    pub fn apply(&self, z: &Value, input: &Input) -> Result<(Value, Output), LadtError> {
        let next = self.transition(z, input)?;
        let out = self.output(&next, input)?;
        Ok((next, out))
    }

    fn guard(&self, z: &Value, input: &Input) -> Result<(), LadtError> {
        if !self.accepts(input) {
            return Err(LadtError::InputOutsideAlphabet {
                ladt: self.name.clone(),
                input: input.to_string(),
            });
        }
        if !self.state_lattice().contains(z) {
            return Err(LadtError::State {
                ladt: self.name.clone(),
                source: LatticeError::Mismatch {
                    lattice: self.state_lattice().to_string(),
                    value: z.to_tagged(),
                },
            });
        }
        Ok(())
    }

    /// Every input of this type over the given scalar values and replica
    /// ids; used by the property suites that sweep small domains.
    pub fn enumerate_inputs(&self, values: &[Scalar], replicas: &[Pid]) -> Vec<Input> {
        let mut out = shape_inputs(&self.shape, values, replicas);
        if self.read_all.is_some() {
            out.push(Input::ReadAll);
        }
        out
    }

    /// States reachable from the initial state under the given inputs,
    /// capped at `limit` states; used by the property suites.
    pub fn reachable_states(&self, inputs: &[Input], limit: usize) -> Vec<Value> {
        let mut seen: BTreeSet<Value> = BTreeSet::new();
        let mut frontier = vec![self.initial()];
        seen.insert(self.initial());
        while let Some(z) = frontier.pop() {
            if seen.len() >= limit {
                break;
            }
            for a in inputs {
                if let Ok(next) = self.transition(&z, a) {
                    if seen.insert(next.clone()) {
                        frontier.push(next);
                    }
                }
            }
        }
        seen.into_iter().collect()
    }
}

fn self_is_update(input: &Input) -> bool {
    match input {
        Input::WriteMax(_) | Input::AddSet(_) | Input::Abort | Input::Add(_) | Input::Remove(_) => true,
        Input::Left(i) | Input::Right(i) => self_is_update(i),
        _ => false,
    }
}

fn self_is_query(input: &Input) -> bool {
    match input {
        Input::ReadMax | Input::ReadSet | Input::AfCheck | Input::ReadAll => true,
        Input::Left(i) | Input::Right(i) => self_is_query(i),
        _ => false,
    }
}

fn shape_update_query(shape: &Shape) -> bool {
    match shape {
        Shape::ConflictDetector(_) => false,
        Shape::Product(l, r) => shape_update_query(l) && shape_update_query(r),
        _ => true,
    }
}

fn shape_accepts(shape: &Shape, input: &Input) -> bool {
    match (shape, input) {
        (Shape::MaxRegister(k), Input::WriteMax(s)) => s.kind() == *k,
        (Shape::MaxRegister(_), Input::ReadMax) => true,
        (Shape::AddSet(k), Input::AddSet(s)) => s.kind() == *k,
        (Shape::AddSet(_), Input::ReadSet) => true,
        (Shape::AbortFlag, Input::Abort | Input::AfCheck) => true,
        (Shape::ConflictDetector(k), Input::CdCheck(s)) => s.kind() == *k,
        (Shape::Config, Input::Add(_) | Input::Remove(_)) => true,
        (Shape::Product(l, _), Input::Left(i)) => shape_accepts(l, i),
        (Shape::Product(_, r), Input::Right(i)) => shape_accepts(r, i),
        _ => false,
    }
}

fn shape_transition(shape: &Shape, z: &Value, input: &Input) -> Value {
    match (shape, z, input) {
        (Shape::MaxRegister(_), Value::Max(m), Input::WriteMax(s)) => Value::Max((*m).max(Some(*s))),
        (Shape::MaxRegister(_), _, Input::ReadMax) => z.clone(),
        (Shape::AddSet(_), Value::Set(xs), Input::AddSet(s)) => {
            let mut out = xs.clone();
            out.insert(*s);
            Value::Set(out)
        }
        (Shape::AddSet(_), _, Input::ReadSet) => z.clone(),
        (Shape::AbortFlag, _, Input::Abort) => Value::Flag(true),
        (Shape::AbortFlag, _, Input::AfCheck) => z.clone(),
        (Shape::ConflictDetector(_), Value::Cd(c), Input::CdCheck(v)) => Value::Cd(match c {
            CdState::Bot => CdState::Val(*v),
            CdState::Val(w) if w == v => CdState::Val(*w),
            _ => CdState::Top,
        }),
        (Shape::Config, Value::Config(c), Input::Add(p)) => {
            let mut out = c.clone();
            out.activated.insert(*p);
            Value::Config(out)
        }
        (Shape::Config, Value::Config(c), Input::Remove(p)) => {
            let mut out = c.clone();
            out.removed.insert(*p);
            Value::Config(out)
        }
        (Shape::Product(l, _), Value::Pair(a, b), Input::Left(i)) => {
            Value::Pair(Box::new(shape_transition(l, a, i)), b.clone())
        }
        (Shape::Product(_, r), Value::Pair(a, b), Input::Right(i)) => {
            Value::Pair(a.clone(), Box::new(shape_transition(r, b, i)))
        }
        // ReadAll and any other query leave the state unchanged.
        _ => z.clone(),
    }
}

fn shape_output(shape: &Shape, z: &Value, input: &Input) -> Output {
    match (shape, z, input) {
        (Shape::MaxRegister(_), _, Input::ReadMax) => Output::Val(z.clone()),
        (Shape::AddSet(_), _, Input::ReadSet) => Output::Val(z.clone()),
        // Raising the flag reports the raised state; it is constant, so
        // it still counts as the dummy update response.
        (Shape::AbortFlag, _, Input::Abort) => Output::Val(Value::Flag(true)),
        (Shape::AbortFlag, _, Input::AfCheck) => Output::Val(z.clone()),
        (Shape::ConflictDetector(_), Value::Cd(c), Input::CdCheck(_)) => {
            Output::Bool(matches!(c, CdState::Top))
        }
        (Shape::Product(l, _), Value::Pair(a, _), Input::Left(i)) => shape_output(l, a, i),
        (Shape::Product(_, r), Value::Pair(_, b), Input::Right(i)) => shape_output(r, b, i),
        _ => Output::Bot,
    }
}

/// Components of a left-nested m-fold product, in positional order.
fn collect_components(z: &Value, m: usize) -> Vec<Value> {
    let mut out = Vec::with_capacity(m);
    fn walk(z: &Value, remaining: usize, out: &mut Vec<Value>) {
        if remaining == 1 {
            out.push(z.clone());
            return;
        }
        match z {
            Value::Pair(l, r) => {
                walk(l, remaining - 1, out);
                out.push((**r).clone());
            }
            _ => out.push(z.clone()),
        }
    }
    walk(z, m, &mut out);
    out
}

/// Wraps an input so it addresses component `i` (1-based) of an m-fold
/// left-nested product.
pub fn component_input(m: usize, i: usize, inner: Input) -> Input {
    assert!(i >= 1 && i <= m, "component index out of range");
    if m == 1 {
        inner
    } else if i == m {
        Input::Right(Box::new(inner))
    } else {
        Input::Left(Box::new(component_input(m - 1, i, inner)))
    }
}

fn shape_inputs(shape: &Shape, values: &[Scalar], replicas: &[Pid]) -> Vec<Input> {
    match shape {
        Shape::MaxRegister(k) => {
            let mut out: Vec<Input> = values
                .iter()
                .filter(|s| s.kind() == *k)
                .map(|s| Input::WriteMax(*s))
                .collect();
            out.push(Input::ReadMax);
            out
        }
        Shape::AddSet(k) => {
            let mut out: Vec<Input> = values
                .iter()
                .filter(|s| s.kind() == *k)
                .map(|s| Input::AddSet(*s))
                .collect();
            out.push(Input::ReadSet);
            out
        }
        Shape::AbortFlag => vec![Input::Abort, Input::AfCheck],
        Shape::ConflictDetector(k) => values
            .iter()
            .filter(|s| s.kind() == *k)
            .map(|s| Input::CdCheck(*s))
            .collect(),
        Shape::Config => {
            let mut out = Vec::new();
            for p in replicas {
                out.push(Input::Add(*p));
                out.push(Input::Remove(*p));
            }
            out
        }
        Shape::Product(l, r) => {
            let mut out: Vec<Input> = shape_inputs(l, values, replicas)
                .into_iter()
                .map(|i| Input::Left(Box::new(i)))
                .collect();
            out.extend(
                shape_inputs(r, values, replicas)
                    .into_iter()
                    .map(|i| Input::Right(Box::new(i))),
            );
            out
        }
    }
}

/// How quorums are derived from a configuration's members. The default
/// takes all majorities; scenarios may pin explicit quorum sets for
/// specific configurations (unlisted ones fall back to majorities).
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize, Default)]
pub enum QuorumRule {
    #[default]
    Majority,
    Explicit(Vec<ExplicitQuorums>),
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct ExplicitQuorums {
    pub config: ConfigState,
    pub quorums: Vec<BTreeSet<Pid>>,
}

/// All quorums of a configuration under the given rule. An empty
/// membership yields no quorums at all, which makes the configuration
/// unusable; the simulator flags runs that query such a configuration.
pub fn quorums(config: &ConfigState, rule: &QuorumRule) -> Vec<BTreeSet<Pid>> {
    if let QuorumRule::Explicit(entries) = rule {
        if let Some(entry) = entries.iter().find(|e| &e.config == config) {
            return entry.quorums.clone();
        }
    }
    majorities(&config.members())
}

/// All subsets of `members` strictly larger than half of them.
pub fn majorities(members: &BTreeSet<Pid>) -> Vec<BTreeSet<Pid>> {
    let ids: Vec<Pid> = members.iter().copied().collect();
    let n = ids.len();
    assert!(n <= 20, "majority enumeration is meant for desk-scale memberships");
    let mut out = Vec::new();
    for mask in 0u32..(1 << n) {
        let size = mask.count_ones() as usize;
        if 2 * size > n {
            out.push(
                ids.iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, p)| *p)
                    .collect(),
            );
        }
    }
    out.sort();
    out
}

/// Checks that every two quorums intersect.
pub fn quorums_intersect(quorums: &[BTreeSet<Pid>]) -> bool {
    for (i, a) in quorums.iter().enumerate() {
        for b in &quorums[i + 1..] {
            if a.is_disjoint(b) {
                return false;
            }
        }
    }
    true
}

/// One block of an interval-sequential history: a set of invocations,
/// a set of responses and the state reached after the invocations.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct IntervalBlock {
    pub invocations: Vec<(u64, Input)>,
    pub responses: Vec<(u64, Output)>,
    pub state: Value,
}

/// An interval-sequential history `z0, I1, R1, z1, ..., Im, Rm, zm`.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct IntervalHistory {
    pub initial: Value,
    pub blocks: Vec<IntervalBlock>,
}

/// Checks a history against the type's interval-sequential
/// specification: each state must be the join of the block's transitions
/// applied to the previous state, and each response must equal the
/// output of its matching invocation evaluated at the block's state.
///
/// Malformed histories (responses without a matching earlier invocation,
/// duplicate operation ids) are an error rather than a rejection.
pub fn interval_sequential_check(ladt: &Ladt, h: &IntervalHistory) -> Result<bool, LadtError> {
    let lattice = ladt.state_lattice();
    let mut invoked: std::collections::BTreeMap<u64, Input> = Default::default();
    let mut responded: BTreeSet<u64> = BTreeSet::new();
    let mut state = h.initial.clone();
    if !lattice.contains(&state) {
        return Err(LadtError::MalformedHistory(
            "initial state outside the state lattice".into(),
        ));
    }
    for block in &h.blocks {
        for (op, input) in &block.invocations {
            if invoked.insert(*op, input.clone()).is_some() {
                return Err(LadtError::MalformedHistory(format!(
                    "operation {op} invoked twice"
                )));
            }
        }
        // An empty invocation set contributes nothing, so the state must
        // carry over unchanged.
        let next = if block.invocations.is_empty() {
            state.clone()
        } else {
            let mut transitions = Vec::new();
            for (_, input) in &block.invocations {
                transitions.push(ladt.transition(&state, input)?);
            }
            lattice
                .join_all(transitions.iter())
                .map_err(|source| LadtError::State {
                    ladt: ladt.name.clone(),
                    source,
                })?
        };
        if next != block.state {
            return Ok(false);
        }
        for (op, observed) in &block.responses {
            let input = invoked.get(op).ok_or_else(|| {
                LadtError::MalformedHistory(format!("response for {op} has no matching invocation"))
            })?;
            if !responded.insert(*op) {
                return Err(LadtError::MalformedHistory(format!(
                    "operation {op} responded twice"
                )));
            }
            if ladt.output(&block.state, input)? != *observed {
                return Ok(false);
            }
        }
        state = next;
    }
    Ok(true)
}
