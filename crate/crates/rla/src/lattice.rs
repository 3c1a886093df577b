//! Join-semilattice values and the ordered state triples tracked by the
//! replication protocol.
//!
//! Every piece of replicated state in this crate is an element of a
//! join semilattice: an ordered set where any two elements have a least
//! upper bound. Elements are represented by the closed [`Value`] enum and
//! each semilattice instance is described by a [`Lattice`] descriptor that
//! supplies the bottom element, the partial order and the join. Protocol
//! state lives in [`Triple`]s ordered by the auxiliary relation
//! implemented in [`StateLattice::leq_star`].

use std::collections::BTreeSet;
use std::fmt;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Process identifier. Clients and replicas share one id space.
#[derive(
    Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct Pid(pub u32);

impl fmt::Display for Pid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "p{}", self.0)
    }
}

/// A ground value from one of the totally ordered scalar domains.
///
/// `Tagged` breaks ties between equal payloads written by different
/// processes; `Seq` prefixes a tagged payload with a sequence number and
/// orders lexicographically, sequence number first.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Scalar {
    Int(i64),
    Tagged(i64, Pid),
    Seq(u64, i64, Pid),
    Proc(Pid),
}

/// Names a scalar domain so instances over different domains cannot be mixed.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub enum ScalarKind {
    Int,
    Tagged,
    Seq,
    Proc,
}

impl Scalar {
    pub fn kind(&self) -> ScalarKind {
        match self {
            Scalar::Int(_) => ScalarKind::Int,
            Scalar::Tagged(..) => ScalarKind::Tagged,
            Scalar::Seq(..) => ScalarKind::Seq,
            Scalar::Proc(_) => ScalarKind::Proc,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Tagged(v, p) => write!(f, "{v}@{}", p.0),
            Scalar::Seq(s, v, p) => write!(f, "({s},{v}@{})", p.0),
            Scalar::Proc(p) => write!(f, "{p}"),
        }
    }
}

/// Conflict-detector state: bottom, a single agreed value, or conflict.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum CdState {
    Bot,
    Val(Scalar),
    Top,
}

impl fmt::Display for CdState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CdState::Bot => write!(f, "bot"),
            CdState::Val(v) => write!(f, "val:{v}"),
            CdState::Top => write!(f, "top"),
        }
    }
}

/// Replica membership as a grow-only pair of activated and removed ids.
/// Members are `activated - removed`; a removal always wins.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default, Serialize, Deserialize)]
pub struct ConfigState {
    #[serde(rename = "in")]
    pub activated: BTreeSet<Pid>,
    #[serde(rename = "out")]
    pub removed: BTreeSet<Pid>,
}

impl ConfigState {
    pub fn new<I, O>(activated: I, removed: O) -> Self
    where
        I: IntoIterator<Item = Pid>,
        O: IntoIterator<Item = Pid>,
    {
        ConfigState {
            activated: activated.into_iter().collect(),
            removed: removed.into_iter().collect(),
        }
    }

    /// The current members: activated ids minus removed ids.
    pub fn members(&self) -> BTreeSet<Pid> {
        self.activated.difference(&self.removed).copied().collect()
    }
}

impl fmt::Display for ConfigState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ins: Vec<String> = self.activated.iter().map(|p| p.0.to_string()).collect();
        let outs: Vec<String> = self.removed.iter().map(|p| p.0.to_string()).collect();
        write!(f, "(in{{{}}},out{{{}}})", ins.join(","), outs.join(","))
    }
}

/// An element of one of the built-in join semilattices.
///
/// The derived `Ord` is a structural order used only for storing values in
/// deterministic containers; the lattice order is [`Lattice::leq`].
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub enum Value {
    /// Max-register element: bottom or the largest scalar seen so far.
    Max(Option<Scalar>),
    /// Add-only set of scalars, ordered by inclusion.
    Set(BTreeSet<Scalar>),
    /// One-shot flag that can only be raised.
    Flag(bool),
    /// Conflict-detector state.
    Cd(CdState),
    /// Replica configuration ordered by piecewise inclusion.
    Config(ConfigState),
    /// Element of a product of two lattices.
    Pair(Box<Value>, Box<Value>),
}

impl Value {
    pub fn config(&self) -> Option<&ConfigState> {
        match self {
            Value::Config(c) => Some(c),
            _ => None,
        }
    }

    pub fn expect_config(&self) -> &ConfigState {
        self.config().expect("value is not a configuration")
    }

    /// Canonical self-describing text form, e.g. `max:5`, `cfg:(in{1},out{})`.
    pub fn to_tagged(&self) -> String {
        match self {
            Value::Max(None) => "max:bot".into(),
            Value::Max(Some(s)) => format!("max:{s}"),
            Value::Set(xs) => {
                let items: Vec<String> = xs.iter().map(|s| s.to_string()).collect();
                format!("set:{{{}}}", items.join(","))
            }
            Value::Flag(false) => "flag:bot".into(),
            Value::Flag(true) => "flag:top".into(),
            Value::Cd(c) => format!("cd:{c}"),
            Value::Config(c) => format!("cfg:{c}"),
            Value::Pair(l, r) => format!("pair({};{})", l.to_tagged(), r.to_tagged()),
        }
    }

    /// Parses the canonical tagged form produced by [`Value::to_tagged`].
    pub fn parse_tagged(s: &str) -> Result<Value, EncodingError> {
        parse::value(s)
    }
}

/// The bare per-instance encoding: the tagged form minus the type tag.
impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Max(None) => write!(f, "bot"),
            Value::Max(Some(s)) => write!(f, "{s}"),
            Value::Set(xs) => {
                let items: Vec<String> = xs.iter().map(|s| s.to_string()).collect();
                write!(f, "{{{}}}", items.join(","))
            }
            Value::Flag(false) => write!(f, "bot"),
            Value::Flag(true) => write!(f, "top"),
            Value::Cd(c) => write!(f, "{c}"),
            Value::Config(c) => write!(f, "{c}"),
            Value::Pair(l, r) => write!(f, "({l},{r})"),
        }
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_tagged())
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Value::parse_tagged(&s).map_err(de::Error::custom)
    }
}

impl Serialize for Scalar {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Scalar {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        parse::scalar_str(&s).map_err(de::Error::custom)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LatticeError {
    #[error("value `{value}` does not belong to lattice `{lattice}`")]
    Mismatch { lattice: String, value: String },
    #[error("join over an empty set is undefined; pass the bottom element explicitly")]
    EmptyJoin,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("cannot parse `{input}` as a lattice value: {reason}")]
pub struct EncodingError {
    pub input: String,
    pub reason: String,
}

/// Descriptor of one join-semilattice instance: it knows its bottom
/// element, which values belong to it, the partial order and the join.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub enum Lattice {
    Max(ScalarKind),
    Set(ScalarKind),
    Flag,
    Cd(ScalarKind),
    Config,
    Product(Box<Lattice>, Box<Lattice>),
}

impl fmt::Display for Lattice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Lattice::Max(k) => write!(f, "max<{k:?}>"),
            Lattice::Set(k) => write!(f, "set<{k:?}>"),
            Lattice::Flag => write!(f, "flag"),
            Lattice::Cd(k) => write!(f, "cd<{k:?}>"),
            Lattice::Config => write!(f, "config"),
            Lattice::Product(l, r) => write!(f, "({l}x{r})"),
        }
    }
}

impl Lattice {
    /// The least element of this instance.
    pub fn bottom(&self) -> Value {
        match self {
            Lattice::Max(_) => Value::Max(None),
            Lattice::Set(_) => Value::Set(BTreeSet::new()),
            Lattice::Flag => Value::Flag(false),
            Lattice::Cd(_) => Value::Cd(CdState::Bot),
            Lattice::Config => Value::Config(ConfigState::default()),
            Lattice::Product(l, r) => Value::Pair(Box::new(l.bottom()), Box::new(r.bottom())),
        }
    }

    /// Membership check; all fallible operations route through this.
    pub fn contains(&self, v: &Value) -> bool {
        match (self, v) {
            (Lattice::Max(_), Value::Max(None)) => true,
            (Lattice::Max(k), Value::Max(Some(s))) => s.kind() == *k,
            (Lattice::Set(k), Value::Set(xs)) => xs.iter().all(|s| s.kind() == *k),
            (Lattice::Flag, Value::Flag(_)) => true,
            (Lattice::Cd(_), Value::Cd(CdState::Bot | CdState::Top)) => true,
            (Lattice::Cd(k), Value::Cd(CdState::Val(s))) => s.kind() == *k,
            (Lattice::Config, Value::Config(_)) => true,
            (Lattice::Product(l, r), Value::Pair(a, b)) => l.contains(a) && r.contains(b),
            _ => false,
        }
    }

    fn check(&self, v: &Value) -> Result<(), LatticeError> {
        if self.contains(v) {
            Ok(())
        } else {
            Err(LatticeError::Mismatch {
                lattice: self.to_string(),
                value: v.to_tagged(),
            })
        }
    }

    /// The partial order of this instance.
    pub fn leq(&self, a: &Value, b: &Value) -> Result<bool, LatticeError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.leq_unchecked(a, b))
    }

    fn leq_unchecked(&self, a: &Value, b: &Value) -> bool {
        match (a, b) {
            (Value::Max(x), Value::Max(y)) => match (x, y) {
                (None, _) => true,
                (Some(_), None) => false,
                (Some(x), Some(y)) => x <= y,
            },
            (Value::Set(x), Value::Set(y)) => x.is_subset(y),
            (Value::Flag(x), Value::Flag(y)) => !*x || *y,
            (Value::Cd(x), Value::Cd(y)) => match (x, y) {
                (CdState::Bot, _) => true,
                (_, CdState::Top) => true,
                (CdState::Val(v), CdState::Val(w)) => v == w,
                _ => false,
            },
            (Value::Config(x), Value::Config(y)) => {
                x.activated.is_subset(&y.activated) && x.removed.is_subset(&y.removed)
            }
            (Value::Pair(xl, xr), Value::Pair(yl, yr)) => {
                let (l, r) = match self {
                    Lattice::Product(l, r) => (l, r),
                    _ => unreachable!("checked membership"),
                };
                l.leq_unchecked(xl, yl) && r.leq_unchecked(xr, yr)
            }
            _ => unreachable!("checked membership"),
        }
    }

    /// Least upper bound of two elements of this instance.
    pub fn join(&self, a: &Value, b: &Value) -> Result<Value, LatticeError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.join_unchecked(a, b))
    }

    fn join_unchecked(&self, a: &Value, b: &Value) -> Value {
        match (a, b) {
            (Value::Max(x), Value::Max(y)) => Value::Max((*x).max(*y)),
            (Value::Set(x), Value::Set(y)) => Value::Set(x.union(y).copied().collect()),
            (Value::Flag(x), Value::Flag(y)) => Value::Flag(*x || *y),
            (Value::Cd(x), Value::Cd(y)) => Value::Cd(match (x, y) {
                (CdState::Bot, z) | (z, CdState::Bot) => *z,
                (CdState::Top, _) | (_, CdState::Top) => CdState::Top,
                (CdState::Val(v), CdState::Val(w)) if v == w => CdState::Val(*v),
                _ => CdState::Top,
            }),
            (Value::Config(x), Value::Config(y)) => Value::Config(ConfigState {
                activated: x.activated.union(&y.activated).copied().collect(),
                removed: x.removed.union(&y.removed).copied().collect(),
            }),
            (Value::Pair(xl, xr), Value::Pair(yl, yr)) => {
                let (l, r) = match self {
                    Lattice::Product(l, r) => (l, r),
                    _ => unreachable!("checked membership"),
                };
                Value::Pair(
                    Box::new(l.join_unchecked(xl, yl)),
                    Box::new(r.join_unchecked(xr, yr)),
                )
            }
            _ => unreachable!("checked membership"),
        }
    }

    /// Join of a non-empty collection. The empty join is an error so call
    /// sites must include their base element explicitly.
    pub fn join_all<'a, I>(&self, xs: I) -> Result<Value, LatticeError>
    where
        I: IntoIterator<Item = &'a Value>,
    {
        let mut acc: Option<Value> = None;
        for x in xs {
            acc = Some(match acc {
                None => {
                    self.check(x)?;
                    x.clone()
                }
                Some(a) => self.join(&a, x)?,
            });
        }
        acc.ok_or(LatticeError::EmptyJoin)
    }
}

/// An element of the product of an object lattice and a configuration
/// lattice: the unit of state the protocol commits and learns.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct ProductElem {
    pub obj: Value,
    pub cfg: Value,
}

impl ProductElem {
    pub fn new(obj: Value, cfg: Value) -> Self {
        ProductElem { obj, cfg }
    }
}

impl fmt::Display for ProductElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.obj, self.cfg)
    }
}

/// A process's tracked state: the commit estimate, the object candidate
/// and the set of input configuration states not yet superseded by the
/// commit estimate.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Serialize, Deserialize)]
pub struct Triple {
    /// Commit estimate.
    pub commit: ProductElem,
    /// Candidate object state: join of all proposed object states seen.
    pub obj: Value,
    /// Tracked input configuration states, deduplicated, none of them
    /// below `commit.cfg`.
    pub tracked: BTreeSet<Value>,
}

impl Triple {
    pub fn new(commit: ProductElem, obj: Value, tracked: BTreeSet<Value>) -> Self {
        Triple {
            commit,
            obj,
            tracked,
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let ts: Vec<String> = self.tracked.iter().map(|t| t.to_string()).collect();
        write!(f, "(v={},obj={},T={{{}}})", self.commit, self.obj, ts.join(","))
    }
}

/// The product lattice of object and configuration states, together with
/// the triple order and the decide projection used by the protocol.
#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct StateLattice {
    pub obj: Lattice,
    pub cfg: Lattice,
}

impl StateLattice {
    pub fn new(obj: Lattice, cfg: Lattice) -> Self {
        StateLattice { obj, cfg }
    }

    pub fn bottom(&self) -> ProductElem {
        ProductElem::new(self.obj.bottom(), self.cfg.bottom())
    }

    /// Componentwise order on commit states.
    pub fn leq(&self, a: &ProductElem, b: &ProductElem) -> Result<bool, LatticeError> {
        Ok(self.obj.leq(&a.obj, &b.obj)? && self.cfg.leq(&a.cfg, &b.cfg)?)
    }

    /// Componentwise join of commit states.
    pub fn join(&self, a: &ProductElem, b: &ProductElem) -> Result<ProductElem, LatticeError> {
        Ok(ProductElem::new(
            self.obj.join(&a.obj, &b.obj)?,
            self.cfg.join(&a.cfg, &b.cfg)?,
        ))
    }

    /// A triple is well formed when no tracked configuration is already
    /// below the commit estimate's configuration.
    pub fn is_well_formed(&self, t: &Triple) -> Result<bool, LatticeError> {
        for u in &t.tracked {
            if self.cfg.leq(u, &t.commit.cfg)? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// The triple order: componentwise on the commit estimate and object
    /// candidate, and on tracked sets after discarding entries superseded
    /// by the right-hand commit estimate.
    pub fn leq_star(&self, x: &Triple, y: &Triple) -> Result<bool, LatticeError> {
        if !self.leq(&x.commit, &y.commit)? || !self.obj.leq(&x.obj, &y.obj)? {
            return Ok(false);
        }
        for u in &x.tracked {
            if !self.cfg.leq(u, &y.commit.cfg)? && !y.tracked.contains(u) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// The state a client would commit from this triple: the object
    /// candidate paired with the join of the commit estimate's
    /// configuration and all tracked configurations.
    pub fn decide(&self, t: &Triple) -> Result<ProductElem, LatticeError> {
        let cfg = self
            .cfg
            .join_all(std::iter::once(&t.commit.cfg).chain(t.tracked.iter()))?;
        Ok(ProductElem::new(t.obj.clone(), cfg))
    }

    /// Merges an incoming triple into the current one: joins the commit
    /// estimate and object candidate, unions the tracked sets and trims
    /// entries superseded by the new commit estimate. With `skip_trim`
    /// the trimming step is omitted (fault-injection hook).
    pub fn merge(
        &self,
        current: &Triple,
        incoming: &Triple,
        skip_trim: bool,
    ) -> Result<Triple, LatticeError> {
        let commit = self.join(&current.commit, &incoming.commit)?;
        let obj = self.obj.join(&current.obj, &incoming.obj)?;
        let mut tracked = BTreeSet::new();
        for u in current.tracked.iter().chain(incoming.tracked.iter()) {
            if skip_trim || !self.cfg.leq(u, &commit.cfg)? {
                tracked.insert(u.clone());
            }
        }
        Ok(Triple {
            commit,
            obj,
            tracked,
        })
    }
}

mod parse {
    use super::*;

    pub fn scalar_str(s: &str) -> Result<Scalar, EncodingError> {
        let err = |reason: &str| EncodingError {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let s = s.trim();
        if let Some(rest) = s.strip_prefix('p') {
            let id: u32 = rest.parse().map_err(|_| err("bad process id"))?;
            return Ok(Scalar::Proc(Pid(id)));
        }
        if let Some(body) = s.strip_prefix('(').and_then(|t| t.strip_suffix(')')) {
            let (seq, rest) = body.split_once(',').ok_or_else(|| err("expected (seq,v@p)"))?;
            let seq: u64 = seq.trim().parse().map_err(|_| err("bad sequence number"))?;
            match scalar_str(rest)? {
                Scalar::Tagged(v, p) => return Ok(Scalar::Seq(seq, v, p)),
                _ => return Err(err("expected tagged payload in sequence pair")),
            }
        }
        if let Some((v, p)) = s.split_once('@') {
            let v: i64 = v.trim().parse().map_err(|_| err("bad tagged payload"))?;
            let p: u32 = p.trim().parse().map_err(|_| err("bad process tag"))?;
            return Ok(Scalar::Tagged(v, Pid(p)));
        }
        let v: i64 = s.parse().map_err(|_| err("bad integer"))?;
        Ok(Scalar::Int(v))
    }

    fn set_body(s: &str) -> Result<BTreeSet<Scalar>, EncodingError> {
        let body = s
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .ok_or_else(|| EncodingError {
                input: s.to_string(),
                reason: "expected braces".into(),
            })?;
        let mut out = BTreeSet::new();
        // Sequence scalars contain commas, so split at depth zero only.
        for item in split_top(body, ',') {
            if item.is_empty() {
                continue;
            }
            out.insert(scalar_str(&item)?);
        }
        Ok(out)
    }

    fn pid_list(s: &str) -> Result<BTreeSet<Pid>, EncodingError> {
        let body = s
            .strip_prefix('{')
            .and_then(|t| t.strip_suffix('}'))
            .ok_or_else(|| EncodingError {
                input: s.to_string(),
                reason: "expected braces".into(),
            })?;
        let mut out = BTreeSet::new();
        for item in body.split(',') {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let id: u32 = item.parse().map_err(|_| EncodingError {
                input: s.to_string(),
                reason: "bad replica id".into(),
            })?;
            out.insert(Pid(id));
        }
        Ok(out)
    }

    pub fn config_str(s: &str) -> Result<ConfigState, EncodingError> {
        let err = |reason: &str| EncodingError {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let body = s
            .strip_prefix('(')
            .and_then(|t| t.strip_suffix(')'))
            .ok_or_else(|| err("expected parentheses"))?;
        let parts = split_top(body, ',');
        if parts.len() != 2 {
            return Err(err("expected in{..},out{..}"));
        }
        let ins = parts[0]
            .strip_prefix("in")
            .ok_or_else(|| err("expected in{..}"))?;
        let outs = parts[1]
            .strip_prefix("out")
            .ok_or_else(|| err("expected out{..}"))?;
        Ok(ConfigState {
            activated: pid_list(ins)?,
            removed: pid_list(outs)?,
        })
    }

    /// Splits at `sep` occurrences that are not nested inside brackets.
    fn split_top(s: &str, sep: char) -> Vec<String> {
        let mut depth = 0i32;
        let mut parts = vec![String::new()];
        for c in s.chars() {
            match c {
                '(' | '{' => depth += 1,
                ')' | '}' => depth -= 1,
                _ => {}
            }
            if c == sep && depth == 0 {
                parts.push(String::new());
            } else {
                parts.last_mut().unwrap().push(c);
            }
        }
        parts.into_iter().map(|p| p.trim().to_string()).collect()
    }

    pub fn value(s: &str) -> Result<Value, EncodingError> {
        let err = |reason: &str| EncodingError {
            input: s.to_string(),
            reason: reason.to_string(),
        };
        let s = s.trim();
        if let Some(rest) = s.strip_prefix("max:") {
            if rest == "bot" {
                return Ok(Value::Max(None));
            }
            return Ok(Value::Max(Some(scalar_str(rest)?)));
        }
        if let Some(rest) = s.strip_prefix("set:") {
            return Ok(Value::Set(set_body(rest)?));
        }
        if let Some(rest) = s.strip_prefix("flag:") {
            return match rest {
                "bot" => Ok(Value::Flag(false)),
                "top" => Ok(Value::Flag(true)),
                _ => Err(err("expected flag:bot or flag:top")),
            };
        }
        if let Some(rest) = s.strip_prefix("cd:") {
            return match rest {
                "bot" => Ok(Value::Cd(CdState::Bot)),
                "top" => Ok(Value::Cd(CdState::Top)),
                _ => {
                    let v = rest
                        .strip_prefix("val:")
                        .ok_or_else(|| err("expected cd:bot, cd:top or cd:val:<v>"))?;
                    Ok(Value::Cd(CdState::Val(scalar_str(v)?)))
                }
            };
        }
        if let Some(rest) = s.strip_prefix("cfg:") {
            return Ok(Value::Config(config_str(rest)?));
        }
        if let Some(body) = s
            .strip_prefix("pair(")
            .and_then(|t| t.strip_suffix(')'))
        {
            let parts = split_top(body, ';');
            if parts.len() != 2 {
                return Err(err("expected pair(<l>;<r>)"));
            }
            return Ok(Value::Pair(
                Box::new(value(&parts[0])?),
                Box::new(value(&parts[1])?),
            ));
        }
        Err(err("unknown value tag"))
    }
}

pub use parse::{config_str as parse_config, scalar_str as parse_scalar};

#[cfg(test)]
mod tests {
    use super::*;

    fn pid(n: u32) -> Pid {
        Pid(n)
    }

    fn cfg(ins: &[u32], outs: &[u32]) -> Value {
        Value::Config(ConfigState::new(
            ins.iter().map(|n| pid(*n)),
            outs.iter().map(|n| pid(*n)),
        ))
    }

    fn int_max(v: i64) -> Value {
        Value::Max(Some(Scalar::Int(v)))
    }

    fn int_set(xs: &[i64]) -> Value {
        Value::Set(xs.iter().map(|v| Scalar::Int(*v)).collect())
    }

    #[test]
    fn join_max_is_max() {
        let lat = Lattice::Max(ScalarKind::Int);
        assert_eq!(lat.join(&int_max(3), &int_max(5)).unwrap(), int_max(5));
        assert_eq!(lat.join(&int_max(5), &Value::Max(None)).unwrap(), int_max(5));
    }

    #[test]
    fn join_set_is_union() {
        let lat = Lattice::Set(ScalarKind::Int);
        assert_eq!(
            lat.join(&int_set(&[1]), &int_set(&[2])).unwrap(),
            int_set(&[1, 2])
        );
    }

    #[test]
    fn join_cd_conflicts_on_distinct_values() {
        let lat = Lattice::Cd(ScalarKind::Int);
        let v = Value::Cd(CdState::Val(Scalar::Int(1)));
        let w = Value::Cd(CdState::Val(Scalar::Int(2)));
        assert_eq!(lat.join(&v, &w).unwrap(), Value::Cd(CdState::Top));
        assert_eq!(lat.join(&v, &v).unwrap(), v);
        assert_eq!(lat.join(&Value::Cd(CdState::Bot), &w).unwrap(), w);
    }

    #[test]
    fn join_rejects_mismatched_instances() {
        let lat = Lattice::Max(ScalarKind::Int);
        let err = lat.join(&int_max(1), &Value::Flag(true)).unwrap_err();
        assert!(matches!(err, LatticeError::Mismatch { .. }));
        // Same shape, different scalar domain.
        let tagged = Value::Max(Some(Scalar::Tagged(1, pid(1))));
        assert!(lat.join(&int_max(1), &tagged).is_err());
    }

    #[test]
    fn join_all_folds_and_rejects_empty() {
        let lat = Lattice::Max(ScalarKind::Int);
        assert_eq!(lat.join_all([&int_max(3)]).unwrap(), int_max(3));

        let sets = Lattice::Set(ScalarKind::Int);
        let xs = [int_set(&[1]), int_set(&[2]), int_set(&[1, 3])];
        assert_eq!(sets.join_all(xs.iter()).unwrap(), int_set(&[1, 2, 3]));

        assert_eq!(lat.join_all([]).unwrap_err(), LatticeError::EmptyJoin);
    }

    #[test]
    fn join_all_config_is_piecewise_union() {
        let lat = Lattice::Config;
        let a = cfg(&[1], &[]);
        let b = cfg(&[2], &[1]);
        let expect = cfg(&[1, 2], &[1]);
        assert_eq!(lat.join_all([&a, &b]).unwrap(), expect);
        // Cross-check against brute-force pairwise joins in both orders.
        assert_eq!(lat.join(&a, &b).unwrap(), expect);
        assert_eq!(lat.join(&b, &a).unwrap(), expect);
    }

    #[test]
    fn leq_matches_join_absorption() {
        let lat = Lattice::Config;
        let elems = [
            cfg(&[], &[]),
            cfg(&[1], &[]),
            cfg(&[1, 2], &[]),
            cfg(&[1], &[2]),
            cfg(&[1, 2], &[2]),
        ];
        for a in &elems {
            for b in &elems {
                let leq = lat.leq(a, b).unwrap();
                let absorbed = lat.join(a, b).unwrap() == *b;
                assert_eq!(leq, absorbed, "leq({a},{b})");
            }
        }
    }

    fn demo_state_lattice() -> StateLattice {
        StateLattice::new(Lattice::Max(ScalarKind::Int), Lattice::Config)
    }

    fn triple(v_obj: i64, v_cfg: &Value, obj: i64, tracked: &[Value]) -> Triple {
        Triple::new(
            ProductElem::new(int_max(v_obj), v_cfg.clone()),
            int_max(obj),
            tracked.iter().cloned().collect(),
        )
    }

    #[test]
    fn leq_star_reflexive_and_trims() {
        let lat = demo_state_lattice();
        let c0 = cfg(&[1, 2], &[]);
        let c1 = cfg(&[1, 2, 3], &[]);
        let x = triple(1, &c0, 1, &[c1.clone()]);
        assert!(lat.is_well_formed(&x).unwrap());
        assert!(lat.leq_star(&x, &x).unwrap());

        // y's commit estimate absorbed c1, so the tracked entry is trimmed.
        let y = triple(2, &c1, 2, &[]);
        assert!(lat.leq_star(&x, &y).unwrap());

        // Componentwise failure on the object candidate.
        let z = triple(2, &c1, 0, &[]);
        assert!(!lat.leq_star(&x, &z).unwrap());
    }

    #[test]
    fn decide_joins_tracked_configs() {
        let lat = demo_state_lattice();
        let c0 = cfg(&[1], &[]);
        let c1 = cfg(&[2], &[]);
        let x = triple(1, &c0, 1, &[]);
        assert_eq!(
            lat.decide(&x).unwrap(),
            ProductElem::new(int_max(1), c0.clone())
        );
        let y = triple(1, &c0, 1, &[c1]);
        assert_eq!(
            lat.decide(&y).unwrap(),
            ProductElem::new(int_max(1), cfg(&[1, 2], &[]))
        );
    }

    #[test]
    fn merge_is_idempotent_and_trims() {
        let lat = demo_state_lattice();
        let c0 = cfg(&[1], &[]);
        let c1 = cfg(&[1, 2], &[]);
        let x = triple(1, &c0, 1, &[c1.clone()]);
        assert_eq!(lat.merge(&x, &x, false).unwrap(), x);

        // Incoming commit estimate supersedes every tracked entry.
        let inc = triple(2, &c1, 1, &[]);
        let merged = lat.merge(&x, &inc, false).unwrap();
        assert!(merged.tracked.is_empty());
        assert_eq!(merged.commit.cfg, c1);
    }

    #[test]
    fn tagged_encoding_round_trips() {
        let samples = vec![
            int_max(5),
            Value::Max(None),
            Value::Max(Some(Scalar::Seq(3, -7, pid(2)))),
            int_set(&[2, 1]),
            Value::Set([Scalar::Proc(pid(1)), Scalar::Proc(pid(4))].into()),
            Value::Flag(true),
            Value::Cd(CdState::Val(Scalar::Tagged(9, pid(3)))),
            cfg(&[1, 2], &[3]),
            Value::Pair(Box::new(int_max(1)), Box::new(cfg(&[1], &[]))),
        ];
        for v in samples {
            let s = v.to_tagged();
            assert_eq!(Value::parse_tagged(&s).unwrap(), v, "round trip {s}");
        }
    }
}
