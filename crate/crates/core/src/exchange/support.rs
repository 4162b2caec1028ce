//! Which ops (and attribute ranges) a consumer runtime accepts.

use std::collections::BTreeMap;
use std::fmt;

use super::format::{ExchangeFile, NodeRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttrRange {
    pub key: String,
    pub min: i64,
    pub max: i64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpSupportTable {
    ops: BTreeMap<String, Vec<AttrRange>>,
}

/// The table shipped with the runtime. `Reshape` is deliberately absent.
pub const DEFAULT_SUPPORT_TABLE: &str = "\
Conv kernel=1..7 stride=1..2 padding=0..3
DepthwiseConv kernel=3..3 stride=1..2 padding=0..1
PointwiseConv
BatchNorm
Relu
MaxPool window=2..2 stride=2..2
Dropout
Flatten
Linear
GlobalAveragePool
Add
";

impl OpSupportTable {
    /// Parse `support_table.txt`: one op per line, optionally followed by
    /// `key=min..max` constraints. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut ops = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Config(format!("support table line {}: {msg}", lineno + 1));
            let mut parts = line.split_whitespace();
            let op = parts.next().expect("non-empty line").to_string();
            let mut ranges = Vec::new();
            for part in parts {
                let (key, range) = part
                    .split_once('=')
                    .ok_or_else(|| bad(format!("expected key=min..max, got {part}")))?;
                let (lo, hi) = range
                    .split_once("..")
                    .ok_or_else(|| bad(format!("expected min..max, got {range}")))?;
                let parse = |s: &str| s.parse::<i64>().map_err(|_| bad(format!("not an integer: {s}")));
                let (min, max) = (parse(lo)?, parse(hi)?);
                if min > max {
                    return Err(bad(format!("empty range {range}")));
                }
                ranges.push(AttrRange {
                    key: key.to_string(),
                    min,
                    max,
                });
            }
            if ops.insert(op.clone(), ranges).is_some() {
                return Err(bad(format!("op {op} listed twice")));
            }
        }
        if ops.is_empty() {
            return Err(Error::Config("support table lists no ops".into()));
        }
        // The only rewrite emits Flatten, so a table must be able to run its output.
        if !ops.contains_key("Flatten") {
            return Err(Error::Config("support table must include Flatten".into()));
        }
        Ok(OpSupportTable { ops })
    }

    pub fn default_table() -> Self {
        Self::parse(DEFAULT_SUPPORT_TABLE).expect("built-in table parses")
    }

    /// The default table plus `Reshape`, as available on the training side.
    pub fn development() -> Self {
        Self::parse(&format!("{DEFAULT_SUPPORT_TABLE}Reshape\n")).expect("built-in table parses")
    }

    pub fn without(mut self, op: &str) -> Self {
        self.ops.remove(op);
        self
    }

    pub fn supports(&self, op: &str) -> bool {
        self.ops.contains_key(op)
    }

    pub fn ops(&self) -> impl Iterator<Item = &str> {
        self.ops.keys().map(String::as_str)
    }

    fn check(&self, node: &NodeRecord) -> Option<ViolationKind> {
        let Some(ranges) = self.ops.get(&node.op) else {
            return Some(ViolationKind::UnsupportedOp);
        };
        for r in ranges {
            let value = node.attr(&r.key).and_then(|v| v.parse::<i64>().ok());
            match value {
                Some(v) if (r.min..=r.max).contains(&v) => {}
                _ => {
                    return Some(ViolationKind::AttributeOutOfRange {
                        key: r.key.clone(),
                        value: node.attr(&r.key).unwrap_or("<missing>").to_string(),
                        min: r.min,
                        max: r.max,
                    })
                }
            }
        }
        None
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    UnsupportedOp,
    AttributeOutOfRange {
        key: String,
        value: String,
        min: i64,
        max: i64,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: usize,
    pub op: String,
    pub output: String,
    pub kind: ViolationKind,
    /// A rewrite exists that removes this violation.
    pub rewritable: bool,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node {} ({} -> {}): ", self.node, self.op, self.output)?;
        match &self.kind {
            ViolationKind::UnsupportedOp => write!(f, "unsupported op")?,
            ViolationKind::AttributeOutOfRange { key, value, min, max } => {
                write!(f, "attribute {key}={value} outside {min}..{max}")?
            }
        }
        if self.rewritable {
            write!(f, " [rewritable to Flatten]")?;
        }
        Ok(())
    }
}

/// `Reshape` with target `[0, -1]`: keep the batch dimension, flatten the rest.
pub fn is_flattening_reshape(node: &NodeRecord) -> bool {
    node.op == "Reshape"
        && node
            .attr("shape")
            .is_some_and(|s| s.split(',').map(str::trim).eq(["0", "-1"]))
}

/// Check every node against `support`. An empty list means deployable.
pub fn validate_ops(file: &ExchangeFile, support: &OpSupportTable) -> Vec<Violation> {
    file.nodes
        .iter()
        .enumerate()
        .filter_map(|(i, node)| {
            support.check(node).map(|kind| Violation {
                node: i,
                op: node.op.clone(),
                output: node.outputs.first().cloned().unwrap_or_default(),
                rewritable: is_flattening_reshape(node) && support.supports("Flatten"),
                kind,
            })
        })
        .collect()
}
