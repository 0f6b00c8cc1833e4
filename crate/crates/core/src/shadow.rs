//! Reference model of the shadow state the runtime shim keeps: an
//! identity-keyed map from objects to named properties, updated the way
//! a children-tracking checker updates it. Used to cross-check the shim's
//! semantics in tests.

use std::collections::{BTreeMap, BTreeSet};

/// Identity of a subject object (the shim uses `id(obj)`).
pub type ObjectId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Set(BTreeSet<String>),
    Int(i64),
    Text(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChildOp {
    Add(ObjectId, String),
    Remove(ObjectId, String),
}

impl ChildOp {
    pub fn object(&self) -> ObjectId {
        match self {
            ChildOp::Add(o, _) | ChildOp::Remove(o, _) => *o,
        }
    }
}

pub const CHILDREN: &str = "children";

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ShadowModel {
    objects: BTreeMap<ObjectId, BTreeMap<String, Value>>,
}

impl ShadowModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, obj: ObjectId, prop: &str) -> Option<&Value> {
        self.objects.get(&obj)?.get(prop)
    }

    pub fn put(&mut self, obj: ObjectId, prop: &str, value: Value) {
        self.objects.entry(obj).or_default().insert(prop.to_string(), value);
    }

    pub fn tracked_objects(&self) -> usize {
        self.objects.len()
    }

    /// Read-modify-write of the `children` property with an empty-set
    /// default, as the checker does for every operation.
    pub fn apply(&mut self, op: &ChildOp) {
        let obj = op.object();
        let mut children = match self.get(obj, CHILDREN) {
            Some(Value::Set(s)) => s.clone(),
            _ => BTreeSet::new(),
        };
        match op {
            ChildOp::Add(_, c) => {
                children.insert(c.clone());
            }
            ChildOp::Remove(_, c) => {
                children.remove(c);
            }
        }
        self.put(obj, CHILDREN, Value::Set(children));
    }

    /// Expected children of `obj`; empty when the object was never seen.
    pub fn children(&self, obj: ObjectId) -> BTreeSet<String> {
        match self.get(obj, CHILDREN) {
            Some(Value::Set(s)) => s.clone(),
            _ => BTreeSet::new(),
        }
    }

    /// What the checker asserts after an operation on `obj`.
    pub fn check(&self, obj: ObjectId, actual: &BTreeSet<String>) -> bool {
        self.children(obj) == *actual
    }
}
