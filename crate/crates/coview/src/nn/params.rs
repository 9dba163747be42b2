//! Named parameter storage shared between networks, the optimizer and the
//! checkpoint container.
//!
//! Parameter values live behind `Arc<RwLock<..>>` so read-only forward
//! passes can run on worker threads while a single writer applies updates.
//! Weight sharing between network branches is expressed by cloning the
//! `Param` handle itself: two branches share a tensor exactly when their
//! handles point at the same allocation.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use indexmap::IndexMap;
use ndarray::ArrayD;

use super::var::Var;
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Param {
    pub name: String,
    value: Arc<RwLock<ArrayD<f32>>>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: ArrayD<f32>) -> Self {
        Param {
            name: name.into(),
            value: Arc::new(RwLock::new(value)),
        }
    }

    pub fn value(&self) -> ArrayD<f32> {
        self.value.read().expect("param lock").clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value.read().expect("param lock").shape().to_vec()
    }

    pub fn set(&self, value: ArrayD<f32>) {
        let mut guard = self.value.write().expect("param lock");
        assert_eq!(guard.shape(), value.shape(), "param {} shape change", self.name);
        *guard = value;
    }

    pub fn update_with(&self, f: impl FnOnce(&mut ArrayD<f32>)) {
        f(&mut self.value.write().expect("param lock"))
    }

    /// True when two handles refer to the same underlying tensor.
    pub fn same_storage(a: &Param, b: &Param) -> bool {
        Arc::ptr_eq(&a.value, &b.value)
    }
}

impl std::fmt::Debug for Param {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Param({}, {:?})", self.name, self.shape())
    }
}

/// Ordered, name-indexed collection of parameters.
#[derive(Default, Clone)]
pub struct ParamSet {
    items: IndexMap<String, Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Param) {
        assert!(
            self.items.insert(param.name.clone(), param).is_none(),
            "duplicate parameter name"
        );
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<f32>) -> Param {
        let p = Param::new(name, value);
        self.insert(p.clone());
        p
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.items.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&Param> {
        self.items
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.items.values()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Merge handles from another set (shared storage, not copies).
    pub fn extend_from(&mut self, other: &ParamSet) {
        for p in other.iter() {
            self.insert(p.clone());
        }
    }

    pub fn total_elements(&self) -> usize {
        self.iter().map(|p| p.shape().iter().product::<usize>()).sum()
    }

    /// Order-independent digest of all parameter bytes, for freeze checks.
    pub fn checksum(&self) -> u64 {
        let mut acc: u64 = 0xcbf29ce484222325;
        for p in self.iter() {
            for byte in p.name.as_bytes() {
                acc = (acc ^ u64::from(*byte)).wrapping_mul(0x100000001b3);
            }
            let value = p.value();
            for v in value.iter() {
                for byte in v.to_le_bytes() {
                    acc = (acc ^ u64::from(byte)).wrapping_mul(0x100000001b3);
                }
            }
        }
        acc
    }
}

impl std::fmt::Debug for ParamSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.items.values()).finish()
    }
}

/// Per-graph cache binding parameters to leaf variables.
///
/// All uses of one parameter within a graph must resolve to the same leaf so
/// shared weights accumulate gradients from every branch; the binding
/// guarantees that. In inference mode the leaves are constants and the tape
/// records nothing.
pub struct Binding {
    train: bool,
    trainable: Option<Box<dyn Fn(&str) -> bool + Send + Sync>>,
    vars: RefCell<HashMap<String, Var<f32>>>,
}

impl Binding {
    pub fn new(train: bool) -> Self {
        Binding {
            train,
            trainable: None,
            vars: RefCell::new(HashMap::new()),
        }
    }

    /// Training binding where only parameters matching the filter receive
    /// gradients; the rest enter the graph as constants, so backward never
    /// descends into frozen branches.
    pub fn with_filter(train: bool, filter: impl Fn(&str) -> bool + Send + Sync + 'static) -> Self {
        Binding {
            train,
            trainable: Some(Box::new(filter)),
            vars: RefCell::new(HashMap::new()),
        }
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn var_of(&self, param: &Param) -> Var<f32> {
        if let Some(v) = self.vars.borrow().get(&param.name) {
            return v.clone();
        }
        let data = param.value().clone();
        let trainable = self.train
            && self
                .trainable
                .as_ref()
                .map(|f| f(&param.name))
                .unwrap_or(true);
        let var = if trainable {
            Var::leaf(data)
        } else {
            Var::constant(data)
        };
        self.vars.borrow_mut().insert(param.name.clone(), var.clone());
        var
    }

    /// Collect accumulated gradients by parameter name after `backward`.
    pub fn take_grads(&self) -> GradMap {
        let mut out = GradMap::new();
        for (name, var) in self.vars.borrow().iter() {
            if let Some(g) = var.take_grad() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}

/// Gradients keyed by parameter name.
pub type GradMap = HashMap<String, ArrayD<f32>>;

/// Sum gradient maps (used to reduce per-sample gradients over a batch in a
/// fixed order).
pub fn accumulate_grads(total: &mut GradMap, part: GradMap) {
    for (name, g) in part {
        match total.get_mut(&name) {
            Some(acc) => *acc += &g,
            None => {
                total.insert(name, g);
            }
        }
    }
}
