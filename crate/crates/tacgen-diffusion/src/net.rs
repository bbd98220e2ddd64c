//! Shared forward-pass plumbing: a parameter provider that decides whether
//! weights enter the tape as trainable parameters or as frozen constants.
//! Freezing by construction means no gradient for a frozen tensor can even
//! be materialized, which is how the control stage guarantees its base model
//! never moves.

use std::cell::RefCell;
use std::collections::HashMap;
use tacgen_nn::{NodeId, ParamStore, Tape};

pub struct Params<'a> {
    store: &'a ParamStore,
    trainable: bool,
    /// One tape node per weight per tape, however often a name is used.
    cache: RefCell<HashMap<String, NodeId>>,
}

impl<'a> Params<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: true,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: false,
            cache: RefCell::new(HashMap::new()),
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The cache is keyed per tape; call this when switching tapes.
    pub fn reset(&self) {
        self.cache.borrow_mut().clear();
    }

    pub fn node(&self, tape: &mut Tape, name: &str) -> NodeId {
        if let Some(&id) = self.cache.borrow().get(name) {
            return id;
        }
        let pid = self
            .store
            .id_of(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let node = if self.trainable {
            tape.param(self.store, pid)
        } else {
            tape.constant(self.store.get(pid).clone())
        };
        self.cache.borrow_mut().insert(name.to_string(), node);
        node
    }

    /// x @ W + b with weights looked up as `{name}.w` / `{name}.b`.
    pub fn linear(&self, tape: &mut Tape, name: &str, x: NodeId) -> NodeId {
        let w = self.node(tape, &format!("{name}.w"));
        let b = self.node(tape, &format!("{name}.b"));
        tape.linear(x, w, b)
    }
}
