//! Name-keyed tables of interchangeable components.
//!
//! The attention output block (`aoa`, `plain`) and the modality fusion
//! head (`attention`, `mutan`) are each chosen by name from a registry at
//! model-build time, so configuration files and the command line select
//! variants without the model code matching on them.

use crate::error::{Error, Result};

pub struct Entry<C> {
    pub name: &'static str,
    pub description: &'static str,
    pub ctor: C,
}

pub struct Registry<C> {
    kind: &'static str,
    entries: Vec<Entry<C>>,
}

impl<C: Copy> Registry<C> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: Vec::new(),
        }
    }

    /// Registers `ctor` under `name`, replacing any earlier entry.
    pub fn register(&mut self, name: &'static str, description: &'static str, ctor: C) {
        self.entries.retain(|e| e.name != name);
        self.entries.push(Entry {
            name,
            description,
            ctor,
        });
    }

    pub fn with(mut self, name: &'static str, description: &'static str, ctor: C) -> Self {
        self.register(name, description, ctor);
        self
    }

    pub fn get(&self, name: &str) -> Result<C> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.ctor)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown {} `{name}` (known: {})",
                    self.kind,
                    self.names().join(", ")
                ))
            })
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.entries.iter().map(|e| e.name).collect()
    }

    pub fn entries(&self) -> &[Entry<C>] {
        &self.entries
    }
}
