//! Access-recording view of a context.
//!
//! Backends generate text from a [`GuardedContext`] only. It holds the
//! permitted documents and nothing else, and records every document handed
//! out, so the set of documents that could have influenced a generation is
//! known exactly.

use std::collections::BTreeSet;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::corpus::{Context, LabeledDocument};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditTrail {
    /// Ids of documents exposed to the backend.
    pub exposed: BTreeSet<String>,
    /// Ids requested by the backend that are not visible.
    pub denied: BTreeSet<String>,
}

#[derive(Debug)]
pub struct GuardedContext {
    visible: Context,
    audit: Mutex<AuditTrail>,
}

impl GuardedContext {
    pub fn new(visible: Context) -> Self {
        GuardedContext { visible, audit: Mutex::new(AuditTrail::default()) }
    }

    /// Every visible document; all of them are recorded as exposed.
    pub fn documents(&self) -> &[LabeledDocument] {
        let mut a = self.audit.lock().expect("audit lock");
        a.exposed.extend(self.visible.documents().iter().map(|d| d.id.clone()));
        self.visible.documents()
    }

    /// Looks up one document by id. Missing or excluded ids are recorded as denied.
    pub fn get(&self, id: &str) -> Option<&LabeledDocument> {
        let mut a = self.audit.lock().expect("audit lock");
        match self.visible.get(id) {
            Some(d) => {
                a.exposed.insert(d.id.clone());
                Some(d)
            }
            None => {
                a.denied.insert(id.to_string());
                None
            }
        }
    }

    /// Ids of the visible documents, without exposing their contents.
    pub fn visible_ids(&self) -> BTreeSet<String> {
        self.visible.ids()
    }

    pub fn len(&self) -> usize {
        self.visible.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visible.is_empty()
    }

    pub fn audit(&self) -> AuditTrail {
        self.audit.lock().expect("audit lock").clone()
    }
}
