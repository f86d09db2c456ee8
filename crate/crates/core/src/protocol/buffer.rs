use super::{StampedParams, StepLabel};

/// Worker-side queue holding at most one parameter set per sub-step.
///
/// A new entry whose label is already queued replaces that entry in place;
/// otherwise it is appended.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorkerBuffer {
    entries: Vec<StampedParams>,
}

impl WorkerBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, p: StampedParams) {
        match self.entries.iter_mut().find(|e| e.step == p.step) {
            Some(slot) => *slot = p,
            None => self.entries.push(p),
        }
    }

    pub fn pop_front(&mut self) -> Option<StampedParams> {
        if self.entries.is_empty() {
            None
        } else {
            Some(self.entries.remove(0))
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<StepLabel> {
        self.entries.iter().map(|e| e.step).collect()
    }

    pub fn entries(&self) -> &[StampedParams] {
        &self.entries
    }
}
