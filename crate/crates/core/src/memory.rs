//! Byte accounting for tensors registered on a tape.
//!
//! A [`Ledger`] is a cheap shared handle; every tape and gradient set that
//! charges bytes against it releases them again when dropped, so the live
//! count after a training step equals the count before it.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MemoryLedger {
    pub current_bytes: usize,
    pub peak_bytes: usize,
    pub phase_peaks: BTreeMap<String, usize>,
    /// Parameter storage, reported alongside but never mixed into the counts above.
    pub param_bytes: usize,
    /// Parameter load/save events modelled for split execution.
    pub param_swap_events: usize,
    pub param_swap_bytes: usize,
    #[serde(skip)]
    active_phase: Option<String>,
}

impl MemoryLedger {
    fn alloc(&mut self, bytes: usize) {
        self.current_bytes += bytes;
        self.peak_bytes = self.peak_bytes.max(self.current_bytes);
        if let Some(phase) = &self.active_phase {
            let peak = self.phase_peaks.entry(phase.clone()).or_default();
            *peak = (*peak).max(self.current_bytes);
        }
    }

    fn free(&mut self, bytes: usize) {
        assert!(
            bytes <= self.current_bytes,
            "ledger underflow: freeing {bytes} with {} live",
            self.current_bytes
        );
        self.current_bytes -= bytes;
    }
}

/// Shared handle onto a [`MemoryLedger`].
#[derive(Clone, Debug, Default)]
pub struct Ledger(Rc<RefCell<MemoryLedger>>);

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&self, bytes: usize) {
        self.0.borrow_mut().alloc(bytes);
    }

    pub fn free(&self, bytes: usize) {
        self.0.borrow_mut().free(bytes);
    }

    pub fn current_bytes(&self) -> usize {
        self.0.borrow().current_bytes
    }

    pub fn peak_bytes(&self) -> usize {
        self.0.borrow().peak_bytes
    }

    /// Start attributing peaks to `phase`. The phase peak starts at the bytes
    /// already live, since those are resident during the phase too.
    pub fn begin_phase(&self, phase: &str) {
        let mut inner = self.0.borrow_mut();
        let live = inner.current_bytes;
        let peak = inner.phase_peaks.entry(phase.to_string()).or_default();
        *peak = (*peak).max(live);
        inner.active_phase = Some(phase.to_string());
    }

    pub fn end_phase(&self) {
        self.0.borrow_mut().active_phase = None;
    }

    pub fn set_param_bytes(&self, bytes: usize) {
        self.0.borrow_mut().param_bytes = bytes;
    }

    pub fn record_param_swap(&self, bytes: usize) {
        let mut inner = self.0.borrow_mut();
        inner.param_swap_events += 1;
        inner.param_swap_bytes += bytes;
    }

    pub fn snapshot(&self) -> MemoryLedger {
        self.0.borrow().clone()
    }
}

/// Maximum concurrently live tracked bytes recorded within `phase`.
pub fn peak_memory(ledger: &MemoryLedger, phase: &str) -> Result<usize> {
    ledger
        .phase_peaks
        .get(phase)
        .copied()
        .ok_or_else(|| Error::UnknownPhase(phase.to_string()))
}
