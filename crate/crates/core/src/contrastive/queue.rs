use alloc::collections::VecDeque;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::cohort::Label;
use crate::error::{config, shape, Result};
use crate::math;

/// FIFO of unit-norm momentum embeddings for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQueue {
    pub label: Label,
    pub capacity: usize,
    entries: VecDeque<(Vec<f64>, String)>,
}

impl LabelQueue {
    pub fn new(label: Label, capacity: usize) -> Self {
        Self { label, capacity, entries: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn embeddings(&self) -> impl Iterator<Item = &Vec<f64>> + '_ {
        self.entries.iter().map(|(e, _)| e)
    }

    pub fn entries(&self) -> impl Iterator<Item = &(Vec<f64>, String)> + '_ {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Vec<f64>> {
        self.entries.get(i).map(|(e, _)| e)
    }

    /// Appends in order, evicting the oldest entries beyond capacity.
    pub fn enqueue(&mut self, label: Label, batch: impl IntoIterator<Item = (Vec<f64>, String)>) -> Result<()> {
        if label != self.label {
            return Err(config(format!(
                "cannot push label {} embeddings into the label {} queue",
                label.as_u8(),
                self.label.as_u8()
            )));
        }
        for (e, id) in batch {
            if (math::norm(&e) - 1.0).abs() > 1e-9 {
                return Err(shape(format!("queue entry for {id} is not unit-norm")));
            }
            if self.capacity == 0 {
                continue;
            }
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((e, id));
        }
        Ok(())
    }
}
