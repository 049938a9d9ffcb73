//! Named parameter binding for one forward/backward pass.
//!
//! Model structs own plain [`Tensor`] parameters. Each training step binds
//! them onto a fresh tape in a fixed order; after `backward` the recorded
//! `(name, Var)` pairs hand the optimizer one gradient per parameter.

use super::{Tape, Tensor, Var};

pub struct Binder<'t> {
    tape: &'t Tape,
    entries: Vec<(String, Var)>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Binder {
            tape,
            entries: Vec::new(),
        }
    }

    pub fn tape(&self) -> &Tape {
        self.tape
    }

    /// Lifts a parameter onto the tape and records it under `name`.
    pub fn bind(&mut self, name: String, value: &Tensor) -> Var {
        let var = self.tape.param(value);
        self.entries.push((name, var.clone()));
        var
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Bound parameters in binding order.
    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    /// Gradient per bound parameter, zeros where none accumulated.
    pub fn gradients(&self) -> Vec<Tensor> {
        self.entries
            .iter()
            .map(|(_, var)| {
                var.grad()
                    .unwrap_or_else(|| Tensor::zeros(&var.shape()))
            })
            .collect()
    }
}
