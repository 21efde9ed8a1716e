//! Modified nodal analysis of linear two-phase switched networks.
//!
//! Node 0 is ground. Unknown vector layout: node voltages `1..=n` (rows
//! `0..n`), then one branch current per inductor, then one per voltage source.
//! Capacitors and inductors use backward-Euler companion models.

use crate::linalg::{Lu, Matrix};
use crate::scalar::Real;

use super::SimError;

/// Switching phase of a period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    I,
    II,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Element<T> {
    Resistor {
        a: usize,
        b: usize,
        r: T,
    },
    Capacitor {
        a: usize,
        b: usize,
        c: T,
    },
    Inductor {
        a: usize,
        b: usize,
        l: T,
    },
    /// Resistive switch: `r_on` while `closed_in` is the active phase.
    Switch {
        a: usize,
        b: usize,
        closed_in: Phase,
        r_on: T,
        r_off: T,
    },
    /// Ideal source with `v(pos) - v(neg) = v`.
    VoltageSource {
        pos: usize,
        neg: usize,
        v: T,
    },
}

/// A linear switched network with designated output node and load element.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    /// Non-ground node count; valid node ids are `0..=nodes`.
    pub nodes: usize,
    pub elements: Vec<Element<T>>,
    /// Node whose voltage is reported as the output.
    pub output: usize,
    /// Index into `elements` of the resistor whose dissipation is the output power.
    pub load: Option<usize>,
    /// Shunt conductance from every node to ground.
    pub g_min: T,
}

/// Layout of the reactive state and branch unknowns of a network.
#[derive(Debug, Clone)]
pub(crate) struct Layout<T> {
    pub dim: usize,
    /// `(a, b, C/h)` per capacitor.
    pub caps: Vec<(usize, usize, T)>,
    /// `(branch row, L/h)` per inductor.
    pub inductors: Vec<(usize, T)>,
    /// `(branch row, v)` per voltage source.
    pub sources: Vec<(usize, T)>,
}

impl<T> Layout<T> {
    pub fn state_len(&self) -> usize {
        self.caps.len() + self.inductors.len()
    }
}

impl<T: Real> Network<T> {
    pub(crate) fn layout(&self, h: T) -> Layout<T> {
        let mut caps = Vec::new();
        let mut inductors = Vec::new();
        let mut sources = Vec::new();
        let mut row = self.nodes;
        for e in &self.elements {
            match *e {
                Element::Capacitor { a, b, c } => caps.push((a, b, c / h)),
                Element::Inductor { l, .. } => {
                    inductors.push((row, l / h));
                    row += 1;
                }
                _ => {}
            }
        }
        for e in &self.elements {
            if let Element::VoltageSource { v, .. } = *e {
                sources.push((row, v));
                row += 1;
            }
        }
        Layout {
            dim: row,
            caps,
            inductors,
            sources,
        }
    }

    fn check_nodes(&self) -> Result<(), SimError> {
        let ok = |n: usize| n <= self.nodes;
        for e in &self.elements {
            let (a, b) = match *e {
                Element::Resistor { a, b, .. }
                | Element::Capacitor { a, b, .. }
                | Element::Inductor { a, b, .. }
                | Element::Switch { a, b, .. } => (a, b),
                Element::VoltageSource { pos, neg, .. } => (pos, neg),
            };
            if !ok(a) || !ok(b) {
                return Err(SimError::BadNetwork(format!(
                    "node index out of range in {e:?}"
                )));
            }
        }
        if !ok(self.output) {
            return Err(SimError::BadNetwork("output node out of range".into()));
        }
        Ok(())
    }

    /// Assembles the companion-model matrix for `phase` at step `h`.
    pub fn stamp(&self, phase: Phase, h: T) -> Result<Matrix<T>, SimError> {
        self.check_nodes()?;
        let layout = self.layout(h);
        let mut m = Matrix::zeros(layout.dim, layout.dim);
        let conductance = |m: &mut Matrix<T>, a: usize, b: usize, g: T| {
            if a > 0 {
                m[(a - 1, a - 1)] += g;
            }
            if b > 0 {
                m[(b - 1, b - 1)] += g;
            }
            if a > 0 && b > 0 {
                m[(a - 1, b - 1)] -= g;
                m[(b - 1, a - 1)] -= g;
            }
        };
        let incidence = |m: &mut Matrix<T>, a: usize, b: usize, row: usize| {
            if a > 0 {
                m[(a - 1, row)] += T::one();
                m[(row, a - 1)] += T::one();
            }
            if b > 0 {
                m[(b - 1, row)] -= T::one();
                m[(row, b - 1)] -= T::one();
            }
        };
        let mut ind = layout.inductors.iter();
        let mut src = layout.sources.iter();
        for e in &self.elements {
            match *e {
                Element::Resistor { a, b, r } => conductance(&mut m, a, b, T::one() / r),
                Element::Capacitor { a, b, c } => conductance(&mut m, a, b, c / h),
                Element::Switch {
                    a,
                    b,
                    closed_in,
                    r_on,
                    r_off,
                } => {
                    let r = if closed_in == phase { r_on } else { r_off };
                    conductance(&mut m, a, b, T::one() / r)
                }
                Element::Inductor { a, b, .. } => {
                    let &(row, l_over_h) = ind.next().expect("layout lists every inductor");
                    incidence(&mut m, a, b, row);
                    m[(row, row)] -= l_over_h;
                }
                Element::VoltageSource { .. } => {}
            }
        }
        for e in &self.elements {
            if let Element::VoltageSource { pos, neg, .. } = *e {
                let &(row, _) = src.next().expect("layout lists every source");
                incidence(&mut m, pos, neg, row);
            }
        }
        for i in 0..self.nodes {
            m[(i, i)] += self.g_min;
        }
        Ok(m)
    }

    /// Builds and factors the system for one phase.
    pub fn phase_system(&self, phase: Phase, h: T) -> Result<PhaseSystem<T>, SimError> {
        let matrix = self.stamp(phase, h)?;
        let lu = Lu::factor(&matrix).ok_or(SimError::SingularSystem)?;
        Ok(PhaseSystem {
            layout: self.layout(h),
            matrix,
            lu,
        })
    }

    /// Indices `(a, b)` of the load element, if any.
    pub(crate) fn load_terminals(&self) -> Option<(usize, usize, T)> {
        self.load.and_then(|i| match self.elements.get(i) {
            Some(&Element::Resistor { a, b, r }) => Some((a, b, r)),
            _ => None,
        })
    }
}

/// Factored companion system of one phase; constant for a fixed step size.
#[derive(Debug, Clone)]
pub struct PhaseSystem<T> {
    pub(crate) layout: Layout<T>,
    matrix: Matrix<T>,
    lu: Lu<T>,
}

impl<T: Real> PhaseSystem<T> {
    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.layout.dim
    }

    /// Right-hand side from the previous reactive state
    /// (capacitor voltages followed by inductor currents).
    pub fn rhs(&self, state: &[T], rhs: &mut [T]) {
        rhs.iter_mut().for_each(|v| *v = T::zero());
        let ncap = self.layout.caps.len();
        for (&(a, b, g), &v) in self.layout.caps.iter().zip(&state[..ncap]) {
            let i = g * v;
            if a > 0 {
                rhs[a - 1] += i;
            }
            if b > 0 {
                rhs[b - 1] -= i;
            }
        }
        for (&(row, l_over_h), &i) in self.layout.inductors.iter().zip(&state[ncap..]) {
            rhs[row] = -(l_over_h * i);
        }
        for &(row, v) in &self.layout.sources {
            rhs[row] = v;
        }
    }

    pub fn solve_into(&self, rhs: &[T], out: &mut [T]) {
        self.lu.solve_into(rhs, out);
    }

    /// Extracts the reactive state from a solution vector.
    pub fn extract_state(&self, solution: &[T], state: &mut [T]) {
        let ncap = self.layout.caps.len();
        let node = |n: usize| if n == 0 { T::zero() } else { solution[n - 1] };
        for (s, &(a, b, _)) in state[..ncap].iter_mut().zip(&self.layout.caps) {
            *s = node(a) - node(b);
        }
        for (s, &(row, _)) in state[ncap..].iter_mut().zip(&self.layout.inductors) {
            *s = solution[row];
        }
    }
}
