//! Per-period integrators.
//!
//! [`SteppedEngine`] performs every backward-Euler step explicitly.
//! [`PeriodMapEngine`] exploits linearity: within a phase one step is an
//! affine map of the reactive state, so a whole period (and the per-period
//! sums of the reported observables) can be precomputed once and then applied
//! in `O(m²)` per period, where `m` is the number of reactive elements.

use crate::linalg::Matrix;
use crate::scalar::Real;

use super::mna::{Network, Phase, PhaseSystem};
use super::SimError;

/// Bound on any state magnitude before the run is declared numerically failed.
pub const STATE_LIMIT: f64 = 1e9;

/// Averages over one switching period.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeriodStats<T> {
    pub v_out: T,
    pub p_in: T,
    pub p_out: T,
}

/// Yields successive period statistics.
pub trait PeriodIntegrator<T> {
    fn next_period(&mut self) -> Result<PeriodStats<T>, SimError>;

    /// Current reactive state (capacitor voltages, then inductor currents).
    fn state(&self) -> &[T];
}

/// Number of phase-I steps in a period.
pub fn phase_one_steps(steps_per_period: usize, duty: f64) -> usize {
    let n = (duty * steps_per_period as f64).round() as usize;
    n.clamp(1, steps_per_period.saturating_sub(1).max(1))
}

fn check_state<T: Real>(state: &[T]) -> Result<(), SimError> {
    let limit = T::lit(STATE_LIMIT);
    if state.iter().all(|v| v.is_finite() && v.abs() <= limit) {
        Ok(())
    } else {
        Err(SimError::NonFinite)
    }
}

/// Linear functionals of the solution vector that feed the observables.
struct Probes<T> {
    out: Vec<(usize, T)>,
    src: Vec<(usize, T)>,
    load: Vec<(usize, T)>,
    load_r: Option<T>,
}

impl<T: Real> Probes<T> {
    fn new(net: &Network<T>, system: &PhaseSystem<T>) -> Self {
        let node = |n: usize, w: T| if n == 0 { vec![] } else { vec![(n - 1, w)] };
        let (load, load_r) = match net.load_terminals() {
            Some((a, b, r)) => {
                let mut f = node(a, T::one());
                f.extend(node(b, -T::one()));
                (f, Some(r))
            }
            None => (vec![], None),
        };
        Self {
            out: node(net.output, T::one()),
            src: system
                .layout
                .sources
                .iter()
                .map(|&(row, v)| (row, -v))
                .collect(),
            load,
            load_r,
        }
    }

    fn apply(f: &[(usize, T)], z: &[T]) -> T {
        let mut acc = T::zero();
        for &(i, w) in f {
            acc += w * z[i];
        }
        acc
    }
}

/// Explicit step-by-step integration.
pub struct SteppedEngine<'a, T> {
    net: &'a Network<T>,
    h: T,
    steps: usize,
    phase_one: usize,
    cache: bool,
    systems: [PhaseSystem<T>; 2],
    probes: Probes<T>,
    state: Vec<T>,
    rhs: Vec<T>,
    z: Vec<T>,
}

impl<'a, T: Real> SteppedEngine<'a, T> {
    /// With `cache == false` the phase matrix is re-stamped and re-factored on
    /// every step.
    pub fn new(
        net: &'a Network<T>,
        h: T,
        steps: usize,
        duty: f64,
        cache: bool,
    ) -> Result<Self, SimError> {
        let systems = [
            net.phase_system(Phase::I, h)?,
            net.phase_system(Phase::II, h)?,
        ];
        let dim = systems[0].dim();
        let probes = Probes::new(net, &systems[0]);
        Ok(Self {
            net,
            h,
            steps,
            phase_one: phase_one_steps(steps, duty),
            cache,
            state: vec![T::zero(); systems[0].layout.state_len()],
            probes,
            systems,
            rhs: vec![T::zero(); dim],
            z: vec![T::zero(); dim],
        })
    }
}

impl<T: Real> PeriodIntegrator<T> for SteppedEngine<'_, T> {
    fn next_period(&mut self) -> Result<PeriodStats<T>, SimError> {
        let (mut sv, mut sp_in, mut sp_out) = (T::zero(), T::zero(), T::zero());
        for n in 0..self.steps {
            let (phase, idx) = if n < self.phase_one {
                (Phase::I, 0)
            } else {
                (Phase::II, 1)
            };
            let fresh;
            let system = if self.cache {
                &self.systems[idx]
            } else {
                fresh = self.net.phase_system(phase, self.h)?;
                &fresh
            };
            system.rhs(&self.state, &mut self.rhs);
            system.solve_into(&self.rhs, &mut self.z);
            system.extract_state(&self.z, &mut self.state);
            check_state(&self.state)?;
            sv += Probes::apply(&self.probes.out, &self.z);
            sp_in += Probes::apply(&self.probes.src, &self.z);
            if let Some(r) = self.probes.load_r {
                let u = Probes::apply(&self.probes.load, &self.z);
                sp_out += u * u / r;
            }
        }
        let n = T::from_usize_lossy(self.steps);
        Ok(PeriodStats {
            v_out: sv / n,
            p_in: sp_in / n,
            p_out: sp_out / n,
        })
    }

    fn state(&self) -> &[T] {
        &self.state
    }
}

/// Affine map of the reactive state over one step of a phase, plus the
/// observables of the post-step solution as affine functions of the pre-step
/// state.
struct StepMap<T> {
    a: Matrix<T>,
    b: Vec<T>,
    out: (Vec<T>, T),
    src: (Vec<T>, T),
    load: (Vec<T>, T),
}

impl<T: Real> StepMap<T> {
    fn new(system: &PhaseSystem<T>, probes: &Probes<T>) -> Self {
        let m = system.layout.state_len();
        let dim = system.dim();
        let mut rhs = vec![T::zero(); dim];
        let mut state = vec![T::zero(); m];
        // Particular solution for zero state (sources only).
        system.rhs(&state, &mut rhs);
        let t = system_solve(system, &rhs);
        // Homogeneous responses: rhs(e_j) - rhs(0) has no source terms.
        let rhs0 = rhs.clone();
        let mut columns = Vec::with_capacity(m);
        for j in 0..m {
            state.iter_mut().for_each(|v| *v = T::zero());
            state[j] = T::one();
            system.rhs(&state, &mut rhs);
            for (r, r0) in rhs.iter_mut().zip(&rhs0) {
                *r -= *r0;
            }
            columns.push(system_solve(system, &rhs));
        }
        let mut a = Matrix::zeros(m, m);
        let mut next = vec![T::zero(); m];
        for (j, col) in columns.iter().enumerate() {
            system.extract_state(col, &mut next);
            for i in 0..m {
                a[(i, j)] = next[i];
            }
        }
        let mut b = vec![T::zero(); m];
        system.extract_state(&t, &mut b);
        let functional = |f: &[(usize, T)]| {
            (
                columns
                    .iter()
                    .map(|c| Probes::apply(f, c))
                    .collect::<Vec<T>>(),
                Probes::apply(f, &t),
            )
        };
        Self {
            a,
            b,
            out: functional(&probes.out),
            src: functional(&probes.src),
            load: functional(&probes.load),
        }
    }
}

fn system_solve<T: Real>(system: &PhaseSystem<T>, rhs: &[T]) -> Vec<T> {
    let mut z = vec![T::zero(); rhs.len()];
    system.solve_into(rhs, &mut z);
    z
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

/// One full period as `x_end = P x0 + q`, with per-period sums of the
/// observables as affine (output, input power) and quadratic (load power)
/// functions of `x0`.
pub struct PeriodMap<T> {
    p: Matrix<T>,
    q: Vec<T>,
    out: (Vec<T>, T),
    src: (Vec<T>, T),
    load_q: Matrix<T>,
    load_r: Vec<T>,
    load_s: T,
}

impl<T: Real> PeriodMap<T> {
    fn build(maps: [&StepMap<T>; 2], steps: usize, phase_one: usize) -> Self {
        let m = maps[0].b.len();
        let mut mm = Matrix::identity(m);
        let mut d = vec![T::zero(); m];
        let mut out = (vec![T::zero(); m], T::zero());
        let mut src = (vec![T::zero(); m], T::zero());
        let mut load_q = Matrix::zeros(m, m);
        let mut load_r = vec![T::zero(); m];
        let mut load_s = T::zero();
        let accumulate = |acc: &mut (Vec<T>, T), f: &(Vec<T>, T), mm: &Matrix<T>, d: &[T]| {
            let w = mm.matvec_transposed(&f.0);
            for (a, x) in acc.0.iter_mut().zip(&w) {
                *a += *x;
            }
            acc.1 += dot(&f.0, d) + f.1;
        };
        for n in 0..steps {
            let map = if n < phase_one { maps[0] } else { maps[1] };
            accumulate(&mut out, &map.out, &mm, &d);
            accumulate(&mut src, &map.src, &mm, &d);
            let w = mm.matvec_transposed(&map.load.0);
            let c = dot(&map.load.0, &d) + map.load.1;
            for i in 0..m {
                for j in 0..m {
                    load_q[(i, j)] += w[i] * w[j];
                }
                load_r[i] += c * w[i];
            }
            load_s += c * c;
            mm = map.a.matmul(&mm);
            let mut nd = map.a.matvec(&d);
            for (x, y) in nd.iter_mut().zip(&map.b) {
                *x += *y;
            }
            d = nd;
        }
        Self {
            p: mm,
            q: d,
            out,
            src,
            load_q,
            load_r,
            load_s,
        }
    }
}

/// Period-at-a-time integration through precomputed period maps.
pub struct PeriodMapEngine<T> {
    map: PeriodMap<T>,
    steps: T,
    load_r: Option<T>,
    state: Vec<T>,
}

impl<T: Real> PeriodMapEngine<T> {
    pub fn new(net: &Network<T>, h: T, steps: usize, duty: f64) -> Result<Self, SimError> {
        let systems = [
            net.phase_system(Phase::I, h)?,
            net.phase_system(Phase::II, h)?,
        ];
        let probes = Probes::new(net, &systems[0]);
        let step_maps = [
            StepMap::new(&systems[0], &probes),
            StepMap::new(&systems[1], &probes),
        ];
        let map = PeriodMap::build(
            [&step_maps[0], &step_maps[1]],
            steps,
            phase_one_steps(steps, duty),
        );
        Ok(Self {
            steps: T::from_usize_lossy(steps),
            load_r: probes.load_r,
            state: vec![T::zero(); map.q.len()],
            map,
        })
    }
}

impl<T: Real> PeriodMapEngine<T> {
    /// Advances the state by `2^log2_periods` periods at once by repeated
    /// squaring of the affine period map.
    pub fn skip_periods(&mut self, log2_periods: u32) -> Result<(), SimError> {
        let mut a = self.map.p.clone();
        let mut c = self.map.q.clone();
        for _ in 0..log2_periods {
            let ac = a.matvec(&c);
            for (x, y) in c.iter_mut().zip(ac) {
                *x += y;
            }
            a = a.matmul(&a);
        }
        let mut next = a.matvec(&self.state);
        for (x, y) in next.iter_mut().zip(&c) {
            *x += *y;
        }
        check_state(&next)?;
        self.state = next;
        Ok(())
    }
}

impl<T: Real> PeriodIntegrator<T> for PeriodMapEngine<T> {
    fn next_period(&mut self) -> Result<PeriodStats<T>, SimError> {
        let x = &self.state;
        let v_sum = dot(&self.map.out.0, x) + self.map.out.1;
        let p_in_sum = dot(&self.map.src.0, x) + self.map.src.1;
        let qx = self.map.load_q.matvec(x);
        let u2_sum = dot(x, &qx) + T::lit(2.0) * dot(&self.map.load_r, x) + self.map.load_s;
        let mut next = self.map.p.matvec(x);
        for (a, b) in next.iter_mut().zip(&self.map.q) {
            *a += *b;
        }
        check_state(&next)?;
        self.state = next;
        Ok(PeriodStats {
            v_out: v_sum / self.steps,
            p_in: p_in_sum / self.steps,
            p_out: self
                .load_r
                .map_or(T::zero(), |r| u2_sum.max(T::zero()) / (r * self.steps)),
        })
    }

    fn state(&self) -> &[T] {
        &self.state
    }
}
