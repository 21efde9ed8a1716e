//! Fixed-step transient simulation of two-phase switched converters and the
//! validity/efficiency oracle built on it.

pub mod engine;
pub mod mna;

use std::collections::VecDeque;
use std::fmt;

use thiserror::Error;

use crate::circuit::{DeviceKind, PortId, Topology, NUM_DEVICES};
use crate::scalar::Real;

pub use engine::{PeriodIntegrator, PeriodMapEngine, PeriodStats, SteppedEngine};
pub use mna::{Element, Network, Phase, PhaseSystem};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("singular system")]
    SingularSystem,
    #[error("state diverged or became non-finite")]
    NonFinite,
    #[error("bad network: {0}")]
    BadNetwork(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
}

/// The duty cycles a record may use.
pub const DUTY_CYCLES: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

/// How periods are integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Integrator {
    /// Precomputed period maps; reports the operating point after
    /// `2^LONG_RUN_LOG2` periods, reached by repeated squaring.
    #[default]
    PeriodMap,
    /// Explicit stepping until the windowed steady-state test passes or
    /// `max_periods` runs out; `cache` reuses the per-phase factorization.
    Stepped { cache: bool },
}

/// Harness and solver parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub c_dev: f64,
    pub l_dev: f64,
    pub r_in: f64,
    pub r_load: f64,
    pub c_out: f64,
    pub v_in: f64,
    pub f_sw: f64,
    pub r_on: f64,
    pub r_off: f64,
    pub g_min: f64,
    pub steps_per_period: usize,
    pub max_periods: usize,
    pub min_periods: usize,
    pub ss_tol: f64,
    pub integrator: Integrator,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            c_dev: 10e-6,
            l_dev: 100e-6,
            r_in: 0.1,
            r_load: 50.0,
            c_out: 10e-6,
            v_in: 100.0,
            f_sw: 1e6,
            r_on: 0.05,
            r_off: 1e6,
            g_min: 1e-9,
            steps_per_period: 100,
            max_periods: 4000,
            min_periods: 50,
            ss_tol: 1e-4,
            integrator: Integrator::PeriodMap,
        }
    }
}

impl SimConfig {
    pub fn step(&self) -> f64 {
        1.0 / (self.f_sw * self.steps_per_period as f64)
    }

    pub fn validate(&self, duty: f64) -> Result<(), SimError> {
        if !DUTY_CYCLES.iter().any(|d| (d - duty).abs() < 1e-12) {
            return Err(SimError::BadConfig(format!(
                "duty {duty} is not one of {DUTY_CYCLES:?}"
            )));
        }
        if self.steps_per_period < 2 || self.max_periods == 0 || self.min_periods > self.max_periods
        {
            return Err(SimError::BadConfig(
                "inconsistent step/period counts".into(),
            ));
        }
        let positive = [
            self.c_dev,
            self.l_dev,
            self.r_in,
            self.r_load,
            self.c_out,
            self.f_sw,
            self.r_on,
            self.r_off,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.g_min < 0.0 || !(self.ss_tol > 0.0) {
            return Err(SimError::BadConfig(
                "component values must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Why a run produced no usable operating point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InvalidReason {
    Numerical,
    NoPowerTransfer,
    NoInputPower,
    EfficiencyOutOfRange,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvalidReason::Numerical => "numerical",
            InvalidReason::NoPowerTransfer => "no-power-transfer",
            InvalidReason::NoInputPower => "no-input-power",
            InvalidReason::EfficiencyOutOfRange => "efficiency-out-of-range",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimStatus {
    Valid,
    Invalid(InvalidReason),
}

/// Output power below which a run counts as transferring nothing.
pub const MIN_TRANSFER_POWER: f64 = 1e-6;

/// Steady-state summary of a transient run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimResult<T> {
    pub status: SimStatus,
    pub v_out_avg: T,
    pub p_in: T,
    pub p_out: T,
    pub efficiency: Option<T>,
    pub periods_run: usize,
}

/// Nets mapped to simulator nodes: the ground net is node 0, other nets follow
/// in representative order, and the source node is last.
pub fn topology_network<T: Real>(t: &Topology, cfg: &SimConfig) -> Network<T> {
    let ground = t.net_of(PortId::GROUND);
    let mut node_of = [0usize; crate::circuit::NUM_PORTS];
    let mut next = 1;
    for net in t.nets() {
        if net != ground {
            node_of[net.index()] = next;
            next += 1;
        }
    }
    let node = |p: PortId| node_of[t.net_of(p).index()];
    let src = next;
    let mut elements = Vec::with_capacity(NUM_DEVICES + 4);
    for slot in 0..NUM_DEVICES {
        let a = node(PortId::device(slot, 1));
        let b = node(PortId::device(slot, 2));
        elements.push(match t.pool().kind(slot) {
            DeviceKind::Capacitor => Element::Capacitor {
                a,
                b,
                c: T::lit(cfg.c_dev),
            },
            DeviceKind::Inductor => Element::Inductor {
                a,
                b,
                l: T::lit(cfg.l_dev),
            },
            DeviceKind::PhaseISwitch | DeviceKind::PhaseIISwitch => Element::Switch {
                a,
                b,
                closed_in: if t.pool().kind(slot) == DeviceKind::PhaseISwitch {
                    Phase::I
                } else {
                    Phase::II
                },
                r_on: T::lit(cfg.r_on),
                r_off: T::lit(cfg.r_off),
            },
        });
    }
    let out = node(PortId::OUT);
    elements.push(Element::VoltageSource {
        pos: src,
        neg: 0,
        v: T::lit(cfg.v_in),
    });
    elements.push(Element::Resistor {
        a: src,
        b: node(PortId::IN),
        r: T::lit(cfg.r_in),
    });
    let load = elements.len();
    elements.push(Element::Resistor {
        a: out,
        b: 0,
        r: T::lit(cfg.r_load),
    });
    elements.push(Element::Capacitor {
        a: out,
        b: 0,
        c: T::lit(cfg.c_out),
    });
    Network {
        nodes: src,
        elements,
        output: out,
        load: Some(load),
        g_min: T::lit(cfg.g_min),
    }
}

/// Periods averaged into the reported operating point.
const WINDOW: usize = 10;

/// Base-2 logarithm of the horizon, in periods, after which the default
/// integrator reads off the operating point.
pub const LONG_RUN_LOG2: u32 = 48;

fn failed<T: Real>(periods_run: usize) -> SimResult<T> {
    SimResult {
        status: SimStatus::Invalid(InvalidReason::Numerical),
        v_out_avg: T::nan(),
        p_in: T::nan(),
        p_out: T::nan(),
        efficiency: None,
        periods_run,
    }
}

fn summarize<T: Real>(window: &[PeriodStats<T>], periods_run: usize) -> SimResult<T> {
    let n = T::from_usize_lossy(window.len());
    let mean = |f: fn(&PeriodStats<T>) -> T| window.iter().map(f).fold(T::zero(), |a, b| a + b) / n;
    let v_out_avg = mean(|s| s.v_out);
    let p_in = mean(|s| s.p_in);
    let p_out = mean(|s| s.p_out);
    let efficiency = (p_in > T::zero()).then(|| p_out / p_in);
    let status = if !(v_out_avg.is_finite() && p_in.is_finite() && p_out.is_finite()) {
        SimStatus::Invalid(InvalidReason::Numerical)
    } else if p_out < T::lit(MIN_TRANSFER_POWER) {
        SimStatus::Invalid(InvalidReason::NoPowerTransfer)
    } else if p_in <= T::zero() {
        SimStatus::Invalid(InvalidReason::NoInputPower)
    } else if efficiency.is_some_and(|e| e > T::one()) {
        SimStatus::Invalid(InvalidReason::EfficiencyOutOfRange)
    } else {
        SimStatus::Valid
    };
    SimResult {
        status,
        v_out_avg,
        p_in,
        p_out,
        efficiency: if status == SimStatus::Valid {
            efficiency
        } else {
            None
        },
        periods_run,
    }
}

/// Runs periods until the output average changes by at most `ss_tol`
/// (relative) for 5 consecutive periods after `min_periods`, or until
/// `max_periods`; reports averages over the final 10 periods.
pub fn run_to_steady_state<T: Real, I: PeriodIntegrator<T>>(
    integrator: &mut I,
    cfg: &SimConfig,
) -> SimResult<T> {
    const SETTLED_PERIODS: usize = 5;
    let tol = T::lit(cfg.ss_tol);
    let mut history: VecDeque<PeriodStats<T>> = VecDeque::with_capacity(WINDOW);
    let mut prev: Option<T> = None;
    let mut settled = 0;
    let mut periods = 0;
    for k in 1..=cfg.max_periods {
        periods = k;
        let Ok(stats) = integrator.next_period() else {
            return failed(k);
        };
        if history.len() == WINDOW {
            history.pop_front();
        }
        history.push_back(stats);
        if let Some(p) = prev {
            if (stats.v_out - p).abs() <= tol * T::one().max(stats.v_out.abs()) {
                settled += 1;
            } else {
                settled = 0;
            }
        }
        prev = Some(stats.v_out);
        if k >= cfg.min_periods && settled >= SETTLED_PERIODS {
            break;
        }
    }
    summarize(history.make_contiguous(), periods)
}

/// Operating point after `2^LONG_RUN_LOG2` periods from rest.
pub fn run_long_horizon<T: Real>(engine: &mut PeriodMapEngine<T>) -> SimResult<T> {
    let skipped = 1usize << LONG_RUN_LOG2;
    if engine.skip_periods(LONG_RUN_LOG2).is_err() {
        return failed(skipped);
    }
    let mut window = Vec::with_capacity(WINDOW);
    for k in 1..=WINDOW {
        match engine.next_period() {
            Ok(s) => window.push(s),
            Err(_) => return failed(skipped + k),
        }
    }
    summarize(&window, skipped + WINDOW)
}

/// Simulates an arbitrary switched network with the integrator of `cfg`.
pub fn simulate_network<T: Real>(
    net: &Network<T>,
    duty: f64,
    cfg: &SimConfig,
) -> Result<SimResult<T>, SimError> {
    let h = T::lit(cfg.step());
    Ok(match cfg.integrator {
        Integrator::PeriodMap => run_long_horizon(&mut PeriodMapEngine::new(
            net,
            h,
            cfg.steps_per_period,
            duty,
        )?),
        Integrator::Stepped { cache } => {
            let mut engine = SteppedEngine::new(net, h, cfg.steps_per_period, duty, cache)?;
            run_to_steady_state(&mut engine, cfg)
        }
    })
}

/// Transient analysis of a topology inside the standard harness.
pub fn transient<T: Real>(
    t: &Topology,
    duty: f64,
    cfg: &SimConfig,
) -> Result<SimResult<T>, SimError> {
    cfg.validate(duty)?;
    simulate_network(&topology_network::<T>(t, cfg), duty, cfg)
}

/// Oracle thresholds on top of a transient run.
pub const MIN_P_OUT: f64 = 0.01;
pub const MIN_V_OUT: f64 = 1.0;
pub const MIN_EFFICIENCY: f64 = 0.001;

/// Validity label and efficiency for one `(topology, duty)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub valid: bool,
    pub efficiency: Option<f64>,
    pub v_out_avg: f64,
    pub reason: Option<String>,
}

/// Labels a topology: valid iff the run converged to a usable operating point
/// with `p_out >= 0.01 W`, `|v_out| >= 1 V` and `0.001 <= η <= 1`.
pub fn oracle(t: &Topology, duty: f64, cfg: &SimConfig) -> Verdict {
    match transient::<f64>(t, duty, cfg) {
        Err(e) => Verdict {
            valid: false,
            efficiency: None,
            v_out_avg: f64::NAN,
            reason: Some(e.to_string()),
        },
        Ok(r) => judge(&r),
    }
}

/// Applies the oracle thresholds to a simulation result.
pub fn judge(r: &SimResult<f64>) -> Verdict {
    let reason = match (r.status, r.efficiency) {
        (SimStatus::Invalid(why), _) => Some(why.to_string()),
        (SimStatus::Valid, None) => Some("efficiency undefined".to_string()),
        (SimStatus::Valid, Some(eta)) => {
            if r.p_out < MIN_P_OUT {
                Some(format!("p_out {:.3e} W below {MIN_P_OUT}", r.p_out))
            } else if r.v_out_avg.abs() < MIN_V_OUT {
                Some(format!(
                    "|v_out| {:.3e} V below {MIN_V_OUT}",
                    r.v_out_avg.abs()
                ))
            } else if !(MIN_EFFICIENCY..=1.0).contains(&eta) {
                Some(format!("efficiency {eta:.3e} out of range"))
            } else {
                None
            }
        }
    };
    Verdict {
        valid: reason.is_none(),
        efficiency: if reason.is_none() { r.efficiency } else { None },
        v_out_avg: r.v_out_avg,
        reason,
    }
}
