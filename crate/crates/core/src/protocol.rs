//! Piecewise-constant annealing schedules `(γ(t), u(t))` on `[0, τ]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::ControlPoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    PiecewiseConstant,
}

/// A breakpoint: `control` holds from `t` until the next breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakpoint {
    pub t: f64,
    #[serde(flatten)]
    pub control: ControlPoint,
}

/// One stretch of propagation with a fixed operator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub control: ControlPoint,
}

impl Segment {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    tau: f64,
    points: Vec<Breakpoint>,
    #[serde(default)]
    interpolation: Interpolation,
    steps: usize,
}

impl Protocol {
    /// Breakpoints start at `t = 0`, increase strictly and, when there is more
    /// than one, end at `t = τ`. A single breakpoint is a constant schedule.
    pub fn new(tau: f64, points: Vec<Breakpoint>, steps: usize) -> Result<Self> {
        let p = Self {
            tau,
            points,
            interpolation: Interpolation::PiecewiseConstant,
            steps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidProtocol(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidProtocol("steps must be >= 1".into()));
        }
        let Some(first) = self.points.first() else {
            return Err(Error::InvalidProtocol("no breakpoints".into()));
        };
        if first.t != 0.0 {
            return Err(Error::InvalidProtocol(format!(
                "first breakpoint at t = {}, expected 0",
                first.t
            )));
        }
        if self.points.len() > 1 && self.points.last().map(|p| p.t) != Some(self.tau) {
            return Err(Error::InvalidProtocol("last breakpoint must sit at t = tau".into()));
        }
        if let Some(w) = self.points.windows(2).find(|w| !(w[1].t > w[0].t)) {
            return Err(Error::InvalidProtocol(format!(
                "breakpoint times must increase strictly ({} then {})",
                w[0].t, w[1].t
            )));
        }
        for p in &self.points {
            p.control.validate()?;
        }
        Ok(())
    }

    pub fn constant(control: ControlPoint, tau: f64, steps: usize) -> Result<Self> {
        Self::new(tau, vec![Breakpoint { t: 0.0, control }], steps)
    }

    /// Linear ramp of `γ` sampled at interval midpoints into `steps` equal
    /// intervals, constant `u`. The closing breakpoint at `τ` carries the
    /// ramp's end value `gamma_to`.
    pub fn linear(gamma_from: f64, gamma_to: f64, u: f64, tau: f64, steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidProtocol("steps must be >= 1".into()));
        }
        let dt = tau / steps as f64;
        let mut points: Vec<Breakpoint> = (0..steps)
            .map(|k| {
                let mid = (k as f64 + 0.5) / steps as f64;
                Breakpoint {
                    t: k as f64 * dt,
                    control: ControlPoint::new(gamma_from + (gamma_to - gamma_from) * mid, u),
                }
            })
            .collect();
        points.push(Breakpoint {
            t: tau,
            control: ControlPoint::new(gamma_to, u),
        });
        Self::new(tau, points, steps)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn points(&self) -> &[Breakpoint] {
        &self.points
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    /// Copy with a different number of propagation steps.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        let mut p = self.clone();
        p.steps = steps;
        p.validate()?;
        Ok(p)
    }

    /// Control in force at `t`: intervals are left-closed and `t = τ` maps
    /// to the final breakpoint.
    pub fn at(&self, t: f64) -> Result<ControlPoint> {
        if !(0.0..=self.tau).contains(&t) {
            return Err(Error::OutOfRange { t, tau: self.tau });
        }
        let idx = self.points.partition_point(|p| p.t <= t);
        Ok(self.points[idx - 1].control)
    }

    /// Control at the final instant, which defines the target operator.
    pub fn final_control(&self) -> ControlPoint {
        self.points[self.points.len() - 1].control
    }

    /// Whether the same control holds on all of `[0, τ]`.
    pub fn is_constant(&self) -> bool {
        self.points.iter().all(|p| p.control == self.points[0].control)
    }

    /// Distinct controls in order of first appearance over `[0, τ]`.
    pub fn distinct_controls(&self) -> Vec<ControlPoint> {
        let mut out: Vec<ControlPoint> = Vec::new();
        for p in &self.points {
            if !out.contains(&p.control) {
                out.push(p.control);
            }
        }
        out
    }

    /// Propagation grid: the equal step grid refined by every breakpoint,
    /// each piece carrying the control in force at its start.
    pub fn segments(&self) -> Vec<Segment> {
        let dt = self.tau / self.steps as f64;
        let mut times: Vec<f64> = (0..self.steps).map(|k| k as f64 * dt).collect();
        times.extend(self.points.iter().map(|p| p.t));
        times.push(self.tau);
        times.sort_by(f64::total_cmp);
        let eps = 1e-12 * self.tau;
        times.dedup_by(|b, a| (*b - *a).abs() <= eps);
        // Snap the closing time exactly onto τ.
        if let Some(last) = times.last_mut() {
            *last = self.tau;
        }
        times
            .windows(2)
            .map(|w| Segment {
                start: w[0],
                end: w[1],
                control: self.at(w[0]).expect("grid lies inside [0, tau]"),
            })
            .collect()
    }
}
