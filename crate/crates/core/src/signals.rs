//! Log ingestion, zero-phase filtering, differentiation and assembly of the
//! stacked identification problem.

use std::ops::Range;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};

use crate::baseparams::BaseParameterization;
use crate::dynamics::{self, JointState};
use crate::error::{Error, Result};
use crate::kinematics::RobotModel;

pub const DEFAULT_ORDER: usize = 6;
pub const DEFAULT_CUTOFF_HZ: f64 = 5.4;

/// Allowed relative deviation of any sample spacing from the nominal one.
pub const MAX_JITTER: f64 = 0.01;

/// The impulse response is considered settled once it stays below this
/// fraction of its peak.
pub const SETTLING_THRESHOLD: f64 = 1e-6;

const MAX_SETTLING: usize = 10_000_000;

/// Time series of motor positions, velocities and efforts. Matrices are
/// `samples x dof`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub t: Vec<f64>,
    pub q: DMatrix<f64>,
    pub qd: DMatrix<f64>,
    pub tau: DMatrix<f64>,
}

pub fn log_header(dof: usize) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    for prefix in ["q", "qd", "tau"] {
        h.extend((1..=dof).map(|i| format!("{prefix}{i}")));
    }
    h
}

impl TrajectoryLog {
    pub fn new(t: Vec<f64>, q: DMatrix<f64>, qd: DMatrix<f64>, tau: DMatrix<f64>) -> Result<Self> {
        let n = t.len();
        let dof = q.ncols();
        for (m, name) in [(&q, "log positions"), (&qd, "log velocities"), (&tau, "log efforts")] {
            if m.nrows() != n {
                return Err(Error::Dimension {
                    context: name,
                    expected: n,
                    got: m.nrows(),
                });
            }
            if m.ncols() != dof {
                return Err(Error::Dimension {
                    context: name,
                    expected: dof,
                    got: m.ncols(),
                });
            }
        }
        Ok(TrajectoryLog { t, q, qd, tau })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.q.ncols()
    }

    /// Nominal sampling rate from the mean spacing.
    pub fn rate(&self) -> f64 {
        let n = self.t.len();
        if n < 2 {
            return f64::NAN;
        }
        (n - 1) as f64 / (self.t[n - 1] - self.t[0])
    }

    pub fn duration(&self) -> f64 {
        match (self.t.first(), self.t.last()) {
            (Some(a), Some(b)) => b - a,
            _ => 0.0,
        }
    }

    pub fn state(&self, i: usize) -> JointState {
        JointState::new(
            self.q.row(i).transpose(),
            self.qd.row(i).transpose(),
            DVector::zeros(self.dof()),
        )
    }

    /// Rows whose index falls in `range`.
    pub fn slice(&self, range: Range<usize>) -> TrajectoryLog {
        let n = range.len();
        TrajectoryLog {
            t: self.t[range.clone()].to_vec(),
            q: self.q.rows(range.start, n).into_owned(),
            qd: self.qd.rows(range.start, n).into_owned(),
            tau: self.tau.rows(range.start, n).into_owned(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(log_header(self.dof())).expect("in-memory write");
        for i in 0..self.len() {
            let mut rec = vec![self.t[i].to_string()];
            for m in [&self.q, &self.qd, &self.tau] {
                rec.extend(m.row(i).iter().map(|v| v.to_string()));
            }
            w.write_record(rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Parses a log from CSV text; `origin` names the source in errors.
    pub fn from_csv(text: &str, origin: impl Into<PathBuf>) -> Result<Self> {
        let origin = origin.into();
        let parse_err = |line: u64, msg: String| Error::Parse {
            path: origin.clone(),
            line,
            msg,
        };
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let header: Vec<String> = rdr
            .headers()
            .map_err(|e| parse_err(1, e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        if header.len() < 4 || (header.len() - 1) % 3 != 0 || header != log_header((header.len() - 1) / 3) {
            return Err(parse_err(1, format!("header must be `t,q1..qn,qd1..qdn,tau1..taun`, got `{}`", header.join(","))));
        }
        let dof = (header.len() - 1) / 3;
        let mut t = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                parse_err(line, e.to_string())
            })?;
            let line = rec.position().map_or(0, |p| p.line());
            let mut vals = Vec::with_capacity(header.len());
            for (c, field) in rec.iter().enumerate() {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("column `{}`: cannot parse `{field}`", header[c])))?;
                if !v.is_finite() {
                    return Err(parse_err(line, format!("column `{}`: non-finite value `{field}`", header[c])));
                }
                vals.push(v);
            }
            if let Some(&prev) = t.last() {
                if vals[0] <= prev {
                    return Err(Error::Ordering { path: origin, line });
                }
            }
            t.push(vals[0]);
            rows.extend_from_slice(&vals[1..]);
        }
        let n = t.len();
        let block = |k: usize| DMatrix::from_fn(n, dof, |i, j| rows[i * 3 * dof + k * dof + j]);
        let log = TrajectoryLog::new(t, block(0), block(1), block(2))?;
        log.check_spacing().map_err(|msg| parse_err(0, msg))?;
        Ok(log)
    }

    fn check_spacing(&self) -> std::result::Result<(), String> {
        if self.len() < 3 {
            return Ok(());
        }
        let dt = 1.0 / self.rate();
        for (i, w) in self.t.windows(2).enumerate() {
            if ((w[1] - w[0]) - dt).abs() > MAX_JITTER * dt {
                return Err(format!("sample spacing at row {} deviates more than 1% from {dt:.6e} s", i + 1));
            }
        }
        Ok(())
    }
}

pub fn read_log(path: impl AsRef<Path>) -> Result<TrajectoryLog> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TrajectoryLog::from_csv(&text, path)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub order: usize,
    pub cutoff_hz: f64,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            order: DEFAULT_ORDER,
            cutoff_hz: DEFAULT_CUTOFF_HZ,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self, rate: f64) -> Result<()> {
        if self.order == 0 || self.order % 2 != 0 {
            return Err(Error::Config(format!("filter order must be even and positive, got {}", self.order)));
        }
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < 0.5 * rate) {
            return Err(Error::Config(format!(
                "cutoff {} Hz must lie in (0, {} Hz)",
                self.cutoff_hz,
                0.5 * rate
            )));
        }
        Ok(())
    }
}

/// One biquad `b(z) / a(z)` with `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Section {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Section {
    fn run(&self, x: &mut [f64]) {
        let Some(&x0) = x.first() else {
            return;
        };
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        // Steady state for a constant input equal to the first sample.
        let mut z2 = (b2 - a2) * x0;
        let mut z1 = (1.0 - b0) * x0;
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + z1;
            z1 = b1 * xi - a1 * y + z2;
            z2 = b2 * xi - a2 * y;
            *v = y;
        }
    }
}

/// Low-pass Butterworth filter as cascaded second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Butterworth {
    pub sections: Vec<Section>,
    pub rate: f64,
}

impl Butterworth {
    /// Bilinear transform of the analog prototype with the cutoff prewarped.
    pub fn design(spec: &FilterSpec, rate: f64) -> Result<Self> {
        spec.validate(rate)?;
        let n = spec.order;
        let k2 = 2.0 * rate;
        let wc = k2 * (std::f64::consts::PI * spec.cutoff_hz / rate).tan();
        let sections = (0..n / 2)
            .map(|k| {
                let theta = std::f64::consts::PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
                let a = -2.0 * theta.cos() * wc;
                let w2 = wc * wc;
                let a0 = k2 * k2 + a * k2 + w2;
                let a1 = (2.0 * w2 - 2.0 * k2 * k2) / a0;
                let a2 = (k2 * k2 - a * k2 + w2) / a0;
                // Numerator w2 (1 + z^-1)^2, normalized so the DC gain is one.
                let g = (1.0 + a1 + a2) / 4.0;
                Section {
                    b: [g, 2.0 * g, g],
                    a: [a1, a2],
                }
            })
            .collect();
        Ok(Butterworth { sections, rate })
    }

    /// Single-pass magnitude response at `f` Hz.
    pub fn magnitude(&self, f: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / self.rate;
        let z1 = nalgebra::Complex::new(w.cos(), -w.sin());
        let z2 = z1 * z1;
        self.sections
            .iter()
            .map(|s| {
                let num = z2 * s.b[2] + z1 * s.b[1] + s.b[0];
                let den = z2 * s.a[1] + z1 * s.a[0] + 1.0;
                (num / den).norm()
            })
            .product()
    }

    /// Forward pass from a steady state matching the first sample.
    pub fn run(&self, x: &mut [f64]) {
        for s in &self.sections {
            s.run(x);
        }
    }

    /// Samples until the impulse response stays below the settling threshold.
    pub fn settling_length(&self) -> usize {
        let mut states: Vec<(f64, f64)> = vec![(0.0, 0.0); self.sections.len()];
        let mut peak: f64 = 0.0;
        let mut last = 0;
        let mut quiet = 0;
        for i in 0..MAX_SETTLING {
            let mut v = if i == 0 { 1.0 } else { 0.0 };
            for (s, (z1, z2)) in self.sections.iter().zip(states.iter_mut()) {
                let y = s.b[0] * v + *z1;
                *z1 = s.b[1] * v - s.a[0] * y + *z2;
                *z2 = s.b[2] * v - s.a[1] * y;
                v = y;
            }
            peak = peak.max(v.abs());
            if v.abs() > SETTLING_THRESHOLD * peak {
                last = i;
                quiet = 0;
            } else {
                quiet += 1;
                // The slowest pole pair oscillates; require a long quiet run.
                if quiet > 4 * (last + 1) {
                    break;
                }
            }
        }
        last + 1
    }
}

/// Forward-backward Butterworth filtering with odd reflection padding of
/// three settling lengths at each end.
pub fn zero_phase_filter(x: &[f64], spec: &FilterSpec, rate: f64) -> Result<Vec<f64>> {
    let bw = Butterworth::design(spec, rate)?;
    filtfilt(&bw, x, 3 * bw.settling_length())
}

fn filtfilt(bw: &Butterworth, x: &[f64], pad: usize) -> Result<Vec<f64>> {
    let n = x.len();
    if n <= pad {
        return Err(Error::Padding { needed: pad, got: n });
    }
    let (first, last) = (x[0], x[n - 1]);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * last - x[n - 1 - i]));
    bw.run(&mut ext);
    ext.reverse();
    bw.run(&mut ext);
    ext.reverse();
    Ok(ext[pad..pad + n].to_vec())
}

/// Central differences inside, second-order one-sided differences at the ends.
pub fn differentiate(x: &[f64], rate: f64) -> Vec<f64> {
    let n = x.len();
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        2 => vec![(x[1] - x[0]) * rate; 2],
        _ => {
            let mut d = vec![0.0; n];
            d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) * 0.5 * rate;
            d[n - 1] = (3.0 * x[n - 1] - 4.0 * x[n - 2] + x[n - 3]) * 0.5 * rate;
            for i in 1..n - 1 {
                d[i] = (x[i + 1] - x[i - 1]) * 0.5 * rate;
            }
            d
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProblemOptions {
    /// `None` skips filtering entirely.
    pub filter: Option<FilterSpec>,
    /// Positions are passed through unless this is set.
    pub filter_positions: bool,
}

impl Default for ProblemOptions {
    fn default() -> Self {
        ProblemOptions {
            filter: Some(FilterSpec::default()),
            filter_positions: false,
        }
    }
}

/// Stacked regression `W theta ~ b` over the active parameter columns, rows
/// ordered sample-major (`s * dof + motor`).
#[derive(Debug, Clone)]
pub struct IdentificationProblem {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Per-motor weight applied to each residual row.
    pub omega: DVector<f64>,
    pub times: Vec<f64>,
    pub dof: usize,
    pub base: BaseParameterization,
    pub warnings: Vec<String>,
}

impl IdentificationProblem {
    pub fn new(
        w: DMatrix<f64>,
        b: DVector<f64>,
        omega: DVector<f64>,
        times: Vec<f64>,
        base: BaseParameterization,
    ) -> Result<Self> {
        let dof = omega.len();
        if dof == 0 || w.nrows() % dof != 0 || w.nrows() != b.len() || w.nrows() / dof != times.len() {
            return Err(Error::Dimension {
                context: "identification problem rows",
                expected: times.len() * dof,
                got: w.nrows(),
            });
        }
        if w.ncols() != base.n_active() {
            return Err(Error::Dimension {
                context: "identification problem columns",
                expected: base.n_active(),
                got: w.ncols(),
            });
        }
        if omega.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Scaling("weights must be positive and finite".into()));
        }
        Ok(IdentificationProblem {
            w,
            b,
            omega,
            times,
            dof,
            base,
            warnings: Vec::new(),
        })
    }

    pub fn n_samples(&self) -> usize {
        self.times.len()
    }

    pub fn active(&self) -> &[usize] {
        &self.base.active
    }

    pub fn row_weights(&self) -> DVector<f64> {
        DVector::from_fn(self.w.nrows(), |r, _| self.omega[r % self.dof])
    }

    /// `(Omega W, Omega b)`.
    pub fn weighted(&self) -> (DMatrix<f64>, DVector<f64>) {
        let rw = self.row_weights();
        let mut w = self.w.clone();
        for (r, s) in rw.iter().enumerate() {
            w.row_mut(r).scale_mut(*s);
        }
        (w, self.b.component_mul(&rw))
    }

    /// Columns of `W` belonging to the base parameters, in pivot order.
    pub fn base_matrix(&self) -> DMatrix<f64> {
        self.w.select_columns(self.base.permutation[..self.base.n_b].iter())
    }

    pub fn select_samples(&self, range: Range<usize>) -> IdentificationProblem {
        let d = self.dof;
        IdentificationProblem {
            w: self.w.rows(range.start * d, range.len() * d).into_owned(),
            b: self.b.rows(range.start * d, range.len() * d).into_owned(),
            omega: self.omega.clone(),
            times: self.times[range].to_vec(),
            dof: d,
            base: self.base.clone(),
            warnings: self.warnings.clone(),
        }
    }

    /// Samples before `t` and from `t` on.
    pub fn split_at_time(&self, t: f64) -> (IdentificationProblem, IdentificationProblem) {
        let k = self.times.partition_point(|&x| x < t);
        (self.select_samples(0..k), self.select_samples(k..self.n_samples()))
    }

    /// Restricts a full parameter vector to the active columns.
    pub fn to_active(&self, theta: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.base.n_active(), self.base.active.iter().map(|&i| theta[i]))
    }

    /// Rows of motor `i` from a stacked vector.
    pub fn motor_series(&self, v: &DVector<f64>, i: usize) -> Vec<f64> {
        (0..self.n_samples()).map(|s| v[s * self.dof + i]).collect()
    }
}

/// Filters, differentiates and stacks a log into an identification problem.
pub fn build_problem(
    model: &RobotModel,
    base: &BaseParameterization,
    log: &TrajectoryLog,
    opts: &ProblemOptions,
) -> Result<IdentificationProblem> {
    if log.len() < 3 {
        return Err(Error::Precondition(format!("log has {} samples, need at least 3", log.len())));
    }
    let dof = model.dof();
    if log.dof() != dof {
        return Err(Error::Dimension {
            context: "log channels",
            expected: dof,
            got: log.dof(),
        });
    }
    let rate = log.rate();
    let n = log.len();
    let filt = |m: &DMatrix<f64>, enabled: bool| -> Result<DMatrix<f64>> {
        let Some(spec) = opts.filter.filter(|_| enabled) else {
            return Ok(m.clone());
        };
        let bw = Butterworth::design(&spec, rate)?;
        let pad = 3 * bw.settling_length();
        let cols: Vec<usize> = (0..dof).collect();
        let out = crate::par_map(&cols, |&j| filtfilt(&bw, m.column(j).as_slice(), pad));
        let mut r = DMatrix::zeros(n, dof);
        for (j, c) in out.into_iter().enumerate() {
            r.set_column(j, &DVector::from_vec(c?));
        }
        Ok(r)
    };
    let q = filt(&log.q, opts.filter_positions)?;
    let qd = filt(&log.qd, true)?;
    let tau = filt(&log.tau, true)?;
    let mut qdd = DMatrix::zeros(n, dof);
    for j in 0..dof {
        qdd.set_column(j, &DVector::from_vec(differentiate(qd.column(j).as_slice(), rate)));
    }

    let mut warnings = Vec::new();
    let omega = DVector::from_fn(dof, |i, _| {
        let c = tau.column(i);
        let range = c.max() - c.min();
        if range > 0.0 {
            1.0 / range
        } else {
            warnings.push(format!("motor {}: zero effort range, weight set to 1", i + 1));
            1.0
        }
    });

    let idx: Vec<usize> = (0..n).collect();
    let blocks = crate::par_map(&idx, |&s| {
        let st = JointState::new(q.row(s).transpose(), qd.row(s).transpose(), qdd.row(s).transpose());
        dynamics::regressor(model, &st)
    });
    let na = base.n_active();
    let mut w = DMatrix::zeros(n * dof, na);
    let mut b = DVector::zeros(n * dof);
    for (s, y) in blocks.into_iter().enumerate() {
        let y = y?;
        for (c, &a) in base.active.iter().enumerate() {
            for r in 0..dof {
                w[(s * dof + r, c)] = y[(r, a)];
            }
        }
        for r in 0..dof {
            b[s * dof + r] = tau[(s, r)];
        }
    }
    let mut p = IdentificationProblem::new(w, b, omega, log.t.clone(), base.clone())?;
    p.warnings = warnings;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dc_gain_is_one() {
        let bw = Butterworth::design(&FilterSpec::default(), 200.0).unwrap();
        assert_eq!(bw.sections.len(), 3);
        assert!((bw.magnitude(0.0) - 1.0).abs() < 1e-14);
        let c = vec![2.5; 3000];
        let y = zero_phase_filter(&c, &FilterSpec::default(), 200.0).unwrap();
        assert!(y.iter().all(|v| (v - 2.5).abs() < 1e-10));
    }

    #[test]
    fn cutoff_is_half_power() {
        let bw = Butterworth::design(&FilterSpec::default(), 200.0).unwrap();
        assert!((bw.magnitude(5.4) - 0.5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(FilterSpec { order: 5, cutoff_hz: 5.0 }.validate(200.0).is_err());
        assert!(FilterSpec { order: 6, cutoff_hz: 120.0 }.validate(200.0).is_err());
    }

    #[test]
    fn header_layout() {
        assert_eq!(log_header(2), vec!["t", "q1", "q2", "qd1", "qd2", "tau1", "tau2"]);
    }
}
