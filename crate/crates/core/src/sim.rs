//! Seeded Monte Carlo simulation of the closed loop.
//!
//! Randomness comes from ChaCha8 (a counter-based stream cipher generator).
//! Replica `r` draws its process disturbances from stream `2r` of the
//! disturbance seed and its measurement noise from stream `2r + 1` of the
//! noise seed, so replicas are independent and every run is reproducible
//! bit for bit. Replicas may run on separate threads; their statistics are
//! merged in replica order.

use std::io::{self, Write};

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::EstimatorDesign;
use crate::linalg::{self, Matrix};
use crate::synthesis::{ChanceConstraint, CostSpec, SystemModel, Target};

/// Number of batches per replica used for batch-means standard errors.
pub const BATCHES: usize = 100;
/// Upper limit on the default burn-in.
pub const MAX_BURN_IN: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseClass {
    Gaussian,
    /// Independent uniforms on `[−√3, √3]` mapped through a covariance root.
    UniformWss,
    /// Independent `±1` signs mapped through a covariance root.
    TwoPointWss,
    /// Always zero; for tests.
    ZeroTest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSpec {
    pub class: NoiseClass,
    pub covariance: Matrix,
    pub seed: u64,
}

impl DisturbanceSpec {
    pub fn new(class: NoiseClass, covariance: Matrix, seed: u64) -> Self {
        Self { class, covariance, seed }
    }
}

/// Draws zero-mean vectors with a given covariance.
#[derive(Debug, Clone)]
pub struct Sampler {
    class: NoiseClass,
    root: Matrix,
    unit: DVector<f64>,
}

impl Sampler {
    pub fn new(class: NoiseClass, covariance: &Matrix) -> Result<Self> {
        let root = linalg::sqrt_psd(covariance)?;
        let unit = DVector::zeros(root.ncols());
        Ok(Self { class, root, unit })
    }

    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    /// Writes one draw into `out`.
    pub fn sample_into<R: Rng + ?Sized>(&mut self, rng: &mut R, out: &mut DVector<f64>) {
        let s3 = 3f64.sqrt();
        match self.class {
            NoiseClass::ZeroTest => {
                out.fill(0.0);
                return;
            }
            NoiseClass::Gaussian => self.unit.iter_mut().for_each(|v| *v = rng.sample(StandardNormal)),
            NoiseClass::UniformWss => self.unit.iter_mut().for_each(|v| *v = rng.random_range(-s3..=s3)),
            NoiseClass::TwoPointWss => {
                self.unit.iter_mut().for_each(|v| *v = if rng.random::<bool>() { 1.0 } else { -1.0 })
            }
        }
        out.gemv(1.0, &self.root, &self.unit, 0.0);
    }

    pub fn sample<R: Rng + ?Sized>(&mut self, rng: &mut R) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.sample_into(rng, &mut out);
        out
    }
}

/// A sampler for the wide-sense stationary classes (and the others).
pub fn make_wss_sampler(spec: &DisturbanceSpec) -> Result<Sampler> {
    Sampler::new(spec.class, &spec.covariance)
}

/// The system under a fixed gain, with or without a state estimator.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub model: &'a SystemModel,
    pub k: &'a Matrix,
    /// With an estimator the input is `u = K x̂` (output feedback).
    pub estimator: Option<&'a EstimatorDesign>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub steps: usize,
    /// Steps discarded before statistics are collected; `None` picks
    /// [`default_burn_in`].
    pub burn_in: Option<usize>,
    pub x0: Option<DVector<f64>>,
    pub replicas: usize,
    /// Worker threads for replicas; results do not depend on it.
    pub jobs: usize,
    /// Record every `stride`-th post-burn-in step of replica 0.
    pub trace_stride: Option<usize>,
}

impl SimConfig {
    pub fn new(steps: usize) -> Self {
        Self { steps, burn_in: None, x0: None, replicas: 1, jobs: 1, trace_stride: None }
    }
}

/// `10·⌈ln(1e−6)/ln ρ⌉`, capped at [`MAX_BURN_IN`].
pub fn default_burn_in(spectral_radius: f64) -> usize {
    if spectral_radius <= 0.0 {
        return 10;
    }
    if spectral_radius >= 1.0 {
        return MAX_BURN_IN;
    }
    let mixing = (1e-6f64.ln() / spectral_radius.ln()).ceil().max(1.0);
    ((10.0 * mixing) as usize).min(MAX_BURN_IN)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub violated: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ViolationStat {
    pub label: String,
    pub violations: u64,
    pub rate: f64,
    /// `√(p̂(1 − p̂)/N)`, which treats the steps as independent.
    pub standard_error: f64,
    /// Batch-means standard error, which accounts for autocorrelation.
    pub batch_standard_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    /// Post-burn-in steps over all replicas.
    pub steps: usize,
    pub burn_in: usize,
    pub replicas: usize,
    pub seed: u64,
    pub violations: Vec<ViolationStat>,
    /// Second moments about zero (the stationary mean is zero).
    pub cov_state: Matrix,
    pub cov_input: Matrix,
    /// Batch-means standard errors of the entries of `cov_state`.
    pub cov_state_se: Matrix,
    pub cov_input_se: Matrix,
    /// Output feedback only: second moment of `x̂` and cross moment `E[e x̂ᵀ]`.
    pub cov_estimate: Option<Matrix>,
    pub cross_error_estimate: Option<Matrix>,
    pub cross_error_estimate_se: Option<Matrix>,
    /// Time average of `xᵀQx + uᵀRu` when a cost was supplied.
    pub empirical_cost: Option<f64>,
    pub trace: Vec<TraceRow>,
}

impl SimulationReport {
    pub fn violation_rates(&self) -> Vec<f64> {
        self.violations.iter().map(|v| v.rate).collect()
    }

    pub fn violation(&self, label: &str) -> Option<&ViolationStat> {
        self.violations.iter().find(|v| v.label == label)
    }

    /// Writes every field as `key,value` CSV rows; matrices are flattened
    /// row-major with `[i;j]` suffixes.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "key,value")?;
        writeln!(w, "steps,{}", self.steps)?;
        writeln!(w, "burn_in,{}", self.burn_in)?;
        writeln!(w, "replicas,{}", self.replicas)?;
        writeln!(w, "seed,{}", self.seed)?;
        for v in &self.violations {
            let l = csv_field(&v.label);
            writeln!(w, "violation_rate[{l}],{:.10}", v.rate)?;
            writeln!(w, "violations[{l}],{}", v.violations)?;
            writeln!(w, "standard_error[{l}],{:.10}", v.standard_error)?;
            writeln!(w, "batch_standard_error[{l}],{:.10}", v.batch_standard_error)?;
        }
        let mut matrix = |name: &str, m: &Matrix| -> io::Result<()> {
            for i in 0..m.nrows() {
                for j in 0..m.ncols() {
                    writeln!(w, "{name}[{i};{j}],{:.10e}", m[(i, j)])?;
                }
            }
            Ok(())
        };
        matrix("cov_state", &self.cov_state)?;
        matrix("cov_state_se", &self.cov_state_se)?;
        matrix("cov_input", &self.cov_input)?;
        matrix("cov_input_se", &self.cov_input_se)?;
        if let Some(m) = &self.cov_estimate {
            matrix("cov_estimate", m)?;
        }
        if let Some(m) = &self.cross_error_estimate {
            matrix("cross_error_estimate", m)?;
        }
        if let Some(m) = &self.cross_error_estimate_se {
            matrix("cross_error_estimate_se", m)?;
        }
        if let Some(c) = self.empirical_cost {
            writeln!(w, "empirical_cost,{c:.10e}")?;
        }
        Ok(())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Writes trace rows as CSV: `t,x0..,u0..,<label>..` with 0/1 flags.
pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow], labels: &[&str]) -> io::Result<()> {
    let (n, m) = rows.first().map(|r| (r.x.len(), r.u.len())).unwrap_or((0, 0));
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("x{i}")));
    header.extend((0..m).map(|i| format!("u{i}")));
    header.extend(labels.iter().map(|l| csv_field(l)));
    writeln!(w, "{}", header.join(","))?;
    for r in rows {
        let mut fields = vec![r.t.to_string()];
        fields.extend(r.x.iter().map(|v| format!("{v:.10e}")));
        fields.extend(r.u.iter().map(|v| format!("{v:.10e}")));
        fields.extend(r.violated.iter().map(|&b| u8::from(b).to_string()));
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Fraction of `samples` that violate `con`.
pub fn empirical_violation(samples: &[DVector<f64>], con: &ChanceConstraint) -> Result<f64> {
    let dim = match &con.geometry {
        crate::synthesis::Geometry::Halfspace { normal, .. } => normal.len(),
        crate::synthesis::Geometry::Ellipsoid { shape_inv, .. } => shape_inv.nrows(),
    };
    if let Some(s) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch(format!(
            "constraint '{}' expects vectors of length {dim}, got {}",
            con.label,
            s.len()
        )));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    Ok(samples.iter().filter(|s| con.is_violated(s)).count() as f64 / samples.len() as f64)
}

#[derive(Debug, Clone)]
struct Batch {
    steps: u64,
    violations: Vec<u64>,
    xx: Matrix,
    uu: Matrix,
    ss: Matrix,
    ex: Matrix,
    cost: f64,
}

impl Batch {
    fn new(n: usize, m: usize, k: usize) -> Self {
        Self {
            steps: 0,
            violations: vec![0; k],
            xx: Matrix::zeros(n, n),
            uu: Matrix::zeros(m, m),
            ss: Matrix::zeros(n, n),
            ex: Matrix::zeros(n, n),
            cost: 0.0,
        }
    }
}

struct Replica {
    batches: Vec<Batch>,
    trace: Vec<TraceRow>,
}

struct Setup<'a> {
    cl: ClosedLoop<'a>,
    constraints: &'a [ChanceConstraint],
    cost: Option<&'a CostSpec>,
    dist: &'a DisturbanceSpec,
    noise: Option<&'a DisturbanceSpec>,
    steps: usize,
    burn_in: usize,
    x0: DVector<f64>,
    trace_stride: Option<usize>,
}

fn run_replica(setup: &Setup, replica: u64) -> Result<Replica> {
    let model = setup.cl.model;
    let (n, m) = (model.n(), model.m());
    let k = setup.cl.k;
    let mut w_sampler = make_wss_sampler(setup.dist)?;
    let mut w_rng = ChaCha8Rng::seed_from_u64(setup.dist.seed);
    w_rng.set_stream(2 * replica);
    let mut output = match (setup.cl.estimator, setup.noise, &model.c) {
        (Some(est), Some(noise), Some(c)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream(2 * replica + 1);
            Some((est, c, make_wss_sampler(noise)?, rng, DVector::zeros(c.nrows())))
        }
        _ => None,
    };

    let k_batches = setup.constraints.len();
    let per_batch = setup.steps.div_ceil(BATCHES).max(1);
    let mut batches = Vec::with_capacity(BATCHES);
    let mut batch = Batch::new(n, m, k_batches);
    let mut trace = Vec::new();

    let mut x = setup.x0.clone();
    let mut xhat = DVector::<f64>::zeros(n);
    let mut u = DVector::<f64>::zeros(m);
    let mut w = DVector::<f64>::zeros(n);
    let mut next = DVector::<f64>::zeros(n);
    let mut err = DVector::<f64>::zeros(n);
    let mut violated = vec![false; k_batches];

    for t in 0..setup.burn_in + setup.steps {
        match &output {
            Some(_) => u.gemv(1.0, k, &xhat, 0.0),
            None => u.gemv(1.0, k, &x, 0.0),
        }
        if t >= setup.burn_in {
            for (flag, con) in violated.iter_mut().zip(setup.constraints) {
                *flag = con.is_violated(match con.target {
                    Target::State => &x,
                    Target::Input => &u,
                });
            }
            batch.steps += 1;
            for (count, &flag) in batch.violations.iter_mut().zip(&violated) {
                *count += u64::from(flag);
            }
            batch.xx.ger(1.0, &x, &x, 1.0);
            batch.uu.ger(1.0, &u, &u, 1.0);
            if output.is_some() {
                err.copy_from(&x);
                err -= &xhat;
                batch.ss.ger(1.0, &xhat, &xhat, 1.0);
                batch.ex.ger(1.0, &err, &xhat, 1.0);
            }
            if let Some(c) = setup.cost {
                batch.cost += x.dot(&(&c.q * &x)) + u.dot(&(&c.r * &u));
            }
            let s = t - setup.burn_in;
            if let Some(stride) = setup.trace_stride {
                if replica == 0 && s % stride == 0 {
                    trace.push(TraceRow { t: s, x: x.as_slice().to_vec(), u: u.as_slice().to_vec(), violated: violated.clone() });
                }
            }
            if batch.steps as usize == per_batch {
                batches.push(std::mem::replace(&mut batch, Batch::new(n, m, k_batches)));
            }
        }

        w_sampler.sample_into(&mut w_rng, &mut w);
        if let Some((est, c, sampler, rng, v)) = &mut output {
            sampler.sample_into(rng, v);
            // x̂⁺ = A x̂ + B u + L(C x + v − C x̂)
            let mut innovation = &**c * (&x - &xhat);
            innovation += &*v;
            next.gemv(1.0, &model.a, &xhat, 0.0);
            next.gemv(1.0, &model.b, &u, 1.0);
            next.gemv(1.0, &est.l, &innovation, 1.0);
            xhat.copy_from(&next);
        }
        next.gemv(1.0, &model.a, &x, 0.0);
        next.gemv(1.0, &model.b, &u, 1.0);
        next += &w;
        x.copy_from(&next);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(format!("state diverged at step {t}")));
        }
    }
    if batch.steps > 0 {
        batches.push(batch);
    }
    Ok(Replica { batches, trace })
}

/// Weighted batch-means standard error of the overall mean.
fn batch_se(values: &[(f64, f64)]) -> f64 {
    // values: (batch size, batch mean)
    let total: f64 = values.iter().map(|v| v.0).sum();
    let b = values.len();
    if b < 2 || total == 0.0 {
        return f64::NAN;
    }
    let mean = values.iter().map(|v| v.0 * v.1).sum::<f64>() / total;
    let ss: f64 = values.iter().map(|v| (v.0 / total).powi(2) * (v.1 - mean).powi(2)).sum();
    (ss * b as f64 / (b as f64 - 1.0)).sqrt()
}

fn matrix_se(batches: &[Batch], get: impl Fn(&Batch) -> &Matrix) -> Matrix {
    let first = get(&batches[0]);
    Matrix::from_fn(first.nrows(), first.ncols(), |i, j| {
        let v: Vec<(f64, f64)> =
            batches.iter().map(|b| (b.steps as f64, get(b)[(i, j)] / b.steps as f64)).collect();
        batch_se(&v)
    })
}

/// Simulates the closed loop and collects stationary statistics.
///
/// Without an estimator `u = Kx`; with one, `u = Kx̂` and the predictor
/// `x̂⁺ = Ax̂ + Bu + L(y − Cx̂)` runs on measurements `y = Cx + v`.
pub fn simulate(
    cl: ClosedLoop,
    dist: &DisturbanceSpec,
    noise: Option<&DisturbanceSpec>,
    constraints: &[ChanceConstraint],
    cost: Option<&CostSpec>,
    config: &SimConfig,
) -> Result<SimulationReport> {
    let model = cl.model;
    model.validate()?;
    let (n, m) = (model.n(), model.m());
    linalg::ensure_shape(cl.k, m, n, "K")?;
    linalg::ensure_shape(&dist.covariance, n, n, "disturbance covariance")?;
    if config.steps == 0 || config.replicas == 0 {
        return Err(Error::OutOfRange("steps and replicas must be positive".into()));
    }
    if config.trace_stride == Some(0) {
        return Err(Error::OutOfRange("trace stride must be positive".into()));
    }
    for con in constraints {
        con.validate(model)?;
    }
    if let Some(c) = cost {
        c.check(model)?;
    }
    let mut rho = linalg::spectral_radius(&model.closed_loop(cl.k))?;
    if rho >= 1.0 {
        return Err(Error::NotStable { spectral_radius: rho });
    }
    if let Some(est) = cl.estimator {
        let (Some(c), Some(noise)) = (&model.c, noise) else {
            return Err(Error::DimensionMismatch("output feedback needs C and a noise spec".into()));
        };
        linalg::ensure_shape(&est.l, n, c.nrows(), "L")?;
        linalg::ensure_shape(&noise.covariance, c.nrows(), c.nrows(), "noise covariance")?;
        let rho_est = linalg::spectral_radius(&(&model.a - &est.l * c))?;
        if rho_est >= 1.0 {
            return Err(Error::NotStable { spectral_radius: rho_est });
        }
        rho = rho.max(rho_est);
    }
    let x0 = match &config.x0 {
        Some(x0) if x0.len() != n => {
            return Err(Error::DimensionMismatch(format!("x0 has length {}, expected {n}", x0.len())))
        }
        Some(x0) => x0.clone(),
        None => DVector::zeros(n),
    };
    // Validate the covariances once, up front.
    make_wss_sampler(dist)?;
    if let (Some(_), Some(noise)) = (cl.estimator, noise) {
        make_wss_sampler(noise)?;
    }

    let setup = Setup {
        cl,
        constraints,
        cost,
        dist,
        noise,
        steps: config.steps,
        burn_in: config.burn_in.unwrap_or_else(|| default_burn_in(rho)),
        x0,
        trace_stride: config.trace_stride,
    };
    let jobs = config.jobs.clamp(1, config.replicas);
    let mut replicas: Vec<Result<Replica>> = Vec::with_capacity(config.replicas);
    for chunk in (0..config.replicas as u64).collect::<Vec<_>>().chunks(jobs) {
        if chunk.len() == 1 {
            replicas.push(run_replica(&setup, chunk[0]));
            continue;
        }
        std::thread::scope(|scope| {
            let handles: Vec<_> = chunk.iter().map(|&r| {
                let setup = &setup;
                scope.spawn(move || run_replica(setup, r))
            }).collect();
            replicas.extend(handles.into_iter().map(|h| h.join().expect("simulation thread panicked")));
        });
    }
    let mut batches = Vec::new();
    let mut trace = Vec::new();
    for r in replicas {
        let r = r?;
        batches.extend(r.batches);
        if trace.is_empty() {
            trace = r.trace;
        }
    }
    Ok(summarize(&setup, config.replicas, batches, trace))
}

fn summarize(setup: &Setup, replicas: usize, batches: Vec<Batch>, trace: Vec<TraceRow>) -> SimulationReport {
    let model = setup.cl.model;
    let mut total = Batch::new(model.n(), model.m(), setup.constraints.len());
    for b in &batches {
        total.steps += b.steps;
        for (t, v) in total.violations.iter_mut().zip(&b.violations) {
            *t += v;
        }
        total.xx += &b.xx;
        total.uu += &b.uu;
        total.ss += &b.ss;
        total.ex += &b.ex;
        total.cost += b.cost;
    }
    let steps = total.steps as f64;
    let violations = setup
        .constraints
        .iter()
        .enumerate()
        .map(|(i, con)| {
            let rate = total.violations[i] as f64 / steps;
            let per_batch: Vec<(f64, f64)> =
                batches.iter().map(|b| (b.steps as f64, b.violations[i] as f64 / b.steps as f64)).collect();
            ViolationStat {
                label: con.label.clone(),
                violations: total.violations[i],
                rate,
                standard_error: (rate * (1.0 - rate) / steps).sqrt(),
                batch_standard_error: batch_se(&per_batch),
            }
        })
        .collect();
    let output = setup.cl.estimator.is_some();
    SimulationReport {
        steps: total.steps as usize,
        burn_in: setup.burn_in,
        replicas,
        seed: setup.dist.seed,
        violations,
        cov_state: linalg::symmetrize(&(&total.xx / steps)),
        cov_input: linalg::symmetrize(&(&total.uu / steps)),
        cov_state_se: matrix_se(&batches, |b| &b.xx),
        cov_input_se: matrix_se(&batches, |b| &b.uu),
        cov_estimate: output.then(|| linalg::symmetrize(&(&total.ss / steps))),
        cross_error_estimate: output.then(|| &total.ex / steps),
        cross_error_estimate_se: output.then(|| matrix_se(&batches, |b| &b.ex)),
        empirical_cost: setup.cost.map(|_| total.cost / steps),
        trace,
    }
}
