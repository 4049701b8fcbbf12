use std::io::Write;

use ccsynth::estimator::synthesize_output_feedback;
use ccsynth::linalg;
use ccsynth::probbounds::{factor_curve, uniform_grid, CurveKind, DisturbanceClass, LEVEL_FLOOR};
use ccsynth::sim::{simulate, ClosedLoop, DisturbanceSpec, NoiseClass, SimConfig, SimulationReport};
use ccsynth::synthesis::{
    plan_levels, synthesize_constrained, synthesize_leveled, ChanceConstraint, LevelPlan, MinLevel, SynthesisResult,
};

use crate::gains::GainsFile;
use crate::problem::{Feedback, Problem};
use crate::CliError;

fn pct(v: f64) -> String {
    format!("{:.2}%", 100.0 * v)
}

pub fn format_level(level: MinLevel) -> String {
    match level {
        MinLevel::BelowFloor => format!("below floor (< {LEVEL_FLOOR:e})"),
        MinLevel::Level(l) => format!("{} ({l:.6})", pct(l)),
    }
}

/// Minimum levels in priority order. With `index`, only that constraint is
/// reported (earlier constraints still fixed at their design levels); with
/// `independent`, each constraint is treated alone.
pub fn minlevel(
    problem: &Problem,
    index: Option<usize>,
    independent: bool,
    out: &mut dyn Write,
) -> Result<Vec<LevelPlan>, CliError> {
    let settings = &problem.options.synthesis;
    let cons = &problem.constraints;
    if let Some(i) = index.filter(|&i| i >= cons.len()) {
        return Err(CliError::Parse(format!("constraint index {i} out of range (file has {})", cons.len())));
    }
    let chosen: Vec<usize> = index.map_or_else(|| (0..cons.len()).collect(), |i| vec![i]);
    let mut plans = Vec::with_capacity(chosen.len());
    if independent {
        for &i in &chosen {
            plans.push(plan_levels(&problem.model, std::slice::from_ref(&cons[i]), settings)?.0.remove(0));
        }
    } else {
        let upto = chosen.last().map_or(0, |&i| i + 1);
        let all = plan_levels(&problem.model, &cons[..upto], settings)?.0;
        plans.extend(chosen.iter().map(|&i| all[i].clone()));
    }
    writeln!(out, "{:<5} {:<24} {:>10} {:>28} {:>10}", "index", "label", "requested", "minimum", "design")?;
    for (&i, p) in chosen.iter().zip(&plans) {
        writeln!(
            out,
            "{:<5} {:<24} {:>10} {:>28} {:>10}{}",
            i,
            p.label,
            pct(p.requested),
            format_level(p.min_level),
            pct(p.design_eps),
            if p.raised() { "  (raised)" } else { "" }
        )?;
    }
    Ok(plans)
}

#[derive(Debug, Clone, Default)]
pub struct SynthOptions {
    /// Constraint indices to impose; `None` imposes all.
    pub only: Option<Vec<usize>>,
    pub unconstrained: bool,
    /// Raise levels below their minimum to the planned design levels.
    pub auto_level: bool,
}

pub fn synth(problem: &Problem, opts: &SynthOptions, out: &mut dyn Write) -> Result<GainsFile, CliError> {
    let settings = &problem.options.synthesis;
    let mut cons = if opts.unconstrained { Vec::new() } else { problem.select(opts.only.as_deref())? };
    let file = match problem.options.feedback {
        Feedback::State if opts.auto_level && !cons.is_empty() => {
            let leveled = synthesize_leveled(&problem.model, &problem.cost, &cons, settings)?;
            for p in leveled.plans.iter().filter(|p| p.raised()) {
                writeln!(
                    out,
                    "level for '{}' raised from {} to {} (minimum {}, margin {:e})",
                    p.label,
                    pct(p.requested),
                    pct(p.design_eps),
                    format_level(p.min_level),
                    leveled.margin
                )?;
            }
            GainsFile::from_state(&leveled.result)
        }
        Feedback::State => GainsFile::from_state(&synthesize_constrained(&problem.model, &problem.cost, &cons, settings)?),
        Feedback::Output => {
            if opts.auto_level && !cons.is_empty() {
                // Levels are planned for state feedback.
                let (plans, designed) = plan_levels(&problem.model, &cons, settings)?;
                for p in plans.iter().filter(|p| p.raised()) {
                    writeln!(out, "level for '{}' raised from {} to {}", p.label, pct(p.requested), pct(p.design_eps))?;
                }
                cons = designed;
            }
            GainsFile::from_output(&synthesize_output_feedback(&problem.model, &problem.cost, &cons, settings)?)
        }
    };
    let gains = file.gains()?;
    let rho = linalg::spectral_radius(&problem.model.closed_loop(&gains.k))?;
    writeln!(out, "feedback: {}", file.feedback)?;
    writeln!(out, "cost: {:.9}", file.cost)?;
    writeln!(out, "K: {:?}", file.k)?;
    if let Some(l) = &file.l {
        writeln!(out, "L: {l:?}")?;
    }
    writeln!(out, "closed-loop spectral radius: {rho:.6}")?;
    for c in &file.constraints {
        writeln!(
            out,
            "constraint '{}': eps {}, {} (relative slack {:.3e})",
            c.label,
            pct(c.eps),
            if c.active { "active" } else { "inactive" },
            c.relative_slack
        )?;
    }
    Ok(file)
}

#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub burn_in: Option<usize>,
    pub replicas: Option<usize>,
    pub jobs: Option<usize>,
    pub disturbance: Option<NoiseClass>,
    pub trace_stride: Option<usize>,
}

pub fn run_simulation(problem: &Problem, gains: &GainsFile, opts: &SimOptions) -> Result<SimulationReport, CliError> {
    let g = gains.gains()?;
    let model = &problem.model;
    let o = &problem.options;
    let class = opts.disturbance.unwrap_or(o.disturbance);
    let seed = opts.seed.unwrap_or(o.seed);
    let dist = DisturbanceSpec::new(class, model.w.clone(), seed);
    let noise = model.v.as_ref().map(|v| DisturbanceSpec::new(class, v.clone(), seed));
    let config = SimConfig {
        steps: opts.steps.unwrap_or(o.steps),
        burn_in: opts.burn_in.or(o.burn_in),
        x0: None,
        replicas: opts.replicas.unwrap_or(o.replicas),
        jobs: opts.jobs.unwrap_or(1),
        trace_stride: opts.trace_stride,
    };
    let cl = ClosedLoop { model, k: &g.k, estimator: g.estimator.as_ref() };
    let noise = if g.estimator.is_some() { noise.as_ref() } else { None };
    Ok(simulate(cl, &dist, noise, &problem.constraints, Some(&problem.cost), &config)?)
}

pub fn print_report(report: &SimulationReport, out: &mut dyn Write) -> Result<(), CliError> {
    writeln!(out, "steps: {} (burn-in {}, replicas {}), seed {}", report.steps, report.burn_in, report.replicas, report.seed)?;
    for v in &report.violations {
        writeln!(
            out,
            "violation '{}': {} ± {} (batch-means SE {})",
            v.label,
            pct(v.rate),
            pct(v.standard_error),
            pct(v.batch_standard_error)
        )?;
    }
    if let Some(c) = report.empirical_cost {
        writeln!(out, "empirical cost: {c:.6}")?;
    }
    Ok(())
}

pub fn curves(
    kind: CurveKind,
    class: DisturbanceClass,
    grid: (f64, f64, f64),
    out: &mut dyn Write,
) -> Result<Vec<(f64, f64)>, CliError> {
    let points = uniform_grid(grid.0, grid.1, grid.2)?;
    let rows = factor_curve(kind, class, &points)?;
    writeln!(out, "eps,factor")?;
    for (eps, f) in &rows {
        writeln!(out, "{eps:.6},{f:.9}")?;
    }
    Ok(rows)
}

/// `a:b:step`.
pub fn parse_grid(s: &str) -> Result<(f64, f64, f64), CliError> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || CliError::Parse(format!("grid '{s}': expected a:b:step with numbers"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts.iter().map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<_, _>>()?;
    Ok((v[0], v[1], v[2]))
}

/// One constraint of the satellite example, designed and simulated alone.
#[derive(Debug, Clone)]
pub struct DemoRow {
    pub constraint: ChanceConstraint,
    pub min_level: MinLevel,
    pub design_eps: f64,
    pub k_cc: SynthesisResult,
    pub cc: SimulationReport,
    pub lqr: SimulationReport,
}

#[derive(Debug, Clone)]
pub struct Demo {
    pub lqr: SynthesisResult,
    pub rows: Vec<DemoRow>,
}

/// The satellite example end to end: LQR, then for each constraint alone its
/// minimum level, the constrained design, and simulations of both gains.
pub fn satellite_demo(problem: &Problem, opts: &SimOptions, out: &mut dyn Write) -> Result<Demo, CliError> {
    let settings = &problem.options.synthesis;
    let model = &problem.model;
    let lqr = synthesize_constrained(model, &problem.cost, &[], settings)?;
    writeln!(out, "K_lqr = {:?}, cost {:.6}", lqr.k.as_slice(), lqr.cost)?;
    let lqr_gains = GainsFile::from_state(&lqr);
    let mut rows = Vec::new();
    for con in &problem.constraints {
        let leveled = synthesize_leveled(model, &problem.cost, std::slice::from_ref(con), settings)?;
        let (min, design_eps) = (leveled.plans[0].min_level, leveled.plans[0].design_eps);
        let k_cc = leveled.result;
        let single = Problem { constraints: vec![con.clone()], ..problem.clone() };
        let cc = run_simulation(&single, &GainsFile::from_state(&k_cc), opts)?;
        let lqr_sim = run_simulation(&single, &lqr_gains, opts)?;
        let (vc, vl) = (&cc.violations[0], &lqr_sim.violations[0]);
        writeln!(out, "constraint '{}' (eps {})", con.label, pct(con.eps))?;
        writeln!(out, "  minimum level: {}", format_level(min))?;
        writeln!(out, "  design level:  {}", pct(design_eps))?;
        writeln!(out, "  K_cc = {:?}, cost {:.6}", k_cc.k.as_slice(), k_cc.cost)?;
        writeln!(out, "  empirical violation K_cc:  {} ± {}", pct(vc.rate), pct(vc.standard_error))?;
        writeln!(out, "  empirical violation K_lqr: {} ± {}", pct(vl.rate), pct(vl.standard_error))?;
        rows.push(DemoRow { constraint: con.clone(), min_level: min, design_eps, k_cc, cc, lqr: lqr_sim });
    }
    Ok(Demo { lqr, rows })
}
