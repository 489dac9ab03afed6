use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use nlsq_core::chain::{importance_resample, invariance_report, simulate_chain, JumpChainConfig, Observable};
use nlsq_core::free_field::{
    char_functional, char_scan_csv, empirical_covariance, minlos_increment_check, minlos_increment_exact, random_test_functions,
    sample_matrix, samples_csv, with_triple_norm, CharMode, EmpiricalFunctional, FieldSamples, FreeFieldModel, TestFunction,
};
use nlsq_core::interactions::{
    aux_even_factorial_inequality, aux_moment_inequality, aux_odd_factorial_inequality, bound_scan_csv, continuity_bound_exp,
    continuity_bound_poly_trig, GibbsModel, PotentialKind,
};
use nlsq_core::local_limit::{errors_nonincreasing, local_limit_csv, local_limit_scan, LocalLimitOptions};
use nlsq_core::nonlocal::{form_value, CoordinateMeasure, GaussianMeasure, GibbsMeasure, InnerRule};
use nlsq_core::particles::{
    cell_decay_check, covering_l_max, dual_norm, embed, embedding_csv, lemma21_bound_check, ruelle_tail_bound,
    sample_poisson_config, u_n_membership, C3Calibration, Configuration, RuelleParams,
};
use nlsq_core::regularity::{
    check_condition_1_11, check_condition_1_12, preset_example0, summability_identity, RegularityReport, TailProvider,
};
use nlsq_core::rng::derive;
use nlsq_core::spectral::{hilbert_schmidt_sum, spectrum_csv, EigenSystem, GridSpec, OperatorSpec};
use nlsq_core::{Error, Result};

use crate::config::*;
use crate::output::{Manifest, Outputs};

pub const SUBCOMMANDS: [&str; 9] =
    ["spectrum", "sample-field", "charfun", "gibbs", "form-eval", "dynamics", "check-conditions", "particles", "local-limit"];

fn parse<T: DeserializeOwned>(v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|e| Error::Config(e.to_string()))
}

fn need_samples(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("samples must be at least 1".into()));
    }
    Ok(())
}

pub fn run(sub: &str, cfg: &Value, seed: u64, m: &Manifest) -> Result<Outputs> {
    let mut out = Outputs::default();
    match sub {
        "spectrum" => spectrum(parse(cfg)?, m, &mut out)?,
        "sample-field" => sample_field(parse(cfg)?, seed, m, &mut out)?,
        "charfun" => charfun(parse(cfg)?, seed, m, &mut out)?,
        "gibbs" => gibbs(parse(cfg)?, seed, m, &mut out)?,
        "form-eval" => form_eval(parse(cfg)?, seed, m, &mut out)?,
        "dynamics" => dynamics(parse(cfg)?, seed, m, &mut out)?,
        "check-conditions" => check_conditions(parse(cfg)?, seed, m, &mut out)?,
        "particles" => particles(parse(cfg)?, seed, m, &mut out)?,
        "local-limit" => local_limit(parse(cfg)?, m, &mut out)?,
        other => return Err(Error::Config(format!("unknown subcommand {other}"))),
    }
    Ok(out)
}

fn spectrum(c: SpectrumConfig, m: &Manifest, out: &mut Outputs) -> Result<()> {
    let es = c.base.eigensystem(c.operator.kind())?;
    out.csv("spectrum.csv", m, &spectrum_csv(&es));
    out.json(
        "hs_report.json",
        m,
        json!({ "K": es.count(), "scale": es.scale, "hilbert_schmidt": hilbert_schmidt_sum(&es.lambda) }),
    );
    Ok(())
}

fn weighted_norms_finite(model: &FreeFieldModel, samples: &FieldSamples) -> bool {
    let lambda = &model.es.lambda;
    samples.rows().all(|x| {
        [4, 6].iter().all(|&p| x.iter().zip(lambda).map(|(v, l)| l.powi(p) * v * v).sum::<f64>().is_finite())
    })
}

fn sample_field(c: SampleFieldConfig, seed: u64, m: &Manifest, out: &mut Outputs) -> Result<()> {
    need_samples(c.samples)?;
    let model = c.base.free_model()?;
    let s = sample_matrix(&model, c.samples, seed);
    let emp = empirical_covariance(&s);
    let dev = (&emp - &model.cov).abs().max();
    out.csv("samples.csv", m, &samples_csv(&s, seed, model.mass));
    out.json(
        "sample_summary.json",
        m,
        json!({
            "samples": c.samples,
            "K": model.dim(),
            "max_abs_covariance_deviation": dev,
            "weighted_norms_finite": weighted_norms_finite(&model, &s),
        }),
    );
    Ok(())
}

#[derive(Serialize)]
struct CharRow {
    r: f64,
    exact: f64,
    re: f64,
    im: f64,
    stderr: f64,
    z: f64,
    modulus_le_one: bool,
    pass: bool,
}

fn charfun(c: CharfunConfig, seed: u64, m: &Manifest, out: &mut Outputs) -> Result<()> {
    need_samples(c.samples)?;
    let model = c.base.free_model()?;
    let phis: Vec<TestFunction> = if c.test_functions.is_empty() {
        random_test_functions(&model, c.random_functions, 0.25, 2.0, derive(seed, "charfun-tests"))?
    } else {
        c.test_functions.iter().map(|v| TestFunction::new(v.clone())).collect()
    };
    if let Some(bad) = phis.iter().find(|p| p.coefficients.len() != model.dim()) {
        return Err(Error::DimensionMismatch(format!("test function has {} coefficients, K = {}", bad.coefficients.len(), model.dim())));
    }
    let s = sample_matrix(&model, c.samples, seed);
    let f = EmpiricalFunctional::new(&s);
    let rows: Vec<CharRow> = phis
        .iter()
        .map(|p| {
            let exact = char_functional(&model, p, CharMode::Exact).re;
            let e = f.estimate(p);
            let se = e.stderr();
            let z = (e.value() - exact).norm() / se.max(f64::MIN_POSITIVE);
            let modulus_le_one = e.value().norm_sqr() <= 1.0 + 4.0 * f64::EPSILON;
            CharRow { r: model.variance_of(p).sqrt(), exact, re: e.re, im: e.im, stderr: se, z, modulus_le_one, pass: z < 4.0 && modulus_le_one }
        })
        .collect();
    let pairs: Vec<(usize, usize)> = (0..phis.len()).flat_map(|a| (0..phis.len()).map(move |b| (a, b))).filter(|(a, b)| a != b).collect();
    let exact_pairs: Vec<_> = pairs.iter().take(100).map(|&(a, b)| minlos_increment_exact(&model, &phis[a], &phis[b])).collect();
    let emp_pairs: Vec<_> = pairs.iter().take(50).map(|&(a, b)| minlos_increment_check(&f, &phis[a], &phis[b])).collect();
    let pass = rows.iter().all(|r| r.pass) && exact_pairs.iter().chain(&emp_pairs).all(|p| p.pass);
    if let Some(p) = phis.first() {
        out.csv("charfun_scan.csv", m, &char_scan_csv(&f, p, &c.ts));
    }
    out.json(
        "charfun.json",
        m,
        json!({ "functions": rows, "increment_exact": exact_pairs, "increment_empirical": emp_pairs, "pass": pass }),
    );
    out.verdict(pass);
    Ok(())
}

fn gibbs(c: GibbsConfig, seed: u64, m: &Manifest, out: &mut Outputs) -> Result<()> {
    need_samples(c.samples)?;
    let base = c.base.free_model()?;
    let potential = c.model().potential(&c.base.grid()?)?;
    let samples = sample_matrix(&base, c.samples, seed);
    let (gm, weights) = GibbsModel::new(base.clone(), potential, &samples)?;
    let e1 = TestFunction::new((0..base.dim()).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect());
    let mut rows = Vec::new();
    let mut holder = Vec::new();
    for &r in &c.r {
        let phi = with_triple_norm(&base, &e1, r)?;
        match c.kind {
            PotentialKind::Free => {}
            PotentialKind::Exp => rows.push(continuity_bound_exp(&gm, &phi, &samples, &weights)?),
            _ => {
                let h = continuity_bound_poly_trig(&gm, &phi, &samples, &weights)?;
                rows.push(h.bound);
                holder.push(h);
            }
        }
    }
    let mut aux = Vec::new();
    if !holder.is_empty() {
        for k in 1..=12 {
            let moment: Vec<_> = c.r.iter().map(|&r| aux_moment_inequality(k, r)).collect::<Result<_>>()?;
            let factorial = if k % 2 == 0 { aux_even_factorial_inequality(k)? } else { aux_odd_factorial_inequality(k)? };
            aux.push(json!({ "k": k, "moment": moment, "factorial": factorial }));
        }
    }
    let pass = rows.iter().all(|b| b.pass);
    out.csv("bound_scan.csv", m, &bound_scan_csv(&rows));
    out.json(
        "gibbs.json",
        m,
        json!({ "kind": c.kind, "z": gm.z, "bounds": rows, "holder": holder, "aux_inequalities": aux, "pass": pass }),
    );
    if c.kind != PotentialKind::Free {
        out.verdict(pass);
    }
    Ok(())
}

/// Outer samples for a measure: exact draws for the free field,
/// importance-weighted free-field draws for a Gibbs model.
enum Target {
    Free(GaussianMeasure),
    Gibbs(GibbsMeasure, Vec<f64>),
}

fn target(base: &BaseConfig, model: &Option<ModelConfig>, samples: &FieldSamples) -> Result<(Arc<FreeFieldModel>, Target)> {
    let free = base.free_model()?;
    Ok(match model {
        None => (free.clone(), Target::Free(GaussianMeasure::from_model(&free)?)),
        Some(mc) => {
            let (gm, w) = GibbsModel::new(free.clone(), mc.potential(&base.grid()?)?, samples)?;
            (free, Target::Gibbs(GibbsMeasure::new(Arc::new(gm))?, w))
        }
    })
}

fn form_eval(c: FormEvalConfig, seed: u64, m: &Manifest, out: &mut Outputs) -> Result<()> {
    need_samples(c.samples)?;
    let u = c.u.build()?;
    let v = c.v.build()?;
    let free = c.base.free_model()?;
    let samples = sample_matrix(&free, c.samples, seed);
    let (_, t) = target(&c.base, &c.model, &samples)?;
    let rule = InnerRule::default();
    let eval = |a: &_, b: &_| match &t {
        Target::Free(g) => form_value(a, b, g, c.alpha, &samples, None, &rule),
        Target::Gibbs(g, w) => form_value(a, b, g, c.alpha, &samples, Some(w), &rule),
    };
    let e = eval(&u, &v)?;
    let mut report = json!({ "alpha": c.alpha, "u": u.name, "v": v.name, "form": e });
    if c.contraction {
        let plain = eval(&u, &u)?;
        let uc = u.contraction();
        let contracted = eval(&uc, &uc)?;
        let pass = contracted.value <= plain.value + 4.0 * plain.stderr.hypot(contracted.stderr);
        report["contraction"] = json!({ "plain": plain, "contracted": contracted, "pass": pass });
        out.verdict(pass);
    }
    out.json("form.json", m, report);
    Ok(())
}

fn trajectory_csv(cfg: &JumpChainConfig, rows: &[(usize, Vec<f64>)], k: usize) -> String {
    let mut s = format!("# chain: {}\n", serde_json::to_string(cfg).expect("serializable config"));
    let cols: Vec<String> = (1..=k).map(|i| format!("x{i}")).collect();
    s.push_str(&format!("sweep,{}\n", cols.join(",")));
    for (sweep, x) in rows {
        let vals: Vec<String> = x.iter().map(|v| format!("{v:.17e}")).collect();
        s.push_str(&format!("{sweep},{}\n", vals.join(",")));
    }
    s
}

fn dynamics(c: DynamicsConfig, seed: u64, m: &Manifest, out: &mut Outputs) -> Result<()> {
    let cfg = JumpChainConfig {
        alpha: c.alpha,
        eps: c.eps,
        cap: c.cap,
        sweeps: c.sweeps,
        schedule: c.schedule,
        seed,
        stride: c.stride,
        force_accept: c.force_accept,
    };
    cfg.validate()?;
    let free = c.base.free_model()?;
    let k = free.dim();
    let pool = if c.model.is_some() {
        need_samples(c.pool)?;
        sample_matrix(&free, c.pool, derive(seed, "pool"))
    } else {
        FieldSamples { dim: k, data: Vec::new() }
    };
    let (_, t) = target(&c.base, &c.model, &pool)?;
    let measure: &dyn CoordinateMeasure = match &t {
        Target::Free(g) => g,
        Target::Gibbs(g, _) => g,
    };
    let x0 = c.x0.clone().unwrap_or_else(|| vec![0.0; k]);
    let (traj, stats) = simulate_chain(measure, &cfg, &x0)?;
    out.csv("trajectory.csv", m, &trajectory_csv(&cfg, &traj.rows, k));
    let mut report = json!({ "config": cfg, "acceptance": stats.rate(), "low_acceptance": stats.low_acceptance });
    if c.chains > 0 {
        let starts = match &t {
            Target::Free(_) => sample_matrix(&free, c.chains, derive(seed, "starts")),
            Target::Gibbs(_, w) => importance_resample(&pool, w, c.chains, derive(seed, "starts"))?,
        };
        let observables = if c.observables.is_empty() {
            let mut o = vec![Observable::Coordinate(0), Observable::Square(0)];
            if k > 1 {
                o.push(Observable::Product(0, 1));
            }
            o
        } else {
            c.observables.clone()
        };
        let inv = invariance_report(measure, &cfg, &observables, &starts)?;
        out.verdict(inv.pass);
        out.json("invariance.json", m, &inv);
    }
    out.json("dynamics.json", m, {
        report["trajectory_rows"] = json!(traj.rows.len());
        report
    });
    Ok(())
}

fn check_conditions(c: CheckConditionsConfig, seed: u64, m: &Manifest, out: &mut Outputs) -> Result<()> {
    need_samples(c.samples)?;
    let model = c.base.free_model()?;
    let lambda = &model.es.lambda;
    let ci = match c.preset {
        Preset::Example0 => preset_example0(lambda, c.alpha, c.threshold)?,
    };
    let variances: Vec<f64> = (0..model.dim()).map(|i| model.cov[(i, i)]).collect();
    let c11 = check_condition_1_11(&ci, TailProvider::Gaussian(&variances))?;
    let samples = sample_matrix(&model, c.samples, seed);
    let c12 = check_condition_1_12(&ci, &samples, &c.m_list)?;
    let identity = (c.alpha == 1.0).then(|| summability_identity(&ci, lambda));
    let identity_ok = identity.is_none_or(|id| id.abs_diff <= 1e-12 * id.sum_lambda_squared.max(1.0));
    let gamma_inv = ci.gamma_inverse_partial_sums();
    let report = RegularityReport {
        alpha: c.alpha,
        k: ci.len(),
        partial_sums: c11.partial_sums.clone(),
        converged: c11.converged,
        m_scan: c12.scan.clone(),
        identity,
        gamma_inverse_sum: *gamma_inv.last().expect("at least one mode"),
    };
    let pass = c11.converged && c12.pass && identity_ok;
    out.json(
        "regularity.json",
        m,
        json!({
            "regularity": report,
            "last_decade_increment": c11.last_decade_increment,
            "critical_M": c12.critical_m,
            "max_fraction": c12.max_fraction,
            "pass": pass,
        }),
    );
    out.verdict(pass);
    Ok(())
}

fn particles(c: ParticlesConfig, seed: u64, m: &Manifest, out: &mut Outputs) -> Result<()> {
    if c.window > c.half_width {
        return Err(Error::Config(format!("window {} exceeds the grid half-width {}", c.window, c.half_width)));
    }
    let grid = GridSpec::new(c.d, c.half_width, c.grid_points)?;
    let es = EigenSystem::compute(&grid, &OperatorSpec::h_tilde(c.d), c.k)?;
    let cal = C3Calibration::calibrate(&es, c.window, c.k)?;
    let mut confs = Vec::new();
    if !c.points.is_empty() {
        confs.push(Configuration::new(c.d, c.window, c.points.clone())?);
    }
    if let Some(p) = &c.poisson {
        let mut stream = 0;
        let max_attempts = 100 * p.count.max(1) as u64;
        while confs.len() < p.count + usize::from(!c.points.is_empty()) {
            if stream >= max_attempts {
                return Err(Error::Resource(format!("fewer than {} Poisson configurations in U_{} after {max_attempts} draws", p.count, c.n)));
            }
            let conf = sample_poisson_config(c.d, p.intensity, c.window, derive(seed, "poisson"), stream)?;
            stream += 1;
            if u_n_membership(&conf, c.n, covering_l_max(&conf))?.member {
                confs.push(conf);
            }
        }
    }
    let tests: Vec<Vec<f64>> = (0..cal.k_modes)
        .map(|i| (0..cal.k_modes).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let mut rows = Vec::new();
    let mut pass = true;
    for conf in &confs {
        let member = u_n_membership(conf, c.n, covering_l_max(conf))?;
        let lemma = if member.member {
            let r = lemma21_bound_check(conf, c.n, &es, &cal, &tests)?;
            pass &= r.pass;
            Some(r)
        } else {
            None
        };
        rows.push(json!({ "points": conf.points.len(), "total_multiplicity": conf.total_multiplicity(), "membership": member, "lemma": lemma }));
    }
    let ruelle = match c.gamma {
        Some(gamma) => Some(ruelle_tail_bound(RuelleParams { gamma, delta: c.delta }, c.n)?),
        None => None,
    };
    let decay = cell_decay_check(c.d, 20, 10)?;
    pass &= decay.pass;
    if let Some(first) = confs.first() {
        let z = embed(first, &es, cal.k_modes)?;
        out.csv("embedding.csv", m, &embedding_csv(&z, &es.lambda[..cal.k_modes]));
        rows[0]["dual_norm"] = json!(dual_norm(&z, &es.lambda[..cal.k_modes]));
    }
    out.json(
        "particles.json",
        m,
        json!({ "N": c.n, "calibration": cal, "c3": cal.c3(c.n), "configurations": rows, "ruelle_bound": ruelle, "cell_decay": decay, "pass": pass }),
    );
    out.verdict(pass);
    Ok(())
}

fn local_limit(c: LocalLimitConfig, m: &Manifest, out: &mut Outputs) -> Result<()> {
    let rows = local_limit_scan(&c.f, &c.g, &c.rho, &c.alphas, &c.windows, &LocalLimitOptions::default())?;
    let pass = errors_nonincreasing(&rows);
    out.csv("local_limit.csv", m, &local_limit_csv(&rows));
    out.json("local_limit.json", m, json!({ "rows": rows, "monotone": pass }));
    out.verdict(pass);
    Ok(())
}
