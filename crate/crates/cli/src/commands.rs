use std::path::Path;

use serde::Serialize;

use spinfact::covariance::{covariance_matrix, nullspace};
use spinfact::error::Error;
use spinfact::exec::Parallelism;
use spinfact::factorization::{check_conditions_with, coupling_space_basis, solve_fields, CheckOptions, FactorizationReport, FieldSpace};
use spinfact::hamiltonian::{assemble, ModelSpec};
use spinfact::linalg::{self, C64};
use spinfact::models::{self, Candidate, ModelInstance, SweepOptions, SweepPoint};
use spinfact::spin_algebra::cluster_operators;
use spinfact::states::{
    generalized_singlet, reduced_density, spin_coherent, Factor, GeneralizedSingletSpec, LocalState, ProductState,
};

use crate::config::ModelFile;
use crate::family;
use crate::output::{emit, json, num, opt_num, Failure};
use crate::{Axis, Common, Source, Trial, TrialKind};

/// A resolved model source: a builtin family (rebuildable at other parameters) or a config file.
enum Resolved {
    Family { tag: String, cyclic: bool },
    File(ModelInstance),
}

fn resolve(src: &Source) -> Result<Resolved, Failure> {
    match (&src.model, &src.config) {
        (Some(tag), None) => {
            if !family::FAMILIES.contains(&tag.as_str()) {
                return Err(Failure::Input(format!("unknown model {tag:?} (known: {})", family::FAMILIES.join(", "))));
            }
            Ok(Resolved::Family { tag: tag.clone(), cyclic: !src.open })
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            let file = ModelFile::parse(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
            let model = file.model().map_err(Failure::Input)?;
            let candidates = match file.product_state().map_err(Failure::Input)? {
                Some(state) => {
                    let energy = assemble(&model)?.energy(&state.full_vector());
                    vec![Candidate { label: "trial".into(), state, energy, pair_energies: Vec::new(), angles: Vec::new() }]
                }
                None => Vec::new(),
            };
            Ok(Resolved::File(ModelInstance { model, candidates, notes: Vec::new() }))
        }
        (None, None) => Err(Failure::Input("need --model or --config".into())),
        (Some(_), Some(_)) => Err(Failure::Input("--model and --config are exclusive".into())),
    }
}

fn instance(src: &Source) -> Result<ModelInstance, Failure> {
    match resolve(src)? {
        Resolved::Family { tag, cyclic } => Ok(family::build(&tag, &src.params, cyclic)?),
        Resolved::File(inst) => Ok(inst),
    }
}

fn selected<'a>(inst: &'a ModelInstance, src: &Source) -> Result<Vec<&'a Candidate>, Failure> {
    match &src.candidate {
        Some(label) => inst
            .candidate(label)
            .map(|c| vec![c])
            .ok_or_else(|| Failure::Input(format!("no candidate {label:?}"))),
        None => Ok(inst.candidates.iter().collect()),
    }
}

fn check_common(c: &Common) -> Result<(), Failure> {
    if !(c.tol > 0.0) {
        return Err(Failure::Input(format!("--tol must be positive, got {}", c.tol)));
    }
    if c.lowest == Some(0) {
        return Err(Failure::Input("--lowest must be at least 1".into()));
    }
    Ok(())
}

#[derive(Serialize)]
struct CandidateReport<'a> {
    label: &'a str,
    predicted_energy: f64,
    report: FactorizationReport,
}

#[derive(Serialize)]
struct VerifyOutput<'a> {
    model: Option<String>,
    notes: &'a [String],
    verdict: bool,
    candidates: Vec<CandidateReport<'a>>,
}

pub fn verify(src: &Source, common: &Common) -> Result<(), Failure> {
    check_common(common)?;
    let inst = instance(src)?;
    let chosen = selected(&inst, src)?;
    if chosen.is_empty() {
        let why = if inst.notes.is_empty() { "no trial state given".to_string() } else { inst.notes.join("; ") };
        return Err(Failure::Verdict(format!("nothing to verify: {why}")));
    }
    let opts = CheckOptions { tolerance: common.tol, ..CheckOptions::default() };
    let mut reports = Vec::new();
    for c in chosen {
        let report = check_conditions_with(&inst.model, &c.state, &opts)?;
        reports.push(CandidateReport { label: &c.label, predicted_energy: c.energy, report });
    }
    let verdict = reports.iter().all(|r| r.report.verdict);
    let out = VerifyOutput { model: inst.model.family_tag.clone(), notes: &inst.notes, verdict, candidates: reports };
    emit(&json(&out)?, common.out.as_deref())?;
    if verdict {
        Ok(())
    } else {
        let failed: Vec<&str> = out.candidates.iter().filter(|r| !r.report.verdict).map(|r| r.label).collect();
        Err(Failure::Verdict(format!("not an exact eigenstate: {}", failed.join(", "))))
    }
}

const PURE: f64 = 1e-12;

/// Splits factors whose sites are unentangled into single-site factors.
fn split_separable(state: &ProductState) -> Result<(ProductState, bool), Failure> {
    let mut factors = Vec::new();
    let mut routed = false;
    for f in &state.factors {
        let n = f.sites.len();
        let mut sites = Vec::new();
        if n > 1 {
            for k in 0..n {
                let rho = reduced_density(&f.state, &[k])?;
                let (vals, vecs) = linalg::eigh(&rho);
                let top = vals.len() - 1;
                if vals[top] < 1.0 - PURE {
                    sites.clear();
                    break;
                }
                let v = vecs.column(top).into_owned();
                sites.push(Factor { sites: vec![f.sites[k]], state: LocalState::new(vec![f.state.factor_spins[k]], v)? });
            }
        }
        if sites.len() == n && n > 1 {
            routed = true;
            factors.extend(sites);
        } else {
            factors.push(f.clone());
        }
    }
    if !routed {
        return Ok((state.clone(), false));
    }
    let split = ProductState::new(factors)?;
    // the split product must reproduce the original up to a global phase
    let overlap = linalg::inner(&split.full_vector(), &state.full_vector()).norm();
    if (overlap - 1.0).abs() > 1e-10 {
        return Ok((state.clone(), false));
    }
    Ok((split, routed))
}

fn trial_state(t: &Trial, s: f64) -> Result<ProductState, Failure> {
    let kind = t.trial.ok_or_else(|| Failure::Input("need --model, --config or --trial".into()))?;
    if t.factors == 0 {
        return Err(Failure::Input("--factors must be at least 1".into()));
    }
    let one = || -> Result<LocalState, Error> {
        match kind {
            TrialKind::Singlet => generalized_singlet(&GeneralizedSingletSpec::new(s, t.xi, t.parity)?),
            TrialKind::Coherent => spin_coherent(s, t.theta, t.phi),
        }
    };
    let factors = (0..t.factors).map(|_| one()).collect::<Result<Vec<_>, _>>()?;
    Ok(ProductState::contiguous(factors)?)
}

#[derive(Serialize)]
struct OperatorOut {
    labels: Vec<String>,
    coefficients: Vec<C64>,
}

#[derive(Serialize)]
struct FactorOut {
    factor: usize,
    sites: Vec<usize>,
    operators: usize,
    rank: usize,
    /// Covariance nullspace: conserved linear combinations of the factor operators.
    nullspace: Vec<OperatorOut>,
    /// Real nullspace directions: admissible linear fields when no couplings act.
    field_directions: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct PairOut {
    p: usize,
    q: usize,
    dimension: usize,
    full_dimension: usize,
    expected_dimension: usize,
    brute_force_dimension: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    basis: Option<Vec<Vec<C64>>>,
}

#[derive(Serialize)]
struct SolveOutput {
    full_factorization: bool,
    factors: Vec<FactorOut>,
    pairs: Vec<PairOut>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fields: Option<Vec<FieldSpace>>,
}

pub fn solve(src: &Source, common: &Common, trial: &Trial) -> Result<(), Failure> {
    check_common(common)?;
    let (state, model): (ProductState, Option<ModelSpec>) = if src.model.is_some() || src.config.is_some() {
        let inst = instance(src)?;
        let c = selected(&inst, src)?
            .first()
            .copied()
            .ok_or_else(|| Failure::Input(format!("model has no trial state: {}", inst.notes.join("; "))))?;
        (c.state.clone(), Some(inst.model.clone()))
    } else {
        (trial_state(trial, src.params.s.unwrap_or(0.5))?, None)
    };
    let (state, routed) = split_separable(&state)?;
    let mut covs = Vec::new();
    let mut factors = Vec::new();
    for (p, f) in state.factors.iter().enumerate() {
        let ops = cluster_operators(&f.state.factor_spins)?;
        let c = covariance_matrix(&f.state, &ops)?;
        let ns = nullspace(&c);
        let nullspace = (0..ns.count)
            .map(|k| OperatorOut { labels: ops.labels.clone(), coefficients: ns.vector(k).iter().copied().collect() })
            .collect();
        let real = linalg::real_kernel(&c.entries, linalg::RANK_TOL);
        let field_directions = (0..real.ncols()).map(|k| real.column(k).iter().copied().collect()).collect();
        factors.push(FactorOut { factor: p, sites: f.sites.clone(), operators: c.dim(), rank: c.rank, nullspace, field_directions });
        covs.push(c);
    }
    let mut pairs = Vec::new();
    for p in 0..covs.len() {
        for q in p + 1..covs.len() {
            let b = coupling_space_basis(&covs[p], &covs[q]);
            pairs.push(PairOut {
                p,
                q,
                dimension: b.dimension,
                full_dimension: b.dim_p * b.dim_q,
                expected_dimension: b.expected_dimension,
                brute_force_dimension: b.brute_force_dimension,
                basis: trial.basis.then(|| b.rows()),
            });
        }
    }
    let fields = match &model {
        Some(m) => Some(solve_fields(m, &state)?),
        None => None,
    };
    let out = SolveOutput { full_factorization: routed, factors, pairs, fields };
    emit(&json(&out)?, common.out.as_deref())
}

fn axis_values(axis: &Axis) -> Result<Option<(String, Vec<f64>)>, Failure> {
    let Some(name) = &axis.param else {
        return Ok(None);
    };
    let start = axis.start.ok_or_else(|| Failure::Input("--param needs --start".into()))?;
    if axis.steps == 0 {
        return Err(Failure::Input("--steps must be at least 1".into()));
    }
    let values = if axis.steps == 1 {
        vec![start]
    } else {
        let stop = axis.stop.ok_or_else(|| Failure::Input("--steps > 1 needs --stop".into()))?;
        let last = axis.steps - 1;
        (0..axis.steps).map(|k| if k == last { stop } else { start + (stop - start) * k as f64 / last as f64 }).collect()
    };
    Ok(Some((name.clone(), values)))
}

fn sweep_options(common: &Common) -> SweepOptions {
    SweepOptions { lowest: common.lowest, seed: common.seed, dense_cap: common.dense_cap, mode: Parallelism::Parallel }
}

/// Builder for points along `name`; a config-file model is fixed and cannot be swept.
fn builder<'a>(
    src: &'a Source,
    name: Option<&'a str>,
) -> Result<impl Fn(f64) -> spinfact::error::Result<ModelInstance> + Sync + 'a, Failure> {
    let resolved = resolve(src)?;
    if let (Some(n), Resolved::Family { .. }) = (name, &resolved) {
        src.params.with(n, 0.0)?;
    }
    if name.is_some() && matches!(resolved, Resolved::File(_)) {
        return Err(Failure::Input("parameter axes need a builtin --model".into()));
    }
    Ok(move |v: f64| match (&resolved, name) {
        (Resolved::Family { tag, cyclic }, Some(n)) => family::build(tag, &src.params.with(n, v)?, *cyclic),
        (Resolved::Family { tag, cyclic }, None) => family::build(tag, &src.params, *cyclic),
        (Resolved::File(inst), _) => Ok(inst.clone()),
    })
}

fn run_points<F>(build: &F, values: &[f64], common: &Common) -> Result<Vec<SweepPoint>, Failure>
where
    F: Fn(f64) -> spinfact::error::Result<ModelInstance> + Sync,
{
    Ok(models::sweep(build, values, &sweep_options(common))?)
}

pub fn spectrum(src: &Source, common: &Common, axis: &Axis) -> Result<(), Failure> {
    check_common(common)?;
    let (name, values) = match axis_values(axis)? {
        Some((n, v)) => (Some(n), v),
        None => (None, vec![0.0]),
    };
    let build = builder(src, name.as_deref())?;
    let points = run_points(&build, &values, common)?;
    let labels = points[0].labels.clone();
    let levels = points.iter().map(|p| p.spectrum.eigenvalues.len()).min().unwrap_or(0);
    let mut header = vec![name.clone().unwrap_or_else(|| "point".into())];
    header.extend(labels.iter().map(|l| format!("pred_{l}")));
    header.extend((0..levels).map(|k| format!("e{k}")));
    let mut text = header.join(",") + "\n";
    for p in &points {
        let mut row = vec![num(p.value)];
        for l in &labels {
            row.push(opt_num(p.labels.iter().position(|x| x == l).map(|k| p.predicted[k])));
        }
        row.extend(p.spectrum.eigenvalues[..levels].iter().map(|&e| num(e)));
        text += &(row.join(",") + "\n");
    }
    emit(&text, common.out.as_deref())
}

pub fn sweep(src: &Source, common: &Common, axis: &Axis, resolution: f64) -> Result<(), Failure> {
    check_common(common)?;
    if !(resolution > 0.0) {
        return Err(Failure::Input("--resolution must be positive".into()));
    }
    let (name, values) = axis_values(axis)?.ok_or_else(|| Failure::Input("sweep needs --param and --start".into()))?;
    let build = builder(src, Some(&name))?;
    let points = run_points(&build, &values, common)?;
    let boundaries = models::locate_boundaries(&build, &points, resolution, &sweep_options(common))?;
    let labels = points[0].labels.clone();
    let mut header = vec!["kind".to_string(), name.clone(), "ground_energy".into(), "gap".into(), "degeneracy".into(), "ground".into()];
    header.extend(labels.iter().map(|l| format!("overlap_{l}")));
    let mut text = header.join(",") + "\n";
    for p in &points {
        let ground = p.ground_label().map(|k| p.labels[k].clone()).unwrap_or_else(|| "none".into());
        let mut row =
            vec!["point".into(), num(p.value), num(p.spectrum.ground_energy), opt_num(p.spectrum.gap), p.spectrum.degeneracy.to_string(), ground];
        for l in &labels {
            row.push(opt_num(p.labels.iter().position(|x| x == l).map(|k| p.overlaps[k])));
        }
        text += &(row.join(",") + "\n");
    }
    for b in &boundaries {
        let side = |s: &Option<String>| s.clone().unwrap_or_else(|| "none".into());
        let mut row = vec!["boundary".into(), num(b.value), String::new(), String::new(), String::new()];
        row.push(format!("{}->{}", side(&b.below), side(&b.above)));
        row.extend(labels.iter().map(|_| String::new()));
        text += &(row.join(",") + "\n");
    }
    emit(&text, common.out.as_deref())
}

pub fn export_model(src: &Source, common: &Common, triplets: Option<&Path>) -> Result<(), Failure> {
    let inst = instance(src)?;
    let state = match &src.candidate {
        Some(_) => selected(&inst, src)?.first().map(|c| &c.state),
        None => inst.candidates.first().map(|c| &c.state),
    };
    let text = ModelFile::from_model(&inst.model, state).to_toml().map_err(Failure::Io)?;
    emit(&text, common.out.as_deref())?;
    if let Some(path) = triplets {
        let h = assemble(&inst.model)?;
        let mut csv = String::from("row,col,re,im\n");
        for (i, j, v) in h.matrix.triplets() {
            csv += &format!("{i},{j},{},{}\n", num(v.re), num(v.im));
        }
        emit(&csv, Some(path))?;
    }
    Ok(())
}
