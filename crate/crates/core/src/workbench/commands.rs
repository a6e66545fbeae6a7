//! The workbench commands behind the `foura` binary.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use super::checkpoint::{adapters_to_checkpoint, load_adapters, AdapterSet, Checkpoint};
use super::config::{parse_config, render_config};
use super::report::{line_plot_svg, Cell, Csv, RunManifest};
use crate::adapter::{materialize_delta_w, AdapterLayer, GateMode, GateState, MaskReport, Transform};
use crate::analysis::{self, BoundParams, TraceIndex};
use crate::error::{FouraError, Result};
use crate::matrix::Matrix;
use crate::merge::{merge_compatibility, merge_outputs, MergeSpec};
use crate::rng::Rng;
use crate::spectral::{Axis, TransformKind};
use crate::train::{
    denoise, grad_check_report, run_matrix_fit, run_toy_denoise, Task, TimestepRecord, TrainConfig, TrainTrace,
    GRAD_CHECK_TOL,
};

pub const CHECKPOINT_FILE: &str = "adapters.ckpt";
pub const THREADS_ENV: &str = "FOURA_THREADS";

/// Worker count from `FOURA_THREADS` (default 1).
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(FouraError::invalid(format!("{THREADS_ENV}={v} is not a positive integer"))),
        },
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

pub fn run_training(cfg: &TrainConfig) -> Result<TrainTrace> {
    match cfg.task {
        Task::MatrixFit => run_matrix_fit(cfg),
        Task::ToyDenoise => run_toy_denoise(cfg),
    }
}

/// Runs `f` over `items` on up to `threads` workers; results keep input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("worker panicked")
        .into_iter()
        .map(|r| r.expect("every item processed"))
        .collect()
}

pub fn losses_csv(trace: &TrainTrace) -> Csv {
    let mut csv = Csv::new(&["step", "loss"]);
    for (step, &loss) in trace.losses.iter().enumerate() {
        csv.push(vec![step.into(), loss.into()]);
    }
    csv
}

pub fn ranks_csv(trace: &TrainTrace) -> Result<Csv> {
    let table = analysis::effective_rank_trace(trace)?;
    let index = match table.index {
        TraceIndex::Step => "step",
        TraceIndex::Timestep => "timestep",
    };
    let mut csv = Csv::new(&[index, "layer", "effective_rank", "soft_mean"]);
    for r in &table.rows {
        csv.push(vec![r.index.into(), r.layer.into(), r.effective_rank.into(), r.soft_mean.into()]);
    }
    Ok(csv)
}

fn checkpoint_meta(cfg: &TrainConfig) -> Vec<(String, String)> {
    let gate = cfg.gate_mode.map_or("none", |g| g.as_str());
    [
        ("task", cfg.task.as_str().to_string()),
        ("rank", cfg.rank.to_string()),
        ("transform", cfg.transform.as_str().to_string()),
        ("axis", cfg.axis.as_str().to_string()),
        ("alpha", format!("{:e}", cfg.alpha)),
        ("seed", cfg.seed.to_string()),
        ("gate_mode", gate.to_string()),
        ("threshold", format!("{:e}", cfg.threshold)),
        ("tokens", cfg.tokens.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

pub fn trace_checkpoint(cfg: &TrainConfig, trace: &TrainTrace) -> Result<Checkpoint> {
    adapters_to_checkpoint(&checkpoint_meta(cfg), &trace.final_layers, &trace.frozen_masks)
}

#[derive(Debug, Clone)]
pub struct TrainArgs {
    pub config: PathBuf,
    /// Overrides the config seed; several seeds give one subdirectory each.
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub threads: usize,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub final_loss: f64,
}

/// Trains one run per seed and writes the checkpoint, `losses.csv`,
/// `ranks.csv` and a manifest.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<SeedRun>> {
    let start = Instant::now();
    let text = std::fs::read_to_string(&args.config)?;
    let base = parse_config(&text)?;
    let seeds = if args.seeds.is_empty() { vec![base.seed] } else { args.seeds.clone() };
    let configs: Vec<TrainConfig> = seeds
        .iter()
        .map(|&seed| TrainConfig { seed, ..base.clone() })
        .collect();

    let traces = parallel_map(&configs, args.threads, run_training);

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new("train", render_config(&base), seeds.clone());
    let mut runs = Vec::with_capacity(seeds.len());
    for (cfg, trace) in configs.iter().zip(traces) {
        let trace = trace?;
        let dir = if seeds.len() == 1 {
            args.out.clone()
        } else {
            args.out.join(format!("seed-{}", cfg.seed))
        };
        create_dir(&dir)?;
        let ck = dir.join(CHECKPOINT_FILE);
        trace_checkpoint(cfg, &trace)?.save(&ck)?;
        let losses = dir.join("losses.csv");
        losses_csv(&trace).write(&losses)?;
        let ranks = dir.join("ranks.csv");
        ranks_csv(&trace)?.write(&ranks)?;
        manifest.outputs.extend([ck, losses, ranks]);
        runs.push(SeedRun {
            seed: cfg.seed,
            dir,
            final_loss: trace.final_loss(),
        });
    }
    let path = args.out.join("manifest.json");
    manifest.outputs.push(path.clone());
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(&path)?;
    Ok(runs)
}

/// Bound inputs other than `p`, which comes from each layer's mask.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    pub c: f64,
    pub rho: f64,
    pub lambda_min: f64,
    pub n: usize,
    pub delta: f64,
    pub r_hat: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        Self {
            c: 1.0,
            rho: 1.0,
            lambda_min: 0.0,
            n: 100,
            delta: 0.1,
            r_hat: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalyzeArgs {
    pub checkpoints: Vec<PathBuf>,
    /// Checkpoint whose `layer{i}.w0` tensors replace the adapters' own W0.
    pub base: Option<PathBuf>,
    pub rank: usize,
    pub out: PathBuf,
    pub pairwise: bool,
    pub svg: bool,
    pub bound: BoundInputs,
}

fn incompatible(e: FouraError) -> FouraError {
    match e {
        FouraError::IncompatibleAdapters(m) | FouraError::ShapeError(m) => FouraError::IncompatibleCheckpoints(m),
        other => other,
    }
}

fn check_compatible(sets: &[AdapterSet]) -> Result<()> {
    let first = &sets[0];
    for (k, s) in sets.iter().enumerate().skip(1) {
        if s.layers.len() != first.layers.len() {
            return Err(FouraError::IncompatibleCheckpoints(format!(
                "checkpoint {k} has {} layers, checkpoint 0 has {}",
                s.layers.len(),
                first.layers.len()
            )));
        }
        for (i, (a, b)) in s.layers.iter().zip(&first.layers).enumerate() {
            if a.w0.shape() != b.w0.shape() || a.rank() != b.rank() {
                return Err(FouraError::IncompatibleCheckpoints(format!(
                    "layer {i}: checkpoint {k} is {:?} rank {}, checkpoint 0 is {:?} rank {}",
                    a.w0.shape(),
                    a.rank(),
                    b.w0.shape(),
                    b.rank()
                )));
            }
        }
    }
    Ok(())
}

fn load_base(path: &Path, like: &AdapterSet) -> Result<Vec<Matrix>> {
    let ck = Checkpoint::load(path)?;
    like.layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let name = format!("layer{i}.w0");
            let t = ck
                .tensor(&name)
                .ok_or_else(|| FouraError::IncompatibleCheckpoints(format!("base has no `{name}`")))?;
            let w0 = t.to_matrix()?;
            if w0.shape() != l.w0.shape() {
                return Err(FouraError::IncompatibleCheckpoints(format!(
                    "base `{name}` is {:?}, adapters expect {:?}",
                    w0.shape(),
                    l.w0.shape()
                )));
            }
            Ok(w0)
        })
        .collect()
}

fn status_of(e: &FouraError) -> String {
    match e {
        FouraError::DegenerateBound { .. } => "degenerate_bound".into(),
        FouraError::DegenerateProjection(_) => "degenerate_projection".into(),
        FouraError::DegenerateSubspace => "degenerate_subspace".into(),
        other => other.to_string().replace(',', ";"),
    }
}

/// Writes `spread.csv`, `amplification.csv`, `bound.csv`, and optionally
/// `projection.csv` (both orientations) and `sigmas.svg`.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<Vec<PathBuf>> {
    let start = Instant::now();
    if args.checkpoints.is_empty() {
        return Err(FouraError::invalid("analyze needs at least one checkpoint"));
    }
    let sets = args
        .checkpoints
        .iter()
        .map(|p| load_adapters(p))
        .collect::<Result<Vec<_>>>()?;
    check_compatible(&sets)?;
    let bases = match &args.base {
        Some(p) => Some(load_base(p, &sets[0])?),
        None => None,
    };
    // ΔW per checkpoint per layer, on the calibrated masks.
    let deltas = sets
        .iter()
        .map(|s| {
            s.layers
                .iter()
                .zip(&s.frozen_masks)
                .map(|(l, m)| materialize_delta_w(l, m))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let mut spread = Csv::new(&["checkpoint", "layer", "index", "sigma", "tail_energy_ratio"]);
    let mut amp = Csv::new(&["checkpoint", "layer", "rank", "dw_norm", "proj_norm", "factor", "status"]);
    let mut bound = Csv::new(&["checkpoint", "layer", "effective_rank", "nominal_rank", "p", "bound", "status"]);
    let mut series = Vec::new();
    for (k, (set, dws)) in sets.iter().zip(&deltas).enumerate() {
        for (i, (layer, dw)) in set.layers.iter().zip(dws).enumerate() {
            let rep = analysis::spread_report(dw)?;
            for (j, &s) in rep.sigmas.iter().enumerate() {
                spread.push(vec![k.into(), i.into(), j.into(), s.into(), rep.tail_energy_ratio(j + 1).into()]);
            }
            series.push((format!("ckpt {k} layer {i}"), rep.sigmas.clone()));

            let w0 = bases.as_ref().map_or(&layer.w0, |b| &b[i]);
            match analysis::amplification_factor(w0, dw, args.rank) {
                Ok(a) => amp.push(vec![
                    k.into(),
                    i.into(),
                    args.rank.into(),
                    a.dw_norm.into(),
                    a.proj_norm.into(),
                    a.factor.into(),
                    "ok".into(),
                ]),
                Err(e @ FouraError::DegenerateProjection(_)) => amp.push(vec![
                    k.into(),
                    i.into(),
                    args.rank.into(),
                    dw.sum_squares().sqrt().into(),
                    f64::NAN.into(),
                    f64::NAN.into(),
                    status_of(&e).into(),
                ]),
                Err(e) => return Err(e),
            }

            let mask = &set.frozen_masks[i];
            let eff = mask.iter().filter(|&&b| b).count();
            let p = eff as f64 / layer.rank() as f64;
            let bp = BoundParams {
                c: args.bound.c,
                rho: args.bound.rho,
                lambda_min: args.bound.lambda_min,
                p,
                n: args.bound.n,
                delta: args.bound.delta,
                r_hat: args.bound.r_hat,
            };
            let (value, status) = match analysis::generalization_bound(&bp) {
                Ok(v) => (v, "ok".to_string()),
                Err(e) => (f64::NAN, status_of(&e)),
            };
            bound.push(vec![
                k.into(),
                i.into(),
                eff.into(),
                layer.rank().into(),
                p.into(),
                value.into(),
                status.into(),
            ]);
        }
    }

    create_dir(&args.out)?;
    let mut written = Vec::new();
    for (name, csv) in [("spread.csv", &spread), ("amplification.csv", &amp), ("bound.csv", &bound)] {
        let p = args.out.join(name);
        csv.write(&p)?;
        written.push(p);
    }

    if args.pairwise {
        let mut proj = Csv::new(&["layer", "source", "reference", "rank", "raw", "normalized", "status"]);
        for i in 0..sets[0].layers.len() {
            for (s, dws) in deltas.iter().enumerate() {
                for (r, dwr) in deltas.iter().enumerate() {
                    if s == r {
                        continue;
                    }
                    let row = |raw: f64, norm: f64, status: String| -> Vec<Cell> {
                        vec![i.into(), s.into(), r.into(), args.rank.into(), raw.into(), norm.into(), status.into()]
                    };
                    match analysis::projection_norm(&dws[i], &dwr[i], args.rank) {
                        Ok(p) => proj.push(row(p.raw, p.normalized, "ok".into())),
                        Err(e @ FouraError::DegenerateSubspace) => proj.push(row(f64::NAN, f64::NAN, status_of(&e))),
                        Err(e) => return Err(e),
                    }
                }
            }
        }
        let p = args.out.join("projection.csv");
        proj.write(&p)?;
        written.push(p);
    }

    if args.svg {
        let p = args.out.join("sigmas.svg");
        std::fs::write(&p, line_plot_svg("Singular values of delta W", "index", "sigma", &series))?;
        written.push(p);
    }

    let flags = format!(
        "checkpoints = {:?}\nbase = {:?}\nrank = {}\npairwise = {}\nsvg = {}\nbound = {:?}\n",
        args.checkpoints, args.base, args.rank, args.pairwise, args.svg, args.bound
    );
    let mut manifest = RunManifest::new("analyze", flags, Vec::new());
    let mpath = args.out.join("manifest.json");
    manifest.outputs = written.clone();
    manifest.outputs.push(mpath.clone());
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(&mpath)?;
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct MergeArgs {
    pub first: PathBuf,
    pub second: PathBuf,
    pub alphas: [f64; 2],
    pub probe_seed: u64,
    pub probes: usize,
    /// Projection rank of the compatibility score (default: adapter rank).
    pub rank: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone)]
pub struct MergeOutcome {
    /// `[probe][layer]` merged outputs.
    pub outputs: Vec<Vec<Matrix>>,
    /// Per layer: first onto second, second onto first.
    pub compatibility: Vec<[f64; 2]>,
}

/// Seeded probe input for `layer` (tokens × in_dim).
pub fn probe_input(seed: u64, probe: usize, tokens: usize, in_dim: usize) -> Matrix {
    Rng::derive(seed, probe as u64).gaussian_matrix(tokens, in_dim, 1.0)
}

/// Merges two checkpoints layer by layer on seeded probes; writes
/// `merged.csv` (norms), `outputs.csv` (entries) and `compatibility.csv`.
pub fn cmd_merge(args: &MergeArgs) -> Result<MergeOutcome> {
    let start = Instant::now();
    if args.probes < 1 {
        return Err(FouraError::invalid("need at least one probe"));
    }
    let sets = [load_adapters(&args.first)?, load_adapters(&args.second)?];
    check_compatible(&sets)?;
    let l1 = sets[0].frozen_layers()?;
    let l2 = sets[1].frozen_layers()?;
    let tokens: usize = sets[0].meta.get("tokens").and_then(|t| t.parse().ok()).unwrap_or(16);

    let mut norms = Csv::new(&["probe", "layer", "output_norm"]);
    let mut entries = Csv::new(&["probe", "layer", "token", "feature", "value"]);
    let mut outputs = Vec::with_capacity(args.probes);
    for p in 0..args.probes {
        let mut per_layer = Vec::with_capacity(l1.len());
        for (i, (a, b)) in l1.iter().zip(&l2).enumerate() {
            let z = probe_input(args.probe_seed, p, tokens, a.in_dim());
            let spec = MergeSpec::output_sum(vec![(a, args.alphas[0]), (b, args.alphas[1])]);
            let y = merge_outputs(&spec, &z).map_err(incompatible)?;
            norms.push(vec![p.into(), i.into(), y.sum_squares().sqrt().into()]);
            for t in 0..y.rows() {
                for f in 0..y.cols() {
                    entries.push(vec![p.into(), i.into(), t.into(), f.into(), y.get(t, f).into()]);
                }
            }
            per_layer.push(y);
        }
        outputs.push(per_layer);
    }

    let mut compat = Csv::new(&["layer", "rank", "first_onto_second", "second_onto_first"]);
    let mut scores = Vec::with_capacity(l1.len());
    for (i, (a, b)) in l1.iter().zip(&l2).enumerate() {
        let r = args.rank.unwrap_or(a.rank());
        let s12 = merge_compatibility(a, b, r).map_err(incompatible)?;
        let s21 = merge_compatibility(b, a, r).map_err(incompatible)?;
        compat.push(vec![i.into(), r.into(), s12.into(), s21.into()]);
        scores.push([s12, s21]);
    }

    create_dir(&args.out)?;
    let mut manifest = RunManifest::new(
        "merge",
        format!(
            "first = {:?}\nsecond = {:?}\nalphas = {:?}\nprobe_seed = {}\nprobes = {}\nrank = {:?}\n",
            args.first, args.second, args.alphas, args.probe_seed, args.probes, args.rank
        ),
        vec![args.probe_seed],
    );
    for (name, csv) in [("merged.csv", &norms), ("outputs.csv", &entries), ("compatibility.csv", &compat)] {
        let p = args.out.join(name);
        csv.write(&p)?;
        manifest.outputs.push(p);
    }
    let mpath = args.out.join("manifest.json");
    manifest.outputs.push(mpath.clone());
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(&mpath)?;
    Ok(MergeOutcome {
        outputs,
        compatibility: scores,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub worst: String,
    pub n_scalars: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckSummary {
    pub rows: Vec<GradCheckRow>,
}

impl GradCheckSummary {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.max_rel_err < GRAD_CHECK_TOL)
    }

    pub fn worst(&self) -> Option<&GradCheckRow> {
        self.rows.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let verdict = if r.max_rel_err < GRAD_CHECK_TOL { "ok" } else { "FAIL" };
            s.push_str(&format!(
                "{verdict:4} {:<28} max_rel_err={:.3e} scalars={} worst={}\n",
                r.name, r.max_rel_err, r.n_scalars, r.worst
            ));
        }
        if let Some(w) = self.worst() {
            s.push_str(&format!(
                "{}: worst op {} ({}) at {:.3e}\n",
                if self.passed() { "PASS" } else { "FAIL" },
                w.name,
                w.worst,
                w.max_rel_err
            ));
        }
        s
    }
}

/// Layer combinations covered by the gradient check.
pub fn grad_check_cases(seed: u64) -> Vec<(String, AdapterLayer, Matrix)> {
    const K1: usize = 6;
    const K2: usize = 5;
    const R: usize = 3;
    const TOKENS: usize = 4;
    let mut cases = Vec::new();
    let mut rng = Rng::derive(seed, 0);
    let w0 = rng.gaussian_matrix(K1, K2, 0.4);
    let z = rng.gaussian_matrix(TOKENS, K1, 1.0);
    let a = rng.gaussian_matrix(R, K1, 0.5);
    let b = rng.gaussian_matrix(K2, R, 0.5);
    cases.push((
        "lora".to_string(),
        AdapterLayer::lora(w0.clone(), a.clone(), b.clone(), 0.8).expect("valid shapes"),
        z.clone(),
    ));
    for kind in [TransformKind::Dft, TransformKind::Dct] {
        for axis in [Axis::Embedding, Axis::Token] {
            for mode in [GateMode::Soft, GateMode::Frozen] {
                let mut gate = GateState::init(R, mode, &mut rng, 0.5, 0.0);
                if mode == GateMode::Frozen {
                    gate.frozen_mask = Some(vec![true, false, true]);
                }
                let layer = AdapterLayer::foura(w0.clone(), a.clone(), b.clone(), 0.8, kind, axis, Some(gate))
                    .expect("valid shapes");
                let name = format!(
                    "foura-{}-{}-{}",
                    Transform::from(kind).as_str(),
                    axis.as_str(),
                    mode.as_str()
                );
                cases.push((name, layer, z.clone()));
            }
        }
    }
    cases
}

/// Finite-difference check of every case; `corrupt` injects a wrong gradient.
pub fn cmd_gradcheck(seed: u64, corrupt: bool) -> Result<GradCheckSummary> {
    let mut rows = Vec::new();
    for (name, layer, z) in grad_check_cases(seed) {
        let rep = grad_check_report(&layer, &z, 1e-5, corrupt)?;
        rows.push(GradCheckRow {
            name,
            max_rel_err: rep.max_rel_err,
            worst: rep.worst,
            n_scalars: rep.n_scalars,
        });
    }
    Ok(GradCheckSummary { rows })
}

#[derive(Debug, Clone)]
pub struct DenoiseReport {
    pub nominal_rank: usize,
    /// Records under the trained (input-adaptive) gate.
    pub adaptive: Vec<TimestepRecord>,
    /// Records with every gate frozen on its calibrated mask.
    pub frozen: Vec<TimestepRecord>,
}

fn records(timesteps: &[usize], reports: &[Vec<MaskReport>]) -> Vec<TimestepRecord> {
    let mut out = Vec::new();
    for (t, reps) in timesteps.iter().zip(reports) {
        for (layer, rep) in reps.iter().enumerate() {
            out.push(TimestepRecord {
                timestep: *t,
                layer,
                effective_rank: rep.effective_rank,
                soft_mean: rep.soft_mean(),
            });
        }
    }
    out
}

/// Adaptive and frozen per-timestep effective ranks along one sampling run.
pub fn denoise_report(cfg: &TrainConfig) -> Result<DenoiseReport> {
    if cfg.task != Task::ToyDenoise {
        return Err(FouraError::config(0, "task", "denoise-report needs task = toy_denoise"));
    }
    let trace = run_toy_denoise(cfg)?;
    let (x_start, _) = denoise::eval_start(cfg)?;
    let frozen_layers = trace.frozen_layers()?;
    let traj = denoise::denoise_trajectory(&frozen_layers, &x_start, cfg.timesteps)?;
    Ok(DenoiseReport {
        nominal_rank: cfg.rank,
        adaptive: trace.timestep_ranks,
        frozen: records(&traj.timesteps, &traj.reports),
    })
}

/// Writes `denoise_ranks.csv`, `denoise_ranks.svg` and a manifest.
pub fn cmd_denoise_report(config: &Path, seed: Option<u64>, out: &Path) -> Result<DenoiseReport> {
    let start = Instant::now();
    let mut cfg = parse_config(&std::fs::read_to_string(config)?)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = denoise_report(&cfg)?;

    let mut csv = Csv::new(&["mode", "timestep", "layer", "effective_rank", "soft_mean"]);
    for (mode, recs) in [("adaptive", &report.adaptive), ("frozen", &report.frozen)] {
        for r in recs.iter() {
            csv.push(vec![
                mode.into(),
                r.timestep.into(),
                r.layer.into(),
                r.effective_rank.into(),
                r.soft_mean.into(),
            ]);
        }
    }
    let mut series = Vec::new();
    let n_layers = report.adaptive.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    for (mode, recs) in [("adaptive", &report.adaptive), ("frozen", &report.frozen)] {
        for layer in 0..n_layers {
            let ranks = recs
                .iter()
                .filter(|r| r.layer == layer)
                .map(|r| r.effective_rank as f64)
                .collect();
            series.push((format!("{mode} layer {layer}"), ranks));
        }
    }

    create_dir(out)?;
    let mut manifest = RunManifest::new("denoise-report", render_config(&cfg), vec![cfg.seed]);
    let cpath = out.join("denoise_ranks.csv");
    csv.write(&cpath)?;
    let spath = out.join("denoise_ranks.svg");
    std::fs::write(
        &spath,
        line_plot_svg("Effective rank along the sampler (T to 1)", "sampling step", "effective rank", &series),
    )?;
    let mpath = out.join("manifest.json");
    manifest.outputs = vec![cpath, spath, mpath.clone()];
    manifest.wall_time_s = start.elapsed().as_secs_f64();
    manifest.write(&mpath)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u64> = (0..17).collect();
        let out = parallel_map(&items, 4, |&x| x * x);
        assert_eq!(out, items.iter().map(|x| x * x).collect::<Vec<_>>());
        assert!(parallel_map(&Vec::<u64>::new(), 3, |&x| x).is_empty());
    }

    #[test]
    fn gradcheck_covers_combinations() {
        let s = cmd_gradcheck(0, false).unwrap();
        assert!(s.rows.len() >= 6);
        assert!(s.passed(), "{}", s.render());
        let bad = cmd_gradcheck(0, true).unwrap();
        assert!(!bad.passed());
        assert!(bad.render().contains("FAIL"));
    }
}
