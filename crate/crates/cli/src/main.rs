//! `cascreg` — batch front end: register, evaluate, synthesize, gradcheck.
//!
//! Exit codes: 0 success, 1 gradient check failed, 2 bad input,
//! 3 numeric failure during registration (partial trace still written).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cascreg::autodiff::{gradient_check, GradientCheckConfig, GradientCheckReport};
use cascreg::cascade::{
    gradient_check_instance, register, register_bidirectional, CascadeObjective, CascadeSpec, LossTrace,
    RegistrationError, RegistrationResult,
};
use cascreg::field::{central_region, FlowField, Volume};
use cascreg::io::{self, RunConfig};
use cascreg::metrics::{endpoint_error, jacobian_stats, landmark_distance, seg_iou, warp_mask};
use cascreg::synth::{make_pair, make_phantom, random_bspline_flow};
use cascreg::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "cascreg", version, about = "Cascaded affine + dense 3D image registration")]
struct Cli {
    /// Worker threads (default: all cores). Outputs are identical for a
    /// fixed thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed one.
    Register(RegisterArgs),
    /// Score a flow against masks, landmarks and/or a ground-truth flow.
    Eval(EvalArgs),
    /// Write a synthetic phantom pair with its ground truth.
    Synth(SynthArgs),
    /// Check analytic against finite-difference gradients of the cascade.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the moving image as warped by each stage.
    #[arg(long)]
    dump_intermediates: bool,
    /// Overrides `cascade.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Optimize both directions jointly with the invertibility loss.
    #[arg(long)]
    bidirectional: bool,
    #[command(flatten)]
    refs: References,
}

/// Optional references scored against the result.
#[derive(Args)]
struct References {
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, requires = "moving_mask")]
    fixed_mask: Option<PathBuf>,
    #[arg(long, requires = "fixed_mask")]
    moving_mask: Option<PathBuf>,
    #[arg(long, requires = "moving_landmarks")]
    fixed_landmarks: Option<PathBuf>,
    #[arg(long, requires = "fixed_landmarks")]
    moving_landmarks: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    flow: PathBuf,
    #[command(flatten)]
    refs: References,
    /// Also write the metrics JSON here (it is always printed).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides both the phantom and the B-spline seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `gradcheck.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

enum Failure {
    BadInput(String),
    Numeric(String),
    CheckFailed,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric { .. } => Failure::Numeric(e.to_string()),
            other => Failure::BadInput(other.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => RunConfig::load(p).map_err(|e| Failure::BadInput(format!("{}: {e}", p.display()))),
        None => Ok(RunConfig::default()),
    }
}

fn read<T>(path: &Path, f: impl FnOnce(&Path) -> cascreg::Result<T>) -> Result<T, Failure> {
    f(path).map_err(|e| Failure::BadInput(format!("{}: {e}", path.display())))
}

fn write(path: &Path, f: impl FnOnce(&Path) -> cascreg::Result<()>) -> CmdResult {
    f(path).map_err(|e| Failure::BadInput(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    write(path, |p| Ok(fs::write(p, text)?))
}

fn create_dir(out: &Path) -> CmdResult {
    fs::create_dir_all(out).map_err(|e| Failure::BadInput(format!("cannot create {}: {e}", out.display())))
}

/// Metrics of `flow`, which should already be single-precision rounded so
/// the numbers agree with anything recomputed from the written file.
fn flow_metrics(flow: &FlowField, refs: &References) -> Result<Map<String, Value>, Failure> {
    let grid = flow.grid();
    let mut m = Map::new();
    if grid.dims().iter().all(|&d| d >= 3) {
        let j = jacobian_stats(flow)?;
        m.insert("std_jacobian".into(), json!(j.std_jacobian));
        m.insert("folding_fraction".into(), json!(j.folding_fraction));
    }
    m.insert("mean_flow_magnitude".into(), json!(flow.mean_magnitude()));
    if let Some(p) = &refs.ground_truth {
        let gt = read(p, |p| io::read_flow(p))?;
        m.insert("endpoint_error".into(), json!(endpoint_error(flow, &gt, &central_region(&grid)?)?));
    }
    if let (Some(f), Some(mv)) = (&refs.fixed_mask, &refs.moving_mask) {
        let fixed = read(f, |p| io::read_mask(p))?;
        let moving = read(mv, |p| io::read_mask(p))?;
        m.insert("seg_iou".into(), json!(seg_iou(&warp_mask(&moving, flow)?, &fixed)?));
    }
    if let (Some(f), Some(mv)) = (&refs.fixed_landmarks, &refs.moving_landmarks) {
        let fixed = read(f, |p| io::read_landmarks(p))?;
        let moving = read(mv, |p| io::read_landmarks(p))?;
        m.insert("landmark_distance".into(), json!(landmark_distance(&moving, &fixed, flow)?));
    }
    Ok(m)
}

fn result_metrics(r: &RegistrationResult, flow: &FlowField, refs: &References) -> Result<Value, Failure> {
    let mut m = flow_metrics(flow, refs)?;
    m.insert("initial_loss".into(), json!(r.metrics.initial_loss));
    m.insert("final_loss".into(), json!(r.metrics.final_loss));
    m.insert("final_similarity".into(), json!(r.metrics.final_similarity));
    m.insert("loss_increased".into(), json!(r.loss_increased));
    m.insert("iterations".into(), json!(r.trace.rows.len().saturating_sub(1)));
    let terms: Map<String, Value> = r.terms.iter().map(|t| (t.name.clone(), json!(t.value))).collect();
    m.insert("terms".into(), Value::Object(terms));
    Ok(Value::Object(m))
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("metrics serialize");
    s.push('\n');
    s
}

fn cmd_register(args: RegisterArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.cascade.seed = s;
    }
    let spec: CascadeSpec = cfg.cascade.to_spec()?;
    let fixed = read(&args.fixed, |p| io::read_volume(p))?;
    let moving = read(&args.moving, |p| io::read_volume(p))?;
    if fixed.grid() != moving.grid() {
        return Err(Failure::BadInput(format!(
            "fixed dims {:?} differ from moving dims {:?}",
            fixed.grid().dims(),
            moving.grid().dims()
        )));
    }
    create_dir(&args.out)?;
    let names = &cfg.outputs;
    let out = |name: &str| args.out.join(name);

    let abort = |e: RegistrationError| -> Failure {
        if let Err(f) = write_text(&out(&names.trace), &e.trace.to_csv()) {
            return f;
        }
        e.source.into()
    };
    let write_result = |r: &RegistrationResult, tag: &str| -> CmdResult {
        let flow = io::quantize_flow(&r.composed);
        write(&out(&format!("{tag}{}", names.flow)), |p| io::write_flow(p, &flow))?;
        let warped = r.warped.last().expect("at least one stage");
        write(&out(&format!("{tag}{}", names.warped)), |p| io::write_volume(p, warped))?;
        if args.dump_intermediates {
            for (k, v) in r.warped.iter().enumerate() {
                let name = format!("{tag}{}{k}.mvol", names.intermediate_prefix);
                write(&out(&name), |p| io::write_volume(p, v))?;
            }
        }
        Ok(())
    };

    let (trace, metrics): (LossTrace, Value) = if args.bidirectional {
        let (r12, r21) = register_bidirectional(&fixed, &moving, &spec).map_err(abort)?;
        write_result(&r12, "")?;
        write_result(&r21, "reverse_")?;
        let mut m = result_metrics(&r12, &io::quantize_flow(&r12.composed), &args.refs)?;
        let reverse = flow_metrics(&io::quantize_flow(&r21.composed), &References::none())?;
        m["reverse"] = Value::Object(reverse);
        eprintln!("registered both directions in {:.2} s", r12.wall_time.as_secs_f64());
        (r12.trace, m)
    } else {
        let r = register(&fixed, &moving, &spec).map_err(abort)?;
        write_result(&r, "")?;
        eprintln!("registered in {:.2} s", r.wall_time.as_secs_f64());
        (r.trace.clone(), result_metrics(&r, &io::quantize_flow(&r.composed), &args.refs)?)
    };
    write_text(&out(&names.trace), &trace.to_csv())?;
    write_text(&out(&names.metrics), &pretty(&metrics))
}

impl References {
    fn none() -> Self {
        References { ground_truth: None, fixed_mask: None, moving_mask: None, fixed_landmarks: None, moving_landmarks: None }
    }
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let flow = read(&args.flow, |p| io::read_flow(p))?;
    let text = pretty(&Value::Object(flow_metrics(&flow, &args.refs)?));
    print!("{text}");
    match &args.out {
        Some(p) => write_text(p, &text),
        None => Ok(()),
    }
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.phantom.seed = s;
        cfg.bspline.seed = s;
    }
    let phantom = make_phantom(&cfg.phantom)?;
    let flow = random_bspline_flow(&cfg.bspline, phantom.volume.grid())?;
    let pair = make_pair(&phantom, &flow)?;
    create_dir(&args.out)?;
    let n = &cfg.outputs;
    let out = |name: &str| args.out.join(name);
    let vol = |name: &str, v: &Volume| write(&out(name), |p| io::write_volume(p, v));
    vol(&n.fixed, &pair.fixed)?;
    vol(&n.moving, &pair.moving)?;
    write(&out(&n.ground_truth), |p| io::write_flow(p, &pair.ground_truth))?;
    write(&out(&n.fixed_mask), |p| io::write_mask(p, &pair.fixed_mask))?;
    write(&out(&n.moving_mask), |p| io::write_mask(p, &pair.moving_mask))?;
    write(&out(&n.fixed_landmarks), |p| io::write_landmarks(p, &pair.fixed_landmarks))?;
    write(&out(&n.moving_landmarks), |p| io::write_landmarks(p, &pair.moving_landmarks))
}

fn cmd_gradcheck(args: GradcheckArgs) -> CmdResult {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        cfg.gradcheck.seed = s;
    }
    let g = &cfg.gradcheck;
    let spec = cfg.cascade.to_spec()?;
    let inst = gradient_check_instance(&spec, g.size, g.seed)?;
    let obj = CascadeObjective { fixed: &inst.fixed, moving: &inst.moving, spec: &spec };
    let check = GradientCheckConfig {
        step: g.step,
        tolerance: g.tolerance,
        coordinates: g.coordinates,
        seed: g.seed,
        ..Default::default()
    };
    let report: GradientCheckReport = gradient_check(&obj, &inst.params, &check)?;
    println!("{}", GradientCheckReport::CSV_HEADER);
    println!("{}", report.to_csv());
    if report.passed {
        Ok(())
    } else {
        Err(Failure::CheckFailed)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot set up {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::CheckFailed) => {
            eprintln!("gradient check failed");
            ExitCode::from(1)
        }
        Err(Failure::BadInput(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(3)
        }
    }
}
