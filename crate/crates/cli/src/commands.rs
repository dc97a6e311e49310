use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use icmf_core::checkpoint::{self, TrainState};
use icmf_core::dataset::{decode_png, encode_png, image_to_mask, image_to_tensor, load_pair_dataset, mask_to_gray, tensor_to_rgb};
use icmf_core::eval::{evaluate_all, iou, records_csv, summarize, EvalRecord, EvalSummary, Instance, THRESHOLDS};
use icmf_core::gradcheck::{check_params, sample_probes, GradCheckReport, DEFAULT_STEP};
use icmf_core::mask::MASK_THRESHOLD;
use icmf_core::oracle::{first_click, next_click, ClickPolicy};
use icmf_core::params::Ctx;
use icmf_core::stubs::{EmptySegmenter, OracleSegmenter, QuadrantSegmenter};
use icmf_core::synth::synth_dataset;
use icmf_core::training::{nfl_loss_fixed, nfl_normalizer, TrainSample, Trainer};
use icmf_core::{BitMask, Click, InteractionState, Model, ModelConfig, Segmenter};
use icmf_server::{AppState, Backend, ServerConfig, Session};
use image::DynamicImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{resolve, CliConfig, CommonArgs, ModelArgs, TrainArgs};
use crate::error::{CliError, CliResult};
use crate::{BackendArgs, DataArgs, EvalCmd, GradcheckCmd, ServeCmd, SimulateCmd, Stub, SynthCmd, TrainCmd};

/// Gradient scale of the corrupted-backward negative control. Parameter
/// gradients of the tiny model are around 1e-4, so the factor has to be
/// large for the absolute error to clear the tolerance.
pub const CORRUPT_FACTOR: f64 = 1e3;

/// Largest width `gradcheck` accepts.
pub const GRADCHECK_MAX_DIM: usize = 128;

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn read_png(path: &Path) -> CliResult<DynamicImage> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    decode_png(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn load_instances(data: &DataArgs, side: usize, seed: u64, default_synth: usize) -> CliResult<Vec<Instance>> {
    let instances: Vec<Instance> = match &data.data_dir {
        Some(dir) => {
            let (samples, rejects) = load_pair_dataset(dir, side)?;
            for r in &rejects {
                log::warn!("skipping {}: {}", r.path.display(), r.reason);
            }
            samples.into_iter().map(|s| Instance { id: s.name, image: s.image, gt: s.gt }).collect()
        }
        None => synth_dataset(data.synth.unwrap_or(default_synth), side, data.data_seed.unwrap_or(seed))
            .into_iter()
            .enumerate()
            .map(|(i, s)| Instance { id: format!("synth_{i:03}"), image: s.image, gt: s.gt })
            .collect(),
    };
    if instances.is_empty() {
        return Err(CliError::Data("dataset has no usable samples".into()));
    }
    Ok(instances)
}

fn checkpoint_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("step-{step:06}.icmf"))
}

pub fn final_checkpoint(dir: &Path) -> PathBuf {
    dir.join("final.icmf")
}

fn save_checkpoint(path: &Path, t: &Trainer) -> CliResult<()> {
    let state = TrainState { config: t.cfg.clone(), step: t.step, adam: t.adam.clone() };
    checkpoint::save(path, &t.model, Some(&state)).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn train(cmd: &TrainCmd) -> CliResult<()> {
    let cfg = resolve(&cmd.common, &cmd.model, &cmd.train)?;
    create_dir(&cmd.out)?;
    write_file(&cmd.out.join("config.json"), serde_json::to_string_pretty(&cfg)?.as_bytes())?;
    let side = cfg.model.image_side;
    let data: Vec<TrainSample> = load_instances(&cmd.data, side, cfg.seed, 8)?
        .into_iter()
        .map(|i| TrainSample { image: i.image, gt: i.gt })
        .collect();

    let mut trainer = match &cmd.resume {
        Some(path) => {
            let ck = checkpoint::load_matching(path, &cfg.model)?;
            let ts = ck.train.ok_or_else(|| CliError::Data(format!("{} has no optimizer state", path.display())))?;
            let mut tcfg = ts.config;
            tcfg.steps = cfg.train.steps;
            let mut t = Trainer::new(ck.model, tcfg, data)?;
            t.adam = ts.adam;
            t.step = ts.step;
            log::info!("resuming at step {}", t.step);
            t
        }
        None => Trainer::new(Model::init(cfg.model.clone(), cfg.seed)?, cfg.train.clone(), data)?,
    };

    let log_path = cmd.out.join("train.ndjson");
    let file = if cmd.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| CliError::Data(format!("cannot write {}: {e}", log_path.display())))?;
    let mut log_out = BufWriter::new(file);

    while trainer.step < trainer.cfg.steps {
        let rec = trainer.step()?;
        if !rec.loss.is_finite() {
            return Err(CliError::Numeric(format!("non-finite loss at step {}", rec.step)));
        }
        writeln!(log_out, "{}", serde_json::to_string(&rec)?)?;
        if rec.step % 50 == 0 {
            log::info!("step {} loss {:.5} lr {:.1e}", rec.step, rec.loss, rec.lr);
        }
        if cmd.checkpoint_every > 0 && trainer.step % cmd.checkpoint_every == 0 {
            log_out.flush()?;
            save_checkpoint(&checkpoint_path(&cmd.out, trainer.step), &trainer)?;
        }
    }
    log_out.flush()?;
    let path = final_checkpoint(&cmd.out);
    save_checkpoint(&path, &trainer)?;
    println!("trained {} steps; checkpoint {}", trainer.step, path.display());
    Ok(())
}

/// Model from a checkpoint or a stub, plus the input side it works at.
enum Source {
    Model(Arc<Model>),
    Stub(Stub),
}

fn load_source(backend: &BackendArgs, common: &CommonArgs, model: &ModelArgs, cfg: &CliConfig) -> CliResult<(Source, usize)> {
    if let Some(stub) = backend.stub() {
        return Ok((Source::Stub(stub), cfg.model.image_side));
    }
    let Some(path) = &backend.checkpoint else {
        return Err(CliError::Usage("give --checkpoint, --stub or --oracle".into()));
    };
    let ck = if model.any_set() || common.config.is_some() {
        checkpoint::load_matching(path, &cfg.model)?
    } else {
        checkpoint::load(path)?
    };
    let side = ck.model.config().image_side;
    Ok((Source::Model(Arc::new(ck.model)), side))
}

fn segmenter_for(src: &Source, gt: &BitMask) -> Arc<dyn Segmenter> {
    let (h, w) = gt.dims();
    match src {
        Source::Model(m) => m.clone(),
        Source::Stub(Stub::Oracle) => Arc::new(OracleSegmenter { gt: gt.clone() }),
        Source::Stub(Stub::Empty) => Arc::new(EmptySegmenter { height: h, width: w }),
        Source::Stub(Stub::Quadrant) => Arc::new(QuadrantSegmenter { height: h, width: w }),
    }
}

/// Runs the protocol over `instances` on `workers` threads.
pub fn run_eval(instances: &[Instance], src_model: Option<Arc<Model>>, stub: Option<Stub>, cap: usize, workers: usize) -> CliResult<(Vec<EvalRecord>, EvalSummary)> {
    let src = match (src_model, stub) {
        (Some(m), _) => Source::Model(m),
        (None, Some(s)) => Source::Stub(s),
        (None, None) => return Err(CliError::Usage("no segmenter".into())),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let records = pool.install(|| evaluate_all(instances, |i| segmenter_for(&src, &i.gt), cap, &THRESHOLDS))?;
    let summary = summarize(&records)?;
    Ok((records, summary))
}

pub fn eval(cmd: &EvalCmd) -> CliResult<()> {
    let cfg = resolve(&cmd.common, &cmd.model, &TrainArgs::default())?;
    let (src, side) = load_source(&cmd.backend, &cmd.common, &cmd.model, &cfg)?;
    let instances = load_instances(&cmd.data, side, cfg.seed, 16)?;
    let workers = cmd.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    log::info!("evaluating {} instances on {workers} workers", instances.len());
    let (model, stub) = match src {
        Source::Model(m) => (Some(m), None),
        Source::Stub(s) => (None, Some(s)),
    };
    let (records, summary) = run_eval(&instances, model, stub, cmd.max_clicks, workers)?;
    let json = serde_json::to_string_pretty(&summary)?;
    if let Some(out) = &cmd.out {
        create_dir(out)?;
        write_file(&out.join("summary.json"), json.as_bytes())?;
        write_file(&out.join("records.csv"), records_csv(&records).as_bytes())?;
    }
    println!("{}", summary.table_row());
    println!("{json}");
    Ok(())
}

#[derive(Serialize)]
struct ReplayStep {
    row: usize,
    col: usize,
    positive: bool,
    area: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    iou: Option<f64>,
}

#[derive(serde::Deserialize)]
struct ClickJson {
    row: usize,
    col: usize,
    positive: bool,
}

pub fn simulate(cmd: &SimulateCmd) -> CliResult<()> {
    let cfg = resolve(&cmd.common, &cmd.model, &TrainArgs::default())?;
    let (src, side) = load_source(&cmd.backend, &cmd.common, &cmd.model, &cfg)?;
    let image = image_to_tensor(&read_png(&cmd.image)?);
    let gt = cmd.gt.as_deref().map(read_png).transpose()?.map(|g| image_to_mask(&g));
    let backend = match &src {
        Source::Model(m) => Backend::Model(m.clone()),
        Source::Stub(Stub::Oracle) => Backend::GroundTruth,
        Source::Stub(_) => return Err(CliError::Usage("simulate supports --oracle or a checkpoint".into())),
    };
    let mut session = Session::new(&image, gt.clone(), side).map_err(|e| CliError::Data(e.to_string()))?;
    let scripted: Option<Vec<ClickJson>> = match &cmd.clicks {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)
        }
        None if gt.is_none() => return Err(CliError::Usage("simulate needs --clicks or --gt".into())),
        None => None,
    };
    create_dir(&cmd.out)?;
    let mut steps = Vec::new();
    let mut policy = ClickPolicy::EvalDeterministic;
    for k in 0..cmd.max_clicks {
        let click = match (&scripted, &gt) {
            (Some(list), _) => match list.get(k) {
                Some(c) => Click::new(c.row, c.col, c.positive),
                None => break,
            },
            (None, Some(g)) => {
                let next = match session.mask() {
                    None => Some(first_click(g)?),
                    Some(m) if iou(m, g)? >= THRESHOLDS[1] => None,
                    Some(m) => next_click(m, g, &mut policy)?,
                };
                match next {
                    Some(c) => c,
                    None => break,
                }
            }
            (None, None) => unreachable!("checked above"),
        };
        session
            .push_click(click.row, click.col, click.positive)
            .map_err(|e| CliError::Data(format!("click {k}: {e}")))?;
        session.infer(&backend).map_err(|e| CliError::Data(e.to_string()))?;
        let mask = session.mask().expect("inference stores a mask");
        let png = encode_png(&DynamicImage::ImageLuma8(mask_to_gray(mask)))?;
        write_file(&cmd.out.join(format!("mask_{:02}.png", k + 1)), &png)?;
        steps.push(ReplayStep { row: click.row, col: click.col, positive: click.positive, area: mask.area(), iou: session.iou() });
    }
    let clicks: Vec<serde_json::Value> = steps
        .iter()
        .map(|s| serde_json::json!({ "row": s.row, "col": s.col, "positive": s.positive }))
        .collect();
    write_file(&cmd.out.join("clicks.json"), serde_json::to_string_pretty(&clicks)?.as_bytes())?;
    write_file(&cmd.out.join("replay.json"), serde_json::to_string_pretty(&steps)?.as_bytes())?;
    println!("{} clicks replayed into {}", steps.len(), cmd.out.display());
    Ok(())
}

/// Full-model gradient check on a synthetic sample after two rounds of
/// interaction, with the loss normalizer frozen at the base point.
pub fn gradcheck_model(model_cfg: &ModelConfig, seed: u64, n_params: usize, tolerance: f64, corrupt: bool) -> CliResult<GradCheckReport> {
    if model_cfg.dim > GRADCHECK_MAX_DIM {
        return Err(CliError::Usage(format!("gradcheck refuses dim {} > {GRADCHECK_MAX_DIM}", model_cfg.dim)));
    }
    let model = Model::init(model_cfg.clone(), seed)?;
    if n_params == 0 {
        log::warn!("n_params is 0; nothing to check");
        return Ok(GradCheckReport { results: vec![], tolerance });
    }
    let side = model_cfg.image_side;
    let sample = synth_dataset(1, side, seed).remove(0);
    let gt = sample.gt;
    let mut state = InteractionState::new();
    state.push(first_click(&gt)?, side, side)?;
    let pred = BitMask::binarize(&model.predict(&sample.image, &state)?, MASK_THRESHOLD)?;
    if let Some(c) = next_click(&pred, &gt, &mut ClickPolicy::EvalDeterministic)? {
        state.push(c, side, side)?;
    }
    state.set_prev_mask(Some(pred));
    let base = model.predict(&sample.image, &state)?;
    let gamma = icmf_core::training::DEFAULT_GAMMA;
    let z = nfl_normalizer(base.data(), &gt, gamma);

    let sizes: Vec<usize> = model.params.tensors().iter().map(|t| t.numel()).collect();
    let probes = sample_probes(&sizes, n_params, &mut ChaCha8Rng::seed_from_u64(seed));
    let report = check_params(&model.params, &probes, DEFAULT_STEP, tolerance, |ctx: &mut Ctx| {
        let prob = model.net.forward_state(ctx, &sample.image, &state)?;
        let loss = nfl_loss_fixed(&mut ctx.tape, prob, &gt, gamma, z)?;
        if !corrupt {
            return Ok(loss);
        }
        // Same value, gradient scaled by CORRUPT_FACTOR.
        let frozen = ctx.tape.constant(ctx.tape.value(loss).clone());
        let up = ctx.tape.scale(loss, CORRUPT_FACTOR);
        let rest = ctx.tape.scale(frozen, CORRUPT_FACTOR - 1.0);
        ctx.tape.sub(up, rest)
    })?;
    Ok(report)
}

pub fn gradcheck(cmd: &GradcheckCmd) -> CliResult<()> {
    let cfg = resolve(&cmd.common, &cmd.model, &TrainArgs::default())?;
    let report = gradcheck_model(&cfg.model, cfg.seed, cmd.n_params, cmd.tolerance, cmd.corrupt_backward)?;
    let n = report.results.len();
    let err = report.max_rel_err();
    if report.passed() {
        println!("gradcheck PASS: {n} probes, max rel err {err:.3e} (tolerance {:.0e})", cmd.tolerance);
        Ok(())
    } else {
        let w = report.worst().expect("failed report has probes");
        println!("gradcheck FAIL: {n} probes, max rel err {err:.3e} (tolerance {:.0e})", cmd.tolerance);
        Err(CliError::Numeric(format!(
            "tensor {} element {}: analytic {:e} vs numeric {:e}",
            w.probe.tensor, w.probe.element, w.analytic, w.numeric
        )))
    }
}

pub fn synth(cmd: &SynthCmd) -> CliResult<()> {
    let cfg = resolve(&cmd.common, &ModelArgs::default(), &TrainArgs::default())?;
    if cmd.side < 8 {
        return Err(CliError::Usage(format!("side {} too small (minimum 8)", cmd.side)));
    }
    create_dir(&cmd.out)?;
    for (i, s) in synth_dataset(cmd.n, cmd.side, cfg.seed).iter().enumerate() {
        let img = encode_png(&DynamicImage::ImageRgb8(tensor_to_rgb(&s.image)))?;
        let mask = encode_png(&DynamicImage::ImageLuma8(mask_to_gray(&s.gt)))?;
        write_file(&cmd.out.join(format!("synth_{i:03}.png")), &img)?;
        write_file(&cmd.out.join(format!("synth_{i:03}_mask.png")), &mask)?;
    }
    println!("wrote {} pairs to {}", cmd.n, cmd.out.display());
    Ok(())
}

pub fn serve(cmd: &ServeCmd) -> CliResult<()> {
    let cfg = resolve(&cmd.common, &cmd.model, &TrainArgs::default())?;
    let (src, side) = load_source(&cmd.backend, &cmd.common, &cmd.model, &cfg)?;
    let backend = match src {
        Source::Model(m) => Backend::Model(m),
        Source::Stub(Stub::Oracle) => Backend::GroundTruth,
        Source::Stub(_) => return Err(CliError::Usage("serve supports --oracle or a checkpoint".into())),
    };
    let server_cfg = ServerConfig {
        side,
        ttl: Duration::from_secs(cmd.ttl_secs),
        capacity: cmd.capacity,
        static_dir: cmd.static_dir.clone(),
        ..ServerConfig::default()
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(icmf_server::serve(cmd.addr, AppState::new(backend, server_cfg)))
        .map_err(|e| CliError::Data(format!("server: {e}")))
}
