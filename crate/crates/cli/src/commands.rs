use std::collections::HashMap;
use std::hint::black_box;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use tinydetr::boxgeom::{expanded_iou, expanded_siou, iou, siou};
use tinydetr::distill::{read_replay, write_replay, TeacherRecord};
use tinydetr::eval::average_precision;
use tinydetr::pipeline::demo::{ddf_demo, write_pgm};
use tinydetr::pipeline::experiments::{format_table, run_ablation, run_kd_grid, ArmResult, KdArm};
use tinydetr::pipeline::scene::{gen_dataset, read_dataset, split_train_val, write_dataset, DatasetHeader};
use tinydetr::pipeline::train::{eval_inputs, teacher_replay, train, KdSetup, TrainOutcome, TrainOutputs};
use tinydetr::{Box, Detection, Error, ImageEval, Model, ModelConfig, Rng, RunConfig, Scene};

use crate::{BenchArgs, Command, DemoArgs, DistillArgs, EvalArgs, GenDataArgs, Preset, Split, TrainArgs, TrainOverrides};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub fn run(cmd: Command) -> CliResult {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Distill(a) => distill_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::DemoDdf(a) => demo_cmd(a),
        Command::BenchIou(a) => bench_iou(a),
    }
}

fn load_config(path: Option<&Path>) -> CliResult<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn create_dir(dir: &Path) -> CliResult {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.scene.seed = s;
    }
    cfg.validate()?;
    let scenes = gen_dataset(&cfg.scene, a.n)?;
    write_dataset(&a.out, &cfg.scene, &scenes)?;
    cfg.save(&a.out.with_extension("config.toml"))?;
    println!("wrote {} scenes (seed {}) to {}", scenes.len(), cfg.scene.seed, a.out.display());
    Ok(())
}

/// Dataset scenes plus a config whose scene/model shapes follow the dataset header.
fn load_data(path: &Path, cfg: &mut RunConfig) -> CliResult<Vec<Scene>> {
    let (header, scenes): (DatasetHeader, _) = read_dataset(path)?;
    cfg.scene.seed = header.seed;
    cfg.scene.image_size = header.image_size;
    cfg.scene.classes = header.classes;
    cfg.model.image_size = header.image_size;
    cfg.model.classes = header.classes;
    Ok(scenes)
}

fn apply_overrides(cfg: &mut RunConfig, o: &TrainOverrides) {
    if let Some(v) = o.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = o.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = o.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = o.lr {
        cfg.train.learning_rate = v;
    }
}

fn split(scenes: &[Scene]) -> CliResult<(Vec<Scene>, Vec<Scene>)> {
    let (tr, va) = split_train_val(scenes);
    if tr.is_empty() {
        return Err(Error::Config("dataset has no training scenes".into()).into());
    }
    Ok((tr, va))
}

fn run_outputs(dir: &Path) -> TrainOutputs {
    TrainOutputs {
        checkpoint: Some(dir.join("best.ckpt")),
        metrics: Some(dir.join("metrics.jsonl")),
    }
}

#[derive(Serialize)]
struct RunSummary {
    best_ap50: Option<f64>,
    best_epoch: usize,
    epochs: usize,
    params: usize,
}

fn finish_run(dir: &Path, r: &TrainOutcome) -> CliResult {
    r.last.save(&dir.join("last.ckpt"))?;
    let summary = RunSummary {
        best_ap50: r.best_ap50,
        best_epoch: r.best_epoch,
        epochs: r.logs.len(),
        params: r.best.num_params(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    match r.best_ap50 {
        Some(ap) => println!("best val AP50 {ap:.4} at epoch {}", r.best_epoch),
        None => println!("no validation scenes; kept the last epoch"),
    }
    Ok(())
}

fn report_arm(r: &ArmResult) {
    eprintln!("{}: mean AP50 {:.4} over seeds {:?}", r.arm, r.mean_ap50, r.seeds);
}

fn write_table(dir: &Path, stem: &str, rows: &[ArmResult]) -> CliResult {
    let table = format_table(rows);
    write_text(&dir.join(format!("{stem}.md")), &table)?;
    write_json(&dir.join(format!("{stem}.json")), &rows)?;
    print!("{table}");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> CliResult {
    let mut cfg = load_config(a.common.config.as_deref())?;
    if let Some(p) = a.preset {
        let m = if p == Preset::Teacher { ModelConfig::teacher() } else { ModelConfig::default() };
        cfg.model.channels = m.channels;
        cfg.model.decoder_layers = m.decoder_layers;
    }
    apply_overrides(&mut cfg, &a.common);
    if a.no_eiou_select {
        cfg.model.eiou_select = false;
    }
    if a.no_ddf {
        cfg.model.use_ddf = false;
    }
    let scenes = load_data(&a.data, &mut cfg)?;
    cfg.validate()?;
    create_dir(&a.out_dir)?;
    cfg.save(&a.out_dir.join("config.toml"))?;
    let (tr, va) = split(&scenes)?;
    if a.ablation {
        let seeds = a.seeds.unwrap_or_else(|| vec![0, 1, 2]);
        let rows = run_ablation(&cfg.model, &cfg.train, &seeds, &tr, &va, report_arm)?;
        return write_table(&a.out_dir, "ablation", &rows);
    }
    let r = train(&cfg.model, &cfg.train, &tr, &va, None, &run_outputs(&a.out_dir))?;
    finish_run(&a.out_dir, &r)
}

fn distill_cmd(a: DistillArgs) -> CliResult {
    let mut cfg = load_config(a.common.config.as_deref())?;
    apply_overrides(&mut cfg, &a.common);
    if let Some(s) = a.schedule {
        cfg.kd.schedule = s.into();
    }
    if let Some(k) = a.kd_iou {
        cfg.kd.iou = k.into();
    }
    if let Some(w) = a.w0 {
        cfg.kd.w0 = w;
    }
    if let Some(t) = &a.teacher {
        cfg.kd.teacher_checkpoint = Some(t.display().to_string());
        cfg.kd.replay = None;
    }
    if let Some(r) = &a.replay {
        cfg.kd.replay = Some(r.display().to_string());
        cfg.kd.teacher_checkpoint = None;
    }
    let scenes = load_data(&a.data, &mut cfg)?;
    cfg.validate()?;
    let kd_cfg = cfg.kd.kd_config(&cfg.model)?;
    let records: Vec<TeacherRecord> = match (&cfg.kd.teacher_checkpoint, &cfg.kd.replay) {
        (Some(t), _) => {
            let teacher = Model::load(Path::new(t))?;
            if teacher.cfg.classes != cfg.model.classes || teacher.cfg.image_size != cfg.model.image_size {
                return Err(Error::Config(format!("teacher {t} does not match the dataset classes or image size")).into());
            }
            teacher_replay(&teacher, &scenes)?
        }
        (None, Some(r)) => read_replay(Path::new(r))?,
        (None, None) => {
            return Err(Error::Config("distillation needs --teacher, --replay, or kd.teacher_checkpoint / kd.replay".into()).into())
        }
    };
    if let Some(p) = &a.write_replay {
        write_replay(p, &records)?;
    }
    create_dir(&a.out_dir)?;
    cfg.save(&a.out_dir.join("config.toml"))?;
    let (tr, va) = split(&scenes)?;
    if a.grid {
        let seeds = a.seeds.unwrap_or_else(|| vec![0, 1, 2]);
        let arm_seeds = a.arm_seeds.unwrap_or_else(|| seeds.clone());
        let key = KdArm {
            schedule: cfg.kd.schedule,
            iou: cfg.kd.iou,
        };
        let arms: Vec<(KdArm, Vec<u64>)> = KdArm::all()
            .into_iter()
            .map(|arm| (arm, if arm == key { seeds.clone() } else { arm_seeds.clone() }))
            .collect();
        let rows = run_kd_grid(&cfg.model, &cfg.train, &seeds, &arms, &records, &kd_cfg, cfg.kd.w0, &tr, &va, report_arm)?;
        return write_table(&a.out_dir, "kd_grid", &rows);
    }
    let kd = KdSetup::from_records(records, kd_cfg, cfg.kd.schedule, cfg.kd.w0);
    let r = train(&cfg.model, &cfg.train, &tr, &va, Some(&kd), &run_outputs(&a.out_dir))?;
    finish_run(&a.out_dir, &r)
}

#[derive(Serialize, Deserialize)]
struct DetRecord {
    image_id: u64,
    detections: Vec<Detection>,
}

fn read_dets(path: &Path) -> CliResult<HashMap<u64, Vec<Detection>>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetRecord =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        for d in &rec.detections {
            d.bbox.validate()?;
        }
        out.entry(rec.image_id).or_insert_with(Vec::new).extend(rec.detections);
    }
    Ok(out)
}

fn eval_cmd(a: EvalArgs) -> CliResult {
    let mut cfg = load_config(a.config.as_deref())?;
    let scenes = load_data(&a.data, &mut cfg)?;
    cfg.validate()?;
    let scenes = match a.split {
        Split::All => scenes,
        Split::Train => split_train_val(&scenes).0,
        Split::Val => split_train_val(&scenes).1,
    };
    let eval_cfg = cfg.eval.eval_config(cfg.model.image_size)?;
    let images: Vec<ImageEval> = match (&a.dets, &a.checkpoint) {
        (Some(p), _) => {
            let mut dets = read_dets(p)?;
            scenes
                .iter()
                .map(|s| ImageEval {
                    dets: dets.remove(&s.id).unwrap_or_default(),
                    gts: s.annotations.clone(),
                })
                .collect()
        }
        (None, Some(c)) => {
            let model = Model::load(c)?;
            if model.cfg.classes != cfg.model.classes || model.cfg.image_size != cfg.model.image_size {
                return Err(Error::Config("checkpoint does not match the dataset classes or image size".into()).into());
            }
            eval_inputs(&model, &scenes, eval_cfg.max_dets)?
        }
        (None, None) => return Err(CliError::Usage("eval needs --dets or --checkpoint".into())),
    };
    let metrics = average_precision(&images, cfg.model.classes, &eval_cfg)?;
    let text = serde_json::to_string_pretty(&metrics).map_err(|e| Error::Parse(e.to_string()))?;
    println!("{text}");
    if let Some(dir) = &a.out_dir {
        create_dir(dir)?;
        write_json(&dir.join("metrics.json"), &metrics)?;
        cfg.save(&dir.join("config.toml"))?;
    }
    Ok(())
}

fn demo_cmd(a: DemoArgs) -> CliResult {
    let model = Model::load(&a.checkpoint)?;
    let mut cfg = RunConfig {
        model: model.cfg,
        ..Default::default()
    };
    let scenes = load_data(&a.data, &mut cfg)?;
    if cfg.model != model.cfg {
        return Err(Error::Config("checkpoint does not match the dataset classes or image size".into()).into());
    }
    let scene = scenes.get(a.index).ok_or_else(|| {
        Error::Config(format!("index {} out of range for {} scenes", a.index, scenes.len()))
    })?;
    let report = ddf_demo(&model, scene)?;
    create_dir(&a.out_dir)?;
    for (name, map) in &report.maps {
        write_pgm(&a.out_dir.join(format!("{name}.pgm")), map)?;
    }
    write_json(&a.out_dir.join("report.json"), &report)?;
    cfg.save(&a.out_dir.join("config.toml"))?;
    println!("scene {} ({} objects)", scene.id, scene.annotations.len());
    println!("literal-mode FFT delta vs identity: {:.3e}", report.literal_identity_delta);
    println!("literal-vs-gated memory delta norm: {:.6}", report.mode_delta_norm);
    match report.attention_ratio {
        Some(r) => println!("attention mass on objects / uniform: {r:.4}"),
        None => println!("attention mass on objects / uniform: n/a"),
    }
    println!("wrote {} maps to {}", report.maps.len(), a.out_dir.display());
    Ok(())
}

fn random_box(rng: &mut Rng) -> Box {
    let w = rng.uniform_range(0.01, 0.4);
    let h = rng.uniform_range(0.01, 0.4);
    let cx = rng.uniform_range(w / 2.0, 1.0 - w / 2.0);
    let cy = rng.uniform_range(h / 2.0, 1.0 - h / 2.0);
    Box { cx, cy, w, h }
}

fn bench_iou(a: BenchArgs) -> CliResult {
    if a.pairs == 0 {
        return Err(CliError::Usage("--pairs must be positive".into()));
    }
    let mut rng = Rng::new(a.seed);
    let pairs: Vec<(Box, Box)> = (0..a.pairs).map(|_| (random_box(&mut rng), random_box(&mut rng))).collect();
    let e = ModelConfig::default().expand();
    let s = ModelConfig::default().siou();
    let time = |name: &str, f: &dyn Fn(&Box, &Box) -> tinydetr::Result<f64>| -> CliResult<(String, f64, f64)> {
        let t = Instant::now();
        let mut sum = 0.0;
        for (x, y) in &pairs {
            sum += f(black_box(x), black_box(y))?;
        }
        Ok((name.to_string(), t.elapsed().as_secs_f64(), sum / pairs.len() as f64))
    };
    let rows = vec![
        time("iou", &|x, y| iou(x, y))?,
        time("expanded_iou", &|x, y| expanded_iou(x, y, e))?,
        time("siou", &|x, y| siou(x, y, s))?,
        time("expanded_siou", &|x, y| expanded_siou(x, y, e, s))?,
    ];
    let mut out = std::io::stdout().lock();
    let w = |out: &mut dyn Write, line: String| writeln!(out, "{line}").map_err(|e| Error::io(PathBuf::from("<stdout>"), e));
    w(&mut out, format!("{} random pairs, seed {}", a.pairs, a.seed))?;
    w(&mut out, format!("{:<14} {:>10} {:>10} {:>12}", "measure", "total ms", "ns/pair", "mean value"))?;
    for (name, secs, mean) in rows {
        w(
            &mut out,
            format!("{name:<14} {:>10.1} {:>10.1} {mean:>12.6}", secs * 1e3, secs * 1e9 / a.pairs as f64),
        )?;
    }
    Ok(())
}
