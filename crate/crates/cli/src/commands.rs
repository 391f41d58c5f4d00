use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use damage_core::cutmix::{augment_batch_detailed, donor_indices};
use damage_core::data::{
    generate_synthetic, load_xbd_layout, read_mask_png, read_rgb_png, write_mask_png, DamageMask,
    SamplePair, CLASS_NAMES,
};
use damage_core::metrics::{
    f1_binary, format_confusion_table, Aggregation, ConfusionMatrix, MetricsReport, DAMAGE_COLUMNS,
};
use damage_core::pipeline::{
    build_model, load_model, predict as predict_mask, save_model, train as run_training,
    transfer_stage1_weights, EpochLog, ModelSidecar, Stage,
};
use damage_core::render::{
    decode_mask, load_panel, load_png, render_grid, save_png, Layout, Panel,
};
use serde::Deserialize;

use crate::config::RunConfig;
use crate::{
    CliError, DecodeArgs, PredictArgs, PreviewArgs, RenderArgs, ScoreArgs, SummaryArgs, SynthArgs,
    TrainArgs,
};

const TARGET_SUFFIX: &str = "_post_disaster_target.png";

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn runtime_err(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// `<path><suffix>`, keeping the full file name.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn layout_path(render: &Path) -> PathBuf {
    with_suffix(render, ".layout.json")
}

fn write_layout(render: &Path, layout: &Layout) -> Result<(), CliError> {
    std::fs::write(
        layout_path(render),
        serde_json::to_string_pretty(layout)? + "\n",
    )?;
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

pub fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<(), CliError> {
    let s = &mut cfg.synth;
    if let Some(n) = a.pairs {
        s.num_pairs = n;
    }
    if let Some(n) = a.size {
        s.image_size = n;
    }
    if let Some(n) = a.seed {
        s.seed = n;
    }
    s.validate()?;
    let manifest = generate_synthetic(s, &a.out)?;
    let mut totals = [0u64; 5];
    for e in &manifest.pairs {
        for (t, c) in totals.iter_mut().zip(e.class_counts) {
            *t += c;
        }
    }
    println!(
        "wrote {} pairs to {}",
        manifest.pairs.len(),
        a.out.display()
    );
    let damaged: u64 = totals[1..].iter().sum();
    println!("  building pixels by class (share of all building pixels):");
    for (k, name) in CLASS_NAMES[1..].iter().enumerate() {
        let share = if damaged == 0 {
            0.0
        } else {
            totals[k + 1] as f64 / damaged as f64
        };
        println!(
            "  {name:<13} {:>9} px  {:>5.1}%",
            totals[k + 1],
            100.0 * share
        );
    }
    Ok(())
}

fn load_dataset(root: &Path) -> Result<Vec<SamplePair>, CliError> {
    let index = load_xbd_layout(root)?;
    for s in &index.skipped {
        eprintln!("skipped {}: {}", s.id, s.reason);
    }
    Ok(index.load_all()?)
}

fn epoch_header(stage: Stage) -> String {
    match stage {
        Stage::One => format!("{:>5} {:>9} {:>7}", "epoch", "loss", "F1_b"),
        Stage::Two => format!(
            "{:>5} {:>9} {:>7} {:>7} {:>7} {:>10} {:>7} {:>7} {:>10}",
            "epoch",
            "loss",
            "F1_s",
            "F1_b",
            "F1_d",
            DAMAGE_COLUMNS[0],
            DAMAGE_COLUMNS[1],
            DAMAGE_COLUMNS[2],
            DAMAGE_COLUMNS[3]
        ),
    }
}

/// Stage-1 holdout scores are building-vs-background only, so only F1_b is shown.
fn epoch_row(stage: Stage, l: &EpochLog) -> String {
    let mut s = format!("{:>5} {:>9.5}", l.epoch, l.loss);
    match (&l.metrics, stage) {
        (None, _) => {}
        (Some(m), Stage::One) => {
            let _ = write!(s, " {:>7.3}", m.f1_building);
        }
        (Some(m), Stage::Two) => {
            let p = m.f1_per_class;
            let _ = write!(
                s,
                " {:>7.3} {:>7.3} {:>7.3} {:>10.3} {:>7.3} {:>7.3} {:>10.3}",
                m.f1_overall, m.f1_building, m.f1_damage, p[0], p[1], p[2], p[3]
            );
        }
    }
    s
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<(), CliError> {
    let stage = Stage::try_from(a.stage).map_err(config_err)?;
    let t = &mut cfg.train;
    if let Some(p) = a.preset {
        t.preset = p;
    }
    t.learning_rate = a.lr.or(t.learning_rate);
    t.epochs = a.epochs.or(t.epochs);
    t.batch_size = a.batch_size.or(t.batch_size);
    t.crop_size = a.crop.or(t.crop_size);
    if let Some(s) = a.seed {
        t.seed = s;
    }
    if let Some(h) = a.holdout {
        t.holdout_fraction = h;
    }
    if a.no_cutmix {
        t.cutmix = false;
    }
    if !(0.0..1.0).contains(&t.holdout_fraction) {
        return Err(config_err(format!(
            "holdout {} outside [0, 1)",
            t.holdout_fraction
        )));
    }
    if a.dry_run {
        println!(
            "{}",
            serde_json::to_string_pretty(&cfg.train_config(stage))?
        );
        return Ok(());
    }

    let (mut model, transfer) = match (stage, &a.from_stage1) {
        (Stage::One, Some(_)) => return Err(config_err("--from-stage1 applies to stage 2 only")),
        (Stage::Two, None) => {
            return Err(config_err(
                "stage 2 starts from stage-1 weights; pass --from-stage1 <checkpoint>",
            ))
        }
        (Stage::One, None) => {
            cfg.model.validate()?;
            (build_model(&cfg.model, Stage::One, cfg.train.seed)?, None)
        }
        (Stage::Two, Some(path)) => {
            let (one, side) = load_model(path)?;
            if one.stage != Stage::One {
                return Err(config_err(format!(
                    "{} is a stage-{} checkpoint",
                    path.display(),
                    one.stage
                )));
            }
            if side.config != cfg.model {
                log::info!("using the architecture stored with {}", path.display());
            }
            let mut two = build_model(&side.config, Stage::Two, cfg.train.seed)?;
            let manifest = transfer_stage1_weights(&one.params, &mut two)?;
            (two, Some(manifest))
        }
    };
    let tc = cfg.train_config(stage);
    tc.validate(&model.config)?;

    let data_root = a.data.unwrap_or_else(|| cfg.paths.data.clone());
    let pairs = load_dataset(&data_root)?;
    let n_hold =
        ((pairs.len() as f64 * cfg.train.holdout_fraction).round() as usize).min(pairs.len() - 1);
    let (train_set, holdout) = pairs.split_at(pairs.len() - n_hold);
    println!(
        "stage {stage}: {} training pairs, {} held out, {} parameters",
        train_set.len(),
        holdout.len(),
        model.num_params()
    );

    let out = a
        .out
        .unwrap_or_else(|| cfg.paths.runs.join(format!("stage{stage}.ckpt")));
    ensure_parent(&out)?;
    let mut log = File::create(with_suffix(&out, ".log.jsonl"))?;
    let mut log_err = None;
    println!("{}", epoch_header(stage));
    let report = run_training(&mut model, train_set, holdout, &tc, |l| {
        println!("{}", epoch_row(stage, l));
        if let Err(e) = writeln!(log, "{}", l.to_json_line()) {
            log_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }

    let sidecar = ModelSidecar {
        epochs_trained: tc.epochs,
        train: Some(tc),
        transfer,
        history: report.history,
        ..ModelSidecar::for_model(&model)
    };
    save_model(&out, &model, &sidecar)?;
    println!("saved {}", out.display());
    Ok(())
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    let (model, side) = load_model(&a.model)?;
    let crop = a
        .crop
        .or(side.train.as_ref().map(|t| t.crop_size))
        .unwrap_or(64);
    let overlap = a.overlap.unwrap_or(crop / 4);
    let run = |pre: &damage_core::tensor::Tensor, post: Option<&damage_core::tensor::Tensor>| {
        predict_mask(
            &model,
            pre,
            if model.stage == Stage::Two {
                post
            } else {
                None
            },
            crop,
            overlap,
        )
    };
    if let Some(pre_path) = &a.pre {
        let pre = read_rgb_png(pre_path)?;
        let post = match (&a.post, model.stage) {
            (Some(p), _) => Some(read_rgb_png(p)?),
            (None, Stage::Two) => return Err(config_err("a stage-2 model needs --post")),
            (None, Stage::One) => None,
        };
        ensure_parent(&a.out)?;
        write_mask_png(&a.out, &run(&pre, post.as_ref())?)?;
        println!("wrote {}", a.out.display());
        return Ok(());
    }
    let Some(root) = &a.data else {
        return Err(config_err(
            "pass --pre/--post for one pair or --data for a dataset",
        ));
    };
    let index = load_xbd_layout(root)?;
    std::fs::create_dir_all(&a.out)?;
    for pair in &index.pairs {
        let pre = read_rgb_png(&pair.pre_path)?;
        let post = read_rgb_png(&pair.post_path)?;
        let mask = run(&pre, Some(&post))?;
        write_mask_png(&a.out.join(format!("{}{TARGET_SUFFIX}", pair.id)), &mask)?;
    }
    println!("wrote {} masks to {}", index.pairs.len(), a.out.display());
    Ok(())
}

/// Mask PNGs under `dir` (or `dir/targets` when present), keyed by pair id.
pub fn mask_files(dir: &Path) -> Result<BTreeMap<String, PathBuf>, CliError> {
    let dir = if dir.join("targets").is_dir() {
        dir.join("targets")
    } else {
        dir.to_path_buf()
    };
    let mut out = BTreeMap::new();
    for entry in
        std::fs::read_dir(&dir).map_err(|e| runtime_err(format!("{}: {e}", dir.display())))?
    {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let id = name
            .strip_suffix(TARGET_SUFFIX)
            .or_else(|| name.strip_suffix(".png"));
        if let Some(id) = id {
            out.insert(id.to_string(), path.clone());
        }
    }
    if out.is_empty() {
        return Err(runtime_err(format!("no mask PNGs in {}", dir.display())));
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureRow {
    #[serde(default)]
    name: String,
    f1_building: f64,
    f1_per_class: [f64; 4],
}

fn score_fixture(path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)?;
    let rows: Vec<FixtureRow> =
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let mut json = Vec::new();
    for row in rows {
        let r = MetricsReport::from_per_class(row.f1_building, row.f1_per_class);
        println!("{}", row.name);
        print!("{}", r.to_table());
        json.push(serde_json::json!({
            "name": row.name,
            "f1_building": r.f1_building,
            "f1_per_class": r.f1_per_class,
            "f1_damage": r.f1_damage,
            "f1_overall": r.f1_overall,
        }));
    }
    println!("{}", serde_json::to_string_pretty(&json)?);
    Ok(())
}

pub fn score(a: ScoreArgs) -> Result<(), CliError> {
    if let Some(f) = &a.fixture {
        return score_fixture(f);
    }
    let (truth_dir, pred_dir) = (
        a.truth.as_ref().expect("clap"),
        a.pred.as_ref().expect("clap"),
    );
    let truth = mask_files(truth_dir)?;
    let pred = mask_files(pred_dir)?;
    let building = a.building_pred.as_deref().map(mask_files).transpose()?;
    for id in pred.keys().filter(|id| !truth.contains_key(*id)) {
        log::warn!("prediction {id} has no ground truth; ignored");
    }
    let find = |map: &BTreeMap<String, PathBuf>, id: &str, what: &str| {
        map.get(id)
            .cloned()
            .ok_or_else(|| runtime_err(format!("no {what} mask for {id}")))
    };

    let mut tiles = Vec::with_capacity(truth.len());
    for (id, tpath) in &truth {
        let t = read_mask_png(tpath)?;
        let p = read_mask_png(&find(&pred, id, "predicted")?)?;
        let b = match &building {
            Some(m) => Some(read_mask_png(&find(m, id, "building")?)?),
            None => None,
        };
        tiles.push((t, p, b));
    }
    let tile_report = |t: &DamageMask,
                       p: &DamageMask,
                       b: Option<&DamageMask>|
     -> Result<MetricsReport, CliError> {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(t, p)?;
        Ok(match b {
            Some(b) => {
                let mut bcm = ConfusionMatrix::new();
                bcm.accumulate(&t.to_building(), &b.to_building())?;
                let (tp, fp, fn_) = bcm.building_counts();
                MetricsReport::with_building(cm, f1_binary(tp, fp, fn_))
            }
            None => MetricsReport::from_confusion(cm),
        })
    };
    let aggregation = if a.per_image {
        Aggregation::PerImage
    } else {
        Aggregation::Pooled
    };
    let report = match aggregation {
        Aggregation::PerImage => {
            let reports = tiles
                .iter()
                .map(|(t, p, b)| tile_report(t, p, b.as_ref()))
                .collect::<Result<Vec<_>, _>>()?;
            MetricsReport::mean_of(&reports)
        }
        Aggregation::Pooled => {
            let mut cm = ConfusionMatrix::new();
            let mut bcm = ConfusionMatrix::new();
            for (t, p, b) in &tiles {
                cm.accumulate(t, p)?;
                if let Some(b) = b {
                    bcm.accumulate(&t.to_building(), &b.to_building())?;
                }
            }
            if building.is_some() {
                let (tp, fp, fn_) = bcm.building_counts();
                MetricsReport::with_building(cm, f1_binary(tp, fp, fn_))
            } else {
                MetricsReport::from_confusion(cm)
            }
        }
    };
    println!("{} tiles, {:?} aggregation", tiles.len(), aggregation);
    print!("{}", report.to_table());
    println!();
    print!("{}", format_confusion_table(&report.confusion));
    if let Some(path) = &a.json {
        ensure_parent(path)?;
        std::fs::write(
            path,
            serde_json::to_string_pretty(&report.to_json())? + "\n",
        )?;
    }
    Ok(())
}

pub fn render(a: RenderArgs) -> Result<(), CliError> {
    let sources = a
        .inputs
        .iter()
        .map(|p| load_panel(p))
        .collect::<Result<Vec<_>, _>>()?;
    let row: Vec<Panel> = sources.iter().map(|s| s.as_panel()).collect();
    let (img, layout) = render_grid(&[row])?;
    ensure_parent(&a.out)?;
    save_png(&img, &a.out)?;
    write_layout(&a.out, &layout)?;
    println!("wrote {} ({} panels)", a.out.display(), layout.cols);
    Ok(())
}

pub fn decode(a: DecodeArgs) -> Result<(), CliError> {
    let lpath = a.layout.unwrap_or_else(|| layout_path(&a.render));
    let layout: Layout = serde_json::from_str(&std::fs::read_to_string(&lpath)?)
        .map_err(|e| config_err(format!("{}: {e}", lpath.display())))?;
    let img = load_png(&a.render)?;
    if (img.width() as usize, img.height() as usize) != (layout.width(), layout.height()) {
        return Err(runtime_err(format!(
            "{} is {}x{}, layout expects {}x{}",
            a.render.display(),
            img.width(),
            img.height(),
            layout.width(),
            layout.height()
        )));
    }
    let mask = decode_mask(&img, &layout, a.row, a.panel)?;
    ensure_parent(&a.out)?;
    write_mask_png(&a.out, &mask)?;
    Ok(())
}

pub fn augment_preview(cfg: RunConfig, a: PreviewArgs) -> Result<(), CliError> {
    let mut policy = cfg.cutmix.clone();
    policy.probability = a.probability.unwrap_or(1.0);
    if let Some(s) = a.seed {
        policy.seed = s;
    }
    policy.validate()?;
    if a.n == 0 {
        return Err(config_err("--n must be positive"));
    }
    let samples = load_dataset(&a.data.unwrap_or(cfg.paths.data))?;
    let donors: Vec<SamplePair> = donor_indices(&samples, &policy)
        .into_iter()
        .map(|i| samples[i].clone())
        .collect();
    let batch = &samples[..a.n.min(samples.len())];
    let mixed = augment_batch_detailed(batch, &donors, &policy, policy.seed)?;

    let rows: Vec<Vec<Panel>> = batch
        .iter()
        .zip(&mixed)
        .map(|(o, m)| {
            vec![
                Panel::Image(&o.pre),
                Panel::Image(&o.post),
                Panel::Mask(&o.mask),
                Panel::Image(&m.sample.pre),
                Panel::Image(&m.sample.post),
                Panel::Mask(&m.sample.mask),
            ]
        })
        .collect();
    let (img, layout) = render_grid(&rows)?;
    ensure_parent(&a.out)?;
    save_png(&img, &a.out)?;
    write_layout(&a.out, &layout)?;
    for (o, m) in batch.iter().zip(&mixed) {
        match &m.mix {
            Some((d, mask)) => {
                let (top, left, h, w) = mask.zero_bounds().expect("mixed box is non-empty");
                println!(
                    "{}: donor {} box top {top} left {left} size {h}x{w}",
                    o.id, donors[*d].id
                );
            }
            None => println!("{}: unchanged", o.id),
        }
    }
    println!(
        "wrote {} ({} rows, {} donors available)",
        a.out.display(),
        rows.len(),
        donors.len()
    );
    Ok(())
}

pub fn summary(cfg: RunConfig, a: SummaryArgs) -> Result<(), CliError> {
    cfg.model.validate()?;
    let size = a.size.unwrap_or(cfg.synth.image_size);
    cfg.model.check_size(size, size)?;
    let one = build_model(&cfg.model, Stage::One, 0)?.summary(size, size);
    let two = build_model(&cfg.model, Stage::Two, 0)?.summary(size, size);
    println!(
        "{:>5} {:>10} {:>10} {:>8} {:>8} {:>14}",
        "stage", "params", "backbone", "head", "fusion", "MACs"
    );
    for s in [&one, &two] {
        println!(
            "{:>5} {:>10} {:>10} {:>8} {:>8} {:>14}",
            s.stage.to_string(),
            s.total_params,
            s.backbone_params,
            s.head_params,
            s.fusion_params,
            s.macs
        );
    }
    println!("input {size}x{size}; both stage-2 branches share the backbone weights");
    Ok(())
}
