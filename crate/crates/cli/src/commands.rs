use std::fmt;
use std::fs;
use std::ops::ControlFlow;
use std::path::Path;

use sharp_unet::data::{
    generate_synthetic, load_dataset, load_tensor, read_pgm, write_dataset, write_pgm, Dataset,
    SyntheticConfig,
};
use sharp_unet::eval::{evaluate, grad_cam, labels_from_probs, MetricsRecord};
use sharp_unet::model::{load_checkpoint, save_checkpoint, sharpen_image, SharpenMode};
use sharp_unet::train::{
    check_compatible, format_sig6, head_classes, holdout_split, kfold_split, round_sig6,
    train_with, HistoryRow, TrainConfig, TrainOutcome,
};
use sharp_unet::{build_model, Connection, Error, Model, ModelConfig, Tensor};

use crate::{
    CompareArgs, CvArgs, EvalArgs, FitArgs, GenDataArgs, GradcamArgs, ModeArg, ParamCountArgs,
    PredictArgs, SharpenArgs, TrainArgs,
};

/// A failed command: usage errors exit with 2, everything else with 1.
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    fn context(self, what: impl fmt::Display) -> Self {
        match self {
            Failure::Usage(m) => Failure::Usage(format!("{what}: {m}")),
            Failure::Runtime(m) => Failure::Runtime(format!("{what}: {m}")),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::ConfigMismatch(_) | Error::Contract(_) | Error::Shape(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn gen_data(a: GenDataArgs) -> CmdResult {
    let cfg = SyntheticConfig {
        n_samples: a.n,
        height: a.size,
        width: a.size,
        in_channels: a.in_ch,
        num_classes: a.classes,
        boundary_blur_sigma: a.blur,
        occlusion: a.hair,
        noise_std: a.noise,
        roi_area_range: (a.area_min, a.area_max),
        seed: a.seed,
    };
    cfg.validate()?;
    let (samples, manifest) = generate_synthetic(&cfg)?;
    write_dataset(&a.out, &samples, &manifest)?;
    let ds = Dataset { manifest, samples };
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    for (c, n) in ds.class_histogram().iter().enumerate() {
        println!("class {c}: {n} pixels");
    }
    Ok(())
}

fn train_config(fit: &FitArgs) -> Result<TrainConfig, Failure> {
    let cfg = TrainConfig {
        learning_rate: fit.lr,
        batch_size: fit.batch_size,
        max_epochs: fit.epochs,
        patience: fit.patience.min(fit.epochs),
        seed: fit.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn model_config(
    fit: &FitArgs,
    ds: &Dataset,
    connection: Connection,
) -> Result<ModelConfig, Failure> {
    let cfg = ModelConfig {
        in_channels: ds.manifest.in_channels,
        num_classes: head_classes(ds.num_classes()),
        widths: fit.widths,
        connection,
        seed: fit.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn fit_split(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    ds: &Dataset,
    (train_idx, val_idx): (&[usize], &[usize]),
    fold: usize,
    verbose: bool,
) -> Result<TrainOutcome, Failure> {
    let model = build_model(model_cfg)?;
    let outcome = train_with(
        model,
        &ds.subset(train_idx),
        &ds.subset(val_idx),
        train_cfg,
        fold,
        |r| {
            if verbose {
                println!(
                    "epoch {} train_loss {} val_loss {} val_jaccard {} val_dice {}",
                    r.epoch,
                    format_sig6(r.train_loss),
                    format_sig6(r.val_loss),
                    format_sig6(r.val_jaccard),
                    format_sig6(r.val_dice)
                );
            }
            ControlFlow::Continue(())
        },
    )?;
    Ok(outcome)
}

fn best_of(outcome: &TrainOutcome) -> &HistoryRow {
    outcome.history.best_row().expect("at least one epoch ran")
}

pub fn train(a: TrainArgs) -> CmdResult {
    let train_cfg = train_config(&a.fit)?;
    let ds = load_dataset(&a.fit.data)?;
    let model_cfg = model_config(&a.fit, &ds, a.connection.into())?;
    let (tr, va) = holdout_split(ds.len(), a.val_fraction, a.fit.seed)?;
    let outcome = fit_split(&model_cfg, &train_cfg, &ds, (&tr, &va), 0, true)?;

    create_dir(&a.out)?;
    save_checkpoint(&outcome.model, outcome.meta, a.out.join("checkpoint"))?;
    outcome.history.write_csv(a.out.join("history.csv"))?;
    let split = serde_json::json!({ "seed": a.fit.seed, "train": tr, "val": va });
    write_text(&a.out.join("split.json"), &format!("{split:#}\n"))?;
    let best = best_of(&outcome);
    println!(
        "best epoch {} val_loss {} val_jaccard {} val_dice {}",
        best.epoch,
        format_sig6(best.val_loss),
        format_sig6(best.val_jaccard),
        format_sig6(best.val_dice)
    );
    Ok(())
}

fn load_model(dir: &Path) -> Result<Model, Failure> {
    if !dir.join("model.json").is_file() {
        return Err(Failure::Runtime(format!(
            "no checkpoint at {}",
            dir.display()
        )));
    }
    Ok(load_checkpoint(dir)?.0)
}

type Prediction = (Tensor<f32>, Tensor<f32>);

/// Probabilities and hard labels for every sample, in dataset order.
fn predictions(model: &Model, ds: &Dataset) -> Result<Vec<Prediction>, Failure> {
    ds.samples
        .iter()
        .map(|s| {
            let probs = model.predict_probs(&s.image)?;
            let labels = labels_from_probs(&probs);
            Ok((probs, labels))
        })
        .collect()
}

pub fn eval(a: EvalArgs) -> CmdResult {
    let model = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_compatible(model.config(), &ds.manifest)?;
    let scores = evaluate(&model, &ds, a.batch_size)?;

    let preds = predictions(&model, &ds)?;
    let truth: Vec<&Tensor<f32>> = ds.samples.iter().map(|s| &s.mask).collect();
    let pred: Vec<&Tensor<f32>> = preds.iter().map(|(_, l)| l).collect();
    let record = MetricsRecord::from_labels(
        &Tensor::stack(&truth)?,
        &Tensor::stack(&pred)?,
        ds.num_classes(),
    )?;

    println!("samples {}", ds.len());
    println!("loss {}", format_sig6(scores.loss));
    println!("jaccard {}", format_sig6(scores.jaccard));
    println!("dice {}", format_sig6(scores.dice));
    for (c, counts) in record.counts.iter().enumerate() {
        println!(
            "class {c}: jaccard {} dice {} |G| {} |P| {} |G&P| {} |G|P| {}",
            format_sig6(record.jaccard[c]),
            format_sig6(record.dice[c]),
            counts.truth,
            counts.pred,
            counts.intersection,
            counts.union
        );
    }
    println!(
        "pooled mean: jaccard {} dice {}",
        format_sig6(record.mean_jaccard),
        format_sig6(record.mean_dice)
    );
    Ok(())
}

pub fn predict(a: PredictArgs) -> CmdResult {
    let model = load_model(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    check_compatible(model.config(), &ds.manifest)?;
    create_dir(&a.out)?;
    let top = (ds.num_classes() - 1) as f32;
    for (i, (probs, labels)) in predictions(&model, &ds)?.into_iter().enumerate() {
        write_pgm(
            a.out.join(format!("mask_{i:04}.pgm")),
            &labels.map(|l| l / top),
        )?;
        if a.probs {
            let s = probs.shape();
            if s.c == 1 {
                write_pgm(a.out.join(format!("prob_{i:04}.pgm")), &probs)?;
            } else {
                for c in 0..s.c {
                    let plane = Tensor::from_vec([1, 1, s.h, s.w], probs.plane(0, c).to_vec())?;
                    write_pgm(a.out.join(format!("prob_{i:04}_c{c}.pgm")), &plane)?;
                }
            }
        }
    }
    println!("wrote {} masks to {}", ds.len(), a.out.display());
    Ok(())
}

/// Population mean and standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn cv(a: CvArgs) -> CmdResult {
    if a.folds < 2 {
        return Err(Failure::Usage(format!(
            "--folds must be at least 2, got {}",
            a.folds
        )));
    }
    let train_cfg = train_config(&a.fit)?;
    let ds = load_dataset(&a.fit.data)?;
    let model_cfg = model_config(&a.fit, &ds, a.connection.into())?;
    let split = kfold_split(ds.len(), a.folds, a.fit.seed)?;
    create_dir(&a.out)?;

    let run = |i: usize| -> Result<TrainOutcome, Failure> {
        let (tr, va) = split.train_val(i);
        fit_split(&model_cfg, &train_cfg, &ds, (&tr, &va), i, false)
            .map_err(|e| e.context(format!("fold {i}")))
    };
    let outcomes: Vec<Result<TrainOutcome, Failure>> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..a.folds).map(|i| s.spawn(move || run(i))).collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect()
        })
    } else {
        (0..a.folds).map(run).collect()
    };

    let (mut jac, mut dice) = (Vec::new(), Vec::new());
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let outcome = outcome?;
        outcome
            .history
            .write_csv(a.out.join(format!("history_fold{i}.csv")))?;
        let best = best_of(&outcome);
        println!(
            "fold {i}: best epoch {} val_jaccard {} val_dice {}",
            best.epoch,
            format_sig6(best.val_jaccard),
            format_sig6(best.val_dice)
        );
        // summary statistics are taken over the values as written to the CSVs
        jac.push(round_sig6(best.val_jaccard));
        dice.push(round_sig6(best.val_dice));
    }

    let folds = serde_json::json!({
        "k": a.folds,
        "seed": a.fit.seed,
        "folds": split.folds.iter().map(|f| {
            let mut f = f.clone();
            f.sort_unstable();
            f
        }).collect::<Vec<_>>(),
    });
    write_text(&a.out.join("folds.json"), &format!("{folds:#}\n"))?;

    let mut summary = String::from("metric,mean,std\n");
    for (name, xs) in [("jaccard", &jac), ("dice", &dice)] {
        let (m, s) = mean_std(xs);
        summary.push_str(&format!("{name},{},{}\n", format_sig6(m), format_sig6(s)));
        println!("{name}: {} +- {}", format_sig6(m), format_sig6(s));
    }
    write_text(&a.out.join("summary.csv"), &summary)
}

pub fn compare(a: CompareArgs) -> CmdResult {
    if a.folds < 2 {
        return Err(Failure::Usage(format!(
            "--folds must be at least 2, got {}",
            a.folds
        )));
    }
    if a.seeds.is_empty() {
        return Err(Failure::Usage("--seeds must list at least one seed".into()));
    }
    let ds = load_dataset(&a.fit.data)?;
    create_dir(&a.out)?;
    let mut rows = String::from("connection,seed,best_epoch,val_jaccard,val_dice\n");
    let kinds = [Connection::Plain, Connection::Sharp];
    let mut scores: Vec<(Vec<f64>, Vec<f64>)> = vec![Default::default(); kinds.len()];
    for &seed in &a.seeds {
        let fit = FitArgs {
            seed,
            ..a.fit.clone()
        };
        let train_cfg = train_config(&fit)?;
        let split = kfold_split(ds.len(), a.folds, seed)?;
        let (tr, va) = split.train_val(0);
        for (k, &conn) in kinds.iter().enumerate() {
            let model_cfg = model_config(&fit, &ds, conn)?;
            let outcome = fit_split(&model_cfg, &train_cfg, &ds, (&tr, &va), 0, false)
                .map_err(|e| e.context(format!("{conn} seed {seed}")))?;
            outcome
                .history
                .write_csv(a.out.join(format!("history_{conn}_seed{seed}.csv")))?;
            let best = best_of(&outcome);
            let (j, d) = (round_sig6(best.val_jaccard), round_sig6(best.val_dice));
            println!(
                "{conn} seed {seed}: best epoch {} val_jaccard {} val_dice {}",
                best.epoch,
                format_sig6(j),
                format_sig6(d)
            );
            rows.push_str(&format!(
                "{conn},{seed},{},{},{}\n",
                best.epoch,
                format_sig6(j),
                format_sig6(d)
            ));
            scores[k].0.push(j);
            scores[k].1.push(d);
        }
    }
    for (conn, (j, d)) in kinds.iter().zip(&scores) {
        let (mj, md) = (mean_std(j).0, mean_std(d).0);
        rows.push_str(&format!(
            "{conn},mean,,{},{}\n",
            format_sig6(mj),
            format_sig6(md)
        ));
        println!(
            "{conn} mean val_jaccard {} val_dice {}",
            format_sig6(mj),
            format_sig6(md)
        );
    }
    write_text(&a.out.join("summary.csv"), &rows)
}

pub fn sharpen(a: SharpenArgs) -> CmdResult {
    let image = read_pgm(&a.input)?;
    let mode = match a.mode {
        ModeArg::Laplacian => SharpenMode::Laplacian,
        ModeArg::Additive => SharpenMode::Additive,
    };
    write_pgm(&a.out, &sharpen_image(&image, mode))?;
    Ok(())
}

pub fn param_count(a: ParamCountArgs) -> CmdResult {
    let cfg = ModelConfig {
        in_channels: a.in_ch,
        num_classes: a.classes,
        widths: a.widths,
        connection: a.connection.into(),
        seed: 0,
    };
    cfg.validate()?;
    println!("{}", cfg.param_count());
    Ok(())
}

pub fn gradcam(a: GradcamArgs) -> CmdResult {
    if !(1..=4).contains(&a.layer) {
        return Err(Failure::Usage(format!(
            "--layer must be 1..4, got {}",
            a.layer
        )));
    }
    let model = load_model(&a.checkpoint)?;
    let image = if a.image.extension().is_some_and(|e| e == "pgm") {
        read_pgm(&a.image)?
    } else {
        load_tensor(&a.image)?
    };
    let heat = grad_cam(&model, &image, a.layer, a.class)?;
    write_pgm(&a.out, &heat)?;
    Ok(())
}
