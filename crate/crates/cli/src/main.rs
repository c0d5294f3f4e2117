//! `fcn`: generate synthetic data, train and evaluate skip nets, and inspect
//! field arithmetic from the command line.

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fcn_core::data::{self, MaskMode, ShapesConfig, CLASS_NAMES};
use fcn_core::field::chain;
use fcn_core::losses::{predict, LossConfig, LossKind};
use fcn_core::metrics::{compute_metrics, iu_upper_bound, ConfusionMatrix};
use fcn_core::skipnet::{build_from_description, BuildOptions, NetDescription};
use fcn_core::training::{self, confusion, effective_coefficients, equivalent_momentum, Regime, TrainSchedule};
use fcn_core::{Dims, Tensor};

use run::RunDir;

#[derive(Parser)]
#[command(name = "fcn", version, about = "Fully convolutional segmentation experiments on synthetic shapes")]
#[command(args_override_self = true)]
struct Cli {
    /// Base seed; every random stream is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `key = value` file of flags for the subcommand; repeated flags on the
    /// command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a train/val/test shapes dataset.
    Generate(GenerateArgs),
    /// Train a net and write a run directory.
    Train(TrainArgs),
    /// Metrics of a trained run on a dataset split.
    Eval(EvalArgs),
    /// Label map and per-class score maps for one image.
    Infer(InferArgs),
    /// Mean IU upper bound of predicting at a coarser resolution.
    Bound(BoundArgs),
    /// Receptive field, stride and offset of every layer of a net description.
    Probe { net: PathBuf },
    /// Momentum at batch size K′ equivalent to momentum P at batch size K.
    Equiv {
        p: f64,
        k: usize,
        k_prime: usize,
        /// Lags shown in the coefficient comparison.
        #[arg(long, default_value_t = 40)]
        horizon: usize,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 800)]
    train: usize,
    #[arg(long, default_value_t = 100)]
    val: usize,
    #[arg(long, default_value_t = 100)]
    test: usize,
    /// Place shapes so that they never touch.
    #[arg(long)]
    no_overlap: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Net description file.
    #[arg(long)]
    net: PathBuf,
    /// Dataset directory with `train/` and `val/` (and optionally `test/`).
    #[arg(long)]
    data: PathBuf,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// heavy (k=1, p=0.99), online (k=1, p=0.9) or accum (k=20, p=0.9).
    #[arg(long, default_value = "heavy")]
    regime: Regime,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, default_value_t = 4000)]
    updates: usize,
    #[arg(long, default_value_t = 200)]
    eval_every: usize,
    #[arg(long, default_value_t = training::DEFAULT_WEIGHT_DECAY)]
    weight_decay: f64,
    /// softmax or sigmoid.
    #[arg(long, default_value = "softmax")]
    loss: String,
    /// Score background as a constant zero (sigmoid loss only).
    #[arg(long)]
    null_background: bool,
    /// Keep probability of loss sampling.
    #[arg(long, default_value_t = 1.0)]
    keep_p: f64,
    /// Ground-truth masking of training and validation inputs.
    #[arg(long, default_value = "none")]
    mask: MaskMode,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long)]
    mirror: bool,
    /// Maximum random translation in pixels.
    #[arg(long, default_value_t = 0)]
    jitter: usize,
    #[arg(long)]
    dropout: Option<f64>,
    /// Keep the parameters of the best validation evaluation.
    #[arg(long)]
    restore_best: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Dataset split directory (holding `manifest.txt`).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "none")]
    mask: MaskMode,
    /// Leave background out of the class-averaged metrics.
    #[arg(long)]
    exclude_background: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BoundArgs {
    /// Dataset split directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
    factors: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    classes: usize,
}

fn main() -> ExitCode {
    let args = match config::expand_args(std::env::args().collect()) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_status(&e))
        }
    }
}

/// 2 for bad input (missing files, parse and configuration errors), 1 for
/// failures during a run.
fn exit_status(e: &anyhow::Error) -> u8 {
    use fcn_core::Error as E;
    let input_error = e.chain().any(|c| {
        c.downcast_ref::<std::io::Error>().is_some()
            || matches!(
                c.downcast_ref::<E>(),
                Some(
                    E::Io { .. }
                        | E::Parse { .. }
                        | E::InvalidSpec(_)
                        | E::InvalidInput(_)
                        | E::InvalidParameter(_)
                        | E::InvalidLabel { .. }
                        | E::Generation(_)
                )
            )
            || c.downcast_ref::<UsageError>().is_some()
    });
    if input_error {
        2
    } else {
        1
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Generate(a) => generate(a, require_seed(cli)?),
        Cmd::Train(a) => train(a, require_seed(cli)?),
        Cmd::Eval(a) => eval(a),
        Cmd::Infer(a) => infer(a),
        Cmd::Bound(a) => bound(a),
        Cmd::Probe { net } => probe(net),
        Cmd::Equiv { p, k, k_prime, horizon } => equiv(*p, *k, *k_prime, *horizon),
    }
}

fn require_seed(cli: &Cli) -> Result<u64> {
    cli.seed.ok_or_else(|| usage("--seed is required for this command"))
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

const BUILTIN_NETS: [(&str, &str); 5] = [
    ("vgg16.net", include_str!("../nets/vgg16.net")),
    ("alexnet.net", include_str!("../nets/alexnet.net")),
    ("fcn32s.net", include_str!("../nets/fcn32s.net")),
    ("fcn16s.net", include_str!("../nets/fcn16s.net")),
    ("fcn8s.net", include_str!("../nets/fcn8s.net")),
];

/// Reads a net description; the shipped descriptions are also found by bare
/// file name when no such file exists.
fn load_net(path: &Path) -> Result<NetDescription> {
    if !path.exists() && path.parent().is_none_or(|p| p.as_os_str().is_empty()) {
        if let Some((_, text)) = BUILTIN_NETS.iter().find(|(n, _)| Path::new(n) == path) {
            return Ok(NetDescription::parse(text)?);
        }
    }
    Ok(NetDescription::load(path)?)
}

fn generate(a: &GenerateArgs, seed: u64) -> Result<()> {
    let cfg = ShapesConfig {
        size: a.size,
        n_classes: a.classes,
        overlap: !a.no_overlap,
        seed,
        ..Default::default()
    };
    let splits = data::generate_splits(&cfg, (a.train, a.val, a.test))?;
    for (name, ds) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
        data::save_dataset(a.out.join(name), ds)?;
    }
    println!(
        "wrote {} / {} / {} images of {}×{} to {}",
        a.train,
        a.val,
        a.test,
        a.size,
        a.size,
        a.out.display()
    );
    Ok(())
}

fn loss_config(kind: &str, null_background: bool, keep_p: f64) -> Result<LossConfig> {
    let kind = match kind {
        "softmax" => LossKind::SoftmaxSum,
        "sigmoid" => LossKind::SigmoidCe,
        other => return Err(usage(format!("unknown loss `{other}` (softmax, sigmoid)"))),
    };
    let cfg = LossConfig {
        kind,
        null_background,
        sample_keep_p: keep_p,
        ..Default::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_split(dir: &Path, n_classes: usize, mask: MaskMode) -> Result<data::Dataset> {
    let ds = data::load_dataset(dir, n_classes)?;
    Ok(ds.map(|s| data::apply_mask(s, mask)))
}

fn train(a: &TrainArgs, seed: u64) -> Result<()> {
    let desc = load_net(&a.net)?;
    require_exists(&a.data.join("train"), "training split")?;
    require_exists(&a.data.join("val"), "validation split")?;
    let loss_cfg = loss_config(&a.loss, a.null_background, a.keep_p)?;
    let train_set = load_split(&a.data.join("train"), a.classes, a.mask)?;
    let val_set = load_split(&a.data.join("val"), a.classes, a.mask)?;
    let out_channels = if a.null_background { a.classes - 1 } else { a.classes };
    let opts = BuildOptions {
        n_classes: out_channels,
        mean: train_set.channel_mean(),
        seed,
        dropout: a.dropout,
        truncate_at: None,
    };
    let mut net = build_from_description(&desc, &opts)?;
    let stride = net.backbone.total_stride();
    for (name, ds) in [("training", &train_set), ("validation", &val_set)] {
        if let Some(s) = ds.samples.iter().find(|s| s.image.dims().h % stride != 0 || s.image.dims().w % stride != 0) {
            let d = s.image.dims();
            return Err(usage(format!(
                "{name} image of {}×{} is not a multiple of the net's stride {stride}",
                d.h, d.w
            )));
        }
    }
    let optim = training::OptimConfig {
        weight_decay: a.weight_decay,
        ..a.regime.optim(a.lr)
    };
    let schedule = TrainSchedule {
        updates: a.updates,
        eval_every: a.eval_every,
        seed,
        fixed_order: false,
        augment: (a.mirror || a.jitter > 0).then_some((a.mirror, a.jitter)),
        restore_best: a.restore_best,
        stop_at_iu: None,
    };
    let run = RunDir::create(&a.out)?;
    let log = training::train(&mut net.graph, &train_set, &val_set, &loss_cfg, &optim, &schedule)?;
    run.save(&desc, &net, &loss_cfg, a.classes, seed)?;
    run.write("log.txt", &log.to_text(false))?;
    run.write("timing.txt", &log.to_text(true))?;

    let mut table = String::from("split pixel_acc mean_acc mean_iu fw_iu\n");
    let mut splits = vec![("val", val_set)];
    let test_dir = a.data.join("test");
    if test_dir.exists() {
        let test_set = load_split(&test_dir, a.classes, a.mask)?;
        if !test_set.is_empty() {
            splits.push(("test", test_set));
        }
    }
    for (name, ds) in &splits {
        let cm = confusion(&net.graph, ds, &loss_cfg)?;
        let m = compute_metrics(&cm, false)?;
        table.push_str(&format!(
            "{name} {:.6} {:.6} {:.6} {:.6}\n",
            m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu
        ));
    }
    run.write("metrics.txt", &table)?;
    print!("{table}");
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let loaded = RunDir::open(&a.run)?.load()?;
    let ds = load_split(&a.data, loaded.n_classes, a.mask)?;
    let cm = confusion(&loaded.net.graph, &ds, &loaded.loss)?;
    print!("{}", metrics_table(&cm, a.exclude_background)?);
    Ok(())
}

fn metrics_table(cm: &ConfusionMatrix, exclude_background: bool) -> Result<String> {
    let m = compute_metrics(cm, exclude_background)?;
    let mut s = format!(
        "pixel_acc {:.6}\nmean_acc {:.6}\nmean_iu {:.6}\nfw_iu {:.6}\n",
        m.pixel_acc, m.mean_acc, m.mean_iu, m.fw_iu
    );
    for (c, iu) in cm.per_class_iu().iter().enumerate() {
        let name = CLASS_NAMES.get(c).copied().unwrap_or("class");
        match iu {
            Some(v) => s.push_str(&format!("iu {c} {name} {v:.6}\n")),
            None => s.push_str(&format!("iu {c} {name} absent\n")),
        }
    }
    Ok(s)
}

fn infer(a: &InferArgs) -> Result<()> {
    let mut loaded = RunDir::open(&a.run)?.load()?;
    let image = data::load_image(&a.image)?;
    let d = image.dims();
    let want_c = loaded.net.backbone.input_channels;
    if d.c != want_c {
        return Err(usage(format!("{} has {} channels, the net takes {want_c}", a.image.display(), d.c)));
    }
    // Pad with the training mean (zero after normalisation) up to a multiple
    // of the backbone stride, then crop the prediction back.
    let stride = loaded.net.backbone.total_stride();
    let (h, w) = (d.h.div_ceil(stride) * stride, d.w.div_ceil(stride) * stride);
    let mean = loaded.net.options.mean.clone();
    let padded = Tensor::from_fn(Dims::new(1, d.c, h, w), |_, c, i, j| {
        if i < d.h && j < d.w {
            image.at(0, c, i, j)
        } else {
            mean.get(c).copied().unwrap_or(0.0)
        }
    })?;
    let scores = loaded.net.graph.forward_single(&padded)?.crop(0, 0, d.h, d.w)?;
    let labels = predict(&scores, &loaded.loss)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("{}", a.out.display()))?;
    data::save_raster(a.out.join("labels.png"), &data::Raster::from_labels(&labels))?;

    let probs = class_probabilities(&scores, &loaded.loss);
    let first_class = usize::from(loaded.loss.null_background);
    for c in 0..probs.dims().c {
        let class = c + first_class;
        let name = CLASS_NAMES.get(class).copied().unwrap_or("class");
        let plane = Tensor::from_vec(Dims::new(1, 1, d.h, d.w), probs.plane(0, c).to_vec())?;
        data::save_raster(
            a.out.join(format!("score_{class}_{name}.png")),
            &data::Raster::from_image(&plane)?,
        )?;
    }
    println!("{}×{} labels and {} score maps in {}", d.h, d.w, probs.dims().c, a.out.display());
    Ok(())
}

/// Softmax probabilities, or per-class sigmoid probabilities for the
/// sigmoid loss.
fn class_probabilities(scores: &Tensor, loss: &LossConfig) -> Tensor {
    let d = scores.dims();
    let hw = d.h * d.w;
    let mut out = scores.clone();
    let v = out.data_mut();
    for n in 0..d.n {
        for p in 0..hw {
            let at = |c: usize| n * d.c * hw + c * hw + p;
            match loss.kind {
                LossKind::SigmoidCe => {
                    for c in 0..d.c {
                        v[at(c)] = 1.0 / (1.0 + (-v[at(c)]).exp());
                    }
                }
                LossKind::SoftmaxSum => {
                    let max = (0..d.c).map(|c| v[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = (0..d.c).map(|c| (v[at(c)] - max).exp()).sum();
                    for c in 0..d.c {
                        v[at(c)] = (v[at(c)] - max).exp() / z;
                    }
                }
            }
        }
    }
    out
}

fn bound(a: &BoundArgs) -> Result<()> {
    let ds = data::load_dataset(&a.data, a.classes)?;
    let truth = ds.labels();
    println!("factor mean_iu_bound");
    for &f in &a.factors {
        println!("{f} {:.6}", iu_upper_bound(&truth, f, a.classes)?);
    }
    Ok(())
}

fn probe(path: &Path) -> Result<()> {
    let desc = load_net(path)?;
    let b = &desc.backbone;
    println!("layer kind kernel stride pad dilation rf eff_stride offset tap");
    for l in &b.layers {
        let f = chain(&b.descriptors_to(&l.name)?)?;
        println!(
            "{} {:?} {} {} {} {} {} {} {} {}",
            l.name,
            l.kind,
            l.kernel,
            l.stride,
            l.pad,
            l.dilation,
            f.rf_size,
            f.eff_stride,
            f.offset,
            if l.tap { "yes" } else { "-" }
        );
    }
    let f = chain(&b.descriptors())?;
    println!("rf {} stride {} offset {}", f.rf_size, f.eff_stride, f.offset);
    Ok(())
}

fn equiv(p: f64, k: usize, k_prime: usize, horizon: usize) -> Result<()> {
    let q = equivalent_momentum(p, k, k_prime)?;
    println!("p' = {q:.4} ({q:.10})");
    let a = effective_coefficients(p, k, horizon);
    let b = effective_coefficients(q, k_prime, horizon);
    println!("lag coeff_k={k} coeff_k'={k_prime}");
    for j in 0..horizon {
        println!("{j} {:.6} {:.6}", a[j], b[j]);
    }
    Ok(())
}
