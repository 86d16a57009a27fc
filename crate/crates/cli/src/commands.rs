use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use clap::Args;
use xsep_core::arch::{report_costs, ArchSpec, Node};
use xsep_core::check::equiv::{
    inception_reformulation, spectrum_endpoints, EquivCheck, EquivReport,
};
use xsep_core::check::gradcheck::{self, GradCheckConfig, LayerKind};
use xsep_core::conv::Padding;
use xsep_core::data::{
    load_dataset, read_class_weights, synth_dataset, synth_multilabel, Split, PROFILE_HEADER,
};
use xsep_core::model::Model;
use xsep_core::nn::Mode;
use xsep_core::train::{evaluate_checkpoint, train_from_config, Checkpoint, TrainConfig};
use xsep_core::{Activation, Error, Result, Rng, Tensor4};

/// Outcome of a command that ran to completion.
pub enum Status {
    Pass,
    Fail,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Preset (xception, toy, vgg) or architecture text file
    #[arg(long)]
    arch: String,
    /// Classifier width
    #[arg(long)]
    classes: Option<usize>,
    /// Hidden fully connected widths before the classifier, e.g. 4096,4096
    #[arg(long, value_delimiter = ',')]
    fc: Vec<usize>,
    /// Drop every residual shortcut
    #[arg(long)]
    no_residuals: bool,
    /// Print one JSON object instead of key=value lines
    #[arg(long)]
    json: bool,
}

fn resolve_arch(a: &ParamsArgs) -> Result<ArchSpec> {
    if ["xception", "toy", "vgg"].contains(&a.arch.as_str()) {
        let mut cfg = TrainConfig::default();
        cfg.arch.preset = a.arch.clone();
        cfg.arch.classes = a.classes;
        cfg.arch.fc = a.fc.clone();
        cfg.arch.residuals = !a.no_residuals;
        return cfg.build_arch();
    }
    let path = PathBuf::from(&a.arch);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "unknown architecture `{}` (expected xception, toy, vgg or a file)",
            a.arch
        )));
    }
    if a.classes.is_some() || !a.fc.is_empty() || a.no_residuals {
        return Err(Error::Config(
            "--classes, --fc and --no-residuals apply to presets only".into(),
        ));
    }
    ArchSpec::from_text(&std::fs::read_to_string(path)?)
}

pub fn params(a: &ParamsArgs) -> Result<Status> {
    let spec = resolve_arch(a)?;
    let cost = report_costs(&spec)?;
    if a.json {
        let mut v = serde_json::to_value(cost).map_err(|e| Error::Format(e.to_string()))?;
        let obj = v.as_object_mut().expect("struct serializes to an object");
        obj.insert("arch".into(), spec.name.clone().into());
        obj.insert("total_params".into(), cost.total_params().into());
        obj.insert("conv_layers".into(), spec.conv_layer_count().into());
        obj.insert("modules".into(), spec.module_count().into());
        obj.insert("residual_modules".into(), spec.residual_count().into());
        println!("{v}");
        return Ok(Status::Pass);
    }
    println!("arch={}", spec.name);
    println!("input={}", spec.input);
    println!(
        "classes={}",
        spec.num_classes.map_or("none".into(), |k| k.to_string())
    );
    println!("trainable_params={}", cost.trainable_params);
    println!("non_trainable_params={}", cost.non_trainable_params);
    println!("total_params={}", cost.total_params());
    println!("macs_per_example={}", cost.macs_per_example);
    println!("activation_peak={}", cost.activation_peak);
    println!("conv_layers={}", spec.conv_layer_count());
    println!("modules={}", spec.module_count());
    println!("residual_modules={}", spec.residual_count());
    Ok(Status::Pass)
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        Ok(v) => Err(format!("tolerance must be > 0, got {v}")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Debug, Args)]
pub struct EquivArgs {
    /// inception-reformulation or spectrum-endpoints
    #[arg(long, value_parser = EquivCheck::from_str)]
    check: EquivCheck,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Largest acceptable relative deviation (> 0)
    #[arg(long, default_value = "1e-5", value_parser = positive)]
    tol: f64,
    /// Randomized instances to compare
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

pub fn equiv(a: &EquivArgs) -> Result<Status> {
    let reports: Vec<EquivReport> = match a.check {
        EquivCheck::InceptionReformulation => vec![inception_reformulation(a.seed, a.instances)?],
        EquivCheck::SpectrumEndpoints => {
            let (one, full) = spectrum_endpoints(a.seed, a.instances)?;
            vec![one, full]
        }
    };
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        if r.worst.is_nan() || r.worst >= a.tol {
            ok = false;
            println!(
                "FAIL {} seed={} instance={} max_rel_dev={:.3e} tol={:e}",
                r.check, a.seed, r.worst_instance, r.worst, a.tol
            );
        }
    }
    Ok(if ok { Status::Pass } else { Status::Fail })
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// all, conv, sepconv, bn, dense, pool or residual
    #[arg(long, default_value = "all", value_parser = LayerKind::from_str)]
    layer: LayerKind,
    #[arg(long, default_value_t = 3)]
    seed: u64,
    /// Scale analytic gradients by (1 + fault); negative control
    #[arg(long, default_value_t = 0.0, hide = true)]
    fault: f64,
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<Status> {
    let cfg = GradCheckConfig {
        fault: a.fault,
        ..GradCheckConfig::default()
    };
    let mut ok = true;
    for r in gradcheck::run(a.layer, a.seed, &cfg)? {
        println!("{r}");
        if !r.passed(cfg.tolerance) {
            ok = false;
            let w = r.worst();
            println!(
                "FAIL {} at {}[{}] rel_err={:.3e}",
                r.case, w.name, w.index, w.worst
            );
        }
    }
    Ok(if ok { Status::Pass } else { Status::Fail })
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML config with [arch], [optim], [data] and [run] sections
    #[arg(long)]
    config: PathBuf,
}

pub fn train(a: &TrainArgs) -> Result<Status> {
    let cfg = TrainConfig::load(&a.config)?;
    let (_, out) = train_from_config(&cfg)?;
    println!("{PROFILE_HEADER}");
    for r in &out.rows {
        println!("{}", r.csv_row());
    }
    let losses: Vec<String> = out.epoch_losses.iter().map(|l| format!("{l:.6}")).collect();
    eprintln!("epoch_losses={}", losses.join(","));
    if let Some(e) = &out.final_train {
        eprintln!(
            "final_train loss={:.6} top1={}",
            e.loss,
            e.top1.map_or("n/a".into(), |v| v.to_string())
        );
    }
    Ok(Status::Pass)
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// XTSR images then XLBL labels
    #[arg(long, num_args = 2, value_names = ["IMAGES", "LABELS"])]
    data: Vec<PathBuf>,
    /// `class weight` lines for weighted MAP
    #[arg(long)]
    class_weights: Option<PathBuf>,
    /// Examples per inference batch
    #[arg(long, default_value_t = 100)]
    batch: usize,
}

pub fn eval(a: &EvalArgs) -> Result<Status> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut data = load_dataset(&a.data[0], &a.data[1], Split::Val)?;
    if let Some(w) = &a.class_weights {
        let k = data.num_classes();
        data = data.with_class_weights(read_class_weights(w, k)?)?;
    }
    if a.batch == 0 {
        return Err(Error::Config("batch must be >= 1".into()));
    }
    let r = evaluate_checkpoint(&ck, &data, a.batch)?;
    let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    println!("step,val_loss,val_top1,val_top5,val_wmap100");
    println!(
        "{},{},{},{},{}",
        r.step,
        f(r.val_loss),
        f(r.val_top1),
        f(r.val_top5),
        f(r.val_wmap100)
    );
    Ok(Status::Pass)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum BenchOp {
    Conv,
    Sepconv,
}

/// `n,c,h,w` with every entry >= 1.
fn parse_shape(s: &str) -> std::result::Result<[usize; 4], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad shape `{s}`, expected n,c,h,w"))
        })
        .collect::<std::result::Result<_, _>>()?;
    match v.as_slice() {
        &[n, c, h, w] if v.iter().all(|&d| d >= 1) => Ok([n, c, h, w]),
        _ => Err(format!(
            "bad shape `{s}`, expected four positive integers n,c,h,w"
        )),
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    op: BenchOp,
    /// Input shape n,c,h,w
    #[arg(long, value_parser = parse_shape)]
    shape: [usize; 4],
    /// Output channels
    #[arg(long)]
    cout: usize,
    /// Timed repetitions (>= 1)
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u32).range(1..))]
    iters: u32,
    /// Spatial kernel size
    #[arg(long, default_value_t = 3)]
    kernel: usize,
}

pub fn bench(a: &BenchArgs) -> Result<Status> {
    let [n, c, h, w] = a.shape;
    let node = match a.op {
        BenchOp::Conv => Node::conv(c, a.cout, a.kernel, 1, Padding::Same),
        BenchOp::Sepconv => Node::SepConv {
            in_c: c,
            out_c: a.cout,
            kernel: a.kernel,
            stride: 1,
            padding: Padding::Same,
            multiplier: 1,
            activation: Activation::Identity,
        },
    };
    let spec = ArchSpec {
        name: format!("bench-{:?}", a.op).to_lowercase(),
        input: xsep_core::arch::Shape3::new(c, h, w),
        num_classes: None,
        options: Default::default(),
        nodes: vec![node],
    };
    let macs = report_costs(&spec)?.macs_per_example * n as u64;
    let model = Model::new(&spec)?;
    let mut rng = Rng::seed(0);
    let store = model.init_params::<f32>(&mut rng)?;
    let x = Tensor4::<f32>::randn((n, c, h, w), &mut rng)?;
    let iters = a.iters as usize;

    let t = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(model.forward(&store, &x, Mode::Train, &mut rng)?);
    }
    let fwd = t.elapsed().as_secs_f64() / iters as f64;
    let t = Instant::now();
    for _ in 0..iters {
        let (y, tape) = model.forward(&store, &x, Mode::Train, &mut rng)?;
        std::hint::black_box(model.backward(&store, tape, y)?);
    }
    let both = t.elapsed().as_secs_f64() / iters as f64;
    println!("op,n,c,h,w,cout,kernel,iters,macs,fwd_ms,fwd_bwd_ms,fwd_macs_per_s");
    println!(
        "{},{n},{c},{h},{w},{},{},{iters},{macs},{:.4},{:.4},{:.4e}",
        match a.op {
            BenchOp::Conv => "conv",
            BenchOp::Sepconv => "sepconv",
        },
        a.cout,
        a.kernel,
        fwd * 1e3,
        both * 1e3,
        macs as f64 / fwd
    );
    Ok(Status::Pass)
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    /// Number of images
    #[arg(long)]
    count: usize,
    /// Image height and width
    #[arg(long, default_value_t = 32)]
    hw: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Multi-hot labels with 1 to 3 classes per image
    #[arg(long)]
    multi: bool,
    /// Output XTSR image file
    #[arg(long)]
    images: PathBuf,
    /// Output XLBL label file
    #[arg(long)]
    labels: PathBuf,
}

pub fn synth(a: &SynthArgs) -> Result<Status> {
    let data = if a.multi {
        synth_multilabel(a.classes, a.count, a.hw, a.seed)?
    } else {
        synth_dataset(a.classes, a.count, a.hw, a.seed)?
    };
    data.save(&a.images, &a.labels)?;
    println!(
        "wrote {} images of 3x{}x{} ({} classes)",
        data.len(),
        a.hw,
        a.hw,
        a.classes
    );
    Ok(Status::Pass)
}
