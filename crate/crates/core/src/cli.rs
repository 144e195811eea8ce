//! Command-line front end: `train`, `infer`, `eval`, `ablate`, `profile`, `dump-ndp`.
//!
//! Settings resolve as flag > config file > built-in default. The config
//! file is TOML with `[model]`, `[train]` and `[loss]` tables whose keys are
//! the field names of [`ModelConfig`], [`TrainConfig`] and [`LossConfig`].

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{count_flops, count_params, fmt_metric, profile_runtime, psnr, ssim, ImageScore, MetricsReport, SsimParams};
use crate::model::{build_inference_model, build_model, make_variant, ModelConfig, Variant};
use crate::ndp::dump_ndp_maps;
use crate::tensor::ImageTensor;
use crate::train::data::{is_image_file, list_images};
use crate::train::{
    evaluate_loss, fit, load_checkpoint, load_image, overfit_synthetic, save_image, Batch, Dataset, TrainConfig,
    OVERFIT_LR_INIT,
};

/// Reference parameter counts in millions, per variant.
pub const REFERENCE_PARAMS_M: [(Variant, f64); 8] = [
    (Variant::A, 0.5322),
    (Variant::B, 0.7348),
    (Variant::C, 0.5404),
    (Variant::D, 0.7430),
    (Variant::E, 0.5322),
    (Variant::Full, 0.7430),
    (Variant::Cascaded, 0.7414),
    (Variant::NoSrBranch, 0.7425),
];
pub const REFERENCE_FLOPS_G: f64 = 32.56;
pub const REFERENCE_RUNTIME_S: f64 = 0.12;

#[derive(Debug, Parser)]
#[command(name = "uhdpromer", version, about = "Prior-guided restoration of very large images")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a paired dataset or on a synthetic overfit set.
    Train(TrainArgs),
    /// Restore every image in a directory with a checkpoint.
    Infer(InferArgs),
    /// PSNR and SSIM of predictions against ground truth.
    Eval(EvalArgs),
    /// Build every ablation variant, compare parameter counts and run a smoke step.
    Ablate(AblateArgs),
    /// Parameter count, FLOP ledger and runtime.
    Profile(ProfileArgs),
    /// Write one grayscale guide map per transformer block.
    DumpNdp(DumpNdpArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ModelOverrides {
    /// TOML config file with [model], [train] and [loss] tables.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub shuffle: Option<usize>,
    /// Feed-forward expansion factor.
    #[arg(long)]
    pub expansion: Option<f64>,
    #[arg(long)]
    pub shared_mixer: Option<bool>,
    #[arg(long)]
    pub temperature_init: Option<f64>,
    /// full, a, b, c, d, e, cascaded or no_sr_branch.
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Seeds both parameter init and data order.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long)]
    pub lr_init: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Directory holding `input/` and `gt/`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    #[arg(long)]
    pub flips: Option<bool>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub alpha_sr: Option<f64>,
    #[arg(long)]
    pub lambda_freq: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelOverrides,
    #[command(flatten)]
    pub train: TrainOverrides,
    /// Output directory for checkpoints and the CSV log.
    #[arg(long, default_value = "runs/train")]
    pub out: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Train on generated image pairs instead of a dataset.
    #[arg(long)]
    pub overfit_synthetic: bool,
    #[arg(long, default_value_t = 2)]
    pub pairs: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
    /// Also write the super-resolution branch output to `<output>/sr/`.
    #[arg(long)]
    pub save_sr: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Where to write the per-image CSV; printed to stdout otherwise.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelOverrides,
    /// Side of the square image used for the smoke step.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub model: ModelOverrides,
    /// Comma-separated square sizes.
    #[arg(long, value_delimiter = ',', default_value = "1024")]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Only count parameters and FLOPs.
    #[arg(long)]
    pub skip_runtime: bool,
}

#[derive(Debug, Args)]
pub struct DumpNdpArgs {
    #[command(flatten)]
    pub model: ModelOverrides,
    /// Trained weights; without one the model is built from the config.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Perturb every weight with uniform noise of this amplitude first.
    #[arg(long)]
    pub randomize: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
    loss: LossConfig,
}

/// Fully resolved settings for one invocation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Resolved {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    /// Whether the file or a flag set `train.lr_init`.
    pub lr_init_given: bool,
}

/// Applies the config file, then the flags, on top of the defaults.
pub fn resolve(m: &ModelOverrides, t: &TrainOverrides) -> Result<Resolved> {
    let (file, mut lr_init_given) = match &m.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", path.display())]))?;
            let given = table.get("train").and_then(|v| v.get("lr_init")).is_some();
            let file: FileConfig = toml::from_str(&text)
                .map_err(|e| Error::InvalidConfig(vec![format!("{}: {e}", path.display())]))?;
            (file, given)
        }
        None => (FileConfig::default(), false),
    };
    let FileConfig { model: mut mc, train: mut tc, loss: mut lc } = file;

    macro_rules! set {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    set!(mc.channels, m.channels);
    set!(mc.blocks, m.blocks);
    set!(mc.heads, m.heads);
    set!(mc.shuffle, m.shuffle);
    set!(mc.expansion, m.expansion);
    set!(mc.shared_mixer, m.shared_mixer);
    set!(mc.temperature_init, m.temperature_init);
    set!(mc.variant, m.variant);
    set!(mc.seed, m.seed);
    set!(tc.seed, m.seed);
    set!(tc.total_steps, t.steps);
    set!(tc.batch_size, t.batch_size);
    set!(tc.patch_size, t.patch_size);
    set!(tc.lr_init, t.lr_init);
    set!(tc.lr_min, t.lr_min);
    set!(tc.weight_decay, t.weight_decay);
    set!(tc.checkpoint_interval, t.checkpoint_interval);
    set!(tc.flips, t.flips);
    set!(tc.log_every, t.log_every);
    set!(lc.alpha_sr, t.alpha_sr);
    set!(lc.lambda_freq, t.lambda_freq);
    if t.dataset.is_some() {
        tc.dataset = t.dataset.clone();
    }
    lr_init_given |= t.lr_init.is_some();
    mc.validate()?;
    lc.validate()?;
    Ok(Resolved { model: mc, train: tc, loss: lc, lr_init_given })
}

/// Runs one subcommand and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Profile(a) => cmd_profile(&a),
        Command::DumpNdp(a) => cmd_dump_ndp(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

pub fn cmd_train(a: &TrainArgs) -> Result<i32> {
    let mut r = resolve(&a.model, &a.train)?;
    if a.overfit_synthetic {
        if !r.lr_init_given {
            r.train.lr_init = OVERFIT_LR_INIT;
        }
        let rep = overfit_synthetic(&r.model, &r.train, &r.loss, a.pairs, a.size, &a.out)?;
        println!("variant: {}", r.model.variant);
        println!("steps: {}", r.train.total_steps);
        println!("initial loss: {:.6}", rep.train.first_loss().unwrap_or(f64::NAN));
        println!("final loss: {:.6}", rep.train.last_loss().unwrap_or(f64::NAN));
        println!("loss reduction: {:.2}%", 100.0 * rep.loss_reduction);
        println!("initial PSNR: {} dB", fmt_metric(rep.initial_psnr));
        println!("final PSNR: {} dB", fmt_metric(rep.final_psnr));
        println!("log: {}", rep.train.log_path.display());
        return Ok(0);
    }
    let Some(root) = r.train.dataset.clone() else {
        return Err(Error::Dataset(
            "no dataset given; pass --dataset DIR (with input/ and gt/ inside), set `dataset` under [train] in the \
             config file, or use --overfit-synthetic"
                .into(),
        ));
    };
    let data = Dataset::open(&root)?;
    let rep = fit(&r.model, &r.train, &r.loss, &data, &a.out, a.resume.as_deref())?;
    println!("variant: {}", r.model.variant);
    println!("steps: {} -> {}", rep.start_step, r.train.total_steps);
    if let Some(l) = rep.last_loss() {
        println!("final loss: {l:.6}");
    }
    for p in &rep.checkpoints {
        println!("checkpoint: {}", p.display());
    }
    println!("log: {}", rep.log_path.display());
    Ok(0)
}

fn png_name(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
    format!("{stem}.png")
}

pub fn cmd_infer(a: &InferArgs) -> Result<i32> {
    let model = load_checkpoint(&a.checkpoint, None)?.model.frozen()?;
    let files = list_images(&a.input)?;
    if files.is_empty() {
        return Err(Error::Dataset(format!("no images found in {}", a.input.display())));
    }
    let mut failed = 0;
    for f in &files {
        let name = png_name(f);
        let one = || -> Result<()> {
            let x = ImageTensor::new(load_image(f)?.unsqueeze(0)?)?;
            let out = model.forward(&x)?;
            save_image(&out.restored.as_tensor().squeeze(0)?, &a.output.join(&name))?;
            if a.save_sr {
                if let Some(sr) = &out.sr_image {
                    save_image(&sr.as_tensor().squeeze(0)?, &a.output.join("sr").join(&name))?;
                }
            }
            Ok(())
        };
        match one() {
            Ok(()) => println!("{} -> {}", f.display(), a.output.join(&name).display()),
            Err(e) => {
                eprintln!("error: {}: {e}", f.display());
                failed += 1;
            }
        }
    }
    println!("restored {} of {} images", files.len() - failed, files.len());
    Ok(if failed > 0 { 1 } else { 0 })
}

/// Scores every file in `pred` against the same name in `gt`.
pub fn evaluate_dirs(pred: &Path, gt: &Path) -> Result<MetricsReport> {
    let preds = list_images(pred)?;
    let mut unmatched: Vec<String> = Vec::new();
    let mut pairs = Vec::new();
    for p in &preds {
        let name = p.file_name().unwrap().to_string_lossy().to_string();
        let g = gt.join(&name);
        if g.is_file() {
            pairs.push((name, p.clone(), g));
        } else {
            unmatched.push(format!("{name} (no ground truth)"));
        }
    }
    for g in list_images(gt)? {
        let name = g.file_name().unwrap().to_string_lossy().to_string();
        if !pred.join(&name).is_file() {
            unmatched.push(format!("{name} (no prediction)"));
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::Dataset(format!("unmatched files: {}", unmatched.join(", "))));
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!("no images found in {}", pred.display())));
    }
    let mut report = MetricsReport::default();
    for (name, p, g) in pairs {
        let x = load_image(&p)?.unsqueeze(0)?;
        let y = load_image(&g)?.unsqueeze(0)?;
        report.rows.push(ImageScore {
            image: name,
            psnr: psnr(&x, &y, 1.0)?,
            ssim: ssim(&x, &y, SsimParams::default())?,
        });
    }
    Ok(report)
}

pub fn cmd_eval(a: &EvalArgs) -> Result<i32> {
    let report = evaluate_dirs(&a.pred, &a.gt)?;
    match &a.csv {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
            println!("csv: {}", path.display());
        }
        None => print!("{}", report.to_csv()),
    }
    print!("{}", report.summary());
    Ok(0)
}

/// One forward and backward pass of `model` on a random image.
pub fn smoke_step(config: &ModelConfig, size: usize) -> Result<f64> {
    let model = make_variant(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut image = || {
        let v: Vec<f32> = (0..3 * size * size).map(|_| rng.random::<f32>()).collect();
        Tensor::from_vec(v, (1, 3, size, size), &Device::Cpu)
    };
    let (input, target) = (image()?, image()?);
    let (total, _, _) = evaluate_loss(&model, &Batch { input, target }, &LossConfig::default())?;
    let grads = total.backward()?;
    let value = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !value.is_finite() {
        return Err(Error::invalid("smoke_step", format!("loss is {value}")));
    }
    let with_grad = model.params().iter().filter(|(_, v)| grads.get(v.as_tensor()).is_some()).count();
    if with_grad == 0 {
        return Err(Error::invalid("smoke_step", "no parameter received a gradient"));
    }
    Ok(value)
}

fn reference_of(v: Variant) -> f64 {
    REFERENCE_PARAMS_M.iter().find(|(r, _)| *r == v).map(|(_, m)| *m).unwrap_or(f64::NAN)
}

fn description(v: Variant) -> &'static str {
    match v {
        Variant::Full => "full model",
        Variant::A => "w/o NDP in NDPA&NDPN",
        Variant::B => "w/o NDP in NDPA",
        Variant::C => "w/o NDP in NDPN",
        Variant::D => "direct features instead of NDP",
        Variant::E => "NDP before NDPTB",
        Variant::Cascaded => "cascaded reconstruction",
        Variant::NoSrBranch => "w/o SR loss term",
    }
}

/// The ablation table, the parameter relations and whether every gate held.
pub fn ablation_table(base: &ModelConfig, smoke_size: Option<usize>) -> Result<(String, bool)> {
    let mut counts = Vec::new();
    for v in Variant::ALL {
        let cfg = ModelConfig { variant: v, ..base.clone() };
        counts.push((v, cfg.clone(), count_params(&make_variant(&cfg)?).total));
    }
    let count = |v: Variant| counts.iter().find(|(x, _, _)| *x == v).map(|(_, _, n)| *n).unwrap();
    let mut s = String::new();
    let mut ok = true;
    let row = |s: &mut String, v: Variant, smoke: &str| {
        let n = count(v);
        let _ = writeln!(
            s,
            "{:<14} {:<32} {:>10} {:>10.4}M {:>9.4}M  {}",
            v.as_str(),
            description(v),
            n,
            n as f64 / 1e6,
            reference_of(v),
            smoke
        );
    };
    let header = format!(
        "{:<14} {:<32} {:>10} {:>11} {:>10}  {}\n",
        "variant", "description", "params", "params(M)", "reference", "smoke"
    );
    let mut smoke = std::collections::BTreeMap::new();
    for (v, cfg, _) in &counts {
        let cell = match smoke_size {
            None => "skipped".to_string(),
            Some(size) => match smoke_step(cfg, size) {
                Ok(l) => format!("ok (loss {l:.4})"),
                Err(e) => {
                    ok = false;
                    format!("FAILED: {e}")
                }
            },
        };
        smoke.insert(v.as_str(), cell);
    }
    s.push_str("NDP placement ablation\n");
    s.push_str(&header);
    for v in [Variant::A, Variant::B, Variant::C, Variant::D, Variant::E, Variant::Full] {
        row(&mut s, v, &smoke[v.as_str()]);
    }
    s.push_str("\nreconstruction ablation\n");
    s.push_str(&header);
    for v in [Variant::Cascaded, Variant::NoSrBranch, Variant::Full] {
        row(&mut s, v, &smoke[v.as_str()]);
    }
    s.push('\n');
    let gates = [
        ("d == full params", count(Variant::D) == count(Variant::Full)),
        ("a == e params", count(Variant::A) == count(Variant::E)),
        ("a < full params", count(Variant::A) < count(Variant::Full)),
    ];
    for (name, pass) in gates {
        ok &= pass;
        let _ = writeln!(s, "{name}: {}", if pass { "PASS" } else { "FAIL" });
    }
    let reported = [
        ("a < c params", count(Variant::A) < count(Variant::C)),
        ("c < full params", count(Variant::C) < count(Variant::Full)),
        ("b < full params", count(Variant::B) < count(Variant::Full)),
        ("no_sr_branch == full params", count(Variant::NoSrBranch) == count(Variant::Full)),
    ];
    for (name, holds) in reported {
        let _ = writeln!(s, "{name}: {} (reported)", if holds { "holds" } else { "differs" });
    }
    Ok((s, ok))
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<i32> {
    let r = resolve(&a.model, &TrainOverrides::default())?;
    let (table, ok) = ablation_table(&r.model, Some(a.size))?;
    print!("{table}");
    Ok(if ok { 0 } else { 1 })
}

fn deviation(ours: f64, reference: f64) -> String {
    format!("{:+.1}%", 100.0 * (ours - reference) / reference)
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<i32> {
    let r = resolve(&a.model, &TrainOverrides::default())?;
    let model = build_model(&r.model, DType::F32)?;
    let params = count_params(&model);
    let millions = params.total as f64 / 1e6;
    print!("{}", params.render());
    let ref_params = reference_of(Variant::Full);
    println!("params: {:.4}M (reference {ref_params:.4}M, {})", millions, deviation(millions, ref_params));
    let mut failed = 0;
    for &size in &a.sizes {
        println!("\nsize {size}x{size}");
        match count_flops(&r.model, size, size) {
            Ok(ledger) => {
                print!("{}", ledger.render());
                let g = ledger.total_flops() as f64 / 1e9;
                let cmp = if size == 1024 {
                    format!("reference {REFERENCE_FLOPS_G:.2}G at 1024x1024, {}", deviation(g, REFERENCE_FLOPS_G))
                } else {
                    format!("reference {REFERENCE_FLOPS_G:.2}G is quoted at 1024x1024 only")
                };
                println!("FLOPs: {g:.4}G ({cmp}; counted as 2 x MAC, the reference convention is unstated)");
            }
            Err(e) => {
                failed += 1;
                eprintln!("error: FLOPs at {size}x{size}: {e}");
            }
        }
        if a.skip_runtime {
            continue;
        }
        match profile_runtime(&model, size, size, a.reps, a.warmup) {
            Ok(p) => println!(
                "runtime: {:.4} s mean, {:.4} s std over {} reps on {} (reference {REFERENCE_RUNTIME_S} s on different \
                 hardware; not comparable)",
                p.mean_s,
                p.std_dev(),
                p.reps,
                p.hardware
            ),
            Err(e) => {
                failed += 1;
                eprintln!("error: runtime at {size}x{size}: {e}");
            }
        }
    }
    Ok(if failed > 0 { 1 } else { 0 })
}

pub fn cmd_dump_ndp(a: &DumpNdpArgs) -> Result<i32> {
    let model = match &a.checkpoint {
        Some(p) => load_checkpoint(p, None)?.model.frozen()?,
        None => {
            let r = resolve(&a.model, &TrainOverrides::default())?;
            build_inference_model(&r.model, DType::F32)?
        }
    };
    if let Some(scale) = a.randomize {
        model.params().randomize(model.config().seed, scale)?;
    }
    if !is_image_file(&a.image) {
        return Err(Error::Dataset(format!("{} is not a PNG or JPEG file", a.image.display())));
    }
    let x = ImageTensor::new(load_image(&a.image)?.unsqueeze(0)?)?;
    let maps = model.ndp_maps(&x)?;
    if maps.is_empty() {
        return Err(Error::invalid(
            "dump-ndp",
            format!("variant {} computes no guide maps", model.config().variant),
        ));
    }
    for p in dump_ndp_maps(&maps, &a.out)? {
        println!("{}", p.display());
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_beats_file_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[model]\nchannels = 24\nblocks = 3\n[train]\nlr_init = 1e-3\n[loss]\nalpha_sr = 0.25\n").unwrap();
        let m = ModelOverrides { config: Some(path), blocks: Some(2), ..Default::default() };
        let r = resolve(&m, &TrainOverrides::default()).unwrap();
        assert_eq!(r.model.blocks, 2);
        assert_eq!(r.model.channels, 24);
        assert_eq!(r.model.heads, ModelConfig::default().heads);
        assert_eq!(r.train.lr_init, 1e-3);
        assert_eq!(r.loss.alpha_sr, 0.25);
        assert!(r.lr_init_given);
        assert!(!resolve(&ModelOverrides::default(), &TrainOverrides::default()).unwrap().lr_init_given);
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[model]\nchanels = 12\n").unwrap();
        let m = ModelOverrides { config: Some(path), ..Default::default() };
        let e = resolve(&m, &TrainOverrides::default()).unwrap_err().to_string();
        assert!(e.contains("chanels"), "{e}");
    }

    #[test]
    fn seed_flag_sets_both_seeds() {
        let r = resolve(&ModelOverrides { seed: Some(9), ..Default::default() }, &TrainOverrides::default()).unwrap();
        assert_eq!((r.model.seed, r.train.seed), (9, 9));
    }

    #[test]
    fn ablation_table_lists_references_and_gates() {
        let base = ModelConfig { channels: 4, blocks: 2, heads: 2, shuffle: 2, ..Default::default() };
        let (s, ok) = ablation_table(&base, None).unwrap();
        assert!(ok, "{s}");
        assert!(s.contains("d == full params: PASS"));
        for r in ["0.5322M", "0.7348M", "0.5404M", "0.7430M", "0.7414M", "0.7425M"] {
            assert!(s.contains(r), "{r}");
        }
    }
}
