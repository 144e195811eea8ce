//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion and exits non-zero if any failed.

use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uhdpromer_core::cli::ablation_table;
use uhdpromer_core::cli::smoke_step;
use uhdpromer_core::loss::{total_loss, LossConfig};
use uhdpromer_core::metrics::{count_flops, count_params, psnr, ssim, OpKind, SsimParams};
use uhdpromer_core::model::{build_model, make_variant, ModelConfig, Variant};
use uhdpromer_core::ndp::compute_ndp;
use uhdpromer_core::ndpt::{transposed_attention_with_map, Ndpa, Ndpn};
use uhdpromer_core::nn::{pixel_shuffle, pixel_unshuffle};
use uhdpromer_core::train::{
    cosine_lr, fit, load_checkpoint, overfit_synthetic, save_checkpoint, AdamW, AdamWConfig, Dataset, TrainConfig,
    OVERFIT_LR_INIT,
};
use uhdpromer_core::{ImageTensor, ParamStore};

type Check = (String, bool);

fn check(name: impl Into<String>, ok: bool) -> Check {
    (name.into(), ok)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar().unwrap()
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn t4(v: Vec<f64>, s: (usize, usize, usize, usize)) -> Tensor {
    Tensor::from_vec(v, s, &Device::Cpu).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn within(start: Instant, limit: Duration) -> Check {
    let e = start.elapsed();
    check(format!("runtime {:.2}s < {}s", e.as_secs_f64(), limit.as_secs()), e < limit)
}

// Criterion 1

fn ndp_oracle() -> Vec<Check> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = rand_vec(&mut rng, 64, -3.0, 3.0);
    let y = rand_vec(&mut rng, 64, -3.0, 3.0);
    let got = flat(compute_ndp(&t4(m.clone(), (1, 4, 4, 4)), &t4(y.clone(), (1, 4, 4, 4))).unwrap().as_tensor());
    let want: Vec<f64> = m.iter().zip(&y).map(|(a, b)| (-(a - b).abs().min(80.0) / 2.0).exp()).collect();
    let diff = max_abs_diff(&got, &want);
    let far = flat(compute_ndp(&t4(vec![1e6], (1, 1, 1, 1)), &t4(vec![0.0], (1, 1, 1, 1))).unwrap().as_tensor())[0];
    let two = flat(compute_ndp(&t4(vec![3.0], (1, 1, 1, 1)), &t4(vec![1.0], (1, 1, 1, 1))).unwrap().as_tensor())[0];
    let in_range = got.iter().chain([&far]).all(|&v| v > 0.0 && v <= 1.0);
    vec![
        check(format!("max |tensor - loop| = {diff:.2e} < 1e-6"), diff < 1e-6),
        check("range in (0, 1]", in_range),
        check(format!("difference 2 -> {two:.6} (0.367879)"), (two - 0.367879).abs() < 1e-6),
        within(start, Duration::from_secs(1)),
    ]
}

// Criterion 2

/// Central differences of `f` over every entry of every parameter; returns
/// (entries checked, entries skipped, worst relative error and where).
/// Central differences with h = 1e-5 over every entry of `store`.
struct Sweep {
    checked: usize,
    skipped: usize,
    worst: f64,
    worst_at: String,
    /// Worst relative error among entries with |g| >= 1e-7.
    worst_large: f64,
}

fn fd_sweep(store: &ParamStore, grads: &candle_core::backprop::GradStore, f: &dyn Fn() -> f64) -> Sweep {
    let h = 1e-5;
    let mut s = Sweep { checked: 0, skipped: 0, worst: 0.0, worst_at: String::new(), worst_large: 0.0 };
    let paths: Vec<String> = store.paths().map(str::to_string).collect();
    for path in &paths {
        let var = store.get(path).unwrap();
        let shape = var.dims().to_vec();
        let base = flat(var.as_tensor());
        let g = grads.get(var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; base.len()]);
        let set = |v: Vec<f64>| store.set(path, &Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + h;
            set(v.clone());
            let up = f();
            v[i] = base[i] - h;
            set(v);
            let down = f();
            let fd = (up - down) / (2.0 * h);
            if g[i].abs() < 1e-8 && fd.abs() < 1e-8 {
                s.skipped += 1;
                continue;
            }
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs());
            s.checked += 1;
            if rel > s.worst {
                s.worst = rel;
                s.worst_at = format!("{path}[{i}]");
            }
            if g[i].abs() >= 1e-7 {
                s.worst_large = s.worst_large.max(rel);
            }
        }
        set(base);
    }
    s
}

fn gradient_check() -> Vec<Check> {
    let start = Instant::now();
    let cfg = ModelConfig { channels: 4, blocks: 2, heads: 2, shuffle: 2, seed: 3, ..Default::default() };
    let model = build_model(&cfg, DType::F64).unwrap();
    // Zero-initialized projections would hide everything upstream of them.
    model.params().randomize(17, 0.3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    // Temperatures near zero saturate the softmax; keep them around their init.
    let temps: Vec<String> = model.params().paths().filter(|p| p.ends_with("temperature")).map(str::to_string).collect();
    for p in &temps {
        let n = model.params().get(p).unwrap().elem_count();
        model.params().set(p, &Tensor::from_vec(rand_vec(&mut rng, n, 0.5, 1.5), n, &Device::Cpu).unwrap()).unwrap();
    }
    let shape = (1, 3, 8, 8);
    let x = rand_vec(&mut rng, 192, 0.0, 1.0);
    let noise = rand_vec(&mut rng, 192, -0.05, 0.05);
    let input = t4(x.clone(), shape);
    let target = t4(x.iter().zip(&noise).map(|(a, b)| a + b).collect(), shape);

    // The full training objective on both outputs.
    let net = || {
        let out = model.forward(&ImageTensor::new(input.clone()).unwrap()).unwrap();
        let sr = out.sr_image.as_ref().map(|s| s.as_tensor());
        total_loss(out.restored.as_tensor(), sr, &target, &LossConfig::default()).unwrap().total
    };
    let grads = net().backward().unwrap();
    let value = scalar(&net());
    let deterministic = value.to_bits() == scalar(&net()).to_bits();
    let sweep = fd_sweep(model.params(), &grads, &|| scalar(&net()));
    let n_arrays = model.params().len();

    // Objective: the training loss against its two image inputs.
    let out = model.forward(&ImageTensor::new(input.clone()).unwrap()).unwrap();
    let mut outs = ParamStore::new(DType::F64, 0);
    outs.create("restored", &[1, 3, 8, 8], uhdpromer_core::Init::Zeros).unwrap();
    outs.create("sr", &[1, 3, 8, 8], uhdpromer_core::Init::Zeros).unwrap();
    outs.set("restored", out.restored.as_tensor()).unwrap();
    outs.set("sr", out.sr_image.unwrap().as_tensor()).unwrap();
    let loss = || {
        let (r, s) = (outs.get("restored").unwrap().as_tensor(), outs.get("sr").unwrap().as_tensor());
        total_loss(r, Some(s), &target, &LossConfig::default()).unwrap().total
    };
    let lgrads = loss().backward().unwrap();
    let l = fd_sweep(&outs, &lgrads, &|| scalar(&loss()));
    // Not gated: one ulp of the loss over 2h bounds how well small entries can resolve.
    println!(
        "    [info] loss {value:.4} (ulp/2h = {:.1e}); worst rel-err over |g| >= 1e-7: {:.2e}",
        value.abs() * f64::EPSILON / 2e-5,
        sweep.worst_large
    );
    vec![
        check(
            format!("{n_arrays} parameter arrays, {} entries checked, {} below 1e-8", sweep.checked, sweep.skipped),
            sweep.checked > 0 && sweep.skipped < sweep.checked,
        ),
        check("repeated evaluations are bit-identical", deterministic),
        check(format!("network worst rel-err {:.2e} at {} < 1e-3", sweep.worst, sweep.worst_at), sweep.worst < 1e-3),
        check(format!("loss worst rel-err {:.2e} at {} over {} output pixels < 1e-3", l.worst, l.worst_at, l.checked), l.worst < 1e-3),
        within(start, Duration::from_secs(300)),
    ]
}

// Criterion 3

fn shape_identity() -> Vec<Check> {
    let start = Instant::now();
    let cfg = ModelConfig { channels: 4, blocks: 2, heads: 2, shuffle: 4, ..Default::default() };
    let model = make_variant(&cfg).unwrap();
    model.params().randomize(5, 0.2).unwrap();
    let mut runner = TestRunner::new(PropConfig { cases: 16, failure_persistence: None, ..PropConfig::default() });
    let shapes = runner.run(&(1usize..23, 1usize..23, 1usize..3), |(h, w, n)| {
        let x = ImageTensor::new(Tensor::rand(0f32, 1., (n, 3, h, w), &Device::Cpu).unwrap()).unwrap();
        let out = model.forward(&x).unwrap();
        prop_assert_eq!(out.restored.dims4(), (n, 3, h, w));
        prop_assert_eq!(out.sr_image.unwrap().dims4(), (n, 3, h, w));
        Ok(())
    });
    let odd = model.forward(&ImageTensor::new(Tensor::rand(0f32, 1., (1, 3, 13, 7), &Device::Cpu).unwrap()).unwrap());

    let mut identity = true;
    for v in Variant::ALL {
        let m = make_variant(&ModelConfig { variant: v, ..cfg.clone() }).unwrap();
        m.params().randomize(6, 0.2).unwrap();
        m.params().zero_prefix("recon.out").unwrap();
        let x = ImageTensor::new(Tensor::rand(0f32, 1., (1, 3, 10, 9), &Device::Cpu).unwrap()).unwrap();
        identity &= m.forward(&x).unwrap().restored.to_f32_vec().unwrap() == x.to_f32_vec().unwrap();
    }
    let fresh = make_variant(&cfg).unwrap();
    let x = ImageTensor::new(Tensor::rand(0f32, 1., (2, 3, 8, 8), &Device::Cpu).unwrap()).unwrap();
    let fresh_identity = fresh.forward(&x).unwrap().restored.to_f32_vec().unwrap() == x.to_f32_vec().unwrap();

    let t = Tensor::randn(0f32, 1., (2, 3, 12, 8), &Device::Cpu).unwrap();
    let round = pixel_shuffle(&pixel_unshuffle(&t, 4).unwrap(), 4).unwrap();
    let bit_exact = flat(&round) == flat(&t);
    vec![
        check("shape preserved for 16 random (H, W, N)", shapes.is_ok()),
        check("13x7 input with s = 4 is padded and cropped", odd.map(|o| o.restored.dims4() == (1, 3, 13, 7)).unwrap_or(false)),
        check("zeroed final conv returns the input exactly, all variants", identity),
        check("freshly built model is the identity", fresh_identity),
        check("pixel unshuffle/shuffle round trip bit-exact", bit_exact),
        within(start, Duration::from_secs(60)),
    ]
}

// Criterion 4

fn attention_invariants() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Layout (N, heads, d, tokens).
    let (n, c, h, w) = (2, 4, 3, 5);
    let q = t4(rand_vec(&mut rng, n * c * h * w, -2.0, 2.0), (n, c, h, w));
    let k = t4(rand_vec(&mut rng, n * c * h * w, -2.0, 2.0), (n, c, h, w));
    let v = t4(rand_vec(&mut rng, n * c * h * w, -2.0, 2.0), (n, c, h, w));
    let alpha = Tensor::new(&[0.5f64, 1.0, 2.0, 0.7], &Device::Cpu).unwrap();
    let (_, attn) = transposed_attention_with_map(&q, &k, &v, &alpha).unwrap();
    let rows = attn.sum(3).unwrap();
    let worst_row = flat(&rows).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);

    let (q1, k1, v1) = (q.reshape((n, 12, 1, 5)).unwrap(), k.reshape((n, 12, 1, 5)).unwrap(), v.reshape((n, 12, 1, 5)).unwrap());
    let alpha12 = Tensor::ones(12, DType::F64, &Device::Cpu).unwrap();
    let (single, _) = transposed_attention_with_map(&q1, &k1, &v1, &alpha12).unwrap();
    let single_diff = max_abs_diff(&flat(&single), &flat(&v1));

    // One head, two rows, two tokens: q = k = I, so row r has logits
    // (1, 0) or (0, 1) and weights (e, 1) / (e + 1).
    let eye = t4(vec![1., 0., 0., 1.], (1, 1, 2, 2));
    let vv = t4(vec![1., 2., 3., 4.], (1, 1, 2, 2));
    let one = Tensor::new(&[1f64], &Device::Cpu).unwrap();
    let (out, _) = transposed_attention_with_map(&eye, &eye, &vv, &one).unwrap();
    let e = 1f64.exp();
    let (a, b) = (e / (e + 1.0), 1.0 / (e + 1.0));
    let hand = [a + 3.0 * b, 2.0 * a + 4.0 * b, b + 3.0 * a, 2.0 * b + 4.0 * a];
    let hand_diff = max_abs_diff(&flat(&out), &hand);
    vec![
        check(format!("softmax rows sum to 1 (worst {worst_row:.1e}) within 1e-5"), worst_row <= 1e-5),
        check(format!("single-channel heads return v (diff {single_diff:.1e})"), single_diff < 1e-12),
        check(format!("2x2 hand case (diff {hand_diff:.1e}) within 1e-6"), hand_diff < 1e-6),
    ]
}

// Criterion 5: scalar replays driven only by parameter paths.

#[derive(Clone)]
struct Map {
    c: usize,
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Map {
    fn of(t: &Tensor) -> Self {
        let (_, c, h, w) = t.dims4().unwrap();
        Self { c, h, w, v: flat(t) }
    }
    fn tensor(&self) -> Tensor {
        t4(self.v.clone(), (1, self.c, self.h, self.w))
    }
    fn channels(&self, from: usize, n: usize) -> Map {
        let hw = self.h * self.w;
        Map { c: n, v: self.v[from * hw..(from + n) * hw].to_vec(), ..self.clone() }
    }
    fn zip(&self, o: &Map, f: impl Fn(f64, f64) -> f64) -> Map {
        Map { v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect(), ..self.clone() }
    }
}

fn param(store: &ParamStore, path: &str) -> Vec<f64> {
    flat(store.get(path).unwrap_or_else(|| panic!("no parameter {path}")).as_tensor())
}

fn pw(store: &ParamStore, path: &str, x: &Map) -> Map {
    let w = param(store, &format!("{path}.weight"));
    let b = param(store, &format!("{path}.bias"));
    let hw = x.h * x.w;
    let co = b.len();
    let mut v = vec![0.0; co * hw];
    for o in 0..co {
        for p in 0..hw {
            v[o * hw + p] = b[o] + (0..x.c).map(|i| w[o * x.c + i] * x.v[i * hw + p]).sum::<f64>();
        }
    }
    Map { c: co, v, ..x.clone() }
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    (if n == 1 { 0 } else if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i }) as usize
}

fn dw3(store: &ParamStore, path: &str, x: &Map) -> Map {
    let w = param(store, &format!("{path}.weight"));
    let b = param(store, &format!("{path}.bias"));
    let mut v = vec![0.0; x.v.len()];
    for c in 0..x.c {
        for i in 0..x.h {
            for j in 0..x.w {
                let mut acc = b[c];
                for di in 0..3 {
                    for dj in 0..3 {
                        let si = mirror(i as isize + di as isize - 1, x.h);
                        let sj = mirror(j as isize + dj as isize - 1, x.w);
                        acc += w[c * 9 + di * 3 + dj] * x.v[(c * x.h + si) * x.w + sj];
                    }
                }
                v[(c * x.h + i) * x.w + j] = acc;
            }
        }
    }
    Map { v, ..x.clone() }
}

fn attend_heads(q: &Map, k: &Map, v: &Map, heads: usize, alpha: &[f64]) -> Map {
    let d = q.c / heads;
    let n = q.h * q.w;
    let norm = |m: &[f64], r: usize| m[r * n..(r + 1) * n].iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    let mut out = Vec::with_capacity(q.v.len());
    for h in 0..heads {
        let base = h * d * n;
        let (qh, kh, vh) = (&q.v[base..base + d * n], &k.v[base..base + d * n], &v.v[base..base + d * n]);
        for r in 0..d {
            let logits: Vec<f64> = (0..d)
                .map(|s| (0..n).map(|t| qh[r * n + t] * kh[s * n + t]).sum::<f64>() / (norm(qh, r) * norm(kh, s)) / alpha[h])
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..n {
                out.push((0..d).map(|s| e[s] / z * vh[s * n + t]).sum());
            }
        }
    }
    Map { v: out, ..q.clone() }
}

fn gelu(x: f64) -> f64 {
    // Abramowitz and Stegun 7.1.26.
    let z = x.abs() / 2f64.sqrt();
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = ((((1.061405429 * t - 1.453152027) * t + 1.421413741) * t - 0.284496736) * t + 0.254829592) * t;
    let erf = x.signum() * (1.0 - poly * (-z * z).exp());
    0.5 * x * (1.0 + erf)
}

fn ndpa_replay(store: &ParamStore, x: &Map, guide: &Map, heads: usize) -> Map {
    let c = x.c;
    let qkv = dw3(store, "a.qkv_dw", &pw(store, "a.qkv", x));
    let kv = dw3(store, "a.ndp_kv_dw", &pw(store, "a.ndp_kv", guide));
    let alpha = param(store, "a.temperature");
    let inner = attend_heads(&qkv.channels(0, c), &kv.channels(0, c), &kv.channels(c, c), heads, &alpha);
    let outer = attend_heads(&inner, &qkv.channels(c, c), &qkv.channels(2 * c, c), heads, &alpha);
    pw(store, "a.project_out", &outer)
}

fn ndpn_replay(store: &ParamStore, x: &Map, guide: &Map, hidden: usize) -> Map {
    let z = dw3(store, "f.dw", &pw(store, "f.project_in", x));
    let mut cat = z.channels(0, hidden);
    cat.c += guide.c;
    cat.v.extend(&guide.v);
    let fused = pw(store, "f.fusion", &cat);
    let gate = fused.zip(&z.channels(hidden, hidden), |a, b| a * gelu(b));
    let prod = dw3(store, "f.dw_mid", &gate).zip(&pw(store, "f.fusion_proj", &fused), |a, b| a * b);
    pw(store, "f.project_out", &prod)
}

fn replays() -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (c, h, w, heads) = (4, 3, 5, 2);
    let x = Map::of(&t4(rand_vec(&mut rng, c * h * w, -1.0, 1.0), (1, c, h, w)));
    let g = Map::of(&t4(rand_vec(&mut rng, c * h * w, 0.0, 1.0), (1, c, h, w)));

    let mut store = ParamStore::new(DType::F64, 7);
    let attn = Ndpa::new(&mut store, "a", c, heads, true, 1.0).unwrap();
    store.randomize(8, 0.5).unwrap();
    let got = flat(&attn.forward(&x.tensor(), Some(&g.tensor())).unwrap());
    let attn_diff = max_abs_diff(&got, &ndpa_replay(&store, &x, &g, heads).v);

    let mut store = ParamStore::new(DType::F64, 9);
    let ffn = Ndpn::new(&mut store, "f", c, 2.0, true).unwrap();
    store.randomize(10, 0.5).unwrap();
    let got = flat(&ffn.forward(&x.tensor(), Some(&g.tensor())).unwrap());
    let ffn_diff = max_abs_diff(&got, &ndpn_replay(&store, &x, &g, ffn.hidden()).v);
    vec![
        check(format!("NDPA replay max diff {attn_diff:.1e} < 1e-5"), attn_diff < 1e-5),
        check(format!("NDPN replay max diff {ffn_diff:.1e} < 1e-5"), ffn_diff < 1e-5),
    ]
}

// Criterion 6

fn overfit() -> Vec<Check> {
    let start = Instant::now();
    let model = ModelConfig { channels: 8, blocks: 4, heads: 2, shuffle: 4, ..Default::default() };
    let train = TrainConfig {
        total_steps: 500,
        lr_init: OVERFIT_LR_INIT,
        checkpoint_interval: 0,
        log_every: 0,
        ..Default::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let r = overfit_synthetic(&model, &train, &LossConfig::default(), 2, 64, dir.path()).unwrap();
    vec![
        check(format!("training PSNR {:.2} dB (from {:.2}) >= 35", r.final_psnr, r.initial_psnr), r.final_psnr >= 35.0),
        check(format!("loss reduction {:.2}% >= 95%", 100.0 * r.loss_reduction), r.loss_reduction >= 0.95),
        within(start, Duration::from_secs(600)),
    ]
}

// Criterion 7

fn params_of(variant: Variant, shared: bool) -> usize {
    let cfg = ModelConfig { variant, shared_mixer: shared, ..Default::default() };
    count_params(&make_variant(&cfg).unwrap()).total
}

fn parameter_accounting() -> Vec<Check> {
    let p = |v| params_of(v, true);
    let (full, a, b, c, d, e) = (p(Variant::Full), p(Variant::A), p(Variant::B), p(Variant::C), p(Variant::D), p(Variant::E));
    let unshared = params_of(Variant::Full, false);
    let dev = |n: usize| 100.0 * (n as f64 / 0.7430e6 - 1.0);
    println!(
        "    calibration: default {:.4}M vs reference 0.7430M ({:+.1}%{}); per-block mixers {:.4}M ({:+.1}%)",
        full as f64 / 1e6,
        dev(full),
        if dev(full).abs() > 25.0 { ", outside the expected 25% band" } else { "" },
        unshared as f64 / 1e6,
        dev(unshared)
    );
    println!("    variants: a {a}, b {b}, c {c}, d {d}, e {e}, full {full}");
    vec![
        check("params(d) == params(full)", d == full),
        check("params(a) == params(e)", a == e),
        check("params(a) < params(full)", a < full),
        check("params(a) < params(c) < params(full)", a < c && c < full),
    ]
}

// Criterion 8

fn flop_accounting() -> Vec<Check> {
    let mut ledger_ok = true;
    for v in Variant::ALL {
        for shared in [true, false] {
            let cfg = ModelConfig { variant: v, shared_mixer: shared, ..Default::default() };
            let l = count_flops(&cfg, 64, 64).unwrap();
            ledger_ok &= l.total_flops() == l.rows.iter().map(|r| r.flops).sum::<u64>();
            ledger_ok &= l.total_params() as usize == count_params(&make_variant(&cfg).unwrap()).total;
        }
    }
    let cfg = ModelConfig::default();
    let conv = |s| count_flops(&cfg, s, s).unwrap().flops_of(OpKind::Conv);
    let ratio = conv(512) as f64 / conv(256) as f64;
    let big = count_flops(&cfg, 1024, 1024).unwrap().total_flops() as f64 / 1e9;
    println!("    calibration: {big:.2}G at 1024x1024 vs reference 32.56G ({:+.1}%), 2 x MAC convention", 100.0 * (big / 32.56 - 1.0));
    // 2 * k^2 * Cin * Cout * H * W for a dense 3x3 conv 3 -> 16 on 64 x 64.
    let single = 2 * 9 * 3 * 16 * 64 * 64;
    let spec = uhdpromer_core::nn::ConvSpec::dense(3, 16, 3);
    let from_spec = 2 * spec.macs_per_output_pixel() * 64 * 64;
    vec![
        check(format!("single dense conv = {from_spec} (3,538,944)"), from_spec == single && single == 3_538_944),
        check("pointwise 16->64 = 1088 and depthwise 3x3 on 48 = 480 params", {
            uhdpromer_core::nn::ConvSpec::pointwise(16, 64).num_params() == 1088
                && uhdpromer_core::nn::ConvSpec::depthwise(48, 3).num_params() == 480
        }),
        check("ledger totals equal row sums and the built parameter count", ledger_ok),
        check(format!("conv FLOPs 512^2 / 256^2 = {ratio}"), ratio == 4.0),
        check("indivisible size is rejected", count_flops(&cfg, 1001, 1024).is_err()),
    ]
}

// Criterion 9

fn gaussian(size: usize, sigma: f64) -> Vec<f64> {
    let r = (size / 2) as f64;
    let g: Vec<f64> = (0..size).map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Direct 2-D windowed SSIM, one window position at a time.
fn naive_ssim(x: &[f64], y: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let g = gaussian(11, 1.5);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for i in 0..=h - 11 {
            for j in 0..=w - 11 {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for a in 0..11 {
                    for b in 0..11 {
                        let k = g[a] * g[b];
                        let p = (ch * h + i + a) * w + j + b;
                        mx += k * x[p];
                        my += k * y[p];
                        xx += k * x[p] * x[p];
                        yy += k * y[p] * y[p];
                        xy += k * x[p] * y[p];
                    }
                }
                let (vx, vy, cov) = (xx - mx * mx, yy - my * my, xy - mx * my);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}

fn metric_correctness() -> Vec<Check> {
    let zeros = Tensor::zeros((1, 3, 16, 16), DType::F64, &Device::Cpu).unwrap();
    let p20 = psnr(&(&zeros + 0.1).unwrap(), &zeros, 1.0).unwrap();
    let p6 = psnr(&(&zeros + 0.5).unwrap(), &zeros, 1.0).unwrap();
    let inf = psnr(&zeros, &zeros, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (c, h, w) = (3, 24, 19);
    let xv = rand_vec(&mut rng, c * h * w, 0.0, 1.0);
    let yv: Vec<f64> = xv.iter().map(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0)).collect();
    let (x, y) = (t4(xv.clone(), (1, c, h, w)), t4(yv.clone(), (1, c, h, w)));
    let same = ssim(&x, &x, SsimParams::default()).unwrap();
    let ones = (&zeros + 1.0).unwrap();
    let constant = ssim(&zeros, &ones, SsimParams::default()).unwrap();
    let c1 = 1e-4;
    let ours = ssim(&x, &y, SsimParams::default()).unwrap();
    let naive = naive_ssim(&xv, &yv, c, h, w);
    vec![
        check(format!("PSNR at MSE 0.01 = {p20:.6} (20.0)"), (p20 - 20.0).abs() < 1e-9),
        check(format!("PSNR at MSE 0.25 = {p6:.6} (6.0206 +- 1e-3)"), (p6 - 6.0206).abs() < 1e-3),
        check("PSNR of identical images is +inf", inf == f64::INFINITY),
        check(format!("SSIM identical = {same}"), same == 1.0),
        check(format!("SSIM constant 0 vs 1 = {constant:.6e} (C1/(1+C1) = {:.6e})", c1 / (1.0 + c1)), (constant - c1 / (1.0 + c1)).abs() < 1e-12),
        check(format!("SSIM vs naive window loops: diff {:.1e} < 1e-5", (ours - naive).abs()), (ours - naive).abs() < 1e-5),
    ]
}

// Criterion 10

fn schedule_checkpoint() -> Vec<Check> {
    let (lr0, lr1) = (5e-4, 1e-7);
    let first = cosine_lr(0, 1000, lr0, lr1).unwrap();
    let last = cosine_lr(1000, 1000, lr0, lr1).unwrap();
    let mid = cosine_lr(500, 1000, lr0, lr1).unwrap();
    let closed = lr1 + 0.5 * (lr0 - lr1) * (1.0 + (std::f64::consts::PI * 0.5).cos());
    println!(
        "    midpoint {mid:.6e}; closed form (lr_init + lr_min) / 2 = {:.6e}; quoted literal 2.50005e-4 differs by {:.1e} relative",
        (lr0 + lr1) / 2.0,
        (mid - 2.50005e-4).abs() / 2.50005e-4
    );

    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig { channels: 4, blocks: 1, heads: 2, shuffle: 2, ..Default::default() };
    let model = make_variant(&cfg).unwrap();
    model.params().randomize(3, 0.3).unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&model, &AdamW::new(AdamWConfig::default()), 5, &path).unwrap();
    let ck = load_checkpoint(&path, Some(&cfg)).unwrap();
    let bit_exact = model.params().iter().all(|(p, v)| {
        let a = v.as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = ck.model.params().get(p).unwrap().as_tensor().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    });

    let data = Dataset::synthetic(3, 8, 1).unwrap();
    let train = TrainConfig { total_steps: 6, patch_size: 8, checkpoint_interval: 3, log_every: 0, ..Default::default() };
    let loss = LossConfig::default();
    let whole = fit(&cfg, &train, &loss, &data, &dir.path().join("whole"), None).unwrap();
    let resumed = fit(&cfg, &train, &loss, &data, &dir.path().join("resumed"), Some(&whole.checkpoints[0])).unwrap();
    let lrs = |h: &[uhdpromer_core::train::StepStats]| h.iter().map(|s| (s.step, s.lr, s.loss)).collect::<Vec<_>>();
    let same_tail = lrs(&resumed.history) == lrs(&whole.history[3..]);
    let same_params = resumed.model.params().checksum().unwrap() == whole.model.params().checksum().unwrap();
    vec![
        check(format!("lr(0) = {first:e} exactly 5e-4"), first == lr0),
        check(format!("lr(T) = {last:e} exactly 1e-7"), last == lr1),
        check("midpoint equals the cosine closed form", (mid - closed).abs() < 1e-15 && (mid - (lr0 + lr1) / 2.0).abs() < 1e-15),
        check("checkpoint round trip is bit-exact", bit_exact && ck.step == 5),
        check("resume at step 3 matches the uninterrupted run in lr, loss and final weights", same_tail && same_params),
    ]
}

// Criterion 11

fn ablation_factory() -> Vec<Check> {
    let base = ModelConfig::default();
    let mut smoke = Vec::new();
    for v in Variant::ALL {
        let r = smoke_step(&ModelConfig { variant: v, ..base.clone() }, 16);
        smoke.push(check(format!("variant {v} builds and runs forward + backward"), r.is_ok()));
    }
    let (table, gates) = ablation_table(&base, None).unwrap();
    let column = ["0.5322M", "0.7348M", "0.5404M", "0.7430M", "0.5322M", "0.7430M"];
    let mut positions = Vec::new();
    for v in ["a ", "b ", "c ", "d ", "e ", "full "] {
        positions.push(table.lines().find(|l| l.starts_with(v)).unwrap_or("").to_string());
    }
    let column_ok = positions.iter().zip(column).all(|(l, r)| l.contains(r));
    smoke.extend([
        check("table rows carry the reference column 0.5322/0.7348/0.5404/0.7430/0.5322/0.7430", column_ok),
        check("table has `d == full params: PASS`", table.contains("d == full params: PASS")),
        check("parameter relations hold", gates),
    ]);
    smoke
}

fn main() {
    let criteria: [(&str, fn() -> Vec<Check>); 11] = [
        ("NDP oracle equivalence", ndp_oracle),
        ("gradient correctness", gradient_check),
        ("shape and identity", shape_identity),
        ("attention invariants", attention_invariants),
        ("attention and feed-forward replay oracles", replays),
        ("overfit sanity", overfit),
        ("parameter accounting", parameter_accounting),
        ("FLOP accounting", flop_accounting),
        ("metric correctness", metric_correctness),
        ("schedule and checkpoint", schedule_checkpoint),
        ("ablation factory", ablation_factory),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        let start = Instant::now();
        let checks = match std::panic::catch_unwind(f) {
            Ok(c) => c,
            Err(e) => {
                let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
                vec![check(format!("panicked: {}", msg.unwrap_or_default()), false)]
            }
        };
        let ok = checks.iter().all(|(_, p)| *p);
        for (what, pass) in &checks {
            println!("    [{}] {what}", if *pass { "ok" } else { "FAIL" });
        }
        println!(
            "criterion {n:>2} {name}: {} ({:.1}s)",
            if ok { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
        if !ok {
            failed.push(n);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
