//! Acceptance suite: the release gate for the whole workspace.
//!
//! Each test exercises one pinned contract at its stated tolerance and prints
//! one `ACCEPTANCE <n> (<title>): PASS/FAIL` line. Run with
//! `cargo test -p repact-cli --test acceptance -- --nocapture` to see them.
//!
//! The desk-scale training criteria (8–11) share one training matrix:
//! 3 seeds × {hardswish, repact_i} at 10k-train/2k-test, 5 epochs, plus small
//! gated and norm-variant runs, all on the deterministic synthetic dataset.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repact::data::synth;
use repact::gradcheck::{grad_check, GradCheckOptions};
use repact::layers::{Mode, RepActParams, RepActVariant, DEFAULT_BRANCHES};
use repact::model::{ActivationKind, ConvBlockSpec, ModelSpec, TinyCnn};
use repact::piecewise::{PiecewisePoly, PwEval};
use repact::tensor::Tensor;
use repact::train::{
    self, ConvBlockConfig, DatasetConfig, DatasetKind, ExperimentConfig, LrKind, LrSchedule,
    ModelConfig, TrainOutput,
};

/// Realized baseline mean over seeds {0,1,2} on this dataset and config was
/// 87.00 top-1 (87.55 / 86.60 / 86.85). Asserted floor leaves 2 points of
/// slack for cross-machine float drift; bit determinism is only guaranteed
/// per build.
const PINNED_BASELINE_FLOOR: f64 = 85.0;
/// Non-inferiority margin in accuracy points.
const MARGIN: f64 = 0.5;
const DESK_SEEDS: [u64; 3] = [0, 1, 2];
const DESK_EPOCHS: usize = 5;
const RUN_BUDGET_SECONDS: f64 = 600.0;

fn criterion(n: u32, title: &str, ok: bool, detail: &str) {
    println!(
        "ACCEPTANCE {n} ({title}): {}",
        if ok { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {n} ({title}): {detail}");
}

fn random_layer(variant: RepActVariant, r: &mut ChaCha8Rng) -> RepActParams<f64> {
    let mut layer = RepActParams::init(variant, &DEFAULT_BRANCHES).unwrap();
    layer.alphas = (0..4).map(|_| r.gen_range(-2.0..2.0)).collect();
    layer.prelu_slope = r.gen_range(-1.0..1.0);
    layer
}

// ---------------------------------------------------------------------------
// 1. fusion equivalence, both widths
// ---------------------------------------------------------------------------

#[test]
fn acceptance_01_fusion_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst64 = 0.0f64;
    let mut worst32 = 0.0f64;
    for _ in 0..1000 {
        let layer = random_layer(RepActVariant::I, &mut rng);
        let fused = layer.fuse().unwrap();
        let ev64 = PwEval::<f64>::new(&fused);

        let layer32 = RepActParams::<f32> {
            alphas: layer.alphas.iter().map(|&a| a as f32).collect(),
            prelu_slope: layer.prelu_slope as f32,
            variant: layer.variant,
            bn: None,
            branches: layer.branches.clone(),
        };
        let ev32 = PwEval::<f32>::new(&layer32.fuse().unwrap());

        let xs: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let x64 = Tensor::new(vec![xs.len()], xs.clone()).unwrap();
        let multi64 = layer.forward_inference(&x64).unwrap();
        for (&x, &m) in xs.iter().zip(multi64.data()) {
            worst64 = worst64.max((m - ev64.eval(x)).abs());
        }
        let x32 = Tensor::new(vec![xs.len()], xs.iter().map(|&v| v as f32).collect()).unwrap();
        let multi32 = layer32.forward_inference(&x32).unwrap();
        for (&x, &m) in x32.data().iter().zip(multi32.data()) {
            worst32 = worst32.max((m as f64 - ev32.eval(x) as f64).abs());
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    criterion(
        1,
        "fusion equivalence 1000 draws x 10^4 inputs",
        worst64 <= 1e-12 && worst32 <= 1e-5 && elapsed < 30.0,
        &format!("worst64 {worst64:.3e} (<=1e-12), worst32 {worst32:.3e} (<=1e-5), {elapsed:.1}s (<30s)"),
    );
}

// ---------------------------------------------------------------------------
// 2. gated variant degrades to the plain form
// ---------------------------------------------------------------------------

#[test]
fn acceptance_02_softmax_gate_degradation() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut coefficients_equal = true;
    let mut sums_ok = true;
    for _ in 0..1000 {
        let gated = random_layer(RepActVariant::IiSoftmax, &mut rng);
        let eff = gated.effective_alphas().unwrap();
        sums_ok &= (eff.iter().sum::<f64>() - 1.0).abs() <= 1e-6;
        let eff32: f32 = gated
            .effective_alphas()
            .unwrap()
            .iter()
            .map(|&a| a as f32)
            .sum();
        sums_ok &= (eff32 - 1.0).abs() <= 1e-6;

        let plain = RepActParams::<f64> {
            alphas: eff,
            variant: RepActVariant::I,
            bn: None,
            prelu_slope: gated.prelu_slope,
            branches: gated.branches.clone(),
        };
        let a = gated.fuse().unwrap();
        let b = plain.fuse().unwrap();
        coefficients_equal &= a.breakpoints() == b.breakpoints();
        for (sa, sb) in a.segments().iter().zip(b.segments()) {
            coefficients_equal &= sa == sb;
        }
    }
    criterion(
        2,
        "softmax gate fuses identically to plain form of gated weights",
        coefficients_equal && sums_ok,
        &format!("coefficients_equal={coefficients_equal}, weight sums within 1e-6: {sums_ok}"),
    );
}

// ---------------------------------------------------------------------------
// 3. norm folding
// ---------------------------------------------------------------------------

#[test]
fn acceptance_03_norm_folding() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let mut layer = random_layer(RepActVariant::IiiBn, &mut rng);
        {
            let bn = layer.bn.as_mut().unwrap();
            bn.gamma = rng.gen_range(-2.0..2.0);
            bn.beta = rng.gen_range(-2.0..2.0);
            bn.running_mean = rng.gen_range(-5.0..5.0);
            bn.running_var = rng.gen_range(0.01..25.0);
        }
        let fused = layer.fuse().unwrap();
        let xs: Vec<f64> = (0..100).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let x = Tensor::new(vec![xs.len()], xs.clone()).unwrap();
        let forward = layer.forward_inference(&x).unwrap();
        for (&xi, &f) in xs.iter().zip(forward.data()) {
            worst = worst.max((f - fused.eval(xi).unwrap()).abs());
        }
    }

    // Hand example: γ=2, β=1, μ=0.5, σ²+eps=4 folds to ε=1, β′=0.5 exactly.
    let mut layer = RepActParams::<f64>::init(RepActVariant::IiiBn, &DEFAULT_BRANCHES).unwrap();
    {
        let bn = layer.bn.as_mut().unwrap();
        bn.gamma = 2.0;
        bn.beta = 1.0;
        bn.running_mean = 0.5;
        bn.running_var = 4.0 - bn.eps;
    }
    let bn = layer.bn.as_ref().unwrap();
    let hand_ok = bn.scale().unwrap() == 1.0 && bn.folded_offset().unwrap() == 0.5;
    let fused = layer.fuse().unwrap();
    let plain = RepActParams::<f64> {
        bn: None,
        variant: RepActVariant::I,
        ..layer.clone()
    }
    .fuse()
    .unwrap();
    let offsets_ok = fused
        .segments()
        .iter()
        .zip(plain.segments())
        .all(|(a, b)| a.c2 == b.c2 && a.c1 == b.c1 && a.c0 == b.c0 + 0.5);

    criterion(
        3,
        "single-channel norm folds into weights and offset",
        worst <= 1e-10 && hand_ok && offsets_ok,
        &format!("worst eval-mode gap {worst:.3e} (<=1e-10), hand example exact: {hand_ok}, offsets exact: {offsets_ok}"),
    );
}

// ---------------------------------------------------------------------------
// 4. closed-form fused coefficients
// ---------------------------------------------------------------------------

#[test]
fn acceptance_04_closed_form_coefficients() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let mut exact = true;
    for _ in 0..100 {
        let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t: f64 = rng.gen_range(-1.0..1.0);
        let prelu = PiecewisePoly::prelu(t).unwrap();
        let polys = [
            PiecewisePoly::identity(),
            PiecewisePoly::relu(),
            prelu,
            PiecewisePoly::hardswish(),
        ];
        let terms: Vec<(f64, &PiecewisePoly)> = a.iter().copied().zip(polys.iter()).collect();
        let fused = PiecewisePoly::weighted_sum(&terms).unwrap();
        let s = fused.segments();
        exact &= fused.breakpoints() == [-3.0, 0.0, 3.0];
        exact &= s[3].c1 == a[0] + a[1] + a[2] + a[3] && s[3].c2 == 0.0;
        exact &= s[2].c2 == a[3] * (1.0 / 6.0);
        exact &= s[2].c1 == a[0] + a[1] + a[2] + a[3] * 0.5;
        exact &= s[1].c2 == a[3] * (1.0 / 6.0);
        exact &= s[1].c1 == a[0] + a[2] * t + a[3] * 0.5;
        exact &= s[0].c1 == a[0] + a[2] * t && s[0].c2 == 0.0;
        exact &= s.iter().all(|seg| seg.c0 == 0.0);
    }
    criterion(
        4,
        "fused segment coefficients equal their closed forms exactly",
        exact,
        "at least one coefficient deviated from its closed form",
    );
}

// ---------------------------------------------------------------------------
// 5. gradient fidelity through a 4-block CNN, every variant
// ---------------------------------------------------------------------------

fn gradcheck_model_spec(activation: ActivationKind) -> ModelSpec {
    let block = |out_channels: usize, stride: usize| ConvBlockSpec {
        out_channels,
        kernel: 3,
        stride,
        pad: 1,
    };
    ModelSpec {
        input: [1, 28, 28],
        classes: 10,
        blocks: vec![block(4, 1), block(6, 2), block(8, 2), block(8, 2)],
        activation,
    }
}

#[test]
fn acceptance_05_gradient_fidelity() {
    let start = Instant::now();
    let mut worst_overall: f64 = 0.0;
    let mut detail = String::new();
    for activation in [
        ActivationKind::RepactI,
        ActivationKind::RepactIi,
        ActivationKind::RepactIii,
    ] {
        let mut model = TinyCnn::<f64>::init(gradcheck_model_spec(activation), 5).unwrap();
        let infos = model.param_infos();
        let params: Vec<(String, Tensor<f64>)> = infos
            .iter()
            .map(|p| (p.name.clone(), model.param_value(p.id)))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(105);
        let x = Tensor::<f64>::from_fn(&[2, 1, 28, 28], |_| rng.gen_range(-1.0..1.0)).unwrap();
        let labels = vec![3usize, 7];
        let report = grad_check(
            |tape, vars| {
                let x_var = tape.constant(x.clone());
                let logits = model.build_logits(tape, vars, x_var, Mode::Train)?;
                tape.softmax_cross_entropy(logits, &labels, 0.0)
            },
            &params,
            &GradCheckOptions::default(),
        )
        .unwrap();
        let worst = report.max_rel_err();
        worst_overall = worst_overall.max(worst);
        detail.push_str(&format!("{activation:?}: {worst:.3e}; "));
    }
    let elapsed = start.elapsed().as_secs_f64();
    criterion(
        5,
        "finite differences confirm every parameter gradient (h=1e-3)",
        worst_overall <= 1e-4 && elapsed < 300.0,
        &format!("{detail}elapsed {elapsed:.1}s (<300s)"),
    );
}

// ---------------------------------------------------------------------------
// 6. gradient decoupling by region
// ---------------------------------------------------------------------------

#[test]
fn acceptance_06_gradient_decoupling() {
    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let layer = random_layer(RepActVariant::I, &mut rng);
    let upstream = Tensor::from_fn(&[128], |i| ((i as f64) * 0.61).cos()).unwrap();

    let positive = Tensor::from_fn(&[128], |_| rng.gen_range(0.05..9.0)).unwrap();
    let g_pos = layer.backward(&positive, &upstream, Mode::Eval).unwrap();
    let identity_equals_relu = g_pos.alphas[0] == g_pos.alphas[1];

    let far_negative = Tensor::from_fn(&[128], |_| rng.gen_range(-9.0..-3.05)).unwrap();
    let g_neg = layer.backward(&far_negative, &upstream, Mode::Eval).unwrap();
    let dead_branches_zero = g_neg.alphas[1] == 0.0 && g_neg.alphas[3] == 0.0;

    criterion(
        6,
        "branch-weight gradients decouple by input region",
        identity_equals_relu && dead_branches_zero,
        &format!(
            "positive-input identity/relu grads {} vs {}; negative-side relu/hswish grads {} / {}",
            g_pos.alphas[0], g_pos.alphas[1], g_neg.alphas[1], g_neg.alphas[3]
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. fused op-count overhead versus the densest branch
// ---------------------------------------------------------------------------

#[test]
fn acceptance_07_op_count_overhead() {
    let hs = PiecewisePoly::hardswish().op_count();
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let mut ok = true;
    let mut worst = (0i64, 0i64, 0i64);
    for i in 0..100 {
        let layer = if i == 0 {
            RepActParams::<f64>::init(RepActVariant::I, &DEFAULT_BRANCHES).unwrap()
        } else {
            random_layer(RepActVariant::I, &mut rng)
        };
        let cost = layer.fuse().unwrap().op_count();
        let d = (
            cost.compares as i64 - hs.compares as i64,
            cost.mults as i64 - hs.mults as i64,
            cost.adds as i64 - hs.adds as i64,
        );
        worst = (worst.0.max(d.0), worst.1.max(d.1), worst.2.max(d.2));
        ok &= d.0 <= 1 && d.1 <= 2;
    }
    criterion(
        7,
        "fused cost within 1 compare and 2 multiplies of hardswish",
        ok,
        &format!("worst deltas over hardswish: {worst:?}"),
    );
}

// ---------------------------------------------------------------------------
// desk-scale training matrix shared by criteria 8-11
// ---------------------------------------------------------------------------

struct DeskRun {
    activation: ActivationKind,
    config: ExperimentConfig,
    output: TrainOutput,
    seconds: f64,
}

struct Matrix {
    _data_dir: tempfile::TempDir,
    desk: Vec<DeskRun>,
    extra: Vec<DeskRun>,
}

fn desk_config(dir: &std::path::Path, activation: ActivationKind, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetConfig {
            kind: DatasetKind::Mnist,
            dir: dir.to_path_buf(),
            train_subset: 10_000,
            test_subset: 2_000,
        },
        model: ModelConfig {
            blocks: vec![
                ConvBlockConfig { out_channels: 8, kernel: 3, stride: 1, pad: 1 },
                ConvBlockConfig { out_channels: 16, kernel: 3, stride: 2, pad: 1 },
                ConvBlockConfig { out_channels: 32, kernel: 3, stride: 2, pad: 1 },
                ConvBlockConfig { out_channels: 64, kernel: 3, stride: 2, pad: 1 },
            ],
        },
        activation,
        epochs: DESK_EPOCHS,
        batch_size: 64,
        lr: LrSchedule {
            initial: 0.05,
            kind: LrKind::Cosine,
            step_size: None,
            gamma: None,
        },
        alpha_lr: Some(0.005),
        seed,
        label_smoothing: 0.0,
        log_cadence: 0,
    }
}

fn matrix() -> &'static Matrix {
    static MATRIX: OnceLock<Matrix> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let data_dir = tempfile::tempdir().unwrap();
        synth::write_mnist_format(data_dir.path(), 10_000, 2_000, 0).unwrap();
        let mut desk = Vec::new();
        for activation in [ActivationKind::Hardswish, ActivationKind::RepactI] {
            for seed in DESK_SEEDS {
                let config = desk_config(data_dir.path(), activation, seed);
                let start = Instant::now();
                let output = train::train(&config).unwrap();
                desk.push(DeskRun {
                    activation,
                    config,
                    output,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
        }
        let mut extra = Vec::new();
        for activation in [ActivationKind::RepactIi, ActivationKind::RepactIii] {
            let mut config = desk_config(data_dir.path(), activation, 0);
            config.dataset.train_subset = 2_000;
            config.dataset.test_subset = 500;
            config.epochs = 2;
            let start = Instant::now();
            let output = train::train(&config).unwrap();
            extra.push(DeskRun {
                activation,
                config,
                output,
                seconds: start.elapsed().as_secs_f64(),
            });
        }
        Matrix {
            _data_dir: data_dir,
            desk,
            extra,
        }
    })
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// 8. fused deployment invariance on every trained checkpoint
// ---------------------------------------------------------------------------

#[test]
fn acceptance_08_fused_deployment_invariance() {
    let m = matrix();
    let mut ok = true;
    let mut detail = String::new();
    for run in m.desk.iter().chain(&m.extra) {
        let dataset = run.config.load_dataset().unwrap();
        let unfused = train::predict_logits(&run.output.model, &dataset.test, false).unwrap();
        let fused = train::predict_logits(&run.output.model, &dataset.test, true).unwrap();
        let gap = unfused.max_abs_diff(&fused);
        let classes_match = train::argmax_rows(&unfused) == train::argmax_rows(&fused);
        ok &= gap <= 1e-4 && classes_match;
        detail.push_str(&format!(
            "{:?}/seed{}: gap {gap:.2e} match {classes_match}; ",
            run.activation, run.config.seed
        ));
    }
    criterion(
        8,
        "fused and multi-branch deployment agree on every prediction",
        ok,
        &detail,
    );
}

// ---------------------------------------------------------------------------
// 9. desk-scale non-inferiority with a pinned baseline floor
// ---------------------------------------------------------------------------

#[test]
fn acceptance_09_desk_scale_non_inferiority() {
    let m = matrix();
    let baseline = mean(
        m.desk
            .iter()
            .filter(|r| r.activation == ActivationKind::Hardswish)
            .map(|r| r.output.final_test_top1),
    );
    let adaptive = mean(
        m.desk
            .iter()
            .filter(|r| r.activation == ActivationKind::RepactI)
            .map(|r| r.output.final_test_top1),
    );
    let slowest = m
        .desk
        .iter()
        .map(|r| r.seconds)
        .fold(0.0f64, f64::max);
    let ok = adaptive >= baseline - MARGIN
        && baseline >= PINNED_BASELINE_FLOOR
        && slowest < RUN_BUDGET_SECONDS;
    criterion(
        9,
        "desk-scale adaptive training is non-inferior to the fixed baseline",
        ok,
        &format!(
            "adaptive mean {adaptive:.2} vs baseline mean {baseline:.2} (margin {MARGIN}), \
             floor {PINNED_BASELINE_FLOOR}, slowest run {slowest:.0}s (<{RUN_BUDGET_SECONDS}s)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 10. the adaptive mechanism is live
// ---------------------------------------------------------------------------

#[test]
fn acceptance_10_adaptive_mechanism_liveness() {
    let m = matrix();
    let mut ok = true;
    let mut detail = String::new();
    for run in m
        .desk
        .iter()
        .filter(|r| r.activation == ActivationKind::RepactI)
    {
        let moved = (0..run.output.model.blocks.len()).any(|i| {
            run.output.model.repact_params(i).is_some_and(|p| {
                p.alphas
                    .iter()
                    .map(|&a| (a as f64 - 0.25).abs())
                    .sum::<f64>()
                    > 1e-3
            })
        });
        let layers = run.output.metrics.repact_layers.len();
        let rows = run.output.metrics.alphas.len();
        let rows_ok = rows == run.config.epochs * layers;

        // the emitted CSV has exactly that many data rows
        let dir = tempfile::tempdir().unwrap();
        run.output.metrics.write_csv(dir.path()).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("alpha.csv")).unwrap();
        let csv_rows = csv.trim().lines().count() - 1;
        let csv_ok = csv_rows == run.config.epochs * layers;

        ok &= moved && rows_ok && csv_ok;
        detail.push_str(&format!(
            "seed{}: moved {moved}, rows {rows} (want {}), csv rows {csv_rows}; ",
            run.config.seed,
            run.config.epochs * layers
        ));
    }
    criterion(
        10,
        "branch weights leave the initialisation and are fully logged",
        ok,
        &detail,
    );
}

// ---------------------------------------------------------------------------
// 11. bit-level determinism of a repeated run
// ---------------------------------------------------------------------------

#[test]
fn acceptance_11_bitwise_determinism() {
    let m = matrix();
    let reference = m
        .desk
        .iter()
        .find(|r| r.activation == ActivationKind::RepactI && r.config.seed == 0)
        .expect("matrix contains the run");
    let repeat = train::train(&reference.config).unwrap();
    let ok = repeat.metrics.train_csv() == reference.output.metrics.train_csv()
        && repeat.metrics.grads_csv() == reference.output.metrics.grads_csv()
        && repeat.metrics.alpha_csv() == reference.output.metrics.alpha_csv()
        && repeat.model == reference.output.model;
    criterion(
        11,
        "identical seed and config reproduce metrics bit for bit",
        ok,
        "a repeated run diverged from the recorded one",
    );
}
