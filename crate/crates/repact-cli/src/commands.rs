//! Implementations of the CLI subcommands.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use repact::autodiff::Tape;
use repact::checkpoint::{
    is_fused_model_file, load_checkpoint, save_checkpoint, FusedModel,
};
use repact::error::{Error, Result};
use repact::gradcheck::{grad_check, GradCheckOptions};
use repact::layers::{BranchKind, Mode};
use repact::model::{ActivationLayer, TinyCnn};
use repact::piecewise::{PiecewisePoly, PwEval};
use repact::tensor::Tensor;
use repact::train::{self, load_alpha_csv, load_config};

pub fn train(config_path: &Path, out: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    let output = train::train(&config)?;
    save_checkpoint(out, &output.model, &config)?;
    output.metrics.write_csv(&out.join("metrics"))?;
    println!(
        "trained {} for {} epochs: final test top-1 {:.2}%",
        config.activation.name(),
        config.epochs,
        output.final_test_top1
    );
    println!("checkpoint: {}", out.display());
    println!("metrics: {}", out.join("metrics").display());
    Ok(())
}

pub fn eval(checkpoint: &Path, fused: bool, data_dir: Option<&Path>) -> Result<()> {
    let (model, mut config) = load_checkpoint(checkpoint)?;
    if let Some(dir) = data_dir {
        config.dataset.dir = dir.to_path_buf();
    }
    let dataset = config.load_dataset()?;
    let top1 = train::evaluate_split(&model, &dataset.test, fused)?;
    println!(
        "{} test top-1: {top1:.2}% ({} items)",
        if fused { "fused" } else { "multi-branch" },
        dataset.test.len()
    );
    Ok(())
}

pub fn fuse(checkpoint: &Path, out: &Path) -> Result<()> {
    if is_fused_model_file(checkpoint) {
        return Err(Error::invalid(format!(
            "{} is already a fused model; fusing is not repeatable",
            checkpoint.display()
        )));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let fused = FusedModel::from_model(&model)?;
    fused.write(out)?;
    println!(
        "fused {} activation layer(s) into {}",
        fused.activations.len(),
        out.display()
    );
    for act in &fused.activations {
        let poly = act.poly.clone().into_poly()?;
        println!(
            "  {}: {} segment(s), breakpoints {:?}",
            act.layer,
            poly.segments().len(),
            poly.breakpoints()
        );
    }
    Ok(())
}

/// Evaluate one activation slot the way training-mode inference would.
fn training_form_outputs(model: &TinyCnn<f32>, block: usize, xs: &Tensor<f32>) -> Result<Tensor<f32>> {
    match &model.blocks[block].act {
        ActivationLayer::Fixed(poly) => {
            let ev = PwEval::<f32>::new(poly);
            Ok(xs.map(|v| ev.eval(v)))
        }
        ActivationLayer::RepAct(act) => act.forward_inference(xs),
    }
}

pub fn verify(
    checkpoint: &Path,
    samples: usize,
    tol: f64,
    seed: u64,
    fused_file: Option<&Path>,
) -> Result<()> {
    if samples == 0 {
        return Err(Error::invalid("--samples must be >= 1"));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::invalid("--tol must be positive"));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let polys: Vec<(String, PiecewisePoly)> = match fused_file {
        None => model.fuse_activations()?,
        Some(path) => FusedModel::read(path)?.polys()?,
    };
    if polys.len() != model.blocks.len() {
        return Err(Error::invalid(format!(
            "fused model has {} activation layers, checkpoint has {}",
            polys.len(),
            model.blocks.len()
        )));
    }
    let mut worst: Option<(String, f64)> = None;
    for (i, (layer, poly)) in polys.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
        let xs = Tensor::<f32>::from_fn(&[samples], |_| rng.gen_range(-10.0f32..10.0))?;
        let reference = training_form_outputs(&model, i, &xs)?;
        let ev = PwEval::<f32>::new(poly);
        let mut gap = 0.0f64;
        for (&x, &r) in xs.data().iter().zip(reference.data()) {
            gap = gap.max((ev.eval(x) as f64 - r as f64).abs());
        }
        println!("{layer}: max |training − fused| = {gap:.3e} over {samples} samples");
        if worst.as_ref().is_none_or(|(_, w)| gap > *w) {
            worst = Some((layer.clone(), gap));
        }
    }
    let (layer, gap) = worst.expect("at least one block");
    if gap > tol {
        return Err(Error::numeric(format!(
            "fusion mismatch: layer {layer} deviates by {gap:.3e} (tolerance {tol:.1e})"
        )));
    }
    println!("worst layer {layer}: {gap:.3e} <= {tol:.1e}");
    Ok(())
}

pub fn curves(
    checkpoint: &Path,
    layer: &str,
    range: &[f64],
    steps: usize,
    out: Option<&Path>,
    alphas: bool,
) -> Result<()> {
    if alphas {
        let rows = load_alpha_csv(&checkpoint.join("metrics").join("alpha.csv"))?;
        let filtered: Vec<_> = rows.iter().filter(|r| r.layer == layer).collect();
        if filtered.is_empty() {
            return Err(Error::invalid(format!(
                "no trajectory rows for layer '{layer}'"
            )));
        }
        let k = filtered[0].alphas.len();
        let mut text = String::from("epoch");
        for i in 0..k {
            let _ = write!(text, ",a{i}");
        }
        text.push_str(",t\n");
        for row in filtered {
            let _ = write!(text, "{}", row.epoch);
            for a in &row.alphas {
                let _ = write!(text, ",{a}");
            }
            let _ = writeln!(text, ",{}", row.slope);
        }
        return emit(out, &text);
    }

    let &[lo, hi] = range else {
        return Err(Error::invalid("--range takes exactly two numbers"));
    };
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::invalid("--range bounds must be finite"));
    }
    if steps == 0 {
        return Err(Error::invalid("--steps must be >= 1"));
    }
    if steps > 1 && lo >= hi {
        return Err(Error::invalid("--range needs LO < HI"));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let polys = model.fuse_activations()?;
    let poly = polys
        .iter()
        .find(|(name, _)| name == layer)
        .map(|(_, p)| p)
        .ok_or_else(|| {
            Error::invalid(format!(
                "unknown layer '{layer}' (have: {})",
                polys
                    .iter()
                    .map(|(n, _)| n.as_str())
                    .collect::<Vec<_>>()
                    .join(", ")
            ))
        })?;
    let mut text = String::from("x,value,derivative\n");
    for i in 0..steps {
        let x = if steps == 1 {
            lo
        } else {
            lo + (hi - lo) * i as f64 / (steps - 1) as f64
        };
        let _ = writeln!(text, "{x},{},{}", poly.eval(x)?, poly.eval_derivative(x)?);
    }
    emit(out, &text)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
            println!("wrote {}", path.display());
            Ok(())
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn multi_branch_eval(
    branches: &[BranchKind],
    alphas: &[f64],
    slope: f32,
    offset: f32,
    xs: &[f32],
    out: &mut [f32],
) {
    let weights: Vec<f32> = alphas.iter().map(|&a| a as f32).collect();
    for (o, &x) in out.iter_mut().zip(xs) {
        let mut acc = offset;
        for (kind, &w) in branches.iter().zip(&weights) {
            acc += w * kind.value(x, slope);
        }
        *o = acc;
    }
}

pub fn bench(model: &Path, elements: usize, repeats: usize, seed: u64) -> Result<()> {
    if elements == 0 {
        return Err(Error::invalid("--elements must be >= 1"));
    }
    if repeats == 0 {
        return Err(Error::invalid("--repeats must be >= 1"));
    }
    let doc = FusedModel::read(model)?;
    let hardswish = PiecewisePoly::hardswish();
    let hs_cost = hardswish.op_count();
    println!(
        "reference hardswish cost: {} compares, {} mults, {} adds",
        hs_cost.compares, hs_cost.mults, hs_cost.adds
    );

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f32> = (0..elements).map(|_| rng.gen_range(-10.0f32..10.0)).collect();
    let mut fused_out = vec![0.0f32; elements];
    let mut branch_out = vec![0.0f32; elements];

    for act in &doc.activations {
        let poly = act.poly.clone().into_poly()?;
        let cost = poly.op_count();
        println!(
            "{}: static cost {} compares, {} mults, {} adds",
            act.layer, cost.compares, cost.mults, cost.adds
        );

        let ev = PwEval::<f32>::new(&poly);
        let mut best_fused = f64::INFINITY;
        for _ in 0..repeats {
            let start = Instant::now();
            for (o, &x) in fused_out.iter_mut().zip(&xs) {
                *o = ev.eval(std::hint::black_box(x));
            }
            std::hint::black_box(&fused_out);
            best_fused = best_fused.min(start.elapsed().as_secs_f64());
        }

        let mut best_branch = f64::INFINITY;
        for _ in 0..repeats {
            let start = Instant::now();
            multi_branch_eval(
                &act.source.branches,
                &act.source.alphas,
                act.source.prelu_slope as f32,
                act.source.offset as f32,
                std::hint::black_box(&xs),
                &mut branch_out,
            );
            std::hint::black_box(&branch_out);
            best_branch = best_branch.min(start.elapsed().as_secs_f64());
        }

        let sanity = fused_out
            .iter()
            .zip(&branch_out)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0f64, f64::max);
        let per = 1e9 / elements as f64;
        println!(
            "  fused {:.2} ns/elem vs {}-branch sum {:.2} ns/elem (x{:.2} speedup, outputs agree to {:.1e})",
            best_fused * per,
            act.source.branches.len(),
            best_branch * per,
            best_branch / best_fused,
            sanity
        );
    }
    Ok(())
}

pub fn gradcheck(config_path: &Path, tol: f64, batch: usize) -> Result<()> {
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::invalid("--tol must be positive"));
    }
    if batch == 0 {
        return Err(Error::invalid("--batch must be >= 1"));
    }
    let config = load_config(config_path)?;
    let mut model = TinyCnn::<f64>::init(config.model_spec(), config.seed)?;
    let infos = model.param_infos();
    let params: Vec<(String, Tensor<f64>)> = infos
        .iter()
        .map(|p| (p.name.clone(), model.param_value(p.id)))
        .collect();

    let input = config.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6772_6164); // "grad"
    let x = Tensor::<f64>::from_fn(&[batch, input[0], input[1], input[2]], |_| {
        rng.gen_range(-1.0..1.0)
    })?;
    let labels: Vec<usize> = (0..batch).map(|i| i % model.spec.classes).collect();
    let smoothing = config.label_smoothing;
    // Test hook: install a deliberately wrong backward rule on the loss so
    // the check must fail.
    let corrupt = std::env::var_os("REPACT_GRADCHECK_CORRUPT").is_some();

    let report = grad_check(
        |tape: &mut Tape<f64>, vars| {
            let x_var = tape.constant(x.clone());
            let logits = model.build_logits(tape, vars, x_var, Mode::Train)?;
            let loss = tape.softmax_cross_entropy(logits, &labels, smoothing)?;
            if corrupt {
                tape.map_unary(loss, |v| v, |_| 2.0)
            } else {
                Ok(loss)
            }
        },
        &params,
        &GradCheckOptions::default(),
    )?;

    for group in &report.groups {
        println!(
            "{}: max rel err {:.3e} over {} element(s){}",
            group.name,
            group.max_rel_err,
            group.elements,
            if group.excluded > 0 {
                format!(" ({} probe(s) excluded at breakpoints)", group.excluded)
            } else {
                String::new()
            }
        );
    }
    let worst = report.max_rel_err();
    if !report.passes(tol) {
        return Err(Error::numeric(format!(
            "gradient check failed: max relative error {worst:.3e} > {tol:.1e}"
        )));
    }
    println!("all {} parameter group(s) within {tol:.1e} (worst {worst:.3e})", report.groups.len());
    Ok(())
}
