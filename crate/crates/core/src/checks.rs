//! Self-contained invariant suite (the CLI `check` command). Each check
//! compares library output against closed forms or a second computation
//! path and reports pass/fail with its worst observed deviation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{grad_check, Graph};
use crate::datagen::rng_for;
use crate::error::{Error, Result};
use crate::losses::{LabelVector, LossSpec};
use crate::models::{MaskMode, Model, ParamKind};
use crate::tensor::{self, Tensor};
use crate::tta::{self, adapt_online, grid_search, Adapter, Batch, Method, TTAConfig};

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn randn_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

/// Gaussian blobs with `k` classes in `dim` dimensions, cut into batches.
pub fn synthetic_stream(seed: u64, batches: usize, batch: usize, dim: usize, k: usize) -> Vec<Batch<f64>> {
    let mut rng = rng_for(seed, 7);
    let means: Vec<Vec<f64>> = (0..k).map(|_| randn_vec(&mut rng, dim, 1.5)).collect();
    (0..batches)
        .map(|_| {
            let classes: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..k)).collect();
            let mut data = Vec::with_capacity(batch * dim);
            for &c in &classes {
                let noise = randn_vec(&mut rng, dim, 1.0);
                data.extend(means[c].iter().zip(noise).map(|(m, e)| m + e + 0.5));
            }
            Batch::new(Tensor::matrix(batch, dim, data).expect("shape"), classes).expect("sizes")
        })
        .collect()
}

fn outcome(name: &str, r: Result<(bool, String)>) -> CheckOutcome {
    match r {
        Ok((passed, detail)) => CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        },
        Err(e) => CheckOutcome {
            name: name.to_string(),
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn fenchel_young() -> Result<(bool, String)> {
    let mut rng = rng_for(11, 0);
    let mut worst_id = 0.0f64;
    let mut worst_gap = 0.0f64;
    for spec in [LossSpec::<f64>::cross_entropy(5)?, LossSpec::squared(5)?] {
        for _ in 0..100 {
            let h = randn_vec(&mut rng, 5, 3.0);
            let y = spec.conjugate_pseudolabel(&h)?;
            let a = spec.conjugate_loss(&h)?;
            let b = spec.supervised_loss(&h, &y)?;
            worst_id = worst_id.max((a - b).abs());
            worst_gap = worst_gap.max(spec.fenchel_gap(&h)?);
        }
    }
    let mut worst_stat = 0.0f64;
    for eps in [0.5, 1.0, 6.0] {
        let spec = LossSpec::<f64>::polyloss(eps, 5)?;
        for _ in 0..50 {
            let h = randn_vec(&mut rng, 5, 3.0);
            worst_stat = worst_stat.max(spec.fenchel_gap(&h)?);
        }
    }
    Ok((
        worst_id <= 1e-12 && worst_gap <= 1e-10 && worst_stat <= 1e-8,
        format!("identity {worst_id:.2e}, gap {worst_gap:.2e}, polyloss residual {worst_stat:.2e}"),
    ))
}

fn recovery() -> Result<(bool, String)> {
    let mut rng = rng_for(12, 0);
    let ce = LossSpec::<f64>::cross_entropy(4)?;
    let sq = LossSpec::<f64>::squared(4)?;
    let ex = LossSpec::<f64>::exponential()?;
    let mut worst = [0.0f64; 3];
    for _ in 0..100 {
        let h = randn_vec(&mut rng, 4, 3.0);
        let p: Vec<f64> = {
            let m = h.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = h.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        };
        let shannon: f64 = -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        worst[0] = worst[0].max((ce.conjugate_loss(&h)? - shannon).abs());
        let half_norm = -0.5 * h.iter().map(|v| v * v).sum::<f64>();
        worst[1] = worst[1].max((sq.conjugate_loss(&h)? - half_norm).abs());
        let z = h[0];
        worst[2] = worst[2].max((ex.conjugate_loss(&[z])? - 2.0 / (z.exp() + (-z).exp())).abs());
    }
    Ok((
        worst.iter().all(|&w| w <= 1e-12),
        format!("cross-entropy {:.2e}, squared {:.2e}, exponential {:.2e}", worst[0], worst[1], worst[2]),
    ))
}

fn bn_model(seed: u64, dim: usize, k: usize) -> Model<f64> {
    Model::mlp(dim, &[16, 16], k, seed)
}

fn conjugate_entropy_equivalence() -> Result<(bool, String)> {
    let spec = LossSpec::<f64>::cross_entropy(3)?;
    let stream = synthetic_stream(21, 12, 32, 6, 3);
    let model = bn_model(21, 6, 3);
    let base = TTAConfig::new(Method::ConjugatePl, 0.05, 1.0).with_mask(MaskMode::BnOnly);
    let ent = base.clone().with_method(Method::Entropy);
    let a = Adapter::new(model.clone(), spec, base.clone())?;
    let b = Adapter::new(model.clone(), spec, ent.clone())?;
    let (_, ga, _) = a.objective_gradient(&stream[0].x)?;
    let (_, gb, _) = b.objective_gradient(&stream[0].x)?;
    let mut worst = 0.0f64;
    for ((_, x), (_, y)) in ga.iter().zip(&gb) {
        worst = worst.max(x.zip_map(y, |p, q| (p - q).abs())?.max_abs());
    }
    let (ma, ra) = adapt_online(&model, &stream, &spec, &base)?;
    let (mb, rb) = adapt_online(&model, &stream, &spec, &ent)?;
    let same = ma == mb && ra.per_batch == rb.per_batch && ra.model_checksum == rb.model_checksum;
    Ok((worst <= 1e-10 && same, format!("max gradient difference {worst:.2e}, trajectories identical: {same}")))
}

fn squared_equivalence() -> Result<(bool, String)> {
    let spec = LossSpec::<f64>::squared(3)?;
    let mut rng = rng_for(13, 0);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let h = Tensor::matrix(4, 3, randn_vec(&mut rng, 12, 2.0))?;
        let mut g = Graph::new();
        let v = g.param(h.clone());
        let obj = tta::objective_graph(&mut g, &spec, &TTAConfig::default(), v, None)?;
        let ga = g.backward(obj)?.get(v);
        // d/dh of mean(−½‖h‖²) is −h/n
        let gb = h.map(|x| -x / 4.0);
        worst = worst.max(ga.zip_map(&gb, |p, q| (p - q).abs())?.max_abs());
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.2e}")))
}

fn temperature_parallel() -> Result<(bool, String)> {
    let spec = LossSpec::<f64>::squared(3)?;
    let stream = synthetic_stream(14, 1, 16, 5, 3);
    let model = bn_model(14, 5, 3);
    let grad = |t: f64| -> Result<Vec<f64>> {
        let cfg = TTAConfig::new(Method::ConjugatePl, 0.1, t).with_mask(MaskMode::BnOnly);
        let a = Adapter::new(model.clone(), spec, cfg)?;
        let (_, g, _) = a.objective_gradient(&stream[0].x)?;
        Ok(g.into_iter().flat_map(|(_, t)| t.into_data()).collect())
    };
    let g1 = grad(1.0)?;
    let mut worst = 0.0f64;
    for t in [2.0, 5.0] {
        let gt = grad(t)?;
        let cos = tensor::dot(&g1, &gt) / (tensor::dot(&g1, &g1).sqrt() * tensor::dot(&gt, &gt).sqrt());
        worst = worst.max((1.0 - cos).abs());
    }
    Ok((worst <= 1e-10, format!("max |1 − cosine| {worst:.2e}")))
}

fn polyloss_limit() -> Result<(bool, String)> {
    let mut rng = rng_for(15, 0);
    let spec = LossSpec::<f64>::polyloss(1e-8, 4)?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let h = randn_vec(&mut rng, 4, 3.0);
        let y = spec.conjugate_pseudolabel(&h)?;
        let p = tensor::softmax(&h)?;
        worst = worst.max(y.0.iter().zip(&p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let y = LossSpec::<f64>::polyloss(1.0, 2)?.conjugate_pseudolabel(&[0.0, 0.0])?;
    let half = (y.0[0] - 0.5).abs().max((y.0[1] - 0.5).abs());
    Ok((worst <= 1e-6 && half <= 1e-12, format!("softmax deviation {worst:.2e}, [0,0] label {:?}", y.0)))
}

/// Every objective's graph gradient against central differences; labels for
/// the pseudo-labelling baselines come from an independent logit draw.
fn gradient_oracle() -> Result<(bool, String)> {
    let mut rng = rng_for(16, 0);
    let mut worst = 0.0f64;
    let (n, step) = (4, 1e-5);
    let specs = [
        LossSpec::<f64>::cross_entropy(3)?,
        LossSpec::squared(3)?,
        LossSpec::polyloss(1.0, 3)?,
        LossSpec::exponential()?,
    ];
    for spec in &specs {
        let k = spec.output_dim();
        for _ in 0..20 {
            let point = randn_vec(&mut rng, n * k, 1.5);
            let f = |g: &mut Graph<f64>, v| {
                let h = g.reshape(v, n, k);
                let rows = spec.conjugate_graph(g, h)?;
                Ok(g.mean_all(rows))
            };
            worst = worst.max(grad_check(f, &point, step)?);
        }
    }
    let ce = &specs[0];
    let ex = &specs[3];
    for spec in [ce, ex] {
        let k = spec.output_dim();
        for method in [Method::Entropy, Method::SoftPl, Method::HardPl, Method::RobustPl] {
            let mut cfg = TTAConfig::new(method, 0.1, 1.0);
            if method == Method::HardPl {
                cfg.confidence_threshold = Some(0.5);
            }
            for _ in 0..20 {
                let point = randn_vec(&mut rng, n * k, 1.5);
                let labels = Tensor::matrix(n, k, randn_vec(&mut rng, n * k, 2.0))?;
                let fixed = (method != Method::Entropy).then_some(&labels);
                let f = |g: &mut Graph<f64>, v| {
                    let h = g.reshape(v, n, k);
                    tta::objective_graph(g, spec, &cfg, h, fixed)
                };
                worst = worst.max(grad_check(f, &point, step)?);
            }
        }
    }
    Ok((worst < 1e-5, format!("worst relative error {worst:.2e}")))
}

fn bn_isolation() -> Result<(bool, String)> {
    let spec = LossSpec::<f64>::cross_entropy(3)?;
    let stream = synthetic_stream(17, 50, 16, 6, 3);
    let model = bn_model(17, 6, 3);
    let cfg = TTAConfig::new(Method::Entropy, 0.05, 1.0).with_mask(MaskMode::BnOnly);
    let (adapted, _) = adapt_online(&model, &stream, &spec, &cfg)?;
    let mut frozen_same = true;
    let mut bn_moved = false;
    for id in model.param_ids() {
        let same = model.param(id) == adapted.param(id);
        match id.kind {
            ParamKind::Weight | ParamKind::Bias => frozen_same &= same,
            ParamKind::Gamma | ParamKind::Beta => bn_moved |= !same,
        }
    }
    Ok((frozen_same && bn_moved, format!("non-BN unchanged: {frozen_same}, BN adapted: {bn_moved}")))
}

fn hard_label_temperature() -> Result<(bool, String)> {
    let mut rng = rng_for(18, 0);
    let spec = LossSpec::<f64>::cross_entropy(5)?;
    let h = Tensor::matrix(64, 5, randn_vec(&mut rng, 320, 2.0))?;
    let labels = |t: f64| -> Result<Vec<usize>> {
        Ok(tta::hard_pseudolabels(&spec, &h.map(|v| v / t))?.into_iter().map(|p| p.1).collect())
    };
    let l1 = labels(1.0)?;
    let same = labels(2.0)? == l1 && labels(5.0)? == l1;
    Ok((same, format!("labels identical for T in {{1,2,5}}: {same}")))
}

fn grid_determinism() -> Result<(bool, String)> {
    let spec = LossSpec::<f64>::cross_entropy(3)?;
    let streams = vec![synthetic_stream(19, 4, 16, 6, 3), synthetic_stream(20, 4, 16, 6, 3)];
    let model = bn_model(19, 6, 3);
    let base = TTAConfig::new(Method::Entropy, 0.0, 1.0).with_mask(MaskMode::BnOnly);
    let a = grid_search(&model, &spec, &streams, &[1e-2, 1e-1], &[1.0, 2.0], &base)?;
    let b = grid_search(&model, &spec, &streams, &[1e-2, 1e-1], &[1.0, 2.0], &base)?;
    // no-op adaptation: every cell ties, so the smallest lr and T must win
    let flat = base.clone().with_method(Method::None);
    let t = grid_search(&model, &spec, &streams, &[1e-1, 1e-3, 1e-2], &[3.0, 1.0], &flat)?;
    let ok = a == b && t.best_lr == 1e-3 && t.best_temperature == 1.0;
    Ok((ok, format!("repeat identical: {}, tie-break picked lr={} T={}", a == b, t.best_lr, t.best_temperature)))
}

fn report_consistency() -> Result<(bool, String)> {
    let spec = LossSpec::<f64>::cross_entropy(3)?;
    let mut stream = synthetic_stream(22, 5, 16, 6, 3);
    stream.push(synthetic_stream(23, 1, 7, 6, 3).remove(0));
    let model = bn_model(22, 6, 3);
    let cfg = TTAConfig::new(Method::ConjugatePl, 0.05, 1.0).with_mask(MaskMode::BnOnly);
    let (_, r1) = adapt_online(&model, &stream, &spec, &cfg)?;
    let (_, r2) = adapt_online(&model, &stream, &spec, &cfg)?;
    let dev = (r1.recompute_mean_error() - r1.mean_online_error).abs();
    let same = r1.to_json()? == r2.to_json()?;
    Ok((dev <= 1e-12 && same, format!("mean recompute deviation {dev:.2e}, reruns identical: {same}")))
}

fn pseudolabel_definition() -> Result<(bool, String)> {
    // y = softmax for cross-entropy, the linear solve for polyloss
    let mut rng = rng_for(24, 0);
    let spec = LossSpec::<f64>::polyloss(2.0, 3)?;
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let h = randn_vec(&mut rng, 3, 2.0);
        let y: LabelVector<f64> = spec.conjugate_pseudolabel(&h)?;
        let jac = spec.jac_g(&h)?;
        let grad = spec.grad_f(&h)?;
        for j in 0..3 {
            let col: f64 = (0..3).map(|i| jac[i * 3 + j] * y.0[i]).sum();
            worst = worst.max((col - grad[j]).abs());
        }
    }
    Ok((worst <= 1e-10, format!("max |Dgᵀy − ∇f| {worst:.2e}")))
}

type CheckFn = fn() -> Result<(bool, String)>;

/// Runs every check in a fixed order.
pub fn run_all() -> Vec<CheckOutcome> {
    let checks: [(&str, CheckFn); 12] = [
        ("fenchel_young_identities", fenchel_young),
        ("conjugate_loss_closed_forms", recovery),
        ("polyloss_pseudolabel_system", pseudolabel_definition),
        ("polyloss_small_epsilon_limit", polyloss_limit),
        ("conjugate_entropy_equivalence", conjugate_entropy_equivalence),
        ("squared_conjugate_equivalence", squared_equivalence),
        ("squared_temperature_direction", temperature_parallel),
        ("objective_gradients", gradient_oracle),
        ("bn_only_isolation", bn_isolation),
        ("hard_labels_temperature_invariant", hard_label_temperature),
        ("grid_search_determinism", grid_determinism),
        ("online_report_consistency", report_consistency),
    ];
    checks.iter().map(|(name, f)| outcome(name, f())).collect()
}

/// `Ok` iff every outcome passed.
pub fn summarize(outcomes: &[CheckOutcome]) -> Result<()> {
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("failed checks: {}", failed.join(", "))))
    }
}
