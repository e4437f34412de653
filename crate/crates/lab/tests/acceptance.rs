//! Acceptance suite. Each test prints one `criterion N PASS|FAIL` line to
//! stderr (bypassing the test harness capture) before asserting.
//!
//! The attack criteria run 16 victims for at most 4000 iterations on the
//! untrained CNN over the bundled 32x32 natural-image fixture; expect about
//! twenty minutes in total on one core.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use gradleak_core::attacks::{analytic_layer_input, run_attack, AttackKind, AttackSpec};
use gradleak_core::autodiff::Graph;
use gradleak_core::defenses::{compress_gradients, noisy_gradients};
use gradleak_core::diffcore::{
    attack_input_gradient, batch_gradients, param_gradients, DistanceKind, Objective, TvReduction,
};
use gradleak_core::fedsim::partition_dataset;
use gradleak_core::grads::GradEntry;
use gradleak_core::metrics::{asr, mean_std, psnr, ssim};
use gradleak_core::models::{build_model, InputShape, ModelSpec, ModelState, Noise};
use gradleak_core::privacy::{kl_graph, kl_value, KlReduction, LatentStats, StatsVars};
use gradleak_core::{
    count_parameters, Error, LayerGradients, LayerMask, ParamKind, PrivacyModuleSpec, RandomStream, Tensor,
};
use gradleak_lab::config::{AttackConfig, DefenseConfig, DefenseKind, ExperimentConfig};
use gradleak_lab::datasets::{load_dataset, DatasetConfig, DatasetId};
use gradleak_lab::experiment::{prepare_model, run_experiment, AttackOutcome, ResultsBundle};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

const VICTIMS: usize = 16;
const ITERS: usize = 4000;

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    let line = format!("criterion {n} {}: {name} [{detail}]", if ok { "PASS" } else { "FAIL" });
    let _ = writeln!(std::io::stderr(), "{line}");
    assert!(ok, "{line}");
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn cifar() -> ModelSpec {
    ModelSpec::cnn(InputShape::new(32, 32, 3), 10)
}

#[test]
fn criterion_1_parameter_accounting() {
    let base = count_parameters(&cifar()).unwrap();
    let mut ok = base == 65_962;
    let mut detail = format!("base {base}");
    for (p, k, n) in [(3, 32, 72_106), (2, 16, 104_362), (1, 8, 141_226)] {
        let got = count_parameters(&cifar().with_privacy(PrivacyModuleSpec::precode(p, k, 0.01))).unwrap();
        ok &= got == n;
        detail += &format!(", P={p} {got}");
    }
    for (k, extra, pct) in [(3, 2_432, 3.687), (5, 6_528, 9.90), (7, 12_672, 19.21)] {
        let got = count_parameters(&cifar().with_privacy(PrivacyModuleSpec::cvb(1, k, 0.5, 0.1))).unwrap() - base;
        let rel = 100.0 * got as f64 / base as f64;
        ok &= got == extra && (rel - pct).abs() <= 0.05;
        detail += &format!(", kE={k} +{got} ({rel:.3}%)");
    }
    verdict(1, "parameter accounting", ok, &detail);
}

#[test]
fn criterion_2_analytic_attack() {
    let spec = ModelSpec::mlp(InputShape::new(8, 8, 3), 10).with_hidden(vec![64, 32]);
    let mut rng = RandomStream::new(2024);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let model = build_model::<f64>(&spec, 1000 + trial).unwrap();
        let x = Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.uniform()).collect()).unwrap();
        let (_, g) = param_gradients(&model, &x, rng.below(10), None).unwrap();
        let rec = analytic_layer_input(&g, "fc1").unwrap();
        let err = rec.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(err / norm);
    }
    let bare = build_model::<f64>(&spec.with_dense_bias(false), 0).unwrap();
    let (_, g) = param_gradients(&bare, &Tensor::full(&[3, 8, 8], 0.4), 2, None).unwrap();
    let no_bias = matches!(analytic_layer_input(&g, "fc1"), Err(Error::NoBias));
    verdict(
        2,
        "analytic first-layer reconstruction",
        worst <= 1e-5 && no_bias,
        &format!("worst relative error {worst:.2e} over 100 trials, bias-free model gives NoBias: {no_bias}"),
    );
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// Small f64 models with and without privacy modules, weights jittered away
/// from the initialization so no unit is dead.
fn tiny_models() -> Vec<ModelState<f64>> {
    let mut cnn = ModelSpec::cnn(InputShape::new(7, 7, 2), 3);
    cnn.conv_channels = vec![3, 4, 2];
    cnn.kernel = 3;
    cnn.stride = 1;
    let mlp = ModelSpec::mlp(InputShape::new(3, 3, 2), 4).with_hidden(vec![5, 4]);
    let specs = [
        cnn.clone(),
        cnn.clone().with_privacy(PrivacyModuleSpec::cvb(1, 3, 0.5, 0.1)),
        cnn.with_privacy(PrivacyModuleSpec::precode(2, 2, 0.1)),
        mlp.clone(),
        mlp.with_privacy(PrivacyModuleSpec::precode(1, 3, 0.1)),
    ];
    specs
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut m = build_model::<f64>(s, 40 + i as u64).unwrap();
            let mut rng = RandomStream::new(90 + i as u64);
            for p in m.params.iter_mut() {
                let n: Tensor<f64> = rng.normal_tensor(p.shape());
                for (v, d) in p.data_mut().iter_mut().zip(n.data()) {
                    *v += 0.3 * d;
                }
            }
            m
        })
        .collect()
}

#[test]
fn criterion_3_differentiation_soundness() {
    const H: f64 = 1e-6;
    let (mut first, mut second, mut kl) = (0.0f64, 0.0f64, 0.0f64);
    for (mi, model) in tiny_models().iter().enumerate() {
        let mut rng = RandomStream::new(mi as u64);
        let classes = model.spec.num_classes;
        let shape = model.spec.input.chw();
        let n: usize = shape.iter().product();
        let image =
            |rng: &mut RandomStream| Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap();
        let x = image(&mut rng);
        let y = rng.below(classes);
        let noise = Noise::sample(&model.spec, 1, &mut rng).unwrap();
        let xb = model.batch_input(&x).unwrap();
        let out = batch_gradients(model, &xb, &[y], &noise).unwrap();
        for (a, entry) in out.grads.entries.iter().enumerate() {
            for i in (0..entry.value.len()).step_by(entry.value.len().div_ceil(8)) {
                let loss = |d: f64| {
                    let mut m = model.clone();
                    m.params[a].data_mut()[i] += d;
                    batch_gradients(&m, &xb, &[y], &noise).unwrap().loss
                };
                first = first.max(rel_err(entry.value.data()[i], (loss(H) - loss(-H)) / (2.0 * H)));
            }
        }

        let mask = LayerMask::all(out.grads.layers().len());
        for distance in [DistanceKind::Euclidean, DistanceKind::Cosine] {
            let obj = Objective {
                target: &out.grads,
                mask: &mask,
                distance,
                tv_weight: 0.05,
                tv_reduction: TvReduction::Mean,
                label_weight: 0.0,
                input_norm: None,
            };
            let dummy = image(&mut rng);
            let eval = attack_input_gradient(model, &dummy, y, &obj, &noise).unwrap();
            for i in (0..n).step_by(n.div_ceil(12)) {
                let loss = |d: f64| {
                    let mut z = dummy.clone();
                    z.data_mut()[i] += d;
                    attack_input_gradient(model, &z, y, &obj, &noise).unwrap().loss
                };
                second = second.max(rel_err(eval.grad.data()[i], (loss(H) - loss(-H)) / (2.0 * H)));
            }
        }
    }

    let mut r = RandomStream::new(77);
    let mu: Tensor<f64> = r.normal_tensor(&[3, 6]);
    let lv: Tensor<f64> = r.normal_tensor(&[3, 6]);
    for reduction in [KlReduction::PerSample, KlReduction::PerEntry] {
        let mut g = Graph::new();
        let (m, l) = (g.leaf(mu.clone()), g.leaf(lv.clone()));
        let out = kl_graph(&mut g, StatsVars { mu: m, logvar: l }, reduction);
        let grads = g.grad(out, &[m, l]);
        for (which, base) in [(0, &mu), (1, &lv)] {
            for j in 0..base.len() {
                let bump = |d: f64| {
                    let mut t = base.clone();
                    t.data_mut()[j] += d;
                    let s = if which == 0 { LatentStats::new(t, lv.clone()) } else { LatentStats::new(mu.clone(), t) };
                    kl_value(&s.unwrap(), reduction).unwrap()
                };
                kl = kl.max(rel_err(g.value(grads[which]).data()[j], (bump(H) - bump(-H)) / (2.0 * H)));
            }
        }
    }
    verdict(
        3,
        "differentiation against finite differences",
        first <= 1e-4 && second <= 1e-3 && kl <= 1e-4,
        &format!("worst relative error: first order {first:.2e}, attack gradient {second:.2e}, KL {kl:.2e}"),
    );
}

fn attack(name: &str, kind: AttackKind) -> AttackConfig {
    AttackConfig { name: Some(name.into()), kind, max_iters: ITERS, ..Default::default() }
}

fn excluding(name: &str, layers: &[&str]) -> AttackConfig {
    AttackConfig { exclude_layers: layers.iter().map(|s| s.to_string()).collect(), ..attack(name, AttackKind::Ig) }
}

fn desk(defense: DefenseConfig, attacks: Vec<AttackConfig>) -> ResultsBundle {
    let cfg = ExperimentConfig {
        name: "desk".into(),
        victims: VICTIMS,
        dataset: DatasetConfig {
            id: DatasetId::Cifar10,
            path: Some(fixtures().join("natural32")),
            ..Default::default()
        },
        defense,
        attack: attacks,
        ..Default::default()
    };
    run_experiment(&cfg).unwrap()
}

fn defense(kind: DefenseKind) -> DefenseConfig {
    DefenseConfig { kind, ..Default::default() }
}

fn unprotected() -> &'static ResultsBundle {
    static CELL: OnceLock<ResultsBundle> = OnceLock::new();
    CELL.get_or_init(|| {
        let ig = AttackConfig { trajectory: true, ..attack("ig", AttackKind::Ig) };
        desk(defense(DefenseKind::None), vec![ig])
    })
}

/// PRECODE at position 3 (bottleneck 32) against full-gradient IG, the
/// Ignore attack and the two partial exclusions.
fn precode3() -> &'static ResultsBundle {
    static CELL: OnceLock<ResultsBundle> = OnceLock::new();
    CELL.get_or_init(|| {
        let full = AttackConfig { trajectory: true, ..attack("ig", AttackKind::Ig) };
        let attacks = vec![
            full,
            attack("ignore", AttackKind::Ignore),
            excluding("no-decoder", &["vb3.dec"]),
            excluding("no-classifier", &["fc4"]),
        ];
        desk(DefenseConfig { position: 3, ..defense(DefenseKind::Precode) }, attacks)
    })
}

fn ssims(a: &AttackOutcome) -> Vec<f64> {
    a.victims.iter().map(|v| v.ssim_or_zero()).collect()
}

fn describe(a: &AttackOutcome) -> String {
    format!("ASR {:.2}% SSIM {:.3}±{:.3}", a.summary.asr, a.summary.ssim_mean, a.summary.ssim_std)
}

#[test]
fn criterion_4_desk_attack_and_defense_table() {
    let ig = &unprotected().attacks[0];
    let cvb = &desk(defense(DefenseKind::Cvb), vec![attack("ignore", AttackKind::Ignore)]).attacks[0];
    let dp = &desk(defense(DefenseKind::Dp), vec![attack("ig", AttackKind::Ig)]).attacks[0];
    let gc = &desk(defense(DefenseKind::Gc), vec![attack("ig", AttackKind::Ig)]).attacks[0];
    let checks = [
        ("unprotected IG ASR >= 75%", ig.summary.asr >= 75.0, describe(ig)),
        ("CVB Ignore ASR 0 and SSIM <= 0.35", cvb.summary.asr == 0.0 && cvb.summary.ssim_mean <= 0.35, describe(cvb)),
        ("DP ASR 0", dp.summary.asr == 0.0, describe(dp)),
        ("GC ASR 0", gc.summary.asr == 0.0, describe(gc)),
    ];
    let ok = checks.iter().all(|c| c.1);
    let detail: Vec<String> =
        checks.iter().map(|(n, pass, d)| format!("{n}: {} ({d})", if *pass { "ok" } else { "no" })).collect();
    verdict(4, "desk attack/defense table", ok, &detail.join("; "));
}

#[test]
fn criterion_5_layer_mask_table() {
    let p3 = precode3();
    let get = |n: &str| p3.attacks.iter().find(|a| a.name == n).unwrap();
    let p2 = desk(
        DefenseConfig { position: 2, ..defense(DefenseKind::Precode) },
        vec![attack("ignore", AttackKind::Ignore)],
    );
    let p2i = &p2.attacks[0];
    let checks = [
        ("P3 full IG ASR 0", get("ig").summary.asr == 0.0, describe(get("ig"))),
        ("P3 Ignore ASR >= 50%", get("ignore").summary.asr >= 50.0, describe(get("ignore"))),
        ("P3 decoder excluded ASR 0", get("no-decoder").summary.asr == 0.0, describe(get("no-decoder"))),
        ("P3 classifier excluded ASR 0", get("no-classifier").summary.asr == 0.0, describe(get("no-classifier"))),
        ("P2 Ignore ASR <= 15%", p2i.summary.asr <= 15.0, describe(p2i)),
    ];
    let ok = checks.iter().all(|c| c.1);
    let detail: Vec<String> =
        checks.iter().map(|(n, pass, d)| format!("{n}: {} ({d})", if *pass { "ok" } else { "no" })).collect();
    verdict(5, "layer-mask table", ok, &detail.join("; "));
}

#[test]
fn criterion_6_trajectories() {
    let ig = &unprotected().attacks[0];
    let s = ssims(ig);
    let mut finals = Vec::new();
    for (v, &q) in ig.victims.iter().zip(&s) {
        if q >= 0.5 {
            let t = v.trajectory.as_ref().unwrap();
            let l = t.layers.iter().position(|n| n == "fc4").unwrap();
            finals.push(*t.cosines[l].last().unwrap());
        }
    }
    let worst_final = finals.iter().copied().fold(f64::INFINITY, f64::min);
    let unprotected_ok = !finals.is_empty() && worst_final >= 0.9;

    let pig = &precode3().attacks[0];
    let mut stats = Vec::new();
    for v in &pig.victims {
        let t = v.trajectory.as_ref().unwrap();
        let l = t.layers.iter().position(|n| n == "vb3.dec").unwrap();
        stats.push(mean_std(&t.cosines[l]));
    }
    let max_mean = stats.iter().map(|s| s.0).fold(f64::NEG_INFINITY, f64::max);
    let min_std = stats.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    let protected_ok = max_mean <= 0.4 && min_std >= 0.05;
    verdict(
        6,
        "gradient trajectories",
        unprotected_ok && protected_ok,
        &format!(
            "{} successful unprotected victims, lowest final classifier cosine {worst_final:.3}; \
             PRECODE decoder cosine per victim: highest mean {max_mean:.3}, lowest std {min_std:.3}",
            finals.len()
        ),
    );
}

#[test]
fn criterion_7_federated_utility() {
    let base = ExperimentConfig {
        train: true,
        dataset: DatasetConfig {
            id: DatasetId::Mnist,
            path: Some(fixtures().join("mnist-desk")),
            ..Default::default()
        },
        ..Default::default()
    };
    let mut base = base;
    base.fed.num_clients = 2;
    base.fed.rounds = 10;
    base.fed.patience = 10;
    let data = load_dataset(&base.dataset).unwrap();
    let final_acc = |cfg: &ExperimentConfig| {
        let t = prepare_model::<f32>(cfg, &data).unwrap();
        assert_eq!(t.rounds.len(), 10);
        100.0 * t.rounds.last().unwrap().test_accuracy
    };
    let plain = final_acc(&base);
    let cvb = final_acc(&ExperimentConfig { defense: defense(DefenseKind::Cvb), ..base.clone() });
    verdict(
        7,
        "federated utility on the MNIST subset",
        plain >= 90.0 && (cvb - plain).abs() <= 3.0,
        &format!("{} train images, test accuracy {plain:.2}% plain, {cvb:.2}% with CVB", data.train.len()),
    );
}

#[derive(serde::Deserialize)]
struct Case {
    shape: Vec<usize>,
    a: Vec<f64>,
    b: Vec<f64>,
    ssim: f64,
    psnr: f64,
}

#[test]
fn criterion_8_metrics_oracle() {
    let text = include_str!(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/metric_reference.json"));
    let cases: Vec<Case> = serde_json::from_str(text).unwrap();
    let (mut ds, mut dp) = (0.0f64, 0.0f64);
    for c in &cases {
        let a = Tensor::new(c.shape.clone(), c.a.clone()).unwrap();
        let b = Tensor::new(c.shape.clone(), c.b.clone()).unwrap();
        ds = ds.max((ssim(&a, &b).unwrap() - c.ssim).abs());
        dp = dp.max((psnr(&a, &b).unwrap() - c.psnr).abs());
    }
    let rate = asr(&[0.6, 0.4, 0.5], 0.5).unwrap();
    verdict(
        8,
        "metrics against the reference implementation",
        cases.len() >= 10 && ds <= 1e-6 && dp <= 1e-6 && (rate - 66.67).abs() < 0.005,
        &format!("{} pairs, max |dSSIM| {ds:.1e}, max |dPSNR| {dp:.1e}, asr {rate:.2}%", cases.len()),
    );
}

fn run_property<S: Strategy>(
    cases: u32,
    strategy: S,
    test: impl Fn(S::Value) -> Result<(), TestCaseError>,
) -> Result<(), String> {
    let mut runner = TestRunner::new(Config { cases, failure_persistence: None, ..Config::default() });
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn flat_grads(arrays: &[Vec<f64>]) -> LayerGradients<f64> {
    LayerGradients::new(
        arrays
            .iter()
            .enumerate()
            .map(|(i, v)| GradEntry {
                layer: format!("l{i}"),
                kind: ParamKind::Weight,
                value: Tensor::new(vec![v.len()], v.clone()).unwrap(),
            })
            .collect(),
    )
}

#[test]
fn criterion_9_invariant_suites() {
    let mut results: Vec<(&str, Result<(), String>)> = Vec::new();

    let models = tiny_models();
    let mask_case = |(which, scale, shift, seed): (usize, f64, f64, u64)| {
        let model = &models[[1, 2, 4][which]];
        let spec = &model.spec;
        let mut rng = RandomStream::new(seed);
        let n: usize = spec.input.chw().iter().product();
        let x = Tensor::new(spec.input.chw().to_vec(), (0..n).map(|_| rng.uniform()).collect()).unwrap();
        let noise = Noise::sample(spec, 1, &mut rng).unwrap();
        let g = batch_gradients(model, &model.batch_input(&x).unwrap(), &[1], &noise).unwrap().grads;
        let aspec = AttackSpec::preset(AttackKind::Ignore).with_max_iters(10);
        let mask = gradleak_core::attacks::ignore_mask(spec).unwrap();
        let names: Vec<String> = g.layers().iter().map(|s| s.to_string()).collect();
        let mut perturbed = g.clone();
        for e in perturbed.entries.iter_mut() {
            if !mask.includes(names.iter().position(|l| *l == e.layer).unwrap()) {
                e.value = e.value.map(|v| scale * v + shift);
            }
        }
        let stream = RandomStream::new(seed ^ 1);
        // a dead dummy gradient must be rejected identically on both sides
        match (
            run_attack(model, &g, x.shape(), Some(1), &aspec, &stream),
            run_attack(model, &perturbed, x.shape(), Some(1), &aspec, &stream),
        ) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!(a.reconstruction, b.reconstruction);
                prop_assert_eq!(a.final_loss, b.final_loss);
            }
            (Err(e), Err(f)) => prop_assert_eq!(e.to_string(), f.to_string()),
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.err(), b.err()),
        }
        Ok(())
    };
    results.push((
        "mask insensitivity",
        run_property(16, (0usize..3, -4.0f64..4.0, -1.0f64..1.0, any::<u64>()), mask_case),
    ));

    let arrays = prop::collection::vec(prop::collection::vec(prop_oneof![-9.0f64..-1e-3, 1e-3f64..9.0], 1..80), 1..4);
    results.push((
        "compression zero count",
        run_property(200, (arrays.clone(), 0.0f64..0.999), |(a, p)| {
            let c = compress_gradients(&flat_grads(&a), p).unwrap();
            for (v, e) in a.iter().zip(&c.entries) {
                let zeros = e.value.data().iter().filter(|&&x| x == 0.0).count();
                prop_assert_eq!(zeros, (p * v.len() as f64).floor() as usize);
            }
            Ok(())
        }),
    ));

    results.push((
        "clip law",
        run_property(200, (arrays, 0.01f64..30.0), |(a, clip)| {
            let g = flat_grads(&a);
            let norm = g.norm_sq().sqrt();
            let out = noisy_gradients(std::slice::from_ref(&g), clip, 0.0, &mut RandomStream::new(0)).unwrap();
            let factor = (clip / norm).min(1.0);
            for (x, y) in out.entries.iter().zip(&g.entries) {
                for (u, v) in x.value.data().iter().zip(y.value.data()) {
                    prop_assert!((u - factor * v).abs() <= 1e-12 * v.abs().max(1.0));
                }
            }
            Ok(())
        }),
    ));

    results.push((
        "partition disjointness",
        run_property(200, (20usize..3000, 1usize..12, 0.0f64..0.4, any::<u64>()), |(n, k, v, seed)| {
            prop_assume!(n / k >= 3);
            let parts = partition_dataset(n, k, v, seed).unwrap();
            let mut seen = BTreeSet::new();
            for c in &parts {
                for &i in c.train.iter().chain(&c.val) {
                    prop_assert!(i < n && seen.insert(i));
                }
            }
            Ok(())
        }),
    ));

    let small = ExperimentConfig::from_toml(
        r#"
        seed = 5
        victims = 3
        train = true
        [dataset]
        id = "synthetic"
        [dataset.synthetic]
        train = 120
        test = 30
        height = 16
        width = 16
        [model]
        family = "mlp"
        hidden = [10, 6]
        [defense]
        kind = "dp"
        [fed]
        num_clients = 2
        rounds = 2
        patience = 2
        batch_size = 8
        [[attack]]
        max_iters = 30
        "#,
    )
    .unwrap();
    let a = run_experiment(&small).unwrap();
    let b = run_experiment(&small).unwrap();
    let same = serde_json::to_string(&a.attacks).unwrap() == serde_json::to_string(&b.attacks).unwrap()
        && a.truths == b.truths
        && a.attacks[0].reconstructions == b.attacks[0].reconstructions;
    results.push(("end-to-end reproducibility", if same { Ok(()) } else { Err("bundles differ".into()) }));

    let ok = results.iter().all(|r| r.1.is_ok());
    let detail: Vec<String> = results
        .iter()
        .map(|(n, r)| match r {
            Ok(()) => format!("{n}: ok"),
            Err(e) => format!("{n}: {e}"),
        })
        .collect();
    verdict(9, "invariant suites", ok, &detail.join("; "));
}
