// scratch: validate acceptance margins before freezing configs
use dfm_core::density::{fit_class_conditional, DensityConfig, DensityKind};
use dfm_core::eval::auroc;
use dfm_core::feature_store::{split_per_class, subsample, FeatureSet};
use dfm_core::linear_subspace::{fit_pca, ReductionCriterion};
use dfm_core::pipeline::{fit, score, FitConfig, GammaSpec};
use dfm_core::synthbench::{generate, SynthSpec};
use nalgebra::DMatrix;
use std::time::Instant;

fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn fig2_margin(min_mahal: &str, s0: &str, s1: &str, seed: &str) {
    let fig2 = SynthSpec::from_kv(&kv(&[
        ("ambient_dim", "16"), ("intrinsic_dim", "3"), ("classes", "2"),
        ("train_per_class", "500"), ("test_per_class", "200"), ("ood_count", "400"),
        ("mean_scale", "0"),
        ("spectrum_0", s0), ("spectrum_1", s1),
        ("ood_mode", "in_subspace_outlier"), ("outlier_min_mahal", min_mahal),
        ("seed", seed),
    ])).unwrap();
    let (train, test_in, test_ood) = generate(&fig2).unwrap();
    let pca = fit_pca(&train.x, ReductionCriterion::VarianceFraction(0.995)).unwrap();
    let groups = split_per_class(&train).unwrap();
    let reduced: Vec<(usize, DMatrix<f64>)> = groups.iter().map(|(k, xk)| {
        let mut zk = DMatrix::zeros(xk.nrows(), pca.dim());
        for i in 0..xk.nrows() {
            zk.row_mut(i).copy_from(&pca.project(&xk.row(i).transpose()).unwrap().transpose());
        }
        (*k, zk)
    }).collect();
    let ll = |model: &dfm_core::density::ClassConditionalModel, fs: &FeatureSet| -> Vec<f64> {
        (0..fs.num_samples()).map(|i| model.confidence_ll(&pca.project(&fs.row(i)).unwrap()).unwrap()).collect()
    };
    let mut aurocs = Vec::new();
    for kind in [DensityKind::SharedGaussian, DensityKind::SeparateGaussian] {
        let model = fit_class_conditional(&reduced, &DensityConfig { kind, ..Default::default() }).unwrap();
        aurocs.push(auroc(&ll(&model, &test_in), &ll(&model, &test_ood)).unwrap());
    }
    println!("fig2 mahal={min_mahal} s0={s0} s1={s1} seed={seed}: shared={:.4} separate={:.4} margin={:.4}",
        aurocs[0], aurocs[1], aurocs[1] - aurocs[0]);
}

fn main() {
    for seed in ["1234", "99", "7"] {
        fig2_margin("3.5", "1,1,0.0001", "0.0001,0.0001,4", seed);
        fig2_margin("3.5", "1,1,0.0001", "0.0001,0.0001,9", seed);
        fig2_margin("3.0", "1,1,0.0001", "0.0001,0.0001,9", seed);
    }

    // criterion 8 with a harder default spec
    let t0 = Instant::now();
    let dflt = SynthSpec::from_kv(&kv(&[
        ("ambient_dim", "512"), ("intrinsic_dim", "20"), ("classes", "4"),
        ("train_per_class", "500"), ("test_per_class", "50"), ("ood_count", "200"),
        ("mean_scale", "3"), ("noise_floor", "0.05"),
        ("ood_mode", "off_subspace"), ("ood_magnitude", "0.6"),
        ("seed", "77"),
    ])).unwrap();
    let (train, test_in, test_ood) = generate(&dflt).unwrap();
    let gamma = dfm_core::kernel_subspace::median_heuristic_gamma(&train.x, 7).unwrap();
    let cfg = FitConfig {
        seed: 7,
        pca_criterion: ReductionCriterion::FixedDim(20),
        kpca_criterion: ReductionCriterion::FixedDim(24),
        gamma: GammaSpec::Absolute(gamma),
        max_anchors: 400,
        ..Default::default()
    };
    let model = fit(&train, &cfg).unwrap();
    let tin = score(&model, &test_in, None).unwrap();
    let tood = score(&model, &test_ood, None).unwrap();
    let base: Vec<(String, f64)> = ["mahal", "ll", "pes", "kll", "kpes"].iter().map(|c| {
        (c.to_string(), auroc(tin.column(c).unwrap(), tood.column(c).unwrap()).unwrap())
    }).collect();
    println!("baseline aurocs: {base:?}");

    let mut worst: f64 = 0.0;
    let mut small = std::collections::BTreeMap::<String, usize>::new();
    for trial in 0..10u64 {
        let sub = subsample(&train, 0.2, 1000 + trial).unwrap();
        let m2 = fit(&sub, &cfg).unwrap();
        let i2 = score(&m2, &test_in, None).unwrap();
        let o2 = score(&m2, &test_ood, None).unwrap();
        let mut line = format!("trial {trial}:");
        for (c, b) in &base {
            let a = auroc(i2.column(c).unwrap(), o2.column(c).unwrap()).unwrap();
            let d = (a - b).abs();
            worst = worst.max(d);
            if d < 0.01 { *small.entry(c.clone()).or_default() += 1; }
            line += &format!(" {c} {:+.4}", a - b);
        }
        println!("{line}");
    }
    println!("worst delta = {worst:.4}; <1pt counts per family = {small:?}");
    println!("robustness block: {:?}", t0.elapsed());
}
