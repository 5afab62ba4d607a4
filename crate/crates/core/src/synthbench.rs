//! Deterministic synthetic benchmark generator: low-dimensional class
//! clusters embedded in a high-dimensional ambient space, with optional
//! heteroscedastic class spectra, ambient noise, and three OOD modes.
//!
//! Geometry: a seeded random d-dimensional orthonormal basis B in D dims;
//! class k draws subspace coordinates from N(mu_k, diag(spectrum_k)) and
//! maps them through B, plus isotropic ambient noise at the noise floor.
//! OOD samples either leave the subspace (off_subspace), shift far inside
//! it (far_shift), or stay inside it but away from every class
//! (in_subspace_outlier).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature_store::FeatureSet;
use crate::rng::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OodMode {
    /// In-subspace coordinates from a unit Gaussian at the origin (a
    /// different distribution than any class), plus an orthogonal offset of
    /// length `ood_magnitude`.
    OffSubspace,
    /// Class-like sample shifted by `ood_magnitude` along a random
    /// in-subspace direction.
    FarShift,
    /// Rejection-sampled in-subspace points whose true Mahalanobis distance
    /// to every class exceeds `outlier_min_mahal`.
    InSubspaceOutlier,
}

impl std::fmt::Display for OodMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OodMode::OffSubspace => write!(f, "off_subspace"),
            OodMode::FarShift => write!(f, "far_shift"),
            OodMode::InSubspaceOutlier => write!(f, "in_subspace_outlier"),
        }
    }
}

impl std::str::FromStr for OodMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off_subspace" => Ok(OodMode::OffSubspace),
            "far_shift" => Ok(OodMode::FarShift),
            "in_subspace_outlier" => Ok(OodMode::InSubspaceOutlier),
            other => Err(Error::Config(format!("unknown ood mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub ambient_dim: usize,
    pub intrinsic_dim: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ood_count: usize,
    /// Class means are mean_scale * N(0, I_d) draws in the subspace.
    pub mean_scale: f64,
    /// Per-class coordinate variances, each of length intrinsic_dim.
    pub spectra: Vec<Vec<f64>>,
    pub ood_mode: OodMode,
    pub ood_magnitude: f64,
    pub outlier_min_mahal: f64,
    pub noise_floor: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.intrinsic_dim >= self.ambient_dim {
            return Err(Error::Config(format!(
                "intrinsic_dim {} must be below ambient_dim {}",
                self.intrinsic_dim, self.ambient_dim
            )));
        }
        if self.intrinsic_dim == 0 || self.classes == 0 {
            return Err(Error::Config(
                "intrinsic_dim and classes must be positive".into(),
            ));
        }
        if self.train_per_class < 2 || self.test_per_class < 2 || self.ood_count < 2 {
            return Err(Error::Config("all sample counts must be at least 2".into()));
        }
        if self.spectra.len() != self.classes {
            return Err(Error::Config(format!(
                "need {} class spectra, got {}",
                self.classes,
                self.spectra.len()
            )));
        }
        for (k, s) in self.spectra.iter().enumerate() {
            if s.len() != self.intrinsic_dim {
                return Err(Error::Config(format!(
                    "spectrum for class {k} has length {}, expected {}",
                    s.len(),
                    self.intrinsic_dim
                )));
            }
            if s.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!(
                    "spectrum for class {k} must be positive"
                )));
            }
        }
        if self.mean_scale < 0.0 || self.noise_floor < 0.0 {
            return Err(Error::Config(
                "mean_scale and noise_floor must be nonnegative".into(),
            ));
        }
        if !(self.ood_magnitude > 0.0) {
            return Err(Error::Config("ood_magnitude must be positive".into()));
        }
        Ok(())
    }

    /// Parses the plain-text key=value spec format. Spectrum values accept
    /// a repeat suffix: "10,5,1x18" is 10, 5, then 1 repeated 18 times.
    pub fn from_kv(pairs: &[(String, String)]) -> Result<SynthSpec> {
        let mut spec = SynthSpec {
            ambient_dim: 0,
            intrinsic_dim: 0,
            classes: 0,
            train_per_class: 0,
            test_per_class: 100,
            ood_count: 400,
            mean_scale: 10.0,
            spectra: Vec::new(),
            ood_mode: OodMode::OffSubspace,
            ood_magnitude: 1.0,
            outlier_min_mahal: 4.0,
            noise_floor: 0.0,
            seed: 0,
        };
        let mut shared_spectrum: Option<Vec<f64>> = None;
        let mut class_spectra: Vec<(usize, Vec<f64>)> = Vec::new();

        for (key, value) in pairs {
            match key.as_str() {
                "ambient_dim" => spec.ambient_dim = parse_num(key, value)?,
                "intrinsic_dim" => spec.intrinsic_dim = parse_num(key, value)?,
                "classes" => spec.classes = parse_num(key, value)?,
                "train_per_class" => spec.train_per_class = parse_num(key, value)?,
                "test_per_class" => spec.test_per_class = parse_num(key, value)?,
                "ood_count" => spec.ood_count = parse_num(key, value)?,
                "mean_scale" => spec.mean_scale = parse_num(key, value)?,
                "ood_mode" => spec.ood_mode = value.parse()?,
                "ood_magnitude" => spec.ood_magnitude = parse_num(key, value)?,
                "outlier_min_mahal" => spec.outlier_min_mahal = parse_num(key, value)?,
                "noise_floor" => spec.noise_floor = parse_num(key, value)?,
                "seed" => spec.seed = parse_num(key, value)?,
                "spectrum" => shared_spectrum = Some(parse_spectrum(value)?),
                other => {
                    if let Some(idx) = other.strip_prefix("spectrum_") {
                        let k: usize = idx.parse().map_err(|_| {
                            Error::Config(format!("bad class index in key '{other}'"))
                        })?;
                        class_spectra.push((k, parse_spectrum(value)?));
                    } else {
                        return Err(Error::Config(format!("unknown synth spec key '{other}'")));
                    }
                }
            }
        }

        if spec.ambient_dim == 0
            || spec.intrinsic_dim == 0
            || spec.classes == 0
            || spec.train_per_class == 0
        {
            return Err(Error::Config(
                "synth spec requires ambient_dim, intrinsic_dim, classes, train_per_class".into(),
            ));
        }

        let broadcast = |s: Vec<f64>| -> Result<Vec<f64>> {
            if s.len() == 1 {
                Ok(vec![s[0]; spec.intrinsic_dim])
            } else if s.len() == spec.intrinsic_dim {
                Ok(s)
            } else {
                Err(Error::Config(format!(
                    "spectrum length {} does not match intrinsic_dim {}",
                    s.len(),
                    spec.intrinsic_dim
                )))
            }
        };
        let base = broadcast(shared_spectrum.unwrap_or_else(|| vec![1.0]))?;
        spec.spectra = vec![base; spec.classes];
        for (k, s) in class_spectra {
            if k >= spec.classes {
                return Err(Error::Config(format!(
                    "spectrum_{k} out of range for {} classes",
                    spec.classes
                )));
            }
            spec.spectra[k] = broadcast(s)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for key '{key}'")))
}

fn parse_spectrum(value: &str) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for token in value.split(',') {
        let token = token.trim();
        if token.is_empty() {
            continue;
        }
        if let Some((v, n)) = token.split_once('x') {
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad spectrum token '{token}'")))?;
            let n: usize = n
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad spectrum token '{token}'")))?;
            out.extend(std::iter::repeat(v).take(n));
        } else {
            out.push(
                token
                    .parse()
                    .map_err(|_| Error::Config(format!("bad spectrum token '{token}'")))?,
            );
        }
    }
    if out.is_empty() {
        return Err(Error::Config("empty spectrum".into()));
    }
    Ok(out)
}

struct Geometry {
    basis: DMatrix<f64>, // D x d, orthonormal columns
    means: Vec<DVector<f64>>,
}

fn build_geometry(spec: &SynthSpec) -> Geometry {
    let d_amb = spec.ambient_dim;
    let d_int = spec.intrinsic_dim;
    let mut rng = rng_for(spec.seed, "synth.basis");
    let raw = DMatrix::from_fn(d_amb, d_int, |_, _| {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    let basis = raw.qr().q();

    let mut mean_rng = rng_for(spec.seed, "synth.means");
    let means = (0..spec.classes)
        .map(|_| {
            DVector::from_fn(d_int, |_, _| {
                spec.mean_scale * mean_rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
        })
        .collect();
    Geometry { basis, means }
}

fn class_sample(
    spec: &SynthSpec,
    geo: &Geometry,
    class: usize,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    let z = DVector::from_fn(spec.intrinsic_dim, |j, _| {
        geo.means[class][j]
            + spec.spectra[class][j].sqrt() * rng.sample::<f64, _>(rand_distr::StandardNormal)
    });
    ambient(spec, geo, &z, rng)
}

fn ambient(
    spec: &SynthSpec,
    geo: &Geometry,
    z: &DVector<f64>,
    rng: &mut ChaCha8Rng,
) -> DVector<f64> {
    let mut x = &geo.basis * z;
    if spec.noise_floor > 0.0 {
        for v in x.iter_mut() {
            *v += spec.noise_floor * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
    x
}

fn labeled_split(
    spec: &SynthSpec,
    geo: &Geometry,
    per_class: usize,
    layer_id: &str,
    stream: &str,
) -> Result<FeatureSet> {
    let total = per_class * spec.classes;
    let mut x = DMatrix::zeros(total, spec.ambient_dim);
    let mut labels = Vec::with_capacity(total);
    let mut row = 0;
    for k in 0..spec.classes {
        let mut rng = rng_for(spec.seed, &format!("synth.{stream}.class.{k}"));
        for _ in 0..per_class {
            x.row_mut(row)
                .copy_from(&class_sample(spec, geo, k, &mut rng).transpose());
            labels.push(k);
            row += 1;
        }
    }
    FeatureSet::labeled(layer_id, x, labels)
}

fn ood_split(spec: &SynthSpec, geo: &Geometry) -> Result<FeatureSet> {
    let d_int = spec.intrinsic_dim;
    let mut rng = rng_for(spec.seed, "synth.ood");
    let mut x = DMatrix::zeros(spec.ood_count, spec.ambient_dim);

    // Proposal scale for the rejection sampler: cover the class means and
    // the widest class spread.
    let max_std = spec
        .spectra
        .iter()
        .flatten()
        .fold(0.0f64, |a, &v| a.max(v.sqrt()));
    let mut proposal_scale = 2.0 * (spec.mean_scale + max_std);

    for row in 0..spec.ood_count {
        let sample = match spec.ood_mode {
            OodMode::OffSubspace => {
                let z = DVector::from_fn(d_int, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let ortho = orthogonal_direction(&geo.basis, &mut rng);
                let mut s = ambient(spec, geo, &z, &mut rng);
                s += ortho * spec.ood_magnitude;
                s
            }
            OodMode::FarShift => {
                let class = rng.random_range(0..spec.classes);
                let mut z = DVector::from_fn(d_int, |j, _| {
                    geo.means[class][j]
                        + spec.spectra[class][j].sqrt()
                            * rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                let mut u = DVector::from_fn(d_int, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                u /= u.norm();
                z += u * spec.ood_magnitude;
                ambient(spec, geo, &z, &mut rng)
            }
            OodMode::InSubspaceOutlier => {
                let mut attempts = 0usize;
                let z = loop {
                    let cand = DVector::from_fn(d_int, |_, _| {
                        proposal_scale * rng.sample::<f64, _>(rand_distr::StandardNormal)
                    });
                    let min_mahal = (0..spec.classes)
                        .map(|k| {
                            (0..d_int)
                                .map(|j| {
                                    let diff = cand[j] - geo.means[k][j];
                                    diff * diff / spec.spectra[k][j]
                                })
                                .sum::<f64>()
                                .sqrt()
                        })
                        .fold(f64::INFINITY, f64::min);
                    if min_mahal > spec.outlier_min_mahal {
                        break cand;
                    }
                    attempts += 1;
                    if attempts % 1000 == 0 {
                        proposal_scale *= 1.5;
                    }
                };
                ambient(spec, geo, &z, &mut rng)
            }
        };
        x.row_mut(row).copy_from(&sample.transpose());
    }
    FeatureSet::unlabeled("test_ood", x)
}

/// Unit vector orthogonal to the basis columns.
fn orthogonal_direction(basis: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    loop {
        let g = DVector::from_fn(basis.nrows(), |_, _| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let residual = &g - basis * (basis.transpose() * &g);
        let norm = residual.norm();
        if norm > 1e-9 {
            return residual / norm;
        }
    }
}

/// Generates (train, test_in, test_ood). Pure in the spec: the same spec
/// yields bit-identical datasets.
pub fn generate(spec: &SynthSpec) -> Result<(FeatureSet, FeatureSet, FeatureSet)> {
    spec.validate()?;
    let geo = build_geometry(spec);
    let train = labeled_split(spec, &geo, spec.train_per_class, "train", "train")?;
    let test_in = labeled_split(spec, &geo, spec.test_per_class, "test_in", "test")?;
    let test_ood = ood_split(spec, &geo)?;
    Ok((train, test_in, test_ood))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::numerical_rank;
    use crate::linear_subspace::{fit_pca, ReductionCriterion};

    fn kv(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect()
    }

    fn small_spec() -> SynthSpec {
        SynthSpec::from_kv(&kv(&[
            ("ambient_dim", "32"),
            ("intrinsic_dim", "4"),
            ("classes", "2"),
            ("train_per_class", "60"),
            ("test_per_class", "30"),
            ("ood_count", "60"),
            ("mean_scale", "6"),
            ("seed", "5"),
        ]))
        .unwrap()
    }

    #[test]
    fn kv_parsing_with_repeat_and_override() {
        let spec = SynthSpec::from_kv(&kv(&[
            ("ambient_dim", "16"),
            ("intrinsic_dim", "3"),
            ("classes", "2"),
            ("train_per_class", "50"),
            ("spectrum", "1x3"),
            ("spectrum_1", "0.01,0.01,4"),
            ("ood_mode", "in_subspace_outlier"),
        ]))
        .unwrap();
        assert_eq!(spec.spectra[0], vec![1.0, 1.0, 1.0]);
        assert_eq!(spec.spectra[1], vec![0.01, 0.01, 4.0]);
        assert_eq!(spec.ood_mode, OodMode::InSubspaceOutlier);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = SynthSpec::from_kv(&kv(&[
            ("ambient_dim", "16"),
            ("intrinsic_dim", "3"),
            ("classes", "2"),
            ("train_per_class", "50"),
            ("bogus", "1"),
        ]));
        assert!(err.is_err());
    }

    #[test]
    fn invalid_geometry_rejected() {
        let mut spec = small_spec();
        spec.intrinsic_dim = spec.ambient_dim;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = small_spec();
        let (a_train, a_in, a_ood) = generate(&spec).unwrap();
        let (b_train, b_in, b_ood) = generate(&spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_in, b_in);
        assert_eq!(a_ood, b_ood);
        let mut other = spec.clone();
        other.seed += 1;
        let (c_train, _, _) = generate(&other).unwrap();
        assert_ne!(a_train.x, c_train.x);
    }

    #[test]
    fn zero_noise_rank_is_intrinsic_dim() {
        let spec = small_spec();
        let (train, test_in, _) = generate(&spec).unwrap();
        assert_eq!(numerical_rank(&train.x, 1e-6, &[]).rank, 4);
        assert_eq!(numerical_rank(&test_in.x, 1e-6, &[]).rank, 4);
    }

    #[test]
    fn zero_noise_off_subspace_is_perfectly_separated() {
        let spec = small_spec();
        let (train, test_in, test_ood) = generate(&spec).unwrap();
        let pca = fit_pca(&train.x, ReductionCriterion::FixedDim(4)).unwrap();
        for i in 0..test_in.num_samples() {
            let e = pca.reconstruction_error(&test_in.row(i)).unwrap();
            assert!(e < 1e-8, "in-dist error {e}");
        }
        for i in 0..test_ood.num_samples() {
            let e = pca.reconstruction_error(&test_ood.row(i)).unwrap();
            assert!(e > 0.9, "ood error {e} below injected magnitude");
        }
    }

    #[test]
    fn off_subspace_error_lower_bound_with_noise() {
        let mut spec = small_spec();
        spec.noise_floor = 0.01;
        spec.ood_magnitude = 1.0;
        let (train, _, test_ood) = generate(&spec).unwrap();
        let pca = fit_pca(&train.x, ReductionCriterion::FixedDim(4)).unwrap();
        let bound = spec.ood_magnitude - 3.0 * spec.noise_floor;
        for i in 0..test_ood.num_samples() {
            let e = pca.reconstruction_error(&test_ood.row(i)).unwrap();
            assert!(e >= bound, "ood error {e} below {bound}");
        }
    }

    #[test]
    fn far_shift_is_invisible_to_reconstruction_but_not_likelihood() {
        let mut spec = small_spec();
        spec.ood_mode = OodMode::FarShift;
        spec.ood_magnitude = 40.0;
        let (train, test_in, test_ood) = generate(&spec).unwrap();
        let pca = fit_pca(&train.x, ReductionCriterion::FixedDim(4)).unwrap();

        // Reconstruction error stays at noise level for in-subspace shifts.
        for i in 0..test_ood.num_samples() {
            let e = pca.reconstruction_error(&test_ood.row(i)).unwrap();
            assert!(e < 1e-6, "far-shift ood has off-subspace error {e}");
        }

        // Log-likelihood separates them.
        let groups = crate::feature_store::split_per_class(&train).unwrap();
        let reduced: Vec<(usize, DMatrix<f64>)> = groups
            .iter()
            .map(|(k, xk)| {
                let mut zk = DMatrix::zeros(xk.nrows(), 4);
                for i in 0..xk.nrows() {
                    zk.row_mut(i)
                        .copy_from(&pca.project(&xk.row(i).transpose()).unwrap().transpose());
                }
                (*k, zk)
            })
            .collect();
        let model = crate::density::fit_class_conditional(&reduced, &Default::default()).unwrap();
        let ll = |fs: &FeatureSet| -> Vec<f64> {
            (0..fs.num_samples())
                .map(|i| {
                    model
                        .confidence_ll(&pca.project(&fs.row(i)).unwrap())
                        .unwrap()
                })
                .collect()
        };
        let auroc = crate::eval::auroc(&ll(&test_in), &ll(&test_ood)).unwrap();
        assert!(auroc > 0.99, "far-shift LL auroc {auroc}");
    }

    #[test]
    fn in_subspace_outliers_clear_every_class() {
        let spec = SynthSpec::from_kv(&kv(&[
            ("ambient_dim", "16"),
            ("intrinsic_dim", "3"),
            ("classes", "2"),
            ("train_per_class", "100"),
            ("test_per_class", "50"),
            ("ood_count", "80"),
            ("mean_scale", "0"),
            ("spectrum_0", "1,1,0.0001"),
            ("spectrum_1", "0.0001,0.0001,4"),
            ("ood_mode", "in_subspace_outlier"),
            ("outlier_min_mahal", "4"),
            ("seed", "3"),
        ]))
        .unwrap();
        let (_, _, test_ood) = generate(&spec).unwrap();
        let geo = build_geometry(&spec);
        for i in 0..test_ood.num_samples() {
            let z = geo.basis.transpose() * test_ood.row(i);
            // Still inside the subspace...
            let back = &geo.basis * &z;
            assert!((back - test_ood.row(i)).norm() < 1e-9);
            // ...but far from both classes in their own metric.
            for k in 0..spec.classes {
                let mahal: f64 = (0..3)
                    .map(|j| {
                        let diff = z[j] - geo.means[k][j];
                        diff * diff / spec.spectra[k][j]
                    })
                    .sum::<f64>()
                    .sqrt();
                assert!(mahal > 4.0, "outlier {i} mahal {mahal} to class {k}");
            }
        }
    }
}
