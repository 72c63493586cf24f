//! Synthetic audio-visual scenes with planted sound sources and controllable
//! noisy correspondences.
//!
//! Each class owns a unit prototype in latent space. A scene plants an
//! axis-aligned rectangle whose feature columns are the class prototype plus
//! Gaussian noise; every other column is a fresh random unit vector plus
//! noise. The paired audio is the prototype plus noise, except that with
//! probability `faulty_positive_rate` it is taken from another class (a
//! faulty positive). Faulty negatives arise on their own whenever a batch
//! holds two scenes of the same class.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::Rect;
use crate::numerics::{dot, Grid3, NumericsError, RngStream, Vec1};

/// Cap on rejection-sampling draws for class prototypes.
pub const PROTOTYPE_MAX_ATTEMPTS: usize = 100_000;
/// Largest allowed `|cos|` between two prototypes.
pub const PROTOTYPE_MAX_ABS_COS: f64 = 0.3;

const STREAM_PROTOTYPES: u64 = 0;
const STREAM_TRAIN: u64 = 1 << 40;
const STREAM_HEARD: u64 = 2 << 40;
const STREAM_UNHEARD: u64 = 3 << 40;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("could not place {classes} prototypes with |cos| <= {max_cos} in {dim} dimensions after {attempts} draws")]
    PrototypePacking {
        classes: usize,
        dim: usize,
        max_cos: f64,
        attempts: usize,
    },
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("heard and unheard class sets overlap on {0:?}")]
    OverlappingSplit(Vec<usize>),
    #[error("{0} class set is empty")]
    EmptyClassSet(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "SynthConfig::default_num_classes")]
    pub num_classes: usize,
    #[serde(default = "SynthConfig::default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "SynthConfig::default_grid")]
    pub grid_h: usize,
    #[serde(default = "SynthConfig::default_grid")]
    pub grid_w: usize,
    #[serde(default = "SynthConfig::default_source_region_frac")]
    pub source_region_frac: f64,
    #[serde(default = "SynthConfig::default_faulty_positive_rate")]
    pub faulty_positive_rate: f64,
    #[serde(default = "SynthConfig::default_feature_noise_std")]
    pub feature_noise_std: f64,
    #[serde(default = "SynthConfig::default_samples_per_class")]
    pub samples_per_class: usize,
    /// Scenes per class in each test split.
    #[serde(default = "SynthConfig::default_test_samples_per_class")]
    pub test_samples_per_class: usize,
    #[serde(default)]
    pub seed: u64,
}

impl SynthConfig {
    fn default_num_classes() -> usize {
        10
    }
    fn default_latent_dim() -> usize {
        32
    }
    fn default_grid() -> usize {
        8
    }
    fn default_source_region_frac() -> f64 {
        0.5
    }
    fn default_faulty_positive_rate() -> f64 {
        0.2
    }
    fn default_feature_noise_std() -> f64 {
        0.2
    }
    fn default_samples_per_class() -> usize {
        64
    }
    fn default_test_samples_per_class() -> usize {
        32
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let fail = |msg: String| Err(SynthError::InvalidConfig(msg));
        if self.num_classes == 0 {
            return fail("num_classes must be positive".into());
        }
        if self.latent_dim == 0 || self.grid_h == 0 || self.grid_w == 0 {
            return fail("latent_dim, grid_h and grid_w must be positive".into());
        }
        if !(self.source_region_frac > 0.0 && self.source_region_frac <= 1.0) {
            return fail(format!(
                "source_region_frac must be in (0, 1], got {}",
                self.source_region_frac
            ));
        }
        if !(0.0..=1.0).contains(&self.faulty_positive_rate) {
            return fail(format!(
                "faulty_positive_rate must be in [0, 1], got {}",
                self.faulty_positive_rate
            ));
        }
        if !(self.feature_noise_std >= 0.0 && self.feature_noise_std.is_finite()) {
            return fail(format!(
                "feature_noise_std must be >= 0, got {}",
                self.feature_noise_std
            ));
        }
        if self.samples_per_class == 0 {
            return fail("samples_per_class must be positive".into());
        }
        Ok(())
    }

    /// Source rectangle size in cells, aspect ratio following the grid.
    pub fn source_rect_cells(&self) -> (usize, usize) {
        let side = self.source_region_frac.sqrt();
        let rh = ((self.grid_h as f64 * side).round() as usize).clamp(1, self.grid_h);
        let rw = ((self.grid_w as f64 * side).round() as usize).clamp(1, self.grid_w);
        (rh, rw)
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: Self::default_num_classes(),
            latent_dim: Self::default_latent_dim(),
            grid_h: Self::default_grid(),
            grid_w: Self::default_grid(),
            source_region_frac: Self::default_source_region_frac(),
            faulty_positive_rate: Self::default_faulty_positive_rate(),
            feature_noise_std: Self::default_feature_noise_std(),
            samples_per_class: Self::default_samples_per_class(),
            test_samples_per_class: Self::default_test_samples_per_class(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub id: String,
    pub image: Grid3,
    pub audio: Vec1,
    pub gt_region: Rect,
    pub class_id: usize,
    /// Class the audio was actually drawn from.
    pub audio_class: usize,
    pub is_faulty_positive: bool,
}

/// Rejection-samples `num_classes` unit prototypes with pairwise `|cos| ≤ 0.3`.
pub fn make_class_prototypes(cfg: &SynthConfig, rng: &mut RngStream) -> Result<Vec<Vec1>, SynthError> {
    cfg.validate()?;
    let mut accepted: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0;
    while accepted.len() < cfg.num_classes {
        if attempts >= PROTOTYPE_MAX_ATTEMPTS {
            return Err(SynthError::PrototypePacking {
                classes: cfg.num_classes,
                dim: cfg.latent_dim,
                max_cos: PROTOTYPE_MAX_ABS_COS,
                attempts,
            });
        }
        attempts += 1;
        let cand = rng.unit_vec(cfg.latent_dim);
        if accepted
            .iter()
            .all(|p| dot(p, &cand).abs() <= PROTOTYPE_MAX_ABS_COS)
        {
            accepted.push(cand);
        }
    }
    accepted
        .into_iter()
        .map(|v| Vec1::new(v).map_err(SynthError::from))
        .collect()
}

/// Scene factory holding the class prototypes of one configuration.
#[derive(Debug, Clone)]
pub struct SceneGenerator {
    cfg: SynthConfig,
    prototypes: Vec<Vec1>,
}

impl SceneGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self, SynthError> {
        let mut rng = RngStream::new(cfg.seed, STREAM_PROTOTYPES);
        let prototypes = make_class_prototypes(&cfg, &mut rng)?;
        Ok(Self { cfg, prototypes })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn prototypes(&self) -> &[Vec1] {
        &self.prototypes
    }

    fn noisy(&self, base: &[f64], rng: &mut RngStream) -> Vec<f64> {
        let s = self.cfg.feature_noise_std;
        base.iter()
            .map(|&b| if s > 0.0 { b + s * rng.normal() } else { b })
            .collect()
    }

    /// One scene of `class_id`, corrupted with the configured rate.
    pub fn generate_scene(&self, class_id: usize, rng: &mut RngStream) -> Result<SyntheticScene, SynthError> {
        self.generate_scene_with_rate(class_id, self.cfg.faulty_positive_rate, rng)
    }

    pub fn generate_scene_with_rate(
        &self,
        class_id: usize,
        faulty_positive_rate: f64,
        rng: &mut RngStream,
    ) -> Result<SyntheticScene, SynthError> {
        let k = self.cfg.num_classes;
        if class_id >= k {
            return Err(SynthError::ClassOutOfRange {
                class: class_id,
                num_classes: k,
            });
        }
        let (h, w, c) = (self.cfg.grid_h, self.cfg.grid_w, self.cfg.latent_dim);
        let (rh, rw) = self.cfg.source_rect_cells();
        let y0 = rng.below(h - rh + 1);
        let x0 = rng.below(w - rw + 1);
        let proto = self.prototypes[class_id].as_slice();

        let mut image = Grid3::zeros(c, h, w);
        for y in 0..h {
            for x in 0..w {
                let inside = y >= y0 && y < y0 + rh && x >= x0 && x < x0 + rw;
                let col = if inside {
                    self.noisy(proto, rng)
                } else {
                    let bg = rng.unit_vec(c);
                    self.noisy(&bg, rng)
                };
                image.set_column(y * w + x, &col);
            }
        }

        let faulty = k > 1 && rng.bernoulli(faulty_positive_rate);
        let audio_class = if faulty {
            let other = rng.below(k - 1);
            if other >= class_id {
                other + 1
            } else {
                other
            }
        } else {
            class_id
        };
        let audio = Vec1::new(self.noisy(self.prototypes[audio_class].as_slice(), rng))?;
        let gt_region = Rect {
            x0: x0 as f64 / w as f64,
            y0: y0 as f64 / h as f64,
            x1: (x0 + rw) as f64 / w as f64,
            y1: (y0 + rh) as f64 / h as f64,
        };
        Ok(SyntheticScene {
            id: String::new(),
            image: Grid3::from_vec(c, h, w, image.as_slice().to_vec())?,
            audio,
            gt_region,
            class_id,
            audio_class,
            is_faulty_positive: faulty,
        })
    }

    /// `count` scenes cycling through `classes`, one random stream per scene.
    fn generate_set(
        &self,
        classes: &[usize],
        count: usize,
        rate: f64,
        stream_base: u64,
        prefix: &str,
    ) -> Result<Vec<SyntheticScene>, SynthError> {
        (0..count)
            .map(|k| {
                let mut rng = RngStream::new(self.cfg.seed, stream_base + k as u64);
                let mut scene = self.generate_scene_with_rate(classes[k % classes.len()], rate, &mut rng)?;
                scene.id = format!("{prefix}-{k:06}");
                Ok(scene)
            })
            .collect()
    }
}

/// Training scenes plus clean heard- and unheard-class test scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub heard_classes: Vec<usize>,
    pub unheard_classes: Vec<usize>,
    pub train: Vec<SyntheticScene>,
    pub heard_test: Vec<SyntheticScene>,
    pub unheard_test: Vec<SyntheticScene>,
}

fn build_split(
    gen: &SceneGenerator,
    heard: &BTreeSet<usize>,
    unheard: &BTreeSet<usize>,
) -> Result<Split, SynthError> {
    let cfg = gen.config();
    for &c in heard.iter().chain(unheard) {
        if c >= cfg.num_classes {
            return Err(SynthError::ClassOutOfRange {
                class: c,
                num_classes: cfg.num_classes,
            });
        }
    }
    let overlap: Vec<usize> = heard.intersection(unheard).copied().collect();
    if !overlap.is_empty() {
        return Err(SynthError::OverlappingSplit(overlap));
    }
    let heard_v: Vec<usize> = heard.iter().copied().collect();
    let unheard_v: Vec<usize> = unheard.iter().copied().collect();
    let train = gen.generate_set(
        &heard_v,
        cfg.samples_per_class * heard_v.len(),
        cfg.faulty_positive_rate,
        STREAM_TRAIN,
        "train",
    )?;
    let heard_test = gen.generate_set(
        &heard_v,
        cfg.test_samples_per_class * heard_v.len(),
        0.0,
        STREAM_HEARD,
        "heard",
    )?;
    let unheard_test = if unheard_v.is_empty() {
        Vec::new()
    } else {
        gen.generate_set(
            &unheard_v,
            cfg.test_samples_per_class * unheard_v.len(),
            0.0,
            STREAM_UNHEARD,
            "unheard",
        )?
    };
    Ok(Split {
        heard_classes: heard_v,
        unheard_classes: unheard_v,
        train,
        heard_test,
        unheard_test,
    })
}

/// Open-set split: train and heard-test on `heard`, clean unheard-test on `unheard`.
///
/// The random stream is addressed by `cfg.seed`; per-scene streams make the
/// result independent of generation order.
pub fn make_split(
    cfg: &SynthConfig,
    heard: &BTreeSet<usize>,
    unheard: &BTreeSet<usize>,
) -> Result<Split, SynthError> {
    if heard.is_empty() {
        return Err(SynthError::EmptyClassSet("heard"));
    }
    if unheard.is_empty() {
        return Err(SynthError::EmptyClassSet("unheard"));
    }
    build_split(&SceneGenerator::new(cfg.clone())?, heard, unheard)
}

/// Closed-set split over every class: train plus a clean test set, no unheard classes.
pub fn make_closed_split(cfg: &SynthConfig) -> Result<Split, SynthError> {
    let all: BTreeSet<usize> = (0..cfg.num_classes).collect();
    build_split(&SceneGenerator::new(cfg.clone())?, &all, &BTreeSet::new())
}

/// Ordered off-diagonal pairs `(i, j)`, `i ≠ j`, whose classes agree: the
/// faulty negatives an in-batch contrastive loss sees.
pub fn count_same_class_pairs(classes: &[usize]) -> usize {
    let mut count = 0;
    for (i, a) in classes.iter().enumerate() {
        for (j, b) in classes.iter().enumerate() {
            if i != j && a == b {
                count += 1;
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::avmap::cosine_response_map;

    fn cfg() -> SynthConfig {
        SynthConfig {
            num_classes: 6,
            latent_dim: 24,
            samples_per_class: 4,
            test_samples_per_class: 2,
            seed: 17,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn prototypes_are_unit_and_spread() {
        let c = SynthConfig { num_classes: 2, latent_dim: 64, ..cfg() };
        let p = make_class_prototypes(&c, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(p.len(), 2);
        for v in &p {
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        assert!(dot(p[0].as_slice(), p[1].as_slice()).abs() <= 0.3);
        let again = make_class_prototypes(&c, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn prototype_packing_infeasible() {
        let c = SynthConfig { num_classes: 32, latent_dim: 2, ..cfg() };
        assert!(matches!(
            make_class_prototypes(&c, &mut RngStream::new(1, 0)),
            Err(SynthError::PrototypePacking { .. })
        ));
    }

    #[test]
    fn noiseless_scene_plants_exact_region() {
        let c = SynthConfig { feature_noise_std: 0.0, faulty_positive_rate: 0.0, ..cfg() };
        let gen = SceneGenerator::new(c.clone()).unwrap();
        let mut rng = RngStream::new(5, 5);
        for class in 0..c.num_classes {
            let s = gen.generate_scene(class, &mut rng).unwrap();
            let map = cosine_response_map(&s.image, &s.audio).unwrap();
            let own = cosine_response_map(&s.image, &gen.prototypes()[class]).unwrap();
            let (mut inside, mut outside) = (Vec::new(), Vec::new());
            for y in 0..c.grid_h {
                for x in 0..c.grid_w {
                    let cx = (x as f64 + 0.5) / c.grid_w as f64;
                    let cy = (y as f64 + 0.5) / c.grid_h as f64;
                    let v = map.values().get(y, x);
                    if s.gt_region.contains(cx, cy) {
                        assert!((v - 1.0).abs() < 1e-9);
                        inside.push(v);
                    } else {
                        outside.push(v);
                    }
                    // argmax region of the prototype map is exactly the planted rectangle
                    let at_max = (own.values().get(y, x) - own.values().max()).abs() < 1e-9;
                    assert_eq!(at_max, s.gt_region.contains(cx, cy));
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean(&inside) > mean(&outside));
        }
    }

    #[test]
    fn forced_corruption() {
        let c = SynthConfig { faulty_positive_rate: 1.0, ..cfg() };
        let gen = SceneGenerator::new(c).unwrap();
        let mut rng = RngStream::new(6, 0);
        for k in 0..50 {
            let s = gen.generate_scene(k % 6, &mut rng).unwrap();
            assert!(s.is_faulty_positive);
            assert_ne!(s.audio_class, s.class_id);
        }
    }

    #[test]
    fn corruption_rate_concentrates() {
        let c = SynthConfig { latent_dim: 8, grid_h: 2, grid_w: 2, faulty_positive_rate: 0.2, ..cfg() };
        let gen = SceneGenerator::new(c).unwrap();
        let mut rng = RngStream::new(7, 0);
        let n = 10_000;
        let faulty = (0..n)
            .filter(|k| gen.generate_scene(k % 6, &mut rng).unwrap().is_faulty_positive)
            .count();
        let sd = (n as f64 * 0.2 * 0.8).sqrt();
        assert!((faulty as f64 - 0.2 * n as f64).abs() < 3.0 * sd, "{faulty}");
    }

    #[test]
    fn split_partitions_and_is_deterministic() {
        let heard: BTreeSet<usize> = (0..3).collect();
        let unheard: BTreeSet<usize> = (3..6).collect();
        let c = SynthConfig { faulty_positive_rate: 0.5, ..cfg() };
        let s = make_split(&c, &heard, &unheard).unwrap();
        assert!(s.train.iter().all(|x| heard.contains(&x.class_id)));
        assert!(s.heard_test.iter().all(|x| heard.contains(&x.class_id) && !x.is_faulty_positive));
        assert!(s.unheard_test.iter().all(|x| unheard.contains(&x.class_id) && !x.is_faulty_positive));
        assert_eq!(s.train.len(), 12);
        assert_eq!(s, make_split(&c, &heard, &unheard).unwrap());

        let bad: BTreeSet<usize> = (2..5).collect();
        assert_eq!(make_split(&c, &heard, &bad).unwrap_err(), SynthError::OverlappingSplit(vec![2]));
        assert!(make_split(&c, &heard, &BTreeSet::new()).is_err());
    }

    #[test]
    fn same_class_pair_count_matches_expectation() {
        let (n, k, batches) = (16usize, 5usize, 1000usize);
        let mut rng = RngStream::new(8, 0);
        let counts: Vec<f64> = (0..batches)
            .map(|_| {
                let classes: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
                count_same_class_pairs(&classes) as f64
            })
            .collect();
        let mean = counts.iter().sum::<f64>() / batches as f64;
        let var = counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
        let expected = (n * (n - 1)) as f64 / k as f64;
        assert!((mean - expected).abs() < 3.0 * (var / batches as f64).sqrt(), "{mean} vs {expected}");
    }
}
