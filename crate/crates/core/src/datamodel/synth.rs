use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::io::MANIFEST_VERSION;
use super::{ClipRecord, DataError, DataFiles, Dataset, DatasetManifest, Dims, Domain};

const BACKGROUND_SOUND: &str = "people talking in the background";

const VERBS: [&str; 16] = [
    "cut", "pour", "mix", "roll", "wash", "knit", "hammer", "paint", "sweep", "dig", "sew", "stir",
    "fold", "scrub", "drill", "peel",
];

/// Controls the synthetic benchmark.
///
/// Every modality feature is `class prototype + domain offset + noise`. The
/// offset is class specific and composed from a scenario part and a location
/// part, so a domain whose scenario and location were both unseen presents
/// entirely new offsets. Shift magnitudes are offset norms; `noise` is the
/// expected norm of the per-clip noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub num_scenarios: usize,
    pub num_locations: usize,
    pub clips_per_domain: usize,
    pub dims: Dims,
    pub shift_appearance: f64,
    pub shift_motion: f64,
    pub shift_audio: f64,
    pub noise: f64,
    pub narration_noise: f64,
    /// Fraction of clips whose audio is an unrelated background sound.
    pub inconsistent_audio_fraction: f64,
    /// Fraction of clips recorded without audio.
    pub missing_audio_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_scenarios: 4,
            num_locations: 4,
            clips_per_domain: 200,
            dims: Dims::default(),
            shift_appearance: 2.0,
            shift_motion: 0.25,
            shift_audio: 0.4,
            noise: 2.0,
            narration_noise: 0.2,
            inconsistent_audio_fraction: 0.0,
            missing_audio_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Config(m));
        if self.num_classes < 2 {
            return err(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            ));
        }
        if self.num_scenarios == 0 || self.num_locations == 0 || self.clips_per_domain == 0 {
            return err("scenario, location and clip counts must be positive".into());
        }
        let d = self.dims;
        if d.appearance == 0 || d.motion == 0 || d.audio == 0 || d.text == 0 {
            return err(format!("all dims must be >= 1, got {d:?}"));
        }
        for (name, v) in [
            ("shift_appearance", self.shift_appearance),
            ("shift_motion", self.shift_motion),
            ("shift_audio", self.shift_audio),
            ("noise", self.noise),
            ("narration_noise", self.narration_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return err(format!("{name} must be a finite value >= 0, got {v}"));
            }
        }
        for (name, v) in [
            (
                "inconsistent_audio_fraction",
                self.inconsistent_audio_fraction,
            ),
            ("missing_audio_fraction", self.missing_audio_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return err(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        Ok(())
    }

    pub fn scenario_name(i: usize) -> String {
        format!("S{i}")
    }

    pub fn location_name(i: usize) -> String {
        format!("L{i}")
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    unit(gaussian(rng, dim))
}

/// Per-class prototypes plus per-(scenario, class) and per-(location, class) directions.
struct ModalityGeometry {
    prototypes: Vec<Vec<f64>>,
    scenario_dirs: Vec<Vec<Vec<f64>>>,
    location_dirs: Vec<Vec<Vec<f64>>>,
    shift: f64,
    dim: usize,
}

impl ModalityGeometry {
    fn draw(rng: &mut ChaCha8Rng, cfg: &SynthConfig, dim: usize, shift: f64) -> Self {
        let c = cfg.num_classes;
        let prototypes = (0..c).map(|_| unit_gaussian(rng, dim)).collect();
        let scenario_dirs = (0..cfg.num_scenarios)
            .map(|_| (0..c).map(|_| unit_gaussian(rng, dim)).collect())
            .collect();
        let location_dirs = (0..cfg.num_locations)
            .map(|_| (0..c).map(|_| unit_gaussian(rng, dim)).collect())
            .collect();
        Self {
            prototypes,
            scenario_dirs,
            location_dirs,
            shift,
            dim,
        }
    }

    /// Noise-free centre of class `c` in domain `(s, l)`.
    fn centre(&self, s: usize, l: usize, c: usize) -> Vec<f64> {
        let dir: Vec<f64> = self.scenario_dirs[s][c]
            .iter()
            .zip(&self.location_dirs[l][c])
            .map(|(a, b)| a + b)
            .collect();
        let dir = unit(dir);
        self.prototypes[c]
            .iter()
            .zip(dir)
            .map(|(p, o)| p + self.shift * o)
            .collect()
    }

    fn sample(&self, rng: &mut ChaCha8Rng, s: usize, l: usize, c: usize, noise: f64) -> Vec<f32> {
        let sd = noise / (self.dim as f64).sqrt();
        self.centre(s, l, c)
            .into_iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                (v + sd * z) as f32
            })
            .collect()
    }
}

fn noisy(rng: &mut ChaCha8Rng, centre: &[f64], noise: f64) -> Vec<f32> {
    let sd = noise / (centre.len() as f64).sqrt();
    centre
        .iter()
        .map(|v| {
            let z: f64 = StandardNormal.sample(rng);
            (v + sd * z) as f32
        })
        .collect()
}

/// Fabricates a dataset with controlled per-modality domain shift.
///
/// Narration features are domain invariant: the visual narration sits near a
/// per-class text prototype, and the audio narration near a correlated
/// per-class audio-text prototype. For the `inconsistent_audio_fraction` of
/// clips the action makes no sound: the audio is an unrelated background
/// sound shared by all classes, and its narration describes that sound. The
/// ground truth is kept in `audio_consistent`, while `consistency` is left
/// for a rater to fill.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset, DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.dims;
    let appearance = ModalityGeometry::draw(&mut rng, cfg, d.appearance, cfg.shift_appearance);
    let motion = ModalityGeometry::draw(&mut rng, cfg, d.motion, cfg.shift_motion);
    let audio = ModalityGeometry::draw(&mut rng, cfg, d.audio, cfg.shift_audio);
    let text_vis: Vec<Vec<f64>> = (0..cfg.num_classes)
        .map(|_| unit_gaussian(&mut rng, d.text))
        .collect();
    let text_aud: Vec<Vec<f64>> = text_vis
        .iter()
        .map(|t| {
            let g = unit_gaussian(&mut rng, d.text);
            unit(t.iter().zip(g).map(|(a, b)| a + b).collect())
        })
        .collect();

    let background_audio = unit_gaussian(&mut rng, d.audio);
    let background_text = unit_gaussian(&mut rng, d.text);
    let class_names: Vec<String> = (0..cfg.num_classes)
        .map(|c| match VERBS.get(c) {
            Some(v) => v.to_string(),
            None => format!("action_{c}"),
        })
        .collect();

    let mut domains = Vec::new();
    let mut records = Vec::new();
    for s in 0..cfg.num_scenarios {
        for l in 0..cfg.num_locations {
            let domain = Domain::new(SynthConfig::scenario_name(s), SynthConfig::location_name(l));
            for k in 0..cfg.clips_per_domain {
                let label = k % cfg.num_classes;
                let missing = rng.random::<f64>() < cfg.missing_audio_fraction;
                let inconsistent = rng.random::<f64>() < cfg.inconsistent_audio_fraction;
                let ap = appearance.sample(&mut rng, s, l, label, cfg.noise);
                let mo = motion.sample(&mut rng, s, l, label, cfg.noise);
                let vn = noisy(&mut rng, &text_vis[label], cfg.narration_noise);
                let (au, an) = if inconsistent {
                    (
                        noisy(&mut rng, &background_audio, cfg.noise),
                        noisy(&mut rng, &background_text, cfg.narration_noise),
                    )
                } else {
                    (
                        audio.sample(&mut rng, s, l, label, cfg.noise),
                        noisy(&mut rng, &text_aud[label], cfg.narration_noise),
                    )
                };
                let aud_text = if inconsistent {
                    BACKGROUND_SOUND.to_string()
                } else {
                    format!("the sound of someone doing: {}", class_names[label])
                };
                records.push(ClipRecord {
                    clip_id: format!("{domain}-{k:04}"),
                    scenario: domain.scenario.clone(),
                    location: domain.location.clone(),
                    label,
                    appearance: ap,
                    motion: mo,
                    audio: (!missing).then_some(au),
                    vis_narration: vn,
                    aud_narration: (!missing).then_some(an),
                    consistency: None,
                    vis_narration_text: Some(format!("#C C is doing: {}", class_names[label])),
                    aud_narration_text: (!missing).then_some(aud_text),
                    audio_consistent: (!missing).then_some(!inconsistent),
                });
            }
            domains.push(domain);
        }
    }

    let test_domains = (0..cfg.num_scenarios.min(cfg.num_locations))
        .map(|i| Domain::new(SynthConfig::scenario_name(i), SynthConfig::location_name(i)))
        .collect();
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        num_classes: cfg.num_classes,
        dims: d,
        class_names,
        domains,
        test_domains,
        record_count: records.len(),
        files: DataFiles::default(),
    };
    Dataset::new(manifest, records)
}
