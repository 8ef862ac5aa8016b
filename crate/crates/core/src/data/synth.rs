use std::f32::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Split, Vocab};
use crate::error::{Error, Result};
use crate::prompt_tuning::HandcraftedPromptSet;
use crate::tensor::Tensor;

/// Shared opening of every handcrafted prompt and caption.
pub const PROMPT_PREFIX: &str = "a chest image showing";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Grating {
    Horizontal(usize),
    Vertical(usize),
    Diagonal,
    AntiDiagonal,
}

/// Class patterns complete whole cycles over the image, so the mean over
/// aligned patches is zero whenever the patch grid has 4 or more rows and
/// columns and the cycle count is 1 or 2.
const CLASSES: [(Grating, &str); 6] = [
    (Grating::Horizontal(1), "pleural effusion"),
    (Grating::Vertical(1), "pulmonary edema"),
    (Grating::Horizontal(2), "pleural thickening"),
    (Grating::Diagonal, "pulmonary nodule"),
    (Grating::Vertical(2), "cardiac enlargement"),
    (Grating::AntiDiagonal, "lung opacity"),
];

const QUADRANTS: [&str; 4] = ["upper left", "upper right", "lower left", "lower right"];
const MARKER_VALUE: f32 = 1.5;
const FAINT: f32 = 0.5;

fn default_attributes() -> bool {
    true
}

fn default_bare_fraction() -> f64 {
    0.25
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub image_size: usize,
    pub noise_std: f32,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Per-sample intensity and marker quadrant, drawn into the image and
    /// named in the caption.
    #[serde(default = "default_attributes")]
    pub attributes: bool,
    /// Share of attribute-bearing samples whose caption is the bare class prompt.
    #[serde(default = "default_bare_fraction")]
    pub bare_caption_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_classes: 4,
            image_size: 16,
            noise_std: 0.2,
            samples_per_class: 200,
            seed: 0,
            attributes: true,
            bare_caption_fraction: 0.25,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=CLASSES.len()).contains(&self.n_classes) {
            return Err(Error::Config(format!(
                "n_classes must be in 2..={}, got {}",
                CLASSES.len(),
                self.n_classes
            )));
        }
        if self.image_size < 4 || self.image_size % 4 != 0 {
            return Err(Error::Config(format!(
                "image_size must be a multiple of 4, got {}",
                self.image_size
            )));
        }
        if !(self.noise_std >= 0.0) || !self.noise_std.is_finite() {
            return Err(Error::Config(format!("noise_std must be >= 0, got {}", self.noise_std)));
        }
        if self.samples_per_class < 3 {
            return Err(Error::Config("samples_per_class must be >= 3 for a 3-way split".into()));
        }
        if !(0.0..=1.0).contains(&self.bare_caption_fraction) {
            return Err(Error::Config("bare_caption_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        CLASSES[..self.n_classes].iter().map(|(_, n)| n.to_string()).collect()
    }

    pub fn prompts(&self) -> HandcraftedPromptSet {
        HandcraftedPromptSet::new(
            self.class_names()
                .iter()
                .map(|n| format!("{PROMPT_PREFIX} {n}"))
                .collect(),
        )
    }
}

/// Unit-amplitude `[s, s, 1]` pattern of class `class`.
pub fn class_template(class: usize, image_size: usize) -> Tensor {
    let s = image_size;
    let w = 2.0 * PI / s as f32;
    let (pattern, _) = CLASSES[class];
    let data = (0..s * s)
        .map(|i| {
            let (y, x) = ((i / s) as f32, (i % s) as f32);
            match pattern {
                Grating::Horizontal(k) => (w * k as f32 * y).sin(),
                Grating::Vertical(k) => (w * k as f32 * x).sin(),
                Grating::Diagonal => (w * (x + y)).sin(),
                Grating::AntiDiagonal => (w * (x - y)).sin(),
            }
        })
        .collect();
    Tensor::new(vec![s, s, 1], data).expect("template shape")
}

/// Generates the corpus in memory. Output is a pure function of `spec`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let s = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f32, spec.noise_std.max(f32::MIN_POSITIVE))
        .map_err(|e| Error::Config(e.to_string()))?;
    let prompts = spec.prompts();
    let names = spec.class_names();
    let mut samples = Vec::with_capacity(spec.n_classes * spec.samples_per_class);
    for (class, name) in names.iter().enumerate() {
        let template = class_template(class, s);
        for _ in 0..spec.samples_per_class {
            let mut pixels = template.data().to_vec();
            let caption = if spec.attributes {
                let strong = rng.random_bool(0.5);
                let quadrant = rng.random_range(0..4);
                let bare = rng.random_bool(spec.bare_caption_fraction);
                let amp = if strong { 1.0 } else { FAINT };
                pixels.iter_mut().for_each(|p| *p *= amp);
                let (qy, qx) = (quadrant / 2, quadrant % 2);
                let (cy, cx) = (qy * s / 2 + s / 4 - 1, qx * s / 2 + s / 4 - 1);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    pixels[(cy + dy) * s + cx + dx] += MARKER_VALUE;
                }
                if bare {
                    prompts.caption(class)?.to_string()
                } else {
                    format!(
                        "{PROMPT_PREFIX} {name} with {} signal in the {} region",
                        if strong { "strong" } else { "faint" },
                        QUADRANTS[quadrant]
                    )
                }
            } else {
                prompts.caption(class)?.to_string()
            };
            if spec.noise_std > 0.0 {
                pixels.iter_mut().for_each(|p| *p += noise.sample(&mut rng));
            }
            samples.push(Sample {
                id: samples.len(),
                image: Tensor::new(vec![s, s, 1], pixels)?,
                caption,
                label: class,
                split: Split::Train,
            });
        }
    }
    for class in 0..spec.n_classes {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == class).collect();
        idx.shuffle(&mut rng);
        let n = idx.len();
        let (n_train, n_val) = (n * 7 / 10, (n / 10).max(1));
        for (k, &i) in idx.iter().enumerate() {
            samples[i].split = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    let vocab = Vocab::from_corpus(
        samples
            .iter()
            .map(|s| s.caption.as_str())
            .chain(prompts.captions().map(String::as_str)),
    )?;
    Ok(Dataset {
        samples,
        prompts,
        vocab,
    })
}
