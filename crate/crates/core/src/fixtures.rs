//! Synthetic captioning corpora for smoke runs and overfit checks.
//!
//! Each sample combines a scene, a place and a day. The scene determines the
//! visual features (a per-scene prototype plus noise); the place and day only
//! reach the model through the entity context, so a model that learns the
//! corpus has to copy them from the context into the caption.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::context::{LabelSet, NerDictionary, NerRecord};
use crate::error::Result;
use crate::visual::VisualRecord;

pub const SCENES: &[&str] = &[
    "police officers stand guard outside the parliament",
    "a crowd of protesters marches through the street",
    "firefighters battle a blaze at a warehouse",
    "farmers gather in a field with their tractors",
];

pub const PLACES: &[&str] = &["Delhi", "Paris", "Nairobi", "Lima"];

pub const DAYS: &[&str] = &["Friday", "Monday"];

#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub scenes: usize,
    pub places: usize,
    pub days: usize,
    pub d_vis: usize,
    pub n_obj: usize,
    /// Noise std relative to the unit-norm prototypes.
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// 32 samples: 4 scenes × 4 places × 2 days.
    pub fn overfit(d_vis: usize, n_obj: usize) -> Self {
        Self {
            scenes: 4,
            places: 4,
            days: 2,
            d_vis,
            n_obj,
            noise: 0.05,
            seed: 7,
        }
    }

    /// 8 samples: 2 scenes × 2 places × 2 days.
    pub fn tiny(d_vis: usize, n_obj: usize) -> Self {
        Self {
            scenes: 2,
            places: 2,
            days: 2,
            ..Self::overfit(d_vis, n_obj)
        }
    }

    pub fn len(&self) -> usize {
        self.scenes * self.places * self.days
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub features: Vec<VisualRecord>,
    pub ner: Vec<NerRecord>,
    /// Scene, place and day index per sample.
    pub factors: Vec<(usize, usize, usize)>,
}

impl SyntheticCorpus {
    /// Text for tokenizer training: captions, labels and entity strings.
    pub fn tokenizer_corpus(&self, labels: &LabelSet) -> Vec<String> {
        let mut texts: Vec<String> = self.ner.iter().filter_map(|r| r.caption.clone()).collect();
        texts.extend(labels.labels().iter().cloned());
        for r in &self.ner {
            for (_, tokens) in r.entities.iter() {
                texts.push(tokens.iter().map(|t| format!(" {t}")).collect());
            }
        }
        texts
    }
}

pub fn caption_for(scene: usize, place: usize, day: usize) -> String {
    format!("{} in {} on {}.", SCENES[scene], PLACES[place], DAYS[day])
}

pub fn entities_for(place: usize, day: usize) -> NerDictionary {
    let mut map = BTreeMap::new();
    map.insert("GPE".to_string(), vec![PLACES[place].to_string()]);
    map.insert("DATE".to_string(), vec![DAYS[day].to_string()]);
    NerDictionary::from_map(map, &LabelSet::default()).expect("fixture labels are valid")
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..d).map(|_| normal.sample(rng)).collect()
}

pub fn synthetic_corpus(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scenes = spec.scenes.min(SCENES.len());
    let places = spec.places.min(PLACES.len());
    let days = spec.days.min(DAYS.len());
    let d = spec.d_vis;

    let image_protos: Vec<Vec<f64>> = (0..scenes)
        .map(|_| {
            let mut v = gaussian(&mut rng, d, 1.0);
            unit(&mut v);
            v
        })
        .collect();
    let object_protos: Vec<Vec<Vec<f64>>> = (0..scenes)
        .map(|_| {
            (0..spec.n_obj)
                .map(|_| {
                    let mut v = gaussian(&mut rng, d, 1.0);
                    unit(&mut v);
                    v
                })
                .collect()
        })
        .collect();

    let mut features = Vec::new();
    let mut ner = Vec::new();
    let mut factors = Vec::new();
    for s in 0..scenes {
        for p in 0..places {
            for t in 0..days {
                let id = format!("syn-{s}-{p}-{t}");
                let noisy = |proto: &[f64], rng: &mut ChaCha8Rng| {
                    let mut v: Vec<f64> = proto
                        .iter()
                        .zip(gaussian(rng, d, spec.noise / (d as f64).sqrt()))
                        .map(|(a, b)| a + b)
                        .collect();
                    unit(&mut v);
                    v
                };
                let image_feat = noisy(&image_protos[s], &mut rng);
                let real = spec.n_obj.saturating_sub((p + t) % 2);
                let mut objects = Tensor::zeros(&[spec.n_obj, d]);
                for o in 0..real {
                    objects.row_mut(o).copy_from_slice(&noisy(&object_protos[s][o], &mut rng));
                }
                let mask = (0..spec.n_obj).map(|o| o < real).collect();
                features.push(VisualRecord {
                    sample_id: id.clone(),
                    image_feat,
                    object_feats: objects,
                    object_mask: mask,
                    boxes: None,
                });
                ner.push(NerRecord {
                    id,
                    caption: Some(caption_for(s, p, t)),
                    entities: entities_for(p, t),
                });
                factors.push((s, p, t));
            }
        }
    }
    Ok(SyntheticCorpus { features, ner, factors })
}
