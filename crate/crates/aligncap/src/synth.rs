//! Deterministic synthetic dataset with planted tag structure: each scene
//! raster carries its tags' channel signatures inside the target box, so
//! alignment between region features, tags, and captions is learnable.

use crate::config::DimsConfig;
use crate::data::SyntheticExample;
use crate::error::Result;
use crate::frozen::{SceneInput, Vocab};
use crate::god::{BBox, Detection};
use crate::refine::{TagSubclass, TagVocabulary};
use crate::tensor::Rng;

pub const ENTITIES: [&str; 16] = [
    "person", "dog", "cat", "car", "tree", "chair", "bird", "horse", "cup", "book", "ball",
    "house", "boat", "bike", "lamp", "fish",
];

pub const ATTRIBUTES: [&str; 16] = [
    "red", "blue", "green", "small", "large", "bright", "dark", "old", "young", "striped",
    "spotted", "shiny", "fuzzy", "round", "square", "plain",
];

pub const ACTIONS: [&str; 16] = [
    "running", "sitting", "standing", "jumping", "sleeping", "eating", "flying", "swimming",
    "walking", "playing", "resting", "climbing", "waiting", "hiding", "drinking", "watching",
];

pub const SCENES: [&str; 16] = [
    "indoor", "outdoor", "street", "park", "beach", "forest", "kitchen", "office", "field",
    "garden", "river", "mountain", "yard", "market", "harbor", "library",
];

/// Tag ids are laid out [entities | attributes | actions | scenes].
pub fn tag_vocabulary() -> TagVocabulary {
    let mut entries = Vec::with_capacity(64);
    entries.extend(ENTITIES.iter().map(|w| (*w, TagSubclass::Entity)));
    entries.extend(ATTRIBUTES.iter().map(|w| (*w, TagSubclass::Attribute)));
    entries.extend(ACTIONS.iter().map(|w| (*w, TagSubclass::Action)));
    entries.extend(SCENES.iter().map(|w| (*w, TagSubclass::Scene)));
    TagVocabulary::new(&entries).expect("builtin tag list is distinct and non-empty")
}

/// Word list shared by the frozen text encoder and the LLM stub: every tag
/// word plus the caption template filler.
pub fn caption_vocab() -> Vocab {
    let mut words = vec!["a"];
    words.extend(ENTITIES);
    words.extend(ATTRIBUTES);
    words.extend(ACTIONS);
    words.extend(SCENES);
    Vocab::new(&words).expect("builtin word list is distinct")
}

// Each tag owns a fixed channel signature, independent of the dataset seed so
// checkpoints trained on one dataset transfer to another.
fn tag_signature(tag: usize, channels: usize) -> Vec<f64> {
    let mut rng = Rng::new(0x7a65).derive(tag as u64);
    (0..channels).map(|_| rng.range(-1.0, 1.0)).collect()
}

const PLANT_SCALE: f64 = 2.0;
const NOISE_SCALE: f64 = 0.3;

fn plant_scene(
    g: usize,
    channels: usize,
    target: &BBox,
    gt_tags: &[usize],
    rng: &mut Rng,
) -> Result<SceneInput> {
    let mut signature = vec![0.0; channels];
    for &tag in gt_tags {
        for (s, v) in signature.iter_mut().zip(tag_signature(tag, channels)) {
            *s += v;
        }
    }
    let inv = 1.0 / gt_tags.len() as f64;
    signature.iter_mut().for_each(|s| *s *= inv * PLANT_SCALE);

    let mut data = Vec::with_capacity(g * g * channels);
    for gy in 0..g {
        let cy = (gy as f64 + 0.5) / g as f64;
        for gx in 0..g {
            let cx = (gx as f64 + 0.5) / g as f64;
            let inside =
                cx >= target.x0 && cx < target.x1 && cy >= target.y0 && cy < target.y1;
            for c in 0..channels {
                let noise = rng.range(-NOISE_SCALE, NOISE_SCALE);
                data.push(if inside { signature[c] + noise } else { noise });
            }
        }
    }
    SceneInput::new(g, channels, data)
}

/// `size` examples, fully determined by `seed` and the raster dims.
pub fn make_synthetic_dataset(seed: u64, size: usize, dims: &DimsConfig) -> Result<Vec<SyntheticExample>> {
    let base = Rng::new(seed);
    (0..size)
        .map(|i| {
            let mut rng = base.derive(i as u64);

            let entity = rng.below(16);
            let attribute = rng.below(16);
            let action = rng.below(16);
            let scene_tag = rng.below(16);
            let gt_tags = vec![entity, 16 + attribute, 32 + action, 48 + scene_tag];
            let gt_caption =
                format!("a {} {} {}", ATTRIBUTES[attribute], ENTITIES[entity], ACTIONS[action]);

            let x0 = rng.range(0.05, 0.55);
            let y0 = rng.range(0.05, 0.55);
            let target =
                BBox::new(x0, y0, x0 + rng.range(0.3, 0.4), y0 + rng.range(0.3, 0.4))?;

            let n_classes = 1 + rng.below(3);
            let classes: Vec<&str> = std::iter::once(ENTITIES[entity])
                .chain((1..n_classes).map(|_| ENTITIES[rng.below(16)]))
                .collect();
            let n_boxes = 2 + rng.below(4);
            let detections = (0..n_boxes)
                .map(|b| {
                    let bx0 = rng.range(0.0, 0.7);
                    let by0 = rng.range(0.0, 0.7);
                    let bbox = BBox::new(
                        bx0,
                        by0,
                        bx0 + rng.range(0.1, 0.3),
                        by0 + rng.range(0.1, 0.3),
                    )?;
                    Ok(Detection {
                        class_name: classes[b % classes.len()].to_string(),
                        bbox,
                        score: rng.range(0.5, 1.0),
                    })
                })
                .collect::<Result<Vec<_>>>()?;

            let scene = plant_scene(dims.g, dims.channels, &target, &gt_tags, &mut rng)?;
            Ok(SyntheticExample { scene, target, detections, gt_tags, gt_caption })
        })
        .collect()
}
