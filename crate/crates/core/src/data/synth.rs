//! SynthTraits: a synthetic fine-grained dataset with planted, localized traits.
//!
//! Every species belongs to a genus. Each image carries three kinds of glyph
//! tiles, each exactly one patch in size:
//! - the species glyph, unique to its class, at the genus' species slot;
//! - the genus glyph, shared by all species of a genus, at the genus' own slot;
//! - shared distractor glyphs at random free patches.
//!
//! Sibling species draw different glyphs at the same slot, so they can only be
//! told apart by looking at that slot. Each genus owns a point-symmetric pair
//! of slots `(p, M - 1 - p)`, one for the species glyphs and one for the genus
//! glyph, so the mean slot index sits at the grid center.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{Image, Mask};
use super::pnm;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub species_per_genus: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Standard deviation of per-pixel noise, in 8-bit intensity units.
    pub noise_level: f64,
    /// Probability that a test image has its species glyph hidden.
    pub occlusion_rate: f64,
    pub distractors: usize,
}

impl SynthSpec {
    /// The eight-species benchmark configuration.
    pub fn synth8() -> Self {
        Self {
            classes: 8,
            species_per_genus: 2,
            train_per_class: 100,
            test_per_class: 30,
            image_size: 32,
            patch_size: 8,
            noise_level: 10.0,
            occlusion_rate: 0.0,
            distractors: 2,
        }
    }

    pub fn genera(&self) -> usize {
        self.classes.div_ceil(self.species_per_genus)
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.classes < 2 {
            problems.push(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.species_per_genus == 0 {
            problems.push("species_per_genus must be positive".into());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        } else if self.species_per_genus > 0 {
            let slots = 2 * self.genera();
            if slots > self.num_patches() {
                problems.push(format!(
                    "layout needs {slots} glyph slots but the grid has {} patches",
                    self.num_patches()
                ));
            }
            if 2 + self.distractors > self.num_patches() {
                problems.push(format!(
                    "{} distractors do not fit beside two glyphs in {} patches",
                    self.distractors,
                    self.num_patches()
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.occlusion_rate) {
            problems.push("occlusion_rate must lie in [0, 1]".into());
        }
        if self.noise_level < 0.0 {
            problems.push("noise_level must be non-negative".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlyphTemplate {
    pub glyph_id: usize,
    pub color: [u8; 3],
    pub accent: [u8; 3],
    /// Row-major `patch_size^2` string of '0'/'1'; '1' pixels take `color`.
    pub pattern: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedGlyph {
    pub glyph_id: usize,
    pub color: [u8; 3],
    pub patch_position: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub class_id: usize,
    pub genus_id: usize,
    pub trait_glyphs: Vec<PlacedGlyph>,
    pub shared_glyphs: Vec<PlacedGlyph>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub split: String,
    pub path: String,
    pub label: usize,
    pub trait_mask_path: String,
    pub genus_mask_path: String,
    pub occlusion_flag: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub version: u32,
    pub seed: u64,
    pub spec: SynthSpec,
    pub image_size: usize,
    pub patch_size: usize,
    pub background: [u8; 3],
    pub glyphs: Vec<GlyphTemplate>,
    pub classes: Vec<ClassEntry>,
    pub distractor_glyphs: Vec<usize>,
    pub splits: Splits,
    pub images: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub label: usize,
    pub species: usize,
    pub genus: usize,
    pub trait_mask: Mask,
    pub genus_mask: Mask,
    pub occluded: bool,
}

/// Labeled train/test split.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTraits {
    pub manifest: SynthManifest,
    pub dataset: Dataset,
}

impl SynthManifest {
    pub fn class(&self, c: usize) -> &ClassEntry {
        &self.classes[c]
    }

    pub fn glyph(&self, id: usize) -> &GlyphTemplate {
        &self.glyphs[id]
    }

    pub fn species_slot(&self, c: usize) -> usize {
        self.classes[c].trait_glyphs[0].patch_position
    }

    pub fn genus_slot(&self, c: usize) -> usize {
        self.classes[c].shared_glyphs[0].patch_position
    }
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let (r, g, b) = match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

struct Painter<'a> {
    spec: &'a SynthSpec,
    background: [u8; 3],
}

impl Painter<'_> {
    fn background(&self, rng: &mut ChaCha8Rng) -> Image {
        let n = self.spec.image_size;
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-10.0..10.0));
        let (gx, gy): (f64, f64) = (rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0));
        let mut img = Image::filled(n, n, self.background);
        for y in 0..n {
            for x in 0..n {
                let ramp = gx * (x as f64 / n as f64 - 0.5) + gy * (y as f64 / n as f64 - 0.5);
                let px: [u8; 3] = std::array::from_fn(|c| {
                    let noise = rng::normal(rng, self.spec.noise_level.max(1e-12));
                    clamp_u8(self.background[c] as f64 + jitter[c] + ramp + noise)
                });
                img.set_pixel(x, y, px);
            }
        }
        img
    }

    fn glyph(&self, img: &mut Image, glyph: &GlyphTemplate, position: usize, rng: &mut ChaCha8Rng) {
        let p = self.spec.patch_size;
        let grid = self.spec.image_size / p;
        let (ox, oy) = ((position % grid) * p, (position / grid) * p);
        let pattern = glyph.pattern.as_bytes();
        let shade: f64 = rng.random_range(-12.0..12.0);
        for y in 0..p {
            for x in 0..p {
                let base = if pattern[y * p + x] == b'1' {
                    glyph.color
                } else {
                    glyph.accent
                };
                let px: [u8; 3] = std::array::from_fn(|c| {
                    let noise = rng::normal(rng, self.spec.noise_level.max(1e-12));
                    clamp_u8(base[c] as f64 + shade + noise)
                });
                img.set_pixel(ox + x, oy + y, px);
            }
        }
    }

    /// Replaces the pixels under `mask` with freshly drawn background.
    fn erase(&self, img: &mut Image, mask: &Mask, rng: &mut ChaCha8Rng) {
        let fill = self.background(rng);
        for y in 0..img.height {
            for x in 0..img.width {
                if mask.get(x, y) {
                    img.set_pixel(x, y, fill.pixel(x, y));
                }
            }
        }
    }
}

/// Exactly half the pixels set; with a complementary accent the glyph's mean
/// color is mid-gray whatever its hue.
fn random_pattern(rng: &mut ChaCha8Rng, p: usize) -> String {
    let n = p * p;
    let mut bits: Vec<char> = (0..n).map(|i| if i < n / 2 { '1' } else { '0' }).collect();
    bits.shuffle(rng);
    bits.into_iter().collect()
}

/// Generates the dataset in memory. Output is byte-deterministic per seed.
pub fn generate_synth_traits(spec: &SynthSpec, seed: u64) -> Result<SynthTraits> {
    spec.validate()?;
    let mut rng = rng::stream(seed, Stream::DataGen);
    let m = spec.num_patches();
    let genera = spec.genera();

    // Which end of a pair holds the species glyph is random, so trait
    // patches are not all in the first half of a row-major scan.
    let mut pairs: Vec<(usize, usize)> = (0..m / 2).map(|p| (p, m - 1 - p)).collect();
    pairs.shuffle(&mut rng);
    for pair in &mut pairs {
        if rng.random_bool(0.5) {
            *pair = (pair.1, pair.0);
        }
    }
    let pairs = &pairs[..genera];
    let species_slot = |g: usize| pairs[g].0;
    let genus_slots: Vec<usize> = pairs.iter().map(|p| p.1).collect();

    let glyph_count = spec.classes + genera + spec.distractors;
    let mut hues: Vec<usize> = (0..glyph_count).collect();
    hues.shuffle(&mut rng);
    let glyphs: Vec<GlyphTemplate> = (0..glyph_count)
        .map(|id| {
            let h = hues[id] as f64 / glyph_count as f64;
            let color = hsv(h, 0.85, 0.95);
            GlyphTemplate {
                glyph_id: id,
                color,
                accent: color.map(|v| 255 - v),
                pattern: random_pattern(&mut rng, spec.patch_size),
            }
        })
        .collect();
    let genus_glyph = |g: usize| spec.classes + g;
    let distractor_glyphs: Vec<usize> = (0..spec.distractors)
        .map(|d| spec.classes + genera + d)
        .collect();

    let classes: Vec<ClassEntry> = (0..spec.classes)
        .map(|c| {
            let g = c / spec.species_per_genus;
            ClassEntry {
                class_id: c,
                genus_id: g,
                trait_glyphs: vec![PlacedGlyph {
                    glyph_id: c,
                    color: glyphs[c].color,
                    patch_position: species_slot(g),
                }],
                shared_glyphs: vec![PlacedGlyph {
                    glyph_id: genus_glyph(g),
                    color: glyphs[genus_glyph(g)].color,
                    patch_position: genus_slots[g],
                }],
            }
        })
        .collect();

    // Mid-gray, equal to every glyph's mean color, so a blurred glyph fades
    // into the background.
    let background = [128, 128, 128];
    let painter = Painter { spec, background };
    let size = spec.image_size;
    let mut images = Vec::new();
    let mut splits = Splits {
        train: Vec::new(),
        test: Vec::new(),
    };
    let mut dataset = Dataset {
        classes: spec.classes,
        train: Vec::new(),
        test: Vec::new(),
    };

    for (split, per_class) in [
        ("train", spec.train_per_class),
        ("test", spec.test_per_class),
    ] {
        for k in 0..per_class {
            for entry in &classes {
                let c = entry.class_id;
                let id = format!("{split}-c{c}-{k:04}");
                let species_pos = entry.trait_glyphs[0].patch_position;
                let genus_pos = entry.shared_glyphs[0].patch_position;
                let mut img = painter.background(&mut rng);
                painter.glyph(&mut img, &glyphs[c], species_pos, &mut rng);
                painter.glyph(
                    &mut img,
                    &glyphs[entry.shared_glyphs[0].glyph_id],
                    genus_pos,
                    &mut rng,
                );
                let mut free: Vec<usize> = (0..m)
                    .filter(|&p| p != species_pos && p != genus_pos)
                    .collect();
                free.shuffle(&mut rng);
                for (d, &pos) in distractor_glyphs.iter().zip(&free) {
                    painter.glyph(&mut img, &glyphs[*d], pos, &mut rng);
                }
                let trait_mask = Mask::patch(size, size, spec.patch_size, species_pos);
                let genus_mask = Mask::patch(size, size, spec.patch_size, genus_pos);
                let occluded = split == "test"
                    && spec.occlusion_rate > 0.0
                    && rng.random_bool(spec.occlusion_rate);
                if occluded {
                    painter.erase(&mut img, &trait_mask, &mut rng);
                }
                images.push(ImageEntry {
                    id: id.clone(),
                    split: split.into(),
                    path: format!("images/{id}.ppm"),
                    label: c,
                    trait_mask_path: format!("masks/{id}_trait.pgm"),
                    genus_mask_path: format!("masks/{id}_genus.pgm"),
                    occlusion_flag: occluded,
                });
                let sample = Sample {
                    id: id.clone(),
                    image: img,
                    label: c,
                    species: c,
                    genus: entry.genus_id,
                    trait_mask,
                    genus_mask,
                    occluded,
                };
                if split == "train" {
                    splits.train.push(id);
                    dataset.train.push(sample);
                } else {
                    splits.test.push(id);
                    dataset.test.push(sample);
                }
            }
        }
    }

    Ok(SynthTraits {
        manifest: SynthManifest {
            version: MANIFEST_VERSION,
            seed,
            spec: spec.clone(),
            image_size: spec.image_size,
            patch_size: spec.patch_size,
            background,
            glyphs,
            classes,
            distractor_glyphs,
            splits,
            images,
        },
        dataset,
    })
}

/// Fills `mask` with background texture drawn like the generator's, seeded.
pub fn erase_to_background(
    manifest: &SynthManifest,
    image: &Image,
    mask: &Mask,
    seed: u64,
) -> Image {
    let painter = Painter {
        spec: &manifest.spec,
        background: manifest.background,
    };
    let mut rng = rng::stream(seed, Stream::Edit);
    let mut out = image.clone();
    painter.erase(&mut out, mask, &mut rng);
    out
}

/// Mean color of all training images, used as the neutral deletion baseline.
pub fn mean_color(samples: &[Sample]) -> [u8; 3] {
    let mut acc = [0.0f64; 3];
    let mut n = 0usize;
    for s in samples {
        for px in s.image.data.chunks(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
            n += 1;
        }
    }
    acc.map(|v| clamp_u8(v / n.max(1) as f64))
}

impl SynthTraits {
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "masks"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let all = self.dataset.train.iter().chain(&self.dataset.test);
        for (entry, sample) in self.manifest.images.iter().zip(all) {
            pnm::save_ppm(&sample.image, &dir.join(&entry.path))?;
            pnm::save_pgm(
                &sample.trait_mask.to_gray(),
                &dir.join(&entry.trait_mask_path),
            )?;
            pnm::save_pgm(
                &sample.genus_mask.to_gray(),
                &dir.join(&entry.genus_mask_path),
            )?;
        }
        let path = dir.join("manifest.json");
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    /// Loads a dataset directory, checking referential integrity on the way.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: SynthManifest = serde_json::from_slice(&bytes)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::contract(format!(
                "manifest version {} unsupported",
                manifest.version
            )));
        }
        let n_classes = manifest.classes.len();
        let mut dataset = Dataset {
            classes: n_classes,
            train: Vec::new(),
            test: Vec::new(),
        };
        for e in &manifest.images {
            if e.label >= n_classes {
                return Err(Error::contract(format!(
                    "{}: label {} >= {n_classes}",
                    e.id, e.label
                )));
            }
            let image = pnm::load_ppm(&dir.join(&e.path))?;
            let trait_mask = Mask::from_gray(&pnm::load_pgm(&dir.join(&e.trait_mask_path))?);
            let genus_mask = Mask::from_gray(&pnm::load_pgm(&dir.join(&e.genus_mask_path))?);
            for m in [&trait_mask, &genus_mask] {
                if (m.width, m.height) != (image.width, image.height) {
                    return Err(Error::contract(format!(
                        "{}: mask size differs from image",
                        e.id
                    )));
                }
            }
            let sample = Sample {
                id: e.id.clone(),
                image,
                label: e.label,
                species: e.label,
                genus: manifest.classes[e.label].genus_id,
                trait_mask,
                genus_mask,
                occluded: e.occlusion_flag,
            };
            match e.split.as_str() {
                "train" => dataset.train.push(sample),
                "test" => dataset.test.push(sample),
                other => return Err(Error::contract(format!("{}: unknown split {other}", e.id))),
            }
        }
        Ok(Self { manifest, dataset })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            train_per_class: 3,
            test_per_class: 2,
            ..SynthSpec::synth8()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synth_traits(&small(), 5).unwrap();
        let b = generate_synth_traits(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_synth_traits(&small(), 6).unwrap();
        assert_ne!(a.dataset.train[0].image, c.dataset.train[0].image);
    }

    #[test]
    fn zero_occlusion_sets_no_flags() {
        let s = generate_synth_traits(&small(), 1).unwrap();
        assert!(s.manifest.images.iter().all(|e| !e.occlusion_flag));
    }

    #[test]
    fn full_occlusion_flags_every_test_image() {
        let spec = SynthSpec {
            occlusion_rate: 1.0,
            ..small()
        };
        let s = generate_synth_traits(&spec, 1).unwrap();
        assert!(s.dataset.test.iter().all(|x| x.occluded));
        assert!(s.dataset.train.iter().all(|x| !x.occluded));
    }

    #[test]
    fn infeasible_layout_is_rejected() {
        let spec = SynthSpec {
            classes: 8,
            species_per_genus: 1,
            image_size: 16,
            ..small()
        };
        assert!(matches!(
            generate_synth_traits(&spec, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn slots_are_point_symmetric_and_distinct() {
        let s = generate_synth_traits(&small(), 3).unwrap();
        let m = s.manifest.spec.num_patches();
        let mut used = Vec::new();
        for g in 0..4 {
            let (a, b) = (2 * g, 2 * g + 1);
            let sp = s.manifest.species_slot(a);
            let ge = s.manifest.genus_slot(a);
            assert_eq!(
                s.manifest.species_slot(b),
                sp,
                "siblings share the species slot"
            );
            assert_eq!(s.manifest.genus_slot(b), ge);
            assert_eq!(sp + ge, m - 1);
            used.extend([sp, ge]);
        }
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 8);
    }

    #[test]
    fn siblings_differ_only_in_species_glyph() {
        let s = generate_synth_traits(&small(), 3).unwrap();
        let (a, b) = (&s.manifest.classes[0], &s.manifest.classes[1]);
        assert_ne!(a.trait_glyphs[0].glyph_id, b.trait_glyphs[0].glyph_id);
        assert_eq!(a.shared_glyphs, b.shared_glyphs);
    }

    #[test]
    fn balanced_and_disjoint_splits() {
        let s = generate_synth_traits(&small(), 2).unwrap();
        for c in 0..8 {
            assert_eq!(s.dataset.train.iter().filter(|x| x.label == c).count(), 3);
            assert_eq!(s.dataset.test.iter().filter(|x| x.label == c).count(), 2);
        }
        let train: std::collections::HashSet<_> = s.manifest.splits.train.iter().collect();
        assert!(s.manifest.splits.test.iter().all(|id| !train.contains(id)));
    }

    #[test]
    fn write_then_load_reproduces_dataset() {
        let s = generate_synth_traits(&small(), 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        s.write_dir(dir.path()).unwrap();
        let back = SynthTraits::load_dir(dir.path()).unwrap();
        assert_eq!(back, s);
    }
}
