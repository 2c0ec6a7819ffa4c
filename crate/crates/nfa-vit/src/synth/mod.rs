//! Deterministic synthetic localized-forgery corpus: textured base images
//! with per-image fingerprints, forged regions re-rendered under a
//! different fingerprint plus light blur, three region geometries, and
//! 8:1:1 train/val/test splits with a CSV manifest.

mod pnm;
mod texture;

pub use pnm::{read_pgm, read_ppm, write_pgm, write_ppm};
pub use texture::{
    forge_region, gen_base_image, gen_region_mask, RegionKind, FINGERPRINT_AMPLITUDE,
};

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One generated sample, fully materialized.
#[derive(Clone)]
pub struct ForgerySample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
    pub label: u8,
    pub kind: RegionKind,
    pub area_fraction: f64,
    pub seed: u64,
}

/// Corpus layout: counts per split, image size, kind mix, master seed.
#[derive(Clone, Debug)]
pub struct CorpusSpec {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub image_size: usize,
    /// Fractions of forged samples per kind: object, stuff, background.
    pub kind_mix: [f64; 3],
    pub master_seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            train: 800,
            val: 100,
            test: 100,
            image_size: 64,
            kind_mix: [0.2, 0.4, 0.4],
            master_seed: 42,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::Config("corpus: every split needs >= 1 sample".into()));
        }
        let sum: f64 = self.kind_mix.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "corpus: kind mix {:?} sums to {sum}, not 1",
                self.kind_mix
            )));
        }
        if self.image_size < 32 || self.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "corpus: image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::Value(format!("unknown split {other}"))),
        })
    }

    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// Unique per-sample seed: multiplication by an odd constant is injective
/// over u64, so no seed repeats across the corpus.
fn sample_seed(master: u64, global_index: u64) -> u64 {
    master ^ global_index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x8431)
}

/// Default stratification of forged samples over the five area bins so the
/// area-bin report always has mass everywhere: cycle object/stuff/stuff/
/// background/background through bins 0..5.
const DEFAULT_SLOTS: [(RegionKind, f64, f64); 5] = [
    (RegionKind::Object, 0.07, 0.17),
    (RegionKind::Stuff, 0.23, 0.37),
    (RegionKind::Stuff, 0.43, 0.57),
    (RegionKind::Background, 0.63, 0.77),
    (RegionKind::Background, 0.82, 0.94),
];

fn forged_assignment(spec: &CorpusSpec, forged_index: usize, rng_val: f64) -> (RegionKind, f64) {
    let default_mix = CorpusSpec::default().kind_mix;
    if spec.kind_mix == default_mix {
        let (kind, lo, hi) = DEFAULT_SLOTS[forged_index % 5];
        (kind, lo + (hi - lo) * rng_val)
    } else {
        // Weighted round-robin over kinds; area uniform in the legal range,
        // slightly shrunk to keep the achieved area within bounds.
        let kinds = [RegionKind::Object, RegionKind::Stuff, RegionKind::Background];
        let kind = kinds[kind_for_index(&spec.kind_mix, forged_index)];
        let (lo, hi) = kind.area_range().unwrap();
        let margin = 0.02 * (hi - lo);
        let (lo, hi) = (lo + margin, hi - margin);
        (kind, lo + (hi - lo) * rng_val)
    }
}

/// Largest-remainder assignment: replay picks 0..=index and return the last.
fn kind_for_index(mix: &[f64; 3], index: usize) -> usize {
    let mut counts = [0usize; 3];
    let mut pick = 0usize;
    for j in 0..=index {
        let mut best = 0usize;
        let mut best_score = f64::MIN;
        for i in 0..3 {
            let score = mix[i] * (j + 1) as f64 - counts[i] as f64;
            if score > best_score {
                best_score = score;
                best = i;
            }
        }
        counts[best] += 1;
        pick = best;
    }
    pick
}

/// Generate one sample deterministically from its coordinates.
pub fn generate_sample(
    spec: &CorpusSpec,
    index_in_split: usize,
    global_index: usize,
) -> Result<ForgerySample> {
    use rand::{Rng, SeedableRng};
    let seed = sample_seed(spec.master_seed, global_index as u64);
    let size = spec.image_size;
    let image = gen_base_image(size, size, seed);
    let forged = index_in_split % 2 == 1;
    let id = format!("{global_index:06}");
    if !forged {
        return Ok(ForgerySample {
            id,
            image,
            mask: Tensor::zeros(vec![size, size]),
            label: 0,
            kind: RegionKind::None,
            area_fraction: 0.0,
            seed,
        });
    }
    let forged_index = index_in_split / 2;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x6172_6561);
    let (kind, target_area) = forged_assignment(spec, forged_index, rng.gen_range(0.0..1.0));
    let mask = gen_region_mask(kind, target_area, size, size, seed)?;
    let forged_img = forge_region(&image, seed, &mask, seed ^ 0x0f0f_0f0f)?;
    let area = mask.data().iter().filter(|&&v| v > 0.5).count() as f64 / (size * size) as f64;
    Ok(ForgerySample {
        id,
        image: forged_img,
        mask,
        label: 1,
        kind,
        area_fraction: area,
        seed,
    })
}

/// One manifest row.
#[derive(Clone, Debug)]
pub struct ManifestRow {
    pub id: String,
    pub split: Split,
    pub label: u8,
    pub kind: RegionKind,
    pub area_fraction: f64,
    pub seed: u64,
}

pub struct Corpus {
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

/// Write the full corpus to disk: images, masks, manifest.csv.
pub fn build_corpus(spec: &CorpusSpec, root: &Path) -> Result<Corpus> {
    spec.validate()?;
    let mut rows = Vec::new();
    let mut manifest = String::from("id,split,label,kind,area_fraction,seed\n");
    let mut global_index = 0usize;
    for split in Split::ALL {
        let count = match split {
            Split::Train => spec.train,
            Split::Val => spec.val,
            Split::Test => spec.test,
        };
        let img_dir = root.join(split.as_str()).join("images");
        let mask_dir = root.join(split.as_str()).join("masks");
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(img_dir.display().to_string(), e))?;
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(mask_dir.display().to_string(), e))?;
        for i in 0..count {
            let sample = generate_sample(spec, i, global_index)?;
            write_ppm(&img_dir.join(format!("{}.ppm", sample.id)), &sample.image)?;
            write_pgm(&mask_dir.join(format!("{}.pgm", sample.id)), &sample.mask)?;
            let _ = writeln!(
                manifest,
                "{},{},{},{},{:.6},{}",
                sample.id,
                split.as_str(),
                sample.label,
                sample.kind.as_str(),
                sample.area_fraction,
                sample.seed
            );
            rows.push(ManifestRow {
                id: sample.id,
                split,
                label: sample.label,
                kind: sample.kind,
                area_fraction: sample.area_fraction,
                seed: sample.seed,
            });
            global_index += 1;
        }
    }
    let mpath = root.join("manifest.csv");
    fs::write(&mpath, manifest).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    Ok(Corpus {
        root: root.to_path_buf(),
        rows,
    })
}

/// Parse manifest.csv.
pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let mpath = root.join("manifest.csv");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != "id,split,label,kind,area_fraction,seed" {
                return Err(Error::format(mpath.display().to_string(), "bad header"));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(Error::format(
                mpath.display().to_string(),
                format!("bad row: {line}"),
            ));
        }
        rows.push(ManifestRow {
            id: parts[0].to_string(),
            split: Split::parse(parts[1])?,
            label: parts[2]
                .parse()
                .map_err(|_| Error::format(mpath.display().to_string(), "bad label"))?,
            kind: RegionKind::parse(parts[3])?,
            area_fraction: parts[4]
                .parse()
                .map_err(|_| Error::format(mpath.display().to_string(), "bad area"))?,
            seed: parts[5]
                .parse()
                .map_err(|_| Error::format(mpath.display().to_string(), "bad seed"))?,
        });
    }
    Ok(rows)
}

/// Load every sample of one split into memory.
pub fn load_split(root: &Path, split: Split) -> Result<Vec<ForgerySample>> {
    let rows = read_manifest(root)?;
    let mut out = Vec::new();
    for row in rows.into_iter().filter(|r| r.split == split) {
        let img = read_ppm(&root.join(split.as_str()).join("images").join(format!("{}.ppm", row.id)))?;
        let mask = read_pgm(&root.join(split.as_str()).join("masks").join(format!("{}.pgm", row.id)))?;
        out.push(ForgerySample {
            id: row.id,
            image: img,
            mask,
            label: row.label,
            kind: row.kind,
            area_fraction: row.area_fraction,
            seed: row.seed,
        });
    }
    if out.is_empty() {
        return Err(Error::Value(format!(
            "no samples for split {} under {}",
            split.as_str(),
            root.display()
        )));
    }
    Ok(out)
}
