//! Directory-backed episode data.
//!
//! Layout, all coordinates integer pixels with origin top-left:
//!
//! ```text
//! root/images/<id>.png      8-bit RGB query image
//! root/masks/<id>.png       8-bit grayscale mask, >127 = foreground
//! root/support/<id>.png     8-bit RGB support image
//! root/support/<id>.json    {"human_box":[x0,y0,x1,y1],
//!                            "object_box":[x0,y0,x1,y1],
//!                            "affordance_id":N}
//! root/categories.json      {"<category_id>": "<name>", ...}
//! root/splits/fold_K.json   [category ids of part K]
//! ```
//!
//! Ids carry their category as a prefix up to the first underscore
//! (`7_000123` belongs to category 7); that is how query images bind to
//! categories. `gen-data` writes this exact layout.

use super::{pick_category, Episode, EpisodeSource, FoldSplit};
use crate::error::{DataError, Error, Result};
use crate::purpose::{BBox, SupportSample};
use crate::tensor::{Scalar, Tensor};
use image::{GrayImage, RgbImage};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

/// Support annotation sidecar.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SupportAnnotation {
    pub human_box: [i64; 4],
    pub object_box: [i64; 4],
    pub affordance_id: u32,
}

impl SupportAnnotation {
    /// Validates both boxes against the image extent.
    pub fn to_boxes(&self, w: usize, h: usize, path: &Path) -> Result<(BBox, BBox), DataError> {
        let convert = |b: [i64; 4]| -> Result<BBox, DataError> {
            let bad = || DataError::BadBox {
                x0: b[0],
                y0: b[1],
                x1: b[2],
                y1: b[3],
                w,
                h,
                path: Some(path.to_path_buf()),
            };
            if b.iter().any(|&v| v < 0) {
                return Err(bad());
            }
            let bb = BBox::new(b[0] as usize, b[1] as usize, b[2] as usize, b[3] as usize);
            bb.validate(w, h).map_err(|_| bad())?;
            Ok(bb)
        };
        Ok((convert(self.human_box)?, convert(self.object_box)?))
    }
}

/// Indexed view over a data directory.
#[derive(Debug)]
pub struct DirDataset {
    root: PathBuf,
    categories: BTreeMap<u32, String>,
    images_by_category: BTreeMap<u32, Vec<String>>,
    supports_by_category: BTreeMap<u32, Vec<String>>,
}

/// Loads an RGB PNG as a `[3, H, W]` tensor in [0, 1].
pub fn load_image_tensor(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(DataError::MalformedRecord {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = f32::from(p.0[c]) / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data))
}

/// Loads a grayscale PNG as a binary `[1, H, W]` mask (>127 foreground).
pub fn load_mask_tensor(path: &Path) -> Result<Tensor<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data(DataError::MalformedRecord {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; h * w];
    for (x, y, p) in img.enumerate_pixels() {
        data[y as usize * w + x as usize] = f32::from(p.0[0] > 127);
    }
    Ok(Tensor::new(vec![1, h, w], data))
}

/// Writes a `[3, H, W]` tensor in [0, 1] as an RGB PNG.
pub fn save_image_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = |c: usize| (t.data()[c * h * w + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Writes a `[1, H, W]` map in [0, 1] as a grayscale PNG (value * 255).
pub fn save_gray_tensor(path: &Path, t: &Tensor<f32>) -> Result<()> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (t.data()[y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn category_of(id: &str, path: &Path) -> Result<u32, DataError> {
    id.split('_')
        .next()
        .and_then(|p| p.parse::<u32>().ok())
        .ok_or_else(|| DataError::MalformedRecord {
            path: path.to_path_buf(),
            reason: format!("id '{id}' carries no numeric category prefix"),
        })
}

fn png_ids(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    if !dir.exists() {
        return Ok(ids);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Opens and validates a data directory. Every malformed record fails the
/// load with its file path; an empty directory yields an empty dataset.
pub fn load_pad_dir(root: impl AsRef<Path>) -> Result<DirDataset> {
    let root = root.as_ref().to_path_buf();
    let categories: BTreeMap<u32, String> = {
        let path = root.join("categories.json");
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let raw: BTreeMap<String, String> =
                serde_json::from_str(&text).map_err(|e| Error::Data(DataError::MalformedRecord {
                    path: path.clone(),
                    reason: e.to_string(),
                }))?;
            let mut out = BTreeMap::new();
            for (k, v) in raw {
                let id = k.parse::<u32>().map_err(|_| Error::Data(DataError::MalformedRecord {
                    path: path.clone(),
                    reason: format!("category key '{k}' is not an integer"),
                }))?;
                out.insert(id, v);
            }
            out
        } else {
            BTreeMap::new()
        }
    };

    let mut images_by_category: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for id in png_ids(&root.join("images"))? {
        let img_path = root.join("images").join(format!("{id}.png"));
        let mask_path = root.join("masks").join(format!("{id}.png"));
        if !mask_path.exists() {
            return Err(DataError::MissingMask(img_path).into());
        }
        let cat = category_of(&id, &img_path)?;
        if !categories.contains_key(&cat) {
            return Err(DataError::UnknownCategory {
                id: cat,
                path: img_path,
            }
            .into());
        }
        images_by_category.entry(cat).or_default().push(id);
    }

    let mut supports_by_category: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    for id in png_ids(&root.join("support"))? {
        let img_path = root.join("support").join(format!("{id}.png"));
        let ann_path = root.join("support").join(format!("{id}.json"));
        let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let ann: SupportAnnotation =
            serde_json::from_str(&text).map_err(|e| Error::Data(DataError::MalformedRecord {
                path: ann_path.clone(),
                reason: e.to_string(),
            }))?;
        if !categories.contains_key(&ann.affordance_id) {
            return Err(DataError::UnknownCategory {
                id: ann.affordance_id,
                path: ann_path,
            }
            .into());
        }
        // Boxes are validated against the actual support image now so a
        // corrupt record names its file immediately.
        let img = load_image_tensor(&img_path)?;
        let (h, w) = (img.shape()[1], img.shape()[2]);
        ann.to_boxes(w, h, &ann_path)?;
        supports_by_category
            .entry(ann.affordance_id)
            .or_default()
            .push(id);
    }

    Ok(DirDataset {
        root,
        categories,
        images_by_category,
        supports_by_category,
    })
}

impl DirDataset {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn categories(&self) -> &BTreeMap<u32, String> {
        &self.categories
    }

    pub fn num_images(&self) -> usize {
        self.images_by_category.values().map(Vec::len).sum()
    }

    pub fn num_supports(&self) -> usize {
        self.supports_by_category.values().map(Vec::len).sum()
    }

    /// Loads the fold split files if present, otherwise derives a seeded
    /// 3-fold split over the listed categories.
    pub fn fold_split(&self, seed: u64) -> Result<FoldSplit> {
        let dir = self.root.join("splits");
        if dir.exists() {
            let mut parts = Vec::new();
            for k in 1.. {
                let path = dir.join(format!("fold_{k}.json"));
                if !path.exists() {
                    break;
                }
                let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                let ids: Vec<u32> = serde_json::from_str(&text).map_err(|e| {
                    Error::Data(DataError::MalformedRecord {
                        path: path.clone(),
                        reason: e.to_string(),
                    })
                })?;
                parts.push(ids);
            }
            if !parts.is_empty() {
                return Ok(FoldSplit { parts });
            }
        }
        let cats: Vec<u32> = self.categories.keys().copied().collect();
        Ok(FoldSplit::new(&cats, 3.min(cats.len().max(1)), seed)?)
    }

    fn load_support(&self, id: &str) -> Result<SupportSample<f32>> {
        let img_path = self.root.join("support").join(format!("{id}.png"));
        let ann_path = self.root.join("support").join(format!("{id}.json"));
        let image = load_image_tensor(&img_path)?;
        let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let ann: SupportAnnotation =
            serde_json::from_str(&text).map_err(|e| Error::Data(DataError::MalformedRecord {
                path: ann_path.clone(),
                reason: e.to_string(),
            }))?;
        let (h, w) = (image.shape()[1], image.shape()[2]);
        let (human_box, object_box) = ann.to_boxes(w, h, &ann_path)?;
        Ok(SupportSample {
            image,
            human_box,
            object_box,
        })
    }
}

impl EpisodeSource for DirDataset {
    fn sample(&self, categories: &[u32], n: usize, seed: u64) -> Result<Episode<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Keep only categories that actually have both supports and queries.
        let usable: Vec<u32> = categories
            .iter()
            .copied()
            .filter(|c| {
                self.supports_by_category.contains_key(c) && self.images_by_category.contains_key(c)
            })
            .collect();
        if usable.is_empty() {
            return Err(DataError::EmptyPartition.into());
        }
        let cat = pick_category(&usable, &mut rng);
        let supports = &self.supports_by_category[&cat];
        let support_id = &supports[rng.gen_range(0..supports.len())];
        let support = self.load_support(support_id)?;

        let pool = &self.images_by_category[&cat];
        let ids: Vec<&String> = if pool.len() >= n {
            pool.choose_multiple(&mut rng, n).collect()
        } else {
            (0..n).map(|_| &pool[rng.gen_range(0..pool.len())]).collect()
        };
        let mut queries = Vec::with_capacity(n);
        let mut gt_masks = Vec::with_capacity(n);
        for id in ids {
            queries.push(load_image_tensor(
                &self.root.join("images").join(format!("{id}.png")),
            )?);
            gt_masks.push(load_mask_tensor(
                &self.root.join("masks").join(format!("{id}.png")),
            )?);
        }
        Ok(Episode {
            support,
            queries,
            gt_masks,
            affordance_id: cat,
            seed,
        })
    }
}

/// Writes episodes into the directory layout, including category metadata
/// and seeded fold files. Episode e of category c becomes support
/// `c_e` plus queries `c_e_k`.
pub fn write_pad_dir<T: Scalar>(
    root: impl AsRef<Path>,
    episodes: &[Episode<T>],
    categories: &BTreeMap<u32, String>,
    split_seed: u64,
) -> Result<()> {
    let root = root.as_ref();
    for sub in ["images", "masks", "support", "splits"] {
        fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    for (e, ep) in episodes.iter().enumerate() {
        let cat = ep.affordance_id;
        let base = format!("{cat}_{e:05}");
        save_image_tensor(
            &root.join("support").join(format!("{base}.png")),
            &ep.support.image.cast(),
        )?;
        let ann = SupportAnnotation {
            human_box: [
                ep.support.human_box.x0 as i64,
                ep.support.human_box.y0 as i64,
                ep.support.human_box.x1 as i64,
                ep.support.human_box.y1 as i64,
            ],
            object_box: [
                ep.support.object_box.x0 as i64,
                ep.support.object_box.y0 as i64,
                ep.support.object_box.x1 as i64,
                ep.support.object_box.y1 as i64,
            ],
            affordance_id: cat,
        };
        let ann_path = root.join("support").join(format!("{base}.json"));
        fs::write(&ann_path, serde_json::to_string_pretty(&ann).expect("serializable"))
            .map_err(|e2| Error::io(&ann_path, e2))?;
        for (k, (q, m)) in ep.queries.iter().zip(&ep.gt_masks).enumerate() {
            save_image_tensor(&root.join("images").join(format!("{base}_{k}.png")), &q.cast())?;
            save_gray_tensor(&root.join("masks").join(format!("{base}_{k}.png")), &m.cast())?;
        }
    }
    let cat_path = root.join("categories.json");
    let as_strings: BTreeMap<String, String> = categories
        .iter()
        .map(|(k, v)| (k.to_string(), v.clone()))
        .collect();
    fs::write(
        &cat_path,
        serde_json::to_string_pretty(&as_strings).expect("serializable"),
    )
    .map_err(|e| Error::io(&cat_path, e))?;

    let cats: Vec<u32> = categories.keys().copied().collect();
    let split = FoldSplit::new(&cats, 3.min(cats.len()), split_seed)?;
    for (i, part) in split.parts().iter().enumerate() {
        let path = root.join("splits").join(format!("fold_{}.json", i + 1));
        fs::write(&path, serde_json::to_string(part).expect("serializable"))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
