use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::IndexedRandom;

use super::{render, Split};
use crate::error::{Error, Result};
use crate::seed;
use crate::task::{Batch, Episode, Labels};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Few-shot classification images laid out as `root/<class>/*.{png,jpg}`
/// with `train.txt`, `val.txt` and `test.txt` listing class names.
#[derive(Clone, Debug)]
pub struct ImageDirectory {
    pub root: PathBuf,
    /// `(channels, height, width)` images are resized to.
    pub shape: (usize, usize, usize),
    splits: [Vec<(String, Vec<PathBuf>)>; 3],
}

fn read_split(root: &Path, split: Split) -> Result<Vec<String>> {
    let path = root.join(format!("{}.txt", split.name()));
    let text = fs::read_to_string(&path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::Io(e.to_string()))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if !ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            continue;
        }
        // Header check only; full decoding happens per episode.
        let readable = image::ImageReader::open(&path)
            .ok()
            .and_then(|r| r.with_guessed_format().ok())
            .and_then(|r| r.into_dimensions().ok())
            .is_some();
        if readable {
            files.push(path);
        } else {
            log::warn!("skipping undecodable image {}", path.display());
        }
    }
    files.sort();
    Ok(files)
}

impl ImageDirectory {
    pub fn open(root: impl Into<PathBuf>, shape: (usize, usize, usize)) -> Result<Self> {
        let root = root.into();
        if !matches!(shape.0, 1 | 3) || shape.1 == 0 || shape.2 == 0 {
            return Err(Error::Config(format!("unsupported image shape {shape:?}; channels must be 1 or 3")));
        }
        let names = [read_split(&root, Split::Train)?, read_split(&root, Split::Val)?, read_split(&root, Split::Test)?];
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, list) in [Split::Train, Split::Val, Split::Test].iter().zip(&names) {
            let mut local = BTreeSet::new();
            for name in list {
                if !local.insert(name.as_str()) {
                    return Err(Error::Config(format!("class `{name}` listed twice in {}", split.name())));
                }
                if let Some(other) = seen.insert(name, split.name()) {
                    return Err(Error::Config(format!("class `{name}` appears in both {other} and {}", split.name())));
                }
            }
        }
        let load = |list: &Vec<String>| -> Result<Vec<(String, Vec<PathBuf>)>> {
            list.iter().map(|n| Ok((n.clone(), list_images(&root.join(n))?))).collect()
        };
        let splits = [load(&names[0])?, load(&names[1])?, load(&names[2])?];
        Ok(ImageDirectory { root, shape, splits })
    }

    pub fn classes(&self, split: Split) -> Vec<&str> {
        self.splits[split.index()].iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Decodes, resizes bilinearly and scales one image to `[0, 1]`.
    pub fn load_image(&self, path: &Path) -> Result<Vec<f64>> {
        let (c, h, w) = self.shape;
        let img = image::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let rgb = image::imageops::resize(&img.to_rgb8(), w as u32, h as u32, FilterType::Triangle);
        let mut out = vec![0.0; c * h * w];
        for (x, y, p) in rgb.enumerate_pixels() {
            let (x, y) = (x as usize, y as usize);
            let px = [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0];
            if c == 1 {
                out[y * w + x] = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
            } else {
                for (k, v) in px.iter().enumerate() {
                    out[(k * h + y) * w + x] = *v;
                }
            }
        }
        Ok(out)
    }

    /// N-way episode over classes with at least `shots + queries` images.
    pub fn sample_episode(&self, task_id: &str, split: Split, ways: usize, shots: usize, queries: usize, episode_seed: u64) -> Result<Episode> {
        let need = shots + queries;
        let eligible: Vec<&(String, Vec<PathBuf>)> = self.splits[split.index()]
            .iter()
            .filter(|(name, files)| {
                let ok = files.len() >= need;
                if !ok {
                    log::warn!("class `{name}` has {} images, fewer than {need}; excluded", files.len());
                }
                ok
            })
            .collect();
        if ways < 2 || shots == 0 || queries == 0 {
            return Err(Error::Config("episodes need ways ≥ 2, shots ≥ 1 and queries ≥ 1".into()));
        }
        if eligible.len() < ways {
            return Err(Error::Config(format!(
                "{} split has {} usable classes, fewer than {ways} ways",
                split.name(),
                eligible.len()
            )));
        }
        let mut rng = seed::rng(&[episode_seed]);
        let chosen: Vec<_> = eligible.choose_multiple(&mut rng, ways).collect();
        let (mut s_img, mut s_lab, mut q_img, mut q_lab) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (index, (_, files)) in chosen.iter().enumerate() {
            let picked: Vec<&PathBuf> = files.choose_multiple(&mut rng, need).collect();
            for (i, path) in picked.iter().enumerate() {
                let img = self.load_image(path)?;
                if i < shots {
                    s_img.push(img);
                    s_lab.push(index);
                } else {
                    q_img.push(img);
                    q_lab.push(index);
                }
            }
        }
        Ok(Episode {
            task_id: task_id.to_string(),
            subtask_id: (episode_seed % (1 << 32)) as usize,
            support: Batch::new(render::stack(s_img, self.shape)?, Labels::Classes(s_lab))?,
            query: Batch::new(render::stack(q_img, self.shape)?, Labels::Classes(q_lab))?,
        })
    }
}
