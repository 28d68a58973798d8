//! Episode sources: a seeded synthetic world and an on-disk image folder.

mod directory;
pub mod render;

use std::ops::Range;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::Rng;

pub use directory::ImageDirectory;
pub use render::{least_squares_intersection, BoxRegion, ClassPrototype, LineBundle, Scene};

use crate::error::{Error, Result};
use crate::seed;
use crate::task::{Batch, Episode, Labels, TaskSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn index(self) -> usize {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn name(self) -> &'static str {
        ["train", "val", "test"][self.index()]
    }
}

/// Dense per-pixel label kinds rendered from the same scenes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenseKind {
    Depth,
    Normals,
}

impl DenseKind {
    pub fn channels(self) -> usize {
        match self {
            DenseKind::Depth => 1,
            DenseKind::Normals => 3,
        }
    }

    fn tag(self) -> u64 {
        match self {
            DenseKind::Depth => 2,
            DenseKind::Normals => 3,
        }
    }
}

const TAG_CLASS: u64 = 1;
const TAG_VANISHING: u64 = 4;

/// Seeded generator of classes, scenes and line bundles.
///
/// Class and subtask identifiers are global; each split owns a contiguous,
/// disjoint range of them.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    pub seed: u64,
    /// `(channels, height, width)` of rendered inputs.
    pub image: (usize, usize, usize),
    /// `(height, width)` of dense labels.
    pub label_hw: (usize, usize),
    /// Classes per split, train/val/test.
    pub classes: [usize; 3],
    /// Scene distributions per split, for dense and vector tasks.
    pub subtasks: [usize; 3],
    /// Input channel replaced with class-independent uniform noise.
    pub noise_channel: Option<usize>,
}

fn pool(counts: &[usize; 3], split: Split) -> Range<usize> {
    let start: usize = counts[..split.index()].iter().sum();
    start..start + counts[split.index()]
}

impl SyntheticWorld {
    pub fn new(seed: u64, image: (usize, usize, usize), label_hw: (usize, usize)) -> Self {
        SyntheticWorld {
            seed,
            image,
            label_hw,
            classes: [32, 8, 12],
            subtasks: [40, 10, 12],
            noise_channel: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (c, h, w) = self.image;
        if c == 0 || h == 0 || w == 0 || self.label_hw.0 == 0 || self.label_hw.1 == 0 {
            return Err(Error::Config("world image and label sizes must be positive".into()));
        }
        if let Some(n) = self.noise_channel {
            if n >= c {
                return Err(Error::Config(format!("noise channel {n} out of range for {c} channels")));
            }
        }
        Ok(())
    }

    pub fn class_pool(&self, split: Split) -> Range<usize> {
        pool(&self.classes, split)
    }

    pub fn subtask_pool(&self, split: Split) -> Range<usize> {
        pool(&self.subtasks, split)
    }

    pub fn prototype(&self, class: usize) -> ClassPrototype {
        ClassPrototype::random(&mut seed::rng(&[self.seed, TAG_CLASS, class as u64]))
    }

    fn plant_noise<R: Rng + ?Sized>(&self, image: &mut [f64], rng: &mut R) {
        if let Some(ch) = self.noise_channel {
            let (_, h, w) = self.image;
            for v in &mut image[ch * h * w..(ch + 1) * h * w] {
                *v = rng.random::<f64>();
            }
        }
    }

    /// One image of a class.
    pub fn render_class<R: Rng + ?Sized>(&self, proto: &ClassPrototype, rng: &mut R) -> Vec<f64> {
        let (c, h, w) = self.image;
        let mut img = proto.render(c, h, w, rng);
        self.plant_noise(&mut img, rng);
        img
    }

    /// N-way K-shot episode over classes of `split`. Class-to-index
    /// assignment is a fresh random permutation per episode.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_classification_episode(
        &self,
        task_id: &str,
        split: Split,
        ways: usize,
        shots: usize,
        queries: usize,
        episode_seed: u64,
    ) -> Result<Episode> {
        let pool: Vec<usize> = self.class_pool(split).collect();
        if ways < 2 || shots == 0 || queries == 0 {
            return Err(Error::Config("episodes need ways ≥ 2, shots ≥ 1 and queries ≥ 1".into()));
        }
        if pool.len() < ways {
            return Err(Error::Config(format!(
                "{} split has {} classes, fewer than {ways} ways",
                split.name(),
                pool.len()
            )));
        }
        let mut rng = seed::rng(&[self.seed, episode_seed]);
        let chosen: Vec<usize> = pool.choose_multiple(&mut rng, ways).copied().collect();
        let (mut s_img, mut s_lab, mut q_img, mut q_lab) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        for (index, &class) in chosen.iter().enumerate() {
            let proto = self.prototype(class);
            for _ in 0..shots {
                s_img.push(self.render_class(&proto, &mut rng));
                s_lab.push(index);
            }
            for _ in 0..queries {
                q_img.push(self.render_class(&proto, &mut rng));
                q_lab.push(index);
            }
        }
        Ok(Episode {
            task_id: task_id.to_string(),
            subtask_id: (episode_seed % (1 << 32)) as usize,
            support: Batch::new(render::stack(s_img, self.image)?, Labels::Classes(s_lab))?,
            query: Batch::new(render::stack(q_img, self.image)?, Labels::Classes(q_lab))?,
        })
    }

    /// Scene distribution of a dense subtask; `sample_scene` draws from it.
    fn dense_style(&self, kind: DenseKind, subtask: usize) -> DenseStyle {
        let mut rng = seed::rng(&[self.seed, kind.tag(), subtask as u64]);
        DenseStyle {
            tint: [rng.random_range(0.4..1.0), rng.random_range(0.4..1.0), rng.random_range(0.4..1.0)],
            texture_frequency: rng.random_range(2.0..6.0),
            depth_center: rng.random_range(0.35..0.65),
            slope: rng.random_range(0.05..0.25),
            box_probability: rng.random_range(0.0..1.0),
        }
    }

    pub fn sample_scene<R: Rng + ?Sized>(&self, kind: DenseKind, subtask: usize, rng: &mut R) -> Scene {
        let style = self.dense_style(kind, subtask);
        let mut boxes = Vec::new();
        if rng.random::<f64>() < style.box_probability {
            let (u0, v0) = (rng.random_range(0.0..0.6), rng.random_range(0.0..0.6));
            let (bw, bh) = (rng.random_range(0.2..0.4), rng.random_range(0.2..0.4));
            boxes.push(BoxRegion {
                u0,
                v0,
                u1: u0 + bw,
                v1: v0 + bh,
                depth: rng.random_range(0.02..0.25),
            });
        }
        Scene {
            d0: style.depth_center + rng.random_range(-0.05..0.05),
            slope_u: rng.random_range(-style.slope..style.slope),
            slope_v: rng.random_range(-style.slope..style.slope),
            boxes,
            tint: style.tint,
            texture_frequency: style.texture_frequency,
            noise: 0.02,
        }
    }

    /// Image and dense label of one scene.
    pub fn render_scene<R: Rng + ?Sized>(&self, scene: &Scene, kind: DenseKind, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let (c, h, w) = self.image;
        let mut img = scene.render_image(c, h, w, rng);
        self.plant_noise(&mut img, rng);
        let (lh, lw) = self.label_hw;
        let label = match kind {
            DenseKind::Depth => scene.depth_map(lh, lw),
            DenseKind::Normals => scene.normal_map(lh, lw),
        };
        (img, label)
    }

    fn pick_subtask<R: Rng + ?Sized>(&self, split: Split, subtask: Option<usize>, rng: &mut R) -> Result<usize> {
        let range = self.subtask_pool(split);
        match subtask {
            Some(s) if range.contains(&s) => Ok(s),
            Some(s) => Err(Error::Config(format!("subtask {s} is not in the {} split", split.name()))),
            None if range.is_empty() => Err(Error::Config(format!("{} split has no subtasks", split.name()))),
            None => Ok(rng.random_range(range)),
        }
    }

    /// Support and query scenes drawn from one subtask's distribution; a
    /// random training subtask when `subtask` is `None`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_dense_regression_episode(
        &self,
        task_id: &str,
        kind: DenseKind,
        split: Split,
        subtask: Option<usize>,
        support: usize,
        query: usize,
        episode_seed: u64,
    ) -> Result<Episode> {
        if support == 0 || query == 0 {
            return Err(Error::Config("dense episodes need support and query samples".into()));
        }
        let mut rng = seed::rng(&[self.seed, kind.tag(), episode_seed]);
        let sub = self.pick_subtask(split, subtask, &mut rng)?;
        let (lh, lw) = self.label_hw;
        let mut draw = |n: usize| -> Result<Batch> {
            let (mut imgs, mut labels) = (Vec::new(), Vec::new());
            for _ in 0..n {
                let scene = self.sample_scene(kind, sub, &mut rng);
                let (i, l) = self.render_scene(&scene, kind, &mut rng);
                imgs.push(i);
                labels.push(l);
            }
            let label = Tensor::new(vec![n, kind.channels(), lh, lw], labels.concat())?;
            Batch::new(render::stack(imgs, self.image)?, Labels::Dense(label))
        };
        let s = draw(support)?;
        let q = draw(query)?;
        Ok(Episode {
            task_id: task_id.to_string(),
            subtask_id: sub,
            support: s,
            query: q,
        })
    }

    pub fn sample_line_bundle<R: Rng + ?Sized>(&self, subtask: usize, rng: &mut R) -> LineBundle {
        let mut style = seed::rng(&[self.seed, TAG_VANISHING, subtask as u64]);
        let lines = style.random_range(4..=8usize);
        let width = style.random_range(0.02..0.05);
        let center: (f64, f64) = (style.random_range(0.3..0.7), style.random_range(0.3..0.7));
        let spread = 0.15;
        let mut color = || [style.random::<f64>(), style.random::<f64>(), style.random::<f64>()];
        let background = color();
        let line_color = color();
        let vp = (
            (center.0 + rng.random_range(-spread..spread)).clamp(0.15, 0.85),
            (center.1 + rng.random_range(-spread..spread)).clamp(0.15, 0.85),
        );
        let rays: Vec<(f64, f64, f64)> = (0..lines)
            .map(|_| {
                let r0 = rng.random_range(0.05..0.2);
                (rng.random_range(0.0..2.0 * std::f64::consts::PI), r0, r0 + rng.random_range(0.2..0.6))
            })
            .collect();
        LineBundle {
            vanishing_point: vp,
            segments: LineBundle::from_rays(vp, &rays),
            width,
            background,
            line_color,
            noise: 0.02,
        }
    }

    /// Vanishing-point episode; labels are `(u, v)` in `[0, 1]²`.
    pub fn sample_vector_regression_episode(
        &self,
        task_id: &str,
        split: Split,
        subtask: Option<usize>,
        support: usize,
        query: usize,
        episode_seed: u64,
    ) -> Result<Episode> {
        if support == 0 || query == 0 {
            return Err(Error::Config("vector episodes need support and query samples".into()));
        }
        let mut rng = seed::rng(&[self.seed, TAG_VANISHING, episode_seed]);
        let sub = self.pick_subtask(split, subtask, &mut rng)?;
        let (c, h, w) = self.image;
        let mut draw = |n: usize| -> Result<Batch> {
            let (mut imgs, mut labels) = (Vec::new(), Vec::new());
            for _ in 0..n {
                let bundle = self.sample_line_bundle(sub, &mut rng);
                let mut img = bundle.render(c, h, w, &mut rng);
                self.plant_noise(&mut img, &mut rng);
                imgs.push(img);
                labels.extend([bundle.vanishing_point.0, bundle.vanishing_point.1]);
            }
            Batch::new(render::stack(imgs, self.image)?, Labels::Vectors(Tensor::new(vec![n, 2], labels)?))
        };
        let s = draw(support)?;
        let q = draw(query)?;
        Ok(Episode {
            task_id: task_id.to_string(),
            subtask_id: sub,
            support: s,
            query: q,
        })
    }
}

struct DenseStyle {
    tint: [f64; 3],
    texture_frequency: f64,
    depth_center: f64,
    slope: f64,
    box_probability: f64,
}

/// How a task's episodes are produced.
#[derive(Clone, Debug)]
pub enum Generator {
    Classification { ways: usize, shots: usize, queries: usize },
    Dense { kind: DenseKind, support: usize, query: usize },
    VanishingPoint { support: usize, query: usize },
    Directory { source: Arc<ImageDirectory>, ways: usize, shots: usize, queries: usize },
}

/// A task together with the generator of its episodes.
#[derive(Clone, Debug)]
pub struct TaskSource {
    pub task: TaskSpec,
    pub generator: Generator,
}

impl TaskSource {
    /// One episode; `subtask` pins a dense or vector scene distribution.
    pub fn episode(&self, world: &SyntheticWorld, split: Split, subtask: Option<usize>, episode_seed: u64) -> Result<Episode> {
        let id = &self.task.id;
        match &self.generator {
            Generator::Classification { ways, shots, queries } => {
                world.sample_classification_episode(id, split, *ways, *shots, *queries, episode_seed)
            }
            Generator::Dense { kind, support, query } => {
                world.sample_dense_regression_episode(id, *kind, split, subtask, *support, *query, episode_seed)
            }
            Generator::VanishingPoint { support, query } => {
                world.sample_vector_regression_episode(id, split, subtask, *support, *query, episode_seed)
            }
            Generator::Directory { source, ways, shots, queries } => {
                source.sample_episode(id, split, *ways, *shots, *queries, episode_seed)
            }
        }
    }

    fn has_subtasks(&self) -> bool {
        matches!(self.generator, Generator::Dense { .. } | Generator::VanishingPoint { .. })
    }
}

const TAG_TRAIN: u64 = 11;
const TAG_EVAL: u64 = 12;

/// Training episodes for one outer step: `per_task` episodes of every task.
pub fn training_episodes(world: &SyntheticWorld, sources: &[TaskSource], iteration: u64, per_task: usize) -> Result<Vec<Episode>> {
    let mut out = Vec::with_capacity(sources.len() * per_task);
    for (j, src) in sources.iter().enumerate() {
        for b in 0..per_task {
            let s = seed::derive(&[world.seed, TAG_TRAIN, iteration, j as u64, b as u64]);
            out.push(src.episode(world, Split::Train, None, s)?);
        }
    }
    Ok(out)
}

/// Held-out suite fixed by `suite_seed`. Scene-based tasks get one episode
/// per subtask of the split, cycling when `per_task` exceeds the pool.
pub fn evaluation_suite(
    world: &SyntheticWorld,
    sources: &[TaskSource],
    split: Split,
    per_task: usize,
    suite_seed: u64,
) -> Result<Vec<Episode>> {
    let mut out = Vec::new();
    let subtasks: Vec<usize> = world.subtask_pool(split).collect();
    for (j, src) in sources.iter().enumerate() {
        for b in 0..per_task {
            let s = seed::derive(&[world.seed, TAG_EVAL, suite_seed, split.index() as u64, j as u64, b as u64]);
            let sub = if src.has_subtasks() {
                if subtasks.is_empty() {
                    return Err(Error::Config(format!("{} split has no subtasks", split.name())));
                }
                Some(subtasks[b % subtasks.len()])
            } else {
                None
            };
            out.push(src.episode(world, split, sub, s)?);
        }
    }
    Ok(out)
}
