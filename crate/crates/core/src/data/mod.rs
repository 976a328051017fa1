//! Few-shot, class-structured image datasets.
//!
//! A dataset holds `n_classes × n_per_class` images of identical size with
//! pixel values in [0, 1]. Splits, batch orders and task orders are pure
//! functions of the dataset and a seed.

mod io;
mod synthetic;

pub use io::{load_binary, load_dataset, load_png_dir, save_binary, DATA_MAGIC};
pub use synthetic::{make_synthetic, SyntheticSpec};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    names: Vec<String>,
    n_per_class: usize,
    height: usize,
    width: usize,
    channels: usize,
    /// class-major, then example, then H×W×C row-major
    pixels: Vec<f32>,
}

impl FewShotDataset {
    pub fn new(
        names: Vec<String>,
        n_per_class: usize,
        (height, width, channels): (usize, usize, usize),
        pixels: Vec<f32>,
    ) -> Result<Self> {
        if names.is_empty() || n_per_class == 0 || height * width * channels == 0 {
            return Err(Error::Data("dataset dimensions must be positive".into()));
        }
        let want = names.len() * n_per_class * height * width * channels;
        if pixels.len() != want {
            return Err(Error::Data(format!(
                "expected {want} pixel values, got {}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(FewShotDataset {
            names,
            n_per_class,
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.names.len()
    }

    pub fn n_per_class(&self) -> usize {
        self.n_per_class
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    /// (height, width, channels)
    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    /// One image, H×W×C.
    pub fn image(&self, class: usize, example: usize) -> &[f32] {
        let len = self.image_len();
        let start = (class * self.n_per_class + example) * len;
        &self.pixels[start..start + len]
    }

    /// A new dataset made of the given classes, in the given order.
    pub fn subset(&self, classes: &[usize]) -> Result<FewShotDataset> {
        let per = self.n_per_class * self.image_len();
        let mut pixels = Vec::with_capacity(classes.len() * per);
        let mut names = Vec::with_capacity(classes.len());
        for &c in classes {
            if c >= self.n_classes() {
                return Err(Error::Data(format!("class {c} out of range")));
            }
            pixels.extend_from_slice(&self.pixels[c * per..(c + 1) * per]);
            names.push(self.names[c].clone());
        }
        FewShotDataset::new(names, self.n_per_class, self.image_shape(), pixels)
    }

    /// Contiguous class range as its own dataset.
    pub fn class_range(&self, start: usize, len: usize) -> Result<FewShotDataset> {
        if start + len > self.n_classes() || len == 0 {
            return Err(Error::Data(format!(
                "classes {start}..{} not available in a {}-class dataset",
                start + len,
                self.n_classes()
            )));
        }
        self.subset(&(start..start + len).collect::<Vec<_>>())
    }

    /// NCHW tensor and labels for a list of samples.
    pub fn batch(&self, samples: &[Sample]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (h, w, c) = self.image_shape();
        let mut data = Vec::with_capacity(samples.len() * self.image_len());
        for s in samples {
            let img = self.image(s.class, s.example);
            // HWC -> CHW
            for ch in 0..c {
                data.extend((0..h * w).map(|i| img[i * c + ch]));
            }
        }
        let x = Tensor::new(vec![samples.len(), c, h, w], data)?;
        Ok((x, samples.iter().map(|s| s.label).collect()))
    }
}

/// One example reference. `label` is the class index as the model sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Sample {
    pub label: usize,
    pub class: usize,
    pub example: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            n_train: 15,
            n_test: 5,
            seed: 0,
        }
    }
}

/// Per-class example indices drawn from a dataset; label = position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct View {
    pub classes: Vec<usize>,
    pub examples: Vec<Vec<usize>>,
}

impl View {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.examples.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All samples, class by class, in stored order.
    pub fn samples(&self) -> Vec<Sample> {
        self.classes
            .iter()
            .zip(&self.examples)
            .enumerate()
            .flat_map(|(label, (&class, exs))| {
                exs.iter().map(move |&example| Sample {
                    label,
                    class,
                    example,
                })
            })
            .collect()
    }

    pub fn class_samples(&self, label: usize) -> Vec<Sample> {
        self.examples[label]
            .iter()
            .map(|&example| Sample {
                label,
                class: self.classes[label],
                example,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: View,
    pub test: View,
}

/// Deterministic per-class train/test partition.
pub fn split(dataset: &FewShotDataset, spec: &SplitSpec) -> Result<Split> {
    if spec.n_train + spec.n_test > dataset.n_per_class() {
        return Err(Error::Data(format!(
            "split {}+{} exceeds {} examples per class",
            spec.n_train,
            spec.n_test,
            dataset.n_per_class()
        )));
    }
    let classes: Vec<usize> = (0..dataset.n_classes()).collect();
    let mut train = Vec::with_capacity(classes.len());
    let mut test = Vec::with_capacity(classes.len());
    for &c in &classes {
        let mut idx: Vec<usize> = (0..dataset.n_per_class()).collect();
        idx.shuffle(&mut seed::rng(spec.seed, Stream::Split, c as u32));
        train.push(idx[..spec.n_train].to_vec());
        test.push(idx[spec.n_train..spec.n_train + spec.n_test].to_vec());
    }
    Ok(Split {
        train: View {
            classes: classes.clone(),
            examples: train,
        },
        test: View {
            classes,
            examples: test,
        },
    })
}

/// A full shuffle of the view, cut into batches; the last may be short.
pub fn iid_batches(view: &View, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<Sample>>> {
    if batch_size == 0 {
        return Err(Error::Invalid("batch size must be at least 1".into()));
    }
    let mut all = view.samples();
    if all.is_empty() {
        return Err(Error::Data("cannot batch an empty view".into()));
    }
    all.shuffle(&mut seed::rng_from(epoch_seed));
    Ok(all.chunks(batch_size).map(<[Sample]>::to_vec).collect())
}

/// Order in which tasks (classes) are presented during sequential learning.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskOrder {
    pub order: Vec<usize>,
    pub seed: u64,
}

impl TaskOrder {
    pub fn shuffled(n_tasks: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n_tasks).collect();
        order.shuffle(&mut seed::rng(seed, Stream::TaskOrder, 0));
        TaskOrder { order, seed }
    }

    /// Position of each task in the training order.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (i, &t) in self.order.iter().enumerate() {
            pos[t] = i;
        }
        pos
    }
}

/// Single examples, task after task in `order`, each task's examples in
/// split order.
pub fn sequential_stream(view: &View, order: &TaskOrder) -> Result<Vec<Sample>> {
    let n = view.n_classes();
    let mut seen = vec![false; n];
    if order.order.len() != n {
        return Err(Error::Data(format!(
            "task order covers {} tasks, view has {n}",
            order.order.len()
        )));
    }
    for &t in &order.order {
        if t >= n || std::mem::replace(&mut seen[t], true) {
            return Err(Error::Data(format!("task order is not a permutation (task {t})")));
        }
    }
    Ok(order
        .order
        .iter()
        .flat_map(|&label| view.class_samples(label))
        .collect())
}
