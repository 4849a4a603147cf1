//! Datasets, deterministic batching and the labeled synthetic generator.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{images_to_tensor, read_ppm, resize, write_ppm, Image};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub image: Image,
    pub label: Option<usize>,
    /// File name or generator tag the image came from.
    pub source: String,
}

/// Eagerly loaded images; the stable index of an item is its position.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    resolution: usize,
    channels: usize,
}

impl Dataset {
    pub fn new(items: Vec<Item>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Data("empty dataset".into()))?;
        let (h, w, c) = (first.image.height(), first.image.width(), first.image.channels());
        if h != w {
            return Err(Error::Data(format!("images must be square, got {h}x{w}")));
        }
        if items.iter().any(|it| (it.image.height(), it.image.width(), it.image.channels()) != (h, w, c)) {
            return Err(Error::Data("all images must share size and channel count".into()));
        }
        Ok(Dataset { items, resolution: h, channels: c })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn image(&self, idx: usize) -> &Image {
        &self.items[idx].image
    }

    /// Labels for every item, or `None` if any is missing.
    pub fn labels(&self) -> Option<Vec<usize>> {
        self.items.iter().map(|it| it.label).collect()
    }

    /// Per-channel mean over all pixels of all images.
    pub fn channel_mean(&self) -> Vec<f32> {
        let mut acc = vec![0.0f64; self.channels];
        for it in &self.items {
            for (a, m) in acc.iter_mut().zip(it.image.mean_per_channel()) {
                *a += m as f64;
            }
        }
        acc.into_iter().map(|a| (a / self.items.len() as f64) as f32).collect()
    }

    /// Subset with items re-indexed from zero, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(indices.iter().map(|&i| self.items[i].clone()).collect())
    }

    /// Writes every image as a `.ppm` plus `labels.tsv` when labels exist.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let width = self.len().to_string().len();
        let mut tsv = String::new();
        for (i, it) in self.items.iter().enumerate() {
            let name = format!("img{i:0width$}.ppm");
            write_ppm(dir.join(&name), &it.image)?;
            if let Some(l) = it.label {
                tsv.push_str(&format!("{name}\t{l}\n"));
            }
        }
        if !tsv.is_empty() {
            std::fs::write(dir.join("labels.tsv"), tsv)?;
        }
        Ok(())
    }
}

/// Loads `*.ppm` files sorted by name, resized to `resolution²`, with
/// optional labels from `labels.tsv` (`filename<TAB>integer`).
pub fn dataset_from_dir(path: impl AsRef<Path>, resolution: usize) -> Result<Dataset> {
    let dir = path.as_ref();
    let mut names: Vec<String> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.to_ascii_lowercase().ends_with(".ppm"))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let mut labels = BTreeMap::new();
    let tsv = dir.join("labels.tsv");
    if tsv.exists() {
        for (n, line) in std::fs::read_to_string(&tsv)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (file, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Data(format!("labels.tsv line {}: expected filename<TAB>label", n + 1)))?;
            let label: usize = label
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("labels.tsv line {}: bad label {label:?}", n + 1)))?;
            if !names.iter().any(|x| x == file) {
                return Err(Error::Data(format!("labels.tsv references missing image {file}")));
            }
            labels.insert(file.to_string(), label);
        }
    }
    let mut items = Vec::with_capacity(names.len());
    for name in names {
        let img = read_ppm(dir.join(&name))?;
        let image = resize(&img, resolution, resolution)?;
        items.push(Item { image, label: labels.get(&name).copied(), source: name });
    }
    Dataset::new(items)
}

/// Labeled disks (class 0) and squares (class 1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub size: usize,
    /// Shape radius (disk) or half side (square) as a fraction of `size`.
    pub radius: (f64, f64),
    /// Maximum center offset as a fraction of `size`.
    pub jitter: f64,
    pub noise: f64,
    /// Brightness added from the top row to the bottom row of the background.
    pub gradient: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { n_per_class: 32, size: 32, radius: (0.22, 0.3), jitter: 0.08, noise: 0.02, gradient: 0.3, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn new(total: usize, size: usize, seed: u64) -> Self {
        SyntheticSpec { n_per_class: total.div_ceil(2), size, seed, ..Default::default() }
    }
}

/// Renders a [`SyntheticSpec`]. Classes alternate so that any prefix is
/// balanced. Fills are bright random colors over a dark background that
/// brightens downwards; every pixel gets `N(0, noise²)` noise.
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.size < 8 {
        return Err(Error::Data(format!("synthetic images need at least 8 px, got {}", spec.size)));
    }
    if spec.n_per_class == 0 {
        return Err(Error::Data("need at least one image per class".into()));
    }
    let s = spec.size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut items = Vec::with_capacity(2 * spec.n_per_class);
    for i in 0..2 * spec.n_per_class {
        let class = i % 2;
        let r = rng.random_range(spec.radius.0..=spec.radius.1) * s as f64;
        let max_off = spec.jitter * s as f64;
        let cy = (s as f64 - 1.0) / 2.0 + rng.random_range(-max_off..=max_off);
        let cx = (s as f64 - 1.0) / 2.0 + rng.random_range(-max_off..=max_off);
        let fill: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..=1.0));
        let bg = rng.random_range(0.05..=0.2);
        let mut px = Vec::with_capacity(s * s * 3);
        for y in 0..s {
            let base = bg + spec.gradient * y as f64 / (s - 1) as f64;
            for x in 0..s {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = match class {
                    0 => dy * dy + dx * dx <= r * r,
                    _ => dy.abs() <= r && dx.abs() <= r,
                };
                for f in fill {
                    let v = if inside { f } else { base };
                    let n: f64 = rng.sample(StandardNormal);
                    px.push((v + spec.noise * n).clamp(0.0, 1.0) as f32);
                }
            }
        }
        let tag = if class == 0 { "disk" } else { "square" };
        items.push(Item { image: Image::new(s, s, 3, px)?, label: Some(class), source: format!("synth-{tag}-{i}") });
    }
    Dataset::new(items)
}

/// Index lists for one epoch. With `shuffle`, the order is a permutation
/// seeded by `seed ^ epoch`. The last batch may be short.
///
/// ```
/// let b = pretext::data::batches(10, 4, false, 0, 0);
/// assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
/// ```
pub fn batches(n: usize, batch_size: usize, shuffle: bool, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ epoch));
    }
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// A materialized batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Vec<Image>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `[B, C, H, W]` view of the images.
    pub fn tensor(&self) -> Result<Tensor> {
        images_to_tensor(&self.images)
    }
}

fn materialize(ds: &Dataset, indices: &[usize]) -> Batch {
    Batch { indices: indices.to_vec(), images: indices.iter().map(|&i| ds.image(i).clone()).collect() }
}

/// Feeds the planned batches to `f` in plan order. With `num_workers > 0`
/// batches are assembled on that many scoped threads; delivery order is
/// unchanged. `f` returning `Ok(false)` stops early.
pub fn for_each_batch<F>(ds: &Dataset, plan: &[Vec<usize>], num_workers: usize, mut f: F) -> Result<()>
where
    F: FnMut(Batch) -> Result<bool>,
{
    if num_workers == 0 {
        for idx in plan {
            if !f(materialize(ds, idx))? {
                break;
            }
        }
        return Ok(());
    }
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::sync_channel::<(usize, Batch)>(2 * num_workers);
        for _ in 0..num_workers {
            let tx = tx.clone();
            let (next, stop) = (&next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= plan.len() || tx.send((i, materialize(ds, &plan[i]))).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        let mut pending = BTreeMap::new();
        let mut want = 0;
        let mut result = Ok(());
        for (i, batch) in rx.iter() {
            pending.insert(i, batch);
            while let Some(b) = pending.remove(&want) {
                want += 1;
                match f(b) {
                    Ok(true) => {}
                    Ok(false) => {
                        stop.store(true, Ordering::Relaxed);
                        break;
                    }
                    Err(e) => {
                        stop.store(true, Ordering::Relaxed);
                        result = Err(e);
                        break;
                    }
                }
            }
            if stop.load(Ordering::Relaxed) {
                break;
            }
        }
        // Dropping the receiver unblocks any worker stuck on a full channel.
        drop(rx);
        result
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_partition() {
        assert_eq!(batches(5, 2, false, 0, 0), vec![vec![0, 1], vec![2, 3], vec![4]]);
        for seed in 0..10 {
            let b = batches(10, 3, true, seed, 1);
            let mut all: Vec<usize> = b.concat();
            all.sort();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
            assert_ne!(batches(10, 10, true, seed, 1), batches(10, 10, true, seed, 2));
        }
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SyntheticSpec { n_per_class: 5, size: 16, ..Default::default() };
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a, synth_dataset(&spec).unwrap());
        let labels = a.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 5);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 5);
        assert!(synth_dataset(&SyntheticSpec { size: 7, ..Default::default() }).is_err());
    }

    #[test]
    fn disk_differs_from_background() {
        let ds = synth_dataset(&SyntheticSpec { n_per_class: 1, size: 16, ..Default::default() }).unwrap();
        let img = ds.image(0);
        let center = img.get(8, 8, 0);
        let corner = img.get(0, 0, 0);
        assert!((center - corner).abs() > 0.2);
    }

    #[test]
    fn workers_preserve_order() {
        let ds = synth_dataset(&SyntheticSpec { n_per_class: 10, size: 8, ..Default::default() }).unwrap();
        let plan = batches(ds.len(), 3, true, 4, 0);
        for workers in [0, 1, 3] {
            let mut seen = Vec::new();
            for_each_batch(&ds, &plan, workers, |b| {
                assert_eq!(b.images[0], *ds.image(b.indices[0]));
                seen.push(b.indices);
                Ok(true)
            })
            .unwrap();
            assert_eq!(seen, plan);
        }
        let mut count = 0;
        for_each_batch(&ds, &plan, 2, |_| {
            count += 1;
            Ok(count < 2)
        })
        .unwrap();
        assert_eq!(count, 2);
    }
}
