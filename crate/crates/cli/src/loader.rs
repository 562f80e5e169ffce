//! In-memory image store and deterministic batch assembly.
//!
//! View generation is pure per sample (keyed by the global draw position),
//! so a worker pool only changes who computes a view, never its bytes.

use std::path::Path;

use mrlb_core::augment::{make_view_pair, AugmentationConfig};
use mrlb_core::error::{Error, Result};
use mrlb_core::mococore::TrainBatch;
use mrlb_core::ppm::load_image_tensor;
use mrlb_core::protocol::{DatasetManifest, ManifestEntry, Split};

pub struct ImageStore {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<mrlb_core::tensor::Tensor<f32>>,
}

impl ImageStore {
    /// Load every image of `split` into memory, aligned with its entry.
    pub fn load(manifest: &DatasetManifest, data_dir: &Path, split: Split) -> Result<ImageStore> {
        let entries: Vec<ManifestEntry> = manifest.entries_in(split).cloned().collect();
        if entries.is_empty() {
            return Err(Error::Manifest(format!("no entries in split {split:?}")));
        }
        let images = entries
            .iter()
            .map(|e| load_image_tensor(&data_dir.join(&e.image_ref)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageStore { entries, images })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Build one training batch. `slots[i]` names the dataset index of sample
/// `i`; the per-sample RNG is keyed by `positions[i]` (the global draw
/// position), so the result is identical for any worker count.
pub fn build_batch(
    store: &ImageStore,
    config: &AugmentationConfig,
    slots: &[usize],
    positions: &[u64],
    seed: u64,
    workers: usize,
) -> Result<TrainBatch> {
    assert_eq!(slots.len(), positions.len());
    let b = slots.len();
    let mut views: Vec<Option<(mrlb_core::tensor::Tensor<f32>, mrlb_core::tensor::Tensor<f32>)>> =
        vec![None; b];

    let work: Vec<(usize, usize, u64)> = slots
        .iter()
        .zip(positions)
        .enumerate()
        .map(|(slot, (&idx, &pos))| (slot, idx, pos))
        .collect();

    if workers <= 1 {
        for &(slot, idx, pos) in &work {
            views[slot] = Some(make_view_pair(&store.images[idx], config, pos, seed)?);
        }
    } else {
        let chunk = b.div_ceil(workers);
        let results: Vec<Result<Vec<(usize, _)>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = work
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&(slot, idx, pos)| {
                                make_view_pair(&store.images[idx], config, pos, seed)
                                    .map(|pair| (slot, pair))
                            })
                            .collect()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("view worker panicked")).collect()
        });
        for result in results {
            for (slot, pair) in result? {
                views[slot] = Some(pair);
            }
        }
    }

    let first = views[0].as_ref().expect("views filled").0.shape().to_vec();
    let (c, h, w) = (first[0], first[1], first[2]);
    let mut v1 = vec![0.0f32; b * c * h * w];
    let mut v2 = vec![0.0f32; b * c * h * w];
    for (slot, pair) in views.into_iter().enumerate() {
        let (a, bb) = pair.expect("views filled");
        v1[slot * c * h * w..(slot + 1) * c * h * w].copy_from_slice(a.data());
        v2[slot * c * h * w..(slot + 1) * c * h * w].copy_from_slice(bb.data());
    }
    Ok(TrainBatch {
        view1: mrlb_core::tensor::Tensor::new(vec![b, c, h, w], v1)?,
        view2: mrlb_core::tensor::Tensor::new(vec![b, c, h, w], v2)?,
        sample_ids: slots.iter().map(|&s| s as u64).collect(),
    })
}

/// Deterministic epoch-shuffled sample order, lazily extended.
pub struct SampleScheduler {
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    n: usize,
    seed: u64,
}

impl SampleScheduler {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut s = SampleScheduler { order: Vec::new(), cursor: 0, epoch: 0, n, seed };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        let key = mrlb_core::rng::StreamKey::from_seed(self.seed).child(0xe110).child(self.epoch);
        self.order = mrlb_core::rng::shuffled_indices(self.n, key);
        self.cursor = 0;
    }

    /// Next `b` dataset indices, crossing epoch boundaries as needed.
    pub fn next_batch(&mut self, b: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}
