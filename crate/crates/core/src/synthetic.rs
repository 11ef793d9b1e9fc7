//! Toy image tasks for smoke tests and demos.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use std::fs;
use std::path::Path;

use crate::data::{save_png, DatasetManifest, GroundTruth, Record, Sample, Split, Subset};
use crate::error::{Error, Result};
use crate::taxonomy::LesionClass;
use crate::tensor::Tensor;

/// Image quadrant, numbered row-major: 0 top-left, 1 top-right,
/// 2 bottom-left, 3 bottom-right.
pub fn quadrant_of(size: usize, y: f64, x: f64) -> usize {
    let half = size as f64 / 2.0;
    2 * usize::from(y >= half) + usize::from(x >= half)
}

/// Quadrant holding the evidence for `label` in [`quadrant_dataset`]:
/// top-right for 0, bottom-left for 1.
///
/// Each of these quadrants touches one of the two borders that strided
/// same-padded convolutions pad, so both classes have a local cue.
pub fn evidence_quadrant(label: usize) -> usize {
    if label == 0 {
        1
    } else {
        2
    }
}

/// `n` dim noisy `size × size` images with one bright square patch near the
/// outer corner of the label's evidence quadrant. Labels alternate from 0.
pub fn quadrant_dataset(n: usize, size: usize, seed: u64) -> Subset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = size / 2;
    let patch = (half / 2).max(1);
    let jitter = patch / 4;
    let samples = (0..n)
        .map(|i| {
            let label = i % 2;
            let mut values: Vec<f64> = (0..3 * size * size)
                .map(|_| rng.random_range(0.0..0.3))
                .collect();
            let q = evidence_quadrant(label);
            // distance from the image border along each axis
            let mut place = |far: bool| {
                let r = rng.random_range(0..=jitter);
                if far {
                    size - patch - r
                } else {
                    r
                }
            };
            let y0 = place(q >= 2);
            let x0 = place(q % 2 == 1);
            for c in 0..3 {
                let t = rng.random_range(0.8..1.0);
                for y in y0..y0 + patch {
                    for x in x0..x0 + patch {
                        values[(c * size + y) * size + x] = t;
                    }
                }
            }
            Sample {
                image: Tensor::new([3, size, size], values).expect("sized buffer"),
                label,
            }
        })
        .collect();
    Subset::new(Split::Train, samples)
}

/// Manifest with `counts[c]` records of class `c` and no split assigned.
/// Paths are `<class>/<i>.png`; no image files exist.
pub fn labelled_manifest(counts: &[usize; 7]) -> DatasetManifest {
    let records = LesionClass::ALL
        .iter()
        .zip(counts)
        .flat_map(|(&label, &n)| {
            (0..n).map(move |i| Record {
                path: format!("{label}/{i}.png"),
                label,
                source: GroundTruth::Histopathology,
                split: Split::Unassigned,
            })
        })
        .collect();
    DatasetManifest::new(records).expect("generated paths are unique")
}

/// Writes `per_class` PNG images for each of the seven classes under `dir`,
/// plus `manifest.csv`, and returns the manifest.
///
/// Class `c` has a bright patch whose position and tint depend on `c`, so a
/// model can learn something, but the set is meant for plumbing, not for
/// measuring accuracy.
pub fn write_demo_dataset(dir: impl AsRef<Path>, per_class: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patch = (size / 4).max(1);
    let mut records = Vec::new();
    for label in LesionClass::ALL {
        let c = label.index();
        let sub = dir.join(label.as_str());
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in 0..per_class {
            let mut values: Vec<f64> = (0..3 * size * size).map(|_| rng.random_range(0.0..0.3)).collect();
            let y0 = (c * (size - patch)) / 6;
            let x0 = ((6 - c) * (size - patch)) / 6;
            for ch in 0..3 {
                let t = if ch == c % 3 { 1.0 } else { 0.6 };
                for y in y0..y0 + patch {
                    for x in x0..x0 + patch {
                        values[(ch * size + y) * size + x] = t;
                    }
                }
            }
            let path = format!("{}/{i}.png", label.as_str());
            save_png(&Tensor::new([3, size, size], values)?, dir.join(&path))?;
            records.push(Record {
                path,
                label,
                source: GroundTruth::Histopathology,
                split: Split::Unassigned,
            });
        }
    }
    let manifest = DatasetManifest::new(records)?.with_root(dir);
    manifest.write(dir.join("manifest.csv"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patches_sit_in_their_quadrant() {
        let set = quadrant_dataset(6, 16, 1);
        for s in &set.samples {
            let v = s.image.values();
            let bright: Vec<usize> = (0..256).filter(|&p| v[p] >= 0.8).collect();
            assert_eq!(bright.len(), 16);
            for p in bright {
                let q = quadrant_of(16, (p / 16) as f64, (p % 16) as f64);
                assert_eq!(q, evidence_quadrant(s.label));
            }
        }
        assert_eq!(set, quadrant_dataset(6, 16, 1));
    }
}
