use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::taxonomy::{LesionClass, LesionGroup};

pub const DEFAULT_TEST_PER_GROUP: usize = 100;
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// Reassigns every record's split.
///
/// A uniform draw of `test_per_group` records from each of the three lesion
/// groups forms the test set. The rest is divided between validation and
/// training per class: the validation total is `round(val_fraction · rest)`
/// and is shared out across classes by largest remainder, so every class
/// lands within one record of its exact proportion.
pub fn assign_splits(
    manifest: &DatasetManifest,
    test_per_group: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val fraction {val_fraction} outside [0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = manifest.clone();
    let records = out.records_mut();
    let mut assigned = vec![Split::Train; records.len()];

    let mut remaining: Vec<Vec<usize>> = vec![Vec::new(); LesionClass::ALL.len()];
    for group in LesionGroup::ALL {
        let mut members: Vec<usize> = (0..records.len())
            .filter(|&i| records[i].label.group() == group)
            .collect();
        if members.len() < test_per_group {
            return Err(Error::Capacity(format!(
                "group {group} has {} images, {test_per_group} needed for the test set",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..test_per_group] {
            assigned[i] = Split::Test;
        }
        for &i in &members[test_per_group..] {
            remaining[records[i].label.index()].push(i);
        }
    }

    let rest: usize = remaining.iter().map(Vec::len).sum();
    let val_total = (val_fraction * rest as f64).round() as usize;
    let exact: Vec<f64> = remaining.iter().map(|m| val_fraction * m.len() as f64).collect();
    let mut quota: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..quota.len()).collect();
    // largest fractional part first; ties go to the lower class index
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let short = val_total.saturating_sub(quota.iter().sum());
    for &c in order.iter().take(short) {
        quota[c] += 1;
    }

    for (members, q) in remaining.iter_mut().zip(quota) {
        // sorted first so the draw depends only on the seed
        members.sort_unstable();
        members.shuffle(&mut rng);
        for &i in &members[..q] {
            assigned[i] = Split::Val;
        }
    }
    for (r, s) in records.iter_mut().zip(assigned) {
        r.split = s;
    }
    Ok(out)
}
