use rand::seq::index;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use super::PreferencePair;
use crate::error::{Error, Result};
use crate::rng;

/// `|len_w - len_l|`.
pub fn length_difference(pair: &PreferencePair) -> usize {
    pair.len_w.abs_diff(pair.len_l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BucketSpec {
    /// Bucket width in tokens of length difference.
    pub width: usize,
}

impl Default for BucketSpec {
    fn default() -> Self {
        BucketSpec { width: 8 }
    }
}

impl BucketSpec {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidConfig("bucket width must be at least 1".into()));
        }
        Ok(BucketSpec { width })
    }

    pub fn index(&self, d: usize) -> usize {
        d / self.width
    }
}

/// Pairs grouped by `floor(d / width)`; pairs with `d = 0` sit in the
/// neutral set. Each group keeps input order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Buckets {
    pub buckets: BTreeMap<usize, Vec<PreferencePair>>,
    pub neutral: Vec<PreferencePair>,
}

pub fn assign_buckets(pairs: &[PreferencePair], spec: BucketSpec) -> Result<Buckets> {
    BucketSpec::new(spec.width)?;
    let mut out = Buckets::default();
    for p in pairs {
        let d = length_difference(p);
        if d == 0 {
            out.neutral.push(p.clone());
        } else {
            out.buckets.entry(spec.index(d)).or_default().push(p.clone());
        }
    }
    Ok(out)
}

/// `(long_wins, short_wins)`: pairs whose preferred response is longer,
/// and pairs whose preferred response is shorter.
pub fn long_win_counts(pairs: &[PreferencePair]) -> (usize, usize) {
    let long = pairs.iter().filter(|p| p.len_w > p.len_l).count();
    let short = pairs.iter().filter(|p| p.len_w < p.len_l).count();
    (long, short)
}

/// Downsamples the majority side of every bucket to the minority count.
///
/// Output: neutral pairs first, then buckets by ascending index, each in
/// input order. Which majority pairs survive depends only on the bucket's
/// content (pairs are ranked canonically before sampling) and the seed.
pub fn balance_buckets(buckets: &Buckets, seed: u64) -> Vec<PreferencePair> {
    let mut out = buckets.neutral.clone();
    for (&b, pairs) in &buckets.buckets {
        let longs: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].len_w > pairs[i].len_l).collect();
        let shorts: Vec<usize> = (0..pairs.len()).filter(|&i| pairs[i].len_w < pairs[i].len_l).collect();
        let keep_n = longs.len().min(shorts.len());
        let mut keep = vec![false; pairs.len()];
        for side in [&longs, &shorts] {
            if side.len() == keep_n {
                side.iter().for_each(|&i| keep[i] = true);
                continue;
            }
            let mut canon = side.clone();
            canon.sort_by(|&x, &y| pairs[x].cmp(&pairs[y]));
            let mut r = rng::child(seed, rng::stream::BALANCE, b as u64);
            for j in index::sample(&mut r, canon.len(), keep_n) {
                keep[canon[j]] = true;
            }
        }
        out.extend(pairs.iter().zip(&keep).filter(|(_, &k)| k).map(|(p, _)| p.clone()));
    }
    out
}
