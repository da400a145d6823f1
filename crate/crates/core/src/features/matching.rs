use rayon::prelude::*;

use super::FeatureSet;

pub const DEFAULT_RATIO: f32 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureMatch {
    /// Keypoint index in the first image of the pair.
    pub query: u32,
    /// Keypoint index in the second image of the pair.
    pub train: u32,
    pub distance: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchSet {
    pub image_pair: (usize, usize),
    pub matches: Vec<FeatureMatch>,
}

impl MatchSet {
    /// The same correspondences seen from the other image.
    pub fn swapped(&self) -> MatchSet {
        let mut matches: Vec<FeatureMatch> = self
            .matches
            .iter()
            .map(|m| FeatureMatch {
                query: m.train,
                train: m.query,
                distance: m.distance,
            })
            .collect();
        matches.sort_by_key(|m| m.query);
        MatchSet {
            image_pair: (self.image_pair.1, self.image_pair.0),
            matches,
        }
    }
}

/// Lowe ratio test `d1 / d2 < ratio`; an absent second neighbour always passes.
pub fn passes_ratio(d1: f32, d2: f32, ratio: f32) -> bool {
    if d2.is_infinite() {
        return true;
    }
    d1 < ratio * d2
}

#[derive(Clone, Copy)]
struct Best {
    idx: u32,
    d1: f32,
    d2: f32,
}

impl Best {
    const EMPTY: Best = Best {
        idx: u32::MAX,
        d1: f32::INFINITY,
        d2: f32::INFINITY,
    };

    #[inline]
    fn offer(&mut self, idx: u32, d: f32) {
        if d < self.d1 {
            self.d2 = self.d1;
            self.d1 = d;
            self.idx = idx;
        } else if d < self.d2 {
            self.d2 = d;
        }
    }
}

/// Mutual-nearest-neighbour matches that pass the ratio test in both directions,
/// sorted by query index. `image_pair` is left as `(0, 1)`.
pub fn match_pair(a: &FeatureSet, b: &FeatureSet, ratio: f32) -> MatchSet {
    let mut row = vec![Best::EMPTY; a.len()];
    let mut col = vec![Best::EMPTY; b.len()];
    for (i, da) in a.descriptors.iter().enumerate() {
        for (j, db) in b.descriptors.iter().enumerate() {
            let d = da.distance(db);
            row[i].offer(j as u32, d);
            col[j].offer(i as u32, d);
        }
    }
    let matches = row
        .iter()
        .enumerate()
        .filter_map(|(i, r)| {
            if r.idx == u32::MAX {
                return None;
            }
            let c = &col[r.idx as usize];
            let mutual = c.idx == i as u32;
            (mutual && passes_ratio(r.d1, r.d2, ratio) && passes_ratio(c.d1, c.d2, ratio)).then_some(FeatureMatch {
                query: i as u32,
                train: r.idx,
                distance: r.d1,
            })
        })
        .collect();
    MatchSet {
        image_pair: (0, 1),
        matches,
    }
}

/// Matches every unordered pair `(i, j)`, `i < j`, in lexicographic order.
pub fn match_exhaustive(features: &[FeatureSet], ratio: f32) -> Vec<MatchSet> {
    let pairs: Vec<(usize, usize)> = (0..features.len())
        .flat_map(|i| (i + 1..features.len()).map(move |j| (i, j)))
        .collect();
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let mut set = match_pair(&features[i], &features[j], ratio);
            set.image_pair = (i, j);
            set
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::{Descriptor, Keypoint, DESCRIPTOR_LEN};
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn random_set(n: usize, seed: u64) -> FeatureSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let descriptors = (0..n)
            .map(|_| {
                let mut v = [0.0f32; DESCRIPTOR_LEN];
                v.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
                Descriptor::normalized(v, 1.0)
            })
            .collect();
        let keypoints = (0..n)
            .map(|i| Keypoint {
                x: i as f32,
                y: 0.0,
                scale: 1.0,
                orientation: 0.0,
                response: 1.0,
            })
            .collect();
        FeatureSet { keypoints, descriptors }
    }

    #[test]
    fn identical_sets_match_their_twins() {
        let a = random_set(50, 1);
        let set = match_pair(&a, &a, DEFAULT_RATIO);
        assert_eq!(set.matches.len(), 50);
        for m in &set.matches {
            assert_eq!(m.query, m.train);
            assert_eq!(m.distance, 0.0);
        }
    }

    #[test]
    fn ratio_test_arithmetic() {
        assert!(passes_ratio(0.4, 0.9, 0.8));
        assert!(!passes_ratio(0.8, 0.9, 0.8));
        assert!(passes_ratio(0.5, f32::INFINITY, 0.8));
    }

    #[test]
    fn exhaustive_covers_all_pairs() {
        let sets: Vec<FeatureSet> = (0..5).map(|s| random_set(10, s)).collect();
        let out = match_exhaustive(&sets, DEFAULT_RATIO);
        assert_eq!(out.len(), 10);
        let pairs: Vec<_> = out.iter().map(|m| m.image_pair).collect();
        assert_eq!(pairs[0], (0, 1));
        assert_eq!(pairs[9], (3, 4));
    }

    fn noisy_copy(a: &FeatureSet, seed: u64, keep: usize) -> FeatureSet {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut out = random_set(keep / 2, seed + 100);
        for d in a.descriptors.iter().take(keep) {
            let mut v = d.values;
            v.iter_mut().for_each(|x| *x += rng.gen_range(-0.02..0.02f32).abs());
            out.descriptors.push(Descriptor::normalized(v, 1.0));
            out.keypoints.push(out.keypoints[0]);
        }
        out
    }

    proptest! {
        #[test]
        fn matching_is_symmetric_and_valid(seed in 0u64..1000) {
            let a = random_set(40, seed);
            let b = noisy_copy(&a, seed + 1, 30);
            let ab = match_pair(&a, &b, DEFAULT_RATIO);
            let ba = match_pair(&b, &a, DEFAULT_RATIO);
            let mut ab_swapped = ab.swapped();
            ab_swapped.image_pair = ba.image_pair;
            prop_assert_eq!(&ab_swapped, &ba);
            let mut seen_q = std::collections::BTreeSet::new();
            let mut seen_t = std::collections::BTreeSet::new();
            for m in &ab.matches {
                prop_assert!(seen_q.insert(m.query) && seen_t.insert(m.train));
                // Post-hoc check of both acceptance rules.
                let da = &a.descriptors[m.query as usize];
                let mut ds: Vec<f32> = b.descriptors.iter().map(|d| da.distance(d)).collect();
                ds.sort_by(f32::total_cmp);
                prop_assert_eq!(ds[0], m.distance);
                prop_assert!(passes_ratio(ds[0], ds[1], DEFAULT_RATIO));
                let best_back = a.descriptors.iter().enumerate()
                    .min_by(|x, y| x.1.distance(&b.descriptors[m.train as usize]).total_cmp(&y.1.distance(&b.descriptors[m.train as usize])))
                    .unwrap().0;
                prop_assert_eq!(best_back as u32, m.query);
            }
            prop_assert_eq!(match_pair(&a, &b, DEFAULT_RATIO), ab);
        }
    }
}
