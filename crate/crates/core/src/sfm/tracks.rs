use nalgebra::Vector2;

use super::{incremental::ViewPair, Observation, Track};

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Chains verified pairwise matches into tracks by connected components.
/// Components that contain two keypoints of the same image are dropped.
pub fn build_tracks(keypoints: &[Vec<Vector2<f64>>], pairs: &[ViewPair]) -> Vec<Track> {
    let mut offsets = Vec::with_capacity(keypoints.len() + 1);
    offsets.push(0);
    for k in keypoints {
        offsets.push(offsets.last().unwrap() + k.len());
    }
    let total = *offsets.last().unwrap();
    let mut parent: Vec<usize> = (0..total).collect();
    for pair in pairs {
        let (a, b) = pair.images;
        for m in &pair.matches {
            let x = find(&mut parent, offsets[a] + m.query as usize);
            let y = find(&mut parent, offsets[b] + m.train as usize);
            if x != y {
                parent[x.max(y)] = x.min(y);
            }
        }
    }
    // Roots are the smallest node of each component, so ordering by root is deterministic.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); total];
    for node in 0..total {
        let r = find(&mut parent, node);
        members[r].push(node);
    }
    let image_of = |node: usize| offsets.partition_point(|&o| o <= node) - 1;
    let mut tracks = Vec::new();
    for nodes in members.into_iter().filter(|m| m.len() >= 2) {
        let obs: Vec<Observation> = nodes
            .iter()
            .map(|&n| {
                let image = image_of(n);
                let keypoint = n - offsets[image];
                Observation {
                    image,
                    keypoint,
                    pixel: keypoints[image][keypoint],
                }
            })
            .collect();
        if obs.windows(2).any(|w| w[0].image == w[1].image) {
            continue;
        }
        tracks.push(Track {
            observations: obs,
            point3d: None,
            color: None,
        });
    }
    tracks
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatch;
    use crate::geometry::RigidPose;

    fn pair(a: usize, b: usize, m: &[(u32, u32)]) -> ViewPair {
        ViewPair {
            images: (a, b),
            matches: m
                .iter()
                .map(|&(query, train)| FeatureMatch {
                    query,
                    train,
                    distance: 0.0,
                })
                .collect(),
            relative: RigidPose::identity(),
            median_angle: 0.0,
            rotation_only: false,
        }
    }

    #[test]
    fn chains_and_drops_conflicts() {
        let kps: Vec<Vec<Vector2<f64>>> = (0..3).map(|_| vec![Vector2::zeros(); 4]).collect();
        let pairs = [
            pair(0, 1, &[(0, 0), (1, 1), (2, 2)]),
            pair(1, 2, &[(0, 3), (1, 1)]),
            // Links keypoints 2 and 3 of image 0 through image 2: conflicting component.
            pair(0, 2, &[(2, 0), (3, 1)]),
        ];
        let tracks = build_tracks(&kps, &pairs);
        assert_eq!(tracks.len(), 2);
        let t0: Vec<(usize, usize)> = tracks[0].observations.iter().map(|o| (o.image, o.keypoint)).collect();
        assert_eq!(t0, vec![(0, 0), (1, 0), (2, 3)]);
        let t1: Vec<(usize, usize)> = tracks[1].observations.iter().map(|o| (o.image, o.keypoint)).collect();
        assert_eq!(t1, vec![(0, 2), (1, 2), (2, 0)]);
    }
}
