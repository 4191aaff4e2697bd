//! Per-scale prototype banks and prototype residuals.
//!
//! Prototypes are k-means centers of the normal training feature maps,
//! computed independently at every scale on the flattened `(c, h, w)` maps.
//! A query map is compared against its nearest prototype (L2 over the whole
//! map) and the residual is the element-wise distance to it.

use prn_tensor::Tensor;
use rand::seq::index::sample;

use crate::checkpoint::Checkpoint;
use crate::config::ResidualDistance;
use crate::encoder::{FeaturePyramid, NUM_SCALES};
use crate::error::{PrnError, Result};
use crate::rng::{self, Stream};

/// `max(1, round(ratio * n))`.
pub fn num_prototypes(ratio: f64, n: usize) -> usize {
    ((ratio * n as f64).round() as usize).max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Vec<f64>>,
    pub assignment: Vec<usize>,
    /// Lloyd iterations run until the assignment stopped changing.
    pub iterations: usize,
    /// Sum of squared distances after every assignment and every update step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the closest center, lowest index on ties.
pub fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn objective(points: &[Vec<f64>], centers: &[Vec<f64>], assignment: &[usize]) -> f64 {
    points.iter().zip(assignment).map(|(p, &a)| sq_dist(p, &centers[a])).sum()
}

/// Lloyd's algorithm from `k` distinct seeded samples. Empty clusters are
/// reseeded with the point farthest from its own center.
///
/// Panics if the objective ever increases beyond rounding noise.
pub fn kmeans(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut rng::Rng) -> KMeansFit {
    assert!(!points.is_empty() && (1..=points.len()).contains(&k));
    let dim = points[0].len();
    let mut centers: Vec<Vec<f64>> = sample(rng, points.len(), k).into_iter().map(|i| points[i].clone()).collect();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..max_iter {
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        let changed = next != assignment;
        assignment = next;
        trace.push(objective(points, &centers, &assignment));
        if !changed {
            break;
        }
        iterations += 1;

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let n = counts[c] as f64;
                centers[c] = sums[c].iter().map(|s| s / n).collect();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..points.len())
                    .max_by(|&i, &j| {
                        let di = sq_dist(&points[i], &centers[assignment[i]]);
                        let dj = sq_dist(&points[j], &centers[assignment[j]]);
                        di.total_cmp(&dj).then(j.cmp(&i))
                    })
                    .unwrap();
                centers[c] = points[far].clone();
            }
        }
        trace.push(objective(points, &centers, &assignment));
    }
    for w in trace.windows(2) {
        assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "k-means objective increased: {} -> {}", w[0], w[1]);
    }
    KMeansFit { centers, assignment, iterations, objective: trace }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// Scale `j` holds `(K, c_j, h_j, w_j)`.
    pub prototypes: [Tensor<f32>; NUM_SCALES],
    pub ratio: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub iterations: [usize; NUM_SCALES],
    pub distance: ResidualDistance,
}

/// Per-scale residual maps and the prototype index matched at each scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualPyramid {
    pub maps: [Tensor<f32>; NUM_SCALES],
    pub indices: [usize; NUM_SCALES],
}

fn flatten(map: &Tensor<f32>) -> Vec<f64> {
    map.data().iter().map(|&v| v as f64).collect()
}

pub fn fit_prototypes(
    normals: &[FeaturePyramid],
    ratio: f64,
    max_iter: usize,
    seed: u64,
    distance: ResidualDistance,
) -> Result<PrototypeBank> {
    if normals.is_empty() {
        return Err(PrnError::config("prototype fitting needs at least one normal sample"));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(PrnError::config(format!("prototype ratio {ratio} must lie in (0, 1]")));
    }
    let k = num_prototypes(ratio, normals.len());
    let mut iterations = [0; NUM_SCALES];
    let prototypes: Vec<Tensor<f32>> = (0..NUM_SCALES)
        .map(|j| {
            let shape = normals[0].maps[j].shape().to_vec();
            if let Some(bad) = normals.iter().find(|p| p.maps[j].shape() != shape.as_slice()) {
                return Err(PrnError::dim(format!(
                    "scale {j} of `{}` is {:?}, expected {:?}",
                    bad.source_id,
                    bad.maps[j].shape(),
                    shape
                )));
            }
            let points: Vec<Vec<f64>> = normals.iter().map(|p| flatten(&p.maps[j])).collect();
            let mut rng = rng::substream(seed, Stream::Prototypes, j as u64);
            let fit = kmeans(&points, k, max_iter, &mut rng);
            iterations[j] = fit.iterations;
            let data = fit.centers.iter().flatten().map(|&v| v as f32).collect();
            let mut full = vec![k];
            full.extend(&shape);
            Ok(Tensor::new(&full, data))
        })
        .collect::<Result<_>>()?;
    let prototypes: [Tensor<f32>; NUM_SCALES] = prototypes.try_into().unwrap();
    Ok(PrototypeBank { prototypes, ratio, max_iter, seed, iterations, distance })
}

impl PrototypeBank {
    pub fn num_prototypes(&self) -> usize {
        self.prototypes[0].shape()[0]
    }

    pub fn map_shape(&self, scale: usize) -> &[usize] {
        &self.prototypes[scale].shape()[1..]
    }

    pub fn prototype(&self, scale: usize, index: usize) -> Tensor<f32> {
        self.prototypes[scale].slice_outer(index)
    }

    fn check(&self, scale: usize, map: &[f32], shape: &[usize]) -> Result<()> {
        if scale >= NUM_SCALES {
            return Err(PrnError::dim(format!("scale {scale} out of range 0..{NUM_SCALES}")));
        }
        if shape != self.map_shape(scale) || map.len() != shape.iter().product::<usize>() {
            return Err(PrnError::dim(format!(
                "scale {scale} map is {shape:?}, bank expects {:?}",
                self.map_shape(scale)
            )));
        }
        Ok(())
    }

    fn nearest_slice(&self, scale: usize, map: &[f32]) -> (usize, f64) {
        let size = map.len();
        let mut best = (0, f64::INFINITY);
        for (k, proto) in self.prototypes[scale].data().chunks_exact(size).enumerate() {
            let d: f64 = map.iter().zip(proto).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best
    }

    /// Closest prototype under L2 over the flattened map, lowest index on ties.
    /// Returns the index and the squared distance.
    pub fn nearest_prototype(&self, map: &Tensor<f32>, scale: usize) -> Result<(usize, f64)> {
        self.check(scale, map.data(), map.shape())?;
        Ok(self.nearest_slice(scale, map.data()))
    }

    fn residual_into(&self, scale: usize, map: &[f32], out: &mut Vec<f32>) -> usize {
        let (k, _) = self.nearest_slice(scale, map);
        let proto = &self.prototypes[scale].data()[k * map.len()..(k + 1) * map.len()];
        match self.distance {
            ResidualDistance::Abs => out.extend(map.iter().zip(proto).map(|(a, b)| (a - b).abs())),
            ResidualDistance::Squared => out.extend(map.iter().zip(proto).map(|(a, b)| (a - b) * (a - b))),
        }
        k
    }

    pub fn residual(&self, pyramid: &FeaturePyramid) -> Result<ResidualPyramid> {
        let mut indices = [0; NUM_SCALES];
        let mut maps = Vec::with_capacity(NUM_SCALES);
        for (j, map) in pyramid.maps.iter().enumerate() {
            self.check(j, map.data(), map.shape())?;
            let mut out = Vec::with_capacity(map.len());
            indices[j] = self.residual_into(j, map.data(), &mut out);
            maps.push(Tensor::new(map.shape(), out));
        }
        Ok(ResidualPyramid { maps: maps.try_into().unwrap(), indices })
    }

    /// Residuals for batched maps `(n, c_j, h_j, w_j)`.
    pub fn residual_batch(&self, maps: &[Tensor<f32>; NUM_SCALES]) -> Result<[Tensor<f32>; NUM_SCALES]> {
        let out: Vec<Tensor<f32>> = maps
            .iter()
            .enumerate()
            .map(|(j, m)| {
                if m.ndim() != 4 {
                    return Err(PrnError::dim(format!("batched scale {j} map must be rank 4, got {:?}", m.shape())));
                }
                let size = m.len() / m.shape()[0].max(1);
                let mut out = Vec::with_capacity(m.len());
                for item in m.data().chunks_exact(size) {
                    self.check(j, item, &m.shape()[1..])?;
                    self.residual_into(j, item, &mut out);
                }
                Ok(Tensor::new(m.shape(), out))
            })
            .collect::<Result<_>>()?;
        Ok(out.try_into().unwrap())
    }

    pub fn store(&self, ckpt: &mut Checkpoint) {
        for (j, p) in self.prototypes.iter().enumerate() {
            ckpt.insert(format!("prototypes/scale{}", j + 1), p.clone());
        }
        ckpt.metadata.insert(
            "prototypes".into(),
            serde_json::json!({
                "ratio": self.ratio,
                "max_iter": self.max_iter,
                "seed": self.seed,
                "iterations": self.iterations,
                "distance": self.distance,
            }),
        );
    }

    pub fn load(ckpt: &Checkpoint) -> Result<Self> {
        let meta = ckpt
            .metadata
            .get("prototypes")
            .ok_or_else(|| PrnError::Integrity("prototype metadata missing".into()))?;
        #[derive(serde::Deserialize)]
        struct Meta {
            ratio: f64,
            max_iter: usize,
            seed: u64,
            iterations: [usize; NUM_SCALES],
            distance: ResidualDistance,
        }
        let m: Meta =
            serde_json::from_value(meta.clone()).map_err(|e| PrnError::Integrity(format!("prototype metadata: {e}")))?;
        let prototypes = [1, 2, 3].map(|j| ckpt.array(&format!("prototypes/scale{j}")).cloned());
        let [a, b, c] = prototypes;
        Ok(Self {
            prototypes: [a?, b?, c?],
            ratio: m.ratio,
            max_iter: m.max_iter,
            seed: m.seed,
            iterations: m.iterations,
            distance: m.distance,
        })
    }
}
