//! 3D SLIC super-pixels.
//!
//! Clusters live in a joint (intensity, position) feature space. The squared
//! distance between a voxel and a cluster centre is
//! `d_I² + (m / S)² · d_xyz²` where `S = (N / n_seg)^(1/3)` is the grid step and
//! `m` the compactness. Assignment searches a window of `2S` per axis around
//! each centre. A final pass makes every label 6-connected.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Volume, VolumeRole};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlicParams {
    pub n_seg: usize,
    pub compactness: f64,
    pub max_iter: usize,
    /// Stop once fewer than this fraction of voxels change label in an iteration.
    pub convergence_fraction: f64,
}

impl SlicParams {
    pub fn new(n_seg: usize) -> Self {
        Self {
            n_seg,
            ..Self::default()
        }
    }
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_seg: 200,
            compactness: 0.1,
            max_iter: 10,
            convergence_fraction: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperpixelSegmentation {
    /// Label map with values `0..n_actual`.
    pub labels: Volume,
    pub n_requested: usize,
    pub n_actual: usize,
    pub compactness: f64,
    pub iterations_run: usize,
    /// Clustering energy (sum of squared feature distances) at initialisation and
    /// after every iteration, before the connectivity pass.
    pub energy_history: Vec<f64>,
}

impl SuperpixelSegmentation {
    pub fn label(&self, index: usize) -> usize {
        self.labels.data()[index] as usize
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_actual];
        for &l in self.labels.data() {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

#[derive(Debug, Clone, Copy)]
struct Centre {
    intensity: f64,
    pos: [f64; 3],
}

struct Features<'a> {
    data: &'a [f32],
    dims: [usize; 3],
    spatial_weight: f64,
}

impl Features<'_> {
    #[inline]
    fn dist2(&self, index: usize, x: usize, y: usize, z: usize, c: &Centre) -> f64 {
        let di = self.data[index] as f64 - c.intensity;
        let dx = x as f64 - c.pos[0];
        let dy = y as f64 - c.pos[1];
        let dz = z as f64 - c.pos[2];
        di * di + self.spatial_weight * (dx * dx + dy * dy + dz * dz)
    }

    fn coords(&self, index: usize) -> (usize, usize, usize) {
        let x = index % self.dims[0];
        let r = index / self.dims[0];
        (x, r % self.dims[1], r / self.dims[1])
    }
}

/// Grid cell counts per axis with product at most `n_seg`.
fn grid_counts(dims: [usize; 3], step: f64, n_seg: usize) -> [usize; 3] {
    let mut g = [0usize; 3];
    for a in 0..3 {
        g[a] = ((dims[a] as f64 / step).round() as usize).clamp(1, dims[a]);
    }
    while g.iter().product::<usize>() > n_seg {
        let a = (0..3)
            .filter(|&a| g[a] > 1)
            .max_by_key(|&a| (g[a], std::cmp::Reverse(a)))
            .expect("product > n_seg >= 1");
        g[a] -= 1;
    }
    g
}

fn gradient_magnitude(v: &Volume, x: usize, y: usize, z: usize) -> f64 {
    let d = v.dims();
    let diff = |a: usize, lo: [usize; 3], hi: [usize; 3]| -> f64 {
        let _ = a;
        v.get(hi[0], hi[1], hi[2]) as f64 - v.get(lo[0], lo[1], lo[2]) as f64
    };
    let gx = diff(0, [x.saturating_sub(1), y, z], [(x + 1).min(d[0] - 1), y, z]);
    let gy = diff(1, [x, y.saturating_sub(1), z], [x, (y + 1).min(d[1] - 1), z]);
    let gz = diff(2, [x, y, z.saturating_sub(1)], [x, y, (z + 1).min(d[2] - 1)]);
    gx * gx + gy * gy + gz * gz
}

/// Runs SLIC on an intensity volume with values in `[0, 1]`.
pub fn slic3d(v: &Volume, params: &SlicParams) -> Result<SuperpixelSegmentation> {
    let dims = v.dims();
    let n = v.len();
    if params.n_seg == 0 {
        return Err(Error::invalid("n_seg", "must be >= 1"));
    }
    if params.n_seg > n {
        return Err(Error::TooManySegments {
            requested: params.n_seg,
            voxels: n,
        });
    }
    if !(params.compactness > 0.0) {
        return Err(Error::invalid("compactness", "must be > 0"));
    }
    let step = (n as f64 / params.n_seg as f64).cbrt();
    let feats = Features {
        data: v.data(),
        dims,
        spatial_weight: (params.compactness / step).powi(2),
    };

    // Seed on a regular grid, nudged to the lowest-gradient voxel nearby.
    let g = grid_counts(dims, step, params.n_seg);
    let mut centres = Vec::with_capacity(g.iter().product());
    for gz in 0..g[2] {
        for gy in 0..g[1] {
            for gx in 0..g[0] {
                let cell = [gx, gy, gz];
                let mut pos = [0.0; 3];
                for a in 0..3 {
                    pos[a] = (cell[a] as f64 + 0.5) * dims[a] as f64 / g[a] as f64 - 0.5;
                }
                let r = [0, 1, 2].map(|a| (pos[a].round().max(0.0) as usize).min(dims[a] - 1));
                let mut best = (gradient_magnitude(v, r[0], r[1], r[2]), r);
                let mut moved = false;
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let q = [r[0] as i64 + dx, r[1] as i64 + dy, r[2] as i64 + dz];
                            if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                                continue;
                            }
                            let q = q.map(|c| c as usize);
                            let gm = gradient_magnitude(v, q[0], q[1], q[2]);
                            if gm < best.0 {
                                best = (gm, q);
                                moved = true;
                            }
                        }
                    }
                }
                if moved {
                    pos = best.1.map(|c| c as f64);
                }
                let r = if moved { best.1 } else { r };
                centres.push(Centre {
                    intensity: v.get(r[0], r[1], r[2]) as f64,
                    pos,
                });
            }
        }
    }
    let k = centres.len();

    // Initial labels: the grid cell each voxel falls in.
    let mut labels = vec![0u32; n];
    for (i, l) in labels.iter_mut().enumerate() {
        let (x, y, z) = feats.coords(i);
        let c = [x * g[0] / dims[0], y * g[1] / dims[1], z * g[2] / dims[2]];
        *l = (c[0] + g[0] * (c[1] + g[1] * c[2])) as u32;
    }

    let energy = |labels: &[u32], centres: &[Centre]| -> f64 {
        (0..n)
            .map(|i| {
                let (x, y, z) = feats.coords(i);
                feats.dist2(i, x, y, z, &centres[labels[i] as usize])
            })
            .sum()
    };
    let mut energy_history = vec![energy(&labels, &centres)];
    let mut dist = vec![0.0f64; n];
    let mut iterations_run = 0;

    for _ in 0..params.max_iter {
        iterations_run += 1;
        for (i, d) in dist.iter_mut().enumerate() {
            let (x, y, z) = feats.coords(i);
            *d = feats.dist2(i, x, y, z, &centres[labels[i] as usize]);
        }
        let mut changed = 0usize;
        for (ci, c) in centres.iter().enumerate() {
            let lo = [0, 1, 2].map(|a| (c.pos[a] - step).ceil().max(0.0) as usize);
            let hi = [0, 1, 2].map(|a| ((c.pos[a] + step).floor().max(0.0) as usize).min(dims[a] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    let row = dims[0] * (y + dims[1] * z);
                    for x in lo[0]..=hi[0] {
                        let i = row + x;
                        let d = feats.dist2(i, x, y, z, c);
                        let cur = labels[i] as usize;
                        if d < dist[i] || (d == dist[i] && ci < cur) {
                            if cur != ci {
                                changed += 1;
                            }
                            dist[i] = d;
                            labels[i] = ci as u32;
                        }
                    }
                }
            }
        }

        let mut sums = vec![[0.0f64; 5]; k];
        for (i, &l) in labels.iter().enumerate() {
            let (x, y, z) = feats.coords(i);
            let s = &mut sums[l as usize];
            s[0] += feats.data[i] as f64;
            s[1] += x as f64;
            s[2] += y as f64;
            s[3] += z as f64;
            s[4] += 1.0;
        }
        for (c, s) in centres.iter_mut().zip(&sums) {
            if s[4] > 0.0 {
                c.intensity = s[0] / s[4];
                c.pos = [s[1] / s[4], s[2] / s[4], s[3] / s[4]];
            }
        }
        energy_history.push(energy(&labels, &centres));
        if (changed as f64) < params.convergence_fraction * n as f64 {
            break;
        }
    }

    let labels = enforce_connectivity(&labels, dims, k);
    let n_actual = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let labels = Volume::new(
        dims,
        v.spacing(),
        VolumeRole::LabelMap,
        labels.into_iter().map(|l| l as f32).collect(),
    )?;
    Ok(SuperpixelSegmentation {
        labels,
        n_requested: params.n_seg,
        n_actual,
        compactness: params.compactness,
        iterations_run,
        energy_history,
    })
}

const NEIGHBOURS_6: [[i64; 3]; 6] = [[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];

fn neighbours6(i: usize, dims: [usize; 3]) -> impl Iterator<Item = usize> {
    let x = (i % dims[0]) as i64;
    let r = i / dims[0];
    let y = (r % dims[1]) as i64;
    let z = (r / dims[1]) as i64;
    NEIGHBOURS_6.iter().filter_map(move |d| {
        let (nx, ny, nz) = (x + d[0], y + d[1], z + d[2]);
        if nx < 0 || ny < 0 || nz < 0 || nx >= dims[0] as i64 || ny >= dims[1] as i64 || nz >= dims[2] as i64 {
            None
        } else {
            Some(nx as usize + dims[0] * (ny as usize + dims[1] * nz as usize))
        }
    })
}

/// Keeps the largest 6-connected piece of every label and merges each other
/// piece into the adjacent label with the most voxels. Output labels are
/// renumbered `0..n` in scanline order of first appearance.
fn enforce_connectivity(labels: &[u32], dims: [usize; 3], k: usize) -> Vec<u32> {
    let n = labels.len();
    // Connected components of the label field.
    let mut comp = vec![u32::MAX; n];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != u32::MAX {
            continue;
        }
        let id = comp_label.len() as u32;
        let l = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours6(i, dims) {
                if comp[j] == u32::MAX && labels[j] == l {
                    comp[j] = id;
                    queue.push_back(j);
                }
            }
        }
        comp_label.push(l);
        comp_size.push(size);
    }

    // The keeper of each label is its largest component (first found on ties).
    let mut keeper = vec![usize::MAX; k];
    for (c, (&l, &s)) in comp_label.iter().zip(&comp_size).enumerate() {
        let kp = &mut keeper[l as usize];
        if *kp == usize::MAX || s > comp_size[*kp] {
            *kp = c;
        }
    }
    let n_comp = comp_label.len();
    // owner[c] = final label of component c, None for unresolved orphans.
    let mut owner: Vec<Option<u32>> = (0..n_comp)
        .map(|c| (keeper[comp_label[c] as usize] == c).then_some(comp_label[c]))
        .collect();
    let mut label_size = vec![0usize; k];
    for c in 0..n_comp {
        if let Some(l) = owner[c] {
            label_size[l as usize] += comp_size[c];
        }
    }

    // Component adjacency.
    let mut adjacent: Vec<Vec<u32>> = vec![Vec::new(); n_comp];
    for i in 0..n {
        for j in neighbours6(i, dims) {
            if comp[j] != comp[i] {
                adjacent[comp[i] as usize].push(comp[j]);
            }
        }
    }
    for a in adjacent.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }

    loop {
        let mut progress = false;
        let mut pending = false;
        for c in 0..n_comp {
            if owner[c].is_some() {
                continue;
            }
            let best = adjacent[c]
                .iter()
                .filter_map(|&nc| owner[nc as usize])
                .max_by_key(|&l| (label_size[l as usize], std::cmp::Reverse(l)));
            match best {
                Some(l) => {
                    owner[c] = Some(l);
                    label_size[l as usize] += comp_size[c];
                    progress = true;
                }
                None => pending = true,
            }
        }
        if !pending {
            break;
        }
        if !progress {
            // Unreachable for a connected grid: some orphan always touches a resolved component.
            for c in 0..n_comp {
                if owner[c].is_none() {
                    owner[c] = Some(comp_label[c]);
                }
            }
            break;
        }
    }

    let mut remap = vec![u32::MAX; k];
    let mut next = 0u32;
    let mut out = Vec::with_capacity(n);
    for &c in &comp {
        let l = owner[c as usize].expect("all components resolved") as usize;
        if remap[l] == u32::MAX {
            remap[l] = next;
            next += 1;
        }
        out.push(remap[l]);
    }
    out
}

/// Indicator volume of every super-pixel.
pub fn binary_maps(seg: &SuperpixelSegmentation) -> Vec<Volume> {
    let mut maps: Vec<Vec<f32>> = vec![vec![0.0; seg.labels.len()]; seg.n_actual];
    for (i, &l) in seg.labels.data().iter().enumerate() {
        maps[l as usize][i] = 1.0;
    }
    maps.into_iter()
        .map(|m| seg.labels.with_data(VolumeRole::BinaryMask, m).expect("binary data"))
        .collect()
}
