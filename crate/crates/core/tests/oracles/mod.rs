//! Reference implementations shared by the property tests and the
//! acceptance harness.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use nailtrace::postprocess::Connectivity;

/// Kept set and threshold from a full stable sort: descending loss, ties by
/// ascending index.
pub fn lmp_oracle(losses: &[f64], fraction: f64) -> (BTreeSet<usize>, f64) {
    let k = ((fraction * losses.len() as f64).floor() as usize).max(1);
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[b].total_cmp(&losses[a]).then(a.cmp(&b)));
    let kept: BTreeSet<usize> = order[..k].iter().copied().collect();
    (kept, losses[order[k - 1]])
}

/// Breadth-first flood fill; labels in raster order of each component's
/// first pixel.
pub fn flood_fill(mask: &[bool], w: usize, h: usize, conn: Connectivity) -> Vec<u32> {
    let mut labels = vec![0u32; mask.len()];
    let mut next = 0;
    let offsets: &[(i64, i64)] = match conn {
        Connectivity::Four => &[(1, 0), (-1, 0), (0, 1), (0, -1)],
        Connectivity::Eight => &[(1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)],
    };
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        let mut queue = std::collections::VecDeque::from([start]);
        while let Some(p) = queue.pop_front() {
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for &(dx, dy) in offsets {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                    continue;
                }
                let q = ny as usize * w + nx as usize;
                if mask[q] && labels[q] == 0 {
                    labels[q] = next;
                    queue.push_back(q);
                }
            }
        }
    }
    labels
}

/// True when both labelings induce the same partition of the pixels.
pub fn same_partition(a: &[u32], b: &[u32]) -> bool {
    let mut fwd = HashMap::new();
    let mut back = HashMap::new();
    a.iter().zip(b).all(|(&x, &y)| {
        if (x == 0) != (y == 0) {
            return false;
        }
        *fwd.entry(x).or_insert(y) == y && *back.entry(y).or_insert(x) == x
    })
}

/// Small deterministic generator so masks do not depend on test ordering.
pub struct Lcg(pub u64);

impl Lcg {
    pub fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

/// Random mask: noise at a random density, sometimes smoothed into blobs.
pub fn random_mask(rng: &mut Lcg, w: usize, h: usize) -> Vec<bool> {
    let density = rng.below(100) as u64;
    let mut m: Vec<bool> = (0..w * h).map(|_| rng.below(100) < density).collect();
    if rng.below(2) == 0 {
        let src = m.clone();
        for y in 0..h {
            for x in 0..w {
                let mut c = 0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx >= 0 && ny >= 0 && nx < w as i64 && ny < h as i64 && src[ny as usize * w + nx as usize] {
                            c += 1;
                        }
                    }
                }
                m[y * w + x] = c >= 5;
            }
        }
    }
    m
}

/// Losses drawn from a handful of values, so ties are common.
pub fn random_losses(rng: &mut Lcg, n: usize) -> Vec<f64> {
    let levels = 1 + rng.below(6);
    let ties = rng.below(2) == 0;
    (0..n)
        .map(|_| {
            if ties {
                rng.below(levels) as f64 * 0.25
            } else {
                rng.next() as f64 / (1u64 << 31) as f64
            }
        })
        .collect()
}
