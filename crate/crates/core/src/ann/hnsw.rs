//! Hierarchical navigable small-world graph over a fixed set of points (the coarse
//! centroids). Used only for nearest-centroid assignment and list probing.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::l2_sq;

#[derive(Clone, Copy, Debug, PartialEq)]
struct Cand {
    dist: f32,
    id: u32,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hnsw {
    /// `links[node][level]` adjacency.
    pub(crate) links: Vec<Vec<Vec<u32>>>,
    pub(crate) entry: u32,
    pub(crate) max_level: usize,
    pub(crate) degree: usize,
}

impl Hnsw {
    /// Builds the graph over `points` (`n × dim`).
    pub fn build(points: &[f32], dim: usize, degree: usize, ef_construction: usize, seed: u64) -> Self {
        let n = points.len() / dim;
        let degree = degree.max(2);
        let mut graph = Hnsw {
            links: Vec::with_capacity(n),
            entry: 0,
            max_level: 0,
            degree,
        };
        if n == 0 {
            return graph;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mult = 1.0 / (degree as f64).ln();
        for id in 0..n as u32 {
            let r: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let level = ((-r.ln() * mult).floor() as usize).min(16);
            graph.insert(points, dim, id, level, ef_construction.max(degree));
        }
        graph.repair_base_connectivity(points, dim);
        graph
    }

    fn point(points: &[f32], dim: usize, id: u32) -> &[f32] {
        &points[id as usize * dim..(id as usize + 1) * dim]
    }

    fn max_links(&self, level: usize) -> usize {
        if level == 0 {
            2 * self.degree
        } else {
            self.degree
        }
    }

    fn insert(&mut self, points: &[f32], dim: usize, id: u32, level: usize, ef: usize) {
        self.links.push(vec![Vec::new(); level + 1]);
        if id == 0 {
            self.entry = 0;
            self.max_level = level;
            return;
        }
        let q = Self::point(points, dim, id).to_vec();
        let mut ep = Cand {
            dist: l2_sq(&q, Self::point(points, dim, self.entry)),
            id: self.entry,
        };
        for lvl in (level + 1..=self.max_level).rev() {
            ep = self.greedy(points, dim, &q, ep, lvl);
        }
        let mut eps = vec![ep];
        for lvl in (0..=level.min(self.max_level)).rev() {
            let found = self.search_layer(points, dim, &q, &eps, ef, lvl);
            let chosen: Vec<u32> = found.iter().take(self.degree).map(|c| c.id).collect();
            self.links[id as usize][lvl] = chosen.clone();
            for &nb in &chosen {
                self.links[nb as usize][lvl].push(id);
                if self.links[nb as usize][lvl].len() > self.max_links(lvl) {
                    self.prune(points, dim, nb, lvl);
                }
            }
            eps = found;
        }
        if level > self.max_level {
            self.max_level = level;
            self.entry = id;
        }
    }

    fn prune(&mut self, points: &[f32], dim: usize, node: u32, lvl: usize) {
        let p = Self::point(points, dim, node);
        let mut cands: Vec<Cand> = self.links[node as usize][lvl]
            .iter()
            .map(|&o| Cand {
                dist: l2_sq(p, Self::point(points, dim, o)),
                id: o,
            })
            .collect();
        cands.sort();
        cands.truncate(self.max_links(lvl));
        self.links[node as usize][lvl] = cands.into_iter().map(|c| c.id).collect();
    }

    fn greedy(&self, points: &[f32], dim: usize, q: &[f32], mut ep: Cand, lvl: usize) -> Cand {
        loop {
            let mut improved = false;
            for &nb in &self.links[ep.id as usize][lvl] {
                let c = Cand {
                    dist: l2_sq(q, Self::point(points, dim, nb)),
                    id: nb,
                };
                if c < ep {
                    ep = c;
                    improved = true;
                }
            }
            if !improved {
                return ep;
            }
        }
    }

    /// Beam search on one layer; returns up to `ef` results sorted ascending.
    fn search_layer(&self, points: &[f32], dim: usize, q: &[f32], eps: &[Cand], ef: usize, lvl: usize) -> Vec<Cand> {
        let mut visited = vec![false; self.links.len()];
        for c in eps {
            visited[c.id as usize] = true;
        }
        let mut frontier: BinaryHeap<std::cmp::Reverse<Cand>> = eps.iter().copied().map(std::cmp::Reverse).collect();
        let mut best: BinaryHeap<Cand> = eps.iter().copied().collect();
        while best.len() > ef {
            best.pop();
        }
        while let Some(std::cmp::Reverse(c)) = frontier.pop() {
            if best.len() >= ef {
                if let Some(worst) = best.peek() {
                    if c > *worst {
                        break;
                    }
                }
            }
            for &nb in &self.links[c.id as usize][lvl] {
                if std::mem::replace(&mut visited[nb as usize], true) {
                    continue;
                }
                let cand = Cand {
                    dist: l2_sq(q, Self::point(points, dim, nb)),
                    id: nb,
                };
                if best.len() < ef || best.peek().is_some_and(|w| cand < *w) {
                    frontier.push(std::cmp::Reverse(cand));
                    best.push(cand);
                    if best.len() > ef {
                        best.pop();
                    }
                }
            }
        }
        best.into_sorted_vec()
    }

    /// Links every base-layer node not reachable from the entry point to its
    /// nearest reachable node.
    fn repair_base_connectivity(&mut self, points: &[f32], dim: usize) {
        let n = self.links.len();
        loop {
            let mut seen = vec![false; n];
            let mut queue = VecDeque::from([self.entry]);
            seen[self.entry as usize] = true;
            while let Some(u) = queue.pop_front() {
                for &v in &self.links[u as usize][0] {
                    if !seen[v as usize] {
                        seen[v as usize] = true;
                        queue.push_back(v);
                    }
                }
            }
            let Some(orphan) = (0..n).find(|&i| !seen[i]) else {
                return;
            };
            let p = Self::point(points, dim, orphan as u32);
            let anchor = (0..n)
                .filter(|&i| seen[i])
                .min_by(|&a, &b| {
                    l2_sq(p, Self::point(points, dim, a as u32))
                        .total_cmp(&l2_sq(p, Self::point(points, dim, b as u32)))
                        .then(a.cmp(&b))
                })
                .expect("entry point is always reachable");
            self.links[orphan][0].push(anchor as u32);
            self.links[anchor][0].push(orphan as u32);
        }
    }

    pub fn is_base_connected(&self) -> bool {
        let n = self.links.len();
        if n == 0 {
            return true;
        }
        let mut seen = vec![false; n];
        let mut stack = vec![self.entry];
        seen[self.entry as usize] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &self.links[u as usize][0] {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    }

    /// Approximate `k` nearest points to `q`, as `(squared distance, id)` ascending.
    pub fn search(&self, points: &[f32], dim: usize, q: &[f32], k: usize, ef: usize) -> Vec<(f32, u32)> {
        if self.links.is_empty() || k == 0 {
            return Vec::new();
        }
        let mut ep = Cand {
            dist: l2_sq(q, Self::point(points, dim, self.entry)),
            id: self.entry,
        };
        for lvl in (1..=self.max_level).rev() {
            ep = self.greedy(points, dim, q, ep, lvl);
        }
        let mut found = self.search_layer(points, dim, q, &[ep], ef.max(k), 0);
        found.truncate(k);
        found.into_iter().map(|c| (c.dist, c.id)).collect()
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}
