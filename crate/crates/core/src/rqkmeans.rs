//! Residual k-means quantizer: level 1 clusters the embeddings, each later
//! level clusters the residuals left by the previous one.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::{self, CoreRng};
use crate::sid::{CodebookSpec, SidSequence};

/// `L` centroid matrices of `K × d`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    spec: CodebookSpec,
    centroids: Vec<Vec<f64>>,
}

impl Codebook {
    /// Builds a codebook from explicit centroids (one `K·d` slab per level).
    pub fn from_centroids(spec: CodebookSpec, centroids: Vec<Vec<f64>>) -> Result<Self> {
        if centroids.len() != spec.levels {
            return Err(Error::Shape(alloc::format!("{} levels of centroids, expected {}", centroids.len(), spec.levels)));
        }
        for (l, c) in centroids.iter().enumerate() {
            if c.len() != spec.codes_per_level * spec.dim {
                return Err(Error::Shape(alloc::format!("level {l} holds {} values, expected K·d", c.len())));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(alloc::format!("centroid at level {l}")));
            }
        }
        Ok(Self { spec, centroids })
    }

    pub fn spec(&self) -> &CodebookSpec {
        &self.spec
    }

    /// Row `code` of level `level`.
    pub fn centroid(&self, level: usize, code: usize) -> &[f64] {
        let d = self.spec.dim;
        &self.centroids[level][code * d..(code + 1) * d]
    }

    pub fn level(&self, level: usize) -> &[f64] {
        &self.centroids[level]
    }

    fn check_dim(&self, embedding: &[f64]) -> Result<()> {
        if embedding.len() != self.spec.dim {
            return Err(Error::Shape(alloc::format!("embedding of dim {}, expected {}", embedding.len(), self.spec.dim)));
        }
        Ok(())
    }

    /// Greedy residual assignment; ties go to the smaller token id.
    pub fn tokenize(&self, embedding: &[f64]) -> Result<SidSequence> {
        self.tokenize_with_residual(embedding).map(|(sid, _)| sid)
    }

    /// Tokens plus the final residual.
    pub fn tokenize_with_residual(&self, embedding: &[f64]) -> Result<(SidSequence, Vec<f64>)> {
        self.check_dim(embedding)?;
        let mut residual = embedding.to_vec();
        let mut tokens = Vec::with_capacity(self.spec.levels);
        for level in 0..self.spec.levels {
            let code = nearest(&self.centroids[level], self.spec.dim, &residual).0;
            for (r, c) in residual.iter_mut().zip(self.centroid(level, code)) {
                *r -= c;
            }
            tokens.push(code as u16);
        }
        Ok((SidSequence::new(tokens), residual))
    }

    /// Sum of the selected centroids.
    pub fn reconstruct(&self, sid: &SidSequence) -> Result<Vec<f64>> {
        self.spec.validate(sid)?;
        let mut out = vec![0.0; self.spec.dim];
        for (level, &t) in sid.tokens().iter().enumerate() {
            for (o, c) in out.iter_mut().zip(self.centroid(level, t as usize)) {
                *o += c;
            }
        }
        Ok(out)
    }

    /// Mean squared residual norm after each level.
    pub fn level_mse(&self, embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
        let mut residuals = embeddings.to_vec();
        let mut out = Vec::with_capacity(self.spec.levels);
        for level in 0..self.spec.levels {
            let mut total = 0.0;
            for r in residuals.iter_mut() {
                self.check_dim(r)?;
                let code = nearest(&self.centroids[level], self.spec.dim, r).0;
                for (x, c) in r.iter_mut().zip(self.centroid(level, code)) {
                    *x -= c;
                }
                total += r.iter().map(|v| v * v).sum::<f64>();
            }
            out.push(total / embeddings.len().max(1) as f64);
        }
        Ok(out)
    }
}

/// Nearest centroid row (smallest id on ties) and its squared distance.
fn nearest(centroids: &[f64], dim: usize, x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.chunks_exact(dim).enumerate() {
        let d = math::sq_dist(c, x);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Result of one k-means level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelFit {
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub sse: f64,
}

/// k-means++ seeding: first centre uniform, later centres proportional to
/// squared distance to the closest chosen centre (uniform if all zero).
pub fn kmeans_pp_seed(points: &[Vec<f64>], k: usize, rng: &mut CoreRng) -> Vec<f64> {
    let dim = points[0].len();
    let n = points.len();
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first]);
    let mut dist: Vec<f64> = points.iter().map(|p| math::sq_dist(p, &points[first])).collect();
    for _ in 1..k {
        let pick = match rng::weighted_index(rng, &dist) {
            Some(i) => i,
            None => rng.gen_range(0..n),
        };
        centroids.extend_from_slice(&points[pick]);
        for (d, p) in dist.iter_mut().zip(points) {
            let nd = math::sq_dist(p, &points[pick]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Lloyd iterations from the given seeding. Stops early once assignments
/// are stable. Empty clusters are moved onto the point farthest from its
/// own centroid (each such point used once per iteration).
pub fn lloyd(points: &[Vec<f64>], mut centroids: Vec<f64>, k: usize, iters: usize) -> LevelFit {
    let dim = points[0].len();
    let mut assignment: Vec<usize> = Vec::new();
    for _ in 0..iters {
        let mut dists = Vec::with_capacity(points.len());
        let next: Vec<usize> = points
            .iter()
            .map(|p| {
                let (c, d) = nearest(&centroids, dim, p);
                dists.push(d);
                c
            })
            .collect();
        if next == assignment {
            break;
        }
        assignment = next;
        // Means are accumulated relative to each cluster's first member,
        // so a cluster of identical points reproduces that point exactly.
        let mut anchor: Vec<Option<usize>> = vec![None; k];
        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, (p, &c)) in points.iter().zip(&assignment).enumerate() {
            counts[c] += 1;
            let a = &points[*anchor[c].get_or_insert(i)];
            for ((s, v), o) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p).zip(a) {
                *s += v - o;
            }
        }
        for c in 0..k {
            if let Some(a) = anchor[c] {
                let n = counts[c] as f64;
                let a = &points[a];
                for ((dst, s), o) in centroids[c * dim..(c + 1) * dim].iter_mut().zip(&sums[c * dim..(c + 1) * dim]).zip(a) {
                    *dst = o + s / n;
                }
            } else {
                let mut far = 0;
                for (i, d) in dists.iter().enumerate() {
                    if *d > dists[far] {
                        far = i;
                    }
                }
                dists[far] = -1.0;
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&points[far]);
            }
        }
    }
    let mut sse = 0.0;
    assignment = points
        .iter()
        .map(|p| {
            let (c, d) = nearest(&centroids, dim, p);
            sse += d;
            c
        })
        .collect();
    LevelFit { centroids, assignment, sse }
}

/// Fits an `L`-level residual codebook. Level `l` uses its own RNG stream
/// derived from `seed`.
pub fn fit(embeddings: &[Vec<f64>], spec: CodebookSpec, iters: usize, seed: u64) -> Result<Codebook> {
    fit_with_stats(embeddings, spec, iters, seed).map(|(cb, _)| cb)
}

/// [`fit`] plus the within-cluster SSE of every level.
pub fn fit_with_stats(embeddings: &[Vec<f64>], spec: CodebookSpec, iters: usize, seed: u64) -> Result<(Codebook, Vec<f64>)> {
    if embeddings.is_empty() {
        return Err(Error::Invalid("k-means needs at least one embedding".into()));
    }
    if iters == 0 {
        return Err(Error::Invalid("k-means needs at least one iteration".into()));
    }
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != spec.dim {
            return Err(Error::Shape(alloc::format!("embedding {i} has dim {}, expected {}", e.len(), spec.dim)));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(alloc::format!("embedding {i}")));
        }
    }
    let mut residuals = embeddings.to_vec();
    let mut centroids = Vec::with_capacity(spec.levels);
    let mut sse = Vec::with_capacity(spec.levels);
    for level in 0..spec.levels {
        let mut r = rng::seeded(rng::split(seed, level as u64));
        let init = kmeans_pp_seed(&residuals, spec.codes_per_level, &mut r);
        let fitted = lloyd(&residuals, init, spec.codes_per_level, iters);
        for (p, &c) in residuals.iter_mut().zip(&fitted.assignment) {
            for (x, v) in p.iter_mut().zip(&fitted.centroids[c * spec.dim..(c + 1) * spec.dim]) {
                *x -= v;
            }
        }
        sse.push(fitted.sse);
        centroids.push(fitted.centroids);
    }
    Ok((Codebook { spec, centroids }, sse))
}

/// One-to-one warm-up SIDs for a catalogue.
#[derive(Debug, Clone, PartialEq)]
pub struct UniqueAssignment {
    pub sids: Vec<SidSequence>,
    /// Distinct greedy SIDs before collision resolution.
    pub distinct_greedy: usize,
    /// Items that had to move off their greedy SID.
    pub collisions: usize,
}

/// Assigns every embedding a distinct SID, processing items in order. An
/// item whose greedy SID is taken walks the residual tree depth-first,
/// trying next-nearest codes at the deepest level before backing up.
pub fn assign_unique(codebook: &Codebook, embeddings: &[Vec<f64>]) -> Result<UniqueAssignment> {
    let spec = *codebook.spec();
    if embeddings.len() > spec.capacity() {
        return Err(Error::Invalid(alloc::format!(
            "{} items exceed the {} available SIDs",
            embeddings.len(),
            spec.capacity()
        )));
    }
    let mut used = BTreeSet::new();
    let mut greedy = BTreeSet::new();
    let mut sids = Vec::with_capacity(embeddings.len());
    let mut collisions = 0;
    for e in embeddings {
        let g = codebook.tokenize(e)?;
        greedy.insert(g.clone());
        if used.insert(g.clone()) {
            sids.push(g);
            continue;
        }
        collisions += 1;
        let mut prefix = Vec::with_capacity(spec.levels);
        let sid = search_free(codebook, e, &mut prefix, &used)?
            .ok_or_else(|| Error::Invalid("no free SID left".into()))?;
        used.insert(sid.clone());
        sids.push(sid);
    }
    Ok(UniqueAssignment { sids, distinct_greedy: greedy.len(), collisions })
}

fn search_free(
    codebook: &Codebook,
    residual: &[f64],
    prefix: &mut Vec<u16>,
    used: &BTreeSet<SidSequence>,
) -> Result<Option<SidSequence>> {
    let spec = codebook.spec();
    let level = prefix.len();
    if level == spec.levels {
        let sid = SidSequence::new(prefix.clone());
        return Ok(if used.contains(&sid) { None } else { Some(sid) });
    }
    let mut ranked: Vec<(f64, usize)> = (0..spec.codes_per_level)
        .map(|k| (math::sq_dist(codebook.centroid(level, k), residual), k))
        .collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    for (_, k) in ranked {
        let next: Vec<f64> = residual.iter().zip(codebook.centroid(level, k)).map(|(r, c)| r - c).collect();
        prefix.push(k as u16);
        let found = search_free(codebook, &next, prefix, used)?;
        prefix.pop();
        if found.is_some() {
            return Ok(found);
        }
    }
    Ok(None)
}
