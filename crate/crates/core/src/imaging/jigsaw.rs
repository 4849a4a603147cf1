use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{invalid, Result};

/// Cuts a centered `grid × grid` layout of `patch × patch` crops, row-major.
///
/// The cell side is `min(H, W) / grid`. Inside its cell each patch sits at
/// `(cell − patch − jitter) / 2 + U{0..=jitter}` along both axes.
pub fn extract_patch_grid<R: Rng + ?Sized>(
    img: &Image,
    grid: usize,
    patch: usize,
    jitter: usize,
    rng: &mut R,
) -> Result<Vec<Image>> {
    if grid == 0 || patch == 0 {
        return invalid("grid and patch must be positive");
    }
    let cell = img.height().min(img.width()) / grid;
    if patch > cell {
        return invalid(format!("patch {patch} does not fit cell {cell}"));
    }
    if jitter > cell - patch {
        return invalid(format!("jitter {jitter} exceeds cell slack {}", cell - patch));
    }
    let oy = (img.height() - grid * cell) / 2;
    let ox = (img.width() - grid * cell) / 2;
    let base = (cell - patch - jitter) / 2;
    let mut out = Vec::with_capacity(grid * grid);
    for r in 0..grid {
        for c in 0..grid {
            let dy = base + rng.random_range(0..=jitter);
            let dx = base + rng.random_range(0..=jitter);
            out.push(img.crop(oy + r * cell + dy, ox + c * cell + dx, patch, patch)?);
        }
    }
    Ok(out)
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return invalid(format!("{perm:?} is not a permutation of 0..{n}"));
    }
    Ok(())
}

/// Rearranges `grid × grid` cells so slot `i` receives the content of slot
/// `perm[i]`. Images whose sides are not multiples of `grid` are truncated to
/// the top-left `grid · cell` region.
pub fn jigsaw_shuffle(img: &Image, perm: &[usize], grid: usize) -> Result<Image> {
    if grid == 0 {
        return invalid("grid must be positive");
    }
    check_perm(perm, grid * grid)?;
    let (ch, cw) = (img.height() / grid, img.width() / grid);
    if ch == 0 || cw == 0 {
        return invalid("image smaller than the jigsaw grid");
    }
    let mut out = Image::filled(ch * grid, cw * grid, img.channels(), 0.0)?;
    for (slot, &src) in perm.iter().enumerate() {
        let piece = img.crop((src / grid) * ch, (src % grid) * cw, ch, cw)?;
        out.paste(&piece, (slot / grid) * ch, (slot % grid) * cw)?;
    }
    Ok(out)
}

pub fn hamming(a: &[usize], b: &[usize]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

/// Permutations used as jigsaw classes, identity first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PermutationTable {
    pub n: usize,
    pub perms: Vec<Vec<usize>>,
    pub min_pairwise_hamming: usize,
}

impl PermutationTable {
    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    /// Minimum Hamming distance over all pairs, by exhaustive scan.
    pub fn scan_min_hamming(&self) -> usize {
        let mut best = usize::MAX;
        for i in 0..self.perms.len() {
            for j in i + 1..self.perms.len() {
                best = best.min(hamming(&self.perms[i], &self.perms[j]));
            }
        }
        if best == usize::MAX {
            self.n
        } else {
            best
        }
    }
}

fn factorial(n: usize) -> Option<usize> {
    (1..=n).try_fold(1usize, |acc, k| acc.checked_mul(k))
}

/// All permutations of `0..n` in lexicographic order.
fn all_perms(n: usize) -> Vec<Vec<u8>> {
    let mut cur: Vec<u8> = (0..n as u8).collect();
    let mut out = vec![cur.clone()];
    loop {
        let Some(i) = (0..n.saturating_sub(1)).rev().find(|&i| cur[i] < cur[i + 1]) else {
            return out;
        };
        let j = (i + 1..n).rev().find(|&j| cur[j] > cur[i]).unwrap();
        cur.swap(i, j);
        cur[i + 1..].reverse();
        out.push(cur.clone());
    }
}

const MAX_ENUMERATED: usize = 1_000_000;

/// Greedy max-min Hamming selection of `count` permutations of `0..n`.
///
/// Starting from the identity, each step adds the candidate whose minimum
/// distance to the selection is largest, taking the lexicographically first
/// candidate on ties. Candidates are all `n!` permutations when that is at
/// most a million, else `count · 1000` seeded random permutations.
///
/// ```
/// use pretext::imaging::build_permutation_set;
/// let t = build_permutation_set(3, 2, 0).unwrap();
/// assert_eq!(t.perms, vec![vec![0, 1, 2], vec![1, 2, 0]]);
/// assert_eq!(t.min_pairwise_hamming, 3);
/// ```
pub fn build_permutation_set(n: usize, count: usize, seed: u64) -> Result<PermutationTable> {
    if n == 0 || n > 255 {
        return invalid("permutation size must be in 1..=255");
    }
    if count == 0 {
        return invalid("permutation count must be positive");
    }
    let total = factorial(n);
    if matches!(total, Some(t) if count > t) {
        return invalid(format!("cannot pick {count} distinct permutations of {n} items"));
    }
    let mut pool = match total {
        Some(t) if t <= MAX_ENUMERATED => all_perms(n),
        _ => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool: Vec<Vec<u8>> = (0..count.saturating_mul(1000))
                .map(|_| {
                    let mut p: Vec<u8> = (0..n as u8).collect();
                    p.shuffle(&mut rng);
                    p
                })
                .collect();
            pool.push((0..n as u8).collect());
            pool.sort();
            pool.dedup();
            pool
        }
    };
    let identity: Vec<u8> = (0..n as u8).collect();
    let start = pool.iter().position(|p| *p == identity).expect("identity is in the pool");
    let dist = |a: &[u8], b: &[u8]| a.iter().zip(b).filter(|(x, y)| x != y).count();
    let mut min_d: Vec<usize> = pool.iter().map(|p| dist(p, &identity)).collect();
    let mut chosen = vec![start];
    min_d[start] = 0;
    let mut table_min = usize::MAX;
    while chosen.len() < count {
        // First maximum keeps the lexicographic tie-break.
        let (best, &d) = min_d
            .iter()
            .enumerate()
            .fold((0, &0usize), |acc, (i, d)| if *d > *acc.1 { (i, d) } else { acc });
        if d == 0 {
            return invalid("candidate pool exhausted before reaching the requested count");
        }
        table_min = table_min.min(d);
        chosen.push(best);
        let picked = pool[best].clone();
        for (m, p) in min_d.iter_mut().zip(&pool) {
            *m = (*m).min(dist(p, &picked));
        }
    }
    let perms = chosen.iter().map(|&i| pool[i].iter().map(|&v| v as usize).collect()).collect();
    pool.clear();
    Ok(PermutationTable { n, perms, min_pairwise_hamming: if count == 1 { n } else { table_min } })
}
