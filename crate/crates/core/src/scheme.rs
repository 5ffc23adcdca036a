//! Monotone upwind numerical Hamiltonian for affine games.
//!
//! For fixed inputs the relative dynamics is a vector field `g`, and
//! `Σᵢ (gᵢ⁺ D⁺ᵢV + gᵢ⁻ D⁻ᵢV)` is a monotone discretization of `∇V·g`. The
//! scheme takes the min over tracker inputs of the max over planner and
//! disturbance inputs of that expression. Adversary inputs are split into
//! groups that touch disjoint state rows, and each group's max is taken
//! exactly over its box: the objective is piecewise linear in the inputs,
//! so it suffices to check box corners, where a row's velocity crosses zero
//! along an edge, and where two such crossings meet.

use crate::dynamics::{AffineTerms, InputBox, MAX_DIM};

const MAX_GROUP_ATOMS: usize = 2;

#[derive(Debug, Clone)]
struct Atom {
    dir: [f64; MAX_DIM],
    lo: f64,
    hi: f64,
}

#[derive(Debug, Clone)]
struct Group {
    rows: Vec<usize>,
    atoms: Vec<Atom>,
}

/// Rows coupled through adversary groups or tracker inputs. The tracker
/// min splits over blocks because no input reaches across them.
#[derive(Debug, Clone)]
struct Block {
    free_rows: Vec<usize>,
    groups: Vec<Group>,
    inputs: Vec<usize>,
    lattice: Vec<[f64; 2]>,
}

/// Per-node precomputation of the affine terms.
#[derive(Debug, Clone)]
pub(crate) struct NodeModel {
    dim: usize,
    /// Drift plus the centers of all adversary intervals.
    base: [f64; MAX_DIM],
    tracker: [[f64; MAX_DIM]; 2],
    blocks: Vec<Block>,
}

#[inline]
fn upwind(g: f64, dm: f64, dp: f64) -> f64 {
    if g > 0.0 {
        g * dp
    } else {
        g * dm
    }
}

fn find(p: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while p[r] != r {
        r = p[r];
    }
    p[x] = r;
    r
}

fn join(p: &mut [usize], support: &[usize]) {
    for w in support.windows(2) {
        let (x, y) = (find(p, w[0]), find(p, w[1]));
        p[x] = y;
    }
}

impl NodeModel {
    /// `per_axis` evenly spaced values per tracker input make up the
    /// lattice the tracker minimizes over.
    pub fn new(t: &AffineTerms, tracker: &InputBox, planner: &InputBox, per_axis: usize) -> Self {
        let dim = t.dim;
        let mut base = t.drift;
        // every adversary input as a centered interval along a direction
        let mut atoms: Vec<Atom> = Vec::new();
        for (k, &(lo, hi)) in planner.0.iter().enumerate() {
            let mid = 0.5 * (lo + hi);
            for i in 0..dim {
                base[i] += t.planner[k][i] * mid;
            }
            if hi > lo {
                atoms.push(Atom { dir: t.planner[k], lo: lo - mid, hi: hi - mid });
            }
        }
        for ch in &t.channels[..t.n_channels] {
            for i in 0..dim {
                base[i] += ch.dir[i] * ch.center;
            }
            if ch.radius > 0.0 {
                atoms.push(Atom { dir: ch.dir, lo: -ch.radius, hi: ch.radius });
            }
        }
        atoms.retain(|a| a.dir[..dim].iter().any(|d| *d != 0.0));

        // atoms acting on one row combine into a single interval
        let mut merged: Vec<Atom> = Vec::new();
        let mut single: Vec<Option<(f64, f64)>> = vec![None; dim];
        for a in atoms {
            let support: Vec<usize> = (0..dim).filter(|&i| a.dir[i] != 0.0).collect();
            if support.len() == 1 {
                let i = support[0];
                let (x, y) = (a.dir[i] * a.lo, a.dir[i] * a.hi);
                let (lo, hi) = (x.min(y), x.max(y));
                let e = single[i].get_or_insert((0.0, 0.0));
                e.0 += lo;
                e.1 += hi;
            } else {
                merged.push(a);
            }
        }
        for (i, s) in single.iter().enumerate() {
            if let Some((lo, hi)) = *s {
                let mut dir = [0.0; MAX_DIM];
                dir[i] = 1.0;
                merged.push(Atom { dir, lo, hi });
            }
        }

        // adversary groups: connected components of atoms over shared rows
        let mut parent: Vec<usize> = (0..dim).collect();
        let mut touched = vec![false; dim];
        for a in &merged {
            let support: Vec<usize> = (0..dim).filter(|&i| a.dir[i] != 0.0).collect();
            for &i in &support {
                touched[i] = true;
            }
            join(&mut parent, &support);
        }
        let mut groups: Vec<Group> = Vec::new();
        let mut group_root: Vec<usize> = Vec::new();
        for i in (0..dim).filter(|&i| touched[i]) {
            let r = find(&mut parent, i);
            match group_root.iter().position(|&g| g == r) {
                Some(gi) => groups[gi].rows.push(i),
                None => {
                    group_root.push(r);
                    groups.push(Group { rows: vec![i], atoms: Vec::new() });
                }
            }
        }
        for a in merged {
            let i = (0..dim).find(|&i| a.dir[i] != 0.0).expect("atom has support");
            let r = find(&mut parent, i);
            let gi = group_root.iter().position(|&g| g == r).expect("row has a group");
            groups[gi].atoms.push(a);
        }
        if groups.iter().any(|g| g.atoms.len() > MAX_GROUP_ATOMS) {
            log::debug!("adversary group with more than {MAX_GROUP_ATOMS} coupled inputs; its max uses box corners only");
        }

        // blocks: groups further joined by tracker inputs
        let n_tracker = tracker.dim();
        for k in 0..n_tracker {
            let support: Vec<usize> = (0..dim).filter(|&i| t.tracker[k][i] != 0.0).collect();
            join(&mut parent, &support);
        }
        let mut blocks: Vec<Block> = Vec::new();
        let mut block_root: Vec<usize> = Vec::new();
        let mut block_of = |p: &mut [usize], row: usize, blocks: &mut Vec<Block>| {
            let r = find(p, row);
            match block_root.iter().position(|&b| b == r) {
                Some(bi) => bi,
                None => {
                    block_root.push(r);
                    blocks.push(Block { free_rows: Vec::new(), groups: Vec::new(), inputs: Vec::new(), lattice: Vec::new() });
                    blocks.len() - 1
                }
            }
        };
        for i in (0..dim).filter(|&i| !touched[i]) {
            let bi = block_of(&mut parent, i, &mut blocks);
            blocks[bi].free_rows.push(i);
        }
        for grp in groups {
            let bi = block_of(&mut parent, grp.rows[0], &mut blocks);
            blocks[bi].groups.push(grp);
        }
        for k in 0..n_tracker {
            if let Some(i) = (0..dim).find(|&i| t.tracker[k][i] != 0.0) {
                let bi = block_of(&mut parent, i, &mut blocks);
                blocks[bi].inputs.push(k);
            }
        }
        for b in &mut blocks {
            let sub = InputBox(b.inputs.iter().map(|&k| tracker.0[k]).collect());
            b.lattice = sub
                .lattice(per_axis)
                .iter()
                .map(|u| {
                    let mut full = [0.0; 2];
                    for (&k, x) in b.inputs.iter().zip(u) {
                        full[k] = *x;
                    }
                    full
                })
                .collect();
        }
        let mut tr = [[0.0; MAX_DIM]; 2];
        tr[..n_tracker].copy_from_slice(&t.tracker[..n_tracker]);
        Self { dim, base, tracker: tr, blocks }
    }

    /// `min_{u_s ∈ lattice} max_{adversary} Σᵢ upwind(gᵢ)`.
    #[inline]
    pub fn hamiltonian(&self, dm: &[f64], dp: &[f64]) -> f64 {
        let mut total = 0.0;
        let mut g = [0.0; MAX_DIM];
        for b in &self.blocks {
            let mut best = f64::INFINITY;
            for us in &b.lattice {
                g[..self.dim].copy_from_slice(&self.base[..self.dim]);
                for &k in &b.inputs {
                    let u = us[k];
                    if u != 0.0 {
                        for i in 0..self.dim {
                            g[i] += self.tracker[k][i] * u;
                        }
                    }
                }
                let mut val = 0.0;
                for &i in &b.free_rows {
                    val += upwind(g[i], dm[i], dp[i]);
                }
                for grp in &b.groups {
                    val += group_max(grp, &g, dm, dp);
                }
                if val < best {
                    best = val;
                }
            }
            total += best;
        }
        total
    }
}

#[inline]
fn group_value(grp: &Group, g: &[f64; MAX_DIM], dm: &[f64], dp: &[f64], delta: &[f64]) -> f64 {
    let mut s = 0.0;
    for &i in &grp.rows {
        let mut gi = g[i];
        for (a, d) in grp.atoms.iter().zip(delta) {
            gi += a.dir[i] * d;
        }
        s += upwind(gi, dm[i], dp[i]);
    }
    s
}

fn group_max(grp: &Group, g: &[f64; MAX_DIM], dm: &[f64], dp: &[f64]) -> f64 {
    match grp.atoms.len() {
        1 => {
            let a = &grp.atoms[0];
            let mut best = group_value(grp, g, dm, dp, &[a.lo]).max(group_value(grp, g, dm, dp, &[a.hi]));
            for &i in &grp.rows {
                let c = a.dir[i];
                if c != 0.0 {
                    let d = -g[i] / c;
                    if d > a.lo && d < a.hi {
                        best = best.max(group_value(grp, g, dm, dp, &[d]));
                    }
                }
            }
            best
        }
        2 => {
            let (a, b) = (&grp.atoms[0], &grp.atoms[1]);
            let mut best = f64::NEG_INFINITY;
            for da in [a.lo, a.hi] {
                for db in [b.lo, b.hi] {
                    best = best.max(group_value(grp, g, dm, dp, &[da, db]));
                }
            }
            // kink lines a_i·δa + b_i·δb = −g_i
            for (n, &i) in grp.rows.iter().enumerate() {
                let (ca, cb) = (a.dir[i], b.dir[i]);
                if ca != 0.0 {
                    for db in [b.lo, b.hi] {
                        let da = (-g[i] - cb * db) / ca;
                        if da > a.lo && da < a.hi {
                            best = best.max(group_value(grp, g, dm, dp, &[da, db]));
                        }
                    }
                }
                if cb != 0.0 {
                    for da in [a.lo, a.hi] {
                        let db = (-g[i] - ca * da) / cb;
                        if db > b.lo && db < b.hi {
                            best = best.max(group_value(grp, g, dm, dp, &[da, db]));
                        }
                    }
                }
                for &j in &grp.rows[n + 1..] {
                    let (ea, eb) = (a.dir[j], b.dir[j]);
                    let det = ca * eb - cb * ea;
                    if det != 0.0 {
                        let da = (-g[i] * eb + cb * g[j]) / det;
                        let db = (-ca * g[j] + g[i] * ea) / det;
                        if da > a.lo && da < a.hi && db > b.lo && db < b.hi {
                            best = best.max(group_value(grp, g, dm, dp, &[da, db]));
                        }
                    }
                }
            }
            best
        }
        m => {
            let mut best = f64::NEG_INFINITY;
            let mut delta = vec![0.0; m];
            for mask in 0..(1usize << m) {
                for (k, a) in grp.atoms.iter().enumerate() {
                    delta[k] = if mask >> k & 1 == 1 { a.hi } else { a.lo };
                }
                best = best.max(group_value(grp, g, dm, dp, &delta));
            }
            best
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    /// Brute force over a fine adversary lattice and the tracker lattice.
    fn brute(t: &AffineTerms, tracker: &InputBox, planner: &InputBox, dm: &[f64], dp: &[f64]) -> f64 {
        let dim = t.dim;
        let adv_boxes: Vec<(f64, f64)> = planner
            .0
            .iter()
            .copied()
            .chain(t.channels[..t.n_channels].iter().map(|c| (c.center - c.radius, c.center + c.radius)))
            .collect();
        let adv = InputBox(adv_boxes).lattice(11);
        let mut best = f64::INFINITY;
        for us in tracker.lattice(2) {
            let mut worst = f64::NEG_INFINITY;
            for a in &adv {
                let (up, d) = a.split_at(planner.dim());
                let delta: Vec<f64> = d.iter().zip(&t.channels).map(|(x, c)| x - c.center).collect();
                let g = t.eval(&us, up, &delta);
                let v: f64 = (0..dim).map(|i| upwind(g[i], dm[i], dp[i])).sum();
                worst = worst.max(v);
            }
            best = best.min(worst);
        }
        best
    }

    #[test]
    fn exact_group_max_dominates_fine_lattice() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let tracker = InputBox(vec![(-1.0, 1.0), (-0.5, 0.5)]);
        let planner = InputBox(vec![(-0.2, 0.2), (-0.2, 0.2)]);
        for _ in 0..40 {
            let mut t = AffineTerms::zeros(4);
            for i in 0..4 {
                t.drift[i] = rng.gen_range(-0.3..0.3);
            }
            let psi: f64 = rng.gen_range(-3.0..3.0);
            t.tracker[0] = [psi.cos(), psi.sin(), 0.0, psi.sin(), 0.0, 0.0];
            t.tracker[1] = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
            t.planner[0] = [-1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
            t.planner[1] = [0.0, -1.0, 0.0, 0.0, 0.0, 0.0];
            t.n_channels = 3;
            let dirs = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 1.0], [0.0, 0.0, 1.0, 0.0]];
            for j in 0..3 {
                let c = &mut t.channels[j];
                c.dir[..4].copy_from_slice(&dirs[j]);
                c.center = rng.gen_range(-0.3..0.3);
                c.radius = rng.gen_range(0.0..0.3);
                c.envelope = (c.center - c.radius, c.center + c.radius);
            }
            let dm: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dp: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let model = NodeModel::new(&t, &tracker, &planner, 2);
            let exact = model.hamiltonian(&dm, &dp);
            let fine = brute(&t, &tracker, &planner, &dm, &dp);
            // the lattice can only miss part of the adversary's maximum
            assert!(exact >= fine - 1e-12, "{exact} < {fine}");
            assert!(exact - fine < 0.05, "{exact} vs {fine}");
        }
    }

    #[test]
    fn stagnation_point_has_no_drift() {
        // ṙ = −r + u_p at r = a with u_p ∈ [−a, a], slopes (0, 1)
        let a = 0.3;
        let mut t = AffineTerms::zeros(1);
        t.drift[0] = -a;
        t.planner[0][0] = 1.0;
        let m = NodeModel::new(&t, &InputBox(vec![]), &InputBox(vec![(-a, a)]), 2);
        assert_eq!(m.hamiltonian(&[0.0], &[1.0]), 0.0);
    }
}
