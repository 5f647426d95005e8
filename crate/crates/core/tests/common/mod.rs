//! Independent oracles shared by the integration and acceptance suites.
//! Nothing here calls into the split search or rule pipeline it checks.

#![allow(dead_code)]

use crf_core::causal_tree::{gains_tied, CausalTree, Node, SplitAtom, TreeParams};
use crf_core::data::{Column, Dataset, FeatureSpec, Frame, Schema, Value};
use crf_core::rules::{Atom, Conjunction, Constraint, Expr, FeatureKey};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

struct Side {
    y1: Vec<f64>,
    y0: Vec<f64>,
}

impl Side {
    fn of(ds: &Dataset, rows: &[usize]) -> Side {
        let y1 = rows.iter().filter(|&&i| ds.w[i] == 1).map(|&i| ds.y[i]).collect();
        let y0 = rows.iter().filter(|&&i| ds.w[i] == 0).map(|&i| ds.y[i]).collect();
        Side { y1, y0 }
    }
    fn n(&self) -> f64 {
        (self.y1.len() + self.y0.len()) as f64
    }
    fn tau(&self) -> f64 {
        mean(&self.y1) - mean(&self.y0)
    }
    fn v(&self) -> f64 {
        sample_var(&self.y1) / self.y1.len() as f64 + sample_var(&self.y0) / self.y0.len() as f64
    }
}

fn numeric(ds: &Dataset, f: usize) -> &[f64] {
    match ds.x.column(f) {
        Column::Numeric(v) => v,
        Column::Categorical(_) => panic!("oracle handles numeric features only"),
    }
}

/// Exhaustive search over every midpoint threshold of every feature.
/// Returns `(feature, threshold, gain)` of the winning valid split.
pub fn brute_force_root_split(train: &Dataset, est: &Dataset, params: &TreeParams) -> Option<(usize, f64, f64)> {
    let all_train: Vec<usize> = (0..train.n()).collect();
    let parent = Side::of(train, &all_train);
    let n_root = train.n() as f64;
    let k = params.nodesize;
    let mut cands = Vec::new();
    for f in 0..train.schema().len() {
        let tv = numeric(train, f);
        let ev = numeric(est, f);
        let mut uniq: Vec<f64> = tv.to_vec();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        for pair in uniq.windows(2) {
            let t = (pair[0] + pair[1]) / 2.0;
            let tl: Vec<usize> = (0..train.n()).filter(|&i| tv[i] <= t).collect();
            let tr: Vec<usize> = (0..train.n()).filter(|&i| tv[i] > t).collect();
            let el: Vec<usize> = (0..est.n()).filter(|&i| ev[i] <= t).collect();
            let er: Vec<usize> = (0..est.n()).filter(|&i| ev[i] > t).collect();
            let (l, r) = (Side::of(train, &tl), Side::of(train, &tr));
            let (sl, sr) = (Side::of(est, &el), Side::of(est, &er));
            let ok = [&l, &r, &sl, &sr].iter().all(|s| s.y1.len() >= k && s.y0.len() >= k);
            if !ok {
                continue;
            }
            let gain = (l.n() * l.tau().powi(2) + r.n() * r.tau().powi(2) - parent.n() * parent.tau().powi(2)) / n_root
                - params.alpha * (l.v() + r.v() - parent.v());
            cands.push((f, t, gain));
        }
    }
    let max = cands.iter().map(|c| c.2).fold(f64::NEG_INFINITY, f64::max);
    let best =
        cands.into_iter().filter(|c| gains_tied(c.2, max)).min_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)))?;
    (best.2 > params.min_gain).then_some(best)
}

pub fn root_numeric_split(tree: &CausalTree) -> Option<(usize, f64)> {
    match &tree.root {
        Node::Leaf(_) => None,
        Node::Split { atom: SplitAtom::Numeric { feature, threshold, .. }, .. } => Some((*feature, *threshold)),
        Node::Split { .. } => panic!("unexpected categorical root"),
    }
}

/// Random small numeric dataset with both arms well represented.
pub fn random_small_dataset(rng: &mut ChaCha8Rng) -> Dataset {
    loop {
        let n = rng.random_range(8..=30);
        let d = rng.random_range(1..=2);
        let cols: Vec<Column> = (0..d)
            .map(|_| {
                // Mix of coarse and continuous features to exercise ties.
                if rng.random_bool(0.5) {
                    Column::Numeric((0..n).map(|_| rng.random_range(0..4) as f64).collect())
                } else {
                    Column::Numeric((0..n).map(|_| rng.random::<f64>()).collect())
                }
            })
            .collect();
        let w: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
        let y: Vec<f64> = (0..n).map(|i| rng.random::<f64>() * 4.0 + f64::from(w[i])).collect();
        let treated = w.iter().filter(|&&v| v == 1).count();
        if treated < 2 || n - treated < 2 {
            continue;
        }
        let schema = Schema::new((0..d).map(|j| FeatureSpec::numeric(format!("x{j}"))).collect());
        return Dataset::new(Frame::new(schema, cols).unwrap(), w, y).unwrap();
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Leaf id reached by row `i`, found by re-tracing the split atoms.
pub fn trace_leaf(tree: &CausalTree, frame: &Frame, i: usize) -> usize {
    let mut node = &tree.root;
    loop {
        match node {
            Node::Leaf(l) => return l.id,
            Node::Split { atom, left, right, .. } => {
                let go_left = match atom {
                    SplitAtom::Numeric { feature, threshold, .. } => match frame.column(*feature) {
                        Column::Numeric(v) => v[i] <= *threshold,
                        Column::Categorical(v) => (v[i] as f64) <= *threshold,
                    },
                    SplitAtom::Categorical { feature, left, .. } => match frame.column(*feature) {
                        Column::Categorical(v) => left.contains(&v[i]),
                        Column::Numeric(_) => unreachable!(),
                    },
                };
                node = if go_left { left } else { right };
            }
        }
    }
}

/// Routes every est row by re-tracing the split atoms and checks the leaf
/// invariants. Returns a description of the first violation.
pub fn check_honest_leaves(tree: &CausalTree, est: &Dataset) -> Result<(), String> {
    let nodesize = tree.params.nodesize;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); tree.leaf_count];
    for i in 0..est.n() {
        members[trace_leaf(tree, &est.x, i)].push(i);
    }
    for (id, leaf) in tree.leaves().into_iter().enumerate() {
        let rows = &members[id];
        let (mut n1, mut s1, mut n0, mut s0) = (0usize, 0.0, 0usize, 0.0);
        for &i in rows {
            if est.w[i] == 1 {
                n1 += 1;
                s1 += est.y[i];
            } else {
                n0 += 1;
                s0 += est.y[i];
            }
        }
        if tree.leaf_count > 1 && (n1 < nodesize || n0 < nodesize) {
            return Err(format!("leaf {id}: n1={n1}, n0={n0} below nodesize {nodesize}"));
        }
        let tau = s1 / n1 as f64 - s0 / n0 as f64;
        if tau.to_bits() != leaf.tau_hat.to_bits() {
            return Err(format!("leaf {id}: stored {} vs recomputed {tau}", leaf.tau_hat));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rule oracles

pub const THRESHOLDS: [f64; 4] = [0.5, 1.5, 2.5, 3.5];
pub const DOMAIN: u32 = 4;

pub fn random_atom(rng: &mut ChaCha8Rng) -> Atom {
    match rng.random_range(0..3) {
        f @ 0..=1 => {
            let t = *THRESHOLDS.choose(rng).unwrap();
            if rng.random_bool(0.5) {
                Atom::le(FeatureKey::Raw(f), t)
            } else {
                Atom::gt(FeatureKey::Raw(f), t)
            }
        }
        _ => {
            let allowed: Vec<u32> = (0..DOMAIN).filter(|_| rng.random_bool(0.5)).collect();
            let allowed = if allowed.is_empty() { vec![rng.random_range(0..DOMAIN)] } else { allowed };
            Atom::levels(FeatureKey::Raw(2), allowed, DOMAIN)
        }
    }
}

pub fn random_expr(rng: &mut ChaCha8Rng, budget: usize) -> Expr {
    if budget <= 1 || rng.random_bool(0.25) {
        return Expr::Atom(random_atom(rng));
    }
    let arity = rng.random_range(2..=3).min(budget);
    let mut left = budget;
    let parts = (0..arity)
        .map(|k| {
            let share = if k + 1 == arity { left } else { rng.random_range(1..=left - (arity - k - 1)) };
            left -= share;
            random_expr(rng, share)
        })
        .collect();
    if rng.random_bool(0.5) {
        Expr::and(parts)
    } else {
        Expr::or(parts)
    }
}

/// One representative value per cell of the partition induced by every
/// threshold and level in `expr`.
pub fn cells(expr: &Expr) -> Vec<[Value; 3]> {
    let mut reps: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    for atom in expr.atoms() {
        if let (FeatureKey::Raw(f @ 0..=1), Constraint::Interval { lower, upper }) = (atom.key, &atom.constraint) {
            reps[f].extend([*lower, *upper].into_iter().filter(|v| v.is_finite()));
        }
    }
    for r in &mut reps {
        r.sort_by(f64::total_cmp);
        r.dedup();
        let top = r.last().map_or(0.0, |t| t + 1.0);
        r.push(top);
    }
    let mut out = Vec::new();
    for &a in &reps[0] {
        for &b in &reps[1] {
            for c in 0..DOMAIN {
                out.push([Value::Num(a), Value::Num(b), Value::Level(c)]);
            }
        }
    }
    out
}

pub fn lookup(row: &[Value; 3]) -> impl FnMut(FeatureKey) -> Value + '_ {
    move |k| match k {
        FeatureKey::Raw(i) => row[i],
        FeatureKey::Encoded { .. } => unreachable!(),
    }
}

pub fn tlisa_schema() -> Schema {
    let bin = || vec!["0".to_string(), "1".to_string()];
    Schema::new(vec![
        FeatureSpec::categorical("bronchitis", bin()),
        FeatureSpec::categorical("elementary", bin()),
        FeatureSpec::categorical("eye diseases", bin()),
        FeatureSpec::numeric("Religious activities"),
        FeatureSpec::categorical("heart diseases", bin()),
        FeatureSpec::numeric("cannot sleep well"),
    ])
}

/// The expanded factored rule of the aging-survey example: a shared
/// conjunction AND-ed with a disjunction that differs in heart-disease
/// status. Feature order follows [`tlisa_schema`].
pub fn tlisa_expr() -> Expr {
    let is = |f: usize, level: u32| Expr::Atom(Atom::levels(FeatureKey::Raw(f), vec![level], 2));
    let religious = || Expr::Atom(Atom::gt(FeatureKey::Raw(3), 2.5));
    let first = Expr::and(vec![is(0, 0), is(1, 0), is(2, 0), religious()]);
    let second = Expr::or(vec![
        Expr::and(vec![is(0, 0), is(4, 0), Expr::Atom(Atom::le(FeatureKey::Raw(5), 0.5)), is(1, 0), religious()]),
        Expr::and(vec![is(0, 0), is(4, 1)]),
    ]);
    Expr::and(vec![first, second])
}

/// Up to seven random terms of up to three atoms each over the features
/// used by [`random_expr`].
pub fn random_terms(rng: &mut ChaCha8Rng) -> Vec<Conjunction> {
    let n = rng.random_range(0..8);
    (0..n)
        .filter_map(|_| {
            let k = rng.random_range(0..4);
            Conjunction::from_atoms((0..k).map(|_| random_atom(rng)).collect::<Vec<_>>())
        })
        .collect()
}
