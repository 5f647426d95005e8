//! Honest causal trees.
//!
//! Structure is grown on one subset of the data and leaf effects are
//! estimated on a disjoint subset. A node is split on the candidate that
//! maximizes
//!
//! ```text
//! gain = (n_L * tau_L^2 + n_R * tau_R^2 - n_P * tau_P^2) / n_root
//!        - alpha * (v_L + v_R - v_P)
//! ```
//!
//! computed on the structure subset, where `tau_C` is the difference in
//! means and `v_C = s1^2 / n1 + s0^2 / n0`. Every child must keep at least
//! `nodesize` treated and `nodesize` control rows in both subsets.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::seq::index;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Column, DataError, Dataset, FeatureKind, FeatureSource, Frame, Schema};
use crate::seeds;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("invalid tree parameters: {0}")]
    InvalidParams(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("row {row}: level `{level}` of feature `{feature}` was not seen during fitting")]
    UnseenLevel { row: usize, feature: String, level: String },
    #[error("unknown leaf id {0}")]
    UnknownLeaf(usize),
    #[error(transparent)]
    Data(#[from] DataError),
}

pub type Result<T> = std::result::Result<T, TreeError>;

/// Relative tolerance under which two gains count as tied.
pub const GAIN_TIE_TOLERANCE: f64 = 1e-12;

/// Returns true when `a` and `b` are equal within [`GAIN_TIE_TOLERANCE`].
pub fn gains_tied(a: f64, b: f64) -> bool {
    (a - b).abs() <= GAIN_TIE_TOLERANCE * a.abs().max(b.abs()).max(1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeParams {
    /// Candidate features sampled per node; `None` uses every feature.
    pub mtry: Option<usize>,
    /// Minimum treated and minimum control count per leaf, in both subsets.
    pub nodesize: usize,
    pub max_depth: usize,
    /// Use the nine in-node decile thresholds instead of every midpoint.
    pub bucketized: bool,
    /// Weight of the variance penalty in the split gain.
    pub alpha: f64,
    pub min_gain: f64,
    /// Structure fraction when a single dataset is split honestly.
    pub honest_ratio: f64,
    /// Optional minimum total row count per leaf, in both subsets.
    pub min_total_leaf_size: Option<usize>,
}

impl Default for TreeParams {
    fn default() -> Self {
        Self {
            mtry: None,
            nodesize: 1,
            max_depth: 8,
            bucketized: false,
            alpha: 1.0,
            min_gain: 0.0,
            honest_ratio: 0.5,
            min_total_leaf_size: None,
        }
    }
}

/// Deepest tree the model file format accepts.
pub const MAX_DEPTH_LIMIT: usize = 30;

impl TreeParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(TreeError::InvalidParams(msg.to_string()));
        if self.mtry == Some(0) {
            return bad("mtry must be at least 1");
        }
        if self.nodesize == 0 {
            return bad("nodesize must be at least 1");
        }
        if self.max_depth > MAX_DEPTH_LIMIT {
            return bad("max_depth must not exceed 30");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha must be finite and >= 0");
        }
        if !(self.min_gain >= 0.0 && self.min_gain.is_finite()) {
            return bad("min_gain must be finite and >= 0");
        }
        if !(self.honest_ratio > 0.0 && self.honest_ratio < 1.0) {
            return bad("honest_ratio must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Summary of one treatment arm's outcomes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub n: usize,
    pub mean: f64,
    /// Sample variance (n - 1 denominator); zero below two rows.
    pub var: f64,
}

/// Outcome summaries of both arms over one subset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EffectStats {
    pub treated: ArmStats,
    pub control: ArmStats,
}

impl EffectStats {
    /// Difference in means, summing outcomes in ascending row order.
    pub fn from_rows(ds: &Dataset, rows: &[usize]) -> Self {
        let (mut n1, mut s1, mut n0, mut s0) = (0usize, 0.0, 0usize, 0.0);
        for &i in rows {
            if ds.w[i] == 1 {
                n1 += 1;
                s1 += ds.y[i];
            } else {
                n0 += 1;
                s0 += ds.y[i];
            }
        }
        let m1 = if n1 > 0 { s1 / n1 as f64 } else { 0.0 };
        let m0 = if n0 > 0 { s0 / n0 as f64 } else { 0.0 };
        let (mut q1, mut q0) = (0.0, 0.0);
        for &i in rows {
            if ds.w[i] == 1 {
                q1 += (ds.y[i] - m1).powi(2);
            } else {
                q0 += (ds.y[i] - m0).powi(2);
            }
        }
        let var = |q: f64, n: usize| if n > 1 { q / (n - 1) as f64 } else { 0.0 };
        Self {
            treated: ArmStats { n: n1, mean: m1, var: var(q1, n1) },
            control: ArmStats { n: n0, mean: m0, var: var(q0, n0) },
        }
    }

    pub fn tau(&self) -> f64 {
        self.treated.mean - self.control.mean
    }

    pub fn total(&self) -> usize {
        self.treated.n + self.control.n
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitAtom {
    /// Rows with `value <= threshold` go left.
    Numeric { feature: usize, name: String, threshold: f64 },
    /// Rows whose level code is in `left` go left; other declared levels go right.
    Categorical { feature: usize, name: String, left: Vec<u32> },
}

impl SplitAtom {
    pub fn feature(&self) -> usize {
        match self {
            SplitAtom::Numeric { feature, .. } | SplitAtom::Categorical { feature, .. } => *feature,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            SplitAtom::Numeric { name, .. } | SplitAtom::Categorical { name, .. } => name,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub id: usize,
    pub tau_hat: f64,
    /// Estimation-subset statistics; `tau_hat` is their difference in means.
    pub est: EffectStats,
    /// Structure-subset statistics.
    pub train: EffectStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split { atom: SplitAtom, est: EffectStats, train: EffectStats, left: Box<Node>, right: Box<Node> },
    Leaf(Leaf),
}

impl Node {
    /// `(est, train)` statistics.
    fn stats(&self) -> (EffectStats, EffectStats) {
        match self {
            Node::Split { est, train, .. } => (*est, *train),
            Node::Leaf(l) => (l.est, l.train),
        }
    }

    fn leaf_count(&self) -> usize {
        match self {
            Node::Leaf(_) => 1,
            Node::Split { left, right, .. } => left.leaf_count() + right.leaf_count(),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Node::Leaf(_) => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

/// Which branch a path step takes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Left,
    Right,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalTree {
    pub root: Node,
    pub leaf_count: usize,
    /// Structure-subset size at the root; normalizes gains and risks.
    pub n_root: usize,
    pub params: TreeParams,
    pub seed: u64,
    #[serde(skip)]
    schema: Arc<Schema>,
}

impl CausalTree {
    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn shared_schema(&self) -> Arc<Schema> {
        Arc::clone(&self.schema)
    }

    /// Re-attaches the input schema after deserialization.
    pub fn attach_schema(&mut self, schema: Arc<Schema>) {
        self.schema = schema;
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Leaves in id order.
    pub fn leaves(&self) -> Vec<&Leaf> {
        fn walk<'a>(node: &'a Node, out: &mut Vec<&'a Leaf>) {
            match node {
                Node::Leaf(l) => out.push(l),
                Node::Split { left, right, .. } => {
                    walk(left, out);
                    walk(right, out);
                }
            }
        }
        let mut out = Vec::with_capacity(self.leaf_count);
        walk(&self.root, &mut out);
        out
    }

    pub fn leaf(&self, id: usize) -> Result<&Leaf> {
        self.leaves().get(id).copied().ok_or(TreeError::UnknownLeaf(id))
    }

    /// Split atoms and branch directions from the root to leaf `id`.
    pub fn path_to_leaf(&self, id: usize) -> Result<Vec<(&SplitAtom, Branch)>> {
        fn walk<'a>(node: &'a Node, id: usize, path: &mut Vec<(&'a SplitAtom, Branch)>) -> bool {
            match node {
                Node::Leaf(l) => l.id == id,
                Node::Split { atom, left, right, .. } => {
                    path.push((atom, Branch::Left));
                    if walk(left, id, path) {
                        return true;
                    }
                    path.pop();
                    path.push((atom, Branch::Right));
                    if walk(right, id, path) {
                        return true;
                    }
                    path.pop();
                    false
                }
            }
        }
        let mut path = Vec::new();
        if walk(&self.root, id, &mut path) {
            Ok(path)
        } else {
            Err(TreeError::UnknownLeaf(id))
        }
    }

    fn route<S: FeatureSource + ?Sized>(&self, row: &S, row_index: usize) -> Result<&Leaf> {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf(l) => return Ok(l),
                Node::Split { atom, left, right, .. } => {
                    let go_left = match atom {
                        SplitAtom::Numeric { feature, threshold, .. } => row.numeric(*feature) <= *threshold,
                        SplitAtom::Categorical { feature, left, name } => {
                            let code = row.level(*feature);
                            let declared = self.schema.features[*feature].level_count().unwrap_or(0);
                            if code as usize >= declared {
                                return Err(TreeError::UnseenLevel {
                                    row: row_index,
                                    feature: name.clone(),
                                    level: code.to_string(),
                                });
                            }
                            left.binary_search(&code).is_ok()
                        }
                    };
                    node = if go_left { left } else { right };
                }
            }
        }
    }

    /// Leaf reached by a row of covariate values.
    pub fn leaf_for<S: FeatureSource + ?Sized>(&self, row: &S) -> Result<&Leaf> {
        self.route(row, 0)
    }

    /// Predicted effect for one row.
    pub fn predict_cate<S: FeatureSource + ?Sized>(&self, row: &S) -> Result<f64> {
        self.route(row, 0).map(|l| l.tau_hat)
    }

    fn check_frame(&self, frame: &Frame) -> Result<()> {
        check_schema_compat(&self.schema, frame.schema())
    }

    /// Leaf id of every row of `frame`.
    pub fn leaf_ids(&self, frame: &Frame) -> Result<Vec<usize>> {
        self.check_frame(frame)?;
        (0..frame.n())
            .map(|i| {
                self.route(&frame.row(i), i)
                    .map_err(|e| match e {
                        TreeError::UnseenLevel { row, feature, level } => {
                            let level = label_of(frame.schema(), &feature, &level);
                            TreeError::UnseenLevel { row, feature, level }
                        }
                        e => e,
                    })
                    .map(|l| l.id)
            })
            .collect()
    }

    pub fn predict_frame(&self, frame: &Frame) -> Result<Vec<f64>> {
        let leaves = self.leaves();
        Ok(self.leaf_ids(frame)?.into_iter().map(|id| leaves[id].tau_hat).collect())
    }
}

fn label_of(schema: &Schema, feature: &str, code: &str) -> String {
    let level = schema.index_of(feature).and_then(|f| match &schema.features[f].kind {
        FeatureKind::Categorical { levels } => code.parse::<usize>().ok().and_then(|c| levels.get(c).cloned()),
        FeatureKind::Numeric => None,
    });
    level.unwrap_or_else(|| code.to_string())
}

/// A frame is compatible with a tree schema when names and kinds match and
/// its categorical levels extend the declared ones.
fn check_schema_compat(expected: &Schema, actual: &Schema) -> Result<()> {
    if expected.len() != actual.len() {
        return Err(TreeError::SchemaMismatch(format!("expected {} features, found {}", expected.len(), actual.len())));
    }
    for (e, a) in expected.features.iter().zip(&actual.features) {
        let ok = e.name == a.name
            && match (&e.kind, &a.kind) {
                (FeatureKind::Numeric, FeatureKind::Numeric) => true,
                (FeatureKind::Categorical { levels: le }, FeatureKind::Categorical { levels: la }) => {
                    la.len() >= le.len() && la[..le.len()] == le[..]
                }
                _ => false,
            };
        if !ok {
            return Err(TreeError::SchemaMismatch(format!("feature `{}` differs from `{}`", a.name, e.name)));
        }
    }
    Ok(())
}

/// Running sums for one arm.
#[derive(Clone, Copy, Debug, Default)]
struct Sums {
    n: usize,
    s: f64,
    q: f64,
}

impl Sums {
    fn add(&mut self, y: f64) {
        self.n += 1;
        self.s += y;
        self.q += y * y;
    }

    fn minus(self, o: Sums) -> Sums {
        Sums { n: self.n - o.n, s: self.s - o.s, q: self.q - o.q }
    }

    fn mean(&self) -> f64 {
        self.s / self.n as f64
    }

    fn var_of_mean(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let var = ((self.q - self.s * self.s / n) / (n - 1.0)).max(0.0);
        var / n
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Pair {
    t: Sums,
    c: Sums,
}

impl Pair {
    fn add(&mut self, w: u8, y: f64) {
        if w == 1 {
            self.t.add(y)
        } else {
            self.c.add(y)
        }
    }

    fn minus(self, o: Pair) -> Pair {
        Pair { t: self.t.minus(o.t), c: self.c.minus(o.c) }
    }

    fn n(&self) -> usize {
        self.t.n + self.c.n
    }

    fn tau(&self) -> f64 {
        self.t.mean() - self.c.mean()
    }

    fn v(&self) -> f64 {
        self.t.var_of_mean() + self.c.var_of_mean()
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Counts {
    t: usize,
    c: usize,
}

impl Counts {
    fn add(&mut self, w: u8) {
        if w == 1 {
            self.t += 1
        } else {
            self.c += 1
        }
    }

    fn minus(self, o: Counts) -> Counts {
        Counts { t: self.t - o.t, c: self.c - o.c }
    }
}

/// Split gain of `parent` into `left` and `left`'s complement.
fn split_gain(parent: &Pair, left: &Pair, n_root: usize, alpha: f64) -> f64 {
    let right = parent.minus(*left);
    let het = |p: &Pair| p.n() as f64 * p.tau().powi(2);
    (het(left) + het(&right) - het(parent)) / n_root as f64 - alpha * (left.v() + right.v() - parent.v())
}

#[derive(Clone, Debug)]
enum CandidateKey {
    Threshold(f64),
    Levels(Vec<u32>),
}

impl CandidateKey {
    fn cmp_key(&self, other: &CandidateKey) -> Ordering {
        match (self, other) {
            (CandidateKey::Threshold(a), CandidateKey::Threshold(b)) => a.total_cmp(b),
            (CandidateKey::Levels(a), CandidateKey::Levels(b)) => a.cmp(b),
            (CandidateKey::Threshold(_), CandidateKey::Levels(_)) => Ordering::Less,
            (CandidateKey::Levels(_), CandidateKey::Threshold(_)) => Ordering::Greater,
        }
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    feature: usize,
    key: CandidateKey,
    gain: f64,
}

impl Candidate {
    /// True if `self` should replace `best`: strictly larger gain, or a tie
    /// resolved by lower feature index then smaller key.
    fn beats(&self, best: &Candidate) -> bool {
        if gains_tied(self.gain, best.gain) {
            (self.feature, 0).cmp(&(best.feature, 0)).then_with(|| self.key.cmp_key(&best.key)) == Ordering::Less
        } else {
            self.gain > best.gain
        }
    }
}

struct Fitter<'a> {
    train: &'a Dataset,
    est: &'a Dataset,
    params: &'a TreeParams,
    rng: rand_chacha::ChaCha8Rng,
    n_root: usize,
    next_leaf: usize,
    schema: &'a Schema,
}

impl Fitter<'_> {
    fn admissible(&self, train: Counts, est: Counts) -> bool {
        let k = self.params.nodesize;
        let total_ok = |c: Counts| self.params.min_total_leaf_size.is_none_or(|m| c.t + c.c >= m);
        train.t >= k && train.c >= k && est.t >= k && est.c >= k && total_ok(train) && total_ok(est)
    }

    fn grow(&mut self, train_rows: Vec<usize>, est_rows: Vec<usize>, depth: usize) -> Node {
        let train_stats = EffectStats::from_rows(self.train, &train_rows);
        let est_stats = EffectStats::from_rows(self.est, &est_rows);
        let d = self.schema.len();
        let mut best: Option<Candidate> = None;
        if depth < self.params.max_depth && d > 0 {
            let k = self.params.mtry.unwrap_or(d).min(d);
            let mut features = index::sample(&mut self.rng, d, k).into_vec();
            features.sort_unstable();
            let mut parent = Pair::default();
            for &i in &train_rows {
                parent.add(self.train.w[i], self.train.y[i]);
            }
            for f in features {
                let cand = match self.train.x.column(f) {
                    Column::Numeric(_) => self.best_numeric(f, &train_rows, &est_rows, &parent),
                    Column::Categorical(_) => self.best_categorical(f, &train_rows, &est_rows, &parent),
                };
                if let Some(c) = cand {
                    if best.as_ref().is_none_or(|b| c.beats(b)) {
                        best = Some(c);
                    }
                }
            }
        }
        match best.filter(|b| b.gain > self.params.min_gain) {
            None => {
                let id = self.next_leaf;
                self.next_leaf += 1;
                Node::Leaf(Leaf { id, tau_hat: est_stats.tau(), est: est_stats, train: train_stats })
            }
            Some(best) => {
                let atom = self.make_atom(&best);
                let goes_left = |ds: &Dataset, i: usize| atom_goes_left(&atom, &ds.x, i);
                let (tl, tr): (Vec<usize>, Vec<usize>) = train_rows.iter().partition(|&&i| goes_left(self.train, i));
                let (el, er): (Vec<usize>, Vec<usize>) = est_rows.iter().partition(|&&i| goes_left(self.est, i));
                let left = self.grow(tl, el, depth + 1);
                let right = self.grow(tr, er, depth + 1);
                Node::Split { atom, est: est_stats, train: train_stats, left: Box::new(left), right: Box::new(right) }
            }
        }
    }

    fn make_atom(&self, c: &Candidate) -> SplitAtom {
        let name = self.schema.features[c.feature].name.clone();
        match &c.key {
            CandidateKey::Threshold(t) => SplitAtom::Numeric { feature: c.feature, name, threshold: *t },
            CandidateKey::Levels(l) => SplitAtom::Categorical { feature: c.feature, name, left: l.clone() },
        }
    }

    fn best_numeric(&self, f: usize, train_rows: &[usize], est_rows: &[usize], parent: &Pair) -> Option<Candidate> {
        let Column::Numeric(tv) = self.train.x.column(f) else { unreachable!() };
        let Column::Numeric(ev) = self.est.x.column(f) else { unreachable!() };
        let mut tsorted: Vec<usize> = train_rows.to_vec();
        tsorted.sort_by(|&a, &b| tv[a].total_cmp(&tv[b]).then(a.cmp(&b)));
        let mut esorted: Vec<usize> = est_rows.to_vec();
        esorted.sort_by(|&a, &b| ev[a].total_cmp(&ev[b]).then(a.cmp(&b)));
        let m = tsorted.len();
        if m < 2 {
            return None;
        }
        // Candidate thresholds with the count of structure rows left of each.
        let mut thresholds: Vec<(f64, usize)> = Vec::new();
        if self.params.bucketized {
            for j in 1..10 {
                let idx = (j * m).div_ceil(10).max(1) - 1;
                let t = tv[tsorted[idx]];
                let left = tsorted.partition_point(|&i| tv[i] <= t);
                if left < m && thresholds.last().is_none_or(|&(p, _)| p < t) {
                    thresholds.push((t, left));
                }
            }
        } else {
            for k in 0..m - 1 {
                let (a, b) = (tv[tsorted[k]], tv[tsorted[k + 1]]);
                if a < b {
                    thresholds.push((midpoint(a, b), k + 1));
                }
            }
        }
        let mut best: Option<Candidate> = None;
        let mut left = Pair::default();
        let mut left_train = Counts::default();
        let mut consumed = 0;
        let mut est_left = Counts::default();
        let mut est_pos = 0;
        let mut est_total = Counts::default();
        for &i in est_rows {
            est_total.add(self.est.w[i]);
        }
        let train_total = Counts { t: parent.t.n, c: parent.c.n };
        for (t, count) in thresholds {
            while consumed < count {
                let i = tsorted[consumed];
                left.add(self.train.w[i], self.train.y[i]);
                left_train.add(self.train.w[i]);
                consumed += 1;
            }
            while est_pos < esorted.len() && ev[esorted[est_pos]] <= t {
                est_left.add(self.est.w[esorted[est_pos]]);
                est_pos += 1;
            }
            if !self.admissible(left_train, est_left)
                || !self.admissible(train_total.minus(left_train), est_total.minus(est_left))
            {
                continue;
            }
            let cand = Candidate {
                feature: f,
                key: CandidateKey::Threshold(t),
                gain: split_gain(parent, &left, self.n_root, self.params.alpha),
            };
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                best = Some(cand);
            }
        }
        best
    }

    fn best_categorical(&self, f: usize, train_rows: &[usize], est_rows: &[usize], parent: &Pair) -> Option<Candidate> {
        let Column::Categorical(tc) = self.train.x.column(f) else { unreachable!() };
        let Column::Categorical(ec) = self.est.x.column(f) else { unreachable!() };
        let declared = self.schema.features[f].level_count().unwrap_or(0);
        let mut per_level = vec![Pair::default(); declared];
        for &i in train_rows {
            per_level[tc[i] as usize].add(self.train.w[i], self.train.y[i]);
        }
        let mut est_level = vec![Counts::default(); declared];
        for &i in est_rows {
            if let Some(c) = est_level.get_mut(ec[i] as usize) {
                c.add(self.est.w[i]);
            }
        }
        let node_t = if parent.t.n > 0 { parent.t.mean() } else { 0.0 };
        let node_c = if parent.c.n > 0 { parent.c.mean() } else { 0.0 };
        let mut observed: Vec<(f64, u32)> = per_level
            .iter()
            .enumerate()
            .filter(|(_, p)| p.n() > 0)
            .map(|(code, p)| {
                let mt = if p.t.n > 0 { p.t.mean() } else { node_t };
                let mc = if p.c.n > 0 { p.c.mean() } else { node_c };
                (mt - mc, code as u32)
            })
            .collect();
        if observed.len() < 2 {
            return None;
        }
        observed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut est_total = Counts::default();
        for c in &est_level {
            est_total.t += c.t;
            est_total.c += c.c;
        }
        let train_total = Counts { t: parent.t.n, c: parent.c.n };
        let mut left = Pair::default();
        let mut est_left = Counts::default();
        let mut best: Option<Candidate> = None;
        for k in 0..observed.len() - 1 {
            let code = observed[k].1 as usize;
            let lp = per_level[code];
            left.t.n += lp.t.n;
            left.t.s += lp.t.s;
            left.t.q += lp.t.q;
            left.c.n += lp.c.n;
            left.c.s += lp.c.s;
            left.c.q += lp.c.q;
            est_left.t += est_level[code].t;
            est_left.c += est_level[code].c;
            let left_train = Counts { t: left.t.n, c: left.c.n };
            if !self.admissible(left_train, est_left)
                || !self.admissible(train_total.minus(left_train), est_total.minus(est_left))
            {
                continue;
            }
            let mut set: Vec<u32> = observed[..=k].iter().map(|o| o.1).collect();
            set.sort_unstable();
            let cand = Candidate {
                feature: f,
                key: CandidateKey::Levels(set),
                gain: split_gain(parent, &left, self.n_root, self.params.alpha),
            };
            if best.as_ref().is_none_or(|b| cand.beats(b)) {
                best = Some(cand);
            }
        }
        best
    }
}

/// Midpoint of two ordered distinct floats that stays strictly below `b`.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a / 2.0 + b / 2.0;
    if m >= b || m < a {
        a
    } else {
        m
    }
}

fn atom_goes_left(atom: &SplitAtom, frame: &Frame, i: usize) -> bool {
    match atom {
        SplitAtom::Numeric { feature, threshold, .. } => frame.row(i).numeric(*feature) <= *threshold,
        SplitAtom::Categorical { feature, left, .. } => left.binary_search(&frame.row(i).level(*feature)).is_ok(),
    }
}

/// Grows an honest tree: structure from `train`, leaf effects from `est`.
pub fn fit_causal_tree(train: &Dataset, est: &Dataset, params: &TreeParams, seed: u64) -> Result<CausalTree> {
    params.validate()?;
    if train.schema() != est.schema() {
        return Err(TreeError::SchemaMismatch("structure and estimation subsets differ".into()));
    }
    data::require_positivity(train, "structure subset")?;
    data::require_positivity(est, "estimation subset")?;
    let schema = train.x.shared_schema();
    let mut fitter =
        Fitter { train, est, params, rng: seeds::rng(seed), n_root: train.n(), next_leaf: 0, schema: &schema };
    let root = fitter.grow((0..train.n()).collect(), (0..est.n()).collect(), 0);
    let leaf_count = fitter.next_leaf;
    Ok(CausalTree { root, leaf_count, n_root: train.n(), params: params.clone(), seed, schema })
}

/// Splits `ds` at `params.honest_ratio` and fits an honest tree. Seeds for
/// the split and the fit are derived from `seed`.
pub fn fit_honest(ds: &Dataset, params: &TreeParams, seed: u64) -> Result<(CausalTree, Dataset, Dataset)> {
    params.validate()?;
    let (train, est) = data::honest_split(ds, params.honest_ratio, seeds::mix(seed, seeds::STREAM_SPLIT))?;
    let tree = fit_causal_tree(&train, &est, params, seeds::mix(seed, seeds::STREAM_FIT))?;
    Ok((tree, train, est))
}

// ---------------------------------------------------------------------------
// Pruning

/// Pre-order ids of internal nodes to collapse into leaves.
type Collapse = Vec<bool>;

fn collapse_tree(tree: &CausalTree, collapse: &Collapse) -> CausalTree {
    fn walk(node: &Node, collapse: &Collapse, next_internal: &mut usize, next_leaf: &mut usize) -> Node {
        match node {
            Node::Leaf(l) => {
                let id = *next_leaf;
                *next_leaf += 1;
                Node::Leaf(Leaf { id, ..l.clone() })
            }
            Node::Split { atom, est, train, left, right } => {
                let me = *next_internal;
                *next_internal += 1;
                if collapse[me] {
                    // Skip the pre-order ids of the removed subtree.
                    *next_internal += left.leaf_count() - 1 + right.leaf_count() - 1;
                    let id = *next_leaf;
                    *next_leaf += 1;
                    Node::Leaf(Leaf { id, tau_hat: est.tau(), est: *est, train: *train })
                } else {
                    let l = walk(left, collapse, next_internal, next_leaf);
                    let r = walk(right, collapse, next_internal, next_leaf);
                    Node::Split { atom: atom.clone(), est: *est, train: *train, left: Box::new(l), right: Box::new(r) }
                }
            }
        }
    }
    let (mut ni, mut nl) = (0, 0);
    let root = walk(&tree.root, collapse, &mut ni, &mut nl);
    CausalTree { root, leaf_count: nl, ..tree.clone() }
}

/// Heterogeneity risk of a node treated as a leaf.
fn node_risk(train: &EffectStats, n_root: usize) -> f64 {
    -(train.total() as f64) * train.tau().powi(2) / n_root as f64
}

enum Kid {
    Internal(usize),
    Leaf(f64),
}

struct PruneNode {
    risk_leaf: f64,
    kids: [Kid; 2],
}

fn pruning_arena(node: &Node, n_root: usize, out: &mut Vec<PruneNode>) -> Kid {
    match node {
        Node::Leaf(l) => Kid::Leaf(node_risk(&l.train, n_root)),
        Node::Split { train, left, right, .. } => {
            let me = out.len();
            out.push(PruneNode { risk_leaf: node_risk(train, n_root), kids: [Kid::Leaf(0.0), Kid::Leaf(0.0)] });
            let l = pruning_arena(left, n_root, out);
            let r = pruning_arena(right, n_root, out);
            out[me].kids = [l, r];
            Kid::Internal(me)
        }
    }
}

/// Subtree risk and leaf count of node `i` under `collapsed`; records the
/// weakest-link value of every uncollapsed internal node visited.
fn subtree_risk(arena: &[PruneNode], i: usize, collapsed: &[bool], links: &mut Vec<(usize, f64)>) -> (f64, usize) {
    if collapsed[i] {
        return (arena[i].risk_leaf, 1);
    }
    let (mut risk, mut leaves) = (0.0, 0);
    for kid in &arena[i].kids {
        let (r, n) = match kid {
            Kid::Internal(j) => subtree_risk(arena, *j, collapsed, links),
            Kid::Leaf(r) => (*r, 1),
        };
        risk += r;
        leaves += n;
    }
    links.push((i, (arena[i].risk_leaf - risk) / (leaves as f64 - 1.0)));
    (risk, leaves)
}

/// Weakest-link sequence `(alpha_k, collapse set)`, from the full tree
/// (`alpha_0 = -inf`) down to the root. Internal nodes are numbered in
/// pre-order.
fn pruning_sequence(tree: &CausalTree) -> Vec<(f64, Collapse)> {
    let mut arena = Vec::new();
    pruning_arena(&tree.root, tree.n_root, &mut arena);
    let mut collapsed = vec![false; arena.len()];
    let mut seq = vec![(f64::NEG_INFINITY, collapsed.clone())];
    let mut last = f64::NEG_INFINITY;
    while !arena.is_empty() && !collapsed[0] {
        let mut links = Vec::new();
        subtree_risk(&arena, 0, &collapsed, &mut links);
        let alpha = links.iter().map(|l| l.1).fold(f64::INFINITY, f64::min);
        for &(i, g) in &links {
            if g <= alpha || gains_tied(g, alpha) {
                collapsed[i] = true;
            }
        }
        last = last.max(alpha);
        seq.push((last, collapsed.clone()));
    }
    seq
}

/// Nodes on a row's path: pre-order internal id (None for the leaf),
/// pre-order id over all nodes, and the node's structure-subset effect.
fn path_nodes<S: FeatureSource + ?Sized>(tree: &CausalTree, row: &S) -> Vec<(Option<usize>, usize, f64)> {
    fn walk<S: FeatureSource + ?Sized>(
        node: &Node,
        row: &S,
        internal: &mut usize,
        all: &mut usize,
        out: &mut Vec<(Option<usize>, usize, f64)>,
    ) {
        let (_, train) = node.stats();
        match node {
            Node::Leaf(_) => out.push((None, *all, train.tau())),
            Node::Split { atom, left, right, .. } => {
                out.push((Some(*internal), *all, train.tau()));
                *internal += 1;
                *all += 1;
                let go_left = match atom {
                    SplitAtom::Numeric { feature, threshold, .. } => row.numeric(*feature) <= *threshold,
                    SplitAtom::Categorical { feature, left, .. } => left.binary_search(&row.level(*feature)).is_ok(),
                };
                if go_left {
                    walk(left, row, internal, all, out);
                } else {
                    *internal += left.leaf_count() - 1;
                    *all += 2 * left.leaf_count() - 1;
                    walk(right, row, internal, all, out);
                }
            }
        }
    }
    let mut out = Vec::new();
    walk(&tree.root, row, &mut 0, &mut 0, &mut out);
    out
}

fn stratified_folds(ds: &Dataset, folds: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = seeds::rng(seed);
    let mut assign = vec![0; ds.n()];
    for arm in [1u8, 0u8] {
        let mut rows: Vec<usize> = (0..ds.n()).filter(|&i| ds.w[i] == arm).collect();
        rows.shuffle(&mut rng);
        for (k, i) in rows.into_iter().enumerate() {
            assign[i] = k % folds;
        }
    }
    assign
}

/// Cost-complexity pruning with the subtree chosen by `folds`-fold
/// cross-validation on the structure subset.
///
/// Each fold refits the tree on the remaining structure rows (same
/// estimation subset and parameters) and scores every complexity level by
/// comparing the fold subtree's leaf effects, estimated from the rows that
/// grew it, with the held-out fold's own difference in means in the same
/// leaves:
/// `sum_rows tau_fit^2 - 2 * tau_fit * tau_held`, which equals the squared
/// error against the true effect up to a constant. A leaf whose held-out
/// rows miss an arm borrows the estimate of its deepest ancestor that has
/// both. Ties go to the smaller tree.
pub fn prune_tree(tree: &CausalTree, train: &Dataset, est: &Dataset, folds: usize, seed: u64) -> Result<CausalTree> {
    if folds < 2 {
        return Err(TreeError::InvalidParams("pruning needs at least 2 folds".into()));
    }
    if tree.leaf_count <= 1 {
        return Ok(tree.clone());
    }
    let seq = pruning_sequence(tree);
    let k_max = seq.len() - 1;
    let betas: Vec<f64> = (0..=k_max)
        .map(|k| {
            if k == 0 {
                f64::NEG_INFINITY
            } else if k == k_max {
                f64::INFINITY
            } else {
                seq[k].0 / 2.0 + seq[k + 1].0 / 2.0
            }
        })
        .collect();
    let assign = stratified_folds(train, folds, seeds::mix(seed, seeds::STREAM_PRUNE));
    let mut errors = vec![0.0; k_max + 1];
    let mut scored = false;
    for fold in 0..folds {
        let fit_rows: Vec<usize> = (0..train.n()).filter(|&i| assign[i] != fold).collect();
        let held: Vec<usize> = (0..train.n()).filter(|&i| assign[i] == fold).collect();
        let fit_part = train.select(&fit_rows);
        let held_treated = held.iter().filter(|&&i| train.w[i] == 1).count();
        if held_treated == 0 || held_treated == held.len() || !fit_part_ok(&fit_part) {
            continue;
        }
        let fold_tree = fit_causal_tree(&fit_part, est, &tree.params, seeds::mix(seed, fold as u64))?;
        let fold_seq = pruning_sequence(&fold_tree);
        let paths: Vec<_> = held.iter().map(|&i| path_nodes(&fold_tree, &train.x.row(i))).collect();
        // Held-out sums per node of the fold's full tree.
        let node_total = 2 * fold_tree.leaf_count - 1;
        let mut sums = vec![[(0usize, 0.0f64); 2]; node_total];
        for (path, &i) in paths.iter().zip(&held) {
            for &(_, node, _) in path {
                let arm = &mut sums[node][usize::from(train.w[i])];
                arm.0 += 1;
                arm.1 += train.y[i];
            }
        }
        let held_tau = |node: usize| {
            let [c, t] = sums[node];
            (c.0 > 0 && t.0 > 0).then(|| t.1 / t.0 as f64 - c.1 / c.0 as f64)
        };
        for (k, &beta) in betas.iter().enumerate() {
            let j = fold_seq.iter().rposition(|(a, _)| *a <= beta).unwrap_or(0);
            let collapse = &fold_seq[j].1;
            errors[k] += paths
                .iter()
                .map(|path| {
                    let at = path
                        .iter()
                        .position(|(internal, _, _)| internal.is_some_and(|c| collapse[c]))
                        .unwrap_or(path.len() - 1);
                    let pred = path[at].2;
                    let target = path[..=at]
                        .iter()
                        .rev()
                        .find_map(|&(_, node, _)| held_tau(node))
                        .expect("root holds both arms");
                    pred * pred - 2.0 * pred * target
                })
                .sum::<f64>();
        }
        scored = true;
    }
    if !scored {
        return Ok(tree.clone());
    }
    let mut best = 0;
    for k in 1..=k_max {
        if errors[k] < errors[best] || gains_tied(errors[k], errors[best]) {
            best = k;
        }
    }
    Ok(collapse_tree(tree, &seq[best].1))
}

fn fit_part_ok(ds: &Dataset) -> bool {
    let t = ds.treated_count();
    t > 0 && t < ds.n()
}
