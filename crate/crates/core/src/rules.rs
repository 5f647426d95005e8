//! Boolean rules over tree regions.
//!
//! A [`Conjunction`] holds at most one [`Constraint`] per feature: a
//! half-open interval `(lower, upper]` for numeric features and an allowed
//! level set for categorical and encoded features. Constructors intersect
//! constraints eagerly, so a conjunction never carries redundant bounds and
//! an empty region is reported instead of stored.
//!
//! [`Expr`] trees combine atoms with AND and OR. [`to_dnf`] distributes them
//! into a sorted list of conjunctions and [`minimize_dnf`] simplifies such a
//! list without changing the set of rows it accepts.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::causal_tree::{Branch, CausalTree, SplitAtom, TreeError};
use crate::crf::CrfModel;
use crate::data::{FeatureKind, Frame, Schema, Value};

/// Default cap on the number of DNF terms produced by one expansion.
pub const DEFAULT_MAX_TERMS: usize = 10_000;

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("rule expansion exceeded {max_terms} terms ({partial} terms when it stopped)")]
    Explosion { max_terms: usize, partial: usize },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("dangling provenance: {0}")]
    Provenance(String),
}

/// Identifies the feature an atom constrains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKey {
    /// Column `index` of the raw covariate schema.
    Raw(usize),
    /// Leaf encoding of tree `tree` (0-based) in layer `layer` (1-based).
    Encoded { layer: usize, tree: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Constraint {
    /// `lower < x <= upper`; infinite bounds are absent.
    Interval { lower: f64, upper: f64 },
    /// Level code in `allowed` (sorted, unique), out of `domain` levels.
    Levels { allowed: Vec<u32>, domain: u32 },
}

impl Constraint {
    pub fn le(threshold: f64) -> Self {
        Constraint::Interval { lower: f64::NEG_INFINITY, upper: threshold }
    }

    pub fn gt(threshold: f64) -> Self {
        Constraint::Interval { lower: threshold, upper: f64::INFINITY }
    }

    pub fn levels(mut allowed: Vec<u32>, domain: u32) -> Self {
        allowed.sort_unstable();
        allowed.dedup();
        Constraint::Levels { allowed, domain }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            Constraint::Interval { lower, upper } => lower >= upper,
            Constraint::Levels { allowed, .. } => allowed.is_empty(),
        }
    }

    /// True when the constraint accepts every value.
    pub fn is_full(&self) -> bool {
        match self {
            Constraint::Interval { lower, upper } => *lower == f64::NEG_INFINITY && *upper == f64::INFINITY,
            Constraint::Levels { allowed, domain } => {
                allowed.len() as u32 >= *domain && allowed.iter().enumerate().all(|(i, &l)| l == i as u32)
            }
        }
    }

    pub fn contains(&self, value: Value) -> bool {
        match (self, value) {
            (Constraint::Interval { lower, upper }, Value::Num(x)) => *lower < x && x <= *upper,
            (Constraint::Levels { allowed, .. }, Value::Level(l)) => allowed.binary_search(&l).is_ok(),
            _ => false,
        }
    }

    /// Intersection; `None` when the kinds differ.
    pub fn intersect(&self, other: &Constraint) -> Option<Constraint> {
        match (self, other) {
            (Constraint::Interval { lower: a, upper: b }, Constraint::Interval { lower: c, upper: d }) => {
                Some(Constraint::Interval { lower: a.max(*c), upper: b.min(*d) })
            }
            (Constraint::Levels { allowed: a, domain }, Constraint::Levels { allowed: b, domain: e }) => {
                let allowed = a.iter().copied().filter(|l| b.binary_search(l).is_ok()).collect();
                Some(Constraint::Levels { allowed, domain: (*domain).max(*e) })
            }
            _ => None,
        }
    }

    /// True when every value accepted by `self` is accepted by `other`.
    pub fn implies(&self, other: &Constraint) -> bool {
        match (self, other) {
            (Constraint::Interval { lower: a, upper: b }, Constraint::Interval { lower: c, upper: d }) => {
                self.is_empty() || (a >= c && b <= d)
            }
            (Constraint::Levels { allowed: a, .. }, Constraint::Levels { allowed: b, .. }) => {
                a.iter().all(|l| b.binary_search(l).is_ok())
            }
            _ => false,
        }
    }

    /// The union when it is expressible as a single constraint.
    pub fn union(&self, other: &Constraint) -> Option<Constraint> {
        match (self, other) {
            (Constraint::Interval { lower: a, upper: b }, Constraint::Interval { lower: c, upper: d }) => {
                // (a, b] and (c, d] form one interval when they touch or overlap.
                if a.max(*c) <= b.min(*d) {
                    Some(Constraint::Interval { lower: a.min(*c), upper: b.max(*d) })
                } else {
                    None
                }
            }
            (Constraint::Levels { allowed: a, domain }, Constraint::Levels { allowed: b, domain: e }) => {
                let mut allowed: Vec<u32> = a.iter().chain(b).copied().collect();
                allowed.sort_unstable();
                allowed.dedup();
                Some(Constraint::Levels { allowed, domain: (*domain).max(*e) })
            }
            _ => None,
        }
    }

    /// Number of rendered comparisons.
    pub fn literal_count(&self) -> usize {
        match self {
            Constraint::Interval { lower, upper } => usize::from(lower.is_finite()) + usize::from(upper.is_finite()),
            Constraint::Levels { .. } => 1,
        }
    }

    fn cmp_total(&self, other: &Constraint) -> Ordering {
        match (self, other) {
            (Constraint::Interval { lower: a, upper: b }, Constraint::Interval { lower: c, upper: d }) => {
                a.total_cmp(c).then(b.total_cmp(d))
            }
            (Constraint::Levels { allowed: a, .. }, Constraint::Levels { allowed: b, .. }) => a.cmp(b),
            (Constraint::Interval { .. }, Constraint::Levels { .. }) => Ordering::Less,
            (Constraint::Levels { .. }, Constraint::Interval { .. }) => Ordering::Greater,
        }
    }
}

impl Eq for Constraint {}

/// A single comparison on one feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub key: FeatureKey,
    pub constraint: Constraint,
}

impl Atom {
    pub fn le(key: FeatureKey, threshold: f64) -> Self {
        Atom { key, constraint: Constraint::le(threshold) }
    }

    pub fn gt(key: FeatureKey, threshold: f64) -> Self {
        Atom { key, constraint: Constraint::gt(threshold) }
    }

    pub fn levels(key: FeatureKey, allowed: Vec<u32>, domain: u32) -> Self {
        Atom { key, constraint: Constraint::levels(allowed, domain) }
    }
}

/// Conjunction of constraints, at most one per feature.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Conjunction {
    constraints: BTreeMap<FeatureKey, Constraint>,
}

impl Conjunction {
    /// The empty conjunction, which accepts every row.
    pub fn truth() -> Self {
        Self::default()
    }

    /// Builds a conjunction from atoms; `None` when the region is empty.
    pub fn from_atoms(atoms: impl IntoIterator<Item = Atom>) -> Option<Self> {
        let mut c = Self::truth();
        for atom in atoms {
            if !c.add(atom) {
                return None;
            }
        }
        Some(c)
    }

    /// Intersects `atom` into the conjunction. Returns false when the
    /// region became empty, leaving `self` unspecified.
    pub fn add(&mut self, atom: Atom) -> bool {
        let merged = match self.constraints.get(&atom.key) {
            Some(existing) => match existing.intersect(&atom.constraint) {
                Some(c) => c,
                None => return false,
            },
            None => atom.constraint,
        };
        if merged.is_empty() {
            return false;
        }
        if merged.is_full() {
            self.constraints.remove(&atom.key);
        } else {
            self.constraints.insert(atom.key, merged);
        }
        true
    }

    /// Intersection of two conjunctions; `None` when empty.
    pub fn and(&self, other: &Conjunction) -> Option<Conjunction> {
        let (mut out, small) = if self.constraints.len() >= other.constraints.len() {
            (self.clone(), other)
        } else {
            (other.clone(), self)
        };
        for (k, c) in &small.constraints {
            if !out.add(Atom { key: *k, constraint: c.clone() }) {
                return None;
            }
        }
        Some(out)
    }

    pub fn is_true(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn get(&self, key: &FeatureKey) -> Option<&Constraint> {
        self.constraints.get(key)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&FeatureKey, &Constraint)> {
        self.constraints.iter()
    }

    pub fn atoms(&self) -> Vec<Atom> {
        self.iter().map(|(k, c)| Atom { key: *k, constraint: c.clone() }).collect()
    }

    pub fn literal_count(&self) -> usize {
        self.constraints.values().map(Constraint::literal_count).sum()
    }

    /// True when the region of `self` lies inside the region of `other`.
    pub fn implies(&self, other: &Conjunction) -> bool {
        other.constraints.iter().all(|(k, c)| self.constraints.get(k).is_some_and(|mine| mine.implies(c)))
    }

    pub fn eval(&self, value: &mut impl FnMut(FeatureKey) -> Value) -> bool {
        self.constraints.iter().all(|(k, c)| c.contains(value(*k)))
    }

    pub fn to_expr(&self) -> Expr {
        Expr::and(self.atoms().into_iter().map(Expr::Atom).collect())
    }

    fn cmp_total(&self, other: &Conjunction) -> Ordering {
        let mut a = self.constraints.iter();
        let mut b = other.constraints.iter();
        loop {
            match (a.next(), b.next()) {
                (None, None) => return Ordering::Equal,
                (None, Some(_)) => return Ordering::Less,
                (Some(_), None) => return Ordering::Greater,
                (Some((ka, ca)), Some((kb, cb))) => {
                    let o = ka.cmp(kb).then_with(|| ca.cmp_total(cb));
                    if o != Ordering::Equal {
                        return o;
                    }
                }
            }
        }
    }
}

impl PartialOrd for Conjunction {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Conjunction {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_total(other)
    }
}

/// AND/OR expression over atoms.
#[derive(Clone, Debug, PartialEq)]
pub enum Expr {
    True,
    False,
    Atom(Atom),
    And(Vec<Expr>),
    Or(Vec<Expr>),
}

impl Expr {
    /// Conjunction of `parts` with constants folded.
    pub fn and(parts: Vec<Expr>) -> Expr {
        let mut kept = Vec::with_capacity(parts.len());
        for p in parts {
            match p {
                Expr::True => {}
                Expr::False => return Expr::False,
                Expr::And(inner) => kept.extend(inner),
                p => kept.push(p),
            }
        }
        match kept.len() {
            0 => Expr::True,
            1 => kept.pop().unwrap(),
            _ => Expr::And(kept),
        }
    }

    /// Disjunction of `parts` with constants folded.
    pub fn or(parts: Vec<Expr>) -> Expr {
        let mut kept = Vec::with_capacity(parts.len());
        for p in parts {
            match p {
                Expr::False => {}
                Expr::True => return Expr::True,
                Expr::Or(inner) => kept.extend(inner),
                p => kept.push(p),
            }
        }
        match kept.len() {
            0 => Expr::False,
            1 => kept.pop().unwrap(),
            _ => Expr::Or(kept),
        }
    }

    pub fn eval(&self, value: &mut impl FnMut(FeatureKey) -> Value) -> bool {
        match self {
            Expr::True => true,
            Expr::False => false,
            Expr::Atom(a) => a.constraint.contains(value(a.key)),
            Expr::And(parts) => parts.iter().all(|p| p.eval(value)),
            Expr::Or(parts) => parts.iter().any(|p| p.eval(value)),
        }
    }

    /// Number of atom occurrences.
    pub fn atom_count(&self) -> usize {
        match self {
            Expr::True | Expr::False => 0,
            Expr::Atom(_) => 1,
            Expr::And(p) | Expr::Or(p) => p.iter().map(Expr::atom_count).sum(),
        }
    }

    /// Every atom occurrence, in tree order.
    pub fn atoms(&self) -> Vec<&Atom> {
        fn walk<'a>(e: &'a Expr, out: &mut Vec<&'a Atom>) {
            match e {
                Expr::Atom(a) => out.push(a),
                Expr::And(p) | Expr::Or(p) => p.iter().for_each(|c| walk(c, out)),
                Expr::True | Expr::False => {}
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }
}

fn sort_dedup(terms: &mut Vec<Conjunction>) {
    terms.sort();
    terms.dedup();
}

/// Distributes `expr` into disjunctive normal form.
///
/// Empty partial terms are discarded as soon as they appear. The result is
/// sorted and free of duplicates. Fails when more than `max_terms` terms
/// survive deduplication and absorption at any stage.
pub fn to_dnf(expr: &Expr, max_terms: usize) -> Result<Vec<Conjunction>, RuleError> {
    let check = |mut terms: Vec<Conjunction>| -> Result<Vec<Conjunction>, RuleError> {
        sort_dedup(&mut terms);
        if terms.len() > max_terms {
            terms = absorb(terms);
            if terms.len() > max_terms {
                return Err(RuleError::Explosion { max_terms, partial: terms.len() });
            }
        }
        Ok(terms)
    };
    match expr {
        Expr::True => Ok(vec![Conjunction::truth()]),
        Expr::False => Ok(Vec::new()),
        Expr::Atom(a) => Ok(Conjunction::from_atoms([a.clone()]).into_iter().collect()),
        Expr::Or(parts) => {
            let mut out = Vec::new();
            for p in parts {
                out.extend(to_dnf(p, max_terms)?);
                if out.len() > max_terms {
                    out = check(out)?;
                }
            }
            check(out)
        }
        Expr::And(parts) => {
            let mut dnfs = parts.iter().map(|p| to_dnf(p, max_terms)).collect::<Result<Vec<_>, _>>()?;
            // Multiplying the smallest factors first keeps partial products small.
            dnfs.sort_by_key(Vec::len);
            let mut acc = vec![Conjunction::truth()];
            for factor in dnfs {
                let mut next = Vec::new();
                for a in &acc {
                    for b in &factor {
                        if let Some(c) = a.and(b) {
                            next.push(c);
                            if next.len() > 4 * max_terms {
                                next = check(next)?;
                            }
                        }
                    }
                }
                acc = check(next)?;
                if acc.is_empty() {
                    break;
                }
            }
            Ok(acc)
        }
    }
}

/// Drops every term whose region lies inside another term's region.
fn absorb(terms: Vec<Conjunction>) -> Vec<Conjunction> {
    let mut order: Vec<usize> = (0..terms.len()).collect();
    order.sort_by_key(|&i| terms[i].len());
    let mut kept: Vec<usize> = Vec::with_capacity(terms.len());
    for &i in &order {
        // Only a term with no more constraints can contain term i.
        if !kept.iter().any(|&j| terms[j].len() <= terms[i].len() && terms[i].implies(&terms[j])) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let mut keep = vec![false; terms.len()];
    for i in kept {
        keep[i] = true;
    }
    terms.into_iter().zip(keep).filter_map(|(t, k)| k.then_some(t)).collect()
}

/// Merges pairs of terms that agree everywhere except on one feature whose
/// two constraints unite into a single constraint. Returns true if
/// anything merged.
fn merge_once(terms: &mut Vec<Conjunction>) -> bool {
    let mut buckets: HashMap<(FeatureKey, Vec<u64>), Vec<usize>> = HashMap::new();
    for (i, t) in terms.iter().enumerate() {
        for key in t.constraints.keys() {
            buckets.entry((*key, signature_without(t, key))).or_default().push(i);
        }
    }
    let mut keys: Vec<_> = buckets.into_iter().filter(|(_, v)| v.len() > 1).collect();
    keys.sort_by(|a, b| a.1.cmp(&b.1));
    let mut used = vec![false; terms.len()];
    let mut merged = Vec::new();
    for ((key, _), members) in keys {
        for (x, &i) in members.iter().enumerate() {
            if used[i] {
                continue;
            }
            for &j in &members[x + 1..] {
                if used[j] || !same_except(&terms[i], &terms[j], &key) {
                    continue;
                }
                let (a, b) = (&terms[i].constraints[&key], &terms[j].constraints[&key]);
                if let Some(u) = a.union(b) {
                    let mut t = terms[i].clone();
                    if u.is_full() {
                        t.constraints.remove(&key);
                    } else {
                        t.constraints.insert(key, u);
                    }
                    used[i] = true;
                    used[j] = true;
                    merged.push(t);
                    break;
                }
            }
        }
    }
    if merged.is_empty() {
        return false;
    }
    let mut out: Vec<Conjunction> = terms.drain(..).zip(used).filter_map(|(t, u)| (!u).then_some(t)).collect();
    out.extend(merged);
    *terms = out;
    true
}

fn same_except(a: &Conjunction, b: &Conjunction, key: &FeatureKey) -> bool {
    a.len() == b.len() && a.constraints.iter().all(|(k, c)| k == key || b.constraints.get(k) == Some(c))
}

/// Hashable fingerprint of a term with one feature removed.
fn signature_without(t: &Conjunction, skip: &FeatureKey) -> Vec<u64> {
    let mut sig = Vec::new();
    for (k, c) in &t.constraints {
        if k == skip {
            continue;
        }
        match k {
            FeatureKey::Raw(i) => sig.extend([0, *i as u64]),
            FeatureKey::Encoded { layer, tree } => sig.extend([1, *layer as u64, *tree as u64]),
        }
        match c {
            Constraint::Interval { lower, upper } => sig.extend([2, lower.to_bits(), upper.to_bits()]),
            Constraint::Levels { allowed, .. } => {
                sig.push(3);
                sig.push(allowed.len() as u64);
                sig.extend(allowed.iter().map(|&l| l as u64));
            }
        }
    }
    sig
}

/// Simplifies a DNF without changing which rows it accepts.
///
/// Repeats until nothing changes: drop duplicates, drop terms contained in
/// another term, and merge pairs that differ in a single feature whose
/// constraints join into one (complementary halves vanish entirely). The
/// output is sorted, never has more terms or literals than the input, and
/// is a fixpoint of this function.
pub fn minimize_dnf(terms: &[Conjunction]) -> Vec<Conjunction> {
    let mut cur: Vec<Conjunction> = terms.to_vec();
    loop {
        sort_dedup(&mut cur);
        if cur.iter().any(Conjunction::is_true) {
            return vec![Conjunction::truth()];
        }
        let before = cur.len();
        cur = absorb(cur);
        let merged = merge_once(&mut cur);
        if !merged && cur.len() == before {
            sort_dedup(&mut cur);
            return cur;
        }
    }
}

pub fn literal_count(terms: &[Conjunction]) -> usize {
    terms.iter().map(Conjunction::literal_count).sum()
}

/// Evaluates a DNF: true when any term accepts the row.
pub fn eval_dnf(terms: &[Conjunction], value: &mut impl FnMut(FeatureKey) -> Value) -> bool {
    terms.iter().any(|t| t.eval(value))
}

// ---------------------------------------------------------------------------
// Tree paths

/// Path rule of a leaf, with each tree feature index mapped to a key.
pub fn extract_path_rule_with(
    tree: &CausalTree,
    leaf: usize,
    key_of: impl Fn(usize) -> FeatureKey,
) -> Result<Conjunction, TreeError> {
    let schema = tree.schema();
    let mut conj = Conjunction::truth();
    for (atom, branch) in tree.path_to_leaf(leaf)? {
        let key = key_of(atom.feature());
        let atom = match (atom, branch) {
            (SplitAtom::Numeric { threshold, .. }, Branch::Left) => Atom::le(key, *threshold),
            (SplitAtom::Numeric { threshold, .. }, Branch::Right) => Atom::gt(key, *threshold),
            (SplitAtom::Categorical { feature, left, .. }, branch) => {
                let domain = schema.feature(*feature).level_count().unwrap_or(0) as u32;
                let allowed = match branch {
                    Branch::Left => left.clone(),
                    Branch::Right => (0..domain).filter(|l| left.binary_search(l).is_err()).collect(),
                };
                Atom::levels(key, allowed, domain)
            }
        };
        // A reachable leaf always has a nonempty region.
        let nonempty = conj.add(atom);
        debug_assert!(nonempty);
    }
    Ok(conj)
}

/// Path rule of a leaf over the tree's own feature indices.
pub fn extract_path_rule(tree: &CausalTree, leaf: usize) -> Result<Conjunction, TreeError> {
    extract_path_rule_with(tree, leaf, FeatureKey::Raw)
}

/// Path rules of every leaf of `tree`, in leaf-id order.
pub fn tree_rules(tree: &CausalTree, key_of: impl Fn(usize) -> FeatureKey) -> Result<Vec<Conjunction>, TreeError> {
    (0..tree.leaf_count).map(|j| extract_path_rule_with(tree, j, &key_of)).collect()
}

// ---------------------------------------------------------------------------
// Expansion through a model

/// Replaces every encoded atom by the disjunction of the path rules of the
/// leaves it allows, recursively, until only raw atoms remain.
pub fn expand_rule(model: &CrfModel, conj: &Conjunction) -> Result<Expr, RuleError> {
    let mut memo = HashMap::new();
    expand_conj(model, conj, &mut memo)
}

type Memo = HashMap<(usize, usize, usize), Expr>;

fn expand_conj(model: &CrfModel, conj: &Conjunction, memo: &mut Memo) -> Result<Expr, RuleError> {
    let mut parts = Vec::with_capacity(conj.len());
    for (key, c) in conj.iter() {
        match (key, c) {
            (FeatureKey::Raw(_), _) => parts.push(Expr::Atom(Atom { key: *key, constraint: c.clone() })),
            (FeatureKey::Encoded { layer, tree }, Constraint::Levels { allowed, .. }) => {
                let mut alts = Vec::with_capacity(allowed.len());
                for &leaf in allowed {
                    alts.push(expand_leaf(model, *layer, *tree, leaf as usize, memo)?);
                }
                parts.push(Expr::or(alts));
            }
            (FeatureKey::Encoded { layer, tree }, Constraint::Interval { .. }) => {
                return Err(RuleError::Provenance(format!(
                    "interval constraint on encoded feature tree_{layer}_{tree}"
                )));
            }
        }
    }
    Ok(Expr::and(parts))
}

fn expand_leaf(model: &CrfModel, layer: usize, tree: usize, leaf: usize, memo: &mut Memo) -> Result<Expr, RuleError> {
    if let Some(e) = memo.get(&(layer, tree, leaf)) {
        return Ok(e.clone());
    }
    if model.layer_tree(layer, tree).is_none() {
        return Err(RuleError::Provenance(format!("no tree {tree} in layer {layer}")));
    }
    let conj = model.layer_rule(layer, tree, leaf)?;
    let e = expand_conj(model, &conj, memo)?;
    memo.insert((layer, tree, leaf), e.clone());
    Ok(e)
}

// ---------------------------------------------------------------------------
// Rendering

/// Resolves feature and level names for display.
pub struct Names<'a> {
    raw: &'a Schema,
}

impl<'a> Names<'a> {
    pub fn new(raw: &'a Schema) -> Self {
        Names { raw }
    }

    pub fn feature(&self, key: &FeatureKey) -> String {
        match key {
            FeatureKey::Raw(i) => self.raw.features.get(*i).map_or_else(|| format!("x{i}"), |f| f.name.clone()),
            FeatureKey::Encoded { layer, tree } => crate::crf::encoded_name(*layer, *tree),
        }
    }

    pub fn level(&self, key: &FeatureKey, code: u32) -> String {
        if let FeatureKey::Raw(i) = key {
            if let Some(FeatureKind::Categorical { levels }) = self.raw.features.get(*i).map(|f| &f.kind) {
                if let Some(l) = levels.get(code as usize) {
                    return l.clone();
                }
            }
        }
        code.to_string()
    }

    /// Rendered comparisons of one constraint, e.g. `x > 1` and `x ≤ 2`.
    pub fn literals(&self, key: &FeatureKey, c: &Constraint) -> Vec<String> {
        let name = self.feature(key);
        match c {
            Constraint::Interval { lower, upper } => {
                let mut out = Vec::new();
                if lower.is_finite() {
                    out.push(format!("{name} > {lower}"));
                }
                if upper.is_finite() {
                    out.push(format!("{name} ≤ {upper}"));
                }
                out
            }
            Constraint::Levels { allowed, .. } => {
                let labels: Vec<String> = allowed.iter().map(|&l| self.level(key, l)).collect();
                if labels.len() == 1 {
                    vec![format!("{name} = {}", labels[0])]
                } else {
                    vec![format!("{name} ∈ {{{}}}", labels.join(", "))]
                }
            }
        }
    }

    pub fn conjunction(&self, c: &Conjunction) -> String {
        if c.is_true() {
            return "TRUE".into();
        }
        c.iter().flat_map(|(k, v)| self.literals(k, v)).collect::<Vec<_>>().join(" ∧ ")
    }

    pub fn dnf(&self, terms: &[Conjunction]) -> String {
        match terms {
            [] => "FALSE".into(),
            [one] => self.conjunction(one),
            many => many.iter().map(|t| format!("({})", self.conjunction(t))).collect::<Vec<_>>().join(" ∨ "),
        }
    }
}

/// Formats `IF <dnf> THEN CATE = <value>`.
pub fn render_rule(names: &Names<'_>, terms: &[Conjunction], cate: f64) -> String {
    let mut s = String::from("IF ");
    s.push_str(&names.dnf(terms));
    let _ = write!(s, " THEN CATE = {}", format_cate(cate));
    s
}

fn format_cate(v: f64) -> String {
    let s = format!("{v:.4}");
    if s == "-0.0000" {
        "0.0000".into()
    } else {
        s
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub minimize: bool,
    pub top_k: Option<usize>,
    pub max_terms: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions { minimize: true, top_k: None, max_terms: DEFAULT_MAX_TERMS }
    }
}

/// DNF rule for one leaf of the final tree.
#[derive(Clone, Debug)]
pub struct DnfRule {
    pub leaf: usize,
    pub consequent: f64,
    /// Path rule of the leaf over the final tree's inputs.
    pub path: Conjunction,
    /// Rule terms; over raw features unless `expanded` is false.
    pub terms: Vec<Conjunction>,
    pub expanded: bool,
    pub terms_before: usize,
    pub literals_before: usize,
    pub error: Option<String>,
}

impl DnfRule {
    pub fn terms_after(&self) -> usize {
        self.terms.len()
    }

    pub fn literals_after(&self) -> usize {
        literal_count(&self.terms)
    }

    /// Whether row `i` satisfies the rule. Encoded features are looked up
    /// in `encodings` (one frame per layer).
    pub fn accepts(&self, raw: &Frame, encodings: &[Frame], i: usize) -> bool {
        eval_dnf(&self.terms, &mut |k| key_value(raw, encodings, k, i))
    }
}

/// Value of `key` for row `i`.
pub fn key_value(raw: &Frame, encodings: &[Frame], key: FeatureKey, i: usize) -> Value {
    match key {
        FeatureKey::Raw(f) => raw.values_at(i, f),
        FeatureKey::Encoded { layer, tree } => encodings[layer - 1].values_at(i, tree),
    }
}

/// Builds one rule per final-tree leaf, sorted by |CATE| descending
/// (ties by leaf id) and truncated to `top_k`.
pub fn rules_report(model: &CrfModel, opts: &ReportOptions) -> Result<Vec<DnfRule>, RuleError> {
    let leaves = model.final_ct.leaves();
    let mut out = Vec::with_capacity(leaves.len());
    for leaf in leaves {
        let path = model.final_rule(leaf.id)?;
        let expanded = expand_rule(model, &path).and_then(|e| to_dnf(&e, opts.max_terms));
        let rule = match expanded {
            Ok(terms) => {
                let (tb, lb) = (terms.len(), literal_count(&terms));
                let terms = if opts.minimize { minimize_dnf(&terms) } else { terms };
                DnfRule {
                    leaf: leaf.id,
                    consequent: leaf.tau_hat,
                    path,
                    terms,
                    expanded: true,
                    terms_before: tb,
                    literals_before: lb,
                    error: None,
                }
            }
            Err(RuleError::Explosion { max_terms, partial }) => {
                let terms = vec![path.clone()];
                DnfRule {
                    leaf: leaf.id,
                    consequent: leaf.tau_hat,
                    terms_before: 1,
                    literals_before: path.literal_count(),
                    path,
                    terms,
                    expanded: false,
                    error: Some(RuleError::Explosion { max_terms, partial }.to_string()),
                }
            }
            Err(e) => return Err(e),
        };
        out.push(rule);
    }
    out.sort_by(|a, b| b.consequent.abs().total_cmp(&a.consequent.abs()).then(a.leaf.cmp(&b.leaf)));
    if let Some(k) = opts.top_k {
        out.truncate(k);
    }
    Ok(out)
}

/// Plain-text report, one rule per line.
pub fn render_report(model: &CrfModel, rules: &[DnfRule]) -> String {
    let names = Names::new(&model.raw_schema);
    let mut s = String::new();
    for r in rules {
        let _ = writeln!(s, "{}", render_rule(&names, &r.terms, r.consequent));
        if let Some(err) = &r.error {
            let _ = writeln!(s, "  # leaf {}: {err}; shown over encoded features", r.leaf);
        }
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LiteralRecord {
    pub feature: String,
    pub key: FeatureKey,
    /// `le`, `gt` or `in`.
    pub op: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub domain: Option<u32>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RuleRecord {
    pub leaf: usize,
    pub cate: f64,
    pub text: String,
    pub expanded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub terms: Vec<Vec<LiteralRecord>>,
    pub terms_before: usize,
    pub literals_before: usize,
    pub terms_after: usize,
    pub literals_after: usize,
}

impl RuleRecord {
    /// Rebuilds the rule terms.
    pub fn conjunctions(&self) -> Vec<Conjunction> {
        self.terms
            .iter()
            .filter_map(|lits| {
                Conjunction::from_atoms(lits.iter().map(|l| {
                    let constraint = match l.op.as_str() {
                        "le" => Constraint::le(l.threshold.unwrap_or(f64::NAN)),
                        "gt" => Constraint::gt(l.threshold.unwrap_or(f64::NAN)),
                        _ => Constraint::levels(l.levels.clone().unwrap_or_default(), l.domain.unwrap_or(0)),
                    };
                    Atom { key: l.key, constraint }
                }))
            })
            .collect()
    }
}

fn literal_records(names: &Names<'_>, c: &Conjunction) -> Vec<LiteralRecord> {
    let mut out = Vec::new();
    for (k, v) in c.iter() {
        let feature = names.feature(k);
        match v {
            Constraint::Interval { lower, upper } => {
                if lower.is_finite() {
                    out.push(LiteralRecord {
                        feature: feature.clone(),
                        key: *k,
                        op: "gt".into(),
                        threshold: Some(*lower),
                        levels: None,
                        domain: None,
                    });
                }
                if upper.is_finite() {
                    out.push(LiteralRecord {
                        feature,
                        key: *k,
                        op: "le".into(),
                        threshold: Some(*upper),
                        levels: None,
                        domain: None,
                    });
                }
            }
            Constraint::Levels { allowed, domain } => out.push(LiteralRecord {
                feature,
                key: *k,
                op: "in".into(),
                threshold: None,
                levels: Some(allowed.clone()),
                domain: Some(*domain),
            }),
        }
    }
    out
}

/// Machine-readable records for a report.
pub fn report_records(model: &CrfModel, rules: &[DnfRule]) -> Vec<RuleRecord> {
    let names = Names::new(&model.raw_schema);
    rules
        .iter()
        .map(|r| RuleRecord {
            leaf: r.leaf,
            cate: r.consequent,
            text: render_rule(&names, &r.terms, r.consequent),
            expanded: r.expanded,
            error: r.error.clone(),
            terms: r.terms.iter().map(|t| literal_records(&names, t)).collect(),
            terms_before: r.terms_before,
            literals_before: r.literals_before,
            terms_after: r.terms_after(),
            literals_after: r.literals_after(),
        })
        .collect()
}
