//! Extremely randomized trees for vector regression and classification.
//!
//! Every tree sees the full training sample. At a node, up to `k_features`
//! usable features are drawn at random, each gets one random cut point, and
//! the cut with the lowest child impurity wins. Regression trees minimize the
//! summed per-output squared error; classification trees minimize Gini.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::derive_seed;
use crate::Scalar;

pub const MODEL_MAGIC: &[u8; 4] = b"LPET";
pub const MODEL_VERSION: u16 = 1;
/// Default lower bound on predicted class probabilities.
pub const PROBABILITY_FLOOR: f64 = 1e-3;

const LEAF: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum TreeError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("no training rows")]
    Empty,
    #[error("invalid parameters: {0}")]
    Params(String),
    #[error("model format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ── Row storage ─────────────────────────────────────────────────────────

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix<F> {
    data: Vec<F>,
    cols: usize,
}

impl<F: Scalar> Matrix<F> {
    pub fn new(cols: usize) -> Self {
        Matrix { data: Vec::new(), cols }
    }

    pub fn with_capacity(cols: usize, rows: usize) -> Self {
        Matrix {
            data: Vec::with_capacity(cols * rows),
            cols,
        }
    }

    pub fn from_vec(data: Vec<F>, cols: usize) -> Result<Self, TreeError> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(TreeError::Dimension(format!(
                "{} values do not fill rows of width {cols}",
                data.len()
            )));
        }
        Ok(Matrix { data, cols })
    }

    pub fn from_rows<R: AsRef<[F]>>(rows: &[R]) -> Result<Self, TreeError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut m = Matrix::with_capacity(cols, rows.len());
        for r in rows {
            m.push_row(r.as_ref())?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: &[F]) -> Result<(), TreeError> {
        if row.len() != self.cols {
            return Err(TreeError::Dimension(format!(
                "row has {} values, expected {}",
                row.len(),
                self.cols
            )));
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> F {
        self.data[i * self.cols + j]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[F]> {
        self.data.chunks_exact(self.cols.max(1))
    }
}

// ── Parameters and model ────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TreeParams {
    pub n_trees: usize,
    /// Features examined per split; `None` means `ceil(sqrt(d))`.
    pub k_features: Option<usize>,
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
    pub seed: u64,
}

impl Default for TreeParams {
    fn default() -> Self {
        TreeParams {
            n_trees: 50,
            k_features: None,
            min_samples_leaf: 20,
            max_depth: None,
            seed: 0,
        }
    }
}

impl TreeParams {
    pub fn with_seed(&self, seed: u64) -> Self {
        TreeParams { seed, ..self.clone() }
    }

    fn resolve_k(&self, dim: usize) -> Result<usize, TreeError> {
        if self.n_trees == 0 {
            return Err(TreeError::Params("n_trees must be at least 1".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(TreeError::Params("min_samples_leaf must be at least 1".into()));
        }
        if dim == 0 {
            return Err(TreeError::Dimension("zero input features".into()));
        }
        let k = self.k_features.unwrap_or_else(|| (dim as f64).sqrt().ceil() as usize);
        if k == 0 || k > dim {
            return Err(TreeError::Params(format!("k_features {k} not in 1..={dim}")));
        }
        Ok(k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TreeKind {
    Regression,
    Classification { n_classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Node<F> {
    /// Split feature, or [`LEAF`].
    feature: u32,
    threshold: F,
    /// Left child, or leaf index for a leaf.
    left: u32,
    right: u32,
}

#[derive(Debug, Clone, PartialEq)]
struct Tree<F> {
    nodes: Vec<Node<F>>,
    /// `output_dim` values per leaf.
    leaf_values: Vec<F>,
}

impl<F: Scalar> Tree<F> {
    fn leaf<'a>(&'a self, x: &[F], output_dim: usize) -> &'a [F] {
        let mut i = 0usize;
        loop {
            let n = &self.nodes[i];
            if n.feature == LEAF {
                let at = n.left as usize * output_dim;
                return &self.leaf_values[at..at + output_dim];
            }
            i = if x[n.feature as usize] < n.threshold {
                n.left as usize
            } else {
                n.right as usize
            };
        }
    }
}

/// A fitted forest.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<F> {
    kind: TreeKind,
    params: TreeParams,
    input_dim: usize,
    output_dim: usize,
    trees: Vec<Tree<F>>,
    importances: Vec<F>,
}

// ── Fitting ─────────────────────────────────────────────────────────────

enum Targets<'a, F> {
    Regression(&'a Matrix<F>),
    Classes { labels: &'a [usize], n_classes: usize },
}

impl<F: Scalar> Targets<'_, F> {
    fn output_dim(&self) -> usize {
        match self {
            Targets::Regression(y) => y.cols(),
            Targets::Classes { n_classes, .. } => *n_classes,
        }
    }

    fn is_pure(&self, idx: &[u32]) -> bool {
        let first = idx[0] as usize;
        match self {
            Targets::Regression(y) => idx.iter().all(|&i| y.row(i as usize) == y.row(first)),
            Targets::Classes { labels, .. } => idx.iter().all(|&i| labels[i as usize] == labels[first]),
        }
    }

    /// Impurity of a set of rows, scaled by its size.
    fn impurity(&self, idx: &[u32], acc: &mut Acc) -> f64 {
        acc.clear();
        for &i in idx {
            self.add(i as usize, acc);
        }
        acc.impurity()
    }

    fn add(&self, i: usize, acc: &mut Acc) {
        acc.n += 1.0;
        match self {
            Targets::Regression(y) => {
                for (o, v) in y.row(i).iter().enumerate() {
                    let v = v.as_f64();
                    acc.sum[o] += v;
                    acc.sq[o] += v * v;
                }
            }
            Targets::Classes { labels, .. } => acc.sum[labels[i]] += 1.0,
        }
    }

    fn leaf_payload(&self, idx: &[u32], out: &mut Vec<F>) {
        let n = idx.len() as f64;
        match self {
            Targets::Regression(y) => {
                for o in 0..y.cols() {
                    let mean = idx.iter().map(|&i| y.get(i as usize, o).as_f64()).sum::<f64>() / n;
                    out.push(F::of(mean));
                }
            }
            Targets::Classes { labels, n_classes } => {
                let mut counts = vec![0usize; *n_classes];
                for &i in idx {
                    counts[labels[i as usize]] += 1;
                }
                out.extend(counts.iter().map(|&c| F::of(c as f64 / n)));
            }
        }
    }
}

/// Running sums for a set of rows.
#[derive(Clone)]
struct Acc {
    regression: bool,
    n: f64,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Acc {
    fn new(regression: bool, dim: usize) -> Self {
        Acc {
            regression,
            n: 0.0,
            sum: vec![0.0; dim],
            sq: vec![0.0; dim],
        }
    }

    fn clear(&mut self) {
        self.n = 0.0;
        self.sum.iter_mut().for_each(|v| *v = 0.0);
        self.sq.iter_mut().for_each(|v| *v = 0.0);
    }

    fn impurity(&self) -> f64 {
        if self.n == 0.0 {
            return 0.0;
        }
        if self.regression {
            self.sum
                .iter()
                .zip(&self.sq)
                .map(|(s, q)| (q - s * s / self.n).max(0.0))
                .sum()
        } else {
            self.n - self.sum.iter().map(|c| c * c).sum::<f64>() / self.n
        }
    }
}

struct Builder<'a, F> {
    x: &'a Matrix<F>,
    y: &'a Targets<'a, F>,
    k: usize,
    min_leaf: usize,
    max_depth: usize,
}

impl<F: Scalar> Builder<'_, F> {
    fn build(&self, order: &[u32], rng: &mut ChaCha8Rng, importances: &mut [f64]) -> Tree<F> {
        let dim = self.x.cols();
        let out_dim = self.y.output_dim();
        let regression = matches!(self.y, Targets::Regression(_));
        let mut idx = order.to_vec();
        let mut scratch = Vec::with_capacity(idx.len());
        let mut values: Vec<F> = Vec::with_capacity(idx.len());
        let mut features: Vec<usize> = (0..dim).collect();
        let mut parent = Acc::new(regression, out_dim);
        let mut left = Acc::new(regression, out_dim);
        let mut tree = Tree {
            nodes: vec![Node { feature: LEAF, threshold: F::zero(), left: 0, right: 0 }],
            leaf_values: Vec::new(),
        };
        let mut n_leaves = 0u32;
        let mut stack = vec![(0usize, 0usize, idx.len(), 0usize)];

        while let Some((slot, start, end, depth)) = stack.pop() {
            let rows = &idx[start..end];
            let n = rows.len();
            let mut best: Option<(f64, usize, F)> = None;
            if n >= 2 * self.min_leaf && depth < self.max_depth && !self.y.is_pure(rows) {
                let parent_imp = self.y.impurity(rows, &mut parent);
                let mut usable = 0;
                for j in 0..dim {
                    let pick = rng.gen_range(j..dim);
                    features.swap(j, pick);
                    let f = features[j];
                    values.clear();
                    values.extend(rows.iter().map(|&i| self.x.get(i as usize, f)));
                    let lo = *values.select_nth_unstable_by(self.min_leaf - 1, |a, b| a.partial_cmp(b).unwrap()).1;
                    let hi = *values
                        .select_nth_unstable_by(n - self.min_leaf, |a, b| a.partial_cmp(b).unwrap())
                        .1;
                    if !(lo < hi) {
                        continue;
                    }
                    let u = 1.0 - rng.gen::<f64>();
                    let mut cut = F::of(lo.as_f64() + u * (hi.as_f64() - lo.as_f64()));
                    if !(cut > lo && cut <= hi) {
                        cut = hi;
                    }
                    left.clear();
                    for &i in rows {
                        if self.x.get(i as usize, f) < cut {
                            self.y.add(i as usize, &mut left);
                        }
                    }
                    let score = left.impurity() + right_impurity(&parent, &left);
                    if best.map_or(true, |(s, _, _)| score < s) {
                        best = Some((score, f, cut));
                    }
                    usable += 1;
                    if usable == self.k {
                        break;
                    }
                }
                if let Some((score, f, _)) = best {
                    importances[f] += (parent_imp - score).max(0.0);
                }
            }
            match best {
                Some((_, f, cut)) => {
                    // stable partition keeps the canonical row order in both children
                    scratch.clear();
                    let mut w = start;
                    for r in start..end {
                        let i = idx[r];
                        if self.x.get(i as usize, f) < cut {
                            idx[w] = i;
                            w += 1;
                        } else {
                            scratch.push(i);
                        }
                    }
                    idx[w..end].copy_from_slice(&scratch);
                    let l = tree.nodes.len();
                    let placeholder = tree.nodes[0];
                    tree.nodes.push(placeholder);
                    tree.nodes.push(placeholder);
                    tree.nodes[slot] = Node { feature: f as u32, threshold: cut, left: l as u32, right: l as u32 + 1 };
                    stack.push((l + 1, w, end, depth + 1));
                    stack.push((l, start, w, depth + 1));
                }
                None => {
                    self.y.leaf_payload(rows, &mut tree.leaf_values);
                    tree.nodes[slot] = Node { feature: LEAF, threshold: F::zero(), left: n_leaves, right: 0 };
                    n_leaves += 1;
                }
            }
        }
        tree
    }
}

fn right_impurity(parent: &Acc, left: &Acc) -> f64 {
    let n = parent.n - left.n;
    if n <= 0.0 {
        return 0.0;
    }
    if parent.regression {
        parent
            .sum
            .iter()
            .zip(&left.sum)
            .zip(parent.sq.iter().zip(&left.sq))
            .map(|((ps, ls), (pq, lq))| {
                let s = ps - ls;
                ((pq - lq) - s * s / n).max(0.0)
            })
            .sum()
    } else {
        n - parent
            .sum
            .iter()
            .zip(&left.sum)
            .map(|(p, l)| (p - l) * (p - l))
            .sum::<f64>()
            / n
    }
}

fn cmp_rows<F: Scalar>(a: &[F], b: &[F]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.as_f64().total_cmp(&y.as_f64()) {
            std::cmp::Ordering::Equal => continue,
            o => return o,
        }
    }
    std::cmp::Ordering::Equal
}

fn fit<F: Scalar>(x: &Matrix<F>, y: Targets<'_, F>, params: &TreeParams) -> Result<Ensemble<F>, TreeError> {
    let n = x.rows();
    if n == 0 {
        return Err(TreeError::Empty);
    }
    if n > u32::MAX as usize {
        return Err(TreeError::Dimension("too many rows".into()));
    }
    let k = params.resolve_k(x.cols())?;
    if x.as_slice().iter().any(|v| v.is_nan()) {
        return Err(TreeError::Dimension("NaN in features".into()));
    }
    // A content-defined row order makes the fit independent of input order.
    let mut order: Vec<u32> = (0..n as u32).collect();
    match &y {
        Targets::Regression(t) => order.sort_by(|&a, &b| {
            cmp_rows(x.row(a as usize), x.row(b as usize))
                .then_with(|| cmp_rows(t.row(a as usize), t.row(b as usize)))
        }),
        Targets::Classes { labels, .. } => order.sort_by(|&a, &b| {
            cmp_rows(x.row(a as usize), x.row(b as usize)).then(labels[a as usize].cmp(&labels[b as usize]))
        }),
    }
    let builder = Builder {
        x,
        y: &y,
        k,
        min_leaf: params.min_samples_leaf,
        max_depth: params.max_depth.unwrap_or(usize::MAX),
    };
    let grown: Vec<(Tree<F>, Vec<f64>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.seed, t as u64));
            let mut imp = vec![0.0; x.cols()];
            let tree = builder.build(&order, &mut rng, &mut imp);
            (tree, imp)
        })
        .collect();
    let mut total = vec![0.0; x.cols()];
    for (_, imp) in &grown {
        for (a, b) in total.iter_mut().zip(imp) {
            *a += b;
        }
    }
    let sum: f64 = total.iter().sum();
    let importances = total
        .iter()
        .map(|v| if sum > 0.0 { F::of(v / sum) } else { F::zero() })
        .collect();
    let kind = match y {
        Targets::Regression(_) => TreeKind::Regression,
        Targets::Classes { n_classes, .. } => TreeKind::Classification { n_classes },
    };
    Ok(Ensemble {
        kind,
        params: params.clone(),
        input_dim: x.cols(),
        output_dim: builder.y.output_dim(),
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        importances,
    })
}

/// Fits a multi-output regression forest.
pub fn fit_regressor<F: Scalar>(x: &Matrix<F>, y: &Matrix<F>, params: &TreeParams) -> Result<Ensemble<F>, TreeError> {
    if x.rows() != y.rows() {
        return Err(TreeError::Dimension(format!("{} feature rows, {} target rows", x.rows(), y.rows())));
    }
    if y.cols() == 0 {
        return Err(TreeError::Dimension("zero outputs".into()));
    }
    if y.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(TreeError::Dimension("non-finite target".into()));
    }
    fit(x, Targets::Regression(y), params)
}

/// Fits a classification forest over labels `0..n_classes`.
pub fn fit_classifier<F: Scalar>(
    x: &Matrix<F>,
    labels: &[usize],
    n_classes: usize,
    params: &TreeParams,
) -> Result<Ensemble<F>, TreeError> {
    if x.rows() != labels.len() {
        return Err(TreeError::Dimension(format!("{} feature rows, {} labels", x.rows(), labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(TreeError::Dimension(format!("label {bad} with {n_classes} classes")));
    }
    fit(x, Targets::Classes { labels, n_classes }, params)
}

// ── Prediction ──────────────────────────────────────────────────────────

/// Raises entries below `p_min` to `p_min`, taking the deficit from the
/// excess of the other entries in proportion to that excess.
pub fn floor_probabilities<F: Scalar>(p: &mut [F], p_min: F) {
    let deficit: F = p.iter().filter(|&&v| v < p_min).map(|&v| p_min - v).sum();
    if deficit <= F::zero() {
        return;
    }
    let excess: F = p.iter().filter(|&&v| v > p_min).map(|&v| v - p_min).sum();
    let scale = if excess > F::zero() { (excess - deficit) / excess } else { F::zero() };
    for v in p.iter_mut() {
        *v = if *v > p_min { p_min + (*v - p_min) * scale } else { p_min };
    }
}

impl<F: Scalar> Ensemble<F> {
    pub fn kind(&self) -> TreeKind {
        self.kind
    }

    pub fn params(&self) -> &TreeParams {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    fn check(&self, x: &[F]) -> Result<(), TreeError> {
        if x.len() != self.input_dim {
            return Err(TreeError::Dimension(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Mean of the per-tree leaf payloads, written to `out`.
    pub fn predict_into(&self, x: &[F], out: &mut [F]) -> Result<(), TreeError> {
        self.check(x)?;
        if out.len() != self.output_dim {
            return Err(TreeError::Dimension("output buffer width".into()));
        }
        let mut acc = [0.0f64; 32];
        let mut heap;
        let acc: &mut [f64] = if self.output_dim <= 32 {
            &mut acc[..self.output_dim]
        } else {
            heap = vec![0.0; self.output_dim];
            &mut heap
        };
        for tree in &self.trees {
            for (a, v) in acc.iter_mut().zip(tree.leaf(x, self.output_dim)) {
                *a += v.as_f64();
            }
        }
        let n = self.trees.len() as f64;
        for (o, a) in out.iter_mut().zip(acc.iter()) {
            *o = F::of(a / n);
        }
        Ok(())
    }

    pub fn predict(&self, x: &[F]) -> Result<Vec<F>, TreeError> {
        let mut out = vec![F::zero(); self.output_dim];
        self.predict_into(x, &mut out)?;
        Ok(out)
    }

    /// Predictions for every row, in parallel.
    pub fn predict_matrix(&self, x: &Matrix<F>) -> Result<Matrix<F>, TreeError> {
        if x.cols() != self.input_dim {
            return Err(TreeError::Dimension(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.input_dim
            )));
        }
        let mut data = vec![F::zero(); x.rows() * self.output_dim];
        data.par_chunks_mut(self.output_dim)
            .zip(x.as_slice().par_chunks(self.input_dim))
            .try_for_each(|(out, row)| self.predict_into(row, out))?;
        Matrix::from_vec(data, self.output_dim)
    }

    /// Averaged leaf class frequencies, without flooring.
    pub fn predict_proba_raw(&self, x: &[F]) -> Result<Vec<F>, TreeError> {
        if !matches!(self.kind, TreeKind::Classification { .. }) {
            return Err(TreeError::Params("probabilities need a classifier".into()));
        }
        self.predict(x)
    }

    /// Class probabilities floored at [`PROBABILITY_FLOOR`].
    pub fn predict_proba(&self, x: &[F]) -> Result<Vec<F>, TreeError> {
        self.predict_proba_floored(x, F::of(PROBABILITY_FLOOR))
    }

    pub fn predict_proba_floored(&self, x: &[F], p_min: F) -> Result<Vec<F>, TreeError> {
        let mut p = self.predict_proba_raw(x)?;
        floor_probabilities(&mut p, p_min);
        Ok(p)
    }

    /// Most probable class; ties go to the lowest label.
    pub fn predict_class(&self, x: &[F]) -> Result<usize, TreeError> {
        let p = self.predict_proba_raw(x)?;
        Ok(argmax(&p))
    }

    /// Normalized impurity decrease per feature; all zero if no tree split.
    pub fn feature_importances(&self) -> &[F] {
        &self.importances
    }

    pub fn importances_json(&self, names: &[String]) -> Result<serde_json::Value, TreeError> {
        if names.len() != self.input_dim {
            return Err(TreeError::Dimension("feature name count".into()));
        }
        let map: serde_json::Map<String, serde_json::Value> = names
            .iter()
            .zip(&self.importances)
            .map(|(n, v)| (n.clone(), serde_json::json!(v.as_f64())))
            .collect();
        Ok(serde_json::Value::Object(map))
    }

    // ── Serialization ───────────────────────────────────────────────────

    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.push(F::WIDTH);
        let (kind, classes) = match self.kind {
            TreeKind::Regression => (0u8, 0u64),
            TreeKind::Classification { n_classes } => (1, n_classes as u64),
        };
        out.push(kind);
        for v in [
            classes,
            self.input_dim as u64,
            self.output_dim as u64,
            self.params.n_trees as u64,
            self.params.k_features.map_or(0, |k| k as u64),
            self.params.min_samples_leaf as u64,
            self.params.max_depth.map_or(0, |d| d as u64 + 1),
            self.params.seed,
            self.trees.len() as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.importances {
            v.write_le(out);
        }
        for t in &self.trees {
            out.extend_from_slice(&(t.nodes.len() as u64).to_le_bytes());
            for n in &t.nodes {
                out.extend_from_slice(&n.feature.to_le_bytes());
                n.threshold.write_le(out);
                out.extend_from_slice(&n.left.to_le_bytes());
                out.extend_from_slice(&n.right.to_le_bytes());
            }
            out.extend_from_slice(&(t.leaf_values.len() as u64).to_le_bytes());
            for v in &t.leaf_values {
                v.write_le(out);
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_bytes(&mut out);
        out
    }

    /// Reads one model from the front of `bytes`; returns it and the bytes consumed.
    pub fn read_bytes(bytes: &[u8]) -> Result<(Self, usize), TreeError> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(TreeError::Format("not a tree ensemble".into()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().unwrap());
        if version != MODEL_VERSION {
            return Err(TreeError::Format(format!("model version {version}, expected {MODEL_VERSION}")));
        }
        let width = r.take(1)?[0];
        if width != F::WIDTH {
            return Err(TreeError::Format(format!("model stores {width}-byte scalars, expected {}", F::WIDTH)));
        }
        let kind = r.take(1)?[0];
        let mut h = [0u64; 9];
        for v in h.iter_mut() {
            *v = r.u64()?;
        }
        let [classes, input_dim, output_dim, n_trees, k, msl, depth, seed, count] = h;
        let kind = match kind {
            0 => TreeKind::Regression,
            1 => TreeKind::Classification { n_classes: classes as usize },
            other => return Err(TreeError::Format(format!("unknown model kind {other}"))),
        };
        let params = TreeParams {
            n_trees: n_trees as usize,
            k_features: (k > 0).then_some(k as usize),
            min_samples_leaf: msl as usize,
            max_depth: (depth > 0).then(|| depth as usize - 1),
            seed,
        };
        let (input_dim, output_dim) = (input_dim as usize, output_dim as usize);
        let importances = (0..input_dim).map(|_| r.scalar()).collect::<Result<Vec<F>, _>>()?;
        let mut trees = Vec::new();
        for _ in 0..count {
            let n_nodes = r.u64()? as usize;
            let mut nodes = Vec::with_capacity(n_nodes.min(bytes.len()));
            for _ in 0..n_nodes {
                let feature = r.u32()?;
                let threshold = r.scalar()?;
                let left = r.u32()?;
                let right = r.u32()?;
                nodes.push(Node { feature, threshold, left, right });
            }
            let n_values = r.u64()? as usize;
            let leaf_values = (0..n_values).map(|_| r.scalar()).collect::<Result<Vec<F>, _>>()?;
            let n_leaves = leaf_values.len() / output_dim.max(1);
            for n in &nodes {
                let ok = if n.feature == LEAF {
                    (n.left as usize) < n_leaves
                } else {
                    (n.feature as usize) < input_dim && (n.left as usize) < n_nodes && (n.right as usize) < n_nodes
                };
                if !ok {
                    return Err(TreeError::Format("corrupt tree node".into()));
                }
            }
            if nodes.is_empty() {
                return Err(TreeError::Format("empty tree".into()));
            }
            trees.push(Tree { nodes, leaf_values });
        }
        if trees.is_empty() {
            return Err(TreeError::Format("no trees".into()));
        }
        let model = Ensemble { kind, params, input_dim, output_dim, trees, importances };
        Ok((model, r.pos))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TreeError> {
        let (model, used) = Self::read_bytes(bytes)?;
        if used != bytes.len() {
            return Err(TreeError::Format("trailing bytes after model".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), TreeError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TreeError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub fn argmax<F: Scalar>(p: &[F]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TreeError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| TreeError::Format("unexpected end of model".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, TreeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, TreeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn scalar<F: Scalar>(&mut self) -> Result<F, TreeError> {
        Ok(F::read_le(self.take(F::WIDTH as usize)?))
    }
}

/// Shuffles `0..n` with a seeded stream; used for train/test splits in tests and tools.
pub fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut v: Vec<usize> = (0..n).collect();
    v.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn line(n: usize, seed: u64) -> (Matrix<f64>, Matrix<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let x = Matrix::from_vec(xs.clone(), 1).unwrap();
        let y = Matrix::from_vec(xs.iter().map(|v| 3.0 * v).collect(), 1).unwrap();
        (x, y)
    }

    #[test]
    fn constant_target() {
        let (x, _) = line(100, 1);
        let y = Matrix::from_vec([1.5, -2.0].repeat(100), 2).unwrap();
        let m = fit_regressor(&x, &y, &TreeParams { n_trees: 5, ..Default::default() }).unwrap();
        assert_eq!(m.predict(&[0.3]).unwrap(), vec![1.5, -2.0]);
        assert_eq!(m.predict(&[9.0]).unwrap(), vec![1.5, -2.0]);
        assert!(m.feature_importances().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_row() {
        let x = Matrix::from_vec(vec![1.0, 2.0], 2).unwrap();
        let y = Matrix::from_vec(vec![4.0, 5.0, 6.0], 3).unwrap();
        let m = fit_regressor(&x, &y, &TreeParams::default()).unwrap();
        assert_eq!(m.predict(&[0.0, 0.0]).unwrap(), vec![4.0, 5.0, 6.0]);
        let c = fit_classifier(&x, &[1], 2, &TreeParams::default()).unwrap();
        assert_eq!(c.predict_proba_raw(&[0.0, 0.0]).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn linear_fit_quality() {
        let (x, y) = line(1000, 2);
        let params = TreeParams { n_trees: 100, min_samples_leaf: 1, ..Default::default() };
        let m = fit_regressor(&x, &y, &params).unwrap();
        let (xt, yt) = line(500, 3);
        let pred = m.predict_matrix(&xt).unwrap();
        let n = yt.rows() as f64;
        let mse: f64 = (0..yt.rows()).map(|i| (pred.get(i, 0) - yt.get(i, 0)).powi(2)).sum::<f64>() / n;
        let mean = yt.as_slice().iter().sum::<f64>() / n;
        let var = yt.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mse < 0.01 * var, "mse {mse} var {var}");
    }

    fn blobs(n: usize, seed: u64) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut x = Matrix::new(2);
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -3.0 } else { 3.0 };
            x.push_row(&[centre + noise.sample(&mut rng), centre + noise.sample(&mut rng)]).unwrap();
            labels.push(c);
        }
        (x, labels)
    }

    #[test]
    fn separable_blobs() {
        let (x, labels) = blobs(200, 4);
        let m = fit_classifier(&x, &labels, 2, &TreeParams { min_samples_leaf: 5, ..Default::default() }).unwrap();
        let (xt, lt) = blobs(400, 5);
        let correct = (0..xt.rows()).filter(|&i| m.predict_class(xt.row(i)).unwrap() == lt[i]).count();
        assert!(correct as f64 / 400.0 > 0.95);
        let p = m.predict_proba(xt.row(0)).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn pure_classifier_with_floor() {
        let (x, _) = blobs(50, 6);
        let m = fit_classifier(&x, &[1; 50], 4, &TreeParams::default()).unwrap();
        let p = m.predict_proba(&[0.0, 0.0]).unwrap();
        assert_eq!(m.predict_proba_raw(&[0.0, 0.0]).unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
        assert!((p[1] - (1.0 - 3.0 * 1e-3)).abs() < 1e-12);
        assert!(p.iter().enumerate().all(|(i, v)| i == 1 || (*v - 1e-3).abs() < 1e-15));
    }

    fn leaf_tree(values: Vec<f64>) -> Tree<f64> {
        Tree {
            nodes: vec![Node { feature: LEAF, threshold: 0.0, left: 0, right: 0 }],
            leaf_values: values,
        }
    }

    #[test]
    fn averages_hand_built_trees() {
        let m = Ensemble {
            kind: TreeKind::Regression,
            params: TreeParams { n_trees: 2, ..Default::default() },
            input_dim: 1,
            output_dim: 4,
            trees: vec![leaf_tree(vec![1.0, 0.0, 0.0, 0.0]), leaf_tree(vec![0.0, 1.0, 0.0, 0.0])],
            importances: vec![0.0],
        };
        assert_eq!(m.predict(&[3.0]).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        let c = Ensemble {
            kind: TreeKind::Classification { n_classes: 2 },
            output_dim: 2,
            trees: vec![leaf_tree(vec![0.0, 1.0]), leaf_tree(vec![1.0, 0.0])],
            ..m
        };
        assert_eq!(c.predict_proba(&[0.0]).unwrap(), vec![0.5, 0.5]);
        assert!(c.predict(&[0.0, 1.0]).is_err());
    }

    #[test]
    fn single_feature_importance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut x = Matrix::new(5);
        let mut y = Matrix::new(1);
        for _ in 0..2000 {
            let row: Vec<f64> = (0..5).map(|_| rng.gen()).collect();
            y.push_row(&[(row[0] * 6.0).sin()]).unwrap();
            x.push_row(&row).unwrap();
        }
        let m = fit_regressor(&x, &y, &TreeParams { k_features: Some(5), ..Default::default() }).unwrap();
        let imp = m.feature_importances();
        assert!(imp[0] > 0.9, "{imp:?}");
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_permutation_invariant() {
        let (x, labels) = blobs(300, 8);
        let params = TreeParams { n_trees: 10, min_samples_leaf: 3, seed: 11, ..Default::default() };
        let a = fit_classifier(&x, &labels, 2, &params).unwrap();
        let b = fit_classifier(&x, &labels, 2, &params).unwrap();
        assert_eq!(a, b);
        let perm = shuffled_indices(x.rows(), 3);
        let mut xp = Matrix::new(2);
        let mut lp = Vec::new();
        for &i in &perm {
            xp.push_row(x.row(i)).unwrap();
            lp.push(labels[i]);
        }
        assert_eq!(fit_classifier(&xp, &lp, 2, &params).unwrap(), a);
        let c = fit_classifier(&x, &labels, 2, &params.with_seed(12)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn binary_round_trip() {
        let (x, y) = line(300, 9);
        let m = fit_regressor(&x, &y, &TreeParams { n_trees: 7, max_depth: Some(4), ..Default::default() }).unwrap();
        let back = Ensemble::<f64>::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert!(Ensemble::<f32>::from_bytes(&m.to_bytes()).is_err());
        let bytes = m.to_bytes();
        assert!(Ensemble::<f64>::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let xf = Matrix::from_vec(x.as_slice().iter().map(|v| *v as f32).collect(), 1).unwrap();
        let yf = Matrix::from_vec(y.as_slice().iter().map(|v| *v as f32).collect(), 1).unwrap();
        let mf = fit_regressor(&xf, &yf, &TreeParams { n_trees: 3, ..Default::default() }).unwrap();
        assert_eq!(Ensemble::<f32>::from_bytes(&mf.to_bytes()).unwrap(), mf);
    }

    #[test]
    fn min_samples_leaf_respected() {
        let (x, y) = line(500, 10);
        let params = TreeParams { n_trees: 5, min_samples_leaf: 20, ..Default::default() };
        let m = fit_regressor(&x, &y, &params).unwrap();
        for tree in &m.trees {
            let mut counts = vec![0usize; tree.leaf_values.len()];
            for i in 0..x.rows() {
                let leaf = tree.leaf(x.row(i), 1);
                let at = (leaf.as_ptr() as usize - tree.leaf_values.as_ptr() as usize) / 8;
                counts[at] += 1;
            }
            assert!(counts.iter().all(|&c| c >= 20), "{counts:?}");
        }
    }

    #[test]
    fn more_trees_less_variance() {
        let (x, y) = line(200, 12);
        let probe = [0.37];
        let spread = |n_trees: usize| {
            let preds: Vec<f64> = (0..20)
                .map(|s| {
                    let p = TreeParams { n_trees, min_samples_leaf: 5, seed: s, ..Default::default() };
                    fit_regressor(&x, &y, &p).unwrap().predict(&probe).unwrap()[0]
                })
                .collect();
            let m = preds.iter().sum::<f64>() / 20.0;
            preds.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 19.0
        };
        let (v1, v10, v50) = (spread(1), spread(10), spread(50));
        assert!(v1 > v10 && v10 > v50, "{v1} {v10} {v50}");
    }

    #[test]
    fn fit_errors() {
        let x = Matrix::<f64>::new(2);
        assert!(matches!(fit_classifier(&x, &[], 2, &TreeParams::default()), Err(TreeError::Empty)));
        let x = Matrix::from_vec(vec![1.0, 2.0], 1).unwrap();
        let y = Matrix::from_vec(vec![1.0], 1).unwrap();
        assert!(matches!(fit_regressor(&x, &y, &TreeParams::default()), Err(TreeError::Dimension(_))));
        let y = Matrix::from_vec(vec![1.0, 2.0], 1).unwrap();
        let bad = TreeParams { k_features: Some(3), ..Default::default() };
        assert!(matches!(fit_regressor(&x, &y, &bad), Err(TreeError::Params(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prediction_within_target_range(seed in 0u64..1000, probe in -1.0f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x = Matrix::new(2);
            let mut y = Matrix::new(2);
            for _ in 0..60 {
                x.push_row(&[rng.gen(), rng.gen()]).unwrap();
                y.push_row(&[rng.gen_range(-5.0..5.0), rng.gen_range(0.0..1.0)]).unwrap();
            }
            let m = fit_regressor(&x, &y, &TreeParams { n_trees: 8, min_samples_leaf: 2, seed, ..Default::default() }).unwrap();
            let p = m.predict(&[probe, 0.5]).unwrap();
            for o in 0..2 {
                let col: Vec<f64> = (0..60).map(|i| y.get(i, o)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(p[o] >= lo - 1e-12 && p[o] <= hi + 1e-12);
            }
        }

        #[test]
        fn floor_keeps_distribution(raw in proptest::collection::vec(0.0f64..1.0, 2..16)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let mut p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            floor_probabilities(&mut p, 1e-3);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(p.iter().all(|v| *v >= 1e-3 - 1e-15));
        }
    }
}
