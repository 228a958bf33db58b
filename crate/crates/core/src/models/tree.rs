//! Binary CART trees with class-weighted Gini impurity.
//!
//! Split search uses per-column presorted index lists that are stably
//! partitioned at every split, so one tree level costs O(columns * rows).

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "lowercase")]
pub enum Node {
    Split {
        column: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
        count: u32,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
    pub n_columns: usize,
    pub min_samples_leaf: usize,
}

/// Dense column-major training table.
#[derive(Debug, Clone)]
pub struct TreeData {
    pub columns: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub weights: Vec<f64>,
}

impl TreeData {
    /// Densify sparse rows; `extra` appends one more column.
    pub fn from_sparse(
        rows: &[&[(u32, f64)]],
        n_features: usize,
        extra: Option<Vec<f64>>,
        labels: Vec<bool>,
        weights: Vec<f64>,
    ) -> Self {
        let n = rows.len();
        let mut columns = vec![vec![0.0; n]; n_features];
        for (i, row) in rows.iter().enumerate() {
            for &(j, v) in row.iter() {
                if let Some(col) = columns.get_mut(j as usize) {
                    col[i] = v;
                }
            }
        }
        if let Some(e) = extra {
            columns.push(e);
        }
        Self {
            columns,
            labels,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TreeOptions {
    pub min_samples_leaf: usize,
    pub max_depth: Option<usize>,
}

fn impurity(wp: f64, wn: f64) -> f64 {
    let w = wp + wn;
    if w <= 0.0 {
        0.0
    } else {
        w - (wp * wp + wn * wn) / w
    }
}

struct Best {
    gain: f64,
    column: usize,
    threshold: f64,
}

pub fn fit_tree(data: &TreeData, opts: TreeOptions) -> Tree {
    let n = data.len();
    let n_cols = data.columns.len();
    let min_leaf = opts.min_samples_leaf.max(1);
    let mut sorted: Vec<Vec<u32>> = data
        .columns
        .iter()
        .map(|col| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
            idx
        })
        .collect();
    let wpos: Vec<f64> = (0..n)
        .map(|i| if data.labels[i] { data.weights[i] } else { 0.0 })
        .collect();
    let wneg: Vec<f64> = (0..n)
        .map(|i| if data.labels[i] { 0.0 } else { data.weights[i] })
        .collect();

    let mut nodes = vec![Node::Leaf {
        value: 0.0,
        count: 0,
    }];
    let mut stack = vec![(0usize, 0usize, n, 0usize)];
    let mut goes_left = vec![false; n];
    let mut buf: Vec<u32> = Vec::with_capacity(n);

    while let Some((id, start, end, depth)) = stack.pop() {
        let members = if n_cols > 0 {
            &sorted[0][start..end]
        } else {
            &[][..]
        };
        let count = end - start;
        let (mut tp, mut tn) = (0.0, 0.0);
        if n_cols > 0 {
            for &i in members {
                tp += wpos[i as usize];
                tn += wneg[i as usize];
            }
        } else {
            tp = wpos.iter().sum();
            tn = wneg.iter().sum();
        }
        let value = if tp + tn > 0.0 { tp / (tp + tn) } else { 0.0 };
        let leaf = Node::Leaf {
            value,
            count: count as u32,
        };
        let parent_imp = impurity(tp, tn);
        if n_cols == 0
            || count < 2 * min_leaf
            || parent_imp <= 0.0
            || opts.max_depth.is_some_and(|d| depth >= d)
        {
            nodes[id] = leaf;
            continue;
        }

        let mut best: Option<Best> = None;
        for (c, col) in data.columns.iter().enumerate() {
            let order = &sorted[c][start..end];
            let (mut lp, mut ln) = (0.0, 0.0);
            for k in 0..count - 1 {
                let i = order[k] as usize;
                lp += wpos[i];
                ln += wneg[i];
                let left_n = k + 1;
                if left_n < min_leaf {
                    continue;
                }
                if count - left_n < min_leaf {
                    break;
                }
                let v = col[i];
                let v_next = col[order[k + 1] as usize];
                if v == v_next {
                    continue;
                }
                let gain = parent_imp - impurity(lp, ln) - impurity(tp - lp, tn - ln);
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Best {
                        gain,
                        column: c,
                        threshold: v + (v_next - v) / 2.0,
                    });
                }
            }
        }
        let Some(best) = best.filter(|b| b.gain > 1e-12 * (tp + tn)) else {
            nodes[id] = leaf;
            continue;
        };

        let col = &data.columns[best.column];
        let mut n_left = 0;
        for &i in &sorted[0][start..end] {
            let l = col[i as usize] <= best.threshold;
            goes_left[i as usize] = l;
            n_left += usize::from(l);
        }
        for order in sorted.iter_mut() {
            let seg = &mut order[start..end];
            buf.clear();
            buf.extend(seg.iter().copied().filter(|&i| goes_left[i as usize]));
            buf.extend(seg.iter().copied().filter(|&i| !goes_left[i as usize]));
            seg.copy_from_slice(&buf);
        }
        let left = nodes.len();
        let right = left + 1;
        nodes.push(leaf.clone());
        nodes.push(leaf);
        nodes[id] = Node::Split {
            column: best.column as u32,
            threshold: best.threshold,
            left: left as u32,
            right: right as u32,
        };
        stack.push((right, start + n_left, end, depth + 1));
        stack.push((left, start, start + n_left, depth + 1));
    }

    Tree {
        nodes,
        n_columns: n_cols,
        min_samples_leaf: min_leaf,
    }
}

impl Tree {
    /// Leaf value reached by the row whose column `c` reads `value(c)`.
    pub fn predict_with(&self, value: impl Fn(u32) -> f64) -> f64 {
        let mut id = 0usize;
        loop {
            match &self.nodes[id] {
                Node::Leaf { value, .. } => return *value,
                Node::Split {
                    column,
                    threshold,
                    left,
                    right,
                } => {
                    id = if value(*column) <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn leaf_counts(&self) -> Vec<u32> {
        self.nodes
            .iter()
            .filter_map(|n| match n {
                Node::Leaf { count, .. } => Some(*count),
                Node::Split { .. } => None,
            })
            .collect()
    }

    /// Root-to-leaf conjunctions for every leaf whose value exceeds `cut`.
    pub fn rules(&self, name: impl Fn(u32) -> String, cut: f64) -> Vec<String> {
        let mut out = Vec::new();
        let mut stack: Vec<(usize, Vec<String>)> = vec![(0, Vec::new())];
        while let Some((id, path)) = stack.pop() {
            match &self.nodes[id] {
                Node::Leaf { value, count } => {
                    if *value > cut {
                        let cond = if path.is_empty() {
                            "TRUE".to_string()
                        } else {
                            path.join(" AND ")
                        };
                        out.push(format!("{cond} => {value:.4} (n={count})"));
                    }
                }
                Node::Split {
                    column,
                    threshold,
                    left,
                    right,
                } => {
                    let c = name(*column);
                    let mut r = path.clone();
                    r.push(format!("{c} > {threshold}"));
                    stack.push((*right as usize, r));
                    let mut l = path;
                    l.push(format!("{c} <= {threshold}"));
                    stack.push((*left as usize, l));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn splits_on_informative_column() {
        let n = 200;
        let noise: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64).collect();
        let signal: Vec<f64> = (0..n).map(|i| (i % 2) as f64).collect();
        let labels: Vec<bool> = signal.iter().map(|&v| v > 0.5).collect();
        let data = TreeData {
            columns: vec![noise, signal],
            labels,
            weights: vec![1.0; n],
        };
        let tree = fit_tree(
            &data,
            TreeOptions {
                min_samples_leaf: 10,
                max_depth: None,
            },
        );
        match &tree.nodes[0] {
            Node::Split {
                column, threshold, ..
            } => {
                assert_eq!(*column, 1);
                assert_eq!(*threshold, 0.5);
            }
            Node::Leaf { .. } => panic!("expected a split"),
        }
        assert_eq!(tree.predict_with(|c| if c == 1 { 1.0 } else { 3.0 }), 1.0);
        assert_eq!(tree.predict_with(|_| 0.0), 0.0);
        let rules = tree.rules(|c| format!("x{c}"), 0.5);
        assert_eq!(rules, vec!["x1 > 0.5 => 1.0000 (n=100)".to_string()]);
    }

    #[test]
    fn class_weights_shift_leaf_value() {
        // one pure-ish leaf: 2 positives, 8 negatives, positives weighted 4x
        let labels: Vec<bool> = (0..10).map(|i| i < 2).collect();
        let weights: Vec<f64> = labels.iter().map(|&l| if l { 4.0 } else { 1.0 }).collect();
        let data = TreeData {
            columns: vec![vec![0.0; 10]],
            labels,
            weights,
        };
        let tree = fit_tree(
            &data,
            TreeOptions {
                min_samples_leaf: 1,
                max_depth: None,
            },
        );
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict_with(|_| 0.0), 0.5);
    }

    proptest! {
        #[test]
        fn leaves_respect_min_samples(
            rows in prop::collection::vec((0u8..6, 0u8..4, any::<bool>()), 20..200),
            min_leaf in 1usize..30,
        ) {
            let data = TreeData {
                columns: vec![
                    rows.iter().map(|r| f64::from(r.0)).collect(),
                    rows.iter().map(|r| f64::from(r.1)).collect(),
                ],
                labels: rows.iter().map(|r| r.2).collect(),
                weights: vec![1.0; rows.len()],
            };
            let tree = fit_tree(&data, TreeOptions { min_samples_leaf: min_leaf, max_depth: None });
            let counts = tree.leaf_counts();
            prop_assert_eq!(counts.iter().map(|&c| c as usize).sum::<usize>(), rows.len());
            if counts.len() > 1 {
                prop_assert!(counts.iter().all(|&c| c as usize >= min_leaf));
            }
            for (i, r) in rows.iter().enumerate() {
                let v = tree.predict_with(|c| data.columns[c as usize][i]);
                prop_assert!((0.0..=1.0).contains(&v));
                let _ = r;
            }
        }
    }
}
