//! Second-order regression trees grown level by level with exact greedy splits.

use serde::{Deserialize, Serialize};

/// Minimum loss reduction for a split to be taken.
const MIN_SPLIT_GAIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go to `left`.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn leaf(value: f64) -> Self {
        Self {
            nodes: vec![Node::Leaf { value }],
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if row[feature] < threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn leaf_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            Node::Leaf { value } => Some(*value),
            _ => None,
        })
    }

    /// Adds `delta` to every leaf.
    pub fn shift_leaves(&mut self, delta: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf { value } = n {
                *value += delta;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct TreeParams {
    pub max_depth: usize,
    pub l2_reg: f64,
    pub min_child_weight: f64,
    pub learning_rate: f64,
}

/// Column-major feature values plus per-feature row orders sorted by value.
pub(crate) struct ColumnData {
    pub columns: Vec<Vec<f64>>,
    pub sorted: Vec<Vec<u32>>,
}

impl ColumnData {
    pub fn new(rows: &[&[f64]], width: usize) -> Self {
        let columns: Vec<Vec<f64>> = (0..width)
            .map(|f| rows.iter().map(|r| r[f]).collect())
            .collect();
        let sorted = columns
            .iter()
            .map(|col| {
                let mut order: Vec<u32> = (0..col.len() as u32).collect();
                order.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]).then(a.cmp(&b)));
                order
            })
            .collect();
        Self { columns, sorted }
    }

    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

#[derive(Clone, Copy, Default)]
struct Stats {
    g: f64,
    h: f64,
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
    left: Stats,
}

fn score(s: Stats, lambda: f64) -> f64 {
    s.g * s.g / (s.h + lambda)
}

/// Grows one tree on (grad, hess). Returns the tree and, for every row, the leaf value
/// it landed in (already scaled by the learning rate).
pub(crate) fn grow_tree(
    data: &ColumnData,
    grad: &[f64],
    hess: &[f64],
    params: TreeParams,
) -> (RegressionTree, Vec<f64>) {
    const SETTLED: u32 = u32::MAX;
    let n = data.n_rows();
    let lambda = params.l2_reg;

    let mut node_stats = vec![Stats {
        g: grad.iter().sum(),
        h: hess.iter().sum(),
    }];
    let mut nodes: Vec<Option<Node>> = vec![None];
    let mut row_node: Vec<u32> = vec![0; n];
    let mut frontier: Vec<usize> = vec![0];

    for _depth in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut active = vec![false; nodes.len()];
        for &id in &frontier {
            active[id] = true;
        }
        let mut best: Vec<Option<Candidate>> = vec![None; nodes.len()];
        let mut running: Vec<(Stats, Option<f64>)> = vec![(Stats::default(), None); nodes.len()];

        for (f, order) in data.sorted.iter().enumerate() {
            let col = &data.columns[f];
            for &id in &frontier {
                running[id] = (Stats::default(), None);
            }
            for &r in order {
                let r = r as usize;
                let id = row_node[r];
                if id == SETTLED || !active[id as usize] {
                    continue;
                }
                let id = id as usize;
                let v = col[r];
                let (acc, last) = &mut running[id];
                if let Some(prev) = *last {
                    if v > prev {
                        let total = node_stats[id];
                        let right = Stats {
                            g: total.g - acc.g,
                            h: total.h - acc.h,
                        };
                        if acc.h >= params.min_child_weight && right.h >= params.min_child_weight {
                            let gain = 0.5
                                * (score(*acc, lambda) + score(right, lambda) - score(total, lambda));
                            if best[id].is_none_or(|b| gain > b.gain) {
                                let mid = prev + (v - prev) / 2.0;
                                let threshold = if mid > prev { mid } else { v };
                                best[id] = Some(Candidate {
                                    gain,
                                    feature: f,
                                    threshold,
                                    left: *acc,
                                });
                            }
                        }
                    }
                }
                acc.g += grad[r];
                acc.h += hess[r];
                *last = Some(v);
            }
        }

        let mut next_frontier = Vec::new();
        let mut child_of: Vec<Option<(usize, usize, usize, f64)>> = vec![None; nodes.len()];
        for &id in &frontier {
            match best[id] {
                Some(c) if c.gain > MIN_SPLIT_GAIN => {
                    let total = node_stats[id];
                    let left_id = nodes.len();
                    let right_id = left_id + 1;
                    nodes.push(None);
                    nodes.push(None);
                    node_stats.push(c.left);
                    node_stats.push(Stats {
                        g: total.g - c.left.g,
                        h: total.h - c.left.h,
                    });
                    nodes[id] = Some(Node::Split {
                        feature: c.feature,
                        threshold: c.threshold,
                        left: left_id,
                        right: right_id,
                    });
                    child_of[id] = Some((c.feature, left_id, right_id, c.threshold));
                    next_frontier.push(left_id);
                    next_frontier.push(right_id);
                }
                _ => {}
            }
        }
        for (r, id) in row_node.iter_mut().enumerate() {
            if *id == SETTLED {
                continue;
            }
            if let Some((f, l, rt, thr)) = child_of.get(*id as usize).copied().flatten() {
                *id = if data.columns[f][r] < thr { l as u32 } else { rt as u32 };
            }
        }
        frontier = next_frontier;
    }

    let leaf_value = |s: Stats| -s.g / (s.h + lambda) * params.learning_rate;
    let mut values = vec![0.0; nodes.len()];
    let nodes: Vec<Node> = nodes
        .into_iter()
        .enumerate()
        .map(|(id, node)| {
            node.unwrap_or_else(|| {
                values[id] = leaf_value(node_stats[id]);
                Node::Leaf { value: values[id] }
            })
        })
        .collect();
    let per_row = row_node.iter().map(|&id| values[id as usize]).collect();
    (RegressionTree { nodes }, per_row)
}
