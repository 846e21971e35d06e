//! Decision-variable layout for the gains.
//!
//! One block of variables per prefix-tree node: node `N` of depth `k + 1`
//! owns gain row `k` (blocks `M_(k,0..=k)` and `ν_k`) for every sequence
//! passing through it. Indistinguishable sequences therefore share variables
//! instead of being tied together by equality rows. Blocks whose measurement
//! has not arrived at step `k` are pinned to zero and get no variables.

use crate::error::{Error, Result};
use crate::language::{event_matrix, EventLanguage, EventMatrix, PrefixTree};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub n: usize,
    pub p: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeLayout {
    /// Step whose gain row this node owns (`depth - 1`); `None` at the root.
    pub step: Option<usize>,
    /// Offset of the row-major `n x p` block `M_(k, i)`, or `None` when pinned to zero.
    pub m_blocks: Vec<Option<usize>>,
    /// Offset of `ν_k`.
    pub nu: Option<usize>,
    /// Whether the measurement of step `k` is available on time (enables `L_k`).
    pub on_time: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GainLayout {
    pub dims: Dims,
    pub nodes: Vec<NodeLayout>,
    total: usize,
}

impl GainLayout {
    /// Number of gain variables.
    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Variable index of `M_(k, i)[r, q]` at `node`.
    pub fn m_var(&self, node: usize, block: usize, r: usize, q: usize) -> Option<usize> {
        self.nodes[node].m_blocks[block].map(|start| start + r * self.dims.p + q)
    }

    pub fn nu_var(&self, node: usize, r: usize) -> Option<usize> {
        self.nodes[node].nu.map(|start| start + r)
    }

    fn renumber(&mut self) {
        let (n, p) = (self.dims.n, self.dims.p);
        let mut next = 0;
        for node in &mut self.nodes {
            for slot in node.m_blocks.iter_mut().flatten() {
                *slot = next;
                next += n * p;
            }
            if let Some(slot) = node.nu.as_mut() {
                *slot = next;
                next += n;
            }
        }
        self.total = next;
    }
}

/// Lays out a full (unpinned) block row per non-root tree node.
pub fn allocate_shared_variables(tree: &PrefixTree, dims: Dims) -> GainLayout {
    let nodes = tree
        .nodes()
        .iter()
        .map(|node| NodeLayout {
            step: node.depth.checked_sub(1),
            m_blocks: vec![Some(0); node.depth],
            nu: (node.depth > 0).then_some(0),
            on_time: node.depth > 0,
        })
        .collect();
    let mut layout = GainLayout {
        dims,
        nodes,
        total: 0,
    };
    layout.renumber();
    layout
}

/// Removes the variables of every block whose measurement is unavailable.
pub fn apply_delay_pattern(
    mut layout: GainLayout,
    tree: &PrefixTree,
    matrices: &[EventMatrix],
) -> Result<GainLayout> {
    for (id, node) in tree.nodes().iter().enumerate() {
        let Some(step) = node.depth.checked_sub(1) else {
            continue;
        };
        let first = node.sequences[0];
        let row = |a: usize| (0..=step).map(move |i| matrices[a].get(step, i));
        for &other in &node.sequences[1..] {
            if !row(first).eq(row(other)) {
                return Err(Error::ConflictingZeroPattern {
                    step,
                    first,
                    second: other,
                });
            }
        }
        let slots = &mut layout.nodes[id];
        for (i, available) in row(first).enumerate() {
            if !available {
                slots.m_blocks[i] = None;
            }
        }
        slots.on_time = matrices[first].get(step, step);
    }
    layout.renumber();
    Ok(layout)
}

/// Both layout passes for an event language.
pub fn gain_layout(tree: &PrefixTree, ev: &EventLanguage, dims: Dims) -> Result<GainLayout> {
    let matrices: Vec<EventMatrix> = ev.sequences().iter().map(event_matrix).collect();
    apply_delay_pattern(allocate_shared_variables(tree, dims), tree, &matrices)
}
