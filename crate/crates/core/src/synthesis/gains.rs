use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::PrefixTree;
use crate::model::block_diag;
use crate::rows;

/// Gains attached to one prefix-tree node of depth `d >= 1`; they act at step `d - 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainNode {
    pub depth: usize,
    pub parent: Option<usize>,
    pub event: Option<u64>,
    /// `M_(k, i)` for `i = 0..=k`, each `n x p`.
    #[serde(with = "rows::matrices")]
    pub m_blocks: Vec<DMatrix<f64>>,
    /// `L_k`, zero unless the measurement of step `k` is on time.
    #[serde(with = "rows::matrix")]
    pub l_block: DMatrix<f64>,
    #[serde(with = "rows::vector")]
    pub nu: DVector<f64>,
}

/// Node-indexed gains. Entry `i` belongs to prefix-tree node `i`; every
/// sequence reads its stacked `(M, L, ν)` off its root-to-leaf path, so
/// sequences sharing a prefix share the corresponding gain rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSet {
    pub n: usize,
    pub p: usize,
    pub horizon: usize,
    pub nodes: Vec<GainNode>,
}

/// Stacked gains of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceGains {
    /// `Tn x Tp`, block lower triangular.
    pub m: DMatrix<f64>,
    /// Diagonal blocks `L_0 .. L_{T-1}`.
    pub l_blocks: Vec<DMatrix<f64>>,
    /// `Tn`.
    pub nu: DVector<f64>,
}

impl SequenceGains {
    pub fn l(&self) -> DMatrix<f64> {
        block_diag(&self.l_blocks.iter().collect::<Vec<_>>())
    }
}

impl GainSet {
    /// All-zero gains laid out on `tree`.
    pub fn zeros(tree: &PrefixTree, n: usize, p: usize) -> Self {
        let nodes = tree
            .nodes()
            .iter()
            .map(|node| GainNode {
                depth: node.depth,
                parent: node.parent,
                event: node.event,
                m_blocks: vec![DMatrix::zeros(n, p); node.depth],
                l_block: DMatrix::zeros(n, p),
                nu: DVector::zeros(n),
            })
            .collect();
        Self {
            n,
            p,
            horizon: tree.horizon(),
            nodes,
        }
    }

    /// Checks that the node table mirrors `tree` and that every block has the right shape.
    pub fn check_alignment(&self, tree: &PrefixTree) -> Result<()> {
        if self.nodes.len() != tree.len() || self.horizon != tree.horizon() {
            return Err(Error::CertificateRejected(format!(
                "gain table has {} nodes for horizon {}, prefix tree has {} for horizon {}",
                self.nodes.len(),
                self.horizon,
                tree.len(),
                tree.horizon()
            )));
        }
        for (id, (g, t)) in self.nodes.iter().zip(tree.nodes()).enumerate() {
            if g.depth != t.depth || g.parent != t.parent || g.event != t.event {
                return Err(Error::CertificateRejected(format!(
                    "gain node {id} does not match the prefix tree"
                )));
            }
            let shapes_ok = g.m_blocks.len() == g.depth
                && g.m_blocks.iter().all(|b| b.shape() == (self.n, self.p))
                && g.l_block.shape() == (self.n, self.p)
                && g.nu.len() == self.n;
            if !shapes_ok {
                return Err(Error::CertificateRejected(format!(
                    "gain node {id} has blocks of the wrong shape"
                )));
            }
        }
        Ok(())
    }

    pub fn for_sequence(&self, tree: &PrefixTree, alpha: usize) -> SequenceGains {
        let (n, p, t) = (self.n, self.p, self.horizon);
        let mut m = DMatrix::zeros(t * n, t * p);
        let mut nu = DVector::zeros(t * n);
        let mut l_blocks = Vec::with_capacity(t);
        for (k, id) in tree.path(alpha).into_iter().enumerate() {
            let node = &self.nodes[id];
            for (i, block) in node.m_blocks.iter().enumerate() {
                m.view_mut((k * n, i * p), (n, p)).copy_from(block);
            }
            nu.rows_mut(k * n, n).copy_from(&node.nu);
            l_blocks.push(node.l_block.clone());
        }
        SequenceGains { m, l_blocks, nu }
    }
}
