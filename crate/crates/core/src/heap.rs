use std::cmp::Ordering;

/// Min-heap entry for Dijkstra-style searches over `f64` costs.
///
/// `BinaryHeap` is a max-heap, so the ordering is reversed: the smallest cost
/// pops first, and among equal costs the smallest node id.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MinEntry {
    pub cost: f64,
    pub node: usize,
}

impl PartialEq for MinEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for MinEntry {}

impl PartialOrd for MinEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for MinEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}
