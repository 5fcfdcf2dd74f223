use crate::geometry::Point3;

use super::kdtree::KdTree;

/// Reference map that keeps every point in one k-d tree and rebuilds the
/// whole tree on each update.
#[derive(Debug, Clone, Default)]
pub struct MonolithicKdMap {
    tree: KdTree,
}

impl MonolithicKdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, points_world: &[Point3]) {
        let mut all = Vec::with_capacity(self.tree.len() + points_world.len());
        all.extend_from_slice(self.tree.points());
        all.extend_from_slice(points_world);
        self.tree = KdTree::build(all);
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn tree(&self) -> &KdTree {
        &self.tree
    }
}
