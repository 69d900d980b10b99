//! Reverse-mode gradients over the fixed rendering/loss graph, pose
//! parameterization, and the Adam optimizer.

pub mod gradcheck;
pub mod graph;
pub mod pose;
pub mod store;

pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{forward_backward, StepConfig};
pub use pose::{pose_to_matrix, PoseParam};
pub use store::{AdamConfig, GroupId, GroupKind, ParamStore};

use crate::math::Real;

/// Optimizable per-frame poses, one parameter group each.
#[derive(Debug, Clone, Default)]
pub struct PoseTable<T> {
    pub store: ParamStore<T>,
    entries: Vec<(usize, GroupId)>,
}

impl<T: Real> PoseTable<T> {
    pub fn new() -> Self {
        Self {
            store: ParamStore::new(),
            entries: Vec::new(),
        }
    }

    pub fn insert(&mut self, frame: usize, pose: PoseParam<T>) -> GroupId {
        debug_assert!(self.gid(frame).is_none(), "pose for frame {frame} exists");
        let gid = self.store.add_group(
            format!("pose.{frame}"),
            GroupKind::Pose(frame),
            pose.to_array().to_vec(),
        );
        self.entries.push((frame, gid));
        gid
    }

    pub fn gid(&self, frame: usize) -> Option<GroupId> {
        self.entries
            .iter()
            .find(|(f, _)| *f == frame)
            .map(|(_, g)| *g)
    }

    pub fn pose(&self, frame: usize) -> Option<PoseParam<T>> {
        self.gid(frame)
            .map(|g| PoseParam::from_slice(self.store.values(g)))
    }

    pub fn set_pose(&mut self, frame: usize, pose: PoseParam<T>) {
        let gid = self.gid(frame).expect("unknown frame");
        self.store
            .values_mut(gid)
            .copy_from_slice(&pose.to_array());
    }

    pub fn set_frozen(&mut self, frame: usize, frozen: bool) {
        let gid = self.gid(frame).expect("unknown frame");
        self.store.set_frozen(gid, frozen);
    }

    pub fn frames(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(f, _)| *f)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
