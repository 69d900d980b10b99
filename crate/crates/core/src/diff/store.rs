//! Named parameter groups with gradients and Adam state.

use crate::error::{Result, SlamError};
use crate::math::Real;

/// What a parameter group holds; selects the learning rate and any
/// post-update projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Grid,
    SdfDecoder,
    ColorDecoder,
    Beta,
    /// Rigid pose of the given frame, stored as (qw, qx, qy, qz, tx, ty, tz).
    Pose(usize),
}

impl GroupKind {
    pub fn is_map(self) -> bool {
        !matches!(self, GroupKind::Pose(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupId(pub usize);

#[derive(Debug, Clone)]
pub struct ParamGroup<T> {
    pub name: String,
    pub kind: GroupKind,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub frozen: bool,
    /// Number of Adam updates applied to this group (bias correction uses
    /// this, not the store-wide counter, so groups added mid-run start cold).
    pub steps: u64,
}

/// Optimizer hyperparameters. One learning rate for map groups, one for poses.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub map_lr: f64,
    pub pose_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            map_lr: 1e-2,
            pose_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn lr_for(&self, kind: GroupKind) -> f64 {
        match kind {
            GroupKind::Pose(_) => self.pose_lr,
            _ => self.map_lr,
        }
    }
}

/// Lower bound kept on the density sharpness parameter so the TSDF-to-density
/// transform stays defined after aggressive steps.
pub const BETA_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    groups: Vec<ParamGroup<T>>,
    step: u64,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            groups: Vec::new(),
            step: 0,
        }
    }

    pub fn add_group(
        &mut self,
        name: impl Into<String>,
        kind: GroupKind,
        values: Vec<T>,
    ) -> GroupId {
        let n = values.len();
        self.groups.push(ParamGroup {
            name: name.into(),
            kind,
            values,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            frozen: false,
            steps: 0,
        });
        GroupId(self.groups.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn group(&self, id: GroupId) -> &ParamGroup<T> {
        &self.groups[id.0]
    }

    pub fn group_mut(&mut self, id: GroupId) -> &mut ParamGroup<T> {
        &mut self.groups[id.0]
    }

    pub fn groups(&self) -> impl Iterator<Item = (GroupId, &ParamGroup<T>)> {
        self.groups.iter().enumerate().map(|(i, g)| (GroupId(i), g))
    }

    pub fn values(&self, id: GroupId) -> &[T] {
        &self.groups[id.0].values
    }

    pub fn values_mut(&mut self, id: GroupId) -> &mut [T] {
        &mut self.groups[id.0].values
    }

    pub fn grad(&self, id: GroupId) -> &[T] {
        &self.groups[id.0].grad
    }

    pub fn grad_mut(&mut self, id: GroupId) -> &mut [T] {
        &mut self.groups[id.0].grad
    }

    pub fn set_frozen(&mut self, id: GroupId, frozen: bool) {
        self.groups[id.0].frozen = frozen;
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.groups {
            g.grad.fill(T::zero());
        }
    }

    /// Bias-corrected Adam over every non-frozen group. Gradients are cleared,
    /// the step counter advances, pose quaternions are renormalized, and the
    /// sharpness parameter is floored to stay positive.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        for g in &mut self.groups {
            if g.frozen {
                continue;
            }
            for (i, &gr) in g.grad.iter().enumerate() {
                if !gr.is_finite() {
                    return Err(SlamError::Numeric(format!(
                        "gradient of group '{}' at index {i}",
                        g.name
                    )));
                }
            }
            g.steps += 1;
            let t = g.steps as i32;
            let lr = T::of(cfg.lr_for(g.kind));
            let b1 = T::of(cfg.beta1);
            let b2 = T::of(cfg.beta2);
            let eps = T::of(cfg.eps);
            let bc1 = T::one() - b1.powi(t);
            let bc2 = T::one() - b2.powi(t);
            for i in 0..g.values.len() {
                let gr = g.grad[i];
                g.m[i] = b1 * g.m[i] + (T::one() - b1) * gr;
                g.v[i] = b2 * g.v[i] + (T::one() - b2) * gr * gr;
                let m_hat = g.m[i] / bc1;
                let v_hat = g.v[i] / bc2;
                g.values[i] = g.values[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            match g.kind {
                GroupKind::Pose(_) => {
                    let n = (g.values[0] * g.values[0]
                        + g.values[1] * g.values[1]
                        + g.values[2] * g.values[2]
                        + g.values[3] * g.values[3])
                        .sqrt();
                    if n <= T::zero() || !n.is_finite() {
                        return Err(SlamError::Numeric(format!(
                            "quaternion norm of group '{}'",
                            g.name
                        )));
                    }
                    for i in 0..4 {
                        g.values[i] = g.values[i] / n;
                    }
                }
                GroupKind::Beta => {
                    let floor = T::of(BETA_FLOOR);
                    if g.values[0] < floor {
                        g.values[0] = floor;
                    }
                }
                _ => {}
            }
        }
        for g in &mut self.groups {
            if !g.frozen {
                g.grad.fill(T::zero());
            }
        }
        self.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_values() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_group("g", GroupKind::Grid, vec![1.0, -2.0, 3.0]);
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.values(id), &[1.0, -2.0, 3.0]);
        assert_eq!(store.step_count(), 1);
    }

    #[test]
    fn first_step_is_lr_sized() {
        // With bias correction, step 1 moves by lr * g/(|g| + eps') ~= lr.
        let mut store = ParamStore::<f64>::new();
        let id = store.add_group("g", GroupKind::Grid, vec![0.0]);
        store.grad_mut(id)[0] = 1.0;
        let cfg = AdamConfig {
            map_lr: 0.1,
            ..Default::default()
        };
        store.adam_step(&cfg).unwrap();
        assert!((store.values(id)[0] + 0.1).abs() < 1e-6);
        assert_eq!(store.grad(id)[0], 0.0);
    }

    #[test]
    fn two_identical_gradients_match_recursion() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_group("g", GroupKind::Grid, vec![0.0]);
        let cfg = AdamConfig {
            map_lr: 0.1,
            ..Default::default()
        };
        let (b1, b2, eps, lr, g) = (cfg.beta1, cfg.beta2, cfg.eps, cfg.map_lr, 2.5);

        store.grad_mut(id)[0] = g;
        store.adam_step(&cfg).unwrap();
        store.grad_mut(id)[0] = g;
        store.adam_step(&cfg).unwrap();

        // Hand-rolled two-step recursion.
        let mut m = 0.0;
        let mut v = 0.0;
        let mut x = 0.0;
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert!((store.values(id)[0] - x).abs() < 1e-9);
    }

    #[test]
    fn frozen_group_never_moves() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_group("g", GroupKind::SdfDecoder, vec![1.0]);
        store.set_frozen(id, true);
        store.grad_mut(id)[0] = 5.0;
        store.adam_step(&AdamConfig::default()).unwrap();
        assert_eq!(store.values(id)[0], 1.0);
    }

    #[test]
    fn non_finite_gradient_is_an_error() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_group("g", GroupKind::Grid, vec![1.0]);
        store.grad_mut(id)[0] = f64::NAN;
        assert!(store.adam_step(&AdamConfig::default()).is_err());
    }

    #[test]
    fn pose_quaternion_renormalized() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add_group(
            "pose.0",
            GroupKind::Pose(0),
            vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        );
        for i in 0..4 {
            store.grad_mut(id)[i] = 0.3 * (i as f64 + 1.0);
        }
        store.adam_step(&AdamConfig::default()).unwrap();
        let v = store.values(id);
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + v[3] * v[3]).sqrt();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
