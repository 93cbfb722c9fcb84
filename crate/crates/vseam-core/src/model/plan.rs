//! Declarative intervention plans applied during a forward pass.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use crate::error::{Result, VseamError};
use crate::model::cache::ActivationCache;
use crate::model::ModuleKind;

/// One action of an [`InterventionPlan`].
#[derive(Debug, Clone)]
pub enum Action {
    /// Overwrite rows `positions` of the residual state after
    /// `(layer, module)` with the same rows of the donor cache.
    Patch {
        layer: usize,
        module: ModuleKind,
        positions: Vec<usize>,
        donor: Arc<ActivationCache>,
    },
    /// Replace head `head`'s pre-projection output with the average output
    /// of the remaining heads at the same layer.
    MaskHead { layer: usize, head: usize },
    /// Multiply head `head`'s pre-projection output by `factor`.
    RescaleHead {
        layer: usize,
        head: usize,
        factor: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Target {
    Module(usize, ModuleKind),
    Head(usize, usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Module(l, m) => write!(f, "layer {l} module {m}"),
            Target::Head(l, h) => write!(f, "layer {l} head {h}"),
        }
    }
}

impl Action {
    fn target(&self) -> Target {
        match self {
            Action::Patch { layer, module, .. } => Target::Module(*layer, *module),
            Action::MaskHead { layer, head } | Action::RescaleHead { layer, head, .. } => {
                Target::Head(*layer, *head)
            }
        }
    }
}

/// Ordered list of interventions for one forward pass.
///
/// No two actions may target the same `(layer, module)` or `(layer, head)`
/// pair, so plans never silently compound. Within one layer the effective
/// order is fixed: head masks are computed jointly from the unmodified head
/// outputs, rescales apply after masks, and patches overwrite the module
/// state after the projection (taking precedence on patched rows).
#[derive(Debug, Clone, Default)]
pub struct InterventionPlan {
    actions: Vec<Action>,
    targets: BTreeSet<Target>,
}

impl InterventionPlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// The clean forward pass.
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn add(&mut self, action: Action) -> Result<&mut Self> {
        if let Action::RescaleHead { factor, .. } = &action {
            if *factor < 0.0 || !factor.is_finite() {
                return Err(VseamError::NegativeScale(*factor));
            }
        }
        let target = action.target();
        if !self.targets.insert(target) {
            return Err(VseamError::DuplicateTarget(target.to_string()));
        }
        self.actions.push(action);
        Ok(self)
    }

    pub fn from_actions(actions: impl IntoIterator<Item = Action>) -> Result<Self> {
        let mut plan = Self::new();
        for a in actions {
            plan.add(a)?;
        }
        Ok(plan)
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn actions(&self) -> &[Action] {
        &self.actions
    }

    /// Check every action against model dimensions and the sequence length.
    pub fn validate(
        &self,
        num_layers: usize,
        num_heads: usize,
        hidden_dim: usize,
        seq_len: usize,
    ) -> Result<()> {
        for action in &self.actions {
            let layer = match action {
                Action::Patch { layer, .. }
                | Action::MaskHead { layer, .. }
                | Action::RescaleHead { layer, .. } => *layer,
            };
            if layer >= num_layers {
                return Err(VseamError::LayerOutOfRange {
                    layer,
                    layers: num_layers,
                });
            }
            match action {
                Action::Patch {
                    positions, donor, ..
                } => {
                    for &p in positions {
                        if p >= seq_len {
                            return Err(VseamError::PositionOutOfRange {
                                position: p,
                                len: seq_len,
                            });
                        }
                    }
                    if donor.seq_len() != seq_len || donor.hidden_dim() != hidden_dim {
                        return Err(VseamError::DonorShapeMismatch {
                            donor_len: donor.seq_len(),
                            donor_dim: donor.hidden_dim(),
                            len: seq_len,
                            dim: hidden_dim,
                        });
                    }
                }
                Action::MaskHead { head, .. } | Action::RescaleHead { head, .. } => {
                    if *head >= num_heads {
                        return Err(VseamError::HeadOutOfRange {
                            head: *head,
                            heads: num_heads,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn patches_at(
        &self,
        layer: usize,
        module: ModuleKind,
    ) -> Option<(&[usize], &Arc<ActivationCache>)> {
        self.actions.iter().find_map(|a| match a {
            Action::Patch {
                layer: l,
                module: m,
                positions,
                donor,
            } if *l == layer && *m == module => Some((positions.as_slice(), donor)),
            _ => None,
        })
    }

    pub(crate) fn masks_at(&self, layer: usize) -> Vec<usize> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::MaskHead { layer: l, head } if *l == layer => Some(*head),
                _ => None,
            })
            .collect()
    }

    pub(crate) fn rescales_at(&self, layer: usize) -> Vec<(usize, f64)> {
        self.actions
            .iter()
            .filter_map(|a| match a {
                Action::RescaleHead {
                    layer: l,
                    head,
                    factor,
                } if *l == layer => Some((*head, *factor)),
                _ => None,
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_head_target_is_rejected() {
        let mut plan = InterventionPlan::new();
        plan.add(Action::MaskHead { layer: 1, head: 2 }).unwrap();
        let err = plan
            .add(Action::RescaleHead {
                layer: 1,
                head: 2,
                factor: 1.5,
            })
            .unwrap_err();
        assert!(matches!(err, VseamError::DuplicateTarget(_)));
    }

    #[test]
    fn distinct_targets_coexist() {
        let mut plan = InterventionPlan::new();
        plan.add(Action::MaskHead { layer: 1, head: 2 }).unwrap();
        plan.add(Action::MaskHead { layer: 1, head: 3 }).unwrap();
        plan.add(Action::RescaleHead {
            layer: 2,
            head: 2,
            factor: 0.5,
        })
        .unwrap();
        assert_eq!(plan.len(), 3);
    }

    #[test]
    fn negative_factor_is_rejected() {
        let mut plan = InterventionPlan::new();
        let err = plan
            .add(Action::RescaleHead {
                layer: 0,
                head: 0,
                factor: -0.1,
            })
            .unwrap_err();
        assert!(matches!(err, VseamError::NegativeScale(_)));
    }
}
