use crate::data::RoutingContext;

/// One observed interaction: the context, the action taken and the only
/// feedback revealed for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRecord {
    pub context: RoutingContext,
    pub action: usize,
    pub reward: f64,
    /// Target of the gating head: the pre-decision prediction overshot the
    /// realized reward.
    pub gate_label: bool,
    /// Whether the gate was open (bonus-based selection) at decision time.
    pub gate_open: bool,
    pub slice_index: usize,
}

impl ReplayRecord {
    pub fn gate_target(&self) -> f64 {
        if self.gate_label {
            1.0
        } else {
            0.0
        }
    }
}
