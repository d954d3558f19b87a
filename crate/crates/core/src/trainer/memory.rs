use serde::{Deserialize, Serialize};

/// Cross-episode reflection memory: one plain-text block per run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryState {
    pub text: String,
    pub source_instance_id: Option<String>,
    pub stored_at_iteration: Option<usize>,
}

impl MemoryState {
    pub fn is_empty(&self) -> bool {
        self.text.is_empty()
    }

    /// The block as reflection context, `None` while empty.
    pub fn as_context(&self) -> Option<&str> {
        (!self.is_empty()).then_some(self.text.as_str())
    }
}

/// Overwrites the memory with `reflection` iff `r2 ≥ tau_store`. Returns
/// whether the stored text changed.
pub fn memory_update(
    memory: &mut MemoryState,
    reflection: &str,
    r2: f64,
    tau_store: f64,
    source_instance_id: &str,
    iteration: usize,
) -> bool {
    if r2 < tau_store {
        return false;
    }
    let changed = memory.text != reflection;
    memory.text = reflection.to_string();
    memory.source_instance_id = Some(source_instance_id.to_string());
    memory.stored_at_iteration = Some(iteration);
    changed
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn starts_empty() {
        let m = MemoryState::default();
        assert!(m.is_empty());
        assert_eq!(m.as_context(), None);
    }

    #[test]
    fn success_overwrites() {
        let mut m = MemoryState { text: "old".into(), ..Default::default() };
        assert!(memory_update(&mut m, "AVOID:(1,1)", 1.0, 1.0, "lake-3", 7));
        assert_eq!(m.text, "AVOID:(1,1)");
        assert_eq!(m.source_instance_id.as_deref(), Some("lake-3"));
        assert_eq!(m.stored_at_iteration, Some(7));
    }

    #[test]
    fn failure_leaves_memory_alone() {
        let mut m = MemoryState { text: "old".into(), ..Default::default() };
        assert!(!memory_update(&mut m, "new", 0.0, 1.0, "x", 1));
        assert!(!memory_update(&mut m, "new", 0.99, 1.0, "x", 1));
        assert_eq!(m.text, "old");
        assert_eq!(m.stored_at_iteration, None);
    }
}
