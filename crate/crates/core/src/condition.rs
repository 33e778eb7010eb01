//! Generation condition: a global prompt plus grounded instance captions.

use crate::geometry::BoundingBox;
use crate::synth::scene::{global_prompt, SceneSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCondition {
    pub global_prompt: String,
    pub instances: Vec<(BoundingBox, String)>,
}

impl GenerationCondition {
    /// Builds the global prompt by comma-joining the captions.
    pub fn new(instances: Vec<(BoundingBox, String)>) -> Self {
        let captions: Vec<String> = instances.iter().map(|(_, c)| c.clone()).collect();
        Self {
            global_prompt: global_prompt(&captions),
            instances,
        }
    }

    pub fn from_scene(scene: &SceneSpec) -> Self {
        Self {
            global_prompt: scene.global_prompt.clone(),
            instances: scene.instances.iter().map(|i| (i.bbox, i.caption.clone())).collect(),
        }
    }

    pub fn boxes(&self) -> Vec<BoundingBox> {
        self.instances.iter().map(|(b, _)| *b).collect()
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }
}
