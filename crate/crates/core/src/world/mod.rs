//! Procedural synthetic world: scenes, teacher view renders, template text
//! annotations, goal-directed motions, and dataset files.

mod annotate;
mod dataset;
mod motion_synth;
mod render;
mod scene;

pub use annotate::{generate_text, relation_selects, Relation, TextAnnotation, RELATIONS};
pub use dataset::{
    augment, augment_with, build_dataset, dataset_header, generate_samples, goal_centroid,
    load_dataset, read_record, write_record, Dataset, DatasetConfig, DatasetHeader, DatasetSample,
    ManifestEntry, Split, RECORD_MAGIC, RECORD_VERSION,
};
pub use motion_synth::{standing_height, synthesize_motion};
pub use render::{render_views, RenderConfig};
pub use scene::{
    class_id_of, class_name, class_palette, generate_scene, goal_aabb_from_points, set_goal,
    ClassSpec, ObjectInstance, SceneGenConfig, SceneSpec, Surface, FLOOR_COLOR, NUM_CLASSES,
    WALL_COLOR, WALL_THICKNESS,
};
