//! Structured data organization: shapes, rendered view windows, the
//! category tree and the triplets built from them.

pub mod cloud;
pub mod render;
pub mod taxonomy;
pub mod triplet;
pub mod views;

pub use cloud::{
    generate_synthetic_corpus, sample_points, sub_name, CorpusEntry, CorpusSpec, PointCloud, SHAPE_FAMILIES,
    SHAPE_MODIFIERS,
};
pub use render::{
    read_view_image, render_candidate_views, render_view, write_view_image, CandidateViewSet, ViewImage, DEPTH_OFFSET, MAX_VIEW_DEPTH,
    NUM_CANDIDATE_VIEWS, VIEW_STEP_DEG,
};
pub use taxonomy::CategoryTree;
pub use triplet::{
    assemble_triplets, build_triplets, draw_view_slots, read_manifest, read_points, write_manifest, write_points,
    ManifestRecord, TripletSample,
};
pub use views::{
    circular_difference_deg, max_pairwise_difference_deg, sample_window_slots, window_capacity, within_view_sample,
};
