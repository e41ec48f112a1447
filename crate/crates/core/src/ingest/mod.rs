//! Entry points that turn annotated sources into content graphs: scene-graph
//! images, captioned videos and TeX papers.

pub mod paper;
pub mod scene;
pub mod video;
