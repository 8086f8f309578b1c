//! Painting-to-depth toolkit.
//!
//! Landscape paintings are paired with semantically similar photos through a
//! keyword dictionary, translated to pseudo-real photographs by an unpaired
//! two-generator translator, refined against the painting's structure, and
//! finally turned into relative depth maps and printable relief meshes.

pub mod autodiff;
pub mod corpus;
pub mod depth;
pub mod imaging;
pub mod matcher;
pub mod pipeline;
pub mod refine;
pub mod study;
pub mod toy;
pub mod translation;
