//! Procedural room scenes with placed object glyphs, the out-of-context
//! condition transforms, and dataset files.

mod classes;
mod dataset;
mod raster;
mod scene;

pub use classes::{default_roster, ClassDef, RoomKind, Roster, Stencil, SupportKind};
pub use dataset::{
    sample_seed, DatasetConfig, DatasetSplit, Manifest, ManifestRecord, Split, MANIFEST_FILE,
    MANIFEST_HEADER,
};
pub use raster::{Rgb, RgbImage};
pub use scene::{
    blank_context, BlankMode, Block, ConditionTag, Placement, RoomSpec, Sample, Scene, SceneConfig,
    SceneGenerator, SizeBin, Surface, GREY,
};
