//! Images, masks, Netpbm I/O, the SynthTraits generator and taxonomy relabeling.

pub mod image;
pub mod pnm;
pub mod synth;
pub mod taxonomy;

pub use image::{patchify, unpatchify, GrayImage, Image, Mask};
pub use synth::{
    erase_to_background, generate_synth_traits, mean_color, Dataset, Sample, SynthManifest,
    SynthSpec, SynthTraits,
};
pub use taxonomy::{relabel_taxonomy, Level, Relabeled, TaxonomyTree};
