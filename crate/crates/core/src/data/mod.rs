pub mod crop;
pub mod io;
pub mod normalize;
pub mod phantom;

pub use crop::{crop_at, random_paired_crop};
pub use io::{load_dataset, DatasetManifest, ManifestEntry, Split};
pub use normalize::normalize_slice;
pub use phantom::{generate_phantoms, PhantomDataset, PhantomSpec};
