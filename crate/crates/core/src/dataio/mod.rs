//! Corpus ingestion: manifests, polygon annotations, preprocessing and patient-level splits.

mod image;
mod labelme;
mod manifest;
mod mask;
mod split;

pub use self::image::{
    decode_image, denormalize, renormalize, preprocess, preprocess_float, preprocess_with, resize_bilinear,
    unit_to_rgb, FloatImage, ImageRecord, Normalization, IMAGENET_MEAN, IMAGENET_STD,
    MIN_IMAGE_SIDE,
};
pub use labelme::{load_labelme, parse_labelme, LabelMeFile, LabelMeShape};
pub use manifest::{load_manifest, DatasetManifest, ManifestEntry, Marker, Split, SubtypeLabels};
pub use mask::{polygon_area, polygon_to_mask, BinaryMask, PolygonAnnotation, Rle};
pub use split::{kfold_patient, patient_split, split_counts, DEFAULT_SPLIT_RATIOS};
