use std::path::Path;

use serde::Deserialize;

use super::mask::PolygonAnnotation;
use crate::{Error, Result};

/// The subset of the LabelMe JSON layout the toolkit reads.
#[derive(Clone, Debug, Deserialize)]
pub struct LabelMeFile {
    pub shapes: Vec<LabelMeShape>,
    #[serde(rename = "imagePath", default)]
    pub image_path: Option<String>,
    #[serde(rename = "imageHeight", default)]
    pub image_height: Option<usize>,
    #[serde(rename = "imageWidth", default)]
    pub image_width: Option<usize>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct LabelMeShape {
    #[serde(default)]
    pub label: String,
    pub points: Vec<[f64; 2]>,
    #[serde(default)]
    pub shape_type: Option<String>,
}

impl LabelMeFile {
    /// Polygon and rectangle shapes as clamped polygons. Other shape types
    /// (points, lines, circles) carry no area and are ignored.
    pub fn polygons(&self, height: usize, width: usize) -> Vec<PolygonAnnotation> {
        self.shapes
            .iter()
            .filter_map(|s| {
                let pts: Vec<(f64, f64)> = match s.shape_type.as_deref() {
                    None | Some("polygon") => s.points.iter().map(|p| (p[0], p[1])).collect(),
                    Some("rectangle") if s.points.len() == 2 => {
                        let [x0, y0] = s.points[0];
                        let [x1, y1] = s.points[1];
                        vec![(x0, y0), (x1, y0), (x1, y1), (x0, y1)]
                    }
                    Some(other) => {
                        log::warn!("ignoring LabelMe shape '{}' of type {other}", s.label);
                        return None;
                    }
                };
                Some(PolygonAnnotation::new(pts, s.label.clone()).clamped(height, width))
            })
            .collect()
    }
}

pub fn parse_labelme(text: &str, origin: &Path) -> Result<LabelMeFile> {
    let file: LabelMeFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    for (i, shape) in file.shapes.iter().enumerate() {
        let polygonal = matches!(shape.shape_type.as_deref(), None | Some("polygon"));
        if polygonal && shape.points.len() < 3 {
            return Err(Error::validation(format!(
                "{}: shape {i} ('{}') has {} points, polygons need at least 3",
                origin.display(),
                shape.label,
                shape.points.len()
            )));
        }
        if shape.points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "{}: shape {i} ('{}') has non-finite coordinates",
                origin.display(),
                shape.label
            )));
        }
    }
    Ok(file)
}

pub fn load_labelme(path: &Path) -> Result<LabelMeFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labelme(&text, path)
}
