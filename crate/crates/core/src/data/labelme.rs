use serde_json::Value;

use crate::error::{Error, Result};

/// Closed polygon in pixel coordinates (x to the right, y down).
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub vertices: Vec<(f64, f64)>,
    pub label: String,
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>, label: impl Into<String>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidArgument(format!("polygon needs >= 3 vertices, got {}", vertices.len())));
        }
        Ok(Polygon {
            vertices,
            label: label.into(),
        })
    }
}

fn bad(index: usize, reason: impl std::fmt::Display) -> Error {
    Error::InvalidArgument(format!("labelme shape {index}: {reason}"))
}

/// Reads the `shapes[].points` polygons of a labelme annotation.
pub fn parse_labelme(text: &str) -> Result<Vec<Polygon>> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("labelme JSON: {e}")))?;
    let shapes = match doc.get("shapes") {
        Some(Value::Array(a)) => a,
        Some(_) => return Err(Error::InvalidArgument("labelme JSON: `shapes` is not an array".into())),
        None => return Err(Error::InvalidArgument("labelme JSON: missing `shapes`".into())),
    };
    shapes
        .iter()
        .enumerate()
        .map(|(i, shape)| {
            let label = shape.get("label").and_then(Value::as_str).unwrap_or("").to_string();
            let points = shape
                .get("points")
                .and_then(Value::as_array)
                .ok_or_else(|| bad(i, "missing `points` array"))?;
            let vertices = points
                .iter()
                .map(|p| match p.as_array().map(Vec::as_slice) {
                    Some([x, y]) => x.as_f64().zip(y.as_f64()).ok_or_else(|| bad(i, "non-numeric point")),
                    _ => Err(bad(i, "point is not an [x, y] pair")),
                })
                .collect::<Result<Vec<_>>>()?;
            if vertices.len() < 3 {
                return Err(bad(i, format!("{} points, need at least 3", vertices.len())));
            }
            Ok(Polygon { vertices, label })
        })
        .collect()
}
