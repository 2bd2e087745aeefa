//! County boundaries from a GeoJSON `FeatureCollection`.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use super::{DataError, Result};
use crate::geometry::{Point, Polygon};

/// Counties keyed `Name-State`, each a (possibly multi-part) polygon set in
/// lon/lat degrees.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CountyIndex {
    pub counties: BTreeMap<String, Vec<Polygon>>,
}

impl CountyIndex {
    pub fn len(&self) -> usize {
        self.counties.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counties.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&[Polygon]> {
        self.counties.get(key).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.counties.keys().map(String::as_str)
    }

    /// Union of the named counties' polygons; unknown keys are skipped.
    pub fn union<'a, I: IntoIterator<Item = &'a str>>(&self, keys: I) -> Vec<Polygon> {
        keys.into_iter()
            .filter_map(|k| self.counties.get(k))
            .flat_map(|p| p.iter().cloned())
            .collect()
    }

    pub fn insert(&mut self, key: impl Into<String>, polygons: Vec<Polygon>) -> Result<()> {
        let key = key.into();
        if self.counties.contains_key(&key) {
            return Err(DataError::DuplicateCounty(key));
        }
        self.counties.insert(key, polygons);
        Ok(())
    }
}

impl CountyIndex {
    /// GeoJSON `FeatureCollection` that [`parse_counties`] reads back to the
    /// same index.
    pub fn to_geojson(&self) -> String {
        let features: Vec<Value> = self
            .counties
            .iter()
            .map(|(key, polys)| {
                let (name, state) = key.rsplit_once('-').unwrap_or((key.as_str(), ""));
                let close = |ring: &Vec<Point>| {
                    let mut r: Vec<Value> = ring.iter().map(|p| json!([p[0], p[1]])).collect();
                    r.push(json!([ring[0][0], ring[0][1]]));
                    Value::Array(r)
                };
                let coords: Vec<Value> = polys
                    .iter()
                    .map(|p| Value::Array(p.rings.iter().map(close).collect()))
                    .collect();
                json!({
                    "type": "Feature",
                    "properties": {"name": name, "state": state},
                    "geometry": {"type": "MultiPolygon", "coordinates": coords},
                })
            })
            .collect();
        json!({"type": "FeatureCollection", "features": features}).to_string()
    }
}

pub fn load_counties(path: impl AsRef<Path>) -> Result<CountyIndex> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_counties(&text)
}

pub fn parse_counties(text: &str) -> Result<CountyIndex> {
    let doc: Value = serde_json::from_str(text).map_err(|e| DataError::GeoJson(e.to_string()))?;
    if doc.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(DataError::GeoJson("expected a FeatureCollection".into()));
    }
    let features = doc
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| DataError::GeoJson("missing features".into()))?;
    let mut index = CountyIndex::default();
    for (i, f) in features.iter().enumerate() {
        let props = f.get("properties").cloned().unwrap_or(Value::Null);
        let prop = |k: &str| {
            props
                .get(k)
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| DataError::GeoJson(format!("feature {i} lacks property `{k}`")))
        };
        let key = format!("{}-{}", prop("name")?, prop("state")?);
        let geom = f
            .get("geometry")
            .ok_or_else(|| DataError::GeoJson(format!("feature {key} has no geometry")))?;
        let coords = geom
            .get("coordinates")
            .ok_or_else(|| DataError::GeoJson(format!("feature {key} has no coordinates")))?;
        let polygons = match geom.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(coords, &key)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| DataError::GeoJson(format!("bad multipolygon in {key}")))?
                .iter()
                .map(|p| parse_polygon(p, &key))
                .collect::<Result<_>>()?,
            other => {
                return Err(DataError::GeoJson(format!(
                    "unsupported geometry {other:?} in {key}"
                )))
            }
        };
        index.insert(key, polygons)?;
    }
    Ok(index)
}

fn parse_polygon(v: &Value, key: &str) -> Result<Polygon> {
    let rings = v
        .as_array()
        .ok_or_else(|| DataError::GeoJson(format!("bad polygon in {key}")))?;
    let mut out = Vec::with_capacity(rings.len());
    for ring in rings {
        let pts: Vec<Point> = ring
            .as_array()
            .ok_or_else(|| DataError::GeoJson(format!("bad ring in {key}")))?
            .iter()
            .map(|p| {
                let xy = p.as_array().filter(|a| a.len() >= 2);
                match xy {
                    Some(a) => match (a[0].as_f64(), a[1].as_f64()) {
                        (Some(x), Some(y)) => Ok([x, y]),
                        _ => Err(DataError::GeoJson(format!("bad coordinate in {key}"))),
                    },
                    None => Err(DataError::GeoJson(format!("bad coordinate in {key}"))),
                }
            })
            .collect::<Result<_>>()?;
        if pts.len() < 4 || pts.first() != pts.last() {
            return Err(DataError::UnclosedRing(key.to_string()));
        }
        out.push(pts[..pts.len() - 1].to_vec());
    }
    Ok(Polygon::new(out))
}
