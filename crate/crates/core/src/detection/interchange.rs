//! Line-delimited JSON interchange for detections and ground truth.

use std::io::{BufRead, Write};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::detection::{Detection, LabeledBox};
use crate::error::{Error, Result};
use crate::geom::Box3D;
use crate::voxel::BevKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    #[serde(default)]
    pub frame: usize,
    pub center: [f64; 3],
    pub dims: [f64; 3],
    pub yaw: f64,
    pub class: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn from_detection(frame: usize, d: &Detection) -> Self {
        Self {
            frame,
            center: d.bbox.center.into(),
            dims: d.bbox.dims.into(),
            yaw: d.bbox.yaw,
            class: d.class,
            score: Some(d.score),
        }
    }

    pub fn from_label(frame: usize, b: &LabeledBox) -> Self {
        Self { frame, center: b.bbox.center.into(), dims: b.bbox.dims.into(), yaw: b.bbox.yaw, class: b.class, score: None }
    }

    pub fn to_box(&self) -> Result<Box3D> {
        Box3D::new(Vector3::from(self.center), Vector3::from(self.dims), self.yaw)
    }

    pub fn to_label(&self) -> Result<LabeledBox> {
        Ok(LabeledBox { bbox: self.to_box()?, class: self.class })
    }

    /// Detections read back from files carry no pillar; their key is the
    /// pillar of the box center on a unit grid.
    pub fn to_detection(&self) -> Result<Detection> {
        let score = self.score.ok_or_else(|| Error::Input("detection record without score".into()))?;
        if !(score > 0.0 && score < 1.0) {
            return Err(Error::Input(format!("score {score} outside (0, 1)")));
        }
        let bbox = self.to_box()?;
        Ok(Detection { bbox, score, class: self.class, key: BevKey::of(bbox.center.x, bbox.center.y, 1.0) })
    }
}

pub fn write_jsonl<W: Write>(mut w: W, records: &[BoxRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Input(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in r.lines() {
        let line = line?;
        let len = line.len() as u64 + 1;
        if !line.trim().is_empty() {
            let rec = serde_json::from_str(&line).map_err(|e| Error::Decode { offset, reason: e.to_string() })?;
            out.push(rec);
        }
        offset += len;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let b = Box3D::new(Vector3::new(1.0, 2.0, 0.5), Vector3::new(4.0, 2.0, 1.5), 0.3).unwrap();
        let recs = vec![
            BoxRecord::from_detection(0, &Detection { bbox: b, score: 0.75, class: 0, key: BevKey::new(0, 0) }),
            BoxRecord::from_label(3, &LabeledBox { bbox: b, class: 1 }),
        ];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &recs).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, recs);
        assert!(back[1].to_detection().is_err());
        assert_eq!(back[1].to_label().unwrap().bbox, b);
    }

    #[test]
    fn bad_line_reports_offset() {
        let text = "{\"center\":[0,0,0],\"dims\":[1,1,1],\"yaw\":0,\"class\":0}\nnot json\n";
        match read_jsonl(text.as_bytes()) {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 52),
            other => panic!("{other:?}"),
        }
    }
}
