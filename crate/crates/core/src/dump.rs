//! CSMD feature dumps: the per-image transport format for tapped activations.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CSMD" | version u32 = 1 | image_id: u16 len + UTF-8 | flags u8
//! | H u32 | W u32 | layer count u32
//! | per layer: name u8 len + UTF-8 | H_l u32 | W_l u32 | C_l u32 | H_l*W_l*C_l f32
//! | [mask: H*W u16] | [predicted: H*W u16]
//! ```
//!
//! Flag bit 0 marks a ground-truth mask, bit 1 a predicted-class map. In both
//! maps `0xFFFF` stands for OOD.

use std::collections::BTreeSet;
use std::path::Path;

use crate::binio::{checked_volume, read_file, write_file, ByteReader, ByteWriter};
use crate::error::{Error, ParseError, Result};
use crate::micronet::TapMap;
use crate::tensorgrid::{FeatureMap, LayerId};

pub const MAGIC: &[u8; 4] = b"CSMD";
pub const VERSION: u32 = 1;
pub const OOD_LABEL: u16 = 0xFFFF;

const FLAG_MASK: u8 = 1;
const FLAG_PREDICTED: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDump {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<FeatureMap>,
    pub mask: Option<Vec<u16>>,
    pub predicted: Option<Vec<u16>>,
}

impl FeatureDump {
    pub fn new(image_id: impl Into<String>, height: usize, width: usize, layers: Vec<FeatureMap>) -> Result<Self> {
        let d = FeatureDump {
            image_id: image_id.into(),
            height,
            width,
            layers,
            mask: None,
            predicted: None,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn with_mask(mut self, mask: Vec<u16>) -> Result<Self> {
        self.mask = Some(mask);
        self.validate()?;
        Ok(self)
    }

    pub fn with_predicted(mut self, predicted: Vec<u16>) -> Result<Self> {
        self.predicted = Some(predicted);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_id.len() > u16::MAX as usize {
            return Err(Error::contract("image id longer than 65535 bytes"));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::contract("dump resolution must be positive"));
        }
        let mut seen = BTreeSet::new();
        for l in &self.layers {
            if !seen.insert(l.layer) {
                return Err(Error::contract(format!("layer {} appears twice", l.layer)));
            }
        }
        let pixels = self.height * self.width;
        for (what, map) in [("mask", &self.mask), ("predicted map", &self.predicted)] {
            if let Some(m) = map {
                if m.len() != pixels {
                    return Err(Error::contract(format!(
                        "{what} has {} entries for a {}x{} dump",
                        m.len(),
                        self.height,
                        self.width
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn layer(&self, id: LayerId) -> Option<&FeatureMap> {
        self.layers.iter().find(|l| l.layer == id)
    }

    pub fn taps(&self) -> TapMap {
        self.layers.iter().map(|l| (l.layer, l.clone())).collect()
    }

    /// The dump as it reads back after a write: values rounded to f32.
    pub fn quantized(&self) -> FeatureDump {
        let mut d = self.clone();
        for l in &mut d.layers {
            for v in &mut l.data {
                *v = *v as f32 as f64;
            }
        }
        d
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut w = ByteWriter::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.str16(&self.image_id)?;
        let mut flags = 0;
        if self.mask.is_some() {
            flags |= FLAG_MASK;
        }
        if self.predicted.is_some() {
            flags |= FLAG_PREDICTED;
        }
        w.u8(flags);
        w.len_u32(self.height, "dump height")?;
        w.len_u32(self.width, "dump width")?;
        w.len_u32(self.layers.len(), "layer count")?;
        for l in &self.layers {
            w.str8(l.layer.name())?;
            w.len_u32(l.height, "layer height")?;
            w.len_u32(l.width, "layer width")?;
            w.len_u32(l.channels, "layer channels")?;
            for &v in &l.data {
                let q = v as f32;
                if !q.is_finite() {
                    return Err(Error::contract(format!("layer {} value {v} overflows f32", l.layer)));
                }
                w.f32(q);
            }
        }
        for m in [&self.mask, &self.predicted].into_iter().flatten() {
            for &v in m {
                w.u16(v);
            }
        }
        Ok(w.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ParseError> {
        let mut r = ByteReader::new(bytes);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let image_id = r.str16("image id")?;
        let flags_at = r.offset();
        let flags = r.u8("flags")?;
        if flags & !(FLAG_MASK | FLAG_PREDICTED) != 0 {
            return Err(r.invalid(flags_at, "flags", format!("unknown bits in {flags:#04x}")));
        }
        let dims_at = r.offset();
        let height = r.u32("dump height")? as usize;
        let width = r.u32("dump width")? as usize;
        if height == 0 || width == 0 {
            return Err(r.invalid(dims_at, "resolution", format!("{height}x{width}")));
        }
        let pixels = checked_volume(&[height, width], dims_at, "resolution")?;
        let count = r.u32("layer count")? as usize;
        let mut layers = Vec::new();
        let mut seen = BTreeSet::new();
        for i in 0..count {
            let name_at = r.offset();
            let name = r.str8(&format!("layer {i} name"))?;
            let layer: LayerId = name
                .parse()
                .map_err(|_| r.invalid(name_at, "layer name", format!("unknown layer {name:?}")))?;
            if !seen.insert(layer) {
                return Err(r.invalid(name_at, "layer name", format!("duplicate layer {name}")));
            }
            let shape_at = r.offset();
            let ctx = format!("layer {name} shape");
            let (h, w, c) = (r.u32(&ctx)? as usize, r.u32(&ctx)? as usize, r.u32(&ctx)? as usize);
            let n = checked_volume(&[h, w, c], shape_at, &ctx)?;
            let values_at = r.offset();
            let values = r.f32_array(n, &format!("layer {name} values ({h}x{w}x{c} f32)"))?;
            let data = values.into_iter().map(f64::from).collect();
            let map = FeatureMap::new(layer, h, w, c, data).map_err(|e| {
                r.invalid(values_at, &format!("layer {name}"), e.to_string())
            })?;
            layers.push(map);
        }
        let mask = if flags & FLAG_MASK != 0 {
            Some(r.u16_array(pixels, "mask")?)
        } else {
            None
        };
        let predicted = if flags & FLAG_PREDICTED != 0 {
            Some(r.u16_array(pixels, "predicted map")?)
        } else {
            None
        };
        r.finish("dump")?;
        Ok(FeatureDump {
            image_id,
            height,
            width,
            layers,
            mask,
            predicted,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&read_file(path)?)?)
    }
}
