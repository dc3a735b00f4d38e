//! Gate heatmaps: capture per-token gate activations during a forward pass,
//! average over channels, and export as CSV or binary PGM.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::pipeline::Model;
use crate::tg_block::{GateCapture, Submodule};

/// Channel-averaged gate values, `values[site * frames + frame]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub values: Vec<f64>,
    pub sites: usize,
    pub frames: usize,
    pub layer: usize,
    pub submodule: Submodule,
    pub sample_id: u64,
}

impl Heatmap {
    pub fn shape(&self) -> [usize; 2] {
        [self.sites, self.frames]
    }

    pub fn get(&self, site: usize, frame: usize) -> f64 {
        self.values[site * self.frames + frame]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Csv,
    Pgm,
}

impl FromStr for HeatmapFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "pgm" => Ok(Self::Pgm),
            other => Err(Error::Usage(format!("unknown heatmap format `{other}`"))),
        }
    }
}

/// Gate activations of `submodule` in `layer`, laid out `[L_V, T, D_V]`.
pub fn capture_gates(model: &Model, video: &Tensor, layer: usize, submodule: Submodule) -> Result<Tensor> {
    let tg = &model.config().tg;
    if !tg.gating_enabled {
        return Err(Error::Usage("gate capture needs gating_enabled".into()));
    }
    if layer >= tg.num_layers {
        return Err(Error::Usage(format!("layer {layer} out of range for {} TG layers", tg.num_layers)));
    }
    let mut sink: Vec<GateCapture> = Vec::new();
    model.forward(video, Some(&mut sink))?;
    let cap = sink
        .into_iter()
        .find(|c| c.layer == layer && c.submodule == submodule)
        .ok_or_else(|| Error::Usage(format!("{submodule} sublayer of layer {layer} is disabled")))?;
    match submodule {
        Submodule::Temporal => Ok(cap.values),
        Submodule::Spatial | Submodule::Mlp => cap.values.permute(&[1, 0, 2]),
    }
}

/// Temporal-attention gates of `layer`, `[L_V, T, D_V]`.
pub fn capture_temporal_gates(model: &Model, video: &Tensor, layer: usize) -> Result<Tensor> {
    capture_gates(model, video, layer, Submodule::Temporal)
}

/// Mean over the channel axis of a `[L_V, T, D_V]` gate tensor.
pub fn pool_gates(g: &Tensor) -> Result<Heatmap> {
    let &[sites, frames, d] = g.shape() else {
        return Err(Error::InvalidShape {
            op: "pool_gates",
            detail: format!("expected [L_V, T, D_V], got {:?}", g.shape()),
        });
    };
    let values = if d == 0 {
        vec![f64::NAN; sites * frames]
    } else {
        g.data().chunks_exact(d).map(|c| c.iter().sum::<f64>() / d as f64).collect()
    };
    Ok(Heatmap {
        values,
        sites,
        frames,
        layer: 0,
        submodule: Submodule::Temporal,
        sample_id: 0,
    })
}

fn check_range(h: &Heatmap) -> Result<()> {
    if h.values.len() != h.sites * h.frames {
        return Err(Error::InvalidShape {
            op: "export_heatmap",
            detail: format!("{} values for a {}x{} heatmap", h.values.len(), h.sites, h.frames),
        });
    }
    match h.values.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::Usage(format!("heatmap value {} at index {i} is outside [0, 1]", h.values[i]))),
        None => Ok(()),
    }
}

/// One line per site, one column per frame, shortest round-trip decimals.
pub fn heatmap_csv(h: &Heatmap) -> Result<String> {
    check_range(h)?;
    let mut out = String::new();
    for s in 0..h.sites {
        for f in 0..h.frames {
            if f > 0 {
                out.push(',');
            }
            let _ = write!(out, "{}", h.get(s, f));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Binary greymap, width = frames, height = sites, `floor(v * 255 + 0.5)`.
pub fn heatmap_pgm(h: &Heatmap) -> Result<Vec<u8>> {
    check_range(h)?;
    let mut out = format!("P5\n{} {}\n255\n", h.frames, h.sites).into_bytes();
    out.extend(h.values.iter().map(|v| (v * 255.0 + 0.5).floor() as u8));
    Ok(out)
}

pub fn export_heatmap(h: &Heatmap, path: &Path, format: HeatmapFormat) -> Result<()> {
    let bytes = match format {
        HeatmapFormat::Csv => heatmap_csv(h)?.into_bytes(),
        HeatmapFormat::Pgm => heatmap_pgm(h)?,
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses [`heatmap_csv`] output back into rows.
pub fn parse_heatmap_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .map(|line| {
            line.split(',')
                .map(|v| v.parse::<f64>().map_err(|e| Error::Format(format!("heatmap value `{v}`: {e}"))))
                .collect()
        })
        .collect()
}
