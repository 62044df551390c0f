use std::path::Path;

use super::{quantize, write_pgm, GrayImage, Raster};
use crate::error::{Error, Result};
use crate::explain::SaliencyMap;
use crate::prior::make_pseudo_label;

/// Three panels side by side: input, saliency, Otsu mask.
pub fn render_heatmap_overlay(image: &GrayImage, map: &SaliencyMap, path: &Path) -> Result<Raster> {
    if (image.height, image.width) != (map.height, map.width) {
        return Err(Error::Shape {
            op: "render_heatmap_overlay",
            lhs: vec![image.height, image.width],
            rhs: vec![map.height, map.width],
        });
    }
    let (h, w) = (image.height, image.width);
    let mask = make_pseudo_label(map);
    let mut levels = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        let row = y * w..(y + 1) * w;
        levels.extend(image.values[row.clone()].iter().map(|&v| quantize(v as f64)));
        levels.extend(map.values[row.clone()].iter().map(|&v| quantize(v)));
        levels.extend(mask.bits[row].iter().map(|&b| b * 255));
    }
    let raster = Raster {
        height: h,
        width: 3 * w,
        levels,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_pgm(path, &raster)?;
    Ok(raster)
}
