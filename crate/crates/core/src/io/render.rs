//! Axial slice mosaics with coloured mask overlays.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const BLUE: [u8; 3] = [40, 90, 255];
pub const RED: [u8; 3] = [255, 40, 40];

/// A mask drawn over the greyscale image.
pub struct Overlay<'a> {
    pub mask: &'a Volume,
    pub colour: [u8; 3],
    pub alpha: f32,
}

/// Tiles the z-slices of `v` (values clamped to `[0, 1]`) into a grid with
/// `columns` tiles per row, blending each overlay where its mask is positive.
pub fn slice_mosaic(v: &Volume, overlays: &[Overlay], columns: usize) -> Result<RgbImage> {
    for o in overlays {
        if o.mask.dims() != v.dims() {
            return Err(Error::ShapeMismatch {
                what: "overlay vs image",
                left: o.mask.dims().to_vec(),
                right: v.dims().to_vec(),
            });
        }
    }
    let [nx, ny, nz] = v.dims();
    let columns = columns.clamp(1, nz);
    let rows = nz.div_ceil(columns);
    let mut img = RgbImage::new((columns * nx) as u32, (rows * ny) as u32);
    for z in 0..nz {
        let (ox, oy) = ((z % columns) * nx, (z / columns) * ny);
        for y in 0..ny {
            for x in 0..nx {
                let i = v.index(x, y, z);
                let g = v.data()[i].clamp(0.0, 1.0) * 255.0;
                let mut px = [g; 3];
                for o in overlays {
                    if o.mask.data()[i] > 0.0 {
                        for (p, &c) in px.iter_mut().zip(&o.colour) {
                            *p = (1.0 - o.alpha) * *p + o.alpha * c as f32;
                        }
                    }
                }
                img.put_pixel((ox + x) as u32, (oy + y) as u32, Rgb(px.map(|c| c.round() as u8)));
            }
        }
    }
    Ok(img)
}

pub fn save_png(path: &Path, img: &RgbImage) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeRole;

    #[test]
    fn mosaic_layout_and_overlay() {
        let v = Volume::from_fn([4, 3, 5], [1.0; 3], VolumeRole::Intensity, |_, _, z| z as f32 / 4.0).unwrap();
        let mask = Volume::from_fn([4, 3, 5], [1.0; 3], VolumeRole::BinaryMask, |x, y, z| {
            if (x, y, z) == (1, 1, 4) {
                1.0
            } else {
                0.0
            }
        })
        .unwrap();
        let img = slice_mosaic(
            &v,
            &[Overlay {
                mask: &mask,
                colour: RED,
                alpha: 1.0,
            }],
            2,
        )
        .unwrap();
        assert_eq!(img.dimensions(), (8, 9));
        assert_eq!(img.get_pixel(4, 0).0, [64, 64, 64]);
        assert_eq!(img.get_pixel(1, 7).0, RED);
        assert_eq!(img.get_pixel(0, 6).0, [255, 255, 255]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.png");
        save_png(&path, &img).unwrap();
        assert_eq!(image::open(&path).unwrap().to_rgb8(), img);
    }
}
