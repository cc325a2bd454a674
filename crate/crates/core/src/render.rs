//! Prediction rendering: palette maps, probability images and a
//! side-by-side panel.

use std::path::{Path, PathBuf};

use crate::checkpoint::{write_archive, Archive, NamedArray};
use crate::data::{load_image, palette};
use crate::error::{Result, ScdError};
use crate::graph::Graph;
use crate::imageio;
use crate::model::{decode_predictions, DecodedMaps, ScdNet};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::check_input_size;

/// Gap between composite panels, in pixels.
pub const GUTTER: usize = 4;
pub const GUTTER_COLOR: [u8; 3] = [255, 255, 255];

pub fn probability_to_gray(p: &[f32]) -> Vec<u8> {
    p.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect()
}

fn colorize(indices: &[u8], colors: &[[u8; 3]]) -> Vec<[u8; 3]> {
    indices.iter().map(|&i| colors[i as usize]).collect()
}

/// Four `w x h` RGB panels in a row separated by [`GUTTER`].
pub fn composite(panels: &[Vec<[u8; 3]>; 4], width: usize, height: usize) -> (usize, Vec<u8>) {
    let total = 4 * width + 3 * GUTTER;
    let mut out = Vec::with_capacity(total * height * 3);
    for y in 0..height {
        for (k, panel) in panels.iter().enumerate() {
            if k > 0 {
                (0..GUTTER).for_each(|_| out.extend_from_slice(&GUTTER_COLOR));
            }
            panel[y * width..(y + 1) * width].iter().for_each(|px| out.extend_from_slice(px));
        }
    }
    (total, out)
}

/// Files written by [`render_maps`].
#[derive(Clone, Debug)]
pub struct Rendered {
    pub sem1: PathBuf,
    pub sem2: PathBuf,
    pub change: PathBuf,
    pub boundary: PathBuf,
    pub composite: PathBuf,
    pub raw: PathBuf,
}

pub fn render_maps(maps: &DecodedMaps, classes: usize, out_dir: &Path) -> Result<Rendered> {
    std::fs::create_dir_all(out_dir)?;
    let (w, h) = (maps.width, maps.height);
    let colors = palette(classes);
    let r = Rendered {
        sem1: out_dir.join("sem1.png"),
        sem2: out_dir.join("sem2.png"),
        change: out_dir.join("change.png"),
        boundary: out_dir.join("boundary.png"),
        composite: out_dir.join("composite.png"),
        raw: out_dir.join("maps.bin"),
    };
    imageio::write_indexed(&r.sem1, w, h, &colors, maps.sem1.data())?;
    imageio::write_indexed(&r.sem2, w, h, &colors, maps.sem2.data())?;
    let change = probability_to_gray(&maps.change_prob);
    let boundary = probability_to_gray(&maps.boundary_prob);
    imageio::write_gray(&r.change, w, h, &change)?;
    imageio::write_gray(&r.boundary, w, h, &boundary)?;
    let gray = |g: &[u8]| g.iter().map(|&v| [v; 3]).collect::<Vec<_>>();
    let panels = [colorize(maps.sem1.data(), &colors), colorize(maps.sem2.data(), &colors), gray(&change), gray(&boundary)];
    let (cw, rgb) = composite(&panels, w, h);
    imageio::write_rgb(&r.composite, cw, h, &rgb)?;

    let shape = vec![h, w];
    let arr = |name: &str, data: Vec<f32>| NamedArray { name: name.into(), shape: shape.clone(), kind: None, data };
    let raw = Archive {
        arrays: vec![
            arr("sem1", maps.sem1.data().iter().map(|&v| v as f32).collect()),
            arr("sem2", maps.sem2.data().iter().map(|&v| v as f32).collect()),
            arr("change_prob", maps.change_prob.clone()),
            arr("boundary_prob", maps.boundary_prob.clone()),
        ],
        meta: serde_json::json!({ "classes": classes }),
    };
    write_archive(&r.raw, &raw)?;
    Ok(r)
}

/// Decoded maps for one image pair.
pub fn predict_pair(net: &ScdNet, store: &ParamStore<f32>, image_t1: &Tensor<f32>, image_t2: &Tensor<f32>) -> Result<DecodedMaps> {
    if image_t1.shape() != image_t2.shape() {
        return Err(ScdError::Shape(format!("image sizes differ: {:?} vs {:?}", image_t1.shape(), image_t2.shape())));
    }
    let (c, h, w) = match *image_t1.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(ScdError::Shape(format!("expected [3,H,W], got {:?}", image_t1.shape()))),
    };
    check_input_size(h, w)?;
    let g = Graph::inference(store);
    let a = g.input(image_t1.clone().reshape(&[1, c, h, w])?);
    let b = g.input(image_t2.clone().reshape(&[1, c, h, w])?);
    let preds = net.forward(&g, a, b)?;
    Ok(decode_predictions(&g, &preds, net.config.change_threshold).remove(0))
}

pub fn predict_files(net: &ScdNet, store: &ParamStore<f32>, t1: &Path, t2: &Path, out_dir: &Path) -> Result<Rendered> {
    let maps = predict_pair(net, store, &load_image(t1)?, &load_image(t2)?)?;
    render_maps(&maps, net.config.classes, out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelMap;

    #[test]
    fn gray_rounding() {
        assert_eq!(probability_to_gray(&[0.0, 0.5, 1.0, 0.2, 1.5, -1.0]), vec![0, 128, 255, 51, 255, 0]);
    }

    #[test]
    fn composite_layout() {
        let (w, h) = (3, 2);
        let panel = |v: u8| vec![[v; 3]; w * h];
        let (cw, rgb) = composite(&[panel(1), panel(2), panel(3), panel(4)], w, h);
        assert_eq!(cw, 4 * w + 3 * GUTTER);
        assert_eq!(rgb.len(), cw * h * 3);
        assert_eq!(rgb[(w + GUTTER) * 3], 2);
        assert_eq!(rgb[w * 3], 255);
    }

    #[test]
    fn rendered_files_follow_the_contracts() {
        let (h, w) = (4, 5);
        let sem1 = LabelMap::new(h, w, (0..20).map(|i| (i % 5) as u8).collect()).unwrap();
        let maps = DecodedMaps {
            sem1: sem1.clone(),
            sem2: LabelMap::zeros(h, w),
            change_prob: (0..20).map(|i| i as f32 / 19.0).collect(),
            boundary_prob: vec![0.25; 20],
            height: h,
            width: w,
        };
        let dir = tempfile::tempdir().unwrap();
        let r = render_maps(&maps, 5, dir.path()).unwrap();
        assert_eq!(imageio::read_indices(&r.sem1).unwrap().data, sem1.data());
        let colors = palette(5);
        let rgb = imageio::read_rgb(&r.sem1).unwrap();
        for (p, &i) in sem1.data().iter().enumerate() {
            assert_eq!(&rgb.data[p * 3..p * 3 + 3], &colors[i as usize]);
        }
        assert_eq!(imageio::read_indices(&r.change).unwrap().data, probability_to_gray(&maps.change_prob));
        let comp = imageio::read_rgb(&r.composite).unwrap();
        assert_eq!((comp.width, comp.height), (4 * w + 3 * GUTTER, h));
        let raw = crate::checkpoint::read_archive(&r.raw).unwrap();
        assert_eq!(raw.arrays[2].data, maps.change_prob);
    }
}
