//! Posed multi-view datasets on disk and single-view prompt propagation.
//!
//! Directory layout:
//!
//! ```text
//! images/000.png   8-bit RGB
//! masks/000.png    8-bit gray, 0 = valid, 255 = occluded
//! cameras.json     intrinsics, 3×4 world-from-camera poses (row-major), near, far, holdout_indices
//! points.json      optional sparse point cloud with per-view observations
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::{project, Intrinsics, Pose};
use crate::error::{Error, Result};

/// Row-major RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f32; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Box-filter downsampling by an integer factor; trailing rows/columns that
    /// do not fill a whole block are dropped.
    pub fn downsample(&self, factor: usize) -> RgbImage {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = RgbImage::new(w, h);
        let norm = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.get(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.set(x, y, acc.map(|v| v * norm));
            }
        }
        out
    }

    fn to_rgb8(&self) -> image::RgbImage {
        let bytes = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
    }

    fn from_rgb8(img: &image::RgbImage) -> Self {
        RgbImage {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save(path)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Binary validity mask; `true` marks an occluded (excluded) pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn is_occluded(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, occluded: bool) {
        self.data[y * self.width + x] = occluded;
    }

    pub fn occluded_count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn valid_count(&self) -> usize {
        self.data.len() - self.occluded_count()
    }

    pub fn inverted(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|m| !m).collect(),
        }
    }

    /// Max-pooling downsample: a block is occluded if any member is.
    pub fn downsample(&self, factor: usize) -> Mask {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = Mask::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let any = (0..factor)
                    .any(|dy| (0..factor).any(|dx| self.is_occluded(x * factor + dx, y * factor + dy)));
                out.set(x, y, any);
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.data.iter().map(|&m| if m { 255u8 } else { 0 }).collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Training input: per-view images, validity masks and cameras.
#[derive(Clone, Debug, PartialEq)]
pub struct PosedImageSet {
    pub images: Vec<RgbImage>,
    pub masks: Vec<Mask>,
    pub intrinsics: Intrinsics,
    pub poses: Vec<Pose>,
    pub near: f64,
    pub far: f64,
    pub holdout_indices: Vec<usize>,
}

/// Every 8th view, starting at 0.
pub fn default_holdout(views: usize) -> Vec<usize> {
    (0..views).step_by(8).collect()
}

impl PosedImageSet {
    pub fn num_views(&self) -> usize {
        self.images.len()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.images
            .first()
            .map(|i| (i.width, i.height))
            .unwrap_or((0, 0))
    }

    pub fn is_holdout(&self, view: usize) -> bool {
        self.holdout_indices.contains(&view)
    }

    pub fn training_views(&self) -> Vec<usize> {
        (0..self.num_views()).filter(|v| !self.is_holdout(*v)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.images.len();
        if v < 2 {
            return Err(Error::invalid(format!("dataset needs at least 2 views, got {v}")));
        }
        if self.masks.len() != v || self.poses.len() != v {
            return Err(Error::invalid(format!(
                "view count mismatch: {v} images, {} masks, {} poses",
                self.masks.len(),
                self.poses.len()
            )));
        }
        let (w, h) = self.resolution();
        for (i, (img, mask)) in self.images.iter().zip(&self.masks).enumerate() {
            if (img.width, img.height) != (w, h) || (mask.width, mask.height) != (w, h) {
                return Err(Error::invalid(format!("view {i} does not match resolution {w}x{h}")));
            }
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid(format!(
                "need 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        self.intrinsics.validate()?;
        for (i, pose) in self.poses.iter().enumerate() {
            if !pose.is_rigid(1e-6) {
                return Err(Error::invalid(format!("pose {i} is not a rigid transform")));
            }
        }
        if let Some(&bad) = self.holdout_indices.iter().find(|&&i| i >= v) {
            return Err(Error::invalid(format!("holdout index {bad} out of range 0..{v}")));
        }
        let train = self.training_views();
        if train.is_empty() {
            return Err(Error::invalid("every view is held out"));
        }
        for t in train {
            if self.masks[t].valid_count() == 0 {
                return Err(Error::invalid(format!("training view {t} has no valid pixels")));
            }
        }
        Ok(())
    }

    /// Same set with every mask cleared (occluders become supervision).
    pub fn without_masks(&self) -> PosedImageSet {
        let mut out = self.clone();
        for m in &mut out.masks {
            m.data.iter_mut().for_each(|v| *v = false);
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CamerasFile {
    intrinsics: Intrinsics,
    poses: Vec<Pose>,
    near: f64,
    far: f64,
    holdout_indices: Vec<usize>,
}

fn image_path(dir: &Path, sub: &str, index: usize) -> PathBuf {
    dir.join(sub).join(format!("{index:03}.png"))
}

/// Writes a dataset in the directory layout described at module level.
pub fn save_dataset(set: &PosedImageSet, dir: &Path) -> Result<()> {
    if set.images.is_empty() {
        return Err(Error::invalid("refusing to save a dataset with zero views"));
    }
    set.validate()?;
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for (i, (img, mask)) in set.images.iter().zip(&set.masks).enumerate() {
        img.save_png(&image_path(dir, "images", i))?;
        mask.save_png(&image_path(dir, "masks", i))?;
    }
    let cams = CamerasFile {
        intrinsics: set.intrinsics,
        poses: set.poses.clone(),
        near: set.near,
        far: set.far,
        holdout_indices: set.holdout_indices.clone(),
    };
    let path = dir.join("cameras.json");
    fs::write(&path, serde_json::to_string_pretty(&cams)?).map_err(|e| Error::io(&path, e))
}

fn read_image(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::format(path, "missing file"));
    }
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads a dataset, downsampling images by box averaging and masks by
/// max-pooling when `scale > 1`.
pub fn load_dataset(dir: &Path, scale: usize) -> Result<PosedImageSet> {
    if scale == 0 {
        return Err(Error::invalid("scale must be at least 1"));
    }
    let path = dir.join("cameras.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let cams: CamerasFile =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut images = Vec::with_capacity(cams.poses.len());
    let mut masks = Vec::with_capacity(cams.poses.len());
    let mut dims = None;
    for i in 0..cams.poses.len() {
        let ipath = image_path(dir, "images", i);
        let img = RgbImage::from_rgb8(&read_image(&ipath)?.to_rgb8());
        let mpath = image_path(dir, "masks", i);
        let gray = read_image(&mpath)?.to_luma8();
        if (gray.width() as usize, gray.height() as usize) != (img.width, img.height) {
            return Err(Error::format(&mpath, "mask dimensions differ from image"));
        }
        if let Some(d) = dims {
            if d != (img.width, img.height) {
                return Err(Error::format(&ipath, format!("dimensions differ from view 0 {d:?}")));
            }
        }
        dims = Some((img.width, img.height));
        let mut data = Vec::with_capacity(gray.len());
        for &b in gray.as_raw() {
            match b {
                0 => data.push(false),
                255 => data.push(true),
                other => {
                    return Err(Error::format(&mpath, format!("non-binary mask value {other}")))
                }
            }
        }
        let mask = Mask {
            width: img.width,
            height: img.height,
            data,
        };
        images.push(img.downsample(scale));
        masks.push(mask.downsample(scale));
    }
    let set = PosedImageSet {
        images,
        masks,
        intrinsics: cams.intrinsics.scaled(scale),
        poses: cams.poses,
        near: cams.near,
        far: cams.far,
        holdout_indices: cams.holdout_indices,
    };
    set.validate()?;
    Ok(set)
}

/// One observation of a sparse point in a view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub view: usize,
    pub xy: [f64; 2],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparsePointCloud {
    pub points: Vec<[f64; 3]>,
    pub observations: Vec<Vec<Observation>>,
}

impl SparsePointCloud {
    pub fn validate(&self, views: usize, width: usize, height: usize) -> Result<()> {
        if self.points.len() != self.observations.len() {
            return Err(Error::invalid("points and observations differ in length"));
        }
        for (i, obs) in self.observations.iter().enumerate() {
            for o in obs {
                let inside = o.xy[0] >= 0.0
                    && o.xy[1] >= 0.0
                    && o.xy[0] < width as f64
                    && o.xy[1] < height as f64;
                if o.view >= views || !inside {
                    return Err(Error::invalid(format!("point {i} has invalid observation {o:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Prompt locations carried to every view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PropagatedPrompts {
    /// Per view, the projected prompt locations that landed inside the image.
    pub per_view: Vec<Vec<[f64; 2]>>,
    /// Per prompt, the index of the matched sparse point.
    pub matched_points: Vec<Option<usize>>,
    /// Prompts with no observation within the search radius.
    pub unmatched: Vec<usize>,
}

/// Lifts prompts on `source_view` to their nearest observed sparse points and
/// reprojects those points into every view.
pub fn propagate_prompts(
    prompts: &[[f64; 2]],
    source_view: usize,
    cloud: &SparsePointCloud,
    set: &PosedImageSet,
    pixel_radius: f64,
) -> Result<PropagatedPrompts> {
    if cloud.points.is_empty() {
        return Err(Error::invalid("sparse point cloud is empty"));
    }
    if source_view >= set.num_views() {
        return Err(Error::invalid(format!("source view {source_view} out of range")));
    }
    let (w, h) = set.resolution();
    let mut out = PropagatedPrompts {
        per_view: vec![Vec::new(); set.num_views()],
        ..Default::default()
    };
    for (pi, prompt) in prompts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (idx, obs) in cloud.observations.iter().enumerate() {
            for o in obs.iter().filter(|o| o.view == source_view) {
                let d = ((o.xy[0] - prompt[0]).powi(2) + (o.xy[1] - prompt[1]).powi(2)).sqrt();
                if d <= pixel_radius && best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((idx, d));
                }
            }
        }
        out.matched_points.push(best.map(|(i, _)| i));
        let Some((idx, _)) = best else {
            out.unmatched.push(pi);
            continue;
        };
        let p = nalgebra::Vector3::from(cloud.points[idx]);
        for (v, pose) in set.poses.iter().enumerate() {
            if let Some((xy, _)) = project(pose, &set.intrinsics, &p) {
                if xy[0] >= 0.0 && xy[1] >= 0.0 && xy[0] < w as f64 && xy[1] < h as f64 {
                    out.per_view[v].push(xy);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    fn tiny_set(views: usize, w: usize, h: usize) -> PosedImageSet {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        let mut poses = Vec::new();
        for v in 0..views {
            let mut img = RgbImage::new(w, h);
            for y in 0..h {
                for x in 0..w {
                    let r = ((x * 7 + y * 3 + v * 11) % 256) as f32 / 255.0;
                    let g = ((x * 13 + v) % 256) as f32 / 255.0;
                    img.set(x, y, [r, g, 1.0 - r]);
                }
            }
            let mut mask = Mask::new(w, h);
            mask.set(v % w, 0, true);
            images.push(img);
            masks.push(mask);
            poses.push(Pose::look_at(
                Vector3::new(v as f64 * 0.1, 0.0, -3.0),
                Vector3::zeros(),
                Vector3::new(0.0, -1.0, 0.0),
            ));
        }
        PosedImageSet {
            images,
            masks,
            intrinsics: Intrinsics::centered(w as f64, w, h),
            poses,
            near: 1.0,
            far: 5.0,
            holdout_indices: default_holdout(views),
        }
    }

    #[test]
    fn round_trip_at_scale_one() {
        let dir = tempfile::tempdir().unwrap();
        let target = dir.path().join("nested/out");
        let set = tiny_set(3, 8, 6);
        save_dataset(&set, &target).unwrap();
        let back = load_dataset(&target, 1).unwrap();
        assert_eq!(back.masks, set.masks);
        assert_eq!(back.poses, set.poses);
        assert_eq!(back.holdout_indices, vec![0]);
        for (a, b) in back.images.iter().zip(&set.images) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1.0 / 255.0);
            }
        }
    }

    #[test]
    fn scale_four_downsamples() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = tiny_set(2, 64, 64);
        set.masks[1] = Mask::new(64, 64);
        set.masks[1].set(5, 9, true);
        save_dataset(&set, dir.path()).unwrap();
        let back = load_dataset(dir.path(), 4).unwrap();
        assert_eq!(back.resolution(), (16, 16));
        assert!(back.masks[1].is_occluded(1, 2));
        assert_eq!(back.masks[1].occluded_count(), 1);
        assert_eq!(back.intrinsics.fx, 16.0);
    }

    #[test]
    fn empty_set_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = tiny_set(2, 4, 4);
        set.images.clear();
        set.masks.clear();
        set.poses.clear();
        assert!(save_dataset(&set, dir.path()).is_err());
    }

    #[test]
    fn non_binary_mask_names_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny_set(2, 4, 4), dir.path()).unwrap();
        let bad = dir.path().join("masks/001.png");
        image::GrayImage::from_pixel(4, 4, image::Luma([7u8])).save(&bad).unwrap();
        let err = load_dataset(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("001.png"), "{err}");
    }

    #[test]
    fn missing_image_names_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&tiny_set(2, 4, 4), dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/001.png")).unwrap();
        let err = load_dataset(dir.path(), 1).unwrap_err().to_string();
        assert!(err.contains("001.png"), "{err}");
    }

    #[test]
    fn prompt_propagation_matches_and_reports_unmatched() {
        let set = tiny_set(3, 32, 32);
        let p = Vector3::new(0.1, 0.05, 0.2);
        let mut obs = Vec::new();
        for (v, pose) in set.poses.iter().enumerate() {
            let (xy, _) = project(pose, &set.intrinsics, &p).unwrap();
            obs.push(Observation { view: v, xy });
        }
        let cloud = SparsePointCloud {
            points: vec![[p.x, p.y, p.z]],
            observations: vec![obs.clone()],
        };
        let res = propagate_prompts(&[obs[0].xy, [0.0, 0.0]], 0, &cloud, &set, 8.0).unwrap();
        assert_eq!(res.matched_points, vec![Some(0), None]);
        assert_eq!(res.unmatched, vec![1]);
        for v in 0..3 {
            assert_eq!(res.per_view[v].len(), 1);
            let d = (res.per_view[v][0][0] - obs[v].xy[0]).abs() + (res.per_view[v][0][1] - obs[v].xy[1]).abs();
            assert!(d < 1e-9);
        }
    }
}
