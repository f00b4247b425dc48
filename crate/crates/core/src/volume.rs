//! Volumes, label masks and axial slicing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(depth, height, width)` voxel extents.
pub type Dims = [usize; 3];

fn numel(dims: Dims) -> usize {
    dims.iter().product()
}

/// A 3D image with intensities in `[0, 1]`, row-major with width fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        if dims.contains(&0) || numel(dims) != voxels.len() {
            return Err(Error::Shape {
                op: "volume",
                detail: format!("dims {dims:?} vs {} voxels", voxels.len()),
            });
        }
        if let Some(bad) = voxels.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("voxel intensity {bad} outside [0, 1]")));
        }
        Ok(Self { dims, voxels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims[1] * self.dims[2];
        &self.voxels[z * plane..(z + 1) * plane]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Full,
    BoundingBox,
}

/// Per-voxel class ids (0 is background).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    dims: Dims,
    labels: Vec<u8>,
    kind: MaskKind,
}

impl LabelMask {
    pub fn new(dims: Dims, labels: Vec<u8>, kind: MaskKind) -> Result<Self> {
        if dims.contains(&0) || numel(dims) != labels.len() {
            return Err(Error::Shape {
                op: "label_mask",
                detail: format!("dims {dims:?} vs {} labels", labels.len()),
            });
        }
        Ok(Self { dims, labels, kind })
    }

    pub fn empty(dims: Dims, kind: MaskKind) -> Self {
        Self {
            dims,
            labels: vec![0; numel(dims)],
            kind,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn slice(&self, z: usize) -> &[u8] {
        let plane = self.dims[1] * self.dims[2];
        &self.labels[z * plane..(z + 1) * plane]
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }

    pub fn slice_foreground(&self, z: usize) -> usize {
        self.slice(z).iter().filter(|&&l| l != 0).count()
    }
}

/// One organ annotation of one patient.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedVolume {
    pub patient_id: u32,
    pub class_id: u8,
    pub volume: Volume,
    pub mask: LabelMask,
}

impl AnnotatedVolume {
    pub fn new(patient_id: u32, class_id: u8, volume: Volume, mask: LabelMask) -> Result<Self> {
        if class_id == 0 {
            return Err(Error::Invalid("class id 0 is reserved for background".into()));
        }
        if volume.dims() != mask.dims() {
            return Err(Error::Shape {
                op: "annotated_volume",
                detail: format!("image {:?} vs mask {:?}", volume.dims(), mask.dims()),
            });
        }
        if let Some(l) = mask.labels().iter().find(|&&l| l != 0 && l != class_id) {
            return Err(Error::Invalid(format!(
                "mask for class {class_id} contains foreign label {l}"
            )));
        }
        Ok(Self {
            patient_id,
            class_id,
            volume,
            mask,
        })
    }
}

/// Tight axis-aligned rectangle around one slice's foreground, inclusive,
/// as `(row_min, row_max, col_min, col_max)`.
pub fn slice_bounds(slice: &[u8], width: usize) -> Option<(usize, usize, usize, usize)> {
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for (i, _) in slice.iter().enumerate().filter(|(_, &l)| l != 0) {
        let (r, c) = (i / width, i % width);
        bounds = Some(match bounds {
            None => (r, r, c, c),
            Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
        });
    }
    bounds
}

/// Replaces each axial slice's foreground by its filled bounding rectangle.
///
/// The fill label is the slice's first foreground label in row-major order,
/// which is the record's class id for a single-organ mask.
pub fn to_bounding_box(mask: &LabelMask) -> LabelMask {
    let [d, h, w] = mask.dims;
    let mut out = vec![0u8; mask.labels.len()];
    for z in 0..d {
        let src = mask.slice(z);
        let Some((r0, r1, c0, c1)) = slice_bounds(src, w) else {
            continue;
        };
        let label = src.iter().copied().find(|&l| l != 0).unwrap_or(1);
        let dst = &mut out[z * h * w..(z + 1) * h * w];
        for r in r0..=r1 {
            dst[r * w + c0..=r * w + c1].fill(label);
        }
    }
    LabelMask {
        dims: mask.dims,
        labels: out,
        kind: MaskKind::BoundingBox,
    }
}

/// One axial slice as model-ready tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct SlicePair {
    /// `[1, H, W]` intensities.
    pub image: Tensor,
    /// `[1, H, W]` binary labels.
    pub label: Tensor,
    pub z: usize,
}

pub fn image_slice(volume: &Volume, z: usize) -> Tensor {
    let [_, h, w] = volume.dims;
    Tensor::new(vec![1, h, w], volume.slice(z).to_vec()).expect("slice extents")
}

pub fn label_slice(mask: &LabelMask, z: usize) -> Tensor {
    let [_, h, w] = mask.dims;
    let data = mask
        .slice(z)
        .iter()
        .map(|&l| if l != 0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(vec![1, h, w], data).expect("slice extents")
}

/// All axial slices in z order, labels binarized to `{0, 1}`.
pub fn axial_slices(v: &AnnotatedVolume) -> Vec<SlicePair> {
    (0..v.volume.dims[0])
        .map(|z| SlicePair {
            image: image_slice(&v.volume, z),
            label: label_slice(&v.mask, z),
            z,
        })
        .collect()
}

/// Restacks binary `[1, H, W]` slices into a mask labelled `class_id`.
pub fn restack_mask(slices: &[Tensor], class_id: u8, kind: MaskKind) -> Result<LabelMask> {
    let Some(first) = slices.first() else {
        return Err(Error::Invalid("no slices to restack".into()));
    };
    let (h, w) = match first.shape() {
        &[1, h, w] => (h, w),
        other => {
            return Err(Error::Shape {
                op: "restack",
                detail: format!("slice shape {other:?}"),
            })
        }
    };
    let mut labels = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.shape() != [1, h, w] {
            return Err(Error::Shape {
                op: "restack",
                detail: format!("slice shape {:?} vs [1, {h}, {w}]", s.shape()),
            });
        }
        labels.extend(s.data().iter().map(|&v| if v != 0.0 { class_id } else { 0 }));
    }
    LabelMask::new([slices.len(), h, w], labels, kind)
}

/// Restacks `[1, H, W]` image slices into a volume.
pub fn restack_volume(slices: &[Tensor]) -> Result<Volume> {
    let Some(first) = slices.first() else {
        return Err(Error::Invalid("no slices to restack".into()));
    };
    let [_, h, w] = <[usize; 3]>::try_from(first.shape()).map_err(|_| Error::Shape {
        op: "restack",
        detail: format!("slice shape {:?}", first.shape()),
    })?;
    let mut voxels = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        voxels.extend_from_slice(s.data());
    }
    Volume::new([slices.len(), h, w], voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_with(dims: Dims, points: &[(usize, usize, usize)], kind: MaskKind) -> LabelMask {
        let mut m = LabelMask::empty(dims, kind);
        for &(z, r, c) in points {
            m.labels[(z * dims[1] + r) * dims[2] + c] = 3;
        }
        m
    }

    #[test]
    fn tight_box_from_two_points() {
        let m = mask_with([1, 8, 9], &[(0, 2, 3), (0, 5, 7)], MaskKind::Full);
        let b = to_bounding_box(&m);
        assert_eq!(b.kind(), MaskKind::BoundingBox);
        for r in 0..8 {
            for c in 0..9 {
                let inside = (2..=5).contains(&r) && (3..=7).contains(&c);
                assert_eq!(b.labels()[r * 9 + c], if inside { 3 } else { 0 }, "({r},{c})");
            }
        }
    }

    #[test]
    fn empty_mask_boxes_to_empty() {
        let m = LabelMask::empty([3, 4, 4], MaskKind::Full);
        let b = to_bounding_box(&m);
        assert_eq!(b.foreground_count(), 0);
        assert_eq!(b.kind(), MaskKind::BoundingBox);
    }

    #[test]
    fn boxes_are_idempotent_and_supersets() {
        let m = mask_with([2, 6, 6], &[(0, 1, 1), (0, 2, 4), (1, 5, 0), (1, 3, 3)], MaskKind::Full);
        let b = to_bounding_box(&m);
        assert_eq!(to_bounding_box(&b), b);
        for (full, boxed) in m.labels().iter().zip(b.labels()) {
            assert!(*full == 0 || *boxed == *full);
        }
    }

    #[test]
    fn slices_restack_exactly() {
        let dims = [3, 4, 2];
        let voxels: Vec<f32> = (0..24).map(|i| i as f32 / 24.0).collect();
        let mask = mask_with(dims, &[(0, 0, 0), (2, 3, 1), (2, 1, 1)], MaskKind::Full);
        let av = AnnotatedVolume::new(4, 3, Volume::new(dims, voxels).unwrap(), mask).unwrap();
        let slices = axial_slices(&av);
        assert_eq!(slices.len(), 3);
        let images: Vec<Tensor> = slices.iter().map(|s| s.image.clone()).collect();
        let labels: Vec<Tensor> = slices.iter().map(|s| s.label.clone()).collect();
        assert_eq!(restack_volume(&images).unwrap(), av.volume);
        assert_eq!(restack_mask(&labels, 3, MaskKind::Full).unwrap(), av.mask);
        for s in &slices {
            let count = s.label.data().iter().filter(|&&v| v == 1.0).count();
            assert_eq!(count, av.mask.slice_foreground(s.z));
        }
    }

    #[test]
    fn foreign_labels_rejected() {
        let dims = [1, 2, 2];
        let v = Volume::new(dims, vec![0.0; 4]).unwrap();
        let m = LabelMask::new(dims, vec![0, 2, 0, 1], MaskKind::Full).unwrap();
        assert!(AnnotatedVolume::new(0, 1, v, m).is_err());
    }

    #[test]
    fn out_of_range_intensity_rejected() {
        assert!(Volume::new([1, 1, 2], vec![0.5, 1.5]).is_err());
        assert!(Volume::new([1, 1, 2], vec![0.5, f32::NAN]).is_err());
    }
}
