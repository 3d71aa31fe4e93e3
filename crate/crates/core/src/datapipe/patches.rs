use serde::{Deserialize, Serialize};

use super::image::{FaceImage, FACE_SIZE};
use crate::error::{Error, Result};

/// A named crop rectangle on the face canvas.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub name: String,
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchSpec {
    pub fn new(name: &str, row: usize, col: usize, height: usize, width: usize) -> Self {
        Self {
            name: name.to_string(),
            row,
            col,
            height,
            width,
        }
    }

    /// Eyes, snout and forehead on the 128x128 canonical canvas.
    pub fn defaults() -> [PatchSpec; 3] {
        [
            PatchSpec::new("eyes", 40, 16, 32, 96),
            PatchSpec::new("snout", 64, 32, 48, 64),
            PatchSpec::new("forehead", 8, 16, 32, 96),
        ]
    }

    /// Defaults rescaled to a smaller square canvas (`canvas` must divide 128).
    pub fn defaults_for_canvas(canvas: usize) -> Result<[PatchSpec; 3]> {
        if canvas == 0 || FACE_SIZE % canvas != 0 {
            return Err(Error::InvalidValue(format!("canvas {canvas} does not divide {FACE_SIZE}")));
        }
        let f = FACE_SIZE / canvas;
        let specs = Self::defaults().map(|s| PatchSpec::new(&s.name, s.row / f, s.col / f, s.height / f, s.width / f));
        for s in &specs {
            s.validate(canvas)?;
        }
        Ok(specs)
    }

    /// Rectangle inside the canvas, sides divisible by 4.
    pub fn validate(&self, canvas: usize) -> Result<()> {
        let fits = self.height > 0
            && self.width > 0
            && self.row + self.height <= canvas
            && self.col + self.width <= canvas;
        if !fits {
            return Err(Error::PatchBounds {
                name: self.name.clone(),
                row: self.row,
                col: self.col,
                height: self.height,
                width: self.width,
                canvas,
            });
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::InvalidValue(format!(
                "patch {} size {}x{} must be divisible by 4",
                self.name, self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.height).contains(&row) && (self.col..self.col + self.width).contains(&col)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn intersection_area(&self, other: &PatchSpec) -> usize {
        let rows = (self.row + self.height).min(other.row + other.height).saturating_sub(self.row.max(other.row));
        let cols = (self.col + self.width).min(other.col + other.width).saturating_sub(self.col.max(other.col));
        rows * cols
    }
}

fn check_square(face: &FaceImage) -> Result<usize> {
    if face.height() != face.width() {
        return Err(Error::shape("square canvas", format!("{}x{}", face.height(), face.width())));
    }
    Ok(face.height())
}

/// Copies the three patch rectangles out of `face`.
pub fn extract_patches(face: &FaceImage, specs: &[PatchSpec; 3]) -> Result<[FaceImage; 3]> {
    let canvas = check_square(face)?;
    let crop = |s: &PatchSpec| -> Result<FaceImage> {
        s.validate(canvas)?;
        let mut data = Vec::with_capacity(s.area() * 3);
        for r in s.row..s.row + s.height {
            let start = (r * face.width() + s.col) * 3;
            data.extend_from_slice(&face.data()[start..start + s.width * 3]);
        }
        FaceImage::with_size(s.height, s.width, data)
    };
    Ok([crop(&specs[0])?, crop(&specs[1])?, crop(&specs[2])?])
}

/// Places `patch` on a zero canvas at the spec rectangle.
pub fn scatter_patch(patch: &FaceImage, spec: &PatchSpec, canvas: usize) -> Result<FaceImage> {
    spec.validate(canvas)?;
    if (patch.height(), patch.width()) != (spec.height, spec.width) {
        return Err(Error::shape(
            format!("{}x{}", spec.height, spec.width),
            format!("{}x{}", patch.height(), patch.width()),
        ));
    }
    let mut data = vec![0.0f32; canvas * canvas * 3];
    for r in 0..spec.height {
        let dst = ((spec.row + r) * canvas + spec.col) * 3;
        let src = r * spec.width * 3;
        data[dst..dst + spec.width * 3].copy_from_slice(&patch.data()[src..src + spec.width * 3]);
    }
    FaceImage::with_size(canvas, canvas, data)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PatchOverlap {
    pub first: String,
    pub second: String,
    pub area: usize,
}

/// Pairwise intersection areas of the patch rectangles.
pub fn overlap_report(specs: &[PatchSpec]) -> Vec<PatchOverlap> {
    let mut out = Vec::new();
    for (i, a) in specs.iter().enumerate() {
        for b in &specs[i + 1..] {
            out.push(PatchOverlap {
                first: a.name.clone(),
                second: b.name.clone(),
                area: a.intersection_area(b),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_are_valid() {
        for s in PatchSpec::defaults() {
            s.validate(FACE_SIZE).unwrap();
        }
        let compact = PatchSpec::defaults_for_canvas(32).unwrap();
        assert_eq!(compact[0], PatchSpec::new("eyes", 10, 4, 8, 24));
    }

    #[test]
    fn constant_face_gives_constant_eyes_patch() {
        let face = FaceImage::filled(128, 128, 0.5).unwrap();
        let [eyes, _, _] = extract_patches(&face, &PatchSpec::defaults()).unwrap();
        assert_eq!((eyes.height(), eyes.width()), (32, 96));
        assert!(eyes.data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn out_of_canvas_spec_is_rejected() {
        let face = FaceImage::filled(128, 128, 0.0).unwrap();
        let mut specs = PatchSpec::defaults();
        specs[1].row = 100;
        assert!(matches!(extract_patches(&face, &specs), Err(Error::PatchBounds { .. })));
        specs[1] = PatchSpec::new("snout", 64, 32, 46, 64);
        assert!(extract_patches(&face, &specs).is_err());
    }

    #[test]
    fn default_overlaps() {
        // eyes rows 40..72, snout rows 64..112, shared cols 32..96
        let report = overlap_report(&PatchSpec::defaults());
        let area = |a: &str, b: &str| report.iter().find(|o| o.first == a && o.second == b).unwrap().area;
        assert_eq!(area("eyes", "snout"), 8 * 64);
        assert_eq!(area("eyes", "forehead"), 0);
        assert_eq!(area("snout", "forehead"), 0);
    }

    proptest! {
        #[test]
        fn crop_scatter_round_trip(seed in 0u64..1000) {
            let data: Vec<f32> = (0..128 * 128 * 3)
                .map(|i| (((i as u64).wrapping_mul(2654435761).wrapping_add(seed) % 2001) as f32 / 1000.0) - 1.0)
                .collect();
            let face = FaceImage::new(data).unwrap();
            let specs = PatchSpec::defaults();
            let patches = extract_patches(&face, &specs).unwrap();
            for (p, s) in patches.iter().zip(&specs) {
                let canvas = scatter_patch(p, s, 128).unwrap();
                for r in 0..128 {
                    for c in 0..128 {
                        for ch in 0..3 {
                            let want = if s.contains(r, c) { face.get(r, c, ch) } else { 0.0 };
                            prop_assert_eq!(canvas.get(r, c, ch), want);
                        }
                    }
                }
            }
        }
    }
}
