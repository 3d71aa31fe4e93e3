use std::path::Path;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::image::{FaceImage, FACE_SIZE};
use crate::error::{Error, Result};

/// Canonical (x, y) positions on the 128x128 canvas: left eye, right eye,
/// nose tip, left mouth corner, right mouth corner.
pub const CANONICAL_TEMPLATE: [(f64, f64); 5] = [(44.0, 48.0), (84.0, 48.0), (64.0, 76.0), (50.0, 96.0), (78.0, 96.0)];

/// Five facial landmarks in source pixel coordinates, `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landmarks5 {
    points: [(f64, f64); 5],
}

impl Landmarks5 {
    pub fn new(points: [(f64, f64); 5]) -> Result<Self> {
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::InvalidValue("landmark coordinates must be finite".into()));
        }
        if points[0].0 >= points[1].0 {
            return Err(Error::InvalidValue(format!(
                "left eye x ({}) must be left of right eye x ({})",
                points[0].0, points[1].0
            )));
        }
        Ok(Self { points })
    }

    pub fn canonical() -> Self {
        Self {
            points: CANONICAL_TEMPLATE,
        }
    }

    pub fn points(&self) -> &[(f64, f64); 5] {
        &self.points
    }

    pub fn map(&self, t: &Similarity) -> Result<Self> {
        Self::new(self.points.map(|p| t.apply(p)))
    }
}

/// `p -> [[a, -b], [b, a]] p + (tx, ty)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Similarity {
    pub a: f64,
    pub b: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Similarity {
    pub fn from_parts(scale: f64, angle_rad: f64, tx: f64, ty: f64) -> Self {
        Self {
            a: scale * angle_rad.cos(),
            b: scale * angle_rad.sin(),
            tx,
            ty,
        }
    }

    pub fn apply(&self, (x, y): (f64, f64)) -> (f64, f64) {
        (self.a * x - self.b * y + self.tx, self.b * x + self.a * y + self.ty)
    }

    pub fn inverse(&self) -> Self {
        let d = self.a * self.a + self.b * self.b;
        let (a, b) = (self.a / d, -self.b / d);
        let inv = Self { a, b, tx: 0.0, ty: 0.0 };
        let (tx, ty) = inv.apply((-self.tx, -self.ty));
        Self { a, b, tx, ty }
    }

    pub fn scale(&self) -> f64 {
        self.a.hypot(self.b)
    }
}

/// Least-squares similarity transform mapping `src` onto `dst`.
pub fn fit_similarity(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Similarity> {
    let n = src.len() as f64;
    let mean = |pts: &[(f64, f64)]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x, ay + y));
        (sx / n, sy / n)
    };
    let (mpx, mpy) = mean(src);
    let (mqx, mqy) = mean(dst);
    let (mut num_a, mut num_b, mut den) = (0.0, 0.0, 0.0);
    for ((px, py), (qx, qy)) in src.iter().zip(dst) {
        let (px, py, qx, qy) = (px - mpx, py - mpy, qx - mqx, qy - mqy);
        num_a += px * qx + py * qy;
        num_b += px * qy - py * qx;
        den += px * px + py * py;
    }
    if den <= f64::EPSILON {
        return Err(Error::Alignment("landmarks have no spatial extent".into()));
    }
    let (a, b) = (num_a / den, num_b / den);
    let tx = mqx - (a * mpx - b * mpy);
    let ty = mqy - (b * mpx + a * mpy);
    Ok(Similarity { a, b, tx, ty })
}

fn check_degenerate(lm: &Landmarks5) -> Result<()> {
    let p = lm.points();
    let eye_dist = (p[1].0 - p[0].0).hypot(p[1].1 - p[0].1);
    if eye_dist < 1.0 {
        return Err(Error::Alignment(format!("eye distance {eye_dist:.3} px is below 1 px")));
    }
    // smallest eigenvalue of the 2x2 scatter matrix
    let (mx, my) = p.iter().fold((0.0, 0.0), |(ax, ay), (x, y)| (ax + x / 5.0, ay + y / 5.0));
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in p {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let (lo, hi) = (tr / 2.0 - disc, tr / 2.0 + disc);
    if lo <= 1e-9 * hi {
        return Err(Error::Alignment("landmarks are collinear".into()));
    }
    Ok(())
}

fn bilinear(img: &RgbImage, x: f64, y: f64, ch: usize) -> f64 {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let (x0, y0) = (x.floor(), y.floor());
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let px = |xi: i64, yi: i64| -> f64 {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            0.0
        } else {
            img.get_pixel(xi as u32, yi as u32)[ch] as f64
        }
    };
    let mut v = 0.0;
    for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            let wgt = wx * wy;
            if wgt != 0.0 {
                v += wgt * px(x0 + dx, y0 + dy);
            }
        }
    }
    v
}

/// Warps `image` so its landmarks land on [`CANONICAL_TEMPLATE`] and crops
/// the 128x128 canvas. Pixels sampled from outside the source are black.
pub fn align_and_crop(image: &RgbImage, lm: &Landmarks5) -> Result<FaceImage> {
    let (w, h) = (image.width() as f64, image.height() as f64);
    if w < 1.0 || h < 1.0 {
        return Err(Error::Alignment("empty source image".into()));
    }
    for (x, y) in lm.points() {
        if *x < 0.0 || *y < 0.0 || *x > w - 1.0 || *y > h - 1.0 {
            return Err(Error::Alignment(format!("landmark ({x}, {y}) outside {w}x{h} image")));
        }
    }
    check_degenerate(lm)?;
    let to_canvas = fit_similarity(lm.points(), &CANONICAL_TEMPLATE)?;
    let to_source = to_canvas.inverse();
    let mut data = Vec::with_capacity(FACE_SIZE * FACE_SIZE * 3);
    for r in 0..FACE_SIZE {
        for c in 0..FACE_SIZE {
            let (sx, sy) = to_source.apply((c as f64, r as f64));
            for ch in 0..3 {
                let v = bilinear(image, sx, sy, ch) / 127.5 - 1.0;
                data.push(v.clamp(-1.0, 1.0) as f32);
            }
        }
    }
    FaceImage::new(data)
}

/// Reads an image file and aligns it.
pub fn align_file(path: &Path, lm: &Landmarks5) -> Result<FaceImage> {
    let img = image::open(path)?.to_rgb8();
    align_and_crop(&img, lm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    fn gradient_image(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, ((x + y) % 256) as u8]))
    }

    /// Smooth face-like pattern on canonical coordinates, in 8-bit units.
    fn pattern(u: f64, v: f64) -> [f64; 3] {
        let blob = |cu: f64, cv: f64, s: f64| (-((u - cu).powi(2) + (v - cv).powi(2)) / (2.0 * s * s)).exp();
        let skin = blob(64.0, 70.0, 30.0);
        let eyes = blob(44.0, 48.0, 6.0) + blob(84.0, 48.0, 6.0);
        let mouth = blob(64.0, 96.0, 8.0);
        [
            40.0 + 160.0 * skin - 30.0 * eyes + 40.0 * mouth,
            30.0 + 140.0 * skin - 25.0 * eyes,
            20.0 + 120.0 * skin + 30.0 * eyes - 10.0 * mouth,
        ]
    }

    /// Renders `pattern` so that canvas coordinates = `to_canvas(source pixel)`.
    fn render(w: u32, h: u32, to_canvas: &Similarity) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let (u, v) = to_canvas.apply((x as f64, y as f64));
            let p = pattern(u, v);
            Rgb(p.map(|c| c.round().clamp(0.0, 255.0) as u8))
        })
    }

    #[test]
    fn fit_recovers_known_transform() {
        let t = Similarity::from_parts(1.7, 0.3, -5.0, 12.0);
        let src: Vec<_> = CANONICAL_TEMPLATE.to_vec();
        let dst: Vec<_> = src.iter().map(|p| t.apply(*p)).collect();
        let fit = fit_similarity(&src, &dst).unwrap();
        for (got, want) in [(fit.a, t.a), (fit.b, t.b), (fit.tx, t.tx), (fit.ty, t.ty)] {
            assert!((got - want).abs() < 1e-9);
        }
        let round = fit.inverse().apply(fit.apply((3.0, 4.0)));
        assert!((round.0 - 3.0).abs() < 1e-9 && (round.1 - 4.0).abs() < 1e-9);
    }

    #[test]
    fn canonical_landmarks_give_identity_crop() {
        let src = gradient_image(128, 128);
        let out = align_and_crop(&src, &Landmarks5::canonical()).unwrap();
        let want = FaceImage::from_rgb8(&src);
        let worst = out.data().iter().zip(want.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst < 1e-5, "{worst}");
    }

    #[test]
    fn doubled_landmarks_give_downsampled_source() {
        let src = gradient_image(256, 256);
        let lm = Landmarks5::new(CANONICAL_TEMPLATE.map(|(x, y)| (2.0 * x, 2.0 * y))).unwrap();
        let out = align_and_crop(&src, &lm).unwrap();
        for (r, c) in [(0, 0), (17, 90), (127, 127), (64, 3)] {
            let p = src.get_pixel(2 * c as u32, 2 * r as u32);
            for ch in 0..3 {
                let want = p[ch] as f32 / 127.5 - 1.0;
                assert!((out.get(r, c, ch) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotated_source_aligns_to_same_face() {
        // large enough that no canvas pixel samples outside either source
        let center = (150.0, 150.0);
        // source pixel -> canvas: scale 0.8 around the face
        let base = Similarity::from_parts(0.8, 0.0, 64.0 - 0.8 * center.0, 70.0 - 0.8 * center.1);
        // rotate the source by 10 degrees about its center
        let rot = Similarity::from_parts(1.0, 10f64.to_radians(), 0.0, 0.0);
        let rot_about = Similarity {
            tx: center.0 - rot.apply(center).0,
            ty: center.1 - rot.apply(center).1,
            ..rot
        };
        // rotated source pixel -> unrotated source pixel -> canvas
        let inv_rot = rot_about.inverse();
        let compose = |first: &Similarity, second: &Similarity| {
            let a = second.a * first.a - second.b * first.b;
            let b = second.a * first.b + second.b * first.a;
            let (tx, ty) = second.apply((first.tx, first.ty));
            Similarity { a, b, tx, ty }
        };
        let rotated_to_canvas = compose(&inv_rot, &base);

        let upright = render(300, 300, &base);
        let rotated = render(300, 300, &rotated_to_canvas);
        let lm_up = Landmarks5::canonical().map(&base.inverse()).unwrap();
        let lm_rot = Landmarks5::canonical().map(&rotated_to_canvas.inverse()).unwrap();

        let a = align_and_crop(&upright, &lm_up).unwrap();
        let b = align_and_crop(&rotated, &lm_rot).unwrap();
        let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(worst <= 2.0 / 127.5, "max difference {} levels", worst * 127.5);
    }

    #[test]
    fn degenerate_landmarks_are_rejected() {
        let img = gradient_image(64, 64);
        let collinear = Landmarks5::new([(10.0, 10.0), (20.0, 10.0), (30.0, 10.0), (40.0, 10.0), (50.0, 10.0)]).unwrap();
        assert!(matches!(align_and_crop(&img, &collinear), Err(Error::Alignment(_))));
        let close = Landmarks5::new([(10.0, 10.0), (10.5, 10.0), (10.2, 20.0), (8.0, 25.0), (12.0, 25.0)]).unwrap();
        assert!(matches!(align_and_crop(&img, &close), Err(Error::Alignment(_))));
        let outside = Landmarks5::new([(10.0, 10.0), (80.0, 10.0), (40.0, 30.0), (20.0, 50.0), (60.0, 50.0)]).unwrap();
        assert!(align_and_crop(&img, &outside).is_err());
        assert!(Landmarks5::new([(20.0, 10.0), (10.0, 10.0), (15.0, 20.0), (12.0, 25.0), (18.0, 25.0)]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_is_always_a_valid_face(
            scale in 0.3f64..2.0, angle in -0.6f64..0.6,
            jitter in proptest::collection::vec(-2.0f64..2.0, 10),
        ) {
            let img = gradient_image(160, 160);
            let t = Similarity::from_parts(scale, angle, 0.0, 0.0);
            let mut pts = CANONICAL_TEMPLATE.map(|p| t.apply(p));
            let (minx, miny) = pts.iter().fold((f64::MAX, f64::MAX), |(a, b), (x, y)| (a.min(*x), b.min(*y)));
            for (i, p) in pts.iter_mut().enumerate() {
                p.0 += 5.0 - minx + jitter[2 * i];
                p.1 += 5.0 - miny + jitter[2 * i + 1];
            }
            prop_assume!(pts.iter().all(|(x, y)| *x < 159.0 && *y < 159.0 && *x >= 0.0 && *y >= 0.0));
            prop_assume!(pts[0].0 < pts[1].0);
            let lm = Landmarks5::new(pts).unwrap();
            let face = align_and_crop(&img, &lm).unwrap();
            prop_assert!(face.is_canonical());
            prop_assert!(face.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }
}
