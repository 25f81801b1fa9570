//! Boxes, five-point landmarks, landmark rotation, and canonical face
//! alignment via a two-point similarity transform on the eyes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, CHANNELS};

/// Relative eye template used for alignment: left eye at `(0.3, 0.33)` and
/// right eye at `(0.7, 0.33)` of the output square.
pub const EYE_TEMPLATE: [(f64, f64); 2] = [(0.3, 0.33), (0.7, 0.33)];

/// Axis-aligned box in pixel coordinates, x right, y down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Domain(format!(
                "degenerate box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn y_min(&self) -> f64 {
        self.y_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn y_max(&self) -> f64 {
        self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }
}

/// Intersection-over-union of two boxes, zero when disjoint.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Five facial landmarks in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Landmarks {
    pub left_eye: (f64, f64),
    pub right_eye: (f64, f64),
    pub nose: (f64, f64),
    pub mouth_left: (f64, f64),
    pub mouth_right: (f64, f64),
}

impl Landmarks {
    pub fn points(&self) -> [(f64, f64); 5] {
        [
            self.left_eye,
            self.right_eye,
            self.nose,
            self.mouth_left,
            self.mouth_right,
        ]
    }

    pub fn from_points(points: [(f64, f64); 5]) -> Self {
        Landmarks {
            left_eye: points[0],
            right_eye: points[1],
            nose: points[2],
            mouth_left: points[3],
            mouth_right: points[4],
        }
    }

    pub fn map(&self, f: impl Fn((f64, f64)) -> (f64, f64)) -> Self {
        Landmarks::from_points(self.points().map(f))
    }
}

/// Rotates all five landmarks by `degrees` (counter-clockwise in x-right,
/// y-down coordinates) about `center`. With `center = (0, 0)` each point is
/// simply multiplied by the rotation matrix.
pub fn rotate_landmarks(lm: &Landmarks, degrees: f64, center: (f64, f64)) -> Landmarks {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    lm.map(|(x, y)| {
        let dx = x - center.0;
        let dy = y - center.1;
        (
            cos * dx - sin * dy + center.0,
            sin * dx + cos * dy + center.1,
        )
    })
}

/// Euclidean norm of the flattened 10-dimensional coordinate difference.
pub fn landmark_shift(a: &Landmarks, b: &Landmarks) -> f64 {
    a.points()
        .iter()
        .zip(b.points().iter())
        .map(|(p, q)| (p.0 - q.0).powi(2) + (p.1 - q.1).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Direct similarity transform `p -> scale * R(angle) * p + translation`,
/// stored as the complex pair `(a, b)` with `f(p) = a * p + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    // a = (a_re, a_im) encodes rotation and scale, b is the translation.
    a: (f64, f64),
    b: (f64, f64),
}

impl Similarity {
    /// The unique similarity mapping `src0 -> dst0` and `src1 -> dst1`.
    pub fn from_two_points(
        src: [(f64, f64); 2],
        dst: [(f64, f64); 2],
    ) -> Result<Self> {
        let ds = (src[1].0 - src[0].0, src[1].1 - src[0].1);
        let dd = (dst[1].0 - dst[0].0, dst[1].1 - dst[0].1);
        let norm2 = ds.0 * ds.0 + ds.1 * ds.1;
        if norm2 < 1e-24 {
            return Err(Error::Domain(
                "source points coincide; similarity transform is degenerate".into(),
            ));
        }
        // a = dd / ds in complex arithmetic.
        let a = (
            (dd.0 * ds.0 + dd.1 * ds.1) / norm2,
            (dd.1 * ds.0 - dd.0 * ds.1) / norm2,
        );
        let b = (
            dst[0].0 - (a.0 * src[0].0 - a.1 * src[0].1),
            dst[0].1 - (a.1 * src[0].0 + a.0 * src[0].1),
        );
        Ok(Similarity { a, b })
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        (
            self.a.0 * p.0 - self.a.1 * p.1 + self.b.0,
            self.a.1 * p.0 + self.a.0 * p.1 + self.b.1,
        )
    }

    pub fn inverse(&self) -> Similarity {
        let norm2 = self.a.0 * self.a.0 + self.a.1 * self.a.1;
        let inv_a = (self.a.0 / norm2, -self.a.1 / norm2);
        let inv_b = (
            -(inv_a.0 * self.b.0 - inv_a.1 * self.b.1),
            -(inv_a.1 * self.b.0 + inv_a.0 * self.b.1),
        );
        Similarity { a: inv_a, b: inv_b }
    }

    pub fn scale(&self) -> f64 {
        (self.a.0 * self.a.0 + self.a.1 * self.a.1).sqrt()
    }
}

/// The transform `align_face` warps with: maps the two eye landmarks onto
/// the canonical template positions of an `out_size` square.
pub fn alignment_transform(lm: &Landmarks, out_size: usize) -> Result<Similarity> {
    let s = out_size as f64;
    let dst = [
        (EYE_TEMPLATE[0].0 * s, EYE_TEMPLATE[0].1 * s),
        (EYE_TEMPLATE[1].0 * s, EYE_TEMPLATE[1].1 * s),
    ];
    Similarity::from_two_points([lm.left_eye, lm.right_eye], dst)
}

/// Warps the face into a canonical `out_size` square such that the eyes land
/// on the template coordinates. Bilinear sampling; pixels whose source falls
/// outside the image are zero.
pub fn align_face(image: &ImageTensor, lm: &Landmarks, out_size: usize) -> Result<ImageTensor> {
    let forward = alignment_transform(lm, out_size)?;
    let inverse = forward.inverse();

    let w = image.width() as f64;
    let h = image.height() as f64;
    let mut out = ImageTensor::zeros(out_size, out_size);
    for y in 0..out_size {
        for x in 0..out_size {
            let (sx, sy) = inverse.apply((x as f64 + 0.5, y as f64 + 0.5));
            if sx < 0.0 || sy < 0.0 || sx > w || sy > h {
                continue;
            }
            for c in 0..CHANNELS {
                out.set(c, y, x, image.sample_bilinear(c, sx, sy));
            }
        }
    }
    Ok(out)
}
