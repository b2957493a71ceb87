use nalgebra::{Vector2, Vector3};

use super::BinaryMask;
use crate::cameras::Camera;
use crate::plantgen::PlantModel;

/// Branch segments closer than this to the camera plane are clipped.
const NEAR: f64 = 1e-3;

/// Ground-truth masks of one view.
#[derive(Clone, Debug)]
pub struct RenderedMasks {
    /// Every branch pixel, occluded or not.
    pub full_branch: BinaryMask,
    /// Branch pixels not hidden behind a leaf.
    pub visible_branch: BinaryMask,
    /// Union of branch and leaf silhouettes.
    pub whole_plant: BinaryMask,
    /// Set when nothing of the plant lands in the image.
    pub out_of_frame: bool,
}

/// Rasterises the plant as seen from `camera`.
///
/// Branch segments are drawn as capsules whose half-width is the projected
/// radius, clamped to at least one pixel. A branch pixel is visible when its
/// nearest branch depth lies in front of every leaf disc hit by the pixel ray.
pub fn render_masks(plant: &PlantModel, camera: &Camera) -> RenderedMasks {
    let (w, h) = (camera.width as usize, camera.height as usize);
    let mut branch_depth = vec![f64::INFINITY; w * h];
    let mut leaf_depth = vec![f64::INFINITY; w * h];

    for &(a, b) in &plant.edges {
        let (na, nb) = (&plant.nodes[a], &plant.nodes[b]);
        draw_segment(
            camera,
            (camera.to_camera_frame(&na.position), na.radius),
            (camera.to_camera_frame(&nb.position), nb.radius),
            &mut branch_depth,
        );
    }
    for leaf in &plant.leaves {
        let center = camera.to_camera_frame(&leaf.center);
        let normal = camera.rotation * leaf.normal;
        draw_disc(camera, center, normal, leaf.radius, &mut leaf_depth);
    }

    let full: Vec<bool> = branch_depth.iter().map(|d| d.is_finite()).collect();
    let visible = branch_depth
        .iter()
        .zip(&leaf_depth)
        .map(|(b, l)| b.is_finite() && b < l)
        .collect();
    let whole: Vec<bool> = full
        .iter()
        .zip(&leaf_depth)
        .map(|(&f, l)| f || l.is_finite())
        .collect();
    let out_of_frame = !whole.iter().any(|&b| b);
    let mask = |bits| BinaryMask {
        width: w,
        height: h,
        bits,
    };
    RenderedMasks {
        full_branch: mask(full),
        visible_branch: mask(visible),
        whole_plant: mask(whole),
        out_of_frame,
    }
}

fn draw_segment(
    camera: &Camera,
    (mut pa, ra): (Vector3<f64>, f64),
    (mut pb, rb): (Vector3<f64>, f64),
    depth: &mut [f64],
) {
    if pa.z < NEAR && pb.z < NEAR {
        return;
    }
    // Clip the part behind the near plane.
    if pa.z < NEAR {
        let t = (NEAR - pa.z) / (pb.z - pa.z);
        pa += (pb - pa) * t;
    } else if pb.z < NEAR {
        let t = (NEAR - pb.z) / (pa.z - pb.z);
        pb += (pa - pb) * t;
    }
    let to_pixel = |p: &Vector3<f64>| {
        Vector2::new(camera.fx * p.x / p.z + camera.cx, camera.fy * p.y / p.z + camera.cy)
    };
    let (a, b) = (to_pixel(&pa), to_pixel(&pb));
    let half_a = (ra * camera.fx / pa.z).max(1.0);
    let half_b = (rb * camera.fx / pb.z).max(1.0);
    let reach = half_a.max(half_b);
    let (w, h) = (camera.width as i64, camera.height as i64);
    let u0 = ((a.x.min(b.x) - reach).floor() as i64).max(0);
    let u1 = ((a.x.max(b.x) + reach).ceil() as i64).min(w - 1);
    let v0 = ((a.y.min(b.y) - reach).floor() as i64).max(0);
    let v1 = ((a.y.max(b.y) + reach).ceil() as i64).min(h - 1);
    if u0 > u1 || v0 > v1 {
        return;
    }
    let ab = b - a;
    let len2 = ab.norm_squared();
    let (inv_za, inv_zb) = (1.0 / pa.z, 1.0 / pb.z);
    for v in v0..=v1 {
        for u in u0..=u1 {
            let q = Vector2::new(u as f64, v as f64);
            let s = if len2 > 0.0 {
                ((q - a).dot(&ab) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dist = (q - (a + ab * s)).norm();
            if dist <= half_a + (half_b - half_a) * s {
                // 1/z is affine in screen space.
                let z = 1.0 / (inv_za + (inv_zb - inv_za) * s);
                let cell = &mut depth[v as usize * w as usize + u as usize];
                if z < *cell {
                    *cell = z;
                }
            }
        }
    }
}

fn draw_disc(
    camera: &Camera,
    center: Vector3<f64>,
    normal: Vector3<f64>,
    radius: f64,
    depth: &mut [f64],
) {
    if center.z + radius <= 0.0 {
        return;
    }
    let (w, h) = (camera.width as i64, camera.height as i64);
    let (u0, u1, v0, v1) = if center.z - radius > NEAR {
        let reach = radius * camera.fx.max(camera.fy) / (center.z - radius) + 1.0;
        let cu = camera.fx * center.x / center.z + camera.cx;
        let cv = camera.fy * center.y / center.z + camera.cy;
        (
            ((cu - reach).floor() as i64).max(0),
            ((cu + reach).ceil() as i64).min(w - 1),
            ((cv - reach).floor() as i64).max(0),
            ((cv + reach).ceil() as i64).min(h - 1),
        )
    } else {
        (0, w - 1, 0, h - 1)
    };
    let plane = normal.dot(&center);
    let r2 = radius * radius;
    for v in v0..=v1 {
        for u in u0..=u1 {
            let ray = camera.pixel_ray(u as f64, v as f64);
            let denom = normal.dot(&ray);
            if denom.abs() < 1e-12 {
                continue;
            }
            let t = plane / denom;
            if t <= 0.0 || (ray * t - center).norm_squared() > r2 {
                continue;
            }
            let cell = &mut depth[v as usize * w as usize + u as usize];
            if t < *cell {
                *cell = t;
            }
        }
    }
}
