//! Exact rotated BEV / 3D IoU by convex polygon clipping, and the
//! axis-aligned surrogate used as a training loss.

use crate::geom::Box3D;

type Poly = Vec<[f64; 2]>;

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Shoelace area (positive for counterclockwise polygons).
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % n];
        acc += x0 * y1 - x1 * y0;
    }
    acc / 2.0
}

/// Sutherland–Hodgman clip of `subject` by the convex CCW polygon `clip`.
pub fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Poly {
    let mut out: Poly = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let p = input[j];
            let q = input[(j + 1) % input.len()];
            let cp = cross(a, b, p);
            let cq = cross(a, b, q);
            if cp >= 0.0 {
                out.push(p);
            }
            if (cp >= 0.0) != (cq >= 0.0) {
                let t = cp / (cp - cq);
                out.push([p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]);
            }
        }
    }
    out
}

pub fn bev_intersection_area(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_convex(&a.bev_corners(), &b.bev_corners())).max(0.0)
}

pub fn iou_bev_rotated(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b);
    let union = a.dims.x * a.dims.y + b.dims.x * b.dims.y - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Rotated BEV intersection times z overlap, over the 3D union.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    let (a0, a1) = a.z_range();
    let (b0, b1) = b.z_range();
    let dz = (a1.min(b1) - a0.max(b0)).max(0.0);
    let inter = bev_intersection_area(a, b) * dz;
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Axis-aligned BEV IoU of `[cx, cy, l, w]` rectangles (l along x) and its
/// gradient with respect to the first rectangle.
pub fn iou_bev_aligned(p: [f64; 4], g: [f64; 4]) -> (f64, [f64; 4]) {
    let [px, py, pl, pw] = p;
    let [gx, gy, gl, gw] = g;
    // Overlap along one axis and its partials w.r.t. (center, extent).
    let overlap = |pc: f64, pe: f64, gc: f64, ge: f64| -> (f64, f64, f64) {
        let (lo_p, hi_p) = (pc - pe / 2.0, pc + pe / 2.0);
        let (lo_g, hi_g) = (gc - ge / 2.0, gc + ge / 2.0);
        let hi = hi_p.min(hi_g);
        let lo = lo_p.max(lo_g);
        if hi <= lo {
            return (0.0, 0.0, 0.0);
        }
        let (dhi_dc, dhi_de) = if hi_p < hi_g { (1.0, 0.5) } else { (0.0, 0.0) };
        let (dlo_dc, dlo_de) = if lo_p > lo_g { (1.0, -0.5) } else { (0.0, 0.0) };
        (hi - lo, dhi_dc - dlo_dc, dhi_de - dlo_de)
    };
    let (ox, dox_dc, dox_de) = overlap(px, pl, gx, gl);
    let (oy, doy_dc, doy_de) = overlap(py, pw, gy, gw);
    let inter = ox * oy;
    let union = pl * pw + gl * gw - inter;
    if inter <= 0.0 || union <= 0.0 {
        return (0.0, [0.0; 4]);
    }
    let iou = inter / union;
    // d(I/U) = (dI·U − I·dU)/U², with dU = dA_p − dI.
    let d = |d_inter: f64, d_area: f64| (d_inter * union - inter * (d_area - d_inter)) / (union * union);
    let grad = [
        d(dox_dc * oy, 0.0),
        d(ox * doy_dc, 0.0),
        d(dox_de * oy, pw),
        d(ox * doy_de, pl),
    ];
    (iou, grad)
}
