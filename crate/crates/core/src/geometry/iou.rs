use crate::geometry::BoxBev;
use crate::scalar::Real;

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub fn polygon_area<T: Real>(poly: &[[T; 2]]) -> T {
    if poly.len() < 3 {
        return T::zero();
    }
    let mut acc = T::zero();
    for i in 0..poly.len() {
        let [x0, y0] = poly[i];
        let [x1, y1] = poly[(i + 1) % poly.len()];
        acc += x0 * y1 - x1 * y0;
    }
    acc * T::lit(0.5)
}

#[inline]
fn cross<T: Real>(a: [T; 2], b: [T; 2], p: [T; 2]) -> T {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

fn line_intersection<T: Real>(p: [T; 2], q: [T; 2], a: [T; 2], b: [T; 2]) -> [T; 2] {
    let cp = cross(a, b, p);
    let cq = cross(a, b, q);
    let denom = cp - cq;
    if denom == T::zero() {
        return q;
    }
    let t = cp / denom;
    [p[0] + (q[0] - p[0]) * t, p[1] + (q[1] - p[1]) * t]
}

/// Sutherland-Hodgman clipping of `subject` against the convex CCW `clip`.
fn clip_convex<T: Real>(subject: &[[T; 2]], clip: &[[T; 2]]) -> Vec<[T; 2]> {
    let mut output: Vec<[T; 2]> = subject.to_vec();
    let mut input = Vec::with_capacity(8);
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        std::mem::swap(&mut input, &mut output);
        output.clear();
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= T::zero();
            let prev_in = cross(a, b, prev) >= T::zero();
            if cur_in {
                if !prev_in {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if prev_in {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

/// Intersection-over-union of two oriented rectangles.
pub fn rotated_iou<T: Real>(a: &BoxBev<T>, b: &BoxBev<T>) -> T {
    if a == b {
        return T::one();
    }
    let half = T::lit(0.5);
    let reach = (a.diagonal() + b.diagonal()) * half;
    if (a.cx - b.cx).hypot(a.cy - b.cy) >= reach {
        return T::zero();
    }
    let inter = polygon_area(&clip_convex(&a.corners(), &b.corners()));
    let area_a = a.area();
    let area_b = b.area();
    let eps = T::epsilon() * T::lit(16.0) * area_a.min(area_b);
    if !(inter > eps) {
        return T::zero();
    }
    let union = area_a + area_b - inter;
    (inter / union).max(T::zero()).min(T::one())
}
