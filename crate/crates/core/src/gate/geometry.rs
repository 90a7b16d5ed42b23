//! Geometric subchecks on the ROI mask: vertex angle and side straightness.

use super::roi::Mask;

/// Fraction of the ROI height (from the apex up) used to fit the side lines.
const ANGLE_FIT_SPAN: f64 = 0.6;
/// Rows right at the apex are skipped; anti-aliasing rounds the tip there.
const APEX_SKIP: f64 = 0.02;
const MIN_FIT_ROWS: usize = 10;

/// Hough orientation range around vertical, and its resolution.
const HOUGH_MAX_TILT_DEG: f64 = 60.0;
const HOUGH_STEP_DEG: f64 = 0.25;
const HOUGH_RHO_BIN_PX: f64 = 1.0;
/// Minimum fraction of a side's edge pixels supporting its dominant line.
const MIN_SUPPORT: f64 = 0.5;

/// Least-squares slope and intercept of `x = a + b*y`.
fn fit_x_of_y(points: &[(f64, f64)]) -> Option<(f64, f64)> {
    let n = points.len() as f64;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if syy == 0.0 {
        return None;
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let b = sxy / syy;
    Some((mx - b * my, b))
}

/// Left and right boundary points (pixel centers) of the mask, one per row.
fn side_points(mask: &Mask) -> (Vec<(f64, f64)>, Vec<(f64, f64)>) {
    mask.row_extents()
        .into_iter()
        .map(|(y, l, r)| ((l as f64 + 0.5, y as f64 + 0.5), (r as f64 + 0.5, y as f64 + 0.5)))
        .unzip()
}

/// Angle in degrees at the lowest point of the mask between the lines
/// fitted to its left and right boundaries. `None` when either side has
/// too few rows to fit.
pub fn vertex_angle(mask: &Mask) -> Option<f64> {
    let (left, right) = side_points(mask);
    let (first, last) = (left.first()?.1, left.last()?.1);
    let height = last - first;
    let lo = last - ANGLE_FIT_SPAN * height;
    let hi = last - APEX_SKIP * height;
    let window = |pts: &[(f64, f64)]| -> Vec<(f64, f64)> {
        pts.iter().copied().filter(|p| p.1 >= lo && p.1 <= hi).collect()
    };
    let (l, r) = (window(&left), window(&right));
    if l.len() < MIN_FIT_ROWS || r.len() < MIN_FIT_ROWS {
        return None;
    }
    let (_, bl) = fit_x_of_y(&l)?;
    let (_, br) = fit_x_of_y(&r)?;
    Some((bl.atan() - br.atan()).abs().to_degrees())
}

/// A line in normal form `x*cos(theta) + y*sin(theta) = rho`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line {
    pub theta: f64,
    pub rho: f64,
}

impl Line {
    pub fn distance(&self, p: (f64, f64)) -> f64 {
        (p.0 * self.theta.cos() + p.1 * self.theta.sin() - self.rho).abs()
    }
}

/// Dominant near-vertical line through `points` by Hough voting. Returns
/// the line and its vote count.
pub fn hough_dominant_line(points: &[(f64, f64)]) -> Option<(Line, usize)> {
    if points.is_empty() {
        return None;
    }
    let steps = (2.0 * HOUGH_MAX_TILT_DEG / HOUGH_STEP_DEG).round() as usize + 1;
    let thetas: Vec<f64> = (0..steps)
        .map(|i| (-HOUGH_MAX_TILT_DEG + i as f64 * HOUGH_STEP_DEG).to_radians())
        .collect();
    let trig: Vec<(f64, f64)> = thetas.iter().map(|t| (t.cos(), t.sin())).collect();
    let max_r = points.iter().map(|p| p.0.hypot(p.1)).fold(0.0, f64::max);
    let offset = max_r.ceil() as i64 + 1;
    let bins = (2 * offset) as usize + 1;
    let mut acc = vec![0u32; steps * bins];
    for &(x, y) in points {
        for (ti, (c, s)) in trig.iter().enumerate() {
            let rho = x * c + y * s;
            let bin = ((rho / HOUGH_RHO_BIN_PX).round() as i64 + offset) as usize;
            acc[ti * bins + bin] += 1;
        }
    }
    let (idx, &votes) = acc
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    let (ti, bin) = (idx / bins, idx % bins);
    let rho = (bin as i64 - offset) as f64 * HOUGH_RHO_BIN_PX;
    Some((Line { theta: thetas[ti], rho }, votes as usize))
}

/// Total-least-squares line through the points.
fn tls_line(points: &[(f64, f64)]) -> Option<Line> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
        sxy += (x - mx) * (y - my);
    }
    // direction of largest spread; the normal is perpendicular to it
    let dir = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let theta = dir + std::f64::consts::FRAC_PI_2;
    Some(Line { theta, rho: mx * theta.cos() + my * theta.sin() })
}

/// Mean perpendicular distance of one side's edge pixels to its dominant
/// line. The Hough line selects inliers within `band` pixels; the reported
/// line is the total-least-squares refit of those inliers.
fn side_residual(points: &[(f64, f64)], band: f64) -> f64 {
    let Some((hough, _)) = hough_dominant_line(points) else {
        return f64::INFINITY;
    };
    let inliers: Vec<(f64, f64)> = points.iter().copied().filter(|&p| hough.distance(p) <= band).collect();
    if (inliers.len() as f64) < MIN_SUPPORT * points.len() as f64 {
        return f64::INFINITY;
    }
    let Some(line) = tls_line(&inliers) else {
        return f64::INFINITY;
    };
    points.iter().map(|&p| line.distance(p)).sum::<f64>() / points.len() as f64
}

/// Worst side's mean edge deviation from a straight line, divided by the ROI
/// height. `INFINITY` when a side has no line with majority support.
pub fn side_straightness(mask: &Mask) -> f64 {
    let (left, right) = side_points(mask);
    if left.len() < MIN_FIT_ROWS {
        return f64::INFINITY;
    }
    let height = left.last().unwrap().1 - left.first().unwrap().1 + 1.0;
    let band = (0.01 * height).max(3.0);
    side_residual(&left, band).max(side_residual(&right, band)) / height
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// Isosceles triangle pointing down with the given apex angle.
    pub(crate) fn triangle(angle_deg: f64, w: u32, h: u32, top: f64, apex_y: f64) -> Mask {
        let slope = (angle_deg.to_radians() / 2.0).tan();
        let cx = w as f64 / 2.0;
        Mask::from_fn(w, h, |x, y| {
            let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
            yc >= top && yc <= apex_y && (xc - cx).abs() <= (apex_y - yc) * slope
        })
    }

    #[test]
    fn triangle_angle() {
        let m = triangle(40.0, 600, 1000, 100.0, 900.0);
        let a = vertex_angle(&m).unwrap();
        assert!((a - 40.0).abs() < 2.0, "angle {a}");
    }

    #[test]
    fn rectangle_has_no_taper() {
        let m = Mask::from_fn(200, 400, |x, y| (50..150).contains(&x) && (50..350).contains(&y));
        let a = vertex_angle(&m).unwrap_or(0.0);
        assert!(a < 1.0);
    }

    #[test]
    fn tiny_mask_cannot_be_fit() {
        let m = Mask::from_fn(20, 20, |x, y| x == 10 && (5..8).contains(&y));
        assert!(vertex_angle(&m).is_none());
        assert!(side_straightness(&m).is_infinite());
    }

    #[test]
    fn trapezoid_is_straight() {
        let m = Mask::from_fn(600, 1200, |x, y| {
            let (xc, yc) = (x as f64 + 0.5, y as f64 + 0.5);
            let hw = 60.0 + (1100.0 - yc) * 0.15;
            (100.0..=1100.0).contains(&yc) && (xc - 300.0).abs() <= hw
        });
        let r = side_straightness(&m);
        assert!(r <= 0.005, "residual {r}");
    }

    #[test]
    fn hough_finds_vertical_line() {
        let pts: Vec<(f64, f64)> = (0..100).map(|y| (42.5, y as f64 + 0.5)).collect();
        let (line, votes) = hough_dominant_line(&pts).unwrap();
        assert_eq!(votes, 100);
        assert!(line.theta.abs().to_degrees() <= 0.5);
        assert!((line.rho - 42.5).abs() <= 0.5);
    }
}
