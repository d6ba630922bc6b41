//! Brute-force reference implementations for scene geometry, the oracle
//! policy and the AP metric.

use r2t_core::scene::{AgentPose, Scene, Wall};

const RAY_STEP: f64 = 0.05;
const TOL: f64 = 1e-9;

/// Whether point `p` lies on the closed axis-aligned wall `w`.
fn on_wall(w: &Wall, p: (f64, f64)) -> bool {
    let (x0, y0) = (w.start.0 as f64, w.start.1 as f64);
    let (x1, y1) = (w.end.0 as f64, w.end.1 as f64);
    p.0 >= x0 - TOL && p.0 <= x1 + TOL && p.1 >= y0 - TOL && p.1 <= y1 + TOL
}

/// Signed offset of `p` from the wall's supporting line, and the wall's
/// extent along that line as `(coordinate along, lo, hi)`.
fn wall_frame(w: &Wall, p: (f64, f64)) -> (f64, f64, f64, f64) {
    if w.start.0 == w.end.0 {
        (p.0 - w.start.0 as f64, p.1, w.start.1 as f64, w.end.1 as f64)
    } else {
        (p.1 - w.start.1 as f64, p.0, w.start.0 as f64, w.end.0 as f64)
    }
}

/// Marches from `from` to `to` in steps of at most 0.05 cells and reports
/// whether any wall is touched: a sample on a wall, or two consecutive
/// samples on opposite sides of a wall line with the crossing inside it.
pub fn ray_march_los(walls: &[Wall], from: (f64, f64), to: (f64, f64)) -> bool {
    let len = ((to.0 - from.0).powi(2) + (to.1 - from.1).powi(2)).sqrt();
    let steps = ((len / RAY_STEP).ceil() as usize).max(1);
    let sample = |i: usize| {
        if i == steps {
            to
        } else {
            let t = i as f64 / steps as f64;
            (from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1))
        }
    };
    for w in walls {
        let mut prev = sample(0);
        if on_wall(w, prev) {
            return false;
        }
        for i in 1..=steps {
            let cur = sample(i);
            if on_wall(w, cur) {
                return false;
            }
            let (da, _, _, _) = wall_frame(w, prev);
            let (db, _, lo, hi) = wall_frame(w, cur);
            if (da > TOL && db < -TOL) || (da < -TOL && db > TOL) {
                let (_, a_along, _, _) = wall_frame(w, prev);
                let (_, b_along, _, _) = wall_frame(w, cur);
                let crossing = a_along + (b_along - a_along) * da / (da - db);
                if crossing >= lo - TOL && crossing <= hi + TOL {
                    return false;
                }
            }
            prev = cur;
        }
    }
    true
}

/// Range, field of view (via `atan2`) and ray-marched line of sight.
pub fn brute_visible(scene: &Scene, agent: &AgentPose, cell: (i32, i32)) -> bool {
    let (dx, dy) = (cell.0 as f64 - agent.x, cell.1 as f64 - agent.y);
    if (dx * dx + dy * dy).sqrt() > scene.config.range + TOL {
        return false;
    }
    if (dx, dy) != (0.0, 0.0) && scene.config.fov_deg < 360.0 {
        let mut diff = dy.atan2(dx) - agent.heading;
        while diff > std::f64::consts::PI {
            diff -= 2.0 * std::f64::consts::PI;
        }
        while diff < -std::f64::consts::PI {
            diff += 2.0 * std::f64::consts::PI;
        }
        if diff.abs() > scene.config.fov_deg.to_radians() / 2.0 + 1e-9 {
            return false;
        }
    }
    ray_march_los(&scene.walls, agent.position(), (cell.0 as f64, cell.1 as f64))
}

pub fn brute_visibility_map(scene: &Scene, agent: &AgentPose) -> Vec<bool> {
    let g = scene.grid_size() as i32;
    let mut out = Vec::with_capacity((g * g) as usize);
    for y in 0..g {
        for x in 0..g {
            out.push(brute_visible(scene, agent, (x, y)));
        }
    }
    out
}

/// Indices of the `k` regions of largest heatmap mass, ties to the lower
/// index, from a region-by-region pass over the heatmap.
pub fn brute_oracle_selection(scene: &Scene, k: usize) -> Vec<usize> {
    let g = scene.grid_size();
    let block = g / 8;
    let mut mass = Vec::with_capacity(64);
    for ry in 0..8 {
        for rx in 0..8 {
            let mut m = 0.0f64;
            for y in ry * block..(ry + 1) * block {
                for x in rx * block..(rx + 1) * block {
                    m += scene.gt_heatmap[y * g + x] as f64;
                }
            }
            mass.push((m, ry * 8 + rx));
        }
    }
    // Selection sort, independent of the library's ranking.
    let mut chosen = Vec::new();
    for _ in 0..k {
        let mut best: Option<(f64, usize)> = None;
        for &(m, i) in &mass {
            if chosen.contains(&i) {
                continue;
            }
            if best.is_none_or(|(bm, bi)| m > bm || (m == bm && i < bi)) {
                best = Some((m, i));
            }
        }
        chosen.push(best.unwrap().1);
    }
    chosen.sort_unstable();
    chosen
}

/// AP from an exhaustive enumeration of the nine thresholds: for each
/// distinct recall level, precision is the best precision reached at that
/// recall or beyond, integrated step-wise from recall 0.
pub fn brute_average_precision(pred: &[f64], gt: &[bool]) -> f64 {
    let positives = gt.iter().filter(|&&g| g).count();
    let mut points = Vec::new();
    for i in 1..=9 {
        let t = i as f64 / 10.0;
        let predicted: Vec<usize> = (0..pred.len()).filter(|&c| pred[c] >= t).collect();
        let tp = predicted.iter().filter(|&&c| gt[c]).count();
        let precision = match (predicted.len(), positives) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (n, _) => tp as f64 / n as f64,
        };
        let recall = if positives == 0 { 1.0 } else { tp as f64 / positives as f64 };
        points.push((recall, precision));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for r in levels {
        let p = points
            .iter()
            .filter(|q| q.0 >= r)
            .map(|q| q.1)
            .fold(0.0, f64::max);
        ap += (r - prev) * p;
        prev = r;
    }
    ap
}
