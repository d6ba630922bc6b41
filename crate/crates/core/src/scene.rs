//! Synthetic bird's-eye-view scenes and per-agent observations.
//!
//! A scene is a square grid of cells with point objects, axis-aligned
//! occluding walls and four agents sitting at the midpoints of the grid
//! edges, each looking toward the centre. Cell `(x, y)` has its centre at
//! integer coordinates `(x, y)` and is stored at index `y * grid_size + x`.
//! Walls are zero-thickness segments between cell centres, so every
//! line-of-sight test between cell centres is decided exactly in `f64`.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{purpose, RngKey};

pub const MAX_ATTEMPTS: usize = 1000;
pub const WALL_MIN_LEN: i32 = 8;
pub const WALL_MAX_LEN: i32 = 16;
pub const SPLAT_RADIUS: f64 = 3.0;
const ANGLE_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OcclusionLevel {
    Low,
    Medium,
    High,
}

impl OcclusionLevel {
    pub const ALL: [OcclusionLevel; 3] = [OcclusionLevel::Low, OcclusionLevel::Medium, OcclusionLevel::High];

    pub fn wall_count(self) -> usize {
        match self {
            OcclusionLevel::Low => 3,
            OcclusionLevel::Medium => 6,
            OcclusionLevel::High => 10,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OcclusionLevel::Low => "low",
            OcclusionLevel::Medium => "medium",
            OcclusionLevel::High => "high",
        }
    }
}

impl fmt::Display for OcclusionLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OcclusionLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "low" => Ok(OcclusionLevel::Low),
            "medium" => Ok(OcclusionLevel::Medium),
            "high" => Ok(OcclusionLevel::High),
            other => Err(Error::Config(format!(
                "unknown occlusion level {other:?} (expected low, medium or high)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub grid_size: usize,
    pub n_agents: usize,
    pub n_objects: usize,
    pub obs_noise_sigma: f64,
    pub occlusion_level: OcclusionLevel,
    pub fov_deg: f64,
    pub range: f64,
    pub splat_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            grid_size: 64,
            n_agents: 4,
            n_objects: 20,
            obs_noise_sigma: 0.5,
            occlusion_level: OcclusionLevel::Medium,
            fov_deg: 90.0,
            range: 30.0,
            splat_sigma: 1.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::Config(format!("grid_size must be at least 2, got {}", self.grid_size)));
        }
        if self.n_agents != 4 {
            return Err(Error::Config(format!(
                "exactly 4 agents (one per grid edge) are supported, got {}",
                self.n_agents
            )));
        }
        if !(self.obs_noise_sigma >= 0.0 && self.obs_noise_sigma.is_finite()) {
            return Err(Error::Config(format!("obs_noise_sigma must be >= 0, got {}", self.obs_noise_sigma)));
        }
        if !(self.splat_sigma > 0.0 && self.splat_sigma.is_finite()) {
            return Err(Error::Config(format!("splat_sigma must be > 0, got {}", self.splat_sigma)));
        }
        if !(self.fov_deg > 0.0) || !(self.range >= 0.0) {
            return Err(Error::Config("fov_deg must be > 0 and range >= 0".into()));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl AgentPose {
    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// Agents at the four edge midpoints, facing inward. The layout is
/// invariant under a quarter turn about the grid centre.
pub fn cardinal_agents(grid_size: usize) -> Vec<AgentPose> {
    let g = grid_size as f64;
    let h = (grid_size / 2) as f64;
    vec![
        AgentPose { id: 0, x: h, y: 0.0, heading: PI / 2.0 },
        AgentPose { id: 1, x: g - 1.0, y: h, heading: PI },
        AgentPose { id: 2, x: g - 1.0 - h, y: g - 1.0, heading: -PI / 2.0 },
        AgentPose { id: 3, x: 0.0, y: g - 1.0 - h, heading: 0.0 },
    ]
}

/// Axis-aligned wall between two cell centres, `start <= end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Wall {
    pub start: (i32, i32),
    pub end: (i32, i32),
}

impl Wall {
    pub fn cells(&self) -> impl Iterator<Item = (i32, i32)> + '_ {
        let (x0, y0) = self.start;
        let (x1, y1) = self.end;
        (y0..=y1).flat_map(move |y| (x0..=x1).map(move |x| (x, y)))
    }

    pub fn len_cells(&self) -> i32 {
        (self.end.0 - self.start.0).max(self.end.1 - self.start.1) + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub config: SceneConfig,
    pub seed: u64,
    pub scene_id: u64,
    pub objects: Vec<(i32, i32)>,
    pub walls: Vec<Wall>,
    pub agents: Vec<AgentPose>,
    pub gt_heatmap: Vec<f32>,
    pub gt_binary: Vec<bool>,
}

/// Two-channel egocentric observation: channel 0 holds noisy detection
/// splats, channel 1 the agent's visibility mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub grid_size: usize,
    pub data: Vec<f32>,
}

impl Observation {
    pub fn detections(&self) -> &[f32] {
        &self.data[..self.grid_size * self.grid_size]
    }

    pub fn visibility(&self) -> &[f32] {
        &self.data[self.grid_size * self.grid_size..]
    }
}

fn in_grid(g: usize, (x, y): (i32, i32)) -> bool {
    x >= 0 && y >= 0 && (x as usize) < g && (y as usize) < g
}

fn place_walls(config: &SceneConfig, key: RngKey, blocked: &HashSet<(i32, i32)>) -> Result<Vec<Wall>> {
    let g = config.grid_size as i32;
    let mut rng = key.with(purpose::WALLS).rng();
    let mut occupied: HashSet<(i32, i32)> = HashSet::new();
    let mut walls = Vec::new();
    for i in 0..config.occlusion_level.wall_count() {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let horizontal = rng.random_bool(0.5);
            let len = rng.random_range(WALL_MIN_LEN..=WALL_MAX_LEN);
            if len > g {
                continue;
            }
            let along = rng.random_range(0..=g - len);
            let across = rng.random_range(0..g);
            let wall = if horizontal {
                Wall { start: (along, across), end: (along + len - 1, across) }
            } else {
                Wall { start: (across, along), end: (across, along + len - 1) }
            };
            if wall.cells().all(|c| !occupied.contains(&c) && !blocked.contains(&c)) {
                placed = Some(wall);
                break;
            }
        }
        let wall = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place wall {i} on a {g}x{g} grid after {MAX_ATTEMPTS} attempts"
            ))
        })?;
        occupied.extend(wall.cells());
        walls.push(wall);
    }
    Ok(walls)
}

fn place_objects(config: &SceneConfig, key: RngKey, walls: &[Wall]) -> Result<Vec<(i32, i32)>> {
    let g = config.grid_size as i32;
    let wall_cells: HashSet<(i32, i32)> = walls.iter().flat_map(|w| w.cells()).collect();
    let mut rng = key.with(purpose::OBJECTS).rng();
    let mut taken = HashSet::new();
    let mut objects = Vec::with_capacity(config.n_objects);
    for i in 0..config.n_objects {
        let mut placed = None;
        for _ in 0..MAX_ATTEMPTS {
            let c = (rng.random_range(0..g), rng.random_range(0..g));
            if !wall_cells.contains(&c) && !taken.contains(&c) {
                placed = Some(c);
                break;
            }
        }
        let c = placed.ok_or_else(|| {
            Error::Generation(format!("could not place object {i} after {MAX_ATTEMPTS} attempts"))
        })?;
        taken.insert(c);
        objects.push(c);
    }
    Ok(objects)
}

/// Max-combines a truncated Gaussian splat centred at `(cx, cy)` into `map`.
pub fn splat_max(map: &mut [f32], grid_size: usize, (cx, cy): (f64, f64), sigma: f64) {
    let g = grid_size as i64;
    let x_lo = ((cx - SPLAT_RADIUS).floor() as i64).max(0);
    let x_hi = ((cx + SPLAT_RADIUS).ceil() as i64).min(g - 1);
    let y_lo = ((cy - SPLAT_RADIUS).floor() as i64).max(0);
    let y_hi = ((cy + SPLAT_RADIUS).ceil() as i64).min(g - 1);
    let two_s2 = 2.0 * sigma * sigma;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            let d2 = dx * dx + dy * dy;
            if d2 <= SPLAT_RADIUS * SPLAT_RADIUS {
                let v = (-d2 / two_s2).exp() as f32;
                let cell = &mut map[(y * g + x) as usize];
                if v > *cell {
                    *cell = v;
                }
            }
        }
    }
}

pub fn render_heatmap(config: &SceneConfig, objects: &[(i32, i32)]) -> Vec<f32> {
    let mut map = vec![0.0f32; config.cells()];
    for &(x, y) in objects {
        splat_max(&mut map, config.grid_size, (x as f64, y as f64), config.splat_sigma);
    }
    map
}

/// Builds a scene. Identical `(config, seed, scene_id)` always give the
/// same scene; wall `i` depends only on walls `0..i`, so a higher occlusion
/// level extends the wall list of a lower one.
pub fn generate_scene(config: &SceneConfig, seed: u64, scene_id: u64) -> Result<Scene> {
    config.validate()?;
    let key = RngKey::new(seed).with(scene_id);
    let agents = cardinal_agents(config.grid_size);
    let agent_cells: HashSet<(i32, i32)> =
        agents.iter().map(|a| (a.x.round() as i32, a.y.round() as i32)).collect();
    let walls = place_walls(config, key, &agent_cells)?;
    let objects = place_objects(config, key, &walls)?;
    Ok(Scene::assemble(config.clone(), seed, scene_id, objects, walls, agents))
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn within_box(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

/// Closed segment intersection test.
pub fn segments_intersect(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && within_box(q1, q2, p1))
        || (d2 == 0.0 && within_box(q1, q2, p2))
        || (d3 == 0.0 && within_box(p1, p2, q1))
        || (d4 == 0.0 && within_box(p1, p2, q2))
}

/// True iff the segment `from -> to` touches no wall. A zero-length ray
/// always sees its own point.
pub fn line_of_sight(walls: &[Wall], from: (f64, f64), to: (f64, f64)) -> bool {
    if from == to {
        return true;
    }
    walls.iter().all(|w| {
        let a = (w.start.0 as f64, w.start.1 as f64);
        let b = (w.end.0 as f64, w.end.1 as f64);
        !segments_intersect(from, to, a, b)
    })
}

impl Scene {
    fn assemble(
        config: SceneConfig,
        seed: u64,
        scene_id: u64,
        objects: Vec<(i32, i32)>,
        walls: Vec<Wall>,
        agents: Vec<AgentPose>,
    ) -> Scene {
        let gt_heatmap = render_heatmap(&config, &objects);
        let gt_binary = gt_heatmap.iter().map(|&v| v > 0.5).collect();
        Scene {
            config,
            seed,
            scene_id,
            objects,
            walls,
            agents,
            gt_heatmap,
            gt_binary,
        }
    }

    /// Rebuilds a scene from its stored layout, re-deriving the ground truth.
    pub fn from_layout(
        config: SceneConfig,
        seed: u64,
        scene_id: u64,
        objects: Vec<(i32, i32)>,
        walls: Vec<Wall>,
        agents: Vec<AgentPose>,
    ) -> Result<Scene> {
        config.validate()?;
        let g = config.grid_size;
        if let Some(o) = objects.iter().find(|&&o| !in_grid(g, o)) {
            return Err(Error::Generation(format!("object {o:?} outside the grid")));
        }
        for w in &walls {
            let axis_aligned = w.start.0 == w.end.0 || w.start.1 == w.end.1;
            if !axis_aligned || !in_grid(g, w.start) || !in_grid(g, w.end) || w.start > w.end {
                return Err(Error::Generation(format!("invalid wall {w:?}")));
            }
        }
        Ok(Scene::assemble(config, seed, scene_id, objects, walls, agents))
    }

    pub fn grid_size(&self) -> usize {
        self.config.grid_size
    }

    pub fn line_of_sight(&self, from: (f64, f64), to: (f64, f64)) -> bool {
        line_of_sight(&self.walls, from, to)
    }

    /// Range, field-of-view and line-of-sight test for one cell.
    pub fn visible(&self, agent: &AgentPose, cell: (i32, i32)) -> bool {
        let (dx, dy) = (cell.0 as f64 - agent.x, cell.1 as f64 - agent.y);
        let dist2 = dx * dx + dy * dy;
        if dist2 > self.config.range * self.config.range {
            return false;
        }
        if dist2 > 0.0 && self.config.fov_deg < 360.0 {
            let cos = ((dx * agent.heading.cos() + dy * agent.heading.sin()) / dist2.sqrt()).clamp(-1.0, 1.0);
            if cos.acos() > self.config.fov_deg.to_radians() / 2.0 + ANGLE_EPS {
                return false;
            }
        }
        self.line_of_sight(agent.position(), (cell.0 as f64, cell.1 as f64))
    }

    pub fn visibility_map(&self, agent: &AgentPose) -> Vec<bool> {
        let g = self.grid_size() as i32;
        (0..g)
            .flat_map(|y| (0..g).map(move |x| (x, y)))
            .map(|c| self.visible(agent, c))
            .collect()
    }

    /// Observation of `agent`. Objects are tested for visibility at their
    /// true cell and splatted at a noisy position; the result is then masked
    /// by the visibility map so nothing leaks through walls.
    pub fn render_observation(&self, agent: &AgentPose, seed: u64) -> Observation {
        let g = self.grid_size();
        let vis = self.visibility_map(agent);
        let mut det = vec![0.0f32; g * g];
        let sigma = self.config.obs_noise_sigma;
        let mut rng = RngKey::new(seed)
            .with(self.scene_id)
            .with(purpose::OBS_NOISE)
            .with(agent.id as u64)
            .rng();
        let noise = (sigma > 0.0).then(|| Normal::new(0.0, sigma).expect("sigma checked by validate"));
        for &(ox, oy) in &self.objects {
            let (nx, ny) = match &noise {
                Some(n) => (n.sample(&mut rng), n.sample(&mut rng)),
                None => (0.0, 0.0),
            };
            if vis[oy as usize * g + ox as usize] {
                splat_max(&mut det, g, (ox as f64 + nx, oy as f64 + ny), self.config.splat_sigma);
            }
        }
        let mut data = Vec::with_capacity(2 * g * g);
        data.extend(det.iter().zip(&vis).map(|(&d, &v)| if v { d } else { 0.0 }));
        data.extend(vis.iter().map(|&v| if v { 1.0f32 } else { 0.0 }));
        Observation { grid_size: g, data }
    }

    /// Observations of all agents, rendered with the scene's own seed.
    pub fn observations(&self) -> Vec<Observation> {
        self.agents.iter().map(|a| self.render_observation(a, self.seed)).collect()
    }

    /// Sum of the ground-truth heatmap over each cell block of a
    /// `regions_per_side x regions_per_side` partition, row-major.
    pub fn region_mass(&self, regions_per_side: usize) -> Vec<f64> {
        let g = self.grid_size();
        let block = g / regions_per_side;
        let mut mass = vec![0.0; regions_per_side * regions_per_side];
        for y in 0..block * regions_per_side {
            for x in 0..block * regions_per_side {
                mass[(y / block) * regions_per_side + x / block] += self.gt_heatmap[y * g + x] as f64;
            }
        }
        mass
    }
}
