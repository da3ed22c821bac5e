//! Deterministic synthetic affordance scenes.
//!
//! Affordance families are geometric predicates decoupled from any object
//! identity: CONTAIN means a closed shape with an upward concavity (cup,
//! bowl, open box), SUPPORT means a horizontal slab resting on at least two
//! legs (bench, table, chair), ROLL means a convex round shape (ball,
//! wheel). Query masks are computed by running the predicate over every
//! placed object, never by trusting the construction label, and cross or
//! diagonal-stripe texture distractors satisfy no predicate at all.
//!
//! Scenes rasterize at 64x64 grayscale replicated to three channels; every
//! sample is a pure function of its seed.

use super::{pick_category, Episode, EpisodeSource};
use crate::error::{DataError, Result};
use crate::purpose::{BBox, SupportSample};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Canvas side; the smallest size keeping all five pyramid levels nonempty.
pub const CANVAS: usize = 64;

/// The three built-in affordance families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Contain,
    Support,
    Roll,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Contain, Family::Support, Family::Roll];

    pub fn id(self) -> u32 {
        match self {
            Family::Contain => 0,
            Family::Support => 1,
            Family::Roll => 2,
        }
    }

    pub fn from_id(id: u32) -> Result<Family, DataError> {
        match id {
            0 => Ok(Family::Contain),
            1 => Ok(Family::Support),
            2 => Ok(Family::Roll),
            other => Err(DataError::UnknownAffordance(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Contain => "contain",
            Family::Support => "support",
            Family::Roll => "roll",
        }
    }
}

/// Concrete object geometry, sufficient to re-rasterize it exactly.
#[derive(Clone, Debug)]
pub enum ShapeKind {
    /// Open-top U profile: outer size, wall thickness.
    Vessel { w: usize, h: usize, wall: usize },
    /// Horizontal slab on legs; `back` adds a chair-style rest above the
    /// slab's left edge.
    SlabOnLegs {
        w: usize,
        slab_h: usize,
        leg_w: usize,
        leg_h: usize,
        legs: usize,
        back: usize,
    },
    /// Filled disc of the given radius.
    Disc { r: usize },
    /// Plus-sign texture distractor: arm length and thickness.
    Cross { arm: usize, t: usize },
    /// Diagonal stripe distractor: length and thickness.
    Diagonal { len: usize, t: usize },
}

/// A placed object: geometry, canvas position, and paint intensity.
#[derive(Clone, Debug)]
pub struct SceneObject {
    pub kind: ShapeKind,
    pub x: usize,
    pub y: usize,
    pub intensity: f32,
}

/// A query scene ready to rasterize.
#[derive(Clone, Debug)]
pub struct QueryScene {
    pub objects: Vec<SceneObject>,
}

/// The support scene: the qualifying object plus the agent blob touching its
/// interaction surface.
#[derive(Clone, Debug)]
pub struct SupportScene {
    pub object: SceneObject,
    pub agent: SceneObject,
}

/// A whole episode before rasterization.
#[derive(Clone, Debug)]
pub struct EpisodeScene {
    pub support: SupportScene,
    pub queries: Vec<QueryScene>,
    pub family: Family,
    pub seed: u64,
}

impl ShapeKind {
    /// Bounding-box extents (w, h).
    pub fn extent(&self) -> (usize, usize) {
        match *self {
            ShapeKind::Vessel { w, h, .. } => (w, h),
            ShapeKind::SlabOnLegs {
                w,
                slab_h,
                leg_h,
                back,
                ..
            } => (w, back + slab_h + leg_h),
            ShapeKind::Disc { r } => (2 * r + 1, 2 * r + 1),
            ShapeKind::Cross { arm, t } => (2 * arm + t, 2 * arm + t),
            ShapeKind::Diagonal { len, t } => (len + t, len + t),
        }
    }

    /// Occupancy grid of the bounding box, row-major.
    pub fn raster(&self) -> Grid {
        let (w, h) = self.extent();
        let mut cells = vec![false; w * h];
        let mut put = |x: usize, y: usize| cells[y * w + x] = true;
        match *self {
            ShapeKind::Vessel { w, h, wall } => {
                for y in 0..h {
                    for x in 0..w {
                        let in_wall = x < wall || x >= w - wall || y >= h - wall;
                        if in_wall {
                            put(x, y);
                        }
                    }
                }
            }
            ShapeKind::SlabOnLegs {
                w,
                slab_h,
                leg_w,
                leg_h,
                legs,
                back,
            } => {
                for y in back..back + slab_h {
                    for x in 0..w {
                        put(x, y);
                    }
                }
                for y in 0..back {
                    for x in 0..leg_w {
                        put(x, y);
                    }
                }
                let leg_top = back + slab_h;
                let mut leg_starts = vec![0, w - leg_w];
                if legs >= 3 {
                    leg_starts.push((w - leg_w) / 2 & !1);
                }
                for start in leg_starts {
                    for y in leg_top..leg_top + leg_h {
                        for x in start..start + leg_w {
                            put(x, y);
                        }
                    }
                }
            }
            ShapeKind::Disc { r } => {
                let c = r as isize;
                for y in 0..h as isize {
                    for x in 0..w as isize {
                        let (dx, dy) = (x - c, y - c);
                        if dx * dx + dy * dy <= (r * r) as isize {
                            put(x as usize, y as usize);
                        }
                    }
                }
            }
            ShapeKind::Cross { arm, t } => {
                let mid = arm;
                for y in 0..h {
                    for x in 0..w {
                        let in_v = x >= mid && x < mid + t;
                        let in_h = y >= mid && y < mid + t;
                        if in_v || in_h {
                            put(x, y);
                        }
                    }
                }
            }
            ShapeKind::Diagonal { len, t } => {
                for i in 0..len {
                    for j in 0..t {
                        put(i + j, i);
                    }
                }
            }
        }
        Grid { w, h, cells }
    }
}

/// Binary occupancy grid of one object's bounding box.
#[derive(Clone, Debug)]
pub struct Grid {
    pub w: usize,
    pub h: usize,
    pub cells: Vec<bool>,
}

impl Grid {
    fn at(&self, x: usize, y: usize) -> bool {
        self.cells[y * self.w + x]
    }

    fn row_runs(&self, y: usize) -> Vec<(usize, usize)> {
        let mut runs = Vec::new();
        let mut start = None;
        for x in 0..self.w {
            match (self.at(x, y), start) {
                (true, None) => start = Some(x),
                (false, Some(s)) => {
                    runs.push((s, x));
                    start = None;
                }
                _ => {}
            }
        }
        if let Some(s) = start {
            runs.push((s, self.w));
        }
        runs
    }

    fn col_runs(&self, x: usize) -> usize {
        let mut runs = 0;
        let mut inside = false;
        for y in 0..self.h {
            let v = self.at(x, y);
            if v && !inside {
                runs += 1;
            }
            inside = v;
        }
        runs
    }

    fn count(&self) -> usize {
        self.cells.iter().filter(|&&v| v).count()
    }
}

/// Upward concavity: an empty cell with floor below, walls on both sides of
/// its row, and open sky above its column.
pub fn has_upward_concavity(g: &Grid) -> bool {
    for y in 0..g.h {
        for x in 0..g.w {
            if g.at(x, y) {
                continue;
            }
            let floor = (y + 1..g.h).any(|yy| g.at(x, yy));
            if !floor {
                continue;
            }
            let sky = (0..y).all(|yy| !g.at(x, yy));
            if !sky {
                continue;
            }
            let left = (0..x).any(|xx| g.at(xx, y));
            let right = (x + 1..g.w).any(|xx| g.at(xx, y));
            if left && right {
                return true;
            }
        }
    }
    false
}

/// Horizontal slab on legs: some row carries a long contiguous run, and the
/// bottom row splits into at least two disjoint runs (the legs).
pub fn has_slab_on_legs(g: &Grid) -> bool {
    let Some(bottom) = (0..g.h).rev().find(|&y| g.row_runs(y).first().is_some()) else {
        return false;
    };
    if g.row_runs(bottom).len() < 2 {
        return false;
    }
    let need = (3 * g.w).div_ceil(5).max(5);
    (0..bottom).any(|y| g.row_runs(y).iter().any(|(s, e)| e - s >= need))
}

/// Convex round shape: orthogonally convex, near-square bounding box, and a
/// fill ratio near a disc's.
pub fn is_convex_round(g: &Grid) -> bool {
    let rows_ok = (0..g.h).all(|y| g.row_runs(y).len() <= 1);
    let cols_ok = (0..g.w).all(|x| g.col_runs(x) <= 1);
    if !rows_ok || !cols_ok {
        return false;
    }
    let (long, short) = (g.w.max(g.h) as f64, g.w.min(g.h) as f64);
    if long / short > 1.34 {
        return false;
    }
    let fill = g.count() as f64 / (g.w * g.h) as f64;
    (0.6..=0.95).contains(&fill)
}

/// Runs the three family predicates; at most one fires for every shape the
/// generator can emit.
pub fn classify(g: &Grid) -> Option<Family> {
    if has_upward_concavity(g) {
        Some(Family::Contain)
    } else if has_slab_on_legs(g) {
        Some(Family::Support)
    } else if is_convex_round(g) {
        Some(Family::Roll)
    } else {
        None
    }
}

/// Snaps a length down to even. Desk-scale masks decode through a stride-2
/// head; even extents and placements keep straight boundaries exactly
/// representable instead of asking for sub-cell logit tuning that small
/// training budgets cannot deliver. Curved disc boundaries quantize anyway.
fn even(v: usize) -> usize {
    v & !1
}

fn sample_member(family: Family, rng: &mut ChaCha8Rng) -> ShapeKind {
    match family {
        Family::Contain => match rng.gen_range(0..3u8) {
            // cup
            0 => ShapeKind::Vessel {
                w: even(rng.gen_range(14..=18)),
                h: even(rng.gen_range(12..=16)),
                wall: 4,
            },
            // bowl
            1 => ShapeKind::Vessel {
                w: even(rng.gen_range(18..=22)),
                h: even(rng.gen_range(10..=13)),
                wall: 4,
            },
            // open box
            _ => ShapeKind::Vessel {
                w: even(rng.gen_range(15..=20)),
                h: even(rng.gen_range(13..=17)),
                wall: 4,
            },
        },
        Family::Support => {
            let kind = rng.gen_range(0..3u8);
            ShapeKind::SlabOnLegs {
                w: even(rng.gen_range(16..=22)),
                slab_h: 4,
                leg_w: 4,
                leg_h: even(rng.gen_range(6..=10)),
                legs: if kind == 1 { 3 } else { 2 }, // table gets a middle leg
                back: if kind == 2 { even(rng.gen_range(4..=7)) } else { 0 }, // chair
            }
        }
        Family::Roll => ShapeKind::Disc {
            r: rng.gen_range(5..=9),
        },
    }
}

fn sample_distractor(rng: &mut ChaCha8Rng) -> ShapeKind {
    if rng.gen_bool(0.5) {
        ShapeKind::Cross {
            arm: rng.gen_range(3..=5),
            t: 2,
        }
    } else {
        ShapeKind::Diagonal {
            len: rng.gen_range(6..=10),
            t: rng.gen_range(2..=3),
        }
    }
}

/// Tries to place a shape without touching already placed ones (one-pixel
/// apron included). Returns None when the canvas is too crowded.
fn place(
    kind: &ShapeKind,
    placed: &[(usize, usize, usize, usize)],
    rng: &mut ChaCha8Rng,
    reserve_top: usize,
) -> Option<(usize, usize)> {
    let (w, h) = kind.extent();
    if w + 2 >= CANVAS || h + 2 + reserve_top >= CANVAS {
        return None;
    }
    for _ in 0..60 {
        let x = rng.gen_range(1..CANVAS - w - 1) & !1;
        let y = (rng.gen_range(1 + reserve_top..CANVAS - h - 1) + 1) & !1;
        let clear = placed.iter().all(|&(px, py, pw, ph)| {
            x + w + 1 <= px || px + pw + 1 <= x || y + h + 1 <= py || py + ph + 1 <= y
        });
        if clear {
            return Some((x, y));
        }
    }
    None
}

fn bbox_of(obj: &SceneObject) -> (usize, usize, usize, usize) {
    let (w, h) = obj.kind.extent();
    (obj.x, obj.y, w, h)
}

fn intensity(rng: &mut ChaCha8Rng) -> f32 {
    rng.gen_range(0.35..0.95)
}

/// Builds the scene description for one episode. `pool` restricts which
/// families may appear as query objects (the sampler passes the fold role's
/// categories so held-out shapes never leak into training scenes); it must
/// contain the episode's own family.
pub fn generate_scene(
    seed: u64,
    family: Family,
    n: usize,
    pool: &[Family],
) -> Result<EpisodeScene, DataError> {
    assert!(pool.contains(&family), "pool must contain the episode family");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    // Support scene: the qualifying object with the agent at its
    // interaction surface (rim for CONTAIN, top for SUPPORT, side for ROLL).
    let obj_kind = sample_member(family, &mut rng);
    let agent_kind = ShapeKind::Disc {
        r: rng.gen_range(3..=4),
    };
    let (aw, ah) = agent_kind.extent();
    let reserve = match family {
        Family::Contain | Family::Support => ah + 1,
        Family::Roll => 0,
    };
    let (ow, oh) = obj_kind.extent();
    let ox = match family {
        Family::Roll => rng.gen_range(aw + 2..CANVAS - ow - 1),
        _ => rng.gen_range(1..CANVAS - ow - 1),
    } & !1;
    let oy = (rng.gen_range(1 + reserve..CANVAS - oh - 1) + 1) & !1;
    let (ax, ay) = match family {
        // Centered over the opening, resting on the rim line.
        Family::Contain => (ox + (ow.saturating_sub(aw)) / 2, oy.saturating_sub(ah)),
        // Sitting on the slab top.
        Family::Support => (ox + (ow.saturating_sub(aw)) / 2, oy.saturating_sub(ah)),
        // Touching the side.
        Family::Roll => (ox.saturating_sub(aw), oy + oh / 2 - ah / 2),
    };
    let support = SupportScene {
        object: SceneObject {
            kind: obj_kind,
            x: ox,
            y: oy,
            intensity: intensity(&mut rng),
        },
        agent: SceneObject {
            kind: agent_kind,
            x: ax,
            y: ay,
            intensity: intensity(&mut rng),
        },
    };

    // Query scenes: 1..=4 objects (mixed families when possible) plus
    // texture distractors.
    let mut queries = Vec::with_capacity(n);
    for _ in 0..n {
        let count = rng.gen_range(1..=4usize);
        let mut families = Vec::with_capacity(count);
        for i in 0..count {
            // Bias the first slot toward the episode family so most queries
            // carry signal; zero-qualifying queries remain possible.
            let f = if i == 0 && rng.gen_bool(0.8) {
                family
            } else {
                pool[rng.gen_range(0..pool.len())]
            };
            families.push(f);
        }
        if count >= 2 && pool.len() >= 2 && families.iter().all(|&f| f == families[0]) {
            let alternatives: Vec<Family> =
                pool.iter().copied().filter(|&f| f != families[0]).collect();
            families[1] = alternatives[rng.gen_range(0..alternatives.len())];
        }

        let mut objects = Vec::new();
        let mut boxes = Vec::new();
        for f in families {
            let kind = sample_member(f, &mut rng);
            if let Some((x, y)) = place(&kind, &boxes, &mut rng, 0) {
                let obj = SceneObject {
                    kind,
                    x,
                    y,
                    intensity: intensity(&mut rng),
                };
                boxes.push(bbox_of(&obj));
                objects.push(obj);
            }
        }
        for _ in 0..rng.gen_range(1..=2usize) {
            let kind = sample_distractor(&mut rng);
            if let Some((x, y)) = place(&kind, &boxes, &mut rng, 0) {
                let obj = SceneObject {
                    kind,
                    x,
                    y,
                    intensity: intensity(&mut rng),
                };
                boxes.push(bbox_of(&obj));
                objects.push(obj);
            }
        }
        queries.push(QueryScene { objects });
    }

    Ok(EpisodeScene {
        support,
        queries,
        family,
        seed,
    })
}

fn paint(canvas: &mut [f32], obj: &SceneObject) {
    let g = obj.kind.raster();
    for y in 0..g.h {
        for x in 0..g.w {
            if g.at(x, y) {
                canvas[(obj.y + y) * CANVAS + obj.x + x] = obj.intensity;
            }
        }
    }
}

fn to_image(gray: &[f32]) -> Tensor<f32> {
    let mut data = Vec::with_capacity(3 * gray.len());
    for _ in 0..3 {
        data.extend_from_slice(gray);
    }
    Tensor::new(vec![3, CANVAS, CANVAS], data)
}

impl EpisodeScene {
    /// Rasterizes the scene. Query masks are the union of the objects that
    /// satisfy this episode's predicate.
    pub fn rasterize(&self) -> Episode<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x517c_c1b7_2722_0a95);
        let mut noise =
            |canvas: &mut [f32]| canvas.iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.08));

        let mut sup_canvas = vec![0.0f32; CANVAS * CANVAS];
        noise(&mut sup_canvas);
        paint(&mut sup_canvas, &self.support.object);
        paint(&mut sup_canvas, &self.support.agent);
        let (ow, oh) = self.support.object.kind.extent();
        let (aw, ah) = self.support.agent.kind.extent();
        let support = SupportSample {
            image: to_image(&sup_canvas),
            human_box: BBox::new(
                self.support.agent.x,
                self.support.agent.y,
                self.support.agent.x + aw,
                self.support.agent.y + ah,
            ),
            object_box: BBox::new(
                self.support.object.x,
                self.support.object.y,
                self.support.object.x + ow,
                self.support.object.y + oh,
            ),
        };

        let mut queries = Vec::with_capacity(self.queries.len());
        let mut gt_masks = Vec::with_capacity(self.queries.len());
        for q in &self.queries {
            let mut canvas = vec![0.0f32; CANVAS * CANVAS];
            noise(&mut canvas);
            let mut mask = vec![0.0f32; CANVAS * CANVAS];
            for obj in &q.objects {
                paint(&mut canvas, obj);
                let g = obj.kind.raster();
                if classify(&g) == Some(self.family) {
                    for y in 0..g.h {
                        for x in 0..g.w {
                            if g.at(x, y) {
                                mask[(obj.y + y) * CANVAS + obj.x + x] = 1.0;
                            }
                        }
                    }
                }
            }
            queries.push(to_image(&canvas));
            gt_masks.push(Tensor::new(vec![1, CANVAS, CANVAS], mask));
        }

        Episode {
            support,
            queries,
            gt_masks,
            affordance_id: self.family.id(),
            seed: self.seed,
        }
    }
}

/// Deterministic episode generation over all three families.
pub fn generate_synthetic(seed: u64, affordance_id: u32, n: usize) -> Result<Episode<f32>> {
    let family = Family::from_id(affordance_id)?;
    Ok(generate_scene(seed, family, n, &Family::ALL)?.rasterize())
}

/// In-memory episode source over the synthetic generator. Query distractors
/// are drawn only from the categories visible to the caller's role.
#[derive(Clone, Copy, Debug, Default)]
pub struct SyntheticSource;

impl EpisodeSource for SyntheticSource {
    fn sample(&self, categories: &[u32], n: usize, seed: u64) -> Result<Episode<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cat = pick_category(categories, &mut rng);
        let family = Family::from_id(cat)?;
        let pool: Vec<Family> = categories
            .iter()
            .map(|&c| Family::from_id(c))
            .collect::<Result<_, _>>()?;
        let scene_seed = rng.gen::<u64>();
        Ok(generate_scene(scene_seed, family, n, &pool)?.rasterize())
    }
}
