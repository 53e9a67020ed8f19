use std::fmt;
use std::str::FromStr;

use super::classes::{RoomKind, Roster, Stencil, SupportKind};
use super::raster::{Rgb, RgbImage};
use crate::error::{Error, Result};
use crate::model::BoundingBox;
use crate::tensor::Rng;

/// Mid-grey used to blank the context.
pub const GREY: Rgb = [128, 128, 128];

/// Layout constants are written for a 96-pixel room and scaled to the
/// configured side.
const REFERENCE_SIDE: f64 = 96.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_side: usize,
    /// Gravity lift as a fraction of the room height.
    pub lift_fraction: f64,
    /// Horizontal target jitter around the image center, as a fraction of the side.
    pub center_jitter: f64,
    /// Boxes whose longer side is below this are `small`.
    pub small_threshold: usize,
    /// Probability that a target rests on its class's usual kind of support
    /// rather than the other one.
    pub support_fidelity: f64,
    /// Probability that a room shows its kind: palette, decor and
    /// room-typical companions. Other rooms are plain and the support
    /// relation is the only contextual cue.
    pub room_cue_prob: f64,
    pub distractors: usize,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_side: 96,
            lift_fraction: 0.25,
            center_jitter: 0.1,
            small_threshold: 20,
            support_fidelity: 1.0,
            room_cue_prob: 0.5,
            distractors: 2,
            max_attempts: 100,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side < 48 {
            return Err(Error::Config(format!(
                "image side {} is below 48",
                self.image_side
            )));
        }
        if !(0.0..0.5).contains(&self.lift_fraction) || self.lift_fraction <= 0.0 {
            return Err(Error::Config(format!(
                "lift fraction {} outside (0, 0.5)",
                self.lift_fraction
            )));
        }
        if !(0.0..=0.25).contains(&self.center_jitter) {
            return Err(Error::Config(format!(
                "center jitter {} outside [0, 0.25]",
                self.center_jitter
            )));
        }
        for (name, p) in [
            ("support fidelity", self.support_fidelity),
            ("room cue probability", self.room_cue_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max attempts must be positive".into()));
        }
        Ok(())
    }

    /// Gravity lift in pixels.
    pub fn lift_pixels(&self) -> usize {
        (self.lift_fraction * self.image_side as f64).round() as usize
    }

    fn px(&self, v: f64) -> usize {
        (v * self.image_side as f64 / REFERENCE_SIDE).round() as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ConditionTag {
    Normal,
    NoContextGrey,
    NoContextSaltPepper,
    Gravity,
    CoOccur,
    CoOccurGravity,
    Size2,
    Size3,
    Size4,
}

impl ConditionTag {
    pub const ALL: [ConditionTag; 9] = [
        ConditionTag::Normal,
        ConditionTag::NoContextGrey,
        ConditionTag::NoContextSaltPepper,
        ConditionTag::Gravity,
        ConditionTag::CoOccur,
        ConditionTag::CoOccurGravity,
        ConditionTag::Size2,
        ConditionTag::Size3,
        ConditionTag::Size4,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionTag::Normal => "normal",
            ConditionTag::NoContextGrey => "nocontext_grey",
            ConditionTag::NoContextSaltPepper => "nocontext_saltpepper",
            ConditionTag::Gravity => "gravity",
            ConditionTag::CoOccur => "cooccur",
            ConditionTag::CoOccurGravity => "cooccur_gravity",
            ConditionTag::Size2 => "size2",
            ConditionTag::Size3 => "size3",
            ConditionTag::Size4 => "size4",
        }
    }

    pub fn size_factor(&self) -> Option<usize> {
        match self {
            ConditionTag::Size2 => Some(2),
            ConditionTag::Size3 => Some(3),
            ConditionTag::Size4 => Some(4),
            _ => None,
        }
    }
}

impl fmt::Display for ConditionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConditionTag::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown condition '{s}'")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SizeBin {
    Small,
    Large,
}

impl SizeBin {
    pub const ALL: [SizeBin; 2] = [SizeBin::Small, SizeBin::Large];

    pub fn of(bbox: &BoundingBox, small_threshold: usize) -> SizeBin {
        if bbox.w.max(bbox.h) < small_threshold {
            SizeBin::Small
        } else {
            SizeBin::Large
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            SizeBin::Small => "small",
            SizeBin::Large => "large",
        }
    }
}

impl fmt::Display for SizeBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SizeBin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SizeBin::Small),
            "large" => Ok(SizeBin::Large),
            _ => Err(Error::Config(format!("unknown size bin '{s}'"))),
        }
    }
}

/// How `blank_context` fills everything outside the box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlankMode {
    Grey,
    SaltPepper,
}

/// Horizontal support segment; objects rest with their bottom edge at `y`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Surface {
    pub y: usize,
    pub x0: usize,
    pub x1: usize,
    pub kind: SupportKind,
}

/// Solid rectangle `[x0, x1) x [y0, y1)` of room furniture or decor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Block {
    pub x0: i64,
    pub y0: i64,
    pub x1: i64,
    pub y1: i64,
    pub color: Rgb,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoomSpec {
    pub room_kind: RoomKind,
    /// Whether the room shows its kind at all.
    pub furnished: bool,
    pub wall: Rgb,
    pub floor: Rgb,
    pub floor_y: usize,
    pub surfaces: Vec<Surface>,
    /// Drawn in order, after wall and floor.
    pub furniture: Vec<Block>,
}

struct Palette {
    wall: Rgb,
    floor: Rgb,
    counter: Rgb,
    cabinet: Rgb,
    shelf: Rgb,
    accent: Rgb,
    detail: Rgb,
}

const PLAIN: Palette = Palette {
    wall: [196, 190, 180],
    floor: [120, 116, 110],
    counter: [176, 176, 176],
    cabinet: [110, 110, 110],
    shelf: [80, 80, 80],
    accent: [0, 0, 0],
    detail: [0, 0, 0],
};

fn palette(kind: RoomKind) -> Palette {
    match kind {
        RoomKind::Kitchen => Palette {
            wall: [222, 214, 170],
            floor: [150, 110, 70],
            counter: [200, 200, 205],
            cabinet: [120, 90, 60],
            shelf: [110, 80, 50],
            accent: [150, 200, 240],
            detail: [255, 255, 255],
        },
        RoomKind::Bathroom => Palette {
            wall: [170, 215, 225],
            floor: [235, 235, 235],
            counter: [245, 245, 245],
            cabinet: [90, 150, 170],
            shelf: [250, 250, 250],
            accent: [200, 230, 240],
            detail: [60, 110, 140],
        },
        RoomKind::Bedroom => Palette {
            wall: [220, 180, 200],
            floor: [120, 80, 100],
            counter: [150, 100, 70],
            cabinet: [110, 70, 50],
            shelf: [170, 120, 80],
            accent: [240, 240, 250],
            detail: [180, 60, 90],
        },
        RoomKind::Study => Palette {
            wall: [160, 180, 150],
            floor: [90, 70, 50],
            counter: [100, 70, 40],
            cabinet: [70, 50, 30],
            shelf: [80, 60, 40],
            accent: [190, 40, 40],
            detail: [40, 60, 160],
        },
        RoomKind::Living => Palette {
            wall: [235, 200, 160],
            floor: [170, 60, 50],
            counter: [130, 110, 90],
            cabinet: [90, 75, 60],
            shelf: [120, 100, 80],
            accent: [60, 90, 150],
            detail: [230, 180, 40],
        },
    }
}

fn jitter(c: Rgb, rng: &mut Rng) -> Rgb {
    c.map(|v| (v as i64 + rng.range_inclusive(-10, 10)).clamp(0, 255) as u8)
}

impl RoomSpec {
    /// Procedural room with a wall shelf above a table, both spanning the
    /// middle at heights that vary from room to room. Furnished rooms add
    /// kind-specific colors and decor. No surface top lands within two
    /// pixels of `avoid_y`.
    pub fn generate(
        kind: RoomKind,
        furnished: bool,
        avoid_y: usize,
        config: &SceneConfig,
        rng: &mut Rng,
    ) -> RoomSpec {
        let px = |v: f64| config.px(v);
        let pal = if furnished { palette(kind) } else { PLAIN };
        let wall = jitter(pal.wall, rng);
        let floor = jitter(pal.floor, rng);
        let counter = jitter(pal.counter, rng);
        let cabinet = jitter(pal.cabinet, rng);
        let shelf = jitter(pal.shelf, rng);
        let floor_y = px(88.0);

        // The shelf hangs above the table. Both heights vary from room to
        // room so that absolute height says little about which surface an
        // object stands on; the other surface does.
        let (shelf_y, table_y) = loop {
            let shelf = px(28.0) + rng.below(px(34.0) + 1);
            let table = shelf + px(16.0) + rng.below(px(6.0) + 1);
            if shelf.abs_diff(avoid_y) > 2 && table.abs_diff(avoid_y) > 2 {
                break (shelf, table);
            }
        };
        let table = Surface {
            y: table_y,
            x0: px(6.0) + rng.below(px(8.0) + 1),
            x1: px(82.0) + rng.below(px(8.0) + 1),
            kind: SupportKind::Table,
        };
        let shelf_s = Surface {
            y: shelf_y,
            x0: px(14.0) + rng.below(px(8.0) + 1),
            x1: px(74.0) + rng.below(px(8.0) + 1),
            kind: SupportKind::Shelf,
        };

        let b = |x0: usize, y0: usize, x1: usize, y1: usize, color: Rgb| Block {
            x0: x0 as i64,
            y0: y0 as i64,
            x1: x1 as i64,
            y1: y1 as i64,
            color,
        };
        let mut furniture = Vec::new();
        // Decor sits behind the surfaces.
        let dx = rng.below(px(10.0) + 1);
        match kind {
            _ if !furnished => {}
            RoomKind::Kitchen => {
                furniture.push(b(
                    px(30.0) + dx,
                    px(6.0),
                    px(60.0) + dx,
                    px(26.0),
                    pal.detail,
                ));
                furniture.push(b(
                    px(32.0) + dx,
                    px(8.0),
                    px(58.0) + dx,
                    px(24.0),
                    pal.accent,
                ));
                for i in 0..6 {
                    let x = px(8.0) + i * px(14.0);
                    furniture.push(b(x, px(48.0), x + px(6.0), px(54.0), pal.detail));
                }
            }
            RoomKind::Bathroom => {
                furniture.push(b(
                    px(34.0) + dx,
                    px(4.0),
                    px(56.0) + dx,
                    px(28.0),
                    pal.detail,
                ));
                furniture.push(b(
                    px(36.0) + dx,
                    px(6.0),
                    px(54.0) + dx,
                    px(26.0),
                    pal.accent,
                ));
                for i in 0..8 {
                    let y = px(44.0) + (i % 2) * px(8.0);
                    let x = px(4.0) + i * px(11.0);
                    furniture.push(b(x, y, x + px(5.0), y + px(5.0), pal.accent));
                }
            }
            RoomKind::Bedroom => {
                furniture.push(b(
                    px(8.0) + dx,
                    px(8.0),
                    px(26.0) + dx,
                    px(26.0),
                    pal.detail,
                ));
                furniture.push(b(
                    px(11.0) + dx,
                    px(11.0),
                    px(23.0) + dx,
                    px(23.0),
                    pal.accent,
                ));
                furniture.push(b(px(60.0), px(46.0), px(94.0), px(62.0), pal.detail));
                furniture.push(b(px(60.0), px(42.0), px(70.0), px(50.0), pal.accent));
            }
            RoomKind::Study => {
                for i in 0..9 {
                    let x = px(4.0) + i * px(3.0);
                    let color = if i % 2 == 0 { pal.accent } else { pal.detail };
                    furniture.push(b(x, px(12.0), x + px(2.0), px(30.0), color));
                }
                furniture.push(b(
                    px(62.0) + dx / 2,
                    px(8.0),
                    px(86.0),
                    px(26.0),
                    pal.detail,
                ));
            }
            RoomKind::Living => {
                furniture.push(b(px(4.0), px(44.0), px(30.0), px(62.0), pal.accent));
                furniture.push(b(px(66.0), px(44.0), px(92.0), px(62.0), pal.accent));
                furniture.push(b(
                    px(40.0) + dx,
                    px(6.0),
                    px(58.0) + dx,
                    px(22.0),
                    pal.detail,
                ));
            }
        }
        // Table: thick top, apron and two legs down to the floor line.
        let t = table;
        furniture.push(b(
            t.x0 + px(1.0),
            t.y + px(5.0),
            t.x0 + px(4.0),
            floor_y,
            cabinet,
        ));
        furniture.push(b(
            t.x1 - px(4.0),
            t.y + px(5.0),
            t.x1 - px(1.0),
            floor_y,
            cabinet,
        ));
        furniture.push(b(
            t.x0 + px(2.0),
            t.y + px(5.0),
            t.x1 - px(2.0),
            t.y + px(7.0),
            cabinet,
        ));
        furniture.push(b(t.x0, t.y, t.x1, t.y + px(5.0), counter));
        // Shelf: thin slab on two wall brackets.
        let s = shelf_s;
        furniture.push(b(s.x0, s.y, s.x1, s.y + px(2.0), shelf));
        furniture.push(b(
            s.x0 + px(4.0),
            s.y + px(2.0),
            s.x0 + px(6.0),
            s.y + px(8.0),
            shelf,
        ));
        furniture.push(b(
            s.x1 - px(6.0),
            s.y + px(2.0),
            s.x1 - px(4.0),
            s.y + px(8.0),
            shelf,
        ));

        RoomSpec {
            room_kind: kind,
            furnished,
            wall,
            floor,
            floor_y,
            surfaces: vec![table, shelf_s],
            furniture,
        }
    }

    pub fn surface(&self, kind: SupportKind) -> &Surface {
        self.surfaces
            .iter()
            .find(|s| s.kind == kind)
            .expect("every room has both support kinds")
    }

    pub fn validate(&self, side: usize) -> Result<()> {
        for s in &self.surfaces {
            if s.x0 >= s.x1 || s.x1 > side || s.y == 0 || s.y >= side {
                return Err(Error::Generation(format!(
                    "surface {s:?} outside the {side}px room"
                )));
            }
        }
        Ok(())
    }
}

/// Where one glyph is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Placement {
    pub class_id: usize,
    pub bbox: BoundingBox,
    /// Bottom edge rests on a surface.
    pub supported: bool,
    /// A transform had to be clamped to keep the glyph inside the image.
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub side: usize,
    pub room: RoomSpec,
    pub distractors: Vec<Placement>,
    pub target: Placement,
}

fn draw_glyph(img: &mut RgbImage, glyph: &Stencil, bbox: &BoundingBox) {
    for y in 0..bbox.h {
        for x in 0..bbox.w {
            img.set(bbox.x + x, bbox.y + y, glyph.sample(x, y, bbox.w, bbox.h));
        }
    }
}

fn overlaps(a: &BoundingBox, b: &BoundingBox, gap: usize) -> bool {
    a.x < b.right() + gap
        && b.x < a.right() + gap
        && a.y < b.bottom() + gap
        && b.y < a.bottom() + gap
}

/// Replaces every pixel outside `bbox` with grey or with black/white noise.
pub fn blank_context(
    image: &RgbImage,
    bbox: &BoundingBox,
    mode: BlankMode,
    rng: &mut Rng,
) -> RgbImage {
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            if bbox.contains(x, y) {
                continue;
            }
            let c = match mode {
                BlankMode::Grey => GREY,
                BlankMode::SaltPepper if rng.bernoulli(0.5) => [255, 255, 255],
                BlankMode::SaltPepper => [0, 0, 0],
            };
            out.set(x, y, c);
        }
    }
    out
}

/// One rendered example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub bbox: BoundingBox,
    pub class_id: usize,
    pub condition: ConditionTag,
    pub size_bin: SizeBin,
    pub seed: u64,
    pub room_kind: RoomKind,
    pub clamped: bool,
}

/// Builds scenes and the condition transforms over a class roster.
#[derive(Clone, Debug)]
pub struct SceneGenerator {
    pub roster: Roster,
    pub config: SceneConfig,
}

impl SceneGenerator {
    pub fn new(roster: Roster, config: SceneConfig) -> Result<Self> {
        roster.validate()?;
        config.validate()?;
        Ok(SceneGenerator { roster, config })
    }

    /// Scene in one of the class's home rooms with the target on a surface.
    pub fn generate_base_scene(&self, rng: &mut Rng, class_id: usize) -> Result<Scene> {
        let class = self.roster.get(class_id)?;
        let room = class.home_rooms[rng.below(class.home_rooms.len())];
        self.scene_in_room(rng, class_id, room)
    }

    /// Scene in `room_kind` with the target on a surface near the center.
    pub fn scene_in_room(
        &self,
        rng: &mut Rng,
        class_id: usize,
        room_kind: RoomKind,
    ) -> Result<Scene> {
        let cfg = &self.config;
        let side = cfg.image_side;
        let class = self.roster.get(class_id)?;
        let furnished = rng.bernoulli(cfg.room_cue_prob);
        let h = cfg
            .px((class.base_size as i64 + rng.range_inclusive(-1, 1)) as f64)
            .max(2);
        let w = class.width_for(h);
        // Keep the mid-height position free of surfaces so that a centered
        // target is always unsupported.
        let mid_bottom = side / 2 - h / 2 + h;
        let room = RoomSpec::generate(room_kind, furnished, mid_bottom, cfg, rng);
        room.validate(side)?;

        let kind = if rng.bernoulli(cfg.support_fidelity) {
            class.support_kind
        } else {
            match class.support_kind {
                SupportKind::Table => SupportKind::Shelf,
                SupportKind::Shelf => SupportKind::Table,
            }
        };
        let surface = *room.surface(kind);
        if h > surface.y || w > surface.x1 - surface.x0 {
            return Err(Error::Generation(format!(
                "class '{}' does not fit its surface",
                class.name
            )));
        }
        let jitter = (rng.uniform() * 2.0 - 1.0) * cfg.center_jitter * side as f64;
        let cx = side as f64 / 2.0 + jitter;
        let x = ((cx - w as f64 / 2.0).round() as i64)
            .clamp(surface.x0 as i64, (surface.x1 - w) as i64) as usize;
        let target = Placement {
            class_id,
            bbox: BoundingBox::new(x, surface.y - h, w, h),
            supported: true,
            clamped: false,
        };

        // Room-typical companions in furnished rooms, any class otherwise;
        // never the target's glyph.
        let mut pool: Vec<usize> = self
            .roster
            .classes
            .iter()
            .filter(|c| c.glyph != class.glyph && (!furnished || c.home_rooms.contains(&room_kind)))
            .map(|c| c.class_id)
            .collect();
        if pool.is_empty() {
            pool = self
                .roster
                .classes
                .iter()
                .filter(|c| c.glyph != class.glyph)
                .map(|c| c.class_id)
                .collect();
        }
        let mut distractors: Vec<Placement> = Vec::with_capacity(cfg.distractors);
        let mut attempts = 0;
        while distractors.len() < cfg.distractors {
            attempts += 1;
            if attempts > cfg.max_attempts {
                return Err(Error::Generation(format!(
                    "no non-overlapping layout after {} attempts",
                    cfg.max_attempts
                )));
            }
            let d = self.roster.get(pool[rng.below(pool.len())])?;
            let s = room.surfaces[rng.below(room.surfaces.len())];
            let dh = cfg.px(d.base_size as f64);
            let dw = d.width_for(dh);
            if dw > s.x1 - s.x0 || dh > s.y {
                continue;
            }
            let dx = s.x0 + rng.below(s.x1 - s.x0 - dw + 1);
            let bbox = BoundingBox::new(dx, s.y - dh, dw, dh);
            if overlaps(&bbox, &target.bbox, 1)
                || distractors.iter().any(|p| overlaps(&bbox, &p.bbox, 1))
            {
                continue;
            }
            distractors.push(Placement {
                class_id: d.class_id,
                bbox,
                supported: true,
                clamped: false,
            });
        }
        Ok(Scene {
            side,
            room,
            distractors,
            target,
        })
    }

    /// Lifts the target by the configured fraction of the room height.
    pub fn apply_gravity(&self, placement: &Placement) -> Placement {
        let lift = self.config.lift_pixels();
        let margin = 1;
        let (y, clamped) = if placement.bbox.y >= lift + margin {
            (placement.bbox.y - lift, false)
        } else {
            (margin.min(placement.bbox.y), true)
        };
        Placement {
            bbox: BoundingBox {
                y,
                ..placement.bbox
            },
            supported: false,
            clamped: placement.clamped || clamped,
            ..*placement
        }
    }

    /// Uniform draw among the rooms where the class is not at home.
    pub fn apply_cooccurrence(&self, class_id: usize, rng: &mut Rng) -> Result<RoomKind> {
        let class = self.roster.get(class_id)?;
        let rooms = class.non_home_rooms();
        if rooms.is_empty() {
            return Err(Error::ConditionUnavailable(format!(
                "class '{}' is at home in every room",
                class.name
            )));
        }
        Ok(rooms[rng.below(rooms.len())])
    }

    /// Moves the target so its vertical center is at half the room height.
    pub fn center_vertically(&self, placement: &Placement) -> Placement {
        let y = (self.config.image_side / 2).saturating_sub(placement.bbox.h / 2);
        Placement {
            bbox: BoundingBox {
                y,
                ..placement.bbox
            },
            supported: false,
            ..*placement
        }
    }

    /// Wrong room and floating at mid height. With the same `rng` state this
    /// is the co-occurrence scene with only the target moved.
    pub fn apply_cooccur_gravity(&self, class_id: usize, rng: &mut Rng) -> Result<Scene> {
        let room = self.apply_cooccurrence(class_id, rng)?;
        let mut scene = self.scene_in_room(rng, class_id, room)?;
        scene.target = self.center_vertically(&scene.target);
        Ok(scene)
    }

    /// Scales the target about its bottom-center anchor.
    pub fn apply_size(&self, placement: &Placement, factor: usize) -> Result<Placement> {
        if !(2..=4).contains(&factor) {
            return Err(Error::Parameter(format!(
                "size factor {factor} not in {{2, 3, 4}}"
            )));
        }
        let side = self.config.image_side;
        let b = placement.bbox;
        let anchor_x = b.x + b.w / 2;
        let bottom = b.bottom();
        let (mut w, mut h) = (b.w * factor, b.h * factor);
        let max_w = 2 * anchor_x.min(side - anchor_x);
        let clamped = w > max_w || h > bottom;
        if clamped {
            let s = (max_w as f64 / w as f64).min(bottom as f64 / h as f64);
            h = ((h as f64 * s).floor() as usize).max(2);
            w = (((w as f64 * s) / 2.0).floor() as usize).max(1) * 2;
        }
        Ok(Placement {
            bbox: BoundingBox::new(anchor_x - w / 2, bottom - h, w, h),
            clamped: placement.clamped || clamped,
            ..*placement
        })
    }

    pub fn render(&self, scene: &Scene) -> Result<RgbImage> {
        let side = scene.side;
        let room = &scene.room;
        let mut img = RgbImage::filled(side, side, room.wall);
        img.fill_rect(0, room.floor_y as i64, side as i64, side as i64, room.floor);
        for f in &room.furniture {
            img.fill_rect(f.x0, f.y0, f.x1, f.y1, f.color);
        }
        for p in scene
            .distractors
            .iter()
            .chain(std::iter::once(&scene.target))
        {
            p.bbox.validate(side, side)?;
            draw_glyph(&mut img, &self.roster.get(p.class_id)?.glyph, &p.bbox);
        }
        Ok(img)
    }

    /// Builds the sample for `(seed, condition, class_id)`; the same triple
    /// always yields the same pixels.
    pub fn generate_sample(
        &self,
        seed: u64,
        condition: ConditionTag,
        class_id: usize,
    ) -> Result<Sample> {
        let mut rng = Rng::new(seed);
        let mut scene = match condition {
            ConditionTag::CoOccur => {
                let room = self.apply_cooccurrence(class_id, &mut rng)?;
                self.scene_in_room(&mut rng, class_id, room)?
            }
            ConditionTag::CoOccurGravity => self.apply_cooccur_gravity(class_id, &mut rng)?,
            _ => self.generate_base_scene(&mut rng, class_id)?,
        };
        match condition {
            ConditionTag::Gravity => scene.target = self.apply_gravity(&scene.target),
            c => {
                if let Some(f) = c.size_factor() {
                    scene.target = self.apply_size(&scene.target, f)?;
                }
            }
        }
        let mut image = self.render(&scene)?;
        let bbox = scene.target.bbox;
        match condition {
            ConditionTag::NoContextGrey => {
                image = blank_context(&image, &bbox, BlankMode::Grey, &mut rng)
            }
            ConditionTag::NoContextSaltPepper => {
                image = blank_context(&image, &bbox, BlankMode::SaltPepper, &mut rng)
            }
            _ => {}
        }
        Ok(Sample {
            image,
            bbox,
            class_id,
            condition,
            size_bin: SizeBin::of(&bbox, self.config.small_threshold),
            seed,
            room_kind: scene.room.room_kind,
            clamped: scene.target.clamped,
        })
    }
}
