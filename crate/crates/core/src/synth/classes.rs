use std::fmt;
use std::str::FromStr;

use super::raster::Rgb;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RoomKind {
    Kitchen,
    Bathroom,
    Bedroom,
    Study,
    Living,
}

impl RoomKind {
    pub const ALL: [RoomKind; 5] = [
        RoomKind::Kitchen,
        RoomKind::Bathroom,
        RoomKind::Bedroom,
        RoomKind::Study,
        RoomKind::Living,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RoomKind::Kitchen => "kitchen",
            RoomKind::Bathroom => "bathroom",
            RoomKind::Bedroom => "bedroom",
            RoomKind::Study => "study",
            RoomKind::Living => "living",
        }
    }
}

impl fmt::Display for RoomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RoomKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown room kind '{s}'")))
    }
}

/// Which support surface a class normally rests on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SupportKind {
    /// Tables and counters.
    Table,
    /// Wall shelves.
    Shelf,
}

/// Opaque glyph: rows of palette indices, drawn to fill its box exactly.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stencil {
    pub rows: Vec<Vec<u8>>,
    pub colors: Vec<Rgb>,
}

impl Stencil {
    /// Parses rows where `.`, `#` and `o` select colors 0, 1 and 2.
    pub fn parse(rows: &[&str], colors: &[Rgb]) -> Self {
        let rows: Vec<Vec<u8>> = rows
            .iter()
            .map(|r| {
                r.bytes()
                    .map(|b| match b {
                        b'.' => 0,
                        b'#' => 1,
                        b'o' => 2,
                        other => panic!("bad stencil char {}", other as char),
                    })
                    .collect()
            })
            .collect();
        assert!(rows.iter().all(|r| r.len() == rows[0].len()));
        Stencil {
            rows,
            colors: colors.to_vec(),
        }
    }

    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.rows[0].len()
    }

    /// Nearest-neighbor color at `(x, y)` of a `w x h` rendering.
    pub fn sample(&self, x: usize, y: usize, w: usize, h: usize) -> Rgb {
        let sy = y * self.height() / h;
        let sx = x * self.width() / w;
        self.colors[self.rows[sy][sx] as usize]
    }
}

/// One object category.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassDef {
    pub class_id: usize,
    pub name: &'static str,
    pub glyph: Stencil,
    pub home_rooms: Vec<RoomKind>,
    /// Glyph height in pixels before per-sample jitter.
    pub base_size: usize,
    pub support_required: bool,
    pub support_kind: SupportKind,
}

impl ClassDef {
    pub fn non_home_rooms(&self) -> Vec<RoomKind> {
        RoomKind::ALL
            .into_iter()
            .filter(|k| !self.home_rooms.contains(k))
            .collect()
    }

    /// Width for a glyph of height `h`, following the stencil aspect ratio.
    /// Always even, so a bottom-center anchor sits on a pixel boundary.
    pub fn width_for(&self, h: usize) -> usize {
        let w = (h * self.glyph.width()) as f64 / self.glyph.height() as f64;
        ((w / 2.0).round().max(1.0) as usize) * 2
    }
}

/// The class table.
#[derive(Clone, Debug, PartialEq)]
pub struct Roster {
    pub classes: Vec<ClassDef>,
}

impl Roster {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, class_id: usize) -> Result<&ClassDef> {
        self.classes.get(class_id).ok_or_else(|| {
            Error::Index(format!(
                "class {class_id} not in roster of {}",
                self.classes.len()
            ))
        })
    }

    pub fn by_name(&self, name: &str) -> Option<&ClassDef> {
        self.classes.iter().find(|c| c.name == name)
    }

    /// Pairs of classes with identical glyphs and disjoint home rooms.
    pub fn ambiguous_pairs(&self) -> Vec<(usize, usize)> {
        let mut pairs = Vec::new();
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.glyph == b.glyph && a.home_rooms.iter().all(|r| !b.home_rooms.contains(r)) {
                    pairs.push((a.class_id, b.class_id));
                }
            }
        }
        pairs
    }

    /// Class ids that belong to some ambiguous pair.
    pub fn ambiguous_classes(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .ambiguous_pairs()
            .into_iter()
            .flat_map(|(a, b)| [a, b])
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Config("roster needs at least two classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            if c.class_id != i {
                return Err(Error::Config(format!(
                    "class '{}' has id {} at position {i}",
                    c.name, c.class_id
                )));
            }
            if c.home_rooms.is_empty() {
                return Err(Error::Config(format!(
                    "class '{}' has no home room",
                    c.name
                )));
            }
        }
        if self.ambiguous_pairs().is_empty() {
            return Err(Error::Config("roster has no ambiguous glyph pair".into()));
        }
        // Glyph plus room must identify the class.
        for (i, a) in self.classes.iter().enumerate() {
            for b in &self.classes[i + 1..] {
                if a.glyph == b.glyph && a.home_rooms.iter().any(|r| b.home_rooms.contains(r)) {
                    return Err(Error::Config(format!(
                        "classes '{}' and '{}' share a glyph and a home room",
                        a.name, b.name
                    )));
                }
            }
        }
        Ok(())
    }
}

fn jar() -> Stencil {
    Stencil::parse(
        &[
            "..####..", //
            "..#oo#..", ".######.", "#oooooo#", "#o#oo#o#", "#oooooo#", "#o#oo#o#", ".######.",
        ],
        &[[60, 60, 60], [200, 40, 40], [250, 230, 120]],
    )
}

fn crate_box() -> Stencil {
    Stencil::parse(
        &[
            "########", //
            "#o....o#", "#.o..o.#", "#..oo..#", "#..oo..#", "#.o..o.#", "#o....o#", "########",
        ],
        &[[90, 160, 90], [30, 60, 30], [240, 240, 240]],
    )
}

fn plant() -> Stencil {
    Stencil::parse(
        &[
            ".#.##.#.", //
            "#o#oo#o#", ".#o##o#.", "..#oo#..", "...##...", "..oooo..", "..oooo..", "...oo...",
        ],
        &[[250, 250, 250], [20, 140, 40], [150, 80, 30]],
    )
}

fn lamp() -> Stencil {
    Stencil::parse(
        &[
            "..####..", //
            ".#oooo#.", "#oooooo#", "########", "...##...", "...##...", "..####..", ".######.",
        ],
        &[[20, 20, 60], [40, 40, 40], [255, 240, 60]],
    )
}

fn kettle() -> Stencil {
    Stencil::parse(
        &[
            "...##....", //
            ".######..",
            "#oooooo##",
            "#oooooo.#",
            "#oooooo.#",
            "#oooooo##",
            ".######..",
            ".#....#..",
        ],
        &[[230, 230, 230], [30, 30, 30], [70, 120, 200]],
    )
}

fn clock() -> Stencil {
    Stencil::parse(
        &[
            "..####..", //
            ".#oooo#.", "#ooo#oo#", "#ooo#oo#", "#ooo##o#", "#oooooo#", ".#oooo#.", "..####..",
        ],
        &[[120, 40, 140], [10, 10, 10], [255, 255, 255]],
    )
}

/// Eight classes, two ambiguous pairs. Twins share glyph and size but live
/// in disjoint rooms and on different support kinds.
pub fn default_roster() -> Roster {
    use RoomKind::*;
    use SupportKind::*;
    let class = |class_id, name, glyph, home_rooms: &[RoomKind], base_size, support| ClassDef {
        class_id,
        name,
        glyph,
        home_rooms: home_rooms.to_vec(),
        base_size,
        support_required: true,
        support_kind: support,
    };
    Roster {
        classes: vec![
            class(0, "jar", jar(), &[Kitchen, Study], 14, Table),
            class(1, "lotion", jar(), &[Bathroom, Bedroom], 14, Shelf),
            class(2, "box", crate_box(), &[Study, Living], 14, Shelf),
            class(3, "basket", crate_box(), &[Bathroom, Kitchen], 14, Table),
            class(4, "plant", plant(), &[Living, Bedroom], 20, Table),
            class(5, "lamp", lamp(), &[Bedroom, Study], 22, Shelf),
            class(6, "kettle", kettle(), &[Kitchen], 18, Table),
            class(7, "clock", clock(), &[Living, Kitchen], 16, Shelf),
        ],
    }
}
