//! Marker identity model: tag codebook, patch templates, and layouts.
//!
//! A patch is a printed grid of square blocks. Every block carries a
//! two-character tag drawn from an 18-character alphabet chosen so that no
//! two characters become confusable under 90-degree rotations, giving
//! 18 x 18 = 324 usable tags per session. Detectable corners are the lattice
//! points of the block grid: an `r x c` patch of blocks exposes
//! `(r+1) x (c+1)` corners, and side-adjacent blocks share the two corners
//! along their common edge. Corners are the actual motion-capture markers;
//! blocks and tags exist to give corners identity.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::hand::KinematicHand;

/// Characters that survive rotation/mirror confusion filtering.
pub const TAG_ALPHABET: [char; 18] = [
    'A', 'C', 'E', 'F', 'H', 'J', 'K', 'L', 'M', 'N', 'P', 'R', 'T', 'U', 'W', 'X', 'Y', '3',
];

#[derive(Debug, thiserror::Error)]
pub enum MarkerError {
    #[error("character `{0}` is not in the tag alphabet")]
    UnknownChar(char),
    #[error("malformed tag `{0}`, expected two alphabet characters")]
    MalformedTag(String),
    #[error("duplicate tag {tag} in patch `{patch}`")]
    DuplicateTag { patch: String, tag: TagPair },
    #[error("tag {tag} appears in patches `{first}` and `{second}`")]
    TagCollision { tag: TagPair, first: String, second: String },
    #[error("patch `{patch}` grid {rows}x{cols} needs {expected} tags, got {got}")]
    GridSizeMismatch { patch: String, rows: usize, cols: usize, expected: usize, got: usize },
    #[error("layout needs {requested} block tags but the codebook holds {capacity}")]
    CapacityExceeded { requested: usize, capacity: usize },
    #[error("patch `{patch}` references unknown hand segment `{segment}`")]
    UnknownSegment { patch: String, segment: String },
    #[error("empty patch grid in `{patch}`")]
    EmptyGrid { patch: String },
}

/// Ordered pair of alphabet characters printed inside one block.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TagPair {
    pub left: char,
    pub right: char,
}

impl TagPair {
    pub fn new(left: char, right: char) -> Result<Self, MarkerError> {
        if !TAG_ALPHABET.contains(&left) {
            return Err(MarkerError::UnknownChar(left));
        }
        if !TAG_ALPHABET.contains(&right) {
            return Err(MarkerError::UnknownChar(right));
        }
        Ok(TagPair { left, right })
    }

    pub fn parse(s: &str) -> Result<Self, MarkerError> {
        let mut chars = s.chars();
        match (chars.next(), chars.next(), chars.next()) {
            (Some(l), Some(r), None) => TagPair::new(l, r),
            _ => Err(MarkerError::MalformedTag(s.to_string())),
        }
    }
}

impl fmt::Display for TagPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.left, self.right)
    }
}

impl fmt::Debug for TagPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.left, self.right)
    }
}

impl TryFrom<String> for TagPair {
    type Error = MarkerError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        TagPair::parse(&s)
    }
}

impl From<TagPair> for String {
    fn from(t: TagPair) -> String {
        t.to_string()
    }
}

/// In-image orientation of a detected block, in quarter turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Deg0,
    Deg90,
    Deg180,
    Deg270,
}

impl Orientation {
    pub fn steps(self) -> usize {
        match self {
            Orientation::Deg0 => 0,
            Orientation::Deg90 => 1,
            Orientation::Deg180 => 2,
            Orientation::Deg270 => 3,
        }
    }

    pub fn from_steps(steps: usize) -> Self {
        match steps % 4 {
            0 => Orientation::Deg0,
            1 => Orientation::Deg90,
            2 => Orientation::Deg180,
            _ => Orientation::Deg270,
        }
    }
}

/// Decoded block appearance: which tag, rotated how far in the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BlockTag {
    pub left: char,
    pub right: char,
    pub orientation: Orientation,
}

impl BlockTag {
    pub fn pair(&self) -> TagPair {
        TagPair { left: self.left, right: self.right }
    }
}

/// Globally unique corner identity: `(patch, lattice index)`.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MarkerId {
    pub patch: String,
    pub index: u32,
}

impl MarkerId {
    pub fn new(patch: impl Into<String>, index: u32) -> Self {
        MarkerId { patch: patch.into(), index }
    }
}

impl fmt::Debug for MarkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.patch, self.index)
    }
}

impl fmt::Display for MarkerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.patch, self.index)
    }
}

/// Grid direction from one block to a side-adjacent one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Left,
    Right,
}

impl Direction {
    pub fn delta(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
        }
    }
}

/// The session tag codebook.
#[derive(Debug, Clone)]
pub struct MarkerCodebook;

impl MarkerCodebook {
    pub fn capacity(&self) -> usize {
        TAG_ALPHABET.len() * TAG_ALPHABET.len()
    }

    /// All tags in lexicographic (left-major) order.
    pub fn tags(&self) -> impl Iterator<Item = TagPair> {
        TAG_ALPHABET.iter().flat_map(|&l| {
            TAG_ALPHABET
                .iter()
                .map(move |&r| TagPair { left: l, right: r })
        })
    }

    pub fn index_of(&self, tag: TagPair) -> Option<usize> {
        let l = TAG_ALPHABET.iter().position(|&c| c == tag.left)?;
        let r = TAG_ALPHABET.iter().position(|&c| c == tag.right)?;
        Some(l * TAG_ALPHABET.len() + r)
    }
}

pub fn build_codebook() -> MarkerCodebook {
    MarkerCodebook
}

/// Printed patch: an `rows x cols` grid of tagged blocks.
///
/// Block cells are `(row, col)` with row 0 at the top of the printed patch.
/// Local corners of a block are indexed clockwise in grid coordinates:
/// `0 -> (r, c)`, `1 -> (r, c+1)`, `2 -> (r+1, c+1)`, `3 -> (r+1, c)`.
#[derive(Debug, Clone)]
pub struct PatchTemplate {
    pub patch_id: String,
    pub rows: usize,
    pub cols: usize,
    grid: Vec<TagPair>,
    by_tag: HashMap<TagPair, (usize, usize)>,
}

impl PatchTemplate {
    pub fn new(
        patch_id: impl Into<String>,
        rows: usize,
        cols: usize,
        tags: Vec<TagPair>,
    ) -> Result<Self, MarkerError> {
        let patch_id = patch_id.into();
        if rows == 0 || cols == 0 {
            return Err(MarkerError::EmptyGrid { patch: patch_id });
        }
        if tags.len() != rows * cols {
            return Err(MarkerError::GridSizeMismatch {
                patch: patch_id,
                rows,
                cols,
                expected: rows * cols,
                got: tags.len(),
            });
        }
        let mut by_tag = HashMap::with_capacity(tags.len());
        for (i, &tag) in tags.iter().enumerate() {
            let cell = (i / cols, i % cols);
            if by_tag.insert(tag, cell).is_some() {
                return Err(MarkerError::DuplicateTag { patch: patch_id, tag });
            }
        }
        Ok(PatchTemplate { patch_id, rows, cols, grid: tags, by_tag })
    }

    pub fn block_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn corner_count(&self) -> usize {
        (self.rows + 1) * (self.cols + 1)
    }

    pub fn tags(&self) -> &[TagPair] {
        &self.grid
    }

    pub fn tag_at(&self, cell: (usize, usize)) -> Option<TagPair> {
        if cell.0 < self.rows && cell.1 < self.cols {
            Some(self.grid[cell.0 * self.cols + cell.1])
        } else {
            None
        }
    }

    pub fn cell_of(&self, tag: TagPair) -> Option<(usize, usize)> {
        self.by_tag.get(&tag).copied()
    }

    pub fn contains(&self, tag: TagPair) -> bool {
        self.by_tag.contains_key(&tag)
    }

    /// Lattice coordinates of local corner `k` of block `cell`.
    pub fn corner_lattice(cell: (usize, usize), k: usize) -> (usize, usize) {
        let (r, c) = cell;
        match k {
            0 => (r, c),
            1 => (r, c + 1),
            2 => (r + 1, c + 1),
            3 => (r + 1, c),
            _ => panic!("local corner index {k} out of range"),
        }
    }

    pub fn lattice_marker_id(&self, lattice: (usize, usize)) -> MarkerId {
        let index = (lattice.0 * (self.cols + 1) + lattice.1) as u32;
        MarkerId { patch: self.patch_id.clone(), index }
    }

    /// Marker identity of local corner `k` of block `cell`.
    pub fn corner_id(&self, cell: (usize, usize), k: usize) -> MarkerId {
        self.lattice_marker_id(Self::corner_lattice(cell, k))
    }

    pub fn marker_ids(&self) -> impl Iterator<Item = MarkerId> + '_ {
        (0..self.corner_count() as u32).map(|index| MarkerId {
            patch: self.patch_id.clone(),
            index,
        })
    }

    /// Side-adjacent neighbors of the block carrying `tag`.
    pub fn neighbors(&self, tag: TagPair) -> Vec<(TagPair, Direction)> {
        let Some((r, c)) = self.cell_of(tag) else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(4);
        for dir in [Direction::Up, Direction::Down, Direction::Left, Direction::Right] {
            let (dr, dc) = dir.delta();
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr >= 0 && nc >= 0 {
                if let Some(t) = self.tag_at((nr as usize, nc as usize)) {
                    out.push((t, dir));
                }
            }
        }
        out
    }
}

/// The set of templates active in one capture session.
///
/// Tags must be unique across the whole set so that a decoded tag pins down
/// both the patch and the cell.
#[derive(Debug, Clone, Default)]
pub struct TemplateSet {
    templates: Vec<PatchTemplate>,
    by_tag: HashMap<TagPair, usize>,
    by_patch: HashMap<String, usize>,
}

impl TemplateSet {
    pub fn new(templates: Vec<PatchTemplate>) -> Result<Self, MarkerError> {
        let mut by_tag: HashMap<TagPair, usize> = HashMap::new();
        let mut by_patch: HashMap<String, usize> = HashMap::new();
        for (i, t) in templates.iter().enumerate() {
            by_patch.insert(t.patch_id.clone(), i);
            for &tag in t.tags() {
                if let Some(&prev) = by_tag.get(&tag) {
                    return Err(MarkerError::TagCollision {
                        tag,
                        first: templates[prev].patch_id.clone(),
                        second: t.patch_id.clone(),
                    });
                }
                by_tag.insert(tag, i);
            }
        }
        Ok(TemplateSet { templates, by_tag, by_patch })
    }

    pub fn templates(&self) -> &[PatchTemplate] {
        &self.templates
    }

    pub fn by_patch(&self, patch_id: &str) -> Option<&PatchTemplate> {
        self.by_patch.get(patch_id).map(|&i| &self.templates[i])
    }

    /// Template and cell of the block printed with `tag`, if any.
    pub fn lookup_tag(&self, tag: TagPair) -> Option<(&PatchTemplate, (usize, usize))> {
        let &i = self.by_tag.get(&tag)?;
        let cell = self.templates[i].cell_of(tag)?;
        Some((&self.templates[i], cell))
    }

    pub fn total_corners(&self) -> usize {
        self.templates.iter().map(|t| t.corner_count()).sum()
    }

    pub fn total_blocks(&self) -> usize {
        self.templates.iter().map(|t| t.block_count()).sum()
    }
}

/// Physical placement of one marker: which segment and where on it.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerEntry {
    /// Segment the marker is glued to.
    pub attachment: String,
    /// Position in the segment's local frame, meters.
    pub local_pos: Vector3<f64>,
}

/// All marker placements of a session, keyed by identity.
#[derive(Debug, Clone, Default)]
pub struct MarkerLayout {
    pub entries: BTreeMap<MarkerId, MarkerEntry>,
}

impl MarkerLayout {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest pairwise distance among a patch's markers in their common
    /// segment frame. Used as the patch scale by the cluster filter.
    pub fn patch_diagonal(&self, patch_id: &str) -> Option<f64> {
        let pts: Vec<&Vector3<f64>> = self
            .entries
            .iter()
            .filter(|(id, _)| id.patch == patch_id)
            .map(|(_, e)| &e.local_pos)
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let mut best: f64 = 0.0;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                best = best.max((pts[i] - pts[j]).norm());
            }
        }
        Some(best)
    }
}

/// Grid sizes and block pitches of the default hand wrap.
#[derive(Debug, Clone)]
pub struct HandLayoutConfig {
    /// Block pitch on phalanx patches, meters.
    pub phalanx_block_m: f64,
    /// Block pitch on dorsum and palm patches, meters.
    pub palm_block_m: f64,
    /// Blocks (rows across the finger, cols along it) per phalanx kind.
    pub proximal_grid: (usize, usize),
    pub middle_grid: (usize, usize),
    pub distal_grid: (usize, usize),
    /// Blocks per dorsum/palm patch; two patches sit side by side per region.
    pub palm_grid: (usize, usize),
}

impl Default for HandLayoutConfig {
    fn default() -> Self {
        HandLayoutConfig {
            phalanx_block_m: 0.004,
            palm_block_m: 0.007,
            proximal_grid: (2, 7),
            middle_grid: (2, 5),
            distal_grid: (2, 4),
            palm_grid: (5, 8),
        }
    }
}

/// Build the 19-patch hand layout: one patch per phalanx plus two dorsum and
/// two palm patches, wrapped onto the rest surface of their segments.
///
/// Tags are allocated from the codebook in patch order; running out of
/// capacity for the requested grids is an error.
pub fn build_hand_layout(
    hand: &KinematicHand,
    config: &HandLayoutConfig,
) -> Result<(TemplateSet, MarkerLayout), MarkerError> {
    struct Plan {
        patch_id: String,
        segment: String,
        grid: (usize, usize),
        block_m: f64,
        lateral_center_m: f64,
    }

    let mut plans = Vec::new();
    for finger in ["thumb", "index", "middle", "ring", "pinky"] {
        for (part, grid) in [
            ("proximal", config.proximal_grid),
            ("middle", config.middle_grid),
            ("distal", config.distal_grid),
        ] {
            let segment = format!("{finger}_{part}");
            plans.push(Plan {
                patch_id: segment.clone(),
                segment,
                grid,
                block_m: config.phalanx_block_m,
                lateral_center_m: 0.0,
            });
        }
    }
    // Two patches per region, offset sideways so they tile the surface.
    let half_span = (config.palm_grid.0 as f64 * config.palm_block_m) / 2.0 + 0.0015;
    for region in ["dorsum", "palm"] {
        for (i, side) in [-1.0f64, 1.0].iter().enumerate() {
            plans.push(Plan {
                patch_id: format!("{region}_{i}"),
                segment: region.to_string(),
                grid: config.palm_grid,
                block_m: config.palm_block_m,
                lateral_center_m: side * half_span,
            });
        }
    }

    let codebook = build_codebook();
    let requested: usize = plans.iter().map(|p| p.grid.0 * p.grid.1).sum();
    if requested > codebook.capacity() {
        return Err(MarkerError::CapacityExceeded {
            requested,
            capacity: codebook.capacity(),
        });
    }

    let mut tags = codebook.tags();
    let mut templates = Vec::with_capacity(plans.len());
    let mut layout = MarkerLayout::default();
    for plan in &plans {
        let (rows, cols) = plan.grid;
        let patch_tags: Vec<TagPair> = (&mut tags).take(rows * cols).collect();
        let template = PatchTemplate::new(plan.patch_id.clone(), rows, cols, patch_tags)?;

        let segment = hand
            .segment_index(&plan.segment)
            .ok_or_else(|| MarkerError::UnknownSegment {
                patch: plan.patch_id.clone(),
                segment: plan.segment.clone(),
            })?;
        let lattice = hand.surface_lattice(
            segment,
            rows + 1,
            cols + 1,
            plan.block_m,
            plan.lateral_center_m,
        );
        debug_assert_eq!(lattice.len(), (rows + 1) * (cols + 1));
        for (idx, p) in lattice.into_iter().enumerate() {
            layout.entries.insert(
                MarkerId { patch: plan.patch_id.clone(), index: idx as u32 },
                MarkerEntry { attachment: plan.segment.clone(), local_pos: p },
            );
        }
        templates.push(template);
    }

    let set = TemplateSet::new(templates)?;
    Ok((set, layout))
}
