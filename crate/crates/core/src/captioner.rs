//! Geographic captions: point-in-region lookup over a polygon atlas and
//! the prompt template.
//!
//! Prompts follow `A Sentinel-2 image of {biome} and {geological} in
//! {country} in {month}`. Dropped descriptors take their connector with
//! them; when the biome is dropped the geological descriptor inherits "of".

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const PROMPT_PREFIX: &str = "A Sentinel-2 image";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Month {
    January,
    February,
    March,
    April,
    May,
    June,
    July,
    August,
    September,
    October,
    November,
    December,
}

impl Month {
    pub const ALL: [Month; 12] = [
        Month::January,
        Month::February,
        Month::March,
        Month::April,
        Month::May,
        Month::June,
        Month::July,
        Month::August,
        Month::September,
        Month::October,
        Month::November,
        Month::December,
    ];

    /// 1-based month number.
    pub fn number(self) -> u32 {
        self as u32 + 1
    }

    pub fn from_number(n: u32) -> Option<Month> {
        Month::ALL.get((n as usize).wrapping_sub(1)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Month::January => "January",
            Month::February => "February",
            Month::March => "March",
            Month::April => "April",
            Month::May => "May",
            Month::June => "June",
            Month::July => "July",
            Month::August => "August",
            Month::September => "September",
            Month::October => "October",
            Month::November => "November",
            Month::December => "December",
        }
    }

    /// Northern-hemisphere winter (December through February).
    pub fn is_winter(self) -> bool {
        matches!(self, Month::December | Month::January | Month::February)
    }
}

impl fmt::Display for Month {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Month {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Ok(n) = s.parse::<u32>() {
            return Month::from_number(n).ok_or_else(|| Error::param(format!("month {n}")));
        }
        Month::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::param(format!("unknown month {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Biome {
    pub ecoregion: String,
    pub biome_type: String,
}

/// Structured descriptors for one cell, before templating.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CaptionDescriptors {
    pub biome: Option<Biome>,
    pub geological_local: Option<String>,
    pub geological_regional: Option<String>,
    pub country: Option<String>,
    pub month: Option<Month>,
}

impl CaptionDescriptors {
    pub fn is_complete(&self) -> bool {
        self.biome.is_some()
            && self.geological_local.is_some()
            && self.geological_regional.is_some()
            && self.country.is_some()
            && self.month.is_some()
    }

    /// Resolves the text of each slot. `anonymize` replaces the ecoregion
    /// name with its biome type; `regional` picks the regional geological
    /// descriptor over the local one (falling back if absent).
    pub fn caption(&self, anonymize: bool, regional: bool) -> Caption {
        let biome = self.biome.as_ref().map(|b| {
            if anonymize {
                b.biome_type.clone()
            } else {
                b.ecoregion.clone()
            }
        });
        let (first, second) = if regional {
            (&self.geological_regional, &self.geological_local)
        } else {
            (&self.geological_local, &self.geological_regional)
        };
        Caption {
            biome,
            geological: first.clone().or_else(|| second.clone()),
            country: self.country.clone(),
            month: self.month,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Descriptor {
    Biome,
    Geological,
    Country,
    Month,
}

impl Descriptor {
    pub const ALL: [Descriptor; 4] = [
        Descriptor::Biome,
        Descriptor::Geological,
        Descriptor::Country,
        Descriptor::Month,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct DescriptorSet(u8);

impl DescriptorSet {
    pub const EMPTY: DescriptorSet = DescriptorSet(0);
    pub const ALL: DescriptorSet = DescriptorSet(0b1111);

    pub fn of(items: &[Descriptor]) -> Self {
        DescriptorSet(items.iter().fold(0, |acc, d| acc | d.bit()))
    }

    pub fn contains(self, d: Descriptor) -> bool {
        self.0 & d.bit() != 0
    }

    pub fn insert(&mut self, d: Descriptor) {
        self.0 |= d.bit();
    }

    pub fn remove(&mut self, d: Descriptor) {
        self.0 &= !d.bit();
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Descriptor> {
        Descriptor::ALL.into_iter().filter(move |d| self.contains(*d))
    }
}

/// Resolved slot texts of a prompt.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Caption {
    pub biome: Option<String>,
    pub geological: Option<String>,
    pub country: Option<String>,
    pub month: Option<Month>,
}

impl Caption {
    pub fn present(&self) -> DescriptorSet {
        let mut s = DescriptorSet::EMPTY;
        if self.biome.is_some() {
            s.insert(Descriptor::Biome);
        }
        if self.geological.is_some() {
            s.insert(Descriptor::Geological);
        }
        if self.country.is_some() {
            s.insert(Descriptor::Country);
        }
        if self.month.is_some() {
            s.insert(Descriptor::Month);
        }
        s
    }

    pub fn restricted(&self, present: DescriptorSet) -> Caption {
        Caption {
            biome: self.biome.clone().filter(|_| present.contains(Descriptor::Biome)),
            geological: self
                .geological
                .clone()
                .filter(|_| present.contains(Descriptor::Geological)),
            country: self.country.clone().filter(|_| present.contains(Descriptor::Country)),
            month: self.month.filter(|_| present.contains(Descriptor::Month)),
        }
    }
}

/// Renders the descriptors in `present` that `caption` actually carries.
/// An empty selection renders the empty (unconditional) prompt.
pub fn render_prompt(caption: &Caption, present: DescriptorSet) -> String {
    let c = caption.restricted(present);
    if c.present().is_empty() {
        return String::new();
    }
    let mut out = String::from(PROMPT_PREFIX);
    match (&c.biome, &c.geological) {
        (Some(b), Some(g)) => {
            out.push_str(" of ");
            out.push_str(b);
            out.push_str(" and ");
            out.push_str(g);
        }
        (Some(x), None) | (None, Some(x)) => {
            out.push_str(" of ");
            out.push_str(x);
        }
        (None, None) => {}
    }
    if let Some(country) = &c.country {
        out.push_str(" in ");
        out.push_str(country);
    }
    if let Some(month) = c.month {
        out.push_str(" in ");
        out.push_str(month.name());
    }
    out
}

/// Inverse of [`render_prompt`]. A lone "of" phrase is classified as
/// geological when it belongs to `geological_vocab`, otherwise as biome.
pub fn parse_prompt(text: &str, geological_vocab: &[&str]) -> Result<Caption> {
    if text.is_empty() {
        return Ok(Caption::default());
    }
    let rest = text
        .strip_prefix(PROMPT_PREFIX)
        .ok_or_else(|| Error::param(format!("prompt lacks prefix: {text:?}")))?;
    let mut caption = Caption::default();

    let (of_part, mut in_part) = match rest.strip_prefix(" of ") {
        Some(r) => match r.find(" in ") {
            Some(i) => (Some(&r[..i]), &r[i..]),
            None => (Some(r), ""),
        },
        None => (None, rest),
    };

    if let Some(of) = of_part {
        let is_geo = |s: &str| geological_vocab.contains(&s);
        if is_geo(of) {
            caption.geological = Some(of.to_string());
        } else if let Some((b, g)) = of.rsplit_once(" and ").filter(|(_, g)| is_geo(g)) {
            caption.biome = Some(b.to_string());
            caption.geological = Some(g.to_string());
        } else {
            caption.biome = Some(of.to_string());
        }
    }

    let mut slots = Vec::new();
    while let Some(r) = in_part.strip_prefix(" in ") {
        let end = r.find(" in ").unwrap_or(r.len());
        slots.push(&r[..end]);
        in_part = &r[end..];
    }
    if !in_part.is_empty() {
        return Err(Error::param(format!("trailing text in prompt: {in_part:?}")));
    }
    match slots[..] {
        [] => {}
        [one] => match one.parse::<Month>() {
            Ok(m) if Month::ALL.iter().any(|x| x.name() == one) => caption.month = Some(m),
            _ => caption.country = Some(one.to_string()),
        },
        [country, month] => {
            caption.country = Some(country.to_string());
            caption.month = Some(month.parse()?);
        }
        _ => return Err(Error::param(format!("too many 'in' clauses: {text:?}"))),
    }
    Ok(caption)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layer {
    Country,
    Ecoregion,
    LandformLocal,
    LandformRegional,
}

impl Layer {
    pub const ALL: [Layer; 4] = [
        Layer::Country,
        Layer::Ecoregion,
        Layer::LandformLocal,
        Layer::LandformRegional,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            Layer::Country => "country",
            Layer::Ecoregion => "ecoregion",
            Layer::LandformLocal => "landform_local",
            Layer::LandformRegional => "landform_regional",
        }
    }
}

/// Simple polygon in plate-carrée lon/lat degrees; implicitly closed.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    vertices: Vec<(f64, f64)>,
    bbox: (f64, f64, f64, f64),
}

impl Polygon {
    pub fn new(vertices: Vec<(f64, f64)>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::param("polygon needs at least 3 vertices"));
        }
        if let Some((i, j)) = self_intersection(&vertices) {
            return Err(Error::param(format!("polygon edges {i} and {j} intersect")));
        }
        let bbox = vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.min(y), c.max(x), d.max(y)),
        );
        Ok(Self { vertices, bbox })
    }

    pub fn vertices(&self) -> &[(f64, f64)] {
        &self.vertices
    }

    /// Even-odd rule with a horizontal ray towards +lon.
    pub fn contains(&self, lon: f64, lat: f64) -> bool {
        let (x0, y0, x1, y1) = self.bbox;
        if lon < x0 || lon > x1 || lat < y0 || lat > y1 {
            return false;
        }
        let n = self.vertices.len();
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (xi, yi) = self.vertices[i];
            let (xj, yj) = self.vertices[j];
            if (yi > lat) != (yj > lat) {
                let x_cross = xi + (lat - yi) * (xj - xi) / (yj - yi);
                if lon < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn segments_cross(p1: (f64, f64), p2: (f64, f64), q1: (f64, f64), q2: (f64, f64)) -> bool {
    let d1 = orient(q1, q2, p1);
    let d2 = orient(q1, q2, p2);
    let d3 = orient(p1, p2, q1);
    let d4 = orient(p1, p2, q2);
    if d1 * d2 < 0.0 && d3 * d4 < 0.0 {
        return true;
    }
    let on = |a: (f64, f64), b: (f64, f64), c: (f64, f64)| {
        orient(a, b, c) == 0.0
            && c.0 >= a.0.min(b.0)
            && c.0 <= a.0.max(b.0)
            && c.1 >= a.1.min(b.1)
            && c.1 <= a.1.max(b.1)
    };
    on(q1, q2, p1) || on(q1, q2, p2) || on(p1, p2, q1) || on(p1, p2, q2)
}

fn self_intersection(v: &[(f64, f64)]) -> Option<(usize, usize)> {
    let n = v.len();
    for i in 0..n {
        for j in i + 1..n {
            // skip adjacent edges, which share a vertex
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            if segments_cross(v[i], v[(i + 1) % n], v[j], v[(j + 1) % n]) {
                return Some((i, j));
            }
        }
    }
    None
}

#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub layer: Layer,
    pub label: String,
    /// Biome type for ecoregion records.
    pub biome_type: Option<String>,
    pub polygon: Polygon,
}

/// Labeled polygons per layer. Within a layer, the lowest-index region
/// containing a point wins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RegionAtlas {
    regions: Vec<Region>,
}

impl RegionAtlas {
    pub fn new(regions: Vec<Region>) -> Self {
        Self { regions }
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Missing {
                what: "atlas file",
                path: path.to_path_buf(),
            });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.parse()
    }

    pub fn region_at(&self, layer: Layer, lon: f64, lat: f64) -> Option<&Region> {
        self.regions
            .iter()
            .filter(|r| r.layer == layer)
            .find(|r| r.polygon.contains(lon, lat))
    }

    pub fn lookup(&self, lon: f64, lat: f64, month: Month) -> Result<CaptionDescriptors> {
        if !(-180.0..180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
            return Err(Error::param(format!(
                "coordinates ({lon}, {lat}) outside lon [-180, 180), lat [-90, 90]"
            )));
        }
        let label = |layer| self.region_at(layer, lon, lat).map(|r| r.label.clone());
        let biome = self.region_at(Layer::Ecoregion, lon, lat).map(|r| Biome {
            ecoregion: r.label.clone(),
            biome_type: r.biome_type.clone().unwrap_or_else(|| r.label.clone()),
        });
        Ok(CaptionDescriptors {
            biome,
            geological_local: label(Layer::LandformLocal),
            geological_regional: label(Layer::LandformRegional),
            country: label(Layer::Country),
            month: Some(month),
        })
    }

    /// Serializes back into the text format accepted by `FromStr`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.regions {
            out.push_str(r.layer.keyword());
            out.push_str(" | ");
            out.push_str(&r.label);
            if let Some(b) = &r.biome_type {
                out.push_str(" | ");
                out.push_str(b);
            }
            out.push_str(" | ");
            let verts: Vec<String> = r.polygon.vertices().iter().map(|(x, y)| format!("{x} {y}")).collect();
            out.push_str(&verts.join(", "));
            out.push('\n');
        }
        out
    }
}

impl FromStr for RegionAtlas {
    type Err = Error;

    /// Grammar, one record per line (`#` starts a comment line):
    ///
    /// ```text
    /// record   := layer " | " label [" | " biome] " | " vertices
    /// layer    := country | ecoregion | landform_local | landform_regional
    /// vertices := lon " " lat ("," lon " " lat)*
    /// ```
    ///
    /// The biome field is required for `ecoregion` records and forbidden
    /// elsewhere.
    fn from_str(text: &str) -> Result<Self> {
        let mut regions = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line_no = ln + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |column: usize, message: String| Error::Parse {
                line: line_no,
                column,
                message,
            };
            let mut fields = Vec::new();
            let mut start = 0;
            for (i, ch) in line.char_indices() {
                if ch == '|' {
                    fields.push((start, &line[start..i]));
                    start = i + 1;
                }
            }
            fields.push((start, &line[start..]));
            let col = |(off, s): (usize, &str)| off + (s.len() - s.trim_start().len()) + 1;

            let layer_name = fields[0].1.trim();
            let layer = Layer::ALL
                .into_iter()
                .find(|l| l.keyword() == layer_name)
                .ok_or_else(|| err(col(fields[0]), format!("unknown layer {layer_name:?}")))?;
            let expected = if layer == Layer::Ecoregion { 4 } else { 3 };
            if fields.len() != expected {
                return Err(err(
                    line.len().min(col(*fields.last().unwrap())),
                    format!(
                        "{} record needs {expected} '|'-separated fields, found {}",
                        layer.keyword(),
                        fields.len()
                    ),
                ));
            }
            let label = fields[1].1.trim();
            if label.is_empty() {
                return Err(err(col(fields[1]), "empty label".into()));
            }
            let biome_type = if layer == Layer::Ecoregion {
                let b = fields[2].1.trim();
                if b.is_empty() {
                    return Err(err(col(fields[2]), "empty biome type".into()));
                }
                Some(b.to_string())
            } else {
                None
            };

            let (voff, vtext) = *fields.last().unwrap();
            let mut vertices = Vec::new();
            let mut pos = voff;
            for pair in vtext.split(',') {
                let pcol = col((pos, pair));
                pos += pair.len() + 1;
                let nums: Vec<&str> = pair.split_whitespace().collect();
                let [x, y] = nums[..] else {
                    return Err(err(pcol, format!("expected 'lon lat', found {:?}", pair.trim())));
                };
                let parse = |s: &str| {
                    s.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| err(pcol, format!("invalid number {s:?}")))
                };
                let (lon, lat) = (parse(x)?, parse(y)?);
                if !(-180.0..=180.0).contains(&lon) || !(-90.0..=90.0).contains(&lat) {
                    return Err(err(pcol, format!("vertex ({lon}, {lat}) out of range")));
                }
                vertices.push((lon, lat));
            }
            let polygon = Polygon::new(vertices).map_err(|e| err(col((voff, vtext)), e.to_string()))?;
            regions.push(Region {
                layer,
                label: label.to_string(),
                biome_type,
                polygon,
            });
        }
        Ok(Self { regions })
    }
}
