//! Scene metadata and the template provider that turns it into instructions.

use serde::{Deserialize, Serialize};

use super::{Facets, Instruction, InstructionSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightSource {
    Window,
    Lamp,
    Sky,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intensity {
    Bright,
    Moderate,
    Soft,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LightPosition {
    Left,
    Right,
    Top,
    Center,
}

/// Where cast shadows fall relative to the objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShadowDirection {
    Left,
    Right,
    Down,
    Under,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Bar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Orange,
    Purple,
    Gray,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Left,
    Right,
    Center,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backdrop {
    Sky,
    Wall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    pub color: Color,
    pub region: Region,
}

/// Ground-truth illumination and layout of a generated scene.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub light_source: LightSource,
    pub intensity: Intensity,
    pub light_position: LightPosition,
    pub shadow_direction: ShadowDirection,
    pub backdrop: Backdrop,
    pub objects: Vec<SceneObject>,
}

/// Which facets an instruction keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FacetMask {
    pub lighting: bool,
    pub shadows: bool,
    pub spatial: bool,
}

impl Default for FacetMask {
    fn default() -> Self {
        Self::FULL
    }
}

impl FacetMask {
    pub const FULL: Self = Self {
        lighting: true,
        shadows: true,
        spatial: true,
    };
    pub const EMPTY: Self = Self {
        lighting: false,
        shadows: false,
        spatial: false,
    };
    pub const LIGHTING: Self = Self {
        lighting: true,
        shadows: false,
        spatial: false,
    };
    pub const SHADOWS: Self = Self {
        lighting: false,
        shadows: true,
        spatial: false,
    };
    pub const SPATIAL: Self = Self {
        lighting: false,
        shadows: false,
        spatial: true,
    };
}

impl LightSource {
    pub const ALL: [Self; 4] = [Self::Window, Self::Lamp, Self::Sky, Self::None];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Window => "daylight through a window",
            Self::Lamp => "a warm indoor lamp",
            Self::Sky => "the open sky",
            Self::None => "faint ambient light",
        }
    }
}

impl Intensity {
    pub const ALL: [Self; 3] = [Self::Bright, Self::Moderate, Self::Soft];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Bright => "bright",
            Self::Moderate => "moderate",
            Self::Soft => "soft and dim",
        }
    }

    fn reflections(self) -> &'static str {
        match self {
            Self::Bright => "strong highlights",
            Self::Moderate => "mild highlights",
            Self::Soft => "faint reflections",
        }
    }
}

impl LightPosition {
    pub const ALL: [Self; 4] = [Self::Left, Self::Right, Self::Top, Self::Center];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Left => "from the left",
            Self::Right => "from the right",
            Self::Top => "from above",
            Self::Center => "from the center",
        }
    }

    /// Shadows fall away from the light.
    pub fn shadow(self) -> ShadowDirection {
        match self {
            Self::Left => ShadowDirection::Right,
            Self::Right => ShadowDirection::Left,
            Self::Top => ShadowDirection::Down,
            Self::Center => ShadowDirection::Under,
        }
    }
}

impl ShadowDirection {
    pub const ALL: [Self; 4] = [Self::Left, Self::Right, Self::Down, Self::Under];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Left => "shadows fall to the left of the objects",
            Self::Right => "shadows fall to the right of the objects",
            Self::Down => "shadows fall below the objects",
            Self::Under => "short shadows pool under the objects",
        }
    }
}

impl Shape {
    pub const ALL: [Self; 3] = [Self::Square, Self::Circle, Self::Bar];

    pub fn word(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Circle => "circle",
            Self::Bar => "bar",
        }
    }
}

impl Color {
    pub const ALL: [Self; 8] = [
        Self::Red,
        Self::Green,
        Self::Blue,
        Self::Yellow,
        Self::White,
        Self::Orange,
        Self::Purple,
        Self::Gray,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
            Self::White => "white",
            Self::Orange => "orange",
            Self::Purple => "purple",
            Self::Gray => "gray",
        }
    }

    /// Linear RGB albedo.
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Self::Red => [0.85, 0.15, 0.12],
            Self::Green => [0.2, 0.75, 0.25],
            Self::Blue => [0.15, 0.3, 0.9],
            Self::Yellow => [0.92, 0.85, 0.2],
            Self::White => [0.95, 0.95, 0.93],
            Self::Orange => [0.95, 0.55, 0.15],
            Self::Purple => [0.6, 0.25, 0.75],
            Self::Gray => [0.55, 0.55, 0.55],
        }
    }
}

impl Region {
    pub const ALL: [Self; 3] = [Self::Left, Self::Right, Self::Center];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Left => "on the left",
            Self::Right => "on the right",
            Self::Center => "in the middle",
        }
    }
}

impl Backdrop {
    pub const ALL: [Self; 2] = [Self::Sky, Self::Wall];

    pub fn phrase(self) -> &'static str {
        match self {
            Self::Sky => "against a gradient sky",
            Self::Wall => "against a plain wall",
        }
    }
}

pub fn lighting_text(scene: &SceneDescriptor) -> String {
    format!(
        "the scene is lit by {} {}, and the light is {}.",
        scene.light_source.phrase(),
        scene.light_position.phrase(),
        scene.intensity.phrase()
    )
}

pub fn shadows_text(scene: &SceneDescriptor) -> String {
    format!(
        "{} with {}.",
        scene.shadow_direction.phrase(),
        scene.intensity.reflections()
    )
}

pub fn spatial_text(scene: &SceneDescriptor) -> String {
    let items: Vec<String> = scene
        .objects
        .iter()
        .map(|o| format!("a {} {} {}", o.color.word(), o.shape.word(), o.region.phrase()))
        .collect();
    let body = match items.len() {
        0 => "an empty scene".to_string(),
        1 => items[0].clone(),
        n => format!("{} and {}", items[..n - 1].join(", "), items[n - 1]),
    };
    format!("{body} {}.", scene.backdrop.phrase())
}

/// Fill the templates for the facets kept by `mask`. With every facet
/// masked the result is the empty-instruction sentinel `""`.
pub fn synthesize_instruction(scene: &SceneDescriptor, mask: FacetMask) -> Instruction {
    let facets = Facets {
        lighting: mask.lighting.then(|| lighting_text(scene)),
        shadows: mask.shadows.then(|| shadows_text(scene)),
        spatial: mask.spatial.then(|| spatial_text(scene)),
    };
    Instruction::from_facets(facets, InstructionSource::Template)
}

/// Every word and punctuation mark the templates can emit.
pub fn lexicon_sentences() -> Vec<String> {
    let mut out = Vec::new();
    for s in LightSource::ALL {
        for p in LightPosition::ALL {
            for i in Intensity::ALL {
                let scene = SceneDescriptor {
                    light_source: s,
                    intensity: i,
                    light_position: p,
                    shadow_direction: p.shadow(),
                    backdrop: Backdrop::Sky,
                    objects: vec![],
                };
                out.push(lighting_text(&scene));
                out.push(shadows_text(&scene));
            }
        }
    }
    for d in ShadowDirection::ALL {
        out.push(d.phrase().to_string());
    }
    for b in Backdrop::ALL {
        for shape in Shape::ALL {
            for color in Color::ALL {
                for region in Region::ALL {
                    let obj = SceneObject { shape, color, region };
                    let scene = SceneDescriptor {
                        light_source: LightSource::None,
                        intensity: Intensity::Soft,
                        light_position: LightPosition::Center,
                        shadow_direction: ShadowDirection::Under,
                        backdrop: b,
                        objects: vec![obj, obj, obj],
                    };
                    out.push(spatial_text(&scene));
                }
            }
        }
        out.push(spatial_text(&SceneDescriptor {
            light_source: LightSource::None,
            intensity: Intensity::Soft,
            light_position: LightPosition::Center,
            shadow_direction: ShadowDirection::Under,
            backdrop: b,
            objects: vec![],
        }));
    }
    out
}

/// Recover descriptor fields from a lighting facet written by
/// [`lighting_text`]. Returns `None` for free text.
pub fn parse_lighting(text: &str) -> Option<(LightSource, LightPosition, Intensity)> {
    let source = LightSource::ALL.into_iter().find(|s| text.contains(s.phrase()))?;
    let position = LightPosition::ALL.into_iter().find(|p| text.contains(p.phrase()))?;
    let intensity = Intensity::ALL
        .into_iter()
        .find(|i| text.contains(&format!("light is {}", i.phrase())))?;
    Some((source, position, intensity))
}
