use serde::{Deserialize, Serialize};

use super::{Color, EnvKind, ObjectKind};

/// Fixed phrase patterns with `{color}` and `{obj}` slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissionTemplate {
    GoToObject,
    GoToDoor,
    FetchA,
    GoFetchA,
    YouMustFetchA,
    GetA,
    GoGetA,
}

impl MissionTemplate {
    pub const ALL: [MissionTemplate; 7] = [
        MissionTemplate::GoToObject,
        MissionTemplate::GoToDoor,
        MissionTemplate::FetchA,
        MissionTemplate::GoFetchA,
        MissionTemplate::YouMustFetchA,
        MissionTemplate::GetA,
        MissionTemplate::GoGetA,
    ];

    pub fn pattern(self) -> &'static str {
        match self {
            MissionTemplate::GoToObject => "go to the {color} {obj}",
            MissionTemplate::GoToDoor => "go to the {color} door",
            MissionTemplate::FetchA => "fetch a {color} {obj}",
            MissionTemplate::GoFetchA => "go fetch a {color} {obj}",
            MissionTemplate::YouMustFetchA => "you must fetch a {color} {obj}",
            MissionTemplate::GetA => "get a {color} {obj}",
            MissionTemplate::GoGetA => "go get a {color} {obj}",
        }
    }

    pub fn env_kind(self) -> EnvKind {
        match self {
            MissionTemplate::GoToObject => EnvKind::GoToObject,
            MissionTemplate::GoToDoor => EnvKind::GoToDoor,
            _ => EnvKind::Fetch,
        }
    }

    pub fn render(self, color: Color, obj: ObjectKind) -> Vec<String> {
        self.pattern()
            .split_whitespace()
            .map(|w| match w {
                "{color}" => color.name().to_string(),
                "{obj}" => obj.name().to_string(),
                other => other.to_string(),
            })
            .collect()
    }
}

/// The template set an environment draws its missions from.
pub fn mission_grammar(kind: EnvKind) -> &'static [MissionTemplate] {
    match kind {
        EnvKind::GoToObject => &[MissionTemplate::GoToObject],
        EnvKind::GoToDoor => &[MissionTemplate::GoToDoor],
        EnvKind::Fetch => &[
            MissionTemplate::FetchA,
            MissionTemplate::GoFetchA,
            MissionTemplate::YouMustFetchA,
            MissionTemplate::GetA,
            MissionTemplate::GoGetA,
        ],
    }
}

/// Object kinds a template's `{obj}` slot can take.
pub fn template_objects(template: MissionTemplate) -> &'static [ObjectKind] {
    match template.env_kind() {
        EnvKind::GoToObject => &[ObjectKind::Key, ObjectKind::Ball, ObjectKind::Box],
        EnvKind::GoToDoor => &[ObjectKind::Door],
        EnvKind::Fetch => &[ObjectKind::Key, ObjectKind::Ball],
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mission {
    pub template: MissionTemplate,
    pub color: Color,
    pub object_kind: ObjectKind,
    pub text: Vec<String>,
}

impl Mission {
    pub fn new(template: MissionTemplate, color: Color, object_kind: ObjectKind) -> Self {
        Self {
            template,
            color,
            object_kind,
            text: template.render(color, object_kind),
        }
    }

    pub fn sentence(&self) -> String {
        self.text.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn grammar_sizes() {
        assert_eq!(mission_grammar(EnvKind::GoToObject).len(), 1);
        assert_eq!(mission_grammar(EnvKind::GoToDoor).len(), 1);
        assert_eq!(mission_grammar(EnvKind::Fetch).len(), 5);
    }

    #[test]
    fn full_grammar_is_short_and_injective() {
        let mut seen = HashSet::new();
        for &t in &MissionTemplate::ALL {
            for &c in &Color::PAINTS {
                for &o in template_objects(t) {
                    let text = t.render(c, o);
                    assert!(text.len() <= 9, "{text:?}");
                    assert!(seen.insert(text), "duplicate rendering");
                }
            }
        }
    }

    #[test]
    fn rendering_substitutes_slots() {
        let m = Mission::new(MissionTemplate::YouMustFetchA, Color::Yellow, ObjectKind::Ball);
        assert_eq!(m.sentence(), "you must fetch a yellow ball");
        let d = Mission::new(MissionTemplate::GoToDoor, Color::Green, ObjectKind::Door);
        assert_eq!(d.sentence(), "go to the green door");
    }
}
