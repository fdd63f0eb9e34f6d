//! Closed-vocabulary caption grammar.
//!
//! ```text
//! caption   := clause (" and " clause)* " on a " BACKGROUND " background"
//! clause    := "a " COLOR " " TEXTURE " " SHAPE " " motion
//! motion    := ("stays still" | "moves " DIRECTION) [" while spinning"]
//! DIRECTION := right | left | up | down | up-right | up-left | down-right | down-left
//! ```
//!
//! Image coordinates: `+x` is right, `+y` is down.

use serde::{Deserialize, Serialize};

use super::{
    color_id_from_name, color_name, Background, SceneScript, Shape, SubjectSpec, Texture, PALETTE,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MotionPhrase {
    /// Per-axis sign of the velocity.
    pub direction: [i32; 2],
    pub spinning: bool,
}

impl MotionPhrase {
    pub fn from_velocity(velocity: [i32; 2], rotation_rate: i32) -> Self {
        Self {
            direction: [velocity[0].signum(), velocity[1].signum()],
            spinning: rotation_rate != 0,
        }
    }

    pub fn render(&self) -> String {
        let base = match direction_word(self.direction) {
            None => "stays still".to_string(),
            Some(d) => format!("moves {d}"),
        };
        if self.spinning {
            format!("{base} while spinning")
        } else {
            base
        }
    }
}

fn direction_word(d: [i32; 2]) -> Option<&'static str> {
    Some(match d {
        [0, 0] => return None,
        [1, 0] => "right",
        [-1, 0] => "left",
        [0, -1] => "up",
        [0, 1] => "down",
        [1, -1] => "up-right",
        [-1, -1] => "up-left",
        [1, 1] => "down-right",
        [-1, 1] => "down-left",
        _ => return None,
    })
}

pub const DIRECTIONS: [&str; 8] = [
    "right",
    "left",
    "up",
    "down",
    "up-right",
    "up-left",
    "down-right",
    "down-left",
];

pub fn direction_from_word(w: &str) -> Option<[i32; 2]> {
    Some(match w {
        "right" => [1, 0],
        "left" => [-1, 0],
        "up" => [0, -1],
        "down" => [0, 1],
        "up-right" => [1, -1],
        "up-left" => [-1, -1],
        "down-right" => [1, 1],
        "down-left" => [-1, 1],
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedSubject {
    pub color: usize,
    pub texture: Texture,
    pub shape: Shape,
    pub motion: MotionPhrase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedCaption {
    pub subjects: Vec<ParsedSubject>,
    pub background: Background,
}

impl ParsedCaption {
    pub fn render(&self) -> String {
        let clauses: Vec<String> = self
            .subjects
            .iter()
            .map(|s| {
                format!(
                    "a {} {} {} {}",
                    color_name(s.color),
                    s.texture,
                    s.shape,
                    s.motion.render()
                )
            })
            .collect();
        format!(
            "{} on a {} background",
            clauses.join(" and "),
            self.background
        )
    }
}

/// The refined per-reference description, e.g. `"a red plain circle"`.
pub fn describe_subject(spec: &SubjectSpec) -> String {
    format!(
        "a {} {} {}",
        color_name(spec.color_id()),
        spec.texture,
        spec.shape
    )
}

pub fn caption_scene(script: &SceneScript) -> String {
    ParsedCaption {
        subjects: script
            .subjects
            .iter()
            .map(|s| ParsedSubject {
                color: s.spec.color_id(),
                texture: s.spec.texture,
                shape: s.spec.shape,
                motion: MotionPhrase::from_velocity(
                    s.trajectory.velocity,
                    s.trajectory.rotation_rate,
                ),
            })
            .collect(),
        background: script.background,
    }
    .render()
}

struct Cursor<'a> {
    words: Vec<&'a str>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<&'a str> {
        self.words.get(self.pos).copied()
    }

    fn next(&mut self, what: &str) -> Result<&'a str> {
        let w = self.peek().ok_or_else(|| Error::CaptionParse {
            position: self.pos,
            message: format!("expected {what}, found end of caption"),
        })?;
        self.pos += 1;
        Ok(w)
    }

    fn expect(&mut self, literal: &str) -> Result<()> {
        let at = self.pos;
        let w = self.next(&format!("`{literal}`"))?;
        if w != literal {
            return Err(Error::CaptionParse {
                position: at,
                message: format!("expected `{literal}`, found `{w}`"),
            });
        }
        Ok(())
    }

    fn word<T>(&mut self, what: &str, f: impl Fn(&str) -> Option<T>) -> Result<T> {
        let at = self.pos;
        let w = self.next(what)?;
        f(w).ok_or_else(|| Error::CaptionParse {
            position: at,
            message: format!("expected {what}, found `{w}`"),
        })
    }
}

pub fn parse_caption(text: &str) -> Result<ParsedCaption> {
    let mut cur = Cursor {
        words: text.split_whitespace().collect(),
        pos: 0,
    };
    let mut subjects = Vec::new();
    loop {
        cur.expect("a")?;
        let color = cur.word("a colour", color_id_from_name)?;
        let texture = cur.word("a texture", Texture::from_name)?;
        let shape = cur.word("a shape", Shape::from_name)?;
        let direction = match cur.next("`moves` or `stays`")? {
            "stays" => {
                cur.expect("still")?;
                [0, 0]
            }
            "moves" => cur.word("a direction", direction_from_word)?,
            other => {
                return Err(Error::CaptionParse {
                    position: cur.pos - 1,
                    message: format!("expected `moves` or `stays`, found `{other}`"),
                })
            }
        };
        let spinning = if cur.peek() == Some("while") {
            cur.pos += 1;
            cur.expect("spinning")?;
            true
        } else {
            false
        };
        subjects.push(ParsedSubject {
            color,
            texture,
            shape,
            motion: MotionPhrase {
                direction,
                spinning,
            },
        });
        match cur.next("`and` or `on`")? {
            "and" => continue,
            "on" => break,
            other => {
                return Err(Error::CaptionParse {
                    position: cur.pos - 1,
                    message: format!("expected `and` or `on`, found `{other}`"),
                })
            }
        }
    }
    cur.expect("a")?;
    let background = cur.word("a background", Background::from_name)?;
    cur.expect("background")?;
    if let Some(w) = cur.peek() {
        return Err(Error::CaptionParse {
            position: cur.pos,
            message: format!("trailing word `{w}`"),
        });
    }
    Ok(ParsedCaption {
        subjects,
        background,
    })
}

pub const NULL_TOKEN: u32 = 0;

/// Word-level tokenizer over the closed caption vocabulary. Token 0 is the
/// reserved null (dropped-text) token.
#[derive(Debug, Clone)]
pub struct Vocab {
    words: Vec<&'static str>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut words: Vec<&'static str> = vec![
            "<null>",
            "a",
            "the",
            "and",
            "on",
            "background",
            "stays",
            "still",
            "moves",
            "while",
            "spinning",
        ];
        words.extend(PALETTE.iter().map(|(n, _)| *n));
        words.extend(Texture::ALL.iter().map(|t| t.name()));
        words.extend(Shape::ALL.iter().map(|s| s.name()));
        words.extend(DIRECTIONS);
        words.extend(Background::ALL.iter().map(|b| b.name()));
        Self { words }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .enumerate()
            .map(|(i, w)| {
                self.words
                    .iter()
                    .skip(1)
                    .position(|v| *v == w)
                    .map(|p| p as u32 + 1)
                    .ok_or_else(|| Error::CaptionParse {
                        position: i,
                        message: format!("`{w}` is not in the vocabulary"),
                    })
            })
            .collect()
    }

    pub fn null_sequence() -> Vec<u32> {
        vec![NULL_TOKEN]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{ScriptSubject, SubjectSpec, Trajectory};

    fn one(velocity: [i32; 2], rate: i32) -> SceneScript {
        SceneScript {
            id: "c".into(),
            subjects: vec![ScriptSubject {
                spec: SubjectSpec::new(Shape::Circle, 0, Texture::Plain, 0.3),
                trajectory: Trajectory {
                    start: [5, 5],
                    velocity,
                    start_rotation: 0,
                    rotation_rate: rate,
                },
            }],
            background: Background::White,
            frames: 4,
            seed: 0,
        }
    }

    #[test]
    fn template_instantiation() {
        assert_eq!(
            caption_scene(&one([1, 0], 0)),
            "a red plain circle moves right on a white background"
        );
        assert_eq!(
            caption_scene(&one([0, 0], 0)),
            "a red plain circle stays still on a white background"
        );
        assert_eq!(
            caption_scene(&one([-1, -1], 1)),
            "a red plain circle moves up-left while spinning on a white background"
        );
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = parse_caption("a red plain blob stays still on a gray background").unwrap_err();
        assert!(
            matches!(err, Error::CaptionParse { position: 3, .. }),
            "{err}"
        );
        assert!(parse_caption("a red plain circle stays still on a gray background now").is_err());
    }

    #[test]
    fn vocab_covers_grammar() {
        let v = Vocab::default();
        let toks = v
            .encode("a red plain circle moves down-left while spinning and a blue dotted bar stays still on a sand background")
            .unwrap();
        assert!(toks
            .iter()
            .all(|&t| t != NULL_TOKEN && (t as usize) < v.len()));
        assert!(v.encode("a mauve circle").is_err());
    }
}
