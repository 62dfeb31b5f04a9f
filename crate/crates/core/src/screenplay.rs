//! Rule-based screenplay parsing and scene segmentation.
//!
//! Each physical line is classified into one [`ElementKind`]; the element
//! stream is then cut into [`Scene`]s at every `INT.` / `EXT.` heading.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speaker name reserved for action / description lines.
pub const BACKGROUND: &str = "BACKGROUND";

/// Default cap on script size accepted by [`parse_script`].
pub const DEFAULT_MAX_BYTES: usize = 16 << 20;

const MAX_CUE_CHARS: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Heading,
    Action,
    SpeakerCue,
    DialogueLine,
    Transition,
    Blank,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptElement {
    pub kind: ElementKind,
    pub text: String,
    /// 1-based source line.
    pub line_no: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: String,
    pub text: String,
    pub is_background: bool,
}

impl Utterance {
    pub fn background(text: impl Into<String>) -> Self {
        Utterance {
            speaker: BACKGROUND.to_string(),
            text: text.into(),
            is_background: true,
        }
    }

    pub fn spoken(speaker: impl Into<String>, text: impl Into<String>) -> Self {
        Utterance {
            speaker: speaker.into(),
            text: text.into(),
            is_background: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scene {
    pub heading: String,
    pub index: usize,
    pub utterances: Vec<Utterance>,
}

/// One parsed script, as written by the `parse` command (one per JSONL line).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedMovie {
    pub title: String,
    pub elements: Vec<ScriptElement>,
    pub scenes: Vec<Scene>,
}

impl ParsedMovie {
    pub fn from_text(title: impl Into<String>, text: &str) -> Result<Self> {
        let elements = parse_script(text)?;
        let scenes = split_scenes(&elements);
        Ok(ParsedMovie {
            title: title.into(),
            elements,
            scenes,
        })
    }
}

pub fn is_heading(line: &str) -> bool {
    let up = line.trim_start().to_uppercase();
    up.starts_with("INT.") || up.starts_with("EXT.")
}

fn is_transition(trimmed: &str) -> bool {
    let up = trimmed.to_uppercase();
    trimmed == up
        && (up.ends_with(':') || up.starts_with("FADE ") || up == "FADE OUT." || up == "THE END")
}

/// Uppercases, strips trailing parentheticals such as `(V.O.)`, `(O.S.)` or
/// `(CONT'D)`, and collapses internal whitespace.
pub fn canonical_speaker(cue: &str) -> String {
    let mut name = cue.trim().to_string();
    while name.ends_with(')') {
        match name.rfind('(') {
            Some(open) => name.truncate(open),
            None => break,
        }
        name = name.trim_end().to_string();
    }
    name.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_uppercase()
}

fn looks_like_cue(trimmed: &str) -> bool {
    if trimmed.chars().count() > MAX_CUE_CHARS {
        return false;
    }
    let (mut alpha, mut upper) = (0usize, 0usize);
    for c in trimmed.chars().filter(|c| c.is_alphabetic()) {
        alpha += 1;
        if c.is_uppercase() {
            upper += 1;
        }
    }
    if alpha == 0 || upper * 5 < alpha * 4 {
        return false;
    }
    if trimmed.ends_with(['.', '!', '?']) {
        return false;
    }
    let name = canonical_speaker(trimmed);
    !name.is_empty() && name != BACKGROUND && name.chars().any(char::is_alphabetic)
}

/// Classifies one physical line given the kind of the line before it.
/// Title-page credit lines such as "written by".
fn is_credit(trimmed: &str) -> bool {
    let lower = trimmed.to_lowercase();
    lower == "by"
        || ["written by", "screenplay by", "story by", "teleplay by"]
            .iter()
            .any(|p| lower.starts_with(p))
}

pub fn classify_line(line: &str, prev: ElementKind) -> ElementKind {
    let trimmed = line.trim();
    if trimmed.is_empty() {
        ElementKind::Blank
    } else if is_heading(line) {
        ElementKind::Heading
    } else if is_transition(trimmed) {
        ElementKind::Transition
    } else if looks_like_cue(trimmed) {
        ElementKind::SpeakerCue
    } else if is_credit(trimmed) {
        ElementKind::Action
    } else if matches!(prev, ElementKind::SpeakerCue | ElementKind::DialogueLine) {
        ElementKind::DialogueLine
    } else {
        ElementKind::Action
    }
}

/// [`parse_script_with_limit`] with the default 16 MiB cap.
pub fn parse_script(text: &str) -> Result<Vec<ScriptElement>> {
    parse_script_with_limit(text, DEFAULT_MAX_BYTES)
}

/// Splits `text` into one element per line. Line endings may be LF or CRLF;
/// trailing whitespace is dropped from each element.
pub fn parse_script_with_limit(text: &str, max_bytes: usize) -> Result<Vec<ScriptElement>> {
    if text.len() > max_bytes {
        return Err(Error::InputTooLarge {
            len: text.len(),
            limit: max_bytes,
        });
    }
    if text.is_empty() {
        return Ok(Vec::new());
    }
    let body = text.strip_suffix('\n').unwrap_or(text);
    let mut prev = ElementKind::Blank;
    let elements = body
        .split('\n')
        .enumerate()
        .map(|(i, raw)| {
            let line = raw.strip_suffix('\r').unwrap_or(raw).trim_end();
            let kind = classify_line(line, prev);
            prev = kind;
            ScriptElement {
                kind,
                text: line.to_string(),
                line_no: i + 1,
            }
        })
        .collect();
    Ok(elements)
}

/// Lossy variant for raw bytes: invalid UTF-8 sequences become U+FFFD.
pub fn parse_script_bytes(bytes: &[u8], max_bytes: usize) -> Result<Vec<ScriptElement>> {
    if bytes.len() > max_bytes {
        return Err(Error::InputTooLarge {
            len: bytes.len(),
            limit: max_bytes,
        });
    }
    parse_script_with_limit(&String::from_utf8_lossy(bytes), usize::MAX)
}

#[derive(Default)]
struct SceneBuilder {
    heading: Option<String>,
    utterances: Vec<Utterance>,
    has_dialogue: bool,
    cue: Option<(String, Vec<String>)>,
}

impl SceneBuilder {
    fn close_cue(&mut self) {
        if let Some((speaker, lines)) = self.cue.take() {
            if !lines.is_empty() {
                self.utterances.push(Utterance::spoken(speaker, lines.join(" ")));
                self.has_dialogue = true;
            }
        }
    }
}

/// Cuts an element stream into scenes.
///
/// Every heading opens a scene; scenes without utterances are dropped and the
/// survivors are re-indexed from 0. Material before the first heading is kept
/// only when it holds dialogue, or when the script has no heading at all.
pub fn split_scenes(elements: &[ScriptElement]) -> Vec<Scene> {
    let any_heading = elements.iter().any(|e| e.kind == ElementKind::Heading);
    let mut scenes: Vec<Scene> = Vec::new();
    let mut cur = SceneBuilder::default();

    let mut flush = |cur: &mut SceneBuilder| {
        cur.close_cue();
        let done = std::mem::take(cur);
        let keep = match &done.heading {
            Some(_) => !done.utterances.is_empty(),
            None => done.has_dialogue || (!any_heading && !done.utterances.is_empty()),
        };
        if keep {
            scenes.push(Scene {
                heading: done.heading.unwrap_or_default(),
                index: 0,
                utterances: done.utterances,
            });
        }
    };

    for el in elements {
        match el.kind {
            ElementKind::Heading => {
                flush(&mut cur);
                cur.heading = Some(el.text.trim().to_string());
            }
            ElementKind::SpeakerCue => {
                cur.close_cue();
                cur.cue = Some((canonical_speaker(&el.text), Vec::new()));
            }
            ElementKind::DialogueLine => match &mut cur.cue {
                Some((_, lines)) => lines.push(el.text.trim().to_string()),
                // Only reachable for hand-built element lists.
                None => cur.utterances.push(Utterance::background(el.text.trim())),
            },
            ElementKind::Action => {
                cur.close_cue();
                cur.utterances.push(Utterance::background(el.text.trim()));
            }
            ElementKind::Transition | ElementKind::Blank => cur.close_cue(),
        }
    }
    flush(&mut cur);

    for (i, s) in scenes.iter_mut().enumerate() {
        s.index = i;
    }
    scenes
}

/// Canonical text form of a scene list; parsing it back reproduces the same
/// scene and utterance counts.
pub fn render_scenes(scenes: &[Scene]) -> String {
    let mut out = String::new();
    for s in scenes {
        if !s.heading.is_empty() {
            out.push_str(&s.heading);
            out.push_str("\n\n");
        }
        for u in &s.utterances {
            if !u.is_background {
                out.push_str(&u.speaker);
                out.push('\n');
            }
            out.push_str(&u.text);
            out.push_str("\n\n");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use ElementKind::*;

    fn el(kind: ElementKind, text: &str, line_no: usize) -> ScriptElement {
        ScriptElement {
            kind,
            text: text.to_string(),
            line_no,
        }
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify_line("INT. CHIMERA - AQUARIUM TANK - DAY", Blank), Heading);
        assert_eq!(classify_line("  int. Chimera - Aquarium tank - Later - Day", Action), Heading);
        assert_eq!(classify_line("INT./EXT. CAR - MOVING - NIGHT", Blank), Heading);
        assert_eq!(classify_line("", Action), Blank);
        assert_eq!(classify_line("   \t", Action), Blank);
        assert_eq!(classify_line("THE MOLE", Blank), SpeakerCue);
        assert_eq!(classify_line("Now listen carefully.", SpeakerCue), DialogueLine);
        assert_eq!(classify_line("CUT TO:", Action), Transition);
        assert_eq!(classify_line("FADE IN:", Blank), Transition);
        assert_eq!(classify_line("EPPS (V.O.)", Blank), SpeakerCue);
        assert_eq!(classify_line("BANG!", Blank), Action);
        assert_eq!(classify_line("(Putting his hands to his mouth)", SpeakerCue), DialogueLine);
        assert_eq!(classify_line("Greer sits in the tank.", Blank), Action);
        assert_eq!(classify_line("Greer sits in the tank.", DialogueLine), DialogueLine);
    }

    #[test]
    fn cue_length_limit() {
        let long = "A".repeat(41);
        assert_eq!(classify_line(&long, Blank), Action);
        assert_eq!(classify_line(&"A".repeat(40), Blank), SpeakerCue);
    }

    #[test]
    fn canonical_names() {
        assert_eq!(canonical_speaker("  Epps  (V.O.) "), "EPPS");
        assert_eq!(canonical_speaker("THE   MOLE (CONT'D)"), "THE MOLE");
        assert_eq!(canonical_speaker("MURPHY (O.S.) (CONT'D)"), "MURPHY");
    }

    #[test]
    fn empty_input() {
        assert!(parse_script("").unwrap().is_empty());
        assert!(split_scenes(&[]).is_empty());
    }

    #[test]
    fn crlf_and_line_numbers() {
        let els = parse_script("INT. ROOM - DAY\r\n\r\nJOHN\r\nHi.\r\n").unwrap();
        assert_eq!(els.len(), 4);
        assert_eq!(els[0].kind, Heading);
        assert_eq!(els[3].line_no, 4);
        assert_eq!(els[3].text, "Hi.");
    }

    #[test]
    fn action_only_script() {
        let els = parse_script("He runs.\nShe follows.\nThey stop.").unwrap();
        assert!(els.iter().all(|e| e.kind == Action));
        let scenes = split_scenes(&els);
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].heading, "");
        assert_eq!(scenes[0].utterances.len(), 3);
        assert!(scenes[0].utterances.iter().all(|u| u.is_background));
    }

    #[test]
    fn input_cap() {
        assert!(matches!(
            parse_script_with_limit("abcdef", 3),
            Err(Error::InputTooLarge { len: 6, limit: 3 })
        ));
    }

    #[test]
    fn split_two_headings() {
        let els = vec![
            el(Heading, "INT. A - DAY", 1),
            el(Action, "Epps looks around.", 2),
            el(SpeakerCue, "EPPS", 3),
            el(DialogueLine, "Anyone here?", 4),
            el(Heading, "EXT. B - NIGHT", 5),
            el(SpeakerCue, "GREER", 6),
            el(DialogueLine, "Over here.", 7),
        ];
        let scenes = split_scenes(&els);
        assert_eq!(scenes.len(), 2);
        assert!(scenes[0].utterances[0].is_background);
        assert_eq!(scenes[0].utterances[1].speaker, "EPPS");
        assert_eq!(scenes[1].utterances.len(), 1);
        assert_eq!(scenes[1].utterances[0].speaker, "GREER");
        assert_eq!((scenes[0].index, scenes[1].index), (0, 1));
    }

    #[test]
    fn empty_scene_dropped_and_indices_gap_free() {
        let els = parse_script("INT. A - DAY\nINT. B - DAY\nJOHN\nHello there\nINT. C - DAY\nIt rains.\n").unwrap();
        let scenes = split_scenes(&els);
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[0].heading, "INT. B - DAY");
        assert_eq!(scenes.iter().map(|s| s.index).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn title_page_dropped_but_front_dialogue_kept() {
        let title = "GHOST SHIP\nwritten by someone\n\nINT. BOAT - DAY\nWater.\n";
        let scenes = split_scenes(&parse_script(title).unwrap());
        assert_eq!(scenes.len(), 1);
        let cold_open = "MURPHY\nWho's there?\n\nINT. BOAT - DAY\nWater.\n";
        let scenes = split_scenes(&parse_script(cold_open).unwrap());
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[0].heading, "");
    }

    #[test]
    fn multi_line_dialogue_with_parenthetical() {
        let text = "INT. CAMP - NIGHT\nTHE MOLE\n(Putting his hands to his mouth)\nGwpaapa. Gwpaapa.\n";
        let scenes = split_scenes(&parse_script(text).unwrap());
        assert_eq!(scenes[0].utterances.len(), 1);
        assert_eq!(
            scenes[0].utterances[0].text,
            "(Putting his hands to his mouth) Gwpaapa. Gwpaapa."
        );
    }

    #[test]
    fn invalid_utf8_is_replaced() {
        let els = parse_script_bytes(b"INT. ROOM\nJOHN\nH\xffi\n", DEFAULT_MAX_BYTES).unwrap();
        assert_eq!(els[2].text, "H\u{fffd}i");
    }

    fn arb_line() -> impl Strategy<Value = String> {
        prop_oneof![
            "(INT|EXT)\\. [A-Z ]{1,20} - (DAY|NIGHT)",
            "[A-Z]{2,10}( [A-Z]{2,8})?",
            "[A-Z][a-z ,']{0,40}[.?!]",
            "",
            "[ -~]{0,60}",
        ]
    }

    proptest! {
        #[test]
        fn classify_is_total(line in "\\PC{0,80}", prev in 0usize..6) {
            let kinds = [Heading, Action, SpeakerCue, DialogueLine, Transition, Blank];
            let _ = classify_line(&line, kinds[prev]);
        }

        #[test]
        fn every_line_is_one_element(lines in prop::collection::vec(arb_line(), 0..30)) {
            let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
            let els = parse_script(&text).unwrap();
            prop_assert_eq!(els.len(), lines.len());
            let rebuilt: Vec<String> = els.iter().map(|e| e.text.clone()).collect();
            let normalized: Vec<String> = lines.iter().map(|l| l.trim_end().to_string()).collect();
            prop_assert_eq!(rebuilt, normalized);
        }

        #[test]
        fn dialogue_lines_are_conserved(lines in prop::collection::vec(arb_line(), 0..40)) {
            let els = parse_script(&lines.join("\n")).unwrap();
            let scenes = split_scenes(&els);
            let dialogue: Vec<&ScriptElement> = els.iter().filter(|e| e.kind == DialogueLine).collect();
            // Joining k lines with single spaces adds k - 1 bytes per utterance,
            // so the byte totals balance only if every line was consumed once.
            let line_bytes: usize = dialogue.iter().map(|e| e.text.trim().len()).sum();
            let mut utter_bytes = 0;
            let mut spoken = 0;
            for s in &scenes {
                for u in s.utterances.iter().filter(|u| !u.is_background) {
                    prop_assert!(!u.text.trim().is_empty());
                    utter_bytes += u.text.len();
                    spoken += 1;
                }
                prop_assert!(s.heading.is_empty() || is_heading(&s.heading));
            }
            prop_assert_eq!(utter_bytes + spoken, line_bytes + dialogue.len());
            for (i, s) in scenes.iter().enumerate() {
                prop_assert_eq!(s.index, i);
            }
        }
    }
}
