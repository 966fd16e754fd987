//! Closed home-automation command grammar: intent parsing and phrase
//! generation from one rule file.
//!
//! The grammar is a deterministic stand-in for a production assistant's
//! semantic parser. Parsing is longest-match over a closed token inventory:
//! an action phrase must open the utterance, every remaining token must be a
//! known slot value or an ignorable function word, and anything else makes
//! the whole utterance unparseable. Generation samples the same rules, so
//! generated transcripts always parse back to their own intent.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::evaluation::words;
use crate::numerics::Rng;

/// A parsed command: exact slot-map equality defines intent match.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Intent {
    pub action: String,
    pub device: String,
    pub location: Option<String>,
    pub media: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SlotKind {
    Device,
    Location,
    Media,
}

impl SlotKind {
    fn keyword(self) -> &'static str {
        match self {
            SlotKind::Device => "device",
            SlotKind::Location => "location",
            SlotKind::Media => "media",
        }
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    surface: Vec<String>,
}

#[derive(Debug, Clone)]
enum Part {
    /// Action reference with an optional whitelist of action names.
    Action(Vec<String>),
    /// Slot reference with an optional whitelist of value names.
    Slot(SlotKind, Vec<String>),
    /// A literal token; must be an ignore word so parses stay closed.
    Literal(String),
}

#[derive(Debug, Clone)]
pub struct Grammar {
    actions: Vec<Entry>,
    devices: Vec<Entry>,
    locations: Vec<Entry>,
    media: Vec<Entry>,
    ignore: BTreeSet<String>,
    templates: Vec<Vec<Part>>,
}

/// The default grammar shipped with the corpus generator.
pub const DEFAULT_GRAMMAR: &str = "\
# Home-automation command grammar.
# <kind> <name> = <surface words>   defines an action or slot value
# ignore = <words>                  function words parsing may skip
# template = ...                    generation patterns; {slot} or {slot:a|b}
action turn_on = turn on
action turn_off = turn off
action play = play
action stop = stop
action dim = dim
device lights = lights
device fan = fan
device heater = heater
device tv = tv
device radio = radio
device speaker = speaker
device spotify = spotify
device kettle = kettle
device alarm = alarm
device blinds = blinds
device screen = screen
device lamp = lamp
location kitchen = kitchen
location bedroom = bedroom
location garage = garage
location office = office
location hall = hall
location porch = porch
location attic = attic
location studio = studio
location den = den
location loft = loft
location cellar = cellar
location patio = patio
media abba = abba
media jazz = jazz
media rock = rock
media news = news
media piano = piano
media blues = blues
media disco = disco
media opera = opera
media metal = metal
media folk = folk
media soul = soul
media funk = funk
ignore = the my in on to please some
template = {action:turn_on|turn_off} {location} {device:lights|fan|heater|tv|radio|lamp|screen|kettle}
template = {action:turn_on|turn_off} the {device}
template = {action:play} {media} on {device:spotify|speaker|radio}
template = {action:stop|dim} the {device:lights|fan|tv|radio|speaker|alarm|screen|lamp}
template = {action:turn_on|turn_off} my {location} {device:lamp|fan|tv|radio}
template = {action:dim} the {location} {device:lights|lamp|screen}
template = {action:stop} the {location} {device:radio|tv|speaker|alarm}
template = {action:play} some {media} on the {device:speaker|radio}
";

impl Grammar {
    /// The built-in home-automation grammar.
    pub fn default_ha() -> Grammar {
        Grammar::from_text(DEFAULT_GRAMMAR).expect("built-in grammar is valid")
    }

    /// Parses the rule file format shown in [`DEFAULT_GRAMMAR`].
    pub fn from_text(text: &str) -> Result<Grammar> {
        let mut g = Grammar {
            actions: Vec::new(),
            devices: Vec::new(),
            locations: Vec::new(),
            media: Vec::new(),
            ignore: BTreeSet::new(),
            templates: Vec::new(),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (head, rest) = line
                .split_once('=')
                .ok_or_else(|| Error::Data(format!("grammar line {}: missing '='", lineno + 1)))?;
            let head: Vec<&str> = head.split_whitespace().collect();
            let rest = rest.trim();
            match head.as_slice() {
                ["ignore"] => {
                    g.ignore.extend(rest.split_whitespace().map(str::to_string));
                }
                ["template"] => {
                    g.templates.push(parse_template(rest, lineno + 1)?);
                }
                [kind, name] => {
                    let surface: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
                    if surface.is_empty() {
                        return Err(Error::Data(format!(
                            "grammar line {}: empty surface form",
                            lineno + 1
                        )));
                    }
                    let entry = Entry {
                        name: name.to_string(),
                        surface,
                    };
                    match *kind {
                        "action" => g.actions.push(entry),
                        "device" => g.devices.push(entry),
                        "location" => g.locations.push(entry),
                        "media" => g.media.push(entry),
                        other => {
                            return Err(Error::Data(format!(
                                "grammar line {}: unknown kind {:?}",
                                lineno + 1,
                                other
                            )))
                        }
                    }
                }
                _ => {
                    return Err(Error::Data(format!(
                        "grammar line {}: malformed head",
                        lineno + 1
                    )))
                }
            }
        }
        g.validate()?;
        Ok(g)
    }

    fn validate(&self) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::Data("grammar defines no actions".into()));
        }
        // Slot surfaces must be unambiguous across categories and disjoint
        // from the skip list, or parsing would depend on rule order.
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for entry in self.devices.iter().chain(&self.locations).chain(&self.media) {
            for w in &entry.surface {
                if !seen.insert(w) {
                    return Err(Error::Data(format!("ambiguous slot word {:?}", w)));
                }
                if self.ignore.contains(w) {
                    return Err(Error::Data(format!("slot word {:?} is also ignored", w)));
                }
            }
        }
        for tpl in &self.templates {
            for part in tpl {
                match part {
                    Part::Action(allowed) => {
                        for name in allowed {
                            if !self.actions.iter().any(|e| &e.name == name) {
                                return Err(Error::Data(format!("unknown action {:?}", name)));
                            }
                        }
                    }
                    Part::Slot(kind, allowed) => {
                        let defined = self.slot_entries(*kind);
                        if defined.is_empty() {
                            return Err(Error::Data(format!("no {} values defined", kind.keyword())));
                        }
                        for name in allowed {
                            if !defined.iter().any(|e| &e.name == name) {
                                return Err(Error::Data(format!(
                                    "unknown {} {:?}",
                                    kind.keyword(),
                                    name
                                )));
                            }
                        }
                    }
                    Part::Literal(w) => {
                        if !self.ignore.contains(w) {
                            return Err(Error::Data(format!(
                                "template literal {:?} is not an ignore word",
                                w
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn slot_entries(&self, kind: SlotKind) -> &[Entry] {
        match kind {
            SlotKind::Device => &self.devices,
            SlotKind::Location => &self.locations,
            SlotKind::Media => &self.media,
        }
    }

    /// Longest action surface matching the token stream at `pos`.
    fn match_action(&self, toks: &[String]) -> Option<(&Entry, usize)> {
        let mut best: Option<(&Entry, usize)> = None;
        for entry in &self.actions {
            let n = entry.surface.len();
            if toks.len() >= n
                && entry.surface.iter().zip(toks).all(|(a, b)| a == b)
                && best.is_none_or(|(_, bn)| n > bn)
            {
                best = Some((entry, n));
            }
        }
        best
    }

    fn match_slot(&self, toks: &[String]) -> Option<(SlotKind, &Entry, usize)> {
        let mut best: Option<(SlotKind, &Entry, usize)> = None;
        for kind in [SlotKind::Device, SlotKind::Location, SlotKind::Media] {
            for entry in self.slot_entries(kind) {
                let n = entry.surface.len();
                if toks.len() >= n
                    && entry.surface.iter().zip(toks).all(|(a, b)| a == b)
                    && best.is_none_or(|(_, _, bn)| n > bn)
                {
                    best = Some((kind, entry, n));
                }
            }
        }
        best
    }

    /// Deterministic intent extraction; `None` means no-parse.
    ///
    /// The utterance must open with an action phrase; every later token must
    /// be a slot value or an ignore word; each slot may bind once; a device
    /// is required.
    pub fn parse_intent(&self, text: &str) -> Option<Intent> {
        let toks = words(text);
        let (action, mut pos) = self.match_action(&toks)?;
        let mut device = None;
        let mut location = None;
        let mut media = None;
        while pos < toks.len() {
            if let Some((kind, entry, n)) = self.match_slot(&toks[pos..]) {
                let slot = match kind {
                    SlotKind::Device => &mut device,
                    SlotKind::Location => &mut location,
                    SlotKind::Media => &mut media,
                };
                if slot.is_some() {
                    return None;
                }
                *slot = Some(entry.name.clone());
                pos += n;
            } else if self.ignore.contains(&toks[pos]) {
                pos += 1;
            } else {
                return None;
            }
        }
        Some(Intent {
            action: action.name.clone(),
            device: device?,
            location,
            media,
        })
    }

    /// Samples one phrase from the templates. The transcript always parses
    /// back to the returned intent.
    pub fn sample(&self, rng: &mut Rng) -> (String, Intent) {
        let tpl = &self.templates[rng.next_usize(self.templates.len())];
        let mut tokens: Vec<String> = Vec::new();
        let mut action = String::new();
        let mut device = None;
        let mut location = None;
        let mut media = None;
        for part in tpl {
            match part {
                Part::Action(allowed) => {
                    let entry = self.pick(&self.actions, allowed, rng);
                    action = entry.name.clone();
                    tokens.extend(entry.surface.iter().cloned());
                }
                Part::Slot(kind, allowed) => {
                    let entry = self.pick(self.slot_entries(*kind), allowed, rng);
                    match kind {
                        SlotKind::Device => device = Some(entry.name.clone()),
                        SlotKind::Location => location = Some(entry.name.clone()),
                        SlotKind::Media => media = Some(entry.name.clone()),
                    }
                    tokens.extend(entry.surface.iter().cloned());
                }
                Part::Literal(w) => tokens.push(w.clone()),
            }
        }
        let intent = Intent {
            action,
            device: device.expect("templates always place a device"),
            location,
            media,
        };
        (tokens.join(" "), intent)
    }

    fn pick<'a>(&self, entries: &'a [Entry], allowed: &[String], rng: &mut Rng) -> &'a Entry {
        if allowed.is_empty() {
            &entries[rng.next_usize(entries.len())]
        } else {
            let name = &allowed[rng.next_usize(allowed.len())];
            entries
                .iter()
                .find(|e| &e.name == name)
                .expect("validated at load")
        }
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }
}

fn parse_template(text: &str, lineno: usize) -> Result<Vec<Part>> {
    let mut parts = Vec::new();
    for tok in text.split_whitespace() {
        if let Some(inner) = tok.strip_prefix('{').and_then(|t| t.strip_suffix('}')) {
            let (kind, allowed) = match inner.split_once(':') {
                Some((k, list)) => (k, list.split('|').map(str::to_string).collect()),
                None => (inner, Vec::new()),
            };
            let part = match kind {
                "action" => Part::Action(allowed),
                "device" => Part::Slot(SlotKind::Device, allowed),
                "location" => Part::Slot(SlotKind::Location, allowed),
                "media" => Part::Slot(SlotKind::Media, allowed),
                other => {
                    return Err(Error::Data(format!(
                        "grammar line {}: unknown template slot {:?}",
                        lineno, other
                    )))
                }
            };
            parts.push(part);
        } else {
            parts.push(Part::Literal(tok.to_string()));
        }
    }
    if parts.is_empty() {
        return Err(Error::Data(format!("grammar line {}: empty template", lineno)));
    }
    Ok(parts)
}
