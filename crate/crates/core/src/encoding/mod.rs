//! Textual encodings of topologies, the prompt template and tokenization.
//!
//! Two netlist grammars are supported. Array mode lists one clause per device
//! in pool order (`C0 IN n1 ; L0 n1 OUT ; ...`), followed by binding clauses
//! (`OUT IN`) for external terminals that share a net named after a lower
//! external. Incident mode writes one sentence per net
//! (`Net IN connects C0 port 1 and Sa0 port 1 .`).
//!
//! Nets are named `0`, `IN` or `OUT` after their lowest external terminal;
//! purely internal nets are named `n1`, `n2`, ... in order of first use when
//! scanning device terminals in pool order.

mod vocab;

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::circuit::{
    ComponentPool, DeviceKind, External, PortId, Topology, NUM_DEVICES, NUM_PORTS,
};

pub use vocab::{TokenId, TokenSequence, Vocabulary, BOS, EOS, MAX_SEQ_LEN, PAD, SEP};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodingError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
}

/// Netlist parse failure; `clause` is the zero-based clause (Array) or
/// sentence (incident) index.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("clause {clause}: unknown token `{token}`")]
    UnknownToken { clause: usize, token: String },
    #[error("device {device} is missing")]
    MissingDevice { device: String },
    #[error("clause {clause}: device {device} listed more than once")]
    DuplicateDevice { clause: usize, device: String },
    #[error("clause {clause}: bad net name `{token}`")]
    BadNetName { clause: usize, token: String },
    #[error("clause {clause}: truncated")]
    Truncated { clause: usize },
    #[error("clause {clause}: unexpected token `{token}`")]
    UnexpectedToken { clause: usize, token: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum EncodingMode {
    /// Natural-language incident sentences.
    #[default]
    NlIncident,
    /// Compact per-device clauses.
    Array,
}

impl EncodingMode {
    pub fn name(self) -> &'static str {
        match self {
            EncodingMode::NlIncident => "nl",
            EncodingMode::Array => "array",
        }
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EncodingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nl" => Ok(EncodingMode::NlIncident),
            "array" => Ok(EncodingMode::Array),
            other => Err(format!("unknown encoding `{other}` (expected nl or array)")),
        }
    }
}

const PROMPT_HEAD: &str = "Generate a circuit topology using the following components :";

/// Prompt stating the component pool.
pub fn encode_prompt(pool: &ComponentPool) -> String {
    format!("{PROMPT_HEAD} {} .", pool.instance_names().join(" , "))
}

/// Inverse of [`encode_prompt`].
pub fn parse_prompt(text: &str) -> Option<ComponentPool> {
    let rest = text
        .strip_prefix(PROMPT_HEAD)?
        .strip_prefix(' ')?
        .strip_suffix(" .")?;
    let names: Vec<&str> = rest.split(" , ").collect();
    if names.len() != NUM_DEVICES {
        return None;
    }
    let mut kinds = Vec::with_capacity(NUM_DEVICES);
    for name in &names {
        let (kind, _) = split_instance(name)?;
        kinds.push(kind);
    }
    let pool = ComponentPool::from_slice(&kinds).ok()?;
    (pool
        .instance_names()
        .iter()
        .zip(&names)
        .all(|(a, b)| a == b))
    .then_some(pool)
}

fn split_instance(name: &str) -> Option<(DeviceKind, usize)> {
    let digit = name.find(|c: char| c.is_ascii_digit())?;
    let kind: DeviceKind = name[..digit].parse().ok()?;
    let index: usize = name[digit..].parse().ok()?;
    (index < NUM_DEVICES && name[digit..] == index.to_string()).then_some((kind, index))
}

fn is_net_name(tok: &str) -> bool {
    matches!(tok, "IN" | "OUT" | "0")
        || tok
            .strip_prefix('n')
            .and_then(|d| d.parse::<usize>().ok())
            .is_some_and(|k| (1..=11).contains(&k) && tok[1..] == k.to_string())
}

fn external_by_name(tok: &str) -> Option<External> {
    External::ALL.into_iter().find(|e| e.name() == tok)
}

/// Names of every net (indexed by representative port).
fn net_names(t: &Topology) -> [String; NUM_PORTS] {
    let mut names: [String; NUM_PORTS] = Default::default();
    let mut next_internal = 1;
    for net in t.nets() {
        names[net.index()] = match net.index() {
            0..=2 => External::ALL[net.index()].name().to_string(),
            _ => {
                let name = format!("n{next_internal}");
                next_internal += 1;
                name
            }
        };
    }
    names
}

/// Canonical netlist text of `t`.
pub fn encode_topology(t: &Topology, mode: EncodingMode) -> String {
    let names = net_names(t);
    let name_of = |p: PortId| names[t.net_of(p).index()].as_str();
    let pool = t.pool();
    match mode {
        EncodingMode::Array => {
            let mut clauses: Vec<String> = (0..NUM_DEVICES)
                .map(|slot| {
                    format!(
                        "{} {} {}",
                        pool.instance_name(slot),
                        name_of(PortId::device(slot, 1)),
                        name_of(PortId::device(slot, 2))
                    )
                })
                .collect();
            for ext in [External::In, External::Out] {
                if t.net_of(ext.port()) != ext.port() {
                    clauses.push(format!("{} {}", ext.name(), name_of(ext.port())));
                }
            }
            clauses.join(" ; ")
        }
        EncodingMode::NlIncident => {
            let mut order: Vec<PortId> = t.nets();
            // IN, OUT, 0, then internal nets.
            order.sort_by_key(|p| match p.index() {
                0 => 2,
                1 => 0,
                2 => 1,
                i => i,
            });
            let mut sentences = Vec::new();
            for net in order {
                let mut items = Vec::new();
                for ext in [External::In, External::Out] {
                    if ext.port() != net && t.net_of(ext.port()) == net {
                        items.push(ext.name().to_string());
                    }
                }
                for port in t.members(net).into_iter().filter(|p| p.index() >= 3) {
                    let slot = (port.index() - 3) / 2;
                    let terminal = (port.index() - 3) % 2 + 1;
                    items.push(format!("{} port {terminal}", pool.instance_name(slot)));
                }
                if !items.is_empty() {
                    sentences.push(format!(
                        "Net {} connects {} .",
                        names[net.index()],
                        items.join(" and ")
                    ));
                }
            }
            sentences.join(" ")
        }
    }
}

/// Resolves a device token to its slot in `pool`.
fn device_slot(pool: &ComponentPool, tok: &str) -> Option<usize> {
    let (kind, index) = split_instance(tok)?;
    pool.slot_of(kind, index)
}

fn check_vocabulary(tokens: &[&str], clause_of: impl Fn(usize) -> usize) -> Result<(), ParseError> {
    let vocab = Vocabulary::get();
    for (i, tok) in tokens.iter().enumerate() {
        if vocab.id(tok).is_none() {
            return Err(ParseError::UnknownToken {
                clause: clause_of(i),
                token: tok.to_string(),
            });
        }
    }
    Ok(())
}

/// Parses netlist text produced under `mode` for `pool`.
pub fn parse_topology(
    text: &str,
    pool: &ComponentPool,
    mode: EncodingMode,
) -> Result<Topology, ParseError> {
    let tokens: Vec<&str> = if text.is_empty() {
        Vec::new()
    } else {
        text.split(' ').collect()
    };
    if tokens.is_empty() {
        return Err(ParseError::Truncated { clause: 0 });
    }
    let mut device_labels: [Option<&str>; NUM_PORTS] = [None; NUM_PORTS];
    let mut external_labels: [Option<&str>; 3] = [None; 3];
    match mode {
        EncodingMode::Array => {
            parse_array(&tokens, pool, &mut device_labels, &mut external_labels)?
        }
        EncodingMode::NlIncident => {
            parse_incident(&tokens, pool, &mut device_labels, &mut external_labels)?
        }
    }
    for slot in 0..NUM_DEVICES {
        for terminal in [1, 2] {
            if device_labels[PortId::device(slot, terminal).index()].is_none() {
                return Err(ParseError::MissingDevice {
                    device: pool.instance_name(slot),
                });
            }
        }
    }
    let mut labels: [&str; NUM_PORTS] = [""; NUM_PORTS];
    for ext in External::ALL {
        labels[ext.port().index()] = external_labels[ext.port().index()].unwrap_or(ext.name());
    }
    for p in 3..NUM_PORTS {
        labels[p] = device_labels[p].expect("checked above");
    }
    Ok(Topology::from_labels(*pool, &labels))
}

fn parse_array<'a>(
    tokens: &[&'a str],
    pool: &ComponentPool,
    device_labels: &mut [Option<&'a str>; NUM_PORTS],
    external_labels: &mut [Option<&'a str>; 3],
) -> Result<(), ParseError> {
    let clauses: Vec<&[&str]> = tokens.split(|t| *t == ";").collect();
    let mut clause_starts = Vec::with_capacity(clauses.len());
    let mut offset = 0;
    for c in &clauses {
        clause_starts.push(offset);
        offset += c.len() + 1;
    }
    check_vocabulary(tokens, |i| {
        clause_starts.iter().rposition(|&s| s <= i).unwrap_or(0)
    })?;
    for (ci, clause) in clauses.iter().enumerate() {
        let Some(&head) = clause.first() else {
            return Err(ParseError::Truncated { clause: ci });
        };
        let net_token = |tok: &'a str| -> Result<&'a str, ParseError> {
            if is_net_name(tok) {
                Ok(tok)
            } else {
                Err(ParseError::BadNetName {
                    clause: ci,
                    token: tok.to_string(),
                })
            }
        };
        if let Some(ext) = external_by_name(head) {
            if clause.len() < 2 {
                return Err(ParseError::Truncated { clause: ci });
            }
            if clause.len() > 2 {
                return Err(ParseError::UnexpectedToken {
                    clause: ci,
                    token: clause[2].to_string(),
                });
            }
            let slot = &mut external_labels[ext.port().index()];
            if slot.is_some() {
                return Err(ParseError::DuplicateDevice {
                    clause: ci,
                    device: head.to_string(),
                });
            }
            *slot = Some(net_token(clause[1])?);
            continue;
        }
        if split_instance(head).is_none() {
            return Err(ParseError::UnexpectedToken {
                clause: ci,
                token: head.to_string(),
            });
        }
        let Some(slot) = device_slot(pool, head) else {
            return Err(ParseError::UnknownToken {
                clause: ci,
                token: head.to_string(),
            });
        };
        if device_labels[PortId::device(slot, 1).index()].is_some() {
            return Err(ParseError::DuplicateDevice {
                clause: ci,
                device: head.to_string(),
            });
        }
        if clause.len() < 3 {
            return Err(ParseError::Truncated { clause: ci });
        }
        if clause.len() > 3 {
            return Err(ParseError::UnexpectedToken {
                clause: ci,
                token: clause[3].to_string(),
            });
        }
        device_labels[PortId::device(slot, 1).index()] = Some(net_token(clause[1])?);
        device_labels[PortId::device(slot, 2).index()] = Some(net_token(clause[2])?);
    }
    Ok(())
}

fn parse_incident<'a>(
    tokens: &[&'a str],
    pool: &ComponentPool,
    device_labels: &mut [Option<&'a str>; NUM_PORTS],
    external_labels: &mut [Option<&'a str>; 3],
) -> Result<(), ParseError> {
    // Sentence index of each token.
    let mut sentence_of = Vec::with_capacity(tokens.len());
    let mut s = 0;
    for tok in tokens {
        sentence_of.push(s);
        if *tok == "." {
            s += 1;
        }
    }
    check_vocabulary(tokens, |i| sentence_of[i])?;

    let mut seen_nets: HashMap<&str, usize> = HashMap::new();
    let mut pos = 0;
    let mut sentence = 0;
    let unexpected = |clause: usize, tok: &str| ParseError::UnexpectedToken {
        clause,
        token: tok.to_string(),
    };
    while pos < tokens.len() {
        let next = |pos: usize| {
            tokens
                .get(pos)
                .copied()
                .ok_or(ParseError::Truncated { clause: sentence })
        };
        let tok = next(pos)?;
        if tok != "Net" {
            return Err(unexpected(sentence, tok));
        }
        let name = next(pos + 1)?;
        if !is_net_name(name) || seen_nets.contains_key(name) {
            return Err(ParseError::BadNetName {
                clause: sentence,
                token: name.to_string(),
            });
        }
        seen_nets.insert(name, sentence);
        let tok = next(pos + 2)?;
        if tok != "connects" {
            return Err(unexpected(sentence, tok));
        }
        pos += 3;
        loop {
            let item = next(pos)?;
            if let Some(ext) = external_by_name(item) {
                let slot = &mut external_labels[ext.port().index()];
                if slot.is_some() {
                    return Err(ParseError::DuplicateDevice {
                        clause: sentence,
                        device: item.to_string(),
                    });
                }
                *slot = Some(name);
                pos += 1;
            } else if split_instance(item).is_some() {
                let Some(slot) = device_slot(pool, item) else {
                    return Err(ParseError::UnknownToken {
                        clause: sentence,
                        token: item.to_string(),
                    });
                };
                let word = next(pos + 1)?;
                if word != "port" {
                    return Err(unexpected(sentence, word));
                }
                let terminal = match next(pos + 2)? {
                    "1" => 1,
                    "2" => 2,
                    other => return Err(unexpected(sentence, other)),
                };
                let label = &mut device_labels[PortId::device(slot, terminal).index()];
                if label.is_some() {
                    return Err(ParseError::DuplicateDevice {
                        clause: sentence,
                        device: format!("{item} port {terminal}"),
                    });
                }
                *label = Some(name);
                pos += 3;
            } else {
                return Err(unexpected(sentence, item));
            }
            match next(pos)? {
                "and" => pos += 1,
                "." => {
                    pos += 1;
                    break;
                }
                other => return Err(unexpected(sentence, other)),
            }
        }
        sentence += 1;
    }
    Ok(())
}

/// Full generator training sequence: `BOS prompt SEP netlist EOS`.
pub fn lm_sequence(t: &Topology, mode: EncodingMode) -> Result<TokenSequence, EncodingError> {
    let vocab = Vocabulary::get();
    let mut ids = vec![vocab.bos()];
    ids.extend(vocab.ids(&encode_prompt(t.pool()))?);
    ids.push(vocab.sep());
    ids.extend(vocab.ids(&encode_topology(t, mode))?);
    ids.push(vocab.eos());
    Ok(TokenSequence(ids))
}

/// Generation context for a pool: `BOS prompt SEP`.
pub fn prompt_ids(pool: &ComponentPool) -> Vec<TokenId> {
    let vocab = Vocabulary::get();
    let mut ids = vec![vocab.bos()];
    ids.extend(
        vocab
            .ids(&encode_prompt(pool))
            .expect("prompt uses vocabulary tokens"),
    );
    ids.push(vocab.sep());
    ids
}
