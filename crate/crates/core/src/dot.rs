//! Graphviz export of relay graphs and a reader for the same subset.
//!
//! Processes are boxes, relays ellipses labelled `⟨|In|, id, direct?⟩`.
//! Explicit edges are solid and implicit edges dashed.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::build::WorldBuilder;
use crate::ids::{RelayId, Rid};
use crate::ifr::{TargetGraph, TargetRelay};
use crate::oracle::{extract_relay_graph, Node};
use crate::world::WorldState;

pub fn to_dot(w: &WorldState) -> String {
    let g = extract_relay_graph(w);
    let mut out = String::from("digraph relays {\n");
    for v in &g.vertices {
        match v {
            Node::Proc(p) => {
                let _ = writeln!(out, "  \"{p}\" [shape=box];");
            }
            Node::Relay(id) => {
                let r = w.relay(*id).expect("vertex from world");
                let _ = writeln!(
                    out,
                    "  \"{id}\" [shape=ellipse, label=\"⟨{}, {id}, {}⟩\"];",
                    r.in_set.len(),
                    r.level <= 1
                );
            }
        }
    }
    for (a, b) in &g.explicit_edges {
        let _ = writeln!(out, "  \"{a}\" -> \"{b}\";");
    }
    for (a, b) in &g.implicit_edges {
        let _ = writeln!(out, "  \"{a}\" -> \"{b}\" [style=dashed];");
    }
    out.push_str("}\n");
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DotError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("process name {0:?} is not of the form p<number>")]
    ProcessName(String),
    #[error("relay {0:?} has no owner")]
    NoOwner(String),
    #[error("relay {0:?} has more than one owner or out edge")]
    Ambiguous(String),
    #[error("relay graph is not acyclic at {0:?}")]
    Cycle(String),
}

/// Parsed node and edge statements, attributes kept as strings.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DotGraph {
    pub nodes: BTreeMap<String, BTreeMap<String, String>>,
    pub edges: Vec<(String, String, BTreeMap<String, String>)>,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::CharIndices<'a>>,
    src: &'a str,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Id(String),
    Arrow,
    Sym(char),
}

impl<'a> Lexer<'a> {
    fn line_of(&self, pos: usize) -> usize {
        self.src[..pos].matches('\n').count() + 1
    }

    fn tokens(mut self) -> Result<Vec<(usize, Tok)>, DotError> {
        let mut out = Vec::new();
        while let Some(&(i, c)) = self.chars.peek() {
            let line = self.line_of(i);
            match c {
                c if c.is_whitespace() => {
                    self.chars.next();
                }
                '#' => self.skip_line(),
                '/' => {
                    self.chars.next();
                    match self.chars.next() {
                        Some((_, '/')) => self.skip_line(),
                        Some((_, '*')) => {
                            let mut prev = ' ';
                            for (_, c) in self.chars.by_ref() {
                                if prev == '*' && c == '/' {
                                    break;
                                }
                                prev = c;
                            }
                        }
                        _ => return Err(syntax(line, "stray '/'")),
                    }
                }
                '"' => {
                    self.chars.next();
                    let mut s = String::new();
                    loop {
                        match self.chars.next() {
                            Some((_, '"')) => break,
                            Some((_, '\\')) => {
                                if let Some((_, c)) = self.chars.next() {
                                    s.push(c);
                                }
                            }
                            Some((_, c)) => s.push(c),
                            None => return Err(syntax(line, "unterminated string")),
                        }
                    }
                    out.push((line, Tok::Id(s)));
                }
                '-' => {
                    self.chars.next();
                    match self.chars.next() {
                        Some((_, '>')) => out.push((line, Tok::Arrow)),
                        _ => return Err(syntax(line, "expected '->'")),
                    }
                }
                '{' | '}' | '[' | ']' | '=' | ';' | ',' => {
                    self.chars.next();
                    out.push((line, Tok::Sym(c)));
                }
                c if c.is_alphanumeric() || c == '_' || c == '.' => {
                    let mut s = String::new();
                    while let Some(&(_, c)) = self.chars.peek() {
                        if c.is_alphanumeric() || c == '_' || c == '.' {
                            s.push(c);
                            self.chars.next();
                        } else {
                            break;
                        }
                    }
                    out.push((line, Tok::Id(s)));
                }
                other => return Err(syntax(line, &format!("unexpected character {other:?}"))),
            }
        }
        Ok(out)
    }

    fn skip_line(&mut self) {
        for (_, c) in self.chars.by_ref() {
            if c == '\n' {
                break;
            }
        }
    }
}

fn syntax(line: usize, msg: &str) -> DotError {
    DotError::Syntax {
        line,
        msg: msg.to_string(),
    }
}

/// Reads a single `digraph` with node statements, `a -> b` edges (chains
/// allowed) and bracketed attribute lists. Graph-level attributes and
/// `node`/`edge` defaults are accepted and ignored.
pub fn parse_dot(src: &str) -> Result<DotGraph, DotError> {
    let toks = Lexer {
        chars: src.char_indices().peekable(),
        src,
    }
    .tokens()?;
    let mut it = toks.into_iter().peekable();
    let last_line = src.lines().count().max(1);
    let expect_id = |it: &mut std::iter::Peekable<std::vec::IntoIter<(usize, Tok)>>| match it.next() {
        Some((_, Tok::Id(s))) => Ok(s),
        Some((l, t)) => Err(syntax(l, &format!("expected identifier, found {t:?}"))),
        None => Err(syntax(last_line, "unexpected end of input")),
    };
    let kw = expect_id(&mut it)?;
    let kw = if kw == "strict" { expect_id(&mut it)? } else { kw };
    if kw != "digraph" {
        return Err(syntax(1, "expected 'digraph'"));
    }
    if matches!(it.peek(), Some((_, Tok::Id(_)))) {
        it.next();
    }
    match it.next() {
        Some((_, Tok::Sym('{'))) => {}
        Some((l, _)) => return Err(syntax(l, "expected '{'")),
        None => return Err(syntax(last_line, "unexpected end of input")),
    }
    let mut g = DotGraph::default();
    loop {
        let (line, tok) = it.next().ok_or_else(|| syntax(last_line, "missing '}'"))?;
        let first = match tok {
            Tok::Sym('}') => break,
            Tok::Sym(';') => continue,
            Tok::Id(s) => s,
            t => return Err(syntax(line, &format!("unexpected {t:?}"))),
        };
        if matches!(it.peek(), Some((_, Tok::Sym('=')))) {
            it.next();
            expect_id(&mut it)?;
            continue;
        }
        let mut chain = vec![first];
        while matches!(it.peek(), Some((_, Tok::Arrow))) {
            it.next();
            chain.push(expect_id(&mut it)?);
        }
        let attrs = if matches!(it.peek(), Some((_, Tok::Sym('[')))) {
            it.next();
            parse_attrs(&mut it, last_line)?
        } else {
            BTreeMap::new()
        };
        if chain.len() == 1 {
            let name = chain.pop().expect("one element");
            if matches!(name.as_str(), "graph" | "node" | "edge") {
                continue;
            }
            g.nodes.entry(name).or_default().extend(attrs);
        } else {
            for n in &chain {
                g.nodes.entry(n.clone()).or_default();
            }
            for w in chain.windows(2) {
                g.edges.push((w[0].clone(), w[1].clone(), attrs.clone()));
            }
        }
    }
    Ok(g)
}

fn parse_attrs(
    it: &mut std::iter::Peekable<std::vec::IntoIter<(usize, Tok)>>,
    last_line: usize,
) -> Result<BTreeMap<String, String>, DotError> {
    let mut attrs = BTreeMap::new();
    loop {
        match it.next() {
            Some((_, Tok::Sym(']'))) => return Ok(attrs),
            Some((_, Tok::Sym(',' | ';'))) => {}
            Some((l, Tok::Id(k))) => {
                match it.next() {
                    Some((_, Tok::Sym('='))) => {}
                    _ => return Err(syntax(l, "expected '=' in attribute list")),
                }
                match it.next() {
                    Some((_, Tok::Id(v))) => {
                        attrs.insert(k, v);
                    }
                    _ => return Err(syntax(l, "expected attribute value")),
                }
            }
            Some((l, t)) => return Err(syntax(l, &format!("unexpected {t:?} in attribute list"))),
            None => return Err(syntax(last_line, "unterminated attribute list")),
        }
    }
}

fn parse_rid(name: &str) -> Option<Rid> {
    name.strip_prefix('p')?.parse().ok().map(Rid)
}

/// Owner encoded in a relay name of the form `r<rid>.<serial>`.
fn owner_from_name(name: &str) -> Option<Rid> {
    let (rid, _) = name.strip_prefix('r')?.split_once('.')?;
    rid.parse().ok().map(Rid)
}

impl DotGraph {
    /// Relay topology: boxes are processes, everything else a relay. A solid
    /// process-to-relay edge names the owner (falling back to `r<rid>.<n>`
    /// naming); a solid relay-to-relay edge is the out connection. Dashed
    /// edges and relay-to-process edges carry no extra information.
    pub fn to_target(&self) -> Result<TargetGraph, DotError> {
        let is_proc = |n: &str| self.nodes.get(n).and_then(|a| a.get("shape")).is_some_and(|s| s == "box");
        let mut t = TargetGraph::default();
        for name in self.nodes.keys().filter(|n| is_proc(n)) {
            t.processes
                .insert(parse_rid(name).ok_or_else(|| DotError::ProcessName(name.clone()))?);
        }
        let mut owner: BTreeMap<&str, Rid> = BTreeMap::new();
        let mut out: BTreeMap<&str, &str> = BTreeMap::new();
        for (a, b, attrs) in &self.edges {
            if attrs.get("style").is_some_and(|s| s == "dashed") {
                continue;
            }
            match (is_proc(a), is_proc(b)) {
                (true, false) => {
                    let p = parse_rid(a).ok_or_else(|| DotError::ProcessName(a.clone()))?;
                    if owner.insert(b, p).is_some_and(|q| q != p) {
                        return Err(DotError::Ambiguous(b.clone()));
                    }
                }
                (false, false) => {
                    if out.insert(a, b).is_some_and(|c| c != b) {
                        return Err(DotError::Ambiguous(a.clone()));
                    }
                }
                _ => {}
            }
        }
        for name in self.nodes.keys().filter(|n| !is_proc(n)) {
            let o = owner
                .get(name.as_str())
                .copied()
                .or_else(|| owner_from_name(name))
                .filter(|o| t.processes.contains(o))
                .ok_or_else(|| DotError::NoOwner(name.clone()))?;
            t.relays.insert(
                name.clone(),
                TargetRelay {
                    owner: o,
                    out: out.get(name.as_str()).map(|s| s.to_string()),
                },
            );
        }
        Ok(t)
    }
}

/// Builds a legal world realizing `t`: sinks first, then forwarders in
/// order of distance to their sink. Returns the name of every relay.
pub fn build_world(t: &TargetGraph) -> Result<(WorldState, BTreeMap<String, RelayId>), DotError> {
    let rids: Vec<u32> = t.processes.iter().map(|r| r.0).collect();
    let mut b = WorldBuilder::new(&rids);
    let mut ids: BTreeMap<String, RelayId> = BTreeMap::new();
    for (name, r) in t.relays.iter().filter(|(_, r)| r.out.is_none()) {
        ids.insert(name.clone(), b.sink(r.owner));
    }
    let mut pending: BTreeSet<&String> = t.relays.iter().filter(|(_, r)| r.out.is_some()).map(|(n, _)| n).collect();
    while !pending.is_empty() {
        let ready: Vec<&String> = pending
            .iter()
            .copied()
            .filter(|n| ids.contains_key(t.relays[*n].out.as_deref().expect("forwarder")))
            .collect();
        if ready.is_empty() {
            let stuck = pending.iter().next().expect("non-empty");
            return Err(DotError::Cycle((*stuck).clone()));
        }
        for n in ready {
            let r = &t.relays[n];
            let target = ids[r.out.as_deref().expect("forwarder")];
            ids.insert(n.clone(), b.chain(r.owner, target));
            pending.remove(n);
        }
    }
    Ok((b.build(), ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::is_legal;

    fn example() -> WorldState {
        let mut b = WorldBuilder::new(&[0, 1, 2]);
        let (r, _) = b.edge(Rid(1), Rid(2));
        b.chain(Rid(0), r);
        b.build()
    }

    #[test]
    fn export_uses_the_drawing_convention() {
        let s = to_dot(&example());
        assert!(s.contains("\"p0\" [shape=box];"));
        assert!(s.contains("\"r2.0\" [shape=ellipse, label=\"⟨1, r2.0, true⟩\"];"));
        assert!(s.contains("\"r0.0\" [shape=ellipse, label=\"⟨0, r0.0, false⟩\"];"));
        assert!(s.contains("\"r0.0\" -> \"r1.0\";"));
        assert!(!s.contains("dashed"));
    }

    #[test]
    fn parameters_in_flight_are_dashed() {
        let mut w = example();
        let l = w.layers.get_mut(&Rid(0)).unwrap();
        let r = crate::ids::RelayRef::from_id(RelayId::new(Rid(0), 0));
        let s = l.new_relay().unwrap();
        l.send(r, crate::message::Action::new("x", vec![crate::message::Param::Ref(s)]));
        let d = to_dot(&w);
        assert!(d.contains(&format!("\"r0.0\" -> \"{}\" [style=dashed];", s.peek_id())));
    }

    #[test]
    fn export_round_trips_topology() {
        let w = example();
        let t = parse_dot(&to_dot(&w)).unwrap().to_target().unwrap();
        assert_eq!(t, TargetGraph::from_world(&w));
        let (w2, _) = build_world(&t).unwrap();
        assert!(is_legal(&w2));
        assert_eq!(TargetGraph::from_world(&w2).canonical_trees(), t.canonical_trees());
    }

    #[test]
    fn hand_written_graph_with_custom_names() {
        let src = r#"
            // two processes, one connection
            digraph g {
              rankdir=LR;
              node [fontsize=10]
              p0 [shape=box]; p1 [shape=box]
              a; b
              p0 -> a -> b; p1 -> b
            }
        "#;
        let t = parse_dot(src).unwrap().to_target().unwrap();
        assert_eq!(t.relays["a"].owner, Rid(0));
        assert_eq!(t.relays["a"].out.as_deref(), Some("b"));
        assert_eq!(t.relays["b"].owner, Rid(1));
    }

    #[test]
    fn syntax_errors_carry_lines() {
        let e = parse_dot("digraph {\n  a -> \n}").unwrap_err();
        assert!(matches!(e, DotError::Syntax { line: 3, .. }), "{e:?}");
        assert!(matches!(parse_dot("graph {}"), Err(DotError::Syntax { .. })));
    }

    #[test]
    fn ownerless_relay_is_rejected() {
        let g = parse_dot("digraph { p0 [shape=box]; x }").unwrap();
        assert_eq!(g.to_target().unwrap_err(), DotError::NoOwner("x".into()));
    }

    #[test]
    fn cyclic_target_is_rejected() {
        let g = parse_dot("digraph { p0 [shape=box]; p1 [shape=box]; p0 -> a; p1 -> b; a -> b; b -> a }").unwrap();
        let t = g.to_target().unwrap();
        assert!(matches!(build_world(&t), Err(DotError::Cycle(_))));
    }
}
