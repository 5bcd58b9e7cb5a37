use std::collections::BTreeMap;

use super::ast::{
    BlockExpr, CondDecl, DistPolicy, GatherPolicy, NodeSetDecl, Program, Selector, SourceMap, Span,
};
use super::ParseError;

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Int(u64),
    Punct(char),
    Eof,
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    span: Span,
}

fn describe(t: &Tok) -> String {
    match t {
        Tok::Word(w) => format!("`{w}`"),
        Tok::Int(n) => format!("`{n}`"),
        Tok::Punct(c) => format!("`{c}`"),
        Tok::Eof => "end of input".to_string(),
    }
}

fn lex(src: &str) -> Result<Vec<Token>, ParseError> {
    let bytes = src.as_bytes();
    let mut out = Vec::new();
    let (mut i, mut line, mut col) = (0usize, 1u32, 1u32);
    let mk = |start: usize, end: usize, line: u32, column: u32| Span { start, end, line, column };
    while i < bytes.len() {
        let c = bytes[i];
        if c == b'\n' {
            i += 1;
            line += 1;
            col = 1;
            continue;
        }
        if c.is_ascii_whitespace() {
            i += 1;
            col += 1;
            continue;
        }
        if c == b'#' || (c == b'/' && bytes.get(i + 1) == Some(&b'/')) {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        if c.is_ascii_alphanumeric() || c == b'_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &src[start..i];
            let span = mk(start, i, line, col);
            let tok = if word.bytes().all(|b| b.is_ascii_digit()) {
                let n = word.parse::<u64>().map_err(|_| ParseError::Syntax {
                    line,
                    column: col,
                    message: format!("integer `{word}` is too large"),
                })?;
                Tok::Int(n)
            } else if word.as_bytes()[0].is_ascii_digit() && word != "1toN" {
                return Err(ParseError::Syntax {
                    line,
                    column: col,
                    message: format!("invalid identifier `{word}`"),
                });
            } else {
                Tok::Word(word.to_string())
            };
            col += (i - start) as u32;
            out.push(Token { tok, span });
            continue;
        }
        if "()[]{}.,;=:".contains(c as char) {
            out.push(Token {
                tok: Tok::Punct(c as char),
                span: mk(i, i + 1, line, col),
            });
            i += 1;
            col += 1;
            continue;
        }
        let ch = src[i..].chars().next().expect("in bounds");
        return Err(ParseError::Syntax {
            line,
            column: col,
            message: format!("unexpected character `{ch}`"),
        });
    }
    out.push(Token {
        tok: Tok::Eof,
        span: mk(bytes.len(), bytes.len(), line, col),
    });
    Ok(out)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    nodesets: BTreeMap<String, NodeSetDecl>,
    conds: BTreeMap<String, CondDecl>,
    spans: BTreeMap<Vec<usize>, Span>,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.pos]
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn error_at(&self, span: Span, message: impl Into<String>) -> ParseError {
        ParseError::Syntax {
            line: span.line,
            column: span.column,
            message: message.into(),
        }
    }

    fn unexpected(&self, expected: &str) -> ParseError {
        let t = self.peek();
        self.error_at(t.span, format!("expected {expected}, found {}", describe(&t.tok)))
    }

    fn punct(&mut self, c: char) -> Result<Span, ParseError> {
        if self.peek().tok == Tok::Punct(c) {
            Ok(self.bump().span)
        } else {
            Err(self.unexpected(&format!("`{c}`")))
        }
    }

    fn is_punct(&self, c: char) -> bool {
        self.peek().tok == Tok::Punct(c)
    }

    fn ident(&mut self) -> Result<(String, Span), ParseError> {
        match &self.peek().tok {
            Tok::Word(w) if w != "1toN" => {
                let w = w.clone();
                Ok((w, self.bump().span))
            }
            _ => Err(self.unexpected("an identifier")),
        }
    }

    fn is_word(&self, w: &str) -> bool {
        matches!(&self.peek().tok, Tok::Word(x) if x == w)
    }

    /// Header declarations are recognised by a keyword followed by a name and `=`.
    fn at_declaration(&self) -> bool {
        let kw = matches!(&self.peek().tok, Tok::Word(w) if w == "nodeset" || w == "cond");
        kw && matches!(self.toks.get(self.pos + 1).map(|t| &t.tok), Some(Tok::Word(_)))
            && matches!(self.toks.get(self.pos + 2).map(|t| &t.tok), Some(Tok::Punct('=')))
    }

    fn declaration(&mut self) -> Result<(), ParseError> {
        let (kw, _) = self.ident()?;
        let (name, span) = self.ident()?;
        self.punct('=')?;
        let duplicate = || ParseError::Duplicate {
            name: name.clone(),
            line: span.line,
            column: span.column,
        };
        if kw == "nodeset" {
            let decl = if self.is_punct('{') {
                self.bump();
                let mut members = Vec::new();
                loop {
                    let (m, mspan) = self.ident()?;
                    if members.contains(&m) {
                        return Err(self.error_at(mspan, format!("member `{m}` listed twice")));
                    }
                    members.push(m);
                    if self.is_punct(',') {
                        self.bump();
                    } else {
                        break;
                    }
                }
                self.punct('}')?;
                NodeSetDecl::Members(members)
            } else {
                let (n, nspan) = self.int()?;
                if n == 0 || n > u32::MAX as u64 {
                    return Err(ParseError::InvalidDecl {
                        line: nspan.line,
                        column: nspan.column,
                        message: format!("node set `{name}` must have between 1 and {} members", u32::MAX),
                    });
                }
                NodeSetDecl::Count(n as u32)
            };
            if self.nodesets.insert(name.clone(), decl).is_some() {
                return Err(duplicate());
            }
        } else {
            let decl = if self.is_word("inf") {
                self.bump();
                CondDecl::Infinite
            } else {
                let (n, nspan) = self.int()?;
                if n == 0 || n > u32::MAX as u64 {
                    return Err(ParseError::InvalidDecl {
                        line: nspan.line,
                        column: nspan.column,
                        message: format!("round count of `{name}` must be at least 1"),
                    });
                }
                CondDecl::Rounds(n as u32)
            };
            if self.conds.insert(name.clone(), decl).is_some() {
                return Err(duplicate());
            }
        }
        self.punct(';')?;
        Ok(())
    }

    fn int(&mut self) -> Result<(u64, Span), ParseError> {
        match self.peek().tok {
            Tok::Int(n) => Ok((n, self.bump().span)),
            _ => Err(self.unexpected("an integer")),
        }
    }

    fn pipe(&mut self, path: &mut Vec<usize>) -> Result<BlockExpr, ParseError> {
        let start = self.peek().span;
        let mut stages = Vec::new();
        loop {
            path.push(stages.len());
            let term = self.term(path);
            path.pop();
            stages.push(term?);
            if self.is_punct('.') {
                self.bump();
            } else {
                break;
            }
        }
        if stages.len() == 1 {
            // The lone term was recorded one level too deep.
            let mut deeper: Vec<(Vec<usize>, Span)> = Vec::new();
            let prefix_len = path.len();
            let keys: Vec<Vec<usize>> = self
                .spans
                .range(path.clone()..)
                .map(|(k, _)| k.clone())
                .take_while(|k| k.starts_with(path))
                .collect();
            for k in keys {
                let span = self.spans.remove(&k).expect("key listed");
                if k.len() > prefix_len && k[prefix_len] == 0 {
                    let mut k2 = k[..prefix_len].to_vec();
                    k2.extend_from_slice(&k[prefix_len + 1..]);
                    deeper.push((k2, span));
                }
            }
            self.spans.extend(deeper);
            return Ok(stages.pop().expect("one stage"));
        }
        let end = self.toks[self.pos.saturating_sub(1)].span;
        self.spans.insert(
            path.clone(),
            Span {
                start: start.start,
                end: end.end,
                line: start.line,
                column: start.column,
            },
        );
        Ok(BlockExpr::Pipe(stages))
    }

    fn term(&mut self, path: &mut Vec<usize>) -> Result<BlockExpr, ParseError> {
        let head = self.peek().clone();
        let word = match &head.tok {
            Tok::Word(w) => w.clone(),
            _ => return Err(self.unexpected("a building block")),
        };
        self.bump();
        let expr = match word.as_str() {
            "seq" | "par" | "reduce" | "spread" => {
                self.punct('(')?;
                let (name, _) = self.ident()?;
                self.punct(')')?;
                match word.as_str() {
                    "seq" => BlockExpr::Seq(name),
                    "par" => BlockExpr::Par(name),
                    "reduce" => BlockExpr::Reduce(name),
                    _ => BlockExpr::Spread(name),
                }
            }
            "dist" => {
                self.punct('[')?;
                let (set, sspan) = self.ident()?;
                if !self.nodesets.contains_key(&set) {
                    return Err(ParseError::Undeclared {
                        kind: "node set",
                        name: set,
                        line: sspan.line,
                        column: sspan.column,
                    });
                }
                self.punct(']')?;
                self.punct('{')?;
                path.push(0);
                let body = self.pipe(path);
                path.pop();
                let body = body?;
                self.punct('}')?;
                BlockExpr::distribute(body, set)
            }
            "feedback" => {
                self.punct('(')?;
                path.push(0);
                let body = self.pipe(path);
                path.pop();
                let body = body?;
                self.punct(',')?;
                let (cond, cspan) = self.ident()?;
                if !self.conds.contains_key(&cond) {
                    return Err(ParseError::Undeclared {
                        kind: "condition",
                        name: cond,
                        line: cspan.line,
                        column: cspan.column,
                    });
                }
                self.punct(')')?;
                BlockExpr::feedback(body, cond)
            }
            "1toN" => {
                self.punct('(')?;
                let (kind, kspan) = self.ident()?;
                let policy = match kind.as_str() {
                    "bcast" => DistPolicy::Broadcast,
                    "scatter" => DistPolicy::Scatter,
                    "ucast" => {
                        self.punct(':')?;
                        let sel = match self.peek().tok.clone() {
                            Tok::Int(n) if n <= u32::MAX as u64 => {
                                self.bump();
                                Selector::Fixed(n as u32)
                            }
                            Tok::Word(w) if w == "rr" => {
                                self.bump();
                                Selector::RoundRobin
                            }
                            Tok::Word(w) if w == "auto" => {
                                self.bump();
                                Selector::Auto
                            }
                            _ => return Err(self.unexpected("`rr`, `auto` or a member index")),
                        };
                        DistPolicy::Unicast(sel)
                    }
                    other => {
                        return Err(self.error_at(
                            kspan,
                            format!("unknown distribution policy `{other}`"),
                        ))
                    }
                };
                self.punct(')')?;
                BlockExpr::OneToN(policy)
            }
            "NtoOne" => {
                self.punct('(')?;
                let (kind, kspan) = self.ident()?;
                let policy = match kind.as_str() {
                    "gather" => GatherPolicy::Gather,
                    "gatherall" => GatherPolicy::Gatherall,
                    "reduce" => {
                        self.punct(':')?;
                        let (f, _) = self.ident()?;
                        GatherPolicy::Reduce(f)
                    }
                    other => {
                        return Err(self.error_at(kspan, format!("unknown gather policy `{other}`")))
                    }
                };
                self.punct(')')?;
                BlockExpr::NToOne(policy)
            }
            other => {
                return Err(self.error_at(head.span, format!("unknown building block `{other}`")))
            }
        };
        let end = self.toks[self.pos.saturating_sub(1)].span;
        self.spans.insert(
            path.clone(),
            Span {
                start: head.span.start,
                end: end.end,
                line: head.span.line,
                column: head.span.column,
            },
        );
        Ok(expr)
    }
}

/// Parses DSL source text into a [`Program`].
pub fn parse(src: &str) -> Result<Program, ParseError> {
    let mut p = Parser {
        toks: lex(src)?,
        pos: 0,
        nodesets: BTreeMap::new(),
        conds: BTreeMap::new(),
        spans: BTreeMap::new(),
    };
    while p.at_declaration() {
        p.declaration()?;
    }
    if p.peek().tok == Tok::Eof {
        return Err(p.unexpected("a building block"));
    }
    let body = p.pipe(&mut Vec::new())?;
    if p.peek().tok != Tok::Eof {
        return Err(p.unexpected("`.` or end of input"));
    }
    Ok(Program {
        nodesets: p.nodesets,
        conds: p.conds,
        body,
        source_map: SourceMap { exprs: p.spans },
    })
}
