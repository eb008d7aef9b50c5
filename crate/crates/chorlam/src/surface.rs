//! Concrete textual syntax for choreography programs.
//!
//! A `.chor` file is a sequence of items:
//!
//! ```text
//! type List_Int@(R) = Unit@R + (Int@R * List_Int@(R))
//! extern modPow@(R) : Int@R -> Int@R -> Int@R -> Int@R
//! def remoteFunction(C, S) : (Int@S -> Int@S) -> Int@C ->{S} Int@C =
//!   fun f : Int@S -> Int@S . fun v : Int@C . com[S,C] (f (com[C,S] v))
//! main = remoteFunction(Client, Server) ...
//! ```
//!
//! Comments run from `--` to the end of the line. Application is
//! left-associative and whitespace-denoted; arrows are right-associative;
//! `fun`, `case`, `select`, `if` and `let` extend as far right as possible.
//! `if M then M' else M''` is sugar for a `case` over `Bool@R`, and
//! `let x : T = M in N` for `(fun x:T. N) M`. The lower-case `inl`, `inr`
//! and `pair` constructors accept arbitrary choreographies (the checker
//! expands them to an applied function when the argument is not a value),
//! while `Pair` requires value arguments.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::ast::{
    self, BaseLit, BaseTy, FuncName, Role, SelLabel, Term, Type, TypeName, Var,
};

pub const KEYWORDS: &[&str] = &[
    "type", "extern", "def", "main", "fun", "case", "of", "inl", "inr", "fst", "snd", "Pair",
    "pair", "select", "com", "if", "then", "else", "let", "in", "Unit", "Int", "String",
];

/// A parsed `.chor` file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SourceFile {
    pub typedefs: Vec<TypeDef>,
    pub externs: Vec<ExternDecl>,
    pub defs: Vec<FuncDef>,
    pub main: Option<Term>,
    pub main_pos: Option<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypeDef {
    pub name: TypeName,
    pub params: Vec<Role>,
    pub body: Type,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternDecl {
    pub name: FuncName,
    pub role: Role,
    pub ty: Type,
}

impl ExternDecl {
    /// Curried arity: the number of leading arrows in the declared type.
    pub fn arity(&self) -> usize {
        let mut n = 0;
        let mut ty = &self.ty;
        while let Type::Arrow { cod, .. } = ty {
            n += 1;
            ty = cod;
        }
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FuncDef {
    pub name: FuncName,
    pub params: Vec<Role>,
    pub sig: Type,
    pub body: Term,
    /// Position of the `def` keyword, for diagnostics.
    pub line: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{line}:{col}: parse: {message} (found {found}, expected {})", expected.join(" | "))]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
    pub found: String,
    pub expected: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TokKind {
    Ident,
    UpperIdent,
    Int,
    Str,
    Keyword,
    Punct,
    Eof,
}

#[derive(Debug, Clone)]
struct Tok {
    kind: TokKind,
    text: String,
    line: usize,
    col: usize,
}

fn lex(input: &str) -> Result<Vec<Tok>, ParseError> {
    let mut toks = Vec::new();
    let mut line = 1usize;
    let mut col = 1usize;
    let mut chars = input.chars().peekable();
    while let Some(&c) = chars.peek() {
        let (tline, tcol) = (line, col);
        let mut bump = |chars: &mut std::iter::Peekable<std::str::Chars>| {
            let c = chars.next().unwrap();
            if c == '\n' {
                line += 1;
                col = 1;
            } else {
                col += 1;
            }
            c
        };
        if c.is_whitespace() {
            bump(&mut chars);
            continue;
        }
        if c == '-' {
            // comment `--`, or the arrow `->`
            let mut clone = chars.clone();
            clone.next();
            match clone.peek() {
                Some('-') => {
                    while let Some(&c) = chars.peek() {
                        bump(&mut chars);
                        if c == '\n' {
                            break;
                        }
                    }
                    continue;
                }
                Some('>') => {
                    bump(&mut chars);
                    bump(&mut chars);
                    toks.push(Tok {
                        kind: TokKind::Punct,
                        text: "->".into(),
                        line: tline,
                        col: tcol,
                    });
                    continue;
                }
                _ => {
                    return Err(ParseError {
                        line: tline,
                        col: tcol,
                        message: "stray '-'".into(),
                        found: "-".into(),
                        expected: vec!["'--' comment or '->'".into()],
                    })
                }
            }
        }
        if c.is_ascii_digit() {
            let mut text = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_digit() {
                    text.push(bump(&mut chars));
                } else {
                    break;
                }
            }
            toks.push(Tok {
                kind: TokKind::Int,
                text,
                line: tline,
                col: tcol,
            });
            continue;
        }
        if c == '"' {
            bump(&mut chars);
            let mut text = String::new();
            loop {
                match chars.peek() {
                    None => {
                        return Err(ParseError {
                            line: tline,
                            col: tcol,
                            message: "unterminated string literal".into(),
                            found: "end of input".into(),
                            expected: vec!["'\"'".into()],
                        })
                    }
                    Some('"') => {
                        bump(&mut chars);
                        break;
                    }
                    Some('\\') => {
                        bump(&mut chars);
                        match chars.peek() {
                            Some('n') => {
                                bump(&mut chars);
                                text.push('\n');
                            }
                            Some('\\') => {
                                bump(&mut chars);
                                text.push('\\');
                            }
                            Some('"') => {
                                bump(&mut chars);
                                text.push('"');
                            }
                            other => {
                                return Err(ParseError {
                                    line,
                                    col,
                                    message: "unknown escape".into(),
                                    found: other.map(|c| c.to_string()).unwrap_or_default(),
                                    expected: vec!["n".into(), "\\\\".into(), "\\\"".into()],
                                })
                            }
                        }
                    }
                    Some(_) => text.push(bump(&mut chars)),
                }
            }
            toks.push(Tok {
                kind: TokKind::Str,
                text,
                line: tline,
                col: tcol,
            });
            continue;
        }
        if c.is_ascii_alphabetic() {
            let mut text = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_ascii_alphanumeric() || c == '_' || c == '\'' {
                    text.push(bump(&mut chars));
                } else {
                    break;
                }
            }
            let kind = if KEYWORDS.contains(&text.as_str()) {
                TokKind::Keyword
            } else if text.chars().next().unwrap().is_ascii_uppercase() {
                TokKind::UpperIdent
            } else {
                TokKind::Ident
            };
            toks.push(Tok {
                kind,
                text,
                line: tline,
                col: tcol,
            });
            continue;
        }
        let two: Option<&str> = {
            let mut clone = chars.clone();
            clone.next();
            match (c, clone.peek()) {
                ('=', Some('>')) => Some("=>"),
                _ => None,
            }
        };
        if let Some(p) = two {
            bump(&mut chars);
            bump(&mut chars);
            toks.push(Tok {
                kind: TokKind::Punct,
                text: p.into(),
                line: tline,
                col: tcol,
            });
            continue;
        }
        if "()[]{},.:;=|+*@".contains(c) {
            bump(&mut chars);
            toks.push(Tok {
                kind: TokKind::Punct,
                text: c.to_string(),
                line: tline,
                col: tcol,
            });
            continue;
        }
        return Err(ParseError {
            line: tline,
            col: tcol,
            message: "unexpected character".into(),
            found: c.to_string(),
            expected: vec!["token".into()],
        });
    }
    toks.push(Tok {
        kind: TokKind::Eof,
        text: "end of input".into(),
        line,
        col,
    });
    Ok(toks)
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos]
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)]
    }

    fn next(&mut self) -> Tok {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, message: &str, expected: &[&str]) -> Result<T, ParseError> {
        let t = self.peek();
        Err(ParseError {
            line: t.line,
            col: t.col,
            message: message.into(),
            found: if t.kind == TokKind::Str {
                format!("{:?}", t.text)
            } else {
                t.text.clone()
            },
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn at_punct(&self, p: &str) -> bool {
        let t = self.peek();
        t.kind == TokKind::Punct && t.text == p
    }

    fn at_kw(&self, kw: &str) -> bool {
        let t = self.peek();
        t.kind == TokKind::Keyword && t.text == kw
    }

    fn eat_punct(&mut self, p: &str) -> Result<(), ParseError> {
        if self.at_punct(p) {
            self.next();
            Ok(())
        } else {
            self.err("unexpected token", &[&format!("'{p}'")])
        }
    }

    fn eat_kw(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.at_kw(kw) {
            self.next();
            Ok(())
        } else {
            self.err("unexpected token", &[&format!("'{kw}'")])
        }
    }

    fn role(&mut self) -> Result<Role, ParseError> {
        if self.peek().kind == TokKind::UpperIdent {
            Ok(Role::new(self.next().text))
        } else {
            self.err("expected a role name", &["role (capitalised identifier)"])
        }
    }

    fn lower_ident(&mut self, what: &str) -> Result<String, ParseError> {
        if self.peek().kind == TokKind::Ident {
            Ok(self.next().text)
        } else {
            self.err(&format!("expected {what}"), &["identifier"])
        }
    }

    fn role_list(&mut self) -> Result<Vec<Role>, ParseError> {
        self.eat_punct("(")?;
        let mut roles = vec![self.role()?];
        while self.at_punct(",") {
            self.next();
            roles.push(self.role()?);
        }
        self.eat_punct(")")?;
        Ok(roles)
    }

    fn located_role(&mut self) -> Result<Role, ParseError> {
        self.eat_punct("@")?;
        self.role()
    }

    // Types: arrow (right assoc, lowest) > sum > product > atom.
    fn ty(&mut self) -> Result<Type, ParseError> {
        let dom = self.ty_sum()?;
        if self.at_punct("->") {
            self.next();
            let mut extra = BTreeSet::new();
            if self.at_punct("{") {
                self.next();
                if !self.at_punct("}") {
                    extra.insert(self.role()?);
                    while self.at_punct(",") {
                        self.next();
                        extra.insert(self.role()?);
                    }
                }
                self.eat_punct("}")?;
            }
            let cod = self.ty()?;
            Ok(Type::Arrow {
                dom: Box::new(dom),
                extra,
                cod: Box::new(cod),
            })
        } else {
            Ok(dom)
        }
    }

    fn ty_sum(&mut self) -> Result<Type, ParseError> {
        let mut left = self.ty_prod()?;
        while self.at_punct("+") {
            self.next();
            let right = self.ty_prod()?;
            left = Type::Sum(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn ty_prod(&mut self) -> Result<Type, ParseError> {
        let mut left = self.ty_atom()?;
        while self.at_punct("*") {
            self.next();
            let right = self.ty_atom()?;
            left = Type::Prod(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn ty_atom(&mut self) -> Result<Type, ParseError> {
        let t = self.peek().clone();
        match (t.kind, t.text.as_str()) {
            (TokKind::Punct, "(") => {
                self.next();
                let ty = self.ty()?;
                self.eat_punct(")")?;
                Ok(ty)
            }
            (TokKind::Keyword, "Unit") => {
                self.next();
                Ok(Type::Unit(self.located_role()?))
            }
            (TokKind::Keyword, "Int") => {
                self.next();
                Ok(Type::Base {
                    base: BaseTy::Int,
                    at: self.located_role()?,
                })
            }
            (TokKind::Keyword, "String") => {
                self.next();
                Ok(Type::Base {
                    base: BaseTy::Str,
                    at: self.located_role()?,
                })
            }
            (TokKind::UpperIdent, _) => {
                let name = TypeName::new(self.next().text);
                self.eat_punct("@")?;
                let roles = self.role_list()?;
                Ok(Type::Var { name, roles })
            }
            _ => self.err(
                "expected a type",
                &["'('", "Unit", "Int", "String", "type name"],
            ),
        }
    }

    // Terms.
    fn term(&mut self) -> Result<Term, ParseError> {
        let t = self.peek().clone();
        match (t.kind, t.text.as_str()) {
            (TokKind::Keyword, "fun") => {
                self.next();
                let param = Var::new(self.lower_ident("a parameter name")?);
                self.eat_punct(":")?;
                let annot = self.ty()?;
                self.eat_punct(".")?;
                let body = self.term()?;
                Ok(Term::Abs {
                    param,
                    annot,
                    body: Box::new(body),
                })
            }
            (TokKind::Keyword, "case") => {
                self.next();
                let scrut = self.app_term()?;
                self.eat_kw("of")?;
                self.eat_kw("inl")?;
                let left_var = Var::new(self.lower_ident("a binder")?);
                self.eat_punct("=>")?;
                let left = self.term()?;
                self.eat_punct("|")?;
                self.eat_kw("inr")?;
                let right_var = Var::new(self.lower_ident("a binder")?);
                self.eat_punct("=>")?;
                let right = self.term()?;
                Ok(Term::Case {
                    scrut: Box::new(scrut),
                    left_var,
                    left: Box::new(left),
                    right_var,
                    right: Box::new(right),
                })
            }
            (TokKind::Keyword, "select") => {
                self.next();
                self.eat_punct("[")?;
                let from = self.role()?;
                self.eat_punct(",")?;
                let to = self.role()?;
                self.eat_punct("]")?;
                let label = SelLabel::new(self.lower_ident("a label")?);
                self.eat_punct(";")?;
                let cont = self.term()?;
                Ok(Term::Sel {
                    from,
                    to,
                    label,
                    cont: Box::new(cont),
                })
            }
            (TokKind::Keyword, "if") => {
                // if M then M' else M''  ==  case M of inl _ => M' | inr _ => M''
                self.next();
                let scrut = self.app_term()?;
                self.eat_kw("then")?;
                let left = self.term()?;
                self.eat_kw("else")?;
                let right = self.term()?;
                let fv: BTreeSet<Var> = ast::free_vars(&left)
                    .union(&ast::free_vars(&right))
                    .cloned()
                    .collect();
                let mut binder = Var::new("w");
                let mut n = 0;
                while fv.contains(&binder) {
                    n += 1;
                    binder = Var::new(format!("w{n}"));
                }
                Ok(Term::Case {
                    scrut: Box::new(scrut),
                    left_var: binder.clone(),
                    left: Box::new(left),
                    right_var: binder,
                    right: Box::new(right),
                })
            }
            (TokKind::Keyword, "let") => {
                // let x : T = M in N  ==  (fun x:T. N) M
                self.next();
                let param = Var::new(self.lower_ident("a binder")?);
                self.eat_punct(":")?;
                let annot = self.ty()?;
                self.eat_punct("=")?;
                let bound = self.term()?;
                self.eat_kw("in")?;
                let body = self.term()?;
                Ok(ast::app(
                    Term::Abs {
                        param,
                        annot,
                        body: Box::new(body),
                    },
                    bound,
                ))
            }
            _ => self.app_term(),
        }
    }

    fn app_term(&mut self) -> Result<Term, ParseError> {
        let mut head = self.prefix_term()?;
        while self.starts_atom() {
            let arg = self.prefix_term()?;
            head = ast::app(head, arg);
        }
        Ok(head)
    }

    fn starts_atom(&self) -> bool {
        let t = self.peek();
        match (t.kind, t.text.as_str()) {
            (TokKind::Ident | TokKind::Int | TokKind::Str, _) => true,
            (TokKind::Punct, "(") => true,
            (TokKind::Keyword, "inl" | "inr" | "pair" | "Pair" | "fst" | "snd" | "com") => true,
            _ => false,
        }
    }

    fn prefix_term(&mut self) -> Result<Term, ParseError> {
        let t = self.peek().clone();
        match (t.kind, t.text.as_str()) {
            (TokKind::Keyword, "inl") => {
                self.next();
                Ok(Term::Inl(Box::new(self.atom()?)))
            }
            (TokKind::Keyword, "inr") => {
                self.next();
                Ok(Term::Inr(Box::new(self.atom()?)))
            }
            (TokKind::Keyword, "pair") => {
                self.next();
                let a = self.atom()?;
                let b = self.atom()?;
                Ok(Term::Pair(Box::new(a), Box::new(b)))
            }
            (TokKind::Keyword, "Pair") => {
                let (line, col) = (t.line, t.col);
                self.next();
                let a = self.atom()?;
                let b = self.atom()?;
                if !ast::is_value(&a) || !ast::is_value(&b) {
                    return Err(ParseError {
                        line,
                        col,
                        message:
                            "Pair requires value arguments; use lower-case `pair` for arbitrary choreographies"
                                .into(),
                        found: "non-value argument".into(),
                        expected: vec!["value".into()],
                    });
                }
                Ok(Term::Pair(Box::new(a), Box::new(b)))
            }
            _ => self.atom(),
        }
    }

    /// Whether the upcoming tokens form `( R1, R2, ... )` with only role
    /// names inside. Distinguishes the call `f(C, S)` from the application
    /// `f (x)`.
    fn role_list_ahead(&self) -> bool {
        let mut i = self.pos;
        if self.toks[i].text != "(" {
            return false;
        }
        i += 1;
        loop {
            if self.toks[i].kind != TokKind::UpperIdent {
                return false;
            }
            i += 1;
            match self.toks[i].text.as_str() {
                ")" => return true,
                "," => i += 1,
                _ => return false,
            }
        }
    }

    fn atom(&mut self) -> Result<Term, ParseError> {
        let t = self.peek().clone();
        match (t.kind, t.text.as_str()) {
            (TokKind::Punct, "(") => {
                // either `()@R` or a parenthesised term
                if self.peek2().text == ")" {
                    self.next();
                    self.next();
                    Ok(Term::Unit(self.located_role()?))
                } else {
                    self.next();
                    let term = self.term()?;
                    self.eat_punct(")")?;
                    Ok(term)
                }
            }
            (TokKind::Int, _) => {
                let n: i64 = self.next().text.parse().map_err(|_| ParseError {
                    line: t.line,
                    col: t.col,
                    message: "integer literal out of range".into(),
                    found: t.text.clone(),
                    expected: vec!["64-bit integer".into()],
                })?;
                Ok(Term::Lit {
                    val: BaseLit::Int(n),
                    at: self.located_role()?,
                })
            }
            (TokKind::Str, _) => {
                let s = self.next().text;
                Ok(Term::Lit {
                    val: BaseLit::Str(s),
                    at: self.located_role()?,
                })
            }
            (TokKind::Keyword, "fst") => {
                self.next();
                Ok(Term::Fst)
            }
            (TokKind::Keyword, "snd") => {
                self.next();
                Ok(Term::Snd)
            }
            (TokKind::Keyword, "com") => {
                self.next();
                self.eat_punct("[")?;
                let from = self.role()?;
                self.eat_punct(",")?;
                let to = self.role()?;
                self.eat_punct("]")?;
                Ok(Term::Com { from, to })
            }
            (TokKind::Ident, _) => {
                let name = self.next().text;
                if self.at_punct("(") && self.role_list_ahead() {
                    let roles = self.role_list()?;
                    Ok(Term::Call {
                        name: FuncName::new(name),
                        roles,
                    })
                } else {
                    Ok(Term::Var(Var::new(name)))
                }
            }
            _ => self.err(
                "expected a term",
                &[
                    "'('", "variable", "literal", "fst", "snd", "com", "function call",
                ],
            ),
        }
    }

    fn file(&mut self) -> Result<SourceFile, ParseError> {
        let mut sf = SourceFile::default();
        loop {
            let t = self.peek().clone();
            match (t.kind, t.text.as_str()) {
                (TokKind::Eof, _) => break,
                (TokKind::Keyword, "type") => {
                    self.next();
                    let name = if self.peek().kind == TokKind::UpperIdent {
                        TypeName::new(self.next().text)
                    } else {
                        return self.err("expected a type name", &["capitalised identifier"]);
                    };
                    self.eat_punct("@")?;
                    let params = self.role_list()?;
                    self.eat_punct("=")?;
                    let body = self.ty()?;
                    sf.typedefs.push(TypeDef { name, params, body });
                }
                (TokKind::Keyword, "extern") => {
                    self.next();
                    let name = FuncName::new(self.lower_ident("an extern name")?);
                    self.eat_punct("@")?;
                    self.eat_punct("(")?;
                    let role = self.role()?;
                    self.eat_punct(")")?;
                    self.eat_punct(":")?;
                    let ty = self.ty()?;
                    sf.externs.push(ExternDecl { name, role, ty });
                }
                (TokKind::Keyword, "def") => {
                    let (line, col) = (t.line, t.col);
                    self.next();
                    let name = FuncName::new(self.lower_ident("a definition name")?);
                    let params = self.role_list()?;
                    self.eat_punct(":")?;
                    let sig = self.ty()?;
                    self.eat_punct("=")?;
                    let body = self.term()?;
                    sf.defs.push(FuncDef {
                        name,
                        params,
                        sig,
                        body,
                        line,
                        col,
                    });
                }
                (TokKind::Keyword, "main") => {
                    let (line, col) = (t.line, t.col);
                    self.next();
                    self.eat_punct("=")?;
                    let term = self.term()?;
                    if sf.main.is_some() {
                        return self.err("duplicate main", &["end of input"]);
                    }
                    sf.main = Some(term);
                    sf.main_pos = Some((line, col));
                }
                _ => {
                    return self.err(
                        "expected an item",
                        &["type", "extern", "def", "main", "end of input"],
                    )
                }
            }
        }
        Ok(sf)
    }
}

/// Rewrite `Call` nodes that refer to declared externs into `Extern` nodes
/// carrying the declared arity.
fn resolve_externs(sf: &mut SourceFile) -> Result<(), ParseError> {
    let table: std::collections::BTreeMap<FuncName, usize> = sf
        .externs
        .iter()
        .map(|e| (e.name.clone(), e.arity()))
        .collect();
    fn walk(term: &mut Term, table: &std::collections::BTreeMap<FuncName, usize>) {
        match term {
            Term::Call { name, roles } if table.contains_key(name) && roles.len() == 1 => {
                *term = Term::Extern {
                    name: name.clone(),
                    at: roles[0].clone(),
                    arity: table[name],
                };
            }
            Term::Abs { body, .. } => walk(body, table),
            Term::App { func, arg } => {
                walk(func, table);
                walk(arg, table);
            }
            Term::Case {
                scrut, left, right, ..
            } => {
                walk(scrut, table);
                walk(left, table);
                walk(right, table);
            }
            Term::Sel { cont, .. } => walk(cont, table),
            Term::Inl(v) | Term::Inr(v) => walk(v, table),
            Term::Pair(a, b) => {
                walk(a, table);
                walk(b, table);
            }
            _ => {}
        }
    }
    let mut defs = std::mem::take(&mut sf.defs);
    for def in &mut defs {
        walk(&mut def.body, &table);
    }
    sf.defs = defs;
    if let Some(main) = &mut sf.main {
        walk(main, &table);
    }
    Ok(())
}

/// Parse a whole `.chor` file.
pub fn parse(input: &str) -> Result<SourceFile, ParseError> {
    let toks = lex(input)?;
    let mut parser = Parser { toks, pos: 0 };
    let mut sf = parser.file()?;
    resolve_externs(&mut sf)?;
    Ok(sf)
}

/// Parse a single term (used by tests and examples).
pub fn parse_term(input: &str) -> Result<Term, ParseError> {
    let toks = lex(input)?;
    let mut parser = Parser { toks, pos: 0 };
    let term = parser.term()?;
    if parser.peek().kind != TokKind::Eof {
        return parser.err("trailing input after term", &["end of input"]);
    }
    Ok(term)
}

/// Parse a single type (used by tests and examples).
pub fn parse_type(input: &str) -> Result<Type, ParseError> {
    let toks = lex(input)?;
    let mut parser = Parser { toks, pos: 0 };
    let ty = parser.ty()?;
    if parser.peek().kind != TokKind::Eof {
        return parser.err("trailing input after type", &["end of input"]);
    }
    Ok(ty)
}

// ---------------------------------------------------------------------------
// Pretty-printing. `parse(print(sf))` is alpha- and role-equal to `sf`.
// ---------------------------------------------------------------------------

const PREC_TERM: u8 = 0;
const PREC_APP: u8 = 1;
const PREC_ATOM: u8 = 2;

pub fn print_term(term: &Term) -> String {
    let mut s = String::new();
    fmt_term(term, PREC_TERM, &mut s).unwrap();
    s
}

fn fmt_term(term: &Term, prec: u8, out: &mut String) -> fmt::Result {
    use fmt::Write;
    match term {
        Term::Var(x) => write!(out, "{x}"),
        Term::Unit(r) => write!(out, "()@{r}"),
        Term::Lit { val, at } => match val {
            BaseLit::Int(n) => write!(out, "{n}@{at}"),
            BaseLit::Str(s) => write!(out, "{s:?}@{at}"),
        },
        Term::Fst => write!(out, "fst"),
        Term::Snd => write!(out, "snd"),
        Term::Com { from, to } => write!(out, "com[{from},{to}]"),
        Term::Call { name, roles } => {
            let roles: Vec<_> = roles.iter().map(Role::as_str).collect();
            write!(out, "{name}({})", roles.join(", "))
        }
        Term::Extern { name, at, .. } => write!(out, "{name}({at})"),
        Term::App { func, arg } => {
            let parens = prec > PREC_APP;
            if parens {
                out.push('(');
            }
            fmt_term(func, PREC_APP, out)?;
            out.push(' ');
            fmt_term(arg, PREC_ATOM, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
        Term::Inl(v) | Term::Inr(v) => {
            let kw = if matches!(term, Term::Inl(_)) {
                "inl"
            } else {
                "inr"
            };
            let parens = prec > PREC_APP;
            if parens {
                out.push('(');
            }
            write!(out, "{kw} ")?;
            fmt_term(v, PREC_ATOM, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
        Term::Pair(a, b) => {
            let parens = prec > PREC_APP;
            if parens {
                out.push('(');
            }
            let kw = if ast::is_value(a) && ast::is_value(b) {
                "Pair"
            } else {
                "pair"
            };
            write!(out, "{kw} ")?;
            fmt_term(a, PREC_ATOM, out)?;
            out.push(' ');
            fmt_term(b, PREC_ATOM, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
        Term::Abs { param, annot, body } => {
            let parens = prec > PREC_TERM;
            if parens {
                out.push('(');
            }
            write!(out, "fun {param} : {} . ", print_type(annot))?;
            fmt_term(body, PREC_TERM, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
        Term::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            let parens = prec > PREC_TERM;
            if parens {
                out.push('(');
            }
            out.push_str("case ");
            fmt_term(scrut, PREC_APP, out)?;
            write!(out, " of inl {left_var} => ")?;
            fmt_term(left, PREC_TERM, out)?;
            write!(out, " | inr {right_var} => ")?;
            fmt_term(right, PREC_TERM, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
        Term::Sel {
            from,
            to,
            label,
            cont,
        } => {
            let parens = prec > PREC_TERM;
            if parens {
                out.push('(');
            }
            write!(out, "select[{from},{to}] {label}; ")?;
            fmt_term(cont, PREC_TERM, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
    }
}

const TPREC_ARROW: u8 = 0;
const TPREC_SUM: u8 = 1;
const TPREC_PROD: u8 = 2;
const TPREC_ATOM: u8 = 3;

pub fn print_type(ty: &Type) -> String {
    let mut s = String::new();
    fmt_type(ty, TPREC_ARROW, &mut s).unwrap();
    s
}

fn fmt_type(ty: &Type, prec: u8, out: &mut String) -> fmt::Result {
    use fmt::Write;
    match ty {
        Type::Unit(r) => write!(out, "Unit@{r}"),
        Type::Base { base, at } => write!(out, "{base}@{at}"),
        Type::Var { name, roles } => {
            let roles: Vec<_> = roles.iter().map(Role::as_str).collect();
            write!(out, "{name}@({})", roles.join(", "))
        }
        Type::Arrow { dom, extra, cod } => {
            let parens = prec > TPREC_ARROW;
            if parens {
                out.push('(');
            }
            fmt_type(dom, TPREC_SUM, out)?;
            if extra.is_empty() {
                out.push_str(" -> ");
            } else {
                let roles: Vec<_> = extra.iter().map(Role::as_str).collect();
                write!(out, " ->{{{}}} ", roles.join(","))?;
            }
            fmt_type(cod, TPREC_ARROW, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
        Type::Sum(a, b) => {
            let parens = prec > TPREC_SUM;
            if parens {
                out.push('(');
            }
            fmt_type(a, TPREC_SUM, out)?;
            out.push_str(" + ");
            fmt_type(b, TPREC_PROD, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
        Type::Prod(a, b) => {
            let parens = prec > TPREC_PROD;
            if parens {
                out.push('(');
            }
            fmt_type(a, TPREC_PROD, out)?;
            out.push_str(" * ");
            fmt_type(b, TPREC_ATOM, out)?;
            if parens {
                out.push(')');
            }
            Ok(())
        }
    }
}

/// Print a whole source file; `parse(print(sf))` round-trips.
pub fn print(sf: &SourceFile) -> String {
    let mut out = String::new();
    for td in &sf.typedefs {
        let params: Vec<_> = td.params.iter().map(Role::as_str).collect();
        out.push_str(&format!(
            "type {}@({}) = {}\n",
            td.name,
            params.join(", "),
            print_type(&td.body)
        ));
    }
    for ex in &sf.externs {
        out.push_str(&format!(
            "extern {}@({}) : {}\n",
            ex.name,
            ex.role,
            print_type(&ex.ty)
        ));
    }
    for def in &sf.defs {
        let params: Vec<_> = def.params.iter().map(Role::as_str).collect();
        out.push_str(&format!(
            "def {}({}) : {} =\n  {}\n",
            def.name,
            params.join(", "),
            print_type(&def.sig),
            print_term(&def.body)
        ));
    }
    if let Some(main) = &sf.main {
        out.push_str(&format!("main = {}\n", print_term(main)));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{alpha_eq, app, com, int_lit};

    #[test]
    fn parses_communication_application() {
        let m = parse_term("com[A,B] 5@A").unwrap();
        assert_eq!(m, app(com("A", "B"), int_lit(5, "A")));
    }

    #[test]
    fn parses_identity_abstraction() {
        let m = parse_term("fun x : Unit@R . x").unwrap();
        assert_eq!(
            m,
            ast::abs("x", Type::Unit(Role::new("R")), ast::var("x"))
        );
    }

    #[test]
    fn parses_case() {
        let m = parse_term("case e of inl x => l | inr y => r").unwrap();
        match m {
            Term::Case {
                scrut,
                left_var,
                right_var,
                ..
            } => {
                assert_eq!(*scrut, ast::var("e"));
                assert_eq!(left_var.as_str(), "x");
                assert_eq!(right_var.as_str(), "y");
            }
            other => panic!("expected case, got {other:?}"),
        }
    }

    #[test]
    fn application_is_left_associative() {
        let m = parse_term("f x y").unwrap();
        assert_eq!(m, app(app(ast::var("f"), ast::var("x")), ast::var("y")));
    }

    #[test]
    fn arrows_are_right_associative() {
        let t = parse_type("Int@A -> Int@B -> Int@C").unwrap();
        match t {
            Type::Arrow { cod, .. } => assert!(matches!(*cod, Type::Arrow { .. })),
            other => panic!("expected arrow, got {other:?}"),
        }
    }

    #[test]
    fn arrow_rho_annotation() {
        let t = parse_type("Int@A ->{P} Int@B").unwrap();
        assert_eq!(t, Type::arrow(Type::int("A"), [Role::new("P")], Type::int("B")));
        assert_eq!(print_type(&t), "Int@A ->{P} Int@B");
        let plain = parse_type("Int@A -> Int@B").unwrap();
        assert_eq!(print_type(&plain), "Int@A -> Int@B");
    }

    #[test]
    fn select_uses_semicolon() {
        let m = parse_term("select[S,R] go; ()@R").unwrap();
        assert_eq!(
            m,
            Term::Sel {
                from: Role::new("S"),
                to: Role::new("R"),
                label: SelLabel::new("go"),
                cont: Box::new(ast::unit("R")),
            }
        );
    }

    #[test]
    fn if_desugars_to_case() {
        let m = parse_term("if b then 1@A else 2@A").unwrap();
        match m {
            Term::Case { left, right, .. } => {
                assert_eq!(*left, int_lit(1, "A"));
                assert_eq!(*right, int_lit(2, "A"));
            }
            other => panic!("expected case, got {other:?}"),
        }
    }

    #[test]
    fn let_desugars_to_application() {
        let m = parse_term("let x : Int@A = 1@A in x").unwrap();
        assert_eq!(
            m,
            app(ast::abs("x", Type::int("A"), ast::var("x")), int_lit(1, "A"))
        );
    }

    #[test]
    fn capital_pair_rejects_non_values() {
        let err = parse_term("Pair (f x) 2@A").unwrap_err();
        assert!(err.message.contains("Pair requires value arguments"));
        // lower-case sugar accepts the same input
        parse_term("pair (f x) 2@A").unwrap();
    }

    #[test]
    fn comments_are_ignored()  {
        let sf = parse("-- a file\nmain = ()@R -- trailing\n").unwrap();
        assert_eq!(sf.main, Some(ast::unit("R")));
    }

    #[test]
    fn extern_calls_resolve_with_arity() {
        let sf = parse(
            "extern modPow@(R) : Int@R -> Int@R -> Int@R -> Int@R\n\
             def g(P) : Int@P = modPow(P) 2@P 3@P 5@P\n",
        )
        .unwrap();
        let body = &sf.defs[0].body;
        let (name, at, arity, args) = ast::extern_spine(body).unwrap();
        assert_eq!(name.as_str(), "modPow");
        assert_eq!(at.as_str(), "P");
        assert_eq!(arity, 3);
        assert_eq!(args.len(), 3);
    }

    #[test]
    fn spec_example_file_round_trips() {
        let src = r#"
type List_Int@(R) = Unit@R + (Int@R * List_Int@(R))
extern modPow@(R) : Int@R -> Int@R -> Int@R -> Int@R
def remoteFunction(C, S) : (Int@S -> Int@S) -> Int@C ->{S} Int@C =
  fun f : Int@S -> Int@S . fun v : Int@C . com[S,C] (f (com[C,S] v))
main = remoteFunction(Client, Server) modPow(Server) -- partial, just syntax
"#;
        let sf = parse(src).unwrap();
        let printed = print(&sf);
        let reparsed = parse(&printed).unwrap();
        assert_eq!(sf.typedefs, reparsed.typedefs);
        assert_eq!(sf.externs, reparsed.externs);
        assert_eq!(sf.defs.len(), reparsed.defs.len());
        for (a, b) in sf.defs.iter().zip(&reparsed.defs) {
            assert!(alpha_eq(&a.body, &b.body));
            assert_eq!(a.sig, b.sig);
        }
        assert!(alpha_eq(
            sf.main.as_ref().unwrap(),
            reparsed.main.as_ref().unwrap()
        ));
    }
}
