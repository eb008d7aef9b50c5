//! Core syntax: terms, values, types, roles, definitions, and the
//! syntactic meta-operations every other module consumes.
//!
//! Terms and types are located at *roles*. The term grammar is
//!
//! ```text
//! M ::= V | f(R...) | M M | case M of inl x => M | inr x => M | select[S,R] l; M
//! V ::= x | fun x:T. M | inl V | inr V | fst | snd | Pair V V | ()@R | com[S,R]
//! T ::= T ->{rho} T | T + T | T * T | Unit@R | t@(R...)
//! ```
//!
//! extended with located base literals (`5@R`, `"s"@R`) and declared
//! extern primitives, which stand in for the local functions (`modPow`,
//! `encrypt`, ...) that the standard library of a real language would
//! provide. A partial application of an extern is a value; a saturated
//! one is a redex handled by the runtime.
//!
//! Everything here is pure and immutable; all operations are safe to call
//! from concurrent contexts.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

macro_rules! name_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

name_type!(
    /// A role: an abstract participant. Compared by exact string equality.
    Role
);
name_type!(
    /// A term variable.
    Var
);
name_type!(
    /// A choreography (function) name.
    FuncName
);
name_type!(
    /// A recursive type name, instantiated as `t@(R, ...)`.
    TypeName
);
name_type!(
    /// A selection label.
    SelLabel
);

/// Base literals carried by the `Lit` term.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaseLit {
    Int(i64),
    Str(String),
}

impl BaseLit {
    pub fn base(&self) -> BaseTy {
        match self {
            BaseLit::Int(_) => BaseTy::Int,
            BaseLit::Str(_) => BaseTy::Str,
        }
    }
}

impl fmt::Display for BaseLit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseLit::Int(n) => write!(f, "{n}"),
            BaseLit::Str(s) => write!(f, "{s:?}"),
        }
    }
}

/// The base types that literals inhabit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BaseTy {
    Int,
    Str,
}

impl fmt::Display for BaseTy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BaseTy::Int => f.write_str("Int"),
            BaseTy::Str => f.write_str("String"),
        }
    }
}

/// Choreography terms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Term {
    Var(Var),
    Abs {
        param: Var,
        annot: Type,
        body: Box<Term>,
    },
    App {
        func: Box<Term>,
        arg: Box<Term>,
    },
    Case {
        scrut: Box<Term>,
        left_var: Var,
        left: Box<Term>,
        right_var: Var,
        right: Box<Term>,
    },
    /// `select[S,R] l; M` — S informs R of the choice `l`, continues as M.
    Sel {
        from: Role,
        to: Role,
        label: SelLabel,
        cont: Box<Term>,
    },
    /// `com[S,R]` — a function taking a value at S to the same value at R.
    Com {
        from: Role,
        to: Role,
    },
    Inl(Box<Term>),
    Inr(Box<Term>),
    Pair(Box<Term>, Box<Term>),
    Fst,
    Snd,
    Unit(Role),
    /// `f(R...)` — a named choreography instantiated with roles.
    Call {
        name: FuncName,
        roles: Vec<Role>,
    },
    Lit {
        val: BaseLit,
        at: Role,
    },
    /// A declared local primitive at one role. `arity` is the number of
    /// curried arguments of its declared type; applications below that are
    /// values, a saturated application is evaluated by the runtime.
    Extern {
        name: FuncName,
        at: Role,
        arity: usize,
    },
}

/// Role-annotated types.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Type {
    /// `T ->{rho} T'` where `rho` lists the roles participating in the
    /// function beyond those in its input and output types.
    Arrow {
        dom: Box<Type>,
        extra: BTreeSet<Role>,
        cod: Box<Type>,
    },
    Sum(Box<Type>, Box<Type>),
    Prod(Box<Type>, Box<Type>),
    Unit(Role),
    Base {
        base: BaseTy,
        at: Role,
    },
    /// `t@(R...)` — a recursive type name instantiated with roles.
    Var {
        name: TypeName,
        roles: Vec<Role>,
    },
}

impl Type {
    pub fn arrow(dom: Type, extra: impl IntoIterator<Item = Role>, cod: Type) -> Type {
        Type::Arrow {
            dom: Box::new(dom),
            extra: extra.into_iter().collect(),
            cod: Box::new(cod),
        }
    }

    pub fn plain_arrow(dom: Type, cod: Type) -> Type {
        Type::arrow(dom, [], cod)
    }

    pub fn int(at: impl Into<Role>) -> Type {
        Type::Base {
            base: BaseTy::Int,
            at: at.into(),
        }
    }

    pub fn string(at: impl Into<Role>) -> Type {
        Type::Base {
            base: BaseTy::Str,
            at: at.into(),
        }
    }
}

/// A set of named choreographies together with their signatures: the
/// `f(R...) : T` entries of the typing environment plus the bodies used by
/// the `Def` reduction rule.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Definitions {
    /// Body of each definition, keyed by name, with its formal role params.
    pub bodies: BTreeMap<FuncName, (Vec<Role>, Term)>,
    /// Declared signature of each definition with the same formal params.
    pub signatures: BTreeMap<FuncName, (Vec<Role>, Type)>,
}

impl Definitions {
    pub fn body(&self, name: &FuncName) -> Option<(&[Role], &Term)> {
        self.bodies.get(name).map(|(params, body)| (params.as_slice(), body))
    }
}

/// Kind of a transition label: `τ` for ordinary steps, `λ` for steps
/// propagated out through an abstraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LabelKind {
    Tau,
    Lambda,
}

/// A transition label: the kind plus the set of synchronising roles
/// (nonempty only for communication- and selection-derived steps).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TransitionLabel {
    pub kind: LabelKind,
    pub sync: BTreeSet<Role>,
}

impl TransitionLabel {
    pub fn tau(sync: impl IntoIterator<Item = Role>) -> Self {
        TransitionLabel {
            kind: LabelKind::Tau,
            sync: sync.into_iter().collect(),
        }
    }

    pub fn silent() -> Self {
        TransitionLabel::tau([])
    }
}

impl fmt::Display for TransitionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            LabelKind::Tau => "tau",
            LabelKind::Lambda => "lambda",
        };
        if self.sync.is_empty() {
            write!(f, "{kind}")
        } else {
            let roles: Vec<_> = self.sync.iter().map(Role::as_str).collect();
            write!(f, "{kind}{{{}}}", roles.join(","))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RoleSubstError {
    #[error("role substitution lists differ in length: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("role substitution targets are not distinct")]
    TargetsNotDistinct,
}

/// A simultaneous role substitution `[R'... := R...]`, replacing every
/// occurrence of `R'_i` by `R_i` in one pass.
#[derive(Debug, Clone)]
pub struct RoleSubst {
    map: BTreeMap<Role, Role>,
}

impl RoleSubst {
    /// Build the substitution replacing `old[i]` by `new[i]`. The old roles
    /// must be distinct and the lists of equal length.
    pub fn new(old: &[Role], new: &[Role]) -> Result<Self, RoleSubstError> {
        if old.len() != new.len() {
            return Err(RoleSubstError::LengthMismatch {
                left: old.len(),
                right: new.len(),
            });
        }
        let mut map = BTreeMap::new();
        for (o, n) in old.iter().zip(new) {
            if map.insert(o.clone(), n.clone()).is_some() {
                return Err(RoleSubstError::TargetsNotDistinct);
            }
        }
        Ok(RoleSubst { map })
    }

    pub fn single(old: &Role, new: &Role) -> Self {
        RoleSubst {
            map: BTreeMap::from([(old.clone(), new.clone())]),
        }
    }

    pub fn apply(&self, role: &Role) -> Role {
        self.map.get(role).cloned().unwrap_or_else(|| role.clone())
    }

    pub fn apply_many(&self, roles: &[Role]) -> Vec<Role> {
        roles.iter().map(|r| self.apply(r)).collect()
    }

    pub fn apply_set(&self, roles: &BTreeSet<Role>) -> BTreeSet<Role> {
        roles.iter().map(|r| self.apply(r)).collect()
    }
}

/// Global fresh-name supply. Generated names start with `$`, which the
/// parser never accepts, so renaming cannot collide with user names.
static FRESH_COUNTER: AtomicU64 = AtomicU64::new(0);

pub fn fresh_var(stem: &str) -> Var {
    let n = FRESH_COUNTER.fetch_add(1, Ordering::Relaxed);
    let stem = stem.trim_start_matches('$');
    Var::new(format!("${stem}{n}"))
}

/// Free variables of a term. `case` binds its left variable in the left
/// branch and its right variable in the right branch; an abstraction binds
/// its parameter.
pub fn free_vars(term: &Term) -> BTreeSet<Var> {
    fn go(term: &Term, out: &mut BTreeSet<Var>, bound: &mut Vec<Var>) {
        match term {
            Term::Var(x) => {
                if !bound.contains(x) {
                    out.insert(x.clone());
                }
            }
            Term::Abs { param, body, .. } => {
                bound.push(param.clone());
                go(body, out, bound);
                bound.pop();
            }
            Term::App { func, arg } => {
                go(func, out, bound);
                go(arg, out, bound);
            }
            Term::Case {
                scrut,
                left_var,
                left,
                right_var,
                right,
            } => {
                go(scrut, out, bound);
                bound.push(left_var.clone());
                go(left, out, bound);
                bound.pop();
                bound.push(right_var.clone());
                go(right, out, bound);
                bound.pop();
            }
            Term::Sel { cont, .. } => go(cont, out, bound),
            Term::Inl(v) | Term::Inr(v) => go(v, out, bound),
            Term::Pair(a, b) => {
                go(a, out, bound);
                go(b, out, bound);
            }
            Term::Com { .. }
            | Term::Fst
            | Term::Snd
            | Term::Unit(_)
            | Term::Call { .. }
            | Term::Lit { .. }
            | Term::Extern { .. } => {}
        }
    }
    let mut out = BTreeSet::new();
    go(term, &mut out, &mut Vec::new());
    out
}

pub fn is_closed(term: &Term) -> bool {
    free_vars(term).is_empty()
}

/// Capture-avoiding substitution `m[x := v]`. Binders are renamed on demand
/// using the global fresh supply.
pub fn subst_var(term: &Term, x: &Var, v: &Term) -> Term {
    let fv_v = free_vars(v);
    subst_rec(term, x, v, &fv_v)
}

fn subst_rec(term: &Term, x: &Var, v: &Term, fv_v: &BTreeSet<Var>) -> Term {
    match term {
        Term::Var(y) => {
            if y == x {
                v.clone()
            } else {
                term.clone()
            }
        }
        Term::Abs { param, annot, body } => {
            if param == x {
                term.clone()
            } else if fv_v.contains(param) {
                let fresh = fresh_var(param.as_str());
                let body = subst_rec(body, param, &Term::Var(fresh.clone()), &BTreeSet::new());
                Term::Abs {
                    param: fresh,
                    annot: annot.clone(),
                    body: Box::new(subst_rec(&body, x, v, fv_v)),
                }
            } else {
                Term::Abs {
                    param: param.clone(),
                    annot: annot.clone(),
                    body: Box::new(subst_rec(body, x, v, fv_v)),
                }
            }
        }
        Term::App { func, arg } => Term::App {
            func: Box::new(subst_rec(func, x, v, fv_v)),
            arg: Box::new(subst_rec(arg, x, v, fv_v)),
        },
        Term::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            let scrut = Box::new(subst_rec(scrut, x, v, fv_v));
            let (left_var, left) = subst_branch(left_var, left, x, v, fv_v);
            let (right_var, right) = subst_branch(right_var, right, x, v, fv_v);
            Term::Case {
                scrut,
                left_var,
                left: Box::new(left),
                right_var,
                right: Box::new(right),
            }
        }
        Term::Sel {
            from,
            to,
            label,
            cont,
        } => Term::Sel {
            from: from.clone(),
            to: to.clone(),
            label: label.clone(),
            cont: Box::new(subst_rec(cont, x, v, fv_v)),
        },
        Term::Inl(w) => Term::Inl(Box::new(subst_rec(w, x, v, fv_v))),
        Term::Inr(w) => Term::Inr(Box::new(subst_rec(w, x, v, fv_v))),
        Term::Pair(a, b) => Term::Pair(
            Box::new(subst_rec(a, x, v, fv_v)),
            Box::new(subst_rec(b, x, v, fv_v)),
        ),
        Term::Com { .. }
        | Term::Fst
        | Term::Snd
        | Term::Unit(_)
        | Term::Call { .. }
        | Term::Lit { .. }
        | Term::Extern { .. } => term.clone(),
    }
}

fn subst_branch(
    binder: &Var,
    body: &Term,
    x: &Var,
    v: &Term,
    fv_v: &BTreeSet<Var>,
) -> (Var, Term) {
    if binder == x {
        (binder.clone(), body.clone())
    } else if fv_v.contains(binder) {
        let fresh = fresh_var(binder.as_str());
        let body = subst_rec(body, binder, &Term::Var(fresh.clone()), &BTreeSet::new());
        (fresh, subst_rec(&body, x, v, fv_v))
    } else {
        (binder.clone(), subst_rec(body, x, v, fv_v))
    }
}

/// Apply a simultaneous role substitution to every role occurrence in a
/// term, including the type annotations of binders.
pub fn subst_roles_term(term: &Term, subst: &RoleSubst) -> Term {
    match term {
        Term::Var(_) | Term::Fst | Term::Snd => term.clone(),
        Term::Abs { param, annot, body } => Term::Abs {
            param: param.clone(),
            annot: subst_roles_type(annot, subst),
            body: Box::new(subst_roles_term(body, subst)),
        },
        Term::App { func, arg } => Term::App {
            func: Box::new(subst_roles_term(func, subst)),
            arg: Box::new(subst_roles_term(arg, subst)),
        },
        Term::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => Term::Case {
            scrut: Box::new(subst_roles_term(scrut, subst)),
            left_var: left_var.clone(),
            left: Box::new(subst_roles_term(left, subst)),
            right_var: right_var.clone(),
            right: Box::new(subst_roles_term(right, subst)),
        },
        Term::Sel {
            from,
            to,
            label,
            cont,
        } => Term::Sel {
            from: subst.apply(from),
            to: subst.apply(to),
            label: label.clone(),
            cont: Box::new(subst_roles_term(cont, subst)),
        },
        Term::Com { from, to } => Term::Com {
            from: subst.apply(from),
            to: subst.apply(to),
        },
        Term::Inl(v) => Term::Inl(Box::new(subst_roles_term(v, subst))),
        Term::Inr(v) => Term::Inr(Box::new(subst_roles_term(v, subst))),
        Term::Pair(a, b) => Term::Pair(
            Box::new(subst_roles_term(a, subst)),
            Box::new(subst_roles_term(b, subst)),
        ),
        Term::Unit(r) => Term::Unit(subst.apply(r)),
        Term::Call { name, roles } => Term::Call {
            name: name.clone(),
            roles: subst.apply_many(roles),
        },
        Term::Lit { val, at } => Term::Lit {
            val: val.clone(),
            at: subst.apply(at),
        },
        Term::Extern { name, at, arity } => Term::Extern {
            name: name.clone(),
            at: subst.apply(at),
            arity: *arity,
        },
    }
}

/// Apply a simultaneous role substitution to a type.
pub fn subst_roles_type(ty: &Type, subst: &RoleSubst) -> Type {
    match ty {
        Type::Arrow { dom, extra, cod } => Type::Arrow {
            dom: Box::new(subst_roles_type(dom, subst)),
            extra: subst.apply_set(extra),
            cod: Box::new(subst_roles_type(cod, subst)),
        },
        Type::Sum(a, b) => Type::Sum(
            Box::new(subst_roles_type(a, subst)),
            Box::new(subst_roles_type(b, subst)),
        ),
        Type::Prod(a, b) => Type::Prod(
            Box::new(subst_roles_type(a, subst)),
            Box::new(subst_roles_type(b, subst)),
        ),
        Type::Unit(r) => Type::Unit(subst.apply(r)),
        Type::Base { base, at } => Type::Base {
            base: *base,
            at: subst.apply(at),
        },
        Type::Var { name, roles } => Type::Var {
            name: name.clone(),
            roles: subst.apply_many(roles),
        },
    }
}

/// The roles of a type: `roles(t@(R...)) = {R...}`,
/// `roles(T ->{rho} T') = roles(T) ∪ roles(T') ∪ rho`, `roles(Unit@R) = {R}`,
/// unions for sums and products. Base types behave like located units.
pub fn roles_of_type(ty: &Type) -> BTreeSet<Role> {
    let mut out = BTreeSet::new();
    collect_type_roles(ty, &mut out);
    out
}

fn collect_type_roles(ty: &Type, out: &mut BTreeSet<Role>) {
    match ty {
        Type::Arrow { dom, extra, cod } => {
            collect_type_roles(dom, out);
            out.extend(extra.iter().cloned());
            collect_type_roles(cod, out);
        }
        Type::Sum(a, b) | Type::Prod(a, b) => {
            collect_type_roles(a, out);
            collect_type_roles(b, out);
        }
        Type::Unit(r) => {
            out.insert(r.clone());
        }
        Type::Base { at, .. } => {
            out.insert(at.clone());
        }
        Type::Var { roles, .. } => out.extend(roles.iter().cloned()),
    }
}

/// All role names syntactically occurring in a term, including inside the
/// type annotations of binders.
pub fn roles_of_term(term: &Term) -> BTreeSet<Role> {
    let mut out = BTreeSet::new();
    collect_term_roles(term, &mut out);
    out
}

fn collect_term_roles(term: &Term, out: &mut BTreeSet<Role>) {
    match term {
        Term::Var(_) | Term::Fst | Term::Snd => {}
        Term::Abs { annot, body, .. } => {
            collect_type_roles(annot, out);
            collect_term_roles(body, out);
        }
        Term::App { func, arg } => {
            collect_term_roles(func, out);
            collect_term_roles(arg, out);
        }
        Term::Case {
            scrut, left, right, ..
        } => {
            collect_term_roles(scrut, out);
            collect_term_roles(left, out);
            collect_term_roles(right, out);
        }
        Term::Sel { from, to, cont, .. } => {
            out.insert(from.clone());
            out.insert(to.clone());
            collect_term_roles(cont, out);
        }
        Term::Com { from, to } => {
            out.insert(from.clone());
            out.insert(to.clone());
        }
        Term::Inl(v) | Term::Inr(v) => collect_term_roles(v, out),
        Term::Pair(a, b) => {
            collect_term_roles(a, out);
            collect_term_roles(b, out);
        }
        Term::Unit(r) => {
            out.insert(r.clone());
        }
        Term::Call { roles, .. } => out.extend(roles.iter().cloned()),
        Term::Lit { at, .. } => {
            out.insert(at.clone());
        }
        Term::Extern { at, .. } => {
            out.insert(at.clone());
        }
    }
}

/// The synchronising roles of a term: `sroles(com[S,R]) = {S,R}`,
/// `sroles(select[S,R] l; M) = {S,R} ∪ sroles(M)`, `sroles(f(R...)) = {R...}`,
/// homomorphic elsewhere.
pub fn sroles(term: &Term) -> BTreeSet<Role> {
    let mut out = BTreeSet::new();
    collect_sroles(term, &mut out);
    out
}

fn collect_sroles(term: &Term, out: &mut BTreeSet<Role>) {
    match term {
        Term::Com { from, to } => {
            out.insert(from.clone());
            out.insert(to.clone());
        }
        Term::Sel { from, to, cont, .. } => {
            out.insert(from.clone());
            out.insert(to.clone());
            collect_sroles(cont, out);
        }
        Term::Call { roles, .. } => out.extend(roles.iter().cloned()),
        Term::Abs { body, .. } => collect_sroles(body, out),
        Term::App { func, arg } => {
            collect_sroles(func, out);
            collect_sroles(arg, out);
        }
        Term::Case {
            scrut, left, right, ..
        } => {
            collect_sroles(scrut, out);
            collect_sroles(left, out);
            collect_sroles(right, out);
        }
        Term::Inl(v) | Term::Inr(v) => collect_sroles(v, out),
        Term::Pair(a, b) => {
            collect_sroles(a, out);
            collect_sroles(b, out);
        }
        Term::Var(_)
        | Term::Fst
        | Term::Snd
        | Term::Unit(_)
        | Term::Lit { .. }
        | Term::Extern { .. } => {}
    }
}

/// Whether a term matches the value grammar. `com[S,R]` is a value;
/// selections and applications are not, with one extension: a partial
/// application of an extern (fewer value arguments than its arity) is a
/// value, so that curried externs enjoy progress like any other function.
pub fn is_value(term: &Term) -> bool {
    match term {
        Term::Var(_)
        | Term::Abs { .. }
        | Term::Com { .. }
        | Term::Fst
        | Term::Snd
        | Term::Unit(_)
        | Term::Lit { .. }
        | Term::Extern { .. } => true,
        Term::Inl(v) | Term::Inr(v) => is_value(v),
        Term::Pair(a, b) => is_value(a) && is_value(b),
        Term::App { .. } => extern_partial(term).is_some(),
        Term::Case { .. } | Term::Sel { .. } | Term::Call { .. } => false,
    }
}

/// If `term` is an application chain headed by an extern with all-value
/// arguments and strictly fewer of them than the extern's arity, return the
/// head and arguments.
pub fn extern_partial(term: &Term) -> Option<(&FuncName, &Role, usize, Vec<&Term>)> {
    let (name, at, arity, args) = extern_spine(term)?;
    if args.len() < arity && args.iter().all(|a| is_value(a)) {
        Some((name, at, arity, args))
    } else {
        None
    }
}

/// Decompose an application chain headed by an extern.
pub fn extern_spine(term: &Term) -> Option<(&FuncName, &Role, usize, Vec<&Term>)> {
    let mut args = Vec::new();
    let mut cur = term;
    loop {
        match cur {
            Term::App { func, arg } => {
                args.push(arg.as_ref());
                cur = func;
            }
            Term::Extern { name, at, arity } => {
                args.reverse();
                return Some((name, at, *arity, args));
            }
            _ => return None,
        }
    }
}

/// Alpha-equivalence of terms (role names compared exactly).
pub fn alpha_eq(a: &Term, b: &Term) -> bool {
    fn go(a: &Term, b: &Term, env: &mut Vec<(Var, Var)>) -> bool {
        match (a, b) {
            (Term::Var(x), Term::Var(y)) => {
                for (l, r) in env.iter().rev() {
                    if l == x || r == y {
                        return l == x && r == y;
                    }
                }
                x == y
            }
            (
                Term::Abs {
                    param: xa,
                    annot: ta,
                    body: ba,
                },
                Term::Abs {
                    param: xb,
                    annot: tb,
                    body: bb,
                },
            ) => {
                if ta != tb {
                    return false;
                }
                env.push((xa.clone(), xb.clone()));
                let r = go(ba, bb, env);
                env.pop();
                r
            }
            (Term::App { func: fa, arg: aa }, Term::App { func: fb, arg: ab }) => {
                go(fa, fb, env) && go(aa, ab, env)
            }
            (
                Term::Case {
                    scrut: sa,
                    left_var: lva,
                    left: la,
                    right_var: rva,
                    right: ra,
                },
                Term::Case {
                    scrut: sb,
                    left_var: lvb,
                    left: lb,
                    right_var: rvb,
                    right: rb,
                },
            ) => {
                if !go(sa, sb, env) {
                    return false;
                }
                env.push((lva.clone(), lvb.clone()));
                let l = go(la, lb, env);
                env.pop();
                if !l {
                    return false;
                }
                env.push((rva.clone(), rvb.clone()));
                let r = go(ra, rb, env);
                env.pop();
                r
            }
            (
                Term::Sel {
                    from: fa,
                    to: ta,
                    label: la,
                    cont: ca,
                },
                Term::Sel {
                    from: fb,
                    to: tb,
                    label: lb,
                    cont: cb,
                },
            ) => fa == fb && ta == tb && la == lb && go(ca, cb, env),
            (Term::Inl(va), Term::Inl(vb)) | (Term::Inr(va), Term::Inr(vb)) => go(va, vb, env),
            (Term::Pair(a1, a2), Term::Pair(b1, b2)) => go(a1, b1, env) && go(a2, b2, env),
            _ => a == b,
        }
    }
    go(a, b, &mut Vec::new())
}

/// Canonical alpha-form: binders renamed to `$a0`, `$a1`, ... in traversal
/// order. Two terms are alpha-equivalent iff their canonical forms are equal,
/// which makes this usable as a hash key for visited sets.
pub fn alpha_canon(term: &Term) -> Term {
    fn go(term: &Term, counter: &mut u64, env: &mut Vec<(Var, Var)>) -> Term {
        match term {
            Term::Var(x) => {
                for (old, new) in env.iter().rev() {
                    if old == x {
                        return Term::Var(new.clone());
                    }
                }
                term.clone()
            }
            Term::Abs { param, annot, body } => {
                let new = Var::new(format!("$a{}", *counter));
                *counter += 1;
                env.push((param.clone(), new.clone()));
                let body = go(body, counter, env);
                env.pop();
                Term::Abs {
                    param: new,
                    annot: annot.clone(),
                    body: Box::new(body),
                }
            }
            Term::App { func, arg } => Term::App {
                func: Box::new(go(func, counter, env)),
                arg: Box::new(go(arg, counter, env)),
            },
            Term::Case {
                scrut,
                left_var,
                left,
                right_var,
                right,
            } => {
                let scrut = Box::new(go(scrut, counter, env));
                let nl = Var::new(format!("$a{}", *counter));
                *counter += 1;
                env.push((left_var.clone(), nl.clone()));
                let left = go(left, counter, env);
                env.pop();
                let nr = Var::new(format!("$a{}", *counter));
                *counter += 1;
                env.push((right_var.clone(), nr.clone()));
                let right = go(right, counter, env);
                env.pop();
                Term::Case {
                    scrut,
                    left_var: nl,
                    left: Box::new(left),
                    right_var: nr,
                    right: Box::new(right),
                }
            }
            Term::Sel {
                from,
                to,
                label,
                cont,
            } => Term::Sel {
                from: from.clone(),
                to: to.clone(),
                label: label.clone(),
                cont: Box::new(go(cont, counter, env)),
            },
            Term::Inl(v) => Term::Inl(Box::new(go(v, counter, env))),
            Term::Inr(v) => Term::Inr(Box::new(go(v, counter, env))),
            Term::Pair(a, b) => Term::Pair(
                Box::new(go(a, counter, env)),
                Box::new(go(b, counter, env)),
            ),
            _ => term.clone(),
        }
    }
    go(term, &mut 0, &mut Vec::new())
}

pub fn unit(at: impl Into<Role>) -> Term {
    Term::Unit(at.into())
}

pub fn var(name: impl Into<Var>) -> Term {
    Term::Var(name.into())
}

pub fn abs(param: impl Into<Var>, annot: Type, body: Term) -> Term {
    Term::Abs {
        param: param.into(),
        annot,
        body: Box::new(body),
    }
}

pub fn app(func: Term, arg: Term) -> Term {
    Term::App {
        func: Box::new(func),
        arg: Box::new(arg),
    }
}

pub fn apps(func: Term, args: impl IntoIterator<Item = Term>) -> Term {
    args.into_iter().fold(func, app)
}

pub fn com(from: impl Into<Role>, to: impl Into<Role>) -> Term {
    Term::Com {
        from: from.into(),
        to: to.into(),
    }
}

pub fn int_lit(n: i64, at: impl Into<Role>) -> Term {
    Term::Lit {
        val: BaseLit::Int(n),
        at: at.into(),
    }
}

pub fn str_lit(s: impl Into<String>, at: impl Into<Role>) -> Term {
    Term::Lit {
        val: BaseLit::Str(s.into()),
        at: at.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(s: &str) -> Role {
        Role::new(s)
    }

    #[test]
    fn free_vars_of_var() {
        assert_eq!(free_vars(&var("x")), BTreeSet::from([Var::new("x")]));
    }

    #[test]
    fn abstraction_binds_its_parameter() {
        let m = abs("x", Type::Unit(r("R")), var("x"));
        assert!(free_vars(&m).is_empty());
        assert!(is_closed(&m));
    }

    #[test]
    fn case_binds_per_branch() {
        // case z of inl x => x | inr y => w  has free {z, w}
        let m = Term::Case {
            scrut: Box::new(var("z")),
            left_var: Var::new("x"),
            left: Box::new(var("x")),
            right_var: Var::new("y"),
            right: Box::new(var("w")),
        };
        assert_eq!(
            free_vars(&m),
            BTreeSet::from([Var::new("z"), Var::new("w")])
        );
    }

    #[test]
    fn subst_replaces_free_occurrence() {
        assert_eq!(subst_var(&var("x"), &Var::new("x"), &unit("R")), unit("R"));
    }

    #[test]
    fn subst_respects_shadowing() {
        let m = abs("x", Type::Unit(r("R")), var("x"));
        assert_eq!(subst_var(&m, &Var::new("x"), &unit("R")), m);
    }

    #[test]
    fn subst_avoids_capture() {
        // (fun y:T. x)[x := y] must rename the binder, not capture.
        let m = abs("y", Type::Unit(r("R")), var("x"));
        let out = subst_var(&m, &Var::new("x"), &var("y"));
        match &out {
            Term::Abs { param, body, .. } => {
                assert_ne!(param.as_str(), "y");
                assert_eq!(**body, var("y"));
            }
            other => panic!("expected abstraction, got {other:?}"),
        }
        assert!(alpha_eq(
            &out,
            &abs("z", Type::Unit(r("R")), var("y"))
        ));
    }

    #[test]
    fn roles_of_unit_type() {
        assert_eq!(roles_of_type(&Type::Unit(r("R"))), BTreeSet::from([r("R")]));
    }

    #[test]
    fn roles_of_arrow_include_rho() {
        let t = Type::arrow(Type::int("A"), [r("P")], Type::int("B"));
        assert_eq!(
            roles_of_type(&t),
            BTreeSet::from([r("A"), r("P"), r("B")])
        );
    }

    #[test]
    fn roles_of_sum_union_is_idempotent() {
        let t = Type::Sum(Box::new(Type::Unit(r("R"))), Box::new(Type::Unit(r("R"))));
        assert_eq!(roles_of_type(&t), BTreeSet::from([r("R")]));
    }

    #[test]
    fn simultaneous_role_substitution() {
        // (Int@A ->{P} Int@B)[A,P,B := P,B,A] = Int@P ->{B} Int@A.
        // Sequential substitution would give a different, wrong answer.
        let t = Type::arrow(Type::int("A"), [r("P")], Type::int("B"));
        let subst = RoleSubst::new(
            &[r("A"), r("P"), r("B")],
            &[r("P"), r("B"), r("A")],
        )
        .unwrap();
        assert_eq!(
            subst_roles_type(&t, &subst),
            Type::arrow(Type::int("P"), [r("B")], Type::int("A"))
        );
    }

    #[test]
    fn role_substitution_on_com() {
        let subst = RoleSubst::new(&[r("S"), r("P")], &[r("P"), r("Q")]).unwrap();
        assert_eq!(subst_roles_term(&com("S", "P"), &subst), com("P", "Q"));
    }

    #[test]
    fn role_substitution_rejects_length_mismatch() {
        assert_eq!(
            RoleSubst::new(&[r("A")], &[r("B"), r("C")]).unwrap_err(),
            RoleSubstError::LengthMismatch { left: 1, right: 2 }
        );
    }

    #[test]
    fn identity_role_substitution_is_identity() {
        let t = Type::arrow(Type::int("A"), [r("P")], Type::int("B"));
        let subst = RoleSubst::new(&[r("A"), r("P")], &[r("A"), r("P")]).unwrap();
        assert_eq!(subst_roles_type(&t, &subst), t);
    }

    #[test]
    fn roles_of_term_includes_annotations() {
        let m = abs("x", Type::Unit(r("P")), unit("Q"));
        assert_eq!(roles_of_term(&m), BTreeSet::from([r("P"), r("Q")]));
    }

    #[test]
    fn sroles_of_com_and_call() {
        assert_eq!(sroles(&com("S", "R")), BTreeSet::from([r("S"), r("R")]));
        assert_eq!(sroles(&unit("R")), BTreeSet::new());
        let m = app(
            com("S", "R"),
            Term::Call {
                name: FuncName::new("f"),
                roles: vec![r("P"), r("Q")],
            },
        );
        assert_eq!(
            sroles(&m),
            BTreeSet::from([r("S"), r("R"), r("P"), r("Q")])
        );
    }

    #[test]
    fn com_is_a_value_applications_are_not() {
        assert!(is_value(&com("S", "R")));
        assert!(!is_value(&app(com("S", "R"), unit("S"))));
        assert!(!is_value(&Term::Sel {
            from: r("S"),
            to: r("R"),
            label: SelLabel::new("l"),
            cont: Box::new(unit("R")),
        }));
    }

    #[test]
    fn extern_partial_applications_are_values() {
        let ext = Term::Extern {
            name: FuncName::new("modPow"),
            at: r("R"),
            arity: 3,
        };
        let partial = apps(ext.clone(), [int_lit(2, "R"), int_lit(3, "R")]);
        assert!(is_value(&partial));
        let saturated = app(partial, int_lit(5, "R"));
        assert!(!is_value(&saturated));
    }

    #[test]
    fn alpha_eq_renames_binders() {
        let a = abs("x", Type::Unit(r("R")), var("x"));
        let b = abs("y", Type::Unit(r("R")), var("y"));
        assert!(alpha_eq(&a, &b));
        assert_eq!(alpha_canon(&a), alpha_canon(&b));
        let c = abs("y", Type::Unit(r("S")), var("y"));
        assert!(!alpha_eq(&a, &c));
    }

    #[test]
    fn fresh_names_use_reserved_prefix() {
        let v = fresh_var("x");
        assert!(v.as_str().starts_with('$'));
    }
}
