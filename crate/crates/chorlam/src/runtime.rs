//! The small-step semantics of choreographies.
//!
//! Steps are labelled with `τ` or `λ` plus a set of synchronising roles.
//! Out-of-order execution comes from three sources: congruence rules that
//! let independent subterms step (with side conditions keeping
//! communications between the same roles ordered), propagation of steps
//! through abstractions (`λ`-labels, converted back to `τ` at the
//! enclosing application), and a term-rewriting relation `⇝` that
//! reshuffles applications so that redexes at independent roles meet.
//!
//! The `⇝*` closure in the structural rule is bounded by `rewrite_fuel`
//! applications, explored breadth-first with alpha-deduplication; every
//! enabled step records the rewrite prefix that unlocked it.

use std::collections::{BTreeSet, HashMap, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ast::{
    self, alpha_canon, is_closed, is_value, roles_of_term, subst_roles_term, subst_var, BaseLit,
    Definitions, FuncName, LabelKind, Role, RoleSubst, Term, TransitionLabel, Var,
};
use crate::surface;

/// Reduction rule applied at the root of a step derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleTag {
    AppAbs,
    InAbs,
    App1,
    App2,
    App3,
    Case,
    InCase,
    CaseL,
    CaseR,
    Proj1,
    Proj2,
    Def,
    Com,
    Sel,
    InSel,
    Extern,
}

/// Rewriting rules (`⇝`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RewriteTag {
    AbsR,
    AbsL,
    CaseR,
    CaseL,
    SelR,
    SelL,
}

/// One enabled step: the transition label, the rule that derived it, the
/// rewrite prefix applied before it, and the resulting term.
#[derive(Debug, Clone, PartialEq)]
pub struct ChorStep {
    pub label: TransitionLabel,
    pub rule: RuleTag,
    pub rewrite_prefix: Vec<RewriteTag>,
    pub result: Term,
}

impl ChorStep {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "rule": format!("{:?}", self.rule),
            "label": {
                "kind": match self.label.kind { LabelKind::Tau => "tau", LabelKind::Lambda => "lambda" },
                "sync": self.label.sync.iter().map(|r| r.to_string()).collect::<Vec<_>>(),
            },
            "rewritePrefix": self.rewrite_prefix.iter().map(|t| format!("{t:?}")).collect::<Vec<_>>(),
            "term": surface::print_term(&self.result),
        })
    }
}

/// A replayable execution trace.
#[derive(Debug, Clone)]
pub struct Trace {
    pub initial: Term,
    pub steps: Vec<ChorStep>,
    pub final_term: Term,
    pub seed: Option<u64>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&step.to_json().to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum Outcome {
    Value(Term),
    Stuck(StuckReport),
    FuelExhausted,
}

/// A closed non-value with no enabled step. Reachable only from ill-typed
/// input (its occurrence on well-typed input is a progress violation).
#[derive(Debug, Clone)]
pub struct StuckReport {
    pub term: Term,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub trace: Trace,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scheduler {
    /// Lexicographically least enabled step (rule-tag order, then shortest
    /// rewrite prefix, then printed result) — reproducible from the AST.
    Deterministic,
    /// Uniform choice driven by the given seed.
    Seeded(u64),
}

pub const DEFAULT_FUEL: u64 = 10_000;
pub const DEFAULT_REWRITE_FUEL: usize = 32;
pub const DEFAULT_STATE_CAP: usize = 100_000;
const REWRITE_BALL_CAP: usize = 4_096;

// ---------------------------------------------------------------------------
// Extern evaluation
// ---------------------------------------------------------------------------

/// First-order values exchanged with extern evaluators.
#[derive(Debug, Clone, PartialEq)]
pub enum GroundValue {
    Int(i64),
    Str(String),
    Unit,
    Pair(Box<GroundValue>, Box<GroundValue>),
    Inl(Box<GroundValue>),
    Inr(Box<GroundValue>),
}

impl GroundValue {
    pub fn from_term(term: &Term) -> Result<GroundValue, String> {
        match term {
            Term::Lit {
                val: BaseLit::Int(n),
                ..
            } => Ok(GroundValue::Int(*n)),
            Term::Lit {
                val: BaseLit::Str(s),
                ..
            } => Ok(GroundValue::Str(s.clone())),
            Term::Unit(_) => Ok(GroundValue::Unit),
            Term::Pair(a, b) => Ok(GroundValue::Pair(
                Box::new(GroundValue::from_term(a)?),
                Box::new(GroundValue::from_term(b)?),
            )),
            Term::Inl(v) => Ok(GroundValue::Inl(Box::new(GroundValue::from_term(v)?))),
            Term::Inr(v) => Ok(GroundValue::Inr(Box::new(GroundValue::from_term(v)?))),
            other => Err(format!(
                "extern argument is not a first-order value: {}",
                surface::print_term(other)
            )),
        }
    }

    pub fn to_term(&self, at: &Role) -> Term {
        match self {
            GroundValue::Int(n) => ast::int_lit(*n, at.clone()),
            GroundValue::Str(s) => ast::str_lit(s.clone(), at.clone()),
            GroundValue::Unit => Term::Unit(at.clone()),
            GroundValue::Pair(a, b) => {
                Term::Pair(Box::new(a.to_term(at)), Box::new(b.to_term(at)))
            }
            GroundValue::Inl(v) => Term::Inl(Box::new(v.to_term(at))),
            GroundValue::Inr(v) => Term::Inr(Box::new(v.to_term(at))),
        }
    }
}

type ExternFn = fn(&[GroundValue]) -> Result<GroundValue, String>;

/// Pure local evaluators for declared externs, keyed by name. The same
/// table backs both the choreography runtime and the network simulator.
#[derive(Clone)]
pub struct ExternTable {
    fns: HashMap<FuncName, ExternFn>,
}

impl std::fmt::Debug for ExternTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternTable")
            .field("names", &self.fns.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn as_int(v: &GroundValue) -> Result<i64, String> {
    match v {
        GroundValue::Int(n) => Ok(*n),
        other => Err(format!("expected an integer, got {other:?}")),
    }
}

fn as_str(v: &GroundValue) -> Result<&str, String> {
    match v {
        GroundValue::Str(s) => Ok(s),
        other => Err(format!("expected a string, got {other:?}")),
    }
}

fn pow_mod(base: i64, exp: i64, modulus: i64) -> Result<i64, String> {
    if modulus <= 0 {
        return Err("modulus must be positive".into());
    }
    if exp < 0 {
        return Err("exponent must be non-negative".into());
    }
    let m = modulus as i128;
    let mut base = (base as i128).rem_euclid(m);
    let mut exp = exp as u64;
    let mut acc: i128 = 1 % m;
    while exp > 0 {
        if exp & 1 == 1 {
            acc = acc * base % m;
        }
        base = base * base % m;
        exp >>= 1;
    }
    Ok(acc as i64)
}

const CIPHER_SPAN: i64 = 95; // printable ASCII 32..=126

fn shift_text(s: &str, key: i64) -> String {
    let k = key.rem_euclid(CIPHER_SPAN) as u8;
    s.chars()
        .map(|c| {
            let b = c as u32;
            if (32..=126).contains(&b) {
                let shifted = (b as u8 - 32 + k) % CIPHER_SPAN as u8 + 32;
                shifted as char
            } else {
                c
            }
        })
        .collect()
}

fn toy_hash(salt: &str, text: &str) -> String {
    let mut acc: u64 = 1469598103934665603;
    for b in salt.bytes().chain("|".bytes()).chain(text.bytes()) {
        acc ^= b as u64;
        acc = acc.wrapping_mul(1099511628211);
    }
    format!("h{acc:016x}")
}

fn bool_value(b: bool) -> GroundValue {
    if b {
        GroundValue::Inl(Box::new(GroundValue::Unit))
    } else {
        GroundValue::Inr(Box::new(GroundValue::Unit))
    }
}

impl ExternTable {
    pub fn empty() -> ExternTable {
        ExternTable {
            fns: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<FuncName>, f: ExternFn) {
        self.fns.insert(name.into(), f);
    }

    pub fn contains(&self, name: &FuncName) -> bool {
        self.fns.contains_key(name)
    }

    pub fn eval(&self, name: &FuncName, args: &[GroundValue]) -> Result<GroundValue, String> {
        match self.fns.get(name) {
            Some(f) => f(args),
            None => Err(format!("no evaluator for extern {name}")),
        }
    }

    /// Evaluators for every extern the bundled corpus declares, plus a few
    /// small arithmetic helpers used in tests.
    pub fn standard() -> ExternTable {
        let mut t = ExternTable::empty();
        t.insert("square", |args| {
            let x = as_int(&args[0])?;
            Ok(GroundValue::Int(x * x))
        });
        t.insert("inc", |args| Ok(GroundValue::Int(as_int(&args[0])? + 1)));
        t.insert("modPowPrim", |args| {
            let base = as_int(&args[0])?;
            let exp = as_int(&args[1])?;
            let modulus = as_int(&args[2])?;
            Ok(GroundValue::Int(pow_mod(base, exp, modulus)?))
        });
        t.insert("encryptPrim", |args| {
            let key = as_int(&args[0])?;
            Ok(GroundValue::Str(shift_text(as_str(&args[1])?, key)))
        });
        t.insert("decryptPrim", |args| {
            let key = as_int(&args[0])?;
            Ok(GroundValue::Str(shift_text(as_str(&args[1])?, -key)))
        });
        t.insert("calcHashPrim", |args| {
            Ok(GroundValue::Str(toy_hash(as_str(&args[0])?, as_str(&args[1])?)))
        });
        t.insert("getSaltPrim", |args| {
            let _user = as_str(&args[0])?;
            Ok(GroundValue::Str("NaCl".into()))
        });
        t.insert("checkPrim", |args| {
            let _user = as_str(&args[0])?;
            let hash = as_str(&args[1])?;
            Ok(bool_value(hash == toy_hash("NaCl", "secret93")))
        });
        t.insert("createTokenPrim", |args| {
            Ok(GroundValue::Str(format!("tok:{}", as_str(&args[0])?)))
        });
        t.insert("getIdentityPrim", |args| {
            let _req = as_str(&args[0])?;
            Ok(GroundValue::Str("peer-7".into()))
        });
        t.insert("respondPrim", |args| {
            Ok(GroundValue::Str(format!("{}!ok", as_str(&args[0])?)))
        });
        t.insert("respondWeakPrim", |args| {
            Ok(GroundValue::Str(format!("{}?weak", as_str(&args[0])?)))
        });
        t.insert("verifyPrim", |args| {
            Ok(bool_value(as_str(&args[0])?.ends_with("!ok")))
        });
        t
    }
}

/// Everything a step needs besides the term: named definitions and extern
/// evaluators.
#[derive(Debug, Clone, Copy)]
pub struct RunEnv<'a> {
    pub defs: &'a Definitions,
    pub externs: &'a ExternTable,
}

// ---------------------------------------------------------------------------
// Rewriting
// ---------------------------------------------------------------------------

/// Rename the binder of an abstraction when it would capture the free
/// variables of `avoid`.
fn freshen_abs(param: &Var, body: &Term, avoid: &BTreeSet<Var>) -> (Var, Term) {
    if avoid.contains(param) {
        let fresh = ast::fresh_var(param.as_str());
        let body = subst_var(body, param, &ast::var(fresh.clone()));
        (fresh, body)
    } else {
        (param.clone(), body.clone())
    }
}

/// All single `⇝` rewrites available at the root of the term. Binders are
/// alpha-renamed on demand, so the variable side conditions never block a
/// rewrite that an alpha-variant would allow.
fn root_rewrites(term: &Term) -> Vec<(RewriteTag, Term)> {
    let mut out = Vec::new();
    if let Term::App { func, arg } = term {
        let outer_arg = arg;
        // AbsR: ((fun x. M) N) M'  ⇝  (fun x. M M') N
        if let Term::App {
            func: inner_func,
            arg: inner_arg,
        } = func.as_ref()
        {
            if let Term::Abs { param, annot, body } = inner_func.as_ref() {
                let avoid = ast::free_vars(outer_arg);
                let (param, body) = freshen_abs(param, body, &avoid);
                out.push((
                    RewriteTag::AbsR,
                    ast::app(
                        ast::abs(param, annot.clone(), ast::app(body, (**outer_arg).clone())),
                        (**inner_arg).clone(),
                    ),
                ));
            }
            // SelR: (select[S,R] l; N) M  ⇝  select[S,R] l; (N M)
        }
        if let Term::Sel {
            from,
            to,
            label,
            cont,
        } = func.as_ref()
        {
            out.push((
                RewriteTag::SelR,
                Term::Sel {
                    from: from.clone(),
                    to: to.clone(),
                    label: label.clone(),
                    cont: Box::new(ast::app((**cont).clone(), (**outer_arg).clone())),
                },
            ));
        }
        // CaseR: (case N of inl x => M1 | inr x' => M2) M
        //        ⇝ case N of inl x => M1 M | inr x' => M2 M
        if let Term::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } = func.as_ref()
        {
            let avoid = ast::free_vars(outer_arg);
            let (left_var, left) = freshen_abs(left_var, left, &avoid);
            let (right_var, right) = freshen_abs(right_var, right, &avoid);
            out.push((
                RewriteTag::CaseR,
                Term::Case {
                    scrut: scrut.clone(),
                    left_var,
                    left: Box::new(ast::app(left, (**outer_arg).clone())),
                    right_var,
                    right: Box::new(ast::app(right, (**outer_arg).clone())),
                },
            ));
        }
        // Left variants: pull the function side inward. These require the
        // function side not to synchronise with roles of the moved-over term.
        match arg.as_ref() {
            Term::App {
                func: inner_func,
                arg: inner_arg,
            } => {
                if let Term::Abs { param, annot, body } = inner_func.as_ref() {
                    if ast::sroles(func)
                        .intersection(&roles_of_term(inner_arg))
                        .next()
                        .is_none()
                    {
                        let avoid = ast::free_vars(func);
                        let (param, body) = freshen_abs(param, body, &avoid);
                        out.push((
                            RewriteTag::AbsL,
                            ast::app(
                                ast::abs(
                                    param,
                                    annot.clone(),
                                    ast::app((**func).clone(), body),
                                ),
                                (**inner_arg).clone(),
                            ),
                        ));
                    }
                }
            }
            Term::Sel {
                from,
                to,
                label,
                cont,
            } => {
                if ast::sroles(func)
                    .intersection(&roles_of_term(cont))
                    .next()
                    .is_none()
                {
                    out.push((
                        RewriteTag::SelL,
                        Term::Sel {
                            from: from.clone(),
                            to: to.clone(),
                            label: label.clone(),
                            cont: Box::new(ast::app((**func).clone(), (**cont).clone())),
                        },
                    ));
                }
            }
            Term::Case {
                scrut,
                left_var,
                left,
                right_var,
                right,
            } => {
                if ast::sroles(func)
                    .intersection(&roles_of_term(scrut))
                    .next()
                    .is_none()
                {
                    let avoid = ast::free_vars(func);
                    let (left_var, left) = freshen_abs(left_var, left, &avoid);
                    let (right_var, right) = freshen_abs(right_var, right, &avoid);
                    out.push((
                        RewriteTag::CaseL,
                        Term::Case {
                            scrut: scrut.clone(),
                            left_var,
                            left: Box::new(ast::app((**func).clone(), left)),
                            right_var,
                            right: Box::new(ast::app((**func).clone(), right)),
                        },
                    ));
                }
            }
            _ => {}
        }
    }
    out
}

/// All single `⇝` steps at any subterm position.
pub fn rewrites_one(term: &Term) -> Vec<(RewriteTag, Term)> {
    let mut out = root_rewrites(term);
    let push_child =
        |out: &mut Vec<(RewriteTag, Term)>, child: &Term, rebuild: &dyn Fn(Term) -> Term| {
            for (tag, rewritten) in rewrites_one(child) {
                out.push((tag, rebuild(rewritten)));
            }
        };
    match term {
        Term::App { func, arg } => {
            push_child(&mut out, func, &|f| ast::app(f, (**arg).clone()));
            push_child(&mut out, arg, &|a| ast::app((**func).clone(), a));
        }
        Term::Abs { param, annot, body } => {
            push_child(&mut out, body, &|b| ast::abs(param.clone(), annot.clone(), b));
        }
        Term::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            let rebuild = |s: Term, l: Term, r: Term| Term::Case {
                scrut: Box::new(s),
                left_var: left_var.clone(),
                left: Box::new(l),
                right_var: right_var.clone(),
                right: Box::new(r),
            };
            push_child(&mut out, scrut, &|s| {
                rebuild(s, (**left).clone(), (**right).clone())
            });
            push_child(&mut out, left, &|l| {
                rebuild((**scrut).clone(), l, (**right).clone())
            });
            push_child(&mut out, right, &|r| {
                rebuild((**scrut).clone(), (**left).clone(), r)
            });
        }
        Term::Sel {
            from,
            to,
            label,
            cont,
        } => {
            push_child(&mut out, cont, &|c| Term::Sel {
                from: from.clone(),
                to: to.clone(),
                label: label.clone(),
                cont: Box::new(c),
            });
        }
        Term::Inl(v) => push_child(&mut out, v, &|v| Term::Inl(Box::new(v))),
        Term::Inr(v) => push_child(&mut out, v, &|v| Term::Inr(Box::new(v))),
        Term::Pair(a, b) => {
            push_child(&mut out, a, &|a| {
                Term::Pair(Box::new(a), Box::new((**b).clone()))
            });
            push_child(&mut out, b, &|b| {
                Term::Pair(Box::new((**a).clone()), Box::new(b))
            });
        }
        _ => {}
    }
    // deduplicate alpha-equal results with the same tag
    let mut seen = HashSet::new();
    out.retain(|(tag, t)| seen.insert((*tag, alpha_canon(t))));
    out
}

/// The `⇝*` ball around a term, bounded by `fuel` rewrite applications and
/// explored breadth-first with alpha-deduplication. Each node keeps the
/// shortest rewrite prefix reaching it.
pub struct RewriteBall {
    pub nodes: Vec<(Vec<RewriteTag>, Term)>,
    pub truncated: bool,
}

pub fn rewrite_ball(term: &Term, fuel: usize) -> RewriteBall {
    let mut nodes = vec![(Vec::new(), term.clone())];
    let mut seen: HashSet<Term> = HashSet::from([alpha_canon(term)]);
    let mut queue: VecDeque<usize> = VecDeque::from([0]);
    let mut truncated = false;
    while let Some(idx) = queue.pop_front() {
        let (prefix, current) = nodes[idx].clone();
        if prefix.len() >= fuel {
            continue;
        }
        for (tag, next) in rewrites_one(&current) {
            if nodes.len() >= REWRITE_BALL_CAP {
                truncated = true;
                break;
            }
            let canon = alpha_canon(&next);
            if seen.insert(canon) {
                let mut next_prefix = prefix.clone();
                next_prefix.push(tag);
                nodes.push((next_prefix, next));
                queue.push_back(nodes.len() - 1);
            }
        }
        if truncated {
            break;
        }
    }
    RewriteBall { nodes, truncated }
}

// ---------------------------------------------------------------------------
// Steps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct RawStep {
    kind: LabelKind,
    sync: BTreeSet<Role>,
    rule: RuleTag,
    result: Term,
}

/// All steps derivable without the structural (rewrite-closure) rule.
/// `λ`-labelled steps appear here so that applications can consume them.
fn direct_steps(term: &Term, env: &RunEnv) -> Vec<RawStep> {
    let mut out = Vec::new();
    match term {
        Term::App { func, arg } => {
            // AppAbs
            if let Term::Abs { param, body, .. } = func.as_ref() {
                if is_value(arg) {
                    out.push(RawStep {
                        kind: LabelKind::Tau,
                        sync: BTreeSet::new(),
                        rule: RuleTag::AppAbs,
                        result: subst_var(body, param, arg),
                    });
                }
            }
            // Com
            if let Term::Com { from, to } = func.as_ref() {
                if is_value(arg) && is_closed(arg) {
                    out.push(RawStep {
                        kind: LabelKind::Tau,
                        sync: BTreeSet::from([from.clone(), to.clone()]),
                        rule: RuleTag::Com,
                        result: subst_roles_term(arg, &RoleSubst::single(from, to)),
                    });
                }
            }
            // Proj1 / Proj2
            if matches!(func.as_ref(), Term::Fst | Term::Snd) {
                if let Term::Pair(a, b) = arg.as_ref() {
                    if is_value(a) && is_value(b) {
                        let (rule, result) = if matches!(func.as_ref(), Term::Fst) {
                            (RuleTag::Proj1, (**a).clone())
                        } else {
                            (RuleTag::Proj2, (**b).clone())
                        };
                        out.push(RawStep {
                            kind: LabelKind::Tau,
                            sync: BTreeSet::new(),
                            rule,
                            result,
                        });
                    }
                }
            }
            // saturated extern application
            if let Some((name, at, arity, args)) = ast::extern_spine(term) {
                if args.len() == arity
                    && args.iter().all(|a| is_value(a) && is_closed(a))
                {
                    let ground: Result<Vec<_>, _> =
                        args.iter().map(|a| GroundValue::from_term(a)).collect();
                    if let Ok(ground) = ground {
                        if let Ok(result) = env.externs.eval(name, &ground) {
                            out.push(RawStep {
                                kind: LabelKind::Tau,
                                sync: BTreeSet::new(),
                                rule: RuleTag::Extern,
                                result: result.to_term(at),
                            });
                        }
                    }
                }
            }
            // App1: any premise label; λ requires disjointness from the argument
            for step in direct_steps(func, env) {
                if step.kind == LabelKind::Lambda
                    && step.sync.intersection(&roles_of_term(arg)).next().is_some()
                {
                    continue;
                }
                out.push(RawStep {
                    kind: LabelKind::Tau,
                    sync: step.sync,
                    rule: RuleTag::App1,
                    result: ast::app(step.result, (**arg).clone()),
                });
            }
            // App2: value on the left, τ premise
            if is_value(func) {
                for step in direct_steps(arg, env) {
                    if step.kind == LabelKind::Tau {
                        out.push(RawStep {
                            kind: LabelKind::Tau,
                            sync: step.sync,
                            rule: RuleTag::App2,
                            result: ast::app((**func).clone(), step.result),
                        });
                    }
                }
            }
            // App3: τ premise, sync roles disjoint from the function side
            let func_roles = roles_of_term(func);
            for step in direct_steps(arg, env) {
                if step.kind == LabelKind::Tau
                    && step.sync.intersection(&func_roles).next().is_none()
                {
                    out.push(RawStep {
                        kind: LabelKind::Tau,
                        sync: step.sync,
                        rule: RuleTag::App3,
                        result: ast::app((**func).clone(), step.result),
                    });
                }
            }
        }
        Term::Abs { param, annot, body } => {
            for step in direct_steps(body, env) {
                out.push(RawStep {
                    kind: LabelKind::Lambda,
                    sync: step.sync,
                    rule: RuleTag::InAbs,
                    result: ast::abs(param.clone(), annot.clone(), step.result),
                });
            }
        }
        Term::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            match scrut.as_ref() {
                Term::Inl(v) if is_value(v) => out.push(RawStep {
                    kind: LabelKind::Tau,
                    sync: BTreeSet::new(),
                    rule: RuleTag::CaseL,
                    result: subst_var(left, left_var, v),
                }),
                Term::Inr(v) if is_value(v) => out.push(RawStep {
                    kind: LabelKind::Tau,
                    sync: BTreeSet::new(),
                    rule: RuleTag::CaseR,
                    result: subst_var(right, right_var, v),
                }),
                _ => {}
            }
            let rebuild = |s: Term, l: Term, r: Term| Term::Case {
                scrut: Box::new(s),
                left_var: left_var.clone(),
                left: Box::new(l),
                right_var: right_var.clone(),
                right: Box::new(r),
            };
            for step in direct_steps(scrut, env) {
                if step.kind == LabelKind::Tau {
                    out.push(RawStep {
                        kind: LabelKind::Tau,
                        sync: step.sync,
                        rule: RuleTag::Case,
                        result: rebuild(step.result, (**left).clone(), (**right).clone()),
                    });
                }
            }
            // InCase: both branches step together with the same label
            let scrut_roles = roles_of_term(scrut);
            let left_steps = direct_steps(left, env);
            let right_steps = direct_steps(right, env);
            for ls in &left_steps {
                if ls.sync.intersection(&scrut_roles).next().is_some() {
                    continue;
                }
                for rs in &right_steps {
                    if ls.kind == rs.kind && ls.sync == rs.sync {
                        out.push(RawStep {
                            kind: ls.kind,
                            sync: ls.sync.clone(),
                            rule: RuleTag::InCase,
                            result: rebuild(
                                (**scrut).clone(),
                                ls.result.clone(),
                                rs.result.clone(),
                            ),
                        });
                    }
                }
            }
        }
        Term::Sel {
            from,
            to,
            label,
            cont,
        } => {
            out.push(RawStep {
                kind: LabelKind::Tau,
                sync: BTreeSet::from([from.clone(), to.clone()]),
                rule: RuleTag::Sel,
                result: (**cont).clone(),
            });
            let guard: BTreeSet<Role> = BTreeSet::from([from.clone(), to.clone()]);
            for step in direct_steps(cont, env) {
                if step.sync.intersection(&guard).next().is_none() {
                    out.push(RawStep {
                        kind: step.kind,
                        sync: step.sync,
                        rule: RuleTag::InSel,
                        result: Term::Sel {
                            from: from.clone(),
                            to: to.clone(),
                            label: label.clone(),
                            cont: Box::new(step.result),
                        },
                    });
                }
            }
        }
        Term::Call { name, roles } => {
            if let Some((params, body)) = env.defs.body(name) {
                if let Ok(subst) = RoleSubst::new(params, roles) {
                    out.push(RawStep {
                        kind: LabelKind::Tau,
                        sync: BTreeSet::new(),
                        rule: RuleTag::Def,
                        result: subst_roles_term(body, &subst),
                    });
                }
            }
        }
        _ => {}
    }
    out
}

/// Every step derivable from the semantics, with the structural premise
/// `M ⇝* N` bounded by `rewrite_fuel`. Only `τ`-labelled roots are public:
/// `λ`-labels exist solely as premises of the congruence rules.
pub fn enabled_steps(term: &Term, env: &RunEnv, rewrite_fuel: usize) -> Vec<ChorStep> {
    let ball = rewrite_ball(term, rewrite_fuel);
    collect_steps(ball.nodes.iter(), env)
}

/// Steps found in the earliest rewrite layer that has any: explores the
/// `⇝*` ball breadth-first and stops as soon as a layer yields a step.
/// Equivalent to [`enabled_steps`] for emptiness (used by the schedulers,
/// which may sample from any fixed subset of the enabled steps).
pub fn enabled_steps_lazy(term: &Term, env: &RunEnv, rewrite_fuel: usize) -> Vec<ChorStep> {
    let mut layer: Vec<(Vec<RewriteTag>, Term)> = vec![(Vec::new(), term.clone())];
    let mut seen: HashSet<Term> = HashSet::from([alpha_canon(term)]);
    let mut total = 1usize;
    for _ in 0..=rewrite_fuel {
        let steps = collect_steps(layer.iter(), env);
        if !steps.is_empty() {
            return steps;
        }
        let mut next = Vec::new();
        for (prefix, node) in &layer {
            for (tag, rewritten) in rewrites_one(node) {
                if total >= REWRITE_BALL_CAP {
                    break;
                }
                if seen.insert(alpha_canon(&rewritten)) {
                    let mut p = prefix.clone();
                    p.push(tag);
                    next.push((p, rewritten));
                    total += 1;
                }
            }
        }
        if next.is_empty() {
            break;
        }
        layer = next;
    }
    Vec::new()
}

fn collect_steps<'a>(
    nodes: impl Iterator<Item = &'a (Vec<RewriteTag>, Term)>,
    env: &RunEnv,
) -> Vec<ChorStep> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (prefix, node) in nodes {
        for step in direct_steps(node, env) {
            if step.kind != LabelKind::Tau {
                continue;
            }
            let key = (step.rule, step.sync.clone(), alpha_canon(&step.result));
            if seen.insert(key) {
                out.push(ChorStep {
                    label: TransitionLabel {
                        kind: LabelKind::Tau,
                        sync: step.sync,
                    },
                    rule: step.rule,
                    rewrite_prefix: prefix.clone(),
                    result: step.result,
                });
            }
        }
    }
    out
}

fn step_sort_key(step: &ChorStep) -> (RuleTag, usize, Vec<RewriteTag>, String) {
    (
        step.rule,
        step.rewrite_prefix.len(),
        step.rewrite_prefix.clone(),
        surface::print_term(&alpha_canon(&step.result)),
    )
}

/// Run a closed choreography under the given scheduler.
pub fn run(
    term: &Term,
    env: &RunEnv,
    scheduler: Scheduler,
    fuel: u64,
    rewrite_fuel: usize,
) -> RunResult {
    let mut rng = match scheduler {
        Scheduler::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
        Scheduler::Deterministic => None,
    };
    let mut current = term.clone();
    let mut steps = Vec::new();
    for _ in 0..fuel {
        if is_value(&current) {
            return RunResult {
                trace: Trace {
                    initial: term.clone(),
                    steps,
                    final_term: current.clone(),
                    seed: scheduler_seed(scheduler),
                },
                outcome: Outcome::Value(current),
            };
        }
        let mut enabled = enabled_steps_lazy(&current, env, rewrite_fuel);
        if enabled.is_empty() {
            return RunResult {
                trace: Trace {
                    initial: term.clone(),
                    steps,
                    final_term: current.clone(),
                    seed: scheduler_seed(scheduler),
                },
                outcome: Outcome::Stuck(StuckReport { term: current }),
            };
        }
        enabled.sort_by_key(step_sort_key);
        let chosen = match &mut rng {
            None => enabled.swap_remove(0),
            Some(rng) => {
                let idx = rng.gen_range(0..enabled.len());
                enabled.swap_remove(idx)
            }
        };
        current = chosen.result.clone();
        steps.push(chosen);
    }
    RunResult {
        trace: Trace {
            initial: term.clone(),
            steps,
            final_term: current.clone(),
            seed: scheduler_seed(scheduler),
        },
        outcome: Outcome::FuelExhausted,
    }
}

fn scheduler_seed(s: Scheduler) -> Option<u64> {
    match s {
        Scheduler::Seeded(seed) => Some(seed),
        Scheduler::Deterministic => None,
    }
}

/// The bounded exhaustive step graph: states are alpha-distinct terms.
#[derive(Debug, Clone)]
pub struct StepGraph {
    pub states: Vec<Term>,
    pub edges: Vec<(usize, ChorStep, usize)>,
    pub truncated: bool,
}

impl StepGraph {
    pub fn state_index(&self, term: &Term) -> Option<usize> {
        let canon = alpha_canon(term);
        self.states.iter().position(|s| alpha_canon(s) == canon)
    }
}

/// Explore all reachable states up to `depth` steps, capping the total
/// state count; truncation is reported explicitly.
pub fn explore(
    term: &Term,
    env: &RunEnv,
    rewrite_fuel: usize,
    depth: usize,
    state_cap: usize,
) -> StepGraph {
    let mut states = vec![term.clone()];
    let mut index: HashMap<Term, usize> = HashMap::from([(alpha_canon(term), 0)]);
    let mut depths = vec![0usize];
    let mut edges = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    let mut truncated = false;
    while let Some(i) = queue.pop_front() {
        if depths[i] >= depth {
            continue;
        }
        let current = states[i].clone();
        for step in enabled_steps(&current, env, rewrite_fuel) {
            let canon = alpha_canon(&step.result);
            let j = match index.get(&canon) {
                Some(&j) => j,
                None => {
                    if states.len() >= state_cap {
                        truncated = true;
                        continue;
                    }
                    let j = states.len();
                    states.push(step.result.clone());
                    depths.push(depths[i] + 1);
                    index.insert(canon, j);
                    queue.push_back(j);
                    j
                }
            };
            edges.push((i, step, j));
        }
    }
    StepGraph {
        states,
        edges,
        truncated,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{abs, app, com, int_lit, unit, var, Type};

    fn env_of(defs: &Definitions, externs: &ExternTable) -> (Definitions, ExternTable) {
        (defs.clone(), externs.clone())
    }

    fn empty_env() -> (Definitions, ExternTable) {
        (Definitions::default(), ExternTable::standard())
    }

    fn call(name: &str, roles: &[&str]) -> Term {
        Term::Call {
            name: FuncName::new(name),
            roles: roles.iter().map(|r| Role::new(*r)).collect(),
        }
    }

    #[test]
    fn rewriting_pulls_the_inner_application_out() {
        // ((fun x:Unit@R. fun y:Unit@S. ()@S) f(R)) ()@S
        //   ⇝ (fun x:Unit@R. (fun y:Unit@S. ()@S) ()@S) f(R)   by AbsR
        let inner = abs("y", Type::Unit(Role::new("S")), unit("S"));
        let outer = abs("x", Type::Unit(Role::new("R")), inner.clone());
        let m = app(app(outer, call("f", &["R"])), unit("S"));
        let rewrites = rewrites_one(&m);
        let expected = app(
            abs(
                "x",
                Type::Unit(Role::new("R")),
                app(inner, unit("S")),
            ),
            call("f", &["R"]),
        );
        assert!(rewrites
            .iter()
            .any(|(tag, t)| *tag == RewriteTag::AbsR && ast::alpha_eq(t, &expected)));
    }

    #[test]
    fn rewriting_does_not_cross_matching_synchronisations() {
        // (com[S,R] ()@S) ((fun x:Unit@R. ()@R) (com[S,R] ()@S)) must not
        // rewrite with AbsL: the left side synchronises on {S,R} which
        // intersects the roles of the abstraction's argument.
        let left = app(com("S", "R"), unit("S"));
        let lam = abs("x", Type::Unit(Role::new("R")), unit("R"));
        let m = app(left, app(lam, app(com("S", "R"), unit("S"))));
        assert!(rewrites_one(&m)
            .iter()
            .all(|(tag, _)| *tag != RewriteTag::AbsL));
    }

    #[test]
    fn values_have_no_rewrites_or_steps() {
        let v = Term::Pair(Box::new(unit("A")), Box::new(unit("B")));
        assert!(rewrites_one(&v).is_empty());
        let (defs, externs) = empty_env();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        assert!(enabled_steps(&v, &env, 4).is_empty());
    }

    #[test]
    fn beta_step_is_silent() {
        let (defs, externs) = empty_env();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let m = app(abs("x", Type::Unit(Role::new("R")), var("x")), unit("R"));
        let steps = enabled_steps(&m, &env, 4);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].rule, RuleTag::AppAbs);
        assert_eq!(steps[0].label, TransitionLabel::silent());
        assert_eq!(steps[0].result, unit("R"));
    }

    #[test]
    fn communication_step_carries_both_roles_and_moves_the_value() {
        let (defs, externs) = empty_env();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let m = app(com("A", "B"), int_lit(5, "A"));
        let steps = enabled_steps(&m, &env, 4);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].rule, RuleTag::Com);
        assert_eq!(
            steps[0].label,
            TransitionLabel::tau([Role::new("A"), Role::new("B")])
        );
        assert_eq!(steps[0].result, int_lit(5, "B"));
    }

    #[test]
    fn inner_redex_fires_past_an_unevaluated_function_side() {
        // f(S) ((fun x:Unit@R. ()@S) ()@R): the inner application is at R
        // only and must be able to step even though f(S) has not run.
        let mut defs = Definitions::default();
        defs.bodies.insert(
            FuncName::new("f"),
            (vec![Role::new("Z")], call("f", &["Z"])),
        );
        let externs = ExternTable::standard();
        let (defs, externs) = env_of(&defs, &externs);
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let inner = app(abs("x", Type::Unit(Role::new("R")), unit("S")), unit("R"));
        let m = app(call("f", &["S"]), inner);
        let steps = enabled_steps(&m, &env, 4);
        assert!(steps
            .iter()
            .any(|s| s.rule == RuleTag::App3
                && ast::alpha_eq(&s.result, &app(call("f", &["S"]), unit("S")))));
    }

    #[test]
    fn communications_between_the_same_pair_stay_ordered() {
        // (fun x:Unit@R. com[S,R] ()@S) (com[S,R] ()@S): only the outer
        // (argument) communication may fire; the one under the abstraction
        // is blocked by the λ-label side condition.
        let (defs, externs) = empty_env();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let m = app(
            abs(
                "x",
                Type::Unit(Role::new("R")),
                app(com("S", "R"), unit("S")),
            ),
            app(com("S", "R"), unit("S")),
        );
        let graph = explore(&m, &env, DEFAULT_REWRITE_FUEL, 10, 1000);
        assert!(!graph.truncated);
        for state in &graph.states {
            let comms: Vec<_> = enabled_steps(state, &env, DEFAULT_REWRITE_FUEL)
                .into_iter()
                .filter(|s| !s.label.sync.is_empty())
                .collect();
            assert!(
                comms.len() <= 1,
                "more than one communication enabled in {}",
                surface::print_term(state)
            );
        }
    }

    #[test]
    fn saturated_extern_applications_evaluate() {
        let (defs, externs) = empty_env();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let ext = Term::Extern {
            name: FuncName::new("modPowPrim"),
            at: Role::new("P"),
            arity: 3,
        };
        let m = ast::apps(
            ext,
            [int_lit(5, "P"), int_lit(3, "P"), int_lit(23, "P")],
        );
        let steps = enabled_steps(&m, &env, 4);
        assert_eq!(steps.len(), 1);
        assert_eq!(steps[0].rule, RuleTag::Extern);
        assert_eq!(steps[0].result, int_lit(125 % 23, "P"));
    }

    #[test]
    fn run_returns_value_immediately_for_values() {
        let (defs, externs) = empty_env();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let result = run(&unit("R"), &env, Scheduler::Deterministic, 100, 4);
        assert!(matches!(result.outcome, Outcome::Value(_)));
        assert!(result.trace.steps.is_empty());
    }

    #[test]
    fn diverging_definition_exhausts_fuel() {
        let mut defs = Definitions::default();
        defs.bodies.insert(
            FuncName::new("loop"),
            (vec![Role::new("Z")], call("loop", &["Z"])),
        );
        let externs = ExternTable::standard();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let result = run(&call("loop", &["R"]), &env, Scheduler::Deterministic, 50, 4);
        assert!(matches!(result.outcome, Outcome::FuelExhausted));
    }

    #[test]
    fn deterministic_and_seeded_runs_agree_on_confluent_terms() {
        let (defs, externs) = empty_env();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let m = app(
            com("B", "C"),
            app(com("A", "B"), int_lit(7, "A")),
        );
        let det = run(&m, &env, Scheduler::Deterministic, 100, 8);
        let Outcome::Value(det_val) = det.outcome else {
            panic!("expected a value");
        };
        for seed in 0..5 {
            let seeded = run(&m, &env, Scheduler::Seeded(seed), 100, 8);
            let Outcome::Value(v) = seeded.outcome else {
                panic!("expected a value");
            };
            assert!(ast::alpha_eq(&det_val, &v));
        }
        assert_eq!(det_val, int_lit(7, "C"));
    }

    #[test]
    fn trace_steps_replay_to_the_final_term() {
        let (defs, externs) = empty_env();
        let env = RunEnv {
            defs: &defs,
            externs: &externs,
        };
        let m = app(
            abs("x", Type::int("A"), app(com("A", "B"), var("x"))),
            int_lit(3, "A"),
        );
        let result = run(&m, &env, Scheduler::Deterministic, 100, 8);
        let Outcome::Value(v) = &result.outcome else {
            panic!("expected value");
        };
        assert_eq!(result.trace.steps.last().unwrap().result, *v);
        assert_eq!(*v, int_lit(3, "B"));
    }
}
