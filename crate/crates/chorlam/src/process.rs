//! The target language of projection: behaviours, local types, local
//! rewriting, behaviour-level labelled transitions, local typing, and the
//! network semantics with rendezvous communication.
//!
//! A behaviour is the code of one role. Communication splits into
//! `send[R]` / `recv[R]`, selection into `choice[R] l; B` (internal) and
//! `offer[R]{l1: B1 | ...}` (external). `Bot` (`⊥`) is the residue of a
//! choreographic fragment the role does not participate in: it is a value,
//! `Bot Bot` rewrites to `Bot`, and it has its own local type.
//!
//! A network is a finite map from roles to behaviours; it steps either by
//! a single role's `τ` or by a two-role rendezvous matching a send with a
//! receive (the transported value has the sender substituted by the
//! receiver) or a choice with an offer.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};

use thiserror::Error;

use crate::ast::{self, BaseLit, BaseTy, FuncName, Role, SelLabel, TypeName, Var};
use crate::runtime::{ExternTable, GroundValue};

/// Local process terms.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Behaviour {
    Var(Var),
    Abs {
        param: Var,
        annot: LocalType,
        body: Box<Behaviour>,
    },
    App(Box<Behaviour>, Box<Behaviour>),
    Case {
        scrut: Box<Behaviour>,
        left_var: Var,
        left: Box<Behaviour>,
        right_var: Var,
        right: Box<Behaviour>,
    },
    /// `choice[R] l; B` — tell R that branch `l` was chosen.
    Choice {
        to: Role,
        label: SelLabel,
        cont: Box<Behaviour>,
    },
    /// `offer[R]{ l1: B1 | ... }` — wait for R to choose a branch.
    Offer {
        from: Role,
        branches: BTreeMap<SelLabel, Behaviour>,
    },
    Inl(Box<Behaviour>),
    Inr(Box<Behaviour>),
    Pair(Box<Behaviour>, Box<Behaviour>),
    Fst,
    Snd,
    Unit,
    Send {
        to: Role,
    },
    Recv {
        from: Role,
    },
    Bot,
    /// Residual projected definition `f_i(remaining roles)`.
    Call {
        name: FuncName,
        roles: Vec<Role>,
    },
    Lit(BaseLit),
    Extern {
        name: FuncName,
        arity: usize,
    },
}

/// Local types: role-free, with `Bot` for absent fragments and `t_i`
/// for position `i` of a recursive type `t@(R1,...,Rn)`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LocalType {
    Arrow(Box<LocalType>, Box<LocalType>),
    Sum(Box<LocalType>, Box<LocalType>),
    Prod(Box<LocalType>, Box<LocalType>),
    Unit,
    Bot,
    Base(BaseTy),
    Var { name: TypeName, index: usize },
}

/// A finite map from roles to behaviours.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Network {
    pub procs: BTreeMap<Role, Behaviour>,
}

impl Network {
    pub fn new(procs: impl IntoIterator<Item = (Role, Behaviour)>) -> Network {
        Network {
            procs: procs.into_iter().collect(),
        }
    }

    pub fn is_terminal(&self) -> bool {
        self.procs.values().all(is_local_value)
    }

    pub fn print(&self) -> String {
        self.procs
            .iter()
            .map(|(r, b)| format!("{r}[{}]", print_behaviour(b)))
            .collect::<Vec<_>>()
            .join(" | ")
    }
}

/// Projected definitions: residual name to residual role parameters and body.
pub type ProjectedDefs = BTreeMap<FuncName, (Vec<Role>, Behaviour)>;

/// Environment for running behaviours: projected definitions and the same
/// extern evaluators as the choreography runtime.
#[derive(Debug, Clone, Copy)]
pub struct NetEnv<'a> {
    pub defs: &'a ProjectedDefs,
    pub externs: &'a ExternTable,
}

pub fn bx(b: Behaviour) -> Box<Behaviour> {
    Box::new(b)
}

pub fn lapp(f: Behaviour, a: Behaviour) -> Behaviour {
    Behaviour::App(bx(f), bx(a))
}

pub fn labs(param: impl Into<Var>, annot: LocalType, body: Behaviour) -> Behaviour {
    Behaviour::Abs {
        param: param.into(),
        annot,
        body: bx(body),
    }
}

/// The local value grammar `L`. `Bot` is a value; partial applications of
/// externs are values exactly as in the choreography layer.
pub fn is_local_value(b: &Behaviour) -> bool {
    match b {
        Behaviour::Var(_)
        | Behaviour::Abs { .. }
        | Behaviour::Fst
        | Behaviour::Snd
        | Behaviour::Unit
        | Behaviour::Send { .. }
        | Behaviour::Recv { .. }
        | Behaviour::Bot
        | Behaviour::Lit(_)
        | Behaviour::Extern { .. } => true,
        Behaviour::Inl(v) | Behaviour::Inr(v) => is_local_value(v),
        Behaviour::Pair(a, b) => is_local_value(a) && is_local_value(b),
        Behaviour::App { .. } => extern_partial(b).is_some(),
        Behaviour::Case { .. }
        | Behaviour::Choice { .. }
        | Behaviour::Offer { .. }
        | Behaviour::Call { .. } => false,
    }
}

fn extern_spine(b: &Behaviour) -> Option<(&FuncName, usize, Vec<&Behaviour>)> {
    let mut args = Vec::new();
    let mut cur = b;
    loop {
        match cur {
            Behaviour::App(f, a) => {
                args.push(a.as_ref());
                cur = f;
            }
            Behaviour::Extern { name, arity } => {
                args.reverse();
                return Some((name, *arity, args));
            }
            _ => return None,
        }
    }
}

fn extern_partial(b: &Behaviour) -> Option<()> {
    let (_, arity, args) = extern_spine(b)?;
    (args.len() < arity && args.iter().all(|a| is_local_value(a))).then_some(())
}

/// Roles mentioned by a behaviour: send/recv/offer/choice partners and
/// residual call arguments.
pub fn roles_of_behaviour(b: &Behaviour) -> BTreeSet<Role> {
    let mut out = BTreeSet::new();
    fn go(b: &Behaviour, out: &mut BTreeSet<Role>) {
        match b {
            Behaviour::Send { to } | Behaviour::Recv { from: to } => {
                out.insert(to.clone());
            }
            Behaviour::Choice { to, cont, .. } => {
                out.insert(to.clone());
                go(cont, out);
            }
            Behaviour::Offer { from, branches } => {
                out.insert(from.clone());
                for b in branches.values() {
                    go(b, out);
                }
            }
            Behaviour::Call { roles, .. } => out.extend(roles.iter().cloned()),
            Behaviour::Abs { body, .. } => go(body, out),
            Behaviour::App(f, a) => {
                go(f, out);
                go(a, out);
            }
            Behaviour::Case {
                scrut, left, right, ..
            } => {
                go(scrut, out);
                go(left, out);
                go(right, out);
            }
            Behaviour::Inl(v) | Behaviour::Inr(v) => go(v, out),
            Behaviour::Pair(a, b) => {
                go(a, out);
                go(b, out);
            }
            _ => {}
        }
    }
    go(b, &mut out);
    out
}

pub fn free_vars_b(b: &Behaviour) -> BTreeSet<Var> {
    fn go(b: &Behaviour, bound: &mut Vec<Var>, out: &mut BTreeSet<Var>) {
        match b {
            Behaviour::Var(x) => {
                if !bound.contains(x) {
                    out.insert(x.clone());
                }
            }
            Behaviour::Abs { param, body, .. } => {
                bound.push(param.clone());
                go(body, bound, out);
                bound.pop();
            }
            Behaviour::App(f, a) => {
                go(f, bound, out);
                go(a, bound, out);
            }
            Behaviour::Case {
                scrut,
                left_var,
                left,
                right_var,
                right,
            } => {
                go(scrut, bound, out);
                bound.push(left_var.clone());
                go(left, bound, out);
                bound.pop();
                bound.push(right_var.clone());
                go(right, bound, out);
                bound.pop();
            }
            Behaviour::Choice { cont, .. } => go(cont, bound, out),
            Behaviour::Offer { branches, .. } => {
                for b in branches.values() {
                    go(b, bound, out);
                }
            }
            Behaviour::Inl(v) | Behaviour::Inr(v) => go(v, bound, out),
            Behaviour::Pair(a, b) => {
                go(a, bound, out);
                go(b, bound, out);
            }
            _ => {}
        }
    }
    let mut out = BTreeSet::new();
    go(b, &mut Vec::new(), &mut out);
    out
}

/// Capture-avoiding substitution on behaviours.
pub fn subst_b(b: &Behaviour, x: &Var, v: &Behaviour) -> Behaviour {
    let fv = free_vars_b(v);
    fn go(b: &Behaviour, x: &Var, v: &Behaviour, fv: &BTreeSet<Var>) -> Behaviour {
        match b {
            Behaviour::Var(y) => {
                if y == x {
                    v.clone()
                } else {
                    b.clone()
                }
            }
            Behaviour::Abs { param, annot, body } => {
                if param == x {
                    b.clone()
                } else if fv.contains(param) {
                    let fresh = ast::fresh_var(param.as_str());
                    let body = go(body, param, &Behaviour::Var(fresh.clone()), &BTreeSet::new());
                    Behaviour::Abs {
                        param: fresh,
                        annot: annot.clone(),
                        body: bx(go(&body, x, v, fv)),
                    }
                } else {
                    Behaviour::Abs {
                        param: param.clone(),
                        annot: annot.clone(),
                        body: bx(go(body, x, v, fv)),
                    }
                }
            }
            Behaviour::App(f, a) => Behaviour::App(bx(go(f, x, v, fv)), bx(go(a, x, v, fv))),
            Behaviour::Case {
                scrut,
                left_var,
                left,
                right_var,
                right,
            } => {
                let branch = |binder: &Var, body: &Behaviour| -> (Var, Behaviour) {
                    if binder == x {
                        (binder.clone(), body.clone())
                    } else if fv.contains(binder) {
                        let fresh = ast::fresh_var(binder.as_str());
                        let body =
                            go(body, binder, &Behaviour::Var(fresh.clone()), &BTreeSet::new());
                        (fresh, go(&body, x, v, fv))
                    } else {
                        (binder.clone(), go(body, x, v, fv))
                    }
                };
                let (left_var, left) = branch(left_var, left);
                let (right_var, right) = branch(right_var, right);
                Behaviour::Case {
                    scrut: bx(go(scrut, x, v, fv)),
                    left_var,
                    left: bx(left),
                    right_var,
                    right: bx(right),
                }
            }
            Behaviour::Choice { to, label, cont } => Behaviour::Choice {
                to: to.clone(),
                label: label.clone(),
                cont: bx(go(cont, x, v, fv)),
            },
            Behaviour::Offer { from, branches } => Behaviour::Offer {
                from: from.clone(),
                branches: branches
                    .iter()
                    .map(|(l, b)| (l.clone(), go(b, x, v, fv)))
                    .collect(),
            },
            Behaviour::Inl(w) => Behaviour::Inl(bx(go(w, x, v, fv))),
            Behaviour::Inr(w) => Behaviour::Inr(bx(go(w, x, v, fv))),
            Behaviour::Pair(a, b2) => Behaviour::Pair(bx(go(a, x, v, fv)), bx(go(b2, x, v, fv))),
            _ => b.clone(),
        }
    }
    go(b, x, v, &fv)
}

/// Rename roles throughout a behaviour (used by the rendezvous rule to
/// transport values and by residual definition calls).
pub fn subst_roles_b(b: &Behaviour, subst: &ast::RoleSubst) -> Behaviour {
    match b {
        Behaviour::Send { to } => Behaviour::Send {
            to: subst.apply(to),
        },
        Behaviour::Recv { from } => Behaviour::Recv {
            from: subst.apply(from),
        },
        Behaviour::Choice { to, label, cont } => Behaviour::Choice {
            to: subst.apply(to),
            label: label.clone(),
            cont: bx(subst_roles_b(cont, subst)),
        },
        Behaviour::Offer { from, branches } => Behaviour::Offer {
            from: subst.apply(from),
            branches: branches
                .iter()
                .map(|(l, b)| (l.clone(), subst_roles_b(b, subst)))
                .collect(),
        },
        Behaviour::Call { name, roles } => Behaviour::Call {
            name: name.clone(),
            roles: subst.apply_many(roles),
        },
        Behaviour::Abs { param, annot, body } => Behaviour::Abs {
            param: param.clone(),
            annot: annot.clone(),
            body: bx(subst_roles_b(body, subst)),
        },
        Behaviour::App(f, a) => {
            Behaviour::App(bx(subst_roles_b(f, subst)), bx(subst_roles_b(a, subst)))
        }
        Behaviour::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => Behaviour::Case {
            scrut: bx(subst_roles_b(scrut, subst)),
            left_var: left_var.clone(),
            left: bx(subst_roles_b(left, subst)),
            right_var: right_var.clone(),
            right: bx(subst_roles_b(right, subst)),
        },
        Behaviour::Inl(v) => Behaviour::Inl(bx(subst_roles_b(v, subst))),
        Behaviour::Inr(v) => Behaviour::Inr(bx(subst_roles_b(v, subst))),
        Behaviour::Pair(a, b2) => {
            Behaviour::Pair(bx(subst_roles_b(a, subst)), bx(subst_roles_b(b2, subst)))
        }
        _ => b.clone(),
    }
}

pub fn alpha_canon_b(b: &Behaviour) -> Behaviour {
    fn go(b: &Behaviour, counter: &mut u64, env: &mut Vec<(Var, Var)>) -> Behaviour {
        match b {
            Behaviour::Var(x) => {
                for (old, new) in env.iter().rev() {
                    if old == x {
                        return Behaviour::Var(new.clone());
                    }
                }
                b.clone()
            }
            Behaviour::Abs { param, annot, body } => {
                let new = Var::new(format!("$a{}", *counter));
                *counter += 1;
                env.push((param.clone(), new.clone()));
                let body = go(body, counter, env);
                env.pop();
                Behaviour::Abs {
                    param: new,
                    annot: annot.clone(),
                    body: bx(body),
                }
            }
            Behaviour::App(f, a) => Behaviour::App(bx(go(f, counter, env)), bx(go(a, counter, env))),
            Behaviour::Case {
                scrut,
                left_var,
                left,
                right_var,
                right,
            } => {
                let scrut = bx(go(scrut, counter, env));
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
                Behaviour::Case {
                    scrut,
                    left_var: nl,
                    left: bx(left),
                    right_var: nr,
                    right: bx(right),
                }
            }
            Behaviour::Choice { to, label, cont } => Behaviour::Choice {
                to: to.clone(),
                label: label.clone(),
                cont: bx(go(cont, counter, env)),
            },
            Behaviour::Offer { from, branches } => Behaviour::Offer {
                from: from.clone(),
                branches: branches
                    .iter()
                    .map(|(l, b)| (l.clone(), go(b, counter, env)))
                    .collect(),
            },
            Behaviour::Inl(v) => Behaviour::Inl(bx(go(v, counter, env))),
            Behaviour::Inr(v) => Behaviour::Inr(bx(go(v, counter, env))),
            Behaviour::Pair(a, b2) => {
                Behaviour::Pair(bx(go(a, counter, env)), bx(go(b2, counter, env)))
            }
            _ => b.clone(),
        }
    }
    go(b, &mut 0, &mut Vec::new())
}

pub fn alpha_eq_b(a: &Behaviour, b: &Behaviour) -> bool {
    alpha_canon_b(a) == alpha_canon_b(b)
}

// ---------------------------------------------------------------------------
// Local rewriting
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LRewriteTag {
    AbsR,
    AbsL,
    CaseR,
    CaseL,
    OffL,
    OffR,
    ChoL,
    ChoR,
    Botm,
}

fn freshen_b(param: &Var, body: &Behaviour, avoid: &BTreeSet<Var>) -> (Var, Behaviour) {
    if avoid.contains(param) {
        let fresh = ast::fresh_var(param.as_str());
        let body = subst_b(body, param, &Behaviour::Var(fresh.clone()));
        (fresh, body)
    } else {
        (param.clone(), body.clone())
    }
}

fn root_lrewrites(b: &Behaviour) -> Vec<(LRewriteTag, Behaviour)> {
    let mut out = Vec::new();
    let Behaviour::App(func, arg) = b else {
        return out;
    };
    // Botm: Bot Bot ⇝ Bot
    if matches!(func.as_ref(), Behaviour::Bot) && matches!(arg.as_ref(), Behaviour::Bot) {
        out.push((LRewriteTag::Botm, Behaviour::Bot));
    }
    match func.as_ref() {
        // ((fun x. B) B') B'' ⇝ (fun x. B B'') B'
        Behaviour::App(inner_func, inner_arg) => {
            if let Behaviour::Abs { param, annot, body } = inner_func.as_ref() {
                let (param, body) = freshen_b(param, body, &free_vars_b(arg));
                out.push((
                    LRewriteTag::AbsR,
                    lapp(
                        labs(param, annot.clone(), lapp(body, (**arg).clone())),
                        (**inner_arg).clone(),
                    ),
                ));
            }
        }
        Behaviour::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            let avoid = free_vars_b(arg);
            let (left_var, left) = freshen_b(left_var, left, &avoid);
            let (right_var, right) = freshen_b(right_var, right, &avoid);
            out.push((
                LRewriteTag::CaseR,
                Behaviour::Case {
                    scrut: scrut.clone(),
                    left_var,
                    left: bx(lapp(left, (**arg).clone())),
                    right_var,
                    right: bx(lapp(right, (**arg).clone())),
                },
            ));
        }
        Behaviour::Offer { from, branches } => {
            out.push((
                LRewriteTag::OffR,
                Behaviour::Offer {
                    from: from.clone(),
                    branches: branches
                        .iter()
                        .map(|(l, b)| (l.clone(), lapp(b.clone(), (**arg).clone())))
                        .collect(),
                },
            ));
        }
        Behaviour::Choice { to, label, cont } => {
            out.push((
                LRewriteTag::ChoR,
                Behaviour::Choice {
                    to: to.clone(),
                    label: label.clone(),
                    cont: bx(lapp((**cont).clone(), (**arg).clone())),
                },
            ));
        }
        _ => {}
    }
    // Left variants: only when the moved-over side mentions no roles.
    if roles_of_behaviour(func).is_empty() {
        match arg.as_ref() {
            Behaviour::App(inner_func, inner_arg) => {
                if let Behaviour::Abs { param, annot, body } = inner_func.as_ref() {
                    let (param, body) = freshen_b(param, body, &free_vars_b(func));
                    out.push((
                        LRewriteTag::AbsL,
                        lapp(
                            labs(param, annot.clone(), lapp((**func).clone(), body)),
                            (**inner_arg).clone(),
                        ),
                    ));
                }
            }
            Behaviour::Case {
                scrut,
                left_var,
                left,
                right_var,
                right,
            } => {
                let avoid = free_vars_b(func);
                let (left_var, left) = freshen_b(left_var, left, &avoid);
                let (right_var, right) = freshen_b(right_var, right, &avoid);
                out.push((
                    LRewriteTag::CaseL,
                    Behaviour::Case {
                        scrut: scrut.clone(),
                        left_var,
                        left: bx(lapp((**func).clone(), left)),
                        right_var,
                        right: bx(lapp((**func).clone(), right)),
                    },
                ));
            }
            Behaviour::Offer { from, branches } => {
                out.push((
                    LRewriteTag::OffL,
                    Behaviour::Offer {
                        from: from.clone(),
                        branches: branches
                            .iter()
                            .map(|(l, b)| (l.clone(), lapp((**func).clone(), b.clone())))
                            .collect(),
                    },
                ));
            }
            Behaviour::Choice { to, label, cont } => {
                out.push((
                    LRewriteTag::ChoL,
                    Behaviour::Choice {
                        to: to.clone(),
                        label: label.clone(),
                        cont: bx(lapp((**func).clone(), (**cont).clone())),
                    },
                ));
            }
            _ => {}
        }
    }
    out
}

/// All single local rewrites at any position.
pub fn lrewrites_one(b: &Behaviour) -> Vec<(LRewriteTag, Behaviour)> {
    let mut out = root_lrewrites(b);
    let push = |out: &mut Vec<(LRewriteTag, Behaviour)>,
                child: &Behaviour,
                rebuild: &dyn Fn(Behaviour) -> Behaviour| {
        for (tag, rewritten) in lrewrites_one(child) {
            out.push((tag, rebuild(rewritten)));
        }
    };
    match b {
        Behaviour::App(f, a) => {
            push(&mut out, f, &|f2| lapp(f2, (**a).clone()));
            push(&mut out, a, &|a2| lapp((**f).clone(), a2));
        }
        Behaviour::Abs { param, annot, body } => {
            push(&mut out, body, &|b2| labs(param.clone(), annot.clone(), b2));
        }
        Behaviour::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            let rebuild = |s: Behaviour, l: Behaviour, r: Behaviour| Behaviour::Case {
                scrut: bx(s),
                left_var: left_var.clone(),
                left: bx(l),
                right_var: right_var.clone(),
                right: bx(r),
            };
            push(&mut out, scrut, &|s| {
                rebuild(s, (**left).clone(), (**right).clone())
            });
            push(&mut out, left, &|l| {
                rebuild((**scrut).clone(), l, (**right).clone())
            });
            push(&mut out, right, &|r| {
                rebuild((**scrut).clone(), (**left).clone(), r)
            });
        }
        Behaviour::Choice { to, label, cont } => {
            push(&mut out, cont, &|c| Behaviour::Choice {
                to: to.clone(),
                label: label.clone(),
                cont: bx(c),
            });
        }
        Behaviour::Offer { from, branches } => {
            for (l, branch) in branches {
                push(&mut out, branch, &|nb| {
                    let mut branches = branches.clone();
                    branches.insert(l.clone(), nb);
                    Behaviour::Offer {
                        from: from.clone(),
                        branches,
                    }
                });
            }
        }
        Behaviour::Inl(v) => push(&mut out, v, &|v2| Behaviour::Inl(bx(v2))),
        Behaviour::Inr(v) => push(&mut out, v, &|v2| Behaviour::Inr(bx(v2))),
        Behaviour::Pair(a, b2) => {
            push(&mut out, a, &|a2| {
                Behaviour::Pair(bx(a2), bx((**b2).clone()))
            });
            push(&mut out, b2, &|b3| {
                Behaviour::Pair(bx((**a).clone()), bx(b3))
            });
        }
        _ => {}
    }
    let mut seen = HashSet::new();
    out.retain(|(tag, t)| seen.insert((*tag, alpha_canon_b(t))));
    out
}

const LOCAL_BALL_CAP: usize = 4_096;

fn lrewrite_ball(b: &Behaviour, fuel: usize) -> Vec<Behaviour> {
    let mut nodes = vec![b.clone()];
    let mut seen = HashSet::from([alpha_canon_b(b)]);
    let mut depths = vec![0usize];
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        if depths[i] >= fuel || nodes.len() >= LOCAL_BALL_CAP {
            continue;
        }
        for (_, next) in lrewrites_one(&nodes[i].clone()) {
            if seen.insert(alpha_canon_b(&next)) {
                nodes.push(next);
                depths.push(depths[i] + 1);
                queue.push_back(nodes.len() - 1);
            }
        }
    }
    nodes
}

// ---------------------------------------------------------------------------
// Behaviour transitions
// ---------------------------------------------------------------------------

/// Labels of behaviour-level transitions. Send/receive/choice/offer labels
/// surface so the network layer can match them; `τ` and `λ` are internal
/// computation as in the choreography layer.
#[derive(Debug, Clone, PartialEq)]
pub enum BLabel {
    Tau,
    Lambda,
    Send { to: Role, value: Behaviour },
    Recv { from: Role },
    Choice { to: Role, label: SelLabel },
    Offer { from: Role, label: SelLabel },
}

/// One behaviour step. For `Recv` steps the result contains `hole` where
/// the received value will be substituted once the rendezvous fires.
#[derive(Debug, Clone)]
pub struct BStep {
    pub label: BLabel,
    pub result: Behaviour,
    pub hole: Option<Var>,
}

impl BStep {
    fn map(self, f: impl FnOnce(Behaviour) -> Behaviour) -> BStep {
        BStep {
            label: self.label,
            result: f(self.result),
            hole: self.hole,
        }
    }
}

fn is_tau_or_lambda(l: &BLabel) -> bool {
    matches!(l, BLabel::Tau | BLabel::Lambda)
}

/// All steps of a behaviour derivable without the structural rule.
fn direct_bsteps(b: &Behaviour, env: &NetEnv) -> Vec<BStep> {
    let mut out = Vec::new();
    match b {
        Behaviour::App(func, arg) => {
            // NSend: send[R] L  --send[R] L-->  Bot
            if let Behaviour::Send { to } = func.as_ref() {
                if is_local_value(arg) && free_vars_b(arg).is_empty() {
                    out.push(BStep {
                        label: BLabel::Send {
                            to: to.clone(),
                            value: (**arg).clone(),
                        },
                        result: Behaviour::Bot,
                        hole: None,
                    });
                }
            }
            // NRecv: recv[R] Bot  --recv[R] L-->  L
            if let Behaviour::Recv { from } = func.as_ref() {
                if matches!(arg.as_ref(), Behaviour::Bot) {
                    let hole = ast::fresh_var("recv");
                    out.push(BStep {
                        label: BLabel::Recv { from: from.clone() },
                        result: Behaviour::Var(hole.clone()),
                        hole: Some(hole),
                    });
                }
            }
            // NAbsApp
            if let Behaviour::Abs { param, body, .. } = func.as_ref() {
                if is_local_value(arg) {
                    out.push(BStep {
                        label: BLabel::Tau,
                        result: subst_b(body, param, arg),
                        hole: None,
                    });
                }
            }
            // NProj1/2
            if matches!(func.as_ref(), Behaviour::Fst | Behaviour::Snd) {
                if let Behaviour::Pair(a, b2) = arg.as_ref() {
                    if is_local_value(a) && is_local_value(b2) {
                        let result = if matches!(func.as_ref(), Behaviour::Fst) {
                            (**a).clone()
                        } else {
                            (**b2).clone()
                        };
                        out.push(BStep {
                            label: BLabel::Tau,
                            result,
                            hole: None,
                        });
                    }
                }
            }
            // saturated extern
            if let Some((name, arity, args)) = extern_spine(b) {
                if args.len() == arity && args.iter().all(|a| is_local_value(a)) {
                    let ground: Result<Vec<_>, _> =
                        args.iter().map(|a| ground_of_behaviour(a)).collect();
                    if let Ok(ground) = ground {
                        if let Ok(result) = env.externs.eval(name, &ground) {
                            out.push(BStep {
                                label: BLabel::Tau,
                                result: behaviour_of_ground(&result),
                                hole: None,
                            });
                        }
                    }
                }
            }
            // NApp1: any label through the function side; λ becomes τ
            for step in direct_bsteps(func, env) {
                let label = match step.label {
                    BLabel::Lambda => BLabel::Tau,
                    other => other,
                };
                out.push(BStep {
                    label,
                    result: lapp(step.result, (**arg).clone()),
                    hole: step.hole,
                });
            }
            // NApp2: any label through the argument of a value
            if is_local_value(func) {
                for step in direct_bsteps(arg, env) {
                    out.push(step.map(|r| lapp((**func).clone(), r)));
                }
            }
            // NApp3: τ only
            for step in direct_bsteps(arg, env) {
                if matches!(step.label, BLabel::Tau) {
                    out.push(step.map(|r| lapp((**func).clone(), r)));
                }
            }
        }
        Behaviour::Abs { param, annot, body } => {
            for step in direct_bsteps(body, env) {
                if is_tau_or_lambda(&step.label) {
                    out.push(BStep {
                        label: BLabel::Lambda,
                        result: labs(param.clone(), annot.clone(), step.result),
                        hole: None,
                    });
                }
            }
        }
        Behaviour::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            match scrut.as_ref() {
                Behaviour::Inl(v) if is_local_value(v) => out.push(BStep {
                    label: BLabel::Tau,
                    result: subst_b(left, left_var, v),
                    hole: None,
                }),
                Behaviour::Inr(v) if is_local_value(v) => out.push(BStep {
                    label: BLabel::Tau,
                    result: subst_b(right, right_var, v),
                    hole: None,
                }),
                _ => {}
            }
            let rebuild = |s: Behaviour| Behaviour::Case {
                scrut: bx(s),
                left_var: left_var.clone(),
                left: left.clone(),
                right_var: right_var.clone(),
                right: right.clone(),
            };
            // NCase: any label through the scrutinee
            for step in direct_bsteps(scrut, env) {
                out.push(step.map(rebuild));
            }
            // NCase2: both branches step with the same τ/λ label
            let ls = direct_bsteps(left, env);
            let rs = direct_bsteps(right, env);
            for l in ls.iter().filter(|s| is_tau_or_lambda(&s.label)) {
                for r in rs.iter().filter(|s| s.label == l.label) {
                    out.push(BStep {
                        label: l.label.clone(),
                        result: Behaviour::Case {
                            scrut: scrut.clone(),
                            left_var: left_var.clone(),
                            left: bx(l.result.clone()),
                            right_var: right_var.clone(),
                            right: bx(r.result.clone()),
                        },
                        hole: None,
                    });
                }
            }
        }
        Behaviour::Choice { to, label, cont } => {
            out.push(BStep {
                label: BLabel::Choice {
                    to: to.clone(),
                    label: label.clone(),
                },
                result: (**cont).clone(),
                hole: None,
            });
            // NCho2
            for step in direct_bsteps(cont, env) {
                if is_tau_or_lambda(&step.label) {
                    let l = step.label.clone();
                    out.push(BStep {
                        label: l,
                        result: Behaviour::Choice {
                            to: to.clone(),
                            label: label.clone(),
                            cont: bx(step.result),
                        },
                        hole: None,
                    });
                }
            }
        }
        Behaviour::Offer { from, branches } => {
            // NOff: commit to one branch
            for (l, branch) in branches {
                out.push(BStep {
                    label: BLabel::Offer {
                        from: from.clone(),
                        label: l.clone(),
                    },
                    result: branch.clone(),
                    hole: None,
                });
            }
            // NOff2: every branch steps with the same τ/λ label
            for kind in [BLabel::Tau, BLabel::Lambda] {
                let mut per_branch: Vec<(SelLabel, Vec<Behaviour>)> = Vec::new();
                let mut all = true;
                for (l, branch) in branches {
                    let opts: Vec<Behaviour> = direct_bsteps(branch, env)
                        .into_iter()
                        .filter(|s| s.label == kind)
                        .map(|s| s.result)
                        .collect();
                    if opts.is_empty() {
                        all = false;
                        break;
                    }
                    per_branch.push((l.clone(), opts));
                }
                if !all {
                    continue;
                }
                let mut combos: Vec<BTreeMap<SelLabel, Behaviour>> = vec![BTreeMap::new()];
                for (l, opts) in &per_branch {
                    let mut next = Vec::new();
                    for combo in &combos {
                        for opt in opts {
                            let mut combo = combo.clone();
                            combo.insert(l.clone(), opt.clone());
                            next.push(combo);
                        }
                    }
                    combos = next;
                }
                for combo in combos {
                    out.push(BStep {
                        label: kind.clone(),
                        result: Behaviour::Offer {
                            from: from.clone(),
                            branches: combo,
                        },
                        hole: None,
                    });
                }
            }
        }
        Behaviour::Call { name, roles } => {
            if let Some((params, body)) = env.defs.get(name) {
                if let Ok(subst) = ast::RoleSubst::new(params, roles) {
                    out.push(BStep {
                        label: BLabel::Tau,
                        result: subst_roles_b(body, &subst),
                        hole: None,
                    });
                }
            }
        }
        _ => {}
    }
    out
}

fn ground_of_behaviour(b: &Behaviour) -> Result<GroundValue, String> {
    match b {
        Behaviour::Lit(BaseLit::Int(n)) => Ok(GroundValue::Int(*n)),
        Behaviour::Lit(BaseLit::Str(s)) => Ok(GroundValue::Str(s.clone())),
        Behaviour::Unit => Ok(GroundValue::Unit),
        Behaviour::Pair(a, b) => Ok(GroundValue::Pair(
            Box::new(ground_of_behaviour(a)?),
            Box::new(ground_of_behaviour(b)?),
        )),
        Behaviour::Inl(v) => Ok(GroundValue::Inl(Box::new(ground_of_behaviour(v)?))),
        Behaviour::Inr(v) => Ok(GroundValue::Inr(Box::new(ground_of_behaviour(v)?))),
        other => Err(format!(
            "extern argument is not first-order: {}",
            print_behaviour(other)
        )),
    }
}

fn behaviour_of_ground(g: &GroundValue) -> Behaviour {
    match g {
        GroundValue::Int(n) => Behaviour::Lit(BaseLit::Int(*n)),
        GroundValue::Str(s) => Behaviour::Lit(BaseLit::Str(s.clone())),
        GroundValue::Unit => Behaviour::Unit,
        GroundValue::Pair(a, b) => {
            Behaviour::Pair(bx(behaviour_of_ground(a)), bx(behaviour_of_ground(b)))
        }
        GroundValue::Inl(v) => Behaviour::Inl(bx(behaviour_of_ground(v))),
        GroundValue::Inr(v) => Behaviour::Inr(bx(behaviour_of_ground(v))),
    }
}

/// All behaviour steps including the bounded `⇝*` structural prefix.
pub fn behaviour_steps(b: &Behaviour, env: &NetEnv, rewrite_fuel: usize) -> Vec<BStep> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for node in lrewrite_ball(b, rewrite_fuel) {
        collect_bsteps(&node, env, &mut seen, &mut out);
    }
    out
}

/// Behaviour steps from the earliest local-rewrite layer that has any.
/// Emptiness agrees with [`behaviour_steps`]; the network schedulers
/// sample from this subset.
pub fn behaviour_steps_lazy(b: &Behaviour, env: &NetEnv, rewrite_fuel: usize) -> Vec<BStep> {
    let mut layer = vec![b.clone()];
    let mut seen_nodes = HashSet::from([alpha_canon_b(b)]);
    let mut total = 1usize;
    for _ in 0..=rewrite_fuel {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for node in &layer {
            collect_bsteps(node, env, &mut seen, &mut out);
        }
        if !out.is_empty() {
            return out;
        }
        let mut next = Vec::new();
        for node in &layer {
            for (_, rewritten) in lrewrites_one(node) {
                if total >= LOCAL_BALL_CAP {
                    break;
                }
                if seen_nodes.insert(alpha_canon_b(&rewritten)) {
                    next.push(rewritten);
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

fn collect_bsteps(
    node: &Behaviour,
    env: &NetEnv,
    seen: &mut HashSet<(String, Behaviour)>,
    out: &mut Vec<BStep>,
) {
    for step in direct_bsteps(node, env) {
        let key = (label_key(&step.label), alpha_canon_b(&step.result));
        if seen.insert(key) {
            out.push(step);
        }
    }
}

fn label_key(l: &BLabel) -> String {
    match l {
        BLabel::Tau => "tau".into(),
        BLabel::Lambda => "lambda".into(),
        BLabel::Send { to, value } => format!("send:{to}:{}", print_behaviour(value)),
        BLabel::Recv { from } => format!("recv:{from}"),
        BLabel::Choice { to, label } => format!("choice:{to}:{label}"),
        BLabel::Offer { from, label } => format!("offer:{from}:{label}"),
    }
}

// ---------------------------------------------------------------------------
// Network semantics
// ---------------------------------------------------------------------------

/// How a network step was produced: a single-role `τ`, a value
/// communication, or a selection rendezvous.
#[derive(Debug, Clone, PartialEq)]
pub enum NetMatch {
    Local {
        role: Role,
    },
    Com {
        from: Role,
        to: Role,
        value: Behaviour,
    },
    Sel {
        from: Role,
        to: Role,
        label: SelLabel,
    },
}

/// One observable network step: `τ` at one role or a two-role rendezvous.
#[derive(Debug, Clone)]
pub struct NetStep {
    pub roles: BTreeSet<Role>,
    pub matched: NetMatch,
    pub network: Network,
}

impl NetStep {
    pub fn to_json(&self) -> serde_json::Value {
        let matched = match &self.matched {
            NetMatch::Local { role } => serde_json::json!({"local": role.to_string()}),
            NetMatch::Com { from, to, value } => serde_json::json!({
                "send": format!("{from} -> {to}"),
                "recv": print_behaviour(value),
            }),
            NetMatch::Sel { from, to, label } => serde_json::json!({
                "choice": format!("{from} -> {to}"),
                "offer": label.to_string(),
            }),
        };
        serde_json::json!({
            "label": {"roles": self.roles.iter().map(|r| r.to_string()).collect::<Vec<_>>()},
            "matched": matched,
            "network": self.network.procs.iter()
                .map(|(r, b)| (r.to_string(), print_behaviour(b)))
                .collect::<BTreeMap<String, String>>(),
        })
    }
}

/// All observable steps of a network: single-role `τ` lifts plus matched
/// send/receive and choice/offer pairs. The transported value has the
/// sender renamed to the receiver.
pub fn network_step(n: &Network, env: &NetEnv, rewrite_fuel: usize) -> Vec<NetStep> {
    let mut actions: BTreeMap<Role, Vec<BStep>> = BTreeMap::new();
    for (role, behaviour) in &n.procs {
        actions.insert(role.clone(), behaviour_steps(behaviour, env, rewrite_fuel));
    }
    network_step_from(n, &actions)
}

/// Network steps built from the lazily-enumerated per-role actions; used
/// by the simulator.
pub fn network_step_lazy(n: &Network, env: &NetEnv, rewrite_fuel: usize) -> Vec<NetStep> {
    let mut actions: BTreeMap<Role, Vec<BStep>> = BTreeMap::new();
    for (role, behaviour) in &n.procs {
        actions.insert(
            role.clone(),
            behaviour_steps_lazy(behaviour, env, rewrite_fuel),
        );
    }
    network_step_from(n, &actions)
}

fn network_step_from(n: &Network, actions: &BTreeMap<Role, Vec<BStep>>) -> Vec<NetStep> {
    let mut out = Vec::new();
    for (role, steps) in actions {
        for step in steps {
            match &step.label {
                BLabel::Tau => {
                    let mut procs = n.procs.clone();
                    procs.insert(role.clone(), step.result.clone());
                    out.push(NetStep {
                        roles: BTreeSet::from([role.clone()]),
                        matched: NetMatch::Local { role: role.clone() },
                        network: Network { procs },
                    });
                }
                BLabel::Send { to, value } => {
                    // find matching receive at `to` expecting from `role`
                    if let Some(partner_steps) = actions.get(to) {
                        for partner in partner_steps {
                            if let BLabel::Recv { from } = &partner.label {
                                if from == role {
                                    let transported = subst_roles_b(
                                        value,
                                        &ast::RoleSubst::single(role, to),
                                    );
                                    let hole =
                                        partner.hole.as_ref().expect("recv step carries a hole");
                                    let recv_result =
                                        subst_b(&partner.result, hole, &transported);
                                    let mut procs = n.procs.clone();
                                    procs.insert(role.clone(), step.result.clone());
                                    procs.insert(to.clone(), recv_result);
                                    out.push(NetStep {
                                        roles: BTreeSet::from([role.clone(), to.clone()]),
                                        matched: NetMatch::Com {
                                            from: role.clone(),
                                            to: to.clone(),
                                            value: value.clone(),
                                        },
                                        network: Network { procs },
                                    });
                                }
                            }
                        }
                    }
                }
                BLabel::Choice { to, label } => {
                    if let Some(partner_steps) = actions.get(to) {
                        for partner in partner_steps {
                            if let BLabel::Offer { from, label: offered } = &partner.label {
                                if from == role && offered == label {
                                    let mut procs = n.procs.clone();
                                    procs.insert(role.clone(), step.result.clone());
                                    procs.insert(to.clone(), partner.result.clone());
                                    out.push(NetStep {
                                        roles: BTreeSet::from([role.clone(), to.clone()]),
                                        matched: NetMatch::Sel {
                                            from: role.clone(),
                                            to: to.clone(),
                                            label: label.clone(),
                                        },
                                        network: Network { procs },
                                    });
                                }
                            }
                        }
                    }
                }
                _ => {}
            }
        }
    }
    // deduplicate identical successor networks with the same match kind
    let mut seen = HashSet::new();
    out.retain(|step| {
        let canon: Vec<(Role, Behaviour)> = step
            .network
            .procs
            .iter()
            .map(|(r, b)| (r.clone(), alpha_canon_b(b)))
            .collect();
        seen.insert((format!("{:?}", step.matched_kind()), canon))
    });
    out
}

impl NetStep {
    fn matched_kind(&self) -> (u8, String) {
        match &self.matched {
            NetMatch::Local { role } => (0, role.to_string()),
            NetMatch::Com { from, to, .. } => (1, format!("{from}->{to}")),
            NetMatch::Sel { from, to, label } => (2, format!("{from}->{to}:{label}")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetTrace {
    pub initial: Network,
    pub steps: Vec<NetStep>,
    pub final_network: Network,
}

impl NetTrace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for step in &self.steps {
            out.push_str(&step.to_json().to_string());
            out.push('\n');
        }
        out
    }
}

/// A stuck non-terminal network: some role is not holding a local value but
/// no rule applies. `wants` records, per role, the communication actions it
/// is offering (who it waits on).
#[derive(Debug, Clone)]
pub struct DeadlockReport {
    pub network: Network,
    pub wants: BTreeMap<Role, Vec<String>>,
}

impl DeadlockReport {
    pub fn render(&self) -> String {
        let mut out = format!("deadlock: {}\n", self.network.print());
        for (role, wants) in &self.wants {
            if wants.is_empty() {
                out.push_str(&format!("  {role}: no pending actions\n"));
            } else {
                out.push_str(&format!("  {role}: waiting on {}\n", wants.join(", ")));
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum NetOutcome {
    /// Every role holds a local value.
    Terminal(Network),
    Deadlock(DeadlockReport),
    FuelExhausted,
}

#[derive(Debug, Clone)]
pub struct NetRunResult {
    pub trace: NetTrace,
    pub outcome: NetOutcome,
}

fn pending_actions(n: &Network, env: &NetEnv, rewrite_fuel: usize) -> BTreeMap<Role, Vec<String>> {
    let mut out = BTreeMap::new();
    for (role, behaviour) in &n.procs {
        let mut wants = Vec::new();
        for step in behaviour_steps_lazy(behaviour, env, rewrite_fuel) {
            match &step.label {
                BLabel::Send { to, .. } => wants.push(format!("send to {to}")),
                BLabel::Recv { from } => wants.push(format!("receive from {from}")),
                BLabel::Choice { to, label } => wants.push(format!("choice {label} to {to}")),
                BLabel::Offer { from, label } => {
                    wants.push(format!("offer {label} from {from}"))
                }
                _ => {}
            }
        }
        wants.sort();
        wants.dedup();
        out.insert(role.clone(), wants);
    }
    out
}

/// Collapse roles that can no longer act but whose residue rewrites to a
/// local value (for example `Bot Bot ⇝ Bot`).
pub fn collapse_finished(n: &Network, env: &NetEnv, rewrite_fuel: usize) -> Network {
    let mut procs = n.procs.clone();
    for (_, b) in procs.iter_mut() {
        if !is_local_value(b) && behaviour_steps_lazy(b, env, rewrite_fuel).is_empty() {
            if let Some(v) = lrewrite_ball(b, rewrite_fuel)
                .into_iter()
                .find(is_local_value)
            {
                *b = v;
            }
        }
    }
    Network { procs }
}

/// Run a network to termination, deadlock, or fuel exhaustion under the
/// same schedulers as the choreography runtime.
pub fn run_network(
    n: &Network,
    env: &NetEnv,
    scheduler: crate::runtime::Scheduler,
    fuel: u64,
    rewrite_fuel: usize,
) -> NetRunResult {
    use rand::{Rng, SeedableRng};
    let mut rng = match scheduler {
        crate::runtime::Scheduler::Seeded(seed) => {
            Some(rand_chacha::ChaCha8Rng::seed_from_u64(seed))
        }
        crate::runtime::Scheduler::Deterministic => None,
    };
    let mut current = n.clone();
    let mut steps = Vec::new();
    for _ in 0..fuel {
        current = collapse_finished(&current, env, rewrite_fuel);
        if current.is_terminal() {
            return NetRunResult {
                trace: NetTrace {
                    initial: n.clone(),
                    steps,
                    final_network: current.clone(),
                },
                outcome: NetOutcome::Terminal(current),
            };
        }
        let mut enabled = network_step_lazy(&current, env, rewrite_fuel);
        if enabled.is_empty() {
            let wants = pending_actions(&current, env, rewrite_fuel);
            return NetRunResult {
                trace: NetTrace {
                    initial: n.clone(),
                    steps,
                    final_network: current.clone(),
                },
                outcome: NetOutcome::Deadlock(DeadlockReport {
                    network: current,
                    wants,
                }),
            };
        }
        enabled.sort_by_key(|s| (s.matched_kind(), s.network.print()));
        let chosen = match &mut rng {
            None => enabled.swap_remove(0),
            Some(rng) => {
                let idx = rng.gen_range(0..enabled.len());
                enabled.swap_remove(idx)
            }
        };
        current = chosen.network.clone();
        steps.push(chosen);
    }
    NetRunResult {
        trace: NetTrace {
            initial: n.clone(),
            steps,
            final_network: current.clone(),
        },
        outcome: NetOutcome::FuelExhausted,
    }
}

/// Bounded exhaustive network graph.
#[derive(Debug, Clone)]
pub struct NetGraph {
    pub states: Vec<Network>,
    pub edges: Vec<(usize, NetStep, usize)>,
    pub truncated: bool,
}

pub fn explore_network(
    n: &Network,
    env: &NetEnv,
    rewrite_fuel: usize,
    depth: usize,
    state_cap: usize,
) -> NetGraph {
    fn canon(n: &Network) -> Vec<(Role, Behaviour)> {
        n.procs
            .iter()
            .map(|(r, b)| (r.clone(), alpha_canon_b(b)))
            .collect()
    }
    let mut states = vec![n.clone()];
    let mut index: HashMap<Vec<(Role, Behaviour)>, usize> = HashMap::from([(canon(n), 0)]);
    let mut depths = vec![0usize];
    let mut edges = Vec::new();
    let mut queue = VecDeque::from([0usize]);
    let mut truncated = false;
    while let Some(i) = queue.pop_front() {
        if depths[i] >= depth {
            continue;
        }
        let current = states[i].clone();
        for step in network_step(&current, env, rewrite_fuel) {
            let key = canon(&step.network);
            let j = match index.get(&key) {
                Some(&j) => j,
                None => {
                    if states.len() >= state_cap {
                        truncated = true;
                        continue;
                    }
                    let j = states.len();
                    states.push(step.network.clone());
                    depths.push(depths[i] + 1);
                    index.insert(key, j);
                    queue.push_back(j);
                    j
                }
            };
            edges.push((i, step, j));
        }
    }
    NetGraph {
        states,
        edges,
        truncated,
    }
}

// ---------------------------------------------------------------------------
// Local typing
// ---------------------------------------------------------------------------

/// Local type definitions: `t_i = projection of t's body at position i`.
pub type LocalSigma = BTreeMap<(TypeName, usize), LocalType>;

#[derive(Debug, Clone, Default)]
pub struct LocalContext {
    pub sigma: LocalSigma,
    pub vars: BTreeMap<Var, LocalType>,
    /// Residual definitions and externs, by name.
    pub funcs: BTreeMap<FuncName, LocalType>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LocalTypeError {
    #[error("unknown name {0}")]
    UnknownName(String),
    #[error("local types do not match: expected {expected}, found {found}")]
    Mismatch { expected: String, found: String },
    #[error("offer branches must share one type")]
    OfferBranchMismatch,
    #[error("cannot infer a local type for {0}")]
    CannotInfer(String),
}

fn lexpose(sigma: &LocalSigma, ty: &LocalType) -> LocalType {
    let mut current = ty.clone();
    let mut steps = 0;
    while let LocalType::Var { name, index } = &current {
        match sigma.get(&(name.clone(), *index)) {
            Some(t) if steps < 64 => {
                current = t.clone();
                steps += 1;
            }
            _ => break,
        }
    }
    current
}

pub fn local_type_equal(sigma: &LocalSigma, a: &LocalType, b: &LocalType) -> bool {
    fn go(
        sigma: &LocalSigma,
        a: &LocalType,
        b: &LocalType,
        visited: &mut HashSet<(LocalType, LocalType)>,
    ) -> bool {
        if a == b {
            return true;
        }
        if !visited.insert((a.clone(), b.clone())) {
            return true;
        }
        let a = lexpose(sigma, a);
        let b = lexpose(sigma, b);
        match (&a, &b) {
            (LocalType::Arrow(a1, a2), LocalType::Arrow(b1, b2))
            | (LocalType::Sum(a1, a2), LocalType::Sum(b1, b2))
            | (LocalType::Prod(a1, a2), LocalType::Prod(b1, b2)) => {
                go(sigma, a1, b1, visited) && go(sigma, a2, b2, visited)
            }
            _ => a == b,
        }
    }
    go(sigma, a, b, &mut HashSet::new())
}

/// Check a behaviour against an expected local type (the judgement
/// `Σ;Γ ⊢ B : T`). The send/receive rules are parametric in `T`, so this
/// checker is directed by the expected type.
pub fn check_behaviour(
    ctx: &LocalContext,
    b: &Behaviour,
    expected: &LocalType,
) -> Result<(), LocalTypeError> {
    let expected = lexpose(&ctx.sigma, expected);
    match b {
        Behaviour::Bot => match expected {
            LocalType::Bot => Ok(()),
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "Bot".into(),
            }),
        },
        Behaviour::Unit => match expected {
            LocalType::Unit => Ok(()),
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "Unit".into(),
            }),
        },
        Behaviour::Lit(l) => {
            let found = LocalType::Base(l.base());
            if local_type_equal(&ctx.sigma, &found, &expected) {
                Ok(())
            } else {
                Err(LocalTypeError::Mismatch {
                    expected: print_local_type(&expected),
                    found: print_local_type(&found),
                })
            }
        }
        Behaviour::Var(x) => {
            let found = ctx
                .vars
                .get(x)
                .ok_or_else(|| LocalTypeError::UnknownName(x.to_string()))?;
            if local_type_equal(&ctx.sigma, found, &expected) {
                Ok(())
            } else {
                Err(LocalTypeError::Mismatch {
                    expected: print_local_type(&expected),
                    found: print_local_type(found),
                })
            }
        }
        Behaviour::Call { name, .. } | Behaviour::Extern { name, .. } => {
            let found = ctx
                .funcs
                .get(name)
                .ok_or_else(|| LocalTypeError::UnknownName(name.to_string()))?;
            if local_type_equal(&ctx.sigma, found, &expected) {
                Ok(())
            } else {
                Err(LocalTypeError::Mismatch {
                    expected: print_local_type(&expected),
                    found: print_local_type(found),
                })
            }
        }
        Behaviour::Send { .. } => match expected {
            // send[R] : T -> Bot for any T
            LocalType::Arrow(_, cod) if matches!(*cod, LocalType::Bot) => Ok(()),
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "a send".into(),
            }),
        },
        Behaviour::Recv { .. } => match expected {
            // recv[R] : Bot -> T for any T
            LocalType::Arrow(dom, _) if matches!(*dom, LocalType::Bot) => Ok(()),
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "a receive".into(),
            }),
        },
        Behaviour::Abs { param, annot, body } => match expected {
            LocalType::Arrow(dom, cod) => {
                if !local_type_equal(&ctx.sigma, annot, &dom) {
                    return Err(LocalTypeError::Mismatch {
                        expected: print_local_type(&dom),
                        found: print_local_type(annot),
                    });
                }
                let mut inner = ctx.clone();
                inner.vars.insert(param.clone(), annot.clone());
                check_behaviour(&inner, body, &cod)
            }
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "a function".into(),
            }),
        },
        Behaviour::App(f, a) => match f.as_ref() {
            // send[R] : T -> Bot — the argument has any checkable type
            Behaviour::Send { .. } => {
                if !matches!(expected, LocalType::Bot) {
                    return Err(LocalTypeError::Mismatch {
                        expected: print_local_type(&expected),
                        found: "Bot (result of a send)".into(),
                    });
                }
                match synth_behaviour(ctx, a) {
                    Ok(_) => Ok(()),
                    Err(_) => check_behaviour(ctx, a, &LocalType::Bot),
                }
            }
            // recv[R] : Bot -> T — the result takes any expected type
            Behaviour::Recv { .. } => check_behaviour(ctx, a, &LocalType::Bot),
            Behaviour::Fst | Behaviour::Snd => {
                let arg_ty = synth_behaviour(ctx, a)?;
                match lexpose(&ctx.sigma, &arg_ty) {
                    LocalType::Prod(l, r) => {
                        let comp = if matches!(f.as_ref(), Behaviour::Fst) { l } else { r };
                        if local_type_equal(&ctx.sigma, &comp, &expected) {
                            Ok(())
                        } else {
                            Err(LocalTypeError::Mismatch {
                                expected: print_local_type(&expected),
                                found: print_local_type(&comp),
                            })
                        }
                    }
                    LocalType::Bot if matches!(expected, LocalType::Bot) => Ok(()),
                    found => Err(LocalTypeError::Mismatch {
                        expected: "a product".into(),
                        found: print_local_type(&found),
                    }),
                }
            }
            Behaviour::Abs { param, annot, body } => {
                check_behaviour(ctx, a, annot)?;
                let mut inner = ctx.clone();
                inner.vars.insert(param.clone(), annot.clone());
                check_behaviour(&inner, body, &expected)
            }
            _ => match synth_behaviour(ctx, f) {
                Ok(LocalType::Arrow(dom, cod)) => {
                    check_behaviour(ctx, a, &dom)?;
                    if local_type_equal(&ctx.sigma, &cod, &expected) {
                        Ok(())
                    } else {
                        Err(LocalTypeError::Mismatch {
                            expected: print_local_type(&expected),
                            found: print_local_type(&cod),
                        })
                    }
                }
                Ok(LocalType::Bot) if matches!(expected, LocalType::Bot) => {
                    check_behaviour(ctx, a, &LocalType::Bot)
                }
                _ if matches!(expected, LocalType::Bot) => {
                    // Bot application: both sides collapse to Bot
                    check_behaviour(ctx, f, &LocalType::Bot)?;
                    check_behaviour(ctx, a, &LocalType::Bot)
                }
                Ok(found) => Err(LocalTypeError::Mismatch {
                    expected: "a function".into(),
                    found: print_local_type(&found),
                }),
                Err(e) => Err(e),
            },
        },
        Behaviour::Inl(v) => match expected {
            LocalType::Sum(l, _) => check_behaviour(ctx, v, &l),
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "a left injection".into(),
            }),
        },
        Behaviour::Inr(v) => match expected {
            LocalType::Sum(_, r) => check_behaviour(ctx, v, &r),
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "a right injection".into(),
            }),
        },
        Behaviour::Pair(a, b2) => match expected {
            LocalType::Prod(l, r) => {
                check_behaviour(ctx, a, &l)?;
                check_behaviour(ctx, b2, &r)
            }
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "a pair".into(),
            }),
        },
        Behaviour::Fst | Behaviour::Snd => match expected {
            LocalType::Arrow(dom, cod) => match lexpose(&ctx.sigma, &dom) {
                LocalType::Prod(l, r) => {
                    let comp = if matches!(b, Behaviour::Fst) { l } else { r };
                    if local_type_equal(&ctx.sigma, &comp, &cod) {
                        Ok(())
                    } else {
                        Err(LocalTypeError::Mismatch {
                            expected: print_local_type(&cod),
                            found: print_local_type(&comp),
                        })
                    }
                }
                found => Err(LocalTypeError::Mismatch {
                    expected: "a product".into(),
                    found: print_local_type(&found),
                }),
            },
            other => Err(LocalTypeError::Mismatch {
                expected: print_local_type(&other),
                found: "a projection".into(),
            }),
        },
        Behaviour::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            let scrut_ty = synth_behaviour(ctx, scrut)?;
            match lexpose(&ctx.sigma, &scrut_ty) {
                LocalType::Sum(t1, t2) => {
                    let mut lctx = ctx.clone();
                    lctx.vars.insert(left_var.clone(), (*t1).clone());
                    check_behaviour(&lctx, left, &expected)?;
                    let mut rctx = ctx.clone();
                    rctx.vars.insert(right_var.clone(), (*t2).clone());
                    check_behaviour(&rctx, right, &expected)
                }
                found => Err(LocalTypeError::Mismatch {
                    expected: "a sum".into(),
                    found: print_local_type(&found),
                }),
            }
        }
        Behaviour::Choice { cont, .. } => check_behaviour(ctx, cont, &expected),
        Behaviour::Offer { branches, .. } => {
            if branches.is_empty() {
                return Err(LocalTypeError::OfferBranchMismatch);
            }
            for b2 in branches.values() {
                check_behaviour(ctx, b2, &expected)?;
            }
            Ok(())
        }
    }
}

/// Synthesis for the local fragment where it is possible (variables,
/// literals, calls, applications of synthesisable heads).
pub fn synth_behaviour(ctx: &LocalContext, b: &Behaviour) -> Result<LocalType, LocalTypeError> {
    match b {
        Behaviour::Bot => Ok(LocalType::Bot),
        Behaviour::Unit => Ok(LocalType::Unit),
        Behaviour::Lit(l) => Ok(LocalType::Base(l.base())),
        Behaviour::Var(x) => ctx
            .vars
            .get(x)
            .cloned()
            .ok_or_else(|| LocalTypeError::UnknownName(x.to_string())),
        Behaviour::Call { name, .. } | Behaviour::Extern { name, .. } => ctx
            .funcs
            .get(name)
            .cloned()
            .ok_or_else(|| LocalTypeError::UnknownName(name.to_string())),
        Behaviour::Pair(a, b2) => Ok(LocalType::Prod(
            Box::new(synth_behaviour(ctx, a)?),
            Box::new(synth_behaviour(ctx, b2)?),
        )),
        Behaviour::Abs { param, annot, body } => {
            let mut inner = ctx.clone();
            inner.vars.insert(param.clone(), annot.clone());
            let cod = synth_behaviour(&inner, body)?;
            Ok(LocalType::Arrow(Box::new(annot.clone()), Box::new(cod)))
        }
        Behaviour::App(f, a) => match f.as_ref() {
            Behaviour::Send { .. } => {
                synth_behaviour(ctx, a).or(Ok(LocalType::Bot))?;
                Ok(LocalType::Bot)
            }
            Behaviour::Fst | Behaviour::Snd => {
                match lexpose(&ctx.sigma, &synth_behaviour(ctx, a)?) {
                    LocalType::Prod(l, r) => {
                        Ok(*if matches!(f.as_ref(), Behaviour::Fst) { l } else { r })
                    }
                    LocalType::Bot => Ok(LocalType::Bot),
                    found => Err(LocalTypeError::Mismatch {
                        expected: "a product".into(),
                        found: print_local_type(&found),
                    }),
                }
            }
            _ => match synth_behaviour(ctx, f)? {
                LocalType::Arrow(dom, cod) => {
                    check_behaviour(ctx, a, &dom)?;
                    Ok(*cod)
                }
                LocalType::Bot => {
                    check_behaviour(ctx, a, &LocalType::Bot)?;
                    Ok(LocalType::Bot)
                }
                found => Err(LocalTypeError::Mismatch {
                    expected: "a function".into(),
                    found: print_local_type(&found),
                }),
            },
        },
        Behaviour::Choice { cont, .. } => synth_behaviour(ctx, cont),
        other => Err(LocalTypeError::CannotInfer(print_behaviour(other))),
    }
}

// ---------------------------------------------------------------------------
// Printing and parsing
// ---------------------------------------------------------------------------

pub fn print_local_type(ty: &LocalType) -> String {
    fn fmt(ty: &LocalType, prec: u8, out: &mut String) {
        match ty {
            LocalType::Unit => out.push_str("Unit"),
            LocalType::Bot => out.push_str("Bot"),
            LocalType::Base(b) => out.push_str(&b.to_string()),
            LocalType::Var { name, index } => out.push_str(&format!("{name}_{index}")),
            LocalType::Arrow(a, b) => {
                if prec > 0 {
                    out.push('(');
                }
                fmt(a, 1, out);
                out.push_str(" -> ");
                fmt(b, 0, out);
                if prec > 0 {
                    out.push(')');
                }
            }
            LocalType::Sum(a, b) => {
                if prec > 1 {
                    out.push('(');
                }
                fmt(a, 1, out);
                out.push_str(" + ");
                fmt(b, 2, out);
                if prec > 1 {
                    out.push(')');
                }
            }
            LocalType::Prod(a, b) => {
                if prec > 2 {
                    out.push('(');
                }
                fmt(a, 2, out);
                out.push_str(" * ");
                fmt(b, 3, out);
                if prec > 2 {
                    out.push(')');
                }
            }
        }
    }
    let mut s = String::new();
    fmt(ty, 0, &mut s);
    s
}

pub fn print_behaviour(b: &Behaviour) -> String {
    fn fmt(b: &Behaviour, prec: u8, out: &mut String) {
        match b {
            Behaviour::Var(x) => out.push_str(x.as_str()),
            Behaviour::Unit => out.push_str("()"),
            Behaviour::Bot => out.push_str("Bot"),
            Behaviour::Fst => out.push_str("fst"),
            Behaviour::Snd => out.push_str("snd"),
            Behaviour::Lit(BaseLit::Int(n)) => out.push_str(&n.to_string()),
            Behaviour::Lit(BaseLit::Str(s)) => out.push_str(&format!("{s:?}")),
            Behaviour::Send { to } => out.push_str(&format!("send[{to}]")),
            Behaviour::Recv { from } => out.push_str(&format!("recv[{from}]")),
            Behaviour::Extern { name, .. } => out.push_str(name.as_str()),
            Behaviour::Call { name, roles } => {
                let roles: Vec<_> = roles.iter().map(Role::as_str).collect();
                out.push_str(&format!("{name}({})", roles.join(", ")));
            }
            Behaviour::App(f, a) => {
                let parens = prec > 1;
                if parens {
                    out.push('(');
                }
                fmt(f, 1, out);
                out.push(' ');
                fmt(a, 2, out);
                if parens {
                    out.push(')');
                }
            }
            Behaviour::Inl(v) | Behaviour::Inr(v) => {
                let kw = if matches!(b, Behaviour::Inl(_)) {
                    "inl"
                } else {
                    "inr"
                };
                let parens = prec > 1;
                if parens {
                    out.push('(');
                }
                out.push_str(kw);
                out.push(' ');
                fmt(v, 2, out);
                if parens {
                    out.push(')');
                }
            }
            Behaviour::Pair(a, b2) => {
                let parens = prec > 1;
                if parens {
                    out.push('(');
                }
                out.push_str("Pair ");
                fmt(a, 2, out);
                out.push(' ');
                fmt(b2, 2, out);
                if parens {
                    out.push(')');
                }
            }
            Behaviour::Abs { param, annot, body } => {
                let parens = prec > 0;
                if parens {
                    out.push('(');
                }
                out.push_str(&format!("fun {param} : {} . ", print_local_type(annot)));
                fmt(body, 0, out);
                if parens {
                    out.push(')');
                }
            }
            Behaviour::Case {
                scrut,
                left_var,
                left,
                right_var,
                right,
            } => {
                let parens = prec > 0;
                if parens {
                    out.push('(');
                }
                out.push_str("case ");
                fmt(scrut, 1, out);
                out.push_str(&format!(" of inl {left_var} => "));
                fmt(left, 0, out);
                out.push_str(&format!(" | inr {right_var} => "));
                fmt(right, 0, out);
                if parens {
                    out.push(')');
                }
            }
            Behaviour::Choice { to, label, cont } => {
                let parens = prec > 0;
                if parens {
                    out.push('(');
                }
                out.push_str(&format!("choice[{to}] {label}; "));
                fmt(cont, 0, out);
                if parens {
                    out.push(')');
                }
            }
            Behaviour::Offer { from, branches } => {
                out.push_str(&format!("offer[{from}] {{ "));
                let mut first = true;
                for (l, branch) in branches {
                    if !first {
                        out.push_str(" | ");
                    }
                    first = false;
                    out.push_str(&format!("{l}: "));
                    fmt(branch, 0, out);
                }
                out.push_str(" }");
            }
        }
    }
    let mut s = String::new();
    fmt(b, 0, &mut s);
    s
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("behaviour parse error at {pos}: {message}")]
pub struct BParseError {
    pub pos: usize,
    pub message: String,
}

struct BParser<'a> {
    toks: Vec<(usize, String)>,
    pos: usize,
    externs: &'a BTreeMap<FuncName, usize>,
}

fn blex(input: &str) -> Result<Vec<(usize, String)>, BParseError> {
    let mut toks = Vec::new();
    let bytes: Vec<char> = input.chars().collect();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '-' && i + 1 < bytes.len() && bytes[i + 1] == '-' {
            while i < bytes.len() && bytes[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c == '-' && i + 1 < bytes.len() && bytes[i + 1] == '>' {
            toks.push((i, "->".into()));
            i += 2;
            continue;
        }
        if c == '=' && i + 1 < bytes.len() && bytes[i + 1] == '>' {
            toks.push((i, "=>".into()));
            i += 2;
            continue;
        }
        if c.is_ascii_alphanumeric() || c == '_' {
            let start = i;
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '_') {
                i += 1;
            }
            toks.push((start, bytes[start..i].iter().collect()));
            continue;
        }
        if c == '"' {
            let start = i;
            i += 1;
            let mut s = String::from("\"");
            while i < bytes.len() && bytes[i] != '"' {
                if bytes[i] == '\\' && i + 1 < bytes.len() {
                    s.push(bytes[i]);
                    i += 1;
                }
                s.push(bytes[i]);
                i += 1;
            }
            if i >= bytes.len() {
                return Err(BParseError {
                    pos: start,
                    message: "unterminated string".into(),
                });
            }
            s.push('"');
            i += 1;
            toks.push((start, s));
            continue;
        }
        if "()[]{},.:;|+*".contains(c) {
            toks.push((i, c.to_string()));
            i += 1;
            continue;
        }
        return Err(BParseError {
            pos: i,
            message: format!("unexpected character {c:?}"),
        });
    }
    toks.push((input.len(), "<eof>".into()));
    Ok(toks)
}

impl<'a> BParser<'a> {
    fn peek(&self) -> &str {
        &self.toks[self.pos].1
    }

    fn peek2(&self) -> &str {
        &self.toks[(self.pos + 1).min(self.toks.len() - 1)].1
    }

    fn next(&mut self) -> String {
        let t = self.toks[self.pos].1.clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn err<T>(&self, message: impl Into<String>) -> Result<T, BParseError> {
        Err(BParseError {
            pos: self.toks[self.pos].0,
            message: message.into(),
        })
    }

    fn eat(&mut self, tok: &str) -> Result<(), BParseError> {
        if self.peek() == tok {
            self.next();
            Ok(())
        } else {
            self.err(format!("expected {tok:?}, found {:?}", self.peek()))
        }
    }

    fn role(&mut self) -> Result<Role, BParseError> {
        let t = self.next();
        if t.chars().next().is_some_and(|c| c.is_ascii_uppercase()) {
            Ok(Role::new(t))
        } else {
            self.err("expected a role")
        }
    }

    fn ltype(&mut self) -> Result<LocalType, BParseError> {
        let dom = self.ltype_sum()?;
        if self.peek() == "->" {
            self.next();
            let cod = self.ltype()?;
            Ok(LocalType::Arrow(Box::new(dom), Box::new(cod)))
        } else {
            Ok(dom)
        }
    }

    fn ltype_sum(&mut self) -> Result<LocalType, BParseError> {
        let mut left = self.ltype_prod()?;
        while self.peek() == "+" {
            self.next();
            let right = self.ltype_prod()?;
            left = LocalType::Sum(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn ltype_prod(&mut self) -> Result<LocalType, BParseError> {
        let mut left = self.ltype_atom()?;
        while self.peek() == "*" {
            self.next();
            let right = self.ltype_atom()?;
            left = LocalType::Prod(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn ltype_atom(&mut self) -> Result<LocalType, BParseError> {
        match self.peek() {
            "(" => {
                self.next();
                if self.peek() == ")" {
                    self.next();
                    return Ok(LocalType::Unit);
                }
                let t = self.ltype()?;
                self.eat(")")?;
                Ok(t)
            }
            "Unit" => {
                self.next();
                Ok(LocalType::Unit)
            }
            "Bot" => {
                self.next();
                Ok(LocalType::Bot)
            }
            "Int" => {
                self.next();
                Ok(LocalType::Base(BaseTy::Int))
            }
            "String" => {
                self.next();
                Ok(LocalType::Base(BaseTy::Str))
            }
            t if t.chars().next().is_some_and(|c| c.is_ascii_uppercase()) => {
                let t = self.next();
                match t.rsplit_once('_') {
                    Some((name, idx)) if idx.chars().all(|c| c.is_ascii_digit()) => {
                        Ok(LocalType::Var {
                            name: TypeName::new(name),
                            index: idx.parse().unwrap(),
                        })
                    }
                    _ => self.err(format!("expected an indexed type variable, found {t:?}")),
                }
            }
            _ => self.err("expected a local type"),
        }
    }

    fn behaviour(&mut self) -> Result<Behaviour, BParseError> {
        match self.peek() {
            "fun" => {
                self.next();
                let param = Var::new(self.next());
                self.eat(":")?;
                let annot = self.ltype()?;
                self.eat(".")?;
                let body = self.behaviour()?;
                Ok(labs(param, annot, body))
            }
            "case" => {
                self.next();
                let scrut = self.app()?;
                self.eat("of")?;
                self.eat("inl")?;
                let left_var = Var::new(self.next());
                self.eat("=>")?;
                let left = self.behaviour()?;
                self.eat("|")?;
                self.eat("inr")?;
                let right_var = Var::new(self.next());
                self.eat("=>")?;
                let right = self.behaviour()?;
                Ok(Behaviour::Case {
                    scrut: bx(scrut),
                    left_var,
                    left: bx(left),
                    right_var,
                    right: bx(right),
                })
            }
            "choice" => {
                self.next();
                self.eat("[")?;
                let to = self.role()?;
                self.eat("]")?;
                let label = SelLabel::new(self.next());
                self.eat(";")?;
                let cont = self.behaviour()?;
                Ok(Behaviour::Choice {
                    to,
                    label,
                    cont: bx(cont),
                })
            }
            "offer" => {
                self.next();
                self.eat("[")?;
                let from = self.role()?;
                self.eat("]")?;
                self.eat("{")?;
                let mut branches = BTreeMap::new();
                loop {
                    let label = SelLabel::new(self.next());
                    self.eat(":")?;
                    let b = self.behaviour()?;
                    branches.insert(label, b);
                    if self.peek() == "|" {
                        self.next();
                    } else {
                        break;
                    }
                }
                self.eat("}")?;
                Ok(Behaviour::Offer { from, branches })
            }
            _ => self.app(),
        }
    }

    fn starts_atom(&self) -> bool {
        let t = self.peek();
        matches!(t, "(" | "fst" | "snd" | "send" | "recv" | "Bot" | "inl" | "inr" | "Pair")
            || t.starts_with('"')
            || t.chars().next().is_some_and(|c| c.is_ascii_digit())
            || t.chars()
                .next()
                .is_some_and(|c| c.is_ascii_lowercase() || c == '$')
    }

    fn app(&mut self) -> Result<Behaviour, BParseError> {
        let mut head = self.prefix()?;
        while self.starts_atom() {
            let arg = self.prefix()?;
            head = lapp(head, arg);
        }
        Ok(head)
    }

    fn prefix(&mut self) -> Result<Behaviour, BParseError> {
        match self.peek() {
            "inl" => {
                self.next();
                Ok(Behaviour::Inl(bx(self.atom()?)))
            }
            "inr" => {
                self.next();
                Ok(Behaviour::Inr(bx(self.atom()?)))
            }
            "Pair" => {
                self.next();
                let a = self.atom()?;
                let b = self.atom()?;
                Ok(Behaviour::Pair(bx(a), bx(b)))
            }
            _ => self.atom(),
        }
    }

    fn atom(&mut self) -> Result<Behaviour, BParseError> {
        let t = self.peek().to_string();
        match t.as_str() {
            "(" => {
                if self.peek2() == ")" {
                    self.next();
                    self.next();
                    return Ok(Behaviour::Unit);
                }
                self.next();
                let b = self.behaviour()?;
                self.eat(")")?;
                Ok(b)
            }
            "fst" => {
                self.next();
                Ok(Behaviour::Fst)
            }
            "snd" => {
                self.next();
                Ok(Behaviour::Snd)
            }
            "Bot" => {
                self.next();
                Ok(Behaviour::Bot)
            }
            "send" | "recv" => {
                self.next();
                self.eat("[")?;
                let role = self.role()?;
                self.eat("]")?;
                Ok(if t == "send" {
                    Behaviour::Send { to: role }
                } else {
                    Behaviour::Recv { from: role }
                })
            }
            _ if t.starts_with('"') => {
                self.next();
                let inner = &t[1..t.len() - 1];
                let unescaped = inner.replace("\\\"", "\"").replace("\\\\", "\\");
                Ok(Behaviour::Lit(BaseLit::Str(unescaped)))
            }
            _ if t.chars().next().is_some_and(|c| c.is_ascii_digit()) => {
                self.next();
                let n: i64 = t
                    .parse()
                    .map_err(|_| BParseError {
                        pos: self.toks[self.pos].0,
                        message: "bad integer".into(),
                    })?;
                Ok(Behaviour::Lit(BaseLit::Int(n)))
            }
            _ if t.chars().next().is_some_and(|c| c.is_ascii_lowercase() || c == '$') => {
                let ident_end = self.toks[self.pos].0 + t.chars().count();
                self.next();
                let name = FuncName::new(t.clone());
                // A call's parenthesis is adjacent (`f_1(S)`, `f_1()`);
                // an application argument is separated (`f (recv[S] Bot)`).
                let adjacent_paren = self.peek() == "(" && self.toks[self.pos].0 == ident_end;
                if adjacent_paren {
                    self.next();
                    let mut roles = Vec::new();
                    if self.peek() != ")" {
                        roles.push(self.role()?);
                        while self.peek() == "," {
                            self.next();
                            roles.push(self.role()?);
                        }
                    }
                    self.eat(")")?;
                    Ok(Behaviour::Call { name, roles })
                } else if let Some(&arity) = self.externs.get(&name) {
                    Ok(Behaviour::Extern { name, arity })
                } else {
                    Ok(Behaviour::Var(Var::new(t)))
                }
            }
            _ => self.err(format!("expected a behaviour atom, found {t:?}")),
        }
    }
}

/// Parse a behaviour. `externs` maps extern names to arities so that bare
/// occurrences resolve to extern nodes rather than variables.
pub fn parse_behaviour_with(
    input: &str,
    externs: &BTreeMap<FuncName, usize>,
) -> Result<Behaviour, BParseError> {
    let toks = blex(input)?;
    let mut p = BParser {
        toks,
        pos: 0,
        externs,
    };
    let b = p.behaviour()?;
    if p.peek() != "<eof>" {
        return p.err("trailing input");
    }
    Ok(b)
}

pub fn parse_behaviour(input: &str) -> Result<Behaviour, BParseError> {
    parse_behaviour_with(input, &BTreeMap::new())
}

/// Parse `R[ behaviour ] | S[ behaviour ] | ...`.
pub fn parse_network(input: &str) -> Result<Network, BParseError> {
    let toks = blex(input)?;
    let mut p = BParser {
        toks,
        pos: 0,
        externs: &BTreeMap::new(),
    };
    let mut procs = BTreeMap::new();
    loop {
        let role = p.role()?;
        p.eat("[")?;
        let b = p.behaviour()?;
        p.eat("]")?;
        procs.insert(role, b);
        if p.peek() == "|" {
            p.next();
        } else {
            break;
        }
    }
    if p.peek() != "<eof>" {
        return p.err("trailing input");
    }
    Ok(Network { procs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::Scheduler;

    fn env<'a>(defs: &'a ProjectedDefs, externs: &'a ExternTable) -> NetEnv<'a> {
        NetEnv { defs, externs }
    }

    #[test]
    fn bot_applied_to_bot_collapses() {
        let b = lapp(Behaviour::Bot, Behaviour::Bot);
        let rewrites = lrewrites_one(&b);
        assert!(rewrites
            .iter()
            .any(|(tag, t)| *tag == LRewriteTag::Botm && *t == Behaviour::Bot));
    }

    #[test]
    fn offer_alone_has_no_rewrites() {
        let b = Behaviour::Offer {
            from: Role::new("S"),
            branches: BTreeMap::from([(SelLabel::new("l"), Behaviour::Unit)]),
        };
        assert!(lrewrites_one(&b).is_empty());
    }

    #[test]
    fn send_of_closed_value_steps_to_bot() {
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let b = lapp(
            Behaviour::Send {
                to: Role::new("R"),
            },
            Behaviour::Lit(BaseLit::Int(5)),
        );
        let steps = behaviour_steps(&b, &e, 4);
        assert_eq!(steps.len(), 1);
        assert!(matches!(steps[0].label, BLabel::Send { .. }));
        assert_eq!(steps[0].result, Behaviour::Bot);
    }

    #[test]
    fn recv_applied_to_bot_is_input_parametric() {
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let b = lapp(
            Behaviour::Recv {
                from: Role::new("S"),
            },
            Behaviour::Bot,
        );
        let steps = behaviour_steps(&b, &e, 4);
        assert_eq!(steps.len(), 1);
        let hole = steps[0].hole.clone().unwrap();
        assert_eq!(steps[0].result, Behaviour::Var(hole));
    }

    #[test]
    fn rendezvous_transports_the_value_with_role_renaming() {
        // S[send[R] (fun x:Int. send[S] x-ish)] would need role renaming;
        // use a simple payload mentioning S itself via a recv.
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let n = parse_network("S[send[R] 5] | R[recv[S] Bot]").unwrap();
        let steps = network_step(&n, &e, 4);
        assert_eq!(steps.len(), 1);
        let expected = parse_network("S[Bot] | R[5]").unwrap();
        assert_eq!(steps[0].network, expected);
        assert_eq!(
            steps[0].roles,
            BTreeSet::from([Role::new("S"), Role::new("R")])
        );
    }

    #[test]
    fn selection_rendezvous_matches_labels() {
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let n =
            parse_network("S[choice[R] ok; ()] | R[offer[S] { ok: 1 | ko: 2 }]").unwrap();
        let steps = network_step(&n, &e, 4);
        assert_eq!(steps.len(), 1);
        let expected = parse_network("S[()] | R[1]").unwrap();
        assert_eq!(steps[0].network, expected);
    }

    #[test]
    fn mismatched_network_deadlocks_with_report() {
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let n = parse_network("S[send[R] 5] | R[()]").unwrap();
        let result = run_network(&n, &e, Scheduler::Deterministic, 100, 4);
        match result.outcome {
            NetOutcome::Deadlock(report) => {
                assert_eq!(
                    report.wants[&Role::new("S")],
                    vec!["send to R".to_string()]
                );
                assert!(report.wants[&Role::new("R")].is_empty());
            }
            other => panic!("expected deadlock, got {other:?}"),
        }
    }

    #[test]
    fn all_values_network_is_terminal_with_empty_trace() {
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let n = parse_network("A[()] | B[Bot]").unwrap();
        let result = run_network(&n, &e, Scheduler::Deterministic, 10, 4);
        assert!(matches!(result.outcome, NetOutcome::Terminal(_)));
        assert!(result.trace.steps.is_empty());
    }

    #[test]
    fn receives_under_abstractions_cannot_fire() {
        // the λ-label restriction: a recv inside an abstraction body is not
        // an available action, so only the outer pairing exists.
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let n = parse_network(
            "R[(fun x : Int . recv[S] Bot) (recv[S] Bot)] | S[(fun y : Bot . send[R] 1) (send[R] 2)]",
        )
        .unwrap();
        let steps = network_step(&n, &e, 8);
        // exactly one rendezvous: outer recv with outer send (value 2)
        let coms: Vec<_> = steps
            .iter()
            .filter_map(|s| match &s.matched {
                NetMatch::Com { value, .. } => Some(value.clone()),
                _ => None,
            })
            .collect();
        assert_eq!(coms, vec![Behaviour::Lit(BaseLit::Int(2))]);
    }

    #[test]
    fn crossed_receives_deadlock() {
        // both roles want to receive before sending: a genuine ordering
        // mismatch on the one channel between them.
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let n = parse_network("S[send[R] (recv[R] Bot)] | R[send[S] (recv[S] Bot)]").unwrap();
        let result = run_network(&n, &e, Scheduler::Deterministic, 100, 8);
        assert!(matches!(result.outcome, NetOutcome::Deadlock(_)));
    }

    #[test]
    fn behaviour_round_trips_through_printer_and_parser() {
        let src = "fun f : Int -> Int . fun val : Bot . send[C] (f (recv[C] Bot))";
        let b = parse_behaviour(src).unwrap();
        let printed = print_behaviour(&b);
        let reparsed = parse_behaviour(&printed).unwrap();
        assert!(alpha_eq_b(&b, &reparsed));
    }

    #[test]
    fn offer_branches_must_share_a_type() {
        let ctx = LocalContext::default();
        let good = parse_behaviour("offer[S] { a: 1 | b: 2 }").unwrap();
        assert!(check_behaviour(&ctx, &good, &LocalType::Base(BaseTy::Int)).is_ok());
        let bad = parse_behaviour("offer[S] { a: 1 | b: () }").unwrap();
        assert!(check_behaviour(&ctx, &bad, &LocalType::Base(BaseTy::Int)).is_err());
    }

    #[test]
    fn bot_typing_rules() {
        let ctx = LocalContext::default();
        assert!(check_behaviour(&ctx, &Behaviour::Bot, &LocalType::Bot).is_ok());
        let app = lapp(Behaviour::Bot, Behaviour::Bot);
        assert!(check_behaviour(&ctx, &app, &LocalType::Bot).is_ok());
        assert!(check_behaviour(&ctx, &Behaviour::Bot, &LocalType::Unit).is_err());
    }

    #[test]
    fn example_sender_residue_collapses_to_bot() {
        // after both sends fire the sender holds Bot Bot, which rewrites to
        // Bot and terminates.
        let defs = ProjectedDefs::new();
        let externs = ExternTable::standard();
        let e = env(&defs, &externs);
        let n = parse_network(
            "S[(send[R] (fun x : Int . x)) (send[R] 5)] | R[(recv[S] Bot) (recv[S] Bot)]",
        )
        .unwrap();
        let result = run_network(&n, &e, Scheduler::Deterministic, 100, 8);
        match result.outcome {
            NetOutcome::Terminal(final_net) => {
                assert_eq!(final_net.procs[&Role::new("S")], Behaviour::Bot);
                assert_eq!(
                    final_net.procs[&Role::new("R")],
                    Behaviour::Lit(BaseLit::Int(5))
                );
            }
            other => panic!("expected terminal, got {other:?}"),
        }
    }
}
