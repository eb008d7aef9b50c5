//! Endpoint projection: compiling a typed choreography to one behaviour
//! per role, together with the partial merge operator, the pruning order,
//! and the equivalence that absorbs `(fun x:Bot. B) Bot` wrappers.
//!
//! Projection consumes the decorated AST produced by the checker and never
//! re-infers types: the behaviour of a role at an application depends on
//! the roles of the function's type in the recorded derivation.
//!
//! The merge operator combines the projections of the two branches of a
//! `case` at roles that do not (yet) know which branch was taken: offers
//! union their branch maps, everything else must agree structurally. A
//! merge failure is a knowledge-of-choice violation and is reported as a
//! compile-time error.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::ast::{self, roles_of_type, FuncName, Role, Term, Type, TypeName};
use crate::process::{
    alpha_canon_b, alpha_eq_b, bx, free_vars_b, print_behaviour, subst_b, Behaviour, LocalContext,
    LocalSigma, LocalType, Network, ProjectedDefs,
};
use crate::typecheck::{Context, TypedTerm};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectError {
    #[error("cannot merge the branches at {role}: {left}  vs  {right} (at {})", path.join("."))]
    MergeUndefined {
        role: Role,
        left: String,
        right: String,
        path: Vec<String>,
    },
    #[error("type decoration is missing or malformed at {0}")]
    MissingDecoration(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeFailure {
    pub left: String,
    pub right: String,
    pub path: Vec<String>,
}

/// Project a type onto a role: structure is kept exactly when the role
/// participates in the type, `Bot` otherwise. The type variable `t@(R...)`
/// projects to the indexed local name `t_i` at its i-th role.
pub fn project_type(ty: &Type, role: &Role) -> LocalType {
    match ty {
        Type::Arrow { dom, extra, cod } => {
            let mut involved = extra.clone();
            involved.extend(roles_of_type(dom));
            involved.extend(roles_of_type(cod));
            if involved.contains(role) {
                LocalType::Arrow(
                    Box::new(project_type(dom, role)),
                    Box::new(project_type(cod, role)),
                )
            } else {
                LocalType::Bot
            }
        }
        Type::Sum(a, b) => {
            if roles_of_type(ty).contains(role) {
                LocalType::Sum(
                    Box::new(project_type(a, role)),
                    Box::new(project_type(b, role)),
                )
            } else {
                LocalType::Bot
            }
        }
        Type::Prod(a, b) => {
            if roles_of_type(ty).contains(role) {
                LocalType::Prod(
                    Box::new(project_type(a, role)),
                    Box::new(project_type(b, role)),
                )
            } else {
                LocalType::Bot
            }
        }
        Type::Unit(r) => {
            if r == role {
                LocalType::Unit
            } else {
                LocalType::Bot
            }
        }
        Type::Base { base, at } => {
            if at == role {
                LocalType::Base(*base)
            } else {
                LocalType::Bot
            }
        }
        Type::Var { name, roles } => match roles.iter().position(|r| r == role) {
            Some(i) => LocalType::Var {
                name: name.clone(),
                index: i + 1,
            },
            None => LocalType::Bot,
        },
    }
}

/// The residual name of definition `f` projected at its i-th role
/// (1-based), e.g. `remoteMap_1`.
pub fn residual_name(f: &FuncName, position: usize) -> FuncName {
    FuncName::new(format!("{f}_{position}"))
}

/// Project a typed choreography onto a role.
pub fn project_term(typed: &TypedTerm, role: &Role) -> Result<Behaviour, ProjectError> {
    let b = go(typed, role)?;
    Ok(b)
}

fn malformed(typed: &TypedTerm) -> ProjectError {
    ProjectError::MissingDecoration(crate::surface::print_term(&typed.node))
}

fn go(typed: &TypedTerm, role: &Role) -> Result<Behaviour, ProjectError> {
    match &typed.node {
        Term::App { .. } => {
            let [func, arg] = typed.children.as_slice() else {
                return Err(malformed(typed));
            };
            let in_func_type = roles_of_type(&func.ty).contains(role);
            let in_both_terms = func.derivation_roles().contains(role)
                && arg.derivation_roles().contains(role);
            let pf = go(func, role)?;
            let pa = go(arg, role)?;
            if in_func_type || in_both_terms {
                Ok(Behaviour::App(bx(pf), bx(pa)))
            } else if pf == Behaviour::Bot && pa == Behaviour::Bot {
                Ok(Behaviour::Bot)
            } else if pa == Behaviour::Bot {
                Ok(pf)
            } else {
                Ok(pa)
            }
        }
        Term::Abs { param, annot, .. } => {
            let [body] = typed.children.as_slice() else {
                return Err(malformed(typed));
            };
            if roles_of_type(&typed.ty).contains(role) {
                Ok(Behaviour::Abs {
                    param: param.clone(),
                    annot: project_type(annot, role),
                    body: bx(go(body, role)?),
                })
            } else {
                Ok(Behaviour::Bot)
            }
        }
        Term::Case {
            left_var,
            right_var,
            ..
        } => {
            let [scrut, left, right] = typed.children.as_slice() else {
                return Err(malformed(typed));
            };
            if roles_of_type(&scrut.ty).contains(role) {
                return Ok(Behaviour::Case {
                    scrut: bx(go(scrut, role)?),
                    left_var: left_var.clone(),
                    left: bx(go(left, role)?),
                    right_var: right_var.clone(),
                    right: bx(go(right, role)?),
                });
            }
            let ps = go(scrut, role)?;
            let pl = go(left, role)?;
            let pr = go(right, role)?;
            if ps == Behaviour::Bot && pl == Behaviour::Bot && pr == Behaviour::Bot {
                Ok(Behaviour::Bot)
            } else if pl == Behaviour::Bot && pr == Behaviour::Bot {
                Ok(ps)
            } else if ps == Behaviour::Bot {
                merge_at(role, &pl, &pr)
            } else {
                let merged = merge_at(role, &pl, &pr)?;
                let fresh = ast::fresh_var("k");
                Ok(Behaviour::App(
                    bx(Behaviour::Abs {
                        param: fresh,
                        annot: LocalType::Bot,
                        body: bx(merged),
                    }),
                    bx(ps),
                ))
            }
        }
        Term::Sel {
            from, to, label, ..
        } => {
            let [cont] = typed.children.as_slice() else {
                return Err(malformed(typed));
            };
            let pc = go(cont, role)?;
            if role == from && from != to {
                Ok(Behaviour::Choice {
                    to: to.clone(),
                    label: label.clone(),
                    cont: bx(pc),
                })
            } else if role == to && from != to {
                Ok(Behaviour::Offer {
                    from: from.clone(),
                    branches: BTreeMap::from([(label.clone(), pc)]),
                })
            } else {
                Ok(pc)
            }
        }
        Term::Com { from, to } => {
            if from == to && role == from {
                // self-communications project to the identity function
                let Type::Arrow { dom, .. } = &typed.ty else {
                    return Err(malformed(typed));
                };
                let x = ast::fresh_var("x");
                Ok(Behaviour::Abs {
                    param: x.clone(),
                    annot: project_type(dom, role),
                    body: bx(Behaviour::Var(x)),
                })
            } else if role == from {
                Ok(Behaviour::Send { to: to.clone() })
            } else if role == to {
                Ok(Behaviour::Recv { from: from.clone() })
            } else {
                Ok(Behaviour::Bot)
            }
        }
        Term::Unit(at) => Ok(if role == at {
            Behaviour::Unit
        } else {
            Behaviour::Bot
        }),
        Term::Lit { val, at } => Ok(if role == at {
            Behaviour::Lit(val.clone())
        } else {
            Behaviour::Bot
        }),
        Term::Extern { name, at, arity } => Ok(if role == at {
            Behaviour::Extern {
                name: name.clone(),
                arity: *arity,
            }
        } else {
            Behaviour::Bot
        }),
        Term::Var(x) => Ok(if roles_of_type(&typed.ty).contains(role) {
            Behaviour::Var(x.clone())
        } else {
            Behaviour::Bot
        }),
        Term::Call { name, roles } => match roles.iter().position(|r| r == role) {
            Some(i) => {
                let residual: Vec<Role> = roles
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != i)
                    .map(|(_, r)| r.clone())
                    .collect();
                Ok(Behaviour::Call {
                    name: residual_name(name, i + 1),
                    roles: residual,
                })
            }
            None => Ok(Behaviour::Bot),
        },
        Term::Pair(..) => {
            let [a, b] = typed.children.as_slice() else {
                return Err(malformed(typed));
            };
            if roles_of_type(&typed.ty).contains(role) {
                Ok(Behaviour::Pair(bx(go(a, role)?), bx(go(b, role)?)))
            } else {
                Ok(Behaviour::Bot)
            }
        }
        Term::Fst => Ok(if roles_of_type(&typed.ty).contains(role) {
            Behaviour::Fst
        } else {
            Behaviour::Bot
        }),
        Term::Snd => Ok(if roles_of_type(&typed.ty).contains(role) {
            Behaviour::Snd
        } else {
            Behaviour::Bot
        }),
        Term::Inl(..) => {
            let [payload] = typed.children.as_slice() else {
                return Err(malformed(typed));
            };
            if roles_of_type(&typed.ty).contains(role) {
                Ok(Behaviour::Inl(bx(go(payload, role)?)))
            } else {
                Ok(Behaviour::Bot)
            }
        }
        Term::Inr(..) => {
            let [payload] = typed.children.as_slice() else {
                return Err(malformed(typed));
            };
            if roles_of_type(&typed.ty).contains(role) {
                Ok(Behaviour::Inr(bx(go(payload, role)?)))
            } else {
                Ok(Behaviour::Bot)
            }
        }
    }
}

fn merge_at(role: &Role, a: &Behaviour, b: &Behaviour) -> Result<Behaviour, ProjectError> {
    merge(a, b).map_err(|f| ProjectError::MergeUndefined {
        role: role.clone(),
        left: f.left,
        right: f.right,
        path: f.path,
    })
}

/// The partial merge operator `⊔`: homomorphic on identical constructors,
/// unions offer branches (shared labels merged recursively), undefined
/// otherwise.
pub fn merge(a: &Behaviour, b: &Behaviour) -> Result<Behaviour, MergeFailure> {
    fn fail(a: &Behaviour, b: &Behaviour) -> MergeFailure {
        MergeFailure {
            left: print_behaviour(a),
            right: print_behaviour(b),
            path: Vec::new(),
        }
    }
    fn inside(mut f: MergeFailure, frame: &str) -> MergeFailure {
        f.path.insert(0, frame.to_string());
        f
    }
    match (a, b) {
        (Behaviour::Offer { from, branches }, Behaviour::Offer { from: f2, branches: b2 }) => {
            if from != f2 {
                return Err(fail(a, b));
            }
            let mut merged = BTreeMap::new();
            for (label, left) in branches {
                match b2.get(label) {
                    Some(right) => {
                        let m = merge(left, right)
                            .map_err(|f| inside(f, &format!("offer branch {label}")))?;
                        merged.insert(label.clone(), m);
                    }
                    None => {
                        merged.insert(label.clone(), left.clone());
                    }
                }
            }
            for (label, right) in b2 {
                merged.entry(label.clone()).or_insert_with(|| right.clone());
            }
            Ok(Behaviour::Offer {
                from: from.clone(),
                branches: merged,
            })
        }
        (
            Behaviour::Choice { to, label, cont },
            Behaviour::Choice {
                to: t2,
                label: l2,
                cont: c2,
            },
        ) => {
            if to != t2 || label != l2 {
                return Err(fail(a, b));
            }
            Ok(Behaviour::Choice {
                to: to.clone(),
                label: label.clone(),
                cont: bx(merge(cont, c2).map_err(|f| inside(f, "choice"))?),
            })
        }
        (Behaviour::App(f1, a1), Behaviour::App(f2, a2)) => Ok(Behaviour::App(
            bx(merge(f1, f2).map_err(|f| inside(f, "function"))?),
            bx(merge(a1, a2).map_err(|f| inside(f, "argument"))?),
        )),
        (
            Behaviour::Abs {
                param: x1,
                annot: t1,
                body: b1,
            },
            Behaviour::Abs {
                param: x2,
                annot: t2,
                body: b2,
            },
        ) => {
            if t1 != t2 {
                return Err(fail(a, b));
            }
            let (param, left, right) = align_binders(x1, b1, x2, b2);
            Ok(Behaviour::Abs {
                param,
                annot: t1.clone(),
                body: bx(merge(&left, &right).map_err(|f| inside(f, "body"))?),
            })
        }
        (
            Behaviour::Case {
                scrut: s1,
                left_var: lv1,
                left: l1,
                right_var: rv1,
                right: r1,
            },
            Behaviour::Case {
                scrut: s2,
                left_var: lv2,
                left: l2,
                right_var: rv2,
                right: r2,
            },
        ) => {
            let scrut = merge(s1, s2).map_err(|f| inside(f, "scrutinee"))?;
            let (left_var, la, lb) = align_binders(lv1, l1, lv2, l2);
            let (right_var, ra, rb) = align_binders(rv1, r1, rv2, r2);
            Ok(Behaviour::Case {
                scrut: bx(scrut),
                left_var,
                left: bx(merge(&la, &lb).map_err(|f| inside(f, "left branch"))?),
                right_var,
                right: bx(merge(&ra, &rb).map_err(|f| inside(f, "right branch"))?),
            })
        }
        (Behaviour::Inl(v1), Behaviour::Inl(v2)) => {
            Ok(Behaviour::Inl(bx(merge(v1, v2).map_err(|f| inside(f, "inl"))?)))
        }
        (Behaviour::Inr(v1), Behaviour::Inr(v2)) => {
            Ok(Behaviour::Inr(bx(merge(v1, v2).map_err(|f| inside(f, "inr"))?)))
        }
        (Behaviour::Pair(a1, b1), Behaviour::Pair(a2, b2)) => Ok(Behaviour::Pair(
            bx(merge(a1, a2).map_err(|f| inside(f, "first"))?),
            bx(merge(b1, b2).map_err(|f| inside(f, "second"))?),
        )),
        _ => {
            if a == b {
                Ok(a.clone())
            } else {
                Err(fail(a, b))
            }
        }
    }
}

/// Rename two binders to a common name (keeping the first when possible).
fn align_binders(
    x1: &ast::Var,
    b1: &Behaviour,
    x2: &ast::Var,
    b2: &Behaviour,
) -> (ast::Var, Behaviour, Behaviour) {
    if x1 == x2 {
        return (x1.clone(), b1.clone(), b2.clone());
    }
    if !free_vars_b(b2).contains(x1) {
        let renamed = subst_b(b2, x2, &Behaviour::Var(x1.clone()));
        return (x1.clone(), b1.clone(), renamed);
    }
    let fresh = ast::fresh_var(x1.as_str());
    let left = subst_b(b1, x1, &Behaviour::Var(fresh.clone()));
    let right = subst_b(b2, x2, &Behaviour::Var(fresh.clone()));
    (fresh, left, right)
}

/// Pruning: `B ⊒ B'` iff `B ⊔ B' = B` (B offers at least the behaviours
/// of B').
pub fn prune_geq(a: &Behaviour, b: &Behaviour) -> bool {
    match merge(a, b) {
        Ok(m) => alpha_eq_b(&m, a),
        Err(_) => false,
    }
}

/// Erase `(fun x:Bot. B) Bot` wrappers (the least congruence with
/// `P ≡ (fun x:Bot. P) Bot`), bottom-up to a normal form.
pub fn equiv_normalize(b: &Behaviour) -> Behaviour {
    let normalized = match b {
        Behaviour::App(f, a) => Behaviour::App(bx(equiv_normalize(f)), bx(equiv_normalize(a))),
        Behaviour::Abs { param, annot, body } => Behaviour::Abs {
            param: param.clone(),
            annot: annot.clone(),
            body: bx(equiv_normalize(body)),
        },
        Behaviour::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => Behaviour::Case {
            scrut: bx(equiv_normalize(scrut)),
            left_var: left_var.clone(),
            left: bx(equiv_normalize(left)),
            right_var: right_var.clone(),
            right: bx(equiv_normalize(right)),
        },
        Behaviour::Choice { to, label, cont } => Behaviour::Choice {
            to: to.clone(),
            label: label.clone(),
            cont: bx(equiv_normalize(cont)),
        },
        Behaviour::Offer { from, branches } => Behaviour::Offer {
            from: from.clone(),
            branches: branches
                .iter()
                .map(|(l, b)| (l.clone(), equiv_normalize(b)))
                .collect(),
        },
        Behaviour::Inl(v) => Behaviour::Inl(bx(equiv_normalize(v))),
        Behaviour::Inr(v) => Behaviour::Inr(bx(equiv_normalize(v))),
        Behaviour::Pair(a, b2) => Behaviour::Pair(bx(equiv_normalize(a)), bx(equiv_normalize(b2))),
        other => other.clone(),
    };
    if let Behaviour::App(f, a) = &normalized {
        if let (
            Behaviour::Abs {
                param,
                annot: LocalType::Bot,
                body,
            },
            Behaviour::Bot,
        ) = (f.as_ref(), a.as_ref())
        {
            if !free_vars_b(body).contains(param) {
                return equiv_normalize(body);
            }
        }
    }
    normalized
}

/// The equivalence generated by erasing `(fun x:Bot. B) Bot` wrappers.
pub fn equiv(a: &Behaviour, b: &Behaviour) -> bool {
    alpha_eq_b(&equiv_normalize(a), &equiv_normalize(b))
}

/// `B` dominates `B'` up to the wrapper equivalence: some behaviour
/// equivalent to `B'` is a pruning of `B`.
pub fn geq_behaviour(a: &Behaviour, b: &Behaviour) -> bool {
    let na = equiv_normalize(a);
    let nb = equiv_normalize(b);
    match merge(&na, &nb) {
        Ok(m) => alpha_eq_b(&m, &na),
        Err(_) => false,
    }
}

/// Pointwise network pruning modulo the wrapper equivalence.
pub fn net_geq(a: &Network, b: &Network) -> bool {
    let roles: BTreeSet<_> = a.procs.keys().chain(b.procs.keys()).cloned().collect();
    roles.iter().all(|r| {
        let ba = a.procs.get(r).cloned().unwrap_or(Behaviour::Bot);
        let bb = b.procs.get(r).cloned().unwrap_or(Behaviour::Bot);
        geq_behaviour(&ba, &bb)
    })
}

/// Project a closed typed choreography onto every role of its derivation.
pub fn project_network(typed: &TypedTerm) -> Result<Network, ProjectError> {
    let mut procs = BTreeMap::new();
    for role in typed.derivation_roles() {
        let b = project_term(typed, &role)?;
        procs.insert(role, b);
    }
    Ok(Network { procs })
}

/// Project every definition at every role position: one residual definition
/// per `(name, position)` pair, named `name_i`, parameterised by the
/// remaining roles.
pub fn project_defs(
    typed_defs: &BTreeMap<FuncName, TypedTerm>,
    defs: &ast::Definitions,
) -> Result<ProjectedDefs, ProjectError> {
    let mut out = ProjectedDefs::new();
    for (name, typed) in typed_defs {
        let (params, _) = defs
            .signatures
            .get(name)
            .ok_or_else(|| ProjectError::MissingDecoration(name.to_string()))?;
        for (i, at) in params.iter().enumerate() {
            let residual: Vec<Role> = params
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, r)| r.clone())
                .collect();
            let body = project_term(typed, at)?;
            out.insert(residual_name(name, i + 1), (residual, body));
        }
    }
    Ok(out)
}

/// The local typing context obtained by projecting `Σ` and `Γ` at every
/// role position (type definitions become indexed local definitions,
/// signatures become residual signatures).
pub fn project_context(ctx: &Context) -> (LocalSigma, LocalContext) {
    let mut sigma = LocalSigma::new();
    for (name, (params, body)) in &ctx.sigma {
        for (i, at) in params.iter().enumerate() {
            sigma.insert(
                ((*name).clone(), i + 1),
                project_type(body, at),
            );
        }
    }
    let mut funcs: BTreeMap<FuncName, LocalType> = BTreeMap::new();
    for (name, (params, sig)) in &ctx.funcs {
        for (i, at) in params.iter().enumerate() {
            funcs.insert(residual_name(name, i + 1), project_type(sig, at));
        }
    }
    for (name, (formal, ty)) in &ctx.externs {
        funcs.insert(name.clone(), project_type(ty, formal));
    }
    let local = LocalContext {
        sigma: sigma.clone(),
        vars: BTreeMap::new(),
        funcs,
    };
    (sigma, local)
}

/// Canonical printable form of a projection for golden comparisons.
pub fn canonical_print(b: &Behaviour) -> String {
    print_behaviour(&alpha_canon_b(&equiv_normalize(b)))
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct TypeNameIndex(pub TypeName, pub usize);

#[cfg(test)]
mod tests {
    use super::*;
    use crate::process::parse_behaviour;
    use crate::surface::{parse, parse_term, parse_type};
    use crate::typecheck::{check_program, check_term, Context};

    fn typed(term: &str, roles: &[&str], expected: Option<&str>) -> TypedTerm {
        let ctx = Context {
            theta: roles.iter().map(|r| Role::new(*r)).collect(),
            ..Context::default()
        };
        let term = parse_term(term).unwrap();
        let expected = expected.map(|t| parse_type(t).unwrap());
        check_term(&ctx, &term, expected.as_ref()).unwrap()
    }

    #[test]
    fn unit_projects_to_bot_at_other_roles() {
        let t = typed("()@S", &["S", "R"], None);
        assert_eq!(project_term(&t, &Role::new("S")).unwrap(), Behaviour::Unit);
        assert_eq!(project_term(&t, &Role::new("R")).unwrap(), Behaviour::Bot);
    }

    #[test]
    fn self_communication_projects_to_identity() {
        let t = typed("com[S,S]", &["S"], Some("Int@S -> Int@S"));
        let p = project_term(&t, &Role::new("S")).unwrap();
        let expected = parse_behaviour("fun x : Int . x").unwrap();
        assert!(alpha_eq_b(&p, &expected));
    }

    #[test]
    fn communication_projects_to_send_and_receive() {
        let t = typed("com[A,B] 5@A", &["A", "B"], None);
        let net = project_network(&t).unwrap();
        assert_eq!(
            net.procs[&Role::new("A")],
            parse_behaviour("send[B] 5").unwrap()
        );
        assert_eq!(
            net.procs[&Role::new("B")],
            parse_behaviour("recv[A] Bot").unwrap()
        );
    }

    #[test]
    fn projection_of_absent_role_is_bot() {
        let t = typed("(fun x : Int@A . x) 5@A", &["A", "B", "C"], None);
        assert_eq!(project_term(&t, &Role::new("C")).unwrap(), Behaviour::Bot);
    }

    #[test]
    fn remote_function_projections_match_the_expected_listings() {
        let src = "def remoteFunction(C, S) : (Int@S -> Int@S) -> Int@C ->{S} Int@C =\n  \
                   fun f : Int@S -> Int@S . fun v : Int@C . com[S,C] (f (com[C,S] v))\n";
        let prog = check_program(&parse(src).unwrap()).unwrap();
        let typed = &prog.typed_defs[&FuncName::new("remoteFunction")];
        let at_s = project_term(typed, &Role::new("S")).unwrap();
        let expect_s =
            parse_behaviour("fun f : Int -> Int . fun v : Bot . send[C] (f (recv[C] Bot))")
                .unwrap();
        assert!(
            alpha_eq_b(&at_s, &expect_s),
            "got {}",
            print_behaviour(&at_s)
        );
        let at_c = project_term(typed, &Role::new("C")).unwrap();
        let expect_c =
            parse_behaviour("fun f : Bot . fun v : Int . recv[S] (send[S] v)").unwrap();
        assert!(
            alpha_eq_b(&at_c, &expect_c),
            "got {}",
            print_behaviour(&at_c)
        );
    }

    #[test]
    fn residual_definitions_drop_the_projected_role() {
        let src = "def remoteFunction(C, S) : (Int@S -> Int@S) -> Int@C ->{S} Int@C =\n  \
                   fun f : Int@S -> Int@S . fun v : Int@C . com[S,C] (f (com[C,S] v))\n";
        let prog = check_program(&parse(src).unwrap()).unwrap();
        let projected = project_defs(&prog.typed_defs, &prog.defs).unwrap();
        let (residual, _) = &projected[&FuncName::new("remoteFunction_1")];
        assert_eq!(residual, &vec![Role::new("S")]);
        let (residual, _) = &projected[&FuncName::new("remoteFunction_2")];
        assert_eq!(residual, &vec![Role::new("C")]);
    }

    #[test]
    fn merge_unions_offer_branches() {
        let a = parse_behaviour("offer[R] { left: 0 }").unwrap();
        let b = parse_behaviour("offer[R] { left: 0 | right: 1 }").unwrap();
        let merged = merge(&a, &b).unwrap();
        assert_eq!(merged, b);
        assert!(prune_geq(&b, &a));
        assert!(!prune_geq(&a, &b));
    }

    #[test]
    fn merge_is_idempotent_and_rejects_mismatched_heads() {
        let b = parse_behaviour("fun x : Int . send[R] x").unwrap();
        assert_eq!(merge(&b, &b).unwrap(), b);
        let send = parse_behaviour("send[R]").unwrap();
        let recv = parse_behaviour("recv[R]").unwrap();
        assert!(merge(&send, &recv).is_err());
    }

    #[test]
    fn equiv_absorbs_bot_application_wrappers() {
        let p = parse_behaviour("send[R] 5").unwrap();
        let wrapped = parse_behaviour("(fun k : Bot . send[R] 5) Bot").unwrap();
        assert!(equiv(&p, &wrapped));
        assert!(!equiv(&p, &parse_behaviour("send[R] 6").unwrap()));
    }

    #[test]
    fn case_at_unknowing_role_merges_branches() {
        // case at A; role B receives a selection in both branches with
        // different labels, so B's projection is a two-branch offer.
        let src = "case (com[B,A] (inl ()@B)) of \
                   inl x => select[A,B] go; 1@B | inr y => select[A,B] stop; 2@B";
        // scrutinee needs a synthesisable sum: build via com of an annotated let
        let ctx = Context {
            theta: [Role::new("A"), Role::new("B")].into_iter().collect(),
            ..Context::default()
        };
        let term = parse_term(&format!(
            "(fun s : Unit@A + Unit@A . {}atch) 0@Z",
            ""
        ));
        let _ = (src, term, ctx);
        let t = typed(
            "(fun s : Unit@A + Unit@A . case s of inl x => select[A,B] go; 1@B | inr y => select[A,B] stop; 2@B) (inl ()@A)",
            &["A", "B"],
            None,
        );
        let at_b = project_term(&t, &Role::new("B")).unwrap();
        let expected = parse_behaviour(
            "(fun s : Bot . offer[A] { go: 1 | stop: 2 }) Bot",
        )
        .unwrap();
        assert!(
            equiv(&at_b, &expected),
            "got {}",
            print_behaviour(&at_b)
        );
    }

    #[test]
    fn knowledge_of_choice_violation_is_a_merge_error() {
        // branches differ at B but B is never told which branch was taken
        let t = typed(
            "(fun s : Unit@A + Unit@A . case s of inl x => 1@B | inr y => 2@B) (inl ()@A)",
            &["A", "B"],
            None,
        );
        let err = project_term(&t, &Role::new("B")).unwrap_err();
        assert!(matches!(err, ProjectError::MergeUndefined { .. }));
    }

    #[test]
    fn projection_types_check_locally() {
        let src = "def remoteFunction(C, S) : (Int@S -> Int@S) -> Int@C ->{S} Int@C =\n  \
                   fun f : Int@S -> Int@S . fun v : Int@C . com[S,C] (f (com[C,S] v))\n";
        let prog = check_program(&parse(src).unwrap()).unwrap();
        let (_, mut local) = project_context(&prog.ctx);
        let typed = &prog.typed_defs[&FuncName::new("remoteFunction")];
        let sig = parse_type("(Int@S -> Int@S) -> Int@C ->{S} Int@C").unwrap();
        for role in ["C", "S"] {
            let role = Role::new(role);
            let p = project_term(typed, &role).unwrap();
            let ty = project_type(&sig, &role);
            local.vars.clear();
            crate::process::check_behaviour(&local, &p, &ty).unwrap();
        }
    }
}
