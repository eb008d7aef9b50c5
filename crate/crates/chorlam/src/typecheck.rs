//! The typing judgement `Θ;Σ;Γ ⊢ M : T` and definition checking.
//!
//! `Θ` is the set of roles available for typing the term, `Σ` the
//! role-parameterised recursive type definitions, and `Γ` the typing
//! environment for variables and choreography names. Checking is
//! bidirectional: annotations and declared signatures are propagated
//! downwards, and recursive type definitions are unfolded lazily at the
//! points where structure is needed, which keeps equality decidable for
//! contractive `Σ`.
//!
//! Checking produces a [`TypedTerm`]: the input AST (with the `inl`, `inr`
//! and `pair` sugar expanded to applied functions where the argument was
//! not a value) decorated with the type assigned to every subterm. The
//! projector reads types only from this decoration.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use thiserror::Error;

use crate::ast::{
    self, roles_of_term, roles_of_type, subst_roles_type, FuncName, Role, RoleSubst, Term, Type,
    TypeName, Var,
};
use crate::surface::{self, SourceFile};

/// The typing context `Θ;Σ;Γ`, plus the declared externs.
#[derive(Debug, Clone, Default)]
pub struct Context {
    /// Θ — roles that may be used by the term under scrutiny.
    pub theta: BTreeSet<Role>,
    /// Σ — type definitions `t@(R...) = T` keyed by name.
    pub sigma: BTreeMap<TypeName, (Vec<Role>, Type)>,
    /// Γ (variables).
    pub vars: BTreeMap<Var, Type>,
    /// Γ (choreography names): `f(R...) : T`.
    pub funcs: BTreeMap<FuncName, (Vec<Role>, Type)>,
    /// Declared local primitives: formal role and declared type.
    pub externs: BTreeMap<FuncName, (Role, Type)>,
}

impl Context {
    pub fn with_theta(&self, theta: BTreeSet<Role>) -> Context {
        Context {
            theta,
            ..self.clone()
        }
    }

    fn with_var(&self, var: Var, ty: Type) -> Context {
        let mut ctx = self.clone();
        ctx.vars.insert(var, ty);
        ctx
    }
}

/// A type-decorated term. `children` mirrors the AST: `[body]` for
/// abstractions, `[func, arg]` for applications, `[scrut, left, right]`
/// for case, `[cont]` for selections, payloads for injections and pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedTerm {
    pub node: Term,
    pub ty: Type,
    pub children: Vec<TypedTerm>,
}

impl TypedTerm {
    fn leaf(node: Term, ty: Type) -> TypedTerm {
        TypedTerm {
            node,
            ty,
            children: Vec::new(),
        }
    }

    /// Roles appearing in the typing derivation of this subtree: every role
    /// in the type of any subterm plus every role syntactically occurring in
    /// the term. The projection of applications is guided by this set.
    pub fn derivation_roles(&self) -> BTreeSet<Role> {
        let mut out = roles_of_term(&self.node);
        self.collect_ty_roles(&mut out);
        out
    }

    fn collect_ty_roles(&self, out: &mut BTreeSet<Role>) {
        out.extend(roles_of_type(&self.ty));
        for child in &self.children {
            child.collect_ty_roles(out);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TypeError {
    #[error("role {role} is not available in the current role set")]
    RoleEscapesTheta { role: Role },
    #[error("role {role} is used by the function body but missing from the arrow annotation; extend the ->{{...}} set")]
    ArrowRhoMismatch { role: Role },
    #[error("communicated value must be located entirely at {expected}; its type {ty} is not")]
    ComNotLocal { expected: Role, ty: String },
    #[error("case branches have different types: {left} vs {right}")]
    SumBranchMismatch { left: String, right: String },
    #[error("unknown name {name}")]
    UnknownName { name: String },
    #[error("{name} expects {expected} role argument(s), got {found}")]
    ArityMismatch {
        name: String,
        expected: usize,
        found: usize,
    },
    #[error("role arguments of {name} must be distinct")]
    RolesNotDistinct { name: String },
    #[error("types do not match: expected {expected}, found {found}")]
    NoTEqWitness { expected: String, found: String },
    #[error("definition {name} has no declared signature")]
    SignatureMissing { name: String },
    #[error("ill-formed type definition {name}: {reason}")]
    SigmaIllFormed { name: String, reason: String },
    #[error("cannot infer a type for this term; add an annotation or an expected type")]
    CannotInfer,
}

/// A type error located at the smallest failing subterm, together with the
/// Θ in force there.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error} [in `{}` with roles {{{}}}]", surface::print_term(.term), theta_list(.theta))]
pub struct TypeErrorAt {
    pub error: TypeError,
    pub term: Term,
    pub theta: BTreeSet<Role>,
}

fn theta_list(theta: &BTreeSet<Role>) -> String {
    theta
        .iter()
        .map(Role::as_str)
        .collect::<Vec<_>>()
        .join(",")
}

fn err_at<T>(error: TypeError, term: &Term, ctx: &Context) -> Result<T, TypeErrorAt> {
    Err(TypeErrorAt {
        error,
        term: term.clone(),
        theta: ctx.theta.clone(),
    })
}

fn decls_err<T>(error: TypeError, term: &Term, ctx: &Context) -> Result<T, ProgramError> {
    err_at(error, term, ctx).map_err(ProgramError::at(ErrorSite::Decls))
}

fn lift(e: TypeError, term: &Term, ctx: &Context) -> TypeErrorAt {
    TypeErrorAt {
        error: e,
        term: term.clone(),
        theta: ctx.theta.clone(),
    }
}

pub type Sigma = BTreeMap<TypeName, (Vec<Role>, Type)>;

/// Unfold a top-level type variable through Σ until a structural head
/// appears. Terminates for contractive Σ; cycles are reported.
pub fn expose(sigma: &Sigma, ty: &Type) -> Result<Type, TypeError> {
    let mut current = ty.clone();
    let mut seen: HashSet<Type> = HashSet::new();
    while let Type::Var { name, roles } = &current {
        if !seen.insert(current.clone()) {
            return Err(TypeError::SigmaIllFormed {
                name: name.to_string(),
                reason: "definition is not contractive".into(),
            });
        }
        let (params, body) = sigma.get(name).ok_or_else(|| TypeError::UnknownName {
            name: name.to_string(),
        })?;
        if params.len() != roles.len() {
            return Err(TypeError::ArityMismatch {
                name: name.to_string(),
                expected: params.len(),
                found: roles.len(),
            });
        }
        let subst = RoleSubst::new(params, roles).map_err(|_| TypeError::SigmaIllFormed {
            name: name.to_string(),
            reason: "role parameters are not distinct".into(),
        })?;
        current = subst_roles_type(body, &subst);
    }
    Ok(current)
}

/// Type equality modulo simultaneous role-instantiated unfolding of Σ,
/// decided coinductively (memoised on visited pairs). Sound for
/// contractive Σ.
pub fn type_equal(sigma: &Sigma, a: &Type, b: &Type) -> bool {
    fn go(sigma: &Sigma, a: &Type, b: &Type, visited: &mut HashSet<(Type, Type)>) -> bool {
        if a == b {
            return true;
        }
        if !visited.insert((a.clone(), b.clone())) {
            return true;
        }
        let (a, b) = match (expose(sigma, a), expose(sigma, b)) {
            (Ok(a), Ok(b)) => (a, b),
            _ => return false,
        };
        match (&a, &b) {
            (
                Type::Arrow {
                    dom: da,
                    extra: ea,
                    cod: ca,
                },
                Type::Arrow {
                    dom: db,
                    extra: eb,
                    cod: cb,
                },
            ) => ea == eb && go(sigma, da, db, visited) && go(sigma, ca, cb, visited),
            (Type::Sum(a1, a2), Type::Sum(b1, b2)) | (Type::Prod(a1, a2), Type::Prod(b1, b2)) => {
                go(sigma, a1, b1, visited) && go(sigma, a2, b2, visited)
            }
            _ => a == b,
        }
    }
    go(sigma, a, b, &mut HashSet::new())
}

fn check_roles_in_theta(
    ctx: &Context,
    roles: &BTreeSet<Role>,
    term: &Term,
) -> Result<(), TypeErrorAt> {
    for role in roles {
        if !ctx.theta.contains(role) {
            return err_at(TypeError::RoleEscapesTheta { role: role.clone() }, term, ctx);
        }
    }
    Ok(())
}

fn conform(
    ctx: &Context,
    typed: TypedTerm,
    expected: Option<&Type>,
) -> Result<TypedTerm, TypeErrorAt> {
    if let Some(expected) = expected {
        if !type_equal(&ctx.sigma, &typed.ty, expected) {
            return err_at(
                TypeError::NoTEqWitness {
                    expected: surface::print_type(expected),
                    found: surface::print_type(&typed.ty),
                },
                &typed.node,
                ctx,
            );
        }
    }
    Ok(typed)
}

fn distinct(roles: &[Role]) -> bool {
    let set: BTreeSet<_> = roles.iter().collect();
    set.len() == roles.len()
}

/// Check (or, with `expected = None`, synthesise) the type of a term,
/// returning the decorated AST.
pub fn check_term(
    ctx: &Context,
    term: &Term,
    expected: Option<&Type>,
) -> Result<TypedTerm, TypeErrorAt> {
    match term {
        Term::Var(x) => {
            let ty = match ctx.vars.get(x) {
                Some(ty) => ty.clone(),
                None => return err_at(TypeError::UnknownName { name: x.to_string() }, term, ctx),
            };
            check_roles_in_theta(ctx, &roles_of_type(&ty), term)?;
            conform(ctx, TypedTerm::leaf(term.clone(), ty), expected)
        }
        Term::Unit(r) => {
            check_roles_in_theta(ctx, &BTreeSet::from([r.clone()]), term)?;
            conform(
                ctx,
                TypedTerm::leaf(term.clone(), Type::Unit(r.clone())),
                expected,
            )
        }
        Term::Lit { val, at } => {
            check_roles_in_theta(ctx, &BTreeSet::from([at.clone()]), term)?;
            let ty = Type::Base {
                base: val.base(),
                at: at.clone(),
            };
            conform(ctx, TypedTerm::leaf(term.clone(), ty), expected)
        }
        Term::Extern { name, at, .. } => {
            let (formal, ty) = match ctx.externs.get(name) {
                Some(e) => e.clone(),
                None => {
                    return err_at(TypeError::UnknownName { name: name.to_string() }, term, ctx)
                }
            };
            check_roles_in_theta(ctx, &BTreeSet::from([at.clone()]), term)?;
            let ty = subst_roles_type(&ty, &RoleSubst::single(&formal, at));
            conform(ctx, TypedTerm::leaf(term.clone(), ty), expected)
        }
        Term::Call { name, roles } => {
            let (params, sig) = match ctx.funcs.get(name) {
                Some(f) => f.clone(),
                None => {
                    return err_at(TypeError::UnknownName { name: name.to_string() }, term, ctx)
                }
            };
            if params.len() != roles.len() {
                return err_at(
                    TypeError::ArityMismatch {
                        name: name.to_string(),
                        expected: params.len(),
                        found: roles.len(),
                    },
                    term,
                    ctx,
                );
            }
            if !distinct(roles) {
                return err_at(
                    TypeError::RolesNotDistinct {
                        name: name.to_string(),
                    },
                    term,
                    ctx,
                );
            }
            check_roles_in_theta(ctx, &roles.iter().cloned().collect(), term)?;
            let subst = RoleSubst::new(&params, roles).expect("validated lengths");
            let ty = subst_roles_type(&sig, &subst);
            conform(ctx, TypedTerm::leaf(term.clone(), ty), expected)
        }
        Term::Com { from, to } => {
            check_roles_in_theta(ctx, &BTreeSet::from([from.clone(), to.clone()]), term)?;
            let Some(expected_ty) = expected else {
                return err_at(TypeError::CannotInfer, term, ctx);
            };
            let exposed = expose(&ctx.sigma, expected_ty).map_err(|e| lift(e, term, ctx))?;
            let Type::Arrow { dom, extra, cod } = &exposed else {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: surface::print_type(expected_ty),
                        found: "a communication function".into(),
                    },
                    term,
                    ctx,
                );
            };
            if !extra.is_empty() || roles_of_type(dom) != BTreeSet::from([from.clone()]) {
                return err_at(
                    TypeError::ComNotLocal {
                        expected: from.clone(),
                        ty: surface::print_type(dom),
                    },
                    term,
                    ctx,
                );
            }
            let moved = subst_roles_type(dom, &RoleSubst::single(from, to));
            if !type_equal(&ctx.sigma, &moved, cod) {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: surface::print_type(cod),
                        found: surface::print_type(&moved),
                    },
                    term,
                    ctx,
                );
            }
            let ty = Type::Arrow {
                dom: dom.clone(),
                extra: BTreeSet::new(),
                cod: Box::new(moved),
            };
            Ok(TypedTerm::leaf(term.clone(), ty))
        }
        Term::Fst | Term::Snd => {
            let Some(expected_ty) = expected else {
                return err_at(TypeError::CannotInfer, term, ctx);
            };
            let exposed = expose(&ctx.sigma, expected_ty).map_err(|e| lift(e, term, ctx))?;
            let Type::Arrow { dom, extra, cod } = &exposed else {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: surface::print_type(expected_ty),
                        found: "a projection function".into(),
                    },
                    term,
                    ctx,
                );
            };
            let dom_exposed = expose(&ctx.sigma, dom).map_err(|e| lift(e, term, ctx))?;
            let Type::Prod(l, r) = &dom_exposed else {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: surface::print_type(expected_ty),
                        found: "a projection function".into(),
                    },
                    term,
                    ctx,
                );
            };
            if !extra.is_empty() {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: surface::print_type(expected_ty),
                        found: "a projection function with empty role annotation".into(),
                    },
                    term,
                    ctx,
                );
            }
            check_roles_in_theta(ctx, &roles_of_type(&dom_exposed), term)?;
            let component = if matches!(term, Term::Fst) { l } else { r };
            if !type_equal(&ctx.sigma, component, cod) {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: surface::print_type(cod),
                        found: surface::print_type(component),
                    },
                    term,
                    ctx,
                );
            }
            let ty = Type::Arrow {
                dom: Box::new(dom_exposed.clone()),
                extra: BTreeSet::new(),
                cod: component.clone(),
            };
            Ok(TypedTerm::leaf(term.clone(), ty))
        }
        Term::Abs { param, annot, body } => {
            let exposed = expected
                .map(|e| expose(&ctx.sigma, e))
                .transpose()
                .map_err(|e| lift(e, term, ctx))?;
            match exposed {
                Some(Type::Arrow { dom, extra, cod }) => {
                    if !type_equal(&ctx.sigma, annot, &dom) {
                        return err_at(
                            TypeError::NoTEqWitness {
                                expected: surface::print_type(&dom),
                                found: surface::print_type(annot),
                            },
                            term,
                            ctx,
                        );
                    }
                    let mut theta_inner: BTreeSet<Role> = extra.clone();
                    theta_inner.extend(roles_of_type(&dom));
                    theta_inner.extend(roles_of_type(&cod));
                    check_roles_in_theta(ctx, &theta_inner, term)?;
                    let inner = ctx
                        .with_theta(theta_inner)
                        .with_var(param.clone(), annot.clone());
                    let body_typed = check_term(&inner, body, Some(&cod)).map_err(|e| {
                        // a role available outside but excluded by the declared
                        // annotation reads better as a rho mismatch
                        if let TypeError::RoleEscapesTheta { role } = &e.error {
                            if ctx.theta.contains(role) {
                                return TypeErrorAt {
                                    error: TypeError::ArrowRhoMismatch { role: role.clone() },
                                    term: e.term.clone(),
                                    theta: e.theta.clone(),
                                };
                            }
                        }
                        e
                    })?;
                    let node = Term::Abs {
                        param: param.clone(),
                        annot: annot.clone(),
                        body: Box::new(body_typed.node.clone()),
                    };
                    let ty = Type::Arrow {
                        dom: Box::new(annot.clone()),
                        extra,
                        cod,
                    };
                    Ok(TypedTerm {
                        node,
                        ty,
                        children: vec![body_typed],
                    })
                }
                Some(other) => err_at(
                    TypeError::NoTEqWitness {
                        expected: surface::print_type(&other),
                        found: "a function".into(),
                    },
                    term,
                    ctx,
                ),
                None => synth_abs(ctx, term, param, annot, body, None),
            }
        }
        Term::App { func, arg } => check_app(ctx, term, func, arg, expected),
        Term::Pair(a, b) => {
            if !ast::is_value(a) || !ast::is_value(b) {
                let wrapper = elaborate_pair(ctx, a, b, expected)?;
                return check_term(ctx, &wrapper, expected);
            }
            let exposed = expected
                .map(|e| expose(&ctx.sigma, e))
                .transpose()
                .map_err(|e| lift(e, term, ctx))?;
            let (ta, tb) = match &exposed {
                Some(Type::Prod(l, r)) => {
                    (check_term(ctx, a, Some(l))?, check_term(ctx, b, Some(r))?)
                }
                Some(other) => {
                    return err_at(
                        TypeError::NoTEqWitness {
                            expected: surface::print_type(other),
                            found: "a pair".into(),
                        },
                        term,
                        ctx,
                    )
                }
                None => (check_term(ctx, a, None)?, check_term(ctx, b, None)?),
            };
            let ty = Type::Prod(Box::new(ta.ty.clone()), Box::new(tb.ty.clone()));
            let node = Term::Pair(Box::new(ta.node.clone()), Box::new(tb.node.clone()));
            Ok(TypedTerm {
                node,
                ty,
                children: vec![ta, tb],
            })
        }
        Term::Inl(v) | Term::Inr(v) => {
            let is_left = matches!(term, Term::Inl(_));
            let Some(expected_ty) = expected else {
                return err_at(TypeError::CannotInfer, term, ctx);
            };
            let exposed = expose(&ctx.sigma, expected_ty).map_err(|e| lift(e, term, ctx))?;
            let Type::Sum(l, r) = &exposed else {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: surface::print_type(expected_ty),
                        found: "a sum injection".into(),
                    },
                    term,
                    ctx,
                );
            };
            check_roles_in_theta(ctx, &roles_of_type(&exposed), term)?;
            let payload_ty = if is_left { l } else { r };
            if !ast::is_value(v) {
                // sugar: inl M  ==  (fun x:T. inl x) M
                let x = ast::fresh_var("v");
                let inj = if is_left {
                    Term::Inl(Box::new(ast::var(x.clone())))
                } else {
                    Term::Inr(Box::new(ast::var(x.clone())))
                };
                let wrapper = ast::app(
                    Term::Abs {
                        param: x,
                        annot: (**payload_ty).clone(),
                        body: Box::new(inj),
                    },
                    (**v).clone(),
                );
                return check_term(ctx, &wrapper, expected);
            }
            let payload = check_term(ctx, v, Some(payload_ty))?;
            let node = if is_left {
                Term::Inl(Box::new(payload.node.clone()))
            } else {
                Term::Inr(Box::new(payload.node.clone()))
            };
            Ok(TypedTerm {
                node,
                ty: exposed,
                children: vec![payload],
            })
        }
        Term::Case {
            scrut,
            left_var,
            left,
            right_var,
            right,
        } => {
            let scrut_typed = synth_flexible(ctx, scrut)?;
            let exposed =
                expose(&ctx.sigma, &scrut_typed.ty).map_err(|e| lift(e, term, ctx))?;
            let Type::Sum(t1, t2) = &exposed else {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: "a sum type".into(),
                        found: surface::print_type(&scrut_typed.ty),
                    },
                    scrut,
                    ctx,
                );
            };
            let lctx = ctx.with_var(left_var.clone(), (**t1).clone());
            let rctx = ctx.with_var(right_var.clone(), (**t2).clone());
            let (left_typed, right_typed) = match expected {
                Some(_) => (
                    check_term(&lctx, left, expected)?,
                    check_term(&rctx, right, expected)?,
                ),
                None => {
                    // synthesise one branch and check the other against it,
                    // so injections in a single branch still go through
                    match check_term(&lctx, left, None) {
                        Ok(lt) => {
                            let rt = check_term(&rctx, right, Some(&lt.ty))?;
                            (lt, rt)
                        }
                        Err(le) if matches!(le.error, TypeError::CannotInfer) => {
                            let rt = check_term(&rctx, right, None).map_err(|_| le)?;
                            let lt = check_term(&lctx, left, Some(&rt.ty))?;
                            (lt, rt)
                        }
                        Err(le) => return Err(le),
                    }
                }
            };
            if expected.is_none() && !type_equal(&ctx.sigma, &left_typed.ty, &right_typed.ty) {
                return err_at(
                    TypeError::SumBranchMismatch {
                        left: surface::print_type(&left_typed.ty),
                        right: surface::print_type(&right_typed.ty),
                    },
                    term,
                    ctx,
                );
            }
            let ty = left_typed.ty.clone();
            let node = Term::Case {
                scrut: Box::new(scrut_typed.node.clone()),
                left_var: left_var.clone(),
                left: Box::new(left_typed.node.clone()),
                right_var: right_var.clone(),
                right: Box::new(right_typed.node.clone()),
            };
            Ok(TypedTerm {
                node,
                ty,
                children: vec![scrut_typed, left_typed, right_typed],
            })
        }
        Term::Sel {
            from,
            to,
            label,
            cont,
        } => {
            check_roles_in_theta(ctx, &BTreeSet::from([from.clone(), to.clone()]), term)?;
            let cont_typed = check_term(ctx, cont, expected)?;
            let ty = cont_typed.ty.clone();
            let node = Term::Sel {
                from: from.clone(),
                to: to.clone(),
                label: label.clone(),
                cont: Box::new(cont_typed.node.clone()),
            };
            Ok(TypedTerm {
                node,
                ty,
                children: vec![cont_typed],
            })
        }
    }
}

/// Synthesis with a fallback for value shapes produced by reduction:
/// a bare injection has lost the annotation that fixed its other summand,
/// so reconstruct a representative sum type from the payload. Any valid
/// derivation supports the metatheory, and reduction only reaches
/// injection scrutinees whose dead branch does not constrain the summand.
pub(crate) fn synth_flexible(ctx: &Context, term: &Term) -> Result<TypedTerm, TypeErrorAt> {
    match check_term(ctx, term, None) {
        Err(e) if matches!(e.error, TypeError::CannotInfer) && ast::is_value(term) => {
            reconstruct_value(ctx, term)
        }
        other => other,
    }
}

fn reconstruct_value(ctx: &Context, term: &Term) -> Result<TypedTerm, TypeErrorAt> {
    match term {
        Term::Inl(v) | Term::Inr(v) => {
            let payload = synth_flexible(ctx, v)?;
            let ty = Type::Sum(Box::new(payload.ty.clone()), Box::new(payload.ty.clone()));
            let node = if matches!(term, Term::Inl(_)) {
                Term::Inl(Box::new(payload.node.clone()))
            } else {
                Term::Inr(Box::new(payload.node.clone()))
            };
            Ok(TypedTerm {
                node,
                ty,
                children: vec![payload],
            })
        }
        Term::Pair(a, b) => {
            let ta = synth_flexible(ctx, a)?;
            let tb = synth_flexible(ctx, b)?;
            let ty = Type::Prod(Box::new(ta.ty.clone()), Box::new(tb.ty.clone()));
            let node = Term::Pair(Box::new(ta.node.clone()), Box::new(tb.node.clone()));
            Ok(TypedTerm {
                node,
                ty,
                children: vec![ta, tb],
            })
        }
        _ => check_term(ctx, term, None),
    }
}

/// Synthesise an abstraction: check the body (against `cod_expected` when
/// known), then annotate the arrow with the minimal role set the body
/// actually requires beyond the input and output types.
fn synth_abs(
    ctx: &Context,
    term: &Term,
    param: &Var,
    annot: &Type,
    body: &Term,
    cod_expected: Option<&Type>,
) -> Result<TypedTerm, TypeErrorAt> {
    check_roles_in_theta(ctx, &roles_of_type(annot), term)?;
    let inner = ctx.with_var(param.clone(), annot.clone());
    let body_typed = check_term(&inner, body, cod_expected)?;
    let mut extra = body_typed.derivation_roles();
    for role in roles_of_type(annot).union(&roles_of_type(&body_typed.ty)) {
        extra.remove(role);
    }
    let ty = Type::Arrow {
        dom: Box::new(annot.clone()),
        extra,
        cod: Box::new(body_typed.ty.clone()),
    };
    let node = Term::Abs {
        param: param.clone(),
        annot: annot.clone(),
        body: Box::new(body_typed.node.clone()),
    };
    Ok(TypedTerm {
        node,
        ty,
        children: vec![body_typed],
    })
}

fn check_app(
    ctx: &Context,
    term: &Term,
    func: &Term,
    arg: &Term,
    expected: Option<&Type>,
) -> Result<TypedTerm, TypeErrorAt> {
    // Communications, projections and abstractions in function position are
    // typed against the argument rather than synthesised on their own: their
    // typing rules are parametric in a type the argument (or the expected
    // result) determines.
    let func_typed = match func {
        Term::Com { from, to } => {
            let arg_typed = synth_flexible(ctx, arg)?;
            check_roles_in_theta(ctx, &BTreeSet::from([from.clone(), to.clone()]), func)?;
            if roles_of_type(&arg_typed.ty) != BTreeSet::from([from.clone()]) {
                return err_at(
                    TypeError::ComNotLocal {
                        expected: from.clone(),
                        ty: surface::print_type(&arg_typed.ty),
                    },
                    term,
                    ctx,
                );
            }
            let moved = subst_roles_type(&arg_typed.ty, &RoleSubst::single(from, to));
            let com_ty = Type::Arrow {
                dom: Box::new(arg_typed.ty.clone()),
                extra: BTreeSet::new(),
                cod: Box::new(moved.clone()),
            };
            let node = Term::App {
                func: Box::new(func.clone()),
                arg: Box::new(arg_typed.node.clone()),
            };
            let typed = TypedTerm {
                node,
                ty: moved,
                children: vec![TypedTerm::leaf(func.clone(), com_ty), arg_typed],
            };
            return conform(ctx, typed, expected);
        }
        Term::Fst | Term::Snd => {
            let arg_typed = synth_flexible(ctx, arg)?;
            let exposed =
                expose(&ctx.sigma, &arg_typed.ty).map_err(|e| lift(e, term, ctx))?;
            let Type::Prod(l, r) = &exposed else {
                return err_at(
                    TypeError::NoTEqWitness {
                        expected: "a product type".into(),
                        found: surface::print_type(&arg_typed.ty),
                    },
                    term,
                    ctx,
                );
            };
            check_roles_in_theta(ctx, &roles_of_type(&exposed), func)?;
            let component = if matches!(func, Term::Fst) { l } else { r };
            let proj_ty = Type::Arrow {
                dom: Box::new(exposed.clone()),
                extra: BTreeSet::new(),
                cod: component.clone(),
            };
            let node = Term::App {
                func: Box::new(func.clone()),
                arg: Box::new(arg_typed.node.clone()),
            };
            let typed = TypedTerm {
                node,
                ty: (**component).clone(),
                children: vec![TypedTerm::leaf(func.clone(), proj_ty), arg_typed],
            };
            return conform(ctx, typed, expected);
        }
        Term::Abs { param, annot, body } => synth_abs(ctx, func, param, annot, body, expected)?,
        _ => check_term(ctx, func, None)?,
    };
    let exposed = expose(&ctx.sigma, &func_typed.ty).map_err(|e| lift(e, term, ctx))?;
    let Type::Arrow { dom, cod, .. } = &exposed else {
        return err_at(
            TypeError::NoTEqWitness {
                expected: "a function type".into(),
                found: surface::print_type(&func_typed.ty),
            },
            term,
            ctx,
        );
    };
    let arg_typed = check_term(ctx, arg, Some(dom))?;
    let node = Term::App {
        func: Box::new(func_typed.node.clone()),
        arg: Box::new(arg_typed.node.clone()),
    };
    let typed = TypedTerm {
        node,
        ty: (**cod).clone(),
        children: vec![func_typed, arg_typed],
    };
    conform(ctx, typed, expected)
}

/// Expand `pair M N` into an applied function when a component is not a
/// value, so that the `Pair` constructor only ever carries values.
fn elaborate_pair(
    ctx: &Context,
    a: &Term,
    b: &Term,
    expected: Option<&Type>,
) -> Result<Term, TypeErrorAt> {
    let component_types = match expected {
        Some(e) => {
            let exposed = expose(&ctx.sigma, e).map_err(|err| lift(err, a, ctx))?;
            match exposed {
                Type::Prod(l, r) => Some(((*l).clone(), (*r).clone())),
                _ => None,
            }
        }
        None => None,
    };
    let (ta, tb) = match component_types {
        Some((l, r)) => (l, r),
        None => {
            let ta = check_term(ctx, a, None)?.ty;
            let tb = check_term(ctx, b, None)?.ty;
            (ta, tb)
        }
    };
    let term = if ast::is_value(a) {
        let y = ast::fresh_var("p");
        ast::app(
            ast::abs(
                y.clone(),
                tb,
                Term::Pair(Box::new(a.clone()), Box::new(ast::var(y))),
            ),
            b.clone(),
        )
    } else if ast::is_value(b) {
        let x = ast::fresh_var("p");
        ast::app(
            ast::abs(
                x.clone(),
                ta,
                Term::Pair(Box::new(ast::var(x)), Box::new(b.clone())),
            ),
            a.clone(),
        )
    } else {
        let x = ast::fresh_var("p");
        let y = ast::fresh_var("p");
        ast::app(
            ast::app(
                ast::abs(
                    x.clone(),
                    ta,
                    ast::abs(
                        y.clone(),
                        tb,
                        Term::Pair(Box::new(ast::var(x)), Box::new(ast::var(y))),
                    ),
                ),
                a.clone(),
            ),
            b.clone(),
        )
    };
    Ok(term)
}

/// Check every definition body against its signature under `Θ` = exactly its
/// role parameters. Mutual recursion is allowed: all signatures are in Γ.
pub fn check_defs(
    ctx: &Context,
    defs: &ast::Definitions,
) -> Result<BTreeMap<FuncName, TypedTerm>, TypeErrorAt> {
    let mut out = BTreeMap::new();
    for (name, (params, body)) in &defs.bodies {
        let (sig_params, sig) = match ctx.funcs.get(name) {
            Some(s) => s.clone(),
            None => {
                return err_at(
                    TypeError::SignatureMissing {
                        name: name.to_string(),
                    },
                    body,
                    ctx,
                )
            }
        };
        if !distinct(params) {
            return err_at(
                TypeError::RolesNotDistinct {
                    name: name.to_string(),
                },
                body,
                ctx,
            );
        }
        if &sig_params != params {
            return err_at(
                TypeError::ArityMismatch {
                    name: name.to_string(),
                    expected: sig_params.len(),
                    found: params.len(),
                },
                body,
                ctx,
            );
        }
        let theta: BTreeSet<Role> = params.iter().cloned().collect();
        for role in roles_of_type(&sig) {
            if !theta.contains(&role) {
                return err_at(TypeError::RoleEscapesTheta { role }, body, ctx);
            }
        }
        let def_ctx = ctx.with_theta(theta);
        let typed = check_term(&def_ctx, body, Some(&sig))?;
        out.insert(name.clone(), typed);
    }
    Ok(out)
}

/// Where in a source file a type error arose.
#[derive(Debug, Clone, PartialEq)]
pub enum ErrorSite {
    Decls,
    Def(FuncName),
    Main,
}

/// A type error attributed to a source item.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{inner}")]
pub struct ProgramError {
    pub site: ErrorSite,
    pub inner: TypeErrorAt,
}

impl ProgramError {
    pub fn kind(&self) -> &TypeError {
        &self.inner.error
    }

    fn at(site: ErrorSite) -> impl FnOnce(TypeErrorAt) -> ProgramError {
        move |inner| ProgramError { site, inner }
    }
}

/// A fully checked program: elaborated definitions with their decorations,
/// the context they were checked in, and the decorated main term.
#[derive(Debug, Clone)]
pub struct CheckedProgram {
    pub ctx: Context,
    pub defs: ast::Definitions,
    pub typed_defs: BTreeMap<FuncName, TypedTerm>,
    pub main: Option<TypedTerm>,
}

/// Build the typing context from a source file and check all definitions
/// and the main term.
pub fn check_program(sf: &SourceFile) -> Result<CheckedProgram, ProgramError> {
    let mut ctx = Context::default();
    let dummy = ast::unit("?");
    for td in &sf.typedefs {
        if ctx.sigma.contains_key(&td.name) {
            return decls_err(
                TypeError::SigmaIllFormed {
                    name: td.name.to_string(),
                    reason: "defined more than once".into(),
                },
                &dummy,
                &ctx,
            );
        }
        if !distinct(&td.params) {
            return decls_err(
                TypeError::SigmaIllFormed {
                    name: td.name.to_string(),
                    reason: "role parameters are not distinct".into(),
                },
                &dummy,
                &ctx,
            );
        }
        let body_roles = roles_of_type(&td.body);
        let params: BTreeSet<Role> = td.params.iter().cloned().collect();
        if body_roles != params {
            return decls_err(
                TypeError::SigmaIllFormed {
                    name: td.name.to_string(),
                    reason: "roles of the definition body must equal its parameters".into(),
                },
                &dummy,
                &ctx,
            );
        }
        ctx.sigma
            .insert(td.name.clone(), (td.params.clone(), td.body.clone()));
    }
    // contractivity: every definition must unfold to a structural head
    for (name, (params, _)) in ctx.sigma.clone() {
        let probe = Type::Var {
            name,
            roles: params,
        };
        expose(&ctx.sigma, &probe)
            .map_err(|e| lift(e, &dummy, &ctx))
            .map_err(ProgramError::at(ErrorSite::Decls))?;
    }
    for ex in &sf.externs {
        if ctx.externs.contains_key(&ex.name) {
            return decls_err(
                TypeError::SigmaIllFormed {
                    name: ex.name.to_string(),
                    reason: "extern declared more than once".into(),
                },
                &dummy,
                &ctx,
            );
        }
        if roles_of_type(&ex.ty) != BTreeSet::from([ex.role.clone()]) {
            return decls_err(
                TypeError::ComNotLocal {
                    expected: ex.role.clone(),
                    ty: surface::print_type(&ex.ty),
                },
                &dummy,
                &ctx,
            );
        }
        ctx.externs
            .insert(ex.name.clone(), (ex.role.clone(), ex.ty.clone()));
    }
    let mut defs = ast::Definitions::default();
    for def in &sf.defs {
        if ctx.funcs.contains_key(&def.name) || ctx.externs.contains_key(&def.name) {
            return decls_err(
                TypeError::SigmaIllFormed {
                    name: def.name.to_string(),
                    reason: "name bound more than once".into(),
                },
                &dummy,
                &ctx,
            );
        }
        ctx.funcs
            .insert(def.name.clone(), (def.params.clone(), def.sig.clone()));
        defs.signatures
            .insert(def.name.clone(), (def.params.clone(), def.sig.clone()));
        defs.bodies
            .insert(def.name.clone(), (def.params.clone(), def.body.clone()));
    }
    let mut typed_defs = BTreeMap::new();
    for def in &sf.defs {
        let mut single = ast::Definitions::default();
        single
            .bodies
            .insert(def.name.clone(), (def.params.clone(), def.body.clone()));
        single
            .signatures
            .insert(def.name.clone(), (def.params.clone(), def.sig.clone()));
        let typed = check_defs(&ctx, &single)
            .map_err(ProgramError::at(ErrorSite::Def(def.name.clone())))?;
        typed_defs.extend(typed);
    }
    // keep the elaborated bodies for the runtime
    for (name, typed) in &typed_defs {
        defs.bodies.get_mut(name).expect("present").1 = typed.node.clone();
    }
    let main = match &sf.main {
        Some(main) => {
            let theta = roles_of_term(main);
            let main_ctx = ctx.with_theta(theta);
            Some(check_term(&main_ctx, main, None).map_err(ProgramError::at(ErrorSite::Main))?)
        }
        None => None,
    };
    Ok(CheckedProgram {
        ctx,
        defs,
        typed_defs,
        main,
    })
}

/// Minimal arrow annotations: for every abstraction in the decorated tree,
/// the roles its body uses beyond those of the input and output types.
/// Reported by `check --infer-rho`.
pub fn infer_rho(typed: &TypedTerm) -> Vec<(Term, BTreeSet<Role>)> {
    fn walk(t: &TypedTerm, out: &mut Vec<(Term, BTreeSet<Role>)>) {
        if let (Term::Abs { annot, .. }, [body]) = (&t.node, t.children.as_slice()) {
            let mut extra = body.derivation_roles();
            for role in roles_of_type(annot).union(&roles_of_type(&body.ty)) {
                extra.remove(role);
            }
            out.push((t.node.clone(), extra));
        }
        for child in &t.children {
            walk(child, out);
        }
    }
    let mut out = Vec::new();
    walk(typed, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ast::{abs, app, com, int_lit, var};
    use crate::surface::{parse, parse_term, parse_type};

    fn ctx_with(roles: &[&str]) -> Context {
        Context {
            theta: roles.iter().map(|r| Role::new(*r)).collect(),
            ..Context::default()
        }
    }

    #[test]
    fn literal_types_at_its_role() {
        let ctx = ctx_with(&["Alice"]);
        let typed = check_term(&ctx, &int_lit(5, "Alice"), None).unwrap();
        assert_eq!(typed.ty, Type::int("Alice"));
    }

    #[test]
    fn communication_types_as_a_moving_function() {
        let ctx = ctx_with(&["Alice", "Bob"]);
        let m = app(com("Alice", "Bob"), int_lit(5, "Alice"));
        let typed = check_term(&ctx, &m, None).unwrap();
        assert_eq!(typed.ty, Type::int("Bob"));
        assert_eq!(
            typed.children[0].ty,
            Type::plain_arrow(Type::int("Alice"), Type::int("Bob"))
        );
    }

    #[test]
    fn applying_h_to_a_value_at_the_wrong_role_fails() {
        // h : Int@Alice ->{Proxy} Int@Bob applied to 5@Bob must not type.
        let mut ctx = ctx_with(&["Alice", "Bob", "Proxy"]);
        ctx.vars.insert(
            Var::new("h"),
            parse_type("Int@Alice ->{Proxy} Int@Bob").unwrap(),
        );
        assert!(check_term(&ctx, &app(var("h"), int_lit(5, "Alice")), None).is_ok());
        let bad = check_term(&ctx, &app(var("h"), int_lit(5, "Bob")), None).unwrap_err();
        assert!(matches!(bad.error, TypeError::NoTEqWitness { .. }));
    }

    #[test]
    fn com_argument_must_be_local() {
        let ctx = ctx_with(&["A", "B"]);
        let spanning = Term::Pair(Box::new(ast::unit("A")), Box::new(ast::unit("B")));
        let err = check_term(&ctx, &app(com("A", "B"), spanning), None).unwrap_err();
        assert!(matches!(err.error, TypeError::ComNotLocal { .. }));
    }

    #[test]
    fn rho_mismatch_is_reported_when_a_body_role_is_excluded() {
        // fun x : Unit@A . com[B,A] ()@B uses B, so Unit@A -> Unit@A (with
        // empty annotation) must be rejected with the dedicated error.
        let ctx = ctx_with(&["A", "B"]);
        let m = abs(
            "x",
            Type::Unit(Role::new("A")),
            app(com("B", "A"), ast::unit("B")),
        );
        let err =
            check_term(&ctx, &m, Some(&parse_type("Unit@A -> Unit@A").unwrap())).unwrap_err();
        assert!(matches!(err.error, TypeError::ArrowRhoMismatch { .. }));
        assert!(
            check_term(&ctx, &m, Some(&parse_type("Unit@A ->{B} Unit@A").unwrap())).is_ok()
        );
    }

    #[test]
    fn synthesised_abstractions_carry_minimal_rho() {
        let ctx = ctx_with(&["A", "B"]);
        let m = abs(
            "x",
            Type::Unit(Role::new("A")),
            app(com("B", "A"), ast::unit("B")),
        );
        let typed = check_term(&ctx, &m, None).unwrap();
        match typed.ty {
            Type::Arrow { extra, .. } => assert_eq!(extra, BTreeSet::from([Role::new("B")])),
            other => panic!("expected arrow, got {other:?}"),
        }
    }

    #[test]
    fn recursive_list_type_unfolds() {
        let sf = parse("type List_Int@(R) = Unit@R + (Int@R * List_Int@(R))\n").unwrap();
        let prog = check_program(&sf).unwrap();
        let list_c = parse_type("List_Int@(C)").unwrap();
        let unfolded = parse_type("Unit@C + (Int@C * List_Int@(C))").unwrap();
        assert!(type_equal(&prog.ctx.sigma, &list_c, &unfolded));
        assert!(type_equal(&prog.ctx.sigma, &list_c, &list_c));
        let list_s = parse_type("List_Int@(S)").unwrap();
        assert!(!type_equal(&prog.ctx.sigma, &list_c, &list_s));
    }

    #[test]
    fn def_with_duplicate_role_params_is_rejected() {
        let sf = parse("def f(A, A) : Unit@A -> Unit@A = fun x : Unit@A . x\n").unwrap();
        let err = check_program(&sf).unwrap_err();
        assert!(matches!(err.kind(), TypeError::RolesNotDistinct { .. }));
    }

    #[test]
    fn def_body_using_role_outside_params_is_rejected() {
        let sf = parse("def f(A) : Unit@A = ()@B\n").unwrap();
        let err = check_program(&sf).unwrap_err();
        assert!(matches!(err.kind(), TypeError::RoleEscapesTheta { .. }));
    }

    #[test]
    fn remote_function_checks_with_its_signature() {
        let src = "def remoteFunction(C, S) : (Int@S -> Int@S) -> Int@C ->{S} Int@C =\n  \
                   fun f : Int@S -> Int@S . fun v : Int@C . com[S,C] (f (com[C,S] v))\n";
        let prog = check_program(&parse(src).unwrap()).unwrap();
        assert!(prog.typed_defs.contains_key(&FuncName::new("remoteFunction")));
    }

    #[test]
    fn pair_sugar_elaborates_to_applied_function() {
        let ctx = ctx_with(&["A", "B"]);
        let m = parse_term("pair (com[B,A] ()@B) ()@A").unwrap();
        let typed = check_term(&ctx, &m, None).unwrap();
        assert_eq!(
            typed.ty,
            Type::Prod(
                Box::new(Type::Unit(Role::new("A"))),
                Box::new(Type::Unit(Role::new("A")))
            )
        );
        assert!(matches!(typed.node, Term::App { .. }));
    }

    #[test]
    fn theta_weakening_preserves_typability() {
        let ctx = ctx_with(&["A", "B"]);
        let m = parse_term("com[A,B] 7@A").unwrap();
        let typed = check_term(&ctx, &m, None).unwrap();
        let wide = ctx_with(&["A", "B", "C", "D"]);
        let typed_wide = check_term(&wide, &m, None).unwrap();
        assert_eq!(typed.ty, typed_wide.ty);
    }

    #[test]
    fn decoration_covers_every_subterm() {
        let ctx = ctx_with(&["A", "B"]);
        let m = parse_term("(fun x : Int@A . com[A,B] x) 3@A").unwrap();
        let typed = check_term(&ctx, &m, None).unwrap();
        fn count(t: &TypedTerm) -> usize {
            1 + t.children.iter().map(count).sum::<usize>()
        }
        // app, abs, body-app, com, var, literal
        assert_eq!(count(&typed), 6);
        assert_eq!(typed.ty, Type::int("B"));
    }
}
