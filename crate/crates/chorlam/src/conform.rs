//! Executable metatheory: random generation of well-typed choreographies
//! and mechanical, bounded checks of the language's guarantees — progress,
//! preservation, operational correspondence between a choreography and its
//! projection, deadlock-freedom of projected networks, adequacy of
//! projection, and the synchronisation-ordering property.
//!
//! Generation is derivation-directed: terms are built top-down along a
//! typing derivation, so every sample is closed and well-typed by
//! construction. Case branches are biased to start with matching
//! selections so that most samples also project (knowledge of choice).
//!
//! All searches are bounded; running out of budget is reported as
//! *inconclusive*, never conflated with refutation.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ast::{
    self, alpha_canon, is_value, roles_of_term, roles_of_type, Definitions, FuncName,
    Role, SelLabel, Term, Type, Var,
};
use crate::process::{self, Network};
use crate::project::{self, project_network, project_term};
use crate::runtime::{self, enabled_steps, rewrite_ball, ExternTable, RunEnv, Scheduler};
use crate::surface;
use crate::typecheck::{check_term, Context, TypedTerm};

/// Feature toggles for the generator.
#[derive(Debug, Clone, Copy)]
pub struct Features {
    pub coms: bool,
    pub sels: bool,
    pub cases: bool,
    pub pairs: bool,
    pub sums: bool,
    pub funcs: bool,
    pub externs: bool,
}

impl Default for Features {
    fn default() -> Self {
        Features {
            coms: true,
            sels: true,
            cases: true,
            pairs: true,
            sums: true,
            funcs: true,
            externs: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub max_depth: usize,
    pub role_count: usize,
    pub seed: u64,
    pub features: Features,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            max_depth: 5,
            role_count: 3,
            seed: 0,
            features: Features::default(),
        }
    }
}

/// A generated sample: the context it checks under, the definitions it may
/// call, the term, and its decoration.
#[derive(Debug, Clone)]
pub struct Sample {
    pub ctx: Context,
    pub defs: Definitions,
    pub term: Term,
    pub typed: TypedTerm,
}

/// The small definition pool generated terms may call.
fn def_pool(roles: &[Role]) -> (Definitions, Context) {
    let mut defs = Definitions::default();
    let a = Role::new("X1");
    let b = Role::new("X2");
    // idint(X1) : Int@X1 -> Int@X1
    defs.signatures.insert(
        FuncName::new("idint"),
        (
            vec![a.clone()],
            Type::plain_arrow(Type::int("X1"), Type::int("X1")),
        ),
    );
    defs.bodies.insert(
        FuncName::new("idint"),
        (
            vec![a.clone()],
            ast::abs("z", Type::int("X1"), ast::var("z")),
        ),
    );
    // fwd(X1, X2) : Int@X1 -> Int@X2
    defs.signatures.insert(
        FuncName::new("fwd"),
        (
            vec![a.clone(), b.clone()],
            Type::plain_arrow(Type::int("X1"), Type::int("X2")),
        ),
    );
    defs.bodies.insert(
        FuncName::new("fwd"),
        (
            vec![a, b],
            ast::abs(
                "z",
                Type::int("X1"),
                ast::app(ast::com("X1", "X2"), ast::var("z")),
            ),
        ),
    );
    let mut ctx = Context {
        theta: roles.iter().cloned().collect(),
        ..Context::default()
    };
    for (name, sig) in &defs.signatures {
        ctx.funcs.insert(name.clone(), sig.clone());
    }
    ctx.externs.insert(
        FuncName::new("square"),
        (
            Role::new("X1"),
            Type::plain_arrow(Type::int("X1"), Type::int("X1")),
        ),
    );
    ctx.externs.insert(
        FuncName::new("inc"),
        (
            Role::new("X1"),
            Type::plain_arrow(Type::int("X1"), Type::int("X1")),
        ),
    );
    (defs, ctx)
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    roles: Vec<Role>,
    features: Features,
    ctx: &'a Context,
    label_counter: u64,
}

impl<'a> Gen<'a> {
    fn role(&mut self) -> Role {
        self.roles.choose(&mut self.rng).unwrap().clone()
    }

    fn other_role(&mut self, not: &Role) -> Option<Role> {
        let others: Vec<_> = self.roles.iter().filter(|r| *r != not).cloned().collect();
        others.choose(&mut self.rng).cloned()
    }

    fn fresh_label(&mut self) -> SelLabel {
        self.label_counter += 1;
        SelLabel::new(format!("l{}", self.label_counter))
    }

    /// A small located type for argument/scrutinee positions.
    fn gen_type(&mut self, depth: usize) -> Type {
        let role = self.role();
        if depth == 0 {
            return if self.rng.gen_bool(0.5) {
                Type::int(role)
            } else {
                Type::Unit(role)
            };
        }
        match self.rng.gen_range(0..6) {
            0 if self.features.sums => Type::Sum(
                Box::new(self.gen_type(depth - 1)),
                Box::new(self.gen_type(depth - 1)),
            ),
            1 if self.features.pairs => Type::Prod(
                Box::new(self.gen_type(depth - 1)),
                Box::new(self.gen_type(depth - 1)),
            ),
            2 => Type::plain_arrow(self.gen_type(depth - 1), self.gen_type(depth - 1)),
            3 => Type::int(role),
            _ => Type::Unit(role),
        }
    }

    /// A value of the given type (always possible).
    fn gen_value(&mut self, env: &BTreeMap<Var, Type>, ty: &Type, depth: usize) -> Term {
        // reuse a variable of the right type occasionally
        if depth > 0 && self.rng.gen_bool(0.3) {
            let candidates: Vec<_> = env
                .iter()
                .filter(|(_, t)| *t == ty)
                .map(|(x, _)| x.clone())
                .collect();
            if let Some(x) = candidates.choose(&mut self.rng) {
                return ast::var(x.clone());
            }
        }
        match ty {
            Type::Unit(r) => ast::unit(r.clone()),
            Type::Base { base, at } => match base {
                ast::BaseTy::Int => ast::int_lit(self.rng.gen_range(0..10), at.clone()),
                ast::BaseTy::Str => ast::str_lit("s", at.clone()),
            },
            Type::Sum(l, r) => {
                if self.rng.gen_bool(0.5) {
                    Term::Inl(Box::new(self.gen_value(env, l, depth.saturating_sub(1))))
                } else {
                    Term::Inr(Box::new(self.gen_value(env, r, depth.saturating_sub(1))))
                }
            }
            Type::Prod(l, r) => Term::Pair(
                Box::new(self.gen_value(env, l, depth.saturating_sub(1))),
                Box::new(self.gen_value(env, r, depth.saturating_sub(1))),
            ),
            Type::Arrow { dom, cod, .. } => {
                // com when the arrow moves a single-role type, else a lambda
                let dom_roles = roles_of_type(dom);
                let cod_roles = roles_of_type(cod);
                if self.features.coms
                    && dom_roles.len() == 1
                    && cod_roles.len() == 1
                    && self.rng.gen_bool(0.4)
                {
                    let from = dom_roles.iter().next().unwrap().clone();
                    let to = cod_roles.iter().next().unwrap().clone();
                    let moved =
                        ast::subst_roles_type(dom, &ast::RoleSubst::single(&from, &to));
                    if moved == **cod {
                        return ast::com(from, to);
                    }
                }
                let x = Var::new(format!("v{}", self.rng.gen_range(0..1000)));
                let mut inner = env.clone();
                inner.insert(x.clone(), (**dom).clone());
                let body = self.gen_term(&inner, cod, depth.saturating_sub(1));
                ast::abs(x, (**dom).clone(), body)
            }
            Type::Var { .. } => ast::unit(self.role()), // not generated
        }
    }

    /// A term of the given type, derivation-directed.
    fn gen_term(&mut self, env: &BTreeMap<Var, Type>, ty: &Type, depth: usize) -> Term {
        if depth == 0 {
            return self.gen_value(env, ty, 0);
        }
        for _ in 0..8 {
            match self.rng.gen_range(0..10) {
                // plain value
                0 | 1 => return self.gen_value(env, ty, depth),
                // beta redex: (fun x:T'. M) N
                2 => {
                    let arg_ty = self.gen_type(1);
                    let x = Var::new(format!("v{}", self.rng.gen_range(0..1000)));
                    let mut inner = env.clone();
                    inner.insert(x.clone(), arg_ty.clone());
                    let body = self.gen_term(&inner, ty, depth - 1);
                    let arg = self.gen_term(env, &arg_ty, depth - 1);
                    return ast::app(ast::abs(x, arg_ty, body), arg);
                }
                // communication into the target type
                3 if self.features.coms => {
                    let target_roles = roles_of_type(ty);
                    if target_roles.len() == 1 {
                        let to = target_roles.iter().next().unwrap().clone();
                        if let Some(from) = self.other_role(&to) {
                            let source_ty =
                                ast::subst_roles_type(ty, &ast::RoleSubst::single(&to, &from));
                            let arg = self.gen_term(env, &source_ty, depth - 1);
                            return ast::app(ast::com(from, to), arg);
                        }
                    }
                }
                // selection prefix
                4 if self.features.sels => {
                    let from = self.role();
                    if let Some(to) = self.other_role(&from) {
                        let label = self.fresh_label();
                        let cont = self.gen_term(env, ty, depth - 1);
                        return Term::Sel {
                            from,
                            to,
                            label,
                            cont: Box::new(cont),
                        };
                    }
                }
                // case over a freshly generated sum, with selection bias
                5 if self.features.cases => {
                    let at = self.role();
                    let sum_ty = Type::Sum(
                        Box::new(Type::Unit(at.clone())),
                        Box::new(Type::Unit(at.clone())),
                    );
                    let scrut_val = self.gen_value(env, &sum_ty, 1);
                    let s = Var::new(format!("s{}", self.rng.gen_range(0..1000)));
                    let xl = Var::new(format!("x{}", self.rng.gen_range(0..1000)));
                    let xr = Var::new(format!("y{}", self.rng.gen_range(0..1000)));
                    let mut left = self.gen_term(env, ty, depth - 1);
                    // knowledge of choice: inform the other roles with
                    // distinct labels, or reuse one branch body so the
                    // merge is trivial; a small remainder is left
                    // uninformed to feed the quarantine corpus
                    let mut right = if self.rng.gen_bool(0.5) {
                        left.clone()
                    } else {
                        self.gen_term(env, ty, depth - 1)
                    };
                    if self.rng.gen_bool(0.9) {
                        let others: Vec<Role> =
                            self.roles.iter().filter(|r| **r != at).cloned().collect();
                        for other in others.iter().take(2) {
                            let l1 = self.fresh_label();
                            let l2 = self.fresh_label();
                            left = Term::Sel {
                                from: at.clone(),
                                to: other.clone(),
                                label: l1,
                                cont: Box::new(left),
                            };
                            right = Term::Sel {
                                from: at.clone(),
                                to: other.clone(),
                                label: l2,
                                cont: Box::new(right),
                            };
                        }
                    }
                    let case = Term::Case {
                        scrut: Box::new(ast::var(s.clone())),
                        left_var: xl,
                        left: Box::new(left),
                        right_var: xr,
                        right: Box::new(right),
                    };
                    return ast::app(ast::abs(s, sum_ty, case), scrut_val);
                }
                // projection from a pair
                6 if self.features.pairs => {
                    let other_ty = self.gen_type(1);
                    let first = self.rng.gen_bool(0.5);
                    let (l, r) = if first {
                        (ty.clone(), other_ty)
                    } else {
                        (other_ty, ty.clone())
                    };
                    let pair = self.gen_value(env, &Type::Prod(Box::new(l), Box::new(r)), depth - 1);
                    return ast::app(if first { Term::Fst } else { Term::Snd }, pair);
                }
                // definition call
                7 if self.features.funcs => {
                    if *ty == Type::int(ty_role(ty).unwrap_or_else(|| self.role())) {
                        if let Some(at) = ty_role(ty) {
                            if self.rng.gen_bool(0.5) {
                                let arg = self.gen_term(env, ty, depth - 1);
                                return ast::app(
                                    Term::Call {
                                        name: FuncName::new("idint"),
                                        roles: vec![at],
                                    },
                                    arg,
                                );
                            } else if let Some(from) = self.other_role(&ty_role(ty).unwrap()) {
                                let arg = self.gen_term(
                                    env,
                                    &Type::int(from.clone()),
                                    depth - 1,
                                );
                                return ast::app(
                                    Term::Call {
                                        name: FuncName::new("fwd"),
                                        roles: vec![from, at],
                                    },
                                    arg,
                                );
                            }
                        }
                    }
                }
                // extern application
                8 if self.features.externs => {
                    if let Some(at) = ty_role(ty) {
                        if matches!(ty, Type::Base { base: ast::BaseTy::Int, .. }) {
                            let arg = self.gen_term(env, ty, depth - 1);
                            let name = if self.rng.gen_bool(0.5) { "square" } else { "inc" };
                            return ast::app(
                                Term::Extern {
                                    name: FuncName::new(name),
                                    at,
                                    arity: 1,
                                },
                                arg,
                            );
                        }
                    }
                }
                _ => {}
            }
        }
        self.gen_value(env, ty, depth)
    }
}

fn ty_role(ty: &Type) -> Option<Role> {
    let roles = roles_of_type(ty);
    if roles.len() == 1 {
        roles.into_iter().next()
    } else {
        None
    }
}

/// Generate a closed, well-typed choreography. Retries internally until the
/// sample checks (it always does; the retry is a guard against generator
/// bugs surfacing as panics).
pub fn gen_well_typed(cfg: &GenConfig) -> Sample {
    let roles: Vec<Role> = (1..=cfg.role_count)
        .map(|i| Role::new(format!("R{i}")))
        .collect();
    let (defs, ctx) = def_pool(&roles);
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        roles,
        features: cfg.features,
        ctx: &ctx,
        label_counter: 0,
    };
    for attempt in 0..100 {
        let ty = g.gen_type(1.min(cfg.max_depth));
        let term = g.gen_term(&BTreeMap::new(), &ty, cfg.max_depth);
        let theta = {
            let mut t = roles_of_term(&term);
            t.extend(g.ctx.theta.iter().cloned());
            t
        };
        let sample_ctx = Context {
            theta,
            ..g.ctx.clone()
        };
        if let Ok(typed) = check_term(&sample_ctx, &term, None) {
            debug_assert!(ast::is_closed(&term), "generated term must be closed");
            return Sample {
                ctx: sample_ctx,
                defs: defs.clone(),
                term: typed.node.clone(),
                typed,
            };
        }
        debug_assert!(attempt < 99, "generator produced 100 ill-typed samples");
    }
    unreachable!("generator failed to produce a well-typed sample")
}

// ---------------------------------------------------------------------------
// Verdicts and reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pass,
    Fail(String),
    /// Search budget exhausted before a conclusion; distinct from failure.
    Inconclusive(String),
}

impl Verdict {
    pub fn is_pass(&self) -> bool {
        matches!(self, Verdict::Pass)
    }

    pub fn is_fail(&self) -> bool {
        matches!(self, Verdict::Fail(_))
    }
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub check: String,
    pub subject: String,
    pub verdict: Verdict,
}

// ---------------------------------------------------------------------------
// Progress and preservation
// ---------------------------------------------------------------------------

/// Progress: a closed well-typed non-value has at least one enabled step.
/// Preservation: every step's result re-checks at an equal type.
pub fn check_progress_preservation(
    sample: &Sample,
    externs: &ExternTable,
    rewrite_fuel: usize,
) -> Verdict {
    let env = RunEnv {
        defs: &sample.defs,
        externs,
    };
    let mut frontier = vec![sample.term.clone()];
    let mut seen = HashSet::new();
    let mut checked = 0usize;
    while let Some(term) = frontier.pop() {
        if checked > 50 {
            break;
        }
        if !seen.insert(alpha_canon(&term)) {
            continue;
        }
        checked += 1;
        let steps = enabled_steps(&term, &env, rewrite_fuel);
        if steps.is_empty() && !is_value(&term) {
            return Verdict::Fail(format!(
                "progress violated: closed well-typed non-value is stuck: {}",
                surface::print_term(&shrink_stuck(&term, &env, rewrite_fuel, sample))
            ));
        }
        for step in steps.iter().take(8) {
            match check_term(&sample.ctx, &step.result, Some(&sample.typed.ty)) {
                Ok(_) => frontier.push(step.result.clone()),
                Err(e) => {
                    return Verdict::Fail(format!(
                        "preservation violated after {:?}: {} (term {})",
                        step.rule,
                        e,
                        surface::print_term(&step.result)
                    ))
                }
            }
        }
    }
    Verdict::Pass
}

/// Greedy shrinking: replace the failing term by the smallest closed
/// well-typed subterm that still exhibits the failure (here: stuckness).
fn shrink_stuck(term: &Term, env: &RunEnv, rewrite_fuel: usize, sample: &Sample) -> Term {
    let mut current = term.clone();
    loop {
        let mut shrunk = false;
        for sub in immediate_subterms(&current) {
            if ast::is_closed(&sub)
                && !is_value(&sub)
                && check_term(&sample.ctx, &sub, None).is_ok()
                && enabled_steps(&sub, env, rewrite_fuel).is_empty()
            {
                current = sub;
                shrunk = true;
                break;
            }
        }
        if !shrunk {
            return current;
        }
    }
}

fn immediate_subterms(term: &Term) -> Vec<Term> {
    match term {
        Term::App { func, arg } => vec![(**func).clone(), (**arg).clone()],
        Term::Abs { body, .. } => vec![(**body).clone()],
        Term::Case {
            scrut, left, right, ..
        } => vec![(**scrut).clone(), (**left).clone(), (**right).clone()],
        Term::Sel { cont, .. } => vec![(**cont).clone()],
        Term::Inl(v) | Term::Inr(v) => vec![(**v).clone()],
        Term::Pair(a, b) => vec![(**a).clone(), (**b).clone()],
        _ => Vec::new(),
    }
}

// ---------------------------------------------------------------------------
// Operational correspondence
// ---------------------------------------------------------------------------

pub struct CorrespondenceBudget {
    pub depth: usize,
    pub chor_followup: usize,
    pub max_obligations: usize,
    pub rewrite_fuel: usize,
}

impl Default for CorrespondenceBudget {
    fn default() -> Self {
        CorrespondenceBudget {
            depth: 8,
            chor_followup: 3,
            max_obligations: 4096,
            rewrite_fuel: runtime::DEFAULT_REWRITE_FUEL,
        }
    }
}

/// Memoised projections of reachable choreography states (keyed by the
/// alpha-canonical term). `None` records a state that does not project.
struct ProjectionCache {
    memo: std::collections::HashMap<Term, Option<Network>>,
}

impl ProjectionCache {
    fn new() -> Self {
        ProjectionCache {
            memo: std::collections::HashMap::new(),
        }
    }

    fn project(&mut self, ctx: &Context, term: &Term) -> Option<Network> {
        let key = alpha_canon(term);
        if let Some(cached) = self.memo.get(&key) {
            return cached.clone();
        }
        let projected = check_term(ctx, term, None)
            .ok()
            .and_then(|typed| project_network(&typed).ok());
        self.memo.insert(key, projected.clone());
        projected
    }
}

enum SearchOutcome {
    Found,
    Exhausted,
    Truncated,
}

/// Breadth-first search of the network graph for a state (strictly after
/// the root when `skip_root`) dominating one of the candidates. Lazy
/// stepping first; callers fall back to full stepping before refuting.
fn net_search(
    start: &Network,
    candidates: &[Network],
    penv: &process::NetEnv,
    depth: usize,
    rewrite_fuel: usize,
    skip_root: bool,
    full: bool,
) -> SearchOutcome {
    const CAP: usize = 600;
    fn canon(n: &Network) -> Vec<(Role, process::Behaviour)> {
        n.procs
            .iter()
            .map(|(r, b)| (r.clone(), process::alpha_canon_b(b)))
            .collect()
    }
    let mut frontier = vec![start.clone()];
    let mut seen = HashSet::from([canon(start)]);
    let mut truncated = false;
    if !skip_root && candidates.iter().any(|c| project::net_geq(start, c)) {
        return SearchOutcome::Found;
    }
    for _ in 0..depth {
        let mut next = Vec::new();
        for state in &frontier {
            let steps = if full {
                process::network_step(state, penv, rewrite_fuel)
            } else {
                process::network_step_lazy(state, penv, rewrite_fuel)
            };
            for step in steps {
                if seen.len() >= CAP {
                    truncated = true;
                    break;
                }
                if seen.insert(canon(&step.network)) {
                    if candidates.iter().any(|c| project::net_geq(&step.network, c)) {
                        return SearchOutcome::Found;
                    }
                    next.push(step.network);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        frontier = next;
    }
    if truncated {
        SearchOutcome::Truncated
    } else {
        SearchOutcome::Exhausted
    }
}

/// Completeness: every choreography step is matched by the projected
/// network reaching (in one or more steps) a pruning of the projection of
/// a further reduct of the choreography.
pub fn check_completeness(
    sample: &Sample,
    externs: &ExternTable,
    budget: &CorrespondenceBudget,
) -> Verdict {
    let env = RunEnv {
        defs: &sample.defs,
        externs,
    };
    let pdefs = match projected_defs(sample) {
        Ok(d) => d,
        Err(v) => return v,
    };
    let penv = process::NetEnv {
        defs: &pdefs,
        externs,
    };
    let graph = runtime::explore(&sample.term, &env, budget.rewrite_fuel, budget.depth, 500);
    let mut cache = ProjectionCache::new();
    let mut obligations = 0usize;
    for (i, state) in graph.states.iter().enumerate() {
        let Some(projected) = cache.project(&sample.ctx, state) else {
            continue; // unprojectable state: outside the theorems' scope
        };
        let mut dedup = HashSet::new();
        let steps: Vec<_> = graph
            .edges
            .iter()
            .filter(|(from, _, _)| *from == i)
            .filter(|(_, step, _)| dedup.insert(alpha_canon(&step.result)))
            .map(|(_, step, _)| step.result.clone())
            .collect();
        for result in steps {
            obligations += 1;
            if obligations > budget.max_obligations {
                return Verdict::Inconclusive("obligation budget exceeded".into());
            }
            // candidate projections of follow-ups M' ->* M''
            let followups =
                runtime::explore(&result, &env, budget.rewrite_fuel, budget.chor_followup, 100);
            let candidates: Vec<Network> = followups
                .states
                .iter()
                .filter_map(|m| cache.project(&sample.ctx, m))
                .collect();
            if candidates.is_empty() {
                return Verdict::Inconclusive("no projectable follow-up state".into());
            }
            match net_search(
                &projected,
                &candidates,
                &penv,
                budget.depth,
                budget.rewrite_fuel,
                true,
                false,
            ) {
                SearchOutcome::Found => continue,
                _ => {}
            }
            // slow path before refuting: the full step relation
            match net_search(
                &projected,
                &candidates,
                &penv,
                budget.depth,
                budget.rewrite_fuel,
                true,
                true,
            ) {
                SearchOutcome::Found => {}
                SearchOutcome::Truncated => {
                    return Verdict::Inconclusive("network state budget exceeded".into())
                }
                SearchOutcome::Exhausted => {
                    if followups.truncated {
                        return Verdict::Inconclusive(
                            "follow-up state budget exceeded".into(),
                        );
                    }
                    return Verdict::Fail(format!(
                        "completeness: no network continuation of {} matches a follow-up of {}",
                        projected.print(),
                        surface::print_term(&result)
                    ));
                }
            }
        }
    }
    Verdict::Pass
}

/// Soundness: every step of the projected network is matched by the
/// choreography reaching a state whose projection the network dominates
/// after further reduction.
pub fn check_soundness(
    sample: &Sample,
    externs: &ExternTable,
    budget: &CorrespondenceBudget,
) -> Verdict {
    let env = RunEnv {
        defs: &sample.defs,
        externs,
    };
    let pdefs = match projected_defs(sample) {
        Ok(d) => d,
        Err(v) => return v,
    };
    let penv = process::NetEnv {
        defs: &pdefs,
        externs,
    };
    let graph = runtime::explore(&sample.term, &env, budget.rewrite_fuel, budget.depth, 200);
    let mut cache = ProjectionCache::new();
    let mut obligations = 0usize;
    for state in graph.states.iter() {
        let Some(projected) = cache.project(&sample.ctx, state) else {
            continue;
        };
        // candidate projections of chor reducts M ->* M'
        let reach = runtime::explore(state, &env, budget.rewrite_fuel, budget.depth, 200);
        let candidates: Vec<Network> = reach
            .states
            .iter()
            .filter_map(|m| cache.project(&sample.ctx, m))
            .collect();
        let mut dedup = HashSet::new();
        for nstep in process::network_step(&projected, &penv, budget.rewrite_fuel) {
            let key: Vec<_> = nstep
                .network
                .procs
                .iter()
                .map(|(r, b)| (r.clone(), process::alpha_canon_b(b)))
                .collect();
            if !dedup.insert(key) {
                continue;
            }
            obligations += 1;
            if obligations > budget.max_obligations {
                return Verdict::Inconclusive("obligation budget exceeded".into());
            }
            match net_search(
                &nstep.network,
                &candidates,
                &penv,
                budget.depth,
                budget.rewrite_fuel,
                false,
                false,
            ) {
                SearchOutcome::Found => continue,
                _ => {}
            }
            match net_search(
                &nstep.network,
                &candidates,
                &penv,
                budget.depth,
                budget.rewrite_fuel,
                false,
                true,
            ) {
                SearchOutcome::Found => {}
                SearchOutcome::Truncated => {
                    return Verdict::Inconclusive("network state budget exceeded".into())
                }
                SearchOutcome::Exhausted => {
                    if reach.truncated {
                        return Verdict::Inconclusive("reduct state budget exceeded".into());
                    }
                    return Verdict::Fail(format!(
                        "soundness: network step to {} from {} has no choreographic match",
                        nstep.network.print(),
                        surface::print_term(state)
                    ));
                }
            }
        }
    }
    Verdict::Pass
}

fn projected_defs(sample: &Sample) -> Result<process::ProjectedDefs, Verdict> {
    let typed_defs = crate::typecheck::check_defs(&sample.ctx, &sample.defs)
        .map_err(|e| Verdict::Fail(format!("definition pool does not check: {e}")))?;
    project::project_defs(&typed_defs, &sample.defs)
        .map_err(|e| Verdict::Inconclusive(format!("definitions do not project: {e}")))
}

// ---------------------------------------------------------------------------
// Deadlock freedom
// ---------------------------------------------------------------------------

/// Project the sample and run the network under each seed: every run must
/// end with all roles holding local values.
pub fn check_deadlock_freedom(
    sample: &Sample,
    externs: &ExternTable,
    seeds: &[u64],
    fuel: u64,
    rewrite_fuel: usize,
) -> Verdict {
    let typed_defs = match crate::typecheck::check_defs(&sample.ctx, &sample.defs) {
        Ok(d) => d,
        Err(e) => return Verdict::Fail(format!("definition pool does not check: {e}")),
    };
    let pdefs = match project::project_defs(&typed_defs, &sample.defs) {
        Ok(d) => d,
        Err(e) => return Verdict::Inconclusive(format!("definitions do not project: {e}")),
    };
    let network = match project_network(&sample.typed) {
        Ok(n) => n,
        Err(e) => return Verdict::Inconclusive(format!("term does not project: {e}")),
    };
    let penv = process::NetEnv {
        defs: &pdefs,
        externs,
    };
    for &seed in seeds {
        let result = process::run_network(&network, &penv, Scheduler::Seeded(seed), fuel, rewrite_fuel);
        match result.outcome {
            process::NetOutcome::Terminal(_) => {}
            process::NetOutcome::Deadlock(report) => {
                return Verdict::Fail(format!(
                    "deadlock under seed {seed}:\n{}",
                    report.render()
                ))
            }
            process::NetOutcome::FuelExhausted => {
                return Verdict::Inconclusive(format!("fuel exhausted under seed {seed}"))
            }
        }
    }
    Verdict::Pass
}

// ---------------------------------------------------------------------------
// Adequacy
// ---------------------------------------------------------------------------

/// Contexts from the grammar: a hole under applications, selections, case
/// positions, and abstractions.
#[derive(Debug, Clone)]
pub enum Ctx {
    Hole,
    AppL(Box<Ctx>, Term),
    AppR(Term, Box<Ctx>),
    Sel(Role, Role, SelLabel, Box<Ctx>),
    CaseScrut(Box<Ctx>, Var, Term, Var, Term),
    CaseLeft(Term, Var, Box<Ctx>, Var, Term),
    CaseRight(Term, Var, Term, Var, Box<Ctx>),
    Abs(Var, Type, Box<Ctx>),
}

pub fn plug(ctx: &Ctx, m: &Term) -> Term {
    match ctx {
        Ctx::Hole => m.clone(),
        Ctx::AppL(c, n) => ast::app(plug(c, m), n.clone()),
        Ctx::AppR(f, c) => ast::app(f.clone(), plug(c, m)),
        Ctx::Sel(from, to, label, c) => Term::Sel {
            from: from.clone(),
            to: to.clone(),
            label: label.clone(),
            cont: Box::new(plug(c, m)),
        },
        Ctx::CaseScrut(c, xl, l, xr, r) => Term::Case {
            scrut: Box::new(plug(c, m)),
            left_var: xl.clone(),
            left: Box::new(l.clone()),
            right_var: xr.clone(),
            right: Box::new(r.clone()),
        },
        Ctx::CaseLeft(s, xl, c, xr, r) => Term::Case {
            scrut: Box::new(s.clone()),
            left_var: xl.clone(),
            left: Box::new(plug(c, m)),
            right_var: xr.clone(),
            right: Box::new(r.clone()),
        },
        Ctx::CaseRight(s, xl, l, xr, c) => Term::Case {
            scrut: Box::new(s.clone()),
            left_var: xl.clone(),
            left: Box::new(l.clone()),
            right_var: xr.clone(),
            right: Box::new(plug(c, m)),
        },
        Ctx::Abs(x, t, c) => ast::abs(x.clone(), t.clone(), plug(c, m)),
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdequacyError {
    #[error("precondition violated: role {0} occurs in a plug or its type")]
    PreconditionViolated(Role),
    #[error("plugged context does not type-check: {0}")]
    IllTyped(String),
}

/// Adequacy of one triple: the projections of `C[m]` and `C[n]` at a role
/// absent from both plugs (and their types) must be syntactically equal.
pub fn check_adequacy(
    ctx: &Context,
    context: &Ctx,
    m: &Term,
    n: &Term,
    role: &Role,
) -> Result<bool, AdequacyError> {
    let tm = check_term(ctx, m, None)
        .map_err(|e| AdequacyError::IllTyped(e.to_string()))?;
    let tn = check_term(ctx, n, None)
        .map_err(|e| AdequacyError::IllTyped(e.to_string()))?;
    for t in [&tm, &tn] {
        if t.derivation_roles().contains(role) {
            return Err(AdequacyError::PreconditionViolated(role.clone()));
        }
    }
    let cm = check_term(ctx, &plug(context, m), None)
        .map_err(|e| AdequacyError::IllTyped(e.to_string()))?;
    let cn = check_term(ctx, &plug(context, n), None)
        .map_err(|e| AdequacyError::IllTyped(e.to_string()))?;
    let pm = project_term(&cm, role).map_err(|e| AdequacyError::IllTyped(e.to_string()))?;
    let pn = project_term(&cn, role).map_err(|e| AdequacyError::IllTyped(e.to_string()))?;
    Ok(pm == pn)
}

/// Generate one (context, plug pair, absent role) triple on roles `A`, `B`
/// with the absent role `Z`.
pub fn gen_adequacy_triple(seed: u64) -> (Context, Ctx, Term, Term, Role) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Role::new("A");
    let b = Role::new("B");
    let absent = Role::new("Z");
    let ctx = Context {
        theta: [a.clone(), b.clone(), absent.clone()].into_iter().collect(),
        ..Context::default()
    };
    // plugs: two different closed terms of type Int@A
    let m = ast::int_lit(rng.gen_range(0..5), a.clone());
    let n = ast::app(
        ast::abs("z", Type::int(a.clone()), ast::var("z")),
        ast::int_lit(rng.gen_range(5..10), a.clone()),
    );
    let mut context = Ctx::Hole;
    let depth = rng.gen_range(0..4);
    // wraps that need the context to still have the plug's type (Int@A)
    // may only appear before an abstraction wrap changes it
    let mut still_int_at_a = true;
    for _ in 0..depth {
        context = match rng.gen_range(0..4) {
            0 if still_int_at_a => Ctx::AppR(
                ast::abs("w", Type::int(a.clone()), ast::var("w")),
                Box::new(context),
            ),
            1 => Ctx::Sel(
                a.clone(),
                b.clone(),
                SelLabel::new("go"),
                Box::new(context),
            ),
            2 if still_int_at_a => Ctx::CaseLeft(
                Term::Inl(Box::new(ast::unit(b.clone()))),
                Var::new("u"),
                Box::new(context),
                Var::new("v"),
                ast::int_lit(1, a.clone()),
            ),
            _ => {
                still_int_at_a = false;
                Ctx::Abs(Var::new("q"), Type::Unit(b.clone()), Box::new(context))
            }
        };
    }
    (ctx, context, m, n, absent)
}

/// Spot-check of the projection-to-Bot property: a role absent from a term
/// and its type projects to `Bot`.
pub fn check_projects_to_bot(sample: &Sample) -> Verdict {
    let fresh = Role::new("Zfresh");
    if sample.typed.derivation_roles().contains(&fresh) {
        return Verdict::Inconclusive("fresh role occurs in sample".into());
    }
    match project_term(&sample.typed, &fresh) {
        Ok(process::Behaviour::Bot) => Verdict::Pass,
        Ok(other) => Verdict::Fail(format!(
            "projection at an absent role is {} instead of Bot for {}",
            process::print_behaviour(&other),
            surface::print_term(&sample.term)
        )),
        Err(e) => Verdict::Inconclusive(format!("term does not project: {e}")),
    }
}

// ---------------------------------------------------------------------------
// Synchronisation ordering
// ---------------------------------------------------------------------------

/// In every reachable state, two enabled steps with intersecting
/// synchronising-role sets must have joinable results under `⇝*`.
pub fn check_onesynch(
    sample: &Sample,
    externs: &ExternTable,
    depth: usize,
    rewrite_fuel: usize,
    state_cap: usize,
) -> Verdict {
    let env = RunEnv {
        defs: &sample.defs,
        externs,
    };
    let graph = runtime::explore(&sample.term, &env, rewrite_fuel, depth, state_cap);
    for state in &graph.states {
        let steps = enabled_steps(state, &env, rewrite_fuel);
        for (i, s1) in steps.iter().enumerate() {
            for s2 in steps.iter().skip(i + 1) {
                if s1.label.sync.intersection(&s2.label.sync).next().is_none() {
                    continue;
                }
                if alpha_canon(&s1.result) == alpha_canon(&s2.result) {
                    continue;
                }
                let ball1 = rewrite_ball(&s1.result, rewrite_fuel);
                let ball2 = rewrite_ball(&s2.result, rewrite_fuel);
                let set1: HashSet<Term> =
                    ball1.nodes.iter().map(|(_, t)| alpha_canon(t)).collect();
                let joinable = ball2
                    .nodes
                    .iter()
                    .any(|(_, t)| set1.contains(&alpha_canon(t)));
                if !joinable {
                    if ball1.truncated || ball2.truncated {
                        return Verdict::Inconclusive(
                            "rewrite budget exceeded while joining".into(),
                        );
                    }
                    return Verdict::Fail(format!(
                        "two steps with intersecting synchronising roles are not joinable in {}",
                        surface::print_term(state)
                    ));
                }
            }
        }
    }
    if graph.truncated {
        return Verdict::Inconclusive("state cap reached".into());
    }
    Verdict::Pass
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

/// JUnit-style XML summary of a batch of checks.
pub fn junit_xml(suite: &str, reports: &[CheckReport]) -> String {
    fn escape(s: &str) -> String {
        s.replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;")
            .replace('"', "&quot;")
    }
    let failures = reports.iter().filter(|r| r.verdict.is_fail()).count();
    let skipped = reports
        .iter()
        .filter(|r| matches!(r.verdict, Verdict::Inconclusive(_)))
        .count();
    let mut out = String::new();
    out.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    out.push_str(&format!(
        "<testsuite name=\"{}\" tests=\"{}\" failures=\"{}\" skipped=\"{}\">\n",
        escape(suite),
        reports.len(),
        failures,
        skipped
    ));
    for r in reports {
        out.push_str(&format!(
            "  <testcase classname=\"{}\" name=\"{}\">",
            escape(&r.check),
            escape(&r.subject)
        ));
        match &r.verdict {
            Verdict::Pass => {}
            Verdict::Fail(msg) => {
                out.push_str(&format!("\n    <failure>{}</failure>\n  ", escape(msg)));
            }
            Verdict::Inconclusive(msg) => {
                out.push_str(&format!("\n    <skipped>{}</skipped>\n  ", escape(msg)));
            }
        }
        out.push_str("</testcase>\n");
    }
    out.push_str("</testsuite>\n");
    out
}

/// JSON witness for a failed or inconclusive check.
pub fn witness_json(report: &CheckReport) -> serde_json::Value {
    serde_json::json!({
        "check": report.check,
        "subject": report.subject,
        "verdict": match &report.verdict {
            Verdict::Pass => "pass",
            Verdict::Fail(_) => "fail",
            Verdict::Inconclusive(_) => "inconclusive",
        },
        "detail": match &report.verdict {
            Verdict::Pass => String::new(),
            Verdict::Fail(m) | Verdict::Inconclusive(m) => m.clone(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_terms_are_deterministic_per_seed() {
        let cfg = GenConfig {
            seed: 42,
            ..GenConfig::default()
        };
        let a = gen_well_typed(&cfg);
        let b = gen_well_typed(&cfg);
        assert_eq!(a.term, b.term);
    }

    #[test]
    fn generated_terms_type_check() {
        for seed in 0..200 {
            let cfg = GenConfig {
                seed,
                max_depth: 4,
                ..GenConfig::default()
            };
            let sample = gen_well_typed(&cfg);
            assert!(
                check_term(&sample.ctx, &sample.term, None).is_ok(),
                "seed {seed} produced an ill-typed term"
            );
        }
    }

    #[test]
    fn depth_zero_generates_values() {
        let cfg = GenConfig {
            max_depth: 0,
            seed: 7,
            ..GenConfig::default()
        };
        let sample = gen_well_typed(&cfg);
        assert!(is_value(&sample.term));
    }

    #[test]
    fn progress_and_preservation_hold_on_samples() {
        let externs = ExternTable::standard();
        for seed in 0..50 {
            let cfg = GenConfig {
                seed,
                max_depth: 4,
                ..GenConfig::default()
            };
            let sample = gen_well_typed(&cfg);
            let verdict = check_progress_preservation(&sample, &externs, 16);
            assert!(verdict.is_pass(), "seed {seed}: {verdict:?}");
        }
    }

    #[test]
    fn adequacy_triples_project_identically() {
        for seed in 0..50 {
            let (ctx, context, m, n, role) = gen_adequacy_triple(seed);
            let ok = check_adequacy(&ctx, &context, &m, &n, &role).unwrap();
            assert!(ok, "seed {seed}");
        }
    }

    #[test]
    fn adequacy_rejects_occurring_roles() {
        let (ctx, context, m, n, _) = gen_adequacy_triple(0);
        let err = check_adequacy(&ctx, &context, &m, &n, &Role::new("A")).unwrap_err();
        assert!(matches!(err, AdequacyError::PreconditionViolated(_)));
    }

    #[test]
    fn mutated_projection_fails_deadlock_freedom() {
        // negative control: a network with a send whose partner never
        // receives must be reported, demonstrating the checker can fail.
        let externs = ExternTable::standard();
        let pdefs = process::ProjectedDefs::new();
        let penv = process::NetEnv {
            defs: &pdefs,
            externs: &externs,
        };
        let n = process::parse_network("S[send[R] 5] | R[()]").unwrap();
        let result =
            process::run_network(&n, &penv, Scheduler::Deterministic, 100, 8);
        assert!(matches!(result.outcome, process::NetOutcome::Deadlock(_)));
    }

    #[test]
    fn xml_report_counts_failures() {
        let reports = vec![
            CheckReport {
                check: "progress".into(),
                subject: "t0".into(),
                verdict: Verdict::Pass,
            },
            CheckReport {
                check: "soundness".into(),
                subject: "t1".into(),
                verdict: Verdict::Fail("boom".into()),
            },
        ];
        let xml = junit_xml("conformance", &reports);
        assert!(xml.contains("failures=\"1\""));
        assert!(xml.contains("<failure>boom</failure>"));
    }
}
