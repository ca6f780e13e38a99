//! Built-in problems, each with the reference used to judge a trained model.

mod oracle;

use std::f64::consts::PI;

use crate::framework::*;
use crate::networks::{Activation, NetworkSpec, OutputTransform};
use crate::optimizers::OptimizerConfig;

pub use oracle::{
    closed_form_values, evaluate_against_oracle, oracle_grid, CheckResult, OracleReport, VariableError,
};

/// Names of all built-in problems, in listing order.
pub const NAMES: [&str; 8] = [
    "function_approx",
    "cauchy_euler",
    "cauchy_euler_kan",
    "diffusion",
    "log_utility",
    "log_utility_system",
    "econ_1d",
    "ditella",
];

pub fn by_name(name: &str) -> Option<ModelDefinition> {
    Some(match name {
        "function_approx" => function_approx(),
        "cauchy_euler" => cauchy_euler(),
        "cauchy_euler_kan" => cauchy_euler_kan(),
        "diffusion" => diffusion(),
        "log_utility" => log_utility(),
        "log_utility_system" => log_utility_system(),
        "econ_1d" => econ_1d(),
        "ditella" => ditella(),
        _ => return None,
    })
}

pub fn all() -> Vec<ModelDefinition> {
    NAMES.iter().map(|n| by_name(n).expect("listed")).collect()
}

fn tanh_4x30() -> NetworkSpec {
    NetworkSpec::mlp(&[], &[30; 4], Activation::Tanh)
}

fn oracle(eval_grid: &[usize], closed_form: &[(&str, &str)], checks: &[&str]) -> Option<OracleDef> {
    Some(OracleDef {
        eval_grid: eval_grid.to_vec(),
        closed_form: closed_form.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        checks: checks.iter().map(|c| c.to_string()).collect(),
    })
}

fn labeled<T>(mut items: Vec<T>, labels: &[&str], set: impl Fn(&mut T, String)) -> Vec<T> {
    for (item, l) in items.iter_mut().zip(labels) {
        set(item, l.to_string());
    }
    items
}

const FUNCTION_LEFT: &str = "5 + sin(x) + sin(2*x) + sin(3*x) + sin(4*x)";
const FUNCTION_RIGHT: &str = "cos(10*x)";

/// Discontinuous oscillating target, split into two constraint-activated systems.
pub fn function_approx() -> ModelDefinition {
    let mut training = TrainingConfig::new(20_000, OptimizerConfig::adam(1e-3));
    training.reference_epochs = Some(50_000);
    let branch = |label: &str, cmp, rhs: &str| SystemDef {
        label: Some(label.into()),
        constraints: vec![ConstraintDef::new("x", cmp, "0")],
        equations: vec![],
        endogenous: vec![EndogenousDef::new("y", rhs)],
        weight: 1.0,
    };
    let mut def = ModelDefinition::new("function_approx", vec![StateVariableDef::new("x", -3.0, 3.0)], training)
        .learnable(
            "y",
            LearnableRole::EndogenousVariable,
            NetworkSpec::mlp(&[], &[40, 40], Activation::Silu),
        )
        .system(branch("left", Comparator::Lt, FUNCTION_LEFT))
        .system(branch("right", Comparator::Ge, FUNCTION_RIGHT));
    let closed = format!("(1 - step(x))*({FUNCTION_LEFT}) + step(x)*{FUNCTION_RIGHT}");
    def.oracle = oracle(&[601], &[("y", &closed)], &["target_mse"]);
    def
}

fn cauchy_euler_base(name: &str, spec: NetworkSpec, training: TrainingConfig) -> ModelDefinition {
    let mut def = ModelDefinition::new(name, vec![StateVariableDef::new("x", 1.0, 2.0)], training)
        .learnable("y", LearnableRole::EndogenousVariable, spec)
        .endogenous("x^2*y_xx + 6*x*y_x + 4*y", "0")
        .condition(ConditionDef::at_points("y", "6", vec![vec![1.0]]).labeled("y_at_1"))
        .condition(ConditionDef::at_points("y", "5/4", vec![vec![2.0]]).labeled("y_at_2"));
    def.endogenous[0].label = Some("ode".into());
    def.oracle = oracle(&[101], &[("y", "4*x^(-4) + 2*x^(-1)")], &[]);
    def
}

/// `x^2 y'' + 6 x y' + 4 y = 0`, `y(1) = 6`, `y(2) = 5/4`.
pub fn cauchy_euler() -> ModelDefinition {
    cauchy_euler_base(
        "cauchy_euler",
        tanh_4x30(),
        TrainingConfig::new(2000, OptimizerConfig::adam(1e-3)),
    )
}

/// The same equation on a KAN trained with L-BFGS.
pub fn cauchy_euler_kan() -> ModelDefinition {
    let mut spec = NetworkSpec::kan(&[], &[5, 5]);
    spec.grid_range = [1.0, 2.0];
    cauchy_euler_base(
        "cauchy_euler_kan",
        spec,
        TrainingConfig::new(100, OptimizerConfig::lbfgs(1.0)),
    )
}

/// Heat equation with a source term on `[-1,1] x [0,1]`.
pub fn diffusion() -> ModelDefinition {
    let mut def = ModelDefinition::new(
        "diffusion",
        vec![StateVariableDef::new("x", -1.0, 1.0), StateVariableDef::new("t", 0.0, 1.0)],
        TrainingConfig::new(1000, OptimizerConfig::adam(1e-3)),
    )
    .param("pi", PI)
    .learnable("y", LearnableRole::EndogenousVariable, tanh_4x30())
    .endogenous("y_t", "y_xx - exp(-t)*(sin(pi*x) - pi^2*sin(pi*x))")
    .condition(ConditionDef::on_boundary("y", "sin(pi*x)", "t", &[0.0], 100).labeled("initial"))
    .condition(ConditionDef::on_boundary("y", "0", "x", &[-1.0, 1.0], 100).labeled("boundary"));
    def.endogenous[0].label = Some("pde".into());
    def.oracle = oracle(&[41, 41], &[("y", "exp(-t)*sin(pi*x)")], &[]);
    def
}

const LOG_UTILITY_MAIN_LHS: &str = r"(r(1-\eta) + \rho\eta)q";

fn log_utility_base(name: &str) -> ModelDefinition {
    let mut training = TrainingConfig::new(100, OptimizerConfig::adam(1e-3));
    training.reference_epochs = Some(100);
    let mut def = ModelDefinition::new(name, vec![StateVariableDef::new("eta", 0.01, 0.99)], training)
        .param("rho", 0.06)
        .param("r", 0.05)
        .param("a", 0.11)
        .param("a_under", 0.07)
        .param("delta", 0.05)
        .param("delta_under", 0.05)
        .param("sigma", 0.1)
        .param("kappa", 2.0)
        .learnable("q", LearnableRole::EndogenousVariable, tanh_4x30())
        .learnable("psi", LearnableRole::EndogenousVariable, tanh_4x30())
        .tex_equations(&[
            (r"\iota", r"\frac{q^2-1}{2\kappa}"),
            (
                r"\sigma_t^q",
                r"\frac{\sigma}{1 - \frac{1}{q}\frac{\partial q}{\partial \eta}(\psi - \eta)} - \sigma",
            ),
            (r"\sigma_t^\eta", r"\frac{\psi - \eta}{\eta}(\sigma + \sigma_t^q)"),
            (
                r"\mu_t^\eta",
                r"(\sigma_t^\eta)^2 + \frac{a - \iota}{q} + (1-\psi)(\underline{\delta} - \delta) - \rho",
            ),
        ])
        .condition(
            ConditionDef::at_points("q", "sqrt(2*a_under*kappa + (kappa*r)^2 + 1) - kappa*r", vec![vec![0.0]])
                .labeled("q_at_0"),
        )
        .constraint(ConstraintDef {
            label: Some("psi_cap".into()),
            ..ConstraintDef::new("psi", Comparator::Le, "1")
        });
    for (learnable, guess) in [
        ("q", [("eta < 0.3", "1.05 + 0.06/0.3*eta"), ("", "1.1 - 0.03/0.7*eta")]),
        ("psi", [("eta < 0.3", "1/0.3*eta"), ("", "1")]),
    ] {
        def.pretrain.push(PretrainDef {
            learnable: learnable.into(),
            guess: guess
                .iter()
                .map(|(w, v)| GuessPiece {
                    when: (!w.is_empty()).then(|| w.to_string()),
                    value: v.to_string(),
                })
                .collect(),
            epochs: 6000,
            batch_size: None,
            optimizer: OptimizerConfig::adam(1e-3),
        });
    }
    def.oracle = oracle(
        &[99],
        &[],
        &["regime_boundary", "psi_nondecreasing", "psi_plateau", "endogenous_rms"],
    );
    def
}

const LOG_UTILITY_VOL: (&str, &str) = (
    r"(\sigma + \sigma_t^q)^2(\psi / \eta - (1-\psi) / (1-\eta))",
    r"\frac{a - \underline{a}}{q} + \underline{\delta} - \delta",
);

/// Log-utility model with the squared volatility equation.
pub fn log_utility() -> ModelDefinition {
    let mut def = log_utility_base("log_utility").tex_endogenous(&[
        (LOG_UTILITY_MAIN_LHS, r"\psi a + (1-\psi)\underline{a} - \iota"),
        LOG_UTILITY_VOL,
    ]);
    def.endogenous = labeled(def.endogenous, &["goods_market", "volatility"], |e, l| e.label = Some(l));
    def
}

/// Log-utility model with the goods-market equation split into two regimes.
pub fn log_utility_system() -> ModelDefinition {
    let mut def = log_utility_base("log_utility_system").tex_endogenous(&[LOG_UTILITY_VOL]);
    def.endogenous[0].label = Some("volatility".into());
    let regime = |label: &str, cmp, rhs: &str| SystemDef {
        label: Some(label.into()),
        constraints: vec![ConstraintDef::new("psi", cmp, "1")],
        equations: vec![],
        endogenous: vec![EndogenousDef {
            latex: true,
            ..EndogenousDef::new(LOG_UTILITY_MAIN_LHS, rhs)
        }],
        weight: 1.0,
    };
    def.systems.push(regime("crisis", Comparator::Lt, r"\psi a + (1-\psi)\underline{a} - \iota"));
    def.systems.push(regime("normal", Comparator::Ge, r"a - \iota"));
    def
}

/// Two-agent single-state model with Epstein-Zin preferences.
pub fn econ_1d() -> ModelDefinition {
    let softplus = || tanh_4x30().with_transform(OutputTransform::Softplus);
    let mut def = ModelDefinition::new(
        "econ_1d",
        vec![StateVariableDef::new("eta", 0.01, 0.99)],
        TrainingConfig::new(2000, OptimizerConfig::adam(1e-3)),
    )
    .param("gamma_i", 2.0)
    .param("gamma_h", 5.0)
    .param("rho_i", 0.05)
    .param("rho_h", 0.05)
    .param("zeta_i", 1.00005)
    .param("zeta_h", 1.00005)
    .param("mu_a", 0.04)
    .param("sigma_a", 0.2)
    .param("alpha_a", 0.1)
    .param("mu_O", 0.04)
    .param("kappa", 10000.0)
    .learnable("xi_i", LearnableRole::Agent, softplus())
    .learnable("xi_h", LearnableRole::Agent, softplus())
    .learnable("mu_eta", LearnableRole::EndogenousVariable, tanh_4x30())
    .learnable("sigma_etaa", LearnableRole::EndogenousVariable, tanh_4x30())
    .learnable("q_a", LearnableRole::EndogenousVariable, softplus())
    .learnable("w_ia", LearnableRole::EndogenousVariable, tanh_4x30())
    .learnable("w_ha", LearnableRole::EndogenousVariable, tanh_4x30());
    let mut eqs: Vec<(String, String)> = vec![
        (r"\iota_t^a".into(), r"\frac{q_t^a - 1}{\kappa}".into()),
        (r"\Phi_t^a".into(), r"\frac{1}{\kappa}\log(1+\kappa\iota_t^a)".into()),
    ];
    for j in ["i", "h"] {
        eqs.push((format!(r"c_t^{j}"), format!(r"(\rho^{j})^{{\zeta^{j}}}(\xi_t^{j})^{{1-\zeta^{j}}}")));
    }
    eqs.push((
        r"\sigma_t^{qa}".into(),
        r"\frac{1}{q_t^a} \frac{\partial q_t^a}{\partial \eta_t} \sigma_t^{\eta a} \eta_t".into(),
    ));
    for j in ["i", "h"] {
        eqs.push((format!(r"\sigma_t^{{n{j}a}}"), format!(r"w_t^{{{j}a}}(\sigma^a + \sigma_t^{{qa}})")));
    }
    for j in ["i", "h"] {
        eqs.push((
            format!(r"\sigma_t^{{\xi {j}a}}"),
            format!(r"\frac{{1}}{{\xi_t^{j}}}\frac{{\partial \xi_t^{j}}}{{\partial \eta_t}}\sigma_t^{{\eta a}}\eta_t"),
        ));
    }
    eqs.push((
        r"\sigma_t^{na}".into(),
        r"\eta_t\sigma_t^{nia} + (1-\eta_t)\sigma_t^{nha}".into(),
    ));
    eqs.push((
        r"\mu_t^{qa}".into(),
        r"\frac{1}{q_t^a} \left(\frac{\partial q_t^a}{\partial \eta_t} \mu_t^{\eta} \eta_t + \frac{1}{2} \frac{\partial^2 q_t^a}{\partial \eta_t^2} (\sigma_t^{\eta a} \eta_t)^2\right)".into(),
    ));
    eqs.push((
        r"r_t^{ka}".into(),
        r"\mu_t^{qa} + \mu^a + \Phi_t^a + \sigma^a\sigma^{qa} + \frac{\alpha^a - \iota_t^a}{q_t^a}".into(),
    ));
    eqs.push((
        r"r_t".into(),
        r"r_t^{ka} - \gamma^hw_t^{ha}(\sigma^a + \sigma_t^{qa})^2  + (1-\gamma^h)\sigma_t^{\xi ha}(\sigma^a + \sigma_t^{qa})".into(),
    ));
    for j in ["i", "h"] {
        eqs.push((
            format!(r"\mu_t^{{n{j}}}"),
            format!(r"r_t - c_t^{j} + w_t^{{{j}a}}(r_t^{{ka}} - r_t)"),
        ));
    }
    for j in ["i", "h"] {
        eqs.push((
            format!(r"\mu_t^{{\xi {j}}}"),
            format!(
                r"\frac{{1}}{{\xi_t^{j}}}\left(\frac{{\partial \xi_t^{j}}}{{\partial \eta_t}}\mu_t^{{\eta}}\eta_t + \frac{{1}}{{2}}\frac{{\partial^2 \xi_t^{j}}}{{\partial \eta_t^2}}(\sigma_t^{{\eta a}}\eta_t)^2\right)"
            ),
        ));
    }
    eqs.push((
        r"\hat{r_t^{ka}}".into(),
        r"r_t^{ka} + \frac{\mu^O - \mu^a}{\sigma^a}(\sigma^a + \sigma_t^{qa})".into(),
    ));
    let eq_refs: Vec<(&str, &str)> = eqs.iter().map(|(l, r)| (l.as_str(), r.as_str())).collect();
    def = def
        .tex_equations(&eq_refs)
        .tex_endogenous(&[
            (
                r"\mu_t^{\eta}",
                r"(1-\eta_t)(\mu_t^{ni} - \mu_t^{nh}) +(\sigma_t^{na})^2  - \sigma_t^{nia}\sigma_t^{na}",
            ),
            (r"\sigma_t^{\eta a}", r"(1-\eta_t)(\sigma_t^{nia} - \sigma_t^{nha})"),
            (
                r"\hat{r_t^{ka}} - r_t",
                r"\gamma^iw_t^{ia}(\sigma^a  + \sigma_t^{qa})^2 - (1-\gamma^i)\sigma_t^{\xi ia}(\sigma^{a}  + \sigma_t^{qa})",
            ),
            (r"1", r"w_t^{ia}\eta_t + w_t^{ha}(1-\eta_t)"),
            (r"\alpha^a - \iota_t^a", r"(c_t^i\eta_t + c_t^h(1 - \eta_t))q_t^a"),
        ])
        .tex_hjb(&[
            r"\frac{\rho^i}{1-\frac{1}{\zeta^i}}\left( \left(\frac{c_t^i}{\xi_t^i} \right)^{1-1/\zeta^i}-1 \right) + \mu_t^{\xi i} +  \mu_t^{ni} - \frac{\gamma^i}{2}(\sigma_t^{nia})^2  - \frac{\gamma^i}{2}(\sigma_t^{\xi ia})^2 + (1-\gamma^i)\sigma_t^{\xi ia}\sigma_t^{nia}",
            r"\frac{\rho^h}{1-\frac{1}{\zeta^h}}\left( \left(\frac{c_t^h}{\xi_t^h} \right)^{1-1/\zeta^h}-1 \right) + \mu_t^{\xi h} +  \mu_t^{nh} - \frac{\gamma^h}{2}(\sigma_t^{nha})^2  - \frac{\gamma^h}{2}(\sigma_t^{\xi ha})^2 + (1-\gamma^h)\sigma_t^{\xi ha}\sigma_t^{nha}",
        ]);
    def.endogenous = labeled(
        def.endogenous,
        &["eta_drift", "eta_volatility", "capital_pricing", "market_clearing", "goods_market"],
        |e, l| e.label = Some(l),
    );
    def.hjb = labeled(def.hjb, &["hjb_i", "hjb_h"], |h, l| h.label = Some(l));
    def.oracle = oracle(
        &[99],
        &[],
        &[
            "wha_left",
            "qa_nondecreasing",
            "sigma_qa_peak",
            "sigma_qa_ends",
            "market_clearing",
        ],
    );
    def
}

/// Two-state stochastic volatility model on a fixed grid.
pub fn ditella() -> ModelDefinition {
    let softplus = || tanh_4x30().with_transform(OutputTransform::Softplus);
    let grid = |name: &str| StateVariableDef {
        grid_points: Some(50),
        ..StateVariableDef::new(name, 0.05, 0.95)
    };
    let mut training = TrainingConfig::new(2000, OptimizerConfig::adam(1e-3));
    training.reference_epochs = Some(10_000);
    let mut def = ModelDefinition::new("ditella", vec![grid("x"), grid("v")], training)
        .param("a", 1.0)
        .param("sigma", 0.0125)
        .param("lambda", 1.38)
        .param("v_bar", 0.25)
        .param("sigma_v_bar", -0.17)
        .param("rho", 0.0665)
        .param("gamma", 5.0)
        .param("psi", 0.5)
        .param("tau", 1.15)
        .param("phi", 0.2)
        .param("A", 53.0)
        .param("B", -0.8668571428571438)
        .param("delta", 0.05)
        .learnable("xi", LearnableRole::Agent, softplus())
        .learnable("zeta", LearnableRole::Agent, softplus())
        .learnable("p", LearnableRole::EndogenousVariable, softplus())
        .learnable("r", LearnableRole::EndogenousVariable, tanh_4x30());
    let drift = |f: &str| {
        format!(
            r"\frac{{1}}{{{f}}} \left( \mu_v \frac{{\partial {f}}}{{\partial v}} + \mu_x \frac{{\partial {f}}}{{\partial x}} + \frac{{1}}{{2}} \left( \sigma_v^2 \frac{{\partial^2 {f}}}{{\partial v^2}} + 2 \sigma_v \sigma_x \frac{{\partial^2 {f}}}{{\partial v \partial x}} + \sigma_x^2 \frac{{\partial^2 {f}}}{{\partial x^2}} \right)\right)"
        )
    };
    let vol = |f: &str| {
        format!(
            r"\frac{{1}}{{{f}}} \left( \frac{{\partial {f}}}{{\partial v}} \sigma_v + \frac{{\partial {f}}}{{\partial x}} \sigma_x \right)"
        )
    };
    let eqs: Vec<(String, String)> = vec![
        ("g".into(), r"\frac{1}{2A} (p - B) - \delta".into()),
        (r"\iota".into(), r"A (g+\delta)^2 + B (g+\delta)".into()),
        (r"\mu_v".into(), r"\lambda (\bar{v} - v)".into()),
        (r"\sigma_v".into(), r"\bar{\sigma_v} \sqrt{v}".into()),
        (r"\hat{e}".into(), r"\rho^{1/\psi} \xi^{(\psi-1)/\psi}".into()),
        (r"\hat{c}".into(), r"\rho^{1/\psi} \zeta^{(\psi-1)/\psi}".into()),
        (
            r"\sigma_{x,1}".into(),
            r"(1-x) x \frac{1-\gamma}{\gamma} \left( \frac{1}{\xi} \frac{\partial \xi}{\partial v} - \frac{1}{\zeta} \frac{\partial \zeta}{\partial v} \right)".into(),
        ),
        (
            r"\sigma_{x,2}".into(),
            r"1 - (1-x) x \frac{1-\gamma}{\gamma} \left( \frac{1}{\xi} \frac{\partial \xi}{\partial x} - \frac{1}{\zeta} \frac{\partial \zeta}{\partial x} \right)".into(),
        ),
        (r"\sigma_x".into(), r"\frac{\sigma_{x,1}}{\sigma_{x,2}} \sigma_v".into()),
        (r"\sigma_p".into(), vol("p")),
        (r"\sigma_\xi".into(), vol(r"\xi")),
        (r"\sigma_\zeta".into(), vol(r"\zeta")),
        (r"\sigma_n".into(), r"\sigma + \sigma_p + \frac{\sigma_x}{x}".into()),
        (r"\pi".into(), r"\gamma \sigma_n + (\gamma-1) \sigma_\xi".into()),
        (r"\sigma_w".into(), r"\frac{\pi}{\gamma} - \frac{\gamma-1}{\gamma} \sigma_\zeta".into()),
        (r"\mu_w".into(), r"r + \pi \sigma_w".into()),
        (r"\mu_n".into(), r"r + \frac{\gamma}{x^2} (\phi v)^2 + \pi \sigma_n".into()),
        (r"\tilde{\sigma_n}".into(), r"\frac{\phi}{x} v".into()),
        (
            r"\mu_x".into(),
            r"x \left(\mu_n - \hat{e} - \tau + \frac{a-\iota}{p} - r - \pi (\sigma+\sigma_p) - \frac{\gamma}{x} (\phi v)^2 + (\sigma + \sigma_p)^2 - \sigma_n (\sigma + \sigma_p)\right)".into(),
        ),
        (r"\mu_p".into(), drift("p")),
        (r"\mu_\xi".into(), drift(r"\xi")),
        (r"\mu_\zeta".into(), drift(r"\zeta")),
    ];
    let eq_refs: Vec<(&str, &str)> = eqs.iter().map(|(l, r)| (l.as_str(), r.as_str())).collect();
    def = def
        .tex_equations(&eq_refs)
        .tex_endogenous(&[
            (r"a - \iota", r"p (\hat{e} x + \hat{c} (1-x))"),
            (r"\sigma + \sigma_p", r"\sigma_n x + \sigma_w (1-x)"),
            (
                r"\frac{a-\iota}{p} + g + \mu_p + \sigma \sigma_p - r",
                r"(\sigma + \sigma_p) \pi + \gamma \frac{1}{x} (\phi v)^2",
            ),
        ])
        .tex_hjb(&[
            r"\frac{\hat{e}^{1-\psi}}{1-\psi} \rho \xi^{\psi-1} + \frac{\tau}{1-\gamma} \left(\left(\frac{\zeta}{\xi} \right)^{1-\gamma}-1 \right) + \mu_n - \hat{e} + \mu_\xi - \frac{\gamma}{2} \left( \sigma_n^2 + \sigma_\xi^2 - 2 \frac{1-\gamma}{\gamma} \sigma_n \sigma_\xi + \tilde{\sigma_n}^2 \right) - \frac{\rho}{1-\psi}",
            r"\frac{\hat{c}^{1-\psi}}{1-\psi} \rho \zeta^{\psi-1} + \mu_w - \hat{c} + \mu_\zeta - \frac{\gamma}{2} \left( \sigma_w^2 + \sigma_\zeta^2 - 2 \frac{1-\gamma}{\gamma} \sigma_w \sigma_\zeta \right) - \frac{\rho}{1-\psi}",
        ]);
    def.endogenous = labeled(
        def.endogenous,
        &["goods_market", "risk_sharing", "capital_pricing"],
        |e, l| e.label = Some(l),
    );
    def.hjb = labeled(def.hjb, &["hjb_experts", "hjb_households"], |h, l| h.label = Some(l));
    def.oracle = oracle(&[50, 50], &[], &["losses_finite", "total_loss", "p_positive"]);
    def
}
