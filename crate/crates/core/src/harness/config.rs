//! Plan files.
//!
//! A plan is a TOML document read as flat `key = value` pairs; tables are
//! flattened to dotted keys, so `[schedule] a = 1` and `schedule.a = 1` are
//! the same key. Unknown keys are an error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use toml::Value;

use super::{EvalPlan, ExperimentPlan, ProblemKind, ProblemSpec};
use crate::gt_core::{Init, Oracle, RunConfig};
use crate::lower_level::{LowerIterRule, SaSchedule};
use crate::network::{Topology, TopologyParams};
use crate::problems::{CournotParams, LowerEval, Stage};
use crate::{Error, Execution, Result};

pub type FlatConfig = BTreeMap<String, Value>;

/// Keys that must be present.
pub const REQUIRED_KEYS: &[&str] = &["problem", "m", "gamma", "eta", "K"];

/// Every accepted key.
pub const KNOWN_KEYS: &[&str] = &[
    "problem",
    "mode",
    "oracle",
    "m",
    "topologies",
    "gamma",
    "eta",
    "K",
    "minibatch",
    "epochs",
    "lower_iters",
    "eval_samples",
    "eval_lower",
    "grad_norm_samples",
    "sample_paths",
    "seed",
    "out_dir",
    "schedule.a",
    "schedule.gamma_hat",
    "schedule.big_gamma_hat",
    "schedule.rule",
    "schedule.fixed_t",
    "det_step",
    "leader_box",
    "include_leader_shift",
    "d",
    "x_u",
    "b",
    "p_followers",
    "cost_seed",
    "x0",
    "init",
    "init_scale",
    "sparse_degree",
    "er_probability",
    "baseline",
    "execution",
];

/// Reads and parses a plan file.
pub fn load_plan(path: &Path) -> Result<ExperimentPlan> {
    plan_from_map(load_flat(path)?)
}

/// Command-line values that replace file keys.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub topologies: Option<Vec<String>>,
    pub mode: Option<String>,
}

impl Overrides {
    pub fn apply(&self, map: &mut FlatConfig) {
        if let Some(s) = self.seed {
            map.insert("seed".into(), Value::Integer(s as i64));
        }
        if let Some(d) = &self.out_dir {
            map.insert("out_dir".into(), Value::String(d.display().to_string()));
        }
        if let Some(t) = &self.topologies {
            map.insert("topologies".into(), Value::Array(t.iter().cloned().map(Value::String).collect()));
        }
        if let Some(m) = &self.mode {
            map.insert("mode".into(), Value::String(m.clone()));
        }
    }
}

/// Reads a plan file and applies command-line overrides before validation.
pub fn load_plan_with(path: &Path, overrides: &Overrides) -> Result<ExperimentPlan> {
    let mut map = load_flat(path)?;
    overrides.apply(&mut map);
    plan_from_map(map)
}

pub fn load_flat(path: &Path) -> Result<FlatConfig> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    flatten(&text)
}

pub fn parse_plan(text: &str) -> Result<ExperimentPlan> {
    plan_from_map(flatten(text)?)
}

/// Parses TOML text into dotted keys.
pub fn flatten(text: &str) -> Result<FlatConfig> {
    let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("malformed plan: {e}")))?;
    let mut out = FlatConfig::new();
    flatten_into("", table, &mut out);
    Ok(out)
}

fn flatten_into(prefix: &str, table: toml::Table, out: &mut FlatConfig) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten_into(&key, t, out),
            other => {
                out.insert(key, other);
            }
        }
    }
}

struct Reader {
    map: FlatConfig,
}

impl Reader {
    fn raw(&self, key: &str) -> Option<&Value> {
        self.map.get(key)
    }

    fn wrong(&self, key: &str, what: &str) -> Error {
        Error::Config(format!("key `{key}` must be {what}, got {}", self.map[key]))
    }

    fn f64(&self, key: &str) -> Result<Option<f64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Float(f)) => Ok(Some(*f)),
            Some(Value::Integer(i)) => Ok(Some(*i as f64)),
            Some(_) => Err(self.wrong(key, "a number")),
        }
    }

    fn usize(&self, key: &str) -> Result<Option<usize>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as usize)),
            Some(_) => Err(self.wrong(key, "a nonnegative integer")),
        }
    }

    fn u64(&self, key: &str) -> Result<Option<u64>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
            Some(_) => Err(self.wrong(key, "a nonnegative integer")),
        }
    }

    fn bool(&self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Boolean(b)) => Ok(Some(*b)),
            Some(_) => Err(self.wrong(key, "true or false")),
        }
    }

    fn str(&self, key: &str) -> Result<Option<&str>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(self.wrong(key, "a string")),
        }
    }

    fn f64_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| match v {
                    Value::Float(f) => Ok(*f),
                    Value::Integer(i) => Ok(*i as f64),
                    _ => Err(self.wrong(key, "a list of numbers")),
                })
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(Value::Float(f)) => Ok(Some(vec![*f])),
            Some(Value::Integer(i)) => Ok(Some(vec![*i as f64])),
            Some(_) => Err(self.wrong(key, "a list of numbers")),
        }
    }

    fn str_list(&self, key: &str) -> Result<Option<Vec<String>>> {
        match self.raw(key) {
            None => Ok(None),
            Some(Value::String(s)) => Ok(Some(s.split(',').map(|p| p.trim().to_string()).collect())),
            Some(Value::Array(a)) => a
                .iter()
                .map(|v| v.as_str().map(str::to_string).ok_or_else(|| self.wrong(key, "a list of strings")))
                .collect::<Result<Vec<_>>>()
                .map(Some),
            Some(_) => Err(self.wrong(key, "a list of strings")),
        }
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Config(format!("key `{key}` must be positive, got {v}")))
    }
}

/// Builds a plan from flat keys, reporting every unknown key and every
/// missing required key at once.
pub fn plan_from_map(map: FlatConfig) -> Result<ExperimentPlan> {
    let unknown: Vec<&str> = map.keys().map(String::as_str).filter(|k| !KNOWN_KEYS.contains(k)).collect();
    if !unknown.is_empty() {
        return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
    }
    let missing: Vec<&str> = REQUIRED_KEYS.iter().copied().filter(|k| !map.contains_key(*k)).collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!("missing required keys: {}", missing.join(", "))));
    }
    let r = Reader { map };

    let kind: ProblemKind = r.str("problem")?.unwrap_or_default().parse()?;
    let defaults = CournotParams::default();
    let cournot = CournotParams {
        b: r.f64("b")?.map(|v| positive("b", v)).transpose()?.unwrap_or(defaults.b),
        d: r.f64("d")?.unwrap_or(defaults.d),
        x_u: r.f64("x_u")?.map(|v| positive("x_u", v)).transpose()?.unwrap_or(defaults.x_u),
        cost_seed: r.u64("cost_seed")?.unwrap_or(defaults.cost_seed),
        include_leader_shift: r.bool("include_leader_shift")?.unwrap_or(defaults.include_leader_shift),
        ..defaults
    };
    let problem = ProblemSpec { kind, p_followers: r.usize("p_followers")?.unwrap_or(20), cournot };
    let built = problem.build()?;
    let stage = built.stage();

    let mode = match r.str("mode")? {
        Some(s) => s.parse::<Stage>()?,
        None => stage,
    };
    if mode != stage {
        return Err(Error::Config(format!("mode {mode} does not match the {stage} problem `{}`", built.name())));
    }

    let m = r.usize("m")?.unwrap_or(0);
    if m < 2 {
        return Err(Error::Config(format!("key `m` must be at least 2, got {m}")));
    }
    let topologies = match r.str_list("topologies")? {
        Some(list) => list.iter().map(|s| s.parse::<Topology>()).collect::<Result<Vec<_>>>()?,
        None => Topology::ALL.to_vec(),
    };
    if topologies.is_empty() {
        return Err(Error::Config("key `topologies` must not be empty".into()));
    }

    let horizon_k = r.usize("K")?.unwrap_or(0);
    if horizon_k == 0 {
        return Err(Error::Config("key `K` must be at least 1".into()));
    }
    let c = built.constants();
    let base = SaSchedule::default_for(&c);
    let schedule = if ["schedule.a", "schedule.gamma_hat", "schedule.big_gamma_hat"].iter().any(|k| r.raw(k).is_some())
    {
        let s = SaSchedule::new(
            r.f64("schedule.gamma_hat")?.unwrap_or(base.gamma_hat),
            r.f64("schedule.big_gamma_hat")?.unwrap_or(base.big_gamma_hat),
            r.f64("schedule.a")?.unwrap_or(base.a),
            &c,
        )
        .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        Some(s)
    } else {
        None
    };
    let lower_rule = match (r.str("schedule.rule")?, r.usize("schedule.fixed_t")?) {
        (_, Some(t)) if t > 0 => LowerIterRule::Fixed(t),
        (_, Some(_)) => return Err(Error::Config("key `schedule.fixed_t` must be at least 1".into())),
        (None | Some("experiment"), None) => LowerIterRule::Experiment,
        (Some("theorem"), None) => LowerIterRule::Theorem,
        (Some(other), None) => {
            return Err(Error::Config(format!("key `schedule.rule` must be `experiment` or `theorem`, got `{other}`")))
        }
    };
    let leader_box = match r.raw("leader_box") {
        None => None,
        Some(Value::Boolean(false)) => None,
        Some(Value::Boolean(true)) => Some(built.leader_bounds().ok_or_else(|| {
            Error::Config(format!("problem `{}` has no default leader box; give [lo, hi]", built.name()))
        })?),
        Some(_) => match r.f64_list("leader_box")?.as_deref() {
            Some(&[lo, hi]) if lo <= hi => Some((lo, hi)),
            _ => return Err(Error::Config("key `leader_box` must be a bool or [lo, hi] with lo <= hi".into())),
        },
    };
    let x0 = r.f64_list("x0")?;
    if let Some(p) = &x0 {
        if p.len() != built.dim_x() {
            return Err(Error::Config(format!("key `x0` needs {} entries, got {}", built.dim_x(), p.len())));
        }
    }
    let init = match r.str("init")? {
        None | Some("common") => x0.map(Init::Common).unwrap_or_default(),
        Some("random") => Init::Random { center: x0, scale: r.f64("init_scale")?.unwrap_or(1.0) },
        Some(other) => return Err(Error::Config(format!("key `init` must be `common` or `random`, got `{other}`"))),
    };
    let execution = match r.str("execution")? {
        None | Some("parallel") => Execution::Parallel,
        Some("sequential") => Execution::Sequential,
        Some(other) => {
            return Err(Error::Config(format!("key `execution` must be `parallel` or `sequential`, got `{other}`")))
        }
    };
    let oracle = match r.str("oracle")? {
        Some(s) => s.parse::<Oracle>()?,
        None => Oracle::Inexact,
    };
    if oracle == Oracle::Exact && !built.has_exact_lower() {
        return Err(Error::Config(format!("problem `{}` has no exact oracle", built.name())));
    }

    let run = RunConfig {
        mode,
        oracle,
        gamma: positive("gamma", r.f64("gamma")?.unwrap_or(0.0))?,
        eta: positive("eta", r.f64("eta")?.unwrap_or(0.0))?,
        horizon_k,
        minibatch: r.usize("minibatch")?.unwrap_or(1),
        schedule,
        lower_rule,
        det_step: r.f64("det_step")?.map(|v| positive("det_step", v)).transpose()?,
        init,
        leader_box,
        master_seed: r.u64("seed")?.unwrap_or(0),
        execution,
    };
    run.validate().map_err(|e| Error::Config(e.to_string()))?;

    let epochs = r.usize("epochs")?.unwrap_or(horizon_k.min(5));
    if epochs == 0 || epochs > horizon_k {
        return Err(Error::Config(format!("key `epochs` must be in 1..=K ({horizon_k}), got {epochs}")));
    }
    let lower = match r.str("eval_lower")? {
        None | Some("iterative") => {
            let iters = r.usize("lower_iters")?.unwrap_or(150);
            if iters == 0 {
                return Err(Error::Config("key `lower_iters` must be at least 1".into()));
            }
            LowerEval::Iterative(iters)
        }
        Some("exact") if built.has_exact_lower() => LowerEval::Exact,
        Some("exact") => return Err(Error::Config(format!("problem `{}` has no exact oracle", built.name()))),
        Some(other) => {
            return Err(Error::Config(format!("key `eval_lower` must be `iterative` or `exact`, got `{other}`")))
        }
    };
    let eval_samples = r.usize("eval_samples")?.unwrap_or(50);
    if eval_samples == 0 {
        return Err(Error::Config("key `eval_samples` must be at least 1".into()));
    }
    let eval = EvalPlan { epochs, lower, eval_samples, grad_norm_samples: r.usize("grad_norm_samples")?.unwrap_or(0) };

    let sample_paths = r.usize("sample_paths")?.unwrap_or(1);
    if sample_paths == 0 {
        return Err(Error::Config("key `sample_paths` must be at least 1".into()));
    }
    let tdef = TopologyParams::default();
    let topology_params = TopologyParams {
        sparse_degree: r.f64("sparse_degree")?.unwrap_or(tdef.sparse_degree),
        er_probability: r.f64("er_probability")?.unwrap_or(tdef.er_probability),
        seed: 0,
    };
    Ok(ExperimentPlan {
        problem,
        m,
        topologies,
        topology_params,
        sample_paths,
        run,
        eval,
        baseline: r.bool("baseline")?.unwrap_or(true),
        out_dir: PathBuf::from(r.str("out_dir")?.unwrap_or("out")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FULL_SHAPE: &str = r#"
problem = "bilevel"
m = 20
topologies = ["complete", "ring", "sparse", "tree", "erdos_renyi"]
gamma = 1e-4
eta = 0.1
K = 100
minibatch = 5
sample_paths = 5
epochs = 5
lower_iters = 150
"#;

    #[test]
    fn parses_full_plan() {
        let p = parse_plan(FULL_SHAPE).unwrap();
        assert_eq!(p.m, 20);
        assert_eq!(p.topologies, Topology::ALL.to_vec());
        assert_eq!(p.run.horizon_k, 100);
        assert_eq!(p.run.minibatch, 5);
        assert_eq!(p.run.mode, Stage::SingleStage);
        assert_eq!(p.eval.lower, LowerEval::Iterative(150));
        assert_eq!(p.sample_paths, 5);
    }

    #[test]
    fn tables_flatten_to_dotted_keys() {
        let a = parse_plan(&format!("{FULL_SHAPE}\n[schedule]\na = 1.0\ngamma_hat = 1.0\n")).unwrap();
        let b = parse_plan(&format!("{FULL_SHAPE}\nschedule.a = 1.0\nschedule.gamma_hat = 1.0\n")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.run.schedule.unwrap().gamma_hat, 1.0);
    }

    #[test]
    fn unknown_keys_are_listed() {
        let err = parse_plan(&format!("{FULL_SHAPE}\nfoo = 1\nbar.baz = 2\n")).unwrap_err().to_string();
        assert!(err.contains("bar.baz") && err.contains("foo"), "{err}");
    }

    #[test]
    fn missing_keys_are_named() {
        let err = parse_plan("problem = \"toy\"\nm = 3\n").unwrap_err().to_string();
        assert!(err.contains("gamma") && err.contains("eta") && err.contains("K"), "{err}");
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "gamma = -1.0",
            "epochs = 500",
            "mode = \"two_stage\"",
            "schedule.gamma_hat = 0.1",
            "topologies = [\"star\"]",
            "sample_paths = 0",
        ] {
            let text = FULL_SHAPE
                .lines()
                .filter(|l| !l.starts_with(bad.split(' ').next().unwrap()))
                .collect::<Vec<_>>()
                .join("\n");
            let err = parse_plan(&format!("{text}\n{bad}\n")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{bad}: {err}");
        }
        assert!(parse_plan("problem = [").is_err());
    }

    #[test]
    fn cournot_keys() {
        let p = parse_plan(
            "problem = \"cournot\"\nm = 4\ngamma = 1e-4\neta = 0.1\nK = 10\nleader_box = true\nx_u = 7\nd = 0.5\ninclude_leader_shift = false\np_followers = 3\n",
        )
        .unwrap();
        assert_eq!(p.run.mode, Stage::TwoStage);
        assert_eq!(p.run.leader_box, Some((0.0, 7.0)));
        assert_eq!(p.problem.p_followers, 3);
        assert!(!p.problem.cournot.include_leader_shift);
        assert_eq!(p.problem.cournot.d, 0.5);
    }
}
