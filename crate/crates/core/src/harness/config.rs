//! Experiment configuration files.
//!
//! The format is line based UTF-8 text:
//!
//! ```text
//! # comment                      (also allowed after a value)
//! [section]                      model | schemes | grid | experiment | output
//! key = value                    one pair per line
//! key = v1, v2, v3               arrays are comma separated
//! ```
//!
//! Numbers accept the usual float syntax and powers written `base^exp`, so
//! `h_ref = 2^-14` is valid. Keys are case sensitive; unknown sections and keys
//! are rejected with their line number.
//!
//! | section      | key              | meaning (default)                                 |
//! |--------------|------------------|---------------------------------------------------|
//! | `model`      | `name`           | `cubic`, `quintic` or `doublewell` (`cubic`)      |
//! |              | `mu0`, `sigma0sq`| double-well initial law N(mu0, sigma0sq) (0, 1)   |
//! | `schemes`    | `list`           | scheme names, see [`parse_scheme`] (`me`)         |
//! |              | `newton_tol`, `newton_max_iter`, `newton_fd_eps` | split-step solver |
//! | `grid`       | `T`              | horizon (1)                                       |
//! |              | `N`              | particles (100)                                   |
//! |              | `seed`           | base seed (1)                                     |
//! |              | `h_ref`          | reference step (2^-14)                            |
//! |              | `h_list`         | coarse steps (2^-7 .. 2^-11)                      |
//! | `experiment` | `record_times`   | density / record times (T)                        |
//! |              | `repetitions`    | Monte Carlo repeats or seeds (1)                  |
//! |              | `moment_orders`  | (2, 4)                                            |
//! |              | `moment_ceiling` | growth flag threshold for m2 (100)                |
//! |              | `moment_stride`  | steps between moment rows (1)                     |
//! |              | `trace_particles`| particle ids for path tables (0, 1, 2, 3, 4)      |
//! |              | `path_stride`    | steps between path rows (1)                       |
//! |              | `n_list`         | particle counts for N-scaling (50 .. 800)         |
//! |              | `proxy_n`        | large-N proxy size (10000)                        |
//! |              | `proxy_seed`     | proxy seed (seed + 2^32)                          |
//! |              | `ssm_reference`  | add a split-step run at `h_ref` to densities (false) |
//! | `output`     | `dir`            | output directory (`out`)                          |
//! |              | `format`         | `csv`, `svg` or both (`csv, svg`)                 |

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{model_example_cubic, model_example_doublewell, model_example_quintic, Fnv64, ModelSpec};
use crate::stepper::{NewtonConfig, SchemeConfig};
use crate::taming::TamingOperator;

fn cfg_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

/// One `key = value` entry with its source line.
#[derive(Debug, Clone, PartialEq)]
pub struct RawValue {
    pub line: usize,
    pub text: String,
}

/// Sections of `key = value` pairs, before typing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub sections: BTreeMap<String, BTreeMap<String, RawValue>>,
}

const SECTIONS: [&str; 5] = ["model", "schemes", "grid", "experiment", "output"];

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut current: Option<String> = None;
        for (idx, line) in text.lines().enumerate() {
            let lineno = idx + 1;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            if let Some(rest) = body.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| cfg_err(lineno, "unterminated section header"))?
                    .trim();
                if !SECTIONS.contains(&name) {
                    return Err(cfg_err(lineno, format!("unknown section [{name}]")));
                }
                raw.sections.entry(name.to_string()).or_default();
                current = Some(name.to_string());
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| cfg_err(lineno, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(cfg_err(lineno, "empty key"));
            }
            let section = current.as_ref().ok_or_else(|| cfg_err(lineno, "key outside of any section"))?;
            let entries = raw.sections.get_mut(section).expect("section registered on header");
            if entries.contains_key(key) {
                return Err(cfg_err(lineno, format!("duplicate key `{key}` in [{section}]")));
            }
            entries.insert(key.to_string(), RawValue { line: lineno, text: value.to_string() });
        }
        Ok(raw)
    }

    fn get(&self, section: &str, key: &str) -> Option<&RawValue> {
        self.sections.get(section).and_then(|s| s.get(key))
    }
}

/// Parses a real, allowing `base^exp`.
pub fn parse_number(s: &str) -> Option<f64> {
    let s = s.trim();
    let v = match s.split_once('^') {
        Some((b, e)) => b.trim().parse::<f64>().ok()?.powf(e.trim().parse::<f64>().ok()?),
        None => s.parse::<f64>().ok()?,
    };
    v.is_finite().then_some(v)
}

fn number(v: &RawValue) -> Result<f64> {
    parse_number(&v.text).ok_or_else(|| cfg_err(v.line, format!("`{}` is not a number", v.text)))
}

fn list(v: &RawValue) -> Vec<&str> {
    v.text.split(',').map(str::trim).filter(|s| !s.is_empty()).collect()
}

fn numbers(v: &RawValue) -> Result<Vec<f64>> {
    list(v)
        .into_iter()
        .map(|s| parse_number(s).ok_or_else(|| cfg_err(v.line, format!("`{s}` is not a number"))))
        .collect()
}

fn integer(v: &RawValue, text: &str) -> Result<u64> {
    let x = parse_number(text).ok_or_else(|| cfg_err(v.line, format!("`{text}` is not a number")))?;
    if x < 0.0 || x.fract() != 0.0 || x > 2f64.powi(63) {
        return Err(cfg_err(v.line, format!("`{text}` is not a nonnegative integer")));
    }
    Ok(x as u64)
}

fn integers(v: &RawValue) -> Result<Vec<usize>> {
    list(v).into_iter().map(|s| integer(v, s).map(|x| x as usize)).collect()
}

fn boolean(v: &RawValue) -> Result<bool> {
    match v.text.as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(cfg_err(v.line, format!("`{other}` is not a boolean"))),
    }
}

/// Parses one scheme name:
///
/// `em` (or `identity`), `me`, `te(α)`, `se(α)`, `dte(λ)`, `fte(ρ)`, `ssm`,
/// and `A+B` for distinct drift and diffusion operators. Parameters may also
/// be written without parentheses (`te1`); omitted ones default to α = 1,
/// λ = 1/2 and the model's ρ.
pub fn parse_scheme(name: &str, model_rho: f64, newton: NewtonConfig) -> Result<SchemeConfig> {
    let name = name.trim().to_ascii_lowercase();
    if name == "ssm" {
        return Ok(SchemeConfig::split_step(newton));
    }
    if let Some((a, b)) = name.split_once('+') {
        return Ok(SchemeConfig::modified_euler(parse_operator(a, model_rho)?, parse_operator(b, model_rho)?));
    }
    Ok(SchemeConfig::tamed(parse_operator(&name, model_rho)?))
}

fn parse_operator(name: &str, model_rho: f64) -> Result<TamingOperator> {
    let name = name.trim();
    let split = name.find(|c: char| c.is_ascii_digit() || c == '(' || c == '.').unwrap_or(name.len());
    let (head, tail) = name.split_at(split);
    let tail = tail.trim();
    let param = if tail.is_empty() {
        None
    } else {
        let inner = tail.strip_prefix('(').and_then(|t| t.strip_suffix(')')).unwrap_or(tail);
        Some(parse_number(inner).ok_or_else(|| Error::InvalidParameter(format!("bad parameter in scheme `{name}`")))?)
    };
    let no_param = |op: TamingOperator| match param {
        None => Ok(op),
        Some(_) => Err(Error::InvalidParameter(format!("scheme `{head}` takes no parameter"))),
    };
    match head {
        "em" | "identity" => no_param(TamingOperator::identity()),
        "me" => no_param(TamingOperator::modified()),
        "te" => TamingOperator::tanh(param.unwrap_or(1.0)),
        "se" => TamingOperator::sin(param.unwrap_or(1.0)),
        "dte" => TamingOperator::drift_tamed(param.unwrap_or(0.5)),
        "fte" => TamingOperator::fully_tamed(param.unwrap_or(model_rho)),
        _ => Err(Error::InvalidParameter(format!("unknown scheme `{name}`"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelChoice {
    pub name: String,
    pub mu0: f64,
    pub sigma0sq: f64,
}

impl ModelChoice {
    pub fn build(&self) -> Result<ModelSpec> {
        match self.name.as_str() {
            "cubic" => Ok(model_example_cubic()),
            "quintic" => Ok(model_example_quintic()),
            "doublewell" => model_example_doublewell(self.mu0, self.sigma0sq),
            other => Err(Error::InvalidParameter(format!("unknown model `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Formats {
    pub csv: bool,
    pub svg: bool,
}

impl Formats {
    pub fn parse(s: &str) -> Result<Self> {
        let mut f = Formats { csv: false, svg: false };
        for item in s.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            match item {
                "csv" => f.csv = true,
                "svg" => f.svg = true,
                other => return Err(Error::InvalidParameter(format!("unknown output format `{other}`"))),
            }
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: ModelChoice,
    /// Scheme names as written; see [`parse_scheme`].
    pub schemes: Vec<String>,
    pub newton: NewtonConfig,
    pub horizon: f64,
    pub particles: usize,
    pub seed: u64,
    pub h_ref: f64,
    /// Coarse steps, each an integer multiple of `h_ref`.
    pub h_list: Vec<f64>,
    pub record_times: Vec<f64>,
    pub repetitions: usize,
    pub moment_orders: Vec<usize>,
    pub moment_ceiling: f64,
    pub moment_stride: usize,
    pub trace_particles: Vec<usize>,
    pub path_stride: usize,
    pub n_list: Vec<usize>,
    pub proxy_n: usize,
    pub proxy_seed: Option<u64>,
    pub ssm_reference: bool,
    pub out_dir: PathBuf,
    pub formats: Formats,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelChoice { name: "cubic".into(), mu0: 0.0, sigma0sq: 1.0 },
            schemes: vec!["me".into()],
            newton: NewtonConfig::default(),
            horizon: 1.0,
            particles: 100,
            seed: 1,
            h_ref: 2f64.powi(-14),
            h_list: (7..=11).map(|e| 2f64.powi(-e)).collect(),
            record_times: Vec::new(),
            repetitions: 1,
            moment_orders: vec![2, 4],
            moment_ceiling: 1e2,
            moment_stride: 1,
            trace_particles: (0..5).collect(),
            path_stride: 1,
            n_list: vec![50, 100, 200, 400, 800],
            proxy_n: 10_000,
            proxy_seed: None,
            ssm_reference: false,
            out_dir: PathBuf::from("out"),
            formats: Formats { csv: true, svg: true },
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw = RawConfig::parse(text)?;
        let allowed: [(&str, &[&str]); 5] = [
            ("model", &["name", "mu0", "sigma0sq"]),
            ("schemes", &["list", "newton_tol", "newton_max_iter", "newton_fd_eps"]),
            ("grid", &["T", "N", "seed", "h_ref", "h_list"]),
            (
                "experiment",
                &[
                    "record_times",
                    "repetitions",
                    "moment_orders",
                    "moment_ceiling",
                    "moment_stride",
                    "trace_particles",
                    "path_stride",
                    "n_list",
                    "proxy_n",
                    "proxy_seed",
                    "ssm_reference",
                ],
            ),
            ("output", &["dir", "format"]),
        ];
        for (section, keys) in allowed {
            if let Some(entries) = raw.sections.get(section) {
                if let Some((k, v)) = entries.iter().find(|(k, _)| !keys.contains(&k.as_str())) {
                    return Err(cfg_err(v.line, format!("unknown key `{k}` in [{section}]")));
                }
            }
        }

        let mut c = ExperimentConfig::default();
        if let Some(v) = raw.get("model", "name") {
            c.model.name = v.text.clone();
        }
        if let Some(v) = raw.get("model", "mu0") {
            c.model.mu0 = number(v)?;
        }
        if let Some(v) = raw.get("model", "sigma0sq") {
            c.model.sigma0sq = number(v)?;
        }
        if let Some(v) = raw.get("schemes", "list") {
            c.schemes = list(v).into_iter().map(String::from).collect();
        }
        if let Some(v) = raw.get("schemes", "newton_tol") {
            c.newton.tol = number(v)?;
        }
        if let Some(v) = raw.get("schemes", "newton_max_iter") {
            c.newton.max_iter = integer(v, &v.text)? as usize;
        }
        if let Some(v) = raw.get("schemes", "newton_fd_eps") {
            c.newton.jacobian_fd_eps = number(v)?;
        }
        if let Some(v) = raw.get("grid", "T") {
            c.horizon = number(v)?;
        }
        if let Some(v) = raw.get("grid", "N") {
            c.particles = integer(v, &v.text)? as usize;
        }
        if let Some(v) = raw.get("grid", "seed") {
            c.seed = integer(v, &v.text)?;
        }
        if let Some(v) = raw.get("grid", "h_ref") {
            c.h_ref = number(v)?;
        }
        if let Some(v) = raw.get("grid", "h_list") {
            c.h_list = numbers(v)?;
        }
        if let Some(v) = raw.get("experiment", "record_times") {
            c.record_times = numbers(v)?;
        }
        if let Some(v) = raw.get("experiment", "repetitions") {
            c.repetitions = integer(v, &v.text)? as usize;
        }
        if let Some(v) = raw.get("experiment", "moment_orders") {
            c.moment_orders = integers(v)?;
        }
        if let Some(v) = raw.get("experiment", "moment_ceiling") {
            c.moment_ceiling = number(v)?;
        }
        if let Some(v) = raw.get("experiment", "moment_stride") {
            c.moment_stride = integer(v, &v.text)? as usize;
        }
        if let Some(v) = raw.get("experiment", "trace_particles") {
            c.trace_particles = integers(v)?;
        }
        if let Some(v) = raw.get("experiment", "path_stride") {
            c.path_stride = integer(v, &v.text)? as usize;
        }
        if let Some(v) = raw.get("experiment", "n_list") {
            c.n_list = integers(v)?;
        }
        if let Some(v) = raw.get("experiment", "proxy_n") {
            c.proxy_n = integer(v, &v.text)? as usize;
        }
        if let Some(v) = raw.get("experiment", "proxy_seed") {
            c.proxy_seed = Some(integer(v, &v.text)?);
        }
        if let Some(v) = raw.get("experiment", "ssm_reference") {
            c.ssm_reference = boolean(v)?;
        }
        if let Some(v) = raw.get("output", "dir") {
            c.out_dir = PathBuf::from(&v.text);
        }
        if let Some(v) = raw.get("output", "format") {
            c.formats = Formats::parse(&v.text).map_err(|e| cfg_err(v.line, e.to_string()))?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Number of reference steps `T / h_ref`.
    pub fn reference_steps(&self) -> Result<usize> {
        steps_for(self.horizon, self.h_ref).ok_or_else(|| {
            Error::InvalidParameter(format!("T / h_ref = {} / {} is not an integer", self.horizon, self.h_ref))
        })
    }

    /// Coarsening factor `h / h_ref` for a coarse step.
    pub fn factor_for(&self, h: f64) -> Result<usize> {
        let n_ref = self.reference_steps()?;
        match steps_for(h, self.h_ref) {
            Some(f) if f >= 1 && n_ref % f == 0 => Ok(f),
            _ => Err(Error::InvalidParameter(format!("step {h} is not a divisor-compatible multiple of h_ref = {}", self.h_ref))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        self.model.build()?;
        if self.schemes.is_empty() {
            return bad("at least one scheme is required".into());
        }
        for s in &self.schemes {
            parse_scheme(s, 1.0, self.newton)?;
        }
        self.newton.validate()?;
        if !(self.horizon > 0.0) {
            return bad(format!("T must be positive, got {}", self.horizon));
        }
        if self.particles == 0 {
            return bad("N must be positive".into());
        }
        if !(self.h_ref > 0.0 && self.h_ref < 1.0) {
            return bad(format!("h_ref must lie in (0, 1), got {}", self.h_ref));
        }
        self.reference_steps()?;
        if self.h_list.is_empty() {
            return bad("h_list must not be empty".into());
        }
        for &h in &self.h_list {
            if !(h > 0.0 && h < 1.0) {
                return bad(format!("coarse step {h} outside (0, 1)"));
            }
            self.factor_for(h)?;
        }
        if let Some(t) = self.record_times.iter().find(|t| !(**t >= 0.0 && **t <= self.horizon * (1.0 + 1e-12))) {
            return bad(format!("record time {t} outside [0, T]"));
        }
        if self.repetitions == 0 || self.moment_stride == 0 || self.path_stride == 0 {
            return bad("repetitions and strides must be positive".into());
        }
        if self.moment_orders.is_empty() || self.moment_orders.contains(&0) {
            return bad("moment orders must be positive".into());
        }
        if let Some(id) = self.trace_particles.iter().find(|&&id| id >= self.particles) {
            return bad(format!("trace particle {id} not below N = {}", self.particles));
        }
        if self.n_list.contains(&0) || self.proxy_n == 0 {
            return bad("particle counts must be positive".into());
        }
        Ok(())
    }

    /// Record times, defaulting to `[T]` and kept sorted.
    pub fn effective_record_times(&self) -> Vec<f64> {
        let mut t = if self.record_times.is_empty() { vec![self.horizon] } else { self.record_times.clone() };
        t.sort_by(f64::total_cmp);
        t
    }

    pub fn scheme_configs(&self, model: &ModelSpec) -> Result<Vec<SchemeConfig>> {
        self.schemes.iter().map(|s| parse_scheme(s, model.rho(), self.newton)).collect()
    }

    /// Hash of every field that affects results, embedded in plot outputs.
    /// The output directory and formats are left out so that the same
    /// experiment written to two places yields identical files.
    pub fn fingerprint(&self) -> u64 {
        let neutral = ExperimentConfig { out_dir: PathBuf::new(), formats: Formats { csv: true, svg: true }, ..self.clone() };
        let mut h = Fnv64::default();
        h.write(format!("{neutral:?}").as_bytes());
        h.finish()
    }

    /// Overrides for the full-size convergence protocol: N = 100, T = 1,
    /// h_ref = 2^-17, h in 2^-7 .. 2^-13.
    pub fn apply_full_scale_convergence(&mut self) {
        self.particles = 100;
        self.horizon = 1.0;
        self.h_ref = 2f64.powi(-17);
        self.h_list = (7..=13).map(|e| 2f64.powi(-e)).collect();
    }

    /// Overrides for the full-size double-well protocol: N = 1000, T = 10,
    /// h = 10^-2 against a 10^-4 reference, densities at t = 1, 3, 10.
    pub fn apply_full_scale_doublewell(&mut self) {
        self.particles = 1000;
        self.horizon = 10.0;
        self.h_ref = 1e-4;
        self.h_list = vec![1e-2];
        self.record_times = vec![1.0, 3.0, 10.0];
    }
}

/// `round(t / h)` when it is an integer up to relative rounding, else `None`.
fn steps_for(t: f64, h: f64) -> Option<usize> {
    let r = t / h;
    let n = r.round();
    (n >= 1.0 && (r - n).abs() <= 1e-9 * n).then_some(n as usize)
}
