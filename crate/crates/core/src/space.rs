//! Declarative hyperparameter spaces.
//!
//! JSON form, one entry per parameter (order is preserved):
//!
//! ```json
//! {
//!   "lr":         {"grid": [0.01, 0.001, 0.0001]},
//!   "activation": {"choice": ["relu", "tanh"]},
//!   "momentum":   {"uniform": [0.8, 0.99]},
//!   "wd":         {"loguniform": [1e-6, 1e-2]},
//!   "seed":       {"constant": 7}
//! }
//! ```
//!
//! A bare scalar (`"seed": 7`) is shorthand for a constant.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::num::{index_from_unit, log_uniform_from_unit, uniform_from_unit};
use crate::rng::DeterministicRng;
use crate::trial::{Config, ParamValue};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpaceError {
    #[error("parameter `{param}`: unknown domain kind `{kind}`")]
    UnknownDomainKind { param: String, kind: String },
    #[error("parameter `{param}`: value list is empty")]
    EmptyGrid { param: String },
    #[error("parameter `{param}`: bad bounds [{lo}, {hi}]")]
    BadBounds { param: String, lo: f64, hi: f64 },
    #[error("parameter `{param}` is not a grid or constant domain")]
    NonGridDomain { param: String },
    #[error("invalid space: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ParamDomain {
    Grid(Vec<ParamValue>),
    Uniform { lo: f64, hi: f64 },
    LogUniform { lo: f64, hi: f64 },
    Choice(Vec<ParamValue>),
    Constant(ParamValue),
}

impl ParamDomain {
    /// Value for a single unit draw `u` in `[0, 1]`.
    pub fn value_from_unit(&self, u: f64) -> ParamValue {
        match self {
            ParamDomain::Uniform { lo, hi } => ParamValue::Real(uniform_from_unit(*lo, *hi, u)),
            ParamDomain::LogUniform { lo, hi } => {
                ParamValue::Real(log_uniform_from_unit(*lo, *hi, u).clamp(*lo, *hi))
            }
            ParamDomain::Grid(values) | ParamDomain::Choice(values) => {
                values[index_from_unit(values.len(), u)].clone()
            }
            ParamDomain::Constant(v) => v.clone(),
        }
    }

    pub fn contains(&self, value: &ParamValue) -> bool {
        match self {
            ParamDomain::Uniform { lo, hi } | ParamDomain::LogUniform { lo, hi } => value
                .as_f64()
                .is_some_and(|v| v.is_finite() && *lo <= v && v <= *hi),
            ParamDomain::Grid(values) | ParamDomain::Choice(values) => values.contains(value),
            ParamDomain::Constant(v) => v == value,
        }
    }

    fn to_json(&self) -> Value {
        match self {
            ParamDomain::Grid(v) => json!({ "grid": v }),
            ParamDomain::Uniform { lo, hi } => json!({ "uniform": [lo, hi] }),
            ParamDomain::LogUniform { lo, hi } => json!({ "loguniform": [lo, hi] }),
            ParamDomain::Choice(v) => json!({ "choice": v }),
            ParamDomain::Constant(v) => json!({ "constant": v }),
        }
    }
}

/// Ordered map of parameter name to domain.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Value", into = "Value")]
pub struct ParamSpace {
    params: IndexMap<String, ParamDomain>,
}

impl ParamSpace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a domain after validating it. Later inserts of an existing name are rejected.
    pub fn insert(&mut self, name: impl Into<String>, domain: ParamDomain) -> Result<(), SpaceError> {
        let name = name.into();
        if name.is_empty() {
            return Err(SpaceError::Invalid("parameter names must be non-empty".into()));
        }
        if self.params.contains_key(&name) {
            return Err(SpaceError::Invalid(format!("duplicate parameter `{name}`")));
        }
        validate_domain(&name, &domain)?;
        self.params.insert(name, domain);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, domain: ParamDomain) -> Result<Self, SpaceError> {
        self.insert(name, domain)?;
        Ok(self)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamDomain)> {
        self.params.iter()
    }

    pub fn get(&self, name: &str) -> Option<&ParamDomain> {
        self.params.get(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn is_grid_only(&self) -> bool {
        self.params
            .values()
            .all(|d| matches!(d, ParamDomain::Grid(_) | ParamDomain::Constant(_)))
    }

    pub fn contains(&self, config: &Config) -> bool {
        config.len() == self.params.len()
            && self
                .params
                .iter()
                .all(|(k, d)| config.get(k).is_some_and(|v| d.contains(v)))
    }

    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for (k, d) in &self.params {
            map.insert(k.clone(), d.to_json());
        }
        Value::Object(map)
    }
}

impl TryFrom<Value> for ParamSpace {
    type Error = SpaceError;

    fn try_from(value: Value) -> Result<Self, Self::Error> {
        parse_space(&value)
    }
}

impl From<ParamSpace> for Value {
    fn from(space: ParamSpace) -> Self {
        space.to_json()
    }
}

fn validate_domain(param: &str, domain: &ParamDomain) -> Result<(), SpaceError> {
    match domain {
        ParamDomain::Grid(v) | ParamDomain::Choice(v) if v.is_empty() => Err(SpaceError::EmptyGrid {
            param: param.to_string(),
        }),
        ParamDomain::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo < hi) => {
            Err(SpaceError::BadBounds {
                param: param.to_string(),
                lo: *lo,
                hi: *hi,
            })
        }
        ParamDomain::LogUniform { lo, hi }
            if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi) =>
        {
            Err(SpaceError::BadBounds {
                param: param.to_string(),
                lo: *lo,
                hi: *hi,
            })
        }
        _ => Ok(()),
    }
}

fn parse_value(param: &str, v: &Value) -> Result<ParamValue, SpaceError> {
    let pv: ParamValue = serde_json::from_value(v.clone())
        .map_err(|_| SpaceError::Invalid(format!("parameter `{param}`: unsupported value {v}")))?;
    if let ParamValue::Real(r) = pv {
        if !r.is_finite() {
            return Err(SpaceError::Invalid(format!("parameter `{param}`: non-finite value")));
        }
    }
    Ok(pv)
}

fn parse_values(param: &str, v: &Value) -> Result<Vec<ParamValue>, SpaceError> {
    let arr = v
        .as_array()
        .ok_or_else(|| SpaceError::Invalid(format!("parameter `{param}`: expected a list")))?;
    arr.iter().map(|x| parse_value(param, x)).collect()
}

fn parse_bounds(param: &str, v: &Value) -> Result<(f64, f64), SpaceError> {
    let pair = v.as_array().filter(|a| a.len() == 2).ok_or_else(|| {
        SpaceError::Invalid(format!("parameter `{param}`: bounds must be [lo, hi]"))
    })?;
    let num = |x: &Value| {
        x.as_f64()
            .ok_or_else(|| SpaceError::Invalid(format!("parameter `{param}`: bounds must be numbers")))
    };
    Ok((num(&pair[0])?, num(&pair[1])?))
}

/// Parses the JSON space schema into a validated [`ParamSpace`].
pub fn parse_space(spec: &Value) -> Result<ParamSpace, SpaceError> {
    let obj = spec
        .as_object()
        .ok_or_else(|| SpaceError::Invalid("space must be an object".into()))?;
    let mut space = ParamSpace::new();
    for (name, entry) in obj {
        let domain = match entry {
            Value::Object(m) => {
                if m.len() != 1 {
                    return Err(SpaceError::Invalid(format!(
                        "parameter `{name}`: expected exactly one domain key"
                    )));
                }
                let (kind, body) = m.iter().next().expect("one entry");
                match kind.as_str() {
                    "grid" => ParamDomain::Grid(parse_values(name, body)?),
                    "choice" => ParamDomain::Choice(parse_values(name, body)?),
                    "uniform" => {
                        let (lo, hi) = parse_bounds(name, body)?;
                        ParamDomain::Uniform { lo, hi }
                    }
                    "loguniform" => {
                        let (lo, hi) = parse_bounds(name, body)?;
                        ParamDomain::LogUniform { lo, hi }
                    }
                    "constant" => ParamDomain::Constant(parse_value(name, body)?),
                    other => {
                        return Err(SpaceError::UnknownDomainKind {
                            param: name.clone(),
                            kind: other.to_string(),
                        })
                    }
                }
            }
            Value::Array(_) | Value::Null => {
                return Err(SpaceError::Invalid(format!(
                    "parameter `{name}`: expected a domain object or scalar"
                )))
            }
            scalar => ParamDomain::Constant(parse_value(name, scalar)?),
        };
        space.insert(name.clone(), domain)?;
    }
    Ok(space)
}

/// Cartesian product of all grids, first parameter varying slowest.
pub fn expand_grid(space: &ParamSpace) -> Result<Vec<Config>, SpaceError> {
    let mut configs = vec![Config::new()];
    for (name, domain) in space.iter() {
        let values: &[ParamValue] = match domain {
            ParamDomain::Grid(v) => v,
            ParamDomain::Constant(v) => std::slice::from_ref(v),
            _ => return Err(SpaceError::NonGridDomain { param: name.clone() }),
        };
        configs = configs
            .into_iter()
            .flat_map(|base| {
                values.iter().map(move |v| {
                    let mut c = base.clone();
                    c.insert(name.clone(), v.clone());
                    c
                })
            })
            .collect();
    }
    Ok(configs)
}

/// Draws one config; consumes exactly one unit draw per parameter, in order.
pub fn sample_config(space: &ParamSpace, rng: &mut DeterministicRng) -> Config {
    space
        .iter()
        .map(|(name, domain)| (name.clone(), domain.value_from_unit(rng.unit())))
        .collect()
}
