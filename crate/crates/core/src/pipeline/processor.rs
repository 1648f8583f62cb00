use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rayon::prelude::*;

use super::{compute_cache_key, CacheStore, PipelineError, Result, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Int,
    Float,
    Str,
    Bool,
    IntList,
    FloatList,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Str(String),
    Bool(bool),
    IntList(Vec<i64>),
    FloatList(Vec<f64>),
}

impl ParamValue {
    pub fn kind(&self) -> ParamKind {
        match self {
            ParamValue::Int(_) => ParamKind::Int,
            ParamValue::Float(_) => ParamKind::Float,
            ParamValue::Str(_) => ParamKind::Str,
            ParamValue::Bool(_) => ParamKind::Bool,
            ParamValue::IntList(_) => ParamKind::IntList,
            ParamValue::FloatList(_) => ParamKind::FloatList,
        }
    }

    fn to_value(&self) -> Value {
        match self {
            ParamValue::Int(v) => Value::Int(*v),
            ParamValue::Float(v) => Value::Float(*v),
            ParamValue::Str(v) => Value::Str(v.clone()),
            ParamValue::Bool(v) => Value::Bool(*v),
            ParamValue::IntList(v) => Value::List(v.iter().map(|&x| Value::Int(x)).collect()),
            ParamValue::FloatList(v) => Value::List(v.iter().map(|&x| Value::Float(x)).collect()),
        }
    }

    pub(crate) fn encode_into(&self, out: &mut Vec<u8>) {
        self.to_value().encode_into(out);
    }

    /// Coerces integers into float parameters; anything else must match exactly.
    fn coerce(self, kind: ParamKind) -> Option<ParamValue> {
        match (self, kind) {
            (ParamValue::Int(v), ParamKind::Float) => Some(ParamValue::Float(v as f64)),
            (ParamValue::IntList(v), ParamKind::FloatList) => {
                Some(ParamValue::FloatList(v.into_iter().map(|x| x as f64).collect()))
            }
            (v, k) if v.kind() == k => Some(v),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub default: Option<ParamValue>,
    pub required: bool,
}

impl ParamSpec {
    pub fn new(name: &str, kind: ParamKind, default: Option<ParamValue>) -> Self {
        ParamSpec {
            name: name.into(),
            kind,
            required: default.is_none(),
            default,
        }
    }
}

/// Resolved parameter values handed to a processor function.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(pub BTreeMap<String, ParamValue>);

impl Params {
    pub fn int(&self, name: &str) -> i64 {
        match self.0.get(name) {
            Some(ParamValue::Int(v)) => *v,
            other => panic!("param `{name}` is not an int: {other:?}"),
        }
    }

    pub fn float(&self, name: &str) -> f64 {
        match self.0.get(name) {
            Some(ParamValue::Float(v)) => *v,
            other => panic!("param `{name}` is not a float: {other:?}"),
        }
    }

    pub fn str(&self, name: &str) -> &str {
        match self.0.get(name) {
            Some(ParamValue::Str(v)) => v,
            other => panic!("param `{name}` is not a string: {other:?}"),
        }
    }

    pub fn bool(&self, name: &str) -> bool {
        match self.0.get(name) {
            Some(ParamValue::Bool(v)) => *v,
            other => panic!("param `{name}` is not a bool: {other:?}"),
        }
    }
}

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;
pub type ProcFn = Arc<dyn Fn(&Value, &Params) -> std::result::Result<Value, BoxError> + Send + Sync>;

/// A single step: a named, versioned pure function with typed parameters.
#[derive(Clone)]
pub struct FnProcessor {
    name: String,
    version: String,
    kind: String,
    specs: Arc<Vec<ParamSpec>>,
    bound: BTreeMap<String, ParamValue>,
    is_output: bool,
    io: Option<CacheStore>,
    func: ProcFn,
    calls: Arc<AtomicUsize>,
}

impl fmt::Debug for FnProcessor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnProcessor")
            .field("name", &self.name)
            .field("version", &self.version)
            .field("kind", &self.kind)
            .field("bound", &self.bound)
            .field("is_output", &self.is_output)
            .field("io", &self.io.as_ref().map(|c| c.root().to_path_buf()))
            .finish()
    }
}

impl FnProcessor {
    pub fn new<F>(name: &str, version: &str, kind: &str, specs: Vec<ParamSpec>, func: F) -> Self
    where
        F: Fn(&Value, &Params) -> std::result::Result<Value, BoxError> + Send + Sync + 'static,
    {
        FnProcessor {
            name: name.into(),
            version: version.into(),
            kind: kind.into(),
            specs: Arc::new(specs),
            bound: BTreeMap::new(),
            is_output: false,
            io: None,
            func: Arc::new(func),
            calls: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn kind(&self) -> &str {
        &self.kind
    }

    pub fn with_param(mut self, name: &str, value: ParamValue) -> Result<Self> {
        let spec = self.specs.iter().find(|s| s.name == name).ok_or_else(|| {
            PipelineError::UnknownParam {
                processor: self.name.clone(),
                param: name.into(),
            }
        })?;
        let found = value.kind();
        let v = value.coerce(spec.kind).ok_or_else(|| PipelineError::ParamType {
            processor: self.name.clone(),
            param: name.into(),
            expected: spec.kind,
            found,
        })?;
        self.bound.insert(name.into(), v);
        Ok(self)
    }

    pub fn with_output(mut self, is_output: bool) -> Self {
        self.is_output = is_output;
        self
    }

    pub fn with_io(mut self, io: CacheStore) -> Self {
        self.io = Some(io);
        self
    }

    /// How many times the function itself has run (cache hits excluded).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Bound values over defaults; fails on a missing required parameter.
    pub fn resolved_params(&self) -> Result<Params> {
        let mut out = BTreeMap::new();
        for spec in self.specs.iter() {
            match self.bound.get(&spec.name).or(spec.default.as_ref()) {
                Some(v) => {
                    out.insert(spec.name.clone(), v.clone());
                }
                None if spec.required => {
                    return Err(PipelineError::MissingParam {
                        processor: self.name.clone(),
                        param: spec.name.clone(),
                    })
                }
                None => {}
            }
        }
        Ok(Params(out))
    }

    fn run(&self, input: &Value, path: &str, stats: &Mutex<RunStats>) -> Result<Value> {
        let params = self.resolved_params()?;
        let key = self
            .io
            .as_ref()
            .map(|_| compute_cache_key(&self.name, &self.version, &params.0, input));
        if let (Some(io), Some(key)) = (&self.io, &key) {
            if let Some(v) = io.get(key)? {
                *stats.lock().unwrap().cache_hits.entry(self.name.clone()).or_default() += 1;
                return Ok(v);
            }
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        *stats.lock().unwrap().executed.entry(self.name.clone()).or_default() += 1;
        let out = (self.func)(input, &params).map_err(|source| PipelineError::Processor {
            path: path.into(),
            source,
        })?;
        if let (Some(io), Some(key)) = (&self.io, &key) {
            io.put(key, &out)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub enum Processor {
    Leaf(FnProcessor),
    /// Children see the same input (broadcast) or one list element each.
    Parallel {
        children: Vec<Processor>,
        broadcast: bool,
        is_output: bool,
    },
    Sequential {
        children: Vec<Processor>,
        is_output: bool,
    },
}

impl From<FnProcessor> for Processor {
    fn from(p: FnProcessor) -> Self {
        Processor::Leaf(p)
    }
}

pub fn parallel(children: Vec<Processor>, broadcast: bool) -> Processor {
    Processor::Parallel {
        children,
        broadcast,
        is_output: false,
    }
}

pub fn sequential(children: Vec<Processor>) -> Processor {
    Processor::Sequential {
        children,
        is_output: false,
    }
}

/// Function executions and cache hits per processor name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub executed: BTreeMap<String, usize>,
    pub cache_hits: BTreeMap<String, usize>,
}

impl RunStats {
    pub fn total_executed(&self) -> usize {
        self.executed.values().sum()
    }

    pub fn total_hits(&self) -> usize {
        self.cache_hits.values().sum()
    }

    pub fn merge(&mut self, other: &RunStats) {
        for (k, v) in &other.executed {
            *self.executed.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.cache_hits {
            *self.cache_hits.entry(k.clone()).or_default() += v;
        }
    }
}

impl Processor {
    pub fn with_output(mut self, flag: bool) -> Self {
        match &mut self {
            Processor::Leaf(p) => p.is_output = flag,
            Processor::Parallel { is_output, .. } | Processor::Sequential { is_output, .. } => {
                *is_output = flag
            }
        }
        self
    }

    /// Attaches `io` to every leaf.
    pub fn with_io(self, io: &CacheStore) -> Self {
        match self {
            Processor::Leaf(p) => Processor::Leaf(p.with_io(io.clone())),
            Processor::Parallel {
                children,
                broadcast,
                is_output,
            } => Processor::Parallel {
                children: children.into_iter().map(|c| c.with_io(io)).collect(),
                broadcast,
                is_output,
            },
            Processor::Sequential {
                children,
                is_output,
            } => Processor::Sequential {
                children: children.into_iter().map(|c| c.with_io(io)).collect(),
                is_output,
            },
        }
    }

    pub fn leaves(&self) -> Vec<&FnProcessor> {
        match self {
            Processor::Leaf(p) => vec![p],
            Processor::Parallel { children, .. } | Processor::Sequential { children, .. } => {
                children.iter().flat_map(|c| c.leaves()).collect()
            }
        }
    }

    pub fn label(&self) -> String {
        match self {
            Processor::Leaf(p) => p.name.clone(),
            Processor::Parallel { .. } => "parallel".into(),
            Processor::Sequential { .. } => "sequential".into(),
        }
    }

    /// Runs standalone, returning the full result.
    pub fn call(&self, input: &Value) -> Result<Value> {
        let stats = Mutex::new(RunStats::default());
        Ok(self.execute(input, &self.label(), &stats)?.0)
    }

    /// Full result plus the tree of `is_output` values (mirroring the nesting).
    pub(crate) fn execute(
        &self,
        input: &Value,
        path: &str,
        stats: &Mutex<RunStats>,
    ) -> Result<(Value, Option<Value>)> {
        match self {
            Processor::Leaf(p) => {
                let v = p.run(input, path, stats)?;
                let out = p.is_output.then(|| v.clone());
                Ok((v, out))
            }
            Processor::Parallel {
                children,
                broadcast,
                is_output,
            } => {
                let inputs: Vec<&Value> = if *broadcast {
                    vec![input; children.len()]
                } else {
                    match input.as_list() {
                        Some(items) if items.len() == children.len() => items.iter().collect(),
                        Some(items) => {
                            return Err(PipelineError::ArityMismatch {
                                path: path.into(),
                                expected: children.len(),
                                found: items.len(),
                            })
                        }
                        None => {
                            return Err(PipelineError::ArityMismatch {
                                path: path.into(),
                                expected: children.len(),
                                found: 1,
                            })
                        }
                    }
                };
                let results: Vec<(Value, Option<Value>)> = children
                    .par_iter()
                    .zip(inputs)
                    .map(|(c, x)| c.execute(x, &format!("{path}/{}", c.label()), stats))
                    .collect::<Result<_>>()?;
                let (values, outs): (Vec<Value>, Vec<Option<Value>>) = results.into_iter().unzip();
                let value = Value::List(values);
                let out = if *is_output {
                    Some(value.clone())
                } else {
                    let outs: Vec<Value> = outs.into_iter().flatten().collect();
                    (!outs.is_empty()).then_some(Value::List(outs))
                };
                Ok((value, out))
            }
            Processor::Sequential {
                children,
                is_output,
            } => {
                let mut cur = input.clone();
                let mut outs = Vec::new();
                for c in children {
                    let (v, o) = c.execute(&cur, &format!("{path}/{}", c.label()), stats)?;
                    outs.extend(o);
                    cur = v;
                }
                let out = if *is_output {
                    Some(cur.clone())
                } else {
                    match outs.len() {
                        0 => None,
                        1 => outs.pop(),
                        _ => Some(Value::List(outs)),
                    }
                };
                Ok((cur, out))
            }
        }
    }
}
