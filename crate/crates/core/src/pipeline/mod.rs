//! Feed-forward analysis pipelines.
//!
//! A [`Pipeline`] is an ordered list of tasks, each bound to a [`Processor`]. Processors
//! are pure functions with typed parameters; leaf processors with an attached
//! [`CacheStore`] look their result up by a content hash of (name, version, params,
//! input) before computing.

use std::sync::Mutex;

mod cache;
mod processor;
mod value;

pub use cache::{compute_cache_key, CacheStore};
pub use processor::{
    parallel, sequential, BoxError, FnProcessor, ParamKind, ParamSpec, ParamValue, Params,
    ProcFn, Processor, RunStats,
};
pub use value::Value;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("task `{task}` accepts {allowed:?}, but processor `{processor}` is `{kind}`")]
    TaskTypeViolation {
        task: String,
        processor: String,
        kind: String,
        allowed: Vec<String>,
    },
    #[error("{path}: expected {expected} inputs, got {found}")]
    ArityMismatch {
        path: String,
        expected: usize,
        found: usize,
    },
    #[error("processor `{processor}` requires param `{param}`")]
    MissingParam { processor: String, param: String },
    #[error("processor `{processor}` has no param `{param}`")]
    UnknownParam { processor: String, param: String },
    #[error("param `{param}` of `{processor}` expects {expected:?}, got {found:?}")]
    ParamType {
        processor: String,
        param: String,
        expected: ParamKind,
        found: ParamKind,
    },
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("{path}: {source}")]
    Processor {
        path: String,
        #[source]
        source: BoxError,
    },
    #[error("cache entry {key} is corrupt: {detail}")]
    CacheCorrupt { key: String, detail: String },
    #[error("cannot decode value: {0}")]
    Decode(String),
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Clone, Debug)]
pub struct Task {
    pub name: String,
    /// Processor kinds this task accepts; `None` accepts anything.
    pub allowed: Option<Vec<String>>,
    processor: Processor,
}

impl Task {
    pub fn processor(&self) -> &Processor {
        &self.processor
    }

    fn check(&self, p: &Processor) -> Result<()> {
        let Some(allowed) = &self.allowed else {
            return Ok(());
        };
        for leaf in p.leaves() {
            if !allowed.iter().any(|a| a == leaf.kind()) {
                return Err(PipelineError::TaskTypeViolation {
                    task: self.name.clone(),
                    processor: leaf.name().into(),
                    kind: leaf.kind().into(),
                    allowed: allowed.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Output values in task order, keyed by task name.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub outputs: Vec<(String, Value)>,
    pub stats: RunStats,
}

impl PipelineOutput {
    pub fn get(&self, task: &str) -> Option<&Value> {
        self.outputs.iter().find(|(t, _)| t == task).map(|(_, v)| v)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Pipeline {
    tasks: Vec<Task>,
}

impl Pipeline {
    pub fn new() -> Self {
        Pipeline::default()
    }

    /// Appends a task with its default processor.
    pub fn task(
        mut self,
        name: &str,
        default: impl Into<Processor>,
        allowed: Option<&[&str]>,
    ) -> Result<Self> {
        let task = Task {
            name: name.into(),
            allowed: allowed.map(|a| a.iter().map(|s| s.to_string()).collect()),
            processor: default.into(),
        };
        task.check(&task.processor)?;
        self.tasks.push(task);
        Ok(self)
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    /// Replaces the processor of `task`.
    pub fn bind(&mut self, task: &str, processor: impl Into<Processor>) -> Result<()> {
        let processor = processor.into();
        let t = self
            .tasks
            .iter_mut()
            .find(|t| t.name == task)
            .ok_or_else(|| PipelineError::UnknownTask(task.into()))?;
        t.check(&processor)?;
        t.processor = processor;
        Ok(())
    }

    /// Runs the tasks front to back and returns the `is_output` values.
    pub fn run(&self, input: Value) -> Result<PipelineOutput> {
        let stats = Mutex::new(RunStats::default());
        let mut cur = input;
        let mut outputs = Vec::new();
        for t in &self.tasks {
            let path = format!("{}/{}", t.name, t.processor.label());
            let (v, out) = t.processor.execute(&cur, &path, &stats)?;
            if let Some(o) = out {
                outputs.push((t.name.clone(), o));
            }
            cur = v;
        }
        Ok(PipelineOutput {
            outputs,
            stats: stats.into_inner().unwrap(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn num(name: &str, f: fn(i64) -> i64) -> FnProcessor {
        FnProcessor::new(name, "1", "numeric", vec![], move |v, _| {
            Ok(Value::Int(f(v.as_int().ok_or("expected int")?)))
        })
    }

    #[test]
    fn double_then_square() {
        let p = Pipeline::new()
            .task("double", num("double", |x| 2 * x), None)
            .unwrap()
            .task("square", num("square", |x| x * x).with_output(true), None)
            .unwrap();
        let out = p.run(Value::Int(3)).unwrap();
        assert_eq!(out.outputs, vec![("square".to_string(), Value::Int(36))]);
    }

    #[test]
    fn cache_skips_second_run() {
        let dir = tempfile::tempdir().unwrap();
        let io = CacheStore::new(dir.path());
        let d = num("double", |x| 2 * x).with_io(io.clone());
        let s = num("square", |x| x * x).with_io(io).with_output(true);
        let p = Pipeline::new()
            .task("double", d.clone(), None)
            .unwrap()
            .task("square", s.clone(), None)
            .unwrap();
        let cold = p.run(Value::Int(3)).unwrap();
        let warm = p.run(Value::Int(3)).unwrap();
        assert_eq!(cold.stats.total_executed(), 2);
        assert_eq!(warm.stats.total_executed(), 0);
        assert_eq!(warm.stats.total_hits(), 2);
        assert_eq!(cold.outputs, warm.outputs);
        assert_eq!(d.calls() + s.calls(), 2);
    }

    #[test]
    fn task_type_violation() {
        let mut p = Pipeline::new()
            .task("n", num("double", |x| 2 * x), Some(&["numeric"]))
            .unwrap();
        let text = FnProcessor::new("upper", "1", "string", vec![], |v, _| {
            Ok(Value::Str(v.as_str().unwrap_or_default().to_uppercase()))
        });
        assert!(matches!(
            p.bind("n", text),
            Err(PipelineError::TaskTypeViolation { .. })
        ));
    }

    #[test]
    fn parallel_and_sequential() {
        let inc: Processor = num("inc", |x| x + 1).into();
        let dbl: Processor = num("dbl", |x| 2 * x).into();
        let par = parallel(vec![inc.clone(), dbl.clone()], true);
        assert_eq!(par.call(&Value::Int(3)).unwrap(), Value::List(vec![Value::Int(4), Value::Int(6)]));
        let seq = sequential(vec![inc.clone(), dbl.clone()]);
        assert_eq!(seq.call(&Value::Int(3)).unwrap(), Value::Int(8));
        assert_eq!(sequential(vec![]).call(&Value::Int(3)).unwrap(), Value::Int(3));
        let split = parallel(vec![inc, dbl], false);
        let three = Value::List(vec![Value::Int(1), Value::Int(2), Value::Int(3)]);
        assert!(matches!(split.call(&three), Err(PipelineError::ArityMismatch { .. })));
    }

    #[test]
    fn params_are_typed() {
        let spec = vec![ParamSpec::new("k", ParamKind::Int, Some(ParamValue::Int(3)))];
        let p = FnProcessor::new("p", "1", "numeric", spec, |_, params| Ok(Value::Int(params.int("k"))));
        assert!(matches!(
            p.clone().with_param("k", ParamValue::Str("x".into())),
            Err(PipelineError::ParamType { .. })
        ));
        assert!(matches!(
            p.clone().with_param("q", ParamValue::Int(1)),
            Err(PipelineError::UnknownParam { .. })
        ));
        let p5 = p.clone().with_param("k", ParamValue::Int(5)).unwrap();
        assert_eq!(Processor::from(p5).call(&Value::Int(0)).unwrap(), Value::Int(5));
        assert_eq!(Processor::from(p).call(&Value::Int(0)).unwrap(), Value::Int(3));
        let req = FnProcessor::new(
            "r",
            "1",
            "numeric",
            vec![ParamSpec::new("k", ParamKind::Int, None)],
            |_, _| Ok(Value::Int(0)),
        );
        assert!(matches!(
            Processor::from(req).call(&Value::Int(0)),
            Err(PipelineError::MissingParam { .. })
        ));
    }

    #[test]
    fn processor_errors_carry_the_path() {
        let fail = FnProcessor::new("boom", "1", "numeric", vec![], |_, _| Err("nope".into()));
        let p = Pipeline::new()
            .task("first", parallel(vec![fail.into()], true), None)
            .unwrap();
        let e = p.run(Value::Int(0)).unwrap_err();
        assert_eq!(e.to_string(), "first/parallel/boom: nope");
    }
}
