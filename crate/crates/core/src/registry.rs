//! Registered cloud-object classes.
//!
//! A class is a factory plus tables describing its methods, fields and the
//! passing mode of every parameter and return position. The manager and
//! every host must hold identical registries; the [`ClassRegistry::digest`]
//! is exchanged during the connection handshake to verify that.
//!
//! Registered classes must not keep host-local mutable statics: state shared
//! across objects goes through the manager's global store
//! ([`ObjectContext::global_get`]/[`ObjectContext::global_set`]).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::artifacts::Digest;
use crate::value::{PassingMode, Value};
use crate::wire::ErrorCode;

/// Error raised by application code inside a cloud object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppError(pub String);

impl AppError {
    pub fn new(msg: impl Into<String>) -> Self {
        AppError(msg.into())
    }
}

impl fmt::Display for AppError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for AppError {}

/// What an object can reach while executing on a host.
pub trait ObjectContext {
    fn global_get(&mut self, name: &str) -> Result<Value, AppError>;
    fn global_set(&mut self, name: &str, value: Value) -> Result<(), AppError>;
    fn artifact(&mut self, digest: &Digest) -> Result<Arc<Vec<u8>>, AppError>;
    /// Emits an application event. `event_type` must start with `custom.`.
    fn emit(&mut self, event_type: &str, properties: BTreeMap<String, Value>);
}

pub trait CloudObject: Send {
    fn invoke(
        &mut self,
        method: &str,
        args: Vec<Value>,
        ctx: &mut dyn ObjectContext,
    ) -> Result<Value, AppError>;

    fn get_field(&self, field: &str) -> Option<Value>;

    fn set_field(&mut self, field: &str, value: Value) -> Result<(), AppError>;

    /// Serialized state for migration; `None` if the class cannot migrate.
    fn snapshot(&self) -> Option<Vec<u8>> {
        None
    }
}

pub type Factory = Arc<dyn Fn(Vec<Value>) -> Result<Box<dyn CloudObject>, AppError> + Send + Sync>;
pub type Restorer = Arc<dyn Fn(&[u8]) -> Result<Box<dyn CloudObject>, AppError> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MethodSpec {
    pub name: String,
    pub params: Vec<PassingMode>,
    pub returns: PassingMode,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldSpec {
    pub name: String,
    pub mode: PassingMode,
}

pub struct ClassSpec {
    pub name: String,
    /// Constructor parameter modes. `None` accepts any by-value arguments.
    pub ctor_params: Option<Vec<PassingMode>>,
    pub methods: BTreeMap<String, MethodSpec>,
    pub fields: BTreeMap<String, FieldSpec>,
    pub factory: Factory,
    pub restore: Option<Restorer>,
}

impl fmt::Debug for ClassSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClassSpec")
            .field("name", &self.name)
            .field("methods", &self.methods.keys().collect::<Vec<_>>())
            .field("fields", &self.fields.keys().collect::<Vec<_>>())
            .field("migratable", &self.restore.is_some())
            .finish()
    }
}

/// Rejection of a call before it reaches the object.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallRejected {
    pub code: ErrorCode,
    pub detail: String,
}

fn reject(code: ErrorCode, detail: impl Into<String>) -> CallRejected {
    CallRejected {
        code,
        detail: detail.into(),
    }
}

/// Checks a value against a declared passing mode. By-reference positions
/// take a `Ref` (or `Null`); by-value positions must not contain any `Ref`.
pub fn check_mode(mode: PassingMode, v: &Value) -> bool {
    match mode {
        PassingMode::ByValue => !v.contains_ref(),
        PassingMode::ByReference => matches!(v, Value::Ref(_) | Value::Null),
    }
}

fn check_args(what: &str, params: &[PassingMode], args: &[Value]) -> Result<(), CallRejected> {
    if params.len() != args.len() {
        return Err(reject(
            ErrorCode::ArityMismatch,
            format!("{what} takes {} arguments, got {}", params.len(), args.len()),
        ));
    }
    for (i, (mode, arg)) in params.iter().zip(args).enumerate() {
        if !check_mode(*mode, arg) {
            return Err(reject(
                ErrorCode::ModeMismatch,
                format!("{what} argument {i} violates {mode:?}"),
            ));
        }
    }
    Ok(())
}

impl ClassSpec {
    pub fn builder(name: impl Into<String>) -> ClassBuilder {
        ClassBuilder {
            name: name.into(),
            ctor_params: None,
            methods: BTreeMap::new(),
            fields: BTreeMap::new(),
            restore: None,
        }
    }

    pub fn check_ctor(&self, args: &[Value]) -> Result<(), CallRejected> {
        match &self.ctor_params {
            Some(params) => check_args(&format!("{}::new", self.name), params, args),
            None => args
                .iter()
                .all(|a| !a.contains_ref())
                .then_some(())
                .ok_or_else(|| reject(ErrorCode::ModeMismatch, "constructor arguments are by value")),
        }
    }

    pub fn check_invoke(&self, method: &str, args: &[Value]) -> Result<&MethodSpec, CallRejected> {
        let m = self.methods.get(method).ok_or_else(|| {
            reject(
                ErrorCode::UnknownMethod,
                format!("{}.{method} is not registered", self.name),
            )
        })?;
        check_args(&format!("{}.{method}", self.name), &m.params, args)?;
        Ok(m)
    }

    pub fn check_field(&self, field: &str) -> Result<&FieldSpec, CallRejected> {
        self.fields.get(field).ok_or_else(|| {
            reject(
                ErrorCode::UnknownField,
                format!("{}.{field} is not registered", self.name),
            )
        })
    }

    pub fn check_return(&self, m: &MethodSpec, v: &Value) -> Result<(), CallRejected> {
        if check_mode(m.returns, v) {
            Ok(())
        } else {
            Err(reject(
                ErrorCode::ModeMismatch,
                format!("{}.{} returned a value violating {:?}", self.name, m.name, m.returns),
            ))
        }
    }

    fn describe(&self, out: &mut String) {
        use fmt::Write;
        let modes = |ps: &[PassingMode]| ps.iter().map(|p| p.code().to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            out,
            "class {} ctor {} migratable {}",
            self.name,
            self.ctor_params.as_deref().map_or("*".to_string(), modes),
            self.restore.is_some() as u8
        );
        for m in self.methods.values() {
            let _ = writeln!(out, "method {} ({}) -> {}", m.name, modes(&m.params), m.returns.code());
        }
        for f in self.fields.values() {
            let _ = writeln!(out, "field {} {}", f.name, f.mode.code());
        }
    }
}

pub struct ClassBuilder {
    name: String,
    ctor_params: Option<Vec<PassingMode>>,
    methods: BTreeMap<String, MethodSpec>,
    fields: BTreeMap<String, FieldSpec>,
    restore: Option<Restorer>,
}

impl ClassBuilder {
    pub fn ctor(mut self, params: &[PassingMode]) -> Self {
        self.ctor_params = Some(params.to_vec());
        self
    }

    pub fn method(mut self, name: &str, params: &[PassingMode], returns: PassingMode) -> Self {
        self.methods.insert(
            name.to_string(),
            MethodSpec {
                name: name.to_string(),
                params: params.to_vec(),
                returns,
            },
        );
        self
    }

    pub fn field(mut self, name: &str, mode: PassingMode) -> Self {
        self.fields.insert(
            name.to_string(),
            FieldSpec {
                name: name.to_string(),
                mode,
            },
        );
        self
    }

    pub fn restore(
        mut self,
        f: impl Fn(&[u8]) -> Result<Box<dyn CloudObject>, AppError> + Send + Sync + 'static,
    ) -> Self {
        self.restore = Some(Arc::new(f));
        self
    }

    pub fn build(
        self,
        factory: impl Fn(Vec<Value>) -> Result<Box<dyn CloudObject>, AppError> + Send + Sync + 'static,
    ) -> ClassSpec {
        ClassSpec {
            name: self.name,
            ctor_params: self.ctor_params,
            methods: self.methods,
            fields: self.fields,
            factory: Arc::new(factory),
            restore: self.restore,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("class '{0}' already registered")]
    DuplicateClass(String),
}

#[derive(Debug, Default)]
pub struct ClassRegistry {
    classes: BTreeMap<String, Arc<ClassSpec>>,
}

impl ClassRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, spec: ClassSpec) -> Result<(), RegistryError> {
        if self.classes.contains_key(&spec.name) {
            return Err(RegistryError::DuplicateClass(spec.name));
        }
        self.classes.insert(spec.name.clone(), Arc::new(spec));
        Ok(())
    }

    pub fn with(mut self, spec: ClassSpec) -> Self {
        self.register(spec).expect("duplicate class");
        self
    }

    pub fn get(&self, name: &str) -> Option<&Arc<ClassSpec>> {
        self.classes.get(name)
    }

    pub fn class_names(&self) -> impl Iterator<Item = &str> {
        self.classes.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// SHA-256 over a canonical description of every class, method, field
    /// and passing mode.
    pub fn digest(&self) -> [u8; 32] {
        let mut text = String::new();
        for c in self.classes.values() {
            c.describe(&mut text);
        }
        Sha256::digest(text.as_bytes()).into()
    }
}
