//! Metric statements: a closed aggregation language over the event stream.
//!
//! Text form:
//!
//! ```text
//! SELECT <agg>(<prop>) FROM <EventType> WINDOW <time_batch|sliding>(<ms>) [WHERE <prop> <cmp> <literal>]
//! ```

use std::cmp::Ordering;
use std::fmt;

use thiserror::Error;

use super::MonitoringEvent;
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    Avg,
    Sum,
    Count,
    Min,
    Max,
}

impl Aggregate {
    pub fn name(self) -> &'static str {
        match self {
            Aggregate::Avg => "avg",
            Aggregate::Sum => "sum",
            Aggregate::Count => "count",
            Aggregate::Min => "min",
            Aggregate::Max => "max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    TimeBatch(u64),
    Sliding(u64),
}

impl Window {
    pub fn duration(self) -> u64 {
        match self {
            Window::TimeBatch(d) | Window::Sliding(d) => d,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cmp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl Cmp {
    pub fn symbol(self) -> &'static str {
        match self {
            Cmp::Eq => "==",
            Cmp::Ne => "!=",
            Cmp::Lt => "<",
            Cmp::Le => "<=",
            Cmp::Gt => ">",
            Cmp::Ge => ">=",
        }
    }

    fn holds(self, ord: Option<Ordering>) -> bool {
        match (self, ord) {
            (Cmp::Ne, None) => true,
            (_, None) => false,
            (Cmp::Eq, Some(o)) => o == Ordering::Equal,
            (Cmp::Ne, Some(o)) => o != Ordering::Equal,
            (Cmp::Lt, Some(o)) => o == Ordering::Less,
            (Cmp::Le, Some(o)) => o != Ordering::Greater,
            (Cmp::Gt, Some(o)) => o == Ordering::Greater,
            (Cmp::Ge, Some(o)) => o != Ordering::Less,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Filter {
    pub property: String,
    pub cmp: Cmp,
    pub literal: Value,
}

impl Filter {
    /// Missing properties never match. Values of different kinds are
    /// unordered: only `!=` holds between them.
    pub fn matches(&self, event: &MonitoringEvent) -> bool {
        let Some(actual) = event.prop(&self.property) else {
            return false;
        };
        self.cmp.holds(compare(actual, &self.literal))
    }
}

fn compare(a: &Value, b: &Value) -> Option<Ordering> {
    match (a, b) {
        (Value::Int64(x), Value::Int64(y)) => Some(x.cmp(y)),
        (x, y) if x.is_numeric() && y.is_numeric() => x.as_f64()?.partial_cmp(&y.as_f64()?),
        (Value::Text(x), Value::Text(y)) => Some(x.as_bytes().cmp(y.as_bytes())),
        (Value::Bool(x), Value::Bool(y)) => Some(x.cmp(y)),
        (Value::Null, Value::Null) => Some(Ordering::Equal),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricStatement {
    pub aggregate: Aggregate,
    /// Ignored for `count`.
    pub property: String,
    pub event_type: String,
    pub window: Window,
    pub filter: Option<Filter>,
}

impl MetricStatement {
    pub fn matches(&self, event: &MonitoringEvent) -> bool {
        event.event_type == self.event_type
            && self.filter.as_ref().is_none_or(|f| f.matches(event))
    }
}

impl fmt::Display for MetricStatement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prop = if self.aggregate == Aggregate::Count && self.property.is_empty() {
            "*"
        } else {
            &self.property
        };
        write!(
            f,
            "SELECT {}({}) FROM {} WINDOW ",
            self.aggregate.name(),
            prop,
            self.event_type
        )?;
        match self.window {
            Window::TimeBatch(d) => write!(f, "time_batch({d})")?,
            Window::Sliding(d) => write!(f, "sliding({d})")?,
        }
        if let Some(flt) = &self.filter {
            write!(f, " WHERE {} {} {}", flt.property, flt.cmp.symbol(), render_literal(&flt.literal))?;
        }
        Ok(())
    }
}

fn render_literal(v: &Value) -> String {
    match v {
        Value::Null => "null".into(),
        Value::Bool(b) => b.to_string(),
        Value::Int64(i) => i.to_string(),
        Value::Float64(x) => format!("{x:?}"),
        Value::Text(s) => format!("'{}'", s.replace('\'', "\\'")),
        other => format!("<{}>", other.type_name()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueType {
    Int64,
    Float64,
}

/// A named, typed, windowed aggregation: `<name, type, statement>`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonitoringMetric {
    pub name: String,
    pub value_type: ValueType,
    pub statement: MetricStatement,
}

impl MonitoringMetric {
    pub fn new(name: impl Into<String>, value_type: ValueType, statement: MetricStatement) -> Self {
        Self {
            name: name.into(),
            value_type,
            statement,
        }
    }

    pub fn parse(name: impl Into<String>, value_type: ValueType, text: &str) -> Result<Self, StatementError> {
        Ok(Self::new(name, value_type, parse_statement(text)?))
    }

    pub fn validate(&self) -> Result<(), StatementError> {
        let st = &self.statement;
        if st.window.duration() == 0 {
            return Err(StatementError::Invalid("window duration must be positive".into()));
        }
        if st.event_type.is_empty() {
            return Err(StatementError::Invalid("missing event type".into()));
        }
        if st.aggregate != Aggregate::Count && st.property.is_empty() {
            return Err(StatementError::Invalid(format!(
                "{} needs a property",
                st.aggregate.name()
            )));
        }
        match (st.aggregate, self.value_type) {
            (Aggregate::Avg, ValueType::Int64) => Err(StatementError::Invalid(
                "avg yields Float64 but metric is Int64".into(),
            )),
            (Aggregate::Count, ValueType::Float64) => Err(StatementError::Invalid(
                "count yields Int64 but metric is Float64".into(),
            )),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StatementError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("invalid statement: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(i64),
    Float(f64),
    Str(String),
    LParen,
    RParen,
    Star,
    Op(Cmp),
}

fn tokenize(src: &str) -> Result<Vec<(usize, Tok)>, StatementError> {
    let b = src.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    let err = |pos: usize, msg: &str| StatementError::Syntax {
        pos,
        msg: msg.to_string(),
    };
    while i < b.len() {
        let c = b[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\n' | b'\r' => {
                i += 1;
                continue;
            }
            b'(' => {
                out.push((start, Tok::LParen));
                i += 1;
            }
            b')' => {
                out.push((start, Tok::RParen));
                i += 1;
            }
            b'*' => {
                out.push((start, Tok::Star));
                i += 1;
            }
            b'=' | b'!' | b'<' | b'>' => {
                let two = b.get(i + 1) == Some(&b'=');
                let op = match (c, two) {
                    (b'=', true) => Cmp::Eq,
                    (b'=', false) => Cmp::Eq,
                    (b'!', true) => Cmp::Ne,
                    (b'<', true) => Cmp::Le,
                    (b'<', false) => Cmp::Lt,
                    (b'>', true) => Cmp::Ge,
                    (b'>', false) => Cmp::Gt,
                    _ => return Err(err(start, "expected '!='")),
                };
                i += if two { 2 } else { 1 };
                out.push((start, Tok::Op(op)));
            }
            b'\'' | b'"' => {
                let quote = c;
                i += 1;
                let mut s = Vec::new();
                loop {
                    match b.get(i) {
                        None => return Err(err(start, "unterminated string")),
                        Some(b'\\') if i + 1 < b.len() => {
                            s.push(b[i + 1]);
                            i += 2;
                        }
                        Some(&ch) if ch == quote => {
                            i += 1;
                            break;
                        }
                        Some(&ch) => {
                            s.push(ch);
                            i += 1;
                        }
                    }
                }
                let s = String::from_utf8(s).map_err(|_| err(start, "invalid UTF-8"))?;
                out.push((start, Tok::Str(s)));
            }
            b'0'..=b'9' | b'-' | b'+' => {
                i += 1;
                while i < b.len()
                    && (b[i].is_ascii_digit()
                        || matches!(b[i], b'.' | b'e' | b'E')
                        || (matches!(b[i], b'-' | b'+') && matches!(b[i - 1], b'e' | b'E')))
                {
                    i += 1;
                }
                let text = &src[start..i];
                let tok = if text.contains(['.', 'e', 'E']) {
                    Tok::Float(text.parse().map_err(|_| err(start, "bad number"))?)
                } else {
                    Tok::Int(text.parse().map_err(|_| err(start, "bad number"))?)
                };
                out.push((start, tok));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < b.len() && (b[i].is_ascii_alphanumeric() || matches!(b[i], b'_' | b'.')) {
                    i += 1;
                }
                out.push((start, Tok::Ident(src[start..i].to_string())));
            }
            _ => return Err(err(start, "unexpected character")),
        }
    }
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn here(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end, |t| t.0)
    }

    fn fail<T>(&self, msg: impl Into<String>) -> Result<T, StatementError> {
        Err(StatementError::Syntax {
            pos: self.here(),
            msg: msg.into(),
        })
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.1.clone());
        self.pos += 1;
        t
    }

    fn keyword(&mut self, kw: &str) -> Result<(), StatementError> {
        match self.next() {
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case(kw) => Ok(()),
            _ => {
                self.pos -= 1;
                self.fail(format!("expected {kw}"))
            }
        }
    }

    fn ident(&mut self, what: &str) -> Result<String, StatementError> {
        match self.next() {
            Some(Tok::Ident(s)) => Ok(s),
            _ => {
                self.pos -= 1;
                self.fail(format!("expected {what}"))
            }
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), StatementError> {
        if self.next() == Some(tok) {
            Ok(())
        } else {
            self.pos -= 1;
            self.fail(format!("expected {what}"))
        }
    }
}

pub fn parse_statement(src: &str) -> Result<MetricStatement, StatementError> {
    let mut p = Parser {
        toks: tokenize(src)?,
        pos: 0,
        end: src.len(),
    };
    p.keyword("SELECT")?;
    let agg = p.ident("aggregate")?;
    let aggregate = match agg.to_ascii_lowercase().as_str() {
        "avg" => Aggregate::Avg,
        "sum" => Aggregate::Sum,
        "count" => Aggregate::Count,
        "min" => Aggregate::Min,
        "max" => Aggregate::Max,
        _ => {
            p.pos -= 1;
            return p.fail(format!("unknown aggregate '{agg}'"));
        }
    };
    p.expect(Tok::LParen, "'('")?;
    let property = match p.next() {
        Some(Tok::Star) if aggregate == Aggregate::Count => String::new(),
        Some(Tok::Ident(s)) => s,
        _ => {
            p.pos -= 1;
            return p.fail("expected property");
        }
    };
    p.expect(Tok::RParen, "')'")?;
    p.keyword("FROM")?;
    let event_type = p.ident("event type")?;
    p.keyword("WINDOW")?;
    let kind = p.ident("window kind")?;
    p.expect(Tok::LParen, "'('")?;
    let ms = match p.next() {
        Some(Tok::Int(n)) if n > 0 => n as u64,
        _ => {
            p.pos -= 1;
            return p.fail("expected positive window duration in ms");
        }
    };
    p.expect(Tok::RParen, "')'")?;
    let window = match kind.to_ascii_lowercase().as_str() {
        "time_batch" => Window::TimeBatch(ms),
        "sliding" => Window::Sliding(ms),
        _ => return p.fail(format!("unknown window '{kind}'")),
    };
    let filter = if p.pos < p.toks.len() {
        p.keyword("WHERE")?;
        let property = p.ident("filter property")?;
        let cmp = match p.next() {
            Some(Tok::Op(c)) => c,
            _ => {
                p.pos -= 1;
                return p.fail("expected comparison operator");
            }
        };
        let literal = match p.next() {
            Some(Tok::Int(n)) => Value::Int64(n),
            Some(Tok::Float(x)) => Value::Float64(x),
            Some(Tok::Str(s)) => Value::Text(s),
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("true") => Value::Bool(true),
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("false") => Value::Bool(false),
            Some(Tok::Ident(s)) if s.eq_ignore_ascii_case("null") => Value::Null,
            _ => {
                p.pos -= 1;
                return p.fail("expected literal");
            }
        };
        Some(Filter {
            property,
            cmp,
            literal,
        })
    } else {
        None
    };
    if p.pos < p.toks.len() {
        return p.fail("trailing input");
    }
    Ok(MetricStatement {
        aggregate,
        property,
        event_type,
        window,
        filter,
    })
}
