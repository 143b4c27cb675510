//! Kernel interface manifests.
//!
//! A manifest lists the kernels it describes and one line per function:
//!
//! ```text
//! kernel gravity-direct gravity-tree
//! fn 5 evolve_model(dt: double[nbody_time]) -> (time: double[nbody_time])
//! ```
//! Types are `int`, `long`, `float`, `double` and `string`. Floating-point
//! parameters may name a unit from the coupler's unit table; without one
//! they are dimensionless. Calls are vectorised: a call with `callCount` n
//! carries n values of every parameter, and each typed array of the frame
//! holds the parameters of that type one after another in signature order.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

use super::callframe::CallFrame;

#[derive(Debug, Clone, PartialEq, Error)]
#[error("manifest line {line}: {msg}")]
pub struct ManifestError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArgType {
    Int,
    Long,
    Float,
    Double,
    String,
}

impl ArgType {
    /// Frame section order.
    pub const ALL: [ArgType; 5] = [ArgType::Int, ArgType::Long, ArgType::Float, ArgType::Double, ArgType::String];

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "int" => ArgType::Int,
            "long" => ArgType::Long,
            "float" => ArgType::Float,
            "double" => ArgType::Double,
            "string" => ArgType::String,
            _ => return None,
        })
    }
}

impl fmt::Display for ArgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArgType::Int => "int",
            ArgType::Long => "long",
            ArgType::Float => "float",
            ArgType::Double => "double",
            ArgType::String => "string",
        })
    }
}

/// One typed column of values, one entry per call row.
#[derive(Debug, Clone, PartialEq)]
pub enum Column {
    Int(Vec<i32>),
    Long(Vec<i64>),
    Float(Vec<f32>),
    Double(Vec<f64>),
    Str(Vec<String>),
}

impl Column {
    pub fn ty(&self) -> ArgType {
        match self {
            Column::Int(_) => ArgType::Int,
            Column::Long(_) => ArgType::Long,
            Column::Float(_) => ArgType::Float,
            Column::Double(_) => ArgType::Double,
            Column::Str(_) => ArgType::String,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Column::Int(v) => v.len(),
            Column::Long(v) => v.len(),
            Column::Float(v) => v.len(),
            Column::Double(v) => v.len(),
            Column::Str(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn append_to(&self, frame: &mut CallFrame) {
        match self {
            Column::Int(v) => frame.ints.extend_from_slice(v),
            Column::Long(v) => frame.longs.extend_from_slice(v),
            Column::Float(v) => frame.floats.extend_from_slice(v),
            Column::Double(v) => frame.doubles.extend_from_slice(v),
            Column::Str(v) => frame.strings.extend_from_slice(v),
        }
    }

    fn take(frame: &CallFrame, ty: ArgType, at: usize, n: usize) -> Column {
        let r = at..at + n;
        match ty {
            ArgType::Int => Column::Int(frame.ints[r].to_vec()),
            ArgType::Long => Column::Long(frame.longs[r].to_vec()),
            ArgType::Float => Column::Float(frame.floats[r].to_vec()),
            ArgType::Double => Column::Double(frame.doubles[r].to_vec()),
            ArgType::String => Column::Str(frame.strings[r].to_vec()),
        }
    }
}

fn section_len(frame: &CallFrame, ty: ArgType) -> usize {
    match ty {
        ArgType::Int => frame.ints.len(),
        ArgType::Long => frame.longs.len(),
        ArgType::Float => frame.floats.len(),
        ArgType::Double => frame.doubles.len(),
        ArgType::String => frame.strings.len(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub ty: ArgType,
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Function {
    pub id: u32,
    pub name: String,
    pub args: Vec<Param>,
    pub results: Vec<Param>,
}

/// Lays `cols` (one per param, each `rows` long) into `frame`.
pub fn pack(params: &[Param], cols: &[Column], rows: usize, frame: &mut CallFrame) -> Result<(), String> {
    if params.len() != cols.len() {
        return Err(format!("expected {} columns, got {}", params.len(), cols.len()));
    }
    for (p, c) in params.iter().zip(cols) {
        if p.ty != c.ty() {
            return Err(format!("`{}` is {}, got {}", p.name, p.ty, c.ty()));
        }
        if c.len() != rows {
            return Err(format!("`{}` has {} values for {rows} rows", p.name, c.len()));
        }
    }
    frame.call_count = rows as u32;
    for ty in ArgType::ALL {
        for (p, c) in params.iter().zip(cols) {
            if p.ty == ty {
                c.append_to(frame);
            }
        }
    }
    Ok(())
}

/// Splits `frame` back into one column per param.
pub fn unpack(params: &[Param], frame: &CallFrame) -> Result<Vec<Column>, String> {
    let rows = frame.call_count as usize;
    let mut cursor: HashMap<ArgType, usize> = HashMap::new();
    for ty in ArgType::ALL {
        let k = params.iter().filter(|p| p.ty == ty).count();
        let have = section_len(frame, ty);
        if k.checked_mul(rows) != Some(have) {
            return Err(format!("{ty} section holds {have} values, expected {k} x {rows}"));
        }
        cursor.insert(ty, 0);
    }
    let mut cols = Vec::with_capacity(params.len());
    for p in params {
        let at = cursor.get_mut(&p.ty).expect("every type present");
        cols.push(Column::take(frame, p.ty, *at, rows));
        *at += rows;
    }
    Ok(cols)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub kernels: Vec<String>,
    pub functions: Vec<Function>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut m = Manifest::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            let err = |msg: String| ManifestError { line: i + 1, msg };
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("kernel ") {
                m.kernels.extend(rest.split_whitespace().map(str::to_owned));
            } else if let Some(rest) = line.strip_prefix("fn ") {
                let f = parse_fn(rest).map_err(err)?;
                if m.functions.iter().any(|g| g.id == f.id || g.name == f.name) {
                    return Err(err(format!("duplicate function `{}`", f.name)));
                }
                m.functions.push(f);
            } else {
                return Err(err(format!("unrecognised line `{line}`")));
            }
        }
        if m.kernels.is_empty() {
            return Err(ManifestError {
                line: 0,
                msg: "no kernel line".into(),
            });
        }
        Ok(m)
    }

    pub fn by_name(&self, name: &str) -> Option<&Function> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn by_id(&self, id: u32) -> Option<&Function> {
        self.functions.iter().find(|f| f.id == id)
    }

    /// Every unit name the manifest mentions.
    pub fn units(&self) -> Vec<&str> {
        let mut out: Vec<&str> = self
            .functions
            .iter()
            .flat_map(|f| f.args.iter().chain(&f.results))
            .filter_map(|p| p.unit.as_deref())
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

fn parse_fn(s: &str) -> Result<Function, String> {
    let (id, rest) = s.trim().split_once(char::is_whitespace).ok_or("missing function name")?;
    let id: u32 = id.parse().map_err(|_| format!("bad function id `{id}`"))?;
    if id == 0 {
        return Err("function id 0 is reserved for errors".into());
    }
    let (name, rest) = rest.trim().split_once('(').ok_or("missing `(`")?;
    let (args, rest) = rest.split_once(')').ok_or("missing `)`")?;
    let rest = rest.trim().strip_prefix("->").ok_or("missing `->`")?.trim();
    let results = rest
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or("results must be parenthesised")?;
    Ok(Function {
        id,
        name: name.trim().to_owned(),
        args: parse_params(args)?,
        results: parse_params(results)?,
    })
}

fn parse_params(s: &str) -> Result<Vec<Param>, String> {
    let mut out: Vec<Param> = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, ty) = part.split_once(':').ok_or_else(|| format!("parameter `{part}` lacks a type"))?;
        let ty = ty.trim();
        let (ty, unit) = match ty.split_once('[') {
            Some((t, u)) => (t.trim(), Some(u.strip_suffix(']').ok_or("unclosed `[`")?.trim().to_owned())),
            None => (ty, None),
        };
        let ty = ArgType::parse(ty).ok_or_else(|| format!("unknown type `{ty}`"))?;
        if unit.is_some() && !matches!(ty, ArgType::Float | ArgType::Double) {
            return Err(format!("only floating-point parameters carry units (`{part}`)"));
        }
        let name = name.trim().to_owned();
        if out.iter().any(|p| p.name == name) {
            return Err(format!("duplicate parameter `{name}`"));
        }
        out.push(Param { name, ty, unit });
    }
    Ok(out)
}
