//! Line-oriented scenario scripts driving the whole bridge, used by the
//! CLI and the test suite.
//!
//! One command per line; `#` starts a comment. Commands:
//!
//! ```text
//! import <module> [-> name]
//! new <module> <Type> <arg>... -> name
//! call <recv> <attr> <arg>... [-> name]
//! getattr <recv> <attr> -> name
//! setattr <recv> <attr> <value>
//! print <name[.attr]>
//! repr <name[.attr]>
//! list-append <name> <value>
//! native-mutate <name> append <value> | set <index> <value> | pop
//! make int|float|str|list|tuple|dict <arg>... -> name
//! unbind <name>
//! gc-refresh | gc-collect | gc-drain
//! threads <n> <sub-scenario-file>
//! ```
//!
//! Values are integer or real literals, double-quoted strings, `None`,
//! `True`, `False`, or previously bound names. Identical scenario + seed +
//! config yields byte-identical output.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::error::{BridgeError, Result};
use crate::managed::{MPayload, ManagedHandle};
use crate::native::SingletonKind;
use crate::runtime::Runtime;

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    /// Seed for randomized property scenarios (reproducibility knob; plain
    /// scripts do not consume it).
    pub seed: u64,
    /// Golden mode: deterministic output only, timing-like counters
    /// excluded from stats.
    pub golden: bool,
    /// Base directory for `threads` sub-scenario files.
    pub base_dir: PathBuf,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 0,
            golden: false,
            base_dir: PathBuf::from("."),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ScenarioReport {
    pub output: Vec<String>,
    pub stats: BTreeMap<String, u64>,
}

#[derive(Debug, Clone)]
enum Value {
    Int(i64),
    Float(f64),
    Str(String),
    Singleton(SingletonKind),
    Name(String),
}

#[derive(Debug, Clone)]
struct Expr {
    name: String,
    attr: Option<String>,
}

#[derive(Debug, Clone)]
enum NativeOp {
    Append(Value),
    Set(usize, Value),
    Pop,
}

#[derive(Debug, Clone)]
enum Command {
    Import {
        module: String,
        bind: Option<String>,
    },
    New {
        module: String,
        type_name: String,
        args: Vec<Value>,
        bind: String,
    },
    Call {
        recv: String,
        attr: String,
        args: Vec<Value>,
        bind: Option<String>,
    },
    GetAttr {
        recv: String,
        attr: String,
        bind: String,
    },
    SetAttr {
        recv: String,
        attr: String,
        value: Value,
    },
    Print(Expr),
    Repr(Expr),
    ListAppend {
        name: String,
        value: Value,
    },
    NativeMutate {
        name: String,
        op: NativeOp,
    },
    Make {
        kind: String,
        args: Vec<Value>,
        bind: String,
    },
    Unbind {
        name: String,
    },
    GcRefresh,
    GcCollect,
    GcDrain,
    Threads {
        count: usize,
        file: String,
    },
}

// ---- parsing -----------------------------------------------------------------

/// Splits a line into tokens; double-quoted strings are one token with the
/// quotes kept.
fn tokenize(line: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        if c.is_whitespace() {
            chars.next();
        } else if c == '"' {
            let mut tok = String::from('"');
            chars.next();
            let mut closed = false;
            for c in chars.by_ref() {
                tok.push(c);
                if c == '"' {
                    closed = true;
                    break;
                }
            }
            if !closed {
                return Err(BridgeError::ScenarioParse {
                    line: 0,
                    reason: "unterminated string literal".into(),
                });
            }
            tokens.push(tok);
        } else {
            let mut tok = String::new();
            while let Some(&c) = chars.peek() {
                if c.is_whitespace() {
                    break;
                }
                tok.push(c);
                chars.next();
            }
            tokens.push(tok);
        }
    }
    Ok(tokens)
}

fn parse_value(token: &str) -> Value {
    if let Some(inner) = token.strip_prefix('"').and_then(|t| t.strip_suffix('"')) {
        return Value::Str(inner.to_string());
    }
    match token {
        "None" => return Value::Singleton(SingletonKind::None),
        "True" => return Value::Singleton(SingletonKind::True),
        "False" => return Value::Singleton(SingletonKind::False),
        _ => {}
    }
    if let Ok(v) = token.parse::<i64>() {
        return Value::Int(v);
    }
    if token.contains('.') {
        if let Ok(v) = token.parse::<f64>() {
            return Value::Float(v);
        }
    }
    Value::Name(token.to_string())
}

fn parse_expr(token: &str) -> Expr {
    match token.split_once('.') {
        Some((name, attr)) => Expr {
            name: name.to_string(),
            attr: Some(attr.to_string()),
        },
        None => Expr {
            name: token.to_string(),
            attr: None,
        },
    }
}

/// Splits off a trailing `-> name`, if present.
fn split_bind(tokens: &[String]) -> (Vec<String>, Option<String>) {
    if tokens.len() >= 2 && tokens[tokens.len() - 2] == "->" {
        (
            tokens[..tokens.len() - 2].to_vec(),
            Some(tokens[tokens.len() - 1].clone()),
        )
    } else {
        (tokens.to_vec(), None)
    }
}

fn parse_command(lineno: usize, line: &str) -> Result<Option<Command>> {
    let trimmed = line.trim();
    if trimmed.is_empty() || trimmed.starts_with('#') {
        return Ok(None);
    }
    let perr = |reason: String| BridgeError::ScenarioParse {
        line: lineno,
        reason,
    };
    let tokens = tokenize(trimmed).map_err(|e| match e {
        BridgeError::ScenarioParse { reason, .. } => perr(reason),
        other => other,
    })?;
    let (body, bind) = split_bind(&tokens);
    let head = body[0].as_str();
    let rest = &body[1..];

    let need = |n: usize, usage: &str| -> Result<()> {
        if rest.len() != n {
            Err(perr(format!("usage: {usage}")))
        } else {
            Ok(())
        }
    };

    let cmd = match head {
        "import" => {
            need(1, "import <module> [-> name]")?;
            Command::Import {
                module: rest[0].clone(),
                bind,
            }
        }
        "new" => {
            if rest.len() < 2 {
                return Err(perr("usage: new <module> <Type> <arg>... -> name".into()));
            }
            Command::New {
                module: rest[0].clone(),
                type_name: rest[1].clone(),
                args: rest[2..].iter().map(|t| parse_value(t)).collect(),
                bind: bind.ok_or_else(|| perr("new requires `-> name`".into()))?,
            }
        }
        "call" => {
            if rest.len() < 2 {
                return Err(perr("usage: call <recv> <attr> <arg>... [-> name]".into()));
            }
            Command::Call {
                recv: rest[0].clone(),
                attr: rest[1].clone(),
                args: rest[2..].iter().map(|t| parse_value(t)).collect(),
                bind,
            }
        }
        "getattr" => {
            need(2, "getattr <recv> <attr> -> name")?;
            Command::GetAttr {
                recv: rest[0].clone(),
                attr: rest[1].clone(),
                bind: bind.ok_or_else(|| perr("getattr requires `-> name`".into()))?,
            }
        }
        "setattr" => {
            need(3, "setattr <recv> <attr> <value>")?;
            Command::SetAttr {
                recv: rest[0].clone(),
                attr: rest[1].clone(),
                value: parse_value(&rest[2]),
            }
        }
        "print" => {
            need(1, "print <name[.attr]>")?;
            Command::Print(parse_expr(&rest[0]))
        }
        "repr" => {
            need(1, "repr <name[.attr]>")?;
            Command::Repr(parse_expr(&rest[0]))
        }
        "list-append" => {
            need(2, "list-append <name> <value>")?;
            Command::ListAppend {
                name: rest[0].clone(),
                value: parse_value(&rest[1]),
            }
        }
        "native-mutate" => {
            if rest.len() < 2 {
                return Err(perr("usage: native-mutate <name> append|set|pop ...".into()));
            }
            let op = match rest[1].as_str() {
                "append" => {
                    need(3, "native-mutate <name> append <value>")?;
                    NativeOp::Append(parse_value(&rest[2]))
                }
                "set" => {
                    need(4, "native-mutate <name> set <index> <value>")?;
                    let idx = rest[2]
                        .parse::<usize>()
                        .map_err(|_| perr("bad index".into()))?;
                    NativeOp::Set(idx, parse_value(&rest[3]))
                }
                "pop" => {
                    need(2, "native-mutate <name> pop")?;
                    NativeOp::Pop
                }
                other => return Err(perr(format!("unknown native op '{other}'"))),
            };
            Command::NativeMutate {
                name: rest[0].clone(),
                op,
            }
        }
        "make" => {
            if rest.is_empty() {
                return Err(perr("usage: make <kind> <arg>... -> name".into()));
            }
            Command::Make {
                kind: rest[0].clone(),
                args: rest[1..].iter().map(|t| parse_value(t)).collect(),
                bind: bind.ok_or_else(|| perr("make requires `-> name`".into()))?,
            }
        }
        "unbind" => {
            need(1, "unbind <name>")?;
            Command::Unbind {
                name: rest[0].clone(),
            }
        }
        "gc-refresh" => Command::GcRefresh,
        "gc-collect" => Command::GcCollect,
        "gc-drain" => Command::GcDrain,
        "threads" => {
            need(2, "threads <n> <sub-scenario-file>")?;
            Command::Threads {
                count: rest[0]
                    .parse::<usize>()
                    .map_err(|_| perr("bad thread count".into()))?,
                file: rest[1].clone(),
            }
        }
        other => return Err(perr(format!("unknown command '{other}'"))),
    };
    Ok(Some(cmd))
}

// ---- execution -----------------------------------------------------------------

struct Env {
    bindings: BTreeMap<String, ManagedHandle>,
    root_counts: BTreeMap<u64, usize>,
}

impl Env {
    fn new() -> Self {
        Env {
            bindings: BTreeMap::new(),
            root_counts: BTreeMap::new(),
        }
    }

    fn bind(&mut self, rt: &Runtime, name: &str, h: ManagedHandle) {
        if let Some(old) = self.bindings.insert(name.to_string(), h) {
            self.release(rt, old);
        }
        let count = self.root_counts.entry(h.0).or_insert(0);
        *count += 1;
        if *count == 1 {
            rt.root(h);
        }
    }

    fn release(&mut self, rt: &Runtime, h: ManagedHandle) {
        if let Some(count) = self.root_counts.get_mut(&h.0) {
            *count -= 1;
            if *count == 0 {
                self.root_counts.remove(&h.0);
                rt.unroot(h);
            }
        }
    }

    fn unbind(&mut self, rt: &Runtime, name: &str) -> Option<ManagedHandle> {
        let h = self.bindings.remove(name)?;
        self.release(rt, h);
        Some(h)
    }

    fn get(&self, name: &str) -> Option<ManagedHandle> {
        self.bindings.get(name).copied()
    }
}

fn resolve_value(rt: &Runtime, env: &Env, v: &Value) -> Result<ManagedHandle> {
    Ok(match v {
        Value::Int(i) => rt.managed_int(*i),
        Value::Float(f) => rt.managed_float(*f),
        Value::Str(s) => rt.managed_str(s),
        Value::Singleton(k) => rt.with_world(|w| w.managed.intern(*k)),
        Value::Name(n) => env
            .get(n)
            .ok_or_else(|| BridgeError::Type(format!("unknown binding '{n}'")))?,
    })
}

fn resolve_expr(rt: &Runtime, env: &Env, e: &Expr) -> Result<ManagedHandle> {
    let base = env
        .get(&e.name)
        .ok_or_else(|| BridgeError::Type(format!("unknown binding '{}'", e.name)))?;
    match &e.attr {
        None => Ok(base),
        Some(attr) => rt
            .find_attr(base, attr)?
            .ok_or_else(|| BridgeError::Type(format!("attribute '{attr}' not found"))),
    }
}

fn exec_command(
    rt: &Runtime,
    env: &mut Env,
    cmd: &Command,
    config: &ScenarioConfig,
    output: &mut Vec<String>,
) -> Result<()> {
    match cmd {
        Command::Import { module, bind } => {
            let h = rt.import_module(module)?;
            let name = bind.clone().unwrap_or_else(|| module.clone());
            env.bind(rt, &name, h);
        }
        Command::New {
            module,
            type_name,
            args,
            bind,
        } => {
            let m = env
                .get(module)
                .ok_or_else(|| BridgeError::Type(format!("unknown binding '{module}'")))?;
            let ty = rt
                .find_attr(m, type_name)?
                .ok_or_else(|| BridgeError::Type(format!("type '{type_name}' not found")))?;
            let mut handles = Vec::with_capacity(args.len());
            for a in args {
                handles.push(resolve_value(rt, env, a)?);
            }
            let h = rt.call_with(ty, &handles)?;
            env.bind(rt, bind, h);
        }
        Command::Call {
            recv,
            attr,
            args,
            bind,
        } => {
            let base = env
                .get(recv)
                .ok_or_else(|| BridgeError::Type(format!("unknown binding '{recv}'")))?;
            let callee = rt
                .find_attr(base, attr)?
                .ok_or_else(|| BridgeError::Type(format!("attribute '{attr}' not found")))?;
            let mut handles = Vec::with_capacity(args.len());
            for a in args {
                handles.push(resolve_value(rt, env, a)?);
            }
            let h = rt.call_with(callee, &handles)?;
            if let Some(name) = bind {
                env.bind(rt, name, h);
            }
        }
        Command::GetAttr { recv, attr, bind } => {
            let base = env
                .get(recv)
                .ok_or_else(|| BridgeError::Type(format!("unknown binding '{recv}'")))?;
            let h = rt
                .find_attr(base, attr)?
                .ok_or_else(|| BridgeError::Type(format!("attribute '{attr}' not found")))?;
            env.bind(rt, bind, h);
        }
        Command::SetAttr { recv, attr, value } => {
            let base = env
                .get(recv)
                .ok_or_else(|| BridgeError::Type(format!("unknown binding '{recv}'")))?;
            let v = resolve_value(rt, env, value)?;
            rt.set_attr(base, attr, v)?;
        }
        Command::Print(expr) => {
            let h = resolve_expr(rt, env, expr)?;
            output.push(rt.str_of(h)?);
        }
        Command::Repr(expr) => {
            let h = resolve_expr(rt, env, expr)?;
            output.push(rt.repr_of(h)?);
        }
        Command::ListAppend { name, value } => {
            let list = env
                .get(name)
                .ok_or_else(|| BridgeError::Type(format!("unknown binding '{name}'")))?;
            let v = resolve_value(rt, env, value)?;
            rt.with_world(|w| w.managed_list_append(list, v))?;
        }
        Command::NativeMutate { name, op } => {
            let h = env
                .get(name)
                .ok_or_else(|| BridgeError::Type(format!("unknown binding '{name}'")))?;
            match op {
                NativeOp::Append(v) => {
                    let vh = resolve_value(rt, env, v)?;
                    rt.with_world(|w| -> Result<()> {
                        let list = w
                            .to_native(Some(h))?
                            .expect("list converts to a native ref");
                        let vr = w.to_native(Some(vh))?.expect("value converts");
                        w.native_list_append(list, vr);
                        Ok(())
                    })?;
                }
                NativeOp::Set(idx, v) => {
                    let vh = resolve_value(rt, env, v)?;
                    rt.with_world(|w| -> Result<()> {
                        let list = w
                            .to_native(Some(h))?
                            .expect("list converts to a native ref");
                        let vr = w.to_native(Some(vh))?.expect("value converts");
                        w.native_list_set(list, *idx, vr)
                    })?;
                }
                NativeOp::Pop => {
                    rt.with_world(|w| -> Result<()> {
                        let list = w
                            .to_native(Some(h))?
                            .expect("list converts to a native ref");
                        w.native_list_pop(list)
                    })?;
                }
            }
        }
        Command::Make { kind, args, bind } => {
            let h = match kind.as_str() {
                "int" | "float" | "str" => {
                    if args.len() != 1 {
                        return Err(BridgeError::Type(format!("make {kind} takes one value")));
                    }
                    resolve_value(rt, env, &args[0])?
                }
                "list" | "tuple" => {
                    let mut items = Vec::with_capacity(args.len());
                    for a in args {
                        items.push(resolve_value(rt, env, a)?);
                    }
                    if kind == "list" {
                        rt.managed_list(items)
                    } else {
                        rt.managed_tuple(items)
                    }
                }
                "dict" => {
                    if !args.is_empty() {
                        return Err(BridgeError::Type("make dict takes no arguments".into()));
                    }
                    rt.with_world(|w| w.managed.new_object(MPayload::Dict(Vec::new())))
                }
                other => return Err(BridgeError::Type(format!("unknown make kind '{other}'"))),
            };
            env.bind(rt, bind, h);
        }
        Command::Unbind { name } => {
            env.unbind(rt, name)
                .ok_or_else(|| BridgeError::Type(format!("unknown binding '{name}'")))?;
        }
        Command::GcRefresh => {
            rt.gc_refresh(None);
        }
        Command::GcCollect => {
            rt.gc_collect();
        }
        Command::GcDrain => {
            rt.drain_finalizables();
        }
        Command::Threads { count, file } => {
            let path = config.base_dir.join(file);
            let text = std::fs::read_to_string(&path).map_err(|e| {
                BridgeError::Type(format!("cannot read sub-scenario {}: {e}", path.display()))
            })?;
            let commands = parse_lines(&text)?;
            let mut joined: Vec<Vec<String>> = Vec::with_capacity(*count);
            std::thread::scope(|scope| -> Result<()> {
                let mut handles = Vec::with_capacity(*count);
                for _ in 0..*count {
                    let commands = &commands;
                    let config = config.clone();
                    handles.push(scope.spawn(move || -> Result<Vec<String>> {
                        let mut env = Env::new();
                        let mut out = Vec::new();
                        for (lineno, raw, cmd) in commands {
                            exec_command(rt, &mut env, cmd, &config, &mut out).map_err(|e| {
                                BridgeError::ScenarioRuntime {
                                    line: *lineno,
                                    command: raw.clone(),
                                    reason: e.to_string(),
                                }
                            })?;
                        }
                        Ok(out)
                    }));
                }
                for handle in handles {
                    let out = handle.join().expect("scenario thread panicked")?;
                    joined.push(out);
                }
                Ok(())
            })?;
            for out in joined {
                output.extend(out);
            }
        }
    }
    Ok(())
}

type ParsedLine = (usize, String, Command);

fn parse_lines(text: &str) -> Result<Vec<ParsedLine>> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let lineno = idx + 1;
        if let Some(cmd) = parse_command(lineno, raw)? {
            out.push((lineno, raw.trim().to_string(), cmd));
        }
    }
    Ok(out)
}

/// Executes a scenario against the runtime. Parse errors name line numbers;
/// runtime errors abort with the failing command echoed.
pub fn run_scenario(rt: &Runtime, text: &str, config: &ScenarioConfig) -> Result<ScenarioReport> {
    let commands = parse_lines(text)?;
    let mut env = Env::new();
    let mut output = Vec::new();
    for (lineno, raw, cmd) in &commands {
        exec_command(rt, &mut env, cmd, config, &mut output).map_err(|e| {
            BridgeError::ScenarioRuntime {
                line: *lineno,
                command: raw.clone(),
                reason: e.to_string(),
            }
        })?;
    }
    Ok(ScenarioReport {
        output,
        stats: rt.stats_snapshot(),
    })
}

/// Deterministic key-sorted `key=value` lines. Golden mode drops counters
/// that vary with scheduling (contention).
pub fn emit_stats(stats: &BTreeMap<String, u64>, golden: bool) -> String {
    let mut out = String::new();
    for (k, v) in stats {
        if golden && k == "lock_contentions" {
            continue;
        }
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}
