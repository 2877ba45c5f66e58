//! Job Description Language: `Attribute = expression;` statements with
//! C-like operators over integers, double-quoted strings, and dotted
//! attribute references such as `other.FreeCPUs`. Evaluation uses
//! three-valued logic: any reference to an attribute the target resource
//! does not advertise yields `Undefined`, which never satisfies a
//! requirement.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum JdlError {
    #[error("parse error at {line}:{col}: {msg}")]
    Parse { line: u32, col: u32, msg: String },
    #[error("invalid job ad: {0}")]
    Validation(String),
}

fn parse_err(line: u32, col: u32, msg: impl Into<String>) -> JdlError {
    JdlError::Parse {
        line,
        col,
        msg: msg.into(),
    }
}

// ---------------------------------------------------------------------------
// Lexer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Int(i64),
    Str(String),
    Assign,
    Semi,
    Dot,
    Comma,
    LParen,
    RParen,
    LBrace,
    RBrace,
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
    Not,
    Plus,
    Minus,
    Star,
    Slash,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Tok::Ident(name) => return write!(f, "identifier {name:?}"),
            Tok::Int(v) => return write!(f, "integer {v}"),
            Tok::Str(s) => return write!(f, "string {s:?}"),
            Tok::Assign => "=",
            Tok::Semi => ";",
            Tok::Dot => ".",
            Tok::Comma => ",",
            Tok::LParen => "(",
            Tok::RParen => ")",
            Tok::LBrace => "{",
            Tok::RBrace => "}",
            Tok::Eq => "==",
            Tok::Ne => "!=",
            Tok::Lt => "<",
            Tok::Le => "<=",
            Tok::Gt => ">",
            Tok::Ge => ">=",
            Tok::And => "&&",
            Tok::Or => "||",
            Tok::Not => "!",
            Tok::Plus => "+",
            Tok::Minus => "-",
            Tok::Star => "*",
            Tok::Slash => "/",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: u32,
    col: u32,
}

struct Lexer<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
    line: u32,
    col: u32,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer {
            chars: text.chars().peekable(),
            line: 1,
            col: 1,
        }
    }

    fn bump(&mut self) -> Option<char> {
        let c = self.chars.next()?;
        if c == '\n' {
            self.line += 1;
            self.col = 1;
        } else {
            self.col += 1;
        }
        Some(c)
    }

    fn lex(mut self) -> Result<Vec<Spanned>, JdlError> {
        let mut out = Vec::new();
        loop {
            while matches!(self.chars.peek(), Some(c) if c.is_whitespace()) {
                self.bump();
            }
            let (line, col) = (self.line, self.col);
            let Some(c) = self.bump() else { break };
            let tok = match c {
                ';' => Tok::Semi,
                '.' => Tok::Dot,
                ',' => Tok::Comma,
                '(' => Tok::LParen,
                ')' => Tok::RParen,
                '{' => Tok::LBrace,
                '}' => Tok::RBrace,
                '+' => Tok::Plus,
                '-' => Tok::Minus,
                '*' => Tok::Star,
                '/' => Tok::Slash,
                '=' => {
                    if self.chars.peek() == Some(&'=') {
                        self.bump();
                        Tok::Eq
                    } else {
                        Tok::Assign
                    }
                }
                '!' => {
                    if self.chars.peek() == Some(&'=') {
                        self.bump();
                        Tok::Ne
                    } else {
                        Tok::Not
                    }
                }
                '<' => {
                    if self.chars.peek() == Some(&'=') {
                        self.bump();
                        Tok::Le
                    } else {
                        Tok::Lt
                    }
                }
                '>' => {
                    if self.chars.peek() == Some(&'=') {
                        self.bump();
                        Tok::Ge
                    } else {
                        Tok::Gt
                    }
                }
                '&' => {
                    if self.bump() == Some('&') {
                        Tok::And
                    } else {
                        return Err(parse_err(line, col, "expected &&"));
                    }
                }
                '|' => {
                    if self.bump() == Some('|') {
                        Tok::Or
                    } else {
                        return Err(parse_err(line, col, "expected ||"));
                    }
                }
                '"' => {
                    let mut s = String::new();
                    loop {
                        match self.bump() {
                            Some('"') => break,
                            Some('\\') => match self.bump() {
                                Some(esc @ ('"' | '\\')) => s.push(esc),
                                Some(other) => {
                                    return Err(parse_err(
                                        self.line,
                                        self.col,
                                        format!("unknown escape \\{other}"),
                                    ))
                                }
                                None => return Err(parse_err(line, col, "unterminated string")),
                            },
                            Some(c) => s.push(c),
                            None => return Err(parse_err(line, col, "unterminated string")),
                        }
                    }
                    Tok::Str(s)
                }
                c if c.is_ascii_digit() => {
                    let mut n = String::from(c);
                    while matches!(self.chars.peek(), Some(d) if d.is_ascii_digit()) {
                        n.push(self.bump().unwrap());
                    }
                    let v: i64 = n
                        .parse()
                        .map_err(|_| parse_err(line, col, format!("integer out of range: {n}")))?;
                    Tok::Int(v)
                }
                c if c.is_ascii_alphabetic() || c == '_' => {
                    let mut name = String::from(c);
                    while matches!(self.chars.peek(), Some(d) if d.is_ascii_alphanumeric() || *d == '_')
                    {
                        name.push(self.bump().unwrap());
                    }
                    Tok::Ident(name)
                }
                other => {
                    return Err(parse_err(
                        line,
                        col,
                        format!("unexpected character {other:?}"),
                    ))
                }
            };
            out.push(Spanned { tok, line, col });
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// AST and parser
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    And,
    Or,
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Int(i64),
    Str(String),
    Bool(bool),
    /// Possibly dotted attribute reference, e.g. `other.FreeCPUs`.
    Attr(String),
    List(Vec<Expr>),
    Not(Box<Expr>),
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Spanned> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Spanned> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn eof_err(&self) -> JdlError {
        let (line, col) = self.toks.last().map(|t| (t.line, t.col)).unwrap_or((1, 1));
        parse_err(line, col, "unexpected end of input")
    }

    fn expect(&mut self, want: &Tok) -> Result<(), JdlError> {
        match self.next() {
            Some(t) if t.tok == *want => Ok(()),
            Some(t) => Err(parse_err(
                t.line,
                t.col,
                format!("expected {want}, found {}", t.tok),
            )),
            None => Err(self.eof_err()),
        }
    }

    fn document(&mut self) -> Result<Vec<(String, Expr)>, JdlError> {
        let mut stmts = Vec::new();
        while self.peek().is_some() {
            let name = match self.next() {
                Some(Spanned {
                    tok: Tok::Ident(name),
                    ..
                }) => name,
                Some(t) => {
                    return Err(parse_err(
                        t.line,
                        t.col,
                        format!("expected attribute name, found {}", t.tok),
                    ))
                }
                None => return Err(self.eof_err()),
            };
            self.expect(&Tok::Assign)?;
            let value = self.expr()?;
            self.expect(&Tok::Semi)?;
            stmts.push((name, value));
        }
        Ok(stmts)
    }

    fn expr(&mut self) -> Result<Expr, JdlError> {
        self.or_expr()
    }

    fn or_expr(&mut self) -> Result<Expr, JdlError> {
        let mut lhs = self.and_expr()?;
        while matches!(self.peek(), Some(t) if t.tok == Tok::Or) {
            self.next();
            let rhs = self.and_expr()?;
            lhs = Expr::Bin(BinOp::Or, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn and_expr(&mut self) -> Result<Expr, JdlError> {
        let mut lhs = self.cmp_expr()?;
        while matches!(self.peek(), Some(t) if t.tok == Tok::And) {
            self.next();
            let rhs = self.cmp_expr()?;
            lhs = Expr::Bin(BinOp::And, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn cmp_expr(&mut self) -> Result<Expr, JdlError> {
        let lhs = self.add_expr()?;
        let op = match self.peek().map(|t| &t.tok) {
            Some(Tok::Eq) => BinOp::Eq,
            Some(Tok::Ne) => BinOp::Ne,
            Some(Tok::Lt) => BinOp::Lt,
            Some(Tok::Le) => BinOp::Le,
            Some(Tok::Gt) => BinOp::Gt,
            Some(Tok::Ge) => BinOp::Ge,
            _ => return Ok(lhs),
        };
        self.next();
        let rhs = self.add_expr()?;
        Ok(Expr::Bin(op, Box::new(lhs), Box::new(rhs)))
    }

    fn add_expr(&mut self) -> Result<Expr, JdlError> {
        let mut lhs = self.mul_expr()?;
        loop {
            let op = match self.peek().map(|t| &t.tok) {
                Some(Tok::Plus) => BinOp::Add,
                Some(Tok::Minus) => BinOp::Sub,
                _ => break,
            };
            self.next();
            let rhs = self.mul_expr()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn mul_expr(&mut self) -> Result<Expr, JdlError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().map(|t| &t.tok) {
                Some(Tok::Star) => BinOp::Mul,
                Some(Tok::Slash) => BinOp::Div,
                _ => break,
            };
            self.next();
            let rhs = self.unary()?;
            lhs = Expr::Bin(op, Box::new(lhs), Box::new(rhs));
        }
        Ok(lhs)
    }

    fn unary(&mut self) -> Result<Expr, JdlError> {
        match self.peek().map(|t| &t.tok) {
            Some(Tok::Not) => {
                self.next();
                Ok(Expr::Not(Box::new(self.unary()?)))
            }
            Some(Tok::Minus) => {
                self.next();
                Ok(Expr::Neg(Box::new(self.unary()?)))
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<Expr, JdlError> {
        let t = self.next().ok_or_else(|| self.eof_err())?;
        match t.tok {
            Tok::Int(v) => Ok(Expr::Int(v)),
            Tok::Str(s) => Ok(Expr::Str(s)),
            Tok::Ident(first) => {
                let mut name = first;
                while matches!(self.peek(), Some(t) if t.tok == Tok::Dot) {
                    self.next();
                    match self.next() {
                        Some(Spanned {
                            tok: Tok::Ident(part),
                            ..
                        }) => {
                            name.push('.');
                            name.push_str(&part);
                        }
                        Some(t) => {
                            return Err(parse_err(
                                t.line,
                                t.col,
                                format!("expected identifier after '.', found {}", t.tok),
                            ))
                        }
                        None => return Err(self.eof_err()),
                    }
                }
                Ok(Expr::Attr(name))
            }
            Tok::LParen => {
                let inner = self.expr()?;
                self.expect(&Tok::RParen)?;
                Ok(inner)
            }
            Tok::LBrace => {
                let mut items = Vec::new();
                if matches!(self.peek(), Some(t) if t.tok == Tok::RBrace) {
                    self.next();
                    return Ok(Expr::List(items));
                }
                loop {
                    items.push(self.expr()?);
                    match self.next() {
                        Some(Spanned {
                            tok: Tok::Comma, ..
                        }) => continue,
                        Some(Spanned {
                            tok: Tok::RBrace, ..
                        }) => break,
                        Some(t) => {
                            return Err(parse_err(
                                t.line,
                                t.col,
                                format!("expected ',' or '}}', found {}", t.tok),
                            ))
                        }
                        None => return Err(self.eof_err()),
                    }
                }
                Ok(Expr::List(items))
            }
            other => Err(parse_err(
                t.line,
                t.col,
                format!("expected expression, found {other}"),
            )),
        }
    }
}

/// Parse a JDL document into ordered (attribute, expression) statements.
pub fn parse_document(text: &str) -> Result<Vec<(String, Expr)>, JdlError> {
    let toks = Lexer::new(text).lex()?;
    Parser { toks, pos: 0 }.document()
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Undefined,
    Int(i64),
    Str(String),
    Bool(bool),
    List(Vec<Value>),
}

impl Value {
    pub fn is_true(&self) -> bool {
        matches!(self, Value::Bool(true))
    }
}

/// Evaluate under a name resolver; unknown names must resolve to
/// `Undefined`, which propagates per three-valued logic.
pub fn eval<R>(expr: &Expr, resolve: &R) -> Value
where
    R: Fn(&str) -> Value,
{
    match expr {
        Expr::Int(v) => Value::Int(*v),
        Expr::Str(s) => Value::Str(s.clone()),
        Expr::Bool(b) => Value::Bool(*b),
        Expr::Attr(name) => resolve(name),
        Expr::List(items) => Value::List(items.iter().map(|e| eval(e, resolve)).collect()),
        Expr::Not(inner) => match eval(inner, resolve) {
            Value::Bool(b) => Value::Bool(!b),
            _ => Value::Undefined,
        },
        Expr::Neg(inner) => match eval(inner, resolve) {
            Value::Int(v) => v.checked_neg().map_or(Value::Undefined, Value::Int),
            _ => Value::Undefined,
        },
        Expr::Bin(op, lhs, rhs) => {
            // evaluation is side-effect free, so both operands can always be
            // computed; dominance rules below give short-circuit semantics
            let l = eval(lhs, resolve);
            let r = eval(rhs, resolve);
            eval_bin(*op, l, r)
        }
    }
}

fn eval_bin(op: BinOp, l: Value, r: Value) -> Value {
    use BinOp::*;
    match (op, l, r) {
        // false dominates conjunction, true dominates disjunction, even
        // against an undefined operand
        (And, Value::Bool(false), _) | (And, _, Value::Bool(false)) => Value::Bool(false),
        (And, Value::Bool(true), Value::Bool(true)) => Value::Bool(true),
        (And, ..) => Value::Undefined,
        (Or, Value::Bool(true), _) | (Or, _, Value::Bool(true)) => Value::Bool(true),
        (Or, Value::Bool(false), Value::Bool(false)) => Value::Bool(false),
        (Or, ..) => Value::Undefined,
        (Eq, Value::Int(a), Value::Int(b)) => Value::Bool(a == b),
        (Ne, Value::Int(a), Value::Int(b)) => Value::Bool(a != b),
        (Lt, Value::Int(a), Value::Int(b)) => Value::Bool(a < b),
        (Le, Value::Int(a), Value::Int(b)) => Value::Bool(a <= b),
        (Gt, Value::Int(a), Value::Int(b)) => Value::Bool(a > b),
        (Ge, Value::Int(a), Value::Int(b)) => Value::Bool(a >= b),
        // strings support equality only
        (Eq, Value::Str(a), Value::Str(b)) => Value::Bool(a == b),
        (Ne, Value::Str(a), Value::Str(b)) => Value::Bool(a != b),
        (Eq, Value::Bool(a), Value::Bool(b)) => Value::Bool(a == b),
        (Ne, Value::Bool(a), Value::Bool(b)) => Value::Bool(a != b),
        (Add, Value::Int(a), Value::Int(b)) => {
            a.checked_add(b).map_or(Value::Undefined, Value::Int)
        }
        (Sub, Value::Int(a), Value::Int(b)) => {
            a.checked_sub(b).map_or(Value::Undefined, Value::Int)
        }
        (Mul, Value::Int(a), Value::Int(b)) => {
            a.checked_mul(b).map_or(Value::Undefined, Value::Int)
        }
        (Div, Value::Int(a), Value::Int(b)) => {
            if b == 0 {
                Value::Undefined
            } else {
                a.checked_div(b).map_or(Value::Undefined, Value::Int)
            }
        }
        // undefined operands and type mismatches
        _ => Value::Undefined,
    }
}

// ---------------------------------------------------------------------------
// Job ad
// ---------------------------------------------------------------------------

/// A parsed, validated job description.
#[derive(Debug, Clone, PartialEq)]
pub struct JobAd {
    pub executable: String,
    pub arguments: String,
    pub virtual_organisation: String,
    pub requirements: Expr,
    pub rank: Expr,
    pub input_data: Vec<String>,
    pub walltime_s: Option<u64>,
}

fn const_eval(expr: &Expr) -> Value {
    eval(expr, &|_| Value::Undefined)
}

/// Parse a JDL document into a validated job ad. Grammar violations are
/// parse errors with position; a well-formed document with missing or
/// ill-typed mandatory attributes is a validation error.
pub fn parse_jdl(text: &str) -> Result<JobAd, JdlError> {
    let stmts = parse_document(text)?;
    let mut attrs: BTreeMap<String, Expr> = BTreeMap::new();
    for (name, expr) in stmts {
        if attrs.insert(name.clone(), expr).is_some() {
            return Err(JdlError::Validation(format!("duplicate attribute {name}")));
        }
    }

    let string_attr = |name: &str| -> Result<Option<String>, JdlError> {
        match attrs.get(name) {
            None => Ok(None),
            Some(expr) => match const_eval(expr) {
                Value::Str(s) => Ok(Some(s)),
                _ => Err(JdlError::Validation(format!("{name} must be a string"))),
            },
        }
    };

    let executable = string_attr("Executable")?
        .ok_or_else(|| JdlError::Validation("missing Executable".into()))?;
    let virtual_organisation = string_attr("VirtualOrganisation")?
        .ok_or_else(|| JdlError::Validation("missing VirtualOrganisation".into()))?;
    let arguments = string_attr("Arguments")?.unwrap_or_default();

    let input_data = match attrs.get("InputData") {
        None => Vec::new(),
        Some(expr) => match const_eval(expr) {
            Value::List(items) => {
                let mut lfns = Vec::new();
                for item in items {
                    match item {
                        Value::Str(s) => lfns.push(s),
                        _ => {
                            return Err(JdlError::Validation(
                                "InputData must be a list of strings".into(),
                            ))
                        }
                    }
                }
                lfns
            }
            _ => return Err(JdlError::Validation("InputData must be a list".into())),
        },
    };

    let walltime_s = match attrs.get("Walltime") {
        None => None,
        Some(expr) => match const_eval(expr) {
            Value::Int(v) if v >= 0 => Some(v as u64),
            _ => {
                return Err(JdlError::Validation(
                    "Walltime must be a non-negative integer".into(),
                ))
            }
        },
    };

    let requirements = attrs.remove("Requirements").unwrap_or(Expr::Bool(true));
    let rank = attrs.remove("Rank").unwrap_or(Expr::Int(0));

    Ok(JobAd {
        executable,
        arguments,
        virtual_organisation,
        requirements,
        rank,
        input_data,
        walltime_s,
    })
}
